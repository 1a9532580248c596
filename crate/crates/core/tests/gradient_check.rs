use chanprobe::genbackend::{gradient_of_composite, Generator, SyntheticConfig, SyntheticRenderer};
use chanprobe::sut::{RegionPoolBackbone, ToyClassifier};
use chanprobe::StyleState;

fn toy_sut(seed: u64) -> ToyClassifier {
    let bb = RegionPoolBackbone::new(64, 64, 3, 4).unwrap();
    let nf = bb.feature_count();
    let w: Vec<f64> = (0..nf).map(|i| ((i as f64 + seed as f64) * 1.37).sin() * 2.0).collect();
    ToyClassifier::new(bb, vec![w], vec![0.3], 0).unwrap()
}

fn central_difference(g: &SyntheticRenderer, sut: &ToyClassifier, s: &StyleState, h: f64) -> Vec<Vec<f64>> {
    use chanprobe::sut::Sut;
    let y = |st: &StyleState| sut.forward(&g.synthesize(st).unwrap()).unwrap().target_value();
    let mut out = g.topology().zeros_like();
    for ch in s.channels().collect::<Vec<_>>() {
        let up = y(&s.with_offset(ch, h).unwrap());
        let down = y(&s.with_offset(ch, -h).unwrap());
        out[ch.layer_id][ch.channel] = (up - down) / (2.0 * h);
    }
    out
}

fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.concat()
        .iter()
        .zip(b.concat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

#[test]
fn synthetic_composite_matches_central_differences() {
    let g = SyntheticRenderer::new(SyntheticConfig {
        layer_widths: vec![6, 5, 5],
        ..Default::default()
    })
    .unwrap();
    for seed in 0..10u64 {
        let sut = toy_sut(seed);
        let s = g.sample_style_state(seed, 0.7).unwrap();
        let analytic = gradient_of_composite(&s, &g, &sut, 0).unwrap();
        let fd = central_difference(&g, &sut, &s, 1e-4);
        let err = max_relative_error(&analytic, &fd);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
