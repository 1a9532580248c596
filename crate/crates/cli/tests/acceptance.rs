//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use chanprobe::genbackend::{EmbedGenerator, EmbedResponse, Generator, ImageShape, CUE_CHANNEL};
use chanprobe::metrics::{d2_image, ms_ssim, r_relevance};
use chanprobe::perturb::{channel_perturb, perturbation_delta, refine_boundary, OracleSpec};
use chanprobe::scenario::{build_scenario, Scenario, ScenarioSpec};
use chanprobe::sensitivity::{fda, grad_saliency, smoothgrad, CandidateSet};
use chanprobe::sut::{CountingSut, MeanLinearSut, Sut};
use chanprobe::{predicted_label, ChannelRef, Colorspace, FeatureLabel, ImageTensor, StyleState, TaskKind};
use chanprobe_cli::artifacts::{ScreenRecord, SCREEN};
use chanprobe_cli::config::PipelineConfig;
use chanprobe_cli::stages::Pipeline;

const GRAD_FD_STEP: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_MAX_REL_ERR: f64 = 1e-3;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
/// Entries below this magnitude in both maps count as agreeing zeros.
const GRAD_ZERO_FLOOR: f64 = 1e-9;
const LINEAR_TOL: f64 = 1e-6;
const FDA_STEP: f64 = 0.1;
const MINING_SEEDS: u64 = 10;
const ROOT_REL_TOL: f64 = 0.01;
const BISECTION_TOL: f64 = 0.01;
const BISECTION_MAX_ITER: usize = 12;
const E2E_SEEDS: usize = 50;
const E2E_TIME_LIMIT: Duration = Duration::from_secs(300);
const METRIC_TOL: f64 = 1e-6;
const TAU_LOW: f64 = 0.4;
const TAU_HIGH: f64 = 0.6;
const MONOTONE_SEEDS: u64 = 50;
const REPAIR_MAX_ORIGINAL_DROP: f64 = 0.01;
const FDA_COUNT_SEEDS: usize = 10;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn scenario() -> Result<Scenario, String> {
    build_scenario(&ScenarioSpec::default()).map_err(e)
}

fn target_logit(g: &dyn Generator, sut: &dyn Sut, s: &StyleState) -> f64 {
    sut.forward(&g.synthesize(s).unwrap()).unwrap().target_value()
}

fn gradient_fidelity() -> Check {
    let sc = scenario()?;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let s = sc.generator.sample_style_state(seed, 1.0).map_err(e)?;
        let map = grad_saliency(&s, &sc.generator, &sc.sut, 0).map_err(e)?;
        for ch in s.channels().collect::<Vec<_>>() {
            let up = target_logit(&sc.generator, &sc.sut, &s.with_offset(ch, GRAD_FD_STEP).unwrap());
            let down = target_logit(&sc.generator, &sc.sut, &s.with_offset(ch, -GRAD_FD_STEP).unwrap());
            let fd = (up - down) / (2.0 * GRAD_FD_STEP);
            let a = map.score(ch).unwrap();
            let scale = a.abs().max(fd.abs());
            if scale > GRAD_ZERO_FLOOR {
                worst = worst.max((a - fd).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < GRAD_MAX_REL_ERR, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < GRAD_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:.2e} over {GRAD_SEEDS} seeds in {:.1} s", elapsed.as_secs_f64()))
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.concat().iter().zip(b.concat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn linear_equivalence() -> Check {
    let shape = ImageShape {
        height: 8,
        width: 8,
        channels: 3,
    };
    // Small gain keeps every pixel inside [0, 1], where the composite is linear.
    let g = EmbedGenerator::random(vec![4, 4, 4], shape, 0.005, EmbedResponse::Linear, 7).map_err(e)?;
    let sut = MeanLinearSut { w: 3.0, b: 0.1 };
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for seed in 0..3 {
        let s = g.sample_style_state(seed, 1.0).map_err(e)?;
        let grad = grad_saliency(&s, &g, &sut, 0).map_err(e)?;
        for n in [1, 5, 10] {
            for sd in [0.01, 0.5, 3.0] {
                let sm = smoothgrad(&s, &g, &sut, 0, n, &[sd; 3], seed + 100).map_err(e)?;
                worst = worst.max(max_abs_diff(&grad.scores, &sm.scores));
                runs += 1;
            }
        }
        let fd = fda(&s, &g, &sut, 0, FDA_STEP).map_err(e)?;
        worst = worst.max(max_abs_diff(&grad.scores, &fd.scores));
        runs += 1;
    }
    ensure(worst <= LINEAR_TOL, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.2e} across {runs} SmoothGrad/FDA maps"))
}

/// Channels whose δ-rule perturbation moves the target logit toward the
/// threshold by more than `tau_fraction·|y0|`, by direct enumeration.
fn brute_force_influential(
    g: &dyn Generator,
    sut: &dyn Sut,
    s: &StyleState,
    alpha: &[Vec<f64>],
    tau_fraction: f64,
    epsilon: f64,
) -> BTreeSet<ChannelRef> {
    let y0 = target_logit(g, sut, s);
    let mut out = BTreeSet::new();
    for ch in s.channels().collect::<Vec<_>>() {
        let a = alpha[ch.layer_id][ch.channel];
        if a == 0.0 {
            continue;
        }
        let delta = -epsilon * a.signum() * if y0 >= 0.0 { 1.0 } else { -1.0 };
        let y1 = target_logit(g, sut, &s.with_offset(ch, delta).unwrap());
        let toward = if y0 >= 0.0 { y0 - y1 } else { y1 - y0 };
        if toward > tau_fraction * y0.abs() {
            out.insert(ch);
        }
    }
    out
}

fn mined(g: &dyn Generator, sut: &dyn Sut, s: &StyleState, cands: &CandidateSet, tau: f64) -> Result<BTreeSet<ChannelRef>, String> {
    let run = channel_perturb(s, g, sut, cands, &OracleSpec::confidence(tau)).map_err(e)?;
    ensure(run.failures.is_empty(), || format!("probe failures: {:?}", run.failures))?;
    Ok(run.recorded().map(|r| r.channel).collect())
}

fn oracle_equivalence() -> Check {
    let sc = scenario()?;
    let mut total = 0;
    for seed in 0..MINING_SEEDS {
        let s = sc.generator.sample_style_state(seed, 1.0).map_err(e)?;
        let map = grad_saliency(&s, &sc.generator, &sc.sut, 0).map_err(e)?;
        let got = mined(&sc.generator, &sc.sut, &s, &CandidateSet::all_nonzero(&map), TAU_LOW)?;
        let want = brute_force_influential(&sc.generator, &sc.sut, &s, &map.scores, TAU_LOW, 10.0);
        ensure(got == want, || format!("seed {seed}: mined {got:?} vs brute force {want:?}"))?;
        total += got.len();
    }
    Ok(format!("identical sets on {MINING_SEEDS} seeds ({total} influential pairs)"))
}

fn boundary_refinement() -> Check {
    // Pixels are 0.5 + GAIN·δ, so y(δ) = c0 + c1·δ and the margin root is −c0/c1.
    const GAIN: f64 = 0.01;
    let cases = [(1.0, -0.5), (2.0, -0.25), (-1.5, 0.5), (3.0, -2.0)];
    let g = EmbedGenerator::single_channel(8, 8, GAIN).map_err(e)?;
    let s = StyleState::new(vec![vec![0.0]], 0, 1.0).map_err(e)?;
    let ch = ChannelRef::new(0, 0);
    let mut worst: f64 = 0.0;
    for (c0, c1) in cases {
        let w = c1 / GAIN;
        let sut = MeanLinearSut { w, b: c0 - 0.5 * w };
        let root: f64 = -c0 / c1;
        let flip = 10.0 * root.signum();
        let r = refine_boundary(&s, &g, &sut, ch, flip, BISECTION_TOL, BISECTION_MAX_ITER).map_err(e)?;
        let rel = (r.delta_star - root).abs() / root.abs();
        worst = worst.max(rel);
        ensure(rel <= ROOT_REL_TOL, || format!("y = {c0} + {c1}δ: δ* = {} vs root {root}", r.delta_star))?;
        let label = |d: f64| predicted_label(&sut.forward(&g.synthesize(&s.with_offset(ch, d).unwrap()).unwrap()).unwrap());
        ensure(label(r.delta_star) != label(0.0), || format!("y = {c0} + {c1}δ: no flip at δ*"))?;
    }
    Ok(format!("{} roots, worst relative error {worst:.2e}", cases.len()))
}

fn pipeline_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.output_dir = out.to_path_buf();
    c.seeds.count = E2E_SEEDS;
    c
}

fn ground_truth_equivalence(out: &Path) -> Check {
    let start = Instant::now();
    let p = Pipeline::new(pipeline_config(out)).map_err(e)?;
    p.run_all().map_err(e)?;
    let elapsed = start.elapsed();
    let verdicts = p.read_attribution().map_err(e)?.verdicts;
    let gt = scenario()?.ground_truth;
    let with = |l: FeatureLabel| -> BTreeSet<ChannelRef> {
        verdicts.iter().filter(|v| v.verdict.label == l).map(|v| v.verdict.channel).collect()
    };
    let (rel, spu) = (with(FeatureLabel::Relevant), with(FeatureLabel::Spurious));
    let influential: Vec<ChannelRef> = verdicts.iter().map(|v| v.verdict.channel).collect();
    let gt_rel: BTreeSet<ChannelRef> = influential.iter().copied().filter(|&c| gt.is_relevant(c) == Some(true)).collect();
    let gt_spu: BTreeSet<ChannelRef> = influential.iter().copied().filter(|&c| gt.is_relevant(c) == Some(false)).collect();
    ensure(rel == gt_rel && spu == gt_spu, || format!("relevant {rel:?} spurious {spu:?} vs truth {gt_rel:?} / {gt_spu:?}"))?;
    ensure(spu.contains(&CUE_CHANNEL), || format!("cue {CUE_CHANNEL} not in spurious set {spu:?}"))?;
    ensure(elapsed < E2E_TIME_LIMIT, || format!("run-all took {elapsed:?}"))?;
    Ok(format!(
        "{} relevant / {} spurious match truth, cue {CUE_CHANNEL} spurious, run-all {:.1} s",
        rel.len(),
        spu.len(),
        elapsed.as_secs_f64()
    ))
}

fn metric_arithmetic() -> Check {
    let round2 = |v: Option<f64>| v.map(|x| (x * 100.0).round() / 100.0);
    ensure(round2(r_relevance(68, 36)) == Some(0.65), || format!("{:?}", r_relevance(68, 36)))?;
    ensure(round2(r_relevance(39, 56)) == Some(0.41), || format!("{:?}", r_relevance(39, 56)))?;
    for side in [64, 192] {
        let x = ImageTensor::from_fn(side, side, Colorspace::Rgb, |y, x, k| ((y * 31 + x * 17 + k * 7) % 97) as f64 / 96.0)
            .map_err(e)?;
        let m = ms_ssim(&x, &x, 5).map_err(e)?;
        ensure((m.value - 1.0).abs() <= METRIC_TOL, || format!("ms_ssim(x,x)={} at side {side}", m.value))?;
    }
    let zero = ImageTensor::filled(16, 16, Colorspace::Rgb, 0.0).map_err(e)?;
    let one = ImageTensor::filled(16, 16, Colorspace::Rgb, 1.0).map_err(e)?;
    let d = d2_image(&zero, &one).map_err(e)?;
    ensure((d - 1.0).abs() <= METRIC_TOL, || format!("d2_image={d}"))?;
    Ok(format!(
        "r_relevance {:.4} / {:.4}, ms_ssim(x,x)=1, d2_image=1",
        r_relevance(68, 36).unwrap(),
        r_relevance(39, 56).unwrap()
    ))
}

fn threshold_monotonicity() -> Check {
    let sc = scenario()?;
    let (mut low, mut high) = (0, 0);
    for seed in 0..MONOTONE_SEEDS {
        let s = sc.generator.sample_style_state(seed, 1.0).map_err(e)?;
        let map = grad_saliency(&s, &sc.generator, &sc.sut, 0).map_err(e)?;
        let cands = CandidateSet::all_nonzero(&map);
        let a = mined(&sc.generator, &sc.sut, &s, &cands, TAU_LOW)?;
        let b = mined(&sc.generator, &sc.sut, &s, &cands, TAU_HIGH)?;
        ensure(b.is_subset(&a), || format!("seed {seed}: {b:?} not within {a:?}"))?;
        low += a.len();
        high += b.len();
    }
    Ok(format!("{high} pairs at τ={TAU_HIGH} within {low} at τ={TAU_LOW} on {MONOTONE_SEEDS} seeds"))
}

fn repair_direction(out: &Path) -> Check {
    let p = Pipeline::new(pipeline_config(out)).map_err(e)?;
    let rec = p.read_repair().map_err(e)?.ok_or("no repair summary")?;
    let o = rec.outcome;
    let after = o.after.ok_or("repair did not fine-tune")?;
    let (g0, g1) = (o.before.generated_holdout.ok_or("empty generated holdout")?, after.generated_holdout.unwrap());
    let (o0, o1) = (o.before.original_holdout.ok_or("empty original holdout")?, after.original_holdout.unwrap());
    let detail = format!(
        "generated holdout {g0:.3} -> {g1:.3} (n={}), original holdout {o0:.3} -> {o1:.3} (n={})",
        rec.counts.generated_holdout, rec.counts.original_holdout
    );
    ensure(g1 > g0, || detail.clone())?;
    ensure(o0 - o1 < REPAIR_MAX_ORIGINAL_DROP, || detail.clone())?;
    Ok(detail)
}

fn json_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "json" || x == "jsonl") {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &Path, second: &Path) -> Check {
    let mut cfg = pipeline_config(second);
    cfg.workers = 4;
    let p = Pipeline::new(cfg).map_err(e)?;
    p.run_all().map_err(e)?;
    let (a, b) = (json_files(first), json_files(second));
    ensure(!a.is_empty() && a == b, || format!("file lists differ: {} vs {}", a.len(), b.len()))?;
    for rel in &a {
        let x = std::fs::read(first.join(rel)).map_err(e)?;
        let y = std::fs::read(second.join(rel)).map_err(e)?;
        ensure(x == y, || format!("{} differs", rel.display()))?;
    }
    Ok(format!("{} JSON artifacts byte-identical (second run with 4 workers)", a.len()))
}

fn fda_cost(out: &Path) -> Check {
    let sc = scenario()?;
    let expected = sc.generator.topology().total_channels() + 1;
    for seed in 0..FDA_COUNT_SEEDS as u64 {
        let s = sc.generator.sample_style_state(seed, 1.0).map_err(e)?;
        let counting = CountingSut::new(&sc.sut);
        fda(&s, &sc.generator, &counting, 0, FDA_STEP).map_err(e)?;
        ensure(counting.forward_calls() == expected, || format!("seed {seed}: {} calls", counting.forward_calls()))?;
    }
    let mut cfg = pipeline_config(out);
    cfg.seeds.count = FDA_COUNT_SEEDS;
    cfg.screening.method = "fda".into();
    let p = Pipeline::new(cfg).map_err(e)?;
    p.screen().map_err(e)?;
    for &seed in p.seeds() {
        let path = p.layout.seed_file(SCREEN, seed);
        let rec: ScreenRecord = chanprobe_cli::artifacts::read_envelope(&path, SCREEN, &p.hash).map_err(e)?;
        ensure(rec.forward_calls == expected, || format!("screen seed {seed}: {} calls", rec.forward_calls))?;
    }
    Ok(format!("{expected} forward calls per seed (Σd = {}), direct and via screen", expected - 1))
}

fn main() {
    // Sanity on the δ rule used by the brute-force oracle.
    assert_eq!(perturbation_delta(1.0, 2.0, 10.0, TaskKind::Binary), -10.0);

    let tmp = tempfile::tempdir().expect("temp dir");
    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    let fda_dir = tmp.path().join("fda");

    let checks: Vec<(&str, Box<dyn FnOnce() -> Check>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("method equivalence on linear composites", Box::new(linear_equivalence)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("boundary refinement", Box::new(boundary_refinement)),
        ("end-to-end ground-truth equivalence", Box::new(|| ground_truth_equivalence(&run_a))),
        ("metric arithmetic", Box::new(metric_arithmetic)),
        ("threshold monotonicity", Box::new(threshold_monotonicity)),
        ("repair direction", Box::new(|| repair_direction(&run_a))),
        ("determinism", Box::new(|| determinism(&run_a, &run_b))),
        ("FDA cost contract", Box::new(|| fda_cost(&fda_dir))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
