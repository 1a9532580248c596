//! Final report: metrics, per-channel table, band chart and image sheets.

use std::fmt::Write as _;

use chanprobe::genbackend::Band;
use chanprobe::metrics::{r_relevance, summarize, Summary};
use chanprobe::{Colorspace, FeatureLabel, ImageTensor, PairVote};

use crate::artifacts::*;
use crate::error::CliResult;
use crate::stages::Pipeline;

const BANDS: [Band; 3] = [Band::Coarse, Band::Middle, Band::Fine];

/// Vertical concatenation; parts must share the width and are promoted to RGB.
pub fn vstack(parts: &[ImageTensor]) -> CliResult<ImageTensor> {
    let width = parts.first().map_or(0, ImageTensor::width);
    if parts.is_empty() || parts.iter().any(|p| p.width() != width) {
        return Err(chanprobe::Error::Shape("vstack parts must be non-empty and share the width".into()).into());
    }
    let height = parts.iter().map(ImageTensor::height).sum();
    let data = parts.iter().flat_map(|p| p.to_rgb().data().to_vec()).collect();
    Ok(ImageTensor::new(height, width, Colorspace::Rgb, data)?)
}

fn label_name(l: FeatureLabel) -> &'static str {
    match l {
        FeatureLabel::Relevant => "RELEVANT",
        FeatureLabel::Spurious => "SPURIOUS",
        FeatureLabel::Undetermined => "UNDETERMINED",
    }
}

fn band_name(b: Band) -> &'static str {
    match b {
        Band::Coarse => "COARSE",
        Band::Middle => "MIDDLE",
        Band::Fine => "FINE",
    }
}

pub fn format_r_relevance(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

fn summary_cells(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{},{},{}", s.mean, s.std, s.n),
        None => ",,0".into(),
    }
}

pub fn metrics_csv(r: &ReportRecord) -> String {
    let mut out = String::from("metric,mean,std,n\n");
    let r_rel = r.r_relevance.map_or(String::new(), |v| v.to_string());
    let n_rel = r.relevant_channels + r.spurious_channels;
    let _ = writeln!(out, "r_relevance,{r_rel},,{n_rel}");
    for (name, s) in [("ms_ssim", r.ms_ssim), ("d2_image", r.d2_image), ("d2_boundary", r.d2_boundary)] {
        let _ = writeln!(out, "{name},{}", summary_cells(s));
    }
    let _ = writeln!(out, "relevant_channels,{},,", r.relevant_channels);
    let _ = writeln!(out, "spurious_channels,{},,", r.spurious_channels);
    let _ = writeln!(out, "undetermined_channels,{},,", r.undetermined_channels);
    let _ = writeln!(out, "influential_inputs,{},,", r.influential_inputs);
    let _ = writeln!(out, "boundary_inputs,{},,", r.boundary_inputs);
    out
}

pub fn channels_csv(a: &AttributeRecord) -> String {
    let mut out = String::from("layer,channel,band,label,votes_relevant,votes_not_relevant,votes_ambiguous,influential_seeds\n");
    for v in &a.verdicts {
        let n = |k: PairVote| v.verdict.votes.iter().filter(|x| **x == k).count();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            v.verdict.channel.layer_id,
            v.verdict.channel.channel,
            band_name(v.band),
            label_name(v.verdict.label),
            n(PairVote::RelevantChange),
            n(PairVote::NoRelevantChange),
            n(PairVote::Ambiguous),
            v.influential_seeds.len()
        );
    }
    out
}

/// Grouped bar chart of label counts per band.
pub fn bands_svg(bands: &[BandCounts]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 260.0;
    const BASE: f64 = 220.0;
    let max = bands
        .iter()
        .flat_map(|b| [b.relevant, b.spurious, b.undetermined])
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<line x1=\"20\" y1=\"{BASE}\" x2=\"{}\" y2=\"{BASE}\" stroke=\"black\"/>", W - 20.0);
    let colors = [("#2e7d32", "relevant"), ("#c62828", "spurious"), ("#9e9e9e", "undetermined")];
    for (i, b) in bands.iter().enumerate() {
        let x0 = 40.0 + i as f64 * 145.0;
        for (j, (value, (color, name))) in [b.relevant, b.spurious, b.undetermined].iter().zip(colors).enumerate() {
            let h = 180.0 * *value as f64 / max;
            let x = x0 + j as f64 * 36.0;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{}\" width=\"30\" height=\"{h}\" fill=\"{color}\"><title>{name}: {value}</title></rect>",
                BASE - h
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{value}</text>", x + 15.0, BASE - h - 4.0);
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x0 + 51.0, BASE + 18.0, band_name(b.band));
    }
    for (j, (color, name)) in colors.iter().enumerate() {
        let x = 40.0 + j as f64 * 120.0;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", BASE + 28.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{name}</text>", x + 14.0, BASE + 37.0);
    }
    s.push_str("</svg>\n");
    s
}

pub fn build_record(
    mines: &[MineRecord],
    attribution: &AttributeRecord,
    explores: &[ExploreRecord],
    repair: Option<&RepairRecord>,
) -> ReportRecord {
    let count = |l: FeatureLabel| attribution.verdicts.iter().filter(|v| v.verdict.label == l).count();
    let (n_rel, n_spu, n_und) = (
        count(FeatureLabel::Relevant),
        count(FeatureLabel::Spurious),
        count(FeatureLabel::Undetermined),
    );
    let boundary: Vec<&BoundaryRecord> = explores.iter().flat_map(|e| &e.boundary).collect();
    let series = |f: fn(&BoundaryMetrics) -> f64| summarize(&boundary.iter().map(|b| f(&b.metrics)).collect::<Vec<_>>());
    let bands = BANDS
        .iter()
        .map(|&band| {
            let in_band = |l: FeatureLabel| {
                attribution
                    .verdicts
                    .iter()
                    .filter(|v| v.band == band && v.verdict.label == l)
                    .count()
            };
            BandCounts {
                band,
                relevant: in_band(FeatureLabel::Relevant),
                spurious: in_band(FeatureLabel::Spurious),
                undetermined: in_band(FeatureLabel::Undetermined),
            }
        })
        .collect();
    ReportRecord {
        seeds: mines.len(),
        r_relevance: r_relevance(n_rel, n_spu),
        relevant_channels: n_rel,
        spurious_channels: n_spu,
        undetermined_channels: n_und,
        influential_inputs: mines.iter().map(|m| m.influential.len()).sum(),
        boundary_inputs: boundary.len(),
        ms_ssim: series(|m| m.ms_ssim),
        d2_image: series(|m| m.d2_image),
        d2_boundary: series(|m| m.d2_boundary),
        bands,
        deterministic: attribution.deterministic && repair.is_none_or(|r| r.deterministic),
        repair: repair.map(|r| r.outcome.clone()),
    }
}

pub fn write_report(
    p: &Pipeline,
    mines: &[MineRecord],
    attribution: &AttributeRecord,
    explores: &[ExploreRecord],
    repair: Option<&RepairRecord>,
) -> CliResult<ReportRecord> {
    let rec = build_record(mines, attribution, explores, repair);
    let file = |name: &str| p.layout.stage_file(REPORT, name);
    write_envelope(&file("metrics.json"), REPORT, &p.hash, &rec)?;
    write_text(&file("metrics.csv"), &metrics_csv(&rec))?;
    write_text(&file("channels.csv"), &channels_csv(attribution))?;
    write_text(&file("bands.svg"), &bands_svg(&rec.bands))?;

    let mut spurious: Vec<&ChannelAttribution> = attribution
        .verdicts
        .iter()
        .filter(|v| v.verdict.label == FeatureLabel::Spurious && !v.samples.is_empty())
        .collect();
    spurious.sort_by(|a, b| b.influential_seeds.len().cmp(&a.influential_seeds.len()));
    let rows = spurious
        .iter()
        .take(p.config.report.top_n)
        .map(|v| ImageTensor::load_png(p.layout.abs(&v.samples[0].triptych)))
        .collect::<chanprobe::Result<Vec<_>>>()?;
    if !rows.is_empty() {
        vstack(&rows)?.save_png(file("spurious_gallery.png"))?;
    }

    let rows = explores
        .iter()
        .flat_map(|e| &e.boundary)
        .take(p.config.report.grid_examples)
        .map(|b| {
            let orig = ImageTensor::load_png(p.layout.abs(&b.probe.original_image))?;
            let star = ImageTensor::load_png(p.layout.abs(&b.boundary_image))?;
            ImageTensor::hstack(&[&orig, &star])
        })
        .collect::<chanprobe::Result<Vec<_>>>()?;
    if !rows.is_empty() {
        vstack(&rows)?.save_png(file("boundary_grid.png"))?;
    }
    log::info!("report: R_relevance {}", format_r_relevance(rec.r_relevance));
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vstack_concatenates_rows() {
        let a = ImageTensor::filled(2, 3, Colorspace::Rgb, 0.0).unwrap();
        let b = ImageTensor::filled(1, 3, Colorspace::Grayscale, 1.0).unwrap();
        let s = vstack(&[a, b]).unwrap();
        assert_eq!(s.shape(), [3, 3, 3]);
        assert_eq!(s.get(1, 2, 0), 0.0);
        assert_eq!(s.get(2, 0, 1), 1.0);
        let c = ImageTensor::filled(1, 4, Colorspace::Rgb, 0.0).unwrap();
        assert!(vstack(&[s, c]).is_err());
    }

    #[test]
    fn undefined_ratio_is_spelled_out() {
        assert_eq!(format_r_relevance(None), "undefined");
        assert_eq!(format_r_relevance(Some(0.5)), "0.5000");
    }

    #[test]
    fn svg_has_one_bar_per_band_and_label() {
        let bands: Vec<BandCounts> = BANDS
            .iter()
            .map(|&band| BandCounts {
                band,
                relevant: 1,
                spurious: 2,
                undetermined: 0,
            })
            .collect();
        let svg = bands_svg(&bands);
        assert_eq!(svg.matches("<rect").count(), 9 + 3);
        assert!(svg.contains("MIDDLE"));
    }
}
