//! Repair-set assembly and head-only fine-tuning with before/after evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ChannelRef, ImageTensor};
use crate::error::{Error, Result};
use crate::sut::{accuracy, HeadTrainConfig, LabeledImage, Sut, TrainReport};

pub const DEFAULT_MIX_RATIO: f64 = 0.2;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepairSource {
    Original,
    BoundaryRelevant,
    SpuriousInvariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Holdout,
}

/// A candidate for the repair pool. `label: None` marks an ambiguous image.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairItem {
    pub path: String,
    pub image: ImageTensor,
    pub label: Option<usize>,
    pub source: RepairSource,
    pub channel: Option<ChannelRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    /// Fraction of the pool drawn from generated images.
    pub mix_ratio: f64,
    /// Fraction of each source group reserved for evaluation.
    pub holdout_fraction: f64,
    pub rng_seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            mix_ratio: DEFAULT_MIX_RATIO,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            rng_seed: 0,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mix_ratio) {
            return Err(Error::Validation("mix_ratio must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Validation("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub source: RepairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelRef>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn is_generated(&self) -> bool {
        self.source != RepairSource::Original
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairManifest {
    pub entries: Vec<ManifestEntry>,
    pub mix_ratio: f64,
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RepairManifest {
    pub fn generated_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_generated()).count()
    }

    /// Entries as JSON lines, one per line.
    pub fn entries_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.entries_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_entries_jsonl(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Manifest plus the images it names, index-aligned with `manifest.entries`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairSet {
    pub manifest: RepairManifest,
    pub images: Vec<ImageTensor>,
}

impl RepairSet {
    /// Loads images named by a manifest. Paths ending in `.png` are decoded as
    /// PNG; anything else is read as a raw tensor file.
    pub fn load(manifest: RepairManifest, base: impl AsRef<Path>) -> Result<Self> {
        let images = manifest
            .entries
            .iter()
            .map(|e| {
                let p = base.as_ref().join(&e.path);
                if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                    ImageTensor::load_png(&p)
                } else {
                    ImageTensor::from_tensor_bytes(&std::fs::read(&p)?)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, images })
    }

    pub fn select(&self, split: Split, generated: bool) -> Vec<LabeledImage> {
        self.manifest
            .entries
            .iter()
            .zip(&self.images)
            .filter(|(e, _)| e.split == split && e.is_generated() == generated)
            .map(|(e, img)| LabeledImage {
                image: img.clone(),
                label: e.label,
            })
            .collect()
    }

    pub fn train(&self) -> Vec<LabeledImage> {
        let mut out = self.select(Split::Train, false);
        out.extend(self.select(Split::Train, true));
        out
    }
}

/// Sizes `(originals, generated)` so generated images make up `mix` of the
/// pool while using as much of both supplies as possible.
fn pool_sizes(n_orig: usize, n_gen: usize, mix: f64) -> (usize, usize) {
    if n_gen == 0 || mix == 0.0 {
        return (n_orig, 0);
    }
    let cap_by_orig = n_orig as f64 / (1.0 - mix);
    let cap_by_gen = n_gen as f64 / mix;
    if cap_by_orig <= cap_by_gen {
        let g = ((mix * n_orig as f64 / (1.0 - mix)).round() as usize).min(n_gen);
        (n_orig, g)
    } else {
        let o = ((n_gen as f64 * (1.0 - mix) / mix).round() as usize).min(n_orig);
        (o, n_gen)
    }
}

/// Picks `keep` indices out of `0..n` at random and returns them sorted.
fn subsample(n: usize, keep: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn holdout_mask(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (fraction * n as f64).round() as usize;
    let mut mask = vec![false; n];
    for i in subsample(n, k, rng) {
        mask[i] = true;
    }
    mask
}

/// Builds the repair pool. Ambiguous items are dropped, the generated share is
/// fixed by `mix_ratio`, and each source group is split into train/holdout.
pub fn assemble_repair_set(
    originals: Vec<RepairItem>,
    generated: Vec<RepairItem>,
    config: &RepairConfig,
) -> Result<RepairSet> {
    config.validate()?;
    if let Some(bad) = originals.iter().find(|it| it.source != RepairSource::Original) {
        return Err(Error::Validation(format!("{} is not an original image", bad.path)));
    }
    if let Some(bad) = generated
        .iter()
        .find(|it| it.source == RepairSource::Original || it.channel.is_none())
    {
        return Err(Error::Validation(format!(
            "generated item {} needs a generated source and a channel",
            bad.path
        )));
    }
    let n_gen_all = generated.len();
    let originals: Vec<RepairItem> = originals.into_iter().filter(|it| it.label.is_some()).collect();
    let generated: Vec<RepairItem> = generated.into_iter().filter(|it| it.label.is_some()).collect();

    let mut warnings = Vec::new();
    if generated.is_empty() {
        let msg = if n_gen_all > 0 {
            format!("all {n_gen_all} generated images were ambiguous; repair set holds originals only")
        } else {
            "no generated images; repair set holds originals only".to_string()
        };
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (n_o, n_g) = pool_sizes(originals.len(), generated.len(), config.mix_ratio);
    let pick_o = subsample(originals.len(), n_o, &mut rng);
    let pick_g = subsample(generated.len(), n_g, &mut rng);
    let hold_o = holdout_mask(pick_o.len(), config.holdout_fraction, &mut rng);
    let hold_g = holdout_mask(pick_g.len(), config.holdout_fraction, &mut rng);

    let mut entries = Vec::with_capacity(n_o + n_g);
    let mut images = Vec::with_capacity(n_o + n_g);
    let groups = [(&originals, &pick_o, &hold_o), (&generated, &pick_g, &hold_g)];
    for (items, picks, hold) in groups {
        for (&i, &h) in picks.iter().zip(hold.iter()) {
            let it = &items[i];
            entries.push(ManifestEntry {
                path: it.path.clone(),
                label: it.label.expect("ambiguous items were filtered"),
                source: it.source,
                channel: it.channel,
                split: if h { Split::Holdout } else { Split::Train },
            });
            images.push(it.image.clone());
        }
    }
    Ok(RepairSet {
        manifest: RepairManifest {
            entries,
            mix_ratio: config.mix_ratio,
            holdout_fraction: config.holdout_fraction,
            rng_seed: config.rng_seed,
            warnings,
        },
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutAccuracy {
    pub original_holdout: Option<f64>,
    pub generated_holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepairMode {
    Finetuned,
    /// The SUT cannot be trained in process; only the manifest is useful.
    ManifestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub mode: RepairMode,
    pub before: HoldoutAccuracy,
    pub after: Option<HoldoutAccuracy>,
    pub train_report: Option<TrainReport>,
    pub frozen_checksum_before: Option<String>,
    pub frozen_checksum_after: Option<String>,
}

fn evaluate(sut: &dyn Sut, set: &RepairSet) -> Result<HoldoutAccuracy> {
    Ok(HoldoutAccuracy {
        original_holdout: accuracy(sut, &set.select(Split::Holdout, false))?,
        generated_holdout: accuracy(sut, &set.select(Split::Holdout, true))?,
    })
}

/// Fine-tunes the SUT's head on the train split, monitoring the generated
/// holdout, and reports holdout accuracy before and after.
pub fn run_repair(sut: &mut dyn Sut, set: &RepairSet, config: &HeadTrainConfig) -> Result<RepairOutcome> {
    let before = evaluate(sut, set)?;
    let checksum_before = sut.frozen_checksum();
    let train = set.train();
    let monitor = set.select(Split::Holdout, true);
    match sut.finetune_head(&train, &monitor, config) {
        Ok(report) => {
            let after = evaluate(sut, set)?;
            let checksum_after = sut.frozen_checksum();
            if checksum_before != checksum_after {
                return Err(Error::Backend("frozen parameters changed during head fine-tuning".into()));
            }
            Ok(RepairOutcome {
                mode: RepairMode::Finetuned,
                before,
                after: Some(after),
                train_report: Some(report),
                frozen_checksum_before: checksum_before,
                frozen_checksum_after: checksum_after,
            })
        }
        Err(Error::Unsupported(reason)) => {
            log::warn!("SUT cannot be fine-tuned ({reason}); exporting manifest only");
            Ok(RepairOutcome {
                mode: RepairMode::ManifestOnly,
                before,
                after: None,
                train_report: None,
                frozen_checksum_before: checksum_before,
                frozen_checksum_after: None,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Colorspace;
    use crate::sut::{MeanLinearSut, RegionPoolBackbone, ToyClassifier};

    fn item(i: usize, label: Option<usize>, source: RepairSource) -> RepairItem {
        let v = (i % 17) as f64 / 17.0;
        RepairItem {
            path: format!("{source:?}/{i}.png"),
            image: ImageTensor::filled(4, 4, Colorspace::Rgb, v).unwrap(),
            label,
            source,
            channel: (source != RepairSource::Original).then(|| ChannelRef::new(1, i % 3)),
        }
    }

    fn pool(n_orig: usize, n_gen: usize) -> (Vec<RepairItem>, Vec<RepairItem>) {
        let o = (0..n_orig).map(|i| item(i, Some(i % 2), RepairSource::Original)).collect();
        let g = (0..n_gen)
            .map(|i| {
                let src = if i % 2 == 0 {
                    RepairSource::BoundaryRelevant
                } else {
                    RepairSource::SpuriousInvariant
                };
                item(i, Some(i % 2), src)
            })
            .collect();
        (o, g)
    }

    #[test]
    fn eighty_plus_twenty_gives_a_hundred() {
        let (o, g) = pool(80, 20);
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        let m = &set.manifest;
        assert_eq!(m.entries.len(), 100);
        assert_eq!(m.generated_count(), 20);
        let hold = m.entries.iter().filter(|e| e.split == Split::Holdout).count();
        assert_eq!(hold, 16 + 4);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn mix_ratio_holds_when_either_supply_binds() {
        for (no, ng) in [(80, 500), (500, 7), (33, 9), (10, 1)] {
            let (o, g) = pool(no, ng);
            let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
            let n = set.manifest.entries.len() as f64;
            let gen = set.manifest.generated_count() as f64;
            assert!((gen - 0.2 * n).abs() <= 1.0, "{no}/{ng}: {gen} of {n}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = RepairConfig {
            rng_seed: 9,
            ..Default::default()
        };
        let (o, g) = pool(60, 40);
        let a = assemble_repair_set(o.clone(), g.clone(), &cfg).unwrap();
        let b = assemble_repair_set(o, g, &cfg).unwrap();
        assert_eq!(a.manifest.entries_jsonl().unwrap(), b.manifest.entries_jsonl().unwrap());
    }

    #[test]
    fn ambiguous_generated_are_excluded_with_warning() {
        let (o, _) = pool(20, 0);
        let g: Vec<RepairItem> = (0..6).map(|i| item(i, None, RepairSource::BoundaryRelevant)).collect();
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        assert_eq!(set.manifest.generated_count(), 0);
        assert_eq!(set.manifest.entries.len(), 20);
        assert_eq!(set.manifest.warnings.len(), 1);
    }

    #[test]
    fn holdout_is_disjoint_and_provenance_present() {
        let (o, g) = pool(80, 20);
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        let train: std::collections::HashSet<_> = set
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| &e.path)
            .collect();
        assert!(set
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Holdout)
            .all(|e| !train.contains(&e.path)));
        assert!(set
            .manifest
            .entries
            .iter()
            .filter(|e| e.is_generated())
            .all(|e| e.channel.is_some()));
    }

    #[test]
    fn generated_without_channel_is_rejected() {
        let mut it = item(0, Some(1), RepairSource::BoundaryRelevant);
        it.channel = None;
        assert!(assemble_repair_set(vec![], vec![it], &RepairConfig::default()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let (o, g) = pool(10, 3);
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        let path = std::env::temp_dir().join(format!("manifest-{}.jsonl", std::process::id()));
        set.manifest.write_jsonl(&path).unwrap();
        let back = RepairManifest::read_entries_jsonl(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, set.manifest.entries);
    }

    fn toy() -> ToyClassifier {
        let bb = RegionPoolBackbone::new(4, 4, 3, 2).unwrap();
        ToyClassifier::new(bb, vec![vec![0.5; 12]], vec![-0.1], 0).unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (o, g) = pool(40, 10);
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        let mut sut = toy();
        let cfg = HeadTrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        let out = run_repair(&mut sut, &set, &cfg).unwrap();
        assert_eq!(out.mode, RepairMode::Finetuned);
        assert_eq!(Some(out.before), out.after);
        assert_eq!(out.frozen_checksum_before, out.frozen_checksum_after);
        assert!(out.frozen_checksum_before.is_some());
    }

    #[test]
    fn untrainable_sut_downgrades_to_manifest_only() {
        let (o, g) = pool(40, 10);
        let set = assemble_repair_set(o, g, &RepairConfig::default()).unwrap();
        let mut sut = MeanLinearSut { w: 1.0, b: -0.5 };
        let out = run_repair(&mut sut, &set, &HeadTrainConfig::default()).unwrap();
        assert_eq!(out.mode, RepairMode::ManifestOnly);
        assert!(out.after.is_none());
        assert!(out.before.original_holdout.is_some());
    }
}
