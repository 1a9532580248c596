//! On-disk layout and record types for stage artifacts. Every JSON file is an
//! envelope carrying the stage name and config hash.

use std::path::{Path, PathBuf};

use chanprobe::attribution::{Judgment, RelabelOutcome};
use chanprobe::genbackend::Band;
use chanprobe::metrics::Summary;
use chanprobe::repair::{RepairMode, RepairOutcome};
use chanprobe::sensitivity::{CandidateSet, SensitivityMap};
use chanprobe::{
    BoundaryRefinement, ChannelRef, FeatureVerdict, ImageTensor, LogitVector, PairVote, ProbeResult, ProbeVerdict,
    StyleState,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const SCREEN: &str = "screen";
pub const MINE: &str = "mine";
pub const ATTRIBUTE: &str = "attribute";
pub const EXPLORE: &str = "explore";
pub const REPAIR: &str = "repair";
pub const REPORT: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub config_hash: String,
    pub data: T,
}

/// Paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn seed_file(&self, stage: &str, seed: u64) -> PathBuf {
        self.root.join(stage).join(format!("seed_{seed:06}.json"))
    }

    pub fn stage_file(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join(stage).join(name)
    }

    /// Relative path (forward slashes) of an image under `images/`.
    pub fn image_rel(&self, seed: u64, name: &str) -> String {
        format!("images/seed_{seed:06}/{name}.png")
    }

    pub fn abs(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save_png(&self, rel: &str, image: &ImageTensor) -> CliResult<()> {
        let path = self.abs(rel);
        ensure_parent(&path)?;
        image.save_png(&path)?;
        Ok(())
    }
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_envelope<T: Serialize>(path: &Path, stage: &str, config_hash: &str, data: &T) -> CliResult<()> {
    let env = Envelope {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        data,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|source| CliError::Artifact {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

/// Reads an upstream artifact. A missing file or one written under another
/// config names the stage that must be (re)run.
pub fn read_envelope<T: DeserializeOwned>(path: &Path, stage: &'static str, config_hash: &str) -> CliResult<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingArtifact {
                stage,
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|source| CliError::Artifact {
        path: path.to_path_buf(),
        source,
    })?;
    if env.stage != stage {
        return Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        });
    }
    if env.config_hash != config_hash {
        return Err(CliError::StaleArtifact {
            stage,
            path: path.to_path_buf(),
            found: env.config_hash,
            expected: config_hash.to_string(),
        });
    }
    Ok(env.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub seed: u64,
    pub state: StyleState,
    pub baseline_logits: LogitVector,
    pub map: SensitivityMap,
    pub candidates: CandidateSet,
    pub forward_calls: usize,
    pub gradient_calls: usize,
}

/// A probe with images stored as relative paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub channel: ChannelRef,
    pub delta: f64,
    pub original_image: String,
    pub perturbed_image: String,
    pub original_logits: LogitVector,
    pub perturbed_logits: LogitVector,
    pub verdict: ProbeVerdict,
    pub refined_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryRefinement>,
}

impl ProbeRecord {
    pub fn from_result(r: &ProbeResult, original_image: String, perturbed_image: String) -> Self {
        Self {
            channel: r.channel,
            delta: r.delta,
            original_image,
            perturbed_image,
            original_logits: r.original_logits.clone(),
            perturbed_logits: r.perturbed_logits.clone(),
            verdict: r.verdict,
            refined_delta: r.refined_delta,
            boundary: r.boundary.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub channel: ChannelRef,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineRecord {
    pub seed: u64,
    pub original_image: String,
    pub probed: usize,
    pub influential: Vec<ProbeRecord>,
    pub failures: Vec<ProbeFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSample {
    pub seed: u64,
    pub delta: f64,
    pub triptych: String,
    pub judgment: Judgment<PairVote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttribution {
    pub verdict: FeatureVerdict,
    pub band: Band,
    /// Seeds on which mining recorded the channel.
    pub influential_seeds: Vec<u64>,
    pub samples: Vec<VoteSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub deterministic: bool,
    pub influential_channels: usize,
    pub verdicts: Vec<ChannelAttribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
    pub d2_image: f64,
    pub d2_boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub probe: ProbeRecord,
    pub boundary_image: String,
    pub boundary_logits: LogitVector,
    pub metrics: BoundaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreRecord {
    pub seed: u64,
    pub explored: Vec<ChannelRef>,
    pub boundary: Vec<BoundaryRecord>,
    pub failures: Vec<ProbeFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelRecord {
    pub path: String,
    pub seed: u64,
    pub channel: ChannelRef,
    pub judgment: Judgment<RelabelOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub original_train: usize,
    pub original_holdout: usize,
    pub generated_train: usize,
    pub generated_holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub mode: RepairMode,
    pub deterministic: bool,
    pub mix_ratio: f64,
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    pub counts: SourceCounts,
    pub warnings: Vec<String>,
    pub relabels: Vec<RelabelRecord>,
    pub outcome: RepairOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCounts {
    pub band: Band,
    pub relevant: usize,
    pub spurious: usize,
    pub undetermined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub seeds: usize,
    pub r_relevance: Option<f64>,
    pub relevant_channels: usize,
    pub spurious_channels: usize,
    pub undetermined_channels: usize,
    /// Recorded (seed, channel) pairs from mining.
    pub influential_inputs: usize,
    pub boundary_inputs: usize,
    pub ms_ssim: Option<Summary>,
    pub d2_image: Option<Summary>,
    pub d2_boundary: Option<Summary>,
    pub bands: Vec<BandCounts>,
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairOutcome>,
}
