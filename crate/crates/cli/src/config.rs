//! Pipeline configuration: TOML file over a preset, `${VAR}` interpolation,
//! validation and the config hash stamped into every artifact.

use std::path::{Path, PathBuf};

use chanprobe::attribution::{PromptVars, TieRule, VlmConfig, DEFAULT_MASK_THRESHOLD, DEFAULT_VOTE_SAMPLES};
use chanprobe::perturb::{
    DropConvention, OracleSpec, DEFAULT_EPSILON, DEFAULT_MAX_ITERATIONS, DEFAULT_TAU_FRACTION, DEFAULT_TOLERANCE,
};
use chanprobe::repair::RepairConfig;
use chanprobe::scenario::ScenarioSpec;
use chanprobe::sensitivity::{
    Method, DEFAULT_FDA_STEP, DEFAULT_K_COARSE_MID, DEFAULT_K_FINE, DEFAULT_SIGMA_FRACTION,
    DEFAULT_SMOOTHGRAD_SAMPLES,
};
use chanprobe::sut::{sha256_hex, HeadTrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Built-in renderer and toy classifier, ground-truth attribution.
    Synthetic,
    /// Eyeglasses on faces, ψ = 0.7, VLM attribution.
    Faces,
    /// Dog breeds, ψ = 0.7, no attribution.
    Dogs,
    /// Car detection, ψ = 0.5, no attribution.
    Cars,
}

/// How to reach an out-of-process backend: a command speaking the wire
/// protocol on stdin/stdout, or a Unix socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub socket: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Synthetic renderer configured by `[scenario.renderer]`.
    Synthetic,
    External(AdapterSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SutSpec {
    /// Toy classifier trained from `[scenario]`.
    Scenario,
    /// Toy classifier loaded from a JSON file written by `chanprobe scenario`.
    Toy { path: PathBuf },
    External(AdapterSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSpec {
    pub count: usize,
    pub start: u64,
    /// Explicit seeds; overrides `count`/`start` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub list: Option<Vec<u64>>,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            count: 50,
            start: 0,
            list: None,
        }
    }
}

impl SeedSpec {
    pub fn resolve(&self) -> Vec<u64> {
        match &self.list {
            Some(l) => l.clone(),
            None => (self.start..self.start + self.count as u64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    /// One of grad, smoothgrad, fda.
    pub method: String,
    pub samples: usize,
    pub sigma_fraction: f64,
    pub fda_step: f64,
    pub noise_seed: u64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            method: "grad".into(),
            samples: DEFAULT_SMOOTHGRAD_SAMPLES,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            fda_step: DEFAULT_FDA_STEP,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub k_coarse_mid: usize,
    pub k_fine: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            k_coarse_mid: DEFAULT_K_COARSE_MID,
            k_fine: DEFAULT_K_FINE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub epsilon: f64,
    pub tau_fraction: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub drop_convention: DropConvention,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tau_fraction: DEFAULT_TAU_FRACTION,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            drop_convention: DropConvention::default(),
        }
    }
}

impl OracleConfig {
    pub fn confidence(&self) -> OracleSpec {
        OracleSpec {
            epsilon: self.epsilon,
            drop_convention: self.drop_convention,
            ..OracleSpec::confidence(self.tau_fraction)
        }
    }

    pub fn misclassification(&self) -> OracleSpec {
        OracleSpec {
            epsilon: self.epsilon,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            ..OracleSpec::misclassification()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    GroundTruth,
    Vlm,
    /// Skip attribution; exploration then runs on every candidate channel.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub backend: JudgeKind,
    pub vote_samples: usize,
    pub tie_rule: TieRule,
    pub mask_threshold: f64,
    /// Directory of `<template id>.txt` files overriding the default prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub vlm: VlmConfig,
    /// Concurrent judge requests.
    pub max_in_flight: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            backend: JudgeKind::GroundTruth,
            vote_samples: DEFAULT_VOTE_SAMPLES,
            tie_rule: TieRule::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            prompts_dir: None,
            vlm: VlmConfig {
                vars: PromptVars::synthetic_object(),
                ..VlmConfig::default()
            },
            max_in_flight: 4,
        }
    }
}

/// Head learning rate for the toy classifier, whose pooled-pixel features
/// need larger steps than a pretrained backbone head.
pub const TOY_HEAD_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairStageConfig {
    #[serde(flatten)]
    pub set: RepairConfig,
    pub head: HeadTrainConfig,
    /// Original (non-generated) images drawn for the repair pool.
    pub n_originals: usize,
    /// First seed of the original pool; kept apart from probing seeds.
    pub originals_seed: u64,
}

impl Default for RepairStageConfig {
    fn default() -> Self {
        Self {
            set: RepairConfig::default(),
            head: HeadTrainConfig {
                lr: TOY_HEAD_LR,
                ..HeadTrainConfig::default()
            },
            n_originals: 400,
            originals_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Spurious channels shown in the gallery.
    pub top_n: usize,
    /// Boundary examples shown in the grid.
    pub grid_examples: usize,
    pub ms_ssim_scales: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            top_n: 10,
            grid_examples: 16,
            ms_ssim_scales: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub output_dir: PathBuf,
    /// Seed-level worker threads.
    pub workers: usize,
    pub generator: GeneratorSpec,
    pub sut: SutSpec,
    pub scenario: ScenarioSpec,
    pub seeds: SeedSpec,
    pub truncation: f64,
    pub screening: ScreeningConfig,
    pub budgets: Budgets,
    pub oracle: OracleConfig,
    pub attribution: AttributionConfig,
    pub repair: RepairStageConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            output_dir: PathBuf::from("chanprobe-out"),
            workers: 1,
            generator: GeneratorSpec::Synthetic,
            sut: SutSpec::Scenario,
            scenario: ScenarioSpec::default(),
            seeds: SeedSpec::default(),
            truncation: 1.0,
            screening: ScreeningConfig::default(),
            budgets: Budgets::default(),
            oracle: OracleConfig::default(),
            attribution: AttributionConfig::default(),
            repair: RepairStageConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Preset {
    pub fn config(self) -> PipelineConfig {
        let base = PipelineConfig {
            preset: Some(self),
            ..PipelineConfig::default()
        };
        let external = AdapterSpec {
            command: None,
            socket: None,
        };
        let with = |truncation: f64, backend: JudgeKind, vars: PromptVars| {
            let mut c = base.clone();
            c.truncation = truncation;
            c.generator = GeneratorSpec::External(external.clone());
            c.sut = SutSpec::External(external.clone());
            c.attribution.backend = backend;
            c.attribution.vlm.vars = vars;
            c.repair.head = HeadTrainConfig::default();
            c
        };
        match self {
            Preset::Synthetic => base,
            Preset::Faces => with(0.7, JudgeKind::Vlm, PromptVars::eyeglasses()),
            Preset::Dogs => with(0.7, JudgeKind::None, PromptVars::eyeglasses()),
            Preset::Cars => with(0.5, JudgeKind::None, PromptVars::eyeglasses()),
        }
    }
}

/// Replaces `${NAME}` in every string with the environment variable's value.
pub fn interpolate_env(value: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> CliResult<()> {
    match value {
        toml::Value::String(s) => {
            let mut out = String::with_capacity(s.len());
            let mut rest = s.as_str();
            while let Some(i) = rest.find("${") {
                out.push_str(&rest[..i]);
                let after = &rest[i + 2..];
                let end = after
                    .find('}')
                    .ok_or_else(|| CliError::Config(format!("unterminated ${{ in {s:?}")))?;
                let name = &after[..end];
                let v = lookup(name)
                    .ok_or_else(|| CliError::Config(format!("environment variable {name} is not set")))?;
                out.push_str(&v);
                rest = &after[end + 1..];
            }
            out.push_str(rest);
            *s = out;
        }
        toml::Value::Array(a) => {
            for v in a {
                interpolate_env(v, lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, v) in t.iter_mut() {
                interpolate_env(v, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parses TOML text layered over its `preset` (or `preset_override`).
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> CliResult<Self> {
        let mut file: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        interpolate_env(&mut file, &|k| std::env::var(k).ok())?;
        let preset = match preset_override {
            Some(p) => Some(p),
            None => file
                .get("preset")
                .map(|v| Preset::deserialize(v.clone()))
                .transpose()
                .map_err(|e| CliError::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Value::try_from(preset.map(Preset::config).unwrap_or_default())
            .map_err(|e| CliError::Config(e.to_string()))?;
        // A file that names a different backend kind replaces the preset's table outright.
        if let toml::Value::Table(t) = &file {
            for key in ["generator", "sut"] {
                if t.get(key).and_then(|v| v.get("kind")).is_some() {
                    if let toml::Value::Table(b) = &mut base {
                        b.remove(key);
                    }
                }
            }
        }
        let api_key = file
            .get("attribution")
            .and_then(|a| a.get("vlm"))
            .and_then(|v| v.get("api_key"))
            .and_then(|k| k.as_str())
            .map(str::to_string);
        merge(&mut base, file);
        let mut cfg: PipelineConfig = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if preset_override.is_some() {
            cfg.preset = preset_override;
        }
        // The key is never serialized, so the preset round trip above cannot carry it.
        cfg.attribution.vlm.api_key = api_key;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, preset_override)
    }

    /// Fills the VLM key from `CHANPROBE_VLM_API_KEY` when the file leaves it unset.
    pub fn apply_env_credentials(&mut self) {
        if self.attribution.vlm.api_key.is_none() {
            self.attribution.vlm.api_key = std::env::var("CHANPROBE_VLM_API_KEY").ok();
        }
    }

    pub fn method(&self) -> CliResult<Method> {
        Method::parse(&self.screening.method).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.method()?;
        if self.seeds.resolve().is_empty() {
            return bad("no seeds selected".into());
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return bad(format!("truncation {} outside (0, 1]", self.truncation));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.screening.samples == 0 {
            return bad("screening.samples must be at least 1".into());
        }
        if !(self.screening.sigma_fraction >= 0.0 && self.screening.sigma_fraction.is_finite()) {
            return bad("screening.sigma_fraction must be finite and >= 0".into());
        }
        if !(self.screening.fda_step > 0.0 && self.screening.fda_step.is_finite()) {
            return bad("screening.fda_step must be positive".into());
        }
        if self.attribution.vote_samples == 0 {
            return bad("attribution.vote_samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.attribution.mask_threshold) {
            return bad("attribution.mask_threshold must lie in [0, 1]".into());
        }
        if self.attribution.max_in_flight == 0 {
            return bad("attribution.max_in_flight must be at least 1".into());
        }
        if self.report.ms_ssim_scales == 0 {
            return bad("report.ms_ssim_scales must be at least 1".into());
        }
        for (name, spec) in [("generator", self.generator_adapter()), ("sut", self.sut_adapter())] {
            if let Some(a) = spec {
                if a.command.is_some() == a.socket.is_some() {
                    return bad(format!("external {name} needs exactly one of command or socket"));
                }
            }
        }
        if self.attribution.backend == JudgeKind::GroundTruth && self.generator != GeneratorSpec::Synthetic {
            return bad("the ground_truth attribution backend needs the synthetic generator".into());
        }
        self.oracle.confidence().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.oracle
            .misclassification()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.repair.set.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    fn generator_adapter(&self) -> Option<&AdapterSpec> {
        match &self.generator {
            GeneratorSpec::External(a) => Some(a),
            GeneratorSpec::Synthetic => None,
        }
    }

    fn sut_adapter(&self) -> Option<&AdapterSpec> {
        match &self.sut {
            SutSpec::External(a) => Some(a),
            _ => None,
        }
    }

    /// Digest of every setting that can change results. Output location and
    /// worker count are excluded; credentials are never serialized.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        sha256_hex(&bytes)[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml("", None).unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn presets_set_truncation_and_file_overrides() {
        let c = PipelineConfig::from_toml("preset = \"faces\"", None).unwrap();
        assert_eq!(c.truncation, 0.7);
        assert_eq!(c.attribution.vlm.vars, PromptVars::eyeglasses());
        let c = PipelineConfig::from_toml("preset = \"cars\"\ntruncation = 0.9", None).unwrap();
        assert_eq!(c.truncation, 0.9);
        let c = PipelineConfig::from_toml("", Some(Preset::Dogs)).unwrap();
        assert_eq!((c.truncation, c.attribution.backend), (0.7, JudgeKind::None));
    }

    #[test]
    fn nested_tables_merge() {
        let c = PipelineConfig::from_toml("[oracle]\nepsilon = 4.0\n[seeds]\nlist = [3, 9]", None).unwrap();
        assert_eq!(c.oracle.epsilon, 4.0);
        assert_eq!(c.oracle.tau_fraction, DEFAULT_TAU_FRACTION);
        assert_eq!(c.seeds.resolve(), vec![3, 9]);
    }

    #[test]
    fn unknown_method_lists_valid_ones() {
        let c = PipelineConfig::from_toml("[screening]\nmethod = \"lrp\"", None).unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("grad") && e.contains("smoothgrad") && e.contains("fda"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[oracle]\nepsilom = 4.0", None).is_err());
    }

    #[test]
    fn env_interpolation() {
        let mut v: toml::Value = toml::from_str("a = \"x-${K}-y\"\nb = [\"${K}\"]").unwrap();
        interpolate_env(&mut v, &|k| (k == "K").then(|| "v".to_string())).unwrap();
        assert_eq!(v["a"].as_str(), Some("x-v-y"));
        assert_eq!(v["b"][0].as_str(), Some("v"));
        let mut v: toml::Value = toml::from_str("a = \"${MISSING}\"").unwrap();
        assert!(interpolate_env(&mut v, &|_| None).is_err());
    }

    #[test]
    fn hash_ignores_output_location_and_credentials() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.workers = 8;
        b.attribution.vlm.api_key = Some("secret".into());
        assert_eq!(a.hash(), b.hash());
        b.oracle.epsilon = 5.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn external_backend_needs_an_address() {
        let c = PipelineConfig::from_toml(
            "[generator]\nkind = \"external\"\n[attribution]\nbackend = \"none\"",
            None,
        )
        .unwrap();
        assert!(c.validate().is_err());
        let c = PipelineConfig::from_toml(
            "[generator]\nkind = \"external\"\ncommand = [\"gen\"]\n[attribution]\nbackend = \"none\"",
            None,
        )
        .unwrap();
        c.validate().unwrap();
    }
}
