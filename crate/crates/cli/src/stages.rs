//! Pipeline stages. Each stage reads the artifacts of the stages before it,
//! checks they were written under the same config, and writes its own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chanprobe::attribution::{
    attribute_channel, compose_triptych, Judgment, JudgmentBackend, QueryProvenance, RelabelOutcome, RelabelQuery,
    TriptychQuery,
};
use chanprobe::genbackend::{Band, Generator};
use chanprobe::metrics::{d2_boundary, d2_image, ms_ssim};
use chanprobe::perturb::{channel_perturb, perturbation_delta, Baseline};
use chanprobe::repair::{
    assemble_repair_set, run_repair, HoldoutAccuracy, RepairItem, RepairMode, RepairOutcome, RepairSet, RepairSource, Split,
};
use chanprobe::scenario::sample_training_set_seeded;
use chanprobe::sensitivity::{fda, grad_saliency, select_candidates, smoothgrad, Candidate, CandidateSet, Method};
use chanprobe::sut::{CountingSut, Sut};
use chanprobe::{
    ChannelRef, FeatureLabel, ImageTensor, PairVote, ProbeVerdict, StyleState,
};

use crate::artifacts::*;
use crate::backends::{BackendFactory, Backends};
use crate::config::{JudgeKind, PipelineConfig, SutSpec};
use crate::error::{CliError, CliResult};

pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
    pub layout: Layout,
    seeds: Vec<u64>,
    factory: OnceLock<BackendFactory>,
}

fn image_name(prefix: &str, ch: ChannelRef) -> String {
    format!("{prefix}_{ch}")
}

fn label_of(outcome: RelabelOutcome) -> Option<usize> {
    match outcome {
        RelabelOutcome::Positive => Some(1),
        RelabelOutcome::Negative => Some(0),
        RelabelOutcome::Ambiguous => None,
    }
}

fn failures(list: Vec<(ChannelRef, String)>) -> Vec<ProbeFailure> {
    list.into_iter()
        .map(|(channel, message)| ProbeFailure { channel, message })
        .collect()
}

/// Runs `f` on every item with up to `workers` threads; results keep input order.
fn parallel<I, T, F>(items: &[I], workers: usize, setup: impl Fn() -> CliResult<Backends> + Sync, f: F) -> CliResult<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&Backends, &I) -> CliResult<T> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, items.len());
    let chunks: Vec<CliResult<Vec<(usize, T)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (f, setup) = (&f, &setup);
                s.spawn(move || -> CliResult<Vec<(usize, T)>> {
                    let b = setup()?;
                    let mut out = Vec::new();
                    for (i, item) in items.iter().enumerate().skip(w).step_by(workers) {
                        out.push((i, f(&b, item)?));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(items.len());
    for c in chunks {
        all.extend(c?);
    }
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, t)| t).collect())
}

/// Like [`parallel`] for jobs that need no backends.
fn parallel_plain<I: Sync, T: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> T + Sync) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.clamp(1, items.len());
    let mut all: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, it)| (i, f(it)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    all.sort_by_key(|(i, _)| *i);
    all.into_iter().map(|(_, t)| t).collect()
}

/// A perturbed pair to be judged.
struct PairJob {
    channel_index: usize,
    seed: u64,
    delta: f64,
    original_state: StyleState,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> CliResult<Self> {
        config.validate()?;
        let hash = config.hash();
        let layout = Layout::new(config.output_dir.clone());
        let seeds = config.seeds.resolve();
        Ok(Self {
            config,
            hash,
            layout,
            seeds,
            factory: OnceLock::new(),
        })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    fn factory(&self) -> CliResult<&BackendFactory> {
        if let Some(f) = self.factory.get() {
            return Ok(f);
        }
        let f = BackendFactory::new(&self.config)?;
        Ok(self.factory.get_or_init(|| f))
    }

    fn per_seed<T: Send>(&self, f: impl Fn(&Backends, u64) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
        let factory = self.factory()?;
        parallel(&self.seeds, self.config.workers, || factory.instantiate(), |b, &seed| f(b, seed))
    }

    /// Records the effective config next to the artifacts.
    fn write_config(&self) -> CliResult<()> {
        let mut c = self.config.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let value = serde_json::json!({ "config_hash": self.hash, "config": c });
        let mut text = serde_json::to_string_pretty(&value).expect("config serializes");
        text.push('\n');
        write_text(&self.layout.root.join("config.json"), &text)
    }

    fn read_seed<T: serde::de::DeserializeOwned>(&self, stage: &'static str, seed: u64) -> CliResult<T> {
        read_envelope(&self.layout.seed_file(stage, seed), stage, &self.hash)
    }

    fn read_all<T: serde::de::DeserializeOwned>(&self, stage: &'static str) -> CliResult<Vec<T>> {
        self.seeds.iter().map(|&s| self.read_seed(stage, s)).collect()
    }

    fn sigma(&self, generator: &dyn Generator) -> Vec<f64> {
        generator
            .topology()
            .style_std
            .iter()
            .map(|s| self.config.screening.sigma_fraction * s)
            .collect()
    }

    fn sensitivity(
        &self,
        method: Method,
        state: &StyleState,
        generator: &dyn Generator,
        sut: &dyn Sut,
        target: usize,
    ) -> chanprobe::Result<chanprobe::sensitivity::SensitivityMap> {
        let sc = &self.config.screening;
        match method {
            Method::Grad => grad_saliency(state, generator, sut, target),
            Method::Smoothgrad => smoothgrad(
                state,
                generator,
                sut,
                target,
                sc.samples,
                &self.sigma(generator),
                sc.noise_seed.wrapping_add(state.seed),
            ),
            Method::Fda => fda(state, generator, sut, target, sc.fda_step),
        }
    }

    pub fn screen(&self) -> CliResult<()> {
        self.write_config()?;
        let method = self.config.method()?;
        let b = &self.config.budgets;
        let calls = self.per_seed(|be, seed| {
            let gen = &*be.generator;
            let state = gen.sample_style_state(seed, self.config.truncation)?;
            let target = be.sut.capabilities().target_index();
            let baseline = Baseline::compute(&state, gen, &*be.sut)?;
            let counting = CountingSut::new(&*be.sut);
            let map = match self.sensitivity(method, &state, gen, &counting, target) {
                Err(chanprobe::Error::NotDifferentiable) if method != Method::Fda => {
                    log::warn!("seed {seed}: composite is not differentiable, screening with fda");
                    self.sensitivity(Method::Fda, &state, gen, &counting, target)?
                }
                r => r?,
            };
            let candidates = select_candidates(&map, gen.topology(), b.k_coarse_mid, b.k_fine)?;
            let rec = ScreenRecord {
                seed,
                state,
                baseline_logits: baseline.logits,
                map,
                candidates,
                forward_calls: counting.forward_calls(),
                gradient_calls: counting.gradient_calls(),
            };
            write_envelope(&self.layout.seed_file(SCREEN, seed), SCREEN, &self.hash, &rec)?;
            Ok((rec.forward_calls, rec.gradient_calls))
        })?;
        let (f, g) = calls.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        log::info!("screen: {} seeds, {f} SUT forward calls, {g} gradient calls", calls.len());
        Ok(())
    }

    pub fn mine(&self) -> CliResult<()> {
        let oracle = self.config.oracle.confidence();
        let counts = self.per_seed(|be, seed| {
            let sr: ScreenRecord = self.read_seed(SCREEN, seed)?;
            let original = self.layout.image_rel(seed, "original");
            let mut rec = MineRecord {
                seed,
                original_image: original.clone(),
                probed: sr.candidates.len(),
                influential: Vec::new(),
                failures: Vec::new(),
            };
            if sr.candidates.is_empty() {
                log::warn!("seed {seed}: no candidate channels, nothing to probe");
            } else {
                let run = channel_perturb(&sr.state, &*be.generator, &*be.sut, &sr.candidates, &oracle)?;
                if let Some(first) = run.results.first() {
                    self.layout.save_png(&original, &first.original_image)?;
                }
                for r in run.recorded() {
                    let rel = self.layout.image_rel(seed, &image_name("mine", r.channel));
                    self.layout.save_png(&rel, &r.perturbed_image)?;
                    rec.influential.push(ProbeRecord::from_result(r, original.clone(), rel));
                }
                rec.failures = failures(run.failures);
            }
            write_envelope(&self.layout.seed_file(MINE, seed), MINE, &self.hash, &rec)?;
            Ok(rec.influential.len())
        })?;
        log::info!("mine: {} influential (seed, channel) pairs", counts.iter().sum::<usize>());
        Ok(())
    }

    /// Influential probes grouped by channel, seeds in order.
    fn influential_by_channel(mines: &[MineRecord]) -> BTreeMap<ChannelRef, Vec<(u64, f64)>> {
        let mut by: BTreeMap<ChannelRef, Vec<(u64, f64)>> = BTreeMap::new();
        for m in mines {
            for p in &m.influential {
                by.entry(p.channel).or_default().push((m.seed, p.delta));
            }
        }
        by
    }

    fn judge_pairs(
        &self,
        generator: &dyn Generator,
        judge: &dyn JudgmentBackend,
        jobs: &[PairJob],
        channels: &[ChannelRef],
    ) -> CliResult<Vec<VoteSample>> {
        let a = &self.config.attribution;
        let prepared = jobs
            .iter()
            .map(|job| {
                let ch = channels[job.channel_index];
                let original = generator.synthesize(&job.original_state)?;
                let perturbed = generator.synthesize(&job.original_state.with_offset(ch, job.delta)?)?;
                let provenance = QueryProvenance {
                    channel: ch,
                    delta: job.delta,
                    original_state: job.original_state.clone(),
                };
                let query = TriptychQuery::new(
                    original,
                    perturbed,
                    a.mask_threshold,
                    a.vlm.vars.attribute.clone(),
                    Some(provenance),
                )?;
                let rel = self.layout.image_rel(job.seed, &image_name("triptych", ch));
                let trip = compose_triptych(&query.original, &query.perturbed, &query.diff_mask)?;
                self.layout.save_png(&rel, &trip)?;
                Ok((query, rel))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let judgments = parallel_plain(&prepared, a.max_in_flight, |(q, _)| match judge.judge_pair(q) {
            Ok(j) => j,
            Err(e) => {
                log::warn!("judge failed on {}: {e}", q.provenance.as_ref().map(|p| p.channel.to_string()).unwrap_or_default());
                Judgment {
                    outcome: PairVote::Ambiguous,
                    raw_response: None,
                    error: Some(e.to_string()),
                }
            }
        });
        Ok(jobs
            .iter()
            .zip(prepared)
            .zip(judgments)
            .map(|((job, (_, triptych)), judgment)| VoteSample {
                seed: job.seed,
                delta: job.delta,
                triptych,
                judgment,
            })
            .collect())
    }

    pub fn attribute(&self) -> CliResult<()> {
        let mines: Vec<MineRecord> = self.read_all(MINE)?;
        let by_channel = Self::influential_by_channel(&mines);
        let factory = self.factory()?;
        let Some(judge) = factory.judge()? else {
            log::info!("attribute: no attribution backend, {} influential channels left unlabeled", by_channel.len());
            let rec = AttributeRecord {
                deterministic: true,
                influential_channels: by_channel.len(),
                verdicts: Vec::new(),
            };
            return write_envelope(&self.layout.stage_file(ATTRIBUTE, "verdicts.json"), ATTRIBUTE, &self.hash, &rec);
        };
        let screens: Vec<ScreenRecord> = self.read_all(SCREEN)?;
        let be = factory.instantiate()?;
        let task_kind = be.sut.capabilities().task_kind;
        let epsilon = self.config.oracle.epsilon;
        let n = self.config.attribution.vote_samples;

        let channels: Vec<ChannelRef> = by_channel.keys().copied().collect();
        let mut jobs = Vec::new();
        for (ci, (&ch, hits)) in by_channel.iter().enumerate() {
            let state_of = |seed: u64| &screens.iter().find(|s| s.seed == seed).expect("screen record per seed").state;
            let mut taken = 0;
            for &(seed, delta) in hits.iter().take(n) {
                jobs.push(PairJob {
                    channel_index: ci,
                    seed,
                    delta,
                    original_state: state_of(seed).clone(),
                });
                taken += 1;
            }
            // Too few influential seeds: perturb the same channel on other seeds.
            for sr in screens.iter().filter(|s| !hits.iter().any(|h| h.0 == s.seed)) {
                if taken >= n {
                    break;
                }
                let alpha = sr.map.score(ch).unwrap_or(0.0);
                let delta = perturbation_delta(alpha, sr.baseline_logits.target_value(), epsilon, task_kind);
                if delta == 0.0 {
                    continue;
                }
                jobs.push(PairJob {
                    channel_index: ci,
                    seed: sr.seed,
                    delta,
                    original_state: sr.state.clone(),
                });
                taken += 1;
            }
        }
        let samples = self.judge_pairs(&*be.generator, judge.as_ref(), &jobs, &channels)?;

        let topology = be.generator.topology();
        let mut per_channel: Vec<Vec<VoteSample>> = vec![Vec::new(); channels.len()];
        for (job, s) in jobs.iter().zip(samples) {
            per_channel[job.channel_index].push(s);
        }
        let mut verdicts = Vec::with_capacity(channels.len());
        for ((ch, samples), hits) in channels.iter().zip(per_channel).zip(by_channel.values()) {
            let votes = samples.iter().map(|s| s.judgment.outcome).collect();
            verdicts.push(ChannelAttribution {
                verdict: attribute_channel(*ch, votes, self.config.attribution.tie_rule)?,
                band: topology.band_of(ch.layer_id).unwrap_or(Band::Fine),
                influential_seeds: hits.iter().map(|h| h.0).collect(),
                samples,
            });
        }
        let count = |l: FeatureLabel| verdicts.iter().filter(|v| v.verdict.label == l).count();
        log::info!(
            "attribute: {} relevant, {} spurious, {} undetermined",
            count(FeatureLabel::Relevant),
            count(FeatureLabel::Spurious),
            count(FeatureLabel::Undetermined)
        );
        let rec = AttributeRecord {
            deterministic: judge.deterministic(),
            influential_channels: channels.len(),
            verdicts,
        };
        write_envelope(&self.layout.stage_file(ATTRIBUTE, "verdicts.json"), ATTRIBUTE, &self.hash, &rec)
    }

    pub fn read_attribution(&self) -> CliResult<AttributeRecord> {
        read_envelope(&self.layout.stage_file(ATTRIBUTE, "verdicts.json"), ATTRIBUTE, &self.hash)
    }

    pub fn explore(&self) -> CliResult<()> {
        let attribution = self.read_attribution()?;
        let relevant: BTreeSet<ChannelRef> = attribution
            .verdicts
            .iter()
            .filter(|v| v.verdict.label == FeatureLabel::Relevant)
            .map(|v| v.verdict.channel)
            .collect();
        let use_candidates = self.config.attribution.backend == JudgeKind::None;
        let oracle = self.config.oracle.misclassification();
        let scales = self.config.report.ms_ssim_scales;
        let done = self.per_seed(|be, seed| {
            let sr: ScreenRecord = self.read_seed(SCREEN, seed)?;
            let candidates = if use_candidates {
                sr.candidates.clone()
            } else {
                CandidateSet {
                    entries: relevant
                        .iter()
                        .filter_map(|&ch| {
                            let score = sr.map.score(ch)?;
                            (score != 0.0).then_some(Candidate { channel: ch, score })
                        })
                        .collect(),
                    k_coarse_mid: sr.candidates.k_coarse_mid,
                    k_fine: sr.candidates.k_fine,
                }
            };
            let mut rec = ExploreRecord {
                seed,
                explored: candidates.channels().collect(),
                boundary: Vec::new(),
                failures: Vec::new(),
                warnings: Vec::new(),
            };
            if !candidates.is_empty() {
                let gen = &*be.generator;
                let run = channel_perturb(&sr.state, gen, &*be.sut, &candidates, &oracle)?;
                let original = self.layout.image_rel(seed, "original");
                for r in run.results.iter().filter(|r| r.verdict == ProbeVerdict::Misclassified) {
                    let Some(b) = &r.boundary else { continue };
                    let state = sr.state.with_offset(r.channel, b.delta_star)?;
                    let image = gen.synthesize(&state)?;
                    let logits = be.sut.forward(&image)?.with_target(r.original_logits.target_index)?;
                    let ms = ms_ssim(&r.original_image, &image, scales)?;
                    if let Some(w) = ms.warning {
                        if !rec.warnings.contains(&w) {
                            rec.warnings.push(w);
                        }
                    }
                    let metrics = BoundaryMetrics {
                        ms_ssim: ms.value,
                        ms_ssim_scales: ms.scales_used,
                        d2_image: d2_image(&r.original_image, &image)?,
                        d2_boundary: d2_boundary(&logits),
                    };
                    let flip = self.layout.image_rel(seed, &image_name("flip", r.channel));
                    let at_star = self.layout.image_rel(seed, &image_name("boundary", r.channel));
                    self.layout.save_png(&original, &r.original_image)?;
                    self.layout.save_png(&flip, &r.perturbed_image)?;
                    self.layout.save_png(&at_star, &image)?;
                    rec.boundary.push(BoundaryRecord {
                        probe: ProbeRecord::from_result(r, original.clone(), flip),
                        boundary_image: at_star,
                        boundary_logits: logits,
                        metrics,
                    });
                }
                rec.failures = failures(run.failures);
            }
            write_envelope(&self.layout.seed_file(EXPLORE, seed), EXPLORE, &self.hash, &rec)?;
            Ok((rec.boundary.len(), rec.warnings))
        })?;
        let warnings: BTreeSet<&String> = done.iter().flat_map(|(_, w)| w).collect();
        for w in warnings {
            log::warn!("explore: {w}");
        }
        log::info!("explore: {} boundary images", done.iter().map(|(n, _)| n).sum::<usize>());
        Ok(())
    }

    fn relabel(&self, judge: &dyn JudgmentBackend, image: ImageTensor, state: StyleState) -> Judgment<RelabelOutcome> {
        let q = RelabelQuery {
            image,
            task_attribute: self.config.attribution.vlm.vars.attribute.clone(),
            prompt_template_id: chanprobe::attribution::RELABEL_TEMPLATE_ID.into(),
            state: Some(state),
        };
        judge.relabel(&q).unwrap_or_else(|e| {
            log::warn!("relabel failed: {e}");
            Judgment {
                outcome: RelabelOutcome::Ambiguous,
                raw_response: None,
                error: Some(e.to_string()),
            }
        })
    }

    /// Original images for the repair pool, saved under `repair/images/`.
    fn repair_originals(
        &self,
        be: &Backends,
        judge: Option<&dyn JudgmentBackend>,
    ) -> CliResult<Vec<RepairItem>> {
        let rc = &self.config.repair;
        let factory = self.factory()?;
        let labeled: Vec<(ImageTensor, Option<usize>)> = match (factory.scenario(), factory.renderer()) {
            (Some(sc), Some(r)) => sample_training_set_seeded(r, rc.n_originals, sc.spec.spurious_strength, rc.originals_seed)?
                .into_iter()
                .map(|(_, it)| (it.image, Some(it.label)))
                .collect(),
            _ => {
                let Some(judge) = judge else {
                    log::warn!("no attribution backend; original images cannot be labeled");
                    return Ok(Vec::new());
                };
                (0..rc.n_originals as u64)
                    .map(|i| {
                        let state = be
                            .generator
                            .sample_style_state(rc.originals_seed + i, self.config.truncation)?;
                        let image = be.generator.synthesize(&state)?;
                        let label = label_of(self.relabel(judge, image.clone(), state).outcome);
                        Ok((image, label))
                    })
                    .collect::<CliResult<_>>()?
            }
        };
        labeled
            .into_iter()
            .enumerate()
            .map(|(i, (image, label))| {
                let path = format!("{REPAIR}/images/original_{i:05}.png");
                self.layout.save_png(&path, &image)?;
                Ok(RepairItem {
                    path,
                    image,
                    label,
                    source: RepairSource::Original,
                    channel: None,
                })
            })
            .collect()
    }

    /// Runs repair and returns how far it got.
    pub fn repair(&self) -> CliResult<RepairMode> {
        let attribution = self.read_attribution()?;
        let explores: Vec<ExploreRecord> = self.read_all(EXPLORE)?;
        let mines: Vec<MineRecord> = self.read_all(MINE)?;
        let screens: Vec<ScreenRecord> = self.read_all(SCREEN)?;
        let factory = self.factory()?;
        let judge = factory.judge()?;
        let judge = judge.as_deref();
        let mut be = factory.instantiate()?;
        let mut warnings = Vec::new();
        if judge.is_none() {
            let msg = "no attribution backend; generated images are left unlabeled".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let state_of = |seed: u64| &screens.iter().find(|s| s.seed == seed).expect("screen record per seed").state;

        let mut relabels = Vec::new();
        let mut generated = Vec::new();
        for e in &explores {
            for b in &e.boundary {
                let ch = b.probe.channel;
                let delta = b.probe.refined_delta.unwrap_or(b.probe.delta);
                let state = state_of(e.seed).with_offset(ch, delta)?;
                let image = be.generator.synthesize(&state)?;
                let label = judge.and_then(|j| {
                    let judgment = self.relabel(j, image.clone(), state);
                    let label = label_of(judgment.outcome);
                    relabels.push(RelabelRecord {
                        path: b.boundary_image.clone(),
                        seed: e.seed,
                        channel: ch,
                        judgment,
                    });
                    label
                });
                generated.push(RepairItem {
                    path: b.boundary_image.clone(),
                    image,
                    label,
                    source: RepairSource::BoundaryRelevant,
                    channel: Some(ch),
                });
            }
        }
        // Spurious perturbations keep the original's label: the label query sees the unperturbed state.
        let spurious: BTreeSet<ChannelRef> = attribution
            .verdicts
            .iter()
            .filter(|v| v.verdict.label == FeatureLabel::Spurious)
            .map(|v| v.verdict.channel)
            .collect();
        for m in &mines {
            for p in m.influential.iter().filter(|p| spurious.contains(&p.channel)) {
                let original = state_of(m.seed);
                let image = be.generator.synthesize(&original.with_offset(p.channel, p.delta)?)?;
                let label = match judge {
                    Some(j) => {
                        let judgment = self.relabel(j, be.generator.synthesize(original)?, original.clone());
                        let label = label_of(judgment.outcome);
                        relabels.push(RelabelRecord {
                            path: p.perturbed_image.clone(),
                            seed: m.seed,
                            channel: p.channel,
                            judgment,
                        });
                        label
                    }
                    None => None,
                };
                generated.push(RepairItem {
                    path: p.perturbed_image.clone(),
                    image,
                    label,
                    source: RepairSource::SpuriousInvariant,
                    channel: Some(p.channel),
                });
            }
        }

        let originals = self.repair_originals(&be, judge)?;
        let assembled = assemble_repair_set(originals, generated, &self.config.repair.set)?;
        let manifest = assembled.manifest;
        warnings.extend(manifest.warnings.iter().cloned());
        let manifest_path = self.layout.stage_file(REPAIR, "manifest.jsonl");
        ensure_parent(&manifest_path)?;
        manifest.write_jsonl(&manifest_path)?;
        // Train on exactly the stored images.
        let set = RepairSet::load(manifest, &self.layout.root)?;
        let outcome = if set.manifest.entries.iter().any(|e| e.split == Split::Train) {
            run_repair(&mut *be.sut, &set, &self.config.repair.head)?
        } else {
            let msg = "repair set has no labeled training images; exporting manifest only".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            RepairOutcome {
                mode: RepairMode::ManifestOnly,
                before: HoldoutAccuracy {
                    original_holdout: None,
                    generated_holdout: None,
                },
                after: None,
                train_report: None,
                frozen_checksum_before: be.sut.frozen_checksum(),
                frozen_checksum_after: None,
            }
        };
        let count = |split: Split, generated: bool| {
            set.manifest
                .entries
                .iter()
                .filter(|e| e.split == split && e.is_generated() == generated)
                .count()
        };
        let rec = RepairRecord {
            mode: outcome.mode,
            deterministic: judge.is_none_or(|j| j.deterministic()),
            mix_ratio: set.manifest.mix_ratio,
            holdout_fraction: set.manifest.holdout_fraction,
            rng_seed: set.manifest.rng_seed,
            counts: SourceCounts {
                original_train: count(Split::Train, false),
                original_holdout: count(Split::Holdout, false),
                generated_train: count(Split::Train, true),
                generated_holdout: count(Split::Holdout, true),
            },
            warnings,
            relabels,
            outcome,
        };
        log::info!(
            "repair: {:?}, generated holdout {:?} -> {:?}, original holdout {:?} -> {:?}",
            rec.mode,
            rec.outcome.before.generated_holdout,
            rec.outcome.after.and_then(|a| a.generated_holdout),
            rec.outcome.before.original_holdout,
            rec.outcome.after.and_then(|a| a.original_holdout),
        );
        write_envelope(&self.layout.stage_file(REPAIR, "summary.json"), REPAIR, &self.hash, &rec)?;
        Ok(rec.mode)
    }

    pub fn read_repair(&self) -> CliResult<Option<RepairRecord>> {
        match read_envelope(&self.layout.stage_file(REPAIR, "summary.json"), REPAIR, &self.hash) {
            Ok(r) => Ok(Some(r)),
            Err(CliError::MissingArtifact { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn report(&self) -> CliResult<ReportRecord> {
        let mines: Vec<MineRecord> = self.read_all(MINE)?;
        let explores: Vec<ExploreRecord> = self.read_all(EXPLORE)?;
        let attribution = self.read_attribution()?;
        let repair = self.read_repair()?;
        crate::report::write_report(self, &mines, &attribution, &explores, repair.as_ref())
    }

    pub fn run_all(&self) -> CliResult<(RepairMode, ReportRecord)> {
        self.screen()?;
        self.mine()?;
        self.attribute()?;
        self.explore()?;
        let mode = self.repair()?;
        Ok((mode, self.report()?))
    }
}

/// Files written by `chanprobe scenario`.
pub const SCENARIO_FILES: [&str; 5] = ["generator.json", "sut.json", "ground_truth.json", "scenario.json", "pipeline.toml"];

/// Builds the synthetic scenario and writes its parts plus a pipeline config
/// that loads the trained classifier from disk.
pub fn export_scenario(config: &PipelineConfig, dir: &Path) -> CliResult<()> {
    let factory = BackendFactory::new(&PipelineConfig {
        sut: SutSpec::Scenario,
        ..config.clone()
    })?;
    let sc = factory.scenario().expect("scenario SUT was requested");
    let summary = serde_json::json!({ "spec": sc.spec, "train_accuracy": sc.train_accuracy });
    let files: [(&str, String); 4] = [
        ("generator.json", pretty(&sc.spec.renderer)),
        ("sut.json", pretty(&sc.sut)),
        ("ground_truth.json", pretty(&sc.ground_truth)),
        ("scenario.json", pretty(&summary)),
    ];
    for (name, text) in files {
        write_text(&dir.join(name), &text)?;
    }
    let sut_path = dir.join("sut.json");
    let mut pipeline = config.clone();
    pipeline.sut = SutSpec::Toy {
        path: std::fs::canonicalize(&sut_path).unwrap_or(sut_path),
    };
    let toml = toml::to_string(&pipeline).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&dir.join("pipeline.toml"), &toml)
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Serves the configured synthetic generator and toy SUT over the wire
/// protocol: on stdin/stdout, or on a Unix socket one client at a time.
pub fn serve(config: &PipelineConfig, socket: Option<&Path>) -> CliResult<()> {
    use chanprobe::protocol::{serve as serve_stream, Endpoint};
    let factory = BackendFactory::new(config)?;
    let ep = Endpoint {
        generator: factory.renderer().map(|r| r as &dyn Generator),
        sut: factory.toy().map(|t| t as &dyn Sut),
    };
    match socket {
        None => Ok(serve_stream(&ep, std::io::stdin().lock(), std::io::stdout().lock())?),
        #[cfg(unix)]
        Some(path) => {
            let listener = std::os::unix::net::UnixListener::bind(path).map_err(crate::error::io_err(path))?;
            log::info!("serving on {}", path.display());
            for stream in listener.incoming() {
                let stream = stream.map_err(crate::error::io_err(path))?;
                let reader = stream.try_clone().map_err(crate::error::io_err(path))?;
                if let Err(e) = serve_stream(&ep, reader, stream) {
                    log::warn!("client dropped: {e}");
                }
            }
            Ok(())
        }
        #[cfg(not(unix))]
        Some(_) => Err(CliError::Config("socket serving needs a Unix platform".into())),
    }
}
