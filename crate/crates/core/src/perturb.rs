//! Single-channel perturbation under the confidence and misclassification
//! oracles, with bisection down to the decision boundary.

use serde::{Deserialize, Serialize};

use crate::domain::{
    predicted_label, BoundaryRefinement, ChannelRef, ImageTensor, LogitVector, ProbeResult,
    ProbeVerdict, StyleState, TaskKind,
};
use crate::error::{Error, Result};
use crate::genbackend::Generator;
use crate::sensitivity::CandidateSet;
use crate::sut::Sut;

pub const DEFAULT_EPSILON: f64 = 10.0;
pub const DEFAULT_TAU_FRACTION: f64 = 0.4;
pub const DEFAULT_TOLERANCE: f64 = 1e-2;
pub const DEFAULT_MAX_ITERATIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OracleKind {
    Confidence,
    Misclassification,
}

/// How a change in the target logit is turned into a "drop".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropConvention {
    /// Movement toward the decision threshold: `y0 − y1` for a non-negative
    /// single logit, `y1 − y0` for a negative one; `y0[t] − y1[t]` for
    /// multiclass targets.
    #[default]
    SignedTowardThreshold,
    /// `|y1[t] − y0[t]|`
    AbsoluteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub tau_fraction: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub drop_convention: DropConvention,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl OracleSpec {
    pub fn confidence(tau_fraction: f64) -> Self {
        Self {
            kind: OracleKind::Confidence,
            tau_fraction,
            ..Self::misclassification()
        }
    }

    pub fn misclassification() -> Self {
        Self {
            kind: OracleKind::Misclassification,
            tau_fraction: DEFAULT_TAU_FRACTION,
            epsilon: DEFAULT_EPSILON,
            drop_convention: DropConvention::default(),
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_fraction > 0.0 && self.tau_fraction.is_finite()) {
            return Err(Error::Validation("tau_fraction must be > 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation("epsilon must be > 0".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Validation("boundary tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Step against the channel's influence on the target logit. For a single
/// binary logit the direction also depends on which side of 0 it sits.
pub fn perturbation_delta(alpha: f64, y_t: f64, epsilon: f64, task_kind: TaskKind) -> f64 {
    match task_kind {
        TaskKind::Binary => -epsilon * sign(alpha) * sign(y_t),
        TaskKind::Multiclass | TaskKind::Detection => -epsilon * sign(alpha),
    }
}

pub fn confidence_drop(original: &LogitVector, perturbed: &LogitVector, convention: DropConvention) -> f64 {
    let y0 = original.target_value();
    let y1 = perturbed.target_value();
    match convention {
        DropConvention::AbsoluteDifference => (y1 - y0).abs(),
        DropConvention::SignedTowardThreshold if original.k() == 1 && y0 < 0.0 => y1 - y0,
        DropConvention::SignedTowardThreshold => y0 - y1,
    }
}

/// Strict comparison against `τ = tau_fraction · |y0[t]|`.
pub fn exceeds_threshold(original: &LogitVector, perturbed: &LogitVector, oracle: &OracleSpec) -> bool {
    let tau = oracle.tau_fraction * original.target_value().abs();
    confidence_drop(original, perturbed, oracle.drop_convention) > tau
}

/// Original image and logits for a seed, computed once per loop.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub image: ImageTensor,
    pub logits: LogitVector,
}

impl Baseline {
    pub fn compute(state: &StyleState, generator: &dyn Generator, sut: &dyn Sut) -> Result<Self> {
        let image = generator.synthesize(state)?;
        let target = sut.capabilities().target_index();
        let logits = sut.forward(&image)?.with_target(target)?;
        Ok(Self { image, logits })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PerturbRun {
    /// One entry per probed channel, in candidate order.
    pub results: Vec<ProbeResult>,
    /// Channels whose probe failed, with the backend message.
    pub failures: Vec<(ChannelRef, String)>,
}

impl PerturbRun {
    pub fn recorded(&self) -> impl Iterator<Item = &ProbeResult> {
        self.results.iter().filter(|r| r.is_recorded())
    }
}

fn evaluate(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    channel: ChannelRef,
    delta: f64,
    target: usize,
) -> Result<(ImageTensor, LogitVector)> {
    let image = generator.synthesize(&state.with_offset(channel, delta)?)?;
    let logits = sut.forward(&image)?.with_target(target)?;
    Ok((image, logits))
}

/// Algorithm loop over the candidate channels. Only `s_l[c]` is moved, by the
/// δ given by [`perturbation_delta`]. A failing probe is logged and skipped.
pub fn channel_perturb(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    candidates: &CandidateSet,
    oracle: &OracleSpec,
) -> Result<PerturbRun> {
    oracle.validate()?;
    if candidates.is_empty() {
        return Err(Error::Precondition("candidate set is empty".into()));
    }
    generator.topology().check_state(state)?;
    let caps = sut.capabilities();
    let target = caps.target_index();
    let baseline = Baseline::compute(state, generator, sut)?;
    let y0 = baseline.logits.target_value();
    let label0 = predicted_label(&baseline.logits);

    let mut run = PerturbRun::default();
    for cand in &candidates.entries {
        let delta = perturbation_delta(cand.score, y0, oracle.epsilon, caps.task_kind);
        if delta == 0.0 {
            continue;
        }
        let probe = || -> Result<ProbeResult> {
            let (image, logits) = evaluate(state, generator, sut, cand.channel, delta, target)?;
            let mut result = ProbeResult {
                channel: cand.channel,
                delta,
                original_image: baseline.image.clone(),
                perturbed_image: image,
                original_logits: baseline.logits.clone(),
                perturbed_logits: logits,
                verdict: ProbeVerdict::NoEffect,
                refined_delta: None,
                boundary: None,
            };
            match oracle.kind {
                OracleKind::Confidence => {
                    if exceeds_threshold(&result.original_logits, &result.perturbed_logits, oracle) {
                        result.verdict = ProbeVerdict::Influential;
                    }
                }
                OracleKind::Misclassification => {
                    if predicted_label(&result.perturbed_logits) != label0 {
                        result.verdict = ProbeVerdict::Misclassified;
                        let b = refine_with_baseline(
                            state, generator, sut, cand.channel, delta, &baseline, oracle,
                        )?;
                        result.refined_delta = Some(b.delta_star);
                        result.boundary = Some(b);
                    }
                }
            }
            Ok(result)
        };
        match probe() {
            Ok(r) => run.results.push(r),
            Err(e) => {
                log::warn!("probe of {} on seed {} failed: {e}", cand.channel, state.seed);
                run.failures.push((cand.channel, e.to_string()));
            }
        }
    }
    Ok(run)
}

/// Bisects the perturbation magnitude in `[0, |δ_flip|]`, keeping δ's sign,
/// until the margin after perturbation is within `tolerance` of the boundary
/// or `max_iterations` is spent (result flagged).
pub fn refine_boundary(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    channel: ChannelRef,
    delta_flip: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<BoundaryRefinement> {
    let baseline = Baseline::compute(state, generator, sut)?;
    let oracle = OracleSpec {
        tolerance,
        max_iterations,
        ..OracleSpec::misclassification()
    };
    refine_with_baseline(state, generator, sut, channel, delta_flip, &baseline, &oracle)
}

fn refine_with_baseline(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    channel: ChannelRef,
    delta_flip: f64,
    baseline: &Baseline,
    oracle: &OracleSpec,
) -> Result<BoundaryRefinement> {
    let target = baseline.logits.target_index;
    let label0 = predicted_label(&baseline.logits);
    let (_, at_flip) = evaluate(state, generator, sut, channel, delta_flip, target)?;
    if predicted_label(&at_flip) == label0 {
        return Err(Error::Precondition(format!(
            "delta {delta_flip} on {channel} does not flip the predicted label"
        )));
    }
    let dir = sign(delta_flip);
    let mut lo = 0.0;
    let mut hi = delta_flip.abs();
    let mut margin_hi = at_flip.margin().abs();
    let mut iterations = 0;
    while margin_hi > oracle.tolerance && iterations < oracle.max_iterations {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let (_, logits) = evaluate(state, generator, sut, channel, dir * mid, target)?;
        if predicted_label(&logits) != label0 {
            hi = mid;
            margin_hi = logits.margin().abs();
        } else {
            lo = mid;
        }
    }
    Ok(BoundaryRefinement {
        delta_star: dir * hi,
        margin_at_star: margin_hi,
        iterations,
        tolerance: oracle.tolerance,
        flagged: margin_hi > oracle.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::EmbedGenerator;
    use crate::sensitivity::Candidate;
    use crate::sut::{ConstantSut, MeanLinearSut};

    fn lv(v: f64) -> LogitVector {
        LogitVector::binary(v).unwrap()
    }

    #[test]
    fn delta_sign_rules() {
        assert_eq!(perturbation_delta(2.3, 4.0, 10.0, TaskKind::Binary), -10.0);
        assert_eq!(perturbation_delta(-0.5, -2.0, 10.0, TaskKind::Binary), -10.0);
        assert_eq!(perturbation_delta(-1.2, 7.0, 10.0, TaskKind::Multiclass), 10.0);
        assert_eq!(perturbation_delta(0.0, 7.0, 10.0, TaskKind::Detection), 0.0);
    }

    #[test]
    fn threshold_arithmetic() {
        let oracle = OracleSpec::confidence(0.4);
        assert!(exceeds_threshold(&lv(5.0), &lv(2.9), &oracle));
        assert!(!exceeds_threshold(&lv(5.0), &lv(3.5), &oracle));
        assert!(!exceeds_threshold(&lv(5.0), &lv(3.0), &oracle));
        assert!(exceeds_threshold(&lv(-5.0), &lv(-2.9), &oracle));
        assert!(!exceeds_threshold(&lv(-5.0), &lv(-7.9), &oracle));
        let abs = OracleSpec {
            drop_convention: DropConvention::AbsoluteDifference,
            ..oracle
        };
        assert!(exceeds_threshold(&lv(-5.0), &lv(-7.9), &abs));
    }

    fn linear_setup() -> (EmbedGenerator, MeanLinearSut, StyleState) {
        // mean pixel = 0.5 + 0.01 s; y = -50 (0.5 + 0.01 s) + 26 = 1 - 0.5 s
        let g = EmbedGenerator::single_channel(4, 4, 0.01).unwrap();
        let s = StyleState::new(vec![vec![0.0]], 0, 1.0).unwrap();
        (g, MeanLinearSut { w: -50.0, b: 26.0 }, s)
    }

    #[test]
    fn bisection_reaches_analytic_root() {
        let (g, sut, s) = linear_setup();
        let b = refine_boundary(&s, &g, &sut, ChannelRef::new(0, 0), 10.0, 1e-2, 12).unwrap();
        assert!(!b.flagged);
        assert!((b.delta_star - 2.0).abs() / 2.0 < 0.01, "{}", b.delta_star);
        assert!(b.margin_at_star <= 1e-2);
    }

    #[test]
    fn already_on_boundary_needs_no_iterations() {
        // Dyadic constants keep y = 1 - 0.5 s exact, so y(2) is exactly 0.
        let g = EmbedGenerator::single_channel(4, 4, 0.0625).unwrap();
        let s = StyleState::new(vec![vec![0.0]], 0, 1.0).unwrap();
        let sut = MeanLinearSut { w: -8.0, b: 5.0 };
        let b = refine_boundary(&s, &g, &sut, ChannelRef::new(0, 0), 2.0, 1e-2, 12).unwrap();
        assert_eq!(b.iterations, 0);
        assert_eq!(b.delta_star, 2.0);
        assert_eq!(b.margin_at_star, 0.0);
    }

    #[test]
    fn non_flipping_delta_is_precondition_error() {
        let (g, sut, s) = linear_setup();
        let err = refine_boundary(&s, &g, &sut, ChannelRef::new(0, 0), -10.0, 1e-2, 12).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let (g, sut, s) = linear_setup();
        let b = refine_boundary(&s, &g, &sut, ChannelRef::new(0, 0), 10.0, 1e-9, 3).unwrap();
        assert!(b.flagged);
        assert_eq!(b.iterations, 3);
        let img = g.synthesize(&s.with_offset(ChannelRef::new(0, 0), b.delta_star).unwrap()).unwrap();
        assert_eq!(predicted_label(&sut.forward(&img).unwrap()), 0);
    }

    #[test]
    fn loop_moves_one_coordinate_and_reports_verdicts() {
        let (g, sut, s) = linear_setup();
        let candidates = CandidateSet {
            entries: vec![Candidate {
                channel: ChannelRef::new(0, 0),
                score: -0.5,
            }],
            k_coarse_mid: 15,
            k_fine: 5,
        };
        let run = channel_perturb(&s, &g, &sut, &candidates, &OracleSpec::confidence(0.4)).unwrap();
        let r = &run.results[0];
        assert_eq!(r.delta, 10.0);
        assert_eq!(r.verdict, ProbeVerdict::Influential);

        let flip = channel_perturb(&s, &g, &sut, &candidates, &OracleSpec::misclassification()).unwrap();
        let r = &flip.results[0];
        assert_eq!(r.verdict, ProbeVerdict::Misclassified);
        assert!((r.refined_delta.unwrap() - 2.0).abs() < 0.02);
    }

    #[test]
    fn empty_candidates_rejected() {
        let g = EmbedGenerator::single_channel(2, 2, 0.01).unwrap();
        let s = StyleState::new(vec![vec![0.0]], 0, 1.0).unwrap();
        let empty = CandidateSet {
            entries: vec![],
            k_coarse_mid: 15,
            k_fine: 5,
        };
        let err = channel_perturb(&s, &g, &ConstantSut::binary(1.0), &empty, &OracleSpec::confidence(0.4));
        assert!(matches!(err, Err(Error::Precondition(_))));
    }
}
