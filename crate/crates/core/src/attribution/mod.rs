//! Relevance attribution of influential channels and relabeling of boundary
//! images through pluggable judgment backends.

mod mask;
mod prompts;
mod vlm;

pub use mask::{build_diff_mask, compose_triptych, DEFAULT_MASK_THRESHOLD};
pub use prompts::{
    parse_pair_answer, parse_relabel_answer, PromptStore, PromptVars, RelabelOutcome,
    RELABEL_TEMPLATE, RELABEL_TEMPLATE_ID, RELEVANCE_TEMPLATE, RELEVANCE_TEMPLATE_ID,
};
pub use vlm::{VlmBackend, VlmConfig};

use serde::{Deserialize, Serialize};

use crate::domain::{ChannelRef, FeatureLabel, FeatureVerdict, ImageTensor, PairVote, StyleState};
use crate::error::{Error, Result};
use crate::genbackend::GroundTruthMap;

pub const DEFAULT_VOTE_SAMPLES: usize = 5;

/// Where a query's images came from. Only the ground-truth backend reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryProvenance {
    pub channel: ChannelRef,
    pub delta: f64,
    pub original_state: StyleState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriptychQuery {
    pub original: ImageTensor,
    pub perturbed: ImageTensor,
    pub diff_mask: ImageTensor,
    pub task_attribute: String,
    pub prompt_template_id: String,
    pub provenance: Option<QueryProvenance>,
}

impl TriptychQuery {
    pub fn new(
        original: ImageTensor,
        perturbed: ImageTensor,
        mask_threshold: f64,
        task_attribute: impl Into<String>,
        provenance: Option<QueryProvenance>,
    ) -> Result<Self> {
        let diff_mask = build_diff_mask(&original, &perturbed, mask_threshold)?;
        Ok(Self {
            original,
            perturbed,
            diff_mask,
            task_attribute: task_attribute.into(),
            prompt_template_id: RELEVANCE_TEMPLATE_ID.into(),
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelQuery {
    pub image: ImageTensor,
    pub task_attribute: String,
    pub prompt_template_id: String,
    /// Style state the image was rendered from, when known.
    pub state: Option<StyleState>,
}

/// A backend's answer plus the raw text behind it, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment<T> {
    pub outcome: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl<T> Judgment<T> {
    pub fn plain(outcome: T) -> Self {
        Self {
            outcome,
            raw_response: None,
            error: None,
        }
    }
}

pub trait JudgmentBackend: Send + Sync {
    fn judge_pair(&self, query: &TriptychQuery) -> Result<Judgment<PairVote>>;

    fn relabel(&self, query: &RelabelQuery) -> Result<Judgment<RelabelOutcome>>;

    /// False for remote models whose answers may vary between runs.
    fn deterministic(&self) -> bool;
}

/// Answers from the synthetic renderer's ground-truth map.
#[derive(Debug, Clone)]
pub struct GroundTruthBackend {
    pub map: GroundTruthMap,
}

impl JudgmentBackend for GroundTruthBackend {
    fn judge_pair(&self, query: &TriptychQuery) -> Result<Judgment<PairVote>> {
        let vote = match query
            .provenance
            .as_ref()
            .and_then(|p| self.map.is_relevant(p.channel))
        {
            Some(true) => PairVote::RelevantChange,
            Some(false) => PairVote::NoRelevantChange,
            None => PairVote::Ambiguous,
        };
        Ok(Judgment::plain(vote))
    }

    fn relabel(&self, query: &RelabelQuery) -> Result<Judgment<RelabelOutcome>> {
        let outcome = match query.state.as_ref().and_then(|s| self.map.label_of(s)) {
            Some(1) => RelabelOutcome::Positive,
            Some(_) => RelabelOutcome::Negative,
            None => RelabelOutcome::Ambiguous,
        };
        Ok(Judgment::plain(outcome))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Label used when votes tie or all are ambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TieRule {
    #[default]
    Relevant,
    Spurious,
    Undetermined,
}

impl TieRule {
    fn label(self) -> FeatureLabel {
        match self {
            TieRule::Relevant => FeatureLabel::Relevant,
            TieRule::Spurious => FeatureLabel::Spurious,
            TieRule::Undetermined => FeatureLabel::Undetermined,
        }
    }
}

/// Majority over decided votes; ties and all-ambiguous lists fall to `tie_rule`.
/// The channel is assumed influential, so a "no relevant change" majority
/// makes it spurious.
pub fn attribute_channel(channel: ChannelRef, votes: Vec<PairVote>, tie_rule: TieRule) -> Result<FeatureVerdict> {
    if votes.is_empty() {
        return Err(Error::Validation(format!("no votes for channel {channel}")));
    }
    let rel = votes.iter().filter(|v| **v == PairVote::RelevantChange).count();
    let norel = votes.iter().filter(|v| **v == PairVote::NoRelevantChange).count();
    let label = match rel.cmp(&norel) {
        std::cmp::Ordering::Greater => FeatureLabel::Relevant,
        std::cmp::Ordering::Less => FeatureLabel::Spurious,
        std::cmp::Ordering::Equal => tie_rule.label(),
    };
    Ok(FeatureVerdict {
        channel,
        label,
        n_samples: votes.len(),
        votes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::{Generator, SyntheticConfig, SyntheticRenderer, CUE_CHANNEL, PRESENCE_CHANNEL};
    use proptest::prelude::*;
    use PairVote::*;

    fn verdict(votes: Vec<PairVote>) -> FeatureLabel {
        attribute_channel(ChannelRef::new(0, 0), votes, TieRule::default())
            .unwrap()
            .label
    }

    #[test]
    fn majority_rules() {
        assert_eq!(verdict(vec![RelevantChange, RelevantChange, NoRelevantChange]), FeatureLabel::Relevant);
        assert_eq!(verdict(vec![NoRelevantChange, NoRelevantChange, Ambiguous]), FeatureLabel::Spurious);
        assert_eq!(verdict(vec![RelevantChange, NoRelevantChange]), FeatureLabel::Relevant);
        assert_eq!(verdict(vec![Ambiguous, Ambiguous]), FeatureLabel::Relevant);
        let v = attribute_channel(ChannelRef::new(0, 0), vec![Ambiguous], TieRule::Undetermined).unwrap();
        assert_eq!((v.label, v.n_samples), (FeatureLabel::Undetermined, 1));
        assert!(attribute_channel(ChannelRef::new(0, 0), vec![], TieRule::Relevant).is_err());
    }

    #[test]
    fn ground_truth_backend_answers_from_the_map() {
        let r = SyntheticRenderer::new(SyntheticConfig::default()).unwrap();
        let backend = GroundTruthBackend { map: r.ground_truth() };
        let state = r.sample_style_state(1, 1.0).unwrap();
        let img = r.synthesize(&state).unwrap();
        let query = |channel| {
            TriptychQuery::new(
                img.clone(),
                img.clone(),
                0.2,
                "object",
                Some(QueryProvenance {
                    channel,
                    delta: 10.0,
                    original_state: state.clone(),
                }),
            )
            .unwrap()
        };
        assert_eq!(backend.judge_pair(&query(PRESENCE_CHANNEL)).unwrap().outcome, RelevantChange);
        assert_eq!(backend.judge_pair(&query(CUE_CHANNEL)).unwrap().outcome, NoRelevantChange);

        let mut present = state.clone();
        present.vectors[0][0] = 6.0;
        let q = RelabelQuery {
            image: r.synthesize(&present).unwrap(),
            task_attribute: "object".into(),
            prompt_template_id: RELABEL_TEMPLATE_ID.into(),
            state: Some(present),
        };
        assert_eq!(backend.relabel(&q).unwrap().outcome, RelabelOutcome::Positive);
    }

    fn vote() -> impl Strategy<Value = PairVote> {
        prop_oneof![Just(RelevantChange), Just(NoRelevantChange), Just(Ambiguous)]
    }

    proptest! {
        #[test]
        fn permutation_invariant(votes in proptest::collection::vec(vote(), 1..9), seed in any::<u64>()) {
            let mut shuffled = votes.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(verdict(votes), verdict(shuffled));
        }
    }
}
