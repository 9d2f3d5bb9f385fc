//! Gradient assembly for the entropy-minimization objectives.
//!
//! Every loss here has the shape `N⁻¹ Σ_i [w_i · log π(yⁱ) + c · Ĥ_tok(yⁱ)]`
//! where the weights `w_i` are advantages held constant (stop-gradient). The
//! gradient is therefore assembled directly from [`Policy`] score functions
//! and per-step entropy gradients, with no autodiff graph:
//!
//! | kind       | score-function weight | pathwise `∇Ĥ_tok` |
//! |------------|-----------------------|-------------------|
//! | `EmTok`    | `A_tok`               | yes               |
//! | `EmSeq`    | `A_seq`               | no                |
//! | `PgTok`    | `A_tok`               | no                |
//! | `EntTok`   | none                  | yes               |
//! | `GreedyEm` | none                  | yes (greedy `y`)  |
//!
//! `EmTok` and `EmSeq` are unbiased for `∇H(π)` when candidates are sampled
//! and no token normalization is applied. `PgTok` and `EntTok` are partial.

use serde::{Deserialize, Serialize};

use crate::decoding::{CandidateSet, CandidateSource};
use crate::error::{contract, Error, Result};
use crate::estimators::h_tok_unchecked;
use crate::policy::{GradVector, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    EmTok,
    EmSeq,
    PgTok,
    EntTok,
    GreedyEm,
}

impl ObjectiveKind {
    fn uses_score_function(self) -> bool {
        matches!(self, ObjectiveKind::EmTok | ObjectiveKind::EmSeq | ObjectiveKind::PgTok)
    }

    fn uses_pathwise(self) -> bool {
        matches!(self, ObjectiveKind::EmTok | ObjectiveKind::EntTok | ObjectiveKind::GreedyEm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::EmTok => "em-tok",
            ObjectiveKind::EmSeq => "em-seq",
            ObjectiveKind::PgTok => "pg-tok",
            ObjectiveKind::EntTok => "ent-tok",
            ObjectiveKind::GreedyEm => "greedy-em",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        [
            ObjectiveKind::EmTok,
            ObjectiveKind::EmSeq,
            ObjectiveKind::PgTok,
            ObjectiveKind::EntTok,
            ObjectiveKind::GreedyEm,
        ]
        .into_iter()
        .find(|k| k.as_str() == name)
        .ok_or_else(|| Error::Config(format!("unknown objective `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Loo,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the total token count `Σ|yⁱ|` (EOS included).
    DapoToken,
    /// Divide by the group size `G`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub baseline: Baseline,
    pub normalization: Normalization,
    pub source: CandidateSource,
    pub g: usize,
    /// Under DAPO normalization, divide the entropy term by `G` instead of
    /// `Σ|yⁱ|`. Off by default.
    #[serde(default)]
    pub entropy_group_norm: bool,
}

impl ObjectiveSpec {
    /// Single-sample estimator: one sampled candidate, no baseline, `N = 1`.
    pub fn single_sample(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            baseline: Baseline::None,
            normalization: Normalization::None,
            source: CandidateSource::Sampled,
            g: 1,
            entropy_group_norm: false,
        }
    }

    /// Named method with its default group settings (LOO baseline and DAPO
    /// token normalization). `-b` names use beam candidates.
    pub fn preset(name: &str, g: usize) -> Result<Self> {
        let (base, source) = match name.strip_suffix("-b") {
            Some(base) => (base, CandidateSource::Beam),
            None => (name, CandidateSource::Sampled),
        };
        let kind = match base {
            "em-tok" => ObjectiveKind::EmTok,
            "em-seq" => ObjectiveKind::EmSeq,
            "pg-tok" => ObjectiveKind::PgTok,
            "ent-tok" => ObjectiveKind::EntTok,
            "greedy-em" if source == CandidateSource::Sampled => ObjectiveKind::GreedyEm,
            _ => return Err(Error::Config(format!("unknown method `{name}`"))),
        };
        if kind == ObjectiveKind::GreedyEm {
            return Ok(Self {
                kind,
                baseline: Baseline::None,
                normalization: Normalization::None,
                source: CandidateSource::Greedy,
                g: 1,
                entropy_group_norm: false,
            });
        }
        Ok(Self {
            kind,
            baseline: Baseline::Loo,
            normalization: Normalization::DapoToken,
            source,
            g,
            entropy_group_norm: false,
        })
    }

    /// Method name as used on the command line and in reports.
    pub fn label(&self) -> String {
        match self.source {
            CandidateSource::Beam => format!("{}-b", self.kind.as_str()),
            _ => self.kind.as_str().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(contract("objective needs g >= 1"));
        }
        if self.kind == ObjectiveKind::GreedyEm {
            if self.g != 1 || self.source != CandidateSource::Greedy || self.baseline != Baseline::None {
                return Err(contract("greedy-em requires g = 1, greedy source and no baseline"));
            }
        } else if self.source == CandidateSource::Greedy {
            return Err(contract("greedy candidates are only used by greedy-em"));
        }
        if self.baseline == Baseline::Loo && self.g < 2 {
            return Err(contract("leave-one-out baseline requires g >= 2"));
        }
        Ok(())
    }

    /// Replaces an unusable LOO baseline (`g = 1`) with none. Returns whether
    /// a substitution happened.
    pub fn degrade_baseline_for_single_sample(&mut self) -> bool {
        if self.baseline == Baseline::Loo && self.g < 2 {
            self.baseline = Baseline::None;
            true
        } else {
            false
        }
    }
}

/// Per-candidate advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
}

/// LOO: `A_i = h_i - mean_{j≠i} h_j`. NONE: `A_i = h_i`.
pub fn advantages(h_values: &[f64], baseline: Baseline) -> Result<AdvantageSet> {
    let g = h_values.len();
    let values = match baseline {
        Baseline::None => h_values.to_vec(),
        Baseline::Loo => {
            if g < 2 {
                return Err(contract("leave-one-out baseline is unavailable for a single sample"));
            }
            let total: f64 = h_values.iter().sum();
            let others = (g - 1) as f64;
            h_values.iter().map(|&h| h - (total - h) / others).collect()
        }
    };
    Ok(AdvantageSet { values })
}

/// Gradient of the configured loss on a fixed candidate set.
pub fn objective_gradient(policy: &Policy, cands: &CandidateSet, spec: &ObjectiveSpec) -> Result<GradVector> {
    spec.validate()?;
    if cands.len() != spec.g && !(cands.source == CandidateSource::Beam && cands.exhausted) {
        return Err(contract(format!("objective expects {} candidates, got {}", spec.g, cands.len())));
    }
    if cands.source != spec.source {
        return Err(contract(format!(
            "objective expects {} candidates, got {}",
            spec.source.as_str(),
            cands.source.as_str()
        )));
    }
    for s in &cands.seqs {
        policy.check_sequence(s)?;
    }
    let group = cands.len();
    if spec.baseline == Baseline::Loo && group < 2 {
        return Err(contract("leave-one-out baseline requires at least two candidates"));
    }

    let norm = match spec.normalization {
        Normalization::DapoToken => cands.seqs.iter().map(|s| s.len()).sum::<usize>() as f64,
        Normalization::None => group as f64,
    };
    let ent_norm =
        if spec.entropy_group_norm && spec.normalization == Normalization::DapoToken { group as f64 } else { norm };

    let mut grad = policy.zero_grad();
    if spec.kind.uses_score_function() {
        let costs: Vec<f64> = match spec.kind {
            ObjectiveKind::EmSeq => cands.seqs.iter().map(|s| -policy.log_prob_unchecked(s)).collect(),
            _ => cands.seqs.iter().map(|s| h_tok_unchecked(policy, s)).collect(),
        };
        let adv = advantages(&costs, spec.baseline)?;
        for (s, a) in cands.seqs.iter().zip(&adv.values) {
            policy.accumulate_grad_log_prob(s, a / norm, &mut grad);
        }
    }
    if spec.kind.uses_pathwise() {
        for s in &cands.seqs {
            accumulate_h_tok_grad(policy, s, 1.0 / ent_norm, &mut grad);
        }
    }
    Ok(grad)
}

/// `grad += weight * ∇Ĥ_tok(seq)` holding the sequence fixed.
pub(crate) fn accumulate_h_tok_grad(
    policy: &Policy,
    seq: &crate::policy::Sequence,
    weight: f64,
    grad: &mut GradVector,
) {
    for (pos, ctx, _) in seq.steps() {
        policy.accumulate_token_entropy_grad(pos, ctx, weight, grad);
    }
}
