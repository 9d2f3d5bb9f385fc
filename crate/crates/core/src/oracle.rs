//! Ground truth by exhaustive enumeration.
//!
//! Everything here is deterministic and independent of sampling. Finite
//! differences are the root source of gradient truth; the analytic
//! enumeration gradients are validated against them in tests.

use crate::decoding::{CandidateSet, CandidateSource};
use crate::error::{contract, Error, Result};
use crate::objectives::{objective_gradient, Baseline, Normalization, ObjectiveKind, ObjectiveSpec};
use crate::policy::{entropy, Context, GradVector, Policy, Sequence};

pub const DEFAULT_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub seq: Sequence,
    pub prob: f64,
    /// Same accumulation order as [`Policy::sequence_log_prob`].
    pub logp: f64,
}

/// Number of structurally reachable sequences: `Σ_{ℓ=0..l_max} C^ℓ`.
pub fn support_size(policy: &Policy) -> u128 {
    let c = policy.vocab().content_size() as u128;
    let mut total: u128 = 0;
    let mut term: u128 = 1;
    for _ in 0..=policy.l_max() {
        total = total.saturating_add(term);
        term = term.saturating_mul(c);
    }
    total
}

pub fn enumerate_support(policy: &Policy) -> Result<Vec<SupportEntry>> {
    enumerate_support_with_cap(policy, DEFAULT_CAP)
}

/// Every sequence with positive probability, in depth-first lexicographic order.
pub fn enumerate_support_with_cap(policy: &Policy, cap: u128) -> Result<Vec<SupportEntry>> {
    let needed = support_size(policy);
    if needed > cap {
        return Err(Error::Capacity { needed, cap });
    }
    let mut out = Vec::with_capacity(needed as usize);
    let mut prefix = Vec::with_capacity(policy.l_max() + 1);
    expand(policy, &mut prefix, 1.0, 0.0, &mut out);
    Ok(out)
}

fn expand(policy: &Policy, prefix: &mut Vec<usize>, prob: f64, logp: f64, out: &mut Vec<SupportEntry>) {
    let pos = prefix.len() + 1;
    let ctx = prefix.last().map_or(Context::Start, |&t| Context::Token(t));
    let mut dist = vec![0.0; policy.vocab().size()];
    policy.dist_into(pos, ctx, &mut dist);
    let eos = policy.vocab().eos();
    for (tok, &p) in dist.iter().enumerate() {
        let q = prob * p;
        if q <= 0.0 {
            continue;
        }
        prefix.push(tok);
        if tok == eos {
            out.push(SupportEntry { seq: Sequence::from_raw(prefix.clone()), prob: q, logp: logp + p.ln() });
        } else {
            expand(policy, prefix, q, logp + p.ln(), out);
        }
        prefix.pop();
    }
}

/// `H(π) = Σ_y p(y)(-ln p(y))`.
pub fn exact_entropy(policy: &Policy) -> Result<f64> {
    Ok(enumerate_support(policy)?.iter().map(|e| -e.prob * e.prob.ln()).sum())
}

/// `∇H = Σ_y p(y)(-ln p(y) - 1) ∇log p(y)`.
pub fn exact_entropy_gradient(policy: &Policy) -> Result<GradVector> {
    let mut grad = policy.zero_grad();
    for e in enumerate_support(policy)? {
        let weight = e.prob * (-e.prob.ln() - 1.0);
        policy.accumulate_grad_log_prob(&e.seq, weight, &mut grad);
    }
    Ok(grad)
}

/// Central differences `(f(θ+εe_k) - f(θ-εe_k)) / 2ε` for every parameter.
pub fn finite_difference_gradient<F>(f: F, policy: &Policy, eps: f64) -> GradVector
where
    F: Fn(&Policy) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = policy.clone();
    let mut out = Vec::with_capacity(policy.param_count());
    for k in 0..policy.param_count() {
        let orig = work.logits()[k];
        work.logits_mut()[k] = orig + eps;
        let plus = f(&work);
        work.logits_mut()[k] = orig - eps;
        let minus = f(&work);
        work.logits_mut()[k] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    GradVector::from_vec(out)
}

/// Exact expectation `Σ_y p(y) · g(y)` of a single-sample gradient estimator.
pub fn expected_objective_gradient(policy: &Policy, kind: ObjectiveKind) -> Result<GradVector> {
    if kind == ObjectiveKind::GreedyEm {
        return Err(contract("greedy-em has no sampling distribution to average over"));
    }
    let spec = ObjectiveSpec::single_sample(kind);
    let mut total = policy.zero_grad();
    for e in enumerate_support(policy)? {
        let cands =
            CandidateSet { seqs: vec![e.seq], logps: vec![e.logp], source: CandidateSource::Sampled, exhausted: false };
        total.add_scaled(&objective_gradient(policy, &cands, &spec)?, e.prob);
    }
    Ok(total)
}

/// Exact expectation of a group estimator over all ordered i.i.d. `G`-tuples.
pub fn expected_group_gradient(policy: &Policy, spec: &ObjectiveSpec) -> Result<GradVector> {
    spec.validate()?;
    if spec.source != CandidateSource::Sampled {
        return Err(contract("group expectation is defined for sampled candidates only"));
    }
    let support = enumerate_support(policy)?;
    let tuples = (support.len() as u128).checked_pow(spec.g as u32).unwrap_or(u128::MAX);
    if tuples > DEFAULT_CAP {
        return Err(Error::Capacity { needed: tuples, cap: DEFAULT_CAP });
    }
    let mut total = policy.zero_grad();
    let mut idx = vec![0usize; spec.g];
    loop {
        let prob: f64 = idx.iter().map(|&i| support[i].prob).product();
        let cands = CandidateSet {
            seqs: idx.iter().map(|&i| support[i].seq.clone()).collect(),
            logps: idx.iter().map(|&i| support[i].logp).collect(),
            source: CandidateSource::Sampled,
            exhausted: false,
        };
        total.add_scaled(&objective_gradient(policy, &cands, spec)?, prob);
        // odometer
        let mut k = 0;
        loop {
            if k == spec.g {
                return Ok(total);
            }
            idx[k] += 1;
            if idx[k] < support.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// `Σ_y p(y) ∇Ĥ_seq(y) = -Σ_y p(y) ∇log p(y)`, which must vanish.
pub fn expected_h_seq_gradient(policy: &Policy) -> Result<GradVector> {
    let mut total = policy.zero_grad();
    for e in enumerate_support(policy)? {
        policy.accumulate_grad_log_prob(&e.seq, -e.prob, &mut total);
    }
    Ok(total)
}

/// Spec for the unnormalized LOO-baselined sequence-level estimator.
pub fn loo_em_seq_spec(g: usize) -> ObjectiveSpec {
    ObjectiveSpec {
        kind: ObjectiveKind::EmSeq,
        baseline: Baseline::Loo,
        normalization: Normalization::None,
        source: CandidateSource::Sampled,
        g,
        entropy_group_norm: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constancy {
    /// Exact variance of `Ĥ_tok` under the factorized distribution.
    pub variance: f64,
    /// `Σ_t 𝓗(frame t)`.
    pub value: f64,
}

/// Evaluates `Ĥ_tok` on every outcome of independent fixed-length frames.
///
/// The per-step entropy is looked up through the full outcome prefix, as an
/// autoregressive model would, even though the frames ignore it.
pub fn factorized_htok_constancy(frames: &[Vec<f64>]) -> Result<Constancy> {
    factorized_htok_constancy_with_cap(frames, DEFAULT_CAP)
}

pub fn factorized_htok_constancy_with_cap(frames: &[Vec<f64>], cap: u128) -> Result<Constancy> {
    if frames.is_empty() {
        return Err(contract("need at least one frame"));
    }
    for (t, f) in frames.iter().enumerate() {
        if f.is_empty() || f.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(contract(format!("frame {t} is not a probability vector")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(contract(format!("frame {t} does not sum to 1")));
        }
    }
    let outcomes = frames.iter().try_fold(1u128, |acc, f| acc.checked_mul(f.len() as u128));
    let needed = outcomes.unwrap_or(u128::MAX);
    if needed > cap {
        return Err(Error::Capacity { needed, cap });
    }

    let step_entropy = |t: usize, _prefix: &[usize]| entropy(&frames[t]);
    let mut values = Vec::with_capacity(needed as usize);
    let mut probs = Vec::with_capacity(needed as usize);
    let mut idx = vec![0usize; frames.len()];
    'outer: loop {
        let h: f64 = (0..frames.len()).map(|t| step_entropy(t, &idx[..t])).sum();
        let p: f64 = idx.iter().enumerate().map(|(t, &j)| frames[t][j]).product();
        values.push(h);
        probs.push(p);
        for k in (0..frames.len()).rev() {
            idx[k] += 1;
            if idx[k] < frames[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    let mean: f64 = values.iter().zip(&probs).map(|(h, p)| h * p).sum::<f64>() / probs.iter().sum::<f64>();
    let variance = values.iter().zip(&probs).map(|(h, p)| p * (h - mean).powi(2)).sum();
    let value = frames.iter().map(|f| entropy(f)).sum();
    Ok(Constancy { variance, value })
}
