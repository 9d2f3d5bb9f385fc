//! Single-sample entropy estimators and Monte Carlo aggregation.
//!
//! `h_seq(y) = -log π(y)` and `h_tok(y) = Σ_t 𝓗(π(·|y_<t))`. The token-level
//! sum runs over every step of `y` including the step that emits EOS; on the
//! forced-EOS step the entropy is zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::policy::{Policy, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Seq,
    Tok,
}

pub fn h_seq(policy: &Policy, seq: &Sequence) -> Result<f64> {
    Ok(-policy.sequence_log_prob(seq)?)
}

pub fn h_tok(policy: &Policy, seq: &Sequence) -> Result<f64> {
    policy.check_sequence(seq)?;
    Ok(h_tok_unchecked(policy, seq))
}

pub(crate) fn h_tok_unchecked(policy: &Policy, seq: &Sequence) -> f64 {
    let mut buf = vec![0.0; policy.vocab().size()];
    seq.steps().map(|(pos, ctx, _)| policy.token_entropy_unchecked(pos, ctx, &mut buf)).sum()
}

pub fn estimate(policy: &Policy, estimator: Estimator, seq: &Sequence) -> Result<f64> {
    match estimator {
        Estimator::Seq => h_seq(policy, seq),
        Estimator::Tok => h_tok(policy, seq),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Sample mean and standard error of `estimator` over `n` ancestral samples.
pub fn mc_entropy_estimate<R: Rng + ?Sized>(
    policy: &Policy,
    estimator: Estimator,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n < 2 {
        return Err(contract(format!("Monte Carlo estimate needs n >= 2, got {n}")));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=n {
        let seq = policy.sample_sequence(rng);
        let x = estimate(policy, estimator, &seq)?;
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate { mean, std_error: (var / n as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::oracle::{enumerate_support, exact_entropy};
    use crate::policy::Vocab;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_uniform() -> Policy {
        Policy::uniform(Vocab::new(2).unwrap(), 1).unwrap()
    }

    #[test]
    fn peaked_policy_has_zero_estimates() {
        let target = [0, 1];
        let p = fixtures::peaked_policy(3, 6, &target, 50.0);
        let s = Sequence::from_content(&target, p.vocab()).unwrap();
        assert!(h_seq(&p, &s).unwrap() < 1e-9);
        assert!(h_tok(&p, &s).unwrap() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for est in [Estimator::Seq, Estimator::Tok] {
            let mc = mc_entropy_estimate(&p, est, 100, &mut rng).unwrap();
            assert!(mc.mean < 1e-9 && mc.std_error < 1e-9);
        }
    }

    #[test]
    fn uniform_tiny_values() {
        let p = tiny_uniform();
        let a = Sequence::new(vec![0, 2], p.vocab()).unwrap();
        let eos = Sequence::new(vec![2], p.vocab()).unwrap();
        assert_abs_diff_eq!(h_seq(&p, &a).unwrap(), 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(h_tok(&p, &a).unwrap(), 3f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(h_tok(&p, &eos).unwrap(), 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn tok_estimator_is_constant_on_uniform_tiny() {
        let p = tiny_uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mc = mc_entropy_estimate(&p, Estimator::Tok, 257, &mut rng).unwrap();
        // 𝓗 of three equal probabilities lands within an ulp of ln 3
        assert_abs_diff_eq!(mc.mean, 3f64.ln(), epsilon = 1e-15);
        assert_eq!(mc.std_error, 0.0);
    }

    #[test]
    fn h_seq_matches_stepwise_recomputation() {
        let p = fixtures::p1();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let s = p.sample_sequence(&mut rng);
            let stepwise: f64 = s.steps().map(|(pos, ctx, tok)| -p.next_token_dist(pos, ctx).unwrap()[tok].ln()).sum();
            assert_abs_diff_eq!(h_seq(&p, &s).unwrap(), stepwise, epsilon = 1e-12);
        }
    }

    #[test]
    fn h_tok_expectation_equals_entropy() {
        let p = fixtures::p1();
        let support = enumerate_support(&p).unwrap();
        let expectation: f64 = support.iter().map(|e| e.prob * h_tok(&p, &e.seq).unwrap()).sum();
        assert_abs_diff_eq!(expectation, exact_entropy(&p).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn mc_estimates_bracket_exact_entropy() {
        let p = fixtures::p1();
        let exact = exact_entropy(&p).unwrap();
        for (est, seed) in [(Estimator::Seq, 10), (Estimator::Tok, 11)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mc = mc_entropy_estimate(&p, est, 100_000, &mut rng).unwrap();
            assert!((mc.mean - exact).abs() <= 4.0 * mc.std_error, "{est:?}: {mc:?} vs {exact}");
        }
    }

    #[test]
    fn mc_rejects_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mc_entropy_estimate(&tiny_uniform(), Estimator::Seq, 1, &mut rng).is_err());
    }
}
