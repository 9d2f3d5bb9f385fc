//! Seeded reference policies shared by tests, the verify command and the
//! acceptance suite.

use rand_distr::{Distribution, Normal};

use crate::policy::{Context, Policy, TokenId, Vocab};
use crate::rng::{stream, stream_rng};

/// Content tokens of the reference policies (vocabulary of 4 with EOS).
pub const REFERENCE_CONTENT: usize = 3;
/// Free generation steps of the reference policies.
pub const REFERENCE_L_MAX: usize = 6;
pub const REFERENCE_COUNT: usize = 20;

/// Logits drawn i.i.d. from `N(0, scale²)`.
pub fn random_policy(content_size: usize, l_max: usize, seed: u64, scale: f64) -> Policy {
    let vocab = Vocab::new(content_size).expect("content_size >= 1");
    let n = Policy::param_count_for(vocab, l_max);
    let mut rng = stream_rng(seed, stream::POLICY, 0);
    let normal = Normal::new(0.0, scale).expect("finite scale");
    let logits = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Policy::from_logits(vocab, l_max, logits).expect("valid shape")
}

/// The `i`-th reference policy of a verification batch.
pub fn reference_policy(base_seed: u64, i: usize) -> Policy {
    random_policy(REFERENCE_CONTENT, REFERENCE_L_MAX, crate::rng::derive_seed(base_seed, stream::POLICY, i as u64), 1.0)
}

pub fn reference_policies(base_seed: u64) -> Vec<Policy> {
    (0..REFERENCE_COUNT).map(|i| reference_policy(base_seed, i)).collect()
}

/// Reference policy P1 used by the partiality check.
pub fn p1() -> Policy {
    random_policy(REFERENCE_CONTENT, REFERENCE_L_MAX, 1, 1.0)
}

/// Policy with `peak` on one token in every context: the next target token
/// along `target`, EOS everywhere else. Greedy decoding yields `target`.
pub fn peaked_policy(content_size: usize, l_max: usize, target: &[TokenId], peak: f64) -> Policy {
    assert!(target.len() <= l_max, "target longer than l_max");
    let vocab = Vocab::new(content_size).expect("content_size >= 1");
    let mut policy = Policy::uniform(vocab, l_max).expect("valid shape");
    let eos = vocab.eos();
    for pos in 1..=l_max {
        let ctxs: Vec<Context> =
            if pos == 1 { vec![Context::Start] } else { (0..content_size).map(Context::Token).collect() };
        for ctx in ctxs {
            let on_path = pos <= target.len() + 1
                && match ctx {
                    Context::Start => true,
                    Context::Token(t) => target.get(pos - 2) == Some(&t),
                };
            let next = if on_path { target.get(pos - 1).copied().unwrap_or(eos) } else { eos };
            let idx = policy.param_index(pos, ctx, next);
            policy.logits_mut()[idx] = peak;
        }
    }
    policy
}

/// Two content tokens, two free steps: seven sequences in the support.
pub fn tiny_policy(seed: u64) -> Policy {
    random_policy(2, 2, seed, 1.0)
}
