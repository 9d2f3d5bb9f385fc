//! Episodic test-time adaptation on synthetic domain-shifted episodes.
//!
//! An episode is a target sequence plus a "shifted" source policy: a clean
//! policy that greedy-decodes to the target, flattened by a temperature `τ`
//! and perturbed by i.i.d. Gaussian logit noise `σ`. Adaptation runs
//! `steps` optimizer updates on fresh candidates, greedy-decodes the adapted
//! policy and then throws the adapted parameters away.

pub mod metrics;
pub mod optim;
pub mod suite;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, greedy_decode, sample_batch, CandidateSet, CandidateSource};
use crate::error::{Error, Result};
use crate::estimators::h_tok_unchecked;
use crate::objectives::{objective_gradient, ObjectiveKind, ObjectiveSpec};
use crate::oracle::exact_entropy;
use crate::policy::{Policy, Sequence, Vocab};
use crate::rng::{stream, stream_rng};

pub use metrics::token_error_rate;
pub use optim::{AdamWParams, OptimizerKind, OptimizerState};
pub use suite::{generate_episodes, run_cell, run_cells, run_suite, write_csv, Cell, ReportRow, Sweep, CSV_HEADER};

/// Logit bonus of the target token in the clean policy.
pub const CLEAN_PEAK: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: ObjectiveSpec,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adamw: AdamWParams,
    pub episodes: usize,
    pub tau: f64,
    pub sigma: f64,
    pub content_size: usize,
    pub l_max: usize,
    pub seed: u64,
    /// Positions (1-based) whose logits adapt; every position when absent.
    pub adapt_positions: Option<Vec<usize>>,
    /// Record wall-clock runtime. When off the runtime column is 0 and
    /// reports are byte-reproducible.
    pub timing: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: ObjectiveSpec::preset("em-tok", 16).expect("known preset"),
            steps: 10,
            lr: 1e-3,
            optimizer: OptimizerKind::Adamw,
            adamw: AdamWParams::default(),
            episodes: 200,
            tau: 2.0,
            sigma: 0.5,
            content_size: 3,
            l_max: 6,
            seed: 0,
            adapt_positions: None,
            timing: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.steps == 0 {
            return fail("steps must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return fail("tau must be finite and >= 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be finite and >= 0");
        }
        if self.episodes == 0 {
            return fail("episodes must be at least 1");
        }
        if self.content_size == 0 {
            return fail("content_size must be at least 1");
        }
        if self.l_max < 3 {
            return fail("l_max must be at least 3 (targets have 2..=l_max-1 tokens)");
        }
        if let Some(positions) = &self.adapt_positions {
            if positions.iter().any(|&p| p == 0 || p > self.l_max + 1) {
                return fail("adapt_positions entries must lie in 1..=l_max+1");
            }
        }
        self.method.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.content_size).expect("validated content_size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub seed: u64,
    pub target: Sequence,
    pub clean_policy: Policy,
    pub source_policy: Policy,
}

/// Deterministic in `(config.seed, index)`.
pub fn generate_episode(config: &AdaptConfig, index: u64) -> Result<Episode> {
    config.validate()?;
    let vocab = config.vocab();
    let mut rng = stream_rng(config.seed, stream::EPISODE, index);
    let len = rng.random_range(2..=config.l_max - 1);
    let content: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab.content_size())).collect();
    let target = Sequence::from_content(&content, vocab)?;

    let mut clean = Policy::uniform(vocab, config.l_max)?;
    for (pos, ctx, tok) in target.steps() {
        let idx = clean.param_index(pos, ctx, tok);
        clean.logits_mut()[idx] += CLEAN_PEAK;
    }

    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let logits = clean.logits().iter().map(|z| z / config.tau + noise.sample(&mut rng)).collect();
    let source_policy = Policy::from_logits(vocab, config.l_max, logits)?;
    Ok(Episode { index, seed: config.seed, target, clean_policy: clean, source_policy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTrace {
    /// Mean of the method's entropy estimator over this step's candidates.
    pub mean_estimate: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub index: u64,
    pub entropy_initial: f64,
    pub entropy_final: f64,
    pub ter_initial: f64,
    pub ter: f64,
    pub exact_match_initial: bool,
    pub exact_match: bool,
    pub per_step: Vec<StepTrace>,
    pub runtime_s: f64,
    pub failed: bool,
    /// Hash of the parameters adaptation started from.
    pub initial_param_hash: u64,
}

pub fn param_hash(policy: &Policy) -> u64 {
    let mut h = DefaultHasher::new();
    policy.vocab().content_size().hash(&mut h);
    policy.l_max().hash(&mut h);
    for v in policy.logits() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn candidates<R: Rng + ?Sized>(policy: &Policy, spec: &ObjectiveSpec, rng: &mut R) -> Result<CandidateSet> {
    match spec.source {
        CandidateSource::Sampled => sample_batch(policy, spec.g, rng),
        CandidateSource::Beam => beam_search(policy, spec.g),
        CandidateSource::Greedy => {
            CandidateSet::from_sequences(policy, vec![greedy_decode(policy)], CandidateSource::Greedy)
        }
    }
}

/// Adapt-then-reset on one episode. The episode's policy is never mutated.
pub fn adapt_episode(episode: &Episode, config: &AdaptConfig) -> Result<EpisodeReport> {
    config.validate()?;
    let spec = config.method;
    let mut rng = stream_rng(config.seed, stream::ADAPT, episode.index);

    let entropy_initial = exact_entropy(&episode.source_policy)?;
    let initial_decode = greedy_decode(&episode.source_policy);
    let ter_initial = token_error_rate(&initial_decode, &episode.target)?;

    let started = Instant::now();
    let mut policy = episode.source_policy.clone();
    let initial_param_hash = param_hash(&policy);
    let block = (policy.vocab().size() + 1) * policy.vocab().size();
    let mut opt = OptimizerState::new(config.optimizer, config.lr, config.adamw, policy.param_count());
    let frozen: Vec<usize> = match &config.adapt_positions {
        Some(keep) => (0..policy.param_count()).filter(|&i| !keep.contains(&(i / block + 1))).collect(),
        None => Vec::new(),
    };
    let mut per_step = Vec::with_capacity(config.steps);
    let mut failed = false;
    for _ in 0..config.steps {
        let cands = candidates(&policy, &spec, &mut rng)?;
        let mean_estimate = cands
            .seqs
            .iter()
            .zip(&cands.logps)
            .map(|(s, lp)| match spec.kind {
                ObjectiveKind::EmSeq => -lp,
                _ => h_tok_unchecked(&policy, s),
            })
            .sum::<f64>()
            / cands.len() as f64;
        let grad = objective_gradient(&policy, &cands, &spec)?;
        per_step.push(StepTrace { mean_estimate, grad_norm: grad.l2_norm() });
        let pinned: Vec<f64> = frozen.iter().map(|&i| policy.logits()[i]).collect();
        if opt.step(&mut policy, &grad).is_err() {
            log::warn!("episode {}: non-finite gradient, stopping adaptation", episode.index);
            failed = true;
            break;
        }
        for (&i, &w) in frozen.iter().zip(&pinned) {
            policy.logits_mut()[i] = w;
        }
    }
    let decoded = greedy_decode(&policy);
    let runtime_s = if config.timing { started.elapsed().as_secs_f64() } else { 0.0 };

    Ok(EpisodeReport {
        index: episode.index,
        entropy_initial,
        entropy_final: exact_entropy(&policy)?,
        ter_initial,
        ter: token_error_rate(&decoded, &episode.target)?,
        exact_match_initial: initial_decode == episode.target,
        exact_match: decoded == episode.target,
        per_step,
        runtime_s,
        failed,
        initial_param_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: f64, sigma: f64) -> AdaptConfig {
        AdaptConfig { tau, sigma, episodes: 10, timing: false, ..AdaptConfig::default() }
    }

    #[test]
    fn noiseless_unit_temperature_decodes_target() {
        let c = cfg(1.0, 0.0);
        for i in 0..20 {
            let ep = generate_episode(&c, i).unwrap();
            assert_eq!(greedy_decode(&ep.source_policy), ep.target);
            assert_eq!(greedy_decode(&ep.clean_policy), ep.target);
            let n = ep.target.content().len();
            assert!((2..=c.l_max - 1).contains(&n));
        }
    }

    #[test]
    fn temperature_preserves_argmax_and_raises_entropy() {
        let c = cfg(10.0, 0.0);
        for i in 0..10 {
            let ep = generate_episode(&c, i).unwrap();
            assert_eq!(greedy_decode(&ep.source_policy), ep.target);
            assert!(exact_entropy(&ep.source_policy).unwrap() > exact_entropy(&ep.clean_policy).unwrap());
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = cfg(2.0, 0.5);
        assert_eq!(generate_episode(&c, 3).unwrap(), generate_episode(&c, 3).unwrap());
        assert_ne!(generate_episode(&c, 3).unwrap(), generate_episode(&c, 4).unwrap());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let c = AdaptConfig { lr: 0.0, steps: 3, ..cfg(2.0, 0.5) };
        let ep = generate_episode(&c, 1).unwrap();
        let r = adapt_episode(&ep, &c).unwrap();
        assert_eq!(r.entropy_final, r.entropy_initial);
        assert_eq!(r.ter, r.ter_initial);
        assert_eq!(r.per_step.len(), 3);
    }

    #[test]
    fn noiseless_episode_stays_correct_for_every_method() {
        for name in ["em-tok", "em-seq", "em-tok-b", "pg-tok", "ent-tok", "greedy-em"] {
            let c = AdaptConfig { method: ObjectiveSpec::preset(name, 4).unwrap(), ..cfg(1.0, 0.0) };
            let ep = generate_episode(&c, 2).unwrap();
            let r = adapt_episode(&ep, &c).unwrap();
            assert_eq!((r.ter_initial, r.ter), (0.0, 0.0), "{name}");
            assert!(!r.failed);
        }
    }

    #[test]
    fn adaptation_does_not_leak_between_episodes() {
        let c = cfg(2.0, 0.5);
        let e0 = generate_episode(&c, 0).unwrap();
        let e1 = generate_episode(&c, 1).unwrap();
        let r0 = adapt_episode(&e0, &c).unwrap();
        let r1 = adapt_episode(&e1, &c).unwrap();
        assert_eq!(r0.initial_param_hash, param_hash(&e0.source_policy));
        assert_eq!(r1.initial_param_hash, param_hash(&e1.source_policy));
        assert_eq!(adapt_episode(&e1, &c).unwrap(), r1);
    }

    #[test]
    fn frozen_positions_keep_their_logits() {
        let c = AdaptConfig { adapt_positions: Some(vec![2, 3]), lr: 0.1, steps: 3, ..cfg(2.0, 0.5) };
        let ep = generate_episode(&c, 5).unwrap();
        let free = adapt_episode(&ep, &AdaptConfig { adapt_positions: None, ..c.clone() }).unwrap();
        let masked = adapt_episode(&ep, &c).unwrap();
        assert_ne!(free.entropy_final, masked.entropy_final);
        let all_frozen = AdaptConfig { adapt_positions: Some(vec![]), ..c.clone() };
        let r = adapt_episode(&ep, &all_frozen).unwrap();
        assert_eq!(r.entropy_final, r.entropy_initial);
        assert!(AdaptConfig { adapt_positions: Some(vec![0]), ..c.clone() }.validate().is_err());
        assert!(AdaptConfig { adapt_positions: Some(vec![8]), ..c }.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig { steps: 0, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { tau: 0.5, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { sigma: -1.0, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { l_max: 2, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { lr: f64::NAN, ..AdaptConfig::default() }.validate().is_err());
        AdaptConfig::default().validate().unwrap();
    }

    #[test]
    fn config_json_round_trip() {
        let c = AdaptConfig { seed: 7, lr: 3e-4, ..AdaptConfig::default() };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AdaptConfig>(&text).unwrap(), c);
        let partial: AdaptConfig = serde_json::from_str(r#"{"episodes": 5}"#).unwrap();
        assert_eq!(partial.episodes, 5);
        assert!(serde_json::from_str::<AdaptConfig>(r#"{"episdes": 5}"#).is_err());
    }
}
