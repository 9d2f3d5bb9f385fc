//! Candidate generation: greedy decoding, sampled batches, beam search.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::policy::{Context, Policy, Sequence, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Sampled,
    Beam,
    Greedy,
}

impl CandidateSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateSource::Sampled => "sampled",
            CandidateSource::Beam => "beam",
            CandidateSource::Greedy => "greedy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub seqs: Vec<Sequence>,
    pub logps: Vec<f64>,
    pub source: CandidateSource,
    /// Set when beam search ran out of distinct completions before `g`.
    pub exhausted: bool,
}

impl CandidateSet {
    pub fn from_sequences(policy: &Policy, seqs: Vec<Sequence>, source: CandidateSource) -> Result<Self> {
        if seqs.is_empty() {
            return Err(contract("candidate set needs at least one sequence"));
        }
        let logps = seqs.iter().map(|s| policy.sequence_log_prob(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self { seqs, logps, source, exhausted: false })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Argmax at every step, ties to the lowest token id.
pub fn greedy_decode(policy: &Policy) -> Sequence {
    let eos = policy.vocab().eos();
    let mut buf = vec![0.0; policy.vocab().size()];
    let mut tokens = Vec::new();
    let mut ctx = Context::Start;
    for pos in 1..=policy.l_max() + 1 {
        policy.dist_into(pos, ctx, &mut buf);
        let tok = argmax_lowest(&buf);
        tokens.push(tok);
        if tok == eos {
            break;
        }
        ctx = Context::Token(tok);
    }
    Sequence::from_raw(tokens)
}

fn argmax_lowest(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

pub fn sample_batch<R: Rng + ?Sized>(policy: &Policy, g: usize, rng: &mut R) -> Result<CandidateSet> {
    if g == 0 {
        return Err(contract("sample_batch needs g >= 1"));
    }
    let seqs: Vec<Sequence> = (0..g).map(|_| policy.sample_sequence(rng)).collect();
    let logps = seqs.iter().map(|s| policy.log_prob_unchecked(s)).collect();
    Ok(CandidateSet { seqs, logps, source: CandidateSource::Sampled, exhausted: false })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    score: f64,
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-synchronous beam search over raw log-probabilities.
///
/// Each step expands every live hypothesis by every token and keeps the best
/// `g - finished` expansions; an expansion ending in EOS that makes the cut
/// is finished and permanently occupies one of the `g` slots. Search stops
/// once all slots are finished. No length normalization is applied. The
/// result is sorted by descending log-prob with lexicographic tie-break.
pub fn beam_search(policy: &Policy, g: usize) -> Result<CandidateSet> {
    if g == 0 {
        return Err(contract("beam_search needs g >= 1"));
    }
    let eos = policy.vocab().eos();
    let v = policy.vocab().size();
    let mut buf = vec![0.0; v];
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for pos in 1..=policy.l_max() + 1 {
        if live.is_empty() || finished.len() >= g {
            break;
        }
        let mut expansions = Vec::with_capacity(live.len() * v);
        for hyp in &live {
            let ctx = hyp.tokens.last().map_or(Context::Start, |&t| Context::Token(t));
            policy.dist_into(pos, ctx, &mut buf);
            for (tok, &p) in buf.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis { tokens, score: hyp.score + p.ln() });
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(g - finished.len());
        live.clear();
        for hyp in expansions {
            if hyp.tokens.last() == Some(&eos) {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
    }

    finished.sort_by(rank);
    let exhausted = finished.len() < g;
    if exhausted {
        log::warn!("beam width {g} exceeds the support; returning {} completions", finished.len());
    }
    let (seqs, logps) = finished.into_iter().map(|h| (Sequence::from_raw(h.tokens), h.score)).unzip();
    Ok(CandidateSet { seqs, logps, source: CandidateSource::Beam, exhausted })
}
