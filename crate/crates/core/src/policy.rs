//! Tabular softmax autoregressive policy.
//!
//! The next-token distribution depends on the generation step and the
//! previous token. Step 1 uses a dedicated START context. After `l_max` free
//! steps the policy emits EOS with probability one, so the support is finite
//! and every sequence has at most `l_max + 1` tokens (EOS included).
//!
//! Logits are stored flat in position-major order:
//!
//! ```text
//! index = ((position - 1) * (V + 1) + context) * V + next
//! ```
//!
//! where `V` is the vocabulary size including EOS, `context` is the previous
//! token id or `V` for START, and `next` is the candidate token id. Rows for
//! the forced-EOS step and for the unused `prev = EOS` context exist in the
//! layout but never influence the distribution, so their gradients are zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    content_size: usize,
}

impl Vocab {
    pub fn new(content_size: usize) -> Result<Self> {
        if content_size == 0 {
            return Err(contract("vocabulary needs at least one content token"));
        }
        Ok(Self { content_size })
    }

    /// Number of non-EOS tokens.
    pub fn content_size(&self) -> usize {
        self.content_size
    }

    /// Number of tokens including EOS.
    pub fn size(&self) -> usize {
        self.content_size + 1
    }

    pub fn eos(&self) -> TokenId {
        self.content_size
    }
}

/// Previous-token context of a generation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Start,
    Token(TokenId),
}

/// A finished output: content tokens followed by exactly one EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(Vec<TokenId>);

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab: Vocab) -> Result<Self> {
        let eos = vocab.eos();
        match tokens.last() {
            Some(&last) if last == eos => {}
            _ => return Err(contract(format!("sequence {tokens:?} does not end with EOS"))),
        }
        if tokens.iter().filter(|&&t| t == eos).count() != 1 {
            return Err(contract(format!("sequence {tokens:?} contains EOS more than once")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > eos) {
            return Err(contract(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self(tokens))
    }

    /// Builds a sequence from content tokens, appending EOS.
    pub fn from_content(content: &[TokenId], vocab: Vocab) -> Result<Self> {
        let mut tokens = content.to_vec();
        tokens.push(vocab.eos());
        Self::new(tokens, vocab)
    }

    pub(crate) fn from_raw(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    /// Length including EOS.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.0[..self.0.len() - 1]
    }

    /// `(position, context, token)` for every step, positions starting at 1.
    pub fn steps(&self) -> impl Iterator<Item = (usize, Context, TokenId)> + '_ {
        self.0.iter().enumerate().map(move |(i, &tok)| {
            let ctx = if i == 0 { Context::Start } else { Context::Token(self.0[i - 1]) };
            (i + 1, ctx, tok)
        })
    }
}

/// Flat gradient aligned with [`Policy::logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradVector) -> f64 {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        self.0.iter().zip(&other.0).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocab,
    l_max: usize,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    content_size: usize,
    l_max: usize,
    logits: Vec<f64>,
}

impl Policy {
    pub fn param_count_for(vocab: Vocab, l_max: usize) -> usize {
        (l_max + 1) * (vocab.size() + 1) * vocab.size()
    }

    pub fn uniform(vocab: Vocab, l_max: usize) -> Result<Self> {
        Self::from_logits(vocab, l_max, vec![0.0; Self::param_count_for(vocab, l_max)])
    }

    pub fn from_logits(vocab: Vocab, l_max: usize, logits: Vec<f64>) -> Result<Self> {
        if l_max == 0 {
            return Err(contract("l_max must be at least 1"));
        }
        let expected = Self::param_count_for(vocab, l_max);
        if logits.len() != expected {
            return Err(contract(format!("expected {expected} logits, got {}", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(contract("logits must be finite"));
        }
        Ok(Self { vocab, l_max, logits })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable parameter access for optimizers. Callers keep entries finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn zero_grad(&self) -> GradVector {
        GradVector::zeros(self.param_count())
    }

    fn context_index(&self, ctx: Context) -> usize {
        match ctx {
            Context::Start => self.vocab.size(),
            Context::Token(t) => t,
        }
    }

    /// Offset of the logit block for `(position, ctx)`.
    pub fn block_offset(&self, position: usize, ctx: Context) -> usize {
        let v = self.vocab.size();
        ((position - 1) * (v + 1) + self.context_index(ctx)) * v
    }

    pub fn param_index(&self, position: usize, ctx: Context, next: TokenId) -> usize {
        self.block_offset(position, ctx) + next
    }

    fn check_context(&self, position: usize, ctx: Context) -> Result<()> {
        if position == 0 || position > self.l_max + 1 {
            return Err(contract(format!("position {position} outside 1..={}", self.l_max + 1)));
        }
        match ctx {
            Context::Start if position != 1 => Err(contract(format!("START context used at position {position}"))),
            Context::Token(_) if position == 1 => Err(contract("position 1 requires the START context")),
            Context::Token(t) if t >= self.vocab.eos() => {
                Err(contract(format!("token {t} cannot precede another token")))
            }
            _ => Ok(()),
        }
    }

    fn forced_eos(&self, position: usize) -> bool {
        position == self.l_max + 1
    }

    /// Writes `π(· | position, ctx)` into `out` (length `V`). Context must be valid.
    pub(crate) fn dist_into(&self, position: usize, ctx: Context, out: &mut [f64]) {
        if self.forced_eos(position) {
            out.iter_mut().for_each(|p| *p = 0.0);
            out[self.vocab.eos()] = 1.0;
            return;
        }
        let off = self.block_offset(position, ctx);
        let block = &self.logits[off..off + out.len()];
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, &z) in out.iter_mut().zip(block) {
            *p = (z - max).exp();
            total += *p;
        }
        out.iter_mut().for_each(|p| *p /= total);
    }

    pub fn next_token_dist(&self, position: usize, ctx: Context) -> Result<Vec<f64>> {
        self.check_context(position, ctx)?;
        let mut out = vec![0.0; self.vocab.size()];
        self.dist_into(position, ctx, &mut out);
        Ok(out)
    }

    pub fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.len() > self.l_max + 1 {
            return Err(contract(format!("sequence of length {} exceeds l_max + 1 = {}", seq.len(), self.l_max + 1)));
        }
        Sequence::new(seq.tokens().to_vec(), self.vocab).map(|_| ())
    }

    pub fn sequence_log_prob(&self, seq: &Sequence) -> Result<f64> {
        self.check_sequence(seq)?;
        Ok(self.log_prob_unchecked(seq))
    }

    pub(crate) fn log_prob_unchecked(&self, seq: &Sequence) -> f64 {
        let mut buf = vec![0.0; self.vocab.size()];
        let mut total = 0.0;
        for (pos, ctx, tok) in seq.steps() {
            self.dist_into(pos, ctx, &mut buf);
            total += buf[tok].ln();
        }
        total
    }

    /// Ancestral sampling with inverse-CDF categorical draws.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let eos = self.vocab.eos();
        let mut buf = vec![0.0; self.vocab.size()];
        let mut tokens = Vec::with_capacity(self.l_max + 1);
        let mut ctx = Context::Start;
        for pos in 1..=self.l_max + 1 {
            self.dist_into(pos, ctx, &mut buf);
            let tok = inverse_cdf(&buf, rng.random::<f64>());
            tokens.push(tok);
            if tok == eos {
                break;
            }
            ctx = Context::Token(tok);
        }
        Sequence::from_raw(tokens)
    }

    pub fn grad_log_prob(&self, seq: &Sequence) -> Result<GradVector> {
        self.check_sequence(seq)?;
        let mut grad = self.zero_grad();
        self.accumulate_grad_log_prob(seq, 1.0, &mut grad);
        Ok(grad)
    }

    /// `grad += weight * ∇ log π(seq)`. Sequence must be valid.
    pub(crate) fn accumulate_grad_log_prob(&self, seq: &Sequence, weight: f64, grad: &mut GradVector) {
        let v = self.vocab.size();
        let mut buf = vec![0.0; v];
        for (pos, ctx, tok) in seq.steps() {
            if self.forced_eos(pos) {
                continue;
            }
            self.dist_into(pos, ctx, &mut buf);
            let off = self.block_offset(pos, ctx);
            let block = &mut grad.values_mut()[off..off + v];
            for (j, g) in block.iter_mut().enumerate() {
                let indicator = if j == tok { 1.0 } else { 0.0 };
                *g += weight * (indicator - buf[j]);
            }
        }
    }

    /// Entropy of one step's next-token distribution and its gradient.
    pub fn token_entropy_and_grad(&self, position: usize, ctx: Context) -> Result<(f64, GradVector)> {
        self.check_context(position, ctx)?;
        let mut grad = self.zero_grad();
        let h = self.accumulate_token_entropy_grad(position, ctx, 1.0, &mut grad);
        Ok((h, grad))
    }

    /// `grad += weight * ∇ 𝓗(π(·|ctx))`, returning the entropy.
    pub(crate) fn accumulate_token_entropy_grad(
        &self,
        position: usize,
        ctx: Context,
        weight: f64,
        grad: &mut GradVector,
    ) -> f64 {
        if self.forced_eos(position) {
            return 0.0;
        }
        let v = self.vocab.size();
        let mut buf = vec![0.0; v];
        self.dist_into(position, ctx, &mut buf);
        let h = entropy(&buf);
        let off = self.block_offset(position, ctx);
        let block = &mut grad.values_mut()[off..off + v];
        for (g, &p) in block.iter_mut().zip(&buf) {
            if p > 0.0 {
                *g += weight * (-p * (p.ln() + h));
            }
        }
        h
    }

    pub(crate) fn token_entropy_unchecked(&self, position: usize, ctx: Context, buf: &mut [f64]) -> f64 {
        if self.forced_eos(position) {
            return 0.0;
        }
        self.dist_into(position, ctx, buf);
        entropy(buf)
    }

    pub fn to_json(&self) -> Result<String> {
        let file =
            PolicyFile { content_size: self.vocab.content_size(), l_max: self.l_max, logits: self.logits.clone() };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        Self::from_logits(Vocab::new(file.content_size)?, file.l_max, file.logits).map_err(|e| match e {
            Error::Contract(msg) => Error::Config(msg),
            other => other,
        })
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// First index whose cumulative probability exceeds `u`. Falls back to the
/// last token with positive mass when rounding leaves the CDF below `u`.
fn inverse_cdf(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return j;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
