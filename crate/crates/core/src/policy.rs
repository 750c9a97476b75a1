//! Differentiable policies over responses: a per-prompt logit table and a tiny
//! Elman-style token model. Both expose sequence log-probabilities and prompt
//! hidden states on a [`Tape`], plus plain-f64 mirrors for sampling and metrics.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grad::{Tape, Var};
use crate::rng::{self, LabRng};
use crate::stable;

/// Ordered token ids of a prompt or response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(LabError::Invalid("token sequence must be non-empty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn check(&self, vocab: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(LabError::Invalid("empty token sequence".into()));
        }
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(t) => Err(LabError::Invalid(format!("token {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }
}

/// A prompt with its candidate responses and frozen per-token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub prompt_id: usize,
    pub tokens: TokenSeq,
    pub candidates: Vec<TokenSeq>,
    pub hidden_states: Vec<Vec<f64>>,
}

impl PromptContext {
    pub fn candidate_index(&self, response: &TokenSeq) -> Option<usize> {
        self.candidates.iter().position(|c| c == response)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_states.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Tabular,
    #[serde(rename = "tinylm")]
    TinyLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Architecture {
    /// Logits for prompt `p` live at `offsets[p]..offsets[p + 1]`.
    Tabular { offsets: Vec<usize> },
    /// Embedding `vocab x hidden`, recurrence `hidden x hidden`, output `vocab x hidden`,
    /// all row-major and concatenated in that order.
    #[serde(rename = "tinylm")]
    TinyLm { vocab: usize, hidden: usize },
}

impl Architecture {
    pub fn mode(&self) -> PolicyMode {
        match self {
            Self::Tabular { .. } => PolicyMode::Tabular,
            Self::TinyLm { .. } => PolicyMode::TinyLm,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Tabular { offsets } => offsets.last().copied().unwrap_or(0),
            Self::TinyLm { vocab, hidden } => 2 * vocab * hidden + hidden * hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

/// How a model's parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Leaves at global parameter indices `offset..offset + n_params`.
    Trainable { offset: usize },
    /// Constants; no gradient flows.
    Frozen,
}

impl Binding {
    pub(crate) fn var(self, tape: &mut Tape, local: usize, value: f64) -> Var {
        match self {
            Binding::Trainable { offset } => tape.param(offset + local, value),
            Binding::Frozen => tape.constant(value),
        }
    }
}

impl PolicyModel {
    pub fn tabular(counts: &[usize], logits: Vec<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for &c in counts {
            if c == 0 {
                return Err(LabError::Invalid("prompt without candidates".into()));
            }
            offsets.push(offsets.last().unwrap() + c);
        }
        Self::new(Architecture::Tabular { offsets }, logits)
    }

    pub fn tiny_lm(vocab: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if vocab == 0 || hidden == 0 {
            return Err(LabError::Invalid("tiny LM needs positive vocab and hidden size".into()));
        }
        Self::new(Architecture::TinyLm { vocab, hidden }, params)
    }

    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let model = Self { arch, params };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.arch.n_params();
        if self.params.len() != want {
            return Err(LabError::Dimension(format!(
                "policy expects {want} parameters, found {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn mode(&self) -> PolicyMode {
        self.arch.mode()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Dimension of the hidden states this model feeds to an anchor head.
    pub fn hidden_dim(&self, ctx: &PromptContext) -> usize {
        match self.arch {
            Architecture::Tabular { .. } => ctx.hidden_dim(),
            Architecture::TinyLm { hidden, .. } => hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape, binding: Binding) -> BoundPolicy<'_> {
        let dense = match self.arch {
            Architecture::TinyLm { .. } => self
                .params
                .iter()
                .enumerate()
                .map(|(i, &v)| binding.var(tape, i, v))
                .collect(),
            Architecture::Tabular { .. } => Vec::new(),
        };
        BoundPolicy { model: self, binding, dense }
    }

    fn tabular_range(&self, ctx: &PromptContext) -> Result<std::ops::Range<usize>> {
        let Architecture::Tabular { offsets } = &self.arch else {
            return Err(LabError::Mode("tabular operation on a token model".into()));
        };
        let p = ctx.prompt_id;
        if p + 1 >= offsets.len() {
            return Err(LabError::UnknownPrompt(p));
        }
        let range = offsets[p]..offsets[p + 1];
        if range.len() != ctx.candidates.len() {
            return Err(LabError::Dimension(format!(
                "prompt {p} has {} candidates but the logit table holds {}",
                ctx.candidates.len(),
                range.len()
            )));
        }
        Ok(range)
    }

    fn check_tokens(&self, ctx: &PromptContext) -> Result<()> {
        if let Architecture::TinyLm { vocab, .. } = self.arch {
            ctx.tokens
                .check(vocab)
                .map_err(|e| LabError::Dimension(format!("prompt {}: {e}", ctx.prompt_id)))?;
        }
        Ok(())
    }

    /// Log-probabilities of every candidate of `ctx` (tabular only).
    pub fn candidate_log_probs(&self, ctx: &PromptContext) -> Result<Vec<f64>> {
        let range = self.tabular_range(ctx)?;
        Ok(stable::log_softmax(&self.params[range]))
    }

    /// Plain-f64 `log π(y|x)`.
    pub fn seq_logprob_f64(&self, ctx: &PromptContext, response: &TokenSeq) -> Result<f64> {
        match self.arch {
            Architecture::Tabular { .. } => {
                let idx = ctx
                    .candidate_index(response)
                    .ok_or(LabError::UnregisteredCandidate(ctx.prompt_id))?;
                Ok(self.candidate_log_probs(ctx)?[idx])
            }
            Architecture::TinyLm { vocab, hidden } => {
                self.check_tokens(ctx)?;
                response.check(vocab)?;
                let lm = TinyLmView { p: &self.params, vocab, hidden };
                let mut h = lm.encode(ctx.tokens.tokens());
                let mut total = 0.0;
                for &t in response.tokens() {
                    total += lm.next_log_probs(&h)[t as usize];
                    h = lm.step(&h, t);
                }
                Ok(total)
            }
        }
    }

    /// Plain-f64 prompt hidden states.
    pub fn prompt_hidden_states_f64(&self, ctx: &PromptContext) -> Result<Vec<Vec<f64>>> {
        match self.arch {
            Architecture::Tabular { .. } => Ok(ctx.hidden_states.clone()),
            Architecture::TinyLm { vocab, hidden } => {
                self.check_tokens(ctx)?;
                let lm = TinyLmView { p: &self.params, vocab, hidden };
                let mut h = vec![0.0; hidden];
                Ok(ctx
                    .tokens
                    .tokens()
                    .iter()
                    .map(|&t| {
                        h = lm.step(&h, t);
                        h.clone()
                    })
                    .collect())
            }
        }
    }

    /// Order-sensitive fingerprint of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// A [`PolicyModel`] attached to one tape.
pub struct BoundPolicy<'a> {
    model: &'a PolicyModel,
    binding: Binding,
    dense: Vec<Var>,
}

impl BoundPolicy<'_> {
    pub fn model(&self) -> &PolicyModel {
        self.model
    }

    fn tabular_log_probs(&self, tape: &mut Tape, ctx: &PromptContext) -> Result<Vec<Var>> {
        let logits: Vec<Var> = self
            .model
            .tabular_range(ctx)?
            .map(|i| self.binding.var(tape, i, self.model.params[i]))
            .collect();
        let lse = tape.log_sum_exp(&logits);
        Ok(logits.iter().map(|&l| tape.sub(l, lse)).collect())
    }

    /// `log π(y|x)` for every candidate of `ctx` (tabular only).
    pub fn candidate_log_probs(&self, tape: &mut Tape, ctx: &PromptContext) -> Result<Vec<Var>> {
        self.tabular_log_probs(tape, ctx)
    }

    /// `log π(y|x)` for several responses sharing one prompt encoding.
    pub fn seq_logprobs(
        &self,
        tape: &mut Tape,
        ctx: &PromptContext,
        responses: &[&TokenSeq],
    ) -> Result<Vec<Var>> {
        match self.model.arch {
            Architecture::Tabular { .. } => {
                let mut idx = Vec::with_capacity(responses.len());
                for r in responses {
                    idx.push(
                        ctx.candidate_index(r)
                            .ok_or(LabError::UnregisteredCandidate(ctx.prompt_id))?,
                    );
                }
                let lp = self.tabular_log_probs(tape, ctx)?;
                Ok(idx.into_iter().map(|i| lp[i]).collect())
            }
            Architecture::TinyLm { vocab, hidden } => {
                self.model.check_tokens(ctx)?;
                let lm = TinyLmVars { v: &self.dense, vocab, hidden };
                let states = lm.run(tape, ctx.tokens.tokens());
                let h0 = states.last().cloned().expect("non-empty prompt");
                let mut out = Vec::with_capacity(responses.len());
                for r in responses {
                    r.check(vocab)?;
                    let mut h = h0.clone();
                    let mut terms = Vec::with_capacity(r.len());
                    for &t in r.tokens() {
                        let logits = lm.logits(tape, &h);
                        let lse = tape.log_sum_exp(&logits);
                        terms.push(tape.sub(logits[t as usize], lse));
                        h = lm.step(tape, &h, t);
                    }
                    out.push(tape.sum(&terms));
                }
                Ok(out)
            }
        }
    }

    pub fn seq_logprob(&self, tape: &mut Tape, ctx: &PromptContext, response: &TokenSeq) -> Result<Var> {
        Ok(self.seq_logprobs(tape, ctx, &[response])?[0])
    }

    /// Per-token prompt hidden states: the post-tanh recurrent state for the
    /// token model, frozen embeddings (as constants) for the table.
    pub fn prompt_hidden_states(&self, tape: &mut Tape, ctx: &PromptContext) -> Result<Vec<Vec<Var>>> {
        match self.model.arch {
            Architecture::Tabular { .. } => {
                let n = ctx.tokens.len();
                if ctx.hidden_states.len() != n {
                    return Err(LabError::Dimension(format!(
                        "prompt {} has {n} tokens but {} hidden states",
                        ctx.prompt_id,
                        ctx.hidden_states.len()
                    )));
                }
                Ok(ctx.hidden_states.iter().map(|h| tape.constants(h)).collect())
            }
            Architecture::TinyLm { vocab, hidden } => {
                self.model.check_tokens(ctx)?;
                let lm = TinyLmVars { v: &self.dense, vocab, hidden };
                Ok(lm.run(tape, ctx.tokens.tokens()))
            }
        }
    }
}

struct TinyLmVars<'a> {
    v: &'a [Var],
    vocab: usize,
    hidden: usize,
}

impl TinyLmVars<'_> {
    fn embed(&self, t: u32) -> &[Var] {
        let d = self.hidden;
        &self.v[t as usize * d..(t as usize + 1) * d]
    }

    fn recur(&self) -> &[Var] {
        let base = self.vocab * self.hidden;
        &self.v[base..base + self.hidden * self.hidden]
    }

    fn out(&self) -> &[Var] {
        let base = self.vocab * self.hidden + self.hidden * self.hidden;
        &self.v[base..]
    }

    fn step(&self, tape: &mut Tape, h: &[Var], t: u32) -> Vec<Var> {
        let rh = tape.matvec(self.recur(), h);
        self.embed(t)
            .iter()
            .zip(rh)
            .map(|(&e, r)| {
                let pre = tape.add(e, r);
                tape.tanh(pre)
            })
            .collect()
    }

    fn logits(&self, tape: &mut Tape, h: &[Var]) -> Vec<Var> {
        tape.matvec(self.out(), h)
    }

    fn run(&self, tape: &mut Tape, tokens: &[u32]) -> Vec<Vec<Var>> {
        let zero = tape.constant(0.0);
        let mut h = vec![zero; self.hidden];
        tokens
            .iter()
            .map(|&t| {
                h = self.step(tape, &h, t);
                h.clone()
            })
            .collect()
    }
}

struct TinyLmView<'a> {
    p: &'a [f64],
    vocab: usize,
    hidden: usize,
}

impl TinyLmView<'_> {
    fn step(&self, h: &[f64], t: u32) -> Vec<f64> {
        let d = self.hidden;
        let e = &self.p[t as usize * d..(t as usize + 1) * d];
        let r = &self.p[self.vocab * d..self.vocab * d + d * d];
        (0..d)
            .map(|i| {
                let rh: f64 = r[i * d..(i + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum();
                (e[i] + rh).tanh()
            })
            .collect()
    }

    fn encode(&self, tokens: &[u32]) -> Vec<f64> {
        tokens
            .iter()
            .fold(vec![0.0; self.hidden], |h, &t| self.step(&h, t))
    }

    fn next_log_probs(&self, h: &[f64]) -> Vec<f64> {
        let d = self.hidden;
        let o = &self.p[self.vocab * d + d * d..];
        let logits: Vec<f64> = o
            .chunks(d)
            .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect();
        stable::log_softmax(&logits)
    }
}

/// Trainable policy with its frozen reference twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePair {
    pub policy: PolicyModel,
    reference: PolicyModel,
}

impl ReferencePair {
    /// Policy starts as an exact copy of `reference`.
    pub fn new(reference: PolicyModel) -> Self {
        Self { policy: reference.clone(), reference }
    }

    pub fn from_parts(policy: PolicyModel, reference: PolicyModel) -> Result<Self> {
        if policy.arch != reference.arch {
            return Err(LabError::Dimension("policy and reference architectures differ".into()));
        }
        Ok(Self { policy, reference })
    }

    pub fn reference(&self) -> &PolicyModel {
        &self.reference
    }

    pub fn mode(&self) -> PolicyMode {
        self.policy.mode()
    }
}

/// `KL(π_θ || π_ref)` over the finite candidate set of `ctx`.
pub fn exact_kl(pair: &ReferencePair, ctx: &PromptContext) -> Result<f64> {
    if pair.mode() != PolicyMode::Tabular {
        return Err(LabError::Mode("exact KL needs an enumerable candidate set; use mc_kl".into()));
    }
    let lp = pair.policy.candidate_log_probs(ctx)?;
    let lr = pair.reference.candidate_log_probs(ctx)?;
    Ok(lp
        .iter()
        .zip(&lr)
        .map(|(&p, &r)| if p == f64::NEG_INFINITY { 0.0 } else { p.exp() * (p - r) })
        .sum())
}

/// Monte-Carlo KL estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Sampling horizon used for token-model KL: the longest candidate, or 4.
fn horizon(ctx: &PromptContext) -> usize {
    ctx.candidates.iter().map(TokenSeq::len).max().unwrap_or(4)
}

/// Unbiased estimate of `KL(π_θ || π_ref)` from `samples` draws `y ~ π_θ`.
/// For the token model the support is sequences of [`horizon`] tokens.
pub fn mc_kl_estimate(
    pair: &ReferencePair,
    ctx: &PromptContext,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(LabError::Invalid("mc_kl needs at least one sample".into()));
    }
    let mut rng = rng::stream(seed, ctx.prompt_id as u64);
    let ratios: Vec<f64> = match pair.policy.arch {
        Architecture::Tabular { .. } => {
            let lp = pair.policy.candidate_log_probs(ctx)?;
            let lr = pair.reference.candidate_log_probs(ctx)?;
            (0..samples)
                .map(|_| {
                    let i = rng::sample_log_categorical(&mut rng, &lp);
                    lp[i] - lr[i]
                })
                .collect()
        }
        Architecture::TinyLm { vocab, hidden } => {
            pair.policy.check_tokens(ctx)?;
            let pol = TinyLmView { p: &pair.policy.params, vocab, hidden };
            let refm = TinyLmView { p: &pair.reference.params, vocab, hidden };
            let hp0 = pol.encode(ctx.tokens.tokens());
            let hr0 = refm.encode(ctx.tokens.tokens());
            let len = horizon(ctx);
            (0..samples)
                .map(|_| sample_ratio(&pol, &refm, &hp0, &hr0, len, &mut rng))
                .collect()
        }
    };
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = if ratios.len() > 1 {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr: (var / n).sqrt() })
}

fn sample_ratio(
    pol: &TinyLmView,
    refm: &TinyLmView,
    hp0: &[f64],
    hr0: &[f64],
    len: usize,
    rng: &mut LabRng,
) -> f64 {
    let (mut hp, mut hr) = (hp0.to_vec(), hr0.to_vec());
    let mut ratio = 0.0;
    for _ in 0..len {
        let lp = pol.next_log_probs(&hp);
        let lr = refm.next_log_probs(&hr);
        let t = rng::sample_log_categorical(rng, &lp);
        ratio += lp[t] - lr[t];
        hp = pol.step(&hp, t as u32);
        hr = refm.step(&hr, t as u32);
    }
    ratio
}

pub fn mc_kl(pair: &ReferencePair, ctx: &PromptContext, samples: usize, seed: u64) -> Result<f64> {
    mc_kl_estimate(pair, ctx, samples, seed).map(|e| e.mean)
}
