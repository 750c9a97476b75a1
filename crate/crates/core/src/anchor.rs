//! Implicit rewards and the trainable utility-anchor head.
//!
//! The anchor's dummy-response log-probability is a sum (or mean) over prompt
//! tokens of `log σ(W·h_i + b)`, where `h_i` are the prompt hidden states. The
//! partition-function term `β log Z(x)` is never materialized: every loss only
//! consumes reward differences within one prompt, where it cancels.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grad::{Tape, Var};
use crate::policy::{Binding, BoundPolicy, PolicyMode, PromptContext, ReferencePair, TokenSeq};
use crate::stable;

/// Affine head over prompt hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub normalize_by_length: bool,
}

impl AnchorHead {
    /// `W = 0, b = 0`: every prompt starts at `log 0.5` per token.
    pub fn zeros(dim: usize, normalize_by_length: bool) -> Self {
        Self { weights: vec![0.0; dim], bias: 0.0, normalize_by_length }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn bind(&self, tape: &mut Tape, binding: Binding) -> BoundHead {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| binding.var(tape, i, w))
            .collect();
        let bias = binding.var(tape, self.weights.len(), self.bias);
        BoundHead { weights, bias, normalize_by_length: self.normalize_by_length }
    }

    /// Plain-f64 anchor log-probability.
    pub fn logprob_f64(&self, hidden: &[Vec<f64>]) -> Result<f64> {
        if hidden.is_empty() {
            return Err(LabError::Invalid("anchor needs at least one hidden state".into()));
        }
        let mut total = 0.0;
        for h in hidden {
            if h.len() != self.dim() {
                return Err(dim_error(self.dim(), h.len()));
            }
            let z: f64 = self.weights.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.bias;
            total += stable::log_sigmoid(z);
        }
        Ok(if self.normalize_by_length { total / hidden.len() as f64 } else { total })
    }
}

fn dim_error(want: usize, got: usize) -> LabError {
    LabError::Dimension(format!("anchor head has dimension {want}, hidden state has {got}"))
}

/// An [`AnchorHead`] attached to one tape.
pub struct BoundHead {
    weights: Vec<Var>,
    bias: Var,
    normalize_by_length: bool,
}

impl BoundHead {
    /// `Σ_i log σ(W·h_i + b)`, divided by `n` when normalizing.
    pub fn logprob(&self, tape: &mut Tape, hidden: &[Vec<Var>]) -> Result<Var> {
        if hidden.is_empty() {
            return Err(LabError::Invalid("anchor needs at least one hidden state".into()));
        }
        let mut terms = Vec::with_capacity(hidden.len());
        for h in hidden {
            if h.len() != self.weights.len() {
                return Err(dim_error(self.weights.len(), h.len()));
            }
            let wh = tape.dot(&self.weights, h);
            let z = tape.add(wh, self.bias);
            terms.push(tape.log_sigmoid(z));
        }
        let total = tape.sum(&terms);
        Ok(if self.normalize_by_length {
            tape.scale(total, 1.0 / hidden.len() as f64)
        } else {
            total
        })
    }
}

/// Which implicit reward a method uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardFamily {
    /// `β (log π_θ(y|x) - log π_ref(y|x))`
    Dpo,
    /// `(β / |y|) log π_θ(y|x)`
    SimPo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub family: RewardFamily,
    pub beta: f64,
    pub gamma: f64,
}

impl RewardSpec {
    pub fn new(family: RewardFamily, beta: f64, gamma: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LabError::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { family, beta, gamma })
    }
}

/// Policy/reference pair together with the anchor head and its construction-time snapshot.
///
/// Trainable parameters are laid out as `[θ | W | b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredPair {
    pub pair: ReferencePair,
    pub head: AnchorHead,
    head_snapshot: AnchorHead,
}

impl AnchoredPair {
    pub fn new(pair: ReferencePair, head: AnchorHead) -> Self {
        Self { head_snapshot: head.clone(), pair, head }
    }

    pub fn from_parts(pair: ReferencePair, head: AnchorHead, head_snapshot: AnchorHead) -> Result<Self> {
        if head.dim() != head_snapshot.dim() || head.normalize_by_length != head_snapshot.normalize_by_length {
            return Err(LabError::Dimension("anchor head and its snapshot disagree".into()));
        }
        Ok(Self { pair, head, head_snapshot })
    }

    pub fn head_snapshot(&self) -> &AnchorHead {
        &self.head_snapshot
    }

    pub fn n_trainable(&self) -> usize {
        self.pair.policy.n_params() + self.head.n_params()
    }

    pub fn head_offset(&self) -> usize {
        self.pair.policy.n_params()
    }

    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.pair.policy.params.clone();
        v.extend_from_slice(&self.head.weights);
        v.push(self.head.bias);
        v
    }

    pub fn set_trainable(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_trainable() {
            return Err(LabError::Dimension(format!(
                "expected {} trainable parameters, got {}",
                self.n_trainable(),
                params.len()
            )));
        }
        let p = self.pair.policy.n_params();
        let d = self.head.dim();
        self.pair.policy.params.copy_from_slice(&params[..p]);
        self.head.weights.copy_from_slice(&params[p..p + d]);
        self.head.bias = params[p + d];
        Ok(())
    }

    /// Copy with the trainable parameters replaced.
    pub fn with_trainable(&self, params: &[f64]) -> Result<Self> {
        let mut s = self.clone();
        s.set_trainable(params)?;
        Ok(s)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundState<'_> {
        let policy = self.pair.policy.bind(tape, Binding::Trainable { offset: 0 });
        let reference = self.pair.reference().bind(tape, Binding::Frozen);
        let head = self.head.bind(tape, Binding::Trainable { offset: self.head_offset() });
        BoundState { state: self, policy, reference, head }
    }
}

/// Everything needed to score one record on a tape.
pub struct BoundState<'a> {
    state: &'a AnchoredPair,
    pub policy: BoundPolicy<'a>,
    pub reference: BoundPolicy<'a>,
    pub head: BoundHead,
}

/// Per-response pieces of a reward, kept for telemetry and the theory checks.
pub struct ScoredResponses {
    pub rewards: Vec<Var>,
    pub policy_logprobs: Vec<Var>,
    pub reference_logprobs: Option<Vec<Var>>,
}

impl BoundState<'_> {
    /// Implicit rewards of `responses` under `spec`, sharing one prompt encoding.
    pub fn score(
        &self,
        tape: &mut Tape,
        spec: RewardSpec,
        ctx: &PromptContext,
        responses: &[&TokenSeq],
    ) -> Result<ScoredResponses> {
        let lp = self.policy.seq_logprobs(tape, ctx, responses)?;
        match spec.family {
            RewardFamily::Dpo => {
                let lr = self.reference.seq_logprobs(tape, ctx, responses)?;
                let rewards = lp
                    .iter()
                    .zip(&lr)
                    .map(|(&p, &r)| {
                        let d = tape.sub(p, r);
                        tape.scale(d, spec.beta)
                    })
                    .collect();
                Ok(ScoredResponses { rewards, policy_logprobs: lp, reference_logprobs: Some(lr) })
            }
            RewardFamily::SimPo => {
                let rewards = lp
                    .iter()
                    .zip(responses)
                    .map(|(&p, r)| tape.scale(p, spec.beta / r.len() as f64))
                    .collect();
                Ok(ScoredResponses { rewards, policy_logprobs: lp, reference_logprobs: None })
            }
        }
    }

    pub fn reward_policy(
        &self,
        tape: &mut Tape,
        spec: RewardSpec,
        ctx: &PromptContext,
        response: &TokenSeq,
    ) -> Result<Var> {
        Ok(self.score(tape, spec, ctx, &[response])?.rewards[0])
    }

    /// Anchor log-probability drift `A_θ(x) - A_ref(x)` for the DPO family:
    /// with the token model both sides use the current head on policy and
    /// reference hidden states; with the table the reference side is the head
    /// snapshot on the same frozen states.
    pub fn anchor_drift(&self, tape: &mut Tape, ctx: &PromptContext) -> Result<Var> {
        let h = self.policy.prompt_hidden_states(tape, ctx)?;
        let a_theta = self.head.logprob(tape, &h)?;
        let a_ref = match self.state.pair.mode() {
            PolicyMode::Tabular => {
                let v = self.state.head_snapshot.logprob_f64(&ctx.hidden_states)?;
                tape.constant(v)
            }
            PolicyMode::TinyLm => {
                let hr = self.reference.prompt_hidden_states(tape, ctx)?;
                self.head.logprob(tape, &hr)?
            }
        };
        Ok(tape.sub(a_theta, a_ref))
    }

    /// `r(x, y_⊥)` without `γ`: the uncertainty penalty `û(x)`.
    pub fn anchor_penalty(&self, tape: &mut Tape, spec: RewardSpec, ctx: &PromptContext) -> Result<Var> {
        let base = match spec.family {
            RewardFamily::Dpo => self.anchor_drift(tape, ctx)?,
            RewardFamily::SimPo => {
                let h = self.policy.prompt_hidden_states(tape, ctx)?;
                self.head.logprob(tape, &h)?
            }
        };
        Ok(tape.scale(base, spec.beta))
    }

    /// Anchor reward `r(x, y_⊥)`.
    pub fn reward_anchor(&self, tape: &mut Tape, spec: RewardSpec, ctx: &PromptContext) -> Result<Var> {
        let u = self.anchor_penalty(tape, spec, ctx)?;
        Ok(tape.offset(u, spec.gamma))
    }
}

/// Convenience: value of the anchor reward for one prompt.
pub fn reward_anchor_value(state: &AnchoredPair, spec: RewardSpec, ctx: &PromptContext) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let v = bound.reward_anchor(&mut tape, spec, ctx)?;
    Ok(tape.value(v))
}
