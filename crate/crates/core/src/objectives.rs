//! Preference-optimization losses: seven pairwise baselines, the anchored
//! pairwise objectives, and the unpaired multi-response form.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchoredPair, BoundState, RewardFamily, RewardSpec};
use crate::error::{LabError, Result};
use crate::grad::{Tape, Var};
use crate::par::Exec;
use crate::policy::{exact_kl, mc_kl, PolicyMode, PromptContext, TokenSeq};

pub use crate::stable::bt_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "cpo")]
    Cpo,
    #[serde(rename = "kto")]
    Kto,
    #[serde(rename = "orpo")]
    Orpo,
    #[serde(rename = "r-dpo")]
    RDpo,
    #[serde(rename = "simpo")]
    SimPo,
    #[serde(rename = "uapo")]
    Uapo,
    #[serde(rename = "simuapo")]
    SimUapo,
    #[serde(rename = "uapo-multi")]
    UapoMulti,
    #[serde(rename = "simuapo-multi")]
    SimUapoMulti,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Dpo,
        Method::Ipo,
        Method::Cpo,
        Method::Kto,
        Method::Orpo,
        Method::RDpo,
        Method::SimPo,
        Method::Uapo,
        Method::SimUapo,
        Method::UapoMulti,
        Method::SimUapoMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
            Method::Cpo => "cpo",
            Method::Kto => "kto",
            Method::Orpo => "orpo",
            Method::RDpo => "r-dpo",
            Method::SimPo => "simpo",
            Method::Uapo => "uapo",
            Method::SimUapo => "simuapo",
            Method::UapoMulti => "uapo-multi",
            Method::SimUapoMulti => "simuapo-multi",
        }
    }

    pub fn is_multi(self) -> bool {
        matches!(self, Method::UapoMulti | Method::SimUapoMulti)
    }

    pub fn is_pairwise(self) -> bool {
        !self.is_multi()
    }

    pub fn uses_anchor(self) -> bool {
        matches!(self, Method::Uapo | Method::SimUapo | Method::UapoMulti | Method::SimUapoMulti)
    }

    /// Length-normalized anchor head for the SimPO-style anchored methods.
    pub fn normalizes_anchor(self) -> bool {
        matches!(self, Method::SimUapo | Method::SimUapoMulti)
    }

    pub fn family(self) -> RewardFamily {
        match self {
            Method::SimPo | Method::SimUapo | Method::SimUapoMulti | Method::Orpo => RewardFamily::SimPo,
            _ => RewardFamily::Dpo,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown method '{s}'")))
    }
}

/// Method plus hyperparameters. Only the fields a method uses are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub method: Method,
    /// Reward scale (all methods except IPO).
    pub beta: f64,
    /// SimPO target margin, or the constant reward anchor of the anchored methods.
    pub gamma: f64,
    /// IPO regularization.
    pub tau: f64,
    /// CPO likelihood weight / ORPO odds-ratio weight.
    pub lambda: f64,
    /// R-DPO length weight.
    pub alpha: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            method: Method::Uapo,
            beta: 0.1,
            gamma: 0.0,
            tau: 0.1,
            lambda: 1.0,
            alpha: 0.1,
            lambda_w: 1.0,
            lambda_l: 1.0,
        }
    }
}

impl ObjectiveSpec {
    pub fn new(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(LabError::Config(format!("{}: invalid {what} {v}", self.method)));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        if self.method == Method::Ipo && !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("lambda_w", self.lambda_w),
            ("lambda_l", self.lambda_l),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        if !self.gamma.is_finite() {
            return bad("gamma", self.gamma);
        }
        Ok(())
    }

    /// Reward used by the loss itself (and reported in telemetry).
    pub fn reward_spec(&self) -> RewardSpec {
        let beta = match self.method {
            Method::Ipo | Method::Orpo => 1.0,
            _ => self.beta,
        };
        RewardSpec { family: self.method.family(), beta, gamma: self.gamma }
    }

    /// Hyperparameter grid searched per method in the reference experiments.
    pub fn preset_grid(method: Method) -> Vec<ObjectiveSpec> {
        let base = ObjectiveSpec::new(method);
        let betas_dpo = [0.01, 0.05, 0.1];
        match method {
            Method::Dpo => betas_dpo.iter().map(|&b| base.with_beta(b)).collect(),
            Method::Ipo => [0.01, 0.1, 0.5, 1.0].iter().map(|&t| ObjectiveSpec { tau: t, ..base }).collect(),
            Method::Cpo => betas_dpo.iter().map(|&b| ObjectiveSpec { lambda: 1.0, ..base.with_beta(b) }).collect(),
            Method::Kto => betas_dpo
                .iter()
                .map(|&b| ObjectiveSpec { lambda_w: 1.0, lambda_l: 1.0, ..base.with_beta(b) })
                .collect(),
            Method::Orpo => [0.1, 0.5, 1.0, 2.0].iter().map(|&l| ObjectiveSpec { lambda: l, ..base }).collect(),
            Method::RDpo => [0.05, 0.1, 0.5, 1.0]
                .iter()
                .flat_map(|&a| betas_dpo.iter().map(move |&b| ObjectiveSpec { alpha: a, ..base.with_beta(b) }))
                .collect(),
            Method::SimPo => [2.0, 2.5, 10.0]
                .iter()
                .flat_map(|&b| [0.3, 1.0, 1.6, 3.0, 5.0].iter().map(move |&g| base.with_beta(b).with_gamma(g)))
                .collect(),
            Method::Uapo | Method::UapoMulti => [0.01, 0.05]
                .iter()
                .flat_map(|&b| [1.0, 4.5, 8.0].iter().map(move |&g| base.with_beta(b).with_gamma(g)))
                .collect(),
            Method::SimUapo | Method::SimUapoMulti => [2.5, 10.0]
                .iter()
                .flat_map(|&b| [4.5, 8.0].iter().map(move |&g| base.with_beta(b).with_gamma(g)))
                .collect(),
        }
    }
}

/// A prompt with its preferred and dispreferred responses. Unpaired records
/// leave one side empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    #[serde(skip)]
    pub id: usize,
    pub prompt_id: usize,
    pub prompt: TokenSeq,
    pub winners: Vec<TokenSeq>,
    pub losers: Vec<TokenSeq>,
}

impl PreferenceRecord {
    pub fn pairwise(id: usize, prompt_id: usize, prompt: TokenSeq, winner: TokenSeq, loser: TokenSeq) -> Self {
        Self { id, prompt_id, prompt, winners: vec![winner], losers: vec![loser] }
    }

    pub fn is_pairwise(&self) -> bool {
        self.winners.len() == 1 && self.losers.len() == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.winners.is_empty() && self.losers.is_empty() {
            return Err(LabError::Invalid(format!("record {} has neither winners nor losers", self.id)));
        }
        if self.winners.iter().any(|w| self.losers.contains(w)) {
            return Err(LabError::Invalid(format!("record {} lists a response as both winner and loser", self.id)));
        }
        Ok(())
    }
}

/// Tape nodes produced by one record's loss.
#[derive(Debug, Clone)]
pub struct RecordEval {
    pub loss: Var,
    pub winner_rewards: Vec<Var>,
    pub loser_rewards: Vec<Var>,
    pub anchor: Option<Var>,
    pub loss_w: Option<Var>,
    pub loss_l: Option<Var>,
}

fn check_finite(tape: &Tape, rec: &PreferenceRecord) -> Result<()> {
    tape.check_values()
        .map_err(|e| LabError::numerical(format!("loss of record {} (prompt {})", rec.id, rec.prompt_id), e))
}

fn ctx_for<'c>(contexts: &'c [PromptContext], rec: &PreferenceRecord) -> Result<&'c PromptContext> {
    let ctx = contexts.get(rec.prompt_id).ok_or(LabError::UnknownPrompt(rec.prompt_id))?;
    if ctx.prompt_id != rec.prompt_id || ctx.tokens != rec.prompt {
        return Err(LabError::Invalid(format!("record {} does not match prompt {}", rec.id, rec.prompt_id)));
    }
    Ok(ctx)
}

/// `-log σ(x)`.
fn neg_log_sigmoid(tape: &mut Tape, x: Var) -> Var {
    let nx = tape.neg(x);
    tape.softplus(nx)
}

/// Log-odds `log p - log(1 - p)` with `log p` clamped to keep `p` inside `[1e-12, 1 - 1e-12]`.
fn log_odds(tape: &mut Tape, log_p: Var) -> Var {
    let lo = 1e-12f64.ln();
    let hi = (-1e-12f64).ln_1p();
    let c = tape.clamp(log_p, lo, hi);
    let p = tape.exp(c);
    let np = tape.neg(p);
    let q = tape.offset(np, 1.0);
    let lq = tape.ln(q);
    tape.sub(c, lq)
}

/// Per-example loss of a pairwise method.
///
/// `kto_z0` is the KTO reference point `β·KL`, treated as a constant.
pub fn loss_pairwise(
    tape: &mut Tape,
    state: &BoundState<'_>,
    spec: &ObjectiveSpec,
    ctx: &PromptContext,
    rec: &PreferenceRecord,
    kto_z0: Option<f64>,
) -> Result<RecordEval> {
    if !spec.method.is_pairwise() {
        return Err(LabError::Config(format!("{} is not a pairwise method", spec.method)));
    }
    if !rec.is_pairwise() {
        return Err(LabError::Config(format!(
            "{} needs one winner and one loser; record {} has {} and {}",
            spec.method,
            rec.id,
            rec.winners.len(),
            rec.losers.len()
        )));
    }
    let (yw, yl) = (&rec.winners[0], &rec.losers[0]);
    let rs = spec.reward_spec();
    let scored = state.score(tape, rs, ctx, &[yw, yl])?;
    let (rw, rl) = (scored.rewards[0], scored.rewards[1]);
    let (lpw, lpl) = (scored.policy_logprobs[0], scored.policy_logprobs[1]);
    let mut anchor = None;
    let mut terms = None;

    let loss = match spec.method {
        Method::Dpo => {
            let d = tape.sub(rw, rl);
            neg_log_sigmoid(tape, d)
        }
        Method::Ipo => {
            let d = tape.sub(rw, rl);
            let c = tape.offset(d, -1.0 / (2.0 * spec.tau));
            tape.square(c)
        }
        Method::Cpo => {
            let d = tape.sub(lpw, lpl);
            let d = tape.scale(d, spec.beta);
            let pref = neg_log_sigmoid(tape, d);
            let nll = tape.scale(lpw, -spec.lambda);
            tape.add(pref, nll)
        }
        Method::Kto => {
            let z0 = kto_z0.ok_or_else(|| LabError::Invalid("KTO needs its reference point".into()))?;
            let zw = tape.offset(rw, -z0);
            let sw = tape.sigmoid(zw);
            let nl = tape.neg(rl);
            let zl = tape.offset(nl, z0);
            let sl = tape.sigmoid(zl);
            let a = tape.scale(sw, -spec.lambda_w);
            let b = tape.scale(sl, -spec.lambda_l);
            tape.add(a, b)
        }
        Method::Orpo => {
            // rewards here are (1/|y|) log π = log p
            let nll = tape.neg(rw);
            let ow = log_odds(tape, rw);
            let ol = log_odds(tape, rl);
            let d = tape.sub(ow, ol);
            let ratio = neg_log_sigmoid(tape, d);
            let ratio = tape.scale(ratio, spec.lambda);
            tape.add(nll, ratio)
        }
        Method::RDpo => {
            let d = tape.sub(rw, rl);
            let shift = spec.alpha * yw.len() as f64 - spec.alpha * yl.len() as f64;
            let d = tape.offset(d, shift);
            neg_log_sigmoid(tape, d)
        }
        Method::SimPo => {
            let d = tape.sub(rw, rl);
            let d = tape.offset(d, -spec.gamma);
            neg_log_sigmoid(tape, d)
        }
        Method::Uapo | Method::SimUapo => {
            let a = state.reward_anchor(tape, rs, ctx)?;
            let dw = tape.sub(rw, a);
            let lw = neg_log_sigmoid(tape, dw);
            let dl = tape.sub(a, rl);
            let ll = neg_log_sigmoid(tape, dl);
            anchor = Some(a);
            terms = Some((lw, ll));
            tape.add(lw, ll)
        }
        Method::UapoMulti | Method::SimUapoMulti => unreachable!("rejected above"),
    };
    check_finite(tape, rec)?;
    Ok(RecordEval {
        loss,
        winner_rewards: vec![rw],
        loser_rewards: vec![rl],
        anchor,
        loss_w: terms.map(|t| t.0),
        loss_l: terms.map(|t| t.1),
    })
}

/// Multi-response anchored loss. Either side may be empty (unpaired data),
/// contributing zero.
pub fn loss_multi(
    tape: &mut Tape,
    state: &BoundState<'_>,
    spec: &ObjectiveSpec,
    ctx: &PromptContext,
    rec: &PreferenceRecord,
) -> Result<RecordEval> {
    if !spec.method.is_multi() {
        return Err(LabError::Config(format!("{} is not a multi-response method", spec.method)));
    }
    if rec.winners.is_empty() && rec.losers.is_empty() {
        return Err(LabError::Invalid(format!("record {} has neither winners nor losers", rec.id)));
    }
    let rs = spec.reward_spec();
    let responses: Vec<&TokenSeq> = rec.winners.iter().chain(&rec.losers).collect();
    let scored = state.score(tape, rs, ctx, &responses)?;
    let (rw, rl) = scored.rewards.split_at(rec.winners.len());
    let a = state.reward_anchor(tape, rs, ctx)?;

    let lw = if rw.is_empty() {
        tape.constant(0.0)
    } else {
        let mut pool = Vec::with_capacity(rw.len() + 1);
        pool.push(a);
        pool.extend_from_slice(rw);
        let lse = tape.log_sum_exp(&pool);
        let k = tape.scale(lse, rw.len() as f64);
        let s = tape.sum(rw);
        tape.sub(k, s)
    };
    let ll = if rl.is_empty() {
        tape.constant(0.0)
    } else {
        let mut pool = Vec::with_capacity(rl.len() + 1);
        pool.push(a);
        pool.extend_from_slice(rl);
        let lse = tape.log_sum_exp(&pool);
        tape.sub(lse, a)
    };
    let loss = tape.add(lw, ll);
    check_finite(tape, rec)?;
    Ok(RecordEval {
        loss,
        winner_rewards: rw.to_vec(),
        loser_rewards: rl.to_vec(),
        anchor: Some(a),
        loss_w: Some(lw),
        loss_l: Some(ll),
    })
}

/// Dispatch on the method kind.
pub fn loss_record(
    tape: &mut Tape,
    state: &BoundState<'_>,
    spec: &ObjectiveSpec,
    ctx: &PromptContext,
    rec: &PreferenceRecord,
    kto_z0: Option<f64>,
) -> Result<RecordEval> {
    if spec.method.is_multi() {
        loss_multi(tape, state, spec, ctx, rec)
    } else {
        loss_pairwise(tape, state, spec, ctx, rec, kto_z0)
    }
}

/// Inputs shared by every record of a batch evaluation.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub spec: &'a ObjectiveSpec,
    pub state: &'a AnchoredPair,
    pub contexts: &'a [PromptContext],
    /// KTO reference points keyed by prompt id.
    pub kto_z0: Option<&'a HashMap<usize, f64>>,
}

/// Values and sparse gradient of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBreakdown {
    pub id: usize,
    pub prompt_id: usize,
    pub loss: f64,
    pub winner_rewards: Vec<f64>,
    pub loser_rewards: Vec<f64>,
    pub anchor: Option<f64>,
    pub loss_w: Option<f64>,
    pub loss_l: Option<f64>,
    pub grad: Vec<(usize, f64)>,
}

/// Evaluate one record on a fresh tape.
pub fn eval_record(lc: &LossContext<'_>, rec: &PreferenceRecord, with_grad: bool) -> Result<RecordBreakdown> {
    let ctx = ctx_for(lc.contexts, rec)?;
    let mut tape = Tape::new();
    let bound = lc.state.bind(&mut tape);
    let z0 = if lc.spec.method == Method::Kto {
        Some(
            lc.kto_z0
                .and_then(|m| m.get(&rec.prompt_id).copied())
                .ok_or_else(|| LabError::Invalid(format!("missing KTO reference point for prompt {}", rec.prompt_id)))?,
        )
    } else {
        None
    };
    let ev = loss_record(&mut tape, &bound, lc.spec, ctx, rec, z0)?;
    let grad = if with_grad {
        tape.backward(ev.loss)
            .map_err(|e| LabError::numerical(format!("gradient of record {}", rec.id), e))?
            .params()
            .to_vec()
    } else {
        Vec::new()
    };
    let val = |v: Option<Var>| v.map(|v| tape.value(v));
    Ok(RecordBreakdown {
        id: rec.id,
        prompt_id: rec.prompt_id,
        loss: tape.value(ev.loss),
        winner_rewards: tape.values(&ev.winner_rewards),
        loser_rewards: tape.values(&ev.loser_rewards),
        anchor: val(ev.anchor),
        loss_w: val(ev.loss_w),
        loss_l: val(ev.loss_l),
        grad,
    })
}

/// Mean loss over a batch with its dense gradient and per-record breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Sorted by record id.
    pub records: Vec<RecordBreakdown>,
}

fn reduce(n_params: usize, mut records: Vec<RecordBreakdown>, weights: Option<&[f64]>) -> Result<BatchEval> {
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; records.len()],
    };
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].id);
    let total_w: f64 = order.iter().map(|&i| w[i]).sum();
    if !(total_w > 0.0) {
        return Err(LabError::Invalid("batch weights must sum to a positive value".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for &i in &order {
        loss += w[i] * records[i].loss;
        for &(j, g) in &records[i].grad {
            grad[j] += w[i] * g;
        }
    }
    loss /= total_w;
    grad.iter_mut().for_each(|g| *g /= total_w);
    let mut sorted: Vec<RecordBreakdown> = Vec::with_capacity(records.len());
    let mut slots: Vec<Option<RecordBreakdown>> = records.drain(..).map(Some).collect();
    for i in order {
        sorted.push(slots[i].take().expect("each slot taken once"));
    }
    Ok(BatchEval { loss, grad, records: sorted })
}

/// Weighted mean of per-record losses, reduced in ascending record-id order.
pub fn batch_loss(
    lc: &LossContext<'_>,
    records: &[PreferenceRecord],
    weights: Option<&[f64]>,
    with_grad: bool,
) -> Result<BatchEval> {
    batch_loss_with(lc, records, weights, with_grad, Exec::default())
}

/// [`batch_loss`] with an explicit execution strategy.
pub fn batch_loss_with(
    lc: &LossContext<'_>,
    records: &[PreferenceRecord],
    weights: Option<&[f64]>,
    with_grad: bool,
    exec: Exec,
) -> Result<BatchEval> {
    if records.is_empty() {
        return Err(LabError::Invalid("batch_loss needs at least one record".into()));
    }
    if let Some(w) = weights {
        if w.len() != records.len() {
            return Err(LabError::Dimension(format!("{} weights for {} records", w.len(), records.len())));
        }
    }
    let evals: Result<Vec<_>> = exec.map(records, |r| eval_record(lc, r, with_grad)).into_iter().collect();
    reduce(lc.state.n_trainable(), evals?, weights)
}

/// KTO reference points `max(0, β·KL)` for the prompts of `records`: exact KL
/// for the table, a seeded Monte-Carlo estimate for the token model.
pub fn kto_reference_points(
    state: &AnchoredPair,
    contexts: &[PromptContext],
    records: &[PreferenceRecord],
    beta: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<HashMap<usize, f64>> {
    let mut out = HashMap::new();
    for rec in records {
        if out.contains_key(&rec.prompt_id) {
            continue;
        }
        let ctx = ctx_for(contexts, rec)?;
        let kl = match state.pair.mode() {
            PolicyMode::Tabular => exact_kl(&state.pair, ctx)?,
            PolicyMode::TinyLm => mc_kl(&state.pair, ctx, mc_samples, seed)?,
        };
        out.insert(rec.prompt_id, (beta * kl).max(0.0));
    }
    Ok(out)
}
