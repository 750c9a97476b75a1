//! Numerical checks of the objective algebra and the anchor diagnostics.
//!
//! Every check draws random instances from seeded streams and reports the
//! number of violations together with the worst observed slack.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorHead, AnchoredPair};
use crate::data::{gen_world, WorldSpec};
use crate::error::{LabError, Result};
use crate::grad::{finite_diff, max_relative_error, Tape};
use crate::objectives::{
    eval_record, kto_reference_points, loss_pairwise, LossContext, Method, ObjectiveSpec, PreferenceRecord,
    RecordBreakdown,
};
use crate::policy::{PolicyMode, PromptContext, ReferencePair};
use crate::rng::{self, LabRng};
use crate::stable::log_sigmoid;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const BOUND_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const DECOMPOSITION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    /// Largest observed deviation: slack `lhs - rhs` for inequalities,
    /// error magnitude for identities.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl TheoryReport {
    fn new(check: impl Into<String>, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            instances: 0,
            violations: 0,
            worst: f64::NEG_INFINITY,
            tolerance,
            passed: true,
        }
    }

    /// Record one instance whose deviation must stay at or below the tolerance.
    fn observe(&mut self, deviation: f64) {
        self.instances += 1;
        // NaN counts as a violation
        if !(deviation <= self.tolerance) {
            self.violations += 1;
        }
        if deviation > self.worst || deviation.is_nan() {
            self.worst = deviation;
        }
        self.passed = self.violations == 0;
    }
}

/// `log σ(a-m) + log σ(m-b) <= log σ(a-b)` on triples uniform in `[-range, range]^3`.
pub fn check_sigmoid_bound(n_samples: usize, range: f64, seed: u64) -> TheoryReport {
    let mut report = TheoryReport::new("sigmoid-product bound", BOUND_TOL);
    let mut rng = rng::stream(seed, 0);
    if range <= 0.0 {
        report.observe(sigmoid_bound_slack(0.0, 0.0, 0.0));
        return report;
    }
    for _ in 0..n_samples {
        let mut draw = || rng.random_range(-range..=range);
        let (a, m, b) = (draw(), draw(), draw());
        report.observe(sigmoid_bound_slack(a, m, b));
    }
    report
}

/// `log σ(a-m) + log σ(m-b) - log σ(a-b)`; never positive.
pub fn sigmoid_bound_slack(a: f64, m: f64, b: f64) -> f64 {
    log_sigmoid(a - m) + log_sigmoid(m - b) - log_sigmoid(a - b)
}

/// A random evaluation problem: a perturbed policy, a random head and snapshot,
/// a small world and one record.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ObjectiveSpec,
    pub state: AnchoredPair,
    pub contexts: Vec<PromptContext>,
    pub record: PreferenceRecord,
    pub kto_z0: HashMap<usize, f64>,
}

fn normal(rng: &mut LabRng, scale: f64) -> f64 {
    scale * rng.sample::<f64, _>(StandardNormal)
}

/// Hyperparameters drawn from ranges where every loss is well conditioned.
pub fn random_spec(method: Method, rng: &mut LabRng) -> ObjectiveSpec {
    let beta = match method.family() {
        crate::anchor::RewardFamily::SimPo => rng.random_range(0.5..3.0),
        crate::anchor::RewardFamily::Dpo => rng.random_range(0.05..2.0),
    };
    ObjectiveSpec {
        method,
        beta,
        gamma: rng.random_range(-1.0..1.0),
        tau: rng.random_range(0.1..1.0),
        lambda: rng.random_range(0.0..1.0),
        alpha: rng.random_range(0.0..0.5),
        lambda_w: rng.random_range(0.5..1.5),
        lambda_l: rng.random_range(0.5..1.5),
    }
}

fn instance_world(mode: PolicyMode, seed: u64) -> WorldSpec {
    WorldSpec {
        mode,
        n_prompts: 2,
        n_candidates: 5,
        vocab: 6,
        hidden_dim: 4,
        separation: 1.0,
        init_scale: 0.5,
        prompt_len: [1, 4],
        response_len: [1, 4],
        seed,
        ..WorldSpec::default()
    }
}

/// Random instance for `spec` in `mode`. Multi methods get records with random
/// winner and loser counts (possibly one side empty); pairwise methods get one
/// winner and one loser.
pub fn random_instance(spec: ObjectiveSpec, mode: PolicyMode, seed: u64) -> Result<Instance> {
    let mut rng = rng::stream(seed, 1);
    let world = gen_world(&instance_world(mode, seed))?;
    let reference = world.reference.clone();
    let mut policy = reference.clone();
    policy.params.iter_mut().for_each(|p| *p += normal(&mut rng, 0.5));
    let pair = ReferencePair::from_parts(policy, reference)?;
    let d = world.spec.hidden_dim;
    let norm = spec.method.normalizes_anchor();
    let random_head = |rng: &mut LabRng| AnchorHead {
        weights: (0..d).map(|_| normal(rng, 0.7)).collect(),
        bias: normal(rng, 0.7),
        normalize_by_length: norm,
    };
    let head = random_head(&mut rng);
    let snapshot = random_head(&mut rng);
    let state = AnchoredPair::from_parts(pair, head, snapshot)?;

    let prompt_id = rng.random_range(0..world.contexts.len());
    let ctx = &world.contexts[prompt_id];
    let mut idx: Vec<usize> = (0..ctx.candidates.len()).collect();
    idx.shuffle(&mut rng);
    let (n_w, n_l) = if spec.method.is_multi() {
        loop {
            let w = rng.random_range(0..=2usize);
            let l = rng.random_range(0..=3usize);
            if w + l > 0 {
                break (w, l);
            }
        }
    } else {
        (1, 1)
    };
    let pick = |r: &[usize]| r.iter().map(|&i| ctx.candidates[i].clone()).collect::<Vec<_>>();
    let record = PreferenceRecord {
        id: 0,
        prompt_id,
        prompt: ctx.tokens.clone(),
        winners: pick(&idx[..n_w]),
        losers: pick(&idx[n_w..n_w + n_l]),
    };
    let kto_z0 = kto_reference_points(&state, &world.contexts, std::slice::from_ref(&record), spec.beta, 256, seed)?;
    Ok(Instance { spec, state, contexts: world.contexts, record, kto_z0 })
}

impl Instance {
    fn context(&self) -> LossContext<'_> {
        LossContext { spec: &self.spec, state: &self.state, contexts: &self.contexts, kto_z0: Some(&self.kto_z0) }
    }

    pub fn eval(&self, with_grad: bool) -> Result<RecordBreakdown> {
        eval_record(&self.context(), &self.record, with_grad)
    }

    /// Loss at the trainable parameters `params`, holding the KTO reference point fixed.
    pub fn loss_at(&self, params: &[f64]) -> Result<f64> {
        let state = self.state.with_trainable(params)?;
        let lc = LossContext { state: &state, ..self.context() };
        Ok(eval_record(&lc, &self.record, false)?.loss)
    }

    /// Relative error between the tape gradient and central differences.
    pub fn gradient_error(&self) -> Result<f64> {
        let n = self.state.n_trainable();
        let mut tape_grad = vec![0.0; n];
        for (i, g) in self.eval(true)?.grad {
            tape_grad[i] += g;
        }
        let theta = self.state.trainable();
        let mut failure = None;
        let fd = finite_diff(
            |p| match self.loss_at(p) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            &theta,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(max_relative_error(&tape_grad, &fd, 1e-8))
    }
}

/// Tape gradients of `method` against central differences on random instances.
pub fn check_gradients(method: Method, mode: PolicyMode, instances: usize, seed: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport::new(format!("gradient oracle {method}/{}", mode_name(mode)), GRADCHECK_TOL);
    let mut rng = rng::stream(seed, 2);
    for k in 0..instances {
        let spec = random_spec(method, &mut rng);
        let inst = random_instance(spec, mode, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
        report.observe(inst.gradient_error()?);
    }
    Ok(report)
}

pub fn mode_name(mode: PolicyMode) -> &'static str {
    match mode {
        PolicyMode::Tabular => "tabular",
        PolicyMode::TinyLm => "tinylm",
    }
}

fn anchored_dpo_family(rng: &mut LabRng, method: Method) -> ObjectiveSpec {
    ObjectiveSpec { gamma: 0.0, ..random_spec(method, rng) }
}

/// Multi-response loss with singleton sets equals the pairwise anchored loss.
pub fn check_multi_identity(instances: usize, mode: PolicyMode, seed: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport::new("multi-to-pairwise reduction", IDENTITY_TOL);
    let mut rng = rng::stream(seed, 3);
    for k in 0..instances {
        let (pair_m, multi_m) = if rng.random::<bool>() {
            (Method::Uapo, Method::UapoMulti)
        } else {
            (Method::SimUapo, Method::SimUapoMulti)
        };
        let mut spec = random_spec(pair_m, &mut rng);
        let inst = random_instance(spec, mode, seed.wrapping_add(k as u64))?;
        let pairwise = inst.eval(false)?.loss;
        spec.method = multi_m;
        let multi = Instance { spec, ..inst }.eval(false)?.loss;
        report.observe((pairwise - multi).abs());
    }
    Ok(report)
}

/// The anchored objective never exceeds the plain pairwise likelihood:
/// `-loss_UAPO <= -loss_DPO` at `γ = 0` on shared records.
pub fn check_lower_bound(instances: usize, mode: PolicyMode, seed: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport::new("anchored lower bound", BOUND_TOL);
    let mut rng = rng::stream(seed, 4);
    for k in 0..instances {
        let mut spec = anchored_dpo_family(&mut rng, Method::Uapo);
        let inst = random_instance(spec, mode, seed.wrapping_add(k as u64))?;
        let uapo = inst.eval(false)?.loss;
        spec.method = Method::Dpo;
        let dpo = Instance { spec, ..inst }.eval(false)?.loss;
        report.observe((-uapo) - (-dpo));
    }
    Ok(report)
}

/// Winner-term gradient against its closed form
/// `-β σ(-(r̂_w - û)) (∇log π_w - ∇(û/β))`, componentwise.
pub fn check_gradient_decomposition(instances: usize, mode: PolicyMode, seed: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport::new("winner-term gradient decomposition", DECOMPOSITION_TOL);
    let mut rng = rng::stream(seed, 5);
    for k in 0..instances {
        let spec = anchored_dpo_family(&mut rng, Method::Uapo);
        let inst = random_instance(spec, mode, seed.wrapping_add(k as u64))?;
        report.observe(decomposition_error(&inst)?);
    }
    Ok(report)
}

/// Largest componentwise gap between the tape gradient of the winner term and
/// its closed form, for a UAPO instance with `γ = 0`.
pub fn decomposition_error(inst: &Instance) -> Result<f64> {
    let (closed, tape_grad) = decomposition_parts(inst)?;
    Ok(closed.iter().zip(&tape_grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `(closed form, tape gradient)` of the winner term, dense over the trainable parameters.
pub fn decomposition_parts(inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = &inst.spec;
    if spec.method != Method::Uapo || spec.gamma != 0.0 {
        return Err(LabError::Invalid("gradient decomposition needs UAPO with gamma = 0".into()));
    }
    let rec = &inst.record;
    let ctx = &inst.contexts[rec.prompt_id];
    let n = inst.state.n_trainable();
    let mut tape = Tape::new();
    let bound = inst.state.bind(&mut tape);
    let ev = loss_pairwise(&mut tape, &bound, spec, ctx, rec, None)?;
    let lw = ev.loss_w.expect("anchored loss exposes its winner term");
    let r_w = tape.value(ev.winner_rewards[0]);
    let u = tape.value(ev.anchor.expect("anchored loss exposes its anchor"));
    let lp_w = bound.policy.seq_logprob(&mut tape, ctx, &rec.winners[0])?;
    let drift = bound.anchor_drift(&mut tape, ctx)?;
    let grad = |root| {
        tape.backward(root)
            .map(|g| g.dense(n))
            .map_err(|e| LabError::numerical("gradient decomposition", e))
    };
    let (g_lw, g_lp, g_drift) = (grad(lw)?, grad(lp_w)?, grad(drift)?);
    let factor = -spec.beta * crate::stable::sigmoid(-(r_w - u));
    let closed = g_lp.iter().zip(&g_drift).map(|(p, a)| factor * (p - a)).collect();
    Ok((closed, g_lw))
}

/// Rewards of one record as used by the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTriple {
    pub winners: Vec<f64>,
    pub anchor: Option<f64>,
    pub losers: Vec<f64>,
}

impl RewardTriple {
    pub fn pairwise(w: f64, anchor: f64, l: f64) -> Self {
        Self { winners: vec![w], anchor: Some(anchor), losers: vec![l] }
    }

    fn min_winner(&self) -> Option<f64> {
        self.winners.iter().copied().reduce(f64::min)
    }

    fn max_loser(&self) -> Option<f64> {
        self.losers.iter().copied().reduce(f64::max)
    }

    /// `r_w >= r_⊥ >= r_l` for every winner and loser; an empty side holds vacuously.
    pub fn sandwiched(&self, strict: bool) -> Option<bool> {
        let a = self.anchor?;
        let above = |x: f64, y: f64| if strict { x > y } else { x >= y };
        Some(self.min_winner().is_none_or(|w| above(w, a)) && self.max_loser().is_none_or(|l| above(a, l)))
    }

    /// Every winner strictly above every loser; `None` for unpaired records.
    pub fn correct(&self) -> Option<bool> {
        Some(self.min_winner()? > self.max_loser()?)
    }

    pub fn margin(&self) -> Option<f64> {
        if self.winners.is_empty() || self.losers.is_empty() {
            return None;
        }
        Some(mean(&self.winners)? - mean(&self.losers)?)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn fraction(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags.flatten() {
        n += 1;
        hit += f as usize;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Aggregates over a set of reward triples. Fields are `None` when no record
/// supports them (no anchor, or no record with both sides).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDiagnostics {
    pub records: Vec<RewardTriple>,
    pub mean_winner: Option<f64>,
    pub mean_loser: Option<f64>,
    pub mean_anchor: Option<f64>,
    pub margin: Option<f64>,
    /// Ties count as failures.
    pub accuracy: Option<f64>,
    pub sandwich: Option<f64>,
    pub sandwich_strict: Option<f64>,
}

impl AnchorDiagnostics {
    pub fn from_triples(records: Vec<RewardTriple>) -> Self {
        let all_w: Vec<f64> = records.iter().flat_map(|r| r.winners.iter().copied()).collect();
        let all_l: Vec<f64> = records.iter().flat_map(|r| r.losers.iter().copied()).collect();
        let anchors: Vec<f64> = records.iter().filter_map(|r| r.anchor).collect();
        let margins: Vec<f64> = records.iter().filter_map(RewardTriple::margin).collect();
        Self {
            mean_winner: mean(&all_w),
            mean_loser: mean(&all_l),
            mean_anchor: mean(&anchors),
            margin: mean(&margins),
            accuracy: fraction(records.iter().map(RewardTriple::correct)),
            sandwich: fraction(records.iter().map(|r| r.sandwiched(false))),
            sandwich_strict: fraction(records.iter().map(|r| r.sandwiched(true))),
            records,
        }
    }

    pub fn from_breakdown(records: &[RecordBreakdown]) -> Self {
        Self::from_triples(
            records
                .iter()
                .map(|r| RewardTriple {
                    winners: r.winner_rewards.clone(),
                    anchor: r.anchor,
                    losers: r.loser_rewards.clone(),
                })
                .collect(),
        )
    }
}

/// Diagnostics of `records` under the current parameters.
pub fn anchor_diagnostics(lc: &LossContext<'_>, records: &[PreferenceRecord]) -> Result<AnchorDiagnostics> {
    let eval = crate::objectives::batch_loss(lc, records, None, false)?;
    Ok(AnchorDiagnostics::from_breakdown(&eval.records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn sigmoid_bound_at_origin() {
        assert!((log_sigmoid(0.0) * 2.0 + 2.0 * LN_2).abs() < 1e-15);
        assert!(sigmoid_bound_slack(0.0, 0.0, 0.0) < 0.0);
        let r = check_sigmoid_bound(10, 0.0, 0);
        assert_eq!((r.instances, r.violations), (1, 0));
        let r = check_sigmoid_bound(10_000, 50.0, 1);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn equal_rewards_sandwich_but_do_not_score() {
        let d = AnchorDiagnostics::from_triples(vec![RewardTriple::pairwise(1.0, 1.0, 1.0); 3]);
        assert_eq!(d.sandwich, Some(1.0));
        assert_eq!(d.sandwich_strict, Some(0.0));
        assert_eq!(d.accuracy, Some(0.0));
        assert_eq!(d.margin, Some(0.0));
    }

    #[test]
    fn reported_reward_triples_are_sandwiched() {
        for (w, a, l) in [(-9.875, -10.764, -11.587), (-11.346, -19.879, -21.724)] {
            let t = RewardTriple::pairwise(w, a, l);
            assert_eq!(t.sandwiched(true), Some(true));
            assert_eq!(t.correct(), Some(true));
        }
    }

    #[test]
    fn unpaired_triples() {
        let t = RewardTriple { winners: vec![], anchor: Some(0.0), losers: vec![-1.0, -2.0] };
        assert_eq!(t.sandwiched(false), Some(true));
        assert_eq!(t.correct(), None);
        assert_eq!(t.margin(), None);
        let d = AnchorDiagnostics::from_triples(vec![t]);
        assert_eq!(d.accuracy, None);
        assert_eq!(d.mean_loser, Some(-1.5));
    }

    #[test]
    fn lower_bound_at_reference() {
        let spec = ObjectiveSpec::new(Method::Uapo).with_gamma(0.0);
        let mut inst = random_instance(spec, PolicyMode::Tabular, 3).unwrap();
        let reference = inst.state.pair.reference().clone();
        let head = AnchorHead::zeros(inst.state.head.dim(), false);
        inst.state = AnchoredPair::new(ReferencePair::new(reference), head);
        let uapo = inst.eval(false).unwrap().loss;
        assert!((uapo - 2.0 * LN_2).abs() < 1e-12);
        inst.spec.method = Method::Dpo;
        assert!((inst.eval(false).unwrap().loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn theory_checks_pass_on_small_runs() {
        for mode in [PolicyMode::Tabular, PolicyMode::TinyLm] {
            for r in [
                check_multi_identity(20, mode, 11).unwrap(),
                check_lower_bound(20, mode, 12).unwrap(),
                check_gradient_decomposition(10, mode, 13).unwrap(),
            ] {
                assert!(r.passed, "{r:?}");
                assert_eq!(r.instances, if r.check.contains("decomposition") { 10 } else { 20 });
            }
        }
    }

    #[test]
    fn decomposition_at_balanced_point_uses_half() {
        // policy = reference and head = snapshot: r̂_w = û = 0
        let spec = ObjectiveSpec::new(Method::Uapo).with_beta(0.7);
        let mut inst = random_instance(spec, PolicyMode::Tabular, 5).unwrap();
        inst.state = AnchoredPair::new(ReferencePair::new(inst.state.pair.reference().clone()), inst.state.head.clone());
        let (closed, tape_grad) = decomposition_parts(&inst).unwrap();
        assert!(closed.iter().zip(&tape_grad).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(closed.iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn saturated_winner_term_has_vanishing_gradient() {
        let spec = ObjectiveSpec::new(Method::Uapo).with_beta(1.0);
        let mut inst = random_instance(spec, PolicyMode::Tabular, 6).unwrap();
        let rec = inst.record.clone();
        let ctx = &inst.contexts[rec.prompt_id];
        let w = ctx.candidate_index(&rec.winners[0]).unwrap();
        let mut reference = inst.state.pair.reference().clone();
        let mut policy = reference.clone();
        let off = 5 * rec.prompt_id;
        reference.params[off + w] = -60.0;
        policy.params[off + w] = 10.0;
        let head = inst.state.head.clone();
        inst.state = AnchoredPair::new(ReferencePair::from_parts(policy, reference).unwrap(), head);
        let ev = inst.eval(false).unwrap();
        assert!(ev.winner_rewards[0] - ev.anchor.unwrap() > 50.0);
        let (closed, tape_grad) = decomposition_parts(&inst).unwrap();
        assert!(tape_grad.iter().all(|g| g.abs() < 1e-10));
        assert!(closed.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn gradients_match_for_every_method() {
        for m in Method::ALL {
            for mode in [PolicyMode::Tabular, PolicyMode::TinyLm] {
                let r = check_gradients(m, mode, 3, 21).unwrap();
                assert!(r.passed, "{r:?}");
            }
        }
    }
}
