//! Post-training evaluation against the world's latent rewards.

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchoredPair, RewardSpec};
use crate::checkpoint::Checkpoint;
use crate::config::EvalConfig;
use crate::data::{annotate, exact_winrate, true_winrate, AnnotatorSpec, ConstructionSpec, DatasetForm, World};
use crate::error::{LabError, Result};
use crate::grad::Tape;
use crate::policy::{exact_kl, mc_kl, PolicyMode, PromptContext};

/// Draws per prompt for token-model KL.
pub const EVAL_KL_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub method: String,
    /// Sampled win rate against the reference (table only).
    pub true_winrate: Option<f64>,
    pub winrate_stderr: Option<f64>,
    pub exact_winrate: Option<f64>,
    /// Fraction of freshly labeled candidate pairs ranked correctly by the
    /// trained reward; ties count as errors.
    pub heldout_accuracy: f64,
    pub heldout_pairs: usize,
    pub kl_mean: f64,
    pub kl_max: f64,
}

/// Implicit reward of every candidate of `ctx`.
pub fn candidate_rewards(state: &AnchoredPair, spec: RewardSpec, ctx: &PromptContext) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let ys: Vec<_> = ctx.candidates.iter().collect();
    let scored = bound.score(&mut tape, spec, ctx, &ys)?;
    Ok(tape.values(&scored.rewards))
}

/// Pairwise accuracy of the trained reward on fresh rational labels over every
/// candidate pair of every prompt, `repeats` independent labelings.
pub fn heldout_accuracy(
    state: &AnchoredPair,
    spec: RewardSpec,
    world: &World,
    seed: u64,
    repeats: usize,
) -> Result<(f64, usize)> {
    let n = world.spec.n_candidates;
    let rewards: Vec<Vec<f64>> =
        world.contexts.iter().map(|c| candidate_rewards(state, spec, c)).collect::<Result<_>>()?;
    let (mut hits, mut total) = (0usize, 0usize);
    for r in 0..repeats {
        let construction = ConstructionSpec { form: DatasetForm::Pairwise, pairs_per_prompt: n * (n - 1) / 2, seed };
        let labels = annotate(world, &AnnotatorSpec::rational(seed.wrapping_add(r as u64)), &construction)?;
        for rec in &labels.records {
            let ctx = &world.contexts[rec.prompt_id];
            let w = ctx.candidate_index(&rec.winners[0]).ok_or(LabError::UnregisteredCandidate(rec.prompt_id))?;
            let l = ctx.candidate_index(&rec.losers[0]).ok_or(LabError::UnregisteredCandidate(rec.prompt_id))?;
            hits += (rewards[rec.prompt_id][w] > rewards[rec.prompt_id][l]) as usize;
            total += 1;
        }
    }
    Ok((hits as f64 / total as f64, total))
}

pub fn evaluate(ck: &Checkpoint, world: &World, cfg: &EvalConfig) -> Result<EvalReport> {
    ck.check_world(&world.spec)?;
    let state = &ck.state;
    let tabular = state.pair.mode() == PolicyMode::Tabular;
    let (true_wr, stderr, exact_wr) = if tabular {
        let wr = true_winrate(&state.pair, world, cfg.winrate_samples, cfg.winrate_seed)?;
        let n = (cfg.winrate_samples * world.contexts.len()) as f64;
        (Some(wr), Some((wr * (1.0 - wr) / n).sqrt()), Some(exact_winrate(&state.pair, world)?))
    } else {
        (None, None, None)
    };
    let (acc, pairs) = heldout_accuracy(state, ck.objective.reward_spec(), world, cfg.heldout_seed, cfg.heldout_repeats)?;
    let kls: Vec<f64> = world
        .contexts
        .iter()
        .map(|c| if tabular { exact_kl(&state.pair, c) } else { mc_kl(&state.pair, c, EVAL_KL_SAMPLES, ck.lineage.kl) })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        step: ck.step,
        method: ck.objective.method.to_string(),
        true_winrate: true_wr,
        winrate_stderr: stderr,
        exact_winrate: exact_wr,
        heldout_accuracy: acc,
        heldout_pairs: pairs,
        kl_mean: kls.iter().sum::<f64>() / kls.len() as f64,
        kl_max: kls.iter().copied().fold(0.0, f64::max),
    })
}
