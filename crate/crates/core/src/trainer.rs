//! The training loop: fixed-order mini-batches, Adam over `[θ | W | b]`, and
//! full-dataset telemetry at a fixed cadence.

use std::collections::{BTreeSet, HashMap};

use crate::analysis::AnchorDiagnostics;
use crate::anchor::{AnchorHead, AnchoredPair};
use crate::checkpoint::{Checkpoint, SeedLineage, CHECKPOINT_VERSION};
use crate::config::{check_form, RunConfig};
use crate::data::{annotate, gen_world, DatasetManifest, World};
use crate::error::{LabError, Result};
use crate::grad::OptimizerState;
use crate::metrics::{self, MetricsRow};
use crate::objectives::{batch_loss, kto_reference_points, LossContext, Method, PreferenceRecord};
use crate::policy::{exact_kl, mc_kl, PolicyMode};

/// A world together with the records trained on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: World,
    pub manifest: DatasetManifest,
}

/// Build the world and dataset a config describes, or load the dataset file.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let manifest = match &cfg.dataset.path {
        Some(path) => DatasetManifest::read(path)?,
        None => {
            let world = gen_world(&cfg.world)?;
            let manifest = annotate(&world, &cfg.annotator, &cfg.dataset.construction())?;
            return finish_prepare(cfg, world, manifest);
        }
    };
    let world = gen_world(&manifest.provenance.world)?;
    finish_prepare(cfg, world, manifest)
}

fn finish_prepare(cfg: &RunConfig, world: World, manifest: DatasetManifest) -> Result<Prepared> {
    check_form(&cfg.objective, manifest.form())?;
    if manifest.records.is_empty() {
        return Err(LabError::Config("dataset has no records".into()));
    }
    for r in &manifest.records {
        let ctx = world.contexts.get(r.prompt_id).ok_or(LabError::UnknownPrompt(r.prompt_id))?;
        for y in r.winners.iter().chain(&r.losers) {
            if ctx.candidate_index(y).is_none() {
                return Err(LabError::UnregisteredCandidate(r.prompt_id));
            }
        }
    }
    Ok(Prepared { world, manifest })
}

/// Policy at the reference and a zero anchor head sized for the world.
pub fn initial_state(cfg: &RunConfig, world: &World) -> AnchoredPair {
    let head = AnchorHead::zeros(world.spec.hidden_dim, cfg.objective.method.normalizes_anchor());
    AnchoredPair::new(world.reference_pair(), head)
}

/// Outcome of a training run. `abort` holds the numerical failure, if any;
/// `state` is then the last parameters before the failing step.
#[derive(Debug)]
pub struct TrainRun {
    pub state: AnchoredPair,
    pub optimizer: OptimizerState,
    pub rows: Vec<MetricsRow>,
    pub steps: usize,
    pub abort: Option<LabError>,
}

pub fn total_steps(cfg: &RunConfig, n_records: usize) -> usize {
    let per_epoch = n_records.div_ceil(cfg.optimizer.batch_size);
    cfg.optimizer.max_steps.unwrap_or(cfg.optimizer.epochs * per_epoch)
}

/// Records of update `step`: consecutive slices of the dataset, wrapping each epoch.
pub fn batch_range(step: usize, batch_size: usize, n_records: usize) -> std::ops::Range<usize> {
    let per_epoch = n_records.div_ceil(batch_size);
    let start = (step % per_epoch) * batch_size;
    start..(start + batch_size).min(n_records)
}

fn kto_points(
    cfg: &RunConfig,
    state: &AnchoredPair,
    prep: &Prepared,
    records: &[PreferenceRecord],
) -> Result<Option<HashMap<usize, f64>>> {
    if cfg.objective.method != Method::Kto {
        return Ok(None);
    }
    let t = &cfg.telemetry;
    kto_reference_points(state, &prep.world.contexts, records, cfg.objective.beta, t.kl_samples, t.kl_seed).map(Some)
}

/// One metrics row over the full dataset.
pub fn telemetry(cfg: &RunConfig, state: &AnchoredPair, prep: &Prepared, step: usize) -> Result<MetricsRow> {
    let records = &prep.manifest.records;
    let contexts = &prep.world.contexts;
    let z0 = kto_points(cfg, state, prep, records)?;
    let lc = LossContext { spec: &cfg.objective, state, contexts, kto_z0: z0.as_ref() };
    let eval = batch_loss(&lc, records, None, true)?;
    let diag = AnchorDiagnostics::from_breakdown(&eval.records);

    let prompts: BTreeSet<usize> = records.iter().map(|r| r.prompt_id).collect();
    let mut kl = 0.0;
    for &p in &prompts {
        kl += match state.pair.mode() {
            PolicyMode::Tabular => exact_kl(&state.pair, &contexts[p])?,
            PolicyMode::TinyLm => mc_kl(&state.pair, &contexts[p], cfg.telemetry.kl_samples, cfg.telemetry.kl_seed)?,
        };
    }
    let kl_full = kl / prompts.len() as f64;

    let mut ratios = Vec::new();
    for r in records {
        let ctx = &contexts[r.prompt_id];
        for y in &r.winners {
            let lp = state.pair.policy.seq_logprob_f64(ctx, y)?;
            let lr = state.pair.reference().seq_logprob_f64(ctx, y)?;
            ratios.push(lp - lr);
        }
    }

    let term_mean = |f: fn(&crate::objectives::RecordBreakdown) -> Option<f64>| {
        let v: Vec<f64> = eval.records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };

    Ok(MetricsRow {
        step,
        loss: eval.loss,
        reward_w: diag.mean_winner,
        reward_l: diag.mean_loser,
        reward_anchor: diag.mean_anchor,
        margin: diag.margin,
        accuracy: diag.accuracy,
        sandwich: diag.sandwich,
        sandwich_strict: diag.sandwich_strict,
        kl_full,
        winner_logratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        grad_norm: eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        loss_winner_term: term_mean(|r| r.loss_w),
        loss_loser_term: term_mean(|r| r.loss_l),
    })
}

/// Train in memory. Configuration and shape errors are returned directly;
/// a numerical failure stops the loop and is reported in [`TrainRun::abort`].
pub fn train(cfg: &RunConfig, prep: &Prepared) -> Result<TrainRun> {
    cfg.validate()?;
    check_form(&cfg.objective, prep.manifest.form())?;
    let records = &prep.manifest.records;
    let n = records.len();
    let steps = total_steps(cfg, n);
    let cadence = cfg.telemetry.cadence;

    let mut state = initial_state(cfg, &prep.world);
    let mut optimizer = OptimizerState::new(state.n_trainable(), cfg.lr());
    let mut params = state.trainable();
    let mut rows = Vec::new();

    let numerical = |e: LabError, state: AnchoredPair, optimizer: OptimizerState, rows: Vec<MetricsRow>| match e {
        LabError::Numerical { .. } => {
            let steps = optimizer.step as usize;
            Ok(TrainRun { state, optimizer, rows, steps, abort: Some(e) })
        }
        e => Err(e),
    };

    match telemetry(cfg, &state, prep, 0) {
        Ok(row) => rows.push(row),
        Err(e) => return numerical(e, state, optimizer, rows),
    }
    for step in 0..steps {
        let batch = &records[batch_range(step, cfg.optimizer.batch_size, n)];
        let eval = kto_points(cfg, &state, prep, batch).and_then(|z0| {
            let lc = LossContext { spec: &cfg.objective, state: &state, contexts: &prep.world.contexts, kto_z0: z0.as_ref() };
            batch_loss(&lc, batch, None, true)
        });
        let eval = match eval {
            Ok(e) => e,
            Err(e) => return numerical(e, state, optimizer, rows),
        };
        let (last_params, last_opt) = (params.clone(), optimizer.clone());
        optimizer.step(&mut params, &eval.grad)?;
        state.set_trainable(&params)?;
        let done = step + 1;
        if done % cadence == 0 || done == steps {
            match telemetry(cfg, &state, prep, done) {
                Ok(row) => rows.push(row),
                Err(e) => {
                    state.set_trainable(&last_params)?;
                    return numerical(e, state, last_opt, rows);
                }
            }
        }
    }
    Ok(TrainRun { state, optimizer, rows, steps, abort: None })
}

pub fn checkpoint(cfg: &RunConfig, prep: &Prepared, run: &TrainRun) -> Checkpoint {
    let prov = &prep.manifest.provenance;
    Checkpoint {
        version: CHECKPOINT_VERSION,
        mode: run.state.pair.mode(),
        n_trainable: run.state.n_trainable(),
        hidden_dim: run.state.head.dim(),
        step: run.steps,
        objective: cfg.objective,
        world: prep.world.spec.clone(),
        annotator: prov.annotator.clone(),
        construction: prov.construction.clone(),
        lineage: SeedLineage {
            world: prep.world.spec.seed,
            annotator: prov.annotator.seed,
            construction: prov.construction.seed,
            kl: cfg.telemetry.kl_seed,
        },
        state: run.state.clone(),
        optimizer: run.optimizer.clone(),
    }
}

/// Train and write the metrics file and checkpoint under `cfg.output.dir`.
/// After a numerical abort the last good checkpoint is still written and the
/// abort is returned as the error.
pub fn train_to_disk(cfg: &RunConfig) -> Result<TrainRun> {
    let prep = prepare(cfg)?;
    let mut run = train(cfg, &prep)?;
    metrics::write_file(&cfg.output.metrics(), &run.rows)?;
    checkpoint(cfg, &prep, &run).write(&cfg.output.checkpoint())?;
    match run.abort.take() {
        Some(e) => Err(e),
        None => Ok(run),
    }
}
