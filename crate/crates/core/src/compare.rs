//! Side-by-side runs on a shared world, with clean-versus-noisy degradation.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::eval::evaluate;
use crate::par;
use crate::trainer::{checkpoint, prepare, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub method: String,
    pub flip_rate: f64,
    pub annotator_seed: u64,
    pub steps: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub margin: Option<f64>,
    pub kl_full: f64,
    pub heldout_accuracy: f64,
    pub exact_winrate: Option<f64>,
    /// `(noisy - clean) / clean` against the clean run with the same method and
    /// annotator seed; empty for clean runs or when no partner exists.
    pub degradation_heldout_accuracy: Option<f64>,
    pub degradation_exact_winrate: Option<f64>,
}

fn relative(noisy: f64, clean: f64) -> f64 {
    (noisy - clean) / clean
}

/// Train and evaluate every config. Configs must share a world seed.
pub fn compare(configs: &[(String, RunConfig)]) -> Result<Vec<CompareRow>> {
    let Some((_, first)) = configs.first() else {
        return Err(LabError::Config("compare needs at least one config".into()));
    };
    if let Some((label, _)) = configs.iter().find(|(_, c)| c.world.seed != first.world.seed) {
        return Err(LabError::Config(format!("config {label} uses a different world seed")));
    }
    let results: Vec<Result<CompareRow>> = par::map(configs, |(label, cfg)| {
        let prep = prepare(cfg)?;
        let mut run = train(cfg, &prep)?;
        if let Some(e) = run.abort.take() {
            return Err(e);
        }
        let ck = checkpoint(cfg, &prep, &run);
        let report = evaluate(&ck, &prep.world, &cfg.eval)?;
        let last = run.rows.last().expect("telemetry always logs step 0");
        let row = CompareRow {
            label: label.clone(),
            method: cfg.objective.method.to_string(),
            flip_rate: cfg.annotator.flip_rate,
            annotator_seed: cfg.annotator.seed,
            steps: run.steps,
            loss: last.loss,
            accuracy: last.accuracy,
            margin: last.margin,
            kl_full: last.kl_full,
            heldout_accuracy: report.heldout_accuracy,
            exact_winrate: report.exact_winrate,
            degradation_heldout_accuracy: None,
            degradation_exact_winrate: None,
        };
        Ok(row)
    });
    let mut rows: Vec<CompareRow> = results.into_iter().collect::<Result<_>>()?;

    let snapshot = rows.clone();
    for (row, (_, cfg)) in rows.iter_mut().zip(configs) {
        if row.flip_rate == 0.0 {
            continue;
        }
        let partner = snapshot.iter().zip(configs).find(|(r, (_, c))| {
            r.flip_rate == 0.0 && c.objective == cfg.objective && r.annotator_seed == row.annotator_seed
        });
        if let Some((clean, _)) = partner {
            row.degradation_heldout_accuracy = Some(relative(row.heldout_accuracy, clean.heldout_accuracy));
            row.degradation_exact_winrate = row.exact_winrate.zip(clean.exact_winrate).map(|(n, c)| relative(n, c));
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| LabError::parse("comparison", e))?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::parse("comparison", e))?;
    String::from_utf8(bytes).map_err(|e| LabError::parse("comparison", e))
}
