//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use anchorpo_core::analysis::{
    check_gradient_decomposition, check_gradients, check_lower_bound, check_multi_identity, check_sigmoid_bound,
    TheoryReport,
};
use anchorpo_core::config::RunConfig;
use anchorpo_core::data::{AnnotatorKind, DatasetForm};
use anchorpo_core::metrics::{self, MetricsRow, COLUMNS};
use anchorpo_core::objectives::{Method, ObjectiveSpec};
use anchorpo_core::policy::PolicyMode;
use anchorpo_core::trainer::{initial_state, prepare, telemetry};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const BOUND_SAMPLES: usize = 100_000;
const BOUND_RANGE: f64 = 50.0;
const BOUND_TOL: f64 = 1e-12;
const IDENTITY_RECORDS: usize = 1_000;
const IDENTITY_TOL: f64 = 1e-10;
const LOWER_BOUND_DRAWS: usize = 10_000;
const DECOMP_INSTANCES: usize = 100;
const DECOMP_TOL: f64 = 1e-8;
const RECOVERY_ACCURACY: f64 = 0.95;
const RECOVERY_STEPS: usize = 2000;
const RECOVERY_BUDGET: Duration = Duration::from_secs(60);
const SANDWICH_MIN: f64 = 0.90;
const TERM_REDUCTION: f64 = 0.5;
const NOISY_HELDOUT_MIN: f64 = 0.70;
const NOISE_FLIP: f64 = 0.4;
const SEED: u64 = 0;

const RECOVERY: [&str; 4] = ["dpo", "simpo", "uapo", "simuapo"];

struct Lab {
    configs: PathBuf,
    work: tempfile::TempDir,
}

impl Lab {
    fn config(&self, name: &str) -> PathBuf {
        self.configs.join(format!("{name}.toml"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.work.path().join(name)
    }

    fn run(&self, args: &[&str]) -> (Output, Duration) {
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_anchorpo"))
            .args(args)
            .current_dir(self.work.path())
            .output()
            .expect("spawn anchorpo");
        (out, start.elapsed())
    }

    /// Train `configs/<name>.toml` into `<work>/<dir>`.
    fn train(&self, name: &str, dir: &str) -> (Output, Duration) {
        let cfg = self.config(name);
        let out = self.out(dir);
        self.run(&["train", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()])
    }

    fn metrics(&self, dir: &str) -> Result<Vec<MetricsRow>, String> {
        metrics::read_file(&self.out(dir).join("metrics.csv")).map_err(|e| e.to_string())
    }
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Verdict {
    verdict(false, detail)
}

fn reports_pass(reports: &[TheoryReport], tol: f64) -> bool {
    reports.iter().all(|r| r.passed && r.violations == 0 && r.worst <= tol)
}

fn worst(reports: &[TheoryReport]) -> f64 {
    reports.iter().map(|r| r.worst).fold(f64::NEG_INFINITY, f64::max)
}

fn modes() -> [PolicyMode; 2] {
    [PolicyMode::Tabular, PolicyMode::TinyLm]
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut reports = Vec::new();
    for m in Method::ALL {
        for mode in modes() {
            match check_gradients(m, mode, GRAD_INSTANCES, SEED) {
                Ok(r) => reports.push(r),
                Err(e) => return fail(format!("{m}: {e}")),
            }
        }
    }
    let elapsed = start.elapsed();
    let bad: Vec<_> = reports.iter().filter(|r| !(r.worst < GRAD_REL_TOL)).map(|r| r.check.clone()).collect();
    verdict(
        bad.is_empty() && reports.len() == 22 && elapsed < GRAD_BUDGET,
        format!(
            "{} method/mode pairs x {GRAD_INSTANCES}, worst rel err {:.2e} < {GRAD_REL_TOL:.0e}, {:.1}s{}",
            reports.len(),
            worst(&reports),
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!(", failing: {bad:?}") }
        ),
    )
}

fn sigmoid_bound() -> Verdict {
    let r = check_sigmoid_bound(BOUND_SAMPLES, BOUND_RANGE, SEED);
    verdict(
        r.instances == BOUND_SAMPLES && reports_pass(&[r.clone()], BOUND_TOL),
        format!("{} triples, {} violations, worst slack {:.2e}", r.instances, r.violations, r.worst),
    )
}

fn theory(
    check: fn(usize, PolicyMode, u64) -> anchorpo_core::Result<TheoryReport>,
    n: usize,
    tol: f64,
    what: &str,
) -> Verdict {
    let mut reports = Vec::new();
    for mode in modes() {
        match check(n, mode, SEED) {
            Ok(r) => reports.push(r),
            Err(e) => return fail(e.to_string()),
        }
    }
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    verdict(
        reports_pass(&reports, tol) && reports.iter().all(|r| r.instances == n),
        format!("{n} {what} per mode, {violations} violations, worst {:.2e} (tol {tol:.0e})", worst(&reports)),
    )
}

fn recovery_world_ok(cfg: &RunConfig) -> bool {
    let w = &cfg.world;
    w.n_prompts == 200
        && w.n_candidates == 5
        && w.separation == 3.0
        && cfg.annotator.kind == AnnotatorKind::RationalBt
        && cfg.dataset.form == DatasetForm::Pairwise
}

fn synthetic_recovery(lab: &Lab, runs: &BTreeMap<&str, (Output, Duration)>) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in RECOVERY {
        let (out, took) = &runs[m];
        let cfg = RunConfig::load(&lab.config(&format!("recovery-{m}"))).unwrap();
        let rows = match lab.metrics(m) {
            Ok(r) if out.status.success() => r,
            _ => return fail(format!("{m}: {}", String::from_utf8_lossy(&out.stderr).trim())),
        };
        let last = rows.last().unwrap();
        let acc = last.accuracy.unwrap_or(0.0);
        ok &= recovery_world_ok(&cfg)
            && last.step <= RECOVERY_STEPS
            && acc >= RECOVERY_ACCURACY
            && *took < RECOVERY_BUDGET;
        parts.push(format!("{m} acc {acc:.3} @{} in {:.1}s", last.step, took.as_secs_f64()));
    }
    verdict(ok, parts.join(", "))
}

fn anchor_sandwich(lab: &Lab) -> Verdict {
    let Ok(rows) = lab.metrics("uapo") else { return fail("no uapo metrics") };
    let (first, last) = (rows[0].sandwich, rows.last().unwrap().sandwich);
    match (first, last) {
        (Some(a), Some(b)) => verdict(b >= SANDWICH_MIN && b > a, format!("uapo sandwich {a:.3} -> {b:.3}")),
        _ => fail("sandwich not reported"),
    }
}

fn margin_growth(lab: &Lab) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in ["uapo", "simuapo"] {
        let Ok(rows) = lab.metrics(m) else { return fail(format!("no {m} metrics")) };
        let (a, b) = (rows[0].margin.unwrap_or(f64::NAN), rows.last().unwrap().margin.unwrap_or(f64::NAN));
        ok &= b > a;
        parts.push(format!("{m} margin {a:.3} -> {b:.3}"));
    }
    verdict(ok, parts.join(", "))
}

fn write_config(path: &Path, method: &str, body: &str) {
    fs::write(path, format!("[objective]\nmethod = \"{method}\"\n{body}")).unwrap();
}

fn unpaired(lab: &Lab, runs: &BTreeMap<&str, (Output, Duration)>) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (form, term) in [("winners-only", "winner"), ("losers-only", "loser")] {
        let (out, _) = &runs[form];
        let rows = match lab.metrics(form) {
            Ok(r) if out.status.success() => r,
            _ => return fail(format!("{form}: {}", String::from_utf8_lossy(&out.stderr).trim())),
        };
        let pick = |r: &MetricsRow| if term == "winner" { r.loss_winner_term } else { r.loss_loser_term };
        let (a, b) = (pick(&rows[0]).unwrap_or(f64::NAN), pick(rows.last().unwrap()).unwrap_or(f64::NAN));
        let cfg = RunConfig::load(&lab.config(&format!("unpaired-{form}"))).unwrap();
        ok &= cfg.objective.method == Method::SimUapoMulti && a > 0.0 && b <= (1.0 - TERM_REDUCTION) * a;
        parts.push(format!("{form} {term} term {a:.4} -> {b:.4}"));

        let data = lab.out(&format!("{form}.jsonl"));
        let cfg_path = lab.config(&format!("unpaired-{form}"));
        let (g, _) = lab.run(&["gen-data", "-c", cfg_path.to_str().unwrap(), "-o", data.to_str().unwrap()]);
        ok &= g.status.success();
        for method in ["dpo", "simpo"] {
            let by_file = lab.out(&format!("{method}-{form}-file.toml"));
            write_config(&by_file, method, &format!("[dataset]\npath = {:?}\n", data.to_str().unwrap()));
            let by_form = lab.out(&format!("{method}-{form}-form.toml"));
            write_config(&by_form, method, &format!("[dataset]\nform = \"{form}\"\n"));
            for cfg in [by_file, by_form] {
                let (o, _) = lab.run(&["train", "-c", cfg.to_str().unwrap()]);
                ok &= o.status.code() == Some(2);
            }
        }
    }
    parts.push("dpo/simpo exit 2 on unpaired data".into());
    verdict(ok, parts.join(", "))
}

fn parse_csv(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    lines.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn noise_configs(lab: &Lab) -> Vec<String> {
    let mut v = Vec::new();
    for m in ["simpo", "simuapo"] {
        for s in 1..=3 {
            for tag in ["clean", "noisy"] {
                v.push(lab.config(&format!("noise-{m}-{tag}-s{s}")).to_string_lossy().into_owned());
            }
        }
    }
    v
}

fn noise_robustness(lab: &Lab) -> Verdict {
    let files = noise_configs(lab);
    let recovery = RunConfig::load(&lab.config("recovery-simuapo")).unwrap();
    for f in &files {
        let c = RunConfig::load(Path::new(f)).unwrap();
        if c.world != recovery.world {
            return fail(format!("{f} does not use the recovery world"));
        }
    }
    let out = lab.out("compare.csv");
    let mut args = vec!["compare", "-o", out.to_str().unwrap()];
    args.extend(files.iter().map(String::as_str));
    let (o, _) = lab.run(&args);
    if !o.status.success() {
        return fail(String::from_utf8_lossy(&o.stderr).trim().to_string());
    }
    let rows = parse_csv(&fs::read_to_string(&out).unwrap());
    let num = |r: &BTreeMap<String, String>, k: &str| r.get(k).and_then(|v| v.parse::<f64>().ok());
    let mut ok = rows.len() == 12;
    let mut worst_noisy = f64::INFINITY;
    let mut degradation: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if num(r, "flip_rate") != Some(NOISE_FLIP) {
            continue;
        }
        let d = num(r, "degradation_heldout_accuracy");
        ok &= d.is_some() && num(r, "degradation_exact_winrate").is_some();
        degradation.entry(r["method"].clone()).or_default().extend(d);
        if r["method"] == "simuapo" {
            let acc = num(r, "heldout_accuracy").unwrap_or(0.0);
            worst_noisy = worst_noisy.min(acc);
        }
    }
    ok &= worst_noisy >= NOISY_HELDOUT_MIN && degradation.values().all(|v| v.len() == 3);
    let mean = |m: &str| degradation.get(m).map_or(f64::NAN, |v| v.iter().sum::<f64>() / v.len() as f64);
    let (simpo, simuapo) = (mean("simpo"), mean("simuapo"));
    verdict(
        ok,
        format!(
            "simuapo noisy held-out acc min {worst_noisy:.3} >= {NOISY_HELDOUT_MIN}; mean held-out degradation simpo {simpo:+.3}, simuapo {simuapo:+.3} ({})",
            if simuapo > simpo { "simuapo degrades less" } else { "simuapo does not degrade less" }
        ),
    )
}

fn kl_control(lab: &Lab) -> Verdict {
    let schema = COLUMNS.contains(&"kl_full") && COLUMNS.contains(&"winner_logratio");
    let mut ok = schema;
    let mut max_kl: f64 = 0.0;
    for m in RECOVERY {
        let Ok(rows) = lab.metrics(m) else { return fail(format!("no {m} metrics")) };
        ok &= rows[0].kl_full == 0.0 && rows.iter().all(|r| r.kl_full.is_finite());
        max_kl = rows.iter().map(|r| r.kl_full).fold(max_kl, f64::max);
    }
    let base = RunConfig::load(&lab.config("recovery-uapo")).unwrap();
    for method in Method::ALL {
        let mut cfg = base.clone();
        cfg.objective = ObjectiveSpec::new(method);
        if method.is_multi() {
            cfg.dataset.form = DatasetForm::Multi;
        }
        let row = prepare(&cfg).and_then(|p| telemetry(&cfg, &initial_state(&cfg, &p.world), &p, 0));
        ok &= matches!(row, Ok(r) if r.kl_full == 0.0);
    }
    verdict(ok, format!("step-0 KL exactly 0 for all 11 methods, max logged KL {max_kl:.3}, schema has kl_full and winner_logratio"))
}

fn determinism(lab: &Lab) -> Verdict {
    let mut same = 0;
    let mut total = 0;
    for name in RECOVERY.iter().map(|m| format!("recovery-{m}")).chain(["unpaired-winners-only".into(), "unpaired-losers-only".into()]) {
        let first = lab.out(&name.replace("recovery-", "").replace("unpaired-", "")).join("metrics.csv");
        let again = format!("{name}-again");
        let (o, _) = lab.train(&name, &again);
        total += 1;
        let a = fs::read(&first).ok();
        let b = fs::read(lab.out(&again).join("metrics.csv")).ok();
        same += (o.status.success() && a.is_some() && a == b) as usize;
    }
    let out = lab.out("compare-again.csv");
    let mut args = vec!["compare", "-o", out.to_str().unwrap()];
    let files = noise_configs(lab);
    args.extend(files.iter().map(String::as_str));
    lab.run(&args);
    total += 1;
    let a = fs::read(lab.out("compare.csv")).ok();
    same += (a.is_some() && a == fs::read(&out).ok()) as usize;
    verdict(same == total, format!("{same}/{total} reruns byte-identical"))
}

fn main() {
    let lab = Lab {
        configs: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs"),
        work: tempfile::tempdir().expect("tempdir"),
    };
    let mut runs = BTreeMap::new();
    for m in RECOVERY {
        runs.insert(m, lab.train(&format!("recovery-{m}"), m));
    }
    for form in ["winners-only", "losers-only"] {
        runs.insert(form, lab.train(&format!("unpaired-{form}"), form));
    }

    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("sigmoid-product bound", Box::new(sigmoid_bound)),
        ("multi-to-pairwise identity", Box::new(|| theory(check_multi_identity, IDENTITY_RECORDS, IDENTITY_TOL, "records"))),
        ("anchored lower bound", Box::new(|| theory(check_lower_bound, LOWER_BOUND_DRAWS, BOUND_TOL, "draws"))),
        ("gradient decomposition", Box::new(|| theory(check_gradient_decomposition, DECOMP_INSTANCES, DECOMP_TOL, "instances"))),
        ("synthetic recovery", Box::new(|| synthetic_recovery(&lab, &runs))),
        ("anchor sandwich", Box::new(|| anchor_sandwich(&lab))),
        ("margin growth", Box::new(|| margin_growth(&lab))),
        ("unpaired learning", Box::new(|| unpaired(&lab, &runs))),
        ("noise robustness", Box::new(|| noise_robustness(&lab))),
        ("KL control", Box::new(|| kl_control(&lab))),
        ("determinism", Box::new(|| determinism(&lab))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failed += !v.passed as usize;
        println!("{} [{:>2}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
