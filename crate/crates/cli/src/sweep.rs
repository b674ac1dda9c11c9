use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use clap::Args;
use serde::Serialize;

use fbzero::evaluation::{EvalRow, MeanStd};
use fbzero::FbError;

use crate::{commented, parse_seeds, write};

const AXES: [&str; 5] = ["d", "blocks", "variant", "tau_mix", "beta"];

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// One of d, blocks, variant, tau_mix, beta.
    #[arg(long)]
    axis: String,
    /// Comma-separated values of the axis.
    #[arg(long)]
    values: String,
    #[arg(long)]
    suite: PathBuf,
    /// Training and rollout seeds, comma-separated.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Concurrent child processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Extra config settings for every run, as `key=value`.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory for checkpoints, logs and the comparison table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
struct RunOutcome {
    value: String,
    seed: u64,
    /// Exit code of the failing child, if any.
    failed: Option<i32>,
    message: String,
    rows: Vec<EvalRow>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: String,
    value: String,
    status: String,
    exit_code: Option<i32>,
    seeds_ok: usize,
    seeds_failed: usize,
    ratio: MeanStd,
    random_ratio: MeanStd,
    q_err: MeanStd,
    m_err: MeanStd,
}

const CSV_HEADER: &str = "axis,value,status,exit_code,seeds_ok,seeds_failed,ratio_mean,ratio_std,random_ratio_mean,q_err_mean,m_err_mean";

impl SweepRow {
    fn csv_row(&self) -> String {
        let code = self.exit_code.map_or_else(|| "n/a".into(), |c| c.to_string());
        format!(
            "{},{},{},{code},{},{},{},{},{},{},{}",
            self.axis,
            self.value,
            self.status,
            self.seeds_ok,
            self.seeds_failed,
            self.ratio.mean,
            self.ratio.std,
            self.random_ratio.mean,
            self.q_err.mean,
            self.m_err.mean
        )
    }
}

pub fn run(a: SweepArgs) -> Result<()> {
    if !AXES.contains(&a.axis.as_str()) {
        bail!(FbError::Config(format!("unknown sweep axis `{}`; expected one of {}", a.axis, AXES.join(", "))));
    }
    let values: Vec<String> = a.values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!(FbError::Config("--values is empty".into()));
    }
    let seeds = parse_seeds(&a.seeds)?;
    if seeds.is_empty() {
        bail!(FbError::Config("--seeds is empty".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| FbError::io(&a.out, e))?;
    let exe = std::env::current_exe()?;
    let runs: Vec<(String, u64)> = values.iter().flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s))).collect();
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, seed)) = runs.get(i) else { break };
                let outcome = run_one(&exe, &a, value, *seed);
                eprintln!(
                    "{}={value} seed {seed}: {}",
                    a.axis,
                    outcome.failed.map_or_else(|| "ok".into(), |c| format!("failed (exit {c}) {}", outcome.message))
                );
                outcomes.lock().expect("no poisoned lock")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<RunOutcome> =
        outcomes.into_inner().expect("no poisoned lock").into_iter().map(|o| o.expect("every run finished")).collect();

    let table: Vec<SweepRow> = values.iter().map(|v| aggregate(&a.axis, v, &outcomes)).collect();
    let mut echo = String::new();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| FbError::io(p, e))?;
        let _ = writeln!(echo, "base config {}:\n{text}", p.display());
    }
    let _ = writeln!(echo, "dataset = {}\naxis = {}\nvalues = {}\nseeds = {}", a.dataset.display(), a.axis, a.values, a.seeds);
    for s in &a.sets {
        let _ = writeln!(echo, "set {s}");
    }
    let mut csv = commented(&echo);
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for r in &table {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&a.out.join("sweep.csv"), &csv)?;
    let json = serde_json::json!({ "config": echo, "rows": table, "runs": outcomes });
    write(&a.out.join("sweep.json"), serde_json::to_string_pretty(&json)?)?;

    println!("{CSV_HEADER}");
    for r in &table {
        println!("{}", r.csv_row());
    }
    // a sweep with no successful run reports the first child's failure
    if table.iter().all(|r| r.seeds_ok == 0) {
        let code = outcomes.iter().find_map(|o| o.failed).unwrap_or(2);
        return Err(ChildFailure(code).into());
    }
    Ok(())
}

/// Every child failed; carries the first exit code.
#[derive(Debug)]
pub struct ChildFailure(pub i32);

impl std::fmt::Display for ChildFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "every sweep run failed (first exit code {})", self.0)
    }
}

impl std::error::Error for ChildFailure {}

fn run_name(axis: &str, value: &str, seed: u64) -> String {
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    format!("{axis}-{safe}-seed{seed}")
}

fn run_one(exe: &Path, a: &SweepArgs, value: &str, seed: u64) -> RunOutcome {
    let name = run_name(&a.axis, value, seed);
    let ckpt = a.out.join(format!("{name}.fbz"));
    let mut train = Command::new(exe);
    train.arg("train").arg("--dataset").arg(&a.dataset).arg("--out").arg(&ckpt).arg("--quiet");
    train.arg("--seed").arg(seed.to_string());
    if let Some(c) = &a.config {
        train.arg("--config").arg(c);
    }
    for s in &a.sets {
        train.arg("--set").arg(s);
    }
    train.arg("--set").arg(format!("{}={value}", a.axis));
    let outcome = |failed, message: String, rows| RunOutcome { value: value.to_string(), seed, failed, message, rows };
    if let Err((code, msg)) = run_child(train) {
        return outcome(Some(code), msg, Vec::new());
    }
    let prefix = a.out.join(format!("{name}.eval"));
    let mut eval = Command::new(exe);
    eval.arg("eval").arg("--checkpoint").arg(&ckpt).arg("--suite").arg(&a.suite);
    eval.arg("--seeds").arg(seed.to_string()).arg("--out").arg(&prefix);
    if let Some(h) = a.horizon {
        eval.arg("--horizon").arg(h.to_string());
    }
    if let Some(e) = a.episodes {
        eval.arg("--episodes").arg(e.to_string());
    }
    if let Err((code, msg)) = run_child(eval) {
        return outcome(Some(code), msg, Vec::new());
    }
    match read_rows(&PathBuf::from(format!("{}.json", prefix.display()))) {
        Ok(rows) => outcome(None, String::new(), rows),
        Err(e) => outcome(Some(i32::from(crate::exit_code(&e))), crate::describe(&e), Vec::new()),
    }
}

fn run_child(mut cmd: Command) -> std::result::Result<(), (i32, String)> {
    match cmd.output() {
        Ok(out) if out.status.success() => Ok(()),
        Ok(out) => {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let last = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").to_string();
            Err((out.status.code().unwrap_or(2), last))
        }
        Err(e) => Err((4, format!("cannot start child: {e}"))),
    }
}

fn read_rows(path: &Path) -> Result<Vec<EvalRow>> {
    #[derive(serde::Deserialize)]
    struct Report {
        rows: Vec<EvalRow>,
    }
    let text = fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| FbError::Format(format!("{}: {e}", path.display())))?;
    Ok(report.rows)
}

fn aggregate(axis: &str, value: &str, outcomes: &[RunOutcome]) -> SweepRow {
    let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.value == value).collect();
    let ok: Vec<&RunOutcome> = mine.iter().copied().filter(|o| o.failed.is_none()).collect();
    let first_failure = mine.iter().find_map(|o| o.failed);
    let per_seed = |f: &dyn Fn(&EvalRow) -> Option<f64>| {
        let means: Vec<f64> = ok
            .iter()
            .filter_map(|o| {
                let vals: Vec<f64> = o.rows.iter().filter_map(f).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        MeanStd::of(&means)
    };
    SweepRow {
        axis: axis.to_string(),
        value: value.to_string(),
        status: if first_failure.is_some() { "failed".into() } else { "ok".into() },
        exit_code: first_failure,
        seeds_ok: ok.len(),
        seeds_failed: mine.len() - ok.len(),
        ratio: per_seed(&|r| Some(r.ratio)),
        random_ratio: per_seed(&|r| Some(r.random_ratio)),
        q_err: per_seed(&|r| r.q_err),
        m_err: per_seed(&|r| r.m_err),
    }
}
