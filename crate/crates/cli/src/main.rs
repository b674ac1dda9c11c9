mod sweep;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fbzero::checkpoint::Checkpoint;
use fbzero::config::{load_entries, TrainConfig};
use fbzero::dataset::{Collector, MoodCollector, OfflineDataset, UniformCollector};
use fbzero::evaluation::{evaluate_task, rows_to_csv, summarize, EvalRow, EvalSettings, EvalSummary};
use fbzero::inference::{infer_z, RewardSamples};
use fbzero::kv::Entry;
use fbzero::mdp::{FiniteMdp, MdpSpec, RewardFn};
use fbzero::reward::{load_suite, TaskSpec};
use fbzero::training::{train_with, FbLossReport};
use fbzero::FbError;

#[derive(Parser)]
#[command(name = "fbzero", version, about = "Forward-backward zero-shot RL on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset.
    GenData(GenDataArgs),
    /// Train an FB model on a dataset.
    Train(TrainArgs),
    /// Infer the task vector of a reward.
    Prompt(PromptArgs),
    /// Evaluate a checkpoint on a task suite.
    Eval(EvalArgs),
    /// Train and evaluate over values of one config key.
    Sweep(sweep::SweepArgs),
}

#[derive(Args, Clone)]
struct MdpArgs {
    /// Gridworld size, e.g. `5x5`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    slip: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Wall cells as `x:y,x:y`.
    #[arg(long, default_value = "")]
    walls: String,
    /// MDP spec file instead of `--grid`.
    #[arg(long)]
    mdp: Option<PathBuf>,
}

impl MdpArgs {
    fn spec(&self) -> Result<MdpSpec> {
        match (&self.grid, &self.mdp) {
            (Some(_), Some(_)) => bail!(FbError::Config("give either --grid or --mdp".into())),
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
                Ok(MdpSpec::parse_text(&text)?)
            }
            (Some(g), None) => {
                let (w, h) = g
                    .split_once('x')
                    .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                    .ok_or_else(|| FbError::Config(format!("--grid expects WxH, got `{g}`")))?;
                let mut walls = BTreeSet::new();
                for cell in self.walls.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                    let xy = cell
                        .split_once(':')
                        .and_then(|(x, y)| Some((x.parse().ok()?, y.parse().ok()?)))
                        .ok_or_else(|| FbError::Config(format!("wall `{cell}` is not x:y")))?;
                    walls.insert(xy);
                }
                Ok(MdpSpec::Grid { width: w, height: h, slip: self.slip, gamma: self.gamma, walls })
            }
            (None, None) => bail!(FbError::Config("an MDP is required: --grid WxH or --mdp FILE".into())),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CollectorKind {
    Uniform,
    Mood,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long, value_enum, default_value = "uniform")]
    collector: CollectorKind,
    /// Transitions (uniform) or Q-learning steps per training task (mood).
    #[arg(long)]
    n: usize,
    /// Training tasks of the mood collector, one task spec each, e.g. `goal 0 0`.
    #[arg(long = "task")]
    tasks: Vec<String>,
    /// Linear exploration schedule `start,end` of the mood collector.
    #[arg(long, default_value = "1.0,0.05")]
    epsilon: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; command-line settings override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Loss CSV path; defaults to `<out>.loss.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `goal X Y`, `state N`, `expr EXPRESSION` or `table PATH`.
    #[arg(long)]
    task: String,
    /// MDP for checkpoints that do not record one.
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeatable; rows of all checkpoints share one report.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    suite: PathBuf,
    /// Rollout seeds, comma-separated.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value_t = fbzero::evaluation::DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = fbzero::evaluation::DEFAULT_EPISODES)]
    episodes: usize,
    /// `greedy`, `sample`, `qgreedy` or `es:M`; defaults to the trained `es_samples`.
    #[arg(long)]
    selector: Option<String>,
    /// Report prefix: writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mdp: MdpArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Prompt(a) => prompt(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 2 contract/config, 3 numeric divergence, 4 IO.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(fb) = cause.downcast_ref::<FbError>() {
            return fb.exit_code() as u8;
        }
        if let Some(sweep::ChildFailure(code)) = cause.downcast_ref::<sweep::ChildFailure>() {
            return u8::try_from(*code).unwrap_or(2);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FbError::io(path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = a.mdp.spec()?;
    let mdp = spec.build()?;
    let collector: Box<dyn Collector> = match a.collector {
        CollectorKind::Uniform => Box::new(UniformCollector { n: a.n }),
        CollectorKind::Mood => {
            if a.tasks.is_empty() {
                bail!(FbError::Config("the mood collector needs at least one --task".into()));
            }
            let rewards = a
                .tasks
                .iter()
                .map(|t| TaskSpec::parse(t, None)?.reward(&mdp))
                .collect::<fbzero::Result<Vec<RewardFn>>>()?;
            let (start, end) = a
                .epsilon
                .split_once(',')
                .and_then(|(s, e)| Some((s.trim().parse().ok()?, e.trim().parse().ok()?)))
                .ok_or_else(|| FbError::Config(format!("--epsilon expects start,end, got `{}`", a.epsilon)))?;
            let mut c = MoodCollector::new(rewards, a.n);
            c.epsilon = (start, end);
            Box::new(c)
        }
    };
    let ds = collector.collect(&mdp, a.seed)?;
    ds.save(&a.out)?;
    print!("{}", coverage_summary(&ds, &mdp));
    Ok(())
}

/// Size, coverage and the `s′` histogram, laid out as the grid when there is one.
fn coverage_summary(ds: &OfflineDataset, mdp: &FiniteMdp) -> String {
    let counts = ds.next_state_counts();
    let covered = counts.iter().filter(|&&c| c > 0).count();
    let mut out = format!(
        "dataset: {} transitions, collector {}, seed {}\ncoverage: {covered}/{} states\n",
        ds.len(),
        ds.collector,
        ds.seed,
        mdp.n_states
    );
    match &mdp.grid {
        Some(g) => {
            out.push_str("next-state counts (top row is the largest y):\n");
            for y in (0..g.height).rev() {
                let row: Vec<String> = (0..g.width)
                    .map(|x| g.state_at(x, y).map_or_else(|| "#".to_string(), |s| counts[s].to_string()))
                    .map(|c| format!("{c:>7}"))
                    .collect();
                let _ = writeln!(out, "{}", row.join(""));
            }
            let corners = fbzero::evaluation::corner_goals(mdp);
            let mass: f64 = corners.iter().map(|&s| ds.rho[s]).sum();
            let _ = writeln!(
                out,
                "corner mass: {mass:.4} (uniform {:.4})",
                corners.len() as f64 / mdp.n_states as f64
            );
        }
        None => {
            for (s, c) in counts.iter().enumerate() {
                let _ = writeln!(out, "state {s}: {c}");
            }
        }
    }
    out
}

fn train_entries(a: &TrainArgs) -> Result<Vec<Entry>> {
    let mut entries = match &a.config {
        Some(p) => load_entries(p)?,
        None => Vec::new(),
    };
    let mut push = |key: &str, value: String| entries.push(Entry { key: key.into(), value, line: 0 });
    if let Some(v) = &a.variant {
        push("variant", v.clone());
    }
    if let Some(v) = a.blocks {
        push("blocks", v.to_string());
    }
    if let Some(v) = a.d {
        push("d", v.to_string());
    }
    if let Some(v) = a.steps {
        push("steps", v.to_string());
    }
    if let Some(v) = a.seed {
        push("seed", v.to_string());
    }
    for s in &a.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| FbError::Config(format!("--set expects key=value, got `{s}`")))?;
        push(k.trim(), v.trim().to_string());
    }
    Ok(entries)
}

fn commented(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn dataset_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::from_entries(&train_entries(&a)?)?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let mdp = ds.mdp_spec.as_ref().map(MdpSpec::build).transpose()?;
    let log_path = a.log.clone().unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.out.display())));
    let mut csv = commented(&cfg.to_text());
    csv.push_str(FbLossReport::CSV_HEADER);
    csv.push_str(",eval\n");
    let quiet = a.quiet;
    let outcome = train_with(&cfg, &ds, mdp.as_ref(), |r| {
        let eval: Vec<String> = r.eval.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        let _ = writeln!(csv, "{},{}", r.csv_row(), eval.join(" "));
        if !quiet {
            eprintln!("step {:>7}  fb {:+.5e}  ortho {:+.5e}  actor {:+.5e}  {}", r.step, r.fb_loss, r.ortho_loss, r.actor_loss, eval.join(" "));
        }
    });
    // the log is written even when training stops early
    write(&log_path, &csv)?;
    let (model, _) = outcome?;
    let ck = Checkpoint::new(model, ds.mdp_spec.as_ref(), Some(dataset_id(&a.dataset)));
    ck.save(&a.out)?;
    println!("checkpoint {} (config {}, sha256 {})", a.out.display(), &cfg.hash()[..16], ck.sha256());
    Ok(())
}

fn checkpoint_mdp(ck: &Checkpoint, fallback: &MdpArgs) -> Result<FiniteMdp> {
    let spec = match ck.mdp_spec()? {
        Some(s) => s,
        None => fallback.spec().context("the checkpoint records no MDP")?,
    };
    let mdp = spec.build()?;
    if mdp.n_states != ck.meta.n_states || mdp.n_actions != ck.meta.n_actions {
        bail!(FbError::Config(format!(
            "MDP has {}x{} states x actions, checkpoint {}x{}",
            mdp.n_states, mdp.n_actions, ck.meta.n_states, ck.meta.n_actions
        )));
    }
    Ok(mdp)
}

fn prompt(a: PromptArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mdp = checkpoint_mdp(&ck, &a.mdp)?;
    let spec = TaskSpec::parse(&a.task, std::env::current_dir().ok().as_deref())?;
    let r = spec.reward(&mdp)?;
    if r.is_zero() {
        bail!(FbError::DegenerateTask("the reward is zero everywhere".into()));
    }
    let task = infer_z(&ck.model, &RewardSamples::exact(&ck.model.rho, &r))?;
    let layout = &ck.model.layout;
    let mut text = String::from("# fbzero task v1\n");
    let _ = writeln!(text, "task = {}", spec.name());
    let _ = writeln!(text, "config_hash = {}", ck.meta.config_hash);
    let _ = writeln!(text, "d = {}", layout.d());
    let sizes: Vec<String> = layout.sizes().iter().map(|s| s.to_string()).collect();
    let _ = writeln!(text, "block_sizes = {}", sizes.join(","));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
    let _ = writeln!(text, "raw = {}", fmt(&task.raw));
    let _ = writeln!(text, "normalized = {}", fmt(&task.normalized));
    let _ = writeln!(text, "residual = {:e}", task.residual);
    text.push_str(&commented(&ck.meta.config));
    match &a.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    println!("fixed-point residual {:.3e} over {} blocks", task.residual, layout.k());
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| anyhow!(FbError::Config(format!("bad seed `{t}`")))))
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let seeds = parse_seeds(&a.seeds)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut configs = String::new();
    for path in &a.checkpoints {
        let ck = Checkpoint::load(path)?;
        let mdp = checkpoint_mdp(&ck, &a.mdp)?;
        let tasks = load_suite(&a.suite, &mdp)?;
        let cfg = TrainConfig::parse(&ck.meta.config)?;
        let _ = writeln!(configs, "checkpoint = {}\n{}", path.display(), ck.meta.config);
        for &seed in &seeds {
            let mut settings = EvalSettings::new(cfg.es_samples, seed);
            settings.horizon = a.horizon;
            settings.episodes = a.episodes;
            if let Some(s) = &a.selector {
                settings.selector = s.clone();
            }
            for (i, t) in tasks.iter().enumerate() {
                let mut row = evaluate_task(&ck.model, &mdp, &t.name, &t.reward, &settings, i as u64)?;
                row.variant = cfg.variant.clone();
                row.dataset = ck.meta.dataset_id.clone().unwrap_or_default();
                rows.push(row);
            }
        }
    }
    let summary = summarize(&rows, &configs);
    write(&with_ext(&a.out, "csv"), commented(&configs) + &rows_to_csv(&rows))?;
    write(&with_ext(&a.out, "json"), report_json(&summary, &rows))?;
    for e in &summary.overall {
        println!(
            "{} on {}: ratio {:.4} ± {:.4} over {} seed(s)",
            e.variant, e.dataset, e.ratio.mean, e.ratio.std, e.ratio.n
        );
    }
    println!("{} rows written to {}", rows.len(), with_ext(&a.out, "csv").display());
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    PathBuf::from(format!("{}.{ext}", prefix.display()))
}

fn report_json(summary: &EvalSummary, rows: &[EvalRow]) -> String {
    let v = serde_json::json!({ "summary": summary, "rows": rows });
    serde_json::to_string_pretty(&v).expect("report serializes")
}
