//! Reward specifications: goal cells, state indices, closed-form expressions
//! over state coordinates, reward tables, and suites of named tasks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FbError, Result};
use crate::evaluation::corner_goals;
use crate::mdp::{FiniteMdp, RewardFn};

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    /// Unit reward at grid cell `(x, y)`.
    Goal { x: usize, y: usize },
    /// Unit reward at a state index.
    State(usize),
    /// Expression in `x`, `y` (normalized coordinates) and `s` (state index).
    Expr(String),
    /// One reward per state, in state order.
    Table(Vec<f64>),
}

impl TaskSpec {
    /// `goal X Y`, `state N`, `expr EXPRESSION` or `table PATH`. Relative
    /// table paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let text = text.trim();
        let (head, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let rest = rest.trim();
        let bad = |msg: String| FbError::Config(format!("task `{text}`: {msg}"));
        match head {
            "goal" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [x, y] = parts[..] else {
                    return Err(bad("expected `goal X Y`".into()));
                };
                let coord = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{v}` is not a cell coordinate")));
                Ok(TaskSpec::Goal { x: coord(x)?, y: coord(y)? })
            }
            "state" => rest.parse().map(TaskSpec::State).map_err(|_| bad("expected `state N`".into())),
            "expr" => {
                if rest.is_empty() {
                    return Err(bad("empty expression".into()));
                }
                compile(rest)?;
                Ok(TaskSpec::Expr(rest.to_string()))
            }
            "table" => {
                let path = match base {
                    Some(b) if Path::new(rest).is_relative() => b.join(rest),
                    _ => PathBuf::from(rest),
                };
                Ok(TaskSpec::Table(read_table(&path)?))
            }
            _ => Err(bad("expected goal, state, expr or table".into())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TaskSpec::Goal { x, y } => format!("goal({x};{y})"),
            TaskSpec::State(s) => format!("state({s})"),
            TaskSpec::Expr(e) => format!("expr({e})"),
            TaskSpec::Table(v) => format!("table({})", v.len()),
        }
    }

    pub fn reward(&self, mdp: &FiniteMdp) -> Result<RewardFn> {
        match self {
            TaskSpec::Goal { x, y } => {
                let grid = mdp.grid.as_ref().ok_or_else(|| FbError::Config("goal cells need a grid MDP".into()))?;
                let s = grid
                    .state_at(*x, *y)
                    .ok_or_else(|| FbError::Config(format!("cell ({x}, {y}) is a wall or off the grid")))?;
                Ok(RewardFn::goal(mdp.n_states, s))
            }
            TaskSpec::State(s) => {
                if *s >= mdp.n_states {
                    return Err(FbError::Config(format!("state {s} outside {} states", mdp.n_states)));
                }
                Ok(RewardFn::goal(mdp.n_states, *s))
            }
            TaskSpec::Expr(e) => expression_reward(e, mdp),
            TaskSpec::Table(v) => {
                if v.len() != mdp.n_states {
                    return Err(FbError::Config(format!("reward table has {} entries for {} states", v.len(), mdp.n_states)));
                }
                RewardFn::new(v.clone())
            }
        }
    }
}

fn compile(expr: &str) -> Result<meval::Expr> {
    expr.parse::<meval::Expr>().map_err(|e| FbError::Config(format!("cannot parse expression `{expr}`: {e}")))
}

/// Evaluates `expr` at every state with `x`, `y` from the state features
/// (`y = 0` for one-dimensional features) and `s` the state index.
pub fn expression_reward(expr: &str, mdp: &FiniteMdp) -> Result<RewardFn> {
    let f = compile(expr)?
        .bind3("x", "y", "s")
        .map_err(|e| FbError::Config(format!("expression `{expr}`: {e}")))?;
    let feats = &mdp.state_features;
    let values = (0..mdp.n_states)
        .map(|s| {
            let x = feats.get(s, 0);
            let y = if feats.cols() > 1 { feats.get(s, 1) } else { 0.0 };
            f(x, y, s as f64)
        })
        .collect();
    RewardFn::new(values).map_err(|_| FbError::Config(format!("expression `{expr}` is not finite at every state")))
}

/// Whitespace-separated numbers; `#` starts a comment.
pub fn read_table(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, source_name: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            out.push(tok.parse().map_err(|_| FbError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: format!("`{tok}` is not a number"),
            })?);
        }
    }
    Ok(out)
}

/// A named task with its resolved reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub reward: RewardFn,
}

/// Suite lines, one per task: a task spec, `corners`, or
/// `random-goals N SEED` for `N` distinct goal states not already listed.
pub fn parse_suite(text: &str, mdp: &FiniteMdp, base: Option<&Path>) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = Vec::new();
    let mut goal_states: Vec<usize> = Vec::new();
    let push_goal = |tasks: &mut Vec<Task>, goal_states: &mut Vec<usize>, s: usize| {
        goal_states.push(s);
        tasks.push(Task { name: goal_name(mdp, s), reward: RewardFn::goal(mdp.n_states, s) });
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |e: FbError| FbError::Config(format!("suite line {}: {}", i + 1, e));
        let mut words = line.split_whitespace();
        match words.next() {
            Some("corners") => {
                for s in corner_goals(mdp) {
                    push_goal(&mut tasks, &mut goal_states, s);
                }
            }
            Some("random-goals") => {
                let nums: Vec<u64> = words.map(|w| w.parse::<u64>()).collect::<std::result::Result<_, _>>().map_err(|_| {
                    FbError::Config(format!("suite line {}: expected `random-goals N SEED`", i + 1))
                })?;
                let [n, seed] = nums[..] else {
                    return Err(FbError::Config(format!("suite line {}: expected `random-goals N SEED`", i + 1)));
                };
                for s in random_goals(mdp, n as usize, seed, &goal_states).map_err(err)? {
                    push_goal(&mut tasks, &mut goal_states, s);
                }
            }
            _ => {
                let spec = TaskSpec::parse(line, base).map_err(err)?;
                let reward = spec.reward(mdp).map_err(err)?;
                if let Some(s) = single_goal(&reward) {
                    goal_states.push(s);
                }
                tasks.push(Task { name: spec.name(), reward });
            }
        }
    }
    Ok(tasks)
}

pub fn load_suite(path: &Path, mdp: &FiniteMdp) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
    parse_suite(&text, mdp, path.parent())
}

fn single_goal(r: &RewardFn) -> Option<usize> {
    let nonzero: Vec<usize> = (0..r.values.len()).filter(|&s| r.values[s] != 0.0).collect();
    match nonzero[..] {
        [s] if r.values[s] == 1.0 => Some(s),
        _ => None,
    }
}

fn goal_name(mdp: &FiniteMdp, s: usize) -> String {
    match &mdp.grid {
        Some(g) => {
            let (x, y) = g.cells[s];
            TaskSpec::Goal { x, y }.name()
        }
        None => TaskSpec::State(s).name(),
    }
}

/// `n` distinct states outside `exclude`, drawn with a seeded rng.
pub fn random_goals(mdp: &FiniteMdp, n: usize, seed: u64, exclude: &[usize]) -> Result<Vec<usize>> {
    let free: Vec<usize> = (0..mdp.n_states).filter(|s| !exclude.contains(s)).collect();
    if n > free.len() {
        return Err(FbError::Config(format!("{n} random goals requested, {} states available", free.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = free;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(pool.swap_remove(rng.gen_range(0..pool.len())));
    }
    Ok(out)
}

/// The evaluation suite of four corners and four random goals.
pub fn standard_suite(mdp: &FiniteMdp, seed: u64) -> Result<Vec<Task>> {
    parse_suite(&format!("corners\nrandom-goals 4 {seed}\n"), mdp, None)
}
