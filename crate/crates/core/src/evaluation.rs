//! Zero-shot evaluation against exact oracles: rollout returns versus the
//! finite-horizon optimum, Q and successor-measure errors, reward-prediction
//! bias, and CSV/JSON reports.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FbError, Result};
use crate::inference::{infer_z, InferredTask, RewardSamples};
use crate::mdp::{
    finite_horizon_optimal_q, finite_horizon_policy_q, q_function_exact, successor_measure_exact, FiniteMdp, RewardFn,
    TabularPolicy,
};
use crate::model::BehaviorModel;
use crate::networks::residual_ar_normalize;
use crate::policy_opt::{action_selector, ensemble_mean, ActionSelector};
use crate::tensor::Array2;
use crate::training::q_table;

pub const DEFAULT_HORIZON: usize = 200;
pub const DEFAULT_EPISODES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub horizon: usize,
    pub episodes: usize,
    /// Action selector name, see [`action_selector`].
    pub selector: String,
    pub seed: u64,
}

impl EvalSettings {
    /// Greedy on `π` for `es_samples ≤ 1`, evaluation-based sampling otherwise.
    pub fn new(es_samples: usize, seed: u64) -> Self {
        let selector = if es_samples <= 1 { "greedy".to_string() } else { format!("es:{es_samples}") };
        Self { horizon: DEFAULT_HORIZON, episodes: DEFAULT_EPISODES, selector, seed }
    }
}

/// Everything the model says about one task, tabulated over all states.
pub struct TaskTables {
    pub task: InferredTask,
    /// `π(·|s, z̄)`, `S×A`.
    pub probs: Array2,
    /// Ensemble-mean `F(s, a, z̄)ᵀz̄`, `S×A`; only its ordering matters.
    pub q_bar: Array2,
    /// `γ·F(s, a, z̄)ᵀz_raw`, the model's estimate of `Q_r`.
    pub q_model: Array2,
}

fn broadcast(z: &[f64], n: usize) -> Array2 {
    Array2::from_fn(n, z.len(), |_, c| z[c])
}

/// Infers `z_r` with `ρ`-exact weights and tabulates policy and Q-values.
pub fn task_tables(model: &dyn BehaviorModel, r: &RewardFn) -> Result<TaskTables> {
    let task = infer_z(model, &RewardSamples::exact(model.rho(), r))?;
    tables_for(model, task)
}

pub fn tables_for(model: &dyn BehaviorModel, task: InferredTask) -> Result<TaskTables> {
    let n = model.n_states();
    let states: Vec<usize> = (0..n).collect();
    let z_bar = broadcast(&task.normalized, n);
    let probs = model.policy(&states, &z_bar)?;
    let f = model.forward(&states, &z_bar)?;
    let q_bar = ensemble_mean(&f.iter().map(|fm| q_table(fm, &z_bar)).collect::<Vec<_>>());
    let z_raw = broadcast(&task.raw, n);
    let q_model = ensemble_mean(&f.iter().map(|fm| q_table(fm, &z_raw)).collect::<Vec<_>>()).scale(model.gamma());
    Ok(TaskTables { task, probs, q_bar, q_model })
}

/// Rollout rng for one `(seed, task, episode)`.
pub fn episode_rng(seed: u64, task: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((task << 32) ^ episode);
    rng
}

/// One episode's states `s_0..s_H` from a uniform start.
pub fn rollout(
    mdp: &FiniteMdp,
    tables: &TaskTables,
    selector: &dyn ActionSelector,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Vec<usize> {
    let mut s = rng.gen_range(0..mdp.n_states);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(s);
    for _ in 0..horizon {
        let a = selector.select(tables.probs.row(s), tables.q_bar.row(s), rng);
        s = mdp.sample_next(s, a, rng);
        states.push(s);
    }
    states
}

/// `Σ_{t=1..H} γ^t r(s_t)`.
pub fn discounted_return(states: &[usize], r: &RewardFn, gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for &s in &states[1..] {
        g *= gamma;
        total += g * r.values[s];
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub mean_return: f64,
    pub optimal_return: f64,
    pub ratio: f64,
    /// Exact expected return of the uniform policy, for calibration.
    pub random_return: f64,
    pub random_ratio: f64,
}

fn uniform_start_value(q: &Array2, pick: impl Fn(&[f64]) -> f64) -> f64 {
    (0..q.rows()).map(|s| pick(q.row(s))).sum::<f64>() / q.rows() as f64
}

fn ratio(value: f64, optimal: f64) -> f64 {
    if optimal == 0.0 {
        1.0
    } else {
        value / optimal
    }
}

/// Optimal and uniform-policy expected returns from a uniform start.
pub fn reference_returns(mdp: &FiniteMdp, r: &RewardFn, horizon: usize) -> (f64, f64) {
    let opt = finite_horizon_optimal_q(mdp, r, horizon);
    let optimal = uniform_start_value(&opt, |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let uni = finite_horizon_policy_q(mdp, &TabularPolicy::uniform(mdp.n_states, mdp.n_actions), r, horizon);
    let random = uniform_start_value(&uni, |row| row.iter().sum::<f64>() / row.len() as f64);
    (optimal, random)
}

/// Rolls out `π_{z_r}` for `settings.episodes` episodes and compares the mean
/// discounted return with the finite-horizon optimum. `r ≡ 0` gives ratio 1.
pub fn zero_shot_return(
    model: &dyn BehaviorModel,
    mdp: &FiniteMdp,
    r: &RewardFn,
    settings: &EvalSettings,
    task_id: u64,
) -> Result<ZeroShotResult> {
    let (optimal, random) = reference_returns(mdp, r, settings.horizon);
    if r.is_zero() {
        return Ok(ZeroShotResult {
            mean_return: 0.0,
            optimal_return: 0.0,
            ratio: 1.0,
            random_return: 0.0,
            random_ratio: 1.0,
        });
    }
    let tables = task_tables(model, r)?;
    zero_shot_with(&tables, mdp, r, settings, task_id, optimal, random)
}

fn zero_shot_with(
    tables: &TaskTables,
    mdp: &FiniteMdp,
    r: &RewardFn,
    settings: &EvalSettings,
    task_id: u64,
    optimal: f64,
    random: f64,
) -> Result<ZeroShotResult> {
    if settings.episodes == 0 {
        return Err(FbError::contract("evaluation needs at least one episode"));
    }
    let selector = action_selector(&settings.selector)?;
    let mut total = 0.0;
    for e in 0..settings.episodes {
        let mut rng = episode_rng(settings.seed, task_id, e as u64);
        let states = rollout(mdp, tables, selector.as_ref(), settings.horizon, &mut rng);
        total += discounted_return(&states, r, mdp.gamma);
    }
    let mean_return = total / settings.episodes as f64;
    Ok(ZeroShotResult {
        mean_return,
        optimal_return: optimal,
        ratio: ratio(mean_return, optimal),
        random_return: random,
        random_ratio: ratio(random, optimal),
    })
}

/// `max_{s,a} |γ·F(s, a, z̄)ᵀz_r − Q_r^{π}(s, a)|` with `π` greedy on the
/// model's Q. `None` for the zero reward.
pub fn q_model_error(model: &dyn BehaviorModel, mdp: &FiniteMdp, r: &RewardFn) -> Result<Option<f64>> {
    if r.is_zero() {
        return Ok(None);
    }
    let tables = task_tables(model, r)?;
    q_error_from(&tables, mdp, r).map(Some)
}

fn q_error_from(tables: &TaskTables, mdp: &FiniteMdp, r: &RewardFn) -> Result<f64> {
    let policy = TabularPolicy::greedy(&tables.q_model);
    let exact = q_function_exact(mdp, &policy, r)?;
    Ok(tables.q_model.zip_map(&exact, |a, b| a - b).max_abs())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureError {
    /// `‖γF(z)ᵀB(z)diag(ρ) − M^{π_z}‖_F / ‖M^{π_z}‖_F`.
    pub relative: f64,
    /// The same error for the best rank-`d` model: no `d`-dimensional
    /// factorization can do better.
    pub floor: f64,
}

/// Successor-measure fit at task `z` (raw or normalized, only its direction
/// is used), with `π_z` read out greedily from the policy network.
pub fn m_model_error(model: &dyn BehaviorModel, mdp: &FiniteMdp, z: &[f64]) -> Result<MeasureError> {
    let layout = model.layout().clone();
    let (ns, na, d) = (model.n_states(), model.n_actions(), layout.d());
    if z.len() != d {
        return Err(FbError::Dimension(format!("task vector of length {} for d = {d}", z.len())));
    }
    let states: Vec<usize> = (0..ns).collect();
    let z_bar_row = crate::networks::normalize_z(z)?;
    let z_bar = broadcast(&z_bar_row, ns);
    let z_in = broadcast(&residual_ar_normalize(z, &layout)?, ns);
    let f = model.forward(&states, &z_bar)?;
    let b = model.backward(&states, &z_in)?;
    let f_mean = ensemble_mean(&f);
    let policy = TabularPolicy::greedy(&model.policy(&states, &z_bar)?);
    let exact = successor_measure_exact(mdp, &policy)?;
    let rho = model.rho();
    let gamma = model.gamma();
    let mut diff = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let fa = &f_mean.row(s)[a * d..(a + 1) * d];
            for t in 0..ns {
                let m_hat = gamma * crate::tensor::dot(fa, b.row(t)) * rho[t];
                let e = m_hat - exact.get(s, a, t);
                diff += e * e;
            }
        }
    }
    let norm = exact.m.norm();
    Ok(MeasureError { relative: diff.sqrt() / norm, floor: rank_floor(&exact.m, rho, d) / norm })
}

/// `‖M − M_d‖_F` where columns with `ρ = 0` cannot be fitted at all and the
/// rest admit the truncated-SVD optimum.
fn rank_floor(m: &Array2, rho: &[f64], d: usize) -> f64 {
    let support: Vec<usize> = (0..rho.len()).filter(|&t| rho[t] > 0.0).collect();
    let mut unfit = 0.0;
    for t in (0..rho.len()).filter(|&t| rho[t] <= 0.0) {
        unfit += (0..m.rows()).map(|i| m.get(i, t).powi(2)).sum::<f64>();
    }
    let sub = DMatrix::from_fn(m.rows(), support.len(), |i, j| m.get(i, support[j]));
    let sv = sub.singular_values();
    let mut sv: Vec<f64> = sv.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let tail: f64 = sv.iter().skip(d).map(|s| s * s).sum();
    (unfit + tail).sqrt()
}

/// Mean over trajectories of `Σ_{u≤t} γ^u (B(s_u)ᵀz_r − r(s_u))` for
/// `t = 1..H`: positive values mean the model overestimates the return.
pub fn reward_prediction_bias(
    model: &dyn BehaviorModel,
    r: &RewardFn,
    task: &InferredTask,
    trajectories: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let n = model.n_states();
    let states: Vec<usize> = (0..n).collect();
    let z_in = broadcast(&residual_ar_normalize(&task.raw, model.layout())?, n);
    let b = model.backward(&states, &z_in)?;
    let predicted: Vec<f64> = (0..n).map(|s| crate::tensor::dot(b.row(s), &task.raw)).collect();
    let horizon = trajectories.iter().map(|t| t.len().saturating_sub(1)).max().unwrap_or(0);
    let mut curve = vec![0.0; horizon];
    if trajectories.is_empty() {
        return Ok(curve);
    }
    let gamma = model.gamma();
    for traj in trajectories {
        let (mut g, mut acc) = (1.0, 0.0);
        for (t, &s) in traj.iter().enumerate().skip(1) {
            g *= gamma;
            acc += g * (predicted[s] - r.values[s]);
            curve[t - 1] += acc;
        }
    }
    let k = trajectories.len() as f64;
    Ok(curve.into_iter().map(|x| x / k).collect())
}

/// Quick deterministic metrics attached to training reports: the exact
/// expected ratio of the greedy policy on the four corner goals (horizon
/// 100) and the successor-measure error at the first one. Goals whose task
/// vector cannot be inferred contribute NaN.
pub fn training_metrics(model: &dyn BehaviorModel, mdp: &FiniteMdp) -> Result<Vec<(String, f64)>> {
    let goals = corner_goals(mdp);
    let horizon = 100;
    let mut ratios = Vec::with_capacity(goals.len());
    let mut m_err = f64::NAN;
    for (i, &g) in goals.iter().enumerate() {
        let r = RewardFn::goal(mdp.n_states, g);
        let tables = match task_tables(model, &r) {
            Ok(t) => t,
            Err(FbError::DegenerateTask(_)) => {
                ratios.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        let policy = TabularPolicy::greedy(&tables.probs);
        let q = finite_horizon_policy_q(mdp, &policy, &r, horizon);
        let acts = policy.greedy_actions();
        let value = (0..mdp.n_states).map(|s| q.get(s, acts[s])).sum::<f64>() / mdp.n_states as f64;
        let (optimal, _) = reference_returns(mdp, &r, horizon);
        ratios.push(ratio(value, optimal));
        if i == 0 {
            m_err = m_model_error(model, mdp, &tables.task.raw)?.relative;
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    Ok(vec![("corner_ratio".into(), mean), ("m_err".into(), m_err)])
}

/// The four corner cells of a grid, or states `0` and `S − 1` otherwise.
pub fn corner_goals(mdp: &FiniteMdp) -> Vec<usize> {
    match &mdp.grid {
        Some(g) => {
            let corners = [(0, 0), (g.width - 1, 0), (0, g.height - 1), (g.width - 1, g.height - 1)];
            let mut out: Vec<usize> = corners.iter().filter_map(|&(x, y)| g.state_at(x, y)).collect();
            out.dedup();
            out
        }
        None => vec![0, mdp.n_states - 1],
    }
}

/// One report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub dataset: String,
    pub task: String,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub optimal: f64,
    pub ratio: f64,
    pub random_ratio: f64,
    pub q_err: Option<f64>,
    pub m_err: Option<f64>,
    pub m_floor: Option<f64>,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "variant,dataset,task,seed,return,optimal,ratio,random_ratio,q_err,m_err,m_floor";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6e}"));
        format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6},{:.6},{},{},{}",
            csv_field(&self.variant),
            csv_field(&self.dataset),
            csv_field(&self.task),
            self.seed,
            self.ret,
            self.optimal,
            self.ratio,
            self.random_ratio,
            opt(self.q_err),
            opt(self.m_err),
            opt(self.m_floor)
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates one named task: rollout ratio, Q error and measure error.
pub fn evaluate_task(
    model: &dyn BehaviorModel,
    mdp: &FiniteMdp,
    name: &str,
    r: &RewardFn,
    settings: &EvalSettings,
    task_id: u64,
) -> Result<EvalRow> {
    let (optimal, random) = reference_returns(mdp, r, settings.horizon);
    let mut row = EvalRow {
        variant: String::new(),
        dataset: String::new(),
        task: name.to_string(),
        seed: settings.seed,
        ret: 0.0,
        optimal,
        ratio: 1.0,
        random_ratio: ratio(random, optimal),
        q_err: None,
        m_err: None,
        m_floor: None,
    };
    if r.is_zero() {
        return Ok(row);
    }
    let tables = task_tables(model, r)?;
    let z = zero_shot_with(&tables, mdp, r, settings, task_id, optimal, random)?;
    let m = m_model_error(model, mdp, &tables.task.raw)?;
    row.ret = z.mean_return;
    row.ratio = z.ratio;
    row.q_err = Some(q_error_from(&tables, mdp, r)?);
    row.m_err = Some(m.relative);
    row.m_floor = Some(m.floor);
    Ok(row)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EvalRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; empty input gives NaN.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub variant: String,
    pub dataset: String,
    pub task: String,
    pub ratio: MeanStd,
    #[serde(rename = "return")]
    pub ret: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: String,
    pub rows: usize,
    /// Per `(variant, dataset, task)`, aggregated over seeds.
    pub tasks: Vec<SummaryEntry>,
    /// Per `(variant, dataset)`: the seed-wise mean ratio over tasks,
    /// aggregated over seeds.
    pub overall: Vec<SummaryEntry>,
}

/// Mean ± std over seeds, per task and overall.
pub fn summarize(rows: &[EvalRow], config: &str) -> EvalSummary {
    let mut per_task: BTreeMap<(String, String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut per_seed: BTreeMap<(String, String), BTreeMap<u64, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for r in rows {
        let e = per_task.entry((r.variant.clone(), r.dataset.clone(), r.task.clone())).or_default();
        e.0.push(r.ratio);
        e.1.push(r.ret);
        let s = per_seed.entry((r.variant.clone(), r.dataset.clone())).or_default().entry(r.seed).or_default();
        s.0.push(r.ratio);
        s.1.push(r.ret);
    }
    let tasks = per_task
        .into_iter()
        .map(|((variant, dataset, task), (ratio, ret))| SummaryEntry {
            variant,
            dataset,
            task,
            ratio: MeanStd::of(&ratio),
            ret: MeanStd::of(&ret),
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let overall = per_seed
        .into_iter()
        .map(|((variant, dataset), seeds)| {
            let ratio: Vec<f64> = seeds.values().map(|(r, _)| mean(r)).collect();
            let ret: Vec<f64> = seeds.values().map(|(_, g)| mean(g)).collect();
            SummaryEntry { variant, dataset, task: "all".into(), ratio: MeanStd::of(&ratio), ret: MeanStd::of(&ret) }
        })
        .collect();
    EvalSummary { config: config.to_string(), rows: rows.len(), tasks, overall }
}

pub fn summary_json(summary: &EvalSummary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}
