//! Finite MDPs and their exact oracles.
//!
//! Rewards are collected on successor states and discounting starts at γ:
//! `Q^π(s,a) = Σ_{t≥1} γ^t E[r(s_t)] = Σ_{s'} M^π(s,a,s') r(s')`. Every oracle
//! here (successor measure, policy evaluation, value iteration, finite-horizon
//! optimum) follows that single convention.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{FbError, Result};
use crate::kv;
use crate::tensor::Array2;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

/// Serializable description from which a [`FiniteMdp`] is built.
#[derive(Clone, Debug, PartialEq)]
pub enum MdpSpec {
    Grid { width: usize, height: usize, slip: f64, gamma: f64, walls: BTreeSet<(usize, usize)> },
    Random { states: usize, actions: usize, gamma: f64, seed: u64 },
}

impl MdpSpec {
    pub fn grid(width: usize, height: usize, slip: f64, gamma: f64) -> Self {
        MdpSpec::Grid { width, height, slip, gamma, walls: BTreeSet::new() }
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        match self {
            MdpSpec::Grid { width, height, slip, gamma, walls } => {
                let walls: Vec<String> = walls.iter().map(|(x, y)| format!("{x}:{y}")).collect();
                vec![
                    ("kind", "grid".into()),
                    ("width", width.to_string()),
                    ("height", height.to_string()),
                    ("slip", slip.to_string()),
                    ("gamma", gamma.to_string()),
                    ("walls", walls.join(",")),
                ]
            }
            MdpSpec::Random { states, actions, gamma, seed } => vec![
                ("kind", "random".into()),
                ("states", states.to_string()),
                ("actions", actions.to_string()),
                ("gamma", gamma.to_string()),
                ("seed", seed.to_string()),
            ],
        }
    }

    /// Multi-line `key = value` form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# fbzero mdp v1\n");
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Single-line `key=value` form, as embedded in dataset headers.
    pub fn to_line(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_entries(&kv::parse(text, "mdp spec")?)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Self::from_entries(&kv::parse_inline(line, "mdp spec")?)
    }

    fn from_entries(entries: &[kv::Entry]) -> Result<Self> {
        let find = |k: &str| entries.iter().find(|e| e.key == k);
        let need = |k: &str| {
            find(k).ok_or_else(|| FbError::Config(format!("mdp spec is missing `{k}`")))
        };
        let src = "mdp spec";
        match need("kind")?.value.as_str() {
            "grid" => {
                let mut walls = BTreeSet::new();
                if let Some(w) = find("walls") {
                    for cell in w.value.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                        let (x, y) = cell.split_once(':').ok_or_else(|| {
                            FbError::Config(format!("wall cell `{cell}` is not x:y"))
                        })?;
                        let parse = |v: &str| {
                            v.parse::<usize>()
                                .map_err(|_| FbError::Config(format!("bad wall cell `{cell}`")))
                        };
                        walls.insert((parse(x)?, parse(y)?));
                    }
                }
                Ok(MdpSpec::Grid {
                    width: kv::parse_value(need("width")?, src)?,
                    height: kv::parse_value(need("height")?, src)?,
                    slip: find("slip").map(|e| kv::parse_value(e, src)).transpose()?.unwrap_or(0.0),
                    gamma: find("gamma").map(|e| kv::parse_value(e, src)).transpose()?.unwrap_or(0.9),
                    walls,
                })
            }
            "random" => Ok(MdpSpec::Random {
                states: kv::parse_value(need("states")?, src)?,
                actions: kv::parse_value(need("actions")?, src)?,
                gamma: find("gamma").map(|e| kv::parse_value(e, src)).transpose()?.unwrap_or(0.9),
                seed: find("seed").map(|e| kv::parse_value(e, src)).transpose()?.unwrap_or(0),
            }),
            other => Err(FbError::Config(format!("unknown mdp kind `{other}`"))),
        }
    }

    /// Stable identifier: kind, size and a digest of the canonical form.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_line().as_bytes());
        let short = hex::encode(&digest[..4]);
        match self {
            MdpSpec::Grid { width, height, .. } => format!("grid{width}x{height}-{short}"),
            MdpSpec::Random { states, actions, .. } => format!("random{states}x{actions}-{short}"),
        }
    }

    pub fn build(&self) -> Result<FiniteMdp> {
        match self {
            MdpSpec::Grid { width, height, slip, gamma, walls } => {
                let mut mdp = build_gridworld(*width, *height, *slip, walls, *gamma)?;
                mdp.spec = Some(self.clone());
                Ok(mdp)
            }
            MdpSpec::Random { states, actions, gamma, seed } => {
                let mut mdp = random_mdp(*states, *actions, *gamma, *seed)?;
                mdp.spec = Some(self.clone());
                Ok(mdp)
            }
        }
    }
}

/// Cell layout of a gridworld.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    /// `(x, y)` of every state, in state-index order.
    pub cells: Vec<(usize, usize)>,
}

impl GridLayout {
    pub fn state_at(&self, x: usize, y: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (x, y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transition: Vec<f64>,
    pub gamma: f64,
    /// Per-state coordinates in `[0, 1]`, one row per state.
    pub state_features: Array2,
    pub grid: Option<GridLayout>,
    pub spec: Option<MdpSpec>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        gamma: f64,
        state_features: Array2,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states {
            return Err(FbError::Dimension(format!(
                "transition tensor of length {} for {} states and {} actions",
                transition.len(),
                n_states,
                n_actions
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(FbError::Construction(format!("gamma {gamma} outside (0, 1)")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(FbError::Construction(format!(
                        "P[{s}][{a}] is not a probability vector"
                    )));
                }
            }
        }
        if state_features.rows() != n_states {
            return Err(FbError::Dimension(format!(
                "{} feature rows for {} states",
                state_features.rows(),
                n_states
            )));
        }
        Ok(Self { n_states, n_actions, transition, gamma, state_features, grid: None, spec: None })
    }

    pub fn id(&self) -> String {
        self.spec.as_ref().map_or_else(|| format!("mdp{}x{}", self.n_states, self.n_actions), MdpSpec::id)
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut (impl Rng + ?Sized)) -> usize {
        sample_categorical(self.next_dist(s, a), rng)
    }

    /// `P_π[s][s'] = Σ_a π(a|s) P[s][a][s']`.
    pub fn policy_transition(&self, policy: &TabularPolicy) -> Array2 {
        let n = self.n_states;
        let mut out = Array2::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (o, &p) in out.row_mut(s).iter_mut().zip(self.next_dist(s, a)) {
                    *o += pa * p;
                }
            }
        }
        out
    }
}

/// Draws an index from unnormalized-free probabilities by inversion.
pub fn sample_categorical(probs: &[f64], rng: &mut (impl Rng + ?Sized)) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Four-action gridworld. Actions are up `(0,+1)`, down `(0,−1)`, left
/// `(−1,0)`, right `(+1,0)`. The intended move happens with probability
/// `1 − slip`; otherwise one of the three other moves, uniformly. Moves into
/// a wall or off the grid leave the agent in place.
pub fn build_gridworld(
    width: usize,
    height: usize,
    slip: f64,
    walls: &BTreeSet<(usize, usize)>,
    gamma: f64,
) -> Result<FiniteMdp> {
    if width < 2 || height < 2 {
        return Err(FbError::Construction(format!("grid {width}x{height} is smaller than 2x2")));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(FbError::Construction(format!("slip probability {slip} outside [0, 1)")));
    }
    let mut cells = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !walls.contains(&(x, y)) {
                cells.push((x, y));
            }
        }
    }
    if cells.is_empty() {
        return Err(FbError::Construction("every cell is a wall".into()));
    }
    let layout = GridLayout { width, height, cells };
    let n = layout.cells.len();
    let mut transition = vec![0.0; n * 4 * n];
    for (s, &(x, y)) in layout.cells.iter().enumerate() {
        let dest = |m: usize| -> usize {
            let (dx, dy) = MOVES[m];
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                return s;
            }
            layout.state_at(nx as usize, ny as usize).unwrap_or(s)
        };
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            for m in 0..4 {
                let p = if m == a { 1.0 - slip } else { slip / 3.0 };
                row[dest(m)] += p;
            }
        }
    }
    let features = Array2::from_fn(n, 2, |s, j| {
        let (x, y) = layout.cells[s];
        if j == 0 {
            x as f64 / (width - 1) as f64
        } else {
            y as f64 / (height - 1) as f64
        }
    });
    let mut mdp = FiniteMdp::new(n, 4, transition, gamma, features)?;
    mdp.grid = Some(layout);
    Ok(mdp)
}

/// Dense random MDP: each `P[s][a]` is a normalized vector of uniform draws.
/// Features place the states evenly on `[0, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<FiniteMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(FbError::Construction("random mdp needs at least one state and action".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Put the rounding residue on the largest entry so rows sum to 1.
        let err = 1.0 - row.iter().sum::<f64>();
        let imax = (0..n_states).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
        row[imax] += err;
        transition.extend(row);
    }
    let denom = (n_states.max(2) - 1) as f64;
    let features = Array2::from_fn(n_states, 2, |s, j| if j == 0 { s as f64 / denom } else { 0.5 });
    FiniteMdp::new(n_states, n_actions, transition, gamma, features)
}

/// State-based reward `r(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardFn {
    pub values: Vec<f64>,
}

impl RewardFn {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FbError::contract("reward values must be finite"));
        }
        Ok(Self { values })
    }

    pub fn goal(n_states: usize, goal: usize) -> Self {
        let mut values = vec![0.0; n_states];
        values[goal] = 1.0;
        Self { values }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * alpha).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Stochastic tabular policy, one probability row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub probs: Array2,
}

impl TabularPolicy {
    pub fn new(probs: Array2) -> Result<Self> {
        for s in 0..probs.rows() {
            let r = probs.row(s);
            if r.iter().any(|&p| !(p >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(FbError::contract(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::filled(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Self {
            probs: Array2::from_fn(actions.len(), n_actions, |s, a| if actions[s] == a { 1.0 } else { 0.0 }),
        }
    }

    /// Greedy in `q` with lowest-index tie-breaking.
    pub fn greedy(q: &Array2) -> Self {
        let actions: Vec<usize> = (0..q.rows()).map(|s| argmax(q.row(s))).collect();
        Self::deterministic(&actions, q.cols())
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs.get(s, a)
    }

    pub fn n_states(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.cols()
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|s| argmax(self.probs.row(s))).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `M[s0][a0][s']` for one policy, flattened over `(s0, a0)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessorMeasureExact {
    pub n_states: usize,
    pub n_actions: usize,
    /// `(n_states·n_actions) × n_states`.
    pub m: Array2,
}

impl SuccessorMeasureExact {
    #[inline]
    pub fn get(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.m.get(s * self.n_actions + a, s_next)
    }
}

fn to_dmatrix(a: &Array2) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2 {
    Array2::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `M = γ P (I − γ P_π)^{-1}` by a direct LU solve.
pub fn successor_measure_exact(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<SuccessorMeasureExact> {
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(FbError::Dimension(format!(
            "policy {}x{} for mdp with {} states and {} actions",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let n = mdp.n_states;
    let p_pi = mdp.policy_transition(policy);
    let a = DMatrix::<f64>::identity(n, n) - to_dmatrix(&p_pi) * mdp.gamma;
    let inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| FbError::Numeric { step: 0, what: "singular (I − γP_π)".into() })?;
    let p = DMatrix::from_row_slice(n * mdp.n_actions, n, &mdp.transition);
    let m = (p * inv) * mdp.gamma;
    Ok(SuccessorMeasureExact { n_states: n, n_actions: mdp.n_actions, m: from_dmatrix(&m) })
}

/// `Q[s][a] = Σ_{s'} M[s][a][s'] r[s']`.
pub fn q_function_exact(mdp: &FiniteMdp, policy: &TabularPolicy, r: &RewardFn) -> Result<Array2> {
    if r.values.len() != mdp.n_states {
        return Err(FbError::Dimension(format!(
            "reward of length {} for {} states",
            r.values.len(),
            mdp.n_states
        )));
    }
    let m = successor_measure_exact(mdp, policy)?;
    Ok(q_from_measure(&m, r))
}

pub fn q_from_measure(m: &SuccessorMeasureExact, r: &RewardFn) -> Array2 {
    let rv = Array2::from_vec(r.values.len(), 1, r.values.clone()).expect("column");
    let q = m.m.matmul(&rv).expect("shape checked");
    Array2::from_vec(m.n_states, m.n_actions, q.into_vec()).expect("reshape")
}

fn bellman_backup(mdp: &FiniteMdp, r: &RewardFn, q: &Array2) -> Array2 {
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| r.values[s] + q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Array2::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        mdp.gamma * mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
    })
}

/// Optimal `Q*` by iterating `Q ← γ Σ P (r + max Q)` until the sup-norm
/// change drops below `tol`; returns the greedy policy alongside.
pub fn value_iteration(mdp: &FiniteMdp, r: &RewardFn, tol: f64) -> Result<(Array2, TabularPolicy)> {
    if !(tol > 0.0) {
        return Err(FbError::contract(format!("value iteration tolerance {tol} must be positive")));
    }
    if r.values.len() != mdp.n_states {
        return Err(FbError::Dimension(format!("reward of length {} for {} states", r.values.len(), mdp.n_states)));
    }
    let mut q = Array2::zeros(mdp.n_states, mdp.n_actions);
    loop {
        let next = bellman_backup(mdp, r, &q);
        let delta = next.zip_map(&q, |a, b| (a - b).abs()).max_abs();
        q = next;
        if delta < tol {
            break;
        }
    }
    let pi = TabularPolicy::greedy(&q);
    Ok((q, pi))
}

/// Optimal `Σ_{t=1..H} γ^t r(s_t)` for every `(s, a)`.
pub fn finite_horizon_optimal_q(mdp: &FiniteMdp, r: &RewardFn, horizon: usize) -> Array2 {
    let mut q = Array2::zeros(mdp.n_states, mdp.n_actions);
    for _ in 0..horizon {
        q = bellman_backup(mdp, r, &q);
    }
    q
}

/// Exact `Σ_{t=1..H} γ^t E[r(s_t)]` under `policy` for every `(s, a)`.
pub fn finite_horizon_policy_q(mdp: &FiniteMdp, policy: &TabularPolicy, r: &RewardFn, horizon: usize) -> Array2 {
    let mut q = Array2::zeros(mdp.n_states, mdp.n_actions);
    for _ in 0..horizon {
        let v: Vec<f64> = (0..mdp.n_states)
            .map(|s| r.values[s] + (0..mdp.n_actions).map(|a| policy.prob(s, a) * q.get(s, a)).sum::<f64>())
            .collect();
        q = Array2::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
            mdp.gamma * mdp.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        });
    }
    q
}

/// Breadth-first distances (in moves) to `goal` on the slip-free grid graph.
pub fn grid_distances(mdp: &FiniteMdp, goal: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; mdp.n_states];
    dist[goal] = Some(0);
    let mut frontier = vec![goal];
    let mut d = 0;
    while !frontier.is_empty() {
        d += 1;
        let mut next = Vec::new();
        for s in 0..mdp.n_states {
            if dist[s].is_some() {
                continue;
            }
            let reaches = (0..mdp.n_actions).any(|a| {
                let (best, p) = mdp
                    .next_dist(s, a)
                    .iter()
                    .enumerate()
                    .fold((0, 0.0), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                p > 0.0 && frontier.contains(&best)
            });
            if reaches {
                dist[s] = Some(d);
                next.push(s);
            }
        }
        frontier = next;
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, slip: f64) -> FiniteMdp {
        build_gridworld(w, h, slip, &BTreeSet::new(), 0.9).unwrap()
    }

    #[test]
    fn right_from_origin_on_2x2() {
        let mdp = grid(2, 2, 0.0);
        let g = mdp.grid.as_ref().unwrap();
        let s = g.state_at(0, 0).unwrap();
        let t = g.state_at(1, 0).unwrap();
        assert_eq!(mdp.p(s, RIGHT, t), 1.0);
    }

    #[test]
    fn slippery_rows_normalize_and_shape() {
        let mdp = grid(5, 5, 0.3);
        assert_eq!((mdp.n_states, mdp.n_actions), (25, 4));
        assert_eq!(mdp.transition.len(), 25 * 4 * 25);
        for s in 0..25 {
            for a in 0..4 {
                assert!((mdp.next_dist(s, a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn walls_block_moves_and_all_walls_fail() {
        let walls: BTreeSet<_> = [(1, 0)].into_iter().collect();
        let mdp = build_gridworld(3, 2, 0.0, &walls, 0.9).unwrap();
        assert_eq!(mdp.n_states, 5);
        let g = mdp.grid.as_ref().unwrap();
        let s = g.state_at(0, 0).unwrap();
        assert_eq!(mdp.p(s, RIGHT, s), 1.0);
        let all: BTreeSet<_> = (0..2).flat_map(|x| (0..2).map(move |y| (x, y))).collect();
        assert!(matches!(build_gridworld(2, 2, 0.0, &all, 0.9), Err(FbError::Construction(_))));
        assert!(build_gridworld(1, 4, 0.0, &BTreeSet::new(), 0.9).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let walls: BTreeSet<_> = [(1, 2), (3, 3)].into_iter().collect();
        let spec = MdpSpec::Grid { width: 5, height: 4, slip: 0.1, gamma: 0.95, walls };
        assert_eq!(MdpSpec::parse_text(&spec.to_text()).unwrap(), spec);
        assert_eq!(MdpSpec::parse_line(&spec.to_line()).unwrap(), spec);
        let r = MdpSpec::Random { states: 4, actions: 2, gamma: 0.9, seed: 3 };
        assert_eq!(MdpSpec::parse_line(&r.to_line()).unwrap(), r);
        assert_ne!(spec.id(), r.id());
    }

    #[test]
    fn absorbing_state_mass_is_geometric() {
        // state 1 absorbing; state 0 moves to 1
        let t = vec![0.0, 1.0, 0.0, 1.0];
        let mdp = FiniteMdp::new(2, 1, t, 0.9, Array2::zeros(2, 2)).unwrap();
        let m = successor_measure_exact(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((m.get(1, 0, 1) - 0.9 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn successor_rows_conserve_mass() {
        let mdp = random_mdp(6, 3, 0.9, 1).unwrap();
        let m = successor_measure_exact(&mdp, &TabularPolicy::uniform(6, 3)).unwrap();
        for i in 0..m.m.rows() {
            assert!((m.m.row(i).iter().sum::<f64>() - 9.0).abs() < 1e-9);
            assert!(m.m.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn q_of_constant_rewards() {
        let mdp = grid(3, 3, 0.2);
        let pi = TabularPolicy::uniform(9, 4);
        let q0 = q_function_exact(&mdp, &pi, &RewardFn::new(vec![0.0; 9]).unwrap()).unwrap();
        assert_eq!(q0.max_abs(), 0.0);
        let q1 = q_function_exact(&mdp, &pi, &RewardFn::new(vec![1.0; 9]).unwrap()).unwrap();
        assert!(q1.data().iter().all(|v| (v - 9.0).abs() < 1e-9));
    }

    #[test]
    fn q_matches_truncated_bellman_rollout() {
        let mdp = random_mdp(5, 2, 0.9, 9).unwrap();
        let pi = TabularPolicy::new(Array2::from_fn(5, 2, |s, a| if a == 0 { 0.2 + 0.1 * s as f64 } else { 0.8 - 0.1 * s as f64 })).unwrap();
        let r = RewardFn::new(vec![0.3, -1.0, 2.0, 0.0, 0.7]).unwrap();
        let q = q_function_exact(&mdp, &pi, &r).unwrap();
        // Σ_{t=1..500} γ^t E[r(s_t)] by propagating the state distribution
        let p_pi = mdp.policy_transition(&pi);
        for s in 0..5 {
            for a in 0..2 {
                let mut dist = Array2::row_vector(mdp.next_dist(s, a));
                let mut total = 0.0;
                let mut disc = mdp.gamma;
                for _ in 0..500 {
                    total += disc * dist.data().iter().zip(&r.values).map(|(p, r)| p * r).sum::<f64>();
                    dist = dist.matmul(&p_pi).unwrap();
                    disc *= mdp.gamma;
                }
                assert!((q.get(s, a) - total).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn value_iteration_zero_reward_and_bellman_optimality() {
        let mdp = grid(4, 4, 0.1);
        let (q, _) = value_iteration(&mdp, &RewardFn::new(vec![0.0; 16]).unwrap(), 1e-10).unwrap();
        assert_eq!(q.max_abs(), 0.0);

        let r = RewardFn::goal(16, 5);
        let (qstar, pi) = value_iteration(&mdp, &r, 1e-12).unwrap();
        let q_pi = q_function_exact(&mdp, &pi, &r).unwrap();
        let backed = bellman_backup(&mdp, &r, &q_pi);
        assert!(backed.zip_map(&q_pi, |a, b| (a - b).abs()).max_abs() < 1e-9);
        assert!(qstar.zip_map(&q_pi, |a, b| (a - b).abs()).max_abs() < 1e-9);
        assert!(value_iteration(&mdp, &r, 0.0).is_err());
    }

    #[test]
    fn optimal_policy_follows_shortest_paths() {
        let mdp = grid(5, 5, 0.0);
        let g = mdp.grid.clone().unwrap();
        let goal = g.state_at(3, 1).unwrap();
        let (q, pi) = value_iteration(&mdp, &RewardFn::goal(25, goal), 1e-12).unwrap();
        let dist = grid_distances(&mdp, goal);
        for s in 0..25 {
            if s == goal {
                continue;
            }
            let a = pi.greedy_actions()[s];
            let next = (0..25).find(|&t| mdp.p(s, a, t) == 1.0).unwrap();
            assert_eq!(dist[next].unwrap() + 1, dist[s].unwrap(), "state {s}");
            // value decays geometrically with distance
            let v = q.row(s).iter().cloned().fold(f64::MIN, f64::max);
            let v_next = q.row(next).iter().cloned().fold(f64::MIN, f64::max);
            if next != goal {
                assert!((v - 0.9 * v_next).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn finite_horizon_oracles_agree_for_optimal_policy() {
        let mdp = grid(3, 3, 0.1);
        let r = RewardFn::goal(9, 8);
        let qh = finite_horizon_optimal_q(&mdp, &r, 300);
        let (qstar, pi) = value_iteration(&mdp, &r, 1e-13).unwrap();
        assert!(qh.zip_map(&qstar, |a, b| (a - b).abs()).max_abs() < 1e-9);
        let qp = finite_horizon_policy_q(&mdp, &pi, &r, 300);
        assert!(qp.zip_map(&qstar, |a, b| (a - b).abs()).max_abs() < 1e-9);
    }
}
