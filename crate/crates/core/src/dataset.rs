//! Offline transition datasets: collection, minibatch sampling and the
//! plain-text dataset file.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FbError, Result};
use crate::mdp::{argmax, FiniteMdp, MdpSpec, RewardFn};

pub const DATASET_MAGIC: &str = "FBDATA v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    /// Empirical distribution of `s_next`.
    pub rho: Vec<f64>,
    pub source_mdp_id: String,
    pub mdp_spec: Option<MdpSpec>,
    pub collector: String,
    pub seed: u64,
}

impl OfflineDataset {
    pub fn new(
        transitions: Vec<Transition>,
        n_states: usize,
        source_mdp_id: String,
        mdp_spec: Option<MdpSpec>,
        collector: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if let Some(t) = transitions.iter().find(|t| t.s >= n_states || t.s_next >= n_states) {
            return Err(FbError::contract(format!("transition {t:?} outside {n_states} states")));
        }
        let rho = empirical_rho(&transitions, n_states);
        Ok(Self { transitions, rho, source_mdp_id, mdp_spec, collector: collector.into(), seed })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.rho.len()
    }

    /// Visit counts of `s_next` per state.
    pub fn next_state_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.rho.len()];
        for t in &self.transitions {
            c[t.s_next] += 1;
        }
        c
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 * self.transitions.len() + 256);
        let _ = writeln!(s, "{DATASET_MAGIC}");
        let _ = writeln!(s, "mdp_id = {}", self.source_mdp_id);
        if let Some(spec) = &self.mdp_spec {
            let _ = writeln!(s, "mdp = {}", spec.to_line());
        }
        let _ = writeln!(s, "states = {}", self.rho.len());
        let _ = writeln!(s, "collector = {}", self.collector);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "count = {}", self.transitions.len());
        let _ = writeln!(s, "# s a s_next");
        for t in &self.transitions {
            let _ = writeln!(s, "{} {} {}", t.s, t.a, t.s_next);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| FbError::Parse { source_name: "dataset".into(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == DATASET_MAGIC => {}
            Some((_, l)) => return Err(FbError::Format(format!("not a dataset file (header `{l}`)"))),
            None => return Err(FbError::Format("empty dataset file".into())),
        }
        let mut mdp_id = None;
        let mut spec = None;
        let mut states = None;
        let mut collector = String::from("unknown");
        let mut seed = 0u64;
        let mut count = None;
        let mut transitions = Vec::new();
        for (i, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "mdp_id" => mdp_id = Some(v.to_string()),
                    "mdp" => spec = Some(MdpSpec::parse_line(v)?),
                    "states" => states = Some(v.parse::<usize>().map_err(|e| err(i + 1, e.to_string()))?),
                    "collector" => collector = v.to_string(),
                    "seed" => seed = v.parse().map_err(|_| err(i + 1, format!("bad seed `{v}`")))?,
                    "count" => count = Some(v.parse::<usize>().map_err(|e| err(i + 1, e.to_string()))?),
                    other => return Err(err(i + 1, format!("unknown header key `{other}`"))),
                }
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next(), it.next()) {
                (Some(Ok(s)), Some(Ok(a)), Some(Ok(s_next)), None) => transitions.push(Transition { s, a, s_next }),
                _ => return Err(err(i + 1, format!("bad transition line `{line}`"))),
            }
        }
        let n_states = states.ok_or_else(|| FbError::Format("dataset header lacks `states`".into()))?;
        if let Some(c) = count {
            if c != transitions.len() {
                return Err(FbError::Format(format!("header count {c} but {} transitions", transitions.len())));
            }
        }
        let id = mdp_id.unwrap_or_else(|| "unknown".into());
        Self::new(transitions, n_states, id, spec, collector, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| FbError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| FbError::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn empirical_rho(transitions: &[Transition], n_states: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_states];
    for t in transitions {
        counts[t.s_next] += 1;
    }
    let n = transitions.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// A source of offline data for an MDP.
pub trait Collector {
    fn name(&self) -> &'static str;
    fn collect(&self, mdp: &FiniteMdp, seed: u64) -> Result<OfflineDataset>;
}

/// Uniformly random `(s, a)` pairs, `s' ~ P(·|s, a)`.
pub struct UniformCollector {
    pub n: usize,
}

impl Collector for UniformCollector {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn collect(&self, mdp: &FiniteMdp, seed: u64) -> Result<OfflineDataset> {
        collect_uniform(mdp, self.n, seed)
    }
}

/// Pooled training trajectories of one ε-greedy tabular Q-learner per reward.
pub struct MoodCollector {
    pub rewards: Vec<RewardFn>,
    pub steps_per_task: usize,
    /// Linear ε schedule `(start, end)` over `steps_per_task`.
    pub epsilon: (f64, f64),
    pub episode_len: usize,
    pub learning_rate: f64,
}

impl MoodCollector {
    pub fn new(rewards: Vec<RewardFn>, steps_per_task: usize) -> Self {
        Self { rewards, steps_per_task, epsilon: (1.0, 0.05), episode_len: 50, learning_rate: 0.5 }
    }
}

impl Collector for MoodCollector {
    fn name(&self) -> &'static str {
        "mood"
    }

    fn collect(&self, mdp: &FiniteMdp, seed: u64) -> Result<OfflineDataset> {
        if self.rewards.is_empty() {
            return Err(FbError::contract("mood collection needs at least one training reward"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(self.rewards.len() * self.steps_per_task);
        for r in &self.rewards {
            q_learning_run(mdp, r, self, &mut rng, &mut transitions);
        }
        OfflineDataset::new(transitions, mdp.n_states, mdp.id(), mdp.spec.clone(), self.name(), seed)
    }
}

pub fn collect_uniform(mdp: &FiniteMdp, n: usize, seed: u64) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(FbError::contract("uniform collection needs n ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..n)
        .map(|_| {
            let s = rng.gen_range(0..mdp.n_states);
            let a = rng.gen_range(0..mdp.n_actions);
            Transition { s, a, s_next: mdp.sample_next(s, a, &mut rng) }
        })
        .collect();
    OfflineDataset::new(transitions, mdp.n_states, mdp.id(), mdp.spec.clone(), "uniform", seed)
}

pub fn collect_mood(
    mdp: &FiniteMdp,
    training_rewards: &[RewardFn],
    steps_per_task: usize,
    epsilon_schedule: (f64, f64),
    seed: u64,
) -> Result<OfflineDataset> {
    let mut c = MoodCollector::new(training_rewards.to_vec(), steps_per_task);
    c.epsilon = epsilon_schedule;
    c.collect(mdp, seed)
}

fn q_learning_run(
    mdp: &FiniteMdp,
    r: &RewardFn,
    cfg: &MoodCollector,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Transition>,
) {
    let (na, ns) = (mdp.n_actions, mdp.n_states);
    let mut q = vec![0.0; ns * na];
    let mut s = rng.gen_range(0..ns);
    let span = cfg.steps_per_task.saturating_sub(1).max(1) as f64;
    let mut order: Vec<usize> = (0..na).collect();
    for step in 0..cfg.steps_per_task {
        if step > 0 && cfg.episode_len > 0 && step % cfg.episode_len == 0 {
            s = rng.gen_range(0..ns);
        }
        let frac = step as f64 / span;
        let eps = cfg.epsilon.0 + (cfg.epsilon.1 - cfg.epsilon.0) * frac;
        let a = if rng.gen::<f64>() < eps {
            rng.gen_range(0..na)
        } else {
            // random tie-breaking among maximizers
            order.shuffle(rng);
            let row = &q[s * na..(s + 1) * na];
            let permuted: Vec<f64> = order.iter().map(|&i| row[i]).collect();
            order[argmax(&permuted)]
        };
        let s_next = mdp.sample_next(s, a, rng);
        let v_next = q[s_next * na..(s_next + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let target = r.values[s_next] + mdp.gamma * v_next;
        q[s * na + a] += cfg.learning_rate * (target - q[s * na + a]);
        out.push(Transition { s, a, s_next });
        s = s_next;
    }
}

/// `i·j` transitions laid out group-major (`i` groups of `j`), plus `i·j`
/// independent draws from ρ.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub transitions: Vec<Transition>,
    pub rho_states: Vec<usize>,
    pub groups: usize,
    pub group_size: usize,
}

impl Minibatch {
    pub fn group(&self, g: usize) -> &[Transition] {
        &self.transitions[g * self.group_size..(g + 1) * self.group_size]
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// With-replacement minibatch. The ρ-states are next-states of uniformly drawn
/// transitions, which is exactly a draw from the empirical ρ.
pub fn sample_minibatch(ds: &OfflineDataset, i: usize, j: usize, rng: &mut impl Rng) -> Result<Minibatch> {
    if ds.is_empty() {
        return Err(FbError::contract("cannot sample from an empty dataset"));
    }
    let n = i * j;
    let transitions = (0..n).map(|_| ds.transitions[rng.gen_range(0..ds.len())]).collect();
    let rho_states = (0..n).map(|_| ds.transitions[rng.gen_range(0..ds.len())].s_next).collect();
    Ok(Minibatch { transitions, rho_states, groups: i, group_size: j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_gridworld;
    use std::collections::BTreeSet;

    fn grid5() -> FiniteMdp {
        MdpSpec::grid(5, 5, 0.1, 0.9).build().unwrap()
    }

    #[test]
    fn uniform_covers_pairs_evenly() {
        let mdp = grid5();
        let ds = collect_uniform(&mdp, 1000, 4).unwrap();
        let mut counts = vec![0.0; 100];
        for t in &ds.transitions {
            counts[t.s * 4 + t.a] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 10.0) * (c - 10.0) / 10.0).sum();
        // 99 degrees of freedom: the p = 0.001 critical value is about 148.2
        assert!(chi2 < 148.2, "chi-square {chi2}");
    }

    #[test]
    fn collection_is_deterministic() {
        let mdp = grid5();
        assert_eq!(collect_uniform(&mdp, 300, 9).unwrap(), collect_uniform(&mdp, 300, 9).unwrap());
        let rewards = vec![RewardFn::goal(25, 0), RewardFn::goal(25, 24)];
        let a = collect_mood(&mdp, &rewards, 400, (1.0, 0.05), 2).unwrap();
        let b = collect_mood(&mdp, &rewards, 400, (1.0, 0.05), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 800);
    }

    #[test]
    fn single_transition_gives_point_mass() {
        let ds = collect_uniform(&grid5(), 1, 0).unwrap();
        assert_eq!(ds.len(), 1);
        let s = ds.transitions[0].s_next;
        assert_eq!(ds.rho[s], 1.0);
        assert_eq!(ds.rho.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rho_matches_frequencies() {
        let ds = collect_uniform(&grid5(), 777, 1).unwrap();
        let counts = ds.next_state_counts();
        for (s, &c) in counts.iter().enumerate() {
            assert_eq!(ds.rho[s], c as f64 / 777.0);
            assert_eq!(ds.rho[s] > 0.0, c > 0);
        }
        assert!((ds.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mood_concentrates_near_goals() {
        let mdp = grid5();
        let g = mdp.grid.clone().unwrap();
        let (c0, c1) = (g.state_at(0, 0).unwrap(), g.state_at(4, 4).unwrap());
        let ds = collect_mood(&mdp, &[RewardFn::goal(25, c0), RewardFn::goal(25, c1)], 5000, (1.0, 0.05), 3).unwrap();
        let near = |s: usize| {
            let (x, y) = g.cells[s];
            (x + y <= 1) || (x + y >= 7)
        };
        let mood_mass: f64 = (0..25).filter(|&s| near(s)).map(|s| ds.rho[s]).sum();
        let uni = collect_uniform(&mdp, 10_000, 3).unwrap();
        let uni_mass: f64 = (0..25).filter(|&s| near(s)).map(|s| uni.rho[s]).sum();
        assert!(mood_mass > 1.5 * uni_mass, "mood {mood_mass} uniform {uni_mass}");
    }

    #[test]
    fn full_exploration_mood_is_a_random_walk() {
        // ε ≡ 1 never consults Q: actions are uniform along the walk.
        let mdp = build_gridworld(3, 3, 0.0, &BTreeSet::new(), 0.9).unwrap();
        let ds = collect_mood(&mdp, &[RewardFn::goal(9, 4)], 9000, (1.0, 1.0), 5).unwrap();
        let mut counts = [0.0; 4];
        for t in &ds.transitions {
            counts[t.a] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 2250.0) * (c - 2250.0) / 2250.0).sum();
        assert!(chi2 < 16.27, "chi-square {chi2}");
    }

    #[test]
    fn minibatch_layout_and_determinism() {
        let ds = collect_uniform(&grid5(), 200, 1).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = sample_minibatch(&ds, 1, 32, &mut r1).unwrap();
        let b = sample_minibatch(&ds, 1, 32, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.groups, a.group_size, a.len(), a.rho_states.len()), (1, 32, 32, 32));
        let c = sample_minibatch(&ds, 32, 1, &mut r1).unwrap();
        assert_eq!((c.groups, c.group_size), (32, 1));
        assert_eq!(c.group(5).len(), 1);
        let empty = OfflineDataset::new(vec![], 25, "x".into(), None, "none", 0).unwrap();
        assert!(matches!(sample_minibatch(&empty, 1, 2, &mut r1), Err(FbError::Contract(_))));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ds = collect_uniform(&grid5(), 50, 3).unwrap();
        let back = OfflineDataset::parse(&ds.to_text()).unwrap();
        assert_eq!(back, ds);
        assert!(OfflineDataset::parse("nope\n").is_err());
        let truncated = ds.to_text().replace("count = 50", "count = 51");
        assert!(OfflineDataset::parse(&truncated).is_err());
    }
}
