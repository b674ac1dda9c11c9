//! Zero-shot task inference: linear projection, blockwise autoregressive
//! fixed point and goal prompting, plus the two-level feature construction
//! that encodes an arbitrary nonlinear task map.

use rand::Rng;

use crate::dataset::OfflineDataset;
use crate::error::{FbError, Result};
use crate::mdp::{FiniteMdp, RewardFn};
use crate::model::BehaviorModel;
use crate::networks::{normalize_z, residual_ar_normalize, residual_ar_normalize_prefix};
use crate::tensor::Array2;

pub const DEFAULT_INFERENCE_SAMPLES: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct InferredTask {
    /// `E[r·B(s, f_r(z))]` before normalization.
    pub raw: Vec<f64>,
    /// `√d · raw / ‖raw‖`, the input of `F` and `π`.
    pub normalized: Vec<f64>,
    /// `‖raw − Σ w r B(s, f_r(raw))‖` on the inference samples.
    pub residual: f64,
}

/// Weighted reward observations: the task vector is `Σ_j w_j r_j B(s_j, ·)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSamples {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RewardSamples {
    /// Equal weights `1/n`, as for samples drawn from ρ.
    pub fn from_states(states: Vec<usize>, r: &RewardFn) -> Self {
        let w = 1.0 / states.len().max(1) as f64;
        let rewards = states.iter().map(|&s| r.values[s]).collect();
        let weights = vec![w; states.len()];
        Self { states, rewards, weights }
    }

    /// Every state with `ρ(s) > 0`, weighted by `ρ(s)`.
    pub fn exact(rho: &[f64], r: &RewardFn) -> Self {
        let states: Vec<usize> = (0..rho.len()).filter(|&s| rho[s] > 0.0).collect();
        let rewards = states.iter().map(|&s| r.values[s]).collect();
        let weights = states.iter().map(|&s| rho[s]).collect();
        Self { states, rewards, weights }
    }

    /// Next-states of the dataset: all of them when at most `max_n`,
    /// otherwise `max_n` drawn uniformly with replacement.
    pub fn from_dataset(ds: &OfflineDataset, r: &RewardFn, max_n: usize, rng: &mut impl Rng) -> Result<Self> {
        if ds.is_empty() {
            return Err(FbError::contract("cannot draw reward samples from an empty dataset"));
        }
        let states = if ds.len() <= max_n {
            ds.transitions.iter().map(|t| t.s_next).collect()
        } else {
            (0..max_n).map(|_| ds.transitions[rng.gen_range(0..ds.len())].s_next).collect()
        };
        Ok(Self::from_states(states, r))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn broadcast(z: &[f64], n: usize) -> Array2 {
    Array2::from_fn(n, z.len(), |_, c| z[c])
}

/// `Σ_j w_j r_j B(s_j, z_in)` over the columns `[start, end)`.
fn weighted_block(b: &Array2, samples: &RewardSamples, start: usize, end: usize) -> Vec<f64> {
    let mut out = vec![0.0; end - start];
    for (j, row) in (0..b.rows()).map(|j| (j, b.row(j))) {
        let c = samples.weights[j] * samples.rewards[j];
        if c == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(&row[start..end]) {
            *o += c * x;
        }
    }
    out
}

fn check_samples(model: &dyn BehaviorModel, samples: &RewardSamples) -> Result<()> {
    let n = samples.len();
    if n == 0 || samples.rewards.len() != n || samples.weights.len() != n {
        return Err(FbError::contract("reward samples must be non-empty with matching lengths"));
    }
    if let Some(&s) = samples.states.iter().find(|&&s| s >= model.n_states()) {
        return Err(FbError::contract(format!("sample state {s} outside {} states", model.n_states())));
    }
    Ok(())
}

/// Blockwise evaluation of `z_k = Σ w r B_k(s, f_r(z_{1:k−1}))`, one forward
/// pass per block, on a single fixed sample set.
pub fn infer_z_autoregressive(model: &dyn BehaviorModel, samples: &RewardSamples) -> Result<InferredTask> {
    check_samples(model, samples)?;
    let layout = model.layout().clone();
    let mut z = vec![0.0; layout.d()];
    for (k, (start, end)) in layout.ranges().into_iter().enumerate() {
        let z_in = residual_ar_normalize_prefix(&z, &layout, k)?;
        let b = model.backward(&samples.states, &broadcast(&z_in, samples.len()))?;
        z[start..end].copy_from_slice(&weighted_block(&b, samples, start, end));
        if k == 0 && z[start..end].iter().all(|&x| x == 0.0) {
            return Err(FbError::DegenerateTask("reward is orthogonal to the leading block of B".into()));
        }
    }
    finish(model, samples, z)
}

/// `z = Σ w r B(s)` for models whose `B` ignores `z`.
pub fn infer_z_linear(model: &dyn BehaviorModel, samples: &RewardSamples) -> Result<InferredTask> {
    check_samples(model, samples)?;
    let layout = model.layout();
    if layout.k() != 1 {
        return Err(FbError::contract(format!("linear inference needs K = 1, model has K = {}", layout.k())));
    }
    let d = layout.d();
    let b = model.backward(&samples.states, &Array2::zeros(samples.len(), d))?;
    let z = weighted_block(&b, samples, 0, d);
    if z.iter().all(|&x| x == 0.0) {
        return Err(FbError::DegenerateTask("reward is orthogonal to the features of B".into()));
    }
    finish(model, samples, z)
}

fn finish(model: &dyn BehaviorModel, samples: &RewardSamples, raw: Vec<f64>) -> Result<InferredTask> {
    let normalized = normalize_z(&raw)?;
    let residual = fixed_point_residual(model, samples, &raw)?;
    Ok(InferredTask { raw, normalized, residual })
}

/// `‖z − Σ w r B(s, f_r(z))‖`.
pub fn fixed_point_residual(model: &dyn BehaviorModel, samples: &RewardSamples, z: &[f64]) -> Result<f64> {
    let layout = model.layout();
    let z_in = residual_ar_normalize(z, layout)?;
    let b = model.backward(&samples.states, &broadcast(&z_in, samples.len()))?;
    let again = weighted_block(&b, samples, 0, layout.d());
    Ok(z.iter().zip(&again).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Blockwise `B` at a single state, `z_k = B_k(g, f_r(z_{1:k−1}))`.
pub fn infer_z_goal(model: &dyn BehaviorModel, goal: usize) -> Result<InferredTask> {
    if goal >= model.n_states() {
        return Err(FbError::contract(format!("goal {goal} outside {} states", model.n_states())));
    }
    let raw = blockwise_at_states(model, &[goal])?.row(0).to_vec();
    let samples = RewardSamples { states: vec![goal], rewards: vec![1.0], weights: vec![1.0] };
    finish(model, &samples, raw)
}

/// Blockwise `B` evaluated independently at each state, `n×d`.
pub fn blockwise_at_states(model: &dyn BehaviorModel, states: &[usize]) -> Result<Array2> {
    let layout = model.layout().clone();
    let n = states.len();
    let mut z = Array2::zeros(n, layout.d());
    for (k, (start, end)) in layout.ranges().into_iter().enumerate() {
        let mut z_in = Array2::zeros(n, layout.d());
        if k > 0 {
            for i in 0..n {
                let row = residual_ar_normalize_prefix(z.row(i), &layout, k)?;
                z_in.row_mut(i).copy_from_slice(&row);
            }
        }
        let b = model.backward(states, &z_in)?;
        for i in 0..n {
            z.row_mut(i)[start..end].copy_from_slice(&b.row(i)[start..end]);
        }
    }
    Ok(z)
}

/// Linear inference when `K = 1`, blockwise otherwise.
pub fn infer_z(model: &dyn BehaviorModel, samples: &RewardSamples) -> Result<InferredTask> {
    if model.layout().k() == 1 {
        infer_z_linear(model, samples)
    } else {
        infer_z_autoregressive(model, samples)
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out
}

/// `g_s(x) = ∫₀¹ ∂_s ζ(t·x) dt`, so that `ζ(x) = Σ_s g_s(x)·x_s` whenever
/// `ζ(0) = 0`. Returns `g` as `d × S`.
fn lemma_split(zeta: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Array2 {
    let d = zeta(x).len();
    let mut g = Array2::zeros(d, x.len());
    let h = 1e-3;
    for (t, wt) in gauss_legendre(12) {
        let y: Vec<f64> = x.iter().map(|v| t * v).collect();
        for s in 0..x.len() {
            let diff = |step: f64| {
                let mut p = y.clone();
                let mut m = y.clone();
                p[s] += step;
                m[s] -= step;
                let (fp, fm) = (zeta(&p), zeta(&m));
                fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect::<Vec<f64>>()
            };
            // Richardson extrapolation of central differences
            let (d1, d2) = (diff(h), diff(h / 2.0));
            for i in 0..d {
                let v = (4.0 * d2[i] - d1[i]) / 3.0;
                g.set(i, s, g.get(i, s) + wt * v);
            }
        }
    }
    g
}

/// Builds `B₁(s) = e_s/ρ(s)` and `B₂(s, z₁)_i = g_{is}(z₁)/ρ(s)`, infers
/// `z₁ = E_ρ[r·B₁]` and `z₂ = E_ρ[r·B₂(·, z₁)]` for each test reward, and
/// returns `max |z₂ − ζ(r)|`.
pub fn universal_approximation_check(
    mdp: &FiniteMdp,
    rho: &[f64],
    zeta: &dyn Fn(&[f64]) -> Vec<f64>,
    test_rewards: &[Vec<f64>],
) -> Result<f64> {
    let ns = mdp.n_states;
    if rho.len() != ns || rho.iter().any(|&p| !(p > 0.0)) {
        return Err(FbError::contract("the construction needs ρ(s) > 0 for every state"));
    }
    if zeta(&vec![0.0; ns]).iter().any(|v| v.abs() > 1e-12) {
        return Err(FbError::contract("the task map must send the zero reward to zero"));
    }
    let mut worst = 0.0f64;
    for r in test_rewards {
        if r.len() != ns {
            return Err(FbError::Dimension(format!("test reward has {} entries for {ns} states", r.len())));
        }
        let z1: Vec<f64> = (0..ns).map(|i| (0..ns).map(|s| rho[s] * r[s] * if i == s { 1.0 / rho[s] } else { 0.0 }).sum()).collect();
        let g = lemma_split(zeta, &z1);
        let target = zeta(r);
        for (i, want) in target.iter().enumerate() {
            let got: f64 = (0..ns).map(|s| rho[s] * r[s] * g.get(i, s) / rho[s]).sum();
            worst = worst.max((got - want).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::mdp::MdpSpec;
    use crate::model::{ExactFb, FbModel};
    use crate::networks::state_encoding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn neural(variant: &str, k: usize, seed: u64) -> FbModel {
        let mut cfg = TrainConfig::preset(variant).unwrap();
        cfg.blocks = k;
        cfg.d = 8;
        let mdp = MdpSpec::grid(4, 4, 0.1, 0.9).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FbModel::new(&cfg, state_encoding(&mdp.state_features, true), vec![1.0 / 16.0; 16], 4, &mut rng).unwrap()
    }

    fn random_reward(rng: &mut ChaCha8Rng, n: usize) -> RewardFn {
        RewardFn::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_block_autoregressive_equals_linear_bitwise() {
        let m = neural("vanilla", 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_reward(&mut rng, 16);
        let states: Vec<usize> = (0..200).map(|_| rng.gen_range(0..16)).collect();
        let samples = RewardSamples::from_states(states, &r);
        let a = infer_z_linear(&m, &samples).unwrap();
        let b = infer_z_autoregressive(&m, &samples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn autoregressive_fixed_point_is_exact() {
        let m = neural("aware", 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let r = random_reward(&mut rng, 16);
            let t = infer_z_autoregressive(&m, &RewardSamples::exact(&m.rho, &r)).unwrap();
            assert!(t.residual < 1e-10, "residual {}", t.residual);
            assert!((t.normalized.iter().map(|x| x * x).sum::<f64>() - 8.0).abs() < 1e-9);
        }
        assert!(infer_z_linear(&m, &RewardSamples::exact(&m.rho, &RewardFn::goal(16, 0))).is_err());
    }

    #[test]
    fn inference_is_scale_equivariant_blockwise() {
        let m = neural("aware", 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_reward(&mut rng, 16);
        let base = infer_z_autoregressive(&m, &RewardSamples::exact(&m.rho, &r)).unwrap();
        for alpha in [0.1, 10.0] {
            let t = infer_z_autoregressive(&m, &RewardSamples::exact(&m.rho, &r.scaled(alpha))).unwrap();
            for (a, b) in t.raw.iter().zip(&base.raw) {
                assert!((a - alpha * b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn zero_reward_is_degenerate() {
        let zero = RewardFn::new(vec![0.0; 16]).unwrap();
        for (v, k) in [("vanilla", 1), ("aware", 4)] {
            let m = neural(v, k, 7);
            let err = infer_z(&m, &RewardSamples::exact(&m.rho, &zero)).unwrap_err();
            assert!(matches!(err, FbError::DegenerateTask(_)));
        }
    }

    #[test]
    fn goal_inference_matches_scaled_indicator() {
        let m = neural("aware", 4, 8);
        let rho: Vec<f64> = (0..16).map(|s| (s + 1) as f64 / 136.0).collect();
        let m = FbModel { rho: rho.clone(), ..m };
        let goal = 6;
        let g = infer_z_goal(&m, goal).unwrap();
        let mut r = vec![0.0; 16];
        r[goal] = 1.0 / rho[goal];
        let t = infer_z_autoregressive(&m, &RewardSamples::exact(&rho, &RewardFn::new(r).unwrap())).unwrap();
        for (a, b) in g.raw.iter().zip(&t.raw) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(infer_z_goal(&m, goal).unwrap(), g);
        let k1 = neural("vanilla", 1, 9);
        let g1 = infer_z_goal(&k1, 3).unwrap();
        let b = k1.backward(&[3], &Array2::zeros(1, 8)).unwrap();
        assert_eq!(g1.normalized, normalize_z(b.row(0)).unwrap());
    }

    #[test]
    fn tabular_features_give_scaled_indicator() {
        let mdp = MdpSpec::grid(3, 3, 0.0, 0.9).build().unwrap();
        let rho: Vec<f64> = (0..9).map(|s| (s + 1) as f64 / 45.0).collect();
        let ex = ExactFb::new(&mdp, rho.clone()).unwrap();
        let samples = RewardSamples::exact(&rho, &RewardFn::goal(9, 4));
        let t = infer_z_linear(&ex, &samples).unwrap();
        // B = e_s/√ρ(s) makes z = √ρ ⊙ r
        assert!((t.raw[4] - rho[4].sqrt()).abs() < 1e-15);
        assert!(t.raw.iter().enumerate().all(|(i, &v)| i == 4 || v == 0.0));
    }

    #[test]
    fn sample_error_shrinks_with_more_samples() {
        let m = neural("vanilla", 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_reward(&mut rng, 16);
        let exact = infer_z_linear(&m, &RewardSamples::exact(&m.rho, &r)).unwrap().raw;
        let err = |n: usize, rng: &mut ChaCha8Rng| {
            let mut total = 0.0;
            for _ in 0..40 {
                let states: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
                let z = infer_z_linear(&m, &RewardSamples::from_states(states, &r)).unwrap().raw;
                total += z.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
            total / 40.0
        };
        let (e1, e4) = (err(100, &mut rng), err(400, &mut rng));
        // 1/√n predicts a ratio of 2
        assert!(e1 / e4 > 1.5 && e1 / e4 < 2.7, "ratio {}", e1 / e4);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre(12);
        let integral: f64 = q.iter().map(|(t, w)| w * t.powi(7)).sum();
        assert!((integral - 0.125).abs() < 1e-14);
    }

    #[test]
    fn two_level_construction() {
        let mdp = crate::mdp::random_mdp(4, 2, 0.9, 1).unwrap();
        let rho = vec![0.1, 0.2, 0.3, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rewards: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let linear = |r: &[f64]| vec![r[0] - 2.0 * r[3], 0.5 * r[1] + r[2]];
        assert!(universal_approximation_check(&mdp, &rho, &linear, &rewards).unwrap() < 1e-10);
        let quad = |r: &[f64]| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| n * x / 2.0).collect()
        };
        assert!(universal_approximation_check(&mdp, &rho, &quad, &rewards).unwrap() < 1e-8);
        let shifted = |r: &[f64]| vec![r[0] + 1.0];
        assert!(universal_approximation_check(&mdp, &rho, &shifted, &rewards).is_err());
        assert!(universal_approximation_check(&mdp, &[0.5, 0.5, 0.0, 0.0], &linear, &rewards).is_err());
    }
}
