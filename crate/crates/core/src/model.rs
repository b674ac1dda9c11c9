//! Behavior models: the trained neural FB model and an exact tabular
//! factorization used as an oracle.

use std::collections::HashMap;

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{FbError, Result};
use crate::mdp::{successor_measure_exact, value_iteration, FiniteMdp, RewardFn};
use crate::networks::{BackwardNet, BlockLayout, ForwardEnsemble, Layered, PolicyNet};
use crate::tensor::{Array2, Tape};

/// What task inference and evaluation need from a model.
///
/// Rows of every input matrix pair with `states`. `B` reads the residual
/// normalized `z`; `F` and `π` read `z̄ = √d·z/‖z‖`.
pub trait BehaviorModel {
    fn layout(&self) -> &BlockLayout;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    fn rho(&self) -> &[f64];
    /// `B(s, z_in)`, `n×d`.
    fn backward(&self, states: &[usize], z_in: &Array2) -> Result<Array2>;
    /// `F_m(s, ·, z̄)` per ensemble member, each `n×(A·d)`.
    fn forward(&self, states: &[usize], z_bar: &Array2) -> Result<Vec<Array2>>;
    /// `π(·|s, z̄)`, `n×A`.
    fn policy(&self, states: &[usize], z_bar: &Array2) -> Result<Array2>;

    fn d(&self) -> usize {
        self.layout().d()
    }
}

/// Neural FB model with Polyak targets for `F` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbModel {
    pub layout: BlockLayout,
    pub n_actions: usize,
    pub gamma: f64,
    pub hidden: usize,
    /// Per-state network input, `S×enc_dim`.
    pub encoding: Array2,
    pub rho: Vec<f64>,
    pub forward: ForwardEnsemble,
    pub backward: BackwardNet,
    pub backward_target: BackwardNet,
    pub policy: PolicyNet,
    pub config_text: String,
    pub config_hash: String,
}

impl FbModel {
    pub fn new(cfg: &TrainConfig, encoding: Array2, rho: Vec<f64>, n_actions: usize, rng: &mut impl Rng) -> Result<Self> {
        let layout = cfg.layout()?;
        if rho.len() != encoding.rows() {
            return Err(FbError::Dimension(format!("rho has {} states, encoding {}", rho.len(), encoding.rows())));
        }
        let (enc, d) = (encoding.cols(), layout.d());
        let forward = ForwardEnsemble::new(cfg.ensemble_m, enc, d, n_actions, cfg.hidden, rng)?;
        let backward = BackwardNet::new(layout.clone(), enc, cfg.hidden, rng)?;
        let policy = PolicyNet::new(enc, d, n_actions, cfg.hidden, rng);
        Ok(Self {
            layout,
            n_actions,
            gamma: cfg.gamma,
            hidden: cfg.hidden,
            encoding,
            rho,
            forward,
            backward_target: backward.clone(),
            backward,
            policy,
            config_text: cfg.to_text(),
            config_hash: cfg.hash(),
        })
    }

    pub fn zero_grad(&mut self) {
        for f in self.forward.members.iter_mut().chain(self.forward.targets.iter_mut()) {
            f.zero_grad();
        }
        self.backward.zero_grad();
        self.backward_target.zero_grad();
        self.policy.zero_grad();
    }

    pub fn enc(&self, states: &[usize]) -> Array2 {
        self.encoding.gather_rows(states)
    }

    pub fn eval_backward(&self, states: &[usize], z_in: &Array2, target: bool) -> Result<Array2> {
        let net = if target { &self.backward_target } else { &self.backward };
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let e = t.constant(self.enc(states));
        let z = t.constant(z_in.clone());
        let o = net.forward(&mut t, &b, e, z)?;
        Ok(t.value(o).clone())
    }

    pub fn eval_forward(&self, member: usize, target: bool, states: &[usize], z_bar: &Array2) -> Result<Array2> {
        let net = if target { &self.forward.targets[member] } else { &self.forward.members[member] };
        let mut t = Tape::new();
        let b = net.bind(&mut t, false);
        let e = t.constant(self.enc(states));
        let z = t.constant(z_bar.clone());
        let o = net.forward(&mut t, &b, e, z)?;
        Ok(t.value(o).clone())
    }

    pub fn eval_policy(&self, states: &[usize], z_bar: &Array2) -> Result<Array2> {
        let mut t = Tape::new();
        let b = self.policy.bind(&mut t, false);
        let e = t.constant(self.enc(states));
        let z = t.constant(z_bar.clone());
        let lp = self.policy.log_probs(&mut t, &b, e, z)?;
        Ok(t.value(lp).map(f64::exp))
    }
}

impl BehaviorModel for FbModel {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn n_states(&self) -> usize {
        self.encoding.rows()
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn rho(&self) -> &[f64] {
        &self.rho
    }

    fn backward(&self, states: &[usize], z_in: &Array2) -> Result<Array2> {
        self.eval_backward(states, z_in, false)
    }

    fn forward(&self, states: &[usize], z_bar: &Array2) -> Result<Vec<Array2>> {
        (0..self.forward.len()).map(|m| self.eval_forward(m, false, states, z_bar)).collect()
    }

    fn policy(&self, states: &[usize], z_bar: &Array2) -> Result<Array2> {
        self.eval_policy(states, z_bar)
    }
}

/// Exact rank-`|S|` factorization of an MDP's successor measures with
/// `ρ`-orthonormal features: `B(s) = e_s/√ρ(s)`, so `z_r = √ρ ⊙ r` and
/// `B(s)ᵀz_r = r(s)`, and `F(s, a, z)_t = M^{π_z}(s, a, t)/(γ√ρ(t))` with
/// `π_z` optimal for the reward `z/√ρ`. Then `γ·F(z)ᵀB·diag(ρ) = M^{π_z}`.
pub struct ExactFb {
    mdp: FiniteMdp,
    layout: BlockLayout,
    rho: Vec<f64>,
}

struct ExactTask {
    /// `S × (A·d)`
    f: Array2,
    /// `S × A`
    probs: Array2,
}

impl ExactFb {
    pub fn new(mdp: &FiniteMdp, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != mdp.n_states || rho.iter().any(|&p| !(p > 0.0)) {
            return Err(FbError::contract("exact factorization needs ρ(s) > 0 for every state"));
        }
        Ok(Self { mdp: mdp.clone(), layout: BlockLayout::equal(mdp.n_states, 1)?, rho })
    }

    fn task(&self, z: &[f64]) -> Result<ExactTask> {
        let (ns, na) = (self.mdp.n_states, self.mdp.n_actions);
        let r: Vec<f64> = z.iter().zip(&self.rho).map(|(z, p)| z / p.sqrt()).collect();
        let (_, policy) = value_iteration(&self.mdp, &RewardFn::new(r)?, 1e-13)?;
        let m = successor_measure_exact(&self.mdp, &policy)?;
        let g = self.mdp.gamma;
        let f = Array2::from_fn(ns, na * ns, |s, c| m.get(s, c / ns, c % ns) / (g * self.rho[c % ns].sqrt()));
        Ok(ExactTask { f, probs: policy.probs.clone() })
    }

    fn per_row<T>(&self, states: &[usize], z: &Array2, mut pick: impl FnMut(&ExactTask, usize) -> T) -> Result<Vec<T>> {
        let mut cache: HashMap<Vec<u64>, ExactTask> = HashMap::new();
        let mut out = Vec::with_capacity(states.len());
        for (i, &s) in states.iter().enumerate() {
            let key: Vec<u64> = z.row(i).iter().map(|x| x.to_bits()).collect();
            if !cache.contains_key(&key) {
                cache.insert(key.clone(), self.task(z.row(i))?);
            }
            out.push(pick(&cache[&key], s));
        }
        Ok(out)
    }
}

impl BehaviorModel for ExactFb {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    fn rho(&self) -> &[f64] {
        &self.rho
    }

    fn backward(&self, states: &[usize], _z_in: &Array2) -> Result<Array2> {
        let ns = self.mdp.n_states;
        Ok(Array2::from_fn(states.len(), ns, |i, c| if c == states[i] { 1.0 / self.rho[c].sqrt() } else { 0.0 }))
    }

    fn forward(&self, states: &[usize], z_bar: &Array2) -> Result<Vec<Array2>> {
        let rows = self.per_row(states, z_bar, |t, s| t.f.row(s).to_vec())?;
        Ok(vec![Array2::from_rows(&rows)?])
    }

    fn policy(&self, states: &[usize], z_bar: &Array2) -> Result<Array2> {
        let rows = self.per_row(states, z_bar, |t, s| t.probs.row(s).to_vec())?;
        Array2::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neural_model_shapes() {
        let cfg = TrainConfig::preset("aware").unwrap();
        let mdp = MdpSpec::grid(3, 3, 0.1, 0.9).build().unwrap();
        let enc = crate::networks::state_encoding(&mdp.state_features, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = FbModel::new(&cfg, enc, vec![1.0 / 9.0; 9], 4, &mut rng).unwrap();
        let z = Array2::filled(2, 16, 1.0);
        assert_eq!(m.backward(&[0, 8], &z).unwrap().shape(), (2, 16));
        let f = m.forward(&[0, 8], &z).unwrap();
        assert_eq!((f.len(), f[0].shape()), (2, (2, 64)));
        assert_eq!(m.policy(&[0, 8], &z).unwrap().shape(), (2, 4));
        assert_eq!(m.eval_backward(&[3], &z.gather_rows(&[0]), true).unwrap(), m.backward(&[3], &z.gather_rows(&[0])).unwrap());
    }

    #[test]
    fn exact_model_reconstructs_successor_measure() {
        let mdp = MdpSpec::grid(3, 3, 0.1, 0.9).build().unwrap();
        let rho = vec![1.0 / 9.0; 9];
        let ex = ExactFb::new(&mdp, rho.clone()).unwrap();
        let r = RewardFn::goal(9, 8);
        let z = Array2::from_rows(&[r.values.clone()]).unwrap();
        let states: Vec<usize> = (0..9).collect();
        let zs = Array2::from_fn(9, 9, |_, c| z.get(0, c));
        let f = &ex.forward(&states, &zs).unwrap()[0];
        let b = ex.backward(&states, &zs).unwrap();
        let probs = ex.policy(&states, &zs).unwrap();
        let pol = crate::mdp::TabularPolicy::new(probs).unwrap();
        let m = successor_measure_exact(&mdp, &pol).unwrap();
        for s in 0..9 {
            for a in 0..4 {
                for t in 0..9 {
                    let fa: f64 = (0..9).map(|i| f.get(s, a * 9 + i) * b.get(t, i)).sum();
                    assert!((0.9 * fa * rho[t] - m.get(s, a, t)).abs() < 1e-12);
                }
            }
        }
        assert!(ExactFb::new(&mdp, vec![0.0; 9]).is_err());
    }
}
