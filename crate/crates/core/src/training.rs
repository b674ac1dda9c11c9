//! FB training: the measure-Bellman and orthonormality loss kernels, the z
//! sampling mixture, the variant registry and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{MemberIndexing, TrainConfig};
use crate::dataset::{sample_minibatch, OfflineDataset};
use crate::error::{FbError, Result};
use crate::inference::blockwise_at_states;
use crate::mdp::{sample_categorical, FiniteMdp};
use crate::model::FbModel;
use crate::networks::{normalize_z, polyak_network, residual_ar_normalize, select_actions, state_encoding, Layered};
use crate::policy_opt::{actor_objective, ActorInputs, ActorObjective};
use crate::tensor::{Adam, Array2, Parameter, Tape, Var};

/// Pair and diagonal coefficients of the listing-form losses. Rows come in
/// `groups` runs of `size`; pairs `j ≠ k` are taken within a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights {
    pub pair: Array2,
    /// `n×1`
    pub diag: Array2,
}

impl PairWeights {
    pub fn grouped(groups: usize, size: usize) -> Result<Self> {
        if groups == 0 || size < 2 {
            return Err(FbError::contract(format!("pairs need groups ≥ 1 of size ≥ 2, got {groups}×{size}")));
        }
        let n = groups * size;
        let pw = 1.0 / (2.0 * (groups * size * (size - 1)) as f64);
        let pair = Array2::from_fn(n, n, |j, k| if j != k && j / size == k / size { pw } else { 0.0 });
        let diag = Array2::filled(n, 1, 1.0 / n as f64);
        Ok(Self { pair, diag })
    }

    /// Arbitrary weights: `pair` is `n×n` with a zero diagonal.
    pub fn custom(pair: Array2, diag: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        if pair.shape() != (n, n) || (0..n).any(|i| pair.get(i, i) != 0.0) {
            return Err(FbError::Dimension(format!("pair weights {:?} for {n} rows", pair.shape())));
        }
        Ok(Self { pair, diag: Array2::from_vec(n, 1, diag)? })
    }

    pub fn rows(&self) -> usize {
        self.diag.rows()
    }
}

/// A loss node with the values of its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub offdiag: f64,
    pub diag: f64,
}

/// `Σ_{jk} W_jk (F_jᵀB_k − γ T_jk)² − Σ_j w_j F_jᵀB_j`, with `T` held constant.
pub fn fb_loss_kernel(tape: &mut Tape, f: Var, b: Var, target: &Array2, gamma: f64, w: &PairWeights) -> Result<LossTerms> {
    let p = tape.matmul_nt(f, b)?;
    let t = tape.constant(target.scale(gamma));
    let diff = tape.sub(p, t)?;
    let sq = tape.square(diff);
    off_minus_diag(tape, sq, f, b, w)
}

/// `Σ_{jk} W_jk (B_jᵀB_k)² − Σ_j w_j ‖B_j‖²`.
pub fn ortho_loss_kernel(tape: &mut Tape, b: Var, w: &PairWeights) -> Result<LossTerms> {
    let g = tape.matmul_nt(b, b)?;
    let sq = tape.square(g);
    off_minus_diag(tape, sq, b, b, w)
}

fn off_minus_diag(tape: &mut Tape, sq: Var, a: Var, b: Var, w: &PairWeights) -> Result<LossTerms> {
    let pw = tape.constant(w.pair.clone());
    let weighted = tape.mul(sq, pw)?;
    let off = tape.sum(weighted);
    let dots = tape.row_dot(a, b)?;
    let dw = tape.constant(w.diag.clone());
    let dd = tape.mul(dots, dw)?;
    let diag = tape.sum(dd);
    let loss = tape.sub(off, diag)?;
    Ok(LossTerms { loss, offdiag: tape.value(off).item(), diag: tape.value(diag).item() })
}

/// How a variant lays out `z` over the minibatch.
pub trait Variant {
    fn name(&self) -> &'static str;
    /// Number of distinct `z` per minibatch and the slot of each row.
    fn z_slots(&self, cfg: &TrainConfig) -> Vec<usize>;
    /// `(groups, size)` for the pair terms.
    fn pair_groups(&self, cfg: &TrainConfig) -> (usize, usize);
}

/// One `z` per transition; pairs span the whole minibatch.
pub struct PerTransition(pub &'static str);

/// One `z` per group of `batch_j` transitions; pairs stay inside a group.
pub struct Grouped;

impl Variant for PerTransition {
    fn name(&self) -> &'static str {
        self.0
    }

    fn z_slots(&self, cfg: &TrainConfig) -> Vec<usize> {
        (0..cfg.batch_i * cfg.batch_j).collect()
    }

    fn pair_groups(&self, cfg: &TrainConfig) -> (usize, usize) {
        (1, cfg.batch_i * cfg.batch_j)
    }
}

impl Variant for Grouped {
    fn name(&self) -> &'static str {
        "aware"
    }

    fn z_slots(&self, cfg: &TrainConfig) -> Vec<usize> {
        (0..cfg.batch_i * cfg.batch_j).map(|r| r / cfg.batch_j).collect()
    }

    fn pair_groups(&self, cfg: &TrainConfig) -> (usize, usize) {
        (cfg.batch_i, cfg.batch_j)
    }
}

pub fn variant(name: &str) -> Result<Box<dyn Variant>> {
    match name {
        "vanilla" => Ok(Box::new(PerTransition("vanilla"))),
        "aw" => Ok(Box::new(PerTransition("aw"))),
        "aware" => Ok(Box::new(Grouped)),
        other => Err(FbError::Config(format!("unknown variant `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbLossReport {
    pub step: usize,
    /// Mean over ensemble members.
    pub fb_loss: f64,
    pub ortho_loss: f64,
    pub actor_loss: f64,
    pub diag_term: f64,
    pub offdiag_term: f64,
    pub clamped: usize,
    pub eval: Vec<(String, f64)>,
}

impl FbLossReport {
    pub const CSV_HEADER: &'static str = "step,fb_loss,ortho_loss,actor_loss,diag_term,offdiag_term,clamped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{}",
            self.step, self.fb_loss, self.ortho_loss, self.actor_loss, self.diag_term, self.offdiag_term, self.clamped
        )
    }
}

/// `Q(s_i, a) = F(s_i, a, z_i)ᵀz_i` from an all-actions forward output.
pub fn q_table(f_all: &Array2, z: &Array2) -> Array2 {
    let d = z.cols();
    let na = f_all.cols() / d;
    Array2::from_fn(f_all.rows(), na, |i, a| crate::tensor::dot(&f_all.row(i)[a * d..(a + 1) * d], z.row(i)))
}

/// Network input table for a dataset: its MDP's features when known,
/// otherwise a one-hot code.
pub fn encoding_for(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<Array2> {
    match &ds.mdp_spec {
        Some(spec) => {
            let mdp = spec.build()?;
            if (mdp.gamma - cfg.gamma).abs() > 1e-12 {
                return Err(FbError::Config(format!(
                    "config gamma {} differs from the dataset MDP's gamma {}",
                    cfg.gamma, mdp.gamma
                )));
            }
            Ok(state_encoding(&mdp.state_features, cfg.one_hot_states))
        }
        None => Ok(Array2::identity(ds.n_states())),
    }
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: FbModel,
    ds: &'a OfflineDataset,
    variant: Box<dyn Variant>,
    actor: Box<dyn ActorObjective>,
    opt_fb: Adam,
    opt_pi: Adam,
    rng: ChaCha8Rng,
    step: usize,
    /// Blockwise `B` per state; `None` where its leading block vanishes.
    z_table: Option<Vec<Option<Vec<f64>>>>,
}

/// Blockwise `B` at every state, skipping states with a zero leading block.
fn state_z_table(model: &FbModel, states: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
    match blockwise_at_states(model, states) {
        Ok(t) => Ok((0..states.len()).map(|i| Some(t.row(i).to_vec())).collect()),
        Err(FbError::DegenerateTask(_)) => states
            .iter()
            .map(|&s| match blockwise_at_states(model, &[s]) {
                Ok(t) => Ok(Some(t.row(0).to_vec())),
                Err(FbError::DegenerateTask(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect(),
        Err(e) => Err(e),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ds: &'a OfflineDataset) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(FbError::contract("cannot train on an empty dataset"));
        }
        let encoding = encoding_for(ds, cfg)?;
        let n_actions = match &ds.mdp_spec {
            Some(spec) => spec.build()?.n_actions,
            None => ds.transitions.iter().map(|t| t.a + 1).max().unwrap_or(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = FbModel::new(cfg, encoding, ds.rho.clone(), n_actions, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            ds,
            variant: variant(&cfg.variant)?,
            actor: actor_objective(&cfg.actor)?,
            opt_fb: Adam::new(cfg.lr),
            opt_pi: Adam::new(cfg.lr_actor),
            rng,
            step: 0,
            z_table: None,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn gaussian_z(&mut self) -> Result<Vec<f64>> {
        let g: Vec<f64> = (0..self.cfg.d).map(|_| self.rng.sample(StandardNormal)).collect();
        normalize_z(&g)
    }

    /// Mixture draw: blockwise `B` at `state` with probability `τ_mix`,
    /// otherwise a Gaussian; normalized to `√d` either way. States whose `B`
    /// has no usable leading block draw the Gaussian.
    fn draw_z(&mut self, state: usize) -> Result<Vec<f64>> {
        let u: f64 = self.rng.gen();
        let table = self.z_table.as_ref();
        if let (true, Some(Some(z))) = (u < self.cfg.tau_mix, table.map(|t| &t[state])) {
            normalize_z(z)
        } else {
            self.gaussian_z()
        }
    }

    fn refresh_z_table(&mut self) -> Result<()> {
        let stale = self.z_table.is_none() || self.step % self.cfg.z_cache_interval == 0;
        if self.cfg.tau_mix > 0.0 && stale {
            let states: Vec<usize> = (0..self.model.encoding.rows()).collect();
            self.z_table = Some(state_z_table(&self.model, &states)?);
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<FbLossReport> {
        let cfg = self.cfg.clone();
        let (d, m_count) = (cfg.d, cfg.ensemble_m);
        let layout = self.model.layout.clone();
        self.refresh_z_table()?;

        let mb = sample_minibatch(self.ds, cfg.batch_i, cfg.batch_j, &mut self.rng)?;
        let n = mb.len();
        let slots = self.variant.z_slots(&cfg);
        let n_slots = slots.iter().max().map_or(0, |m| m + 1);
        let mut zs = Vec::with_capacity(n_slots);
        for k in 0..n_slots {
            zs.push(self.draw_z(mb.rho_states[k])?);
        }
        let z_bar = Array2::from_fn(n, d, |r, c| zs[slots[r]][c]);
        let z_res: Vec<Vec<f64>> = zs.iter().map(|z| residual_ar_normalize(z, &layout)).collect::<Result<_>>()?;
        let z_in = Array2::from_fn(n, d, |r, c| z_res[slots[r]][c]);

        let s: Vec<usize> = mb.transitions.iter().map(|t| t.s).collect();
        let a: Vec<usize> = mb.transitions.iter().map(|t| t.a).collect();
        let s_next: Vec<usize> = mb.transitions.iter().map(|t| t.s_next).collect();

        // targets, without gradient
        let next_probs = self.model.eval_policy(&s_next, &z_bar)?;
        let a_next: Vec<usize> = (0..n).map(|i| sample_categorical(next_probs.row(i), &mut self.rng)).collect();
        let mut f_bar = Array2::zeros(n, d);
        for m in 0..m_count {
            let all = self.model.eval_forward(m, true, &s_next, &z_bar)?;
            for i in 0..n {
                let src = &all.row(i)[a_next[i] * d..(a_next[i] + 1) * d];
                for (o, x) in f_bar.row_mut(i).iter_mut().zip(src) {
                    *o += x / m_count as f64;
                }
            }
        }
        let b_target = self.model.eval_backward(&s_next, &z_in, true)?;
        let target = f_bar.matmul_nt(&b_target)?;

        let (groups, size) = self.variant.pair_groups(&cfg);
        let weights = PairWeights::grouped(groups, size)?;

        let mut tape = Tape::new();
        let enc_s = tape.constant(self.model.enc(&s));
        let enc_next = tape.constant(self.model.enc(&s_next));
        let zb = tape.constant(z_bar.clone());
        let zi = tape.constant(z_in);
        let b_bound = self.model.backward.bind(&mut tape, true);
        let b_on = self.model.backward.forward(&mut tape, &b_bound, enc_next, zi)?;
        let f_bounds: Vec<_> = self.model.forward.members.iter().map(|f| f.bind(&mut tape, true)).collect();
        let mut f_all = Vec::with_capacity(m_count);
        let mut f_sel = Vec::with_capacity(m_count);
        for (f, bound) in self.model.forward.members.iter().zip(&f_bounds) {
            let all = f.forward(&mut tape, bound, enc_s, zb)?;
            f_sel.push(select_actions(&mut tape, all, &a, d)?);
            f_all.push(all);
        }

        let (mut fb_total, mut fb_sum, mut diag_sum, mut off_sum) = (None::<Var>, 0.0, 0.0, 0.0);
        let mut add_term = |tape: &mut Tape, t: LossTerms, mult: f64| -> Result<()> {
            let l = if mult == 1.0 { t.loss } else { tape.scale(t.loss, mult) };
            fb_sum += mult * tape.value(t.loss).item();
            diag_sum += mult * t.diag;
            off_sum += mult * t.offdiag;
            fb_total = Some(match fb_total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
            Ok(())
        };
        match cfg.member_indexing {
            MemberIndexing::PerMember => {
                for &fm in &f_sel {
                    let t = fb_loss_kernel(&mut tape, fm, b_on, &target, cfg.gamma, &weights)?;
                    add_term(&mut tape, t, 1.0)?;
                }
            }
            MemberIndexing::Literal => {
                let mut acc = f_sel[0];
                for &fm in &f_sel[1..] {
                    acc = tape.add(acc, fm)?;
                }
                let mean = tape.scale(acc, 1.0 / m_count as f64);
                let t = fb_loss_kernel(&mut tape, mean, b_on, &target, cfg.gamma, &weights)?;
                add_term(&mut tape, t, m_count as f64)?;
            }
        }
        let fb_total = fb_total.expect("at least one member");
        let fb_loss = fb_sum / m_count as f64;
        if !fb_loss.is_finite() {
            return Err(FbError::Numeric { step: self.step, what: format!("fb_loss = {fb_loss}") });
        }
        if fb_loss.abs() > cfg.divergence_threshold {
            return Err(FbError::Divergence { step: self.step, loss: fb_loss, threshold: cfg.divergence_threshold });
        }

        let ortho = ortho_loss_kernel(&mut tape, b_on, &weights)?;
        let ortho_value = tape.value(ortho.loss).item();

        // actor: Q-values are read off the online F and held constant
        let (actor_z, q_members) = if cfg.aw_independent_z && cfg.grouped() {
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                rows.push(self.draw_z(mb.rho_states[i])?);
            }
            let zind = Array2::from_rows(&rows)?;
            let qs = (0..m_count)
                .map(|m| Ok(q_table(&self.model.eval_forward(m, false, &s, &zind)?, &zind)))
                .collect::<Result<Vec<_>>>()?;
            (zind, qs)
        } else {
            let qs = f_all.iter().map(|&v| q_table(tape.value(v), &z_bar)).collect();
            (z_bar.clone(), qs)
        };
        let pi_bound = self.model.policy.bind(&mut tape, true);
        let za = tape.constant(actor_z);
        let log_probs = self.model.policy.log_probs(&mut tape, &pi_bound, enc_s, za)?;
        let actor = self.actor.loss(
            &mut tape,
            &ActorInputs {
                log_probs,
                actions: &a,
                q_members: &q_members,
                beta: cfg.beta,
                sum_literal: cfg.advantage_sum_literal,
            },
        )?;
        let actor_value = tape.value(actor.loss).item();
        if !actor_value.is_finite() || !ortho_value.is_finite() {
            return Err(FbError::Numeric { step: self.step, what: "actor or ortho loss".into() });
        }

        let reg = tape.scale(ortho.loss, cfg.lambda_ortho);
        let total = tape.add(fb_total, reg)?;
        let total = tape.add(total, actor.loss)?;
        let grads = tape.backward(total)?;

        let model = &mut self.model;
        model.backward.zero_grad();
        model.backward.accumulate(&grads, &b_bound);
        for (f, bound) in model.forward.members.iter_mut().zip(&f_bounds) {
            f.zero_grad();
            f.accumulate(&grads, bound);
        }
        model.policy.zero_grad();
        model.policy.accumulate(&grads, &pi_bound);
        {
            let mut params: Vec<&mut Parameter> = Vec::new();
            for f in model.forward.members.iter_mut() {
                params.extend(f.params_mut());
            }
            params.extend(model.backward.params_mut());
            self.opt_fb.step(&mut params);
        }
        self.opt_pi.step(&mut model.policy.params_mut());
        for (t, o) in model.forward.targets.iter_mut().zip(&model.forward.members) {
            polyak_network(t, o, cfg.polyak_zeta)?;
        }
        polyak_network(&mut model.backward_target, &model.backward, cfg.polyak_zeta)?;

        let report = FbLossReport {
            step: self.step,
            fb_loss,
            ortho_loss: ortho_value,
            actor_loss: actor_value,
            diag_term: diag_sum / m_count as f64,
            offdiag_term: off_sum / m_count as f64,
            clamped: actor.clamped,
            eval: Vec::new(),
        };
        self.step += 1;
        Ok(report)
    }
}

/// Runs `cfg.steps` updates. Reports are kept every `log_every` steps and
/// for the final step; with an MDP and `eval_every > 0`, evaluation metrics
/// are attached at that cadence.
pub fn train(cfg: &TrainConfig, ds: &OfflineDataset, mdp_for_eval: Option<&FiniteMdp>) -> Result<(FbModel, Vec<FbLossReport>)> {
    train_with(cfg, ds, mdp_for_eval, |_| {})
}

/// [`train`] with a callback on every kept report.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &OfflineDataset,
    mdp_for_eval: Option<&FiniteMdp>,
    mut on_report: impl FnMut(&FbLossReport),
) -> Result<(FbModel, Vec<FbLossReport>)> {
    let mut trainer = Trainer::new(cfg, ds)?;
    let mut reports = Vec::new();
    for step in 0..cfg.steps {
        let mut r = trainer.step()?;
        let last = step + 1 == cfg.steps;
        let log = cfg.log_every > 0 && (step % cfg.log_every == 0 || last);
        let eval = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last);
        if let (Some(mdp), true) = (mdp_for_eval, eval) {
            r.eval = crate::evaluation::training_metrics(&trainer.model, mdp)?;
        }
        if log || !r.eval.is_empty() {
            on_report(&r);
            reports.push(r);
        }
    }
    let mut model = trainer.model;
    model.zero_grad();
    Ok((model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_uniform;
    use crate::mdp::{successor_measure_exact, MdpSpec, TabularPolicy};
    use crate::tensor::{finite_difference, relative_error};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2 {
        Array2::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn kernel_value(f: &Array2, b: &Array2, t: &Array2, gamma: f64, w: &PairWeights) -> f64 {
        let mut tape = Tape::new();
        let (fv, bv) = (tape.constant(f.clone()), tape.constant(b.clone()));
        let l = fb_loss_kernel(&mut tape, fv, bv, t, gamma, w).unwrap();
        tape.value(l.loss).item()
    }

    #[test]
    fn fb_kernel_matches_listing_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, j, d) = (2, 4, 3);
        let n = g * j;
        let (f, b, t) = (random(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, n));
        let w = PairWeights::grouped(g, j).unwrap();
        let gamma = 0.8;
        let dot = |x: &[f64], y: &[f64]| crate::tensor::dot(x, y);
        let mut off = 0.0;
        let mut diag = 0.0;
        for grp in 0..g {
            for jj in 0..j {
                let r = grp * j + jj;
                diag += dot(f.row(r), b.row(r));
                for kk in 0..j {
                    let c = grp * j + kk;
                    if jj != kk {
                        let e = dot(f.row(r), b.row(c)) - gamma * t.get(r, c);
                        off += e * e;
                    }
                }
            }
        }
        let expected = off / (2.0 * (g * j * (j - 1)) as f64) - diag / n as f64;
        assert!((kernel_value(&f, &b, &t, gamma, &w) - expected).abs() < 1e-12);

        // γ = 0 drops the target; F ≡ 0 gives exactly zero
        let no_target = kernel_value(&f, &b, &Array2::zeros(n, n), 0.9, &w);
        assert!((kernel_value(&f, &b, &t, 0.0, &w) - no_target).abs() < 1e-15);
        assert_eq!(kernel_value(&Array2::zeros(n, d), &b, &Array2::zeros(n, n), 0.9, &w), 0.0);
        assert!(PairWeights::grouped(3, 1).is_err());
    }

    #[test]
    fn loss_kernels_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, b, t) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3), random(&mut rng, 6, 6));
        let w = PairWeights::grouped(2, 3).unwrap();
        let mut tape = Tape::new();
        let (fv, bv) = (tape.variable(f.clone()), tape.variable(b.clone()));
        let l = fb_loss_kernel(&mut tape, fv, bv, &t, 0.9, &w).unwrap();
        let g = tape.backward(l.loss).unwrap();
        let nf = finite_difference(&f, 1e-5, |x| kernel_value(x, &b, &t, 0.9, &w));
        let nb = finite_difference(&b, 1e-5, |x| kernel_value(&f, x, &t, 0.9, &w));
        assert!(relative_error(g.get(fv).unwrap(), &nf) < 1e-6);
        assert!(relative_error(g.get(bv).unwrap(), &nb) < 1e-6);

        let ortho = |x: &Array2| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let l = ortho_loss_kernel(&mut tape, v, &w).unwrap();
            tape.value(l.loss).item()
        };
        let mut tape = Tape::new();
        let bv = tape.variable(b.clone());
        let l = ortho_loss_kernel(&mut tape, bv, &w).unwrap();
        let g = tape.backward(l.loss).unwrap();
        assert!(relative_error(g.get(bv).unwrap(), &finite_difference(&b, 1e-5, ortho)) < 1e-6);
    }

    #[test]
    fn ortho_penalizes_constant_features_and_rests_at_orthonormal() {
        // population form over ρ = 1/4 on four states: each state listed twice
        // so that same-state pairs are represented, pair weights ρρ′/(2·count)
        let rows: Vec<usize> = (0..8).map(|r| r / 2).collect();
        let pair = Array2::from_fn(8, 8, |j, k| {
            if j == k {
                0.0
            } else {
                let count = if rows[j] == rows[k] { 2.0 } else { 4.0 };
                0.5 / 16.0 / count
            }
        });
        let w = PairWeights::custom(pair, vec![0.125; 8]).unwrap();
        let eval = |x: &Array2| {
            let mut tape = Tape::new();
            let v = tape.variable(x.clone());
            let l = ortho_loss_kernel(&mut tape, v, &w).unwrap();
            let g = tape.backward(l.loss).unwrap();
            (tape.value(l.loss).item(), g.get(v).unwrap().clone())
        };
        // rows 2·e_s give E_ρ[BBᵀ] = I
        let ortho = Array2::from_fn(8, 4, |r, c| if rows[r] == c { 2.0 } else { 0.0 });
        let (lo, go) = eval(&ortho);
        assert!(go.max_abs() < 1e-12, "{}", go.max_abs());
        let constant = Array2::filled(8, 4, 1.0);
        let (lc, _) = eval(&constant);
        assert!(lc > lo + 1.0);
    }

    /// Stationarity at the exact factorization of a fixed policy's measure,
    /// using the population form of the kernel over all state pairs.
    #[test]
    fn exact_factorization_is_stationary() {
        let mdp = MdpSpec::grid(2, 2, 0.2, 0.8).build().unwrap();
        let (ns, na) = (4, 4);
        let pol = TabularPolicy::new(Array2::from_fn(ns, na, |s, a| if (s + a) % 2 == 0 { 0.4 } else { 0.1 })).unwrap();
        let m = successor_measure_exact(&mdp, &pol).unwrap();
        let rho = [0.1, 0.2, 0.3, 0.4];
        let p_sa = 1.0 / (ns * na) as f64;
        // rows: every (s, a); columns of B: every state
        let n = ns * na;
        let target_m = Array2::from_fn(n, ns, |r, t| m.m.get(r, t) / mdp.gamma / rho[t]);
        // exact F: rows of M/γ·diag(ρ)^{-1}, B = identity
        let f = target_m.clone();
        let b_states = Array2::identity(ns);
        // next-state successor rows under π give the target F̄(s', π)
        let f_next: Vec<Vec<f64>> = (0..ns)
            .map(|s2| (0..ns).map(|t| (0..na).map(|a| pol.prob(s2, a) * f.get(s2 * na + a, t)).sum()).collect())
            .collect();
        // population loss: E_{(s,a)} E_{s'|s,a} E_{t∼ρ} [(F(s,a)ᵀB(t) − γ F̄(s')ᵀB(t))²] − 2 E[F(s,a)ᵀB(s')]
        let loss = |fx: &Array2, bx: &Array2| {
            let mut total = 0.0;
            for r in 0..n {
                let (s, a) = (r / na, r % na);
                for s2 in 0..ns {
                    let p = p_sa * mdp.p(s, a, s2);
                    if p == 0.0 {
                        continue;
                    }
                    for t in 0..ns {
                        let pred = crate::tensor::dot(fx.row(r), bx.row(t));
                        let tgt = mdp.gamma * crate::tensor::dot(&f_next[s2], b_states.row(t));
                        total += p * rho[t] * (pred - tgt) * (pred - tgt);
                    }
                    total -= 2.0 * p * crate::tensor::dot(fx.row(r), bx.row(s2));
                }
            }
            total
        };
        let gf = finite_difference(&f, 1e-6, |x| loss(x, &b_states));
        assert!(gf.max_abs() < 1e-6, "dF {}", gf.max_abs());
    }

    fn small_setup(variant: &str) -> (TrainConfig, OfflineDataset) {
        let mdp = MdpSpec::grid(3, 3, 0.1, 0.9).build().unwrap();
        let ds = collect_uniform(&mdp, 500, 1).unwrap();
        let mut cfg = TrainConfig::preset(variant).unwrap();
        cfg.d = 8;
        if variant == "aware" {
            cfg.blocks = 2;
            cfg.batch_j = 16;
        } else {
            cfg.batch_i = 16;
        }
        cfg.hidden = 16;
        cfg.steps = 5;
        cfg.log_every = 1;
        (cfg, ds)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (mut cfg, ds) = small_setup("aware");
        cfg.steps = 0;
        let (m, reports) = train(&cfg, &ds, None).unwrap();
        let fresh = Trainer::new(&cfg, &ds).unwrap().model;
        assert_eq!(m, fresh);
        assert!(reports.is_empty());
    }

    #[test]
    fn training_is_deterministic_for_every_variant() {
        for v in ["vanilla", "aw", "aware"] {
            let (cfg, ds) = small_setup(v);
            let (m1, r1) = train(&cfg, &ds, None).unwrap();
            let (m2, r2) = train(&cfg, &ds, None).unwrap();
            assert_eq!(m1, m2, "{v}");
            assert_eq!(r1, r2);
            assert_eq!(r1.len(), 5);
            assert!(r1.iter().all(|r| r.fb_loss.is_finite() && r.ortho_loss.is_finite()));
        }
    }

    #[test]
    fn states_without_a_leading_block_draw_gaussian_z() {
        let (mut cfg, ds) = small_setup("aware");
        cfg.tau_mix = 1.0;
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let out = &mut t.model.backward.out;
        for c in 0..4 {
            for r in 0..out.w.value.rows() {
                out.w.value.set(r, c, 0.0);
            }
            out.b.value.set(0, c, 0.0);
        }
        assert!(matches!(blockwise_at_states(&t.model, &[0]), Err(FbError::DegenerateTask(_))));
        let report = t.step().unwrap();
        assert!(report.fb_loss.is_finite());
        assert!(t.z_table.as_ref().unwrap().iter().all(Option::is_none));
    }

    #[test]
    fn polyak_extremes_on_targets() {
        let (mut cfg, ds) = small_setup("vanilla");
        cfg.polyak_zeta = 1.0;
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let before = t.model.forward.targets.clone();
        let b_before = t.model.backward_target.clone();
        t.step().unwrap();
        assert_eq!(t.model.forward.targets, before);
        assert_eq!(t.model.backward_target, b_before);
        assert_ne!(t.model.forward.members, before);

        cfg.polyak_zeta = 0.0;
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.step().unwrap();
        for (tg, on) in t.model.forward.targets.iter().zip(&t.model.forward.members) {
            for (a, b) in tg.params().iter().zip(on.params()) {
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn grouped_single_group_equals_per_transition_with_shared_z() {
        // same rows, same z on every row: the two pair layouts coincide
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, b, t) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4), random(&mut rng, 8, 8));
        let cfg_v = TrainConfig { batch_i: 8, batch_j: 1, ..TrainConfig::preset("vanilla").unwrap() };
        let cfg_a = TrainConfig { batch_i: 1, batch_j: 8, ..TrainConfig::preset("aware").unwrap() };
        let (gv, sv) = variant("vanilla").unwrap().pair_groups(&cfg_v);
        let (ga, sa) = variant("aware").unwrap().pair_groups(&cfg_a);
        let wv = PairWeights::grouped(gv, sv).unwrap();
        let wa = PairWeights::grouped(ga, sa).unwrap();
        assert_eq!(kernel_value(&f, &b, &t, 0.9, &wv), kernel_value(&f, &b, &t, 0.9, &wa));
        assert_eq!(variant("aware").unwrap().z_slots(&cfg_a), vec![0; 8]);
        assert_eq!(variant("vanilla").unwrap().z_slots(&cfg_v), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut cfg, ds) = small_setup("vanilla");
        cfg.divergence_threshold = 1e-9;
        let err = train(&cfg, &ds, None).unwrap_err();
        assert!(matches!(err, FbError::Divergence { step: 0, .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn gamma_mismatch_is_a_config_error() {
        let (mut cfg, ds) = small_setup("vanilla");
        cfg.gamma = 0.5;
        assert!(matches!(Trainer::new(&cfg, &ds), Err(FbError::Config(_))));
    }
}
