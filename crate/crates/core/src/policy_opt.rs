//! Actor objectives (TD3-style and advantage-weighted regression with WIS or
//! IWIS weights) and action selectors, each behind a named registry.

use rand::RngCore;

use crate::error::{FbError, Result};
use crate::mdp::{argmax, sample_categorical};
use crate::tensor::{Array2, Tape, Var};

pub const ACTOR_OBJECTIVES: [&str; 3] = ["td3", "awr-wis", "awr-iwis"];

const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// Advantages with their WIS weights `w` and improved weights `w′`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub w: Vec<f64>,
    pub w_prime: Vec<f64>,
}

/// `A_i = mean_m Q_m(s_i, a_i) − Σ_a π(a|s_i) min_m Q_m(s_i, a)`.
///
/// `q_members[m]` is `n×A`; with `sum_literal` the first term sums the
/// members instead of averaging them.
pub fn advantages(q_members: &[Array2], probs: &Array2, actions: &[usize], sum_literal: bool) -> Result<Vec<f64>> {
    let Some(first) = q_members.first() else {
        return Err(FbError::contract("advantage needs at least one ensemble member"));
    };
    let (n, na) = first.shape();
    if probs.shape() != (n, na) || actions.len() != n || q_members.iter().any(|q| q.shape() != (n, na)) {
        return Err(FbError::Dimension(format!(
            "advantage inputs: q {n}x{na}, probs {:?}, {} actions",
            probs.shape(),
            actions.len()
        )));
    }
    let m = q_members.len() as f64;
    Ok((0..n)
        .map(|i| {
            let total: f64 = q_members.iter().map(|q| q.get(i, actions[i])).sum();
            let value = if sum_literal { total } else { total / m };
            let baseline: f64 = (0..na)
                .map(|a| {
                    let qmin = q_members.iter().map(|q| q.get(i, a)).fold(f64::INFINITY, f64::min);
                    probs.get(i, a) * qmin
                })
                .sum();
            value - baseline
        })
        .collect())
}

/// Softmax of `A/β` over the batch, with max-subtraction.
pub fn wis_weights(advantages: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(FbError::contract(format!("temperature must be positive, got {beta}")));
    }
    if advantages.is_empty() {
        return Ok(Vec::new());
    }
    let mx = advantages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = advantages.iter().map(|a| ((a - mx) / beta).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// `u_i = w_i / (1 − w_i)`, renormalized.
pub fn iwis_weights(advantages: &[f64], beta: f64) -> Result<Vec<f64>> {
    if advantages.len() < 2 {
        return Err(FbError::contract("improved weights need at least two samples"));
    }
    let w = wis_weights(advantages, beta)?;
    improve_weights(&w)
}

/// The IWIS transform of already-normalized weights.
pub fn improve_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|&x| x >= 1.0) {
        return Err(FbError::contract("a weight equals 1: the other samples carry no mass"));
    }
    let u: Vec<f64> = w.iter().map(|&x| x / (1.0 - x)).collect();
    let s: f64 = u.iter().sum();
    Ok(u.into_iter().map(|x| x / s).collect())
}

pub fn advantage_batch(advantages: Vec<f64>, beta: f64) -> Result<AdvantageBatch> {
    let w = wis_weights(&advantages, beta)?;
    let w_prime = improve_weights(&w)?;
    Ok(AdvantageBatch { advantages, w, w_prime })
}

/// `−Σ_i w_i log π(a_i|s_i)` with log-probabilities floored at `ln 1e-12`.
/// Returns the loss node and how many terms hit the floor; floored terms
/// carry no gradient.
pub fn aw_actor_loss(tape: &mut Tape, log_probs: Var, actions: &[usize], weights: &[f64]) -> Result<(Var, usize)> {
    let lp = tape.value(log_probs);
    let (n, na) = lp.shape();
    if actions.len() != n || weights.len() != n {
        return Err(FbError::Dimension(format!(
            "actor loss: {n} rows, {} actions, {} weights",
            actions.len(),
            weights.len()
        )));
    }
    let mut sel = Array2::zeros(n, na);
    let mut floor_term = 0.0;
    let mut clamped = 0;
    for i in 0..n {
        if lp.get(i, actions[i]) < LOG_FLOOR {
            clamped += 1;
            floor_term += weights[i] * LOG_FLOOR;
        } else {
            sel.set(i, actions[i], -weights[i]);
        }
    }
    let sel = tape.constant(sel);
    let prod = tape.mul(log_probs, sel)?;
    let s = tape.sum(prod);
    let offset = tape.constant(Array2::scalar(-floor_term));
    Ok((tape.add(s, offset)?, clamped))
}

/// `−(1/n) Σ_i Σ_a π(a|s_i) q_min(s_i, a)` with `q_min` held constant.
pub fn td3_actor_loss(tape: &mut Tape, log_probs: Var, q_min: &Array2) -> Result<Var> {
    let n = tape.value(log_probs).rows().max(1);
    let probs = tape.exp(log_probs);
    let q = tape.constant(q_min.scale(-1.0 / n as f64));
    let prod = tape.mul(probs, q)?;
    Ok(tape.sum(prod))
}

/// Elementwise minimum over members, `n×A`.
pub fn ensemble_min(q_members: &[Array2]) -> Array2 {
    let mut out = q_members[0].clone();
    for q in &q_members[1..] {
        out = out.zip_map(q, f64::min);
    }
    out
}

pub fn ensemble_mean(q_members: &[Array2]) -> Array2 {
    let mut out = q_members[0].clone();
    for q in &q_members[1..] {
        out.add_assign(q);
    }
    out.scale(1.0 / q_members.len() as f64)
}

/// Everything an actor objective may read. Q-values are detached.
pub struct ActorInputs<'a> {
    pub log_probs: Var,
    pub actions: &'a [usize],
    pub q_members: &'a [Array2],
    pub beta: f64,
    pub sum_literal: bool,
}

pub struct ActorOutput {
    pub loss: Var,
    pub clamped: usize,
}

pub trait ActorObjective {
    fn name(&self) -> &'static str;
    fn loss(&self, tape: &mut Tape, inputs: &ActorInputs) -> Result<ActorOutput>;
}

pub struct Td3Actor;

impl ActorObjective for Td3Actor {
    fn name(&self) -> &'static str {
        "td3"
    }

    fn loss(&self, tape: &mut Tape, inputs: &ActorInputs) -> Result<ActorOutput> {
        let loss = td3_actor_loss(tape, inputs.log_probs, &ensemble_min(inputs.q_members))?;
        Ok(ActorOutput { loss, clamped: 0 })
    }
}

pub struct AwrActor {
    pub improved: bool,
}

impl ActorObjective for AwrActor {
    fn name(&self) -> &'static str {
        if self.improved {
            "awr-iwis"
        } else {
            "awr-wis"
        }
    }

    fn loss(&self, tape: &mut Tape, inputs: &ActorInputs) -> Result<ActorOutput> {
        let probs = tape.value(inputs.log_probs).map(f64::exp);
        let adv = advantages(inputs.q_members, &probs, inputs.actions, inputs.sum_literal)?;
        let w = wis_weights(&adv, inputs.beta)?;
        // a collapsed batch is its own IWIS limit
        let weights = if self.improved && adv.len() >= 2 && w.iter().all(|&x| x < 1.0) { improve_weights(&w)? } else { w };
        let (loss, clamped) = aw_actor_loss(tape, inputs.log_probs, inputs.actions, &weights)?;
        Ok(ActorOutput { loss, clamped })
    }
}

pub fn actor_objective(name: &str) -> Result<Box<dyn ActorObjective>> {
    match name {
        "td3" => Ok(Box::new(Td3Actor)),
        "awr-wis" => Ok(Box::new(AwrActor { improved: false })),
        "awr-iwis" => Ok(Box::new(AwrActor { improved: true })),
        other => Err(FbError::Config(format!("unknown actor `{other}`; expected one of {ACTOR_OBJECTIVES:?}"))),
    }
}

/// Draws `m` actions from `probs` and keeps the one with the largest `q`;
/// ties go to the lowest action index.
pub fn evaluation_sampling_act(probs: &[f64], q: &[f64], m: usize, rng: &mut dyn RngCore) -> Result<usize> {
    if m == 0 {
        return Err(FbError::contract("evaluation sampling needs at least one sample"));
    }
    let mut best: Option<usize> = None;
    for _ in 0..m {
        let a = sample_categorical(probs, &mut *rng);
        best = Some(match best {
            Some(b) if q[b] > q[a] || (q[b] == q[a] && b < a) => b,
            _ => a,
        });
    }
    Ok(best.expect("m ≥ 1"))
}

/// Turns the policy and the model's Q-values at one state into an action.
pub trait ActionSelector {
    fn name(&self) -> String;
    fn select(&self, probs: &[f64], q: &[f64], rng: &mut dyn RngCore) -> usize;
}

pub struct Greedy;
pub struct Sample;
pub struct QGreedy;
pub struct EvaluationSampling(pub usize);

impl ActionSelector for Greedy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn select(&self, probs: &[f64], _q: &[f64], _rng: &mut dyn RngCore) -> usize {
        argmax(probs)
    }
}

impl ActionSelector for Sample {
    fn name(&self) -> String {
        "sample".into()
    }

    fn select(&self, probs: &[f64], _q: &[f64], rng: &mut dyn RngCore) -> usize {
        sample_categorical(probs, &mut *rng)
    }
}

impl ActionSelector for QGreedy {
    fn name(&self) -> String {
        "qgreedy".into()
    }

    fn select(&self, _probs: &[f64], q: &[f64], _rng: &mut dyn RngCore) -> usize {
        argmax(q)
    }
}

impl ActionSelector for EvaluationSampling {
    fn name(&self) -> String {
        format!("es:{}", self.0)
    }

    fn select(&self, probs: &[f64], q: &[f64], rng: &mut dyn RngCore) -> usize {
        evaluation_sampling_act(probs, q, self.0.max(1), rng).expect("m ≥ 1")
    }
}

/// `greedy`, `sample`, `qgreedy` or `es:<m>`.
pub fn action_selector(name: &str) -> Result<Box<dyn ActionSelector>> {
    match name {
        "greedy" => Ok(Box::new(Greedy)),
        "sample" => Ok(Box::new(Sample)),
        "qgreedy" => Ok(Box::new(QGreedy)),
        _ => match name.strip_prefix("es:").map(str::parse::<usize>) {
            Some(Ok(m)) if m >= 1 => Ok(Box::new(EvaluationSampling(m))),
            _ => Err(FbError::Config(format!("unknown action selector `{name}`; expected greedy, sample, qgreedy or es:<m>"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference, relative_error};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn collapsed_batch_uses_the_limit_weights() {
        let mut tape = Tape::new();
        let lp = tape.constant(Array2::filled(3, 2, 0.5f64.ln()));
        let q = vec![Array2::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0], vec![0.0, 0.0]]).unwrap()];
        let inputs = ActorInputs { log_probs: lp, actions: &[0, 0, 1], q_members: &q, beta: 0.1, sum_literal: false };
        assert!(iwis_weights(&advantages(&q, &Array2::filled(3, 2, 0.5), &[0, 0, 1], false).unwrap(), 0.1).is_err());
        let out = AwrActor { improved: true }.loss(&mut tape, &inputs).unwrap();
        assert!((tape.value(out.loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn advantage_examples() {
        let q = vec![Array2::from_rows(&[vec![1.0, 0.0]]).unwrap()];
        let point = Array2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(advantages(&q, &point, &[0], false).unwrap(), vec![0.0]);
        let uni = Array2::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(advantages(&q, &uni, &[0], false).unwrap(), vec![0.5]);
        assert_eq!(advantages(&q, &uni, &[1], false).unwrap(), vec![-0.5]);
    }

    #[test]
    fn advantage_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, na) = (6, 4);
        let qs: Vec<Array2> = (0..3).map(|_| Array2::from_fn(n, na, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let mut probs = Array2::from_fn(n, na, |_, _| rng.gen_range(0.1..1.0));
        for i in 0..n {
            let s: f64 = probs.row(i).iter().sum();
            probs.row_mut(i).iter_mut().for_each(|p| *p /= s);
        }
        let actions: Vec<usize> = (0..n).map(|i| i % na).collect();
        let got = advantages(&qs, &probs, &actions, false).unwrap();
        let literal = advantages(&qs, &probs, &actions, true).unwrap();
        for i in 0..n {
            let mut baseline = 0.0;
            for a in 0..na {
                let mut mn = f64::INFINITY;
                for q in &qs {
                    mn = mn.min(q.get(i, a));
                }
                baseline += probs.get(i, a) * mn;
            }
            let sum: f64 = qs.iter().map(|q| q.get(i, actions[i])).sum();
            assert!((got[i] - (sum / 3.0 - baseline)).abs() < 1e-12);
            assert!((literal[i] - (sum - baseline)).abs() < 1e-12);
        }
    }

    #[test]
    fn wis_examples() {
        assert!(close(&wis_weights(&[0.3; 5], 1.0).unwrap(), &[0.2; 5], 1e-15));
        assert!(close(&wis_weights(&[3.0, -1.0, 0.5], 1e9).unwrap(), &[1.0 / 3.0; 3], 1e-6));
        let e = std::f64::consts::E;
        assert!(close(&wis_weights(&[1.0, 0.0], 1.0).unwrap(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12));
        assert!(wis_weights(&[1.0], 0.0).is_err());
    }

    #[test]
    fn iwis_examples() {
        assert!(close(&iwis_weights(&[1.0; 4], 0.5).unwrap(), &[0.25; 4], 1e-15));
        let w = iwis_weights(&[1.0, 0.0], 1.0).unwrap();
        let e2 = std::f64::consts::E.powi(2);
        assert!(close(&w, &[e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], 1e-12));
        assert!((w[0] - 0.8808).abs() < 1e-4 && (w[1] - 0.1192).abs() < 1e-4);
        assert!(matches!(iwis_weights(&[2.0], 1.0), Err(FbError::Contract(_))));
        assert!(matches!(iwis_weights(&[2000.0, 0.0], 1.0), Err(FbError::Contract(_))));
    }

    proptest! {
        #[test]
        fn weights_are_shift_invariant_and_permutation_equivariant(
            a in proptest::collection::vec(-3.0f64..3.0, 2..12),
            shift in -5.0f64..5.0,
            beta in 0.2f64..5.0,
        ) {
            let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let mut rev = a.clone();
            rev.reverse();
            for f in [wis_weights as fn(&[f64], f64) -> Result<Vec<f64>>, iwis_weights] {
                let w = f(&a, beta).unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!(close(&w, &f(&shifted, beta).unwrap(), 1e-12));
                let mut wr = f(&rev, beta).unwrap();
                wr.reverse();
                prop_assert!(close(&w, &wr, 1e-15));
            }
            // u_i / w_i = 1/(1−w_i) grows with w_i
            let w = wis_weights(&a, beta).unwrap();
            let wp = iwis_weights(&a, beta).unwrap();
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if w[i] > w[j] + 1e-12 {
                        prop_assert!(wp[i] / w[i] > wp[j] / w[j]);
                    }
                }
            }
        }
    }

    fn random_log_probs(rng: &mut ChaCha8Rng, n: usize, na: usize) -> Array2 {
        Array2::from_fn(n, na, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn aw_loss_reductions_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_log_probs(&mut rng, 5, 3);
        let actions = [0, 2, 1, 1, 0];
        let eval = |x: &Array2, w: &[f64]| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let lp = t.log_softmax(v);
            let (l, _) = aw_actor_loss(&mut t, lp, &actions, w).unwrap();
            (t.value(l).item(), t.value(lp).clone())
        };
        let (bc, lp) = eval(&logits, &[0.2; 5]);
        let expected: f64 = -(0..5).map(|i| lp.get(i, actions[i])).sum::<f64>() / 5.0;
        assert!((bc - expected).abs() < 1e-12);
        let (one, lp) = eval(&logits, &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((one + lp.get(2, 1)).abs() < 1e-12);

        let w = [0.1, 0.3, 0.2, 0.25, 0.15];
        let mut t = Tape::new();
        let x = t.variable(logits.clone());
        let lp = t.log_softmax(x);
        let (l, _) = aw_actor_loss(&mut t, lp, &actions, &w).unwrap();
        let g = t.backward(l).unwrap();
        let numeric = finite_difference(&logits, 1e-5, |v| eval(v, &w).0);
        assert!(relative_error(g.get(x).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn aw_loss_clamps_impossible_actions() {
        let mut t = Tape::new();
        let x = t.variable(Array2::from_rows(&[vec![0.0, -100.0], vec![0.0, 0.0]]).unwrap());
        let lp = t.log_softmax(x);
        let (l, clamped) = aw_actor_loss(&mut t, lp, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(clamped, 1);
        let v = t.value(l).item();
        assert!((v - (0.5 * 27.631021115928547 + 0.5 * 2f64.ln())).abs() < 1e-9);
        assert!(t.backward(l).unwrap().get(x).unwrap().is_finite());
    }

    #[test]
    fn td3_loss_direction_and_gradient() {
        let q = Array2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let x = t.variable(Array2::zeros(1, 2));
        let lp = t.log_softmax(x);
        let l = td3_actor_loss(&mut t, lp, &q).unwrap();
        let g = t.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        // descent raises the logit of the better action
        assert!(gx.get(0, 0) < 0.0 && gx.get(0, 1) > 0.0);

        let a = Array2::from_rows(&[vec![0.4, -1.0, 2.0]]).unwrap();
        assert_eq!(ensemble_min(&[a.clone(), a.clone()]), a);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_log_probs(&mut rng, 4, 3);
        let qm = Array2::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
        let f = |v: &Array2| {
            let mut t = Tape::new();
            let c = t.constant(v.clone());
            let lp = t.log_softmax(c);
            let l = td3_actor_loss(&mut t, lp, &qm).unwrap();
            t.value(l).item()
        };
        let mut t = Tape::new();
        let x = t.variable(logits.clone());
        let lp = t.log_softmax(x);
        let l = td3_actor_loss(&mut t, lp, &qm).unwrap();
        let g = t.backward(l).unwrap();
        assert!(relative_error(g.get(x).unwrap(), &finite_difference(&logits, 1e-5, f)) < 1e-6);
    }

    #[test]
    fn evaluation_sampling_limits() {
        let probs = [0.4, 0.0, 0.35, 0.25];
        let q = [0.1, 9.0, 0.7, 0.7];
        // support is {0, 2, 3}; best Q there is 0.7, lowest index 2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(evaluation_sampling_act(&probs, &q, 256, &mut rng).unwrap(), 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(
                evaluation_sampling_act(&probs, &q, 1, &mut r1).unwrap(),
                sample_categorical(&probs, &mut r2)
            );
        }
        assert!(evaluation_sampling_act(&probs, &q, 0, &mut rng).is_err());
    }

    #[test]
    fn evaluation_sampling_beats_plain_sampling_on_average() {
        let probs = [0.25, 0.25, 0.25, 0.25];
        let q = [0.3, -1.0, 2.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut es, mut plain) = (0.0, 0.0);
        for _ in 0..10_000 {
            let a = evaluation_sampling_act(&probs, &q, 4, &mut rng).unwrap();
            let b = sample_categorical(&probs, &mut rng);
            es += q[a];
            plain += q[b];
        }
        assert!(es > plain);
    }

    #[test]
    fn selector_registry() {
        for name in ["greedy", "sample", "qgreedy", "es:8"] {
            assert_eq!(action_selector(name).unwrap().name(), name);
        }
        assert!(action_selector("es:0").is_err());
        assert!(action_selector("best").is_err());
        for name in ACTOR_OBJECTIVES {
            assert_eq!(actor_objective(name).unwrap().name(), name);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Greedy.select(&[0.1, 0.7, 0.2], &[5.0, 0.0, 0.0], &mut rng), 1);
        assert_eq!(QGreedy.select(&[0.1, 0.7, 0.2], &[5.0, 0.0, 0.0], &mut rng), 0);
    }
}
