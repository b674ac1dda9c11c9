//! Forward ensemble, masked autoregressive backward network and categorical
//! policy, plus the z normalizations they consume.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{FbError, Result};
use crate::tensor::{Array2, Parameter, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Partition of the `d` task dimensions into `K` contiguous blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    sizes: Vec<usize>,
}

impl BlockLayout {
    pub fn equal(d: usize, k: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(FbError::contract(format!("need d ≥ 1 and K ≥ 1, got d={d}, K={k}")));
        }
        if k > d {
            return Err(FbError::contract(format!("K={k} blocks exceed d={d}")));
        }
        if d % k != 0 {
            return Err(FbError::contract(format!("K={k} does not divide d={d}; give explicit block sizes")));
        }
        Ok(Self { sizes: vec![d / k; k] })
    }

    pub fn explicit(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(FbError::contract(format!("block sizes {sizes:?} must be non-empty and positive")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn d(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    /// `[start, end)` of every block.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sizes
            .iter()
            .map(|&n| {
                let r = (start, start + n);
                start += n;
                r
            })
            .collect()
    }

    /// 1-based block label of coordinate `i`.
    pub fn label_of(&self, i: usize) -> usize {
        let mut end = 0;
        for (b, &n) in self.sizes.iter().enumerate() {
            end += n;
            if i < end {
                return b + 1;
            }
        }
        self.sizes.len()
    }
}

/// A task vector together with its block structure.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub z: Vec<f64>,
    pub layout: BlockLayout,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `z · √d / ‖z‖`.
pub fn normalize_z(z: &[f64]) -> Result<Vec<f64>> {
    let n = norm(z);
    if !(n > 0.0) || !n.is_finite() {
        return Err(FbError::DegenerateTask(format!("cannot normalize z with norm {n}")));
    }
    let c = (z.len() as f64).sqrt() / n;
    Ok(z.iter().map(|x| x * c).collect())
}

/// Residual autoregressive normalization: block `k` is multiplied by
/// `√(Σ_{i≤k} d_i) / ‖z_{1:k}‖`.
pub fn residual_ar_normalize(z: &[f64], layout: &BlockLayout) -> Result<Vec<f64>> {
    residual_ar_normalize_prefix(z, layout, layout.k())
}

/// Residual normalization of the first `known` blocks; later blocks are zero.
/// With `known = 0` the result is all zeros, which block 1 never reads.
pub fn residual_ar_normalize_prefix(z: &[f64], layout: &BlockLayout, known: usize) -> Result<Vec<f64>> {
    if z.len() != layout.d() {
        return Err(FbError::Dimension(format!("z has {} entries, layout expects {}", z.len(), layout.d())));
    }
    let mut out = vec![0.0; z.len()];
    let mut sq = 0.0;
    for (b, (s, e)) in layout.ranges().into_iter().enumerate().take(known) {
        sq += z[s..e].iter().map(|x| x * x).sum::<f64>();
        if b == 0 && !(sq > 0.0) {
            return Err(FbError::DegenerateTask("leading z block is zero".into()));
        }
        let c = (e as f64).sqrt() / sq.sqrt();
        for i in s..e {
            out[i] = z[i] * c;
        }
    }
    Ok(out)
}

/// Dense layer `x·w + b`, with an optional fixed connectivity mask on `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
    pub mask: Option<Array2>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    w: Var,
    b: Var,
    mask: Option<Var>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Array2::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
        Self {
            w: Parameter::new(format!("{name}.w"), w),
            b: Parameter::new(format!("{name}.b"), Array2::zeros(1, fan_out)),
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Array2) -> Result<Self> {
        if mask.shape() != self.w.value.shape() {
            return Err(FbError::Dimension(format!(
                "mask {:?} does not match weight {:?}",
                mask.shape(),
                self.w.value.shape()
            )));
        }
        // masked-out weights are stored as zero so checkpoints stay canonical
        self.w.value = self.w.value.zip_map(&mask, |w, m| w * m);
        self.mask = Some(mask);
        Ok(self)
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            w: tape.param(&self.w, trainable),
            b: tape.param(&self.b, trainable),
            mask: self.mask.as_ref().map(|m| tape.constant(m.clone())),
        }
    }
}

fn apply(tape: &mut Tape, v: &LinearVars, x: Var) -> Result<Var> {
    match v.mask {
        Some(m) => tape.masked_linear(x, v.w, m, v.b),
        None => tape.linear(x, v.w, v.b),
    }
}

/// Parameters of one network bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: Vec<LinearVars>,
    trainable: bool,
}

impl Bound {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Shared plumbing for networks that are a fixed list of linear layers.
pub trait Layered {
    fn layers(&self) -> Vec<&Linear>;
    fn layers_mut(&mut self) -> Vec<&mut Linear>;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound { layers: self.layers().into_iter().map(|l| l.bind(tape, trainable)).collect(), trainable }
    }

    fn params(&self) -> Vec<&Parameter> {
        self.layers().into_iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers_mut().into_iter().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Adds the gradients of a trainable binding into the parameters.
    fn accumulate(&mut self, grads: &crate::tensor::Gradients, bound: &Bound) {
        if !bound.trainable {
            return;
        }
        for (l, v) in self.layers_mut().into_iter().zip(&bound.layers) {
            l.w.accumulate(grads, v.w);
            l.b.accumulate(grads, v.b);
        }
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Stream `x → Linear → LayerNorm → tanh`.
fn stream(tape: &mut Tape, v: &LinearVars, x: Var) -> Result<Var> {
    let h = apply(tape, v, x)?;
    let h = tape.layer_norm(h, LN_EPS);
    Ok(tape.tanh(h))
}

/// Two-stream MLP shared by the forward members and the policy: one stream
/// sees the state, the other the state and `z`; a relu trunk follows.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamNet {
    pub s_stream: Linear,
    pub sz_stream: Linear,
    pub trunk: Linear,
    pub head: Linear,
}

impl TwoStreamNet {
    fn new(name: &str, enc_dim: usize, d: usize, hidden: usize, out: usize, head_gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            s_stream: Linear::new(&format!("{name}.s"), enc_dim, hidden, 1.0, rng),
            sz_stream: Linear::new(&format!("{name}.sz"), enc_dim + d, hidden, 1.0, rng),
            trunk: Linear::new(&format!("{name}.trunk"), 2 * hidden, hidden, 1.0, rng),
            head: Linear::new(&format!("{name}.head"), hidden, out, head_gain, rng),
        }
    }

    /// `enc` is `n×enc_dim`, `z` is `n×d`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, enc: Var, z: Var) -> Result<Var> {
        let l = &b.layers;
        let hs = stream(tape, &l[0], enc)?;
        let sz = tape.concat_cols(&[enc, z])?;
        let hz = stream(tape, &l[1], sz)?;
        let h = tape.concat_cols(&[hs, hz])?;
        let h = apply(tape, &l[2], h)?;
        let h = tape.relu(h);
        apply(tape, &l[3], h)
    }

    pub fn out_dim(&self) -> usize {
        self.head.w.value.cols()
    }
}

impl Layered for TwoStreamNet {
    fn layers(&self) -> Vec<&Linear> {
        vec![&self.s_stream, &self.sz_stream, &self.trunk, &self.head]
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.s_stream, &mut self.sz_stream, &mut self.trunk, &mut self.head]
    }
}

/// One forward member. A single pass produces `F(s, a, z)` for every action,
/// laid out as `n × (A·d)` with action `a` in columns `a·d..(a+1)·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardNet {
    pub net: TwoStreamNet,
    pub d: usize,
    pub n_actions: usize,
}

impl ForwardNet {
    pub fn new(name: &str, enc_dim: usize, d: usize, n_actions: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self { net: TwoStreamNet::new(name, enc_dim, d, hidden, n_actions * d, 1.0, rng), d, n_actions }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, enc: Var, z: Var) -> Result<Var> {
        self.net.forward(tape, b, enc, z)
    }
}

impl Layered for ForwardNet {
    fn layers(&self) -> Vec<&Linear> {
        self.net.layers()
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        self.net.layers_mut()
    }
}

/// `M` independent forward members with Polyak targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardEnsemble {
    pub members: Vec<ForwardNet>,
    pub targets: Vec<ForwardNet>,
}

impl ForwardEnsemble {
    pub fn new(m: usize, enc_dim: usize, d: usize, n_actions: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if m == 0 {
            return Err(FbError::contract("forward ensemble needs at least one member"));
        }
        let members: Vec<ForwardNet> =
            (0..m).map(|i| ForwardNet::new(&format!("F{i}"), enc_dim, d, n_actions, hidden, rng)).collect();
        let targets = members.clone();
        Ok(Self { members, targets })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Categorical policy `π(·|s, z)`; the head outputs logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub net: TwoStreamNet,
}

impl PolicyNet {
    pub fn new(enc_dim: usize, d: usize, n_actions: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self { net: TwoStreamNet::new("pi", enc_dim, d, hidden, n_actions, 0.01, rng) }
    }

    /// Log-probabilities, `n × A`.
    pub fn log_probs(&self, tape: &mut Tape, b: &Bound, enc: Var, z: Var) -> Result<Var> {
        let logits = self.net.forward(tape, b, enc, z)?;
        Ok(tape.log_softmax(logits))
    }

    pub fn n_actions(&self) -> usize {
        self.net.out_dim()
    }
}

impl Layered for PolicyNet {
    fn layers(&self) -> Vec<&Linear> {
        self.net.layers()
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        self.net.layers_mut()
    }
}

/// Backward network `B(s, z)` whose output block `i` reads only `s` and the
/// z blocks before `i`.
///
/// Units carry labels: state inputs and the state stream are 0, z inputs of
/// block `k` are `k`, hidden units are spread over `1..=K` and output units
/// take their block index. First-layer z connections need `j < i`; later
/// layers need `j ≤ i`. The z-dependent path has no layer norm, since row
/// statistics would mix blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardNet {
    pub layout: BlockLayout,
    pub s_stream: Linear,
    pub sz_stream: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

fn hidden_labels(h: usize, k: usize) -> Vec<usize> {
    (0..h).map(|u| 1 + u * k / h).collect()
}

fn mask_from(in_labels: &[usize], out_labels: &[usize], strict: bool) -> Array2 {
    Array2::from_fn(in_labels.len(), out_labels.len(), |r, c| {
        let (j, i) = (in_labels[r], out_labels[c]);
        let ok = j == 0 || if strict { j < i } else { j <= i };
        if ok {
            1.0
        } else {
            0.0
        }
    })
}

impl BackwardNet {
    pub fn new(layout: BlockLayout, enc_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d, k) = (layout.d(), layout.k());
        if hidden < k {
            return Err(FbError::contract(format!("hidden width {hidden} smaller than K={k}")));
        }
        let hl = hidden_labels(hidden, k);
        let z_labels: Vec<usize> = (0..d).map(|i| layout.label_of(i)).collect();
        let sz_in: Vec<usize> = std::iter::repeat(0).take(enc_dim).chain(z_labels.iter().copied()).collect();
        let cat_labels: Vec<usize> = std::iter::repeat(0).take(hidden).chain(hl.iter().copied()).collect();
        Ok(Self {
            s_stream: Linear::new("B.s", enc_dim, hidden, 1.0, rng),
            sz_stream: Linear::new("B.sz", enc_dim + d, hidden, 1.0, rng).with_mask(mask_from(&sz_in, &hl, true))?,
            hidden: Linear::new("B.h", 2 * hidden, hidden, 1.0, rng).with_mask(mask_from(&cat_labels, &hl, false))?,
            out: Linear::new("B.out", hidden, d, 1.0, rng).with_mask(mask_from(&hl, &z_labels, false))?,
            layout,
        })
    }

    /// `z` must already be residual-normalized; rows are `n×d`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, enc: Var, z: Var) -> Result<Var> {
        let l = &b.layers;
        let hs = stream(tape, &l[0], enc)?;
        let sz = tape.concat_cols(&[enc, z])?;
        let hz = apply(tape, &l[1], sz)?;
        let hz = tape.tanh(hz);
        let h = tape.concat_cols(&[hs, hz])?;
        let h = apply(tape, &l[2], h)?;
        let h = tape.relu(h);
        let o = apply(tape, &l[3], h)?;
        Ok(tape.block_normalize(o, &self.layout.ranges()))
    }
}

impl Layered for BackwardNet {
    fn layers(&self) -> Vec<&Linear> {
        vec![&self.s_stream, &self.sz_stream, &self.hidden, &self.out]
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.s_stream, &mut self.sz_stream, &mut self.hidden, &mut self.out]
    }
}

/// Polyak-updates every parameter of `target` toward `online`.
pub fn polyak_network<N: Layered>(target: &mut N, online: &N, zeta: f64) -> Result<()> {
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        crate::tensor::polyak_update(t, o, zeta)?;
    }
    Ok(())
}

/// Per-state input table: normalized coordinates, optionally followed by a
/// one-hot state code.
pub fn state_encoding(features: &Array2, one_hot: bool) -> Array2 {
    let n = features.rows();
    let extra = if one_hot { n } else { 0 };
    Array2::from_fn(n, features.cols() + extra, |s, c| {
        if c < features.cols() {
            features.get(s, c)
        } else if c - features.cols() == s {
            1.0
        } else {
            0.0
        }
    })
}

/// Rows `a_i·d..(a_i+1)·d` of an all-actions forward output, as `n×d`.
pub fn select_actions(tape: &mut Tape, all: Var, actions: &[usize], d: usize) -> Result<Var> {
    let (n, cols) = tape.value(all).shape();
    if actions.len() != n || cols % d != 0 {
        return Err(FbError::Dimension(format!("select {} actions from {n}x{cols} with d={d}", actions.len())));
    }
    let mut mask = Array2::zeros(n, cols);
    for (i, &a) in actions.iter().enumerate() {
        mask.row_mut(i)[a * d..(a + 1) * d].iter_mut().for_each(|x| *x = 1.0);
    }
    let fold = Array2::from_fn(cols, d, |r, c| if r % d == c { 1.0 } else { 0.0 });
    let mask = tape.constant(mask);
    let fold = tape.constant(fold);
    let picked = tape.mul(all, mask)?;
    tape.matmul(picked, fold)
}

/// `Q(s_i, a) = F(s_i, a, z_i)ᵀ z_i` for every action, as `n×A`.
pub fn q_values(tape: &mut Tape, all: Var, z: &Array2) -> Result<Var> {
    let (n, cols) = tape.value(all).shape();
    let d = z.cols();
    if z.rows() != n || cols % d != 0 {
        return Err(FbError::Dimension(format!("q_values: F is {n}x{cols}, z is {:?}", z.shape())));
    }
    let a = cols / d;
    let tiled = Array2::from_fn(n, cols, |r, c| z.get(r, c % d));
    let fold = Array2::from_fn(cols, a, |r, c| if r / d == c { 1.0 } else { 0.0 });
    let tiled = tape.constant(tiled);
    let fold = tape.constant(fold);
    let p = tape.mul(all, tiled)?;
    tape.matmul(p, fold)
}
