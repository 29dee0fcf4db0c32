//! Minimal reverse-mode differentiation over `f64` ndarray tensors.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] borrows the store, records
//! the forward pass and produces parameter gradients on [`Tape::backward`].
//! Loss nodes carry gradients precomputed by the functions in
//! [`crate::losses`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which sub-network a parameter belongs to; optimisers select by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Projector(u8),
    SlClassifier,
    SlRegressor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Running statistics of one normalisation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl NormStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Relu(Var),
    NormTrain {
        x: Var,
        gamma: ParamId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    NormEval {
        x: Var,
        gamma: ParamId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        beta: ParamId,
    },
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        cols: Array3<f64>,
        in_shape: [usize; 4],
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat(Var, Var),
    Loss(Vec<(Var, ArrayD<f64>)>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Parameter gradients indexed like the store; `None` for untouched parameters.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    stat_updates: Vec<(usize, NormStats)>,
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// Column range `x` of output row for kernel offset `kx` whose source stays inside `[0, w)`.
fn valid_span(w: usize, pad: usize, kx: usize) -> (usize, usize) {
    (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w))
}

/// Writes the `(c*k*k, h*w)` patch matrix of one `(c, h, w)` image into `dst`.
fn im2col(src: &[f64], [c, h, w]: [usize; 3], k: usize, dst: &mut [f64]) {
    let pad = k / 2;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut dst[((ci * k + ky) * k + kx) * h * w..][..h * w];
                let (x0, x1) = valid_span(w, pad, kx);
                for y in 0..h {
                    let Some(sy) = (y + ky).checked_sub(pad).filter(|&sy| sy < h) else {
                        continue;
                    };
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (ci * h + sy) * w + x0 + kx - pad;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + x1 - x0]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into image layout.
fn col2im(cols: &[f64], [c, h, w]: [usize; 3], k: usize, dst: &mut [f64]) {
    let pad = k / 2;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * h * w..][..h * w];
                let (x0, x1) = valid_span(w, pad, kx);
                for y in 0..h {
                    let Some(sy) = (y + ky).checked_sub(pad).filter(|&sy| sy < h) else {
                        continue;
                    };
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (ci * h + sy) * w + x0 + kx - pad;
                    for (d, s) in dst[s0..s0 + x1 - x0].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        view2(self.value(v))
    }

    /// Running-statistics updates produced by training-mode normalisation,
    /// as `(stats index, new stats)`.
    pub fn take_stat_updates(&mut self) -> Vec<(usize, NormStats)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// `x W + b` for `x` of shape (batch, in) and `W` of shape (in, out).
    pub fn linear(&mut self, x: Var, layer: &Linear) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.shape()[1] != layer.input {
            return Err(Error::Shape {
                expected: format!("(batch, {})", layer.input),
                actual: format!("{:?}", xv.shape()),
            });
        }
        let w = view2(self.params.get(layer.w));
        let b = self.params.get(layer.b).view().into_dimensionality::<Ix1>().expect("rank 1");
        let out = view2(xv).dot(&w) + b;
        Ok(self.push(out.into_dyn(), Op::Linear { x, w: layer.w, b: layer.b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Per-feature standardisation with learnable scale and shift. Batch
    /// statistics in training mode, `stats` in evaluation mode.
    pub fn normalize(&mut self, x: Var, layer: &Norm, stats: &NormStats) -> Result<Var> {
        let xv = view2(self.value(x)).to_owned();
        if xv.ncols() != layer.dim {
            return Err(Error::Shape {
                expected: format!("(batch, {})", layer.dim),
                actual: format!("{:?}", xv.dim()),
            });
        }
        let gamma = self.params.get(layer.gamma).view().into_dimensionality::<Ix1>().expect("rank 1");
        let beta = self.params.get(layer.beta).view().into_dimensionality::<Ix1>().expect("rank 1");
        let n = xv.nrows() as f64;
        match self.mode {
            Mode::Train => {
                let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &xv - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = &centered * &inv_std;
                let out = &xhat * &gamma + &beta;
                let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
                let updated = NormStats {
                    mean: &stats.mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM,
                    var: &stats.var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM,
                };
                self.stat_updates.push((layer.stats, updated));
                Ok(self.push(
                    out.into_dyn(),
                    Op::NormTrain {
                        x,
                        gamma: layer.gamma,
                        xhat,
                        inv_std,
                    },
                ))
            }
            Mode::Eval => {
                let inv_std = stats.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = (&xv - &stats.mean) * &inv_std;
                let out = &xhat * &gamma + &beta;
                Ok(self.push(
                    out.into_dyn(),
                    Op::NormEval {
                        x,
                        gamma: layer.gamma,
                        xhat,
                        inv_std,
                        beta: layer.beta,
                    },
                ))
            }
        }
    }

    /// Stride-1 convolution with zero "same" padding; `x` is (n, c, h, w).
    pub fn conv2d(&mut self, x: Var, layer: &Conv2d) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 4 || shape[1] != layer.cin {
            return Err(Error::Shape {
                expected: format!("(batch, {}, h, w)", layer.cin),
                actual: format!("{shape:?}"),
            });
        }
        let in_shape = [shape[0], shape[1], shape[2], shape[3]];
        let [n, c, h, w] = in_shape;
        let (k, oc, hw) = (layer.k, layer.cout, h * w);
        let src = xv.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut cols = Array3::<f64>::zeros((n, c * k * k, hw));
        let wt = view2(self.params.get(layer.w));
        let bias = self.params.get(layer.b);
        let mut out = Array3::<f64>::zeros((n, oc, hw));
        for ni in 0..n {
            let mut patch = cols.index_axis_mut(Axis(0), ni);
            im2col(
                &src[ni * c * hw..(ni + 1) * c * hw],
                [c, h, w],
                k,
                patch.as_slice_mut().expect("contiguous"),
            );
            let mut o = out.index_axis_mut(Axis(0), ni);
            general_mat_mul(1.0, &wt.t(), &patch, 0.0, &mut o);
            for (mut row, &bv) in o.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
        }
        let out = out.into_shape_with_order(IxDyn(&[n, oc, h, w])).expect("same size");
        let cols = if self.mode == Mode::Train { cols } else { Array3::zeros((0, 0, 0)) };
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w: layer.w,
                b: layer.b,
                cols,
                in_shape,
                k,
            },
        ))
    }

    /// 2x2 max pooling with stride 2 over (n, c, h, w); odd edges are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.as_slice().expect("contiguous");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let o = out.as_slice_mut().expect("contiguous");
            for plane in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (plane * h + 2 * y + dy) * w + 2 * xx + dx;
                                if src[idx] > best_v || best == usize::MAX {
                                    best_v = src[idx];
                                    best = idx;
                                }
                            }
                        }
                        let oi = (plane * oh + y) * ow + xx;
                        o[oi] = best_v;
                        argmax[oi] = best;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let rest = xv.len() / n.max(1);
        let out = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, rest]))
            .expect("same element count");
        self.push(out, Op::Reshape(x))
    }

    /// Column-wise concatenation `[a | b]` of two (batch, *) matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value2(a), self.value2(b));
        if av.nrows() != bv.nrows() {
            return Err(Error::LengthMismatch {
                left: av.nrows(),
                right: bv.nrows(),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("matching rows");
        Ok(self.push(out.into_dyn(), Op::Concat(a, b)))
    }

    /// A scalar loss whose gradients with respect to `inputs` are already known.
    pub fn loss(&mut self, value: f64, inputs: Vec<(Var, ArrayD<f64>)>) -> Var {
        self.push(scalar(value), Op::Loss(inputs))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|(v, w)| self.value(*v).sum() * w).sum();
        self.push(scalar(total), Op::WeightedSum(terms))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut node_grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        node_grads.resize_with(self.nodes.len(), || None);
        let mut pgrads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.params.len());
        pgrads.resize_with(self.params.len(), || None);
        node_grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        fn acc(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let g2 = view2(&g);
                    let xv = view2(&self.nodes[x.0].value);
                    let wv = view2(self.params.get(*w));
                    let mut gw = Array2::<f64>::zeros(wv.raw_dim());
                    general_mat_mul(1.0, &xv.t(), &g2, 0.0, &mut gw);
                    acc(&mut pgrads[w.0], gw.into_dyn());
                    acc(&mut pgrads[b.0], g2.sum_axis(Axis(0)).into_dyn());
                    acc(&mut node_grads[x.0], g2.dot(&wv.t()).into_dyn());
                }
                Op::Relu(x) => {
                    let mask = self.nodes[idx].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut node_grads[x.0], g * mask);
                }
                Op::NormTrain { x, gamma, xhat, inv_std } => {
                    let g2 = view2(&g);
                    let n = g2.nrows() as f64;
                    let gam = self.params.get(*gamma).view().into_dimensionality::<Ix1>().expect("rank 1");
                    acc(&mut pgrads[gamma.0], (&g2 * xhat).sum_axis(Axis(0)).into_dyn());
                    let beta_id = ParamId(gamma.0 + 1);
                    acc(&mut pgrads[beta_id.0], g2.sum_axis(Axis(0)).into_dyn());
                    let dxhat = &g2 * &gam;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let dx = (&dxhat * n - &sum_d - xhat * &sum_dx) * &(inv_std / n);
                    acc(&mut node_grads[x.0], dx.into_dyn());
                }
                Op::NormEval { x, gamma, xhat, inv_std, beta } => {
                    let g2 = view2(&g);
                    let gam = self.params.get(*gamma).view().into_dimensionality::<Ix1>().expect("rank 1");
                    acc(&mut pgrads[gamma.0], (&g2 * xhat).sum_axis(Axis(0)).into_dyn());
                    acc(&mut pgrads[beta.0], g2.sum_axis(Axis(0)).into_dyn());
                    acc(&mut node_grads[x.0], (&g2 * &(&gam * inv_std)).into_dyn());
                }
                Op::Conv { x, w, b, cols, in_shape, k } => {
                    let [n, c, h, wd] = *in_shape;
                    let hw = h * wd;
                    let wv = view2(self.params.get(*w));
                    let oc = wv.ncols();
                    let g3 = g.as_standard_layout().into_owned().into_shape_with_order((n, oc, hw)).expect("same size");
                    let mut gw = Array2::<f64>::zeros(wv.raw_dim());
                    let mut dcols = Array2::<f64>::zeros((wv.nrows(), hw));
                    let mut dx = ArrayD::<f64>::zeros(IxDyn(in_shape));
                    let d = dx.as_slice_mut().expect("contiguous");
                    for ni in 0..n {
                        let gi = g3.index_axis(Axis(0), ni);
                        general_mat_mul(1.0, &cols.index_axis(Axis(0), ni), &gi.t(), 1.0, &mut gw);
                        general_mat_mul(1.0, &wv, &gi, 0.0, &mut dcols);
                        col2im(
                            dcols.as_slice().expect("contiguous"),
                            [c, h, wd],
                            *k,
                            &mut d[ni * c * hw..(ni + 1) * c * hw],
                        );
                    }
                    acc(&mut pgrads[w.0], gw.into_dyn());
                    acc(&mut pgrads[b.0], g3.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
                    acc(&mut node_grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                    let d = dx.as_slice_mut().expect("contiguous");
                    let gs = g.as_standard_layout();
                    for (gi, &src) in gs.iter().zip(argmax) {
                        d[src] += gi;
                    }
                    acc(&mut node_grads[x.0], dx);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let back = g.as_standard_layout().into_owned().into_shape_with_order(shape).expect("same size");
                    acc(&mut node_grads[x.0], back);
                }
                Op::Concat(a, b) => {
                    let g2 = view2(&g);
                    let split = self.nodes[a.0].value.shape()[1];
                    acc(&mut node_grads[a.0], g2.slice(ndarray::s![.., ..split]).to_owned().into_dyn());
                    acc(&mut node_grads[b.0], g2.slice(ndarray::s![.., split..]).to_owned().into_dyn());
                }
                Op::Loss(inputs) => {
                    let upstream = g.sum();
                    for (v, local) in inputs {
                        acc(&mut node_grads[v.0], local * upstream);
                    }
                }
                Op::WeightedSum(terms) => {
                    let upstream = g.sum();
                    for (v, w) in terms {
                        let shape = self.nodes[v.0].value.raw_dim();
                        acc(&mut node_grads[v.0], ArrayD::from_elem(shape, w * upstream));
                    }
                }
            }
        }
        Gradients { grads: pgrads }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.weight"), group, uniform(rng, &[input, output], bound));
        let b = store.add(format!("{name}.bias"), group, uniform(rng, &[output], bound));
        Self { w, b, input, output }
    }
}

/// Standardisation layer; `stats` indexes the model's running statistics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub stats: usize,
}

impl Norm {
    /// `gamma` and `beta` are registered consecutively; the backward pass relies on it.
    pub fn new(store: &mut ParamStore, stats: &mut Vec<NormStats>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, ArrayD::ones(IxDyn(&[dim])));
        let beta = store.add(format!("{name}.beta"), group, ArrayD::zeros(IxDyn(&[dim])));
        stats.push(NormStats::new(dim));
        Self {
            gamma,
            beta,
            dim,
            stats: stats.len() - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), group, uniform(rng, &[fan_in, cout], bound));
        let b = store.add(format!("{name}.bias"), group, uniform(rng, &[cout], bound));
        Self { w, b, cin, cout, k }
    }
}

/// A stack of `normalise -> ReLU -> linear` blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub blocks: Vec<(Norm, Linear)>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        stats: &mut Vec<NormStats>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        widths: &[usize],
    ) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            let norm = Norm::new(store, stats, &format!("{name}.{i}.norm"), group, prev);
            let lin = Linear::new(store, rng, &format!("{name}.{i}.fc"), group, prev, w);
            blocks.push((norm, lin));
            prev = w;
        }
        Self { blocks }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks.first().map(|(_, l)| l.input).unwrap_or(0)
    }

    /// Output width of every fully-connected layer, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|(_, l)| l.output).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, stats: &[NormStats], x: Var) -> Result<Var> {
        let mut h = x;
        for (norm, lin) in &self.blocks {
            let z = tape.normalize(h, norm, &stats[norm.stats])?;
            let a = tape.relu(z);
            h = tape.linear(a, lin)?;
        }
        Ok(h)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adam with the usual default moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient and belongs to an allowed group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, allow: impl Fn(ParamGroup) -> bool) {
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in 0..store.len() {
            if !allow(store.groups[id]) {
                continue;
            }
            let Some(g) = &grads.grads[id] else { continue };
            let m = self.m[id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.values[id].as_slice_mut().expect("contiguous");
            let (m, v) = (m.as_slice_mut().expect("contiguous"), v.as_slice_mut().expect("contiguous"));
            let g = g.as_standard_layout();
            let g = g.as_slice().expect("standard layout");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
