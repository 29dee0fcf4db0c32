//! Independent oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use mtclar_core::losses::{
    contrastive_loss_grad, cross_entropy_grad, delta_loss_grad, sl_regression_loss_grad, ContrastiveConfig,
    DynamicWeightSchedule,
};
use mtclar_core::nn::{seeded_rng, Gradients, Linear, Mlp, Mode, NormStats, ParamGroup, ParamStore, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn naive_rmse(y: &[f64], yhat: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += (y[i] - yhat[i]).powi(2);
    }
    (s / y.len() as f64).sqrt()
}

fn mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    let mut s = 0.0;
    for v in x {
        s += (v - m) * (v - m);
    }
    (s / x.len() as f64).sqrt()
}

pub fn naive_pcc(y: &[f64], yhat: &[f64]) -> f64 {
    let (my, mh) = (mean(y), mean(yhat));
    let mut num = 0.0;
    for i in 0..y.len() {
        num += (y[i] - my) * (yhat[i] - mh);
    }
    num / y.len() as f64 / (sd(y) * sd(yhat))
}

/// `2 sd_y sd_yhat pcc / (sd_y^2 + sd_yhat^2 + (mean_y - mean_yhat)^2)`.
pub fn naive_ccc(y: &[f64], yhat: &[f64]) -> f64 {
    let (sy, sh) = (sd(y), sd(yhat));
    let gap = mean(y) - mean(yhat);
    2.0 * sy * sh * naive_pcc(y, yhat) / (sy * sy + sh * sh + gap * gap)
}

pub fn naive_sagr(y: &[f64], yhat: &[f64]) -> f64 {
    let mut hits = 0;
    for i in 0..y.len() {
        let same = (y[i] > 0.0 && yhat[i] > 0.0) || (y[i] < 0.0 && yhat[i] < 0.0) || (y[i] == 0.0 && yhat[i] == 0.0);
        if same {
            hits += 1;
        }
    }
    hits as f64 / y.len() as f64
}

/// Largest gap between the two empirical CDFs, checked at every sample point.
pub fn naive_ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let sorted = |s: &[f64]| {
        let mut s = s.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let cdf = |s: &[f64], t: f64| s.partition_point(|&v| v <= t) as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (cdf(&sa, t) - cdf(&sb, t)).abs())
        .fold(0.0, f64::max)
}

/// Kolmogorov survival function from the theta-function dual series
/// `1 - sqrt(2 pi)/x * sum_k exp(-(2k-1)^2 pi^2 / (8 x^2))`.
pub fn kolmogorov_sf_dual(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let pi = std::f64::consts::PI;
    let mut s = 0.0;
    for k in 1..=2000 {
        let m = (2 * k - 1) as f64;
        s += (-m * m * pi * pi / (8.0 * x * x)).exp();
    }
    1.0 - (2.0 * pi).sqrt() / x * s
}

pub fn ks_p_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    kolmogorov_sf_dual((n * m / (n + m)).sqrt() * naive_ks_statistic(a, b))
}

/// Siamese network with under 1k parameters: a shared linear encoder, three
/// normalised projectors on the concatenation and a regressor on the first stream.
pub struct TinySiamese {
    pub store: ParamStore,
    pub stats: Vec<NormStats>,
    enc: Linear,
    heads: [Mlp; 3],
    reg: Mlp,
}

pub struct TinyBatch {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub similar: Vec<bool>,
    pub dv: Vec<f64>,
    pub da: Vec<f64>,
    pub v: Vec<f64>,
    pub ar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    Delta,
    SlRegression,
    /// All four pairwise terms with fixed random weights.
    Cumulative,
}

impl TinySiamese {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::default();
        let mut stats = Vec::new();
        let mut rng = seeded_rng(seed);
        let enc = Linear::new(&mut store, &mut rng, "enc", ParamGroup::Encoder, 4, 6);
        let mk = |store: &mut ParamStore, stats: &mut Vec<NormStats>, rng: &mut _, name: &str, out| {
            Mlp::new(store, stats, rng, name, ParamGroup::Projector(1), 12, &[8, out])
        };
        let heads = [
            mk(&mut store, &mut stats, &mut rng, "p1", 2),
            mk(&mut store, &mut stats, &mut rng, "p2", 1),
            mk(&mut store, &mut stats, &mut rng, "p3", 1),
        ];
        let reg = Mlp::new(&mut store, &mut stats, &mut rng, "reg", ParamGroup::SlRegressor, 6, &[5, 2]);
        Self {
            store,
            stats,
            enc,
            heads,
            reg,
        }
    }

    pub fn batch(seed: u64, n: usize) -> TinyBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let a = m(n, 4);
        let b = m(n, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut v = || (0..n).map(|_| rng.random_range(-0.9..0.9)).collect::<Vec<f64>>();
        let (dv, da, vv, ar) = (v(), v(), v(), v());
        TinyBatch {
            a,
            b,
            similar: (0..n).map(|i| i % 2 == 0).collect(),
            dv,
            da,
            v: vv,
            ar,
        }
    }

    /// Records the chosen loss and returns the tape with its root.
    pub fn loss_on<'p>(
        &self,
        store: &'p ParamStore,
        batch: &TinyBatch,
        kind: LossKind,
        lambdas: [f64; 4],
    ) -> (Tape<'p>, Var) {
        let sched = DynamicWeightSchedule::new(2.0, 2, 10).unwrap();
        let epoch = 3;
        let cfg = ContrastiveConfig::new(0.25).unwrap();
        let mut t = Tape::new(store, Mode::Train);
        let xa = t.input(batch.a.clone().into_dyn());
        let xb = t.input(batch.b.clone().into_dyn());
        let r1 = t.linear(xa, &self.enc).unwrap();
        let r2 = t.linear(xb, &self.enc).unwrap();
        let col = |g: Vec<f64>| ArrayD::from_shape_vec(IxDyn(&[g.len(), 1]), g).unwrap();
        let mut terms = Vec::new();
        if kind == LossKind::SlRegression {
            let out = self.reg.forward(&mut t, &self.stats, r1).unwrap();
            let o = t.value2(out).to_owned();
            let (pv, pa) = (o.column(0).to_vec(), o.column(1).to_vec());
            let (l, gv, ga) = sl_regression_loss_grad(&pv, &pa, &batch.v, &batch.ar, epoch, &sched).unwrap();
            let mut g = Array2::zeros(o.dim());
            g.column_mut(0).assign(&ndarray::Array1::from(gv));
            g.column_mut(1).assign(&ndarray::Array1::from(ga));
            let node = t.loss(l, vec![(out, g.into_dyn())]);
            return (t, node);
        }
        let cat = t.concat(r1, r2).unwrap();
        if matches!(kind, LossKind::Contrastive | LossKind::Cumulative) {
            let (l, g1, g2) = contrastive_loss_grad(t.value2(r1), t.value2(r2), &batch.similar, &cfg).unwrap();
            terms.push((t.loss(l, vec![(r1, g1.into_dyn()), (r2, g2.into_dyn())]), lambdas[0]));
        }
        if kind == LossKind::Cumulative {
            let logits = self.heads[0].forward(&mut t, &self.stats, cat).unwrap();
            let labels: Vec<usize> = batch.similar.iter().map(|&s| s as usize).collect();
            let (l, g) = cross_entropy_grad(t.value2(logits), &labels).unwrap();
            terms.push((t.loss(l, vec![(logits, g.into_dyn())]), lambdas[1]));
        }
        if matches!(kind, LossKind::Delta | LossKind::Cumulative) {
            for (k, target) in [(1, &batch.dv), (2, &batch.da)] {
                let out = self.heads[k].forward(&mut t, &self.stats, cat).unwrap();
                let pred = t.value2(out).column(0).to_vec();
                let (l, g) = delta_loss_grad(&pred, target, epoch, &sched).unwrap();
                terms.push((t.loss(l, vec![(out, col(g))]), lambdas[k + 1]));
            }
        }
        let root = t.weighted_sum(terms);
        (t, root)
    }

    pub fn loss_value(&self, store: &ParamStore, batch: &TinyBatch, kind: LossKind, lambdas: [f64; 4]) -> f64 {
        let (t, root) = self.loss_on(store, batch, kind, lambdas);
        t.value(root).sum()
    }

    pub fn gradients(&self, batch: &TinyBatch, kind: LossKind, lambdas: [f64; 4]) -> Gradients {
        let (t, root) = self.loss_on(&self.store, batch, kind, lambdas);
        t.backward(root)
    }
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over every
/// parameter, with central differences of step `h`.
pub fn gradient_relative_error(net: &TinySiamese, batch: &TinyBatch, kind: LossKind, lambdas: [f64; 4]) -> f64 {
    let h = 1e-5;
    let grads = net.gradients(batch, kind, lambdas);
    let mut store = net.store.clone();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for id in net.store.ids() {
        let len = store.get(id).len();
        for i in 0..len {
            let orig = store.get(id).as_slice().unwrap()[i];
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
            let up = net.loss_value(&store, batch, kind, lambdas);
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
            let down = net.loss_value(&store, batch, kind, lambdas);
            store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.as_slice().unwrap()[i]).unwrap_or(0.0);
            diff += (numeric - analytic).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

/// 8-pixel encoder with narrow heads, for fast end-to-end runs.
pub fn tiny_config(epochs: usize) -> mtclar_core::train::TrainConfig {
    use mtclar_core::augment::AugmentationSpec;
    use mtclar_core::network::EncoderSpec;
    let mut cfg = mtclar_core::train::TrainConfig::desk().with_epochs(epochs).unwrap();
    cfg.encoder = EncoderSpec::small_cnn(8);
    cfg.augmentation = AugmentationSpec::for_side(8);
    cfg.projector_hidden = Some(vec![32, 16]);
    cfg.sl_hidden = Some(vec![32]);
    cfg.batch_size = 16;
    cfg
}
