//! Training loops, learning-rate schedules and fold-wise fine-tuning.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_transform, train_transform, AugmentationSpec};
use crate::checkpoint;
use crate::datamodel::{Dataset, DimensionalLabel, EmotionCategory, FaceSample, FoldAssignment, FoldStrategy, Image};
use crate::error::{Error, Result};
use crate::fsl::{label_corpus, AnchorConfig};
use crate::losses::{
    contrastive_loss_grad, cross_entropy_grad, delta_loss_grad, sl_regression_loss_grad, ContrastiveConfig,
    DynamicWeightSchedule, ShakeShake, ShakeShakeDraw,
};
use crate::metrics::{evaluate, FrameKey, MetricReport};
use crate::network::{EncoderSpec, HeadSet, ModelSpec, MtClar, EMBEDDING_DIM};
use crate::nn::{Adam, Mode, ParamGroup, Tape, Var};
use crate::sampler::{generate_pair_indices, PairIndex, DEFAULT_SIMILAR_FRACTION};

/// Relative improvement a plateau monitor needs to count as progress.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Plateau { factor: f64, patience: usize },
    Step { factor: f64, every: usize },
}

/// `base * factor^-(epoch / every)`.
pub fn step_lr(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base / factor.powi((epoch / every.max(1)) as i32)
}

/// Divides the rate by `factor` once the monitored value has failed to
/// improve for more than `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct Plateau {
    factor: f64,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
    lr: f64,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's monitored value and returns the rate for the next epoch.
    pub fn observe(&mut self, value: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => value < b - PLATEAU_THRESHOLD * b.abs(),
        };
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub shake_shake: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            shake_shake: 1,
            init: 2,
        }
    }
}

/// Which objectives a pair-training run optimises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tasks {
    /// Contrastive, cross-entropy and both differential losses.
    #[default]
    Multi,
    /// Contrastive and cross-entropy only.
    SimilarityOnly,
    /// Differential losses only, for data without categories.
    DeltasOnly,
}

impl Tasks {
    fn heads(self) -> HeadSet {
        HeadSet {
            similarity: self != Tasks::DeltasOnly,
            deltas: self != Tasks::SimilarityOnly,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_fraction() -> f64 {
    DEFAULT_SIMILAR_FRACTION
}

fn default_validation() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub sched: DynamicWeightSchedule,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationSpec,
    pub seeds: Seeds,
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub tasks: Tasks,
    /// Per-iteration random loss weights; off means all weights are 1.
    #[serde(default = "default_true")]
    pub shake_shake: bool,
    /// Swap pair members with probability 0.5.
    #[serde(default = "default_true")]
    pub swap_pairs: bool,
    #[serde(default = "default_fraction")]
    pub similar_fraction: f64,
    /// Held-out share of pairs used as the plateau monitor.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Defaults to the number of training samples.
    #[serde(default)]
    pub pairs_per_epoch: Option<usize>,
    /// Overrides the projector hidden widths.
    #[serde(default)]
    pub projector_hidden: Option<Vec<usize>>,
    /// Overrides the singleton-head hidden widths.
    #[serde(default)]
    pub sl_hidden: Option<Vec<usize>>,
}

impl TrainConfig {
    /// Full-scale pairwise settings.
    pub fn paper() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            base_lr: 1e-4,
            schedule: LrSchedule::Plateau {
                factor: 10.0,
                patience: 5,
            },
            sched: DynamicWeightSchedule::new(1.0, 1, 40).expect("valid"),
            contrastive: ContrastiveConfig::default(),
            augmentation: AugmentationSpec::paper(),
            seeds: Seeds::default(),
            encoder: EncoderSpec::small_cnn(256),
            tasks: Tasks::Multi,
            shake_shake: true,
            swap_pairs: true,
            similar_fraction: DEFAULT_SIMILAR_FRACTION,
            validation_fraction: 0.05,
            pairs_per_epoch: None,
            projector_hidden: None,
            sl_hidden: None,
        }
    }

    /// Small encoder, 32x32 inputs, batch 32.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 1e-3,
            sched: DynamicWeightSchedule::new(1.0, 1, 10).expect("valid"),
            augmentation: AugmentationSpec::for_side(32),
            encoder: EncoderSpec::small_cnn(32),
            ..Self::paper()
        }
    }

    /// Singleton-head settings layered over `self`.
    pub fn sl(self) -> Self {
        Self {
            epochs: 60,
            batch_size: 512,
            base_lr: 1e-3,
            schedule: LrSchedule::Step {
                factor: 10.0,
                every: 15,
            },
            sched: self.sched.with_epochs(60).expect("positive"),
            ..self
        }
    }

    /// Changes the epoch count and the dynamic-weight horizon together.
    pub fn with_epochs(mut self, epochs: usize) -> Result<Self> {
        self.sched = self.sched.with_epochs(epochs)?;
        self.epochs = epochs;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.sched.epochs() != self.epochs {
            return bad(format!(
                "dynamic-weight horizon {} differs from epochs {}",
                self.sched.epochs(),
                self.epochs
            ));
        }
        match self.schedule {
            LrSchedule::Plateau { factor, .. } | LrSchedule::Step { factor, .. } if factor < 1.0 => {
                return bad("schedule factor must be at least 1".into());
            }
            LrSchedule::Step { every: 0, .. } => return bad("step schedule needs every >= 1".into()),
            _ => {}
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 0.5)".into());
        }
        self.augmentation.validate()?;
        if self.augmentation.crop_to != self.encoder.input_side {
            return bad(format!(
                "augmentation crop {} differs from encoder input side {}",
                self.augmentation.crop_to, self.encoder.input_side
            ));
        }
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.encoder.clone());
        if let Some(p) = &self.projector_hidden {
            spec.projector_hidden = p.clone();
        }
        if let Some(s) = &self.sl_hidden {
            spec.sl_hidden = s.clone();
        }
        spec
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Similarity accuracy on the validation pairs, when the similarity head trains.
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MtClar,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Cumulative loss of every iteration, in order.
    pub iteration_losses: Vec<f64>,
    pub artifacts: Vec<PathBuf>,
}

/// Batch boundaries with a trailing singleton merged into the previous batch.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn col(tape: &Tape<'_>, v: Var) -> Vec<f64> {
    tape.value2(v).column(0).to_vec()
}

fn as_col(g: Vec<f64>) -> ArrayD<f64> {
    let n = g.len();
    ArrayD::from_shape_vec(IxDyn(&[n, 1]), g).expect("sized")
}

/// One pair with its orientation resolved.
#[derive(Clone, Copy, Debug)]
struct Oriented {
    a: usize,
    b: usize,
    similar: bool,
}

struct PairLosses {
    total: Var,
    parts: [f64; 4],
    correct: usize,
}

/// Records all active losses for a batch and combines them with `draw`.
fn pair_losses(
    model: &MtClar,
    tape: &mut Tape<'_>,
    samples: &[FaceSample],
    images: (&[&Image], &[&Image]),
    batch: &[Oriented],
    cfg: &TrainConfig,
    epoch: usize,
    draw: &ShakeShakeDraw,
) -> Result<PairLosses> {
    let heads = cfg.tasks.heads();
    let vars = model.pair_forward_on(tape, images.0, images.1, heads)?;
    let mut terms = Vec::new();
    let mut parts = [0.0; 4];
    let lambdas = draw.lambdas();
    let mut correct = 0;
    if let Some(logits) = vars.logits {
        let sim: Vec<bool> = batch.iter().map(|p| p.similar).collect();
        let labels: Vec<usize> = sim.iter().map(|&s| s as usize).collect();
        let (lc, g1, g2) = contrastive_loss_grad(tape.value2(vars.r1), tape.value2(vars.r2), &sim, &cfg.contrastive)?;
        let cont = tape.loss(lc, vec![(vars.r1, g1.into_dyn()), (vars.r2, g2.into_dyn())]);
        let lv = tape.value2(logits);
        correct = lv
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(r, &l)| ((r[1] > r[0]) as usize) == l)
            .count();
        let (lce, gce) = cross_entropy_grad(lv, &labels)?;
        let ce = tape.loss(lce, vec![(logits, gce.into_dyn())]);
        parts[0] = lc;
        parts[1] = lce;
        terms.push((cont, lambdas[0]));
        terms.push((ce, lambdas[1]));
    }
    if let (Some(dv), Some(da)) = (vars.delta_v, vars.delta_a) {
        let dims = |i: usize| samples[i].dims.expect("checked before training");
        let tv: Vec<f64> = batch.iter().map(|p| dims(p.a).valence - dims(p.b).valence).collect();
        let ta: Vec<f64> = batch.iter().map(|p| dims(p.a).arousal - dims(p.b).arousal).collect();
        let (lv, gv) = delta_loss_grad(&col(tape, dv), &tv, epoch, &cfg.sched)?;
        let (la, ga) = delta_loss_grad(&col(tape, da), &ta, epoch, &cfg.sched)?;
        let lv_node = tape.loss(lv, vec![(dv, as_col(gv))]);
        let la_node = tape.loss(la, vec![(da, as_col(ga))]);
        parts[2] = lv;
        parts[3] = la;
        terms.push((lv_node, lambdas[2]));
        terms.push((la_node, lambdas[3]));
    }
    let total = tape.weighted_sum(terms);
    Ok(PairLosses { total, parts, correct })
}

/// How training pairs are drawn each epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairSource {
    /// Similar pairs share a category; `similar_fraction` from the config.
    Categories,
    /// Two frames of the same video; similarity is not used.
    WithinVideo,
}

fn video_pairs(dataset: &Dataset, count: usize, seed: u64) -> Result<Vec<PairIndex>> {
    let videos: Vec<_> = dataset.videos().iter().filter(|v| v.sample_indices.len() >= 2).collect();
    if videos.is_empty() {
        return Err(Error::Infeasible("no video with at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = videos[rng.random_range(0..videos.len())];
        let i = rng.random_range(0..v.sample_indices.len());
        let mut j = rng.random_range(0..v.sample_indices.len() - 1);
        if j >= i {
            j += 1;
        }
        out.push(PairIndex {
            a: v.sample_indices[i],
            b: v.sample_indices[j],
            similar: false,
        });
    }
    Ok(out)
}

fn draw_pairs(dataset: &Dataset, source: PairSource, count: usize, frac: f64, seed: u64) -> Result<Vec<PairIndex>> {
    match source {
        PairSource::Categories => generate_pair_indices(dataset, count, frac, seed),
        PairSource::WithinVideo => video_pairs(dataset, count, seed),
    }
}

fn check_labels(dataset: &Dataset, tasks: Tasks) -> Result<()> {
    for (i, s) in dataset.samples().iter().enumerate() {
        if tasks != Tasks::DeltasOnly && s.category.is_none() {
            return Err(Error::InvalidArgument(format!("sample {i} has no category")));
        }
        if tasks != Tasks::SimilarityOnly && s.dims.is_none() {
            return Err(Error::InvalidArgument(format!("sample {i} has no dimensional label")));
        }
    }
    Ok(())
}

/// Mean cumulative loss (all weights 1) and similarity accuracy in evaluation mode.
fn validate_pairs(
    model: &MtClar,
    samples: &[FaceSample],
    eval_images: &[Image],
    pairs: &[Oriented],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Option<f64>)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for r in batches(pairs.len(), cfg.batch_size) {
        let batch = &pairs[r];
        let a: Vec<&Image> = batch.iter().map(|p| &eval_images[p.a]).collect();
        let b: Vec<&Image> = batch.iter().map(|p| &eval_images[p.b]).collect();
        let mut tape = Tape::new(model.params(), Mode::Eval);
        let out = pair_losses(model, &mut tape, samples, (&a, &b), batch, cfg, epoch, &ShakeShakeDraw::ones())?;
        loss += tape.value(out.total).sum() * batch.len() as f64;
        correct += out.correct;
    }
    let n = pairs.len() as f64;
    let acc = cfg.tasks.heads().similarity.then(|| correct as f64 / n);
    Ok((loss / n, acc))
}

/// Similarity accuracy of `model` on explicit pairs, evaluation transform applied.
pub fn pair_accuracy(model: &MtClar, dataset: &Dataset, pairs: &[PairIndex], aug: &AugmentationSpec) -> Result<f64> {
    let imgs: Vec<(Image, Image)> = pairs
        .iter()
        .map(|p| {
            (
                eval_transform(&dataset.samples()[p.a].image, aug),
                eval_transform(&dataset.samples()[p.b].image, aug),
            )
        })
        .collect();
    let refs: Vec<(&Image, &Image)> = imgs.iter().map(|(a, b)| (a, b)).collect();
    let preds = model.siamese_forward_batch(&refs)?;
    let hits = preds.iter().zip(pairs).filter(|(p, q)| p.is_similar() == q.similar).count();
    Ok(hits as f64 / pairs.len().max(1) as f64)
}

fn write_loss_curve(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,lr,train_loss,val_loss,val_accuracy\n");
    for r in history {
        let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss, acc));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pairwise training on `dataset` (already wheel-filtered for categorical data).
/// Writes `best.ckpt` and `loss_curve.csv` under `out_dir` when given.
pub fn train_mtclar(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MtClar::new(cfg.model_spec(), cfg.seeds.init)?;
    train_pairs(cfg, model, dataset, PairSource::Categories, out_dir)
}

/// Continues training an existing model on pairs from `source`.
pub fn train_pairs(
    cfg: &TrainConfig,
    mut model: MtClar,
    dataset: &Dataset,
    source: PairSource,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two samples".into()));
    }
    check_labels(dataset, cfg.tasks)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let samples = dataset.samples();
    let aug = &cfg.augmentation;
    let eval_images: Vec<Image> = samples.iter().map(|s| eval_transform(&s.image, aug)).collect();
    let per_epoch = cfg.pairs_per_epoch.unwrap_or(dataset.len()).max(2);
    let n_val = ((per_epoch as f64 * cfg.validation_fraction).round() as usize).max(2);

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let val_pairs: Vec<Oriented> = draw_pairs(dataset, source, n_val, cfg.similar_fraction, data_rng.next_u64())?
        .into_iter()
        .map(|p| Oriented {
            a: p.a,
            b: p.b,
            similar: p.similar,
        })
        .collect();
    let mut shake = ShakeShake::new(cfg.seeds.shake_shake);
    let mut adam = Adam::default();
    let mut plateau = Plateau::new(cfg.base_lr, 1.0, 0);
    if let LrSchedule::Plateau { factor, patience } = cfg.schedule {
        plateau = Plateau::new(cfg.base_lr, factor, patience);
    }
    let trainable = |g: ParamGroup| matches!(g, ParamGroup::Encoder | ParamGroup::Projector(_));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iteration_losses = Vec::new();
    let mut best: Option<(f64, usize, MtClar)> = None;
    let mut artifacts = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            LrSchedule::Plateau { .. } => plateau.lr(),
            LrSchedule::Step { factor, every } => step_lr(cfg.base_lr, factor, every, epoch),
        };
        let pairs: Vec<Oriented> = draw_pairs(dataset, source, per_epoch, cfg.similar_fraction, data_rng.next_u64())?
            .into_iter()
            .map(|p| {
                let swap = cfg.swap_pairs && data_rng.random_bool(0.5);
                let (a, b) = if swap { (p.b, p.a) } else { (p.a, p.b) };
                Oriented {
                    a,
                    b,
                    similar: p.similar,
                }
            })
            .collect();
        let mut epoch_loss = 0.0;
        let ranges = batches(pairs.len(), cfg.batch_size);
        for (it, r) in ranges.iter().enumerate() {
            let batch = &pairs[r.clone()];
            let (a_own, b_own): (Vec<Image>, Vec<Image>) = if aug.enabled {
                batch
                    .iter()
                    .map(|p| {
                        (
                            train_transform(&samples[p.a].image, aug, &mut data_rng),
                            train_transform(&samples[p.b].image, aug, &mut data_rng),
                        )
                    })
                    .unzip()
            } else {
                (Vec::new(), Vec::new())
            };
            let (a, b): (Vec<&Image>, Vec<&Image>) = if aug.enabled {
                (a_own.iter().collect(), b_own.iter().collect())
            } else {
                batch.iter().map(|p| (&eval_images[p.a], &eval_images[p.b])).unzip()
            };
            let draw = if cfg.shake_shake {
                shake.draw()
            } else {
                ShakeShakeDraw::ones()
            };
            let mut tape = Tape::new(model.params(), Mode::Train);
            let out = pair_losses(&model, &mut tape, samples, (&a, &b), batch, cfg, epoch, &draw)?;
            let total = tape.value(out.total).sum();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                    detail: format!(
                        "contrastive {} ce {} dv {} da {} weights {:?}",
                        out.parts[0],
                        out.parts[1],
                        out.parts[2],
                        out.parts[3],
                        draw.lambdas()
                    ),
                });
            }
            let grads = tape.backward(out.total);
            let updates = tape.take_stat_updates();
            drop(tape);
            adam.step(model.params_mut(), &grads, lr, trainable);
            model.apply_stat_updates(updates);
            iteration_losses.push(total);
            epoch_loss += total;
        }
        let (val_loss, val_accuracy) = validate_pairs(&model, samples, &eval_images, &val_pairs, cfg, epoch)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration: ranges.len(),
                detail: "validation loss".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / ranges.len() as f64,
            val_loss,
            val_accuracy,
        });
        log::info!("epoch {epoch}: lr {lr:e} train {:.5} val {val_loss:.5}", epoch_loss / ranges.len() as f64);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            if let Some(dir) = out_dir {
                let p = dir.join("best.ckpt");
                checkpoint::save(&model, &p)?;
                if !artifacts.contains(&p) {
                    artifacts.push(p);
                }
            }
            best = Some((val_loss, epoch, model.clone()));
        }
        if let LrSchedule::Plateau { .. } = cfg.schedule {
            plateau.observe(val_loss);
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("loss_curve.csv");
        write_loss_curve(&history, &p)?;
        artifacts.push(p);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        iteration_losses,
        artifacts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlReport {
    pub accuracy: f64,
    pub metrics: Option<MetricReport>,
}

fn sl_labels(dataset: &Dataset) -> Result<(Vec<EmotionCategory>, Vec<DimensionalLabel>)> {
    let mut classes = Vec::with_capacity(dataset.len());
    let mut dims = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        match (s.category, s.dims) {
            (Some(c), Some(d)) => {
                classes.push(c);
                dims.push(d);
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} needs both a category and a dimensional label"
                )))
            }
        }
    }
    Ok((classes, dims))
}

fn check_embeddings(e: &Array2<f64>, n: usize) -> Result<()> {
    if e.ncols() != EMBEDDING_DIM {
        return Err(Error::Shape {
            expected: format!("embeddings of length {EMBEDDING_DIM}"),
            actual: format!("length {}", e.ncols()),
        });
    }
    if e.nrows() != n {
        return Err(Error::LengthMismatch {
            left: e.nrows(),
            right: n,
        });
    }
    Ok(())
}

/// One pass of the singleton heads over `emb` in the order given by `order`.
fn sl_epoch(
    model: &mut MtClar,
    adam: &mut Adam,
    emb: &Array2<f64>,
    classes: &[EmotionCategory],
    dims: &[DimensionalLabel],
    order: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let trainable = |g: ParamGroup| matches!(g, ParamGroup::SlClassifier | ParamGroup::SlRegressor);
    let ranges = batches(order.len(), cfg.batch_size);
    let mut total = 0.0;
    for (it, r) in ranges.iter().enumerate() {
        let idx = &order[r.clone()];
        let x = emb.select(ndarray::Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| classes[i].code() as usize).collect();
        let tv: Vec<f64> = idx.iter().map(|&i| dims[i].valence).collect();
        let ta: Vec<f64> = idx.iter().map(|&i| dims[i].arousal).collect();
        let mut tape = Tape::new(model.params(), Mode::Train);
        let xi = tape.input(x.into_dyn());
        let (c, reg) = model.sl_forward_on(&mut tape, xi)?;
        let (lce, gce) = cross_entropy_grad(tape.value2(c), &labels)?;
        let rv = tape.value2(reg);
        let (pv, pa) = (rv.column(0).to_vec(), rv.column(1).to_vec());
        let (lr_loss, gv, ga) = sl_regression_loss_grad(&pv, &pa, &tv, &ta, epoch, &cfg.sched)?;
        let mut greg = Array2::<f64>::zeros((idx.len(), 2));
        for k in 0..idx.len() {
            greg[[k, 0]] = gv[k];
            greg[[k, 1]] = ga[k];
        }
        let ce_node = tape.loss(lce, vec![(c, gce.into_dyn())]);
        let reg_node = tape.loss(lr_loss, vec![(reg, greg.into_dyn())]);
        let sum = tape.weighted_sum(vec![(ce_node, 1.0), (reg_node, 1.0)]);
        let value = lce + lr_loss;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration: it,
                detail: format!("cross-entropy {lce} regression {lr_loss}"),
            });
        }
        let grads = tape.backward(sum);
        let updates = tape.take_stat_updates();
        drop(tape);
        adam.step(model.params_mut(), &grads, lr, trainable);
        model.apply_stat_updates(updates);
        total += value;
    }
    Ok(total / ranges.len() as f64)
}

/// Trains the singleton heads on fixed embeddings (rows of `emb`, length 256).
pub fn train_sl_heads(
    cfg: &TrainConfig,
    model: &mut MtClar,
    emb: &Array2<f64>,
    classes: &[EmotionCategory],
    dims: &[DimensionalLabel],
) -> Result<Vec<SlEpochRecord>> {
    cfg.validate()?;
    check_embeddings(emb, classes.len())?;
    if dims.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: classes.len(),
            right: dims.len(),
        });
    }
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two samples".into()));
    }
    if !model.has_sl_heads() {
        model.attach_sl_heads(cfg.seeds.init.wrapping_add(1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let mut adam = Adam::default();
    let mut plateau = match cfg.schedule {
        LrSchedule::Plateau { factor, patience } => Plateau::new(cfg.base_lr, factor, patience),
        LrSchedule::Step { .. } => Plateau::new(cfg.base_lr, 1.0, 0),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..classes.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            LrSchedule::Step { factor, every } => step_lr(cfg.base_lr, factor, every, epoch),
            LrSchedule::Plateau { .. } => plateau.lr(),
        };
        order.shuffle(&mut rng);
        let loss = sl_epoch(model, &mut adam, emb, classes, dims, &order, cfg, epoch, lr)?;
        if let LrSchedule::Plateau { .. } = cfg.schedule {
            plateau.observe(loss);
        }
        history.push(SlEpochRecord { epoch, lr, loss });
    }
    Ok(history)
}

/// Trains singleton heads on top of a frozen encoder.
pub fn train_sl(cfg: &TrainConfig, mut model: MtClar, dataset: &Dataset) -> Result<(MtClar, Vec<SlEpochRecord>)> {
    cfg.validate()?;
    let (classes, dims) = sl_labels(dataset)?;
    let images: Vec<Image> = dataset
        .samples()
        .iter()
        .map(|s| eval_transform(&s.image, &cfg.augmentation))
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    let emb = model.embedding_matrix(&refs)?;
    let history = train_sl_heads(cfg, &mut model, &emb, &classes, &dims)?;
    Ok((model, history))
}

/// Classification accuracy and regression metrics of the singleton heads.
pub fn evaluate_sl(
    model: &MtClar,
    emb: &Array2<f64>,
    classes: &[EmotionCategory],
    dims: &[DimensionalLabel],
) -> Result<SlReport> {
    check_embeddings(emb, classes.len())?;
    let preds = model.sl_forward_batch(emb)?;
    let hits = preds.iter().zip(classes).filter(|(p, &c)| p.category() == c).count();
    let truth: Vec<_> = dims
        .iter()
        .enumerate()
        .map(|(i, d)| (FrameKey::new("", i as u32), *d))
        .collect();
    let pred: Vec<_> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                FrameKey::new("", i as u32),
                DimensionalLabel {
                    valence: p.dims.0,
                    arousal: p.dims.1,
                },
            )
        })
        .collect();
    let metrics = match evaluate(&truth, &pred, None) {
        Ok(m) => Some(m),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SlReport {
        accuracy: hits as f64 / classes.len().max(1) as f64,
        metrics,
    })
}

/// Evaluates singleton heads on a labelled dataset using the evaluation transform.
pub fn evaluate_sl_dataset(model: &MtClar, dataset: &Dataset, aug: &AugmentationSpec) -> Result<SlReport> {
    let (classes, dims) = sl_labels(dataset)?;
    let images: Vec<Image> = dataset.samples().iter().map(|s| eval_transform(&s.image, aug)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let emb = model.embedding_matrix(&refs)?;
    evaluate_sl(model, &emb, &classes, &dims)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub report: MetricReport,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub folds: Vec<FoldResult>,
    pub mean: MetricReport,
}

fn subjects(dataset: &Dataset, indices: &[usize]) -> Vec<String> {
    let mut s: Vec<String> = indices.iter().map(|&i| dataset.samples()[i].subject_id.clone()).collect();
    s.sort();
    s.dedup();
    s
}

/// For each fold: fine-tune the differential heads and encoder on frame pairs
/// from the other folds, then label the held-out videos with `anchors`.
pub fn finetune(
    base: &MtClar,
    dataset: &Dataset,
    folds: &FoldAssignment,
    cfg: &TrainConfig,
    anchors: &AnchorConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if folds.fold_of.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            left: folds.fold_of.len(),
            right: dataset.len(),
        });
    }
    if let Some(bad) = folds.fold_of.iter().find(|&&f| f >= folds.k) {
        return Err(Error::InvalidArgument(format!("fold index {bad} out of range for k={}", folds.k)));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg = TrainConfig {
        tasks: Tasks::DeltasOnly,
        ..cfg.clone()
    };
    let mut results = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let train_idx = folds.train_indices(fold);
        let test_idx = folds.test_indices(fold);
        let train_subjects = subjects(dataset, &train_idx);
        let test_subjects = subjects(dataset, &test_idx);
        if folds.strategy == FoldStrategy::SubjectIndependent {
            if let Some(s) = test_subjects.iter().find(|s| train_subjects.binary_search(s).is_ok()) {
                return Err(Error::InvalidArgument(format!("subject {s} appears in training and test of fold {fold}")));
            }
        }
        let train_ds = dataset.subset(&train_idx)?;
        let test_ds = dataset.subset(&test_idx)?;
        let fold_dir = out_dir.map(|d| d.join(format!("fold{fold}")));
        let outcome = train_pairs(&cfg, base.clone(), &train_ds, PairSource::WithinVideo, fold_dir.as_deref())?;
        let labelled = label_corpus(&outcome.model, &test_ds, anchors)?;
        let report = labelled
            .metrics
            .ok_or_else(|| Error::Degenerate(format!("fold {fold} has no evaluable frames")))?;
        let mut ckpt = None;
        if let Some(dir) = out_dir {
            let p = dir.join(format!("fold{fold}.ckpt"));
            checkpoint::save(&outcome.model, &p)?;
            let rp = dir.join(format!("fold{fold}.json"));
            fs::write(&rp, report.to_json()).map_err(|e| Error::io(&rp, e))?;
            ckpt = Some(p);
        }
        results.push(FoldResult {
            fold,
            train_subjects,
            test_subjects,
            report,
            checkpoint: ckpt,
        });
    }
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report.clone()).collect();
    let mean = MetricReport::mean(&reports)?;
    if let Some(dir) = out_dir {
        let p = dir.join("mean.json");
        fs::write(&p, mean.to_json()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(FinetuneOutcome { folds: results, mean })
}
