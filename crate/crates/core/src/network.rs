//! Siamese encoder, the three branched projectors and the singleton heads.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmotionCategory, Image};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Conv2d, Linear, Mlp, Mode, NormStats, ParamGroup, ParamId, ParamStore, Tape, Var};

pub const EMBEDDING_DIM: usize = 256;
pub const PROJECTOR_HIDDEN: [usize; 4] = [2048, 1024, 512, 128];
pub const SL_HIDDEN: [usize; 4] = [1024, 512, 256, 128];
/// Inference batch size for the convenience forward functions.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderBackend {
    ReferenceSmallCnn,
    /// Embeddings computed offline by another network, looked up by image content.
    ExternalPretrained,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backend: EncoderBackend,
    pub input_side: u32,
    pub embedding_dim: usize,
}

impl EncoderSpec {
    pub fn small_cnn(input_side: u32) -> Self {
        Self {
            backend: EncoderBackend::ReferenceSmallCnn,
            input_side,
            embedding_dim: EMBEDDING_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.backend == EncoderBackend::ReferenceSmallCnn && (self.input_side < 8 || self.input_side % 4 != 0) {
            return Err(Error::InvalidArgument(format!(
                "small CNN input side must be a multiple of 4 and at least 8, got {}",
                self.input_side
            )));
        }
        Ok(())
    }
}

/// Channel widths of the small CNN: halve the side until it is at most 8.
pub fn default_conv_channels(input_side: u32) -> Vec<usize> {
    let mut side = input_side;
    let mut channels = Vec::new();
    while side > 8 && side % 2 == 0 {
        channels.push(if channels.is_empty() { 16 } else { 32 });
        side /= 2;
    }
    channels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub conv_channels: Vec<usize>,
    pub projector_hidden: Vec<usize>,
    pub sl_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn new(encoder: EncoderSpec) -> Self {
        let conv_channels = default_conv_channels(encoder.input_side);
        Self {
            encoder,
            conv_channels,
            projector_hidden: PROJECTOR_HIDDEN.to_vec(),
            sl_hidden: SL_HIDDEN.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projector_hidden.is_empty() || self.sl_hidden.is_empty() {
            return Err(Error::InvalidArgument("head widths must be non-empty".into()));
        }
        if self.encoder.backend == EncoderBackend::ReferenceSmallCnn {
            let side = self.encoder.input_side >> self.conv_channels.len();
            if side == 0 || self.encoder.input_side % (1 << self.conv_channels.len()) != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{} pooling stages do not divide input side {}",
                    self.conv_channels.len(),
                    self.encoder.input_side
                )));
            }
        }
        Ok(())
    }
}

/// Fixed-length encoder output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: format!("embedding of length {EMBEDDING_DIM}"),
                actual: format!("length {}", values.len()),
            });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub similarity_logits: [f64; 2],
    pub delta_v: f64,
    pub delta_a: f64,
}

impl PairPrediction {
    pub fn is_similar(&self) -> bool {
        self.similarity_logits[1] > self.similarity_logits[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingletonPrediction {
    pub class_logits: [f64; EmotionCategory::COUNT],
    pub dims: (f64, f64),
}

impl SingletonPrediction {
    pub fn category(&self) -> EmotionCategory {
        let best = self
            .class_logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > self.class_logits[b] { i } else { b });
        EmotionCategory::ALL[best]
    }
}

/// Stable 64-bit FNV-1a fingerprint of image size and pixel bits.
pub fn image_fingerprint(image: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&image.width().to_le_bytes());
    eat(&image.height().to_le_bytes());
    for v in image.data() {
        eat(&v.to_bits().to_le_bytes());
    }
    h
}

/// Lookup table standing in for a frozen pretrained encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    entries: HashMap<u64, Vec<f64>>,
}

impl FeatureTable {
    pub fn insert(&mut self, image: &Image, embedding: Embedding) {
        self.entries.insert(image_fingerprint(image), embedding.into_vec());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, image: &Image) -> Result<&[f64]> {
        self.entries
            .get(&image_fingerprint(image))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument("image has no precomputed embedding".into()))
    }

    /// Entries sorted by fingerprint.
    pub fn sorted_entries(&self) -> Vec<(u64, &[f64])> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, e)| (*k, e.as_slice())).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub(crate) fn from_raw(entries: HashMap<u64, Vec<f64>>) -> Self {
        Self { entries }
    }
}

#[derive(Clone, Debug)]
struct SmallCnn {
    convs: Vec<Conv2d>,
    proj: Linear,
}

#[derive(Clone, Debug)]
enum Encoder {
    SmallCnn(SmallCnn),
    External(FeatureTable),
}

#[derive(Clone, Debug)]
struct SlHeads {
    classifier: Mlp,
    regressor: Mlp,
}

/// Which projector heads take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub similarity: bool,
    pub deltas: bool,
}

impl HeadSet {
    pub const ALL: HeadSet = HeadSet {
        similarity: true,
        deltas: true,
    };
}

/// Tape handles produced by a pair forward pass.
pub struct PairVars {
    pub r1: Var,
    pub r2: Var,
    pub logits: Option<Var>,
    pub delta_v: Option<Var>,
    pub delta_a: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MtClar {
    spec: ModelSpec,
    params: ParamStore,
    stats: Vec<NormStats>,
    encoder: Encoder,
    projectors: [Mlp; 3],
    sl: Option<SlHeads>,
}

impl MtClar {
    /// Builds a freshly initialised model. External-backend models start with an empty table.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::default();
        let mut stats = Vec::new();
        let encoder = match spec.encoder.backend {
            EncoderBackend::ReferenceSmallCnn => {
                let mut convs = Vec::new();
                let mut cin = Image::CHANNELS;
                for (i, &cout) in spec.conv_channels.iter().enumerate() {
                    convs.push(Conv2d::new(&mut params, &mut rng, &format!("enc.conv{i}"), ParamGroup::Encoder, cin, cout, 3));
                    cin = cout;
                }
                let side = (spec.encoder.input_side >> spec.conv_channels.len()) as usize;
                let proj = Linear::new(&mut params, &mut rng, "enc.proj", ParamGroup::Encoder, cin * side * side, EMBEDDING_DIM);
                Encoder::SmallCnn(SmallCnn { convs, proj })
            }
            EncoderBackend::ExternalPretrained => Encoder::External(FeatureTable::default()),
        };
        let mut head = |name: &str, i: u8, out: usize| {
            let mut widths = spec.projector_hidden.clone();
            widths.push(out);
            Mlp::new(&mut params, &mut stats, &mut rng, name, ParamGroup::Projector(i), 2 * EMBEDDING_DIM, &widths)
        };
        let projectors = [head("p1", 1, 2), head("p2", 2, 1), head("p3", 3, 1)];
        Ok(Self {
            spec,
            params,
            stats,
            encoder,
            projectors,
            sl: None,
        })
    }

    /// Attaches freshly initialised classifier and regressor heads.
    pub fn attach_sl_heads(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        let mut cw = self.spec.sl_hidden.clone();
        cw.push(EmotionCategory::COUNT);
        let mut rw = self.spec.sl_hidden.clone();
        rw.push(2);
        let classifier = Mlp::new(&mut self.params, &mut self.stats, &mut rng, "mc", ParamGroup::SlClassifier, EMBEDDING_DIM, &cw);
        let regressor = Mlp::new(&mut self.params, &mut self.stats, &mut rng, "mr", ParamGroup::SlRegressor, EMBEDDING_DIM, &rw);
        self.sl = Some(SlHeads { classifier, regressor });
    }

    pub fn has_sl_heads(&self) -> bool {
        self.sl.is_some()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.stats
    }

    pub(crate) fn norm_stats_mut(&mut self) -> &mut Vec<NormStats> {
        &mut self.stats
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(usize, NormStats)>) {
        for (i, s) in updates {
            self.stats[i] = s;
        }
    }

    pub fn feature_table(&self) -> Option<&FeatureTable> {
        match &self.encoder {
            Encoder::External(t) => Some(t),
            Encoder::SmallCnn(_) => None,
        }
    }

    pub fn feature_table_mut(&mut self) -> Option<&mut FeatureTable> {
        match &mut self.encoder {
            Encoder::External(t) => Some(t),
            Encoder::SmallCnn(_) => None,
        }
    }

    /// Output widths of projector `i` (1, 2 or 3), hidden layers then terminal layer.
    pub fn projector_widths(&self, i: usize) -> Vec<usize> {
        self.projectors[i - 1].widths()
    }

    pub fn projector_input_dim(&self, i: usize) -> usize {
        self.projectors[i - 1].input_dim()
    }

    /// `(classifier widths, regressor widths)` when the singleton heads are attached.
    pub fn sl_widths(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        self.sl.as_ref().map(|h| (h.classifier.widths(), h.regressor.widths()))
    }

    /// Parameters read by encoder stream `stream` (1 or 2). Both streams use one set.
    pub fn stream_params(&self, _stream: usize) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.group(id) == ParamGroup::Encoder)
            .collect()
    }

    /// Stacks images into an (n, 3, side, side) tensor.
    pub fn image_batch(&self, images: &[&Image]) -> Result<ArrayD<f64>> {
        let side = self.spec.encoder.input_side;
        let s = side as usize;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[images.len(), Image::CHANNELS, s, s]));
        let plane = Image::CHANNELS * s * s;
        let dst = out.as_slice_mut().expect("contiguous");
        for (i, img) in images.iter().enumerate() {
            if img.width() != side || img.height() != side {
                return Err(Error::Shape {
                    expected: format!("{side}x{side} image"),
                    actual: format!("{}x{}", img.width(), img.height()),
                });
            }
            for (d, &v) in dst[i * plane..(i + 1) * plane].iter_mut().zip(img.data()) {
                *d = v as f64;
            }
        }
        Ok(out)
    }

    /// Records the encoder on `tape`; `images` is the tensor from [`Self::image_batch`].
    pub fn encode_on(&self, tape: &mut Tape<'_>, images: &[&Image]) -> Result<Var> {
        match &self.encoder {
            Encoder::SmallCnn(cnn) => {
                let x = self.image_batch(images)?;
                let mut h = tape.input(x);
                for conv in &cnn.convs {
                    let c = tape.conv2d(h, conv)?;
                    let r = tape.relu(c);
                    h = tape.max_pool2(r);
                }
                let f = tape.flatten(h);
                tape.linear(f, &cnn.proj)
            }
            Encoder::External(table) => {
                let mut out = Array2::<f64>::zeros((images.len(), EMBEDDING_DIM));
                for (i, img) in images.iter().enumerate() {
                    let e = table.lookup(img)?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(e));
                }
                Ok(tape.input(out.into_dyn()))
            }
        }
    }

    /// Both streams, concatenation `u = r1 || r2` and the requested projector heads.
    pub fn pair_forward_on(&self, tape: &mut Tape<'_>, a: &[&Image], b: &[&Image], heads: HeadSet) -> Result<PairVars> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        let r1 = self.encode_on(tape, a)?;
        let r2 = self.encode_on(tape, b)?;
        let u = tape.concat(r1, r2)?;
        let logits = if heads.similarity {
            Some(self.projectors[0].forward(tape, &self.stats, u)?)
        } else {
            None
        };
        let (delta_v, delta_a) = if heads.deltas {
            (
                Some(self.projectors[1].forward(tape, &self.stats, u)?),
                Some(self.projectors[2].forward(tape, &self.stats, u)?),
            )
        } else {
            (None, None)
        };
        Ok(PairVars {
            r1,
            r2,
            logits,
            delta_v,
            delta_a,
        })
    }

    /// Singleton heads on a (batch, 256) embedding node: `(class logits, [valence, arousal])`.
    pub fn sl_forward_on(&self, tape: &mut Tape<'_>, embeddings: Var) -> Result<(Var, Var)> {
        let heads = self
            .sl
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no singleton heads".into()))?;
        let cols = tape.value(embeddings).shape().get(1).copied().unwrap_or(0);
        if cols != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: format!("embedding of length {EMBEDDING_DIM}"),
                actual: format!("length {cols}"),
            });
        }
        let c = heads.classifier.forward(tape, &self.stats, embeddings)?;
        let r = heads.regressor.forward(tape, &self.stats, embeddings)?;
        Ok((c, r))
    }

    pub fn encode(&self, image: &Image) -> Result<Embedding> {
        let mut out = self.encode_batch(&[image])?;
        Ok(out.remove(0))
    }

    /// Evaluation-mode embeddings, one per image, in order.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.params, Mode::Eval);
            let r = self.encode_on(&mut tape, chunk)?;
            for row in tape.value2(r).rows() {
                out.push(Embedding(row.to_vec()));
            }
        }
        Ok(out)
    }

    /// Embeddings as a (n, 256) matrix.
    pub fn embedding_matrix(&self, images: &[&Image]) -> Result<Array2<f64>> {
        let embs = self.encode_batch(images)?;
        let mut m = Array2::zeros((embs.len(), EMBEDDING_DIM));
        for (mut row, e) in m.axis_iter_mut(Axis(0)).zip(&embs) {
            row.assign(&ndarray::ArrayView1::from(e.as_slice()));
        }
        Ok(m)
    }

    pub fn siamese_forward(&self, a: &Image, b: &Image) -> Result<PairPrediction> {
        let mut out = self.siamese_forward_batch(&[(a, b)])?;
        Ok(out.remove(0))
    }

    /// Evaluation-mode pair predictions, in order.
    pub fn siamese_forward_batch(&self, pairs: &[(&Image, &Image)]) -> Result<Vec<PairPrediction>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let a: Vec<&Image> = chunk.iter().map(|p| p.0).collect();
            let b: Vec<&Image> = chunk.iter().map(|p| p.1).collect();
            let mut tape = Tape::new(&self.params, Mode::Eval);
            let vars = self.pair_forward_on(&mut tape, &a, &b, HeadSet::ALL)?;
            let logits = tape.value2(vars.logits.expect("requested"));
            let dv = tape.value2(vars.delta_v.expect("requested"));
            let da = tape.value2(vars.delta_a.expect("requested"));
            for i in 0..chunk.len() {
                out.push(PairPrediction {
                    similarity_logits: [logits[[i, 0]], logits[[i, 1]]],
                    delta_v: dv[[i, 0]],
                    delta_a: da[[i, 0]],
                });
            }
        }
        Ok(out)
    }

    pub fn sl_forward(&self, e: &[f64]) -> Result<SingletonPrediction> {
        let m = Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("one row");
        let mut out = self.sl_forward_batch(&m)?;
        Ok(out.remove(0))
    }

    /// Evaluation-mode singleton predictions for each row of `embeddings`.
    pub fn sl_forward_batch(&self, embeddings: &Array2<f64>) -> Result<Vec<SingletonPrediction>> {
        if embeddings.ncols() != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: format!("embedding of length {EMBEDDING_DIM}"),
                actual: format!("length {}", embeddings.ncols()),
            });
        }
        let mut out = Vec::with_capacity(embeddings.nrows());
        for start in (0..embeddings.nrows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(embeddings.nrows());
            let mut tape = Tape::new(&self.params, Mode::Eval);
            let x = tape.input(embeddings.slice(ndarray::s![start..end, ..]).to_owned().into_dyn());
            let (c, r) = self.sl_forward_on(&mut tape, x)?;
            let (cv, rv) = (tape.value2(c), tape.value2(r));
            for i in 0..end - start {
                let mut class_logits = [0.0; EmotionCategory::COUNT];
                for (j, l) in class_logits.iter_mut().enumerate() {
                    *l = cv[[i, j]];
                }
                out.push(SingletonPrediction {
                    class_logits,
                    dims: (rv[[i, 0]], rv[[i, 1]]),
                });
            }
        }
        Ok(out)
    }
}
