//! Few-shot label propagation through videos from a small anchor set.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_transform, AugmentationSpec};
use crate::datamodel::{Dataset, DatasetKind, DimensionalLabel, FaceSample, Image};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, FrameKey, LabelledFrame, MetricReport};
use crate::network::MtClar;

/// Anything that predicts `anchor - query` valence and arousal differentials.
pub trait DifferentialModel: Send + Sync {
    fn differential(&self, anchor: &FaceSample, query: &FaceSample) -> Result<(f64, f64)>;

    fn differentials(&self, pairs: &[(&FaceSample, &FaceSample)]) -> Result<Vec<(f64, f64)>> {
        pairs.iter().map(|(a, q)| self.differential(a, q)).collect()
    }
}

/// Returns the true differences from the samples' own labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthOracle;

impl DifferentialModel for GroundTruthOracle {
    fn differential(&self, anchor: &FaceSample, query: &FaceSample) -> Result<(f64, f64)> {
        match (anchor.dims, query.dims) {
            (Some(a), Some(q)) => Ok((a.valence - q.valence, a.arousal - q.arousal)),
            _ => Err(Error::InvalidArgument("oracle needs labelled frames".into())),
        }
    }
}

fn model_input<'a>(model: &MtClar, image: &'a Image) -> std::borrow::Cow<'a, Image> {
    let side = model.spec().encoder.input_side;
    if image.width() == side && image.height() == side {
        std::borrow::Cow::Borrowed(image)
    } else {
        std::borrow::Cow::Owned(eval_transform(image, &AugmentationSpec::for_side(side)))
    }
}

impl DifferentialModel for MtClar {
    fn differential(&self, anchor: &FaceSample, query: &FaceSample) -> Result<(f64, f64)> {
        Ok(self.differentials(&[(anchor, query)])?[0])
    }

    fn differentials(&self, pairs: &[(&FaceSample, &FaceSample)]) -> Result<Vec<(f64, f64)>> {
        let a: Vec<_> = pairs.iter().map(|(a, _)| model_input(self, &a.image)).collect();
        let q: Vec<_> = pairs.iter().map(|(_, q)| model_input(self, &q.image)).collect();
        let refs: Vec<(&Image, &Image)> = a.iter().zip(&q).map(|(a, q)| (a.as_ref(), q.as_ref())).collect();
        Ok(self
            .siamese_forward_batch(&refs)?
            .into_iter()
            .map(|p| (p.delta_v, p.delta_a))
            .collect())
    }
}

/// Differential for one anchor/query pair.
pub fn infer_differential(model: &dyn DifferentialModel, anchor: &FaceSample, query: &FaceSample) -> Result<(f64, f64)> {
    model.differential(anchor, query)
}

/// `anchor - delta`, clamped to [-1, 1] per dimension.
pub fn recover_label(anchor: DimensionalLabel, dv: f64, da: f64) -> DimensionalLabel {
    DimensionalLabel {
        valence: (anchor.valence - dv).clamp(-1.0, 1.0),
        arousal: (anchor.arousal - da).clamp(-1.0, 1.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    FirstFrame,
    RandomFrame,
    SubjectSpecificRandom,
    DifferentSubjectRandom,
    RecurringNth,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 5] = [
        AnchorKind::FirstFrame,
        AnchorKind::RandomFrame,
        AnchorKind::SubjectSpecificRandom,
        AnchorKind::DifferentSubjectRandom,
        AnchorKind::RecurringNth,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    NearestPreceding,
    MeanOverAll,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::NearestPreceding => "preceding",
            Aggregation::MeanOverAll => "mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preceding" | "nearest_preceding" => Ok(Aggregation::NearestPreceding),
            "mean" | "mean_over_all" => Ok(Aggregation::MeanOverAll),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAnchorConfig")]
pub struct AnchorConfig {
    pub kind: AnchorKind,
    pub n: Option<usize>,
    pub aggregation: Aggregation,
    pub seed: u64,
}

#[derive(Deserialize)]
struct RawAnchorConfig {
    kind: AnchorKind,
    #[serde(default)]
    n: Option<usize>,
    aggregation: Aggregation,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawAnchorConfig> for AnchorConfig {
    type Error = Error;

    fn try_from(r: RawAnchorConfig) -> Result<Self> {
        Self::new(r.kind, r.n, r.aggregation, r.seed)
    }
}

impl AnchorConfig {
    pub fn new(kind: AnchorKind, n: Option<usize>, aggregation: Aggregation, seed: u64) -> Result<Self> {
        match (kind, n) {
            (AnchorKind::RecurringNth, Some(n)) if n >= 1 => {}
            (AnchorKind::RecurringNth, _) => {
                return Err(Error::InvalidArgument("recurring anchors need a positive n".into()));
            }
            (_, Some(_)) => {
                return Err(Error::InvalidArgument("n applies to recurring anchors only".into()));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            n,
            aggregation,
            seed,
        })
    }

    pub fn first() -> Self {
        Self::new(AnchorKind::FirstFrame, None, Aggregation::NearestPreceding, 0).expect("valid")
    }

    pub fn recurring(n: usize, aggregation: Aggregation) -> Result<Self> {
        Self::new(AnchorKind::RecurringNth, Some(n), aggregation, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Anchor {
    pub sample: FaceSample,
    pub label: DimensionalLabel,
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub video_id: String,
    pub anchors: Vec<Anchor>,
    pub config: AnchorConfig,
    pub support_size: usize,
}

/// Seed that differs per video so random configurations do not pick aligned frames.
fn video_rng(seed: u64, video_id: &str) -> ChaCha8Rng {
    let h = video_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn labelled(sample: &FaceSample) -> Result<Anchor> {
    let label = sample.dims.ok_or_else(|| {
        let (v, i) = sample.frame.clone().unwrap_or_default();
        Error::AnchorPrecondition(format!("anchor frame {i} of video {v} has no dimensional label"))
    })?;
    Ok(Anchor {
        sample: sample.clone(),
        label,
    })
}

pub fn build_anchor_set(dataset: &Dataset, video_id: &str, cfg: &AnchorConfig) -> Result<AnchorSet> {
    if dataset.kind() != DatasetKind::VideoSet {
        return Err(Error::AnchorPrecondition("anchor sets need a video dataset".into()));
    }
    let video = dataset.video(video_id).ok_or_else(|| Error::UnknownVideo(video_id.to_string()))?;
    if video.sample_indices.is_empty() {
        return Err(Error::AnchorPrecondition(format!("video {video_id} has no frames")));
    }
    let samples = dataset.samples();
    let mut rng = video_rng(cfg.seed, video_id);
    let pool = |same_subject: bool| -> Vec<usize> {
        dataset
            .videos()
            .iter()
            .filter(|v| (v.subject_id == video.subject_id) == same_subject)
            .flat_map(|v| v.sample_indices.iter().copied())
            .collect()
    };
    let chosen: Vec<usize> = match cfg.kind {
        AnchorKind::FirstFrame => vec![video.sample_indices[0]],
        AnchorKind::RandomFrame => vec![*video.sample_indices.choose(&mut rng).expect("non-empty")],
        AnchorKind::SubjectSpecificRandom => vec![*pool(true).choose(&mut rng).expect("contains the video itself")],
        AnchorKind::DifferentSubjectRandom => {
            let p = pool(false);
            vec![*p.choose(&mut rng).ok_or_else(|| {
                Error::AnchorPrecondition(format!("no video with a subject other than {}", video.subject_id))
            })?]
        }
        AnchorKind::RecurringNth => {
            let n = cfg.n.expect("validated");
            video.sample_indices.iter().copied().step_by(n).collect()
        }
    };
    let anchors = chosen.iter().map(|&i| labelled(&samples[i])).collect::<Result<Vec<_>>>()?;
    Ok(AnchorSet {
        video_id: video_id.to_string(),
        support_size: anchors.len(),
        anchors,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub index: u32,
    pub valence: f64,
    pub arousal: f64,
    pub is_anchor: bool,
}

/// Index into `anchors` used for the frame at `index`: the largest in-video
/// anchor index not after it, else the earliest in-video anchor, else the
/// first anchor.
pub fn nearest_preceding(anchor_indices: &[Option<u32>], index: u32) -> Option<usize> {
    let in_video = anchor_indices.iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a)));
    let best = in_video
        .clone()
        .filter(|&(_, a)| a <= index)
        .max_by_key(|&(_, a)| a)
        .or_else(|| in_video.min_by_key(|&(_, a)| a));
    match best {
        Some((i, _)) => Some(i),
        None if anchor_indices.is_empty() => None,
        None => Some(0),
    }
}

/// Labels every frame of one video from `anchors`. Anchors belonging to the
/// video keep their label; every other frame is recovered from differentials.
pub fn propagate(
    model: &dyn DifferentialModel,
    video_id: &str,
    frames: &[&FaceSample],
    anchors: &[Anchor],
    aggregation: Aggregation,
) -> Result<Vec<FrameLabel>> {
    if anchors.is_empty() {
        return Err(Error::AnchorPrecondition(format!("empty anchor set for video {video_id}")));
    }
    let anchor_idx: Vec<Option<u32>> = anchors
        .iter()
        .map(|a| match &a.sample.frame {
            Some((v, i)) if v == video_id => Some(*i),
            _ => None,
        })
        .collect();
    // per frame: None for anchor frames, else (offset into `pairs`, anchors used)
    let mut plan: Vec<Option<(usize, Vec<usize>)>> = Vec::with_capacity(frames.len());
    let mut pairs = Vec::new();
    for f in frames {
        let idx = f.frame_index().unwrap_or(0);
        if anchor_idx.contains(&Some(idx)) {
            plan.push(None);
            continue;
        }
        let chosen: Vec<usize> = match aggregation {
            Aggregation::MeanOverAll => (0..anchors.len()).collect(),
            Aggregation::NearestPreceding => vec![nearest_preceding(&anchor_idx, idx).expect("non-empty")],
        };
        plan.push(Some((pairs.len(), chosen.clone())));
        pairs.extend(chosen.iter().map(|&a| (&anchors[a].sample, *f)));
    }
    let deltas = model.differentials(&pairs)?;
    let mut out = Vec::with_capacity(frames.len());
    for (f, step) in frames.iter().zip(&plan) {
        let idx = f.frame_index().unwrap_or(0);
        let Some((offset, used)) = step else {
            let a = &anchors[anchor_idx.iter().position(|&a| a == Some(idx)).expect("anchor frame")];
            out.push(FrameLabel {
                index: idx,
                valence: a.label.valence,
                arousal: a.label.arousal,
                is_anchor: true,
            });
            continue;
        };
        let (mut v, mut a) = (0.0, 0.0);
        for (k, &anchor) in used.iter().enumerate() {
            let (dv, da) = deltas[offset + k];
            let r = recover_label(anchors[anchor].label, dv, da);
            v += r.valence;
            a += r.arousal;
        }
        let k = used.len() as f64;
        out.push(FrameLabel {
            index: idx,
            valence: (v / k).clamp(-1.0, 1.0),
            arousal: (a / k).clamp(-1.0, 1.0),
            is_anchor: false,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoLabelling {
    pub video_id: String,
    pub config: AnchorConfig,
    pub support_size: usize,
    pub frames: Vec<FrameLabel>,
    pub metrics: Option<MetricReport>,
}

impl VideoLabelling {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }
}

/// Ground truth and predictions of non-anchor frames, keyed by frame.
fn non_anchor_series(
    video_id: &str,
    frames: &[&FaceSample],
    labels: &[FrameLabel],
) -> Option<(Vec<LabelledFrame>, Vec<LabelledFrame>)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (f, l) in frames.iter().zip(labels) {
        if l.is_anchor {
            continue;
        }
        let key = FrameKey::new(video_id, l.index);
        truth.push((key.clone(), f.dims?));
        pred.push((
            key,
            DimensionalLabel {
                valence: l.valence,
                arousal: l.arousal,
            },
        ));
    }
    Some((truth, pred))
}

fn report_or_none(truth: &[LabelledFrame], pred: &[LabelledFrame], what: &str) -> Result<Option<MetricReport>> {
    if truth.len() < 2 {
        return Ok(None);
    }
    match evaluate(truth, pred, None) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Degenerate(msg)) => {
            log::warn!("no metrics for {what}: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn label_video(
    model: &dyn DifferentialModel,
    dataset: &Dataset,
    video_id: &str,
    cfg: &AnchorConfig,
) -> Result<VideoLabelling> {
    let set = build_anchor_set(dataset, video_id, cfg)?;
    let frames = dataset.video_frames(video_id).ok_or_else(|| Error::UnknownVideo(video_id.into()))?;
    let labels = propagate(model, video_id, &frames, &set.anchors, cfg.aggregation)?;
    let metrics = match non_anchor_series(video_id, &frames, &labels) {
        Some((t, p)) => report_or_none(&t, &p, video_id)?,
        None => None,
    };
    Ok(VideoLabelling {
        video_id: video_id.to_string(),
        config: cfg.clone(),
        support_size: set.support_size,
        frames: labels,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusLabelling {
    pub support_size: usize,
    pub total_frames: usize,
    pub support_fraction: f64,
    /// Pooled over the non-anchor frames of every video.
    pub metrics: Option<MetricReport>,
    pub videos: Vec<VideoLabelling>,
}

pub fn label_corpus(model: &dyn DifferentialModel, dataset: &Dataset, cfg: &AnchorConfig) -> Result<CorpusLabelling> {
    let mut videos = Vec::with_capacity(dataset.videos().len());
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let mut complete = true;
    for v in dataset.videos() {
        let lab = label_video(model, dataset, &v.video_id, cfg)?;
        let frames = dataset.video_frames(&v.video_id).expect("listed video");
        match non_anchor_series(&v.video_id, &frames, &lab.frames) {
            Some((t, p)) => {
                truth.extend(t);
                pred.extend(p);
            }
            None => complete = false,
        }
        videos.push(lab);
    }
    let support_size = videos.iter().map(|v| v.support_size).sum();
    let total_frames = dataset.len();
    let metrics = if complete {
        report_or_none(&truth, &pred, "corpus")?
    } else {
        None
    };
    Ok(CorpusLabelling {
        support_size,
        total_frames,
        support_fraction: if total_frames == 0 {
            0.0
        } else {
            support_size as f64 / total_frames as f64
        },
        metrics,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::datamodel::LabelScale;

    fn corpus() -> Dataset {
        let img = Arc::new(Image::filled(4, 4, 0.0));
        let mut samples = Vec::new();
        for (vid, subj, len) in [("v0", "s0", 35u32), ("v1", "s0", 12), ("v2", "s1", 20)] {
            for i in 0..len {
                let v = ((i as f64 * 7.0 + vid.len() as f64) % 64.0 - 32.0) / 64.0;
                let a = ((i as f64 * 3.0) % 32.0 - 16.0) / 64.0;
                let dims = DimensionalLabel::new(v, a).unwrap();
                samples.push(FaceSample::video_frame(img.clone(), Some(dims), subj, vid, i));
            }
        }
        Dataset::new(DatasetKind::VideoSet, LabelScale::UNIT, samples).unwrap()
    }

    #[test]
    fn first_and_recurring_anchor_indices() {
        let d = corpus();
        let s = build_anchor_set(&d, "v0", &AnchorConfig::first()).unwrap();
        assert_eq!(s.anchors[0].sample.frame_index(), Some(0));
        let cfg = AnchorConfig::recurring(10, Aggregation::NearestPreceding).unwrap();
        let s = build_anchor_set(&d, "v0", &cfg).unwrap();
        let idx: Vec<_> = s.anchors.iter().map(|a| a.sample.frame_index().unwrap()).collect();
        assert_eq!(idx, vec![0, 10, 20, 30]);
        assert_eq!(s.support_size, 4);
    }

    #[test]
    fn subject_pools() {
        let d = corpus();
        for seed in 0..20 {
            let cfg = AnchorConfig::new(AnchorKind::SubjectSpecificRandom, None, Aggregation::NearestPreceding, seed).unwrap();
            let s = build_anchor_set(&d, "v0", &cfg).unwrap();
            assert_eq!(s.anchors[0].sample.subject_id, "s0");
            let cfg = AnchorConfig { kind: AnchorKind::DifferentSubjectRandom, ..cfg };
            let s = build_anchor_set(&d, "v0", &cfg).unwrap();
            assert_eq!(s.anchors[0].sample.subject_id, "s1");
        }
        assert!(matches!(build_anchor_set(&d, "nope", &AnchorConfig::first()), Err(Error::UnknownVideo(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AnchorConfig::new(AnchorKind::RecurringNth, None, Aggregation::MeanOverAll, 0).is_err());
        assert!(AnchorConfig::new(AnchorKind::FirstFrame, Some(3), Aggregation::MeanOverAll, 0).is_err());
        let json = r#"{"kind":"recurring-nth","aggregation":"mean_over_all"}"#;
        assert!(serde_json::from_str::<AnchorConfig>(json).is_err());
    }

    #[test]
    fn recover_label_examples() {
        let l = recover_label(DimensionalLabel { valence: 0.5, arousal: 0.0 }, 0.3, 0.0);
        assert!((l.valence - 0.2).abs() < 1e-15);
        let l = recover_label(DimensionalLabel { valence: 1.0, arousal: 0.0 }, -0.5, 0.0);
        assert_eq!(l.valence, 1.0);
        let z = DimensionalLabel { valence: 0.0, arousal: 0.0 };
        assert_eq!(recover_label(z, 0.0, 0.0), z);
    }

    #[test]
    fn preceding_selection() {
        let idx: Vec<_> = [0, 10, 20, 30].iter().map(|&i| Some(i)).collect();
        assert_eq!(nearest_preceding(&idx, 25), Some(2));
        assert_eq!(nearest_preceding(&idx, 30), Some(3));
        assert_eq!(nearest_preceding(&[Some(5), Some(9)], 2), Some(0));
        assert_eq!(nearest_preceding(&[None], 7), Some(0));
    }

    #[test]
    fn oracle_reproduces_ground_truth() {
        let d = corpus();
        for kind in AnchorKind::ALL {
            for agg in [Aggregation::NearestPreceding, Aggregation::MeanOverAll] {
                let n = (kind == AnchorKind::RecurringNth).then_some(10);
                let cfg = AnchorConfig::new(kind, n, agg, 3).unwrap();
                let out = label_video(&GroundTruthOracle, &d, "v0", &cfg).unwrap();
                let frames = d.video_frames("v0").unwrap();
                for (f, l) in frames.iter().zip(&out.frames) {
                    assert_eq!((l.valence, l.arousal), (f.dims.unwrap().valence, f.dims.unwrap().arousal));
                }
                let m = out.metrics.unwrap();
                assert_eq!(m.valence.rmse, 0.0);
            }
        }
    }

    #[test]
    fn output_json_shape() {
        let d = corpus();
        let out = label_video(&GroundTruthOracle, &d, "v1", &AnchorConfig::first()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.to_json()).unwrap();
        for key in ["video_id", "config", "support_size", "frames", "metrics"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["frames"][0]["is_anchor"], true);
        assert_eq!(v["frames"].as_array().unwrap().len(), 12);
    }
}
