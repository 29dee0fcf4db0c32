//! Domain types, manifest ingestion, label rescaling and cross-validation folds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight categorical emotions, with stable integer codes 0-7.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum EmotionCategory {
    Neutral = 0,
    Happy = 1,
    Sad = 2,
    Surprise = 3,
    Fear = 4,
    Disgust = 5,
    Anger = 6,
    Contempt = 7,
}

impl EmotionCategory {
    pub const COUNT: usize = 8;

    pub const ALL: [EmotionCategory; 8] = [
        EmotionCategory::Neutral,
        EmotionCategory::Happy,
        EmotionCategory::Sad,
        EmotionCategory::Surprise,
        EmotionCategory::Fear,
        EmotionCategory::Disgust,
        EmotionCategory::Anger,
        EmotionCategory::Contempt,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionCategory::Neutral => "neutral",
            EmotionCategory::Happy => "happy",
            EmotionCategory::Sad => "sad",
            EmotionCategory::Surprise => "surprise",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Disgust => "disgust",
            EmotionCategory::Anger => "anger",
            EmotionCategory::Contempt => "contempt",
        }
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion category {s:?}")))
    }
}

/// A (valence, arousal) pair.
///
/// Labels of a rescaled dataset lie in [-1, 1]; before [`rescale_labels`] they
/// are in the dataset's declared raw scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionalLabel {
    pub valence: f64,
    pub arousal: f64,
}

impl DimensionalLabel {
    /// Checked constructor for normalised labels.
    pub fn new(valence: f64, arousal: f64) -> Result<Self> {
        for v in [valence, arousal] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::LabelOutOfRange {
                    value: v,
                    lo: -1.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Self { valence, arousal })
    }

    pub fn is_normalised(&self) -> bool {
        (-1.0..=1.0).contains(&self.valence) && (-1.0..=1.0).contains(&self.arousal)
    }
}

/// RGB image, channel-major, intensities in [0, 1].
#[derive(Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn from_chw(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        let expected = Self::CHANNELS * width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected} values for {width}x{height} RGB"),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; Self::CHANNELS * (width * height) as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height as usize + y) * self.width as usize + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (w, h) = (self.width as usize, self.height as usize);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage {
                path: path.to_path_buf(),
            });
        }
        let decoded = image::open(path).map_err(|e| Error::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut out = Self::filled(w, h, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width, self.height, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::BadImage {
                path: PathBuf::from("<memory>"),
                message: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// One face image with optional labels and video identity.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub image: Arc<Image>,
    /// Source file, when the sample came from a manifest.
    pub image_path: Option<PathBuf>,
    pub category: Option<EmotionCategory>,
    pub dims: Option<DimensionalLabel>,
    pub subject_id: String,
    /// `(video_id, frame_index)`; both or neither.
    pub frame: Option<(String, u32)>,
}

impl FaceSample {
    pub fn still(
        image: Arc<Image>,
        category: Option<EmotionCategory>,
        dims: Option<DimensionalLabel>,
        subject_id: impl Into<String>,
    ) -> Self {
        Self {
            image,
            image_path: None,
            category,
            dims,
            subject_id: subject_id.into(),
            frame: None,
        }
    }

    pub fn video_frame(
        image: Arc<Image>,
        dims: Option<DimensionalLabel>,
        subject_id: impl Into<String>,
        video_id: impl Into<String>,
        frame_index: u32,
    ) -> Self {
        Self {
            image,
            image_path: None,
            category: None,
            dims,
            subject_id: subject_id.into(),
            frame: Some((video_id.into(), frame_index)),
        }
    }

    pub fn video_id(&self) -> Option<&str> {
        self.frame.as_ref().map(|(v, _)| v.as_str())
    }

    pub fn frame_index(&self) -> Option<u32> {
        self.frame.as_ref().map(|(_, i)| *i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ImageSet,
    VideoSet,
}

/// Declared raw range of the dimensional labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub lo: f64,
    pub hi: f64,
}

impl LabelScale {
    pub const UNIT: LabelScale = LabelScale { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "label range [{lo}, {hi}] must satisfy lo < hi"
            )));
        }
        Ok(Self { lo, hi })
    }
}

/// Frames of one video inside a video-set, in ascending frame order.
#[derive(Clone, Debug)]
pub struct VideoInfo {
    pub video_id: String,
    pub subject_id: String,
    /// Indices into [`Dataset::samples`].
    pub sample_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<FaceSample>,
    kind: DatasetKind,
    label_scale: LabelScale,
    videos: Vec<VideoInfo>,
}

impl Dataset {
    /// Validates the sample list. Video-set frames are grouped per video (in
    /// order of first appearance) and sorted by frame index.
    pub fn new(kind: DatasetKind, label_scale: LabelScale, samples: Vec<FaceSample>) -> Result<Self> {
        let mut samples = samples;
        let mut videos = Vec::new();
        if kind == DatasetKind::VideoSet {
            let mut order: Vec<String> = Vec::new();
            let mut groups: HashMap<String, Vec<FaceSample>> = HashMap::new();
            for s in samples {
                let Some((vid, _)) = &s.frame else {
                    return Err(Error::InvalidArgument(
                        "video-set sample without video_id/frame_index".into(),
                    ));
                };
                if !groups.contains_key(vid) {
                    order.push(vid.clone());
                }
                groups.entry(vid.clone()).or_default().push(s);
            }
            samples = Vec::new();
            for vid in order {
                let mut frames = groups.remove(&vid).unwrap_or_default();
                frames.sort_by_key(|s| s.frame_index());
                for w in frames.windows(2) {
                    if w[0].frame_index() == w[1].frame_index() {
                        return Err(Error::DuplicateFrame {
                            video_id: vid.clone(),
                            frame_index: w[0].frame_index().unwrap_or_default(),
                        });
                    }
                }
                let subject_id = frames.first().map(|s| s.subject_id.clone()).unwrap_or_default();
                let start = samples.len();
                samples.extend(frames);
                videos.push(VideoInfo {
                    video_id: vid,
                    subject_id,
                    sample_indices: (start..samples.len()).collect(),
                });
            }
        }
        Ok(Self {
            samples,
            kind,
            label_scale,
            videos,
        })
    }

    pub fn empty(kind: DatasetKind) -> Self {
        Self {
            samples: Vec::new(),
            kind,
            label_scale: LabelScale::UNIT,
            videos: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[FaceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn label_scale(&self) -> LabelScale {
        self.label_scale
    }

    pub fn videos(&self) -> &[VideoInfo] {
        &self.videos
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoInfo> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Frames of one video, ascending by frame index.
    pub fn video_frames(&self, video_id: &str) -> Option<Vec<&FaceSample>> {
        self.video(video_id)
            .map(|v| v.sample_indices.iter().map(|&i| &self.samples[i]).collect())
    }

    /// A new dataset holding the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let picked = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(self.kind, self.label_scale, picked)
    }

    pub fn distinct_subjects(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.subject_id.as_str()).or_insert(0) += 1;
        }
        out
    }
}

/// Loader knobs that the manifest formats leave to the caller.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Raw label range for image-set manifests (video-set manifests declare
    /// their own). Defaults to [-1, 1].
    pub csv_raw_range: Option<LabelScale>,
    /// When set, every image must be exactly `side x side`.
    pub side: Option<u32>,
}

pub fn load_manifest(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    load_manifest_with(path, kind, &LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, kind: DatasetKind, opts: &LoadOptions) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    match kind {
        DatasetKind::ImageSet => load_csv(path, &base, opts),
        DatasetKind::VideoSet => load_video_json(path, &base, opts),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_image_checked(path: &Path, opts: &LoadOptions) -> Result<Arc<Image>> {
    let img = Image::open(path)?;
    if let Some(side) = opts.side {
        if img.width() != side || img.height() != side {
            return Err(Error::BadImage {
                path: path.to_path_buf(),
                message: format!(
                    "resolution {}x{} does not match declared {side}x{side}",
                    img.width(),
                    img.height()
                ),
            });
        }
    }
    Ok(Arc::new(img))
}

const CSV_HEADER: [&str; 5] = ["image_path", "category_code", "valence", "arousal", "subject_id"];

fn load_csv(path: &Path, base: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::MalformedManifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let header = reader.headers().map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::MalformedManifest {
            path: path.to_path_buf(),
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let scale = opts.csv_raw_range.unwrap_or(LabelScale::UNIT);
    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let category = match &rec[1] {
            "" => None,
            code => {
                let code: u8 = code
                    .parse()
                    .map_err(|_| bad(format!("category_code {code:?} is not an integer")))?;
                Some(
                    EmotionCategory::from_code(code)
                        .ok_or_else(|| bad(format!("category_code {code} outside 0-7")))?,
                )
            }
        };
        let dims = match (&rec[2], &rec[3]) {
            ("", "") => None,
            (v, a) => {
                let parse = |s: &str, what: &str| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad(format!("{what} {s:?} is not a finite number")))
                };
                Some(DimensionalLabel {
                    valence: parse(v, "valence")?,
                    arousal: parse(a, "arousal")?,
                })
            }
        };
        if rec[4].is_empty() {
            return Err(bad("empty subject_id".into()));
        }
        let image_path = resolve(base, &rec[0]);
        let image = load_image_checked(&image_path, opts)?;
        samples.push(FaceSample {
            image,
            image_path: Some(image_path),
            category,
            dims,
            subject_id: rec[4].to_string(),
            frame: None,
        });
    }
    Dataset::new(DatasetKind::ImageSet, scale, samples)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VideoManifest {
    pub raw_range: [f64; 2],
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub subject_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: u32,
    pub image_path: String,
    #[serde(default)]
    pub valence: Option<f64>,
    #[serde(default)]
    pub arousal: Option<f64>,
}

fn load_video_json(path: &Path, base: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: VideoManifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let scale = LabelScale::new(manifest.raw_range[0], manifest.raw_range[1])?;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    let mut row = 0;
    for video in &manifest.videos {
        for frame in &video.frames {
            row += 1;
            if !seen.insert((video.video_id.clone(), frame.index)) {
                return Err(Error::DuplicateFrame {
                    video_id: video.video_id.clone(),
                    frame_index: frame.index,
                });
            }
            let dims = match (frame.valence, frame.arousal) {
                (Some(valence), Some(arousal)) => Some(DimensionalLabel { valence, arousal }),
                (None, None) => None,
                _ => {
                    return Err(Error::MalformedRow {
                        path: path.to_path_buf(),
                        row,
                        message: "valence and arousal must be given together".into(),
                    })
                }
            };
            let image_path = resolve(base, &frame.image_path);
            let image = load_image_checked(&image_path, opts)?;
            samples.push(FaceSample {
                image,
                image_path: Some(image_path),
                category: None,
                dims,
                subject_id: video.subject_id.clone(),
                frame: Some((video.video_id.clone(), frame.index)),
            });
        }
    }
    Dataset::new(DatasetKind::VideoSet, scale, samples)
}

/// Maps every dimensional label linearly so that `lo -> -1` and `hi -> 1`.
pub fn rescale_labels(dataset: &Dataset, raw_range: LabelScale) -> Result<Dataset> {
    let LabelScale { lo, hi } = LabelScale::new(raw_range.lo, raw_range.hi)?;
    let mut out = dataset.clone();
    out.label_scale = LabelScale::UNIT;
    if raw_range == LabelScale::UNIT {
        // The identity map; skip the arithmetic so repeated application is exact.
        for s in &out.samples {
            if let Some(d) = s.dims {
                check_in_range(d, lo, hi)?;
            }
        }
        return Ok(out);
    }
    let map = |v: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
    for s in &mut out.samples {
        if let Some(d) = s.dims {
            check_in_range(d, lo, hi)?;
            s.dims = Some(DimensionalLabel {
                valence: map(d.valence),
                arousal: map(d.arousal),
            });
        }
    }
    Ok(out)
}

fn check_in_range(d: DimensionalLabel, lo: f64, hi: f64) -> Result<()> {
    for value in [d.valence, d.arousal] {
        if !(lo..=hi).contains(&value) {
            return Err(Error::LabelOutOfRange { value, lo, hi });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldStrategy {
    SubjectIndependent,
    SubjectDependent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub strategy: FoldStrategy,
    pub k: usize,
    /// Fold index of each sample, parallel to [`Dataset::samples`].
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Builds a deterministic k-fold assignment.
///
/// Subject-independent: subjects are shuffled with `seed`, ordered by
/// descending sample count, and each is given to the currently smallest fold.
/// Subject-dependent: each subject's samples are shuffled and dealt
/// round-robin over the folds with a counter that carries across subjects.
pub fn make_folds(dataset: &Dataset, strategy: FoldStrategy, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count k={k} must be at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        by_subject.entry(s.subject_id.as_str()).or_default().push(i);
    }
    let mut subjects: Vec<(&str, Vec<usize>)> = by_subject.into_iter().collect();
    subjects.shuffle(&mut rng);

    let mut fold_of = vec![0; dataset.len()];
    match strategy {
        FoldStrategy::SubjectIndependent => {
            if subjects.len() < k {
                return Err(Error::Infeasible(format!(
                    "{} distinct subjects cannot fill {k} subject-independent folds",
                    subjects.len()
                )));
            }
            subjects.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
            let mut sizes = vec![0usize; k];
            for (_, members) in &subjects {
                let target = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap_or(0);
                sizes[target] += members.len();
                for &i in members {
                    fold_of[i] = target;
                }
            }
        }
        FoldStrategy::SubjectDependent => {
            let mut counter = 0usize;
            for (_, members) in &mut subjects {
                members.shuffle(&mut rng);
                for &i in members.iter() {
                    fold_of[i] = counter % k;
                    counter += 1;
                }
            }
        }
    }
    Ok(FoldAssignment { strategy, k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image() -> Arc<Image> {
        Arc::new(Image::filled(2, 2, 0.5))
    }

    fn still(subject: &str, v: f64) -> FaceSample {
        FaceSample::still(
            tiny_image(),
            Some(EmotionCategory::Happy),
            Some(DimensionalLabel { valence: v, arousal: -v }),
            subject,
        )
    }

    #[test]
    fn category_codes_are_a_bijection() {
        let codes: HashSet<u8> = EmotionCategory::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes.len(), 8);
        for c in EmotionCategory::ALL {
            assert_eq!(EmotionCategory::from_code(c.code()), Some(c));
            assert_eq!(c.name().parse::<EmotionCategory>().unwrap(), c);
        }
        assert_eq!(EmotionCategory::from_code(8), None);
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let ds = Dataset::new(
            DatasetKind::ImageSet,
            LabelScale::new(-10.0, 10.0).unwrap(),
            vec![still("a", 10.0), still("a", 0.0), still("a", 5.0)],
        )
        .unwrap();
        let out = rescale_labels(&ds, LabelScale::new(-10.0, 10.0).unwrap()).unwrap();
        let v: Vec<f64> = out.samples().iter().map(|s| s.dims.unwrap().valence).collect();
        assert_eq!(v, vec![1.0, 0.0, 0.5]);
        assert_eq!(out.label_scale(), LabelScale::UNIT);
    }

    #[test]
    fn rescale_rejects_out_of_range() {
        let ds = Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, vec![still("a", 11.0)]).unwrap();
        let err = rescale_labels(&ds, LabelScale::new(-10.0, 10.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { .. }));
        assert!(LabelScale::new(1.0, 1.0).is_err());
    }

    #[test]
    fn duplicate_frames_are_rejected() {
        let f = |i| FaceSample::video_frame(tiny_image(), None, "s", "v1", i);
        let err = Dataset::new(DatasetKind::VideoSet, LabelScale::UNIT, vec![f(0), f(1), f(0)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateFrame { ref video_id, frame_index: 0 } if video_id == "v1"));
    }

    #[test]
    fn video_frames_sorted() {
        let f = |v: &str, i| FaceSample::video_frame(tiny_image(), None, "s", v, i);
        let ds = Dataset::new(
            DatasetKind::VideoSet,
            LabelScale::UNIT,
            vec![f("b", 3), f("a", 2), f("b", 1), f("a", 0)],
        )
        .unwrap();
        let ids: Vec<_> = ds.videos().iter().map(|v| v.video_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a"]);
        let b: Vec<u32> = ds.video_frames("b").unwrap().iter().map(|s| s.frame_index().unwrap()).collect();
        assert_eq!(b, vec![1, 3]);
    }

    #[test]
    fn five_subjects_five_folds() {
        let samples: Vec<_> = ["A", "B", "C", "D", "E"]
            .iter()
            .flat_map(|s| (0..3).map(move |i| still(s, i as f64 * 0.1)))
            .collect();
        let ds = Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, samples).unwrap();
        let folds = make_folds(&ds, FoldStrategy::SubjectIndependent, 5, 7).unwrap();
        for f in 0..5 {
            let subjects: HashSet<_> = folds
                .test_indices(f)
                .iter()
                .map(|&i| ds.samples()[i].subject_id.clone())
                .collect();
            assert_eq!(subjects.len(), 1);
            assert_eq!(folds.test_indices(f).len(), 3);
        }
        assert_eq!(folds, make_folds(&ds, FoldStrategy::SubjectIndependent, 5, 7).unwrap());
    }

    #[test]
    fn too_few_subjects() {
        let ds = Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, vec![still("a", 0.0), still("b", 0.0)]).unwrap();
        assert!(matches!(
            make_folds(&ds, FoldStrategy::SubjectIndependent, 3, 0),
            Err(Error::Infeasible(_))
        ));
        assert!(make_folds(&ds, FoldStrategy::SubjectDependent, 1, 0).is_err());
    }

    #[test]
    fn subject_dependent_balanced_within_one() {
        let samples: Vec<_> = (0..23).map(|i| still(&format!("s{}", i % 4), 0.0)).collect();
        let ds = Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, samples).unwrap();
        let folds = make_folds(&ds, FoldStrategy::SubjectDependent, 5, 3).unwrap();
        let sizes = folds.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
