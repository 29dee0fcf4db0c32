//! Synthetic corpora for tests, demos and desk-scale training runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    Dataset, DatasetKind, DimensionalLabel, EmotionCategory, FaceSample, FrameEntry, Image, LabelScale, VideoEntry,
    VideoManifest,
};
use crate::error::{Error, Result};
use crate::sampler::WheelConfig;

#[derive(Clone, Debug)]
pub struct PatternConfig {
    pub per_class: usize,
    pub side: u32,
    pub subjects: usize,
    /// Amplitude of uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            side: 36,
            subjects: 40,
            noise: 0.05,
            seed: 0,
        }
    }
}

const TINTS: [[f32; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.8, 0.3],
    [0.3, 0.4, 1.0],
    [1.0, 1.0, 0.3],
    [0.6, 0.3, 1.0],
    [0.4, 1.0, 0.3],
    [1.0, 0.3, 0.3],
    [0.3, 1.0, 1.0],
];

/// Oriented sinusoidal grating. `contrast` in [0, 1]; `freq_jitter` in [-1, 1].
pub fn grating(class: EmotionCategory, side: u32, phase: f64, contrast: f64, freq_jitter: f64) -> Image {
    let c = class.code() as usize;
    let theta = c as f64 * std::f64::consts::PI / 8.0;
    let freq = 2.0 + 0.5 * freq_jitter;
    let s = side as usize;
    let mut img = Image::filled(side, side, 0.0);
    for y in 0..s {
        for x in 0..s {
            let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / side as f64;
            let g = 0.5 + 0.5 * contrast * (2.0 * std::f64::consts::PI * freq * t + phase).sin();
            for (ch, tint) in TINTS[c].iter().enumerate() {
                img.set(ch, y, x, (g as f32 * tint).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn add_noise(img: &mut Image, amp: f32, rng: &mut ChaCha8Rng) {
    if amp <= 0.0 {
        return;
    }
    let s = img.width() as usize;
    for ch in 0..Image::CHANNELS {
        for y in 0..s {
            for x in 0..s {
                let v = img.get(ch, y, x) + rng.random_range(-amp..=amp);
                img.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Eight-class grating images. Each label sits within 0.85 radius of its
/// class centre, offset by contrast (valence) and frequency (arousal).
pub fn pattern_dataset(cfg: &PatternConfig, wheel: &WheelConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reach = 0.6 * wheel.radius();
    let mut samples = Vec::with_capacity(cfg.per_class * 8);
    for i in 0..cfg.per_class {
        for class in EmotionCategory::ALL {
            let (cv, ca) = wheel
                .center(class)
                .ok_or_else(|| Error::MissingWheelCenter(class.name().to_string()))?;
            let contrast: f64 = rng.random_range(0.5..=1.0);
            let jitter: f64 = rng.random_range(-1.0..=1.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut img = grating(class, cfg.side, phase, contrast, jitter);
            add_noise(&mut img, cfg.noise, &mut rng);
            let dv = (contrast - 0.75) / 0.25 * reach;
            let da = jitter * reach;
            let dims = DimensionalLabel::new((cv + dv).clamp(-1.0, 1.0), (ca + da).clamp(-1.0, 1.0))?;
            let subject = format!("subj{:03}", (i * 8 + class.code() as usize) % cfg.subjects.max(1));
            samples.push(FaceSample::still(Arc::new(img), Some(class), Some(dims), subject));
        }
    }
    Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, samples)
}

#[derive(Clone, Debug)]
pub struct VideoCorpusConfig {
    pub videos: usize,
    pub min_len: u32,
    pub max_len: u32,
    pub subjects: usize,
    pub side: u32,
    pub seed: u64,
}

impl Default for VideoCorpusConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            min_len: 30,
            max_len: 70,
            subjects: 8,
            side: 8,
            seed: 0,
        }
    }
}

/// Rounds to a multiple of 2^-10 so that label differences are exact in `f64`.
fn dyadic(v: f64) -> f64 {
    (v * 1024.0).round() / 1024.0
}

/// Frame image whose brightness tracks valence and whose grating tracks arousal.
pub fn affect_frame(side: u32, label: DimensionalLabel, tint: [f32; 3]) -> Image {
    let s = side as usize;
    let mut img = Image::filled(side, side, 0.0);
    let level = 0.5 + 0.35 * label.valence;
    let freq = 1.5 + label.arousal;
    for y in 0..s {
        for x in 0..s {
            let g = level + 0.15 * (std::f64::consts::TAU * freq * x as f64 / side as f64).sin() * (1.0 - y as f64 / side as f64);
            for (ch, t) in tint.iter().enumerate() {
                img.set(ch, y, x, (g as f32 * t).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Videos of smoothly drifting valence/arousal, labels in [-0.875, 0.875] on a 2^-10 grid.
pub fn video_corpus(cfg: &VideoCorpusConfig) -> Result<Dataset> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::InvalidArgument("need 0 < min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    for v in 0..cfg.videos {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let subject = v % cfg.subjects.max(1);
        let tint = TINTS[subject % TINTS.len()];
        let (mut val, mut aro): (f64, f64) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
        let (mut dv, mut da) = (0.0, 0.0);
        for i in 0..len {
            dv = 0.8 * dv + rng.random_range(-0.02..0.02);
            da = 0.8 * da + rng.random_range(-0.02..0.02);
            val = (val + dv).clamp(-0.875, 0.875);
            aro = (aro + da).clamp(-0.875, 0.875);
            let label = DimensionalLabel::new(dyadic(val), dyadic(aro))?;
            let img = affect_frame(cfg.side, label, tint);
            samples.push(FaceSample::video_frame(
                Arc::new(img),
                Some(label),
                format!("subj{subject:03}"),
                format!("vid{v:04}"),
                i,
            ));
        }
    }
    Dataset::new(DatasetKind::VideoSet, LabelScale::UNIT, samples)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes PNGs under `dir/images` and `dir/manifest.csv`; returns the manifest path.
pub fn write_image_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    create_dir(&img_dir)?;
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::MalformedManifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::MalformedManifest {
        path: path.clone(),
        message: e.to_string(),
    };
    w.write_record(["image_path", "category_code", "valence", "arousal", "subject_id"])
        .map_err(csv_err)?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        s.image.save_png(&dir.join(&rel))?;
        let cat = s.category.map(|c| c.code().to_string()).unwrap_or_default();
        let (v, a) = s
            .dims
            .map(|d| (d.valence.to_string(), d.arousal.to_string()))
            .unwrap_or_default();
        w.write_record([rel.as_str(), &cat, &v, &a, &s.subject_id]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes PNGs under `dir/frames` and `dir/videos.json`; returns the manifest path.
pub fn write_video_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let frame_dir = dir.join("frames");
    create_dir(&frame_dir)?;
    let mut videos = Vec::new();
    for info in dataset.videos() {
        let mut frames = Vec::new();
        for &i in &info.sample_indices {
            let s = &dataset.samples()[i];
            let index = s.frame_index().expect("video frame");
            let rel = format!("frames/{}_{index:05}.png", info.video_id);
            s.image.save_png(&dir.join(&rel))?;
            frames.push(FrameEntry {
                index,
                image_path: rel,
                valence: s.dims.map(|d| d.valence),
                arousal: s.dims.map(|d| d.arousal),
            });
        }
        videos.push(VideoEntry {
            video_id: info.video_id.clone(),
            subject_id: info.subject_id.clone(),
            frames,
        });
    }
    let manifest = VideoManifest {
        raw_range: [-1.0, 1.0],
        videos,
    };
    let path = dir.join("videos.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::neighborhood_filter;

    #[test]
    fn patterns_survive_the_default_wheel() {
        let wheel = WheelConfig::default();
        let cfg = PatternConfig {
            per_class: 5,
            side: 12,
            ..Default::default()
        };
        let d = pattern_dataset(&cfg, &wheel).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(neighborhood_filter(&d, &wheel).unwrap().len(), 40);
    }

    #[test]
    fn corpus_shape_and_grid() {
        let d = video_corpus(&VideoCorpusConfig::default()).unwrap();
        assert_eq!(d.videos().len(), 20);
        for v in d.videos() {
            assert!((30..=70).contains(&v.sample_indices.len()));
        }
        for s in d.samples() {
            let l = s.dims.unwrap();
            assert_eq!(l.valence * 1024.0, (l.valence * 1024.0).round());
            assert!(l.valence.abs() <= 0.875 && l.arousal.abs() <= 0.875);
        }
    }
}
