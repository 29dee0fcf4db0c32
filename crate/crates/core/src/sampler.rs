//! Valence-arousal neighbourhood filtering and similar/dissimilar pair generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, EmotionCategory, FaceSample};
use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: f64 = 0.2;
pub const DEFAULT_SIMILAR_FRACTION: f64 = 0.5;

const DEFAULT_WHEEL_JSON: &str = include_str!("../config/wheel_default.json");

/// Per-category centers on the valence-arousal plane plus the neighbourhood radius.
#[derive(Clone, Debug, PartialEq)]
pub struct WheelConfig {
    centers: BTreeMap<EmotionCategory, (f64, f64)>,
    radius: f64,
}

#[derive(Serialize, Deserialize)]
struct WheelFile {
    radius: f64,
    centers: BTreeMap<String, [f64; 2]>,
}

impl WheelConfig {
    pub fn new(centers: BTreeMap<EmotionCategory, (f64, f64)>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("wheel radius {radius} must be > 0")));
        }
        for (cat, &(v, a)) in &centers {
            if !((-1.0..=1.0).contains(&v) && (-1.0..=1.0).contains(&a)) {
                return Err(Error::InvalidArgument(format!(
                    "center ({v}, {a}) of {cat} lies outside [-1, 1]^2"
                )));
            }
        }
        Ok(Self { centers, radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn center(&self, category: EmotionCategory) -> Option<(f64, f64)> {
        self.centers.get(&category).copied()
    }

    pub fn centers(&self) -> &BTreeMap<EmotionCategory, (f64, f64)> {
        &self.centers
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WheelFile = serde_json::from_str(text)?;
        let mut centers = BTreeMap::new();
        for (name, [v, a]) in file.centers {
            centers.insert(name.parse::<EmotionCategory>()?, (v, a));
        }
        Self::new(centers, file.radius)
    }

    pub fn to_json(&self) -> String {
        let file = WheelFile {
            radius: self.radius,
            centers: self
                .centers
                .iter()
                .map(|(c, &(v, a))| (c.name().to_string(), [v, a]))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("wheel config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Default for WheelConfig {
    fn default() -> Self {
        Self::from_json(DEFAULT_WHEEL_JSON).expect("bundled wheel config is valid")
    }
}

fn labels_of(sample: &FaceSample, index: usize) -> Result<(EmotionCategory, f64, f64)> {
    match (sample.category, sample.dims) {
        (Some(c), Some(d)) => Ok((c, d.valence, d.arousal)),
        _ => Err(Error::InvalidArgument(format!(
            "sample {index} lacks a category or dimensional label"
        ))),
    }
}

/// Keeps the samples whose (valence, arousal) lies within `radius` of their
/// category's center; order is preserved.
pub fn neighborhood_filter(dataset: &Dataset, wheel: &WheelConfig) -> Result<Dataset> {
    let mut keep = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        let (cat, v, a) = labels_of(s, i)?;
        let (cv, ca) = wheel
            .center(cat)
            .ok_or_else(|| Error::MissingWheelCenter(cat.name().to_string()))?;
        if (v - cv).hypot(a - ca) <= wheel.radius {
            keep.push(i);
        }
    }
    dataset.subset(&keep)
}

/// Retained count per category, for reporting.
pub fn category_counts(dataset: &Dataset) -> BTreeMap<EmotionCategory, usize> {
    let mut out = BTreeMap::new();
    for s in dataset.samples() {
        if let Some(c) = s.category {
            *out.entry(c).or_insert(0) += 1;
        }
    }
    out
}

/// Two samples, their similarity label and the first-minus-second differentials.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub a: FaceSample,
    pub b: FaceSample,
    pub similar: bool,
    pub delta_v: f64,
    pub delta_a: f64,
}

impl PairSample {
    pub fn new(a: FaceSample, b: FaceSample) -> Result<Self> {
        let (ca, va, aa) = labels_of(&a, 0)?;
        let (cb, vb, ab) = labels_of(&b, 1)?;
        Ok(Self {
            a,
            b,
            similar: ca == cb,
            delta_v: va - vb,
            delta_a: aa - ab,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
            similar: self.similar,
            delta_v: -self.delta_v,
            delta_a: -self.delta_a,
        }
    }

    pub fn label(&self) -> usize {
        usize::from(self.similar)
    }
}

/// Index-level pair, cheap to generate in bulk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub similar: bool,
}

/// Draws `count` pairs with replacement; exactly `round(count * similar_fraction)`
/// of them are similar. Similar pairs pick a uniform sample from a category
/// with at least two members and a distinct partner of that category;
/// dissimilar pairs pick a uniform sample and a partner from any other category.
pub fn generate_pair_indices(
    dataset: &Dataset,
    count: usize,
    similar_fraction: f64,
    seed: u64,
) -> Result<Vec<PairIndex>> {
    if !(0.0..=1.0).contains(&similar_fraction) {
        return Err(Error::InvalidArgument(format!(
            "similar_fraction {similar_fraction} outside [0, 1]"
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::Infeasible(format!(
            "pair generation needs at least 2 samples, dataset has {}",
            dataset.len()
        )));
    }
    let mut members: BTreeMap<EmotionCategory, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        let cat = s
            .category
            .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no category")))?;
        members.entry(cat).or_default().push(i);
    }
    let n_similar = (count as f64 * similar_fraction).round() as usize;
    let n_dissimilar = count - n_similar;

    let similar_pool: Vec<usize> = members
        .values()
        .filter(|m| m.len() >= 2)
        .flat_map(|m| m.iter().copied())
        .collect();
    if n_similar > 0 && similar_pool.is_empty() {
        return Err(Error::Infeasible(
            "similar pairs requested but no category has two members".into(),
        ));
    }
    if n_dissimilar > 0 && members.len() < 2 {
        return Err(Error::Infeasible(
            "dissimilar pairs requested but the dataset holds a single category".into(),
        ));
    }

    let category_of = |i: usize| dataset.samples()[i].category.expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..n_similar {
        let a = *similar_pool.choose(&mut rng).expect("non-empty");
        let same = &members[&category_of(a)];
        let mut b = a;
        while b == a {
            b = same[rng.random_range(0..same.len())];
        }
        pairs.push(PairIndex { a, b, similar: true });
    }
    for _ in 0..n_dissimilar {
        let a = rng.random_range(0..dataset.len());
        let cat = category_of(a);
        let others = dataset.len() - members[&cat].len();
        // Uniform over samples of other categories: index into the virtual
        // concatenation of the other categories' member lists.
        let mut k = rng.random_range(0..others);
        let mut b = usize::MAX;
        for (c, m) in &members {
            if *c == cat {
                continue;
            }
            if k < m.len() {
                b = m[k];
                break;
            }
            k -= m.len();
        }
        pairs.push(PairIndex { a, b, similar: false });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

pub fn generate_pairs(
    dataset: &Dataset,
    count: usize,
    similar_fraction: f64,
    seed: u64,
) -> Result<Vec<PairSample>> {
    generate_pair_indices(dataset, count, similar_fraction, seed)?
        .into_iter()
        .map(|p| {
            PairSample::new(
                dataset.samples()[p.a].clone(),
                dataset.samples()[p.b].clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::datamodel::{DatasetKind, DimensionalLabel, Image, LabelScale};

    fn sample(cat: EmotionCategory, v: f64, a: f64) -> FaceSample {
        FaceSample::still(
            Arc::new(Image::filled(1, 1, 0.0)),
            Some(cat),
            Some(DimensionalLabel { valence: v, arousal: a }),
            "s",
        )
    }

    fn one_center_wheel() -> WheelConfig {
        let mut centers = BTreeMap::new();
        centers.insert(EmotionCategory::Happy, (0.5, 0.5));
        WheelConfig::new(centers, 0.2).unwrap()
    }

    #[test]
    fn retains_inside_radius_only() {
        let ds = Dataset::new(
            DatasetKind::ImageSet,
            LabelScale::UNIT,
            vec![
                sample(EmotionCategory::Happy, 0.5, 0.65),
                sample(EmotionCategory::Happy, 0.5, 0.75),
            ],
        )
        .unwrap();
        let kept = neighborhood_filter(&ds, &one_center_wheel()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.samples()[0].dims.unwrap().arousal, 0.65);
    }

    #[test]
    fn missing_center_names_category() {
        let ds = Dataset::new(
            DatasetKind::ImageSet,
            LabelScale::UNIT,
            vec![sample(EmotionCategory::Fear, 0.0, 0.0)],
        )
        .unwrap();
        let err = neighborhood_filter(&ds, &one_center_wheel()).unwrap_err();
        assert!(err.to_string().contains("fear"));
    }

    #[test]
    fn pair_targets_follow_definition() {
        let p = PairSample::new(
            sample(EmotionCategory::Sad, 0.5, 0.1),
            sample(EmotionCategory::Sad, 0.2, 0.4),
        )
        .unwrap();
        assert!(p.similar);
        assert!((p.delta_v - 0.3).abs() < 1e-15);
        assert!((p.delta_a + 0.3).abs() < 1e-15);
        let q = PairSample::new(
            sample(EmotionCategory::Sad, 0.5, 0.1),
            sample(EmotionCategory::Happy, 0.2, 0.4),
        )
        .unwrap();
        assert!(!q.similar);
    }

    #[test]
    fn infeasible_fractions() {
        let ds = Dataset::new(
            DatasetKind::ImageSet,
            LabelScale::UNIT,
            vec![
                sample(EmotionCategory::Sad, 0.0, 0.0),
                sample(EmotionCategory::Happy, 0.0, 0.0),
            ],
        )
        .unwrap();
        assert!(matches!(generate_pairs(&ds, 10, 0.5, 1), Err(Error::Infeasible(_))));
        assert_eq!(generate_pairs(&ds, 10, 0.0, 1).unwrap().len(), 10);
        let same = Dataset::new(
            DatasetKind::ImageSet,
            LabelScale::UNIT,
            vec![
                sample(EmotionCategory::Sad, 0.0, 0.0),
                sample(EmotionCategory::Sad, 0.1, 0.0),
            ],
        )
        .unwrap();
        assert!(matches!(generate_pairs(&same, 10, 0.5, 1), Err(Error::Infeasible(_))));
        assert_eq!(generate_pairs(&same, 4, 1.0, 1).unwrap().len(), 4);
    }

    #[test]
    fn default_wheel_round_trips() {
        let w = WheelConfig::default();
        assert_eq!(w.radius(), DEFAULT_RADIUS);
        assert_eq!(w.centers().len(), 8);
        assert_eq!(WheelConfig::from_json(&w.to_json()).unwrap(), w);
    }
}
