use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mtclar_core::checkpoint;
use mtclar_core::datamodel::{
    load_manifest, make_folds, rescale_labels, Dataset, DatasetKind, EmotionCategory, FoldStrategy,
};
use mtclar_core::fsl::{label_corpus, Aggregation, AnchorConfig, AnchorKind, DifferentialModel, GroundTruthOracle};
use mtclar_core::metrics::{evaluate, FrameKey, LabelledFrame, MetricReport};
use mtclar_core::network::MtClar;
use mtclar_core::sampler::{category_counts, neighborhood_filter, WheelConfig};
use mtclar_core::train::{self, Seeds, Tasks, TrainConfig};
use mtclar_core::{augment::AugmentationSpec, datamodel::DimensionalLabel, Error};
use serde::{Deserialize, Serialize};

use crate::{
    AggregationChoice, AnchorArgs, AnchorChoice, EvalArgs, FinetuneArgs, FoldChoice, FslArgs, PrepareArgs, Profile,
    ServeArgs, TaskChoice, TrainArgs, TrainSlArgs, TrainingArgs,
};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const DATA: u8 = 2;
pub const CHECKPOINT: u8 = 3;
pub const RUNTIME: u8 = 4;

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint { .. } | Error::CheckpointVersion { .. } => CHECKPOINT,
            Error::NonFiniteLoss { .. } => RUNTIME,
            _ => DATA,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = Result<Vec<PathBuf>, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::new(RUNTIME, format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::new(RUNTIME, format!("writing {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn make_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(RUNTIME, format!("creating {}: {e}", dir.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable")
}

fn load_images(path: &Path) -> Result<Dataset, Failure> {
    Ok(load_manifest(path, DatasetKind::ImageSet)?)
}

/// Loads a video manifest with labels mapped onto [-1, 1].
fn load_videos(path: &Path) -> Result<Dataset, Failure> {
    let ds = load_manifest(path, DatasetKind::VideoSet)?;
    Ok(rescale_labels(&ds, ds.label_scale())?)
}

fn is_video_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn wheel(path: Option<&Path>) -> Result<WheelConfig, Failure> {
    match path {
        Some(p) => Ok(WheelConfig::load(p)?),
        None => Ok(WheelConfig::default()),
    }
}

fn filtered(manifest: &Path, wheel_path: Option<&Path>) -> Result<Dataset, Failure> {
    let ds = load_images(manifest)?;
    Ok(neighborhood_filter(&ds, &wheel(wheel_path)?)?)
}

fn load_checkpoint(path: &Path) -> Result<MtClar, Failure> {
    checkpoint::load(path).map_err(|e| Failure::new(CHECKPOINT, e.to_string()))
}

fn training_config(a: &TrainingArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.train_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::new(DATA, format!("reading {}: {e}", p.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => match a.profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        },
    };
    cfg.seeds = Seeds {
        data: a.seeds.seed_data,
        shake_shake: a.seeds.seed_shake,
        init: a.seeds.seed_init,
    };
    if let Some(n) = a.epochs {
        cfg = cfg.with_epochs(n)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn anchor_config(a: &AnchorArgs, seed: u64) -> Result<AnchorConfig, Failure> {
    let kind = match a.anchor_config {
        AnchorChoice::First => AnchorKind::FirstFrame,
        AnchorChoice::Random => AnchorKind::RandomFrame,
        AnchorChoice::Subject => AnchorKind::SubjectSpecificRandom,
        AnchorChoice::OtherSubject => AnchorKind::DifferentSubjectRandom,
        AnchorChoice::Recurring => AnchorKind::RecurringNth,
    };
    let aggregation = match a.aggregation {
        AggregationChoice::Preceding => Aggregation::NearestPreceding,
        AggregationChoice::Mean => Aggregation::MeanOverAll,
    };
    if kind == AnchorKind::RecurringNth && a.n.is_none() {
        return Err(Failure::new(DATA, "--anchor-config recurring requires --n"));
    }
    if kind != AnchorKind::RecurringNth && a.n.is_some() {
        return Err(Failure::new(DATA, "--n applies only to --anchor-config recurring"));
    }
    Ok(AnchorConfig::new(kind, a.n, aggregation, seed)?)
}

/// File name for a video id.
fn file_stem(video_id: &str) -> String {
    video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct PrepareStats {
    input: usize,
    retained: usize,
    input_per_class: BTreeMap<String, usize>,
    retained_per_class: BTreeMap<String, usize>,
}

fn named_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    let counts = category_counts(ds);
    EmotionCategory::ALL
        .iter()
        .map(|c| (c.name().to_string(), counts.get(c).copied().unwrap_or(0)))
        .collect()
}

pub fn prepare(a: &PrepareArgs) -> Outcome {
    let ds = load_images(&a.manifest)?;
    let kept = neighborhood_filter(&ds, &wheel(a.wheel_config.as_deref())?)?;
    make_dir(&a.out)?;
    let index = a.out.join("index.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| Failure::new(RUNTIME, e.to_string());
    w.write_record(["image_path", "category_code", "valence", "arousal", "subject_id"])
        .map_err(row_err)?;
    for s in kept.samples() {
        let path = s.image_path.as_ref().expect("loaded from disk");
        let path = fs::canonicalize(path).unwrap_or_else(|_| path.clone());
        let cat = s.category.map(|c| c.code().to_string()).unwrap_or_default();
        let (v, ar) = s
            .dims
            .map(|d| (d.valence.to_string(), d.arousal.to_string()))
            .unwrap_or_default();
        w.write_record([&path.to_string_lossy(), cat.as_str(), &v, &ar, &s.subject_id])
            .map_err(row_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::new(RUNTIME, e.to_string()))?;
    let stats = PrepareStats {
        input: ds.len(),
        retained: kept.len(),
        input_per_class: named_counts(&ds),
        retained_per_class: named_counts(&kept),
    };
    log::info!("retained {} of {} samples", kept.len(), ds.len());
    Ok(vec![write(&index, bytes)?, write(&a.out.join("stats.json"), to_json(&stats))?])
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    history: &'a [train::EpochRecord],
}

pub fn train(a: &TrainArgs) -> Outcome {
    let mut cfg = training_config(&a.training)?;
    cfg.tasks = match a.tasks {
        TaskChoice::Multi => Tasks::Multi,
        TaskChoice::Similarity => Tasks::SimilarityOnly,
        TaskChoice::Deltas => Tasks::DeltasOnly,
    };
    let ds = filtered(&a.manifest, a.wheel_config.as_deref())?;
    make_dir(&a.out)?;
    let mut out = vec![write(&a.out.join("config.json"), cfg.to_json())?];
    let outcome = train::train_mtclar(&cfg, &ds, Some(&a.out))?;
    out.extend(outcome.artifacts.iter().cloned());
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        history: &outcome.history,
    };
    out.push(write(&a.out.join("history.json"), to_json(&summary))?);
    log::info!("best epoch {}", outcome.best_epoch);
    Ok(out)
}

pub fn train_sl(a: &TrainSlArgs) -> Outcome {
    let base = training_config(&a.training)?;
    let mut cfg = base.clone().sl();
    if let Some(n) = a.training.epochs {
        cfg = cfg.with_epochs(n)?;
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = filtered(&a.manifest, a.wheel_config.as_deref())?;
    let (model, history) = train::train_sl(&cfg, model, &ds)?;
    make_dir(&a.out)?;
    let ckpt = a.out.join("sl.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let mut curve = String::from("epoch,lr,loss\n");
    for r in &history {
        curve.push_str(&format!("{},{},{}\n", r.epoch, r.lr, r.loss));
    }
    Ok(vec![ckpt, write(&a.out.join("sl_curve.csv"), curve)?])
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    folds: &'a [train::FoldResult],
    mean: &'a MetricReport,
}

pub fn finetune(a: &FinetuneArgs) -> Outcome {
    let cfg = training_config(&a.training)?;
    let anchors = anchor_config(&a.anchors, a.training.seeds.seed_data)?;
    let base = load_checkpoint(&a.checkpoint)?;
    let ds = load_videos(&a.manifest)?;
    let strategy = match a.folds {
        FoldChoice::Independent => FoldStrategy::SubjectIndependent,
        FoldChoice::Dependent => FoldStrategy::SubjectDependent,
    };
    let folds = make_folds(&ds, strategy, a.k, a.training.seeds.seed_data)?;
    let outcome = train::finetune(&base, &ds, &folds, &cfg, &anchors, Some(&a.out))?;
    let mut out = Vec::new();
    for f in 0..a.k {
        for name in [
            format!("fold{f}.ckpt"),
            format!("fold{f}.json"),
            format!("fold{f}/best.ckpt"),
            format!("fold{f}/loss_curve.csv"),
        ] {
            let p = a.out.join(name);
            if p.exists() {
                out.push(p);
            }
        }
    }
    out.push(a.out.join("mean.json"));
    let summary = FinetuneSummary {
        folds: &outcome.folds,
        mean: &outcome.mean,
    };
    out.push(write(&a.out.join("folds.json"), to_json(&summary))?);
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    video_id: String,
    index: u32,
    valence: f64,
    arousal: f64,
}

fn read_predictions(path: &Path) -> Result<Vec<LabelledFrame>, Failure> {
    let bad = |e: csv::Error| Failure::new(DATA, format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(bad)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: PredictionRow = row.map_err(bad)?;
        let label = DimensionalLabel::new(row.valence, row.arousal)
            .map_err(|e| Failure::new(DATA, format!("{}: frame {} of {:?}: {e}", path.display(), row.index, row.video_id)))?;
        out.push((FrameKey::new(row.video_id, row.index), label));
    }
    Ok(out)
}

/// Labelled frames of a manifest, keyed like prediction rows.
fn ground_truth(ds: &Dataset) -> Vec<LabelledFrame> {
    ds.samples()
        .iter()
        .enumerate()
        .filter_map(|(row, s)| {
            let key = match &s.frame {
                Some((v, i)) => FrameKey::new(v.clone(), *i),
                None => FrameKey::new("", row as u32),
            };
            s.dims.map(|d| (key, d))
        })
        .collect()
}

#[derive(Serialize)]
struct SlEval<'a> {
    accuracy: f64,
    metrics: &'a Option<MetricReport>,
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let ds = if is_video_manifest(&a.manifest) {
        load_videos(&a.manifest)?
    } else {
        load_images(&a.manifest)?
    };
    make_dir(&a.out)?;
    if let Some(pred_path) = &a.predictions {
        let truth = ground_truth(&ds);
        let pred = read_predictions(pred_path)?;
        let baseline = a.baseline.as_deref().map(read_predictions).transpose()?;
        let report = evaluate(&truth, &pred, baseline.as_deref())?;
        log::info!("rmse valence {} arousal {}", report.valence.rmse, report.arousal.rmse);
        return Ok(vec![write(&a.out.join("report.json"), report.to_json())?]);
    }
    let Some(ckpt) = &a.checkpoint else {
        return Err(Failure::new(DATA, "eval needs --predictions or --checkpoint"));
    };
    if ds.kind() != DatasetKind::ImageSet {
        return Err(Failure::new(DATA, "--checkpoint evaluation needs an image manifest; use fsl-label for videos"));
    }
    let model = load_checkpoint(ckpt)?;
    if !model.has_sl_heads() {
        return Err(Failure::new(CHECKPOINT, format!("{} has no singleton heads", ckpt.display())));
    }
    let aug = AugmentationSpec::for_side(model.spec().encoder.input_side);
    let report = train::evaluate_sl_dataset(&model, &ds, &aug)?;
    log::info!("category accuracy {}", report.accuracy);
    let mut out = vec![write(
        &a.out.join("sl_report.json"),
        to_json(&SlEval {
            accuracy: report.accuracy,
            metrics: &report.metrics,
        }),
    )?];
    if let Some(m) = &report.metrics {
        out.push(write(&a.out.join("report.json"), m.to_json())?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct CorpusSummary<'a> {
    config: &'a AnchorConfig,
    support_size: usize,
    total_frames: usize,
    support_fraction: f64,
    metrics: &'a Option<MetricReport>,
}

fn differential_model(oracle: bool, checkpoint: Option<&Path>) -> Result<Option<Arc<dyn DifferentialModel>>, Failure> {
    Ok(match (oracle, checkpoint) {
        (true, _) => Some(Arc::new(GroundTruthOracle)),
        (false, Some(p)) => Some(Arc::new(load_checkpoint(p)?)),
        (false, None) => None,
    })
}

pub fn fsl_label(a: &FslArgs) -> Outcome {
    let cfg = anchor_config(&a.anchors, a.seed_data)?;
    let model = differential_model(a.oracle, a.checkpoint.as_deref())?.expect("clap requires one");
    let ds = load_videos(&a.manifest)?;
    let labelled = label_corpus(model.as_ref(), &ds, &cfg)?;
    let mut out = Vec::with_capacity(labelled.videos.len() + 1);
    for v in &labelled.videos {
        out.push(write(&a.out.join("videos").join(format!("{}.json", file_stem(&v.video_id))), v.to_json())?);
    }
    let summary = CorpusSummary {
        config: &cfg,
        support_size: labelled.support_size,
        total_frames: labelled.total_frames,
        support_fraction: labelled.support_fraction,
        metrics: &labelled.metrics,
    };
    out.push(write(&a.out.join("corpus.json"), to_json(&summary))?);
    log::info!(
        "support {} of {} frames ({:.2}%)",
        labelled.support_size,
        labelled.total_frames,
        100.0 * labelled.support_fraction
    );
    Ok(out)
}

pub fn serve(a: &ServeArgs) -> Outcome {
    let model = differential_model(a.oracle, a.checkpoint.as_deref())?;
    let ds = load_videos(&a.manifest)?;
    if model.is_none() {
        log::warn!("no model loaded; propagation will answer 503");
    }
    let state = mtclar_service::AppState::new(ds, model, a.journal.clone())
        .map_err(|e| Failure::new(DATA, format!("replaying journals: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(RUNTIME, e.to_string()))?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::new(RUNTIME, format!("binding {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::new(RUNTIME, e.to_string()))?;
        println!("listening on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        mtclar_service::serve(listener, Arc::new(state), shutdown)
            .await
            .map_err(|e| Failure::new(RUNTIME, e.to_string()))
    })?;
    Ok(Vec::new())
}
