//! One pass/fail line per acceptance criterion. Runs sequentially in a single
//! process so the timed criteria do not compete for the CPU.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mtclar_core::checkpoint;
use mtclar_core::datamodel::{
    make_folds, Dataset, DatasetKind, DimensionalLabel, EmotionCategory, FaceSample, FoldStrategy, Image, LabelScale,
};
use mtclar_core::fsl::{label_corpus, label_video, Aggregation, AnchorConfig, AnchorKind, GroundTruthOracle};
use mtclar_core::losses::{dynamic_weights, DynamicWeightSchedule};
use mtclar_core::metrics::{ccc, ks_two_sample, pcc, rmse, sagr};
use mtclar_core::sampler::{generate_pair_indices, neighborhood_filter, PairSample, WheelConfig};
use mtclar_core::synth::{pattern_dataset, video_corpus, PatternConfig, VideoCorpusConfig};
use mtclar_core::train::{pair_accuracy, train_mtclar, Tasks, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    gradient_relative_error, ks_p_oracle, naive_ccc, naive_ks_statistic, naive_pcc, naive_rmse, naive_sagr,
    tiny_config, LossKind, TinySiamese,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("took {t:.2?}, budget {budget:?}"))?;
    Ok(t)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(2..=1000);
        let scale = rng.random_range(0.1..3.0);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yhat: Vec<f64> = y.iter().map(|v| scale * v * 0.5 + rng.random_range(-0.8..0.8)).collect();
        let pairs = [
            ("rmse", rmse(&y, &yhat), naive_rmse(&y, &yhat)),
            ("pcc", pcc(&y, &yhat), naive_pcc(&y, &yhat)),
            ("ccc", ccc(&y, &yhat), naive_ccc(&y, &yhat)),
            ("sagr", sagr(&y, &yhat), naive_sagr(&y, &yhat)),
        ];
        for (name, got, want) in pairs {
            let got = got.map_err(|e| format!("case {case}: {name}: {e}"))?;
            let d = (got - want).abs();
            ensure(d < 1e-12, || format!("case {case}: {name} {got} vs oracle {want}"))?;
            worst = worst.max(d);
        }
        let m = rng.random_range(2..=1000);
        let shift = rng.random_range(0.0..0.3);
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        let ks = ks_two_sample(&y, &b).map_err(|e| format!("case {case}: ks: {e}"))?;
        let d = naive_ks_statistic(&y, &b);
        ensure(ks.statistic == d, || format!("case {case}: ks statistic {} vs {d}", ks.statistic))?;
        let p = ks_p_oracle(&y, &b);
        ensure((ks.p_value - p).abs() < 1e-6, || format!("case {case}: ks p {} vs {p}", ks.p_value))?;
        worst_p = worst_p.max((ks.p_value - p).abs());
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("max metric diff {worst:.1e}, max ks p diff {worst_p:.1e}, {t:.2?}"))
}

fn ccc_worked_example() -> Outcome {
    let (y, yhat) = ([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]);
    let hand = naive_ccc(&y, &yhat);
    ensure((hand - 4.0 / 7.0).abs() < 1e-12, || format!("hand oracle gives {hand}"))?;
    let got = ccc(&y, &yhat).map_err(|e| e.to_string())?;
    ensure((got - 4.0 / 7.0).abs() < 1e-12, || format!("implementation gives {got}"))?;
    Ok(format!("ccc = {got}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let net = TinySiamese::new(11);
    let params = net.store.scalar_count();
    ensure(params <= 1000, || format!("{params} parameters"))?;
    let batch = TinySiamese::batch(5, 6);
    let lambdas = [0.31, 0.77, 0.52, 0.18];
    let mut parts = Vec::new();
    for kind in [LossKind::Contrastive, LossKind::Delta, LossKind::SlRegression, LossKind::Cumulative] {
        let err = gradient_relative_error(&net, &batch, kind, lambdas);
        ensure(err < 1e-4, || format!("{kind:?}: relative error {err:e}"))?;
        parts.push(format!("{kind:?} {err:.1e}"));
    }
    let t = within(start, Duration::from_secs(30))?;
    Ok(format!("{params} params; {}; {t:.2?}", parts.join(", ")))
}

fn weight_schedule() -> Outcome {
    let n = 40;
    for k in DynamicWeightSchedule::K_GRID {
        for alpha in DynamicWeightSchedule::ALPHA_GRID {
            let s = DynamicWeightSchedule::new(alpha, k, n).map_err(|e| e.to_string())?;
            let (f0, g0) = dynamic_weights(0, &s).map_err(|e| e.to_string())?;
            let (fn_, gn) = dynamic_weights(n, &s).map_err(|e| e.to_string())?;
            ensure(f0 == 0.0 && g0 == 1.0, || format!("k={k} alpha={alpha}: f(0)={f0}, g(0)={g0}"))?;
            ensure(fn_ == alpha && gn == 0.0, || format!("k={k} alpha={alpha}: f(n)={fn_}, g(n)={gn}"))?;
        }
    }
    let s = DynamicWeightSchedule::new(1.0, 1, n).map_err(|e| e.to_string())?;
    for i in 0..=n {
        let (f, g) = dynamic_weights(i, &s).map_err(|e| e.to_string())?;
        ensure(f + g == 1.0, || format!("k=1 alpha=1: f+g = {} at epoch {i}", f + g))?;
    }
    Ok("9 grid points, f+g=1 over 41 epochs".into())
}

fn fsl_oracle() -> Outcome {
    let start = Instant::now();
    let corpus = video_corpus(&VideoCorpusConfig::default()).map_err(|e| e.to_string())?;
    ensure(corpus.videos().len() == 20, || "corpus size".into())?;
    let mut checked = 0usize;
    for kind in AnchorKind::ALL {
        for agg in [Aggregation::NearestPreceding, Aggregation::MeanOverAll] {
            let n = (kind == AnchorKind::RecurringNth).then_some(10);
            let cfg = AnchorConfig::new(kind, n, agg, 3).map_err(|e| e.to_string())?;
            for v in corpus.videos() {
                let lab = label_video(&GroundTruthOracle, &corpus, &v.video_id, &cfg).map_err(|e| e.to_string())?;
                let frames = corpus.video_frames(&v.video_id).expect("listed video");
                for (f, l) in frames.iter().zip(&lab.frames) {
                    if l.is_anchor {
                        continue;
                    }
                    let truth = f.dims.expect("labelled corpus");
                    ensure(l.valence == truth.valence && l.arousal == truth.arousal, || {
                        format!(
                            "{kind:?}/{agg}: {} frame {} got ({}, {}) want ({}, {})",
                            v.video_id, l.index, l.valence, l.arousal, truth.valence, truth.arousal
                        )
                    })?;
                    checked += 1;
                }
            }
        }
    }
    let t = within(start, Duration::from_secs(10))?;
    Ok(format!("{checked} non-anchor frames exact across 10 configurations, {t:.2?}"))
}

fn support_size() -> Outcome {
    let start = Instant::now();
    let corpus = video_corpus(&VideoCorpusConfig {
        videos: 600,
        min_len: 30,
        max_len: 70,
        subjects: 240,
        side: 4,
        seed: 21,
    })
    .map_err(|e| e.to_string())?;
    let cfg = AnchorConfig::recurring(20, Aggregation::NearestPreceding).map_err(|e| e.to_string())?;
    let out = label_corpus(&GroundTruthOracle, &corpus, &cfg).map_err(|e| e.to_string())?;
    let pct = 100.0 * out.support_fraction;
    ensure((pct - 5.96).abs() <= 0.5, || {
        format!("|S|/F = {}/{} = {pct:.3}%", out.support_size, out.total_frames)
    })?;
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("|S|/F = {}/{} = {pct:.2}%, {t:.2?}", out.support_size, out.total_frames))
}

fn sampler_correctness() -> Outcome {
    let wheel = WheelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Arc::new(Image::filled(2, 2, 0.0));
    let samples: Vec<FaceSample> = (0..10_000)
        .map(|i| {
            let cat = EmotionCategory::ALL[rng.random_range(0..8)];
            // Half near the category center so both sides of the radius are well populated.
            let (cv, ca) = if i % 2 == 0 { wheel.center(cat).unwrap() } else { (0.0, 0.0) };
            let spread = if i % 2 == 0 { 0.3 } else { 1.0 };
            let mut draw = |c: f64| (c + rng.random_range(-spread..=spread)).clamp(-1.0, 1.0);
            let dims = DimensionalLabel::new(draw(cv), draw(ca)).unwrap();
            FaceSample::still(img.clone(), Some(cat), Some(dims), format!("s{i}"))
        })
        .collect();
    let ds = Dataset::new(DatasetKind::ImageSet, LabelScale::UNIT, samples).map_err(|e| e.to_string())?;
    let filtered = neighborhood_filter(&ds, &wheel).map_err(|e| e.to_string())?;
    let mut brute = Vec::new();
    for s in ds.samples() {
        let (cv, ca) = wheel.center(s.category.unwrap()).unwrap();
        let d = s.dims.unwrap();
        let dist = ((d.valence - cv).powi(2) + (d.arousal - ca).powi(2)).sqrt();
        if dist <= wheel.radius() {
            brute.push(s.subject_id.clone());
        }
    }
    let kept: Vec<String> = filtered.samples().iter().map(|s| s.subject_id.clone()).collect();
    ensure(kept == brute, || format!("filter kept {}, brute force {}", kept.len(), brute.len()))?;

    let pairs = generate_pair_indices(&filtered, 10_000, 0.5, 9).map_err(|e| e.to_string())?;
    let fs = filtered.samples();
    for p in &pairs {
        ensure(p.similar == (fs[p.a].category == fs[p.b].category), || format!("pair {p:?} mislabelled"))?;
        let ab = PairSample::new(fs[p.a].clone(), fs[p.b].clone()).map_err(|e| e.to_string())?;
        let ba = PairSample::new(fs[p.b].clone(), fs[p.a].clone()).map_err(|e| e.to_string())?;
        let sw = ab.swapped();
        ensure(ab.similar == p.similar && ba.similar == ab.similar, || format!("pair {p:?} similarity"))?;
        ensure(sw.delta_v == -ab.delta_v && sw.delta_a == -ab.delta_a, || format!("pair {p:?} swap"))?;
        ensure(ba.delta_v == -ab.delta_v && ba.delta_a == -ab.delta_a, || format!("pair {p:?} reversed"))?;
    }
    Ok(format!("{} of 10000 retained, 10000 pairs consistent", kept.len()))
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let wheel = WheelConfig::default();
    let train = pattern_dataset(&PatternConfig::default(), &wheel).map_err(|e| e.to_string())?;
    ensure(train.len() == 800, || format!("{} training images", train.len()))?;
    let train = neighborhood_filter(&train, &wheel).map_err(|e| e.to_string())?;
    let test = pattern_dataset(
        &PatternConfig {
            per_class: 25,
            seed: 99,
            ..Default::default()
        },
        &wheel,
    )
    .map_err(|e| e.to_string())?;
    let probe = generate_pair_indices(&test, 1000, 0.5, 7).map_err(|e| e.to_string())?;
    let mut acc = BTreeMap::new();
    for tasks in [Tasks::Multi, Tasks::SimilarityOnly] {
        let mut cfg = TrainConfig::desk();
        ensure(cfg.epochs <= 10, || format!("desk profile runs {} epochs", cfg.epochs))?;
        cfg.tasks = tasks;
        let out = train_mtclar(&cfg, &train, None).map_err(|e| e.to_string())?;
        let a = pair_accuracy(&out.model, &test, &probe, &cfg.augmentation).map_err(|e| e.to_string())?;
        acc.insert(format!("{tasks:?}"), a);
    }
    let (multi, single) = (acc["Multi"], acc["SimilarityOnly"]);
    ensure(multi >= 0.80, || format!("multi-task accuracy {multi:.3} below 0.80"))?;
    ensure(multi >= single - 0.02, || {
        format!("multi-task {multi:.3} trails similarity-only {single:.3} by more than 0.02")
    })?;
    let t = within(start, Duration::from_secs(300))?;
    Ok(format!("multi {multi:.3}, similarity-only {single:.3}, {t:.1?}"))
}

fn determinism() -> Outcome {
    let wheel = WheelConfig::default();
    let pc = PatternConfig {
        per_class: 8,
        side: 9,
        seed: 12,
        ..Default::default()
    };
    let ds = neighborhood_filter(&pattern_dataset(&pc, &wheel).map_err(|e| e.to_string())?, &wheel)
        .map_err(|e| e.to_string())?;
    let cfg = tiny_config(3);
    let a = train_mtclar(&cfg, &ds, None).map_err(|e| e.to_string())?;
    let b = train_mtclar(&cfg, &ds, None).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.iteration_losses) == bits(&b.iteration_losses), || "loss sequences differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&a.model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let images: Vec<Image> = ds
        .samples()
        .iter()
        .take(16)
        .map(|s| mtclar_core::augment::eval_transform(&s.image, &cfg.augmentation))
        .collect();
    let pairs: Vec<(&Image, &Image)> = images.iter().zip(images.iter().rev()).collect();
    let before = a.model.siamese_forward_batch(&pairs).map_err(|e| e.to_string())?;
    let after = loaded.siamese_forward_batch(&pairs).map_err(|e| e.to_string())?;
    let flat = |p: &[mtclar_core::network::PairPrediction]| {
        p.iter()
            .flat_map(|p| [p.similarity_logits[0], p.similarity_logits[1], p.delta_v, p.delta_a])
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    ensure(flat(&before) == flat(&after), || "predictions differ after reload".into())?;
    Ok(format!(
        "{} identical iteration losses, {} identical probe predictions",
        a.iteration_losses.len(),
        pairs.len()
    ))
}

fn fold_integrity() -> Outcome {
    let corpus = video_corpus(&VideoCorpusConfig {
        videos: 400,
        min_len: 3,
        max_len: 6,
        subjects: 200,
        side: 2,
        seed: 8,
    })
    .map_err(|e| e.to_string())?;
    let subjects = corpus.distinct_subjects().len();
    ensure(subjects == 200, || format!("{subjects} subjects"))?;
    let folds = make_folds(&corpus, FoldStrategy::SubjectIndependent, 5, 0).map_err(|e| e.to_string())?;
    ensure(folds.fold_of.len() == corpus.len(), || "fold assignment length".into())?;
    let mut per_fold: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); 5];
    for (s, &f) in corpus.samples().iter().zip(&folds.fold_of) {
        ensure(f < 5, || format!("fold index {f}"))?;
        per_fold[f].insert(&s.subject_id);
    }
    let mut leaks = 0;
    for i in 0..5 {
        for j in i + 1..5 {
            leaks += per_fold[i].intersection(&per_fold[j]).count();
        }
    }
    ensure(leaks == 0, || format!("{leaks} subjects shared between folds"))?;
    ensure(per_fold.iter().all(|f| !f.is_empty()), || "empty fold".into())?;
    let sizes: Vec<usize> = per_fold.iter().map(|f| f.len()).collect();
    Ok(format!("subjects per fold {sizes:?}, zero leakage"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle suite", metric_oracles),
        ("ccc worked example", ccc_worked_example),
        ("loss gradient checks", gradient_checks),
        ("dynamic-weight schedule", weight_schedule),
        ("fsl oracle exactness", fsl_oracle),
        ("support-size accounting", support_size),
        ("sampler correctness", sampler_correctness),
        ("desk-scale learning trend", desk_trend),
        ("determinism and persistence", determinism),
        ("fold integrity", fold_integrity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
