use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mtclar_core::datamodel::{load_manifest, Dataset, DatasetKind, FaceSample};
use mtclar_core::fsl::{DifferentialModel, GroundTruthOracle};
use mtclar_core::synth::{video_corpus, write_video_manifest, VideoCorpusConfig};
use mtclar_service::{router, AppState, ErrorBody, Export, FrameResponse, PropagationView, SessionView, VideoSummary};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn corpus(videos: usize) -> Dataset {
    video_corpus(&VideoCorpusConfig {
        videos,
        min_len: 12,
        max_len: 15,
        subjects: 2,
        side: 4,
        seed: 5,
    })
    .unwrap()
}

fn app_with(ds: Dataset, model: Option<Arc<dyn DifferentialModel>>) -> Router {
    router(Arc::new(AppState::new(ds, model, None).unwrap()))
}

fn oracle_app(videos: usize) -> Router {
    app_with(corpus(videos), Some(Arc::new(GroundTruthOracle)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, T) {
    let (s, bytes) = call(app, method, uri, body).await;
    let parsed = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (s, parsed)
}

async fn expect_error(app: &Router, method: &str, uri: &str, body: Option<Value>, status: StatusCode, code: &str) {
    let (s, e): (_, ErrorBody) = call_json(app, method, uri, body).await;
    assert_eq!(s, status, "{method} {uri}: {e:?}");
    assert_eq!(e.error, code);
    assert!(!e.message.is_empty());
}

async fn put_anchor(app: &Router, video: &str, index: u32, v: f64, a: f64) -> SessionView {
    let uri = format!("/videos/{video}/anchors/{index}");
    let (s, view) = call_json(app, "PUT", &uri, Some(json!({"valence": v, "arousal": a}))).await;
    assert_eq!(s, StatusCode::OK);
    view
}

async fn revision(app: &Router, video: &str) -> u64 {
    let (_, list): (_, Vec<VideoSummary>) = call_json(app, "GET", "/videos", None).await;
    list.into_iter().find(|v| v.video_id == video).unwrap().revision
}

fn frames_of<'a>(ds: &'a Dataset, video: &str) -> Vec<&'a FaceSample> {
    ds.video_frames(video).unwrap()
}

#[tokio::test]
async fn listing_covers_every_video() {
    let ds = corpus(3);
    let app = app_with(ds.clone(), None);
    let (s, list): (_, Vec<VideoSummary>) = call_json(&app, "GET", "/videos", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.len(), 3);
    for (item, v) in list.iter().zip(ds.videos()) {
        assert_eq!(item.video_id, v.video_id);
        assert_eq!(item.subject_id, v.subject_id);
        assert_eq!(item.frame_count, v.sample_indices.len());
        assert_eq!(item.revision, 0);
    }
}

#[tokio::test]
async fn frame_bytes_match_the_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_video_manifest(&corpus(2), dir.path()).unwrap();
    let ds = load_manifest(&manifest, DatasetKind::VideoSet).unwrap();
    let app = app_with(ds.clone(), None);
    let sample = &ds.samples()[3];
    let (video, index) = sample.frame.clone().unwrap();
    let (s, frame): (_, FrameResponse) = call_json(&app, "GET", &format!("/videos/{video}/frames/{index}"), None).await;
    assert_eq!(s, StatusCode::OK);
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD.decode(frame.image_base64).unwrap();
    assert_eq!(bytes, std::fs::read(sample.image_path.as_ref().unwrap()).unwrap());
    assert_eq!(frame.media_type, "image/png");
    let gt = frame.ground_truth.unwrap();
    assert!(gt.hidden);
    assert_eq!((gt.valence, gt.arousal), (sample.dims.unwrap().valence, sample.dims.unwrap().arousal));
}

#[tokio::test]
async fn in_memory_frames_are_encoded_as_png() {
    let app = oracle_app(1);
    let (s, frame): (_, FrameResponse) = call_json(&app, "GET", "/videos/vid0000/frames/0", None).await;
    assert_eq!(s, StatusCode::OK);
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD.decode(frame.image_base64).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[tokio::test]
async fn unknown_videos_and_frames_are_404() {
    let app = oracle_app(1);
    let nf = StatusCode::NOT_FOUND;
    expect_error(&app, "GET", "/videos/vid0000/frames/999", None, nf, "unknown_frame").await;
    expect_error(&app, "GET", "/videos/vid0000/frames/-1", None, nf, "unknown_frame").await;
    expect_error(&app, "GET", "/videos/nope/frames/0", None, nf, "unknown_video").await;
    let body = Some(json!({"valence": 0.1, "arousal": 0.1}));
    expect_error(&app, "PUT", "/videos/vid0000/anchors/999", body.clone(), nf, "unknown_frame").await;
    expect_error(&app, "PUT", "/videos/nope/anchors/0", body, nf, "unknown_video").await;
    expect_error(&app, "POST", "/videos/nope/propagate", Some(json!({})), nf, "unknown_video").await;
    expect_error(&app, "GET", "/videos/nope/export", None, nf, "unknown_video").await;
    expect_error(&app, "GET", "/elsewhere", None, nf, "not_found").await;
}

#[tokio::test]
async fn anchors_upsert_and_bump_the_revision() {
    let app = oracle_app(1);
    let v = put_anchor(&app, "vid0000", 4, 0.25, -0.5).await;
    assert_eq!(v.revision, 1);
    let v = put_anchor(&app, "vid0000", 4, -0.75, 0.5).await;
    assert_eq!(v.revision, 2);
    assert_eq!(v.anchors.len(), 1);
    assert_eq!((v.anchors[0].index, v.anchors[0].valence, v.anchors[0].arousal), (4, -0.75, 0.5));

    let unproc = StatusCode::UNPROCESSABLE_ENTITY;
    let uri = "/videos/vid0000/anchors/4";
    expect_error(&app, "PUT", uri, Some(json!({"valence": 1.5, "arousal": 0.0})), unproc, "label_out_of_range").await;
    expect_error(&app, "PUT", uri, Some(json!({"valence": 0.0, "arousal": -1.01})), unproc, "label_out_of_range").await;
    expect_error(&app, "PUT", uri, Some(json!({"valence": "high"})), unproc, "invalid_body").await;
    let (s, bytes) = call(&app, "PUT", uri, None).await;
    assert!(s.is_client_error());
    assert_eq!(serde_json::from_slice::<ErrorBody>(&bytes).unwrap().error, "invalid_body");
    assert_eq!(revision(&app, "vid0000").await, 2, "rejected writes must not bump the revision");
    // Range ends are allowed.
    assert_eq!(put_anchor(&app, "vid0000", 5, 1.0, -1.0).await.revision, 3);
}

#[tokio::test]
async fn propagation_needs_a_model_and_an_anchor() {
    let app = app_with(corpus(1), None);
    put_anchor(&app, "vid0000", 0, 0.0, 0.0).await;
    let body = Some(json!({"aggregation": "preceding"}));
    expect_error(&app, "POST", "/videos/vid0000/propagate", body.clone(), StatusCode::SERVICE_UNAVAILABLE, "model_unavailable").await;

    let app = oracle_app(1);
    expect_error(&app, "POST", "/videos/vid0000/propagate", body, StatusCode::CONFLICT, "no_anchors").await;
    let bad = Some(json!({"aggregation": "median"}));
    expect_error(&app, "POST", "/videos/vid0000/propagate", bad, StatusCode::UNPROCESSABLE_ENTITY, "invalid_body").await;
}

#[tokio::test]
async fn single_anchor_labels_every_frame() {
    let ds = corpus(1);
    let app = app_with(ds.clone(), Some(Arc::new(GroundTruthOracle)));
    put_anchor(&app, "vid0000", 0, 0.3, -0.2).await;
    let (s, p): (_, PropagationView) = call_json(&app, "POST", "/videos/vid0000/propagate", Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p.frames.len(), frames_of(&ds, "vid0000").len());
    assert_eq!(p.revision, 1);
    let first = &p.frames[0];
    assert!(first.is_anchor);
    assert_eq!((first.valence, first.arousal), (0.3, -0.2));
    assert_eq!(p.frames.iter().filter(|f| f.is_anchor).count(), 1);
    for f in &p.frames {
        assert!((-1.0..=1.0).contains(&f.valence) && (-1.0..=1.0).contains(&f.arousal));
    }
}

/// Predicts a fixed differential for every pair.
struct Constant(f64, f64);

impl DifferentialModel for Constant {
    fn differential(&self, _: &FaceSample, _: &FaceSample) -> mtclar_core::Result<(f64, f64)> {
        Ok((self.0, self.1))
    }
}

#[tokio::test]
async fn queries_use_the_nearest_preceding_human_anchor() {
    let app = app_with(corpus(1), Some(Arc::new(Constant(0.0, 0.0))));
    put_anchor(&app, "vid0000", 0, 0.5, 0.5).await;
    put_anchor(&app, "vid0000", 10, -0.5, -0.5).await;
    let (_, p): (_, PropagationView) =
        call_json(&app, "POST", "/videos/vid0000/propagate", Some(json!({"aggregation": "preceding"}))).await;
    let f7 = p.frames.iter().find(|f| f.index == 7).unwrap();
    assert_eq!((f7.valence, f7.arousal, f7.is_anchor), (0.5, 0.5, false));
    let f11 = p.frames.iter().find(|f| f.index == 11).unwrap();
    assert_eq!((f11.valence, f11.arousal), (-0.5, -0.5));

    let (_, p): (_, PropagationView) =
        call_json(&app, "POST", "/videos/vid0000/propagate", Some(json!({"aggregation": "mean"}))).await;
    let f7 = p.frames.iter().find(|f| f.index == 7).unwrap();
    assert_eq!((f7.valence, f7.arousal), (0.0, 0.0));
}

#[tokio::test]
async fn propagated_labels_stay_in_range() {
    let app = app_with(corpus(1), Some(Arc::new(Constant(-5.0, 5.0))));
    put_anchor(&app, "vid0000", 2, 0.9, -0.9).await;
    let (_, p): (_, PropagationView) = call_json(&app, "POST", "/videos/vid0000/propagate", Some(json!({}))).await;
    for f in p.frames.iter().filter(|f| !f.is_anchor) {
        assert_eq!((f.valence, f.arousal), (1.0, -1.0));
    }
}

#[tokio::test]
async fn oracle_model_with_true_anchors_reproduces_ground_truth() {
    let ds = corpus(2);
    let app = app_with(ds.clone(), Some(Arc::new(GroundTruthOracle)));
    for video in ["vid0000", "vid0001"] {
        let frames = frames_of(&ds, video);
        for f in frames.iter().step_by(5) {
            let d = f.dims.unwrap();
            put_anchor(&app, video, f.frame_index().unwrap(), d.valence, d.arousal).await;
        }
        for agg in ["preceding", "mean"] {
            let uri = format!("/videos/{video}/propagate");
            let (s, p): (_, PropagationView) = call_json(&app, "POST", &uri, Some(json!({"aggregation": agg}))).await;
            assert_eq!(s, StatusCode::OK);
            for (f, l) in frames.iter().zip(&p.frames) {
                let d = f.dims.unwrap();
                assert_eq!((l.valence, l.arousal), (d.valence, d.arousal), "{video} frame {} ({agg})", l.index);
            }
        }
    }
}

#[tokio::test]
async fn export_lifecycle_and_staleness() {
    let app = oracle_app(1);
    let uri = "/videos/vid0000/export";
    expect_error(&app, "GET", uri, None, StatusCode::CONFLICT, "no_propagation").await;
    put_anchor(&app, "vid0000", 0, 0.1, 0.2).await;
    put_anchor(&app, "vid0000", 6, 0.3, 0.4).await;
    call(&app, "POST", "/videos/vid0000/propagate", Some(json!({}))).await;

    let (s, first) = call(&app, "GET", uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = call(&app, "GET", uri, None).await;
    assert_eq!(first, second, "export must be byte-stable");
    let doc: Export = serde_json::from_slice(&first).unwrap();
    assert_eq!(doc.revision, 2);
    assert_eq!(doc.support_size, 2);
    let anchors: Vec<u32> = doc.frames.iter().filter(|f| f.is_anchor).map(|f| f.index).collect();
    assert_eq!(anchors, [0, 6]);
    let raw: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(raw["frames"][0]["is_anchor"], json!(true));

    let v = put_anchor(&app, "vid0000", 6, -0.3, 0.4).await;
    assert!(v.propagation.unwrap().stale);
    expect_error(&app, "GET", uri, None, StatusCode::CONFLICT, "stale").await;
    call(&app, "POST", "/videos/vid0000/propagate", Some(json!({}))).await;
    let (s, bytes) = call(&app, "GET", uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let doc: Export = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(doc.revision, 3);
    assert_eq!(doc.frames[6].valence, -0.3);
}

#[tokio::test]
async fn reads_never_change_the_revision() {
    let app = oracle_app(2);
    put_anchor(&app, "vid0000", 1, 0.0, 0.0).await;
    call(&app, "POST", "/videos/vid0000/propagate", Some(json!({}))).await;
    let before = revision(&app, "vid0000").await;
    for _ in 0..3 {
        call(&app, "GET", "/videos", None).await;
        call(&app, "GET", "/videos/vid0000/frames/1", None).await;
        call(&app, "GET", "/videos/vid0000/export", None).await;
        call(&app, "GET", "/videos/vid0001/export", None).await;
    }
    assert_eq!(revision(&app, "vid0000").await, before);
    assert_eq!(revision(&app, "vid0001").await, 0);
}

#[tokio::test]
async fn journal_replay_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(2);
    let model: Arc<dyn DifferentialModel> = Arc::new(GroundTruthOracle);
    let app = router(Arc::new(AppState::new(ds.clone(), Some(model.clone()), Some(dir.path().into())).unwrap()));
    put_anchor(&app, "vid0000", 0, 0.5, 0.5).await;
    put_anchor(&app, "vid0000", 0, 0.25, 0.5).await;
    put_anchor(&app, "vid0001", 3, -0.5, 0.0).await;
    call(&app, "POST", "/videos/vid0000/propagate", Some(json!({"aggregation": "mean"}))).await;
    let (_, export) = call(&app, "GET", "/videos/vid0000/export", None).await;
    drop(app);

    let app = router(Arc::new(AppState::new(ds, Some(model), Some(dir.path().into())).unwrap()));
    assert_eq!(revision(&app, "vid0000").await, 2);
    assert_eq!(revision(&app, "vid0001").await, 1);
    let (s, replayed) = call(&app, "GET", "/videos/vid0000/export", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(replayed, export);
    expect_error(&app, "GET", "/videos/vid0001/export", None, StatusCode::CONFLICT, "no_propagation").await;
}

#[tokio::test]
async fn journal_with_an_anchor_on_a_missing_frame_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(1);
    let app = router(Arc::new(AppState::new(ds.clone(), None, Some(dir.path().into())).unwrap()));
    put_anchor(&app, "vid0000", 0, 0.5, 0.5).await;
    let file = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let text = std::fs::read_to_string(&file).unwrap().replace("\"index\":0", "\"index\":9999");
    std::fs::write(&file, text).unwrap();
    assert!(AppState::new(ds, None, Some(dir.path().into())).is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_writers_and_propagations() {
    let ds = corpus(2);
    let app = app_with(ds.clone(), Some(Arc::new(GroundTruthOracle)));
    let mut tasks = Vec::new();
    for i in 0..24u32 {
        let app = app.clone();
        let video = if i % 2 == 0 { "vid0000" } else { "vid0001" };
        tasks.push(tokio::spawn(async move {
            let v = f64::from(i) / 32.0;
            put_anchor(&app, video, i % 5, v, -v).await;
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    assert_eq!(revision(&app, "vid0000").await, 12);
    assert_eq!(revision(&app, "vid0001").await, 12);

    let run = |video: &'static str| {
        let app = app.clone();
        tokio::spawn(async move {
            let uri = format!("/videos/{video}/propagate");
            call_json::<PropagationView>(&app, "POST", &uri, Some(json!({"aggregation": "mean"}))).await
        })
    };
    let (a, b) = (run("vid0000"), run("vid0001"));
    let ((sa, pa), (sb, pb)) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    assert_eq!(pa.revision, 12);
    assert_eq!(pb.revision, 12);
    // Same request again, sequentially, gives the same labels.
    let (_, again): (_, PropagationView) =
        call_json(&app, "POST", "/videos/vid0000/propagate", Some(json!({"aggregation": "mean"}))).await;
    assert_eq!(again.frames, pa.frames);
    assert_eq!(pa.frames.len(), frames_of(&ds, "vid0000").len());
}
