//! Keyframe annotation over HTTP. A person labels a few frames of a video,
//! the service propagates those anchors over the remaining frames with a
//! differential model and exports the resulting curves.
//!
//! Sessions are journalled per video and replayed on startup. Mutations to
//! one video are serialised; different videos proceed in parallel.

mod error;
pub mod session;

use std::collections::BTreeMap;
use std::future::Future;
use std::io;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use mtclar_core::datamodel::{Dataset, DimensionalLabel, FaceSample};
use mtclar_core::fsl::{propagate, Aggregation, Anchor, DifferentialModel, FrameLabel};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

pub use error::{ApiError, ErrorBody};
use session::{AnchorLabel, Event, Journal, Propagation, Session};

pub struct AppState {
    corpus: Arc<Dataset>,
    model: Option<Arc<dyn DifferentialModel>>,
    sessions: BTreeMap<String, Arc<RwLock<Session>>>,
    journal_dir: Option<PathBuf>,
}

fn bad_journal(path: &FsPath, msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}: {msg}", path.display()))
}

impl AppState {
    /// Builds one session per corpus video, replaying journals from
    /// `journal_dir` when given. Without a model, propagation answers 503.
    pub fn new(
        corpus: Dataset,
        model: Option<Arc<dyn DifferentialModel>>,
        journal_dir: Option<PathBuf>,
    ) -> io::Result<Self> {
        let mut sessions = BTreeMap::new();
        for v in corpus.videos() {
            let mut s = Session::new(&v.video_id);
            if let Some(dir) = &journal_dir {
                let journal = Journal::for_video(dir, &v.video_id);
                for event in journal.replay()? {
                    if let Event::Anchor { index, label } = &event {
                        if frame_of(&corpus, &v.video_id, *index).is_none() {
                            return Err(bad_journal(journal.path(), format!("anchor on missing frame {index}")));
                        }
                        check_label(label).map_err(|e| bad_journal(journal.path(), e.message))?;
                    }
                    s.apply(event);
                }
            }
            sessions.insert(v.video_id.clone(), Arc::new(RwLock::new(s)));
        }
        Ok(Self {
            corpus: Arc::new(corpus),
            model,
            sessions,
            journal_dir,
        })
    }

    fn session(&self, id: &str) -> Result<&Arc<RwLock<Session>>, ApiError> {
        self.sessions.get(id).ok_or_else(|| ApiError::unknown_video(id))
    }

    fn record(&self, video_id: &str, event: &Event) -> Result<(), ApiError> {
        match &self.journal_dir {
            Some(dir) => Journal::for_video(dir, video_id)
                .append(event)
                .map_err(|e| ApiError::internal(format!("journal write failed: {e}"))),
            None => Ok(()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/videos", get(list_videos))
        .route("/videos/{id}/frames/{index}", get(get_frame))
        .route("/videos/{id}/anchors/{index}", put(put_anchor))
        .route("/videos/{id}/propagate", post(post_propagate))
        .route("/videos/{id}/export", get(get_export))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn frame_of<'a>(corpus: &'a Dataset, video_id: &str, index: u32) -> Option<&'a FaceSample> {
    let v = corpus.video(video_id)?;
    v.sample_indices
        .iter()
        .map(|&i| &corpus.samples()[i])
        .find(|s| s.frame_index() == Some(index))
}

fn parse_index(id: &str, raw: &str) -> Result<u32, ApiError> {
    raw.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_frame", format!("video {id:?} has no frame {raw:?}")))
}

fn check_label(l: &AnchorLabel) -> Result<(), ApiError> {
    for (name, v) in [("valence", l.valence), ("arousal", l.arousal)] {
        if !(v.is_finite() && (-1.0..=1.0).contains(&v)) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "label_out_of_range",
                format!("{name} {v} outside [-1, 1]"),
            ));
        }
    }
    Ok(())
}

fn body_error(r: JsonRejection) -> ApiError {
    let status = match r.status() {
        StatusCode::UNPROCESSABLE_ENTITY => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::BAD_REQUEST,
    };
    ApiError::new(status, "invalid_body", r.body_text())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub subject_id: String,
    pub frame_count: usize,
    pub revision: u64,
    pub anchor_count: usize,
}

async fn list_videos(State(st): State<Arc<AppState>>) -> Json<Vec<VideoSummary>> {
    let mut out = Vec::with_capacity(st.sessions.len());
    for v in st.corpus.videos() {
        let s = st.sessions[&v.video_id].read().await;
        out.push(VideoSummary {
            video_id: v.video_id.clone(),
            subject_id: v.subject_id.clone(),
            frame_count: v.sample_indices.len(),
            revision: s.revision,
            anchor_count: s.anchors.len(),
        });
    }
    Json(out)
}

/// Dataset label of a frame. Clients should not show it unless asked to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLabel {
    pub valence: f64,
    pub arousal: f64,
    pub hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResponse {
    pub video_id: String,
    pub index: u32,
    pub media_type: String,
    pub image_base64: String,
    pub ground_truth: Option<HiddenLabel>,
}

fn media_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn get_frame(
    State(st): State<Arc<AppState>>,
    Path((id, raw)): Path<(String, String)>,
) -> Result<Json<FrameResponse>, ApiError> {
    st.session(&id)?;
    let index = parse_index(&id, &raw)?;
    let sample = frame_of(&st.corpus, &id, index).ok_or_else(|| ApiError::unknown_frame(&id, index))?;
    let (bytes, mime) = match &sample.image_path {
        Some(p) => (
            tokio::fs::read(p)
                .await
                .map_err(|e| ApiError::internal(format!("reading {}: {e}", p.display())))?,
            media_type(p),
        ),
        None => (sample.image.encode_png().map_err(|e| ApiError::internal(e.to_string()))?, "image/png"),
    };
    Ok(Json(FrameResponse {
        video_id: id,
        index,
        media_type: mime.to_string(),
        image_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        ground_truth: sample.dims.map(|d| HiddenLabel {
            valence: d.valence,
            arousal: d.arousal,
            hidden: true,
        }),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorView {
    pub index: u32,
    pub valence: f64,
    pub arousal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub revision: u64,
    pub aggregation: Aggregation,
    pub computed_at_ms: u64,
    pub stale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub video_id: String,
    pub revision: u64,
    pub anchors: Vec<AnchorView>,
    pub propagation: Option<PropagationSummary>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            video_id: s.video_id.clone(),
            revision: s.revision,
            anchors: s
                .anchors
                .iter()
                .map(|(&index, l)| AnchorView {
                    index,
                    valence: l.valence,
                    arousal: l.arousal,
                })
                .collect(),
            propagation: s.last_propagation.as_ref().map(|p| PropagationSummary {
                revision: p.revision,
                aggregation: p.aggregation,
                computed_at_ms: p.computed_at_ms,
                stale: p.revision != s.revision,
            }),
        }
    }
}

async fn put_anchor(
    State(st): State<Arc<AppState>>,
    Path((id, raw)): Path<(String, String)>,
    body: Result<Json<AnchorLabel>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let session = st.session(&id)?;
    let index = parse_index(&id, &raw)?;
    frame_of(&st.corpus, &id, index).ok_or_else(|| ApiError::unknown_frame(&id, index))?;
    let Json(label) = body.map_err(body_error)?;
    check_label(&label)?;
    let mut s = session.write().await;
    let event = Event::Anchor { index, label };
    st.record(&id, &event)?;
    s.apply(event);
    Ok(Json(SessionView::from(&*s)))
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct PropagateRequest {
    /// `preceding` (default) or `mean`.
    #[serde(default)]
    pub aggregation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationView {
    pub video_id: String,
    pub revision: u64,
    pub aggregation: Aggregation,
    pub computed_at_ms: u64,
    pub frames: Vec<FrameLabel>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Human anchors stand in for any dataset labels on their frames.
fn human_anchors(corpus: &Dataset, video_id: &str, anchors: &BTreeMap<u32, AnchorLabel>) -> Vec<Anchor> {
    anchors
        .iter()
        .map(|(&index, l)| {
            let label = DimensionalLabel {
                valence: l.valence,
                arousal: l.arousal,
            };
            let mut sample = frame_of(corpus, video_id, index).expect("anchors are validated").clone();
            sample.dims = Some(label);
            Anchor { sample, label }
        })
        .collect()
}

async fn post_propagate(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PropagateRequest>, JsonRejection>,
) -> Result<Json<PropagationView>, ApiError> {
    let session = st.session(&id)?.clone();
    let Json(req) = body.map_err(body_error)?;
    let aggregation: Aggregation = match req.aggregation.as_deref() {
        None => Aggregation::NearestPreceding,
        Some(s) => s
            .parse()
            .map_err(|e: mtclar_core::Error| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.to_string()))?,
    };
    let model = st
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", "no model loaded"))?;
    let mut s = session.write_owned().await;
    if s.anchors.is_empty() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "no_anchors",
            format!("video {id:?} has no anchors to propagate from"),
        ));
    }
    let anchors = human_anchors(&st.corpus, &id, &s.anchors);
    let corpus = st.corpus.clone();
    let vid = id.clone();
    let frames = tokio::task::spawn_blocking(move || {
        let frames = corpus.video_frames(&vid).expect("known video");
        propagate(model.as_ref(), &vid, &frames, &anchors, aggregation)
    })
    .await
    .map_err(|e| ApiError::internal(format!("propagation task failed: {e}")))?
    .map_err(|e| ApiError::internal(format!("propagation failed: {e}")))?;
    let p = Propagation {
        revision: s.revision,
        aggregation,
        computed_at_ms: now_ms(),
        frames,
    };
    let event = Event::Propagation(p.clone());
    st.record(&id, &event)?;
    s.apply(event);
    Ok(Json(PropagationView {
        video_id: id,
        revision: p.revision,
        aggregation: p.aggregation,
        computed_at_ms: p.computed_at_ms,
        frames: p.frames,
    }))
}

/// Export document: per-frame labels in the few-shot labelling layout, with
/// the human anchors flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub video_id: String,
    pub revision: u64,
    pub aggregation: Aggregation,
    pub computed_at_ms: u64,
    pub support_size: usize,
    pub frames: Vec<FrameLabel>,
}

async fn get_export(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = st.session(&id)?.read().await;
    let p = s.last_propagation.as_ref().ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "no_propagation", format!("video {id:?} has not been propagated"))
    })?;
    if p.revision != s.revision {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "stale",
            format!("propagation is from revision {}, session is at {}", p.revision, s.revision),
        ));
    }
    let doc = Export {
        video_id: id,
        revision: p.revision,
        aggregation: p.aggregation,
        computed_at_ms: p.computed_at_ms,
        support_size: p.frames.iter().filter(|f| f.is_anchor).count(),
        frames: p.frames.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&doc).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}
