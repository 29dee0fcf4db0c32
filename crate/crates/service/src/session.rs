//! Per-video annotation state and its append-only journal.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mtclar_core::fsl::{Aggregation, FrameLabel};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLabel {
    pub valence: f64,
    pub arousal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// Session revision the labels were computed from.
    pub revision: u64,
    pub aggregation: Aggregation,
    pub computed_at_ms: u64,
    pub frames: Vec<FrameLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub video_id: String,
    pub anchors: BTreeMap<u32, AnchorLabel>,
    pub last_propagation: Option<Propagation>,
    pub revision: u64,
}

/// One journal line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Event {
    Anchor { index: u32, label: AnchorLabel },
    Propagation(Propagation),
}

impl Session {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            anchors: BTreeMap::new(),
            last_propagation: None,
            revision: 0,
        }
    }

    pub fn apply(&mut self, event: Event) {
        match event {
            Event::Anchor { index, label } => {
                self.anchors.insert(index, label);
                self.revision += 1;
            }
            Event::Propagation(p) => self.last_propagation = Some(p),
        }
    }

    pub fn is_stale(&self) -> bool {
        self.last_propagation.as_ref().is_some_and(|p| p.revision != self.revision)
    }
}

pub struct Journal {
    path: PathBuf,
}

/// Video ids may hold characters unsuitable for file names.
fn file_stem(video_id: &str) -> String {
    video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl Journal {
    pub fn for_video(dir: &Path, video_id: &str) -> Self {
        // The hex suffix keeps ids that sanitise to the same stem apart.
        let tag = video_id.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32));
        Self {
            path: dir.join(format!("{}-{tag:08x}.jsonl", file_stem(video_id))),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Events recorded so far. A torn final line, left by a crash mid-write,
    /// is dropped; a bad line anywhere else is an error.
    pub fn replay(&self) -> io::Result<Vec<Event>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<io::Result<_>>()?;
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => events.push(e),
                Err(_) if i + 1 == lines.len() => {
                    log::warn!("{}: dropping torn final line", self.path.display());
                }
                Err(e) => {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("{} line {}: {e}", self.path.display(), i + 1),
                    ))
                }
            }
        }
        Ok(events)
    }

    pub fn append(&self, event: &Event) -> io::Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(event).map_err(io::Error::other)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }
}
