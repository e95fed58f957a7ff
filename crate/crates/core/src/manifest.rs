//! Line-delimited JSON manifests.
//!
//! The first line is a header object (`dataset`, `feat_dim`, `classes`); every
//! following non-empty line is one video record with keys `id`, `path`,
//! `domain` (`"source"` or `"target"`), `n_frames` and an optional `label`.
//! Paths are relative to the manifest's directory.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, Domain, FormatError, Header, VideoFeatures, HEADER_LEN};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("video {0:?} not in manifest")]
    MissingId(String),
    #[error("video {id}: {msg}")]
    Mismatch { id: String, msg: String },
    #[error("video {id}: {source}")]
    Format {
        id: String,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub dataset: String,
    pub feat_dim: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub path: String,
    pub domain: Domain,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<VideoRecord>,
    base_dir: PathBuf,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(header: ManifestHeader, records: Vec<VideoRecord>, base_dir: PathBuf) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Manifest {
            header,
            records,
            base_dir,
            index,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.header.feat_dim
    }

    pub fn n_classes(&self) -> usize {
        self.header.classes.len()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn parse(text: &str, origin: &str, base_dir: PathBuf) -> Result<Self, ManifestError> {
        let err = |line: usize, msg: String| ManifestError::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hl, first) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| err(hl + 1, format!("header: {e}")))?;
        let mut records = Vec::new();
        let mut seen = HashMap::new();
        for (i, l) in lines {
            let r: VideoRecord = serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string()))?;
            if r.n_frames == 0 {
                return Err(err(i + 1, format!("video {} has zero frames", r.id)));
            }
            if r.domain == Domain::Source && r.label.is_none() {
                return Err(err(i + 1, format!("source video {} has no label", r.id)));
            }
            if let Some(l) = r.label {
                if l >= header.classes.len() {
                    return Err(err(i + 1, format!("label {l} out of range")));
                }
            }
            if seen.insert(r.id.clone(), i).is_some() {
                return Err(err(i + 1, format!("duplicate id {}", r.id)));
            }
            records.push(r);
        }
        Ok(Manifest::new(header, records, base_dir))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, &path.display().to_string(), base)
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("serialisable");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("serialisable"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn record(&self, id: &str) -> Result<&VideoRecord, ManifestError> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| ManifestError::MissingId(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn feature_path(&self, r: &VideoRecord) -> PathBuf {
        self.base_dir.join(&r.path)
    }

    /// Loads a video's features, checking them against its record.
    pub fn load_video(&self, id: &str) -> Result<VideoFeatures, ManifestError> {
        let r = self.record(id)?;
        let (frames, _) =
            features::read_matrix(&self.feature_path(r)).map_err(|source| ManifestError::Format {
                id: id.to_string(),
                source,
            })?;
        if frames.rows != r.n_frames || frames.cols != self.header.feat_dim {
            return Err(ManifestError::Mismatch {
                id: id.to_string(),
                msg: format!(
                    "file is {}x{}, manifest says {}x{}",
                    frames.rows, frames.cols, r.n_frames, self.header.feat_dim
                ),
            });
        }
        Ok(VideoFeatures {
            video_id: r.id.clone(),
            domain: r.domain,
            label: r.label,
            frames,
        })
    }

    /// Checks that every referenced file exists and its header agrees with the manifest.
    pub fn validate(&self) -> Result<(), ManifestError> {
        for r in &self.records {
            let bytes = fs::read(self.feature_path(r)).map_err(|e| ManifestError::Format {
                id: r.id.clone(),
                source: e.into(),
            })?;
            let h = Header::parse(&bytes[..bytes.len().min(HEADER_LEN)]).map_err(|source| {
                ManifestError::Format {
                    id: r.id.clone(),
                    source,
                }
            })?;
            if h.rows as usize != r.n_frames || h.cols as usize != self.header.feat_dim {
                return Err(ManifestError::Mismatch {
                    id: r.id.clone(),
                    msg: format!(
                        "header is {}x{}, manifest says {}x{}",
                        h.rows, h.cols, r.n_frames, self.header.feat_dim
                    ),
                });
            }
        }
        Ok(())
    }

    /// All videos, loaded into memory, in manifest order.
    pub fn load_all(&self) -> Result<Vec<VideoFeatures>, ManifestError> {
        self.records.iter().map(|r| self.load_video(&r.id)).collect()
    }
}
