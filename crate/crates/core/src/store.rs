//! On-disk dataset format for clip-level audio-visual features.
//!
//! A dataset root holds a `manifest.json` plus one AVHF file per video per
//! modality (and one for ground-truth scores when present). AVHF is a tiny
//! binary matrix container:
//!
//! ```text
//! "AVHF" | version: u32 = 1 | n: u32 | d: u32 | n*d f32, little-endian, row-major
//! ```
//!
//! All manifest paths are relative to the root.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AVHF_MAGIC: &[u8; 4] = b"AVHF";
pub const AVHF_VERSION: u32 = 1;
pub const AVHF_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// Dense row-major `f32` matrix, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Widened copy as row-major f64.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    /// Rows holding at least one NaN or infinity.
    fn non_finite_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.row(i).iter().any(|x| !x.is_finite()))
            .collect()
    }
}

/// Serializes a matrix as an AVHF byte buffer.
pub fn encode_avhf(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(AVHF_HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(AVHF_MAGIC);
    out.extend_from_slice(&AVHF_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for x in &m.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Why a byte buffer is not a valid AVHF payload.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AvhfError {
    #[error("file is {0} bytes, shorter than the 16-byte header")]
    TruncatedHeader(usize),
    #[error("bad magic {0:?}, expected \"AVHF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("header declares {rows}x{cols} ({expected} payload bytes) but payload has {actual}")]
    LengthMismatch {
        rows: u32,
        cols: u32,
        expected: u64,
        actual: u64,
    },
}

pub fn decode_avhf(bytes: &[u8]) -> std::result::Result<FeatureMatrix, AvhfError> {
    if bytes.len() < AVHF_HEADER_LEN {
        return Err(AvhfError::TruncatedHeader(bytes.len()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != AVHF_MAGIC {
        return Err(AvhfError::BadMagic(magic));
    }
    let version = word(4);
    if version != AVHF_VERSION {
        return Err(AvhfError::UnsupportedVersion(version));
    }
    let (rows, cols) = (word(8), word(12));
    let expected = u64::from(rows) * u64::from(cols) * 4;
    let actual = (bytes.len() - AVHF_HEADER_LEN) as u64;
    if expected != actual {
        return Err(AvhfError::LengthMismatch {
            rows,
            cols,
            expected,
            actual,
        });
    }
    let data = bytes[AVHF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        rows: rows as usize,
        cols: cols as usize,
        data,
    })
}

pub fn write_avhf(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_avhf(m)).map_err(|e| Error::io(path, e))
}

pub fn read_avhf(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_avhf(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub split: Split,
    /// n x d_v
    pub visual: FeatureMatrix,
    /// n x d_a
    pub audio: FeatureMatrix,
    /// Per-clip ground truth in [0, 1].
    pub gt_scores: Option<Vec<f32>>,
}

impl VideoRecord {
    pub fn n_clips(&self) -> usize {
        self.visual.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub d_v: usize,
    pub d_a: usize,
    pub records: Vec<VideoRecord>,
    /// Real category per video, when the source provides one.
    pub category_labels: BTreeMap<String, String>,
    /// gt score at or above which a clip counts as a positive ("very good").
    pub very_good_threshold: Option<f32>,
    /// Free-form note on how source ratings were mapped into [0, 1].
    pub gt_mapping: Option<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, d_v: usize, d_a: usize) -> Self {
        Self {
            name: name.into(),
            d_v,
            d_a,
            records: Vec::new(),
            category_labels: BTreeMap::new(),
            very_good_threshold: None,
            gt_mapping: None,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        })
    }
}

/// One broken invariant, located as precisely as possible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub video_id: Option<String>,
    pub field: String,
    pub row: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(video_id: Option<&str>, field: impl Into<String>, row: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            video_id: video_id.map(str::to_owned),
            field: field.into(),
            row,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.video_id {
            Some(id) => write!(f, "video {id:?}: {}", self.field)?,
            None => write!(f, "dataset: {}", self.field)?,
        }
        if let Some(row) = self.row {
            write!(f, " row {row}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Lists every invariant violation. An empty report means the dataset is valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.d_v == 0 {
        out.push(Violation::new(None, "d_v", None, "must be positive"));
    }
    if ds.d_a == 0 {
        out.push(Violation::new(None, "d_a", None, "must be positive"));
    }
    let mut seen = HashSet::new();
    for rec in &ds.records {
        let id = Some(rec.video_id.as_str());
        if rec.video_id.is_empty() {
            out.push(Violation::new(id, "id", None, "empty video id"));
        }
        if !seen.insert(rec.video_id.as_str()) {
            out.push(Violation::new(id, "id", None, "duplicate video id"));
        }
        let n = rec.visual.rows();
        if n == 0 {
            out.push(Violation::new(id, "n_clips", None, "video has no clips"));
        }
        if rec.audio.rows() != n {
            out.push(Violation::new(
                id,
                "n_clips",
                None,
                format!("visual has {n} rows but audio has {}", rec.audio.rows()),
            ));
        }
        if rec.visual.cols() != ds.d_v {
            out.push(Violation::new(
                id,
                "visual",
                None,
                format!("width {} != dataset d_v {}", rec.visual.cols(), ds.d_v),
            ));
        }
        if rec.audio.cols() != ds.d_a {
            out.push(Violation::new(
                id,
                "audio",
                None,
                format!("width {} != dataset d_a {}", rec.audio.cols(), ds.d_a),
            ));
        }
        for (modality, m) in [(Modality::Visual, &rec.visual), (Modality::Audio, &rec.audio)] {
            for row in m.non_finite_rows() {
                out.push(Violation::new(id, modality.to_string(), Some(row), "non-finite feature value"));
            }
        }
        if let Some(gt) = &rec.gt_scores {
            if gt.len() != n {
                out.push(Violation::new(
                    id,
                    "gt_scores",
                    None,
                    format!("length {} != n_clips {n}", gt.len()),
                ));
            }
            for (i, g) in gt.iter().enumerate() {
                if !(0.0..=1.0).contains(g) {
                    out.push(Violation::new(id, "gt_scores", Some(i), format!("{g} outside [0, 1]")));
                }
            }
        }
    }
    for id in ds.category_labels.keys() {
        if !seen.contains(id.as_str()) {
            out.push(Violation::new(Some(id), "category", None, "label for unknown video"));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    name: String,
    d_v: usize,
    d_a: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    very_good_threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_mapping: Option<String>,
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    id: String,
    n_clips: usize,
    split: Split,
    visual_file: String,
    audio_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// File stem derived from a video id: index-prefixed so distinct ids never collide.
pub(crate) fn file_stem(index: usize, video_id: &str) -> String {
    let clean: String = video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    format!("{index:05}_{clean}")
}

/// Writes `manifest.json` plus the feature files and returns every path written.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let violations = validate_dataset(ds);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut written = Vec::new();
    let mut videos = Vec::with_capacity(ds.records.len());
    for (i, rec) in ds.records.iter().enumerate() {
        let stem = file_stem(i, &rec.video_id);
        let visual_file = format!("features/{stem}.visual.avhf");
        let audio_file = format!("features/{stem}.audio.avhf");
        write_avhf(&root.join(&visual_file), &rec.visual)?;
        written.push(root.join(&visual_file));
        write_avhf(&root.join(&audio_file), &rec.audio)?;
        written.push(root.join(&audio_file));
        let labels_file = match &rec.gt_scores {
            Some(gt) => {
                let file = format!("features/{stem}.labels.avhf");
                let m = FeatureMatrix::new(gt.len(), 1, gt.clone())?;
                write_avhf(&root.join(&file), &m)?;
                written.push(root.join(&file));
                Some(file)
            }
            None => None,
        };
        videos.push(ManifestEntry {
            id: rec.video_id.clone(),
            n_clips: rec.n_clips(),
            split: rec.split,
            visual_file,
            audio_file,
            labels_file,
            category: ds.category_labels.get(&rec.video_id).cloned(),
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        d_v: ds.d_v,
        d_a: ds.d_a,
        very_good_threshold: ds.very_good_threshold,
        gt_mapping: ds.gt_mapping.clone(),
        videos,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Loads a dataset root. Never returns a dataset that fails [`validate_dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;

    let mut ds = Dataset::new(manifest.name, manifest.d_v, manifest.d_a);
    ds.very_good_threshold = manifest.very_good_threshold;
    ds.gt_mapping = manifest.gt_mapping;
    for entry in manifest.videos {
        let visual = read_avhf(&root.join(&entry.visual_file))?;
        let audio = read_avhf(&root.join(&entry.audio_file))?;
        if visual.rows() != entry.n_clips {
            return Err(Error::format(
                root.join(&entry.visual_file),
                format!("{} rows but manifest says n_clips = {}", visual.rows(), entry.n_clips),
            ));
        }
        let gt_scores = match &entry.labels_file {
            Some(file) => {
                let m = read_avhf(&root.join(file))?;
                if m.cols() != 1 {
                    return Err(Error::format(root.join(file), format!("labels must have d = 1, got {}", m.cols())));
                }
                Some(m.data)
            }
            None => None,
        };
        if let Some(cat) = entry.category {
            ds.category_labels.insert(entry.id.clone(), cat);
        }
        ds.records.push(VideoRecord {
            video_id: entry.id,
            split: entry.split,
            visual,
            audio,
            gt_scores,
        });
    }
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(ds)
}
