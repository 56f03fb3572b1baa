//! Recurrence-based pseudo-highlights.
//!
//! A clip's audio (visual) score is its mean similarity to every clip of the
//! same modality across all videos of its pseudo-category, the clip itself
//! included. The two scores are averaged and the top `t` fraction of clips of
//! each video become positive training targets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categories::{pool_video, PseudoCategoryModel};
use crate::error::{Error, Result};
use crate::store::{Dataset, FeatureMatrix, Modality, VideoRecord};

pub const PSEUDO_HIGHLIGHTS_FILE: &str = "pseudo_highlights.json";

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Pcc,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::Pcc => "pcc",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "pcc" => Ok(Similarity::Pcc),
            other => Err(Error::InvalidInput(format!("unknown similarity {other:?}"))),
        }
    }
}

/// Which per-clip score is binarized into training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetSource {
    #[serde(rename = "A-PH")]
    Audio,
    #[serde(rename = "V-PH")]
    Visual,
    #[serde(rename = "AV-PH")]
    AudioVisual,
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSource::Audio => "A-PH",
            TargetSource::Visual => "V-PH",
            TargetSource::AudioVisual => "AV-PH",
        })
    }
}

impl FromStr for TargetSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A-PH" | "A" | "AUDIO" => Ok(TargetSource::Audio),
            "V-PH" | "V" | "VISUAL" => Ok(TargetSource::Visual),
            "AV-PH" | "AV" => Ok(TargetSource::AudioVisual),
            _ => Err(Error::InvalidInput(format!("unknown target source {s:?}"))),
        }
    }
}

fn check_lengths(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    Ok(())
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either vector is (numerically) zero.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    check_lengths(u, v)?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pearson correlation of the two vectors' entries; 0 if either is constant.
pub fn pcc_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    check_lengths(u, v)?;
    if u.len() < 2 {
        return Err(Error::InvalidInput("pearson correlation needs at least 2 entries".into()));
    }
    let center = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|xi| xi - m).collect::<Vec<_>>()
    };
    cosine_sim(&center(u), &center(v))
}

/// The vector each row contributes under `metric`: unit-normalized, after
/// centering its entries for PCC. Degenerate rows map to zero.
fn unit_row(row: &[f32], metric: Similarity, out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(row) {
        *o = f64::from(x);
    }
    if metric == Similarity::Pcc {
        let m = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|x| *x -= m);
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_NORM {
        out.fill(0.0);
    } else {
        out.iter_mut().for_each(|x| *x /= norm);
    }
}

/// All clips of one pseudo-category, stacked per modality.
#[derive(Debug)]
pub struct CategoryPool {
    pub category: usize,
    pub visual: FeatureMatrix,
    pub audio: FeatureMatrix,
    /// (video id, clip index) of every stacked row.
    pub provenance: Vec<(String, usize)>,
    pub visual_norms: Vec<f64>,
    pub audio_norms: Vec<f64>,
    unit_sums: [OnceLock<Vec<f64>>; 4],
}

impl CategoryPool {
    pub fn build(category: usize, members: &[&VideoRecord]) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyPool(category))?;
        let (d_v, d_a) = (first.visual.cols(), first.audio.cols());
        let total: usize = members.iter().map(|r| r.n_clips()).sum();
        let mut visual = Vec::with_capacity(total * d_v);
        let mut audio = Vec::with_capacity(total * d_a);
        let mut provenance = Vec::with_capacity(total);
        for rec in members {
            if rec.visual.cols() != d_v || rec.audio.cols() != d_a {
                return Err(Error::Shape(format!("video {:?} has mismatched feature widths", rec.video_id)));
            }
            visual.extend_from_slice(rec.visual.data());
            audio.extend_from_slice(rec.audio.data());
            provenance.extend((0..rec.n_clips()).map(|i| (rec.video_id.clone(), i)));
        }
        let visual = FeatureMatrix::new(total, d_v, visual)?;
        let audio = FeatureMatrix::new(total, d_a, audio)?;
        let norms = |m: &FeatureMatrix| {
            m.iter_rows()
                .map(|r| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
                .collect::<Vec<_>>()
        };
        Ok(Self {
            category,
            visual_norms: norms(&visual),
            audio_norms: norms(&audio),
            visual,
            audio,
            provenance,
            unit_sums: Default::default(),
        })
    }

    /// Number of pooled clips.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn matrix(&self, modality: Modality) -> &FeatureMatrix {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn zero_norm_rows(&self, modality: Modality) -> Vec<usize> {
        let norms = match modality {
            Modality::Visual => &self.visual_norms,
            Modality::Audio => &self.audio_norms,
        };
        norms.iter().enumerate().filter(|(_, &n)| n < ZERO_NORM).map(|(i, _)| i).collect()
    }

    /// Σ_k unit(x_k) over the pool, computed once per (modality, metric).
    fn unit_sum(&self, modality: Modality, metric: Similarity) -> &[f64] {
        let slot = match (modality, metric) {
            (Modality::Visual, Similarity::Cosine) => 0,
            (Modality::Visual, Similarity::Pcc) => 1,
            (Modality::Audio, Similarity::Cosine) => 2,
            (Modality::Audio, Similarity::Pcc) => 3,
        };
        self.unit_sums[slot].get_or_init(|| {
            let m = self.matrix(modality);
            let mut sum = vec![0.0; m.cols()];
            let mut buf = vec![0.0; m.cols()];
            for row in m.iter_rows() {
                unit_row(row, metric, &mut buf);
                sum.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
            }
            sum
        })
    }
}

fn record_matrix(record: &VideoRecord, modality: Modality) -> &FeatureMatrix {
    match modality {
        Modality::Visual => &record.visual,
        Modality::Audio => &record.audio,
    }
}

/// Per-clip recurrence scores of `record` against `pool`:
/// `score_i = (1/S) Σ_k sim(x_i, x_k)` over all `S` pooled clips.
pub fn clip_scores(record: &VideoRecord, pool: &CategoryPool, modality: Modality, metric: Similarity) -> Result<Vec<f64>> {
    clip_scores_with(record, pool, modality, metric, false)
}

/// [`clip_scores`], optionally leaving the record's own clips out of the pool
/// (matched by video id).
pub fn clip_scores_with(
    record: &VideoRecord,
    pool: &CategoryPool,
    modality: Modality,
    metric: Similarity,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    let x = record_matrix(record, modality);
    let pm = pool.matrix(modality);
    if x.cols() != pm.cols() {
        return Err(Error::Shape(format!(
            "{modality} width {} does not match pool width {}",
            x.cols(),
            pm.cols()
        )));
    }
    let mut sum = pool.unit_sum(modality, metric).to_vec();
    let mut count = pool.len();
    let mut buf = vec![0.0; x.cols()];
    if exclude_self {
        for (i, (vid, _)) in pool.provenance.iter().enumerate() {
            if *vid == record.video_id {
                unit_row(pm.row(i), metric, &mut buf);
                sum.iter_mut().zip(&buf).for_each(|(s, b)| *s -= b);
                count -= 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyPool(pool.category));
    }
    let s = count as f64;
    Ok(x.iter_rows()
        .map(|row| {
            unit_row(row, metric, &mut buf);
            buf.iter().zip(&sum).map(|(a, b)| a * b).sum::<f64>() / s
        })
        .collect())
}

/// Marks the `ceil(t·n)` highest scores; ties go to the earlier clip.
pub fn top_fraction(scores: &[f64], t: f64) -> Result<Vec<bool>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction t must be in (0, 1], got {t}")));
    }
    let n = scores.len();
    // the epsilon keeps products like 0.3 * 10 = 3.0000000000000004 at 3
    let m = ((t * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let m = m.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![false; n];
    for &i in &order[..m] {
        out[i] = true;
    }
    Ok(out)
}

/// Averages the audio and visual scores and selects the top `t` fraction.
pub fn fuse_and_select(aph: &[f64], vph: &[f64], t: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if aph.len() != vph.len() {
        return Err(Error::Shape(format!(
            "{} audio scores but {} visual scores",
            aph.len(),
            vph.len()
        )));
    }
    let avph: Vec<f64> = aph.iter().zip(vph).map(|(a, v)| (a + v) / 2.0).collect();
    let targets = top_fraction(&avph, t)?;
    Ok((avph, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoHighlight {
    pub video_id: String,
    pub category: usize,
    pub aph: Vec<f64>,
    pub vph: Vec<f64>,
    pub avph: Vec<f64>,
    #[serde(with = "bits")]
    pub targets: Vec<bool>,
    pub t: f64,
    pub metric: Similarity,
    pub source: TargetSource,
}

impl PseudoHighlight {
    pub fn source_scores(&self) -> &[f64] {
        match self.source {
            TargetSource::Audio => &self.aph,
            TargetSource::Visual => &self.vph,
            TargetSource::AudioVisual => &self.avph,
        }
    }
}

/// Targets as 0/1 in JSON.
mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        Ok(Vec::<u8>::deserialize(d)?.into_iter().map(|b| b != 0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoOptions {
    pub t: f64,
    pub metric: Similarity,
    pub source: TargetSource,
    pub exclude_self: bool,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        Self {
            t: 0.5,
            metric: Similarity::Cosine,
            source: TargetSource::AudioVisual,
            exclude_self: false,
        }
    }
}

/// One pool per pseudo-category, built from the model's training assignments.
pub fn build_pools(dataset: &Dataset, model: &PseudoCategoryModel) -> Result<BTreeMap<usize, CategoryPool>> {
    let mut members: BTreeMap<usize, Vec<&VideoRecord>> = BTreeMap::new();
    for (id, &cat) in &model.assignments {
        let rec = dataset
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("assigned video {id:?} is not in the dataset")))?;
        members.entry(cat).or_default().push(rec);
    }
    // dataset order, not id order, inside each pool
    let position: BTreeMap<&str, usize> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.video_id.as_str(), i))
        .collect();
    members
        .into_iter()
        .map(|(cat, mut recs)| {
            recs.sort_by_key(|r| position[r.video_id.as_str()]);
            Ok((cat, CategoryPool::build(cat, &recs)?))
        })
        .collect()
}

pub fn score_video(
    record: &VideoRecord,
    category: usize,
    pool: &CategoryPool,
    opts: &PseudoOptions,
) -> Result<PseudoHighlight> {
    let aph = clip_scores_with(record, pool, Modality::Audio, opts.metric, opts.exclude_self)?;
    let vph = clip_scores_with(record, pool, Modality::Visual, opts.metric, opts.exclude_self)?;
    let (avph, fused_targets) = fuse_and_select(&aph, &vph, opts.t)?;
    let targets = match opts.source {
        TargetSource::AudioVisual => fused_targets,
        TargetSource::Audio => top_fraction(&aph, opts.t)?,
        TargetSource::Visual => top_fraction(&vph, opts.t)?,
    };
    Ok(PseudoHighlight {
        video_id: record.video_id.clone(),
        category,
        aph,
        vph,
        avph,
        targets,
        t: opts.t,
        metric: opts.metric,
        source: opts.source,
    })
}

/// Pseudo-highlights for every training video the category model assigned.
pub fn build_pseudo_highlights(
    dataset: &Dataset,
    model: &PseudoCategoryModel,
    opts: &PseudoOptions,
) -> Result<BTreeMap<String, PseudoHighlight>> {
    let pools = build_pools(dataset, model)?;
    let jobs: Vec<(&String, usize)> = model.assignments.iter().map(|(id, &c)| (id, c)).collect();
    let scored: Vec<PseudoHighlight> = jobs
        .par_iter()
        .map(|(id, cat)| {
            let rec = dataset.get(id).expect("checked in build_pools");
            let pool = pools.get(cat).ok_or(Error::EmptyPool(*cat))?;
            score_video(rec, *cat, pool, opts)
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().map(|p| (p.video_id.clone(), p)).collect())
}

/// Scores test videos with their fused recurrence scores instead of a
/// trained network: each video goes to its nearest pseudo-category and is
/// scored against that category's training pool.
pub fn pseudo_as_prediction(
    model: &PseudoCategoryModel,
    pools: &BTreeMap<usize, CategoryPool>,
    records: &[&VideoRecord],
    metric: Similarity,
    t: f64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let opts = PseudoOptions {
        t,
        metric,
        source: TargetSource::AudioVisual,
        exclude_self: false,
    };
    records
        .par_iter()
        .map(|rec| {
            let cat = model.assign(&pool_video(rec))?;
            let pool = pools.get(&cat).ok_or(Error::EmptyPool(cat))?;
            let ph = score_video(rec, cat, pool, &opts)?;
            Ok((rec.video_id.clone(), ph.avph))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoHighlightFile {
    pub options: PseudoOptions,
    pub videos: BTreeMap<String, PseudoHighlight>,
}

impl PseudoHighlightFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
