//! Ranking metrics over per-clip highlight scores.
//!
//! Clips are ranked by descending score with ties broken by the earlier clip
//! index everywhere in this module.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::top_fraction;

pub const REPORT_FILE: &str = "report.json";

/// Clip indices from highest to lowest score.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check(scores: &[f64], gt: &[bool]) -> Result<()> {
    if scores.len() != gt.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), gt.len())));
    }
    Ok(())
}

/// Mean of precision@k over the ranks k of the positives. `None` when the
/// video has no positive clip.
pub fn average_precision(scores: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    check(scores, gt)?;
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if gt[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(total / positives as f64))
}

/// AP over the top five ranked clips, normalized by `min(5, #positives)`.
/// Videos with fewer than five clips use all of them.
pub fn top5_average_precision(scores: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    truncated_average_precision(scores, gt, 5)
}

pub fn truncated_average_precision(scores: &[f64], gt: &[bool], cutoff: usize) -> Result<Option<f64>> {
    check(scores, gt)?;
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().take(cutoff).enumerate() {
        if gt[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(total / positives.min(cutoff) as f64))
}

/// 1 if the top-ranked clip is a positive.
pub fn hit_at_1(scores: &[f64], gt: &[bool]) -> Result<f64> {
    check(scores, gt)?;
    Ok(match ranking(scores).first() {
        Some(&i) if gt[i] => 1.0,
        _ => 0.0,
    })
}

/// How graded ground truth becomes binary positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum GtPolicy {
    /// Positives score at least the dataset's declared "very good" threshold
    /// (or this explicit value).
    TopRating(Option<f32>),
    /// The top `p` fraction of clips by gt score.
    Fraction(f64),
}

impl Default for GtPolicy {
    fn default() -> Self {
        GtPolicy::TopRating(None)
    }
}

impl fmt::Display for GtPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GtPolicy::TopRating(None) => f.write_str("top-rating"),
            GtPolicy::TopRating(Some(t)) => write!(f, "top-rating:{t}"),
            GtPolicy::Fraction(p) => write!(f, "fraction:{p}"),
        }
    }
}

impl FromStr for GtPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad gt policy {s:?}; use top-rating[:x] or fraction:p"));
        match s.split_once(':') {
            None if s == "top-rating" => Ok(GtPolicy::TopRating(None)),
            Some(("top-rating", v)) => Ok(GtPolicy::TopRating(Some(v.parse().map_err(|_| bad())?))),
            Some(("fraction", v)) => Ok(GtPolicy::Fraction(v.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Binary ground truth from graded scores. `declared` is the dataset's
/// very-good threshold, used when the policy does not carry its own; with
/// neither, 1.0 is used.
pub fn binarize_gt(gt: &[f32], policy: GtPolicy, declared: Option<f32>) -> Result<Vec<bool>> {
    match policy {
        GtPolicy::TopRating(explicit) => {
            let threshold = explicit.or(declared).unwrap_or(1.0);
            Ok(gt.iter().map(|&g| g >= threshold).collect())
        }
        GtPolicy::Fraction(p) => {
            let scores: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
            top_fraction(&scores, p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub ap: f64,
    pub top5_ap: f64,
    pub hit_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub hit_at_1: f64,
    #[serde(rename = "top5_mAP")]
    pub top5_map: f64,
    pub per_video: BTreeMap<String, VideoEval>,
    pub n_videos_evaluated: usize,
    /// Videos skipped for lacking ground truth or positives.
    pub excluded: Vec<String>,
}

impl EvalReport {
    /// Human-readable summary with metrics as percentages.
    pub fn render(&self) -> String {
        format!(
            "mAP {:.2}  HIT@1 {:.2}  top-5 mAP {:.2}  ({} videos, {} excluded)",
            100.0 * self.map,
            100.0 * self.hit_at_1,
            100.0 * self.top5_map,
            self.n_videos_evaluated,
            self.excluded.len()
        )
    }
}

/// Scores `predictions` against binary ground truth. Videos present in
/// `predictions` but absent from `gt`, or without positives, are excluded.
pub fn evaluate(predictions: &BTreeMap<String, Vec<f64>>, gt: &BTreeMap<String, Vec<bool>>) -> Result<EvalReport> {
    let mut per_video = BTreeMap::new();
    let mut excluded = Vec::new();
    for (id, scores) in predictions {
        let Some(labels) = gt.get(id) else {
            excluded.push(id.clone());
            continue;
        };
        let Some(ap) = average_precision(scores, labels)? else {
            excluded.push(id.clone());
            continue;
        };
        let top5_ap = top5_average_precision(scores, labels)?.expect("has positives");
        let hit = hit_at_1(scores, labels)?;
        per_video.insert(id.clone(), VideoEval { ap, top5_ap, hit_at_1: hit });
    }
    let n = per_video.len();
    let mean = |f: fn(&VideoEval) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_video.values().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(EvalReport {
        map: mean(|v| v.ap),
        hit_at_1: mean(|v| v.hit_at_1),
        top5_map: mean(|v| v.top5_ap),
        n_videos_evaluated: n,
        per_video,
        excluded,
    })
}
