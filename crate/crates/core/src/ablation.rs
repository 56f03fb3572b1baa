//! Ablation runner: cross product of setting axes, repeated over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::EvalReport;
use crate::model::Variant;
use crate::pipeline::{run_in_memory, PipelineSettings, Predictor, StageError};
use crate::pseudo::{Similarity, TargetSource};
use crate::store::Dataset;

/// Values to sweep. An empty axis keeps the base setting and adds no column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub targets: Vec<TargetSource>,
    pub model: Vec<Variant>,
    pub metric: Vec<Similarity>,
    /// Fixed numbers of pseudo-categories.
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub data_fraction: Vec<f64>,
    pub supervised: Vec<bool>,
    pub predictor: Vec<Predictor>,
}

/// One assignment of axis values.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: BTreeMap<String, String>,
    pub settings: PipelineSettings,
}

impl AblationAxes {
    /// All cells in a fixed order (axes in declaration order, values in the
    /// order given).
    pub fn cells(&self, base: &PipelineSettings) -> Vec<Cell> {
        let mut cells = vec![Cell {
            key: BTreeMap::new(),
            settings: *base,
        }];
        fn expand<T: Copy + ToString>(
            cells: Vec<Cell>,
            name: &str,
            values: &[T],
            apply: impl Fn(&mut PipelineSettings, T),
        ) -> Vec<Cell> {
            if values.is_empty() {
                return cells;
            }
            let mut out = Vec::with_capacity(cells.len() * values.len());
            for c in cells {
                for &v in values {
                    let mut next = c.clone();
                    next.key.insert(name.to_string(), v.to_string());
                    apply(&mut next.settings, v);
                    out.push(next);
                }
            }
            out
        }
        cells = expand(cells, "targets", &self.targets, |s, v| s.pseudo.source = v);
        cells = expand(cells, "model", &self.model, |s, v| s.train.variant = v);
        cells = expand(cells, "metric", &self.metric, |s, v| s.pseudo.metric = v);
        cells = expand(cells, "K", &self.k, |s, v| s.cluster.k_range = (v, v));
        cells = expand(cells, "data_fraction", &self.data_fraction, |s, v| s.data_fraction = v);
        cells = expand(cells, "supervised", &self.supervised, |s, v| s.supervised = v);
        cells = expand(cells, "predictor", &self.predictor, |s, v| s.predictor = v);
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub hit_at_1: f64,
    #[serde(rename = "top5_mAP")]
    pub top5_map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, sd: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: BTreeMap<String, String>,
    #[serde(rename = "mAP")]
    pub map: MeanSd,
    pub hit_at_1: MeanSd,
    #[serde(rename = "top5_mAP")]
    pub top5_map: MeanSd,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, key: &[(&str, &str)]) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| key.iter().all(|(k, v)| r.cell.get(*k).map(String::as_str) == Some(*v)))
    }

    /// Fixed-width text table, metrics as percentages.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<48} {:>16} {:>16} {:>16}", "cell", "mAP", "HIT@1", "top-5 mAP");
        for r in &self.rows {
            let cell = if r.cell.is_empty() {
                "baseline".to_string()
            } else {
                r.cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
            };
            let pct = |m: MeanSd| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.sd);
            let _ = writeln!(
                out,
                "{:<48} {:>16} {:>16} {:>16}",
                cell,
                pct(r.map),
                pct(r.hit_at_1),
                pct(r.top5_map)
            );
        }
        out
    }
}

/// Runs every (cell, seed) pair on the worker pool; rows come back in cell
/// order whatever the completion order.
pub fn run_ablation(
    dataset: &Dataset,
    base: &PipelineSettings,
    axes: &AblationAxes,
    seeds: &[u64],
) -> Result<AblationTable, StageError> {
    let cells = axes.cells(base);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<EvalReport> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let settings = PipelineSettings {
                seed,
                ..cells[c].settings
            };
            run_in_memory(dataset, &settings).map(|o| o.report)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let per_seed: Vec<SeedResult> = jobs
            .iter()
            .zip(&results)
            .filter(|((jc, _), _)| *jc == c)
            .map(|((_, seed), r)| SeedResult {
                seed: *seed,
                map: r.map,
                hit_at_1: r.hit_at_1,
                top5_map: r.top5_map,
            })
            .collect();
        let stat = |f: fn(&SeedResult) -> f64| MeanSd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            cell: cell.key.clone(),
            map: stat(|s| s.map),
            hit_at_1: stat(|s| s.hit_at_1),
            top5_map: stat(|s| s.top5_map),
            per_seed,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
