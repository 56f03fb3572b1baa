//! End-to-end run: cluster, pseudo-label, train, predict, evaluate.
//!
//! [`run_in_memory`] is the single implementation of the chain; the on-disk
//! pipeline and the ablation runner both go through it, so a one-cell
//! ablation and a pipeline run with the same settings agree exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::categories::{pool_video, select_k, PseudoCategoryModel, DEFAULT_K_RANGE};
use crate::error::{Error, Result};
use crate::eval::{binarize_gt, evaluate, EvalReport, GtPolicy, REPORT_FILE};
use crate::model::{build_model, predict, train, HighlightModel, ModelConfig, TrainReport};
use crate::pseudo::{
    build_pools, build_pseudo_highlights, pseudo_as_prediction, PseudoHighlightFile, PseudoOptions, PSEUDO_HIGHLIGHTS_FILE,
};
use crate::rng::{stage_rng, Stream};
use crate::store::{file_stem, read_avhf, validate_dataset, write_avhf, Dataset, FeatureMatrix, Split, VideoRecord};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const PREDICTIONS_INDEX: &str = "predictions.json";
pub const ARTIFACTS_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Cluster,
    Pseudo,
    Train,
    Predict,
    Eval,
}

impl Stage {
    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Validate => 10,
            Stage::Cluster => 20,
            Stage::Pseudo => 30,
            Stage::Train | Stage::Predict => 40,
            Stage::Eval => 50,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validate => "validate",
            Stage::Cluster => "cluster",
            Stage::Pseudo => "pseudo",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// What produces the test-split scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// The trained highlight network.
    #[default]
    Network,
    /// Fused recurrence scores of each test video, no training.
    PseudoScores,
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predictor::Network => "network",
            Predictor::PseudoScores => "pseudo-scores",
        })
    }
}

impl std::str::FromStr for Predictor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(Predictor::Network),
            "pseudo-scores" | "pseudo" => Ok(Predictor::PseudoScores),
            _ => Err(Error::InvalidInput(format!("unknown predictor {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    /// Inclusive range of K searched by silhouette.
    pub k_range: (usize, usize),
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self { k_range: DEFAULT_K_RANGE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalSettings {
    pub gt_policy: GtPolicy,
}

/// Every knob of a run except its input and output locations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    /// Seeds every stage. Overrides `train.seed`.
    pub seed: u64,
    pub cluster: ClusterSettings,
    pub pseudo: PseudoOptions,
    pub train: ModelConfig,
    pub eval: EvalSettings,
    /// Fraction of training videos kept (seeded subsample).
    pub data_fraction: f64,
    /// Train on binarized ground truth instead of pseudo-highlights.
    pub supervised: bool,
    pub predictor: Predictor,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            cluster: ClusterSettings::default(),
            pseudo: PseudoOptions::default(),
            train: ModelConfig::default(),
            eval: EvalSettings::default(),
            data_fraction: 1.0,
            supervised: false,
            predictor: Predictor::Network,
        }
    }
}

impl PipelineSettings {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub settings: PipelineSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Training videos used by a run: the whole train split, or a seeded subsample
/// of `round(fraction * n)` videos kept in dataset order.
pub fn training_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<&VideoRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("data fraction {fraction} outside (0, 1]")));
    }
    let all: Vec<&VideoRecord> = dataset.split(Split::Train).collect();
    if fraction == 1.0 {
        return Ok(all);
    }
    let keep = ((all.len() as f64 * fraction).round() as usize).max(1).min(all.len());
    let mut rng = stage_rng(seed, Stream::DataFraction);
    let mut picked = index::sample(&mut rng, all.len(), keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// Fits pseudo-categories on the given training videos.
pub fn cluster_stage(records: &[&VideoRecord], k_range: (usize, usize), seed: u64) -> Result<PseudoCategoryModel> {
    let pooled: Vec<_> = records.iter().map(|r| pool_video(r)).collect();
    select_k(&pooled, k_range, seed)
}

/// Binary gt for every record that has gt scores.
pub fn ground_truth<'a>(
    records: impl IntoIterator<Item = &'a VideoRecord>,
    policy: GtPolicy,
    declared: Option<f32>,
) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(gt) = &r.gt_scores {
            out.insert(r.video_id.clone(), binarize_gt(gt, policy, declared)?);
        }
    }
    Ok(out)
}

/// Per-video training targets in [0, 1].
pub fn training_targets(
    dataset: &Dataset,
    records: &[&VideoRecord],
    pseudo: &PseudoHighlightFile,
    settings: &PipelineSettings,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let to_f64 = |b: &[bool]| b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let mut out = BTreeMap::new();
    for r in records {
        let targets = if settings.supervised {
            let gt = r
                .gt_scores
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("supervised run but video {:?} has no gt", r.video_id)))?;
            to_f64(&binarize_gt(gt, settings.eval.gt_policy, dataset.very_good_threshold)?)
        } else {
            let ph = pseudo
                .videos
                .get(&r.video_id)
                .ok_or_else(|| Error::InvalidInput(format!("no pseudo-highlights for video {:?}", r.video_id)))?;
            if settings.train.soft_targets {
                min_max(ph.source_scores())
            } else {
                to_f64(&ph.targets)
            }
        };
        out.insert(r.video_id.clone(), targets);
    }
    Ok(out)
}

/// Rescales to [0, 1]; constant input maps to 0.5.
fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; x.len()];
    }
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Predictions are stored as f32; evaluation always sees the stored values.
pub fn round_scores(scores: BTreeMap<String, Vec<f64>>) -> BTreeMap<String, Vec<f32>> {
    scores
        .into_iter()
        .map(|(id, s)| (id, s.into_iter().map(|x| x as f32).collect()))
        .collect()
}

pub fn widen_scores(scores: &BTreeMap<String, Vec<f32>>) -> BTreeMap<String, Vec<f64>> {
    scores
        .iter()
        .map(|(id, s)| (id.clone(), s.iter().map(|&x| f64::from(x)).collect()))
        .collect()
}

/// Evaluates stored predictions against the dataset's test-split gt.
pub fn eval_stage(dataset: &Dataset, predictions: &BTreeMap<String, Vec<f32>>, policy: GtPolicy) -> Result<EvalReport> {
    let gt = ground_truth(dataset.records.iter(), policy, dataset.very_good_threshold)?;
    evaluate(&widen_scores(predictions), &gt)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub categories: PseudoCategoryModel,
    pub pseudo: PseudoHighlightFile,
    /// `None` for the pseudo-score predictor.
    pub model: Option<HighlightModel>,
    pub train_report: Option<TrainReport>,
    /// Test-split scores, as stored.
    pub predictions: BTreeMap<String, Vec<f32>>,
    pub report: EvalReport,
}

/// Runs the whole chain on a loaded dataset without touching the disk.
pub fn run_in_memory(dataset: &Dataset, settings: &PipelineSettings) -> Result<RunOutcome, StageError> {
    let violations = validate_dataset(dataset);
    if !violations.is_empty() {
        return Err(Error::Validation(violations)).at(Stage::Validate);
    }
    let train_records = training_subset(dataset, settings.data_fraction, settings.seed).at(Stage::Cluster)?;
    let categories = cluster_stage(&train_records, settings.cluster.k_range, settings.seed).at(Stage::Cluster)?;
    log::info!("pseudo-categories: K = {}", categories.k);

    let videos = build_pseudo_highlights(dataset, &categories, &settings.pseudo).at(Stage::Pseudo)?;
    let pseudo = PseudoHighlightFile {
        options: settings.pseudo,
        videos,
    };

    let test: Vec<&VideoRecord> = dataset.split(Split::Test).collect();
    let (model, train_report, raw) = match settings.predictor {
        Predictor::Network => {
            let targets = training_targets(dataset, &train_records, &pseudo, settings).at(Stage::Train)?;
            let mut model = build_model(settings.model_config(), dataset.d_v, dataset.d_a).at(Stage::Train)?;
            let report = train(&mut model, &train_records, &targets).at(Stage::Train)?;
            let raw = predict(&model, &test).at(Stage::Predict)?;
            (Some(model), Some(report), raw)
        }
        Predictor::PseudoScores => {
            let pools = build_pools(dataset, &categories).at(Stage::Predict)?;
            let raw = pseudo_as_prediction(&categories, &pools, &test, settings.pseudo.metric, settings.pseudo.t)
                .at(Stage::Predict)?;
            (None, None, raw)
        }
    };
    let predictions = round_scores(raw);
    let report = eval_stage(dataset, &predictions, settings.eval.gt_policy).at(Stage::Eval)?;
    if report.n_videos_evaluated == 0 {
        log::warn!("no test video has ground truth with positives; report is empty");
    }
    Ok(RunOutcome {
        categories,
        pseudo,
        model,
        train_report,
        predictions,
        report,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes one AVHF `n x 1` file per video under `dir/predictions/` plus an
/// id-to-file index. Returns the paths written.
pub fn write_predictions(dir: &Path, predictions: &BTreeMap<String, Vec<f32>>) -> Result<Vec<PathBuf>> {
    let sub = dir.join(PREDICTIONS_DIR);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut written = Vec::new();
    let mut index = BTreeMap::new();
    for (i, (id, scores)) in predictions.iter().enumerate() {
        let rel = format!("{PREDICTIONS_DIR}/{}.scores.avhf", file_stem(i, id));
        let m = FeatureMatrix::new(scores.len(), 1, scores.clone())?;
        write_avhf(&dir.join(&rel), &m)?;
        written.push(dir.join(&rel));
        index.insert(id.clone(), rel);
    }
    let path = dir.join(PREDICTIONS_INDEX);
    write_json(&path, &index)?;
    written.push(path);
    Ok(written)
}

pub fn read_predictions(dir: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    let index: BTreeMap<String, String> = read_json(&dir.join(PREDICTIONS_INDEX))?;
    index
        .into_iter()
        .map(|(id, rel)| {
            let path = dir.join(&rel);
            let m = read_avhf(&path)?;
            if m.cols() != 1 {
                return Err(Error::format(&path, format!("score files must have d = 1, got {}", m.cols())));
            }
            Ok((id, m.data().to_vec()))
        })
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative path to sha256 of every artifact a pipeline run produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub files: BTreeMap<String, String>,
}

impl ArtifactManifest {
    pub fn hash_all(out: &Path, paths: &[PathBuf]) -> Result<Self> {
        let mut files = BTreeMap::new();
        for p in paths {
            let rel = p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/");
            files.insert(rel, sha256_file(p)?);
        }
        Ok(Self { files })
    }
}

/// Loads the dataset, runs the chain and writes every intermediate artifact
/// plus `artifacts.json` into `config.out`.
pub fn run_pipeline(config: &RunConfig) -> Result<(RunOutcome, ArtifactManifest), StageError> {
    let dataset = crate::store::read_dataset(&config.dataset).at(Stage::Validate)?;
    let outcome = run_in_memory(&dataset, &config.settings)?;
    let out = &config.out;
    let mut written = Vec::new();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::Cluster)?;
    let path = out.join(RUN_CONFIG_FILE);
    write_json(&path, &config.settings).at(Stage::Cluster)?;
    written.push(path);

    outcome.categories.save(out).at(Stage::Cluster)?;
    written.push(out.join(crate::categories::PSEUDO_CATEGORIES_FILE));
    written.push(out.join(crate::categories::REDUCER_FILE));

    let path = out.join(PSEUDO_HIGHLIGHTS_FILE);
    outcome.pseudo.save(&path).at(Stage::Pseudo)?;
    written.push(path);

    if let (Some(model), Some(report)) = (&outcome.model, &outcome.train_report) {
        let path = out.join(CHECKPOINT_FILE);
        model.save(&path).at(Stage::Train)?;
        written.push(path);
        let path = out.join(TRAIN_LOG_FILE);
        write_json(&path, report).at(Stage::Train)?;
        written.push(path);
    }

    written.extend(write_predictions(out, &outcome.predictions).at(Stage::Predict)?);

    let path = out.join(REPORT_FILE);
    write_json(&path, &outcome.report).at(Stage::Eval)?;
    written.push(path);

    let manifest = ArtifactManifest::hash_all(out, &written).at(Stage::Eval)?;
    write_json(&out.join(ARTIFACTS_FILE), &manifest).at(Stage::Eval)?;
    Ok((outcome, manifest))
}
