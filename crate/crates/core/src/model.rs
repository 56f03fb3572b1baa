//! Audio-visual highlight network.
//!
//! The full (`AV`) model projects both modalities to `d_model`, runs one
//! self-attention per modality, two cross-modal attentions, and a score
//! regressor that mixes the four streams with softmax-normalized scalar gates
//! before two fully-connected layers and a sigmoid:
//!
//! ```text
//! v_v = Attn_vv(v)          a_a = Attn_aa(a)
//! a_v = Attn_av(a_a | v_v)  v_a = Attn_va(v_v | a_a)
//! h   = σ(FC(ReLU(FC(Σ_s softmax(g)_s · stream_s))))
//! ```
//!
//! `Attn(q | c)` takes queries from `q` and keys/values from `c`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention_on, attention_param_names, linear_on, AdamState, NodeId, ParamSet, Tape, Tensor2};
use crate::rng::{stage_rng, Stream};
use crate::store::{FeatureMatrix, VideoRecord};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVHC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "AV")]
    AudioVisual,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Visual,
    /// Concatenated inputs, one joint self-attention.
    #[serde(rename = "SA_EARLY")]
    SaEarly,
    /// One self-attention per modality, outputs concatenated.
    #[serde(rename = "SA_LATE")]
    SaLate,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::AudioVisual,
        Variant::Audio,
        Variant::Visual,
        Variant::SaEarly,
        Variant::SaLate,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::AudioVisual => "AV",
            Variant::Audio => "A",
            Variant::Visual => "V",
            Variant::SaEarly => "SA_EARLY",
            Variant::SaLate => "SA_LATE",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "AV" => Ok(Variant::AudioVisual),
            "A" => Ok(Variant::Audio),
            "V" => Ok(Variant::Visual),
            "SA_EARLY" => Ok(Variant::SaEarly),
            "SA_LATE" => Ok(Variant::SaLate),
            _ => Err(Error::InvalidInput(format!("unknown model variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    /// Extra self-attention on the fused stream inside the score regressor (AV only).
    pub extra_sa: bool,
    /// Extra fully-connected layer in the score regressor (AV only).
    pub extra_fc: bool,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Train on continuous fused scores instead of binary targets.
    pub soft_targets: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AudioVisual,
            d_model: 128,
            extra_sa: false,
            extra_fc: false,
            lr: 2.5e-3,
            epochs: 20,
            seed: 0,
            soft_targets: false,
        }
    }
}

impl ModelConfig {
    /// Training presets per benchmark style: `tvsum` (the default),
    /// `youtube`, `qvhighlights` (adds the extra regressor blocks).
    pub fn profile(name: &str) -> Result<Self> {
        let base = Self::default();
        match name.to_ascii_lowercase().as_str() {
            "tvsum" | "default" => Ok(base),
            "youtube" => Ok(Self { lr: 5e-3, epochs: 100, ..base }),
            "qvhighlights" => Ok(Self {
                lr: 5e-4,
                epochs: 10,
                extra_sa: true,
                extra_fc: true,
                ..base
            }),
            _ => Err(Error::InvalidInput(format!("unknown training profile {name:?}"))),
        }
    }

    fn uses_extra_sa(&self) -> bool {
        self.extra_sa && self.variant == Variant::AudioVisual
    }

    fn uses_extra_fc(&self) -> bool {
        self.extra_fc && self.variant == Variant::AudioVisual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighlightModel {
    pub config: ModelConfig,
    pub d_v: usize,
    pub d_a: usize,
    pub params: ParamSet,
}

fn linear_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d_in: usize, d_out: usize) {
    out.push((format!("{prefix}.weight"), d_in, d_out));
    out.push((format!("{prefix}.bias"), 1, d_out));
}

fn attention_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d: usize) {
    for name in attention_param_names(prefix) {
        out.push((name, d, d));
    }
}

/// Names and shapes of every parameter of a variant.
pub fn parameter_layout(config: &ModelConfig, d_v: usize, d_a: usize) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let mut out = Vec::new();
    let sr_in = match config.variant {
        Variant::AudioVisual => {
            linear_shapes(&mut out, "proj.visual", d_v, d);
            linear_shapes(&mut out, "proj.audio", d_a, d);
            attention_shapes(&mut out, "self_attn.visual", d);
            attention_shapes(&mut out, "self_attn.audio", d);
            attention_shapes(&mut out, "cross_attn.audio_to_visual", d);
            attention_shapes(&mut out, "cross_attn.visual_to_audio", d);
            out.push(("sr.gate".into(), 1, 4));
            if config.uses_extra_sa() {
                attention_shapes(&mut out, "sr.self_attn", d);
            }
            d
        }
        Variant::Audio => {
            linear_shapes(&mut out, "proj.audio", d_a, d);
            attention_shapes(&mut out, "self_attn.audio", d);
            d
        }
        Variant::Visual => {
            linear_shapes(&mut out, "proj.visual", d_v, d);
            attention_shapes(&mut out, "self_attn.visual", d);
            d
        }
        Variant::SaEarly => {
            linear_shapes(&mut out, "proj.joint", d_v + d_a, d);
            attention_shapes(&mut out, "self_attn.joint", d);
            d
        }
        Variant::SaLate => {
            linear_shapes(&mut out, "proj.visual", d_v, d);
            linear_shapes(&mut out, "proj.audio", d_a, d);
            attention_shapes(&mut out, "self_attn.visual", d);
            attention_shapes(&mut out, "self_attn.audio", d);
            2 * d
        }
    };
    linear_shapes(&mut out, "sr.fc1", sr_in, d);
    if config.uses_extra_fc() {
        linear_shapes(&mut out, "sr.fc_extra", d, d);
    }
    linear_shapes(&mut out, "sr.fc_out", d, 1);
    out
}

/// Initializes a model: weights uniform in `±√(6 / (fan_in + fan_out))`,
/// biases and gate logits zero.
pub fn build_model(config: ModelConfig, d_v: usize, d_a: usize) -> Result<HighlightModel> {
    if config.d_model == 0 || d_v == 0 || d_a == 0 {
        return Err(Error::InvalidInput(format!(
            "model widths must be positive (d_model {}, d_v {d_v}, d_a {d_a})",
            config.d_model
        )));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be finite and >= 0, got {}", config.lr)));
    }
    let mut layout = parameter_layout(&config, d_v, d_a);
    layout.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = stage_rng(config.seed, Stream::ModelInit);
    let mut params = ParamSet::new();
    for (name, rows, cols) in layout {
        let value = if name.ends_with(".bias") || name == "sr.gate" {
            Tensor2::zeros(rows, cols)
        } else {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor2::new(rows, cols, data)?
        };
        params.insert(name, value)?;
    }
    Ok(HighlightModel { config, d_v, d_a, params })
}

fn widen(m: &FeatureMatrix) -> Result<Tensor2> {
    Tensor2::new(m.rows(), m.cols(), m.to_f64())
}

impl HighlightModel {
    /// Records the forward pass for one video and returns the `n x 1` node of
    /// clamped sigmoid scores.
    pub fn forward_on(&self, params: &ParamSet, tape: &mut Tape, record: &VideoRecord) -> Result<NodeId> {
        let logits = self.logits_on(params, tape, record)?;
        tape.sigmoid(logits)
    }

    /// Pre-sigmoid `n x 1` scores.
    pub fn logits_on(&self, params: &ParamSet, tape: &mut Tape, record: &VideoRecord) -> Result<NodeId> {
        if record.visual.cols() != self.d_v || record.audio.cols() != self.d_a {
            return Err(Error::Shape(format!(
                "video {:?} has widths ({}, {}), model expects ({}, {})",
                record.video_id,
                record.visual.cols(),
                record.audio.cols(),
                self.d_v,
                self.d_a
            )));
        }
        if record.n_clips() == 0 || record.audio.rows() != record.n_clips() {
            return Err(Error::Shape(format!("video {:?} has no aligned clips", record.video_id)));
        }
        let visual = || -> Result<Tensor2> { widen(&record.visual) };
        let audio = || -> Result<Tensor2> { widen(&record.audio) };

        let fused = match self.config.variant {
            Variant::AudioVisual => {
                let v = tape.constant(visual()?)?;
                let a = tape.constant(audio()?)?;
                let v = linear_on(tape, params, "proj.visual", v)?;
                let a = linear_on(tape, params, "proj.audio", a)?;
                let vv = attention_on(tape, params, "self_attn.visual", v, v)?.output;
                let aa = attention_on(tape, params, "self_attn.audio", a, a)?.output;
                let av = attention_on(tape, params, "cross_attn.audio_to_visual", aa, vv)?.output;
                let va = attention_on(tape, params, "cross_attn.visual_to_audio", vv, aa)?.output;
                let gate = tape.param(params, "sr.gate")?;
                let weights = tape.softmax_rows(gate)?;
                let mut fused = tape.weighted_sum(weights, &[vv, aa, va, av])?;
                if self.config.uses_extra_sa() {
                    fused = attention_on(tape, params, "sr.self_attn", fused, fused)?.output;
                }
                fused
            }
            Variant::Audio => {
                let a = tape.constant(audio()?)?;
                let a = linear_on(tape, params, "proj.audio", a)?;
                attention_on(tape, params, "self_attn.audio", a, a)?.output
            }
            Variant::Visual => {
                let v = tape.constant(visual()?)?;
                let v = linear_on(tape, params, "proj.visual", v)?;
                attention_on(tape, params, "self_attn.visual", v, v)?.output
            }
            Variant::SaEarly => {
                let joint = visual()?.concat_cols(&audio()?)?;
                let x = tape.constant(joint)?;
                let x = linear_on(tape, params, "proj.joint", x)?;
                attention_on(tape, params, "self_attn.joint", x, x)?.output
            }
            Variant::SaLate => {
                let v = tape.constant(visual()?)?;
                let a = tape.constant(audio()?)?;
                let v = linear_on(tape, params, "proj.visual", v)?;
                let a = linear_on(tape, params, "proj.audio", a)?;
                let vv = attention_on(tape, params, "self_attn.visual", v, v)?.output;
                let aa = attention_on(tape, params, "self_attn.audio", a, a)?.output;
                tape.concat_cols(vv, aa)?
            }
        };
        let h = linear_on(tape, params, "sr.fc1", fused)?;
        let mut h = tape.relu(h)?;
        if self.config.uses_extra_fc() {
            let e = linear_on(tape, params, "sr.fc_extra", h)?;
            h = tape.relu(e)?;
        }
        linear_on(tape, params, "sr.fc_out", h)
    }

    /// Records forward plus the BCE loss of the clamped scores against
    /// `targets`, fused with the sigmoid (see [`Tape::sigmoid_bce`]).
    pub fn loss_on(&self, params: &ParamSet, tape: &mut Tape, record: &VideoRecord, targets: &[f64]) -> Result<NodeId> {
        if targets.len() != record.n_clips() {
            return Err(Error::Shape(format!(
                "video {:?}: {} targets for {} clips",
                record.video_id,
                targets.len(),
                record.n_clips()
            )));
        }
        let logits = self.logits_on(params, tape, record)?;
        let targets = Tensor2::new(targets.len(), 1, targets.to_vec())?;
        tape.sigmoid_bce(logits, &targets)
    }

    /// Per-clip highlight scores in (0, 1).
    pub fn forward(&self, record: &VideoRecord) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_on(&self.params, &mut tape, record)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Softmax-normalized stream weights of the score regressor (AV only).
    pub fn gate_weights(&self) -> Option<Vec<f64>> {
        let g = self.params.value("sr.gate").ok()?;
        Some(crate::nn::softmax_rows(g).into_data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(path)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checkpoint layout: `"AVHC" | version u32 | header_len u32 | header JSON |
    /// f64 little-endian payloads in header order`.
    pub fn to_bytes(&self, path: &Path) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config,
            d_v: self.d_v,
            d_a: self.d_a,
            params: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(path, why.to_string());
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, e))?;
        let mut offset = 12 + hlen;
        let mut params = ParamSet::new();
        for entry in &header.params {
            let count = entry.rows * entry.cols;
            let chunk = bytes
                .get(offset..offset + 8 * count)
                .ok_or_else(|| bad(&format!("truncated payload for {}", entry.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(entry.name.clone(), Tensor2::new(entry.rows, entry.cols, data)?)?;
            offset += 8 * count;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let expected: Vec<String> = {
            let mut l: Vec<String> = parameter_layout(&header.config, header.d_v, header.d_a)
                .into_iter()
                .map(|(n, _, _)| n)
                .collect();
            l.sort();
            l
        };
        if !params.names().eq(expected.iter().map(String::as_str)) {
            return Err(bad("parameter set does not match the model variant"));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
        }
        Ok(Self {
            config: header.config,
            d_v: header.d_v,
            d_a: header.d_a,
            params,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    d_v: usize,
    d_a: usize,
    params: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-video loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains with one Adam step per video, shuffling video order each epoch.
/// `targets` maps every training video id to per-clip targets in [0, 1].
pub fn train(
    model: &mut HighlightModel,
    records: &[&VideoRecord],
    targets: &BTreeMap<String, Vec<f64>>,
) -> Result<TrainReport> {
    for r in records {
        if !targets.contains_key(&r.video_id) {
            return Err(Error::InvalidInput(format!("no training targets for video {:?}", r.video_id)));
        }
    }
    let config = model.config;
    let mut adam = AdamState::new(config.lr);
    let mut rng = stage_rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let rec = records[i];
            let mut tape = Tape::new();
            let loss = model
                .loss_on(&model.params, &mut tape, rec, &targets[&rec.video_id])
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} (epoch {epoch}, video {:?})", rec.video_id))
                    }
                    other => other,
                })?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, video {:?}", rec.video_id)));
            }
            total += value;
            let grads = tape.backward(loss)?;
            model.params.set_grads(grads)?;
            adam.step(&mut model.params)?;
        }
        let mean = if records.is_empty() { 0.0 } else { total / records.len() as f64 };
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: adam.steps(),
    })
}

/// Pure inference over many videos.
pub fn predict(model: &HighlightModel, records: &[&VideoRecord]) -> Result<BTreeMap<String, Vec<f64>>> {
    records
        .par_iter()
        .map(|r| Ok((r.video_id.clone(), model.forward(r)?)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}
