//! Synthetic datasets with planted recurring highlights.
//!
//! Each category owns a few unit-norm motif vectors per modality. A highlight
//! clip is `normalize(α · motif + (1 - α) · ε)` with `ε ~ N(0, σ²/d · I)`,
//! a background clip is `normalize(ε)`. Highlights are planted at the same
//! clips in both modalities, unless a modality is declared uninformative, in
//! which case all of its clips are background.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stream, StageRng};
use crate::store::{Dataset, FeatureMatrix, Split, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Informativeness {
    #[default]
    Both,
    AudioOnly,
    VisualOnly,
}

impl Informativeness {
    fn visual(self) -> bool {
        self != Informativeness::AudioOnly
    }

    fn audio(self) -> bool {
        self != Informativeness::VisualOnly
    }
}

impl fmt::Display for Informativeness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Informativeness::Both => "both",
            Informativeness::AudioOnly => "audio-only",
            Informativeness::VisualOnly => "visual-only",
        })
    }
}

impl FromStr for Informativeness {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Informativeness::Both),
            "audio-only" => Ok(Informativeness::AudioOnly),
            "visual-only" => Ok(Informativeness::VisualOnly),
            _ => Err(Error::InvalidInput(format!("unknown informativeness {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub n_categories: usize,
    pub videos_per_category: usize,
    /// Inclusive range of clips per video.
    pub clips_per_video: (usize, usize),
    pub d_v: usize,
    pub d_a: usize,
    pub motifs_per_category: usize,
    /// Fraction of each video's clips that carry a motif (at least one clip).
    pub highlight_fraction: f64,
    /// α: weight of the motif against the noise in highlight clips.
    pub recurrence_strength: f64,
    /// σ: noise norm scale.
    pub noise_scale: f64,
    pub modality_informativeness: Informativeness,
    /// Train / val / test fractions, applied per category.
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_categories: 6,
            videos_per_category: 20,
            clips_per_video: (20, 40),
            d_v: 32,
            d_a: 32,
            motifs_per_category: 4,
            highlight_fraction: 0.3,
            recurrence_strength: 0.85,
            noise_scale: 1.0,
            modality_informativeness: Informativeness::Both,
            split_fractions: (0.7, 0.1, 0.2),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidInput(format!("synth config: {why}")));
        for (what, v) in [
            ("n_categories", self.n_categories),
            ("videos_per_category", self.videos_per_category),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
            ("motifs_per_category", self.motifs_per_category),
            ("clips_per_video min", self.clips_per_video.0),
        ] {
            if v == 0 {
                return bad(format!("{what} must be >= 1"));
            }
        }
        if self.clips_per_video.0 > self.clips_per_video.1 {
            return bad(format!("clips_per_video range {:?} is empty", self.clips_per_video));
        }
        if !(0.0..=1.0).contains(&self.recurrence_strength) {
            return bad(format!("recurrence_strength {} outside [0, 1]", self.recurrence_strength));
        }
        if !(0.0..=1.0).contains(&self.highlight_fraction) {
            return bad(format!("highlight_fraction {} outside [0, 1]", self.highlight_fraction));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale {} must be finite and >= 0", self.noise_scale));
        }
        let (tr, va, te) = self.split_fractions;
        if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.split_fractions));
        }
        Ok(())
    }

    pub fn category_name(c: usize) -> String {
        format!("cat{c:02}")
    }

    pub fn video_id(c: usize, v: usize) -> String {
        format!("cat{c:02}_vid{v:03}")
    }
}

fn gaussian_unit(rng: &mut StageRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn make_clip(rng: &mut StageRng, d: usize, motif: Option<&[f64]>, alpha: f64, sigma: f64) -> Vec<f32> {
    let scale = sigma / (d as f64).sqrt();
    let noise = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal));
    let v: Vec<f64> = match motif {
        Some(m) => m.iter().zip(noise).map(|(&mi, e)| alpha * mi + (1.0 - alpha) * e).collect(),
        None => noise.collect(),
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return vec![0.0; d];
    }
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Splits `n` items into train/val/test counts, rounding val and test and
/// giving the remainder to train.
fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let test = ((n as f64) * fractions.2).round() as usize;
    let val = (((n as f64) * fractions.1).round() as usize).min(n - test);
    (n - test - val, val, test)
}

/// Builds the dataset. Deterministic per `config.seed`; gt is 1 at planted
/// clips, 0 elsewhere, and the declared positive threshold is 1.0.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = stage_rng(config.seed, Stream::Synth);
    let info = config.modality_informativeness;
    let mut ds = Dataset::new(config.name.clone(), config.d_v, config.d_a);
    ds.very_good_threshold = Some(1.0);
    ds.gt_mapping = Some("planted highlight = 1, background = 0".into());

    for c in 0..config.n_categories {
        let visual_motifs: Vec<Vec<f64>> =
            (0..config.motifs_per_category).map(|_| gaussian_unit(&mut rng, config.d_v)).collect();
        let audio_motifs: Vec<Vec<f64>> =
            (0..config.motifs_per_category).map(|_| gaussian_unit(&mut rng, config.d_a)).collect();

        let (n_train, n_val, _) = split_counts(config.videos_per_category, config.split_fractions);
        let mut splits: Vec<Split> = (0..config.videos_per_category)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect();
        splits.shuffle(&mut rng);

        for (v, split) in splits.into_iter().enumerate() {
            let n = rng.random_range(config.clips_per_video.0..=config.clips_per_video.1);
            let m = ((n as f64 * config.highlight_fraction).round() as usize).clamp(1, n);
            let m = if config.highlight_fraction == 0.0 { 0 } else { m };
            let mut planted = vec![false; n];
            for i in index::sample(&mut rng, n, m) {
                planted[i] = true;
            }
            let mut visual = Vec::with_capacity(n * config.d_v);
            let mut audio = Vec::with_capacity(n * config.d_a);
            for &is_hl in &planted {
                let k = rng.random_range(0..config.motifs_per_category);
                let vm = (is_hl && info.visual()).then(|| visual_motifs[k].as_slice());
                let am = (is_hl && info.audio()).then(|| audio_motifs[k].as_slice());
                visual.extend(make_clip(&mut rng, config.d_v, vm, config.recurrence_strength, config.noise_scale));
                audio.extend(make_clip(&mut rng, config.d_a, am, config.recurrence_strength, config.noise_scale));
            }
            let id = SynthConfig::video_id(c, v);
            ds.category_labels.insert(id.clone(), SynthConfig::category_name(c));
            ds.records.push(VideoRecord {
                video_id: id,
                split,
                visual: FeatureMatrix::new(n, config.d_v, visual)?,
                audio: FeatureMatrix::new(n, config.d_a, audio)?,
                gt_scores: Some(planted.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()),
            });
        }
    }
    Ok(ds)
}
