#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rh_core::pseudo::Similarity;
use rh_core::store::{Dataset, FeatureMatrix, Modality, Split, VideoRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn record(rng: &mut impl Rng, id: &str, n: usize, d_v: usize, d_a: usize) -> VideoRecord {
    VideoRecord {
        video_id: id.to_string(),
        split: Split::Train,
        visual: matrix(rng, n, d_v),
        audio: matrix(rng, n, d_a),
        gt_scores: None,
    }
}

/// Small dataset with random features, graded gt on every video and every
/// split present.
pub fn dataset(rng: &mut impl Rng, videos: usize) -> Dataset {
    let d_v = rng.random_range(1..6);
    let d_a = rng.random_range(1..6);
    let mut ds = Dataset::new("random", d_v, d_a);
    for v in 0..videos {
        let n = rng.random_range(1..12);
        let mut r = record(rng, &format!("video {v}/odd:name"), n, d_v, d_a);
        r.split = [Split::Train, Split::Val, Split::Test][v % 3];
        r.gt_scores = Some((0..n).map(|_| rng.random_range(0.0f32..=1.0)).collect());
        ds.category_labels.insert(r.video_id.clone(), format!("c{}", v % 2));
        ds.records.push(r);
    }
    ds.very_good_threshold = Some(0.8);
    ds
}

/// Row-major product by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i * m + j] += a[i * k + l] * b[l * m + j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        0.0
    } else {
        u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
    }
}

pub fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let mu = u.iter().sum::<f64>() / u.len() as f64;
    let mv = v.iter().sum::<f64>() / v.len() as f64;
    let cu: Vec<f64> = u.iter().map(|x| x - mu).collect();
    let cv: Vec<f64> = v.iter().map(|x| x - mv).collect();
    cosine(&cu, &cv)
}

/// Mean similarity of every clip of `rec` to every pooled clip, by a double loop.
pub fn brute_scores(rec: &VideoRecord, members: &[&VideoRecord], modality: Modality, metric: Similarity, skip_self: bool) -> Vec<f64> {
    let pick = |r: &VideoRecord, i: usize| -> Vec<f64> {
        let m = if modality == Modality::Visual { &r.visual } else { &r.audio };
        m.row(i).iter().map(|&x| f64::from(x)).collect()
    };
    let sim = |a: &[f64], b: &[f64]| match metric {
        Similarity::Cosine => cosine(a, b),
        Similarity::Pcc => pearson(a, b),
    };
    (0..rec.n_clips())
        .map(|i| {
            let xi = pick(rec, i);
            let mut total = 0.0;
            let mut count = 0usize;
            for m in members {
                if skip_self && m.video_id == rec.video_id {
                    continue;
                }
                for k in 0..m.n_clips() {
                    total += sim(&xi, &pick(m, k));
                    count += 1;
                }
            }
            total / count as f64
        })
        .collect()
}

/// Rank of clip i: how many clips beat it (higher score, or equal score and
/// earlier index).
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn brute_ap(scores: &[f64], gt: &[bool], cutoff: usize) -> Option<f64> {
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return None;
    }
    let mut total = 0.0;
    for i in (0..scores.len()).filter(|&i| gt[i]) {
        let r = rank_of(scores, i);
        if r < cutoff {
            let above = (0..scores.len()).filter(|&j| gt[j] && rank_of(scores, j) <= r).count();
            total += above as f64 / (r + 1) as f64;
        }
    }
    Some(total / positives.min(cutoff) as f64)
}
