//! Pseudo-categories: videos are mean-pooled into one audio-visual vector,
//! reduced to a low-dimensional embedding, and clustered with K-means. The
//! cluster count is the one with the highest silhouette coefficient.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stream};
use crate::store::VideoRecord;

pub const REDUCED_DIM: usize = 10;
pub const DEFAULT_K_RANGE: (usize, usize) = (4, 15);
pub const PSEUDO_CATEGORIES_FILE: &str = "pseudo_categories.json";
pub const REDUCER_FILE: &str = "reducer.json";

/// Video-level features: per-modality clip means and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub video_id: String,
    pub vbar: Vec<f64>,
    pub abar: Vec<f64>,
    /// `[vbar; abar]`
    pub fbar: Vec<f64>,
    pub reduced: Option<Vec<f64>>,
}

fn column_means(m: &crate::store::FeatureMatrix) -> Vec<f64> {
    let mut sums = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        for (s, &x) in sums.iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    let n = m.rows() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

pub fn pool_video(record: &VideoRecord) -> PooledFeature {
    let vbar = column_means(&record.visual);
    let abar = column_means(&record.audio);
    let fbar = vbar.iter().chain(&abar).copied().collect();
    PooledFeature {
        video_id: record.video_id.clone(),
        vbar,
        abar,
        fbar,
        reduced: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerMethod {
    Pca,
    /// Centering followed by keeping the leading coordinates. Used when the
    /// pooled features have no variance at all.
    Identity,
}

/// Affine map `x ↦ (x - mean) · projection` down to `out_dim` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reducer {
    pub method: ReducerMethod,
    pub input_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// `input_dim x out_dim`, row-major, orthonormal columns.
    pub projection: Vec<f64>,
    /// Variance captured by each output direction.
    pub explained_variance: Vec<f64>,
    /// Total variance of the fitted data.
    pub total_variance: f64,
}

impl Reducer {
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "reducer expects {} features, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.out_dim];
        for (i, (&xi, &mu)) in x.iter().zip(&self.mean).enumerate() {
            let c = xi - mu;
            if c == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, p) in out.iter_mut().zip(row) {
                *o += c * p;
            }
        }
        Ok(out)
    }

    /// Column `j` of the projection.
    pub fn direction(&self, j: usize) -> Vec<f64> {
        (0..self.input_dim).map(|i| self.projection[i * self.out_dim + j]).collect()
    }
}

/// Fits a PCA reducer onto the top `out_dim` principal directions.
///
/// Deterministic: no randomness is involved, and each direction is signed so
/// that its largest-magnitude component is positive. Identical inputs give a
/// zero-variance [`ReducerMethod::Identity`] reducer that maps everything to 0.
pub fn fit_reducer(pooled: &[PooledFeature], out_dim: usize) -> Result<Reducer> {
    let n = pooled.len();
    if out_dim == 0 {
        return Err(Error::InvalidInput("reducer output dimension must be positive".into()));
    }
    if n < out_dim + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} videos to reduce to {out_dim} dimensions, got {n}",
            out_dim + 1
        )));
    }
    let dim = pooled[0].fbar.len();
    if pooled.iter().any(|p| p.fbar.len() != dim) {
        return Err(Error::Shape("pooled features have different widths".into()));
    }
    if dim < out_dim {
        return Err(Error::InvalidInput(format!(
            "cannot reduce {dim}-dimensional features to {out_dim} dimensions"
        )));
    }

    let mut mean = vec![0.0; dim];
    for p in pooled {
        for (m, x) in mean.iter_mut().zip(&p.fbar) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| pooled[r].fbar[c] - mean[c]);
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / denom;

    if total_variance == 0.0 {
        let mut projection = vec![0.0; dim * out_dim];
        for j in 0..out_dim {
            projection[j * out_dim + j] = 1.0;
        }
        return Ok(Reducer {
            method: ReducerMethod::Identity,
            input_dim: dim,
            out_dim,
            mean,
            projection,
            explained_variance: vec![0.0; out_dim],
            total_variance,
        });
    }

    // Eigen-decompose whichever of XᵀX (dim x dim) or XXᵀ (n x n) is smaller.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut variances: Vec<f64> = Vec::with_capacity(out_dim);
    if dim <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        for j in descending_order(eig.eigenvalues.as_slice()).into_iter().take(out_dim) {
            directions.push(eig.eigenvectors.column(j).iter().copied().collect());
            variances.push(eig.eigenvalues[j].max(0.0));
        }
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        for j in descending_order(eig.eigenvalues.as_slice()) {
            if directions.len() == out_dim {
                break;
            }
            let lambda = eig.eigenvalues[j];
            if lambda <= top * 1e-12 {
                break;
            }
            // right singular vector: Xᵀu / ‖Xᵀu‖
            let u = eig.eigenvectors.column(j);
            let mut d: Vec<f64> = (0..dim).map(|c| centered.column(c).dot(&u)).collect();
            normalize(&mut d);
            directions.push(d);
            variances.push(lambda / denom);
        }
        complete_basis(&mut directions, dim, out_dim);
        variances.resize(out_dim, 0.0);
    }

    for d in &mut directions {
        orient(d);
    }
    let mut projection = vec![0.0; dim * out_dim];
    for (j, d) in directions.iter().enumerate() {
        for (i, &x) in d.iter().enumerate() {
            projection[i * out_dim + j] = x;
        }
    }
    Ok(Reducer {
        method: ReducerMethod::Pca,
        input_dim: dim,
        out_dim,
        mean,
        projection,
        explained_variance: variances,
        total_variance,
    })
}

/// Indices sorted by descending value; equal values keep index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Largest-magnitude component made positive (first index on ties).
fn orient(d: &mut [f64]) {
    let mut best = 0;
    for (i, x) in d.iter().enumerate() {
        if x.abs() > d[best].abs() {
            best = i;
        }
    }
    if d[best] < 0.0 {
        d.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Extends an orthonormal set to `want` vectors with Gram-Schmidt over the
/// standard basis.
fn complete_basis(dirs: &mut Vec<Vec<f64>>, dim: usize, want: usize) {
    for e in 0..dim {
        if dirs.len() >= want {
            break;
        }
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        for _ in 0..2 {
            for d in dirs.iter() {
                let dot: f64 = d.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(x, di)| *x -= dot * di);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            dirs.push(v);
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `opts.restarts` runs by
/// inertia (earliest restart on ties).
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, opts: KMeansOptions) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k-means needs K >= 2, got {k}")));
    }
    if points.len() < k {
        return Err(Error::InvalidInput(format!(
            "k-means with K = {k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points have different widths".into()));
    }
    let runs: Vec<KMeansFit> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|restart| lloyd(points, k, seed, restart, opts.max_iter))
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against landing on a zero-weight tail through rounding
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, restart: usize, max_iter: usize) -> KMeansFit {
    let mut rng = stage_rng(seed, Stream::KMeans { k, restart });
    let dim = points[0].len();
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (j, _) = nearest(p, &centroids);
            if *l != j {
                *l = j;
                changed = true;
            }
        }
        repair_empty(points, &centroids, &mut labels, k);
        if !changed || iterations == max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|x| x / cnt as f64).collect();
        }
    }
    // centroids are the means of the final assignment
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(&labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
        *c = s.into_iter().map(|x| x / cnt as f64).collect();
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| squared_distance(p, &centroids[l]))
        .sum();
    KMeansFit {
        centroids,
        labels,
        inertia,
        iterations,
    }
}

/// Moves the point farthest from its centroid (among clusters with more than
/// one member) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, (p, &l)) in points.iter().zip(labels.iter()).enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[l]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0, as do points with `a = b = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let slot = |l: usize| ids.binary_search(&l).expect("label present");
    let mut sizes = vec![0usize; ids.len()];
    for &l in labels {
        sizes[slot(l)] += 1;
    }
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = slot(labels[i]);
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; ids.len()];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[slot(labels[j])] += squared_distance(&points[i], p).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..ids.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / points.len() as f64)
}

/// Fitted pseudo-category assignment for a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoCategoryModel {
    #[serde(skip)]
    pub reducer: Option<Reducer>,
    #[serde(rename = "K")]
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub reducer_file: String,
}

impl PseudoCategoryModel {
    pub fn reducer(&self) -> Result<&Reducer> {
        self.reducer
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("pseudo-category model has no reducer loaded".into()))
    }

    /// Nearest-centroid category of a (possibly unseen) video.
    pub fn assign(&self, pooled: &PooledFeature) -> Result<usize> {
        let z = self.reducer()?.transform(&pooled.fbar)?;
        Ok(nearest(&z, &self.centroids).0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let reducer_path = dir.join(&self.reducer_file);
        let text = serde_json::to_string_pretty(self.reducer()?).map_err(|e| Error::json(&reducer_path, e))?;
        fs::write(&reducer_path, text).map_err(|e| Error::io(&reducer_path, e))?;
        let path = dir.join(PSEUDO_CATEGORIES_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PSEUDO_CATEGORIES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut model: Self = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let reducer_path = dir.join(&model.reducer_file);
        let text = fs::read_to_string(&reducer_path).map_err(|e| Error::io(&reducer_path, e))?;
        model.reducer = Some(serde_json::from_str(&text).map_err(|e| Error::json(&reducer_path, e))?);
        Ok(model)
    }
}

/// Reduces the pooled training features, clusters them for every K in
/// `k_range` (inclusive) and keeps the K with the highest silhouette
/// (smallest K on ties).
pub fn select_k(pooled: &[PooledFeature], k_range: (usize, usize), seed: u64) -> Result<PseudoCategoryModel> {
    let (lo, hi) = k_range;
    if lo > hi {
        return Err(Error::InvalidInput(format!("empty K range [{lo}, {hi}]")));
    }
    if lo < 2 {
        return Err(Error::InvalidInput(format!("K range must start at 2 or more, got {lo}")));
    }
    let needed = (hi + 1).max(REDUCED_DIM + 1);
    if pooled.len() < needed {
        return Err(Error::InvalidInput(format!(
            "K range [{lo}, {hi}] needs at least {needed} training videos, got {}",
            pooled.len()
        )));
    }
    let reducer = fit_reducer(pooled, REDUCED_DIM)?;
    let points: Vec<Vec<f64>> = pooled
        .iter()
        .map(|p| reducer.transform(&p.fbar))
        .collect::<Result<_>>()?;

    let fits: Vec<(usize, KMeansFit, f64)> = (lo..=hi)
        .into_par_iter()
        .map(|k| {
            let fit = kmeans_fit(&points, k, seed, KMeansOptions::default())?;
            let sc = silhouette(&points, &fit.labels).unwrap_or(0.0);
            Ok((k, fit, sc))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, (_, _, sc)) in fits.iter().enumerate() {
        if *sc > fits[best].2 {
            best = i;
        }
    }
    let silhouette_by_k = fits.iter().map(|(k, _, sc)| (*k, *sc)).collect();
    let (k, fit, _) = fits.into_iter().nth(best).expect("non-empty range");
    let assignments = pooled
        .iter()
        .zip(&fit.labels)
        .map(|(p, &l)| (p.video_id.clone(), l))
        .collect();
    Ok(PseudoCategoryModel {
        reducer: Some(reducer),
        k,
        centroids: fit.centroids,
        assignments,
        silhouette_by_k,
        reducer_file: REDUCER_FILE.to_string(),
    })
}
