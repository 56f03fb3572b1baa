//! Implementation results checked against independent brute-force versions.

mod common;

use common::{brute_ap, brute_scores, max_abs_diff, naive_matmul, rank_of, record, rng};
use rand::Rng;
use rh_core::categories::{fit_reducer, pool_video, PooledFeature};
use rh_core::eval::{average_precision, hit_at_1, top5_average_precision};
use rh_core::nn::{attention, ParamSet, Tape, Tensor2};
use rh_core::pseudo::{clip_scores, clip_scores_with, CategoryPool, Similarity};
use rh_core::store::{Modality, VideoRecord};

fn tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_family_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..40 {
        let (n, k, m) = (r.random_range(1..70), r.random_range(1..70), r.random_range(1..70));
        let a = tensor(&mut r, n, k);
        let b = tensor(&mut r, k, m);
        let expected = naive_matmul(a.data(), b.data(), n, k, m);
        assert!(max_abs_diff(a.matmul(&b).unwrap().data(), &expected) < 1e-12);
        let bt = b.transpose();
        assert!(max_abs_diff(a.matmul_t(&bt).unwrap().data(), &expected) < 1e-12);
        let at = a.transpose();
        assert!(max_abs_diff(at.t_matmul(&b).unwrap().data(), &expected) < 1e-12);
    }
}

/// Attention written out one query row at a time.
fn attention_by_rows(xq: &Tensor2, xc: &Tensor2, wq: &Tensor2, wk: &Tensor2, wv: &Tensor2, wo: &Tensor2) -> Vec<f64> {
    let d = wq.cols();
    let proj = |x: &[f64], w: &Tensor2| -> Vec<f64> {
        (0..w.cols()).map(|j| x.iter().enumerate().map(|(l, xl)| xl * w.get(l, j)).sum()).collect()
    };
    let keys: Vec<Vec<f64>> = (0..xc.rows()).map(|k| proj(xc.row(k), wk)).collect();
    let values: Vec<Vec<f64>> = (0..xc.rows()).map(|k| proj(xc.row(k), wv)).collect();
    let mut out = Vec::new();
    for i in 0..xq.rows() {
        let q = proj(xq.row(i), wq);
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut mixed = vec![0.0; d];
        for (w, v) in e.iter().zip(&values) {
            for (m, vj) in mixed.iter_mut().zip(v) {
                *m += w / z * vj;
            }
        }
        let o = proj(&mixed, wo);
        out.extend(o.iter().zip(xq.row(i)).map(|(a, b)| a + b));
    }
    out
}

#[test]
fn attention_matches_row_by_row_oracle() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (nq, nc, dq, dc, d) = (
            r.random_range(1..9),
            r.random_range(1..9),
            r.random_range(1..7),
            r.random_range(1..7),
            r.random_range(1..6),
        );
        let xq = tensor(&mut r, nq, dq);
        let xc = tensor(&mut r, nc, dc);
        let (wq, wk, wv, wo) = (tensor(&mut r, dq, d), tensor(&mut r, dc, d), tensor(&mut r, dc, d), tensor(&mut r, d, dq));
        let mut p = ParamSet::new();
        p.insert("att.w_query", wq.clone()).unwrap();
        p.insert("att.w_key", wk.clone()).unwrap();
        p.insert("att.w_value", wv.clone()).unwrap();
        p.insert("att.w_out", wo.clone()).unwrap();
        let got = attention(&xq, &xc, &p, "att").unwrap();
        let expected = attention_by_rows(&xq, &xc, &wq, &wk, &wv, &wo);
        assert!(max_abs_diff(got.data(), &expected) < 1e-12);
    }
}

#[test]
fn attention_rows_are_convex_mixtures_under_huge_logits() {
    let mut r = rng(3);
    let xq = tensor(&mut r, 4, 3).map(|x| x * 1e3);
    let mut p = ParamSet::new();
    for name in ["w_query", "w_key", "w_value"] {
        p.insert(format!("a.{name}"), Tensor2::identity(3)).unwrap();
    }
    p.insert("a.w_out", Tensor2::identity(3)).unwrap();
    let out = attention(&xq, &xq, &p, "a").unwrap();
    assert!(out.is_finite());
}

/// Sigmoid output layer with mean BCE: the logit gradient is (σ(z) − y)/n,
/// so dW = Xᵀ·that and db is its column sum.
#[test]
fn linear_sigmoid_bce_gradient_matches_hand_derivation() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (n, d) = (r.random_range(1..12), r.random_range(1..6));
        let x = tensor(&mut r, n, d);
        let w = tensor(&mut r, d, 1);
        let b = tensor(&mut r, 1, 1);
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect();
        let mut p = ParamSet::new();
        p.insert("out.weight", w.clone()).unwrap();
        p.insert("out.bias", b.clone()).unwrap();

        for fused in [false, true] {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone()).unwrap();
            let z = rh_core::nn::linear_on(&mut tape, &p, "out", xi).unwrap();
            let targets = Tensor2::new(n, 1, y.clone()).unwrap();
            let loss = if fused {
                tape.sigmoid_bce(z, &targets).unwrap()
            } else {
                let s = tape.sigmoid(z).unwrap();
                tape.bce(s, &targets).unwrap()
            };
            let grads = tape.backward(loss).unwrap();

            let dz: Vec<f64> = (0..n)
                .map(|i| {
                    let zi: f64 = (0..d).map(|j| x.get(i, j) * w.get(j, 0)).sum::<f64>() + b.get(0, 0);
                    (1.0 / (1.0 + (-zi).exp()) - y[i]) / n as f64
                })
                .collect();
            let dw: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j) * dz[i]).sum()).collect();
            let db: f64 = dz.iter().sum();
            assert!(max_abs_diff(grads["out.weight"].data(), &dw) < 1e-12, "fused={fused}");
            assert!((grads["out.bias"].get(0, 0) - db).abs() < 1e-12, "fused={fused}");

            let loss_value = tape.value(loss).get(0, 0);
            let expected: f64 = (0..n)
                .map(|i| {
                    let zi: f64 = (0..d).map(|j| x.get(i, j) * w.get(j, 0)).sum::<f64>() + b.get(0, 0);
                    let s = 1.0 / (1.0 + (-zi).exp());
                    -(y[i] * s.ln() + (1.0 - y[i]) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / n as f64;
            assert!((loss_value - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_is_the_clip_mean() {
    let mut r = rng(5);
    let rec = record(&mut r, "v", 7, 3, 2);
    let p = pool_video(&rec);
    for j in 0..3 {
        let mean = (0..7).map(|i| f64::from(rec.visual.row(i)[j])).sum::<f64>() / 7.0;
        assert!((p.vbar[j] - mean).abs() < 1e-15);
    }
    for j in 0..2 {
        let mean = (0..7).map(|i| f64::from(rec.audio.row(i)[j])).sum::<f64>() / 7.0;
        assert!((p.abar[j] - mean).abs() < 1e-15);
    }
    assert_eq!(p.fbar, [p.vbar.clone(), p.abar.clone()].concat());
}

/// Columns 1..=dim of a Sylvester-Hadamard matrix are centered and mutually
/// orthogonal, so scaling them gives data whose covariance is diagonal with
/// known entries.
fn hadamard(order: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < order {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

fn pooled_from_points(points: &[Vec<f64>]) -> Vec<PooledFeature> {
    points
        .iter()
        .enumerate()
        .map(|(i, x)| PooledFeature {
            video_id: format!("v{i}"),
            vbar: x.clone(),
            abar: Vec::new(),
            fbar: x.clone(),
            reduced: None,
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

#[test]
fn pca_recovers_a_planted_spectrum() {
    let n = 32;
    let dim = 14;
    let h = hadamard(n);
    let scales: Vec<f64> = (0..dim).map(|j| 1.0 + ((j * 7) % dim) as f64 * 0.5).collect();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..dim).map(|j| 3.0 + scales[j] * h[i][j + 1]).collect())
        .collect();
    let mut expected: Vec<(f64, usize)> = scales
        .iter()
        .enumerate()
        .map(|(j, s)| (s * s * n as f64 / (n - 1) as f64, j))
        .collect();
    expected.sort_by(|a, b| b.0.total_cmp(&a.0));

    let red = fit_reducer(&pooled_from_points(&points), 10).unwrap();
    for (k, &(var, axis)) in expected.iter().take(10).enumerate() {
        assert!((red.explained_variance[k] - var).abs() < 1e-9, "component {k}");
        let dir = red.direction(k);
        for (i, c) in dir.iter().enumerate() {
            let want = if i == axis { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-9, "component {k} coordinate {i}");
        }
    }
    let total: f64 = expected.iter().map(|e| e.0).sum();
    assert!((red.total_variance - total).abs() < 1e-9);

    // a rotation changes the directions but not the spectrum
    let mut r = rng(6);
    let rot = random_rotation(&mut r, dim);
    let rotated: Vec<Vec<f64>> = points
        .iter()
        .map(|x| (0..dim).map(|i| (0..dim).map(|j| rot[i][j] * x[j]).sum()).collect())
        .collect();
    let red2 = fit_reducer(&pooled_from_points(&rotated), 10).unwrap();
    for k in 0..10 {
        assert!((red2.explained_variance[k] - expected[k].0).abs() < 1e-9);
        let dir = red2.direction(k);
        let big = dir.iter().cloned().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        assert!(big > 0.0, "sign convention");
    }
}

#[test]
fn clip_scores_match_double_loop() {
    let mut r = rng(7);
    for case in 0..50 {
        let (d_v, d_a) = (r.random_range(2..8), r.random_range(2..8));
        let n_members = r.random_range(2..5);
        let mut members: Vec<VideoRecord> = (0..n_members)
            .map(|m| {
                let n = r.random_range(1..12);
                record(&mut r, &format!("m{m}"), n, d_v, d_a)
            })
            .collect();
        if case % 5 == 0 {
            members[0].visual.row_mut(0).fill(0.0);
        }
        let refs: Vec<&VideoRecord> = members.iter().collect();
        let pool = CategoryPool::build(0, &refs).unwrap();
        assert!(pool.len() <= 50);
        let outsider = record(&mut r, "x", 6, d_v, d_a);
        for modality in [Modality::Visual, Modality::Audio] {
            for metric in [Similarity::Cosine, Similarity::Pcc] {
                let got = clip_scores(&outsider, &pool, modality, metric).unwrap();
                assert!(max_abs_diff(&got, &brute_scores(&outsider, &refs, modality, metric, false)) < 1e-12);
                let member = refs[0];
                let got = clip_scores_with(member, &pool, modality, metric, true).unwrap();
                assert!(max_abs_diff(&got, &brute_scores(member, &refs, modality, metric, true)) < 1e-12);
            }
        }
    }
}

fn random_instance(r: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(1..=10);
    // few distinct levels, so ties are common
    let scores = (0..n).map(|_| f64::from(r.random_range(0..4u8)) / 4.0).collect();
    let gt = (0..n).map(|_| r.random_bool(0.4)).collect();
    (scores, gt)
}

#[test]
fn metrics_match_definition_level_oracles() {
    let mut r = rng(8);
    for _ in 0..500 {
        let (scores, gt) = random_instance(&mut r);
        let n = scores.len();
        let ap = average_precision(&scores, &gt).unwrap();
        let want = brute_ap(&scores, &gt, n);
        match (ap, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
        let t5 = top5_average_precision(&scores, &gt).unwrap();
        match (t5, brute_ap(&scores, &gt, 5)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
        let best = (0..n).find(|&i| rank_of(&scores, i) == 0).unwrap();
        assert_eq!(hit_at_1(&scores, &gt).unwrap(), if gt[best] { 1.0 } else { 0.0 });
    }
}

/// AP of a uniformly random ranking has mean (H_n + (P−1)/(n−1)·(n − H_n)) / n.
#[test]
fn random_ranking_ap_matches_closed_form() {
    let mut r = rng(9);
    for &(n, p) in &[(10usize, 3usize), (25, 5), (8, 8), (12, 1)] {
        let gt: Vec<bool> = (0..n).map(|i| i < p).collect();
        let trials = 20_000;
        let samples: Vec<f64> = (0..trials)
            .map(|_| {
                let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
                average_precision(&scores, &gt).unwrap().unwrap()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let ratio = if n > 1 { (p - 1) as f64 / (n - 1) as f64 } else { 0.0 };
        let expected = (h + ratio * (n as f64 - h)) / n as f64;
        let se = (var / trials as f64).sqrt();
        assert!((mean - expected).abs() <= 4.0 * se + 1e-12, "n={n} p={p}: {mean} vs {expected}");
    }
}
