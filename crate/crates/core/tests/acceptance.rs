//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p rh-core --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rh_core::categories::{fit_reducer, pool_video, select_k, silhouette, DEFAULT_K_RANGE, REDUCED_DIM};
use rh_core::eval::{average_precision, top5_average_precision};
use rh_core::model::{build_model, ModelConfig, Variant};
use rh_core::nn::{grad_check, GradCheckOptions};
use rh_core::pipeline::{run_in_memory, run_pipeline, sha256_file, Predictor, RunConfig, CHECKPOINT_FILE};
use rh_core::pseudo::{clip_scores, CategoryPool, Similarity, TargetSource};
use rh_core::store::{read_dataset, write_dataset, Modality, Split, VideoRecord};
use rh_core::synth::{generate, SynthConfig};
use rh_core::{Error, PipelineSettings};

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn gradient_configs(d_model: usize) -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        d_model,
        ..Default::default()
    };
    let mut configs: Vec<(String, ModelConfig)> = Variant::ALL
        .iter()
        .map(|&v| (v.to_string(), ModelConfig { variant: v, ..base }))
        .collect();
    configs.push(("AV+extra_sa".into(), ModelConfig { extra_sa: true, ..base }));
    configs
}

/// Every coordinate with all widths at 8. The default width is reported too:
/// there some attention-query gradients are ~1e-8, where central-difference
/// roundoff alone reaches the 1e-4 relative level, so it does not gate.
fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut r = common::rng(100);
    let rec = common::record(&mut r, "g", 5, 8, 8);
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0];
    let check = |cfg: &ModelConfig, per_param| {
        let m = build_model(*cfg, 8, 8).unwrap();
        let opts = GradCheckOptions {
            per_param,
            ..Default::default()
        };
        grad_check(&m.params, opts, |p, tape| m.loss_on(p, tape, &rec, &targets)).unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut parts = Vec::new();
    for (label, cfg) in gradient_configs(8) {
        let rep = check(&cfg, None);
        worst = worst.max(rep.max_rel_error);
        coords += rep.coordinates_checked;
        parts.push(format!("{label} {:.1e}", rep.max_rel_error));
    }
    let elapsed = start.elapsed();
    let wide = gradient_configs(ModelConfig::default().d_model)
        .iter()
        .map(|(_, cfg)| check(cfg, Some(32)).max_rel_error)
        .fold(0.0, f64::max);
    verdict(
        "gradient fidelity",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max rel error {worst:.2e} < 1e-4 over {coords} coordinates ({}), {:.1}s; at d_model {} (sampled): {wide:.1e}",
            parts.join(", "),
            elapsed.as_secs_f64(),
            ModelConfig::default().d_model
        ),
    )
}

fn metric_oracles() -> Verdict {
    let mut r = common::rng(101);
    let mut worst: f64 = 0.0;
    let mut mismatched_none = 0;
    for _ in 0..200 {
        let n = r.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..5u8)) / 5.0).collect();
        let gt: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        for (got, want) in [
            (average_precision(&scores, &gt).unwrap(), common::brute_ap(&scores, &gt, n)),
            (top5_average_precision(&scores, &gt).unwrap(), common::brute_ap(&scores, &gt, 5)),
        ] {
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_none += 1,
            }
        }
    }
    verdict(
        "metric oracles",
        worst <= 1e-12 && mismatched_none == 0,
        format!("200 instances, max |AP - oracle| = {worst:.1e}, undefined-AP mismatches {mismatched_none}"),
    )
}

fn recurrence_oracle() -> Verdict {
    let mut r = common::rng(102);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (d_v, d_a) = (r.random_range(2..10), r.random_range(2..10));
        let mut members = Vec::new();
        let mut total = 0;
        while members.is_empty() || total < 50 && r.random_bool(0.7) {
            let n = r.random_range(1..=(50 - total).min(15));
            members.push(common::record(&mut r, &format!("m{}", members.len()), n, d_v, d_a));
            total += n;
        }
        let refs: Vec<&VideoRecord> = members.iter().collect();
        let pool = CategoryPool::build(0, &refs).unwrap();
        let probe = common::record(&mut r, "p", 7, d_v, d_a);
        for modality in [Modality::Visual, Modality::Audio] {
            for metric in [Similarity::Cosine, Similarity::Pcc] {
                let got = clip_scores(&probe, &pool, modality, metric).unwrap();
                let want = common::brute_scores(&probe, &refs, modality, metric, false);
                worst = worst.max(common::max_abs_diff(&got, &want));
            }
        }
    }

    // f32 storage rounds the rescaled features, so invariance holds to f32 precision
    let mut scale_worst: f64 = 0.0;
    for _ in 0..100 {
        let (d_v, d_a) = (r.random_range(2..10), r.random_range(2..10));
        let members: Vec<VideoRecord> = (0..3).map(|i| common::record(&mut r, &format!("m{i}"), 5, d_v, d_a)).collect();
        let refs: Vec<&VideoRecord> = members.iter().collect();
        let probe = common::record(&mut r, "p", 6, d_v, d_a);
        let mut scaled = probe.clone();
        for i in 0..6 {
            let c: f32 = r.random_range(0.01..100.0);
            scaled.visual.row_mut(i).iter_mut().for_each(|x| *x *= c);
            scaled.audio.row_mut(i).iter_mut().for_each(|x| *x *= c);
        }
        let scaled_members: Vec<VideoRecord> = members
            .iter()
            .map(|m| {
                let mut m = m.clone();
                let c: f32 = r.random_range(0.01..100.0);
                m.visual.data_mut().iter_mut().for_each(|x| *x *= c);
                m
            })
            .collect();
        let scaled_refs: Vec<&VideoRecord> = scaled_members.iter().collect();
        let pool = CategoryPool::build(0, &refs).unwrap();
        let scaled_pool = CategoryPool::build(0, &scaled_refs).unwrap();
        let a = clip_scores(&probe, &pool, Modality::Visual, Similarity::Cosine).unwrap();
        let b = clip_scores(&scaled, &scaled_pool, Modality::Visual, Similarity::Cosine).unwrap();
        scale_worst = scale_worst.max(common::max_abs_diff(&a, &b));
    }
    verdict(
        "recurrence-score oracle",
        worst <= 1e-12 && scale_worst <= 1e-6,
        format!("50 pools, max |score - double loop| = {worst:.1e}; 100 rescalings, max drift {scale_worst:.1e}"),
    )
}

fn clustering_recovery() -> Verdict {
    let mut hits = 0;
    let mut chosen = Vec::new();
    for seed in 0..5 {
        let ds = generate(&SynthConfig { seed, ..Default::default() }).unwrap();
        let pooled: Vec<_> = ds.split(Split::Train).map(pool_video).collect();
        let model = select_k(&pooled, DEFAULT_K_RANGE, seed).unwrap();
        chosen.push(model.k);
        hits += usize::from(model.k == 6);
    }
    let mut wins = 0;
    for seed in 0..10 {
        let ds = generate(&SynthConfig { seed: 50 + seed, ..Default::default() }).unwrap();
        let pooled: Vec<_> = ds.records.iter().map(pool_video).collect();
        let reducer = fit_reducer(&pooled, REDUCED_DIM).unwrap();
        let points: Vec<Vec<f64>> = pooled.iter().map(|p| reducer.transform(&p.fbar).unwrap()).collect();
        let names: Vec<&String> = ds.records.iter().map(|r| &ds.category_labels[&r.video_id]).collect();
        let labels: Vec<usize> = names.iter().map(|n| n[3..].parse().unwrap()).collect();
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut common::rng(seed));
        if silhouette(&points, &labels).unwrap() > silhouette(&points, &shuffled).unwrap() {
            wins += 1;
        }
    }
    verdict(
        "clustering recovery",
        hits >= 4 && wins == 10,
        format!("K=6 chosen in {hits}/5 seeds (chosen {chosen:?}); planted beats shuffled silhouette in {wins}/10"),
    )
}

/// Results of full in-memory runs, keyed by (seed, cell label).
struct Runs {
    results: BTreeMap<(u64, &'static str), f64>,
    hits: BTreeMap<u64, f64>,
}

impl Runs {
    fn run(&mut self, seed: u64, label: &'static str, tweak: impl Fn(&mut PipelineSettings)) -> f64 {
        if let Some(&m) = self.results.get(&(seed, label)) {
            return m;
        }
        let ds = generate(&SynthConfig { seed, ..Default::default() }).unwrap();
        let mut settings = PipelineSettings {
            seed,
            ..Default::default()
        };
        tweak(&mut settings);
        let out = run_in_memory(&ds, &settings).unwrap();
        if label == "baseline" {
            self.hits.insert(seed, out.report.hit_at_1);
        }
        self.results.insert((seed, label), out.report.map);
        out.report.map
    }

    fn mean(&mut self, seeds: &[u64], label: &'static str, tweak: impl Fn(&mut PipelineSettings)) -> f64 {
        seeds.iter().map(|&s| self.run(s, label, &tweak)).sum::<f64>() / seeds.len() as f64
    }
}

fn end_to_end(runs: &mut Runs) -> Verdict {
    let start = Instant::now();
    let seeds = [0, 1, 2];
    let map = runs.mean(&seeds, "baseline", |_| {});
    let hit = seeds.iter().map(|s| runs.hits[s]).sum::<f64>() / 3.0;
    let elapsed = start.elapsed();
    verdict(
        "end-to-end synthetic",
        map >= 0.90 && hit >= 0.90 && elapsed < Duration::from_secs(600),
        format!(
            "mean test mAP {map:.4} >= 0.90, mean HIT@1 {hit:.4} >= 0.90 over 3 seeds, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn modality_targets(runs: &mut Runs) -> Verdict {
    let av = runs.mean(&ABLATION_SEEDS, "baseline", |_| {});
    let a = runs.mean(&ABLATION_SEEDS, "A-PH", |s| s.pseudo.source = TargetSource::Audio);
    let v = runs.mean(&ABLATION_SEEDS, "V-PH", |s| s.pseudo.source = TargetSource::Visual);
    verdict(
        "ablation: fused pseudo-highlight targets",
        av >= a.max(v) - 0.02,
        format!("AV-PH {av:.4} >= max(A-PH {a:.4}, V-PH {v:.4}) - 0.02"),
    )
}

fn network_beats_pseudo_scores(runs: &mut Runs) -> Verdict {
    let net = runs.mean(&ABLATION_SEEDS, "baseline", |_| {});
    let pseudo = runs.mean(&ABLATION_SEEDS, "pseudo-scores", |s| s.predictor = Predictor::PseudoScores);
    verdict(
        "ablation: trained network vs pseudo-scores as prediction",
        net > pseudo,
        format!("network {net:.4} > pseudo-scores {pseudo:.4}"),
    )
}

fn data_fraction(runs: &mut Runs) -> Verdict {
    let quarter = runs.mean(&ABLATION_SEEDS, "fraction 0.25", |s| s.data_fraction = 0.25);
    let half = runs.mean(&ABLATION_SEEDS, "fraction 0.5", |s| s.data_fraction = 0.5);
    let full = runs.mean(&ABLATION_SEEDS, "baseline", |_| {});
    verdict(
        "ablation: training data fraction",
        half >= quarter - 0.05 && full >= half - 0.05,
        format!("25% {quarter:.4}, 50% {half:.4}, 100% {full:.4}, non-decreasing within 0.05"),
    )
}

fn supervised_targets(runs: &mut Runs) -> Verdict {
    let sup = runs.mean(&ABLATION_SEEDS, "supervised", |s| s.supervised = true);
    let pseudo = runs.mean(&ABLATION_SEEDS, "baseline", |_| {});
    verdict(
        "ablation: planted gt targets vs pseudo targets",
        sup >= pseudo,
        format!("supervised {sup:.4} >= pseudo-target {pseudo:.4}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    write_dataset(&generate(&SynthConfig::default()).unwrap(), &root).unwrap();
    let mut seen = Vec::new();
    for run in ["a", "b"] {
        let config = RunConfig {
            dataset: root.clone(),
            out: dir.path().join(run),
            settings: PipelineSettings::default(),
        };
        run_pipeline(&config).unwrap();
        seen.push((
            fs::read(config.out.join("report.json")).unwrap(),
            sha256_file(&config.out.join(CHECKPOINT_FILE)).unwrap(),
        ));
    }
    verdict(
        "determinism",
        seen[0] == seen[1],
        format!(
            "report.json identical: {}, checkpoint sha256 {} vs {}",
            seen[0].0 == seen[1].0,
            &seen[0].1[..12],
            &seen[1].1[..12]
        ),
    )
}

fn format_round_trip() -> Verdict {
    let mut r = common::rng(103);
    let mut exact = 0;
    let mut structured = 0;
    let mut probes = 0;
    let mut bad = Vec::new();
    for i in 0..100 {
        let ds = common::dataset(&mut r, 1 + i % 6);
        let dir = tempfile::tempdir().unwrap();
        let written = write_dataset(&ds, dir.path()).unwrap();
        if read_dataset(dir.path()).map(|b| b == ds).unwrap_or(false) {
            exact += 1;
        }
        let files: Vec<_> = written.iter().filter(|p| p.extension().is_some_and(|e| e == "avhf")).collect();
        let target = files[r.random_range(0..files.len())];
        let original = fs::read(target).unwrap();
        let mut truncated = original.clone();
        truncated.truncate(r.random_range(0..original.len()));
        let mut magic = original.clone();
        magic[r.random_range(0..4)] ^= 0x20;
        for corrupt in [truncated, magic] {
            fs::write(target, &corrupt).unwrap();
            probes += 1;
            match catch_unwind(AssertUnwindSafe(|| read_dataset(dir.path()))) {
                Ok(Err(Error::Format { .. })) => structured += 1,
                Ok(Ok(_)) => bad.push(format!("dataset {i}: accepted")),
                Ok(Err(e)) => bad.push(format!("dataset {i}: unexpected {e}")),
                Err(_) => bad.push(format!("dataset {i}: panic")),
            }
        }
    }
    verdict(
        "format round trip and corruption",
        exact == 100 && structured == probes,
        format!("{exact}/100 bit-exact round trips; {structured}/{probes} corruptions gave format errors {bad:?}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut runs = Runs {
        results: BTreeMap::new(),
        hits: BTreeMap::new(),
    };
    let checks: Vec<Box<dyn FnOnce(&mut Runs) -> Verdict>> = vec![
        Box::new(|_| gradient_fidelity()),
        Box::new(|_| metric_oracles()),
        Box::new(|_| recurrence_oracle()),
        Box::new(|_| clustering_recovery()),
        Box::new(end_to_end),
        Box::new(modality_targets),
        Box::new(network_beats_pseudo_scores),
        Box::new(data_fraction),
        Box::new(supervised_targets),
        Box::new(|_| determinism()),
        Box::new(|_| format_round_trip()),
    ];
    let mut failed = 0;
    for check in checks {
        let v = check(&mut runs);
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} failed, total {:.0}s",
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
