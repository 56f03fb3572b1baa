use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rh_core::ablation::{run_ablation, AblationAxes};
use rh_core::categories::PseudoCategoryModel;
use rh_core::eval::{GtPolicy, REPORT_FILE};
use rh_core::model::{build_model, predict, train, HighlightModel, ModelConfig, Variant};
use rh_core::pipeline::{
    cluster_stage, eval_stage, read_json, read_predictions, round_scores, run_pipeline, training_subset,
    training_targets, write_json, write_predictions, AtStage, PipelineSettings, RunConfig, Stage, StageError,
};
use rh_core::pseudo::{build_pseudo_highlights, top_fraction, PseudoHighlightFile, PseudoOptions, Similarity, TargetSource};
use rh_core::store::{read_dataset, write_dataset};
use rh_core::synth::{generate, SynthConfig};
use rh_core::{Dataset, Error, Split};

#[derive(Parser)]
#[command(name = "rh", version, about = "Unsupervised audio-visual highlight detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset root and list every violation.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Generate a synthetic dataset with planted highlights.
    Synth {
        /// JSON file with synthetic config fields; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit pseudo-categories on the training split.
    Cluster {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory receiving pseudo_categories.json and reducer.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        k_min: usize,
        #[arg(long, default_value_t = 15)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        data_fraction: f64,
    },
    /// Score training clips by cross-video recurrence.
    Pseudo {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `cluster`.
        #[arg(long)]
        categories: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long, default_value = "cosine")]
        metric: Similarity,
        #[arg(long, default_value = "AV-PH")]
        source: TargetSource,
        #[arg(long)]
        exclude_self: bool,
    },
    /// Train the highlight network on pseudo-highlights.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory receiving predictions.json and per-video score files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute mAP, HIT@1 and top-5 mAP of stored predictions.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `predict`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `top-rating`, `top-rating:<x>` or `fraction:<p>`.
        #[arg(long, default_value = "top-rating")]
        gt_policy: GtPolicy,
    },
    /// Run cluster, pseudo, train, predict and eval in one go.
    Pipeline(PipelineArgs),
    /// Sweep setting axes over several seeds.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON object of axes, e.g. {"metric": ["cosine", "pcc"]}.
        #[arg(long)]
        axes: Option<String>,
        /// File holding the axes JSON instead of --axes.
        #[arg(long, conflicts_with = "axes")]
        axes_file: Option<PathBuf>,
        /// Base settings JSON (same shape as a pipeline config, paths ignored).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// File written by `pseudo`. Not needed with --supervised.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Preset learning rate and epochs: tvsum, youtube or qvhighlights.
    #[arg(long, default_value = "tvsum")]
    profile: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-select the top `t` fraction from the stored scores.
    #[arg(long)]
    t: Option<f64>,
    /// Must match the metric the pseudo-highlights were computed with.
    #[arg(long)]
    metric: Option<Similarity>,
    #[arg(long)]
    extra_sa: bool,
    #[arg(long)]
    extra_fc: bool,
    #[arg(long)]
    soft_targets: bool,
    /// Train on binarized ground truth instead of pseudo-highlights.
    #[arg(long)]
    supervised: bool,
    #[arg(long, default_value = "top-rating")]
    gt_policy: GtPolicy,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            code: e.stage.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn load(dataset: &Path) -> Result<Dataset, StageError> {
    read_dataset(dataset).at(Stage::Validate)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("RH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { dataset } => match read_dataset(&dataset) {
            Ok(ds) => {
                println!("ok: {} videos, d_v = {}, d_a = {}", ds.records.len(), ds.d_v, ds.d_a);
                Ok(())
            }
            Err(Error::Validation(violations)) => {
                for v in &violations {
                    println!("{v}");
                }
                Err(Failure {
                    code: 10,
                    message: format!("{} violation(s)", violations.len()),
                })
            }
            Err(e) => Err(StageError {
                stage: Stage::Validate,
                source: e,
            }
            .into()),
        },
        Command::Synth { config, out, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(path) => read_json(&path).map_err(|e| usage(e.to_string()))?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let ds = generate(&cfg).map_err(|e| usage(e.to_string()))?;
            let written = write_dataset(&ds, &out).map_err(|e| usage(e.to_string()))?;
            println!("wrote {} videos ({} files) to {}", ds.records.len(), written.len(), out.display());
            Ok(())
        }
        Command::Cluster {
            dataset,
            out,
            k_min,
            k_max,
            seed,
            data_fraction,
        } => {
            let ds = load(&dataset)?;
            let records = training_subset(&ds, data_fraction, seed).at(Stage::Cluster)?;
            let model = cluster_stage(&records, (k_min, k_max), seed).at(Stage::Cluster)?;
            model.save(&out).at(Stage::Cluster)?;
            println!("K = {} ({} training videos)", model.k, model.assignments.len());
            for (k, sc) in &model.silhouette_by_k {
                println!("  K={k:<3} silhouette {sc:.4}");
            }
            Ok(())
        }
        Command::Pseudo {
            dataset,
            categories,
            out,
            t,
            metric,
            source,
            exclude_self,
        } => {
            let ds = load(&dataset)?;
            let model = PseudoCategoryModel::load(&categories).at(Stage::Pseudo)?;
            let options = PseudoOptions {
                t,
                metric,
                source,
                exclude_self,
            };
            let videos = build_pseudo_highlights(&ds, &model, &options).at(Stage::Pseudo)?;
            let file = PseudoHighlightFile { options, videos };
            file.save(&out).at(Stage::Pseudo)?;
            println!("pseudo-highlights for {} videos written to {}", file.videos.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train_cmd(args),
        Command::Predict {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let ds = load(&dataset)?;
            let model = HighlightModel::load(&checkpoint).at(Stage::Predict)?;
            let records: Vec<_> = ds.split(split).collect();
            let scores = round_scores(predict(&model, &records).at(Stage::Predict)?);
            write_predictions(&out, &scores).at(Stage::Predict)?;
            println!("scored {} {split} videos into {}", scores.len(), out.display());
            Ok(())
        }
        Command::Eval {
            dataset,
            predictions,
            out,
            gt_policy,
        } => {
            let ds = load(&dataset)?;
            let preds = read_predictions(&predictions).at(Stage::Eval)?;
            let report = eval_stage(&ds, &preds, gt_policy).at(Stage::Eval)?;
            let path = out.unwrap_or_else(|| predictions.join(REPORT_FILE));
            write_json(&path, &report).at(Stage::Eval)?;
            println!("{}", report.render());
            Ok(())
        }
        Command::Pipeline(args) => pipeline_cmd(args),
        Command::Ablate {
            dataset,
            axes,
            axes_file,
            config,
            seeds,
            out,
        } => {
            let axes: AblationAxes = match (axes, axes_file) {
                (Some(text), _) => serde_json::from_str(&text).map_err(|e| usage(format!("bad --axes: {e}")))?,
                (None, Some(path)) => read_json(&path).map_err(|e| usage(e.to_string()))?,
                (None, None) => AblationAxes::default(),
            };
            let base: PipelineSettings = match config {
                Some(path) => read_json(&path).map_err(|e| usage(e.to_string()))?,
                None => PipelineSettings::default(),
            };
            let ds = load(&dataset)?;
            let table = run_ablation(&ds, &base, &axes, &seeds)?;
            fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
            write_json(&out.join("ablation.json"), &table).map_err(|e| usage(e.to_string()))?;
            let text = table.render();
            fs::write(out.join("ablation.txt"), &text).map_err(|e| usage(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn train_cmd(args: TrainArgs) -> Result<(), Failure> {
    let mut config = ModelConfig::profile(&args.profile).map_err(|e| usage(e.to_string()))?;
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(d) = args.d_model {
        config.d_model = d;
    }
    config.seed = args.seed;
    config.extra_sa |= args.extra_sa;
    config.extra_fc |= args.extra_fc;
    config.soft_targets = args.soft_targets;

    let ds = load(&args.dataset)?;
    let records: Vec<_> = ds.split(Split::Train).collect();
    let mut pseudo = match &args.pseudo {
        Some(path) => PseudoHighlightFile::load(path).at(Stage::Train)?,
        None if args.supervised => PseudoHighlightFile {
            options: PseudoOptions::default(),
            videos: Default::default(),
        },
        None => return Err(usage("--pseudo is required unless --supervised is given")),
    };
    if let Some(metric) = args.metric {
        if args.pseudo.is_some() && metric != pseudo.options.metric {
            return Err(usage(format!(
                "--metric {metric} but the pseudo-highlights were computed with {}",
                pseudo.options.metric
            )));
        }
    }
    if let Some(t) = args.t {
        for ph in pseudo.videos.values_mut() {
            ph.targets = top_fraction(ph.source_scores(), t).at(Stage::Train)?;
            ph.t = t;
        }
        pseudo.options.t = t;
    }
    // Videos the category model never saw (none, when `pseudo` ran on this dataset) are skipped.
    let records: Vec<_> = if args.supervised {
        records
    } else {
        records.into_iter().filter(|r| pseudo.videos.contains_key(&r.video_id)).collect()
    };
    let settings = PipelineSettings {
        seed: args.seed,
        train: config,
        supervised: args.supervised,
        eval: rh_core::pipeline::EvalSettings {
            gt_policy: args.gt_policy,
        },
        ..Default::default()
    };
    let targets = training_targets(&ds, &records, &pseudo, &settings).at(Stage::Train)?;
    let mut model = build_model(config, ds.d_v, ds.d_a).at(Stage::Train)?;
    let report = train(&mut model, &records, &targets).at(Stage::Train)?;
    model.save(&args.out).at(Stage::Train)?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => {
            let (Some(dataset), Some(out)) = (&args.dataset, &args.out) else {
                return Err(usage("pipeline needs --config or both --dataset and --out"));
            };
            RunConfig {
                dataset: dataset.clone(),
                out: out.clone(),
                settings: PipelineSettings::default(),
            }
        }
    };
    if let Some(d) = args.dataset {
        config.dataset = d;
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    if let Some(s) = args.seed {
        config.settings.seed = s;
    }
    if let Some(v) = args.variant {
        config.settings.train.variant = v;
    }
    if let Some(e) = args.epochs {
        config.settings.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.settings.train.lr = lr;
    }
    let (outcome, artifacts) = run_pipeline(&config)?;
    println!("K = {}", outcome.categories.k);
    println!("{}", outcome.report.render());
    println!("{} artifacts in {}", artifacts.files.len(), config.out.display());
    Ok(())
}
