//! Command-line entry point wiring all modules into reproducible pipelines.
//!
//! Every run writes its fully-resolved configuration, seed, version and
//! input checksums next to its outputs, so any artifact directory can be
//! reproduced bit-identically.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{
    preprocess, read_sequences_jsonl, read_staypoints_csv, read_triplegs_csv, read_vocab_json,
    write_sequences_jsonl, write_vocab_json, DataError, DatasetSplit, EncodedSample,
    PreprocessConfig, Split, Vocabulary,
};
use crate::experiments::{
    evaluate_markov, evaluate_model, full_model_grad_check, run_location_ablation,
    run_mode_ablation, run_single, ablation_csv, ExperimentError, LOCATION_ABLATION_COMBOS,
    MODE_ABLATION_COMBOS,
};
use crate::markov::MarkovModel;
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, ModelError};
use crate::synth::{generate, World, WorldConfig, WorldError};
use crate::train::{Precision, TrainConfig, TrainError};

/// Process exit codes: 0 success, 1 usage error, 2 data error, 3 training
/// divergence.
pub mod exit_codes {
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit_codes::USAGE,
            CliError::Data(_) => exit_codes::DATA,
            CliError::Divergence(_) => exit_codes::DIVERGENCE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Invalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainError::BadBatchSize(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// The run configuration file: seed plus the three config sections. Command
/// line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PreprocessConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nextloc",
    version,
    about = "Next location prediction: preprocessing, training, baselines, evaluation"
)]
pub struct Cli {
    /// Run configuration TOML; omitted fields take the shipped defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic mobility dataset (staypoints.csv, triplegs.csv).
    Synth {
        /// World description TOML; omitted fields take the defaults.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
    },
    /// Turn staypoint/tripleg CSVs into sequences.jsonl and vocab.json.
    Preprocess {
        #[arg(long)]
        staypoints: PathBuf,
        #[arg(long)]
        triplegs: PathBuf,
    },
    /// Train the model; writes best.ckpt and train_log.jsonl.
    Train {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Mode-loss weight override (ablations).
        #[arg(long)]
        theta: Option<f64>,
        /// Train the next-mode-conditioned variant.
        #[arg(long)]
        conditioned: bool,
    },
    /// Evaluate a checkpoint on one split; writes report.json and report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Fit and evaluate the first-order mobility Markov chain baseline.
    Baseline {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Train and evaluate every ablation flag combination.
    Ablate {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Which table to produce: "loc" (T/F/L2 on next location) or
        /// "mode" (T/F/L1 on next mode).
        #[arg(long, default_value = "loc")]
        task: String,
        /// Number of seeds per combination.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Worker threads.
        #[arg(long, default_value_t = 2)]
        threads: usize,
    },
    /// Compare the model against its true-next-mode-conditioned variant.
    Condition {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        threads: usize,
    },
    /// Gradient-check every tensor op and the full model at a tiny config.
    Gradcheck {
        /// Random cases per op.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct RunMeta {
    command: String,
    seed: u64,
    version: String,
    inputs: Vec<InputChecksum>,
}

#[derive(Serialize)]
struct InputChecksum {
    path: String,
    sha256: String,
}

/// Write `run_meta.json` and `resolved_config.toml` into the artifact
/// directory.
fn write_run_meta(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &RunConfig,
    inputs: &[&Path],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let meta = RunMeta {
        command: command.to_string(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(InputChecksum {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?,
    };
    let meta_path = dir.join("run_meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serialises") + "\n",
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    let cfg_path = dir.join("resolved_config.toml");
    std::fs::write(
        &cfg_path,
        toml::to_string_pretty(config).expect("config serialises"),
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;
    Ok(())
}

fn load_dataset(
    sequences: &Path,
    vocab: &Path,
) -> Result<(Vec<EncodedSample>, Vocabulary, DatasetSplit), CliError> {
    let samples = read_sequences_jsonl(sequences)?;
    let vocab = read_vocab_json(vocab)?;
    let split = DatasetSplit::from_encoded(&samples, &vocab);
    Ok((samples, vocab, split))
}

fn resolve_model_config(base: &ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig, CliError> {
    let mut cfg = base.clone();
    cfg.num_locations = vocab.num_locations();
    cfg.num_users = vocab.num_users();
    cfg.num_modes = vocab.num_modes();
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<(), CliError> {
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(report).expect("report serialises") + "\n",
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", json_path.display())))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv = format!(
        "acc1,acc5,acc10,weighted_f1,mrr,samples\n{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
        report.acc1, report.acc5, report.acc10, report.weighted_f1, report.mrr, report.samples
    );
    std::fs::write(&csv_path, csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    Ok(())
}

fn print_report(name: &str, r: &MetricsReport) {
    println!(
        "{name}: acc@1 {:.2}  acc@5 {:.2}  acc@10 {:.2}  f1 {:.2}  mrr {:.2}  ({} samples)",
        r.acc1, r.acc5, r.acc10, r.weighted_f1, r.mrr, r.samples
    );
}

/// Run one parsed command line. Returns the artifact directory.
pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.train.seed = config.seed;
    let out = cli.out.clone();
    match cli.command {
        Command::Synth { world, users, days } => {
            let mut wc = match &world {
                Some(p) => WorldConfig::from_toml_file(p)?,
                None => WorldConfig::default(),
            };
            if let Some(u) = users {
                wc.users = u;
            }
            if let Some(d) = days {
                wc.days = d;
            }
            if cli.seed.is_some() {
                wc.seed = config.seed;
            }
            let built = World::build(&wc)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
            let sp = out.join("staypoints.csv");
            let tl = out.join("triplegs.csv");
            let summary = generate(&built, &sp, &tl)?;
            let inputs: Vec<&Path> = world.iter().map(|p| p.as_path()).collect();
            write_run_meta(&out, "synth", wc.seed, &config, &inputs)?;
            let world_echo = out.join("world.toml");
            std::fs::write(
                &world_echo,
                toml::to_string_pretty(&wc).expect("world config serialises"),
            )
            .map_err(|e| CliError::Data(format!("{}: {e}", world_echo.display())))?;
            println!(
                "generated {} users, {} visits -> {} staypoints, {} triplegs",
                summary.users, summary.visits, summary.staypoints, summary.triplegs
            );
        }
        Command::Preprocess { staypoints, triplegs } => {
            let sps = read_staypoints_csv(&staypoints)?;
            let tls = read_triplegs_csv(&triplegs)?;
            let output = preprocess(&sps, &tls, &config.data)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
            write_sequences_jsonl(&out.join("sequences.jsonl"), &output.samples)?;
            write_vocab_json(&out.join("vocab.json"), &output.vocab)?;
            write_run_meta(
                &out,
                "preprocess",
                config.seed,
                &config,
                &[&staypoints, &triplegs],
            )?;
            let count = |s: Split| output.samples.iter().filter(|x| x.split == s).count();
            println!(
                "{} users, {} locations, {} samples (train {} / val {} / test {})",
                output.vocab.num_users(),
                output.vocab.num_locations(),
                output.samples.len(),
                count(Split::Train),
                count(Split::Validation),
                count(Split::Test),
            );
        }
        Command::Train {
            sequences,
            vocab,
            theta,
            conditioned,
        } => {
            let (_, vocabulary, split) = load_dataset(&sequences, &vocab)?;
            let mut model_cfg = resolve_model_config(&config.model, &vocabulary)?;
            model_cfg.conditioned_on_next_mode = conditioned;
            if let Some(theta) = theta {
                config.train.theta = theta;
            }
            config.model = model_cfg.clone();
            write_run_meta(&out, "train", config.seed, &config, &[&sequences, &vocab])?;
            let report = match config.train.precision {
                Precision::F32 => {
                    train_and_report::<f32>(&split, &model_cfg, &config.train, &out)?
                }
                Precision::F64 => {
                    train_and_report::<f64>(&split, &model_cfg, &config.train, &out)?
                }
            };
            println!(
                "trained {} epochs, best epoch {} (val loss {:.4}), {:.1}s -> {}",
                report.0,
                report.1,
                report.2,
                report.3,
                out.join("best.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint: ckpt,
            sequences,
            vocab,
            split: which,
        } => {
            let (_, vocabulary, split) = load_dataset(&sequences, &vocab)?;
            let samples = match which.as_str() {
                "train" => &split.train,
                "validation" => &split.validation,
                "test" => &split.test,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown split {other:?}; expected train, validation or test"
                    )))
                }
            };
            write_run_meta(&out, "eval", config.seed, &config, &[&ckpt, &sequences, &vocab])?;
            let (loc, mode) = match checkpoint::stored_precision(&ckpt)? {
                Precision::F32 => eval_checkpoint::<f32>(&ckpt, samples, &vocabulary, &config)?,
                Precision::F64 => eval_checkpoint::<f64>(&ckpt, samples, &vocabulary, &config)?,
            };
            write_report(&out, "report", &loc)?;
            write_report(&out, "mode_report", &mode)?;
            print_report("location", &loc);
            print_report("mode", &mode);
        }
        Command::Baseline { sequences, vocab } => {
            let (_, vocabulary, split) = load_dataset(&sequences, &vocab)?;
            write_run_meta(&out, "baseline", config.seed, &config, &[&sequences, &vocab])?;
            let markov = MarkovModel::fit(&split.train);
            let preds = evaluate_markov(&markov, &split.test);
            let mut report =
                MetricsReport::from_predictions(&preds, &vocabulary.modes, &vocabulary.users)
                    .map_err(|e| CliError::Data(e.to_string()))?;
            report.seed = config.seed;
            report.config = serde_json::json!({"method": "1-MMC"});
            write_report(&out, "report", &report)?;
            print_report("1-MMC", &report);
        }
        Command::Ablate {
            sequences,
            vocab,
            task,
            seeds,
            threads,
        } => {
            let (_, vocabulary, split) = load_dataset(&sequences, &vocab)?;
            let model_cfg = resolve_model_config(&config.model, &vocabulary)?;
            write_run_meta(&out, "ablate", config.seed, &config, &[&sequences, &vocab])?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| config.seed.wrapping_add(i)).collect();
            let csv = match (task.as_str(), config.train.precision) {
                ("loc", Precision::F32) => ablate_loc::<f32>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
                ("loc", Precision::F64) => ablate_loc::<f64>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
                ("mode", Precision::F32) => ablate_mode::<f32>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
                ("mode", Precision::F64) => ablate_mode::<f64>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
                (other, _) => {
                    return Err(CliError::Usage(format!(
                        "unknown ablation task {other:?}; expected loc or mode"
                    )))
                }
            };
            let path = out.join("ablation.csv");
            std::fs::write(&path, &csv)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            print!("{csv}");
        }
        Command::Condition {
            sequences,
            vocab,
            seeds,
            threads,
        } => {
            let (_, vocabulary, split) = load_dataset(&sequences, &vocab)?;
            let model_cfg = resolve_model_config(&config.model, &vocabulary)?;
            write_run_meta(&out, "condition", config.seed, &config, &[&sequences, &vocab])?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| config.seed.wrapping_add(i)).collect();
            let csv = match config.train.precision {
                Precision::F32 => condition::<f32>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
                Precision::F64 => condition::<f64>(&split, &vocabulary, &model_cfg, &config.train, &seed_list, threads)?,
            };
            let path = out.join("condition.csv");
            std::fs::write(&path, &csv)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            print!("{csv}");
        }
        Command::Gradcheck { cases } => {
            let results = minitensor::check_suite::check_all_ops(cases, config.seed)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("op {:<18} max relative error {:.3e}", r.op, r.max_error);
                worst = worst.max(r.max_error);
            }
            for conditioned in [false, true] {
                let err = full_model_grad_check(config.seed, conditioned)?;
                println!(
                    "full model ({}) max relative error {:.3e}",
                    if conditioned { "conditioned" } else { "default" },
                    err
                );
                worst = worst.max(err);
            }
            if worst >= 1e-4 {
                return Err(CliError::Data(format!(
                    "gradient check failed: worst relative error {worst:.3e}"
                )));
            }
            println!("all gradient checks below 1e-4");
        }
    }
    Ok(out)
}

fn train_and_report<E: minitensor::Scalar>(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
) -> Result<(usize, usize, f64, f64), CliError> {
    let model = Model::<E>::new(model_cfg, train_cfg.seed)?;
    let report = crate::train::train(&model, split, train_cfg, Some(out))?;
    Ok((
        report.epochs.len(),
        report.best_epoch,
        report.best_val_loss,
        report.wall_time_s,
    ))
}

fn eval_checkpoint<E: minitensor::Scalar>(
    ckpt: &Path,
    samples: &[EncodedSample],
    vocabulary: &Vocabulary,
    config: &RunConfig,
) -> Result<(MetricsReport, MetricsReport), CliError> {
    let model = checkpoint::load::<E>(ckpt)?;
    let conditioned = model.config.conditioned_on_next_mode;
    let (loc_preds, mode_preds) =
        evaluate_model(&model, samples, config.train.batch_size, conditioned)?;
    let mut loc =
        MetricsReport::from_predictions(&loc_preds, &vocabulary.modes, &vocabulary.users)
            .map_err(|e| CliError::Data(e.to_string()))?;
    let mut mode =
        MetricsReport::from_predictions(&mode_preds, &vocabulary.modes, &vocabulary.users)
            .map_err(|e| CliError::Data(e.to_string()))?;
    let echo = serde_json::json!({"model": model.config, "train": config.train});
    for r in [&mut loc, &mut mode] {
        r.seed = config.seed;
        r.config = echo.clone();
    }
    Ok((loc, mode))
}

fn ablate_loc<E: minitensor::Scalar>(
    split: &DatasetSplit,
    vocabulary: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<String, CliError> {
    let rows = run_location_ablation::<E>(
        split,
        vocabulary,
        model_cfg,
        train_cfg,
        &LOCATION_ABLATION_COMBOS,
        seeds,
        threads,
    )?;
    Ok(ablation_csv(&rows, ("temporal", "mode_feature", "mode_loss")))
}

fn ablate_mode<E: minitensor::Scalar>(
    split: &DatasetSplit,
    vocabulary: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<String, CliError> {
    let rows = run_mode_ablation::<E>(
        split,
        vocabulary,
        model_cfg,
        train_cfg,
        &MODE_ABLATION_COMBOS,
        seeds,
        threads,
    )?;
    Ok(ablation_csv(&rows, ("temporal", "location_feature", "loc_loss")))
}

fn condition<E: minitensor::Scalar>(
    split: &DatasetSplit,
    vocabulary: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<String, CliError> {
    let jobs: Vec<(bool, u64)> = [false, true]
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes = crate::experiments::run_parallel(threads, &jobs, |&(conditioned, seed)| {
        let mut mc = model_cfg.clone();
        mc.conditioned_on_next_mode = conditioned;
        let mut tc = train_cfg.clone();
        tc.seed = seed;
        run_single::<E>(split, vocabulary, &mc, &tc, None).map(|o| o.location)
    })?;
    let mut csv = String::from("variant,seed,f1,acc1,acc5,acc10,mrr\n");
    for ((conditioned, seed), report) in jobs.iter().zip(&outcomes) {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            if *conditioned { "conditioned" } else { "original" },
            seed,
            report.weighted_f1,
            report.acc1,
            report.acc5,
            report.acc10,
            report.mrr
        ));
    }
    Ok(csv)
}
