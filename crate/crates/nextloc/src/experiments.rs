//! Experiment runners: single training runs, baseline and oracle
//! evaluation, and the ablation tables.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use minitensor::{no_grad, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, EncodedSample, Vocabulary};
use crate::markov::MarkovModel;
use crate::metrics::{
    prediction_from_ranking, predictions_from_logits, EvalError, MetricsReport, Prediction,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::synth::BayesOracle;
use crate::train::{eval_batches, train, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("experiment: {0}")]
    Other(String),
}

/// Location and mode predictions of a model over a sample list, in eval
/// mode. With `conditioned` set, the true next mode is fed to the model.
pub fn evaluate_model<E: Scalar>(
    model: &Model<E>,
    samples: &[EncodedSample],
    batch_size: usize,
    conditioned: bool,
) -> Result<(Vec<Prediction>, Vec<Prediction>), ExperimentError> {
    let mut loc_preds = Vec::with_capacity(samples.len());
    let mut mode_preds = Vec::with_capacity(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in eval_batches(samples, batch_size) {
        let out = no_grad(|| {
            if conditioned {
                model.forward_conditioned(&batch, &batch.target_modes, false, &mut rng)
            } else {
                model.forward(&batch, false, &mut rng)
            }
        })?;
        loc_preds.extend(predictions_from_logits(
            &out.loc_logits.to_vec(),
            model.config.num_locations,
            &batch.target_locations,
            &batch.users,
            &batch.target_modes,
        ));
        mode_preds.extend(predictions_from_logits(
            &out.mode_logits.to_vec(),
            model.config.num_modes,
            &batch.target_modes,
            &batch.users,
            &batch.target_modes,
        ));
    }
    Ok((loc_preds, mode_preds))
}

/// Predictions of the Markov baseline: the ranking from each sample's last
/// history location.
pub fn evaluate_markov(model: &MarkovModel, samples: &[EncodedSample]) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| {
            let current = *s.locations.last().expect("non-empty history");
            let ranking = model.predict(s.user, current);
            prediction_from_ranking(&ranking, s.target_location, s.user, s.target_mode)
        })
        .collect()
}

/// Predictions of the Bayes oracle. Samples whose state cannot be resolved
/// (no schedule location anywhere in the window) count as misses.
pub fn evaluate_oracle(oracle: &BayesOracle, samples: &[EncodedSample]) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| match oracle.rank(s) {
            Ok(ranking) => {
                prediction_from_ranking(&ranking, s.target_location, s.user, s.target_mode)
            }
            Err(_) => prediction_from_ranking(&[], s.target_location, s.user, s.target_mode),
        })
        .collect()
}

/// Everything one training run produces.
pub struct RunOutcome {
    pub train_report: TrainReport,
    pub location: MetricsReport,
    pub mode: MetricsReport,
}

/// Train a model with the given configs and evaluate it on the test split.
/// The model seed and all training randomness derive from `train_cfg.seed`.
pub fn run_single<E: Scalar>(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    artifacts_dir: Option<&Path>,
) -> Result<RunOutcome, ExperimentError> {
    let model = Model::<E>::new(model_cfg, train_cfg.seed)?;
    let train_report = train(&model, split, train_cfg, artifacts_dir)?;
    let conditioned = model_cfg.conditioned_on_next_mode;
    let (loc_preds, mode_preds) =
        evaluate_model(&model, &split.test, train_cfg.batch_size, conditioned)?;
    let mut location = MetricsReport::from_predictions(&loc_preds, &vocab.modes, &vocab.users)?;
    let mut mode = MetricsReport::from_predictions(&mode_preds, &vocab.modes, &vocab.users)?;
    let config_echo = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
    });
    for report in [&mut location, &mut mode] {
        report.seed = train_cfg.seed;
        report.config = config_echo.clone();
    }
    Ok(RunOutcome {
        train_report,
        location,
        mode,
    })
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

/// One next-location ablation switch set: temporal features (T), the travel
/// mode feature (F), and the mode prediction loss (L2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocAblationFlags {
    pub temporal: bool,
    pub mode_feature: bool,
    pub mode_loss: bool,
}

/// The seven switch combinations of the location ablation table.
pub const LOCATION_ABLATION_COMBOS: [LocAblationFlags; 7] = [
    LocAblationFlags { temporal: false, mode_feature: false, mode_loss: false },
    LocAblationFlags { temporal: false, mode_feature: false, mode_loss: true },
    LocAblationFlags { temporal: false, mode_feature: true, mode_loss: false },
    LocAblationFlags { temporal: true, mode_feature: false, mode_loss: false },
    LocAblationFlags { temporal: true, mode_feature: false, mode_loss: true },
    LocAblationFlags { temporal: true, mode_feature: true, mode_loss: false },
    LocAblationFlags { temporal: true, mode_feature: true, mode_loss: true },
];

/// Mode-prediction ablation switches: temporal features (T), the location
/// feature (F), and the location prediction loss (L1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeAblationFlags {
    pub temporal: bool,
    pub location_feature: bool,
    pub loc_loss: bool,
}

/// The four rows of the mode ablation table.
pub const MODE_ABLATION_COMBOS: [ModeAblationFlags; 4] = [
    ModeAblationFlags { temporal: false, location_feature: false, loc_loss: false },
    ModeAblationFlags { temporal: true, location_feature: false, loc_loss: false },
    ModeAblationFlags { temporal: true, location_feature: true, loc_loss: false },
    ModeAblationFlags { temporal: true, location_feature: true, loc_loss: true },
];

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// One row of an ablation table: the flags plus per-metric mean/std over
/// seeds, and the per-seed raw reports.
pub struct AblationRow {
    pub label: String,
    pub flags: (bool, bool, bool),
    pub f1: MeanStd,
    pub acc1: MeanStd,
    pub acc5: MeanStd,
    pub acc10: MeanStd,
    pub mrr: MeanStd,
    pub per_seed: Vec<MetricsReport>,
}

fn summarise(label: String, flags: (bool, bool, bool), reports: Vec<MetricsReport>) -> AblationRow {
    let take = |f: fn(&MetricsReport) -> f64| -> MeanStd {
        mean_std(&reports.iter().map(f).collect::<Vec<_>>())
    };
    AblationRow {
        label,
        flags,
        f1: take(|r| r.weighted_f1),
        acc1: take(|r| r.acc1),
        acc5: take(|r| r.acc5),
        acc10: take(|r| r.acc10),
        mrr: take(|r| r.mrr),
        per_seed: reports,
    }
}

/// Run every requested flag combination for every seed and tabulate the
/// next-location metrics.
pub fn run_location_ablation<E: Scalar>(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    combos: &[LocAblationFlags],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>, ExperimentError> {
    let jobs: Vec<(usize, LocAblationFlags, u64)> = combos
        .iter()
        .enumerate()
        .flat_map(|(i, &f)| seeds.iter().map(move |&s| (i, f, s)))
        .collect();
    let outcomes = run_parallel(threads, &jobs, |&(_, flags, seed)| {
        let mut mc = model_cfg.clone();
        mc.use_temporal_features = flags.temporal;
        mc.use_mode_feature = flags.mode_feature;
        let mut tc = train_cfg.clone();
        tc.theta = if flags.mode_loss { train_cfg.theta.max(1.0) } else { 0.0 };
        tc.seed = seed;
        run_single::<E>(split, vocab, &mc, &tc, None).map(|o| o.location)
    })?;
    let mut rows = Vec::new();
    for (i, combo) in combos.iter().enumerate() {
        let reports: Vec<MetricsReport> = jobs
            .iter()
            .zip(outcomes.iter())
            .filter(|((ci, _, _), _)| *ci == i)
            .map(|(_, r)| r.clone())
            .collect();
        let label = format!(
            "T={} F={} L2={}",
            mark(combo.temporal),
            mark(combo.mode_feature),
            mark(combo.mode_loss)
        );
        rows.push(summarise(
            label,
            (combo.temporal, combo.mode_feature, combo.mode_loss),
            reports,
        ));
    }
    Ok(rows)
}

/// The mode-prediction ablation: toggling temporal features, the location
/// feature and the location loss, scored on next-mode metrics.
pub fn run_mode_ablation<E: Scalar>(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    combos: &[ModeAblationFlags],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>, ExperimentError> {
    let jobs: Vec<(usize, ModeAblationFlags, u64)> = combos
        .iter()
        .enumerate()
        .flat_map(|(i, &f)| seeds.iter().map(move |&s| (i, f, s)))
        .collect();
    let outcomes = run_parallel(threads, &jobs, |&(_, flags, seed)| {
        let mut mc = model_cfg.clone();
        mc.use_temporal_features = flags.temporal;
        mc.use_location_feature = flags.location_feature;
        let mut tc = train_cfg.clone();
        tc.loc_loss_weight = if flags.loc_loss { 1.0 } else { 0.0 };
        tc.seed = seed;
        run_single::<E>(split, vocab, &mc, &tc, None).map(|o| o.mode)
    })?;
    let mut rows = Vec::new();
    for (i, combo) in combos.iter().enumerate() {
        let reports: Vec<MetricsReport> = jobs
            .iter()
            .zip(outcomes.iter())
            .filter(|((ci, _, _), _)| *ci == i)
            .map(|(_, r)| r.clone())
            .collect();
        let label = format!(
            "T={} F={} L1={}",
            mark(combo.temporal),
            mark(combo.location_feature),
            mark(combo.loc_loss)
        );
        rows.push(summarise(
            label,
            (combo.temporal, combo.location_feature, combo.loc_loss),
            reports,
        ));
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "y"
    } else {
        "-"
    }
}

/// CSV rendering of an ablation table, one row per flag combination.
pub fn ablation_csv(rows: &[AblationRow], flag_names: (&str, &str, &str)) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{},{},{},f1_mean,f1_std,acc1_mean,acc1_std,acc5_mean,acc5_std,acc10_mean,acc10_std,mrr_mean,mrr_std\n",
        flag_names.0, flag_names.1, flag_names.2
    ));
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            mark(row.flags.0),
            mark(row.flags.1),
            mark(row.flags.2),
            row.f1.mean,
            row.f1.std,
            row.acc1.mean,
            row.acc1.std,
            row.acc5.mean,
            row.acc5.std,
            row.acc10.mean,
            row.acc10.std,
            row.mrr.mean,
            row.mrr.std
        ));
    }
    out
}

/// Run independent jobs on up to `threads` worker threads, preserving the
/// job order in the results. Each job is deterministic on its own, so the
/// outcome does not depend on scheduling.
pub fn run_parallel<J: Sync, R: Send, F>(
    threads: usize,
    jobs: &[J],
    run: F,
) -> Result<Vec<R>, ExperimentError>
where
    F: Fn(&J) -> Result<R, ExperimentError> + Sync,
{
    let threads = threads.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R, ExperimentError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = run(&jobs[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("job ran"))
        .collect()
}

// ---------------------------------------------------------------------------
// full-model gradient check
// ---------------------------------------------------------------------------

/// The tiny configuration used for whole-model gradient checking.
pub fn tiny_grad_check_config(conditioned: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_user: 4,
        num_layers: 1,
        num_heads: 2,
        feedforward: 16,
        fc_dropout: 0.0,
        sublayer_dropout: 0.0,
        num_locations: 5,
        num_users: 3,
        conditioned_on_next_mode: conditioned,
        ..ModelConfig::default()
    }
}

/// Gradient-check the entire model (joint loss included) at the tiny
/// configuration against central finite differences, in double precision.
/// Returns the maximum relative error over every parameter coordinate.
pub fn full_model_grad_check(seed: u64, conditioned: bool) -> Result<f64, ExperimentError> {
    use crate::data::{EncodedSample, Split};
    use crate::train::{joint_loss, Batch};

    let cfg = tiny_grad_check_config(conditioned);
    let model = Model::<f64>::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE);
    let samples: Vec<EncodedSample> = (0..3)
        .map(|i| {
            use rand::Rng;
            let len = rng.gen_range(1..=4usize);
            EncodedSample {
                user: i % 3,
                locations: (0..len).map(|_| rng.gen_range(0..5u32)).collect(),
                time_bins: (0..len).map(|_| rng.gen_range(0..96u8)).collect(),
                weekdays: (0..len).map(|_| rng.gen_range(0..7u8)).collect(),
                modes: (0..len).map(|_| rng.gen_range(0..7u8)).collect(),
                target_location: rng.gen_range(0..5u32),
                target_mode: rng.gen_range(0..7u8),
                target_time: "2023-01-09T08:00:00+00:00".into(),
                split: Split::Train,
            }
        })
        .collect();
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs);
    let params: Vec<minitensor::Tensor<f64>> = model
        .named_parameters()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let err = minitensor::grad_check(
        |_| {
            // dropout is zero and batch-norm runs on batch statistics, so
            // the training-mode forward is a deterministic function of the
            // parameters
            let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
            let out = if conditioned {
                model
                    .forward_conditioned(&batch, &batch.target_modes, true, &mut fwd_rng)
                    .map_err(tensor_err)?
            } else {
                model.forward(&batch, true, &mut fwd_rng).map_err(tensor_err)?
            };
            let (total, _) = joint_loss(
                &out.loc_logits,
                &out.mode_logits,
                &batch.target_locations,
                &batch.target_modes,
                1.0,
                1.0,
            )
            .map_err(|e| minitensor::TensorError::InvalidArgument {
                op: "full_model_grad_check",
                msg: e.to_string(),
            })?;
            Ok(total)
        },
        &params,
        1e-5,
    )
    .map_err(|e| ExperimentError::Other(e.to_string()))?;
    Ok(err)
}

fn tensor_err(e: ModelError) -> minitensor::TensorError {
    minitensor::TensorError::InvalidArgument {
        op: "full_model_grad_check",
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_computation() {
        let ms = mean_std(&[1.0, 2.0, 3.0]);
        assert!((ms.mean - 2.0).abs() < 1e-12);
        assert!((ms.std - 1.0).abs() < 1e-12);
        let single = mean_std(&[4.2]);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn ablation_combo_tables_have_the_published_shape() {
        assert_eq!(LOCATION_ABLATION_COMBOS.len(), 7);
        // exactly one all-on row
        assert_eq!(
            LOCATION_ABLATION_COMBOS
                .iter()
                .filter(|c| c.temporal && c.mode_feature && c.mode_loss)
                .count(),
            1
        );
        assert_eq!(MODE_ABLATION_COMBOS.len(), 4);
    }

    #[test]
    fn parallel_runner_preserves_job_order() {
        let jobs: Vec<usize> = (0..10).collect();
        let out = run_parallel(3, &jobs, |&j| Ok(j * 2)).unwrap();
        assert_eq!(out, (0..10).map(|j| j * 2).collect::<Vec<_>>());
    }

    #[test]
    fn csv_layout_mirrors_the_flag_columns() {
        let row = AblationRow {
            label: "T=y F=y L2=y".into(),
            flags: (true, true, true),
            f1: MeanStd { mean: 50.0, std: 1.0 },
            acc1: MeanStd { mean: 60.0, std: 0.5 },
            acc5: MeanStd { mean: 80.0, std: 0.5 },
            acc10: MeanStd { mean: 85.0, std: 0.5 },
            mrr: MeanStd { mean: 70.0, std: 0.5 },
            per_seed: Vec::new(),
        };
        let csv = ablation_csv(&[row], ("temporal", "mode_feature", "mode_loss"));
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("temporal,mode_feature,mode_loss,f1_mean"));
        assert!(lines.next().unwrap().starts_with("y,y,y,50.0000,1.0000,60.0000"));
    }
}
