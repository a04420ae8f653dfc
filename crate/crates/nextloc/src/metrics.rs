//! Evaluation metrics: Acc@k, mean reciprocal rank, support-weighted F1, and
//! the per-mode / per-user breakdowns.
//!
//! Rankings break logit ties by ascending class id, so every metric is a
//! pure function of the logits.

use std::collections::BTreeMap;

use minitensor::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no samples")]
    NoSamples,
    #[error("k must be at least 1, got {0}")]
    BadK(usize),
}

/// Everything the metrics need to know about one evaluated sample.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub user: u32,
    pub target: u32,
    /// 1-based rank of the target in the prediction ranking; 0 when the
    /// target does not appear at all (a miss at every k).
    pub rank: usize,
    pub top1: u32,
    /// Ground-truth next travel mode, for the per-mode breakdown.
    pub next_mode: u8,
}

/// Index of the largest value, ties to the smallest index.
pub fn top1_index<E: Scalar>(row: &[E]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `target` under descending score with ascending-id
/// tie-break.
pub fn rank_of_target<E: Scalar>(row: &[E], target: usize) -> usize {
    let t = row[target];
    let mut rank = 1usize;
    for (i, v) in row.iter().enumerate() {
        if *v > t || (*v == t && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Build predictions from a dense logits matrix.
pub fn predictions_from_logits<E: Scalar>(
    logits: &[E],
    classes: usize,
    targets: &[u32],
    users: &[u32],
    next_modes: &[u32],
) -> Vec<Prediction> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let row = &logits[i * classes..(i + 1) * classes];
            Prediction {
                user: users[i],
                target,
                rank: rank_of_target(row, target as usize),
                top1: top1_index(row) as u32,
                next_mode: next_modes[i] as u8,
            }
        })
        .collect()
}

/// Build a prediction from an explicit ranking (baselines and oracles). A
/// target absent from the ranking gets rank 0.
pub fn prediction_from_ranking(
    ranking: &[u32],
    target: u32,
    user: u32,
    next_mode: u8,
) -> Prediction {
    let rank = ranking
        .iter()
        .position(|&c| c == target)
        .map(|p| p + 1)
        .unwrap_or(0);
    let top1 = ranking.first().copied().unwrap_or(u32::MAX);
    Prediction {
        user,
        target,
        rank,
        top1,
        next_mode,
    }
}

/// Share of samples whose target sits in the first k ranks, in percent.
pub fn acc_at_k(predictions: &[Prediction], k: usize) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::BadK(k));
    }
    if predictions.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let hits = predictions
        .iter()
        .filter(|p| p.rank >= 1 && p.rank <= k)
        .count();
    Ok(hits as f64 / predictions.len() as f64 * 100.0)
}

/// Mean reciprocal rank, in percent. Absent targets contribute zero.
pub fn mrr(predictions: &[Prediction]) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let sum: f64 = predictions
        .iter()
        .map(|p| if p.rank >= 1 { 1.0 / p.rank as f64 } else { 0.0 })
        .sum();
    Ok(sum / predictions.len() as f64 * 100.0)
}

/// Support-weighted F1 over (truth, top-1) pairs, in percent. Classes are
/// the distinct ground-truth labels; classes never predicted score zero
/// precision.
pub fn weighted_f1(pairs: &[(u32, u32)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut support: BTreeMap<u32, usize> = BTreeMap::new();
    let mut true_pos: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u32, usize> = BTreeMap::new();
    for &(truth, pred) in pairs {
        *support.entry(truth).or_default() += 1;
        *pred_count.entry(pred).or_default() += 1;
        if truth == pred {
            *true_pos.entry(truth).or_default() += 1;
        }
    }
    let total = pairs.len() as f64;
    let mut weighted = 0.0;
    for (&class, &sup) in &support {
        let tp = *true_pos.get(&class).unwrap_or(&0) as f64;
        let predicted = *pred_count.get(&class).unwrap_or(&0) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / sup as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += f1 * sup as f64 / total;
    }
    Ok(weighted * 100.0)
}

/// Median and quartiles of per-user F1 scores within one mode group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeF1Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub users: usize,
    pub samples: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Per-user weighted F1, over whatever prediction subset is given.
pub fn per_user_f1(predictions: &[Prediction]) -> Vec<(u32, f64)> {
    let mut by_user: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for p in predictions {
        by_user.entry(p.user).or_default().push((p.target, p.top1));
    }
    by_user
        .into_iter()
        .map(|(user, pairs)| (user, weighted_f1(&pairs).unwrap_or(0.0)))
        .collect()
}

/// Group test samples by ground-truth next mode and summarise the per-user
/// weighted F1 distribution of each group. Modes with no samples are absent.
pub fn per_mode_f1(predictions: &[Prediction]) -> BTreeMap<u8, ModeF1Summary> {
    let mut by_mode: BTreeMap<u8, Vec<Prediction>> = BTreeMap::new();
    for p in predictions {
        by_mode.entry(p.next_mode).or_default().push(*p);
    }
    by_mode
        .into_iter()
        .map(|(mode, preds)| {
            let mut scores: Vec<f64> = per_user_f1(&preds).into_iter().map(|(_, f)| f).collect();
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let summary = ModeF1Summary {
                median: quantile(&scores, 0.5),
                q1: quantile(&scores, 0.25),
                q3: quantile(&scores, 0.75),
                users: scores.len(),
                samples: preds.len(),
            };
            (mode, summary)
        })
        .collect()
}

/// The full evaluation record written next to every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub weighted_f1: f64,
    pub mrr: f64,
    pub per_mode_f1: BTreeMap<String, ModeF1Summary>,
    pub per_user_f1: Vec<(String, f64)>,
    pub samples: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_predictions(
        predictions: &[Prediction],
        mode_names: &[String],
        user_names: &[String],
    ) -> Result<Self, EvalError> {
        let pairs: Vec<(u32, u32)> = predictions.iter().map(|p| (p.target, p.top1)).collect();
        let name_of_mode = |m: u8| -> String {
            mode_names
                .get(m as usize)
                .cloned()
                .unwrap_or_else(|| format!("mode{m}"))
        };
        let name_of_user = |u: u32| -> String {
            user_names
                .get(u as usize)
                .cloned()
                .unwrap_or_else(|| format!("user{u}"))
        };
        Ok(MetricsReport {
            acc1: acc_at_k(predictions, 1)?,
            acc5: acc_at_k(predictions, 5)?,
            acc10: acc_at_k(predictions, 10)?,
            weighted_f1: weighted_f1(&pairs)?,
            mrr: mrr(predictions)?,
            per_mode_f1: per_mode_f1(predictions)
                .into_iter()
                .map(|(m, s)| (name_of_mode(m), s))
                .collect(),
            per_user_f1: per_user_f1(predictions)
                .into_iter()
                .map(|(u, f)| (name_of_user(u), f))
                .collect(),
            samples: predictions.len(),
            seed: 0,
            config: serde_json::Value::Null,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(rank: usize, target: u32, top1: u32) -> Prediction {
        Prediction {
            user: 0,
            target,
            rank,
            top1,
            next_mode: 0,
        }
    }

    #[test]
    fn acc_at_k_counts_ranks() {
        // ranks [1, 3, 11]
        let preds = vec![pred(1, 0, 0), pred(3, 0, 1), pred(11, 0, 2)];
        assert!((acc_at_k(&preds, 1).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!((acc_at_k(&preds, 5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert!((acc_at_k(&preds, 10).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        // target always first
        let perfect = vec![pred(1, 0, 0); 4];
        assert_eq!(acc_at_k(&perfect, 1).unwrap(), 100.0);
        assert_eq!(acc_at_k(&perfect, 5).unwrap(), 100.0);
        // degenerate input
        assert!(matches!(acc_at_k(&[], 1), Err(EvalError::NoSamples)));
        assert!(matches!(acc_at_k(&perfect, 0), Err(EvalError::BadK(0))));
    }

    #[test]
    fn mrr_examples() {
        let preds = vec![pred(1, 0, 0), pred(2, 0, 1)];
        assert!((mrr(&preds).unwrap() - 75.0).abs() < 1e-12);
        let all_first = vec![pred(1, 0, 0); 7];
        assert_eq!(mrr(&all_first).unwrap(), 100.0);
        let preds = vec![pred(2, 0, 1), pred(4, 0, 1), pred(5, 0, 1)];
        let expected = (0.5 + 0.25 + 0.2) / 3.0 * 100.0;
        assert!((mrr(&preds).unwrap() - expected).abs() < 1e-12);
        assert!((mrr(&preds).unwrap() - 31.67).abs() < 0.01);
        // a missing target contributes zero
        let with_miss = vec![pred(0, 0, 1), pred(1, 0, 0)];
        assert!((mrr(&with_miss).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_examples() {
        // perfect predictions
        let pairs = vec![(0, 0), (1, 1), (0, 0)];
        assert!((weighted_f1(&pairs).unwrap() - 100.0).abs() < 1e-12);
        // y_true = [A, A, B], y_pred = [A, B, B]: both class F1s 2/3
        let pairs = vec![(0, 0), (0, 1), (1, 1)];
        let expected = 2.0 / 3.0 * 100.0;
        assert!((weighted_f1(&pairs).unwrap() - expected).abs() < 1e-9);
        // always predicting one class over two balanced classes
        let pairs = vec![(0, 0), (1, 0)];
        assert!((weighted_f1(&pairs).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        // classes never predicted get precision zero without panicking
        let pairs = vec![(2, 0), (2, 1)];
        assert_eq!(weighted_f1(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn rank_and_top1_break_ties_by_ascending_id() {
        let row = [0.5f64, 0.9, 0.9, 0.1];
        assert_eq!(top1_index(&row), 1);
        assert_eq!(rank_of_target(&row, 2), 2); // loses the tie to id 1
        assert_eq!(rank_of_target(&row, 1), 1);
        assert_eq!(rank_of_target(&row, 0), 3);
        assert_eq!(rank_of_target(&row, 3), 4);
    }

    #[test]
    fn per_mode_groups_and_quartiles() {
        // single mode: one group whose median is the overall per-user F1
        let preds = vec![
            Prediction { user: 0, target: 1, rank: 1, top1: 1, next_mode: 2 },
            Prediction { user: 0, target: 1, rank: 2, top1: 0, next_mode: 2 },
            Prediction { user: 1, target: 3, rank: 1, top1: 3, next_mode: 2 },
        ];
        let groups = per_mode_f1(&preds);
        assert_eq!(groups.len(), 1);
        let summary = &groups[&2];
        assert_eq!(summary.users, 2);
        assert_eq!(summary.samples, 3);
        // perfect model: every group scores 100
        let perfect: Vec<Prediction> = (0..6)
            .map(|i| Prediction {
                user: i % 2,
                target: i,
                rank: 1,
                top1: i,
                next_mode: (i % 3) as u8,
            })
            .collect();
        for (_, s) in per_mode_f1(&perfect) {
            assert_eq!(s.median, 100.0);
        }
    }

    #[test]
    fn report_satisfies_the_ordering_invariants() {
        let preds: Vec<Prediction> = (0..50)
            .map(|i| pred(1 + (i * 7 % 13) as usize, i % 5, (i % 4) as u32))
            .collect();
        let report =
            MetricsReport::from_predictions(&preds, &["walk".into()], &["u0".into()]).unwrap();
        assert!(report.acc1 <= report.acc5);
        assert!(report.acc5 <= report.acc10);
        assert!(report.acc10 <= 100.0);
        assert!(report.mrr >= report.acc1);
        assert!(report.mrr <= 100.0);
    }
}
