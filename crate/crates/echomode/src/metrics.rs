//! Evaluation metrics: ranking metrics for the cardiomyopathy
//! classification readout and error metrics for EF regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cardiomyopathy decision threshold on the EF fraction scale.
pub const EF_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// None when the split contains a single class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub threshold: f64,
    pub n_test: usize,
}

fn check_paired(a: &[f64], b: &[bool]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::argument(format!(
            "need equal non-empty score/label slices, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mann–Whitney AUROC with the tie correction: ties between a positive and
/// a negative score count one half. Returns None if only one class occurs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_paired(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    // walk tie groups in ascending score order; every positive in a group
    // beats all negatives seen in earlier groups and halves with the
    // negatives of its own group
    let mut wins = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&idx| labels[idx]).count();
        let group_neg = (j - i) - group_pos;
        wins += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Ok(Some(wins / (n_pos as f64 * n_neg as f64)))
}

/// Area under the precision-recall curve by step integration over
/// descending score thresholds (average-precision form; ties handled as one
/// block). Returns None if only one class occurs.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_paired(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let block_tp = order[i..j].iter().filter(|&&idx| labels[idx]).count();
        tp += block_tp;
        fp += (j - i) - block_tp;
        let precision = tp as f64 / (tp + fp) as f64;
        let recall_gain = block_tp as f64 / n_pos as f64;
        area += precision * recall_gain;
        i = j;
    }
    Ok(Some(area))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::argument("need equal non-empty prediction/truth slices"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::argument("need equal non-empty prediction/truth slices"));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Coefficient of determination, 1 - SS_res / SS_tot. A constant truth
/// vector makes SS_tot zero; that degenerate case reports 1.0 for an exact
/// fit and negative infinity otherwise.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::argument("need equal non-empty prediction/truth slices"));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Full report from per-patient EF predictions and ground truth (both on
/// the [0,1] fraction scale). Classification uses score = -predicted EF
/// against label = (true EF < threshold), so higher scores mean more
/// cardiomyopathic.
pub fn evaluate_predictions(pred_ef: &[f64], true_ef: &[f64]) -> Result<EvalReport> {
    if pred_ef.is_empty() || pred_ef.len() != true_ef.len() {
        return Err(Error::argument("need equal non-empty prediction/truth slices"));
    }
    let scores: Vec<f64> = pred_ef.iter().map(|&p| -p).collect();
    let labels: Vec<bool> = true_ef.iter().map(|&t| t < EF_THRESHOLD).collect();
    Ok(EvalReport {
        auroc: auroc(&scores, &labels)?,
        auprc: auprc(&scores, &labels)?,
        mae: mae(pred_ef, true_ef)?,
        rmse: rmse(pred_ef, true_ef)?,
        r2: r2(pred_ef, true_ef)?,
        threshold: EF_THRESHOLD,
        n_test: pred_ef.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force all-pairs oracle: P(pos > neg) + half P(tie).
    fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tested = 0;
        while tested < 1000 {
            let n = rng.gen_range(2..=50);
            // coarse grid of values so ties are common
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let n_pos = labels.iter().filter(|&&l| l).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap().unwrap();
            let slow = auroc_oracle(&scores, &labels);
            assert_eq!(fast, slow, "scores {scores:?} labels {labels:?}");
            tested += 1;
        }
    }

    #[test]
    fn auroc_worked_example_with_tie() {
        // one tie between a positive and a negative: (1*1 + 0.5)/2 pairs
        let scores = [0.5, 0.5, 0.8];
        let labels = [false, true, true];
        assert_eq!(auroc(&scores, &labels).unwrap().unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined_not_half() {
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(auroc(&scores, &[true, true, true]).unwrap(), None);
        assert_eq!(auprc(&scores, &[false, false, false]).unwrap(), None);
    }

    #[test]
    fn auprc_hand_computed() {
        // descending: pos(1.0) p=1, neg(0.8), pos(0.6) p=2/3
        let scores = [0.6, 1.0, 0.8];
        let labels = [true, true, false];
        let got = auprc(&scores, &labels).unwrap().unwrap();
        let expect = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((got - expect).abs() < 1e-12);
        // perfect separation -> 1
        let got = auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap().unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn regression_metrics_basic() {
        let truth = [0.3, 0.5, 0.7];
        assert_eq!(mae(&truth, &truth).unwrap(), 0.0);
        assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(r2(&truth, &truth).unwrap(), 1.0);
        let mean_pred = [0.5, 0.5, 0.5];
        assert!((r2(&mean_pred, &truth).unwrap()).abs() < 1e-12);
        let pred = [0.4, 0.5, 0.6];
        assert!((mae(&pred, &truth).unwrap() - 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_at_least_mae_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..=40);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert!(rmse(&pred, &truth).unwrap() >= mae(&pred, &truth).unwrap() - 1e-15);
        }
    }

    #[test]
    fn monotone_predictions_give_auroc_one() {
        // predicted EF strictly increasing with true EF
        let true_ef = [0.2, 0.35, 0.55, 0.7];
        let pred_ef = [0.25, 0.4, 0.6, 0.65];
        let report = evaluate_predictions(&pred_ef, &true_ef).unwrap();
        assert_eq!(report.auroc, Some(1.0));
        assert_eq!(report.auprc, Some(1.0));
        assert_eq!(report.n_test, 4);
    }

    #[test]
    fn report_orientation_positive_is_low_ef() {
        // a model predicting lower EF for sicker patients must score high
        let true_ef = [0.3, 0.6];
        let pred_ef = [0.35, 0.62];
        let report = evaluate_predictions(&pred_ef, &true_ef).unwrap();
        assert_eq!(report.auroc, Some(1.0));
        // inverted predictions -> 0
        let report = evaluate_predictions(&[0.62, 0.35], &true_ef).unwrap();
        assert_eq!(report.auroc, Some(0.0));
    }

    #[test]
    fn mismatched_or_empty_inputs_rejected() {
        assert!(auroc(&[], &[]).is_err());
        assert!(mae(&[0.1], &[0.1, 0.2]).is_err());
        assert!(evaluate_predictions(&[], &[]).is_err());
    }
}
