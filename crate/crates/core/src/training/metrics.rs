use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, Polarity, NUM_CLASSES};
use crate::model::{loss, predict_from_logits, ForwardOptions, GateMabsaModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification quality over a set of records. Per-class entries are
/// indexed by class (negative, neutral, positive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// Mean cross-entropy per record.
    pub loss: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-F1 from paired predictions and labels. A class with no
/// predictions and no labels has F1 = 0 and still counts in the mean.
pub fn classification_metrics(predictions: &[Polarity], labels: &[Polarity], mean_loss: f64) -> Metrics {
    let mut tp = [0usize; NUM_CLASSES];
    let mut predicted = [0usize; NUM_CLASSES];
    let mut actual = [0usize; NUM_CLASSES];
    for (&p, &l) in predictions.iter().zip(labels) {
        predicted[p.index()] += 1;
        actual[l.index()] += 1;
        if p == l {
            tp[p.index()] += 1;
        }
    }
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let precision = ratio(tp[c], predicted[c]);
        let recall = ratio(tp[c], actual[c]);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class[c] = ClassMetrics { precision, recall, f1 };
    }
    Metrics {
        accuracy: ratio(tp.iter().sum(), labels.len()),
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64,
        per_class,
        loss: mean_loss,
    }
}

/// Sums in ascending order so the result does not depend on input order.
pub(crate) fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Eval-mode metrics of `model` over `records`.
pub fn evaluate(model: &GateMabsaModel, records: &[FeatureRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty record set".into()));
    }
    let mut losses = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    for r in records {
        let out = model.forward(r, &ForwardOptions::eval())?;
        losses.push(loss(out.logits.data(), r.label)?);
        preds.push(predict_from_logits(out.logits.data()).class);
    }
    let labels: Vec<Polarity> = records.iter().map(|r| r.label).collect();
    Ok(classification_metrics(&preds, &labels, order_free_mean(&mut losses)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::*;

    #[test]
    fn perfect_predictions() {
        let labels = [Negative, Neutral, Positive, Positive];
        let m = classification_metrics(&labels, &labels, 0.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn constant_predictions_on_balanced_set() {
        let m = classification_metrics(&[Negative; 3], &[Negative, Neutral, Positive], 0.0);
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[0].f1 - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!((m.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero() {
        // Positive never appears in labels or predictions.
        let m = classification_metrics(&[Negative, Neutral], &[Negative, Neutral], 0.0);
        assert_eq!(m.per_class[2], ClassMetrics::default());
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_is_order_free() {
        let mut a = vec![0.1, 1e16, -1e16, 0.3];
        let mut b = vec![-1e16, 0.3, 0.1, 1e16];
        assert_eq!(order_free_mean(&mut a), order_free_mean(&mut b));
    }
}
