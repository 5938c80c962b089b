//! Sum-rule score fusion and the evaluation suite: confusion matrix,
//! accuracy/precision/recall/F1/specificity, ROC and AUC.
//!
//! The positive class is ALL (label 1). Metrics with a zero denominator
//! are reported as undefined (`null` in the serialized report) rather
//! than 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LabelId;

/// Componentwise sum of the three models' score vectors, unnormalized.
pub fn sum_rule_fuse(x_i: &[f64], x_m: &[f64], x_e: &[f64]) -> Result<Vec<f64>> {
    if x_i.len() != x_m.len() || x_i.len() != x_e.len() {
        return Err(Error::Shape(format!(
            "fusion lengths {} / {} / {}",
            x_i.len(),
            x_m.len(),
            x_e.len()
        )));
    }
    Ok(x_i
        .iter()
        .zip(x_m)
        .zip(x_e)
        .map(|((a, b), c)| a + b + c)
        .collect())
}

/// Argmax decision; an exact tie favors the negative class.
pub fn decide(scores: &[f64]) -> Result<LabelId> {
    if scores.len() != 2 {
        return Err(Error::Shape(format!(
            "decide expects 2 scores, got {}",
            scores.len()
        )));
    }
    if scores[1] > scores[0] {
        LabelId::new(1)
    } else {
        LabelId::new(0)
    }
}

/// Binary confusion counts with positive class = label 1.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion(y_true: &[LabelId], y_pred: &[LabelId]) -> Result<ConfusionCounts> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "confusion needs equal non-empty label lists, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        match (t.value(), p.value()) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => unreachable!("labels are validated to {{0,1}}"),
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        match (self.precision(), self.recall()) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        }
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Threshold-sweep ROC curve over distinct scores, descending; tied scores
/// form a single step. Includes the (0,0) and (1,1) endpoints.
pub fn roc_curve(y_true: &[LabelId], positive_scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    if y_true.len() != positive_scores.len() {
        return Err(Error::Argument(format!(
            "roc needs equal lengths, got {} labels and {} scores",
            y_true.len(),
            positive_scores.len()
        )));
    }
    let n_pos = y_true.iter().filter(|l| l.value() == 1).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "ROC undefined: need at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| {
        positive_scores[b]
            .partial_cmp(&positive_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = positive_scores[order[i]];
        while i < order.len() && positive_scores[order[i]] == s {
            if y_true[order[i]].value() == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under an ROC polyline.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Full evaluation artifact for one test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: ConfusionCounts,
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
}

impl MetricsReport {
    pub fn from_parts(c: ConfusionCounts, roc: Vec<(f64, f64)>) -> MetricsReport {
        let auc_value = auc(&roc);
        MetricsReport {
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            specificity: c.specificity(),
            confusion: c,
            roc,
            auc: auc_value,
        }
    }
}

/// Fuse three predictors' per-image probability vectors by the sum rule,
/// decide per image, and assemble the full report. The fused continuous
/// score for the ROC is the normalized positive component of the sum.
pub fn evaluate_pipeline(
    score_sets: [&[Vec<f64>]; 3],
    y_true: &[LabelId],
) -> Result<MetricsReport> {
    let n = y_true.len();
    if n == 0 {
        return Err(Error::Data("empty test split".into()));
    }
    for s in &score_sets {
        if s.len() != n {
            return Err(Error::Shape(format!(
                "predictor emitted {} score vectors for {} samples",
                s.len(),
                n
            )));
        }
    }
    let mut y_pred = Vec::with_capacity(n);
    let mut fused_scores = Vec::with_capacity(n);
    for i in 0..n {
        let fused = sum_rule_fuse(&score_sets[0][i], &score_sets[1][i], &score_sets[2][i])?;
        y_pred.push(decide(&fused)?);
        fused_scores.push(fused[1] / (fused[0] + fused[1]));
    }
    let c = confusion(y_true, &y_pred)?;
    let roc = roc_curve(y_true, &fused_scores)?;
    Ok(MetricsReport::from_parts(c, roc))
}
