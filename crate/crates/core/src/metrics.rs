//! Segmentation metrics: confusion counts, Dice, binary accuracy and ROC-AUC,
//! all micro-averaged over the pooled pixels of an evaluation split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Pixel counts of thresholded predictions against binary ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`; two empty masks agree perfectly (1.0).
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => (self.tp + self.tn) as f64 / t as f64,
        }
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), |a, b| a + b)
    }
}

fn check_binary(gt: &[f32]) -> Result<()> {
    if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("ground truth must be binary, found {v}")));
    }
    Ok(())
}

/// Counts with prediction `prob >= threshold`.
pub fn confusion(probs: &Tensor<f32>, gt: &Tensor<f32>, threshold: f32) -> Result<Confusion> {
    if probs.shape() != gt.shape() {
        return Err(Error::shape(format!("probabilities {} vs ground truth {}", probs.shape(), gt.shape())));
    }
    check_binary(gt.data())?;
    let mut c = Confusion::default();
    for (&p, &g) in probs.data().iter().zip(gt.data()) {
        match (p >= threshold, g == 1.0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn dice_accuracy(c: &Confusion) -> (f64, f64) {
    (c.dice(), c.accuracy())
}

/// Area under the ROC curve. Scores are swept in descending order, each group
/// of tied scores contributing one trapezoid (so ties count one half, as in
/// the pairwise ranking statistic).
pub fn auc(scores: &[f32], labels: &[f32]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC is undefined when every label is identical"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Evaluation summary with fixed key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub threshold: f32,
    pub n_images: usize,
}

impl MetricReport {
    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, tn: self.tn, fp: self.fp, fn_: self.fn_ }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Pools every image's pixels and computes the full report. AUC is NaN when
/// the pooled ground truth holds a single class.
pub fn evaluate(probs: &[Tensor<f32>], gts: &[Tensor<f32>], threshold: f32) -> Result<MetricReport> {
    if probs.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground truths", probs.len(), gts.len())));
    }
    if probs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let c: Confusion = probs
        .iter()
        .zip(gts)
        .map(|(p, g)| confusion(p, g, threshold))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let scores: Vec<f32> = probs.iter().flat_map(|p| p.data().iter().copied()).collect();
    let labels: Vec<f32> = gts.iter().flat_map(|g| g.data().iter().copied()).collect();
    let auc = match auc(&scores, &labels) {
        Ok(a) => a,
        Err(Error::InvalidArgument(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        dice: c.dice(),
        accuracy: c.accuracy(),
        auc,
        tp: c.tp,
        tn: c.tn,
        fp: c.fp,
        fn_: c.fn_,
        threshold,
        n_images: probs.len(),
    })
}
