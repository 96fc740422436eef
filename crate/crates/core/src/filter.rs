//! Pseudo-label scoring and the batch-adaptive threshold `τ = μ − σ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::BoxId;

/// A pseudo-label candidate: a box plus its class distribution.
///
/// `score` and `class_id` are derived from `class_probs` on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    bbox: OrientedBox,
    class_probs: Vec<f64>,
    score: f64,
    class_id: usize,
    source_id: BoxId,
}

impl ScoredBox {
    pub fn new(bbox: OrientedBox, class_probs: Vec<f64>, source_id: BoxId) -> Result<Self> {
        validate_probs(&class_probs)?;
        let (class_id, score) = argmax(&class_probs);
        Ok(Self { bbox, class_probs, score, class_id, source_id })
    }

    pub fn bbox(&self) -> &OrientedBox {
        &self.bbox
    }
    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }
    pub fn score(&self) -> f64 {
        self.score
    }
    pub fn class_id(&self) -> usize {
        self.class_id
    }
    pub fn source_id(&self) -> BoxId {
        self.source_id
    }

    pub fn with_box(&self, bbox: OrientedBox) -> Self {
        Self { bbox, ..self.clone() }
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("class probability vector is empty"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("class probability {p} outside [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if sum > 1.0 + 1e-6 {
        return Err(Error::invalid(format!("class probabilities sum to {sum} > 1")));
    }
    Ok(())
}

/// Index and value of the maximum; the lowest index wins ties.
fn argmax(probs: &[f64]) -> (usize, f64) {
    probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
}

/// Score of a pseudo-label: its maximum class probability.
pub fn score_of(probs: &[f64]) -> Result<f64> {
    validate_probs(probs)?;
    Ok(argmax(probs).1)
}

const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchThreshold {
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
    pub n: usize,
}

impl BatchThreshold {
    /// Sentinel returned for an empty batch; it keeps nothing.
    pub const INVALID: BatchThreshold = BatchThreshold { mu: f64::NAN, sigma: f64::NAN, tau: f64::NAN, n: 0 };

    pub fn is_valid(&self) -> bool {
        self.n > 0
    }

    /// `score ≥ τ`, with a rounding allowance so scores lying exactly on the
    /// threshold (such as the lower of two scores) are kept.
    pub fn keeps(&self, score: f64) -> bool {
        self.is_valid() && score >= self.tau - THRESHOLD_SLACK
    }
}

/// Mean, population standard deviation and `τ = μ − σ` of a batch of scores.
pub fn batch_threshold(scores: &[f64]) -> Result<BatchThreshold> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot threshold an empty batch"));
    }
    let n = scores.len();
    // Shifting by the first score makes an all-equal batch give σ = 0 and τ = μ exactly.
    let s0 = scores[0];
    let mu = s0 + scores.iter().map(|s| s - s0).sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    Ok(BatchThreshold { mu, sigma, tau: mu - sigma, n })
}

/// Keeps every candidate with `score >= τ`, preserving input order.
///
/// An empty batch yields an empty result and [`BatchThreshold::INVALID`].
pub fn filter_batch(candidates: &[ScoredBox]) -> (Vec<ScoredBox>, BatchThreshold) {
    let scores: Vec<f64> = candidates.iter().map(ScoredBox::score).collect();
    let Ok(threshold) = batch_threshold(&scores) else {
        return (Vec::new(), BatchThreshold::INVALID);
    };
    let kept = candidates.iter().filter(|c| threshold.keeps(c.score)).cloned().collect();
    (kept, threshold)
}

fn per_class_mask(candidates: &[ScoredBox]) -> Vec<bool> {
    let classes = candidates.iter().map(|c| c.class_id + 1).max().unwrap_or(0);
    let thresholds: Vec<Option<BatchThreshold>> = (0..classes)
        .map(|k| {
            let scores: Vec<f64> = candidates.iter().filter(|c| c.class_id == k).map(|c| c.score).collect();
            batch_threshold(&scores).ok()
        })
        .collect();
    candidates.iter().map(|c| thresholds[c.class_id].is_some_and(|t| t.keeps(c.score))).collect()
}

/// Variant computing one threshold per predicted class. Off by default in the pipeline.
pub fn filter_batch_per_class(candidates: &[ScoredBox]) -> Vec<ScoredBox> {
    let mask = per_class_mask(candidates);
    candidates.iter().zip(mask).filter(|(_, k)| *k).map(|(c, _)| c.clone()).collect()
}

/// Filters a batch made of several images with one shared threshold and returns
/// the survivors regrouped per image.
pub fn filter_grouped(groups: &[Vec<ScoredBox>], per_class: bool) -> (Vec<Vec<ScoredBox>>, BatchThreshold) {
    let flat: Vec<ScoredBox> = groups.iter().flatten().cloned().collect();
    let (_, threshold) = filter_batch(&flat);
    let mask = if per_class { per_class_mask(&flat) } else { flat.iter().map(|c| threshold.keeps(c.score)).collect() };
    let mut mask = mask.into_iter();
    let kept = groups.iter().map(|g| g.iter().filter(|_| mask.next().unwrap_or(false)).cloned().collect()).collect();
    (kept, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sb(score: f64, id: BoxId) -> ScoredBox {
        let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        ScoredBox::new(b, vec![score], id).unwrap()
    }

    #[test]
    fn score_is_max_probability() {
        assert_eq!(score_of(&[0.1, 0.7, 0.2]).unwrap(), 0.7);
        assert_eq!(score_of(&[1.0]).unwrap(), 1.0);
        assert!(score_of(&[]).is_err());
        assert!(score_of(&[0.5, 1.2]).is_err());
        assert!(score_of(&[0.6, 0.6]).is_err());
    }

    #[test]
    fn class_id_lowest_index_on_ties() {
        let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let s = ScoredBox::new(b, vec![0.3, 0.3, 0.4], 0).unwrap();
        assert_eq!((s.class_id(), s.score()), (2, 0.4));
        let t = ScoredBox::new(b, vec![0.4, 0.2, 0.4], 0).unwrap();
        assert_eq!(t.class_id(), 0);
    }

    #[test]
    fn threshold_examples() {
        let t = batch_threshold(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((t.mu, t.sigma, t.tau), (0.5, 0.0, 0.5));
        let t = batch_threshold(&[0.37]).unwrap();
        assert_eq!(t.tau, 0.37);
        // μ = 0.5, σ = sqrt(0.32/3) = 0.326598632371090...
        let t = batch_threshold(&[0.9, 0.5, 0.1]).unwrap();
        assert!((t.mu - 0.5).abs() < 1e-15);
        assert!((t.sigma - 0.326_598_632_371_090_4).abs() < 1e-12);
        assert!((t.tau - 0.173_401_367_628_909_6).abs() < 1e-12);
        assert!(batch_threshold(&[]).is_err());
    }

    #[test]
    fn filter_examples() {
        let all_equal: Vec<_> = (0..5).map(|i| sb(0.4, i)).collect();
        assert_eq!(filter_batch(&all_equal).0.len(), 5);

        let batch = vec![sb(0.9, 0), sb(0.5, 1), sb(0.1, 2)];
        let (kept, _) = filter_batch(&batch);
        assert_eq!(kept.iter().map(|k| k.source_id()).collect::<Vec<_>>(), vec![0, 1]);

        assert_eq!(filter_batch(&[sb(0.05, 9)]).0.len(), 1);

        let (kept, t) = filter_batch(&[]);
        assert!(kept.is_empty() && !t.is_valid());
    }

    #[test]
    fn per_class_thresholds_are_independent() {
        let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let c = |p0: f64, p1: f64, id| ScoredBox::new(b, vec![p0, p1], id).unwrap();
        // class 0 scores {0.9, 0.8}, class 1 scores {0.5, 0.25}
        let batch = vec![c(0.9, 0.0, 0), c(0.8, 0.1, 1), c(0.1, 0.5, 2), c(0.125, 0.25, 3)];
        let ids: Vec<_> = filter_batch_per_class(&batch).iter().map(|k| k.source_id()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        let ids: Vec<_> = filter_batch(&batch).0.iter().map(|k| k.source_id()).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    /// `s ≥ μ − σ` decided in exact rational arithmetic: true when `s ≥ μ`,
    /// otherwise iff `(μ − s)² ≤ σ²`.
    fn exact_keep(scores: &[f64], s: f64) -> bool {
        use num::{BigRational, Zero};
        let q = |v: f64| BigRational::from_float(v).unwrap();
        let n = BigRational::from_integer(scores.len().into());
        let mu = scores.iter().map(|&v| q(v)).fold(BigRational::zero(), |a, b| a + b) / &n;
        let var = scores.iter().map(|&v| (q(v) - &mu) * (q(v) - &mu)).fold(BigRational::zero(), |a, b| a + b) / &n;
        let gap = &mu - q(s);
        gap <= BigRational::zero() || &gap * &gap <= var
    }

    #[test]
    fn boundary_score_of_a_pair_is_kept() {
        let batch = vec![sb(0.1, 0), sb(0.7, 1)];
        assert_eq!(filter_batch(&batch).0.len(), 2);
    }

    proptest! {
        #[test]
        fn kept_matches_reference_predicate(scores in prop::collection::vec(0.0..=1.0f64, 1..64)) {
            let batch: Vec<_> = scores.iter().enumerate().map(|(i, &s)| sb(s, i as BoxId)).collect();
            let (kept, t) = filter_batch(&batch);
            let expected: Vec<_> = batch.iter().filter(|c| exact_keep(&scores, c.score())).cloned().collect();
            prop_assert_eq!(&kept, &expected);
            prop_assert!(!kept.is_empty());
            prop_assert!(t.sigma >= 0.0 && t.tau <= t.mu);
        }

        #[test]
        fn uniform_shift_keeps_index_set(scores in prop::collection::vec(0.0..=0.5f64, 1..32), shift in 0.0..0.5f64) {
            let ids = |s: &[f64]| -> Vec<BoxId> {
                let batch: Vec<_> = s.iter().enumerate().map(|(i, &v)| sb(v, i as BoxId)).collect();
                filter_batch(&batch).0.iter().map(|k| k.source_id()).collect()
            };
            // Dyadic shift keeps the arithmetic exact enough to compare index sets.
            let shift = (shift * 64.0).round() / 64.0;
            let scores: Vec<f64> = scores.iter().map(|s| (s * 1024.0).round() / 1024.0).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(ids(&scores), ids(&shifted));
        }
    }
}
