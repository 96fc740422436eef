//! Oriented-box average precision and correspondence scoring.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ScoredBox;
use crate::geometry::{iou, OrientedBox};
use crate::matcher::MatchResult;
use crate::sim::Scene;
use crate::BoxId;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: BoxId,
    pub bbox: OrientedBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked prediction.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

impl PrCurve {
    /// Area under the monotone precision envelope of `points`.
    pub fn envelope_area(points: &[(f64, f64)]) -> f64 {
        let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for ((r, _), p) in points.iter().zip(envelope) {
            area += (r - prev_recall) * p;
            prev_recall = *r;
        }
        area
    }

    fn from_flags(flags: &[bool], positives: usize) -> Self {
        if positives == 0 {
            let ap = if flags.is_empty() { 1.0 } else { 0.0 };
            return PrCurve { points: Vec::new(), ap };
        }
        let mut tp = 0usize;
        let points: Vec<(f64, f64)> = flags
            .iter()
            .enumerate()
            .map(|(i, &hit)| {
                tp += usize::from(hit);
                (tp as f64 / positives as f64, tp as f64 / (i + 1) as f64)
            })
            .collect();
        let ap = Self::envelope_area(&points);
        PrCurve { points, ap }
    }
}

/// One evaluated image: predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub preds: Vec<ScoredBox>,
    pub gts: Vec<GroundTruth>,
}

/// Which class to evaluate; `None` pools all classes and ignores labels.
fn ranked_flags(images: &[EvalImage], class: Option<usize>, iou_thresh: f64) -> (Vec<bool>, usize) {
    let keep_pred = |p: &ScoredBox| class.is_none_or(|c| p.class_id() == c);
    let keep_gt = |g: &GroundTruth| class.is_none_or(|c| g.class_id == c);

    // (score, image, index within image); stable order keeps ties in input order.
    let mut ranked: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(im, img)| {
            img.preds.iter().enumerate().filter(|(_, p)| keep_pred(p)).map(move |(i, p)| (p.score(), im, i))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let gts: Vec<Vec<&GroundTruth>> = images
        .iter()
        .map(|img| {
            let mut g: Vec<&GroundTruth> = img.gts.iter().filter(|g| keep_gt(g)).collect();
            g.sort_by_key(|g| g.id);
            g
        })
        .collect();
    let positives = gts.iter().map(Vec::len).sum();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let flags = ranked
        .iter()
        .map(|&(_, im, i)| {
            let pred = &images[im].preds[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts[im].iter().enumerate() {
                if claimed[im][j] {
                    continue;
                }
                let v = iou(pred.bbox(), &g.bbox);
                // Strict comparison keeps the lower GT id on ties.
                if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            match best {
                Some((_, j)) => {
                    claimed[im][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, positives)
}

fn check_threshold(iou_thresh: f64) -> Result<()> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(format!("IoU threshold must be in (0, 1), got {iou_thresh}")));
    }
    Ok(())
}

/// Class-aware AP for a single image: a prediction may only claim ground truth
/// of its own predicted class.
pub fn average_precision(preds: &[ScoredBox], gts: &[GroundTruth], iou_thresh: f64) -> Result<PrCurve> {
    check_threshold(iou_thresh)?;
    let image = EvalImage { preds: preds.to_vec(), gts: gts.to_vec() };
    let classes = preds.iter().map(|p| p.class_id()).chain(gts.iter().map(|g| g.class_id)).max().map_or(0, |m| m + 1);
    // Per-class claiming, pooled into one ranking.
    let mut all: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0;
    for c in 0..classes {
        let images = std::slice::from_ref(&image);
        let (flags, pos) = ranked_flags(images, Some(c), iou_thresh);
        positives += pos;
        let mut scores: Vec<f64> = preds.iter().filter(|p| p.class_id() == c).map(ScoredBox::score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        all.extend(scores.into_iter().zip(flags));
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = all.into_iter().map(|(_, f)| f).collect();
    Ok(PrCurve::from_flags(&flags, positives))
}

/// AP over several images for one class, or class-agnostic when `class` is `None`.
pub fn average_precision_images(images: &[EvalImage], class: Option<usize>, iou_thresh: f64) -> Result<PrCurve> {
    check_threshold(iou_thresh)?;
    let (flags, positives) = ranked_flags(images, class, iou_thresh);
    Ok(PrCurve::from_flags(&flags, positives))
}

/// One curve per class `0..class_count`.
pub fn per_class_ap(images: &[EvalImage], class_count: usize, iou_thresh: f64) -> Result<Vec<PrCurve>> {
    (0..class_count).map(|c| average_precision_images(images, Some(c), iou_thresh)).collect()
}

pub fn mean_ap(per_class: &[PrCurve]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("mean AP needs at least one class"));
    }
    Ok(per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceScore {
    /// `None` when there are no pairs.
    pub precision: Option<f64>,
    /// `None` when the scene has no true correspondences.
    pub recall: Option<f64>,
    pub correct: usize,
    pub pairs: usize,
    pub present: usize,
}

impl CorrespondenceScore {
    fn from_counts(correct: usize, pairs: usize, present: usize) -> Self {
        let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        Self { precision: ratio(correct, pairs), recall: ratio(correct, present), correct, pairs, present }
    }

    /// Pools counts, so the result is micro-averaged.
    pub fn combine(scores: &[CorrespondenceScore]) -> Self {
        let sum = |f: fn(&CorrespondenceScore) -> usize| scores.iter().map(f).sum();
        Self::from_counts(sum(|s| s.correct), sum(|s| s.pairs), sum(|s| s.present))
    }
}

/// Scores pairs against the scene's hidden correspondence.
pub fn correspondence_score(result: &MatchResult, scene: &Scene) -> CorrespondenceScore {
    let correct = result.pairs.iter().filter(|p| scene.corr_of(p.rgb_id) == Some(p.ir_id)).count();
    CorrespondenceScore::from_counts(correct, result.pairs.len(), scene.present_correspondences())
}

/// One row of the metrics CSV. `value = None` is written as `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub class: String,
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, class: impl Into<String>, value: Option<f64>) -> Self {
        Self { metric: metric.into(), class: class.into(), value }
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(out, "metric,class,value")?;
    for r in rows {
        match r.value {
            Some(v) => writeln!(out, "{},{},{}", r.metric, r.class, v)?,
            None => writeln!(out, "{},{},NA", r.metric, r.class)?,
        }
    }
    Ok(())
}

pub fn write_pr_csv<W: Write>(mut out: W, curve: &PrCurve) -> Result<()> {
    writeln!(out, "recall,precision")?;
    for (r, p) in &curve.points {
        writeln!(out, "{r},{p}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatchedPair;
    use crate::sim::{generate_scene, SimConfig};
    use proptest::prelude::*;

    fn gt(id: BoxId, cx: f64, class_id: usize) -> GroundTruth {
        GroundTruth { id, bbox: OrientedBox::new(cx, 0.0, 10.0, 10.0, 0.0).unwrap(), class_id }
    }

    fn pred(cx: f64, score: f64, id: BoxId) -> ScoredBox {
        ScoredBox::new(OrientedBox::new(cx, 0.0, 10.0, 10.0, 0.0).unwrap(), vec![score], id).unwrap()
    }

    #[test]
    fn exact_copies_score_one() {
        let gts = [gt(0, 0.0, 0), gt(1, 50.0, 0)];
        let preds = [pred(0.0, 1.0, 0), pred(50.0, 1.0, 1)];
        assert_eq!(average_precision(&preds, &gts, 0.5).unwrap().ap, 1.0);
    }

    #[test]
    fn empty_cases() {
        assert_eq!(average_precision(&[], &[gt(0, 0.0, 0)], 0.5).unwrap().ap, 0.0);
        assert_eq!(average_precision(&[], &[], 0.5).unwrap().ap, 1.0);
        assert_eq!(average_precision(&[pred(0.0, 0.9, 0)], &[], 0.5).unwrap().ap, 0.0);
        assert!(average_precision(&[], &[], 1.0).is_err());
    }

    #[test]
    fn tp_fp_tp_envelope() {
        let gts = [gt(0, 0.0, 0), gt(1, 50.0, 0)];
        let preds = [pred(0.0, 0.9, 0), pred(200.0, 0.8, 1), pred(50.0, 0.7, 2)];
        let c = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((c.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((c.ap - PrCurve::envelope_area(&c.points)).abs() < 1e-15);
    }

    #[test]
    fn wrong_class_is_a_false_positive() {
        let gts = [gt(0, 0.0, 1)];
        let p = ScoredBox::new(gts[0].bbox, vec![0.9, 0.1], 0).unwrap();
        assert_eq!(average_precision(&[p], &gts, 0.5).unwrap().ap, 0.0);
    }

    #[test]
    fn mean_ap_examples() {
        let c = |ap| PrCurve { points: vec![], ap };
        assert_eq!(mean_ap(&[c(0.7)]).unwrap(), 0.7);
        assert_eq!(mean_ap(&[c(1.0), c(0.0)]).unwrap(), 0.5);
        assert!((mean_ap(&[c(0.9), c(0.8), c(0.7), c(0.6), c(0.5)]).unwrap() - 0.7).abs() < 1e-12);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn correspondence_examples() {
        let cfg = SimConfig { boxes_per_scene: 3, dropout_rate: 0.0, spurious_rate: 0.0, ..SimConfig::default() };
        let scene = generate_scene(&cfg, 0).unwrap();
        let partner = |ir: BoxId| scene.rgb_obs.iter().find(|o| o.corr_id == Some(ir)).unwrap().scored.source_id();
        let pair = |ir_id, rgb_id| MatchedPair { ir_id, rgb_id, iou: 0.5 };

        let all = MatchResult { pairs: (0..3).map(|i| pair(i, partner(i))).collect(), ..Default::default() };
        let s = correspondence_score(&all, &scene);
        assert_eq!((s.precision, s.recall), (Some(1.0), Some(1.0)));

        let none = correspondence_score(&MatchResult::default(), &scene);
        assert_eq!((none.precision, none.recall), (None, Some(0.0)));

        let mixed = MatchResult {
            pairs: vec![pair(0, partner(0)), pair(1, partner(1)), pair(2, partner(0))],
            ..Default::default()
        };
        let s = correspondence_score(&mixed, &scene);
        assert_eq!(s.correct, 2);
        assert!((s.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_csv_format() {
        let mut buf = Vec::new();
        write_metrics_csv(
            &mut buf,
            &[MetricRow::new("ap", "car", Some(0.5)), MetricRow::new("precision", "all", None)],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,class,value\nap,car,0.5\nprecision,all,NA\n");
    }

    fn scenario() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<f64>)> {
        (prop::collection::vec((0.0..300.0f64, 0.0..20.0f64), 1..12), prop::collection::vec(0.0..300.0f64, 0..8))
            .prop_map(|(p, g)| (p, g))
    }

    fn build(p: &[(f64, f64)], g: &[f64]) -> (Vec<ScoredBox>, Vec<GroundTruth>) {
        let preds = p.iter().enumerate().map(|(i, (cx, s))| pred(*cx, s / 20.0, i as BoxId)).collect();
        // Ground truth 30 px apart: a prediction can overlap at most one of them.
        let gts = g.iter().enumerate().map(|(i, d)| gt(i as BoxId, 30.0 * i as f64 + d / 60.0, 0)).collect();
        (preds, gts)
    }

    proptest! {
        #[test]
        fn ap_bounded_and_envelope_consistent((p, g) in scenario()) {
            let (preds, gts) = build(&p, &g);
            let c = average_precision(&preds, &gts, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.ap));
            prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
            if !gts.is_empty() {
                prop_assert!((c.ap - PrCurve::envelope_area(&c.points)).abs() < 1e-12);
            }
        }

        #[test]
        fn ap_invariant_under_monotone_rescoring((p, g) in scenario()) {
            // Distinct scores so the ranking is fully determined.
            let p: Vec<(f64, f64)> = p.iter().enumerate().map(|(i, (cx, _))| (*cx, 1.0 + i as f64)).collect();
            let (preds, gts) = build(&p, &g);
            let squashed: Vec<(f64, f64)> = p.iter().map(|(cx, s)| (*cx, (s / 20.0).sqrt() * 20.0 * 0.5)).collect();
            let (preds2, _) = build(&squashed, &g);
            let a = average_precision(&preds, &gts, 0.5).unwrap().ap;
            let b = average_precision(&preds2, &gts, 0.5).unwrap().ap;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn lower_scored_duplicates_never_help((p, g) in scenario()) {
            let (preds, gts) = build(&p, &g);
            let base = average_precision(&preds, &gts, 0.5).unwrap().ap;
            let min = preds.iter().map(ScoredBox::score).fold(f64::INFINITY, f64::min);
            let n = preds.len() as BoxId;
            let mut doubled = preds.clone();
            for (k, q) in preds.iter().enumerate() {
                let probs = vec![min * 0.5 * (1.0 - k as f64 / (2.0 * n as f64))];
                doubled.push(ScoredBox::new(*q.bbox(), probs, n + k as BoxId).unwrap());
            }
            let dup = average_precision(&doubled, &gts, 0.5).unwrap().ap;
            prop_assert!(dup <= base + 1e-12);
        }
    }
}
