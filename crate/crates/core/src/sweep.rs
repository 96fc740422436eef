//! Position-shift robustness sweep.
//!
//! The IR scenes stay fixed while every RGB image is moved by the same grid
//! offset. For each offset the PLF + SDLM assignment is scored against the
//! hidden partners, and two detectors are scored by mAP: the IR detector on IR
//! ground truth and a copy-the-IR-box RGB detector on the true RGB boxes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{correspondence_score, mean_ap, per_class_ap, CorrespondenceScore, EvalImage, GroundTruth};
use crate::filter::filter_grouped;
use crate::matcher::{match_scene_with, MatcherConfig};
use crate::sim::{detect, generate_scenes, Modality, Scene, SimConfig, SimDetectorParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub sim: SimConfig,
    pub matcher: MatcherConfig,
    pub batch_size: usize,
    pub use_plf: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            min: -15.0,
            max: 15.0,
            step: 3.0,
            sim: SimConfig { count: 50, ..SimConfig::default() },
            matcher: MatcherConfig::default(),
            batch_size: 8,
            use_plf: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dx: f64,
    pub dy: f64,
    pub ir_map: f64,
    pub rgb_map: f64,
    /// Correctly matched partners over partners present.
    pub match_accuracy: Option<f64>,
    pub match_precision: Option<f64>,
}

/// Grid values `min, min + step, …` up to `max` (inclusive, with rounding slack).
pub fn grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite() && min <= max) {
        return Err(Error::invalid(format!("invalid grid: min {min}, max {max}, step {step}")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| min + i as f64 * step).collect())
}

fn map_of(images: &[EvalImage], classes: usize) -> Result<f64> {
    mean_ap(&per_class_ap(images, classes, 0.5)?)
}

fn evaluate(scenes: &[Scene], cfg: &SweepConfig, dx: f64, dy: f64) -> Result<SweepRow> {
    let classes = cfg.sim.class_count;
    let sharp = SimDetectorParams { confidence_noise: 0.0, ..SimDetectorParams::default() };

    let mut ir_images = Vec::with_capacity(scenes.len());
    let mut rgb_images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let ir_gts: Vec<GroundTruth> =
            s.ir_gt.iter().map(|o| GroundTruth { id: o.id, bbox: o.bbox, class_id: o.class_id }).collect();
        let rgb_gts: Vec<GroundTruth> = s
            .ir_gt
            .iter()
            .map(|o| GroundTruth { id: o.id, bbox: s.true_rgb_box(o.id).expect("object exists"), class_id: o.class_id })
            .collect();
        ir_images.push(EvalImage { preds: detect(&sharp, s, Modality::Ir)?, gts: ir_gts });
        // Copying the IR box into the RGB image: the unshifted baseline detector.
        let copies = detect(&SimDetectorParams { capture: 0.0, ..sharp }, s, Modality::Rgb)?;
        rgb_images.push(EvalImage { preds: copies, gts: rgb_gts });
    }

    let pools: Vec<_> = scenes.iter().map(Scene::rgb_pool).collect();
    let kept = if cfg.use_plf {
        pools.chunks(cfg.batch_size.max(1)).flat_map(|b| filter_grouped(b, false).0).collect()
    } else {
        pools
    };
    let scores = scenes
        .iter()
        .zip(&kept)
        .map(|(s, pool)| Ok(correspondence_score(&match_scene_with(&s.ir_boxes(), pool, &cfg.matcher)?, s)))
        .collect::<Result<Vec<_>>>()?;
    let total = CorrespondenceScore::combine(&scores);

    Ok(SweepRow {
        dx,
        dy,
        ir_map: map_of(&ir_images, classes)?,
        rgb_map: map_of(&rgb_images, classes)?,
        match_accuracy: total.recall,
        match_precision: total.precision,
    })
}

/// One row per grid offset, `dy` varying fastest.
pub fn sweep_shift(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let values = grid(cfg.min, cfg.max, cfg.step)?;
    // Same shift bound for every cell keeps the box layout identical across the grid.
    let bound = cfg.min.abs().max(cfg.max.abs());
    let mut rows = Vec::with_capacity(values.len() * values.len());
    for &dx in &values {
        for &dy in &values {
            let sim = SimConfig { shift_max: bound, fixed_offset: Some([dx, dy]), ..cfg.sim.clone() };
            let scenes = generate_scenes(&sim)?;
            rows.push(evaluate(&scenes, cfg, dx, dy)?);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "dx,dy,ir_map,rgb_map,match_accuracy,match_precision")?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dx,
            r.dy,
            r.ir_map,
            r.rgb_map,
            opt(r.match_accuracy),
            opt(r.match_precision)
        )?;
    }
    Ok(())
}
