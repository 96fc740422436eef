//! Synthetic misaligned IR/RGB scenes and a closed-form stand-in detector.
//!
//! Every scene has one constant IR→RGB offset. RGB observations are the IR
//! objects shifted by that offset plus bounded per-object motion, with some
//! partners dropped and some low-confidence ghost detections added near objects.
//! The hidden `corr_id` of each observation makes matching quality measurable.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correction::LabelPair;
use crate::error::{Error, Result};
use crate::filter::ScoredBox;
use crate::geometry::{OrientedBox, Point2};
use crate::BoxId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub count: usize,
    pub boxes_per_scene: usize,
    pub canvas: [f64; 2],
    /// Per-scene offsets are uniform in `[-shift_max, shift_max]²`.
    pub shift_max: f64,
    /// Bound on per-object center noise (pixels, per coordinate).
    pub jitter: f64,
    /// Bound on per-object angle noise (radians).
    pub angle_jitter: f64,
    pub dropout_rate: f64,
    pub spurious_rate: f64,
    pub class_count: usize,
    /// Probability that an observation's most likely class is wrong; also
    /// widens the spread of partner confidences.
    pub confidence_noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum gap between circumscribed circles of IR boxes.
    pub min_separation: f64,
    pub seed: u64,
    /// Replaces every drawn offset; random draws still happen so layouts stay put.
    pub fixed_offset: Option<[f64; 2]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            count: 100,
            boxes_per_scene: 8,
            canvas: [640.0, 640.0],
            shift_max: 15.0,
            jitter: 1.0,
            angle_jitter: 0.02,
            dropout_rate: 0.1,
            spurious_rate: 0.1,
            class_count: 5,
            confidence_noise: 0.05,
            min_size: 16.0,
            max_size: 96.0,
            min_separation: 4.0,
            seed: 0,
            fixed_offset: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("dropout_rate", self.dropout_rate),
            ("spurious_rate", self.spurious_rate),
            ("confidence_noise", self.confidence_noise),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        if self.class_count == 0 {
            return Err(Error::invalid("class_count must be at least 1"));
        }
        if !(self.min_size >= 4.0 && self.max_size >= self.min_size) {
            return Err(Error::invalid(format!(
                "box sizes must satisfy 4 <= min_size <= max_size, got [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        for (name, v) in [
            ("shift_max", self.shift_max),
            ("jitter", self.jitter),
            ("angle_jitter", self.angle_jitter),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.canvas[0] > 0.0 && self.canvas[1] > 0.0) {
            return Err(Error::invalid("canvas must have positive extent"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrObject {
    pub id: BoxId,
    pub bbox: OrientedBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbObservation {
    pub scored: ScoredBox,
    /// IR partner, or `None` for a spurious detection.
    pub corr_id: Option<BoxId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SceneRecord", try_from = "SceneRecord")]
pub struct Scene {
    pub scene_id: u64,
    pub canvas: [f64; 2],
    pub true_offset: [f64; 2],
    pub ir_gt: Vec<IrObject>,
    pub rgb_obs: Vec<RgbObservation>,
}

impl Scene {
    pub fn ir_boxes(&self) -> Vec<(BoxId, OrientedBox)> {
        self.ir_gt.iter().map(|o| (o.id, o.bbox)).collect()
    }

    pub fn rgb_pool(&self) -> Vec<ScoredBox> {
        self.rgb_obs.iter().map(|o| o.scored.clone()).collect()
    }

    pub fn class_count(&self) -> usize {
        self.rgb_obs.first().map_or(1, |o| o.scored.class_probs().len())
    }

    pub fn corr_of(&self, rgb_id: BoxId) -> Option<BoxId> {
        self.rgb_obs.iter().find(|o| o.scored.source_id() == rgb_id).and_then(|o| o.corr_id)
    }

    pub fn ir_object(&self, ir_id: BoxId) -> Option<&IrObject> {
        self.ir_gt.iter().find(|o| o.id == ir_id)
    }

    /// Where the object really is in the RGB image: its observation when one
    /// exists, otherwise the IR box moved by the scene offset.
    pub fn true_rgb_box(&self, ir_id: BoxId) -> Option<OrientedBox> {
        if let Some(obs) = self.rgb_obs.iter().find(|o| o.corr_id == Some(ir_id)) {
            return Some(*obs.scored.bbox());
        }
        let o = self.ir_object(ir_id)?;
        o.bbox.translated(self.true_offset[0], self.true_offset[1]).ok()
    }

    /// Number of IR objects whose partner was observed.
    pub fn present_correspondences(&self) -> usize {
        self.rgb_obs.iter().filter(|o| o.corr_id.is_some()).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IrRecord {
    id: BoxId,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
    class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RgbRecord {
    id: BoxId,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
    class_probs: Vec<f64>,
    corr_id: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    canvas: [f64; 2],
    true_offset: [f64; 2],
    ir_gt: Vec<IrRecord>,
    rgb_obs: Vec<RgbRecord>,
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id,
            canvas: s.canvas,
            true_offset: s.true_offset,
            ir_gt: s
                .ir_gt
                .iter()
                .map(|o| {
                    let [cx, cy, w, h, theta] = o.bbox.to_array();
                    IrRecord { id: o.id, cx, cy, w, h, theta, class: o.class_id }
                })
                .collect(),
            rgb_obs: s
                .rgb_obs
                .iter()
                .map(|o| {
                    let [cx, cy, w, h, theta] = o.scored.bbox().to_array();
                    RgbRecord {
                        id: o.scored.source_id(),
                        cx,
                        cy,
                        w,
                        h,
                        theta,
                        class_probs: o.scored.class_probs().to_vec(),
                        corr_id: o.corr_id.map_or(-1, |c| c as i64),
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: SceneRecord) -> Result<Self> {
        let ir_gt = r
            .ir_gt
            .into_iter()
            .map(|o| {
                Ok(IrObject { id: o.id, bbox: OrientedBox::new(o.cx, o.cy, o.w, o.h, o.theta)?, class_id: o.class })
            })
            .collect::<Result<Vec<_>>>()?;
        let rgb_obs = r
            .rgb_obs
            .into_iter()
            .map(|o| {
                let corr_id = match o.corr_id {
                    -1 => None,
                    c if c >= 0 => Some(c as BoxId),
                    c => return Err(Error::invalid(format!("corr_id must be -1 or an IR id, got {c}"))),
                };
                let bbox = OrientedBox::new(o.cx, o.cy, o.w, o.h, o.theta)?;
                Ok(RgbObservation { scored: ScoredBox::new(bbox, o.class_probs, o.id)?, corr_id })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene { scene_id: r.scene_id, canvas: r.canvas, true_offset: r.true_offset, ir_gt, rgb_obs })
    }
}

fn symmetric(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * rng.random::<f64>() - 1.0
}

fn bounded_normal(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (0.5 * bound * z).clamp(-bound, bound)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Peak probability `peak` on `class`, the rest spread thinly so the peak stays the max.
fn class_probs(rng: &mut ChaCha8Rng, class: usize, class_count: usize, peak: f64) -> Vec<f64> {
    let rest = (1.0 - peak) / class_count as f64;
    (0..class_count)
        .map(|k| {
            let u = rng.random::<f64>();
            if k == class {
                peak
            } else {
                rest * u
            }
        })
        .collect()
}

fn other_class(rng: &mut ChaCha8Rng, class: usize, class_count: usize) -> usize {
    let k = rng.random_range(0..class_count);
    if class_count > 1 && k == class {
        (k + 1) % class_count
    } else {
        k
    }
}

const PARTNER_PEAK: f64 = 0.95;
const PARTNER_SPREAD: f64 = 0.6;
/// Score of a decoupled prediction that found no RGB evidence to lock onto.
const UNSUPPORTED_SCORE: f64 = 0.5;

/// Generates one scene; scene `index` uses its own stream seeded with `seed ^ index`.
pub fn generate_scene(cfg: &SimConfig, index: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index);
    let mut true_offset = [cfg.shift_max * symmetric(&mut rng), cfg.shift_max * symmetric(&mut rng)];
    if let Some(fixed) = cfg.fixed_offset {
        true_offset = fixed;
    }

    // Room for the RGB copy as well, so partners stay on the canvas.
    let slack = cfg.shift_max + cfg.jitter;
    let budget = 10 * cfg.boxes_per_scene.max(1);
    let mut ir_gt: Vec<IrObject> = Vec::with_capacity(cfg.boxes_per_scene);
    for id in 0..cfg.boxes_per_scene as BoxId {
        let mut placed = None;
        for _ in 0..budget {
            let w = uniform(&mut rng, cfg.min_size, cfg.max_size);
            let h = uniform(&mut rng, cfg.min_size, cfg.max_size);
            let theta = uniform(&mut rng, -FRAC_PI_2, FRAC_PI_2);
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let margin = 0.5 * w.hypot(h) + slack;
            let (span_x, span_y) = (cfg.canvas[0] - 2.0 * margin, cfg.canvas[1] - 2.0 * margin);
            if span_x < 0.0 || span_y < 0.0 {
                continue;
            }
            let b = OrientedBox::new(margin + u * span_x, margin + v * span_y, w, h, theta)?;
            let clear = ir_gt.iter().all(|o| {
                o.bbox.center().distance(b.center()) >= o.bbox.half_diagonal() + b.half_diagonal() + cfg.min_separation
            });
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "scene {index}: could not place box {id} of {} on a {}x{} canvas within {budget} attempts",
                cfg.boxes_per_scene, cfg.canvas[0], cfg.canvas[1]
            ))
        })?;
        let class_id = rng.random_range(0..cfg.class_count);
        ir_gt.push(IrObject { id, bbox, class_id });
    }

    let mut observations: Vec<(OrientedBox, Vec<f64>, Option<BoxId>)> = Vec::new();
    for obj in &ir_gt {
        // Draw everything unconditionally so toggling rates keeps the streams aligned.
        let dropped = rng.random::<f64>() < cfg.dropout_rate;
        let noise = [bounded_normal(&mut rng, cfg.jitter), bounded_normal(&mut rng, cfg.jitter)];
        let dtheta = bounded_normal(&mut rng, cfg.angle_jitter);
        let flipped = rng.random::<f64>() < cfg.confidence_noise;
        let shown_class = if flipped { other_class(&mut rng, obj.class_id, cfg.class_count) } else { obj.class_id };
        // Confidence spread grows with the noise level; noiseless scenes score evenly.
        let peak = PARTNER_PEAK - PARTNER_SPREAD * cfg.confidence_noise * rng.random::<f64>();
        let probs = class_probs(&mut rng, shown_class, cfg.class_count, peak);

        let has_ghost = rng.random::<f64>() < cfg.spurious_rate;
        let phi = uniform(&mut rng, 0.0, 2.0 * PI);
        let reach = uniform(&mut rng, 0.3, 0.8) * obj.bbox.w().min(obj.bbox.h());
        let (sw, sh) = (uniform(&mut rng, 0.6, 1.2), uniform(&mut rng, 0.6, 1.2));
        let ghost_theta = obj.bbox.theta() + uniform(&mut rng, -0.3, 0.3);
        let ghost_class = rng.random_range(0..cfg.class_count);
        let ghost_peak = uniform(&mut rng, 0.15, 0.55);
        let ghost_probs = class_probs(&mut rng, ghost_class, cfg.class_count, ghost_peak);

        let partner_center = obj.bbox.center() + Point2::new(true_offset[0] + noise[0], true_offset[1] + noise[1]);
        if !dropped {
            let b = OrientedBox::new(
                partner_center.x,
                partner_center.y,
                obj.bbox.w(),
                obj.bbox.h(),
                obj.bbox.theta() + dtheta,
            )?;
            observations.push((b, probs, Some(obj.id)));
        }
        if has_ghost {
            let c = partner_center + Point2::new(phi.cos(), phi.sin()) * reach;
            let g = OrientedBox::new(
                c.x.clamp(0.0, cfg.canvas[0]),
                c.y.clamp(0.0, cfg.canvas[1]),
                obj.bbox.w() * sw,
                obj.bbox.h() * sh,
                ghost_theta,
            )?;
            observations.push((g, ghost_probs, None));
        }
    }
    // Observation ids carry no information about the partner.
    observations.shuffle(&mut rng);
    let rgb_obs = observations
        .into_iter()
        .enumerate()
        .map(|(i, (b, p, corr_id))| Ok(RgbObservation { scored: ScoredBox::new(b, p, i as BoxId)?, corr_id }))
        .collect::<Result<Vec<_>>>()?;

    Ok(Scene { scene_id: index, canvas: cfg.canvas, true_offset, ir_gt, rgb_obs })
}

/// Scenes `0..cfg.count` in ascending id order.
pub fn generate_scenes(cfg: &SimConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.count as u64).map(|i| generate_scene(cfg, i)).collect()
}

/// Parameters of the stand-in detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDetectorParams {
    /// Belief about the IR→RGB offset of the scene.
    pub offset_estimate: [f64; 2],
    /// Weight of the uniform distribution mixed into every class prediction;
    /// 1 means the classifier is untrained.
    pub confidence_noise: f64,
    /// The decoupled RGB head locks onto an RGB observation whose center lies
    /// within this fraction of half the object's short side. 0 disables it.
    pub capture: f64,
}

impl Default for SimDetectorParams {
    fn default() -> Self {
        Self { offset_estimate: [0.0, 0.0], confidence_noise: 1.0, capture: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ir,
    Rgb,
}

/// `(1 − η)·evidence + η/C`.
pub fn mix_probs(evidence: &[f64], eta: f64) -> Vec<f64> {
    let u = 1.0 / evidence.len() as f64;
    evidence.iter().map(|e| ((1.0 - eta) * e + eta * u).clamp(0.0, 1.0)).collect()
}

fn one_hot(class: usize, class_count: usize) -> Vec<f64> {
    (0..class_count).map(|k| if k == class { 1.0 } else { 0.0 }).collect()
}

/// Decoupled-head prediction for one IR object.
fn decoupled_rgb(params: &SimDetectorParams, scene: &Scene, obj: &IrObject) -> Result<ScoredBox> {
    let classes = scene.class_count();
    let anchor = obj.bbox.translated(params.offset_estimate[0], params.offset_estimate[1])?;
    if params.capture > 0.0 {
        let radius = params.capture * 0.5 * obj.bbox.w().min(obj.bbox.h());
        let nearest = scene
            .rgb_obs
            .iter()
            .map(|o| (o.scored.bbox().center().distance(anchor.center()), o))
            .filter(|(d, _)| *d <= radius)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.scored.source_id().cmp(&b.1.scored.source_id())));
        if let Some((_, o)) = nearest {
            let probs = mix_probs(o.scored.class_probs(), params.confidence_noise);
            return ScoredBox::new(*o.scored.bbox(), probs, obj.id);
        }
    }
    let evidence: Vec<f64> = one_hot(obj.class_id, classes).iter().map(|e| e * UNSUPPORTED_SCORE).collect();
    ScoredBox::new(anchor, mix_probs(&evidence, params.confidence_noise), obj.id)
}

/// Predictions of the stand-in detector for one scene.
///
/// `Ir` echoes the IR ground truth with the classifier's confidence. `Rgb` is the
/// decoupled RGB head: each IR box moved by `offset_estimate`, locked onto a
/// nearby RGB observation when `capture > 0`. Ids are the IR ids.
pub fn detect(params: &SimDetectorParams, scene: &Scene, modality: Modality) -> Result<Vec<ScoredBox>> {
    let classes = scene.class_count();
    scene
        .ir_gt
        .iter()
        .map(|obj| match modality {
            Modality::Ir => {
                ScoredBox::new(obj.bbox, mix_probs(&one_hot(obj.class_id, classes), params.confidence_noise), obj.id)
            }
            Modality::Rgb => decoupled_rgb(params, scene, obj),
        })
        .collect()
}

/// Single-modality branch run on the RGB image: every observation, rescored.
pub fn detect_rgb_single(params: &SimDetectorParams, scene: &Scene) -> Result<Vec<ScoredBox>> {
    scene
        .rgb_obs
        .iter()
        .map(|o| {
            let probs = mix_probs(o.scored.class_probs(), params.confidence_noise);
            ScoredBox::new(*o.scored.bbox(), probs, o.scored.source_id())
        })
        .collect()
}

/// One squared-error box target for the offset head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub anchor: Point2,
    pub target: Point2,
    pub weight: f64,
}

impl BoxTarget {
    pub fn from_pair(pair: &LabelPair, weight: f64) -> Self {
        Self { anchor: pair.ir_box().center(), target: pair.rgb_box.center(), weight }
    }
}

/// Weighted mean of `‖anchor + offset − target‖²` and its gradient in `offset`.
pub fn box_loss(offset: [f64; 2], targets: &[BoxTarget]) -> (f64, [f64; 2]) {
    let total: f64 = targets.iter().map(|t| t.weight).sum();
    if targets.is_empty() || total <= 0.0 {
        return (0.0, [0.0, 0.0]);
    }
    let (mut loss, mut gx, mut gy) = (0.0, 0.0, 0.0);
    for t in targets {
        let rx = t.anchor.x + offset[0] - t.target.x;
        let ry = t.anchor.y + offset[1] - t.target.y;
        loss += t.weight * (rx * rx + ry * ry);
        gx += t.weight * rx;
        gy += t.weight * ry;
    }
    (loss / total, [2.0 * gx / total, 2.0 * gy / total])
}

/// Minimizer of [`box_loss`]: the weighted mean of `target − anchor`.
pub fn box_optimum(targets: &[BoxTarget]) -> Option<[f64; 2]> {
    let total: f64 = targets.iter().map(|t| t.weight).sum();
    if total <= 0.0 {
        return None;
    }
    let sx: f64 = targets.iter().map(|t| t.weight * (t.target.x - t.anchor.x)).sum();
    let sy: f64 = targets.iter().map(|t| t.weight * (t.target.y - t.anchor.y)).sum();
    Some([sx / total, sy / total])
}

/// One cross-entropy target: the evidence probability `a` of the target class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTarget {
    pub evidence: f64,
    pub weight: f64,
}

/// Weighted mean cross-entropy of `p = (1 − η)·a + η/C` and its derivative in `η`.
pub fn class_loss(eta: f64, class_count: usize, targets: &[ClassTarget]) -> (f64, f64) {
    let total: f64 = targets.iter().map(|t| t.weight).sum();
    if targets.is_empty() || total <= 0.0 {
        return (0.0, 0.0);
    }
    let u = 1.0 / class_count as f64;
    let (mut loss, mut grad) = (0.0, 0.0);
    for t in targets {
        let p = ((1.0 - eta) * t.evidence + eta * u).max(1e-12);
        loss -= t.weight * p.ln();
        grad += t.weight * (t.evidence - u) / p;
    }
    (loss / total, grad / total)
}

/// Gradient step on the mean squared center error of the decoupled RGB head
/// against the RGB side of `pseudo_labels`.
pub fn student_step(
    params: &SimDetectorParams,
    pseudo_labels: &[LabelPair],
    learning_rate: f64,
) -> Result<SimDetectorParams> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
    }
    let targets: Vec<BoxTarget> = pseudo_labels.iter().map(|p| BoxTarget::from_pair(p, 1.0)).collect();
    let (_, grad) = box_loss(params.offset_estimate, &targets);
    let mut next = *params;
    next.offset_estimate[0] -= learning_rate * grad[0];
    next.offset_estimate[1] -= learning_rate * grad[1];
    Ok(next)
}

/// Mean distance between the decoupled RGB predictions and the true RGB
/// centers, with the number of objects it averages over.
pub fn rgb_center_error(params: &SimDetectorParams, scene: &Scene) -> Result<(f64, usize)> {
    let preds = detect(params, scene, Modality::Rgb)?;
    let mut sum = 0.0;
    for (obj, pred) in scene.ir_gt.iter().zip(&preds) {
        let truth = scene.true_rgb_box(obj.id).expect("object exists");
        sum += pred.bbox().center().distance(truth.center());
    }
    Ok((sum, scene.ir_gt.len()))
}

/// Center error of copying each IR box unchanged into the RGB image.
pub fn copy_baseline_error(scene: &Scene) -> (f64, usize) {
    let sum = scene
        .ir_gt
        .iter()
        .map(|o| o.bbox.center().distance(scene.true_rgb_box(o.id).expect("object exists").center()))
        .sum();
    (sum, scene.ir_gt.len())
}
