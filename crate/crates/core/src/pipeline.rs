//! The three-stage teacher-student loop run against the simulated detector.
//!
//! The detector state is one confidence parameter per branch plus one RGB
//! offset per scene. Within an epoch the training targets are fixed: they are
//! built once from the teacher, then the student takes `steps_per_epoch`
//! gradient steps and the teacher follows by EMA after every step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::correction::{init_bag, update_bag, LabelBag, LabelPair, PairOrigin, UpdatePolicy};
use crate::error::{Error, Result};
use crate::filter::{filter_grouped, ScoredBox};
use crate::geometry::Point2;
use crate::matcher::{match_scene_with, MatchResult, MatchStrategy, MatcherConfig, DEFAULT_BETA};
use crate::schedule::{EmaState, LossTerm, Phase, StageConfig, StageState, DEFAULT_EMA_DECAY};
use crate::sim::{
    box_loss, box_optimum, class_loss, copy_baseline_error, detect, detect_rgb_single, rgb_center_error, BoxTarget,
    ClassTarget, Modality, Scene, SimDetectorParams,
};
use crate::BoxId;

/// Switches that remove or replace one piece of the method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Skip burn-in and mutual learning; the single-modality branch stays untrained.
    pub skip_stage1: bool,
    /// Stop after guided decoupling.
    pub skip_stage3: bool,
    /// Keep every pseudo-label.
    pub no_plf: bool,
    /// No matching: every RGB label is the copied IR box.
    pub no_sdlm: bool,
    /// Supervise with this epoch's matched pairs only, without a persistent bag.
    pub no_dlc: bool,
    /// Build the bag once and never update it.
    pub no_dynamic_update: bool,
    pub dlc_improve_only: bool,
    pub iou_match_only: bool,
    /// Reset the teacher to the student at every phase boundary.
    pub ema_reset: bool,
    /// One score threshold per predicted class.
    pub per_class_plf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: StageConfig,
    pub ema_decay: f64,
    pub beta: f64,
    pub update_policy: UpdatePolicy,
    /// Scenes per filtering batch.
    pub batch_size: usize,
    pub steps_per_epoch: u32,
    pub lr_box: f64,
    pub lr_cls: f64,
    /// Loss weight of copied pairs relative to matched ones.
    pub copy_weight: f64,
    pub capture: f64,
    /// A label counts as correct when its center is this close to the truth.
    pub label_tolerance: f64,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: StageConfig::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            beta: DEFAULT_BETA,
            update_policy: UpdatePolicy::Overwrite,
            batch_size: 8,
            steps_per_epoch: 2000,
            lr_box: 0.25,
            lr_cls: 0.05,
            copy_weight: 1.0,
            capture: 1.0,
            label_tolerance: 2.0,
            ablation: Ablation::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        let positive = [
            ("beta", self.beta),
            ("lr_box", self.lr_box),
            ("lr_cls", self.lr_cls),
            ("label_tolerance", self.label_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("EMA decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.copy_weight >= 0.0 && self.capture >= 0.0) {
            return Err(Error::invalid("copy_weight and capture must be non-negative"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size and steps_per_epoch must be at least 1"));
        }
        Ok(())
    }

    fn matcher(&self) -> MatcherConfig {
        let strategy = if self.ablation.iou_match_only { MatchStrategy::IouOnly } else { MatchStrategy::ShapeAware };
        MatcherConfig { beta: self.beta, strategy }
    }

    fn policy(&self) -> UpdatePolicy {
        if self.ablation.dlc_improve_only {
            UpdatePolicy::ImproveOnly
        } else {
            self.update_policy
        }
    }
}

/// Parameters of the whole simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub sm_eta: f64,
    pub dmd_eta: f64,
    pub offsets: Vec<[f64; 2]>,
}

impl DetectorState {
    fn untrained(scenes: usize) -> Self {
        Self { sm_eta: 1.0, dmd_eta: 1.0, offsets: vec![[0.0, 0.0]; scenes] }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + 2 * self.offsets.len());
        v.push(self.sm_eta);
        v.push(self.dmd_eta);
        v.extend(self.offsets.iter().flatten());
        v
    }

    fn from_slice(v: &[f64]) -> Self {
        Self { sm_eta: v[0], dmd_eta: v[1], offsets: v[2..].chunks(2).map(|c| [c[0], c[1]]).collect() }
    }

    /// Decoupled-branch parameters for scene `i`.
    pub fn dmd_params(&self, i: usize, capture: f64) -> SimDetectorParams {
        SimDetectorParams { offset_estimate: self.offsets[i], confidence_noise: self.dmd_eta, capture }
    }

    fn sm_params(&self) -> SimDetectorParams {
        SimDetectorParams { confidence_noise: self.sm_eta, ..SimDetectorParams::default() }
    }

    fn is_finite(&self) -> bool {
        self.sm_eta.is_finite() && self.dmd_eta.is_finite() && self.offsets.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub term: LossTerm,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: Phase,
    pub losses: Vec<LossValue>,
    pub total_loss: f64,
    pub lambda: Option<f64>,
    pub matched_count: usize,
    pub copied_count: usize,
    pub updated_count: usize,
    pub mean_center_error_ir: f64,
    pub mean_center_error_rgb: f64,
    pub pseudo_labels_total: usize,
    pub pseudo_labels_kept: usize,
    pub match_precision: Option<f64>,
    pub match_recall: Option<f64>,
    pub label_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub epochs_run: u32,
    pub ema_steps: u64,
    pub sm_trained_before_stage2: bool,
    /// Mean RGB center error of copying IR boxes unchanged.
    pub baseline_center_error: f64,
    pub final_center_error_rgb: f64,
    pub final_teacher_center_error_rgb: f64,
    pub label_accuracy: Option<f64>,
    pub match_precision: Option<f64>,
    pub match_recall: Option<f64>,
    /// Largest distance between a scene's offset estimate and the least-squares
    /// optimum of its final box targets.
    pub max_optimum_gap: Option<f64>,
    pub student: DetectorState,
    pub teacher: DetectorState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: PipelineSummary,
}

impl PipelineReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,phase,lambda,l_sup,l_unsup,l_paired,total_loss,matched_count,copied_count,updated_count,\
             mean_center_error_ir,mean_center_error_rgb,match_precision,match_recall,label_accuracy"
        )?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for r in &self.epochs {
            let term = |t: LossTerm| opt(r.losses.iter().find(|l| l.term == t).map(|l| l.value));
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.phase.as_str(),
                opt(r.lambda),
                term(LossTerm::Sup),
                term(LossTerm::Unsup),
                term(LossTerm::Paired),
                r.total_loss,
                r.matched_count,
                r.copied_count,
                r.updated_count,
                r.mean_center_error_ir,
                r.mean_center_error_rgb,
                opt(r.match_precision),
                opt(r.match_recall),
                opt(r.label_accuracy),
            )?;
        }
        Ok(())
    }
}

/// What an observer sees after each epoch's training targets are settled.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    /// Empty when no persistent bag is kept.
    pub bags: &'a [LabelBag],
    /// This epoch's matches, one per scene; empty outside the paired phases.
    pub matches: &'a [MatchResult],
    /// The filtered pools the matches were drawn from.
    pub pools: &'a [Vec<ScoredBox>],
}

pub fn run_pipeline(scenes: &[Scene], cfg: &PipelineConfig) -> Result<PipelineReport> {
    run_pipeline_observed(scenes, cfg, |_| {})
}

/// Per-epoch training targets.
#[derive(Default)]
struct Targets {
    sup: Vec<ClassTarget>,
    unsup: Vec<ClassTarget>,
    paired_cls: Vec<ClassTarget>,
    /// Per scene; empty when the scene has no label.
    boxes: Vec<Vec<BoxTarget>>,
}

fn class_count(scenes: &[Scene]) -> usize {
    scenes
        .iter()
        .flat_map(|s| {
            s.rgb_obs.iter().map(|o| o.scored.class_probs().len()).chain(s.ir_gt.iter().map(|o| o.class_id + 1))
        })
        .max()
        .unwrap_or(1)
}

fn partner_center(scene: &Scene, ir_id: BoxId) -> Option<Point2> {
    scene.rgb_obs.iter().find(|o| o.corr_id == Some(ir_id)).map(|o| o.scored.bbox().center())
}

struct Runner<'a> {
    scenes: &'a [Scene],
    cfg: &'a PipelineConfig,
    classes: usize,
    student: DetectorState,
    teacher: EmaState,
    bags: Vec<LabelBag>,
    /// Supervision pairs per scene from the latest paired epoch.
    supervision: Vec<Vec<LabelPair>>,
}

impl Runner<'_> {
    fn teacher_state(&self) -> DetectorState {
        DetectorState::from_slice(&self.teacher.teacher_params)
    }

    /// Filters the pools batch by batch with a shared threshold.
    fn filter(&self, pools: Vec<Vec<ScoredBox>>) -> Vec<Vec<ScoredBox>> {
        if self.cfg.ablation.no_plf {
            return pools;
        }
        pools
            .chunks(self.cfg.batch_size)
            .flat_map(|batch| filter_grouped(batch, self.cfg.ablation.per_class_plf).0)
            .collect()
    }

    fn unsup_targets(&self, teacher: &DetectorState) -> Result<(Vec<ClassTarget>, usize, usize)> {
        let pools =
            self.scenes.iter().map(|s| detect_rgb_single(&teacher.sm_params(), s)).collect::<Result<Vec<_>>>()?;
        let total = pools.iter().map(Vec::len).sum();
        let kept = self.filter(pools);
        let mut targets = Vec::new();
        for (scene, pool) in self.scenes.iter().zip(&kept) {
            for p in pool {
                let obs = scene
                    .rgb_obs
                    .iter()
                    .find(|o| o.scored.source_id() == p.source_id())
                    .expect("pool ids come from the scene");
                targets.push(ClassTarget { evidence: obs.scored.class_probs()[p.class_id()], weight: 1.0 });
            }
        }
        let n_kept = targets.len();
        Ok((targets, total, n_kept))
    }

    /// Pseudo-label pools for the paired phases.
    fn paired_pools(&self, phase: Phase, teacher: &DetectorState) -> Result<Vec<Vec<ScoredBox>>> {
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, s)| match phase {
                Phase::Stage3 => detect(&teacher.dmd_params(i, self.cfg.capture), s, Modality::Rgb),
                _ => detect_rgb_single(&teacher.sm_params(), s),
            })
            .collect()
    }

    /// Runs PLA for every scene and refreshes the supervision pairs.
    fn assign(&mut self, epoch: u32, pools: &[Vec<ScoredBox>]) -> Result<(Vec<MatchResult>, usize)> {
        let ab = self.cfg.ablation;
        let matcher = self.cfg.matcher();
        let matches = if ab.no_sdlm {
            vec![MatchResult::default(); self.scenes.len()]
        } else {
            self.scenes
                .iter()
                .zip(pools)
                .map(|(s, pool)| match_scene_with(&s.ir_boxes(), pool, &matcher))
                .collect::<Result<Vec<_>>>()?
        };

        let mut updated = 0;
        if ab.no_dlc {
            self.supervision = self
                .scenes
                .iter()
                .zip(matches.iter().zip(pools))
                .map(|(s, (m, pool))| {
                    m.pairs
                        .iter()
                        .map(|p| {
                            let ir = s.ir_object(p.ir_id).expect("matched ids come from the scene").bbox;
                            let rgb = pool.iter().find(|c| c.source_id() == p.rgb_id).expect("pool id").bbox();
                            LabelPair::matched(p.ir_id, ir, *rgb, epoch)
                        })
                        .collect()
                })
                .collect();
            updated = matches.iter().map(|m| m.pairs.len()).sum();
        } else if self.bags.is_empty() {
            self.bags = self
                .scenes
                .iter()
                .zip(matches.iter().zip(pools))
                .map(|(s, (m, pool))| init_bag(s.scene_id, &s.ir_boxes(), m, pool, epoch))
                .collect::<Result<Vec<_>>>()?;
            updated = self.bags.iter().map(LabelBag::matched_count).sum();
        } else if !ab.no_dynamic_update {
            for (bag, (m, pool)) in self.bags.iter_mut().zip(matches.iter().zip(pools)) {
                let (next, n) = update_bag(bag, m, pool, epoch, self.cfg.policy())?;
                *bag = next;
                updated += n;
            }
        }
        if !ab.no_dlc {
            self.supervision = self.bags.iter().map(|b| b.pairs.values().cloned().collect()).collect();
        }
        Ok((matches, updated))
    }

    fn box_targets(&self) -> Vec<Vec<BoxTarget>> {
        self.supervision
            .iter()
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|p| {
                        let w = if p.origin == PairOrigin::Copied { self.cfg.copy_weight } else { 1.0 };
                        BoxTarget::from_pair(p, w)
                    })
                    .collect()
            })
            .collect()
    }

    /// RGB centers the assignment step produced this epoch, per scene. Without
    /// the matcher the assignment is the copied IR box itself.
    fn assigned_centers(&self, matches: &[MatchResult], pools: &[Vec<ScoredBox>]) -> Vec<Vec<(BoxId, Point2)>> {
        if self.cfg.ablation.no_sdlm {
            return self.scenes.iter().map(|s| s.ir_gt.iter().map(|o| (o.id, o.bbox.center())).collect()).collect();
        }
        matches
            .iter()
            .zip(pools)
            .map(|(m, pool)| {
                m.pairs
                    .iter()
                    .map(|p| {
                        let rgb = pool.iter().find(|c| c.source_id() == p.rgb_id).expect("pool id");
                        (p.ir_id, rgb.bbox().center())
                    })
                    .collect()
            })
            .collect()
    }

    /// Precision and recall of this epoch's assignments against the hidden partners.
    fn match_quality(&self, assigned: &[Vec<(BoxId, Point2)>]) -> (Option<f64>, Option<f64>) {
        let (mut correct, mut pairs, mut present) = (0usize, 0usize, 0usize);
        for (scene, pairs_here) in self.scenes.iter().zip(assigned) {
            present += scene.present_correspondences();
            pairs += pairs_here.len();
            correct += pairs_here
                .iter()
                .filter(|(ir_id, c)| {
                    partner_center(scene, *ir_id).is_some_and(|p| p.distance(*c) <= self.cfg.label_tolerance)
                })
                .count();
        }
        let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        (ratio(correct, pairs), ratio(correct, present))
    }

    /// Fraction of IR objects whose current RGB label sits at the true RGB position.
    fn label_accuracy(&self) -> Option<f64> {
        let objects: usize = self.scenes.iter().map(|s| s.ir_gt.len()).sum();
        if objects == 0 || self.supervision.is_empty() {
            return None;
        }
        let correct: usize = self
            .scenes
            .iter()
            .zip(&self.supervision)
            .map(|(s, pairs)| {
                pairs
                    .iter()
                    .filter(|p| {
                        let truth = s.true_rgb_box(p.ir_id()).expect("pair ids come from the scene");
                        truth.center().distance(p.rgb_box.center()) <= self.cfg.label_tolerance
                    })
                    .count()
            })
            .sum();
        Some(correct as f64 / objects as f64)
    }

    fn mean_rgb_error(&self, state: &DetectorState) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, s) in self.scenes.iter().enumerate() {
            let (e, k) = rgb_center_error(&state.dmd_params(i, self.cfg.capture), s)?;
            sum += e;
            n += k;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    fn losses(&self, state: &StageState, t: &Targets) -> Vec<LossValue> {
        let s = &self.student;
        state
            .loss_terms
            .iter()
            .map(|&(term, weight)| {
                let value = match term {
                    LossTerm::Sup => class_loss(s.sm_eta, self.classes, &t.sup).0,
                    LossTerm::Unsup => class_loss(s.sm_eta, self.classes, &t.unsup).0,
                    LossTerm::Paired => {
                        let scenes_with_labels = t.boxes.iter().filter(|b| !b.is_empty()).count().max(1);
                        let boxes: f64 = t.boxes.iter().zip(&s.offsets).map(|(b, o)| box_loss(*o, b).0).sum::<f64>()
                            / scenes_with_labels as f64;
                        boxes + class_loss(s.dmd_eta, self.classes, &t.paired_cls).0
                    }
                };
                LossValue { term, weight, value }
            })
            .collect()
    }

    /// `steps_per_epoch` gradient steps on the weighted loss, each followed by an EMA update.
    fn train(&mut self, state: &StageState, t: &Targets) -> Result<()> {
        let w = |term| state.weight(term);
        let optima: Vec<Option<[f64; 2]>> = t.boxes.iter().map(|b| box_optimum(b)).collect();
        let (lr_box, lr_cls) = (self.cfg.lr_box, self.cfg.lr_cls);
        for _ in 0..self.cfg.steps_per_epoch {
            let s = &mut self.student;
            let mut g_sm = 0.0;
            if w(LossTerm::Sup) > 0.0 {
                g_sm += w(LossTerm::Sup) * class_loss(s.sm_eta, self.classes, &t.sup).1;
            }
            if w(LossTerm::Unsup) > 0.0 {
                g_sm += w(LossTerm::Unsup) * class_loss(s.sm_eta, self.classes, &t.unsup).1;
            }
            s.sm_eta = (s.sm_eta - lr_cls * g_sm).clamp(0.0, 1.0);
            let wp = w(LossTerm::Paired);
            if wp > 0.0 {
                let g = class_loss(s.dmd_eta, self.classes, &t.paired_cls).1;
                s.dmd_eta = (s.dmd_eta - lr_cls * wp * g).clamp(0.0, 1.0);
                // Same gradient as `box_loss`, from the precomputed optimum.
                for (o, opt) in s.offsets.iter_mut().zip(&optima) {
                    if let Some(opt) = opt {
                        o[0] -= lr_box * wp * 2.0 * (o[0] - opt[0]);
                        o[1] -= lr_box * wp * 2.0 * (o[1] - opt[1]);
                    }
                }
            }
            if !s.is_finite() {
                return Err(Error::NonFinite { epoch: state.global_epoch, phase: state.phase.as_str().into() });
            }
            let v = s.to_vec();
            self.teacher.update(&v)?;
        }
        Ok(())
    }
}

/// Runs every phase of the schedule and calls `observer` once per executed epoch.
pub fn run_pipeline_observed<F>(scenes: &[Scene], cfg: &PipelineConfig, mut observer: F) -> Result<PipelineReport>
where
    F: FnMut(&EpochView<'_>),
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("the pipeline needs at least one scene"));
    }
    let student = DetectorState::untrained(scenes.len());
    let teacher = EmaState::new(student.to_vec(), cfg.ema_decay)?;
    let mut run = Runner {
        scenes,
        cfg,
        classes: class_count(scenes),
        student,
        teacher,
        bags: Vec::new(),
        supervision: Vec::new(),
    };

    let baseline = {
        let (sum, n) = scenes.iter().map(copy_baseline_error).fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };

    let mut records = Vec::new();
    let mut previous_phase: Option<Phase> = None;
    let mut sm_trained_before_stage2 = false;
    let mut last_quality = (None, None);
    let mut last_boxes: Vec<Vec<BoxTarget>> = Vec::new();

    for epoch in 0..cfg.stages.total() {
        let state = StageState::at(epoch, &cfg.stages)?;
        let skipped = match state.phase {
            Phase::BurnIn | Phase::Mutual => cfg.ablation.skip_stage1,
            Phase::Stage3 => cfg.ablation.skip_stage3,
            Phase::Stage2 => false,
        };
        if skipped {
            continue;
        }

        if previous_phase != Some(state.phase) {
            if cfg.ablation.ema_reset && previous_phase.is_some() {
                let v = run.student.to_vec();
                run.teacher.reset_to(&v);
            }
            if state.phase == Phase::Stage2 {
                // The RGB stream starts as a copy of the IR stream: no offset,
                // the IR classifier's confidence.
                run.student.dmd_eta = run.student.sm_eta;
                run.student.offsets.iter_mut().for_each(|o| *o = [0.0, 0.0]);
                let mut t = run.teacher_state();
                t.dmd_eta = run.student.dmd_eta;
                t.offsets.clone_from(&run.student.offsets);
                run.teacher.teacher_params = t.to_vec();
            }
        }
        previous_phase = Some(state.phase);

        let teacher = run.teacher_state();
        let mut targets = Targets::default();
        let (mut total, mut kept) = (0, 0);
        let mut matches = Vec::new();
        let mut pools = Vec::new();
        let mut updated = 0;

        if state.weight(LossTerm::Sup) > 0.0 {
            targets.sup = vec![ClassTarget { evidence: 1.0, weight: 1.0 }];
        }
        if state.phase == Phase::Mutual || state.phase == Phase::Stage2 {
            let (t, n_total, n_kept) = run.unsup_targets(&teacher)?;
            targets.unsup = t;
            total = n_total;
            kept = n_kept;
        }
        if matches!(state.phase, Phase::Stage2 | Phase::Stage3) {
            let raw = run.paired_pools(state.phase, &teacher)?;
            total = raw.iter().map(Vec::len).sum();
            pools = run.filter(raw);
            kept = pools.iter().map(Vec::len).sum();
            let (m, n) = run.assign(epoch, &pools)?;
            matches = m;
            updated = n;
            targets.boxes = run.box_targets();
            targets.paired_cls = vec![ClassTarget { evidence: 1.0, weight: 1.0 }];
            last_quality = run.match_quality(&run.assigned_centers(&matches, &pools));
        }
        if matches!(state.phase, Phase::BurnIn | Phase::Mutual) {
            sm_trained_before_stage2 = true;
        }

        run.train(&state, &targets)?;

        let losses = run.losses(&state, &targets);
        let total_loss: f64 = losses.iter().map(|l| l.weight * l.value).sum();
        if !total_loss.is_finite() {
            return Err(Error::NonFinite { epoch, phase: state.phase.as_str().into() });
        }
        let (matched_count, copied_count) = if cfg.ablation.no_dlc {
            (run.supervision.iter().map(Vec::len).sum(), 0)
        } else {
            (run.bags.iter().map(LabelBag::matched_count).sum(), run.bags.iter().map(LabelBag::copied_count).sum())
        };
        let paired = !matches.is_empty();
        let record = EpochRecord {
            epoch,
            phase: state.phase,
            losses,
            total_loss,
            lambda: state.lambda,
            matched_count,
            copied_count,
            updated_count: updated,
            mean_center_error_ir: 0.0,
            mean_center_error_rgb: run.mean_rgb_error(&run.student)?,
            pseudo_labels_total: total,
            pseudo_labels_kept: kept,
            match_precision: if paired { last_quality.0 } else { None },
            match_recall: if paired { last_quality.1 } else { None },
            label_accuracy: if paired { run.label_accuracy() } else { None },
        };
        observer(&EpochView { record: &record, bags: &run.bags, matches: &matches, pools: &pools });
        records.push(record);
        if paired {
            last_boxes = targets.boxes;
        }
    }

    let max_optimum_gap = last_boxes
        .iter()
        .zip(&run.student.offsets)
        .filter_map(|(b, o)| box_optimum(b).map(|opt| (o[0] - opt[0]).hypot(o[1] - opt[1])))
        .reduce(f64::max);
    let teacher = run.teacher_state();
    let summary = PipelineSummary {
        epochs_run: records.len() as u32,
        ema_steps: run.teacher.step,
        sm_trained_before_stage2,
        baseline_center_error: baseline,
        final_center_error_rgb: run.mean_rgb_error(&run.student)?,
        final_teacher_center_error_rgb: run.mean_rgb_error(&teacher)?,
        label_accuracy: run.label_accuracy(),
        match_precision: last_quality.0,
        match_recall: last_quality.1,
        max_optimum_gap,
        student: run.student.clone(),
        teacher,
    };
    Ok(PipelineReport { epochs: records, summary })
}
