//! Three-stage training schedule: phases, active branches, loss composition,
//! the unsupervised-weight ramp and the EMA teacher.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.9999;

/// Epoch counts: burn-in, mutual learning, guided decoupling, self-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub k1: u32,
    pub k2: u32,
    pub k3: u32,
    pub k4: u32,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { k1: 20, k2: 10, k3: 15, k4: 20 }
    }
}

impl StageConfig {
    pub fn new(k1: u32, k2: u32, k3: u32, k4: u32) -> Result<Self> {
        let cfg = Self { k1, k2, k3, k4 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.k1, self.k2, self.k3, self.k4].contains(&0) {
            return Err(Error::invalid(format!("every stage needs at least one epoch: {self:?}")));
        }
        Ok(())
    }

    pub fn total(&self) -> u32 {
        self.k1 + self.k2 + self.k3 + self.k4
    }

    /// Half-open epoch interval of a phase.
    pub fn span(&self, phase: Phase) -> std::ops::Range<u32> {
        let (a, b, c) = (self.k1, self.k1 + self.k2, self.k1 + self.k2 + self.k3);
        match phase {
            Phase::BurnIn => 0..a,
            Phase::Mutual => a..b,
            Phase::Stage2 => b..c,
            Phase::Stage3 => c..self.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BurnIn,
    Mutual,
    Stage2,
    Stage3,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::BurnIn, Phase::Mutual, Phase::Stage2, Phase::Stage3];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::BurnIn => "burn_in",
            Phase::Mutual => "mutual",
            Phase::Stage2 => "stage2",
            Phase::Stage3 => "stage3",
        }
    }

    /// Training stage (1, 2 or 3) the phase belongs to.
    pub fn stage(&self) -> u8 {
        match self {
            Phase::BurnIn | Phase::Mutual => 1,
            Phase::Stage2 => 2,
            Phase::Stage3 => 3,
        }
    }

    pub fn active_branches(&self) -> BTreeSet<Branch> {
        use Branch::*;
        match self {
            Phase::BurnIn | Phase::Mutual => [SmStudent, SmTeacher].into(),
            Phase::Stage2 => [SmStudent, SmTeacher, DmdStudent].into(),
            Phase::Stage3 => [DmdStudent, DmdTeacher].into(),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    SmStudent,
    SmTeacher,
    DmdStudent,
    DmdTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    #[serde(rename = "L_sup")]
    Sup,
    #[serde(rename = "L_unsup")]
    Unsup,
    #[serde(rename = "L_paired")]
    Paired,
}

impl LossTerm {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossTerm::Sup => "L_sup",
            LossTerm::Unsup => "L_unsup",
            LossTerm::Paired => "L_paired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub global_epoch: u32,
    pub phase: Phase,
    pub active_branches: BTreeSet<Branch>,
    pub loss_terms: Vec<(LossTerm, f64)>,
    pub lambda: Option<f64>,
}

impl StageState {
    pub fn at(global_epoch: u32, cfg: &StageConfig) -> Result<Self> {
        let phase = phase_of(global_epoch, cfg)?;
        let lambda = match phase {
            Phase::Mutual => Some(lambda_at(global_epoch - cfg.k1, cfg.k2)?),
            _ => None,
        };
        let mut state = StageState {
            global_epoch,
            phase,
            active_branches: phase.active_branches(),
            loss_terms: Vec::new(),
            lambda,
        };
        state.loss_terms = loss_terms_at(&state);
        Ok(state)
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        self.loss_terms.iter().find(|(t, _)| *t == term).map_or(0.0, |(_, w)| *w)
    }
}

pub fn phase_of(global_epoch: u32, cfg: &StageConfig) -> Result<Phase> {
    Phase::ALL
        .into_iter()
        .find(|p| cfg.span(*p).contains(&global_epoch))
        .ok_or(Error::OutOfRange { epoch: global_epoch, total: cfg.total() })
}

/// Linear ramp of the unsupervised weight over the mutual-learning epochs,
/// endpoint inclusive: 0 at the first epoch and 1 at the last.
pub fn lambda_at(mutual_epoch_index: u32, k2: u32) -> Result<f64> {
    if mutual_epoch_index >= k2 {
        return Err(Error::invalid(format!("mutual epoch index {mutual_epoch_index} outside [0, {k2})")));
    }
    if k2 == 1 {
        return Ok(1.0);
    }
    Ok(mutual_epoch_index as f64 / (k2 - 1) as f64)
}

pub fn loss_terms_at(state: &StageState) -> Vec<(LossTerm, f64)> {
    use LossTerm::*;
    match state.phase {
        Phase::BurnIn => vec![(Sup, 1.0)],
        Phase::Mutual => vec![(Sup, 1.0), (Unsup, state.lambda.unwrap_or(0.0))],
        Phase::Stage2 => vec![(Sup, 1.0), (Unsup, 1.0), (Paired, 1.0)],
        Phase::Stage3 => vec![(Paired, 1.0)],
    }
}

/// Teacher parameters tracked as an exponential moving average of the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub teacher_params: Vec<f64>,
    pub decay: f64,
    pub step: u64,
}

impl EmaState {
    pub fn new(initial: Vec<f64>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        if initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("EMA initial parameters must be finite"));
        }
        Ok(Self { teacher_params: initial, decay, step: 0 })
    }

    /// In-place form of [`ema_update`].
    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        if student.len() != self.teacher_params.len() {
            return Err(Error::invalid(format!(
                "EMA dimension mismatch: teacher {} vs student {}",
                self.teacher_params.len(),
                student.len()
            )));
        }
        if student.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("student parameters must be finite"));
        }
        let d = self.decay;
        for (t, s) in self.teacher_params.iter_mut().zip(student) {
            *t = d * *t + (1.0 - d) * s;
        }
        self.step += 1;
        Ok(())
    }

    /// Replaces the teacher with the student (used by the reset ablation).
    pub fn reset_to(&mut self, student: &[f64]) {
        self.teacher_params = student.to_vec();
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student`, elementwise.
pub fn ema_update(ema: &EmaState, student_params: &[f64]) -> Result<EmaState> {
    let mut next = ema.clone();
    next.update(student_params)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_examples() {
        let cfg = StageConfig::default();
        assert_eq!(phase_of(0, &cfg).unwrap(), Phase::BurnIn);
        assert_eq!(phase_of(19, &cfg).unwrap(), Phase::BurnIn);
        assert_eq!(phase_of(20, &cfg).unwrap(), Phase::Mutual);
        assert_eq!(phase_of(30, &cfg).unwrap(), Phase::Stage2);
        assert_eq!(phase_of(45, &cfg).unwrap(), Phase::Stage3);
        assert_eq!(phase_of(64, &cfg).unwrap(), Phase::Stage3);
        assert!(matches!(phase_of(65, &cfg), Err(Error::OutOfRange { epoch: 65, total: 65 })));
    }

    #[test]
    fn stage_config_rejects_empty_stage() {
        assert!(StageConfig::new(0, 1, 1, 1).is_err());
        assert!(StageConfig::new(1, 1, 1, 0).is_err());
        assert_eq!(StageConfig::new(1, 2, 3, 4).unwrap().total(), 10);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_at(0, 10).unwrap(), 0.0);
        assert_eq!(lambda_at(9, 10).unwrap(), 1.0);
        assert!((lambda_at(4, 10).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(lambda_at(0, 1).unwrap(), 1.0);
        assert!(lambda_at(10, 10).is_err());
    }

    #[test]
    fn loss_sets_per_phase() {
        let cfg = StageConfig::default();
        let terms = |e| StageState::at(e, &cfg).unwrap().loss_terms;
        assert_eq!(terms(0), vec![(LossTerm::Sup, 1.0)]);
        assert_eq!(terms(20), vec![(LossTerm::Sup, 1.0), (LossTerm::Unsup, 0.0)]);
        assert_eq!(terms(29), vec![(LossTerm::Sup, 1.0), (LossTerm::Unsup, 1.0)]);
        assert_eq!(terms(30), vec![(LossTerm::Sup, 1.0), (LossTerm::Unsup, 1.0), (LossTerm::Paired, 1.0)]);
        assert_eq!(terms(64), vec![(LossTerm::Paired, 1.0)]);

        let mid = StageState { lambda: Some(0.5), ..StageState::at(25, &cfg).unwrap() };
        assert_eq!(loss_terms_at(&mid), vec![(LossTerm::Sup, 1.0), (LossTerm::Unsup, 0.5)]);
    }

    #[test]
    fn branch_activation() {
        use Branch::*;
        assert_eq!(Phase::BurnIn.active_branches(), [SmStudent, SmTeacher].into());
        assert_eq!(Phase::Stage2.active_branches(), [SmStudent, SmTeacher, DmdStudent].into());
        assert_eq!(Phase::Stage3.active_branches(), [DmdStudent, DmdTeacher].into());
    }

    #[test]
    fn ema_examples() {
        let e = EmaState::new(vec![3.0, -2.0], 0.0).unwrap();
        assert_eq!(ema_update(&e, &[1.0, 5.0]).unwrap().teacher_params, vec![1.0, 5.0]);

        let e = EmaState::new(vec![0.25, 7.0], 0.9999).unwrap();
        let next = ema_update(&e, &[0.25, 7.0]).unwrap();
        assert!((next.teacher_params[0] - 0.25).abs() < 1e-15);
        assert!((next.teacher_params[1] - 7.0).abs() < 1e-14);
        assert_eq!(next.step, 1);

        let e = EmaState::new(vec![0.0], 0.9999).unwrap();
        assert!((ema_update(&e, &[1.0]).unwrap().teacher_params[0] - 1e-4).abs() < 1e-15);

        assert!(ema_update(&e, &[1.0, 2.0]).is_err());
        assert!(ema_update(&e, &[f64::NAN]).is_err());
        assert!(EmaState::new(vec![0.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn phases_tile_schedule(k1 in 1u32..30, k2 in 1u32..30, k3 in 1u32..30, k4 in 1u32..30) {
            let cfg = StageConfig::new(k1, k2, k3, k4).unwrap();
            let mut last = Phase::BurnIn;
            for e in 0..cfg.total() {
                let p = phase_of(e, &cfg).unwrap();
                prop_assert!(p >= last);
                last = p;
                let hits = Phase::ALL.iter().filter(|q| cfg.span(**q).contains(&e)).count();
                prop_assert_eq!(hits, 1);
            }
            prop_assert!(phase_of(cfg.total(), &cfg).is_err());
        }

        #[test]
        fn lambda_is_monotone(k2 in 1u32..100) {
            let values: Vec<f64> = (0..k2).map(|i| lambda_at(i, k2).unwrap()).collect();
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*values.last().unwrap(), 1.0);
            if k2 > 1 { prop_assert_eq!(values[0], 0.0); }
        }

        #[test]
        fn teacher_stays_in_convex_hull(init in -10.0..10.0f64,
                                        history in prop::collection::vec(-10.0..10.0f64, 1..50),
                                        decay in 0.0..0.999f64) {
            let mut ema = EmaState::new(vec![init], decay).unwrap();
            let mut lo = init;
            let mut hi = init;
            for s in history {
                ema.update(&[s]).unwrap();
                lo = lo.min(s);
                hi = hi.max(s);
                let t = ema.teacher_params[0];
                prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
            }
        }
    }
}
