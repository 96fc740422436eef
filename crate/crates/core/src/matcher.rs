//! Shape-aware cross-modality label matching.
//!
//! Each labeled-modality box opens a search region (itself, scaled by `beta`
//! about its center). Unclaimed candidates whose centers fall inside are ranked
//! by IoU with the source box and the best one is claimed. Sources are visited in
//! ascending id order, so the result is greedy and order dependent.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ScoredBox;
use crate::geometry::{iou, point_in_obb, OrientedBox};
use crate::BoxId;

pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRegion {
    pub region: OrientedBox,
    pub source_id: BoxId,
}

impl SearchRegion {
    pub fn contains(&self, candidate: &ScoredBox) -> bool {
        point_in_obb(candidate.bbox().center(), &self.region)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub ir_id: BoxId,
    pub rgb_id: BoxId,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_ir: Vec<BoxId>,
    pub unmatched_rgb: Vec<BoxId>,
}

impl MatchResult {
    pub fn rgb_for(&self, ir_id: BoxId) -> Option<&MatchedPair> {
        self.pairs.iter().find(|p| p.ir_id == ir_id)
    }
}

/// How candidates are admitted before IoU ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Center must lie in the scaled search region.
    #[default]
    ShapeAware,
    /// Any unclaimed candidate with positive IoU; no center gate.
    IouOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub beta: f64,
    pub strategy: MatchStrategy,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, strategy: MatchStrategy::ShapeAware }
    }
}

pub fn search_region(ir: &OrientedBox, beta: f64) -> Result<SearchRegion> {
    search_region_for(ir, beta, 0)
}

fn search_region_for(ir: &OrientedBox, beta: f64, source_id: BoxId) -> Result<SearchRegion> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("search region scale must be positive, got {beta}")));
    }
    Ok(SearchRegion { region: ir.scaled(beta)?, source_id })
}

/// Unclaimed pool entries whose centers lie in the search region, in pool order.
pub fn candidates_for<'a>(
    ir: &OrientedBox,
    rgb_pool: &'a [ScoredBox],
    paired: &HashSet<BoxId>,
    beta: f64,
) -> Result<Vec<&'a ScoredBox>> {
    let region = search_region(ir, beta)?;
    Ok(rgb_pool.iter().filter(|c| !paired.contains(&c.source_id()) && region.contains(c)).collect())
}

fn check_unique<I: IntoIterator<Item = BoxId>>(ids: I, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

pub fn match_scene(ir_boxes: &[(BoxId, OrientedBox)], rgb_pool: &[ScoredBox], beta: f64) -> Result<MatchResult> {
    match_scene_with(ir_boxes, rgb_pool, &MatcherConfig { beta, strategy: MatchStrategy::ShapeAware })
}

pub fn match_scene_with(
    ir_boxes: &[(BoxId, OrientedBox)],
    rgb_pool: &[ScoredBox],
    cfg: &MatcherConfig,
) -> Result<MatchResult> {
    check_unique(ir_boxes.iter().map(|(id, _)| *id), "ir")?;
    check_unique(rgb_pool.iter().map(ScoredBox::source_id), "rgb")?;

    let mut order: Vec<&(BoxId, OrientedBox)> = ir_boxes.iter().collect();
    order.sort_by_key(|(id, _)| *id);

    let mut paired = HashSet::new();
    let mut result = MatchResult::default();
    for &(ir_id, ir_box) in order {
        let admitted: Vec<&ScoredBox> = match cfg.strategy {
            MatchStrategy::ShapeAware => candidates_for(&ir_box, rgb_pool, &paired, cfg.beta)?,
            MatchStrategy::IouOnly => rgb_pool.iter().filter(|c| !paired.contains(&c.source_id())).collect(),
        };
        // Highest IoU wins; equal IoU goes to the lower candidate id.
        let best = admitted
            .into_iter()
            .map(|c| (iou(&ir_box, c.bbox()), c.source_id()))
            .filter(|(v, _)| *v > 0.0)
            .fold(None::<(f64, BoxId)>, |best, cur| match best {
                Some(b) if b.0 > cur.0 || (b.0 == cur.0 && b.1 < cur.1) => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((v, rgb_id)) => {
                paired.insert(rgb_id);
                result.pairs.push(MatchedPair { ir_id, rgb_id, iou: v });
            }
            None => result.unmatched_ir.push(ir_id),
        }
    }
    let claimed: BTreeSet<BoxId> = paired.into_iter().collect();
    result.unmatched_rgb = rgb_pool.iter().map(ScoredBox::source_id).filter(|id| !claimed.contains(id)).collect();
    Ok(result)
}
