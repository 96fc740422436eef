//! Per-scene label bag with epoch-wise correction.
//!
//! The bag holds exactly one IR↔RGB pair per IR ground-truth box. It starts as
//! the matched pairs plus copies of every unmatched IR box, and afterwards a
//! pair's RGB side changes only when that IR box is matched again.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ScoredBox;
use crate::geometry::{iou, OrientedBox};
use crate::matcher::MatchResult;
use crate::BoxId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    Matched,
    Copied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    ir_id: BoxId,
    ir_box: OrientedBox,
    pub rgb_box: OrientedBox,
    pub origin: PairOrigin,
    pub last_update_epoch: u32,
}

impl LabelPair {
    pub fn matched(ir_id: BoxId, ir_box: OrientedBox, rgb_box: OrientedBox, epoch: u32) -> Self {
        Self { ir_id, ir_box, rgb_box, origin: PairOrigin::Matched, last_update_epoch: epoch }
    }

    pub fn copied(ir_id: BoxId, ir_box: OrientedBox, epoch: u32) -> Self {
        Self { ir_id, ir_box, rgb_box: ir_box, origin: PairOrigin::Copied, last_update_epoch: epoch }
    }

    pub fn ir_id(&self) -> BoxId {
        self.ir_id
    }

    pub fn ir_box(&self) -> &OrientedBox {
        &self.ir_box
    }
}

/// How a fresh match is applied to an existing pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    /// Any fresh match replaces the RGB side.
    #[default]
    Overwrite,
    /// Replace only when the new RGB box overlaps the IR box strictly more.
    ImproveOnly,
    /// Move the RGB center a fraction `alpha` toward the fresh match.
    /// Comparator for progressive center correction; not the default path.
    CenterSmoothing { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBag {
    pub scene_id: u64,
    pub pairs: BTreeMap<BoxId, LabelPair>,
    pub epoch: u32,
}

impl LabelBag {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn matched_count(&self) -> usize {
        self.pairs.values().filter(|p| p.origin == PairOrigin::Matched).count()
    }

    pub fn copied_count(&self) -> usize {
        self.len() - self.matched_count()
    }

    /// One record per pair, in ascending IR id order.
    pub fn records(&self) -> Vec<BagRecord> {
        self.pairs
            .values()
            .map(|p| BagRecord {
                scene_id: self.scene_id,
                ir_id: p.ir_id,
                epoch: self.epoch,
                origin: p.origin,
                ir_box: p.ir_box.to_array(),
                rgb_box: p.rgb_box.to_array(),
                last_update_epoch: p.last_update_epoch,
            })
            .collect()
    }

    pub fn from_records(records: &[BagRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("empty bag snapshot"))?;
        let mut pairs = BTreeMap::new();
        for r in records {
            if r.scene_id != first.scene_id || r.epoch != first.epoch {
                return Err(Error::invalid("bag snapshot mixes scenes or epochs"));
            }
            let pair = LabelPair {
                ir_id: r.ir_id,
                ir_box: OrientedBox::from_array(r.ir_box)?,
                rgb_box: OrientedBox::from_array(r.rgb_box)?,
                origin: r.origin,
                last_update_epoch: r.last_update_epoch,
            };
            if pairs.insert(r.ir_id, pair).is_some() {
                return Err(Error::invalid(format!("duplicate ir id {} in snapshot", r.ir_id)));
            }
        }
        Ok(Self { scene_id: first.scene_id, pairs, epoch: first.epoch })
    }
}

/// Serialized form of one bag pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub scene_id: u64,
    pub ir_id: BoxId,
    pub epoch: u32,
    pub origin: PairOrigin,
    pub ir_box: [f64; 5],
    pub rgb_box: [f64; 5],
    pub last_update_epoch: u32,
}

/// Writes the snapshot of several bags as one record per line.
pub fn write_bag_snapshot<W: Write>(mut out: W, bags: &[LabelBag]) -> Result<()> {
    for bag in bags {
        for rec in bag.records() {
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn pool_index(rgb_pool: &[ScoredBox]) -> HashMap<BoxId, &ScoredBox> {
    rgb_pool.iter().map(|c| (c.source_id(), c)).collect()
}

pub fn init_bag(
    scene_id: u64,
    ir_gt: &[(BoxId, OrientedBox)],
    matches: &MatchResult,
    rgb_pool: &[ScoredBox],
    epoch: u32,
) -> Result<LabelBag> {
    let pool = pool_index(rgb_pool);
    let gt: HashMap<BoxId, OrientedBox> = ir_gt.iter().copied().collect();
    let mut pairs = BTreeMap::new();
    for m in &matches.pairs {
        let ir_box =
            gt.get(&m.ir_id).ok_or_else(|| Error::invalid(format!("match references unknown ir id {}", m.ir_id)))?;
        let rgb = pool
            .get(&m.rgb_id)
            .ok_or_else(|| Error::invalid(format!("match references unknown rgb id {}", m.rgb_id)))?;
        pairs.insert(m.ir_id, LabelPair::matched(m.ir_id, *ir_box, *rgb.bbox(), epoch));
    }
    for (id, b) in ir_gt {
        pairs.entry(*id).or_insert_with(|| LabelPair::copied(*id, *b, epoch));
    }
    Ok(LabelBag { scene_id, pairs, epoch })
}

/// Applies this epoch's matches to the bag. Returns the new bag and how many
/// pairs actually changed.
pub fn update_bag(
    bag: &LabelBag,
    new_matches: &MatchResult,
    rgb_pool: &[ScoredBox],
    epoch: u32,
    policy: UpdatePolicy,
) -> Result<(LabelBag, usize)> {
    if epoch <= bag.epoch {
        return Err(Error::invalid(format!("bag update epoch {epoch} must exceed current epoch {}", bag.epoch)));
    }
    let pool = pool_index(rgb_pool);
    let mut next = bag.clone();
    next.epoch = epoch;
    let mut updated = 0;
    for m in &new_matches.pairs {
        let pair = next
            .pairs
            .get_mut(&m.ir_id)
            .ok_or_else(|| Error::invalid(format!("match references ir id {} absent from the bag", m.ir_id)))?;
        let fresh = *pool
            .get(&m.rgb_id)
            .ok_or_else(|| Error::invalid(format!("match references unknown rgb id {}", m.rgb_id)))?
            .bbox();
        let candidate = match policy {
            UpdatePolicy::Overwrite => Some(fresh),
            UpdatePolicy::ImproveOnly => {
                (iou(&pair.ir_box, &fresh) > iou(&pair.ir_box, &pair.rgb_box)).then_some(fresh)
            }
            UpdatePolicy::CenterSmoothing { alpha } => {
                let old = pair.rgb_box.center();
                let c = old + (fresh.center() - old) * alpha;
                Some(OrientedBox::new(c.x, c.y, fresh.w(), fresh.h(), fresh.theta())?)
            }
        };
        if let Some(rgb_box) = candidate {
            if rgb_box != pair.rgb_box || pair.origin != PairOrigin::Matched {
                pair.rgb_box = rgb_box;
                pair.origin = PairOrigin::Matched;
                pair.last_update_epoch = epoch;
                updated += 1;
            }
        }
    }
    Ok((next, updated))
}
