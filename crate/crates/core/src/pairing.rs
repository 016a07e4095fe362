//! Pose-aligned pairing of frames across repeated traversals of a route.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::FramePose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    /// Acceptance threshold on the additive pose distance (meters + radians).
    /// Not given by the source method; 1.0 is a documented default.
    pub distance_threshold: f64,
    /// Candidates must lie within this many meters of the source position.
    pub radius_m: f64,
    /// When set, only these traversals supply candidates.
    #[serde(default)]
    pub traversal_filter: Option<Vec<String>>,
    /// Use wrapped angle differences (shortest arc) instead of raw `|Δ|`.
    #[serde(default)]
    pub wrap_angles: bool,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 1.0,
            radius_m: 5.0,
            traversal_filter: None,
            wrap_angles: false,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(Error::invalid("distance threshold must be > 0"));
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(Error::invalid("neighborhood radius must be > 0"));
        }
        Ok(())
    }

    fn allows(&self, traversal: &str) -> bool {
        self.traversal_filter
            .as_ref()
            .is_none_or(|f| f.iter().any(|t| t == traversal))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub source_traversal_id: String,
    pub source_frame_id: String,
    pub target_traversal_id: String,
    pub target_frame_id: String,
    pub distance: f64,
    pub accepted: bool,
}

fn angle_diff(a: f64, b: f64, wrap: bool) -> f64 {
    let d = (a - b).abs();
    if wrap {
        let d = d % std::f64::consts::TAU;
        d.min(std::f64::consts::TAU - d)
    } else {
        d
    }
}

/// `‖x_a − x_b‖₂ + |Δroll| + |Δpitch| + |Δyaw|`.
pub fn pose_distance(a: &FramePose, b: &FramePose) -> Result<f64> {
    pose_distance_with(a, b, false)
}

pub fn pose_distance_with(a: &FramePose, b: &FramePose, wrap_angles: bool) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite pose in ({}, {})",
            a.frame_id, b.frame_id
        )));
    }
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    let dz = a.position[2] - b.position[2];
    let translation = (dx * dx + dy * dy + dz * dz).sqrt();
    Ok(translation
        + angle_diff(a.roll, b.roll, wrap_angles)
        + angle_diff(a.pitch, b.pitch, wrap_angles)
        + angle_diff(a.yaw, b.yaw, wrap_angles))
}

fn candidate_order(a: (f64, &FramePose), b: (f64, &FramePose)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| a.1.traversal_id.cmp(&b.1.traversal_id))
        .then_with(|| a.1.frame_id.cmp(&b.1.frame_id))
}

/// Nearest candidate by pose distance; ties go to the lexicographically
/// smallest `(traversal_id, frame_id)`.
pub fn pair_frames<'a>(
    source: &FramePose,
    candidates: impl IntoIterator<Item = &'a FramePose>,
    cfg: &PairingConfig,
) -> Result<Option<PairResult>> {
    let mut best: Option<(f64, &FramePose)> = None;
    for cand in candidates {
        if cand.traversal_id == source.traversal_id {
            return Err(Error::invalid(format!(
                "candidate {} shares traversal {} with the source",
                cand.frame_id, source.traversal_id
            )));
        }
        let d = pose_distance_with(source, cand, cfg.wrap_angles)?;
        if best.is_none_or(|b| candidate_order((d, cand), b) == Ordering::Less) {
            best = Some((d, cand));
        }
    }
    Ok(best.map(|(distance, target)| PairResult {
        source_traversal_id: source.traversal_id.clone(),
        source_frame_id: source.frame_id.clone(),
        target_traversal_id: target.traversal_id.clone(),
        target_frame_id: target.frame_id.clone(),
        distance,
        accepted: distance <= cfg.distance_threshold,
    }))
}

type Cell = (i64, i64, i64);

/// Uniform 3-D grid over frame positions with cell size equal to the radius,
/// so every neighbor lies in the 27 cells around the query.
pub struct SpatialIndex<'a> {
    cell: f64,
    frames: &'a [FramePose],
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a> SpatialIndex<'a> {
    pub fn build(frames: &'a [FramePose], radius: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, f) in frames.iter().enumerate() {
            cells.entry(Self::key(f.position, radius)).or_default().push(i);
        }
        Self {
            cell: radius,
            frames,
            cells,
        }
    }

    fn key(p: [f64; 3], cell: f64) -> Cell {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Frames within `radius` (Euclidean, inclusive) of `center`, in input order.
    pub fn within(&self, center: [f64; 3], radius: f64) -> Vec<&'a FramePose> {
        let (cx, cy, cz) = Self::key(center, self.cell);
        let reach = (radius / self.cell).ceil().max(1.0) as i64;
        let mut hits = Vec::new();
        for ix in cx - reach..=cx + reach {
            for iy in cy - reach..=cy + reach {
                for iz in cz - reach..=cz + reach {
                    if let Some(ids) = self.cells.get(&(ix, iy, iz)) {
                        hits.extend(ids.iter().copied().filter(|&i| {
                            let p = self.frames[i].position;
                            let d2 =
                                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2);
                            d2 <= radius * radius
                        }));
                    }
                }
            }
        }
        hits.sort_unstable();
        hits.into_iter().map(|i| &self.frames[i]).collect()
    }
}

/// Pairs every frame with its nearest neighbor from another traversal and
/// keeps the accepted pairs, in source input order.
pub fn pair_logs(log: &[FramePose], cfg: &PairingConfig) -> Result<Vec<PairResult>> {
    cfg.validate()?;
    for f in log {
        if !f.is_finite() {
            return Err(Error::invalid(format!("non-finite pose {}", f.frame_id)));
        }
    }
    let index = SpatialIndex::build(log, cfg.radius_m);
    let mut out = Vec::new();
    for source in log {
        let candidates = index
            .within(source.position, cfg.radius_m)
            .into_iter()
            .filter(|c| c.traversal_id != source.traversal_id && cfg.allows(&c.traversal_id));
        if let Some(pair) = pair_frames(source, candidates, cfg)? {
            if pair.accepted {
                out.push(pair);
            }
        }
    }
    Ok(out)
}
