//! Voxel traversal along straight needle paths.
//!
//! Voxel `i` owns the half-open cell `[i - 0.5, i + 0.5)` in continuous
//! index space. A voxel is visited when the segment runs through its cell
//! for a positive length; cells touched only at a corner or an edge are
//! skipped, and axes that cross a boundary at the same parameter step
//! together.

use std::ops::ControlFlow;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Point3;
use crate::segmentation::Mask;
use crate::volume::{Grid, Volume, VoxelIndex, AIR_HU};

/// Chords shorter than this (mm) count as touching, not crossing.
pub const CHORD_EPS_MM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RaycastError {
    #[error("segment is shorter than 1e-9 mm")]
    DegenerateSegment,
    #[error("segment start is not inside the body mask")]
    StartOutsideBody,
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySegment {
    pub start: Point3,
    pub end: Point3,
}

impl RaySegment {
    pub fn new(start: Point3, end: Point3) -> Result<Self, RaycastError> {
        if (end - start).norm() < 1e-9 {
            return Err(RaycastError::DegenerateSegment);
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }
}

/// What the walk saw besides the visited voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkSummary {
    /// Some part of the segment lies outside the lattice.
    pub clipped: bool,
}

/// Calls `visit(voxel, linear_index)` for each crossed voxel, start to end.
pub fn walk<F>(grid: &Grid, seg: &RaySegment, mut visit: F) -> Result<WalkSummary, RaycastError>
where
    F: FnMut(VoxelIndex, usize) -> ControlFlow<()>,
{
    let len = seg.length();
    if len < 1e-9 {
        return Err(RaycastError::DegenerateSegment);
    }
    let c0 = grid.world_to_continuous_index(&seg.start);
    let c1 = grid.world_to_continuous_index(&seg.end);
    // Shifted so that voxel i is the cell [i, i + 1).
    let u0 = [c0[0] + 0.5, c0[1] + 0.5, c0[2] + 0.5];
    let du = [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]];
    let n = grid.dims;

    let mut t_enter = 0.0f64;
    let mut t_exit = 1.0f64;
    for a in 0..3 {
        if du[a] == 0.0 {
            if !(u0[a] >= 0.0 && u0[a] < n[a] as f64) {
                return Ok(WalkSummary { clipped: true });
            }
        } else {
            let ta = (0.0 - u0[a]) / du[a];
            let tb = (n[a] as f64 - u0[a]) / du[a];
            t_enter = t_enter.max(ta.min(tb));
            t_exit = t_exit.min(ta.max(tb));
        }
    }
    let eps_t = CHORD_EPS_MM / len;
    if t_exit - t_enter <= eps_t {
        return Ok(WalkSummary { clipped: true });
    }
    let clipped = t_enter > 0.0 || t_exit < 1.0;

    let mut cell = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let p = u0[a] + t_enter * du[a];
        // The cell the ray occupies just after t_enter.
        let c = if du[a] < 0.0 { p.ceil() - 1.0 } else { p.floor() };
        cell[a] = (c as i64).clamp(0, n[a] as i64 - 1);
        if du[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 1.0 - u0[a]) / du[a];
            t_delta[a] = 1.0 / du[a];
        } else if du[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - u0[a]) / du[a];
            t_delta[a] = -1.0 / du[a];
        }
    }

    let mut t_cur = t_enter;
    loop {
        let t_next = t_max[0].min(t_max[1]).min(t_max[2]);
        if t_next.min(t_exit) - t_cur > eps_t {
            let (i, j, k) = (cell[0] as usize, cell[1] as usize, cell[2] as usize);
            if visit(VoxelIndex::new(i, j, k), grid.linear(i, j, k)).is_break() {
                break;
            }
        }
        if t_next >= t_exit - eps_t {
            break;
        }
        for a in 0..3 {
            if t_max[a] <= t_next + eps_t {
                cell[a] += step[a];
                t_max[a] += t_delta[a];
            }
        }
        if (0..3).any(|a| cell[a] < 0 || cell[a] >= n[a] as i64) {
            break;
        }
        t_cur = t_next;
    }
    Ok(WalkSummary { clipped })
}

/// Voxels crossed by the segment, in order from start to end.
pub fn traverse(v: &Volume, seg: &RaySegment) -> Result<Vec<VoxelIndex>, RaycastError> {
    let mut out = Vec::new();
    walk(v.grid(), seg, |idx, _| {
        out.push(idx);
        ControlFlow::Continue(())
    })?;
    Ok(out)
}

/// Maximum raw HU along the segment. Parts outside the lattice read as air.
pub fn max_hu_along(v: &Volume, seg: &RaySegment) -> Result<i16, RaycastError> {
    let voxels = v.voxels();
    let mut best: Option<i16> = None;
    let summary = walk(v.grid(), seg, |_, l| {
        let hu = voxels[l];
        best = Some(best.map_or(hu, |b| b.max(hu)));
        ControlFlow::Continue(())
    })?;
    Ok(match best {
        Some(b) if summary.clipped => b.max(AIR_HU),
        Some(b) => b,
        None => AIR_HU,
    })
}

/// True when the path leaves the body and later re-enters it, i.e. some
/// other body part sits in the air between the skin and the entry point.
/// Membership is by voxel centre along the traversal chain.
pub fn air_gap_blocked(body: &Mask, seg: &RaySegment) -> Result<bool, RaycastError> {
    let start_in = body.grid().world_to_index(&seg.start).is_some_and(|idx| body.get(idx));
    if !start_in {
        return Err(RaycastError::StartOutsideBody);
    }
    let bits = body.bits();
    let mut left_body = false;
    let mut blocked = false;
    walk(body.grid(), seg, |_, l| {
        if !bits[l] {
            left_body = true;
        } else if left_body {
            blocked = true;
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })?;
    Ok(blocked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatValue {
    pub max_hu: i16,
    pub blocked: bool,
    pub distance_mm: f64,
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, RaycastError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RaycastError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Per-point max HU, air-gap verdict and distance for paths from `target`
/// to each point. Results are in input order for any worker count.
pub fn heat_values(v: &Volume, body: &Mask, target: &Point3, points: &[Point3], workers: usize) -> Result<Vec<HeatValue>, RaycastError> {
    let one = |p: &Point3| -> Result<HeatValue, RaycastError> {
        let seg = RaySegment::new(*target, *p)?;
        Ok(HeatValue { max_hu: max_hu_along(v, &seg)?, blocked: air_gap_blocked(body, &seg)?, distance_mm: seg.length() })
    };
    if workers <= 1 {
        return points.iter().map(one).collect();
    }
    with_workers(workers, || points.par_iter().map(one).collect())?
}
