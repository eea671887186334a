//! Planning steps shared by the command line and the service: load and
//! segment a volume, build the heat map, filter it by arm reachability,
//! pick an entry and simulate the insertion.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{grid_reachability, CollisionError, CollisionScene, GridReachability, ReachabilityResult};
use crate::geometry::{Dir3, Point3, Vec3};
use crate::mesh::SurfaceMesh;
use crate::planner::{build_heatmap, placement_report, target_strictly_inside, HeatMap, PlacementReport, PlanError, PlanParams, BIOPSY_OFFSET_MM};
use crate::segmentation::{body_mask, extract_surface, Mask, SegmentationError, DEFAULT_CLOSING_RADIUS_MM, DEFAULT_SKIN_THRESHOLD_HU};
use crate::volume::{parse_volume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error("entry {0} is not a feasible vertex")]
    NotFeasible(usize),
    #[error("insertion is not reachable: {0}")]
    NotReachable(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub skin_threshold_hu: i16,
    pub closing_radius_mm: f64,
    /// Halve the lattice before segmenting and planning.
    pub downsample: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { skin_threshold_hu: DEFAULT_SKIN_THRESHOLD_HU, closing_radius_mm: DEFAULT_CLOSING_RADIUS_MM, downsample: false }
    }
}

/// A volume at planning resolution with its body mask and skin surface.
#[derive(Debug)]
pub struct PreparedVolume {
    pub volume: Volume,
    pub body: Mask,
    pub skin: Arc<SurfaceMesh>,
}

impl PreparedVolume {
    pub fn prepare(volume: Volume, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let volume = if cfg.downsample { volume.downsample_half()? } else { volume };
        let body = body_mask(&volume, cfg.skin_threshold_hu, cfg.closing_radius_mm)?;
        let skin = Arc::new(extract_surface(&body)?);
        Ok(Self { volume, body, skin })
    }

    pub fn from_bytes(bytes: &[u8], cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Self::prepare(parse_volume(bytes)?, cfg)
    }

    pub fn load(path: &Path, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Self::from_bytes(&std::fs::read(path)?, cfg)
    }

    pub fn target_inside(&self, target: &Point3) -> bool {
        target_strictly_inside(&self.body, target)
    }

    pub fn heatmap(&self, target: &Point3, params: &PlanParams, workers: usize) -> Result<HeatMap, PipelineError> {
        Ok(build_heatmap(&self.volume, &self.body, self.skin.clone(), target, params, workers)?)
    }

    /// Scene file whose body defaults to this volume's skin.
    pub fn load_scene(&self, path: &Path) -> Result<CollisionScene, PipelineError> {
        Ok(CollisionScene::load_with_body(path, Some(self.skin.clone()))?)
    }
}

/// Heat map, optional reachability pass and the chosen entry.
#[derive(Debug, Clone)]
pub struct Plan {
    pub heatmap: HeatMap,
    pub reach: Option<GridReachability>,
}

impl Plan {
    pub fn entry(&self) -> Option<usize> {
        self.heatmap.optimal_index
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary::of(&self.heatmap, self.reach.as_ref())
    }
}

/// Machine-readable outcome of planning, identical for every front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub target: [f64; 3],
    pub entry_vertex: Option<usize>,
    pub entry: Option<[f64; 3]>,
    pub cost: Option<f64>,
    pub counts: BTreeMap<String, usize>,
    pub cells_checked: usize,
    pub demoted_optima: Vec<usize>,
}

impl PlanSummary {
    pub fn of(hm: &HeatMap, reach: Option<&GridReachability>) -> Self {
        let side = hm.sidecar();
        Self {
            target: side.target,
            entry_vertex: side.optimal,
            entry: side.optimal_position,
            cost: side.optimal_cost,
            counts: side.counts,
            cells_checked: reach.map_or(0, |r| r.cells.len()),
            demoted_optima: reach.map(|r| r.demoted_optima.clone()).unwrap_or_default(),
        }
    }
}

/// Heat map followed, when a scene is given, by the grid reachability pass.
pub fn plan(pv: &PreparedVolume, target: &Point3, params: &PlanParams, scene: Option<&CollisionScene>, workers: usize) -> Result<Plan, PipelineError> {
    let hm = pv.heatmap(target, params, workers)?;
    match scene {
        None => Ok(Plan { heatmap: hm, reach: None }),
        Some(s) => {
            let reach = grid_reachability(s, &hm, params.grid_mm, workers)?;
            Ok(Plan { heatmap: reach.heatmap.clone(), reach: Some(reach) })
        }
    }
}

/// Needle placement error model for simulated execution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Standard deviation of the tip offset perpendicular to the path, per axis.
    pub lateral_sigma_mm: f64,
    /// Standard deviation of the tip offset along the path.
    pub axial_sigma_mm: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lateral_sigma_mm >= 0.0 && self.axial_sigma_mm >= 0.0 && self.lateral_sigma_mm.is_finite() && self.axial_sigma_mm.is_finite()) {
            return Err("noise deviations must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Needle actually placed when aiming the biopsy centre at `target` from
/// `entry`: the whole needle is shifted by the noise, so the lateral error
/// is the same at entry and tip. Returns `(needle_entry, tip)`; with zero
/// noise the biopsy centre lands on the target.
pub fn simulate_needle<R: Rng>(target: &Point3, entry: &Point3, noise: &NoiseModel, rng: &mut R) -> Result<(Point3, Point3), PipelineError> {
    let axis = target - entry;
    if axis.norm() < 1e-9 {
        return Err(PlanError::DegenerateNeedle.into());
    }
    let dir = Dir3::new_normalize(axis);
    let aim = target - dir.into_inner() * BIOPSY_OFFSET_MM;
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = dir.cross(&helper).normalize();
    let v = dir.cross(&u);
    let mut draw = |sigma: f64| if sigma > 0.0 { Normal::new(0.0, sigma).expect("validated sigma").sample(rng) } else { 0.0 };
    let lateral = u * draw(noise.lateral_sigma_mm) + v * draw(noise.lateral_sigma_mm);
    let axial = dir.into_inner() * draw(noise.axial_sigma_mm);
    Ok((entry + lateral, aim + lateral + axial))
}

/// One executed plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub target: [f64; 3],
    pub entry_vertex: usize,
    /// Planned entry on the skin.
    pub entry: [f64; 3],
    /// Where the placed needle's axis crosses the entry plane.
    pub needle_entry: [f64; 3],
    pub tip: [f64; 3],
    pub report: PlacementReport,
    pub waypoints: usize,
}

/// Checks the insertion, simulates it and reports the placement.
pub fn execute<R: Rng>(
    scene: &CollisionScene,
    hm: &HeatMap,
    entry_vertex: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<PlanRecord, PipelineError> {
    let check = check_entry(scene, hm, entry_vertex)?;
    if !check.reachable {
        return Err(PipelineError::NotReachable(describe_failure(&check)));
    }
    let entry = hm.candidates[entry_vertex].position;
    let (needle_entry, tip) = simulate_needle(&hm.target, &entry, noise, rng)?;
    record(hm, entry_vertex, &needle_entry, &tip, check.configs.len())
}

/// Exact insertion check of a feasible heat-map vertex.
pub fn check_entry(scene: &CollisionScene, hm: &HeatMap, entry_vertex: usize) -> Result<ReachabilityResult, PipelineError> {
    let c = hm.candidates.get(entry_vertex).ok_or(PipelineError::NotFeasible(entry_vertex))?;
    if c.classification != crate::planner::Classification::Feasible {
        return Err(PipelineError::NotFeasible(entry_vertex));
    }
    Ok(scene.insertion_feasible(&c.position, &hm.target, None)?)
}

pub fn record(hm: &HeatMap, entry_vertex: usize, needle_entry: &Point3, tip: &Point3, waypoints: usize) -> Result<PlanRecord, PipelineError> {
    let entry = hm.candidates[entry_vertex].position;
    let report = placement_report(&hm.target, needle_entry, tip)?;
    Ok(PlanRecord {
        target: hm.target.into(),
        entry_vertex,
        entry: entry.into(),
        needle_entry: (*needle_entry).into(),
        tip: (*tip).into(),
        report,
        waypoints,
    })
}

pub fn describe_failure(r: &ReachabilityResult) -> String {
    match (r.failing_waypoint, r.reason) {
        (Some(w), Some(reason)) => format!("{reason:?} at waypoint {w}"),
        _ => "unknown failure".into(),
    }
}
