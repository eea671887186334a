//! Entry-point heat map: per-vertex classification, insertion cost and
//! optimal entry selection, plus the needle placement metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Dir3, Point3, Vec3};
use crate::mesh::{MeshError, SurfaceMesh};
use crate::raycast::{self, heat_values, RaySegment, RaycastError};
use crate::segmentation::{dilate, threshold, Mask};
use crate::volume::Volume;

/// Heat-map PLY quality values for vertices without a cost.
pub const SENTINEL_OUT_OF_RANGE: f64 = 2.0;
pub const SENTINEL_OCCLUDED: f64 = 3.0;
pub const SENTINEL_AIR_BLOCKED: f64 = 4.0;
pub const SENTINEL_UNREACHABLE: f64 = 5.0;

/// Distance from the guide tip to the centre of the biopsy notch.
pub const BIOPSY_OFFSET_MM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("value outside the cost domain: {0}")]
    OutOfDomain(String),
    #[error("target is not strictly inside the body mask")]
    TargetOutsideBody,
    #[error("needle entry and tip coincide")]
    DegenerateNeedle,
    #[error("invalid plan parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Raycast(#[from] RaycastError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("heat map sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the safety margin around dense-tissue occlusions is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Vertices within `margin_mm` of an occluded vertex (3D distance).
    #[default]
    Surface,
    /// Rays crossing the dense mask dilated by `margin_mm`.
    DenseMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanParams {
    pub needle_length_mm: f64,
    pub margin_mm: f64,
    pub dense_hu_threshold: i16,
    pub weight_distance: f64,
    pub weight_angle: f64,
    pub grid_mm: f64,
    pub margin_mode: MarginMode,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            needle_length_mm: 160.0,
            margin_mm: 5.0,
            dense_hu_threshold: 200,
            weight_distance: 0.5,
            weight_angle: 0.5,
            grid_mm: 30.0,
            margin_mode: MarginMode::Surface,
        }
    }
}

impl PlanParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        let positive = [
            ("needle_length_mm", self.needle_length_mm),
            ("margin_mm", self.margin_mm),
            ("weight_distance", self.weight_distance),
            ("weight_angle", self.weight_angle),
            ("grid_mm", self.grid_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlanError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if ((self.weight_distance + self.weight_angle) - 1.0).abs() > 1e-9 {
            return Err(PlanError::InvalidParams("weights must sum to 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)?;
        let p: PlanParams = serde_json::from_str(&text).map_err(|e| PlanError::InvalidParams(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Classification {
    OutOfRange,
    Occluded,
    MarginOccluded,
    AirBlocked,
    Unreachable,
    Feasible,
}

impl Classification {
    pub const ALL: [Classification; 6] = [
        Classification::OutOfRange,
        Classification::Occluded,
        Classification::MarginOccluded,
        Classification::AirBlocked,
        Classification::Unreachable,
        Classification::Feasible,
    ];
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCandidate {
    pub position: Point3,
    pub normal: Dir3,
    pub distance_mm: f64,
    /// Angle between the insertion direction and the skin normal, folded into [0, 90].
    pub angle_deg: f64,
    /// Only computed for vertices within needle range.
    pub max_hu: Option<i16>,
    pub classification: Classification,
    pub cost: Option<f64>,
}

/// Ray-derived data for one vertex, before classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointHeat {
    pub distance_mm: f64,
    pub max_hu: Option<i16>,
    pub blocked: bool,
}

/// q = w_d·d/l + w_a·a/90.
pub fn cost(d_mm: f64, a_deg: f64, params: &PlanParams) -> Result<f64, PlanError> {
    if !(0.0..=params.needle_length_mm).contains(&d_mm) {
        return Err(PlanError::OutOfDomain(format!("distance {d_mm} mm")));
    }
    if !(0.0..=90.0).contains(&a_deg) {
        return Err(PlanError::OutOfDomain(format!("angle {a_deg} deg")));
    }
    Ok(weighted_cost(d_mm, a_deg, params.needle_length_mm, params.weight_distance, params.weight_angle))
}

fn weighted_cost(d_mm: f64, a_deg: f64, l: f64, wd: f64, wa: f64) -> f64 {
    wd * (d_mm / l) + wa * (a_deg / 90.0)
}

/// Angle in degrees between the needle line and the normal, in [0, 90].
pub fn insertion_angle_deg(direction: &Vec3, normal: &Dir3) -> f64 {
    let c = (direction.dot(normal) / direction.norm()).abs().min(1.0);
    c.acos().to_degrees().clamp(0.0, 90.0)
}

/// Classifies vertices by priority OutOfRange > AirBlocked > Occluded >
/// MarginOccluded > Feasible. Margin neighbourhoods are measured in 3D
/// between vertex positions, inclusive of `margin_mm`.
pub fn classify(positions: &[Point3], heat: &[PointHeat], params: &PlanParams) -> Vec<Classification> {
    assert_eq!(positions.len(), heat.len());
    let mut out: Vec<Classification> = heat
        .iter()
        .map(|h| {
            if h.distance_mm > params.needle_length_mm {
                Classification::OutOfRange
            } else if h.blocked {
                Classification::AirBlocked
            } else if h.max_hu.is_some_and(|hu| hu >= params.dense_hu_threshold) {
                Classification::Occluded
            } else {
                Classification::Feasible
            }
        })
        .collect();
    let occluded: Vec<usize> = (0..out.len()).filter(|&i| out[i] == Classification::Occluded).collect();
    if occluded.is_empty() || params.margin_mm <= 0.0 {
        return out;
    }
    let cell = params.margin_mm;
    let key = |p: &Point3| [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64];
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for &i in &occluded {
        buckets.entry(key(&positions[i])).or_default().push(i);
    }
    let m2 = params.margin_mm * params.margin_mm;
    for i in 0..out.len() {
        if out[i] != Classification::Feasible {
            continue;
        }
        let k = key(&positions[i]);
        let near = (-1..=1).any(|dz| {
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    buckets
                        .get(&[k[0] + dx, k[1] + dy, k[2] + dz])
                        .is_some_and(|list| list.iter().any(|&o| (positions[o] - positions[i]).norm_squared() <= m2))
                })
            })
        });
        if near {
            out[i] = Classification::MarginOccluded;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct HeatMap {
    pub mesh: Arc<SurfaceMesh>,
    pub candidates: Vec<EntryCandidate>,
    pub target: Point3,
    pub params: PlanParams,
    pub optimal_index: Option<usize>,
}

impl HeatMap {
    /// Assembles a heat map from classifications, recomputing angles and
    /// costs and selecting the optimum.
    pub fn assemble(mesh: Arc<SurfaceMesh>, target: Point3, params: PlanParams, heat: &[PointHeat], classes: &[Classification]) -> Self {
        let candidates = (0..mesh.vertices.len())
            .map(|i| {
                let position = mesh.vertices[i];
                let normal = mesh.normals[i];
                let dir = target - position;
                let angle_deg = if dir.norm() > 0.0 { insertion_angle_deg(&dir, &normal) } else { 0.0 };
                let classification = classes[i];
                let cost = (classification == Classification::Feasible).then(|| {
                    weighted_cost(heat[i].distance_mm, angle_deg, params.needle_length_mm, params.weight_distance, params.weight_angle)
                });
                EntryCandidate { position, normal, distance_mm: heat[i].distance_mm, angle_deg, max_hu: heat[i].max_hu, classification, cost }
            })
            .collect();
        let mut hm = HeatMap { mesh, candidates, target, params, optimal_index: None };
        hm.optimal_index = select_optimal(&hm);
        hm
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn optimal(&self) -> Option<&EntryCandidate> {
        self.optimal_index.map(|i| &self.candidates[i])
    }

    pub fn classifications(&self) -> Vec<Classification> {
        self.candidates.iter().map(|c| c.classification).collect()
    }

    pub fn feasible_indices(&self) -> Vec<usize> {
        (0..self.candidates.len()).filter(|&i| self.candidates[i].classification == Classification::Feasible).collect()
    }

    pub fn counts(&self) -> BTreeMap<Classification, usize> {
        let mut m: BTreeMap<Classification, usize> = Classification::ALL.iter().map(|&c| (c, 0)).collect();
        for c in &self.candidates {
            *m.entry(c.classification).or_default() += 1;
        }
        m
    }

    /// Marks vertices Unreachable, drops their cost and reselects.
    pub fn mark_unreachable(&mut self, vertices: &[usize]) {
        for &v in vertices {
            let c = &mut self.candidates[v];
            if c.classification == Classification::Feasible {
                c.classification = Classification::Unreachable;
                c.cost = None;
            }
        }
        self.optimal_index = select_optimal(self);
    }

    /// Same heat map with costs recomputed under other (positive) weights.
    pub fn reweighted(&self, weight_distance: f64, weight_angle: f64) -> HeatMap {
        let mut hm = self.clone();
        hm.params.weight_distance = weight_distance;
        hm.params.weight_angle = weight_angle;
        for c in &mut hm.candidates {
            if c.classification == Classification::Feasible {
                c.cost = Some(weighted_cost(c.distance_mm, c.angle_deg, hm.params.needle_length_mm, weight_distance, weight_angle));
            }
        }
        hm.optimal_index = select_optimal(&hm);
        hm
    }

    /// Per-vertex PLY quality: cost for Feasible vertices, sentinels otherwise.
    pub fn quality(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| match c.classification {
                Classification::Feasible => c.cost.expect("feasible vertices carry a cost"),
                Classification::OutOfRange => SENTINEL_OUT_OF_RANGE,
                Classification::Occluded | Classification::MarginOccluded => SENTINEL_OCCLUDED,
                Classification::AirBlocked => SENTINEL_AIR_BLOCKED,
                Classification::Unreachable => SENTINEL_UNREACHABLE,
            })
            .collect()
    }

    pub fn to_ply(&self) -> String {
        self.mesh.to_ply(Some(&self.quality()))
    }

    pub fn sidecar(&self) -> HeatMapSidecar {
        HeatMapSidecar {
            target: [self.target.x, self.target.y, self.target.z],
            params: self.params.clone(),
            optimal: self.optimal_index,
            optimal_position: self.optimal().map(|c| [c.position.x, c.position.y, c.position.z]),
            optimal_cost: self.optimal().and_then(|c| c.cost),
            counts: self.counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Writes `<path>` (PLY) and `<path>.json` (sidecar).
    pub fn save(&self, ply_path: &std::path::Path) -> Result<(), PlanError> {
        std::fs::write(ply_path, self.to_ply())?;
        let side = serde_json::to_string_pretty(&self.sidecar()).map_err(|e| PlanError::Sidecar(e.to_string()))?;
        std::fs::write(sidecar_path(ply_path), side)?;
        Ok(())
    }

    /// Rebuilds a heat map from an exported PLY: classes come from the
    /// quality sentinels, distances, angles and costs are recomputed for
    /// `target`. Max HU values are not stored in the file.
    pub fn from_ply(mesh: SurfaceMesh, quality: &[f64], target: Point3, params: PlanParams) -> Result<HeatMap, PlanError> {
        if quality.len() != mesh.vertices.len() {
            return Err(PlanError::Sidecar("one quality value per vertex expected".into()));
        }
        let classes: Vec<Classification> = quality
            .iter()
            .map(|&q| {
                if q == SENTINEL_OUT_OF_RANGE {
                    Classification::OutOfRange
                } else if q == SENTINEL_OCCLUDED {
                    Classification::Occluded
                } else if q == SENTINEL_AIR_BLOCKED {
                    Classification::AirBlocked
                } else if q == SENTINEL_UNREACHABLE {
                    Classification::Unreachable
                } else {
                    Classification::Feasible
                }
            })
            .collect();
        let heat: Vec<PointHeat> = mesh.vertices.iter().map(|p| PointHeat { distance_mm: (p - target).norm(), max_hu: None, blocked: false }).collect();
        Ok(HeatMap::assemble(Arc::new(mesh), target, params, &heat, &classes))
    }
}

pub fn sidecar_path(ply_path: &std::path::Path) -> std::path::PathBuf {
    let mut s = ply_path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMapSidecar {
    pub target: [f64; 3],
    pub params: PlanParams,
    pub optimal: Option<usize>,
    pub optimal_position: Option<[f64; 3]>,
    pub optimal_cost: Option<f64>,
    pub counts: BTreeMap<String, usize>,
}

/// Feasible vertex of minimal cost; ties go to the lowest vertex id.
pub fn select_optimal(hm: &HeatMap) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in hm.candidates.iter().enumerate() {
        if c.classification != Classification::Feasible {
            continue;
        }
        let q = c.cost.expect("feasible vertices carry a cost");
        if best.is_none_or(|(_, b)| q < b) {
            best = Some((i, q));
        }
    }
    best.map(|(i, _)| i)
}

/// True if the target voxel and its 26 neighbours all lie in the body.
pub fn target_strictly_inside(body: &Mask, target: &Point3) -> bool {
    body.grid().world_to_index(target).is_some_and(|idx| body.is_interior(idx))
}

/// Raycasts every in-range vertex and returns per-vertex heat data.
pub fn vertex_heat(v: &Volume, body: &Mask, mesh: &SurfaceMesh, target: &Point3, params: &PlanParams, workers: usize) -> Result<Vec<PointHeat>, PlanError> {
    let distances: Vec<f64> = mesh.vertices.iter().map(|p| (p - target).norm()).collect();
    let in_range: Vec<usize> = (0..distances.len()).filter(|&i| distances[i] <= params.needle_length_mm).collect();
    let points: Vec<Point3> = in_range.iter().map(|&i| mesh.vertices[i]).collect();
    let values = heat_values(v, body, target, &points, workers)?;
    let mut heat: Vec<PointHeat> = distances.iter().map(|&d| PointHeat { distance_mm: d, max_hu: None, blocked: false }).collect();
    for (&i, hv) in in_range.iter().zip(values) {
        heat[i].max_hu = Some(hv.max_hu);
        heat[i].blocked = hv.blocked;
    }
    Ok(heat)
}

/// Heat-map construction: raycast, classify, cost and select.
pub fn build_heatmap(v: &Volume, body: &Mask, mesh: Arc<SurfaceMesh>, target: &Point3, params: &PlanParams, workers: usize) -> Result<HeatMap, PlanError> {
    params.validate()?;
    if !target_strictly_inside(body, target) {
        return Err(PlanError::TargetOutsideBody);
    }
    let heat = vertex_heat(v, body, &mesh, target, params, workers)?;
    let classes = match params.margin_mode {
        MarginMode::Surface => classify(&mesh.vertices, &heat, params),
        MarginMode::DenseMask => {
            let surface = classify(&mesh.vertices, &heat, &PlanParams { margin_mm: 0.0, ..params.clone() });
            dense_mask_margin(v, &mesh.vertices, target, surface, params, workers)?
        }
    };
    Ok(HeatMap::assemble(mesh, *target, params.clone(), &heat, &classes))
}

/// Marks Feasible vertices whose ray crosses the dense mask dilated by the margin.
fn dense_mask_margin(
    v: &Volume,
    positions: &[Point3],
    target: &Point3,
    mut classes: Vec<Classification>,
    params: &PlanParams,
    workers: usize,
) -> Result<Vec<Classification>, PlanError> {
    let dense = dilate(&threshold(v, params.dense_hu_threshold), params.margin_mm);
    let bits = dense.bits();
    let feasible: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == Classification::Feasible).collect();
    let hit = |&i: &usize| -> Result<bool, RaycastError> {
        let seg = RaySegment::new(*target, positions[i])?;
        let mut any = false;
        raycast::walk(dense.grid(), &seg, |_, l| {
            any = bits[l];
            if any {
                std::ops::ControlFlow::Break(())
            } else {
                std::ops::ControlFlow::Continue(())
            }
        })?;
        Ok(any)
    };
    let hits: Vec<bool> = if workers <= 1 {
        feasible.iter().map(hit).collect::<Result<_, _>>()?
    } else {
        use rayon::prelude::*;
        raycast::with_workers(workers, || feasible.par_iter().map(hit).collect::<Result<Vec<_>, _>>())??
    };
    for (&i, h) in feasible.iter().zip(hits) {
        if h {
            classes[i] = Classification::MarginOccluded;
        }
    }
    Ok(classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub deviation_3d_mm: f64,
    pub deviation_lateral_mm: f64,
    pub biopsy_center: Point3,
}

/// Centre of the biopsy sample, 10 mm beyond the tip along the needle.
pub fn biopsy_center(tip: &Point3, direction: &Dir3) -> Point3 {
    tip + direction.into_inner() * BIOPSY_OFFSET_MM
}

/// 3D deviation to the biopsy centre and lateral deviation from the
/// detected needle axis (the line through entry and tip).
pub fn placement_report(target: &Point3, entry: &Point3, tip: &Point3) -> Result<PlacementReport, PlanError> {
    let axis = tip - entry;
    if axis.norm() < 1e-9 {
        return Err(PlanError::DegenerateNeedle);
    }
    let dir = Dir3::new_normalize(axis);
    let center = biopsy_center(tip, &dir);
    let rel = target - tip;
    let lateral = (rel - dir.into_inner() * rel.dot(&dir)).norm();
    let d3 = (target - center).norm();
    // The centre lies on the axis, so lateral <= 3D up to rounding.
    Ok(PlacementReport { deviation_3d_mm: d3, deviation_lateral_mm: lateral.min(d3), biopsy_center: center })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use crate::phantom::{self, TorsoSpec};
    use crate::segmentation::{body_mask, extract_surface, DEFAULT_CLOSING_RADIUS_MM, DEFAULT_SKIN_THRESHOLD_HU};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> PlanParams {
        PlanParams::default()
    }

    #[test]
    fn cost_cases() {
        assert_eq!(cost(0.0, 0.0, &p()).unwrap(), 0.0);
        assert_eq!(cost(160.0, 90.0, &p()).unwrap(), 1.0);
        assert!((cost(80.0, 45.0, &p()).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(cost(161.0, 0.0, &p()), Err(PlanError::OutOfDomain(_))));
        assert!(matches!(cost(10.0, 91.0, &p()), Err(PlanError::OutOfDomain(_))));
    }

    #[test]
    fn params_validation() {
        assert!(p().validate().is_ok());
        assert!(PlanParams { weight_distance: 0.7, ..p() }.validate().is_err());
        assert!(PlanParams { margin_mm: 0.0, ..p() }.validate().is_err());
        let parsed: PlanParams = serde_json::from_str(r#"{"needle_length_mm": 120}"#).unwrap();
        assert_eq!(parsed, PlanParams { needle_length_mm: 120.0, ..p() });
        assert!(serde_json::from_str::<PlanParams>(r#"{"needle_len": 120}"#).is_err());
    }

    fn heat(d: f64, hu: i16) -> PointHeat {
        PointHeat { distance_mm: d, max_hu: Some(hu), blocked: false }
    }

    #[test]
    fn classify_priorities() {
        let pos = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0), Point3::new(50.0, 0.0, 0.0), Point3::new(60.0, 0.0, 0.0), Point3::new(0.0, 3.0, 0.0)];
        let mut h = vec![heat(161.0, 2000), heat(100.0, -50), heat(100.0, -50), heat(100.0, 500), heat(100.0, 900)];
        h[4].blocked = true;
        let c = classify(&pos, &h, &p());
        assert_eq!(
            c,
            vec![
                Classification::OutOfRange,
                Classification::Feasible,
                Classification::Feasible,
                Classification::Occluded,
                Classification::AirBlocked
            ]
        );
        h[0].distance_mm = 100.0;
        let c = classify(&pos, &h, &p());
        assert_eq!(c[0], Classification::Occluded);
        // 4 mm from an occluded vertex with a 5 mm margin.
        assert_eq!(c[1], Classification::MarginOccluded);
        assert_eq!(c[4], Classification::AirBlocked);
    }

    fn random_heat(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Point3>, Vec<PointHeat>) {
        let pos: Vec<Point3> = (0..n).map(|_| Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0))).collect();
        let h = (0..n)
            .map(|_| {
                let d = rng.random_range(10.0..200.0);
                PointHeat { distance_mm: d, max_hu: (d <= 160.0).then(|| rng.random_range(-1000..1500)), blocked: rng.random_bool(0.05) }
            })
            .collect();
        (pos, h)
    }

    #[test]
    fn margin_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (pos, h) = random_heat(&mut rng, 400);
            let params = PlanParams { margin_mm: rng.random_range(1.0..12.0), ..p() };
            let got = classify(&pos, &h, &params);
            for i in 0..pos.len() {
                let base = if h[i].distance_mm > params.needle_length_mm {
                    Classification::OutOfRange
                } else if h[i].blocked {
                    Classification::AirBlocked
                } else if h[i].max_hu.unwrap() >= params.dense_hu_threshold {
                    Classification::Occluded
                } else {
                    let near = (0..pos.len()).any(|j| {
                        let occ = h[j].distance_mm <= params.needle_length_mm && !h[j].blocked && h[j].max_hu.unwrap() >= params.dense_hu_threshold;
                        occ && (pos[i] - pos[j]).norm() <= params.margin_mm
                    });
                    if near {
                        Classification::MarginOccluded
                    } else {
                        Classification::Feasible
                    }
                };
                assert_eq!(got[i], base, "vertex {i}");
            }
        }
    }

    fn random_heatmap(rng: &mut ChaCha8Rng) -> HeatMap {
        let mesh = Arc::new(icosphere(Point3::origin(), 80.0, 2));
        let target = Point3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let heat: Vec<PointHeat> = mesh.vertices.iter().map(|v| heat((v - target).norm(), rng.random_range(-200..260))).collect();
        let classes = classify(&mesh.vertices, &heat, &p());
        HeatMap::assemble(mesh, target, p(), &heat, &classes)
    }

    fn brute_argmin(hm: &HeatMap) -> Option<usize> {
        let mut best = None;
        for i in 0..hm.len() {
            if let Some(q) = hm.candidates[i].cost {
                match best {
                    Some((_, b)) if q >= b => {}
                    _ => best = Some((i, q)),
                }
            }
        }
        best.map(|(i, _)| i)
    }

    #[test]
    fn selection_matches_brute_force_and_weight_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let hm = random_heatmap(&mut rng);
            assert_eq!(hm.optimal_index, brute_argmin(&hm));
            let s = rng.random_range(0.1..10.0);
            assert_eq!(hm.reweighted(0.5 * s, 0.5 * s).optimal_index, hm.optimal_index);
        }
    }

    #[test]
    fn selection_edge_cases() {
        let mesh = Arc::new(icosphere(Point3::origin(), 50.0, 1));
        let n = mesh.vertices.len();
        let heat: Vec<PointHeat> = mesh.vertices.iter().map(|v| self::heat(v.coords.norm(), 1000)).collect();
        let mut classes = vec![Classification::Occluded; n];
        let none = HeatMap::assemble(mesh.clone(), Point3::origin(), p(), &heat, &classes);
        assert_eq!(none.optimal_index, None);
        classes[7] = Classification::Feasible;
        let one = HeatMap::assemble(mesh.clone(), Point3::origin(), p(), &heat, &classes);
        assert_eq!(one.optimal_index, Some(7));
        // Equal costs everywhere: lowest id wins.
        let mut all = HeatMap::assemble(mesh, Point3::origin(), p(), &heat, &vec![Classification::Feasible; n]);
        for c in &mut all.candidates {
            c.cost = Some(0.25);
        }
        assert_eq!(select_optimal(&all), Some(0));
    }

    fn sphere_case(radius: f64) -> (Volume, Mask) {
        let v = phantom::sphere(48, 3.0, radius, phantom::SOFT_TISSUE_HU);
        let body = body_mask(&v, DEFAULT_SKIN_THRESHOLD_HU, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        (v, body)
    }

    #[test]
    fn homogeneous_sphere_centre_target_is_uniform() {
        let (v, body) = sphere_case(60.0);
        // Analytic mesh slightly inside the voxel body, radial normals.
        let mesh = Arc::new(icosphere(Point3::origin(), 55.0, 3));
        let hm = build_heatmap(&v, &body, mesh, &Point3::origin(), &p(), 1).unwrap();
        assert!(hm.candidates.iter().all(|c| c.classification == Classification::Feasible));
        let q0 = hm.candidates[0].cost.unwrap();
        assert!(hm.candidates.iter().all(|c| (c.cost.unwrap() - q0).abs() < 1e-6));
    }

    #[test]
    fn off_centre_target_picks_nearest_surface() {
        let (v, body) = sphere_case(60.0);
        let mesh = Arc::new(icosphere(Point3::origin(), 55.0, 3));
        let target = Point3::new(12.0, -20.0, 9.0);
        let hm = build_heatmap(&v, &body, mesh.clone(), &target, &p(), 1).unwrap();
        assert_eq!(hm.optimal_index, brute_argmin(&hm));
        let nearest = (0..mesh.len()).min_by(|&a, &b| (mesh.vertices[a] - target).norm().total_cmp(&(mesh.vertices[b] - target).norm())).unwrap();
        let chosen = hm.optimal().unwrap();
        // The optimum lies on the ray from the centre through the target, up to mesh resolution.
        let dir = (target - Point3::origin()).normalize();
        assert!((chosen.position.coords.normalize() - dir).norm() < 0.1);
        assert!((chosen.position - mesh.vertices[nearest]).norm() < 10.0);
    }

    #[test]
    fn target_outside_body_errors() {
        let (v, body) = sphere_case(60.0);
        let mesh = Arc::new(icosphere(Point3::origin(), 55.0, 1));
        let r = build_heatmap(&v, &body, mesh, &Point3::new(68.0, 0.0, 0.0), &p(), 1);
        assert!(matches!(r, Err(PlanError::TargetOutsideBody)));
    }

    #[test]
    fn aperture_cone_is_the_only_window() {
        let spec = TorsoSpec { dims: 64, spacing_mm: 4.0, ..Default::default() };
        let (v, truth) = phantom::torso(&spec);
        let body = body_mask(&v, DEFAULT_SKIN_THRESHOLD_HU, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        let mesh = Arc::new(extract_surface(&body).unwrap());
        let params = PlanParams { needle_length_mm: 400.0, ..p() };
        let hm = build_heatmap(&v, &body, mesh, &truth.target, &params, 2).unwrap();
        // Voxelisation blurs the cone edge by about one voxel diagonal at the shell.
        let blur = (spec.spacing_mm * 3f64.sqrt() / truth.shell_inner_mm).to_degrees();
        let half = truth.aperture_half_angle_deg;
        let mut inside = 0;
        for c in &hm.candidates {
            let ang = truth.aperture_angle_deg(&c.position);
            match c.classification {
                Classification::Feasible | Classification::MarginOccluded => assert!(ang <= half + blur, "{ang}"),
                Classification::Occluded => assert!(ang >= half - blur, "{ang}"),
                _ => {}
            }
            if ang < half - blur && c.classification == Classification::Feasible {
                inside += 1;
            }
        }
        assert!(inside > 10);
        assert!(hm.optimal().is_some_and(|c| truth.aperture_angle_deg(&c.position) <= half));
        // Worker count does not change anything.
        let again = build_heatmap(&v, &body, hm.mesh.clone(), &truth.target, &params, 1).unwrap();
        assert_eq!(again.candidates, hm.candidates);
        // The arm shadows part of the torso surface.
        assert!(hm.counts()[&Classification::AirBlocked] > 0);
    }

    #[test]
    fn dense_mask_margin_mode_marks_rays_near_bone() {
        let spec = TorsoSpec { dims: 64, spacing_mm: 4.0, arm: false, ..Default::default() };
        let (v, truth) = phantom::torso(&spec);
        let body = body_mask(&v, DEFAULT_SKIN_THRESHOLD_HU, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        let mesh = Arc::new(extract_surface(&body).unwrap());
        let surface = build_heatmap(&v, &body, mesh.clone(), &truth.target, &p(), 1).unwrap();
        let dense = build_heatmap(&v, &body, mesh, &truth.target, &PlanParams { margin_mode: MarginMode::DenseMask, ..p() }, 1).unwrap();
        // Same occlusions; only the margin class may differ.
        for (a, b) in surface.candidates.iter().zip(&dense.candidates) {
            let fold = |c: Classification| if c == Classification::MarginOccluded { Classification::Feasible } else { c };
            assert_eq!(fold(a.classification), fold(b.classification));
        }
        assert!(dense.counts()[&Classification::MarginOccluded] > 0);
    }

    #[test]
    fn ply_roundtrip_keeps_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut hm = random_heatmap(&mut rng);
        let f = hm.feasible_indices();
        hm.mark_unreachable(&f[..3]);
        let (mesh, q) = SurfaceMesh::parse_ply(&hm.to_ply()).unwrap();
        let back = HeatMap::from_ply(mesh, &q.unwrap(), hm.target, hm.params.clone()).unwrap();
        let fold = |c: Classification| if c == Classification::MarginOccluded { Classification::Occluded } else { c };
        for (a, b) in hm.candidates.iter().zip(&back.candidates) {
            assert_eq!(fold(a.classification), b.classification);
        }
        assert_eq!(back.optimal_index, hm.optimal_index);
        assert_eq!(hm.counts()[&Classification::Unreachable], 3);
    }

    #[test]
    fn biopsy_centre_cases() {
        let z = Dir3::new_normalize(Vec3::z());
        assert_eq!(biopsy_center(&Point3::origin(), &z), Point3::new(0.0, 0.0, 10.0));
        let x = Dir3::new_normalize(Vec3::x());
        assert_eq!(biopsy_center(&Point3::new(5.0, 5.0, 5.0), &x), Point3::new(15.0, 5.0, 5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let tip = crate::geometry::testing::random_point(&mut rng, 100.0);
            let d = Dir3::new_normalize(crate::geometry::testing::random_point(&mut rng, 1.0).coords + Vec3::new(0.0, 0.0, 2.0));
            assert!(((biopsy_center(&tip, &d) - tip).norm() - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn placement_report_cases() {
        let entry = Point3::new(0.0, 0.0, 100.0);
        let tip = Point3::new(0.0, 0.0, 20.0);
        let r = placement_report(&Point3::new(0.0, 0.0, 10.0), &entry, &tip).unwrap();
        assert_eq!((r.deviation_3d_mm, r.deviation_lateral_mm), (0.0, 0.0));
        let r = placement_report(&Point3::new(1.0, 0.0, 10.0), &entry, &tip).unwrap();
        assert!((r.deviation_3d_mm - 1.0).abs() < 1e-12 && (r.deviation_lateral_mm - 1.0).abs() < 1e-12);
        assert!(matches!(placement_report(&Point3::origin(), &tip, &tip), Err(PlanError::DegenerateNeedle)));
    }

    proptest::proptest! {
        #[test]
        fn cost_strictly_increasing(d in 0.0f64..159.0, a in 0.0f64..89.0, dd in 0.01f64..1.0, da in 0.01f64..1.0) {
            let q = cost(d, a, &p()).unwrap();
            proptest::prop_assert!(cost(d + dd, a, &p()).unwrap() > q);
            proptest::prop_assert!(cost(d, a + da, &p()).unwrap() > q);
        }

        #[test]
        fn raising_threshold_never_adds_occlusion(seed in 0u64..1000, raise in 1i16..800) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pos, h) = random_heat(&mut rng, 200);
            let lo = classify(&pos, &h, &p());
            let hi = classify(&pos, &h, &PlanParams { dense_hu_threshold: 200 + raise, ..p() });
            for (a, b) in lo.iter().zip(&hi) {
                proptest::prop_assert!(!(*a == Classification::Feasible && *b != Classification::Feasible));
            }
        }

        #[test]
        fn placement_matches_projection_oracle(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rp = |rng: &mut ChaCha8Rng| crate::geometry::testing::random_point(rng, 100.0);
            let (target, entry, tip) = (rp(&mut rng), rp(&mut rng), rp(&mut rng));
            let r = placement_report(&target, &entry, &tip).unwrap();
            // Projection onto the line via the parametric foot point.
            let ab = tip - entry;
            let t = (target - entry).dot(&ab) / ab.dot(&ab);
            let foot = entry + ab * t;
            let centre = tip + ab / ab.norm() * 10.0;
            proptest::prop_assert!((r.deviation_lateral_mm - (target - foot).norm()).abs() < 1e-9);
            proptest::prop_assert!((r.deviation_3d_mm - (target - centre).norm()).abs() < 1e-9);
            proptest::prop_assert!(r.deviation_lateral_mm <= r.deviation_3d_mm);
        }
    }
}
