//! Capsule collision checks against the skin mesh, gantry and table, and the
//! per-entry-point reachability verdict built on the arm simulator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Dir3, Point3, RigidTransform, Vec3};
use crate::kinematics::{ik_dls, insertion_waypoints, ArmModel, IkOptions, JointConfig, KinematicsError, DEFAULT_APPROACH_OFFSET_MM, DOF};
use crate::mesh::{MeshError, SurfaceMesh};
use crate::planner::{Classification, HeatMap};
use crate::raycast::with_workers;

pub const LINK_INFLATION_MM: f64 = 10.0;
pub const NEEDLE_LENGTH_MM: f64 = 190.0;
pub const NEEDLE_RADIUS_MM: f64 = 1.2;
/// Default table size (x width, y thickness, z length).
pub const TABLE_SIZE_MM: [f64; 3] = [500.0, 200.0, 2000.0];

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("scene: {0}")]
    Format(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Point3,
    pub b: Point3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Point3, b: Point3, radius: f64) -> Self {
        Self { a, b, radius }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Capsule {
        Capsule { a: t.transform_point(&self.a), b: t.transform_point(&self.b), radius: self.radius }
    }
}

/// Solid half-space behind a plane; the normal points to the free side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub point: Point3,
    pub normal: Dir3,
}

impl HalfSpace {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn transformed(&self, t: &RigidTransform) -> HalfSpace {
        HalfSpace { point: t.transform_point(&self.point), normal: Dir3::new_normalize(t.transform_vector(&self.normal)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point3,
    pub half_extents: Vec3,
    /// Columns are the box axes in world coordinates.
    pub rotation: Matrix3<f64>,
}

impl OrientedBox {
    pub fn axis_aligned(min: Point3, max: Point3) -> Self {
        Self { center: nalgebra::center(&min, &max), half_extents: (max - min) * 0.5, rotation: Matrix3::identity() }
    }

    pub fn transformed(&self, t: &RigidTransform) -> OrientedBox {
        OrientedBox { center: t.transform_point(&self.center), half_extents: self.half_extents, rotation: t.rotation() * self.rotation }
    }

    fn local(&self, p: &Point3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    fn outside_distance(&self, local: &Vec3) -> f64 {
        let h = &self.half_extents;
        Vec3::new((local.x.abs() - h.x).max(0.0), (local.y.abs() - h.y).max(0.0), (local.z.abs() - h.z).max(0.0)).norm()
    }
}

/// Closest points between segments `p1q1` and `p2q2`; returns the squared
/// distance and the two parameters.
pub fn closest_segment_segment(p1: &Point3, q1: &Point3, p2: &Point3, q2: &Point3) -> (f64, f64, f64) {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (s, t);
    if a <= EPS && e <= EPS {
        s = 0.0;
        t = 0.0;
    } else if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let s0 = if denom > EPS * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    ((c1 - c2).norm_squared(), s, t)
}

/// Closest point of a triangle to `p` by Voronoi-region classification.
pub fn closest_point_triangle(p: &Point3, tri: &[Point3; 3]) -> Point3 {
    let [a, b, c] = tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    a + ab * (vb / denom) + ac * (vc / denom)
}

/// Minimum distance between segment `ab` and a triangle.
pub fn segment_triangle_distance(a: &Point3, b: &Point3, tri: &[Point3; 3]) -> f64 {
    let mut best2 = f64::INFINITY;
    for e in 0..3 {
        let (d2, _, _) = closest_segment_segment(a, b, &tri[e], &tri[(e + 1) % 3]);
        best2 = best2.min(d2);
    }
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    if n.norm_squared() <= 1e-24 * (tri[1] - tri[0]).norm_squared().max(1e-300) {
        // Degenerate triangle: the edges are the whole shape.
        return best2.sqrt();
    }
    for p in [a, b] {
        best2 = best2.min((closest_point_triangle(p, tri) - p).norm_squared());
    }
    let (sa, sb) = ((a - tri[0]).dot(&n), (b - tri[0]).dot(&n));
    if (sa < 0.0 && sb > 0.0) || (sa > 0.0 && sb < 0.0) {
        let p = a + (b - a) * (sa / (sa - sb));
        best2 = best2.min((closest_point_triangle(&p, tri) - p).norm_squared());
    }
    best2.sqrt()
}

/// Minimum distance between segment `ab` and a solid box.
pub fn segment_box_distance(a: &Point3, b: &Point3, bx: &OrientedBox) -> f64 {
    let la = bx.local(a);
    let lb = bx.local(b);
    let d = lb - la;
    // Slab clip: zero when the segment enters the box.
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let mut hits = true;
    for ax in 0..3 {
        let h = bx.half_extents[ax];
        if d[ax].abs() < 1e-300 {
            if la[ax].abs() > h {
                hits = false;
                break;
            }
        } else {
            let (u, v) = ((-h - la[ax]) / d[ax], (h - la[ax]) / d[ax]);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
            if t0 > t1 {
                hits = false;
                break;
            }
        }
    }
    if hits {
        return 0.0;
    }
    // Distance to a convex set is convex along the segment.
    let f = |t: f64| bx.outside_distance(&(la + d * t));
    let (mut lo, mut hi) = (0.0, 1.0);
    const G: f64 = 0.381_966_011_250_105_1;
    for _ in 0..90 {
        let m1 = lo + (hi - lo) * G;
        let m2 = hi - (hi - lo) * G;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.0).min(f(1.0)).min(f(0.5 * (lo + hi)))
}

pub fn capsule_triangle_intersect(c: &Capsule, tri: &[Point3; 3]) -> bool {
    segment_triangle_distance(&c.a, &c.b, tri) < c.radius
}

pub fn capsule_plane_intersect(c: &Capsule, hs: &HalfSpace) -> bool {
    hs.signed_distance(&c.a).min(hs.signed_distance(&c.b)) < c.radius
}

pub fn capsule_box_intersect(c: &Capsule, bx: &OrientedBox) -> bool {
    segment_box_distance(&c.a, &c.b, bx) < c.radius
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    lo: Point3,
    hi: Point3,
    /// Leaf: first triangle slot; inner: left child.
    first: u32,
    /// Leaf: triangle count; inner: 0.
    count: u32,
    right: u32,
}

/// Bounding-volume hierarchy over mesh triangles for capsule queries.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    mesh: Arc<SurfaceMesh>,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const BVH_LEAF: usize = 4;

impl TriangleBvh {
    pub fn build(mesh: Arc<SurfaceMesh>) -> Self {
        let n = mesh.triangles.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<Point3> = (0..n)
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                Point3::from((a.coords + b.coords + c.coords) / 3.0)
            })
            .collect();
        let mut bvh = TriangleBvh { mesh, nodes: Vec::new(), order: Vec::new() };
        if n > 0 {
            bvh.build_node(&mut order, 0, n, &centroids);
        }
        bvh.order = order;
        bvh
    }

    fn bounds(&self, tris: &[u32]) -> (Point3, Point3) {
        let mut lo = Point3::from(Vec3::repeat(f64::INFINITY));
        let mut hi = Point3::from(Vec3::repeat(f64::NEG_INFINITY));
        for &t in tris {
            for p in self.mesh.triangle(t as usize) {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    fn build_node(&mut self, order: &mut [u32], start: usize, end: usize, centroids: &[Point3]) -> u32 {
        let (lo, hi) = self.bounds(&order[start..end]);
        let id = self.nodes.len() as u32;
        self.nodes.push(BvhNode { lo, hi, first: start as u32, count: (end - start) as u32, right: 0 });
        if end - start <= BVH_LEAF {
            return id;
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
        });
        let left = self.build_node(order, start, mid, centroids);
        let right = self.build_node(order, mid, end, centroids);
        self.nodes[id as usize] = BvhNode { lo, hi, first: left, count: 0, right };
        id
    }

    pub fn mesh(&self) -> &Arc<SurfaceMesh> {
        &self.mesh
    }

    /// True if some triangle lies closer than the capsule radius.
    pub fn intersects(&self, c: &Capsule) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let r = Vec3::repeat(c.radius);
        let qlo = c.a.inf(&c.b) - r;
        let qhi = c.a.sup(&c.b) + r;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if (0..3).any(|ax| n.lo[ax] > qhi[ax] || n.hi[ax] < qlo[ax]) {
                continue;
            }
            if n.count > 0 {
                let slots = &self.order[n.first as usize..(n.first + n.count) as usize];
                if slots.iter().any(|&t| capsule_triangle_intersect(c, &self.mesh.triangle(t as usize))) {
                    return true;
                }
            } else {
                stack.push(n.first);
                stack.push(n.right);
            }
        }
        false
    }
}

/// Capsule fixed to one arm frame (0 = base, 1..=7 after each joint,
/// 8 = needle tip); endpoints are in that frame's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCapsule {
    pub frame: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius_mm: f64,
}

/// Link capsules matching [`ArmModel::reference`], before inflation.
pub fn reference_links() -> Vec<LinkCapsule> {
    let link = |frame, len: f64, radius_mm| LinkCapsule { frame, a: [0.0; 3], b: [0.0, 0.0, len], radius_mm };
    vec![
        link(0, 350.0, 60.0),
        link(2, 410.0, 55.0),
        link(4, 410.0, 50.0),
        link(6, 130.0, 45.0),
        // End-effector holder between the flange and the needle hub.
        LinkCapsule { frame: 8, a: [0.0, 0.0, -250.0], b: [0.0, 0.0, -NEEDLE_LENGTH_MM], radius_mm: 15.0 },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleSpec {
    pub length_mm: f64,
    pub radius_mm: f64,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self { length_mm: NEEDLE_LENGTH_MM, radius_mm: NEEDLE_RADIUS_MM }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    IkFailure,
    LinkCollision,
    NeedleSideCollision,
    JointLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityResult {
    pub reachable: bool,
    pub failing_waypoint: Option<usize>,
    pub reason: Option<FailureReason>,
    /// Joint solutions for the waypoints that succeeded.
    #[serde(skip)]
    pub configs: Vec<JointConfig>,
}

impl ReachabilityResult {
    fn fail(at: usize, reason: FailureReason, configs: Vec<JointConfig>) -> Self {
        Self { reachable: false, failing_waypoint: Some(at), reason: Some(reason), configs }
    }
}

/// Obstacles and the arm, all in CT coordinates.
#[derive(Debug, Clone)]
pub struct CollisionScene {
    pub body: TriangleBvh,
    pub gantry: Option<HalfSpace>,
    pub table: Option<OrientedBox>,
    pub arm: ArmModel,
    /// Maps arm base coordinates into CT coordinates.
    pub base_in_ct: RigidTransform,
    pub links: Vec<LinkCapsule>,
    pub needle: NeedleSpec,
    pub link_inflation_mm: f64,
    pub approach_offset_mm: f64,
}

impl CollisionScene {
    /// Reference arm at `base_in_ct` with only the body as an obstacle.
    pub fn new(body: Arc<SurfaceMesh>, arm: ArmModel, base_in_ct: RigidTransform) -> Self {
        Self {
            body: TriangleBvh::build(body),
            gantry: None,
            table: None,
            arm,
            base_in_ct,
            links: reference_links(),
            needle: NeedleSpec::default(),
            link_inflation_mm: LINK_INFLATION_MM,
            approach_offset_mm: DEFAULT_APPROACH_OFFSET_MM,
        }
    }

    /// Table of [`TABLE_SIZE_MM`] centred under the body in x and z, on its
    /// +y side (posterior in LPS, where a supine body rests).
    pub fn default_table(body: &SurfaceMesh) -> OrientedBox {
        let (lo, hi) = body.bounds();
        let c = nalgebra::center(&lo, &hi);
        let [w, t, l] = TABLE_SIZE_MM;
        OrientedBox::axis_aligned(Point3::new(c.x - w / 2.0, hi.y, c.z - l / 2.0), Point3::new(c.x + w / 2.0, hi.y + t, c.z + l / 2.0))
    }

    /// Link and needle capsules in CT coordinates for configuration `q`;
    /// the needle capsule comes last.
    pub fn posed_capsules(&self, q: &JointConfig) -> Vec<Capsule> {
        let frames = self.arm.frames(q);
        let to_ct = |f: usize, p: &[f64; 3]| self.base_in_ct.transform_point(&frames[f].apply(&Point3::from(*p)));
        let mut out: Vec<Capsule> = self
            .links
            .iter()
            .map(|l| Capsule::new(to_ct(l.frame, &l.a), to_ct(l.frame, &l.b), l.radius_mm + self.link_inflation_mm))
            .collect();
        let tip = frames.len() - 1;
        out.push(Capsule::new(to_ct(tip, &[0.0, 0.0, -self.needle.length_mm]), to_ct(tip, &[0.0; 3]), self.needle.radius_mm));
        out
    }

    fn hits_environment(&self, c: &Capsule) -> bool {
        self.gantry.is_some_and(|g| capsule_plane_intersect(c, &g)) || self.table.is_some_and(|t| capsule_box_intersect(c, &t))
    }

    /// First collision found for `q`, links before the needle.
    pub fn collision(&self, q: &JointConfig, allow_needle_body_contact: bool) -> Option<FailureReason> {
        let caps = self.posed_capsules(q);
        let (needle, links) = caps.split_last().expect("needle capsule");
        if links.iter().any(|c| self.hits_environment(c) || self.body.intersects(c)) {
            return Some(FailureReason::LinkCollision);
        }
        if self.hits_environment(needle) || (!allow_needle_body_contact && self.body.intersects(needle)) {
            return Some(FailureReason::NeedleSideCollision);
        }
        None
    }

    pub fn config_in_collision(&self, q: &JointConfig, allow_needle_body_contact: bool) -> bool {
        self.collision(q, allow_needle_body_contact).is_some()
    }

    /// Deterministic IK start points for a base-frame goal: elbow-bent
    /// postures turned towards the goal.
    pub fn seed_candidates(&self, goal_in_base: &RigidTransform) -> Vec<JointConfig> {
        let p = goal_in_base.translation();
        let j1 = p.y.atan2(p.x);
        let shapes = [(0.5, -1.2, 0.8), (0.9, -0.6, 1.2), (0.2, -1.8, 0.6), (-0.5, 1.2, -0.8)];
        shapes
            .iter()
            .map(|&(s2, s4, s6)| {
                let mut q = [j1, s2, 0.0, s4, 0.0, s6, 0.0];
                self.arm.clamp(&mut q);
                q
            })
            .collect()
    }

    /// Simulated insertion from `entry` to `target` (CT coordinates): IK on
    /// every waypoint, seeded by the previous solution, with collision checks.
    /// The needle may touch the body from the entry waypoint on.
    pub fn insertion_feasible(&self, entry: &Point3, target: &Point3, seed: Option<&JointConfig>) -> Result<ReachabilityResult, CollisionError> {
        let wp = insertion_waypoints(entry, target, self.approach_offset_mm)?;
        let ct_to_base = self.base_in_ct.inverse();
        let opts = IkOptions::default();
        let mut configs: Vec<JointConfig> = Vec::with_capacity(wp.poses.len());
        for (i, pose) in wp.poses.iter().enumerate() {
            let goal = ct_to_base.compose(pose);
            let seeds = match configs.last() {
                Some(prev) => vec![*prev],
                None => seed.copied().into_iter().chain(self.seed_candidates(&goal)).collect(),
            };
            let mut solved = None;
            let mut reason = FailureReason::IkFailure;
            for s in &seeds {
                match ik_dls(&self.arm, &goal, s, &opts) {
                    Ok(sol) => {
                        solved = Some(sol.q);
                        break;
                    }
                    Err(KinematicsError::NoConvergence { at_limit: true, .. }) => reason = FailureReason::JointLimit,
                    Err(KinematicsError::UnreachableGoal { .. }) => {
                        reason = FailureReason::IkFailure;
                        break;
                    }
                    Err(_) => {}
                }
            }
            let Some(q) = solved else {
                return Ok(ReachabilityResult::fail(i, reason, configs));
            };
            if let Some(r) = self.collision(&q, i >= wp.entry_index) {
                return Ok(ReachabilityResult::fail(i, r, configs));
            }
            configs.push(q);
        }
        Ok(ReachabilityResult { reachable: true, failing_waypoint: None, reason: None, configs })
    }

    /// Exact verdict per point, in input order.
    pub fn check_points(&self, target: &Point3, points: &[Point3], workers: usize) -> Result<Vec<ReachabilityResult>, CollisionError> {
        let one = |p: &Point3| self.insertion_feasible(p, target, None);
        if workers <= 1 {
            return points.iter().map(one).collect();
        }
        with_workers(workers, || points.par_iter().map(one).collect::<Result<Vec<_>, _>>()).map_err(|e| CollisionError::Pool(e.to_string()))?
    }

    pub fn load(path: &Path) -> Result<Self, CollisionError> {
        Self::load_with_body(path, None)
    }

    /// Like [`CollisionScene::load`]; `body` is used when the file names none.
    pub fn load_with_body(path: &Path, body: Option<Arc<SurfaceMesh>>) -> Result<Self, CollisionError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str_with_body(&text, path.parent().unwrap_or(Path::new(".")), body)
    }

    /// Parses a scene file; relative paths resolve against `base_dir`.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self, CollisionError> {
        Self::from_json_str_with_body(text, base_dir, None)
    }

    pub fn from_json_str_with_body(text: &str, base_dir: &Path, fallback_body: Option<Arc<SurfaceMesh>>) -> Result<Self, CollisionError> {
        let doc: SceneDoc = serde_json::from_str(text).map_err(|e| CollisionError::Format(e.to_string()))?;
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base_dir.join(p) }
        };
        let body = match (&doc.body, fallback_body) {
            (Some(p), _) => Arc::new(SurfaceMesh::load_ply(&resolve(p))?.0),
            (None, Some(b)) => b,
            (None, None) => return Err(CollisionError::Format("scene names no body mesh".into())),
        };
        let arm = match &doc.arm {
            Some(p) => ArmModel::load(&resolve(p))?,
            None => ArmModel::reference(),
        };
        if doc.link_inflation_mm < 0.0 || doc.approach_offset_mm < 0.0 || doc.needle.length_mm <= 0.0 || doc.needle.radius_mm <= 0.0 {
            return Err(CollisionError::Format("lengths and radii must be positive".into()));
        }
        let links = doc.links.unwrap_or_else(reference_links);
        if let Some(l) = links.iter().find(|l| l.frame > DOF + 1 || l.radius_mm <= 0.0) {
            return Err(CollisionError::Format(format!("bad link capsule {l:?}")));
        }
        let table = match doc.table {
            TableDoc::Auto => Some(Self::default_table(&body)),
            TableDoc::None => None,
            TableDoc::Box { min, max } => Some(OrientedBox::axis_aligned(Point3::from(min), Point3::from(max))),
        };
        let gantry = doc
            .gantry
            .map(|g| {
                let n = Vec3::from(g.normal);
                if n.norm() < 1e-12 {
                    return Err(CollisionError::Format("gantry normal is zero".into()));
                }
                Ok(HalfSpace { point: Point3::from(g.point), normal: Dir3::new_normalize(n) })
            })
            .transpose()?;
        let mut scene = Self::new(body, arm, doc.base);
        scene.gantry = gantry;
        scene.table = table;
        scene.links = links;
        scene.needle = doc.needle;
        scene.link_inflation_mm = doc.link_inflation_mm;
        scene.approach_offset_mm = doc.approach_offset_mm;
        Ok(scene)
    }
}

#[derive(Debug, Deserialize)]
struct PlaneDoc {
    point: [f64; 3],
    normal: [f64; 3],
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TableDoc {
    #[default]
    Auto,
    None,
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
}

fn default_inflation() -> f64 {
    LINK_INFLATION_MM
}

fn default_offset() -> f64 {
    DEFAULT_APPROACH_OFFSET_MM
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    #[serde(default)]
    body: Option<String>,
    #[serde(default)]
    gantry: Option<PlaneDoc>,
    #[serde(default)]
    table: TableDoc,
    #[serde(default)]
    arm: Option<String>,
    base: RigidTransform,
    #[serde(default)]
    links: Option<Vec<LinkCapsule>>,
    #[serde(default)]
    needle: NeedleSpec,
    #[serde(default = "default_inflation")]
    link_inflation_mm: f64,
    #[serde(default = "default_offset")]
    approach_offset_mm: f64,
}

/// Verdict of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellVerdict {
    pub cell: [i64; 3],
    pub representative: usize,
    pub members: Vec<usize>,
    pub result: ReachabilityResult,
}

#[derive(Debug, Clone)]
pub struct GridReachability {
    pub heatmap: HeatMap,
    /// Cells in lexicographic order of their index.
    pub cells: Vec<CellVerdict>,
    /// Exact check of the optimum that was finally kept, if any.
    pub optimum_check: Option<ReachabilityResult>,
    /// Optima that were demoted by their own exact check.
    pub demoted_optima: Vec<usize>,
}

/// Feasible vertices of `hm` grouped into `grid_mm` cubes along the CT axes.
pub fn grid_cells(hm: &HeatMap, grid_mm: f64) -> BTreeMap<[i64; 3], Vec<usize>> {
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in hm.feasible_indices() {
        let p = hm.candidates[i].position;
        cells.entry([0, 1, 2].map(|a| (p[a] / grid_mm).floor() as i64)).or_default().push(i);
    }
    cells
}

/// Grid-sampled reachability: one representative per cell (closest to the
/// cell centre, lowest id on ties) is simulated and its verdict applies to
/// the whole cell. The selected optimum is then checked exactly and demoted
/// until one passes or none is left.
pub fn grid_reachability(scene: &CollisionScene, hm: &HeatMap, grid_mm: f64, workers: usize) -> Result<GridReachability, CollisionError> {
    if !(grid_mm > 0.0 && grid_mm.is_finite()) {
        return Err(CollisionError::Format("grid size must be positive".into()));
    }
    let target = hm.target;
    let cells: Vec<([i64; 3], Vec<usize>, usize)> = grid_cells(hm, grid_mm)
        .into_iter()
        .map(|(key, members)| {
            let centre = Point3::from(Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * grid_mm);
            let rep = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da = (hm.candidates[a].position - centre).norm_squared();
                    let db = (hm.candidates[b].position - centre).norm_squared();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("cells are non-empty");
            (key, members, rep)
        })
        .collect();
    let reps: Vec<Point3> = cells.iter().map(|c| hm.candidates[c.2].position).collect();
    let results = scene.check_points(&target, &reps, workers)?;

    let mut out = hm.clone();
    let mut exact: BTreeMap<usize, ReachabilityResult> = BTreeMap::new();
    let mut verdicts = Vec::with_capacity(cells.len());
    let mut failed = Vec::new();
    for ((cell, members, rep), result) in cells.into_iter().zip(results) {
        if !result.reachable {
            failed.extend_from_slice(&members);
        }
        exact.insert(rep, result.clone());
        verdicts.push(CellVerdict { cell, representative: rep, members, result });
    }
    out.mark_unreachable(&failed);

    let mut demoted = Vec::new();
    let mut optimum_check = None;
    while let Some(opt) = out.optimal_index {
        let r = match exact.get(&opt) {
            Some(r) => r.clone(),
            None => scene.insertion_feasible(&out.candidates[opt].position, &target, None)?,
        };
        if r.reachable {
            optimum_check = Some(r);
            break;
        }
        demoted.push(opt);
        out.mark_unreachable(&[opt]);
    }
    debug_assert!(out.optimal_index.is_none_or(|o| out.candidates[o].classification == Classification::Feasible));
    Ok(GridReachability { heatmap: out, cells: verdicts, optimum_check, demoted_optima: demoted })
}
