//! Simulated 7-DOF serial arm: DH forward kinematics, geometric Jacobian,
//! damped-least-squares inverse kinematics and needle insertion waypoints.
//!
//! Lengths are mm, angles radians in the API and degrees in arm files.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{minimal_rotation, rotation_angle, rotation_log, Point3, RigidTransform, Vec3};

pub const DOF: usize = 7;
pub type JointConfig = [f64; DOF];
pub type Jacobian = SMatrix<f64, 6, DOF>;

/// Damping of the least-squares step (metres/radians units).
pub const IK_DAMPING: f64 = 0.05;
/// Largest per-iteration joint change, radians.
pub const IK_STEP_CLAMP: f64 = 0.2;
pub const IK_TOL_MM: f64 = 0.5;
pub const IK_TOL_DEG: f64 = 0.5;
pub const IK_MAX_ITERS: usize = 500;
/// Waypoint spacing along the insertion line.
pub const WAYPOINT_STEP_MM: f64 = 5.0;
pub const DEFAULT_APPROACH_OFFSET_MM: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("arm model: {0}")]
    InvalidModel(String),
    #[error("goal lies beyond the reach bound ({distance:.1} > {bound:.1} mm)")]
    UnreachableGoal { distance: f64, bound: f64 },
    #[error("no convergence after {iterations} iterations ({pos_err_mm:.3} mm, {ang_err_deg:.3} deg)")]
    NoConvergence { iterations: usize, pos_err_mm: f64, ang_err_deg: f64, at_limit: bool },
    #[error("entry and target coincide")]
    DegeneratePath,
    #[error("arm file: {0}")]
    Io(String),
}

/// One revolute joint in standard DH form:
/// `Rz(θ + theta_offset) · Tz(d) · Tx(a) · Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint {
    pub a_mm: f64,
    pub alpha: f64,
    pub d_mm: f64,
    pub theta_offset: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub joints: [Joint; DOF],
    /// Flange to needle-tip frame; the needle points along tool z.
    pub tool: RigidTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct JointDoc {
    a: f64,
    alpha_deg: f64,
    d: f64,
    #[serde(default)]
    theta_offset_deg: f64,
    min_deg: f64,
    max_deg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArmDoc {
    joints: Vec<JointDoc>,
    tool: RigidTransform,
}

impl ArmModel {
    pub fn new(joints: [Joint; DOF], tool: RigidTransform) -> Result<Self, KinematicsError> {
        for (i, j) in joints.iter().enumerate() {
            let vals = [j.a_mm, j.alpha, j.d_mm, j.theta_offset, j.min, j.max];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(KinematicsError::InvalidModel(format!("joint {i} has non-finite parameters")));
            }
            if j.min >= j.max {
                return Err(KinematicsError::InvalidModel(format!("joint {i} limits must satisfy min < max")));
            }
        }
        Ok(Self { joints, tool })
    }

    /// Reference arm with light-weight-robot proportions: offsets on the odd
    /// joints, alternating ±170°/±120° limits, and a 250 mm needle tool.
    pub fn reference() -> Self {
        let deg = |d: f64| d.to_radians();
        let alphas = [-90.0, 90.0, 90.0, -90.0, -90.0, 90.0, 0.0];
        let ds = [350.0, 0.0, 410.0, 0.0, 410.0, 0.0, 130.0];
        let limits = [170.0, 120.0, 170.0, 120.0, 170.0, 120.0, 175.0];
        let joints = std::array::from_fn(|i| Joint {
            a_mm: 0.0,
            alpha: deg(alphas[i]),
            d_mm: ds[i],
            theta_offset: 0.0,
            min: -deg(limits[i]),
            max: deg(limits[i]),
        });
        Self::new(joints, RigidTransform::from_translation(Vec3::new(0.0, 0.0, 250.0))).expect("reference arm is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self, KinematicsError> {
        let doc: ArmDoc = serde_json::from_str(text).map_err(|e| KinematicsError::Io(e.to_string()))?;
        if doc.joints.len() != DOF {
            return Err(KinematicsError::InvalidModel(format!("expected {DOF} joints, found {}", doc.joints.len())));
        }
        let joints = std::array::from_fn(|i| {
            let j = &doc.joints[i];
            Joint {
                a_mm: j.a,
                alpha: j.alpha_deg.to_radians(),
                d_mm: j.d,
                theta_offset: j.theta_offset_deg.to_radians(),
                min: j.min_deg.to_radians(),
                max: j.max_deg.to_radians(),
            }
        });
        Self::new(joints, doc.tool)
    }

    pub fn to_json_string(&self) -> String {
        let doc = ArmDoc {
            joints: self
                .joints
                .iter()
                .map(|j| JointDoc {
                    a: j.a_mm,
                    alpha_deg: j.alpha.to_degrees(),
                    d: j.d_mm,
                    theta_offset_deg: j.theta_offset.to_degrees(),
                    min_deg: j.min.to_degrees(),
                    max_deg: j.max.to_degrees(),
                })
                .collect(),
            tool: self.tool,
        };
        serde_json::to_string_pretty(&doc).expect("arm serializes")
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|e| KinematicsError::Io(e.to_string()))?;
        Self::from_json_str(&text)
    }

    /// Upper bound on the base-to-tip distance for any configuration.
    pub fn reach_bound(&self) -> f64 {
        self.joints.iter().map(|j| j.a_mm.hypot(j.d_mm)).sum::<f64>() + self.tool.translation().norm()
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        self.joints.iter().zip(q).all(|(j, &v)| v >= j.min && v <= j.max)
    }

    pub fn clamp(&self, q: &mut JointConfig) {
        for (j, v) in self.joints.iter().zip(q.iter_mut()) {
            *v = v.clamp(j.min, j.max);
        }
    }

    /// Joints sitting on a limit (within 1e-9 rad).
    pub fn at_limit(&self, q: &JointConfig) -> bool {
        self.joints.iter().zip(q).any(|(j, &v)| v <= j.min + 1e-9 || v >= j.max - 1e-9)
    }

    /// Base frame, the frame after each joint, and the tool frame (9 frames).
    pub fn frames(&self, q: &JointConfig) -> Vec<Frame> {
        let mut out = Vec::with_capacity(DOF + 2);
        let mut f = Frame::identity();
        out.push(f);
        for (j, &theta) in self.joints.iter().zip(q) {
            f = f.then(&dh(j, theta));
            out.push(f);
        }
        out.push(f.then(&Frame { r: *self.tool.rotation(), p: *self.tool.translation() }));
        out
    }

    /// Base to needle-tip transform.
    pub fn fk(&self, q: &JointConfig) -> RigidTransform {
        let f = *self.frames(q).last().expect("tool frame");
        RigidTransform::from_parts(f.r, f.p)
    }

    /// Geometric Jacobian of the tip: rows 0..3 linear velocity (mm/rad),
    /// rows 3..6 angular velocity (rad/rad).
    pub fn jacobian(&self, q: &JointConfig) -> Jacobian {
        let frames = self.frames(q);
        let tip = frames[DOF + 1].p;
        let mut jac = Jacobian::zeros();
        for i in 0..DOF {
            // Joint i rotates about z of the frame before it.
            let z = frames[i].r.column(2).into_owned();
            let lin = z.cross(&(tip - frames[i].p));
            for r in 0..3 {
                jac[(r, i)] = lin[r];
                jac[(r + 3, i)] = z[r];
            }
        }
        jac
    }
}

/// Rotation plus translation without the rigidity checks of
/// [`RigidTransform`], for tight loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub r: Matrix3<f64>,
    pub p: Vec3,
}

impl Frame {
    pub fn identity() -> Self {
        Self { r: Matrix3::identity(), p: Vec3::zeros() }
    }

    pub fn then(&self, next: &Frame) -> Frame {
        Frame { r: self.r * next.r, p: self.r * next.p + self.p }
    }

    pub fn origin(&self) -> Point3 {
        Point3::from(self.p)
    }

    pub fn apply(&self, v: &Point3) -> Point3 {
        Point3::from(self.r * v.coords + self.p)
    }
}

fn dh(j: &Joint, theta: f64) -> Frame {
    let (st, ct) = (theta + j.theta_offset).sin_cos();
    let (sa, ca) = j.alpha.sin_cos();
    Frame {
        r: Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca),
        p: Vec3::new(j.a_mm * ct, j.a_mm * st, j.d_mm),
    }
}

/// Position (mm) and orientation (deg) distance between two poses.
pub fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let dp = (a.translation() - b.translation()).norm();
    let dr = rotation_angle(&(a.rotation() * b.rotation().transpose())).to_degrees();
    (dp, dr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub tol_mm: f64,
    pub tol_deg: f64,
    pub max_iters: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self { tol_mm: IK_TOL_MM, tol_deg: IK_TOL_DEG, max_iters: IK_MAX_ITERS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    pub iterations: usize,
    pub pos_err_mm: f64,
    pub ang_err_deg: f64,
}

/// Damped least squares from `seed`, clamping to joint limits after every
/// step. Works in metres internally so position and orientation errors have
/// comparable magnitudes.
pub fn ik_dls(arm: &ArmModel, goal: &RigidTransform, seed: &JointConfig, opts: &IkOptions) -> Result<IkSolution, KinematicsError> {
    let distance = goal.translation().norm();
    let bound = arm.reach_bound();
    if distance > bound {
        return Err(KinematicsError::UnreachableGoal { distance, bound });
    }
    let mut q = *seed;
    arm.clamp(&mut q);
    let lambda2 = IK_DAMPING * IK_DAMPING;
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 0..=opts.max_iters {
        let frames = arm.frames(&q);
        let tip = frames[DOF + 1];
        let dp = goal.translation() - tip.p;
        let dr = rotation_log(&(goal.rotation() * tip.r.transpose()));
        let (pe, ae) = (dp.norm(), dr.norm().to_degrees());
        last = (pe, ae);
        if pe < opts.tol_mm && ae < opts.tol_deg {
            return Ok(IkSolution { q, iterations: it, pos_err_mm: pe, ang_err_deg: ae });
        }
        if it == opts.max_iters {
            break;
        }
        let mut jac = arm.jacobian(&q);
        for c in 0..DOF {
            for r in 0..3 {
                jac[(r, c)] *= 1e-3;
            }
        }
        let e = SVector::<f64, 6>::new(dp.x * 1e-3, dp.y * 1e-3, dp.z * 1e-3, dr.x, dr.y, dr.z);
        let jjt = jac * jac.transpose() + SMatrix::<f64, 6, 6>::identity() * lambda2;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&e)) else {
            break;
        };
        let mut dq = jac.transpose() * y;
        let m = dq.amax();
        if m > IK_STEP_CLAMP {
            dq *= IK_STEP_CLAMP / m;
        }
        for i in 0..DOF {
            q[i] += dq[i];
        }
        arm.clamp(&mut q);
    }
    Err(KinematicsError::NoConvergence { iterations: opts.max_iters, pos_err_mm: last.0, ang_err_deg: last.1, at_limit: arm.at_limit(&q) })
}

/// Tip poses along the insertion line, every at most 5 mm: from the approach
/// point `entry − offset·dir` to the entry, then on to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoints {
    pub poses: Vec<RigidTransform>,
    /// Index of the pose at the entry point.
    pub entry_index: usize,
}

/// Waypoints with tool z along the insertion direction. The count is
/// `ceil(offset/5) + ceil(depth/5) + 1` so that the entry is itself a
/// waypoint; roll is the minimal rotation taking world z onto the direction.
pub fn insertion_waypoints(entry: &Point3, target: &Point3, approach_offset_mm: f64) -> Result<Waypoints, KinematicsError> {
    let path = target - entry;
    let depth = path.norm();
    if depth < 1e-9 {
        return Err(KinematicsError::DegeneratePath);
    }
    if !(approach_offset_mm >= 0.0 && approach_offset_mm.is_finite()) {
        return Err(KinematicsError::InvalidModel("approach offset must be non-negative".into()));
    }
    let dir = path / depth;
    let rot = minimal_rotation(&Vec3::z(), &dir);
    let n_approach = (approach_offset_mm / WAYPOINT_STEP_MM).ceil() as usize;
    let n_insert = (depth / WAYPOINT_STEP_MM).ceil() as usize;
    let mut poses = Vec::with_capacity(n_approach + n_insert + 1);
    let start = entry - dir * approach_offset_mm;
    for i in 0..n_approach {
        let p = start + dir * (approach_offset_mm * i as f64 / n_approach as f64);
        poses.push(RigidTransform::from_parts(rot, p.coords));
    }
    for j in 0..=n_insert {
        let p = if j == n_insert { *target } else { entry + dir * (depth * j as f64 / n_insert as f64) };
        poses.push(RigidTransform::from_parts(rot, p.coords));
    }
    Ok(Waypoints { poses, entry_index: n_approach })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(arm: &ArmModel, rng: &mut ChaCha8Rng, frac: f64) -> JointConfig {
        std::array::from_fn(|i| rng.random_range(arm.joints[i].min * frac..arm.joints[i].max * frac))
    }

    /// Chain product with explicit 4×4 matrices, written independently of [`dh`].
    fn fk_matrix(arm: &ArmModel, q: &JointConfig) -> Matrix4<f64> {
        let mut t = Matrix4::<f64>::identity();
        for (j, &th) in arm.joints.iter().zip(q) {
            let th = th + j.theta_offset;
            let rz = Matrix4::new(th.cos(), -th.sin(), 0.0, 0.0, th.sin(), th.cos(), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
            let tz = Matrix4::new_translation(&Vec3::new(0.0, 0.0, j.d_mm));
            let tx = Matrix4::new_translation(&Vec3::new(j.a_mm, 0.0, 0.0));
            let (s, c) = j.alpha.sin_cos();
            let rx = Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0);
            t = t * rz * tz * tx * rx;
        }
        t * arm.tool.to_matrix4()
    }

    #[test]
    fn home_pose_is_straight_up() {
        let arm = ArmModel::reference();
        let home = arm.fk(&[0.0; DOF]);
        // Golden value: every link stacks along base z.
        assert!((home.translation() - Vec3::new(0.0, 0.0, 1550.0)).norm() < 1e-9);
        assert!((home.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!((home.to_matrix4() - fk_matrix(&arm, &[0.0; DOF])).amax() < 1e-9);
    }

    #[test]
    fn fk_matches_matrix_chain() {
        let arm = ArmModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let q = random_q(&arm, &mut rng, 1.0);
            assert!((arm.fk(&q).to_matrix4() - fk_matrix(&arm, &q)).amax() < 1e-9);
        }
    }

    #[test]
    fn base_rotation_mirrors_tip() {
        let arm = ArmModel::reference();
        let mut q = [0.0, 0.6, 0.0, -0.9, 0.0, 0.4, 0.0];
        let a = arm.fk(&q).translation().clone_owned();
        // Limits stop joint 1 short of π; FK does not check them anyway.
        let mut free = arm.clone();
        free.joints[0].min = -4.0;
        free.joints[0].max = 4.0;
        q[0] = std::f64::consts::PI;
        let b = free.fk(&q).translation().clone_owned();
        assert!((b.x + a.x).abs() < 1e-9 && (b.y + a.y).abs() < 1e-9 && (b.z - a.z).abs() < 1e-9);
    }

    #[test]
    fn reach_bound_holds() {
        let arm = ArmModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..1000 {
            let q = random_q(&arm, &mut rng, 1.0);
            assert!(arm.fk(&q).translation().norm() <= arm.reach_bound() + 1e-9);
        }
    }

    /// Central differences of FK: position columns directly, orientation
    /// columns through the log of the relative rotation.
    fn numeric_jacobian(arm: &ArmModel, q: &JointConfig, eps: f64) -> Jacobian {
        let mut jac = Jacobian::zeros();
        for i in 0..DOF {
            let mut qp = *q;
            let mut qm = *q;
            qp[i] += eps;
            qm[i] -= eps;
            let (tp, tm) = (arm.fk(&qp), arm.fk(&qm));
            let dv = (tp.translation() - tm.translation()) / (2.0 * eps);
            let dw = rotation_log(&(tp.rotation() * tm.rotation().transpose())) / (2.0 * eps);
            for r in 0..3 {
                jac[(r, i)] = dv[r];
                jac[(r + 3, i)] = dw[r];
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let arm = ArmModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let q = random_q(&arm, &mut rng, 1.0);
            let diff = (arm.jacobian(&q) - numeric_jacobian(&arm, &q, 1e-4)).amax();
            assert!(diff < 1e-5, "{diff}");
        }
    }

    #[test]
    fn jacobian_column_vanishes_when_axis_hits_tip() {
        // At home every odd joint axis is base z and passes through the tip.
        let arm = ArmModel::reference();
        let jac = arm.jacobian(&[0.0; DOF]);
        for i in [0, 2, 4, 6] {
            for r in 0..3 {
                assert!(jac[(r, i)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ik_fixed_point() {
        let arm = ArmModel::reference();
        let q = [0.3, -0.5, 0.2, 1.1, -0.4, 0.7, 0.1];
        let sol = ik_dls(&arm, &arm.fk(&q), &q, &IkOptions::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.q, q);
    }

    #[test]
    fn ik_round_trip_from_perturbed_seed() {
        let arm = ArmModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut ok = 0;
        for _ in 0..100 {
            let q = random_q(&arm, &mut rng, 0.9);
            let goal = arm.fk(&q);
            let seed: JointConfig = std::array::from_fn(|i| q[i] + rng.random_range(-0.15..0.15));
            if let Ok(sol) = ik_dls(&arm, &goal, &seed, &IkOptions::default()) {
                let (dp, dr) = pose_error(&arm.fk(&sol.q), &goal);
                assert!(dp < IK_TOL_MM && dr < IK_TOL_DEG);
                assert!(arm.within_limits(&sol.q));
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    fn ik_rejects_far_goals() {
        let arm = ArmModel::reference();
        let goal = RigidTransform::from_translation(Vec3::new(2.0 * arm.reach_bound(), 0.0, 0.0));
        assert!(matches!(ik_dls(&arm, &goal, &[0.0; DOF], &IkOptions::default()), Err(KinematicsError::UnreachableGoal { .. })));
    }

    #[test]
    fn arm_file_round_trip() {
        let arm = ArmModel::reference();
        let back = ArmModel::from_json_str(&arm.to_json_string()).unwrap();
        for (a, b) in arm.joints.iter().zip(&back.joints) {
            assert!((a.alpha - b.alpha).abs() < 1e-12 && (a.max - b.max).abs() < 1e-12 && a.d_mm == b.d_mm);
        }
        let mut doc: serde_json::Value = serde_json::from_str(&arm.to_json_string()).unwrap();
        doc["joints"].as_array_mut().unwrap().pop();
        assert!(ArmModel::from_json_str(&doc.to_string()).is_err());
        doc = serde_json::from_str(&arm.to_json_string()).unwrap();
        doc["joints"][2]["min_deg"] = serde_json::json!(200.0);
        assert!(matches!(ArmModel::from_json_str(&doc.to_string()), Err(KinematicsError::InvalidModel(_))));
    }

    #[test]
    fn waypoints_axis_aligned() {
        let w = insertion_waypoints(&Point3::new(0.0, 0.0, 100.0), &Point3::origin(), 50.0).unwrap();
        assert_eq!(w.poses.len(), 10 + 20 + 1);
        assert_eq!(w.entry_index, 10);
        assert!((w.poses[0].translation() - Vec3::new(0.0, 0.0, 150.0)).norm() < 1e-12);
        assert!((w.poses[10].translation() - Vec3::new(0.0, 0.0, 100.0)).norm() < 1e-12);
        assert_eq!(*w.poses.last().unwrap().translation(), Vec3::zeros());
        for p in &w.poses {
            assert!((p.rotation().column(2) - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        }
        assert_eq!(insertion_waypoints(&Point3::origin(), &Point3::origin(), 50.0), Err(KinematicsError::DegeneratePath));
    }

    proptest::proptest! {
        #[test]
        fn waypoints_are_collinear_and_dense(seed in 0u64..100_000, offset in 0.0f64..80.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rp = |rng: &mut ChaCha8Rng| Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let (entry, target) = (rp(&mut rng), rp(&mut rng));
            let w = insertion_waypoints(&entry, &target, offset).unwrap();
            let depth = (target - entry).norm();
            let expected = (offset / 5.0).ceil() as usize + (depth / 5.0).ceil() as usize + 1;
            proptest::prop_assert_eq!(w.poses.len(), expected);
            let dir = (target - entry) / depth;
            let r0 = *w.poses[0].rotation();
            for (i, p) in w.poses.iter().enumerate() {
                let v = p.translation() - entry.coords;
                proptest::prop_assert!((v - dir * v.dot(&dir)).norm() < 1e-9);
                proptest::prop_assert_eq!(*p.rotation(), r0);
                if i > 0 {
                    let gap = (p.translation() - w.poses[i - 1].translation()).norm();
                    proptest::prop_assert!(gap <= 5.0 + 1e-9 && gap > 0.0);
                }
            }
            proptest::prop_assert!((r0.column(2) - dir).norm() < 1e-12);
            proptest::prop_assert!((w.poses[w.entry_index].translation() - entry.coords).norm() < 1e-9);
        }
    }
}
