//! Rigid point-set fitting, steel-ball phantom registration, hand-eye
//! calibration and the CT-to-robot transform chain.
//!
//! Transform names follow `a_from_b`: a transform that maps coordinates of
//! frame `b` into frame `a`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orthonormality_error, polar_project, rotation_angle, Point3, RigidTransform, Vec3};
use crate::segmentation::{detect_spheres, SegmentationError};
use crate::volume::Volume;

pub const PHANTOM_BALLS: usize = 24;
/// Minimum rotation between robot poses for them to count as diverse.
pub const MIN_ROTATION_DIVERSITY_DEG: f64 = 5.0;
/// Detections with an equivalent radius below this are small balls.
pub const RADIUS_CLASS_SPLIT_MM: f64 = 3.5;
pub const MATCH_TOLERANCE_MM: f64 = 2.0;
pub const BALL_THRESHOLD_HU: i16 = 1600;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("too few detections: {0}")]
    TooFewDetections(String),
    #[error("phantom correspondence is ambiguous")]
    AmbiguousMatch,
    #[error("calibration poses lack rotational diversity: {0}")]
    InsufficientDiversity(String),
    #[error("calibration system is singular")]
    SingularSystem,
    #[error("file: {0}")]
    Io(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidFit {
    pub transform: RigidTransform,
    pub rms_mm: f64,
}

/// Least-squares rigid map `source → dest` (SVD with reflection fix).
pub fn kabsch(source: &[Point3], dest: &[Point3]) -> Result<RigidFit, RegistrationError> {
    if source.len() != dest.len() {
        return Err(RegistrationError::DegenerateConfiguration("point lists differ in length".into()));
    }
    if source.len() < 3 {
        return Err(RegistrationError::DegenerateConfiguration("at least 3 point pairs needed".into()));
    }
    let n = source.len() as f64;
    let cs = source.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let cd = dest.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in source.iter().zip(dest) {
        let (u, v) = (s.coords - cs, d.coords - cd);
        h += u * v.transpose();
        spread += u * u.transpose();
    }
    let mut ev = spread.symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(RegistrationError::DegenerateConfiguration("source points are collinear or coincident".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let v = v_t.transpose();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, (v * u.transpose()).determinant().signum()));
    let r = v * fix * u.transpose();
    let transform = RigidTransform::from_parts(r, cd - r * cs);
    let sq: f64 = source.iter().zip(dest).map(|(s, d)| (transform.transform_point(s) - d).norm_squared()).sum();
    Ok(RigidFit { transform, rms_mm: (sq / n).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RadiusClass {
    Small,
    Large,
}

impl RadiusClass {
    pub fn radius_mm(self) -> f64 {
        match self {
            RadiusClass::Small => 2.0,
            RadiusClass::Large => 5.0,
        }
    }

    pub fn from_radius(r_mm: f64) -> Self {
        if r_mm < RADIUS_CLASS_SPLIT_MM {
            RadiusClass::Small
        } else {
            RadiusClass::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub center: Point3,
    pub class: RadiusClass,
}

/// Steel-ball registration phantom in its own (SB) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomModel {
    pub balls: Vec<Ball>,
    /// Marker frame from ball frame, known from the CAD model.
    pub marker_from_sb: RigidTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct PhantomDoc {
    /// Rows of x, y, z, radius (2 or 5).
    balls: Vec<[f64; 4]>,
    marker_from_sb: RigidTransform,
}

impl PhantomModel {
    pub fn new(balls: Vec<Ball>, marker_from_sb: RigidTransform) -> Result<Self, RegistrationError> {
        if balls.len() != PHANTOM_BALLS {
            return Err(RegistrationError::Io(format!("phantom needs {PHANTOM_BALLS} balls, found {}", balls.len())));
        }
        Ok(Self { balls, marker_from_sb })
    }

    /// 6 × 4 plate at 22 mm pitch with per-ball offsets and a scattered
    /// set of large balls, so that no rigid motion maps the layout onto
    /// itself.
    pub fn reference() -> Self {
        let large = [0, 3, 7, 8, 14, 17, 22];
        let balls = (0..PHANTOM_BALLS)
            .map(|n| {
                let (i, j) = ((n % 6) as f64, (n / 6) as f64);
                let jx = ((n * 7 + 3) % 5) as f64 - 2.0;
                let jy = ((n * 11 + 1) % 7) as f64 * 0.5 - 1.5;
                let z = ((n * 5 + 2) % 9) as f64 * 0.75 - 3.0;
                Ball {
                    center: Point3::new(22.0 * i - 55.0 + jx, 22.0 * j - 33.0 + jy, z),
                    class: if large.contains(&n) { RadiusClass::Large } else { RadiusClass::Small },
                }
            })
            .collect();
        let marker_from_sb = RigidTransform::from_parts(
            *nalgebra::Rotation3::from_euler_angles(std::f64::consts::FRAC_PI_2, 0.0, 0.1).matrix(),
            Vec3::new(12.0, -70.0, 35.0),
        );
        Self { balls, marker_from_sb }
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.balls.iter().map(|b| b.center).collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self, RegistrationError> {
        let doc: PhantomDoc = serde_json::from_str(text).map_err(|e| RegistrationError::Io(e.to_string()))?;
        let balls = doc
            .balls
            .iter()
            .map(|r| {
                let class = match r[3] {
                    2.0 => RadiusClass::Small,
                    5.0 => RadiusClass::Large,
                    x => return Err(RegistrationError::Io(format!("radius must be 2 or 5, found {x}"))),
                };
                Ok(Ball { center: Point3::new(r[0], r[1], r[2]), class })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(balls, doc.marker_from_sb)
    }

    pub fn to_json_string(&self) -> String {
        let doc = PhantomDoc {
            balls: self.balls.iter().map(|b| [b.center.x, b.center.y, b.center.z, b.class.radius_mm()]).collect(),
            marker_from_sb: self.marker_from_sb,
        };
        serde_json::to_string_pretty(&doc).expect("phantom serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RegistrationError> {
        Self::from_json_str(&std::fs::read_to_string(path).map_err(|e| RegistrationError::Io(e.to_string()))?)
    }
}

/// Ball centre found in a CT volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub center: Point3,
    pub class: RadiusClass,
}

/// Thresholds the volume and returns one detection per bright component.
pub fn detect_balls(volume: &Volume, t_hu: i16) -> Result<Vec<Detection>, RegistrationError> {
    let found = detect_spheres(volume, t_hu, 0)?;
    Ok(found.into_iter().map(|s| Detection { center: s.centroid, class: RadiusClass::from_radius(s.equiv_radius_mm) }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomMatch {
    /// Model ball index per detection, in input order; `None` for outliers.
    pub correspondence: Vec<Option<usize>>,
    pub ct_from_sb: RigidTransform,
    pub rms_mm: f64,
}

impl PhantomMatch {
    pub fn sb_from_ct(&self) -> RigidTransform {
        self.ct_from_sb.inverse()
    }

    pub fn matched(&self) -> usize {
        self.correspondence.iter().flatten().count()
    }
}

fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&dets[a], &dets[b]);
        p.class.cmp(&q.class).then(p.center.x.total_cmp(&q.center.x)).then(p.center.y.total_cmp(&q.center.y)).then(p.center.z.total_cmp(&q.center.z))
    });
    order
}

/// One-to-one nearest assignment of detections to posed model balls of the
/// same class within `tol`. Returns model index per detection.
fn assign(dets: &[Detection], model: &PhantomModel, ct_from_sb: &RigidTransform, tol: f64) -> Vec<Option<usize>> {
    let posed: Vec<Point3> = model.balls.iter().map(|b| ct_from_sb.transform_point(&b.center)).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (d, det) in dets.iter().enumerate() {
        for (m, ball) in model.balls.iter().enumerate() {
            if ball.class == det.class {
                let dist = (posed[m] - det.center).norm();
                if dist < tol {
                    pairs.push((dist, d, m));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; dets.len()];
    let mut used = vec![false; model.balls.len()];
    for (_, d, m) in pairs {
        if out[d].is_none() && !used[m] {
            out[d] = Some(m);
            used[m] = true;
        }
    }
    out
}

fn fit_assignment(dets: &[Detection], model: &PhantomModel, corr: &[Option<usize>]) -> Result<RigidFit, RegistrationError> {
    // Model order makes the sums independent of detection order.
    let mut pairs: Vec<(usize, usize)> = corr.iter().enumerate().filter_map(|(d, m)| m.map(|m| (m, d))).collect();
    pairs.sort_unstable();
    let src: Vec<Point3> = pairs.iter().map(|&(m, _)| model.balls[m].center).collect();
    let dst: Vec<Point3> = pairs.iter().map(|&(_, d)| dets[d].center).collect();
    kabsch(&src, &dst)
}

/// Finds which model ball each detection is and the pose of the phantom.
///
/// Three well-spread detections form a base; every model triple of the same
/// classes and matching pairwise distances is a pose hypothesis, scored by
/// how many detections it explains. The best hypothesis is refit on all
/// matched pairs.
pub fn match_phantom(detections: &[Detection], model: &PhantomModel, tol_mm: f64) -> Result<PhantomMatch, RegistrationError> {
    let classes: std::collections::BTreeSet<RadiusClass> = detections.iter().map(|d| d.class).collect();
    if detections.len() < 4 || classes.len() < 2 {
        return Err(RegistrationError::TooFewDetections(format!("{} detections in {} radius classes; need 4 in both", detections.len(), classes.len())));
    }
    let order = canonical_order(detections);
    let dets: Vec<Detection> = order.iter().map(|&i| detections[i]).collect();

    // Base: farthest pair, then the detection farthest from their line.
    let mut base = (0, 1);
    let mut best = -1.0;
    for a in 0..dets.len() {
        for b in a + 1..dets.len() {
            let d = (dets[a].center - dets[b].center).norm();
            if d > best {
                best = d;
                base = (a, b);
            }
        }
    }
    let (a, b) = base;
    let axis = (dets[b].center - dets[a].center).normalize();
    let c = (0..dets.len())
        .filter(|&c| c != a && c != b)
        .max_by(|&x, &y| {
            let off = |i: usize| {
                let v = dets[i].center - dets[a].center;
                (v - axis * v.dot(&axis)).norm()
            };
            off(x).total_cmp(&off(y)).then(y.cmp(&x))
        })
        .expect("at least 4 detections");
    let tri = [a, b, c];
    let dist = |p: &Point3, q: &Point3| (p - q).norm();
    let target = [dist(&dets[a].center, &dets[b].center), dist(&dets[b].center, &dets[c].center), dist(&dets[a].center, &dets[c].center)];

    let mut hypotheses: Vec<(usize, f64, Vec<Option<usize>>)> = Vec::new();
    let m = &model.balls;
    for i in 0..m.len() {
        if m[i].class != dets[a].class {
            continue;
        }
        for j in 0..m.len() {
            if j == i || m[j].class != dets[b].class || (dist(&m[i].center, &m[j].center) - target[0]).abs() > 2.0 * tol_mm {
                continue;
            }
            for k in 0..m.len() {
                if k == i || k == j || m[k].class != dets[c].class {
                    continue;
                }
                if (dist(&m[j].center, &m[k].center) - target[1]).abs() > 2.0 * tol_mm || (dist(&m[i].center, &m[k].center) - target[2]).abs() > 2.0 * tol_mm {
                    continue;
                }
                let Ok(fit) = kabsch(&[m[i].center, m[j].center, m[k].center], &tri.map(|t| dets[t].center)) else {
                    continue;
                };
                let corr = assign(&dets, model, &fit.transform, tol_mm);
                let n = corr.iter().flatten().count();
                if n < 4 {
                    continue;
                }
                let refit = fit_assignment(&dets, model, &corr)?;
                hypotheses.push((n, refit.rms_mm, corr));
            }
        }
    }
    hypotheses.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.total_cmp(&y.1)));
    let Some((n_best, _, corr)) = hypotheses.first().cloned() else {
        return Err(RegistrationError::AmbiguousMatch);
    };
    if hypotheses.iter().any(|h| h.0 == n_best && h.2 != corr) {
        return Err(RegistrationError::AmbiguousMatch);
    }
    let fit = fit_assignment(&dets, model, &corr)?;
    let mut correspondence = vec![None; detections.len()];
    for (pos, &orig) in order.iter().enumerate() {
        correspondence[orig] = corr[pos];
    }
    Ok(PhantomMatch { correspondence, ct_from_sb: fit.transform, rms_mm: fit.rms_mm })
}

/// Robot pose and tracked marker pose recorded together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// Base from end effector.
    pub robot_pose: RigidTransform,
    /// Marker from camera, as reported by the tracker.
    pub camera_pose: RigidTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct SamplesDoc {
    samples: Vec<CalibrationSample>,
}

pub fn load_samples(path: &Path) -> Result<Vec<CalibrationSample>, RegistrationError> {
    let text = std::fs::read_to_string(path).map_err(|e| RegistrationError::Io(e.to_string()))?;
    samples_from_json_str(&text)
}

pub fn samples_from_json_str(text: &str) -> Result<Vec<CalibrationSample>, RegistrationError> {
    let doc: SamplesDoc = serde_json::from_str(text).map_err(|e| RegistrationError::Io(e.to_string()))?;
    Ok(doc.samples)
}

pub fn samples_to_json_string(samples: &[CalibrationSample]) -> String {
    serde_json::to_string_pretty(&SamplesDoc { samples: samples.to_vec() }).expect("samples serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    /// End effector from marker.
    pub ee_from_marker: RigidTransform,
    /// Base from camera.
    pub base_from_camera: RigidTransform,
    pub residual_translation_mm: f64,
    pub residual_rotation_deg: f64,
    /// Largest orthonormality error of the rotation blocks before projection.
    pub pre_projection_deviation: f64,
}

impl CalibrationResult {
    /// Mean translation (mm) and rotation (deg) error of the marker poses
    /// predicted from the robot poses.
    pub fn prediction_error(&self, samples: &[CalibrationSample]) -> (f64, f64) {
        prediction_error(&self.ee_from_marker, &self.base_from_camera, samples)
    }
}

fn prediction_error(x: &RigidTransform, z: &RigidTransform, samples: &[CalibrationSample]) -> (f64, f64) {
    let zi = z.inverse();
    let (mut st, mut sr) = (0.0, 0.0);
    for s in samples {
        // camera_from_marker = Z⁻¹ · B · X
        let predicted = zi.compose(&s.robot_pose).compose(x);
        let measured = s.camera_pose.inverse();
        st += (predicted.translation() - measured.translation()).norm();
        sr += rotation_angle(&(predicted.rotation() * measured.rotation().transpose())).to_degrees();
    }
    let n = samples.len().max(1) as f64;
    (st / n, sr / n)
}

/// Hand-eye calibration `B·X = Z·C` with `B` the robot pose, `C` the
/// camera-from-marker pose, `X` end-effector-from-marker and `Z`
/// base-from-camera. All 24 matrix entries are solved jointly as one linear
/// least-squares problem by QR; the rotation blocks are then projected onto
/// the nearest rotations.
pub fn hand_eye_qr24(samples: &[CalibrationSample]) -> Result<CalibrationResult, RegistrationError> {
    let diverse = diverse_subset_size(samples);
    if samples.len() < 3 || diverse < 3 {
        return Err(RegistrationError::InsufficientDiversity(format!(
            "{} samples, {diverse} pairwise at least {MIN_ROTATION_DIVERSITY_DEG} deg apart; need 3",
            samples.len()
        )));
    }
    // Unknowns: R_X row-major (0..9), t_X (9..12), R_Z (12..21), t_Z (21..24).
    let rx = |k: usize, j: usize| 3 * k + j;
    let rz = |k: usize, j: usize| 12 + 3 * k + j;
    let n = samples.len();
    let mut a = DMatrix::<f64>::zeros(12 * n, 24);
    let mut rhs = DVector::<f64>::zeros(12 * n);
    for (s_i, s) in samples.iter().enumerate() {
        let rb = s.robot_pose.rotation();
        let tb = s.robot_pose.translation();
        let c = s.camera_pose.inverse();
        let (rc, tc) = (c.rotation(), c.translation());
        let row0 = 12 * s_i;
        // R_B·R_X − R_Z·R_C = 0
        for i in 0..3 {
            for j in 0..3 {
                let row = row0 + 3 * i + j;
                for k in 0..3 {
                    a[(row, rx(k, j))] += rb[(i, k)];
                    a[(row, rz(i, k))] -= rc[(k, j)];
                }
            }
        }
        // R_B·t_X − R_Z·t_C − t_Z = −t_B
        for i in 0..3 {
            let row = row0 + 9 + i;
            for k in 0..3 {
                a[(row, 9 + k)] += rb[(i, k)];
                a[(row, rz(i, k))] -= tc[k];
            }
            a[(row, 21 + i)] = -1.0;
            rhs[row] = -tb[i];
        }
    }
    let qr = a.qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    if !(rmax > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * rmax) {
        return Err(RegistrationError::SingularSystem);
    }
    let qtb = qr.q().transpose() * &rhs;
    let sol = r.solve_upper_triangular(&qtb).ok_or(RegistrationError::SingularSystem)?;
    let block = |off: usize| Matrix3::from_fn(|i, j| sol[off + 3 * i + j]);
    let (mx, mz) = (block(0), block(12));
    let deviation = orthonormality_error(&mx).max(orthonormality_error(&mz));
    let x = RigidTransform::from_parts(polar_project(&mx), Vec3::new(sol[9], sol[10], sol[11]));
    let z = RigidTransform::from_parts(polar_project(&mz), Vec3::new(sol[21], sol[22], sol[23]));
    let (rt, rr) = prediction_error(&x, &z, samples);
    Ok(CalibrationResult { ee_from_marker: x, base_from_camera: z, residual_translation_mm: rt, residual_rotation_deg: rr, pre_projection_deviation: deviation })
}

/// Size of a greedy set of robot poses whose rotations are pairwise at
/// least [`MIN_ROTATION_DIVERSITY_DEG`] apart.
fn diverse_subset_size(samples: &[CalibrationSample]) -> usize {
    let min = MIN_ROTATION_DIVERSITY_DEG.to_radians();
    let mut kept: Vec<&Matrix3<f64>> = Vec::new();
    for s in samples {
        let r = s.robot_pose.rotation();
        if kept.iter().all(|k| rotation_angle(&(r * k.transpose())) >= min) {
            kept.push(r);
        }
    }
    kept.len()
}

/// Base from CT: `base_from_camera · camera_from_marker · marker_from_sb · sb_from_ct`.
pub fn compose_ct_registration(base_from_camera: &RigidTransform, camera_from_marker: &RigidTransform, marker_from_sb: &RigidTransform, sb_from_ct: &RigidTransform) -> RigidTransform {
    base_from_camera.compose(camera_from_marker).compose(marker_from_sb).compose(sb_from_ct)
}

#[cfg(test)]
pub(crate) mod testing {
    pub use crate::synth::synthetic_samples;
}
