//! Rigid-body math shared across the planner: points, unit directions and
//! rotation+translation transforms in millimetres.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World position in millimetres.
pub type Point3 = nalgebra::Point3<f64>;
/// Free vector in millimetres.
pub type Vec3 = Vector3<f64>;
/// Unit direction.
pub type Dir3 = Unit<Vector3<f64>>;

/// Drift from orthonormality above which compose re-projects the rotation.
const REORTHO_DRIFT: f64 = 1e-9;
/// Tolerance used when accepting a matrix from outside as rigid.
pub const RIGID_IO_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not rigid: {0}")]
    NotRigid(String),
    #[error("transform file: {0}")]
    Io(#[from] std::io::Error),
    #[error("transform file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("transform matrix must hold 16 numbers, got {0}")]
    WrongLength(usize),
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RigidTransform")
            .field("rotation", &self.rotation.as_slice())
            .field("translation", &[self.translation.x, self.translation.y, self.translation.z])
            .finish()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a transform, checking that `rotation` is a proper rotation within `tol`.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3, tol: f64) -> Result<Self, GeometryError> {
        check_rotation(&rotation, tol)?;
        Ok(Self { rotation, translation })
    }

    /// Builds a transform from a rotation that is already known to be orthonormal
    /// (to within numerical precision). The rotation is re-projected if it drifted.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation: maybe_reorthonormalize(rotation), translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation of `angle_rad` about `axis` through the origin.
    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad);
        Self { rotation: *rot.matrix(), translation: Vec3::zeros() }
    }

    /// Rotation given as a scaled axis (axis · angle in radians).
    pub fn from_scaled_axis(v: &Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_scaled_axis(*v);
        Self { rotation: *rot.matrix(), translation: Vec3::zeros() }
    }

    /// Accepts a 4×4 homogeneous matrix if its upper-left block is a rotation
    /// and its bottom row is `[0 0 0 1]`, both within `tol`.
    pub fn from_matrix4(m: &Matrix4<f64>, tol: f64) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if bottom.iter().any(|v| v.abs() > tol) {
            return Err(GeometryError::NotRigid("bottom row must be [0 0 0 1]".into()));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&rotation, tol)?;
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Self { rotation: polar_project(&rotation), translation })
    }

    pub fn from_row_major(values: &[f64], tol: f64) -> Result<Self, GeometryError> {
        if values.len() != 16 {
            return Err(GeometryError::WrongLength(values.len()));
        }
        Self::from_matrix4(&Matrix4::from_row_slice(values), tol)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let m = self.to_matrix4();
        (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = maybe_reorthonormalize(self.rotation * other.rotation);
        let translation = self.rotation * other.translation + self.translation;
        RigidTransform { rotation, translation }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Geodesic rotation angle of this transform, radians in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Rotation angle and translation distance between two transforms.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        (rotation_angle(&rel), (self.translation - other.translation).norm())
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, GeometryError> {
        let doc: TransformDoc = serde_json::from_str(text)?;
        Self::from_row_major(&doc.matrix, RIGID_IO_TOLERANCE)
    }

    pub fn to_json_string(&self) -> String {
        let doc = TransformDoc { matrix: self.to_row_major() };
        serde_json::to_string_pretty(&doc).expect("transform serializes")
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// On-disk transform document: `{"matrix": [16 numbers, row-major]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformDoc {
    pub matrix: Vec<f64>,
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformDoc { matrix: self.to_row_major() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = TransformDoc::deserialize(d)?;
        RigidTransform::from_row_major(&doc.matrix, RIGID_IO_TOLERANCE).map_err(serde::de::Error::custom)
    }
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.amax().max((r.determinant() - 1.0).abs())
}

fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NotRigid("non-finite entries".into()));
    }
    let err = orthonormality_error(r);
    if err > tol {
        return Err(GeometryError::NotRigid(format!("orthonormality error {err:.3e} exceeds {tol:.1e}")));
    }
    Ok(())
}

fn maybe_reorthonormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    if orthonormality_error(&r) > REORTHO_DRIFT {
        polar_project(&r)
    } else {
        r
    }
}

/// Nearest proper rotation to `m` in the Frobenius sense (orthogonal polar factor,
/// sign-corrected so the determinant is +1).
pub fn polar_project(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    u * fix * v_t
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 form stays accurate near 0 and π.
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin2 = skew.norm();
    let cos2 = r.trace() - 1.0;
    sin2.atan2(cos2)
}

/// Axis·angle vector of a rotation matrix (matrix logarithm).
pub fn rotation_log(r: &Matrix3<f64>) -> Vec3 {
    nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg.to_radians()
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Shortest rotation taking unit vector `from` onto unit vector `to`. For
/// antiparallel inputs the half-turn axis is the first of x, y that is not
/// parallel to `from`.
pub fn minimal_rotation(from: &Vec3, to: &Vec3) -> Matrix3<f64> {
    let c = from.dot(to).clamp(-1.0, 1.0);
    let axis = from.cross(to);
    let s = axis.norm();
    if s < 1e-12 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        let helper = if from.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let axis = from.cross(&helper).normalize();
        return *nalgebra::Rotation3::from_axis_angle(&Unit::new_unchecked(axis), std::f64::consts::PI).matrix();
    }
    *nalgebra::Rotation3::from_axis_angle(&Unit::new_unchecked(axis / s), s.atan2(c)).matrix()
}

/// Parses `"x,y,z"` into a point.
pub fn parse_point(s: &str) -> Option<Point3> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    (parts.len() == 3).then(|| Point3::new(parts[0], parts[1], parts[2]))
}

#[cfg(test)]
pub(crate) mod testing {
    pub use crate::synth::{random_point, random_transform};
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Point3, b: &Point3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn compose_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng, 100.0);
        let c = RigidTransform::identity().compose(&t);
        assert!((c.to_matrix4() - t.to_matrix4()).amax() < 1e-15);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = random_transform(&mut rng, 500.0);
            let c = t.compose(&t.inverse());
            assert!((c.to_matrix4() - Matrix4::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn compose_chain_matches_sequential_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts: Vec<_> = (0..4).map(|_| random_transform(&mut rng, 300.0)).collect();
        let chain = ts[0].compose(&ts[1]).compose(&ts[2]).compose(&ts[3]);
        for _ in 0..20 {
            let p = random_point(&mut rng, 200.0);
            let mut q = p;
            for t in ts.iter().rev() {
                q = t.transform_point(&q);
            }
            assert!(close(&chain.transform_point(&p), &q, 1e-9));
        }
    }

    #[test]
    fn inverse_cases() {
        let inv = RigidTransform::identity().inverse();
        assert_eq!(inv.to_matrix4(), Matrix4::identity());

        let t = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(*t.translation(), Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(*t.rotation(), Matrix3::identity());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng, 400.0);
        let ti = t.inverse();
        for _ in 0..20 {
            let p = random_point(&mut rng, 300.0);
            assert!(close(&ti.transform_point(&t.transform_point(&p)), &p, 1e-9));
        }
    }

    #[test]
    fn transform_point_cases() {
        let p = RigidTransform::identity().transform_point(&Point3::new(5.0, 0.0, 0.0));
        assert_eq!(p, Point3::new(5.0, 0.0, 0.0));

        let rz = RigidTransform::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let q = rz.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert!(close(&q, &Point3::new(0.0, 1.0, 0.0), 1e-12));

        // Homogeneous-matrix oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = random_transform(&mut rng, 500.0);
            let p = random_point(&mut rng, 500.0);
            let m = t.to_matrix4();
            let h = m * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            assert!(close(&t.transform_point(&p), &Point3::new(h.x, h.y, h.z), 1e-12));
        }
    }

    #[test]
    fn long_compose_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = RigidTransform::identity();
        for _ in 0..1000 {
            acc = acc.compose(&random_transform(&mut rng, 10.0));
            assert!(acc.orthonormality_error() < 1e-9);
        }
        assert!(acc.inverse().orthonormality_error() < 1e-9);
    }

    #[test]
    fn file_roundtrip_and_rejects_non_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_transform(&mut rng, 100.0);
        let back = RigidTransform::from_json_str(&t.to_json_string()).unwrap();
        assert!((back.to_matrix4() - t.to_matrix4()).amax() < 1e-12);

        let scaled = r#"{"matrix": [2,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#;
        assert!(matches!(RigidTransform::from_json_str(scaled), Err(GeometryError::NotRigid(_))));
        let reflect = r#"{"matrix": [-1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#;
        assert!(RigidTransform::from_json_str(reflect).is_err());
        let short = r#"{"matrix": [1,0,0]}"#;
        assert!(matches!(RigidTransform::from_json_str(short), Err(GeometryError::WrongLength(3))));
    }

    #[test]
    fn minimal_rotation_maps_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_point(&mut rng, 1.0).coords.normalize();
            let b = random_point(&mut rng, 1.0).coords.normalize();
            let r = minimal_rotation(&a, &b);
            assert!((r * a - b).norm() < 1e-12);
        }
        let r = minimal_rotation(&Vec3::z(), &-Vec3::z());
        assert!((r * Vec3::z() + Vec3::z()).norm() < 1e-12);
        assert!(orthonormality_error(&r) < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn compose_maps_like_sequential(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_transform(&mut rng, 1000.0);
            let b = random_transform(&mut rng, 1000.0);
            let p = random_point(&mut rng, 500.0);
            let lhs = a.compose(&b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            proptest::prop_assert!((lhs - rhs).norm() < 1e-9);
            proptest::prop_assert!(a.compose(&b).orthonormality_error() < 1e-9);
        }
    }
}
