//! Seeded generators for synthetic poses, calibration data and scenes.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::collision::CollisionScene;
use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::kinematics::ArmModel;
use crate::mesh::icosphere;
use crate::planner::{Classification, HeatMap, PlanParams, PointHeat};
use crate::registration::CalibrationSample;

/// Uniform random axis and angle, translation uniform in `±max_trans`.
pub fn random_transform<R: Rng>(rng: &mut R, max_trans: f64) -> RigidTransform {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(-3.1..3.1);
    let t = Vec3::new(
        rng.random_range(-max_trans..max_trans),
        rng.random_range(-max_trans..max_trans),
        rng.random_range(-max_trans..max_trans),
    );
    RigidTransform::from_parts(*RigidTransform::from_axis_angle(&axis, angle).rotation(), t)
}

pub fn random_point<R: Rng>(rng: &mut R, half: f64) -> Point3 {
    Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

/// Synthetic calibration data: random robot poses around a work
/// position and the matching tracker poses, with optional noise on the
/// tracker (mm, deg standard deviation).
pub fn synthetic_samples<R: Rng>(rng: &mut R, x: &RigidTransform, z: &RigidTransform, n: usize, noise_mm: f64, noise_deg: f64) -> Vec<CalibrationSample> {
    (0..n)
        .map(|_| {
            let b = RigidTransform::from_translation(Vec3::new(500.0, 0.0, 400.0)).compose(&random_transform(rng, 200.0));
            // B X = Z C  →  C = Z⁻¹ B X, camera_pose = C⁻¹
            let mut c = z.inverse().compose(&b).compose(x);
            if noise_mm > 0.0 || noise_deg > 0.0 {
                c = perturb(rng, &c, noise_mm, noise_deg);
            }
            CalibrationSample { robot_pose: b, camera_pose: c.inverse() }
        })
        .collect()
}

/// Adds isotropic Gaussian translation noise and a Gaussian rotation
/// about the pose's own origin.
pub fn perturb<R: Rng>(rng: &mut R, t: &RigidTransform, sigma_mm: f64, sigma_deg: f64) -> RigidTransform {
    let nt = Normal::new(0.0, sigma_mm.max(1e-300)).expect("valid sigma");
    let nr = Normal::new(0.0, sigma_deg.to_radians().max(1e-300)).expect("valid sigma");
    let dt = Vec3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    let w = Vec3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
    RigidTransform::from_parts(RigidTransform::from_scaled_axis(&w).rotation() * t.rotation(), t.translation() + dt)
}

/// Base placement used with [`sphere_scene`]: the body centre sits at
/// (650, 0, 300) in base coordinates.
pub fn sphere_base_in_ct() -> RigidTransform {
    RigidTransform::from_translation(Vec3::new(-650.0, 0.0, -300.0))
}

/// Sphere body of radius 100 mm at the CT origin, reference arm at
/// [`sphere_base_in_ct`], no gantry or table.
pub fn sphere_scene(subdivisions: usize) -> CollisionScene {
    let body = Arc::new(icosphere(Point3::origin(), 100.0, subdivisions));
    CollisionScene::new(body, ArmModel::reference(), sphere_base_in_ct())
}

/// Heat map marking every vertex of the scene body Feasible.
pub fn all_feasible(scene: &CollisionScene, target: Point3) -> HeatMap {
    let mesh = scene.body.mesh().clone();
    let heat: Vec<PointHeat> = mesh.vertices.iter().map(|p| PointHeat { distance_mm: (p - target).norm(), max_hu: Some(40), blocked: false }).collect();
    let classes = vec![Classification::Feasible; mesh.vertices.len()];
    HeatMap::assemble(mesh, target, PlanParams::default(), &heat, &classes)
}
