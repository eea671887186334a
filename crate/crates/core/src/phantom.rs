//! Synthetic CT phantoms with known ground truth.

use serde::{Deserialize, Serialize};

use crate::geometry::{Dir3, Point3, RigidTransform, Vec3};
use crate::registration::PhantomModel;
use crate::volume::{Grid, Volume, AIR_HU};

pub const SOFT_TISSUE_HU: i16 = 40;
pub const LUNG_HU: i16 = -850;
pub const BONE_HU: i16 = 1500;
pub const STEEL_HU: i16 = 3000;
/// Polyoxymethylene block holding the steel balls.
pub const PLATE_HU: i16 = 340;

/// Cubic lattice of `n` voxels per axis centred on the world origin.
pub fn centred_grid(n: usize, spacing: f64) -> Grid {
    let c = -(n as f64 - 1.0) * spacing / 2.0;
    Grid::axis_aligned([n, n, n], [spacing; 3], Point3::new(c, c, c)).expect("valid cubic grid")
}

/// Homogeneous ball of tissue in air, centred on the origin.
pub fn sphere(n: usize, spacing: f64, radius_mm: f64, hu: i16) -> Volume {
    let g = centred_grid(n, spacing);
    Volume::from_fn(g.clone(), |idx| if g.index_to_world(idx).coords.norm() <= radius_mm { hu } else { AIR_HU })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TorsoSpec {
    pub dims: usize,
    pub spacing_mm: f64,
    pub lungs: bool,
    pub bone_shell: bool,
    pub aperture_half_angle_deg: f64,
    /// Detached arm beside the torso, for air-gap obstructions.
    pub arm: bool,
}

impl Default for TorsoSpec {
    fn default() -> Self {
        Self { dims: 128, spacing_mm: 2.0, lungs: true, bone_shell: true, aperture_half_angle_deg: 25.0, arm: true }
    }
}

/// Generator ground truth for [`torso`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoTruth {
    pub target: Point3,
    pub shell_inner_mm: f64,
    pub shell_outer_mm: f64,
    pub aperture_axis: Dir3,
    pub aperture_half_angle_deg: f64,
    /// Elliptic cylinder semi-axes (x, y) and half length (z).
    pub torso_semi_axes_mm: [f64; 3],
    pub arm_centre_x_mm: f64,
    pub arm_radius_mm: f64,
}

impl TorsoTruth {
    /// Angle between `p − target` and the aperture axis, degrees.
    pub fn aperture_angle_deg(&self, p: &Point3) -> f64 {
        let v = p - self.target;
        (v.dot(&self.aperture_axis) / v.norm()).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Elliptic-cylinder torso with two lungs, a bone shell around the target
/// with one conical aperture, and a detached arm. All proportions scale
/// with the field of view so any `dims`/`spacing` pair gives the same shape.
pub fn torso(spec: &TorsoSpec) -> (Volume, TorsoTruth) {
    let g = centred_grid(spec.dims, spec.spacing_mm);
    let f = spec.dims as f64 * spec.spacing_mm;
    let (a, b, h) = (0.33 * f, 0.26 * f, 0.42 * f);
    let target = Point3::new(0.0, -0.1 * f, -0.2 * f);
    let shell_inner = 0.08 * f;
    let shell_outer = shell_inner + (3.0 * spec.spacing_mm).max(0.025 * f);
    let axis = Dir3::new_normalize(Vec3::new(0.3, 1.0, 0.2));
    let cos_half = spec.aperture_half_angle_deg.to_radians().cos();
    let lung_centres = [Point3::new(-0.16 * f, 0.02 * f, 0.12 * f), Point3::new(0.16 * f, 0.02 * f, 0.12 * f)];
    let lung_semi = [0.09 * f, 0.11 * f, 0.18 * f];
    let arm_r = 0.05 * f;
    let arm_x = a + 0.035 * f + arm_r;

    let truth = TorsoTruth {
        target,
        shell_inner_mm: shell_inner,
        shell_outer_mm: shell_outer,
        aperture_axis: axis,
        aperture_half_angle_deg: spec.aperture_half_angle_deg,
        torso_semi_axes_mm: [a, b, h],
        arm_centre_x_mm: arm_x,
        arm_radius_mm: arm_r,
    };
    let vol = Volume::from_fn(g.clone(), |idx| {
        let p = g.index_to_world(idx);
        let in_torso = (p.x / a).powi(2) + (p.y / b).powi(2) <= 1.0 && p.z.abs() <= h;
        let in_arm = spec.arm && (p.x - arm_x).powi(2) + p.y.powi(2) <= arm_r * arm_r && p.z.abs() <= 0.35 * f;
        if in_arm {
            return SOFT_TISSUE_HU;
        }
        if !in_torso {
            return AIR_HU;
        }
        if spec.bone_shell {
            let v = p - target;
            let r = v.norm();
            if r >= shell_inner && r <= shell_outer && v.dot(&axis) < cos_half * r {
                return BONE_HU;
            }
        }
        if spec.lungs {
            for c in &lung_centres {
                let d = p - c;
                if (d.x / lung_semi[0]).powi(2) + (d.y / lung_semi[1]).powi(2) + (d.z / lung_semi[2]).powi(2) <= 1.0 {
                    return LUNG_HU;
                }
            }
        }
        SOFT_TISSUE_HU
    });
    (vol, truth)
}

/// Steel-ball phantom posed in a cubic lattice: a plastic block 10 mm
/// beyond the outermost balls in x/y and 20 mm thick, with antialiased balls.
pub fn ball_plate(model: &PhantomModel, ct_from_sb: &RigidTransform, n: usize, spacing: f64) -> Volume {
    let g = centred_grid(n, spacing);
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for b in &model.balls {
        lo = lo.inf(&b.center.coords);
        hi = hi.sup(&b.center.coords);
    }
    lo -= Vec3::new(10.0, 10.0, 0.0);
    hi += Vec3::new(10.0, 10.0, 0.0);
    lo.z = -10.0;
    hi.z = 10.0;
    let sb_from_ct = ct_from_sb.inverse();
    let vol = Volume::from_fn(g.clone(), |idx| {
        let p = sb_from_ct.transform_point(&g.index_to_world(idx));
        if (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) { PLATE_HU } else { AIR_HU }
    });
    let mut buf = vol.into_voxels();
    for b in &model.balls {
        render_ball(&mut buf, &g, &ct_from_sb.transform_point(&b.center), b.class.radius_mm(), STEEL_HU, 4);
    }
    Volume::new(g, buf).expect("buffer matches grid")
}

/// Renders a ball with partial-volume antialiasing into a HU buffer.
/// Voxels near the surface are supersampled `ss³` times; values only rise.
pub fn render_ball(volume: &mut [i16], grid: &Grid, center: &Point3, radius: f64, hu: i16, ss: usize) {
    let c = grid.world_to_continuous_index(center);
    let reach: Vec<f64> = grid.spacing.iter().map(|s| radius / s + 1.0).collect();
    let lo: Vec<usize> = (0..3).map(|a| (c[a] - reach[a]).floor().max(0.0) as usize).collect();
    let hi: Vec<i64> = (0..3).map(|a| ((c[a] + reach[a]).ceil() as i64).min(grid.dims[a] as i64 - 1)).collect();
    if hi.iter().any(|&h| h < 0) {
        return;
    }
    let half_diag = 0.5 * (grid.spacing.iter().map(|s| s * s).sum::<f64>()).sqrt();
    let o = |s: usize| (s as f64 + 0.5) / ss as f64 - 0.5;
    for k in lo[2]..=hi[2] as usize {
        for j in lo[1]..=hi[1] as usize {
            for i in lo[0]..=hi[0] as usize {
                let p = grid.continuous_to_world([i as f64, j as f64, k as f64]);
                let dist = (p - center).norm();
                let frac = if dist <= radius - half_diag {
                    1.0
                } else if dist >= radius + half_diag {
                    0.0
                } else {
                    let mut hits = 0usize;
                    for sk in 0..ss {
                        for sj in 0..ss {
                            for si in 0..ss {
                                let q = grid.continuous_to_world([i as f64 + o(si), j as f64 + o(sj), k as f64 + o(sk)]);
                                if (q - center).norm() <= radius {
                                    hits += 1;
                                }
                            }
                        }
                    }
                    hits as f64 / (ss * ss * ss) as f64
                };
                if frac > 0.0 {
                    let l = grid.linear(i, j, k);
                    let bg = volume[l] as f64;
                    let v = bg + frac * (hu as f64 - bg);
                    volume[l] = v.round().max(bg) as i16;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_is_centred() {
        let v = sphere(21, 1.0, 5.0, 40);
        assert_eq!(v.at(10, 10, 10), 40);
        assert_eq!(v.at(10, 10, 15), 40);
        assert_eq!(v.at(10, 10, 16), AIR_HU);
        assert_eq!(v.at(0, 0, 0), AIR_HU);
    }

    #[test]
    fn plate_balls_are_detected() {
        use crate::registration::{detect_balls, match_phantom, BALL_THRESHOLD_HU, MATCH_TOLERANCE_MM};
        let model = PhantomModel::reference();
        let pose = RigidTransform::from_parts(
            *nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.9).matrix(),
            Vec3::new(3.3, -4.1, 2.7),
        );
        let v = ball_plate(&model, &pose, 180, 1.0);
        let dets = detect_balls(&v, BALL_THRESHOLD_HU).unwrap();
        assert_eq!(dets.len(), 24);
        let m = match_phantom(&dets, &model, MATCH_TOLERANCE_MM).unwrap();
        assert_eq!(m.matched(), 24);
        let dt = (m.ct_from_sb.translation() - pose.translation()).norm();
        let dr = crate::geometry::rotation_angle(&(m.ct_from_sb.rotation() * pose.rotation().transpose())).to_degrees();
        assert!(dt < 0.3 && dr < 0.2, "{dt} mm {dr} deg");
    }

    #[test]
    fn torso_layout() {
        let spec = TorsoSpec { dims: 64, spacing_mm: 4.0, ..Default::default() };
        let (v, t) = torso(&spec);
        let at = |p: Point3| v.get(v.grid().world_to_index(&p).unwrap());
        assert_eq!(at(t.target), SOFT_TISSUE_HU);
        let r = 0.5 * (t.shell_inner_mm + t.shell_outer_mm);
        assert_eq!(at(t.target + t.aperture_axis.into_inner() * r), SOFT_TISSUE_HU);
        assert_eq!(at(t.target - t.aperture_axis.into_inner() * r), BONE_HU);
        assert_eq!(at(Point3::new(t.arm_centre_x_mm, 0.0, 0.0)), SOFT_TISSUE_HU);
        assert_eq!(at(Point3::new(t.arm_centre_x_mm - t.arm_radius_mm - 4.0, 0.0, 0.0)), AIR_HU);
        assert!(v.voxels().contains(&LUNG_HU));
        // Nothing touches the lattice border.
        let g = v.grid();
        for l in 0..g.len() {
            let idx = g.unlinear(l);
            if [idx.i, idx.j, idx.k].iter().any(|&x| x == 0 || x == 63) {
                assert_eq!(v.voxels()[l], AIR_HU);
            }
        }
    }
}
