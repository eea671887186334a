//! CT volumes: lattice geometry, index/world mapping, interpolation and the
//! half-resolution resampling applied before planning.

mod nrrd;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{Point3, Vec3};

pub use nrrd::{load_volume, parse_volume, save_volume, write_volume};

/// Hounsfield value assumed outside the lattice (air).
pub const AIR_HU: i16 = -1000;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("dimension mismatch: expected {expected} voxels, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("point outside the voxel lattice")]
    OutOfBounds,
    #[error("volume too small: every axis needs at least {min} voxels, got {dims:?}")]
    TooSmall { dims: [usize; 3], min: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Integer lattice coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

/// Lattice geometry shared by volumes and masks. Voxel `(0,0,0)` is centred on
/// `origin`; axis `a` of the lattice points along column `a` of `direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Point3,
    pub direction: Matrix3<f64>,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3, direction: Matrix3<f64>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&n| n < 2) {
            return Err(VolumeError::InvalidGrid(format!("dims {dims:?} must be >= 2 per axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidGrid(format!("spacing {spacing:?} must be positive")));
        }
        // Left-handed lattices are allowed; only orthonormality matters here.
        let gram = (direction.transpose() * direction - Matrix3::identity()).amax();
        if !(gram <= 1e-6) {
            return Err(VolumeError::InvalidGrid("direction is not orthonormal".into()));
        }
        Ok(Self { dims, spacing, origin, direction })
    }

    /// Axis-aligned grid with identity direction.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, origin, Matrix3::identity())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unlinear(&self, idx: usize) -> VoxelIndex {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        VoxelIndex::new(i, r % self.dims[1], r / self.dims[1])
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.i < self.dims[0] && idx.j < self.dims[1] && idx.k < self.dims[2]
    }

    pub fn index_to_world(&self, idx: VoxelIndex) -> Point3 {
        self.continuous_to_world([idx.i as f64, idx.j as f64, idx.k as f64])
    }

    pub fn continuous_to_world(&self, c: [f64; 3]) -> Point3 {
        let scaled = Vec3::new(c[0] * self.spacing[0], c[1] * self.spacing[1], c[2] * self.spacing[2]);
        self.origin + self.direction * scaled
    }

    /// Continuous lattice coordinate of a world point; integer values are voxel centres.
    pub fn world_to_continuous_index(&self, p: &Point3) -> [f64; 3] {
        let local = self.direction.transpose() * (p - self.origin);
        [local.x / self.spacing[0], local.y / self.spacing[1], local.z / self.spacing[2]]
    }

    /// Voxel whose cell contains `p`, if inside the lattice.
    pub fn world_to_index(&self, p: &Point3) -> Option<VoxelIndex> {
        let c = self.world_to_continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = (c[a] + 0.5).floor();
            if r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(VoxelIndex::new(out[0], out[1], out[2]))
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Regular 3D grid of signed 16-bit Hounsfield values, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(grid: Grid, voxels: Vec<i16>) -> Result<Self, VolumeError> {
        if voxels.len() != grid.len() {
            return Err(VolumeError::DimensionMismatch { expected: grid.len(), found: voxels.len() });
        }
        Ok(Self { grid, voxels })
    }

    pub fn filled(grid: Grid, value: i16) -> Self {
        let n = grid.len();
        Self { grid, voxels: vec![value; n] }
    }

    /// Builds a volume by evaluating `f` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(VoxelIndex) -> i16) -> Self {
        let mut voxels = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    voxels.push(f(VoxelIndex::new(i, j, k)));
                }
            }
        }
        Self { grid, voxels }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<i16> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, idx: VoxelIndex) -> i16 {
        self.voxels[self.grid.linear(idx.i, idx.j, idx.k)]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> i16 {
        self.voxels[self.grid.linear(i, j, k)]
    }

    pub fn index_to_world(&self, idx: VoxelIndex) -> Point3 {
        self.grid.index_to_world(idx)
    }

    pub fn world_to_continuous_index(&self, p: &Point3) -> [f64; 3] {
        self.grid.world_to_continuous_index(p)
    }

    /// Trilinear interpolation of the eight voxels around `p`.
    pub fn sample_trilinear(&self, p: &Point3) -> Result<f64, VolumeError> {
        self.sample_continuous(self.grid.world_to_continuous_index(p))
    }

    fn sample_continuous(&self, c: [f64; 3]) -> Result<f64, VolumeError> {
        const EPS: f64 = 1e-9;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let hi = (self.grid.dims[a] - 1) as f64;
            if !(c[a] >= -EPS && c[a] <= hi + EPS) {
                return Err(VolumeError::OutOfBounds);
            }
            let x = c[a].clamp(0.0, hi);
            // Keep base + 1 inside the lattice.
            let b = (x.floor() as usize).min(self.grid.dims[a] - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let v = |di: usize, dj: usize, dk: usize| self.at(i + di, j + dj, k + dk) as f64;
        let c00 = v(0, 0, 0) * (1.0 - fx) + v(1, 0, 0) * fx;
        let c10 = v(0, 1, 0) * (1.0 - fx) + v(1, 1, 0) * fx;
        let c01 = v(0, 0, 1) * (1.0 - fx) + v(1, 0, 1) * fx;
        let c11 = v(0, 1, 1) * (1.0 - fx) + v(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Ok(c0 * (1.0 - fz) + c1 * fz)
    }

    /// Halves the resolution along every axis by linear interpolation.
    ///
    /// Output voxel `n` sits at the midpoint of input voxels `2n` and `2n+1`, so the
    /// world extent of the covered cells is preserved.
    pub fn downsample_half(&self) -> Result<Volume, VolumeError> {
        let dims = self.grid.dims;
        if dims.iter().any(|&n| n < 4) {
            return Err(VolumeError::TooSmall { dims, min: 4 });
        }
        let new_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let spacing = [self.grid.spacing[0] * 2.0, self.grid.spacing[1] * 2.0, self.grid.spacing[2] * 2.0];
        let origin = self.grid.continuous_to_world([0.5, 0.5, 0.5]);
        let grid = Grid::new(new_dims, spacing, origin, self.grid.direction)?;
        let out = Volume::from_fn(grid, |idx| {
            let c = [2.0 * idx.i as f64 + 0.5, 2.0 * idx.j as f64 + 0.5, 2.0 * idx.k as f64 + 0.5];
            let v = self.sample_continuous(c).expect("half-grid sample inside lattice");
            v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        });
        Ok(out)
    }

    /// Extent summary used by `volume-info`.
    pub fn describe(&self) -> String {
        let g = &self.grid;
        format!(
            "dims: {} {} {}\nspacing: {} {} {}\norigin: {} {} {}",
            g.dims[0], g.dims[1], g.dims[2], g.spacing[0], g.spacing[1], g.spacing[2], g.origin.x, g.origin.y, g.origin.z
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Grid {
        Grid::axis_aligned(dims, spacing, Point3::from(origin)).unwrap()
    }

    fn rotated_grid() -> Grid {
        let r = crate::geometry::RigidTransform::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7);
        Grid::new([10, 12, 9], [0.7, 1.1, 2.5], Point3::new(-40.0, 12.0, 7.0), *r.rotation()).unwrap()
    }

    #[test]
    fn index_to_world_cases() {
        let g = grid([4, 4, 4], [1.0, 1.0, 1.0], [10.0, 20.0, 30.0]);
        assert_eq!(g.index_to_world(VoxelIndex::new(0, 0, 0)), Point3::new(10.0, 20.0, 30.0));
        let g = grid([4, 4, 4], [2.0, 2.0, 2.0], [1.0, 1.0, 1.0]);
        assert_eq!(g.index_to_world(VoxelIndex::new(1, 1, 1)), Point3::new(3.0, 3.0, 3.0));
    }

    #[test]
    fn world_index_roundtrip() {
        let g = rotated_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let c = g.world_to_continuous_index(&p);
            assert!((g.continuous_to_world(c) - p).norm() < 1e-9);
        }
        for k in 0..9 {
            let idx = VoxelIndex::new(3, 5, k);
            assert_eq!(g.world_to_index(&g.index_to_world(idx)), Some(idx));
        }
    }

    #[test]
    fn trilinear_cases() {
        let g = grid([3, 3, 3], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]);
        let v = Volume::from_fn(g, |idx| if idx.i == 0 { 0 } else { 100 });
        assert_eq!(v.sample_trilinear(&Point3::new(2.0, 1.0, 1.0)).unwrap(), 100.0);
        assert_eq!(v.sample_trilinear(&Point3::new(0.0, 0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(v.sample_trilinear(&Point3::new(0.5, 1.0, 2.0)).unwrap(), 50.0);
        assert!(matches!(v.sample_trilinear(&Point3::new(2.5, 0.0, 0.0)), Err(VolumeError::OutOfBounds)));
    }

    #[test]
    fn trilinear_matches_naive_weights() {
        let g = rotated_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = Volume::from_fn(g.clone(), |_| rng.random_range(-1000..2000));
        for _ in 0..200 {
            let c = [rng.random_range(0.0..9.0), rng.random_range(0.0..11.0), rng.random_range(0.0..8.0)];
            let p = g.continuous_to_world(c);
            // Naive oracle: weight every lattice voxel by the hat function.
            let mut expected = 0.0;
            for k in 0..9 {
                for j in 0..12 {
                    for i in 0..10 {
                        let w = (1.0 - (c[0] - i as f64).abs()).max(0.0)
                            * (1.0 - (c[1] - j as f64).abs()).max(0.0)
                            * (1.0 - (c[2] - k as f64).abs()).max(0.0);
                        expected += w * v.at(i, j, k) as f64;
                    }
                }
            }
            assert!((v.sample_trilinear(&p).unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn downsample_constant() {
        let g = grid([16, 16, 16], [1.0, 1.5, 0.5], [0.0, 0.0, 0.0]);
        let v = Volume::filled(g, 40);
        let d = v.downsample_half().unwrap();
        assert_eq!(d.dims(), [8, 8, 8]);
        assert_eq!(d.spacing(), [2.0, 3.0, 1.0]);
        assert!(d.voxels().iter().all(|&x| x == 40));
    }

    #[test]
    fn downsample_preserves_ramp_and_extent() {
        let g = grid([21, 8, 6], [0.8, 1.0, 1.0], [5.0, 0.0, 0.0]);
        // Integer-valued on the fine lattice, so only the output is rounded.
        let ramp = |x: f64| 6.25 * (x - 5.0) - 100.0;
        let v = Volume::from_fn(g.clone(), |idx| ramp(g.index_to_world(idx).x).round() as i16);
        let d = v.downsample_half().unwrap();
        assert_eq!(d.dims(), [10, 4, 3]);
        for i in 1..9 {
            let p = d.index_to_world(VoxelIndex::new(i, 1, 1));
            assert!((d.at(i, 1, 1) as f64 - ramp(p.x)).abs() <= 0.5 + 1e-9);
        }
        // First cell edge of the coarse grid coincides with the fine grid's.
        let fine_edge = g.continuous_to_world([-0.5, -0.5, -0.5]);
        let coarse_edge = d.grid().continuous_to_world([-0.5, -0.5, -0.5]);
        assert!((fine_edge - coarse_edge).norm() < 1e-12);
    }

    #[test]
    fn downsample_too_small() {
        let v = Volume::filled(grid([3, 3, 3], [1.0; 3], [0.0; 3]), 0);
        assert!(matches!(v.downsample_half(), Err(VolumeError::TooSmall { .. })));
    }

    #[test]
    fn downsampled_sampling_tracks_smooth_field() {
        // Quadratic field: trilinear error is bounded by the second difference.
        let g = grid([24, 24, 24], [1.0; 3], [0.0; 3]);
        let f = |p: &Point3| 0.5 * ((p.x - 12.0).powi(2) + (p.y - 10.0).powi(2) + (p.z - 11.0).powi(2));
        let v = Volume::from_fn(g.clone(), |idx| f(&g.index_to_world(idx)).round() as i16);
        let d = v.downsample_half().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let p = Point3::new(rng.random_range(2.0..20.0), rng.random_range(2.0..20.0), rng.random_range(2.0..20.0));
            let fine = v.sample_trilinear(&p).unwrap();
            let coarse = d.sample_trilinear(&p).unwrap();
            // Second difference of 0.5·x² over spacing h is h² per axis; coarse h = 2.
            let bound = 3.0 * 0.125 * 4.0 * 2.0 + 1.0;
            assert!((fine - coarse).abs() < bound, "{fine} vs {coarse}");
        }
    }
}
