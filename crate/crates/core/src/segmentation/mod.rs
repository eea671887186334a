//! Binary-mask pipeline for skin segmentation: threshold, connected
//! components, world-metric morphology, cavity filling, surface extraction,
//! and bright-sphere detection for the registration phantom.

mod components;
mod morphology;
mod spheres;
mod surface;

use thiserror::Error;

use crate::volume::{Grid, Volume, VoxelIndex};

pub use components::{label_components, largest_component, largest_component_with, Connectivity, Labels};
pub use morphology::{dilate, erode, morph_close};
pub use spheres::{detect_spheres, SphereDetection};
pub use surface::{extract_surface, extract_surface_with, DEFAULT_RELAX_ITERATIONS};

/// Default skin threshold in HU.
pub const DEFAULT_SKIN_THRESHOLD_HU: i16 = -300;
/// Default closing radius. A 1 cm kernel is read as a ball of 1 cm diameter.
pub const DEFAULT_CLOSING_RADIUS_MM: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("mask has no set voxels")]
    EmptyMask,
    #[error("expected at least {expected} components, found {found}")]
    TooFewComponents { expected: usize, found: usize },
}

/// One boolean per voxel on a volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, bits: vec![false; n] }
    }

    pub fn from_bits(grid: Grid, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), grid.len(), "mask size must match its grid");
        Self { grid, bits }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(VoxelIndex) -> bool) -> Self {
        let mut bits = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    bits.push(f(VoxelIndex::new(i, j, k)));
                }
            }
        }
        Self { grid, bits }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, idx: VoxelIndex) -> bool {
        self.bits[self.grid.linear(idx.i, idx.j, idx.k)]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.linear(i, j, k)]
    }

    pub fn set(&mut self, idx: VoxelIndex, value: bool) {
        let l = self.grid.linear(idx.i, idx.j, idx.k);
        self.bits[l] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Membership of the voxel whose cell contains `p`; false outside the lattice.
    pub fn contains_point(&self, p: &crate::geometry::Point3) -> bool {
        self.grid.world_to_index(p).is_some_and(|idx| self.get(idx))
    }

    /// True if `idx` and all its 26 neighbours are set and inside the lattice.
    pub fn is_interior(&self, idx: VoxelIndex) -> bool {
        let d = self.grid.dims;
        if idx.i == 0 || idx.j == 0 || idx.k == 0 || idx.i + 1 >= d[0] || idx.j + 1 >= d[1] || idx.k + 1 >= d[2] {
            return false;
        }
        (idx.k - 1..=idx.k + 1).all(|k| (idx.j - 1..=idx.j + 1).all(|j| (idx.i - 1..=idx.i + 1).all(|i| self.at(i, j, k))))
    }

    pub fn inverted(&self) -> Mask {
        Mask { grid: self.grid.clone(), bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Serializes the mask as a 0/1 volume for export.
    pub fn to_volume(&self) -> Volume {
        Volume::new(self.grid.clone(), self.bits.iter().map(|&b| b as i16).collect()).expect("same grid")
    }
}

pub fn threshold(volume: &Volume, t_hu: i16) -> Mask {
    Mask { grid: volume.grid().clone(), bits: volume.voxels().iter().map(|&v| v >= t_hu).collect() }
}

pub fn invert(mask: &Mask) -> Mask {
    mask.inverted()
}

/// Body segmentation with internal cavities filled:
/// threshold → largest component → closing → invert → largest exterior-air
/// component → invert.
pub fn body_mask(volume: &Volume, t_hu: i16, closing_radius_mm: f64) -> Result<Mask, SegmentationError> {
    let tissue = threshold(volume, t_hu);
    let body = largest_component(&tissue)?;
    let closed = morph_close(&body, closing_radius_mm);
    let air = invert(&closed);
    let exterior = largest_component_with(&air, Connectivity::TwentySix)?;
    Ok(invert(&exterior))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::geometry::Point3;

    pub fn cube_grid(n: usize, spacing: f64) -> Grid {
        let c = -(n as f64 - 1.0) * spacing / 2.0;
        Grid::axis_aligned([n, n, n], [spacing; 3], Point3::new(c, c, c)).unwrap()
    }

    /// Exterior flood fill from voxel (0,0,0) through unset voxels (26-connected).
    pub fn exterior_fill(mask: &Mask) -> Mask {
        let g = mask.grid().clone();
        let d = g.dims;
        let mut out = Mask::empty(g.clone());
        let mut stack = vec![VoxelIndex::new(0, 0, 0)];
        assert!(!mask.get(stack[0]));
        out.set(stack[0], true);
        while let Some(v) = stack.pop() {
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (i, j, k) = (v.i as i64 + di, v.j as i64 + dj, v.k as i64 + dk);
                        if i < 0 || j < 0 || k < 0 || i >= d[0] as i64 || j >= d[1] as i64 || k >= d[2] as i64 {
                            continue;
                        }
                        let n = VoxelIndex::new(i as usize, j as usize, k as usize);
                        if !mask.get(n) && !out.get(n) {
                            out.set(n, true);
                            stack.push(n);
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::geometry::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_cases() {
        let g = cube_grid(6, 1.0);
        assert!(threshold(&Volume::filled(g.clone(), -1000), -300).is_empty());
        assert_eq!(threshold(&Volume::filled(g.clone(), 0), -300).count(), 216);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn(g, |_| rng.random_range(-1000..1000));
        let expected = v.voxels().iter().filter(|&&x| x >= 17).count();
        assert_eq!(threshold(&v, 17).count(), expected);
    }

    #[test]
    fn invert_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mask::from_fn(cube_grid(9, 1.0), |_| rng.random_bool(0.4));
        assert_eq!(invert(&invert(&m)), m);
    }

    fn sphere_volume(n: usize, spacing: f64, radius: f64, cavity: Option<f64>, channel: Option<f64>) -> Volume {
        let g = cube_grid(n, spacing);
        Volume::from_fn(g.clone(), |idx| {
            let p = g.index_to_world(idx);
            let r = p.coords.norm();
            if r > radius {
                return -1000;
            }
            if cavity.is_some_and(|c| r < c) {
                return -900;
            }
            // Channel along +x from the cavity to the surface.
            if let Some(w) = channel {
                if p.x > 0.0 && p.y.abs() < w / 2.0 && p.z.abs() < w / 2.0 {
                    return -1000;
                }
            }
            0
        })
    }

    #[test]
    fn body_mask_solid_sphere_is_unchanged() {
        let v = sphere_volume(40, 1.0, 14.0, None, None);
        let m = body_mask(&v, -300, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        assert_eq!(m, threshold(&v, -300));
    }

    #[test]
    fn body_mask_fills_cavity() {
        let v = sphere_volume(44, 1.0, 18.0, Some(8.0), None);
        let m = body_mask(&v, -300, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        let g = v.grid();
        let center = g.world_to_index(&Point3::origin()).unwrap();
        assert!(m.get(center));
        // Oracle: everything not reachable from the corner through air.
        let oracle = exterior_fill(&threshold(&v, -300)).inverted();
        assert_eq!(m, oracle);
    }

    #[test]
    fn body_mask_seals_channel_into_cavity() {
        let v = sphere_volume(52, 1.0, 22.0, Some(9.0), Some(4.0));
        let raw = threshold(&v, -300);
        // Without closing the cavity is exterior air.
        let center = v.grid().world_to_index(&Point3::origin()).unwrap();
        assert!(exterior_fill(&raw).get(center));
        let m = body_mask(&v, -300, DEFAULT_CLOSING_RADIUS_MM).unwrap();
        assert!(m.get(center));
        let closed = morph_close(&largest_component(&raw).unwrap(), DEFAULT_CLOSING_RADIUS_MM);
        assert_eq!(m, exterior_fill(&closed).inverted());
        let labels = label_components(&m, Connectivity::Six);
        assert_eq!(labels.count(), 1);
    }

    #[test]
    fn body_mask_requires_tissue() {
        let v = Volume::filled(cube_grid(8, 1.0), -1000);
        assert_eq!(body_mask(&v, -300, 5.0), Err(SegmentationError::EmptyMask));
    }
}
