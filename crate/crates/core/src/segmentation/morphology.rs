//! Binary dilation/erosion with a ball of physical radius, rasterised on the
//! (possibly anisotropic) voxel grid. A voxel belongs to the ball when the
//! world distance between voxel centres is at most the radius.
//!
//! Dilation is computed as a windowed separable min-plus transform of squared
//! world distances, one axis at a time. The window per axis is the ball's
//! extent on that axis, so every value at or below `r²` is exact.

use super::Mask;

fn squared_distance_within(mask: &Mask, radius_mm: f64) -> Vec<f64> {
    let g = mask.grid();
    let dims = g.dims;
    let mut field: Vec<f64> = mask.bits().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut line_in = Vec::new();
    let mut line_out = Vec::new();
    for axis in 0..3 {
        let w = g.spacing[axis];
        let reach = (radius_mm / w).floor() as usize;
        if reach == 0 {
            continue;
        }
        let weights: Vec<f64> = (0..=reach).map(|d| (d as f64 * w).powi(2)).collect();
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let stride_of = |a: usize| match a {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * stride_of(o1) + b * stride_of(o2);
                line_in.clear();
                line_in.extend((0..n).map(|p| field[base + p * stride]));
                if line_in.iter().all(|v| v.is_infinite()) {
                    continue;
                }
                line_out.clear();
                for p in 0..n {
                    let lo = p.saturating_sub(reach);
                    let hi = (p + reach).min(n - 1);
                    let mut best = f64::INFINITY;
                    for q in lo..=hi {
                        let v = line_in[q];
                        if v.is_finite() {
                            let cand = v + weights[p.abs_diff(q)];
                            if cand < best {
                                best = cand;
                            }
                        }
                    }
                    line_out.push(best);
                }
                for p in 0..n {
                    field[base + p * stride] = line_out[p];
                }
            }
        }
    }
    field
}

/// Adds every voxel within `radius_mm` of a set voxel.
pub fn dilate(mask: &Mask, radius_mm: f64) -> Mask {
    assert!(radius_mm >= 0.0, "radius must be non-negative");
    if radius_mm == 0.0 || mask.is_empty() {
        return mask.clone();
    }
    // Relative slack so lattice points exactly on the sphere are kept
    // regardless of summation order.
    let r2 = radius_mm * radius_mm * (1.0 + 1e-12);
    let field = squared_distance_within(mask, radius_mm);
    Mask::from_bits(mask.grid().clone(), field.iter().map(|&d| d <= r2).collect())
}

/// Keeps voxels whose whole in-lattice ball neighbourhood is set. Voxels
/// outside the lattice never erode the mask.
pub fn erode(mask: &Mask, radius_mm: f64) -> Mask {
    dilate(&mask.inverted(), radius_mm).inverted()
}

/// Dilation followed by erosion with the same ball, as if the lattice were
/// surrounded by unset voxels. The mask is padded by the ball's reach for
/// the duration, so the dilation can spill past the border and still be
/// eroded back; a body cut off by the border keeps its cut face.
pub fn morph_close(mask: &Mask, radius_mm: f64) -> Mask {
    assert!(radius_mm >= 0.0, "radius must be non-negative");
    if radius_mm == 0.0 || mask.is_empty() {
        return mask.clone();
    }
    let g = mask.grid();
    let pad: Vec<usize> = g.spacing.iter().map(|s| (radius_mm / s).floor() as usize).collect();
    let mut pg = g.clone();
    for (n, p) in pg.dims.iter_mut().zip(&pad) {
        *n += 2 * p;
    }
    let d = g.dims;
    let mut padded = Mask::empty(pg.clone());
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if mask.at(i, j, k) {
                    let l = pg.linear(i + pad[0], j + pad[1], k + pad[2]);
                    padded.bits_mut()[l] = true;
                }
            }
        }
    }
    let closed = erode(&dilate(&padded, radius_mm), radius_mm);
    Mask::from_fn(g.clone(), |v| closed.at(v.i + pad[0], v.j + pad[1], v.k + pad[2]))
}

#[cfg(test)]
mod tests {
    use super::super::testing::cube_grid;
    use super::*;
    use crate::geometry::Point3;
    use crate::volume::{Grid, VoxelIndex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Structuring-element stamping oracle.
    fn stamp_dilate(mask: &Mask, r: f64) -> Mask {
        let g = mask.grid();
        let s = g.spacing;
        let reach: Vec<i64> = s.iter().map(|w| (r / w).floor() as i64).collect();
        let mut offs = Vec::new();
        for dk in -reach[2]..=reach[2] {
            for dj in -reach[1]..=reach[1] {
                for di in -reach[0]..=reach[0] {
                    let d2 = (di as f64 * s[0]).powi(2) + (dj as f64 * s[1]).powi(2) + (dk as f64 * s[2]).powi(2);
                    if d2 <= r * r * (1.0 + 1e-12) {
                        offs.push((di, dj, dk));
                    }
                }
            }
        }
        let d = g.dims;
        let mut out = Mask::empty(g.clone());
        for l in 0..g.len() {
            if !mask.bits()[l] {
                continue;
            }
            let v = g.unlinear(l);
            for &(di, dj, dk) in &offs {
                let (i, j, k) = (v.i as i64 + di, v.j as i64 + dj, v.k as i64 + dk);
                if i >= 0 && j >= 0 && k >= 0 && i < d[0] as i64 && j < d[1] as i64 && k < d[2] as i64 {
                    out.set(VoxelIndex::new(i as usize, j as usize, k as usize), true);
                }
            }
        }
        out
    }

    fn stamp_erode(mask: &Mask, r: f64) -> Mask {
        stamp_dilate(&mask.inverted(), r).inverted()
    }

    #[test]
    fn radius_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mask::from_fn(cube_grid(8, 1.0), |_| rng.random_bool(0.3));
        assert_eq!(dilate(&m, 0.0), m);
        assert_eq!(morph_close(&m, 0.0), m);
    }

    #[test]
    fn single_voxel_dilation_is_ball() {
        let g = Grid::axis_aligned([15, 15, 15], [0.8, 1.0, 1.3], Point3::origin()).unwrap();
        let centre = VoxelIndex::new(7, 7, 7);
        let m = Mask::from_fn(g.clone(), |v| v == centre);
        let r = 2.0 * 1.3;
        let out = dilate(&m, r);
        let c = g.index_to_world(centre);
        for l in 0..g.len() {
            let v = g.unlinear(l);
            let inside = (g.index_to_world(v) - c).norm() <= r * (1.0 + 1e-12);
            assert_eq!(out.get(v), inside, "{v:?}");
        }
    }

    #[test]
    fn matches_stamping_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..6 {
            let spacing = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..2.0)];
            let g = Grid::axis_aligned([13, 11, 9], spacing, Point3::origin()).unwrap();
            let m = Mask::from_fn(g, |_| rng.random_bool(0.08));
            let r = 1.0 + trial as f64 * 0.6;
            assert_eq!(dilate(&m, r), stamp_dilate(&m, r));
            assert_eq!(erode(&m, r), stamp_erode(&m, r));
        }
    }

    #[test]
    fn closing_seals_wall_gap() {
        // A 3-voxel gap in a 2-voxel-thick wall, 1 mm spacing, 1 cm ball.
        // At an integer radius the rasterised ball has single-voxel poles
        // that reach through any hole, so the radius sits just above.
        let g = cube_grid(40, 1.0);
        let m = Mask::from_fn(g, |v| (19..21).contains(&v.i) && !((18..21).contains(&v.j) && (18..21).contains(&v.k)));
        let gap = VoxelIndex::new(19, 19, 19);
        assert!(!m.get(gap));
        let r = 10.5;
        let closed = morph_close(&m, r);
        assert!(closed.get(gap));
        let oracle = stamp_erode(&stamp_dilate(&m, r), r);
        // The wall spans the lattice, so border padding changes nothing here.
        assert_eq!(closed, oracle);
    }

    #[test]
    fn closing_keeps_border_cut_and_does_not_spill() {
        let g = cube_grid(24, 1.0);
        let slab = Mask::from_fn(g.clone(), |v| v.k < 10);
        assert_eq!(morph_close(&slab, 5.0), slab);
        let ball = Mask::from_fn(g.clone(), |v| g.index_to_world(v).coords.norm() <= 9.0);
        assert_eq!(morph_close(&ball, 5.0), ball);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn dilation_extensive_and_closing_idempotent(seed in 0u64..1000, r in 0.5f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mask::from_fn(cube_grid(12, 1.0), |_| rng.random_bool(0.15));
            let d = dilate(&m, r);
            proptest::prop_assert!(m.bits().iter().zip(d.bits()).all(|(a, b)| !a || *b));
            let c = morph_close(&m, r);
            proptest::prop_assert!(m.bits().iter().zip(c.bits()).all(|(a, b)| !a || *b));
            proptest::prop_assert_eq!(morph_close(&c, r), c);
        }
    }
}
