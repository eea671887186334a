use super::{label_components, threshold, Connectivity, SegmentationError};
use crate::geometry::Point3;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct SphereDetection {
    /// Intensity-weighted centroid, world mm.
    pub centroid: Point3,
    /// Radius of a sphere with the component's voxel volume.
    pub equiv_radius_mm: f64,
    pub voxel_count: usize,
}

/// Bright connected components (e.g. steel balls), largest first.
///
/// Centroids are taken over the component grown by two voxels, weighting
/// each voxel by its HU excess over the local background (median of the
/// grown box's outer faces). Partial-volume voxels below `t_hu` thus still
/// count in proportion to how much of the ball they hold.
pub fn detect_spheres(volume: &Volume, t_hu: i16, expected: usize) -> Result<Vec<SphereDetection>, SegmentationError> {
    const GROW: usize = 2;
    let mask = threshold(volume, t_hu);
    let labels = label_components(&mask, Connectivity::Six);
    let n = labels.count();
    if n < expected {
        return Err(SegmentationError::TooFewComponents { expected, found: n });
    }
    let g = volume.grid();
    let d = g.dims;
    let mut lo = vec![[usize::MAX; 3]; n + 1];
    let mut hi = vec![[0usize; 3]; n + 1];
    for (l, &label) in labels.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let idx = g.unlinear(l);
        let c = [idx.i, idx.j, idx.k];
        for a in 0..3 {
            lo[label as usize][a] = lo[label as usize][a].min(c[a]);
            hi[label as usize][a] = hi[label as usize][a].max(c[a]);
        }
    }
    let mut out: Vec<(usize, SphereDetection)> = (1..=n)
        .map(|label| {
            let b0: [usize; 3] = std::array::from_fn(|a| lo[label][a].saturating_sub(GROW));
            let b1: [usize; 3] = std::array::from_fn(|a| (hi[label][a] + GROW).min(d[a] - 1));
            let mut shell = Vec::new();
            for k in b0[2]..=b1[2] {
                for j in b0[1]..=b1[1] {
                    for i in b0[0]..=b1[0] {
                        if i == b0[0] || i == b1[0] || j == b0[1] || j == b1[1] || k == b0[2] || k == b1[2] {
                            shell.push(volume.at(i, j, k));
                        }
                    }
                }
            }
            shell.sort_unstable();
            let bg = shell[shell.len() / 2] as f64;
            let (mut sw, mut sc) = (0.0f64, [0.0f64; 3]);
            for k in b0[2]..=b1[2] {
                for j in b0[1]..=b1[1] {
                    for i in b0[0]..=b1[0] {
                        let l = g.linear(i, j, k);
                        let other = labels.labels[l];
                        if other != 0 && other as usize != label {
                            continue;
                        }
                        let w = (volume.voxels()[l] as f64 - bg).max(0.0);
                        sw += w;
                        sc[0] += w * i as f64;
                        sc[1] += w * j as f64;
                        sc[2] += w * k as f64;
                    }
                }
            }
            let centroid = g.continuous_to_world([sc[0] / sw, sc[1] / sw, sc[2] / sw]);
            let count = labels.sizes[label];
            let vol = count as f64 * g.voxel_volume();
            let equiv_radius_mm = (3.0 * vol / (4.0 * std::f64::consts::PI)).cbrt();
            (label, SphereDetection { centroid, equiv_radius_mm, voxel_count: count })
        })
        .collect();
    // Labels follow smallest voxel index, so a stable sort keeps ties deterministic.
    out.sort_by(|a, b| b.1.voxel_count.cmp(&a.1.voxel_count).then(a.0.cmp(&b.0)));
    Ok(out.into_iter().map(|(_, d)| d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::render_ball;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_ball_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Grid::axis_aligned([40, 40, 30], [0.5, 0.5, 0.67], Point3::new(-10.0, -10.0, -10.0)).unwrap();
        for _ in 0..5 {
            let center = Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut buf = vec![0i16; g.len()];
            render_ball(&mut buf, &g, &center, 4.0, 3000, 6);
            let v = Volume::new(g.clone(), buf).unwrap();
            let found = detect_spheres(&v, 1000, 1).unwrap();
            assert_eq!(found.len(), 1);
            let err = (found[0].centroid - center).norm();
            assert!(err < 0.05, "centroid error {err}");
            assert!((found[0].equiv_radius_mm - 4.0).abs() < 0.5);
        }
    }

    #[test]
    fn empty_volume_has_too_few() {
        let g = Grid::axis_aligned([8, 8, 8], [1.0; 3], Point3::origin()).unwrap();
        let v = Volume::filled(g, 0);
        assert_eq!(detect_spheres(&v, 1000, 1), Err(SegmentationError::TooFewComponents { expected: 1, found: 0 }));
    }
}
