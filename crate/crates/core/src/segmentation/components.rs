use super::{Mask, SegmentationError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

/// Component labelling of a mask. Labels are assigned in order of each
/// component's smallest linear voxel index, starting at 1; 0 is background.
#[derive(Debug, Clone)]
pub struct Labels {
    pub labels: Vec<u32>,
    /// Voxel count per label; `sizes[0]` is unused.
    pub sizes: Vec<usize>,
}

impl Labels {
    pub fn count(&self) -> usize {
        self.sizes.len() - 1
    }
}

fn offsets(conn: Connectivity) -> Vec<(i64, i64, i64)> {
    let mut out = Vec::new();
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                let n = di.abs() + dj.abs() + dk.abs();
                let keep = match conn {
                    Connectivity::Six => n == 1,
                    Connectivity::TwentySix => n >= 1,
                };
                if keep {
                    out.push((di, dj, dk));
                }
            }
        }
    }
    out
}

pub fn label_components(mask: &Mask, conn: Connectivity) -> Labels {
    let g = mask.grid();
    let [nx, ny, nz] = g.dims;
    let bits = mask.bits();
    let offs = offsets(conn);
    let mut labels = vec![0u32; bits.len()];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for seed in 0..bits.len() {
        if !bits[seed] || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        let mut size = 0usize;
        labels[seed] = label;
        stack.push(seed);
        while let Some(v) = stack.pop() {
            size += 1;
            let i = (v % nx) as i64;
            let j = ((v / nx) % ny) as i64;
            let k = (v / (nx * ny)) as i64;
            for &(di, dj, dk) in &offs {
                let (a, b, c) = (i + di, j + dj, k + dk);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let n = a as usize + nx * (b as usize + ny * c as usize);
                if bits[n] && labels[n] == 0 {
                    labels[n] = label;
                    stack.push(n);
                }
            }
        }
        sizes.push(size);
    }
    Labels { labels, sizes }
}

/// Keeps only the largest 6-connected component. Ties go to the component
/// containing the smallest linear voxel index.
pub fn largest_component(mask: &Mask) -> Result<Mask, SegmentationError> {
    largest_component_with(mask, Connectivity::Six)
}

pub fn largest_component_with(mask: &Mask, conn: Connectivity) -> Result<Mask, SegmentationError> {
    let labels = label_components(mask, conn);
    let mut best = 0usize;
    for (label, &size) in labels.sizes.iter().enumerate().skip(1) {
        if best == 0 || size > labels.sizes[best] {
            best = label;
        }
    }
    if best == 0 {
        return Err(SegmentationError::EmptyMask);
    }
    let bits = labels.labels.iter().map(|&l| l as usize == best).collect();
    Ok(Mask::from_bits(mask.grid().clone(), bits))
}

#[cfg(test)]
mod tests {
    use super::super::testing::cube_grid;
    use super::*;
    use crate::volume::VoxelIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn boxes() -> Mask {
        Mask::from_fn(cube_grid(10, 1.0), |v| {
            let big = (1..4).contains(&v.i) && (1..4).contains(&v.j) && (1..4).contains(&v.k);
            let small = (6..8).contains(&v.i) && (6..8).contains(&v.j) && (6..8).contains(&v.k);
            big || small
        })
    }

    #[test]
    fn keeps_larger_box() {
        let m = boxes();
        let out = largest_component(&m).unwrap();
        assert_eq!(out.count(), 27);
        assert!(out.get(VoxelIndex::new(2, 2, 2)));
        assert!(!out.get(VoxelIndex::new(6, 6, 6)));
    }

    #[test]
    fn single_component_unchanged() {
        let m = Mask::from_fn(cube_grid(6, 1.0), |v| v.i >= 2);
        assert_eq!(largest_component(&m).unwrap(), m);
    }

    #[test]
    fn tie_goes_to_smallest_index() {
        let m = Mask::from_fn(cube_grid(6, 1.0), |v| (v.i == 0 || v.i == 5) && v.j == 0 && v.k == 0);
        let out = largest_component(&m).unwrap();
        assert!(out.get(VoxelIndex::new(0, 0, 0)));
        assert!(!out.get(VoxelIndex::new(5, 0, 0)));
    }

    #[test]
    fn empty_mask_errors() {
        assert_eq!(largest_component(&Mask::empty(cube_grid(4, 1.0))), Err(SegmentationError::EmptyMask));
    }

    #[test]
    fn diagonal_voxels_split_under_six() {
        let m = Mask::from_fn(cube_grid(4, 1.0), |v| (v.i, v.j, v.k) == (1, 1, 1) || (v.i, v.j, v.k) == (2, 2, 2));
        assert_eq!(label_components(&m, Connectivity::Six).count(), 2);
        assert_eq!(label_components(&m, Connectivity::TwentySix).count(), 1);
    }

    /// Queue-based flood fill started from every unvisited voxel, kept separate
    /// from the stack-based labelling under test.
    fn bfs_largest(m: &Mask) -> Mask {
        let g = m.grid().clone();
        let d = g.dims;
        let mut seen = vec![false; g.len()];
        let mut best: Vec<usize> = Vec::new();
        for s in 0..g.len() {
            if !m.bits()[s] || seen[s] {
                continue;
            }
            let mut comp = vec![s];
            let mut q = VecDeque::from([s]);
            seen[s] = true;
            while let Some(v) = q.pop_front() {
                let p = g.unlinear(v);
                let cand = [
                    (p.i.wrapping_sub(1), p.j, p.k),
                    (p.i + 1, p.j, p.k),
                    (p.i, p.j.wrapping_sub(1), p.k),
                    (p.i, p.j + 1, p.k),
                    (p.i, p.j, p.k.wrapping_sub(1)),
                    (p.i, p.j, p.k + 1),
                ];
                for (i, j, k) in cand {
                    if i < d[0] && j < d[1] && k < d[2] {
                        let n = g.linear(i, j, k);
                        if m.bits()[n] && !seen[n] {
                            seen[n] = true;
                            comp.push(n);
                            q.push_back(n);
                        }
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        let mut out = Mask::empty(g);
        for v in best {
            out.bits_mut()[v] = true;
        }
        out
    }

    #[test]
    fn matches_flood_fill_on_random_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = rng.random_range(0.2..0.45);
            let m = Mask::from_fn(cube_grid(14, 1.0), |_| rng.random_bool(p));
            if m.is_empty() {
                continue;
            }
            assert_eq!(largest_component(&m).unwrap(), bfs_largest(&m));
        }
    }
}
