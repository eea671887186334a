//! Marching cubes on a binary mask at iso-level 0.5.
//!
//! Cubes are the dual cells whose corners are voxel centres. Instead of a
//! case table, each cube face is contoured on its own (ambiguous faces keep
//! set corners apart, matching 6-connected foreground) and the face segments
//! are chained into loops. Since a face's contour only depends on that face,
//! neighbouring cubes always agree and the mesh is closed.

use std::collections::HashMap;

use super::{Mask, SegmentationError};
use crate::geometry::Point3;
use crate::mesh::SurfaceMesh;

/// Corner offsets; corner `c` is `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// Cube faces as (corners in cyclic order, outward normal axis, sign).
const FACES: [([usize; 4], usize, i8); 6] = [
    ([0, 2, 6, 4], 0, -1),
    ([1, 3, 7, 5], 0, 1),
    ([0, 1, 5, 4], 1, -1),
    ([2, 3, 7, 6], 1, 1),
    ([0, 1, 3, 2], 2, -1),
    ([4, 5, 7, 6], 2, 1),
];

/// Lattice edge between two cube corners, in cube-local terms.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Edge {
    lo: usize,
    hi: usize,
}

impl Edge {
    fn new(a: usize, b: usize) -> Self {
        Edge { lo: a.min(b), hi: a.max(b) }
    }

    fn axis(&self) -> usize {
        (self.lo ^ self.hi).trailing_zeros() as usize
    }

    /// Midpoint in cube-local coordinates.
    fn midpoint(&self) -> [f64; 3] {
        let a = corner(self.lo);
        let b = corner(self.hi);
        [(a[0] + b[0]) as f64 / 2.0, (a[1] + b[1]) as f64 / 2.0, (a[2] + b[2]) as f64 / 2.0]
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Directed face segments of one cube, oriented so the loop they form has its
/// right-hand normal pointing from set corners towards unset corners.
fn cube_segments(case: u8, out: &mut Vec<(Edge, Edge)>) {
    out.clear();
    let inside = |c: usize| case & (1 << c) != 0;
    for (corners, axis, sign) in FACES {
        let flags = corners.map(inside);
        let n_in = flags.iter().filter(|&&f| f).count();
        if n_in == 0 || n_in == 4 {
            continue;
        }
        let edge = |i: usize| Edge::new(corners[i], corners[(i + 1) % 4]);
        let mut pairs: Vec<(Edge, Edge)> = Vec::with_capacity(2);
        let crossing: Vec<usize> = (0..4).filter(|&i| flags[i] != flags[(i + 1) % 4]).collect();
        if crossing.len() == 2 {
            pairs.push((edge(crossing[0]), edge(crossing[1])));
        } else {
            // Diagonal configuration: cut off each set corner separately.
            for (i, &set) in flags.iter().enumerate() {
                if set {
                    pairs.push((edge((i + 3) % 4), edge(i)));
                }
            }
        }
        let mut normal = [0.0; 3];
        normal[axis] = sign as f64;
        for (e_p, e_q) in pairs {
            let p = e_p.midpoint();
            let q = e_q.midpoint();
            let c = if inside(e_p.lo) { corner(e_p.lo) } else { corner(e_p.hi) };
            let c = [c[0] as f64, c[1] as f64, c[2] as f64];
            let x = cross(sub(q, p), sub(c, p));
            let d = x[0] * normal[0] + x[1] * normal[1] + x[2] * normal[2];
            if d < 0.0 {
                out.push((e_p, e_q));
            } else {
                out.push((e_q, e_p));
            }
        }
    }
}

/// Relaxation sweeps used by [`extract_surface`].
pub const DEFAULT_RELAX_ITERATIONS: usize = 20;

/// Extracts the closed, outward-oriented boundary surface of a mask.
pub fn extract_surface(mask: &Mask) -> Result<SurfaceMesh, SegmentationError> {
    extract_surface_with(mask, DEFAULT_RELAX_ITERATIONS)
}

/// Like [`extract_surface`]; `relax_iterations == 0` leaves every vertex at
/// its edge midpoint (plain binary marching cubes).
pub fn extract_surface_with(mask: &Mask, relax_iterations: usize) -> Result<SurfaceMesh, SegmentationError> {
    if mask.is_empty() {
        return Err(SegmentationError::EmptyMask);
    }
    let g = mask.grid();
    let d = g.dims;
    // Padded lattice: one unset layer on every side.
    let p = [d[0] + 2, d[1] + 2, d[2] + 2];
    let padded = |i: usize, j: usize, k: usize| -> bool {
        i >= 1 && j >= 1 && k >= 1 && i <= d[0] && j <= d[1] && k <= d[2] && mask.at(i - 1, j - 1, k - 1)
    };
    let plin = |c: [usize; 3]| c[0] + p[0] * (c[1] + p[1] * c[2]);

    let mut vertices: Vec<Point3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    // Inside and outside voxel centres of each edge vertex; None for loop centres.
    let mut anchors: Vec<Option<(Point3, Point3)>> = Vec::new();
    let mut segments = Vec::with_capacity(12);
    let mut loop_buf: Vec<Edge> = Vec::with_capacity(12);

    for ck in 0..p[2] - 1 {
        for cj in 0..p[1] - 1 {
            for ci in 0..p[0] - 1 {
                let mut case = 0u8;
                for c in 0..8 {
                    let o = corner(c);
                    if padded(ci + o[0], cj + o[1], ck + o[2]) {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 0xff {
                    continue;
                }
                cube_segments(case, &mut segments);

                let mut vertex_of = |e: Edge, vertices: &mut Vec<Point3>, anchors: &mut Vec<Option<(Point3, Point3)>>| -> u32 {
                    let lo = corner(e.lo);
                    let key = (plin([ci + lo[0], cj + lo[1], ck + lo[2]]) as u64) * 3 + e.axis() as u64;
                    *edge_vertex.entry(key).or_insert_with(|| {
                        let m = e.midpoint();
                        let at = |c: [usize; 3]| g.continuous_to_world([(ci + c[0]) as f64 - 1.0, (cj + c[1]) as f64 - 1.0, (ck + c[2]) as f64 - 1.0]);
                        let (a, b) = (corner(e.lo), corner(e.hi));
                        let pair = if case & (1 << e.lo) != 0 { (at(a), at(b)) } else { (at(b), at(a)) };
                        let c = [ci as f64 + m[0] - 1.0, cj as f64 + m[1] - 1.0, ck as f64 + m[2] - 1.0];
                        vertices.push(g.continuous_to_world(c));
                        anchors.push(Some(pair));
                        (vertices.len() - 1) as u32
                    })
                };

                let mut used = [false; 12];
                for start in 0..segments.len() {
                    if used[start] {
                        continue;
                    }
                    loop_buf.clear();
                    let mut cur = start;
                    loop {
                        used[cur] = true;
                        loop_buf.push(segments[cur].0);
                        let next_edge = segments[cur].1;
                        match (0..segments.len()).find(|&s| !used[s] && segments[s].0 == next_edge) {
                            Some(s) => cur = s,
                            None => break,
                        }
                    }
                    debug_assert_eq!(segments[cur].1, loop_buf[0], "face segments must close into loops");

                    let ids: Vec<u32> = loop_buf.iter().map(|&e| vertex_of(e, &mut vertices, &mut anchors)).collect();
                    let mids: Vec<[f64; 3]> = loop_buf.iter().map(Edge::midpoint).collect();
                    let on_common_face = |a: usize, b: usize| {
                        (0..3).any(|ax| mids[a][ax] == mids[b][ax] && mids[a][ax] != 0.5)
                    };
                    let fan_ok = (2..ids.len() - 1).all(|m| !on_common_face(0, m));
                    if fan_ok {
                        for m in 1..ids.len() - 1 {
                            triangles.push([ids[0], ids[m], ids[m + 1]]);
                        }
                    } else {
                        let n = mids.len() as f64;
                        let c = (0..3).map(|ax| mids.iter().map(|m| m[ax]).sum::<f64>() / n).collect::<Vec<_>>();
                        let world = g.continuous_to_world([ci as f64 + c[0] - 1.0, cj as f64 + c[1] - 1.0, ck as f64 + c[2] - 1.0]);
                        vertices.push(world);
                        anchors.push(None);
                        let centre = (vertices.len() - 1) as u32;
                        for m in 0..ids.len() {
                            triangles.push([centre, ids[m], ids[(m + 1) % ids.len()]]);
                        }
                    }
                }
            }
        }
    }
    relax(&mut vertices, &anchors, &triangles, relax_iterations);
    Ok(SurfaceMesh::new(vertices, triangles))
}

/// Taubin smoothing with each edge vertex confined to its own lattice edge,
/// strictly between the inside and outside voxel centres. Every inside
/// centre stays inside and every outside centre outside, so the surface
/// still separates the mask exactly; only the staircase is relaxed. After
/// each pass a uniform shift along the edges restores every shell's
/// enclosed volume, so small shells keep their size. Loop centre vertices
/// follow the mean of their ring.
fn relax(vertices: &mut [Point3], anchors: &[Option<(Point3, Point3)>], triangles: &[[u32; 3]], iterations: usize) {
    const LAMBDA: f64 = 0.5;
    const MU: f64 = -0.53;
    const T_MIN: f64 = 0.05;
    const T_MAX: f64 = 0.95;
    if iterations == 0 || vertices.is_empty() {
        return;
    }
    let n = vertices.len();
    let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); n];
    for t in triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            neighbours[a as usize].push(b);
            neighbours[b as usize].push(a);
        }
    }
    for list in &mut neighbours {
        list.sort_unstable();
        list.dedup();
    }
    let (shell_of, shells) = shells(n, &neighbours);
    let target = shell_volumes(vertices, triangles, &shell_of, shells);

    let place = |v: usize, t: f64| anchors[v].map(|(a, b)| a + (b - a) * t);
    let mean = |v: usize, pts: &[Point3]| {
        let s = neighbours[v].iter().fold(crate::geometry::Vec3::zeros(), |acc, &u| acc + pts[u as usize].coords);
        Point3::from(s / neighbours[v].len() as f64)
    };
    let settle_centres = |pts: &mut [Point3]| {
        for v in 0..n {
            if anchors[v].is_none() {
                pts[v] = mean(v, pts);
            }
        }
    };
    let mut t: Vec<f64> = vec![0.5; n];
    let mut next = t.clone();
    for _ in 0..iterations {
        for factor in [LAMBDA, MU] {
            for v in 0..n {
                if let Some((a, b)) = anchors[v] {
                    let axis = b - a;
                    let delta = mean(v, vertices) - vertices[v];
                    next[v] = (t[v] + factor * delta.dot(&axis) / axis.norm_squared()).clamp(T_MIN, T_MAX);
                }
            }
            std::mem::swap(&mut t, &mut next);
            let mut shift = vec![0.0f64; shells];
            for _ in 0..4 {
                for v in 0..n {
                    if let Some(p) = place(v, (t[v] + shift[shell_of[v]]).clamp(T_MIN, T_MAX)) {
                        vertices[v] = p;
                    }
                }
                settle_centres(vertices);
                let vol = shell_volumes(vertices, triangles, &shell_of, shells);
                // d(volume)/d(shift): volume gradient at each vertex dotted with its edge.
                let mut slope = vec![0.0f64; shells];
                for tri in triangles {
                    for e in 0..3 {
                        let v = tri[e] as usize;
                        if let Some((a, b)) = anchors[v] {
                            let pj = vertices[tri[(e + 1) % 3] as usize].coords;
                            let pk = vertices[tri[(e + 2) % 3] as usize].coords;
                            slope[shell_of[v]] += pj.cross(&pk).dot(&(b - a)) / 6.0;
                        }
                    }
                }
                for s in 0..shells {
                    if slope[s] > 0.0 {
                        shift[s] -= (vol[s] - target[s]) / slope[s];
                    }
                }
            }
            for v in 0..n {
                if anchors[v].is_some() {
                    t[v] = (t[v] + shift[shell_of[v]]).clamp(T_MIN, T_MAX);
                    vertices[v] = place(v, t[v]).unwrap();
                }
            }
            settle_centres(vertices);
        }
    }
}

/// Connected vertex sets of the mesh.
fn shells(n: usize, neighbours: &[Vec<u32>]) -> (Vec<usize>, usize) {
    let mut shell_of = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..n {
        if shell_of[s] != usize::MAX {
            continue;
        }
        shell_of[s] = count;
        stack.push(s);
        while let Some(v) = stack.pop() {
            for &u in &neighbours[v] {
                if shell_of[u as usize] == usize::MAX {
                    shell_of[u as usize] = count;
                    stack.push(u as usize);
                }
            }
        }
        count += 1;
    }
    (shell_of, count)
}

fn shell_volumes(vertices: &[Point3], triangles: &[[u32; 3]], shell_of: &[usize], shells: usize) -> Vec<f64> {
    let mut vol = vec![0.0; shells];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize].coords);
        vol[shell_of[t[0] as usize]] += a.dot(&b.cross(&c)) / 6.0;
    }
    vol
}

#[cfg(test)]
mod tests {
    use super::super::testing::cube_grid;
    use super::*;
    use crate::volume::{Grid, VoxelIndex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_voxel_gives_octahedron() {
        let g = cube_grid(3, 1.0);
        let m = Mask::from_fn(g, |v| v == VoxelIndex::new(1, 1, 1));
        let mesh = extract_surface(&m).unwrap();
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.triangles.len(), 8);
        assert!(mesh.is_closed_oriented());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!((mesh.area() / 3f64.sqrt() - 1.0).abs() < 0.15, "area {}", mesh.area());
        let plain = extract_surface_with(&m, 0).unwrap();
        assert!((plain.area() - 3f64.sqrt()).abs() < 1e-12);
        assert!(mesh.signed_volume() > 0.0);
        // Normals point away from the voxel centre.
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!(v.coords.dot(n) > 0.0);
        }
    }

    #[test]
    fn every_cube_case_closes() {
        // Each of the 256 configurations of a 2×2×2 block yields a closed mesh.
        for case in 1u32..256 {
            let g = cube_grid(2, 1.0);
            let m = Mask::from_fn(g, |v| case & (1 << (v.i + 2 * v.j + 4 * v.k)) != 0);
            let mesh = extract_surface(&m).unwrap();
            assert!(mesh.is_closed_oriented(), "case {case}");
            assert!(mesh.signed_volume() > 0.0, "case {case}");
        }
    }

    #[test]
    fn random_masks_are_closed_manifolds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = Mask::from_fn(cube_grid(7, 1.0), |_| rng.random_bool(0.5));
            if m.is_empty() {
                continue;
            }
            let mesh = extract_surface(&m).unwrap();
            assert!(mesh.is_closed_oriented());
        }
    }

    #[test]
    fn two_cubes_have_two_shells() {
        let m = Mask::from_fn(cube_grid(12, 1.0), |v| {
            let a = (1..4).contains(&v.i) && (1..4).contains(&v.j) && (1..4).contains(&v.k);
            let b = (7..10).contains(&v.i) && (6..9).contains(&v.j) && (5..8).contains(&v.k);
            a || b
        });
        let mesh = extract_surface(&m).unwrap();
        assert!(mesh.is_closed_oriented());
        assert_eq!(mesh.euler_characteristic(), 4);
    }

    #[test]
    fn voxelized_sphere_area_and_volume() {
        let r = 20.0;
        let g = cube_grid(48, 1.0);
        let m = Mask::from_fn(g.clone(), |v| g.index_to_world(v).coords.norm() <= r);
        let mesh = extract_surface(&m).unwrap();
        assert!(mesh.is_closed_oriented());
        let area = mesh.area();
        let vol = mesh.signed_volume();
        let area_ref = 4.0 * std::f64::consts::PI * r * r;
        let vol_ref = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((area / area_ref - 1.0).abs() < 0.05, "area {area} vs {area_ref}");
        assert!((vol / vol_ref - 1.0).abs() < 0.03, "volume {vol} vs {vol_ref}");
    }

    #[test]
    fn empty_mask_errors() {
        let g = Grid::axis_aligned([3, 3, 3], [1.0; 3], Point3::origin()).unwrap();
        assert_eq!(extract_surface(&Mask::empty(g)), Err(SegmentationError::EmptyMask));
    }
}
