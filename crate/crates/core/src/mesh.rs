//! Triangulated skin surface and its ASCII PLY form.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{Dir3, Point3, Vec3};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("ply: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    /// Outward unit normal per vertex.
    pub normals: Vec<Dir3>,
}

impl SurfaceMesh {
    /// Builds a mesh and derives vertex normals from area-weighted face normals.
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Self {
        let normals = vertex_normals(&vertices, &triangles);
        Self { vertices, triangles, normals }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward orientation.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    /// True if every undirected edge is used by exactly two triangles with
    /// opposite directions (closed, consistently oriented 2-manifold edges).
    pub fn is_closed_oriented(&self) -> bool {
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// V − E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// Axis-aligned bounds of the vertices.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// ASCII PLY with positions, normals and an optional per-vertex `quality`.
    pub fn to_ply(&self, quality: Option<&[f64]>) -> String {
        if let Some(q) = quality {
            assert_eq!(q.len(), self.vertices.len(), "one quality value per vertex");
        }
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property double x\nproperty double y\nproperty double z\n");
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
        if quality.is_some() {
            s.push_str("property double quality\n");
        }
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (i, (v, n)) in self.vertices.iter().zip(&self.normals).enumerate() {
            let _ = write!(s, "{:?} {:?} {:?} {:?} {:?} {:?}", v.x, v.y, v.z, n.x, n.y, n.z);
            if let Some(q) = quality {
                let _ = write!(s, " {:?}", q[i]);
            }
            s.push('\n');
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn save_ply(&self, path: &Path, quality: Option<&[f64]>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_ply(quality))?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<(SurfaceMesh, Option<Vec<f64>>), MeshError> {
        Self::parse_ply(&std::fs::read_to_string(path)?)
    }

    /// Parses the ASCII PLY written by [`to_ply`](Self::to_ply). Normals are
    /// taken from the file when present and recomputed otherwise.
    pub fn parse_ply(text: &str) -> Result<(SurfaceMesh, Option<Vec<f64>>), MeshError> {
        let bad = |m: &str| MeshError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing ply magic"));
        }
        let mut n_vert = None;
        let mut n_face = None;
        let mut props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["format", "ascii", _] => {}
                ["format", ..] => return Err(bad("only ascii PLY is supported")),
                ["comment", ..] => {}
                ["element", "vertex", n] => {
                    n_vert = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                    in_vertex = true;
                }
                ["element", "face", n] => {
                    n_face = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?);
                    in_vertex = false;
                }
                ["property", "list", ..] => {}
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["property", ..] => {}
                ["end_header"] => break,
                _ => return Err(MeshError::Format(format!("unexpected header line {line:?}"))),
            }
        }
        let n_vert = n_vert.ok_or_else(|| bad("missing vertex element"))?;
        let n_face = n_face.unwrap_or(0);
        let col = |name: &str| props.iter().position(|p| p == name);
        let (xi, yi, zi) = (col("x").ok_or_else(|| bad("no x"))?, col("y").ok_or_else(|| bad("no y"))?, col("z").ok_or_else(|| bad("no z"))?);
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let qi = col("quality");

        let mut vertices = Vec::with_capacity(n_vert);
        let mut normals = Vec::with_capacity(n_vert);
        let mut quality = qi.map(|_| Vec::with_capacity(n_vert));
        for _ in 0..n_vert {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad vertex value"))?;
            if vals.len() != props.len() {
                return Err(bad("vertex property count mismatch"));
            }
            vertices.push(Point3::new(vals[xi], vals[yi], vals[zi]));
            if let Some((a, b, c)) = normal_cols {
                normals.push(Vec3::new(vals[a], vals[b], vals[c]));
            }
            if let (Some(q), Some(i)) = (quality.as_mut(), qi) {
                q.push(vals[i]);
            }
        }
        let mut triangles = Vec::with_capacity(n_face);
        for _ in 0..n_face {
            let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
            let vals: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad face value"))?;
            if vals.len() != 4 || vals[0] != 3 {
                return Err(bad("only triangle faces are supported"));
            }
            if vals[1..].iter().any(|&v| v as usize >= n_vert) {
                return Err(bad("face index out of range"));
            }
            triangles.push([vals[1], vals[2], vals[3]]);
        }
        let mut mesh = SurfaceMesh::new(vertices, triangles);
        if normal_cols.is_some() {
            mesh.normals = normals
                .into_iter()
                .zip(&mesh.normals)
                .map(|(n, fallback)| if n.norm() > 0.0 { Dir3::new_normalize(n) } else { *fallback })
                .collect();
        }
        Ok((mesh, quality))
    }
}

/// Sphere mesh from a subdivided octahedron, with exact radial normals.
pub fn icosphere(center: Point3, radius: f64, subdivisions: usize) -> SurfaceMesh {
    let mut verts: Vec<Vec3> = vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
    let mut tris: Vec<[u32; 3]> = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push((verts[a as usize] + verts[b as usize]).normalize());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        tris = next;
    }
    let normals = verts.iter().map(|v| Dir3::new_normalize(*v)).collect();
    let vertices = verts.iter().map(|v| center + v * radius).collect();
    SurfaceMesh { vertices, triangles: tris, normals }
}

fn vertex_normals(vertices: &[Point3], triangles: &[[u32; 3]]) -> Vec<Dir3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| if n.norm() > 0.0 { Dir3::new_normalize(n) } else { Dir3::new_unchecked(Vec3::z()) })
        .collect()
}
