//! Strict NRRD subset: `NRRD0004`, 3D, `short` samples, raw little-endian
//! encoding, explicit space directions and origin. Anything else is rejected.

use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;

use super::{Grid, Volume, VolumeError};
use crate::geometry::{Point3, Vec3};

const MAGIC: &str = "NRRD0004";

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = std::fs::read(path)?;
    parse_volume(&bytes)
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VolumeError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_volume(volume, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_volume<W: Write>(volume: &Volume, out: &mut W) -> Result<(), VolumeError> {
    let g = volume.grid();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "type: short")?;
    writeln!(out, "dimension: 3")?;
    writeln!(out, "space: right-anterior-superior")?;
    writeln!(out, "sizes: {} {} {}", g.dims[0], g.dims[1], g.dims[2])?;
    let cols: Vec<String> = (0..3)
        .map(|a| {
            let v = g.direction.column(a) * g.spacing[a];
            format!("({},{},{})", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z))
        })
        .collect();
    writeln!(out, "space directions: {}", cols.join(" "))?;
    writeln!(out, "space origin: ({},{},{})", fmt_f64(g.origin.x), fmt_f64(g.origin.y), fmt_f64(g.origin.z))?;
    writeln!(out, "endian: little")?;
    writeln!(out, "encoding: raw")?;
    writeln!(out)?;
    let mut raw = Vec::with_capacity(volume.voxels().len() * 2);
    for v in volume.voxels() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&raw)?;
    Ok(())
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Default)]
struct Header {
    kind: Option<String>,
    dimension: Option<usize>,
    sizes: Option<[usize; 3]>,
    directions: Option<[Vec3; 3]>,
    origin: Option<Point3>,
    encoding: Option<String>,
    endian: Option<String>,
}

pub fn parse_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let (header, data) = split_header(bytes)?;
    let mut lines = header.lines();
    match lines.next() {
        Some(l) if l.trim_end() == MAGIC => {}
        Some(l) if l.starts_with("NRRD") => {
            return Err(VolumeError::MalformedHeader(format!("unsupported NRRD version {l:?}")))
        }
        _ => return Err(VolumeError::MalformedHeader("missing NRRD0004 magic".into())),
    }

    let mut h = Header::default();
    for line in lines {
        let line = line.trim_end();
        if line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| VolumeError::MalformedHeader(format!("not a field line: {line:?}")))?;
        let value = value.trim();
        match key {
            "type" => h.kind = Some(value.to_string()),
            "dimension" => h.dimension = Some(parse_usize(value)?),
            "sizes" => h.sizes = Some(parse_sizes(value)?),
            "space directions" => h.directions = Some(parse_directions(value)?),
            "space origin" => h.origin = Some(Point3::from(parse_vector(value)?)),
            "encoding" => h.encoding = Some(value.to_string()),
            "endian" => h.endian = Some(value.to_string()),
            "space" => match value {
                "right-anterior-superior" | "RAS" => {}
                other => return Err(VolumeError::MalformedHeader(format!("unsupported space {other:?}"))),
            },
            other => return Err(VolumeError::MalformedHeader(format!("unsupported field {other:?}"))),
        }
    }

    match h.kind.as_deref() {
        Some("short" | "int16" | "signed short" | "int16_t" | "short int" | "signed short int") => {}
        Some(other) => return Err(VolumeError::UnsupportedEncoding(format!("sample type {other:?}"))),
        None => return Err(VolumeError::MalformedHeader("missing type".into())),
    }
    match h.dimension {
        Some(3) => {}
        Some(d) => return Err(VolumeError::MalformedHeader(format!("dimension {d}, expected 3"))),
        None => return Err(VolumeError::MalformedHeader("missing dimension".into())),
    }
    match h.encoding.as_deref() {
        Some("raw") => {}
        Some(other) => return Err(VolumeError::UnsupportedEncoding(other.to_string())),
        None => return Err(VolumeError::MalformedHeader("missing encoding".into())),
    }
    match h.endian.as_deref() {
        None | Some("little") => {}
        Some(other) => return Err(VolumeError::UnsupportedEncoding(format!("{other} endian"))),
    }
    let sizes = h.sizes.ok_or_else(|| VolumeError::MalformedHeader("missing sizes".into()))?;
    let dirs = h.directions.ok_or_else(|| VolumeError::MalformedHeader("missing space directions".into()))?;
    let origin = h.origin.ok_or_else(|| VolumeError::MalformedHeader("missing space origin".into()))?;

    let spacing = [dirs[0].norm(), dirs[1].norm(), dirs[2].norm()];
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(VolumeError::MalformedHeader("zero-length space direction".into()));
    }
    let direction = Matrix3::from_columns(&[dirs[0] / spacing[0], dirs[1] / spacing[1], dirs[2] / spacing[2]]);
    let grid = Grid::new(sizes, spacing, origin, direction)?;

    if data.len() % 2 != 0 {
        return Err(VolumeError::DimensionMismatch { expected: grid.len(), found: data.len() / 2 });
    }
    let found = data.len() / 2;
    if found != grid.len() {
        return Err(VolumeError::DimensionMismatch { expected: grid.len(), found });
    }
    let voxels = data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    Volume::new(grid, voxels)
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8]), VolumeError> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| VolumeError::MalformedHeader("no blank line after header".into()))?;
    let header = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| VolumeError::MalformedHeader("header is not UTF-8".into()))?;
    Ok((header, &bytes[sep + 2..]))
}

fn parse_usize(s: &str) -> Result<usize, VolumeError> {
    s.parse().map_err(|_| VolumeError::MalformedHeader(format!("bad integer {s:?}")))
}

fn parse_sizes(s: &str) -> Result<[usize; 3], VolumeError> {
    let v: Vec<usize> = s.split_whitespace().map(parse_usize).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| VolumeError::MalformedHeader(format!("expected 3 sizes, got {}", v.len())))
}

fn parse_vector(s: &str) -> Result<Vec3, VolumeError> {
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| VolumeError::MalformedHeader(format!("bad vector {s:?}")))?;
    let v: Vec<f64> = inner
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| VolumeError::MalformedHeader(format!("bad number in {s:?}"))))
        .collect::<Result<_, _>>()?;
    if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
        return Err(VolumeError::MalformedHeader(format!("bad vector {s:?}")));
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn parse_directions(s: &str) -> Result<[Vec3; 3], VolumeError> {
    let v: Vec<Vec3> = s.split_whitespace().map(parse_vector).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<Vec3>| VolumeError::MalformedHeader(format!("expected 3 space directions, got {}", v.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(sizes: &str) -> String {
        format!(
            "NRRD0004\ntype: short\ndimension: 3\nsizes: {sizes}\nspace directions: (1,0,0) (0,1,0) (0,0,1)\nspace origin: (0,0,0)\nencoding: raw\n\n"
        )
    }

    #[test]
    fn loads_tiny_air_volume() {
        let mut bytes = header("2 2 2").into_bytes();
        for _ in 0..8 {
            bytes.extend_from_slice(&(-1000i16).to_le_bytes());
        }
        let v = parse_volume(&bytes).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert_eq!(v.spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(v.voxels(), &[-1000; 8]);
    }

    #[test]
    fn voxel_count_mismatch() {
        let mut bytes = header("2 2 2").into_bytes();
        for _ in 0..7 {
            bytes.extend_from_slice(&0i16.to_le_bytes());
        }
        assert!(matches!(parse_volume(&bytes), Err(VolumeError::DimensionMismatch { expected: 8, found: 7 })));
    }

    #[test]
    fn rejects_other_encodings_and_fields() {
        let gz = header("2 2 2").replace("encoding: raw", "encoding: gzip");
        assert!(matches!(parse_volume(gz.as_bytes()), Err(VolumeError::UnsupportedEncoding(_))));
        let float = header("2 2 2").replace("type: short", "type: float");
        assert!(matches!(parse_volume(float.as_bytes()), Err(VolumeError::UnsupportedEncoding(_))));
        let big = header("2 2 2").replace("encoding: raw", "encoding: raw\nendian: big");
        assert!(matches!(parse_volume(big.as_bytes()), Err(VolumeError::UnsupportedEncoding(_))));
        let kinds = header("2 2 2").replace("dimension: 3", "dimension: 3\nkinds: domain domain domain");
        assert!(matches!(parse_volume(kinds.as_bytes()), Err(VolumeError::MalformedHeader(_))));
        let v5 = header("2 2 2").replace("NRRD0004", "NRRD0005");
        assert!(matches!(parse_volume(v5.as_bytes()), Err(VolumeError::MalformedHeader(_))));
        let no_origin = header("2 2 2").replace("space origin: (0,0,0)\n", "");
        assert!(matches!(parse_volume(no_origin.as_bytes()), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn roundtrip_random_volume_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = crate::geometry::RigidTransform::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.4);
        let grid = Grid::new([32, 32, 32], [0.98, 0.98, 0.67], Point3::new(-155.3, 17.25, -1000.125), *r.rotation()).unwrap();
        let v = Volume::from_fn(grid, |_| rng.random());
        let mut buf = Vec::new();
        write_volume(&v, &mut buf).unwrap();
        let back = parse_volume(&buf).unwrap();
        assert_eq!(back.voxels(), v.voxels());
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.grid().origin, v.grid().origin);
        for a in 0..3 {
            assert!((back.spacing()[a] - v.spacing()[a]).abs() < 1e-12);
        }
        assert!((back.grid().direction - v.grid().direction).amax() < 1e-12);
    }
}
