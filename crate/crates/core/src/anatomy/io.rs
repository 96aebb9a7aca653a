//! ASCII PLY meshes with ventricular coordinates, and landmark sidecars.
//!
//! Vertex records are `x y z u1 u2 u3 u4 tag` with `tag` an integer code of
//! [`SurfaceTag`]; faces are `3 i j k`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Landmarks, SurfaceTag, TemplateTopology, Uvc};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::netcore::checkpoint::write_atomic;

/// Contents of a mesh file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyMesh {
    pub positions: Vec<Vec3>,
    pub uvc: Vec<Uvc>,
    pub tags: Vec<SurfaceTag>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyMesh {
    pub fn from_template(template: &TemplateTopology, positions: &[Vec3]) -> Self {
        Self {
            positions: positions.to_vec(),
            uvc: template.uvc.clone(),
            tags: template.tags.clone(),
            faces: template.faces.clone(),
        }
    }
}

pub fn ply_to_string(mesh: &PlyMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment tag codes: 0 lv_endo, 1 rv_endo, 2 epi, 3 base_ring\n");
    let _ = writeln!(s, "element vertex {}", mesh.positions.len());
    for p in ["x", "y", "z", "u1", "u2", "u3", "u4"] {
        let _ = writeln!(s, "property double {p}");
    }
    s.push_str("property uchar tag\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for ((p, u), t) in mesh.positions.iter().zip(&mesh.uvc).zip(&mesh.tags) {
        // `{:?}` prints the shortest representation that round-trips exactly.
        let _ = writeln!(s, "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {}", p[0], p[1], p[2], u[0], u[1], u[2], u[3], t.code());
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_ply(path: &Path, mesh: &PlyMesh) -> Result<()> {
    write_atomic(path, ply_to_string(mesh).as_bytes())
}

pub fn parse_ply(text: &str) -> Result<PlyMesh> {
    let bad = |d: String| Error::format("PLY mesh", d);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' signature".into()));
    }
    let (mut nv, mut nf) = (None, None);
    let mut props = Vec::new();
    let mut in_vertex = false;
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                nv = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?);
                in_vertex = true;
            }
            ["element", "face", n] => {
                nf = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?);
                in_vertex = false;
            }
            ["property", "list", ..] => {}
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line '{line}'"))),
        }
    }
    let expected = ["x", "y", "z", "u1", "u2", "u3", "u4", "tag"];
    if props != expected {
        return Err(bad(format!("vertex properties {props:?}, expected {expected:?}")));
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element".into()))?, nf.unwrap_or(0));
    let mut mesh = PlyMesh {
        positions: Vec::with_capacity(nv),
        uvc: Vec::with_capacity(nv),
        tags: Vec::with_capacity(nv),
        faces: Vec::with_capacity(nf),
    };
    for i in 0..nv {
        let line = lines.next().ok_or_else(|| bad(format!("file ends at vertex {i}")))?;
        let w: Vec<&str> = line.split_whitespace().collect();
        if w.len() != 8 {
            return Err(bad(format!("vertex {i} has {} fields", w.len())));
        }
        let v: Vec<f64> = w[..7].iter().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("vertex {i}: {e}")))?;
        let code: u8 = w[7].parse().map_err(|_| bad(format!("vertex {i}: bad tag")))?;
        mesh.positions.push([v[0], v[1], v[2]]);
        mesh.uvc.push([v[3], v[4], v[5], v[6]]);
        mesh.tags.push(SurfaceTag::from_code(code).ok_or_else(|| bad(format!("vertex {i}: unknown tag {code}")))?);
    }
    for i in 0..nf {
        let line = lines.next().ok_or_else(|| bad(format!("file ends at face {i}")))?;
        let w: Vec<u32> = line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("face {i}: {e}")))?;
        if w.len() != 4 || w[0] != 3 {
            return Err(bad(format!("face {i} is not a triangle")));
        }
        if w[1..].iter().any(|&k| k as usize >= nv) {
            return Err(bad(format!("face {i} indexes past the vertex list")));
        }
        mesh.faces.push([w[1], w[2], w[3]]);
    }
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<PlyMesh> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_ply(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkFile {
    mvc: Vec3,
    tvc: Vec3,
    lva: Vec3,
}

pub fn write_landmarks(path: &Path, lm: &Landmarks) -> Result<()> {
    let body = serde_json::to_string_pretty(&LandmarkFile { mvc: lm.mvc, tvc: lm.tvc, lva: lm.lva })?;
    write_atomic(path, body.as_bytes())
}

pub fn read_landmarks(path: &Path) -> Result<Landmarks> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let f: LandmarkFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(Landmarks { mvc: f.mvc, tvc: f.tvc, lva: f.lva })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_shape, ShapeParams, TemplateConfig};

    #[test]
    fn ply_round_trip_is_exact() {
        let t = TemplateTopology::new(TemplateConfig::default()).unwrap();
        let m = generate_shape(&t, &ShapeParams::default()).unwrap();
        let ply = PlyMesh::from_template(&t, &m.positions);
        let back = parse_ply(&ply_to_string(&ply)).unwrap();
        assert_eq!(back, ply);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&path, &ply).unwrap();
        assert_eq!(read_ply(&path).unwrap(), ply);
        let lp = dir.path().join("m.json");
        write_landmarks(&lp, &m.landmarks).unwrap();
        assert_eq!(read_landmarks(&lp).unwrap(), m.landmarks);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_ply("obj\n").is_err());
        let hdr = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nend_header\n0\n";
        assert!(parse_ply(hdr).is_err());
    }
}
