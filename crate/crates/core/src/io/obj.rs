//! ASCII Wavefront OBJ: `v` and `f` records only.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::occupancy::TriangleMesh;

/// Parses vertices and faces; polygons are fan-triangulated and negative
/// indices count back from the latest vertex. Other records are ignored.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let field = || format!("line {}", n + 1);
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in p.iter_mut() {
                    let tok = parts.next().ok_or_else(|| Error::parse(field(), "vertex needs 3 coordinates"))?;
                    *c = tok.parse().map_err(|_| Error::parse(field(), format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in parts {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| Error::parse(field(), format!("bad face index {tok:?}")))?;
                    let resolved = match i {
                        0 => return Err(Error::parse(field(), "face indices are 1-based")),
                        i if i > 0 => i - 1,
                        i => vertices.len() as i64 + i,
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(Error::parse(field(), format!("face index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(Error::parse(field(), "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangles)
}

pub fn load_obj(path: &Path) -> Result<TriangleMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    std::fs::write(path, s)?;
    Ok(())
}
