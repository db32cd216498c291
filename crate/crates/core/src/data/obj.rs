use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::TriangleMesh;

/// Minimal Wavefront OBJ reader: `v` and `f` records only. Polygons are fan
/// triangulated; `i/t/n` index forms and negative (relative) indices are
/// accepted.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for slot in &mut p {
                    let t = toks.next().ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *slot = t.parse().map_err(|_| err(format!("bad coordinate {t:?}")))?;
                    if !slot.is_finite() {
                        return Err(err(format!("non-finite coordinate {t:?}")));
                    }
                }
                vertices.push(p);
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| err(format!("bad face index {t:?}")))?;
                        let count = vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { count + i };
                        if i == 0 || resolved < 0 || resolved >= count {
                            return Err(err(format!("face index {i} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<usize>>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                for j in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[j], idx[j + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}
