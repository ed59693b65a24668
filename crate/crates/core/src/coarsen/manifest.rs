//! Text manifest for a hierarchy: level OBJ paths plus operator triplets.
//!
//! ```text
//! dcgnet-hierarchy v1
//! level 0 nodes 432 obj level0.obj
//! ...
//! down 0
//! <row> <col> <value>
//! up 0
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{from_parts, CoarsenError, MeshHierarchy, SamplingOperator};
use crate::mesh::{load_obj_with, save_obj, MeshError, ObjOptions, SparseMatrix};

pub const HIERARCHY_HEADER: &str = "dcgnet-hierarchy v1";

/// Writes `manifest` plus one `level<i>.obj` per level next to it.
pub fn save_hierarchy(h: &MeshHierarchy, manifest: impl AsRef<Path>) -> Result<(), CoarsenError> {
    let manifest = manifest.as_ref();
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("hierarchy");
    let mut out = String::new();
    writeln!(out, "{HIERARCHY_HEADER}").unwrap();
    for (i, level) in h.levels.iter().enumerate() {
        let name = format!("{stem}_level{i}.obj");
        save_obj(level, dir.join(&name))?;
        writeln!(out, "level {i} nodes {} obj {name}", level.num_vertices()).unwrap();
    }
    for (l, s) in h.samplers.iter().enumerate() {
        for (label, m) in [("down", &s.down), ("up", &s.up)] {
            writeln!(out, "{label} {l}").unwrap();
            for (r, c, v) in m.triplets() {
                writeln!(out, "{r} {c} {v}").unwrap();
            }
        }
    }
    out.push_str("end\n");
    fs::write(manifest, out)
        .map_err(|source| MeshError::Io { path: manifest.to_path_buf(), source }.into())
}

pub fn load_hierarchy(manifest: impl AsRef<Path>) -> Result<MeshHierarchy, CoarsenError> {
    let manifest = manifest.as_ref();
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)
        .map_err(|source| MeshError::Io { path: manifest.to_path_buf(), source })?;
    let bad = |line: usize, message: &str| CoarsenError::Manifest { line, message: message.into() };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, HIERARCHY_HEADER)) => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut levels = Vec::new();
    let mut blocks: Vec<(String, usize, Vec<(usize, usize, f64)>)> = Vec::new();
    let mut ended = false;
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if ended {
            return Err(bad(no, "content after end"));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["level", i, "nodes", n, "obj", path] => {
                let i: usize = i.parse().map_err(|_| bad(no, "bad level index"))?;
                let n: usize = n.parse().map_err(|_| bad(no, "bad node count"))?;
                if i != levels.len() {
                    return Err(bad(no, "levels out of order"));
                }
                let options = ObjOptions { require_connected: i == 0 };
                let (mesh, _) = load_obj_with(dir.join(path), options)?;
                if mesh.num_vertices() != n {
                    return Err(bad(no, "node count disagrees with OBJ"));
                }
                levels.push(mesh);
            }
            [kind @ ("down" | "up"), l] => {
                let l: usize = l.parse().map_err(|_| bad(no, "bad sampler index"))?;
                blocks.push((kind.to_string(), l, Vec::new()));
            }
            ["end"] => ended = true,
            [r, c, v] => {
                let block = blocks.last_mut().ok_or_else(|| bad(no, "triplet outside block"))?;
                let r = r.parse().map_err(|_| bad(no, "bad row"))?;
                let c = c.parse().map_err(|_| bad(no, "bad col"))?;
                let v = v.parse().map_err(|_| bad(no, "bad value"))?;
                block.2.push((r, c, v));
            }
            _ => return Err(bad(no, "unrecognized line")),
        }
    }
    if !ended {
        return Err(bad(text.lines().count(), "missing end"));
    }
    if levels.is_empty() || blocks.len() != 2 * (levels.len() - 1) {
        return Err(bad(0, "sampler blocks do not match level count"));
    }
    let mut samplers = Vec::new();
    for l in 0..levels.len() - 1 {
        let (nf, nc) = (levels[l].num_vertices(), levels[l + 1].num_vertices());
        let find = |kind: &str| {
            blocks
                .iter()
                .find(|b| b.0 == kind && b.1 == l)
                .ok_or_else(|| bad(0, &format!("missing {kind} {l}")))
        };
        let down = SparseMatrix::from_triplets(nc, nf, find("down")?.2.clone())?;
        let up = SparseMatrix::from_triplets(nf, nc, find("up")?.2.clone())?;
        samplers.push(SamplingOperator {
            down: Arc::new(down),
            up: Arc::new(up),
            source_level: l,
            target_level: l + 1,
        });
    }
    Ok(from_parts(levels, samplers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::build_hierarchy;
    use crate::mesh::TriMesh;

    #[test]
    fn round_trip_preserves_operators_and_topology() {
        let dir = tempfile::tempdir().unwrap();
        let h = build_hierarchy(&TriMesh::icosphere(2), 4, 4).unwrap();
        let path = dir.path().join("hier.txt");
        save_hierarchy(&h, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dcgnet-hierarchy v1\nlevel 0 nodes 162 obj hier_level0.obj\n"));
        assert!(text.ends_with("end\n"));
        let back = load_hierarchy(&path).unwrap();
        assert_eq!(back.samplers, h.samplers);
        assert_eq!(back.adjacencies, h.adjacencies);
        for (a, b) in back.levels.iter().zip(&h.levels) {
            assert_eq!(a.faces(), b.faces());
        }
    }

    #[test]
    fn missing_end_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let h = build_hierarchy(&TriMesh::icosphere(1), 2, 4).unwrap();
        let path = dir.path().join("h.txt");
        save_hierarchy(&h, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("end\n", "");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_hierarchy(&path), Err(CoarsenError::Manifest { .. })));
    }
}
