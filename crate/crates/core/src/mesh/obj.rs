//! Wavefront OBJ subset: `v x y z`, `f i j k` (1-based), `#` comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MeshError, TriMesh};

#[derive(Debug, Clone, Copy)]
pub struct ObjOptions {
    /// Reject meshes whose edge graph has more than one component.
    pub require_connected: bool,
}

impl Default for ObjOptions {
    fn default() -> Self {
        Self { require_connected: true }
    }
}

/// Metadata gathered while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjInfo {
    /// Lines with a record type other than `v`, `f` or a comment.
    pub ignored_lines: usize,
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    load_obj_with(path, ObjOptions::default()).map(|(mesh, _)| mesh)
}

pub fn load_obj_with(
    path: impl AsRef<Path>,
    options: ObjOptions,
) -> Result<(TriMesh, ObjInfo), MeshError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| MeshError::Io { path: path.to_path_buf(), source })?;
    parse_obj(&text, options)
}

pub fn parse_obj(text: &str, options: ObjOptions) -> Result<(TriMesh, ObjInfo), MeshError> {
    let mut vertices = Vec::new();
    let mut raw_faces = Vec::new();
    let mut info = ObjInfo::default();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse_err = || MeshError::Parse { line: line_no, text: line.to_string() };
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err())?;
                // a fourth (w) component is allowed and dropped
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(parse_err());
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err())?;
                if idx.len() != 3 {
                    return Err(MeshError::NonTriangle { line: line_no, count: idx.len() });
                }
                raw_faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => info.ignored_lines += 1,
        }
    }
    let n = vertices.len();
    let mut faces = Vec::with_capacity(raw_faces.len());
    for f in raw_faces {
        let mut face = [0usize; 3];
        for (slot, &i) in face.iter_mut().zip(&f) {
            if i < 1 || i as usize > n {
                return Err(MeshError::IndexOutOfRange { index: i, vertices: n });
            }
            *slot = i as usize - 1;
        }
        faces.push(face);
    }
    let mesh = TriMesh::new(vertices, faces)?;
    if options.require_connected {
        mesh.ensure_connected()?;
    }
    if info.ignored_lines > 0 {
        log::warn!("ignored {} unsupported OBJ lines", info.ignored_lines);
    }
    Ok((mesh, info))
}

/// Writes vertices with six decimals and 1-based faces.
pub fn write_obj(mesh: &TriMesh, mut out: impl Write) -> std::io::Result<()> {
    for v in mesh.vertices() {
        writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let io_err = |source| MeshError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    write_obj(mesh, &mut buf).map_err(io_err)?;
    fs::write(path, buf).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TETRA: &str = "# tetrahedron\nv 1 1 1\nv 1 -1 -1\nv -1 1 -1\nv -1 -1 1\n\
                         f 1 2 3\nf 1 4 2\nf 1 3 4\nf 2 4 3\n";

    #[test]
    fn parses_tetrahedron() {
        let (m, info) = parse_obj(TETRA, ObjOptions::default()).unwrap();
        assert_eq!((m.num_vertices(), m.num_faces()), (4, 4));
        assert_eq!(info.ignored_lines, 0);
    }

    #[test]
    fn zero_index_is_rejected() {
        let text = TETRA.replace("f 1 2 3", "f 0 2 3");
        assert!(matches!(
            parse_obj(&text, ObjOptions::default()),
            Err(MeshError::IndexOutOfRange { index: 0, vertices: 4 })
        ));
    }

    #[test]
    fn quads_are_rejected() {
        let text = format!("{TETRA}f 1 2 3 4\n");
        assert!(matches!(
            parse_obj(&text, ObjOptions::default()),
            Err(MeshError::NonTriangle { count: 4, .. })
        ));
    }

    #[test]
    fn bad_numbers_are_parse_errors() {
        assert!(matches!(
            parse_obj("v 1 2 x\n", ObjOptions::default()),
            Err(MeshError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn counts_ignored_records_and_slashed_indices() {
        let text = "o thing\nvn 0 0 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n";
        let (m, info) = parse_obj(text, ObjOptions::default()).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        assert_eq!(info.ignored_lines, 2);
    }

    #[test]
    fn disconnected_rejected_unless_allowed() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 5 5 5\n f 1 2 3\n";
        assert!(matches!(
            parse_obj(text, ObjOptions::default()),
            Err(MeshError::Disconnected { components: 2 })
        ));
        assert!(parse_obj(text, ObjOptions { require_connected: false }).is_ok());
    }

    #[test]
    fn origin_vertex_formatting() {
        let m = TriMesh::new(vec![[0.0; 3]], vec![]).unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "v 0.000000 0.000000 0.000000\n");
    }
}
