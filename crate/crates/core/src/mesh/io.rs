//! OBJ and PLY readers, an OBJ writer, and landmark index files.
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so an OBJ written here parses back to bit-identical `f64` positions.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::{LandmarkIndexTable, Mesh, MeshTopology};
use crate::error::{Error, Result};

/// Raw geometry as read from disk, before topology validation.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshData {
    pub positions: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn parse_err(path: &Path, line: usize, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        offset,
        message: message.into(),
    }
}

pub fn parse_obj(text: &str, path: &Path) -> Result<MeshData> {
    let mut positions = Vec::new();
    let mut faces: Vec<([i64; 3], usize, usize)> = Vec::new();
    let mut offset = 0;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if coords.len() < 3 {
                    return Err(parse_err(path, line_no, offset, "vertex needs 3 coordinates"));
                }
                let mut p = [0.0f64; 3];
                for (c, tok) in coords[..3].iter().enumerate() {
                    p[c] = tok
                        .parse()
                        .map_err(|e| parse_err(path, line_no, offset, format!("bad coordinate `{tok}`: {e}")))?;
                    if !p[c].is_finite() {
                        return Err(parse_err(path, line_no, offset, "non-finite coordinate"));
                    }
                }
                positions.push(p);
            }
            Some("f") => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        path,
                        line_no,
                        offset,
                        format!("only triangles are supported, face has {} vertices", refs.len()),
                    ));
                }
                let mut idx = [0i64; 3];
                for (c, r) in refs.iter().enumerate() {
                    let first = r.split('/').next().unwrap_or("");
                    idx[c] = first
                        .parse()
                        .map_err(|e| parse_err(path, line_no, offset, format!("bad face index `{r}`: {e}")))?;
                }
                faces.push((idx, line_no, offset));
            }
            _ => {}
        }
        offset += raw.len();
    }
    let n = positions.len() as i64;
    let mut triangles = Vec::with_capacity(faces.len());
    for (idx, line_no, off) in faces {
        let mut tri = [0usize; 3];
        for c in 0..3 {
            let v = idx[c];
            let resolved = if v > 0 { v - 1 } else { n + v };
            if v == 0 || resolved < 0 || resolved >= n {
                return Err(parse_err(
                    path,
                    line_no,
                    off,
                    format!("face index {v} out of range for {n} vertices"),
                ));
            }
            tri[c] = resolved as usize;
        }
        triangles.push(tri);
    }
    Ok(MeshData { positions, triangles })
}

pub fn format_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertex_count() * 48);
    for p in mesh.positions() {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    for t in mesh.topology().triangles() {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads ASCII or binary little-endian PLY with `x y z` vertex properties and
/// a triangle `vertex_indices` (or `vertex_index`) face list.
struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
    line_no: usize,
}

impl Lines<'_> {
    /// Next line as `(trimmed text, 1-based line number, byte offset)`.
    fn next_line(&mut self) -> Option<(String, usize, usize)> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        let end = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(self.bytes.len(), |i| start + i);
        self.pos = (end + 1).min(self.bytes.len());
        self.line_no += 1;
        Some((String::from_utf8_lossy(&self.bytes[start..end]).trim().to_string(), self.line_no, start))
    }
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<MeshData> {
    let mut lines = Lines { bytes, pos: 0, line_no: 0 };
    let (magic, _, _) = lines.next_line().ok_or_else(|| parse_err(path, 1, 0, "empty file"))?;
    if magic != "ply" {
        return Err(parse_err(path, 1, 0, "missing `ply` magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (line, ln, off) = lines.next_line().ok_or_else(|| parse_err(path, 0, bytes.len(), "header not terminated"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(parse_err(path, ln, off, format!("unsupported PLY format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, ln, off, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, off, "property before element"))?;
                let (c, i) = Scalar::parse(count_ty)
                    .zip(Scalar::parse(item_ty))
                    .ok_or_else(|| parse_err(path, ln, off, "unknown list property type"))?;
                el.properties.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, off, "property before element"))?;
                let s = Scalar::parse(ty).ok_or_else(|| parse_err(path, ln, off, format!("unknown type `{ty}`")))?;
                el.properties.push(Property::Scalar(name.to_string(), s));
            }
            _ => return Err(parse_err(path, ln, off, format!("unrecognized header line `{line}`"))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, lines.line_no, lines.pos, "missing format line"))?;

    let mut positions = Vec::new();
    let mut triangles = Vec::new();
    let mut body_line = lines.line_no;
    let mut pos = lines.pos;
    for el in &elements {
        let xyz: Vec<Option<usize>> = ["x", "y", "z"]
            .iter()
            .map(|axis| {
                el.properties
                    .iter()
                    .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
            })
            .collect();
        for _ in 0..el.count {
            let record_offset = if binary { pos } else { lines.pos };
            let mut scalars = Vec::with_capacity(el.properties.len());
            let mut lists: Vec<Vec<f64>> = Vec::new();
            if binary {
                for p in &el.properties {
                    match p {
                        Property::Scalar(_, s) => {
                            let b = bytes
                                .get(pos..pos + s.size())
                                .ok_or_else(|| parse_err(path, 0, pos, format!("truncated {} record", el.name)))?;
                            scalars.push(s.read_le(b));
                            pos += s.size();
                        }
                        Property::List(_, c, item) => {
                            let b = bytes
                                .get(pos..pos + c.size())
                                .ok_or_else(|| parse_err(path, 0, pos, format!("truncated {} record", el.name)))?;
                            let n = c.read_le(b) as usize;
                            pos += c.size();
                            let mut items = Vec::with_capacity(n);
                            for _ in 0..n {
                                let b = bytes
                                    .get(pos..pos + item.size())
                                    .ok_or_else(|| parse_err(path, 0, pos, format!("truncated {} list", el.name)))?;
                                items.push(item.read_le(b));
                                pos += item.size();
                            }
                            scalars.push(f64::NAN);
                            lists.push(items);
                        }
                    }
                }
            } else {
                let (line, ln, off) = lines.next_line()
                    .ok_or_else(|| parse_err(path, lines.line_no + 1, bytes.len(), format!("missing {} record", el.name)))?;
                body_line = ln;
                let mut toks = line.split_whitespace();
                let mut take = |what: &str| -> Result<f64> {
                    let t = toks
                        .next()
                        .ok_or_else(|| parse_err(path, ln, off, format!("missing {what}")))?;
                    t.parse::<f64>()
                        .map_err(|_| parse_err(path, ln, off, format!("bad {what} `{t}`")))
                };
                for p in &el.properties {
                    match p {
                        Property::Scalar(name, _) => scalars.push(take(name)?),
                        Property::List(name, _, _) => {
                            let n = take(name)? as usize;
                            let items = (0..n).map(|_| take(name)).collect::<Result<Vec<_>>>()?;
                            scalars.push(f64::NAN);
                            lists.push(items);
                        }
                    }
                }
            }
            let (ln, off) = if binary { (0, record_offset) } else { (body_line, record_offset) };
            if el.name == "vertex" {
                let mut p = [0.0; 3];
                for c in 0..3 {
                    let i = xyz[c].ok_or_else(|| parse_err(path, ln, off, "vertex element lacks x/y/z"))?;
                    p[c] = scalars[i];
                    if !p[c].is_finite() {
                        return Err(parse_err(path, ln, off, "non-finite coordinate"));
                    }
                }
                positions.push(p);
            } else if el.name == "face" {
                let list_idx = el
                    .properties
                    .iter()
                    .filter(|p| matches!(p, Property::List(..)))
                    .position(|p| matches!(p, Property::List(n, _, _) if n == "vertex_indices" || n == "vertex_index"))
                    .ok_or_else(|| parse_err(path, ln, off, "face element lacks vertex_indices"))?;
                let items = &lists[list_idx];
                if items.len() != 3 {
                    return Err(parse_err(
                        path,
                        ln,
                        off,
                        format!("only triangles are supported, face has {} vertices", items.len()),
                    ));
                }
                triangles.push((
                    [items[0], items[1], items[2]],
                    ln,
                    off,
                ));
            }
        }
    }
    let n = positions.len();
    let triangles = triangles
        .into_iter()
        .map(|(idx, ln, off)| {
            let mut tri = [0usize; 3];
            for c in 0..3 {
                let v = idx[c];
                if v < 0.0 || v.fract() != 0.0 || v as usize >= n {
                    return Err(parse_err(path, ln, off, format!("face index {v} out of range for {n} vertices")));
                }
                tri[c] = v as usize;
            }
            Ok(tri)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeshData { positions, triangles })
}

/// Reads an `.obj` or `.ply` file, chosen by extension.
pub fn read_mesh(path: &Path) -> Result<MeshData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "obj" => {
            let text = String::from_utf8(bytes).map_err(|e| {
                parse_err(path, 0, e.utf8_error().valid_up_to(), "file is not valid UTF-8")
            })?;
            parse_obj(&text, path)
        }
        Some(ext) if ext == "ply" => parse_ply(&bytes, path),
        _ => Err(parse_err(path, 0, 0, "unknown mesh extension (expected .obj or .ply)")),
    }
}

/// Reads a mesh; with `expected`, the file must carry exactly that topology
/// and the result shares it.
pub fn load_mesh(path: &Path, expected: Option<&Arc<MeshTopology>>) -> Result<Mesh> {
    let data = read_mesh(path)?;
    let topology = match expected {
        Some(t) => {
            if t.vertex_count() != data.positions.len() || t.triangles() != data.triangles.as_slice() {
                return Err(Error::Topology(format!(
                    "{}: mesh topology differs from the expected one ({} vertices)",
                    path.display(),
                    t.vertex_count()
                )));
            }
            t.clone()
        }
        None => Arc::new(MeshTopology::new(data.positions.len(), data.triangles)?),
    };
    Mesh::new(topology, data.positions)
}

/// One 0-based vertex index per line.
pub fn read_landmark_indices(path: &Path, vertex_count: usize) -> Result<LandmarkIndexTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut indices = Vec::new();
    let mut offset = 0;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim();
        if !line.is_empty() {
            let v = line
                .parse::<usize>()
                .map_err(|_| parse_err(path, i + 1, offset, format!("bad vertex index `{line}`")))?;
            indices.push(v);
        }
        offset += raw.len();
    }
    LandmarkIndexTable::new(indices, vertex_count)
}

pub fn write_landmark_indices(path: &Path, table: &LandmarkIndexTable) -> Result<()> {
    let mut out = String::new();
    for i in table.indices() {
        let _ = writeln!(out, "{i}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_support::grid;

    #[test]
    fn obj_roundtrip_bit_exact() {
        let m = grid(4, 3).translated([0.1, 1.0 / 3.0, -7.25e-5]);
        let text = format_obj(&m);
        let data = parse_obj(&text, Path::new("m.obj")).unwrap();
        assert_eq!(data.positions, m.positions());
        assert_eq!(data.triangles, m.topology().triangles());
    }

    #[test]
    fn obj_slash_and_negative_indices() {
        let text = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 -1\n";
        let data = parse_obj(text, Path::new("m.obj")).unwrap();
        assert_eq!(data.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_bad_face_names_line() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n";
        match parse_obj(text, Path::new("bad.obj")) {
            Err(Error::Parse { line, offset, message, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(offset, 24);
                assert!(message.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", Path::new("q.obj")),
            Err(Error::Parse { line: 5, .. })
        ));
        assert!(matches!(
            parse_obj("v 0 x 0\n", Path::new("c.obj")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn ply_header(format: &str, vtype: &str) -> String {
        format!(
            "ply\nformat {format} 1.0\ncomment test\nelement vertex 3\nproperty {vtype} x\nproperty {vtype} y\nproperty {vtype} z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
        )
    }

    #[test]
    fn ply_ascii() {
        let text = ply_header("ascii", "float") + "0 0 0 255\n1.5 0 0 0\n0 2.25 -1 7\n3 0 1 2\n";
        let data = parse_ply(text.as_bytes(), Path::new("a.ply")).unwrap();
        assert_eq!(data.positions, vec![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 2.25, -1.0]]);
        assert_eq!(data.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn ply_binary_little_endian() {
        let mut bytes = ply_header("binary_little_endian", "double").into_bytes();
        for p in [[0.0f64, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 2.25, -1.0]] {
            for c in p {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
            bytes.push(9);
        }
        bytes.push(3);
        for i in [0i32, 1, 2] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let data = parse_ply(&bytes, Path::new("b.ply")).unwrap();
        assert_eq!(data.positions[2], [0.0, 2.25, -1.0]);
        assert_eq!(data.triangles, vec![[0, 1, 2]]);

        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(parse_ply(truncated, Path::new("b.ply")), Err(Error::Parse { .. })));
    }

    #[test]
    fn ply_bad_face_index() {
        let text = ply_header("ascii", "float") + "0 0 0 1\n1 0 0 1\n0 1 0 1\n3 0 1 5\n";
        match parse_ply(text.as_bytes(), Path::new("c.ply")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 15);
                assert!(message.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
    }
}
