//! STL ingestion: binary/ASCII parsing, bounding boxes, normalization and
//! corpus curation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;

const HEADER_LEN: usize = 80;
const PREAMBLE_LEN: usize = HEADER_LEN + 4;
const FACET_LEN: usize = 50;
const NORMAL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("no triangles")]
    Empty,
    #[error("truncated binary STL: {0}")]
    Truncated(String),
    #[error("malformed ASCII STL at token {position}: {message}")]
    MalformedAscii { position: usize, message: String },
    #[error("non-finite vertex coordinate in triangle {0}")]
    NonFinite(usize),
    #[error("all vertices coincide; cannot normalize")]
    DegenerateExtent,
    #[error("no STL files under {0}")]
    NoModels(PathBuf),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Triangle soup in model units, as read from an STL file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub triangles: Vec<[Vec3; 3]>,
    /// Per-triangle unit normals, when known.
    pub normals: Option<Vec<Vec3>>,
    /// Indices of zero-area triangles found by [`compute_normals`].
    pub degenerate: Vec<usize>,
}

impl TriangleMesh {
    pub fn new(triangles: Vec<[Vec3; 3]>) -> Self {
        Self {
            triangles,
            normals: None,
            degenerate: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn vertices(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.triangles.iter().flat_map(|t| t.iter().copied())
    }

    /// Applies `f` to every vertex. Normals are dropped because an arbitrary
    /// map does not preserve them.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh::new(
            self.triangles
                .iter()
                .map(|t| [f(t[0]), f(t[1]), f(t[2])])
                .collect(),
        )
    }

    pub fn translated(&self, offset: Vec3) -> TriangleMesh {
        let mut out = self.map_vertices(|v| v + offset);
        out.normals = self.normals.clone();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn max_edge(&self) -> f64 {
        self.extent().max_component()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Ok,
    Corrupt,
}

/// One entry of a curated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub source_path: String,
    pub triangle_count: usize,
    pub status: ModelStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Parses a binary or ASCII STL file.
///
/// The exact-length binary test runs first: plenty of binary exporters write
/// `solid` into the 80-byte header.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    if bytes.is_empty() {
        return Err(MeshError::Empty);
    }
    if let Some(count) = declared_count(bytes) {
        if PREAMBLE_LEN as u64 + FACET_LEN as u64 * count as u64 == bytes.len() as u64 {
            return parse_binary(bytes, count as usize);
        }
    }
    if starts_with_solid(bytes) {
        let looks_textual = !bytes.contains(&0);
        match std::str::from_utf8(bytes) {
            Ok(text) if looks_textual => return parse_ascii(text),
            _ => {}
        }
    }
    match declared_count(bytes) {
        Some(count) => Err(MeshError::Truncated(format!(
            "{} bytes but header declares {count} facets ({} bytes expected)",
            bytes.len(),
            PREAMBLE_LEN as u64 + FACET_LEN as u64 * count as u64
        ))),
        None => Err(MeshError::Truncated(format!(
            "{} bytes is shorter than the {PREAMBLE_LEN}-byte binary preamble",
            bytes.len()
        ))),
    }
}

fn declared_count(bytes: &[u8]) -> Option<u32> {
    let raw = bytes.get(HEADER_LEN..PREAMBLE_LEN)?;
    Some(u32::from_le_bytes(raw.try_into().ok()?))
}

fn starts_with_solid(bytes: &[u8]) -> bool {
    let trimmed = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .map_or(&[][..], |i| &bytes[i..]);
    trimmed.len() >= 5 && trimmed[..5].eq_ignore_ascii_case(b"solid")
}

fn read_f32x3(rec: &[u8]) -> [f32; 3] {
    let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
    [f(0), f(1), f(2)]
}

fn parse_binary(bytes: &[u8], count: usize) -> Result<TriangleMesh, MeshError> {
    if count == 0 {
        return Err(MeshError::Empty);
    }
    let mut triangles = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for (i, rec) in bytes[PREAMBLE_LEN..].chunks_exact(FACET_LEN).enumerate() {
        let n = Vec3::from(read_f32x3(&rec[0..12]));
        let tri = [
            Vec3::from(read_f32x3(&rec[12..24])),
            Vec3::from(read_f32x3(&rec[24..36])),
            Vec3::from(read_f32x3(&rec[36..48])),
        ];
        if !tri.iter().all(|v| v.is_finite()) {
            return Err(MeshError::NonFinite(i));
        }
        triangles.push(tri);
        normals.push(n);
    }
    Ok(with_file_normals(triangles, normals))
}

/// Keeps file normals only if every one of them is a unit vector; zeroed or
/// garbage normals are common and get recomputed downstream.
fn with_file_normals(triangles: Vec<[Vec3; 3]>, normals: Vec<Vec3>) -> TriangleMesh {
    let usable = normals
        .iter()
        .all(|n| n.is_finite() && (n.length() - 1.0).abs() <= NORMAL_TOLERANCE);
    TriangleMesh {
        triangles,
        normals: usable.then_some(normals),
        degenerate: Vec::new(),
    }
}

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
    count: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0, count: 0 }
    }

    fn err(&self, message: impl Into<String>) -> MeshError {
        MeshError::MalformedAscii {
            position: self.count,
            message: message.into(),
        }
    }

    fn skip_whitespace(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_whitespace()).len();
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.skip_whitespace();
        let rest = &self.text[self.pos..];
        let len = rest.find(|c: char| c.is_ascii_whitespace()).unwrap_or(rest.len());
        (len > 0).then(|| &rest[..len])
    }

    fn next(&mut self) -> Option<&'a str> {
        let tok = self.peek()?;
        self.pos += tok.len();
        self.count += 1;
        Some(tok)
    }

    /// Skips the remainder of the current line (used for solid names).
    fn skip_line(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.find('\n').map_or(rest.len(), |i| i + 1);
    }

    fn peek_is(&mut self, keyword: &str) -> bool {
        self.peek().is_some_and(|t| t.eq_ignore_ascii_case(keyword))
    }

    fn expect(&mut self, keyword: &str) -> Result<(), MeshError> {
        match self.next() {
            Some(t) if t.eq_ignore_ascii_case(keyword) => Ok(()),
            Some(t) => Err(self.err(format!("expected '{keyword}', found '{t}'"))),
            None => Err(self.err(format!("expected '{keyword}', found end of input"))),
        }
    }

    fn number(&mut self) -> Result<f32, MeshError> {
        let tok = self
            .next()
            .ok_or_else(|| self.err("expected number, found end of input"))?;
        let v: f32 = tok
            .parse()
            .map_err(|_| self.err(format!("'{tok}' is not a number")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("non-finite value '{tok}'")))
        }
    }

    fn vec3(&mut self) -> Result<Vec3, MeshError> {
        Ok(Vec3::from([self.number()?, self.number()?, self.number()?]))
    }
}

fn parse_ascii(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut triangles = Vec::new();
    let mut normals = Vec::new();
    let mut tokens = Tokens::new(text);
    loop {
        tokens.expect("solid")?;
        tokens.skip_line();
        while tokens.peek_is("facet") {
            tokens.next();
            tokens.expect("normal")?;
            normals.push(tokens.vec3()?);
            tokens.expect("outer")?;
            tokens.expect("loop")?;
            let mut tri = [Vec3::ZERO; 3];
            for v in &mut tri {
                tokens.expect("vertex")?;
                *v = tokens.vec3()?;
            }
            tokens.expect("endloop")?;
            tokens.expect("endfacet")?;
            triangles.push(tri);
        }
        tokens.expect("endsolid")?;
        tokens.skip_line();
        if tokens.peek().is_none() {
            break;
        }
    }
    if triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    Ok(with_file_normals(triangles, normals))
}

/// Serializes to binary STL (normals written as stored, or zero).
pub fn write_binary_stl(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + FACET_LEN * mesh.len());
    let mut header = [b' '; HEADER_LEN];
    let tag = b"binary STL (surrogate)";
    header[..tag.len()].copy_from_slice(tag);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.len() as u32).to_le_bytes());
    for (i, tri) in mesh.triangles.iter().enumerate() {
        let n = mesh.normals.as_ref().map_or(Vec3::ZERO, |ns| ns[i]);
        for v in std::iter::once(n).chain(tri.iter().copied()) {
            for c in v.to_array() {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn bounding_box(mesh: &TriangleMesh) -> Result<BoundingBox, MeshError> {
    let mut verts = mesh.vertices();
    let first = verts.next().ok_or(MeshError::Empty)?;
    let (min, max) = verts.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok(BoundingBox { min, max })
}

/// Centers the bounding box on the origin and scales uniformly so the
/// longest box edge is 1.
pub fn normalize(mesh: &TriangleMesh) -> Result<TriangleMesh, MeshError> {
    let bb = bounding_box(mesh)?;
    let edge = bb.max_edge();
    if !(edge > 0.0) {
        return Err(MeshError::DegenerateExtent);
    }
    let center = bb.center();
    let scale = 1.0 / edge;
    let mut out = mesh.map_vertices(|v| (v - center) * scale);
    // Uniform positive scaling leaves normals unchanged.
    out.normals = mesh.normals.clone();
    out.degenerate = mesh.degenerate.clone();
    Ok(out)
}

/// Recomputes normals from winding order. Zero-area triangles get +Z and are
/// listed in `degenerate`.
pub fn compute_normals(mesh: &TriangleMesh) -> TriangleMesh {
    let mut degenerate = Vec::new();
    let normals = mesh
        .triangles
        .iter()
        .enumerate()
        .map(|(i, [a, b, c])| {
            (*b - *a).cross(*c - *a).normalized().unwrap_or_else(|| {
                degenerate.push(i);
                Vec3::Z
            })
        })
        .collect();
    TriangleMesh {
        triangles: mesh.triangles.clone(),
        normals: Some(normals),
        degenerate,
    }
}

fn sanitize_id(stem: &str) -> String {
    let id: String = stem
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    let id = id.trim_matches('.').to_string();
    if id.is_empty() {
        "model".into()
    } else {
        id
    }
}

fn is_stl(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("stl"))
}

/// Scans `dir` recursively, parses every STL file and returns one record per
/// file sorted by id. Unparseable files are kept as `Corrupt`.
pub fn curate(dir: &Path) -> Result<Vec<ModelRecord>, MeshError> {
    let io_err = |path: &Path, e: &dyn std::fmt::Display| MeshError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if !dir.is_dir() {
        return Err(io_err(dir, &"not a directory"));
    }
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| io_err(dir, &e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        if is_stl(entry.path()) {
            paths.push(entry.into_path());
        } else {
            log::warn!("ignoring non-STL file {}", entry.path().display());
        }
    }
    if paths.is_empty() {
        return Err(MeshError::NoModels(dir.to_path_buf()));
    }
    paths.sort();

    let mut taken = BTreeSet::new();
    let ids: Vec<String> = paths
        .iter()
        .map(|p| {
            let base = sanitize_id(&p.file_stem().unwrap_or_default().to_string_lossy());
            let mut id = base.clone();
            let mut n = 2;
            while taken.contains(&id) {
                id = format!("{base}_{n}");
                n += 1;
            }
            taken.insert(id.clone());
            id
        })
        .collect();

    let mut records: Vec<ModelRecord> = paths
        .par_iter()
        .zip(ids)
        .map(|(path, id)| {
            let parsed = fs::read(path)
                .map_err(|e| io_err(path, &e))
                .and_then(|b| parse_stl(&b));
            let (triangle_count, status, error) = match parsed {
                Ok(m) => (m.len(), ModelStatus::Ok, None),
                Err(e) => {
                    log::warn!("corrupt model {}: {e}", path.display());
                    (0, ModelStatus::Corrupt, Some(e.to_string()))
                }
            };
            ModelRecord {
                id,
                source_path: path.to_string_lossy().into_owned(),
                triangle_count,
                status,
                error,
            }
        })
        .collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [Vec3; 3] {
        [a.into(), b.into(), c.into()]
    }

    fn one_facet_binary() -> Vec<u8> {
        let mesh = TriangleMesh::new(vec![tri([0., 0., 0.], [1., 0., 0.], [0., 1., 0.])]);
        write_binary_stl(&mesh)
    }

    #[test]
    fn binary_single_facet_is_134_bytes() {
        let bytes = one_facet_binary();
        assert_eq!(bytes.len(), 134);
        assert_eq!(parse_stl(&bytes).unwrap().len(), 1);
    }

    #[test]
    fn ascii_single_facet() {
        let text = "solid a\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\n\
                    vertex 0 1 0\nendloop\nendfacet\nendsolid a\n";
        let mesh = parse_stl(text.as_bytes()).unwrap();
        assert_eq!(mesh.len(), 1);
        assert_eq!(mesh.normals.unwrap()[0], Vec3::Z);
    }

    #[test]
    fn ascii_multiple_solids_and_uppercase() {
        let facet = "facet normal 0 0 1 outer loop vertex 0 0 0 vertex 1 0 0 vertex 0 1 0 endloop endfacet";
        let text = format!("SOLID first part\n{facet}\nENDSOLID first part\nsolid second\n{facet}\n{facet}\nendsolid\n");
        assert_eq!(parse_stl(text.as_bytes()).unwrap().len(), 3);
    }

    #[test]
    fn declared_two_with_one_record_is_truncated() {
        let mut bytes = one_facet_binary();
        bytes[80..84].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(parse_stl(&bytes), Err(MeshError::Truncated(_))));
    }

    #[test]
    fn binary_header_starting_with_solid_is_still_binary() {
        let mut bytes = one_facet_binary();
        bytes[..6].copy_from_slice(b"solid ");
        assert_eq!(parse_stl(&bytes).unwrap().len(), 1);
    }

    #[test]
    fn zero_count_binary_is_empty() {
        let mut bytes = vec![0u8; 84];
        bytes[..4].copy_from_slice(b"abcd");
        assert_eq!(parse_stl(&bytes), Err(MeshError::Empty));
        assert_eq!(parse_stl(b"solid x\nendsolid x\n"), Err(MeshError::Empty));
        assert_eq!(parse_stl(b""), Err(MeshError::Empty));
    }

    #[test]
    fn malformed_ascii_tokens() {
        let bad = "solid a\nfacet normal 0 0 one\nendsolid a";
        assert!(matches!(
            parse_stl(bad.as_bytes()),
            Err(MeshError::MalformedAscii { .. })
        ));
        let missing = "solid a\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nendloop\nendfacet\nendsolid";
        assert!(matches!(
            parse_stl(missing.as_bytes()),
            Err(MeshError::MalformedAscii { .. })
        ));
    }

    #[test]
    fn zeroed_normals_are_dropped() {
        let bytes = one_facet_binary();
        assert!(parse_stl(&bytes).unwrap().normals.is_none());
    }

    #[test]
    fn bounding_box_examples() {
        let m = TriangleMesh::new(vec![tri([0., 0., 0.], [2., 0., 0.], [0., 3., 0.])]);
        let bb = bounding_box(&m).unwrap();
        assert_eq!(bb.min, Vec3::ZERO);
        assert_eq!(bb.max, Vec3::new(2., 3., 0.));
        let shifted = bounding_box(&m.translated(Vec3::new(5., 5., 5.))).unwrap();
        assert_eq!(shifted.min, Vec3::new(5., 5., 5.));
        assert_eq!(shifted.max, Vec3::new(7., 8., 5.));
        assert_eq!(bounding_box(&TriangleMesh::default()), Err(MeshError::Empty));
    }

    #[test]
    fn normalize_box_4_2_1() {
        let m = TriangleMesh::new(vec![
            tri([0., 0., 0.], [4., 0., 0.], [0., 2., 0.]),
            tri([0., 0., 1.], [4., 2., 1.], [0., 2., 1.]),
        ]);
        let n = normalize(&m).unwrap();
        let bb = bounding_box(&n).unwrap();
        let e = bb.extent();
        assert!((e.x - 1.0).abs() < 1e-12 && (e.y - 0.5).abs() < 1e-12 && (e.z - 0.25).abs() < 1e-12);
        assert!(bb.center().length() < 1e-12);
    }

    #[test]
    fn normalize_rejects_point_mesh() {
        let p = [1.0, 1.0, 1.0];
        let m = TriangleMesh::new(vec![tri(p, p, p)]);
        assert_eq!(normalize(&m), Err(MeshError::DegenerateExtent));
    }

    #[test]
    fn normals_from_winding() {
        let m = TriangleMesh::new(vec![
            tri([0., 0., 0.], [1., 0., 0.], [0., 1., 0.]),
            tri([0., 0., 0.], [0., 1., 0.], [1., 0., 0.]),
            tri([0., 0., 0.], [1., 1., 1.], [2., 2., 2.]),
        ]);
        let n = compute_normals(&m);
        let ns = n.normals.as_ref().unwrap();
        assert_eq!(ns[0], Vec3::Z);
        assert_eq!(ns[1], -Vec3::Z);
        assert_eq!(ns[2], Vec3::Z);
        assert_eq!(n.degenerate, vec![2]);
        assert_eq!(n.len(), 3);
    }

    #[test]
    fn sanitized_ids_are_directory_names() {
        assert_eq!(sanitize_id("gear wheel (v2)"), "gear_wheel__v2_");
        assert_eq!(sanitize_id(".."), "model");
    }
}
