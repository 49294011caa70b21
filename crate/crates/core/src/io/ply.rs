//! Point cloud file readers and writers.
//!
//! PLY support covers ASCII and binary-little-endian 1.0 with `x`/`y`/`z`
//! vertex properties stored as 32- or 64-bit floats; other scalar vertex
//! properties are skipped. Elements after the vertex block are ignored.
//! Writers emit double precision, so binary round trips are bit-exact and
//! ASCII round trips are exact under shortest-roundtrip formatting.
//!
//! The `.xyz` format is whitespace-separated triples, `#` comments allowed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    match extension(path) {
        Some("ply") => read_ply(path),
        Some("xyz") | Some("txt") => read_xyz(path),
        other => Err(Error::UnsupportedFormat(format!(
            "extension {:?} (expected .ply, .xyz, or .txt)",
            other.unwrap_or("<none>")
        ))),
    }
}

pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    match extension(path) {
        Some("ply") => write_ply_binary(cloud, path),
        Some("xyz") | Some("txt") => write_xyz(cloud, path),
        other => Err(Error::UnsupportedFormat(format!(
            "extension {:?} (expected .ply, .xyz, or .txt)",
            other.unwrap_or("<none>")
        ))),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
struct PlyProperty {
    name: String,
    ty: ScalarType,
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
    has_list: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

struct PlyHeader {
    format: PlyFormat,
    elements: Vec<PlyElement>,
    header_len: usize,
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<PlyHeader> {
    let mut offset = 0usize;
    let mut lines = Vec::new();
    // Header is ASCII lines up to and including "end_header".
    loop {
        let start = offset;
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(malformed(offset, "header has no end_header line"));
        };
        offset += nl + 1;
        let line = std::str::from_utf8(&bytes[start..start + nl])
            .map_err(|_| malformed(start, "header is not valid ASCII"))?
            .trim_end_matches('\r')
            .to_string();
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if offset >= bytes.len() {
            return Err(malformed(offset, "header has no end_header line"));
        }
    }

    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(malformed(0, "missing ply magic line"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in &lines[1..lines.len() - 1] {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None | Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                format = match (tokens.next(), tokens.next()) {
                    (Some("ascii"), Some("1.0")) => Some(PlyFormat::Ascii),
                    (Some("binary_little_endian"), Some("1.0")) => {
                        Some(PlyFormat::BinaryLittleEndian)
                    }
                    (f, v) => {
                        return Err(malformed(
                            0,
                            format!("unsupported format {f:?} version {v:?}"),
                        ))
                    }
                };
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| malformed(0, "element without a name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| malformed(0, "element without a valid count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| malformed(0, "property before any element"))?;
                let first = tokens
                    .next()
                    .ok_or_else(|| malformed(0, "property without a type"))?;
                if first == "list" {
                    element.has_list = true;
                    continue;
                }
                let ty = ScalarType::parse(first)
                    .ok_or_else(|| malformed(0, format!("unknown property type {first}")))?;
                let name = tokens
                    .next()
                    .ok_or_else(|| malformed(0, "property without a name"))?;
                element.properties.push(PlyProperty {
                    name: name.to_string(),
                    ty,
                });
            }
            Some(other) => {
                return Err(malformed(0, format!("unknown header keyword {other}")));
            }
        }
    }
    let format = format.ok_or_else(|| malformed(0, "header has no format line"))?;
    Ok(PlyHeader {
        format,
        elements,
        header_len: offset,
    })
}

fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let header = parse_header(&bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed(header.header_len, "no vertex element"))?;
    for earlier in &header.elements[..vertex_pos] {
        if earlier.has_list {
            return Err(Error::UnsupportedFormat(format!(
                "element {} with list properties precedes vertex data",
                earlier.name
            )));
        }
    }
    let vertex = &header.elements[vertex_pos];
    if vertex.has_list {
        return Err(Error::UnsupportedFormat(
            "vertex element with list properties".into(),
        ));
    }
    let coord_index = |name: &str| -> Result<usize> {
        vertex
            .properties
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| malformed(header.header_len, format!("vertex has no {name} property")))
    };
    let (xi, yi, zi) = (coord_index("x")?, coord_index("y")?, coord_index("z")?);
    for i in [xi, yi, zi] {
        if !matches!(vertex.properties[i].ty, ScalarType::F32 | ScalarType::F64) {
            return Err(Error::UnsupportedFormat(
                "coordinate properties must be float or double".into(),
            ));
        }
    }

    let mut points = Vec::with_capacity(vertex.count);
    match header.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[header.header_len..])
                .map_err(|_| malformed(header.header_len, "ascii body is not UTF-8"))?;
            let mut rows = body.lines();
            for earlier in &header.elements[..vertex_pos] {
                for _ in 0..earlier.count {
                    rows.next().ok_or_else(|| {
                        malformed(bytes.len(), "unexpected end of file in ascii body")
                    })?;
                }
            }
            for _ in 0..vertex.count {
                let line = rows
                    .next()
                    .ok_or_else(|| malformed(bytes.len(), "unexpected end of file (truncated)"))?;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.len() < vertex.properties.len() {
                    return Err(malformed(
                        bytes.len(),
                        format!(
                            "vertex row has {} values, expected {}",
                            tokens.len(),
                            vertex.properties.len()
                        ),
                    ));
                }
                let parse = |i: usize| -> Result<f64> {
                    tokens[i]
                        .parse::<f64>()
                        .map_err(|_| malformed(bytes.len(), format!("bad number {:?}", tokens[i])))
                };
                points.push(Point3::new(parse(xi)?, parse(yi)?, parse(zi)?));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut cursor = header.header_len;
            for earlier in &header.elements[..vertex_pos] {
                let stride: usize = earlier.properties.iter().map(|p| p.ty.width()).sum();
                cursor += stride * earlier.count;
            }
            let stride: usize = vertex.properties.iter().map(|p| p.ty.width()).sum();
            let offset_of = |idx: usize| -> usize {
                vertex.properties[..idx]
                    .iter()
                    .map(|p| p.ty.width())
                    .sum()
            };
            let (ox, oy, oz) = (offset_of(xi), offset_of(yi), offset_of(zi));
            let need = stride * vertex.count;
            if cursor + need > bytes.len() {
                return Err(malformed(bytes.len(), "unexpected end of file (truncated)"));
            }
            let read_coord = |base: usize, off: usize, ty: ScalarType| -> f64 {
                match ty {
                    ScalarType::F32 => {
                        let mut b = [0u8; 4];
                        b.copy_from_slice(&bytes[base + off..base + off + 4]);
                        f32::from_le_bytes(b) as f64
                    }
                    ScalarType::F64 => {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(&bytes[base + off..base + off + 8]);
                        f64::from_le_bytes(b)
                    }
                    _ => unreachable!("coordinate types validated above"),
                }
            };
            for row in 0..vertex.count {
                let base = cursor + row * stride;
                points.push(Point3::new(
                    read_coord(base, ox, vertex.properties[xi].ty),
                    read_coord(base, oy, vertex.properties[yi].ty),
                    read_coord(base, oz, vertex.properties[zi].ty),
                ));
            }
        }
    }
    PointCloud::new(points)
}

fn write_ply_header(w: &mut impl Write, count: usize, format: &str) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format {format} 1.0")?;
    writeln!(w, "element vertex {count}")?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "end_header")?;
    Ok(())
}

pub fn write_ply_binary(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_header(&mut w, cloud.len(), "binary_little_endian")?;
    for p in cloud.iter() {
        w.write_all(&p.x.to_le_bytes())?;
        w.write_all(&p.y.to_le_bytes())?;
        w.write_all(&p.z.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply_ascii(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_header(&mut w, cloud.len(), "ascii")?;
    for p in cloud.iter() {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

fn read_xyz(path: &Path) -> Result<PointCloud> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in coord.iter_mut() {
            *c = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| malformed(lineno, format!("line {lineno}: expected 3 numbers")))?;
        }
        points.push(Point3::new(coord[0], coord[1], coord[2]));
    }
    PointCloud::new(points)
}

fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in cloud.iter() {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the whole file; used by manifest loaders for small text artifacts.
pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}
