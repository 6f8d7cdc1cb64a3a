//! Point clouds and PLY 1.0 reading/writing.
//!
//! Reads `ascii` and `binary_little_endian` files. Only the `x`, `y`, `z` (float or
//! double) and `red`, `green`, `blue` (uchar) vertex properties are consumed; every
//! other property and element is skipped by size. Big-endian files are rejected.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

use crate::geometry::Point3;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PLY header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("unsupported PLY layout at byte {offset}: {reason}")]
    UnsupportedLayout { offset: usize, reason: String },
    #[error("truncated PLY payload at byte {offset}: element `{element}` declares {expected} entries, only {found} complete")]
    Truncated {
        offset: usize,
        element: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid PLY value at byte {offset}: {reason}")]
    InvalidValue { offset: usize, reason: String },
}

/// Registered LiDAR cloud. Point ids are array indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, colors: None }
    }

    pub fn with_colors(points: Vec<Point3>, colors: Vec<[u8; 3]>) -> Self {
        assert_eq!(points.len(), colors.len(), "one color per point");
        Self {
            points,
            colors: Some(colors),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

impl fmt::Display for PlyFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlyFormat::Ascii => write!(f, "ascii"),
            PlyFormat::BinaryLittleEndian => write!(f, "binary_little_endian"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn header_err(offset: usize, reason: impl Into<String>) -> PlyError {
    PlyError::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String), PlyError> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(start, "unterminated header line"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| header_err(start, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        Ok((start, line))
    };

    let (_, magic) = next_line(&mut offset)?;
    if magic.trim() != "ply" {
        return Err(header_err(0, "missing `ply` magic"));
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (line_start, line) = next_line(&mut offset)?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None | Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                let version = tokens.next().unwrap_or("");
                if version != "1.0" {
                    return Err(header_err(line_start, format!("unsupported version `{version}`")));
                }
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(PlyError::UnsupportedLayout {
                            offset: line_start,
                            reason: "binary_big_endian is not supported".into(),
                        })
                    }
                    other => return Err(header_err(line_start, format!("unknown format `{other}`"))),
                });
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| header_err(line_start, "element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(line_start, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line_start, "property before any element"))?;
                let ty = tokens.next().unwrap_or("");
                if ty == "list" {
                    let count = tokens.next().and_then(Scalar::parse);
                    let item = tokens.next().and_then(Scalar::parse);
                    let (Some(count), Some(item)) = (count, item) else {
                        return Err(header_err(line_start, "invalid list property types"));
                    };
                    if count.is_float() {
                        return Err(header_err(line_start, "list count type must be integral"));
                    }
                    element.properties.push(Property::List { count, item });
                } else {
                    let ty = Scalar::parse(ty)
                        .ok_or_else(|| header_err(line_start, format!("unknown property type `{ty}`")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| header_err(line_start, "property without name"))?;
                    element.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(header_err(line_start, format!("unexpected keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| header_err(offset, "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

/// Where each consumed vertex property sits within a record.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn vertex_layout(element: &Element, offset: usize) -> Result<VertexLayout, PlyError> {
    let find = |want: &str| {
        element.properties.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == want))
    };
    let mut xyz = [0usize; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        let idx = find(name).ok_or_else(|| PlyError::UnsupportedLayout {
            offset,
            reason: format!("vertex element lacks `{name}`"),
        })?;
        if let Property::Scalar { ty, .. } = &element.properties[idx] {
            if !ty.is_float() {
                return Err(PlyError::UnsupportedLayout {
                    offset,
                    reason: format!("vertex `{name}` must be float or double"),
                });
            }
        }
        *slot = idx;
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let all_u8 = [r, g, b]
                .iter()
                .all(|&i| matches!(element.properties[i], Property::Scalar { ty: Scalar::U8, .. }));
            all_u8.then_some([r, g, b])
        }
        _ => None,
    };
    Ok(VertexLayout { xyz, rgb })
}

/// Parsed cloud plus the number of vertices dropped for non-finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyLoad {
    pub cloud: PointCloud,
    pub dropped_non_finite: usize,
}

pub fn read_ply(bytes: &[u8]) -> Result<PlyLoad, PlyError> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::UnsupportedLayout {
            offset: header.body_offset,
            reason: "no `vertex` element".into(),
        })?;
    let layout = vertex_layout(&header.elements[vertex_idx], header.body_offset)?;
    match header.format {
        PlyFormat::BinaryLittleEndian => read_binary(bytes, &header, vertex_idx, &layout),
        PlyFormat::Ascii => read_ascii(bytes, &header, vertex_idx, &layout),
    }
}

struct CloudBuilder {
    points: Vec<Point3>,
    colors: Option<Vec<[u8; 3]>>,
    dropped: usize,
}

impl CloudBuilder {
    fn new(capacity: usize, with_colors: bool) -> Self {
        Self {
            points: Vec::with_capacity(capacity),
            colors: with_colors.then(|| Vec::with_capacity(capacity)),
            dropped: 0,
        }
    }

    fn push(&mut self, xyz: [f64; 3], rgb: Option<[u8; 3]>) {
        if xyz.iter().all(|v| v.is_finite()) {
            self.points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            if let (Some(colors), Some(rgb)) = (self.colors.as_mut(), rgb) {
                colors.push(rgb);
            }
        } else {
            self.dropped += 1;
        }
    }

    fn finish(self) -> PlyLoad {
        if self.dropped > 0 {
            log::warn!("dropped {} PLY vertices with non-finite coordinates", self.dropped);
        }
        PlyLoad {
            cloud: PointCloud {
                points: self.points,
                colors: self.colors,
            },
            dropped_non_finite: self.dropped,
        }
    }
}

fn read_binary(bytes: &[u8], header: &Header, vertex_idx: usize, layout: &VertexLayout) -> Result<PlyLoad, PlyError> {
    let mut pos = header.body_offset;
    let mut builder = None;
    for (ei, element) in header.elements.iter().enumerate() {
        if ei > vertex_idx {
            break;
        }
        let is_vertex = ei == vertex_idx;
        if is_vertex {
            builder = Some(CloudBuilder::new(element.count, layout.rgb.is_some()));
        }
        let mut values = vec![0.0f64; element.properties.len()];
        for record in 0..element.count {
            let truncated = |pos: usize| PlyError::Truncated {
                offset: pos,
                element: element.name.clone(),
                expected: element.count,
                found: record,
            };
            for (pi, prop) in element.properties.iter().enumerate() {
                match prop {
                    Property::Scalar { ty, .. } => {
                        let end = pos + ty.size();
                        if end > bytes.len() {
                            return Err(truncated(pos));
                        }
                        values[pi] = ty.read_le(&bytes[pos..end]);
                        pos = end;
                    }
                    Property::List { count, item } => {
                        let end = pos + count.size();
                        if end > bytes.len() {
                            return Err(truncated(pos));
                        }
                        let n = count.read_le(&bytes[pos..end]);
                        if n < 0.0 {
                            return Err(PlyError::InvalidValue {
                                offset: pos,
                                reason: "negative list length".into(),
                            });
                        }
                        let skip = n as usize * item.size();
                        if end + skip > bytes.len() {
                            return Err(truncated(pos));
                        }
                        pos = end + skip;
                    }
                }
            }
            if is_vertex {
                let xyz = layout.xyz.map(|i| values[i]);
                let rgb = layout.rgb.map(|idx| idx.map(|i| values[i] as u8));
                builder.as_mut().unwrap().push(xyz, rgb);
            }
        }
    }
    Ok(builder.expect("vertex element visited").finish())
}

fn read_ascii(bytes: &[u8], header: &Header, vertex_idx: usize, layout: &VertexLayout) -> Result<PlyLoad, PlyError> {
    let mut tokens = AsciiTokens {
        bytes,
        pos: header.body_offset,
    };
    let mut builder = None;
    for (ei, element) in header.elements.iter().enumerate() {
        if ei > vertex_idx {
            break;
        }
        let is_vertex = ei == vertex_idx;
        if is_vertex {
            builder = Some(CloudBuilder::new(element.count, layout.rgb.is_some()));
        }
        let mut values = vec![0.0f64; element.properties.len()];
        for record in 0..element.count {
            let next = |tokens: &mut AsciiTokens| -> Result<(usize, f64), PlyError> {
                let (at, tok) = tokens.next().ok_or(PlyError::Truncated {
                    offset: bytes.len(),
                    element: element.name.clone(),
                    expected: element.count,
                    found: record,
                })?;
                let value = tok.parse::<f64>().map_err(|_| PlyError::InvalidValue {
                    offset: at,
                    reason: format!("`{tok}` is not a number"),
                })?;
                Ok((at, value))
            };
            for (pi, prop) in element.properties.iter().enumerate() {
                match prop {
                    Property::Scalar { ty, .. } => {
                        let v = next(&mut tokens)?.1;
                        values[pi] = if *ty == Scalar::F32 { v as f32 as f64 } else { v };
                    }
                    Property::List { .. } => {
                        let (at, n) = next(&mut tokens)?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(PlyError::InvalidValue {
                                offset: at,
                                reason: "invalid list length".into(),
                            });
                        }
                        for _ in 0..n as usize {
                            next(&mut tokens)?;
                        }
                    }
                }
            }
            if is_vertex {
                let xyz = layout.xyz.map(|i| values[i]);
                let rgb = layout.rgb.map(|idx| idx.map(|i| values[i].clamp(0.0, 255.0) as u8));
                builder.as_mut().unwrap().push(xyz, rgb);
            }
        }
    }
    Ok(builder.expect("vertex element visited").finish())
}

struct AsciiTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> AsciiTokens<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok().map(|s| (start, s))
    }
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    Ok(load_ply_with_report(path)?.cloud)
}

pub fn load_ply_with_report(path: impl AsRef<Path>) -> Result<PlyLoad, PlyError> {
    let bytes = fs::read(path)?;
    read_ply(&bytes)
}

/// Serializes `cloud` as PLY. Coordinates are written as `double`, so binary files
/// reproduce every coordinate bit-for-bit; ASCII uses shortest round-trip formatting.
pub fn write_ply(cloud: &PointCloud, format: PlyFormat, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format {format} 1.0")?;
    writeln!(out, "element vertex {}", cloud.points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}")?;
    }
    if cloud.colors.is_some() {
        for channel in ["red", "green", "blue"] {
            writeln!(out, "property uchar {channel}")?;
        }
    }
    writeln!(out, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        let rgb = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::BinaryLittleEndian => {
                out.write_f64::<LittleEndian>(p.x)?;
                out.write_f64::<LittleEndian>(p.y)?;
                out.write_f64::<LittleEndian>(p.z)?;
                if let Some(rgb) = rgb {
                    out.write_all(&rgb)?;
                }
            }
            PlyFormat::Ascii => {
                write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
                if let Some([r, g, b]) = rgb {
                    write!(out, " {r} {g} {b}")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<(), PlyError> {
    let mut buf = Vec::with_capacity(64 + cloud.len() * 27);
    write_ply(cloud, format, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}
