//! PLY point clouds (ASCII and binary little-endian). Only the `vertex`
//! element is read; `x y z` and 8-bit `red green blue` are required.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    /// Parses an ASCII token at this type's precision.
    fn parse_text(self, t: &str) -> Option<f64> {
        match self {
            Scalar::I8 => t.parse::<i8>().ok().map(f64::from),
            Scalar::U8 => t.parse::<u8>().ok().map(f64::from),
            Scalar::I16 => t.parse::<i16>().ok().map(f64::from),
            Scalar::U16 => t.parse::<u16>().ok().map(f64::from),
            Scalar::I32 => t.parse::<i32>().ok().map(f64::from),
            Scalar::U32 => t.parse::<u32>().ok().map(f64::from),
            Scalar::F32 => t.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => t.parse::<f64>().ok(),
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Property name and type; list properties carry count and item types and
/// are skipped, so their name is not kept.
#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed(format!("PLY header: {}", msg.into()))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("no end_header"))?;
    let mut body_offset = end + END.len();
    // the terminator line ends in \n or \r\n
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("not ASCII"))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::BadMagic("PLY"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(malformed(format!("unsupported format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed(format!("bad count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", n, t, _name] => {
                let (n, t) = Scalar::parse(n)
                    .zip(Scalar::parse(t))
                    .ok_or_else(|| malformed(format!("bad list types in `{line}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?
                    .props
                    .push(Property::List(n, t));
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or_else(|| malformed(format!("bad type in `{line}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?
                    .props
                    .push(Property::Scalar(name.to_string(), t));
            }
            _ => return Err(malformed(format!("unrecognised line `{line}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| malformed("missing format line"))?,
        elements,
        body_offset,
    })
}

/// Column indices of the required vertex properties.
struct Columns {
    xyz: [usize; 3],
    rgb: [usize; 3],
}

fn columns(vertex: &Element) -> Result<Columns> {
    let find = |want: &str| {
        vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == want))
            .ok_or_else(|| Error::MissingProperty(want.to_string()))
    };
    let xyz = [find("x")?, find("y")?, find("z")?];
    let rgb = [find("red")?, find("green")?, find("blue")?];
    let types: Vec<Scalar> = rgb
        .iter()
        .map(|&i| match vertex.props[i] {
            Property::Scalar(_, t) => t,
            Property::List(..) => unreachable!(),
        })
        .collect();
    if types.iter().any(|&t| t != Scalar::U8) {
        return Err(Error::Malformed(format!(
            "PLY colours must be 8-bit unsigned, got {types:?}"
        )));
    }
    Ok(Columns { xyz, rgb })
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MissingProperty("element vertex".into()))?;
    let cols = columns(&header.elements[vi])?;
    let body = &bytes[header.body_offset..];
    let rows = match header.format {
        Format::Ascii => read_ascii(body, &header.elements, vi)?,
        Format::BinaryLe => read_binary(body, &header.elements, vi)?,
    };
    let positions = rows.iter().map(|r| cols.xyz.map(|i| r[i])).collect();
    let colors = rows.iter().map(|r| cols.rgb.map(|i| r[i] / 255.0)).collect();
    PointCloud::new(positions, colors)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Scalar values of every vertex, in property order (lists are skipped).
fn read_ascii(body: &[u8], elements: &[Element], vertex: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::Malformed("PLY body is not ASCII".into()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (ei, el) in elements.iter().enumerate() {
        for row in 0..el.count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Truncated(format!("PLY {} row {row} of {}", el.name, el.count)))?;
            if ei != vertex {
                continue;
            }
            let mut tok = line.split_whitespace();
            let mut next = |ty: Scalar| -> Result<f64> {
                let t = tok
                    .next()
                    .ok_or_else(|| Error::Truncated(format!("PLY vertex row {row} is short")))?;
                ty.parse_text(t)
                    .ok_or_else(|| Error::Malformed(format!("PLY value `{t}` in vertex row {row}")))
            };
            let mut vals = Vec::with_capacity(el.props.len());
            for p in &el.props {
                match *p {
                    Property::Scalar(_, ty) => vals.push(next(ty)?),
                    Property::List(n, ty) => {
                        let n = next(n)? as usize;
                        for _ in 0..n {
                            next(ty)?;
                        }
                        vals.push(f64::NAN);
                    }
                }
            }
            out.push(vals);
        }
        if ei == vertex {
            break;
        }
    }
    Ok(out)
}

fn read_binary(body: &[u8], elements: &[Element], vertex: usize) -> Result<Vec<Vec<f64>>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = pos + n;
        if end > body.len() {
            return Err(Error::Truncated(format!("PLY body ends inside {what}")));
        }
        let s = &body[pos..end];
        pos = end;
        Ok(s)
    };
    let mut out = Vec::new();
    for (ei, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let mut vals = Vec::with_capacity(el.props.len());
            for p in &el.props {
                match *p {
                    Property::Scalar(_, t) => vals.push(t.decode(take(t.size(), &el.name)?)),
                    Property::List(n, t) => {
                        let len = n.decode(take(n.size(), &el.name)?) as usize;
                        take(len * t.size(), &el.name)?;
                        vals.push(f64::NAN);
                    }
                }
            }
            if ei == vertex {
                out.push(vals);
            }
        }
        if ei == vertex {
            break;
        }
    }
    Ok(out)
}

/// Binary little-endian PLY with float positions and 8-bit colours.
pub fn write_ply_binary(positions: &[[f32; 3]], colors: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    )
    .into_bytes();
    for (p, c) in positions.iter().zip(colors) {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(c);
    }
    out
}

/// ASCII counterpart of [`write_ply_binary`].
pub fn write_ply_ascii(positions: &[[f32; 3]], colors: &[[u8; 3]]) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    );
    for (p, c) in positions.iter().zip(colors) {
        out.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], c[0], c[1], c[2]));
    }
    out
}
