use std::fs;
use std::path::Path;

use super::{Point3, RawPointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::parse(format!("unknown property type '{other}'"))),
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::parse("missing end_header"))?;
    let mut body_offset = end + END.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) != Some(&b'\n') {
        return Err(Error::parse("end_header must be followed by a newline"));
    }
    body_offset += 1;

    let text =
        std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse("header is not UTF-8"))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::parse("missing 'ply' magic line"));
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "comment" | "obj_info" => {}
            "format" => {
                format = Some(match tok.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => {
                        return Err(Error::parse(format!("unsupported format '{other}'")))
                    }
                    None => return Err(Error::parse("format line missing encoding")),
                });
            }
            "element" => {
                if tok.len() != 3 {
                    return Err(Error::parse(format!("malformed element line '{line}'")));
                }
                let count = tok[2]
                    .parse()
                    .map_err(|_| Error::parse(format!("bad element count '{}'", tok[2])))?;
                elements.push(Element {
                    name: tok[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse("property before any element"))?;
                let prop = if tok.get(1) == Some(&"list") {
                    if tok.len() != 5 {
                        return Err(Error::parse(format!("malformed list property '{line}'")));
                    }
                    Property::List {
                        count: Scalar::parse(tok[2])?,
                        item: Scalar::parse(tok[3])?,
                    }
                } else {
                    if tok.len() != 3 {
                        return Err(Error::parse(format!("malformed property '{line}'")));
                    }
                    Property::Scalar {
                        name: tok[2].to_string(),
                        ty: Scalar::parse(tok[1])?,
                    }
                };
                el.props.push(prop);
            }
            other => return Err(Error::parse(format!("unexpected header keyword '{other}'"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::parse("missing format line"))?,
        elements,
        body_offset,
    })
}

/// Positions of x, y and z within the vertex element's property list.
fn xyz_slots(el: &Element) -> Result<[usize; 3]> {
    let find = |axis: &str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar { name, .. } if name == axis))
            .ok_or_else(|| Error::parse(format!("vertex element has no '{axis}' property")))
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<RawPointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut pc = read_ply_bytes(&bytes)?;
    pc.source_id = path.display().to_string();
    Ok(pc)
}

pub fn read_ply_bytes(bytes: &[u8]) -> Result<RawPointCloud> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse("no vertex element"))?;
    let slots = xyz_slots(&header.elements[vertex_pos])?;
    let body = &bytes[header.body_offset..];

    let points = match header.format {
        PlyFormat::Ascii => read_ascii(body, &header.elements[..=vertex_pos], slots)?,
        PlyFormat::BinaryLittleEndian => read_binary(body, &header.elements[..=vertex_pos], slots)?,
    };
    RawPointCloud::new(points, "ply").map_err(|e| match e {
        Error::InvalidInput(m) => Error::parse(m),
        other => other,
    })
}

fn read_ascii(body: &[u8], elements: &[Element], slots: [usize; 3]) -> Result<Vec<Point3>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::parse("ASCII body is not UTF-8"))?;
    let mut tokens = text.split_ascii_whitespace();
    let mut next = || -> Result<f64> {
        let t = tokens
            .next()
            .ok_or_else(|| Error::parse("unexpected end of ASCII body"))?;
        t.parse::<f64>()
            .map_err(|_| Error::parse(format!("bad number '{t}'")))
    };

    let (vertex, skipped) = elements.split_last().unwrap();
    for el in skipped {
        for _ in 0..el.count {
            for p in &el.props {
                match p {
                    Property::Scalar { .. } => {
                        next()?;
                    }
                    Property::List { .. } => {
                        let n = next()? as usize;
                        for _ in 0..n {
                            next()?;
                        }
                    }
                }
            }
        }
    }

    let mut points = Vec::with_capacity(vertex.count);
    let mut row = vec![0.0; vertex.props.len()];
    for _ in 0..vertex.count {
        for (i, p) in vertex.props.iter().enumerate() {
            row[i] = match p {
                Property::Scalar { .. } => next()?,
                Property::List { .. } => {
                    let n = next()? as usize;
                    for _ in 0..n {
                        next()?;
                    }
                    0.0
                }
            };
        }
        points.push([row[slots[0]], row[slots[1]], row[slots[2]]]);
    }
    Ok(points)
}

fn read_binary(body: &[u8], elements: &[Element], slots: [usize; 3]) -> Result<Vec<Point3>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body
            .get(pos..pos + n)
            .ok_or_else(|| Error::parse("unexpected end of binary body"))?;
        pos += n;
        Ok(s)
    };

    let (vertex, skipped) = elements.split_last().unwrap();
    let mut points = Vec::with_capacity(vertex.count);
    let mut row = vec![0.0; vertex.props.len()];
    for (is_vertex, el) in skipped.iter().map(|e| (false, e)).chain([(true, vertex)]) {
        for _ in 0..el.count {
            for (i, p) in el.props.iter().enumerate() {
                match *p {
                    Property::Scalar { ty, .. } => {
                        let v = ty.read_le(take(ty.size())?);
                        if is_vertex {
                            row[i] = v;
                        }
                    }
                    Property::List { count, item } => {
                        let n = count.read_le(take(count.size())?) as usize;
                        take(n * item.size())?;
                    }
                }
            }
            if is_vertex {
                points.push([row[slots[0]], row[slots[1]], row[slots[2]]]);
            }
        }
    }
    Ok(points)
}

/// Serializes a cloud with `double` x/y/z properties. The ASCII form prints the
/// shortest round-trip representation, so both encodings read back bit-exactly.
pub fn write_ply_bytes(pc: &RawPointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        pc.points.len()
    )
    .into_bytes();
    match format {
        PlyFormat::Ascii => {
            for p in &pc.points {
                out.extend_from_slice(format!("{} {} {}\n", p[0], p[1], p[2]).as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in &pc.points {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, pc: &RawPointCloud, format: PlyFormat) -> Result<()> {
    fs::write(path, write_ply_bytes(pc, format))?;
    Ok(())
}
