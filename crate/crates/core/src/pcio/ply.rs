//! PLY reading and writing (ASCII and binary little-endian).

use super::{PcioError, RawPointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug)]
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

fn malformed(msg: impl Into<String>) -> PcioError {
    PcioError::MalformedHeader(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header, PcioError> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("missing end_header"))?;
    let mut body_offset = end + END.len();
    // the header terminator is followed by a single newline (LF or CRLF)
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("header is not UTF-8"))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(malformed("missing 'ply' magic"));
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(malformed(format!("unsupported format '{other}'"))),
                    None => return Err(malformed("empty format line")),
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| malformed("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| malformed(format!("bad count for element '{name}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                let ty = tok.next().ok_or_else(|| malformed("property without type"))?;
                if ty == "list" {
                    let count = tok.next().and_then(ScalarType::parse);
                    let item = tok.next().and_then(ScalarType::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => el.props.push(Property::List { count, item }),
                        _ => return Err(malformed(format!("bad list property '{line}'"))),
                    }
                } else {
                    let ty = ScalarType::parse(ty)
                        .ok_or_else(|| malformed(format!("unknown property type '{ty}'")))?;
                    let name = tok.next().ok_or_else(|| malformed("property without name"))?;
                    el.props.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some(other) => return Err(malformed(format!("unexpected header keyword '{other}'"))),
            None => {}
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| malformed("missing format line"))?,
        elements,
        body_offset,
    })
}

struct VertexLayout {
    pos: [usize; 3],
    color: [usize; 3],
    types: Vec<ScalarType>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout, PcioError> {
    let mut types = Vec::new();
    let find = |names: &[&str]| -> Option<usize> {
        el.props.iter().position(|p| match p {
            Property::Scalar { name, .. } => names.contains(&name.as_str()),
            _ => false,
        })
    };
    for p in &el.props {
        match p {
            Property::Scalar { ty, .. } => types.push(*ty),
            Property::List { .. } => {
                return Err(malformed("list properties on vertices are not supported"))
            }
        }
    }
    let pos = [find(&["x"]), find(&["y"]), find(&["z"])];
    let color = [
        find(&["red", "r", "diffuse_red"]),
        find(&["green", "g", "diffuse_green"]),
        find(&["blue", "b", "diffuse_blue"]),
    ];
    let axis = ["x", "y", "z"];
    let chan = ["red", "green", "blue"];
    let mut out = VertexLayout {
        pos: [0; 3],
        color: [0; 3],
        types,
    };
    for i in 0..3 {
        out.pos[i] = pos[i].ok_or(PcioError::MissingProperty(axis[i]))?;
        out.color[i] = color[i].ok_or(PcioError::MissingProperty(chan[i]))?;
    }
    Ok(out)
}

fn to_color(v: f64) -> Result<u8, PcioError> {
    let r = v.round();
    if !(0.0..=255.0).contains(&r) {
        return Err(PcioError::InvalidValue(format!("color component {v} outside [0,255]")));
    }
    Ok(r as u8)
}

/// Parse an ASCII or binary little-endian PLY holding x/y/z and red/green/blue.
pub fn parse_ply(bytes: &[u8]) -> Result<RawPointCloud, PcioError> {
    let header = parse_header(bytes)?;
    let vidx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no vertex element"))?;
    let layout = vertex_layout(&header.elements[vidx])?;
    let count = header.elements[vidx].count;
    let body = &bytes[header.body_offset..];

    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut values = vec![0.0f64; layout.types.len()];

    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| PcioError::InvalidValue("ASCII body is not UTF-8".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            // elements preceding the vertices occupy one line per item
            for el in &header.elements[..vidx] {
                for _ in 0..el.count {
                    lines.next().ok_or(PcioError::Truncated)?;
                }
            }
            for _ in 0..count {
                let line = lines.next().ok_or(PcioError::Truncated)?;
                let mut tok = line.split_whitespace();
                for v in values.iter_mut() {
                    let t = tok.next().ok_or(PcioError::Truncated)?;
                    *v = t
                        .parse()
                        .map_err(|_| PcioError::InvalidValue(format!("not a number: '{t}'")))?;
                }
                positions.push(layout.pos.map(|i| values[i]));
                colors.push([
                    to_color(values[layout.color[0]])?,
                    to_color(values[layout.color[1]])?,
                    to_color(values[layout.color[2]])?,
                ]);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut offset = 0usize;
            for el in &header.elements[..vidx] {
                for _ in 0..el.count {
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, .. } => offset += ty.size(),
                            Property::List { count, item } => {
                                let b = body
                                    .get(offset..offset + count.size())
                                    .ok_or(PcioError::Truncated)?;
                                let n = count.read_le(b) as usize;
                                offset += count.size() + n * item.size();
                            }
                        }
                    }
                }
            }
            let stride: usize = layout.types.iter().map(|t| t.size()).sum();
            let needed = offset + stride * count;
            if body.len() < needed {
                return Err(PcioError::Truncated);
            }
            for row in body[offset..needed].chunks_exact(stride) {
                let mut at = 0;
                for (v, ty) in values.iter_mut().zip(&layout.types) {
                    *v = ty.read_le(&row[at..]);
                    at += ty.size();
                }
                positions.push(layout.pos.map(|i| values[i]));
                colors.push([
                    to_color(values[layout.color[0]])?,
                    to_color(values[layout.color[1]])?,
                    to_color(values[layout.color[2]])?,
                ]);
            }
        }
    }
    Ok(RawPointCloud { positions, colors })
}

/// Serialize a cloud. Positions are written as `float` when every coordinate is
/// exactly representable in 32 bits, otherwise as `double`, so binary output
/// parses back to an identical cloud.
pub fn write_ply(pc: &RawPointCloud, format: PlyFormat) -> Vec<u8> {
    let single = pc
        .positions
        .iter()
        .flatten()
        .all(|&v| (v as f32) as f64 == v);
    let ty = if single { "float" } else { "double" };
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty {ty} x\nproperty {ty} y\nproperty {ty} z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    )
    .into_bytes();

    match format {
        PlyFormat::Ascii => {
            use std::fmt::Write;
            let mut s = String::new();
            for (p, c) in pc.positions.iter().zip(&pc.colors) {
                let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
            }
            out.extend_from_slice(s.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            out.reserve(pc.len() * if single { 15 } else { 27 });
            for (p, c) in pc.positions.iter().zip(&pc.colors) {
                for &v in p {
                    if single {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    } else {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                out.extend_from_slice(c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vertex_ascii() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n";
        let pc = parse_ply(src).unwrap();
        assert_eq!(pc.positions, vec![[0.0, 0.0, 0.0]]);
        assert_eq!(pc.colors, vec![[255, 0, 0]]);
        let bin = write_ply(&pc, PlyFormat::BinaryLittleEndian);
        assert_eq!(parse_ply(&bin).unwrap(), pc);
    }

    #[test]
    fn extra_properties_and_faces_are_skipped() {
        let src = b"ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\n\
property float y\nproperty float z\nproperty float nx\nproperty uchar red\nproperty uchar green\n\
property uchar blue\nproperty uchar alpha\nelement face 1\nproperty list uchar int vertex_indices\n\
end_header\n1 2 3 0.5 10 20 30 255\n4 5 6 0.5 40 50 60 255\n3 0 1 1\n";
        let pc = parse_ply(src).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.positions[1], [4.0, 5.0, 6.0]);
        assert_eq!(pc.colors[1], [40, 50, 60]);
    }

    #[test]
    fn missing_color_is_an_error() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
property float z\nend_header\n0 0 0\n";
        assert!(matches!(parse_ply(src), Err(PcioError::MissingProperty("red"))));
    }

    #[test]
    fn truncated_bodies_are_errors() {
        let pc = RawPointCloud {
            positions: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            colors: vec![[1, 2, 3], [4, 5, 6]],
        };
        let bin = write_ply(&pc, PlyFormat::BinaryLittleEndian);
        assert!(matches!(parse_ply(&bin[..bin.len() - 1]), Err(PcioError::Truncated)));
        let ascii = write_ply(&pc, PlyFormat::Ascii);
        let cut = ascii.len() - 8;
        assert!(parse_ply(&ascii[..cut]).is_err());
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(parse_ply(b"plx\nend_header\n"), Err(PcioError::MalformedHeader(_))));
        assert!(matches!(
            parse_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n"),
            Err(PcioError::MalformedHeader(_))
        ));
        assert!(matches!(parse_ply(b"ply\nformat ascii 1.0\n"), Err(PcioError::MalformedHeader(_))));
    }

    #[test]
    fn double_positions_survive_binary() {
        let pc = RawPointCloud {
            positions: vec![[0.1, 1.0 / 3.0, -2.5e10]],
            colors: vec![[9, 8, 7]],
        };
        let bin = write_ply(&pc, PlyFormat::BinaryLittleEndian);
        assert_eq!(parse_ply(&bin).unwrap(), pc);
        let ascii = write_ply(&pc, PlyFormat::Ascii);
        assert_eq!(parse_ply(&ascii).unwrap(), pc);
    }
}
