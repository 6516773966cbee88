//! PLY point clouds with positions and normals.
//!
//! Writes `x y z nx ny nz` as `float` (32-bit) in either ASCII or binary
//! little-endian form. Reading accepts any numeric property type, ignores
//! properties and elements it does not need, and requires all six fields.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{GeometryError, ScenePointCloud, Vec3};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("unsupported PLY format `{0}`")]
    UnsupportedFormat(String),
    #[error("vertex property `{0}` is missing")]
    MissingProperty(&'static str),
    #[error("malformed PLY body: {0}")]
    Body(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
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

const FIELDS: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];

pub fn write_ply<W: Write>(cloud: &ScenePointCloud, format: PlyFormat, out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply")?;
    writeln!(out, "format {fmt} 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for f in FIELDS {
        writeln!(out, "property float {f}")?;
    }
    writeln!(out, "end_header")?;
    for (p, n) in cloud.positions().iter().zip(cloud.normals()) {
        let vals = [p.x, p.y, p.z, n.x, n.y, n.z].map(|v| v as f32);
        match format {
            PlyFormat::Ascii => {
                writeln!(out, "{} {} {} {} {} {}", vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])?
            }
            PlyFormat::BinaryLittleEndian => {
                for v in vals {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()
}

pub fn write_ply_file(cloud: &ScenePointCloud, format: PlyFormat, path: &Path) -> io::Result<()> {
    write_ply(cloud, format, File::create(path)?)
}

pub fn read_ply_file(path: &Path) -> Result<ScenePointCloud, PlyError> {
    read_ply(File::open(path)?)
}

pub fn read_ply<R: Read>(input: R) -> Result<ScenePointCloud, PlyError> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let next_line = |reader: &mut BufReader<R>, line: &mut String| -> Result<bool, PlyError> {
        line.clear();
        Ok(reader.read_line(line)? > 0)
    };

    if !next_line(&mut reader, &mut line)? || line.trim() != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next_line(&mut reader, &mut line)? {
            return Err(PlyError::Header("missing end_header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(PlyError::UnsupportedFormat(other.to_string())),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| PlyError::Header(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                let count = Scalar::parse(count).ok_or_else(|| PlyError::Header(format!("bad type `{count}`")))?;
                let item = Scalar::parse(item).ok_or_else(|| PlyError::Header(format!("bad type `{item}`")))?;
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| PlyError::Header(format!("bad type `{ty}`")))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            other => return Err(PlyError::Header(format!("unrecognized line `{}`", other.join(" ")))),
        }
    }
    let format = format.ok_or_else(|| PlyError::Header("missing format line".into()))?;

    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    let vertex = &elements[vertex_pos];
    let mut slots = [usize::MAX; 6];
    for (slot, field) in slots.iter_mut().zip(FIELDS) {
        *slot = vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar { name, .. } if name == field))
            .ok_or(PlyError::MissingProperty(field))?;
    }

    let mut positions = Vec::with_capacity(vertex.count);
    let mut normals = Vec::with_capacity(vertex.count);
    let mut row = vec![0.0f64; vertex.props.len()];

    match format {
        PlyFormat::Ascii => {
            let mut tokens = AsciiTokens::new(reader);
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    for (pi, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar { .. } => {
                                let v = tokens.next_f64()?;
                                if ei == vertex_pos {
                                    row[pi] = v;
                                }
                            }
                            Property::List { .. } => {
                                let n = tokens.next_f64()? as usize;
                                for _ in 0..n {
                                    tokens.next_f64()?;
                                }
                            }
                        }
                    }
                    if ei == vertex_pos {
                        push_row(&row, &slots, &mut positions, &mut normals);
                    }
                }
                if ei == vertex_pos {
                    break;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    for (pi, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar { ty, .. } => {
                                reader.read_exact(&mut buf[..ty.size()]).map_err(body_err)?;
                                if ei == vertex_pos {
                                    row[pi] = ty.read_le(&buf);
                                }
                            }
                            Property::List { count, item } => {
                                reader.read_exact(&mut buf[..count.size()]).map_err(body_err)?;
                                let n = count.read_le(&buf) as usize;
                                let mut skip = vec![0u8; n * item.size()];
                                reader.read_exact(&mut skip).map_err(body_err)?;
                            }
                        }
                    }
                    if ei == vertex_pos {
                        push_row(&row, &slots, &mut positions, &mut normals);
                    }
                }
                if ei == vertex_pos {
                    break;
                }
            }
        }
    }
    Ok(ScenePointCloud::with_normalized_normals(positions, normals)?)
}

fn body_err(e: io::Error) -> PlyError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        PlyError::Body("file ends before all elements were read".into())
    } else {
        PlyError::Io(e)
    }
}

fn push_row(row: &[f64], slots: &[usize; 6], positions: &mut Vec<Vec3>, normals: &mut Vec<Vec3>) {
    positions.push(Vec3::new(row[slots[0]], row[slots[1]], row[slots[2]]));
    normals.push(Vec3::new(row[slots[3]], row[slots[4]], row[slots[5]]));
}

struct AsciiTokens<R: BufRead> {
    reader: R,
    line: String,
    pending: std::vec::IntoIter<String>,
}

impl<R: BufRead> AsciiTokens<R> {
    fn new(reader: R) -> Self {
        Self {
            reader,
            line: String::new(),
            pending: Vec::new().into_iter(),
        }
    }

    fn next_f64(&mut self) -> Result<f64, PlyError> {
        loop {
            if let Some(tok) = self.pending.next() {
                return tok
                    .parse()
                    .map_err(|_| PlyError::Body(format!("bad number `{tok}`")));
            }
            self.line.clear();
            if self.reader.read_line(&mut self.line)? == 0 {
                return Err(PlyError::Body("file ends before all elements were read".into()));
            }
            self.pending = self
                .line
                .split_whitespace()
                .map(str::to_string)
                .collect::<Vec<_>>()
                .into_iter();
        }
    }
}
