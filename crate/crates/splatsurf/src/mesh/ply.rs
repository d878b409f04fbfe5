//! PLY triangle-mesh io, ASCII and binary little-endian.
//!
//! Vertices are written as double-precision x/y/z so the binary form
//! round-trips bit-exactly; ASCII uses Rust's shortest round-trip float
//! formatting, which is also lossless. The reader handles both formats and
//! tolerates (skips) per-vertex nx/ny/nz normals.

use std::io::{BufRead, Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

use super::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("vertex index {index} out of range ({n_vertices} vertices)")]
    IndexOutOfRange { index: u32, n_vertices: usize },
}

fn bad(line: usize, reason: impl Into<String>) -> PlyError {
    PlyError::Malformed {
        line,
        reason: reason.into(),
    }
}

pub fn write_ply<W: Write>(mesh: &Mesh, format: PlyFormat, out: &mut W) -> std::io::Result<()> {
    let fmt_line = match format {
        PlyFormat::Ascii => "format ascii 1.0",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0",
    };
    writeln!(out, "ply")?;
    writeln!(out, "{}", fmt_line)?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar uint vertex_indices")?;
    writeln!(out, "end_header")?;
    match format {
        PlyFormat::Ascii => {
            for v in &mesh.vertices {
                writeln!(out, "{} {} {}", v.x, v.y, v.z)?;
            }
            for t in &mesh.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for v in &mesh.vertices {
                out.write_all(&v.x.to_le_bytes())?;
                out.write_all(&v.y.to_le_bytes())?;
                out.write_all(&v.z.to_le_bytes())?;
            }
            for t in &mesh.triangles {
                out.write_all(&[3u8])?;
                for &i in t {
                    out.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        match name {
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            _ => None,
        }
    }

    fn read_binary<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::F32 => {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                f32::from_le_bytes(b) as f64
            }
            Scalar::F64 => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                f64::from_le_bytes(b)
            }
        })
    }
}

struct Header {
    format: PlyFormat,
    n_vertices: usize,
    n_faces: usize,
    /// Per vertex property: scalar type and whether it is x/y/z (0..3) or
    /// skipped.
    vertex_props: Vec<(Scalar, Option<usize>)>,
    header_lines: usize,
}

fn parse_header(lines: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<Header, PlyError> {
    let mut line_no = 0usize;
    let mut next =
        |line_no: &mut usize| -> Result<String, PlyError> {
            *line_no += 1;
            match lines.next() {
                Some(Ok(l)) => Ok(l.trim_end_matches('\r').to_string()),
                Some(Err(e)) => Err(PlyError::Io(e)),
                None => Err(bad(*line_no, "unexpected end of header")),
            }
        };
    if next(&mut line_no)? != "ply" {
        return Err(bad(1, "missing ply magic"));
    }
    let mut format = None;
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props: Vec<(Scalar, Option<usize>)> = Vec::new();
    let mut face_list_seen = false;
    let mut current: Option<&'static str> = None;
    loop {
        let line = next(&mut line_no)?;
        let mut toks = line.split_whitespace();
        let Some(head) = toks.next() else { continue };
        match head {
            "comment" | "obj_info" => {}
            "format" => {
                let f = toks.next().ok_or_else(|| bad(line_no, "format needs a name"))?;
                format = Some(match f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(PlyError::Unsupported(format!("format {}", other))),
                });
            }
            "element" => {
                let name = toks.next().ok_or_else(|| bad(line_no, "element needs a name"))?;
                let count: usize = toks
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad(line_no, "element needs a count"))?;
                current = match name {
                    "vertex" => {
                        n_vertices = Some(count);
                        Some("vertex")
                    }
                    "face" => {
                        n_faces = Some(count);
                        Some("face")
                    }
                    other => {
                        return Err(PlyError::Unsupported(format!("element {}", other)));
                    }
                };
            }
            "property" => match current {
                Some("vertex") => {
                    let ty = toks.next().ok_or_else(|| bad(line_no, "property needs a type"))?;
                    let name = toks.next().ok_or_else(|| bad(line_no, "property needs a name"))?;
                    let scalar = Scalar::parse(ty).ok_or_else(|| {
                        PlyError::Unsupported(format!("vertex property type {}", ty))
                    })?;
                    let slot = match name {
                        "x" => Some(0),
                        "y" => Some(1),
                        "z" => Some(2),
                        "nx" | "ny" | "nz" => None,
                        other => {
                            return Err(PlyError::Unsupported(format!(
                                "vertex property {}",
                                other
                            )))
                        }
                    };
                    vertex_props.push((scalar, slot));
                }
                Some("face") => {
                    let kind = toks.next().ok_or_else(|| bad(line_no, "property needs a type"))?;
                    if kind != "list" {
                        return Err(PlyError::Unsupported("non-list face property".into()));
                    }
                    let count_ty = toks.next().unwrap_or("");
                    let index_ty = toks.next().unwrap_or("");
                    if !matches!(count_ty, "uchar" | "uint8") {
                        return Err(PlyError::Unsupported(format!(
                            "face list count type {}",
                            count_ty
                        )));
                    }
                    if !matches!(index_ty, "uint" | "int" | "uint32" | "int32") {
                        return Err(PlyError::Unsupported(format!(
                            "face list index type {}",
                            index_ty
                        )));
                    }
                    face_list_seen = true;
                }
                _ => return Err(bad(line_no, "property outside an element")),
            },
            "end_header" => break,
            other => return Err(bad(line_no, format!("unknown keyword {}", other))),
        }
    }
    let format = format.ok_or_else(|| bad(line_no, "no format line"))?;
    let n_vertices = n_vertices.ok_or_else(|| bad(line_no, "no vertex element"))?;
    let n_faces = n_faces.unwrap_or(0);
    if n_faces > 0 && !face_list_seen {
        return Err(bad(line_no, "face element without a list property"));
    }
    let slots: Vec<usize> = vertex_props.iter().filter_map(|p| p.1).collect();
    if slots != [0, 1, 2] {
        return Err(PlyError::Unsupported(
            "vertex element must carry x, y, z in order".into(),
        ));
    }
    Ok(Header {
        format,
        n_vertices,
        n_faces,
        vertex_props,
        header_lines: line_no,
    })
}

pub fn read_ply<R: BufRead>(r: &mut R) -> Result<Mesh, PlyError> {
    // The header is always ASCII lines; read it byte-wise so the binary body
    // that follows stays intact.
    let mut header_bytes = Vec::new();
    loop {
        let mut line = Vec::new();
        let n = read_until_nl(r, &mut line)?;
        if n == 0 {
            return Err(bad(0, "unexpected end of file in header"));
        }
        header_bytes.extend_from_slice(&line);
        if line.starts_with(b"end_header") {
            break;
        }
        if header_bytes.len() > 64 * 1024 {
            return Err(bad(0, "header too large"));
        }
    }
    let text = String::from_utf8(header_bytes)
        .map_err(|_| bad(0, "header is not utf-8"))?;
    let mut lines = text.lines().map(|l| Ok(l.to_string()));
    let header = parse_header(&mut lines)?;

    let mut mesh = Mesh::default();
    match header.format {
        PlyFormat::Ascii => {
            let mut line_no = header.header_lines;
            let read_line = |r: &mut R, line_no: &mut usize| -> Result<String, PlyError> {
                *line_no += 1;
                let mut s = String::new();
                if r.read_line(&mut s)? == 0 {
                    return Err(bad(*line_no, "unexpected end of file"));
                }
                Ok(s)
            };
            for _ in 0..header.n_vertices {
                let line = read_line(r, &mut line_no)?;
                let mut vals = line.split_whitespace();
                let mut v = Vector3::zeros();
                for &(_, slot) in &header.vertex_props {
                    let tok = vals
                        .next()
                        .ok_or_else(|| bad(line_no, "missing vertex value"))?;
                    let x: f64 = tok
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad number {:?}", tok)))?;
                    if let Some(s) = slot {
                        v[s] = x;
                    }
                }
                mesh.vertices.push(v);
            }
            for _ in 0..header.n_faces {
                let line = read_line(r, &mut line_no)?;
                let mut vals = line.split_whitespace();
                let count: usize = vals
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(line_no, "missing face list count"))?;
                if count != 3 {
                    return Err(PlyError::Unsupported(format!("{}-gon face", count)));
                }
                let mut tri = [0u32; 3];
                for slot in tri.iter_mut() {
                    let tok = vals
                        .next()
                        .ok_or_else(|| bad(line_no, "missing face index"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad index {:?}", tok)))?;
                }
                mesh.triangles.push(tri);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for _ in 0..header.n_vertices {
                let mut v = Vector3::zeros();
                for &(scalar, slot) in &header.vertex_props {
                    let x = scalar.read_binary(r)?;
                    if let Some(s) = slot {
                        v[s] = x;
                    }
                }
                mesh.vertices.push(v);
            }
            for _ in 0..header.n_faces {
                let mut count = [0u8; 1];
                r.read_exact(&mut count)?;
                if count[0] != 3 {
                    return Err(PlyError::Unsupported(format!("{}-gon face", count[0])));
                }
                let mut tri = [0u32; 3];
                for slot in tri.iter_mut() {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    *slot = u32::from_le_bytes(b);
                }
                mesh.triangles.push(tri);
            }
        }
    }
    let n = mesh.vertices.len();
    for t in &mesh.triangles {
        for &i in t {
            if i as usize >= n {
                return Err(PlyError::IndexOutOfRange {
                    index: i,
                    n_vertices: n,
                });
            }
        }
    }
    Ok(mesh)
}

/// Like `read_until(b'\n')` but bounded, so corrupt headers cannot balloon.
fn read_until_nl<R: BufRead>(r: &mut R, out: &mut Vec<u8>) -> std::io::Result<usize> {
    let mut byte = [0u8; 1];
    let mut n = 0usize;
    loop {
        match r.read(&mut byte)? {
            0 => return Ok(n),
            _ => {
                n += 1;
                out.push(byte[0]);
                if byte[0] == b'\n' || n > 4096 {
                    return Ok(n);
                }
            }
        }
    }
}
