//! Binary little-endian PLY, vertex element only.
//!
//! Recognized vertex properties are `float x, y, z`, `uchar red, green, blue`
//! and `float nx, ny, nz`. Any other scalar property is skipped. Colors are
//! mapped to [0, 1] by dividing by 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Domain, PointCloud, COLOR_BIT, NORMAL_BIT};
use crate::error::{Error, Result};

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
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: Scalar,
    offset: usize,
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply_from(&fs::read(path)?)
}

/// Parses a PLY byte buffer. The returned cloud is tagged as an object with
/// the object default grid; callers override both when they know better.
pub fn read_ply_from(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "unterminated header"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::parse(start, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::parse(at, "missing `ply` magic line"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0usize;
    let mut saw_format = false;
    loop {
        let (at, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, ver] => {
                if *fmt != "binary_little_endian" || *ver != "1.0" {
                    return Err(Error::parse(at, format!("unsupported format `{fmt} {ver}`")));
                }
                saw_format = true;
            }
            ["element", name, count] => {
                if vertex_count.is_some() {
                    return Err(Error::parse(at, format!("unsupported element `{name}`")));
                }
                if *name != "vertex" {
                    return Err(Error::parse(at, format!("unsupported element `{name}`")));
                }
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(at, format!("bad element count `{count}`")))?;
                vertex_count = Some(count);
                in_vertex = true;
            }
            ["property", "list", ..] => {
                return Err(Error::parse(at, "list properties are not supported"));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(Error::parse(at, "property outside the vertex element"));
                }
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(at, format!("unknown property type `{ty}`")))?;
                if props.iter().any(|p| p.name == *name) {
                    return Err(Error::parse(at, format!("duplicate property `{name}`")));
                }
                props.push(Property {
                    name: name.to_string(),
                    ty,
                    offset: stride,
                });
                stride += ty.size();
            }
            _ => return Err(Error::parse(at, format!("malformed header line `{line}`"))),
        }
    }
    let header_end = pos;
    if !saw_format {
        return Err(Error::parse(0, "missing format line"));
    }
    let n = vertex_count.ok_or_else(|| Error::parse(header_end, "missing vertex element"))?;
    if n == 0 {
        return Err(Error::EmptyCloud);
    }

    let find = |name: &str, ty: Scalar| -> Result<Option<usize>> {
        match props.iter().find(|p| p.name == name) {
            None => Ok(None),
            Some(p) if p.ty == ty => Ok(Some(p.offset)),
            Some(p) => Err(Error::parse(
                header_end,
                format!("property `{name}` has type {:?}, expected {ty:?}", p.ty),
            )),
        }
    };
    let group = |names: [&str; 3], ty: Scalar| -> Result<Option<[usize; 3]>> {
        let found = [find(names[0], ty)?, find(names[1], ty)?, find(names[2], ty)?];
        match found {
            [Some(a), Some(b), Some(c)] => Ok(Some([a, b, c])),
            [None, None, None] => Ok(None),
            _ => Err(Error::parse(
                header_end,
                format!("incomplete property group {names:?}"),
            )),
        }
    };
    let xyz = group(["x", "y", "z"], Scalar::F32)?
        .ok_or_else(|| Error::parse(header_end, "missing float x/y/z properties"))?;
    let rgb = group(["red", "green", "blue"], Scalar::U8)?;
    let nrm = group(["nx", "ny", "nz"], Scalar::F32)?;

    let payload = &bytes[header_end..];
    let needed = n
        .checked_mul(stride)
        .ok_or_else(|| Error::parse(header_end, "vertex count overflows"))?;
    if payload.len() < needed {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: {} of {needed} vertex bytes", payload.len()),
        ));
    }

    let f32_at = |off: usize| -> Result<f64> {
        let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
        if v.is_finite() {
            Ok(v as f64)
        } else {
            Err(Error::parse(header_end + off, "non-finite value"))
        }
    };
    let mut pc = PointCloud::new(Vec::with_capacity(n), Domain::Object, Domain::Object.default_native_grid());
    pc.colors.reserve(n);
    pc.normals.reserve(n);
    for i in 0..n {
        let row = i * stride;
        pc.coords.push([f32_at(row + xyz[0])?, f32_at(row + xyz[1])?, f32_at(row + xyz[2])?]);
        let mut m = 0u8;
        match rgb {
            Some(o) => {
                pc.colors.push(o.map(|k| payload[row + k] as f64 / 255.0));
                m |= COLOR_BIT;
            }
            None => pc.colors.push([0.0; 3]),
        }
        match nrm {
            Some(o) => {
                pc.normals.push([f32_at(row + o[0])?, f32_at(row + o[1])?, f32_at(row + o[2])?]);
                m |= NORMAL_BIT;
            }
            None => pc.normals.push([0.0; 3]),
        }
        pc.mask.push(m);
    }
    Ok(pc)
}

/// Writes coordinates, colors (as u8) and normals. Color and normal
/// properties are emitted only when at least one point carries them; absent
/// rows are written as zeros.
pub fn write_ply(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_ply_to(pc, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_ply_to(pc: &PointCloud, out: &mut impl Write) -> Result<()> {
    let with_color = pc.any_color();
    let with_normal = pc.any_normal();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", pc.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_color {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if with_normal {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    for i in 0..pc.len() {
        for v in pc.coords[i] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        if with_color {
            let rgb = pc.colors[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
            out.write_all(&rgb)?;
        }
        if with_normal {
            for v in pc.normals[i] {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}
