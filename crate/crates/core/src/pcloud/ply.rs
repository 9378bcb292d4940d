//! Minimal PLY reader/writer for vertex clouds (ASCII and binary little-endian).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{RawPoint, RawPointCloud, SparseTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    #[default]
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

struct Property {
    name: String,
    ty: Scalar,
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<Property>,
    body_offset: usize,
}

/// Reads a PLY file from disk.
pub fn load_ply(path: impl AsRef<Path>) -> Result<RawPointCloud> {
    read_ply(&fs::read(path)?)
}

/// Parses PLY bytes.
pub fn read_ply(data: &[u8]) -> Result<RawPointCloud> {
    let header = parse_header(data)?;
    let slot = |name: &str| header.properties.iter().position(|p| p.name == name);

    let xyz = ["x", "y", "z"].map(slot);
    let mut xyz_idx = [0usize; 3];
    for (a, idx) in xyz.iter().enumerate() {
        let i = idx.ok_or_else(|| Error::parse(0, format!("vertex has no '{}' property", ["x", "y", "z"][a])))?;
        if !matches!(header.properties[i].ty, Scalar::F32 | Scalar::I32) {
            return Err(Error::parse(
                0,
                format!("property '{}' must be float32 or int32", header.properties[i].name),
            ));
        }
        xyz_idx[a] = i;
    }
    let rgb = ["red", "green", "blue"].map(slot);
    let has_color = match rgb {
        [Some(_), Some(_), Some(_)] => true,
        [None, None, None] => false,
        _ => return Err(Error::parse(0, "partial red/green/blue properties")),
    };
    let rgb_idx = rgb.map(|i| i.unwrap_or(0));
    if has_color {
        for &i in &rgb_idx {
            if header.properties[i].ty != Scalar::U8 {
                return Err(Error::parse(
                    0,
                    format!("color property '{}' must be uint8", header.properties[i].name),
                ));
            }
        }
    }

    let rows = match header.format {
        PlyFormat::Ascii => read_ascii_body(data, &header)?,
        PlyFormat::BinaryLittleEndian => read_binary_body(data, &header)?,
    };
    let points = rows
        .into_iter()
        .map(|row| RawPoint {
            position: xyz_idx.map(|i| row[i]),
            color: if has_color {
                rgb_idx.map(|i| row[i] as u8)
            } else {
                [0; 3]
            },
        })
        .collect();
    Ok(RawPointCloud {
        points,
        has_color,
        bit_depth: None,
    })
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String)> {
        let start = *offset;
        let rest = &data[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start as u64, "unterminated header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(start as u64, "header is not valid text"))?;
        Ok((start, line.trim_end_matches('\r').trim().to_string()))
    };

    let (_, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(Error::parse(0, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut seen_other_element = false;
    loop {
        let (at, line) = next_line(&mut offset)?;
        let at = at as u64;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match (words.next(), words.next()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                    (f, _) => {
                        return Err(Error::parse(at, format!("unsupported format {f:?}")));
                    }
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().unwrap_or_default();
                let count: usize = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(at, "bad element count"))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::parse(at, "duplicate vertex element"));
                    }
                    if seen_other_element {
                        return Err(Error::parse(at, "elements before 'vertex' are not supported"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    in_vertex = false;
                    if vertex_count.is_none() && count > 0 {
                        seen_other_element = true;
                    }
                }
            }
            Some("property") => {
                let ty = words.next().unwrap_or_default();
                if ty == "list" {
                    if in_vertex {
                        return Err(Error::parse(at, "list properties on vertices are not supported"));
                    }
                    continue;
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(at, format!("unsupported property type '{ty}'")))?;
                let name = words
                    .next()
                    .ok_or_else(|| Error::parse(at, "property without a name"))?;
                if in_vertex {
                    properties.push(Property {
                        name: name.to_string(),
                        ty: scalar,
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::parse(at, format!("unexpected header keyword '{other}'")));
            }
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::parse(0, "missing format line"))?,
        vertex_count: vertex_count.ok_or_else(|| Error::parse(0, "missing vertex element"))?,
        properties,
        body_offset: offset,
    })
}

fn read_ascii_body(data: &[u8], header: &Header) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(header.vertex_count);
    let mut offset = header.body_offset;
    while rows.len() < header.vertex_count {
        if offset >= data.len() {
            return Err(Error::parse(
                offset as u64,
                format!("truncated body: {} of {} vertices", rows.len(), header.vertex_count),
            ));
        }
        let rest = &data[offset..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(offset as u64, "body is not valid text"))?;
        let at = offset as u64;
        offset += end + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(at, format!("bad number: {e}")))?;
        if row.len() < header.properties.len() {
            return Err(Error::parse(
                at,
                format!("expected {} values, found {}", header.properties.len(), row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_binary_body(data: &[u8], header: &Header) -> Result<Vec<Vec<f64>>> {
    let stride: usize = header.properties.iter().map(|p| p.ty.size()).sum();
    let mut rows = Vec::with_capacity(header.vertex_count);
    let mut offset = header.body_offset;
    for i in 0..header.vertex_count {
        if offset + stride > data.len() {
            return Err(Error::parse(
                offset as u64,
                format!("truncated body: vertex {i} of {} needs {stride} bytes", header.vertex_count),
            ));
        }
        let mut row = Vec::with_capacity(header.properties.len());
        for p in &header.properties {
            row.push(p.ty.read_le(&data[offset..]));
            offset += p.ty.size();
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Serializes a voxelized cloud with int32 coordinates (offset by `shift`)
/// and, when present, uint8 colors.
pub fn write_ply(cloud: &SparseTensor, shift: [i32; 3], format: PlyFormat) -> Result<Vec<u8>> {
    let has_color = cloud.num_columns() == 3;
    if cloud.has_color() && !has_color {
        return Err(Error::Shape("PLY output needs exactly three color columns".into()));
    }
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty int x\nproperty int y\nproperty int z\n",
        cloud.len()
    )?;
    if has_color {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, c) in cloud.coords().iter().enumerate() {
        let p = [
            c.x as i64 + shift[0] as i64,
            c.y as i64 + shift[1] as i64,
            c.z as i64 + shift[2] as i64,
        ];
        let p = p.map(|v| v as i32);
        match format {
            PlyFormat::Ascii => {
                write!(out, "{} {} {}", p[0], p[1], p[2])?;
                if has_color {
                    let r = cloud.row(i);
                    write!(out, " {} {} {}", r[0], r[1], r[2])?;
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if has_color {
                    out.extend(cloud.row(i).iter().map(|&v| v as u8));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcloud::{voxelize, VoxelCoord};

    const ASCII3: &str = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\n\
property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
0 0 0 10 20 30\n1.5 2 3 40 50 60\n7 7 7 255 0 128\n";

    fn binary3() -> Vec<u8> {
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n\
property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            .to_vec();
        for (p, c) in [
            ([0.0f32, 0.0, 0.0], [10u8, 20, 30]),
            ([1.5, 2.0, 3.0], [40, 50, 60]),
            ([7.0, 7.0, 7.0], [255, 0, 128]),
        ] {
            for v in p {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(&c);
        }
        b
    }

    #[test]
    fn ascii_three_vertices() {
        let pc = read_ply(ASCII3.as_bytes()).unwrap();
        assert_eq!(pc.points.len(), 3);
        assert!(pc.has_color);
        assert_eq!(pc.points[1].position, [1.5, 2.0, 3.0]);
        assert_eq!(pc.points[2].color, [255, 0, 128]);
    }

    #[test]
    fn binary_matches_ascii() {
        assert_eq!(read_ply(&binary3()).unwrap(), read_ply(ASCII3.as_bytes()).unwrap());
    }

    #[test]
    fn empty_vertex_element() {
        let src = "ply\nformat ascii 1.0\nelement vertex 0\nproperty int x\nproperty int y\nproperty int z\nend_header\n";
        let pc = read_ply(src.as_bytes()).unwrap();
        assert!(pc.points.is_empty());
        assert!(pc.is_geometry_only());
    }

    #[test]
    fn missing_color_is_geometry_only() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\nproperty int z\nend_header\n1 2 3\n";
        let pc = read_ply(src.as_bytes()).unwrap();
        assert!(!pc.has_color);
        assert_eq!(pc.points[0].color, [0, 0, 0]);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut b = binary3();
        b.truncate(b.len() - 4);
        let header_len = b.len() - 2 * 15 - 11;
        match read_ply(&b) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset as usize, header_len + 30),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        let cases = [
            "plx\n",
            "ply\nformat binary_big_endian 1.0\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float64 x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty half x\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int idx\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\nproperty int z\nproperty uchar red\nend_header\n0 0 0 1\n",
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty int x\nproperty int y\nproperty int z\nend_header\n0 0 0\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\n",
        ];
        for src in cases {
            assert!(
                matches!(read_ply(src.as_bytes()), Err(Error::Parse { .. })),
                "accepted: {src:?}"
            );
        }
        let bad_line = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\nproperty int z\nend_header\n1 two 3\n";
        match read_ply(bad_line.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset as usize, bad_line.find("1 two").unwrap()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_read_reproduces_tensor() {
        let t = SparseTensor::rgb(
            vec![VoxelCoord::new(0, 1, 2), VoxelCoord::new(3, 0, 0), VoxelCoord::new(3, 4, 5)],
            &[[1, 2, 3], [4, 5, 6], [255, 254, 0]],
        )
        .unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = write_ply(&t, [0; 3], fmt).unwrap();
            assert_eq!(voxelize(&read_ply(&bytes).unwrap(), 4).unwrap(), t);
        }
        let g = SparseTensor::geometry_only(vec![VoxelCoord::new(1, 1, 1)]).unwrap();
        let bytes = write_ply(&g, [0; 3], PlyFormat::Ascii).unwrap();
        assert_eq!(voxelize(&read_ply(&bytes).unwrap(), 4).unwrap(), g);
    }
}
