//! Minimal PLY export/import for point clouds: `float` x/y/z vertices with
//! optional `uchar` RGB, in ASCII or binary little-endian form. Coordinates
//! are stored as `f32`, so a write/read round trip is exact only to single
//! precision.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::geometry::Point3;
use crate::pointcloud::{CloudError, PointCloud};

/// On-disk encodings supported by [`write_ply`] and [`read_ply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

/// Writes `cloud` to `path`. Colour properties are emitted only when the
/// cloud carries colours.
pub fn write_ply(
    cloud: &PointCloud,
    path: &Path,
    encoding: PlyEncoding,
) -> Result<(), CloudError> {
    if let Some(colors) = &cloud.colors {
        if colors.len() != cloud.points.len() {
            return Err(CloudError::LabelMismatch {
                labels: colors.len(),
                points: cloud.points.len(),
            });
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);

    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(w, "ply\nformat {format} 1.0\n")?;
    write!(w, "element vertex {}\n", cloud.points.len())?;
    write!(w, "property float x\nproperty float y\nproperty float z\n")?;
    if cloud.colors.is_some() {
        write!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\n")?;
    }
    write!(w, "end_header\n")?;

    match encoding {
        PlyEncoding::Ascii => {
            for (i, p) in cloud.points.iter().enumerate() {
                write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
                if let Some(colors) = &cloud.colors {
                    let [r, g, b] = colors[i];
                    write!(w, " {r} {g} {b}")?;
                }
                w.write_all(b"\n")?;
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for (i, p) in cloud.points.iter().enumerate() {
                for c in [p.x as f32, p.y as f32, p.z as f32] {
                    w.write_all(&c.to_le_bytes())?;
                }
                if let Some(colors) = &cloud.colors {
                    w.write_all(&colors[i])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a PLY file previously produced by [`write_ply`] (or an equivalent
/// subset: vertex-only, float coordinates, optional uchar RGB).
pub fn read_ply(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = std::fs::read(path)?;
    let (header, body_offset) = split_header(&bytes)?;
    let mut lines = header.lines();

    if lines.next().map(str::trim) != Some("ply") {
        return Err(CloudError::MalformedPly("missing 'ply' magic".into()));
    }
    let format_line = lines
        .next()
        .ok_or_else(|| CloudError::MalformedPly("missing format line".into()))?;
    let encoding = match format_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["format", "ascii", "1.0"] => PlyEncoding::Ascii,
        ["format", "binary_little_endian", "1.0"] => PlyEncoding::BinaryLittleEndian,
        ["format", other, ..] => {
            return Err(CloudError::UnsupportedEncoding(other.to_string()));
        }
        _ => return Err(CloudError::MalformedPly(format!("bad format line: {format_line}"))),
    };

    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        let line = line.trim();
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] | ["comment", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| {
                    CloudError::MalformedPly(format!("bad vertex count: {n}"))
                })?);
            }
            ["element", kind, _] => {
                return Err(CloudError::MalformedPly(format!("unsupported element: {kind}")));
            }
            ["property", ty, name] => {
                let ok = match *name {
                    "x" | "y" | "z" => matches!(*ty, "float" | "float32"),
                    "red" | "green" | "blue" => matches!(*ty, "uchar" | "uint8"),
                    _ => false,
                };
                if !ok {
                    return Err(CloudError::MalformedPly(format!(
                        "unsupported property: {ty} {name}"
                    )));
                }
                props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(CloudError::MalformedPly(format!("bad header line: {line}"))),
        }
    }
    let n = vertex_count
        .ok_or_else(|| CloudError::MalformedPly("missing vertex element".into()))?;
    let has_colors = match props.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "red", "green", "blue"] => true,
        _ => {
            return Err(CloudError::MalformedPly(format!(
                "unexpected property layout: {props:?}"
            )))
        }
    };

    let body = &bytes[body_offset..];
    let mut points = Vec::with_capacity(n);
    let mut colors = if has_colors { Some(Vec::with_capacity(n)) } else { None };

    match encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| CloudError::MalformedPly("non-UTF8 ascii body".into()))?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            for i in 0..n {
                let row = rows
                    .next()
                    .ok_or_else(|| CloudError::MalformedPly(format!("missing vertex {i}")))?;
                let fields: Vec<&str> = row.split_whitespace().collect();
                let expect = if has_colors { 6 } else { 3 };
                if fields.len() != expect {
                    return Err(CloudError::MalformedPly(format!(
                        "vertex {i}: expected {expect} fields, got {}",
                        fields.len()
                    )));
                }
                let coord = |s: &str| -> Result<f32, CloudError> {
                    s.parse::<f32>()
                        .map_err(|_| CloudError::MalformedPly(format!("bad float: {s}")))
                };
                points.push(Point3::new(
                    coord(fields[0])? as f64,
                    coord(fields[1])? as f64,
                    coord(fields[2])? as f64,
                ));
                if let Some(colors) = colors.as_mut() {
                    let chan = |s: &str| -> Result<u8, CloudError> {
                        s.parse::<u8>()
                            .map_err(|_| CloudError::MalformedPly(format!("bad channel: {s}")))
                    };
                    colors.push([chan(fields[3])?, chan(fields[4])?, chan(fields[5])?]);
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride = 12 + if has_colors { 3 } else { 0 };
            if body.len() < n * stride {
                return Err(CloudError::MalformedPly(format!(
                    "body too short: {} bytes for {} vertices",
                    body.len(),
                    n
                )));
            }
            for i in 0..n {
                let at = i * stride;
                let f = |off: usize| {
                    f32::from_le_bytes(body[at + off..at + off + 4].try_into().unwrap())
                };
                points.push(Point3::new(f(0) as f64, f(4) as f64, f(8) as f64));
                if let Some(colors) = colors.as_mut() {
                    colors.push([body[at + 12], body[at + 13], body[at + 14]]);
                }
            }
        }
    }
    Ok(PointCloud { points, colors })
}

/// Locates `end_header` and returns the header text together with the byte
/// offset where the body starts.
fn split_header(bytes: &[u8]) -> Result<(&str, usize), CloudError> {
    const MARKER: &[u8] = b"end_header\n";
    let pos = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| CloudError::MalformedPly("missing end_header".into()))?;
    let end = pos + MARKER.len();
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| CloudError::MalformedPly("non-UTF8 header".into()))?;
    Ok((header, end))
}
