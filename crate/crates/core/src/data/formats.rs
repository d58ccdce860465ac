use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{Point, PointCloud};
use crate::{Error, Result};

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        detail: detail.into(),
    }
}

/// Non-empty lines with `#` comments removed, numbered from 1.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_point(line: usize, fields: &[&str]) -> Result<Point> {
    if fields.len() < 3 {
        return Err(parse_err(
            line,
            format!("expected 3 coordinates, found {}", fields.len()),
        ));
    }
    let mut p = [0.0; 3];
    for (v, f) in p.iter_mut().zip(fields) {
        *v = f
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("`{f}` is not a number")))?;
        if !v.is_finite() {
            return Err(parse_err(line, format!("`{f}` is not finite")));
        }
    }
    Ok(p)
}

fn finish(points: Vec<Point>, what: &'static str) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::Empty(what));
    }
    PointCloud::new(points)
}

/// Vertices of an OFF file. The `OFF` keyword is optional and may be fused
/// with the counts (`OFF3 0 0`); faces are ignored.
pub fn parse_off(text: &str) -> Result<PointCloud> {
    let mut lines = content_lines(text);
    let last_line = text.lines().count().max(1);
    let (mut ln, mut first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty OFF input"))?;
    if let Some(rest) = first.strip_prefix("OFF") {
        let rest = rest.trim();
        if rest.is_empty() {
            (ln, first) = lines
                .next()
                .ok_or_else(|| parse_err(last_line, "missing vertex/face/edge counts"))?;
        } else {
            first = rest;
        }
    } else if first.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return Err(parse_err(ln, format!("unrecognised header `{first}`")));
    }
    let counts: Vec<&str> = first.split_whitespace().collect();
    if counts.len() != 3 {
        return Err(parse_err(
            ln,
            format!("expected `V F E` counts, found `{first}`"),
        ));
    }
    let mut n = [0usize; 3];
    for (v, f) in n.iter_mut().zip(&counts) {
        *v = f
            .parse()
            .map_err(|_| parse_err(ln, format!("count `{f}` is not a non-negative integer")))?;
    }
    let vertices = n[0];
    let mut pts = Vec::with_capacity(vertices);
    for _ in 0..vertices {
        let Some((ln, l)) = lines.next() else {
            return Err(parse_err(
                last_line,
                format!(
                    "expected {vertices} vertices, input ends after {}",
                    pts.len()
                ),
            ));
        };
        let fields: Vec<&str> = l.split_whitespace().collect();
        pts.push(parse_point(ln, &fields)?);
    }
    finish(pts, "OFF vertex list")
}

/// Whitespace-separated `x y z [extra...]` per line; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (ln, l) in content_lines(text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        pts.push(parse_point(ln, &fields)?);
    }
    finish(pts, "XYZ point list")
}

/// Vertex positions of an ASCII PLY file (`element vertex` with `x`, `y`,
/// `z` properties); other elements are skipped.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    let mut end = None;
    for (ln, l) in lines.by_ref() {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => {
                return Err(parse_err(ln, format!("unsupported PLY format `{other}`")))
            }
            ["element", name, count] => {
                let c = count
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad element count `{count}`")))?;
                elements.push((String::from(*name), c, Vec::new()));
            }
            ["property", "list", ..] => match elements.last_mut() {
                Some(e) => e.2.push(String::from("list")),
                None => return Err(parse_err(ln, "property before any element")),
            },
            ["property", _, name] => match elements.last_mut() {
                Some(e) => e.2.push(String::from(*name)),
                None => return Err(parse_err(ln, "property before any element")),
            },
            ["end_header"] => {
                end = Some(ln);
                break;
            }
            _ => return Err(parse_err(ln, format!("unrecognised header line `{l}`"))),
        }
    }
    let header_end =
        end.ok_or_else(|| parse_err(text.lines().count().max(1), "missing `end_header`"))?;
    if !ascii {
        return Err(parse_err(header_end, "missing `format ascii 1.0`"));
    }
    let mut pts = Vec::new();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for (name, count, props) in &elements {
        if name != "vertex" {
            if pts.is_empty() {
                // elements before the vertices: skip their rows
                for _ in 0..*count {
                    body.next()
                        .ok_or_else(|| parse_err(header_end, format!("missing `{name}` rows")))?;
                }
                continue;
            }
            break;
        }
        let idx: Vec<usize> = ["x", "y", "z"]
            .iter()
            .map(|a| {
                props
                    .iter()
                    .position(|p| p == a)
                    .ok_or_else(|| parse_err(header_end, format!("vertex has no `{a}`")))
            })
            .collect::<Result<_>>()?;
        for i in 0..*count {
            let Some((ln, l)) = body.next() else {
                return Err(parse_err(
                    text.lines().count(),
                    format!("expected {count} vertices, input ends after {i}"),
                ));
            };
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() < props.len() {
                return Err(parse_err(
                    ln,
                    format!("expected {} values, found {}", props.len(), f.len()),
                ));
            }
            pts.push(parse_point(ln, &[f[idx[0]], f[idx[1]], f[idx[2]]])?);
        }
    }
    finish(pts, "PLY vertex list")
}

/// Picks a parser from a file extension (`off`, `xyz`/`txt`/`pts`, `ply`).
pub fn parse_by_extension(ext: &str, text: &str) -> Result<PointCloud> {
    match ext.to_ascii_lowercase().as_str() {
        "off" => parse_off(text),
        "xyz" | "txt" | "pts" => parse_xyz(text),
        "ply" => parse_ply(text),
        other => Err(Error::invalid(
            "point file",
            format!("unsupported extension `{other}`"),
        )),
    }
}

/// ASCII PLY with `double` x/y/z properties. Coordinates are printed with
/// the shortest representation that parses back to the same `f64`.
pub fn to_ply(points: &[Point]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(64 + points.len() * 48);
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}
