//! ASCII PLY export of per-point probabilities as a red/blue heatmap, and a
//! strict reader for the same subset of the format.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::Point;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlyError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{points} points but {probs} probabilities")]
    LengthMismatch { points: usize, probs: usize },
}

/// Red channel for probability `p`: `round(255·p)` after clamping to `[0, 1]`.
pub fn heat_color(p: f64) -> [u8; 3] {
    let red = (255.0 * p.clamp(0.0, 1.0)).round() as u8;
    [red, 0, 255 - red]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyVertex {
    pub xyz: [f32; 3],
    pub rgb: [u8; 3],
}

pub fn write_heatmap(points: &[Point], probs: &[f64]) -> Result<String, PlyError> {
    if points.len() != probs.len() {
        return Err(PlyError::LengthMismatch {
            points: points.len(),
            probs: probs.len(),
        });
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    for (p, &prob) in points.iter().zip(probs) {
        let [r, g, b] = heat_color(prob);
        let _ = writeln!(s, "{} {} {} {r} {g} {b}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    Ok(s)
}

const EXPECTED_PROPS: [(&str, &str); 6] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
];

/// Parses an ASCII PLY with exactly one `vertex` element carrying
/// `x y z red green blue`.
pub fn read_heatmap(text: &str) -> Result<Vec<PlyVertex>, PlyError> {
    let err = |line: usize, detail: &str| PlyError::Parse {
        line,
        detail: detail.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("missing {what}")));
    let (n, l) = next("magic")?;
    if l != "ply" {
        return Err(err(n, "expected `ply`"));
    }
    let (n, l) = next("format")?;
    if l != "format ascii 1.0" {
        return Err(err(n, "expected `format ascii 1.0`"));
    }
    let (n, l) = next("element")?;
    let count: usize = l
        .strip_prefix("element vertex ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| err(n, "expected `element vertex <count>`"))?;
    for (ty, name) in EXPECTED_PROPS {
        let (n, l) = next("property")?;
        if l != format!("property {ty} {name}") {
            return Err(err(n, &format!("expected `property {ty} {name}`")));
        }
    }
    let (n, l) = next("end_header")?;
    if l != "end_header" {
        return Err(err(n, "expected `end_header`"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = next("vertex")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(n, "expected 6 values"));
        }
        let mut xyz = [0f32; 3];
        for k in 0..3 {
            xyz[k] = f[k].parse().map_err(|_| err(n, "bad coordinate"))?;
        }
        let mut rgb = [0u8; 3];
        for k in 0..3 {
            rgb[k] = f[3 + k].parse().map_err(|_| err(n, "bad color"))?;
        }
        out.push(PlyVertex { xyz, rgb });
    }
    if let Some((n, l)) = lines.next() {
        if !l.is_empty() {
            return Err(err(n, "unexpected data after the last vertex"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors() {
        assert_eq!(heat_color(0.0), [0, 0, 255]);
        assert_eq!(heat_color(1.0), [255, 0, 0]);
        assert_eq!(heat_color(0.5), [128, 0, 127]);
    }

    #[test]
    fn round_trip() {
        let pts = vec![[0.25, -1.0, 0.5], [1e-3, 2.0, -0.75]];
        let text = write_heatmap(&pts, &[0.0, 0.9]).unwrap();
        let v = read_heatmap(&text).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].rgb, [0, 0, 255]);
        assert_eq!(v[1].xyz, [1e-3, 2.0, -0.75]);
        assert!(read_heatmap(&text.replace("end_header", "end")).is_err());
        assert!(write_heatmap(&pts, &[0.0]).is_err());
    }
}
