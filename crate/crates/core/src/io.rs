//! Plain-text exports: ASCII PLY and CSV point clouds, CSV height grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geometry::{DeformationField, Point3, PointCloud};
use crate::{Error, Result};

/// ASCII PLY with `float` (32-bit) x/y/z vertex properties.
pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32 + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    out
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let bad = |detail: &str| Error::format("PLY", detail);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic line"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, _] if *fmt != "ascii" => return Err(bad("only ASCII PLY is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["property", _, name] => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(bad("expected x, y, z vertex properties"));
    }
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let mut it = line.split_whitespace().map(|w| w.parse::<f32>());
        let mut p = [0.0; 3];
        for v in &mut p {
            *v = it
                .next()
                .ok_or_else(|| bad("short vertex line"))?
                .map_err(|_| bad("bad coordinate"))? as f64;
        }
        points.push(p);
    }
    if points.len() != count {
        return Err(bad("fewer vertices than declared"));
    }
    PointCloud::new(points).map_err(Into::into)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text)
}

pub fn cloud_csv_string(cloud: &PointCloud) -> String {
    let mut out = String::from("x_mm,y_mm,z_mm\n");
    for p in cloud.points() {
        let _ = writeln!(out, "{},{},{}", p[0], p[1], p[2]);
    }
    out
}

pub fn parse_cloud_csv(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x_mm,y_mm,z_mm") {
        return Err(Error::format("point CSV", "missing x_mm,y_mm,z_mm header"));
    }
    let points = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|w| w.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("point CSV", e.to_string()))?;
            match v.as_slice() {
                [x, y, z] => Ok([*x, *y, *z]),
                _ => Err(Error::format("point CSV", format!("expected 3 columns in `{l}`"))),
            }
        })
        .collect::<Result<Vec<Point3>>>()?;
    PointCloud::new(points).map_err(Into::into)
}

/// Heights as a row-major CSV grid with the north-west corner first.
pub fn field_csv_string(field: &DeformationField) -> String {
    let g = field.grid();
    let mut out = String::new();
    for r in (0..g).rev() {
        for c in 0..g {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", field.height(r, c));
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DeformationField, FieldConfig};

    #[test]
    fn ply_round_trip_at_f32_precision() {
        let cloud = PointCloud::new(vec![[0.1, 2.5, -3.25], [140.0, 0.0, 1e-3]]).unwrap();
        let text = ply_string(&cloud);
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"));
        let back = parse_ply(&text).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let cloud = PointCloud::new(vec![[0.1, 2.5, -3.25], [1.0, 2.0, 3.0]]).unwrap();
        let text = cloud_csv_string(&cloud);
        assert!(text.starts_with("x_mm,y_mm,z_mm\n"));
        assert_eq!(parse_cloud_csv(&text).unwrap(), cloud);
    }

    #[test]
    fn field_csv_starts_at_north_west() {
        let cfg = FieldConfig::with_grid(3);
        let heights = [0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, -2.0, 0.0];
        let f = DeformationField::from_heights(&cfg, crate::geometry::Boundary::ClampedAllSides, &heights).unwrap();
        let csv = field_csv_string(&f);
        assert_eq!(csv.lines().next().unwrap(), "0,-2,0");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn malformed_ply_is_rejected() {
        assert!(parse_ply("plyx\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").is_err());
    }
}
