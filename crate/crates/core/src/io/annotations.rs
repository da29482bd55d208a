//! CSV dot annotations: one `x,y` pair per line, `#` starts a comment.

use std::fmt::Write as _;

use crate::density::Point;
use crate::error::{Error, Result};

pub fn parse_csv(text: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Load(format!("line {}: expected `x,y`, got `{}`", i + 1, raw.trim()));
        let (x, y) = line.split_once(',').ok_or_else(bad)?;
        let x: f64 = x.trim().parse().map_err(|_| bad())?;
        let y: f64 = y.trim().parse().map_err(|_| bad())?;
        points.push(Point { x, y });
    }
    Ok(points)
}

/// Shortest round-trip float formatting, so parsing gives back the same bits.
pub fn format_csv(points: &[Point]) -> String {
    let mut out = String::from("# x,y\n");
    for p in points {
        writeln!(out, "{},{}", p.x, p.y).unwrap();
    }
    out
}
