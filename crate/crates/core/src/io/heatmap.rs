//! Density maps as 8-bit grayscale PGM with a plain-text stats sidecar.

use std::path::{Path, PathBuf};

use super::raster::{encode_pgm, Gray8};
use super::write_atomic;
use crate::density::DensityMap;
use crate::error::Result;

/// Raw value range and total of an exported map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapStats {
    pub min: f64,
    pub max: f64,
    pub sum: f64,
}

impl HeatmapStats {
    pub fn of(map: &DensityMap) -> Self {
        let (min, max) = map
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self { min, max, sum: map.sum() }
    }

    pub fn to_text(&self) -> String {
        format!("min {}\nmax {}\nsum {}\n", self.min, self.max, self.sum)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let get = |key: &str| -> Option<f64> {
            text.lines()
                .find_map(|l| l.strip_prefix(key)?.strip_prefix(' ')?.trim().parse().ok())
        };
        Some(Self {
            min: get("min")?,
            max: get("max")?,
            sum: get("sum")?,
        })
    }
}

/// Min-max normalizes to 0..=255; a constant map becomes all zeros.
pub fn normalize(map: &DensityMap) -> Gray8 {
    let HeatmapStats { min, max, .. } = HeatmapStats::of(map);
    let span = max - min;
    let data = map
        .values()
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Gray8 {
        width: map.width(),
        height: map.height(),
        data,
    }
}

/// Path of the stats file written next to a heatmap.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes `path` as PGM and `<path>.txt` with the raw min, max and sum.
pub fn export_heatmap(map: &DensityMap, path: &Path) -> Result<HeatmapStats> {
    let stats = HeatmapStats::of(map);
    write_atomic(path, &encode_pgm(&normalize(map)))?;
    write_atomic(&sidecar_path(path), stats.to_text().as_bytes())?;
    Ok(stats)
}
