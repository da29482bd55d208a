//! Ground-truth density maps built from dot annotations.
//!
//! Every dot contributes exactly one unit of mass: the Gaussian stamp is
//! truncated at the image border and renormalized per dot, and resolution
//! changes are block sums, so counts are preserved at every scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale of a map relative to its source image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resolution {
    Full,
    Half,
    #[default]
    Quarter,
    Eighth,
}

impl Resolution {
    pub const ALL: [Resolution; 4] = [
        Resolution::Full,
        Resolution::Half,
        Resolution::Quarter,
        Resolution::Eighth,
    ];

    /// Source pixels per map pixel along each axis.
    pub fn divisor(self) -> usize {
        match self {
            Resolution::Full => 1,
            Resolution::Half => 2,
            Resolution::Quarter => 4,
            Resolution::Eighth => 8,
        }
    }

    pub fn from_divisor(divisor: usize) -> Result<Self> {
        match divisor {
            1 => Ok(Resolution::Full),
            2 => Ok(Resolution::Half),
            4 => Ok(Resolution::Quarter),
            8 => Ok(Resolution::Eighth),
            d => Err(Error::config(format!(
                "resolution 1/{d} is not one of 1, 1/2, 1/4, 1/8"
            ))),
        }
    }

    /// Number of 2x2 pooling steps that reach this resolution.
    pub fn halvings(self) -> usize {
        self.divisor().trailing_zeros() as usize
    }

    fn coarsened(self, factor: usize) -> Result<Self> {
        Self::from_divisor(self.divisor() * factor)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.divisor() {
            1 => write!(f, "1"),
            d => write!(f, "1/{d}"),
        }
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let divisor = match s.split_once('/') {
            Some((num, den)) if num.trim() == "1" => den.trim().parse::<usize>().ok(),
            Some(_) => None,
            None if s == "1" => Some(1),
            None => s
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0)
                .map(|v| (1.0 / v).round() as usize),
        };
        divisor
            .ok_or_else(|| Error::config(format!("cannot parse resolution {s:?}")))
            .and_then(Self::from_divisor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Sub-pixel head locations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotations {
    pub points: Vec<Point>,
    pub width: usize,
    pub height: usize,
}

impl DotAnnotations {
    pub fn new(points: Vec<Point>, width: usize, height: usize) -> Result<Self> {
        let ann = Self {
            points,
            width,
            height,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "image extent {}x{} must be positive",
                self.width, self.height
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            let inside = p.x >= 0.0
                && p.y >= 0.0
                && p.x < self.width as f64
                && p.y < self.height as f64;
            if !inside {
                return Err(Error::Validation(format!(
                    "point {i} at ({}, {}) lies outside the {}x{} image",
                    p.x, p.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Pixel `(row, col)` a point is assigned to: half-up rounding, clamped
    /// to the last row/column.
    fn cell(&self, p: Point) -> (usize, usize) {
        let row = ((p.y + 0.5).floor() as usize).min(self.height - 1);
        let col = ((p.x + 0.5).floor() as usize).min(self.width - 1);
        (row, col)
    }
}

/// 2-D map whose element sum is a (predicted or true) person count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    resolution: Resolution,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            resolution,
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>, resolution: Resolution) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "{} values do not fill a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            resolution,
        })
    }

    /// Wraps a `[1, H, W]` (or `[H, W]`) tensor.
    pub fn from_tensor(t: &Tensor, resolution: Resolution) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => {
                return Err(Error::shape(format!(
                    "density map tensor must be [1, H, W], got {s:?}"
                )))
            }
        };
        Self::new(h, w, t.data().to_vec(), resolution)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone())
            .expect("map dimensions are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in top..top + height {
            values.extend_from_slice(&self.values[r * self.width + left..r * self.width + left + width]);
        }
        Self::new(height, width, values, self.resolution)
    }
}

/// Binary map with one unit per annotated point (coincident points add up).
pub fn rasterize(ann: &DotAnnotations) -> Result<DensityMap> {
    ann.validate()?;
    let mut map = DensityMap::zeros(ann.height, ann.width, Resolution::Full);
    for &p in &ann.points {
        let (r, c) = ann.cell(p);
        map.values[r * ann.width + c] += 1.0;
    }
    Ok(map)
}

/// Stamp radius used for a given standard deviation: `ceil(4 sigma)`.
pub fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Full-resolution density: a discrete Gaussian of standard deviation
/// `sigma` (radius `ceil(4 sigma)`) around each dot's pixel, truncated at
/// the border and rescaled so every dot contributes exactly 1.
pub fn gaussian_density(ann: &DotAnnotations, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    ann.validate()?;
    let radius = kernel_radius(sigma) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let (h, w) = (ann.height as isize, ann.width as isize);
    let mut map = DensityMap::zeros(ann.height, ann.width, Resolution::Full);
    for &p in &ann.points {
        let (row, col) = ann.cell(p);
        let (row, col) = (row as isize, col as isize);
        let r0 = (row - radius).max(0);
        let r1 = (row + radius).min(h - 1);
        let c0 = (col - radius).max(0);
        let c1 = (col + radius).min(w - 1);
        let row_taps = &taps[(r0 - row + radius) as usize..=(r1 - row + radius) as usize];
        let col_taps = &taps[(c0 - col + radius) as usize..=(c1 - col + radius) as usize];
        let kept: f64 = row_taps.iter().sum::<f64>() * col_taps.iter().sum::<f64>();
        for (i, rt) in row_taps.iter().enumerate() {
            let base = (r0 as usize + i) * ann.width + c0 as usize;
            for (j, ct) in col_taps.iter().enumerate() {
                map.values[base + j] += rt * ct / kept;
            }
        }
    }
    Ok(map)
}

/// Sums disjoint `factor x factor` blocks; the total is preserved.
pub fn downsample_sum(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if !matches!(factor, 1 | 2 | 4 | 8) {
        return Err(Error::config(format!("block-sum factor {factor} not in {{2, 4, 8}}")));
    }
    if map.height % factor != 0 || map.width % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} map is not divisible by {factor}",
            map.height, map.width
        )));
    }
    let values = crate::tensor::kernels::block_sum_forward(&map.values, 1, map.height, map.width, factor);
    DensityMap::new(
        map.height / factor,
        map.width / factor,
        values,
        map.resolution.coarsened(factor)?,
    )
}

/// Image and maps padded on the bottom/right to a multiple of some size.
#[derive(Clone, Debug)]
pub struct Padded {
    pub image: Tensor,
    pub maps: Vec<DensityMap>,
    pub original: (usize, usize),
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads `image` (`[C, H, W]`) and zero-pads `maps` on the bottom and
/// right so both extents become multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor, maps: &[DensityMap], multiple: usize) -> Result<Padded> {
    if multiple == 0 {
        return Err(Error::config("padding multiple must be at least 1"));
    }
    let (c, h, w) = image.chw()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..ph {
            let si = reflect(i, h);
            for j in 0..pw {
                data.push(plane[si * w + reflect(j, w)]);
            }
        }
    }
    let mut padded_maps = Vec::with_capacity(maps.len());
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::shape(format!(
                "map {}x{} does not match image {h}x{w}",
                m.height, m.width
            )));
        }
        let mut out = DensityMap::zeros(ph, pw, m.resolution);
        for r in 0..h {
            out.values[r * pw..r * pw + w].copy_from_slice(&m.values[r * w..(r + 1) * w]);
        }
        padded_maps.push(out);
    }
    Ok(Padded {
        image: Tensor::new(vec![c, ph, pw], data)?,
        maps: padded_maps,
        original: (h, w),
    })
}

/// Crops a prediction on the padded grid back to the original extent.
pub fn crop_back(map: &DensityMap, original: (usize, usize)) -> Result<DensityMap> {
    map.crop(0, 0, original.0, original.1)
}
