//! Synthetic crowd images: light Gaussian blobs on a dark background at
//! uniformly sampled dot positions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{annotations, raster, write_atomic};
use crate::density::{DotAnnotations, Point};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub images: usize,
    pub size: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || self.size % 4 != 0 {
            return Err(Error::config(format!(
                "synthetic image size must be a multiple of 4 and at least 32, got {}",
                self.size
            )));
        }
        if self.min_count > self.max_count {
            return Err(Error::config(format!(
                "count range {}..={} is empty",
                self.min_count, self.max_count
            )));
        }
        Ok(())
    }
}

/// One rendered image: interleaved 8-bit RGB plus its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub stem: String,
    pub rgb: raster::Rgb8,
    pub annotations: DotAnnotations,
}

const BLOB_SIGMA: f64 = 1.5;
const BACKGROUND: f64 = 0.08;

/// Pixel centres sit at integer coordinates, as in the density maps.
fn render(points: &[Point], size: usize, rng: &mut ChaCha8Rng) -> raster::Rgb8 {
    let mut acc = vec![BACKGROUND; 3 * size * size];
    for v in acc.iter_mut() {
        *v += rng.random_range(-0.03..0.03);
    }
    let reach = (3.0 * BLOB_SIGMA).ceil() as isize;
    for p in points {
        let tint = [
            rng.random_range(0.7..1.0),
            rng.random_range(0.6..0.95),
            rng.random_range(0.5..0.9),
        ];
        let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(size as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(size as isize - 1) {
                let dx = x as f64 - p.x;
                let dy = y as f64 - p.y;
                let g = (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                let base = 3 * (y as usize * size + x as usize);
                for (c, t) in tint.iter().enumerate() {
                    acc[base + c] += t * g;
                }
            }
        }
    }
    let data = acc
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    raster::Rgb8 {
        width: size,
        height: size,
        data,
    }
}

/// Deterministic in-memory generation.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size as f64;
    (0..spec.images)
        .map(|i| {
            let n = rng.random_range(spec.min_count..=spec.max_count);
            let points: Vec<Point> = (0..n)
                .map(|_| Point {
                    x: rng.random_range(0.0..size),
                    y: rng.random_range(0.0..size),
                })
                .collect();
            let rgb = render(&points, spec.size, &mut rng);
            Ok(SynthImage {
                stem: format!("synth_{i:04}"),
                rgb,
                annotations: DotAnnotations::new(points, spec.size, spec.size)?,
            })
        })
        .collect()
}

/// Writes `images/<stem>.ppm` and `annotations/<stem>.csv` under `root`.
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<Vec<SynthImage>> {
    let images = generate(spec)?;
    let img_dir = root.join("images");
    let ann_dir = root.join("annotations");
    for dir in [&img_dir, &ann_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for img in &images {
        write_atomic(&img_dir.join(format!("{}.ppm", img.stem)), &raster::encode_ppm(&img.rgb))?;
        write_atomic(
            &ann_dir.join(format!("{}.csv", img.stem)),
            annotations::format_csv(&img.annotations.points).as_bytes(),
        )?;
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            images: 4,
            size: 48,
            min_count: 5,
            max_count: 20,
            seed,
        }
    }

    #[test]
    fn counts_in_range_and_deterministic() {
        let a = generate(&spec(9)).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|i| (5..=20).contains(&i.annotations.count())));
        assert_eq!(a, generate(&spec(9)).unwrap());
        assert_ne!(a, generate(&spec(10)).unwrap());
    }

    #[test]
    fn rejects_bad_size() {
        assert!(generate(&SynthSpec { size: 30, ..spec(0) }).is_err());
        assert!(generate(&SynthSpec { size: 50, ..spec(0) }).is_err());
    }

    #[test]
    fn blob_peaks_where_the_density_peaks() {
        let one = SynthSpec { images: 1, min_count: 1, max_count: 1, ..spec(3) };
        let img = &generate(&one).unwrap()[0];
        let d = crate::density::gaussian_density(&img.annotations, 1.0).unwrap();
        let brightness = |i: usize| img.rgb.data[3 * i..3 * i + 3].iter().map(|&v| v as u32).sum::<u32>();
        let brightest = (0..48 * 48).max_by_key(|&i| brightness(i)).unwrap();
        let densest = (0..48 * 48).max_by(|&a, &b| d.values()[a].total_cmp(&d.values()[b])).unwrap();
        assert_eq!(brightest, densest);
    }
}
