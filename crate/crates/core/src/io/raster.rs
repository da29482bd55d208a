//! 8-bit images: PPM/PGM and PNG codecs and conversion to `[0, 1]`-scaled
//! tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    /// Planar `[3, H, W]` tensor with values divided by 255.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[3 * p + c] as f64 / 255.0
        })
    }

    /// Inverse of [`Rgb8::to_tensor`]; values are clamped to `[0, 1]` and
    /// rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let data = (0..3 * plane)
            .map(|i| {
                let (p, c) = (i / 3, i % 3);
                (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        Ok(Self { width: w, height: h, data })
    }
}

fn encode_pnm(data: &[u8], width: usize, height: usize, color: image::ExtendedColorType) -> Vec<u8> {
    use image::codecs::pnm::{PnmEncoder, SampleEncoding};
    use image::ImageEncoder;
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(match color {
            image::ExtendedColorType::L8 => image::codecs::pnm::PnmSubtype::Graymap(SampleEncoding::Binary),
            _ => image::codecs::pnm::PnmSubtype::Pixmap(SampleEncoding::Binary),
        })
        .write_image(data, width as u32, height as u32, color)
        .expect("in-memory PNM encoding of a well-formed buffer");
    out
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    encode_pnm(&img.data, img.width, img.height, image::ExtendedColorType::Rgb8)
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    encode_pnm(&img.data, img.width, img.height, image::ExtendedColorType::L8)
}

fn decode(bytes: &[u8], format: image::ImageFormat, what: &str) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Format(format!("{what}: {e}")))
}

/// Binary or ASCII colour PNM; samples wider than 8 bits are rescaled.
pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let img = decode(bytes, image::ImageFormat::Pnm, "PPM")?;
    if img.color().channel_count() != 3 {
        return Err(Error::Format("PPM: expected a colour image".into()));
    }
    let img = img.to_rgb8();
    Ok(Rgb8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Binary or ASCII grey PNM; samples wider than 8 bits are rescaled.
pub fn decode_pgm(bytes: &[u8]) -> Result<Gray8> {
    let img = decode(bytes, image::ImageFormat::Pnm, "PGM")?;
    if img.color().channel_count() != 1 {
        return Err(Error::Format("PGM: expected a grey image".into()));
    }
    let img = img.to_luma8();
    Ok(Gray8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Rgb8> {
    let img = decode(bytes, image::ImageFormat::Png, "PNG")?.to_rgb8();
    Ok(Rgb8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Decodes by extension: `.png` or `.ppm`.
pub fn read_image(path: &Path) -> Result<Rgb8> {
    let bytes = super::read_file(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let decoded = match ext.as_deref() {
        Some("png") => decode_png(&bytes),
        Some("ppm") => decode_ppm(&bytes),
        _ => Err(Error::Format("unsupported image extension (want .png or .ppm)".into())),
    };
    decoded.map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// Writes `.png` via the PNG encoder, anything else as binary PPM.
pub fn write_image(path: &Path, img: &Rgb8) -> Result<()> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return super::write_atomic(path, &encode_ppm(img));
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut buf,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    super::write_atomic(path, buf.get_ref())
}
