use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PFM: {message}")]
    Format { path: String, message: String },
    #[error("image dimension mismatch: {0}x{1} vs {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("png encoding failed: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Linear HDR radiance, row 0 at the top, RGB interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    /// Validates length, finiteness and non-negativity.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(ImageError::Invalid(format!(
                "{} values for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        let img = HdrImage {
            width,
            height,
            pixels,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(ImageError::Invalid(format!(
                "value {} at pixel {} is not a finite nonnegative radiance",
                self.pixels[i],
                i / 3
            )));
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &HdrImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::Dimensions(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// `ln(1 + x)` per value.
    pub fn log_encoded(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| (v as f64).ln_1p()).collect()
    }

    /// Inverse of [`HdrImage::log_encoded`], clamping negative radiance to 0.
    pub fn from_log_encoded(width: usize, height: usize, y: &[f64]) -> Result<Self> {
        let px = y.iter().map(|&v| v.exp_m1().max(0.0) as f32).collect();
        Self::from_pixels(width, height, px)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn to_pfm_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 4);
        for y in (0..self.height).rev() {
            for v in &self.pixels[y * self.width * 3..(y + 1) * self.width * 3] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pfm_bytes()).map_err(io_err(path))
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_pfm_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_pfm_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |m: &str| ImageError::Format {
            path: name.to_string(),
            message: m.to_string(),
        };
        // three whitespace-terminated header fields: magic, "w h", scale
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?,
            );
        }
        pos += 1; // single whitespace byte before the raster
        let channels = match fields[0] {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("magic is not PF or Pf")),
        };
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("scale must be nonzero"));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != n * 4 {
            return Err(bad(&format!(
                "expected {} raster bytes, found {}",
                n * 4,
                raster.len()
            )));
        }
        let mut img = HdrImage::new(width, height);
        for (i, chunk) in raster.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let (pix, c) = (i / channels, i % channels);
            let (x, y_bottom) = (pix % width, pix / width);
            let base = 3 * ((height - 1 - y_bottom) * width + x);
            if channels == 3 {
                img.pixels[base + c] = v;
            } else {
                img.pixels[base..base + 3].fill(v);
            }
        }
        img.validate()?;
        Ok(img)
    }
}

/// `clamp(ln(I) / ln(2), 0, 1)` per channel.
pub fn tone_map_value(v: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    (v.ln() / std::f64::consts::LN_2).clamp(0.0, 1.0)
}

/// Tone-mapped copy with values in `[0, 1]`.
pub fn tone_map(img: &HdrImage) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|&v| tone_map_value(v as f64))
        .collect()
}

pub fn png_bytes(img: &HdrImage) -> Result<Vec<u8>> {
    let ldr: Vec<u8> = tone_map(img)
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| ImageError::Png(e.to_string()))?;
        w.write_image_data(&ldr)
            .map_err(|e| ImageError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = png_bytes(img)?;
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    f.write_all(&bytes).map_err(io_err(path))
}

/// Pixel-wise `sum_i w_i * img_i` with per-channel weights.
pub fn composite_lights(images: &[HdrImage], weights: &[[f64; 3]]) -> Result<HdrImage> {
    let first = images
        .first()
        .ok_or_else(|| ImageError::Invalid("no images to composite".into()))?;
    if weights.len() != images.len() {
        return Err(ImageError::Invalid(format!(
            "{} weights for {} images",
            weights.len(),
            images.len()
        )));
    }
    if let Some(w) = weights
        .iter()
        .flatten()
        .find(|w| !w.is_finite() || **w < 0.0)
    {
        return Err(ImageError::Invalid(format!(
            "weight {w} must be finite and >= 0"
        )));
    }
    let mut acc = vec![0.0f64; first.pixels.len()];
    for (img, w) in images.iter().zip(weights) {
        first.same_size(img)?;
        for (i, v) in img.pixels.iter().enumerate() {
            acc[i] += w[i % 3] * *v as f64;
        }
    }
    HdrImage::from_pixels(
        first.width,
        first.height,
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// PSNR of log-encoded images; identical inputs give [`Psnr::Infinite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    /// `f64::INFINITY` for the infinite case.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

/// `10 log10(peak^2 / mse)` on `ln(1 + x)` encodings, with `peak` the largest
/// encoded value in either image.
pub fn psnr(a: &HdrImage, b: &HdrImage) -> Result<Psnr> {
    a.same_size(b)?;
    Ok(psnr_log(&a.log_encoded(), &b.log_encoded()))
}

/// [`psnr`] on already log-encoded values.
pub fn psnr_log(a: &[f64], b: &[f64]) -> Psnr {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return Psnr::Infinite;
    }
    let peak = a.iter().chain(b).fold(0.0f64, |m, v| m.max(*v));
    Psnr::Finite(10.0 * (peak * peak / mse).log10())
}

/// Mean absolute difference of log-encoded values.
pub fn mean_abs_log_diff(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    a.same_size(b)?;
    let (la, lb) = (a.log_encoded(), b.log_encoded());
    Ok(la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).sum::<f64>() / la.len().max(1) as f64)
}
