//! Grayscale conversion and the hand-crafted image measures: average
//! gradient magnitude (sharpness), histogram entropy and edge density
//! (complexity).
//!
//! Gradients use 3×3 Sobel kernels evaluated on interior pixels only, so a
//! `w × h` image yields `(w-2)(h-2)` magnitudes. Magnitudes are normalized
//! by `255·4·√2`, the largest value a Sobel pair can produce on 8-bit input.

use image::RgbImage;

use crate::error::{Error, Result};

/// Largest Sobel magnitude on 8-bit input: each kernel peaks at `4·255`.
pub const SOBEL_NORMALIZER: f64 = 255.0 * 4.0 * std::f64::consts::SQRT_2;

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;

/// Row-major luminance plane with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image has zero size"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=255.0).contains(*v))) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image, clamping values into `[0, 255]`.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        GrayImage::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Copy of the `w × h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("crop window exceeds image bounds"));
        }
        let mut px = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            px.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage::new(w, h, px)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GrayImage> {
        GrayImage::from_clamped(self.width, self.height, self.pixels.iter().map(|&v| f(v)).collect())
    }
}

/// ITU-R BT.601 luma.
pub fn to_gray(img: &RgbImage) -> Result<GrayImage> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("image has zero size"));
    }
    let px = img
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    GrayImage::from_clamped(w as usize, h as usize, px)
}

fn require_kernel_fit(img: &GrayImage) -> Result<()> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than the 3x3 Sobel kernel",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Normalized Sobel magnitudes of the interior pixels, row-major,
/// `(width-2) × (height-2)`.
pub fn sobel_magnitudes(img: &GrayImage) -> Result<Vec<f64>> {
    require_kernel_fit(img)?;
    let w = img.width;
    let p = &img.pixels;
    let mut out = Vec::with_capacity((img.width - 2) * (img.height - 2));
    for y in 1..img.height - 1 {
        let up = &p[(y - 1) * w..y * w];
        let mid = &p[y * w..(y + 1) * w];
        let dn = &p[(y + 1) * w..(y + 2) * w];
        for x in 1..w - 1 {
            let gx = (up[x + 1] + 2.0 * mid[x + 1] + dn[x + 1]) - (up[x - 1] + 2.0 * mid[x - 1] + dn[x - 1]);
            let gy = (dn[x - 1] + 2.0 * dn[x] + dn[x + 1]) - (up[x - 1] + 2.0 * up[x] + up[x + 1]);
            out.push((gx * gx + gy * gy).sqrt() / SOBEL_NORMALIZER);
        }
    }
    Ok(out)
}

/// Mean normalized Sobel magnitude over interior pixels, in `[0, 1]`.
pub fn average_gradient_magnitude(img: &GrayImage) -> Result<f64> {
    let mags = sobel_magnitudes(img)?;
    Ok(mags.iter().sum::<f64>() / mags.len() as f64)
}

/// 256-bin luminance histogram (values rounded to the nearest level).
pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in &img.pixels {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    hist
}

/// Shannon entropy of the luminance histogram in bits, divided by 8.
pub fn histogram_entropy(img: &GrayImage) -> f64 {
    let hist = histogram(img);
    let n = img.pixels.len() as f64;
    let bits: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    bits / 8.0
}

/// Fraction of interior pixels whose normalized Sobel magnitude exceeds `threshold`.
pub fn edge_density(img: &GrayImage, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "edge threshold {threshold} outside (0, 1]"
        )));
    }
    let mags = sobel_magnitudes(img)?;
    let above = mags.iter().filter(|&&m| m > threshold).count();
    Ok(above as f64 / mags.len() as f64)
}
