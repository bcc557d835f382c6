//! Classical segmentation of trap images into object centroids.
//!
//! Chain: optional stirring-tool recolor → HSV background test against the
//! yellow trap color → binary open-then-close with a disk → 8-connected
//! components → area filter → corner filter → centroid per component.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Single-channel PNG (or any image, converted to luma); nonzero marks the tool.
    pub fn load(path: impl AsRef<Path>) -> Result<BinaryMask> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        Ok(BinaryMask {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] != 0).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Background hue interval in degrees.
    pub trap_hue_range: (f64, f64),
    /// Minimum HSV saturation of background pixels.
    pub min_saturation: f64,
    pub min_blob_area: f64,
    pub max_blob_area: f64,
    pub morph_radius: usize,
    pub corner_margin_fraction: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            trap_hue_range: (40.0, 70.0),
            min_saturation: 0.25,
            min_blob_area: 30.0,
            max_blob_area: 2500.0,
            morph_radius: 2,
            corner_margin_fraction: 0.08,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.trap_hue_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "trap_hue_range must be a nonempty interval, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.min_saturation) {
            return Err(Error::invalid("min_saturation must lie in [0, 1]"));
        }
        if !(self.min_blob_area >= 0.0 && self.min_blob_area < self.max_blob_area) {
            return Err(Error::invalid(format!(
                "min_blob_area ({}) must be below max_blob_area ({})",
                self.min_blob_area, self.max_blob_area
            )));
        }
        if !(0.0..0.5).contains(&self.corner_margin_fraction) {
            return Err(Error::invalid("corner_margin_fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// HSV hue in degrees `[0, 360)` and saturation in `[0, 1]`.
pub fn hue_saturation(p: &Rgb<u8>) -> (f64, f64) {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s)
}

/// Replaces tool pixels with the per-channel median of the remaining pixels.
pub fn recolor_tool(img: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if (w as usize, h as usize) != (mask.width, mask.height) {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {w}x{h}",
            mask.width, mask.height
        )));
    }
    let mut channels: [Vec<u8>; 3] = Default::default();
    for (p, &m) in img.pixels().zip(&mask.data) {
        if !m {
            for c in 0..3 {
                channels[c].push(p[c]);
            }
        }
    }
    if channels[0].is_empty() {
        return Err(Error::invalid("tool mask covers the entire image"));
    }
    let mut fill = [0u8; 3];
    for c in 0..3 {
        let v = &mut channels[c];
        let mid = v.len() / 2;
        fill[c] = *v.select_nth_unstable(mid).1;
    }
    let mut out = img.clone();
    for (p, &m) in out.pixels_mut().zip(&mask.data) {
        if m {
            *p = Rgb(fill);
        }
    }
    Ok(out)
}

/// Pixels that do not look like trap background.
pub fn foreground_mask(img: &RgbImage, cfg: &SegmentationConfig) -> BinaryMask {
    let (lo, hi) = cfg.trap_hue_range;
    BinaryMask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img
            .pixels()
            .map(|p| {
                let (hue, sat) = hue_saturation(p);
                !(hue >= lo && hue <= hi && sat >= cfg.min_saturation)
            })
            .collect(),
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = vec![];
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Erosion (`all` = true) or dilation over in-bounds disk neighbours.
fn morph(mask: &BinaryMask, offsets: &[(isize, isize)], erode: bool) -> BinaryMask {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = BinaryMask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            let mut hit = erode;
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let v = mask.get(nx as usize, ny as usize);
                if erode && !v {
                    hit = false;
                    break;
                }
                if !erode && v {
                    hit = true;
                    break;
                }
            }
            out.set(x as usize, y as usize, hit);
        }
    }
    out
}

/// Open (erode, dilate) then close (dilate, erode) with a disk of `radius`.
pub fn open_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let k = disk_offsets(radius);
    let opened = morph(&morph(mask, &k, true), &k, false);
    morph(&morph(&opened, &k, false), &k, true)
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
    /// Mean of pixel centers.
    pub centroid: (f64, f64),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox_width(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn bbox_height(&self) -> usize {
        self.max_y - self.min_y + 1
    }
}

/// 8-connected components in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = vec![];
    let mut stack = vec![];
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = vec![];
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push(i);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        out.push(Component {
            pixels,
            min_x,
            min_y,
            max_x,
            max_y,
            centroid: (sx / n, sy / n),
        });
    }
    out
}

fn in_corner(c: (f64, f64), width: usize, height: usize, fraction: f64) -> bool {
    let side = fraction * width.min(height) as f64;
    if side <= 0.0 {
        return false;
    }
    let (w, h) = (width as f64, height as f64);
    let near_x = c.0 < side || c.0 > w - side;
    let near_y = c.1 < side || c.1 > h - side;
    near_x && near_y
}

/// Components that survive the area and corner filters.
pub fn extract_components(img: &RgbImage, cfg: &SegmentationConfig) -> Result<Vec<Component>> {
    cfg.validate()?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("image has zero size"));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = open_close(&foreground_mask(img, cfg), cfg.morph_radius);
    Ok(connected_components(&mask)
        .into_iter()
        .filter(|c| {
            let a = c.area() as f64;
            a >= cfg.min_blob_area && a <= cfg.max_blob_area
        })
        .filter(|c| !in_corner(c.centroid, w, h, cfg.corner_margin_fraction))
        .collect())
}

pub fn extract_centroids(img: &RgbImage, cfg: &SegmentationConfig) -> Result<Vec<Centroid>> {
    Ok(extract_components(img, cfg)?
        .into_iter()
        .map(|c| Centroid {
            x: c.centroid.0,
            y: c.centroid.1,
            area: c.area() as f64,
        })
        .collect())
}
