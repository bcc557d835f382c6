//! Synthetic yellow-trap scenes, a color-blob stub detector and corpus plans.
//!
//! Placement draws integer coordinates only; the photometric stages (grain,
//! blur, noise) use a separate RNG stream so that changing a degradation
//! parameter never moves a pest.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_detections, save_ground_truth, save_manifest, BoundingBox, ConditionMetadata, DensityClass, Detection,
    GroundTruthBox, ImageRecord, Phase, StirSpeed, TIndex,
};
use crate::error::{Error, Result};
use crate::filter::gaussian_blur;
use crate::image_metrics::{to_gray, GrayImage};
use crate::scene::{extract_components, foreground_mask, BinaryMask, SegmentationConfig};

const BACKGROUND: [f64; 3] = [226.0, 204.0, 46.0];
const PEST: [f64; 3] = [100.0, 28.0, 20.0];
const SOIL: [f64; 3] = [122.0, 84.0, 44.0];
const WOOD: [f64; 3] = [168.0, 124.0, 78.0];
const PLACEMENT_TRIES: usize = 20_000;
const PEST_MIN_GAP: i64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub pest_count: u32,
    /// Inclusive range of the long ellipse semi-axis in pixels.
    pub pest_radius_range: (u32, u32),
    /// Short-to-long semi-axis ratio range.
    #[serde(default = "default_aspect")]
    pub aspect_range: (f64, f64),
    /// 0 scatters pests uniformly, 1 packs them into a single clump.
    pub cluster_tightness: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Soil specks per 200 px² of image area.
    pub soil_speckle_density: f64,
    pub distractor_count: u32,
    /// Per-pixel background grain applied before blur.
    #[serde(default = "default_grain")]
    pub grain_sigma: f64,
    /// Draw the stirring stick and return its mask.
    #[serde(default)]
    pub stick: bool,
    pub condition: ConditionMetadata,
}

fn default_grain() -> f64 {
    3.0
}

fn default_aspect() -> (f64, f64) {
    (0.3, 0.4)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pest_radius_range;
        if lo < 2 || lo > hi {
            return Err(Error::invalid(format!("pest_radius_range ({lo}, {hi}) must satisfy 2 <= lo <= hi")));
        }
        if self.width < 4 * hi + 8 || self.height < 4 * hi + 8 {
            return Err(Error::invalid("image too small for the pest radius range"));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::invalid(format!("aspect_range ({alo}, {ahi}) must satisfy 0 < lo <= hi <= 1")));
        }
        for (name, v) in [
            ("cluster_tightness", self.cluster_tightness),
            ("soil_speckle_density", self.soil_speckle_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
            ("grain_sigma", self.grain_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.condition.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub ground_truth: Vec<GroundTruthBox>,
    pub metadata: ConditionMetadata,
    pub tool_mask: Option<BinaryMask>,
}

#[derive(Clone, Copy)]
struct Blob {
    cx: i64,
    cy: i64,
    rx: i64,
    ry: i64,
}

impl Blob {
    fn contains(&self, x: i64, y: i64) -> bool {
        // Pixel centers inside the ellipse with semi-axes r + 1/2.
        let (dx, dy) = (2 * (x - self.cx), 2 * (y - self.cy));
        let (ax, ay) = (2 * self.rx + 1, 2 * self.ry + 1);
        dx * dx * ay * ay + dy * dy * ax * ax <= ax * ax * ay * ay
    }

    fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        (self.cy - self.ry..=self.cy + self.ry)
            .flat_map(move |y| (self.cx - self.rx..=self.cx + self.rx).map(move |x| (x, y)))
            .filter(|&(x, y)| self.contains(x, y))
    }
}

/// Pixels within `gap` (Euclidean) of any accepted blob.
struct Occupancy {
    w: i64,
    h: i64,
    blocked: Vec<bool>,
    offsets: Vec<(i64, i64)>,
}

impl Occupancy {
    fn new(w: i64, h: i64, gap: i64) -> Self {
        let offsets = (-gap..=gap)
            .flat_map(|dy| (-gap..=gap).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= gap * gap)
            .collect();
        Occupancy {
            w,
            h,
            blocked: vec![false; (w * h) as usize],
            offsets,
        }
    }

    fn free(&self, b: &Blob) -> bool {
        b.pixels().all(|(x, y)| {
            x >= 0 && y >= 0 && x < self.w && y < self.h && !self.blocked[(y * self.w + x) as usize]
        })
    }

    fn insert(&mut self, b: &Blob) {
        for (x, y) in b.pixels() {
            for (dx, dy) in &self.offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < self.w && ny < self.h {
                    self.blocked[(ny * self.w + nx) as usize] = true;
                }
            }
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The diagonal stick region used for stirring frames.
pub fn stick_mask(width: u32, height: u32) -> BinaryMask {
    let (w, h) = (width as i64, height as i64);
    // Line from (w/5, 0) to (11w/20, h); half-width 7 px.
    let (x0, y0, x1, y1) = (w / 5, 0, 11 * w / 20, h);
    let (a, b) = (y1 - y0, x0 - x1);
    let c = -(a * x0 + b * y0);
    let norm2 = a * a + b * b;
    let mut m = BinaryMask::new(width as usize, height as usize);
    for y in 0..h {
        for x in 0..w {
            let d = a * x + b * y + c;
            if d * d <= 49 * norm2 {
                m.set(x as usize, y as usize, true);
            }
        }
    }
    m
}

fn in_corner(x: i64, y: i64, w: i64, h: i64, side: i64) -> bool {
    (x < side || x >= w - side) && (y < side || y >= h - side)
}

/// Elongated pest body: the long semi-axis comes from `pest_radius_range`,
/// the short one from `aspect_range`, oriented along x or y.
fn random_blob(spec: &SceneSpec, cx: i64, cy: i64, vertical: Option<bool>, rng: &mut ChaCha8Rng) -> Blob {
    let long = rng.random_range(spec.pest_radius_range.0..=spec.pest_radius_range.1) as i64;
    let (alo, ahi) = spec.aspect_range;
    // Integer aspect in percent keeps placement free of float rounding.
    let pct = rng.random_range((alo * 100.0).round() as i64..=(ahi * 100.0).round() as i64);
    let short = ((long * pct + 50) / 100).max(2);
    let vertical = vertical.unwrap_or_else(|| rng.random_bool(0.5));
    if vertical {
        Blob { cx, cy, rx: short, ry: long }
    } else {
        Blob { cx, cy, rx: long, ry: short }
    }
}

/// Minimum count of empty pixels between pests; tight clumps sit just far
/// enough apart that the segmentation does not merge them.
fn pest_gap(tightness: f64) -> i64 {
    PEST_MIN_GAP + (6.0 * (1.0 - tightness)).floor() as i64
}

fn place_pests(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Blob>, Occupancy)> {
    let n = spec.pest_count as usize;
    let (w, h) = (spec.width as i64, spec.height as i64);
    let t = spec.cluster_tightness;
    let gap = pest_gap(t);
    let mut occ = Occupancy::new(w, h, gap);
    if n == 0 {
        return Ok((vec![], occ));
    }
    let rhi = spec.pest_radius_range.1 as i64;
    let margin = rhi + 2;
    let corner = (0.1 * w.min(h) as f64) as i64;
    let k = 1 + ((1.0 - t) * (n - 1) as f64).floor() as usize;
    let parents: Vec<(i64, i64)> = (0..k)
        .map(|_| {
            let px = rng.random_range(margin + corner..w - margin - corner);
            let py = rng.random_range(margin + corner..h - margin - corner);
            (px, py)
        })
        .collect();
    let spread = ((1.0 - t) * w.max(h) as f64 / 2.0).max(2.0 * (rhi + gap) as f64) as i64;
    let mut members: Vec<Vec<usize>> = vec![vec![]; k];
    let mut out: Vec<Blob> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(Error::invalid(format!(
                "could not place {n} pests in {w}x{h} after {PLACEMENT_TRIES} tries"
            )));
        }
        let c = out.len() % k;
        // With probability `t`, grow the clump by attaching next to a member.
        let b = if !members[c].is_empty() && rng.random_bool(t) {
            let m = out[members[c][rng.random_range(0..members[c].len())]];
            let same = rng.random_bool(t);
            let mut b = random_blob(spec, m.cx, m.cy, same.then_some(m.rx < m.ry), rng);
            // Abut the member at the minimum gap, mostly across its short axis.
            let across_short = rng.random_bool(0.75);
            let vertical_step = (m.rx >= m.ry) == across_short;
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            let slack = rng.random_range(0..=1);
            if vertical_step {
                b.cy += sign * (m.ry + b.ry + 1 + gap + slack);
                b.cx += rng.random_range(-m.rx / 2..=m.rx / 2);
            } else {
                b.cx += sign * (m.rx + b.rx + 1 + gap + slack);
                b.cy += rng.random_range(-m.ry / 2..=m.ry / 2);
            }
            b
        } else {
            let (px, py) = parents[c];
            let (cx, cy) = (px + rng.random_range(-spread..=spread), py + rng.random_range(-spread..=spread));
            random_blob(spec, cx, cy, None, rng)
        };
        let inside = b.cx >= margin && b.cx < w - margin && b.cy >= margin && b.cy < h - margin;
        if inside && !in_corner(b.cx, b.cy, w, h, corner + margin) && occ.free(&b) {
            occ.insert(&b);
            members[c].push(out.len());
            out.push(b);
        }
    }
    Ok((out, occ))
}

fn place_distractors(spec: &SceneSpec, occ: &mut Occupancy, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let margin = spec.pest_radius_range.1 as i64 + 2;
    let mut out: Vec<Blob> = vec![];
    for _ in 0..spec.distractor_count {
        for _ in 0..200 {
            let (cx, cy) = (rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
            // Other insects: rounder than the target pest.
            let r = rng.random_range(spec.pest_radius_range.0..=spec.pest_radius_range.1) as i64;
            let b = Blob { cx, cy, rx: r, ry: (r * 3 / 4).max(2) };
            if occ.free(&b) {
                occ.insert(&b);
                out.push(b);
                break;
            }
        }
    }
    out
}

fn paint(planes: &mut [Vec<f64>; 3], w: usize, b: &Blob, color: [f64; 3]) {
    let h = planes[0].len() / w;
    for y in (b.cy - b.ry).max(0)..=(b.cy + b.ry).min(h as i64 - 1) {
        for x in (b.cx - b.rx).max(0)..=(b.cx + b.rx).min(w as i64 - 1) {
            if b.contains(x, y) {
                let i = y as usize * w + x as usize;
                for c in 0..3 {
                    planes[c][i] = color[c];
                }
            }
        }
    }
}

/// Renders one scene. Ground-truth boxes are the tight pixel boxes of the
/// pest ellipses before any photometric degradation.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut place = stream(spec.seed, 0);
    let mut photo = stream(spec.seed, 1);
    let (pests, mut occ) = place_pests(spec, &mut place)?;
    let distractors = place_distractors(spec, &mut occ, &mut place);

    let normal = |s: f64| Normal::new(0.0, s.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let grain = normal(spec.grain_sigma);
    let mut planes: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            // Mild illumination falloff away from the top-left.
            let shade = 1.0 - 0.08 * (x + y) as f64 / (w + h) as f64;
            let g = if spec.grain_sigma > 0.0 { grain.sample(&mut photo) } else { 0.0 };
            for c in 0..3 {
                planes[c][y * w + x] = BACKGROUND[c] * shade + g;
            }
        }
    }

    let specks = (spec.soil_speckle_density * (w * h) as f64 / 200.0).round() as usize;
    for _ in 0..specks {
        let r = place.random_range(1..=3i64);
        let b = Blob {
            cx: place.random_range(0..w as i64),
            cy: place.random_range(0..h as i64),
            rx: r,
            ry: r,
        };
        let tint = place.random_range(-20..=20) as f64;
        paint(&mut planes, w, &b, [SOIL[0] + tint, SOIL[1] + tint * 0.7, SOIL[2] + tint * 0.4]);
    }
    for b in &distractors {
        let level = place.random_range(110..=165) as f64;
        paint(&mut planes, w, b, [level, level, level + 4.0]);
    }
    let mut ground_truth = Vec::with_capacity(pests.len());
    for b in &pests {
        let tint = place.random_range(-8..=8) as f64;
        paint(&mut planes, w, b, [PEST[0] + tint, PEST[1] + tint, PEST[2] + tint * 0.5]);
        ground_truth.push(GroundTruthBox::new(BoundingBox::new(
            (b.cx - b.rx) as f64,
            (b.cy - b.ry) as f64,
            (2 * b.rx + 1) as f64,
            (2 * b.ry + 1) as f64,
        )?));
    }
    let tool_mask = spec.stick.then(|| stick_mask(spec.width, spec.height));
    if let Some(m) = &tool_mask {
        for y in 0..h {
            for x in 0..w {
                if m.get(x, y) {
                    for c in 0..3 {
                        planes[c][y * w + x] = WOOD[c];
                    }
                }
            }
        }
    }

    if spec.blur_sigma > 0.0 {
        for p in planes.iter_mut() {
            *p = gaussian_blur(p, w, h, spec.blur_sigma);
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = normal(spec.noise_sigma);
        for i in 0..w * h {
            for p in planes.iter_mut() {
                p[i] += noise.sample(&mut photo);
            }
        }
    }
    let image = RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    });
    Ok(Scene {
        image,
        ground_truth,
        metadata: spec.condition.clone(),
        tool_mask,
    })
}

/// Controlled imperfection applied after blob extraction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Degradation {
    pub drop_rate: f64,
    pub jitter_px: u32,
    /// Expected spurious boxes per kept detection.
    pub spurious_rate: f64,
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("drop_rate", self.drop_rate), ("spurious_rate", self.spurious_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

fn luminance(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Color-blob detector: one box per extracted component, scored by
/// compactness times contrast against the background.
pub fn stub_detect(img: &RgbImage, cfg: &SegmentationConfig, degrade: &Degradation, seed: u64) -> Result<Vec<Detection>> {
    degrade.validate()?;
    let comps = extract_components(img, cfg)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let fg = foreground_mask(img, cfg);
    let (mut bg_sum, mut bg_n) = (0.0, 0usize);
    for (i, p) in img.pixels().enumerate() {
        if !fg.get(i % w, i / w) {
            bg_sum += luminance(p);
            bg_n += 1;
        }
    }
    let bg = if bg_n > 0 { bg_sum / bg_n as f64 } else { 255.0 };

    let mut rng = stream(seed, 2);
    let mut out = vec![];
    for c in &comps {
        let fill = c.area() as f64 / (c.bbox_width() * c.bbox_height()) as f64;
        let mean: f64 = c
            .pixels
            .iter()
            .map(|&i| luminance(img.get_pixel((i % w) as u32, (i / w) as u32)))
            .sum::<f64>()
            / c.area() as f64;
        let contrast = ((bg - mean).abs() / 128.0).min(1.0);
        let confidence = (fill * contrast).clamp(0.05, 0.99);
        if degrade.drop_rate > 0.0 && rng.random_bool(degrade.drop_rate) {
            continue;
        }
        let j = degrade.jitter_px as i64;
        let mut jit = |v: usize| v as i64 + if j > 0 { rng.random_range(-j..=j) } else { 0 };
        let x0 = jit(c.min_x).clamp(0, w as i64 - 1);
        let y0 = jit(c.min_y).clamp(0, h as i64 - 1);
        let x1 = jit(c.max_x + 1).clamp(x0 + 1, w as i64);
        let y1 = jit(c.max_y + 1).clamp(y0 + 1, h as i64);
        out.push(Detection::new(
            BoundingBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64)?,
            confidence,
        )?);
        if degrade.spurious_rate > 0.0 && rng.random_bool(degrade.spurious_rate) {
            let bw = rng.random_range(8..=20i64);
            let bh = rng.random_range(8..=20i64);
            let x = rng.random_range(0..w as i64 - bw);
            let y = rng.random_range(0..h as i64 - bh);
            let conf = rng.random_range(0.05..0.5);
            out.push(Detection::new(BoundingBox::new(x as f64, y as f64, bw as f64, bh as f64)?, conf)?);
        }
    }
    Ok(out)
}

/// Blur and noise standing in for water motion at each stirring speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StirModel {
    pub low: (f64, f64),
    pub medium: (f64, f64),
    pub high: (f64, f64),
    /// Remaining fraction of the stirring blur/noise per post-stir frame.
    pub settle: f64,
}

impl Default for StirModel {
    fn default() -> Self {
        StirModel {
            low: (0.9, 3.0),
            medium: (1.3, 4.0),
            high: (1.7, 5.0),
            settle: 0.5,
        }
    }
}

impl StirModel {
    pub fn blur_noise(&self, speed: StirSpeed) -> (f64, f64) {
        match speed {
            StirSpeed::None => (0.0, 0.0),
            StirSpeed::Low => self.low,
            StirSpeed::Medium => self.medium,
            StirSpeed::High => self.high,
        }
    }
}

/// One capture sequence: a static frame, stirring frames and post-stir frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPlan {
    pub group_id: String,
    pub pest_count: u32,
    pub stir_speed: StirSpeed,
    #[serde(default)]
    pub soil: bool,
    #[serde(default = "default_tightness")]
    pub cluster_tightness: f64,
    #[serde(default)]
    pub distractor_count: u32,
    #[serde(default = "default_stirring_frames")]
    pub stirring_frames: u32,
    #[serde(default = "default_post_frames")]
    pub post_frames: u32,
}

fn default_tightness() -> f64 {
    0.3
}
fn default_stirring_frames() -> u32 {
    5
}
fn default_post_frames() -> u32 {
    3
}

/// Independent scenes with randomized conditions, for confidence-model
/// training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPlan {
    pub images: u32,
    #[serde(default = "default_count_range")]
    pub pest_count_range: (u32, u32),
    #[serde(default = "default_max_blur")]
    pub max_blur: f64,
    #[serde(default = "default_max_noise")]
    pub max_noise: f64,
    #[serde(default = "default_max_distractors")]
    pub max_distractors: u32,
    #[serde(default = "default_max_drop")]
    pub max_drop_rate: f64,
    #[serde(default = "default_max_spurious")]
    pub max_spurious_rate: f64,
    /// Extra miss rate at `max_blur`, scaled linearly with the drawn blur.
    #[serde(default = "default_blur_drop")]
    pub blur_drop_rate: f64,
}

fn default_count_range() -> (u32, u32) {
    (5, 80)
}
fn default_max_blur() -> f64 {
    2.5
}
fn default_max_noise() -> f64 {
    4.0
}
fn default_max_distractors() -> u32 {
    12
}
fn default_max_drop() -> f64 {
    0.1
}
fn default_max_spurious() -> f64 {
    0.1
}
fn default_blur_drop() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub seed: u64,
    #[serde(default = "default_size")]
    pub width: u32,
    #[serde(default = "default_size")]
    pub height: u32,
    #[serde(default = "default_radius")]
    pub pest_radius_range: (u32, u32),
    #[serde(default = "default_grain")]
    pub grain_sigma: f64,
    #[serde(default = "default_soil")]
    pub soil_density: f64,
    #[serde(default)]
    pub stir: StirModel,
    #[serde(default)]
    pub degrade: Degradation,
    #[serde(default)]
    pub groups: Vec<GroupPlan>,
    #[serde(default)]
    pub random: Option<RandomPlan>,
}

fn default_size() -> u32 {
    384
}
fn default_radius() -> (u32, u32) {
    (8, 12)
}
fn default_soil() -> f64 {
    0.35
}

/// A scene and the degradation its stub detections get.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneJob {
    pub name: String,
    pub spec: SceneSpec,
    pub degrade: Degradation,
}

pub fn density_class(count: u32) -> DensityClass {
    if count <= 40 {
        DensityClass::Low
    } else {
        DensityClass::High
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PlanFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    fn base(&self, seed: u64, condition: ConditionMetadata) -> SceneSpec {
        SceneSpec {
            seed,
            width: self.width,
            height: self.height,
            pest_count: condition.pest_count,
            pest_radius_range: self.pest_radius_range,
            aspect_range: default_aspect(),
            cluster_tightness: default_tightness(),
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            soil_speckle_density: 0.0,
            distractor_count: 0,
            grain_sigma: self.grain_sigma,
            stick: false,
            condition,
        }
    }

    /// 13 single-variable groups: eight densities at medium speed, three
    /// speeds, and soil on/off.
    pub fn single_variable(seed: u64) -> Self {
        let g = |id: String, count: u32, speed: StirSpeed, soil: bool| GroupPlan {
            group_id: id,
            pest_count: count,
            stir_speed: speed,
            soil,
            cluster_tightness: default_tightness(),
            distractor_count: 0,
            stirring_frames: default_stirring_frames(),
            post_frames: default_post_frames(),
        };
        let mut groups: Vec<GroupPlan> = (1..=8)
            .map(|k| g(format!("density_{}", 10 * k), 10 * k, StirSpeed::Medium, false))
            .collect();
        for s in [StirSpeed::Low, StirSpeed::Medium, StirSpeed::High] {
            groups.push(g(format!("speed_{s}"), 30, s, false));
        }
        groups.push(g("soil_off".into(), 30, StirSpeed::Medium, false));
        groups.push(g("soil_on".into(), 30, StirSpeed::Medium, true));
        PlanFile {
            seed,
            width: default_size(),
            height: default_size(),
            pest_radius_range: default_radius(),
            grain_sigma: default_grain(),
            soil_density: default_soil(),
            stir: StirModel::default(),
            degrade: Degradation::default(),
            groups,
            random: None,
        }
    }

    /// Randomized corpus for fitting the confidence model.
    pub fn confidence(seed: u64, images: u32) -> Self {
        PlanFile {
            random: Some(RandomPlan {
                images,
                pest_count_range: default_count_range(),
                max_blur: default_max_blur(),
                max_noise: default_max_noise(),
                max_distractors: default_max_distractors(),
                max_drop_rate: default_max_drop(),
                max_spurious_rate: default_max_spurious(),
                blur_drop_rate: default_blur_drop(),
            }),
            groups: vec![],
            ..PlanFile::single_variable(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        let mut ids: Vec<&str> = self.groups.iter().map(|g| g.group_id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate group_id in plan"));
        }
        if !(0.0..=1.0).contains(&self.stir.settle) {
            return Err(Error::invalid("stir.settle must lie in [0, 1]"));
        }
        if let Some(r) = &self.random {
            if r.pest_count_range.0 > r.pest_count_range.1 {
                return Err(Error::invalid("random.pest_count_range is reversed"));
            }
            let rates = [r.max_drop_rate, r.max_spurious_rate, r.blur_drop_rate];
            if rates.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("random degradation rates must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn expand(&self) -> Result<Vec<SceneJob>> {
        self.validate()?;
        let mut jobs = vec![];
        for (gi, g) in self.groups.iter().enumerate() {
            let cond = |phase, stir_speed, t_index, offset: f64| ConditionMetadata {
                group_id: g.group_id.clone(),
                phase,
                stir_speed,
                soil: g.soil,
                density_class: density_class(g.pest_count),
                pest_count: g.pest_count,
                t_index,
                frame_offset_s: offset,
            };
            let mut frames = vec![(cond(Phase::Static, StirSpeed::None, TIndex::T0, 0.0), 0.0, 0.0, false)];
            let (blur, noise) = self.stir.blur_noise(g.stir_speed);
            let n_stir = g.stirring_frames.max(1);
            for k in 0..n_stir {
                let t = if k + 1 == n_stir && n_stir > 1 { TIndex::T2 } else { TIndex::T1 };
                frames.push((cond(Phase::Stirring, g.stir_speed, t, 2.0 * (k + 1) as f64), blur, noise, true));
            }
            let stop = 2.0 * n_stir as f64;
            let mut f = 1.0;
            for k in 0..g.post_frames {
                f *= self.stir.settle;
                let t = if k == 0 { TIndex::T3 } else { TIndex::T4 };
                frames.push((cond(Phase::PostStir, g.stir_speed, t, stop + 1.0 + 2.0 * k as f64), blur * f, noise * f, false));
            }
            for (fi, (condition, blur, noise, stick)) in frames.into_iter().enumerate() {
                let seed = mix(self.seed, gi as u64 + 1, fi as u64);
                let mut spec = self.base(seed, condition);
                spec.cluster_tightness = g.cluster_tightness;
                spec.blur_sigma = blur;
                spec.noise_sigma = noise;
                spec.soil_speckle_density = if g.soil { self.soil_density } else { 0.0 };
                spec.distractor_count = g.distractor_count;
                spec.stick = stick;
                jobs.push(SceneJob {
                    name: format!("{}_{:02}", g.group_id, fi),
                    spec,
                    degrade: self.degrade,
                });
            }
        }
        if let Some(r) = &self.random {
            for i in 0..r.images {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0, i as u64 + 1));
                let count = rng.random_range(r.pest_count_range.0..=r.pest_count_range.1);
                let soil = rng.random_bool(0.4);
                let (phase, speed) = match rng.random_range(0..4u32) {
                    0 => (Phase::Static, StirSpeed::None),
                    1 => (Phase::Stirring, StirSpeed::Low),
                    2 => (Phase::Stirring, StirSpeed::Medium),
                    _ => (Phase::Stirring, StirSpeed::High),
                };
                let condition = ConditionMetadata {
                    group_id: format!("random_{i:04}"),
                    phase,
                    stir_speed: speed,
                    soil,
                    density_class: density_class(count),
                    pest_count: count,
                    t_index: if phase == Phase::Static { TIndex::T0 } else { TIndex::T1 },
                    frame_offset_s: if phase == Phase::Static { 0.0 } else { 2.0 },
                };
                let mut spec = self.base(rng.random(), condition);
                spec.cluster_tightness = rng.random_range(0.0..=1.0);
                spec.blur_sigma = if phase == Phase::Static { 0.0 } else { rng.random_range(0.0..=r.max_blur) };
                spec.noise_sigma = rng.random_range(0.0..=r.max_noise);
                spec.soil_speckle_density = if soil { rng.random_range(0.1..=0.6) } else { 0.0 };
                spec.distractor_count = rng.random_range(0..=r.max_distractors);
                                let drop = rng.random_range(0.0..=r.max_drop_rate) + if r.max_blur > 0.0 { r.blur_drop_rate * spec.blur_sigma / r.max_blur } else { 0.0 };
                let degrade = Degradation {
                    drop_rate: drop.min(1.0),
                    jitter_px: rng.random_range(0..=2),
                    spurious_rate: rng.random_range(0.0..=r.max_spurious_rate),
                };
                jobs.push(SceneJob {
                    name: format!("random_{i:04}"),
                    spec,
                    degrade,
                });
            }
        }
        Ok(jobs)
    }
}

/// Seed and size of the pristine corpus behind the bundled NIQE model.
pub const PRISTINE_SEED: u64 = 7;
pub const PRISTINE_IMAGES: usize = 120;

/// Clean, sharp, static scene `index` of the pristine family used to fit the
/// bundled NIQE model. Pest count, clumping and grain vary with the index.
pub fn pristine_spec(seed: u64, index: u64) -> SceneSpec {
    let count = 10 + (index as u32 % 71 * 7) % 71;
    let plan = PlanFile::single_variable(seed);
    let condition = ConditionMetadata {
        group_id: format!("pristine_{index:04}"),
        phase: Phase::Static,
        stir_speed: StirSpeed::None,
        soil: false,
        density_class: density_class(count),
        pest_count: count,
        t_index: TIndex::T0,
        frame_offset_s: 0.0,
    };
    let mut spec = plan.base(seed.wrapping_mul(1000).wrapping_add(index), condition);
    spec.cluster_tightness = (index % 5) as f64 / 4.0;
    spec.grain_sigma = default_grain() + 1.5 * (((index * 37) % 11) as f64 / 10.0 - 0.5);
    spec
}

/// Renders pristine scenes `0..count` as grayscale.
pub fn pristine_images(seed: u64, count: usize) -> Result<Vec<GrayImage>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| to_gray(&generate(&pristine_spec(seed, i))?.image))
        .collect()
}

/// Paths written by [`generate_corpus`], relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFiles {
    pub manifest: String,
    pub detections: String,
    pub ground_truth: String,
    pub images: usize,
}

/// Renders every job in parallel and writes PNGs, masks, manifest, ground
/// truth and stub detections. Output order follows `jobs`.
pub fn generate_corpus(jobs: &[SceneJob], seg: &SegmentationConfig, out_dir: impl AsRef<Path>) -> Result<CorpusFiles> {
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let rendered = jobs
        .par_iter()
        .map(|job| {
            let scene = generate(&job.spec)?;
            let dets = stub_detect(&scene.image, seg, &job.degrade, job.spec.seed ^ 0xD5)?;
            Ok((scene, dets))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(jobs.len());
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut gts: BTreeMap<String, Vec<GroundTruthBox>> = BTreeMap::new();
    for (job, (scene, d)) in jobs.iter().zip(rendered) {
        let rel = format!("images/{}.png", job.name);
        let path = out_dir.join(&rel);
        scene.image.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        let mask_rel = match &scene.tool_mask {
            Some(m) => {
                let r = format!("images/{}_mask.png", job.name);
                m.save(out_dir.join(&r))?;
                Some(r)
            }
            None => None,
        };
        records.push(ImageRecord {
            image_path: rel.clone(),
            resolved_path: path,
            detections: vec![],
            ground_truth: None,
            metadata: scene.metadata,
            resolved_mask_path: mask_rel.as_ref().map(|r| out_dir.join(r)),
            tool_mask_path: mask_rel,
        });
        dets.insert(rel.clone(), d);
        gts.insert(rel, scene.ground_truth);
    }
    let files = CorpusFiles {
        manifest: "manifest.csv".into(),
        detections: "detections.json".into(),
        ground_truth: "ground_truth.json".into(),
        images: records.len(),
    };
    save_manifest(out_dir.join(&files.manifest), &records)?;
    // Emit in manifest order rather than map order.
    let order: Vec<&str> = records.iter().map(|r| r.image_path.as_str()).collect();
    save_detections(
        out_dir.join(&files.detections),
        order.iter().map(|k| (*k, dets[*k].as_slice())),
    )?;
    save_ground_truth(
        out_dir.join(&files.ground_truth),
        order.iter().map(|k| (*k, gts[*k].as_slice())),
    )?;
    Ok(files)
}
