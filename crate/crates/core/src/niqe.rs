//! No-reference image quality in the NIQE family.
//!
//! An image is described by natural-scene statistics of its MSCN
//! (mean-subtracted, contrast-normalized) coefficients: per patch, a
//! generalized Gaussian fit of the coefficients plus asymmetric generalized
//! Gaussian fits of their products with the four neighbouring orientations,
//! computed at full and half resolution (18 features per scale, 36 total).
//! A pristine model is the multivariate Gaussian of those features over the
//! sharpest patches of a clean corpus; the score of an image is the
//! Mahalanobis-type distance between its own feature Gaussian and the model.
//!
//! Raw scores are "lower is better"; [`quality_score`] flips the sign so
//! that larger means higher quality.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_kernel, separable};
use crate::image_metrics::{average_gradient_magnitude, GrayImage};
use crate::special::gamma;

pub const FEATURES_PER_SCALE: usize = 18;
pub const SCALES: usize = 2;
pub const FEATURE_DIM: usize = FEATURES_PER_SCALE * SCALES;

pub const DEFAULT_PATCH_SIZE: usize = 96;
pub const DEFAULT_SHARPNESS_FRACTION: f64 = 0.75;

const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f64 = 7.0 / 6.0;
/// Stabilizing constant in the MSCN denominator (8-bit luminance scale).
const MSCN_C: f64 = 1.0;
const MIN_FIT_SAMPLES: usize = 16;
const MIN_CORPUS_IMAGES: usize = 10;
const MIN_SHARP_PATCHES: usize = 10;

/// MSCN coefficient field, same shape as the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Field {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    pub alpha: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdParams {
    pub alpha: f64,
    pub sigma_left: f64,
    pub sigma_right: f64,
}

impl AggdParams {
    /// Mean of the fitted AGGD.
    pub fn mean(&self) -> f64 {
        let a = self.alpha;
        (self.sigma_right - self.sigma_left) * gamma(2.0 / a) / gamma(1.0 / a)
            * (gamma(1.0 / a) / gamma(3.0 / a)).sqrt()
    }
}

/// Local Gaussian-weighted normalization `(I - μ) / (σ + 1)`.
pub fn mscn(img: &GrayImage) -> Result<Field> {
    let (w, h) = (img.width(), img.height());
    let min = 2 * (2 * WINDOW_RADIUS + 1);
    if w < min || h < min {
        return Err(Error::invalid(format!(
            "image {w}x{h} too small for MSCN (need at least {min}x{min})"
        )));
    }
    let kernel = gaussian_kernel(WINDOW_SIGMA, WINDOW_RADIUS);
    let px = img.pixels();
    let mu = separable(px, w, h, &kernel);
    let sq: Vec<f64> = px.iter().map(|v| v * v).collect();
    let mu_sq = separable(&sq, w, h, &kernel);
    let data = px
        .iter()
        .zip(mu.iter().zip(&mu_sq))
        .map(|(&i, (&m, &m2))| {
            let sigma = (m2 - m * m).max(0.0).sqrt();
            (i - m) / (sigma + MSCN_C)
        })
        .collect();
    Ok(Field {
        width: w,
        height: h,
        data,
    })
}

struct ShapeTables {
    alphas: Vec<f64>,
    /// Γ(1/a)Γ(3/a)/Γ(2/a)², decreasing in a.
    ggd_ratio: Vec<f64>,
}

fn tables() -> &'static ShapeTables {
    static TABLES: OnceLock<ShapeTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let alphas: Vec<f64> = (0..9800).map(|i| 0.2 + 0.001 * i as f64).collect();
        let ggd_ratio = alphas
            .iter()
            .map(|&a| gamma(1.0 / a) * gamma(3.0 / a) / gamma(2.0 / a).powi(2))
            .collect();
        ShapeTables { alphas, ggd_ratio }
    })
}

/// Shape whose moment ratio is closest to `target` on the 0.001 grid over [0.2, 10).
fn solve_shape(target: f64) -> f64 {
    let t = tables();
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, r) in t.ggd_ratio.iter().enumerate() {
        let err = (r - target).abs();
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    t.alphas[best]
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::invalid(format!(
            "distribution fit needs at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("distribution fit samples must be finite"));
    }
    if samples.iter().all(|&v| v == 0.0) {
        return Err(Error::degenerate("all samples are zero"));
    }
    Ok(())
}

/// Moment-matching fit of a zero-mean generalized Gaussian.
pub fn fit_ggd(samples: &[f64]) -> Result<GgdParams> {
    check_samples(samples)?;
    let n = samples.len() as f64;
    let variance = samples.iter().map(|v| v * v).sum::<f64>() / n;
    let abs_mean = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let rho = variance / (abs_mean * abs_mean);
    Ok(GgdParams {
        alpha: solve_shape(rho),
        variance,
    })
}

/// Moment-matching fit of an asymmetric generalized Gaussian.
pub fn fit_aggd(samples: &[f64]) -> Result<AggdParams> {
    check_samples(samples)?;
    let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in samples {
        if v < 0.0 {
            sl += v * v;
            nl += 1;
        } else if v > 0.0 {
            sr += v * v;
            nr += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    if nl == 0 || nr == 0 {
        return Err(Error::degenerate("AGGD fit needs samples on both sides of zero"));
    }
    let sigma_left = (sl / nl as f64).sqrt();
    let sigma_right = (sr / nr as f64).sqrt();
    let g = sigma_left / sigma_right;
    let n = samples.len() as f64;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    // The AGGD ratio Γ(2/a)²/(Γ(1/a)Γ(3/a)) is the reciprocal of the GGD one.
    Ok(AggdParams {
        alpha: solve_shape(1.0 / r_norm),
        sigma_left,
        sigma_right,
    })
}

/// 18 features of one MSCN patch.
fn patch_features(field: &Field, x0: usize, y0: usize, size: usize) -> Result<[f64; FEATURES_PER_SCALE]> {
    let mut coeffs = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        coeffs.extend_from_slice(&field.data[y * field.width + x0..y * field.width + x0 + size]);
    }
    let ggd = fit_ggd(&coeffs)?;
    let mut out = [0.0; FEATURES_PER_SCALE];
    out[0] = ggd.alpha;
    out[1] = ggd.variance;

    // Horizontal, vertical, main diagonal, anti-diagonal neighbours.
    let shifts: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];
    let mut products = Vec::with_capacity(size * size);
    for (k, &(dx, dy)) in shifts.iter().enumerate() {
        products.clear();
        for y in 0..size - dy as usize {
            for x in 0..size {
                let nx = x as isize + dx;
                if nx < 0 || nx >= size as isize {
                    continue;
                }
                let a = field.get(x0 + x, y0 + y);
                let b = field.get(x0 + nx as usize, y0 + y + dy as usize);
                products.push(a * b);
            }
        }
        let p = fit_aggd(&products)?;
        let base = 2 + 4 * k;
        out[base] = p.alpha;
        out[base + 1] = p.mean();
        out[base + 2] = p.sigma_left * p.sigma_left;
        out[base + 3] = p.sigma_right * p.sigma_right;
    }
    Ok(out)
}

/// 2×2 box downsampling (odd trailing row/column dropped).
pub fn downsample_half(img: &GrayImage) -> Result<GrayImage> {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y)
                + img.get(2 * x + 1, 2 * y)
                + img.get(2 * x, 2 * y + 1)
                + img.get(2 * x + 1, 2 * y + 1);
            px.push(s / 4.0);
        }
    }
    GrayImage::new(w, h, px)
}

/// A scored patch: 36 features plus the full-resolution sharpness used for selection.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    pub features: [f64; FEATURE_DIM],
    pub sharpness: f64,
}

/// Features of every usable non-overlapping patch. Patches whose statistics
/// are degenerate (e.g. perfectly flat) are skipped.
pub fn image_patch_features(img: &GrayImage, patch_size: usize) -> Result<Vec<PatchFeatures>> {
    if patch_size < 2 * (2 * WINDOW_RADIUS + 1) || patch_size % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch size {patch_size} must be even and at least {}",
            2 * (2 * WINDOW_RADIUS + 1)
        )));
    }
    let nx = img.width() / patch_size;
    let ny = img.height() / patch_size;
    if nx == 0 || ny == 0 {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than one {patch_size}px patch",
            img.width(),
            img.height()
        )));
    }
    let full = mscn(img)?;
    let half_img = downsample_half(img)?;
    let half = mscn(&half_img)?;
    let hp = patch_size / 2;

    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (x0, y0) = (i * patch_size, j * patch_size);
            let (Ok(f1), Ok(f2)) = (
                patch_features(&full, x0, y0, patch_size),
                patch_features(&half, i * hp, j * hp, hp),
            ) else {
                continue;
            };
            let mut features = [0.0; FEATURE_DIM];
            features[..FEATURES_PER_SCALE].copy_from_slice(&f1);
            features[FEATURES_PER_SCALE..].copy_from_slice(&f2);
            if features.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let sharpness = average_gradient_magnitude(&img.crop(x0, y0, patch_size, patch_size)?)?;
            out.push(PatchFeatures { features, sharpness });
        }
    }
    Ok(out)
}

fn sharp_subset(mut patches: Vec<PatchFeatures>, fraction: f64) -> Vec<PatchFeatures> {
    let keep = ((patches.len() as f64) * fraction).ceil() as usize;
    // Stable sort keeps raster order among equal sharpness.
    patches.sort_by(|a, b| b.sharpness.total_cmp(&a.sharpness));
    patches.truncate(keep);
    patches
}

fn mvg(rows: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mean = DVector::zeros(FEATURE_DIM);
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    if n > 1 {
        for a in 0..FEATURE_DIM {
            for b in a..FEATURE_DIM {
                let s: f64 = rows
                    .iter()
                    .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                cov[(a, b)] = s;
                cov[(b, a)] = s;
            }
        }
    }
    (mean, cov)
}

/// Pristine multivariate-Gaussian model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub patch_size: usize,
    pub scales: usize,
    #[serde(default = "default_sharpness")]
    pub sharpness_fraction: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

fn default_sharpness() -> f64 {
    DEFAULT_SHARPNESS_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NiqeConfig {
    pub patch_size: usize,
    pub sharpness_fraction: f64,
}

impl Default for NiqeConfig {
    fn default() -> Self {
        NiqeConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            sharpness_fraction: DEFAULT_SHARPNESS_FRACTION,
        }
    }
}

/// Fits the pristine model from the sharpest patches of each image.
pub fn fit_pristine_model(images: &[GrayImage], cfg: NiqeConfig) -> Result<NiqeModel> {
    if !(cfg.sharpness_fraction > 0.0 && cfg.sharpness_fraction <= 1.0) {
        return Err(Error::invalid("sharpness_fraction must lie in (0, 1]"));
    }
    if images.len() < MIN_CORPUS_IMAGES {
        return Err(Error::invalid(format!(
            "pristine corpus needs at least {MIN_CORPUS_IMAGES} images, got {}",
            images.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let sharp = sharp_subset(image_patch_features(img, cfg.patch_size)?, cfg.sharpness_fraction);
        if sharp.len() < MIN_SHARP_PATCHES {
            return Err(Error::invalid(format!(
                "image {i} yields {} usable sharp patches (need {MIN_SHARP_PATCHES})",
                sharp.len()
            )));
        }
        rows.extend(sharp.into_iter().map(|p| p.features));
    }
    let (mean, cov) = mvg(&rows);
    Ok(NiqeModel {
        patch_size: cfg.patch_size,
        scales: SCALES,
        sharpness_fraction: cfg.sharpness_fraction,
        mean: mean.iter().copied().collect(),
        cov: (0..FEATURE_DIM).map(|r| cov.row(r).iter().copied().collect()).collect(),
    })
}

impl NiqeModel {
    pub fn validate(&self) -> Result<()> {
        if self.scales != SCALES {
            return Err(Error::invalid(format!("model has {} scales, expected {SCALES}", self.scales)));
        }
        if self.mean.len() != FEATURE_DIM
            || self.cov.len() != FEATURE_DIM
            || self.cov.iter().any(|r| r.len() != FEATURE_DIM)
        {
            return Err(Error::invalid(format!("model must be {FEATURE_DIM}-dimensional")));
        }
        if self.mean.iter().chain(self.cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model contains non-finite values"));
        }
        for a in 0..FEATURE_DIM {
            for b in 0..a {
                if (self.cov[a][b] - self.cov[b][a]).abs() > 1e-9 {
                    return Err(Error::invalid("model covariance is not symmetric"));
                }
            }
        }
        let min_eig = SymmetricEigen::new(self.cov_matrix()).eigenvalues.min();
        if min_eig < -1e-9 {
            return Err(Error::invalid(format!(
                "model covariance not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        Ok(())
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(FEATURE_DIM, FEATURE_DIM, |r, c| self.cov[r][c])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NiqeModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: NiqeModel = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::save_json(path, self)
    }

    /// Model fit from the built-in synthetic pristine corpus.
    pub fn builtin() -> &'static NiqeModel {
        static MODEL: OnceLock<NiqeModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            serde_json::from_str(include_str!("../assets/niqe_pristine.json"))
                .expect("bundled NIQE model parses")
        })
    }
}

/// `sqrt(dᵀ P⁺ d)` with `P` the average of the two covariances; eigenvalues
/// below a relative cutoff are treated as zero.
pub fn mvg_distance(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let pooled = (cov_a + cov_b) * 0.5;
    let d = mean_a - mean_b;
    let eig = SymmetricEigen::new(pooled);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = max * 1e-12 * FEATURE_DIM as f64;
    let projected = eig.eigenvectors.transpose() * d;
    let q: f64 = projected
        .iter()
        .zip(eig.eigenvalues.iter())
        .filter(|(_, &l)| l > cutoff)
        .map(|(p, &l)| p * p / l)
        .sum();
    q.max(0.0).sqrt()
}

/// Distance between the image's patch-feature Gaussian and the model; lower is better.
pub fn niqe_score(img: &GrayImage, model: &NiqeModel) -> Result<f64> {
    let patches = image_patch_features(img, model.patch_size)?;
    if patches.is_empty() {
        return Err(Error::degenerate("no patch with usable statistics"));
    }
    let rows: Vec<_> = patches.into_iter().map(|p| p.features).collect();
    let (mean, cov) = mvg(&rows);
    Ok(mvg_distance(&model.mean_vector(), &model.cov_matrix(), &mean, &cov))
}

/// `-niqe_score`, so larger values mean better quality.
pub fn quality_score(img: &GrayImage, model: &NiqeModel) -> Result<f64> {
    niqe_score(img, model).map(|s| -s)
}
