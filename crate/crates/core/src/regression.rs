//! Polynomial confidence model over min-max normalized factors.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Factor, FactorVector};
use crate::error::{Error, Result};

pub const DEFAULT_DEGREE: u32 = 2;
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// One labeled training or test example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub factors: FactorVector,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRange {
    pub factor: Factor,
    pub min: f64,
    pub max: f64,
}

/// Per-factor min-max scaling fitted on a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub ranges: Vec<FactorRange>,
}

impl Normalizer {
    pub fn fit(samples: &[FactorVector], factors: &[Factor]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot fit a normalizer on zero samples"));
        }
        let ranges = factors
            .iter()
            .map(|&f| {
                let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                for s in samples {
                    let v = s.get(f);
                    if !v.is_finite() {
                        return Err(Error::invalid(format!("non-finite {f} score")));
                    }
                    min = min.min(v);
                    max = max.max(v);
                }
                Ok(FactorRange { factor: f, min, max })
            })
            .collect::<Result<_>>()?;
        Ok(Normalizer { ranges })
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.ranges {
            if !(r.min.is_finite() && r.max.is_finite() && r.max >= r.min) {
                return Err(Error::invalid(format!(
                    "normalizer range for {} is [{}, {}]",
                    r.factor, r.min, r.max
                )));
            }
        }
        Ok(())
    }

    /// Scales into `[0, 1]`. The flag is set when any input fell outside the
    /// training range and had to be clamped.
    pub fn apply(&self, fv: &FactorVector) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let x = self
            .ranges
            .iter()
            .map(|r| {
                let v = fv.get(r.factor);
                let span = r.max - r.min;
                let t = if span > 0.0 { (v - r.min) / span } else { 0.0 };
                if !(0.0..=1.0).contains(&t) {
                    clamped = true;
                }
                t.clamp(0.0, 1.0)
            })
            .collect();
        (x, clamped)
    }
}

/// Exponent vectors of all monomials of total degree ≤ `degree` in `k`
/// variables, ordered by degree then lexicographically (descending exponents).
pub fn monomials(k: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(k: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == k - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(k, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = vec![];
    for d in 0..=degree {
        if k == 0 {
            if d == 0 {
                out.push(vec![]);
            }
            continue;
        }
        rec(k, d, &mut vec![], &mut out);
    }
    out
}

pub fn basis_size(k: usize, degree: u32) -> usize {
    // C(degree + k, k)
    let mut c = 1usize;
    for i in 1..=k {
        c = c * (degree as usize + i) / i;
    }
    c
}

fn expand(x: &[f64], terms: &[Vec<u32>]) -> Vec<f64> {
    terms
        .iter()
        .map(|e| e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub confidence: f64,
    pub clamped_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub n_train: usize,
    pub train: ModelEvaluation,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub degree: u32,
    pub feature_names: Vec<Factor>,
    pub coefficients: Vec<f64>,
    pub normalizer: Normalizer,
    pub ridge_lambda: f64,
    pub info: ModelInfo,
}

fn targets_ss_tot(y: &[f64]) -> f64 {
    // Exactly constant labels would otherwise leave a rounding residue.
    if y.iter().all(|v| *v == y[0]) {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum()
}

/// Least-squares fit of the polynomial basis over normalized factors, with a
/// ridge penalty on every non-intercept coefficient.
pub fn fit(samples: &[Sample], factors: &[Factor], degree: u32, ridge_lambda: f64) -> Result<ConfidenceModel> {
    if factors.is_empty() {
        return Err(Error::invalid("no factors selected"));
    }
    let mut seen = factors.to_vec();
    seen.sort();
    seen.dedup();
    if seen.len() != factors.len() {
        return Err(Error::invalid("duplicate factor in selection"));
    }
    if degree < 1 {
        return Err(Error::invalid("degree must be at least 1"));
    }
    if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge_lambda must be >= 0, got {ridge_lambda}")));
    }
    let terms = monomials(factors.len(), degree);
    let p = terms.len();
    if samples.len() <= p {
        return Err(Error::invalid(format!(
            "underdetermined fit: {} samples for {p} coefficients",
            samples.len()
        )));
    }
    let y: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite confidence label"));
    }
    if targets_ss_tot(&y) <= 0.0 {
        return Err(Error::degenerate("confidence labels have zero variance"));
    }
    let fvs: Vec<FactorVector> = samples.iter().map(|s| s.factors).collect();
    let normalizer = Normalizer::fit(&fvs, factors)?;

    let n = samples.len();
    let extra = if ridge_lambda > 0.0 { p - 1 } else { 0 };
    let mut a = DMatrix::<f64>::zeros(n + extra, p);
    let mut b = DVector::<f64>::zeros(n + extra);
    for (i, s) in samples.iter().enumerate() {
        let (x, _) = normalizer.apply(&s.factors);
        for (j, v) in expand(&x, &terms).into_iter().enumerate() {
            a[(i, j)] = v;
        }
        b[i] = s.confidence;
    }
    let root = ridge_lambda.sqrt();
    for j in 0..extra {
        a[(n + j, j + 1)] = root;
    }
    let svd = a.svd(true, true);
    let coef = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;
    let coefficients: Vec<f64> = coef.iter().copied().collect();
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite regression coefficient".into()));
    }
    let mut model = ConfidenceModel {
        degree,
        feature_names: factors.to_vec(),
        coefficients,
        normalizer,
        ridge_lambda,
        info: ModelInfo {
            n_train: n,
            train: ModelEvaluation { mse: 0.0, r2: 0.0 },
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    model.info.train = model.evaluate(samples)?;
    Ok(model)
}

impl ConfidenceModel {
    pub fn validate(&self) -> Result<()> {
        self.normalizer.validate()?;
        let names: Vec<Factor> = self.normalizer.ranges.iter().map(|r| r.factor).collect();
        if names != self.feature_names {
            return Err(Error::invalid("normalizer factors differ from feature_names"));
        }
        let want = basis_size(self.feature_names.len(), self.degree);
        if self.coefficients.len() != want {
            return Err(Error::invalid(format!(
                "model has {} coefficients, basis needs {want}",
                self.coefficients.len()
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coefficient in model"));
        }
        Ok(())
    }

    /// Polynomial value before output clamping.
    pub fn raw(&self, fv: &FactorVector) -> (f64, bool) {
        let (x, clamped) = self.normalizer.apply(fv);
        let terms = monomials(x.len(), self.degree);
        let v = expand(&x, &terms)
            .iter()
            .zip(&self.coefficients)
            .map(|(a, c)| a * c)
            .sum();
        (v, clamped)
    }

    pub fn predict(&self, fv: &FactorVector) -> Result<Prediction> {
        for f in &self.feature_names {
            if !fv.get(*f).is_finite() {
                return Err(Error::invalid(format!("missing or non-finite {f} score")));
            }
        }
        let (v, clamped_input) = self.raw(fv);
        Ok(Prediction {
            confidence: v.clamp(0.0, 1.0),
            clamped_input,
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<ModelEvaluation> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot evaluate on zero samples"));
        }
        let y: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
        let ss_tot = targets_ss_tot(&y);
        if ss_tot <= 0.0 {
            return Err(Error::degenerate("evaluation labels have zero variance"));
        }
        let mut ss_res = 0.0;
        for s in samples {
            let p = self.predict(&s.factors)?.confidence;
            ss_res += (p - s.confidence).powi(2);
        }
        Ok(ModelEvaluation {
            mse: ss_res / samples.len() as f64,
            r2: 1.0 - ss_res / ss_tot,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ConfidenceModel = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::save_json(path, self)
    }
}

/// Deterministic shuffled split; returns (train, test).
pub fn train_test_split<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).round() as usize;
    let (a, b) = idx.split_at(n_train);
    Ok((
        a.iter().map(|&i| items[i].clone()).collect(),
        b.iter().map(|&i| items[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub factors: Vec<Factor>,
    pub train: ModelEvaluation,
    pub test: ModelEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub degree: u32,
    pub ridge_lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub rows: Vec<AblationRow>,
}

pub const BASELINE_FACTORS: [Factor; 3] = [Factor::Mdcbb, Factor::Pn, Factor::Agm];

fn row_label(f: Factor) -> &'static str {
    match f {
        Factor::Iq => "IQA",
        other => other.name(),
    }
}

/// Single-factor models, the MDCBB+PN+AGM baseline and the full model, all
/// on the same split.
pub fn ablation(train: &[Sample], test: &[Sample], degree: u32, ridge_lambda: f64) -> Result<AblationTable> {
    let mut specs: Vec<(String, Vec<Factor>)> = Factor::ALL
        .iter()
        .map(|&f| (row_label(f).to_string(), vec![f]))
        .collect();
    specs.push(("Baseline (MDCBB+PN+AGM)".into(), BASELINE_FACTORS.to_vec()));
    specs.push(("Full".into(), Factor::COLUMN_ORDER.to_vec()));
    let rows = specs
        .into_iter()
        .map(|(name, factors)| {
            if train.len() < 8 {
                return Err(Error::invalid(format!("{name}: need at least 8 training samples")));
            }
            let m = fit(train, &factors, degree, ridge_lambda)?;
            Ok(AblationRow {
                name,
                train: m.info.train,
                test: m.evaluate(test)?,
                factors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        degree,
        ridge_lambda,
        n_train: train.len(),
        n_test: test.len(),
        rows,
    })
}

/// `Factors,MSE,R2` rows, four decimals.
pub fn write_table<W: Write>(rows: &[(String, ModelEvaluation)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |source| Error::Csv {
        path: "<table>".into(),
        source,
    };
    w.write_record(["Factors", "MSE", "R2"]).map_err(wrap)?;
    for (name, e) in rows {
        w.write_record([name.clone(), format!("{:.4}", e.mse), format!("{:.4}", e.r2)])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows: Vec<(String, ModelEvaluation)> =
            self.rows.iter().map(|r| (r.name.clone(), r.test)).collect();
        write_table(&rows, out)
    }
}

/// One series per factor of (normalized score, confidence) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub factor: Factor,
    pub points: Vec<(f64, f64)>,
}

pub fn export_scatter(samples: &[Sample]) -> Result<Vec<ScatterSeries>> {
    let fvs: Vec<FactorVector> = samples.iter().map(|s| s.factors).collect();
    let norm = Normalizer::fit(&fvs, &Factor::ALL)?;
    let mut series: Vec<ScatterSeries> = Factor::ALL
        .iter()
        .map(|&factor| ScatterSeries { factor, points: Vec::with_capacity(samples.len()) })
        .collect();
    for s in samples {
        let (x, _) = norm.apply(&s.factors);
        for (k, v) in x.into_iter().enumerate() {
            series[k].points.push((v, s.confidence));
        }
    }
    Ok(series)
}

/// Long-format CSV: `factor,score,confidence`.
pub fn write_scatter_csv<W: Write>(series: &[ScatterSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |source| Error::Csv {
        path: "<scatter>".into(),
        source,
    };
    w.write_record(["factor", "score", "confidence"]).map_err(wrap)?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.factor.name().to_string(), x.to_string(), y.to_string()])
                .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io("<scatter>", e))
}
