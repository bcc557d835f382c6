//! Hypothesis-driven sensitivity analysis for choosing quality and complexity
//! metrics.
//!
//! Each metric column of a [`ScoreTable`] is tested against four expected
//! effects of the acquisition conditions: stirring vs static, stirring speed,
//! soil presence and pest density. Quality metrics are expected to drop under
//! the harder condition and complexity metrics to rise. A hypothesis is
//! supported when the test is significant and every mean difference carries
//! the expected sign.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ConditionMetadata, DensityClass, Phase, StirSpeed};
use crate::error::{Error, Result};
use crate::stats::{mean, one_way_anova, welch_t_test};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisFactor {
    Temporal,
    StirSpeed,
    Soil,
    Density,
}

impl HypothesisFactor {
    pub const ALL: [HypothesisFactor; 4] = [
        HypothesisFactor::Temporal,
        HypothesisFactor::StirSpeed,
        HypothesisFactor::Soil,
        HypothesisFactor::Density,
    ];

    pub fn title(self) -> &'static str {
        match self {
            HypothesisFactor::Temporal => "Temporal changes",
            HypothesisFactor::StirSpeed => "Stirring speed",
            HypothesisFactor::Soil => "Presence of soil",
            HypothesisFactor::Density => "Pest density",
        }
    }
}

impl fmt::Display for HypothesisFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HypothesisFactor::Temporal => "temporal",
            HypothesisFactor::StirSpeed => "stir_speed",
            HypothesisFactor::Soil => "soil",
            HypothesisFactor::Density => "density",
        })
    }
}

/// Which direction of change the hypotheses expect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Higher is better; harder conditions should lower the score.
    Quality,
    /// Harder conditions should raise the score.
    Complexity,
}

impl Polarity {
    fn expects(self, diff: f64) -> bool {
        match self {
            Polarity::Quality => diff < 0.0,
            Polarity::Complexity => diff > 0.0,
        }
    }
}

/// Per-image metric scores joined with acquisition conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    ids: Vec<String>,
    metadata: Vec<ConditionMetadata>,
    columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(ids: Vec<String>, metadata: Vec<ConditionMetadata>) -> Result<Self> {
        if ids.len() != metadata.len() {
            return Err(Error::invalid("ids and metadata differ in length"));
        }
        Ok(ScoreTable {
            ids,
            metadata,
            columns: vec![],
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn metadata(&self) -> &[ConditionMetadata] {
        &self.metadata
    }

    pub fn metric_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn add_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.columns.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate metric column `{name}`")));
        }
        if values.len() != self.ids.len() {
            return Err(Error::invalid(format!(
                "metric `{name}` has {} values for {} rows",
                values.len(),
                self.ids.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "metric `{name}` has a non-finite value for `{}`",
                self.ids[i]
            )));
        }
        self.columns.push((name, values));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no metric column `{name}`")))
    }

    /// Flips a lower-is-better column so every metric reads higher = more.
    pub fn negate(&mut self, name: &str) -> Result<()> {
        let (_, values) = self
            .columns
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("no metric column `{name}`")))?;
        values.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    }

    /// Joins the columns of an external `image_path,<metric>...` CSV by image id.
    /// Every table row must be present in the file. Returns the added names.
    pub fn join_external(&mut self, path: impl AsRef<Path>) -> Result<Vec<String>> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.get(0) != Some("image_path") {
            return Err(Error::Record {
                path: path.to_path_buf(),
                row: 1,
                field: "image_path".into(),
                message: "first column must be image_path".into(),
            });
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut values: Vec<HashMap<String, f64>> = vec![HashMap::new(); names.len()];
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let id = rec.get(0).unwrap_or("").to_string();
            for (k, name) in names.iter().enumerate() {
                let cell = rec.get(k + 1).unwrap_or("");
                let v: f64 = cell.parse().map_err(|_| Error::Record {
                    path: path.to_path_buf(),
                    row,
                    field: name.clone(),
                    message: format!("not a number: `{cell}`"),
                })?;
                values[k].insert(id.clone(), v);
            }
        }
        for (name, map) in names.iter().zip(values) {
            let col = self
                .ids
                .iter()
                .map(|id| {
                    map.get(id).copied().ok_or_else(|| {
                        Error::invalid(format!("{}: no `{name}` score for `{id}`", path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.add_column(name.clone(), col)?;
        }
        Ok(names)
    }
}

/// Min-max scaling to `[0, 1]`; a constant column maps to all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDiff {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub metric: String,
    pub factor: HypothesisFactor,
    pub mean_diffs: Vec<MeanDiff>,
    pub p_value: f64,
    pub supported: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub alpha: f64,
    /// Min-max scale each metric column before differencing.
    pub normalize: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            alpha: DEFAULT_ALPHA,
            normalize: true,
        }
    }
}

fn level_values(
    values: &[f64],
    meta: &[ConditionMetadata],
    metric: &str,
    level: &str,
    keep: impl Fn(&ConditionMetadata) -> bool,
) -> Result<Vec<f64>> {
    let out: Vec<f64> = values
        .iter()
        .zip(meta)
        .filter(|(_, m)| keep(m))
        .map(|(v, _)| *v)
        .collect();
    if out.len() < 2 {
        return Err(Error::invalid(format!(
            "metric `{metric}`: condition level `{level}` has {} rows (need at least 2)",
            out.len()
        )));
    }
    Ok(out)
}

fn two_level_row(
    metric: &str,
    factor: HypothesisFactor,
    label: &str,
    baseline: &[f64],
    treated: &[f64],
    polarity: Polarity,
    alpha: f64,
) -> Result<HypothesisRow> {
    let diff = mean(treated) - mean(baseline);
    let p = welch_t_test(treated, baseline)?.p;
    Ok(HypothesisRow {
        metric: metric.to_string(),
        factor,
        mean_diffs: vec![MeanDiff {
            label: label.to_string(),
            value: diff,
        }],
        p_value: p,
        supported: p < alpha && polarity.expects(diff),
    })
}

/// Tests all four hypotheses for one metric column.
pub fn evaluate_hypotheses(
    table: &ScoreTable,
    metric: &str,
    polarity: Polarity,
    opts: &SensitivityOptions,
) -> Result<Vec<HypothesisRow>> {
    let raw = table.column(metric)?;
    let values = if opts.normalize { min_max(raw) } else { raw.to_vec() };
    let meta = table.metadata();
    let lv = |level: &str, keep: &dyn Fn(&ConditionMetadata) -> bool| {
        level_values(&values, meta, metric, level, keep)
    };

    let static_ = lv("phase=static", &|m| m.phase == Phase::Static)?;
    let stirring = lv("phase=stirring", &|m| m.phase == Phase::Stirring)?;
    let temporal = two_level_row(
        metric,
        HypothesisFactor::Temporal,
        "Stirring_Static",
        &static_,
        &stirring,
        polarity,
        opts.alpha,
    )?;

    let speed = |s: StirSpeed| {
        lv(&format!("stir_speed={s}"), &move |m: &ConditionMetadata| {
            m.phase == Phase::Stirring && m.stir_speed == s
        })
    };
    let (low, med, high) = (speed(StirSpeed::Low)?, speed(StirSpeed::Medium)?, speed(StirSpeed::High)?);
    let diffs = vec![
        MeanDiff {
            label: "Med_Low".into(),
            value: mean(&med) - mean(&low),
        },
        MeanDiff {
            label: "High_Low".into(),
            value: mean(&high) - mean(&low),
        },
        MeanDiff {
            label: "High_Med".into(),
            value: mean(&high) - mean(&med),
        },
    ];
    let p = one_way_anova(&[low, med, high])?.p;
    let speed_row = HypothesisRow {
        metric: metric.to_string(),
        factor: HypothesisFactor::StirSpeed,
        supported: p < opts.alpha && diffs.iter().all(|d| polarity.expects(d.value)),
        mean_diffs: diffs,
        p_value: p,
    };

    let without = lv("soil=false", &|m| !m.soil)?;
    let with = lv("soil=true", &|m| m.soil)?;
    let soil = two_level_row(
        metric,
        HypothesisFactor::Soil,
        "Soil_NoSoil",
        &without,
        &with,
        polarity,
        opts.alpha,
    )?;

    let lo = lv("density_class=low", &|m| m.density_class == DensityClass::Low)?;
    let hi = lv("density_class=high", &|m| m.density_class == DensityClass::High)?;
    let density = two_level_row(
        metric,
        HypothesisFactor::Density,
        "High_Low",
        &lo,
        &hi,
        polarity,
        opts.alpha,
    )?;

    Ok(vec![temporal, speed_row, soil, density])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanking {
    pub metric: String,
    pub supported: Vec<HypothesisFactor>,
    /// Σ|Mean_Diff| over supported rows.
    pub support_magnitude: f64,
    pub rationale: String,
}

/// Ranks metrics by number of supported hypotheses, then by summed absolute
/// mean difference over those hypotheses, then by name.
pub fn select_optimal(rows: &[(String, Vec<HypothesisRow>)]) -> Result<Vec<MetricRanking>> {
    if rows.is_empty() {
        return Err(Error::invalid("no metrics to rank"));
    }
    let mut ranked: Vec<MetricRanking> = rows
        .iter()
        .map(|(metric, rs)| {
            let sup: Vec<&HypothesisRow> = rs.iter().filter(|r| r.supported).collect();
            let magnitude = sup
                .iter()
                .flat_map(|r| r.mean_diffs.iter().map(|d| d.value.abs()))
                .sum();
            let factors: Vec<HypothesisFactor> = sup.iter().map(|r| r.factor).collect();
            let listed = if factors.is_empty() {
                "none".to_string()
            } else {
                factors.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(", ")
            };
            MetricRanking {
                metric: metric.clone(),
                rationale: format!(
                    "{metric}: {} of {} hypotheses supported ({listed}); sum |Mean_Diff| = {magnitude:.4}",
                    factors.len(),
                    rs.len()
                ),
                supported: factors,
                support_magnitude: magnitude,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.supported
            .len()
            .cmp(&a.supported.len())
            .then(b.support_magnitude.total_cmp(&a.support_magnitude))
            .then(a.metric.cmp(&b.metric))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub polarity: Polarity,
    pub metrics: Vec<String>,
    pub rows: Vec<HypothesisRow>,
    pub ranking: Vec<MetricRanking>,
}

impl HypothesisReport {
    pub fn build(
        table: &ScoreTable,
        metrics: &[String],
        polarity: Polarity,
        opts: &SensitivityOptions,
    ) -> Result<Self> {
        let per_metric = metrics
            .iter()
            .map(|m| Ok((m.clone(), evaluate_hypotheses(table, m, polarity, opts)?)))
            .collect::<Result<Vec<_>>>()?;
        let ranking = select_optimal(&per_metric)?;
        Ok(HypothesisReport {
            polarity,
            metrics: metrics.to_vec(),
            rows: per_metric.into_iter().flat_map(|(_, r)| r).collect(),
            ranking,
        })
    }

    pub fn best(&self) -> Option<&MetricRanking> {
        self.ranking.first()
    }

    /// Rows are factor × statistic, columns are metrics.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["factor".to_string(), "statistic".to_string()];
        header.extend(self.metrics.iter().cloned());
        let wrap = |source| Error::Csv {
            path: "<report>".into(),
            source,
        };
        w.write_record(&header).map_err(wrap)?;
        let mut by_key: BTreeMap<(&str, HypothesisFactor), &HypothesisRow> = BTreeMap::new();
        for r in &self.rows {
            by_key.insert((r.metric.as_str(), r.factor), r);
        }
        for factor in HypothesisFactor::ALL {
            let Some(first) = self.metrics.first().and_then(|m| by_key.get(&(m.as_str(), factor))) else {
                continue;
            };
            let n_diffs = first.mean_diffs.len();
            for k in 0..n_diffs {
                let label = if n_diffs == 1 {
                    "Mean_Diff".to_string()
                } else {
                    format!("Mean_Diff ({})", first.mean_diffs[k].label)
                };
                let mut rec = vec![factor.title().to_string(), label];
                rec.extend(self.metrics.iter().map(|m| {
                    by_key
                        .get(&(m.as_str(), factor))
                        .map(|r| format!("{:.4}", r.mean_diffs[k].value))
                        .unwrap_or_default()
                }));
                w.write_record(&rec).map_err(wrap)?;
            }
            for (stat, f) in [
                ("P_value", &(|r: &HypothesisRow| format!("{:.4}", r.p_value)) as &dyn Fn(&HypothesisRow) -> String),
                ("Supported", &|r: &HypothesisRow| r.supported.to_string()),
            ] {
                let mut rec = vec![factor.title().to_string(), stat.to_string()];
                rec.extend(
                    self.metrics
                        .iter()
                        .map(|m| by_key.get(&(m.as_str(), factor)).map(|r| f(r)).unwrap_or_default()),
                );
                w.write_record(&rec).map_err(wrap)?;
            }
        }
        w.flush().map_err(|e| Error::io("<report>", e))
    }
}
