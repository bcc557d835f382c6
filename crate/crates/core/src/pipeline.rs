//! Per-image factor scoring and the score/label CSV files joining the stages.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::{attach, load_detections, load_ground_truth, load_manifest, ConditionMetadata, FactorVector, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{counting_factors, evaluate_corpus, DetectionEvalReport, MatchResult};
use crate::image_metrics::{average_gradient_magnitude, edge_density, histogram_entropy, to_gray};
use crate::niqe::{niqe_score, NiqeModel};
use crate::regression::{Prediction, Sample};
use crate::scene::{extract_centroids, recolor_tool, BinaryMask};
use crate::sensitivity::ScoreTable;
use crate::uniformity::pdu_score;

pub const FLAG_NO_DETECTIONS: &str = "no_detections";
pub const FLAG_TOOL_RECOLORED: &str = "tool_recolored";

/// Factor scores plus the raw metric values and cluster debug summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_path: String,
    pub factors: FactorVector,
    pub niqe: f64,
    pub entropy: f64,
    pub edge_density: f64,
    pub n_centroids: usize,
    pub n_clusters: usize,
    pub noise_count: usize,
    pub eps: Option<f64>,
    pub flags: Vec<String>,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8())
}

/// Scores one image already in memory.
pub fn score_image(
    image_path: &str,
    img: &RgbImage,
    tool_mask: Option<&BinaryMask>,
    detections: &[crate::data::Detection],
    cfg: &PipelineConfig,
    model: &NiqeModel,
) -> Result<ImageScores> {
    let mut flags = vec![];
    let recolored;
    let img = match tool_mask {
        Some(m) => {
            recolored = recolor_tool(img, m)?;
            flags.push(FLAG_TOOL_RECOLORED.to_string());
            &recolored
        }
        None => img,
    };
    let gray = to_gray(img)?;
    let niqe = niqe_score(&gray, model)?;
    let entropy = histogram_entropy(&gray);
    let counting = counting_factors(detections);
    if counting.empty {
        flags.push(FLAG_NO_DETECTIONS.to_string());
    }
    let centroids = extract_centroids(img, &cfg.segmentation)?;
    let pdu = pdu_score(&centroids, detections, &cfg.clustering)?;
    Ok(ImageScores {
        image_path: image_path.to_string(),
        factors: FactorVector {
            score_mdcbb: counting.mdcbb,
            score_pn: counting.pn as f64,
            score_agm: average_gradient_magnitude(&gray)?,
            score_iq: -niqe,
            score_ic: entropy,
            score_pdu: pdu.score,
        },
        niqe,
        entropy,
        edge_density: edge_density(&gray, cfg.edge_threshold)?,
        n_centroids: centroids.len(),
        n_clusters: pdu.summary.n_clusters,
        noise_count: pdu.summary.noise_count,
        eps: pdu.eps,
        flags,
    })
}

pub fn score_record(record: &ImageRecord, cfg: &PipelineConfig, model: &NiqeModel) -> Result<ImageScores> {
    let img = load_rgb(&record.resolved_path)?;
    let mask = match &record.resolved_mask_path {
        Some(p) => {
            let m = BinaryMask::load(p)?;
            if (m.width, m.height) != (img.width() as usize, img.height() as usize) {
                return Err(Error::invalid(format!(
                    "{}: tool mask is {}x{}, image is {}x{}",
                    record.image_path,
                    m.width,
                    m.height,
                    img.width(),
                    img.height()
                )));
            }
            Some(m)
        }
        None => None,
    };
    score_image(&record.image_path, &img, mask.as_ref(), &record.detections, cfg, model)
}

/// Scores every record in parallel; output follows record order.
pub fn score_corpus(records: &[ImageRecord], cfg: &PipelineConfig, model: &NiqeModel) -> Result<Vec<ImageScores>> {
    records.par_iter().map(|r| score_record(r, cfg, model)).collect()
}

/// Manifest rows with detections and, when given, ground truth attached.
pub fn load_corpus(manifest: &Path, detections: &Path, ground_truth: Option<&Path>) -> Result<Vec<ImageRecord>> {
    let mut records = load_manifest(manifest)?;
    let dets = load_detections(detections)?;
    let gt = ground_truth.map(load_ground_truth).transpose()?;
    attach(&mut records, &dets, gt.as_ref());
    Ok(records)
}

pub fn resolve_niqe_model(cfg: &PipelineConfig) -> Result<NiqeModel> {
    match &cfg.niqe_model_path {
        Some(p) => NiqeModel::load(p),
        None => Ok(NiqeModel::builtin().clone()),
    }
}

pub const SCORES_HEADER: [&str; 15] = [
    "image_path",
    "score_mdcbb",
    "score_pn",
    "score_agm",
    "score_iq",
    "score_ic",
    "score_pdu",
    "niqe",
    "entropy",
    "edge_density",
    "n_centroids",
    "n_clusters",
    "noise_count",
    "eps",
    "flags",
];

fn csv_wrap(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt(v: f64) -> String {
    // Shortest round-trip representation.
    format!("{v:?}")
}

fn score_cells(s: &ImageScores) -> Vec<String> {
    let f = &s.factors;
    vec![
        s.image_path.clone(),
        fmt(f.score_mdcbb),
        fmt(f.score_pn),
        fmt(f.score_agm),
        fmt(f.score_iq),
        fmt(f.score_ic),
        fmt(f.score_pdu),
        fmt(s.niqe),
        fmt(s.entropy),
        fmt(s.edge_density),
        s.n_centroids.to_string(),
        s.n_clusters.to_string(),
        s.noise_count.to_string(),
        s.eps.map(fmt).unwrap_or_default(),
        s.flags.join(";"),
    ]
}

pub fn write_scores<W: Write>(scores: &[ImageScores], out: W) -> Result<()> {
    let p = Path::new("<scores>");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORES_HEADER).map_err(csv_wrap(p))?;
    for s in scores {
        w.write_record(score_cells(s)).map_err(csv_wrap(p))?;
    }
    w.flush().map_err(|e| Error::io(p, e))
}

/// Scores CSV with `confidence` and `clamped_input` columns appended.
pub fn write_predictions<W: Write>(scores: &[ImageScores], preds: &[Prediction], out: W) -> Result<()> {
    if scores.len() != preds.len() {
        return Err(Error::invalid("one prediction per scored image is required"));
    }
    let p = Path::new("<predictions>");
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = SCORES_HEADER.to_vec();
    header.extend(["confidence", "clamped_input"]);
    w.write_record(&header).map_err(csv_wrap(p))?;
    for (s, pr) in scores.iter().zip(preds) {
        let mut row = score_cells(s);
        row.push(fmt(pr.confidence));
        row.push(pr.clamped_input.to_string());
        w.write_record(row).map_err(csv_wrap(p))?;
    }
    w.flush().map_err(|e| Error::io(p, e))
}

/// Reads a headed CSV into rows of named cells, with line numbers.
fn read_table(path: &Path, required: &[&str]) -> Result<Vec<(usize, HashMap<String, String>)>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_wrap(path))?;
    let headers: Vec<String> = r.headers().map_err(csv_wrap(path))?.iter().map(str::to_string).collect();
    for col in required {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Record {
                path: path.to_path_buf(),
                row: 1,
                field: col.to_string(),
                message: "missing column".into(),
            });
        }
    }
    let mut out = vec![];
    for rec in r.records() {
        let rec = rec.map_err(csv_wrap(path))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push((line, headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect()));
    }
    Ok(out)
}

fn cell<T: std::str::FromStr>(path: &Path, line: usize, row: &HashMap<String, String>, field: &str) -> Result<T> {
    let raw = row.get(field).map(String::as_str).unwrap_or("");
    raw.parse().map_err(|_| Error::Record {
        path: path.to_path_buf(),
        row: line,
        field: field.to_string(),
        message: format!("cannot parse `{raw}`"),
    })
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ImageScores>> {
    let path = path.as_ref();
    read_table(path, &SCORES_HEADER)?
        .into_iter()
        .map(|(line, row)| {
            let c = |f: &str| cell::<f64>(path, line, &row, f);
            let u = |f: &str| cell::<usize>(path, line, &row, f);
            let factors = FactorVector {
                score_mdcbb: c("score_mdcbb")?,
                score_pn: c("score_pn")?,
                score_agm: c("score_agm")?,
                score_iq: c("score_iq")?,
                score_ic: c("score_ic")?,
                score_pdu: c("score_pdu")?,
            };
            if !factors.is_finite() {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    row: line,
                    field: "score_*".into(),
                    message: "non-finite factor score".into(),
                });
            }
            let eps = match row["eps"].as_str() {
                "" => None,
                _ => Some(c("eps")?),
            };
            let flags = row["flags"]
                .split(';')
                .filter(|f| !f.is_empty())
                .map(str::to_string)
                .collect();
            Ok(ImageScores {
                image_path: row["image_path"].clone(),
                factors,
                niqe: c("niqe")?,
                entropy: c("entropy")?,
                edge_density: c("edge_density")?,
                n_centroids: u("n_centroids")?,
                n_clusters: u("n_clusters")?,
                noise_count: u("noise_count")?,
                eps,
                flags,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_path: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub jaccard: f64,
}

/// Per-image Jaccard labels and the corpus summary. Every record must carry
/// ground truth.
pub fn label_records(records: &[ImageRecord], iou_thresh: f64) -> Result<(Vec<LabelRow>, DetectionEvalReport)> {
    for r in records {
        if r.ground_truth.is_none() {
            return Err(Error::invalid(format!("no ground truth for `{}`", r.image_path)));
        }
    }
    let pairs: Vec<(&[crate::data::Detection], &[crate::data::GroundTruthBox])> = records
        .iter()
        .map(|r| (r.detections.as_slice(), r.ground_truth.as_deref().unwrap_or(&[])))
        .collect();
    let (results, report) = evaluate_corpus(&pairs, iou_thresh)?;
    let rows = records
        .iter()
        .zip(results)
        .map(|(r, m): (&ImageRecord, MatchResult)| LabelRow {
            image_path: r.image_path.clone(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            jaccard: m.jaccard,
        })
        .collect();
    Ok((rows, report))
}

pub fn write_labels<W: Write>(rows: &[LabelRow], out: W) -> Result<()> {
    let p = Path::new("<labels>");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_path", "tp", "fp", "fn", "jaccard"]).map_err(csv_wrap(p))?;
    for r in rows {
        w.write_record([
            r.image_path.clone(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            fmt(r.jaccard),
        ])
        .map_err(csv_wrap(p))?;
    }
    w.flush().map_err(|e| Error::io(p, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    read_table(path, &["image_path", "jaccard"])?
        .into_iter()
        .map(|(line, row)| {
            let get = |f: &str| -> Result<usize> {
                if row.contains_key(f) {
                    cell(path, line, &row, f)
                } else {
                    Ok(0)
                }
            };
            let jaccard: f64 = cell(path, line, &row, "jaccard")?;
            if !(0.0..=1.0).contains(&jaccard) {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    row: line,
                    field: "jaccard".into(),
                    message: format!("{jaccard} outside [0, 1]"),
                });
            }
            Ok(LabelRow {
                image_path: row["image_path"].clone(),
                tp: get("tp")?,
                fp: get("fp")?,
                fn_: get("fn")?,
                jaccard,
            })
        })
        .collect()
}

/// Pairs scores with labels by image path, in score order.
pub fn join_samples(scores: &[ImageScores], labels: &[LabelRow]) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, f64> = labels.iter().map(|l| (l.image_path.as_str(), l.jaccard)).collect();
    scores
        .iter()
        .map(|s| {
            by_id
                .get(s.image_path.as_str())
                .map(|&confidence| Sample {
                    factors: s.factors,
                    confidence,
                })
                .ok_or_else(|| Error::invalid(format!("no label for `{}`", s.image_path)))
        })
        .collect()
}

/// Built-in metric column names in the sensitivity harness.
pub const METRIC_NIQE: &str = "NIQE";
pub const METRIC_ENTROPY: &str = "Entropy";
pub const METRIC_EDGE_DENSITY: &str = "Edge density";

/// Quality metrics use the higher-is-better NIQE variant.
pub fn builtin_score_table(records: &[ImageRecord], scores: &[ImageScores]) -> Result<ScoreTable> {
    let by_id: HashMap<&str, &ImageScores> = scores.iter().map(|s| (s.image_path.as_str(), s)).collect();
    let mut ids = vec![];
    let mut meta: Vec<ConditionMetadata> = vec![];
    let mut cols: [Vec<f64>; 3] = Default::default();
    for r in records {
        let s = by_id
            .get(r.image_path.as_str())
            .ok_or_else(|| Error::invalid(format!("no scores for `{}`", r.image_path)))?;
        ids.push(r.image_path.clone());
        meta.push(r.metadata.clone());
        cols[0].push(-s.niqe);
        cols[1].push(s.entropy);
        cols[2].push(s.edge_density);
    }
    let mut t = ScoreTable::new(ids, meta)?;
    let [niqe, entropy, edges] = cols;
    t.add_column(METRIC_NIQE, niqe)?;
    t.add_column(METRIC_ENTROPY, entropy)?;
    t.add_column(METRIC_EDGE_DENSITY, edges)?;
    Ok(t)
}
