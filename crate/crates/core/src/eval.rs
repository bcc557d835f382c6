//! Matching predictions to ground truth, Jaccard counting-confidence labels,
//! pooled mean counting confidence (MCC) and AP@0.5.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// `tp / (tp + fp + fn)`, with `0/0 := 1` (an empty image counted as empty is correct).
pub fn jaccard(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = tp + fp + fn_;
    if d == 0 {
        1.0
    } else {
        tp as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub jaccard: f64,
    pub pairs: Vec<MatchedPair>,
}

/// Prediction indices by descending confidence, ties in input order.
fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
    }
    Ok(())
}

/// Greedy one-to-one matching in descending confidence; each prediction takes
/// the unmatched ground-truth box of highest IoU at or above the threshold
/// (ties to the lower ground-truth index).
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> Result<MatchResult> {
    check_threshold(iou_thresh)?;
    let mut taken = vec![false; gts.len()];
    let mut pairs = vec![];
    for di in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&preds[di].bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            taken[gi] = true;
            pairs.push(MatchedPair {
                detection: di,
                ground_truth: gi,
                iou: v,
            });
        }
    }
    let tp = pairs.len();
    let fp = preds.len() - tp;
    let fn_ = gts.len() - tp;
    Ok(MatchResult {
        tp,
        fp,
        fn_,
        jaccard: jaccard(tp, fp, fn_),
        pairs,
    })
}

/// Table-1 style corpus summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalReport {
    pub ap50: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mcc: f64,
}

/// Mean counting confidence: the Jaccard index of pooled totals.
pub fn mcc(results: &[MatchResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("MCC needs at least one image"));
    }
    let (tp, fp, fn_) = totals(results);
    Ok(jaccard(tp, fp, fn_))
}

fn totals(results: &[MatchResult]) -> (usize, usize, usize) {
    results
        .iter()
        .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_))
}

/// All-point interpolated average precision at IoU 0.5.
///
/// Predictions from every image are ranked by confidence (ties by image, then
/// input order) and matched greedily within their own image. With no ground
/// truth at all the result is 1 when there are also no predictions, else 0.
pub fn ap_at_50(images: &[(&[Detection], &[GroundTruthBox])]) -> f64 {
    average_precision(images, DEFAULT_IOU_THRESHOLD)
}

pub fn average_precision(images: &[(&[Detection], &[GroundTruthBox])], iou_thresh: f64) -> f64 {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut ranked: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(ii, (p, _))| (0..p.len()).map(move |di| (ii, di)))
        .collect();
    if total_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| {
        let ca = images[a.0].0[a.1].confidence;
        let cb = images[b.0].0[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });

    let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(ii, di)) in ranked.iter().enumerate() {
        let (preds, gts) = images[ii];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[ii][gi] {
                continue;
            }
            let v = iou(&preds[di].bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[ii][gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }

    // Precision envelope from the right, then sum over recall steps.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Matches every image and assembles the corpus summary.
pub fn evaluate_corpus(
    images: &[(&[Detection], &[GroundTruthBox])],
    iou_thresh: f64,
) -> Result<(Vec<MatchResult>, DetectionEvalReport)> {
    let results = images
        .iter()
        .map(|(p, g)| match_detections(p, g, iou_thresh))
        .collect::<Result<Vec<_>>>()?;
    let (tp, fp, fn_) = totals(&results);
    let report = DetectionEvalReport {
        ap50: average_precision(images, iou_thresh),
        tp,
        fp,
        fn_,
        mcc: mcc(&results)?,
    };
    Ok((results, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingFactors {
    pub mdcbb: f64,
    pub pn: usize,
    /// No predictions; `mdcbb` is 0 by convention.
    pub empty: bool,
}

/// Mean detection confidence and predicted count.
pub fn counting_factors(preds: &[Detection]) -> CountingFactors {
    if preds.is_empty() {
        return CountingFactors {
            mdcbb: 0.0,
            pn: 0,
            empty: true,
        };
    }
    CountingFactors {
        mdcbb: preds.iter().map(|d| d.confidence).sum::<f64>() / preds.len() as f64,
        pn: preds.len(),
        empty: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BoundingBox, c: f64) -> Detection {
        Detection::new(b, c).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_matches() {
        let gts: Vec<_> = (0..4).map(|i| GroundTruthBox::new(bx(i as f64 * 10.0, 0.0, 5.0, 5.0))).collect();
        let preds: Vec<_> = gts.iter().map(|g| det(g.bbox, 0.8)).collect();
        let r = match_detections(&preds, &gts, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.jaccard), (4, 0, 0, 1.0));
        let r = match_detections(&[], &[], 0.5).unwrap();
        assert_eq!(r.jaccard, 1.0);
        assert!(match_detections(&[], &[], 0.0).is_err());
    }

    #[test]
    fn pooled_mcc_values() {
        let fake = |tp, fp, fn_| MatchResult { tp, fp, fn_, jaccard: jaccard(tp, fp, fn_), pairs: vec![] };
        assert!((mcc(&[fake(549, 15, 29)]).unwrap() - 0.9258).abs() < 5e-5);
        assert!((mcc(&[fake(556, 61, 22)]).unwrap() - 0.8701).abs() < 5e-5);
        assert!((mcc(&[fake(554, 124, 24)]).unwrap() - 0.7892).abs() < 5e-5);
        // Pooled, not the mean of per-image Jaccards.
        let parts = [fake(1, 0, 0), fake(1, 3, 0)];
        assert!((mcc(&parts).unwrap() - 2.0 / 5.0).abs() < 1e-15);
        assert!(mcc(&[]).is_err());
    }

    #[test]
    fn counting_factor_cases() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let f = counting_factors(&[det(b, 0.8), det(b, 0.6)]);
        assert!((f.mdcbb - 0.7).abs() < 1e-15);
        assert_eq!(f.pn, 2);
        assert_eq!(counting_factors(&[]), CountingFactors { mdcbb: 0.0, pn: 0, empty: true });
        let f = counting_factors(&[det(b, 0.93)]);
        assert_eq!((f.mdcbb, f.pn), (0.93, 1));
    }

    #[test]
    fn ap_extremes() {
        let gts: Vec<_> = (0..3).map(|i| GroundTruthBox::new(bx(i as f64 * 10.0, 0.0, 5.0, 5.0))).collect();
        let good: Vec<_> = gts.iter().map(|g| det(g.bbox, 0.9)).collect();
        assert_eq!(ap_at_50(&[(&good, &gts)]), 1.0);
        let bad = vec![det(bx(100.0, 100.0, 5.0, 5.0), 0.9)];
        assert_eq!(ap_at_50(&[(&bad, &gts)]), 0.0);
    }

    /// Enumerates confidence thresholds, computes P/R at each by fresh
    /// matching, then integrates the interpolated precision over recall.
    fn oracle_ap(images: &[(Vec<Detection>, Vec<GroundTruthBox>)]) -> f64 {
        let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
        let mut thresholds: Vec<f64> = images.iter().flat_map(|(p, _)| p.iter().map(|d| d.confidence)).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = vec![];
        for &t in &thresholds {
            let (mut tp, mut n) = (0, 0);
            for (p, g) in images {
                let kept: Vec<Detection> = p.iter().filter(|d| d.confidence >= t).cloned().collect();
                n += kept.len();
                tp += match_detections(&kept, g, 0.5).unwrap().tp;
            }
            points.push((tp as f64 / total_gt as f64, tp as f64 / n as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            let p_interp = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p_interp;
            prev = r;
        }
        ap
    }

    #[test]
    fn ap_matches_threshold_enumeration_oracle() {
        // Five predictions over two images with hits, a miss and a duplicate.
        let g1 = vec![GroundTruthBox::new(bx(0.0, 0.0, 10.0, 10.0)), GroundTruthBox::new(bx(30.0, 0.0, 10.0, 10.0))];
        let g2 = vec![GroundTruthBox::new(bx(0.0, 0.0, 8.0, 8.0)), GroundTruthBox::new(bx(50.0, 50.0, 8.0, 8.0))];
        let p1 = vec![det(bx(1.0, 0.0, 10.0, 10.0), 0.95), det(bx(0.0, 1.0, 10.0, 10.0), 0.7), det(bx(80.0, 0.0, 5.0, 5.0), 0.6)];
        let p2 = vec![det(bx(0.0, 0.0, 8.0, 9.0), 0.85), det(bx(51.0, 51.0, 8.0, 8.0), 0.4)];
        let images = vec![(p1, g1), (p2, g2)];
        let refs: Vec<(&[Detection], &[GroundTruthBox])> = images.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
        let expected = oracle_ap(&images);
        // Ranked: 0.95 TP, 0.85 TP, 0.7 FP, 0.6 FP, 0.4 TP → 0.25·1 + 0.25·1 + 0.25·0.6.
        assert!((expected - 0.65).abs() < 1e-12);
        assert!((ap_at_50(&refs) - expected).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let images: Vec<_> = (0..3).map(|_| random_instance(&mut rng)).collect();
            if images.iter().all(|(_, g)| g.is_empty()) {
                continue;
            }
            let refs: Vec<(&[Detection], &[GroundTruthBox])> = images.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
            assert!((ap_at_50(&refs) - oracle_ap(&images)).abs() < 1e-12);
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
        let ng = rng.random_range(0..5);
        let gts: Vec<_> = (0..ng)
            .map(|_| GroundTruthBox::new(bx(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), rng.random_range(3.0..10.0), rng.random_range(3.0..10.0))))
            .collect();
        let np = rng.random_range(0..5);
        let preds = (0..np)
            .map(|_| {
                let b = if !gts.is_empty() && rng.random_bool(0.7) {
                    let g = gts[rng.random_range(0..gts.len())].bbox;
                    bx(g.x + rng.random_range(-2.0..2.0), g.y + rng.random_range(-2.0..2.0), g.w, g.h)
                } else {
                    bx(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), rng.random_range(3.0..10.0), rng.random_range(3.0..10.0))
                };
                det(b, rng.random_range(0.0..1.0))
            })
            .collect();
        (preds, gts)
    }

    /// Maximum achievable TP by exhaustive one-to-one assignment.
    fn max_tp(preds: &[Detection], gts: &[GroundTruthBox], t: f64, i: usize, used: &mut Vec<bool>) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = max_tp(preds, gts, t, i + 1, used);
        for g in 0..gts.len() {
            if !used[g] && iou(&preds[i].bbox, &gts[g].bbox) >= t {
                used[g] = true;
                best = best.max(1 + max_tp(preds, gts, t, i + 1, used));
                used[g] = false;
            }
        }
        best
    }

    #[test]
    fn greedy_agrees_with_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut agree = 0;
        for _ in 0..1000 {
            let (p, g) = random_instance(&mut rng);
            let greedy = match_detections(&p, &g, 0.5).unwrap().tp;
            let best = max_tp(&p, &g, 0.5, 0, &mut vec![false; g.len()]);
            assert!(greedy <= best);
            if greedy == best {
                agree += 1;
            }
        }
        assert!(agree >= 950, "agreement {agree}/1000");
    }

    proptest! {
        #[test]
        fn invariants(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = random_instance(&mut rng);
            let r = match_detections(&p, &g, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.jaccard));
            prop_assert_eq!(r.jaccard == 1.0, r.fp == 0 && r.fn_ == 0);
            prop_assert_eq!(r.tp, r.pairs.len());

            let mut rev = g.clone();
            rev.reverse();
            prop_assert_eq!(match_detections(&p, &rev, 0.5).unwrap().tp, r.tp);

            let strict = match_detections(&p, &g, 0.8).unwrap();
            prop_assert!(strict.tp <= r.tp);
        }
    }
}
