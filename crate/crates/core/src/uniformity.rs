//! Pest distribution uniformity: DBSCAN over object centroids with a radius
//! taken from the mean detected box size, scored as `Σ C_i / D_i` over
//! clusters (`C_i` points, `D_i` mean pairwise distance).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Detection;
use crate::error::{Error, Result};
use crate::scene::Centroid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub eps_multiplier: f64,
    pub min_pts: usize,
    /// Floor for both the radius and every `D_i`, in pixels.
    pub eps_floor: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps_multiplier: 1.0,
            min_pts: 2,
            eps_floor: 1.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_multiplier > 0.0 && self.eps_multiplier.is_finite()) {
            return Err(Error::invalid("eps_multiplier must be positive"));
        }
        if self.min_pts < 2 {
            return Err(Error::invalid("min_pts must be at least 2"));
        }
        if !(self.eps_floor > 0.0 && self.eps_floor.is_finite()) {
            return Err(Error::invalid("eps_floor must be positive"));
        }
        Ok(())
    }
}

/// `eps_multiplier · mean((w + h) / 2)`, floored at `eps_floor`.
pub fn adaptive_eps(detections: &[Detection], cfg: &ClusterConfig) -> Result<f64> {
    if detections.is_empty() {
        return Err(Error::invalid("adaptive radius needs at least one detection"));
    }
    let mean = detections.iter().map(|d| d.bbox.mean_side()).sum::<f64>() / detections.len() as f64;
    Ok((cfg.eps_multiplier * mean).max(cfg.eps_floor))
}

/// Per-point cluster labels (`None` = noise). Cluster ids are ordered by the
/// lowest point index each cluster contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_clusters: usize,
    pub clusters: Vec<ClusterStats>,
    pub noise_count: usize,
}

fn neighbour_lists(points: &[(f64, f64)], eps: f64) -> Vec<Vec<usize>> {
    let cell = |p: &(f64, f64)| ((p.0 / eps).floor() as i64, (p.1 / eps).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    points
        .iter()
        .map(|p| {
            let (cx, cy) = cell(p);
            let mut out = vec![];
            for gy in cy - 1..=cy + 1 {
                for gx in cx - 1..=cx + 1 {
                    if let Some(bucket) = grid.get(&(gx, gy)) {
                        for &j in bucket {
                            let q = points[j];
                            let (dx, dy) = (p.0 - q.0, p.1 - q.1);
                            if dx * dx + dy * dy <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// DBSCAN with inclusive `eps` neighbourhoods that count the point itself.
///
/// A border point reachable from several clusters joins the cluster of its
/// lowest-index core neighbour.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Result<Clustering> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if min_pts < 2 {
        return Err(Error::invalid("min_pts must be at least 2"));
    }
    if points.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::invalid("points must be finite"));
    }
    let n = points.len();
    let neighbours = neighbour_lists(points, eps);
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut raw: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if !core[start] || raw[start].is_some() {
            continue;
        }
        raw[start] = Some(n_clusters);
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbours[i] {
                if core[j] && raw[j].is_none() {
                    raw[j] = Some(n_clusters);
                    queue.push_back(j);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if !core[i] {
            raw[i] = neighbours[i].iter().find(|&&j| core[j]).and_then(|&j| raw[j]);
        }
    }

    // Renumber by first appearance in index order.
    let mut remap = vec![usize::MAX; n_clusters];
    let mut next = 0;
    for l in raw.iter().flatten() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
    }
    Ok(Clustering {
        labels: raw.into_iter().map(|l| l.map(|l| remap[l])).collect(),
        n_clusters,
    })
}

/// Cluster sizes and mean pairwise distances, each distance floored at `floor`.
pub fn summarize(points: &[(f64, f64)], clustering: &Clustering, floor: f64) -> ClusterSummary {
    let mut members: Vec<Vec<usize>> = vec![vec![]; clustering.n_clusters];
    let mut noise = 0;
    for (i, l) in clustering.labels.iter().enumerate() {
        match l {
            Some(c) => members[*c].push(i),
            None => noise += 1,
        }
    }
    let clusters = members
        .iter()
        .map(|m| {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    let (p, q) = (points[i], points[j]);
                    sum += (p.0 - q.0).hypot(p.1 - q.1);
                    pairs += 1;
                }
            }
            let mean = if pairs > 0 { sum / pairs as f64 } else { 0.0 };
            ClusterStats {
                count: m.len(),
                mean_distance: mean.max(floor),
            }
        })
        .collect();
    ClusterSummary {
        n_clusters: clustering.n_clusters,
        clusters,
        noise_count: noise,
    }
}

/// `Σ C_i / D_i` over the summarized clusters.
pub fn cluster_score(summary: &ClusterSummary) -> f64 {
    summary
        .clusters
        .iter()
        .map(|c| c.count as f64 / c.mean_distance)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PduResult {
    pub score: f64,
    pub eps: Option<f64>,
    pub summary: ClusterSummary,
    /// No detections, so the adaptive radius is undefined and the score is 0.
    pub no_detections: bool,
}

/// Distribution-uniformity score of an image; higher means more clumped.
pub fn pdu_score(
    centroids: &[Centroid],
    detections: &[Detection],
    cfg: &ClusterConfig,
) -> Result<PduResult> {
    cfg.validate()?;
    if detections.is_empty() {
        return Ok(PduResult {
            score: 0.0,
            eps: None,
            summary: ClusterSummary {
                noise_count: centroids.len(),
                ..Default::default()
            },
            no_detections: true,
        });
    }
    let eps = adaptive_eps(detections, cfg)?;
    let points: Vec<(f64, f64)> = centroids.iter().map(|c| (c.x, c.y)).collect();
    let clustering = dbscan(&points, eps, cfg.min_pts)?;
    let summary = summarize(&points, &clustering, cfg.eps_floor);
    Ok(PduResult {
        score: cluster_score(&summary),
        eps: Some(eps),
        summary,
        no_detections: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;
    use proptest::prelude::*;

    fn det(w: f64, h: f64) -> Detection {
        Detection::new(BoundingBox::new(0.0, 0.0, w, h).unwrap(), 0.9).unwrap()
    }

    fn centroids(points: &[(f64, f64)]) -> Vec<Centroid> {
        points.iter().map(|&(x, y)| Centroid { x, y, area: 10.0 }).collect()
    }

    #[test]
    fn adaptive_eps_cases() {
        let cfg = ClusterConfig::default();
        assert_eq!(adaptive_eps(&[det(10.0, 20.0), det(30.0, 20.0)], &cfg).unwrap(), 20.0);
        assert_eq!(adaptive_eps(&[det(4.0, 4.0)], &cfg).unwrap(), 4.0);
        assert_eq!(adaptive_eps(&[det(0.1, 0.1)], &cfg).unwrap(), 1.0);
        assert!(adaptive_eps(&[], &cfg).is_err());
    }

    #[test]
    fn chain_forms_one_cluster() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 0.0)).collect();
        let c = dbscan(&pts, 1.5, 2).unwrap();
        assert_eq!(c.n_clusters, 1);
        assert!(c.labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn two_separated_groups() {
        let mut pts: Vec<_> = (0..3).map(|i| (i as f64, 0.0)).collect();
        pts.extend((0..3).map(|i| (100.0 + i as f64, 0.0)));
        let c = dbscan(&pts, 2.0, 2).unwrap();
        let s = summarize(&pts, &c, 1.0);
        assert_eq!((s.n_clusters, s.noise_count), (2, 0));
    }

    #[test]
    fn equation_hand_cases() {
        let s = ClusterSummary {
            n_clusters: 2,
            clusters: vec![
                ClusterStats { count: 3, mean_distance: 2.0 },
                ClusterStats { count: 4, mean_distance: 1.0 },
            ],
            noise_count: 0,
        };
        assert_eq!(cluster_score(&s), 5.5);

        let r = pdu_score(&centroids(&[(10.0, 10.0), (14.0, 10.0)]), &[det(5.0, 5.0)], &Default::default()).unwrap();
        assert_eq!(r.summary.clusters, vec![ClusterStats { count: 2, mean_distance: 4.0 }]);
        assert_eq!(r.score, 0.5);

        let far = centroids(&[(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)]);
        let r = pdu_score(&far, &[det(5.0, 5.0)], &Default::default()).unwrap();
        assert_eq!((r.score, r.summary.noise_count), (0.0, 3));
    }

    #[test]
    fn empty_inputs_score_zero() {
        let cfg = ClusterConfig::default();
        let r = pdu_score(&[], &[det(3.0, 3.0)], &cfg).unwrap();
        assert_eq!(r.score, 0.0);
        let r = pdu_score(&centroids(&[(1.0, 1.0), (2.0, 1.0)]), &[], &cfg).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(r.no_detections);
    }

    #[test]
    fn coincident_points_hit_the_floor() {
        let r = pdu_score(&centroids(&[(5.0, 5.0); 3]), &[det(4.0, 4.0)], &Default::default()).unwrap();
        assert_eq!(r.score, 3.0);
    }

    #[test]
    fn border_joins_lowest_index_core() {
        // Two dense groups; point 4 at x=2.5 is a border point of both.
        let pts = [
            (4.0, 0.0), (4.5, 0.0), (5.0, 0.0), (4.8, 0.3),
            (2.5, 0.0),
            (0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (0.2, 0.3),
        ];
        let c = dbscan(&pts, 1.5, 4).unwrap();
        assert_eq!(c.n_clusters, 2);
        assert_eq!(c.labels[4], c.labels[0]);
        assert_ne!(c.labels[4], c.labels[7]);
    }

    fn partition(c: &Clustering, order: &[usize]) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = vec![vec![]; c.n_clusters];
        for (pos, l) in c.labels.iter().enumerate() {
            if let Some(l) = l {
                groups[*l].push(order[pos]);
            }
        }
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort();
        groups
    }

    proptest! {
        #[test]
        fn permutation_invariant_partition(
            pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..60),
            eps in 1.0f64..15.0,
            rot in 0usize..60,
        ) {
            // With min_pts = 2 there are no border points, so the partition is order free.
            let n = pts.len();
            let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
            let shuffled: Vec<_> = order.iter().map(|&i| pts[i]).collect();
            let a = dbscan(&pts, eps, 2).unwrap();
            let b = dbscan(&shuffled, eps, 2).unwrap();
            let ident: Vec<usize> = (0..n).collect();
            prop_assert_eq!(partition(&a, &ident), partition(&b, &order));
        }

        #[test]
        fn score_invariant_to_rigid_motion(
            pts in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 2..40),
            theta in 0.0f64..std::f64::consts::TAU,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
        ) {
            let moved: Vec<_> = pts.iter().map(|&(x, y)| {
                (x * theta.cos() - y * theta.sin() + tx, x * theta.sin() + y * theta.cos() + ty)
            }).collect();
            let d = [det(8.0, 8.0)];
            let cfg = ClusterConfig::default();
            let a = pdu_score(&centroids(&pts), &d, &cfg).unwrap();
            let b = pdu_score(&centroids(&moved), &d, &cfg).unwrap();
            // Rotation perturbs distances by rounding; skip configurations sitting on the radius.
            let (pa, pb): (Vec<_>, Vec<_>) = (pts.clone(), moved.clone());
            let near_boundary = pa.iter().enumerate().any(|(i, p)| pa[i + 1..].iter().any(|q| ((p.0 - q.0).hypot(p.1 - q.1) - 8.0).abs() < 1e-6));
            prop_assume!(!near_boundary);
            prop_assert_eq!(a.summary.n_clusters, b.summary.n_clusters);
            prop_assert!((a.score - b.score).abs() <= 1e-9 * (1.0 + a.score));
            let _ = pb;
        }

        #[test]
        fn scaling_points_and_eps_scales_score(
            pts in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 2..40),
            s in 0.5f64..4.0,
        ) {
            let scaled: Vec<_> = pts.iter().map(|&(x, y)| (x * s, y * s)).collect();
            let eps = 9.0;
            let a = dbscan(&pts, eps, 2).unwrap();
            let b = dbscan(&scaled, eps * s, 2).unwrap();
            let near_boundary = pts.iter().enumerate().any(|(i, p)| pts[i + 1..].iter().any(|q| ((p.0 - q.0).hypot(p.1 - q.1) - eps).abs() < 1e-6));
            prop_assume!(!near_boundary);
            let sa = cluster_score(&summarize(&pts, &a, 1e-300));
            let sb = cluster_score(&summarize(&scaled, &b, 1e-300));
            prop_assert!((sb - sa / s).abs() <= 1e-9 * (1.0 + sa));
        }

        #[test]
        fn tighter_cluster_scores_higher(n in 2usize..15, spread in 1.0f64..5.0, shrink in 0.3f64..0.95) {
            let pts: Vec<_> = (0..n).map(|i| {
                let a = i as f64 * 2.399;
                (50.0 + spread * a.cos() * (1.0 + i as f64 * 0.1), 50.0 + spread * a.sin())
            }).collect();
            let tight: Vec<_> = pts.iter().map(|&(x, y)| (50.0 + (x - 50.0) * shrink, 50.0 + (y - 50.0) * shrink)).collect();
            // Large eps so both configurations form one cluster; tiny floor so it never engages.
            let a = summarize(&pts, &dbscan(&pts, 100.0, 2).unwrap(), 1e-9);
            let b = summarize(&tight, &dbscan(&tight, 100.0, 2).unwrap(), 1e-9);
            prop_assert!(cluster_score(&b) > cluster_score(&a));
        }

        #[test]
        fn counts_add_up(pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..80),
                         eps in 0.5f64..20.0, min_pts in 2usize..6) {
            let c = dbscan(&pts, eps, min_pts).unwrap();
            let s = summarize(&pts, &c, 1.0);
            let total: usize = s.clusters.iter().map(|c| c.count).sum::<usize>() + s.noise_count;
            prop_assert_eq!(total, pts.len());
            prop_assert!(s.clusters.iter().all(|c| c.mean_distance > 0.0));
        }
    }
}
