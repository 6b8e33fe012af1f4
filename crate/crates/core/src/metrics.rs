//! Retrieval and classification metrics.
//!
//! Every ranking metric takes the relevance flags of a ranked gallery.
//! Queries without any relevant gallery item are excluded from the means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked gallery of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<String>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RetrievalResult {
    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Average precision, or `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// `(recall, interpolated precision)` at every rank, with a leading recall-0 point.
pub fn interpolated_pr(relevant: &[bool]) -> Option<Vec<(f64, f64)>> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut points: Vec<(f64, f64)> = relevant
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            hits += usize::from(r);
            (hits as f64 / total as f64, hits as f64 / (i + 1) as f64)
        })
        .collect();
    let mut best: f64 = 0.0;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    points.insert(0, (0.0, points[0].1));
    Some(points)
}

/// Trapezoidal area under the interpolated PR curve.
pub fn pr_auc(relevant: &[bool]) -> Option<f64> {
    let pts = interpolated_pr(relevant)?;
    Some(
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
            .sum(),
    )
}

fn dcg(gains: impl Iterator<Item = bool>) -> f64 {
    gains
        .enumerate()
        .filter(|(_, g)| *g)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

/// Binary-gain NDCG over the full ranking.
pub fn ndcg(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let ideal = dcg((0..relevant.len()).map(|i| i < total));
    Some(dcg(relevant.iter().copied()) / ideal)
}

/// F1 of precision@k and recall@k; `k` is clamped to the gallery size.
pub fn f1_at_k(relevant: &[bool], k: usize) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 || k == 0 {
        return None;
    }
    let k = k.min(relevant.len());
    let hits = relevant[..k].iter().filter(|&&r| r).count() as f64;
    let (p, r) = (hits / k as f64, hits / total as f64);
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn mean_over(results: &[RetrievalResult], f: impl Fn(&[bool]) -> Option<f64>) -> Result<f64> {
    if let Some(r) = results.iter().find(|r| r.relevant.is_empty()) {
        return Err(Error::Argument(format!("query {} has an empty gallery", r.query)));
    }
    let vals: Vec<f64> = results.iter().filter_map(|r| f(&r.relevant)).collect();
    let skipped = results.len() - vals.len();
    if skipped > 0 {
        log::info!("{skipped} queries without relevant items excluded");
    }
    if vals.is_empty() {
        return Err(Error::Argument("no query has a relevant gallery item".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn compute_map(results: &[RetrievalResult]) -> Result<f64> {
    mean_over(results, average_precision)
}

pub fn compute_auc_pr(results: &[RetrievalResult]) -> Result<f64> {
    mean_over(results, pr_auc)
}

pub fn compute_ndcg(results: &[RetrievalResult]) -> Result<f64> {
    mean_over(results, ndcg)
}

pub fn compute_f1(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("F1 cutoff k must be positive".into()));
    }
    if let Some(r) = results.iter().find(|r| k > r.relevant.len()) {
        log::warn!(
            "F1 cutoff {k} exceeds gallery size {} (query {}); clamped",
            r.relevant.len(),
            r.query
        );
    }
    mean_over(results, |rel| f1_at_k(rel, k))
}

/// Mean interpolated precision at recall levels `0, 1/(levels−1), …, 1`.
pub fn pr_curve(results: &[RetrievalResult], levels: usize) -> Vec<(f64, f64)> {
    let curves: Vec<Vec<(f64, f64)>> = results.iter().filter_map(|r| interpolated_pr(&r.relevant)).collect();
    let levels = levels.max(2);
    (0..levels)
        .map(|j| {
            let recall = j as f64 / (levels - 1) as f64;
            let sum: f64 = curves
                .iter()
                .map(|c| {
                    c.iter()
                        .filter(|p| p.0 >= recall - 1e-12)
                        .map(|p| p.1)
                        .fold(0.0, f64::max)
                })
                .sum();
            let mean = if curves.is_empty() { 0.0 } else { sum / curves.len() as f64 };
            (recall, mean)
        })
        .collect()
}

/// `(per-instance, per-class)` accuracy from `(truth, prediction)` pairs.
pub fn accuracy(pairs: &[(usize, usize)], classes: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Argument("accuracy of an empty split".into()));
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let mut per = vec![(0usize, 0usize); classes];
    for &(t, p) in pairs {
        let slot = per
            .get_mut(t)
            .ok_or_else(|| Error::Argument(format!("class {t} out of range {classes}")))?;
        slot.1 += 1;
        slot.0 += usize::from(t == p);
    }
    let present: Vec<f64> = per
        .iter()
        .enumerate()
        .filter_map(|(c, &(ok, n))| {
            if n == 0 {
                log::warn!("class {c} absent from split; skipped in per-class accuracy");
                None
            } else {
                Some(ok as f64 / n as f64)
            }
        })
        .collect();
    Ok((
        correct as f64 / pairs.len() as f64,
        present.iter().sum::<f64>() / present.len() as f64,
    ))
}

/// Confidence mass inside an image-space bbox mapped onto an `h×w` grid,
/// and the bbox's area fraction (the uniform-attention baseline).
pub fn localization_mass(
    conf: &[f64],
    grid: (usize, usize),
    bbox: [u32; 4],
    image_size: usize,
) -> Result<(f64, f64)> {
    let (h, w) = grid;
    if conf.len() != h * w || image_size == 0 {
        return Err(Error::Shape(format!("{} confidences for a {h}×{w} grid", conf.len())));
    }
    let [x0, y0, x1, y1] = bbox.map(|v| v as usize);
    if x0 > x1 || y0 > y1 || x1 >= image_size || y1 >= image_size {
        return Err(Error::Argument(format!("bbox {bbox:?} outside a {image_size}-pixel image")));
    }
    let (gx0, gx1) = (x0 * w / image_size, x1 * w / image_size);
    let (gy0, gy1) = (y0 * h / image_size, y1 * h / image_size);
    let mut mass = 0.0;
    for gy in gy0..=gy1 {
        for gx in gx0..=gx1 {
            mass += conf[gy * w + gx];
        }
    }
    let cells = (gx1 - gx0 + 1) * (gy1 - gy0 + 1);
    Ok((mass, cells as f64 / (h * w) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query: String,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub auc_pr: f64,
    pub ndcg: f64,
    pub f1_at_k: f64,
    pub k: usize,
    pub accuracy_per_instance: f64,
    pub accuracy_per_class: f64,
    pub per_query_ap: Vec<QueryAp>,
    pub pr_curve: Vec<(f64, f64)>,
}

pub const PR_LEVELS: usize = 21;

impl MetricsReport {
    pub fn from_results(
        results: &[RetrievalResult],
        k: usize,
        accuracy: (f64, f64),
    ) -> Result<MetricsReport> {
        Ok(MetricsReport {
            map: compute_map(results)?,
            auc_pr: compute_auc_pr(results)?,
            ndcg: compute_ndcg(results)?,
            f1_at_k: compute_f1(results, k)?,
            k,
            accuracy_per_instance: accuracy.0,
            accuracy_per_class: accuracy.1,
            per_query_ap: results
                .iter()
                .filter_map(|r| {
                    average_precision(&r.relevant).map(|ap| QueryAp {
                        query: r.query.clone(),
                        ap,
                    })
                })
                .collect(),
            pr_curve: pr_curve(results, PR_LEVELS),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(rel: &[bool]) -> RetrievalResult {
        RetrievalResult {
            query: "q".into(),
            ranked: (0..rel.len()).map(|i| i.to_string()).collect(),
            scores: (0..rel.len()).map(|i| -(i as f64)).collect(),
            relevant: rel.to_vec(),
        }
    }

    #[test]
    fn perfect_ranking() {
        let rel = [true, true, true, false, false];
        assert_eq!(average_precision(&rel), Some(1.0));
        assert!((ndcg(&rel).unwrap() - 1.0).abs() < 1e-15);
        assert!(pr_auc(&rel).unwrap() >= 0.999);
    }

    #[test]
    fn worked_examples() {
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert!((ap - 0.833333).abs() < 1e-5);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let n = ndcg(&[true, false, true]).unwrap();
        let oracle = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((n - 0.91972).abs() < 1e-5);
        assert!((n - oracle).abs() < 1e-15);
    }

    #[test]
    fn no_relevant_excluded() {
        assert_eq!(average_precision(&[false, false]), None);
        let rs = vec![result(&[false, false]), result(&[true, false])];
        assert_eq!(compute_map(&rs).unwrap(), 1.0);
        assert!(compute_map(&[result(&[false])]).is_err());
        assert!(compute_map(&[result(&[])]).is_err());
    }

    #[test]
    fn f1_examples() {
        // 2 relevant, 1 in top 2: p = 1/2, r = 1/2.
        assert_eq!(f1_at_k(&[true, false, true], 2), Some(0.5));
        // Clamped to the gallery size: p = 2/3, r = 1.
        let f = compute_f1(&[result(&[true, false, true])], 10).unwrap();
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(f1_at_k(&[false, false, true], 2), Some(0.0));
    }

    #[test]
    fn pr_curve_levels() {
        let c = pr_curve(&[result(&[true, false, true, false])], 3);
        assert_eq!(c[0], (0.0, 1.0));
        assert_eq!(c[1], (0.5, 1.0));
        assert!((c[2].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let all = [(0, 0), (1, 1), (2, 2)];
        assert_eq!(accuracy(&all, 3).unwrap(), (1.0, 1.0));
        let pairs = [(0, 0), (0, 0), (0, 0), (1, 0)];
        assert_eq!(accuracy(&pairs, 2).unwrap(), (0.75, 0.5));
        // Class 2 absent: skipped.
        assert_eq!(accuracy(&pairs, 3).unwrap(), (0.75, 0.5));
        assert!(accuracy(&[], 2).is_err());
    }

    #[test]
    fn localization_examples() {
        let uniform = vec![1.0 / 64.0; 64];
        let (m, b) = localization_mass(&uniform, (8, 8), [0, 0, 31, 31], 32).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && b == 1.0);
        let (m, b) = localization_mass(&uniform, (8, 8), [0, 0, 15, 15], 32).unwrap();
        assert!((m - 0.25).abs() < 1e-12 && b == 0.25);
        let mut one_hot = vec![0.0; 64];
        one_hot[9] = 1.0;
        let (m, b) = localization_mass(&one_hot, (8, 8), [4, 4, 7, 7], 32).unwrap();
        assert_eq!((m, b), (1.0, 1.0 / 64.0));
        assert!(localization_mass(&uniform, (8, 8), [0, 0, 32, 1], 32).is_err());
    }
}
