//! Cosine-similarity retrieval over shape descriptors.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::metrics::RetrievalResult;
use crate::tensor::Tensor;

/// A descriptor with its identity and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub shape_id: String,
    pub class_id: usize,
    pub descriptor: Tensor,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Ranks every other item for each query: descending similarity, ties by
/// ascending shape id. Zero-norm descriptors score 0 against everything.
pub fn rank_all(items: &[Embedded]) -> Result<Vec<RetrievalResult>> {
    if let Some(e) = items.iter().find(|e| e.descriptor.numel() != items[0].descriptor.numel()) {
        return Err(Error::Shape(format!(
            "descriptor of {} has {} entries, expected {}",
            e.shape_id,
            e.descriptor.numel(),
            items[0].descriptor.numel()
        )));
    }
    for e in items.iter().filter(|e| norm(e.descriptor.data()) == 0.0) {
        log::warn!("descriptor of {} has zero norm; its similarities are 0", e.shape_id);
    }
    let mut out = Vec::with_capacity(items.len());
    for (qi, q) in items.iter().enumerate() {
        let mut scored: Vec<(f64, &Embedded)> = items
            .iter()
            .enumerate()
            .filter(|&(gi, _)| gi != qi)
            .map(|(_, g)| (cosine(q.descriptor.data(), g.descriptor.data()).unwrap_or(0.0), g))
            .collect();
        scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => a.1.shape_id.cmp(&b.1.shape_id),
            o => o,
        });
        out.push(RetrievalResult {
            query: q.shape_id.clone(),
            ranked: scored.iter().map(|(_, g)| g.shape_id.clone()).collect(),
            scores: scored.iter().map(|(s, _)| *s).collect(),
            relevant: scored.iter().map(|(_, g)| g.class_id == q.class_id).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, class: usize, d: &[f64]) -> Embedded {
        Embedded {
            shape_id: id.into(),
            class_id: class,
            descriptor: Tensor::vector(d.to_vec()).unwrap(),
        }
    }

    #[test]
    fn single_other_shape() {
        let r = rank_all(&[item("a", 0, &[1.0, 0.0]), item("b", 1, &[0.0, 1.0])]).unwrap();
        assert_eq!(r[0].ranked, vec!["b"]);
        assert_eq!(r[0].relevant, vec![false]);
    }

    #[test]
    fn ties_and_zero_norm() {
        let r = rank_all(&[
            item("q", 0, &[1.0, 0.0]),
            item("z", 0, &[0.0, 0.0]),
            item("c", 0, &[0.0, 2.0]),
            item("b", 1, &[0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(r[0].ranked, vec!["b", "c", "z"]);
        assert_eq!(r[0].scores, vec![0.0, 0.0, 0.0]);
        assert!(r.iter().all(|x| !x.ranked.contains(&x.query)));
    }

    #[test]
    fn brute_force_oracle() {
        let items = [
            item("a", 0, &[1.0, 0.2, 0.0]),
            item("b", 0, &[0.9, 0.1, 0.3]),
            item("c", 1, &[-0.5, 1.0, 0.2]),
            item("d", 1, &[0.1, 0.8, -0.4]),
        ];
        let r = rank_all(&items).unwrap();
        for (qi, res) in r.iter().enumerate() {
            let q = &items[qi].descriptor;
            let mut expect: Vec<(f64, String)> = items
                .iter()
                .filter(|g| g.shape_id != items[qi].shape_id)
                .map(|g| {
                    let dot: f64 = (0..3).map(|i| q.data()[i] * g.descriptor.data()[i]).sum();
                    let n = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                    (dot / (n(q) * n(&g.descriptor)), g.shape_id.clone())
                })
                .collect();
            expect.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let ids: Vec<String> = expect.into_iter().map(|e| e.1).collect();
            assert_eq!(res.ranked, ids);
            assert!(res.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        assert!(rank_all(&[item("a", 0, &[1.0]), item("b", 0, &[1.0, 2.0])]).is_err());
    }
}
