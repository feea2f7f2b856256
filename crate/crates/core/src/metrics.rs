//! Attack metrics: ROC AUC (two independent computations), RNMSE and
//! edge AUC over a continuous adjacency.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidParameter("NaN score".into()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::SingleClass(format!(
                "AUC needs both classes ({pos} positive, {neg} negative)"
            )));
        }
        Ok((pos, neg))
    }
}

/// Area under the ROC curve by trapezoidal integration over the distinct
/// score thresholds. Tied scores form one diagonal ROC segment, which is
/// the half-credit convention.
pub fn auc(s: &ScoredLabels) -> Result<f64> {
    let (pos, neg) = s.class_counts()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap_or(Ordering::Equal));

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == threshold {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// `[#(pos > neg) + ½ #(pos = neg)] / (P N)` via midranks.
pub fn auc_rank(s: &ScoredLabels) -> Result<f64> {
    let (pos, neg) = s.class_counts()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| s.labels[k]).count();
        rank_sum_pos += midrank * tied_pos as f64;
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Standard deviation of the AUC of an uninformative scorer with no ties
/// (Mann-Whitney null): `sqrt((P + N + 1) / (12 P N))`.
pub fn auc_null_sigma(pos: usize, neg: usize) -> f64 {
    let (p, n) = (pos as f64, neg as f64);
    ((p + n + 1.0) / (12.0 * p * n)).sqrt()
}

/// `‖x − x̂‖ / ‖x‖` over flattened values.
pub fn rnmse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Dimension(format!(
            "reference has {} values, estimate {}",
            x.len(),
            x_hat.len()
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParameter("zero-norm reference".into()));
    }
    let err = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(err / norm)
}

pub fn rnmse_matrix(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    rnmse(
        &x.iter().copied().collect::<Vec<_>>(),
        &x_hat.iter().copied().collect::<Vec<_>>(),
    )
}

/// Upper-triangle (no diagonal) entries of a square matrix, row-major.
pub fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[[i, j]]);
        }
    }
    out
}

/// AUC of continuous adjacency scores against the true edge indicators.
pub fn edge_auc(true_adj: &Array2<f64>, a_cont: &Array2<f64>) -> Result<f64> {
    if true_adj.dim() != a_cont.dim() || true_adj.nrows() != true_adj.ncols() {
        return Err(Error::Dimension(format!(
            "adjacency {:?} vs scores {:?}",
            true_adj.dim(),
            a_cont.dim()
        )));
    }
    let labels = upper_triangle(true_adj).into_iter().map(|v| v > 0.0).collect();
    auc(&ScoredLabels::new(upper_triangle(a_cont), labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(P·N) pairwise concordance, the reference definition.
    fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    fn sl(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn worked_example() {
        // Positives 0.35, 0.8 against negatives 0.1, 0.4: 3 of 4 pairs ordered.
        let s = sl(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(auc(&s).unwrap(), 0.75);
        assert_eq!(auc_rank(&s).unwrap(), 0.75);
        assert_eq!(concordance(s.scores(), s.labels()), 0.75);
    }

    #[test]
    fn separated_and_constant() {
        assert_eq!(auc(&sl(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&sl(&[0.3; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc_rank(&sl(&[0.3; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(auc(&sl(&[0.1, 0.2], &[1, 1])), Err(Error::SingleClass(_))));
        assert!(ScoredLabels::new(vec![0.1], vec![]).is_err());
    }

    #[test]
    fn flipped_labels_complement() {
        let s = sl(&[0.2, 0.9, 0.4, 0.4, 0.7], &[0, 1, 1, 0, 0]);
        let f = ScoredLabels::new(s.scores().to_vec(), s.labels().iter().map(|l| !l).collect()).unwrap();
        assert!((auc(&s).unwrap() + auc(&f).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_matches_concordance_on_random_sets() {
        let mut r = rng::stream(42, "auc-oracle", &[]);
        for case in 0..100 {
            let n = r.random_range(2..=200);
            // Coarse grid so ties are common.
            let grid = if case % 2 == 0 { 10.0 } else { 1e6 };
            let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * grid).floor() / grid).collect();
            let s = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
            let want = concordance(&scores, &labels);
            assert!((auc(&s).unwrap() - want).abs() <= 1e-9, "case {case}");
            assert!((auc_rank(&s).unwrap() - want).abs() <= 1e-9, "case {case}");
        }
    }

    #[test]
    fn rnmse_cases() {
        assert_eq!(rnmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(rnmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(rnmse(&[3.0, 4.0], &[3.0, 0.0]).unwrap(), 0.8);
        assert!(rnmse(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn edge_auc_cases() {
        let truth = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(edge_auc(&truth, &truth).unwrap(), 1.0);
        assert_eq!(edge_auc(&truth, &Array2::from_elem((3, 3), 0.4)).unwrap(), 0.5);
        // Upper triangle (0,1), (0,2), (1,2) scored 0.9, 0.2, 0.6; only (0,1) is an edge.
        let scores = array![[0.0, 0.9, 0.2], [0.9, 0.0, 0.6], [0.2, 0.6, 0.0]];
        assert_eq!(edge_auc(&truth, &scores).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn negated_scores_complement(scores in proptest::collection::vec(-1e3f64..1e3, 4..60), seed in 0u64..1000) {
            let mut r = rng::stream(seed, "neg", &[]);
            let mut labels: Vec<bool> = scores.iter().map(|_| r.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let mut dedup = scores.clone();
            dedup.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dedup.dedup();
            prop_assume!(dedup.len() == scores.len());
            let a = auc(&ScoredLabels::new(scores.clone(), labels.clone()).unwrap()).unwrap();
            let b = auc(&ScoredLabels::new(scores.iter().map(|s| -s).collect(), labels).unwrap()).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance(scores in proptest::collection::vec(-5f64..5.0, 4..60), seed in 0u64..1000) {
            let mut r = rng::stream(seed, "mono", &[]);
            let mut labels: Vec<bool> = scores.iter().map(|_| r.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&ScoredLabels::new(scores.clone(), labels.clone()).unwrap()).unwrap();
            let b = auc(&ScoredLabels::new(scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect(), labels).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn rnmse_linear_in_error(x in proptest::collection::vec(-10f64..10.0, 1..20), lambda in 0f64..5.0) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
            let e: Vec<f64> = (0..x.len()).map(|i| (i as f64 * 0.7).sin()).collect();
            let base = rnmse(&x, &x.iter().zip(&e).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
            let scaled = rnmse(&x, &x.iter().zip(&e).map(|(a, b)| a + lambda * b).collect::<Vec<_>>()).unwrap();
            prop_assert!((scaled - lambda * base).abs() < 1e-9 * (1.0 + lambda * base));
            prop_assert_eq!(rnmse(&x, &x).unwrap(), 0.0);
        }
    }
}
