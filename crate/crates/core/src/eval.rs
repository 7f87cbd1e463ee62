//! Edge-recovery metrics.

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::error::{Error, Result};
use crate::model::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// `(false positive rate, true positive rate)`, from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` at each threshold.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPr {
    pub auroc: f64,
    pub aupr: f64,
    pub curves: Curves,
}

/// ROC and PR curves over all distinct score thresholds. AUROC is the
/// trapezoid area; AUPR is the step-wise sum of precision times recall gain.
pub fn roc_pr_flat(scores: &[f64], labels: &[bool]) -> Result<RocPr> {
    if scores.len() != labels.len() {
        return Err(Error::Domain("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "need at least one positive and one negative ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (p, n) = (pos as f64, neg as f64);
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut auroc, mut aupr) = (0.0, 0.0);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (x0, y0) = *roc.last().unwrap();
        let (x1, y1) = (fp as f64 / n, tp as f64 / p);
        auroc += (x1 - x0) * (y0 + y1) / 2.0;
        roc.push((x1, y1));
        let precision = tp as f64 / (tp + fp) as f64;
        let r0 = pr.last().map_or(0.0, |&(r, _)| r);
        aupr += (y1 - r0) * precision;
        pr.push((y1, precision));
    }
    Ok(RocPr {
        auroc,
        aupr,
        curves: Curves { roc, pr },
    })
}

/// Edge classification of `scores[i][j]` (for `i -> j`) against `truth`,
/// off-diagonal entries only.
pub fn roc_pr(scores: &[Vec<f64>], truth: &Graph) -> Result<RocPr> {
    let n = truth.n_nodes();
    if scores.len() != n || scores.iter().any(|r| r.len() != n) {
        return Err(Error::Domain(format!("score matrix must be {n}x{n}")));
    }
    let mut s = Vec::with_capacity(n * n);
    let mut l = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s.push(scores[i][j]);
                l.push(truth.has_edge(i, j));
            }
        }
    }
    roc_pr_flat(&s, &l)
}

/// Number of directed edges present in exactly one of the graphs.
pub fn hamming_distance(a: &Graph, b: &Graph) -> Result<usize> {
    if a.n_nodes() != b.n_nodes() {
        return Err(Error::Domain(format!(
            "graphs have {} and {} nodes",
            a.n_nodes(),
            b.n_nodes()
        )));
    }
    let n = a.n_nodes();
    let mut d = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && a.has_edge(i, j) != b.has_edge(i, j) {
                d += 1;
            }
        }
    }
    Ok(d)
}

/// Median with 25% and 75% percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut d = Data::new(values.to_vec());
        Some(Self {
            median: d.median(),
            p25: d.lower_quartile(),
            p75: d.upper_quartile(),
        })
    }
}
