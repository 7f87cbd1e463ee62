//! Likelihoods and structure scores.
//!
//! All scores are proportional forms: additive constants that do not depend
//! on the data or on the mixture weights are dropped, so values are only
//! comparable for the same node and the same data.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::CtbnModel;
use crate::stats::{FamilyStats, SufficientStats};

/// Floor applied to mixture weights before `ln pi` and `1 / pi`.
pub const PI_FLOOR: f64 = 1e-8;

/// Gamma prior on every rate: `alpha` per transition, `beta` per dwell state.
/// Values may be given per node; otherwise the scalar defaults apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaPrior {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_node: Option<Vec<(f64, f64)>>,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 10.0,
            per_node: None,
        }
    }
}

impl GammaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            per_node: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn per_node(values: Vec<(f64, f64)>) -> Result<Self> {
        let p = Self {
            per_node: Some(values),
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite();
        if !ok(self.alpha, self.beta) || self.per_node.iter().flatten().any(|&(a, b)| !ok(a, b)) {
            return Err(Error::Domain("gamma prior parameters must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn for_node(&self, node: usize) -> (f64, f64) {
        match &self.per_node {
            Some(v) => v[node],
            None => (self.alpha, self.beta),
        }
    }
}

/// Symmetric Dirichlet prior on each node's mixture weights.
///
/// `c = 0` is accepted: the prior is then improper, but its unnormalised log
/// density `-sum ln pi` is still usable as a penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirichletPrior {
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_node: Option<Vec<f64>>,
}

impl Default for DirichletPrior {
    fn default() -> Self {
        Self { c: 0.9, per_node: None }
    }
}

impl DirichletPrior {
    pub fn new(c: f64) -> Result<Self> {
        let p = Self { c, per_node: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |c: f64| c >= 0.0 && c.is_finite();
        if !ok(self.c) || self.per_node.iter().flatten().any(|&c| !ok(c)) {
            return Err(Error::Domain("Dirichlet concentration must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn for_node(&self, node: usize) -> f64 {
        match &self.per_node {
            Some(v) => v[node],
            None => self.c,
        }
    }
}

/// A node's distribution over candidate parent subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeWeights {
    pub subsets: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl NodeWeights {
    pub fn new(subsets: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if subsets.is_empty() || subsets.len() != weights.len() {
            return Err(Error::Domain(
                "need one weight per subset and at least one subset".into(),
            ));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "mixture weights must lie on the simplex (sum {s})"
            )));
        }
        Ok(Self { subsets, weights })
    }

    pub fn uniform(subsets: Vec<Vec<usize>>) -> Self {
        let w = 1.0 / subsets.len() as f64;
        let weights = vec![w; subsets.len()];
        Self { subsets, weights }
    }

    /// All mass on `subsets[k]`.
    pub fn degenerate(subsets: Vec<Vec<usize>>, k: usize) -> Self {
        let mut weights = vec![0.0; subsets.len()];
        weights[k] = 1.0;
        Self { subsets, weights }
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Index of the most probable subset; ties go to the smaller subset, then
    /// to the lexicographically smaller one.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..self.len() {
            let (a, b) = (self.weights[k], self.weights[best]);
            let better = a > b
                || (a == b
                    && (self.subsets[k].len(), &self.subsets[k]) < (self.subsets[best].len(), &self.subsets[best]));
            if better {
                best = k;
            }
        }
        best
    }

    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().filter(|&&w| w > 0.0).count() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub nodes: Vec<NodeWeights>,
}

impl MixtureWeights {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> &NodeWeights {
        &self.nodes[i]
    }
}

/// `ln Gamma(a) - a ln b`.
#[inline]
pub fn gamma_term(a: f64, b: f64) -> f64 {
    ln_gamma(a) - a * b.ln()
}

/// `a (ln(a / b) - 1)`, the large-`a` form of [`gamma_term`].
#[inline]
pub fn stirling_term(a: f64, b: f64) -> f64 {
    a * ((a / b).ln() - 1.0)
}

/// Result of evaluating the complete-data log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    /// Number of transitions observed where the model rate is zero; when
    /// positive `value` is `-inf`.
    pub zero_rate_transitions: usize,
}

/// `sum [M ln R - T R]` over nodes, parent configurations and transitions.
/// `stats` must use the model's parent sets as contexts.
pub fn complete_log_likelihood(stats: &SufficientStats, model: &CtbnModel) -> Result<LogLikelihood> {
    if stats.n_nodes() != model.n_nodes() {
        return Err(Error::Domain("statistics and model differ in node count".into()));
    }
    let mut value = 0.0;
    let mut zero_hits = 0;
    for (i, f) in stats.families.iter().enumerate() {
        let cim = model.cim(i);
        if f.parents != cim.parents() || f.card != cim.card() {
            return Err(Error::Domain(format!("statistics of node {i} do not match its CIM")));
        }
        for u in 0..f.n_configs() {
            for x in 0..f.card {
                for xp in 0..f.card {
                    if xp == x {
                        continue;
                    }
                    let (m, r) = (f.m(u, x, xp), cim.rate(u, x, xp));
                    if m > 0.0 {
                        if r <= 0.0 {
                            zero_hits += 1;
                        } else {
                            value += m * r.ln();
                        }
                    }
                    value -= f.t(u, x) * r;
                }
            }
        }
    }
    if zero_hits > 0 {
        value = f64::NEG_INFINITY;
    }
    Ok(LogLikelihood {
        value,
        zero_rate_transitions: zero_hits,
    })
}

/// Gamma-marginal score of one family with weight `w` on its statistics:
/// `sum [ln Gamma(w M + alpha) - (w M + alpha) ln(w T + beta)]`.
pub fn family_gamma_score(f: &FamilyStats, w: f64, alpha: f64, beta: f64) -> f64 {
    let k = f.card;
    let mut s = 0.0;
    for u in 0..f.n_configs() {
        for x in 0..k {
            let b = w * f.t(u, x) + beta;
            let lb = b.ln();
            for xp in 0..k {
                if xp != x {
                    let a = w * f.m(u, x, xp) + alpha;
                    s += ln_gamma(a) - a * lb;
                }
            }
        }
    }
    s
}

/// [`family_gamma_score`] with Stirling's form in place of `ln Gamma`.
pub fn family_stirling_score(f: &FamilyStats, w: f64, alpha: f64, beta: f64) -> f64 {
    let k = f.card;
    let mut s = 0.0;
    for u in 0..f.n_configs() {
        for x in 0..k {
            let b = w * f.t(u, x) + beta;
            for xp in 0..k {
                if xp != x {
                    s += stirling_term(w * f.m(u, x, xp) + alpha, b);
                }
            }
        }
    }
    s
}

/// Derivative of [`family_gamma_score`] with respect to `w`:
/// `sum [M psi(abar) - M ln bbar - abar T / bbar]`.
pub fn family_gamma_derivative(f: &FamilyStats, w: f64, alpha: f64, beta: f64) -> f64 {
    let k = f.card;
    let mut s = 0.0;
    for u in 0..f.n_configs() {
        for x in 0..k {
            let t = f.t(u, x);
            let b = w * t + beta;
            let lb = b.ln();
            for xp in 0..k {
                if xp != x {
                    let m = f.m(u, x, xp);
                    let a = w * m + alpha;
                    if m != 0.0 {
                        s += m * (digamma(a) - lb);
                    }
                    s -= a * t / b;
                }
            }
        }
    }
    s
}

/// Exact marginal score of the structure encoded by the statistics' parent
/// contexts.
pub fn exact_marginal_score(stats: &SufficientStats, prior: &GammaPrior) -> f64 {
    stats
        .families
        .iter()
        .map(|f| {
            let (a, b) = prior.for_node(f.node);
            family_gamma_score(f, 1.0, a, b)
        })
        .sum()
}

/// `sum (c - 1) ln max(pi, floor)`; the flag reports whether the floor was hit.
pub fn dirichlet_term(weights: &[f64], c: f64) -> (f64, bool) {
    let mut clamped = false;
    let mut s = 0.0;
    for &w in weights {
        if w < PI_FLOOR {
            clamped = true;
        }
        s += (c - 1.0) * w.max(PI_FLOOR).ln();
    }
    (s, clamped)
}

/// Per-node pieces of the mixture bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBound {
    pub gamma: f64,
    pub dirichlet: f64,
    pub clamped: bool,
}

impl NodeBound {
    pub fn value(&self) -> f64 {
        self.gamma + self.dirichlet
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub value: f64,
    pub nodes: Vec<NodeBound>,
    /// Set when some weight was below the floor.
    pub clamped: bool,
}

/// Marginalises a family's statistics onto every candidate subset.
pub fn component_stats(f: &FamilyStats, subsets: &[Vec<usize>]) -> Result<Vec<FamilyStats>> {
    subsets.iter().map(|m| f.marginalize(m)).collect()
}

/// Mixture bound of one node from pre-marginalised component statistics.
pub fn node_bound(comps: &[FamilyStats], weights: &[f64], alpha: f64, beta: f64, c: f64) -> NodeBound {
    let gamma = comps
        .iter()
        .zip(weights)
        .map(|(f, &w)| family_gamma_score(f, w, alpha, beta))
        .sum();
    let (dirichlet, clamped) = dirichlet_term(weights, c);
    NodeBound {
        gamma,
        dirichlet,
        clamped,
    }
}

pub fn node_bound_stirling(comps: &[FamilyStats], weights: &[f64], alpha: f64, beta: f64, c: f64) -> NodeBound {
    let gamma = comps
        .iter()
        .zip(weights)
        .map(|(f, &w)| family_stirling_score(f, w, alpha, beta))
        .sum();
    let (dirichlet, clamped) = dirichlet_term(weights, c);
    NodeBound {
        gamma,
        dirichlet,
        clamped,
    }
}

/// Gradient of [`node_bound`] in the weights. The second vector flags
/// coordinates whose prior term was clamped (its gradient contribution is 0).
pub fn node_gradient(comps: &[FamilyStats], weights: &[f64], alpha: f64, beta: f64, c: f64) -> (Vec<f64>, Vec<bool>) {
    let mut clamped = vec![false; weights.len()];
    let g = comps
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(k, (f, &w))| {
            let prior = if w < PI_FLOOR {
                clamped[k] = true;
                0.0
            } else {
                (c - 1.0) / w
            };
            family_gamma_derivative(f, w, alpha, beta) + prior
        })
        .collect();
    (g, clamped)
}

fn check_weights(stats: &SufficientStats, pi: &MixtureWeights) -> Result<()> {
    if stats.n_nodes() != pi.n_nodes() {
        return Err(Error::Domain(
            "statistics and mixture weights differ in node count".into(),
        ));
    }
    Ok(())
}

fn bound_with(
    stats: &SufficientStats,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    dprior: &DirichletPrior,
    node_fn: fn(&[FamilyStats], &[f64], f64, f64, f64) -> NodeBound,
) -> Result<BoundReport> {
    check_weights(stats, pi)?;
    let mut nodes = Vec::with_capacity(pi.n_nodes());
    for (i, nw) in pi.nodes.iter().enumerate() {
        let comps = component_stats(stats.family(i), &nw.subsets)?;
        let (a, b) = gprior.for_node(i);
        nodes.push(node_fn(&comps, &nw.weights, a, b, dprior.for_node(i)));
    }
    Ok(BoundReport {
        value: nodes.iter().map(NodeBound::value).sum(),
        clamped: nodes.iter().any(|n| n.clamped),
        nodes,
    })
}

/// Lower bound on the log-posterior of the mixture weights (log-partition
/// dropped). Statistics may be exact counts or expectations; each node's
/// context must contain all of its candidate subsets.
pub fn mixture_lower_bound(
    stats: &SufficientStats,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    dprior: &DirichletPrior,
) -> Result<BoundReport> {
    bound_with(stats, pi, gprior, dprior, node_bound)
}

/// As [`mixture_lower_bound`] with Stirling's approximation for `ln Gamma`.
pub fn mixture_lower_bound_stirling(
    stats: &SufficientStats,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    dprior: &DirichletPrior,
) -> Result<BoundReport> {
    bound_with(stats, pi, gprior, dprior, node_bound_stirling)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub gradient: Vec<f64>,
    pub clamped: Vec<bool>,
}

/// Gradient of node `node`'s bound with respect to its mixture weights.
pub fn mixture_gradient(
    stats: &SufficientStats,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    dprior: &DirichletPrior,
    node: usize,
) -> Result<GradientReport> {
    check_weights(stats, pi)?;
    let nw = pi
        .nodes
        .get(node)
        .ok_or_else(|| Error::Domain(format!("unknown node {node}")))?;
    let comps = component_stats(stats.family(node), &nw.subsets)?;
    let (a, b) = gprior.for_node(node);
    let (gradient, clamped) = node_gradient(&comps, &nw.weights, a, b, dprior.for_node(node));
    Ok(GradientReport { gradient, clamped })
}

/// `p[i][j]` = probability of the edge `i -> j`, the weight of all of
/// `j`'s subsets that contain `i`.
pub fn edge_probabilities(pi: &MixtureWeights) -> Vec<Vec<f64>> {
    let n = pi.n_nodes();
    let mut p = vec![vec![0.0; n]; n];
    for (j, nw) in pi.nodes.iter().enumerate() {
        for (m, &w) in nw.subsets.iter().zip(&nw.weights) {
            for &i in m {
                if i != j {
                    p[i][j] += w;
                }
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cim, Graph, StateSpace};

    fn single(m01: f64, t0: f64) -> SufficientStats {
        let mut f = FamilyStats::zeros(0, vec![], 2, vec![]);
        *f.m_mut(0, 0, 1) = m01;
        *f.t_mut(0, 0) = t0;
        SufficientStats { families: vec![f] }
    }

    #[test]
    fn log_likelihood_of_nothing_is_zero() {
        let space = StateSpace::new(vec![2]).unwrap();
        let cim = Cim::new(0, vec![], 2, vec![], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let model = CtbnModel::new(space, Graph::empty(1), vec![cim]).unwrap();
        assert_eq!(complete_log_likelihood(&single(0.0, 0.0), &model).unwrap().value, 0.0);
        assert_eq!(complete_log_likelihood(&single(1.0, 0.5), &model).unwrap().value, -0.5);
    }

    #[test]
    fn zero_rate_is_reported() {
        let space = StateSpace::new(vec![2]).unwrap();
        let cim = Cim::new(0, vec![], 2, vec![], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let model = CtbnModel::new(space, Graph::empty(1), vec![cim]).unwrap();
        let ll = complete_log_likelihood(&single(1.0, 0.5), &model).unwrap();
        assert_eq!(ll.value, f64::NEG_INFINITY);
        assert_eq!(ll.zero_rate_transitions, 1);
    }

    #[test]
    fn exact_score_single_terms() {
        // one active (x, x') term: keep only x=0 -> 1 by using a one-row family
        let f = single(0.0, 0.0).families.remove(0);
        let term = |m: f64, t: f64| gamma_term(m + 5.0, t + 10.0);
        assert!((term(0.0, 0.0) - (-8.334871)).abs() < 1e-6);
        assert!((term(1.0, 0.5) - (-9.320760)).abs() < 1e-6);
        // the family has two off-diagonal terms (0->1 and 1->0), both prior-only
        assert!((family_gamma_score(&f, 1.0, 5.0, 10.0) - 2.0 * term(0.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn stirling_single_term() {
        assert!((stirling_term(10.0, 10.0) + 10.0).abs() < 1e-12);
        // relative deviation with abar = bbar decays like ln(abar) / abar
        let rel = |a: f64| (gamma_term(a, a) - stirling_term(a, a)).abs() / gamma_term(a, a).abs();
        assert!((rel(1e3) - 2.528447e-3).abs() < 1e-8, "{}", rel(1e3));
        assert!(rel(1e5) < 1e-4, "{}", rel(1e5));
        assert!(rel(1e5) < rel(1e4) && rel(1e4) < rel(1e3));
    }

    #[test]
    fn stirling_gamma_at_ten() {
        let stirling = (2.0 * std::f64::consts::PI / 10.0).sqrt() * (10.0f64 / std::f64::consts::E).powf(10.0);
        assert!((stirling - 359_869.561_9).abs() < 1e-3);
        assert!((ln_gamma(10.0).exp() - 362_880.0).abs() < 1e-6);
        assert!(((362_880.0 - stirling) / 362_880.0 - 0.008296).abs() < 1e-6);
    }

    #[test]
    fn dirichlet_gradient_term() {
        let f = FamilyStats::zeros(0, vec![], 2, vec![]);
        let (g, _) = node_gradient(&[f.clone(), f], &[0.5, 0.5], 5.0, 10.0, 0.9);
        // zero data: the gamma part of the derivative is -alpha * 0 / beta = 0
        assert!((g[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn flat_objective_has_zero_gradient() {
        let f = FamilyStats::zeros(0, vec![], 2, vec![]);
        let (g, c) = node_gradient(&[f.clone(), f], &[0.3, 0.7], 5.0, 10.0, 1.0);
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(c, vec![false, false]);
    }

    #[test]
    fn clamp_is_flagged() {
        let f = FamilyStats::zeros(0, vec![], 2, vec![]);
        let (_, c) = node_gradient(&[f.clone(), f.clone()], &[0.0, 1.0], 5.0, 10.0, 0.9);
        assert_eq!(c, vec![true, false]);
        assert!(node_bound(&[f.clone(), f], &[0.0, 1.0], 5.0, 10.0, 0.9).clamped);
    }

    #[test]
    fn edge_probabilities_from_subsets() {
        let subsets = vec![vec![], vec![0], vec![1], vec![0, 1]];
        let pi = MixtureWeights {
            nodes: vec![
                NodeWeights::uniform(vec![vec![], vec![1]]),
                NodeWeights::degenerate(vec![vec![], vec![0]], 1),
                NodeWeights::new(subsets, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            ],
        };
        let p = edge_probabilities(&pi);
        assert!((p[1][0] - 0.5).abs() < 1e-12);
        assert_eq!(p[0][1], 1.0);
        assert!((p[0][2] - 0.6).abs() < 1e-12 && (p[1][2] - 0.7).abs() < 1e-12);
        assert_eq!((p[0][0], p[1][1], p[2][2]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn argmax_prefers_smaller_subset_on_ties() {
        let nw = NodeWeights::new(vec![vec![], vec![0], vec![1], vec![0, 1]], vec![0.1, 0.4, 0.1, 0.4]).unwrap();
        assert_eq!(nw.argmax(), 1);
    }
}
