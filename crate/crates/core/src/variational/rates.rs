use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mixed_radix_decode, mixed_radix_index, CtbnModel, StateSpace};
use crate::scoring::{GammaPrior, MixtureWeights};
use crate::stats::FamilyStats;

/// Weights below this are treated as inactive by the engine.
pub const ACTIVE_WEIGHT: f64 = 1e-12;

/// Largest parent context for which full geometric-mean tables are built.
pub const CONTEXT_CAP: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Geometric posterior-rate mean over the full parent context.
    ExactGeometric,
    /// Arithmetic mean in place of the geometric one; works per subset.
    GreedyArithmetic,
}

/// Expected statistics per node and per candidate subset, aligned with the
/// subsets of the mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStats {
    pub nodes: Vec<Vec<FamilyStats>>,
}

impl ExpectedStats {
    pub fn zeros(space: &StateSpace, pi: &MixtureWeights) -> Self {
        Self {
            nodes: pi
                .nodes
                .iter()
                .enumerate()
                .map(|(i, nw)| {
                    nw.subsets
                        .iter()
                        .map(|m| FamilyStats::for_family(space, i, m))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &ExpectedStats) -> Result<()> {
        if self.nodes.len() != other.nodes.len() {
            return Err(Error::Domain("expected statistics differ in node count".into()));
        }
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            if a.len() != b.len() {
                return Err(Error::Domain("expected statistics differ in subsets".into()));
            }
            for (fa, fb) in a.iter_mut().zip(b) {
                fa.add(fb)?;
            }
        }
        Ok(())
    }

    /// Statistics of `node` for the subset at index `k`.
    pub fn component(&self, node: usize, k: usize) -> &FamilyStats {
        &self.nodes[node][k]
    }
}

/// Full-context tables used by the geometric mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricTables {
    pub context: Vec<usize>,
    pub context_cards: Vec<usize>,
    /// `proj[m][u]`: index of the projection of context configuration `u` on subset `m`.
    pub proj: Vec<Vec<usize>>,
    /// `prod_m r_m^{pi_m}`, laid out `[u][x][x']`.
    pub geo: Vec<f64>,
    /// `sum_m pi_m ln r_m`.
    pub ln_geo: Vec<f64>,
    /// `sum_m pi_m r_m`.
    pub arith: Vec<f64>,
}

/// Posterior expected rates of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRates {
    pub card: usize,
    pub subsets: Vec<Vec<usize>>,
    pub subset_cards: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    /// Component rates `abar / bbar` per subset, `[u_m][x][x']`, diagonal 0.
    pub comp: Vec<Vec<f64>>,
    /// Indices of subsets with weight at or above [`ACTIVE_WEIGHT`].
    pub active: Vec<usize>,
    /// Present when the geometric mean differs from the arithmetic one.
    pub geometric: Option<GeometricTables>,
}

impl NodeRates {
    #[inline]
    pub fn component_rate(&self, m: usize, u_m: usize, x: usize, xp: usize) -> f64 {
        self.comp[m][(u_m * self.card + x) * self.card + xp]
    }

    fn subset_config(&self, m: usize, state: &[usize]) -> usize {
        let s: Vec<usize> = self.subsets[m].iter().map(|&p| state[p]).collect();
        mixed_radix_index(&self.subset_cards[m], &s)
    }

    /// Arithmetic and geometric means of the rate `x -> xp` given the
    /// parents' states in the joint state `state`.
    pub fn means(&self, state: &[usize], x: usize, xp: usize) -> (f64, f64) {
        let mut arith = 0.0;
        let mut geo = 1.0;
        for (m, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let r = self.component_rate(m, self.subset_config(m, state), x, xp);
            arith += w * r;
            geo *= r.powf(w);
        }
        (arith, geo)
    }

    /// Largest total exit rate of any active component.
    pub fn max_exit(&self) -> f64 {
        let k = self.card;
        let mut best: f64 = 0.0;
        for &m in &self.active {
            for row in self.comp[m].chunks(k) {
                best = best.max(row.iter().sum());
            }
        }
        best
    }

    pub fn uses_geometric(&self) -> bool {
        self.geometric.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRates {
    pub nodes: Vec<NodeRates>,
}

impl PosteriorRates {
    /// Degenerate rates equal to a known model's CIMs, for smoothing with
    /// fixed parameters.
    pub fn from_model(model: &CtbnModel) -> Self {
        let space = model.space();
        let nodes = model
            .cims()
            .iter()
            .map(|cim| {
                let k = cim.card();
                let mut comp = cim.rates().to_vec();
                for u in 0..cim.n_configs() {
                    for x in 0..k {
                        comp[(u * k + x) * k + x] = 0.0;
                    }
                }
                NodeRates {
                    card: k,
                    subsets: vec![cim.parents().to_vec()],
                    subset_cards: vec![space.cards_of(cim.parents())],
                    weights: vec![1.0],
                    comp: vec![comp],
                    active: vec![0],
                    geometric: None,
                }
            })
            .collect();
        Self { nodes }
    }

    pub fn max_exit(&self) -> f64 {
        self.nodes.iter().map(NodeRates::max_exit).fold(0.0, f64::max)
    }

    /// Mixture weights that these rates were built for.
    pub fn weights(&self) -> MixtureWeights {
        MixtureWeights {
            nodes: self
                .nodes
                .iter()
                .map(|n| crate::scoring::NodeWeights {
                    subsets: n.subsets.clone(),
                    weights: n.weights.clone(),
                })
                .collect(),
        }
    }
}

/// Posterior expected rates from expected statistics: component rates
/// `(pi_m E[M] + alpha) / (pi_m E[T] + beta)`, their arithmetic mean and,
/// in geometric mode for non-degenerate nodes, their geometric mean over
/// the union of the candidate subsets.
pub fn posterior_rates(
    space: &StateSpace,
    estats: &ExpectedStats,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    mode: MeanMode,
) -> Result<PosteriorRates> {
    if estats.nodes.len() != pi.n_nodes() || pi.n_nodes() != space.n_nodes() {
        return Err(Error::Domain(
            "statistics, weights and state space differ in node count".into(),
        ));
    }
    let mut nodes = Vec::with_capacity(pi.n_nodes());
    for (i, nw) in pi.nodes.iter().enumerate() {
        let k = space.card(i);
        let (alpha, beta) = gprior.for_node(i);
        let mut comp = Vec::with_capacity(nw.len());
        for (m, f) in estats.nodes[i].iter().enumerate() {
            if f.parents != nw.subsets[m] {
                return Err(Error::Domain(format!("node {i}: statistics do not match subset {m}")));
            }
            let w = nw.weights[m];
            let mut r = vec![0.0; f.m.len()];
            for u in 0..f.n_configs() {
                for x in 0..k {
                    let b = w * f.t(u, x) + beta;
                    for xp in 0..k {
                        if xp != x {
                            r[(u * k + x) * k + xp] = (w * f.m(u, x, xp) + alpha) / b;
                        }
                    }
                }
            }
            comp.push(r);
        }
        let active: Vec<usize> = (0..nw.len()).filter(|&m| nw.weights[m] >= ACTIVE_WEIGHT).collect();
        let subset_cards: Vec<Vec<usize>> = nw.subsets.iter().map(|m| space.cards_of(m)).collect();
        let mut rates = NodeRates {
            card: k,
            subsets: nw.subsets.clone(),
            subset_cards,
            weights: nw.weights.clone(),
            comp,
            active,
            geometric: None,
        };
        if mode == MeanMode::ExactGeometric && rates.active.len() > 1 {
            rates.geometric = Some(geometric_tables(space, &rates)?);
        }
        nodes.push(rates);
    }
    Ok(PosteriorRates { nodes })
}

fn geometric_tables(space: &StateSpace, r: &NodeRates) -> Result<GeometricTables> {
    let mut context: Vec<usize> = r.subsets.iter().flatten().copied().collect();
    context.sort_unstable();
    context.dedup();
    let context_cards = space.cards_of(&context);
    let n_u = space.n_configs(&context).filter(|&n| n <= CONTEXT_CAP).ok_or_else(|| {
        Error::Config(format!(
            "parent context of {} nodes is too large for the geometric mean; use greedy search",
            context.len()
        ))
    })?;
    let proj: Vec<Vec<usize>> = r
        .subsets
        .iter()
        .enumerate()
        .map(|(m, sub)| {
            let pos: Vec<usize> = sub
                .iter()
                .map(|p| context.iter().position(|c| c == p).unwrap())
                .collect();
            (0..n_u)
                .map(|u| {
                    let full = mixed_radix_decode(&context_cards, u);
                    let s: Vec<usize> = pos.iter().map(|&k| full[k]).collect();
                    mixed_radix_index(&r.subset_cards[m], &s)
                })
                .collect()
        })
        .collect();
    let k = r.card;
    let mut geo = vec![0.0; n_u * k * k];
    let mut ln_geo = vec![0.0; n_u * k * k];
    let mut arith = vec![0.0; n_u * k * k];
    for u in 0..n_u {
        for x in 0..k {
            for xp in 0..k {
                if xp == x {
                    continue;
                }
                let (mut g, mut lg, mut a) = (1.0, 0.0, 0.0);
                for (m, &w) in r.weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let v = r.component_rate(m, proj[m][u], x, xp);
                    g *= v.powf(w);
                    lg += w * v.ln();
                    a += w * v;
                }
                let idx = (u * k + x) * k + xp;
                geo[idx] = g;
                ln_geo[idx] = lg;
                arith[idx] = a;
            }
        }
    }
    Ok(GeometricTables {
        context,
        context_cards,
        proj,
        geo,
        ln_geo,
        arith,
    })
}
