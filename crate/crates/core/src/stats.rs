//! Sufficient statistics: transition counts `M(x, x' | u)` and dwell times
//! `T(x | u)` per node and parent configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mixed_radix_decode, mixed_radix_index, Graph, StateSpace};
use crate::simulation::Trajectory;

/// Statistics of one node relative to an ordered parent context.
/// `m` is laid out `[u][x][x']` (diagonal unused, kept at 0) and `t` `[u][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyStats {
    pub node: usize,
    pub parents: Vec<usize>,
    pub card: usize,
    pub parent_cards: Vec<usize>,
    pub m: Vec<f64>,
    pub t: Vec<f64>,
}

impl FamilyStats {
    pub fn zeros(node: usize, parents: Vec<usize>, card: usize, parent_cards: Vec<usize>) -> Self {
        let n_u: usize = parent_cards.iter().product();
        Self {
            node,
            parents,
            card,
            parent_cards,
            m: vec![0.0; n_u * card * card],
            t: vec![0.0; n_u * card],
        }
    }

    pub fn for_family(space: &StateSpace, node: usize, parents: &[usize]) -> Self {
        Self::zeros(node, parents.to_vec(), space.card(node), space.cards_of(parents))
    }

    pub fn n_configs(&self) -> usize {
        self.t.len() / self.card
    }

    #[inline]
    pub fn m(&self, u: usize, x: usize, xp: usize) -> f64 {
        self.m[(u * self.card + x) * self.card + xp]
    }

    #[inline]
    pub fn t(&self, u: usize, x: usize) -> f64 {
        self.t[u * self.card + x]
    }

    #[inline]
    pub fn m_mut(&mut self, u: usize, x: usize, xp: usize) -> &mut f64 {
        &mut self.m[(u * self.card + x) * self.card + xp]
    }

    #[inline]
    pub fn t_mut(&mut self, u: usize, x: usize) -> &mut f64 {
        &mut self.t[u * self.card + x]
    }

    pub fn total_time(&self) -> f64 {
        self.t.iter().sum()
    }

    pub fn total_transitions(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Index of the configuration of this family's parents in a joint state.
    pub fn config_of(&self, state: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (&p, &c) in self.parents.iter().zip(&self.parent_cards) {
            idx += state[p] * stride;
            stride *= c;
        }
        idx
    }

    /// For every configuration of this family, the index of its projection
    /// onto `subset` (which must be contained in the parent list).
    pub fn projection(&self, subset: &[usize]) -> Result<Vec<usize>> {
        let pos: Vec<usize> = subset
            .iter()
            .map(|s| {
                self.parents.iter().position(|p| p == s).ok_or_else(|| {
                    Error::Domain(format!(
                        "node {}: {s} is not in the parent context {:?}",
                        self.node, self.parents
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let sub_cards: Vec<usize> = pos.iter().map(|&k| self.parent_cards[k]).collect();
        Ok((0..self.n_configs())
            .map(|u| {
                let full = mixed_radix_decode(&self.parent_cards, u);
                let sub: Vec<usize> = pos.iter().map(|&k| full[k]).collect();
                mixed_radix_index(&sub_cards, &sub)
            })
            .collect())
    }

    /// Sums out all parents not in `subset`; the result is indexed by the
    /// configurations of `subset` in the order given.
    pub fn marginalize(&self, subset: &[usize]) -> Result<FamilyStats> {
        let proj = self.projection(subset)?;
        let sub_cards: Vec<usize> = subset
            .iter()
            .map(|s| self.parent_cards[self.parents.iter().position(|p| p == s).unwrap()])
            .collect();
        let mut out = FamilyStats::zeros(self.node, subset.to_vec(), self.card, sub_cards);
        let k = self.card;
        for (u, &v) in proj.iter().enumerate() {
            for x in 0..k {
                out.t[v * k + x] += self.t[u * k + x];
                for xp in 0..k {
                    out.m[(v * k + x) * k + xp] += self.m[(u * k + x) * k + xp];
                }
            }
        }
        Ok(out)
    }

    /// Adds `other` in place; both must describe the same family.
    pub fn add(&mut self, other: &FamilyStats) -> Result<()> {
        if self.node != other.node || self.parents != other.parents || self.m.len() != other.m.len() {
            return Err(Error::Domain("cannot add statistics of different families".into()));
        }
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a += b;
        }
        for (a, b) in self.t.iter_mut().zip(&other.t) {
            *a += b;
        }
        Ok(())
    }

    pub fn to_doc(&self) -> FamilyStatsDoc {
        let k = self.card;
        let n_u = self.n_configs();
        FamilyStatsDoc {
            node: self.node,
            parents: self.parents.clone(),
            m: (0..n_u)
                .map(|u| (0..k).map(|x| (0..k).map(|xp| self.m(u, x, xp)).collect()).collect())
                .collect(),
            t: (0..n_u).map(|u| (0..k).map(|x| self.t(u, x)).collect()).collect(),
        }
    }
}

/// JSON layout `{node, parents, M: [u][x][x'], T: [u][x]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyStatsDoc {
    pub node: usize,
    pub parents: Vec<usize>,
    #[serde(rename = "M")]
    pub m: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
}

/// One [`FamilyStats`] per node.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub families: Vec<FamilyStats>,
}

impl SufficientStats {
    /// Empty statistics with parent contexts taken from `graph`.
    pub fn zeros(space: &StateSpace, graph: &Graph) -> Self {
        Self {
            families: (0..space.n_nodes())
                .map(|i| FamilyStats::for_family(space, i, graph.parents(i)))
                .collect(),
        }
    }

    /// Empty statistics with explicit per-node parent contexts.
    pub fn zeros_with_contexts(space: &StateSpace, contexts: &[Vec<usize>]) -> Self {
        Self {
            families: contexts
                .iter()
                .enumerate()
                .map(|(i, ps)| FamilyStats::for_family(space, i, ps))
                .collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.families.len()
    }

    pub fn family(&self, node: usize) -> &FamilyStats {
        &self.families[node]
    }

    pub fn add(&mut self, other: &SufficientStats) -> Result<()> {
        if self.families.len() != other.families.len() {
            return Err(Error::Domain("statistics cover different node sets".into()));
        }
        for (a, b) in self.families.iter_mut().zip(&other.families) {
            a.add(b)?;
        }
        Ok(())
    }

    /// Accumulates one trajectory into these statistics.
    pub fn accumulate(&mut self, traj: &Trajectory, space: &StateSpace) -> Result<()> {
        traj.validate(space)?;
        if self.families.len() != space.n_nodes() {
            return Err(Error::Domain("statistics and state space differ in node count".into()));
        }
        let mut state = traj.initial.clone();
        let mut t0 = 0.0;
        for e in &traj.events {
            let dt = e.time - t0;
            for f in &mut self.families {
                let u = f.config_of(&state);
                *f.t_mut(u, state[f.node]) += dt;
            }
            let f = &mut self.families[e.node];
            let u = f.config_of(&state);
            *f.m_mut(u, state[e.node], e.state) += 1.0;
            state[e.node] = e.state;
            t0 = e.time;
        }
        let dt = traj.t_end - t0;
        for f in &mut self.families {
            let u = f.config_of(&state);
            *f.t_mut(u, state[f.node]) += dt;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let docs: Vec<FamilyStatsDoc> = self.families.iter().map(FamilyStats::to_doc).collect();
        Ok(serde_json::to_string_pretty(&docs)?)
    }
}

/// Exact statistics of a path relative to the parent sets of `graph`.
pub fn count_statistics(traj: &Trajectory, space: &StateSpace, graph: &Graph) -> Result<SufficientStats> {
    if graph.n_nodes() != space.n_nodes() {
        return Err(Error::Format("graph and state space differ in node count".into()));
    }
    let mut s = SufficientStats::zeros(space, graph);
    s.accumulate(traj, space)?;
    Ok(s)
}

/// Statistics of many paths, summed.
pub fn count_statistics_many(trajs: &[Trajectory], space: &StateSpace, graph: &Graph) -> Result<SufficientStats> {
    let mut s = SufficientStats::zeros(space, graph);
    for t in trajs {
        s.accumulate(t, space)?;
    }
    Ok(s)
}

/// Sums the statistics of `node` over all parents outside `subset`.
pub fn marginalize_stats(stats: &SufficientStats, node: usize, subset: &[usize]) -> Result<FamilyStats> {
    stats
        .families
        .get(node)
        .ok_or_else(|| Error::Domain(format!("unknown node {node}")))?
        .marginalize(subset)
}
