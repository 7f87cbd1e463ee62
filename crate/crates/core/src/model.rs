//! Core CTBN data model: state spaces, graphs, conditional intensity
//! matrices (CIMs) and amalgamation into a joint CTMC generator.
//!
//! Parent configurations are indexed in mixed radix over the declared parent
//! list with the first parent least significant. Joint states use the same
//! convention over nodes (node 0 least significant).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of joint states accepted by [`amalgamate`].
pub const DEFAULT_JOINT_CAP: usize = 4096;

/// Mixed-radix index of `states` over `cards`, first entry least significant.
pub fn mixed_radix_index(cards: &[usize], states: &[usize]) -> usize {
    debug_assert_eq!(cards.len(), states.len());
    let mut idx = 0;
    let mut stride = 1;
    for (&c, &s) in cards.iter().zip(states) {
        idx += s * stride;
        stride *= c;
    }
    idx
}

/// Inverse of [`mixed_radix_index`].
pub fn mixed_radix_decode(cards: &[usize], mut index: usize) -> Vec<usize> {
    cards
        .iter()
        .map(|&c| {
            let s = index % c;
            index /= c;
            s
        })
        .collect()
}

/// Per-node cardinalities and optional numeric state labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    cards: Vec<usize>,
    labels: Vec<Option<Vec<f64>>>,
}

impl StateSpace {
    pub fn new(cards: Vec<usize>) -> Result<Self> {
        let n = cards.len();
        Self::with_labels(cards, vec![None; n])
    }

    pub fn with_labels(cards: Vec<usize>, labels: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if cards.is_empty() {
            return Err(Error::InvalidStateSpace("no nodes".into()));
        }
        if labels.len() != cards.len() {
            return Err(Error::InvalidStateSpace(
                "label list length differs from node count".into(),
            ));
        }
        for (i, (&c, l)) in cards.iter().zip(&labels).enumerate() {
            if c < 2 {
                return Err(Error::InvalidStateSpace(format!("node {i} has cardinality {c} < 2")));
            }
            if let Some(l) = l {
                if l.len() != c {
                    return Err(Error::InvalidStateSpace(format!(
                        "node {i} has {} labels for {c} states",
                        l.len()
                    )));
                }
                for a in 0..c {
                    if !l[a].is_finite() {
                        return Err(Error::InvalidStateSpace(format!("node {i} has a non-finite label")));
                    }
                    for b in a + 1..c {
                        if l[a] == l[b] {
                            return Err(Error::InvalidStateSpace(format!(
                                "node {i} has duplicate label {}",
                                l[a]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { cards, labels })
    }

    /// `n` binary nodes labelled {-1, +1} (state 0 is -1).
    pub fn binary_spins(n: usize) -> Self {
        Self {
            cards: vec![2; n],
            labels: vec![Some(vec![-1.0, 1.0]); n],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.cards.len()
    }

    pub fn card(&self, node: usize) -> usize {
        self.cards[node]
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn labels(&self, node: usize) -> Option<&[f64]> {
        self.labels[node].as_deref()
    }

    /// Numeric value of a state; falls back to the state index.
    pub fn label(&self, node: usize, state: usize) -> f64 {
        match &self.labels[node] {
            Some(l) => l[state],
            None => state as f64,
        }
    }

    /// Cardinalities of the listed nodes.
    pub fn cards_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&j| self.cards[j]).collect()
    }

    /// Number of configurations of a node set, `None` on overflow.
    pub fn n_configs(&self, nodes: &[usize]) -> Option<usize> {
        nodes.iter().try_fold(1usize, |acc, &j| acc.checked_mul(self.cards[j]))
    }

    pub fn joint_size(&self) -> Option<usize> {
        self.cards.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c))
    }

    pub fn is_spin(&self, node: usize) -> bool {
        if self.cards[node] != 2 {
            return false;
        }
        match &self.labels[node] {
            Some(l) => {
                let mut v = [l[0], l[1]];
                v.sort_by(|a, b| a.total_cmp(b));
                v == [-1.0, 1.0]
            }
            None => false,
        }
    }
}

/// Directed graph without self-loops; parent lists are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    parents: Vec<Vec<usize>>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Self {
            parents: vec![Vec::new(); n],
        }
    }

    /// Every ordered pair of distinct nodes is an edge.
    pub fn complete(n: usize) -> Self {
        Self {
            parents: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(from, to) in edges {
            g.add_edge(from, to)?;
        }
        Ok(g)
    }

    pub fn from_parent_sets(parents: Vec<Vec<usize>>) -> Result<Self> {
        let n = parents.len();
        let mut g = Self::empty(n);
        for (child, ps) in parents.into_iter().enumerate() {
            for p in ps {
                g.add_edge(p, child)?;
            }
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<()> {
        let n = self.n_nodes();
        if from >= n || to >= n {
            return Err(Error::InvalidGraph(format!(
                "edge ({from}, {to}) references a node outside 0..{n}"
            )));
        }
        if from == to {
            return Err(Error::InvalidGraph(format!("self-loop on node {from}")));
        }
        let ps = &mut self.parents[to];
        if let Err(pos) = ps.binary_search(&from) {
            ps.insert(pos, from);
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| self.parents[j].binary_search(&node).is_ok())
            .collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].binary_search(&from).is_ok()
    }

    /// Edges as (parent, child), ordered by child then parent.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .flat_map(|(child, ps)| ps.iter().map(move |&p| (p, child)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }
}

/// Conditional intensity matrix of one node: rates `R(x, x' | u)` stored
/// densely as `[u][x][x']`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cim {
    node: usize,
    parents: Vec<usize>,
    card: usize,
    parent_cards: Vec<usize>,
    rates: Vec<f64>,
}

impl Cim {
    /// Builds a CIM from off-diagonal rates; the diagonal is recomputed from
    /// the row-sum invariant.
    pub fn new(
        node: usize,
        parents: Vec<usize>,
        card: usize,
        parent_cards: Vec<usize>,
        mut rates: Vec<f64>,
    ) -> Result<Self> {
        if parents.len() != parent_cards.len() {
            return Err(Error::InvalidModel(format!(
                "node {node}: parent list and parent cardinalities differ in length"
            )));
        }
        let n_u: usize = parent_cards.iter().product();
        if rates.len() != n_u * card * card {
            return Err(Error::InvalidModel(format!(
                "node {node}: expected {} rates, found {}",
                n_u * card * card,
                rates.len()
            )));
        }
        for u in 0..n_u {
            for x in 0..card {
                let row = &mut rates[(u * card + x) * card..(u * card + x + 1) * card];
                let mut exit = 0.0;
                for (xp, &r) in row.iter().enumerate() {
                    if xp == x {
                        continue;
                    }
                    if !(r >= 0.0) || !r.is_finite() {
                        return Err(Error::InvalidModel(format!(
                            "node {node}: rate R({x},{xp}|{u}) = {r} is not a finite non-negative number"
                        )));
                    }
                    exit += r;
                }
                row[x] = -exit;
            }
        }
        Ok(Self {
            node,
            parents,
            card,
            parent_cards,
            rates,
        })
    }

    /// From a nested `[u][x][x']` array, as used by the JSON format.
    pub fn from_nested(
        node: usize,
        parents: Vec<usize>,
        card: usize,
        parent_cards: Vec<usize>,
        nested: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let mut flat = Vec::new();
        for (u, block) in nested.iter().enumerate() {
            if block.len() != card || block.iter().any(|row| row.len() != card) {
                return Err(Error::Format(format!(
                    "node {node}: rate block for parent configuration {u} is not {card}x{card}"
                )));
            }
            for row in block {
                flat.extend_from_slice(row);
            }
        }
        let cim = Self::new(node, parents, card, parent_cards, flat.clone())?;
        // Declared diagonals must already satisfy the row-sum invariant.
        for (a, b) in flat.iter().zip(&cim.rates) {
            if (a - b).abs() > 1e-9 * (1.0 + b.abs()) {
                return Err(Error::InvalidModel(format!(
                    "node {node}: rows of the declared CIM do not sum to zero"
                )));
            }
        }
        Ok(cim)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn card(&self) -> usize {
        self.card
    }

    pub fn parent_cards(&self) -> &[usize] {
        &self.parent_cards
    }

    pub fn n_configs(&self) -> usize {
        self.parent_cards.iter().product()
    }

    pub fn rate(&self, u: usize, x: usize, xp: usize) -> f64 {
        self.rates[(u * self.card + x) * self.card + xp]
    }

    pub fn exit_rate(&self, u: usize, x: usize) -> f64 {
        -self.rate(u, x, x)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        let c = self.card;
        (0..self.n_configs())
            .map(|u| (0..c).map(|x| (0..c).map(|xp| self.rate(u, x, xp)).collect()).collect())
            .collect()
    }
}

/// Glauber flip-rate CIM for a spin node: `1/2 + 1/2 tanh(gamma * x * sum_j u_j)`
/// with `x` and `u_j` the {-1, +1} labels.
pub fn build_glauber_cim(space: &StateSpace, node: usize, parents: &[usize], gamma: f64) -> Result<Cim> {
    if !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma = {gamma} is not finite")));
    }
    for &j in std::iter::once(&node).chain(parents) {
        if j >= space.n_nodes() || !space.is_spin(j) {
            return Err(Error::InvalidStateSpace(format!(
                "Glauber dynamics need binary {{-1,+1}} nodes; node {j} is not one"
            )));
        }
    }
    let parent_cards = vec![2; parents.len()];
    let n_u = 1usize << parents.len();
    let mut rates = vec![0.0; n_u * 4];
    for u in 0..n_u {
        let cfg = mixed_radix_decode(&parent_cards, u);
        let field: f64 = parents.iter().zip(&cfg).map(|(&j, &s)| space.label(j, s)).sum();
        for x in 0..2 {
            let spin = space.label(node, x);
            let flip = 0.5 + 0.5 * (gamma * spin * field).tanh();
            rates[(u * 2 + x) * 2 + (1 - x)] = flip;
        }
    }
    Cim::new(node, parents.to_vec(), 2, parent_cards, rates)
}

/// A CTBN: state space, graph, and one CIM per node.
#[derive(Debug, Clone, PartialEq)]
pub struct CtbnModel {
    space: StateSpace,
    graph: Graph,
    cims: Vec<Cim>,
}

impl CtbnModel {
    pub fn new(space: StateSpace, graph: Graph, cims: Vec<Cim>) -> Result<Self> {
        let n = space.n_nodes();
        if graph.n_nodes() != n || cims.len() != n {
            return Err(Error::InvalidModel(format!(
                "{n} nodes, but graph has {} and {} CIMs were given",
                graph.n_nodes(),
                cims.len()
            )));
        }
        for (i, cim) in cims.iter().enumerate() {
            if cim.node != i {
                return Err(Error::InvalidModel(format!(
                    "CIM at position {i} belongs to node {}",
                    cim.node
                )));
            }
            if cim.parents != graph.parents(i) {
                return Err(Error::InvalidModel(format!(
                    "node {i}: CIM parents {:?} differ from graph parents {:?}",
                    cim.parents,
                    graph.parents(i)
                )));
            }
            if cim.card != space.card(i) || cim.parent_cards != space.cards_of(&cim.parents) {
                return Err(Error::InvalidModel(format!(
                    "node {i}: CIM dimensions do not match the state space"
                )));
            }
        }
        Ok(Self { space, graph, cims })
    }

    /// Glauber-dynamics model on spin nodes over `graph`.
    pub fn glauber(graph: Graph, gamma: f64) -> Result<Self> {
        let space = StateSpace::binary_spins(graph.n_nodes());
        let cims = (0..graph.n_nodes())
            .map(|i| build_glauber_cim(&space, i, graph.parents(i), gamma))
            .collect::<Result<Vec<_>>>()?;
        Self::new(space, graph, cims)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn cim(&self, node: usize) -> &Cim {
        &self.cims[node]
    }

    pub fn cims(&self) -> &[Cim] {
        &self.cims
    }

    pub fn n_nodes(&self) -> usize {
        self.space.n_nodes()
    }

    /// Parent configuration index of `node` in the joint state `state`.
    pub fn parent_config(&self, node: usize, state: &[usize]) -> usize {
        let cim = &self.cims[node];
        let mut idx = 0;
        let mut stride = 1;
        for (&p, &c) in cim.parents.iter().zip(&cim.parent_cards) {
            idx += state[p] * stride;
            stride *= c;
        }
        idx
    }

    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            nodes: (0..self.n_nodes())
                .map(|i| NodeDoc {
                    id: i,
                    cardinality: self.space.card(i),
                    labels: self.space.labels(i).map(<[f64]>::to_vec),
                })
                .collect(),
            edges: self.graph.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            cims: self
                .cims
                .iter()
                .map(|c| CimDoc {
                    node: c.node,
                    parents: c.parents.clone(),
                    rates: c.to_nested(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        let n = doc.nodes.len();
        let mut cards = vec![0; n];
        let mut labels = vec![None; n];
        for nd in &doc.nodes {
            if nd.id >= n {
                return Err(Error::Format(format!("node id {} out of range", nd.id)));
            }
            cards[nd.id] = nd.cardinality;
            labels[nd.id] = nd.labels.clone();
        }
        let space = StateSpace::with_labels(cards, labels)?;
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = Graph::from_edges(n, &edges)?;
        let mut cims: Vec<Option<Cim>> = vec![None; n];
        for c in &doc.cims {
            if c.node >= n {
                return Err(Error::Format(format!("CIM for unknown node {}", c.node)));
            }
            let mut parents = c.parents.clone();
            let sorted: BTreeSet<usize> = parents.iter().copied().collect();
            if sorted.len() != parents.len() {
                return Err(Error::Format(format!("node {}: duplicate parents", c.node)));
            }
            if parents.iter().any(|&p| p >= n) {
                return Err(Error::Format(format!("node {}: parent out of range", c.node)));
            }
            let pc = space.cards_of(&parents);
            let cim = Cim::from_nested(c.node, parents.clone(), space.card(c.node), pc, &c.rates)?;
            // Re-order to the sorted parent convention if needed.
            let cim = if parents.windows(2).all(|w| w[0] < w[1]) {
                cim
            } else {
                parents.sort_unstable();
                reorder_parents(&cim, &parents, &space)?
            };
            cims[c.node] = Some(cim);
        }
        let cims = cims
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Format(format!("missing CIM for node {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(space, graph, cims)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: ModelDoc = serde_json::from_str(&text)?;
        Self::from_doc(&doc)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_doc())?)?;
        Ok(())
    }
}

fn reorder_parents(cim: &Cim, new_parents: &[usize], space: &StateSpace) -> Result<Cim> {
    let new_cards = space.cards_of(new_parents);
    let n_u: usize = new_cards.iter().product();
    let c = cim.card;
    let mut rates = vec![0.0; n_u * c * c];
    for u_new in 0..n_u {
        let cfg_new = mixed_radix_decode(&new_cards, u_new);
        let cfg_old: Vec<usize> = cim
            .parents
            .iter()
            .map(|p| cfg_new[new_parents.iter().position(|q| q == p).unwrap()])
            .collect();
        let u_old = mixed_radix_index(&cim.parent_cards, &cfg_old);
        for x in 0..c {
            for xp in 0..c {
                rates[(u_new * c + x) * c + xp] = cim.rate(u_old, x, xp);
            }
        }
    }
    Cim::new(cim.node, new_parents.to_vec(), c, new_cards, rates)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub cardinality: usize,
    #[serde(default)]
    pub labels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CimDoc {
    pub node: usize,
    pub parents: Vec<usize>,
    pub rates: Vec<Vec<Vec<f64>>>,
}

/// On-disk JSON form of a [`CtbnModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<[usize; 2]>,
    pub cims: Vec<CimDoc>,
}

/// Dense intensity matrix of the amalgamated CTMC over the product space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGenerator {
    cards: Vec<usize>,
    dim: usize,
    matrix: Vec<f64>,
}

impl JointGenerator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.matrix[from * self.dim + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.matrix[from * self.dim..(from + 1) * self.dim]
    }

    /// Row-major dense matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }

    pub fn index_of(&self, state: &[usize]) -> usize {
        mixed_radix_index(&self.cards, state)
    }

    pub fn state_of(&self, index: usize) -> Vec<usize> {
        mixed_radix_decode(&self.cards, index)
    }

    /// Stationary distribution, solving `p R = 0` with `sum p = 1`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let n = self.dim;
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(j, i)] = self.get(i, j);
            }
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let p = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Domain("generator has no unique stationary distribution".into()))?;
        Ok(p.iter().map(|v| v.max(0.0)).collect())
    }
}

/// Joint generator of `model` with the default cap.
pub fn amalgamate(model: &CtbnModel) -> Result<JointGenerator> {
    amalgamate_with_cap(model, DEFAULT_JOINT_CAP)
}

pub fn amalgamate_with_cap(model: &CtbnModel, cap: usize) -> Result<JointGenerator> {
    let space = model.space();
    let states = space.joint_size().unwrap_or(usize::MAX);
    if states > cap {
        return Err(Error::OracleTooLarge { states, cap });
    }
    let cards = space.cards().to_vec();
    let mut strides = Vec::with_capacity(cards.len());
    let mut s = 1;
    for &c in &cards {
        strides.push(s);
        s *= c;
    }
    let mut matrix = vec![0.0; states * states];
    for from in 0..states {
        let state = mixed_radix_decode(&cards, from);
        let mut exit = 0.0;
        for i in 0..cards.len() {
            let cim = model.cim(i);
            let u = model.parent_config(i, &state);
            let x = state[i];
            for xp in 0..cards[i] {
                if xp == x {
                    continue;
                }
                let r = cim.rate(u, x, xp);
                let to = from + xp * strides[i] - x * strides[i];
                matrix[from * states + to] += r;
                exit += r;
            }
        }
        matrix[from * states + from] = -exit;
    }
    Ok(JointGenerator {
        cards,
        dim: states,
        matrix,
    })
}

/// Random graph: each node's in-degree is uniform on `0..=max_in_degree` and
/// its parents are drawn uniformly without replacement.
pub fn random_graph<R: Rng + ?Sized>(n: usize, max_in_degree: usize, rng: &mut R) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Domain("graph needs at least one node".into()));
    }
    if max_in_degree > n - 1 {
        return Err(Error::Domain(format!(
            "max in-degree {max_in_degree} exceeds n - 1 = {}",
            n - 1
        )));
    }
    let mut parents = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..=max_in_degree);
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut ps: Vec<usize> = sample(rng, others.len(), k)
            .into_iter()
            .map(|idx| others[idx])
            .collect();
        ps.sort_unstable();
        parents.push(ps);
    }
    Graph::from_parent_sets(parents)
}

/// Largest absolute row sum of a generator, and whether every off-diagonal is
/// non-negative; used by validation tests.
pub fn check_generator_rows(rows: &[f64], dim: usize) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut nonneg = true;
    for i in 0..dim {
        let row = &rows[i * dim..(i + 1) * dim];
        worst = worst.max(row.iter().sum::<f64>().abs());
        nonneg &= row.iter().enumerate().all(|(j, &v)| j == i || v >= 0.0);
    }
    (worst, nonneg)
}
