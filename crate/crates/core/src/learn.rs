//! Structure learning: per-node maximisation of the mixture bound over
//! candidate parent subsets, from complete paths or, through an EM loop
//! around the variational engine, from noisy observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::StateSpace;
use crate::scoring::{
    component_stats, edge_probabilities, family_gamma_score, node_bound, node_gradient, DirichletPrior, GammaPrior,
    MixtureWeights, NodeWeights,
};
use crate::simplex::{maximize_on_simplex, FnObjective, SimplexConfig, SimplexResult};
use crate::simulation::{ObservationSet, Trajectory};
use crate::stats::{FamilyStats, SufficientStats};
use crate::variational::{EngineConfig, MeanMode, VariationalEngine};

/// Largest number of candidate parents for which every subset is enumerated.
pub const MAX_EXHAUSTIVE_CANDIDATES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchMode {
    /// Every subset of the other nodes.
    Exhaustive,
    /// Every subset of each node's parents in a prior graph.
    Restricted { parents: Vec<Vec<usize>> },
    /// Every subset of at most `k` other nodes.
    Greedy { k: usize },
}

fn combinations(items: &[usize], k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..items.len() {
            if items.len() - j < k - cur.len() {
                break;
            }
            cur.push(items[j]);
            rec(items, k, j + 1, cur, out);
            cur.pop();
        }
    }
    rec(items, k, 0, &mut Vec::with_capacity(k), out);
}

/// Candidate parent subsets of `node` in a system of `n` nodes, ordered by
/// size and then lexicographically.
pub fn enumerate_parent_sets(mode: &SearchMode, n: usize, node: usize) -> Result<Vec<Vec<usize>>> {
    if node >= n {
        return Err(Error::Domain(format!("node {node} out of range for {n} nodes")));
    }
    let others: Vec<usize> = (0..n).filter(|&j| j != node).collect();
    let (candidates, max_size) = match mode {
        SearchMode::Exhaustive => (others, n - 1),
        SearchMode::Restricted { parents } => {
            let ps = parents
                .get(node)
                .ok_or_else(|| Error::Domain(format!("prior graph has no entry for node {node}")))?;
            let mut ps = ps.clone();
            ps.sort_unstable();
            ps.dedup();
            if ps.iter().any(|&p| p == node || p >= n) {
                return Err(Error::InvalidGraph(format!(
                    "prior parents of node {node} are invalid: {ps:?}"
                )));
            }
            let len = ps.len();
            (ps, len)
        }
        SearchMode::Greedy { k } => {
            if *k > n - 1 {
                return Err(Error::Domain(format!("greedy K = {k} exceeds n - 1 = {}", n - 1)));
            }
            (others, *k)
        }
    };
    if !matches!(mode, SearchMode::Greedy { .. }) && candidates.len() > MAX_EXHAUSTIVE_CANDIDATES {
        return Err(Error::SearchSpaceTooLarge {
            candidates: 1u128 << candidates.len(),
        });
    }
    let mut out = Vec::new();
    for size in 0..=max_size {
        combinations(&candidates, size, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// All mass on the largest candidate subset (uniform over them when
    /// there are several, as under greedy search).
    Heuristic,
    /// Independent U(0,1) draws per subset, normalised.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub mode: SearchMode,
    pub gamma: GammaPrior,
    pub dirichlet: DirichletPrior,
    pub optimizer: SimplexConfig,
    pub engine: EngineConfig,
    /// Relative change of the objective that ends the EM loop.
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub init: InitMode,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Exhaustive,
            gamma: GammaPrior::default(),
            dirichlet: DirichletPrior::default(),
            optimizer: SimplexConfig::default(),
            engine: EngineConfig::default(),
            em_tol: 1e-4,
            em_max_iter: 50,
            init: InitMode::Heuristic,
        }
    }
}

impl LearnConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub em_iterations: usize,
    pub converged: bool,
    /// EM iteration whose weights are returned.
    pub best_iteration: usize,
    /// E-steps that hit the sweep cap.
    pub engine_unconverged: usize,
    /// Nodes whose last M-step had no converged restart.
    pub optimizer_unconverged: Vec<usize>,
    /// Some weight fell below the Dirichlet floor.
    pub clamped: bool,
    /// Fewer observed transitions than nodes.
    pub low_data: bool,
    pub mean_mode: Option<MeanMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnResult {
    pub pi: MixtureWeights,
    /// `edge_probs[i][j]` = probability of `i -> j`.
    pub edge_probs: Vec<Vec<f64>>,
    /// Edges of the per-node most probable subsets.
    pub map_graph: Vec<(usize, usize)>,
    /// Objective per EM iteration (a single entry for complete data).
    pub trace: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetWeight {
    pub subset: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnResultDoc {
    pub pi: Vec<Vec<SubsetWeight>>,
    pub edge_probs: Vec<Vec<f64>>,
    pub map_graph: Vec<(usize, usize)>,
    pub trace: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl LearnResultDoc {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl LearnResult {
    fn new(pi: MixtureWeights, trace: Vec<f64>, diagnostics: Diagnostics) -> Self {
        let edge_probs = edge_probabilities(&pi);
        let map_graph = map_edges(&pi);
        Self {
            pi,
            edge_probs,
            map_graph,
            trace,
            diagnostics,
        }
    }

    pub fn to_doc(&self) -> LearnResultDoc {
        LearnResultDoc {
            pi: self
                .pi
                .nodes
                .iter()
                .map(|nw| {
                    nw.subsets
                        .iter()
                        .zip(&nw.weights)
                        .map(|(s, &w)| SubsetWeight {
                            subset: s.clone(),
                            weight: w,
                        })
                        .collect()
                })
                .collect(),
            edge_probs: self.edge_probs.clone(),
            map_graph: self.map_graph.clone(),
            trace: self.trace.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }
}

/// Edges `p -> i` for every parent `p` of node `i`'s most probable subset.
pub fn map_edges(pi: &MixtureWeights) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, nw) in pi.nodes.iter().enumerate() {
        for &p in &nw.subsets[nw.argmax()] {
            edges.push((p, i));
        }
    }
    edges.sort_unstable();
    edges
}

fn candidate_sets(mode: &SearchMode, n: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    (0..n).map(|i| enumerate_parent_sets(mode, n, i)).collect()
}

fn union(subsets: &[Vec<usize>]) -> Vec<usize> {
    let mut u: Vec<usize> = subsets.iter().flatten().copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

fn node_seeds<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// Maximises one node's bound over its simplex.
pub fn maximize_node(
    comps: &[FamilyStats],
    alpha: f64,
    beta: f64,
    c: f64,
    cfg: &SimplexConfig,
    seed: u64,
) -> Result<SimplexResult> {
    let obj = FnObjective {
        f: |p: &[f64]| node_bound(comps, p, alpha, beta, c).value(),
        g: |p: &[f64]| node_gradient(comps, p, alpha, beta, c).0,
    };
    maximize_on_simplex(&obj, comps.len(), cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// M-step over all nodes, in parallel; per-node RNG streams are seeded in
/// node order from `rng`.
fn m_step<R: Rng + ?Sized>(
    comps: &[Vec<FamilyStats>],
    subsets: &[Vec<Vec<usize>>],
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<(MixtureWeights, Vec<SimplexResult>)> {
    let seeds = node_seeds(comps.len(), rng);
    let results: Vec<SimplexResult> = comps
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let (a, b) = cfg.gamma.for_node(i);
            maximize_node(c, a, b, cfg.dirichlet.for_node(i), &cfg.optimizer, seeds[i])
        })
        .collect::<Result<_>>()?;
    let pi = MixtureWeights {
        nodes: results
            .iter()
            .zip(subsets)
            .map(|(r, s)| NodeWeights {
                subsets: s.clone(),
                weights: r.pi.clone(),
            })
            .collect(),
    };
    Ok((pi, results))
}

fn bound_value(comps: &[Vec<FamilyStats>], pi: &MixtureWeights, cfg: &LearnConfig) -> (f64, bool) {
    let mut v = 0.0;
    let mut clamped = false;
    for (i, (c, nw)) in comps.iter().zip(&pi.nodes).enumerate() {
        let (a, b) = cfg.gamma.for_node(i);
        let nb = node_bound(c, &nw.weights, a, b, cfg.dirichlet.for_node(i));
        v += nb.value();
        clamped |= nb.clamped;
    }
    (v, clamped)
}

/// Complete-data statistics with every node's context covering all of its
/// candidate subsets.
pub fn candidate_statistics(space: &StateSpace, trajs: &[Trajectory], mode: &SearchMode) -> Result<SufficientStats> {
    let subsets = candidate_sets(mode, space.n_nodes())?;
    let contexts: Vec<Vec<usize>> = subsets.iter().map(|s| union(s)).collect();
    for (i, c) in contexts.iter().enumerate() {
        if space.n_configs(c).is_none_or(|n| n > 1 << 24) {
            return Err(Error::Config(format!(
                "parent context of node {i} is too large to tabulate"
            )));
        }
    }
    let mut stats = SufficientStats::zeros_with_contexts(space, &contexts);
    for t in trajs {
        stats.accumulate(t, space)?;
    }
    Ok(stats)
}

/// Complete-data structure learning from statistics whose per-node contexts
/// contain every candidate subset.
pub fn learn_complete_stats<R: Rng + ?Sized>(
    stats: &SufficientStats,
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<LearnResult> {
    let n = stats.n_nodes();
    if n == 0 {
        return Err(Error::Domain("no nodes to learn".into()));
    }
    cfg.gamma.validate()?;
    cfg.dirichlet.validate()?;
    let subsets = candidate_sets(&cfg.mode, n)?;
    let comps: Vec<Vec<FamilyStats>> = subsets
        .iter()
        .enumerate()
        .map(|(i, s)| component_stats(stats.family(i), s))
        .collect::<Result<_>>()?;
    let (pi, results) = m_step(&comps, &subsets, cfg, rng)?;
    let (value, clamped) = bound_value(&comps, &pi, cfg);
    let transitions: f64 = stats.families.iter().map(FamilyStats::total_transitions).sum();
    let diagnostics = Diagnostics {
        em_iterations: 0,
        converged: results.iter().all(|r| !r.not_converged),
        best_iteration: 0,
        engine_unconverged: 0,
        optimizer_unconverged: unconverged(&results),
        clamped,
        low_data: transitions < n as f64,
        mean_mode: None,
    };
    Ok(LearnResult::new(pi, vec![value], diagnostics))
}

fn unconverged(results: &[SimplexResult]) -> Vec<usize> {
    results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.not_converged)
        .map(|(i, _)| i)
        .collect()
}

/// Complete-data structure learning from sampled paths.
pub fn learn_complete<R: Rng + ?Sized>(
    space: &StateSpace,
    trajs: &[Trajectory],
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<LearnResult> {
    if trajs.is_empty() {
        return Err(Error::Domain("no trajectories to learn from".into()));
    }
    let stats = candidate_statistics(space, trajs, &cfg.mode)?;
    learn_complete_stats(&stats, cfg, rng)
}

/// Log marginal likelihood of one family including the prior normalisation
/// `-ln Gamma(alpha) + alpha ln beta` per rate, so families with different
/// parent sets are comparable.
pub fn normalized_family_score(f: &FamilyStats, alpha: f64, beta: f64) -> f64 {
    let entries = (f.n_configs() * f.card * (f.card - 1)) as f64;
    family_gamma_score(f, 1.0, alpha, beta) + entries * (alpha * beta.ln() - ln_gamma(alpha))
}

/// Baseline: per node, the posterior over candidate subsets under exact
/// marginal-likelihood scores and a uniform structure prior.
pub fn learn_exact_score(stats: &SufficientStats, mode: &SearchMode, gprior: &GammaPrior) -> Result<LearnResult> {
    let n = stats.n_nodes();
    let subsets = candidate_sets(mode, n)?;
    let mut nodes = Vec::with_capacity(n);
    let mut total = 0.0;
    for (i, s) in subsets.iter().enumerate() {
        let (a, b) = gprior.for_node(i);
        let scores: Vec<f64> = component_stats(stats.family(i), s)?
            .iter()
            .map(|f| normalized_family_score(f, a, b))
            .collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|v| (v - best).exp()).collect();
        let z: f64 = w.iter().sum();
        total += best + z.ln();
        nodes.push(NodeWeights {
            subsets: s.clone(),
            weights: w.iter().map(|v| v / z).collect(),
        });
    }
    let transitions: f64 = stats.families.iter().map(FamilyStats::total_transitions).sum();
    let diagnostics = Diagnostics {
        em_iterations: 0,
        converged: true,
        best_iteration: 0,
        engine_unconverged: 0,
        optimizer_unconverged: Vec::new(),
        clamped: false,
        low_data: transitions < n as f64,
        mean_mode: None,
    };
    Ok(LearnResult::new(MixtureWeights { nodes }, vec![total], diagnostics))
}

/// Initial mixture weights for the EM loop.
pub fn initial_weights<R: Rng + ?Sized>(subsets: &[Vec<Vec<usize>>], init: InitMode, rng: &mut R) -> MixtureWeights {
    let nodes = subsets
        .iter()
        .map(|s| match init {
            InitMode::Heuristic => {
                let top = s.iter().map(Vec::len).max().unwrap_or(0);
                let count = s.iter().filter(|m| m.len() == top).count() as f64;
                NodeWeights {
                    subsets: s.clone(),
                    weights: s
                        .iter()
                        .map(|m| if m.len() == top { 1.0 / count } else { 0.0 })
                        .collect(),
                }
            }
            InitMode::Random => {
                let mut w: Vec<f64> = (0..s.len()).map(|_| rng.random::<f64>().max(1e-300)).collect();
                let z: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= z);
                NodeWeights {
                    subsets: s.clone(),
                    weights: w,
                }
            }
        })
        .collect();
    MixtureWeights { nodes }
}

/// Structure learning from noisy observations: alternate variational
/// E-steps and per-node M-steps until the objective settles, returning the
/// weights with the best objective seen.
pub fn learn_incomplete<R: Rng + ?Sized>(
    space: &StateSpace,
    obs: &[ObservationSet],
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<LearnResult> {
    if obs.is_empty() {
        return Err(Error::Domain("no observation sets to learn from".into()));
    }
    if obs.iter().any(|o| o.values.iter().any(|v| v.len() != space.n_nodes())) {
        return Err(Error::Format("observation rows do not match the node count".into()));
    }
    if !(cfg.em_tol > 0.0) || cfg.em_max_iter == 0 {
        return Err(Error::Config("EM needs a positive tolerance and iteration cap".into()));
    }
    let n = space.n_nodes();
    let subsets = candidate_sets(&cfg.mode, n)?;
    let mut engine_cfg = cfg.engine.clone();
    if matches!(cfg.mode, SearchMode::Greedy { .. }) {
        engine_cfg.mode = MeanMode::GreedyArithmetic;
    }
    let pi0 = initial_weights(&subsets, cfg.init, rng);
    let mut engine = VariationalEngine::new(
        space.clone(),
        obs.to_vec(),
        pi0.clone(),
        cfg.gamma.clone(),
        cfg.dirichlet.clone(),
        engine_cfg.clone(),
    )?;
    let mut trace = Vec::new();
    let mut best = (f64::NEG_INFINITY, pi0, 0usize);
    let mut converged = false;
    let mut engine_unconverged = 0;
    let mut last_results: Vec<SimplexResult> = Vec::new();
    let mut clamped = false;
    let mut iterations = 0;
    for it in 0..cfg.em_max_iter {
        iterations = it + 1;
        let report = engine.run()?;
        if !report.converged {
            engine_unconverged += 1;
        }
        let f = report.objective.value;
        trace.push(f);
        if f > best.0 {
            best = (f, engine.weights().clone(), it);
            clamped = report.objective.clamped;
        }
        if it > 0 {
            let prev = trace[it - 1];
            if (f - prev).abs() <= cfg.em_tol * f.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        if it + 1 == cfg.em_max_iter {
            break;
        }
        let comps = engine.current_stats().nodes.clone();
        let (pi, results) = m_step(&comps, &subsets, cfg, rng)?;
        last_results = results;
        engine.set_weights(pi)?;
    }
    let diagnostics = Diagnostics {
        em_iterations: iterations,
        converged,
        best_iteration: best.2,
        engine_unconverged,
        optimizer_unconverged: unconverged(&last_results),
        clamped,
        low_data: obs.iter().map(ObservationSet::len).sum::<usize>() < 2,
        mean_mode: Some(engine_cfg.mode),
    };
    Ok(LearnResult::new(best.1, trace, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CtbnModel, Graph};
    use crate::simulation::{gillespie_sample, InitialState, StopRule};

    #[test]
    fn subset_counts() {
        assert_eq!(enumerate_parent_sets(&SearchMode::Exhaustive, 5, 0).unwrap().len(), 16);
        assert_eq!(
            enumerate_parent_sets(&SearchMode::Greedy { k: 2 }, 5, 0).unwrap().len(),
            11
        );
        assert_eq!(
            enumerate_parent_sets(&SearchMode::Greedy { k: 2 }, 15, 3)
                .unwrap()
                .len(),
            106
        );
        let r = SearchMode::Restricted {
            parents: vec![vec![], vec![0, 2], vec![]],
        };
        assert_eq!(
            enumerate_parent_sets(&r, 3, 1).unwrap(),
            vec![vec![], vec![0], vec![2], vec![0, 2]]
        );
    }

    #[test]
    fn order_is_size_then_lexicographic() {
        let s = enumerate_parent_sets(&SearchMode::Exhaustive, 4, 1).unwrap();
        assert_eq!(
            s,
            vec![
                vec![],
                vec![0],
                vec![2],
                vec![3],
                vec![0, 2],
                vec![0, 3],
                vec![2, 3],
                vec![0, 2, 3]
            ]
        );
    }

    #[test]
    fn oversized_searches_are_rejected() {
        assert!(matches!(
            enumerate_parent_sets(&SearchMode::Exhaustive, 22, 0),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
        assert!(enumerate_parent_sets(&SearchMode::Greedy { k: 2 }, 40, 0).is_ok());
        assert!(enumerate_parent_sets(&SearchMode::Greedy { k: 5 }, 5, 0).is_err());
    }

    #[test]
    fn heuristic_init_puts_mass_on_largest_subsets() {
        let s = vec![enumerate_parent_sets(&SearchMode::Greedy { k: 1 }, 3, 0).unwrap()];
        let pi = initial_weights(&s, InitMode::Heuristic, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(pi.nodes[0].weights, vec![0.0, 0.5, 0.5]);
        let s = vec![enumerate_parent_sets(&SearchMode::Exhaustive, 3, 0).unwrap()];
        let pi = initial_weights(&s, InitMode::Heuristic, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(pi.nodes[0].weights, vec![0.0, 0.0, 0.0, 1.0]);
    }

    fn fast() -> LearnConfig {
        LearnConfig {
            optimizer: SimplexConfig {
                restarts: 10,
                ..SimplexConfig::default()
            },
            ..LearnConfig::default()
        }
    }

    #[test]
    fn zero_transition_path_is_low_data() {
        let space = StateSpace::binary_spins(3);
        let traj = Trajectory {
            initial: vec![0, 1, 0],
            events: vec![],
            t_end: 1.0,
            absorbed: false,
        };
        let r = learn_complete(&space, &[traj], &fast(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.diagnostics.low_data);
        for nw in &r.pi.nodes {
            assert!((nw.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_strong_single_parent() {
        let model = CtbnModel::glauber(Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trajs: Vec<Trajectory> = (0..200)
            .map(|_| gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap())
            .collect();
        let r = learn_complete(model.space(), &trajs, &fast(), &mut rng).unwrap();
        assert_eq!(r.map_graph, vec![(0, 1), (1, 2)]);
        let e = learn_exact_score(
            &candidate_statistics(model.space(), &trajs, &SearchMode::Exhaustive).unwrap(),
            &SearchMode::Exhaustive,
            &GammaPrior::default(),
        )
        .unwrap();
        assert_eq!(e.map_graph, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn restricted_full_graph_equals_exhaustive() {
        let model = CtbnModel::glauber(Graph::from_edges(3, &[(0, 2)]).unwrap(), 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trajs: Vec<Trajectory> = (0..20)
            .map(|_| gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap())
            .collect();
        let full = SearchMode::Restricted {
            parents: (0..3).map(|i| (0..3).filter(|&j| j != i).collect()).collect(),
        };
        let a = learn_complete(model.space(), &trajs, &fast(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cfg = LearnConfig { mode: full, ..fast() };
        let b = learn_complete(model.space(), &trajs, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_observation_is_prior_dominated() {
        let space = StateSpace::binary_spins(2);
        let obs = ObservationSet::new(
            vec![0.5],
            vec![vec![1.0, -1.0]],
            1.0,
            crate::simulation::NoiseModel::Gaussian { variance: 0.2 },
        )
        .unwrap();
        let r = learn_incomplete(&space, &[obs], &fast(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r.trace.iter().all(|v| v.is_finite()));
        assert!(r.diagnostics.low_data);
        for nw in &r.pi.nodes {
            assert!((nw.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_subset_family_stays_degenerate() {
        let space = StateSpace::binary_spins(2);
        let obs = ObservationSet::new(
            vec![0.2, 0.9],
            vec![vec![1.0, -1.0], vec![-1.0, -1.0]],
            1.0,
            crate::simulation::NoiseModel::Gaussian { variance: 0.2 },
        )
        .unwrap();
        let cfg = LearnConfig {
            mode: SearchMode::Restricted {
                parents: vec![vec![], vec![]],
            },
            ..fast()
        };
        let r = learn_incomplete(&space, &[obs], &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r.pi.nodes.iter().all(|nw| nw.weights == vec![1.0]));
        assert!(r.diagnostics.converged);
    }
}
