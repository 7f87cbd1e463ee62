//! Seeded synthetic experiments: draw a graph, simulate Glauber dynamics,
//! optionally observe with noise, learn and score against the truth.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{hamming_distance, roc_pr, Spread};
use crate::learn::{
    candidate_statistics, learn_complete_stats, learn_exact_score, learn_incomplete, InitMode, LearnConfig,
    LearnResult, SearchMode,
};
use crate::model::{random_graph, CtbnModel, Graph};
use crate::scoring::{component_stats, node_bound, GammaPrior};
use crate::simulation::{gillespie_sample, observe, InitialState, NoiseModel, ObservationSet, StopRule, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    /// Random graph with in-degree at most `max_degree`, Glauber rates.
    Random { n: usize, max_degree: usize },
    /// Fixed model read from a JSON model file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    Complete,
    Incomplete { n_obs: usize, noise: NoiseModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Gradient learning of mixture weights.
    Mixture { search: SearchMode, init: InitMode },
    /// Posterior over subsets from exact marginal likelihoods (complete data).
    ExactScore { search: SearchMode },
}

fn search_label(s: &SearchMode) -> String {
    match s {
        SearchMode::Exhaustive => "exhaustive".into(),
        SearchMode::Restricted { .. } => "restricted".into(),
        SearchMode::Greedy { k } => format!("greedy_k{k}"),
    }
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Mixture { search, init } => {
                let base = format!("mixture_{}", search_label(search));
                match init {
                    InitMode::Heuristic => base,
                    InitMode::Random => base + "_random_init",
                }
            }
            Method::ExactScore { search } => format!("exact_score_{}", search_label(search)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Learn with every method at every trajectory count (nested subsamples).
    Recovery,
    /// Profile of node 0's bound over the weight of its empty parent set
    /// in a two-node system, for several Dirichlet concentrations.
    PriorSweep { c_values: Vec<f64>, grid_points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub graph: GraphSpec,
    pub glauber_gamma: f64,
    /// Trajectory counts; smaller counts use prefixes of the largest sample.
    pub trajectory_counts: Vec<usize>,
    pub transitions: usize,
    pub data: DataKind,
    pub methods: Vec<Method>,
    /// Priors, optimiser, engine and EM settings; search mode and
    /// initialisation come from each method.
    pub learn: LearnConfig,
    pub replicates: usize,
    pub protocol: Protocol,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            graph: GraphSpec::Random { n: 5, max_degree: 2 },
            glauber_gamma: 0.6,
            trajectory_counts: vec![10, 20, 50, 100],
            transitions: 10,
            data: DataKind::Complete,
            methods: vec![Method::Mixture {
                search: SearchMode::Exhaustive,
                init: InitMode::Heuristic,
            }],
            learn: LearnConfig::default(),
            replicates: 30,
            protocol: Protocol::Recovery,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicate count must be at least 1".into()));
        }
        if self.trajectory_counts.is_empty() || self.trajectory_counts.contains(&0) {
            return Err(Error::Config("trajectory counts must be non-empty and positive".into()));
        }
        if self.transitions == 0 {
            return Err(Error::Config("transitions per trajectory must be positive".into()));
        }
        if self.methods.is_empty() && self.protocol == Protocol::Recovery {
            return Err(Error::Config("no learning methods configured".into()));
        }
        if let GraphSpec::File { path } = &self.graph {
            if !path.exists() {
                return Err(Error::Config(format!("model file {} does not exist", path.display())));
            }
        }
        if let DataKind::Incomplete { n_obs, .. } = &self.data {
            if *n_obs == 0 {
                return Err(Error::Config("number of observations must be positive".into()));
            }
        }
        for m in &self.methods {
            if matches!(m, Method::ExactScore { .. }) && self.data != DataKind::Complete {
                return Err(Error::Config("exact scoring needs complete data".into()));
            }
        }
        if let Protocol::PriorSweep { c_values, grid_points } = &self.protocol {
            if c_values.is_empty() || *grid_points < 2 {
                return Err(Error::Config(
                    "prior sweep needs c values and at least two grid points".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub replicate: usize,
    pub n_traj: usize,
    pub mode: String,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    /// MAP graph against the true graph.
    pub hamming: Option<usize>,
    /// MAP graph against the same method's graph at the largest count.
    pub hamming_ref: Option<usize>,
    pub runtime_s: f64,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub n_traj: usize,
    pub mode: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub auroc: Option<Spread>,
    pub aupr: Option<Spread>,
    pub hamming: Option<Spread>,
    pub hamming_ref: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub replicate: usize,
    pub c: f64,
    pub n_traj: usize,
    /// Weight of node 0's empty parent set.
    pub pi_empty: f64,
    pub f: f64,
    /// `f` rescaled to `[0, 1]` over the grid.
    pub f_normalized: f64,
}

/// Mean normalised profile over replicates for one `(c, n_traj)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepProfile {
    pub c: f64,
    pub n_traj: usize,
    pub pi_empty: Vec<f64>,
    pub mean_f_normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub replicate: usize,
    pub simulate_s: f64,
    pub learn_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryGroup>,
    pub sweep: Vec<SweepRow>,
    pub profiles: Vec<SweepProfile>,
    pub failed_replicates: Vec<usize>,
    pub phases: Vec<PhaseTimes>,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    groups: &'a [SummaryGroup],
    profiles: &'a [SweepProfile],
    failed_replicates: &'a [usize],
}

#[derive(Serialize)]
struct MetadataDoc<'a> {
    version: &'a str,
    started_unix_s: f64,
    finished_unix_s: f64,
    wall_s: f64,
    phases: &'a [PhaseTimes],
    config: &'a ExperimentConfig,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn model_for(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<CtbnModel> {
    match &cfg.graph {
        GraphSpec::Random { n, max_degree } => {
            let g = random_graph(*n, *max_degree, rng)?;
            CtbnModel::glauber(g, cfg.glauber_gamma)
        }
        GraphSpec::File { path } => CtbnModel::load_json(path),
    }
}

fn simulate(model: &CtbnModel, count: usize, transitions: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|_| gillespie_sample(model, StopRule::Transitions(transitions), &InitialState::Uniform, rng))
        .collect()
}

fn result_flags(r: &LearnResult) -> Vec<String> {
    let d = &r.diagnostics;
    let mut f = Vec::new();
    if d.em_iterations > 0 && !d.converged {
        f.push("em_not_converged".to_string());
    }
    if d.engine_unconverged > 0 {
        f.push(format!("engine_unconverged={}", d.engine_unconverged));
    }
    if !d.optimizer_unconverged.is_empty() {
        f.push("optimizer_unconverged".into());
    }
    if d.clamped {
        f.push("clamped".into());
    }
    if d.low_data {
        f.push("low_data".into());
    }
    f
}

struct Learned {
    row: ResultRow,
    map: Option<Graph>,
}

fn learn_one(
    cfg: &ExperimentConfig,
    method: &Method,
    model: &CtbnModel,
    trajs: &[Trajectory],
    obs: &[ObservationSet],
    seed: u64,
) -> Result<LearnResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        Method::Mixture { search, init } => {
            let lc = LearnConfig {
                mode: search.clone(),
                init: *init,
                ..cfg.learn.clone()
            };
            match cfg.data {
                DataKind::Complete => {
                    let stats = candidate_statistics(model.space(), trajs, search)?;
                    learn_complete_stats(&stats, &lc, &mut rng)
                }
                DataKind::Incomplete { .. } => learn_incomplete(model.space(), obs, &lc, &mut rng),
            }
        }
        Method::ExactScore { search } => {
            let stats = candidate_statistics(model.space(), trajs, search)?;
            learn_exact_score(&stats, search, &cfg.learn.gamma)
        }
    }
}

fn run_replicate(cfg: &ExperimentConfig, r: usize) -> (Vec<ResultRow>, PhaseTimes, bool) {
    let mut rows = Vec::new();
    let mut phases = PhaseTimes {
        replicate: r,
        simulate_s: 0.0,
        learn_s: 0.0,
    };
    let mut rng = replicate_rng(cfg.seed, r);
    let t0 = Instant::now();
    let max_n = *cfg.trajectory_counts.iter().max().unwrap();
    let setup = (|| -> Result<(CtbnModel, Vec<Trajectory>, Vec<ObservationSet>)> {
        let model = model_for(cfg, &mut rng)?;
        let trajs = simulate(&model, max_n, cfg.transitions, &mut rng)?;
        let obs = match &cfg.data {
            DataKind::Complete => Vec::new(),
            DataKind::Incomplete { n_obs, noise } => trajs
                .iter()
                .map(|t| observe(t, model.space(), *n_obs, noise, &mut rng))
                .collect::<Result<_>>()?,
        };
        Ok((model, trajs, obs))
    })();
    phases.simulate_s = t0.elapsed().as_secs_f64();
    let (model, trajs, obs) = match setup {
        Ok(v) => v,
        Err(e) => {
            for &n in &cfg.trajectory_counts {
                for m in &cfg.methods {
                    rows.push(ResultRow {
                        replicate: r,
                        n_traj: n,
                        mode: m.label(),
                        auroc: None,
                        aupr: None,
                        hamming: None,
                        hamming_ref: None,
                        runtime_s: 0.0,
                        flags: format!("error: {e}"),
                    });
                }
            }
            return (rows, phases, true);
        }
    };
    let truth = model.graph().clone();
    let mut failed = false;
    let mut learned: Vec<Vec<Learned>> = Vec::new();
    for &n in &cfg.trajectory_counts {
        let mut per_method = Vec::new();
        for m in &cfg.methods {
            let seed: u64 = rng.random();
            let t = Instant::now();
            let res = learn_one(cfg, m, &model, &trajs[..n], &obs[..obs.len().min(n)], seed);
            let runtime_s = t.elapsed().as_secs_f64();
            phases.learn_s += runtime_s;
            let mut row = ResultRow {
                replicate: r,
                n_traj: n,
                mode: m.label(),
                auroc: None,
                aupr: None,
                hamming: None,
                hamming_ref: None,
                runtime_s,
                flags: String::new(),
            };
            let mut map = None;
            match res {
                Ok(lr) => {
                    let mut flags = result_flags(&lr);
                    match roc_pr(&lr.edge_probs, &truth) {
                        Ok(rp) => {
                            row.auroc = Some(rp.auroc);
                            row.aupr = Some(rp.aupr);
                        }
                        Err(e) => flags.push(format!("metric_undefined: {e}")),
                    }
                    let g = Graph::from_edges(truth.n_nodes(), &lr.map_graph).expect("learned edges are valid");
                    row.hamming = hamming_distance(&g, &truth).ok();
                    map = Some(g);
                    row.flags = flags.join(";");
                }
                Err(e) => {
                    failed = true;
                    row.flags = format!("error: {e}");
                }
            }
            per_method.push(Learned { row, map });
        }
        learned.push(per_method);
    }
    let largest = cfg
        .trajectory_counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &n)| n)
        .map(|(k, _)| k)
        .unwrap();
    for k in 0..learned.len() {
        for j in 0..cfg.methods.len() {
            let reference = learned[largest][j].map.clone();
            let l = &mut learned[k][j];
            if let (Some(a), Some(b)) = (&l.map, &reference) {
                l.row.hamming_ref = hamming_distance(a, b).ok();
            }
        }
    }
    rows.extend(learned.into_iter().flatten().map(|l| l.row));
    (rows, phases, failed)
}

fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<SummaryGroup> {
    let mut out = Vec::new();
    for &n in &cfg.trajectory_counts {
        for m in &cfg.methods {
            let label = m.label();
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.n_traj == n && r.mode == label).collect();
            let auroc: Vec<f64> = group.iter().filter_map(|r| r.auroc).collect();
            let aupr: Vec<f64> = group.iter().filter_map(|r| r.aupr).collect();
            let ham: Vec<f64> = group.iter().filter_map(|r| r.hamming.map(|h| h as f64)).collect();
            let href: Vec<f64> = group.iter().filter_map(|r| r.hamming_ref.map(|h| h as f64)).collect();
            out.push(SummaryGroup {
                n_traj: n,
                mode: label,
                n_ok: auroc.len(),
                n_failed: group.len() - auroc.len(),
                auroc: Spread::of(&auroc),
                aupr: Spread::of(&aupr),
                hamming: Spread::of(&ham),
                hamming_ref: Spread::of(&href),
            });
        }
    }
    out
}

/// Bound of node 0 with candidate subsets `{}` and `{1}` on the grid
/// `pi_empty = k / (points - 1)`.
pub fn prior_profile(
    stats: &crate::stats::SufficientStats,
    gprior: &GammaPrior,
    c: f64,
    points: usize,
) -> Result<Vec<(f64, f64)>> {
    let comps = component_stats(stats.family(0), &[vec![], vec![1]])?;
    let (a, b) = gprior.for_node(0);
    Ok((0..points)
        .map(|k| {
            let p = k as f64 / (points - 1) as f64;
            (p, node_bound(&comps, &[p, 1.0 - p], a, b, c).value())
        })
        .collect())
}

fn run_sweep(cfg: &ExperimentConfig, c_values: &[f64], points: usize) -> Result<(Vec<SweepRow>, Vec<SweepProfile>)> {
    let graph = Graph::from_edges(2, &[(0, 1), (1, 0)])?;
    let model = CtbnModel::glauber(graph, cfg.glauber_gamma)?;
    let max_n = *cfg.trajectory_counts.iter().max().unwrap();
    let per_rep: Vec<Vec<SweepRow>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<SweepRow>> {
            let mut rng = replicate_rng(cfg.seed, r);
            let trajs = simulate(&model, max_n, cfg.transitions, &mut rng)?;
            let mut rows = Vec::new();
            for &n in &cfg.trajectory_counts {
                let stats = candidate_statistics(model.space(), &trajs[..n], &SearchMode::Exhaustive)?;
                for &c in c_values {
                    let prof = prior_profile(&stats, &cfg.learn.gamma, c, points)?;
                    let lo = prof.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                    let hi = prof.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                    for (p, f) in prof {
                        rows.push(SweepRow {
                            replicate: r,
                            c,
                            n_traj: n,
                            pi_empty: p,
                            f,
                            f_normalized: if hi > lo { (f - lo) / (hi - lo) } else { 0.0 },
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = per_rep.into_iter().flatten().collect();
    let mut profiles = Vec::new();
    for &c in c_values {
        for &n in &cfg.trajectory_counts {
            let grid: Vec<f64> = (0..points).map(|k| k as f64 / (points - 1) as f64).collect();
            let mean = grid
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|s| s.c == c && s.n_traj == n)
                        .skip(k)
                        .step_by(points)
                        .map(|s| s.f_normalized)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect();
            profiles.push(SweepProfile {
                c,
                n_traj: n,
                pi_empty: grid,
                mean_f_normalized: mean,
            });
        }
    }
    Ok((rows, profiles))
}

/// Runs every replicate (in parallel) and, when an output directory is
/// configured, writes `results.csv`, `summary.json` and `metadata.json`
/// (plus `prior_sweep.csv` for the sweep protocol). Only `metadata.json`
/// and the `runtime_s` column depend on wall-clock time.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = unix_now();
    let clock = Instant::now();
    let report = match &cfg.protocol {
        Protocol::Recovery => {
            let out: Vec<(Vec<ResultRow>, PhaseTimes, bool)> = (0..cfg.replicates)
                .into_par_iter()
                .map(|r| run_replicate(cfg, r))
                .collect();
            let mut rows = Vec::new();
            let mut phases = Vec::new();
            let mut failed = Vec::new();
            for (r, (rs, ph, f)) in out.into_iter().enumerate() {
                rows.extend(rs);
                phases.push(ph);
                if f {
                    failed.push(r);
                }
            }
            MetricsReport {
                summary: summarize(cfg, &rows),
                rows,
                sweep: Vec::new(),
                profiles: Vec::new(),
                failed_replicates: failed,
                phases,
            }
        }
        Protocol::PriorSweep { c_values, grid_points } => {
            let (sweep, profiles) = run_sweep(cfg, c_values, *grid_points)?;
            MetricsReport {
                rows: Vec::new(),
                summary: Vec::new(),
                sweep,
                profiles,
                failed_replicates: Vec::new(),
                phases: Vec::new(),
            }
        }
    };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        write_report(dir, cfg, &report, started, clock.elapsed().as_secs_f64())?;
    }
    Ok(report)
}

fn write_report(dir: &Path, cfg: &ExperimentConfig, report: &MetricsReport, started: f64, wall_s: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    if report.rows.is_empty() {
        w.write_record([
            "replicate",
            "n_traj",
            "mode",
            "auroc",
            "aupr",
            "hamming",
            "hamming_ref",
            "runtime_s",
            "flags",
        ])?;
    }
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if !report.sweep.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("prior_sweep.csv"))?;
        for r in &report.sweep {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let summary = SummaryDoc {
        groups: &report.summary,
        profiles: &report.profiles,
        failed_replicates: &report.failed_replicates,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let meta = MetadataDoc {
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        wall_s,
        phases: &report.phases,
        config: cfg,
    };
    fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
