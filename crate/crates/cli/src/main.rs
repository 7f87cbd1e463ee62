use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctbn::experiment::{run_experiment, ExperimentConfig, GraphSpec};
use ctbn::irma::estimate_basal;
use ctbn::learn::{learn_complete, learn_incomplete, InitMode, LearnConfig, LearnResultDoc, SearchMode};
use ctbn::model::{random_graph, CtbnModel, Graph, StateSpace};
use ctbn::scoring::{complete_log_likelihood, exact_marginal_score};
use ctbn::simulation::{
    gillespie_sample, observe, read_trajectories_jsonl, write_trajectories_jsonl, InitialState, NoiseModel,
    ObservationSet, StopRule,
};
use ctbn::stats::count_statistics_many;
use ctbn::{eval, seeded_rng, Error, Result};

#[derive(Parser)]
#[command(
    name = "ctbn",
    version,
    about = "Structure learning for continuous-time Bayesian networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample trajectories (and optionally noisy observations) from a model.
    Simulate(SimulateArgs),
    /// Learn mixture weights from complete trajectories.
    LearnComplete(LearnCompleteArgs),
    /// Learn mixture weights from noisy observation files.
    LearnIncomplete(LearnIncompleteArgs),
    /// Structure score and log-likelihood of a model on complete trajectories.
    Score(ScoreArgs),
    /// Compare learned edge probabilities with a true graph.
    Eval(EvalArgs),
    /// Run a seeded synthetic experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// Model JSON; a random Glauber model is drawn when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    max_degree: usize,
    #[arg(long, default_value_t = 0.6)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    trajectories: usize,
    #[arg(long, default_value_t = 10)]
    transitions: usize,
    /// Stop at this time instead of after a number of transitions.
    #[arg(long)]
    horizon: Option<f64>,
    /// Trajectory output (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Where to write the generating model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Observations per trajectory; writes `obs_<k>.csv` into `--obs-dir`.
    #[arg(long, requires = "obs_dir")]
    observe: Option<usize>,
    #[arg(long)]
    obs_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    variance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Search {
    Exhaustive,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Heuristic,
    Random,
}

#[derive(Args)]
struct LearnFlags {
    #[arg(long)]
    seed: u64,
    /// Learning configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    search: Option<Search>,
    /// Maximum parent-set size for greedy search.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<Init>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Dirichlet concentration.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Model JSON whose state space is used; binary spins otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnCompleteArgs {
    #[command(flatten)]
    flags: LearnFlags,
    #[arg(long)]
    trajectories: PathBuf,
}

#[derive(Args)]
struct LearnIncompleteArgs {
    #[command(flatten)]
    flags: LearnFlags,
    /// Observation CSV files, one per trajectory.
    #[arg(long, num_args = 1.., required = true)]
    obs: Vec<PathBuf>,
    /// Gaussian noise variance.
    #[arg(long, default_value_t = 0.2, conflicts_with_all = ["erf", "noise"])]
    variance: f64,
    /// Erf basal-concentration model with parameters estimated from the data.
    #[arg(long)]
    erf: bool,
    /// Noise model JSON.
    #[arg(long, conflicts_with = "erf")]
    noise: Option<PathBuf>,
    /// Observation horizon; the last observation time by default.
    #[arg(long)]
    t_end: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Learning result JSON.
    #[arg(long)]
    result: PathBuf,
    /// Model JSON holding the true graph.
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    trajectories: Option<Vec<usize>>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    max_degree: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => 3,
        Error::MetricUndefined(_) => 4,
        _ => 1,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut rng = seeded_rng(a.seed);
    let model = match &a.model {
        Some(p) => CtbnModel::load_json(p)?,
        None => {
            if a.max_degree >= a.nodes.max(1) {
                return Err(Error::Config("max degree must be below the node count".into()));
            }
            CtbnModel::glauber(random_graph(a.nodes, a.max_degree, &mut rng)?, a.gamma)?
        }
    };
    let stop = match a.horizon {
        Some(h) => StopRule::Horizon(h),
        None => StopRule::Transitions(a.transitions),
    };
    let trajs = (0..a.trajectories)
        .map(|_| gillespie_sample(&model, stop, &InitialState::Uniform, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    write_trajectories_jsonl(&a.out, &trajs)?;
    if let Some(p) = &a.model_out {
        model.save_json(p)?;
    }
    if let (Some(n_obs), Some(dir)) = (a.observe, &a.obs_dir) {
        fs::create_dir_all(dir)?;
        let noise = NoiseModel::Gaussian { variance: a.variance };
        for (k, t) in trajs.iter().enumerate() {
            observe(t, model.space(), n_obs, &noise, &mut rng)?.write_csv(&dir.join(format!("obs_{k:03}.csv")))?;
        }
    }
    Ok(())
}

fn learn_config(f: &LearnFlags) -> Result<LearnConfig> {
    let mut cfg = match &f.config {
        Some(p) => LearnConfig::load(p)?,
        None => LearnConfig::default(),
    };
    match (f.search, f.k) {
        (Some(Search::Greedy), Some(k)) => cfg.mode = SearchMode::Greedy { k },
        (Some(Search::Greedy), None) => return Err(Error::Config("greedy search needs --k".into())),
        (Some(Search::Exhaustive), _) => cfg.mode = SearchMode::Exhaustive,
        (None, Some(k)) => cfg.mode = SearchMode::Greedy { k },
        (None, None) => {}
    }
    if let Some(i) = f.init {
        cfg.init = match i {
            Init::Heuristic => InitMode::Heuristic,
            Init::Random => InitMode::Random,
        };
    }
    if let Some(v) = f.alpha {
        cfg.gamma.alpha = v;
    }
    if let Some(v) = f.beta {
        cfg.gamma.beta = v;
    }
    if let Some(v) = f.c {
        cfg.dirichlet.c = v;
    }
    if let Some(v) = f.restarts {
        cfg.optimizer.restarts = v;
    }
    cfg.gamma.validate().map_err(|e| Error::Config(e.to_string()))?;
    cfg.dirichlet.validate().map_err(|e| Error::Config(e.to_string()))?;
    cfg.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn state_space(model: Option<&Path>, n: usize) -> Result<StateSpace> {
    match model {
        Some(p) => Ok(CtbnModel::load_json(p)?.space().clone()),
        None => Ok(StateSpace::binary_spins(n)),
    }
}

fn learn_complete_cmd(a: LearnCompleteArgs) -> Result<()> {
    let cfg = learn_config(&a.flags)?;
    let trajs = read_trajectories_jsonl(&a.trajectories)?;
    let n = trajs.first().map_or(0, |t| t.n_nodes());
    let space = state_space(a.flags.model.as_deref(), n)?;
    let res = learn_complete(&space, &trajs, &cfg, &mut seeded_rng(a.flags.seed))?;
    emit(&res.to_json()?, a.flags.out.as_deref())
}

fn learn_incomplete_cmd(a: LearnIncompleteArgs) -> Result<()> {
    let cfg = learn_config(&a.flags)?;
    let placeholder = NoiseModel::Gaussian { variance: a.variance };
    let mut obs = a
        .obs
        .iter()
        .map(|p| ObservationSet::read_csv(p, placeholder.clone(), a.t_end))
        .collect::<Result<Vec<_>>>()?;
    let n = obs.first().and_then(|o| o.values.first()).map_or(0, Vec::len);
    let noise = if a.erf {
        let mut mu = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let vals: Vec<f64> = obs.iter().flat_map(|o| o.values.iter().map(move |v| v[i])).collect();
            let (m, s) = estimate_basal(&vals).ok_or_else(|| {
                Error::Format(format!("node {i}: too few distinct values to estimate the basal level"))
            })?;
            mu.push(m);
            sigma.push(s);
        }
        NoiseModel::ErfBasal { mu, sigma }
    } else if let Some(p) = &a.noise {
        serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
    } else {
        placeholder
    };
    for o in &mut obs {
        o.noise = noise.clone();
    }
    let space = state_space(a.flags.model.as_deref(), n)?;
    let res = learn_incomplete(&space, &obs, &cfg, &mut seeded_rng(a.flags.seed))?;
    emit(&res.to_json()?, a.flags.out.as_deref())
}

fn score(a: ScoreArgs) -> Result<()> {
    let model = CtbnModel::load_json(&a.model)?;
    let trajs = read_trajectories_jsonl(&a.trajectories)?;
    let stats = count_statistics_many(&trajs, model.space(), model.graph())?;
    let mut prior = ctbn::scoring::GammaPrior::default();
    if let Some(v) = a.alpha {
        prior.alpha = v;
    }
    if let Some(v) = a.beta {
        prior.beta = v;
    }
    prior.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ll = complete_log_likelihood(&stats, &model)?;
    let doc = serde_json::json!({
        "exact_score": exact_marginal_score(&stats, &prior),
        "log_likelihood": ll.value,
    });
    emit(&serde_json::to_string_pretty(&doc)?, None)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let res = LearnResultDoc::load(&a.result)?;
    let truth = CtbnModel::load_json(&a.truth)?.graph().clone();
    let map = Graph::from_edges(truth.n_nodes(), &res.map_graph).map_err(|e| Error::Format(e.to_string()))?;
    let hamming = eval::hamming_distance(&map, &truth).map_err(|e| Error::Format(e.to_string()))?;
    let rp = eval::roc_pr(&res.edge_probs, &truth).map_err(|e| match e {
        Error::Domain(m) => Error::Format(m),
        other => other,
    })?;
    let doc = serde_json::json!({ "auroc": rp.auroc, "aupr": rp.aupr, "hamming": hamming });
    emit(&serde_json::to_string_pretty(&doc)?, None)
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(t) = a.trajectories {
        cfg.trajectory_counts = t;
    }
    if a.nodes.is_some() || a.max_degree.is_some() {
        let (n0, d0) = match cfg.graph {
            GraphSpec::Random { n, max_degree } => (n, max_degree),
            GraphSpec::File { .. } => (5, 2),
        };
        cfg.graph = GraphSpec::Random {
            n: a.nodes.unwrap_or(n0),
            max_degree: a.max_degree.unwrap_or(d0),
        };
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    let report = run_experiment(&cfg)?;
    for g in &report.summary {
        let fmt = |s: Option<ctbn::eval::Spread>| s.map_or("-".to_string(), |s| format!("{:.3}", s.median));
        println!(
            "n_traj={:<4} {:<32} auroc={} aupr={} failed={}",
            g.n_traj,
            g.mode,
            fmt(g.auroc),
            fmt(g.aupr),
            g.n_failed
        );
    }
    if !report.failed_replicates.is_empty() {
        eprintln!("failed replicates: {:?}", report.failed_replicates);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::LearnComplete(a) => learn_complete_cmd(a),
        Cmd::LearnIncomplete(a) => learn_incomplete_cmd(a),
        Cmd::Score(a) => score(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Experiment(a) => experiment(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
