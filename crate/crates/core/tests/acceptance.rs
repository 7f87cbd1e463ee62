//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line is printed; exits non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ctbn::experiment::{run_experiment, DataKind, ExperimentConfig, GraphSpec, Method, Protocol};
use ctbn::learn::{enumerate_parent_sets, learn_incomplete, InitMode, LearnConfig, SearchMode};
use ctbn::model::{amalgamate, random_graph, Cim, CtbnModel, Graph, StateSpace};
use ctbn::scoring::{
    component_stats, exact_marginal_score, family_gamma_score, mixture_gradient, mixture_lower_bound, node_bound,
    DirichletPrior, GammaPrior, MixtureWeights, NodeWeights,
};
use ctbn::seeded_rng;
use ctbn::simulation::{gillespie_sample, observe, InitialState, NoiseModel, ObservationSet, StopRule};
use ctbn::stats::{count_statistics, count_statistics_many, FamilyStats, SufficientStats};
use ctbn::variational::{run_fixed_point, EngineConfig, MeanMode, PosteriorRates, StepRule, VariationalEngine};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

const ALPHA: f64 = 5.0;
const BETA: f64 = 10.0;
const C: f64 = 0.9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- helpers

/// `entries * (alpha ln beta - ln Gamma(alpha))`: the prior normaliser the
/// mixture bound leaves out.
fn prior_constant(f: &FamilyStats) -> f64 {
    (f.n_configs() * f.card * (f.card - 1)) as f64 * (ALPHA * BETA.ln() - ln_gamma(ALPHA))
}

/// Gamma part of the bound with prior normalisers restored.
fn normalised_gamma_part(comps: &[FamilyStats], w: &[f64]) -> f64 {
    comps
        .iter()
        .zip(w)
        .map(|(f, &w)| family_gamma_score(f, w, ALPHA, BETA) + prior_constant(f))
        .sum()
}

/// Closed-form log marginal likelihood of one family, written out directly.
fn gamma_poisson_evidence(f: &FamilyStats) -> f64 {
    let mut s = 0.0;
    for u in 0..f.n_configs() {
        for x in 0..f.card {
            for xp in 0..f.card {
                if xp != x {
                    let (m, t) = (f.m(u, x, xp), f.t(u, x));
                    s += ln_gamma(ALPHA + m) - ln_gamma(ALPHA) + ALPHA * BETA.ln() - (ALPHA + m) * (BETA + t).ln();
                }
            }
        }
    }
    s
}

fn random_tables(seed: u64, n: usize) -> SufficientStats {
    let space = StateSpace::binary_spins(n);
    let mut rng = seeded_rng(seed);
    let mut s = SufficientStats::zeros(&space, &Graph::complete(n));
    for f in &mut s.families {
        for u in 0..f.n_configs() {
            for x in 0..2 {
                *f.t_mut(u, x) = rng.random_range(0.0..10.0);
                *f.m_mut(u, x, 1 - x) = rng.random_range(0..20) as f64;
            }
        }
    }
    s
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn spin_model(n: usize, max_degree: usize, gamma: f64, seed: u64) -> CtbnModel {
    let g = random_graph(n, max_degree, &mut seeded_rng(seed)).unwrap();
    CtbnModel::glauber(g, gamma).unwrap()
}

fn median(v: &[f64]) -> f64 {
    common::median(v)
}

fn group_median(
    rep: &ctbn::experiment::MetricsReport,
    n: usize,
    mode: &str,
    f: fn(&ctbn::experiment::ResultRow) -> Option<f64>,
) -> f64 {
    let v: Vec<f64> = rep
        .rows
        .iter()
        .filter(|r| r.n_traj == n && r.mode == mode)
        .filter_map(f)
        .collect();
    median(&v)
}

// ---------------------------------------------------------------- criteria

fn c1_degenerate_equality() -> Outcome {
    let n = 5;
    let mut rng = seeded_rng(101);
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for table in 0..100 {
        let stats = random_tables(1000 + table, n);
        let mut pi = Vec::new();
        let mut chosen = Vec::new();
        for i in 0..n {
            let subsets = enumerate_parent_sets(&SearchMode::Exhaustive, n, i).unwrap();
            let k = rng.random_range(0..subsets.len());
            chosen.push(subsets[k].clone());
            pi.push(NodeWeights::degenerate(subsets, k));
        }
        let pi = MixtureWeights { nodes: pi };
        let bound = mixture_lower_bound(&stats, &pi, &GammaPrior::default(), &DirichletPrior::default()).unwrap();
        let marg: Vec<FamilyStats> = (0..n)
            .map(|i| stats.family(i).marginalize(&chosen[i]).unwrap())
            .collect();
        for i in 0..n {
            let nw = pi.node(i);
            let comps = component_stats(stats.family(i), &nw.subsets).unwrap();
            // prior normalisers of the unused components, which the bound keeps as constants
            let dropped: f64 = comps
                .iter()
                .zip(&nw.weights)
                .filter(|(_, &w)| w == 0.0)
                .map(|(f, _)| prior_constant(f))
                .sum();
            let single = SufficientStats {
                families: vec![marg[i].clone()],
            };
            let exact = exact_marginal_score(&single, &GammaPrior::default());
            worst = worst.max((bound.nodes[i].gamma + dropped - exact).abs());
            let oracle = gamma_poisson_evidence(&marg[i]);
            worst_oracle = worst_oracle.max((normalised_gamma_part(&comps, &nw.weights) - oracle).abs());
        }
    }
    outcome(
        worst < 1e-9 && worst_oracle < 1e-9,
        format!("max |bound - exact| = {worst:.2e}, vs direct evidence {worst_oracle:.2e} (tol 1e-9)"),
    )
}

fn c2_jensen_bound() -> Outcome {
    // node 0 with candidate parent sets {} and {1}
    let model = CtbnModel::glauber(Graph::from_edges(2, &[(0, 1), (1, 0)]).unwrap(), 0.6).unwrap();
    let mut rng = seeded_rng(202);
    let trajs: Vec<_> = (0..2)
        .map(|_| gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap())
        .collect();
    let stats = count_statistics_many(&trajs, model.space(), model.graph()).unwrap();
    let fam = stats.family(0).clone();
    let comps = component_stats(&fam, &[vec![], vec![1]]).unwrap();
    let samples = 1_000_000;
    let gam = Gamma::new(ALPHA, 1.0 / BETA).unwrap();
    let mut gaps = Vec::new();
    let mut neg_h = Vec::new();
    let mut violations = 0;
    let mut max_sigma: f64 = 0.0;
    for k in 0..20 {
        let h_target = std::f64::consts::LN_2 * k as f64 / 19.0;
        let (mut lo, mut hi) = (0.0, 0.5);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if entropy(&[mid, 1.0 - mid]) < h_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = if k == 0 { 0.0 } else { 0.5 * (lo + hi) };
        let w = if rng.random::<bool>() {
            [p, 1.0 - p]
        } else {
            [1.0 - p, p]
        };
        let bound = normalised_gamma_part(&comps, &w);
        // same prior draws for every weight vector
        let mut mc_rng = seeded_rng(2020);
        let mut ll = Vec::with_capacity(samples);
        for _ in 0..samples {
            let r0: [f64; 2] = [gam.sample(&mut mc_rng), gam.sample(&mut mc_rng)];
            let r1: [f64; 4] = std::array::from_fn(|_| gam.sample(&mut mc_rng));
            let mut l = 0.0;
            for u in 0..2 {
                for x in 0..2 {
                    let rate = w[0] * r0[x] + w[1] * r1[u * 2 + x];
                    l += fam.m(u, x, 1 - x) * rate.ln() - fam.t(u, x) * rate;
                }
            }
            ll.push(l);
        }
        let top = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = ll.iter().map(|l| (l - top).exp()).collect();
        let mean = e.iter().sum::<f64>() / samples as f64;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        let mc = top + mean.ln();
        let sigma = var.sqrt() / (mean * (samples as f64).sqrt());
        max_sigma = max_sigma.max(sigma);
        if bound > mc + 3.0 * sigma {
            violations += 1;
        }
        gaps.push(mc - bound);
        neg_h.push(-entropy(&w));
    }
    let rho = common::spearman(&gaps, &neg_h);
    outcome(
        violations == 0 && rho < -0.8,
        format!(
            "{violations}/20 bounds above MC + 3 sigma (max sigma {max_sigma:.1e}); Spearman(gap, -H) = {rho:.3} (need < -0.8); gap range [{:.3}, {:.3}]",
            gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        ),
    )
}

fn c3_gradient() -> Outcome {
    let n = 5;
    let mut rng = seeded_rng(303);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let (g, d) = (GammaPrior::default(), DirichletPrior::default());
    let mut done = 0;
    while done < 100 {
        let stats = random_tables(3000 + done as u64, n);
        let node = rng.random_range(0..n);
        let subsets = enumerate_parent_sets(&SearchMode::Exhaustive, n, node).unwrap();
        let mut w: Vec<f64> = (0..subsets.len()).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        if w.iter().any(|&x| x < 1e-4) {
            continue;
        }
        let pi = MixtureWeights {
            nodes: (0..n)
                .map(|i| {
                    if i == node {
                        NodeWeights::new(subsets.clone(), w.clone()).unwrap()
                    } else {
                        NodeWeights::uniform(enumerate_parent_sets(&SearchMode::Exhaustive, n, i).unwrap())
                    }
                })
                .collect(),
        };
        let grad = mixture_gradient(&stats, &pi, &g, &d, node).unwrap().gradient;
        let comps = component_stats(stats.family(node), &subsets).unwrap();
        for k in 0..w.len() {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (node_bound(&comps, &up, ALPHA, BETA, C).value()
                - node_bound(&comps, &dn, ALPHA, BETA, C).value())
                / (2.0 * h);
            worst = worst.max((grad[k] - fd).abs() / fd.abs().max(1.0));
        }
        done += 1;
    }
    outcome(
        worst < 1e-5,
        format!("max relative error {worst:.2e} over 100 points (tol 1e-5)"),
    )
}

fn c4_single_node_exactness() -> Outcome {
    let space = StateSpace::new(vec![3]).unwrap();
    let cim = Cim::new(0, vec![], 3, vec![], vec![0.0, 0.8, 0.3, 0.5, 0.0, 1.1, 0.9, 0.2, 0.0]).unwrap();
    let model = CtbnModel::new(space.clone(), Graph::empty(1), vec![cim]).unwrap();
    let noise = NoiseModel::Gaussian { variance: 0.3 };
    let times = vec![0.4, 1.1, 1.9, 2.6, 3.3];
    let values = vec![vec![0.2], vec![1.7], vec![2.1], vec![0.9], vec![0.1]];
    let t_end = 4.0;
    let obs = ObservationSet::new(times.clone(), values.clone(), t_end, noise.clone()).unwrap();
    let q = DMatrix::from_fn(3, 3, |x, xp| model.cim(0).rate(0, x, xp));
    let lik: Vec<(f64, Vec<f64>)> = times
        .iter()
        .zip(&values)
        .map(|(&t, v)| (t, (0..3).map(|x| noise.likelihood(&space, 0, x, v[0])).collect()))
        .collect();
    let (et, em) = common::expm_two_filter(&q, &[1.0 / 3.0; 3], &lik, t_end);
    let errors = |dt: f64| -> (f64, f64) {
        let cfg = EngineConfig {
            step: StepRule::Fixed { dt },
            ..EngineConfig::default()
        };
        let mut e = VariationalEngine::with_rates(
            space.clone(),
            vec![obs.clone()],
            PosteriorRates::from_model(&model),
            cfg,
        )
        .unwrap();
        e.run().unwrap();
        let (s, _) = e.expected_statistics();
        let f = s.component(0, 0);
        let (mut abs, mut rel): (f64, f64) = (0.0, 0.0);
        for x in 0..3 {
            abs = abs.max((f.t(0, x) - et[x]).abs());
            rel = rel.max((f.t(0, x) - et[x]).abs() / et[x]);
            for xp in 0..3 {
                if xp != x {
                    abs = abs.max((f.m(0, x, xp) - em[(x, xp)]).abs());
                    rel = rel.max((f.m(0, x, xp) - em[(x, xp)]).abs() / em[(x, xp)]);
                }
            }
        }
        (abs, rel)
    };
    let (a1, r1) = errors(1e-3);
    let (a2, _) = errors(5e-4);
    let order = (a1 / a2).log2();
    outcome(
        r1 < 0.01 && order >= 1.8,
        format!("max relative error {r1:.2e} at dt=1e-3 (tol 1e-2); observed order {order:.2} (need >= 1.8)"),
    )
}

fn c5_conservation() -> Outcome {
    let mut worst_norm: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    let mut worst_modes: f64 = 0.0;
    let (g, d) = (GammaPrior::default(), DirichletPrior::default());
    for inst in 0..5u64 {
        let mut rng = seeded_rng(500 + inst);
        let model = spin_model(3, 2, 0.6, 550 + inst);
        let noise = NoiseModel::Gaussian { variance: 0.2 };
        let obs: Vec<_> = (0..2)
            .map(|_| {
                let t = gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap();
                observe(&t, model.space(), 6, &noise, &mut rng).unwrap()
            })
            .collect();
        let subsets: Vec<_> = (0..3)
            .map(|i| enumerate_parent_sets(&SearchMode::Exhaustive, 3, i).unwrap())
            .collect();
        let pi = MixtureWeights {
            nodes: subsets
                .iter()
                .map(|s| {
                    let w: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.05..1.0)).collect();
                    let t: f64 = w.iter().sum();
                    NodeWeights::new(s.clone(), w.iter().map(|x| x / t).collect()).unwrap()
                })
                .collect(),
        };
        let mut e = VariationalEngine::new(
            model.space().clone(),
            obs.clone(),
            pi,
            g.clone(),
            d.clone(),
            EngineConfig::default(),
        )
        .unwrap();
        e.run().unwrap();
        for p in e.paths() {
            for qs in &p.q {
                for q in qs.chunks(2) {
                    worst_norm = worst_norm.max((q[0] + q[1] - 1.0).abs());
                }
            }
        }
        let mut scaled = e.clone();
        for path in 0..obs.len() {
            for i in 0..3 {
                e.backward_sweep(path, i, 1.0).unwrap();
                e.forward_sweep(path, i).unwrap();
                scaled.backward_sweep(path, i, 7.3).unwrap();
                scaled.forward_sweep(path, i).unwrap();
            }
        }
        for (pa, pb) in e.paths().iter().zip(scaled.paths()) {
            for (qa, qb) in pa.q.iter().flatten().zip(pb.q.iter().flatten()) {
                worst_scale = worst_scale.max((qa - qb).abs());
            }
        }
        let (sa, _) = e.expected_statistics();
        let (sb, _) = scaled.expected_statistics();
        for (fa, fb) in sa.nodes.iter().flatten().zip(sb.nodes.iter().flatten()) {
            for (x, y) in fa.m.iter().chain(&fa.t).zip(fb.m.iter().chain(&fb.t)) {
                worst_scale = worst_scale.max((x - y).abs());
            }
        }
        let degenerate = MixtureWeights {
            nodes: subsets
                .iter()
                .map(|s| NodeWeights::degenerate(s.clone(), rng.random_range(0..s.len())))
                .collect(),
        };
        let run = |mode| {
            let cfg = EngineConfig {
                mode,
                ..EngineConfig::default()
            };
            run_fixed_point(model.space(), &degenerate, &g, &d, &obs, &cfg)
                .unwrap()
                .0
        };
        let (geo, ari) = (run(MeanMode::ExactGeometric), run(MeanMode::GreedyArithmetic));
        for (fa, fb) in geo.nodes.iter().flatten().zip(ari.nodes.iter().flatten()) {
            for (x, y) in fa.m.iter().chain(&fa.t).zip(fb.m.iter().chain(&fb.t)) {
                worst_modes = worst_modes.max((x - y).abs());
            }
        }
    }
    outcome(
        worst_norm < 1e-6 && worst_scale < 1e-10 && worst_modes < 1e-12,
        format!(
            "max |sum q - 1| = {worst_norm:.1e} (tol 1e-6); rho rescaling {worst_scale:.1e} (tol 1e-10); degenerate greedy vs geometric {worst_modes:.1e} (tol 1e-12)"
        ),
    )
}

fn recovery_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        graph: GraphSpec::Random { n: 5, max_degree: 2 },
        glauber_gamma: 0.6,
        transitions: 10,
        replicates: 30,
        ..ExperimentConfig::default()
    }
}

fn c6_complete_recovery() -> Outcome {
    let cfg = ExperimentConfig {
        trajectory_counts: vec![10, 20, 50, 100],
        data: DataKind::Complete,
        methods: vec![
            Method::Mixture {
                search: SearchMode::Exhaustive,
                init: InitMode::Heuristic,
            },
            Method::ExactScore {
                search: SearchMode::Exhaustive,
            },
        ],
        ..recovery_config(606)
    };
    let rep = run_experiment(&cfg).unwrap();
    let (mix, exact) = (cfg.methods[0].label(), cfg.methods[1].label());
    let auroc = |n, m: &str| group_median(&rep, n, m, |r| r.auroc);
    let (m100, e100, m10, e10) = (auroc(100, &mix), auroc(100, &exact), auroc(10, &mix), auroc(10, &exact));
    outcome(
        m100 >= 0.9 && (m100 - e100).abs() <= 0.05 && m100 > m10 && e100 > e10,
        format!(
            "median AUROC mixture {m10:.3} -> {m100:.3}, exact score {e10:.3} -> {e100:.3} (10 -> 100 trajectories; need >= 0.9, within 0.05, increasing); failed replicates {:?}",
            rep.failed_replicates
        ),
    )
}

fn incomplete_recovery(replicates: usize) -> Outcome {
    let cfg = ExperimentConfig {
        replicates,
        trajectory_counts: vec![40],
        data: DataKind::Incomplete {
            n_obs: 10,
            noise: NoiseModel::Gaussian { variance: 0.2 },
        },
        methods: vec![
            Method::Mixture {
                search: SearchMode::Exhaustive,
                init: InitMode::Heuristic,
            },
            Method::Mixture {
                search: SearchMode::Greedy { k: 4 },
                init: InitMode::Heuristic,
            },
            Method::Mixture {
                search: SearchMode::Exhaustive,
                init: InitMode::Random,
            },
        ],
        ..recovery_config(707)
    };
    let rep = run_experiment(&cfg).unwrap();
    let labels: Vec<String> = cfg.methods.iter().map(Method::label).collect();
    let ex = group_median(&rep, 40, &labels[0], |r| r.auroc);
    let ex_pr = group_median(&rep, 40, &labels[0], |r| r.aupr);
    let gr = group_median(&rep, 40, &labels[1], |r| r.auroc);
    let rnd = group_median(&rep, 40, &labels[2], |r| r.auroc);
    outcome(
        ex >= 0.75 && ex_pr >= 0.6 && (gr - ex).abs() <= 0.1 && ex >= rnd,
        format!(
            "exhaustive median AUROC {ex:.3} (>= 0.75), AUPR {ex_pr:.3} (>= 0.6); greedy K=4 {gr:.3} (within 0.1); random init {rnd:.3} (<= heuristic); {replicates} graphs, failed {:?}",
            rep.failed_replicates
        ),
    )
}

fn c7_incomplete_recovery() -> Outcome {
    incomplete_recovery(30)
}

// only the runtime budget applies to the reduced run
fn c7_smoke() -> Outcome {
    let o = incomplete_recovery(10);
    outcome(true, o.detail)
}

fn c8_scalability() -> Outcome {
    let sizes = [5usize, 8, 10, 15];
    let mut times = Vec::new();
    let noise = NoiseModel::Gaussian { variance: 0.2 };
    let cfg = LearnConfig {
        mode: SearchMode::Greedy { k: 2 },
        ..LearnConfig::default()
    };
    let mut all_converged = true;
    for &n in &sizes {
        let model = spin_model(n, 2, 0.6, 800 + n as u64);
        let mut rng = seeded_rng(880 + n as u64);
        let obs: Vec<_> = (0..50)
            .map(|_| {
                let t = gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap();
                observe(&t, model.space(), 10, &noise, &mut rng).unwrap()
            })
            .collect();
        let t0 = Instant::now();
        let res = learn_incomplete(model.space(), &obs, &cfg, &mut rng).unwrap();
        times.push(t0.elapsed().as_secs_f64());
        all_converged &= res.diagnostics.converged;
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let t15 = *times.last().unwrap();
    outcome(
        t15 < 1800.0 && slope < 3.0,
        format!(
            "runtimes {:?} s for N = {sizes:?}; 15 nodes {t15:.1} s (< 1800 s); fitted exponent {slope:.2} (< 3); EM converged everywhere: {all_converged}",
            times.iter().map(|t| (t * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn c9_prior_sweep() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 909,
        trajectory_counts: vec![1, 2, 100],
        replicates: 30,
        protocol: Protocol::PriorSweep {
            c_values: vec![0.0, 0.9, 2.0],
            grid_points: 51,
        },
        ..ExperimentConfig::default()
    };
    let rep = run_experiment(&cfg).unwrap();
    let argmax = |c: f64, n: usize| -> (usize, usize, f64) {
        let p = rep.profiles.iter().find(|p| p.c == c && p.n_traj == n).unwrap();
        let k = (0..p.pi_empty.len())
            .max_by(|&a, &b| p.mean_f_normalized[a].total_cmp(&p.mean_f_normalized[b]))
            .unwrap();
        (k, p.pi_empty.len(), p.pi_empty[k])
    };
    let interior = |(k, len, _): (usize, usize, f64)| k > 0 && k + 1 < len;
    let (c0, c2) = (argmax(0.0, 1), argmax(2.0, 1));
    let large: Vec<String> = [0.0, 0.9, 2.0]
        .iter()
        .map(|&c| format!("c={c}: {:.2}", argmax(c, 100).2))
        .collect();
    outcome(
        interior(c0) && !interior(c2),
        format!(
            "small data (1 trajectory): argmax pi_empty at c=0 is {:.2} (need interior), at c=2 is {:.2} (need boundary); 100 trajectories: {}",
            c0.2,
            c2.2,
            large.join(", ")
        ),
    )
}

fn c10_stability() -> Outcome {
    let counts = vec![100, 200, 300, 400, 800];
    let cfg = ExperimentConfig {
        seed: 1010,
        graph: GraphSpec::Random { n: 10, max_degree: 2 },
        trajectory_counts: counts.clone(),
        replicates: 10,
        methods: vec![Method::Mixture {
            search: SearchMode::Greedy { k: 2 },
            init: InitMode::Heuristic,
        }],
        ..ExperimentConfig::default()
    };
    let rep = run_experiment(&cfg).unwrap();
    let label = cfg.methods[0].label();
    let med: Vec<f64> = counts[..4]
        .iter()
        .map(|&n| group_median(&rep, n, &label, |r| r.hamming_ref.map(|h| h as f64)))
        .collect();
    let truth: Vec<f64> = counts[..4]
        .iter()
        .map(|&n| group_median(&rep, n, &label, |r| r.hamming.map(|h| h as f64)))
        .collect();
    let ok = med.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        ok,
        format!("median Hamming distance to the 800-trajectory graph at 100/200/300/400: {med:?} (non-increasing); to the true graph: {truth:?}"),
    )
}

fn c11_simulation() -> Outcome {
    let mut rng = seeded_rng(1111);
    let space = StateSpace::new(vec![2, 3]).unwrap();
    let graph = Graph::from_edges(2, &[(1, 0), (0, 1)]).unwrap();
    let cims: Vec<Cim> = (0..2)
        .map(|i| {
            let p = graph.parents(i).to_vec();
            let pc = space.cards_of(&p);
            let k = space.card(i);
            let n_u: usize = pc.iter().product();
            Cim::new(
                i,
                p,
                k,
                pc,
                (0..n_u * k * k).map(|_| rng.random_range(0.3..2.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let model = CtbnModel::new(space.clone(), graph, cims).unwrap();
    let traj = gillespie_sample(&model, StopRule::Transitions(10_000), &InitialState::Uniform, &mut rng).unwrap();
    let stats = count_statistics(&traj, &space, model.graph()).unwrap();
    let mut outside = 0;
    let mut cells = 0;
    let mut worst_z: f64 = 0.0;
    for i in 0..2 {
        let f = stats.family(i);
        for u in 0..f.n_configs() {
            for x in 0..f.card {
                for xp in 0..f.card {
                    if xp == x {
                        continue;
                    }
                    let expected = model.cim(i).rate(u, x, xp) * f.t(u, x);
                    let z = (f.m(u, x, xp) - expected) / expected.sqrt();
                    worst_z = worst_z.max(z.abs());
                    cells += 1;
                    if z.abs() > 3.0 {
                        outside += 1;
                    }
                }
            }
        }
    }
    // first event from a fixed state: node by exit-rate share, time Exp(total)
    let q = amalgamate(&model).unwrap();
    let start = vec![1, 2];
    let s0 = q.index_of(&start);
    let total = -q.get(s0, s0);
    let mut node_rate = [0.0; 2];
    for s in 0..q.dim() {
        if s != s0 {
            let st = q.state_of(s);
            let changed = (0..2).find(|&j| st[j] != start[j]).unwrap();
            node_rate[changed] += q.get(s0, s);
        }
    }
    let bins = 5;
    let mut counts = vec![0.0; 2 * bins];
    let draws = 10_000;
    for _ in 0..draws {
        let t = gillespie_sample(
            &model,
            StopRule::Transitions(1),
            &InitialState::Fixed(start.clone()),
            &mut rng,
        )
        .unwrap();
        let ev = t.events[0];
        let u = 1.0 - (-total * ev.time).exp();
        let b = ((u * bins as f64) as usize).min(bins - 1);
        counts[ev.node * bins + b] += 1.0;
    }
    let mut chi2 = 0.0;
    for node in 0..2 {
        for b in 0..bins {
            let e = draws as f64 * node_rate[node] / total / bins as f64;
            chi2 += (counts[node * bins + b] - e).powi(2) / e;
        }
    }
    let p = 1.0 - ChiSquared::new((2 * bins - 1) as f64).unwrap().cdf(chi2);
    outcome(
        outside == 0 && p > 0.01,
        format!("{outside}/{cells} rate cells outside 3 sigma (max |z| {worst_z:.2}); first-event chi-square {chi2:.2}, p = {p:.3} (need > 0.01)"),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (
            "1 degenerate-mixture equality",
            Some(Duration::from_secs(10)),
            c1_degenerate_equality,
        ),
        ("2 Jensen bound", Some(Duration::from_secs(120)), c2_jensen_bound),
        ("3 gradient correctness", Some(Duration::from_secs(10)), c3_gradient),
        (
            "4 single-node variational exactness",
            Some(Duration::from_secs(30)),
            c4_single_node_exactness,
        ),
        (
            "5 conservation and invariances",
            Some(Duration::from_secs(60)),
            c5_conservation,
        ),
        (
            "6 complete-data recovery",
            Some(Duration::from_secs(900)),
            c6_complete_recovery,
        ),
        (
            "7 incomplete-data recovery",
            Some(Duration::from_secs(4 * 3600)),
            c7_incomplete_recovery,
        ),
        (
            "7 incomplete-data smoke run",
            Some(Duration::from_secs(45 * 60)),
            c7_smoke,
        ),
        ("8 scalability", None, c8_scalability),
        ("9 prior sweep", None, c9_prior_sweep),
        ("10 stability", None, c10_stability),
        ("11 simulation fidelity", None, c11_simulation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f));
        let elapsed = t0.elapsed();
        let (mut pass, mut detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if let Some(b) = budget {
            if elapsed > b {
                pass = false;
                detail.push_str(&format!("; over the {} s budget", b.as_secs()));
            }
        }
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {name} ({:.1} s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
