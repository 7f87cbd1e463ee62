//! Maximisation of a smooth function over the probability simplex by
//! exponentiated-gradient ascent with Armijo backtracking and random restarts.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective and gradient on the simplex. Implementations must be reentrant.
pub trait SimplexObjective: Sync {
    fn value(&self, pi: &[f64]) -> f64;
    fn gradient(&self, pi: &[f64]) -> Vec<f64>;
}

/// Adapter for a pair of closures.
pub struct FnObjective<F, G> {
    pub f: F,
    pub g: G,
}

impl<F, G> SimplexObjective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn value(&self, pi: &[f64]) -> f64 {
        (self.f)(pi)
    }

    fn gradient(&self, pi: &[f64]) -> Vec<f64> {
        (self.g)(pi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexConfig {
    pub restarts: usize,
    /// Stop when the L1 step is below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub armijo: f64,
    /// Interior offset of the vertex-adjacent start.
    pub vertex_offset: f64,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            restarts: 100,
            tol: 1e-8,
            max_iter: 500,
            max_halvings: 40,
            armijo: 1e-4,
            vertex_offset: 1e-2,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(
                "simplex optimiser needs restarts >= 1, tol > 0, max_iter >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexResult {
    pub pi: Vec<f64>,
    pub value: f64,
    /// Restart that produced the optimum.
    pub restart: usize,
    pub iterations: usize,
    /// Number of restarts that met the step tolerance.
    pub converged_restarts: usize,
    /// True when no restart converged (line search failures or the
    /// iteration cap everywhere).
    pub not_converged: bool,
}

struct Run {
    pi: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn ascend<F: SimplexObjective + ?Sized>(f: &F, mut pi: Vec<f64>, cfg: &SimplexConfig) -> Run {
    let mut value = f.value(&pi);
    let mut trial = vec![0.0; pi.len()];
    for it in 0..cfg.max_iter {
        let g = f.gradient(&pi);
        let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !gmax.is_finite() {
            return Run {
                pi,
                value,
                iterations: it,
                converged: false,
            };
        }
        let mut eta = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            for ((t, &p), &gk) in trial.iter_mut().zip(&pi).zip(&g) {
                *t = p * (eta * (gk - gmax)).exp();
            }
            normalize(&mut trial);
            let ascent: f64 = trial.iter().zip(&pi).zip(&g).map(|((t, p), gk)| gk * (t - p)).sum();
            let v = f.value(&trial);
            if v.is_finite() && v >= value + cfg.armijo * ascent {
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            let step: f64 = trial.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            return Run {
                pi,
                value,
                iterations: it,
                converged: step < cfg.tol,
            };
        }
        let step: f64 = trial.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut trial);
        value = f.value(&pi);
        if step < cfg.tol {
            return Run {
                pi,
                value,
                iterations: it + 1,
                converged: true,
            };
        }
    }
    Run {
        pi,
        value,
        iterations: cfg.max_iter,
        converged: false,
    }
}

/// Starting points: the best vertex nudged into the interior, followed by
/// `restarts - 1` uniform (Dirichlet(1)) draws.
pub fn restart_points<F: SimplexObjective + ?Sized, R: Rng + ?Sized>(
    f: &F,
    d: usize,
    cfg: &SimplexConfig,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut best_vertex = 0;
    let mut best_value = f64::NEG_INFINITY;
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let v = f.value(&e);
        if v > best_value {
            best_value = v;
            best_vertex = k;
        }
    }
    let mut points = Vec::with_capacity(cfg.restarts);
    let off = if d > 1 { cfg.vertex_offset } else { 0.0 };
    let mut start: Vec<f64> = vec![off / d as f64; d];
    start[best_vertex] += 1.0 - off;
    normalize(&mut start);
    points.push(start);
    for _ in 1..cfg.restarts {
        let mut p: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(Exp1).max(1e-300)).collect();
        normalize(&mut p);
        points.push(p);
    }
    points
}

/// Maximises `f` over the `d`-dimensional simplex. The best restart wins;
/// ties go to the lowest restart index. Deterministic given the RNG state.
pub fn maximize_on_simplex<F: SimplexObjective + ?Sized, R: Rng + ?Sized>(
    f: &F,
    d: usize,
    cfg: &SimplexConfig,
    rng: &mut R,
) -> Result<SimplexResult> {
    if d == 0 {
        return Err(Error::Domain("simplex dimension must be at least 1".into()));
    }
    cfg.validate()?;
    if d == 1 {
        let pi = vec![1.0];
        return Ok(SimplexResult {
            value: f.value(&pi),
            pi,
            restart: 0,
            iterations: 0,
            converged_restarts: 1,
            not_converged: false,
        });
    }
    let starts = restart_points(f, d, cfg, rng);
    let runs: Vec<Run> = starts.into_par_iter().map(|p| ascend(f, p, cfg)).collect();
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        if r.value > runs[best].value || (!runs[best].value.is_finite() && r.value.is_finite()) {
            best = k;
        }
    }
    let converged_restarts = runs.iter().filter(|r| r.converged).count();
    let iterations = runs.iter().map(|r| r.iterations).sum();
    let r = &runs[best];
    Ok(SimplexResult {
        pi: r.pi.clone(),
        value: r.value,
        restart: best,
        iterations,
        converged_restarts,
        not_converged: converged_restarts == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(restarts: usize) -> SimplexConfig {
        SimplexConfig {
            restarts,
            ..SimplexConfig::default()
        }
    }

    #[test]
    fn weighted_log_objective() {
        let w = [0.25, 0.75];
        let obj = FnObjective {
            f: |p: &[f64]| w.iter().zip(p).map(|(a, b)| a * b.ln()).sum(),
            g: |p: &[f64]| w.iter().zip(p).map(|(a, b)| a / b).collect(),
        };
        let r = maximize_on_simplex(&obj, 2, &cfg(10), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(
            (r.pi[0] - 0.25).abs() < 1e-6 && (r.pi[1] - 0.75).abs() < 1e-6,
            "{:?}",
            r.pi
        );
    }

    #[test]
    fn projection_identity() {
        let v = [0.6, 0.3, 0.1];
        let obj = FnObjective {
            f: |p: &[f64]| -v.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            g: |p: &[f64]| v.iter().zip(p).map(|(a, b)| 2.0 * (a - b)).collect(),
        };
        let r = maximize_on_simplex(&obj, 3, &cfg(10), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for k in 0..3 {
            assert!((r.pi[k] - v[k]).abs() < 1e-6, "{:?}", r.pi);
        }
        assert!((r.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let obj = FnObjective {
            f: |p: &[f64]| -(p[0] - 0.2).powi(2) - (p[1] * p[2] - 0.1).powi(2),
            g: |p: &[f64]| {
                vec![
                    -2.0 * (p[0] - 0.2),
                    -2.0 * (p[1] * p[2] - 0.1) * p[2],
                    -2.0 * (p[1] * p[2] - 0.1) * p[1],
                ]
            },
        };
        let a = maximize_on_simplex(&obj, 3, &cfg(20), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = maximize_on_simplex(&obj, 3, &cfg(20), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_dimensional() {
        let obj = FnObjective {
            f: |_: &[f64]| 3.0,
            g: |_: &[f64]| vec![0.0],
        };
        let r = maximize_on_simplex(&obj, 1, &cfg(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((r.pi, r.value), (vec![1.0], 3.0));
    }
}
