//! Variational forward-backward engine for expected sufficient statistics
//! under a mixture of CIMs.
//!
//! Per node the engine keeps, on a shared time grid, the backward message
//! `rho` (`exp(-lambda)`), a forward message `a` and the marginal
//! `q = a * rho`. The backward message solves `d rho/dt = -Omega rho` with
//! `rho(T) = 1` and multiplicative evidence jumps; the forward message solves
//! `d alpha/dt = alpha Omega` with the same effective matrix, where
//! `Omega(x, x') = E_u[geometric mean]` off the diagonal and
//! `Omega(x, x) = -E_u[arithmetic exit rate] + Psi(x)`. Writing the forward
//! pass in terms of `alpha = q / rho` avoids the `rho(x')/rho(x)` ratios of
//! the master equation, which are stiff next to noiseless observations.

mod grid;
mod rates;

pub use grid::TimeGrid;
pub use rates::{
    posterior_rates, ExpectedStats, GeometricTables, MeanMode, NodeRates, PosteriorRates, ACTIVE_WEIGHT, CONTEXT_CAP,
};

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mixed_radix_decode, mixed_radix_index, StateSpace};
use crate::scoring::{family_stirling_score, node_bound_stirling, DirichletPrior, GammaPrior, MixtureWeights};
use crate::simulation::ObservationSet;
use crate::stats::FamilyStats;

const NEG_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Nodes updated in index order, each seeing the latest values.
    GaussSeidel,
    /// All nodes updated against the previous sweep.
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// `dt = min(segment length, stability / max exit rate)`.
    Auto {
        stability: f64,
    },
    Fixed {
        dt: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub mode: MeanMode,
    /// Blend factor for new forward messages; dropped to 0.5 when the
    /// objective oscillates.
    pub damping: f64,
    /// Cap on forward-backward sweeps per run.
    pub max_sweeps: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub step: StepRule,
    pub schedule: Schedule,
    /// Sweeps between statistics refreshes, stopped early once the largest
    /// change of any marginal falls below `inner_tol`.
    pub inner_sweeps: usize,
    pub inner_tol: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: MeanMode::ExactGeometric,
            damping: 1.0,
            max_sweeps: 100,
            tol: 1e-6,
            step: StepRule::Auto { stability: 0.1 },
            schedule: Schedule::GaussSeidel,
            inner_sweeps: 10,
            inner_tol: 1e-6,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping {} must be in (0, 1]", self.damping)));
        }
        if self.max_sweeps == 0 || self.inner_sweeps == 0 || !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::Config("engine needs positive sweep caps and tolerances".into()));
        }
        match self.step {
            StepRule::Auto { stability } if !(stability > 0.0) => {
                Err(Error::Config("stability bound must be > 0".into()))
            }
            StepRule::Fixed { dt } if !(dt > 0.0) => Err(Error::Config("fixed time step must be > 0".into())),
            _ => Ok(()),
        }
    }
}

/// Forward-backward state of one observed trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub grid: TimeGrid,
    /// Likelihood vector per breakpoint and node (`None` = unobserved).
    pub evidence: Vec<Vec<Option<Vec<f64>>>>,
    /// `rho[node][point * card + x]`, scaled to max 1 per point.
    pub rho: Vec<Vec<f64>>,
    /// Forward message normalised so that `sum_x a * rho = 1`.
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl PathState {
    fn new(space: &StateSpace, obs: &ObservationSet, grid: TimeGrid) -> Result<Self> {
        let n = space.n_nodes();
        let mut evidence: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; grid.breakpoints.len()];
        for (t, row) in obs.times.iter().zip(&obs.values) {
            if row.len() != n {
                return Err(Error::Format(format!(
                    "observation row has {} values for {n} nodes",
                    row.len()
                )));
            }
            let b = grid
                .breakpoint_of(*t)
                .ok_or_else(|| Error::Format(format!("observation time {t} outside [0, {}]", grid.horizon())))?;
            for (i, &y) in row.iter().enumerate() {
                if y.is_nan() {
                    continue;
                }
                let k = space.card(i);
                let lik: Vec<f64> = (0..k).map(|x| obs.noise.likelihood(space, i, x, y)).collect();
                let e = evidence[b][i].get_or_insert_with(|| vec![1.0; k]);
                for (v, l) in e.iter_mut().zip(&lik) {
                    *v *= l;
                }
            }
        }
        let np = grid.n_points();
        let uniform = |i: usize| vec![1.0 / space.card(i) as f64; np * space.card(i)];
        Ok(Self {
            rho: (0..n).map(|i| vec![1.0; np * space.card(i)]).collect(),
            a: (0..n).map(uniform).collect(),
            q: (0..n).map(uniform).collect(),
            grid,
            evidence,
        })
    }

    fn regrid(&mut self, grid: TimeGrid, cards: &[usize]) {
        for (i, &k) in cards.iter().enumerate() {
            self.rho[i] = grid.resample(&self.grid, &self.rho[i], k);
            self.a[i] = grid.resample(&self.grid, &self.a[i], k);
            self.q[i] = grid.resample(&self.grid, &self.q[i], k);
            for p in 0..grid.n_points() {
                let (r, a) = (&self.rho[i][p * k..(p + 1) * k], &mut self.a[i][p * k..(p + 1) * k]);
                let z: f64 = a.iter().zip(r).map(|(x, y)| x * y).sum();
                if z > 0.0 {
                    a.iter_mut().for_each(|v| *v /= z);
                }
                for x in 0..k {
                    self.q[i][p * k + x] = a[x] * r[x];
                }
            }
        }
        self.grid = grid;
    }

    pub fn q_at(&self, node: usize, point: usize, card: usize) -> &[f64] {
        &self.q[node][point * card..(point + 1) * card]
    }
}

/// Objective monitor value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Stirling-form bound on the expected statistics plus the entropy.
    pub value: f64,
    pub entropy: f64,
    /// Part of `value` that depends on the variational state (excludes
    /// zero-weight components and the Dirichlet term).
    pub state_dependent: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Relative objective change at the last check.
    pub final_rel_change: f64,
    pub objective: Objective,
    pub trace: Vec<f64>,
    pub damped: bool,
}

/// Arithmetic-mode layout of the mean rate. Every parent set `J` inside an
/// active component gets a table `h_J(u_J) = sum_{m >= J} pi_m D_m(J)(u_J)`,
/// where `D_m` is the Moebius inverse of the conditional means
/// `E[r_m | u_L]`; then `E[R | u_t] = sum_{J <= t} h_J(u_J)` for any subset `t`.
#[derive(Debug, Clone, Default)]
struct ArithPlan {
    term_sizes: Vec<usize>,
    comps: Vec<CompPlan>,
    /// Per target subset: (term, projection of `u_t` onto the term).
    targets: Vec<Vec<(usize, Vec<usize>)>>,
}

#[derive(Debug, Clone)]
struct CompPlan {
    m: usize,
    /// Digits of each configuration of the component.
    digits: Vec<Vec<usize>>,
    /// By position mask `L`: `u_m -> u_L`.
    proj: Vec<Vec<usize>>,
    sizes: Vec<usize>,
    /// By mask `J`: term index.
    term: Vec<usize>,
    /// By mask `J`: `(L, sign, u_J -> u_L)` for every `L <= J`.
    mobius: Vec<Vec<(usize, f64, Vec<usize>)>>,
}

fn positions(mask: usize, d: usize) -> Vec<usize> {
    (0..d).filter(|b| mask >> b & 1 == 1).collect()
}

fn project(digits: &[Vec<usize>], pos: &[usize], cards: &[usize]) -> Vec<usize> {
    let sub_cards: Vec<usize> = pos.iter().map(|&b| cards[b]).collect();
    digits
        .iter()
        .map(|dg| {
            let v: Vec<usize> = pos.iter().map(|&b| dg[b]).collect();
            mixed_radix_index(&sub_cards, &v)
        })
        .collect()
}

fn arith_plan(nr: &NodeRates) -> ArithPlan {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut term_sizes = Vec::new();
    let mut comps = Vec::new();
    for &m in &nr.active {
        let (sub, cards) = (&nr.subsets[m], &nr.subset_cards[m]);
        let d = sub.len();
        let n_m: usize = cards.iter().product();
        let digits: Vec<Vec<usize>> = (0..n_m).map(|u| mixed_radix_decode(cards, u)).collect();
        let mut cp = CompPlan {
            m,
            digits,
            proj: Vec::new(),
            sizes: Vec::new(),
            term: Vec::new(),
            mobius: Vec::new(),
        };
        for mask in 0..1usize << d {
            let pos = positions(mask, d);
            let lc: Vec<usize> = pos.iter().map(|&b| cards[b]).collect();
            let size: usize = lc.iter().product();
            cp.proj.push(project(&cp.digits, &pos, cards));
            cp.sizes.push(size);
            let set: Vec<usize> = pos.iter().map(|&b| sub[b]).collect();
            let t = *index.entry(set).or_insert_with(|| {
                term_sizes.push(size);
                term_sizes.len() - 1
            });
            cp.term.push(t);
            let jd: Vec<Vec<usize>> = (0..size).map(|u| mixed_radix_decode(&lc, u)).collect();
            let mut mob = Vec::new();
            for l in (0..1usize << d).filter(|l| l & !mask == 0) {
                let sign = if (mask & !l).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                let within: Vec<usize> = positions(l, d)
                    .iter()
                    .map(|b| pos.iter().position(|x| x == b).unwrap())
                    .collect();
                mob.push((l, sign, project(&jd, &within, &lc)));
            }
            cp.mobius.push(mob);
        }
        comps.push(cp);
    }
    let targets = nr
        .subsets
        .iter()
        .zip(&nr.subset_cards)
        .map(|(t, tc)| {
            let d = t.len();
            let n_t: usize = tc.iter().product();
            let digits: Vec<Vec<usize>> = (0..n_t).map(|u| mixed_radix_decode(tc, u)).collect();
            (0..1usize << d)
                .filter_map(|mask| {
                    let pos = positions(mask, d);
                    let set: Vec<usize> = pos.iter().map(|&b| t[b]).collect();
                    let &ti = index.get(&set)?;
                    Some((ti, project(&digits, &pos, tc)))
                })
                .collect()
        })
        .collect();
    ArithPlan {
        term_sizes,
        comps,
        targets,
    }
}

/// Product of the parents' marginals for every configuration of `parents`
/// at grid point `p`; the factor of `skip` is replaced by 1.
fn config_weights(
    parents: &[usize],
    cards: &[usize],
    q: &[Vec<f64>],
    p: usize,
    skip: Option<usize>,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.push(1.0);
    for (&l, &c) in parents.iter().zip(cards) {
        let len = out.len();
        out.resize(len * c, 0.0);
        for s in (0..c).rev() {
            let w = if Some(l) == skip { 1.0 } else { q[l][p * c + s] };
            for u in 0..len {
                out[u + len * s] = out[u] * w;
            }
        }
    }
}

fn stride_of(parents: &[usize], cards: &[usize], node: usize) -> Option<usize> {
    let pos = parents.iter().position(|&p| p == node)?;
    Some(cards[..pos].iter().product())
}

/// A node that may depend on the current one, with its active components
/// (arithmetic mode) that contain it.
#[derive(Debug, Clone)]
struct Child {
    node: usize,
    through: Vec<usize>,
}

struct View<'a> {
    q: &'a [Vec<f64>],
    a: &'a [Vec<f64>],
    rho: &'a [Vec<f64>],
}

/// Immutable inputs shared by all node updates of a sweep.
struct Ctx<'a> {
    cards: &'a [usize],
    rates: &'a PosteriorRates,
    children: &'a [Vec<Child>],
    initial: &'a [Vec<f64>],
}

impl Ctx<'_> {
    /// `E_u[geometric]` off the diagonal and `E_u[arithmetic exit]` per state.
    fn point_means(&self, i: usize, q: &[Vec<f64>], p: usize, w: &mut Vec<f64>, eg: &mut [f64], exit: &mut [f64]) {
        let nr = &self.rates.nodes[i];
        let k = nr.card;
        eg.iter_mut().for_each(|v| *v = 0.0);
        exit.iter_mut().for_each(|v| *v = 0.0);
        if let Some(gt) = &nr.geometric {
            config_weights(&gt.context, &gt.context_cards, q, p, None, w);
            for (u, &wu) in w.iter().enumerate() {
                let base = u * k * k;
                for x in 0..k {
                    for xp in 0..k {
                        if xp != x {
                            eg[x * k + xp] += wu * gt.geo[base + x * k + xp];
                            exit[x] += wu * gt.arith[base + x * k + xp];
                        }
                    }
                }
            }
        } else {
            for &m in &nr.active {
                config_weights(&nr.subsets[m], &nr.subset_cards[m], q, p, None, w);
                let wm = nr.weights[m];
                let r = &nr.comp[m];
                for (u, &wu) in w.iter().enumerate() {
                    let f = wm * wu;
                    for (e, &rv) in eg.iter_mut().zip(&r[u * k * k..(u + 1) * k * k]) {
                        *e += f * rv;
                    }
                }
            }
            for x in 0..k {
                exit[x] = (0..k).filter(|&xp| xp != x).map(|xp| eg[x * k + xp]).sum();
            }
        }
    }

    /// Child-to-parent coupling `Psi_i(y)` at point `p`.
    fn psi_point(&self, i: usize, view: &View, p: usize, w: &mut Vec<f64>, out: &mut [f64]) {
        let ki = self.cards[i];
        out.iter_mut().for_each(|v| *v = 0.0);
        for child in &self.children[i] {
            let j = child.node;
            let nr = &self.rates.nodes[j];
            let kj = nr.card;
            let aj = &view.a[j][p * kj..(p + 1) * kj];
            let rj = &view.rho[j][p * kj..(p + 1) * kj];
            let qj = &view.q[j][p * kj..(p + 1) * kj];
            let mut eg = vec![0.0; ki * kj * kj];
            let mut ea = vec![0.0; ki * kj * kj];
            if let Some(gt) = &nr.geometric {
                let stride = stride_of(&gt.context, &gt.context_cards, i).unwrap();
                config_weights(&gt.context, &gt.context_cards, view.q, p, Some(i), w);
                for (u, &wu) in w.iter().enumerate() {
                    let y = (u / stride) % ki;
                    let base = u * kj * kj;
                    for c in 0..kj * kj {
                        eg[y * kj * kj + c] += wu * gt.geo[base + c];
                        ea[y * kj * kj + c] += wu * gt.arith[base + c];
                    }
                }
            } else {
                // components without i add the same amount for every y, which
                // only rescales rho and cancels in q
                for &m in &child.through {
                    let wm = nr.weights[m];
                    let r = &nr.comp[m];
                    let sub = &nr.subsets[m];
                    let stride = stride_of(sub, &nr.subset_cards[m], i).unwrap();
                    config_weights(sub, &nr.subset_cards[m], view.q, p, Some(i), w);
                    for (u, &wu) in w.iter().enumerate() {
                        let y = (u / stride) % ki;
                        for c in 0..kj * kj {
                            eg[y * kj * kj + c] += wm * wu * r[u * kj * kj + c];
                        }
                    }
                }
                ea.copy_from_slice(&eg);
            }
            for y in 0..ki {
                let mut s = 0.0;
                for x in 0..kj {
                    for xp in 0..kj {
                        if xp != x {
                            let c = y * kj * kj + x * kj + xp;
                            s += aj[x] * rj[xp] * eg[c] - qj[x] * ea[c];
                        }
                    }
                }
                out[y] += s;
            }
        }
    }

    /// Effective matrix at every grid point, `[point][x][x']`.
    fn omega(&self, i: usize, grid: &TimeGrid, view: &View) -> Vec<f64> {
        let k = self.cards[i];
        let np = grid.n_points();
        let mut out = vec![0.0; np * k * k];
        let mut w = Vec::new();
        let mut exit = vec![0.0; k];
        let mut psi = vec![0.0; k];
        for p in 0..np {
            let om = &mut out[p * k * k..(p + 1) * k * k];
            self.point_means(i, view.q, p, &mut w, om, &mut exit);
            self.psi_point(i, view, p, &mut w, &mut psi);
            for x in 0..k {
                om[x * k + x] = -exit[x] + psi[x];
            }
        }
        out
    }

    fn backward(&self, i: usize, omega: &[f64], path: &PathState) -> Result<Vec<f64>> {
        let k = self.cards[i];
        let grid = &path.grid;
        let mut rho = vec![0.0; grid.n_points() * k];
        let n_seg = grid.n_segments();
        let mut cur = vec![1.0; k];
        apply_evidence(&mut cur, path.evidence[n_seg][i].as_deref(), i, grid.horizon(), true)?;
        let mut tmp = Tmp::new(k);
        for s in (0..n_seg).rev() {
            let st = grid.seg_start[s];
            let n = grid.seg_n[s];
            let h = grid.seg_h(s);
            rho[(st + n) * k..(st + n + 1) * k].copy_from_slice(&cur);
            for j in (0..n).rev() {
                let (p1, p0) = (st + j + 1, st + j);
                rk4(
                    &omega[p1 * k * k..(p1 + 1) * k * k],
                    &omega[p0 * k * k..(p0 + 1) * k * k],
                    h,
                    &mut cur,
                    &mut tmp,
                    false,
                );
                check_and_scale(&mut cur, i, grid.times[p0], true)?;
                rho[p0 * k..(p0 + 1) * k].copy_from_slice(&cur);
            }
            if s > 0 {
                apply_evidence(&mut cur, path.evidence[s][i].as_deref(), i, grid.breakpoints[s], true)?;
            }
        }
        Ok(rho)
    }

    /// Returns `(a, q)` for node `i`.
    fn forward(
        &self,
        i: usize,
        omega: &[f64],
        rho: &[f64],
        path: &PathState,
        old_a: Option<&[f64]>,
        damping: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.cards[i];
        let grid = &path.grid;
        let np = grid.n_points();
        let mut a = vec![0.0; np * k];
        let mut alpha = self.initial[i].clone();
        apply_evidence(&mut alpha, path.evidence[0][i].as_deref(), i, 0.0, false)?;
        let mut tmp = Tmp::new(k);
        let n_seg = grid.n_segments();
        for s in 0..n_seg {
            let st = grid.seg_start[s];
            let n = grid.seg_n[s];
            let h = grid.seg_h(s);
            for j in 0..=n {
                let p = st + j;
                if j > 0 {
                    rk4(
                        &omega[(p - 1) * k * k..p * k * k],
                        &omega[p * k * k..(p + 1) * k * k],
                        h,
                        &mut alpha,
                        &mut tmp,
                        true,
                    );
                    check_and_scale(&mut alpha, i, grid.times[p], false)?;
                }
                let r = &rho[p * k..(p + 1) * k];
                let z: f64 = alpha.iter().zip(r).map(|(x, y)| x * y).sum();
                if !(z > 0.0) {
                    return Err(Error::ImpossibleEvidence {
                        node: i,
                        time: grid.times[p],
                    });
                }
                for x in 0..k {
                    a[p * k + x] = alpha[x] / z;
                }
            }
            if s + 1 < n_seg {
                apply_evidence(
                    &mut alpha,
                    path.evidence[s + 1][i].as_deref(),
                    i,
                    grid.breakpoints[s + 1],
                    false,
                )?;
            }
        }
        if let Some(old) = old_a.filter(|_| damping < 1.0) {
            for p in 0..np {
                let (an, r) = (&mut a[p * k..(p + 1) * k], &rho[p * k..(p + 1) * k]);
                for (v, o) in an.iter_mut().zip(&old[p * k..(p + 1) * k]) {
                    *v = damping * *v + (1.0 - damping) * o;
                }
                let z: f64 = an.iter().zip(r).map(|(x, y)| x * y).sum();
                if z > 0.0 {
                    an.iter_mut().for_each(|v| *v /= z);
                }
            }
        }
        let q = a.iter().zip(rho).map(|(x, y)| x * y).collect();
        Ok((a, q))
    }

    fn update_node(
        &self,
        i: usize,
        path: &PathState,
        view: &View,
        damping: f64,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let omega = self.omega(i, &path.grid, view);
        let rho = self.backward(i, &omega, path)?;
        let (a, q) = self.forward(i, &omega, &rho, path, Some(&view.a[i]), damping)?;
        Ok((rho, a, q))
    }

    /// One sweep over all nodes of a path; returns the largest change of any
    /// marginal.
    fn sweep_path(&self, path: &mut PathState, schedule: Schedule, damping: f64) -> Result<f64> {
        let n = self.cards.len();
        let mut delta: f64 = 0.0;
        match schedule {
            Schedule::GaussSeidel => {
                for i in 0..n {
                    let (rho, a, q) = {
                        let view = View {
                            q: &path.q,
                            a: &path.a,
                            rho: &path.rho,
                        };
                        self.update_node(i, path, &view, damping)?
                    };
                    delta = delta.max(max_abs_diff(&path.q[i], &q));
                    path.rho[i] = rho;
                    path.a[i] = a;
                    path.q[i] = q;
                }
            }
            Schedule::Jacobi => {
                let view = View {
                    q: &path.q,
                    a: &path.a,
                    rho: &path.rho,
                };
                let updates: Vec<_> = (0..n)
                    .into_par_iter()
                    .map(|i| self.update_node(i, path, &view, damping))
                    .collect::<Result<_>>()?;
                for (i, (rho, a, q)) in updates.into_iter().enumerate() {
                    delta = delta.max(max_abs_diff(&path.q[i], &q));
                    path.rho[i] = rho;
                    path.a[i] = a;
                    path.q[i] = q;
                }
            }
        }
        Ok(delta)
    }
}

struct Tmp {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    y: Vec<f64>,
    mid: Vec<f64>,
}

impl Tmp {
    fn new(k: usize) -> Self {
        Self {
            k1: vec![0.0; k],
            k2: vec![0.0; k],
            k3: vec![0.0; k],
            k4: vec![0.0; k],
            y: vec![0.0; k],
            mid: vec![0.0; k * k],
        }
    }
}

/// `out = M v` (column) or `out = v M` (row).
fn apply(m: &[f64], v: &[f64], out: &mut [f64], row: bool) {
    let k = v.len();
    for (x, o) in out.iter_mut().enumerate() {
        *o = if row {
            (0..k).map(|y| v[y] * m[y * k + x]).sum()
        } else {
            (0..k).map(|y| m[x * k + y] * v[y]).sum()
        };
    }
}

/// One classical Runge-Kutta step of `dv/ds = M(s) v` (or `v M(s)` for rows)
/// from a point with matrix `m0` to one with `m1`; the midpoint matrix is
/// their average.
fn rk4(m0: &[f64], m1: &[f64], h: f64, v: &mut [f64], t: &mut Tmp, row: bool) {
    let k = v.len();
    for (c, (a, b)) in t.mid.iter_mut().zip(m0.iter().zip(m1)) {
        *c = 0.5 * (a + b);
    }
    apply(m0, v, &mut t.k1, row);
    for x in 0..k {
        t.y[x] = v[x] + 0.5 * h * t.k1[x];
    }
    apply(&t.mid, &t.y, &mut t.k2, row);
    for x in 0..k {
        t.y[x] = v[x] + 0.5 * h * t.k2[x];
    }
    apply(&t.mid, &t.y, &mut t.k3, row);
    for x in 0..k {
        t.y[x] = v[x] + h * t.k3[x];
    }
    apply(m1, &t.y, &mut t.k4, row);
    for x in 0..k {
        v[x] += h / 6.0 * (t.k1[x] + 2.0 * t.k2[x] + 2.0 * t.k3[x] + t.k4[x]);
    }
}

/// Rejects negative entries beyond round-off, clips the rest and rescales
/// (by the max for `rho`, by the sum for `alpha`).
fn check_and_scale(v: &mut [f64], node: usize, time: f64, by_max: bool) -> Result<()> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !scale.is_finite() {
        return Err(Error::StepSize { node, time });
    }
    for x in v.iter_mut() {
        if *x < 0.0 {
            if *x < -NEG_TOL * scale {
                return Err(Error::StepSize { node, time });
            }
            *x = 0.0;
        }
    }
    let z = if by_max {
        v.iter().cloned().fold(0.0, f64::max)
    } else {
        v.iter().sum()
    };
    if !(z > 0.0) {
        return Err(Error::ImpossibleEvidence { node, time });
    }
    v.iter_mut().for_each(|x| *x /= z);
    Ok(())
}

fn apply_evidence(v: &mut [f64], e: Option<&[f64]>, node: usize, time: f64, by_max: bool) -> Result<()> {
    if let Some(e) = e {
        if e.iter().all(|&l| l <= 0.0) {
            return Err(Error::ImpossibleEvidence { node, time });
        }
        for (x, l) in v.iter_mut().zip(e) {
            *x *= l;
        }
    }
    check_and_scale(v, node, time, by_max)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Fixed-point solver for the variational marginals of a set of observed
/// trajectories under given mixture weights.
#[derive(Debug, Clone)]
pub struct VariationalEngine {
    space: StateSpace,
    config: EngineConfig,
    gprior: GammaPrior,
    dprior: DirichletPrior,
    weights: MixtureWeights,
    rates: PosteriorRates,
    frozen: bool,
    obs: Vec<ObservationSet>,
    paths: Vec<PathState>,
    initial: Vec<Vec<f64>>,
    children: Vec<Vec<Child>>,
    plans: Vec<ArithPlan>,
    estats: ExpectedStats,
    damping: f64,
}

fn validate_weights(space: &StateSpace, pi: &MixtureWeights) -> Result<()> {
    if pi.n_nodes() != space.n_nodes() {
        return Err(Error::Domain(
            "mixture weights and state space differ in node count".into(),
        ));
    }
    for (i, nw) in pi.nodes.iter().enumerate() {
        if nw.subsets.is_empty() || nw.subsets.len() != nw.weights.len() {
            return Err(Error::Domain(format!("node {i}: malformed mixture weights")));
        }
        let s: f64 = nw.weights.iter().sum();
        if nw.weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("node {i}: weights are not on the simplex")));
        }
        for m in &nw.subsets {
            if m.iter().any(|&p| p == i || p >= space.n_nodes()) || m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Domain(format!("node {i}: invalid parent subset {m:?}")));
            }
        }
    }
    Ok(())
}

impl VariationalEngine {
    /// Engine whose rates are refreshed from its own expected statistics.
    /// Starts from uniform marginals and prior-mean rates.
    pub fn new(
        space: StateSpace,
        obs: Vec<ObservationSet>,
        pi: MixtureWeights,
        gprior: GammaPrior,
        dprior: DirichletPrior,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        gprior.validate()?;
        dprior.validate()?;
        validate_weights(&space, &pi)?;
        let estats = ExpectedStats::zeros(&space, &pi);
        let rates = posterior_rates(&space, &estats, &pi, &gprior, config.mode)?;
        Self::build(space, obs, pi, gprior, dprior, config, rates, estats, false)
    }

    /// Engine with fixed rates (no refresh), e.g. from a known model.
    pub fn with_rates(
        space: StateSpace,
        obs: Vec<ObservationSet>,
        rates: PosteriorRates,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let pi = rates.weights();
        validate_weights(&space, &pi)?;
        let estats = ExpectedStats::zeros(&space, &pi);
        Self::build(
            space,
            obs,
            pi,
            GammaPrior::default(),
            DirichletPrior::default(),
            config,
            rates,
            estats,
            true,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        space: StateSpace,
        obs: Vec<ObservationSet>,
        pi: MixtureWeights,
        gprior: GammaPrior,
        dprior: DirichletPrior,
        config: EngineConfig,
        rates: PosteriorRates,
        estats: ExpectedStats,
        frozen: bool,
    ) -> Result<Self> {
        for o in &obs {
            o.noise.validate(&space)?;
        }
        let initial = (0..space.n_nodes())
            .map(|i| vec![1.0 / space.card(i) as f64; space.card(i)])
            .collect();
        let damping = config.damping;
        let mut engine = Self {
            space,
            config,
            gprior,
            dprior,
            weights: pi,
            rates,
            frozen,
            obs,
            paths: Vec::new(),
            initial,
            children: Vec::new(),
            plans: Vec::new(),
            estats,
            damping,
        };
        engine.refresh_structure();
        let dt = engine.step();
        engine.paths = engine
            .obs
            .iter()
            .map(|o| {
                let times = o.times.clone();
                PathState::new(&engine.space, o, TimeGrid::new(&times, o.t_end, dt)?)
            })
            .collect::<Result<_>>()?;
        Ok(engine)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn rates(&self) -> &PosteriorRates {
        &self.rates
    }

    pub fn weights(&self) -> &MixtureWeights {
        &self.weights
    }

    pub fn paths(&self) -> &[PathState] {
        &self.paths
    }

    pub fn paths_mut(&mut self) -> &mut [PathState] {
        &mut self.paths
    }

    pub fn current_stats(&self) -> &ExpectedStats {
        &self.estats
    }

    /// Prior initial distribution of a node (uniform by default).
    pub fn set_initial(&mut self, node: usize, p0: Vec<f64>) -> Result<()> {
        if p0.len() != self.space.card(node) || p0.iter().any(|&p| !(p >= 0.0)) || p0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain(format!("invalid initial distribution for node {node}")));
        }
        self.initial[node] = p0;
        Ok(())
    }

    /// Replaces the mixture weights (keeping the variational state as a warm
    /// start) and rebuilds the rates from the current statistics.
    pub fn set_weights(&mut self, pi: MixtureWeights) -> Result<()> {
        validate_weights(&self.space, &pi)?;
        let same_subsets = self
            .weights
            .nodes
            .iter()
            .zip(&pi.nodes)
            .all(|(a, b)| a.subsets == b.subsets);
        if !same_subsets {
            self.estats = ExpectedStats::zeros(&self.space, &pi);
        }
        self.weights = pi;
        self.rates = posterior_rates(&self.space, &self.estats, &self.weights, &self.gprior, self.config.mode)?;
        self.frozen = false;
        self.refresh_structure();
        Ok(())
    }

    fn refresh_structure(&mut self) {
        let n = self.space.n_nodes();
        let mut children: Vec<Vec<Child>> = vec![Vec::new(); n];
        for (j, nr) in self.rates.nodes.iter().enumerate() {
            let mut ctx: Vec<usize> = match &nr.geometric {
                Some(gt) => gt.context.clone(),
                None => nr.active.iter().flat_map(|&m| nr.subsets[m].iter().copied()).collect(),
            };
            ctx.sort_unstable();
            ctx.dedup();
            for p in ctx {
                let through = match &nr.geometric {
                    Some(_) => Vec::new(),
                    None => nr
                        .active
                        .iter()
                        .copied()
                        .filter(|&m| nr.subsets[m].contains(&p))
                        .collect(),
                };
                children[p].push(Child { node: j, through });
            }
        }
        self.children = children;
        self.plans = self
            .rates
            .nodes
            .iter()
            .map(|nr| {
                if nr.geometric.is_some() {
                    ArithPlan::default()
                } else {
                    arith_plan(nr)
                }
            })
            .collect();
    }

    fn step(&self) -> f64 {
        match self.config.step {
            StepRule::Fixed { dt } => dt,
            StepRule::Auto { stability } => {
                let r = self.rates.max_exit();
                if r > 0.0 {
                    stability / r
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Rebuilds the grids for the current time-step rule, resampling the
    /// variational state onto them when they change.
    pub fn refresh_grids(&mut self) -> Result<()> {
        let dt = self.step();
        let cards = self.space.cards().to_vec();
        for (path, o) in self.paths.iter_mut().zip(&self.obs) {
            let g = TimeGrid::new(&o.times, o.t_end, dt)?;
            if g != path.grid {
                path.regrid(g, &cards);
            }
        }
        Ok(())
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            cards: self.space.cards(),
            rates: &self.rates,
            children: &self.children,
            initial: &self.initial,
        }
    }

    /// One forward-backward sweep over every trajectory; returns the largest
    /// change of any marginal.
    pub fn sweep(&mut self) -> Result<f64> {
        let mut paths = std::mem::take(&mut self.paths);
        let result = {
            let ctx = self.ctx();
            let (schedule, damping) = (self.config.schedule, self.damping);
            paths
                .par_iter_mut()
                .map(|p| ctx.sweep_path(p, schedule, damping))
                .collect::<Result<Vec<f64>>>()
        };
        self.paths = paths;
        Ok(result?.into_iter().fold(0.0, f64::max))
    }

    /// `Psi` of `node` on trajectory `path`, laid out `[point][y]`.
    pub fn compute_psi(&self, path: usize, node: usize) -> Vec<f64> {
        let ps = &self.paths[path];
        let view = View {
            q: &ps.q,
            a: &ps.a,
            rho: &ps.rho,
        };
        let k = self.space.card(node);
        let ctx = self.ctx();
        let mut out = vec![0.0; ps.grid.n_points() * k];
        let mut w = Vec::new();
        for p in 0..ps.grid.n_points() {
            ctx.psi_point(node, &view, p, &mut w, &mut out[p * k..(p + 1) * k]);
        }
        out
    }

    /// Recomputes `rho` of one node on one trajectory. `terminal_scale`
    /// multiplies the terminal condition `rho(T) = 1`.
    pub fn backward_sweep(&mut self, path: usize, node: usize, terminal_scale: f64) -> Result<()> {
        let ps = &self.paths[path];
        let view = View {
            q: &ps.q,
            a: &ps.a,
            rho: &ps.rho,
        };
        let ctx = self.ctx();
        let omega = ctx.omega(node, &ps.grid, &view);
        let mut rho = ctx.backward(node, &omega, ps)?;
        rho.iter_mut().for_each(|r| *r *= terminal_scale);
        self.paths[path].rho[node] = rho;
        Ok(())
    }

    /// Recomputes `a` and `q` of one node on one trajectory from its
    /// current `rho`.
    pub fn forward_sweep(&mut self, path: usize, node: usize) -> Result<()> {
        let ps = &self.paths[path];
        let view = View {
            q: &ps.q,
            a: &ps.a,
            rho: &ps.rho,
        };
        let ctx = self.ctx();
        let omega = ctx.omega(node, &ps.grid, &view);
        let (a, q) = ctx.forward(node, &omega, &ps.rho[node], ps, None, 1.0)?;
        self.paths[path].a[node] = a;
        self.paths[path].q[node] = q;
        Ok(())
    }

    /// Expected statistics of every candidate subset, summed over
    /// trajectories; also returns the entropy term.
    pub fn expected_statistics(&self) -> (ExpectedStats, f64) {
        let parts: Vec<(ExpectedStats, f64)> = self.paths.par_iter().map(|p| self.path_statistics(p)).collect();
        let mut total = ExpectedStats::zeros(&self.space, &self.weights);
        let mut h = 0.0;
        for (s, hp) in parts {
            total.add(&s).expect("statistics share their layout");
            h += hp;
        }
        (total, h)
    }

    fn path_statistics(&self, path: &PathState) -> (ExpectedStats, f64) {
        let mut out = ExpectedStats::zeros(&self.space, &self.weights);
        let mut entropy = 0.0;
        let q = &path.q;
        let grid = &path.grid;
        let mut w = Vec::new();
        for (i, nr) in self.rates.nodes.iter().enumerate() {
            let k = nr.card;
            let fams = &mut out.nodes[i];
            match &nr.geometric {
                Some(gt) => {
                    let mut full = FamilyStats::zeros(i, gt.context.clone(), k, gt.context_cards.clone());
                    for p in 0..grid.n_points() {
                        let wp = grid.weights[p];
                        if wp == 0.0 {
                            continue;
                        }
                        let (ai, ri, qi) = (
                            &path.a[i][p * k..(p + 1) * k],
                            &path.rho[i][p * k..(p + 1) * k],
                            &q[i][p * k..(p + 1) * k],
                        );
                        config_weights(&gt.context, &gt.context_cards, q, p, None, &mut w);
                        for (u, &wu) in w.iter().enumerate() {
                            let f = wp * wu;
                            for x in 0..k {
                                full.t[u * k + x] += f * qi[x];
                                for xp in 0..k {
                                    if xp == x {
                                        continue;
                                    }
                                    let c = (u * k + x) * k + xp;
                                    let tau = f * ai[x] * ri[xp] * gt.geo[c];
                                    full.m[c] += tau;
                                    if tau > 0.0 {
                                        entropy += tau * (1.0 - gt.ln_geo[c] - ri[xp].ln() + ri[x].ln());
                                    }
                                }
                            }
                        }
                    }
                    for (m, fam) in fams.iter_mut().enumerate() {
                        *fam = full.marginalize(&nr.subsets[m]).expect("subset of the context");
                    }
                }
                None => {
                    let plan = &self.plans[i];
                    let kk = k * k;
                    let mut h: Vec<Vec<f64>> = plan.term_sizes.iter().map(|&n| vec![0.0; n * kk]).collect();
                    let mut g: Vec<Vec<Vec<f64>>> = plan
                        .comps
                        .iter()
                        .map(|cp| cp.sizes.iter().map(|&n| vec![0.0; n * kk]).collect())
                        .collect();
                    let mut qs = Vec::new();
                    for p in 0..grid.n_points() {
                        let wp = grid.weights[p];
                        if wp == 0.0 {
                            continue;
                        }
                        let (ai, ri, qi) = (
                            &path.a[i][p * k..(p + 1) * k],
                            &path.rho[i][p * k..(p + 1) * k],
                            &q[i][p * k..(p + 1) * k],
                        );
                        h.iter_mut().for_each(|t| t.fill(0.0));
                        for (cp, gm) in plan.comps.iter().zip(&mut g) {
                            let (sub, cards, r) = (&nr.subsets[cp.m], &nr.subset_cards[cp.m], &nr.comp[cp.m]);
                            gm.iter_mut().for_each(|t| t.fill(0.0));
                            // conditional means E[r_m | u_L] for every L inside m
                            for (u, dg) in cp.digits.iter().enumerate() {
                                qs.clear();
                                qs.extend(dg.iter().enumerate().map(|(b, &st)| q[sub[b]][p * cards[b] + st]));
                                for (mask, gl) in gm.iter_mut().enumerate() {
                                    let c: f64 = (0..qs.len()).filter(|b| mask >> b & 1 == 0).map(|b| qs[b]).product();
                                    let dst = cp.proj[mask][u] * kk;
                                    for e in 0..kk {
                                        gl[dst + e] += c * r[u * kk + e];
                                    }
                                }
                            }
                            let wm = nr.weights[cp.m];
                            for (mask, mob) in cp.mobius.iter().enumerate() {
                                let hj = &mut h[cp.term[mask]];
                                for (l, sign, pj) in mob {
                                    let f = wm * sign;
                                    for (uj, &ul) in pj.iter().enumerate() {
                                        for e in 0..kk {
                                            hj[uj * kk + e] += f * gm[*l][ul * kk + e];
                                        }
                                    }
                                }
                            }
                        }
                        for (t, fam) in fams.iter_mut().enumerate() {
                            config_weights(&nr.subsets[t], &nr.subset_cards[t], q, p, None, &mut w);
                            for (u, &wu) in w.iter().enumerate() {
                                let f = wp * wu;
                                for x in 0..k {
                                    fam.t[u * k + x] += f * qi[x];
                                }
                                for (ti, pj) in &plan.targets[t] {
                                    let hj = &h[*ti][pj[u] * kk..(pj[u] + 1) * kk];
                                    for x in 0..k {
                                        for xp in 0..k {
                                            if xp != x {
                                                fam.m[u * kk + x * k + xp] += f * ai[x] * ri[xp] * hj[x * k + xp];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        // entropy, with E_u[R ln R] replaced by sum_m pi_m E_u[r_m ln r_m]
                        for &m in &nr.active {
                            let wm = nr.weights[m];
                            let r = &nr.comp[m];
                            config_weights(&nr.subsets[m], &nr.subset_cards[m], q, p, None, &mut w);
                            for (u, &wu) in w.iter().enumerate() {
                                for x in 0..k {
                                    for xp in 0..k {
                                        let rv = r[u * k * k + x * k + xp];
                                        if xp == x || rv <= 0.0 {
                                            continue;
                                        }
                                        let tau = wp * wm * wu * ai[x] * ri[xp] * rv;
                                        if tau > 0.0 {
                                            entropy += tau * (1.0 - rv.ln() - ri[xp].ln() + ri[x].ln());
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, entropy)
    }

    /// Monitor value for given expected statistics and entropy.
    pub fn objective(&self, estats: &ExpectedStats, entropy: f64) -> Objective {
        let mut value = entropy;
        let mut state_dependent = entropy;
        let mut clamped = false;
        for (i, nw) in self.weights.nodes.iter().enumerate() {
            let (a, b) = self.gprior.for_node(i);
            let nb = node_bound_stirling(&estats.nodes[i], &nw.weights, a, b, self.dprior.for_node(i));
            value += nb.value();
            clamped |= nb.clamped;
            for (f, &w) in estats.nodes[i].iter().zip(&nw.weights) {
                if w > 0.0 {
                    state_dependent += family_stirling_score(f, w, a, b);
                }
            }
        }
        Objective {
            value,
            entropy,
            state_dependent,
            clamped,
        }
    }

    /// Runs sweeps until the objective settles, refreshing the rates from
    /// the expected statistics between rounds (unless the rates are fixed).
    pub fn run(&mut self) -> Result<FixedPointReport> {
        self.refresh_grids()?;
        let mut sweeps = 0;
        let mut trace = Vec::new();
        let mut prev: Option<f64> = None;
        let mut last_sign = 0.0;
        let mut alternations = 0;
        let mut rel = f64::INFINITY;
        let mut converged = false;
        let mut damped = self.damping < 1.0;
        let mut obj;
        loop {
            let mut inner_done = false;
            for _ in 0..self.config.inner_sweeps {
                let delta = self.sweep()?;
                sweeps += 1;
                if delta < self.config.inner_tol {
                    inner_done = true;
                    break;
                }
                if sweeps >= self.config.max_sweeps {
                    break;
                }
            }
            let (estats, h) = self.expected_statistics();
            obj = self.objective(&estats, h);
            self.estats = estats;
            trace.push(obj.value);
            if !self.frozen {
                self.rates = posterior_rates(&self.space, &self.estats, &self.weights, &self.gprior, self.config.mode)?;
                self.refresh_structure();
            }
            let f = obj.state_dependent;
            if let Some(pf) = prev {
                let d = f - pf;
                rel = d.abs() / f.abs().max(1e-300);
                if rel < self.config.tol || (self.frozen && inner_done) {
                    converged = true;
                    break;
                }
                let sign = d.signum();
                if last_sign != 0.0 && sign != last_sign {
                    alternations += 1;
                    if alternations >= 3 && self.damping > 0.5 {
                        self.damping = 0.5;
                        damped = true;
                    }
                }
                last_sign = sign;
            } else if self.frozen && inner_done {
                rel = 0.0;
                converged = true;
                break;
            }
            prev = Some(f);
            if sweeps >= self.config.max_sweeps {
                break;
            }
        }
        Ok(FixedPointReport {
            sweeps,
            converged,
            final_rel_change: rel,
            objective: obj,
            trace,
            damped,
        })
    }
}

/// Runs the engine from scratch and returns the expected statistics summed
/// over all observation sets.
pub fn run_fixed_point(
    space: &StateSpace,
    pi: &MixtureWeights,
    gprior: &GammaPrior,
    dprior: &DirichletPrior,
    obs: &[ObservationSet],
    config: &EngineConfig,
) -> Result<(ExpectedStats, FixedPointReport)> {
    let mut engine = VariationalEngine::new(
        space.clone(),
        obs.to_vec(),
        pi.clone(),
        gprior.clone(),
        dprior.clone(),
        config.clone(),
    )?;
    let report = engine.run()?;
    Ok((engine.estats, report))
}

/// The objective monitor for a given engine state.
pub fn variational_objective(engine: &VariationalEngine) -> Objective {
    let (s, h) = engine.expected_statistics();
    engine.objective(&s, h)
}
