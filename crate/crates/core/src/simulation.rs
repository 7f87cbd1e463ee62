//! Gillespie sampling of CTBN paths and noisy, irregular observation of them.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irma::irma_observation_likelihood;
use crate::model::{amalgamate, CtbnModel, StateSpace};

/// One state change: `node` jumps to `state` at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub node: usize,
    pub state: usize,
}

/// Exact sample path: initial joint state, ordered single-node jumps and a
/// horizon `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: Vec<usize>,
    pub events: Vec<Event>,
    pub t_end: f64,
    /// Set when sampling stopped early in an absorbing joint state.
    pub absorbed: bool,
}

impl Trajectory {
    pub fn n_transitions(&self) -> usize {
        self.events.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.initial.len()
    }

    /// Checks ordering, single-node changes and the horizon.
    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        if self.initial.len() != space.n_nodes() {
            return Err(Error::Format(format!(
                "trajectory has {} nodes, state space has {}",
                self.initial.len(),
                space.n_nodes()
            )));
        }
        for (i, &s) in self.initial.iter().enumerate() {
            if s >= space.card(i) {
                return Err(Error::Format(format!("initial state {s} of node {i} out of range")));
            }
        }
        let mut state = self.initial.clone();
        let mut last = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if e.node >= state.len() {
                return Err(Error::Format(format!("event {k} references unknown node {}", e.node)));
            }
            if e.state >= space.card(e.node) {
                return Err(Error::Format(format!("event {k} has out-of-range state {}", e.state)));
            }
            if !(e.time >= 0.0) || (k > 0 && e.time <= last) {
                return Err(Error::Format(format!(
                    "event {k} breaks strictly increasing time order"
                )));
            }
            if e.state == state[e.node] {
                return Err(Error::Format(format!("event {k} does not change node {}", e.node)));
            }
            state[e.node] = e.state;
            last = e.time;
        }
        if !(self.t_end >= last) || !self.t_end.is_finite() {
            return Err(Error::Format("horizon precedes the last event".into()));
        }
        Ok(())
    }

    /// Joint state at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> Vec<usize> {
        let mut state = self.initial.clone();
        for e in &self.events {
            if e.time > t {
                break;
            }
            state[e.node] = e.state;
        }
        state
    }

    /// Calls `f(t0, t1, state)` for each constant piece of the path.
    pub fn for_each_segment<F: FnMut(f64, f64, &[usize])>(&self, mut f: F) {
        let mut state = self.initial.clone();
        let mut t0 = 0.0;
        for e in &self.events {
            f(t0, e.time, &state);
            state[e.node] = e.state;
            t0 = e.time;
        }
        f(t0, self.t_end, &state);
    }

    pub fn to_doc(&self) -> TrajectoryDoc {
        TrajectoryDoc {
            initial: self.initial.clone(),
            events: self.events.iter().map(|e| (e.time, e.node, e.state)).collect(),
            t_end: self.t_end,
            absorbed: self.absorbed,
        }
    }

    pub fn from_doc(doc: TrajectoryDoc) -> Self {
        Self {
            initial: doc.initial,
            events: doc
                .events
                .into_iter()
                .map(|(time, node, state)| Event { time, node, state })
                .collect(),
            t_end: doc.t_end,
            absorbed: doc.absorbed,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One JSON-lines record: `{initial, events: [[t, node, state], ...], t_end}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub initial: Vec<usize>,
    pub events: Vec<(f64, usize, usize)>,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub absorbed: bool,
}

pub fn write_trajectories_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, &t.to_doc())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: TrajectoryDoc =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", k + 1)))?;
        out.push(Trajectory::from_doc(doc));
    }
    Ok(out)
}

/// When to stop sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop after this many transitions; the horizon is extended by one more
    /// holding time so the final dwell is not cut at an event.
    Transitions(usize),
    /// Stop at a fixed horizon.
    Horizon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Uniform over joint states.
    Uniform,
    Fixed(Vec<usize>),
    /// Stationary law of the amalgamated chain (small systems only).
    Stationary,
}

fn draw_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = k;
        if target < w {
            return k;
        }
        target -= w;
    }
    last
}

/// Samples a CTBN path with the direct method: exit rates are evaluated
/// node-wise from the current parent configuration, the holding time is
/// exponential in their sum and the jumping node and target state are drawn
/// proportionally to their rates.
pub fn gillespie_sample<R: Rng + ?Sized>(
    model: &CtbnModel,
    stop: StopRule,
    initial: &InitialState,
    rng: &mut R,
) -> Result<Trajectory> {
    let space = model.space();
    let n = model.n_nodes();
    let mut state: Vec<usize> = match initial {
        InitialState::Uniform => (0..n).map(|i| rng.random_range(0..space.card(i))).collect(),
        InitialState::Fixed(s) => {
            if s.len() != n || s.iter().enumerate().any(|(i, &x)| x >= space.card(i)) {
                return Err(Error::Domain("fixed initial state does not fit the state space".into()));
            }
            s.clone()
        }
        InitialState::Stationary => {
            let gen = amalgamate(model)?;
            let p = gen.stationary()?;
            let total: f64 = p.iter().sum();
            gen.state_of(draw_index(&p, total, rng))
        }
    };
    if let StopRule::Horizon(t) = stop {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("horizon {t} must be finite and non-negative")));
        }
    }
    let initial_state = state.clone();
    let mut events = Vec::new();
    let mut exits = vec![0.0; n];
    let mut t = 0.0;
    let exit_rates = |state: &[usize], exits: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let u = model.parent_config(i, state);
            exits[i] = model.cim(i).exit_rate(u, state[i]);
            total += exits[i];
        }
        total
    };
    let mut total = exit_rates(&state, &mut exits);
    if matches!(stop, StopRule::Transitions(0)) {
        let t_end = if total > 0.0 {
            rng.sample::<f64, _>(Exp1) / total
        } else {
            0.0
        };
        return Ok(Trajectory {
            initial: initial_state,
            events,
            t_end,
            absorbed: total <= 0.0,
        });
    }
    loop {
        if total <= 0.0 {
            return Ok(Trajectory {
                initial: initial_state,
                events,
                t_end: t,
                absorbed: true,
            });
        }
        let dt = rng.sample::<f64, _>(Exp1) / total;
        if let StopRule::Horizon(t_end) = stop {
            if t + dt > t_end {
                return Ok(Trajectory {
                    initial: initial_state,
                    events,
                    t_end,
                    absorbed: false,
                });
            }
        }
        t += dt;
        let node = draw_index(&exits, total, rng);
        let cim = model.cim(node);
        let u = model.parent_config(node, &state);
        let x = state[node];
        let row: Vec<f64> = (0..cim.card())
            .map(|xp| if xp == x { 0.0 } else { cim.rate(u, x, xp) })
            .collect();
        let target = draw_index(&row, exits[node], rng);
        state[node] = target;
        events.push(Event {
            time: t,
            node,
            state: target,
        });
        total = exit_rates(&state, &mut exits);
        if let StopRule::Transitions(k) = stop {
            if events.len() == k {
                let t_end = if total > 0.0 {
                    t + rng.sample::<f64, _>(Exp1) / total
                } else {
                    t
                };
                return Ok(Trajectory {
                    initial: initial_state,
                    events,
                    t_end,
                    absorbed: total <= 0.0,
                });
            }
        }
    }
}

/// Observation model `p(y | x)` for one measurement of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `y ~ N(label(x), variance)`.
    Gaussian { variance: f64 },
    /// Discrete symbols: `p(y | x) = matrices[node][x][y]`.
    DiscreteConfusion { matrices: Vec<Vec<Vec<f64>>> },
    /// Basal-concentration erf model for binary expression states
    /// (state 1 = over-expressed).
    ErfBasal { mu: Vec<f64>, sigma: Vec<f64> },
}

impl NoiseModel {
    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        match self {
            NoiseModel::Gaussian { variance } => {
                if !(*variance > 0.0) || !variance.is_finite() {
                    return Err(Error::Domain(format!("Gaussian variance {variance} must be > 0")));
                }
            }
            NoiseModel::DiscreteConfusion { matrices } => {
                if matrices.len() != space.n_nodes() {
                    return Err(Error::Domain("one confusion matrix per node is required".into()));
                }
                for (i, m) in matrices.iter().enumerate() {
                    if m.len() != space.card(i) {
                        return Err(Error::Domain(format!(
                            "confusion matrix of node {i} has wrong row count"
                        )));
                    }
                    for row in m {
                        let s: f64 = row.iter().sum();
                        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                            return Err(Error::Domain(format!(
                                "confusion matrix of node {i} is not row-stochastic"
                            )));
                        }
                    }
                }
            }
            NoiseModel::ErfBasal { mu, sigma } => {
                if mu.len() != space.n_nodes() || sigma.len() != space.n_nodes() {
                    return Err(Error::Domain("erf model needs mu and sigma per node".into()));
                }
                if sigma.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::Domain("erf model needs sigma > 0".into()));
                }
                if (0..space.n_nodes()).any(|i| space.card(i) != 2) {
                    return Err(Error::Domain("erf model applies to binary nodes only".into()));
                }
            }
        }
        Ok(())
    }

    /// `p(y | x)` for `node`; a NaN measurement is treated as missing (1).
    pub fn likelihood(&self, space: &StateSpace, node: usize, x: usize, y: f64) -> f64 {
        if y.is_nan() {
            return 1.0;
        }
        match self {
            NoiseModel::Gaussian { variance } => {
                let d = y - space.label(node, x);
                (-0.5 * d * d / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            NoiseModel::DiscreteConfusion { matrices } => {
                let row = &matrices[node][x];
                if y < 0.0 || y.fract() != 0.0 || y as usize >= row.len() {
                    0.0
                } else {
                    row[y as usize]
                }
            }
            NoiseModel::ErfBasal { mu, sigma } => {
                let (p1, p0) = irma_observation_likelihood(y, mu[node], sigma[node]);
                if x == 1 {
                    p1
                } else {
                    p0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, space: &StateSpace, node: usize, x: usize, rng: &mut R) -> Result<f64> {
        match self {
            NoiseModel::Gaussian { variance } => {
                let normal =
                    Normal::new(space.label(node, x), variance.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
                Ok(normal.sample(rng))
            }
            NoiseModel::DiscreteConfusion { matrices } => {
                let row = &matrices[node][x];
                Ok(draw_index(row, row.iter().sum(), rng) as f64)
            }
            NoiseModel::ErfBasal { .. } => Err(Error::Domain(
                "the erf basal model is a likelihood for ingested data and cannot be sampled".into(),
            )),
        }
    }
}

/// Timestamped measurements of all nodes plus the observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    /// `values[k][i]` is the measurement of node `i` at `times[k]`; NaN = missing.
    pub values: Vec<Vec<f64>>,
    pub t_end: f64,
    pub noise: NoiseModel,
}

impl ObservationSet {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, t_end: f64, noise: NoiseModel) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Format("times and values differ in length".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("observation times must be sorted".into()));
        }
        if times.iter().any(|&t| !(t >= 0.0) || t > t_end) || !t_end.is_finite() {
            return Err(Error::Format(format!("observation times must lie in [0, {t_end}]")));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Format("ragged observation rows".into()));
            }
        }
        Ok(Self {
            times,
            values,
            t_end,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.values.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend((0..n).map(|i| format!("node_{i}")));
        w.write_record(&header)?;
        for (t, row) in self.times.iter().zip(&self.values) {
            let mut rec = vec![t.to_string()];
            rec.extend(
                row.iter()
                    .map(|v| if v.is_nan() { String::new() } else { v.to_string() }),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `time,node_0,...` CSV; empty cells are missing values.
    /// Without an explicit horizon the last observation time is used.
    pub fn read_csv(path: &Path, noise: NoiseModel, t_end: Option<f64>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("time") {
            return Err(Error::Format(format!(
                "{}: first column must be 'time'",
                path.display()
            )));
        }
        for (k, h) in header.iter().enumerate().skip(1) {
            if h != format!("node_{}", k - 1) {
                return Err(Error::Format(format!(
                    "{}: expected column node_{}, found '{h}'",
                    path.display(),
                    k - 1
                )));
            }
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                let s = s.trim();
                if s.is_empty() {
                    return Ok(f64::NAN);
                }
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: row {}: bad number '{s}'", path.display(), line + 2)))
            };
            times.push(parse(&rec[0])?);
            values.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?);
        }
        let horizon = t_end.unwrap_or_else(|| times.last().copied().unwrap_or(0.0));
        Self::new(times, values, horizon, noise)
    }
}

/// Measures `traj` at `n_obs` i.i.d. uniform times on `[0, t_end]`.
pub fn observe<R: Rng + ?Sized>(
    traj: &Trajectory,
    space: &StateSpace,
    n_obs: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<ObservationSet> {
    if n_obs == 0 {
        return Err(Error::Domain("at least one observation is required".into()));
    }
    noise.validate(space)?;
    let mut times: Vec<f64> = (0..n_obs).map(|_| rng.random::<f64>() * traj.t_end).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let mut values = Vec::with_capacity(n_obs);
    for &t in &times {
        let state = traj.state_at(t);
        values.push(
            state
                .iter()
                .enumerate()
                .map(|(i, &x)| noise.sample(space, i, x, rng))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    ObservationSet::new(times, values, traj.t_end, noise.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cim, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flip_model(rate: f64) -> CtbnModel {
        let space = StateSpace::binary_spins(1);
        let cim = Cim::new(0, vec![], 2, vec![], vec![0.0, rate, rate, 0.0]).unwrap();
        CtbnModel::new(space, Graph::empty(1), vec![cim]).unwrap()
    }

    #[test]
    fn stop_on_transition_count() {
        let model = CtbnModel::glauber(Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap();
        assert_eq!(tr.n_transitions(), 10);
        assert!(tr.t_end > tr.events.last().unwrap().time);
        tr.validate(model.space()).unwrap();
    }

    #[test]
    fn same_seed_same_path() {
        let model = CtbnModel::glauber(Graph::from_edges(3, &[(0, 1), (2, 1)]).unwrap(), 0.6).unwrap();
        let a = gillespie_sample(
            &model,
            StopRule::Horizon(20.0),
            &InitialState::Uniform,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = gillespie_sample(
            &model,
            StopRule::Horizon(20.0),
            &InitialState::Uniform,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_dwell_time_matches_exponential_law() {
        let model = flip_model(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let tr = gillespie_sample(
            &model,
            StopRule::Transitions(n),
            &InitialState::Fixed(vec![0]),
            &mut rng,
        )
        .unwrap();
        let mean = tr.events.last().unwrap().time / n as f64;
        // Exp(1): sd of the sample mean is 1/sqrt(n)
        assert!((mean - 1.0).abs() < 3.0 / (n as f64).sqrt(), "mean dwell {mean}");
    }

    #[test]
    fn absorbing_state_stops_early() {
        let space = StateSpace::new(vec![2]).unwrap();
        let cim = Cim::new(0, vec![], 2, vec![], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let model = CtbnModel::new(space, Graph::empty(1), vec![cim]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = gillespie_sample(
            &model,
            StopRule::Transitions(5),
            &InitialState::Fixed(vec![0]),
            &mut rng,
        )
        .unwrap();
        assert!(tr.absorbed);
        assert_eq!(tr.n_transitions(), 1);
        assert_eq!(tr.t_end, tr.events[0].time);
    }

    #[test]
    fn degenerate_gaussian_noise_returns_labels() {
        let model = flip_model(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tr = gillespie_sample(&model, StopRule::Transitions(10), &InitialState::Uniform, &mut rng).unwrap();
        let obs = observe(
            &tr,
            model.space(),
            10,
            &NoiseModel::Gaussian { variance: 1e-12 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(obs.len(), 10);
        for (t, row) in obs.times.iter().zip(&obs.values) {
            let x = tr.state_at(*t)[0];
            assert!((row[0] - model.space().label(0, x)).abs() < 1e-4);
        }
        assert!(obs.times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gaussian_noise_variance() {
        let model = flip_model(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tr = gillespie_sample(&model, StopRule::Transitions(50), &InitialState::Uniform, &mut rng).unwrap();
        let n = 20_000;
        let obs = observe(&tr, model.space(), n, &NoiseModel::Gaussian { variance: 0.2 }, &mut rng).unwrap();
        let resid: Vec<f64> = obs
            .times
            .iter()
            .zip(&obs.values)
            .map(|(t, row)| row[0] - model.space().label(0, tr.state_at(*t)[0]))
            .collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        // var of the sample variance of a normal: 2 sigma^4 / n
        let sd = (2.0 * 0.04 / n as f64).sqrt();
        assert!((var - 0.2).abs() < 3.0 * sd, "variance {var}");
    }

    #[test]
    fn missing_values_have_unit_likelihood() {
        let space = StateSpace::binary_spins(1);
        let nm = NoiseModel::Gaussian { variance: 0.2 };
        assert_eq!(nm.likelihood(&space, 0, 1, f64::NAN), 1.0);
    }

    #[test]
    fn csv_roundtrip_keeps_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let noise = NoiseModel::Gaussian { variance: 0.2 };
        let obs = ObservationSet::new(
            vec![0.5, 1.25],
            vec![vec![1.0, f64::NAN], vec![-0.75, 0.5]],
            2.0,
            noise.clone(),
        )
        .unwrap();
        obs.write_csv(&path).unwrap();
        let back = ObservationSet::read_csv(&path, noise, Some(2.0)).unwrap();
        assert_eq!(back.times, obs.times);
        assert!(back.values[0][1].is_nan());
        assert_eq!(back.values[1], obs.values[1]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let model = flip_model(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trajs: Vec<_> = (0..3)
            .map(|_| gillespie_sample(&model, StopRule::Transitions(4), &InitialState::Uniform, &mut rng).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_trajectories_jsonl(&path, &trajs).unwrap();
        assert_eq!(read_trajectories_jsonl(&path).unwrap(), trajs);
    }
}
