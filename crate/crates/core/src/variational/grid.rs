use crate::error::{Error, Result};

/// Piecewise-uniform time grid. Breakpoints are `0`, every distinct interior
/// observation time and the horizon; each segment is split into equal
/// sub-steps. Segment end points are stored separately from the start of
/// the next segment so left and right limits at breakpoints are both kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub breakpoints: Vec<f64>,
    /// Sub-steps per segment.
    pub seg_n: Vec<usize>,
    /// Index of each segment's first point.
    pub seg_start: Vec<usize>,
    pub times: Vec<f64>,
    /// Trapezoid quadrature weight of every point.
    pub weights: Vec<f64>,
}

impl TimeGrid {
    /// Grid with sub-step at most `dt` in every segment.
    pub fn new(obs_times: &[f64], t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end >= 0.0) || !t_end.is_finite() {
            return Err(Error::Domain(format!("horizon {t_end} must be finite and >= 0")));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step {dt} must be > 0")));
        }
        let mut breakpoints = vec![0.0];
        let mut interior: Vec<f64> = obs_times.iter().copied().filter(|&t| t > 0.0 && t < t_end).collect();
        interior.sort_by(|a, b| a.total_cmp(b));
        interior.dedup();
        breakpoints.extend(interior);
        breakpoints.push(t_end);
        let n_seg = breakpoints.len() - 1;
        let mut seg_n = Vec::with_capacity(n_seg);
        let mut seg_start = Vec::with_capacity(n_seg);
        let mut times = Vec::new();
        let mut weights = Vec::new();
        for s in 0..n_seg {
            let (t0, t1) = (breakpoints[s], breakpoints[s + 1]);
            let len = t1 - t0;
            let n = ((len / dt).ceil() as usize).max(1);
            let h = len / n as f64;
            seg_n.push(n);
            seg_start.push(times.len());
            for j in 0..=n {
                times.push(if j == n { t1 } else { t0 + j as f64 * h });
                weights.push(if j == 0 || j == n { 0.5 * h } else { h });
            }
        }
        Ok(Self {
            breakpoints,
            seg_n,
            seg_start,
            times,
            weights,
        })
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn n_segments(&self) -> usize {
        self.seg_n.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn seg_h(&self, s: usize) -> f64 {
        (self.breakpoints[s + 1] - self.breakpoints[s]) / self.seg_n[s] as f64
    }

    /// Index of the breakpoint equal to `t`, if any.
    pub fn breakpoint_of(&self, t: f64) -> Option<usize> {
        self.breakpoints.iter().position(|&b| b == t)
    }

    /// Values at this grid's points from values `old` (with `width` entries
    /// per point) defined on `from`, by linear interpolation within the
    /// same segment. Both grids must share breakpoints.
    pub fn resample(&self, from: &TimeGrid, old: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_points() * width];
        for s in 0..self.n_segments() {
            let (n_new, n_old) = (self.seg_n[s], from.seg_n[s]);
            for j in 0..=n_new {
                let pos = j as f64 / n_new as f64 * n_old as f64;
                let lo = (pos.floor() as usize).min(n_old);
                let hi = (lo + 1).min(n_old);
                let f = pos - lo as f64;
                let (pl, ph) = (from.seg_start[s] + lo, from.seg_start[s] + hi);
                let dst = (self.seg_start[s] + j) * width;
                for c in 0..width {
                    out[dst + c] = (1.0 - f) * old[pl * width + c] + f * old[ph * width + c];
                }
            }
        }
        out
    }

    pub fn same_breakpoints(&self, other: &TimeGrid) -> bool {
        self.breakpoints == other.breakpoints
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_times_are_grid_points() {
        let g = TimeGrid::new(&[0.3, 1.1, 1.1, 2.0], 2.0, 0.25).unwrap();
        assert_eq!(g.breakpoints, vec![0.0, 0.3, 1.1, 2.0]);
        for t in [0.3, 1.1, 2.0] {
            assert!(g.times.contains(&t));
        }
        let total: f64 = g.weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        for s in 0..g.n_segments() {
            assert!(g.seg_h(s) <= 0.25 + 1e-15);
        }
    }

    #[test]
    fn resample_is_exact_for_linear_data() {
        let a = TimeGrid::new(&[0.5], 1.0, 0.1).unwrap();
        let b = TimeGrid::new(&[0.5], 1.0, 0.03).unwrap();
        let vals: Vec<f64> = a.times.iter().map(|t| 3.0 * t + 1.0).collect();
        let r = b.resample(&a, &vals, 1);
        for (t, v) in b.times.iter().zip(&r) {
            assert!((v - (3.0 * t + 1.0)).abs() < 1e-12);
        }
    }
}
