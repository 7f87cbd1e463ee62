//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;

/// Exact smoothing of a finite CTMC with generator `q` (dense, rows sum to
/// zero), initial law `p0` and likelihood vectors at observation times.
/// Returns expected dwell times `E[T](x)` and transition counts `E[M](x, x')`
/// over `[0, t_end]`, computed with Van Loan block exponentials per segment.
pub fn expm_two_filter(q: &DMatrix<f64>, p0: &[f64], obs: &[(f64, Vec<f64>)], t_end: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = q.nrows();
    let mut bps = vec![0.0];
    let mut ev: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for (t, l) in obs {
        if *t == 0.0 {
            for (e, v) in ev[0].iter_mut().zip(l) {
                *e *= v;
            }
        } else if *t == *bps.last().unwrap() {
            for (e, v) in ev.last_mut().unwrap().iter_mut().zip(l) {
                *e *= v;
            }
        } else {
            bps.push(*t);
            ev.push(l.clone());
        }
    }
    if *bps.last().unwrap() < t_end {
        bps.push(t_end);
        ev.push(vec![1.0; n]);
    }
    let s = bps.len() - 1;
    let prop: Vec<DMatrix<f64>> = (0..s).map(|k| (q * (bps[k + 1] - bps[k])).exp()).collect();
    // alpha at segment starts (after evidence)
    let mut alpha = Vec::with_capacity(s);
    let mut a = DMatrix::from_fn(1, n, |_, x| p0[x] * ev[0][x]);
    for k in 0..s {
        alpha.push(a.clone());
        a = &a * &prop[k];
        for x in 0..n {
            a[(0, x)] *= ev[k + 1][x];
        }
    }
    // beta at segment ends (including the evidence there)
    let mut beta = vec![DMatrix::zeros(n, 1); s];
    let mut b = DMatrix::from_fn(n, 1, |x, _| ev[s][x]);
    for k in (0..s).rev() {
        beta[k] = b.clone();
        b = &prop[k] * &b;
        if k > 0 {
            for x in 0..n {
                b[(x, 0)] *= ev[k][x];
            }
        }
    }
    let z = (&alpha[0] * &prop[0] * &beta[0])[(0, 0)];
    let mut et = vec![0.0; n];
    let mut em = DMatrix::zeros(n, n);
    for k in 0..s {
        let h = bps[k + 1] - bps[k];
        for x in 0..n {
            for xp in 0..n {
                if x != xp && q[(x, xp)] == 0.0 {
                    continue;
                }
                let i = van_loan(q, x, xp, h);
                let v = (&alpha[k] * i * &beta[k])[(0, 0)] / z;
                if x == xp {
                    et[x] += v;
                } else {
                    em[(x, xp)] += q[(x, xp)] * v;
                }
            }
        }
    }
    (et, em)
}

/// `int_0^h exp(Q s) e_x e_xp^T exp(Q (h - s)) ds`.
fn van_loan(q: &DMatrix<f64>, x: usize, xp: usize, h: f64) -> DMatrix<f64> {
    let n = q.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(q);
    big.view_mut((n, n), (n, n)).copy_from(q);
    big[(x, n + xp)] = 1.0;
    let e = (big * h).exp();
    e.view((0, n), (n, n)).into_owned()
}

/// Backward message `exp(Q (b - t)) beta_b` at time `t` before the next
/// breakpoint `b`.
pub fn backward_message(q: &DMatrix<f64>, beta_b: &[f64], dt: f64) -> Vec<f64> {
    let v = (q * dt).exp() * DMatrix::from_column_slice(beta_b.len(), 1, beta_b);
    v.iter().copied().collect()
}

/// AUROC by enumerating all positive/negative pairs (ties count one half).
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut l = k;
            while l + 1 < idx.len() && v[idx[l + 1]] == v[idx[k]] {
                l += 1;
            }
            let avg = (k + l) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=l] {
                r[i] = avg;
            }
            k = l + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
