//! Entropy floor for distributions that keep at least `eps` mass on each of
//! `k` designated outputs while concentrating on some other output.
//!
//! Outputs `0..k` are the designated ones. The constraint set is: every
//! designated output has probability at least `eps`, and some non-designated
//! output is at least as likely as every designated one.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn check(eps: f64, k: usize, v: usize) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(contract(format!("eps={eps} must lie in (0, 1)")));
    }
    if k as f64 * eps >= 1.0 {
        return Err(contract(format!("k*eps = {} must be < 1", k as f64 * eps)));
    }
    if v <= k {
        return Err(contract(format!("need at least one non-designated output (V={v}, k={k})")));
    }
    Ok(())
}

/// `H_min = -(1 - k eps) ln(1 - k eps) - k eps ln eps`.
pub fn entropy_floor(eps: f64, k: usize, v: usize) -> Result<f64> {
    check(eps, k, v)?;
    if k == 0 {
        return Ok(0.0);
    }
    let m = k as f64 * eps;
    Ok(-(1.0 - m) * (1.0 - m).ln() - m * eps.ln())
}

/// The distribution attaining [`entropy_floor`]: `eps` on each designated
/// output and the residual on output `k`.
pub fn constrained_entropy_min_candidate(eps: f64, k: usize, v: usize) -> Result<Vec<f64>> {
    check(eps, k, v)?;
    let mut p = vec![0.0; v];
    p[..k].iter_mut().for_each(|x| *x = eps);
    p[k] = 1.0 - k as f64 * eps;
    Ok(p)
}

pub fn satisfies_floor_constraint(p: &[f64], eps: f64, k: usize) -> bool {
    if p.len() <= k || p.iter().any(|&x| x.is_nan() || x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return false;
    }
    let top_designated = p[..k].iter().copied().fold(0.0, f64::max);
    let top_other = p[k..].iter().copied().fold(0.0, f64::max);
    p[..k].iter().all(|&x| x >= eps) && top_other >= top_designated
}

/// Draws a distribution from the constraint set: `eps` on each designated
/// output plus a sparse Dirichlet share of the remaining mass, rejected until
/// the dominance condition holds.
pub fn sample_constrained(eps: f64, k: usize, v: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check(eps, k, v)?;
    let free = 1.0 - k as f64 * eps;
    loop {
        let alpha: f64 = rng.random_range(0.05..2.0);
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| contract(e.to_string()))?;
        let q: Vec<f64> = (0..v).map(|_| gamma.sample(rng)).collect();
        let z: f64 = q.iter().sum();
        if z.is_nan() || z <= 0.0 {
            continue;
        }
        let mut p: Vec<f64> = q.iter().map(|x| free * x / z).collect();
        p[..k].iter_mut().for_each(|x| *x += eps);
        if satisfies_floor_constraint(&p, eps, k) {
            return Ok(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub denominator: usize,
    pub n_points: u64,
    pub n_feasible: u64,
    pub min_entropy: f64,
    pub argmin: Vec<f64>,
}

/// Exhaustive search over the simplex lattice `{c / n : sum c = n}`.
pub fn grid_min_entropy(eps: f64, k: usize, v: usize, n: usize) -> Result<GridSearch> {
    check(eps, k, v)?;
    if n == 0 {
        return Err(contract("grid denominator must be positive"));
    }
    let lo = eps * n as f64 - 1e-9;
    let logs: Vec<f64> = (0..=n)
        .map(|c| {
            if c == 0 {
                0.0
            } else {
                let x = c as f64 / n as f64;
                -x * x.ln()
            }
        })
        .collect();
    let mut best = GridSearch { denominator: n, n_points: 0, n_feasible: 0, min_entropy: f64::INFINITY, argmin: Vec::new() };
    let mut c = vec![0usize; v];
    compositions(&mut c, 0, n, &mut |c| {
        best.n_points += 1;
        let top_d = c[..k].iter().copied().max().unwrap_or(0);
        let top_o = c[k..].iter().copied().max().unwrap_or(0);
        if c[..k].iter().any(|&x| (x as f64) < lo) || top_o < top_d {
            return;
        }
        best.n_feasible += 1;
        let h: f64 = c.iter().map(|&x| logs[x]).sum();
        if h < best.min_entropy {
            best.min_entropy = h;
            best.argmin = c.iter().map(|&x| x as f64 / n as f64).collect();
        }
    });
    Ok(best)
}

fn compositions(c: &mut [usize], i: usize, left: usize, f: &mut impl FnMut(&[usize])) {
    if i + 1 == c.len() {
        c[i] = left;
        f(c);
        return;
    }
    for x in 0..=left {
        c[i] = x;
        compositions(c, i + 1, left - x, f);
    }
}
