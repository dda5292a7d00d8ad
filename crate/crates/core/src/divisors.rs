//! Diophantine diagnostics and the linear solves with small divisors:
//! the plain cohomology equation `(omega . d_theta) w = g - <g>`, its
//! eigenvalue-shifted variant, Jordan chains, and the recursion for a
//! frequency given as a power series.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{l1_norm, C64, TorusFourier};
use crate::jets::{Coeff, EpsSeries};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Default floor below which a divisor magnitude aborts a solve.
pub const DEFAULT_DIVISOR_FLOOR: f64 = 1e-10;

/// Outcome of an exhaustive Diophantine scan of `|omega.k| |k|^tau` over
/// `0 < |k|_1 <= kmax`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiophantineWitness {
    pub gamma: f64,
    pub tau: f64,
    pub kmax: u32,
    pub min_product: f64,
    pub worst_k: Vec<i32>,
    pub passed: bool,
    /// Per-shell maxima of `log(1/|omega.k|) / |k|`, the quantity whose
    /// decay to zero characterizes subexponential frequencies.
    pub subexp_decay: Vec<f64>,
}

fn enumerate_modes(d: usize, kmax: u32) -> Vec<Vec<i32>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for partial in &out {
            let used: u32 = partial.iter().map(|&x: &i32| x.unsigned_abs()).sum();
            let budget = kmax - used.min(kmax);
            for k in -(budget as i32)..=(budget as i32) {
                let mut kk = partial.clone();
                kk.push(k);
                next.push(kk);
            }
        }
        out = next;
    }
    out.retain(|k| k.iter().any(|&x| x != 0));
    out
}

/// True when the first nonzero entry of `k` is positive (one representative
/// per `{k, -k}` pair).
fn canonical_sign(k: &[i32]) -> bool {
    for &x in k {
        if x != 0 {
            return x > 0;
        }
    }
    false
}

/// Exhaustive scan of the Diophantine condition `|omega.k| >= gamma |k|^-tau`
/// over `0 < |k|_1 <= kmax`.
pub fn check_diophantine(omega: &[f64], gamma: f64, tau: f64, kmax: u32) -> Result<DiophantineWitness> {
    if kmax < 1 || gamma <= 0.0 || tau <= 0.0 {
        return Err(Error::InvalidConfig(
            "diophantine scan needs kmax >= 1, gamma > 0, tau > 0".into(),
        ));
    }
    let d = omega.len();
    let mut min_product = f64::INFINITY;
    let mut worst_k = vec![0i32; d];
    let mut decay = vec![0.0f64; kmax as usize];
    for k in enumerate_modes(d, kmax) {
        if !canonical_sign(&k) {
            continue;
        }
        let norm = l1_norm(&k);
        let dot: f64 = k
            .iter()
            .zip(omega.iter())
            .map(|(&ki, &wi)| wi * ki as f64)
            .sum();
        let product = dot.abs() * (norm as f64).powf(tau);
        if product < min_product {
            min_product = product;
            worst_k = k.clone();
        }
        let shell = &mut decay[norm as usize - 1];
        let rate = if dot.abs() > 0.0 {
            (1.0 / dot.abs()).ln() / norm as f64
        } else {
            f64::INFINITY
        };
        *shell = shell.max(rate);
    }
    Ok(DiophantineWitness {
        gamma,
        tau,
        kmax,
        min_product,
        worst_k,
        passed: min_product >= gamma,
        subexp_decay: decay,
    })
}

/// Solves `(omega0 . d_theta) w = g - <g>` mode by mode, returning the
/// zero-average solution together with the average of `g` (the obstruction
/// the caller absorbs into a counterterm or requires to vanish).
pub fn solve_cohomology(
    g: &TorusFourier,
    omega0: &[f64],
    floor: f64,
) -> Result<(TorusFourier, Vec<C64>)> {
    let avg = g.average();
    let mut w = g.zero_like().into_complex();
    let mut modes: Vec<(Vec<i32>, Vec<C64>)> = Vec::with_capacity(g.mode_count());
    for (k, v) in g.modes() {
        if k.iter().all(|&x| x == 0) {
            continue;
        }
        let dot: f64 = k
            .iter()
            .zip(omega0.iter())
            .map(|(&ki, &wi)| wi * ki as f64)
            .sum();
        let divisor = Complex64::new(0.0, TWO_PI * dot);
        if divisor.norm() < floor {
            return Err(Error::NearResonance {
                k: k.clone(),
                divisor: divisor.norm(),
                floor,
                context: " in the cohomology solve".into(),
            });
        }
        modes.push((k.clone(), v.iter().map(|c| c / divisor).collect()));
    }
    for (k, v) in modes {
        w = w.add(&TorusFourier::from_modes(
            g.dim(),
            g.range_dim(),
            g.cutoff(),
            false,
            [(k, v)],
        )?)?;
    }
    if g.is_real() {
        w = w.into_real_checked(1e-10)?;
    }
    Ok((w, avg))
}

/// Solves `(omega0 . d_theta - mu) w = g` for a Diophantine-shifted
/// eigenvalue: every mode divides by `2 pi i (omega0.k) - mu`, including
/// `k = 0`.
pub fn solve_shifted(
    g: &TorusFourier,
    omega0: &[f64],
    mu: C64,
    floor: f64,
) -> Result<TorusFourier> {
    if mu.norm() == 0.0 {
        let avg_norm: f64 = g.average().iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if avg_norm > 0.0 {
            return Err(Error::UnsolvableAverage { avg_norm });
        }
    }
    let mut w = g.zero_like().into_complex();
    for (k, v) in g.modes() {
        let dot: f64 = k
            .iter()
            .zip(omega0.iter())
            .map(|(&ki, &wi)| wi * ki as f64)
            .sum();
        let divisor = Complex64::new(0.0, TWO_PI * dot) - mu;
        if divisor.norm() < floor {
            return Err(Error::NearResonance {
                k: k.clone(),
                divisor: divisor.norm(),
                floor,
                context: format!(" in the shifted solve with mu = {}", mu),
            });
        }
        w = w.add(&TorusFourier::from_modes(
            g.dim(),
            g.range_dim(),
            g.cutoff(),
            false,
            [(k.clone(), v.iter().map(|c| c / divisor).collect())],
        )?)?;
    }
    if g.is_real() && mu.im == 0.0 {
        w = w.into_real_checked(1e-10)?;
    }
    Ok(w)
}

/// Verifies the first Melnikov condition `|2 pi i (omega0.k) - mu| >= floor`
/// over the retained mode range, returning the minimizing mode.
pub fn shifted_divisor_min(omega0: &[f64], mu: C64, kmax: u32) -> (f64, Vec<i32>) {
    let d = omega0.len();
    let mut best = (Complex64::new(0.0, 0.0) - mu).norm();
    let mut best_k = vec![0i32; d];
    for k in enumerate_modes(d, kmax) {
        let dot: f64 = k
            .iter()
            .zip(omega0.iter())
            .map(|(&ki, &wi)| wi * ki as f64)
            .sum();
        let div = (Complex64::new(0.0, TWO_PI * dot) - mu).norm();
        if div < best {
            best = div;
            best_k = k;
        }
    }
    (best, best_k)
}

/// Solves the Jordan-chain system
/// `omega0.d_theta w^i - lambda w^i - w^{i+1} - ... - w^m = g^i`,
/// recursively from `i = m` downwards.
pub fn solve_jordan_chain(
    gs: &[TorusFourier],
    omega0: &[f64],
    lambda: C64,
    floor: f64,
) -> Result<Vec<TorusFourier>> {
    let m = gs.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut ws: Vec<TorusFourier> = vec![gs[0].zero_like(); m];
    for i in (0..m).rev() {
        let mut rhs = gs[i].clone();
        for w in ws.iter().take(m).skip(i + 1) {
            rhs = rhs.add(w)?;
        }
        ws[i] = solve_shifted(&rhs, omega0, lambda, floor).map_err(|e| match e {
            Error::NearResonance {
                k,
                divisor,
                floor,
                context,
            } => Error::NearResonance {
                k,
                divisor,
                floor,
                context: format!("{} (chain index {})", context, i + 1),
            },
            other => other,
        })?;
    }
    Ok(ws)
}

/// Per-order solution of `(omega(eps) . d_theta) phi = eta` for a
/// series-valued frequency: order `n` solves
/// `omega_0 . d_theta phi_n = eta_n - sum_{j=1..n} omega_j . d_theta phi_{n-j}`
/// with zero-average normalization; the returned counterterms collect the
/// per-order averages that must vanish (or be absorbed) for solvability.
pub fn solve_cohomology_eps(
    eta: &EpsSeries<TorusFourier>,
    omega: &EpsSeries<Vec<f64>>,
    floor: f64,
) -> Result<(EpsSeries<TorusFourier>, EpsSeries<Vec<C64>>)> {
    let order = eta.order().min(omega.order());
    let mut phis: Vec<TorusFourier> = Vec::with_capacity(order + 1);
    let mut counterterms: Vec<Vec<C64>> = Vec::with_capacity(order + 1);
    for n in 0..=order {
        let mut rhs = eta.term(n).clone();
        for j in 1..=n {
            rhs = rhs.sub(&phis[n - j].deriv_dir(omega.term(j))?)?;
        }
        let (phi_n, avg) = solve_cohomology(&rhs, omega.term(0), floor).map_err(|e| match e {
            Error::NearResonance {
                k,
                divisor,
                floor,
                context,
            } => Error::NearResonance {
                k,
                divisor,
                floor,
                context: format!("{} (series order {})", context, n),
            },
            other => other,
        })?;
        phis.push(phi_n);
        counterterms.push(avg);
    }
    Ok((EpsSeries::from_terms(phis), EpsSeries::from_terms(counterterms)))
}
