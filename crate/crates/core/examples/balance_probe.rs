// Probe: locate the drift-balanced amplitude of the radial twist toy and
// run the expansion there.
use sdde_lindstedt::expr::{con, eps, slot, ScalarExpr};
use sdde_lindstedt::fourier::TorusFourier;
use sdde_lindstedt::lindstedt::{expand_invariance, residual_order_fit, ExpandConfig};
use sdde_lindstedt::model::{DelayForm, DelaySpec, SDDEModel, Structure};
use nalgebra::DMatrix;

fn model(coupling: f64) -> SDDEModel {
    let g = 1.0;
    let beta = 0.5;
    let rr = |arg: usize| {
        con(1.0) + con(beta) * (slot(arg, 0) * slot(arg, 0) + slot(arg, 1) * slot(arg, 1))
    };
    // h = J grad G with G(x) = c (x^3/3 - x^5/5): h = (0, c (x^2 - x^4))
    let hx = con(0.0);
    let hy = con(coupling)
        * (slot(1, 0) * slot(1, 0)
            - slot(1, 0) * slot(1, 0) * slot(1, 0) * slot(1, 0));
    let fx: ScalarExpr = con(-2.0 * std::f64::consts::PI * g) * rr(0) * slot(0, 1) + eps() * hx;
    let fy: ScalarExpr = con(2.0 * std::f64::consts::PI * g) * rr(0) * slot(0, 0) + eps() * hy;
    let delay = con(0.8) + con(0.25) * slot(0, 0) + con(0.2) * slot(0, 0) * slot(0, 0);
    SDDEModel {
        n: 2, d: 1,
        form: DelayForm::ScaledDelay,
        f: vec![fx, fy],
        delays: vec![DelaySpec::Explicit(delay)],
        structure: Structure::Hamiltonian { j: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]) },
    }
}

fn seed(rho: f64, cutoff: u32) -> (TorusFourier, Vec<f64>) {
    let x = TorusFourier::cosine(1, &[1], rho, cutoff);
    let y = TorusFourier::sine(1, &[1], rho, cutoff);
    (TorusFourier::from_components(&[x, y]).unwrap(), vec![1.0 + 0.5 * rho * rho])
}

fn obstruction2(m: &SDDEModel, rho: f64) -> f64 {
    let (k0, om0) = seed(rho, 16);
    let cfg = ExpandConfig::new(2, 16);
    match expand_invariance(m, &k0, &om0, &cfg) {
        Ok(res) => res.diagnostics.obstruction_by_order.get(1).copied().unwrap_or(f64::NAN),
        Err(sdde_lindstedt::Error::Obstruction { magnitude, .. }) => magnitude,
        Err(e) => panic!("{e}"),
    }
}

fn obstruction2_signed(m: &SDDEModel, rho: f64) -> f64 {
    // signed version via the diagnostics is unsigned; use a finite eps scan
    // trick: run N=1 and evaluate the order-2 forcing's normal average sign
    // by comparing against a reference direction. For probing we bisect on
    // the unsigned value by scanning for a minimum, then check both sides.
    obstruction2(m, rho)
}

fn main() {
    let m = model(0.4);
    for i in 0..10 {
        let rho = 0.9 + 0.05 * i as f64;
        println!("rho = {:.3}: |o2| = {:.6e}", rho, obstruction2_signed(&m, rho));
    }
    // secant-style refinement on the unsigned obstruction near the dip
    let mut lo = 0.95;
    let mut hi = 1.25;
    for _ in 0..40 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if obstruction2(&m, m1) < obstruction2(&m, m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let rho_star = 0.5 * (lo + hi);
    println!("balanced amplitude rho* = {:.12} (|o2| = {:.3e})", rho_star, obstruction2(&m, rho_star));

    let (k0, om0) = seed(rho_star, 16);
    for n in [1usize, 2, 3] {
        let cfg = ExpandConfig::new(n, 16);
        match expand_invariance(&m, &k0, &om0, &cfg) {
            Ok(res) => {
                let eps_values = [1e-3, 2e-3, 4e-3, 8e-3];
                let (_rows, fit) = residual_order_fit(&m, &res, &eps_values).unwrap();
                println!(
                    "N = {}: residuals {:?} slope {:.3}",
                    n, res.residual_by_order, fit.slope
                );
            }
            Err(e) => println!("N = {}: ERROR {}", n, e),
        }
    }
}
