// Empirical probe: energy drift rate of the delayed quartic oscillator.
use sdde_lindstedt::expr::{con, eps, slot};
use sdde_lindstedt::model::{DelayForm, DelaySpec, SDDEModel, Structure};
use sdde_lindstedt::oracle::integrate_sdde;

fn main() {
    // x' = p, p' = -x - x^3 + eps * x(t - eps r), r = 1 + x^2
    let model = SDDEModel {
        n: 2,
        d: 1,
        form: DelayForm::ScaledDelay,
        f: vec![
            slot(0, 1),
            -slot(0, 0) - slot(0, 0) * slot(0, 0) * slot(0, 0) + eps() * slot(1, 0),
        ],
        delays: vec![DelaySpec::Explicit(con(1.0) + slot(0, 0) * slot(0, 0))],
        structure: Structure::Generic,
    };
    let h = |x: f64, p: f64| 0.5 * p * p + 0.5 * x * x + 0.25 * x.powi(4);
    let a = 0.8;
    for e in [0.01, 0.02, 0.04] {
        let hist = move |_t: f64| vec![a, 0.0];
        let t_end = 120.0;
        let seg = integrate_sdde(&model, e, &hist, t_end, 1e-3).unwrap();
        // least-squares slope of H(t) over a long window averages out the
        // bounded oscillatory part
        let mut pts = Vec::new();
        let mut t = 10.0;
        while t <= t_end {
            let y = seg.eval(t).unwrap();
            pts.push((t, h(y[0], y[1])));
            t += 0.05;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let rate = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        println!("eps = {:>5}: dH/dt ~ {:+.6e}  (rate/eps^2 = {:+.4e}, rate/eps^3 = {:+.4e})",
                 e, rate, rate / (e * e), rate / (e * e * e));
    }
}
