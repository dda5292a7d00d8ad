//! Independent verification: direct numerical integration of the delay
//! models (classical fixed-step fourth-order stepping with cubic dense
//! output and method-of-steps history) and least-squares order fitting of
//! residual scans.

use crate::error::{Error, Result};
use crate::expr::{eval_expr, eval_field, NumericCtx};
use crate::model::{DelayForm, DelaySpec, SDDEModel};

/// Dense trajectory storage on a uniform grid with cubic Hermite
/// interpolation between knots.
#[derive(Debug, Clone)]
pub struct HistorySegment {
    t0: f64,
    dt: f64,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
}

impl HistorySegment {
    pub fn new(t0: f64, dt: f64, y0: Vec<f64>, dy0: Vec<f64>) -> Self {
        HistorySegment {
            t0,
            dt,
            states: vec![y0],
            derivs: vec![dy0],
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt * (self.states.len() - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn push(&mut self, y: Vec<f64>, dy: Vec<f64>) {
        self.states.push(y);
        self.derivs.push(dy);
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, &Vec<f64>)> {
        self.states
            .iter()
            .enumerate()
            .map(move |(i, y)| (self.t0 + self.dt * i as f64, y))
    }

    pub fn last_state(&self) -> &Vec<f64> {
        self.states.last().unwrap()
    }

    fn hermite(&self, cell: usize, t: f64) -> Vec<f64> {
        let tl = self.t0 + self.dt * cell as f64;
        let x = (t - tl) / self.dt;
        let h00 = (1.0 + 2.0 * x) * (1.0 - x) * (1.0 - x);
        let h10 = x * (1.0 - x) * (1.0 - x);
        let h01 = x * x * (3.0 - 2.0 * x);
        let h11 = x * x * (x - 1.0);
        let (ya, yb) = (&self.states[cell], &self.states[cell + 1]);
        let (da, db) = (&self.derivs[cell], &self.derivs[cell + 1]);
        (0..ya.len())
            .map(|i| h00 * ya[i] + h10 * self.dt * da[i] + h01 * yb[i] + h11 * self.dt * db[i])
            .collect()
    }

    /// Interpolated state; errors outside the stored range.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let slack = 1e-9 * self.dt;
        if t < self.t0 - slack || t > self.t1() + slack {
            return Err(Error::InsufficientHistory {
                t,
                t0: self.t0,
                t1: self.t1(),
            });
        }
        if self.states.len() == 1 {
            return Ok(self.states[0].clone());
        }
        let raw = ((t - self.t0) / self.dt).floor();
        let cell = (raw.max(0.0) as usize).min(self.states.len() - 2);
        Ok(self.hermite(cell, t))
    }

    /// Interpolation that extends the last cubic beyond the stored end
    /// (used only for the first pass of an in-flight step).
    fn eval_extrapolating(&self, t: f64) -> Result<Vec<f64>> {
        if t < self.t0 - 1e-9 * self.dt {
            return Err(Error::InsufficientHistory {
                t,
                t0: self.t0,
                t1: self.t1(),
            });
        }
        if self.states.len() == 1 {
            return Ok(self.states[0].clone());
        }
        let raw = ((t - self.t0) / self.dt).floor();
        let cell = (raw.max(0.0) as usize).min(self.states.len() - 2);
        Ok(self.hermite(cell, t))
    }
}

fn delay_lag(
    model: &SDDEModel,
    eps: f64,
    y: &[f64],
    t: f64,
    spec: &DelaySpec,
    lookup: &dyn Fn(f64) -> Result<Vec<f64>>,
) -> Result<f64> {
    match spec {
        DelaySpec::Explicit(r) => {
            let slots = vec![y.to_vec()];
            let rv = eval_expr(r, &NumericCtx { eps, slots: &slots })?;
            Ok(match model.form {
                DelayForm::ScaledDelay => eps * rv,
                DelayForm::ScaledArgument => rv,
            })
        }
        DelaySpec::Implicit(g) => {
            // damped fixed point u <- (1-w) u + w eps G(y(t), y(t-u))
            let mut u = 0.0;
            let w = 0.5;
            let mut residual = f64::INFINITY;
            for _ in 0..200 {
                let back = lookup(t - u)?;
                let slots = vec![y.to_vec(), back];
                let gv = eval_expr(g, &NumericCtx { eps, slots: &slots })?;
                let target = eps * gv;
                residual = (u - target).abs();
                u = (1.0 - w) * u + w * target;
                if residual <= 1e-12 {
                    return Ok(u);
                }
            }
            Err(Error::ImplicitDelayDivergence { residual })
        }
    }
}

/// Right-hand side with all delayed slots resolved through `lookup`.
pub fn rhs_numeric(
    model: &SDDEModel,
    eps: f64,
    t: f64,
    y: &[f64],
    lookup: &dyn Fn(f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut slots: Vec<Vec<f64>> = Vec::with_capacity(model.ell() + 1);
    slots.push(y.to_vec());
    for spec in &model.delays {
        let lag = delay_lag(model, eps, y, t, spec, lookup)?;
        let mut value = lookup(t - lag)?;
        if model.form == DelayForm::ScaledArgument {
            for v in value.iter_mut() {
                *v *= eps;
            }
        }
        slots.push(value);
    }
    eval_field(&model.f, &NumericCtx { eps, slots: &slots })
}

/// Integrates the delay model from `t = 0` to `t_end` with fixed-step
/// classical fourth-order stepping and cubic dense output.  `history`
/// provides the state for `t <= 0`; in-step lookbacks are served by a
/// bootstrap pass over the freshly built interpolant.
pub fn integrate_sdde(
    model: &SDDEModel,
    eps: f64,
    history: &dyn Fn(f64) -> Vec<f64>,
    t_end: f64,
    dt: f64,
) -> Result<HistorySegment> {
    if dt <= 0.0 || t_end <= 0.0 {
        return Err(Error::InvalidConfig("need positive step and horizon".into()));
    }
    let n_steps = (t_end / dt).ceil().max(1.0) as usize;
    let dt = t_end / n_steps as f64;

    let y0 = history(0.0);
    let lookup_init = |t: f64| -> Result<Vec<f64>> { Ok(history(t)) };
    let dy0 = rhs_numeric(model, eps, 0.0, &y0, &lookup_init)?;
    let mut seg = HistorySegment::new(0.0, dt, y0, dy0);

    for step in 0..n_steps {
        let t = step as f64 * dt;
        let y = seg.last_state().clone();

        // pass 1 extends the stored cubic into the step; pass 2 replays the
        // step against the interpolant built from the pass-1 endpoint.
        let mut endpoint: Option<(Vec<f64>, Vec<f64>)> = None;
        for _pass in 0..2 {
            let trial = endpoint.clone();
            let seg_ref = &seg;
            let lookup = move |tq: f64| -> Result<Vec<f64>> {
                if tq <= 0.0 {
                    return Ok(history(tq));
                }
                if let Some((ye, de)) = &trial {
                    if tq > seg_ref.t1() {
                        // Hermite over the in-flight cell
                        let mut ext = seg_ref.clone();
                        ext.push(ye.clone(), de.clone());
                        return ext.eval(tq.min(ext.t1()));
                    }
                }
                seg_ref.eval_extrapolating(tq)
            };
            let k1 = rhs_numeric(model, eps, t, &y, &lookup)?;
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k2 = rhs_numeric(model, eps, t + 0.5 * dt, &y2, &lookup)?;
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k3 = rhs_numeric(model, eps, t + 0.5 * dt, &y3, &lookup)?;
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
            let k4 = rhs_numeric(model, eps, t + dt, &y4, &lookup)?;
            let ynew: Vec<f64> = (0..y.len())
                .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect();
            let lookup2 = |tq: f64| -> Result<Vec<f64>> {
                if tq <= 0.0 {
                    Ok(history(tq))
                } else {
                    seg.eval_extrapolating(tq)
                }
            };
            let dynew = rhs_numeric(model, eps, t + dt, &ynew, &lookup2)?;
            endpoint = Some((ynew, dynew));
        }
        let (ynew, _) = endpoint.clone().unwrap();
        // recompute the endpoint derivative against the completed segment
        seg.push(ynew.clone(), vec![0.0; ynew.len()]);
        let lookup3 = |tq: f64| -> Result<Vec<f64>> {
            if tq <= 0.0 {
                Ok(history(tq))
            } else {
                seg.eval(tq.min(seg.t1()))
            }
        };
        let dynew = rhs_numeric(model, eps, t + dt, &ynew, &lookup3)?;
        let last = seg.derivs.len() - 1;
        seg.derivs[last] = dynew;
    }
    Ok(seg)
}

/// Sup distance over `[0, t_end]` between a reference trajectory (e.g. a
/// summed truncated expansion, which also provides the pre-history) and the
/// direct integration of the model.
pub fn compare_trajectory(
    model: &SDDEModel,
    eps: f64,
    reference: &dyn Fn(f64) -> Vec<f64>,
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    let seg = integrate_sdde(model, eps, reference, t_end, dt)?;
    let mut sup: f64 = 0.0;
    for (t, y) in seg.knots() {
        let r = reference(t);
        let dist = y
            .iter()
            .zip(r.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        sup = sup.max(dist);
    }
    Ok(sup)
}

/// Least-squares line through `(log eps, log defect)`.
#[derive(Debug, Clone, Copy)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_deviation: f64,
}

pub fn fit_order(samples: &[(f64, f64)]) -> Result<OrderFit> {
    if samples.len() < 3 {
        return Err(Error::DegenerateSample(format!(
            "order fit needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    for &(e, d) in samples {
        if e <= 0.0 || d <= 0.0 {
            return Err(Error::DegenerateSample(format!(
                "order fit needs positive samples, got ({e}, {d})"
            )));
        }
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(e, d)| (e.ln(), d.ln())).collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::DegenerateSample("order fit needs distinct eps".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let max_deviation = pts
        .iter()
        .map(|&(x, y)| (y - slope * x - intercept).abs())
        .fold(0.0, f64::max);
    Ok(OrderFit {
        slope,
        intercept,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{con, eps as eps_expr, slot};
    use crate::model::Structure;
    use approx::assert_relative_eq;

    fn decay_model() -> SDDEModel {
        // y' = -y, no delay
        SDDEModel {
            n: 1,
            d: 1,
            form: DelayForm::ScaledDelay,
            f: vec![-slot(0, 0)],
            delays: vec![],
            structure: Structure::Generic,
        }
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let model = decay_model();
        let seg = integrate_sdde(&model, 0.0, &|_t| vec![1.0], 1.0, 1e-3).unwrap();
        let y1 = seg.eval(1.0).unwrap()[0];
        assert!((y1 - (-1.0f64).exp()).abs() < 1e-8, "y(1) = {}", y1);
    }

    #[test]
    fn constant_delay_method_of_steps() {
        // y'(t) = -y(t-1), history 1: y = 1 - t on [0,1],
        // then 1 - t + (t-1)^2/2 on [1,2]
        let model = SDDEModel {
            n: 1,
            d: 1,
            form: DelayForm::ScaledArgument,
            f: vec![-slot(1, 0)],
            delays: vec![DelaySpec::Explicit(con(1.0))],
            structure: Structure::Generic,
        };
        // scaled-argument form with eps = 1 gives y' = -y(t-1)
        let seg = integrate_sdde(&model, 1.0, &|_t| vec![1.0], 2.0, 1e-3).unwrap();
        for t in [0.25, 0.5, 0.75, 1.0] {
            let expect = 1.0 - t;
            assert!((seg.eval(t).unwrap()[0] - expect).abs() < 1e-8);
        }
        for t in [1.25, 1.5, 1.75, 2.0f64] {
            let expect = 1.0 - t + (t - 1.0) * (t - 1.0) / 2.0;
            assert!((seg.eval(t).unwrap()[0] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn integrator_order_is_four() {
        // dt-scan on a smooth problem: global error ~ dt^4
        let model = decay_model();
        let mut samples = Vec::new();
        for dt in [2e-2, 1e-2, 5e-3, 2.5e-3] {
            let seg = integrate_sdde(&model, 0.0, &|_t| vec![1.0], 1.0, dt).unwrap();
            let err = (seg.eval(1.0).unwrap()[0] - (-1.0f64).exp()).abs();
            samples.push((dt, err));
        }
        let fit = fit_order(&samples).unwrap();
        assert!(
            (fit.slope - 4.0).abs() < 0.2,
            "integrator order slope {}",
            fit.slope
        );
    }

    #[test]
    fn richardson_self_consistency_on_delay_model() {
        // step halving on a state-dependent delay model behaves like a
        // fourth-order method
        let model = SDDEModel {
            n: 1,
            d: 1,
            form: DelayForm::ScaledDelay,
            f: vec![-slot(0, 0) + eps_expr() * slot(1, 0)],
            delays: vec![DelaySpec::Explicit(
                con(1.0) + slot(0, 0) * slot(0, 0),
            )],
            structure: Structure::Generic,
        };
        let eps = 0.05;
        // warm up: an incompatible history kink at t = 0 smooths out after
        // many delay generations, leaving a smooth segment to restart from
        let rough = |t: f64| vec![(0.3 * t).cos() + 0.5];
        let warm = integrate_sdde(&model, eps, &rough, 6.0, 1e-3).unwrap();
        let t_restart = 5.0;
        let hist = move |t: f64| warm.eval(t_restart + t).unwrap();
        let run = |dt: f64| {
            integrate_sdde(&model, eps, &hist, 1.0, dt)
                .unwrap()
                .eval(1.0)
                .unwrap()[0]
        };
        let a = run(4e-3);
        let b = run(2e-3);
        let c = run(1e-3);
        let ratio = (a - b).abs() / (b - c).abs();
        assert!(
            (ratio - 16.0).abs() < 6.0,
            "step-halving ratio {} not consistent with order 4",
            ratio
        );
    }

    #[test]
    fn dense_output_matches_knots() {
        let model = decay_model();
        let seg = integrate_sdde(&model, 0.0, &|_t| vec![1.0], 0.5, 1e-2).unwrap();
        for (t, y) in seg.knots() {
            let interp = seg.eval(t).unwrap();
            assert_eq!(&interp, y);
        }
    }

    #[test]
    fn implicit_delay_satisfies_defining_relation() {
        // lag u = eps * (1 + 0.2 y(t-u)^2)
        let model = SDDEModel {
            n: 1,
            d: 1,
            form: DelayForm::ScaledDelay,
            f: vec![-slot(0, 0) + eps_expr() * slot(1, 0)],
            delays: vec![DelaySpec::Implicit(
                con(1.0) + con(0.2) * slot(1, 0) * slot(1, 0),
            )],
            structure: Structure::Generic,
        };
        let eps = 0.1;
        let hist = |t: f64| vec![(0.4 * t).cos()];
        let seg = integrate_sdde(&model, eps, &hist, 1.0, 1e-2).unwrap();
        // spot-check the per-step lag equation at a few times
        let lookup = |tq: f64| -> Result<Vec<f64>> {
            if tq <= 0.0 {
                Ok(hist(tq))
            } else {
                seg.eval(tq)
            }
        };
        for t in [0.3, 0.6, 0.9] {
            let y = seg.eval(t).unwrap();
            let spec = &model.delays[0];
            let u = delay_lag(&model, eps, &y, t, spec, &lookup).unwrap();
            let back = lookup(t - u).unwrap();
            let g = 1.0 + 0.2 * back[0] * back[0];
            assert!((u - eps * g).abs() <= 1e-12);
        }
    }

    #[test]
    fn compare_trajectory_zero_for_exact_solution() {
        let model = decay_model();
        let reference = |t: f64| vec![(-t).exp()];
        let sup = compare_trajectory(&model, 0.0, &reference, 1.0, 1e-3).unwrap();
        assert!(sup < 1e-8, "sup distance {}", sup);
    }

    #[test]
    fn fit_order_examples() {
        // constructed quartic data: slope 4, intercept log 3, deviation 0
        let samples: Vec<(f64, f64)> = [1e-3, 2e-3, 4e-3, 8e-3]
            .iter()
            .map(|&e: &f64| (e, 3.0 * e.powi(4)))
            .collect();
        let fit = fit_order(&samples).unwrap();
        assert_relative_eq!(fit.slope, 4.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 3.0f64.ln(), epsilon = 1e-10);
        assert!(fit.max_deviation < 1e-12);

        // constant samples: slope 0
        let flat: Vec<(f64, f64)> = [1e-3, 2e-3, 4e-3].iter().map(|&e| (e, 0.7)).collect();
        assert_relative_eq!(fit_order(&flat).unwrap().slope, 0.0, epsilon = 1e-12);

        // 5% multiplicative noise keeps the slope within 4 +- 0.1
        let mut noisy = Vec::new();
        let mut sign = 1.0;
        for &e in &[1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2] {
            let e: f64 = e;
            noisy.push((e, e.powi(4) * (1.0 + 0.05 * sign)));
            sign = -sign;
        }
        let fit = fit_order(&noisy).unwrap();
        assert!((fit.slope - 4.0).abs() < 0.1, "noisy slope {}", fit.slope);

        // degenerate inputs rejected
        assert!(fit_order(&[(1e-3, 1.0), (2e-3, 2.0)]).is_err());
        assert!(fit_order(&[(1e-3, 0.0), (2e-3, 1.0), (4e-3, 1.0)]).is_err());
    }
}
