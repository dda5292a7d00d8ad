//! Expression trees for model vector fields and delay maps.
//!
//! A model is written once as a tree over its state slots and the
//! perturbation parameter; the same tree evaluates over plain numbers (for
//! direct integration), torus-series jets (for the invariance expansion)
//! and Fourier–Taylor jets (for the limit-cycle iteration).  This keeps the
//! series drivers and the verification oracle reading one definition.

use crate::error::{Error, Result};
use crate::jets::{AlgebraCtx, AnalyticMap, CoeffAlgebra, EpsSeries};

/// Scalar-valued expression over `ell + 1` state slots and the parameter.
#[derive(Debug, Clone)]
pub enum ScalarExpr {
    Const(f64),
    /// The perturbation parameter.
    Eps,
    /// Component `comp` of state slot `arg` (0 = current state, `j >= 1` =
    /// j-th delayed state).
    Slot { arg: usize, comp: usize },
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Neg(Box<ScalarExpr>),
    Recip(Box<ScalarExpr>),
    Sqrt(Box<ScalarExpr>),
    Exp(Box<ScalarExpr>),
    Sin(Box<ScalarExpr>),
    Cos(Box<ScalarExpr>),
    PowI(Box<ScalarExpr>, u32),
    /// `sqrt(x^2)`: absolute value composed with a smooth positive argument.
    AbsSmooth(Box<ScalarExpr>),
}

pub fn con(c: f64) -> ScalarExpr {
    ScalarExpr::Const(c)
}

pub fn eps() -> ScalarExpr {
    ScalarExpr::Eps
}

pub fn slot(arg: usize, comp: usize) -> ScalarExpr {
    ScalarExpr::Slot { arg, comp }
}

pub fn powi(e: ScalarExpr, p: u32) -> ScalarExpr {
    ScalarExpr::PowI(Box::new(e), p)
}

pub fn recip(e: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Recip(Box::new(e))
}

pub fn sqrt(e: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Sqrt(Box::new(e))
}

pub fn abs_smooth(e: ScalarExpr) -> ScalarExpr {
    ScalarExpr::AbsSmooth(Box::new(e))
}

impl std::ops::Add for ScalarExpr {
    type Output = ScalarExpr;
    fn add(self, rhs: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Add(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Sub for ScalarExpr {
    type Output = ScalarExpr;
    fn sub(self, rhs: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Sub(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Mul for ScalarExpr {
    type Output = ScalarExpr;
    fn mul(self, rhs: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Mul(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Neg for ScalarExpr {
    type Output = ScalarExpr;
    fn neg(self) -> ScalarExpr {
        ScalarExpr::Neg(Box::new(self))
    }
}

/// Evaluation context: supplies slot values and the arithmetic.
pub trait EvalContext {
    type Value: Clone;
    fn constant(&self, c: f64) -> Self::Value;
    fn eps(&self) -> Self::Value;
    fn slot(&self, arg: usize, comp: usize) -> Result<Self::Value>;
    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn neg(&self, a: &Self::Value) -> Result<Self::Value>;
    fn apply(&self, phi: AnalyticMap, a: &Self::Value) -> Result<Self::Value>;
    fn powi(&self, a: &Self::Value, p: u32) -> Result<Self::Value>;
}

pub fn eval_expr<Ctx: EvalContext>(e: &ScalarExpr, ctx: &Ctx) -> Result<Ctx::Value> {
    match e {
        ScalarExpr::Const(c) => Ok(ctx.constant(*c)),
        ScalarExpr::Eps => Ok(ctx.eps()),
        ScalarExpr::Slot { arg, comp } => ctx.slot(*arg, *comp),
        ScalarExpr::Add(a, b) => ctx.add(&eval_expr(a, ctx)?, &eval_expr(b, ctx)?),
        ScalarExpr::Sub(a, b) => ctx.sub(&eval_expr(a, ctx)?, &eval_expr(b, ctx)?),
        ScalarExpr::Mul(a, b) => ctx.mul(&eval_expr(a, ctx)?, &eval_expr(b, ctx)?),
        ScalarExpr::Neg(a) => ctx.neg(&eval_expr(a, ctx)?),
        ScalarExpr::Recip(a) => ctx.apply(AnalyticMap::Recip, &eval_expr(a, ctx)?),
        ScalarExpr::Sqrt(a) => ctx.apply(AnalyticMap::Sqrt, &eval_expr(a, ctx)?),
        ScalarExpr::Exp(a) => ctx.apply(AnalyticMap::Exp, &eval_expr(a, ctx)?),
        ScalarExpr::Sin(a) => ctx.apply(AnalyticMap::Sin, &eval_expr(a, ctx)?),
        ScalarExpr::Cos(a) => ctx.apply(AnalyticMap::Cos, &eval_expr(a, ctx)?),
        ScalarExpr::PowI(a, p) => {
            let v = eval_expr(a, ctx)?;
            ctx.powi(&v, *p)
        }
        ScalarExpr::AbsSmooth(a) => {
            let v = eval_expr(a, ctx)?;
            let sq = ctx.mul(&v, &v)?;
            ctx.apply(AnalyticMap::Sqrt, &sq)
        }
    }
}

pub fn eval_field<Ctx: EvalContext>(f: &[ScalarExpr], ctx: &Ctx) -> Result<Vec<Ctx::Value>> {
    f.iter().map(|e| eval_expr(e, ctx)).collect()
}

// ---- plain numeric evaluation --------------------------------------------------

/// Evaluates over `f64` with explicit slot values (used by the integrator
/// and the pointwise residual scans).
pub struct NumericCtx<'a> {
    pub eps: f64,
    pub slots: &'a [Vec<f64>],
}

impl EvalContext for NumericCtx<'_> {
    type Value = f64;
    fn constant(&self, c: f64) -> f64 {
        c
    }
    fn eps(&self) -> f64 {
        self.eps
    }
    fn slot(&self, arg: usize, comp: usize) -> Result<f64> {
        self.slots
            .get(arg)
            .and_then(|s| s.get(comp))
            .copied()
            .ok_or_else(|| Error::ShapeMismatch(format!("slot ({}, {}) out of range", arg, comp)))
    }
    fn add(&self, a: &f64, b: &f64) -> Result<f64> {
        Ok(a + b)
    }
    fn sub(&self, a: &f64, b: &f64) -> Result<f64> {
        Ok(a - b)
    }
    fn mul(&self, a: &f64, b: &f64) -> Result<f64> {
        Ok(a * b)
    }
    fn neg(&self, a: &f64) -> Result<f64> {
        Ok(-a)
    }
    fn apply(&self, phi: AnalyticMap, a: &f64) -> Result<f64> {
        let v = phi.apply_f64(*a);
        if !v.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite value from {:?} at {}",
                phi, a
            )));
        }
        Ok(v)
    }
    fn powi(&self, a: &f64, p: u32) -> Result<f64> {
        Ok(a.powi(p as i32))
    }
}

// ---- jet evaluation -------------------------------------------------------------

/// Evaluates over truncated series in the perturbation parameter, with
/// coefficients in any scalar algebra (torus series, Fourier–Taylor
/// polynomials, plain numbers).
pub struct JetCtx<'a, C: CoeffAlgebra> {
    pub slots: &'a [Vec<EpsSeries<C>>],
    pub actx: &'a AlgebraCtx,
    /// Prototype zero of the coefficient space (fixes shapes of constants).
    pub proto: C,
    /// Value of the parameter as a series (the identity series for the
    /// expansion drivers; a constant for frozen-parameter evaluations).
    pub eps_value: EpsSeries<C>,
}

impl<C: CoeffAlgebra> JetCtx<'_, C> {
    fn order(&self) -> usize {
        self.eps_value.order()
    }
}

impl<C: CoeffAlgebra> EvalContext for JetCtx<'_, C> {
    type Value = EpsSeries<C>;
    fn constant(&self, c: f64) -> EpsSeries<C> {
        EpsSeries::constant(self.proto.one_like().scale(c), self.order())
    }
    fn eps(&self) -> EpsSeries<C> {
        self.eps_value.clone()
    }
    fn slot(&self, arg: usize, comp: usize) -> Result<EpsSeries<C>> {
        self.slots
            .get(arg)
            .and_then(|s| s.get(comp))
            .cloned()
            .ok_or_else(|| Error::ShapeMismatch(format!("slot ({}, {}) out of range", arg, comp)))
    }
    fn add(&self, a: &EpsSeries<C>, b: &EpsSeries<C>) -> Result<EpsSeries<C>> {
        a.add(b)
    }
    fn sub(&self, a: &EpsSeries<C>, b: &EpsSeries<C>) -> Result<EpsSeries<C>> {
        a.sub(b)
    }
    fn mul(&self, a: &EpsSeries<C>, b: &EpsSeries<C>) -> Result<EpsSeries<C>> {
        a.mul(b, self.actx)
    }
    fn neg(&self, a: &EpsSeries<C>) -> Result<EpsSeries<C>> {
        Ok(a.neg())
    }
    fn apply(&self, phi: AnalyticMap, a: &EpsSeries<C>) -> Result<EpsSeries<C>> {
        a.apply(phi, self.actx)
    }
    fn powi(&self, a: &EpsSeries<C>, p: u32) -> Result<EpsSeries<C>> {
        a.powi(p, self.actx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn numeric_matches_jet_at_small_eps() {
        // f(y, eps) = y0^3 - eps * sin(y1) + 1 / sqrt(y0^2)
        let f = powi(slot(0, 0), 3) - eps() * ScalarExpr::Sin(Box::new(slot(0, 1)))
            + recip(sqrt(powi(slot(0, 0), 2)));
        let y = vec![vec![1.3, 0.4]];
        let e = 1e-3;
        let nctx = NumericCtx { eps: e, slots: &y };
        let direct = eval_expr(&f, &nctx).unwrap();

        let actx = AlgebraCtx::new(8);
        let order = 4;
        let proto = 0.0f64;
        let jets = vec![vec![
            EpsSeries::constant(1.3, order),
            EpsSeries::constant(0.4, order),
        ]];
        let jctx = JetCtx {
            slots: &jets,
            actx: &actx,
            proto,
            eps_value: EpsSeries::eps(&proto, order),
        };
        let series = eval_expr(&f, &jctx).unwrap();
        let summed: f64 = series
            .terms()
            .iter()
            .enumerate()
            .map(|(j, c)| c * e.powi(j as i32))
            .sum();
        assert_relative_eq!(direct, summed, epsilon = 1e-12);
    }

    #[test]
    fn abs_smooth_equals_abs() {
        let f = abs_smooth(slot(0, 0) - slot(0, 1));
        let y = vec![vec![0.2, 0.9]];
        let nctx = NumericCtx { eps: 0.0, slots: &y };
        assert_relative_eq!(eval_expr(&f, &nctx).unwrap(), 0.7, epsilon = 1e-15);
    }
}
