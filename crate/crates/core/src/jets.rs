//! Truncated formal power series in the perturbation parameter over generic
//! coefficient spaces: scalars, vectors, torus Fourier series and
//! Fourier–Taylor polynomials.
//!
//! The same Cauchy-product and analytic-composition recurrences drive every
//! space; a coefficient space only has to say how to add, scale, multiply
//! and apply an analytic map to an order-0 value.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{C64, TorusFourier};

/// Shared knobs for truncated-algebra operations.
#[derive(Debug)]
pub struct AlgebraCtx {
    /// Cap on `|k|_1` for convolution products of torus series.
    pub product_cutoff: u32,
    /// Grid oversampling factor for pointwise analytic maps.
    pub oversample: usize,
    /// Floor on the order-0 magnitude for reciprocal / square-root jets.
    pub singular_floor: f64,
    /// Count of Fourier–Taylor coefficients dropped by s-degree truncation.
    pub s_overflow: AtomicU64,
}

impl AlgebraCtx {
    pub fn new(product_cutoff: u32) -> Self {
        AlgebraCtx {
            product_cutoff,
            oversample: 2,
            singular_floor: 1e-6,
            s_overflow: AtomicU64::new(0),
        }
    }

    pub fn note_s_overflow(&self, count: u64) {
        self.s_overflow.fetch_add(count, Ordering::Relaxed);
    }

    pub fn s_overflow_count(&self) -> u64 {
        self.s_overflow.load(Ordering::Relaxed)
    }
}

impl Clone for AlgebraCtx {
    fn clone(&self) -> Self {
        AlgebraCtx {
            product_cutoff: self.product_cutoff,
            oversample: self.oversample,
            singular_floor: self.singular_floor,
            s_overflow: AtomicU64::new(self.s_overflow_count()),
        }
    }
}

/// Analytic scalar maps supported by jet composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticMap {
    Exp,
    Sin,
    Cos,
    Recip,
    Sqrt,
}

impl AnalyticMap {
    pub fn apply_f64(self, x: f64) -> f64 {
        match self {
            AnalyticMap::Exp => x.exp(),
            AnalyticMap::Sin => x.sin(),
            AnalyticMap::Cos => x.cos(),
            AnalyticMap::Recip => 1.0 / x,
            AnalyticMap::Sqrt => x.sqrt(),
        }
    }
}

/// A coefficient space: a vector space with a norm.
pub trait Coeff: Clone + std::fmt::Debug {
    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    fn neg(&self) -> Self;
    fn scale(&self, s: f64) -> Self;
    fn zero_like(&self) -> Self;
    fn norm(&self) -> f64;
}

/// A commutative coefficient algebra supporting analytic maps of order-0
/// values (scalar spaces and scalar-valued function spaces).
pub trait CoeffAlgebra: Coeff {
    fn mul(&self, rhs: &Self, ctx: &AlgebraCtx) -> Result<Self>;
    fn one_like(&self) -> Self;
    /// Applies the analytic map to this value (the order-0 coefficient).
    fn apply_order0(&self, phi: AnalyticMap, ctx: &AlgebraCtx) -> Result<Self>;
    /// Smallest magnitude attained by this value over its domain.
    fn min_abs(&self, ctx: &AlgebraCtx) -> f64;
}

// ---- scalar spaces ----------------------------------------------------------

impl Coeff for f64 {
    fn add(&self, rhs: &Self) -> Result<Self> {
        Ok(self + rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Ok(self - rhs)
    }
    fn neg(&self) -> Self {
        -self
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn zero_like(&self) -> Self {
        0.0
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
}

impl CoeffAlgebra for f64 {
    fn mul(&self, rhs: &Self, _ctx: &AlgebraCtx) -> Result<Self> {
        Ok(self * rhs)
    }
    fn one_like(&self) -> Self {
        1.0
    }
    fn apply_order0(&self, phi: AnalyticMap, _ctx: &AlgebraCtx) -> Result<Self> {
        Ok(phi.apply_f64(*self))
    }
    fn min_abs(&self, _ctx: &AlgebraCtx) -> f64 {
        self.abs()
    }
}

impl Coeff for Complex64 {
    fn add(&self, rhs: &Self) -> Result<Self> {
        Ok(self + rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Ok(self - rhs)
    }
    fn neg(&self) -> Self {
        -self
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn zero_like(&self) -> Self {
        Complex64::default()
    }
    fn norm(&self) -> f64 {
        num_complex::Complex::norm(*self)
    }
}

impl CoeffAlgebra for Complex64 {
    fn mul(&self, rhs: &Self, _ctx: &AlgebraCtx) -> Result<Self> {
        Ok(self * rhs)
    }
    fn one_like(&self) -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn apply_order0(&self, phi: AnalyticMap, _ctx: &AlgebraCtx) -> Result<Self> {
        Ok(match phi {
            AnalyticMap::Exp => self.exp(),
            AnalyticMap::Sin => self.sin(),
            AnalyticMap::Cos => self.cos(),
            AnalyticMap::Recip => self.inv(),
            AnalyticMap::Sqrt => self.sqrt(),
        })
    }
    fn min_abs(&self, _ctx: &AlgebraCtx) -> f64 {
        num_complex::Complex::norm(*self)
    }
}

impl Coeff for Vec<f64> {
    fn add(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::ShapeMismatch("vector lengths differ".into()));
        }
        Ok(self.iter().zip(rhs).map(|(a, b)| a + b).collect())
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::ShapeMismatch("vector lengths differ".into()));
        }
        Ok(self.iter().zip(rhs).map(|(a, b)| a - b).collect())
    }
    fn neg(&self) -> Self {
        self.iter().map(|a| -a).collect()
    }
    fn scale(&self, s: f64) -> Self {
        self.iter().map(|a| a * s).collect()
    }
    fn zero_like(&self) -> Self {
        vec![0.0; self.len()]
    }
    fn norm(&self) -> f64 {
        self.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

impl Coeff for Vec<C64> {
    fn add(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::ShapeMismatch("vector lengths differ".into()));
        }
        Ok(self.iter().zip(rhs).map(|(a, b)| a + b).collect())
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.len() != rhs.len() {
            return Err(Error::ShapeMismatch("vector lengths differ".into()));
        }
        Ok(self.iter().zip(rhs).map(|(a, b)| a - b).collect())
    }
    fn neg(&self) -> Self {
        self.iter().map(|a| -a).collect()
    }
    fn scale(&self, s: f64) -> Self {
        self.iter().map(|a| a * s).collect()
    }
    fn zero_like(&self) -> Self {
        vec![C64::default(); self.len()]
    }
    fn norm(&self) -> f64 {
        self.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl Coeff for TorusFourier {
    fn add(&self, rhs: &Self) -> Result<Self> {
        TorusFourier::add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        TorusFourier::sub(self, rhs)
    }
    fn neg(&self) -> Self {
        TorusFourier::neg(self)
    }
    fn scale(&self, s: f64) -> Self {
        TorusFourier::scale(self, s)
    }
    fn zero_like(&self) -> Self {
        TorusFourier::zeros(self.dim(), self.range_dim(), self.cutoff())
    }
    fn norm(&self) -> f64 {
        self.coeff_l1()
    }
}

impl CoeffAlgebra for TorusFourier {
    fn mul(&self, rhs: &Self, ctx: &AlgebraCtx) -> Result<Self> {
        self.prod(rhs, ctx.product_cutoff)
    }
    fn one_like(&self) -> Self {
        TorusFourier::constant(self.dim(), &vec![1.0; self.range_dim()], self.cutoff())
    }
    fn apply_order0(&self, phi: AnalyticMap, ctx: &AlgebraCtx) -> Result<Self> {
        if self.range_dim() != 1 {
            return Err(Error::ShapeMismatch(
                "analytic maps act on scalar-valued series".into(),
            ));
        }
        let is_constant =
            self.mode_count() == 0 || (self.mode_count() == 1 && self.modes().next().unwrap().0.iter().all(|&k| k == 0));
        if is_constant {
            let c = self.average()[0];
            if c.im != 0.0 {
                return Err(Error::ShapeMismatch(
                    "analytic maps need real order-0 values".into(),
                ));
            }
            return Ok(TorusFourier::constant(
                self.dim(),
                &[phi.apply_f64(c.re)],
                self.cutoff(),
            ));
        }
        self.map_pointwise_real(
            |x| phi.apply_f64(x),
            ctx.oversample,
            self.cutoff().max(ctx.product_cutoff),
        )
    }
    fn min_abs(&self, ctx: &AlgebraCtx) -> f64 {
        if self.mode_count() == 0 {
            return 0.0;
        }
        self.min_abs_on_grid(ctx.oversample)
    }
}

// ---- truncated series --------------------------------------------------------

/// Truncated formal power series `c_0 + c_1 eps + ... + c_N eps^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsSeries<C> {
    terms: Vec<C>,
}

impl<C: Coeff> EpsSeries<C> {
    pub fn from_terms(terms: Vec<C>) -> Self {
        assert!(!terms.is_empty(), "a series needs at least the order-0 term");
        EpsSeries { terms }
    }

    /// Constant series (only the order-0 term is nonzero).
    pub fn constant(c: C, order: usize) -> Self {
        let mut terms = Vec::with_capacity(order + 1);
        let zero = c.zero_like();
        terms.push(c);
        for _ in 0..order {
            terms.push(zero.clone());
        }
        EpsSeries { terms }
    }

    pub fn zero(proto: &C, order: usize) -> Self {
        Self::constant(proto.zero_like(), order)
    }

    pub fn order(&self) -> usize {
        self.terms.len() - 1
    }

    pub fn term(&self, j: usize) -> &C {
        &self.terms[j]
    }

    pub fn terms(&self) -> &[C] {
        &self.terms
    }

    pub fn into_terms(self) -> Vec<C> {
        self.terms
    }

    pub fn set_term(&mut self, j: usize, c: C) {
        self.terms[j] = c;
    }

    /// Truncates or zero-pads to exactly `order`.
    pub fn resized(&self, order: usize) -> Self {
        let mut terms = self.terms.clone();
        terms.truncate(order + 1);
        while terms.len() < order + 1 {
            terms.push(self.terms[0].zero_like());
        }
        EpsSeries { terms }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        let order = self.order().min(rhs.order());
        let mut terms = Vec::with_capacity(order + 1);
        for j in 0..=order {
            terms.push(self.terms[j].add(&rhs.terms[j])?);
        }
        Ok(EpsSeries { terms })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        let order = self.order().min(rhs.order());
        let mut terms = Vec::with_capacity(order + 1);
        for j in 0..=order {
            terms.push(self.terms[j].sub(&rhs.terms[j])?);
        }
        Ok(EpsSeries { terms })
    }

    pub fn neg(&self) -> Self {
        EpsSeries {
            terms: self.terms.iter().map(|t| t.neg()).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        EpsSeries {
            terms: self.terms.iter().map(|t| t.scale(s)).collect(),
        }
    }

    /// Multiplies by `eps^by` (shifting coefficients up, truncating at the
    /// same order).
    pub fn shift_up(&self, by: usize) -> Self {
        let zero = self.terms[0].zero_like();
        let mut terms = vec![zero; self.terms.len()];
        for (j, t) in self.terms.iter().enumerate() {
            if j + by < terms.len() {
                terms[j + by] = t.clone();
            }
        }
        EpsSeries { terms }
    }

    /// Derivative with respect to the series variable, truncated at `N - 1`.
    pub fn differentiate(&self) -> Self {
        if self.terms.len() == 1 {
            return EpsSeries {
                terms: vec![self.terms[0].zero_like()],
            };
        }
        EpsSeries {
            terms: self
                .terms
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, t)| t.scale(j as f64))
                .collect(),
        }
    }

    /// Cauchy product with a plain scalar series (usable for any
    /// coefficient space).
    pub fn scale_series(&self, s: &EpsSeries<f64>) -> Result<Self> {
        let order = self.order().min(s.order());
        let mut terms = Vec::with_capacity(order + 1);
        for m in 0..=order {
            let mut acc = self.terms[0].zero_like();
            for j in 0..=m {
                acc = acc.add(&self.terms[m - j].scale(s.terms[j]))?;
            }
            terms.push(acc);
        }
        Ok(EpsSeries { terms })
    }

    pub fn max_term_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.norm()).fold(0.0, f64::max)
    }

    pub fn term_norms(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.norm()).collect()
    }
}

impl<C: CoeffAlgebra> EpsSeries<C> {
    pub fn one(proto: &C, order: usize) -> Self {
        Self::constant(proto.one_like(), order)
    }

    /// The series `eps` itself.
    pub fn eps(proto: &C, order: usize) -> Self {
        let mut s = Self::zero(proto, order);
        if order >= 1 {
            s.terms[1] = proto.one_like();
        }
        s
    }

    /// Cauchy product truncated at the smaller order.  Symmetric pairs are
    /// summed first so that the product commutes bit-exactly on scalar
    /// coefficient spaces.
    pub fn mul(&self, rhs: &Self, ctx: &AlgebraCtx) -> Result<Self> {
        let order = self.order().min(rhs.order());
        let mut terms = Vec::with_capacity(order + 1);
        for m in 0..=order {
            let mut acc = self.terms[0].zero_like();
            for j in 0..=m / 2 {
                let lo = self.terms[j].mul(&rhs.terms[m - j], ctx)?;
                let pair = if j != m - j {
                    lo.add(&self.terms[m - j].mul(&rhs.terms[j], ctx)?)?
                } else {
                    lo
                };
                acc = acc.add(&pair)?;
            }
            terms.push(acc);
        }
        Ok(EpsSeries { terms })
    }

    /// Integer power by repeated multiplication (`p >= 0`).
    pub fn powi(&self, p: u32, ctx: &AlgebraCtx) -> Result<Self> {
        let mut acc = Self::one(&self.terms[0], self.order());
        let mut base = self.clone();
        let mut e = p;
        loop {
            if e & 1 == 1 {
                acc = acc.mul(&base, ctx)?;
            }
            e >>= 1;
            if e == 0 {
                break;
            }
            base = base.mul(&base, ctx)?;
        }
        Ok(acc)
    }

    /// Taylor composition `phi(self)` truncated at the series order.
    pub fn apply(&self, phi: AnalyticMap, ctx: &AlgebraCtx) -> Result<Self> {
        let terms = apply_series(phi, &self.terms, ctx)?;
        Ok(EpsSeries { terms })
    }

    /// Smooth absolute value `sqrt(self^2)` of a scalar jet whose order-0
    /// part is bounded away from zero.
    pub fn abs_smooth(&self, ctx: &AlgebraCtx) -> Result<Self> {
        self.mul(self, ctx)?.apply(AnalyticMap::Sqrt, ctx)
    }
}

/// Shared analytic-composition recurrences.  `terms` holds the jet
/// coefficients of the argument; the result has the same length.
pub(crate) fn apply_series<C: CoeffAlgebra>(
    phi: AnalyticMap,
    terms: &[C],
    ctx: &AlgebraCtx,
) -> Result<Vec<C>> {
    let n = terms.len() - 1;
    let a0 = &terms[0];
    match phi {
        AnalyticMap::Exp => {
            let b0 = a0.apply_order0(AnalyticMap::Exp, ctx)?;
            let mut b = vec![b0];
            for m in 1..=n {
                let mut acc = a0.zero_like();
                for j in 1..=m {
                    acc = acc.add(&terms[j].scale(j as f64).mul(&b[m - j], ctx)?)?;
                }
                b.push(acc.scale(1.0 / m as f64));
            }
            Ok(b)
        }
        AnalyticMap::Sin | AnalyticMap::Cos => {
            let s0 = a0.apply_order0(AnalyticMap::Sin, ctx)?;
            let c0 = a0.apply_order0(AnalyticMap::Cos, ctx)?;
            let mut s = vec![s0];
            let mut c = vec![c0];
            for m in 1..=n {
                let mut sacc = a0.zero_like();
                let mut cacc = a0.zero_like();
                for j in 1..=m {
                    let da = terms[j].scale(j as f64);
                    sacc = sacc.add(&da.mul(&c[m - j], ctx)?)?;
                    cacc = cacc.add(&da.mul(&s[m - j], ctx)?)?;
                }
                s.push(sacc.scale(1.0 / m as f64));
                c.push(cacc.scale(-1.0 / m as f64));
            }
            Ok(if phi == AnalyticMap::Sin { s } else { c })
        }
        AnalyticMap::Recip => {
            let floor = ctx.singular_floor;
            let min0 = a0.min_abs(ctx);
            if min0 < floor {
                return Err(Error::SingularJet {
                    op: "reciprocal",
                    min_abs0: min0,
                    floor,
                });
            }
            let b0 = a0.apply_order0(AnalyticMap::Recip, ctx)?;
            let mut b = vec![b0.clone()];
            for m in 1..=n {
                let mut acc = a0.zero_like();
                for j in 1..=m {
                    acc = acc.add(&terms[j].mul(&b[m - j], ctx)?)?;
                }
                b.push(acc.mul(&b0, ctx)?.neg());
            }
            Ok(b)
        }
        AnalyticMap::Sqrt => {
            let floor = ctx.singular_floor;
            let min0 = a0.min_abs(ctx);
            if min0 < floor {
                return Err(Error::SingularJet {
                    op: "sqrt",
                    min_abs0: min0,
                    floor,
                });
            }
            let b0 = a0.apply_order0(AnalyticMap::Sqrt, ctx)?;
            let half_inv = b0.scale(2.0).apply_order0(AnalyticMap::Recip, ctx)?;
            let mut b = vec![b0];
            for m in 1..=n {
                let mut acc = terms[m].clone();
                for j in 1..m {
                    acc = acc.sub(&b[j].mul(&b[m - j], ctx)?)?;
                }
                b.push(acc.mul(&half_inv, ctx)?);
            }
            Ok(b)
        }
    }
}

// ---- torus-series helpers ------------------------------------------------------

/// Series-valued directional derivative: the jet of `(omega . d_theta) u`
/// where both the frequency and the angular function are series.
pub fn series_deriv_dir(
    u: &EpsSeries<TorusFourier>,
    omega: &EpsSeries<Vec<f64>>,
) -> Result<EpsSeries<TorusFourier>> {
    let order = u.order().min(omega.order());
    let mut terms = Vec::with_capacity(order + 1);
    for m in 0..=order {
        let mut acc = Coeff::zero_like(u.term(0));
        for j in 0..=m {
            acc = Coeff::add(&acc, &u.term(m - j).deriv_dir(omega.term(j))?)?;
        }
        terms.push(acc);
    }
    Ok(EpsSeries::from_terms(terms))
}

/// Builds the vector-valued angular shift jet `omega(eps) * rho(eps, theta)`
/// from a frequency series and a scalar torus-series factor.
pub fn omega_times_scalar(
    omega: &EpsSeries<Vec<f64>>,
    rho: &EpsSeries<TorusFourier>,
) -> Result<EpsSeries<TorusFourier>> {
    let d = omega.term(0).len();
    let order = omega.order().min(rho.order());
    let mut terms = Vec::with_capacity(order + 1);
    for m in 0..=order {
        let mut comps: Vec<TorusFourier> = Vec::with_capacity(d);
        for alpha in 0..d {
            let mut acc = Coeff::zero_like(rho.term(0));
            for j in 0..=m {
                acc = Coeff::add(&acc, &rho.term(m - j).scale(omega.term(j)[alpha]))?;
            }
            comps.push(acc);
        }
        terms.push(TorusFourier::from_components(&comps)?);
    }
    Ok(EpsSeries::from_terms(terms))
}

/// Strategy selector for [`shift_jet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// `sum_m (-1)^m/m! (delta . d_theta)^m u`.
    DerivPowers,
    /// Per-mode multiplication by the jet of `e^{-2 pi i k.delta}`.
    PerMode,
    /// Pick by stored-mode count against [`SHIFT_MODE_THRESHOLD`].
    Auto,
}

/// Mode-count crossover between the two [`shift_jet`] evaluation paths.
pub const SHIFT_MODE_THRESHOLD: usize = 64;

/// Jet of the shifted composite `theta -> u(theta - delta(theta))` for a
/// shift series with vanishing order-0 term.
pub fn shift_jet(
    u: &EpsSeries<TorusFourier>,
    delta: &EpsSeries<TorusFourier>,
    ctx: &AlgebraCtx,
    mode: ShiftMode,
) -> Result<EpsSeries<TorusFourier>> {
    if delta.term(0).coeff_l1() != 0.0 {
        return Err(Error::ShapeMismatch(
            "shift_jet needs a shift of order eps; apply the order-0 part with shift_const or the composition path first"
                .into(),
        ));
    }
    let d = u.term(0).dim();
    if delta.term(0).range_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "shift range {} must match torus dimension {}",
            delta.term(0).range_dim(),
            d
        )));
    }
    let mode = match mode {
        ShiftMode::Auto => {
            let stored: usize = u.terms().iter().map(|t| t.mode_count()).sum();
            if stored > SHIFT_MODE_THRESHOLD {
                ShiftMode::DerivPowers
            } else {
                ShiftMode::PerMode
            }
        }
        m => m,
    };
    let order = u.order().min(delta.order());
    match mode {
        ShiftMode::Auto => unreachable!(),
        ShiftMode::DerivPowers => {
            let u = u.resized(order);
            let delta = delta.resized(order);
            // Taylor in the shift: sum over multi-indices alpha of
            // (-delta)^alpha / alpha! * (d^alpha u), with the shift powers
            // multiplying as functions (the shift is theta-dependent).
            let mut delta_pows: Vec<Vec<EpsSeries<TorusFourier>>> = Vec::with_capacity(d);
            for alpha in 0..d {
                let base = EpsSeries::from_terms(
                    delta
                        .terms()
                        .iter()
                        .map(|t| t.component(alpha))
                        .collect::<Vec<_>>(),
                );
                let mut pows = vec![EpsSeries::one(base.term(0), order)];
                for p in 1..=order {
                    pows.push(pows[p - 1].mul(&base, ctx)?);
                }
                delta_pows.push(pows);
            }
            let mut acc = u.clone();
            for alpha_idx in multi_indices(d, order) {
                let total: usize = alpha_idx.iter().sum();
                if total == 0 {
                    continue;
                }
                let mut du = u.clone();
                for (axis, &reps) in alpha_idx.iter().enumerate() {
                    for _ in 0..reps {
                        du = EpsSeries::from_terms(
                            du.terms().iter().map(|t| t.deriv_axis(axis)).collect(),
                        );
                    }
                }
                let mut weight: Option<EpsSeries<TorusFourier>> = None;
                for (axis, &reps) in alpha_idx.iter().enumerate() {
                    if reps == 0 {
                        continue;
                    }
                    let p = &delta_pows[axis][reps];
                    weight = Some(match weight {
                        None => p.clone(),
                        Some(w) => w.mul(p, ctx)?,
                    });
                }
                let weight = weight.unwrap();
                let term = mul_scalar_series(&weight, &du, ctx)?;
                let sign = if total % 2 == 0 { 1.0 } else { -1.0 };
                let fact: f64 = alpha_idx.iter().map(|&r| factorial(r)).product();
                acc = acc.add(&term.scale(sign / fact))?;
            }
            Ok(acc)
        }
        ShiftMode::PerMode => {
            let proto = u.term(0).component(0);
            let mut out = EpsSeries::zero(u.term(0), order);
            for (j, coeff_fn) in u.terms().iter().enumerate() {
                if j > order {
                    break;
                }
                for (k, v) in coeff_fn.modes() {
                    // jet of e^{-2 pi i k.delta(theta)}
                    let mut kdot = EpsSeries::zero(&proto, order);
                    for alpha in 0..d {
                        if k[alpha] == 0 {
                            continue;
                        }
                        let da: Vec<TorusFourier> = delta
                            .terms()
                            .iter()
                            .map(|t| t.component(alpha).scale(k[alpha] as f64))
                            .collect();
                        kdot = kdot.add(&EpsSeries::from_terms(da))?;
                    }
                    let phase = complex_exp_jet(&kdot, ctx)?;
                    // basis mode e^{2 pi i k.theta} carrying the coefficient vector
                    let basis = TorusFourier::from_modes(
                        u.term(0).dim(),
                        u.term(0).range_dim(),
                        u.term(0).cutoff(),
                        false,
                        [(k.clone(), v.clone())],
                    )?;
                    for (m, ph) in phase.terms().iter().enumerate() {
                        if m + j > order {
                            break;
                        }
                        let contrib = ph.prod(&basis, ctx.product_cutoff)?;
                        let updated = Coeff::add(out.term(m + j), &contrib)?;
                        out.set_term(m + j, updated);
                    }
                }
            }
            // real inputs produce real shifted outputs
            if u.terms().iter().all(|t| t.is_real()) && delta.terms().iter().all(|t| t.is_real()) {
                let terms: Result<Vec<TorusFourier>> = out
                    .terms()
                    .iter()
                    .map(|t| t.clone().into_real_checked(1e-9))
                    .collect();
                out = EpsSeries::from_terms(terms?);
            }
            Ok(out)
        }
    }
}

/// Jet of `e^{-2 pi i x}` for a real series `x` with `x_0 = 0`.
fn complex_exp_jet(
    x: &EpsSeries<TorusFourier>,
    ctx: &AlgebraCtx,
) -> Result<EpsSeries<TorusFourier>> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let arg = x.scale(two_pi);
    let c = arg.apply(AnalyticMap::Cos, ctx)?;
    let s = arg.apply(AnalyticMap::Sin, ctx)?;
    let i = C64::new(0.0, 1.0);
    let mut terms = Vec::with_capacity(c.order() + 1);
    for m in 0..=c.order() {
        terms.push(Coeff::add(
            &c.term(m).clone().into_complex(),
            &s.term(m).scale_complex(-i),
        )?);
    }
    Ok(EpsSeries::from_terms(terms))
}

/// Cauchy product of a scalar torus series with a vector-valued one.
pub fn mul_scalar_series(
    scalar: &EpsSeries<TorusFourier>,
    v: &EpsSeries<TorusFourier>,
    ctx: &AlgebraCtx,
) -> Result<EpsSeries<TorusFourier>> {
    let order = scalar.order().min(v.order());
    let mut terms = Vec::with_capacity(order + 1);
    for m in 0..=order {
        let mut acc = Coeff::zero_like(v.term(0));
        for j in 0..=m {
            acc = Coeff::add(&acc, &scalar.term(j).prod(v.term(m - j), ctx.product_cutoff)?)?;
        }
        terms.push(acc);
    }
    Ok(EpsSeries::from_terms(terms))
}

/// Composition with an order-one angular shift: samples `u` at
/// `theta - delta0(theta)` on an oversampled grid and re-expands.  The
/// result is a controlled truncation (analytic tails fold back below the
/// retained coefficients).
pub fn compose_shift_map(
    u: &TorusFourier,
    delta0: &TorusFourier,
    oversample: usize,
    out_cutoff: u32,
) -> Result<TorusFourier> {
    let d = u.dim();
    if delta0.range_dim() != d {
        return Err(Error::ShapeMismatch(
            "shift map range must match torus dimension".into(),
        ));
    }
    let m = TorusFourier::grid_size(u.cutoff().max(out_cutoff), oversample);
    let total = m.pow(d as u32);
    let mut values = Vec::with_capacity(total);
    let mut theta = vec![0.0; d];
    for flat in 0..total {
        let mut rest = flat;
        for i in (0..d).rev() {
            theta[i] = (rest % m) as f64 / m as f64;
            rest /= m;
        }
        let shift = delta0.eval_real(&theta)?;
        let arg: Vec<f64> = theta.iter().zip(shift.iter()).map(|(t, s)| t - s).collect();
        values.push(u.eval(&arg));
    }
    TorusFourier::project_grid(d, u.range_dim(), out_cutoff, u.is_real() && delta0.is_real(), m, &values)
}

/// Jet of `theta -> u(theta - delta(theta, eps))` for a shift whose order-0
/// part need not vanish: the order-1 shift machinery runs around the
/// composed base point `theta - delta_0(theta)`.
pub fn shift_jet_general(
    u: &EpsSeries<TorusFourier>,
    delta: &EpsSeries<TorusFourier>,
    ctx: &AlgebraCtx,
) -> Result<EpsSeries<TorusFourier>> {
    let delta0 = delta.term(0).clone();
    if delta0.coeff_l1() == 0.0 {
        return shift_jet(u, delta, ctx, ShiftMode::Auto);
    }
    let order = u.order().min(delta.order());
    let u = u.resized(order);
    let mut dplus = delta.resized(order);
    dplus.set_term(0, delta0.zero_like());
    let d = u.term(0).dim();

    let mut dplus_pows: Vec<Vec<EpsSeries<TorusFourier>>> = Vec::with_capacity(d);
    for alpha in 0..d {
        let base = EpsSeries::from_terms(
            dplus
                .terms()
                .iter()
                .map(|t| t.component(alpha))
                .collect::<Vec<_>>(),
        );
        let mut pows = vec![EpsSeries::one(base.term(0), order)];
        for p in 1..=order {
            pows.push(pows[p - 1].mul(&base, ctx)?);
        }
        dplus_pows.push(pows);
    }

    let mut acc: Option<EpsSeries<TorusFourier>> = None;
    for alpha_idx in multi_indices(d, order) {
        let total: usize = alpha_idx.iter().sum();
        let mut du = u.clone();
        for (axis, &reps) in alpha_idx.iter().enumerate() {
            for _ in 0..reps {
                du = EpsSeries::from_terms(du.terms().iter().map(|t| t.deriv_axis(axis)).collect());
            }
        }
        // compose every jet coefficient with the order-0 base shift
        let composed = EpsSeries::from_terms(
            du.terms()
                .iter()
                .map(|t| compose_shift_map(t, &delta0, ctx.oversample, ctx.product_cutoff))
                .collect::<Result<Vec<_>>>()?,
        );
        let mut term = composed;
        if total > 0 {
            let mut weight: Option<EpsSeries<TorusFourier>> = None;
            for (axis, &reps) in alpha_idx.iter().enumerate() {
                if reps == 0 {
                    continue;
                }
                let p = &dplus_pows[axis][reps];
                weight = Some(match weight {
                    None => p.clone(),
                    Some(w) => w.mul(p, ctx)?,
                });
            }
            term = mul_scalar_series(&weight.unwrap(), &term, ctx)?;
        }
        let sign = if total % 2 == 0 { 1.0 } else { -1.0 };
        let fact: f64 = alpha_idx.iter().map(|&r| factorial(r)).product();
        let scaled = term.scale(sign / fact);
        acc = Some(match acc {
            None => scaled,
            Some(a) => a.add(&scaled)?,
        });
    }
    Ok(acc.unwrap())
}

/// Coefficient-wise evaluation of a torus-series jet at a parameter value.
pub fn sum_series_at(k: &EpsSeries<TorusFourier>, eps: f64) -> Result<TorusFourier> {
    let mut acc = Coeff::zero_like(k.term(0));
    let mut p = 1.0;
    for t in k.terms() {
        acc = Coeff::add(&acc, &t.scale(p))?;
        p *= eps;
    }
    Ok(acc)
}

/// Horner evaluation of a vector-coefficient series.
pub fn sum_vec_series_at(v: &EpsSeries<Vec<f64>>, eps: f64) -> Vec<f64> {
    let n = v.term(0).len();
    let mut acc = vec![0.0; n];
    for t in v.terms().iter().rev() {
        for i in 0..n {
            acc[i] = acc[i] * eps + t[i];
        }
    }
    acc
}

/// Fixed-point solution of `s = eps G(s)` with `s(0) = 0`, iterated exactly
/// `order` times: each pass is correct one order deeper.
pub fn implicit_delay_jet<C, F>(g: F, order: usize, proto: &C) -> Result<EpsSeries<C>>
where
    C: Coeff,
    F: Fn(&EpsSeries<C>) -> Result<EpsSeries<C>>,
{
    let mut s = EpsSeries::zero(proto, order);
    for _ in 0..order {
        s = g(&s)?.shift_up(1);
    }
    Ok(s)
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|x| x as f64).product::<f64>().max(1.0)
}

/// All multi-indices in `d` variables with total degree `1..=max_total`
/// (plus the zero index, which callers skip).
fn multi_indices(d: usize, max_total: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for partial in &out {
            let used: usize = partial.iter().sum();
            for r in 0..=(max_total - used) {
                let mut p = partial.clone();
                p.push(r);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx() -> AlgebraCtx {
        AlgebraCtx::new(32)
    }

    fn eval_f64(s: &EpsSeries<f64>, eps: f64) -> f64 {
        s.terms().iter().rev().fold(0.0, |acc, &c| acc * eps + c)
    }

    #[test]
    fn jet_mul_polynomials() {
        // (1 + eps)(1 - eps) = 1 - eps^2
        let a = EpsSeries::from_terms(vec![1.0, 1.0, 0.0]);
        let b = EpsSeries::from_terms(vec![1.0, -1.0, 0.0]);
        let p = a.mul(&b, &ctx()).unwrap();
        assert_eq!(p.terms(), &[1.0, 0.0, -1.0]);

        let one = EpsSeries::one(&0.0, 2);
        assert_eq!(a.mul(&one, &ctx()).unwrap().terms(), a.terms());
    }

    #[test]
    fn jet_mul_numeric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let n = 4;
            let a = EpsSeries::from_terms((0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b = EpsSeries::from_terms((0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let p = a.mul(&b, &ctx()).unwrap();
            let eps = 1e-3;
            let lhs = eval_f64(&a, eps) * eval_f64(&b, eps);
            let rhs = eval_f64(&p, eps);
            assert!((lhs - rhs).abs() <= 10.0 * eps.powi(n as i32 + 1));
        }
    }

    #[test]
    fn jet_mul_assoc_comm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a =
            EpsSeries::from_terms((0..=3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let b =
            EpsSeries::from_terms((0..=3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let c =
            EpsSeries::from_terms((0..=3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let ab_c = a.mul(&b, &ctx()).unwrap().mul(&c, &ctx()).unwrap();
        let a_bc = a.mul(&b.mul(&c, &ctx()).unwrap(), &ctx()).unwrap();
        for j in 0..=3 {
            assert_relative_eq!(ab_c.term(j), a_bc.term(j), max_relative = 1e-14, epsilon = 1e-14);
        }
        let ab = a.mul(&b, &ctx()).unwrap();
        let ba = b.mul(&a, &ctx()).unwrap();
        assert_eq!(ab.terms(), ba.terms());
    }

    #[test]
    fn jet_apply_exponential() {
        // exp(0 + eps) at order 3: 1, 1, 1/2, 1/6
        let a = EpsSeries::from_terms(vec![0.0, 1.0, 0.0, 0.0]);
        let e = a.apply(AnalyticMap::Exp, &ctx()).unwrap();
        assert_eq!(e.term(0), &1.0);
        assert_eq!(e.term(1), &1.0);
        assert_relative_eq!(*e.term(2), 0.5, epsilon = 1e-15);
        assert_relative_eq!(*e.term(3), 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn jet_apply_recip_constant() {
        let a = EpsSeries::constant(2.0, 3);
        let r = a.apply(AnalyticMap::Recip, &ctx()).unwrap();
        assert_eq!(r.term(0), &0.5);
        for j in 1..=3 {
            assert_eq!(r.term(j), &0.0);
        }
    }

    #[test]
    fn jet_apply_sin_numeric_oracle() {
        let a = EpsSeries::from_terms(vec![0.3, 0.7, 0.0, 0.0, 0.0]);
        let s = a.apply(AnalyticMap::Sin, &ctx()).unwrap();
        let eps: f64 = 1e-2;
        let exact = (0.3 + 0.7 * eps).sin();
        assert!((eval_f64(&s, eps) - exact).abs() <= 10.0 * eps.powi(5));
    }

    #[test]
    fn jet_apply_singular_floor() {
        let a = EpsSeries::constant(1e-9, 2);
        match a.apply(AnalyticMap::Recip, &ctx()) {
            Err(Error::SingularJet { .. }) => {}
            other => panic!("expected singular-jet error, got {:?}", other),
        }
    }

    #[test]
    fn jet_apply_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a =
            EpsSeries::from_terms((0..=5).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>());
        for (phi, dphi) in [
            (AnalyticMap::Exp, AnalyticMap::Exp),
            (AnalyticMap::Sin, AnalyticMap::Cos),
        ] {
            let b = a.apply(phi, &ctx()).unwrap();
            let db = b.differentiate();
            let chain = a
                .apply(dphi, &ctx())
                .unwrap()
                .resized(4)
                .mul(&a.differentiate(), &ctx())
                .unwrap();
            for j in 0..=4 {
                assert_relative_eq!(
                    db.term(j),
                    chain.term(j),
                    epsilon = 1e-13,
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn sqrt_of_square_recovers_abs() {
        let a = EpsSeries::from_terms(vec![2.0, 0.3, -0.1, 0.05]);
        let b = a.abs_smooth(&ctx()).unwrap();
        for j in 0..=3 {
            assert_relative_eq!(b.term(j), a.term(j), epsilon = 1e-13);
        }
    }

    fn single_mode_series(order: usize) -> EpsSeries<TorusFourier> {
        let k = TorusFourier::from_modes(1, 1, 8, false, [(vec![1], vec![C64::new(1.0, 0.0)])])
            .unwrap();
        EpsSeries::constant(k, order)
    }

    #[test]
    fn shift_jet_zero_delta() {
        let u = single_mode_series(3);
        let delta = EpsSeries::zero(&TorusFourier::zeros(1, 1, 8), 3);
        for mode in [ShiftMode::DerivPowers, ShiftMode::PerMode] {
            let s = shift_jet(&u, &delta, &ctx(), mode).unwrap();
            for j in 0..=3 {
                assert!((s.term(j).coeff(&[1])[0] - u.term(j).coeff(&[1])[0]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn shift_jet_rejects_order0_shift() {
        let u = single_mode_series(2);
        let delta = EpsSeries::constant(TorusFourier::constant(1, &[0.3], 8), 2);
        assert!(shift_jet(&u, &delta, &ctx(), ShiftMode::Auto).is_err());
    }

    #[test]
    fn shift_jet_constant_shift_taylor() {
        // K = e^{2 pi i theta}, delta = eps c: order-j term is (-2 pi i c)^j / j! K
        let u = single_mode_series(4);
        let c = 0.37;
        let mut delta = EpsSeries::zero(&TorusFourier::zeros(1, 1, 8), 4);
        delta.set_term(1, TorusFourier::constant(1, &[c], 8));
        for mode in [ShiftMode::DerivPowers, ShiftMode::PerMode] {
            let s = shift_jet(&u, &delta, &ctx(), mode).unwrap();
            let mut expect = C64::new(1.0, 0.0);
            for j in 0..=4 {
                let got = s.term(j).coeff(&[1])[0];
                assert!(
                    (got - expect).norm() < 1e-12,
                    "order {} expected {} got {} ({:?})",
                    j,
                    expect,
                    got,
                    mode
                );
                expect *= C64::new(0.0, -2.0 * std::f64::consts::PI * c) / (j + 1) as f64;
            }
        }
    }

    #[test]
    fn shift_jet_pointwise_oracle_and_path_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let order = 4;
        let k = TorusFourier::from_half_modes(
            1,
            1,
            8,
            (1..=4).map(|k| {
                (
                    vec![k],
                    vec![C64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))],
                )
            }),
        )
        .unwrap();
        let u = EpsSeries::constant(k, order);
        let mut delta = EpsSeries::zero(&TorusFourier::zeros(1, 1, 8), order);
        delta.set_term(
            1,
            TorusFourier::constant(1, &[0.05], 8)
                .add(&TorusFourier::cosine(1, &[1], 0.03, 8))
                .unwrap(),
        );
        delta.set_term(2, TorusFourier::sine(1, &[1], 0.02, 8));

        let a = shift_jet(&u, &delta, &ctx(), ShiftMode::DerivPowers).unwrap();
        let b = shift_jet(&u, &delta, &ctx(), ShiftMode::PerMode).unwrap();
        for j in 0..=order {
            let diff = Coeff::sub(a.term(j), b.term(j)).unwrap().coeff_sup();
            assert!(diff < 1e-12, "paths disagree at order {}: {}", j, diff);
        }

        let eps = 1e-3;
        for _ in 0..30 {
            let th = rng.gen_range(0.0..1.0);
            let mut jet_val = C64::default();
            let mut ep = 1.0;
            for j in 0..=order {
                jet_val += a.term(j).eval(&[th])[0] * ep;
                ep *= eps;
            }
            let mut dval = 0.0;
            let mut ep = 1.0;
            for j in 0..=order {
                dval += delta.term(j).eval(&[th])[0].re * ep;
                ep *= eps;
            }
            let direct = u.term(0).eval(&[th - dval])[0];
            assert!(
                (jet_val - direct).norm() <= 10.0 * eps.powi(order as i32 + 1),
                "{} vs {}",
                jet_val,
                direct
            );
        }
    }

    #[test]
    fn implicit_delay_constant_and_geometric() {
        let proto = 0.0f64;
        let c = 0.7;
        let s =
            implicit_delay_jet(|_s: &EpsSeries<f64>| Ok(EpsSeries::constant(c, 5)), 5, &proto)
                .unwrap();
        assert_eq!(s.term(0), &0.0);
        assert_eq!(s.term(1), &c);
        for j in 2..=5 {
            assert_eq!(s.term(j), &0.0);
        }
        let s = implicit_delay_jet(
            |s: &EpsSeries<f64>| EpsSeries::one(&0.0, 5).add(s),
            5,
            &proto,
        )
        .unwrap();
        for j in 1..=5 {
            assert_eq!(s.term(j), &1.0);
        }
    }

    #[test]
    fn implicit_delay_cos_numeric_oracle() {
        let proto = 0.0f64;
        let order = 5;
        let s = implicit_delay_jet(
            |s: &EpsSeries<f64>| s.apply(AnalyticMap::Cos, &ctx()),
            order,
            &proto,
        )
        .unwrap();
        // residual s - eps G(s) vanishes through the truncation order
        let g = s.apply(AnalyticMap::Cos, &ctx()).unwrap().shift_up(1);
        let resid = s.sub(&g).unwrap();
        for j in 0..=order {
            assert!(resid.term(j).abs() < 1e-14);
        }
        // numeric fixed point at eps = 0.1
        let eps: f64 = 0.1;
        let mut x: f64 = 0.0;
        for _ in 0..50 {
            x = eps * x.cos();
        }
        assert!((eval_f64(&s, eps) - x).abs() <= 10.0 * eps.powi(order as i32 + 1));
    }

    #[test]
    fn shift_jet_general_pointwise_oracle() {
        // order-one theta-dependent base shift plus order-eps corrections
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let order = 3;
        let k = TorusFourier::from_half_modes(
            1,
            1,
            6,
            (1..=3).map(|k| {
                (
                    vec![k],
                    vec![C64::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4))],
                )
            }),
        )
        .unwrap();
        let u = EpsSeries::constant(k, order);
        let mut delta = EpsSeries::zero(&TorusFourier::zeros(1, 1, 6), order);
        delta.set_term(
            0,
            TorusFourier::constant(1, &[0.3], 6)
                .add(&TorusFourier::cosine(1, &[1], 0.1, 6))
                .unwrap(),
        );
        delta.set_term(1, TorusFourier::sine(1, &[1], 0.04, 6));
        let c = AlgebraCtx::new(48);
        let s = shift_jet_general(&u, &delta, &c).unwrap();
        let eps = 1e-3;
        for j in 0..25 {
            let th = j as f64 / 25.0;
            let mut jet_val = C64::default();
            let mut ep = 1.0;
            for m in 0..=order {
                jet_val += s.term(m).eval(&[th])[0] * ep;
                ep *= eps;
            }
            let mut dval = 0.0;
            let mut ep = 1.0;
            for m in 0..=order {
                dval += delta.term(m).eval(&[th])[0].re * ep;
                ep *= eps;
            }
            let direct = u.term(0).eval(&[th - dval])[0];
            assert!(
                (jet_val - direct).norm() <= 1e-9,
                "theta {}: {} vs {}",
                th,
                jet_val,
                direct
            );
        }
    }

    #[test]
    fn shift_jet_matches_shift_const_expansion() {
        // theta-independent shift series: compare with per-mode exact factors
        let u = single_mode_series(3);
        let mut delta = EpsSeries::zero(&TorusFourier::zeros(1, 1, 8), 3);
        delta.set_term(1, TorusFourier::constant(1, &[0.11], 8));
        delta.set_term(2, TorusFourier::constant(1, &[-0.03], 8));
        let s = shift_jet(&u, &delta, &ctx(), ShiftMode::DerivPowers).unwrap();
        // exact: e^{-2 pi i (0.11 eps - 0.03 eps^2)} expanded
        let w = C64::new(0.0, -2.0 * std::f64::consts::PI);
        let d1 = w * 0.11;
        let d2 = w * (-0.03);
        let expect = [
            C64::new(1.0, 0.0),
            d1,
            d2 + d1 * d1 / 2.0,
            d1 * d2 + d1 * d1 * d1 / 6.0,
        ];
        for j in 0..=3 {
            let got = s.term(j).coeff(&[1])[0];
            assert!(
                (got - expect[j]).norm() < 1e-13,
                "order {}: {} vs {}",
                j,
                got,
                expect[j]
            );
        }
    }
}
