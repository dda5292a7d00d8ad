//! Fourier–Taylor polynomials: finite expansions `W(theta, s) = sum_p
//! W^(p)(theta) s^p` whose layers are truncated Fourier series on the
//! circle.  They parameterize a limit cycle (`s = 0`) together with its
//! isochrone foliation (`s` contracting at the Floquet rate).
//!
//! As an algebra this is a truncated polynomial ring in `s` over the torus
//! series; products beyond the stored degree are dropped and recorded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::TorusFourier;
use crate::jets::{apply_series, AlgebraCtx, AnalyticMap, Coeff, CoeffAlgebra};

/// `W(theta, s) = sum_{p=0..P} W^(p)(theta) s^p` with `d = 1` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTaylor {
    layers: Vec<TorusFourier>,
}

impl FourierTaylor {
    pub fn from_layers(layers: Vec<TorusFourier>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::ShapeMismatch("need at least the s^0 layer".into()))?;
        if first.dim() != 1 {
            return Err(Error::ShapeMismatch(
                "Fourier-Taylor layers live on the circle (d = 1)".into(),
            ));
        }
        let n = first.range_dim();
        for l in &layers {
            if l.dim() != 1 || l.range_dim() != n {
                return Err(Error::ShapeMismatch(
                    "all layers must share domain and range".into(),
                ));
            }
        }
        Ok(FourierTaylor { layers })
    }

    pub fn zeros(n: usize, cutoff: u32, s_degree: usize) -> Self {
        FourierTaylor {
            layers: (0..=s_degree).map(|_| TorusFourier::zeros(1, n, cutoff)).collect(),
        }
    }

    pub fn s_degree(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn range_dim(&self) -> usize {
        self.layers[0].range_dim()
    }

    pub fn cutoff(&self) -> u32 {
        self.layers.iter().map(|l| l.cutoff()).max().unwrap()
    }

    pub fn layer(&self, p: usize) -> &TorusFourier {
        &self.layers[p]
    }

    pub fn layers(&self) -> &[TorusFourier] {
        &self.layers
    }

    pub fn set_layer(&mut self, p: usize, layer: TorusFourier) {
        self.layers[p] = layer;
    }

    pub fn is_real(&self) -> bool {
        self.layers.iter().all(|l| l.is_real())
    }

    /// Pads or truncates to exactly `s_degree` layers (truncation is exact
    /// drop, no recording; used for shaping, not for products).
    pub fn resized(&self, s_degree: usize) -> Self {
        let mut layers = self.layers.clone();
        layers.truncate(s_degree + 1);
        while layers.len() < s_degree + 1 {
            layers.push(self.layers[0].zero_like());
        }
        FourierTaylor { layers }
    }

    /// `d/dtheta` applied layer-wise.
    pub fn deriv_theta(&self) -> Self {
        FourierTaylor {
            layers: self.layers.iter().map(|l| l.deriv_axis(0)).collect(),
        }
    }

    /// The operator `s d/ds`: layer `p` scales by `p`.
    pub fn s_dot_ds(&self) -> Self {
        FourierTaylor {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(p, l)| l.scale(p as f64))
                .collect(),
        }
    }

    /// `d/ds`: layer `p` moves to `p - 1` with factor `p`.
    pub fn ds(&self) -> Self {
        if self.layers.len() == 1 {
            return FourierTaylor {
                layers: vec![self.layers[0].zero_like()],
            };
        }
        FourierTaylor {
            layers: self
                .layers
                .iter()
                .enumerate()
                .skip(1)
                .map(|(p, l)| l.scale(p as f64))
                .collect(),
        }
    }

    /// Multiplication by `s` (degree shift up); the top layer falls out of
    /// the window and is recorded in the context.
    pub fn mul_s(&self, ctx: &AlgebraCtx) -> Self {
        let mut layers = Vec::with_capacity(self.layers.len());
        layers.push(self.layers[0].zero_like());
        for (p, l) in self.layers.iter().enumerate() {
            if p + 1 < self.layers.len() {
                layers.push(l.clone());
            } else if l.coeff_l1() > 0.0 {
                ctx.note_s_overflow(1);
            }
        }
        FourierTaylor { layers }
    }

    pub fn component(&self, i: usize) -> Self {
        FourierTaylor {
            layers: self.layers.iter().map(|l| l.component(i)).collect(),
        }
    }

    pub fn from_components(parts: &[FourierTaylor]) -> Result<Self> {
        let degree = parts
            .iter()
            .map(|p| p.s_degree())
            .max()
            .ok_or_else(|| Error::ShapeMismatch("need at least one component".into()))?;
        let mut layers = Vec::with_capacity(degree + 1);
        for p in 0..=degree {
            let comp_layers: Vec<TorusFourier> = parts
                .iter()
                .map(|c| {
                    if p <= c.s_degree() {
                        c.layer(p).clone()
                    } else {
                        c.layer(0).zero_like()
                    }
                })
                .collect();
            layers.push(TorusFourier::from_components(&comp_layers)?);
        }
        Ok(FourierTaylor { layers })
    }

    pub fn eval(&self, theta: f64, s: f64) -> Vec<crate::fourier::C64> {
        let mut acc = vec![crate::fourier::C64::default(); self.range_dim()];
        let mut sp = 1.0;
        for l in &self.layers {
            let v = l.eval(&[theta]);
            for (a, c) in acc.iter_mut().zip(v.iter()) {
                *a += c * sp;
            }
            sp *= s;
        }
        acc
    }

    pub fn eval_real(&self, theta: f64, s: f64) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.range_dim()];
        let mut sp = 1.0;
        for l in &self.layers {
            let v = l.eval_real(&[theta])?;
            for (a, c) in acc.iter_mut().zip(v.iter()) {
                *a += c * sp;
            }
            sp *= s;
        }
        Ok(acc)
    }

    /// Sup of the coefficient-l1 norms over layers, weighted by
    /// `s_max^p`: an upper bound for the sup norm on `|s| <= s_max`.
    pub fn norm_weighted(&self, s_max: f64) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(p, l)| l.coeff_l1() * s_max.powi(p as i32))
            .sum()
    }
}

impl Coeff for FourierTaylor {
    fn add(&self, rhs: &Self) -> Result<Self> {
        let degree = self.s_degree().max(rhs.s_degree());
        let a = self.resized(degree);
        let b = rhs.resized(degree);
        let layers: Result<Vec<TorusFourier>> = a
            .layers
            .iter()
            .zip(b.layers.iter())
            .map(|(x, y)| x.add(y))
            .collect();
        Ok(FourierTaylor { layers: layers? })
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        self.add(&rhs.neg())
    }
    fn neg(&self) -> Self {
        FourierTaylor {
            layers: self.layers.iter().map(|l| l.neg()).collect(),
        }
    }
    fn scale(&self, s: f64) -> Self {
        FourierTaylor {
            layers: self.layers.iter().map(|l| l.scale(s)).collect(),
        }
    }
    fn zero_like(&self) -> Self {
        FourierTaylor {
            layers: self.layers.iter().map(|l| l.zero_like()).collect(),
        }
    }
    fn norm(&self) -> f64 {
        self.layers.iter().map(|l| l.coeff_l1()).sum()
    }
}

impl CoeffAlgebra for FourierTaylor {
    /// Polynomial product in `s` with truncated-convolution layer products;
    /// the degree window is the larger operand degree, dropped content is
    /// recorded in the context.
    fn mul(&self, rhs: &Self, ctx: &AlgebraCtx) -> Result<Self> {
        let degree = self.s_degree().max(rhs.s_degree());
        let proto = self.layers[0]
            .prod(&rhs.layers[0], ctx.product_cutoff)?
            .zero_like();
        let mut layers = vec![proto; degree + 1];
        let mut overflow = 0u64;
        for (p, a) in self.layers.iter().enumerate() {
            if a.coeff_l1() == 0.0 {
                continue;
            }
            for (q, b) in rhs.layers.iter().enumerate() {
                if b.coeff_l1() == 0.0 {
                    continue;
                }
                if p + q > degree {
                    overflow += 1;
                    continue;
                }
                let prod = a.prod(b, ctx.product_cutoff)?;
                layers[p + q] = layers[p + q].add(&prod)?;
            }
        }
        if overflow > 0 {
            ctx.note_s_overflow(overflow);
        }
        Ok(FourierTaylor { layers })
    }

    fn one_like(&self) -> Self {
        let mut layers: Vec<TorusFourier> = self.layers.iter().map(|l| l.zero_like()).collect();
        layers[0] = self.layers[0].one_like();
        FourierTaylor { layers }
    }

    /// Analytic map of a Fourier–Taylor value: Taylor composition in `s`
    /// around the `s^0` layer, with the base case handled on the torus grid.
    fn apply_order0(&self, phi: AnalyticMap, ctx: &AlgebraCtx) -> Result<Self> {
        if self.range_dim() != 1 {
            return Err(Error::ShapeMismatch(
                "analytic maps act on scalar-valued polynomials".into(),
            ));
        }
        let layers = apply_series(phi, &self.layers, ctx)?;
        Ok(FourierTaylor { layers })
    }

    /// Conservative lower bound for `|W|` on `|s| <= 1`: the layer-0
    /// minimum minus the other layers' sup norms.
    fn min_abs(&self, ctx: &AlgebraCtx) -> f64 {
        let base = self.layers[0].min_abs(ctx);
        let rest: f64 = self.layers.iter().skip(1).map(|l| l.coeff_l1()).sum();
        (base - rest).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::C64;
    use approx::assert_relative_eq;

    fn ctx() -> AlgebraCtx {
        AlgebraCtx::new(16)
    }

    fn sample_ft() -> FourierTaylor {
        // 1 + 0.3 cos(2 pi theta) + s (0.2 sin) + s^2 (0.1)
        let l0 = TorusFourier::constant(1, &[1.0], 8)
            .add(&TorusFourier::cosine(1, &[1], 0.3, 8))
            .unwrap();
        let l1 = TorusFourier::sine(1, &[1], 0.2, 8);
        let l2 = TorusFourier::constant(1, &[0.1], 8);
        FourierTaylor::from_layers(vec![l0, l1, l2]).unwrap()
    }

    #[test]
    fn mul_matches_pointwise() {
        let w = sample_ft();
        let p = w.mul(&w, &ctx()).unwrap();
        // products beyond degree 2 are dropped; compare the retained window
        // against a manual convolution
        for (theta, s) in [(0.13, 0.2), (0.41, -0.3), (0.77, 0.0)] {
            let full: f64 = {
                let a = w.eval_real(theta, s).unwrap()[0];
                a * a
            };
            let kept = p.eval_real(theta, s).unwrap()[0];
            // dropped degree-3/4 terms explain the gap
            let l1 = w.layer(1).eval_real(&[theta]).unwrap()[0];
            let l2 = w.layer(2).eval_real(&[theta]).unwrap()[0];
            let dropped = 2.0 * l1 * l2 * s.powi(3) + l2 * l2 * s.powi(4);
            assert_relative_eq!(kept + dropped, full, epsilon = 1e-12);
        }
        assert!(ctx().s_overflow_count() == 0);
    }

    #[test]
    fn s_operators() {
        let w = sample_ft();
        let sdds = w.s_dot_ds();
        // s d/ds picks out p * layer_p
        assert_eq!(sdds.layer(0).coeff_l1(), 0.0);
        assert_relative_eq!(
            sdds.layer(2).average()[0].re,
            2.0 * w.layer(2).average()[0].re,
            epsilon = 1e-15
        );
        let ds = w.ds();
        assert_eq!(ds.s_degree(), 1);
        assert_relative_eq!(
            ds.layer(1).average()[0].re,
            2.0 * w.layer(2).average()[0].re,
            epsilon = 1e-15
        );
    }

    #[test]
    fn apply_exp_matches_pointwise() {
        let w = sample_ft();
        let c = ctx();
        let e = w.apply_order0(AnalyticMap::Exp, &c).unwrap();
        // degree-2 Taylor of exp(w) in s around layer 0, checked pointwise
        // with small s where the truncation error is cubic
        for (theta, s) in [(0.1, 0.01), (0.6, -0.02)] {
            let exact = w.eval_real(theta, s).unwrap()[0].exp();
            let got = e.eval_real(theta, s).unwrap()[0];
            assert!((got - exact).abs() < 1e-5 * exact.abs());
        }
    }

    #[test]
    fn overflow_recorded() {
        let c = ctx();
        let w = sample_ft();
        let _ = w.mul(&w, &c).unwrap();
        assert!(c.s_overflow_count() > 0);
    }

    #[test]
    fn eval_mixes_layers() {
        let w = sample_ft();
        let v = w.eval_real(0.25, 0.5).unwrap()[0];
        let l0 = w.layer(0).eval_real(&[0.25]).unwrap()[0];
        let l1 = w.layer(1).eval_real(&[0.25]).unwrap()[0];
        let l2 = w.layer(2).eval_real(&[0.25]).unwrap()[0];
        assert_relative_eq!(v, l0 + 0.5 * l1 + 0.25 * l2, epsilon = 1e-14);
    }
}
