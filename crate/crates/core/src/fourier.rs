//! Truncated vector-valued Fourier series on the torus `T^d`.
//!
//! Every angular object in the library (torus embeddings, residuals,
//! frames, delay amounts) is a [`TorusFourier`]: a finite collection of
//! modes `u_k e^{2pi i k.theta}` with `|k|_1` below a cutoff.  Storage is
//! a sparse map keyed by the mode vector; all operations are pure.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type C64 = Complex64;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Relative bound on the imaginary residue tolerated when evaluating a
/// series that declares itself real-valued.
pub const REALITY_EVAL_TOL: f64 = 1e-12;

/// `|k|_1` of a mode vector.
pub fn l1_norm(k: &[i32]) -> u32 {
    k.iter().map(|&ki| ki.unsigned_abs()).sum()
}

/// Truncated Fourier series `theta -> sum_k u_k e^{2 pi i k.theta}` with
/// values in `C^n` (declared real-valued when `real` is set).
#[derive(Debug, Clone, PartialEq)]
pub struct TorusFourier {
    d: usize,
    n: usize,
    cutoff: u32,
    real: bool,
    xi: Option<f64>,
    coeffs: BTreeMap<Vec<i32>, Vec<C64>>,
}

impl TorusFourier {
    /// The zero function, declared real.
    pub fn zeros(d: usize, n: usize, cutoff: u32) -> Self {
        assert!(d >= 1 && n >= 1);
        TorusFourier {
            d,
            n,
            cutoff,
            real: true,
            xi: None,
            coeffs: BTreeMap::new(),
        }
    }

    /// Constant function with the given real value.
    pub fn constant(d: usize, values: &[f64], cutoff: u32) -> Self {
        let mut u = Self::zeros(d, values.len(), cutoff);
        let v: Vec<C64> = values.iter().map(|&x| C64::new(x, 0.0)).collect();
        if v.iter().any(|c| c.norm_sqr() != 0.0) {
            u.coeffs.insert(vec![0; d], v);
        }
        u
    }

    /// Builds a series from explicit complex modes.  When `real` is set the
    /// conjugate-symmetry invariant is verified exactly.
    pub fn from_modes<I>(d: usize, n: usize, cutoff: u32, real: bool, modes: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<i32>, Vec<C64>)>,
    {
        let mut coeffs: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        for (k, v) in modes {
            if k.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "mode vector length {} does not match torus dimension {}",
                    k.len(),
                    d
                )));
            }
            if v.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "coefficient length {} does not match range dimension {}",
                    v.len(),
                    n
                )));
            }
            if l1_norm(&k) > cutoff {
                return Err(Error::ShapeMismatch(format!(
                    "mode {:?} exceeds cutoff {}",
                    k, cutoff
                )));
            }
            if v.iter().any(|c| c.norm_sqr() != 0.0) {
                let entry = coeffs.entry(k).or_insert_with(|| vec![C64::default(); n]);
                for (e, c) in entry.iter_mut().zip(v.iter()) {
                    *e += c;
                }
            }
        }
        let u = TorusFourier {
            d,
            n,
            cutoff,
            real,
            xi: None,
            coeffs,
        };
        if real {
            u.check_conjugate_symmetry()?;
        }
        Ok(u)
    }

    /// Builds a real series from modes given for half of `Z^d`: for every
    /// supplied `(k, v)` the mode `-k` is filled with the conjugate.
    /// Entries at `k = 0` must be real.
    pub fn from_half_modes<I>(d: usize, n: usize, cutoff: u32, modes: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<i32>, Vec<C64>)>,
    {
        let mut all: Vec<(Vec<i32>, Vec<C64>)> = Vec::new();
        for (k, v) in modes {
            if k.iter().all(|&ki| ki == 0) {
                let real_part: Vec<C64> = v.iter().map(|c| C64::new(c.re, 0.0)).collect();
                all.push((k, real_part));
            } else {
                let neg: Vec<i32> = k.iter().map(|&ki| -ki).collect();
                let conj: Vec<C64> = v.iter().map(|c| c.conj()).collect();
                all.push((k, v));
                all.push((neg, conj));
            }
        }
        Self::from_modes(d, n, cutoff, true, all)
    }

    /// `a cos(2 pi k.theta)` as a real scalar series (n = 1).
    pub fn cosine(d: usize, k: &[i32], amplitude: f64, cutoff: u32) -> Self {
        let half = C64::new(amplitude / 2.0, 0.0);
        Self::from_half_modes(d, 1, cutoff, [(k.to_vec(), vec![half])]).expect("valid cosine mode")
    }

    /// `a sin(2 pi k.theta)` as a real scalar series (n = 1).
    pub fn sine(d: usize, k: &[i32], amplitude: f64, cutoff: u32) -> Self {
        // sin = (e^{ik} - e^{-ik}) / 2i, so the +k coefficient is a/(2i).
        let half = C64::new(0.0, -amplitude / 2.0);
        Self::from_half_modes(d, 1, cutoff, [(k.to_vec(), vec![half])]).expect("valid sine mode")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn range_dim(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> u32 {
        self.cutoff
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn xi(&self) -> Option<f64> {
        self.xi
    }

    pub fn with_xi(mut self, xi: f64) -> Self {
        self.xi = Some(xi);
        self
    }

    /// Marks the series as not-necessarily-real (used by solvers that divide
    /// by complex divisors).
    pub fn into_complex(mut self) -> Self {
        self.real = false;
        self
    }

    /// Declares the series real after verifying conjugate symmetry within
    /// `tol` (relative to the largest coefficient), symmetrizing exactly.
    pub fn into_real_checked(mut self, tol: f64) -> Result<Self> {
        let scale = self.coeff_sup().max(1e-300);
        let keys: Vec<Vec<i32>> = self.coeffs.keys().cloned().collect();
        let mut sym: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        for k in &keys {
            let neg: Vec<i32> = k.iter().map(|&ki| -ki).collect();
            let v = self.coeffs.get(k).cloned().unwrap_or_else(|| vec![C64::default(); self.n]);
            let w = self
                .coeffs
                .get(&neg)
                .cloned()
                .unwrap_or_else(|| vec![C64::default(); self.n]);
            let mut out = vec![C64::default(); self.n];
            let mut defect: f64 = 0.0;
            for i in 0..self.n {
                let avg = (v[i] + w[i].conj()) * 0.5;
                defect = defect.max((v[i] - w[i].conj()).norm());
                out[i] = avg;
            }
            if defect > tol * scale {
                return Err(Error::Internal(format!(
                    "conjugate-symmetry defect {:.3e} above {:.3e} at mode {:?}",
                    defect,
                    tol * scale,
                    k
                )));
            }
            if out.iter().any(|c| c.norm_sqr() != 0.0) {
                sym.insert(k.clone(), out);
            }
        }
        self.coeffs = sym;
        self.real = true;
        Ok(self)
    }

    fn check_conjugate_symmetry(&self) -> Result<()> {
        for (k, v) in &self.coeffs {
            let neg: Vec<i32> = k.iter().map(|&ki| -ki).collect();
            let w = self.coeffs.get(&neg);
            for i in 0..self.n {
                let other = w.map(|w| w[i]).unwrap_or_default();
                if v[i] != other.conj() {
                    return Err(Error::ShapeMismatch(format!(
                        "real series violates conjugate symmetry at mode {:?}",
                        k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn modes(&self) -> impl Iterator<Item = (&Vec<i32>, &Vec<C64>)> {
        self.coeffs.iter()
    }

    pub fn mode_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeff(&self, k: &[i32]) -> Vec<C64> {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| vec![C64::default(); self.n])
    }

    fn same_domain(&self, rhs: &Self) -> Result<()> {
        if self.d != rhs.d {
            return Err(Error::ShapeMismatch(format!(
                "torus dimensions differ: {} vs {}",
                self.d, rhs.d
            )));
        }
        Ok(())
    }

    /// Coefficient-wise sum; the result keeps the larger cutoff.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_domain(rhs)?;
        if self.n != rhs.n {
            return Err(Error::ShapeMismatch(format!(
                "range dimensions differ: {} vs {}",
                self.n, rhs.n
            )));
        }
        let mut out = self.clone();
        out.cutoff = self.cutoff.max(rhs.cutoff);
        out.real = self.real && rhs.real;
        out.xi = match (self.xi, rhs.xi) {
            (Some(a), Some(b)) => Some(a.min(b)),
            _ => None,
        };
        for (k, v) in &rhs.coeffs {
            let entry = out
                .coeffs
                .entry(k.clone())
                .or_insert_with(|| vec![C64::default(); self.n]);
            for (e, c) in entry.iter_mut().zip(v.iter()) {
                *e += c;
            }
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.add(&rhs.neg())
    }

    pub fn neg(&self) -> Self {
        let mut out = self.clone();
        for v in out.coeffs.values_mut() {
            for c in v.iter_mut() {
                *c = -*c;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in out.coeffs.values_mut() {
            for c in v.iter_mut() {
                *c *= s;
            }
        }
        out.prune();
        out
    }

    pub fn scale_complex(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.real = out.real && s.im == 0.0;
        for v in out.coeffs.values_mut() {
            for c in v.iter_mut() {
                *c *= s;
            }
        }
        out.prune();
        out
    }

    fn prune(&mut self) {
        self.coeffs.retain(|_, v| v.iter().any(|c| c.norm_sqr() != 0.0));
    }

    /// Truncated convolution product.  Ranges must be compatible:
    /// equal `n` multiplies componentwise, `n = 1` on either side
    /// broadcasts.  Modes with `|k|_1` beyond `cap` are discarded; the
    /// result cutoff is `min(self.cutoff + rhs.cutoff, cap)`.
    pub fn prod(&self, rhs: &Self, cap: u32) -> Result<Self> {
        self.same_domain(rhs)?;
        let n_out = if self.n == rhs.n {
            self.n
        } else if self.n == 1 {
            rhs.n
        } else if rhs.n == 1 {
            self.n
        } else {
            return Err(Error::ShapeMismatch(format!(
                "incompatible ranges for product: {} vs {}",
                self.n, rhs.n
            )));
        };
        let cutoff = (self.cutoff + rhs.cutoff).min(cap);
        let mut coeffs: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        let mut key = vec![0i32; self.d];
        for (ka, va) in &self.coeffs {
            for (kb, vb) in &rhs.coeffs {
                for i in 0..self.d {
                    key[i] = ka[i] + kb[i];
                }
                if l1_norm(&key) > cutoff {
                    continue;
                }
                let entry = coeffs
                    .entry(key.clone())
                    .or_insert_with(|| vec![C64::default(); n_out]);
                match (self.n, rhs.n) {
                    (a, b) if a == b => {
                        for i in 0..n_out {
                            entry[i] += va[i] * vb[i];
                        }
                    }
                    (1, _) => {
                        for i in 0..n_out {
                            entry[i] += va[0] * vb[i];
                        }
                    }
                    _ => {
                        for i in 0..n_out {
                            entry[i] += va[i] * vb[0];
                        }
                    }
                }
            }
        }
        let mut out = TorusFourier {
            d: self.d,
            n: n_out,
            cutoff,
            real: self.real && rhs.real,
            xi: None,
            coeffs,
        };
        out.prune();
        Ok(out)
    }

    /// Bilinear pairing `sum_i u_i v_i` as a scalar series (truncated at `cap`).
    pub fn dot(&self, rhs: &Self, cap: u32) -> Result<Self> {
        self.same_domain(rhs)?;
        if self.n != rhs.n {
            return Err(Error::ShapeMismatch(format!(
                "dot pairing needs equal ranges: {} vs {}",
                self.n, rhs.n
            )));
        }
        let cutoff = (self.cutoff + rhs.cutoff).min(cap);
        let mut coeffs: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        let mut key = vec![0i32; self.d];
        for (ka, va) in &self.coeffs {
            for (kb, vb) in &rhs.coeffs {
                for i in 0..self.d {
                    key[i] = ka[i] + kb[i];
                }
                if l1_norm(&key) > cutoff {
                    continue;
                }
                let s: C64 = va.iter().zip(vb.iter()).map(|(a, b)| a * b).sum();
                let entry = coeffs.entry(key.clone()).or_insert_with(|| vec![C64::default()]);
                entry[0] += s;
            }
        }
        let mut out = TorusFourier {
            d: self.d,
            n: 1,
            cutoff,
            real: self.real && rhs.real,
            xi: None,
            coeffs,
        };
        out.prune();
        Ok(out)
    }

    /// Exact average of the pointwise pairing `<sum_i u_i v_i>` over the
    /// torus, computed as a mode sum (no truncation loss).
    pub fn dot_average(&self, rhs: &Self) -> Result<C64> {
        self.same_domain(rhs)?;
        if self.n != rhs.n {
            return Err(Error::ShapeMismatch(format!(
                "dot pairing needs equal ranges: {} vs {}",
                self.n, rhs.n
            )));
        }
        let mut total = C64::default();
        let mut neg = vec![0i32; self.d];
        for (k, va) in &self.coeffs {
            for i in 0..self.d {
                neg[i] = -k[i];
            }
            if let Some(vb) = rhs.coeffs.get(&neg) {
                total += va.iter().zip(vb.iter()).map(|(a, b)| a * b).sum::<C64>();
            }
        }
        Ok(total)
    }

    /// Directional derivative `(w . d_theta) u`: mode `k` picks up the
    /// factor `2 pi i (w . k)`.
    pub fn deriv_dir(&self, w: &[f64]) -> Result<Self> {
        if w.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "frequency vector length {} does not match torus dimension {}",
                w.len(),
                self.d
            )));
        }
        let mut out = self.clone();
        out.coeffs = BTreeMap::new();
        for (k, v) in &self.coeffs {
            let wk: f64 = k.iter().zip(w.iter()).map(|(&ki, &wi)| wi * ki as f64).sum();
            if wk == 0.0 {
                continue;
            }
            let factor = C64::new(0.0, TWO_PI * wk);
            out.coeffs
                .insert(k.clone(), v.iter().map(|c| c * factor).collect());
        }
        out.prune();
        Ok(out)
    }

    /// Partial derivative along torus coordinate `axis`.
    pub fn deriv_axis(&self, axis: usize) -> Self {
        let mut w = vec![0.0; self.d];
        w[axis] = 1.0;
        self.deriv_dir(&w).expect("axis within dimension")
    }

    /// Constant shift `theta -> u(theta - delta)`: mode `k` is multiplied by
    /// `e^{-2 pi i k.delta}`.
    pub fn shift_const(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "shift vector length {} does not match torus dimension {}",
                delta.len(),
                self.d
            )));
        }
        let mut out = self.clone();
        out.coeffs = BTreeMap::new();
        for (k, v) in &self.coeffs {
            let kd: f64 = k
                .iter()
                .zip(delta.iter())
                .map(|(&ki, &di)| di * ki as f64)
                .sum();
            let factor = C64::from_polar(1.0, -TWO_PI * kd);
            out.coeffs
                .insert(k.clone(), v.iter().map(|c| c * factor).collect());
        }
        Ok(out)
    }

    /// The `k = 0` coefficient.
    pub fn average(&self) -> Vec<C64> {
        self.coeff(&vec![0; self.d])
    }

    /// Real part of the average (valid for real series).
    pub fn average_real(&self) -> Vec<f64> {
        self.average().iter().map(|c| c.re).collect()
    }

    /// Replaces the `k = 0` coefficient.
    pub fn set_average(&mut self, value: &[C64]) {
        assert_eq!(value.len(), self.n);
        let key = vec![0; self.d];
        if value.iter().any(|c| c.norm_sqr() != 0.0) {
            self.coeffs.insert(key, value.to_vec());
        } else {
            self.coeffs.remove(&key);
        }
    }

    /// Weighted coefficient norm `sum_k e^{xi 2 pi |k|_1} ||u_k||_2`.
    pub fn norm_xi(&self, xi: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, v)| {
                let w = (xi * TWO_PI * l1_norm(k) as f64).exp();
                let mag: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                w * mag
            })
            .sum()
    }

    /// Plain `l1` of coefficient Euclidean norms (`norm_xi` at `xi = 0`).
    pub fn coeff_l1(&self) -> f64 {
        self.norm_xi(0.0)
    }

    /// Largest coefficient Euclidean norm.
    pub fn coeff_sup(&self) -> f64 {
        self.coeffs
            .values()
            .map(|v| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Sum of squared coefficient norms (Parseval mass).
    pub fn coeff_l2_sqr(&self) -> f64 {
        self.coeffs
            .values()
            .map(|v| v.iter().map(|c| c.norm_sqr()).sum::<f64>())
            .sum()
    }

    /// Complex evaluation `sum_k u_k e^{2 pi i k.theta}`.
    pub fn eval(&self, theta: &[f64]) -> Vec<C64> {
        assert_eq!(theta.len(), self.d);
        let mut acc = vec![C64::default(); self.n];
        for (k, v) in &self.coeffs {
            let phase: f64 = k
                .iter()
                .zip(theta.iter())
                .map(|(&ki, &ti)| ki as f64 * ti)
                .sum();
            let e = C64::from_polar(1.0, TWO_PI * phase);
            for (a, c) in acc.iter_mut().zip(v.iter()) {
                *a += c * e;
            }
        }
        acc
    }

    /// Real evaluation; checks the imaginary residue invariant for real
    /// series and errors when it is violated.
    pub fn eval_real(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let v = self.eval(theta);
        if self.real {
            let budget = REALITY_EVAL_TOL * self.coeff_l1();
            for c in &v {
                if c.im.abs() > budget && c.im.abs() > 1e-300 {
                    return Err(Error::Internal(format!(
                        "imaginary residue {:.3e} above budget {:.3e} on a real series",
                        c.im.abs(),
                        budget
                    )));
                }
            }
        }
        Ok(v.iter().map(|c| c.re).collect())
    }

    /// Extracts one range component as a scalar series.
    pub fn component(&self, i: usize) -> Self {
        assert!(i < self.n);
        let mut coeffs = BTreeMap::new();
        for (k, v) in &self.coeffs {
            if v[i].norm_sqr() != 0.0 {
                coeffs.insert(k.clone(), vec![v[i]]);
            }
        }
        TorusFourier {
            d: self.d,
            n: 1,
            cutoff: self.cutoff,
            real: self.real,
            xi: self.xi,
            coeffs,
        }
    }

    /// Reassembles a vector-valued series from scalar components.
    pub fn from_components(parts: &[TorusFourier]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| {
            Error::ShapeMismatch("from_components needs at least one component".into())
        })?;
        let d = first.d;
        let n = parts.len();
        let cutoff = parts.iter().map(|p| p.cutoff).max().unwrap();
        let real = parts.iter().all(|p| p.real);
        let mut coeffs: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        for (i, p) in parts.iter().enumerate() {
            if p.d != d || p.n != 1 {
                return Err(Error::ShapeMismatch(
                    "components must be scalar series on the same torus".into(),
                ));
            }
            for (k, v) in &p.coeffs {
                let entry = coeffs
                    .entry(k.clone())
                    .or_insert_with(|| vec![C64::default(); n]);
                entry[i] = v[0];
            }
        }
        Ok(TorusFourier {
            d,
            n,
            cutoff,
            real,
            xi: None,
            coeffs,
        })
    }

    /// Drops modes with coefficient norm below `tol` (used to keep stored
    /// series sparse after long op chains; exact zero keeps everything).
    pub fn trim(&self, tol: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.retain(|_, v| {
            v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() > tol
        });
        out
    }

    /// Restricts to modes with `|k|_1 <= cutoff`.
    pub fn truncate(&self, cutoff: u32) -> Self {
        let mut out = self.clone();
        out.cutoff = cutoff;
        out.coeffs.retain(|k, _| l1_norm(k) <= cutoff);
        out
    }

    // ---- grid sampling and projection -------------------------------------

    /// Equispaced grid size per dimension that interpolates this cutoff
    /// exactly, scaled by `oversample`.
    pub fn grid_size(cutoff: u32, oversample: usize) -> usize {
        (2 * cutoff as usize + 1) * oversample.max(1)
    }

    /// Evaluates on the tensor-product equispaced grid with `m` points per
    /// dimension; returns values in row-major order over the grid multi-index.
    pub fn sample_grid(&self, m: usize) -> Vec<Vec<C64>> {
        let total = m.pow(self.d as u32);
        let mut out = Vec::with_capacity(total);
        let mut theta = vec![0.0; self.d];
        for flat in 0..total {
            let mut rest = flat;
            for i in (0..self.d).rev() {
                theta[i] = (rest % m) as f64 / m as f64;
                rest /= m;
            }
            out.push(self.eval(&theta));
        }
        out
    }

    /// Projects grid values (see [`Self::sample_grid`]) onto modes with
    /// `|k|_1 <= cutoff`.  Exact for trigonometric polynomials of degree
    /// `<= (m-1)/2`; higher content is aliased.
    pub fn project_grid(
        d: usize,
        n: usize,
        cutoff: u32,
        real: bool,
        m: usize,
        values: &[Vec<C64>],
    ) -> Result<Self> {
        assert_eq!(values.len(), m.pow(d as u32));
        let mut coeffs: BTreeMap<Vec<i32>, Vec<C64>> = BTreeMap::new();
        let mut stack: Vec<Vec<i32>> = vec![vec![]];
        for _ in 0..d {
            let mut next = Vec::new();
            for partial in &stack {
                let used: u32 = partial.iter().map(|&x: &i32| x.unsigned_abs()).sum();
                let budget = cutoff - used.min(cutoff);
                for k in -(budget as i32)..=(budget as i32) {
                    let mut kk = partial.clone();
                    kk.push(k);
                    next.push(kk);
                }
            }
            stack = next;
        }
        let norm = 1.0 / m.pow(d as u32) as f64;
        let mut theta = vec![0.0; d];
        for k in stack {
            if l1_norm(&k) > cutoff {
                continue;
            }
            let mut acc = vec![C64::default(); n];
            for (flat, v) in values.iter().enumerate() {
                let mut rest = flat;
                for i in (0..d).rev() {
                    theta[i] = (rest % m) as f64 / m as f64;
                    rest /= m;
                }
                let phase: f64 = k
                    .iter()
                    .zip(theta.iter())
                    .map(|(&ki, &ti)| ki as f64 * ti)
                    .sum();
                let e = C64::from_polar(1.0, -TWO_PI * phase);
                for (a, c) in acc.iter_mut().zip(v.iter()) {
                    *a += c * e;
                }
            }
            for a in acc.iter_mut() {
                *a *= norm;
            }
            coeffs.insert(k, acc);
        }
        let mut out = TorusFourier {
            d,
            n,
            cutoff,
            real: false,
            xi: None,
            coeffs,
        };
        out.prune();
        if real {
            out = out.into_real_checked(1e-8)?;
        }
        Ok(out)
    }

    /// Applies a real scalar map pointwise on an oversampled grid and
    /// re-expands to `out_cutoff` modes.  Requires a real scalar series.
    pub fn map_pointwise_real<F>(&self, f: F, oversample: usize, out_cutoff: u32) -> Result<Self>
    where
        F: Fn(f64) -> f64,
    {
        if self.n != 1 {
            return Err(Error::ShapeMismatch(
                "pointwise maps need a scalar series".into(),
            ));
        }
        if !self.real {
            return Err(Error::ShapeMismatch(
                "pointwise analytic maps are defined for real series only".into(),
            ));
        }
        let m = Self::grid_size(self.cutoff.max(out_cutoff), oversample);
        let values = self.sample_grid(m);
        let budget = REALITY_EVAL_TOL * self.coeff_l1().max(1e-300);
        let mapped: Vec<Vec<C64>> = values
            .iter()
            .map(|v| {
                let x = v[0];
                debug_assert!(x.im.abs() <= budget.max(1e-9));
                vec![C64::new(f(x.re), 0.0)]
            })
            .collect();
        Self::project_grid(self.d, 1, out_cutoff, true, m, &mapped)
    }

    /// Smallest absolute value attained on the sampling grid (used for
    /// singularity floors before reciprocal and square-root maps).
    pub fn min_abs_on_grid(&self, oversample: usize) -> f64 {
        let m = Self::grid_size(self.cutoff, oversample);
        self.sample_grid(m)
            .iter()
            .map(|v| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

// ---- JSON schema -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModeJson {
    k: Vec<i32>,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TorusFourierJson {
    d: usize,
    n: usize,
    cutoff: u32,
    real: bool,
    coeffs: Vec<ModeJson>,
}

impl Serialize for TorusFourier {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, v)| ModeJson {
                k: k.clone(),
                re: v.iter().map(|c| c.re).collect(),
                im: v.iter().map(|c| c.im).collect(),
            })
            .collect();
        TorusFourierJson {
            d: self.d,
            n: self.n,
            cutoff: self.cutoff,
            real: self.real,
            coeffs,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TorusFourier {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = TorusFourierJson::deserialize(deserializer)?;
        let modes = raw.coeffs.into_iter().map(|m| {
            let v: Vec<C64> = m
                .re
                .iter()
                .zip(m.im.iter())
                .map(|(&re, &im)| C64::new(re, im))
                .collect();
            (m.k, v)
        });
        TorusFourier::from_modes(raw.d, raw.n, raw.cutoff, raw.real, modes)
            .map_err(|e| D::Error::custom(e.to_string()))
    }
}

// ---- matrices of scalar series ---------------------------------------------

/// Dense matrix with truncated-Fourier scalar entries (row-major).
#[derive(Debug, Clone)]
pub struct TfMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<TorusFourier>,
}

impl TfMatrix {
    pub fn from_columns(cols: &[TorusFourier]) -> Result<Self> {
        let first = cols
            .first()
            .ok_or_else(|| Error::ShapeMismatch("matrix needs at least one column".into()))?;
        let rows = first.range_dim();
        let mut entries = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            for c in cols {
                if c.range_dim() != rows {
                    return Err(Error::ShapeMismatch(
                        "all columns must share the range dimension".into(),
                    ));
                }
                entries.push(c.component(r));
            }
        }
        Ok(TfMatrix {
            rows,
            cols: cols.len(),
            entries,
        })
    }

    pub fn entry(&self, r: usize, c: usize) -> &TorusFourier {
        &self.entries[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Result<TorusFourier> {
        let parts: Vec<TorusFourier> = (0..self.rows).map(|r| self.entry(r, c).clone()).collect();
        TorusFourier::from_components(&parts)
    }

    /// Applies the matrix to a vector-valued series.
    pub fn matvec(&self, v: &TorusFourier, cap: u32) -> Result<TorusFourier> {
        if v.range_dim() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {} columns vs vector range {}",
                self.cols,
                v.range_dim()
            )));
        }
        let mut parts = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let mut acc: Option<TorusFourier> = None;
            for c in 0..self.cols {
                let term = self.entry(r, c).prod(&v.component(c), cap)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            parts.push(acc.unwrap());
        }
        TorusFourier::from_components(&parts)
    }

    pub fn matmul(&self, rhs: &TfMatrix, cap: u32) -> Result<TfMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch("matmul shape mismatch".into()));
        }
        let mut entries = Vec::with_capacity(self.rows * rhs.cols);
        for r in 0..self.rows {
            for c in 0..rhs.cols {
                let mut acc: Option<TorusFourier> = None;
                for k in 0..self.cols {
                    let term = self.entry(r, k).prod(rhs.entry(k, c), cap)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term)?,
                    });
                }
                entries.push(acc.unwrap());
            }
        }
        Ok(TfMatrix {
            rows: self.rows,
            cols: rhs.cols,
            entries,
        })
    }

    pub fn eval(&self, theta: &[f64]) -> nalgebra::DMatrix<C64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| self.entry(r, c).eval(theta)[0])
    }

    /// Pointwise inverse by collocation on an oversampled grid, re-expanded
    /// to `out_cutoff` modes.
    pub fn invert_collocation(&self, oversample: usize, out_cutoff: u32) -> Result<TfMatrix> {
        if self.rows != self.cols {
            return Err(Error::ShapeMismatch("only square matrices invert".into()));
        }
        let d = self.entries[0].dim();
        let max_cut = self
            .entries
            .iter()
            .map(|e| e.cutoff())
            .max()
            .unwrap_or(out_cutoff);
        let m = TorusFourier::grid_size(max_cut.max(out_cutoff), oversample);
        let total = m.pow(d as u32);
        let mut values: Vec<Vec<Vec<C64>>> =
            vec![vec![vec![C64::default()]; total]; self.rows * self.cols];
        let mut theta = vec![0.0; d];
        for flat in 0..total {
            let mut rest = flat;
            for i in (0..d).rev() {
                theta[i] = (rest % m) as f64 / m as f64;
                rest /= m;
            }
            let a = self.eval(&theta);
            let inv = a.clone().try_inverse().ok_or_else(|| {
                Error::FrameDegeneracy(format!("frame matrix singular at theta = {:?}", theta))
            })?;
            for r in 0..self.rows {
                for c in 0..self.cols {
                    values[r * self.cols + c][flat][0] = inv[(r, c)];
                }
            }
        }
        let real = self.entries.iter().all(|e| e.is_real());
        let mut entries = Vec::with_capacity(self.rows * self.cols);
        for vals in values {
            entries.push(TorusFourier::project_grid(d, 1, out_cutoff, real, m, &vals)?);
        }
        Ok(TfMatrix {
            rows: self.rows,
            cols: self.cols,
            entries,
        })
    }

    pub fn coeff_sup(&self) -> f64 {
        self.entries.iter().map(|e| e.coeff_sup()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real_series(rng: &mut ChaCha8Rng, d: usize, n: usize, cutoff: u32) -> TorusFourier {
        let mut modes = Vec::new();
        let mut stack: Vec<Vec<i32>> = vec![vec![]];
        for _ in 0..d {
            let mut next = Vec::new();
            for p in &stack {
                for k in -(cutoff as i32)..=(cutoff as i32) {
                    let mut kk = p.clone();
                    kk.push(k);
                    next.push(kk);
                }
            }
            stack = next;
        }
        for k in stack {
            if l1_norm(&k) > cutoff {
                continue;
            }
            let v: Vec<C64> = (0..n)
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            modes.push((k, v));
        }
        // Symmetrize to obtain a real-valued function.
        let sym: Vec<(Vec<i32>, Vec<C64>)> = modes
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|c| c.scale(0.5)).collect()))
            .collect();
        let mut both = sym.clone();
        for (k, v) in sym {
            both.push((k.iter().map(|x| -x).collect(), v.iter().map(|c| c.conj()).collect()));
        }
        TorusFourier::from_modes(d, n, cutoff, true, both).unwrap()
    }

    fn random_theta(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn add_identity_and_linearity() {
        let u = TorusFourier::cosine(1, &[1], 1.0, 4);
        let z = TorusFourier::zeros(1, 1, 4);
        assert_eq!(u.add(&z).unwrap(), u);
        let two = u.add(&u).unwrap();
        assert_eq!(two.coeff(&[1])[0], C64::new(1.0, 0.0));
    }

    #[test]
    fn add_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_real_series(&mut rng, 1, 2, 6);
        let q = random_real_series(&mut rng, 1, 2, 6);
        let s = p.add(&q).unwrap();
        for _ in 0..100 {
            let th = random_theta(&mut rng, 1);
            let a = p.eval(&th);
            let b = q.eval(&th);
            let c = s.eval(&th);
            for i in 0..2 {
                assert!((c[i] - (a[i] + b[i])).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn prod_cosine_identity() {
        // cos^2 = 1/2 + cos(2.)/2
        let u = TorusFourier::cosine(1, &[1], 1.0, 8);
        let p = u.prod(&u, 16).unwrap();
        assert_relative_eq!(p.coeff(&[0])[0].re, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.coeff(&[2])[0].re, 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.coeff(&[-2])[0].re, 0.25, epsilon = 1e-15);
        let one = TorusFourier::constant(1, &[1.0], 8);
        assert_eq!(u.prod(&one, 16).unwrap().coeff(&[1]), u.coeff(&[1]));
    }

    #[test]
    fn prod_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_real_series(&mut rng, 1, 1, 8);
        let q = random_real_series(&mut rng, 1, 1, 8);
        let s = p.prod(&q, 16).unwrap();
        for _ in 0..100 {
            let th = random_theta(&mut rng, 1);
            let a = p.eval(&th)[0];
            let b = q.eval(&th)[0];
            let c = s.eval(&th)[0];
            assert!((c - a * b).norm() < 1e-12 * (1.0 + (a * b).norm()));
        }
    }

    #[test]
    fn prod_ring_axioms_exact_coeffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_real_series(&mut rng, 2, 1, 3);
        let b = random_real_series(&mut rng, 2, 1, 3);
        let c = random_real_series(&mut rng, 2, 1, 3);
        let cap = 12; // total degree bounded by 9 < cap: products are exact
        let ab = a.prod(&b, cap).unwrap();
        let ba = b.prod(&a, cap).unwrap();
        for (k, v) in ab.modes() {
            let w = ba.coeff(k);
            for i in 0..1 {
                assert!((v[i] - w[i]).norm() < 1e-13);
            }
        }
        let bc = b.add(&c).unwrap();
        let left = a.prod(&bc, cap).unwrap();
        let right = a.prod(&b, cap).unwrap().add(&a.prod(&c, cap).unwrap()).unwrap();
        for (k, v) in left.modes() {
            let w = right.coeff(k);
            assert!((v[0] - w[0]).norm() < 1e-13);
        }
    }

    #[test]
    fn deriv_dir_basics() {
        let c = TorusFourier::constant(1, &[3.0], 4);
        assert_eq!(c.deriv_dir(&[0.7]).unwrap().mode_count(), 0);

        // single mode eigenfunction
        let u = TorusFourier::from_modes(1, 1, 4, false, [(vec![2], vec![C64::new(1.0, 0.0)])])
            .unwrap();
        let du = u.deriv_dir(&[0.3]).unwrap();
        let expect = C64::new(0.0, TWO_PI * 0.6);
        assert!((du.coeff(&[2])[0] - expect).norm() < 1e-15);
    }

    #[test]
    fn deriv_dir_finite_difference_oracle() {
        // d=1, w = 0.75, u = sin(2 pi theta): derivative is 1.5 pi cos(2 pi theta)
        let u = TorusFourier::sine(1, &[1], 1.0, 4);
        let du = u.deriv_dir(&[0.75]).unwrap();
        let h = 1e-6;
        for j in 0..20 {
            let th = j as f64 / 20.0;
            // finite difference along the flow direction: w d/dtheta
            let fp = u.eval(&[th + 0.75 * h])[0].re;
            let fm = u.eval(&[th - 0.75 * h])[0].re;
            let fd = (fp - fm) / (2.0 * h);
            let exact = du.eval(&[th])[0].re;
            assert!((fd - exact).abs() < 1e-7, "fd {} vs exact {}", fd, exact);
            assert!((exact - 1.5 * std::f64::consts::PI * (TWO_PI * th).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_const_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_real_series(&mut rng, 1, 1, 6);
        assert_eq!(u.shift_const(&[0.0]).unwrap(), u);

        let e = TorusFourier::from_modes(1, 1, 2, false, [(vec![1], vec![C64::new(1.0, 0.0)])])
            .unwrap();
        let s = e.shift_const(&[0.25]).unwrap();
        assert!((s.coeff(&[1])[0] - C64::new(0.0, -1.0)).norm() < 1e-15);

        for _ in 0..50 {
            let delta = [rng.gen_range(-0.5..0.5)];
            let th = random_theta(&mut rng, 1);
            let shifted = u.shift_const(&delta).unwrap();
            let a = shifted.eval(&th)[0];
            let b = u.eval(&[th[0] - delta[0]])[0];
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn average_basics() {
        let c = TorusFourier::constant(1, &[2.5], 4);
        assert_eq!(c.average()[0], C64::new(2.5, 0.0));
        let u = TorusFourier::cosine(1, &[1], 1.0, 4);
        assert_eq!(u.average()[0], C64::default());
        let s = c.add(&u).unwrap();
        assert_eq!(s.average()[0].re, 2.5);
    }

    #[test]
    fn norm_xi_values() {
        let z = TorusFourier::zeros(1, 1, 4);
        assert_eq!(z.norm_xi(0.3), 0.0);
        // single mode k = 1 with coefficient magnitude 2, xi = 0.5: 2 e^{pi}
        let u = TorusFourier::from_modes(1, 1, 4, false, [(vec![1], vec![C64::new(2.0, 0.0)])])
            .unwrap();
        assert_relative_eq!(
            u.norm_xi(0.5),
            2.0 * std::f64::consts::PI.exp(),
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_real_series(&mut rng, 1, 2, 5);
        let l1: f64 = w
            .modes()
            .map(|(_, v)| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
            .sum();
        assert_relative_eq!(w.norm_xi(0.0), l1, epsilon = 1e-13);
    }

    #[test]
    fn eval_basics_and_parseval() {
        let c = TorusFourier::constant(2, &[1.5, -0.5], 3);
        assert_eq!(c.eval(&[0.3, 0.9]), vec![C64::new(1.5, 0.0), C64::new(-0.5, 0.0)]);
        let u = TorusFourier::cosine(1, &[1], 1.0, 4);
        assert_relative_eq!(u.eval(&[0.5])[0].re, -1.0, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_real_series(&mut rng, 1, 1, 100);
        let m = 1024;
        let mean_sq: f64 = (0..m)
            .map(|j| w.eval(&[j as f64 / m as f64])[0].norm_sqr())
            .sum::<f64>()
            / m as f64;
        assert!((mean_sq - w.coeff_l2_sqr()).abs() < 1e-10 * (1.0 + mean_sq));
    }

    #[test]
    fn reality_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_real_series(&mut rng, 1, 1, 5);
        let b = random_real_series(&mut rng, 1, 1, 5);
        for op in [
            a.add(&b).unwrap(),
            a.prod(&b, 10).unwrap(),
            a.deriv_dir(&[0.37]).unwrap(),
            a.shift_const(&[0.21]).unwrap(),
        ] {
            assert!(op.is_real());
            for _ in 0..10 {
                let th = random_theta(&mut rng, 1);
                op.eval_real(&th).unwrap();
            }
        }
    }

    #[test]
    fn deriv_and_shift_commute_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_real_series(&mut rng, 2, 2, 4);
        let w = [0.31, -0.47];
        let delta = [0.13, 0.76];
        let a = u.deriv_dir(&w).unwrap().shift_const(&delta).unwrap();
        let b = u.shift_const(&delta).unwrap().deriv_dir(&w).unwrap();
        for (k, v) in a.modes() {
            let q = b.coeff(k);
            for i in 0..2 {
                assert!((v[i] - q[i]).norm() < 1e-15 * (1.0 + v[i].norm()));
            }
        }
    }

    #[test]
    fn average_of_derivative_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_real_series(&mut rng, 2, 3, 4);
        let du = u.deriv_dir(&[0.7, 0.21]).unwrap();
        for c in du.average() {
            assert_eq!(c, C64::default());
        }
    }

    #[test]
    fn json_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_real_series(&mut rng, 2, 2, 3);
        let text = serde_json::to_string(&u).unwrap();
        let back: TorusFourier = serde_json::from_str(&text).unwrap();
        assert_eq!(u, back);
        let text2 = serde_json::to_string(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn pointwise_map_matches_grid() {
        let u = TorusFourier::cosine(1, &[1], 0.3, 8);
        let base = TorusFourier::constant(1, &[2.0], 8).add(&u).unwrap();
        let r = base.map_pointwise_real(|x| 1.0 / x, 2, 16).unwrap();
        for j in 0..33 {
            let th = [j as f64 / 33.0];
            let expect = 1.0 / base.eval(&th)[0].re;
            assert!((r.eval(&th)[0].re - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn matrix_inverse_collocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_real_series(&mut rng, 1, 1, 3).scale(0.05);
        let one = TorusFourier::constant(1, &[1.0], 3);
        // [[1 + a, 0.3], [0.1, 1 - a]]
        let m = TfMatrix {
            rows: 2,
            cols: 2,
            entries: vec![
                one.add(&a).unwrap(),
                TorusFourier::constant(1, &[0.3], 3),
                TorusFourier::constant(1, &[0.1], 3),
                one.sub(&a).unwrap(),
            ],
        };
        let inv = m.invert_collocation(2, 24).unwrap();
        let prod = m.matmul(&inv, 48).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want = if r == c { 1.0 } else { 0.0 };
                let avg = prod.entry(r, c).average()[0];
                assert!((avg.re - want).abs() < 1e-9);
                let dev: f64 = prod
                    .entry(r, c)
                    .modes()
                    .filter(|(k, _)| l1_norm(k) > 0)
                    .map(|(_, v)| v[0].norm())
                    .sum();
                assert!(dev < 1e-8, "off-identity content {}", dev);
            }
        }
    }
}
