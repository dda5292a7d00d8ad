//! Model descriptions: a jet-evaluable vector field with state-dependent
//! delay maps, a delay-form tag and an optional structure tag used by the
//! expansion strategies.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expr::ScalarExpr;
use crate::fourier::TfMatrix;

/// How the small parameter enters the delayed terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayForm {
    /// Delays scaled by the parameter: `y' = f(y(t), y(t - eps r_1), ...)`.
    ScaledDelay,
    /// Delayed arguments scaled by the parameter:
    /// `y' = f(y(t), eps y(t - r_1), ...)`.
    ScaledArgument,
}

/// One delay channel.
#[derive(Debug, Clone)]
pub enum DelaySpec {
    /// Explicit state-dependent delay `r_j(y(t))`, an expression over slot 0.
    Explicit(ScalarExpr),
    /// Implicitly defined lag `u` solving `u = eps G(y(t), y(t - u))`;
    /// the defining map is an expression over slot 0 (current state) and
    /// slot 1 (state at the looked-back time).
    Implicit(ScalarExpr),
}

/// A single Jordan block of the reduced constant-coefficient matrix.
#[derive(Debug, Clone)]
pub struct JordanBlock {
    pub mu: Complex64,
    pub size: usize,
}

/// Explicit reducibility data: a frame `M(theta)` and the block structure
/// of the reduced matrix.  Frame coordinates are laid out as
/// `[tangent (d) | twist-paired (d, optional) | Jordan blocks ...]`.
#[derive(Debug, Clone)]
pub struct ReducibleData {
    pub frame: TfMatrix,
    /// Constant coupling of the twist-paired zero block into the tangent
    /// block (the reduced matrix is `[[0, T], [0, 0]]` on those 2d
    /// coordinates); present exactly when the model has such a block.
    pub twist: Option<DMatrix<f64>>,
    /// Nonzero-eigenvalue Jordan blocks for the remaining coordinates.
    pub blocks: Vec<JordanBlock>,
}

impl ReducibleData {
    /// Checks the coordinate layout against the state and torus dimensions.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.frame.rows != n || self.frame.cols != n {
            return Err(Error::ShapeMismatch(format!(
                "reducible frame must be {n} x {n}"
            )));
        }
        let twist_cols = if self.twist.is_some() { d } else { 0 };
        let block_total: usize = self.blocks.iter().map(|b| b.size).sum();
        if d + twist_cols + block_total != n {
            return Err(Error::ShapeMismatch(format!(
                "reducible layout {} + {} + {} does not fill n = {}",
                d, twist_cols, block_total, n
            )));
        }
        if let Some(t) = &self.twist {
            if t.nrows() != d || t.ncols() != d {
                return Err(Error::ShapeMismatch("twist coupling must be d x d".into()));
            }
        }
        for b in &self.blocks {
            if b.mu.norm() == 0.0 {
                return Err(Error::DegenerateSpectrum(
                    "a zero eigenvalue outside the tangent (and twist-paired) block".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Structure tag selecting the linearized-solve strategy.
#[derive(Debug, Clone)]
pub enum Structure {
    Generic,
    /// Unperturbed field is Hamiltonian with the given symplectic pairing.
    Hamiltonian { j: DMatrix<f64> },
    /// Linearization reducible to constant coefficients with known frame.
    Reducible(ReducibleData),
    /// Planar system with an attracting limit cycle (quasi-Newton path).
    LimitCycle,
}

/// A state-dependent delay model `y' = f_eps(y(t), delayed slots...)`.
///
/// `f` has `ell + 1` slots: slot 0 is the current state, slot `j` the j-th
/// delayed state (already scaled by the parameter for
/// [`DelayForm::ScaledArgument`] models — the scaling lives in the driver,
/// not in `f`).
#[derive(Debug, Clone)]
pub struct SDDEModel {
    pub n: usize,
    pub d: usize,
    pub form: DelayForm,
    pub f: Vec<ScalarExpr>,
    pub delays: Vec<DelaySpec>,
    pub structure: Structure,
}

impl SDDEModel {
    pub fn ell(&self) -> usize {
        self.delays.len()
    }

    pub fn has_implicit_delay(&self) -> bool {
        self.delays.iter().any(|d| matches!(d, DelaySpec::Implicit(_)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "field has {} components for state dimension {}",
                self.f.len(),
                self.n
            )));
        }
        if self.has_implicit_delay() && self.form != DelayForm::ScaledDelay {
            return Err(Error::InvalidConfig(
                "implicit delays are parameter-scaled lags; use the scaled-delay form".into(),
            ));
        }
        match &self.structure {
            Structure::Hamiltonian { j } => {
                if self.n != 2 * self.d {
                    return Err(Error::InvalidConfig(format!(
                        "hamiltonian structure needs n = 2d (got n = {}, d = {})",
                        self.n, self.d
                    )));
                }
                if j.nrows() != self.n || j.ncols() != self.n {
                    return Err(Error::ShapeMismatch("symplectic pairing must be n x n".into()));
                }
            }
            Structure::Reducible(data) => data.validate(self.n, self.d)?,
            _ => {}
        }
        Ok(())
    }
}
