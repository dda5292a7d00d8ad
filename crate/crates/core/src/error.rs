use thiserror::Error;

/// Errors produced by the series kernels, solvers and drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular jet: order-0 coefficient too close to zero (min |c0| = {min_abs0:.3e}, floor = {floor:.3e}) in {op}")]
    SingularJet {
        op: &'static str,
        min_abs0: f64,
        floor: f64,
    },

    #[error("near-resonance: divisor {divisor:.3e} below floor {floor:.3e} at mode k = {k:?}{context}")]
    NearResonance {
        k: Vec<i32>,
        divisor: f64,
        floor: f64,
        context: String,
    },

    #[error("unsolvable average: zero-shift solve with nonzero mean (|g0| = {avg_norm:.3e}); use the cohomology solver with a counterterm")]
    UnsolvableAverage { avg_norm: f64 },

    #[error("Diophantine check failed: min |omega.k| |k|^tau = {min_product:.3e} < gamma = {gamma:.3e} at k = {worst_k:?}")]
    DiophantineFailure {
        min_product: f64,
        gamma: f64,
        worst_k: Vec<i32>,
    },

    #[error("bad seed: order-0 invariance residual {residual:.3e} exceeds {tol:.3e} (scale {scale:.3e})")]
    BadSeed {
        residual: f64,
        tol: f64,
        scale: f64,
    },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("frame degeneracy: {0}")]
    FrameDegeneracy(String),

    #[error("degenerate embedding: Gram matrix of DK0 is singular")]
    DegenerateEmbedding,

    #[error("unresolved average obstruction at order {order}: |<normal component>| = {magnitude:.3e} cannot be cancelled by the available counterterms")]
    Obstruction { order: usize, magnitude: f64 },

    #[error("insufficient history: lookup at t = {t:.6e} outside stored range [{t0:.6e}, {t1:.6e}]")]
    InsufficientHistory { t: f64, t0: f64, t1: f64 },

    #[error("implicit delay iteration did not converge: last residual {residual:.3e}")]
    ImplicitDelayDivergence { residual: f64 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("seed construction failed: {0}")]
    SeedFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
