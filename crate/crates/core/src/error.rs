use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grids are not nested: {0}")]
    NotNested(String),

    #[error("field evaluation produced a non-finite value at ({x}, {y})")]
    NonFiniteSample { x: f64, y: f64 },

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("matrix is singular to working precision at elimination step {step}")]
    Singular { step: usize },

    #[error("iterative solve did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("adjoint solution lost positivity: psi = {value:.6e} at node ({i}, {j})")]
    NonPositiveAdjoint { i: usize, j: usize, value: f64 },

    #[error("perturbation field has zero norm; cannot rescale")]
    ZeroNormPerturbation,

    #[error("perturbed diffusion lost positivity even after {attempts} redraws")]
    PerturbationRejected { attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too many sample failures: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
