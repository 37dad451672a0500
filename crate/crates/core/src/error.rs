use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("svd did not converge within {iterations} iterations")]
    SvdNoConvergence { iterations: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data length {len} too short: {bound}")]
    TooShort { len: usize, bound: String },

    #[error("rank condition failed: rank {rank} < required {required} (smallest retained singular value {smallest:e}, tolerance {tol:e})")]
    RankDeficient {
        rank: usize,
        required: usize,
        smallest: f64,
        tol: f64,
    },

    #[error("{which} rank condition failed: rank {rank} < {required} (singular value gap {gap:e})")]
    DualRank {
        which: &'static str,
        rank: usize,
        required: usize,
        gap: f64,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("state became non-finite at step {step}")]
    Blowup { step: usize },

    #[error("qp infeasible at t = {t}: {diagnostic}")]
    QpInfeasible { t: usize, diagnostic: String },

    #[error("qp hit the iteration limit at t = {t} (primal residual {primal:e}, dual residual {dual:e})")]
    QpMaxIter { t: usize, primal: f64, dual: f64 },

    #[error("contraction condition violated: 4 rho^M = {kappa_m} >= 1 (rho = {rho}, M = {horizon})")]
    Contraction { rho: f64, horizon: usize, kappa_m: f64 },

    #[error("parameter below certified bound: {0}")]
    BelowCertified(String),

    #[error("sdp infeasible at radius {radius}: most violated block `{block}` (margin {margin:e})")]
    SdpInfeasible {
        radius: f64,
        block: String,
        margin: f64,
    },

    #[error("sdp did not converge at radius {radius}: {reason}")]
    SdpFailed { radius: f64, reason: String },

    #[error("radius halving cap of {cap} exceeded (last rho0 = {rho0})")]
    HalvingCap { cap: usize, rho0: f64 },

    #[error("ill-conditioned matrix: {what} (condition number {cond:e})")]
    IllConditioned { what: String, cond: f64 },

    #[error("X0*X is not symmetric (relative asymmetry {0:e})")]
    AsymmetricXd(f64),

    #[error("covariance lost positive definiteness at step {step}")]
    Covariance { step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn stage(self, context: impl Into<String>) -> Self {
        Error::Stage {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
