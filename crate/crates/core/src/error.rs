use thiserror::Error;

/// Failure modes of the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid atom: {0}")]
    InvalidAtom(String),
    #[error("degenerate geometry: covariance condition number {cond:.3e} exceeds 1e12")]
    DegenerateGeometry { cond: f64 },
    #[error("rank-deficient manifold: min eigenvalue {min_eig:.3e} below 1e-10 * trace {trace:.3e}")]
    RankDeficient { min_eig: f64, trace: f64 },
    #[error("quadrature window too small: {ring_fraction:.3e} of integrand mass on the border ring")]
    WindowTooSmall { ring_fraction: f64 },
    #[error("gain calibration failed: {0}")]
    Calibration(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ill-posed class bank: {0}")]
    IllPosedBank(String),
    #[error("every class failed: {0}")]
    AllClassesExcluded(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidAtom(_)
                | Error::InvalidSchedule(_)
                | Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
