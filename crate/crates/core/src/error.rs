use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed bundle: {0}")]
    Format(String),

    #[error("truncated bundle: {0}")]
    Truncated(String),

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u8, bits: u8 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// All importance weights of a group are zero.
    #[error("zero importance group")]
    ZeroImportance,

    /// `Var_h(Q) + lambda == 0`: constant codes with no ridge term.
    #[error("zero denominator in scale regression (constant codes, lambda = 0)")]
    ZeroDenominator,

    #[error("degenerate reference: {0}")]
    Degenerate(String),

    #[error("Hessian is singular after damping with ratio {damp_ratio}; retry with a larger damp ratio")]
    SingularHessian { damp_ratio: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroImportance
                | Error::ZeroDenominator
                | Error::Degenerate(_)
                | Error::SingularHessian { .. }
        )
    }
}
