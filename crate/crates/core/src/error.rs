use thiserror::Error;

/// Errors produced by the inference library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate geometry: point at distance {distance:e} m from the sensor")]
    DegeneratePoint { distance: f64 },

    #[error("Gauss-Newton did not converge after {iterations} iterations (last relative decrease {relative_decrease:e})")]
    NonConvergence {
        iterations: usize,
        relative_decrease: f64,
    },

    #[error("normal equations are singular or not positive definite")]
    SingularHessian,

    #[error("class {class} is out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },

    #[error("assignment has {got} entries, expected {expected}")]
    WrongAssignmentLength { expected: usize, got: usize },

    #[error("observation lies on the simplex boundary (min element {min_element:e})")]
    BoundaryObservation { min_element: f64 },

    #[error("dense prior tensor with {size} entries exceeds the {limit} entry guard")]
    TensorTooLarge { size: f64, limit: usize },

    #[error("hypothesis {0:?} appears more than once")]
    DuplicateHypothesis(Vec<usize>),

    #[error("operation requires an independent class prior")]
    WrongPriorKind,

    #[error("unknown object id {0}")]
    UnknownObject(usize),

    #[error("object {object} observed twice at time step {step}")]
    DuplicateObservation { object: usize, step: usize },

    #[error("hypothesis {0:?} is not in the retained set")]
    NotRetained(Vec<usize>),

    #[error("hypothesis {0:?} is already retained")]
    AlreadyRetained(Vec<usize>),

    #[error("retained set is full ({capacity} hypotheses)")]
    CapacityExceeded { capacity: usize },

    #[error("{count} hypotheses exceed the enumeration guard of {limit}")]
    TooManyHypotheses { count: f64, limit: usize },

    #[error("cannot place the true hypothesis outside a retained set of {retained} when only {total} hypotheses exist")]
    InfeasiblePlacement { retained: usize, total: f64 },

    #[error("no pose sample for time step {step}")]
    MissingPose { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed document: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
