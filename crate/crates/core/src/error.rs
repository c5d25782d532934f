use crate::lattice::Point;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unsupported dimension {0} (need 2 <= d <= 16)")]
    UnsupportedDimension(usize),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("point {0} lies outside the box")]
    OutsideBox(Point),

    #[error("box is not contained in the ambient box")]
    NotSubBox,

    #[error("set is not solid above within its box")]
    NotSolidAbove,

    #[error("{0} is not a corner of the up-set")]
    NotCorner(Point),

    #[error("descent stopped at a corner {0} inside the window")]
    InteriorCorner(Point),

    #[error("up-set is empty or fills the whole box")]
    DegenerateUpSet,

    #[error("protected set is not contained in the up-set")]
    ProtectedOutsideUpSet,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
