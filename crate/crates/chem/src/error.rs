use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("unsupported element `{0}`")]
    UnsupportedElement(String),

    #[error("fingerprint width mismatch: {left} vs {right} bits")]
    WidthMismatch { left: usize, right: usize },

    #[error("fingerprint width must be a positive power of two, got {0}")]
    InvalidWidth(usize),

    #[error("diversity needs at least 2 molecules, got {0}")]
    TooFewMolecules(usize),

    #[error("graph is not a valid connected molecule: {0}")]
    InvalidGraph(String),

    #[error("bond of order {order} to {element} has no symbol in the alphabet")]
    UnencodableBond { element: String, order: u8 },

    #[error("encoding needs {required} symbols but the string length is {limit}")]
    TooLong { required: usize, limit: usize },

    #[error("branch body of {0} symbols exceeds the two-digit payload range")]
    BranchTooLong(usize),

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("malformed symbol string: {0}")]
    Malformed(String),
}
