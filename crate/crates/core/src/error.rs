use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "shape mismatch: axis {left_axis} of left operand (len {left_len}) paired with axis {right_axis} of right operand (len {right_len})"
    )]
    ShapeMismatch {
        left_axis: usize,
        right_axis: usize,
        left_len: usize,
        right_len: usize,
    },

    #[error("invalid contraction spec: {0}")]
    InvalidSpec(String),

    #[error("axes {rows:?} / {cols:?} do not partition the axes of a rank-{rank} tensor")]
    InvalidPartition {
        rows: Vec<usize>,
        cols: Vec<usize>,
        rank: usize,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("truncated payload at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("label {label} out of range at byte {offset}")]
    LabelOutOfRange { offset: usize, label: u8 },

    #[error("feature {feature} is constant over the training split (q5 == q95 == {value})")]
    ConstantFeature { feature: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("all class overlaps are zero")]
    AllZeroOverlaps,

    #[error("class {class} has no positive or no negative samples")]
    DegenerateSplit { class: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("state has zero norm")]
    ZeroNorm,

    #[error("non-physical density matrix: eigenvalue {0}")]
    NonPhysical(f64),

    #[error("checkpoint error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
