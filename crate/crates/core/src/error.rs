use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: self loop on node {node}")]
    SelfLoop { file: String, line: u64, node: usize },
    #[error("{file}:{line}: duplicate edge ({src}, {dst})")]
    DuplicateEdge {
        file: String,
        line: u64,
        src: usize,
        dst: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("incomplete assignment: node {0} has no part")]
    IncompleteAssignment(usize),
    #[error("part {0} is empty")]
    EmptyPart(usize),
    #[error("part id {part} out of range for {k} parts")]
    PartOutOfRange { part: usize, k: usize },
    #[error("non-contiguous part ids: id {0} unused")]
    NonContiguousParts(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask: no labelled node selected")]
    EmptyMask,
    #[error("graph with {nodes} nodes exceeds the dense cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("single-class input: {0}")]
    SingleClass(String),
    #[error("no client holds class {class} (node {node})")]
    NoCandidate { node: usize, class: usize },
    #[error("empty class index set: client {client}, class {class}")]
    EmptyClass { client: usize, class: usize },
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing_file",
            Error::Parse { .. } => "parse",
            Error::SelfLoop { .. } => "self_loop",
            Error::DuplicateEdge { .. } => "duplicate_edge",
            Error::Dimension(_) => "dimension_mismatch",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::IncompleteAssignment(_) => "incomplete_assignment",
            Error::EmptyPart(_) => "empty_part",
            Error::PartOutOfRange { .. } => "part_out_of_range",
            Error::NonContiguousParts(_) => "non_contiguous_parts",
            Error::Shape(_) => "shape_mismatch",
            Error::EmptyMask => "empty_mask",
            Error::TooLarge { .. } => "too_large",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::SingleClass(_) => "single_class",
            Error::NoCandidate { .. } => "no_candidate",
            Error::EmptyClass { .. } => "empty_class",
            Error::NonFinite { .. } => "non_finite",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }
}
