use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-manifold edge ({0}, {1}) is shared by more than two triangles")]
    NonManifold(usize, usize),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("degenerate triangle {0}")]
    DegenerateTriangle(usize),

    #[error("singular normal matrix at vertex {0}")]
    SingularNormal(usize),

    #[error("degenerate element: {0}")]
    DegenerateElement(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error(
        "newton solver did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("unrecorded forward pass: {0}")]
    Unrecorded(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::NonManifold(..) => "non_manifold",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::DegenerateTriangle(_) => "degenerate_triangle",
            Error::SingularNormal(_) => "singular_normal",
            Error::DegenerateElement(_) => "degenerate_element",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Divergence(_) => "divergence",
            Error::NonConvergence { .. } => "non_convergence",
            Error::AtFrame { source, .. } => source.kind(),
            Error::Solver(_) => "solver",
            Error::Config(_) => "config",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Unrecorded(_) => "unrecorded",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}
