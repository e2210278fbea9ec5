use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid sparsity pattern: {0}")]
    Pattern(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("optimization diverged in layer `{layer}` at step {step} (objective = {value})")]
    Divergence {
        layer: String,
        step: usize,
        value: f64,
    },

    #[error("cannot absorb without extra runtime ops; offending edges: {}", format_edges(.edges))]
    Absorption { edges: Vec<(String, String)> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn layer(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non_finite",
            Error::Pattern(_) => "pattern",
            Error::Format { .. } => "format",
            Error::Layer { .. } => "layer",
            Error::Topology(_) => "topology",
            Error::Divergence { .. } => "divergence",
            Error::Absorption { .. } => "absorption",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

fn format_edges(edges: &[(String, String)]) -> String {
    edges
        .iter()
        .map(|(from, to)| format!("{from} -> {to}"))
        .collect::<Vec<_>>()
        .join(", ")
}
