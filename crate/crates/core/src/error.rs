use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite {what} at channel {channel}{}", step_suffix(*.step))]
    NonFinite {
        what: &'static str,
        channel: usize,
        step: Option<usize>,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("merge of {requested} tokens requested but at most {available} are possible")]
    MergeTooLarge { requested: usize, available: usize },
    #[error(
        "keep ratio {ratio} is infeasible with {layers} merge layers over {patches} patches \
         (layer {layer} would need r={needed} > {limit}); nearest feasible ratio is {suggested}"
    )]
    InfeasibleSchedule {
        ratio: f64,
        patches: usize,
        layers: usize,
        layer: usize,
        needed: usize,
        limit: usize,
        suggested: f64,
    },
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => alloc::format!(" (step {s})"),
        None => String::new(),
    }
}
