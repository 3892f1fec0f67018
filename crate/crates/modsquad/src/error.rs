use thiserror::Error;

/// Errors from the tensor engine's user-facing contract.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("backward() already ran on this graph; rebuild the graph to differentiate again")]
    BackwardAlreadyRun,
    #[error("backward() requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum ModSquadError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("task {task} has zero gate mass in layer {layer}; cannot form P(E|T)")]
    DegenerateTask { task: usize, layer: usize },
    #[error("unknown task id {task} (model has {n_tasks} tasks)")]
    UnknownTask { task: usize, n_tasks: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("baseline metric for task {task} is zero; delta_t undefined")]
    ZeroBaselineMetric { task: usize },
    #[error("NaN loss at step {step}; first NaN parameter gradient: {param}")]
    NanLoss { step: usize, param: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
