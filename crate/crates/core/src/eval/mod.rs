//! Metrics, sliced reports over a test grid, and plots.

mod compiled;
mod metrics;
mod plot;
mod report;

pub use compiled::{CompiledModel, ROUTES_FILE, SINGLE_CHECKPOINT};
pub use metrics::{
    better, confusion_matrix, mae, micro_f1, micro_f1_from_confusion, point_prediction, target, task_metric,
};
pub use plot::emit_plots;
pub use report::{
    assemble, confusion_csv, confusion_f1, marginals, read_report, sliced_report, snr_label, test_samples, CellResult, Confusion,
    EvalReport, Prediction, SliceRow, SLICE_AXES,
};
