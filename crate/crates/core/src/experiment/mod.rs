//! Configuration, orchestration and persistence of benchmark runs.

mod config;
mod runner;

pub use config::{BenchmarkConfig, ExperimentConfig, RunOptions, ScheduleConfig};
pub use runner::{
    ablation_grid, run_ablation, run_bench, run_gradcheck, run_gradcheck_scaled, run_gridsearch, summary_order, write_json,
    Abort, AblationRow, GradProbe, GradcheckReport, GridRow, GridSpec, RunRecord, GRADCHECK_CELLS, GRADCHECK_STEP,
    GRADCHECK_TOLERANCE, MAX_GRID_CELLS,
};
