//! Switched hybrid systems with state resets: simulation, adjoint-based switching-time and
//! mode-insertion gradients, and schedule optimization.

pub mod adjoint;
pub mod app;
pub mod error;
pub mod exec;
pub mod forward;
pub mod gradients;
pub mod integrate;
pub mod model;
pub mod optimize;
pub mod scenarios;
pub mod sensitivity;

pub use adjoint::{solve_adjoint, AdjointTrajectory};
pub use error::{Error, Result};
pub use exec::Execution;
pub use forward::{
    eval_trajectory, evaluate_cost, reduced_cost, solve_forward, step_segment, CostBreakdown, DenseSegment,
    HybridTrajectory, Side,
};
pub use gradients::{
    adjoint_gradient, check_gradients, insertion_fd, insertion_gradient, insertion_gradient_at, insertion_scan,
    kkt_residual, switching_gradient, uniform_grid, variational_gradient, variational_report, ChainCheckOptions,
    GradientCheck, GradientMethod, GradientReport, GradientTolerances, InsertionEntry, InsertionScan, KktSummary,
};
pub use integrate::{Method, StepperKind, StepperOptions};
pub use model::*;
pub use optimize::{
    optimize_sequence, optimize_times, project_schedule, Action, IterationRecord, OptimizationTrace, OptimizerOptions,
    Termination,
};
pub use scenarios::{build_scenario, Scenario, ScenarioParams};
pub use sensitivity::{
    fd_gradient, fd_gradient_all, seed_variation, solve_variational, solve_variational_from, FdEstimate, FdKind,
    FdOptions, VariationalTrajectory,
};
