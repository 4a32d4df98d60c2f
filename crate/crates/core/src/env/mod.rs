//! Desk-scale 2-D point mazes: dynamics, scripted data, dataset files,
//! evaluation rollouts and an exact value oracle.

mod dataset;
mod eval;
mod expert;
mod maze;
mod oracle;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, sidecar_path, Dataset, Provenance, Trajectory,
    GENERATOR_VERSION,
};
pub use eval::{evaluate, Controller, EvalReport, PairResult, ZeroController};
pub use expert::{Expert, ExpertController};
pub use maze::{step, MazeSpec, Point, StepOutcome};
pub use oracle::{dp_value_oracle, shortest_path_lengths, CellValues};
