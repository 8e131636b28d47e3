//! Experiment orchestration: run configuration, training runs with logs,
//! snapshots and checkpoints, evaluation, grids, nearest-neighbour pairs,
//! inversion, the ablation matrix and the output verifier.

mod ablate;
mod config;
mod run;
mod verify;

use std::path::PathBuf;

pub use ablate::{ablation_cells, cmd_ablate, AblationCell, AblationReport, AblationRow};
pub use config::{default_p_swap, RunConfig, SwapSchedule, KEYS};
pub use run::{
    cmd_eval, cmd_grid, cmd_invert, cmd_nearest, cmd_synth, cmd_train, cosine_similarity, load_dataset,
    list_checkpoints, load_model, nearest_pairs, novel_view_table, read_tsv, stamp_tsv, ArtifactLog, InvertOptions, LoadedModel, NearestPair,
    Session, TrainSummary, CHECKPOINT_DIR, CONFIG_FILE, DIVERSITY_FILE, LOG_FILE,
};
pub use verify::{verify_tree, VerifyReport};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "HEADLAB_OUT";

/// Yaw angles (degrees) of every sample grid.
pub const GRID_YAWS: [f64; 5] = [0.0, 45.0, 90.0, 135.0, 180.0];

/// Output root from the environment, `headlab_out` otherwise.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from("headlab_out"), PathBuf::from)
}
