//! Experiment harness: configuration, training runs, batch-size ablation,
//! gradient checks and equivalence oracles, all emitting CSV.

mod config;
mod oracles;
mod train;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use config::{parse_milestones, DataSource, ExperimentConfig, Fault, KEYS};
pub use oracles::{
    cmd_equivalence, cmd_gradcheck, equivalence_rows, gradcheck_reports, mode_name, EquivalenceRow, EQUIVALENCE_HEADER,
};
pub use train::{
    accuracy, cmd_ablate_batch, cmd_dump_iota, cmd_train, iota_summaries, load_splits, model_spec, run_ablation,
    summary_row, train_model, write_curve, AblationRow, EpochRecord, IotaSummary, RunRecord, Splits, ABLATION_HEADER,
    CURVE_HEADER, IOTA_HEADER, SUMMARY_HEADER,
};

/// Independent random streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub(crate) fn create_out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
