pub mod atrophy;
pub mod eval;
pub mod pca;
pub mod phantom;
pub mod schedule;
pub mod sdf;
pub mod synth;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};

/// Create `dir` (and parents) for per-case outputs.
pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
