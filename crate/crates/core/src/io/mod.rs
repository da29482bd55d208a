//! File formats: datasets, images, checkpoints, heatmaps, config files and
//! synthetic data.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod heatmap;
pub mod raster;
pub mod synth;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Snapshot};
pub use config::{apply_config, format_config, parse_config, set_config_value};
pub use dataset::{load_dataset, DatasetEntry};
pub use heatmap::{export_heatmap, HeatmapStats};
pub use synth::{SynthImage, SynthSpec};

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
