//! The TOML run file: `[data]`, `[output]` and `[train]` sections.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use weather_gan::training::TrainConfig;

use crate::{usage, Failure};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Print a loss summary every this many iterations.
    #[serde(default = "one")]
    pub log_every: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub data: DataSection,
    pub output: OutputSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunFile {
    /// Reads and validates a run file. Relative paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut rf: RunFile =
            toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        rf.train
            .validate()
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut rf.data.root, &mut rf.data.manifest, &mut rf.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if rf.output.log_every == 0 {
            return Err(usage("output.log_every must be at least 1"));
        }
        Ok(rf)
    }
}
