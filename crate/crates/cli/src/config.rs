use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use upop_core::engine::TrainConfig;
use upop_core::{Driver, Error, ModelConfig, PruneConfig, TaskConfig};

/// Contents of a run configuration file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub driver: Option<Driver>,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub prune: PruneConfig,
    pub pretrain: TrainConfig,
}

impl RunFile {
    pub fn parse(text: &str) -> upop_core::Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    pub fn driver(&self) -> Driver {
        self.driver.unwrap_or(Driver::Upop)
    }
}

/// Where a run came from and where it lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub driver: Driver,
    /// Command-line overrides, as given.
    pub overrides: Vec<String>,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub prune: PruneConfig,
    pub pretrain: TrainConfig,
}

pub const MANIFEST_SCHEMA: &str = "upop.manifest/1";
pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join(MANIFEST);
        if !path.exists() {
            return Err(Error::IncompleteRun(format!("{} is not a run directory", run.display())).into());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).map_err(Error::from)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Checkpoint(format!("unknown manifest schema '{}'", m.schema)).into());
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        fs::write(self.out_dir.join(MANIFEST), text)?;
        Ok(())
    }
}

/// Picks a fresh directory under `root` named after the run.
pub fn unique_run_dir(root: &Path, base: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    for n in 1.. {
        let name = if n == 1 { base.to_string() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        // create_dir fails if another process took the name first
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Uses `dir` as given; it must not exist or be empty.
pub fn explicit_run_dir(dir: &Path) -> Result<PathBuf> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::InvalidConfig(format!("output directory {} is not empty", dir.display())).into());
    }
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let f = RunFile::parse("").unwrap();
        assert_eq!(f, RunFile::default());
        assert_eq!(f.driver(), Driver::Upop);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunFile::parse("[prune]\nsearch_stpes = 3\n").unwrap_err();
        assert!(err.to_string().contains("search_stpes"), "{err}");
        assert!(RunFile::parse("bogus = 1\n").is_err());
        assert!(RunFile::parse("[model]\nlayers = 2\nwidth = 3\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let f = RunFile::parse(
            "driver = \"mask-based\"\n[prune]\np = 0.25\nschedule = \"uniform\"\nfreq = 3\n[model]\nlayers = 2\n",
        )
        .unwrap();
        assert_eq!(f.driver(), Driver::MaskBased);
        assert_eq!(f.prune.p, 0.25);
        assert_eq!(f.prune.freq, Some(3));
        assert_eq!(f.model.layers, 2);
        assert_eq!(f.model.heads, ModelConfig::default().heads);
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = unique_run_dir(root.path(), "upop").unwrap();
        let b = unique_run_dir(root.path(), "upop").unwrap();
        assert_ne!(a, b);
        assert!(b.ends_with("upop-2"));
        fs::write(a.join("x"), "1").unwrap();
        assert!(explicit_run_dir(&a).is_err());
        assert!(explicit_run_dir(&root.path().join("new")).is_ok());
    }
}
