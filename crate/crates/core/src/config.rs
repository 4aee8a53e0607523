//! Run configuration shared by all subcommands, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::phantom::PhantomSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub landmarks: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: "data".into(),
            output_root: "out".into(),
            checkpoint_dir: "ckpt".into(),
            landmarks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stage; required when `determinism` is on.
    pub seed: Option<u64>,
    pub determinism: bool,
    /// Worker threads; 0 means the pool default.
    pub threads: usize,
    pub paths: Paths,
    /// Number of phantom cases to generate.
    pub cases: usize,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    pub fusion: FusionMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            determinism: false,
            threads: 0,
            paths: Paths::default(),
            cases: 16,
            phantom: PhantomSpec::default(),
            train: TrainConfig::default(),
            fusion: FusionMode::Nine,
        }
    }
}

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; an unreadable file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// File values when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Pushes the top-level seed into the stage configs and checks the
    /// determinism contract.
    pub fn finalize(&mut self) -> Result<()> {
        if self.determinism && self.seed.is_none() {
            return Err(Error::Config("determinism requires a fixed seed".into()));
        }
        if let Some(s) = self.seed {
            self.phantom.seed = s;
            self.train.seed = s;
        }
        Ok(())
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Sequence;

    #[test]
    fn roundtrip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = RunConfig::from_toml("seed = 7\n[train]\ntarget_sequence = \"t1c\"\nepochs = 3\n").unwrap();
        assert_eq!(p.seed, Some(7));
        assert_eq!(p.train.target_sequence, Sequence::T1c);
        assert_eq!(p.train.epochs, 3);
        assert_eq!(p.train.batch_size, 64);
    }

    #[test]
    fn bad_files_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/run.toml")),
            Err(Error::Config(_))
        ));
        let mut c = RunConfig {
            determinism: true,
            ..Default::default()
        };
        assert!(c.finalize().is_err());
        c.seed = Some(3);
        c.finalize().unwrap();
        assert_eq!((c.train.seed, c.phantom.seed), (3, 3));
    }
}
