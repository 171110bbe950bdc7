//! Settings resolved as flags, then `BENCH_*` variables, then the config
//! file, then built-in defaults. Clap covers the first two.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

pub const DEFAULT_CONFIG: &str = "bench.yaml";
pub const DEFAULT_RESOURCES: &str = "resources.yaml";
pub const DEFAULT_OUT: &str = "experiments";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub resources: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub verbosity: Option<u8>,
    pub color: Option<bool>,
}

impl ConfigFile {
    /// An explicit path must exist; the implicit `bench.yaml` is optional.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None if Path::new(DEFAULT_CONFIG).is_file() => PathBuf::from(DEFAULT_CONFIG),
            None => return Ok(Self::default()),
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let mut cfg: ConfigFile = serde_yaml::from_str(&text)
            .map_err(bench_core::Error::from)
            .with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.resources, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    /// `None` means only the built-in `local` and `mock` targets.
    pub resources: Option<PathBuf>,
    pub out: PathBuf,
    pub verbosity: u8,
    pub color: bool,
}

pub struct Layer {
    pub resources: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub verbosity: u8,
    pub no_color: bool,
}

pub fn resolve(flags: Layer, file: ConfigFile) -> Settings {
    let resources = flags.resources.or(file.resources).or_else(|| {
        let p = PathBuf::from(DEFAULT_RESOURCES);
        p.is_file().then_some(p)
    });
    Settings {
        resources,
        out: flags
            .out
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        verbosity: if flags.verbosity > 0 {
            flags.verbosity
        } else {
            file.verbosity.unwrap_or(0)
        },
        color: !flags.no_color && file.color.unwrap_or(true),
    }
}
