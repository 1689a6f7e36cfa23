//! Run configuration files.
//!
//! `generate` reads a TOML file with the sections below; every key is
//! optional and falls back to the library default. Relative paths resolve
//! against the config file's directory.
//!
//! ```toml
//! out = "run"                  # output directory
//! prompt = "a stone hut"       # remote guidance prompt
//! guidance_url = "http://127.0.0.1:8765"
//! target_views = "views/"      # reconstruction targets (see `views`)
//! constraints = "rules.toml"   # distribution / adjacency constraints
//! checkpoint_every = 0         # also keep checkpoints/step_NNNNN.ckpt; 0 = final only
//!
//! [palette]
//! blocks = ["stone", "sand"]   # built-in blocks, or
//! manifest = "palette.toml"    # a palette manifest with textures
//!
//! [field]                      # network architecture and air threshold
//! [train]                      # steps, grid_size, quantization, render, seed, ...
//!
//! [turntable]
//! frames = 8
//! size = 128
//! elevation = 25.0
//!
//! [remote]
//! timeout_secs = 60
//! retries = 3
//! provides_gradient = true
//! ```

use std::path::{Path, PathBuf};

use blockfield::field::FieldConfig;
use blockfield::palette::BlockPalette;
use blockfield::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub out: Option<PathBuf>,
    pub prompt: Option<String>,
    pub guidance_url: Option<String>,
    pub target_views: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub palette: PaletteSpec,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub turntable: TurntableConfig,
    pub remote: RemoteSettings,
}

impl GenerateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.out, &mut cfg.target_views, &mut cfg.constraints, &mut cfg.palette.manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Which blocks the field chooses from. Neither key means the standard
/// built-in set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaletteSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl PaletteSpec {
    pub fn manifest(path: PathBuf) -> Self {
        Self {
            blocks: None,
            manifest: Some(path),
        }
    }

    pub fn resolve(&self) -> Result<BlockPalette> {
        match (&self.blocks, &self.manifest) {
            (Some(_), Some(_)) => Err(config("palette: give either `blocks` or `manifest`, not both")),
            (Some(names), None) => {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                Ok(BlockPalette::builtin_subset(&names)?)
            }
            (None, Some(path)) => Ok(BlockPalette::load(path)?),
            (None, None) => Ok(BlockPalette::builtin()),
        }
    }

    /// Manifest paths made absolute so the spec stays valid from anywhere.
    pub fn absolute(&self) -> Self {
        let manifest = self
            .manifest
            .as_ref()
            .map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.clone()));
        Self {
            blocks: self.blocks.clone(),
            manifest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurntableConfig {
    pub frames: usize,
    pub size: usize,
    pub elevation: f64,
}

impl Default for TurntableConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            size: 128,
            elevation: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSettings {
    pub timeout_secs: f64,
    pub retries: usize,
    pub provides_gradient: bool,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            timeout_secs: 60.0,
            retries: 3,
            provides_gradient: true,
        }
    }
}
