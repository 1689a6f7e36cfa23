//! Run manifests and content hashes.

use std::collections::BTreeMap;
use std::path::Path;

use blockfield::grid::BlockGrid;
use blockfield::palette::{BlockPalette, Face};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, runtime, Result};

/// Everything that determines a command's artifacts. `hash` covers all
/// other fields except `outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub palette_hash: Option<String>,
    /// Input path → hash of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub hash: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            palette_hash: None,
            inputs: BTreeMap::new(),
            hash: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_palette(mut self, palette: &BlockPalette) -> Self {
        self.palette_hash = Some(palette_hash(palette));
        self
    }

    /// Records the hash of a file or, for a directory, of its sorted
    /// contents.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = path_hash(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finalize(&mut self) {
        let key = serde_json::json!({
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "palette_hash": self.palette_hash,
            "inputs": self.inputs.values().collect::<Vec<_>>(),
        });
        self.hash = hex(&Sha256::digest(key.to_string().as_bytes()));
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finalize();
        let text = serde_json::to_string_pretty(self).map_err(runtime)?;
        std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style blob hash: `sha256("blob <len>\0" ‖ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn path_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| config(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        let mut h = Sha256::new();
        for e in entries {
            if e.path().is_file() {
                h.update(format!("{} {}\n", path_hash(&e.path())?, e.file_name().to_string_lossy()).as_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Ok(blob_hash(&bytes))
    }
}

/// Hash of block names, game ids and every face texel.
pub fn palette_hash(palette: &BlockPalette) -> String {
    let mut h = Sha256::new();
    for b in palette.blocks() {
        h.update(format!("{}\0{}\0", b.name, b.game_id).as_bytes());
        for face in Face::ALL {
            for t in b.face(face).texels() {
                for c in t {
                    h.update(c.to_le_bytes());
                }
            }
        }
    }
    hex(&h.finalize())
}

/// Hash of a grid's contents by block game id, independent of palette
/// order. Cells are visited in storage order; air hashes as
/// `minecraft:air`.
pub fn grid_hash(grid: &BlockGrid, game_ids: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}\n", grid.size()).as_bytes());
    for cell in 0..grid.num_cells() {
        let id = grid.block_at(cell).map_or("minecraft:air", |b| game_ids[b].as_str());
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}
