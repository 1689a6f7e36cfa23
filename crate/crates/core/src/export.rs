//! Block grid files.
//!
//! The native format (`.bfs`) is, with all integers little-endian:
//!
//! | field          | type                                   |
//! |----------------|----------------------------------------|
//! | magic          | `b"BFSG"`                              |
//! | schema_version | u16 (currently 1)                      |
//! | N              | u32                                    |
//! | M              | u16                                    |
//! | names          | M × (u16 byte length, UTF-8 bytes)     |
//! | payload        | N³ × u16, `0` = air, `m + 1` = block m |
//!
//! The payload is row-major with `x` slowest and `z` fastest.
//!
//! [`write_schem`] converts a grid into a gzipped Sponge schematic
//! (version 2) for in-game placement.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::grid::BlockGrid;

pub const MAGIC: &[u8; 4] = b"BFSG";
pub const SCHEMA_VERSION: u16 = 1;

/// Minecraft data version written into `.schem` files (1.16.5).
pub const SCHEM_DATA_VERSION: i32 = 2586;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a block grid file (bad magic)")]
    BadMagic,
    #[error("unsupported schema version {0}")]
    SchemaVersion(u16),
    #[error("truncated file")]
    Truncated,
    #[error("block name is not UTF-8")]
    Utf8,
    #[error("cell {cell} holds id {id} but the palette has {palette} blocks")]
    BlockId { cell: usize, id: u16, palette: usize },
    #[error("grid has {grid} block types but {names} names were given")]
    NameCount { grid: usize, names: usize },
    #[error("value out of range for the format: {0}")]
    Range(String),
    #[error("schematic: {0}")]
    Schem(String),
}

pub type Result<T> = std::result::Result<T, ExportError>;

/// A grid with the palette names its ids refer to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchematicFile {
    pub names: Vec<String>,
    pub grid: BlockGrid,
}

impl SchematicFile {
    pub fn new(grid: BlockGrid, names: Vec<String>) -> Result<Self> {
        if names.len() != grid.num_blocks() {
            return Err(ExportError::NameCount {
                grid: grid.num_blocks(),
                names: names.len(),
            });
        }
        Ok(Self { names, grid })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = u32::try_from(self.grid.size()).map_err(|_| ExportError::Range("grid size".into()))?;
        let m = u16::try_from(self.names.len()).map_err(|_| ExportError::Range("palette size".into()))?;
        let mut out = Vec::with_capacity(16 + self.grid.num_cells() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
        for name in &self.names {
            let len = u16::try_from(name.len()).map_err(|_| ExportError::Range(format!("name `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for &id in self.grid.stored() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ExportError::BadMagic);
        }
        let version = r.u16()?;
        if version != SCHEMA_VERSION {
            return Err(ExportError::SchemaVersion(version));
        }
        let n = r.u32()? as usize;
        let m = r.u16()? as usize;
        let mut names = Vec::with_capacity(m);
        for _ in 0..m {
            let len = r.u16()? as usize;
            names.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ExportError::Utf8)?);
        }
        let cells = n.checked_pow(3).ok_or(ExportError::Truncated)?;
        let payload = r.take(cells.checked_mul(2).ok_or(ExportError::Truncated)?)?;
        let ids: Vec<u16> = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some((cell, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize > m) {
            return Err(ExportError::BlockId { cell, id, palette: m });
        }
        if r.pos != bytes.len() {
            return Err(ExportError::Range("trailing bytes after payload".into()));
        }
        let grid = BlockGrid::from_stored(n, m, ids).expect("ids validated above");
        Ok(Self { names, grid })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ExportError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn be_i16(&mut self) -> Result<i16> {
        let b = self.take(2)?;
        Ok(i16::from_be_bytes([b[0], b[1]]))
    }

    fn be_i32(&mut self) -> Result<i32> {
        let b = self.take(4)?;
        Ok(i32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn export_schematic(grid: &BlockGrid, names: &[String], path: &Path) -> Result<()> {
    let bytes = SchematicFile::new(grid.clone(), names.to_vec())?.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn import_schematic(path: &Path) -> Result<SchematicFile> {
    SchematicFile::from_bytes(&std::fs::read(path)?)
}

// NBT tag ids.
const TAG_END: u8 = 0;
const TAG_SHORT: u8 = 2;
const TAG_INT: u8 = 3;
const TAG_BYTE_ARRAY: u8 = 7;
const TAG_STRING: u8 = 8;
const TAG_LIST: u8 = 9;
const TAG_COMPOUND: u8 = 10;
const TAG_INT_ARRAY: u8 = 11;

struct Nbt(Vec<u8>);

impl Nbt {
    fn name(&mut self, tag: u8, name: &str) {
        self.0.push(tag);
        self.0.extend_from_slice(&(name.len() as u16).to_be_bytes());
        self.0.extend_from_slice(name.as_bytes());
    }

    fn short(&mut self, name: &str, v: i16) {
        self.name(TAG_SHORT, name);
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn int(&mut self, name: &str, v: i32) {
        self.name(TAG_INT, name);
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn int_array(&mut self, name: &str, v: &[i32]) {
        self.name(TAG_INT_ARRAY, name);
        self.0.extend_from_slice(&(v.len() as i32).to_be_bytes());
        for x in v {
            self.0.extend_from_slice(&x.to_be_bytes());
        }
    }

    fn byte_array(&mut self, name: &str, v: &[u8]) {
        self.name(TAG_BYTE_ARRAY, name);
        self.0.extend_from_slice(&(v.len() as i32).to_be_bytes());
        self.0.extend_from_slice(v);
    }

    fn empty_compound_list(&mut self, name: &str) {
        self.name(TAG_LIST, name);
        self.0.push(TAG_COMPOUND);
        self.0.extend_from_slice(&0i32.to_be_bytes());
    }

    fn begin(&mut self, name: &str) {
        self.name(TAG_COMPOUND, name);
    }

    fn end(&mut self) {
        self.0.push(TAG_END);
    }
}

fn push_varint(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let mut v = 0u32;
    for shift in (0..35).step_by(7) {
        let b = *bytes.get(*pos).ok_or_else(|| ExportError::Schem("truncated BlockData".into()))?;
        *pos += 1;
        v |= u32::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(ExportError::Schem("varint too long".into()))
}

/// Uncompressed Sponge schematic v2 NBT for `grid`, with `game_ids[m]` the
/// block state of palette block `m`. Air is `minecraft:air` with palette
/// index 0; blocks are indexed `x + z·W + y·W·L`.
pub fn schem_nbt(grid: &BlockGrid, game_ids: &[String]) -> Result<Vec<u8>> {
    if game_ids.len() != grid.num_blocks() {
        return Err(ExportError::NameCount {
            grid: grid.num_blocks(),
            names: game_ids.len(),
        });
    }
    let n = grid.size();
    let side = i16::try_from(n).map_err(|_| ExportError::Range("grid too large for .schem".into()))?;
    // Palette indices in order of first use among solid blocks; air is 0.
    let mut palette: Vec<String> = vec!["minecraft:air".into()];
    let mut index_of = vec![None; grid.num_blocks()];
    let mut data = Vec::with_capacity(grid.num_cells());
    for y in 0..n {
        for z in 0..n {
            for x in 0..n {
                let idx = match grid.get(x, y, z) {
                    None => 0,
                    Some(m) => *index_of[m].get_or_insert_with(|| {
                        if let Some(p) = palette.iter().position(|s| s == &game_ids[m]) {
                            p as u32
                        } else {
                            palette.push(game_ids[m].clone());
                            (palette.len() - 1) as u32
                        }
                    }),
                };
                push_varint(&mut data, idx);
            }
        }
    }
    let mut nbt = Nbt(Vec::new());
    nbt.begin("Schematic");
    nbt.int("Version", 2);
    nbt.int("DataVersion", SCHEM_DATA_VERSION);
    nbt.short("Width", side);
    nbt.short("Height", side);
    nbt.short("Length", side);
    nbt.int_array("Offset", &[0, 0, 0]);
    nbt.int("PaletteMax", palette.len() as i32);
    nbt.begin("Palette");
    for (i, name) in palette.iter().enumerate() {
        nbt.int(name, i as i32);
    }
    nbt.end();
    nbt.byte_array("BlockData", &data);
    nbt.empty_compound_list("BlockEntities");
    nbt.end();
    Ok(nbt.0)
}

pub fn write_schem(grid: &BlockGrid, game_ids: &[String], path: &Path) -> Result<()> {
    let nbt = schem_nbt(grid, game_ids)?;
    let mut enc = GzEncoder::new(std::fs::File::create(path)?, Compression::default());
    enc.write_all(&nbt)?;
    enc.finish()?;
    Ok(())
}

/// Dimensions, palette and block indices of a Sponge v2 schematic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemContents {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub palette: Vec<(String, i32)>,
    /// Palette index per block, `x + z·W + y·W·L`.
    pub blocks: Vec<u32>,
}

impl SchemContents {
    /// Back to a grid over `game_ids`. Palette entries not in `game_ids`
    /// other than air are errors.
    pub fn to_grid(&self, game_ids: &[String]) -> Result<BlockGrid> {
        let n = self.width;
        if self.height != n || self.length != n {
            return Err(ExportError::Schem("schematic is not a cube".into()));
        }
        let mut by_index = std::collections::HashMap::new();
        for (name, idx) in &self.palette {
            let block = if name == "minecraft:air" {
                None
            } else {
                Some(
                    game_ids
                        .iter()
                        .position(|g| g == name)
                        .ok_or_else(|| ExportError::Schem(format!("unknown block state `{name}`")))?,
                )
            };
            by_index.insert(*idx as u32, block);
        }
        let mut grid = BlockGrid::air(n, game_ids.len());
        for y in 0..n {
            for z in 0..n {
                for x in 0..n {
                    let idx = self.blocks[x + z * n + y * n * n];
                    let b = *by_index.get(&idx).ok_or_else(|| ExportError::Schem(format!("palette index {idx} undefined")))?;
                    grid.set(x, y, z, b);
                }
            }
        }
        Ok(grid)
    }
}

fn nbt_string(r: &mut Cursor<'_>) -> Result<String> {
    let len = r.be_i16()? as u16 as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ExportError::Utf8)
}

fn skip_payload(r: &mut Cursor<'_>, tag: u8) -> Result<()> {
    match tag {
        1 => drop(r.take(1)?),
        2 => drop(r.take(2)?),
        3 | 5 => drop(r.take(4)?),
        4 | 6 => drop(r.take(8)?),
        7 => {
            let n = r.be_i32()?.max(0) as usize;
            r.take(n)?;
        }
        8 => drop(nbt_string(r)?),
        9 => {
            let inner = r.u8()?;
            let n = r.be_i32()?.max(0);
            for _ in 0..n {
                skip_payload(r, inner)?;
            }
        }
        10 => loop {
            let t = r.u8()?;
            if t == TAG_END {
                break;
            }
            nbt_string(r)?;
            skip_payload(r, t)?;
        },
        11 => {
            let n = r.be_i32()?.max(0) as usize;
            r.take(n * 4)?;
        }
        12 => {
            let n = r.be_i32()?.max(0) as usize;
            r.take(n * 8)?;
        }
        t => return Err(ExportError::Schem(format!("unknown NBT tag {t}"))),
    }
    Ok(())
}

/// Parses uncompressed schematic NBT.
pub fn parse_schem_nbt(bytes: &[u8]) -> Result<SchemContents> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.u8()? != TAG_COMPOUND {
        return Err(ExportError::Schem("root is not a compound".into()));
    }
    nbt_string(&mut r)?;
    let (mut w, mut h, mut l) = (None, None, None);
    let mut version = None;
    let mut palette = Vec::new();
    let mut data = None;
    loop {
        let tag = r.u8()?;
        if tag == TAG_END {
            break;
        }
        let name = nbt_string(&mut r)?;
        match (tag, name.as_str()) {
            (TAG_SHORT, "Width") => w = Some(r.be_i16()? as u16 as usize),
            (TAG_SHORT, "Height") => h = Some(r.be_i16()? as u16 as usize),
            (TAG_SHORT, "Length") => l = Some(r.be_i16()? as u16 as usize),
            (TAG_INT, "Version") => version = Some(r.be_i32()?),
            (TAG_COMPOUND, "Palette") => loop {
                let t = r.u8()?;
                if t == TAG_END {
                    break;
                }
                let key = nbt_string(&mut r)?;
                if t != TAG_INT {
                    return Err(ExportError::Schem("palette values must be ints".into()));
                }
                palette.push((key, r.be_i32()?));
            },
            (TAG_BYTE_ARRAY, "BlockData") => {
                let n = r.be_i32()?.max(0) as usize;
                data = Some(r.take(n)?.to_vec());
            }
            (TAG_STRING, _) => drop(nbt_string(&mut r)?),
            (t, _) => skip_payload(&mut r, t)?,
        }
    }
    if version != Some(2) {
        return Err(ExportError::Schem(format!("expected Version 2, found {version:?}")));
    }
    let (width, height, length) = match (w, h, l) {
        (Some(w), Some(h), Some(l)) => (w, h, l),
        _ => return Err(ExportError::Schem("missing dimensions".into())),
    };
    let data = data.ok_or_else(|| ExportError::Schem("missing BlockData".into()))?;
    let mut blocks = Vec::with_capacity(width * height * length);
    let mut pos = 0;
    while pos < data.len() {
        blocks.push(read_varint(&data, &mut pos)?);
    }
    if blocks.len() != width * height * length {
        return Err(ExportError::Schem(format!("{} blocks for a {width}x{height}x{length} region", blocks.len())));
    }
    Ok(SchemContents {
        width,
        height,
        length,
        palette,
        blocks,
    })
}

pub fn read_schem(path: &Path) -> Result<SchemContents> {
    let mut raw = Vec::new();
    GzDecoder::new(std::fs::File::open(path)?).read_to_end(&mut raw)?;
    parse_schem_nbt(&raw)
}
