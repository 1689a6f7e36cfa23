//! Block palette: face textures, the frozen 16³ voxel model of every block
//! type, and per-block mean colors.
//!
//! Voxel coordinates inside a block are `(x, y, z)` with `x` running west to
//! east, `y` bottom to top and `z` north to south. Every voxel belongs to the
//! shell `d = min(x, 15-x, y, 15-y, z, 15-z)` and takes its color from the
//! highest-priority face whose plane at inset `d` contains it, in the order
//! up, down, north, south, east, west. The texel is looked up at the voxel's
//! in-plane position, so shell `d` shows the face texture cropped by `d`
//! texels on each side.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::autodiff::Tensor;

pub const TEXTURE_SIZE: usize = 16;
const VOXELS: usize = TEXTURE_SIZE * TEXTURE_SIZE * TEXTURE_SIZE;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub type Rgb = [f64; 3];

#[derive(Debug, Error)]
pub enum PaletteError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decoding texture {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("texture {what} is {width}x{height}, expected 16x16")]
    TextureSize { what: String, width: usize, height: usize },
    #[error("texture value out of [0, 1] in {0}")]
    TextureRange(String),
    #[error("duplicate block name `{0}`")]
    DuplicateName(String),
    #[error("block `{block}` has no texture for face {face:?}")]
    MissingTexture { block: String, face: Face },
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("palette manifest: {0}")]
    Manifest(String),
    #[error("unsupported palette schema_version {0} (expected {MANIFEST_SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("palette must contain at least one block")]
    Empty,
}

/// Block faces in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Face {
    Up,
    Down,
    North,
    South,
    East,
    West,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Up, Face::Down, Face::North, Face::South, Face::East, Face::West];

    /// Distance of voxel `(x, y, z)` from this face's outer plane.
    fn inset(self, x: usize, y: usize, z: usize) -> usize {
        let m = TEXTURE_SIZE - 1;
        match self {
            Face::Up => m - y,
            Face::Down => y,
            Face::North => z,
            Face::South => m - z,
            Face::East => m - x,
            Face::West => x,
        }
    }

    /// Texel `(row, col)` seen at voxel `(x, y, z)` on this face; row 0 is
    /// the top of the image.
    fn texel(self, x: usize, y: usize, z: usize) -> (usize, usize) {
        let m = TEXTURE_SIZE - 1;
        match self {
            Face::Up | Face::Down => (z, x),
            Face::North => (m - y, m - x),
            Face::South => (m - y, x),
            Face::East => (m - y, m - z),
            Face::West => (m - y, z),
        }
    }
}

/// 16×16 RGB texture, row-major, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    texels: Vec<Rgb>,
}

impl Texture {
    pub fn new(width: usize, height: usize, texels: Vec<Rgb>) -> Result<Self, PaletteError> {
        if width != TEXTURE_SIZE || height != TEXTURE_SIZE || texels.len() != width * height {
            return Err(PaletteError::TextureSize {
                what: "in memory".into(),
                width,
                height,
            });
        }
        if texels.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PaletteError::TextureRange("in-memory texture".into()));
        }
        Ok(Self { texels })
    }

    pub fn uniform(rgb: Rgb) -> Self {
        Self {
            texels: vec![rgb; TEXTURE_SIZE * TEXTURE_SIZE],
        }
    }

    pub fn from_fn(f: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut texels = Vec::with_capacity(TEXTURE_SIZE * TEXTURE_SIZE);
        for r in 0..TEXTURE_SIZE {
            for c in 0..TEXTURE_SIZE {
                texels.push(f(r, c).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { texels }
    }

    /// Loads a 16×16 PNG; 8-bit RGB or RGBA, alpha ignored.
    pub fn load_png(path: &Path) -> Result<Self, PaletteError> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => PaletteError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => PaletteError::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if w != TEXTURE_SIZE || h != TEXTURE_SIZE {
            return Err(PaletteError::TextureSize {
                what: path.display().to_string(),
                width: w,
                height: h,
            });
        }
        let texels = rgb.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
        Ok(Self { texels })
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        self.texels[row * TEXTURE_SIZE + col]
    }

    pub fn texels(&self) -> &[Rgb] {
        &self.texels
    }

    pub fn save_png(&self, path: &Path) -> std::io::Result<()> {
        let mut img = image::RgbImage::new(TEXTURE_SIZE as u32, TEXTURE_SIZE as u32);
        for (i, t) in self.texels.iter().enumerate() {
            let px = t.map(|v| (v * 255.0).round() as u8);
            img.put_pixel((i % TEXTURE_SIZE) as u32, (i / TEXTURE_SIZE) as u32, image::Rgb(px));
        }
        img.save(path).map_err(std::io::Error::other)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockType {
    pub id: usize,
    pub name: String,
    /// Namespaced in-game identifier used by the structure exporters.
    pub game_id: String,
    /// Indexed by [`Face`] priority order.
    pub faces: [Texture; 6],
}

impl BlockType {
    pub fn face(&self, face: Face) -> &Texture {
        &self.faces[face as usize]
    }
}

/// Assembles the 16³ voxel colors of a block, indexed `(x * 16 + y) * 16 + z`.
pub fn assemble_block_voxels(block: &BlockType) -> Vec<Rgb> {
    let mut voxels = Vec::with_capacity(VOXELS);
    for x in 0..TEXTURE_SIZE {
        for y in 0..TEXTURE_SIZE {
            for z in 0..TEXTURE_SIZE {
                let shell = Face::ALL.iter().map(|f| f.inset(x, y, z)).min().unwrap_or(0);
                let face = Face::ALL
                    .into_iter()
                    .find(|f| f.inset(x, y, z) == shell)
                    .expect("some face attains the minimum inset");
                let (r, c) = face.texel(x, y, z);
                voxels.push(block.face(face).get(r, c));
            }
        }
    }
    voxels
}

/// Arithmetic mean over all 6 × 16 × 16 face texels.
pub fn mean_block_color(block: &BlockType) -> Rgb {
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for tex in &block.faces {
        for t in tex.texels() {
            for k in 0..3 {
                acc[k] += t[k];
            }
            count += 1;
        }
    }
    acc.map(|v| v / count as f64)
}

/// The `M` solid block types with their frozen voxel atlas.
#[derive(Debug, Clone)]
pub struct BlockPalette {
    blocks: Vec<BlockType>,
    atlas: Tensor,
    mean_colors: Vec<Rgb>,
}

impl BlockPalette {
    pub fn new(blocks: Vec<BlockType>) -> Result<Self, PaletteError> {
        if blocks.is_empty() {
            return Err(PaletteError::Empty);
        }
        let mut seen = HashSet::new();
        for b in &blocks {
            if !seen.insert(b.name.clone()) {
                return Err(PaletteError::DuplicateName(b.name.clone()));
            }
        }
        let mut blocks = blocks;
        for (i, b) in blocks.iter_mut().enumerate() {
            b.id = i;
        }
        let mut data = Vec::with_capacity(blocks.len() * VOXELS * 3);
        for b in &blocks {
            data.extend(assemble_block_voxels(b).into_iter().flatten());
        }
        let atlas = Tensor::new(vec![blocks.len(), TEXTURE_SIZE, TEXTURE_SIZE, TEXTURE_SIZE, 3], data)
            .expect("atlas shape matches data");
        let mean_colors = blocks.iter().map(mean_block_color).collect();
        Ok(Self {
            blocks,
            atlas,
            mean_colors,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[BlockType] {
        &self.blocks
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Frozen `[M, 16, 16, 16, 3]` voxel colors.
    pub fn atlas(&self) -> &Tensor {
        &self.atlas
    }

    /// Color of sub-voxel `(u, v, w)` of block `m`.
    pub fn voxel(&self, m: usize, u: usize, v: usize, w: usize) -> Rgb {
        let base = ((((m * TEXTURE_SIZE) + u) * TEXTURE_SIZE + v) * TEXTURE_SIZE + w) * 3;
        let d = self.atlas.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// `[M, 16, 16, 16]` all-ones occupancy: every palette block is opaque.
    pub fn occupancy(&self) -> Tensor {
        Tensor::full(vec![self.len(), TEXTURE_SIZE, TEXTURE_SIZE, TEXTURE_SIZE], 1.0)
    }

    pub fn mean_colors(&self) -> &[Rgb] {
        &self.mean_colors
    }

    /// Palette restricted to the named blocks, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self, PaletteError> {
        let blocks = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|i| self.blocks[i].clone())
                    .ok_or_else(|| PaletteError::UnknownBlock(n.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(blocks)
    }

    /// Palette whose block `i` is this palette's block `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self, PaletteError> {
        Self::new(order.iter().map(|&i| self.blocks[i].clone()).collect())
    }

    /// Built-in stand-in palette for the standard solid blocks.
    pub fn builtin() -> Self {
        Self::new(builtin::standard_blocks()).expect("builtin palette is valid")
    }

    /// Built-in blocks by name (see [`builtin::CATALOGUE`]).
    pub fn builtin_subset(names: &[&str]) -> Result<Self, PaletteError> {
        let blocks = names
            .iter()
            .map(|n| builtin::block(n).ok_or_else(|| PaletteError::UnknownBlock(n.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(blocks)
    }

    /// Loads a palette manifest (TOML) and its textures, resolved relative
    /// to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, PaletteError> {
        let text = std::fs::read_to_string(path).map_err(|source| PaletteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| PaletteError::Manifest(e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(PaletteError::SchemaVersion(manifest.schema_version));
        }
        let root = path.parent().unwrap_or(Path::new("."));
        let mut seen = HashSet::new();
        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        for (id, entry) in manifest.blocks.into_iter().enumerate() {
            if !seen.insert(entry.name.clone()) {
                return Err(PaletteError::DuplicateName(entry.name));
            }
            let mut faces = Vec::with_capacity(6);
            for face in Face::ALL {
                let rel = entry.face_path(face).ok_or_else(|| PaletteError::MissingTexture {
                    block: entry.name.clone(),
                    face,
                })?;
                faces.push(Texture::load_png(&root.join(rel))?);
            }
            let game_id = entry.game_id.clone().unwrap_or_else(|| format!("minecraft:{}", entry.name));
            blocks.push(BlockType {
                id,
                name: entry.name,
                game_id,
                faces: faces.try_into().expect("six faces"),
            });
        }
        Self::new(blocks)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    #[serde(default)]
    blocks: Vec<ManifestBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBlock {
    name: String,
    game_id: Option<String>,
    /// Fallback for every face.
    texture: Option<String>,
    #[serde(default)]
    faces: ManifestFaces,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFaces {
    up: Option<String>,
    down: Option<String>,
    north: Option<String>,
    south: Option<String>,
    east: Option<String>,
    west: Option<String>,
    /// Fallback for the four lateral faces.
    side: Option<String>,
}

impl ManifestBlock {
    fn face_path(&self, face: Face) -> Option<&str> {
        let f = &self.faces;
        let specific = match face {
            Face::Up => &f.up,
            Face::Down => &f.down,
            Face::North => &f.north,
            Face::South => &f.south,
            Face::East => &f.east,
            Face::West => &f.west,
        };
        let lateral = !matches!(face, Face::Up | Face::Down);
        specific
            .as_deref()
            .or(if lateral { f.side.as_deref() } else { None })
            .or(self.texture.as_deref())
    }
}

pub mod builtin {
    //! Procedural stand-in textures for the standard block set.

    use super::{BlockType, Rgb, Texture};

    /// `(name, game id)`; the first fifteen form the default palette.
    pub const CATALOGUE: [(&str, &str); 16] = [
        ("log_oak", "minecraft:oak_log"),
        ("stone", "minecraft:stone"),
        ("dirt", "minecraft:dirt"),
        ("brick", "minecraft:bricks"),
        ("clay", "minecraft:clay"),
        ("snow", "minecraft:snow_block"),
        ("glazed_terracotta_light_blue", "minecraft:light_blue_glazed_terracotta"),
        ("glazed_terracotta_yellow", "minecraft:yellow_glazed_terracotta"),
        ("redstone_block", "minecraft:redstone_block"),
        ("gold_block", "minecraft:gold_block"),
        ("iron_block", "minecraft:iron_block"),
        ("diamond_block", "minecraft:diamond_block"),
        ("emerald_block", "minecraft:emerald_block"),
        ("cobblestone", "minecraft:cobblestone"),
        ("slime", "minecraft:slime_block"),
        ("sand", "minecraft:sand"),
    ];

    const STANDARD: usize = 15;

    fn hash(seed: u32, r: usize, c: usize) -> f64 {
        let mut h = seed
            .wrapping_mul(0x9E37_79B9)
            .wrapping_add((r as u32).wrapping_mul(0x85EB_CA6B))
            .wrapping_add((c as u32).wrapping_mul(0xC2B2_AE35));
        h ^= h >> 15;
        h = h.wrapping_mul(0x2C1B_3C6D);
        h ^= h >> 12;
        h = h.wrapping_mul(0x297A_2D39);
        h ^= h >> 15;
        h as f64 / u32::MAX as f64
    }

    fn shade(base: Rgb, k: f64) -> Rgb {
        base.map(|v| v * k)
    }

    fn noisy(base: Rgb, amount: f64, seed: u32) -> Texture {
        Texture::from_fn(|r, c| shade(base, 1.0 + amount * (hash(seed, r, c) - 0.5)))
    }

    fn bricks(mortar: Rgb, brick: Rgb, seed: u32) -> Texture {
        Texture::from_fn(|r, c| {
            let offset = if (r / 4) % 2 == 0 { 0 } else { 4 };
            if r % 4 == 3 || (c + offset) % 8 == 7 {
                mortar
            } else {
                shade(brick, 0.9 + 0.2 * hash(seed, r, c))
            }
        })
    }

    fn diagonal(a: Rgb, b: Rgb, seed: u32) -> Texture {
        Texture::from_fn(|r, c| {
            let band = ((r + c) / 3) % 3 == 0 || ((r + 16 - c) / 4) % 4 == 0;
            let base = if band { b } else { a };
            shade(base, 0.95 + 0.1 * hash(seed, r, c))
        })
    }

    fn framed(inner: Rgb, frame: Rgb, seed: u32) -> Texture {
        Texture::from_fn(|r, c| {
            if r == 0 || c == 0 || r == 15 || c == 15 {
                frame
            } else {
                shade(inner, 0.92 + 0.16 * hash(seed, r, c))
            }
        })
    }

    fn faces_all(t: Texture) -> [Texture; 6] {
        std::array::from_fn(|_| t.clone())
    }

    pub fn block(name: &str) -> Option<BlockType> {
        let (id, &(name, game_id)) = CATALOGUE.iter().enumerate().find(|(_, (n, _))| *n == name)?;
        let seed = id as u32 + 1;
        let faces = match name {
            "log_oak" => {
                let top = Texture::from_fn(|r, c| {
                    let (dr, dc) = (r as f64 - 7.5, c as f64 - 7.5);
                    let ring = ((dr * dr + dc * dc).sqrt() / 1.6) as usize % 2;
                    if r == 0 || c == 0 || r == 15 || c == 15 {
                        [0.40, 0.31, 0.19]
                    } else if ring == 0 {
                        [0.72, 0.58, 0.36]
                    } else {
                        [0.62, 0.49, 0.29]
                    }
                });
                let bark = Texture::from_fn(|r, c| {
                    let stripe = if c % 4 == 0 { 0.75 } else { 1.0 };
                    shade([0.42, 0.33, 0.20], stripe * (0.9 + 0.2 * hash(seed, r, c)))
                });
                [top.clone(), top, bark.clone(), bark.clone(), bark.clone(), bark]
            }
            "stone" => faces_all(noisy([0.49, 0.49, 0.49], 0.25, seed)),
            "dirt" => faces_all(noisy([0.53, 0.38, 0.26], 0.35, seed)),
            "brick" => faces_all(bricks([0.62, 0.58, 0.55], [0.59, 0.30, 0.24], seed)),
            "clay" => faces_all(noisy([0.63, 0.65, 0.71], 0.10, seed)),
            "snow" => faces_all(noisy([0.95, 0.98, 0.98], 0.06, seed)),
            "glazed_terracotta_light_blue" => faces_all(diagonal([0.37, 0.64, 0.82], [0.93, 0.93, 0.93], seed)),
            "glazed_terracotta_yellow" => faces_all(diagonal([0.92, 0.76, 0.33], [0.98, 0.93, 0.62], seed)),
            "redstone_block" => faces_all(framed([0.69, 0.10, 0.05], [0.45, 0.05, 0.03], seed)),
            "gold_block" => faces_all(framed([0.98, 0.82, 0.24], [0.86, 0.62, 0.10], seed)),
            "iron_block" => faces_all(framed([0.86, 0.86, 0.86], [0.66, 0.66, 0.66], seed)),
            "diamond_block" => faces_all(framed([0.38, 0.86, 0.84], [0.22, 0.66, 0.64], seed)),
            "emerald_block" => faces_all(framed([0.16, 0.80, 0.36], [0.08, 0.55, 0.22], seed)),
            "cobblestone" => faces_all(Texture::from_fn(|r, c| {
                let cell = hash(seed, r / 4, c / 5 + (r / 4) % 2);
                let edge = r % 4 == 0 || (c + (r / 4) % 2 * 2) % 5 == 0;
                let k = if edge { 0.6 } else { 0.85 + 0.3 * cell };
                shade([0.48, 0.48, 0.48], k)
            })),
            "slime" => faces_all(framed([0.47, 0.78, 0.40], [0.32, 0.62, 0.26], seed)),
            "sand" => faces_all(noisy([0.86, 0.82, 0.62], 0.12, seed)),
            _ => return None,
        };
        Some(BlockType {
            id,
            name: name.to_string(),
            game_id: game_id.to_string(),
            faces,
        })
    }

    pub fn standard_blocks() -> Vec<BlockType> {
        CATALOGUE[..STANDARD]
            .iter()
            .map(|(n, _)| block(n).expect("catalogue entry"))
            .collect()
    }
}
