//! Functional constraints on the discrete block grid.
//!
//! The distribution loss `L_D = Σ_t |G(t) − P(t)|` compares per-type block
//! counts with user targets. The adjacency loss counts local block
//! configurations with a one-hot 3D convolution:
//! `L_P = Σ_p w_p Σ_i ReLU(conv_{W_p}(C) − j_p + 1)_i`.
//!
//! Patterns may reference air. They are matched against the grid augmented
//! with an explicit air channel `1 − Σ_m C[m]`, stored after the `M` block
//! channels.

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::grid::BlockGrid;
use crate::palette::BlockPalette;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("pattern needs 1..={max} entries, got {got}")]
    EntryCount { got: usize, max: usize },
    #[error("pattern offset {offset:?} outside a {size}³ patch")]
    OffsetRange { offset: [usize; 3], size: usize },
    #[error("duplicate pattern offset {0:?}")]
    DuplicateOffset([usize; 3]),
    #[error("patch size {patch} exceeds grid size {grid}")]
    PatternTooLarge { patch: usize, grid: usize },
    #[error("block id {id} outside a palette of {palette}")]
    BlockId { id: usize, palette: usize },
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("negative distribution target {0}")]
    NegativeTarget(f64),
    #[error("distribution entry for `{0}` needs exactly one of `count` or `fraction`")]
    TargetKind(String),
    #[error("constraint file {path}: {message}")]
    File { path: std::path::PathBuf, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ConstraintError>;

/// Target amount of one block type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetAmount {
    Count(f64),
    /// Share of the current solid cells.
    Fraction(f64),
}

impl TargetAmount {
    pub fn resolve(self, solid_cells: f64) -> f64 {
        match self {
            TargetAmount::Count(c) => c,
            TargetAmount::Fraction(f) => f * solid_cells,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistributionTarget {
    pub targets: Vec<(usize, TargetAmount)>,
}

impl DistributionTarget {
    pub fn counts(targets: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            targets: targets.into_iter().map(|(b, c)| (b, TargetAmount::Count(c))).collect(),
        }
    }

    pub fn fractions(targets: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            targets: targets.into_iter().map(|(b, f)| (b, TargetAmount::Fraction(f))).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        for &(id, amount) in &self.targets {
            if id >= num_blocks {
                return Err(ConstraintError::BlockId { id, palette: num_blocks });
            }
            let (TargetAmount::Count(v) | TargetAmount::Fraction(v)) = amount;
            if !(v >= 0.0) {
                return Err(ConstraintError::NegativeTarget(v));
            }
        }
        Ok(())
    }

    /// Same targets with block `b` renamed to `perm[b]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        Self {
            targets: self.targets.iter().map(|&(b, a)| (perm[b], a)).collect(),
        }
    }
}

/// Per-type counts `P(t)` of a cell-major `[N³, M]` grid as a differentiable
/// channel sum `[M]`.
pub fn block_counts_var(g: &mut Graph, c: Var) -> Result<Var> {
    Ok(g.sum_axis(c, 0)?)
}

pub fn block_counts(grid: &BlockGrid) -> Vec<usize> {
    grid.counts()
}

/// `Σ_t |G(t) − P(t)|` over the target's block types. Fraction targets are
/// scaled by the grid's current (detached) solid-cell count.
pub fn distribution_loss(g: &mut Graph, c: Var, target: &DistributionTarget) -> Result<Var> {
    let m = g.shape(c)[1];
    target.validate(m)?;
    if target.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let counts = block_counts_var(g, c)?;
    let solid: f64 = g.value(counts).iter().sum();
    let ids: Vec<usize> = target.targets.iter().map(|t| t.0).collect();
    // One row per target term so a type named twice counts twice.
    let mut select = vec![0.0; m * ids.len()];
    for (j, &id) in ids.iter().enumerate() {
        select[id * ids.len() + j] = 1.0;
    }
    let counts = g.reshape(counts, vec![1, m])?;
    let sel = g.constant(vec![m, ids.len()], select)?;
    let p = g.matmul(counts, sel)?;
    let goal: Vec<f64> = target.targets.iter().map(|t| t.1.resolve(solid)).collect();
    let goal = g.constant(vec![1, ids.len()], goal)?;
    let diff = g.sub(goal, p)?;
    let abs = g.abs(diff);
    Ok(g.sum(abs))
}

pub fn distribution_loss_value(grid: &BlockGrid, target: &DistributionTarget) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.leaf(&grid.one_hot());
    let l = distribution_loss(&mut g, c, target)?;
    Ok(g.item(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternBlock {
    Air,
    Block(usize),
}

impl PatternBlock {
    /// Channel in the augmented `[M + 1]` grid.
    pub fn channel(self, num_blocks: usize) -> usize {
        match self {
            PatternBlock::Air => num_blocks,
            PatternBlock::Block(b) => b,
        }
    }

    fn matches(self, cell: Option<usize>) -> bool {
        match self {
            PatternBlock::Air => cell.is_none(),
            PatternBlock::Block(b) => cell == Some(b),
        }
    }
}

/// A `K³` patch configuration. Offsets are `(x, y, z)`, `y` up.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPattern {
    size: usize,
    entries: Vec<([usize; 3], PatternBlock)>,
    /// Positive when prohibited, negative when desired.
    pub weight: f64,
}

impl AdjacencyPattern {
    pub fn new(size: usize, entries: Vec<([usize; 3], PatternBlock)>, weight: f64) -> Result<Self> {
        let max = size * size * size;
        if entries.is_empty() || entries.len() > max {
            return Err(ConstraintError::EntryCount { got: entries.len(), max });
        }
        let mut seen = HashSet::new();
        for &(offset, _) in &entries {
            if offset.iter().any(|&o| o >= size) {
                return Err(ConstraintError::OffsetRange { offset, size });
            }
            if !seen.insert(offset) {
                return Err(ConstraintError::DuplicateOffset(offset));
            }
        }
        Ok(Self { size, entries, weight })
    }

    /// Block `b` directly above an air cell.
    pub fn block_above_air(b: usize, weight: f64) -> Self {
        Self::new(2, vec![([0, 1, 0], PatternBlock::Block(b)), ([0, 0, 0], PatternBlock::Air)], weight).expect("valid pattern")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[([usize; 3], PatternBlock)] {
        &self.entries
    }

    /// `j_p`.
    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        for &(_, b) in &self.entries {
            if let PatternBlock::Block(id) = b {
                if id >= num_blocks {
                    return Err(ConstraintError::BlockId { id, palette: num_blocks });
                }
            }
        }
        Ok(())
    }

    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|&(o, b)| {
                (
                    o,
                    match b {
                        PatternBlock::Air => PatternBlock::Air,
                        PatternBlock::Block(id) => PatternBlock::Block(perm[id]),
                    },
                )
            })
            .collect();
        Self {
            size: self.size,
            entries,
            weight: self.weight,
        }
    }
}

/// One-hot kernel `[1, M + 1, K, K, K]` over the air-augmented channels.
pub fn pattern_kernel(p: &AdjacencyPattern, num_blocks: usize) -> Result<Tensor> {
    p.validate(num_blocks)?;
    let (k, ch) = (p.size, num_blocks + 1);
    let mut data = vec![0.0; ch * k * k * k];
    for &([x, y, z], b) in &p.entries {
        data[((b.channel(num_blocks) * k + x) * k + y) * k + z] = 1.0;
    }
    Ok(Tensor::new(vec![1, ch, k, k, k], data)?)
}

/// Channel-major `[M + 1, N, N, N]` grid with the air channel last.
pub fn augmented_grid(g: &mut Graph, c: Var, n: usize) -> Result<Var> {
    let m = g.shape(c)[1];
    let occ = g.sum_axis(c, 1)?;
    let occ = g.reshape(occ, vec![n * n * n, 1])?;
    let air_neg = g.neg(occ);
    let air = g.add_scalar(air_neg, 1.0);
    let full = g.concat(&[c, air], 1)?;
    let t = g.transpose(full)?;
    Ok(g.reshape(t, vec![m + 1, n, n, n])?)
}

/// Binary match map of one pattern: `ReLU(conv − j_p + 1)` summed.
fn match_count(g: &mut Graph, aug: Var, p: &AdjacencyPattern, num_blocks: usize) -> Result<Var> {
    let n = g.shape(aug)[1];
    if p.size > n {
        return Err(ConstraintError::PatternTooLarge { patch: p.size, grid: n });
    }
    let kernel = pattern_kernel(p, num_blocks)?;
    let w = g.leaf(&kernel);
    let response = g.conv3d(aug, w)?;
    let shifted = g.add_scalar(response, -(p.num_entries() as f64 - 1.0));
    let hit = g.relu(shifted);
    Ok(g.sum(hit))
}

/// `Σ_p w_p · matches_p` on a cell-major `[N³, M]` grid.
pub fn adjacency_loss(g: &mut Graph, c: Var, n: usize, patterns: &[AdjacencyPattern]) -> Result<Var> {
    let m = g.shape(c)[1];
    let mut total = g.scalar(0.0);
    if patterns.is_empty() {
        return Ok(total);
    }
    let aug = augmented_grid(g, c, n)?;
    for p in patterns {
        let count = match_count(g, aug, p, m)?;
        let weighted = g.scale(count, p.weight);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

pub fn adjacency_loss_value(grid: &BlockGrid, patterns: &[AdjacencyPattern]) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.leaf(&grid.one_hot());
    let l = adjacency_loss(&mut g, c, grid.size(), patterns)?;
    Ok(g.item(l))
}

/// Number of placements of `p` fully inside `grid`.
pub fn count_pattern(grid: &BlockGrid, p: &AdjacencyPattern) -> Result<usize> {
    let mut g = Graph::new();
    let c = g.leaf(&grid.one_hot());
    let aug = augmented_grid(&mut g, c, grid.size())?;
    let count = match_count(&mut g, aug, p, grid.num_blocks())?;
    Ok(g.item(count).round() as usize)
}

/// Direct sliding-window count without convolution.
pub fn count_pattern_direct(grid: &BlockGrid, p: &AdjacencyPattern) -> usize {
    let (n, k) = (grid.size(), p.size());
    if k > n {
        return 0;
    }
    let mut hits = 0;
    for x in 0..=n - k {
        for y in 0..=n - k {
            for z in 0..=n - k {
                if p.entries().iter().all(|&([dx, dy, dz], b)| b.matches(grid.get(x + dx, y + dy, z + dz))) {
                    hits += 1;
                }
            }
        }
    }
    hits
}

/// Distribution targets and adjacency patterns of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub distribution: DistributionTarget,
    pub patterns: Vec<AdjacencyPattern>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintFile {
    #[serde(default)]
    distribution: Vec<DistributionEntry>,
    #[serde(default)]
    patterns: Vec<PatternEntry>,
    #[serde(default)]
    floating: Vec<FloatingEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionEntry {
    block: String,
    count: Option<f64>,
    fraction: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternEntry {
    size: usize,
    weight: f64,
    entries: Vec<PatternCell>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternCell {
    offset: [usize; 3],
    block: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FloatingEntry {
    /// Block names, or `"*"` for every palette block.
    blocks: Vec<String>,
    weight: f64,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.distribution.is_empty() && self.patterns.is_empty()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        self.distribution.validate(num_blocks)?;
        self.patterns.iter().try_for_each(|p| p.validate(num_blocks))
    }

    /// Parses a TOML constraint file against `palette`:
    ///
    /// ```toml
    /// [[distribution]]
    /// block = "gold_block"
    /// fraction = 1.0          # or: count = 40
    ///
    /// [[patterns]]
    /// size = 2
    /// weight = 2.0
    /// entries = [{ offset = [0, 1, 0], block = "sand" }, { offset = [0, 0, 0], block = "air" }]
    ///
    /// [[floating]]            # shorthand: each block above air
    /// blocks = ["*"]
    /// weight = 2.0
    /// ```
    pub fn from_toml(text: &str, palette: &BlockPalette) -> std::result::Result<Self, String> {
        let file: ConstraintFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let lookup = |name: &str| palette.index_of(name).ok_or_else(|| ConstraintError::UnknownBlock(name.into()).to_string());
        let mut set = ConstraintSet::default();
        for d in file.distribution {
            let id = lookup(&d.block)?;
            let amount = match (d.count, d.fraction) {
                (Some(c), None) => TargetAmount::Count(c),
                (None, Some(f)) => TargetAmount::Fraction(f),
                _ => return Err(ConstraintError::TargetKind(d.block).to_string()),
            };
            set.distribution.targets.push((id, amount));
        }
        for p in file.patterns {
            let entries = p
                .entries
                .into_iter()
                .map(|c| {
                    let b = if c.block == "air" { PatternBlock::Air } else { PatternBlock::Block(lookup(&c.block)?) };
                    Ok((c.offset, b))
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            set.patterns.push(AdjacencyPattern::new(p.size, entries, p.weight).map_err(|e| e.to_string())?);
        }
        for f in file.floating {
            let ids: Vec<usize> = if f.blocks.iter().any(|b| b == "*") {
                (0..palette.len()).collect()
            } else {
                f.blocks.iter().map(|b| lookup(b)).collect::<std::result::Result<_, _>>()?
            };
            set.patterns.extend(ids.into_iter().map(|b| AdjacencyPattern::block_above_air(b, f.weight)));
        }
        set.validate(palette.len()).map_err(|e| e.to_string())?;
        Ok(set)
    }

    pub fn load(path: &Path, palette: &BlockPalette) -> Result<Self> {
        let err = |message: String| ConstraintError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_toml(&text, palette).map_err(err)
    }
}
