//! Discrete block grids: the exportable artifact of a trained field.

use crate::autodiff::Tensor;

/// Stored id of an air cell; block `m` is stored as `m + 1`.
pub const AIR: u16 = 0;

/// `N³` cells, each air or one of `M` palette blocks.
///
/// Cell `(x, y, z)` lives at index `(x * N + y) * N + z`; `y` points up.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockGrid {
    size: usize,
    num_blocks: usize,
    cells: Vec<u16>,
}

impl BlockGrid {
    pub fn air(size: usize, num_blocks: usize) -> Self {
        Self {
            size,
            num_blocks,
            cells: vec![AIR; size * size * size],
        }
    }

    /// Grid from stored ids (`0` = air, `m + 1` = block `m`). Returns `None`
    /// when the length or an id is out of range.
    pub fn from_stored(size: usize, num_blocks: usize, cells: Vec<u16>) -> Option<Self> {
        let ok = cells.len() == size * size * size && cells.iter().all(|&c| (c as usize) <= num_blocks);
        ok.then_some(Self {
            size,
            num_blocks,
            cells,
        })
    }

    pub fn from_fn(size: usize, num_blocks: usize, mut f: impl FnMut(usize, usize, usize) -> Option<usize>) -> Self {
        let mut g = Self::air(size, num_blocks);
        for x in 0..size {
            for y in 0..size {
                for z in 0..size {
                    g.set(x, y, z, f(x, y, z));
                }
            }
        }
        g
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.size + y) * self.size + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Option<usize> {
        self.block_at(self.index(x, y, z))
    }

    pub fn block_at(&self, cell: usize) -> Option<usize> {
        match self.cells[cell] {
            AIR => None,
            s => Some(s as usize - 1),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, block: Option<usize>) {
        let i = self.index(x, y, z);
        self.set_cell(i, block);
    }

    pub fn set_cell(&mut self, cell: usize, block: Option<usize>) {
        assert!(block.is_none_or(|b| b < self.num_blocks), "block id out of range");
        self.cells[cell] = block.map_or(AIR, |b| b as u16 + 1);
    }

    pub fn stored(&self) -> &[u16] {
        &self.cells
    }

    pub fn solid_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c != AIR).count()
    }

    /// Per-block occurrence counts.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_blocks];
        for &c in &self.cells {
            if c != AIR {
                counts[c as usize - 1] += 1;
            }
        }
        counts
    }

    /// Cell-major one-hot occupancy `[N³, M]`; air cells are all zero.
    pub fn one_hot(&self) -> Tensor {
        let m = self.num_blocks;
        let mut data = vec![0.0; self.cells.len() * m];
        for (i, &c) in self.cells.iter().enumerate() {
            if c != AIR {
                data[i * m + c as usize - 1] = 1.0;
            }
        }
        Tensor::new(vec![self.cells.len(), m], data).expect("one-hot shape")
    }

    /// Decodes a cell-major `[N³, M]` block tensor: a cell is air when its
    /// channel sum is below one half, else its argmax channel.
    pub fn from_occupancy(size: usize, num_blocks: usize, c: &[f64]) -> Self {
        let mut g = Self::air(size, num_blocks);
        for cell in 0..g.cells.len() {
            let row = &c[cell * num_blocks..(cell + 1) * num_blocks];
            if row.iter().sum::<f64>() >= 0.5 {
                g.set_cell(cell, Some(argmax(row)));
            }
        }
        g
    }

    /// Same grid with block ids relabeled: block `m` becomes `perm[m]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut g = self.clone();
        for i in 0..g.cells.len() {
            g.set_cell(i, self.block_at(i).map(|b| perm[b]));
        }
        g
    }
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Center of cell `i` along one axis of a width-`n` grid in the unit cube.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}
