//! Post-hoc quantization of an unconstrained continuous field.
//!
//! Each cell center is queried once: cells with density below the threshold
//! become air, the rest take the palette block whose mean color is nearest
//! in L2 (lowest id on ties).

use serde::Deserialize;

use crate::autodiff::Graph;
use crate::field::{evaluate_cells, FieldParams};
use crate::grid::{cell_center, BlockGrid};
use crate::palette::{BlockPalette, Rgb};

/// Default density threshold for solid cells.
pub const DEFAULT_THRESHOLD: f64 = 10.0;

/// Color and density over the unit cube (grid coordinates).
pub trait ContinuousField {
    fn query(&self, p: [f64; 3]) -> (Rgb, f64);
}

impl<F: Fn([f64; 3]) -> (Rgb, f64)> ContinuousField for F {
    fn query(&self, p: [f64; 3]) -> (Rgb, f64) {
        self(p)
    }
}

fn dist2(a: Rgb, b: Rgb) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Index of the mean color nearest to `rgb`; the first minimum wins.
pub fn nearest_block(rgb: Rgb, mean_colors: &[Rgb]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in mean_colors.iter().enumerate() {
        let d = dist2(rgb, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn posthoc_quantize(field: &dyn ContinuousField, palette: &BlockPalette, n: usize, threshold: f64) -> BlockGrid {
    let means = palette.mean_colors();
    BlockGrid::from_fn(n, palette.len(), |x, y, z| {
        let (rgb, sigma) = field.query([cell_center(x, n), cell_center(y, n), cell_center(z, n)]);
        (sigma >= threshold).then(|| nearest_block(rgb, means))
    })
}

/// A trained field read as a continuous one: density `σ` and the
/// `B_soft`-weighted mean block color, precomputed at the cell centers of an
/// `n`-wide grid.
pub struct FieldAtCells {
    n: usize,
    colors: Vec<Rgb>,
    sigma: Vec<f64>,
}

impl FieldAtCells {
    pub fn new(params: &FieldParams, palette: &BlockPalette, n: usize) -> Self {
        let m = params.config.num_blocks;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let cells = evaluate_cells(&mut g, params, &bound, n).expect("field shapes are consistent");
        let b = g.softmax(cells.logits, 1).expect("logits are 2-D");
        let means = palette.mean_colors();
        let colors = g
            .value(b)
            .chunks(m)
            .map(|row| {
                let mut c = [0.0; 3];
                for (w, mc) in row.iter().zip(means) {
                    for k in 0..3 {
                        c[k] += w * mc[k];
                    }
                }
                c
            })
            .collect();
        Self {
            n,
            colors,
            sigma: g.value(cells.sigma).to_vec(),
        }
    }
}

impl ContinuousField for FieldAtCells {
    fn query(&self, p: [f64; 3]) -> (Rgb, f64) {
        let idx = |v: f64| ((v * self.n as f64).floor().max(0.0) as usize).min(self.n - 1);
        let i = (idx(p[0]) * self.n + idx(p[1])) * self.n + idx(p[2]);
        (self.colors[i], self.sigma[i])
    }
}

/// Analytic field made of solid primitives over a zero-density background.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct SyntheticField {
    #[serde(default)]
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64, color: Rgb, density: f64 },
    Box { min: [f64; 3], max: [f64; 3], color: Rgb, density: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius, .. } => dist2(p, *center) <= radius * radius,
            Shape::Box { min, max, .. } => (0..3).all(|k| min[k] <= p[k] && p[k] <= max[k]),
        }
    }

    fn value(&self) -> (Rgb, f64) {
        match self {
            Shape::Sphere { color, density, .. } | Shape::Box { color, density, .. } => (*color, *density),
        }
    }
}

impl SyntheticField {
    /// Parses a TOML list of `[[shapes]]` with `kind = "sphere" | "box"`.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

impl ContinuousField for SyntheticField {
    /// The first shape containing `p` wins.
    fn query(&self, p: [f64; 3]) -> (Rgb, f64) {
        self.shapes
            .iter()
            .find(|s| s.contains(p))
            .map_or(([0.0; 3], 0.0), Shape::value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_is_all_air() {
        let palette = BlockPalette::builtin();
        let f = |_: [f64; 3]| ([0.5; 3], 0.0);
        assert_eq!(posthoc_quantize(&f, &palette, 4, 1e-6).solid_cells(), 0);
    }

    #[test]
    fn exact_mean_color_is_chosen() {
        let palette = BlockPalette::builtin();
        let gold = palette.index_of("gold_block").unwrap();
        let c = palette.mean_colors()[gold];
        let f = move |_: [f64; 3]| (c, 11.0);
        let g = posthoc_quantize(&f, &palette, 3, DEFAULT_THRESHOLD);
        assert_eq!(g.counts()[gold], 27);
    }

    #[test]
    fn threshold_is_inclusive_of_solid() {
        let palette = BlockPalette::builtin_subset(&["stone"]).unwrap();
        for (sigma, solid) in [(9.99, 0), (10.0, 1), (10.01, 1)] {
            let f = move |_: [f64; 3]| ([0.0; 3], sigma);
            assert_eq!(posthoc_quantize(&f, &palette, 1, 10.0).solid_cells(), solid, "σ = {sigma}");
        }
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let means = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(nearest_block([0.5, 0.0, 0.0], &means), 0);
        assert_eq!(nearest_block([0.6, 0.0, 0.0], &means), 1);
    }

    #[test]
    fn synthetic_shapes_parse_and_query() {
        let f = SyntheticField::from_toml(
            r#"
            [[shapes]]
            kind = "box"
            min = [0.0, 0.0, 0.0]
            max = [1.0, 0.25, 1.0]
            color = [0.1, 0.6, 0.1]
            density = 50.0
            [[shapes]]
            kind = "sphere"
            center = [0.5, 0.6, 0.5]
            radius = 0.2
            color = [0.9, 0.8, 0.1]
            density = 20.0
            "#,
        )
        .unwrap();
        assert_eq!(f.query([0.5, 0.1, 0.5]).1, 50.0);
        assert_eq!(f.query([0.5, 0.6, 0.5]).0, [0.9, 0.8, 0.1]);
        assert_eq!(f.query([0.05, 0.9, 0.05]).1, 0.0);
    }
}
