//! The quantized scene representation.
//!
//! Three coordinate MLPs make up a field: the air head predicts a density
//! `σ = exp(y)` per grid vertex, the block head predicts `M` block-type
//! logits, and a shallow background head maps a view direction to the color
//! seen where a ray leaves the scene.
//!
//! Air and solid probabilities come from the two-way logits
//! `(p_air, p_solid) = (-(σ - t), σ - t)` with threshold `t` (10 by default).
//! The soft air value is the noise-free solid probability of that pair and the
//! hard air value is the solid component of a hard gumbel-softmax sample.
//! Soft block values are `softmax(logits)`; hard block values are a hard
//! gumbel-softmax sample. Hard samples carry straight-through gradients.
//!
//! Grids are cell-major: tensors have shape `[N³, ·]` with cell `(x, y, z)`
//! at row `(x * N + y) * N + z` and its center at `((x + ½) / N, …)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::grid::{argmax, cell_center, BlockGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 8,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn output_len(&self) -> usize {
        3 * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }
}

/// `[x, sin(2^k π x_d) for d, cos(2^k π x_d) for d]` for `k < L`.
pub fn positional_encode(x: [f64; 3], cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_len());
    if cfg.include_input {
        out.extend_from_slice(&x);
    }
    for k in 0..cfg.num_frequencies {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (w * v).sin()));
        out.extend(x.iter().map(|v| (w * v).cos()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub num_blocks: usize,
    pub encoding: EncodingConfig,
    pub air_hidden: Vec<usize>,
    pub block_hidden: Vec<usize>,
    pub background_hidden: Vec<usize>,
    pub background_frequencies: usize,
    /// Density at which air and solid are equally likely.
    pub air_threshold: f64,
    /// Exponent cap applied in the backward pass of the density activation.
    pub exp_cap: f64,
    /// Target initial density; the air head's output bias starts at its log.
    pub initial_density: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            num_blocks: 15,
            encoding: EncodingConfig::default(),
            air_hidden: vec![128; 4],
            block_hidden: vec![128; 4],
            background_hidden: vec![64; 2],
            background_frequencies: 2,
            air_threshold: 10.0,
            exp_cap: 15.0,
            initial_density: 10.0,
        }
    }
}

impl FieldConfig {
    /// A small network for fast, desk-scale runs.
    pub fn small(num_blocks: usize) -> Self {
        Self {
            num_blocks,
            air_hidden: vec![64; 2],
            block_hidden: vec![64; 2],
            background_hidden: vec![16],
            ..Self::default()
        }
    }

    fn background_encoding(&self) -> EncodingConfig {
        EncodingConfig {
            num_frequencies: self.background_frequencies,
            include_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform fan-in init, `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut sample = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        Self {
            weight: Tensor::new(vec![inputs, outputs], sample(inputs * outputs)).unwrap().with_grad(),
            bias: Tensor::new(vec![outputs], sample(outputs)).unwrap().with_grad(),
        }
    }
}

/// ReLU MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut impl Rng) -> Self {
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        Self {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.numel())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().map(|t| g.leaf(t)).collect()
    }

    /// `vars` come from [`Mlp::bind`] on the same graph.
    pub fn forward(g: &mut Graph, x: Var, vars: &[Var]) -> Result<Var, AutodiffError> {
        let mut h = x;
        let layers = vars.len() / 2;
        for (i, pair) in vars.chunks(2).enumerate() {
            let z = g.matmul(h, pair[0])?;
            h = g.add(z, pair[1])?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Parameters of the air (θ_A), block (θ_B) and background (θ_bg) heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub air: Mlp,
    pub block: Mlp,
    pub background: Mlp,
}

/// The parameter leaves of one forward pass.
#[derive(Debug, Clone)]
pub struct BoundField {
    pub air: Vec<Var>,
    pub block: Vec<Var>,
    pub background: Vec<Var>,
}

impl BoundField {
    /// Leaves in the same order as [`FieldParams::tensors`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.air.iter().chain(&self.block).chain(&self.background).copied()
    }
}

impl FieldParams {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Self {
        let inputs = config.encoding.output_len();
        let mut air = Mlp::new(inputs, &config.air_hidden, 1, rng);
        if let Some(last) = air.layers.last_mut() {
            // Start every cell near the air/solid boundary.
            last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
            last.bias.data_mut()[0] = config.initial_density.ln();
        }
        let block = Mlp::new(inputs, &config.block_hidden, config.num_blocks, rng);
        let background = Mlp::new(config.background_encoding().output_len(), &config.background_hidden, 3, rng);
        Self {
            config,
            air,
            block,
            background,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.air.tensors().chain(self.block.tensors()).chain(self.background.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.air
            .tensors_mut()
            .chain(self.block.tensors_mut())
            .chain(self.background.tensors_mut())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundField {
        BoundField {
            air: self.air.bind(g),
            block: self.block.bind(g),
            background: self.background.bind(g),
        }
    }

    /// Copies the accumulated leaf gradients of `bound` into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundField) {
        let vars: Vec<Var> = bound.vars().collect();
        for (t, v) in self.tensors_mut().into_iter().zip(vars) {
            g.accumulate_into(v, t);
        }
    }

    /// Flat copy of every parameter value.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Background color for a unit view direction.
    pub fn background_color(&self, dir: [f64; 3]) -> [f64; 3] {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let dirs = g.constant(vec![1, 3], dir.to_vec()).unwrap();
        let out = background_colors(&mut g, self, &bound, dirs).unwrap();
        let v = g.value(out);
        [v[0], v[1], v[2]]
    }
}

/// Encoded cell-center coordinates `[N³, F]` of a width-`n` grid.
pub fn grid_features(n: usize, cfg: &EncodingConfig) -> Tensor {
    let mut data = Vec::with_capacity(n * n * n * cfg.output_len());
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                data.extend(positional_encode([cell_center(x, n), cell_center(y, n), cell_center(z, n)], cfg));
            }
        }
    }
    Tensor::new(vec![n * n * n, cfg.output_len()], data).unwrap()
}

/// Raw block logits `[R, M]` for encoded points `[R, F]`.
pub fn eval_block_logits(g: &mut Graph, bound: &BoundField, features: Var) -> Result<Var, AutodiffError> {
    Mlp::forward(g, features, &bound.block)
}

/// Soft density `σ = exp(MLP(x))` `[R, 1]`, clamped in the backward pass.
pub fn eval_air_density(g: &mut Graph, params: &FieldParams, bound: &BoundField, features: Var) -> Result<Var, AutodiffError> {
    let y = Mlp::forward(g, features, &bound.air)?;
    Ok(g.exp_clamped(y, params.config.exp_cap))
}

/// Background RGB `[R, 3]` in `[0, 1]` for unit directions `[R, 3]`.
pub fn background_colors(g: &mut Graph, params: &FieldParams, bound: &BoundField, dirs: Var) -> Result<Var, AutodiffError> {
    let cfg = params.config.background_encoding();
    let d = g.value(dirs).to_vec();
    let rows = d.len() / 3;
    let mut feats = Vec::with_capacity(rows * cfg.output_len());
    for r in 0..rows {
        feats.extend(positional_encode([d[3 * r], d[3 * r + 1], d[3 * r + 2]], &cfg));
    }
    let x = g.constant(vec![rows, cfg.output_len()], feats)?;
    let y = Mlp::forward(g, x, &bound.background)?;
    Ok(g.sigmoid(y))
}

/// Standard Gumbel(0, 1) samples.
pub fn sample_gumbel(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("valid gumbel parameters");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn one_hot_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (r, row) in values.chunks(width).enumerate() {
        out[r * width + argmax(row)] = 1.0;
    }
    out
}

/// Gumbel-softmax over the last axis of `logits: [R, K]` with the given
/// noise (`R * K` samples). The hard variant forwards the one-hot argmax of
/// the sample and backpropagates through the soft sample.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, tau: f64, hard: bool, noise: &[f64]) -> Result<Var, AutodiffError> {
    let shape = g.shape(logits).to_vec();
    let n = g.constant(shape.clone(), noise.to_vec())?;
    let perturbed = g.add(logits, n)?;
    let scaled = g.scale(perturbed, 1.0 / tau);
    let axis = shape.len() - 1;
    let soft = g.softmax(scaled, axis)?;
    if !hard {
        return Ok(soft);
    }
    let hot = one_hot_rows(g.value(soft), shape[axis]);
    g.straight_through(soft, hot)
}

/// Two-way logits `[R, 2] = (p_air, p_solid)` from densities `[R, 1]`.
fn air_solid_logits(g: &mut Graph, sigma: Var, threshold: f64) -> Result<Var, AutodiffError> {
    let shifted = g.add_scalar(sigma, -threshold);
    let air = g.neg(shifted);
    g.concat(&[air, shifted], 1)
}

/// Noise-free solid probability `[R, 1]` of the air/solid logit pair.
pub fn air_probability(g: &mut Graph, sigma: Var, threshold: f64) -> Result<Var, AutodiffError> {
    let logits = air_solid_logits(g, sigma, threshold)?;
    let p = g.softmax(logits, 1)?;
    g.slice(p, 1, 1, 1)
}

/// Hard air value `[R, 1]` in `{0, 1}`: the solid component of a hard
/// two-way gumbel-softmax sample. `noise` holds `2R` samples.
pub fn quantize_air(g: &mut Graph, sigma: Var, tau: f64, threshold: f64, noise: &[f64]) -> Result<Var, AutodiffError> {
    let logits = air_solid_logits(g, sigma, threshold)?;
    let hard = gumbel_softmax(g, logits, tau, true, noise)?;
    g.slice(hard, 1, 1, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Soft,
    Hard,
    Anneal,
}

impl QuantMode {
    pub const ALL: [QuantMode; 3] = [QuantMode::Anneal, QuantMode::Hard, QuantMode::Soft];

    /// Interpolation coefficient at `step` of a `total`-step run.
    pub fn coefficient(self, step: usize, total: usize) -> f64 {
        match self {
            QuantMode::Soft => 0.0,
            QuantMode::Hard => 1.0,
            QuantMode::Anneal if total <= 1 => 1.0,
            QuantMode::Anneal => (step as f64 / (total - 1) as f64).clamp(0.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Soft => "soft",
            QuantMode::Hard => "hard",
            QuantMode::Anneal => "anneal",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "anneal" => Ok(Self::Anneal),
            other => Err(format!("unknown quantization mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizationSchedule {
    pub block_mode: QuantMode,
    pub air_mode: QuantMode,
    pub gumbel_temperature: f64,
}

impl Default for QuantizationSchedule {
    fn default() -> Self {
        Self {
            block_mode: QuantMode::Hard,
            air_mode: QuantMode::Soft,
            gumbel_temperature: 1.0,
        }
    }
}

impl QuantizationSchedule {
    pub fn new(block_mode: QuantMode, air_mode: QuantMode) -> Self {
        Self {
            block_mode,
            air_mode,
            ..Self::default()
        }
    }

    /// Air hardness α.
    pub fn alpha(&self, step: usize, total: usize) -> f64 {
        self.air_mode.coefficient(step, total)
    }

    /// Block hardness β.
    pub fn beta(&self, step: usize, total: usize) -> f64 {
        self.block_mode.coefficient(step, total)
    }
}

/// Gumbel noise for one grid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridNoise {
    pub air: Vec<f64>,
    pub block: Vec<f64>,
}

impl GridNoise {
    pub fn sample(cells: usize, num_blocks: usize, rng: &mut impl Rng) -> Self {
        Self {
            air: sample_gumbel(cells * 2, rng),
            block: sample_gumbel(cells * num_blocks, rng),
        }
    }

    pub fn zeros(cells: usize, num_blocks: usize) -> Self {
        Self {
            air: vec![0.0; cells * 2],
            block: vec![0.0; cells * num_blocks],
        }
    }
}

/// Raw head outputs at every cell of a grid.
#[derive(Debug, Clone, Copy)]
pub struct CellOutputs {
    pub size: usize,
    /// `[N³, 1]`
    pub sigma: Var,
    /// `[N³, M]`
    pub logits: Var,
}

pub fn evaluate_cells(g: &mut Graph, params: &FieldParams, bound: &BoundField, n: usize) -> Result<CellOutputs, AutodiffError> {
    let feats = grid_features(n, &params.config.encoding);
    let x = g.leaf(&feats);
    Ok(CellOutputs {
        size: n,
        sigma: eval_air_density(g, params, bound, x)?,
        logits: eval_block_logits(g, bound, x)?,
    })
}

/// Soft, hard and interpolated grids of one evaluation; all cell-major.
#[derive(Debug, Clone, Copy)]
pub struct GridSample {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `[N³, 1]` in `[0, 1]`
    pub a_soft: Var,
    /// `[N³, 1]` in `{0, 1}`
    pub a_hard: Var,
    /// `[N³, M]`, rows sum to one
    pub b_soft: Var,
    /// `[N³, M]`, rows one-hot
    pub b_hard: Var,
    pub a: Var,
    pub b: Var,
    /// `[N³, M]`, `C = A ⊙ B`
    pub c: Var,
}

fn interpolate(g: &mut Graph, hard: Var, soft: Var, w: f64) -> Result<Var, AutodiffError> {
    if w == 0.0 {
        return Ok(soft);
    }
    if w == 1.0 {
        return Ok(hard);
    }
    let h = g.scale(hard, w);
    let s = g.scale(soft, 1.0 - w);
    g.add(h, s)
}

/// Builds soft/hard air and block grids from `cells`, interpolates them with
/// α = `alpha`, β = `beta` and composes `C = A ⊙ B`.
pub fn compose_grid(
    g: &mut Graph,
    params: &FieldParams,
    cells: &CellOutputs,
    tau: f64,
    alpha: f64,
    beta: f64,
    noise: &GridNoise,
) -> Result<GridSample, AutodiffError> {
    let thr = params.config.air_threshold;
    let a_soft = air_probability(g, cells.sigma, thr)?;
    let a_hard = quantize_air(g, cells.sigma, tau, thr, &noise.air)?;
    let b_soft = g.softmax(cells.logits, 1)?;
    let b_hard = gumbel_softmax(g, cells.logits, tau, true, &noise.block)?;
    let a = interpolate(g, a_hard, a_soft, alpha)?;
    let b = interpolate(g, b_hard, b_soft, beta)?;
    let c = g.mul(a, b)?;
    Ok(GridSample {
        size: cells.size,
        alpha,
        beta,
        a_soft,
        a_hard,
        b_soft,
        b_hard,
        a,
        b,
        c,
    })
}

/// Evaluates both heads on the `n³` cell centers and composes the grid for
/// `step` of a `total`-step schedule.
#[allow(clippy::too_many_arguments)]
pub fn sample_grid(
    g: &mut Graph,
    params: &FieldParams,
    bound: &BoundField,
    n: usize,
    schedule: &QuantizationSchedule,
    step: usize,
    total: usize,
    noise: &GridNoise,
) -> Result<GridSample, AutodiffError> {
    let cells = evaluate_cells(g, params, bound, n)?;
    compose_grid(
        g,
        params,
        &cells,
        schedule.gumbel_temperature,
        schedule.alpha(step, total),
        schedule.beta(step, total),
        noise,
    )
}

/// Deterministic hard grid `[N³, M]` with straight-through gradients:
/// argmax air/solid and argmax block type forward, noise-free soft
/// probabilities backward.
pub fn discretize_st(g: &mut Graph, params: &FieldParams, cells: &CellOutputs) -> Result<(Var, BlockGrid), AutodiffError> {
    let m = params.config.num_blocks;
    let a_soft = air_probability(g, cells.sigma, params.config.air_threshold)?;
    let b_soft = g.softmax(cells.logits, 1)?;
    let grid = grid_from_outputs(cells.size, m, g.value(cells.sigma), g.value(cells.logits), params.config.air_threshold);
    let hard_a: Vec<f64> = (0..grid.num_cells()).map(|i| f64::from(grid.block_at(i).is_some())).collect();
    let hard_b = one_hot_rows(g.value(cells.logits), m);
    let a = g.straight_through(a_soft, hard_a)?;
    let b = g.straight_through(b_soft, hard_b)?;
    Ok((g.mul(a, b)?, grid))
}

fn grid_from_outputs(n: usize, m: usize, sigma: &[f64], logits: &[f64], threshold: f64) -> BlockGrid {
    let mut grid = BlockGrid::air(n, m);
    for cell in 0..grid.num_cells() {
        // argmax over (p_air, p_solid) = (-(σ - t), σ - t); ties go to air.
        if sigma[cell] - threshold > -(sigma[cell] - threshold) {
            grid.set_cell(cell, Some(argmax(&logits[cell * m..(cell + 1) * m])));
        }
    }
    grid
}

/// Deterministic export grid (argmax for air and block type, no noise).
pub fn discretize(params: &FieldParams, n: usize) -> BlockGrid {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let cells = evaluate_cells(&mut g, params, &bound, n).expect("field shapes are consistent");
    grid_from_outputs(
        n,
        params.config.num_blocks,
        g.value(cells.sigma),
        g.value(cells.logits),
        params.config.air_threshold,
    )
}

/// Export grid drawn with gumbel noise (`α = β = 1`).
pub fn discretize_stochastic(params: &FieldParams, n: usize, tau: f64, rng: &mut impl Rng) -> BlockGrid {
    let m = params.config.num_blocks;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let cells = evaluate_cells(&mut g, params, &bound, n).expect("field shapes are consistent");
    let noise = GridNoise::sample(n * n * n, m, rng);
    let grid = compose_grid(&mut g, params, &cells, tau, 1.0, 1.0, &noise).expect("field shapes are consistent");
    BlockGrid::from_occupancy(n, m, g.value(grid.c))
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a field checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint tensors do not match the configured architecture")]
    Layout,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BLKFIELD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    field: FieldConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Layout: magic `BLKFIELD`, u32 version, u32 header length, UTF-8 JSON
/// header `{field, extra}`, u32 tensor count, then per tensor a u32 rank,
/// u32 dims and little-endian f64 values. All integers little-endian.
pub fn write_checkpoint(mut w: impl Write, params: &FieldParams, extra: &serde_json::Value) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        field: params.config.clone(),
        extra: extra.clone(),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(FieldParams, serde_json::Value), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    // Architecture comes from the config; values are overwritten below.
    let mut params = FieldParams::new(header.field, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let count = read_u32(&mut r)? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(CheckpointError::Layout);
    }
    for t in tensors.iter_mut() {
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != t.shape() {
            return Err(CheckpointError::Layout);
        }
        for v in t.data_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    drop(tensors);
    Ok((params, header.extra))
}

pub fn save_checkpoint(path: &Path, params: &FieldParams, extra: &serde_json::Value) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, params, extra)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FieldParams, serde_json::Value), CheckpointError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(m: usize) -> FieldParams {
        let cfg = FieldConfig {
            num_blocks: m,
            encoding: EncodingConfig {
                num_frequencies: 2,
                include_input: true,
            },
            air_hidden: vec![8],
            block_hidden: vec![8],
            background_hidden: vec![4],
            ..FieldConfig::default()
        };
        FieldParams::new(cfg, &mut rng(1))
    }

    #[test]
    fn encoding_at_origin() {
        let cfg = EncodingConfig {
            num_frequencies: 3,
            include_input: true,
        };
        let f = positional_encode([0.0; 3], &cfg);
        assert_eq!(f.len(), cfg.output_len());
        assert_eq!(f.len(), 3 * (1 + 6));
        assert_eq!(&f[..3], &[0.0; 3]);
        for k in 0..3 {
            let base = 3 + 6 * k;
            assert_eq!(&f[base..base + 3], &[0.0; 3]);
            assert_eq!(&f[base + 3..base + 6], &[1.0; 3]);
        }
        let bare = EncodingConfig {
            num_frequencies: 4,
            include_input: false,
        };
        assert_eq!(positional_encode([0.3, 0.1, 0.7], &bare).len(), 24);
    }

    #[test]
    fn higher_frequencies_separate_nearby_points_more() {
        let cfg = EncodingConfig {
            num_frequencies: 6,
            include_input: false,
        };
        let (p, q) = ([0.2, 0.4, 0.6], [0.2005, 0.4, 0.6]);
        let (fp, fq) = (positional_encode(p, &cfg), positional_encode(q, &cfg));
        let per_freq: Vec<f64> = (0..6)
            .map(|k| (0..6).map(|j| (fp[6 * k + j] - fq[6 * k + j]).abs()).sum())
            .collect();
        assert!(per_freq.windows(2).all(|w| w[1] > w[0]), "{per_freq:?}");
    }

    #[test]
    fn gumbel_outputs_are_distributions() {
        let mut r = rng(5);
        let mut g = Graph::new();
        let logits = g.constant(vec![4, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0, 5.0, 1.0, 1.0, -3.0, 2.0, 2.0]).unwrap();
        let noise = sample_gumbel(12, &mut r);
        let soft = gumbel_softmax(&mut g, logits, 0.7, false, &noise).unwrap();
        let hard = gumbel_softmax(&mut g, logits, 0.7, true, &noise).unwrap();
        for row in g.value(soft).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in g.value(hard).chunks(3) {
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn dominant_logit_always_wins() {
        let mut r = rng(6);
        for tau in [0.1, 0.5, 1.0] {
            for _ in 0..200 {
                let mut g = Graph::new();
                let logits = g.constant(vec![1, 3], vec![1e6, 0.0, 0.0]).unwrap();
                let noise = sample_gumbel(3, &mut r);
                let h = gumbel_softmax(&mut g, logits, tau, true, &noise).unwrap();
                assert_eq!(g.value(h), &[1.0, 0.0, 0.0]);
            }
        }
    }

    /// Straight-through: hard mode has the same Jacobian as soft mode under
    /// identical noise.
    #[test]
    fn straight_through_matches_soft_gradient() {
        let mut r = rng(7);
        let noise = sample_gumbel(6, &mut r);
        let weights = [0.3, -1.0, 2.0, 0.5, 0.25, -0.75];
        let grad = |hard: bool| {
            let mut g = Graph::new();
            let t = Tensor::new(vec![2, 3], vec![0.2, -0.4, 1.1, 0.0, 0.9, -0.3]).unwrap().with_grad();
            let l = g.leaf(&t);
            let y = gumbel_softmax(&mut g, l, 0.8, hard, &noise).unwrap();
            let w = g.constant(vec![2, 3], weights.to_vec()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            g.backward(s).unwrap();
            g.grad(l).unwrap().to_vec()
        };
        assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn quantize_air_extremes() {
        let mut r = rng(8);
        let mut g = Graph::new();
        let sigma = g.constant(vec![3, 1], vec![15f64.exp(), 0.0, 10.0]).unwrap();
        let mut solid_at_zero = 0;
        for _ in 0..2000 {
            let noise = sample_gumbel(6, &mut r);
            let h = quantize_air(&mut g, sigma, 1.0, 10.0, &noise).unwrap();
            let v = g.value(h);
            assert_eq!(v[0], 1.0);
            solid_at_zero += v[1] as usize;
        }
        // p_solid - p_air = -20 at σ = 0.
        assert_eq!(solid_at_zero, 0);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let p = tiny(3);
        let n = 2;
        let noise = GridNoise::sample(8, 3, &mut rng(9));
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let cells = evaluate_cells(&mut g, &p, &bound, n).unwrap();

        let soft = compose_grid(&mut g, &p, &cells, 1.0, 0.0, 0.0, &noise).unwrap();
        let (a, b) = (g.value(soft.a_soft).to_vec(), g.value(soft.b_soft).to_vec());
        for (i, &c) in g.value(soft.c).iter().enumerate() {
            assert!((c - a[i / 3] * b[i]).abs() < 1e-15);
        }
        for row in b.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let hard = compose_grid(&mut g, &p, &cells, 1.0, 1.0, 1.0, &noise).unwrap();
        for row in g.value(hard.c).chunks(3) {
            let nz = row.iter().filter(|&&v| v != 0.0).count();
            assert!(nz == 0 || (nz == 1 && row.iter().sum::<f64>() == 1.0));
        }

        let mid = compose_grid(&mut g, &p, &cells, 1.0, 0.5, 0.25, &noise).unwrap();
        let (ah, as_) = (g.value(mid.a_hard).to_vec(), g.value(mid.a_soft).to_vec());
        for (i, &v) in g.value(mid.a).iter().enumerate() {
            assert!((v - (0.5 * ah[i] + 0.5 * as_[i])).abs() < 1e-15);
        }
        let (bh, bs) = (g.value(mid.b_hard).to_vec(), g.value(mid.b_soft).to_vec());
        for (i, &v) in g.value(mid.b).iter().enumerate() {
            assert!((v - (0.25 * bh[i] + 0.75 * bs[i])).abs() < 1e-15);
        }
        assert!(g.value(mid.c).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_grid_is_deterministic_for_fixed_noise() {
        let p = tiny(2);
        let sched = QuantizationSchedule::new(QuantMode::Anneal, QuantMode::Anneal);
        let run = || {
            let noise = GridNoise::sample(27, 2, &mut rng(10));
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let s = sample_grid(&mut g, &p, &bound, 3, &sched, 4, 10, &noise).unwrap();
            g.value(s.c).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn anneal_schedule_is_linear() {
        assert_eq!(QuantMode::Anneal.coefficient(0, 11), 0.0);
        assert_eq!(QuantMode::Anneal.coefficient(5, 11), 0.5);
        assert_eq!(QuantMode::Anneal.coefficient(10, 11), 1.0);
        assert_eq!(QuantMode::Soft.coefficient(7, 11), 0.0);
        assert_eq!(QuantMode::Hard.coefficient(0, 11), 1.0);
    }

    #[test]
    fn low_density_discretizes_to_air() {
        let mut p = tiny(3);
        let last = p.air.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias.data_mut()[0] = 9.9f64.ln();
        let grid = discretize(&p, 4);
        assert_eq!(grid.solid_cells(), 0);
        last_bias(&mut p, 10.1f64.ln());
        assert_eq!(discretize(&p, 4).solid_cells(), 64);
    }

    fn last_bias(p: &mut FieldParams, v: f64) {
        p.air.layers.last_mut().unwrap().bias.data_mut()[0] = v;
    }

    #[test]
    fn discretize_st_matches_discretize() {
        let p = tiny(4);
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let cells = evaluate_cells(&mut g, &p, &bound, 3).unwrap();
        let (c, grid) = discretize_st(&mut g, &p, &cells).unwrap();
        assert_eq!(grid, discretize(&p, 3));
        assert_eq!(BlockGrid::from_occupancy(3, 4, g.value(c)), grid);
    }

    #[test]
    fn background_is_rgb_in_unit_range() {
        let p = tiny(2);
        let c = p.background_color([0.0, 0.0, 1.0]);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = FieldParams::new(FieldConfig::small(3), &mut rng(11));
        let extra = serde_json::json!({"palette": ["a", "b", "c"]});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &extra).unwrap();
        let (q, e) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(e, extra);
        assert_eq!(q.config, p.config);
        let (a, b) = (p.flat(), q.flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CheckpointError::BadMagic)));
    }
}
