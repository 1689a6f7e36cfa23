//! Desk-scale fixtures and experiment drivers: reconstruction of a small
//! two-type structure, the quantization-scheme ablation and the resolution
//! sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::ContinuousField;
use crate::constraints::ConstraintSet;
use crate::eval::{block_accuracy, mean_psnr};
use crate::field::{discretize, EncodingConfig, FieldConfig, FieldParams, QuantMode, QuantizationSchedule};
use crate::grid::BlockGrid;
use crate::guidance::ReconstructionGuidance;
use crate::palette::{BlockPalette, BlockType, Rgb, Texture};
use crate::render::{render_images, trace_field, Atlas, Background, Camera, Image, RenderSettings};
use crate::train::{train, StepRecord, TrainConfig, TrainError};

pub const FIXTURE_BACKGROUND: Rgb = [0.62, 0.76, 0.92];

/// Stone and gold, the two block types of the reconstruction fixture.
pub fn structure_palette() -> BlockPalette {
    BlockPalette::builtin_subset(&["stone", "gold_block"]).expect("builtin blocks")
}

/// A 4³ structure of stone (0) and gold (1): a checkered floor, a 2×2
/// platform, one block on top of it and a corner pillar.
pub fn structure_grid() -> BlockGrid {
    BlockGrid::from_fn(4, 2, |x, y, z| match y {
        0 => Some((x + z) % 2),
        1 if (1..=2).contains(&x) && (1..=2).contains(&z) => Some((x + z + 1) % 2),
        2 if x == 1 && z == 1 => Some(0),
        _ if x == 3 && z == 3 => Some(1),
        _ => None,
    })
}

/// Eight training views around the structure.
pub fn train_cameras(size: usize) -> Vec<Camera> {
    (0..8)
        .map(|i| Camera::orbit(45.0 * i as f64, if i % 2 == 0 { 35.0 } else { -10.0 }, size, size))
        .collect()
}

/// Held-out views between the training azimuths.
pub fn heldout_cameras(size: usize) -> Vec<Camera> {
    (0..4).map(|i| Camera::orbit(22.5 + 90.0 * i as f64, 20.0, size, size)).collect()
}

/// Reference RGB and depth images of a fitting target.
#[derive(Debug, Clone)]
pub struct TargetViews {
    pub cameras: Vec<Camera>,
    pub rgb: Vec<Image>,
    pub depth: Vec<Image>,
}

impl TargetViews {
    pub fn of_grid(grid: &BlockGrid, palette: &BlockPalette, cameras: Vec<Camera>, settings: &RenderSettings) -> Self {
        let atlas = Atlas::new(palette);
        let c = grid.one_hot();
        let (rgb, depth) = cameras
            .iter()
            .map(|cam| render_images(cam, c.data(), grid.size(), &atlas, Background::Constant(FIXTURE_BACKGROUND), settings).expect("fixture cameras are valid"))
            .unzip();
        Self { cameras, rgb, depth }
    }

    /// Views of an analytic field with extinction per world unit.
    pub fn of_field(field: &dyn ContinuousField, cameras: Vec<Camera>, settings: &RenderSettings) -> Self {
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        for cam in &cameras {
            let mut px = Vec::new();
            let mut dp = Vec::new();
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let out = trace_field(cam.position, cam.ray_dir(x, y), FIXTURE_BACKGROUND, settings, |p| {
                        field.query([p[0] + 0.5, p[1] + 0.5, p[2] + 0.5])
                    });
                    px.extend(out.rgb);
                    dp.push(out.depth);
                }
            }
            rgb.push(Image::from_rgb(cam.width, cam.height, px).expect("sized"));
            depth.push(Image::from_gray(cam.width, cam.height, dp).expect("sized"));
        }
        Self { cameras, rgb, depth }
    }

    pub fn guidance(&self) -> ReconstructionGuidance {
        ReconstructionGuidance::new(self.cameras.iter().copied().zip(self.rgb.iter().cloned()).collect()).expect("matching sizes")
    }
}

/// One fitting run against fixed target views.
#[derive(Debug, Clone)]
pub struct FitSetup {
    pub palette: BlockPalette,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub grid_size: usize,
    pub block_mode: QuantMode,
    pub air_mode: QuantMode,
    pub psnr_rgb: f64,
    pub psnr_depth: f64,
    /// Against the reference grid, when there is one.
    pub block_accuracy: Option<f64>,
    pub final_loss: f64,
    pub seconds: f64,
    #[serde(skip)]
    pub grid: BlockGrid,
    #[serde(skip)]
    pub params: Option<FieldParams>,
    #[serde(skip)]
    pub log: Vec<StepRecord>,
}

/// Small default network sized for the fixtures.
pub fn fixture_field(num_blocks: usize) -> FieldConfig {
    FieldConfig {
        num_blocks,
        encoding: EncodingConfig {
            num_frequencies: 4,
            include_input: true,
        },
        air_hidden: vec![64, 64],
        block_hidden: vec![64, 64],
        background_hidden: vec![16],
        ..FieldConfig::default()
    }
}

pub fn fit(setup: &FitSetup, train_views: &TargetViews, heldout: &TargetViews, reference: Option<&BlockGrid>) -> Result<FitResult, TrainError> {
    let start = Instant::now();
    let mut params = FieldParams::new(setup.field.clone(), &mut ChaCha8Rng::seed_from_u64(setup.seed));
    let atlas = Atlas::new(&setup.palette);
    let mut guidance = train_views.guidance();
    let log = train(&mut params, &mut guidance, &ConstraintSet::default(), &atlas, &setup.train, &mut |_, _| Ok(()))?;
    let n = setup.train.grid_size;
    let grid = discretize(&params, n);
    let (psnr_rgb, psnr_depth) = evaluate_grid(&grid, &setup.palette, &params, heldout, &setup.train.render);
    Ok(FitResult {
        grid_size: n,
        block_mode: setup.train.quantization.block_mode,
        air_mode: setup.train.quantization.air_mode,
        psnr_rgb,
        psnr_depth,
        block_accuracy: reference.map(|r| block_accuracy(r, &grid).expect("same size")),
        final_loss: log.last().map_or(f64::NAN, |r| r.total),
        seconds: start.elapsed().as_secs_f64(),
        grid,
        params: Some(params),
        log,
    })
}

/// Held-out RGB and depth PSNR of a discrete grid rendered with the field's
/// background.
pub fn evaluate_grid(grid: &BlockGrid, palette: &BlockPalette, params: &FieldParams, heldout: &TargetViews, settings: &RenderSettings) -> (f64, f64) {
    let atlas = Atlas::new(palette);
    let c = grid.one_hot();
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    for (i, cam) in heldout.cameras.iter().enumerate() {
        let (r, d) = render_images(cam, c.data(), grid.size(), &atlas, Background::Field(params), settings).expect("valid cameras");
        rgb.push((r, heldout.rgb[i].clone()));
        depth.push((d, heldout.depth[i].clone()));
    }
    (mean_psnr(&rgb).expect("sizes match"), mean_psnr(&depth).expect("sizes match"))
}

/// Settings of the structure reconstruction experiment.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionOptions {
    pub steps: usize,
    pub image_size: usize,
    pub views_per_step: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            image_size: 32,
            views_per_step: 2,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

pub struct ReconstructionFixture {
    pub palette: BlockPalette,
    pub grid: BlockGrid,
    pub train_views: TargetViews,
    pub heldout: TargetViews,
    pub settings: RenderSettings,
}

impl ReconstructionFixture {
    pub fn new(image_size: usize) -> Self {
        let palette = structure_palette();
        let grid = structure_grid();
        let settings = RenderSettings::for_grid(grid.size());
        let train_views = TargetViews::of_grid(&grid, &palette, train_cameras(image_size), &settings);
        let heldout = TargetViews::of_grid(&grid, &palette, heldout_cameras(image_size), &settings);
        Self {
            palette,
            grid,
            train_views,
            heldout,
            settings,
        }
    }

    pub fn setup(&self, opts: &ReconstructionOptions, schedule: QuantizationSchedule) -> FitSetup {
        FitSetup {
            palette: self.palette.clone(),
            field: fixture_field(self.palette.len()),
            train: TrainConfig {
                steps: opts.steps,
                grid_size: self.grid.size(),
                learning_rate: opts.learning_rate,
                views_per_step: opts.views_per_step,
                image_size: opts.image_size,
                quantization: schedule,
                render: self.settings,
                seed: opts.seed,
                ..TrainConfig::default()
            },
            seed: opts.seed,
        }
    }

    pub fn run(&self, opts: &ReconstructionOptions, schedule: QuantizationSchedule) -> Result<FitResult, TrainError> {
        fit(&self.setup(opts, schedule), &self.train_views, &self.heldout, Some(&self.grid))
    }
}

/// The 3×3 block-mode × air-mode matrix on the reconstruction fixture.
pub fn ablation_sweep(fixture: &ReconstructionFixture, opts: &ReconstructionOptions) -> Result<Vec<FitResult>, TrainError> {
    let mut rows = Vec::new();
    for block in QuantMode::ALL {
        for air in QuantMode::ALL {
            rows.push(fixture.run(opts, QuantizationSchedule::new(block, air))?);
        }
    }
    Ok(rows)
}

/// Two flat-colored block types for the resolution sweep.
pub fn flat_palette() -> BlockPalette {
    let block = |name: &str, rgb: Rgb| BlockType {
        id: 0,
        name: name.into(),
        game_id: format!("minecraft:{name}"),
        faces: std::array::from_fn(|_| Texture::uniform(rgb)),
    };
    BlockPalette::new(vec![block("red_concrete", [0.75, 0.2, 0.15]), block("yellow_concrete", [0.95, 0.8, 0.2])]).expect("valid palette")
}

/// An opaque sphere, yellow above its equator and red below.
#[derive(Debug, Clone, Copy)]
pub struct TwoToneSphere {
    pub center: [f64; 3],
    pub radius: f64,
    /// Extinction per world unit inside the sphere.
    pub density: f64,
}

impl Default for TwoToneSphere {
    fn default() -> Self {
        Self {
            center: [0.5; 3],
            radius: 0.36,
            density: 400.0,
        }
    }
}

impl ContinuousField for TwoToneSphere {
    fn query(&self, p: [f64; 3]) -> (Rgb, f64) {
        let d2: f64 = (0..3).map(|k| (p[k] - self.center[k]).powi(2)).sum();
        if d2 > self.radius * self.radius {
            return ([0.0; 3], 0.0);
        }
        let color = if p[1] >= self.center[1] { [0.95, 0.8, 0.2] } else { [0.75, 0.2, 0.15] };
        (color, self.density)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub steps: usize,
    pub quantization: QuantizationSchedule,
    pub image_size: usize,
    pub views_per_step: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            steps: 400,
            // Soft air at fine resolutions learns stacks of sub-threshold
            // cells that discretize to nothing; annealing ends hard.
            quantization: QuantizationSchedule::new(QuantMode::Hard, QuantMode::Anneal),
            image_size: 48,
            views_per_step: 2,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

/// Fits the sphere at each grid size.
pub fn resolution_sweep(sizes: &[usize], opts: &SweepOptions) -> Result<Vec<FitResult>, TrainError> {
    let palette = flat_palette();
    let field = TwoToneSphere::default();
    let target_settings = RenderSettings::default();
    let train_views = TargetViews::of_field(&field, train_cameras(opts.image_size), &target_settings);
    let heldout = TargetViews::of_field(&field, heldout_cameras(opts.image_size), &target_settings);
    sizes
        .iter()
        .map(|&n| {
            let setup = FitSetup {
                palette: palette.clone(),
                field: fixture_field(palette.len()),
                train: TrainConfig {
                    steps: opts.steps,
                    grid_size: n,
                    learning_rate: opts.learning_rate,
                    views_per_step: opts.views_per_step,
                    image_size: opts.image_size,
                    quantization: opts.quantization,
                    render: RenderSettings::for_grid(n),
                    seed: opts.seed,
                    ..TrainConfig::default()
                },
                seed: opts.seed,
            };
            fit(&setup, &train_views, &heldout, None)
        })
        .collect()
}

/// Palette of the constraint-only runs.
pub fn constraint_palette() -> BlockPalette {
    BlockPalette::builtin_subset(&["stone", "sand", "gold_block"]).expect("builtin blocks")
}

/// Output of an optimization driven by constraints alone.
#[derive(Debug, Clone)]
pub struct ConstraintRun {
    pub grid: BlockGrid,
    pub log: Vec<StepRecord>,
    pub seconds: f64,
}

/// Optimizes a fresh fixture-sized field against `constraints` with zero
/// guidance weight and returns the deterministic discrete grid.
pub fn constraint_run(
    palette: &BlockPalette,
    constraints: &ConstraintSet,
    grid_size: usize,
    steps: usize,
    lambda_distribution: f64,
    lambda_adjacency: f64,
    seed: u64,
) -> Result<ConstraintRun, TrainError> {
    let start = Instant::now();
    let mut params = FieldParams::new(fixture_field(palette.len()), &mut ChaCha8Rng::seed_from_u64(seed));
    let config = TrainConfig {
        steps,
        grid_size,
        guidance_weight: 0.0,
        lambda_distribution,
        lambda_adjacency,
        seed,
        ..TrainConfig::default()
    };
    let log = train(&mut params, &mut crate::guidance::ZeroGuidance, constraints, &Atlas::new(palette), &config, &mut |_, _| Ok(()))?;
    Ok(ConstraintRun {
        grid: discretize(&params, grid_size),
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}
