//! Joint optimization of guidance and constraint losses.
//!
//! Each step renders a few views of the interpolated grid `C`, asks the
//! guidance provider for pixel gradients, evaluates `L_D` and `L_P` on the
//! deterministic discretized grid with straight-through gradients and takes
//! one Adam step on
//! `guidance_weight · guidance + λ_D · L_D + λ_P · L_P`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::constraints::{adjacency_loss, distribution_loss, ConstraintError, ConstraintSet};
use crate::field::{compose_grid, BoundField, discretize_st, evaluate_cells, FieldParams, GridNoise, QuantizationSchedule};
use crate::guidance::{GuidanceError, GuidanceProvider, GuidanceView};
use crate::render::{render_view, Atlas, Camera, Image, RenderError, RenderSettings, ViewPlan};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at step {step}: guidance {guidance}, distribution {distribution}, adjacency {adjacency}")]
    NonFinite {
        step: usize,
        guidance: f64,
        distribution: f64,
        adjacency: f64,
        /// Parameters before the failing step.
        snapshot: Box<FieldParams>,
    },
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub grid_size: usize,
    pub learning_rate: f64,
    /// Cosine decay ends at `learning_rate · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub views_per_step: usize,
    /// Size of randomly sampled views when the provider has no cameras.
    pub image_size: usize,
    pub quantization: QuantizationSchedule,
    pub guidance_weight: f64,
    pub lambda_distribution: f64,
    pub lambda_adjacency: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub render: RenderSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            grid_size: 16,
            learning_rate: 5e-3,
            final_lr_fraction: 0.05,
            views_per_step: 2,
            image_size: 64,
            quantization: QuantizationSchedule::default(),
            guidance_weight: 1.0,
            lambda_distribution: 0.0,
            lambda_adjacency: 0.0,
            elevation_min: -10.0,
            elevation_max: 45.0,
            render: RenderSettings::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.grid_size == 0 {
            return bad("grid_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("learning rate {} / final fraction {}", self.learning_rate, self.final_lr_fraction));
        }
        for (name, v) in [
            ("guidance_weight", self.guidance_weight),
            ("lambda_distribution", self.lambda_distribution),
            ("lambda_adjacency", self.lambda_adjacency),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        if self.views_per_step == 0 && self.guidance_weight > 0.0 {
            return bad("views_per_step must be at least 1".into());
        }
        if !(self.quantization.gumbel_temperature > 0.0) {
            return bad(format!("gumbel temperature {}", self.quantization.gumbel_temperature));
        }
        if self.elevation_min > self.elevation_max {
            return bad("elevation_min > elevation_max".into());
        }
        self.render.validate()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        cosine_lr(self.learning_rate, self.final_lr_fraction, step, self.steps)
    }
}

/// Cosine decay from `base` to `base · final_fraction` over `total` steps.
pub fn cosine_lr(base: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    let p = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    let floor = base * final_fraction;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Updates `values` in place with gradient `grad`.
    pub fn step(&mut self, values: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            values[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// One metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub guidance: f64,
    pub distribution: f64,
    pub adjacency: f64,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub solid_cells: usize,
    pub wall_ms: f64,
}

/// Newline-delimited JSON metrics.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Loss values of one step and the graph that produced them.
pub struct StepLosses {
    pub graph: Graph,
    pub bound: BoundField,
    pub objective: Var,
    pub record: StepRecord,
}

/// Training state: optimizer moments, view plans and the run's RNG seed.
pub struct Trainer {
    config: TrainConfig,
    atlas: Atlas,
    adam: Adam,
    plans: HashMap<usize, Arc<ViewPlan>>,
    cameras: Option<Vec<Camera>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, atlas: Atlas, params: &FieldParams, guidance: &dyn GuidanceProvider) -> Result<Self, TrainError> {
        config.validate()?;
        if params.config.num_blocks != atlas.num_blocks() {
            return Err(TrainError::Config(format!(
                "field has {} block types but the palette has {}",
                params.config.num_blocks,
                atlas.num_blocks()
            )));
        }
        if config.guidance_weight > 0.0 && !guidance.capabilities().provides_gradient {
            return Err(TrainError::Config("guidance provider is score-only and cannot drive training".into()));
        }
        let cameras = guidance.cameras();
        if matches!(&cameras, Some(c) if c.is_empty()) {
            return Err(TrainError::Config("guidance provider has an empty camera list".into()));
        }
        Ok(Self {
            config,
            atlas,
            adam: Adam::new(params.num_parameters()),
            plans: HashMap::new(),
            cameras,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// RNG for `step`; independent of earlier steps so a run resumes exactly.
    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        rng
    }

    fn sample_views(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<(Option<usize>, Arc<ViewPlan>)>, TrainError> {
        let k = self.config.views_per_step;
        let n = self.config.grid_size;
        match &self.cameras {
            Some(cams) => {
                let picks = rand::seq::index::sample(rng, cams.len(), k.min(cams.len())).into_vec();
                let mut out = Vec::with_capacity(picks.len());
                for i in picks {
                    let plan = match self.plans.get(&i) {
                        Some(p) => Arc::clone(p),
                        None => {
                            let p = Arc::new(ViewPlan::new(&cams[i], &self.config.render, n)?);
                            self.plans.insert(i, Arc::clone(&p));
                            p
                        }
                    };
                    out.push((Some(i), plan));
                }
                Ok(out)
            }
            None => (0..k)
                .map(|_| {
                    let az = rng.random_range(0.0..360.0);
                    let el = rng.random_range(self.config.elevation_min..=self.config.elevation_max);
                    let cam = Camera::orbit(az, el, self.config.image_size, self.config.image_size);
                    Ok((None, Arc::new(ViewPlan::new(&cam, &self.config.render, n)?)))
                })
                .collect(),
        }
    }

    /// Builds the step-`step` objective without updating parameters.
    pub fn losses(&mut self, params: &FieldParams, guidance: &mut dyn GuidanceProvider, constraints: &ConstraintSet, step: usize) -> Result<StepLosses, TrainError> {
        let start = Instant::now();
        let cfg = self.config;
        let n = cfg.grid_size;
        let m = params.config.num_blocks;
        let mut rng = self.step_rng(step);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let cells = evaluate_cells(&mut g, params, &bound, n)?;
        let alpha = cfg.quantization.alpha(step, cfg.steps);
        let beta = cfg.quantization.beta(step, cfg.steps);
        let mut objective = g.scalar(0.0);

        let mut guidance_loss = 0.0;
        if cfg.guidance_weight > 0.0 {
            let noise = GridNoise::sample(n * n * n, m, &mut rng);
            let grid = compose_grid(&mut g, params, &cells, cfg.quantization.gumbel_temperature, alpha, beta, &noise)?;
            let views = self.sample_views(&mut rng)?;
            let mut renders = Vec::with_capacity(views.len());
            let mut images = Vec::with_capacity(views.len());
            for (_, plan) in &views {
                let r = render_view(&mut g, plan, &self.atlas, grid.c, params, &bound)?;
                let cam = plan.camera();
                images.push(Image::from_rgb(cam.width, cam.height, g.value(r).to_vec())?);
                renders.push(r);
            }
            let gviews: Vec<GuidanceView<'_>> = views
                .iter()
                .zip(&images)
                .map(|((idx, plan), image)| GuidanceView {
                    index: *idx,
                    camera: plan.camera(),
                    image,
                })
                .collect();
            let out = guidance.evaluate(&gviews, step)?;
            if out.gradients.len() != renders.len() {
                return Err(GuidanceError::Protocol(format!("{} gradients for {} views", out.gradients.len(), renders.len())).into());
            }
            guidance_loss = out.loss;
            // Surrogate Σ render ⊙ ∂loss/∂pixel carries the provider's gradient.
            for (r, grad) in renders.into_iter().zip(out.gradients) {
                let shape = g.shape(r).to_vec();
                let w = g.constant(shape, grad)?;
                let p = g.mul(r, w)?;
                let s = g.sum(p);
                let s = g.scale(s, cfg.guidance_weight);
                objective = g.add(objective, s)?;
            }
        }

        let (mut dist, mut adj) = (0.0, 0.0);
        let need_dist = cfg.lambda_distribution > 0.0 && !constraints.distribution.is_empty();
        let need_adj = cfg.lambda_adjacency > 0.0 && !constraints.patterns.is_empty();
        let solid_cells;
        if need_dist || need_adj {
            let (c_hard, grid) = discretize_st(&mut g, params, &cells)?;
            solid_cells = grid.solid_cells();
            if need_dist {
                let l = distribution_loss(&mut g, c_hard, &constraints.distribution)?;
                dist = g.item(l);
                let l = g.scale(l, cfg.lambda_distribution);
                objective = g.add(objective, l)?;
            }
            if need_adj {
                let l = adjacency_loss(&mut g, c_hard, n, &constraints.patterns)?;
                adj = g.item(l);
                let l = g.scale(l, cfg.lambda_adjacency);
                objective = g.add(objective, l)?;
            }
        } else {
            let (sigma, thr) = (g.value(cells.sigma), params.config.air_threshold);
            solid_cells = sigma.iter().filter(|&&s| s > thr).count();
        }

        let total = cfg.guidance_weight * guidance_loss + cfg.lambda_distribution * dist + cfg.lambda_adjacency * adj;
        let record = StepRecord {
            step,
            total,
            guidance: guidance_loss,
            distribution: dist,
            adjacency: adj,
            alpha,
            beta,
            learning_rate: cfg.learning_rate_at(step),
            solid_cells,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if !(total.is_finite() && g.item(objective).is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                guidance: guidance_loss,
                distribution: dist,
                adjacency: adj,
                snapshot: Box::new(params.clone()),
            });
        }
        Ok(StepLosses {
            graph: g,
            bound,
            objective,
            record,
        })
    }

    /// Runs step `step` and updates `params`.
    pub fn step(&mut self, params: &mut FieldParams, guidance: &mut dyn GuidanceProvider, constraints: &ConstraintSet, step: usize) -> Result<StepRecord, TrainError> {
        let StepLosses {
            mut graph,
            bound,
            objective,
            record,
        } = self.losses(params, guidance, constraints, step)?;
        graph.backward(objective)?;
        params.zero_grad();
        params.accumulate_grads(&graph, &bound);
        let grad = params.flat_grad();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                guidance: record.guidance,
                distribution: record.distribution,
                adjacency: record.adjacency,
                snapshot: Box::new(params.clone()),
            });
        }
        let mut values = params.flat();
        self.adam.step(&mut values, &grad, record.learning_rate);
        params.set_flat(&values);
        params.zero_grad();
        Ok(record)
    }
}

/// Runs `config.steps` steps. `observer` sees every record with the updated
/// parameters (for metrics and checkpoints).
pub fn train(
    params: &mut FieldParams,
    guidance: &mut dyn GuidanceProvider,
    constraints: &ConstraintSet,
    atlas: &Atlas,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord, &FieldParams) -> Result<(), TrainError>,
) -> Result<Vec<StepRecord>, TrainError> {
    constraints.validate(params.config.num_blocks)?;
    let mut trainer = Trainer::new(*config, atlas.clone(), params, guidance)?;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rec = trainer.step(params, guidance, constraints, step)?;
        observer(&rec, params)?;
        log.push(rec);
    }
    Ok(log)
}
