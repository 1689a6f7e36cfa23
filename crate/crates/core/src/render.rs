//! Differentiable ray marching over a block grid.
//!
//! The scene is the cube `[-0.5, 0.5]³`; grid coordinates are `p + 0.5`.
//! Each of the `N³` cells expands into the `16³` voxels of its block model,
//! and a sample takes the color and density of the single voxel it falls in.
//! Samples are composited front to back with emission-absorption weights and
//! the residual transmittance picks up the background color.
//!
//! Densities are per cell length: a sample of step `δ` in world units has
//! optical depth `σ · δ · N`, so opacity does not depend on grid resolution.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Graph, Var};
use crate::field::{background_colors, BoundField, FieldParams};
use crate::grid::BlockGrid;
use crate::palette::{BlockPalette, Rgb, TEXTURE_SIZE};

pub const ORBIT_RADIUS: f64 = 2.2;
pub const DEFAULT_FOV: f64 = 40.0;
pub const DEFAULT_DENSITY_SCALE: f64 = 40.0;

const SUB: usize = TEXTURE_SIZE;
const SUB3: usize = SUB * SUB * SUB;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid render settings: {0}")]
    Settings(String),
    #[error("image size mismatch: expected {expected} values, got {got}")]
    ImageSize { expected: usize, got: usize },
    #[error("image {path}: {source}")]
    Png {
        path: std::path::PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: Vec3) -> Vec3 {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Pinhole camera. Pixel `(0, 0)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Degrees.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, vertical_fov: f64, width: usize, height: usize) -> Result<Self, RenderError> {
        let cam = Self {
            position,
            look_at,
            up,
            vertical_fov,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(RenderError::Camera(format!("fov {} not in (0, 180)", self.vertical_fov)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera(format!("image size {}x{}", self.width, self.height)));
        }
        let fwd = sub(self.look_at, self.position);
        if dot(fwd, fwd) == 0.0 {
            return Err(RenderError::Camera("position equals look_at".into()));
        }
        let side = cross(fwd, self.up);
        if dot(side, side) < 1e-18 {
            return Err(RenderError::Camera("up is parallel to the view direction".into()));
        }
        Ok(())
    }

    /// Camera on the default orbit looking at the scene center, `y` up.
    /// Azimuth 0 looks from `+z`; positive elevation looks down.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [
            ORBIT_RADIUS * el.cos() * az.sin(),
            ORBIT_RADIUS * el.sin(),
            ORBIT_RADIUS * el.cos() * az.cos(),
        ];
        Self {
            position,
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            vertical_fov: DEFAULT_FOV,
            width,
            height,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Unit direction through the center of pixel `(px, py)`.
    pub fn ray_dir(&self, px: usize, py: usize) -> Vec3 {
        let fwd = normalize(sub(self.look_at, self.position));
        let right = normalize(cross(fwd, self.up));
        let up = cross(right, fwd);
        let t = (self.vertical_fov.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * t * aspect;
        let y = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * t;
        normalize([
            fwd[0] + x * right[0] + y * up[0],
            fwd[1] + x * right[1] + y * up[1],
            fwd[2] + x * right[2] + y * up[2],
        ])
    }
}

/// `frames` cameras evenly spaced in azimuth at a fixed elevation.
pub fn turntable(frames: usize, elevation_deg: f64, width: usize, height: usize) -> Vec<Camera> {
    (0..frames)
        .map(|i| Camera::orbit(360.0 * i as f64 / frames as f64, elevation_deg, width, height))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Extinction per cell length of a fully solid cell.
    pub density_scale: f64,
    /// Replace the learned background with white.
    pub white_background_mix: bool,
}

impl Default for RenderSettings {
    /// Near and far bracket the scene cube from the default orbit.
    fn default() -> Self {
        let half_diag = 0.75f64.sqrt();
        Self {
            samples_per_ray: 192,
            near: ORBIT_RADIUS - half_diag,
            far: ORBIT_RADIUS + half_diag,
            density_scale: DEFAULT_DENSITY_SCALE,
            white_background_mix: false,
        }
    }
}

impl RenderSettings {
    /// Defaults with the sample count scaled for an `n`-wide grid.
    pub fn for_grid(n: usize) -> Self {
        Self {
            samples_per_ray: if n <= 50 { 192 } else { 4 * n },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples_per_ray < 2 {
            return Err(RenderError::Settings(format!("samples_per_ray = {} < 2", self.samples_per_ray)));
        }
        if !(self.near < self.far) {
            return Err(RenderError::Settings(format!("near {} >= far {}", self.near, self.far)));
        }
        if !(self.density_scale >= 0.0) {
            return Err(RenderError::Settings(format!("density_scale = {}", self.density_scale)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }

    /// Ray parameter of sample `i` (midpoint of its stratum).
    pub fn sample_t(&self, i: usize) -> f64 {
        self.near + (i as f64 + 0.5) * self.step()
    }
}

/// Cell and sub-voxel containing grid-space point `q ∈ [0, 1)³`, or `None`
/// outside the grid.
pub fn locate(q: Vec3, n: usize) -> Option<(usize, usize)> {
    let mut cell = [0usize; 3];
    let mut subv = [0usize; 3];
    for d in 0..3 {
        if !(0.0..1.0).contains(&q[d]) {
            return None;
        }
        let s = q[d] * n as f64;
        let c = (s.floor() as usize).min(n - 1);
        cell[d] = c;
        subv[d] = (((s - c as f64) * SUB as f64).floor() as usize).min(SUB - 1);
    }
    Some((
        (cell[0] * n + cell[1]) * n + cell[2],
        (subv[0] * SUB + subv[1]) * SUB + subv[2],
    ))
}

/// Frozen voxel colors of a palette, shared by render ops.
#[derive(Debug, Clone)]
pub struct Atlas {
    num_blocks: usize,
    data: Arc<[f64]>,
}

impl Atlas {
    pub fn new(palette: &BlockPalette) -> Self {
        Self {
            num_blocks: palette.len(),
            data: palette.atlas().data().into(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    #[inline]
    fn texel(&self, m: usize, sub: usize) -> &[f64] {
        let b = (m * SUB3 + sub) * 3;
        &self.data[b..b + 3]
    }
}

/// Color and density of the voxel containing grid-space point `q`, where
/// `c` is a cell-major `[N³, M]` block grid. Density is
/// `density_scale · Σ_m C[m]` and color the `C`-weighted mean texel;
/// points outside the grid are vacuum.
pub fn voxel_lookup(q: Vec3, c: &[f64], n: usize, atlas: &Atlas, density_scale: f64) -> (Rgb, f64) {
    match locate(q, n) {
        None => ([0.0; 3], 0.0),
        Some((cell, sub)) => {
            let (rgb, occ) = cell_sample(c, atlas, cell, sub);
            (rgb, density_scale * occ)
        }
    }
}

#[inline]
fn cell_sample(c: &[f64], atlas: &Atlas, cell: usize, sub: usize) -> (Rgb, f64) {
    let m = atlas.num_blocks;
    let row = &c[cell * m..(cell + 1) * m];
    let mut rgb = [0.0; 3];
    let mut occ = 0.0;
    for (k, &w) in row.iter().enumerate() {
        if w != 0.0 {
            let t = atlas.texel(k, sub);
            rgb[0] += w * t[0];
            rgb[1] += w * t[1];
            rgb[2] += w * t[2];
            occ += w;
        }
    }
    if occ > 0.0 {
        rgb.iter_mut().for_each(|v| *v /= occ);
    }
    (rgb, occ)
}

fn row_sum(c: &[f64], cell: usize, m: usize) -> f64 {
    c[cell * m..(cell + 1) * m].iter().sum()
}

/// Result of compositing one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOutput {
    pub rgb: Rgb,
    /// Expected depth in `[0, 1]`; residual transmittance counts as `1`.
    pub depth: f64,
    pub weight_sum: f64,
    pub transmittance: f64,
}

/// Emission-absorption compositing of `(t, rgb, optical depth)` samples in
/// front-to-back order.
pub fn composite(samples: impl IntoIterator<Item = (f64, Rgb, f64)>, background: Rgb, settings: &RenderSettings) -> RayOutput {
    let span = settings.far - settings.near;
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut weight_sum = 0.0;
    for (t, c, tau) in samples {
        let a = 1.0 - (-tau).exp();
        let w = trans * a;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        depth += w * (t - settings.near) / span;
        weight_sum += w;
        trans *= 1.0 - a;
    }
    for k in 0..3 {
        rgb[k] += trans * background[k];
    }
    RayOutput {
        rgb,
        depth: depth + trans,
        weight_sum,
        transmittance: trans,
    }
}

/// Marches a ray through an arbitrary field. `field` maps a world-space
/// point to `(color, extinction per world unit)`.
pub fn trace_field(origin: Vec3, dir: Vec3, background: Rgb, settings: &RenderSettings, field: impl Fn(Vec3) -> (Rgb, f64)) -> RayOutput {
    let step = settings.step();
    composite(
        (0..settings.samples_per_ray).map(|i| {
            let t = settings.sample_t(i);
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let (c, sigma) = field(p);
            (t, c, sigma * step)
        }),
        background,
        settings,
    )
}

/// Marches a ray through a cell-major `[N³, M]` block grid.
pub fn trace_ray(origin: Vec3, dir: Vec3, c: &[f64], n: usize, atlas: &Atlas, background: Rgb, settings: &RenderSettings) -> RayOutput {
    let scale = settings.density_scale * n as f64;
    trace_field(origin, dir, background, settings, |p| {
        let (rgb, d) = voxel_lookup([p[0] + 0.5, p[1] + 0.5, p[2] + 0.5], c, n, atlas, 1.0);
        (rgb, d * scale)
    })
}

#[derive(Debug, Clone, Copy)]
struct PlanSample {
    cell: u32,
    sub: u16,
    step: u16,
}

/// Precomputed in-grid samples of every pixel ray of one camera.
#[derive(Debug, Clone)]
pub struct ViewPlan {
    camera: Camera,
    settings: RenderSettings,
    n: usize,
    dirs: Vec<Vec3>,
    offsets: Vec<usize>,
    samples: Vec<PlanSample>,
}

/// Parameter interval where the ray is inside the scene cube.
fn cube_interval(o: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let (a, b) = ((-0.5 - o[k]) / d[k], (0.5 - o[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

impl ViewPlan {
    pub fn new(camera: &Camera, settings: &RenderSettings, n: usize) -> Result<Self, RenderError> {
        camera.validate()?;
        settings.validate()?;
        if settings.samples_per_ray > u16::MAX as usize {
            return Err(RenderError::Settings("samples_per_ray exceeds 65535".into()));
        }
        let step = settings.step();
        let mut dirs = Vec::with_capacity(camera.num_pixels());
        let mut offsets = vec![0];
        let mut samples = Vec::new();
        let o = camera.position;
        for py in 0..camera.height {
            for px in 0..camera.width {
                let d = camera.ray_dir(px, py);
                dirs.push(d);
                if let Some((t0, t1)) = cube_interval(o, d) {
                    let lo = (((t0 - settings.near) / step - 0.5).floor() - 1.0).max(0.0) as usize;
                    let hi = ((((t1 - settings.near) / step - 0.5).ceil() + 1.0).max(0.0) as usize).min(settings.samples_per_ray);
                    for i in lo..hi {
                        let t = settings.sample_t(i);
                        let q = [o[0] + t * d[0] + 0.5, o[1] + t * d[1] + 0.5, o[2] + t * d[2] + 0.5];
                        if let Some((cell, sub)) = locate(q, n) {
                            samples.push(PlanSample {
                                cell: cell as u32,
                                sub: sub as u16,
                                step: i as u16,
                            });
                        }
                    }
                }
                offsets.push(samples.len());
            }
        }
        Ok(Self {
            camera: *camera,
            settings: *settings,
            n,
            dirs,
            offsets,
            samples,
        })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn num_rays(&self) -> usize {
        self.dirs.len()
    }

    /// Unit ray directions, row-major from the top-left pixel.
    pub fn dirs(&self) -> &[Vec3] {
        &self.dirs
    }

    fn ray(&self, r: usize) -> &[PlanSample] {
        &self.samples[self.offsets[r]..self.offsets[r + 1]]
    }

    fn optical_factor(&self) -> f64 {
        self.settings.density_scale * self.settings.step() * self.n as f64
    }

    /// Composites every ray against per-ray background colors `[P, 3]`.
    pub fn forward(&self, c: &[f64], atlas: &Atlas, background: &[f64]) -> Vec<RayOutput> {
        let k = self.optical_factor();
        (0..self.num_rays())
            .map(|r| {
                let bg = [background[3 * r], background[3 * r + 1], background[3 * r + 2]];
                composite(
                    self.ray(r).iter().map(|s| {
                        let (rgb, occ) = cell_sample(c, atlas, s.cell as usize, s.sub as usize);
                        (self.settings.sample_t(s.step as usize), rgb, k * occ)
                    }),
                    bg,
                    &self.settings,
                )
            })
            .collect()
    }
}

struct RenderOp {
    plan: Arc<ViewPlan>,
    atlas: Atlas,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render_view"
    }

    // Per sample i with opacity a_i, transmittance T_i, color c_i and
    // remaining radiance R_{i+1} = Σ_{j>i} T_j a_j c_j + T_S bg:
    //   ∂out/∂c_i = T_i a_i,  ∂out/∂τ_i = T_{i+1} c_i − R_{i+1},  ∂out/∂bg = T_S.
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64], grads: &mut [Vec<f64>]) {
        let (c, bg) = (inputs[0], inputs[1]);
        let plan = &*self.plan;
        let m = self.atlas.num_blocks;
        let k = plan.optical_factor();
        let mut trans = Vec::new();
        let mut alpha = Vec::new();
        let mut colors: Vec<Rgb> = Vec::new();
        for r in 0..plan.num_rays() {
            let go = [grad_out[3 * r], grad_out[3 * r + 1], grad_out[3 * r + 2]];
            if go == [0.0; 3] {
                continue;
            }
            let ray = plan.ray(r);
            trans.clear();
            alpha.clear();
            colors.clear();
            let mut t = 1.0;
            for s in ray {
                let (rgb, occ) = cell_sample(c, &self.atlas, s.cell as usize, s.sub as usize);
                let a = 1.0 - (-k * occ).exp();
                trans.push(t);
                alpha.push(a);
                colors.push(rgb);
                t *= 1.0 - a;
            }
            for j in 0..3 {
                grads[1][3 * r + j] += go[j] * t;
            }
            let mut remaining = [bg[3 * r] * t, bg[3 * r + 1] * t, bg[3 * r + 2] * t];
            let mut t_next = t;
            for (i, s) in ray.iter().enumerate().rev() {
                let w = trans[i] * alpha[i];
                let ci = colors[i];
                let g_tau: f64 = (0..3).map(|j| go[j] * (t_next * ci[j] - remaining[j])).sum();
                let g_occ = g_tau * k;
                let (cell, sub) = (s.cell as usize, s.sub as usize);
                let row = &mut grads[0][cell * m..(cell + 1) * m];
                let occ: f64 = row_sum(c, cell, m);
                // Color is the occupancy-weighted texel mean; its weight
                // w / occ tends to T·k as occ → 0.
                let w_per_occ = if occ > 0.0 { trans[i] * -(-k * occ).exp_m1() / occ } else { trans[i] * k };
                let g_ci: f64 = (0..3).map(|j| go[j] * ci[j]).sum();
                for (mm, gr) in row.iter_mut().enumerate() {
                    let tx = self.atlas.texel(mm, sub);
                    let g_tx = go[0] * tx[0] + go[1] * tx[1] + go[2] * tx[2];
                    *gr += w_per_occ * (g_tx - g_ci) + g_occ;
                }
                for j in 0..3 {
                    remaining[j] += w * ci[j];
                }
                t_next = trans[i];
            }
        }
    }
}

/// Differentiable render of block grid `c: [N³, M]` with per-ray background
/// colors `bg: [P, 3]`. Returns `[P, 3]` RGB, row-major from the top-left.
pub fn render_grid_var(g: &mut Graph, plan: &Arc<ViewPlan>, atlas: &Atlas, c: Var, bg: Var) -> Result<Var, RenderError> {
    let n = plan.grid_size();
    let m = atlas.num_blocks();
    if g.shape(c) != [n * n * n, m] {
        return Err(AutodiffError::ShapeMismatch {
            op: "render_view",
            lhs: g.shape(c).to_vec(),
            rhs: vec![n * n * n, m],
        }
        .into());
    }
    if g.shape(bg) != [plan.num_rays(), 3] {
        return Err(AutodiffError::ShapeMismatch {
            op: "render_view",
            lhs: g.shape(bg).to_vec(),
            rhs: vec![plan.num_rays(), 3],
        }
        .into());
    }
    let out: Vec<f64> = plan.forward(g.value(c), atlas, g.value(bg)).iter().flat_map(|o| o.rgb).collect();
    let op = RenderOp {
        plan: Arc::clone(plan),
        atlas: atlas.clone(),
    };
    Ok(g.custom(&[c, bg], vec![plan.num_rays(), 3], out, Box::new(op))?)
}

/// Background `[P, 3]` for a plan: the learned background, or white when
/// `white_background_mix` is set.
pub fn background_var(g: &mut Graph, plan: &ViewPlan, params: &FieldParams, bound: &BoundField) -> Result<Var, RenderError> {
    let p = plan.num_rays();
    if plan.settings().white_background_mix {
        return Ok(g.constant(vec![p, 3], vec![1.0; 3 * p])?);
    }
    let dirs = g.constant(vec![p, 3], plan.dirs().iter().flatten().copied().collect())?;
    Ok(background_colors(g, params, bound, dirs)?)
}

/// Differentiable render of `c` with the field's background model.
pub fn render_view(
    g: &mut Graph,
    plan: &Arc<ViewPlan>,
    atlas: &Atlas,
    c: Var,
    params: &FieldParams,
    bound: &BoundField,
) -> Result<Var, RenderError> {
    let bg = background_var(g, plan, params, bound)?;
    render_grid_var(g, plan, atlas, c, bg)
}

/// Background source for non-differentiable renders.
#[derive(Clone, Copy)]
pub enum Background<'a> {
    Constant(Rgb),
    Field(&'a FieldParams),
}

impl Background<'_> {
    fn colors(&self, plan: &ViewPlan) -> Vec<f64> {
        if plan.settings().white_background_mix {
            return vec![1.0; 3 * plan.num_rays()];
        }
        match self {
            Background::Constant(c) => c.repeat(plan.num_rays()),
            Background::Field(params) => {
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let bg = background_var(&mut g, plan, params, &bound).expect("background shapes are consistent");
                g.value(bg).to_vec()
            }
        }
    }
}

/// RGB and depth images of a cell-major `[N³, M]` grid.
pub fn render_images(camera: &Camera, c: &[f64], n: usize, atlas: &Atlas, background: Background<'_>, settings: &RenderSettings) -> Result<(Image, Image), RenderError> {
    let plan = ViewPlan::new(camera, settings, n)?;
    let out = plan.forward(c, atlas, &background.colors(&plan));
    let rgb = Image::from_rgb(camera.width, camera.height, out.iter().flat_map(|o| o.rgb).collect())?;
    let depth = Image::from_gray(camera.width, camera.height, out.iter().map(|o| o.depth))?;
    Ok((rgb, depth))
}

/// RGB render of a discrete grid.
pub fn render_block_grid(camera: &Camera, grid: &BlockGrid, palette: &BlockPalette, background: Background<'_>, settings: &RenderSettings) -> Result<Image, RenderError> {
    let atlas = Atlas::new(palette);
    Ok(render_images(camera, grid.one_hot().data(), grid.size(), &atlas, background, settings)?.0)
}

/// Expected-depth image of a grid, normalized to `[0, 1]` over `[near, far]`.
pub fn render_depth(camera: &Camera, c: &[f64], n: usize, atlas: &Atlas, settings: &RenderSettings) -> Result<Image, RenderError> {
    Ok(render_images(camera, c, n, atlas, Background::Constant([0.0; 3]), settings)?.1)
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_rgb(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RenderError> {
        if data.len() != width * height * 3 {
            return Err(RenderError::ImageSize {
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_gray(width: usize, height: usize, values: impl IntoIterator<Item = f64>) -> Result<Self, RenderError> {
        Self::from_rgb(width, height, values.into_iter().flat_map(|v| [v; 3]).collect())
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let b = (y * self.width + x) * 3;
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        self.to_rgb8().save(path).map_err(|source| RenderError::Png {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path)
            .map_err(|source| RenderError::Png {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .expect("in-memory png encoding");
        buf.into_inner()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, image::ImageError> {
        Ok(Self::from_rgb8(&image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8()))
    }
}
