use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use blockfield::baseline::{posthoc_quantize, FieldAtCells, SyntheticField};
use blockfield::constraints::ConstraintSet;
use blockfield::eval::{psnr, r_precision, SimilarityMatrix};
use blockfield::experiments::{ablation_sweep, resolution_sweep, FitResult, ReconstructionFixture, ReconstructionOptions, SweepOptions};
use blockfield::export::{export_schematic, import_schematic, read_schem, write_schem};
use blockfield::field::{discretize, load_checkpoint, save_checkpoint, FieldParams};
use blockfield::grid::BlockGrid;
use blockfield::guidance::{GuidanceProvider, ReconstructionGuidance, RemoteConfig, RemoteGuidance, ZeroGuidance};
use blockfield::palette::BlockPalette;
use blockfield::render::{render_images, turntable, Atlas, Background, Image, RenderSettings};
use blockfield::train::{train, MetricsWriter, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GenerateConfig, PaletteSpec};
use crate::error::{config, runtime, CliError, Result};
use crate::manifest::{grid_hash, RunManifest};
use crate::views::{load_targets, ViewEntry, ViewIndex};
use crate::{BaselineArgs, EvalCommand, ExportArgs, GenerateArgs, ImportArgs, RenderArgs, SweepArgs};

pub const CHECKPOINT: &str = "field.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const MANIFEST: &str = "manifest.json";

/// Metadata stored alongside the parameters in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub palette: PaletteSpec,
    pub palette_hash: String,
    pub step: usize,
    pub train: TrainConfig,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config(format!("{}: no such file or directory", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn game_ids(palette: &BlockPalette) -> Vec<String> {
    palette.blocks().iter().map(|b| b.game_id.clone()).collect()
}

/// A checkpoint with the palette it was trained on (or `palette`, when
/// given) and the grid size to read it at.
struct LoadedField {
    params: FieldParams,
    palette: BlockPalette,
    spec: PaletteSpec,
    train: Option<TrainConfig>,
}

impl LoadedField {
    fn load(path: &Path, palette: Option<&Path>) -> Result<Self> {
        require(path)?;
        let (params, extra) = load_checkpoint(path)?;
        let meta: Option<CheckpointMeta> = serde_json::from_value(extra).ok();
        let spec = match (palette, &meta) {
            (Some(p), _) => PaletteSpec::manifest(p.to_path_buf()),
            (None, Some(m)) => m.palette.clone(),
            (None, None) => PaletteSpec::default(),
        };
        let palette = spec.resolve()?;
        if palette.len() != params.config.num_blocks {
            return Err(config(format!(
                "palette has {} blocks but the checkpoint was trained on {}",
                palette.len(),
                params.config.num_blocks
            )));
        }
        Ok(Self {
            params,
            palette,
            spec,
            train: meta.map(|m| m.train),
        })
    }

    fn grid_size(&self, flag: Option<usize>) -> usize {
        flag.or(self.train.map(|t| t.grid_size)).unwrap_or(TrainConfig::default().grid_size)
    }

    fn render_settings(&self, n: usize) -> RenderSettings {
        self.train.map_or_else(|| RenderSettings::for_grid(n), |t| t.render)
    }
}

fn write_grid(grid: &BlockGrid, palette: &BlockPalette, out: &Path, schem: bool) -> Result<()> {
    if schem {
        write_schem(grid, &game_ids(palette), out)?;
    } else {
        export_schematic(grid, &palette.names(), out)?;
    }
    Ok(())
}

fn render_frames(grid: &BlockGrid, palette: &BlockPalette, params: &FieldParams, settings: &RenderSettings, frames: usize, size: usize, elevation: f64, depth: bool, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let atlas = Atlas::new(palette);
    let c = grid.one_hot();
    let mut written = Vec::new();
    let mut index = ViewIndex { views: Vec::new() };
    for (i, cam) in turntable(frames, elevation, size, size).into_iter().enumerate() {
        let (rgb, d) = render_images(&cam, c.data(), grid.size(), &atlas, Background::Field(params), settings)?;
        let name = format!("rgb_{i:03}.png");
        rgb.save_png(&dir.join(&name))?;
        written.push(dir.join(&name));
        let depth_name = if depth {
            let n = format!("depth_{i:03}.png");
            d.save_png(&dir.join(&n))?;
            written.push(dir.join(&n));
            Some(n)
        } else {
            None
        };
        index.views.push(ViewEntry {
            image: name,
            depth: depth_name,
            camera: cam,
        });
    }
    index.write(dir)?;
    written.push(dir.join(crate::views::INDEX));
    Ok(written)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            require(path)?;
            GenerateConfig::load(path)?
        }
        None => GenerateConfig::default(),
    };
    if let Some(p) = args.prompt {
        cfg.prompt = Some(p);
    }
    if let Some(u) = args.guidance_url {
        cfg.guidance_url = Some(u);
    }
    if let Some(t) = args.target_views {
        cfg.target_views = Some(t);
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(n) = args.grid_size {
        cfg.train.grid_size = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    cfg.palette = cfg.palette.absolute();
    let palette = cfg.palette.resolve()?;
    cfg.field.num_blocks = palette.len();

    let mut manifest = RunManifest::new("generate", Some(cfg.train.seed), serde_json::Value::Null).with_palette(&palette);
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    let constraints = match &cfg.constraints {
        Some(path) => {
            require(path)?;
            manifest.input(path)?;
            ConstraintSet::load(path, &palette)?
        }
        None => ConstraintSet::default(),
    };

    let mut guidance: Box<dyn GuidanceProvider> = if let Some(dir) = &cfg.target_views {
        require(dir)?;
        manifest.input(dir)?;
        Box::new(ReconstructionGuidance::new(load_targets(dir)?)?)
    } else if let Some(url) = &cfg.guidance_url {
        let prompt = cfg.prompt.as_deref().ok_or_else(|| config("--guidance-url needs a --prompt"))?;
        let mut rc = RemoteConfig::new(url, prompt);
        rc.timeout = Duration::from_secs_f64(cfg.remote.timeout_secs);
        rc.retries = cfg.remote.retries;
        let remote = RemoteGuidance::new(rc, cfg.remote.provides_gradient);
        let health = remote.health()?;
        eprintln!("guidance service: model {}, protocol {}", health.model, health.protocol);
        Box::new(remote)
    } else {
        // No guidance source: a constraint-only run.
        cfg.train.guidance_weight = 0.0;
        Box::new(ZeroGuidance)
    };
    cfg.train.validate()?;
    let mut snapshot = cfg.clone();
    snapshot.out = None;
    manifest.config = to_json(&snapshot);

    create_dir(&out)?;
    let atlas = Atlas::new(&palette);
    let mut params = FieldParams::new(cfg.field.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let palette_hash = manifest.palette_hash.clone().unwrap_or_default();
    let meta = |step: usize| {
        to_json(&CheckpointMeta {
            palette: cfg.palette.clone(),
            palette_hash: palette_hash.clone(),
            step,
            train: cfg.train,
        })
    };
    let metrics_path = out.join(METRICS);
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(&metrics_path).map_err(runtime)?));
    let every = cfg.checkpoint_every;
    if every > 0 {
        create_dir(&out.join("checkpoints"))?;
    }
    let log_every = (cfg.train.steps / 20).max(1);
    let result = train(&mut params, guidance.as_mut(), &constraints, &atlas, &cfg.train, &mut |rec, p| {
        metrics.write(rec)?;
        if every > 0 && (rec.step + 1) % every == 0 {
            let path = out.join("checkpoints").join(format!("step_{:05}.ckpt", rec.step + 1));
            save_checkpoint(&path, p, &meta(rec.step + 1)).map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
        }
        if rec.step % log_every == 0 || rec.step + 1 == cfg.train.steps {
            eprintln!(
                "step {:>5}  loss {:.5}  guidance {:.5}  dist {:.5}  adj {:.5}  solid {}",
                rec.step, rec.total, rec.guidance, rec.distribution, rec.adjacency, rec.solid_cells
            );
        }
        Ok(())
    });
    drop(metrics);
    manifest.output(&metrics_path);
    if let Err(TrainError::NonFinite { snapshot, step, .. }) = &result {
        let path = out.join("nonfinite.ckpt");
        save_checkpoint(&path, snapshot, &meta(*step))?;
        eprintln!("parameters before the failing step saved to {}", path.display());
    }
    let log = result?;

    let ckpt = out.join(CHECKPOINT);
    save_checkpoint(&ckpt, &params, &meta(log.len()))?;
    manifest.output(&ckpt);
    let grid = discretize(&params, cfg.train.grid_size);
    let grid_path = out.join("grid.bfs");
    write_grid(&grid, &palette, &grid_path, false)?;
    manifest.output(&grid_path);
    let t = cfg.turntable;
    for p in render_frames(&grid, &palette, &params, &cfg.train.render, t.frames, t.size, t.elevation, false, &out.join("turntable"))? {
        manifest.output(&p);
    }
    manifest.write(&out.join(MANIFEST))?;
    println!("{} steps, {} solid cells, grid {}", log.len(), grid.solid_cells(), grid_hash(&grid, &game_ids(&palette)));
    Ok(())
}

pub fn render(args: RenderArgs) -> Result<()> {
    let field = LoadedField::load(&args.checkpoint, args.palette.as_deref())?;
    let n = field.grid_size(args.grid_size);
    let settings = field.render_settings(n);
    let grid = discretize(&field.params, n);
    let mut manifest = RunManifest::new(
        "render",
        None,
        serde_json::json!({"views": args.views, "size": args.size, "elevation": args.elevation, "depth": args.depth, "grid_size": n, "render": settings, "palette": field.spec}),
    )
    .with_palette(&field.palette);
    manifest.input(&args.checkpoint)?;
    for p in render_frames(&grid, &field.palette, &field.params, &settings, args.views, args.size, args.elevation, args.depth, &args.out)? {
        manifest.output(&p);
    }
    manifest.write(&args.out.join(MANIFEST))?;
    println!("{} views written to {}", args.views, args.out.display());
    Ok(())
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn export(args: ExportArgs) -> Result<()> {
    let field = LoadedField::load(&args.checkpoint, args.palette.as_deref())?;
    let n = field.grid_size(args.grid_size);
    let grid = discretize(&field.params, n);
    write_grid(&grid, &field.palette, &args.out, args.schem)?;
    let mut manifest = RunManifest::new("export", None, serde_json::json!({"grid_size": n, "schem": args.schem, "palette": field.spec})).with_palette(&field.palette);
    manifest.input(&args.checkpoint)?;
    manifest.output(&args.out);
    manifest.write(&sidecar_manifest(&args.out))?;
    println!("{}", grid_hash(&grid, &game_ids(&field.palette)));
    Ok(())
}

#[derive(Serialize)]
struct GridSummary {
    size: usize,
    solid: usize,
    counts: std::collections::BTreeMap<String, usize>,
    hash: String,
}

pub fn import(args: ImportArgs) -> Result<()> {
    require(&args.file)?;
    let is_schem = args.file.extension().is_some_and(|e| e == "schem");
    let (grid, names, ids) = if is_schem {
        let contents = read_schem(&args.file)?;
        let mut entries: Vec<_> = contents.palette.iter().filter(|(n, _)| n != "minecraft:air").cloned().collect();
        entries.sort_by_key(|(_, i)| *i);
        let ids: Vec<String> = entries.into_iter().map(|(n, _)| n).collect();
        (contents.to_grid(&ids)?, ids.clone(), ids)
    } else {
        let file = import_schematic(&args.file)?;
        // Names resolve to game ids through the palette; unknown names use
        // the default namespace.
        let palette = args.palette.map(PaletteSpec::manifest).unwrap_or_default().resolve()?;
        let ids = file
            .names
            .iter()
            .map(|n| palette.index_of(n).map_or_else(|| format!("minecraft:{n}"), |i| palette.blocks()[i].game_id.clone()))
            .collect();
        (file.grid, file.names, ids)
    };
    let counts = grid.counts().into_iter().enumerate().filter(|(_, c)| *c > 0).map(|(i, c)| (names[i].clone(), c)).collect();
    let summary = GridSummary {
        size: grid.size(),
        solid: grid.solid_cells(),
        counts,
        hash: grid_hash(&grid, &ids),
    };
    println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(())
}

pub fn baseline(args: BaselineArgs) -> Result<()> {
    require(&args.field)?;
    let synthetic = args.field.extension().is_some_and(|e| e == "toml");
    let (grid, palette, spec) = if synthetic {
        let text = std::fs::read_to_string(&args.field).map_err(|e| config(format!("{}: {e}", args.field.display())))?;
        let field = SyntheticField::from_toml(&text).map_err(|e| config(format!("{}: {e}", args.field.display())))?;
        let spec = args.palette.clone().map(PaletteSpec::manifest).unwrap_or_default();
        let palette = spec.resolve()?;
        let n = args.grid_size.unwrap_or(TrainConfig::default().grid_size);
        (posthoc_quantize(&field, &palette, n, args.threshold), palette, spec)
    } else {
        let f = LoadedField::load(&args.field, args.palette.as_deref())?;
        let n = f.grid_size(args.grid_size);
        let cells = FieldAtCells::new(&f.params, &f.palette, n);
        (posthoc_quantize(&cells, &f.palette, n, args.threshold), f.palette, f.spec)
    };
    let mut manifest = RunManifest::new(
        "baseline",
        None,
        serde_json::json!({"threshold": args.threshold, "grid_size": grid.size(), "schem": args.schem, "palette": spec}),
    )
    .with_palette(&palette);
    manifest.input(&args.field)?;
    if let Some(out) = &args.out {
        write_grid(&grid, &palette, out, args.schem)?;
        manifest.output(out);
        manifest.write(&sidecar_manifest(out))?;
    }
    println!("{} solid cells, grid {}", grid.solid_cells(), grid_hash(&grid, &game_ids(&palette)));
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    axis: &'a str,
    #[serde(flatten)]
    result: &'a FitResult,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let mut axes = Vec::new();
    for a in args.axes.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        match a {
            "quantization" | "resolution" => axes.push(a),
            other => return Err(config(format!("unknown sweep axis `{other}` (expected quantization, resolution)"))),
        }
    }
    if axes.is_empty() {
        return Err(config("no sweep axes given"));
    }
    create_dir(&args.out)?;
    let seed = args.seed.unwrap_or(0);
    let recon = ReconstructionOptions {
        steps: args.steps.unwrap_or(ReconstructionOptions::default().steps),
        image_size: args.image_size.unwrap_or(ReconstructionOptions::default().image_size),
        seed,
        ..ReconstructionOptions::default()
    };
    let res = SweepOptions {
        steps: args.steps.unwrap_or(SweepOptions::default().steps),
        image_size: args.image_size.unwrap_or(SweepOptions::default().image_size),
        seed,
        ..SweepOptions::default()
    };
    let mut manifest = RunManifest::new(
        "sweep",
        Some(seed),
        serde_json::json!({
            "axes": axes,
            "sizes": args.sizes,
            "quantization": {"steps": recon.steps, "image_size": recon.image_size, "views_per_step": recon.views_per_step, "learning_rate": recon.learning_rate},
            "resolution": {"steps": res.steps, "image_size": res.image_size, "views_per_step": res.views_per_step, "learning_rate": res.learning_rate, "schedule": res.quantization},
        }),
    );
    println!("axis\tblock_mode\tair_mode\tgrid_size\tpsnr_rgb\tpsnr_depth\tblock_accuracy\tseconds");
    for axis in axes {
        let rows = match axis {
            "quantization" => ablation_sweep(&ReconstructionFixture::new(recon.image_size), &recon)?,
            _ => resolution_sweep(&args.sizes, &res)?,
        };
        for r in &rows {
            println!(
                "{axis}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{}\t{:.1}",
                r.block_mode.name(),
                r.air_mode.name(),
                r.grid_size,
                r.psnr_rgb,
                r.psnr_depth,
                r.block_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                r.seconds
            );
        }
        let path = args.out.join(format!("{axis}.json"));
        let json: Vec<_> = rows.iter().map(|result| SweepRow { axis, result }).collect();
        std::fs::write(&path, serde_json::to_string_pretty(&json).map_err(runtime)? + "\n").map_err(runtime)?;
        manifest.output(&path);
    }
    manifest.write(&args.out.join(MANIFEST))?;
    Ok(())
}

fn load_image(path: &Path) -> Result<Image> {
    require(path)?;
    Image::load_png(path).map_err(|e| config(format!("{}: {e}", path.display())))
}

pub fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::RPrecision { scores } => {
            require(&scores)?;
            let m = SimilarityMatrix::load(&scores)?;
            println!("{:.2}", r_precision(&m)?);
        }
        EvalCommand::Psnr { a, b } => {
            let v = psnr(&load_image(&a)?, &load_image(&b)?)?;
            println!("{v:.4}");
        }
    }
    Ok(())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}
