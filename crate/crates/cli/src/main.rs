//! `flashcap` command-line tool.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on bad usage.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flashcap::eval::{eval_fit, map_rmse, morph, EvalReport};
use flashcap::generator::{Generator, GeneratorConfig, LatentState};
use flashcap::invert::{
    canonical_view, embed_maps, fit, fit_direct, low_rough_material, neutral_material, novel_views, render_views,
    resolve_init, synthetic_capture, write_trace, FeatureExtractor, FitConfig, InitKind, LatentSpace, LossConfig,
    Strategy,
};

const REFINE_DEFAULT: &str = "500";
use flashcap::io::{load_bundle, load_capture, save_bundle, save_capture, save_image_preview};
use flashcap::render::{render, CaptureView, Image};
use flashcap::train::{generate_procedural_dataset, load_checkpoint, train_from, ProceduralDatasetConfig, TrainConfig, TrainState};
use flashcap::{Error, SvbrdfMaps};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "flashcap", version, about = "SVBRDF capture from flash photographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural training set, one map bundle per sample.
    GenData(GenDataArgs),
    /// Train the generator prior on a directory of map bundles.
    TrainPrior(TrainPriorArgs),
    /// Decode a random latent into a map bundle.
    Sample(SampleArgs),
    /// Recover maps from a capture.
    Fit(FitArgs),
    /// Find latents whose decoded maps match a map bundle.
    Embed(EmbedArgs),
    /// Render a map bundle under a synthetic capture setup.
    Render(RenderArgs),
    /// Interpolate between two latents, with the per-pixel blend alongside.
    Morph(MorphArgs),
    /// Score maps against ground truth and photographs.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainPriorArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics and the final generator.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    /// Use the 8x8 test-sized generator instead of the 64x64 one.
    #[arg(long)]
    tiny: bool,
    /// Continue from `<out>/checkpoint.ntc`.
    #[arg(long)]
    resume: bool,
    /// Print a progress line every this many steps (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(clap::Args)]
struct WeightsArg {
    /// Generator weights (`.ntc` with a `.toml` config alongside). Defaults
    /// to the bundled prior.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl WeightsArg {
    fn path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(flashcap::assets::prior)
    }

    fn load(&self) -> Result<Generator, Error> {
        Generator::load(&self.path())
    }
}

#[derive(clap::Args)]
struct SampleArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    S1,
    S2,
    S3,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Mean,
    Lowrough,
    Dual,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    W,
    Wplus,
    Wplusn,
}

impl From<SpaceArg> for LatentSpace {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::W => LatentSpace::W,
            SpaceArg::Wplus => LatentSpace::WPlus,
            SpaceArg::Wplusn => LatentSpace::WPlusNoise,
        }
    }
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::S1 => Strategy::S1,
            StrategyArg::S2 => Strategy::S2,
            StrategyArg::S3 => Strategy::S3,
        }
    }
}

#[derive(clap::Args)]
struct LossArgs {
    /// Weight of the pixel term.
    #[arg(long, default_value_t = 1.0)]
    pixel_weight: f64,
    /// Weight of the feature term.
    #[arg(long, default_value_t = 0.1)]
    percept_weight: f64,
    /// Feature weights from this file instead of the built-in random filters.
    #[arg(long)]
    features: Option<PathBuf>,
}

impl LossArgs {
    fn config(&self) -> LossConfig {
        LossConfig {
            pixel_weight: self.pixel_weight,
            percept_weight: self.percept_weight,
            ..Default::default()
        }
    }

    fn extractor(&self) -> Result<FeatureExtractor, Error> {
        match &self.features {
            Some(p) => FeatureExtractor::load(p),
            None => Ok(FeatureExtractor::default()),
        }
    }

    fn record(&self, m: &mut RunManifest, loss: &LossConfig) {
        m.set("pixel_weight", loss.pixel_weight);
        m.set("percept_weight", loss.percept_weight);
        m.set("w_plus_layers", format!("{:?}", loss.w_plus_layers));
        m.set("noise_layers", format!("{:?}", loss.noise_layers));
        m.set("compare_space", format!("{:?}", loss.space));
        m.set(
            "features",
            self.features.as_ref().map_or("built-in".to_string(), |p| p.display().to_string()),
        );
    }
}

#[derive(clap::Args)]
struct FitArgs {
    /// Capture manifest (JSON).
    #[arg(long)]
    capture: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long, value_enum, default_value = "s3")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "mean")]
    init: InitArg,
    /// Latents for `--init file`.
    #[arg(long)]
    init_file: Option<PathBuf>,
    /// Low-roughness preset; defaults to the bundled one.
    #[arg(long)]
    preset: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Comma-separated indices of the manifest views to fit (default: all).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Optimize per-pixel maps without the generator.
    #[arg(long)]
    direct: bool,
    /// Pixel-space refinement after the latent fit, optionally with an
    /// iteration count.
    #[arg(long, num_args = 0..=1, default_missing_value = REFINE_DEFAULT)]
    refine: Option<usize>,
    #[arg(long, value_enum, default_value = "wplusn")]
    space: SpaceArg,
    #[arg(long, default_value_t = 10)]
    period: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    direct_lr: f64,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(clap::Args)]
struct EmbedArgs {
    /// Map bundle to embed.
    #[arg(long, required_unless_present = "low_rough")]
    maps: Option<PathBuf>,
    /// Embed the constant low-roughness material instead (writes the preset
    /// used by `fit --init lowrough`).
    #[arg(long)]
    low_rough: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long, value_enum, default_value = "wplusn")]
    space: SpaceArg,
    #[arg(long, value_enum, default_value = "s2")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    /// The 3x3 flash grid.
    Grid,
    /// Two held-out setups with the light away from the camera.
    Novel,
    /// One flash straight above the centre.
    Canonical,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "grid")]
    setup: SetupArg,
    /// Physical sample width written to the capture manifest, in metres.
    #[arg(long, default_value_t = 0.1)]
    size_m: f64,
}

#[derive(clap::Args)]
struct MorphArgs {
    /// Latents of the first material.
    #[arg(long)]
    a: PathBuf,
    /// Latents of the second material.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    weights: WeightsArg,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Maps to score.
    #[arg(long)]
    maps: PathBuf,
    /// Ground-truth maps.
    #[arg(long)]
    truth: PathBuf,
    /// Capture the maps were fitted to.
    #[arg(long)]
    capture: Option<PathBuf>,
    /// Indices of the capture views that were used for fitting (default: all).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Capture of held-out views.
    #[arg(long)]
    novel: Option<PathBuf>,
    /// Directory for `report.txt`, a contact sheet of photographs over
    /// renderings, and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainPrior(a) => train_prior(a),
        Command::Sample(a) => sample(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Render(a) => render_cmd(a),
        Command::Morph(a) => morph_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let cfg = ProceduralDatasetConfig {
        count: a.count,
        resolution: a.resolution,
        seed: a.seed,
        ..Default::default()
    };
    let samples = generate_procedural_dataset(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, s) in samples.iter().enumerate() {
        save_bundle(&s.maps, &a.out.join(format!("{i:05}")))?;
    }
    let mut m = RunManifest::new("gen-data");
    m.set("count", a.count);
    m.set("resolution", a.resolution);
    m.set("seed", a.seed);
    m.set("mix", format!("{:?}", cfg.mix));
    m.set("min_crop", cfg.augment.min_crop);
    m.set("rotate", cfg.augment.rotate);
    m.set("blend_prob", cfg.augment.blend_prob);
    m.write(&a.out)?;
    println!("wrote {} bundles to {}", samples.len(), a.out.display());
    Ok(())
}

/// Loads every bundle subdirectory of `dir`, in name order.
fn load_dataset(dir: &Path) -> Result<Vec<SvbrdfMaps>, Error> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} holds no map bundles", dir.display())));
    }
    dirs.iter().map(|d| load_bundle(d)).collect()
}

fn train_prior(a: TrainPriorArgs) -> Result<(), Error> {
    let data = load_dataset(&a.data)?;
    let ckpt = a.out.join("checkpoint.ntc");
    let (state, cfg) = if a.resume {
        let (state, mut cfg) = load_checkpoint(&ckpt)?;
        cfg.steps = a.steps;
        (state, cfg)
    } else {
        let mut cfg = TrainConfig {
            steps: a.steps,
            seed: a.seed,
            batch_size: a.batch,
            checkpoint_every: a.checkpoint_every,
            ..Default::default()
        };
        if a.tiny {
            cfg.generator = GeneratorConfig::tiny();
        }
        (TrainState::new(&cfg)?, cfg)
    };
    let res = cfg.generator.resolution();
    if let Some(bad) = data.iter().find(|m| m.width != res || m.height != res) {
        return Err(Error::Config(format!(
            "dataset maps are {}x{} but the generator makes {res}x{res}",
            bad.width, bad.height
        )));
    }
    let start = state.step;
    let log_every = a.log_every;
    let mut last = None;
    train_from(state, &cfg, &data, &a.out, |log| {
        last = Some(*log);
        if log_every > 0 && log.step % log_every == 0 {
            println!(
                "step {} loss_g {:.4} loss_d {:.4} r1 {:.4}",
                log.step, log.loss_g, log.loss_d, log.r1
            );
        }
    })?;
    let mut m = RunManifest::new("train-prior");
    m.set("data", a.data.display());
    m.set("samples", data.len());
    m.set("start_step", start);
    m.set("steps", cfg.steps);
    m.set("seed", cfg.seed);
    m.set("batch_size", cfg.batch_size);
    m.set("gamma", cfg.gamma);
    m.set("r1_interval", cfg.r1_interval);
    m.set("lr", cfg.lr);
    m.set("beta1", cfg.beta1);
    m.set("beta2", cfg.beta2);
    m.set("latent_dim", cfg.generator.latent_dim);
    m.set("resolution", res);
    if let Some(l) = last {
        m.set("final_loss_g", l.loss_g);
        m.set("final_loss_d", l.loss_d);
        m.set("final_r1", l.r1);
    }
    m.write(&a.out)?;
    println!("generator written to {}", a.out.join("generator.ntc").display());
    Ok(())
}

/// Canonical-view preview of `maps` as an 8-bit PNG.
fn preview(maps: &SvbrdfMaps, path: &Path) -> Result<(), Error> {
    let view = canonical_view(maps.width)?;
    save_image_preview(&render(maps, &view)?, path)
}

fn sample(a: SampleArgs) -> Result<(), Error> {
    let g = a.weights.load()?;
    let (maps, latent) = g.sample_material(a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    save_bundle(&maps, &a.out.join("maps"))?;
    latent.save(&a.out.join("latent.ntc"))?;
    preview(&maps, &a.out.join("preview.png"))?;
    let mut m = RunManifest::new("sample");
    m.set("weights", a.weights.path().display());
    m.set("seed", a.seed);
    m.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn select_views(all: Vec<CaptureView>, idx: &Option<Vec<usize>>) -> Result<Vec<CaptureView>, Error> {
    match idx {
        None => Ok(all),
        Some(idx) => idx
            .iter()
            .map(|&i| {
                all.get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("view {i} not in the capture ({} views)", all.len())))
            })
            .collect(),
    }
}

fn index_list(idx: &Option<Vec<usize>>, n: usize) -> String {
    let v: Vec<String> = match idx {
        Some(v) => v.iter().map(|i| i.to_string()).collect(),
        None => (0..n).map(|i| i.to_string()).collect(),
    };
    v.join(",")
}

fn fit_cmd(a: FitArgs) -> Result<(), Error> {
    let all = load_capture(&a.capture)?;
    let total_views = all.len();
    let views = select_views(all, &a.views)?;
    let loss = a.loss.config();
    let extractor = a.loss.extractor()?;
    let init = match a.init {
        InitArg::Mean => InitKind::MeanW,
        InitArg::Lowrough => InitKind::LowRough,
        InitArg::Dual => InitKind::Dual,
        InitArg::File => InitKind::File(
            a.init_file
                .clone()
                .ok_or_else(|| Error::Config("--init file needs --init-file".into()))?,
        ),
    };
    let cfg = FitConfig {
        strategy: a.strategy.into(),
        space: a.space.into(),
        period: a.period,
        iterations: a.iters,
        lr: a.lr,
        direct_lr: a.direct_lr,
        init,
        refine_iterations: a.refine.unwrap_or(0),
    };
    std::fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("fit");
    m.set("capture", a.capture.display());
    m.set("views", index_list(&a.views, total_views));
    m.set("mode", if a.direct { "direct" } else { "latent" });
    m.set("iterations", cfg.iterations);
    m.set("direct_lr", cfg.direct_lr);
    a.loss.record(&mut m, &loss);
    let maps = if a.direct {
        let (w, _) = views[0].resolution();
        let f = fit_direct(&views, &neutral_material(w), &cfg, &loss, &extractor)?;
        write_trace(&a.out.join("trace.csv"), &f.trace)?;
        m.set("init", "neutral");
        m.set("initial_loss", f.initial.total);
        m.set("final_loss", f.final_loss.total);
        m.set("final_pixel", f.final_loss.pixel);
        m.set("final_percept", f.final_loss.percept);
        if let Some(s) = &f.stopped {
            m.set("stopped", s);
        }
        f.maps
    } else {
        let g = a.weights.load()?;
        let preset = a.preset.clone().unwrap_or_else(flashcap::assets::low_rough_preset);
        let out = fit(&g, &views, &cfg, &loss, &extractor, Some(&preset))?;
        write_trace(&a.out.join("trace.csv"), &out.latent.trace)?;
        out.latent.latent.save(&a.out.join("latent.ntc"))?;
        m.set("weights", a.weights.path().display());
        m.set("strategy", format!("{:?}", cfg.strategy));
        m.set("space", format!("{:?}", cfg.space));
        m.set("period", cfg.period);
        m.set("lr", cfg.lr);
        m.set("init", format!("{:?}", cfg.init));
        m.set("init_used", format!("{:?}", out.init));
        for (k, l) in &out.branches {
            m.set(&format!("branch_{k:?}_final_loss"), l);
        }
        m.set("initial_loss", out.latent.initial.total);
        m.set("final_loss", out.latent.final_loss.total);
        m.set("final_pixel", out.latent.final_loss.pixel);
        m.set("final_percept", out.latent.final_loss.percept);
        if let Some(s) = &out.latent.stopped {
            m.set("stopped", s);
        }
        m.set("refine_iterations", cfg.refine_iterations);
        if let Some(r) = &out.refined {
            write_trace(&a.out.join("refine_trace.csv"), &r.trace)?;
            m.set("refined_final_loss", r.final_loss.total);
        }
        out.maps().clone()
    };
    save_bundle(&maps, &a.out.join("maps"))?;
    preview(&maps, &a.out.join("preview.png"))?;
    m.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<(), Error> {
    let g = a.weights.load()?;
    let target = match &a.maps {
        Some(p) if !a.low_rough => load_bundle(p)?,
        _ => low_rough_material(g.config.resolution()),
    };
    let loss = a.loss.config();
    let extractor = a.loss.extractor()?;
    let cfg = FitConfig {
        strategy: a.strategy.into(),
        space: a.space.into(),
        iterations: a.iters,
        lr: a.lr,
        ..Default::default()
    };
    let init = resolve_init(&InitKind::MeanW, &g, None)?;
    let f = embed_maps(&g, &target, &init, &cfg, &loss, &extractor)?;
    std::fs::create_dir_all(&a.out)?;
    f.latent.save(&a.out.join("latent.ntc"))?;
    save_bundle(&f.maps, &a.out.join("maps"))?;
    write_trace(&a.out.join("trace.csv"), &f.trace)?;
    let err = map_rmse(&f.maps, &target)?;
    let mut m = RunManifest::new("embed");
    m.set(
        "target",
        a.maps
            .as_ref()
            .filter(|_| !a.low_rough)
            .map_or("low-roughness constant".to_string(), |p| p.display().to_string()),
    );
    m.set("weights", a.weights.path().display());
    m.set("space", format!("{:?}", cfg.space));
    m.set("strategy", format!("{:?}", cfg.strategy));
    m.set("iterations", cfg.iterations);
    m.set("lr", cfg.lr);
    a.loss.record(&mut m, &loss);
    m.set("initial_loss", f.initial.total);
    m.set("final_loss", f.final_loss.total);
    m.set("map_rmse", err.total);
    m.write(&a.out)?;
    println!("map_rmse={}", err.total);
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<(), Error> {
    let maps = load_bundle(&a.maps)?;
    if maps.width != maps.height {
        return Err(Error::Config("render needs square maps".into()));
    }
    let n = maps.width;
    let mut views = match a.setup {
        SetupArg::Grid => synthetic_capture(n)?,
        SetupArg::Novel => novel_views(n)?,
        SetupArg::Canonical => vec![canonical_view(n)?],
    };
    render_views(&maps, &mut views)?;
    let path = save_capture(&views, &a.out, a.size_m)?;
    let mut m = RunManifest::new("render");
    m.set("maps", a.maps.display());
    m.set("views", views.len());
    m.set("size_m", a.size_m);
    m.write(&a.out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn morph_cmd(a: MorphArgs) -> Result<(), Error> {
    let g = a.weights.load()?;
    let la = LatentState::load(&a.a)?;
    let lb = LatentState::load(&a.b)?;
    let mo = morph(&g, &la, &lb, a.steps)?;
    std::fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("morph");
    m.set("a", a.a.display());
    m.set("b", a.b.display());
    m.set("steps", a.steps);
    m.set("weights", a.weights.path().display());
    for i in 0..a.steps {
        save_bundle(&mo.latent[i], &a.out.join(format!("latent_{i}")))?;
        save_bundle(&mo.pixel[i], &a.out.join(format!("pixel_{i}")))?;
        save_image_preview(&mo.latent_renders[i], &a.out.join(format!("latent_{i}.png")))?;
        save_image_preview(&mo.pixel_renders[i], &a.out.join(format!("pixel_{i}.png")))?;
        m.set(&format!("latent_vs_pixel_rmse_{i}"), map_rmse(&mo.latent[i], &mo.pixel[i])?.total);
    }
    m.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Photographs in the top row, renderings of `maps` below, one column per
/// view.
fn contact_sheet(maps: &SvbrdfMaps, views: &[CaptureView]) -> Result<Image, Error> {
    let (w, h) = views[0].resolution();
    let mut sheet = Image::black(w * views.len(), 2 * h);
    for (k, v) in views.iter().enumerate() {
        let r = render(maps, v)?;
        for y in 0..h {
            for x in 0..w {
                sheet.data[y * sheet.width + k * w + x] = v.image.get(x, y);
                sheet.data[(y + h) * sheet.width + k * w + x] = r.get(x, y);
            }
        }
    }
    Ok(sheet)
}

fn eval_cmd(a: EvalArgs) -> Result<(), Error> {
    let maps = load_bundle(&a.maps)?;
    let truth = load_bundle(&a.truth)?;
    let fit_views = match &a.capture {
        Some(c) => select_views(load_capture(c)?, &a.views)?,
        None => Vec::new(),
    };
    let novel = match &a.novel {
        Some(c) => load_capture(c)?,
        None => Vec::new(),
    };
    let loss = a.loss.config();
    let report: EvalReport = eval_fit(&maps, &truth, &fit_views, &novel, &a.loss.extractor()?, &loss)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        report.write(&out.join("report.txt"))?;
        let all: Vec<CaptureView> = fit_views.iter().chain(&novel).cloned().collect();
        if !all.is_empty() {
            save_image_preview(&contact_sheet(&maps, &all)?, &out.join("contact.png"))?;
        }
        let mut m = RunManifest::new("eval");
        m.set("maps", a.maps.display());
        m.set("truth", a.truth.display());
        if let Some(c) = &a.capture {
            m.set("capture", c.display());
            m.set("views", index_list(&a.views, fit_views.len()));
        }
        if let Some(c) = &a.novel {
            m.set("novel", c.display());
        }
        a.loss.record(&mut m, &loss);
        m.write(out)?;
    }
    Ok(())
}
