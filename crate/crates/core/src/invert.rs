//! Fitting material maps to flash photographs.
//!
//! Two modes share one objective. Direct mode optimizes unconstrained
//! per-pixel parameters pushed through the same range mapping as the
//! generator output. Latent mode optimizes the generator's style matrix
//! `w+` and/or its noise maps, so every iterate is a generator output.
//!
//! The per-view loss is
//!
//! ```text
//! L(I, I') = pixel_weight * mean|T(I) - T(I')|^2
//!          + percept_weight * sum_j layer_j * |F_j(T(I)) - F_j(T(I'))|^2
//! ```
//!
//! where `T` is the comparison transform ([`CompareSpace`]) and `F_j` are
//! the four taps of a fixed [`FeatureExtractor`]. The objective of a fit is
//! the sum over views.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{Generator, LatentState};
use crate::material::SvbrdfMaps;
use crate::render::{
    make_collocated_view, maps_from_tensor, maps_to_tensor, record_render, tone_map, CaptureView, Image,
    ViewGeometry, DISPLAY_GAMMA, TONE_FLOOR,
};
use crate::tensor::{read_tensors, write_tensors, Adam, AdamConfig, Real, Tape, Tensor, TensorError, Var};
use crate::Error;

/// Space in which renderings and photographs are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareSpace {
    Linear,
    /// `clamp(v, TONE_FLOOR, 1)^(1/2.2)`.
    Gamma,
}

impl CompareSpace {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            CompareSpace::Linear => v,
            CompareSpace::Gamma => tone_map(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub pixel_weight: f64,
    pub percept_weight: f64,
    /// Per-tap feature weights while `w+` is being optimized.
    pub w_plus_layers: [f64; 4],
    /// Per-tap feature weights while the noise maps are being optimized.
    pub noise_layers: [f64; 4],
    pub space: CompareSpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pixel_weight: 1.0,
            percept_weight: 0.1,
            w_plus_layers: [1.0 / 512.0, 1.0 / 512.0, 1.0 / 128.0, 1.0 / 64.0],
            noise_layers: [1.0 / 64.0, 1.0 / 64.0, 1.0 / 256.0, 1.0 / 512.0],
            space: CompareSpace::Gamma,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.pixel_weight)
            || !ok(self.percept_weight)
            || !self.w_plus_layers.iter().chain(&self.noise_layers).all(|&v| ok(v))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-tap feature weights in effect for one optimization phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    WPlus,
    Noise,
}

impl Phase {
    fn layers(self, loss: &LossConfig) -> [f64; 4] {
        match self {
            Phase::WPlus => loss.w_plus_layers,
            Phase::Noise => loss.noise_layers,
        }
    }
}

/// Fixed convolutional feature stack with four taps.
///
/// | tap | after              | channels | stride |
/// |-----|--------------------|----------|--------|
/// | 0   | `conv0`, relu      | `c0`     | 1      |
/// | 1   | `conv1`, relu      | `c1`     | 1      |
/// | 2   | pool, `conv2`, relu, pool, `conv3`, relu | `c3` | 4 |
/// | 3   | pool, `conv4`, relu | `c4`    | 8      |
///
/// All convolutions are 3x3 with zero padding 1 and read tensors
/// `conv{i}.weight` `[cout, cin, 3, 3]` and `conv{i}.bias` `[1, cout, 1, 1]`.
/// Weights are used as stored (no run-time gain), so external weights can be
/// dropped in unchanged. Input images must have sides divisible by 8.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    weights: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
}

pub const FEATURE_CHANNELS: [usize; 5] = [8, 8, 16, 16, 32];

impl FeatureExtractor {
    /// Random He-scaled filters with zero bias; the default extractor.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &cout in &FEATURE_CHANNELS {
            let gain = (2.0 / (cin * 9) as f32).sqrt();
            weights.push(Tensor::randn([cout, cin, 3, 3], &mut rng).map(|v| v * gain));
            biases.push(Tensor::zeros([1, cout, 1, 1]));
            cin = cout;
        }
        FeatureExtractor { weights, biases }
    }

    pub fn from_named(named: Vec<(String, Tensor<f32>)>) -> Result<Self, Error> {
        let mut map: std::collections::HashMap<_, _> = named.into_iter().collect();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for i in 0..5 {
            let w = map
                .remove(&format!("conv{i}.weight"))
                .ok_or_else(|| Error::Format(format!("feature weights lack conv{i}.weight")))?;
            let [cout, wc, kh, kw] = w.shape();
            if wc != cin || kh != 3 || kw != 3 {
                return Err(Error::Format(format!(
                    "conv{i}.weight has shape {:?}, expected [_, {cin}, 3, 3]",
                    w.shape()
                )));
            }
            let b = map.remove(&format!("conv{i}.bias")).unwrap_or_else(|| Tensor::zeros([1, cout, 1, 1]));
            if b.shape() != [1, cout, 1, 1] {
                return Err(Error::Format(format!("conv{i}.bias has the wrong shape")));
            }
            weights.push(w);
            biases.push(b);
            cin = cout;
        }
        Ok(FeatureExtractor { weights, biases })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_named(read_tensors(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut named = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            named.push((format!("conv{i}.weight"), w.clone()));
            named.push((format!("conv{i}.bias"), b.clone()));
        }
        write_tensors(BufWriter::new(File::create(path)?), &named)?;
        Ok(())
    }

    /// Records the four taps of `x` `[N, 3, H, W]`. The filters enter the
    /// tape as constants.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 4], TensorError> {
        let [_, _, h, w] = tape.shape(x);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(TensorError::Invalid {
                op: "features",
                msg: format!("image sides must be multiples of 8, got {w}x{h}"),
            });
        }
        let conv = |tape: &mut Tape<T>, x: Var, i: usize| -> Result<Var, TensorError> {
            let wv = tape.constant(self.weights[i].cast());
            let bv = tape.constant(self.biases[i].cast());
            let y = tape.conv2d(x, wv, Some(bv), 1, 1, T::one())?;
            Ok(tape.leaky_relu(y, T::zero()))
        };
        let t0 = conv(tape, x, 0)?;
        let t1 = conv(tape, t0, 1)?;
        let mut h = tape.avg_pool(t1, 2)?;
        h = conv(tape, h, 2)?;
        h = tape.avg_pool(h, 2)?;
        let t2 = conv(tape, h, 3)?;
        let h = tape.avg_pool(t2, 2)?;
        let t3 = conv(tape, h, 4)?;
        Ok([t0, t1, t2, t3])
    }

    /// Tap values for a batch of images already in comparison space.
    pub fn features<T: Real>(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4], Error> {
        let mut tape = Tape::<T>::new();
        let xv = tape.constant(x.clone());
        let taps = self.record(&mut tape, xv)?;
        Ok(taps.map(|t| tape.value(t).clone()))
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::seeded(DEFAULT_FEATURE_SEED)
    }
}

pub const DEFAULT_FEATURE_SEED: u64 = 0xfea7;

fn image_tensor<T: Real>(images: &[&Image], space: CompareSpace) -> Result<Tensor<T>, Error> {
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Config("images differ in size".into()));
        }
        data.extend(img.to_planes().into_iter().map(|v| T::from_f64(space.apply(v))));
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data)?)
}

/// Mean squared difference over all pixels and channels, in `space`.
pub fn pixel_loss(a: &Image, b: &Image, space: CompareSpace) -> Result<f64, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config("image sizes differ".into()));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (space.apply(p[c]) - space.apply(q[c])).powi(2)).sum::<f64>())
        .sum();
    Ok(s / (3 * a.data.len()) as f64)
}

/// `sum_j layers[j] * |F_j(a) - F_j(b)|^2`, both images taken to `space`
/// first.
pub fn perceptual_loss(
    extractor: &FeatureExtractor,
    a: &Image,
    b: &Image,
    layers: &[f64; 4],
    space: CompareSpace,
) -> Result<f64, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config("image sizes differ".into()));
    }
    let fa = extractor.features::<f64>(&image_tensor(&[a], space)?)?;
    let fb = extractor.features::<f64>(&image_tensor(&[b], space)?)?;
    Ok((0..4)
        .map(|j| {
            let d: f64 = fa[j].data().iter().zip(fb[j].data()).map(|(x, y)| (x - y).powi(2)).sum();
            layers[j] * d
        })
        .sum())
}

/// The three numbers reported for every evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub pixel: f64,
    /// Weighted feature term before multiplication by `percept_weight`.
    pub percept: f64,
}

/// Photographs and geometry of a fit, preprocessed once.
///
/// An embedding objective ([`Objective::embedding`]) replaces the pixel term
/// by the mean squared difference to target maps, and compares features of
/// one canonical rendering.
pub struct Objective<'a, T: Real> {
    pub loss: LossConfig,
    pub extractor: &'a FeatureExtractor,
    geoms: Vec<ViewGeometry>,
    target: Tensor<T>,
    target_taps: [Tensor<T>; 4],
    map_target: Option<Tensor<T>>,
    width: usize,
    height: usize,
}

/// Values recorded on a tape by [`Objective::record`].
struct Recorded {
    /// Sum over views of the per-view mean squared pixel error, or the map
    /// error when embedding.
    pixel: Var,
    /// Unweighted squared distance at each tap, summed over views.
    taps: [Var; 4],
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(views: &[CaptureView], loss: &LossConfig, extractor: &'a FeatureExtractor) -> Result<Self, Error> {
        if views.is_empty() {
            return Err(Error::Config("a fit needs at least one view".into()));
        }
        loss.validate()?;
        for v in views {
            v.validate()?;
        }
        let (width, height) = views[0].resolution();
        let imgs: Vec<&Image> = views.iter().map(|v| &v.image).collect();
        let target = image_tensor::<T>(&imgs, loss.space)?;
        let target_taps = extractor.features(&target)?;
        Ok(Objective {
            loss: loss.clone(),
            extractor,
            geoms: views.iter().map(|v| v.geometry()).collect(),
            target,
            target_taps,
            map_target: None,
            width,
            height,
        })
    }

    /// Map-space objective towards `target`, plus the feature term on
    /// [`canonical_view`].
    pub fn embedding(target: &SvbrdfMaps, loss: &LossConfig, extractor: &'a FeatureExtractor) -> Result<Self, Error> {
        target.validate()?;
        if target.width != target.height {
            return Err(Error::Config("embedding needs square maps".into()));
        }
        let mut view = canonical_view(target.width)?;
        view.image = crate::render::render(target, &view)?;
        let mut obj = Self::new(&[view], loss, extractor)?;
        obj.map_target = Some(maps_to_tensor(target));
        Ok(obj)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn record(&self, tape: &mut Tape<T>, maps: Var) -> Result<Recorded, Error> {
        let [_, _, h, w] = tape.shape(maps);
        if (w, h) != (self.width, self.height) {
            return Err(Error::Config(format!(
                "maps are {w}x{h} but the photographs are {}x{}",
                self.width, self.height
            )));
        }
        let rendered = record_render(tape, maps, &self.geoms)?;
        let x = match self.loss.space {
            CompareSpace::Linear => rendered,
            CompareSpace::Gamma => {
                tape.tone_gamma(rendered, T::from_f64(TONE_FLOOR), T::from_f64(1.0 / DISPLAY_GAMMA))
            }
        };
        let pixel = match &self.map_target {
            Some(t) => tape.sq_dist(maps, t.clone(), true)?,
            None => {
                let sq = tape.sq_dist(x, self.target.clone(), false)?;
                tape.scale(sq, T::from_f64(1.0 / (3 * w * h) as f64))
            }
        };
        let f = self.extractor.record(tape, x)?;
        let mut taps = [pixel; 4];
        for j in 0..4 {
            taps[j] = tape.sq_dist(f[j], self.target_taps[j].clone(), false)?;
        }
        Ok(Recorded { pixel, taps })
    }

    /// Scalar to differentiate, weighting taps with `layers`.
    fn scalar(&self, tape: &mut Tape<T>, r: &Recorded, layers: &[f64; 4]) -> Result<Var, Error> {
        let mut s = tape.scale(r.pixel, T::from_f64(self.loss.pixel_weight));
        for j in 0..4 {
            let t = tape.scale(r.taps[j], T::from_f64(self.loss.percept_weight * layers[j]));
            s = tape.add(s, t)?;
        }
        Ok(s)
    }

    /// Reported numbers, always using the `w+` tap weights so that values
    /// from different phases are comparable.
    fn parts(&self, tape: &Tape<T>, r: &Recorded) -> LossParts {
        let pixel = tape.value(r.pixel).data()[0].as_f64();
        let percept: f64 = (0..4)
            .map(|j| self.loss.w_plus_layers[j] * tape.value(r.taps[j]).data()[0].as_f64())
            .sum();
        LossParts {
            total: self.loss.pixel_weight * pixel + self.loss.percept_weight * percept,
            pixel,
            percept,
        }
    }

    /// Objective of explicit maps (direct mode).
    pub fn evaluate_maps(&self, maps: &SvbrdfMaps) -> Result<LossParts, Error> {
        let mut tape = Tape::<T>::new();
        let m = tape.constant(maps_to_tensor(maps));
        let r = self.record(&mut tape, m)?;
        Ok(self.parts(&tape, &r))
    }

    /// Objective of the generator output at `latent` (latent mode).
    pub fn evaluate_latent(&self, g: &Generator, latent: &LatentState) -> Result<LossParts, Error> {
        latent.check(&g.config)?;
        let mut tape = Tape::<T>::new();
        let vars = g.leaves(&mut tape, false);
        let w = tape.constant(latent.w_plus.cast());
        let noise: Vec<Var> = latent.noise.iter().map(|n| tape.constant(n.cast())).collect();
        let maps = g.synthesis_tape(&mut tape, &vars, w, &noise)?;
        let r = self.record(&mut tape, maps)?;
        Ok(self.parts(&tape, &r))
    }
}

/// Objective of explicit maps under `views`.
pub fn total_objective(
    maps: &SvbrdfMaps,
    views: &[CaptureView],
    loss: &LossConfig,
    extractor: &FeatureExtractor,
) -> Result<LossParts, Error> {
    Objective::<f64>::new(views, loss, extractor)?.evaluate_maps(maps)
}

/// Flash straight above the sample centre, used to compare appearance when
/// embedding maps.
pub fn canonical_view(resolution: usize) -> Result<CaptureView, Error> {
    make_collocated_view(CAPTURE_DISTANCE, CAPTURE_INTENSITY, resolution, [0.0, 0.0])
}

/// Flash distance of the synthetic capture setup, in sample widths.
pub const CAPTURE_DISTANCE: f64 = 1.2;
/// Flash intensity of the synthetic capture setup.
pub const CAPTURE_INTENSITY: f64 = 2.0;
/// Spacing of the 3x3 flash grid of the synthetic capture setup.
pub const CAPTURE_SPACING: f64 = 0.35;

/// The 3x3 flash grid of the synthetic capture setup, with blank images.
pub fn synthetic_capture(resolution: usize) -> Result<Vec<CaptureView>, Error> {
    crate::render::capture_grid(CAPTURE_DISTANCE, CAPTURE_INTENSITY, resolution, CAPTURE_SPACING)
}

/// Two held-out setups with the camera above the centre and the light
/// off to the side, so that no flash photograph shares their geometry.
pub fn novel_views(resolution: usize) -> Result<Vec<CaptureView>, Error> {
    let cam = glam::DVec3::new(0.0, 0.0, CAPTURE_DISTANCE);
    [[0.6, 0.45, 1.0], [-0.5, -0.55, 1.1]]
        .into_iter()
        .map(|l| {
            CaptureView::new(
                cam,
                glam::DVec3::from_array(l),
                CAPTURE_INTENSITY,
                Image::black(resolution, resolution),
            )
        })
        .collect()
}

/// Fills every view's image with the rendering of `maps`.
pub fn render_views(maps: &SvbrdfMaps, views: &mut [CaptureView]) -> Result<(), Error> {
    for v in views {
        v.image = crate::render::render(maps, v)?;
    }
    Ok(())
}

/// Uniform mid-gray dielectric, the starting point of direct fits.
pub fn neutral_material(resolution: usize) -> SvbrdfMaps {
    SvbrdfMaps::uniform(resolution, resolution, [0.5; 3], [0.0, 0.0], 0.5, [0.04; 3])
}

/// Which latent variables an optimization may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSpace {
    /// One `w` shared by every style column; noise fixed.
    W,
    /// Independent style columns; noise fixed.
    WPlus,
    /// Style columns and noise maps.
    WPlusNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// `w+` for the first half of the iterations, then noise.
    S1,
    /// Both at once.
    S2,
    /// Alternate every `period` iterations, starting with `w+`.
    S3,
}

/// Variables updated at iteration `i` of `n`, and the tap weights used.
fn schedule(strategy: Strategy, space: LatentSpace, period: usize, i: usize, n: usize) -> (bool, bool, Phase) {
    if space != LatentSpace::WPlusNoise {
        return (true, false, Phase::WPlus);
    }
    match strategy {
        Strategy::S1 if i < n.div_ceil(2) => (true, false, Phase::WPlus),
        Strategy::S1 => (false, true, Phase::Noise),
        Strategy::S2 => (true, true, Phase::WPlus),
        Strategy::S3 if (i / period) % 2 == 0 => (true, false, Phase::WPlus),
        Strategy::S3 => (false, true, Phase::Noise),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Mean of the mapping network's output, zero noise.
    MeanW,
    /// The stored low-roughness preset.
    LowRough,
    /// Run from both `MeanW` and `LowRough` and keep the lower final loss.
    Dual,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub strategy: Strategy,
    pub space: LatentSpace,
    pub period: usize,
    pub iterations: usize,
    /// Adam step size for latent variables.
    pub lr: f64,
    /// Adam step size for per-pixel parameters (direct fits and refinement).
    pub direct_lr: f64,
    pub init: InitKind,
    /// Pixel-space iterations run after a latent fit (0 = none).
    pub refine_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            strategy: Strategy::S3,
            space: LatentSpace::WPlusNoise,
            period: 10,
            iterations: 2000,
            lr: 0.01,
            direct_lr: 0.05,
            init: InitKind::MeanW,
            refine_iterations: 0,
        }
    }
}

/// Iterations of the post-refinement when it is switched on without a count.
pub const DEFAULT_REFINE_ITERATIONS: usize = 500;

impl FitConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 || self.period == 0 {
            return Err(Error::Config("iterations and period must be at least 1".into()));
        }
        for lr in [self.lr, self.direct_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One trace line: the best values seen up to and including `iter`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub total: f64,
    pub pixel: f64,
    pub percept: f64,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), Error> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "iter,total,pixel,percept")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.iter, r.total, r.pixel, r.percept)?;
    }
    f.flush()?;
    Ok(())
}

/// Keeps the best iterate and the monotone trace.
struct Best<S> {
    state: S,
    parts: LossParts,
    trace: Vec<TraceRow>,
    initial: Option<LossParts>,
}

impl<S: Clone> Best<S> {
    fn new(state: S) -> Self {
        Best {
            state,
            parts: LossParts {
                total: f64::INFINITY,
                pixel: f64::INFINITY,
                percept: f64::INFINITY,
            },
            trace: Vec::new(),
            initial: None,
        }
    }

    fn offer(&mut self, iter: usize, parts: LossParts, state: impl FnOnce() -> S) {
        self.initial.get_or_insert(parts);
        if parts.total < self.parts.total {
            self.parts = parts;
            self.state = state();
        }
        self.trace.push(TraceRow {
            iter,
            total: self.parts.total,
            pixel: self.parts.pixel,
            percept: self.parts.percept,
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectFit {
    pub maps: SvbrdfMaps,
    pub initial: LossParts,
    pub final_loss: LossParts,
    pub trace: Vec<TraceRow>,
    /// Why the fit stopped before its iteration budget, if it did.
    pub stopped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFit {
    pub maps: SvbrdfMaps,
    pub latent: LatentState,
    pub initial: LossParts,
    pub final_loss: LossParts,
    pub trace: Vec<TraceRow>,
    pub stopped: Option<String>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Unconstrained parameters that [`Tape::material_range`] maps back to
/// `maps` (up to clamping at the open ends of each range).
pub fn maps_to_raw(maps: &SvbrdfMaps, r_min: f64) -> Tensor<f64> {
    let planes = maps.to_planes();
    let hw = maps.pixels();
    let raw = planes
        .iter()
        .enumerate()
        .map(|(i, &v)| match i / hw {
            3 | 4 => v.clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh(),
            5 => logit((v - r_min) / (1.0 - r_min)),
            _ => logit(v),
        })
        .collect();
    Tensor::from_vec([1, 9, maps.height, maps.width], raw).expect("plane count")
}

fn non_finite(what: &str, iter: usize) -> String {
    format!("{what} became non-finite at iteration {iter}")
}

/// Per-pixel optimization of the maps, starting at `init`. Every iterate
/// is evaluated with the current parameters taken as is, so an `init` that
/// already explains the photographs is returned unchanged.
pub fn fit_direct(
    views: &[CaptureView],
    init: &SvbrdfMaps,
    cfg: &FitConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
) -> Result<DirectFit, Error> {
    cfg.validate()?;
    init.validate()?;
    let obj = Objective::<f64>::new(views, loss, extractor)?;
    let r_min = crate::material::R_MIN;
    let start = obj.evaluate_maps(init)?;
    let mut best = Best::new(init.clone());
    best.offer(0, start, || init.clone());
    let mut stopped = None;
    if start.total == 0.0 {
        return Ok(DirectFit {
            maps: best.state,
            initial: start,
            final_loss: start,
            trace: best.trace,
            stopped,
        });
    }
    let mut raw = vec![maps_to_raw(init, r_min)];
    let mut adam = Adam::new(cfg.adam(cfg.direct_lr), &raw);
    for i in 0..cfg.iterations {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(raw[0].clone(), true);
        let m = tape.material_range(x, r_min)?;
        let r = obj.record(&mut tape, m)?;
        let parts = obj.parts(&tape, &r);
        if !parts.total.is_finite() {
            stopped = Some(non_finite("loss", i));
            break;
        }
        // iteration 0 re-evaluates the init through the range mapping
        if i > 0 {
            best.offer(i, parts, || {
                let mut maps = maps_from_tensor(tape.value(m)).expect("shape checked");
                maps.snap_to_domain();
                maps
            });
        }
        let s = obj.scalar(&mut tape, &r, &obj.loss.w_plus_layers)?;
        let mut grads = tape.backward(s)?;
        let g = grads.take_or_zeros(x, raw[0].shape());
        if !g.is_finite() {
            stopped = Some(non_finite("gradient", i));
            break;
        }
        adam.step(&mut raw, &[g])?;
    }
    if stopped.is_none() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(raw[0].clone());
        let m = tape.material_range(x, r_min)?;
        let r = obj.record(&mut tape, m)?;
        let parts = obj.parts(&tape, &r);
        if parts.total.is_finite() {
            best.offer(cfg.iterations, parts, || {
                let mut maps = maps_from_tensor(tape.value(m)).expect("shape checked");
                maps.snap_to_domain();
                maps
            });
        }
    }
    Ok(DirectFit {
        initial: start,
        final_loss: best.parts,
        maps: best.state,
        trace: best.trace,
        stopped,
    })
}

/// Loss and gradients of the latent objective at one iterate.
struct LatentEval<T: Real> {
    parts: LossParts,
    maps: Tensor<T>,
    d_w: Option<Tensor<T>>,
    d_noise: Vec<Tensor<T>>,
}

/// Evaluates the latent objective and the requested gradients. With
/// `tied`, `w` is a single `[1, L, 1, 1]` vector shared by all columns.
#[allow(clippy::too_many_arguments)]
fn latent_step<T: Real>(
    g: &Generator,
    obj: &Objective<'_, T>,
    w: &Tensor<T>,
    tied: bool,
    noise: &[Tensor<T>],
    want_w: bool,
    want_noise: bool,
    layers: &[f64; 4],
) -> Result<LatentEval<T>, Error> {
    let mut tape = Tape::<T>::new();
    let vars = g.leaves(&mut tape, false);
    let wv = tape.leaf(w.clone(), want_w);
    let wp = if tied { tape.replicate(wv, g.config.style_slots()) } else { wv };
    let nv: Vec<Var> = noise.iter().map(|n| tape.leaf(n.clone(), want_noise)).collect();
    let maps = g.synthesis_tape(&mut tape, &vars, wp, &nv)?;
    let r = obj.record(&mut tape, maps)?;
    let parts = obj.parts(&tape, &r);
    let maps = tape.value(maps).clone();
    if !(want_w || want_noise) || !parts.total.is_finite() {
        return Ok(LatentEval {
            parts,
            maps,
            d_w: None,
            d_noise: Vec::new(),
        });
    }
    let s = obj.scalar(&mut tape, &r, layers)?;
    let mut grads = tape.backward(s)?;
    let d_w = want_w.then(|| grads.take_or_zeros(wv, w.shape()));
    let d_noise = if want_noise {
        nv.iter().zip(noise).map(|(&v, n)| grads.take_or_zeros(v, n.shape())).collect()
    } else {
        Vec::new()
    };
    Ok(LatentEval {
        parts,
        maps,
        d_w,
        d_noise,
    })
}

/// Objective and its gradient with respect to `w+` and every noise map,
/// using the `w+` tap weights. Exposed for gradient checks.
pub fn latent_gradient<T: Real>(
    g: &Generator,
    obj: &Objective<'_, T>,
    w_plus: &Tensor<T>,
    noise: &[Tensor<T>],
) -> Result<(LossParts, Tensor<T>, Vec<Tensor<T>>), Error> {
    let layers = obj.loss.w_plus_layers;
    let e = latent_step(g, obj, w_plus, false, noise, true, true, &layers)?;
    let d_w = e.d_w.ok_or_else(|| Error::Numerical("objective is not finite".into()))?;
    Ok((e.parts, d_w, e.d_noise))
}

/// Average of the style columns, used to start a tied (`W`) fit.
fn column_mean(g: &Generator, w_plus: &Tensor<f32>) -> Tensor<f32> {
    let (s, l) = (g.config.style_slots(), g.config.latent_dim);
    let d = w_plus.data();
    let data = (0..l)
        .map(|k| ((0..s).map(|c| d[c * l + k] as f64).sum::<f64>() / s as f64) as f32)
        .collect();
    Tensor::from_vec([1, l, 1, 1], data).expect("shape")
}

/// Optimizes latents against `obj` from `init`, following `cfg.strategy`
/// within `cfg.space`, and returns the best iterate seen.
pub fn optimize_latent(g: &Generator, obj: &Objective<'_, f32>, init: &LatentState, cfg: &FitConfig) -> Result<LatentFit, Error> {
    cfg.validate()?;
    init.check(&g.config)?;
    let tied = cfg.space == LatentSpace::W;
    let mut w = vec![if tied { column_mean(g, &init.w_plus) } else { init.w_plus.clone() }];
    let mut noise = init.noise.clone();
    let mut adam_w = Adam::new(cfg.adam(cfg.lr), &w);
    let mut adam_n = Adam::new(cfg.adam(cfg.lr), &noise);
    let mut best = Best::new((init.clone(), None));
    let mut stopped = None;
    for i in 0..=cfg.iterations {
        let (want_w, want_noise, phase) = if i < cfg.iterations {
            schedule(cfg.strategy, cfg.space, cfg.period, i, cfg.iterations)
        } else {
            (false, false, Phase::WPlus)
        };
        let e = latent_step(g, obj, &w[0], tied, &noise, want_w, want_noise, &phase.layers(&obj.loss))?;
        if !e.parts.total.is_finite() {
            stopped = Some(non_finite("loss", i));
            break;
        }
        best.offer(i, e.parts, || {
            let w_plus = if tied {
                crate::generator::replicate(&g.config, &w[0]).expect("shape")
            } else {
                w[0].clone()
            };
            let latent = LatentState {
                w_plus,
                noise: noise.clone(),
            };
            (latent, Some(e.maps.clone()))
        });
        if i == cfg.iterations || e.parts.total == 0.0 {
            break;
        }
        if let Some(d) = e.d_w {
            if !d.is_finite() {
                stopped = Some(non_finite("gradient", i));
                break;
            }
            adam_w.step(&mut w, &[d])?;
        }
        if want_noise {
            if e.d_noise.iter().any(|d| !d.is_finite()) {
                stopped = Some(non_finite("gradient", i));
                break;
            }
            adam_n.step(&mut noise, &e.d_noise)?;
        }
    }
    let (latent, maps) = best.state;
    let maps = match maps {
        Some(t) => {
            let mut m = maps_from_tensor(&t)?;
            m.snap_to_domain();
            m
        }
        None => g.synthesize(&latent)?,
    };
    Ok(LatentFit {
        maps,
        latent,
        initial: best.initial.unwrap_or(best.parts),
        final_loss: best.parts,
        trace: best.trace,
        stopped,
    })
}

/// Latent-space fit of photographs from `init`.
pub fn fit_latent(
    g: &Generator,
    views: &[CaptureView],
    init: &LatentState,
    cfg: &FitConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
) -> Result<LatentFit, Error> {
    let (w, h) = views.first().map(|v| v.resolution()).unwrap_or((0, 0));
    let r = g.config.resolution();
    if (w, h) != (r, r) && !views.is_empty() {
        return Err(Error::Config(format!(
            "photographs are {w}x{h} but the generator makes {r}x{r} maps"
        )));
    }
    let obj = Objective::<f32>::new(views, loss, extractor)?;
    optimize_latent(g, &obj, init, cfg)
}

/// Latents whose decoded maps approximate `target`, starting from `init`.
/// The objective is the mean squared map difference plus the feature term
/// on a [`canonical_view`] rendering.
pub fn embed_maps(
    g: &Generator,
    target: &SvbrdfMaps,
    init: &LatentState,
    cfg: &FitConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
) -> Result<LatentFit, Error> {
    let r = g.config.resolution();
    if (target.width, target.height) != (r, r) {
        return Err(Error::Config(format!(
            "target maps are {}x{} but the generator makes {r}x{r} maps",
            target.width, target.height
        )));
    }
    let obj = Objective::<f32>::embedding(target, loss, extractor)?;
    optimize_latent(g, &obj, init, cfg)
}

/// Samples used to estimate the mean `w`.
pub const MEAN_W_SAMPLES: usize = 10_000;
pub const MEAN_W_SEED: u64 = 0x3ea7;

/// The constant material the low-roughness preset is embedded from.
pub fn low_rough_material(resolution: usize) -> SvbrdfMaps {
    SvbrdfMaps::uniform(resolution, resolution, [0.5; 3], [0.0, 0.0], 0.1, [0.5; 3])
}

/// Embeds [`low_rough_material`] from the mean latent; the result is what
/// [`InitKind::LowRough`] loads.
pub fn make_low_rough_preset(
    g: &Generator,
    cfg: &FitConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
) -> Result<LatentFit, Error> {
    let target = low_rough_material(g.config.resolution());
    let init = g.mean_latent(MEAN_W_SAMPLES, MEAN_W_SEED)?;
    embed_maps(g, &target, &init, cfg, loss, extractor)
}

/// Starting latents for `kind`. `preset` is the low-roughness preset file;
/// [`InitKind::Dual`] has no single starting point and is rejected here.
pub fn resolve_init(kind: &InitKind, g: &Generator, preset: Option<&Path>) -> Result<LatentState, Error> {
    let load = |p: &Path| -> Result<LatentState, Error> {
        let l = LatentState::load(p)?;
        l.check(&g.config)?;
        Ok(l)
    };
    match kind {
        InitKind::MeanW => g.mean_latent(MEAN_W_SAMPLES, MEAN_W_SEED),
        InitKind::LowRough => {
            let p = preset.ok_or_else(|| Error::Config("the low-roughness init needs a preset file".into()))?;
            if !p.exists() {
                return Err(Error::Config(format!("low-roughness preset {} not found", p.display())));
            }
            load(p)
        }
        InitKind::File(p) => load(p),
        InitKind::Dual => Err(Error::Config("dual init runs two fits; use fit()".into())),
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    /// Latent fit that was kept.
    pub latent: LatentFit,
    /// The init the kept fit started from.
    pub init: InitKind,
    /// Final loss of every branch that ran, in run order.
    pub branches: Vec<(InitKind, f64)>,
    /// Pixel-space refinement of the kept fit, when requested.
    pub refined: Option<DirectFit>,
}

impl FitOutcome {
    /// Maps after refinement, or the decoded latent fit.
    pub fn maps(&self) -> &SvbrdfMaps {
        self.refined.as_ref().map_or(&self.latent.maps, |r| &r.maps)
    }
}

/// Latent fit with init resolution (including the two-branch `Dual` init)
/// and optional post-refinement.
pub fn fit(
    g: &Generator,
    views: &[CaptureView],
    cfg: &FitConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
    preset: Option<&Path>,
) -> Result<FitOutcome, Error> {
    let kinds = match &cfg.init {
        InitKind::Dual => vec![InitKind::MeanW, InitKind::LowRough],
        k => vec![k.clone()],
    };
    let mut branches = Vec::new();
    let mut kept: Option<(LatentFit, InitKind)> = None;
    for k in kinds {
        let init = resolve_init(&k, g, preset)?;
        let f = fit_latent(g, views, &init, cfg, loss, extractor)?;
        branches.push((k.clone(), f.final_loss.total));
        if kept.as_ref().is_none_or(|(b, _)| f.final_loss.total < b.final_loss.total) {
            kept = Some((f, k));
        }
    }
    let (latent, init) = kept.expect("at least one branch");
    let refined = if cfg.refine_iterations > 0 {
        let rcfg = FitConfig {
            iterations: cfg.refine_iterations,
            ..cfg.clone()
        };
        Some(fit_direct(views, &latent.maps, &rcfg, loss, extractor)?)
    } else {
        None
    };
    Ok(FitOutcome {
        latent,
        init,
        branches,
        refined,
    })
}
