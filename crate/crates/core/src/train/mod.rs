//! Adversarial training of the generator on procedural maps.
//!
//! Losses are the non-saturating logistic pair with an R1 penalty on real
//! samples:
//!
//! ```text
//! loss_d = softplus(D(fake)) + softplus(-D(real)) + gamma/2 * E|grad_x D(real)|^2
//! loss_g = softplus(-D(fake))
//! ```
//!
//! The tape only supports one reverse pass, so the parameter gradient of the
//! R1 term is obtained without differentiating a backward pass. For a fixed
//! vector `v`, `<grad_x D(x), v>` is the directional derivative of `D` along
//! `v`. Pushing `v` forward through the same layers (no biases, activations
//! replaced by their slopes at the real input) records that derivative on a
//! fresh tape, and its parameter gradient at `v = grad_x D(x)` is half the
//! parameter gradient of `|grad_x D(x)|^2`.

mod dataset;

pub use dataset::{
    apply_augment, augment, blend_maps, generate_family, generate_procedural_dataset, AugmentConfig,
    AugmentParams, Family, ProceduralDatasetConfig, ProceduralSample,
};

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{Generator, GeneratorConfig, GeneratorVars};
use crate::material::SvbrdfMaps;
use crate::render::maps_to_tensor;
use crate::tensor::{read_tensors, write_tensors, Adam, AdamConfig, AdamState, Real, Tape, Tensor, TensorError, Var};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Feature channels at each resolution, from `resolution` down to 4.
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl DiscriminatorConfig {
    /// Mirrors the generator's channel schedule.
    pub fn for_generator(g: &GeneratorConfig) -> Self {
        DiscriminatorConfig {
            resolution: g.resolution(),
            channels: g.channels.iter().rev().copied().collect(),
            slope: 0.2,
        }
    }

    pub fn param_specs(&self) -> Vec<(String, [usize; 4])> {
        let c = &self.channels;
        let top = c[0];
        let last = *c.last().expect("non-empty");
        let mut v = vec![("from_maps.weight".to_string(), [top, 9, 1, 1]), ("from_maps.bias".into(), [1, top, 1, 1])];
        for i in 0..c.len() - 1 {
            v.push((format!("block.{i}.conv0.weight"), [c[i], c[i], 3, 3]));
            v.push((format!("block.{i}.conv0.bias"), [1, c[i], 1, 1]));
            v.push((format!("block.{i}.conv1.weight"), [c[i + 1], c[i], 3, 3]));
            v.push((format!("block.{i}.conv1.bias"), [1, c[i + 1], 1, 1]));
        }
        v.push(("final.conv.weight".into(), [last, last, 3, 3]));
        v.push(("final.conv.bias".into(), [1, last, 1, 1]));
        v.push(("final.fc.weight".into(), [last, last * 16, 1, 1]));
        v.push(("final.fc.bias".into(), [1, last, 1, 1]));
        v.push(("final.out.weight".into(), [1, last, 1, 1]));
        v.push(("final.out.bias".into(), [1, 1, 1, 1]));
        v
    }
}

/// Convolutional critic: maps `[N, 9, R, R]` to one logit per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: Vec<Tensor<f32>>,
}

/// What a discriminator pass computes.
enum Pass<'a, T: Real> {
    /// Ordinary forward; optionally records each activation's slope mask.
    Primal(Option<&'a mut Vec<Tensor<T>>>),
    /// Directional derivative along the input, using recorded masks.
    Tangent(&'a [Tensor<T>]),
}

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self, Error> {
        let expected = config.resolution.trailing_zeros() as usize - 1;
        if !config.resolution.is_power_of_two() || config.resolution < 4 || config.channels.len() != expected {
            return Err(Error::Config(format!(
                "discriminator for resolution {} needs {expected} channel counts",
                config.resolution
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    Tensor::zeros(shape)
                } else {
                    Tensor::randn(shape, &mut rng)
                }
            })
            .collect();
        Ok(Discriminator { config, params })
    }

    pub fn leaves<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.cast(), requires_grad)).collect()
    }

    fn run<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, mut pass: Pass<'_, T>) -> Result<Var, TensorError> {
        let slope = T::from_f64(self.config.slope);
        let act_gain = T::from_f64(2f64.sqrt());
        let tangent = matches!(pass, Pass::Tangent(_));
        let mut mask_idx = 0;
        let gain = |fan_in: usize| T::from_f64(1.0 / (fan_in as f64).sqrt());
        let mut act = |tape: &mut Tape<T>, x: Var| -> Result<Var, TensorError> {
            let y = match &mut pass {
                Pass::Primal(rec) => {
                    if let Some(rec) = rec.as_deref_mut() {
                        rec.push(tape.leaky_relu_mask(x, slope));
                    }
                    tape.leaky_relu(x, slope)
                }
                Pass::Tangent(masks) => {
                    let m = masks.get(mask_idx).cloned().ok_or(TensorError::Invalid {
                        op: "discriminator",
                        msg: "too few recorded activation masks".into(),
                    })?;
                    mask_idx += 1;
                    tape.mul_const(x, m)?
                }
            };
            Ok(tape.scale(y, act_gain))
        };
        let bias = |v: Var| if tangent { None } else { Some(v) };
        let c = &self.config.channels;
        let mut h = tape.conv2d(x, p[0], bias(p[1]), 1, 0, gain(9))?;
        h = act(tape, h)?;
        let mut k = 2;
        for i in 0..c.len() - 1 {
            h = tape.conv2d(h, p[k], bias(p[k + 1]), 1, 1, gain(c[i] * 9))?;
            h = act(tape, h)?;
            h = tape.conv2d(h, p[k + 2], bias(p[k + 3]), 1, 1, gain(c[i] * 9))?;
            h = act(tape, h)?;
            h = tape.avg_pool(h, 2)?;
            k += 4;
        }
        let last = *c.last().expect("non-empty");
        h = tape.conv2d(h, p[k], bias(p[k + 1]), 1, 1, gain(last * 9))?;
        h = act(tape, h)?;
        h = tape.linear(h, p[k + 2], bias(p[k + 3]), gain(last * 16))?;
        h = act(tape, h)?;
        tape.linear(h, p[k + 4], bias(p[k + 5]), gain(last))
    }

    /// Logits `[N, 1, 1, 1]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        self.run(tape, p, x, Pass::Primal(None))
    }

    /// Logits plus the activation masks needed by [`Discriminator::tangent`].
    pub fn forward_recording<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
    ) -> Result<(Var, Vec<Tensor<T>>), TensorError> {
        let mut masks = Vec::new();
        let out = self.run(tape, p, x, Pass::Primal(Some(&mut masks)))?;
        Ok((out, masks))
    }

    /// Per-sample directional derivative `<grad_x D(x), v>` as `[N, 1, 1, 1]`,
    /// where `x` is the input whose masks were recorded.
    pub fn tangent<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], v: Var, masks: &[Tensor<T>]) -> Result<Var, TensorError> {
        self.run(tape, p, v, Pass::Tangent(masks))
    }

    /// `grad_x sum D(x)` for a batch, parameters held fixed.
    pub fn input_gradient<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>, Error> {
        let mut tape = Tape::<T>::new();
        let p = self.leaves(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.forward(&mut tape, &p, xv)?;
        let s = tape.sum(out);
        let mut g = tape.backward(s)?;
        Ok(g.take_or_zeros(xv, x.shape()))
    }

    /// `mean_i |grad_x D(x_i)|^2`.
    pub fn r1<T: Real>(&self, x: &Tensor<T>) -> Result<f64, Error> {
        let g = self.input_gradient(x)?;
        Ok(g.sq_norm() / x.shape()[0] as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub gamma: f64,
    /// R1 is evaluated every this many steps and scaled up accordingly.
    pub r1_interval: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::desk(),
            batch_size: 8,
            steps: 20_000,
            seed: 0,
            gamma: 10.0,
            r1_interval: 4,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            checkpoint_every: 1000,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// One metrics line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: f64,
}

impl StepLog {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss_g, self.loss_d, self.r1)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub last_r1: f64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, Error> {
        let generator = Generator::init(cfg.generator.clone(), cfg.seed)?;
        let discriminator =
            Discriminator::init(DiscriminatorConfig::for_generator(&cfg.generator), cfg.seed.wrapping_add(1))?;
        Ok(TrainState {
            adam_g: Adam::new(cfg.adam(), &generator.params),
            adam_d: Adam::new(cfg.adam(), &discriminator.params),
            generator,
            discriminator,
            step: 0,
            last_r1: 0.0,
        })
    }
}

fn random_latents(g: &GeneratorConfig, n: usize, rng: &mut impl Rng) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let z = Tensor::randn([n, g.latent_dim, 1, 1], rng);
    let noise = (0..g.style_slots())
        .map(|l| {
            let r = g.layer_resolution(l);
            Tensor::randn([n, 1, r, r], rng)
        })
        .collect();
    (z, noise)
}

/// Records `G(z, noise)` on `tape` with the given parameter handles.
fn generate(
    tape: &mut Tape<f32>,
    g: &Generator,
    vars: &GeneratorVars,
    z: Tensor<f32>,
    noise: &[Tensor<f32>],
) -> Result<Var, TensorError> {
    let n = z.shape()[0];
    let zv = tape.constant(z);
    let w = g.mapping_tape(tape, vars, zv)?;
    let wp = tape.replicate(w, g.config.style_slots());
    let nv: Vec<Var> = noise.iter().map(|t| tape.constant(t.clone())).collect();
    let out = g.synthesis_tape(tape, vars, wp, &nv)?;
    debug_assert_eq!(tape.shape(out)[0], n);
    Ok(out)
}

fn mean_softplus(tape: &mut Tape<f32>, logits: Var, sign: f32) -> Var {
    let s = tape.scale(logits, sign);
    let sp = tape.softplus(s);
    tape.mean(sp)
}

fn finite(what: &str, v: f64) -> Result<f64, Error> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} became non-finite ({v})")))
    }
}

/// One discriminator update followed by one generator update.
pub fn gan_train_step(state: &mut TrainState, real: &Tensor<f32>, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<StepLog, Error> {
    let n = real.shape()[0];
    if n == 0 {
        return Err(Error::Config("empty training batch".into()));
    }
    let gcfg = state.generator.config.clone();

    // discriminator
    let fake = {
        let (z, noise) = random_latents(&gcfg, n, rng);
        let mut tape = Tape::new();
        let gv = state.generator.leaves(&mut tape, false);
        let out = generate(&mut tape, &state.generator, &gv, z, &noise)?;
        tape.value(out).clone()
    };
    let do_r1 = cfg.gamma > 0.0 && cfg.r1_interval > 0 && state.step % cfg.r1_interval == 0;
    let grad_real = if do_r1 {
        Some(state.discriminator.input_gradient(real)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let dp = state.discriminator.leaves(&mut tape, true);
    let fv = tape.constant(fake);
    let rv = tape.constant(real.clone());
    let d_fake = state.discriminator.forward(&mut tape, &dp, fv)?;
    let (d_real, masks) = state.discriminator.forward_recording(&mut tape, &dp, rv)?;
    let lf = mean_softplus(&mut tape, d_fake, 1.0);
    let lr = mean_softplus(&mut tape, d_real, -1.0);
    let mut loss = tape.add(lf, lr)?;
    let adv = tape.value(loss).data()[0] as f64;
    if let Some(g) = grad_real {
        state.last_r1 = g.sq_norm() / n as f64;
        let gv = tape.constant(g);
        let t = state.discriminator.tangent(&mut tape, &dp, gv, &masks)?;
        let s = tape.sum(t);
        let k = cfg.gamma / n as f64 * cfg.r1_interval as f64;
        let pen = tape.scale(s, k as f32);
        loss = tape.add(loss, pen)?;
    }
    let loss_d = finite("discriminator loss", adv + 0.5 * cfg.gamma * state.last_r1)?;
    finite("R1 penalty", state.last_r1)?;
    let mut grads = tape.backward(loss)?;
    let dgrads: Vec<Tensor<f32>> = dp
        .iter()
        .zip(&state.discriminator.params)
        .map(|(v, p)| grads.take_or_zeros(*v, p.shape()))
        .collect();
    state.adam_d.step(&mut state.discriminator.params, &dgrads)?;

    // generator
    let (z, noise) = random_latents(&gcfg, n, rng);
    let mut tape = Tape::new();
    let gv = state.generator.leaves(&mut tape, true);
    let fake = generate(&mut tape, &state.generator, &gv, z, &noise)?;
    let dp = state.discriminator.leaves(&mut tape, false);
    let logits = state.discriminator.forward(&mut tape, &dp, fake)?;
    let lg = mean_softplus(&mut tape, logits, -1.0);
    let loss_g = finite("generator loss", tape.value(lg).data()[0] as f64)?;
    let mut grads = tape.backward(lg)?;
    let ggrads: Vec<Tensor<f32>> = gv
        .params
        .iter()
        .zip(&state.generator.params)
        .map(|(v, p)| grads.take_or_zeros(*v, p.shape()))
        .collect();
    state.adam_g.step(&mut state.generator.params, &ggrads)?;

    state.step += 1;
    Ok(StepLog {
        step: state.step,
        loss_g,
        loss_d,
        r1: state.last_r1,
    })
}

/// Per-step random stream; depends only on the seed and step index, which is
/// what makes resumed runs bit-identical.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    rng.set_stream(step);
    rng
}

/// Assembles an augmented `[B, 9, R, R]` batch.
pub fn sample_batch(data: &[SvbrdfMaps], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Tensor<f32>, Error> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let r = cfg.generator.resolution();
    let mut out = Vec::with_capacity(cfg.batch_size * 9 * r * r);
    for _ in 0..cfg.batch_size {
        let a = &data[rng.random_range(0..data.len())];
        let b = &data[rng.random_range(0..data.len())];
        if a.width != r || a.height != r {
            return Err(Error::Config(format!(
                "training maps are {}x{}, the generator produces {r}x{r}",
                a.width, a.height
            )));
        }
        let params = AugmentParams::random(&cfg.augment, r, rng);
        let m = apply_augment(a, Some(b), &params)?;
        out.extend(maps_to_tensor::<f32>(&m).into_data());
    }
    Ok(Tensor::from_vec([cfg.batch_size, 9, r, r], out)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    last_r1: f64,
    adam_g_t: Vec<u64>,
    adam_d_t: Vec<u64>,
    config: TrainConfig,
}

fn adam_entries(prefix: &str, adam: &Adam, out: &mut Vec<(String, Tensor<f32>)>) {
    for (i, s) in adam.states.iter().enumerate() {
        let len = s.m.len();
        out.push((format!("{prefix}.{i}.m"), Tensor::from_vec([len, 1, 1, 1], s.m.clone()).expect("len")));
        out.push((format!("{prefix}.{i}.v"), Tensor::from_vec([len, 1, 1, 1], s.v.clone()).expect("len")));
    }
}

fn restore_adam(
    prefix: &str,
    t: &[u64],
    named: &mut HashMap<String, Tensor<f32>>,
    cfg: AdamConfig,
) -> Result<Adam, Error> {
    let mut states = Vec::new();
    for (i, &t) in t.iter().enumerate() {
        let mut take = |k: &str| {
            named
                .remove(&format!("{prefix}.{i}.{k}"))
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {prefix}.{i}.{k}")))
        };
        let m = take("m")?.into_data();
        let v = take("v")?.into_data();
        states.push(AdamState { m, v, t });
    }
    Ok(Adam { config: cfg, states })
}

/// Writes the full training state to `path` (tensors) and `path.toml`.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<(), Error> {
    let mut named = Vec::new();
    for (name, t) in state.generator.named_params() {
        named.push((format!("g.{name}"), t));
    }
    for ((name, _), t) in state.discriminator.config.param_specs().into_iter().zip(&state.discriminator.params) {
        named.push((format!("d.{name}"), t.clone()));
    }
    adam_entries("adam_g", &state.adam_g, &mut named);
    adam_entries("adam_d", &state.adam_d, &mut named);
    write_tensors(BufWriter::new(File::create(path)?), &named)?;
    let meta = CheckpointMeta {
        step: state.step,
        last_r1: state.last_r1,
        adam_g_t: state.adam_g.states.iter().map(|s| s.t).collect(),
        adam_d_t: state.adam_d.states.iter().map(|s| s.t).collect(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path.with_extension("toml"), text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig), Error> {
    let text = std::fs::read_to_string(path.with_extension("toml"))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut named: HashMap<String, Tensor<f32>> = read_tensors(BufReader::new(File::open(path)?))?.into_iter().collect();
    let cfg = meta.config;
    let gnamed = cfg
        .generator
        .param_specs()
        .into_iter()
        .map(|(n, _)| {
            let t = named
                .remove(&format!("g.{n}"))
                .ok_or_else(|| Error::Format(format!("checkpoint is missing g.{n}")))?;
            Ok((n, t))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let generator = Generator::from_named(cfg.generator.clone(), gnamed)?;
    let dcfg = DiscriminatorConfig::for_generator(&cfg.generator);
    let mut dparams = Vec::new();
    for (n, shape) in dcfg.param_specs() {
        let t = named
            .remove(&format!("d.{n}"))
            .ok_or_else(|| Error::Format(format!("checkpoint is missing d.{n}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("checkpoint entry d.{n} has the wrong shape")));
        }
        dparams.push(t);
    }
    let adam_g = restore_adam("adam_g", &meta.adam_g_t, &mut named, cfg.adam())?;
    let adam_d = restore_adam("adam_d", &meta.adam_d_t, &mut named, cfg.adam())?;
    Ok((
        TrainState {
            generator,
            discriminator: Discriminator {
                config: dcfg,
                params: dparams,
            },
            adam_g,
            adam_d,
            step: meta.step,
            last_r1: meta.last_r1,
        },
        cfg,
    ))
}

/// Runs training until `cfg.steps`, starting from `state`. Appends one
/// `step,loss_g,loss_d,r1` line per step to `out_dir/metrics.csv`, writes
/// `out_dir/checkpoint.ntc` every `checkpoint_every` steps and at the end,
/// and returns the final generator. `on_step` sees every log line.
pub fn train_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &[SvbrdfMaps],
    out_dir: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Generator, Error> {
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.csv"))?,
    );
    let ckpt = out_dir.join("checkpoint.ntc");
    while state.step < cfg.steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let batch = sample_batch(data, cfg, &mut rng)?;
        let log = gan_train_step(&mut state, &batch, cfg, &mut rng)?;
        writeln!(metrics, "{}", log.csv())?;
        on_step(&log);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            metrics.flush()?;
            save_checkpoint(&ckpt, &state, cfg)?;
        }
    }
    metrics.flush()?;
    save_checkpoint(&ckpt, &state, cfg)?;
    state.generator.save(&out_dir.join("generator.ntc"))?;
    Ok(state.generator)
}

/// Fresh training run.
pub fn train(cfg: &TrainConfig, data: &[SvbrdfMaps], out_dir: &Path, on_step: impl FnMut(&StepLog)) -> Result<Generator, Error> {
    train_from(TrainState::new(cfg)?, cfg, data, out_dir, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            generator: GeneratorConfig::tiny(),
            batch_size: 2,
            steps: 6,
            seed: 9,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<SvbrdfMaps> {
        let cfg = ProceduralDatasetConfig {
            count: n,
            resolution: 8,
            seed: 1,
            ..Default::default()
        };
        generate_procedural_dataset(&cfg).unwrap().into_iter().map(|s| s.maps).collect()
    }

    fn small_disc(seed: u64, slope: f64) -> Discriminator {
        let cfg = DiscriminatorConfig {
            resolution: 8,
            channels: vec![3, 4],
            slope,
        };
        let mut d = Discriminator::init(cfg, seed).unwrap();
        // non-zero biases so that the tangent pass visibly skips them
        for (p, (name, _)) in d.params.iter_mut().zip(d.config.param_specs()) {
            if name.ends_with("bias") {
                *p = Tensor::randn(p.shape(), &mut ChaCha8Rng::seed_from_u64(seed + 100));
            }
        }
        d
    }

    #[test]
    fn discriminator_gives_one_logit_per_sample() {
        let d = small_disc(1, 0.2);
        let mut tape = Tape::<f32>::new();
        let p = d.leaves(&mut tape, false);
        let x = tape.constant(Tensor::randn([3, 9, 8, 8], &mut ChaCha8Rng::seed_from_u64(2)));
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), [3, 1, 1, 1]);
    }

    #[test]
    fn r1_of_a_linear_critic_is_the_squared_weight_norm() {
        // slope 1 makes every activation the identity, so D(x) = <k, x> + c
        let d = small_disc(3, 1.0);
        let dim = 9 * 64;
        let eval = |x: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let p = d.leaves(&mut tape, false);
            let xv = tape.constant(x);
            let y = d.forward(&mut tape, &p, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = eval(Tensor::zeros([1, 9, 8, 8]))[0];
        let mut k2 = 0.0;
        for i in 0..dim {
            let mut e = Tensor::<f64>::zeros([1, 9, 8, 8]);
            e.data_mut()[i] = 1.0;
            k2 += (eval(e)[0] - base).powi(2);
        }
        let x = Tensor::<f64>::randn([2, 9, 8, 8], &mut ChaCha8Rng::seed_from_u64(4));
        let r1 = d.r1(&x).unwrap();
        assert!((r1 - k2).abs() <= 1e-9 * k2, "{r1} vs {k2}");
    }

    #[test]
    fn tangent_pass_is_the_directional_derivative() {
        let d = small_disc(5, 0.2);
        let x = Tensor::<f64>::randn([2, 9, 8, 8], &mut ChaCha8Rng::seed_from_u64(6));
        let g = d.input_gradient(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = d.leaves(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (_, masks) = d.forward_recording(&mut tape, &p, xv).unwrap();
        let gv = tape.constant(g.clone());
        let t = d.tangent(&mut tape, &p, gv, &masks).unwrap();
        for s in 0..2 {
            let want: f64 = g.sample(s).iter().map(|v| v * v).sum();
            assert!((tape.value(t).data()[s] - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let d = small_disc(7, 0.2);
        let x = Tensor::<f64>::randn([2, 9, 8, 8], &mut ChaCha8Rng::seed_from_u64(8));
        let g = d.input_gradient(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = d.leaves(&mut tape, true);
        let xv = tape.constant(x.clone());
        let (_, masks) = d.forward_recording(&mut tape, &p, xv).unwrap();
        let gv = tape.constant(g);
        let t = d.tangent(&mut tape, &p, gv, &masks).unwrap();
        let s = tape.sum(t);
        // d/dtheta mean_i |g_i|^2 = (2/N) d/dtheta sum_i <g_i, v_i> at v = g, N = 2
        let mut grads = tape.backward(s).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for (k, param) in d.params.iter().enumerate() {
            let an = grads.take_or_zeros(p[k], param.shape());
            for i in (0..param.numel()).step_by(7) {
                let r1_at = |delta: f64| {
                    let mut tape = Tape::<f64>::new();
                    let pv: Vec<Var> = d
                        .params
                        .iter()
                        .enumerate()
                        .map(|(j, q)| {
                            let mut q64: Tensor<f64> = q.cast();
                            if j == k {
                                q64.data_mut()[i] += delta;
                            }
                            tape.leaf(q64, false)
                        })
                        .collect();
                    let xl = tape.leaf(x.clone(), true);
                    let y = d.forward(&mut tape, &pv, xl).unwrap();
                    let sy = tape.sum(y);
                    let mut gg = tape.backward(sy).unwrap();
                    gg.take(xl).unwrap().sq_norm() / 2.0
                };
                let fd = (r1_at(h) - r1_at(-h)) / (2.0 * h);
                let a = an.data()[i];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-3, "param {k} entry {i}: {a} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn one_step_updates_both_networks() {
        let cfg = tiny_cfg();
        let data = tiny_data(4);
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.clone();
        let mut rng = step_rng(cfg.seed, 0);
        let batch = sample_batch(&data, &cfg, &mut rng).unwrap();
        let log = gan_train_step(&mut state, &batch, &cfg, &mut rng).unwrap();
        assert!(log.loss_g.is_finite() && log.loss_d.is_finite() && log.r1 > 0.0);
        let moved = |a: &[Tensor<f32>], b: &[Tensor<f32>]| {
            a.iter().zip(b).map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f32>()).sum::<f32>()
        };
        assert!(moved(&before.generator.params, &state.generator.params) > 0.0);
        assert!(moved(&before.discriminator.params, &state.discriminator.params) > 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = tiny_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let empty = Tensor::zeros([0, 9, 8, 8]);
        assert!(gan_train_step(&mut state, &empty, &cfg, &mut step_rng(0, 0)).is_err());
    }

    #[test]
    fn large_gamma_drives_r1_down() {
        let cfg = TrainConfig {
            gamma: 1000.0,
            r1_interval: 1,
            ..tiny_cfg()
        };
        let data = tiny_data(2);
        let mut state = TrainState::new(&cfg).unwrap();
        let fixed = sample_batch(&data, &cfg, &mut step_rng(1, 1)).unwrap();
        let first = state.discriminator.r1(&fixed).unwrap();
        for s in 0..200 {
            gan_train_step(&mut state, &fixed, &cfg, &mut step_rng(2, s)).unwrap();
        }
        let last = state.discriminator.r1(&fixed).unwrap();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn resumed_training_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(4);
        let cfg = tiny_cfg();
        let straight = train(&cfg, &data, &dir.path().join("a"), |_| {}).unwrap();

        let half = TrainConfig { steps: 3, ..cfg.clone() };
        train(&half, &data, &dir.path().join("b"), |_| {}).unwrap();
        let (state, _) = load_checkpoint(&dir.path().join("b/checkpoint.ntc")).unwrap();
        assert_eq!(state.step, 3);
        let resumed = train_from(state, &cfg, &data, &dir.path().join("b"), |_| {}).unwrap();
        assert_eq!(straight, resumed);
        let a = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
        let b = std::fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 6);
        for line in a.lines() {
            assert_eq!(line.split(',').count(), 4);
        }
    }
}
