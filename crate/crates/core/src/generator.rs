//! Style-modulated generator used as the material prior.
//!
//! A latent `z` goes through a small MLP to `w`. The synthesis stack starts
//! from a learned `4x4` constant and runs `num_blocks` blocks of two
//! modulated 3x3 convolutions, doubling the resolution between blocks. Every
//! convolution reads its own column of the style matrix `w+` and adds its own
//! single-channel noise map. A final 1x1 convolution produces 9 raw channels,
//! which [`Tape::material_range`] squashes into valid material parameters.
//!
//! All weights use the equalized learning-rate convention: they are stored
//! with unit variance and scaled by `1/sqrt(fan_in)` at run time.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::material::{SvbrdfMaps, R_MIN};
use crate::render::maps_from_tensor;
use crate::tensor::{read_tensors, NamedTensors, write_tensors, Real, Tape, Tensor, TensorError, Var};
use crate::Error;

const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_resolution: usize,
    pub num_blocks: usize,
    /// Feature channels of each block.
    pub channels: Vec<usize>,
    pub mapping_depth: usize,
    pub r_min: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// 64x64 output, 128-dimensional latents.
    pub fn desk() -> Self {
        GeneratorConfig {
            latent_dim: 128,
            base_resolution: 4,
            num_blocks: 5,
            channels: vec![64, 64, 32, 16, 8],
            mapping_depth: 4,
            r_min: R_MIN,
        }
    }

    /// 256x256 output, 512-dimensional latents.
    pub fn full() -> Self {
        GeneratorConfig {
            latent_dim: 512,
            base_resolution: 4,
            num_blocks: 7,
            channels: vec![512, 512, 512, 512, 256, 128, 64],
            mapping_depth: 4,
            r_min: R_MIN,
        }
    }

    /// A 2-block, 8x8 model for tests and examples.
    pub fn tiny() -> Self {
        GeneratorConfig {
            latent_dim: 8,
            base_resolution: 4,
            num_blocks: 2,
            channels: vec![8, 4],
            mapping_depth: 2,
            r_min: R_MIN,
        }
    }

    pub fn style_slots(&self) -> usize {
        2 * self.num_blocks
    }

    pub fn resolution(&self) -> usize {
        self.base_resolution << (self.num_blocks - 1)
    }

    /// Spatial size of the noise map read by synthesis layer `l`.
    pub fn layer_resolution(&self, l: usize) -> usize {
        self.base_resolution << (l / 2)
    }

    /// `(in, out)` channels of synthesis layer `l`.
    fn layer_channels(&self, l: usize) -> (usize, usize) {
        let b = l / 2;
        let cout = self.channels[b];
        let cin = if l == 0 {
            self.channels[0]
        } else if l % 2 == 0 {
            self.channels[b - 1]
        } else {
            cout
        };
        (cin, cout)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.channels.len() != self.num_blocks {
            return bad(format!(
                "need one channel count per block ({} blocks, {} counts)",
                self.num_blocks,
                self.channels.len()
            ));
        }
        if self.latent_dim == 0 || self.mapping_depth == 0 || self.base_resolution == 0 {
            return bad("latent_dim, mapping_depth and base_resolution must be positive".into());
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.r_min) {
            return bad(format!("r_min must lie in [0, 1), got {}", self.r_min));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, [usize; 4])> {
        let l = self.latent_dim;
        let mut v = Vec::new();
        for i in 0..self.mapping_depth {
            v.push((format!("mapping.{i}.weight"), [l, l, 1, 1]));
            v.push((format!("mapping.{i}.bias"), [1, l, 1, 1]));
        }
        let r = self.base_resolution;
        v.push(("synthesis.const".into(), [1, self.channels[0], r, r]));
        for k in 0..self.style_slots() {
            let (cin, cout) = self.layer_channels(k);
            v.push((format!("synthesis.{k}.affine.weight"), [cin, l, 1, 1]));
            v.push((format!("synthesis.{k}.affine.bias"), [1, cin, 1, 1]));
            v.push((format!("synthesis.{k}.weight"), [cout, cin, 3, 3]));
            v.push((format!("synthesis.{k}.bias"), [1, cout, 1, 1]));
            v.push((format!("synthesis.{k}.noise_gain"), [1, 1, 1, 1]));
        }
        let last = *self.channels.last().expect("validated");
        v.push(("output.weight".into(), [9, last, 1, 1]));
        v.push(("output.bias".into(), [1, 9, 1, 1]));
        v
    }
}

/// Latent coordinates of one material: the style matrix and the noise maps.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// `[1, style_slots, latent_dim, 1]`.
    pub w_plus: Tensor<f32>,
    /// One `[1, 1, r, r]` map per synthesis layer.
    pub noise: Vec<Tensor<f32>>,
}

impl LatentState {
    pub fn zero_noise(config: &GeneratorConfig, w_plus: Tensor<f32>) -> Self {
        let noise = (0..config.style_slots())
            .map(|l| {
                let r = config.layer_resolution(l);
                Tensor::zeros([1, 1, r, r])
            })
            .collect();
        LatentState { w_plus, noise }
    }

    pub fn check(&self, config: &GeneratorConfig) -> Result<(), Error> {
        let want = [1, config.style_slots(), config.latent_dim, 1];
        if self.w_plus.shape() != want {
            return Err(Error::Config(format!(
                "w+ has shape {:?}, expected {want:?}",
                self.w_plus.shape()
            )));
        }
        if self.noise.len() != config.style_slots() {
            return Err(Error::Config(format!(
                "expected {} noise maps, got {}",
                config.style_slots(),
                self.noise.len()
            )));
        }
        for (l, n) in self.noise.iter().enumerate() {
            let r = config.layer_resolution(l);
            if n.shape() != [1, 1, r, r] {
                return Err(Error::Config(format!(
                    "noise map {l} has shape {:?}, expected [1, 1, {r}, {r}]",
                    n.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut named = vec![("w_plus".to_string(), self.w_plus.clone())];
        named.extend(self.noise.iter().enumerate().map(|(l, n)| (format!("noise.{l}"), n.clone())));
        write_tensors(BufWriter::new(File::create(path)?), &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut named: HashMap<String, Tensor<f32>> =
            read_tensors(BufReader::new(File::open(path)?))?.into_iter().collect();
        let w_plus = named
            .remove("w_plus")
            .ok_or_else(|| Error::Format("latent file has no w_plus entry".into()))?;
        let mut noise = Vec::new();
        while let Some(n) = named.remove(&format!("noise.{}", noise.len())) {
            noise.push(n);
        }
        Ok(LatentState { w_plus, noise })
    }
}

/// Element-wise `(1 - t) a + t b` over the style matrix and the noise maps.
pub fn lerp_latent(a: &LatentState, b: &LatentState, t: f64) -> Result<LatentState, Error> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if a.w_plus.shape() != b.w_plus.shape()
        || a.noise.len() != b.noise.len()
        || a.noise.iter().zip(&b.noise).any(|(x, y)| x.shape() != y.shape())
    {
        return Err(Error::Config("latent shapes differ".into()));
    }
    let mix = |x: &Tensor<f32>, y: &Tensor<f32>| {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| ((1.0 - t) * p as f64 + t * q as f64) as f32)
            .collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    };
    Ok(LatentState {
        w_plus: mix(&a.w_plus, &b.w_plus),
        noise: a.noise.iter().zip(&b.noise).map(|(x, y)| mix(x, y)).collect(),
    })
}

/// Tiles `w` `[1, L, 1, 1]` into every style column.
pub fn replicate(config: &GeneratorConfig, w: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
    if w.numel() != config.latent_dim {
        return Err(Error::Config(format!(
            "w has {} entries, expected {}",
            w.numel(),
            config.latent_dim
        )));
    }
    let mut data = Vec::with_capacity(config.style_slots() * config.latent_dim);
    for _ in 0..config.style_slots() {
        data.extend_from_slice(w.data());
    }
    Ok(Tensor::from_vec([1, config.style_slots(), config.latent_dim, 1], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: Vec<Tensor<f32>>,
}

/// Parameter handles on a tape, in [`GeneratorConfig::param_specs`] order.
pub struct GeneratorVars {
    pub params: Vec<Var>,
}

fn inv_sqrt<T: Real>(fan_in: usize) -> T {
    T::from_f64(1.0 / (fan_in as f64).sqrt())
}

impl Generator {
    /// Random initialization: unit-normal weights and the constant, zero
    /// biases, unit style biases and zero noise gains.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("affine.bias") {
                    Tensor::full(shape, 1.0)
                } else if name.ends_with("bias") || name.ends_with("noise_gain") {
                    Tensor::zeros(shape)
                } else {
                    Tensor::randn(shape, &mut rng)
                }
            })
            .collect();
        Ok(Generator { config, params })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter().cloned())
            .collect()
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("toml")
    }

    /// Writes the weights to `path` and the config to `path` with a `.toml`
    /// extension.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_tensors(BufWriter::new(File::create(path)?), &self.named_params())?;
        let text = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(Self::sidecar(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(Self::sidecar(path))?;
        let config: GeneratorConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_named(config, read_tensors(BufReader::new(File::open(path)?))?)
    }

    pub fn from_named(config: GeneratorConfig, named: NamedTensors) -> Result<Self, Error> {
        config.validate()?;
        let mut named: HashMap<String, Tensor<f32>> = named.into_iter().collect();
        let mut params = Vec::new();
        for (name, shape) in config.param_specs() {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing generator parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {name} is not finite")));
            }
            params.push(t);
        }
        Ok(Generator { config, params })
    }

    /// Records every parameter as a leaf.
    pub fn leaves<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> GeneratorVars {
        GeneratorVars {
            params: self.params.iter().map(|p| tape.leaf(p.cast(), requires_grad)).collect(),
        }
    }

    fn mapping_range(&self) -> std::ops::Range<usize> {
        0..2 * self.config.mapping_depth
    }

    fn const_index(&self) -> usize {
        2 * self.config.mapping_depth
    }

    fn layer_index(&self, l: usize) -> usize {
        self.const_index() + 1 + 5 * l
    }

    fn output_index(&self) -> usize {
        self.layer_index(self.config.style_slots())
    }

    /// `z` `[N, L, 1, 1]` to `w` `[N, L, 1, 1]`.
    pub fn mapping_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &GeneratorVars, z: Var) -> Result<Var, TensorError> {
        let mut x = tape.normalize_2nd_moment(z);
        let gain = inv_sqrt::<T>(self.config.latent_dim);
        let act_gain = T::from_f64(2f64.sqrt());
        for i in self.mapping_range().step_by(2) {
            x = tape.linear(x, vars.params[i], Some(vars.params[i + 1]), gain)?;
            x = tape.leaky_relu(x, T::from_f64(LRELU_SLOPE));
            x = tape.scale(x, act_gain);
        }
        Ok(x)
    }

    /// Runs synthesis from a `[N, S, L, 1]` style matrix and one noise map
    /// per layer (`[N or 1, 1, r, r]`), returning range-mapped `[N, 9, H, W]`
    /// maps.
    pub fn synthesis_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &GeneratorVars,
        w_plus: Var,
        noise: &[Var],
    ) -> Result<Var, TensorError> {
        let cfg = &self.config;
        let ws = tape.shape(w_plus);
        if ws[1] != cfg.style_slots() || ws[2] != cfg.latent_dim || ws[3] != 1 {
            return Err(TensorError::Invalid {
                op: "synthesize",
                msg: format!(
                    "style matrix has shape {ws:?}, expected [N, {}, {}, 1]",
                    cfg.style_slots(),
                    cfg.latent_dim
                ),
            });
        }
        if noise.len() != cfg.style_slots() {
            return Err(TensorError::mismatch("synthesize", "noise maps", cfg.style_slots(), noise.len()));
        }
        let n = ws[0];
        let p = &vars.params;
        let c = p[self.const_index()];
        let r = cfg.base_resolution;
        let mut x = if n == 1 {
            c
        } else {
            let ones = tape.constant(Tensor::full([n, 1, 1, 1], T::one()));
            let tiled = tape.reshape(c, [cfg.channels[0] * r * r, 1, 1, 1])?;
            let tiled = tape.linear(ones, tiled, None, T::one())?;
            tape.reshape(tiled, [n, cfg.channels[0], r, r])?
        };
        let slope = T::from_f64(LRELU_SLOPE);
        let act_gain = T::from_f64(2f64.sqrt());
        let affine_gain = inv_sqrt::<T>(cfg.latent_dim);
        for l in 0..cfg.style_slots() {
            if l > 0 && l % 2 == 0 {
                x = tape.upsample2x(x);
            }
            let k = self.layer_index(l);
            let (cin, _) = cfg.layer_channels(l);
            let w = tape.select_slot(w_plus, l)?;
            let style = tape.linear(w, p[k], Some(p[k + 1]), affine_gain)?;
            x = tape.modulated_conv2d(x, p[k + 2], style, true, inv_sqrt::<T>(cin * 9))?;
            x = tape.add_noise(x, noise[l], p[k + 4])?;
            x = tape.add_bias(x, p[k + 3])?;
            x = tape.leaky_relu(x, slope);
            x = tape.scale(x, act_gain);
        }
        let o = self.output_index();
        let last = *cfg.channels.last().expect("validated");
        x = tape.conv2d(x, p[o], Some(p[o + 1]), 1, 0, inv_sqrt::<T>(last))?;
        tape.material_range(x, T::from_f64(cfg.r_min))
    }

    /// Maps one latent `z` (`latent_dim` entries) to `w`.
    pub fn mapping_forward(&self, z: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
        Ok(self.mapping_batch(z.clone().reshape([1, self.config.latent_dim, 1, 1])?)?)
    }

    fn mapping_batch(&self, z: Tensor<f32>) -> Result<Tensor<f32>, Error> {
        if z.sample_len() != self.config.latent_dim || !z.is_finite() {
            return Err(Error::Config(format!(
                "z must be {} finite values per sample",
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.leaves(&mut tape, false);
        let zv = tape.constant(z);
        let w = self.mapping_tape(&mut tape, &vars, zv)?;
        Ok(tape.value(w).clone())
    }

    /// Maps for given latents.
    pub fn synthesize(&self, latent: &LatentState) -> Result<SvbrdfMaps, Error> {
        latent.check(&self.config)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.leaves(&mut tape, false);
        let w = tape.constant(latent.w_plus.clone());
        let noise: Vec<Var> = latent.noise.iter().map(|n| tape.constant(n.clone())).collect();
        let out = self.synthesis_tape(&mut tape, &vars, w, &noise)?;
        let mut maps = maps_from_tensor(tape.value(out))?;
        maps.snap_to_domain();
        Ok(maps)
    }

    /// Draws `z` and the noise maps from `seed` and synthesizes.
    pub fn sample_material(&self, seed: u64) -> Result<(SvbrdfMaps, LatentState), Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn([1, self.config.latent_dim, 1, 1], &mut rng);
        let noise = (0..self.config.style_slots())
            .map(|l| {
                let r = self.config.layer_resolution(l);
                Tensor::randn([1, 1, r, r], &mut rng)
            })
            .collect();
        let w = self.mapping_forward(&z)?;
        let latent = LatentState {
            w_plus: replicate(&self.config, &w)?,
            noise,
        };
        Ok((self.synthesize(&latent)?, latent))
    }

    /// Average of `w` over `num_samples` standard-normal latents.
    pub fn mean_w(&self, num_samples: usize, seed: u64) -> Result<Tensor<f32>, Error> {
        if num_samples == 0 {
            return Err(Error::Config("mean_w needs at least one sample".into()));
        }
        let l = self.config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0f64; l];
        let mut left = num_samples;
        while left > 0 {
            let b = left.min(1000);
            let w = self.mapping_batch(Tensor::randn([b, l, 1, 1], &mut rng))?;
            for s in 0..b {
                for (a, v) in acc.iter_mut().zip(w.sample(s)) {
                    *a += *v as f64;
                }
            }
            left -= b;
        }
        let data = acc.into_iter().map(|a| (a / num_samples as f64) as f32).collect();
        Ok(Tensor::from_vec([1, l, 1, 1], data)?)
    }

    /// Latents with `w` replicated into every column and zero noise.
    pub fn mean_latent(&self, num_samples: usize, seed: u64) -> Result<LatentState, Error> {
        let w = self.mean_w(num_samples, seed)?;
        Ok(LatentState::zero_noise(&self.config, replicate(&self.config, &w)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::map_rmse;
    use proptest::prelude::*;

    fn tiny(seed: u64) -> Generator {
        Generator::init(GeneratorConfig::tiny(), seed).unwrap()
    }

    /// Perturbs noise gains so that the noise inputs actually matter.
    fn tiny_with_noise(seed: u64) -> Generator {
        let mut g = tiny(seed);
        let specs = g.config.param_specs();
        for (p, (name, _)) in g.params.iter_mut().zip(specs) {
            if name.ends_with("noise_gain") {
                p.data_mut()[0] = 0.3;
            }
        }
        g
    }

    #[test]
    fn desk_config_shapes() {
        let c = GeneratorConfig::desk();
        assert_eq!(c.style_slots(), 10);
        assert_eq!(c.resolution(), 64);
        assert_eq!(GeneratorConfig::full().resolution(), 256);
        assert_eq!(GeneratorConfig::full().style_slots(), 14);
    }

    #[test]
    fn mapping_shape_and_determinism() {
        let g = tiny(1);
        let z = Tensor::randn([1, 8, 1, 1], &mut ChaCha8Rng::seed_from_u64(2));
        let a = g.mapping_forward(&z).unwrap();
        assert_eq!(a.numel(), 8);
        assert_eq!(a, g.mapping_forward(&z).unwrap());
    }

    #[test]
    fn mapping_is_nonlinear() {
        let g = tiny(1);
        let z = Tensor::randn([1, 8, 1, 1], &mut ChaCha8Rng::seed_from_u64(3));
        // normalization removes a global scale, so a shifted latent is the witness
        let z2 = z.map(|v| v + 1.0);
        assert_ne!(g.mapping_forward(&z).unwrap(), g.mapping_forward(&z2).unwrap());
        let w = g.mapping_forward(&z).unwrap();
        let w2 = g.mapping_forward(&z.map(|v| 2.0 * v)).unwrap();
        assert!(w.data().iter().zip(w2.data()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn replicate_fills_every_column() {
        let c = GeneratorConfig::tiny();
        let w = Tensor::from_vec([1, 8, 1, 1], (0..8).map(|v| v as f32).collect()).unwrap();
        let wp = replicate(&c, &w).unwrap();
        assert_eq!(wp.shape(), [1, 4, 8, 1]);
        for s in 0..4 {
            assert_eq!(&wp.data()[s * 8..(s + 1) * 8], w.data());
        }
        let col0 = Tensor::from_vec([1, 8, 1, 1], wp.data()[..8].to_vec()).unwrap();
        assert_eq!(replicate(&c, &col0).unwrap(), wp);
    }

    #[test]
    fn sampling_is_reproducible_and_seed_dependent() {
        let g = tiny_with_noise(4);
        let (a, la) = g.sample_material(7).unwrap();
        let (b, lb) = g.sample_material(7).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = g.sample_material(8).unwrap();
        assert!(map_rmse(&a, &c).unwrap().total > 0.0);
        a.validate().unwrap();
    }

    #[test]
    fn zero_noise_synthesis_is_deterministic() {
        let g = tiny_with_noise(5);
        let w = g.mapping_forward(&Tensor::randn([1, 8, 1, 1], &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let lat = LatentState::zero_noise(&g.config, replicate(&g.config, &w).unwrap());
        assert_eq!(g.synthesize(&lat).unwrap(), g.synthesize(&lat).unwrap());
    }

    #[test]
    fn synthesis_rejects_bad_shapes() {
        let g = tiny(6);
        let lat = LatentState::zero_noise(&g.config, Tensor::zeros([1, 3, 8, 1]));
        assert!(g.synthesize(&lat).is_err());
        let mut lat = LatentState::zero_noise(&g.config, Tensor::zeros([1, 4, 8, 1]));
        lat.noise[1] = Tensor::zeros([1, 1, 8, 8]);
        assert!(g.synthesize(&lat).is_err());
    }

    #[test]
    fn mean_w_of_one_sample_is_that_sample() {
        let g = tiny(7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::<f32>::randn([1, 8, 1, 1], &mut rng);
        let m = g.mean_w(1, 11).unwrap();
        let w = g.mapping_forward(&z).unwrap();
        assert_eq!(m.data(), w.data());
    }

    #[test]
    fn mean_w_converges_within_standard_error() {
        let g = tiny(8);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ws = g.mapping_batch(Tensor::randn([n, 8, 1, 1], &mut rng)).unwrap();
        let a = g.mean_w(n, 13).unwrap();
        let b = g.mean_w(2 * n, 14).unwrap();
        for d in 0..8 {
            let vals: Vec<f64> = (0..n).map(|s| ws.sample(s)[d] as f64).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // difference of two independent means with n and 2n samples
            let se = (var / n as f64 + var / (2 * n) as f64).sqrt();
            assert!(((a.data()[d] - b.data()[d]) as f64).abs() < 3.0 * se + 1e-6, "coordinate {d}");
        }
    }

    #[test]
    fn lerp_endpoints_and_symmetry() {
        let g = tiny_with_noise(9);
        let (_, a) = g.sample_material(1).unwrap();
        let (_, b) = g.sample_material(2).unwrap();
        assert_eq!(lerp_latent(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp_latent(&a, &b, 1.0).unwrap(), b);
        assert_eq!(lerp_latent(&a, &b, 0.5).unwrap(), lerp_latent(&b, &a, 0.5).unwrap());
        assert!(lerp_latent(&a, &b, 1.5).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny_with_noise(10);
        let path = dir.path().join("g.ntc");
        g.save(&path).unwrap();
        assert_eq!(Generator::load(&path).unwrap(), g);
        let (_, lat) = g.sample_material(3).unwrap();
        let lp = dir.path().join("lat.ntc");
        lat.save(&lp).unwrap();
        assert_eq!(LatentState::load(&lp).unwrap(), lat);
    }

    #[test]
    fn synthesis_gradients_match_central_differences() {
        let g = tiny_with_noise(11);
        let (_, lat) = g.sample_material(4).unwrap();
        let w0: Tensor<f64> = lat.w_plus.cast();
        let n0: Vec<Tensor<f64>> = lat.noise.iter().map(|n| n.cast()).collect();
        let weights = Tensor::<f64>::randn([1, 9, 8, 8], &mut ChaCha8Rng::seed_from_u64(5));
        let objective = |w: &Tensor<f64>, noise: &[Tensor<f64>], grad: bool| {
            let mut tape = Tape::<f64>::new();
            let vars = g.leaves(&mut tape, false);
            let wv = tape.leaf(w.clone(), grad);
            let nv: Vec<Var> = noise.iter().map(|n| tape.leaf(n.clone(), grad)).collect();
            let out = g.synthesis_tape(&mut tape, &vars, wv, &nv).unwrap();
            let p = tape.mul_const(out, weights.clone()).unwrap();
            let s = tape.sum(p);
            let val = tape.value(s).data()[0];
            if !grad {
                return (val, None);
            }
            let mut gr = tape.backward(s).unwrap();
            let gw = gr.take(wv).unwrap();
            let gn: Vec<Tensor<f64>> = nv.iter().map(|v| gr.take(*v).unwrap()).collect();
            (val, Some((gw, gn)))
        };
        let (_, grads) = objective(&w0, &n0, true);
        let (gw, gn) = grads.unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in (0..w0.numel()).step_by(3) {
            let (mut p, mut m) = (w0.clone(), w0.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (objective(&p, &n0, false).0 - objective(&m, &n0, false).0) / (2.0 * h);
            assert!(rel(fd, gw.data()[i]) < 1e-3, "w+ entry {i}: {} vs {fd}", gw.data()[i]);
        }
        for (l, gl) in gn.iter().enumerate() {
            for i in (0..gl.numel()).step_by(5) {
                let (mut p, mut m) = (n0.clone(), n0.clone());
                p[l].data_mut()[i] += h;
                m[l].data_mut()[i] -= h;
                let fd = (objective(&w0, &p, false).0 - objective(&w0, &m, false).0) / (2.0 * h);
                assert!(rel(fd, gl.data()[i]) < 1e-3, "noise {l} entry {i}: {} vs {fd}", gl.data()[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn every_latent_yields_valid_maps(seed in any::<u64>(), scale in 0.1f32..20.0) {
            let g = tiny_with_noise(12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w_plus = Tensor::<f32>::randn([1, 4, 8, 1], &mut rng).map(|v| v * scale);
            let mut lat = LatentState::zero_noise(&g.config, w_plus);
            for n in &mut lat.noise {
                *n = Tensor::randn(n.shape(), &mut rng).map(|v| v * scale);
            }
            let maps = g.synthesize(&lat).unwrap();
            prop_assert!(maps.validate().is_ok(), "{:?}", maps.validate());
        }
    }
}
