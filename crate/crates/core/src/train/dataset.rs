//! Procedural material maps and the augmentations applied to them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::material::{project_to_disk, Rgb, SvbrdfMaps, R_MIN};
use crate::Error;

/// The four pattern families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Tiles,
    Stripes,
    Blobs,
    Speckle,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Tiles, Family::Stripes, Family::Blobs, Family::Speckle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the full side.
    pub min_crop: f64,
    /// Apply random quarter turns and flips.
    pub rotate: bool,
    /// Probability of blending with a second sample.
    pub blend_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_crop: 0.5,
            rotate: true,
            blend_prob: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralDatasetConfig {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Mixing weights for tiles, stripes, blobs and speckle.
    pub mix: [f64; 4],
    pub augment: AugmentConfig,
}

impl Default for ProceduralDatasetConfig {
    fn default() -> Self {
        ProceduralDatasetConfig {
            count: 1000,
            resolution: 64,
            seed: 0,
            mix: [0.25; 4],
            augment: AugmentConfig::default(),
        }
    }
}

impl ProceduralDatasetConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.mix.iter().any(|&w| !(w >= 0.0)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mix weights must be non-negative and sum to 1, got {:?}",
                self.mix
            )));
        }
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return Err(Error::Config(format!(
                "resolution must be a power of two of at least 4, got {}",
                self.resolution
            )));
        }
        if !(self.augment.min_crop > 0.0 && self.augment.min_crop <= 1.0) {
            return Err(Error::Config("min_crop must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.blend_prob) {
            return Err(Error::Config("blend_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One generated sample and the family it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralSample {
    pub family: Family,
    pub maps: SvbrdfMaps,
}

/// Generates `cfg.count` samples. Sample `i` depends only on `(seed, i)`.
pub fn generate_procedural_dataset(cfg: &ProceduralDatasetConfig) -> Result<Vec<ProceduralSample>, Error> {
    cfg.validate()?;
    Ok((0..cfg.count)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i as u64);
            let family = pick_family(&mut rng, &cfg.mix);
            ProceduralSample {
                family,
                maps: generate_family(family, cfg.resolution, &mut rng),
            }
        })
        .collect())
}

fn sample_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

fn pick_family(rng: &mut impl Rng, mix: &[f64; 4]) -> Family {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (f, w) in Family::ALL.iter().zip(mix) {
        acc += w;
        if u < acc {
            return *f;
        }
    }
    *Family::ALL.iter().zip(mix).rev().find(|(_, w)| **w > 0.0).expect("weights sum to 1").0
}

/// Smooth random field in `[0, 1]`: bilinear value noise on a `cells x
/// cells` lattice with smoothstep weights.
fn value_noise(rng: &mut impl Rng, n: usize, cells: usize) -> Vec<f64> {
    let lat: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
    let at = |i: usize, j: usize| lat[i * (cells + 1) + j];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let fy = (r as f64 + 0.5) / n as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for c in 0..n {
            let fx = (c as f64 + 0.5) / n as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[r * n + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn fractal_noise(rng: &mut impl Rng, n: usize, base_cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut cells = base_cells;
    for _ in 0..3 {
        for (o, v) in out.iter_mut().zip(value_noise(rng, n, cells)) {
            *o += amp * v;
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    out.iter().map(|v| v / total).collect()
}

/// Tangent-space normals of a height field given in units of the sample
/// width.
fn normals_from_height(h: &[f64], n: usize) -> Vec<[f64; 2]> {
    let idx = |r: isize, c: isize| h[(r.clamp(0, n as isize - 1) as usize) * n + c.clamp(0, n as isize - 1) as usize];
    let step = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n as isize {
        for c in 0..n as isize {
            let dx = (idx(r, c + 1) - idx(r, c - 1)) / (2.0 * step);
            // rows grow downwards, the y axis points up
            let dy = (idx(r - 1, c) - idx(r + 1, c)) / (2.0 * step);
            let len = (dx * dx + dy * dy + 1.0).sqrt();
            out.push(project_to_disk([-dx / len, -dy / len]));
        }
    }
    out
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> Rgb {
    let base: f64 = rng.random_range(lo..hi);
    [0, 1, 2].map(|_| (base * rng.random_range(0.7..1.3)).clamp(0.0, 1.0))
}

fn lerp3(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn gray(v: f64) -> Rgb {
    [v; 3]
}

fn clamp_rough(r: f64) -> f64 {
    r.clamp(R_MIN, 1.0)
}

pub fn generate_family(family: Family, n: usize, rng: &mut impl Rng) -> SvbrdfMaps {
    let mut m = SvbrdfMaps::uniform(n, n, [0.0; 3], [0.0, 0.0], 0.5, [0.0; 3]);
    let uv = |p: usize| ((p % n) as f64 + 0.5) / n as f64;
    let vv = |p: usize| ((p / n) as f64 + 0.5) / n as f64;
    let mut height = vec![0.0; n * n];
    match family {
        Family::Tiles => {
            let k = [2usize, 4, 8][rng.random_range(0..3)];
            let grout = rng.random_range(0.04..0.1);
            let bevel = rng.random_range(0.04..0.12);
            let grout_col = gray(rng.random_range(0.1..0.4));
            let base = random_color(rng, 0.2, 0.8);
            let rough_base = rng.random_range(0.25..0.45);
            let spec = rng.random_range(0.04..0.25);
            let tiles: Vec<(Rgb, f64)> = (0..k * k)
                .map(|_| {
                    let shade = rng.random_range(0.75..1.15);
                    (base.map(|c| (c * shade).clamp(0.0, 1.0)), rough_base + rng.random_range(-0.05..0.05))
                })
                .collect();
            for p in 0..n * n {
                let (fu, fv) = (uv(p) * k as f64, vv(p) * k as f64);
                let t = (fv.floor() as usize).min(k - 1) * k + (fu.floor() as usize).min(k - 1);
                let edge = fu.fract().min(1.0 - fu.fract()).min(fv.fract()).min(1.0 - fv.fract());
                if edge < grout / 2.0 {
                    m.albedo[p] = grout_col;
                    m.roughness[p] = 0.85;
                    m.specular[p] = gray(0.02);
                } else {
                    m.albedo[p] = tiles[t].0;
                    m.roughness[p] = clamp_rough(tiles[t].1);
                    m.specular[p] = gray(spec);
                    height[p] = ((edge - grout / 2.0) / bevel).min(1.0) / (k as f64 * 12.0);
                }
            }
        }
        Family::Stripes => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(3.0..10.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (c1, c2) = (random_color(rng, 0.1, 0.9), random_color(rng, 0.1, 0.9));
            let rough = rng.random_range(0.45..0.6);
            let spec = rng.random_range(0.03..0.3);
            let amp = rng.random_range(0.002..0.01);
            for p in 0..n * n {
                let s = (std::f64::consts::TAU * freq * (uv(p) * theta.cos() + vv(p) * theta.sin()) + phase).sin();
                m.albedo[p] = lerp3(c1, c2, 0.5 + 0.5 * s);
                m.roughness[p] = clamp_rough(rough + 0.05 * s);
                m.specular[p] = gray(spec);
                height[p] = amp * s;
            }
        }
        Family::Blobs => {
            let (c1, c2) = (random_color(rng, 0.05, 0.9), random_color(rng, 0.05, 0.9));
            let cells = rng.random_range(2..5);
            let field = fractal_noise(rng, n, cells);
            let rfield = fractal_noise(rng, n, cells);
            let rough = rng.random_range(0.65..0.85);
            let spec = rng.random_range(0.02..0.1);
            let amp = rng.random_range(0.01..0.04);
            for p in 0..n * n {
                m.albedo[p] = lerp3(c1, c2, field[p]);
                m.roughness[p] = clamp_rough(rough + 0.2 * (rfield[p] - 0.5));
                m.specular[p] = gray(spec);
                height[p] = amp * field[p];
            }
        }
        Family::Speckle => {
            let base = random_color(rng, 0.05, 0.5);
            let field = fractal_noise(rng, n, 4);
            let rough = rng.random_range(0.15..0.28);
            let density = rng.random_range(0.01..0.05);
            for p in 0..n * n {
                m.albedo[p] = base.map(|c| (c * (0.8 + 0.4 * field[p])).clamp(0.0, 1.0));
                m.roughness[p] = rough;
                m.specular[p] = gray(0.04);
                height[p] = 0.005 * field[p];
            }
            let dots = ((n * n) as f64 * density).ceil() as usize;
            for _ in 0..dots {
                let p = rng.random_range(0..n * n);
                m.specular[p] = gray(rng.random_range(0.8..1.0));
                m.roughness[p] = rng.random_range(0.05..0.1);
                m.albedo[p] = gray(0.02);
            }
        }
    }
    m.normal_xy = normals_from_height(&height, n);
    m
}

/// Concrete choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Top-left corner and side of the square crop, in pixels.
    pub crop: (usize, usize, usize),
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    /// Mirror left-right after rotating.
    pub flip: bool,
    /// Weight of the first parent when blending with a partner.
    pub blend: Option<f64>,
}

impl AugmentParams {
    pub fn identity(n: usize) -> Self {
        AugmentParams {
            crop: (0, 0, n),
            quarter_turns: 0,
            flip: false,
            blend: None,
        }
    }

    pub fn random(cfg: &AugmentConfig, n: usize, rng: &mut impl Rng) -> Self {
        let min = ((cfg.min_crop * n as f64).ceil() as usize).clamp(1, n);
        let side = rng.random_range(min..=n);
        let crop = (rng.random_range(0..=n - side), rng.random_range(0..=n - side), side);
        let (quarter_turns, flip) = if cfg.rotate {
            (rng.random_range(0..4), rng.random())
        } else {
            (0, false)
        };
        let blend = (rng.random::<f64>() < cfg.blend_prob).then(|| rng.random_range(0.3..0.7));
        AugmentParams {
            crop,
            quarter_turns,
            flip,
            blend,
        }
    }
}

/// Bilinear resample of a crop back to full size.
fn crop_resize(m: &SvbrdfMaps, (x0, y0, side): (usize, usize, usize)) -> SvbrdfMaps {
    let n = m.width;
    if side == n && x0 == 0 && y0 == 0 {
        return m.clone();
    }
    let planes = m.to_planes();
    let mut out = vec![0.0; planes.len()];
    let np = n * n;
    let scale = side as f64 / n as f64;
    for r in 0..n {
        let sy = (y0 as f64 + (r as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let (iy, ty) = (sy.floor() as usize, sy.fract());
        let iy1 = (iy + 1).min(n - 1);
        for c in 0..n {
            let sx = (x0 as f64 + (c as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let (ix, tx) = (sx.floor() as usize, sx.fract());
            let ix1 = (ix + 1).min(n - 1);
            for ch in 0..9 {
                let b = &planes[ch * np..(ch + 1) * np];
                let top = b[iy * n + ix] * (1.0 - tx) + b[iy * n + ix1] * tx;
                let bot = b[iy1 * n + ix] * (1.0 - tx) + b[iy1 * n + ix1] * tx;
                out[ch * np + r * n + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    let mut res = SvbrdfMaps::from_planes(n, n, &out).expect("same size");
    res.snap_to_domain();
    res
}

/// Rotates the image a quarter turn counter-clockwise; normal vectors turn
/// with it.
fn rotate_ccw(m: &SvbrdfMaps) -> SvbrdfMaps {
    let n = m.width;
    let mut out = m.clone();
    for r in 0..n {
        for c in 0..n {
            // destination (r, c) reads source (c, n-1-r)
            let src = c * n + (n - 1 - r);
            let dst = r * n + c;
            out.albedo[dst] = m.albedo[src];
            out.roughness[dst] = m.roughness[src];
            out.specular[dst] = m.specular[src];
            let [x, y] = m.normal_xy[src];
            out.normal_xy[dst] = [-y, x];
        }
    }
    out
}

fn flip_lr(m: &SvbrdfMaps) -> SvbrdfMaps {
    let n = m.width;
    let mut out = m.clone();
    for r in 0..n {
        for c in 0..n {
            let (src, dst) = (r * n + (n - 1 - c), r * n + c);
            out.albedo[dst] = m.albedo[src];
            out.roughness[dst] = m.roughness[src];
            out.specular[dst] = m.specular[src];
            let [x, y] = m.normal_xy[src];
            out.normal_xy[dst] = [-x, y];
        }
    }
    out
}

/// Convex blend `t a + (1 - t) b`; normals are blended as 3-vectors and
/// renormalized.
pub fn blend_maps(a: &SvbrdfMaps, b: &SvbrdfMaps, t: f64) -> SvbrdfMaps {
    let mut out = a.clone();
    for p in 0..a.pixels() {
        out.albedo[p] = lerp3(b.albedo[p], a.albedo[p], t);
        out.specular[p] = lerp3(b.specular[p], a.specular[p], t);
        out.roughness[p] = b.roughness[p] + (a.roughness[p] - b.roughness[p]) * t;
        let v = a.normal(p) * t + b.normal(p) * (1.0 - t);
        let v = if v.length_squared() > 1e-20 { v.normalize() } else { a.normal(p) };
        out.normal_xy[p] = project_to_disk([v.x, v.y]);
    }
    out
}

/// Applies crop, rotation, flip and blend in that order. The partner is
/// only read when `params.blend` is set.
pub fn apply_augment(maps: &SvbrdfMaps, partner: Option<&SvbrdfMaps>, params: &AugmentParams) -> Result<SvbrdfMaps, Error> {
    if maps.width != maps.height {
        return Err(Error::Config("augmentation needs square maps".into()));
    }
    let (x0, y0, side) = params.crop;
    if side == 0 || x0 + side > maps.width || y0 + side > maps.height {
        return Err(Error::Config(format!("crop {:?} outside the maps", params.crop)));
    }
    let mut m = crop_resize(maps, params.crop);
    for _ in 0..params.quarter_turns % 4 {
        m = rotate_ccw(&m);
    }
    if params.flip {
        m = flip_lr(&m);
    }
    if let (Some(t), Some(b)) = (params.blend, partner) {
        if b.width != m.width || b.height != m.height {
            return Err(Error::Config("blend partner has a different size".into()));
        }
        m = blend_maps(&m, b, t);
    }
    Ok(m)
}

/// Random augmentation drawn from `seed`.
pub fn augment(maps: &SvbrdfMaps, partner: Option<&SvbrdfMaps>, cfg: &AugmentConfig, seed: u64) -> Result<SvbrdfMaps, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::random(cfg, maps.width, &mut rng);
    apply_augment(maps, partner, &params)
}

/// The decoded normal of a rotated pixel equals the rotated decoded normal.
#[cfg(test)]
fn rotated_normal_matches(m: &SvbrdfMaps, rot: &SvbrdfMaps) -> bool {
    let n = m.width;
    (0..n * n).all(|dst| {
        let (r, c) = (dst / n, dst % n);
        let src = c * n + (n - 1 - r);
        let a = crate::material::decode_normal(m.normal_xy[src]);
        let b = crate::material::decode_normal(rot.normal_xy[dst]);
        (b.x + a.y).abs() < 1e-12 && (b.y - a.x).abs() < 1e-12 && (b.z - a.z).abs() < 1e-12
    })
}
