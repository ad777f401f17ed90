//! SVBRDF maps and the scalar microfacet BRDF.
//!
//! The reflectance model is a Lambertian diffuse lobe plus a GGX microfacet
//! specular lobe:
//!
//! ```text
//! f(wi, wo) = a / pi + D(h) G(wi, wo) F(wo . h) / (4 (n . wi) (n . wo))
//! ```
//!
//! with `alpha = roughness^2`, separable Smith shadowing and Schlick's
//! Fresnel approximation using the specular map as `F0`.

use std::f64::consts::PI;

use glam::DVec3;

use crate::Error;

/// Smallest roughness a map may hold. Keeps the GGX lobe away from its
/// delta limit, where gradients blow up.
pub const R_MIN: f64 = 0.02;

/// Number of channels in the stacked map layout (3 + 2 + 1 + 3).
pub const MAP_CHANNELS: usize = 9;

pub type Rgb = [f64; 3];

/// Per-pixel material parameter maps, row-major with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct SvbrdfMaps {
    pub width: usize,
    pub height: usize,
    pub albedo: Vec<Rgb>,
    /// Tangent-space normal `(x, y)`; `z` is reconstructed.
    pub normal_xy: Vec<[f64; 2]>,
    pub roughness: Vec<f64>,
    pub specular: Vec<Rgb>,
}

impl SvbrdfMaps {
    /// Constant maps.
    pub fn uniform(
        width: usize,
        height: usize,
        albedo: Rgb,
        normal_xy: [f64; 2],
        roughness: f64,
        specular: Rgb,
    ) -> Self {
        let n = width * height;
        SvbrdfMaps {
            width,
            height,
            albedo: vec![albedo; n],
            normal_xy: vec![normal_xy; n],
            roughness: vec![roughness; n],
            specular: vec![specular; n],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn normal(&self, p: usize) -> DVec3 {
        decode_normal(self.normal_xy[p])
    }

    /// Checks every invariant of the map set: consistent lengths, finite
    /// values, albedo and specular in `[0,1]`, roughness in `[R_MIN,1]` and
    /// normals inside the unit disk.
    pub fn validate(&self) -> Result<(), Error> {
        let n = self.pixels();
        if n == 0 {
            return Err(Error::InvalidMaps("empty maps".into()));
        }
        if self.albedo.len() != n
            || self.normal_xy.len() != n
            || self.roughness.len() != n
            || self.specular.len() != n
        {
            return Err(Error::InvalidMaps("channel lengths differ from width*height".into()));
        }
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        for p in 0..n {
            if !self.albedo[p].iter().all(|&v| unit(v)) {
                return Err(Error::InvalidMaps(format!("albedo out of range at pixel {p}")));
            }
            if !self.specular[p].iter().all(|&v| unit(v)) {
                return Err(Error::InvalidMaps(format!("specular out of range at pixel {p}")));
            }
            let r = self.roughness[p];
            if !(r.is_finite() && (R_MIN - 1e-9..=1.0 + 1e-9).contains(&r)) {
                return Err(Error::InvalidMaps(format!("roughness {r} out of range at pixel {p}")));
            }
            let [x, y] = self.normal_xy[p];
            if !(x.is_finite() && y.is_finite()) || x * x + y * y > 1.0 + 1e-9 {
                return Err(Error::InvalidMaps(format!("normal outside unit disk at pixel {p}")));
            }
        }
        Ok(())
    }

    /// Pulls values that sit just outside their valid ranges back in: clamps
    /// albedo, specular and roughness and projects normals onto the unit
    /// disk. Used on maps decoded from single-precision tensors, where
    /// round-off can leave a normal a few ulps outside the disk.
    pub fn snap_to_domain(&mut self) {
        for p in 0..self.pixels() {
            for c in 0..3 {
                self.albedo[p][c] = self.albedo[p][c].clamp(0.0, 1.0);
                self.specular[p][c] = self.specular[p][c].clamp(0.0, 1.0);
            }
            self.roughness[p] = self.roughness[p].clamp(R_MIN, 1.0);
            self.normal_xy[p] = project_to_disk(self.normal_xy[p]);
        }
    }

    /// Channel-stacked planar layout `[a.r, a.g, a.b, n.x, n.y, r, s.r, s.g, s.b]`,
    /// each plane `height * width`.
    pub fn to_planes(&self) -> Vec<f64> {
        let n = self.pixels();
        let mut out = vec![0.0; MAP_CHANNELS * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.albedo[p][c];
                out[(6 + c) * n + p] = self.specular[p][c];
            }
            out[3 * n + p] = self.normal_xy[p][0];
            out[4 * n + p] = self.normal_xy[p][1];
            out[5 * n + p] = self.roughness[p];
        }
        out
    }

    /// Inverse of [`SvbrdfMaps::to_planes`]; no range checks.
    pub fn from_planes(width: usize, height: usize, planes: &[f64]) -> Result<Self, Error> {
        let n = width * height;
        if planes.len() != MAP_CHANNELS * n {
            return Err(Error::Config(format!(
                "expected {} plane values for {width}x{height}, got {}",
                MAP_CHANNELS * n,
                planes.len()
            )));
        }
        let at = |c: usize, p: usize| planes[c * n + p];
        Ok(SvbrdfMaps {
            width,
            height,
            albedo: (0..n).map(|p| [at(0, p), at(1, p), at(2, p)]).collect(),
            normal_xy: (0..n).map(|p| [at(3, p), at(4, p)]).collect(),
            roughness: (0..n).map(|p| at(5, p)).collect(),
            specular: (0..n).map(|p| [at(6, p), at(7, p), at(8, p)]).collect(),
        })
    }
}

/// Per-pixel view of the maps plus the local light and view directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingPoint {
    pub albedo: Rgb,
    pub normal: DVec3,
    pub roughness: f64,
    pub specular: Rgb,
    /// Unit vector towards the light.
    pub wi: DVec3,
    /// Unit vector towards the viewer.
    pub wo: DVec3,
}

/// Radially projects `(x, y)` into the closed unit disk.
pub fn project_to_disk(xy: [f64; 2]) -> [f64; 2] {
    let [x, y] = xy;
    let r2 = x * x + y * y;
    if r2 > 1.0 {
        let r = r2.sqrt();
        [x / r, y / r]
    } else {
        xy
    }
}

/// Reconstructs a unit normal from its tangent-space `(x, y)`.
pub fn decode_normal(xy: [f64; 2]) -> DVec3 {
    let [x, y] = project_to_disk(xy);
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    DVec3::new(x, y, z).normalize()
}

/// GGX normal distribution `D = a^2 / (pi ((n.h)^2 (a^2 - 1) + 1)^2)`.
pub fn ggx_ndf(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let q = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * q * q)
}

/// Smith masking term for one direction.
pub fn smith_g1(cos: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * cos / (cos + (a2 + (1.0 - a2) * cos * cos).sqrt())
}

/// Separable Smith shadowing-masking `G1(n.i) G1(n.o)`.
pub fn smith_g(n_dot_i: f64, n_dot_o: f64, alpha: f64) -> f64 {
    smith_g1(n_dot_i, alpha) * smith_g1(n_dot_o, alpha)
}

pub fn fresnel_schlick(cos_theta: f64, f0: Rgb) -> Rgb {
    let k = (1.0 - cos_theta).clamp(0.0, 1.0).powi(5);
    f0.map(|f| f + (1.0 - f) * k)
}

/// Evaluates the BRDF. Black when either direction is below the surface.
pub fn brdf_eval(p: &ShadingPoint) -> Rgb {
    let n_i = p.normal.dot(p.wi);
    let n_o = p.normal.dot(p.wo);
    if n_i <= 0.0 || n_o <= 0.0 {
        return [0.0; 3];
    }
    let h = (p.wi + p.wo).normalize();
    let alpha = p.roughness * p.roughness;
    let d = ggx_ndf(p.normal.dot(h).max(0.0), alpha);
    let g = smith_g(n_i, n_o, alpha);
    let f = fresnel_schlick(p.wo.dot(h), p.specular);
    let spec = d * g / (4.0 * n_i * n_o);
    [0, 1, 2].map(|c| (p.albedo[c] / PI + spec * f[c]).max(0.0))
}
