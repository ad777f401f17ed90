//! Point-light rendering of SVBRDF maps and its analytic adjoint.
//!
//! The sample is the unit square centred at the origin of the `z = 0` plane,
//! seen orthographically: pixel `(row, col)` of a `W x H` image sits at
//! `((col + 0.5) / W - 0.5, 0.5 - (row + 0.5) / H, 0)`. The camera position
//! only enters through the view direction. Each pixel receives
//!
//! ```text
//! out = f(wi, wo) * max(0, n . wi) * intensity / |L - x|^2
//! ```
//!
//! in linear radiance. No tone mapping happens here.

use std::f64::consts::PI;

use glam::DVec3;

use crate::material::{decode_normal, fresnel_schlick, ggx_ndf, smith_g1, Rgb, SvbrdfMaps};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::Error;

/// Lower clamp applied before the display gamma, keeping its derivative
/// finite.
pub const TONE_FLOOR: f64 = 1e-4;
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Display transform `clamp(v, TONE_FLOOR, 1)^(1/2.2)` used wherever images
/// are compared.
pub fn tone_map(v: f64) -> f64 {
    v.clamp(TONE_FLOOR, 1.0).powf(1.0 / DISPLAY_GAMMA)
}

/// Linear RGB image, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

/// Output of [`render`]: linear radiance per pixel.
pub type RenderedImage = Image;

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    /// Planar `[3, H, W]` copy.
    pub fn to_planes(&self) -> Vec<f64> {
        let n = self.data.len();
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.iter().enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn from_planes(width: usize, height: usize, planes: &[f64]) -> Self {
        let n = width * height;
        Image {
            width,
            height,
            data: (0..n).map(|p| [planes[p], planes[n + p], planes[2 * n + p]]).collect(),
        }
    }

    /// Index of the brightest pixel by channel sum.
    pub fn argmax(&self) -> usize {
        let lum = |p: &Rgb| p[0] + p[1] + p[2];
        self.data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                if lum(p) > best.1 {
                    (i, lum(p))
                } else {
                    best
                }
            })
            .0
    }

    pub fn scaled(&self, k: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p.map(|v| v * k)).collect(),
        }
    }
}

/// How image pixels map onto the sample plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Projection {
    /// Every pixel maps to a fixed plane point; images are assumed to have
    /// been rectified into the frontal view already.
    #[default]
    Orthographic,
}

/// Light and camera placement of one measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    pub camera_position: DVec3,
    pub light_position: DVec3,
    pub light_intensity: f64,
}

/// One measurement: where the light and camera were, and what was seen.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureView {
    pub camera_position: DVec3,
    pub light_position: DVec3,
    pub light_intensity: f64,
    pub image: Image,
    pub projection: Projection,
}

impl CaptureView {
    pub fn new(
        camera_position: DVec3,
        light_position: DVec3,
        light_intensity: f64,
        image: Image,
    ) -> Result<Self, Error> {
        let v = CaptureView {
            camera_position,
            light_position,
            light_intensity,
            image,
            projection: Projection::Orthographic,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.camera_position.z > 0.0) || !self.camera_position.is_finite() {
            return Err(Error::Config("camera must be above the sample plane".into()));
        }
        if !self.light_position.is_finite() || !(self.light_intensity.is_finite() && self.light_intensity >= 0.0) {
            return Err(Error::Config("light position and intensity must be finite".into()));
        }
        if self
            .image
            .data
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::Config("image values must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            camera_position: self.camera_position,
            light_position: self.light_position,
            light_intensity: self.light_intensity,
        }
    }

    pub fn with_image(mut self, image: Image) -> Self {
        self.image = image;
        self
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }
}

/// A flash view: camera and light both at `(offset_xy, distance)`, with an
/// empty `resolution x resolution` image.
pub fn make_collocated_view(
    distance: f64,
    intensity: f64,
    resolution: usize,
    offset_xy: [f64; 2],
) -> Result<CaptureView, Error> {
    if !(distance > 0.0) {
        return Err(Error::Config(format!("distance must be positive, got {distance}")));
    }
    let pos = DVec3::new(offset_xy[0], offset_xy[1], distance);
    CaptureView::new(pos, pos, intensity, Image::black(resolution, resolution))
}

/// The 3x3 flash grid of the capture protocol: offsets `{-spacing, 0,
/// spacing}^2`, listed row by row from the top-left.
pub fn capture_grid(
    distance: f64,
    intensity: f64,
    resolution: usize,
    spacing: f64,
) -> Result<Vec<CaptureView>, Error> {
    let mut views = Vec::with_capacity(9);
    for gy in [1.0, 0.0, -1.0] {
        for gx in [-1.0, 0.0, 1.0] {
            views.push(make_collocated_view(
                distance,
                intensity,
                resolution,
                [gx * spacing, gy * spacing],
            )?);
        }
    }
    Ok(views)
}

/// Plane position of pixel `(col, row)`.
pub fn pixel_position(col: usize, row: usize, width: usize, height: usize) -> DVec3 {
    DVec3::new(
        (col as f64 + 0.5) / width as f64 - 0.5,
        0.5 - (row as f64 + 0.5) / height as f64,
        0.0,
    )
}

struct PixelFrame {
    wi: DVec3,
    wo: DVec3,
    h: DVec3,
    falloff: f64,
}

fn frame(geom: &ViewGeometry, x: DVec3) -> PixelFrame {
    let to_light = geom.light_position - x;
    let wi = to_light.normalize();
    let wo = (geom.camera_position - x).normalize();
    PixelFrame {
        wi,
        wo,
        h: (wi + wo).normalize(),
        falloff: geom.light_intensity / to_light.length_squared(),
    }
}

fn shade(a: Rgb, nxy: [f64; 2], r: f64, s: Rgb, fr: &PixelFrame) -> Rgb {
    let n = decode_normal(nxy);
    let ci = n.dot(fr.wi);
    let co = n.dot(fr.wo);
    if ci <= 0.0 || co <= 0.0 {
        return [0.0; 3];
    }
    let alpha = r * r;
    let d = ggx_ndf(n.dot(fr.h).max(0.0), alpha);
    let g = smith_g1(ci, alpha) * smith_g1(co, alpha);
    let f = fresnel_schlick(fr.wo.dot(fr.h), s);
    let spec = d * g / (4.0 * co);
    [0, 1, 2].map(|c| (fr.falloff * (a[c] / PI * ci + spec * f[c])).max(0.0))
}

/// Jacobian-transpose of `decode_normal` applied to an adjoint on the
/// decoded normal.
fn decode_normal_adjoint(xy: [f64; 2], dn: DVec3) -> [f64; 2] {
    let [x, y] = xy;
    let r2 = x * x + y * y;
    if r2 > 1.0 {
        let r = r2.sqrt();
        let r3 = r * r2;
        [
            dn.x * y * y / r3 - dn.y * x * y / r3,
            -dn.x * x * y / r3 + dn.y * x * x / r3,
        ]
    } else {
        let z = (1.0 - r2).max(0.0).sqrt().max(1e-6);
        [dn.x - dn.z * x / z, dn.y - dn.z * y / z]
    }
}

struct PixelGrad {
    albedo: Rgb,
    normal_xy: [f64; 2],
    roughness: f64,
    specular: Rgb,
}

fn shade_adjoint(a: Rgb, nxy: [f64; 2], r: f64, s: Rgb, fr: &PixelFrame, dout: Rgb) -> Option<PixelGrad> {
    let n = decode_normal(nxy);
    let ci = n.dot(fr.wi);
    let co = n.dot(fr.wo);
    if ci <= 0.0 || co <= 0.0 {
        return None;
    }
    let k = fr.falloff;
    let alpha = r * r;
    let a2 = alpha * alpha;
    let ch = n.dot(fr.h).max(0.0);
    let woh = fr.wo.dot(fr.h);

    let q = ch * ch * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * q * q);
    let dd_dalpha = 2.0 * alpha / (PI * q * q) - 4.0 * alpha * a2 * ch * ch / (PI * q * q * q);
    let dd_dch = -4.0 * a2 * ch * (a2 - 1.0) / (PI * q * q * q);

    let t_of = |c: f64| (a2 + (1.0 - a2) * c * c).sqrt();
    let (ti, to) = (t_of(ci), t_of(co));
    let (gi, go) = (2.0 * ci / (ci + ti), 2.0 * co / (co + to));
    let dgi_dc = 2.0 * a2 / (ti * (ci + ti).powi(2));
    let dgo_dc = 2.0 * a2 / (to * (co + to).powi(2));
    let dgi_dalpha = -2.0 * ci * alpha * (1.0 - ci * ci) / ti / (ci + ti).powi(2);
    let dgo_dalpha = -2.0 * co * alpha * (1.0 - co * co) / to / (co + to).powi(2);

    let schlick = (1.0 - woh).clamp(0.0, 1.0).powi(5);
    let f = s.map(|f0| f0 + (1.0 - f0) * schlick);
    let spec_base = d * gi * go / (4.0 * co);

    let s_f: f64 = (0..3).map(|c| dout[c] * f[c]).sum();
    let s_a: f64 = (0..3).map(|c| dout[c] * a[c]).sum();

    let dalpha = k * s_f * (dd_dalpha * gi * go + d * (dgi_dalpha * go + gi * dgo_dalpha)) / (4.0 * co);
    let dci = k * (s_a / PI + s_f * d * dgi_dc * go / (4.0 * co));
    let dco = k * s_f * d * gi * (dgo_dc / co - go / (co * co)) / 4.0;
    let dch = k * s_f * dd_dch * gi * go / (4.0 * co);
    let dn = fr.wi * dci + fr.wo * dco + fr.h * dch;

    Some(PixelGrad {
        albedo: dout.map(|g| g * k * ci / PI),
        normal_xy: decode_normal_adjoint(nxy, dn),
        roughness: dalpha * 2.0 * r,
        specular: dout.map(|g| g * k * spec_base * (1.0 - schlick)),
    })
}

/// Gradient with respect to every map channel, laid out like the maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MapGradient {
    pub width: usize,
    pub height: usize,
    pub albedo: Vec<Rgb>,
    pub normal_xy: Vec<[f64; 2]>,
    pub roughness: Vec<f64>,
    pub specular: Vec<Rgb>,
}

impl MapGradient {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        MapGradient {
            width,
            height,
            albedo: vec![[0.0; 3]; n],
            normal_xy: vec![[0.0; 2]; n],
            roughness: vec![0.0; n],
            specular: vec![[0.0; 3]; n],
        }
    }

    /// Same planar layout as [`SvbrdfMaps::to_planes`].
    pub fn to_planes(&self) -> Vec<f64> {
        let as_maps = SvbrdfMaps {
            width: self.width,
            height: self.height,
            albedo: self.albedo.clone(),
            normal_xy: self.normal_xy.clone(),
            roughness: self.roughness.clone(),
            specular: self.specular.clone(),
        };
        as_maps.to_planes()
    }

    pub fn is_zero(&self) -> bool {
        self.to_planes().iter().all(|&v| v == 0.0)
    }
}

fn check_dims(maps: &SvbrdfMaps, width: usize, height: usize) -> Result<(), Error> {
    if maps.width != width || maps.height != height {
        return Err(Error::Config(format!(
            "maps are {}x{} but the view expects {width}x{height}",
            maps.width, maps.height
        )));
    }
    if maps.albedo.len() != maps.pixels()
        || maps.normal_xy.len() != maps.pixels()
        || maps.roughness.len() != maps.pixels()
        || maps.specular.len() != maps.pixels()
    {
        return Err(Error::Config("map channel lengths differ from width*height".into()));
    }
    Ok(())
}

/// Renders `maps` under a view's light at `width x height`.
pub fn render_geometry(maps: &SvbrdfMaps, geom: &ViewGeometry, width: usize, height: usize) -> Result<Image, Error> {
    check_dims(maps, width, height)?;
    let mut img = Image::black(width, height);
    for row in 0..height {
        for col in 0..width {
            let p = row * width + col;
            let fr = frame(geom, pixel_position(col, row, width, height));
            img.data[p] = shade(maps.albedo[p], maps.normal_xy[p], maps.roughness[p], maps.specular[p], &fr);
        }
    }
    Ok(img)
}

/// Renders `maps` as seen in `view`; the output matches the view's image size.
pub fn render(maps: &SvbrdfMaps, view: &CaptureView) -> Result<RenderedImage, Error> {
    let (w, h) = view.resolution();
    render_geometry(maps, &view.geometry(), w, h)
}

pub fn render_backward_geometry(
    maps: &SvbrdfMaps,
    geom: &ViewGeometry,
    d_out: &Image,
) -> Result<MapGradient, Error> {
    let (width, height) = (d_out.width, d_out.height);
    check_dims(maps, width, height)?;
    let mut grad = MapGradient::zeros(width, height);
    for row in 0..height {
        for col in 0..width {
            let p = row * width + col;
            let dout = d_out.data[p];
            if dout == [0.0; 3] {
                continue;
            }
            let fr = frame(geom, pixel_position(col, row, width, height));
            if let Some(g) = shade_adjoint(maps.albedo[p], maps.normal_xy[p], maps.roughness[p], maps.specular[p], &fr, dout) {
                grad.albedo[p] = g.albedo;
                grad.normal_xy[p] = g.normal_xy;
                grad.roughness[p] = g.roughness;
                grad.specular[p] = g.specular;
            }
        }
    }
    Ok(grad)
}

/// Gradient of `sum(d_out * render(maps, view))` with respect to the maps.
pub fn render_backward(maps: &SvbrdfMaps, view: &CaptureView, d_out: &Image) -> Result<MapGradient, Error> {
    let (w, h) = view.resolution();
    if d_out.width != w || d_out.height != h {
        return Err(Error::Config("adjoint image size differs from the view".into()));
    }
    render_backward_geometry(maps, &view.geometry(), d_out)
}

/// Maps tensor `[1,9,H,W]` to [`SvbrdfMaps`] (no range checks).
pub fn maps_from_tensor<T: Real>(t: &Tensor<T>) -> Result<SvbrdfMaps, Error> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 9 {
        return Err(Error::Config(format!("expected a [1,9,H,W] map tensor, got {:?}", t.shape())));
    }
    let planes: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    SvbrdfMaps::from_planes(w, h, &planes)
}

pub fn maps_to_tensor<T: Real>(maps: &SvbrdfMaps) -> Tensor<T> {
    let data = maps.to_planes().into_iter().map(T::from_f64).collect();
    Tensor::from_vec([1, 9, maps.height, maps.width], data).expect("plane count")
}

/// Records the rendering of a `[1,9,H,W]` map tensor under every view as a
/// `[k,3,H,W]` tensor, with the analytic adjoint as its backward rule.
pub fn record_render<T: Real>(tape: &mut Tape<T>, maps: Var, views: &[ViewGeometry]) -> Result<Var, Error> {
    let m = maps_from_tensor(tape.value(maps))?;
    let (w, h) = (m.width, m.height);
    let mut data = Vec::with_capacity(views.len() * 3 * w * h);
    for g in views {
        let img = render_geometry(&m, g, w, h)?;
        data.extend(img.to_planes().into_iter().map(T::from_f64));
    }
    let value = Tensor::from_vec([views.len(), 3, h, w], data)?;
    let geoms = views.to_vec();
    let backward = Box::new(move |inputs: &[&Tensor<T>], g: &Tensor<T>| {
        let m = maps_from_tensor(inputs[0]).expect("validated in forward");
        let mut acc = vec![0.0f64; 9 * w * h];
        for (k, geom) in geoms.iter().enumerate() {
            let planes: Vec<f64> = g.sample(k).iter().map(|v| v.as_f64()).collect();
            let dimg = Image::from_planes(w, h, &planes);
            let grad = render_backward_geometry(&m, geom, &dimg).expect("validated in forward");
            for (a, v) in acc.iter_mut().zip(grad.to_planes()) {
                *a += v;
            }
        }
        let t = Tensor::from_vec([1, 9, h, w], acc.into_iter().map(T::from_f64).collect()).expect("shape");
        vec![Some(t)]
    });
    Ok(tape.custom(&[maps], value, backward))
}
