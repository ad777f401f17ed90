//! Error metrics between material maps and between renderings, the fit
//! report, and latent morphing.

use std::fmt::Write as _;
use std::path::Path;

use crate::generator::{lerp_latent, Generator, LatentState};
use crate::invert::{canonical_view, perceptual_loss, FeatureExtractor, LossConfig};
use crate::material::SvbrdfMaps;
use crate::render::{render, CaptureView, Image};
use crate::train::blend_maps;
use crate::Error;

/// Per-map errors between two sets of maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapRmse {
    pub albedo: f64,
    /// Root mean square angle between decoded normals, in degrees.
    pub normal_deg: f64,
    /// RMSE of the stored normal `(x, y)` channels.
    pub normal: f64,
    pub roughness: f64,
    pub specular: f64,
    /// RMSE over all 9 channels.
    pub total: f64,
}

pub fn map_rmse(a: &SvbrdfMaps, b: &SvbrdfMaps) -> Result<MapRmse, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config(format!(
            "map sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.pixels() as f64;
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let mut s_alb = 0.0;
    let mut s_nrm = 0.0;
    let mut s_spec = 0.0;
    let mut s_ang = 0.0;
    for p in 0..a.pixels() {
        s_alb += sq(&a.albedo[p], &b.albedo[p]);
        s_nrm += sq(&a.normal_xy[p], &b.normal_xy[p]);
        s_spec += sq(&a.specular[p], &b.specular[p]);
        let c = a.normal(p).dot(b.normal(p)).clamp(-1.0, 1.0);
        s_ang += c.acos().to_degrees().powi(2);
    }
    let s_rough = sq(&a.roughness, &b.roughness);
    Ok(MapRmse {
        albedo: (s_alb / (3.0 * n)).sqrt(),
        normal_deg: (s_ang / n).sqrt(),
        normal: (s_nrm / (2.0 * n)).sqrt(),
        roughness: (s_rough / n).sqrt(),
        specular: (s_spec / (3.0 * n)).sqrt(),
        total: ((s_alb + s_nrm + s_rough + s_spec) / (9.0 * n)).sqrt(),
    })
}

/// RMSE between two images after the display transform
/// `clamp(v, lo, 1)^(1/2.2)` used for comparisons.
pub fn image_rmse(a: &Image, b: &Image) -> Result<f64, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config("image sizes differ".into()));
    }
    let tone = crate::render::tone_map;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (tone(p[c]) - tone(q[c])).powi(2)).sum::<f64>())
        .sum();
    Ok((s / (3 * a.data.len()) as f64).sqrt())
}

/// Scores of a fit against ground truth and photographs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub maps: MapRmse,
    /// Re-render RMSE on each view used by the fit.
    pub fit_view_rmse: Vec<f64>,
    /// Re-render RMSE on each held-out view.
    pub novel_view_rmse: Vec<f64>,
    /// Mean feature-space distance on the held-out views.
    pub novel_feature_distance: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn fit_view_mean(&self) -> f64 {
        mean(&self.fit_view_rmse)
    }

    pub fn novel_view_mean(&self) -> f64 {
        mean(&self.novel_view_rmse)
    }

    /// `metric=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.maps;
        for (k, v) in [
            ("albedo_rmse", m.albedo),
            ("normal_deg", m.normal_deg),
            ("normal_rmse", m.normal),
            ("roughness_rmse", m.roughness),
            ("specular_rmse", m.specular),
            ("total_rmse", m.total),
        ] {
            writeln!(s, "{k}={v}").expect("string write");
        }
        for (i, v) in self.fit_view_rmse.iter().enumerate() {
            writeln!(s, "fit_view_{i}_rmse={v}").expect("string write");
        }
        for (i, v) in self.novel_view_rmse.iter().enumerate() {
            writeln!(s, "novel_view_{i}_rmse={v}").expect("string write");
        }
        writeln!(s, "fit_view_mean_rmse={}", self.fit_view_mean()).expect("string write");
        writeln!(s, "novel_view_mean_rmse={}", self.novel_view_mean()).expect("string write");
        writeln!(s, "novel_feature_distance={}", self.novel_feature_distance).expect("string write");
        s
    }

    /// Inverse of [`EvalReport::to_text`]. Derived lines (means) are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line without '=': {line}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number in report line: {line}")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("report lacks {k}")));
        let list = |prefix: &str| {
            (0..)
                .map_while(|i| kv.get(&format!("{prefix}_{i}_rmse")).copied())
                .collect::<Vec<f64>>()
        };
        Ok(EvalReport {
            maps: MapRmse {
                albedo: get("albedo_rmse")?,
                normal_deg: get("normal_deg")?,
                normal: get("normal_rmse")?,
                roughness: get("roughness_rmse")?,
                specular: get("specular_rmse")?,
                total: get("total_rmse")?,
            },
            fit_view_rmse: list("fit_view"),
            novel_view_rmse: list("novel_view"),
            novel_feature_distance: get("novel_feature_distance")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn same_setup(a: &CaptureView, b: &CaptureView) -> bool {
    a.camera_position == b.camera_position
        && a.light_position == b.light_position
        && a.light_intensity == b.light_intensity
}

/// Scores `maps` against `ground_truth` and against the photographs of
/// both view sets. A view whose camera, light and intensity all match a fit
/// view cannot serve as a held-out view, and is rejected.
pub fn eval_fit(
    maps: &SvbrdfMaps,
    ground_truth: &SvbrdfMaps,
    fit_views: &[CaptureView],
    novel_views: &[CaptureView],
    extractor: &FeatureExtractor,
    loss: &LossConfig,
) -> Result<EvalReport, Error> {
    if let Some(i) = novel_views.iter().position(|n| fit_views.iter().any(|f| same_setup(f, n))) {
        return Err(Error::Config(format!("novel view {i} was also used for fitting")));
    }
    let rerender = |views: &[CaptureView]| -> Result<Vec<(Image, f64)>, Error> {
        views
            .iter()
            .map(|v| {
                let img = render(maps, v)?;
                let e = image_rmse(&img, &v.image)?;
                Ok((img, e))
            })
            .collect()
    };
    let fit = rerender(fit_views)?;
    let novel = rerender(novel_views)?;
    let mut feat = Vec::new();
    for ((img, _), v) in novel.iter().zip(novel_views) {
        feat.push(perceptual_loss(extractor, img, &v.image, &loss.w_plus_layers, loss.space)?);
    }
    Ok(EvalReport {
        maps: map_rmse(maps, ground_truth)?,
        fit_view_rmse: fit.into_iter().map(|(_, e)| e).collect(),
        novel_view_rmse: novel.into_iter().map(|(_, e)| e).collect(),
        novel_feature_distance: mean(&feat),
    })
}

/// Frames of a morph between two materials.
#[derive(Clone, Debug, PartialEq)]
pub struct Morph {
    /// Decoded latent interpolations, `t = i / (steps - 1)`.
    pub latent: Vec<SvbrdfMaps>,
    /// Per-pixel interpolation of the two end materials at the same `t`.
    pub pixel: Vec<SvbrdfMaps>,
    /// [`canonical_view`] renderings of `latent`.
    pub latent_renders: Vec<Image>,
    /// [`canonical_view`] renderings of `pixel`.
    pub pixel_renders: Vec<Image>,
}

pub fn morph(g: &Generator, a: &LatentState, b: &LatentState, steps: usize) -> Result<Morph, Error> {
    if steps < 2 {
        return Err(Error::Config(format!("a morph needs at least 2 steps, got {steps}")));
    }
    a.check(&g.config)?;
    b.check(&g.config)?;
    let (ma, mb) = (g.synthesize(a)?, g.synthesize(b)?);
    let view = canonical_view(g.config.resolution())?;
    let mut out = Morph {
        latent: Vec::new(),
        pixel: Vec::new(),
        latent_renders: Vec::new(),
        pixel_renders: Vec::new(),
    };
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let lm = match i {
            0 => ma.clone(),
            _ if i == steps - 1 => mb.clone(),
            _ => g.synthesize(&lerp_latent(a, b, t)?)?,
        };
        // blend_maps weights its first argument by t
        let pm = blend_maps(&mb, &ma, t);
        out.latent_renders.push(render(&lm, &view)?);
        out.pixel_renders.push(render(&pm, &view)?);
        out.latent.push(lm);
        out.pixel.push(pm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_have_zero_error() {
        let m = SvbrdfMaps::uniform(4, 4, [0.2, 0.3, 0.4], [0.1, 0.2], 0.3, [0.5; 3]);
        let e = map_rmse(&m, &m).unwrap();
        assert_eq!(e.total, 0.0);
        assert_eq!(e.normal_deg, 0.0);
    }

    #[test]
    fn tilted_normal_is_45_degrees() {
        let flat = SvbrdfMaps::uniform(3, 3, [0.5; 3], [0.0, 0.0], 0.5, [0.5; 3]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let tilted = SvbrdfMaps::uniform(3, 3, [0.5; 3], [s, 0.0], 0.5, [0.5; 3]);
        assert!((map_rmse(&flat, &tilted).unwrap().normal_deg - 45.0).abs() < 1e-9);
    }

    #[test]
    fn random_pair_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut mk = || {
            let mut m = SvbrdfMaps::uniform(5, 4, [0.0; 3], [0.0; 2], 0.5, [0.0; 3]);
            for p in 0..20 {
                m.albedo[p] = [rng.random(), rng.random(), rng.random()];
                m.normal_xy[p] = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
                m.roughness[p] = rng.random_range(0.02..1.0);
                m.specular[p] = [rng.random(), rng.random(), rng.random()];
            }
            m
        };
        let (a, b) = (mk(), mk());
        let e = map_rmse(&a, &b).unwrap();
        let (pa, pb) = (a.to_planes(), b.to_planes());
        let plane = |c: usize| -> f64 {
            (0..20).map(|p| (pa[c * 20 + p] - pb[c * 20 + p]).powi(2)).sum::<f64>()
        };
        let alb = ((plane(0) + plane(1) + plane(2)) / 60.0).sqrt();
        let rough = (plane(5) / 20.0).sqrt();
        let total = ((0..9).map(plane).sum::<f64>() / 180.0).sqrt();
        assert!((e.albedo - alb).abs() < 1e-12);
        assert!((e.roughness - rough).abs() < 1e-12);
        assert!((e.total - total).abs() < 1e-12);
        let mut ang = 0.0;
        for p in 0..20 {
            let (u, v) = (a.normal(p), b.normal(p));
            let cos = (u.x * v.x + u.y * v.y + u.z * v.z) / (u.length() * v.length());
            ang += cos.clamp(-1.0, 1.0).acos().to_degrees().powi(2);
        }
        assert!((e.normal_deg - (ang / 20.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let a = SvbrdfMaps::uniform(3, 3, [0.5; 3], [0.0, 0.0], 0.5, [0.5; 3]);
        let b = SvbrdfMaps::uniform(4, 3, [0.5; 3], [0.0, 0.0], 0.5, [0.5; 3]);
        assert!(map_rmse(&a, &b).is_err());
    }

    fn views_of(m: &SvbrdfMaps) -> Vec<CaptureView> {
        let mut v = crate::render::capture_grid(1.2, 2.0, m.width, 0.35).unwrap();
        for view in &mut v {
            view.image = render(m, view).unwrap();
        }
        v
    }

    fn glossy(n: usize) -> SvbrdfMaps {
        SvbrdfMaps::uniform(n, n, [0.3, 0.4, 0.5], [0.1, -0.05], 0.25, [0.3; 3])
    }

    #[test]
    fn ground_truth_scores_zero() {
        let m = glossy(8);
        let views = views_of(&m);
        let (fit, novel) = views.split_at(5);
        let r = eval_fit(&m, &m, fit, novel, &FeatureExtractor::default(), &LossConfig::default()).unwrap();
        assert_eq!(r.maps.total, 0.0);
        assert!(r.fit_view_rmse.iter().chain(&r.novel_view_rmse).all(|&v| v == 0.0));
        assert_eq!(r.novel_feature_distance, 0.0);
        assert_eq!(r.fit_view_rmse.len(), 5);
    }

    #[test]
    fn overlapping_view_sets_are_refused() {
        let m = glossy(8);
        let views = views_of(&m);
        let e = eval_fit(&m, &m, &views[..5], &views[4..], &FeatureExtractor::default(), &LossConfig::default());
        assert!(e.is_err());
    }

    #[test]
    fn report_text_round_trips() {
        let m = glossy(8);
        let other = SvbrdfMaps::uniform(8, 8, [0.5; 3], [0.0; 2], 0.6, [0.1; 3]);
        let views = views_of(&m);
        let r = eval_fit(&other, &m, &views[..3], &views[3..], &FeatureExtractor::default(), &LossConfig::default()).unwrap();
        assert!(r.maps.total > 0.0 && r.novel_view_mean() > 0.0);
        assert_eq!(EvalReport::parse(&r.to_text()).unwrap(), r);
        assert!(EvalReport::parse("albedo_rmse=x").is_err());
    }

    #[test]
    fn morph_endpoints_and_midpoint() {
        let g = Generator::init(crate::generator::GeneratorConfig::tiny(), 4).unwrap();
        let (ma, a) = g.sample_material(1).unwrap();
        let (mb, b) = g.sample_material(2).unwrap();
        let mo = morph(&g, &a, &b, 5).unwrap();
        assert_eq!(mo.latent.len(), 5);
        assert_eq!(mo.latent[0], ma);
        assert_eq!(mo.latent[4], mb);
        assert!(map_rmse(&mo.pixel[0], &ma).unwrap().total < 1e-12);
        assert!(map_rmse(&mo.pixel[4], &mb).unwrap().total < 1e-12);
        for m in mo.latent.iter().chain(&mo.pixel) {
            m.validate().unwrap();
        }
        assert!(map_rmse(&mo.latent[2], &mo.pixel[2]).unwrap().total > 0.0);
        assert!(morph(&g, &a, &b, 1).is_err());
    }
}
