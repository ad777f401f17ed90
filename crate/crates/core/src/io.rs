//! Files on disk: map bundles, capture manifests and photograph
//! rectification.
//!
//! A map bundle is a directory holding four 16-bit PNGs:
//!
//! | file            | content                                        |
//! |-----------------|------------------------------------------------|
//! | `albedo.png`    | linear RGB                                     |
//! | `normal.png`    | `(x, y, z)` each stored as `(v + 1) / 2`; `z` is informational |
//! | `roughness.png` | gray                                           |
//! | `specular.png`  | linear RGB                                     |
//!
//! A capture manifest is JSON:
//!
//! ```json
//! {
//!   "size_m": 0.1,
//!   "resolution": 64,
//!   "views": [
//!     { "image": "view_0.png", "camera": [0.0, 0.0, 0.1], "light": [0.0, 0.0, 0.1],
//!       "intensity": 0.015, "exposure": 1.0, "homography": null }
//!   ]
//! }
//! ```
//!
//! Positions are in metres with the sample centred at the origin of the
//! `z = 0` plane. The renderer works in units of the sample width, so
//! positions are divided by `size_m` and intensities by `size_m^2` on load.
//! 8-bit images are treated as gamma 2.2 encoded, 16-bit images as linear;
//! both are multiplied by `exposure`. When `homography` (row-major, mapping
//! photo pixels to frontal pixels) is given the photo is rectified to
//! `resolution x resolution` first.

use std::path::{Path, PathBuf};

use glam::DVec3;
use image::{DynamicImage, ImageBuffer, Luma, Rgb as PxRgb};
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::material::{decode_normal, project_to_disk, SvbrdfMaps};
use crate::render::{CaptureView, Image, DISPLAY_GAMMA};
use crate::Error;

pub const MAP_FILES: [&str; 4] = ["albedo.png", "normal.png", "roughness.png", "specular.png"];

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn q16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn dq16(v: u16) -> f64 {
    v as f64 / 65535.0
}

fn write_rgb16(path: &Path, w: usize, h: usize, px: impl Fn(usize) -> [f64; 3]) -> Result<(), Error> {
    let mut buf: ImageBuffer<PxRgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, p) in buf.pixels_mut().enumerate() {
        *p = PxRgb(px(i).map(q16));
    }
    buf.save(path).map_err(|e| image_err(path, e))
}

fn read_rgb16(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), Error> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0.map(dq16)).collect()))
}

/// Writes the four map PNGs into `dir`, creating it if needed.
pub fn save_bundle(maps: &SvbrdfMaps, dir: &Path) -> Result<(), Error> {
    maps.validate()?;
    std::fs::create_dir_all(dir)?;
    let (w, h) = (maps.width, maps.height);
    write_rgb16(&dir.join(MAP_FILES[0]), w, h, |p| maps.albedo[p])?;
    write_rgb16(&dir.join(MAP_FILES[1]), w, h, |p| {
        let n = decode_normal(maps.normal_xy[p]);
        [n.x, n.y, n.z].map(|v| (v + 1.0) / 2.0)
    })?;
    let mut rough: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (p, px) in rough.pixels_mut().enumerate() {
        *px = Luma([q16(maps.roughness[p])]);
    }
    let rp = dir.join(MAP_FILES[2]);
    rough.save(&rp).map_err(|e| image_err(&rp, e))?;
    write_rgb16(&dir.join(MAP_FILES[3]), w, h, |p| maps.specular[p])?;
    Ok(())
}

/// Reads a bundle written by [`save_bundle`]. Values are snapped into their
/// valid ranges, which only matters for hand-edited files.
pub fn load_bundle(dir: &Path) -> Result<SvbrdfMaps, Error> {
    for f in MAP_FILES {
        if !dir.join(f).is_file() {
            return Err(Error::Format(format!("{} is missing {f}", dir.display())));
        }
    }
    let (w, h, albedo) = read_rgb16(&dir.join(MAP_FILES[0]))?;
    let (nw, nh, normal) = read_rgb16(&dir.join(MAP_FILES[1]))?;
    let rp = dir.join(MAP_FILES[2]);
    let rough = image::open(&rp).map_err(|e| image_err(&rp, e))?.to_luma16();
    let (sw, sh, specular) = read_rgb16(&dir.join(MAP_FILES[3]))?;
    let (rw, rh) = (rough.width() as usize, rough.height() as usize);
    if [(nw, nh), (rw, rh), (sw, sh)].iter().any(|&d| d != (w, h)) {
        return Err(Error::Format(format!(
            "map sizes differ in {}: albedo {w}x{h}, normal {nw}x{nh}, roughness {rw}x{rh}, specular {sw}x{sh}",
            dir.display()
        )));
    }
    let mut maps = SvbrdfMaps {
        width: w,
        height: h,
        albedo,
        normal_xy: normal
            .iter()
            .map(|n| project_to_disk([2.0 * n[0] - 1.0, 2.0 * n[1] - 1.0]))
            .collect(),
        roughness: rough.pixels().map(|p| dq16(p.0[0])).collect(),
        specular,
    };
    maps.snap_to_domain();
    Ok(maps)
}

/// Writes a linear image as a 16-bit PNG, clipping at 1.
pub fn save_image16(img: &Image, path: &Path) -> Result<(), Error> {
    write_rgb16(path, img.width, img.height, |p| img.data[p])
}

/// Writes `tone_map`-ed values as an 8-bit PNG for viewing.
pub fn save_image_preview(img: &Image, path: &Path) -> Result<(), Error> {
    let mut buf: ImageBuffer<PxRgb<u8>, Vec<u8>> = ImageBuffer::new(img.width as u32, img.height as u32);
    for (p, px) in buf.pixels_mut().enumerate() {
        *px = PxRgb(img.data[p].map(|v| (crate::render::tone_map(v) * 255.0).round() as u8));
    }
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Loads a photograph as linear radiance.
pub fn load_image_linear(path: &Path, exposure: f64) -> Result<Image, Error> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let eight_bit = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if eight_bit {
        img.to_rgb8()
            .pixels()
            .map(|p| p.0.map(|v| (v as f64 / 255.0).powf(DISPLAY_GAMMA) * exposure))
            .collect()
    } else {
        img.to_rgb16().pixels().map(|p| p.0.map(|v| dq16(v) * exposure)).collect()
    };
    Ok(Image { width: w, height: h, data })
}

/// Row-major 3x3 homography acting on `(x, y, 1)` pixel coordinates, where
/// pixel `(col, row)` has its centre at `(col + 0.5, row + 0.5)`.
pub type Homography = Matrix3<f64>;

pub fn apply_homography(h: &Homography, p: [f64; 2]) -> [f64; 2] {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Output of [`rectify`]: the frontal image and which pixels had a source.
#[derive(Clone, Debug, PartialEq)]
pub struct Rectified {
    pub image: Image,
    pub valid: Vec<bool>,
}

/// Warps `image` into the frontal frame: output pixel `q` samples the source
/// at `H^-1 q` bilinearly. Pixels whose preimage falls outside the source
/// are black and flagged invalid.
pub fn rectify(image: &Image, homography: &Homography, out_resolution: usize) -> Result<Rectified, Error> {
    if homography.determinant().abs() <= 1e-9 {
        return Err(Error::Config("homography is singular".into()));
    }
    let inv = homography
        .try_inverse()
        .ok_or_else(|| Error::Config("homography is singular".into()))?;
    let (w, h) = (image.width, image.height);
    let n = out_resolution;
    let mut out = Image::black(n, n);
    let mut valid = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let [sx, sy] = apply_homography(&inv, [c as f64 + 0.5, r as f64 + 0.5]);
            let (u, v) = (sx - 0.5, sy - 0.5);
            let inside = sx.is_finite()
                && sy.is_finite()
                && u >= -0.5 - 1e-9
                && v >= -0.5 - 1e-9
                && u <= w as f64 - 0.5 + 1e-9
                && v <= h as f64 - 0.5 + 1e-9;
            if !inside {
                continue;
            }
            let u = u.clamp(0.0, (w - 1) as f64);
            let v = v.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (u - x0 as f64, v - y0 as f64);
            let px = |x: usize, y: usize| image.data[y * w + x];
            let mut acc = [0.0; 3];
            for ch in 0..3 {
                let top = px(x0, y0)[ch] * (1.0 - tx) + px(x1, y0)[ch] * tx;
                let bot = px(x0, y1)[ch] * (1.0 - tx) + px(x1, y1)[ch] * tx;
                acc[ch] = top * (1.0 - ty) + bot * ty;
            }
            out.data[r * n + c] = acc;
            valid[r * n + c] = true;
        }
    }
    Ok(Rectified { image: out, valid })
}

/// A fitted homography and its reprojection error in destination pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HomographyFit {
    pub homography: Homography,
    pub rmse: f64,
}

/// Similarity transform moving the centroid to the origin and the mean
/// distance to `sqrt(2)`.
fn normalizer(pts: &[[f64; 2]]) -> Result<Matrix3<f64>, Error> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_d > 1e-12) {
        return Err(Error::Config("correspondences are degenerate (coincident points)".into()));
    }
    // collinearity: the spread covariance must have two non-negligible axes
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = ((p[0] - cx) / mean_d, (p[1] - cy) / mean_d);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if det / (tr * tr) < 1e-10 {
        return Err(Error::Config("correspondences are degenerate (collinear points)".into()));
    }
    let s = 2f64.sqrt() / mean_d;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform from at least four correspondences
/// `src[i] -> dst[i]`. The result is scaled so that its bottom-right entry is
/// 1 (or to unit Frobenius norm when that entry vanishes).
pub fn estimate_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<HomographyFit, Error> {
    if src.len() != dst.len() {
        return Err(Error::Config("correspondence lists differ in length".into()));
    }
    if src.len() < 4 {
        return Err(Error::Config(format!("need at least 4 correspondences, got {}", src.len())));
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let n = src.len();
    // pad to a square system so the SVD exposes the full right null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let p = apply_homography(&ts, src[i]);
        let q = apply_homography(&td, dst[i]);
        let (x, y, u, v) = (p[0], p[1], q[0], q[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, &s)| if s < b.1 { (i, s) } else { b });
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity is invertible");
    let mut hm = td_inv * hn * ts;
    let scale = if hm[(2, 2)].abs() > 1e-12 { hm[(2, 2)] } else { hm.norm() };
    hm /= scale;
    if hm.determinant().abs() <= 1e-12 {
        return Err(Error::Config("correspondences are degenerate (singular solution)".into()));
    }
    let rmse = (src
        .iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = apply_homography(&hm, *s);
            (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
        })
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Ok(HomographyFit { homography: hm, rmse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: PathBuf,
    pub camera: [f64; 3],
    pub light: [f64; 3],
    pub intensity: f64,
    #[serde(default = "one")]
    pub exposure: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[[f64; 3]; 3]>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub size_m: f64,
    pub resolution: usize,
    pub views: Vec<ViewEntry>,
}

impl CaptureManifest {
    pub fn validate(&self) -> Result<(), Error> {
        if self.views.is_empty() {
            return Err(Error::Config("capture manifest lists no views".into()));
        }
        if !(self.size_m > 0.0) || self.resolution == 0 {
            return Err(Error::Config("size_m and resolution must be positive".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if let Some(h) = v.homography {
                if to_matrix(h).determinant().abs() <= 1e-9 {
                    return Err(Error::Config(format!("view {i} has a singular homography")));
                }
            }
            if !(v.exposure > 0.0) || !(v.intensity >= 0.0) {
                return Err(Error::Config(format!("view {i} needs positive exposure and non-negative intensity")));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let m: CaptureManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn to_matrix(h: [[f64; 3]; 3]) -> Homography {
    Matrix3::from_fn(|r, c| h[r][c])
}

/// Loads every view of a manifest as renderer-ready [`CaptureView`]s.
/// Relative image paths are resolved against the manifest's directory.
pub fn load_capture(manifest_path: &Path) -> Result<Vec<CaptureView>, Error> {
    let m = CaptureManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let s = m.size_m;
    m.views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let photo = load_image_linear(&base.join(&v.image), v.exposure)?;
            let image = match v.homography {
                Some(h) => {
                    let r = rectify(&photo, &to_matrix(h), m.resolution)?;
                    if r.valid.iter().any(|&ok| !ok) {
                        return Err(Error::Config(format!(
                            "view {i}: the rectified photo does not cover the whole sample"
                        )));
                    }
                    r.image
                }
                None if photo.width == m.resolution && photo.height == m.resolution => photo,
                None => {
                    return Err(Error::Config(format!(
                        "view {i} is {}x{} but the manifest asks for {} and gives no homography",
                        photo.width, photo.height, m.resolution
                    )))
                }
            };
            CaptureView::new(
                DVec3::from_array(v.camera) / s,
                DVec3::from_array(v.light) / s,
                v.intensity / (s * s),
                image,
            )
        })
        .collect()
}

/// Writes views as 16-bit PNGs plus a manifest (`manifest.json`) in `dir`,
/// using `size_m` for the unit conversion.
pub fn save_capture(views: &[CaptureView], dir: &Path, size_m: f64) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir)?;
    let resolution = views.first().map(|v| v.image.width).unwrap_or(0);
    let mut entries = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let name = PathBuf::from(format!("view_{i}.png"));
        save_image16(&v.image, &dir.join(&name))?;
        entries.push(ViewEntry {
            image: name,
            camera: (v.camera_position * size_m).to_array(),
            light: (v.light_position * size_m).to_array(),
            intensity: v.light_intensity * size_m * size_m,
            exposure: 1.0,
            homography: None,
        });
    }
    let m = CaptureManifest {
        size_m,
        resolution,
        views: entries,
    };
    let path = dir.join("manifest.json");
    m.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        }
    }

    fn random_maps(n: usize, seed: u64) -> SvbrdfMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SvbrdfMaps::uniform(n, n, [0.0; 3], [0.0, 0.0], 0.5, [0.0; 3]);
        for p in 0..n * n {
            m.albedo[p] = [rng.random(), rng.random(), rng.random()];
            let (r, t): (f64, f64) = (rng.random::<f64>().sqrt() * 0.99, rng.random_range(0.0..6.28));
            m.normal_xy[p] = [r * t.cos(), r * t.sin()];
            m.roughness[p] = rng.random_range(0.02..1.0);
            m.specular[p] = [rng.random(), rng.random(), rng.random()];
        }
        m
    }

    #[test]
    fn bundle_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_maps(9, 1);
        save_bundle(&m, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        let q = 1.0 / 65535.0;
        for p in 0..81 {
            for c in 0..3 {
                assert!((back.albedo[p][c] - m.albedo[p][c]).abs() <= q);
                assert!((back.specular[p][c] - m.specular[p][c]).abs() <= q);
            }
            assert!((back.roughness[p] - m.roughness[p]).abs() <= q);
            for c in 0..2 {
                assert!((back.normal_xy[p][c] - m.normal_xy[p][c]).abs() <= 2.0 * q);
            }
        }
    }

    #[test]
    fn zero_maps_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = SvbrdfMaps::uniform(4, 3, [0.0; 3], [0.0, 0.0], 0.5, [0.0; 3]);
        save_bundle(&m, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.albedo, m.albedo);
        assert_eq!(back.specular, m.specular);
        assert!(back.normal_xy.iter().all(|n| n[0].abs() <= 1.0 / 65535.0 && n[1].abs() <= 1.0 / 65535.0));
    }

    #[test]
    fn mismatched_or_missing_maps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&random_maps(4, 2), dir.path()).unwrap();
        let other = tempfile::tempdir().unwrap();
        save_bundle(&random_maps(5, 3), other.path()).unwrap();
        std::fs::copy(other.path().join("roughness.png"), dir.path().join("roughness.png")).unwrap();
        assert!(load_bundle(dir.path()).is_err());
        std::fs::remove_file(dir.path().join("albedo.png")).unwrap();
        assert!(load_bundle(dir.path()).is_err());
    }

    #[test]
    fn identity_rectification() {
        let img = random_image(7, 7, 4);
        let r = rectify(&img, &Matrix3::identity(), 7).unwrap();
        assert!(r.valid.iter().all(|&v| v));
        for (a, b) in r.image.data.iter().zip(&img.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn half_scale_matches_box_downsample() {
        let img = random_image(8, 8, 5);
        let h = Matrix3::new(0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0);
        let r = rectify(&img, &h, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let avg = (img.get(2 * x, 2 * y)[c]
                        + img.get(2 * x + 1, 2 * y)[c]
                        + img.get(2 * x, 2 * y + 1)[c]
                        + img.get(2 * x + 1, 2 * y + 1)[c])
                        / 4.0;
                    assert!((r.image.get(x, y)[c] - avg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn quarter_turn_homography_rotates_the_array() {
        let n = 6;
        let img = random_image(n, n, 6);
        // (x, y) -> (n - y, x)
        let h = Matrix3::new(0.0, -1.0, n as f64, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let r = rectify(&img, &h, n).unwrap();
        for row in 0..n {
            for col in 0..n {
                assert_eq!(r.image.get(n - 1 - row, col), img.get(col, row));
            }
        }
    }

    #[test]
    fn out_of_source_pixels_are_flagged_and_constants_preserved() {
        let img = Image {
            width: 5,
            height: 5,
            data: vec![[0.25, 0.5, 0.75]; 25],
        };
        let h = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let r = rectify(&img, &h, 5).unwrap();
        assert!(!r.valid[0] && r.valid[4]);
        for (px, ok) in r.image.data.iter().zip(&r.valid) {
            if *ok {
                assert_eq!(*px, [0.25, 0.5, 0.75]);
            }
        }
        assert!(rectify(&img, &Matrix3::zeros(), 5).is_err());
    }

    fn known_h() -> Homography {
        Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, -2.0, 1e-4, -2e-4, 1.0)
    }

    #[test]
    fn recovers_a_known_homography_from_four_corners() {
        let h = known_h();
        let src = [[0.0, 0.0], [100.0, 0.0], [100.0, 80.0], [0.0, 80.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|p| apply_homography(&h, *p)).collect();
        let fit = estimate_homography(&src, &dst).unwrap();
        assert!((fit.homography - h).abs().max() < 1e-6, "{}", fit.homography);
        assert!(fit.rmse < 1e-6);
    }

    #[test]
    fn identity_correspondences_give_identity() {
        let pts = [[1.0, 2.0], [5.0, 2.0], [4.0, 7.0], [0.0, 6.0], [2.5, 3.5]];
        let fit = estimate_homography(&pts, &pts).unwrap();
        assert!((fit.homography - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let dst = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(estimate_homography(&src, &dst).is_err());
        assert!(estimate_homography(&dst, &src).is_err());
        assert!(estimate_homography(&dst[..3], &src[..3]).is_err());
    }

    #[test]
    fn estimate_is_invariant_to_similarity_of_the_inputs() {
        let h = known_h();
        let src = [[3.0, 4.0], [90.0, 10.0], [85.0, 70.0], [10.0, 60.0], [40.0, 40.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|p| apply_homography(&h, *p)).collect();
        // scale and shift both point sets; undo the similarity afterwards
        let s = Matrix3::new(3.0, 0.0, 10.0, 0.0, 3.0, -5.0, 0.0, 0.0, 1.0);
        let src2: Vec<[f64; 2]> = src.iter().map(|p| apply_homography(&s, *p)).collect();
        let dst2: Vec<[f64; 2]> = dst.iter().map(|p| apply_homography(&s, *p)).collect();
        let a = estimate_homography(&src, &dst).unwrap().homography;
        let b = estimate_homography(&src2, &dst2).unwrap().homography;
        let mut back = s.try_inverse().unwrap() * b * s;
        back /= back[(2, 2)];
        assert!((a - back).abs().max() < 1e-6);
    }

    #[test]
    fn capture_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let maps = random_maps(8, 7);
        let mut views = crate::render::capture_grid(1.0, 1.5, 8, 0.3).unwrap();
        for v in &mut views {
            v.image = crate::render::render(&maps, v).unwrap();
        }
        let path = save_capture(&views, dir.path(), 0.1).unwrap();
        let back = load_capture(&path).unwrap();
        assert_eq!(back.len(), 9);
        for (a, b) in views.iter().zip(&back) {
            assert!((a.light_position - b.light_position).length() < 1e-12);
            assert!((a.light_intensity - b.light_intensity).abs() < 1e-12);
            for (p, q) in a.image.data.iter().zip(&b.image.data) {
                for c in 0..3 {
                    assert!((p[c].min(1.0) - q[c]).abs() <= 1.0 / 65535.0);
                }
            }
        }
    }

    #[test]
    fn eight_bit_images_are_linearized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let buf: ImageBuffer<PxRgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(2, 2, PxRgb([128, 255, 0]));
        buf.save(&path).unwrap();
        let img = load_image_linear(&path, 2.0).unwrap();
        assert!((img.data[0][0] - 2.0 * (128.0f64 / 255.0).powf(2.2)).abs() < 1e-12);
        assert_eq!(img.data[0][1], 2.0);
        assert_eq!(img.data[0][2], 0.0);
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let m = CaptureManifest {
            size_m: 0.1,
            resolution: 8,
            views: vec![],
        };
        assert!(m.validate().is_err());
    }
}
