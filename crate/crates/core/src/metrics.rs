//! Evaluation: PSNR over the whole volume, SSIM per view, and the
//! nearest/linear z-interpolation baselines that any learned model has
//! to beat.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{decompose, ViewAxis, ViewImage, Volume};

/// `10 log10(L^2 / MSE)` over every voxel, where `L` is the shared
/// intensity width. An exact match reports `+inf`.
pub fn psnr(pred: &Volume, gt: &Volume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if pred.intensity_range() != gt.intensity_range() {
        return Err(Error::invalid(format!(
            "intensity ranges differ: {:?} vs {:?}",
            pred.intensity_range(),
            gt.intensity_range()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    let mse = acc / pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let l = pred.intensity_width() as f64;
    Ok(10.0 * (l * l / mse).log10())
}

/// SSIM of one view, averaged over its 2D images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSsim {
    pub value: f64,
    /// Set when the images were smaller than the 11x11 window and the
    /// statistics fell back to whole-image moments.
    pub used_global_fallback: bool,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_image(a: &ViewImage, b: &ViewImage, c1: f64, c2: f64) -> (f64, bool) {
    let (rows, cols) = (a.rows, a.cols);
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        // whole-image moments, uniform weights
        let n = (rows * cols) as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for (&x, &y) in a.data.iter().zip(&b.data) {
            mx += x as f64;
            my += y as f64;
        }
        mx /= n;
        my /= n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.data.iter().zip(&b.data) {
            let dx = x as f64 - mx;
            let dy = y as f64 - my;
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
        vx /= n;
        vy /= n;
        cxy /= n;
        return (ssim_from_stats(mx, my, vx, vy, cxy, c1, c2), true);
    }

    let w = gaussian_window();
    let mut total = 0.0;
    let mut windows = 0usize;
    for i0 in 0..=rows - SSIM_WINDOW {
        for j0 in 0..=cols - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wij = w[i * SSIM_WINDOW + j];
                    let x = a.data[(i0 + i) * cols + j0 + j] as f64;
                    let y = b.data[(i0 + i) * cols + j0 + j] as f64;
                    mx += wij * x;
                    my += wij * y;
                    sxx += wij * (x * x);
                    syy += wij * (y * y);
                    // grouped so the product is bitwise symmetric in x, y
                    sxy += wij * (x * y);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ssim_from_stats(mx, my, vx, vy, cxy, c1, c2);
            windows += 1;
        }
    }
    (total / windows as f64, false)
}

/// Mean SSIM over the 2D images of one view, with the standard 11x11
/// Gaussian window (sigma 1.5) and stabilizers `C1 = (0.01 L)^2`,
/// `C2 = (0.03 L)^2`.
pub fn ssim_view(pred: &Volume, gt: &Volume, view: ViewAxis) -> Result<ViewSsim> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("ssim_view", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if pred.intensity_range() != gt.intensity_range() {
        return Err(Error::invalid("intensity ranges differ"));
    }
    let l = pred.intensity_width() as f64;
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let pa = decompose(pred, view);
    let ga = decompose(gt, view);
    let mut total = 0.0;
    let mut fallback = false;
    for (a, b) in pa.iter().zip(&ga) {
        let (v, used_global) = ssim_image(a, b, c1, c2);
        total += v;
        fallback |= used_global;
    }
    Ok(ViewSsim { value: total / pa.len() as f64, used_global_fallback: fallback })
}

/// Reference competitors: plain z-axis interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Nearest,
    Linear,
}

/// Stretches a volume to length `r*l - r + 1` by nearest or linear
/// interpolation along z. Original slices are copied bit-exactly;
/// nearest ties go to the lower slice.
pub fn baseline_interpolate(v: &Volume, r: usize, method: BaselineMethod) -> Result<Volume> {
    let (h, w, l) = v.dims();
    if l < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 slices, got {l}")));
    }
    if r < 2 {
        return Err(Error::invalid(format!("upsampling factor r must be >= 2, got {r}")));
    }
    let l_up = r * l - r + 1;
    let slice = h * w;
    let mut out = vec![0.0f32; slice * l_up];
    for z in 0..l_up {
        let k0 = z / r;
        let d = z - k0 * r;
        let dst = &mut out[z * slice..(z + 1) * slice];
        if d == 0 {
            dst.copy_from_slice(v.slice_data(k0));
            continue;
        }
        match method {
            BaselineMethod::Nearest => {
                // lower slice wins the midpoint tie
                let k = if d <= r - d { k0 } else { k0 + 1 };
                dst.copy_from_slice(v.slice_data(k));
            }
            BaselineMethod::Linear => {
                let t = d as f64 / r as f64;
                let lo = v.slice_data(k0);
                let hi = v.slice_data(k0 + 1);
                for (o, (&a, &b)) in dst.iter_mut().zip(lo.iter().zip(hi)) {
                    *o = ((1.0 - t) * a as f64 + t * b as f64) as f32;
                }
            }
        }
    }
    let (sy, sx, sz) = v.spacing();
    Volume::new(h, w, l_up, (sy, sx, sz / r as f32), v.intensity_range(), out)
}

/// PSNR/SSIM summary of one prediction, JSON-serializable. Infinite
/// PSNR (exact match) serializes as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim_a: f64,
    pub ssim_c: f64,
    pub ssim_s: f64,
    /// True when any view's images were too small for windowed SSIM.
    pub ssim_window_fallback: bool,
    pub voxels: usize,
    #[serde(default, with = "db_opt", skip_serializing_if = "Option::is_none")]
    pub baseline_psnr_nearest: Option<f64>,
    #[serde(default, with = "db_opt", skip_serializing_if = "Option::is_none")]
    pub baseline_psnr_linear: Option<f64>,
}

/// Scores a prediction against ground truth; when the low-resolution
/// source and factor are given, the interpolation baselines are scored
/// too.
pub fn evaluate(pred: &Volume, gt: &Volume, baseline_from: Option<(&Volume, usize)>) -> Result<EvalReport> {
    let a = ssim_view(pred, gt, ViewAxis::Axial)?;
    let c = ssim_view(pred, gt, ViewAxis::Coronal)?;
    let s = ssim_view(pred, gt, ViewAxis::Sagittal)?;
    let (nearest, linear) = match baseline_from {
        Some((lr, r)) => {
            let n = baseline_interpolate(lr, r, BaselineMethod::Nearest)?;
            let l = baseline_interpolate(lr, r, BaselineMethod::Linear)?;
            (Some(psnr(&n, gt)?), Some(psnr(&l, gt)?))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        psnr: psnr(pred, gt)?,
        ssim_a: a.value,
        ssim_c: c.value,
        ssim_s: s.value,
        ssim_window_fallback: a.used_global_fallback || c.used_global_fallback || s.used_global_fallback,
        voxels: pred.data().len(),
        baseline_psnr_nearest: nearest,
        baseline_psnr_linear: linear,
    })
}

/// Writes every axial slice as an 8-bit grayscale PNG
/// (`<stem>_z<index>.png`), mapping the intensity range linearly onto
/// 0..=255. Returns the paths written.
pub fn dump_slice_pngs(v: &Volume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (h, w, l) = v.dims();
    let (lo, hi) = v.intensity_range();
    let scale = 255.0 / (hi - lo) as f64;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(l);
    for z in 0..l {
        let pixels: Vec<u8> = v
            .slice_data(z)
            .iter()
            .map(|&x| (((x - lo) as f64 * scale).round().clamp(0.0, 255.0)) as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
            .ok_or_else(|| Error::invalid("slice buffer size mismatch"))?;
        let path = dir.join(format!("{stem}_z{:04}.png", z + 1));
        img.save(&path).map_err(|e| Error::format(path.display(), e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// (De)serializes a dB value, spelling infinity as `"inf"`.
mod db {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub(super) struct DbVisitor;

    impl Visitor<'_> for DbVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a dB number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                _ => Err(de::Error::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(DbVisitor)
    }
}

mod db_opt {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::db::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    struct OptVisitor;

    impl<'de> Visitor<'de> for OptVisitor {
        type Value = Option<f64>;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("an optional dB value")
        }

        fn visit_none<E: de::Error>(self) -> std::result::Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_unit<E: de::Error>(self) -> std::result::Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_some<D: Deserializer<'de>>(self, d: D) -> std::result::Result<Self::Value, D::Error> {
            d.deserialize_any(super::db::DbVisitor).map(Some)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        d.deserialize_option(OptVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::volume::{make_phantom, PhantomKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ct_like(h: usize, w: usize, l: usize, fill: f32) -> Volume {
        Volume::new(h, w, l, (1.0, 1.0, 1.0), (0.0, 255.0), vec![fill; h * w * l]).unwrap()
    }

    #[test]
    fn psnr_unit_mse_oracle() {
        let gt = ct_like(4, 4, 2, 100.0);
        let pred = ct_like(4, 4, 2, 101.0);
        // 10 log10(255^2) = 48.1308...
        assert_abs_diff_eq!(psnr(&pred, &gt).unwrap(), 48.1308, epsilon = 1e-3);
    }

    #[test]
    fn psnr_edges() {
        let gt = ct_like(4, 4, 2, 100.0);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        // full-range error: MSE = L^2 -> 0 dB
        let lo = ct_like(4, 4, 2, 0.0);
        let hi = ct_like(4, 4, 2, 255.0);
        assert_abs_diff_eq!(psnr(&hi, &lo).unwrap(), 0.0, epsilon = 1e-12);
        assert!(psnr(&gt, &ct_like(4, 4, 3, 0.0)).is_err());
        let other_range =
            Volume::new(4, 4, 2, (1.0, 1.0, 1.0), (0.0, 100.0), vec![50.0; 32]).unwrap();
        assert!(psnr(&gt, &other_range).is_err());
    }

    #[test]
    fn psnr_drops_as_noise_grows() {
        let gt = make_phantom(PhantomKind::LayeredSine, (12, 12, 6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = f64::INFINITY;
        for amp in [0.004f64, 0.02, 0.08] {
            let noisy: Vec<f32> = gt
                .data()
                .iter()
                .map(|&v| v + ((rng.random::<f64>() - 0.5) * 2.0 * amp) as f32)
                .collect();
            let pred = gt.with_data(noisy).unwrap();
            let db = psnr(&pred, &gt).unwrap();
            assert!(db < prev, "more noise must lower PSNR: {db} !< {prev}");
            prev = db;
        }
    }

    #[test]
    fn ssim_is_exactly_one_on_identical_volumes() {
        // large enough for the windowed path
        let v = make_phantom(PhantomKind::Ellipsoids, (16, 16, 12), 4).unwrap();
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            let s = ssim_view(&v, &v, view).unwrap();
            assert_eq!(s.value, 1.0);
            assert!(!s.used_global_fallback, "all image dims are at least 11");
        }
    }

    #[test]
    fn constant_pair_reduces_to_the_luminance_term() {
        let c1v = 120.0f64;
        let c2v = 90.0f64;
        let a = ct_like(16, 16, 12, c1v as f32);
        let b = ct_like(16, 16, 12, c2v as f32);
        let c1 = (0.01 * 255.0f64).powi(2);
        let want = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        let got = ssim_view(&a, &b, ViewAxis::Axial).unwrap();
        assert!(!got.used_global_fallback);
        assert_abs_diff_eq!(got.value, want, epsilon = 1e-9);
    }

    #[test]
    fn ssim_symmetry_and_bounds() {
        let a = make_phantom(PhantomKind::BandlimitedNoise, (16, 16, 12), 6).unwrap();
        let b = make_phantom(PhantomKind::BandlimitedNoise, (16, 16, 12), 7).unwrap();
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            let ab = ssim_view(&a, &b, view).unwrap().value;
            let ba = ssim_view(&b, &a, view).unwrap().value;
            assert_eq!(ab, ba);
            assert!(ab.abs() <= 1.0 + 1e-12, "view {view}: {ab}");
        }
    }

    #[test]
    fn tiny_images_fall_back_to_global_statistics() {
        let v = make_phantom(PhantomKind::LayeredSine, (8, 8, 4), 8).unwrap();
        let s = ssim_view(&v, &v, ViewAxis::Axial).unwrap();
        assert!(s.used_global_fallback);
        assert_eq!(s.value, 1.0);
    }

    #[test]
    fn linear_baseline_midpoint_and_shape() {
        let mut data = vec![0.0f32; 9 * 2];
        data[9..].fill(1.0);
        let v = Volume::new(3, 3, 2, (1.0, 1.0, 2.0), (0.0, 1.0), data).unwrap();
        let up = baseline_interpolate(&v, 2, BaselineMethod::Linear).unwrap();
        assert_eq!(up.dims(), (3, 3, 3));
        assert!(up.slice_data(1).iter().all(|&x| x == 0.5));
        assert_eq!(up.slice_data(0), v.slice_data(0));
        assert_eq!(up.slice_data(2), v.slice_data(1));
        assert_eq!(up.spacing().2, 1.0);

        let long = baseline_interpolate(&make_phantom(PhantomKind::Ellipsoids, (4, 4, 3), 1).unwrap(), 4, BaselineMethod::Linear).unwrap();
        assert_eq!(long.dims().2, 9);
    }

    #[test]
    fn nearest_ties_take_the_lower_slice() {
        let mut data = vec![0.0f32; 4 * 2];
        data[4..].fill(1.0);
        let v = Volume::new(2, 2, 2, (1.0, 1.0, 1.0), (0.0, 1.0), data).unwrap();
        let up = baseline_interpolate(&v, 2, BaselineMethod::Nearest).unwrap();
        assert!(up.slice_data(1).iter().all(|&x| x == 0.0), "midpoint resolves down");
        let up4 = baseline_interpolate(&v, 4, BaselineMethod::Nearest).unwrap();
        assert!(up4.slice_data(2).iter().all(|&x| x == 0.0), "exact tie at r/2 resolves down");
        assert!(up4.slice_data(3).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn linear_baseline_reproduces_affine_profiles() {
        // voxel value = a(y,x) + b(y,x) * z
        let (h, w, l) = (4, 4, 5);
        let mut data = Vec::with_capacity(h * w * l);
        for z in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let a = 0.1 + 0.02 * y as f64;
                    let b = 0.05 + 0.01 * x as f64;
                    data.push((a + b * z as f64) as f32);
                }
            }
        }
        let v = Volume::new(h, w, l, (1.0, 1.0, 3.0), (0.0, 1.0), data).unwrap();
        let up = baseline_interpolate(&v, 3, BaselineMethod::Linear).unwrap();
        for z in 0..up.dims().2 {
            for y in 0..h {
                for x in 0..w {
                    let a = 0.1 + 0.02 * y as f64;
                    let b = 0.05 + 0.01 * x as f64;
                    let want = a + b * z as f64 / 3.0;
                    assert_abs_diff_eq!(up.get(y, x, z) as f64, want, epsilon = 2e-7);
                }
            }
        }
    }

    #[test]
    fn interpolation_rejects_thin_volumes() {
        let v = ct_like(3, 3, 1, 1.0);
        assert!(baseline_interpolate(&v, 2, BaselineMethod::Linear).is_err());
    }

    #[test]
    fn eval_report_round_trips_including_infinity() {
        let gt = make_phantom(PhantomKind::LayeredSine, (12, 12, 5), 9).unwrap();
        let lr = make_phantom(PhantomKind::LayeredSine, (12, 12, 3), 9).unwrap();
        let report = evaluate(&gt, &gt, Some((&lr, 2))).unwrap();
        assert_eq!(report.psnr, f64::INFINITY);
        assert_eq!(report.ssim_a, 1.0);
        assert_eq!(report.voxels, 12 * 12 * 5);
        assert!(report.baseline_psnr_linear.unwrap().is_finite());

        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "infinite dB spelled out: {json}");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        // without a baseline source the fields stay away from the JSON
        let bare = evaluate(&gt, &gt, None).unwrap();
        let bare_json = serde_json::to_string(&bare).unwrap();
        assert!(!bare_json.contains("baseline"));
        let bare_back: EvalReport = serde_json::from_str(&bare_json).unwrap();
        assert_eq!(bare_back, bare);
    }

    #[test]
    fn png_dump_is_linear_in_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = vec![0.0f32; 8 * 8];
        data.extend(vec![127.5; 8 * 8]);
        data.extend(vec![255.0; 8 * 8]);
        let v = Volume::new(8, 8, 3, (1.0, 1.0, 1.0), (0.0, 255.0), data).unwrap();
        let paths = dump_slice_pngs(&v, dir.path(), "vol").unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].file_name().unwrap().to_str().unwrap().contains("z0001"));
        let mid = image::open(&paths[1]).unwrap().to_luma8();
        assert_eq!(mid.dimensions(), (8, 8));
        assert_eq!(mid.get_pixel(0, 0).0[0], 128); // 127.5 rounds up
        let last = image::open(&paths[2]).unwrap().to_luma8();
        assert_eq!(last.get_pixel(3, 3).0[0], 255);
    }
}
