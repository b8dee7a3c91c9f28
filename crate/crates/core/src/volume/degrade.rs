//! Synthetic low-resolution volumes for training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume;

/// How slices are removed from a dense volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMethod {
    /// Keep every `r`-th slice unchanged.
    DirectSubsample,
    /// Gaussian blur along `z`, then subsample, then add Gaussian noise.
    BlurNoise,
}

/// Parameters of a slice-spacing degradation.
///
/// `blur_sigma` is measured in slices of the dense volume; `noise_sigma`
/// is a fraction of the intensity range, so the same spec behaves the
/// same on volumes with different calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub method: DegradationMethod,
    /// Slice-reduction factor `r >= 2`.
    pub factor: u32,
    #[serde(default)]
    pub blur_sigma: f32,
    #[serde(default)]
    pub noise_sigma: f32,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationSpec {
    pub fn direct(factor: u32) -> Self {
        DegradationSpec {
            method: DegradationMethod::DirectSubsample,
            factor,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn blur_noise(factor: u32, seed: u64) -> Self {
        DegradationSpec {
            method: DegradationMethod::BlurNoise,
            factor,
            blur_sigma: factor as f32 / 2.0,
            noise_sigma: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 {
            return Err(Error::invalid(format!("degradation factor {} must be at least 2", self.factor)));
        }
        if self.method == DegradationMethod::BlurNoise {
            if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
                return Err(Error::invalid(format!("blur_sigma {} must be positive", self.blur_sigma)));
            }
            if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
                return Err(Error::invalid(format!("noise_sigma {} must be non-negative", self.noise_sigma)));
            }
        }
        Ok(())
    }
}

/// Simulates a coarse scan: keeps slices `1, r+1, 2r+1, ...` (1-based),
/// optionally after blurring, so the output has `floor((l-1)/r) + 1`
/// slices and `r`-times the slice spacing.
///
/// With `DirectSubsample` the kept slices are bit-identical to the input.
/// `BlurNoise` first convolves each voxel column with a normalised
/// Gaussian along `z` (edge slices replicated, kernel truncated at three
/// sigma), subsamples, then adds seeded Gaussian noise scaled by the
/// intensity width and clamps back into range.
pub fn degrade(v: &Volume, spec: &DegradationSpec) -> Result<Volume> {
    spec.validate()?;
    let r = spec.factor as usize;
    let (h, w, l) = v.dims();
    if l < 2 {
        return Err(Error::invalid(format!("volume with {l} slice(s) cannot be subsampled")));
    }
    let kept = (l - 1) / r + 1;
    let plane = h * w;

    let source: Vec<f64> = match spec.method {
        DegradationMethod::DirectSubsample => v.data().iter().map(|&x| x as f64).collect(),
        DegradationMethod::BlurNoise => blur_along_z(v, spec.blur_sigma),
    };

    let mut data = Vec::with_capacity(kept * plane);
    for k in 0..kept {
        let z = k * r;
        data.extend(source[z * plane..(z + 1) * plane].iter().map(|&x| x as f32));
    }

    if spec.method == DegradationMethod::BlurNoise && spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = spec.noise_sigma as f64 * v.intensity_width() as f64;
        for x in data.iter_mut() {
            *x = (*x as f64 + scale * standard_normal(&mut rng)) as f32;
        }
    }

    let (sy, sx, sz) = v.spacing();
    Volume::new(h, w, kept, (sy, sx, sz * spec.factor as f32), v.intensity_range(), data)
}

/// Convolves every `(y, x)` column with a 1-D Gaussian along `z`.
fn blur_along_z(v: &Volume, sigma: f32) -> Vec<f64> {
    let (h, w, l) = v.dims();
    let plane = h * w;
    let sigma = sigma as f64;
    let radius = (3.0 * sigma).floor() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        kernel.push((-(j as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut out = vec![0.0f64; plane * l];
    for z in 0..l as i64 {
        for (j, &k) in kernel.iter().enumerate() {
            let zj = (z + j as i64 - radius).clamp(0, l as i64 - 1) as usize;
            let src = &v.data()[zj * plane..(zj + 1) * plane];
            let dst = &mut out[z as usize * plane..(z as usize + 1) * plane];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += k * s as f64;
            }
        }
    }
    out
}

/// One draw from N(0, 1) via Box-Muller; two uniform draws per call keeps
/// the stream layout independent of how many normals the caller consumes.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomKind};

    fn phantom() -> Volume {
        make_phantom(PhantomKind::Ellipsoids, (8, 8, 33), 11).unwrap()
    }

    #[test]
    fn direct_subsample_keeps_every_rth_slice() {
        let v = phantom();
        for (r, expect) in [(2u32, 17usize), (3, 11), (4, 9)] {
            let d = degrade(&v, &DegradationSpec::direct(r)).unwrap();
            assert_eq!(d.len_slices(), expect);
            for k in 0..expect {
                assert_eq!(d.slice_data(k), v.slice_data(k * r as usize), "r={r} slice {k}");
            }
            assert_eq!(d.spacing().2, v.spacing().2 * r as f32);
        }
    }

    #[test]
    fn blur_noise_is_seeded_and_deterministic() {
        let v = phantom();
        let spec = DegradationSpec::blur_noise(2, 99);
        let a = degrade(&v, &spec).unwrap();
        let b = degrade(&v, &spec).unwrap();
        assert_eq!(a, b);
        let other = degrade(&v, &DegradationSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.data(), other.data());
    }

    #[test]
    fn vanishing_blur_and_noise_reduce_to_direct() {
        let v = phantom();
        let spec = DegradationSpec {
            method: DegradationMethod::BlurNoise,
            factor: 2,
            blur_sigma: 1e-4,
            noise_sigma: 0.0,
            seed: 0,
        };
        let soft = degrade(&v, &spec).unwrap();
        let hard = degrade(&v, &DegradationSpec::direct(2)).unwrap();
        for (a, b) in soft.data().iter().zip(hard.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn noise_stays_inside_the_intensity_range() {
        let v = phantom();
        let spec = DegradationSpec {
            noise_sigma: 0.5,
            ..DegradationSpec::blur_noise(3, 5)
        };
        let d = degrade(&v, &spec).unwrap();
        let (lo, hi) = d.intensity_range();
        assert!(d.data().iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn rejects_bad_specs_and_thin_volumes() {
        let v = phantom();
        assert!(degrade(&v, &DegradationSpec::direct(1)).is_err());
        let spec = DegradationSpec { blur_sigma: 0.0, ..DegradationSpec::blur_noise(2, 0) };
        assert!(degrade(&v, &spec).is_err());
        let thin = Volume::filled(4, 4, 1, 0.5).unwrap();
        assert!(degrade(&thin, &DegradationSpec::direct(2)).is_err());
    }
}
