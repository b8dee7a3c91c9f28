//! Procedural test volumes.
//!
//! All phantoms are smooth along `z` by construction — their slice-axis
//! frequency content stays below an eighth of a cycle per slice — so a
//! volume subsampled by `r <= 4` still determines the missing slices.
//! That makes them honest stand-ins for dense CT in self-supervised
//! experiments: there is structure to recover, and a network can do
//! better than linear interpolation without hallucinating.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Tissue-like layers: a low-frequency sine along `z` whose phase
    /// drifts smoothly in-plane, plus a weaker slower harmonic.
    LayeredSine,
    /// A handful of signed Gaussian blobs on a constant background.
    Ellipsoids,
    /// A sum of random cosine waves band-limited on every axis.
    BandlimitedNoise,
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhantomKind::LayeredSine => write!(f, "layered_sine"),
            PhantomKind::Ellipsoids => write!(f, "ellipsoids"),
            PhantomKind::BandlimitedNoise => write!(f, "bandlimited_noise"),
        }
    }
}

/// Extra knobs; only `amplitude` exists so far (it scales the raw field
/// before normalisation, and zero collapses the phantom to a constant).
#[derive(Debug, Clone, Copy)]
pub struct PhantomParams {
    pub amplitude: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams { amplitude: 1.0 }
    }
}

/// Generates a deterministic phantom; the same `(kind, shape, seed)`
/// always yields the identical volume, bit for bit.
pub fn make_phantom(kind: PhantomKind, shape: (usize, usize, usize), seed: u64) -> Result<Volume> {
    make_phantom_with(kind, shape, seed, PhantomParams::default())
}

pub fn make_phantom_with(
    kind: PhantomKind,
    shape: (usize, usize, usize),
    seed: u64,
    params: PhantomParams,
) -> Result<Volume> {
    let (h, w, l) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match kind {
        PhantomKind::LayeredSine => layered_sine(&mut rng, h, w, l, params.amplitude),
        PhantomKind::Ellipsoids => ellipsoids(&mut rng, h, w, l, params.amplitude),
        PhantomKind::BandlimitedNoise => bandlimited_noise(&mut rng, h, w, l, params.amplitude),
    };
    let data = normalise(raw);
    Volume::new(h, w, l, (1.0, 1.0, 1.0), (0.0, 1.0), data)
}

/// Affine rescale into [0.02, 0.98]; a flat field maps to constant 0.5.
fn normalise(raw: Vec<f64>) -> Vec<f32> {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &raw {
        min = min.min(v);
        max = max.max(v);
    }
    if max - min < 1e-12 {
        return vec![0.5; raw.len()];
    }
    let scale = 0.96 / (max - min);
    raw.into_iter().map(|v| (0.02 + (v - min) * scale) as f32).collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn layered_sine(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, amplitude: f64) -> Vec<f64> {
    // Frequencies are in cycles per slice / per pixel; the slice-axis one
    // stays below 0.12 so a factor-4 subsample is still above Nyquist.
    let fz = uniform(rng, 0.08, 0.115);
    let fx = uniform(rng, 0.02, 0.06);
    let fy = uniform(rng, 0.02, 0.06);
    let fx2 = uniform(rng, 0.02, 0.07);
    let fy2 = uniform(rng, 0.02, 0.07);
    let (p0, p1, p2, p3, p4, p5) = (
        uniform(rng, 0.0, TAU),
        uniform(rng, 0.0, TAU),
        uniform(rng, 0.0, TAU),
        uniform(rng, 0.0, TAU),
        uniform(rng, 0.0, TAU),
        uniform(rng, 0.0, TAU),
    );
    let mut out = Vec::with_capacity(h * w * l);
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let drift1 = 0.8 * (TAU * fx * x as f64 + p2).sin() + 0.8 * (TAU * fy * y as f64 + p3).sin();
                let drift2 = 0.7 * (TAU * fx2 * x as f64 + p4).sin() + 0.7 * (TAU * fy2 * y as f64 + p5).sin();
                let v = (TAU * fz * z as f64 + p0 + drift1).sin()
                    + 0.5 * (TAU * 0.6 * fz * z as f64 + p1 + drift2).sin();
                out.push(amplitude * v);
            }
        }
    }
    out
}

fn ellipsoids(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, amplitude: f64) -> Vec<f64> {
    const BLOBS: usize = 8;
    struct Blob {
        c: [f64; 3],
        inv_sigma: [f64; 3],
        a: f64,
    }
    let extent = |n: usize| (n.max(2) - 1) as f64;
    let blobs: Vec<Blob> = (0..BLOBS)
        .map(|k| {
            let c = [
                uniform(rng, 0.2, 0.8) * extent(h),
                uniform(rng, 0.2, 0.8) * extent(w),
                uniform(rng, 0.2, 0.8) * extent(l),
            ];
            let inv_sigma = [
                1.0 / (uniform(rng, 0.12, 0.3) * extent(h)).max(0.5),
                1.0 / (uniform(rng, 0.12, 0.3) * extent(w)).max(0.5),
                // z sigma in slices, not scaled by length: tight enough
                // that interpolation has something to learn, wide enough
                // to keep the slice axis smooth
                1.0 / uniform(rng, 3.2, 6.0),
            ];
            let mag = uniform(rng, 0.3, 0.7);
            Blob { c, inv_sigma, a: if k % 2 == 0 { mag } else { -mag } }
        })
        .collect();

    let mut out = Vec::with_capacity(h * w * l);
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for b in &blobs {
                    let dy = (y as f64 - b.c[0]) * b.inv_sigma[0];
                    let dx = (x as f64 - b.c[1]) * b.inv_sigma[1];
                    let dz = (z as f64 - b.c[2]) * b.inv_sigma[2];
                    v += b.a * (-0.5 * (dy * dy + dx * dx + dz * dz)).exp();
                }
                out.push(amplitude * v);
            }
        }
    }
    out
}

fn bandlimited_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, amplitude: f64) -> Vec<f64> {
    const WAVES: usize = 40;
    struct Wave {
        a: f64,
        fy: f64,
        fx: f64,
        fz: f64,
        phase: f64,
    }
    let waves: Vec<Wave> = (0..WAVES)
        .map(|k| {
            let mag = uniform(rng, 0.5, 1.5);
            Wave {
                a: if k % 2 == 0 { mag } else { -mag },
                fy: uniform(rng, 0.01, 0.1),
                fx: uniform(rng, 0.01, 0.1),
                fz: uniform(rng, 0.01, 0.115),
                phase: uniform(rng, 0.0, TAU),
            }
        })
        .collect();

    let mut out = Vec::with_capacity(h * w * l);
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for wv in &waves {
                    v += wv.a
                        * (TAU * (wv.fy * y as f64 + wv.fx * x as f64 + wv.fz * z as f64) + wv.phase).cos();
                }
                out.push(amplitude * v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_deterministic_per_seed() {
        for kind in [PhantomKind::LayeredSine, PhantomKind::Ellipsoids, PhantomKind::BandlimitedNoise] {
            let a = make_phantom(kind, (16, 16, 9), 3).unwrap();
            let b = make_phantom(kind, (16, 16, 9), 3).unwrap();
            assert_eq!(a, b, "{kind}");
            let c = make_phantom(kind, (16, 16, 9), 4).unwrap();
            assert_ne!(a.data(), c.data(), "{kind}");
        }
    }

    #[test]
    fn phantoms_use_the_unit_range() {
        for kind in [PhantomKind::LayeredSine, PhantomKind::Ellipsoids, PhantomKind::BandlimitedNoise] {
            let v = make_phantom(kind, (12, 10, 17), 7).unwrap();
            assert_eq!(v.intensity_range(), (0.0, 1.0));
            let min = v.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let max = v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(min >= 0.0 && max <= 1.0, "{kind}: [{min}, {max}]");
            assert!(max - min > 0.5, "{kind} should use most of the range, got [{min}, {max}]");
        }
    }

    #[test]
    fn zero_amplitude_layers_collapse_to_a_constant() {
        let v = make_phantom_with(
            PhantomKind::LayeredSine,
            (8, 8, 9),
            1,
            PhantomParams { amplitude: 0.0 },
        )
        .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn slice_axis_stays_smooth() {
        // Adjacent slices must be close relative to the global dynamic
        // range; this is the band-limit that makes interpolation fair.
        for kind in [PhantomKind::LayeredSine, PhantomKind::Ellipsoids, PhantomKind::BandlimitedNoise] {
            let v = make_phantom(kind, (24, 24, 33), 7).unwrap();
            let plane = 24 * 24;
            let mut worst = 0.0f32;
            for z in 0..32 {
                let a = v.slice_data(z);
                let b = v.slice_data(z + 1);
                let step = a
                    .iter()
                    .zip(b)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0f32, f32::max);
                worst = worst.max(step);
                let _ = plane;
            }
            assert!(worst < 0.45, "{kind}: adjacent-slice jump {worst}");
        }
    }
}
