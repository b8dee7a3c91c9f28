//! Shape and structure contracts across the supported factor range:
//! every upsampling factor and input length a caller may combine, the
//! incremental recurrence, original-slice preservation, and the
//! column-count arithmetic of the pixel-wise path.

use cvs_core::networks::{build_pint, build_sint, pint_image, pint_volume, sint_volume, NetConfig};
use cvs_core::training::incremental_interpolate;
use cvs_core::volume::{decompose, ViewAxis, Volume};
use cvs_core::memory::MemoryBank;

fn tiny_net(r: usize) -> NetConfig {
    NetConfig {
        r,
        base_channels: 4,
        blocks_per_group: 1,
        s2d_block: 2,
        attention_reduction: 4,
        pint_groups: 1,
        memory_items: 3,
    }
}

fn wavy(h: usize, w: usize, l: usize) -> Volume {
    let mut data = Vec::with_capacity(h * w * l);
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.3 * ((x as f64 * 0.61 + z as f64 * 0.83).sin())
                    + 0.1 * ((y as f64 * 0.47 - z as f64 * 0.29).cos());
                data.push(v as f32);
            }
        }
    }
    Volume::new(h, w, l, (1.0, 1.0, 3.0), (0.0, 1.0), data).unwrap()
}

#[test]
fn both_interpolators_expand_every_supported_factor_and_length() {
    for r in [2usize, 3, 4] {
        let cfg = tiny_net(r);
        let sint = build_sint(&cfg, 41).unwrap();
        let pint = build_pint(&cfg, 42).unwrap();
        let bank = MemoryBank::new_seeded(cfg.memory_items, cfg.memory_dim(), 43).unwrap();
        for l in 2..=16usize {
            let v = wavy(8, 8, l);
            let l_up = r * l - r + 1;

            let dense = sint_volume(&sint, &bank, &cfg, &v).unwrap();
            assert_eq!(dense.dims(), (8, 8, l_up), "sint r={r} l={l}");
            // Acquired slices are copied through bit-exactly.
            for k in 0..l {
                assert_eq!(dense.slice_data(k * r), v.slice_data(k), "original slice r={r} l={l} k={k}");
            }
            // Slice spacing shrinks by exactly the factor.
            assert!((dense.spacing().2 - v.spacing().2 / r as f32).abs() < 1e-12);

            let view = if l % 2 == 0 { ViewAxis::Coronal } else { ViewAxis::Sagittal };
            let pv = pint_volume(&pint, &cfg, &v, view).unwrap();
            assert_eq!(pv.dims(), (8, 8, l_up), "pint r={r} l={l}");
        }
    }
}

#[test]
fn pint_output_column_count_drops_the_padding() {
    for r in [2usize, 3, 4] {
        let cfg = tiny_net(r);
        let pint = build_pint(&cfg, 17).unwrap();
        for l in 2..=9usize {
            let v = wavy(8, 8, l);
            let img = &decompose(&v, ViewAxis::Coronal)[3];
            assert_eq!(img.cols, l);
            let up = pint_image(&pint, &cfg, img).unwrap();
            // r copies of every column, minus the r-1 phantom columns
            // past the final acquired one.
            assert_eq!(up.cols, r * l - (r - 1), "r={r} l={l}");
            assert_eq!(up.rows, img.rows);
        }
    }
}

#[test]
fn incremental_passes_obey_the_length_recurrence() {
    for r in [2usize, 3] {
        let cfg = tiny_net(r);
        let sint = build_sint(&cfg, 5).unwrap();
        let bank = MemoryBank::new_seeded(cfg.memory_items, cfg.memory_dim(), 6).unwrap();
        let v = wavy(8, 8, 4);

        let mut expected = 4usize;
        for n in 1..=2usize {
            expected = r * expected - r + 1;
            let out = incremental_interpolate(
                |x| sint_volume(&sint, &bank, &cfg, x),
                &v,
                r,
                n,
            )
            .unwrap();
            assert_eq!(out.dims(), (8, 8, expected), "r={r} n={n}");
            // The acquired slices survive both passes at stride r^n.
            let stride = r.pow(n as u32);
            for k in 0..4 {
                assert_eq!(out.slice_data(k * stride), v.slice_data(k), "r={r} n={n} k={k}");
            }
        }
    }
}
