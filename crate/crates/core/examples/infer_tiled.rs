// Scratch: measure how SInt quality depends on in-plane extent by
// running the trained checkpoint over tiles of various sizes.

use cvs_core::metrics::psnr;
use cvs_core::networks::{load_checkpoint, sint_volume};
use cvs_core::volume::{degrade, make_phantom, DegradationSpec, PhantomKind, Volume};

fn main() -> cvs_core::Result<()> {
    let ckpt_path = std::env::args().nth(1).unwrap_or_else(|| "/tmp/desk_tune_7_false/model.ckpt".into());
    let ckpt = load_checkpoint(ckpt_path.as_ref())?;
    let gt = make_phantom(PhantomKind::LayeredSine, (48, 48, 33), 110)?;
    let lr = degrade(&gt, &DegradationSpec::direct(2))?;
    let (h, w, l) = lr.dims();

    for tile in [8usize, 12, 16, 24, 48] {
        let mut data = vec![0.0f32; 48 * 48 * 33];
        for y0 in (0..h).step_by(tile) {
            for x0 in (0..w).step_by(tile) {
                let crop = lr.crop(y0, x0, 0, tile, tile, l)?;
                let up = sint_volume(&ckpt.sint, &ckpt.memory, &ckpt.config, &crop)?;
                let (th, tw, tl) = up.dims();
                for z in 0..tl {
                    for y in 0..th {
                        for x in 0..tw {
                            data[(z * 48 + (y0 + y)) * 48 + x0 + x] =
                                up.data()[(z * th + y) * tw + x];
                        }
                    }
                }
            }
        }
        let stitched = Volume::new(48, 48, 33, gt.spacing(), gt.intensity_range(), data)?;
        println!("tile {tile:2}: axial psnr {:.3}", psnr(&stitched, &gt)?);
    }
    Ok(())
}
