//! Voxel volumes and the three orthogonal views.
//!
//! A [`Volume`] is a dense `h x w x l` grid stored slice-major: the axial
//! slice index `z` varies slowest, then row `y`, then column `x`. Axial
//! slices are the native scan planes; coronal and sagittal images are
//! resliced from the same buffer and are the ones that look blocky when
//! the scan spacing is coarse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod degrade;
mod io;
mod phantom;

pub use degrade::{degrade, DegradationMethod, DegradationSpec};
pub use io::{read_volume, write_volume};
pub use phantom::{make_phantom, make_phantom_with, PhantomKind, PhantomParams};

/// One of the three orthogonal viewing directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    /// Native scan planes, one `h x w` image per slice index `z`.
    Axial,
    /// `w x l` images indexed by row `y`; columns run along `z`.
    Coronal,
    /// `h x l` images indexed by column `x`; columns run along `z`.
    Sagittal,
}

impl std::fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViewAxis::Axial => write!(f, "axial"),
            ViewAxis::Coronal => write!(f, "coronal"),
            ViewAxis::Sagittal => write!(f, "sagittal"),
        }
    }
}

/// Physical voxel spacing `(sy, sx, sz)` in millimetres.
pub type Spacing = (f32, f32, f32);

/// A dense voxel grid together with its spacing and intensity range.
///
/// Every voxel is finite and lies inside `intensity_range`; the
/// constructor clamps out-of-range values rather than rejecting them, so
/// the invariant survives arithmetic that overshoots slightly.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    h: usize,
    w: usize,
    l: usize,
    spacing: Spacing,
    intensity_range: (f32, f32),
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume from a slice-major buffer of `h * w * l` voxels.
    ///
    /// Rejects empty dimensions, non-finite voxels, and a degenerate or
    /// non-finite intensity range; voxels outside the range are clamped.
    pub fn new(
        h: usize,
        w: usize,
        l: usize,
        spacing: Spacing,
        intensity_range: (f32, f32),
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if h == 0 || w == 0 || l == 0 {
            return Err(Error::invalid(format!("volume dimensions must be positive, got {h}x{w}x{l}")));
        }
        let (lo, hi) = intensity_range;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::invalid(format!("intensity range [{lo}, {hi}] must be finite with lo < hi")));
        }
        if !spacing.0.is_finite() || !spacing.1.is_finite() || !spacing.2.is_finite()
            || spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0
        {
            return Err(Error::invalid(format!("voxel spacing {spacing:?} must be positive and finite")));
        }
        if data.len() != h * w * l {
            return Err(Error::shape(
                "Volume::new",
                format!("expected {} voxels for {h}x{w}x{l}, got {}", h * w * l, data.len()),
            ));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("voxel {i} is {v}")));
            }
        }
        for v in &mut data {
            *v = v.clamp(lo, hi);
        }
        Ok(Volume { h, w, l, spacing, intensity_range, data })
    }

    /// A constant-valued volume; handy in tests.
    pub fn filled(h: usize, w: usize, l: usize, value: f32) -> Result<Self> {
        let range = if (0.0..=1.0).contains(&value) { (0.0, 1.0) } else { (value - 1.0, value + 1.0) };
        Volume::new(h, w, l, (1.0, 1.0, 1.0), range, vec![value; h * w * l])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.l)
    }

    /// Number of axial slices (the `l` dimension).
    pub fn len_slices(&self) -> usize {
        self.l
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    /// Width of the intensity range, the `L` used by PSNR and SSIM.
    pub fn intensity_width(&self) -> f32 {
        self.intensity_range.1 - self.intensity_range.0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, z: usize) -> f32 {
        self.data[self.index(y, x, z)]
    }

    /// The `z`-th axial plane as a contiguous row-major `h x w` block.
    pub fn slice_data(&self, z: usize) -> &[f32] {
        let plane = self.h * self.w;
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Replaces the voxel buffer, keeping shape and metadata. The new data
    /// passes through the same validation and clamping as `new`.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.h, self.w, self.l, self.spacing, self.intensity_range, data)
    }

    /// Extracts the sub-volume starting at `(y0, x0, z0)` with shape
    /// `(ph, pw, pl)`.
    pub fn crop(&self, y0: usize, x0: usize, z0: usize, ph: usize, pw: usize, pl: usize) -> Result<Self> {
        if y0 + ph > self.h || x0 + pw > self.w || z0 + pl > self.l {
            return Err(Error::invalid(format!(
                "crop {ph}x{pw}x{pl} at ({y0},{x0},{z0}) exceeds volume {}x{}x{}",
                self.h, self.w, self.l
            )));
        }
        let mut data = Vec::with_capacity(ph * pw * pl);
        for z in z0..z0 + pl {
            for y in y0..y0 + ph {
                let base = self.index(y, x0, z);
                data.extend_from_slice(&self.data[base..base + pw]);
            }
        }
        Volume::new(ph, pw, pl, self.spacing, self.intensity_range, data)
    }

    /// True when shape, spacing and intensity range all agree.
    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims() == other.dims()
            && self.spacing == other.spacing
            && self.intensity_range == other.intensity_range
    }
}

/// A single 2D image resliced from a volume.
///
/// `index` is 1-based to match radiological slice numbering; the pixel at
/// `(row, col)` lives at `data[row * cols + col]`. The image remembers the
/// source volume's spacing and intensity range so a full set of images can
/// be stacked back into an identical volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub view: ViewAxis,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub spacing: Spacing,
    pub intensity_range: (f32, f32),
}

impl ViewImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

/// Reslices a volume into the complete stack of images of one view.
///
/// Axial yields `l` images of `h x w`; coronal yields `h` images of
/// `w x l` (one per row `y`); sagittal yields `w` images of `h x l` (one
/// per column `x`). In the coronal and sagittal images the second axis
/// runs along `z`, which is where the blockiness of a coarse scan shows.
pub fn decompose(v: &Volume, view: ViewAxis) -> Vec<ViewImage> {
    let (h, w, l) = v.dims();
    let meta = (v.spacing(), v.intensity_range());
    let image = |rows: usize, cols: usize, index: usize, data: Vec<f32>| ViewImage {
        view,
        index,
        rows,
        cols,
        data,
        spacing: meta.0,
        intensity_range: meta.1,
    };
    match view {
        ViewAxis::Axial => (0..l)
            .map(|z| image(h, w, z + 1, v.slice_data(z).to_vec()))
            .collect(),
        ViewAxis::Coronal => (0..h)
            .map(|y| {
                let mut data = Vec::with_capacity(w * l);
                for x in 0..w {
                    for z in 0..l {
                        data.push(v.get(y, x, z));
                    }
                }
                image(w, l, y + 1, data)
            })
            .collect(),
        ViewAxis::Sagittal => (0..w)
            .map(|x| {
                let mut data = Vec::with_capacity(h * l);
                for y in 0..h {
                    for z in 0..l {
                        data.push(v.get(y, x, z));
                    }
                }
                image(h, l, x + 1, data)
            })
            .collect(),
    }
}

/// Rebuilds a volume from a complete, single-view image stack.
///
/// The inverse of [`decompose`]: images may arrive in any order but must
/// all share one view, one shape and one set of metadata, and their
/// indices must cover `1..=K` exactly once.
pub fn restack(images: &[ViewImage]) -> Result<Volume> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot restack an empty image list"))?;
    let k = images.len();
    let mut by_index: Vec<Option<&ViewImage>> = vec![None; k];
    for img in images {
        if img.view != first.view {
            return Err(Error::invalid(format!(
                "mixed views in restack: {} and {}",
                first.view, img.view
            )));
        }
        if (img.rows, img.cols) != (first.rows, first.cols) {
            return Err(Error::shape(
                "restack",
                format!("image {} is {}x{}, expected {}x{}", img.index, img.rows, img.cols, first.rows, first.cols),
            ));
        }
        if img.spacing != first.spacing || img.intensity_range != first.intensity_range {
            return Err(Error::invalid("restack images disagree on spacing or intensity range"));
        }
        if img.index == 0 || img.index > k {
            return Err(Error::invalid(format!("image index {} outside 1..={k}", img.index)));
        }
        if by_index[img.index - 1].replace(img).is_some() {
            return Err(Error::invalid(format!("duplicate image index {}", img.index)));
        }
        if img.data.len() != img.rows * img.cols {
            return Err(Error::shape(
                "restack",
                format!("image {} has {} pixels for {}x{}", img.index, img.data.len(), img.rows, img.cols),
            ));
        }
    }
    let ordered: Vec<&ViewImage> = by_index.into_iter().map(Option::unwrap).collect();

    let (h, w, l) = match first.view {
        ViewAxis::Axial => (first.rows, first.cols, k),
        ViewAxis::Coronal => (k, first.rows, first.cols),
        ViewAxis::Sagittal => (first.rows, k, first.cols),
    };
    let mut data = vec![0.0f32; h * w * l];
    match first.view {
        ViewAxis::Axial => {
            for (z, img) in ordered.iter().enumerate() {
                data[z * h * w..(z + 1) * h * w].copy_from_slice(&img.data);
            }
        }
        ViewAxis::Coronal => {
            for (y, img) in ordered.iter().enumerate() {
                for x in 0..w {
                    for z in 0..l {
                        data[(z * h + y) * w + x] = img.get(x, z);
                    }
                }
            }
        }
        ViewAxis::Sagittal => {
            for (x, img) in ordered.iter().enumerate() {
                for y in 0..h {
                    for z in 0..l {
                        data[(z * h + y) * w + x] = img.get(y, z);
                    }
                }
            }
        }
    }
    Volume::new(h, w, l, first.spacing, first.intensity_range, data)
}

/// Merges the three per-view reconstructions into one volume.
///
/// All three inputs cover the same upsampled grid of length
/// `r*l - r + 1`. At original slice positions (1-based `z % r == 1`) the
/// slice-wise branch simply copied its input, so only the two pixel-wise
/// branches are averaged there; everywhere else all three agree on being
/// predictions and are averaged equally. Arithmetic runs in `f64`, which
/// keeps `fuse(v, v, v)` exactly `v`.
pub fn fuse(oa: &Volume, oc: &Volume, os: &Volume, r: u32) -> Result<Volume> {
    fuse_with(oa, oc, os, r, false)
}

/// [`fuse`] with a switch to include the axial copy in the average at
/// original slice positions (three-way instead of two-way).
pub fn fuse_with(oa: &Volume, oc: &Volume, os: &Volume, r: u32, include_axial_at_originals: bool) -> Result<Volume> {
    if r < 2 {
        return Err(Error::invalid(format!("upsampling factor r={r} must be at least 2")));
    }
    if !oa.same_geometry(oc) || !oa.same_geometry(os) {
        return Err(Error::shape(
            "fuse",
            format!("views disagree: axial {:?}, coronal {:?}, sagittal {:?}", oa.dims(), oc.dims(), os.dims()),
        ));
    }
    let (h, w, l_up) = oa.dims();
    if (l_up + r as usize - 1) % r as usize != 0 {
        return Err(Error::invalid(format!(
            "fused length {l_up} is not of the form r*l - r + 1 for r={r}"
        )));
    }
    let plane = h * w;
    let mut data = vec![0.0f32; plane * l_up];
    for z in 0..l_up {
        let original = z % r as usize == 0;
        for i in 0..plane {
            let idx = z * plane + i;
            let a = oa.data[idx] as f64;
            let c = oc.data[idx] as f64;
            let s = os.data[idx] as f64;
            let fused = if original && !include_axial_at_originals {
                (c + s) / 2.0
            } else {
                (a + c + s) / 3.0
            };
            data[idx] = fused as f32;
        }
    }
    Volume::new(h, w, l_up, oa.spacing(), oa.intensity_range(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_volume(h: usize, w: usize, l: usize) -> Volume {
        let n = h * w * l;
        let data: Vec<f32> = (0..n).map(|i| i as f32 / n as f32).collect();
        Volume::new(h, w, l, (1.0, 1.0, 2.5), (0.0, 1.0), data).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes_and_values() {
        assert!(Volume::new(0, 4, 4, (1.0, 1.0, 1.0), (0.0, 1.0), vec![]).is_err());
        assert!(Volume::new(2, 2, 2, (1.0, 1.0, 1.0), (0.0, 1.0), vec![0.0; 7]).is_err());
        assert!(Volume::new(2, 2, 2, (1.0, 1.0, 1.0), (1.0, 1.0), vec![0.5; 8]).is_err());
        let mut data = vec![0.5f32; 8];
        data[3] = f32::NAN;
        assert!(matches!(
            Volume::new(2, 2, 2, (1.0, 1.0, 1.0), (0.0, 1.0), data),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn new_clamps_into_range() {
        let v = Volume::new(1, 2, 1, (1.0, 1.0, 1.0), (0.0, 1.0), vec![-0.5, 1.5]).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0]);
    }

    #[test]
    fn decompose_indexing_matches_storage() {
        let v = counting_volume(3, 4, 5);
        let axial = decompose(&v, ViewAxis::Axial);
        assert_eq!(axial.len(), 5);
        assert_eq!(axial[2].rows, 3);
        assert_eq!(axial[2].cols, 4);
        assert_eq!(axial[2].get(1, 3), v.get(1, 3, 2));

        let coronal = decompose(&v, ViewAxis::Coronal);
        assert_eq!(coronal.len(), 3);
        assert_eq!((coronal[1].rows, coronal[1].cols), (4, 5));
        assert_eq!(coronal[1].get(3, 4), v.get(1, 3, 4));

        let sagittal = decompose(&v, ViewAxis::Sagittal);
        assert_eq!(sagittal.len(), 4);
        assert_eq!((sagittal[3].rows, sagittal[3].cols), (3, 5));
        assert_eq!(sagittal[3].get(2, 0), v.get(2, 3, 0));
    }

    #[test]
    fn restack_inverts_decompose_for_all_views() {
        let v = counting_volume(4, 3, 6);
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            let mut images = decompose(&v, view);
            images.reverse(); // order must not matter
            let back = restack(&images).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn restack_rejects_inconsistent_stacks() {
        let v = counting_volume(3, 3, 4);
        let mut images = decompose(&v, ViewAxis::Axial);
        images[1].index = 1; // duplicate
        assert!(restack(&images).is_err());

        let mut images = decompose(&v, ViewAxis::Axial);
        images.remove(1); // gap: indices {1, 3, 4} for a 3-image stack
        assert!(restack(&images).is_err());

        let mut images = decompose(&v, ViewAxis::Axial);
        images[0].view = ViewAxis::Coronal;
        assert!(restack(&images).is_err());
    }

    #[test]
    fn fuse_branches_follow_the_slice_parity() {
        // r = 2, length 3: positions 1 and 3 are originals, 2 is synthetic.
        let mk = |vals: [f32; 3]| {
            let mut data = Vec::new();
            for v in vals {
                data.push(v);
            }
            Volume::new(1, 1, 3, (1.0, 1.0, 1.0), (0.0, 4.0), data).unwrap()
        };
        let oa = mk([0.0, 3.0, 4.0]);
        let oc = mk([2.0, 0.0, 1.0]);
        let os = mk([4.0, 0.0, 1.0]);
        let fused = fuse(&oa, &oc, &os, 2).unwrap();
        assert_eq!(fused.data()[0], 3.0); // z=1 original: (2+4)/2, axial copy excluded
        assert_eq!(fused.data()[1], 1.0); // z=2 synthetic: (3+0+0)/3
        assert_eq!(fused.data()[2], 1.0); // z=3 original again: (1+1)/2

        let with_axial = fuse_with(&oa, &oc, &os, 2, true).unwrap();
        assert_eq!(with_axial.data()[0], 2.0); // (0+2+4)/3
        assert_eq!(with_axial.data()[2], 2.0); // (4+1+1)/3
    }

    #[test]
    fn fuse_of_identical_volumes_is_exact() {
        let v = counting_volume(5, 4, 7);
        for r in [2u32, 3] {
            let fused = fuse(&v, &v, &v, r).unwrap();
            assert_eq!(fused.data(), v.data());
        }
    }

    #[test]
    fn fuse_checks_length_and_geometry() {
        let v = counting_volume(2, 2, 6); // 6 != r*l - r + 1 for r = 2
        assert!(fuse(&v, &v, &v, 2).is_err());
        let short = counting_volume(2, 2, 5);
        assert!(fuse(&short, &v, &v, 2).is_err());
    }

    #[test]
    fn crop_extracts_the_right_block() {
        let v = counting_volume(4, 5, 6);
        let c = v.crop(1, 2, 3, 2, 2, 2).unwrap();
        assert_eq!(c.dims(), (2, 2, 2));
        assert_eq!(c.get(0, 0, 0), v.get(1, 2, 3));
        assert_eq!(c.get(1, 1, 1), v.get(2, 3, 4));
        assert!(v.crop(3, 0, 0, 2, 1, 1).is_err());
    }
}
