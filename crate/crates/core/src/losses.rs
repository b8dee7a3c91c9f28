//! Training objectives.
//!
//! Internal learning compares an interpolated volume against the sample
//! it was subsampled from: a voxel MSE plus, per wavelet scale, an MSE
//! over the three detail bands of the stated view's 2D images — the
//! detail terms keep the models from smoothing away high-frequency
//! structure. Cross-view mutual distillation compares two views'
//! predictions on the voxels where they already agree best, pulling
//! both toward consensus without a designated teacher. The weighted
//! total also folds in the memory compactness/separateness penalties.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::transforms::{haar_scale_forward, PYRAMID_SCALES};
use crate::volume::{ViewAxis, Volume};

// ---------------------------------------------------------------------------
// Internal learning
// ---------------------------------------------------------------------------

/// Voxel MSE plus per-scale wavelet-detail MSE on `view`'s images.
///
/// When the target volume is longer along z (its length need not be an
/// exact multiple of the upsampled length), its excess trailing slices
/// are ignored.
pub fn internal_loss(pred: &Volume, target: &Volume, view: ViewAxis) -> Result<f64> {
    let target = align_target(pred, target)?;
    let mut loss = mse_slices(pred.data(), target.data());
    let mut p = view_stack(pred, view);
    let mut t = view_stack(&target, view);
    for _ in 0..PYRAMID_SCALES {
        let hp = haar_scale_forward(&p)?;
        let ht = haar_scale_forward(&t)?;
        let c = hp.shape()[0] / 4;
        let (_, rows, cols) = hp.dims3()?;
        let band = c * rows * cols;
        loss += mse_slices(&hp.data()[band..], &ht.data()[band..]);
        p = Tensor::new(vec![c, rows, cols], hp.data()[..band].to_vec())?;
        t = Tensor::new(vec![c, rows, cols], ht.data()[..band].to_vec())?;
    }
    Ok(loss)
}

/// The same objective recorded on a tape. `pred` and `target` are
/// slice-major `[l, h, w]` tensors; the target is truncated along z
/// when longer.
pub fn internal_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: NodeId,
    view: ViewAxis,
) -> Result<NodeId> {
    let (lp, hp, wp) = g.value(pred).dims3()?;
    let (lt, ht, wt) = g.value(target).dims3()?;
    if ht != hp || wt != wp || lt < lp {
        return Err(Error::shape(
            "internal_loss",
            format!("prediction {lp}x{hp}x{wp} vs target {lt}x{ht}x{wt}"),
        ));
    }
    let target = if lt > lp { g.slice0(target, 0, lp)? } else { target };

    let mut loss = g.mse(pred, target)?;
    let mut p = view_stack_nodes(g, pred, view)?;
    let mut t = view_stack_nodes(g, target, view)?;
    for _ in 0..PYRAMID_SCALES {
        let hp = g.haar_scale(p)?;
        let ht = g.haar_scale(t)?;
        let c = g.value(hp).shape()[0] / 4;
        let dp = g.slice0(hp, c, 3 * c)?;
        let dt = g.slice0(ht, c, 3 * c)?;
        let term = g.mse(dp, dt)?;
        loss = g.add(loss, term)?;
        p = g.slice0(hp, 0, c)?;
        t = g.slice0(ht, 0, c)?;
    }
    Ok(loss)
}

fn align_target(pred: &Volume, target: &Volume) -> Result<Volume> {
    let (ph, pw, pl) = pred.dims();
    let (th, tw, tl) = target.dims();
    if th != ph || tw != pw || tl < pl {
        return Err(Error::shape(
            "internal_loss",
            format!("prediction {ph}x{pw}x{pl} vs target {th}x{tw}x{tl}"),
        ));
    }
    if tl == pl {
        Ok(target.clone())
    } else {
        target.crop(0, 0, 0, th, tw, pl)
    }
}

/// Stacks a volume's 2D images of one view into a `[images, rows, cols]`
/// tensor: per-channel wavelet transforms then act per image.
fn view_stack(v: &Volume, view: ViewAxis) -> Tensor<f64> {
    let (h, w, l) = v.dims();
    match view {
        ViewAxis::Axial => {
            let data = v.data().iter().map(|&x| x as f64).collect();
            Tensor::new(vec![l, h, w], data).expect("volume buffer is consistent")
        }
        ViewAxis::Coronal => {
            let mut data = Vec::with_capacity(h * w * l);
            for y in 0..h {
                for x in 0..w {
                    for z in 0..l {
                        data.push(v.get(y, x, z) as f64);
                    }
                }
            }
            Tensor::new(vec![h, w, l], data).expect("sized above")
        }
        ViewAxis::Sagittal => {
            let mut data = Vec::with_capacity(h * w * l);
            for x in 0..w {
                for y in 0..h {
                    for z in 0..l {
                        data.push(v.get(y, x, z) as f64);
                    }
                }
            }
            Tensor::new(vec![w, h, l], data).expect("sized above")
        }
    }
}

fn view_stack_nodes<T: Scalar>(g: &mut Graph<T>, vol: NodeId, view: ViewAxis) -> Result<NodeId> {
    match view {
        ViewAxis::Axial => Ok(vol),
        // [z, y, x] -> [y, x, z]
        ViewAxis::Coronal => g.permute3(vol, [1, 2, 0]),
        // [z, y, x] -> [x, y, z]
        ViewAxis::Sagittal => g.permute3(vol, [2, 1, 0]),
    }
}

fn mse_slices(a: &[impl Copy + Into<f64>], b: &[impl Copy + Into<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.into() - y.into();
        acc += d * d;
    }
    acc / a.len() as f64
}

// ---------------------------------------------------------------------------
// Cross-view mutual distillation
// ---------------------------------------------------------------------------

/// The voxels two predictions are distilled on: the `⌈γ·P⌉` candidates
/// with the smallest squared difference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySet {
    /// Linear voxel indices (slice-major), ascending.
    indices: Vec<usize>,
    gamma: f64,
    candidates: usize,
}

impl ConsistencySet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Candidate count `P` the fraction was taken of.
    pub fn candidates(&self) -> usize {
        self.candidates
    }
}

/// Ranks voxels by squared difference and keeps the smallest `⌈γ·P⌉`.
///
/// With `mask_original` set, voxels on original slice positions
/// (`z mod r == 1`, 1-based) are not candidates: the slice-wise model
/// copies those slices verbatim, so they carry no distillation signal.
/// Ties are broken toward the smaller linear index.
pub fn select_consistent(
    a: &Volume,
    b: &Volume,
    gamma: f64,
    mask_original: bool,
    r: usize,
) -> Result<ConsistencySet> {
    if a.dims() != b.dims() {
        return Err(Error::shape("select_consistent", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w, _) = a.dims();
    select_from_slices(a.data(), b.data(), h * w, gamma, mask_original, r)
}

/// The selection itself, on raw slice-major buffers (the trainer ranks
/// graph tensors with it so ranking and gradient see identical values).
pub(crate) fn select_from_slices(
    a: &[f32],
    b: &[f32],
    voxels_per_slice: usize,
    gamma: f64,
    mask_original: bool,
    r: usize,
) -> Result<ConsistencySet> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    if r < 2 {
        return Err(Error::invalid(format!("upsampling factor r must be >= 2, got {r}")));
    }
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(a.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if mask_original && (i / voxels_per_slice) % r == 0 {
            continue;
        }
        let d = x as f64 - y as f64;
        ranked.push((d * d, i));
    }
    let p = ranked.len();
    if p == 0 {
        return Err(Error::invalid("no candidate voxels to select from (all positions masked)"));
    }
    let count = ((gamma * p as f64).ceil() as usize).clamp(1, p);
    ranked.sort_unstable_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
    let mut indices: Vec<usize> = ranked[..count].iter().map(|&(_, i)| i).collect();
    indices.sort_unstable();
    Ok(ConsistencySet { indices, gamma, candidates: p })
}

/// Mean squared difference over the selected voxels.
pub fn cmd_loss(a: &Volume, b: &Volume, set: &ConsistencySet) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("cmd_loss", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if set.is_empty() {
        return Err(Error::invalid("consistency set is empty"));
    }
    let mut acc = 0.0f64;
    for &i in &set.indices {
        if i >= a.data().len() {
            return Err(Error::invalid(format!("consistency index {i} out of bounds")));
        }
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        acc += d * d;
    }
    Ok(acc / set.len() as f64)
}

/// Tape version: membership is frozen, the squared differences are
/// differentiated, and gradients reach both volumes (no teacher side).
pub fn cmd_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    a: NodeId,
    b: NodeId,
    set: &ConsistencySet,
) -> Result<NodeId> {
    if set.is_empty() {
        return Err(Error::invalid("consistency set is empty"));
    }
    let diff = g.sub(a, b)?;
    let picked = g.gather_elems(diff, set.indices().to_vec())?;
    let sq = g.mul(picked, picked)?;
    g.mean_all(sq)
}

// ---------------------------------------------------------------------------
// The weighted total
// ---------------------------------------------------------------------------

/// Multipliers for the loss families. The defaults reproduce
/// `L = L_int(a) + L_int(c) + L_int(s) + 0.15 (L_cmd(c) + L_cmd(s)) + 0.1 (L_com + L_sep)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub int_axial: f64,
    pub int_coronal: f64,
    pub int_sagittal: f64,
    pub cmd: f64,
    pub memory: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { int_axial: 1.0, int_coronal: 1.0, int_sagittal: 1.0, cmd: 0.15, memory: 0.1 }
    }
}

/// One training step's objective values. `cmd_*` hold one entry per
/// incremental pass; their average is what the total weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub int_a: f64,
    pub int_c: f64,
    pub int_s: f64,
    pub cmd_c: Vec<f64>,
    pub cmd_s: Vec<f64>,
    pub com: f64,
    pub sep: f64,
    pub total: f64,
}

impl LossReport {
    /// Assembles a report, computing the total from the parts.
    pub fn new(
        int: (f64, f64, f64),
        cmd_c: Vec<f64>,
        cmd_s: Vec<f64>,
        com: f64,
        sep: f64,
        weights: &LossWeights,
    ) -> Result<Self> {
        let mut report = LossReport {
            int_a: int.0,
            int_c: int.1,
            int_s: int.2,
            cmd_c,
            cmd_s,
            com,
            sep,
            total: 0.0,
        };
        report.total = total_loss(&report, weights)?;
        Ok(report)
    }

    pub fn validate(&self, weights: &LossWeights) -> Result<()> {
        let want = total_loss(self, weights)?;
        if !self.total.is_finite() {
            return Err(Error::non_finite("loss total"));
        }
        if (self.total - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "loss total {} does not match its parts (expected {want})",
                self.total
            )));
        }
        Ok(())
    }
}

fn mean_or_zero(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// The weighted sum of a report's parts; errors on non-finite or
/// negative parts.
pub fn total_loss(parts: &LossReport, weights: &LossWeights) -> Result<f64> {
    let named = [
        ("int_a", parts.int_a),
        ("int_c", parts.int_c),
        ("int_s", parts.int_s),
        ("com", parts.com),
        ("sep", parts.sep),
    ];
    for (name, v) in named {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::non_finite(format!("loss part {name} = {v}")));
        }
    }
    for (name, vs) in [("cmd_c", &parts.cmd_c), ("cmd_s", &parts.cmd_s)] {
        if vs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::non_finite(format!("loss part {name} = {vs:?}")));
        }
    }
    Ok(weights.int_axial * parts.int_a
        + weights.int_coronal * parts.int_c
        + weights.int_sagittal * parts.int_s
        + weights.cmd * (mean_or_zero(&parts.cmd_c) + mean_or_zero(&parts.cmd_s))
        + weights.memory * (parts.com + parts.sep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::volume::{make_phantom, PhantomKind};

    fn constant(h: usize, w: usize, l: usize, v: f32) -> Volume {
        Volume::new(h, w, l, (1.0, 1.0, 1.0), (0.0, 1.0), vec![v; h * w * l]).unwrap()
    }

    fn vol_node(g: &mut Graph<f64>, v: &Volume, grad: bool) -> NodeId {
        let (h, w, l) = v.dims();
        let data = v.data().iter().map(|&x| x as f64).collect();
        let t = Tensor::new(vec![l, h, w], data).unwrap();
        if grad {
            g.parameter(t)
        } else {
            g.input(t)
        }
    }

    #[test]
    fn internal_loss_is_zero_on_equal_volumes() {
        let v = make_phantom(PhantomKind::LayeredSine, (8, 8, 4), 1).unwrap();
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            assert_eq!(internal_loss(&v, &v, view).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_offset_hits_only_the_mse_term() {
        let p = constant(8, 8, 3, 0.3);
        let t = constant(8, 8, 3, 0.5);
        let delta = 0.5f64 - 0.3f32 as f64; // as stored
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            let loss = internal_loss(&p, &t, view).unwrap();
            assert_abs_diff_eq!(loss, delta * delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn excess_target_slices_are_ignored() {
        let p = make_phantom(PhantomKind::Ellipsoids, (8, 8, 5), 2).unwrap();
        let t = make_phantom(PhantomKind::Ellipsoids, (8, 8, 8), 3).unwrap();
        let cropped = t.crop(0, 0, 0, 8, 8, 5).unwrap();
        for view in [ViewAxis::Axial, ViewAxis::Coronal] {
            assert_eq!(
                internal_loss(&p, &t, view).unwrap(),
                internal_loss(&p, &cropped, view).unwrap()
            );
        }
    }

    #[test]
    fn internal_loss_shape_errors() {
        let p = constant(8, 8, 4, 0.5);
        assert!(internal_loss(&p, &constant(8, 6, 4, 0.5), ViewAxis::Axial).is_err());
        assert!(internal_loss(&p, &constant(8, 8, 3, 0.5), ViewAxis::Axial).is_err(), "shorter target");
    }

    #[test]
    fn internal_loss_dominates_plain_mse() {
        for seed in 0..4 {
            let p = make_phantom(PhantomKind::BandlimitedNoise, (8, 8, 4), seed).unwrap();
            let t = make_phantom(PhantomKind::BandlimitedNoise, (8, 8, 4), seed + 100).unwrap();
            let mse = mse_slices(p.data(), t.data());
            for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
                assert!(internal_loss(&p, &t, view).unwrap() >= mse - 1e-12);
            }
        }
    }

    #[test]
    fn graph_internal_loss_matches_value_version() {
        let p = make_phantom(PhantomKind::LayeredSine, (8, 8, 5), 4).unwrap();
        let t = make_phantom(PhantomKind::LayeredSine, (8, 8, 7), 5).unwrap();
        for view in [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal] {
            let want = internal_loss(&p, &t, view).unwrap();
            let mut g: Graph<f64> = Graph::new();
            let pn = vol_node(&mut g, &p, true);
            let tn = vol_node(&mut g, &t, false);
            let loss = internal_loss_nodes(&mut g, pn, tn, view).unwrap();
            assert_abs_diff_eq!(g.item_f64(loss).unwrap(), want, epsilon = 1e-12);
            // and it is differentiable end to end
            let grads = g.backward(loss).unwrap();
            let gp = grads.get(pn).expect("prediction gradient");
            assert!(gp.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn selection_keeps_the_smallest_squared_diffs() {
        // diffs 1, 2, 3, 4 -> squares 1, 4, 9, 16
        let a = Volume::new(1, 4, 1, (1.0, 1.0, 1.0), (0.0, 10.0), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Volume::new(1, 4, 1, (1.0, 1.0, 1.0), (0.0, 10.0), vec![0.0; 4]).unwrap();
        let set = select_consistent(&a, &b, 0.5, false, 2).unwrap();
        assert_eq!(set.indices(), &[0, 1]);
        assert_eq!(set.candidates(), 4);
        let all = select_consistent(&a, &b, 1.0, false, 2).unwrap();
        assert_eq!(all.indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn ties_resolve_to_smaller_indices() {
        let a = constant(1, 4, 1, 0.7);
        let set = select_consistent(&a, &a, 0.5, false, 2).unwrap();
        assert_eq!(set.indices(), &[0, 1]);
        assert_eq!(cmd_loss(&a, &a, &set).unwrap(), 0.0);
    }

    #[test]
    fn original_slice_positions_can_be_masked() {
        let a = make_phantom(PhantomKind::LayeredSine, (2, 2, 5), 6).unwrap();
        let b = make_phantom(PhantomKind::LayeredSine, (2, 2, 5), 7).unwrap();
        let set = select_consistent(&a, &b, 1.0, true, 2).unwrap();
        // r = 2: slices 0, 2, 4 are originals, leaving z in {1, 3}
        assert_eq!(set.candidates(), 2 * 2 * 2);
        for &i in set.indices() {
            assert_eq!((i / 4) % 2, 1, "index {i} lies on an original slice");
        }
        // masking everything is an error
        let thin = a.crop(0, 0, 0, 2, 2, 1).unwrap();
        let thin_b = b.crop(0, 0, 0, 2, 2, 1).unwrap();
        assert!(select_consistent(&thin, &thin_b, 0.5, true, 2).is_err());
    }

    #[test]
    fn selection_count_is_the_ceiling() {
        let a = make_phantom(PhantomKind::BandlimitedNoise, (3, 3, 3), 8).unwrap();
        let b = make_phantom(PhantomKind::BandlimitedNoise, (3, 3, 3), 9).unwrap();
        for gamma in [0.01, 0.33, 0.5, 0.999, 1.0] {
            let set = select_consistent(&a, &b, gamma, false, 2).unwrap();
            assert_eq!(set.len(), (gamma * 27.0).ceil() as usize);
        }
    }

    #[test]
    fn mean_selected_diff_grows_with_gamma() {
        let a = make_phantom(PhantomKind::BandlimitedNoise, (6, 6, 4), 10).unwrap();
        let b = make_phantom(PhantomKind::BandlimitedNoise, (6, 6, 4), 11).unwrap();
        let mut prev = 0.0;
        for gamma in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let set = select_consistent(&a, &b, gamma, false, 2).unwrap();
            let mean = cmd_loss(&a, &b, &set).unwrap();
            assert!(mean >= prev - 1e-12, "gamma {gamma}: {mean} < {prev}");
            prev = mean;
        }
    }

    #[test]
    fn cmd_loss_hand_case_and_symmetry() {
        // selected diffs 1 and 3 -> (1 + 9) / 2 = 5
        let a = Volume::new(1, 2, 1, (1.0, 1.0, 1.0), (0.0, 10.0), vec![2.0, 4.0]).unwrap();
        let b = Volume::new(1, 2, 1, (1.0, 1.0, 1.0), (0.0, 10.0), vec![1.0, 1.0]).unwrap();
        let set = select_consistent(&a, &b, 1.0, false, 2).unwrap();
        assert_eq!(cmd_loss(&a, &b, &set).unwrap(), 5.0);
        assert_eq!(cmd_loss(&b, &a, &set).unwrap(), 5.0);
    }

    #[test]
    fn full_gamma_unmasked_equals_plain_mse() {
        let a = make_phantom(PhantomKind::Ellipsoids, (5, 5, 4), 12).unwrap();
        let b = make_phantom(PhantomKind::Ellipsoids, (5, 5, 4), 13).unwrap();
        let set = select_consistent(&a, &b, 1.0, false, 3).unwrap();
        assert_abs_diff_eq!(
            cmd_loss(&a, &b, &set).unwrap(),
            mse_slices(a.data(), b.data()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn graph_cmd_loss_matches_and_reaches_both_sides() {
        let a = make_phantom(PhantomKind::LayeredSine, (4, 4, 5), 14).unwrap();
        let b = make_phantom(PhantomKind::LayeredSine, (4, 4, 5), 15).unwrap();
        let set = select_consistent(&a, &b, 0.4, true, 2).unwrap();
        let want = cmd_loss(&a, &b, &set).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let an = vol_node(&mut g, &a, true);
        let bn = vol_node(&mut g, &b, true);
        let loss = cmd_loss_nodes(&mut g, an, bn, &set).unwrap();
        assert_abs_diff_eq!(g.item_f64(loss).unwrap(), want, epsilon = 1e-12);

        let grads = g.backward(loss).unwrap();
        let ga = grads.get(an).expect("gradient for a");
        let gb = grads.get(bn).expect("gradient for b");
        assert!(ga.data().iter().any(|&v| v != 0.0));
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert_abs_diff_eq!(*x, -*y, epsilon = 1e-15);
        }
        // the tensor shares the volume's slice-major layout, so only
        // selected voxels may receive gradient
        let selected: std::collections::BTreeSet<usize> = set.indices().iter().copied().collect();
        for (i, &v) in ga.data().iter().enumerate() {
            if !selected.contains(&i) {
                assert_eq!(v, 0.0, "unselected voxel {i} received gradient");
            } else if a.data()[i] != b.data()[i] {
                assert_ne!(v, 0.0, "selected differing voxel {i} missing gradient");
            }
        }
    }

    #[test]
    fn total_with_unit_parts_and_default_weights() {
        let w = LossWeights::default();
        let report =
            LossReport::new((1.0, 1.0, 1.0), vec![1.0, 1.0], vec![1.0, 1.0], 1.0, 1.0, &w).unwrap();
        assert_abs_diff_eq!(report.total, 3.5, epsilon = 1e-12);
        report.validate(&w).unwrap();
    }

    #[test]
    fn missing_cmd_passes_contribute_nothing() {
        let w = LossWeights::default();
        let report = LossReport::new((0.5, 0.25, 0.25), vec![], vec![], 0.0, 0.0, &w).unwrap();
        assert_abs_diff_eq!(report.total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_zero_total_and_bad_parts_error() {
        let zero = LossWeights { int_axial: 0.0, int_coronal: 0.0, int_sagittal: 0.0, cmd: 0.0, memory: 0.0 };
        let report = LossReport::new((1.0, 2.0, 3.0), vec![4.0], vec![5.0], 6.0, 7.0, &zero).unwrap();
        assert_eq!(report.total, 0.0);

        let w = LossWeights::default();
        assert!(LossReport::new((f64::NAN, 0.0, 0.0), vec![], vec![], 0.0, 0.0, &w).is_err());
        assert!(LossReport::new((0.0, 0.0, 0.0), vec![-1.0], vec![], 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn loss_report_survives_json() {
        let w = LossWeights::default();
        let report =
            LossReport::new((0.125, 0.5, 0.25), vec![0.03125], vec![0.0625], 1.5, 0.75, &w).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: LossReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        back.validate(&w).unwrap();
    }
}
