//! Finite-difference audit of every gradient in the crate.
//!
//! The suite re-derives each analytic gradient numerically: every tape
//! op on small random tensors, then the composites people actually
//! train — a residual block, the memory read and its regularisers, both
//! loss families, and (behind the `full` switch) the two complete
//! networks at miniature size. The CLI exposes it as `gradcheck` so a
//! build on a new machine can prove its arithmetic before anyone trusts
//! a training curve.
//!
//! Zero-initialised tensors are jittered before checking. A fresh
//! network routes no gradient through a zero conv kernel, which is a
//! property of the *state*, not of the wiring; the audit cares about the
//! wiring.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{gradcheck, DEFAULT_EPS};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::losses::{cmd_loss_nodes, internal_loss_nodes, select_consistent};
use crate::memory::{read_nodes, regularizer_nodes};
use crate::networks::{
    bind_params, build_pint, build_sint, pint_image_nodes, residual_block_nodes, sint_pair_nodes,
    BoundParams, NetConfig, NetworkParams,
};
use crate::volume::{ViewAxis, Volume};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const OP_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;

/// Runs the audit and returns one row per check. `full` adds the two
/// whole-network checks, which probe a few thousand parameters each and
/// dominate the runtime.
pub fn gradient_suite(full: bool) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut rows = Vec::new();
    op_checks(&mut rows, &mut rng)?;
    composite_checks(&mut rows, &mut rng)?;
    if full {
        rows.push(check("sint_network", NET_TOL, sint_network_err(&mut rng)?));
        rows.push(check("pint_network", NET_TOL, pint_network_err(&mut rng)?));
    }
    Ok(rows)
}

/// Names of parameters that receive no gradient at all from one combined
/// training objective on random data. Attention biases are excluded —
/// their gradient legitimately vanishes when the sigmoid saturates — so
/// a healthy build returns an empty list.
pub fn gradient_coverage() -> Result<Vec<String>> {
    let cfg = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0fe);
    let mut sint = build_sint(&cfg, 1)?;
    let mut pint = build_pint(&cfg, 2)?;
    jitter(&mut sint, &mut rng);
    jitter(&mut pint, &mut rng);
    // The tiny config leaves each attention a single hidden unit. Pin it
    // to the live side of the ReLU (w=0, b=1 makes the pre-activation
    // exactly 1 whatever the features look like) — otherwise a coin flip
    // of the jitter dead-ends the squeeze-excitation branch and the probe
    // reports a state problem as a wiring problem. The fc1 weights still
    // receive gradient: it depends on the pooled features, not on w.
    for params in [&mut sint, &mut pint] {
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if name.ends_with(".att.fc1.w") {
                params.get_mut(&name)?.data_mut().fill(0.0);
            } else if name.ends_with(".att.fc1.b") {
                params.get_mut(&name)?.data_mut().fill(1.0);
            }
        }
    }
    let bank = crate::memory::MemoryBank::new_seeded(cfg.memory_items, cfg.memory_dim(), 3)?;

    let crop = noise_volume(8, 8, 3, &mut rng)?;
    let mut g: Graph<f32> = Graph::new();
    let bp_s = bind_params(&mut g, &sint);
    let bp_p = bind_params(&mut g, &pint);
    let bank_node = g.input(bank.tensor());

    // One slice-wise pass across the crop.
    let slices: Vec<NodeId> = (0..3)
        .map(|z| g.input(Tensor::new(vec![1, 8, 8], crop.slice_data(z).to_vec()).expect("plane")))
        .collect();
    let mut assembled = vec![slices[0]];
    let mut loss_terms = Vec::new();
    for k in 0..2 {
        let pair = sint_pair_nodes(&mut g, &bp_s, &cfg, bank_node, slices[k], slices[k + 1])?;
        assembled.extend(pair.slices.iter().copied());
        assembled.push(slices[k + 1]);
        let (com, sep) = regularizer_nodes(&mut g, &pair.read, bank_node, 1.0)?;
        loss_terms.push(com);
        loss_terms.push(sep);
    }
    let axial = g.concat0(&assembled)?;
    let target_a = g.input(Tensor::filled(vec![5, 8, 8], 0.4f32));
    loss_terms.push(internal_loss_nodes(&mut g, axial, target_a, ViewAxis::Axial)?);

    // One pixel-wise pass over the coronal images.
    let mut images = Vec::new();
    for img in crate::volume::decompose(&crop, ViewAxis::Coronal) {
        let x = g.input(Tensor::new(vec![1, img.rows, img.cols], img.data).expect("image"));
        images.push(pint_image_nodes(&mut g, &bp_p, &cfg, x)?);
    }
    let stack = g.concat0(&images)?;
    let coronal = g.permute3(stack, [2, 0, 1])?;
    loss_terms.push(internal_loss_nodes(&mut g, coronal, target_a, ViewAxis::Coronal)?);

    // Tie the views together so one backward pass covers everything.
    let set = {
        let a = g.value(axial);
        let c = g.value(coronal);
        crate::losses::select_from_slices(a.data(), c.data(), 64, 1.0, false, cfg.r)?
    };
    loss_terms.push(cmd_loss_nodes(&mut g, axial, coronal, &set)?);

    let mut total = loss_terms[0];
    for &t in &loss_terms[1..] {
        total = g.add(total, t)?;
    }
    let grads = g.backward(total)?;

    let mut dead = Vec::new();
    for (params, bound) in [(&sint, &bp_s), (&pint, &bp_p)] {
        for (name, tensor) in params.iter() {
            if name.contains(".att.") && name.ends_with(".b") {
                continue;
            }
            let grad = grads.get_or_zeros(bound.node(name)?, tensor.shape());
            if grad.data().iter().all(|&x| x == 0.0) {
                dead.push(name.clone());
            }
        }
    }
    Ok(dead)
}

fn check(name: &'static str, tolerance: f64, max_rel_err: f64) -> CheckRow {
    CheckRow { name, max_rel_err, tolerance }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).expect("sized")
}

/// Random values bounded away from zero, for ops with a kink there.
fn rand_tensor_off_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, rng);
    for x in t.data_mut() {
        *x += 0.4 * x.signum();
    }
    t
}

fn op_checks(rows: &mut Vec<CheckRow>, rng: &mut ChaCha8Rng) -> Result<()> {
    type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;
    let case = |name: &'static str, seeds: Vec<Tensor<f64>>, build: Builder| -> Result<CheckRow> {
        Ok(check(name, OP_TOL, gradcheck(&seeds, DEFAULT_EPS, |g, p| {
            let out = build(g, p)?;
            if g.value(out).numel() == 1 { Ok(out) } else { g.sum_all(out) }
        })?))
    };

    let checks: Vec<CheckRow> = vec![
        case("conv2d", vec![rand_tensor(vec![2, 5, 4], rng), rand_tensor(vec![3, 2, 3, 3], rng)],
            Box::new(|g, p| g.conv2d(p[0], p[1])))?,
        case("bias_add", vec![rand_tensor(vec![3, 4, 4], rng), rand_tensor(vec![3], rng)],
            Box::new(|g, p| g.bias_add(p[0], p[1])))?,
        case("relu", vec![rand_tensor_off_zero(vec![4, 3], rng)],
            Box::new(|g, p| g.relu(p[0])))?,
        case("sigmoid", vec![rand_tensor(vec![5], rng)],
            Box::new(|g, p| g.sigmoid(p[0])))?,
        case("add", vec![rand_tensor(vec![2, 3], rng), rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.add(p[0], p[1])))?,
        case("sub", vec![rand_tensor(vec![2, 3], rng), rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.sub(p[0], p[1])))?,
        case("mul", vec![rand_tensor(vec![2, 3], rng), rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.mul(p[0], p[1])))?,
        case("scale", vec![rand_tensor(vec![6], rng)],
            Box::new(|g, p| g.scale(p[0], -1.7)))?,
        case("add_scalar", vec![rand_tensor(vec![6], rng)],
            Box::new(|g, p| g.add_scalar(p[0], 0.9)))?,
        case("concat0", vec![rand_tensor(vec![1, 2, 3], rng), rand_tensor(vec![2, 2, 3], rng)],
            Box::new(|g, p| g.concat0(&[p[0], p[1]])))?,
        case("slice0", vec![rand_tensor(vec![4, 3], rng)],
            Box::new(|g, p| g.slice0(p[0], 1, 2)))?,
        case("slice_last", vec![rand_tensor(vec![2, 3, 5], rng)],
            Box::new(|g, p| g.slice_last(p[0], 1, 3)))?,
        case("permute3", vec![rand_tensor(vec![2, 3, 4], rng)],
            Box::new(|g, p| g.permute3(p[0], [2, 0, 1])))?,
        case("reshape", vec![rand_tensor(vec![2, 6], rng)],
            Box::new(|g, p| g.reshape(p[0], vec![3, 4])))?,
        case("transpose2", vec![rand_tensor(vec![3, 5], rng)],
            Box::new(|g, p| g.transpose2(p[0])))?,
        case("linear", vec![rand_tensor(vec![4], rng), rand_tensor(vec![3, 4], rng), rand_tensor(vec![3], rng)],
            Box::new(|g, p| g.linear(p[0], p[1], p[2])))?,
        case("global_avg_pool", vec![rand_tensor(vec![3, 4, 5], rng)],
            Box::new(|g, p| g.global_avg_pool(p[0])))?,
        case("channel_scale", vec![rand_tensor(vec![3, 4, 4], rng), rand_tensor(vec![3], rng)],
            Box::new(|g, p| g.channel_scale(p[0], p[1])))?,
        case("softmax", vec![rand_tensor(vec![4, 3], rng)],
            Box::new(|g, p| g.softmax(p[0])))?,
        case("mse", vec![rand_tensor(vec![3, 4], rng), rand_tensor(vec![3, 4], rng)],
            Box::new(|g, p| g.mse(p[0], p[1])))?,
        case("matmul", vec![rand_tensor(vec![3, 4], rng), rand_tensor(vec![4, 2], rng)],
            Box::new(|g, p| g.matmul(p[0], p[1])))?,
        case("l2_normalize_rows", vec![rand_tensor_off_zero(vec![3, 4], rng)],
            Box::new(|g, p| g.l2_normalize_rows(p[0])))?,
        case("space_to_depth", vec![rand_tensor(vec![1, 4, 4], rng)],
            Box::new(|g, p| g.space_to_depth(p[0], 2)))?,
        case("depth_to_space", vec![rand_tensor(vec![4, 2, 2], rng)],
            Box::new(|g, p| g.depth_to_space(p[0], 2)))?,
        case("pixel_shuffle_cols", vec![rand_tensor(vec![2, 3, 4], rng)],
            Box::new(|g, p| g.pixel_shuffle_cols(p[0], 2)))?,
        case("shift_cols_left", vec![rand_tensor(vec![1, 3, 4], rng)],
            Box::new(|g, p| g.shift_cols_left(p[0])))?,
        case("haar_scale", vec![rand_tensor(vec![2, 4, 4], rng)],
            Box::new(|g, p| g.haar_scale(p[0])))?,
        case("haar_scale_odd", vec![rand_tensor(vec![1, 5, 3], rng)],
            Box::new(|g, p| g.haar_scale(p[0])))?,
        case("gather_rows", vec![rand_tensor(vec![4, 3], rng)],
            Box::new(|g, p| g.gather_rows(p[0], vec![0, 2, 2])))?,
        case("gather_elems", vec![rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.gather_elems(p[0], vec![1, 4, 5])))?,
        case("rows_l2_norm", vec![rand_tensor_off_zero(vec![3, 4], rng)],
            Box::new(|g, p| g.rows_l2_norm(p[0])))?,
        case("sum_all", vec![rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.sum_all(p[0])))?,
        case("mean_all", vec![rand_tensor(vec![2, 3], rng)],
            Box::new(|g, p| g.mean_all(p[0])))?,
    ];
    rows.extend(checks);
    Ok(())
}

fn composite_checks(rows: &mut Vec<CheckRow>, rng: &mut ChaCha8Rng) -> Result<()> {
    rows.push(check("residual_block", OP_TOL, residual_block_err(rng)?));
    rows.push(check("memory_read", OP_TOL, memory_read_err(rng)?));
    rows.push(check("memory_regularizers", OP_TOL, regularizer_err(rng)?));
    rows.push(check("internal_loss", OP_TOL, internal_loss_err(rng)?));
    rows.push(check("cmd_loss", OP_TOL, cmd_loss_err(rng)?));
    Ok(())
}

/// A residual block with its eight tensors as free parameters.
fn residual_block_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = 4;
    let names = [
        ("blk.conv1.w", vec![c, c, 3, 3]),
        ("blk.conv1.b", vec![c]),
        ("blk.conv2.w", vec![c, c, 3, 3]),
        ("blk.conv2.b", vec![c]),
        ("blk.att.fc1.w", vec![1, c]),
        ("blk.att.fc1.b", vec![1]),
        ("blk.att.fc2.w", vec![c, 1]),
        ("blk.att.fc2.b", vec![c]),
    ];
    let mut seeds: Vec<Tensor<f64>> =
        names.iter().map(|(_, shape)| rand_tensor(shape.clone(), rng)).collect();
    // Keep the convolutions gentle so the sigmoid stays responsive.
    for s in seeds.iter_mut().take(4) {
        for x in s.data_mut() {
            *x *= 0.3;
        }
    }
    seeds.push(rand_tensor(vec![c, 5, 5], rng));
    gradcheck(&seeds, DEFAULT_EPS, |g, p| {
        let ids: IndexMap<String, NodeId> =
            names.iter().zip(p).map(|((n, _), &id)| (n.to_string(), id)).collect();
        let bp = BoundParams::from_ids(ids);
        let y = residual_block_nodes(g, &bp, "blk", p[8])?;
        g.sum_all(y)
    })
}

fn memory_read_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let e3 = rand_tensor(vec![4, 2, 2], rng);
    let bank = rand_tensor(vec![3, 4], rng);
    gradcheck(&[e3, bank], DEFAULT_EPS, |g, p| {
        let read = read_nodes(g, p[0], p[1])?;
        g.sum_all(read.d3)
    })
}

/// Compactness + separateness with the nearest/second-nearest assignment
/// held stable by well-separated bank rows, so the finite differences
/// never cross an assignment boundary.
fn regularizer_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let bank = Tensor::new(
        vec![3, 4],
        vec![2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0],
    )?;
    let mut e3 = rand_tensor(vec![4, 2, 2], rng);
    // Bias every position's features toward item 0.
    for i in 0..4 {
        e3.data_mut()[i] += 1.5;
    }
    gradcheck(&[e3, bank], DEFAULT_EPS, |g, p| {
        let read = read_nodes(g, p[0], p[1])?;
        let (com, sep) = regularizer_nodes(g, &read, p[1], 1.0)?;
        g.add(com, sep)
    })
}

fn internal_loss_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let pred = rand_tensor(vec![2, 8, 8], rng);
    let target = rand_tensor(vec![3, 8, 8], rng); // extra slice exercises truncation
    gradcheck(&[pred, target], DEFAULT_EPS, |g, p| {
        internal_loss_nodes(g, p[0], p[1], ViewAxis::Coronal)
    })
}

/// The selected-voxel set is computed once from the seed values and
/// frozen, mirroring how a training step treats it as data.
fn cmd_loss_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(vec![3, 4, 4], rng);
    let b = rand_tensor(vec![3, 4, 4], rng);
    let va = Volume::new(4, 4, 3, (1.0, 1.0, 1.0), (-2.0, 2.0), a.data().iter().map(|&x| x as f32).collect())?;
    let vb = Volume::new(4, 4, 3, (1.0, 1.0, 1.0), (-2.0, 2.0), b.data().iter().map(|&x| x as f32).collect())?;
    let set = select_consistent(&va, &vb, 0.5, true, 2)?;
    gradcheck(&[a, b], DEFAULT_EPS, move |g, p| cmd_loss_nodes(g, p[0], p[1], &set))
}

/// Smallest architecture the config validator accepts.
fn tiny_net() -> NetConfig {
    NetConfig {
        r: 2,
        base_channels: 4,
        blocks_per_group: 1,
        s2d_block: 2,
        attention_reduction: 4,
        pint_groups: 1,
        memory_items: 3,
    }
}

fn jitter(params: &mut NetworkParams, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name).expect("own name");
        for x in t.data_mut() {
            *x += (rng.random::<f64>() * 0.4 - 0.2) as f32;
        }
    }
}

fn noise_volume(h: usize, w: usize, l: usize, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let data: Vec<f32> = (0..h * w * l).map(|_| rng.random::<f64>() as f32).collect();
    Volume::new(h, w, l, (1.0, 1.0, 1.0), (0.0, 1.0), data)
}

/// Every slice-wise parameter (and the bank) against finite differences
/// on a 16×16 slice pair.
fn sint_network_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_net();
    let mut params = build_sint(&cfg, 7)?;
    jitter(&mut params, rng);

    let names: Vec<String> = params.names().cloned().collect();
    let mut seeds: Vec<Tensor<f64>> =
        names.iter().map(|n| params.get(n).expect("own name").cast()).collect();
    seeds.push(rand_tensor(vec![3, 4], rng)); // memory bank

    let x_i = Tensor::<f32>::from_f64s(vec![1, 16, 16], rand_tensor(vec![1, 16, 16], rng).data())?;
    let x_i1 = Tensor::<f32>::from_f64s(vec![1, 16, 16], rand_tensor(vec![1, 16, 16], rng).data())?;
    let target = rand_tensor(vec![1, 16, 16], rng);

    gradcheck(&seeds, DEFAULT_EPS, move |g, p| {
        let ids: IndexMap<String, NodeId> =
            names.iter().zip(p).map(|(n, &id)| (n.clone(), id)).collect();
        let bp = BoundParams::from_ids(ids);
        let bank = p[p.len() - 1];
        let a = g.input(x_i.cast());
        let b = g.input(x_i1.cast());
        let pair = sint_pair_nodes(g, &bp, &cfg, bank, a, b)?;
        let out = g.concat0(&pair.slices)?;
        let t = g.input(target.clone());
        g.mse(out, t)
    })
}

/// Every pixel-wise parameter against finite differences on one image.
fn pint_network_err(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_net();
    let mut params = build_pint(&cfg, 8)?;
    jitter(&mut params, rng);

    let names: Vec<String> = params.names().cloned().collect();
    let seeds: Vec<Tensor<f64>> =
        names.iter().map(|n| params.get(n).expect("own name").cast()).collect();

    let image = Tensor::<f32>::from_f64s(vec![1, 6, 5], rand_tensor(vec![1, 6, 5], rng).data())?;
    let target = rand_tensor(vec![1, 6, 9], rng);

    gradcheck(&seeds, DEFAULT_EPS, move |g, p| {
        let ids: IndexMap<String, NodeId> =
            names.iter().zip(p).map(|(n, &id)| (n.clone(), id)).collect();
        let bp = BoundParams::from_ids(ids);
        let x = g.input(image.cast());
        let out = pint_image_nodes(g, &bp, &cfg, x)?;
        let t = g.input(target.clone());
        g.mse(out, t)
    })
}

/// Formats the rows as the fixed-width table the CLI prints.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    out.push_str(&format!("{:<width$}  {:>12}  {:>9}  result\n", "check", "max rel err", "tolerance"));
    for row in rows {
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>9.0e}  {}\n",
            row.name,
            row.max_rel_err,
            row.tolerance,
            if row.passed() { "pass" } else { "FAIL" },
        ));
    }
    out
}

/// True when every row passed; convenience for exit-code decisions.
pub fn all_passed(rows: &[CheckRow]) -> bool {
    rows.iter().all(CheckRow::passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_is_clean() {
        let rows = gradient_suite(false).unwrap();
        assert!(rows.len() > 30);
        for row in &rows {
            assert!(row.passed(), "{} at {:.3e} exceeds {:.0e}", row.name, row.max_rel_err, row.tolerance);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let dead = gradient_coverage().unwrap();
        assert!(dead.is_empty(), "parameters with no gradient: {dead:?}");
    }

    #[test]
    fn table_marks_failures() {
        let rows = vec![
            CheckRow { name: "good", max_rel_err: 1e-6, tolerance: 1e-4 },
            CheckRow { name: "bad", max_rel_err: 2e-3, tolerance: 1e-4 },
        ];
        let table = format_table(&rows);
        assert!(table.contains("pass"));
        assert!(table.contains("FAIL"));
        assert!(!all_passed(&rows));
        assert!(all_passed(&rows[..1]));
    }
}
