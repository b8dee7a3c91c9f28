use crate::error::{Error, Result};

use super::ops::Op;
use super::scalar::Scalar;
use super::tensor::Tensor;

pub type NodeId = usize;

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// The tape. Nodes are appended in execution order, so node ids are
/// already a topological order and the backward sweep is a single
/// reverse scan. Inputs and parameters are leaves; only parameters (and
/// anything computed from them) carry gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by node id and
/// stored in the graph's own precision. [`Gradients::get_or_zeros`]
/// widens to `f64` so the optimizer always updates in full precision.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node as `f64`, materializing zeros for parameters
    /// the loss never touched.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<f64> {
        match self.get(id) {
            Some(g) => g.cast(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Overrides the default (debug builds only) non-finite guard.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf: data the loss is never differentiated against.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A learnable leaf; backward will produce its adjoint.
    pub fn parameter(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn value_f64(&self, id: NodeId) -> Tensor<f64> {
        self.nodes[id].value.cast()
    }

    pub fn item_f64(&self, id: NodeId) -> Result<f64> {
        Ok(self.nodes[id].value.item()?.to_f64())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = op.forward(&refs)?;
        if self.check_finite {
            if let Some((i, v)) = value.first_non_finite() {
                return Err(Error::non_finite(format!("{} output element {i} is {v}", op.name())));
            }
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(self.nodes.len() - 1)
    }

    // ---- builders -------------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, image has {}", ks[1], xs[0]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel dims {}x{} must be odd", ks[2], ks[3])));
        }
        self.apply(Op::Conv2d, vec![x, kernel])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(Error::shape("bias_add", format!("input {xs:?}, bias {bs:?}")));
        }
        self.apply(Op::BiasAdd, vec![x, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        self.apply(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("sub", a, b)?;
        self.apply(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::non_finite(format!("scale factor {factor}")));
        }
        self.apply(Op::Scale(factor), vec![x])
    }

    pub fn add_scalar(&mut self, x: NodeId, value: f64) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("add_scalar value {value}")));
        }
        self.apply(Op::AddScalar(value), vec![x])
    }

    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat0 needs at least one input"))?;
        let tail = self.shape(first)[1..].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat0",
                    format!("trailing dims differ: {:?} vs {:?}", self.shape(first), s),
                ));
            }
        }
        self.apply(Op::Concat0, parts.to_vec())
    }

    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(Error::shape("slice0", format!("[{start}, {start}+{len}) of {s:?}")));
        }
        self.apply(Op::Slice0 { start, len }, vec![x])
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        let last = *s.last().ok_or_else(|| Error::shape("slice_last", "rank-0 input"))?;
        if len == 0 || start + len > last {
            return Err(Error::shape("slice_last", format!("[{start}, {start}+{len}) of {s:?}")));
        }
        self.apply(Op::SliceLast { start, len }, vec![x])
    }

    pub fn permute3(&mut self, x: NodeId, perm: [usize; 3]) -> Result<NodeId> {
        let s = self.shape(x);
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::invalid(format!("bad permutation {perm:?}")));
            }
            seen[p] = true;
        }
        if s.len() != 3 {
            return Err(Error::shape("permute3", format!("expected rank 3, got {s:?}")));
        }
        self.apply(Op::Permute3(perm), vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} elems) -> {shape:?} ({numel} elems)", self.shape(x), self.nodes[x].value.numel()),
            ));
        }
        self.apply(Op::Reshape(shape), vec![x])
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose2", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.apply(Op::Transpose2, vec![x])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        self.apply(Op::Linear, vec![x, w, b])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 3, got {:?}", self.shape(x))));
        }
        self.apply(Op::GlobalAvgPool, vec![x])
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() != 3 || ss != [xs[0]] {
            return Err(Error::shape("channel_scale", format!("x {xs:?}, scales {ss:?}")));
        }
        self.apply(Op::ChannelScale, vec![x, s])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("softmax", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.apply(Op::Softmax, vec![x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mse", a, b)?;
        self.apply(Op::Mse, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.apply(Op::Matmul, vec![a, b])
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.apply(Op::L2NormalizeRows, vec![x])
    }

    pub fn space_to_depth(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        crate::transforms::s2d_shape(self.shape(x), block)?;
        self.apply(Op::SpaceToDepth(block), vec![x])
    }

    pub fn depth_to_space(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        crate::transforms::d2s_shape(self.shape(x), block)?;
        self.apply(Op::DepthToSpace(block), vec![x])
    }

    pub fn pixel_shuffle_cols(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || r == 0 || s[0] % r != 0 {
            return Err(Error::shape("pixel_shuffle_cols", format!("shape {s:?}, r {r}")));
        }
        self.apply(Op::PixelShuffleCols(r), vec![x])
    }

    pub fn shift_cols_left(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).is_empty() {
            return Err(Error::shape("shift_cols_left", "rank-0 input"));
        }
        self.apply(Op::ShiftColsLeftClamp, vec![x])
    }

    pub fn haar_scale(&mut self, x: NodeId) -> Result<NodeId> {
        crate::transforms::haar_shape(self.shape(x))?;
        self.apply(Op::HaarScale, vec![x])
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("indices for {s:?}")));
        }
        self.apply(Op::GatherRows(indices), vec![x])
    }

    pub fn gather_elems(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let n = self.nodes[x].value.numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_elems", format!("indices for {n} elements")));
        }
        self.apply(Op::GatherElems(indices), vec![x])
    }

    pub fn rows_l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("rows_l2_norm", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.apply(Op::RowsL2Norm, vec![x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SumAll, vec![x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MeanAll, vec![x])
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates adjoints of everything reachable from `loss`, which
    /// must hold exactly one element. Fan-out sums contributions in node
    /// order, so repeated runs are bit-identical.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::filled(self.nodes[loss].value.shape().to_vec(), T::ONE));

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let (before, from_id) = grads.split_at_mut(id);
            let Some(gy) = from_id[0].as_ref() else { continue };

            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let contributions = node.op.backward(&xs, &node.value, gy)?;

            for (&input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut before[input] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.parameter(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_uniform_vector_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![1, 5], vec![0.3; 5]).unwrap());
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_constant_center_value() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::filled(vec![1, 5, 5], 1.0));
        let k = g.input(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k).unwrap();
        let v = g.value(y);
        assert_eq!(v.at3(0, 2, 2), 9.0); // fully inside
        assert_eq!(v.at3(0, 0, 0), 4.0); // corner sees a 2x2 window
        assert_eq!(v.at3(0, 0, 2), 6.0); // edge sees a 2x3 window
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.parameter(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn scaled_sum_has_constant_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.parameter(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = g.scale(x, 3.0).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn mse_of_identical_nodes_has_zero_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.parameter(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.item_f64(l).unwrap(), 0.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn untouched_parameters_have_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let used = g.parameter(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.parameter(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let s = g.sum_all(used).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.parameter(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn finite_checks_trip_on_overflow() {
        let mut g: Graph<f32> = Graph::new();
        g.set_finite_checks(true);
        let x = g.input(Tensor::new(vec![1], vec![1e30f32]).unwrap());
        let sq = g.mul(x, x); // 1e60 overflows f32 storage
        assert!(matches!(sq, Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(Tensor::from_f64s(vec![2, 6, 6], &(0..72).map(|i| (i as f64 * 0.77).sin()).collect::<Vec<_>>()).unwrap());
            let k = g.input(Tensor::from_f64s(vec![3, 2, 3, 3], &(0..54).map(|i| (i as f64 * 0.31).cos()).collect::<Vec<_>>()).unwrap());
            let c = g.conv2d(x, k).unwrap();
            let r = g.relu(c).unwrap();
            let m = g.mean_all(r).unwrap();
            g.value(m).data()[0]
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
