//! A small reverse-mode automatic differentiation engine.
//!
//! Computation is recorded on a tape ([`Graph`]): every operation appends
//! a node holding its inputs and forward value, and [`Graph::backward`]
//! replays the tape in reverse, accumulating adjoints. There is no
//! broadcasting cleverness and no higher-order support — just the ops the
//! interpolation networks need, each with a hand-written gradient that is
//! pinned down by the finite-difference harness in [`gradcheck`].
//!
//! Precision policy: tensors store `f32` or `f64` (the [`Scalar`]
//! parameter) and elementwise ops, convolutions included, compute in that
//! same precision; long reductions (sums, means, norms, softmax rows,
//! matmul accumulators) run in `f64` and round once on store, so loss
//! values stay trustworthy even on f32 graphs. Adjoints share the graph's
//! precision and widen to `f64` at the optimizer boundary. Loops run in a
//! fixed order, so results are bit-reproducible run to run.

mod graph;
pub mod gradcheck;
mod ops;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;
