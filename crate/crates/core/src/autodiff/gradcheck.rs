//! Finite-difference verification of the hand-written gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! function under test must be a pure builder: same inputs, same graph.
//! Everything runs in `f64`; central differences with the default step
//! of 1e-3 resolve gradients to far better than the 1e-4 acceptance
//! threshold for smooth ops.

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Checks the analytic gradient of a scalar-valued builder against
/// central differences over every element of every seed tensor, and
/// returns the worst relative error, `|a - n| / max(|a|, |n|, 1e-6)`.
/// The floor matters: where the true gradient is exactly zero, the
/// central difference still carries ~1e-12 of cancellation noise, and a
/// smaller floor would report that noise as a meaningful mismatch.
pub fn gradcheck<F>(inits: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g: Graph<f64> = Graph::new();
        let params: Vec<NodeId> = inits.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &params)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::shape("gradcheck", "builder must return a scalar"));
        }
        let grads = g.backward(loss)?;
        params
            .iter()
            .zip(inits)
            .map(|(&p, t)| grads.get_or_zeros(p, t.shape()))
            .collect()
    };

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let params: Vec<NodeId> = tensors.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &params)?;
        g.item_f64(loss)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inits.to_vec();
    for (pi, init) in inits.iter().enumerate() {
        for ei in 0..init.numel() {
            let x0 = init.data()[ei];
            probe[pi].data_mut()[ei] = x0 + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[ei] = x0 - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[ei] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(vec![6], &mut rng);
        let err = gradcheck(&[x], DEFAULT_EPS, |g, p| {
            let y = g.scale(p[0], 2.5)?;
            g.sum_all(y)
        })
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn single_sigmoid_neuron() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(vec![4], &mut rng);
        let w = random_tensor(vec![1, 4], &mut rng);
        let b = random_tensor(vec![1], &mut rng);
        let err = gradcheck(&[x, w, b], DEFAULT_EPS, |g, p| {
            let z = g.linear(p[0], p[1], p[2])?;
            let z3 = g.reshape(z, vec![1, 1])?;
            // reuse sigmoid through the rank-agnostic path
            let s = g.sigmoid(z3)?;
            g.sum_all(s)
        })
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn composition_of_conv_relu_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(vec![2, 5, 5], &mut rng);
        let k = random_tensor(vec![3, 2, 3, 3], &mut rng);
        let t = random_tensor(vec![3, 5, 5], &mut rng);
        let err = gradcheck(&[x, k, t], DEFAULT_EPS, |g, p| {
            let c = g.conv2d(p[0], p[1])?;
            let r = g.relu(c)?;
            g.mse(r, p[2])
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
