//! Forward and backward implementations for every tape operation.
//!
//! Ops are generic over the tensor's scalar type: elementwise work and
//! convolutions run in storage precision, while long reductions (sums,
//! means, norms, softmax rows, matmul accumulators) go through `f64` so
//! a graph of f32 tensors still produces trustworthy loss values.
//! Backward methods return one optional gradient per input (None when
//! an input is a non-differentiable attribute such as gather indices —
//! there are none of those today, so None only ever means "not computed
//! because nothing upstream needs it").

use crate::error::Result;
use crate::transforms;

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// 3x3-style convolution, stride 1, zero "same" padding; inputs
    /// `x [ci,h,w]` and `kernel [co,ci,kh,kw]` with odd kernel dims.
    Conv2d,
    /// `x [c,h,w] + bias [c]` broadcast over space.
    BiasAdd,
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// Concatenate along axis 0; all trailing dims equal.
    Concat0,
    Slice0 { start: usize, len: usize },
    SliceLast { start: usize, len: usize },
    Permute3([usize; 3]),
    Reshape(Vec<usize>),
    Transpose2,
    /// `x [i]`, `w [o,i]`, `b [o]` -> `[o]`.
    Linear,
    /// `[c,h,w] -> [c]` spatial mean.
    GlobalAvgPool,
    /// `x [c,h,w] * s [c]` broadcast over space.
    ChannelScale,
    /// Row-wise softmax of a `[n,m]` matrix.
    Softmax,
    /// Mean squared difference of two same-shape tensors -> scalar.
    Mse,
    /// `[n,k] x [k,m] -> [n,m]`.
    Matmul,
    L2NormalizeRows,
    SpaceToDepth(usize),
    DepthToSpace(usize),
    /// `[c*r, rows, cols] -> [c, rows, cols*r]`, channel t of a group
    /// fills column offset t: the 1-D sub-pixel upscale.
    PixelShuffleCols(usize),
    /// `y[.., j] = x[.., min(j+1, last)]` along the last axis.
    ShiftColsLeftClamp,
    /// One Haar analysis scale `[c,h,w] -> [4c, ceil(h/2), ceil(w/2)]`.
    HaarScale,
    GatherRows(Vec<usize>),
    GatherElems(Vec<usize>),
    /// Per-row Euclidean norm of a `[n,d]` matrix -> `[n]`.
    RowsL2Norm,
    SumAll,
    MeanAll,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d => "conv2d",
            Op::BiasAdd => "bias_add",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Concat0 => "concat0",
            Op::Slice0 { .. } => "slice0",
            Op::SliceLast { .. } => "slice_last",
            Op::Permute3(_) => "permute3",
            Op::Reshape(_) => "reshape",
            Op::Transpose2 => "transpose2",
            Op::Linear => "linear",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ChannelScale => "channel_scale",
            Op::Softmax => "softmax",
            Op::Mse => "mse",
            Op::Matmul => "matmul",
            Op::L2NormalizeRows => "l2_normalize_rows",
            Op::SpaceToDepth(_) => "space_to_depth",
            Op::DepthToSpace(_) => "depth_to_space",
            Op::PixelShuffleCols(_) => "pixel_shuffle_cols",
            Op::ShiftColsLeftClamp => "shift_cols_left",
            Op::HaarScale => "haar_scale",
            Op::GatherRows(_) => "gather_rows",
            Op::GatherElems(_) => "gather_elems",
            Op::RowsL2Norm => "rows_l2_norm",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match self {
            Op::Leaf => unreachable!("leaves have no forward"),
            Op::Conv2d => conv2d_forward(xs[0], xs[1]),
            Op::BiasAdd => {
                let (c, h, w) = xs[0].dims3()?;
                let b = xs[1].data();
                let mut out = xs[0].data().to_vec();
                for ch in 0..c {
                    for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                        *v += b[ch];
                    }
                }
                Tensor::new(vec![c, h, w], out)
            }
            Op::Relu => map1(xs[0], |v| v.max(T::ZERO)),
            Op::Sigmoid => map1(xs[0], |v| T::ONE / (T::ONE + (-v).exp())),
            Op::Add => zip2(xs[0], xs[1], |a, b| a + b),
            Op::Sub => zip2(xs[0], xs[1], |a, b| a - b),
            Op::Mul => zip2(xs[0], xs[1], |a, b| a * b),
            Op::Scale(a) => {
                let a = T::from_f64(*a);
                map1(xs[0], |v| a * v)
            }
            Op::AddScalar(a) => {
                let a = T::from_f64(*a);
                map1(xs[0], |v| a + v)
            }
            Op::Concat0 => {
                let mut data = Vec::new();
                let mut dim0 = 0;
                for x in xs {
                    data.extend_from_slice(x.data());
                    dim0 += x.shape()[0];
                }
                let mut shape = xs[0].shape().to_vec();
                shape[0] = dim0;
                Tensor::new(shape, data)
            }
            Op::Slice0 { start, len } => {
                let stride: usize = xs[0].shape()[1..].iter().product();
                let mut shape = xs[0].shape().to_vec();
                shape[0] = *len;
                Tensor::new(shape, xs[0].data()[start * stride..(start + len) * stride].to_vec())
            }
            Op::SliceLast { start, len } => {
                let last = *xs[0].shape().last().unwrap();
                let rows = xs[0].numel() / last;
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&xs[0].data()[r * last + start..r * last + start + len]);
                }
                let mut shape = xs[0].shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Tensor::new(shape, out)
            }
            Op::Permute3(perm) => permute3(xs[0], *perm),
            Op::Reshape(shape) => Tensor::new(shape.clone(), xs[0].data().to_vec()),
            Op::Transpose2 => {
                let (n, m) = xs[0].dims2()?;
                let xd = xs[0].data();
                let mut out = vec![T::ZERO; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = xd[i * m + j];
                    }
                }
                Tensor::new(vec![m, n], out)
            }
            Op::Linear => {
                let (o, i) = xs[1].dims2()?;
                let x = xs[0].data();
                let w = xs[1].data();
                let b = xs[2].data();
                let mut out = Vec::with_capacity(o);
                for row in 0..o {
                    let mut acc = b[row].to_f64();
                    for col in 0..i {
                        acc += (w[row * i + col] * x[col]).to_f64();
                    }
                    out.push(T::from_f64(acc));
                }
                Tensor::new(vec![o], out)
            }
            Op::GlobalAvgPool => {
                let (c, h, w) = xs[0].dims3()?;
                let xd = xs[0].data();
                let inv = 1.0 / (h * w) as f64;
                let out: Vec<T> = (0..c)
                    .map(|ch| {
                        let sum: f64 =
                            xd[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.to_f64()).sum();
                        T::from_f64(sum * inv)
                    })
                    .collect();
                Tensor::new(vec![c], out)
            }
            Op::ChannelScale => {
                let (c, h, w) = xs[0].dims3()?;
                let s = xs[1].data();
                let mut out = xs[0].data().to_vec();
                for ch in 0..c {
                    for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                        *v = *v * s[ch];
                    }
                }
                Tensor::new(vec![c, h, w], out)
            }
            Op::Softmax => {
                let (n, m) = xs[0].dims2()?;
                let xd = xs[0].data();
                let mut out = vec![T::ZERO; n * m];
                let mut es = vec![0.0f64; m];
                for i in 0..n {
                    let row = &xd[i * m..(i + 1) * m];
                    let max =
                        row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
                    let mut sum = 0.0;
                    for j in 0..m {
                        es[j] = (row[j].to_f64() - max).exp();
                        sum += es[j];
                    }
                    for j in 0..m {
                        out[i * m + j] = T::from_f64(es[j] / sum);
                    }
                }
                Tensor::new(vec![n, m], out)
            }
            Op::Mse => {
                let n = xs[0].numel() as f64;
                let mut acc = 0.0;
                for (a, b) in xs[0].data().iter().zip(xs[1].data()) {
                    let d = (*a - *b).to_f64();
                    acc += d * d;
                }
                Ok(Tensor::scalar(T::from_f64(acc / n)))
            }
            Op::Matmul => {
                let (n, k) = xs[0].dims2()?;
                let (_, m) = xs[1].dims2()?;
                let a = xs[0].data();
                let b = xs[1].data();
                let mut out = vec![0.0f64; n * m];
                for i in 0..n {
                    for kk in 0..k {
                        let aik = a[i * k + kk].to_f64();
                        let brow = &b[kk * m..(kk + 1) * m];
                        let orow = &mut out[i * m..(i + 1) * m];
                        for j in 0..m {
                            orow[j] += aik * brow[j].to_f64();
                        }
                    }
                }
                Tensor::new(vec![n, m], out.into_iter().map(T::from_f64).collect())
            }
            Op::L2NormalizeRows => {
                let (n, d) = xs[0].dims2()?;
                let xd = xs[0].data();
                let mut out = vec![T::ZERO; n * d];
                for i in 0..n {
                    let row = &xd[i * d..(i + 1) * d];
                    let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
                    if norm > 1e-30 {
                        for j in 0..d {
                            out[i * d + j] = T::from_f64(row[j].to_f64() / norm);
                        }
                    }
                }
                Tensor::new(vec![n, d], out)
            }
            Op::SpaceToDepth(b) => transforms::s2d_forward(xs[0], *b),
            Op::DepthToSpace(b) => transforms::d2s_forward(xs[0], *b),
            Op::PixelShuffleCols(r) => {
                let (c, rows, cols) = xs[0].dims3()?;
                let co = c / r;
                let xd = xs[0].data();
                let mut out = vec![T::ZERO; c * rows * cols];
                for oc in 0..co {
                    for t in 0..*r {
                        for y in 0..rows {
                            for j in 0..cols {
                                out[(oc * rows + y) * (cols * r) + j * r + t] =
                                    xd[((oc * r + t) * rows + y) * cols + j];
                            }
                        }
                    }
                }
                Tensor::new(vec![co, rows, cols * r], out)
            }
            Op::ShiftColsLeftClamp => {
                let last = *xs[0].shape().last().unwrap();
                let rows = xs[0].numel() / last;
                let xd = xs[0].data();
                let mut out = vec![T::ZERO; xd.len()];
                for rr in 0..rows {
                    for j in 0..last {
                        out[rr * last + j] = xd[rr * last + (j + 1).min(last - 1)];
                    }
                }
                Tensor::new(xs[0].shape().to_vec(), out)
            }
            Op::HaarScale => transforms::haar_scale_forward(xs[0]),
            Op::GatherRows(idx) => {
                let (_, d) = xs[0].dims2()?;
                let xd = xs[0].data();
                let mut out = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    out.extend_from_slice(&xd[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![idx.len(), d], out)
            }
            Op::GatherElems(idx) => {
                let xd = xs[0].data();
                let out: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
                Tensor::new(vec![idx.len()], out)
            }
            Op::RowsL2Norm => {
                let (n, d) = xs[0].dims2()?;
                let xd = xs[0].data();
                let out: Vec<T> = (0..n)
                    .map(|i| {
                        let ss: f64 =
                            xd[i * d..(i + 1) * d].iter().map(|v| v.to_f64() * v.to_f64()).sum();
                        T::from_f64(ss.sqrt())
                    })
                    .collect();
                Tensor::new(vec![n], out)
            }
            Op::SumAll => {
                let sum: f64 = xs[0].data().iter().map(|v| v.to_f64()).sum();
                Ok(Tensor::scalar(T::from_f64(sum)))
            }
            Op::MeanAll => {
                let sum: f64 = xs[0].data().iter().map(|v| v.to_f64()).sum();
                Ok(Tensor::scalar(T::from_f64(sum / xs[0].numel() as f64)))
            }
        }
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        xs: &[&Tensor<T>],
        y: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        match self {
            Op::Leaf => unreachable!("leaves have no backward"),
            Op::Conv2d => conv2d_backward(xs[0], xs[1], gy),
            Op::BiasAdd => {
                let (c, h, w) = xs[0].dims3()?;
                let gyd = gy.data();
                let db: Vec<T> = (0..c)
                    .map(|ch| {
                        let sum: f64 =
                            gyd[ch * h * w..(ch + 1) * h * w].iter().map(|g| g.to_f64()).sum();
                        T::from_f64(sum)
                    })
                    .collect();
                Ok(vec![Some(gy.clone()), Some(Tensor::new(vec![c], db)?)])
            }
            Op::Relu => {
                let gx = zip2(xs[0], gy, |x, g| if x > T::ZERO { g } else { T::ZERO })?;
                Ok(vec![Some(gx)])
            }
            Op::Sigmoid => {
                let gx = zip2(y, gy, |yv, g| g * yv * (T::ONE - yv))?;
                Ok(vec![Some(gx)])
            }
            Op::Add => Ok(vec![Some(gy.clone()), Some(gy.clone())]),
            Op::Sub => Ok(vec![Some(gy.clone()), Some(map1(gy, |g| -g)?)]),
            Op::Mul => Ok(vec![
                Some(zip2(gy, xs[1], |g, b| g * b)?),
                Some(zip2(gy, xs[0], |g, a| g * a)?),
            ]),
            Op::Scale(a) => {
                let a = T::from_f64(*a);
                Ok(vec![Some(map1(gy, |g| a * g)?)])
            }
            Op::AddScalar(_) => Ok(vec![Some(gy.clone())]),
            Op::Concat0 => {
                let stride: usize = xs[0].shape()[1..].iter().product();
                let gyd = gy.data();
                let mut grads = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for x in xs {
                    let n = x.shape()[0] * stride;
                    grads.push(Some(Tensor::new(x.shape().to_vec(), gyd[offset..offset + n].to_vec())?));
                    offset += n;
                }
                Ok(grads)
            }
            Op::Slice0 { start, len } => {
                let stride: usize = xs[0].shape()[1..].iter().product();
                let mut gx = vec![T::ZERO; xs[0].numel()];
                gx[start * stride..(start + len) * stride].copy_from_slice(gy.data());
                Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), gx)?)])
            }
            Op::SliceLast { start, len } => {
                let last = *xs[0].shape().last().unwrap();
                let rows = xs[0].numel() / last;
                let mut gx = vec![T::ZERO; xs[0].numel()];
                let gyd = gy.data();
                for r in 0..rows {
                    gx[r * last + start..r * last + start + len]
                        .copy_from_slice(&gyd[r * len..(r + 1) * len]);
                }
                Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), gx)?)])
            }
            Op::Permute3(perm) => {
                let mut inv = [0usize; 3];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                Ok(vec![Some(permute3(gy, inv)?)])
            }
            Op::Reshape(_) => Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), gy.data().to_vec())?)]),
            Op::Transpose2 => Ok(vec![Some(Op::Transpose2.forward(&[gy])?)]),
            Op::Linear => {
                let (o, i) = xs[1].dims2()?;
                let x = xs[0].data();
                let w = xs[1].data();
                let g = gy.data();
                let mut gx = vec![0.0f64; i];
                let mut gw = vec![T::ZERO; o * i];
                for row in 0..o {
                    let grow = g[row];
                    for col in 0..i {
                        gx[col] += (w[row * i + col] * grow).to_f64();
                        gw[row * i + col] = grow * x[col];
                    }
                }
                Ok(vec![
                    Some(Tensor::new(vec![i], gx.into_iter().map(T::from_f64).collect())?),
                    Some(Tensor::new(vec![o, i], gw)?),
                    Some(Tensor::new(vec![o], g.to_vec())?),
                ])
            }
            Op::GlobalAvgPool => {
                let (c, h, w) = xs[0].dims3()?;
                let inv = 1.0 / (h * w) as f64;
                let g = gy.data();
                let mut gx = vec![T::ZERO; c * h * w];
                for ch in 0..c {
                    let gv = T::from_f64(g[ch].to_f64() * inv);
                    for v in &mut gx[ch * h * w..(ch + 1) * h * w] {
                        *v = gv;
                    }
                }
                Ok(vec![Some(Tensor::new(vec![c, h, w], gx)?)])
            }
            Op::ChannelScale => {
                let (c, h, w) = xs[0].dims3()?;
                let s = xs[1].data();
                let xd = xs[0].data();
                let g = gy.data();
                let mut gx = vec![T::ZERO; c * h * w];
                let mut gs = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for i in ch * h * w..(ch + 1) * h * w {
                        gx[i] = g[i] * s[ch];
                        acc += (g[i] * xd[i]).to_f64();
                    }
                    gs[ch] = T::from_f64(acc);
                }
                Ok(vec![Some(Tensor::new(vec![c, h, w], gx)?), Some(Tensor::new(vec![c], gs)?)])
            }
            Op::Softmax => {
                let (n, m) = y.dims2()?;
                let yd = y.data();
                let g = gy.data();
                let mut gx = vec![T::ZERO; n * m];
                for i in 0..n {
                    let yrow = &yd[i * m..(i + 1) * m];
                    let grow = &g[i * m..(i + 1) * m];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| (*a * *b).to_f64()).sum();
                    for j in 0..m {
                        gx[i * m + j] = T::from_f64(yrow[j].to_f64() * (grow[j].to_f64() - dot));
                    }
                }
                Ok(vec![Some(Tensor::new(vec![n, m], gx)?)])
            }
            Op::Mse => {
                let n = xs[0].numel() as f64;
                let g = T::from_f64(gy.item()?.to_f64() * 2.0 / n);
                let ga = zip2(xs[0], xs[1], |a, b| g * (a - b))?;
                let gb = map1(&ga, |v| -v)?;
                Ok(vec![Some(ga), Some(gb)])
            }
            Op::Matmul => {
                let (n, k) = xs[0].dims2()?;
                let (_, m) = xs[1].dims2()?;
                let a = xs[0].data();
                let b = xs[1].data();
                let g = gy.data();
                let mut ga = vec![T::ZERO; n * k];
                for i in 0..n {
                    for kk in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..m {
                            acc += (g[i * m + j] * b[kk * m + j]).to_f64();
                        }
                        ga[i * k + kk] = T::from_f64(acc);
                    }
                }
                let mut gb = vec![0.0f64; k * m];
                for i in 0..n {
                    for kk in 0..k {
                        let aik = a[i * k + kk].to_f64();
                        let grow = &g[i * m..(i + 1) * m];
                        let brow = &mut gb[kk * m..(kk + 1) * m];
                        for j in 0..m {
                            brow[j] += aik * grow[j].to_f64();
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(vec![n, k], ga)?),
                    Some(Tensor::new(vec![k, m], gb.into_iter().map(T::from_f64).collect())?),
                ])
            }
            Op::L2NormalizeRows => {
                let (n, d) = xs[0].dims2()?;
                let xd = xs[0].data();
                let yd = y.data();
                let g = gy.data();
                let mut gx = vec![T::ZERO; n * d];
                for i in 0..n {
                    let row = &xd[i * d..(i + 1) * d];
                    let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
                    if norm <= 1e-30 {
                        continue;
                    }
                    let yrow = &yd[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| (*a * *b).to_f64()).sum();
                    for j in 0..d {
                        gx[i * d + j] =
                            T::from_f64((grow[j].to_f64() - yrow[j].to_f64() * dot) / norm);
                    }
                }
                Ok(vec![Some(Tensor::new(vec![n, d], gx)?)])
            }
            Op::SpaceToDepth(b) => Ok(vec![Some(transforms::d2s_forward(gy, *b)?)]),
            Op::DepthToSpace(b) => Ok(vec![Some(transforms::s2d_forward(gy, *b)?)]),
            Op::PixelShuffleCols(r) => {
                let (c, rows, cols) = xs[0].dims3()?;
                let co = c / r;
                let g = gy.data();
                let mut gx = vec![T::ZERO; c * rows * cols];
                for oc in 0..co {
                    for t in 0..*r {
                        for yy in 0..rows {
                            for j in 0..cols {
                                gx[((oc * r + t) * rows + yy) * cols + j] =
                                    g[(oc * rows + yy) * (cols * r) + j * r + t];
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(vec![c, rows, cols], gx)?)])
            }
            Op::ShiftColsLeftClamp => {
                let last = *xs[0].shape().last().unwrap();
                let rows = xs[0].numel() / last;
                let g = gy.data();
                let mut gx = vec![T::ZERO; xs[0].numel()];
                for rr in 0..rows {
                    for j in 0..last {
                        gx[rr * last + (j + 1).min(last - 1)] += g[rr * last + j];
                    }
                }
                Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), gx)?)])
            }
            Op::HaarScale => Ok(vec![Some(transforms::haar_scale_backward(xs[0].shape(), gy)?)]),
            Op::GatherRows(idx) => {
                let (n, d) = xs[0].dims2()?;
                let g = gy.data();
                let mut gx = vec![T::ZERO; n * d];
                for (gi, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[gi * d + j];
                    }
                }
                Ok(vec![Some(Tensor::new(vec![n, d], gx)?)])
            }
            Op::GatherElems(idx) => {
                let g = gy.data();
                let mut gx = vec![T::ZERO; xs[0].numel()];
                for (gi, &i) in idx.iter().enumerate() {
                    gx[i] += g[gi];
                }
                Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), gx)?)])
            }
            Op::RowsL2Norm => {
                let (n, d) = xs[0].dims2()?;
                let xd = xs[0].data();
                let norms = y.data();
                let g = gy.data();
                let mut gx = vec![T::ZERO; n * d];
                for i in 0..n {
                    if norms[i].to_f64() <= 1e-30 {
                        continue;
                    }
                    let scale = g[i].to_f64() / norms[i].to_f64();
                    for j in 0..d {
                        gx[i * d + j] = T::from_f64(scale * xd[i * d + j].to_f64());
                    }
                }
                Ok(vec![Some(Tensor::new(vec![n, d], gx)?)])
            }
            Op::SumAll => {
                let g = gy.item()?;
                Ok(vec![Some(Tensor::filled(xs[0].shape().to_vec(), g))])
            }
            Op::MeanAll => {
                let g = T::from_f64(gy.item()?.to_f64() / xs[0].numel() as f64);
                Ok(vec![Some(Tensor::filled(xs[0].shape().to_vec(), g))])
            }
        }
    }
}

/// Dot product over four independent accumulator lanes. The lanes break
/// the sequential dependence so the loop can run wide; the combination
/// order is fixed, so results stay reproducible.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::ZERO; 4];
    let mut i = 0;
    while i + 4 <= n {
        lanes[0] += a[i] * b[i];
        lanes[1] += a[i + 1] * b[i + 1];
        lanes[2] += a[i + 2] * b[i + 2];
        lanes[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    while i < n {
        acc += a[i] * b[i];
        i += 1;
    }
    acc
}

fn map1<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn permute3<T: Scalar>(x: &Tensor<T>, perm: [usize; 3]) -> Result<Tensor<T>> {
    let dims = x.shape();
    let od = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    // strides of the input axes as they appear in output order
    let istrides = [dims[1] * dims[2], dims[2], 1];
    let s = [istrides[perm[0]], istrides[perm[1]], istrides[perm[2]]];
    let mut o = 0;
    for i0 in 0..od[0] {
        for i1 in 0..od[1] {
            let base = i0 * s[0] + i1 * s[1];
            for i2 in 0..od[2] {
                out[o] = xd[base + i2 * s[2]];
                o += 1;
            }
        }
    }
    Tensor::new(od.to_vec(), out)
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (ci, h, w) = x.dims3()?;
    let ks = k.shape();
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let (py, px) = (kh / 2, kw / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::ZERO; co * h * w];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                // valid output rows for this kernel row
                let oy_lo = py.saturating_sub(ky);
                let oy_hi = (h + py - ky).min(h);
                for kx in 0..kw {
                    let kv = kd[((o * ci + c) * kh + ky) * kw + kx];
                    let ox_lo = px.saturating_sub(kx);
                    let ox_hi = (w + px - kx).min(w);
                    let ix_lo = ox_lo + kx - px; // never underflows: ox_lo + kx >= px
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - py;
                        let xrow = &xd[(c * h + iy) * w + ix_lo..][..ox_hi - ox_lo];
                        let orow = &mut out[(o * h + oy) * w + ox_lo..][..ox_hi - ox_lo];
                        for (ov, &xv) in orow.iter_mut().zip(xrow) {
                            *ov += kv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, w], out)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let (ci, h, w) = x.dims3()?;
    let ks = k.shape();
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let (py, px) = (kh / 2, kw / 2);
    let xd = x.data();
    let kd = k.data();
    let g = gy.data();

    let mut gk = vec![T::ZERO; co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                let oy_lo = py.saturating_sub(ky);
                let oy_hi = (h + py - ky).min(h);
                for kx in 0..kw {
                    let ox_lo = px.saturating_sub(kx);
                    let ox_hi = (w + px - kx).min(w);
                    let ix_lo = ox_lo + kx - px;
                    let mut acc = T::ZERO;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - py;
                        let xrow = &xd[(c * h + iy) * w + ix_lo..][..ox_hi - ox_lo];
                        let grow = &g[(o * h + oy) * w + ox_lo..][..ox_hi - ox_lo];
                        acc += dot(grow, xrow);
                    }
                    gk[((o * ci + c) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }

    let mut gx = vec![T::ZERO; ci * h * w];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                let oy_lo = py.saturating_sub(ky);
                let oy_hi = (h + py - ky).min(h);
                for kx in 0..kw {
                    let kv = kd[((o * ci + c) * kh + ky) * kw + kx];
                    let ox_lo = px.saturating_sub(kx);
                    let ox_hi = (w + px - kx).min(w);
                    let ix_lo = ox_lo + kx - px;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - py;
                        let grow = &g[(o * h + oy) * w + ox_lo..][..ox_hi - ox_lo];
                        let xrow = &mut gx[(c * h + iy) * w + ix_lo..][..ox_hi - ox_lo];
                        for (xv, &gv) in xrow.iter_mut().zip(grow) {
                            *xv += kv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(vec![
        Some(Tensor::new(vec![ci, h, w], gx)?),
        Some(Tensor::new(vec![co, ci, kh, kw], gk)?),
    ])
}
