//! The external memory bank.
//!
//! `m` prototype rows of dimension `d` sit on the unit sphere. A feature
//! map queries the bank by inner product: softmax weights over items
//! reconstruct each position from memory (the read), and during training
//! each item absorbs the features of the positions that chose it as
//! their nearest prototype (the write). Gradients reach the bank only
//! through the read and the two regularizers; the write itself is an
//! out-of-graph state transition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    m: usize,
    d: usize,
    /// Row-major `m x d`, every row unit L2 norm.
    rows: Vec<f32>,
}

impl MemoryBank {
    /// Draws `m` directions uniformly on the `d`-sphere (via normalized
    /// Gaussians) with a fixed seed.
    pub fn new_seeded(m: usize, d: usize, seed: u64) -> Result<Self> {
        if m < 2 || d == 0 {
            return Err(Error::invalid(format!(
                "memory bank needs m >= 2 items (got {m}) and d >= 1 channels (got {d})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![0.0f32; m * d];
        for item in 0..m {
            let row = &mut rows[item * d..(item + 1) * d];
            loop {
                let mut norm_sq = 0.0f64;
                for v in row.iter_mut() {
                    let g = standard_normal(&mut rng);
                    *v = g as f32;
                    norm_sq += g * g;
                }
                if norm_sq > 1e-12 {
                    let inv = 1.0 / norm_sq.sqrt();
                    for v in row.iter_mut() {
                        *v = (*v as f64 * inv) as f32;
                    }
                    break;
                }
            }
        }
        Ok(MemoryBank { m, d, rows })
    }

    /// Builds a bank from raw rows, normalizing each to unit length.
    pub fn from_rows(m: usize, d: usize, rows: Vec<f32>) -> Result<Self> {
        if m < 2 || d == 0 {
            return Err(Error::invalid(format!("memory bank needs m >= 2, d >= 1; got m={m}, d={d}")));
        }
        if rows.len() != m * d {
            return Err(Error::shape("MemoryBank::from_rows", format!("{} values for {m}x{d}", rows.len())));
        }
        let mut bank = MemoryBank { m, d, rows };
        for item in 0..m {
            let row = &mut bank.rows[item * d..(item + 1) * d];
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::invalid(format!("memory row {item} has zero norm")));
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(bank)
    }

    pub fn items(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, z: usize) -> &[f32] {
        &self.rows[z * self.d..(z + 1) * self.d]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    /// The bank as an `[m, d]` tensor (for graphs and checkpoints).
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.m, self.d], self.rows.clone()).expect("consistent by construction")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (m, d) = t.dims2()?;
        MemoryBank::from_rows(m, d, t.data().to_vec())
    }

    /// Replaces the rows with externally optimized values (an Adam step),
    /// re-projecting each row onto the unit sphere.
    pub fn set_rows(&mut self, rows: Vec<f32>) -> Result<()> {
        *self = MemoryBank::from_rows(self.m, self.d, rows)?;
        Ok(())
    }

    /// Training-time write (a pure function: the updated bank is
    /// returned, the original is untouched).
    ///
    /// Positions are grouped by their nearest item; within each nonempty
    /// group, weights are a softmax over the group's match scores,
    /// renormalized so the best position gets weight 1, and the item
    /// accumulates the weighted feature sum before being re-normalized.
    /// Items that attracted no positions are preserved bit-exactly.
    pub fn update(&self, e3: &FeatureMap) -> Result<MemoryBank> {
        if e3.d != self.d {
            return Err(Error::shape("MemoryBank::update", format!("features have d={}, bank d={}", e3.d, self.d)));
        }
        let p = e3.positions();
        // match scores: logits[pos][z] = <E3[pos], M[z]>
        let mut nearest = vec![0usize; p];
        let mut logits = vec![0.0f64; p * self.m];
        for pos in 0..p {
            let f = e3.feature(pos);
            let mut best = f64::NEG_INFINITY;
            for z in 0..self.m {
                let row = self.row(z);
                let dot: f64 = f.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
                logits[pos * self.m + z] = dot;
                if dot > best {
                    best = dot;
                    nearest[pos] = z;
                }
            }
        }

        let mut new_rows = self.rows.clone();
        for z in 0..self.m {
            let members: Vec<usize> = (0..p).filter(|&pos| nearest[pos] == z).collect();
            if members.is_empty() {
                continue;
            }
            // softmax over the group followed by division by its max
            // collapses to exp(logit - max_logit)
            let max_logit = members
                .iter()
                .map(|&pos| logits[pos * self.m + z])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut acc: Vec<f64> = self.row(z).iter().map(|&v| v as f64).collect();
            for &pos in &members {
                let q = (logits[pos * self.m + z] - max_logit).exp();
                for (a, &f) in acc.iter_mut().zip(e3.feature(pos)) {
                    *a += q * f as f64;
                }
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (slot, v) in new_rows[z * self.d..(z + 1) * self.d].iter_mut().zip(&acc) {
                    *slot = (v / norm) as f32;
                }
            }
        }
        Ok(MemoryBank { m: self.m, d: self.d, rows: new_rows })
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A feature map flattened to `positions x d`: the value-level view of an
/// `E3` tensor, used by the out-of-graph bank update.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    d: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// From a `[d, h, w]` channel-major tensor.
    pub fn from_chw(t: &Tensor<f32>) -> Result<Self> {
        let (d, h, w) = t.dims3()?;
        let mut data = Vec::with_capacity(d * h * w);
        for pos in 0..h * w {
            for c in 0..d {
                data.push(t.data()[c * h * w + pos]);
            }
        }
        Ok(FeatureMap { d, data })
    }

    /// Concatenates several maps (same `d`) into one position list.
    pub fn concat(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("no feature maps to concatenate"))?;
        let mut data = Vec::new();
        for m in maps {
            if m.d != first.d {
                return Err(Error::shape("FeatureMap::concat", format!("{} vs {} channels", m.d, first.d)));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap { d: first.d, data })
    }

    pub fn positions(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn feature(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.d..(pos + 1) * self.d]
    }
}

/// Value-level read result.
#[derive(Debug, Clone)]
pub struct ReadResult {
    /// Reconstruction, same layout as the query map: `[d, h, w]`.
    pub d3: Tensor<f32>,
    /// Attention weights, `[positions, m]`, rows summing to 1.
    pub p: Tensor<f32>,
    pub z_pos: Vec<usize>,
    pub z_neg: Vec<usize>,
}

/// Attention read of the bank by a `[d, h, w]` feature map.
pub fn read(bank: &MemoryBank, e3: &Tensor<f32>) -> Result<ReadResult> {
    let (d, h, w) = e3.dims3()?;
    if d != bank.dim() {
        return Err(Error::shape("memory::read", format!("features have d={d}, bank d={}", bank.dim())));
    }
    let m = bank.items();
    let positions = h * w;
    let mut p = vec![0.0f32; positions * m];
    let mut d3 = vec![0.0f32; d * h * w];
    let mut z_pos = vec![0usize; positions];
    let mut z_neg = vec![0usize; positions];
    for pos in 0..positions {
        let mut logits = vec![0.0f64; m];
        for z in 0..m {
            let row = bank.row(z);
            let mut dot = 0.0f64;
            for c in 0..d {
                dot += e3.data()[c * positions + pos] as f64 * row[c] as f64;
            }
            logits[z] = dot;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        let mut weights = vec![0.0f64; m];
        for z in 0..m {
            weights[z] = (logits[z] - max).exp();
            sum += weights[z];
        }
        for z in 0..m {
            weights[z] /= sum;
            p[pos * m + z] = weights[z] as f32;
        }
        let (zp, zn) = top_two(&weights);
        z_pos[pos] = zp;
        z_neg[pos] = zn;
        for c in 0..d {
            let mut acc = 0.0f64;
            for z in 0..m {
                acc += weights[z] * bank.row(z)[c] as f64;
            }
            d3[c * positions + pos] = acc as f32;
        }
    }
    Ok(ReadResult {
        d3: Tensor::new(vec![d, h, w], d3)?,
        p: Tensor::new(vec![positions, m], p)?,
        z_pos,
        z_neg,
    })
}

/// Largest and second-largest indices, ties resolved to the smaller
/// index (strictly-greater comparison scans left to right).
fn top_two(weights: &[f64]) -> (usize, usize) {
    let mut zp = 0;
    for (z, &v) in weights.iter().enumerate() {
        if v > weights[zp] {
            zp = z;
        }
    }
    let mut zn = usize::MAX;
    for (z, &v) in weights.iter().enumerate() {
        if z == zp {
            continue;
        }
        if zn == usize::MAX || v > weights[zn] {
            zn = z;
        }
    }
    (zp, zn)
}

/// Graph-level read: the same computation recorded on the tape so
/// gradients flow into both the query features and the bank.
pub struct ReadNodes {
    pub d3: NodeId,
    /// `[positions, m]` softmax weights.
    pub p: NodeId,
    /// Features as a `[positions, d]` matrix (shared by the regularizers).
    pub e3_rows: NodeId,
    pub z_pos: Vec<usize>,
    pub z_neg: Vec<usize>,
}

pub fn read_nodes<T: Scalar>(g: &mut Graph<T>, e3: NodeId, bank: NodeId) -> Result<ReadNodes> {
    let (d, h, w) = g.value(e3).dims3()?;
    let (m, bd) = g.value(bank).dims2()?;
    if bd != d {
        return Err(Error::shape("memory::read_nodes", format!("features have d={d}, bank d={bd}")));
    }
    let flat = g.reshape(e3, vec![d, h * w])?;
    let e3_rows = g.transpose2(flat)?; // [positions, d]
    let bank_t = g.transpose2(bank)?; // [d, m]
    let logits = g.matmul(e3_rows, bank_t)?; // [positions, m]
    let p = g.softmax(logits)?;
    let mix = g.matmul(p, bank)?; // [positions, d]
    let mix_t = g.transpose2(mix)?;
    let d3 = g.reshape(mix_t, vec![d, h, w])?;

    // nearest / runner-up come from the weights' values; softmax is
    // monotone in the logits so this matches a raw inner-product argmax
    let pv = g.value(p);
    let mut z_pos = Vec::with_capacity(h * w);
    let mut z_neg = Vec::with_capacity(h * w);
    for pos in 0..h * w {
        let row: Vec<f64> = (0..m).map(|z| pv.data()[pos * m + z].to_f64()).collect();
        let (zp, zn) = top_two(&row);
        z_pos.push(zp);
        z_neg.push(zn);
    }
    Ok(ReadNodes { d3, p, e3_rows, z_pos, z_neg })
}

/// Compactness and separateness penalties on the tape.
///
/// Compactness sums, over positions, the distance from each feature to
/// its nearest item; separateness is a margin hinge pushing the
/// runner-up at least `alpha` further away than the nearest. The
/// nearest/runner-up assignment is frozen (taken from the read), only
/// the distances are differentiated.
pub fn regularizer_nodes<T: Scalar>(
    g: &mut Graph<T>,
    read: &ReadNodes,
    bank: NodeId,
    alpha: f64,
) -> Result<(NodeId, NodeId)> {
    let (m, _) = g.value(bank).dims2()?;
    if m < 2 {
        return Err(Error::invalid("separateness needs at least two memory items"));
    }
    let pos_rows = g.gather_rows(bank, read.z_pos.clone())?;
    let neg_rows = g.gather_rows(bank, read.z_neg.clone())?;
    let diff_pos = g.sub(read.e3_rows, pos_rows)?;
    let diff_neg = g.sub(read.e3_rows, neg_rows)?;
    let dist_pos = g.rows_l2_norm(diff_pos)?;
    let dist_neg = g.rows_l2_norm(diff_neg)?;
    let l_com = g.sum_all(dist_pos)?;
    let margin = g.sub(dist_pos, dist_neg)?;
    let shifted = g.add_scalar(margin, alpha)?;
    let hinge = g.relu(shifted)?;
    let l_sep = g.sum_all(hinge)?;
    Ok((l_com, l_sep))
}
