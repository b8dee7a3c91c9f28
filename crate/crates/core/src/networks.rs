//! The two learnable models.
//!
//! `SInt` interpolates between a pair of adjacent axial slices: both
//! slices pass through a shared convolutional head, are packed to low
//! resolution by space-to-depth, encoded by three residual groups,
//! reconstructed through the memory bank, and decoded (with skip
//! connections from the encoder) back to `r - 1` intermediate slices.
//!
//! `PInt` sharpens a coronal or sagittal image after upsampling along
//! the slice axis: a residual-group body predicts per-phase corrections
//! that are interleaved with a fixed linear-interpolation skip by a 1-D
//! sub-pixel shuffle. One parameter set serves both views.
//!
//! Both are assembled from the same residual block,
//! `y = x + CA(conv(relu(conv(x))))`, where `CA` is squeeze-excitation
//! channel attention. The second conv of every block and the final
//! layer of `PInt` start at zero, so blocks begin as identities and
//! `PInt` begins as exact linear interpolation.

use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::memory::{self, FeatureMap, MemoryBank, ReadNodes};
use crate::volume::{decompose, restack, ViewAxis, ViewImage, Volume};

/// Architecture hyperparameters shared by both networks.
///
/// The defaults are desk scale; `NetConfig::paper_scale` restores the
/// published widths (192 channels, 12 blocks per group, block size 8).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Upsampling factor along the slice axis.
    pub r: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_blocks_per_group")]
    pub blocks_per_group: usize,
    /// Space-to-depth block edge for the slice-wise network.
    #[serde(default = "default_s2d_block")]
    pub s2d_block: usize,
    /// Squeeze-excitation bottleneck factor.
    #[serde(default = "default_attention_reduction")]
    pub attention_reduction: usize,
    /// Residual groups in the pixel-wise network body.
    #[serde(default = "default_pint_groups")]
    pub pint_groups: usize,
    /// Rows in the memory bank.
    #[serde(default = "default_memory_items")]
    pub memory_items: usize,
    /// In-plane extent the slice-wise network is evaluated at. Slices
    /// larger than this are processed as overlapping windows and
    /// blended, because the attention pooling and padding statistics
    /// the network learned are specific to its training crop size.
    /// `None` runs whole slices in one pass; training fills it in with
    /// the crop size when unset.
    #[serde(default)]
    pub infer_window: Option<usize>,
}

fn default_base_channels() -> usize {
    32
}
fn default_blocks_per_group() -> usize {
    3
}
fn default_s2d_block() -> usize {
    4
}
fn default_attention_reduction() -> usize {
    4
}
fn default_pint_groups() -> usize {
    2
}
fn default_memory_items() -> usize {
    10
}

impl NetConfig {
    pub fn desk_scale(r: usize) -> Self {
        NetConfig {
            r,
            base_channels: default_base_channels(),
            blocks_per_group: default_blocks_per_group(),
            s2d_block: default_s2d_block(),
            attention_reduction: default_attention_reduction(),
            pint_groups: default_pint_groups(),
            memory_items: default_memory_items(),
            infer_window: None,
        }
    }

    pub fn paper_scale(r: usize) -> Self {
        NetConfig { r, base_channels: 192, blocks_per_group: 12, s2d_block: 8, ..Self::desk_scale(r) }
    }

    /// Channels produced by the slice-wise head conv, sized so that
    /// space-to-depth lands exactly on `base_channels`.
    pub fn head_channels(&self) -> usize {
        self.base_channels / (self.s2d_block * self.s2d_block)
    }

    /// Feature dimension seen by the memory bank.
    pub fn memory_dim(&self) -> usize {
        self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(Error::invalid(format!("upsampling factor r must be >= 2, got {}", self.r)));
        }
        if self.base_channels == 0 || self.blocks_per_group == 0 || self.pint_groups == 0 {
            return Err(Error::invalid("channel and block counts must be positive"));
        }
        if self.attention_reduction == 0 || self.base_channels % self.attention_reduction != 0 {
            return Err(Error::invalid(format!(
                "base_channels {} must be divisible by attention_reduction {}",
                self.base_channels, self.attention_reduction
            )));
        }
        let sq = self.s2d_block * self.s2d_block;
        if self.s2d_block < 2 || self.base_channels % sq != 0 {
            return Err(Error::invalid(format!(
                "base_channels {} must be a multiple of s2d_block^2 = {sq}",
                self.base_channels
            )));
        }
        if self.memory_items < 2 {
            return Err(Error::invalid(format!("memory_items must be >= 2, got {}", self.memory_items)));
        }
        if let Some(win) = self.infer_window {
            if win < self.s2d_block || win % self.s2d_block != 0 {
                return Err(Error::invalid(format!(
                    "infer_window {win} must be a positive multiple of s2d_block {}",
                    self.s2d_block
                )));
            }
        }
        Ok(())
    }
}

/// Which model a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SliceWise,
    PixelWise,
}

/// An ordered name -> tensor map; iteration order is definition order
/// and doubles as the checkpoint payload order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    role: Role,
    tensors: IndexMap<String, Tensor<f32>>,
}

impl NetworkParams {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    fn from_entries(role: Role, entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut tensors = IndexMap::with_capacity(entries.len());
        for (name, t) in entries {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(NetworkParams { role, tensors })
    }
}

// ---------------------------------------------------------------------------
// Layouts and initialization
// ---------------------------------------------------------------------------

type Layout = Vec<(String, Vec<usize>)>;

fn push_block(layout: &mut Layout, prefix: &str, c: usize, reduction: usize) {
    let mid = c / reduction;
    layout.push((format!("{prefix}.conv1.w"), vec![c, c, 3, 3]));
    layout.push((format!("{prefix}.conv1.b"), vec![c]));
    layout.push((format!("{prefix}.conv2.w"), vec![c, c, 3, 3]));
    layout.push((format!("{prefix}.conv2.b"), vec![c]));
    layout.push((format!("{prefix}.att.fc1.w"), vec![mid, c]));
    layout.push((format!("{prefix}.att.fc1.b"), vec![mid]));
    layout.push((format!("{prefix}.att.fc2.w"), vec![c, mid]));
    layout.push((format!("{prefix}.att.fc2.b"), vec![c]));
}

fn sint_layout(cfg: &NetConfig) -> Layout {
    let b = cfg.base_channels;
    let mut layout = Layout::new();
    layout.push(("head.w".into(), vec![cfg.head_channels(), 1, 3, 3]));
    layout.push(("head.b".into(), vec![cfg.head_channels()]));
    layout.push(("fuse.w".into(), vec![b, 2 * b, 3, 3]));
    layout.push(("fuse.b".into(), vec![b]));
    for g in 1..=3 {
        for blk in 1..=cfg.blocks_per_group {
            push_block(&mut layout, &format!("enc{g}.block{blk}"), b, cfg.attention_reduction);
        }
    }
    layout.push(("bridge.w".into(), vec![b, b, 3, 3]));
    layout.push(("bridge.b".into(), vec![b]));
    for g in 1..=3 {
        layout.push((format!("dec{g}.conv.w"), vec![b, b, 3, 3]));
        layout.push((format!("dec{g}.conv.b"), vec![b]));
        for blk in 1..=cfg.blocks_per_group {
            push_block(&mut layout, &format!("dec{g}.block{blk}"), b, cfg.attention_reduction);
        }
        if g < 3 {
            layout.push((format!("merge{g}.w"), vec![b, 2 * b, 1, 1]));
            layout.push((format!("merge{g}.b"), vec![b]));
        }
    }
    let out_c = (cfg.r - 1) * cfg.s2d_block * cfg.s2d_block;
    layout.push(("out.w".into(), vec![out_c, b, 3, 3]));
    layout.push(("out.b".into(), vec![out_c]));
    layout
}

fn pint_layout(cfg: &NetConfig) -> Layout {
    let b = cfg.base_channels;
    let mut layout = Layout::new();
    layout.push(("head.w".into(), vec![b, 1, 3, 3]));
    layout.push(("head.b".into(), vec![b]));
    for g in 1..=cfg.pint_groups {
        for blk in 1..=cfg.blocks_per_group {
            push_block(&mut layout, &format!("grp{g}.block{blk}"), b, cfg.attention_reduction);
        }
    }
    layout.push(("out.w".into(), vec![cfg.r, b, 3, 3]));
    layout.push(("out.b".into(), vec![cfg.r]));
    layout
}

/// Kaiming-uniform fan-in weights, zero biases. The second conv of each
/// residual block starts at zero (blocks open as identities); for the
/// pixel-wise model the output conv does too, so the whole network
/// opens as its linear-interpolation skip.
fn init_from_layout(role: Role, layout: Layout, seed: u64) -> Result<NetworkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let zero_weight =
            name.ends_with("conv2.w") || (role == Role::PixelWise && name == "out.w");
        let t = match shape.len() {
            1 => Tensor::zeros(shape),
            2 if !zero_weight => kaiming(&mut rng, shape[1], shape),
            4 if !zero_weight => kaiming(&mut rng, shape[1] * shape[2] * shape[3], shape),
            _ => Tensor::zeros(shape),
        };
        entries.push((name, t));
    }
    NetworkParams::from_entries(role, entries)
}

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

pub fn build_sint(cfg: &NetConfig, seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    init_from_layout(Role::SliceWise, sint_layout(cfg), seed)
}

pub fn build_pint(cfg: &NetConfig, seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    init_from_layout(Role::PixelWise, pint_layout(cfg), seed)
}

// ---------------------------------------------------------------------------
// Graph-level forward passes
// ---------------------------------------------------------------------------

/// Parameter tensors registered on a graph, by name.
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
}

impl BoundParams {
    /// Wraps nodes registered by the caller — the gradient checker owns
    /// its parameter registration and only needs the name lookup.
    pub(crate) fn from_ids(ids: IndexMap<String, NodeId>) -> Self {
        BoundParams { ids }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| Error::invalid(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }
}

/// Registers every tensor of `params` as a trainable leaf.
pub fn bind_params<T: Scalar>(g: &mut Graph<T>, params: &NetworkParams) -> BoundParams {
    let mut ids = IndexMap::with_capacity(params.len());
    for (name, t) in params.iter() {
        ids.insert(name.clone(), g.parameter(t.cast()));
    }
    BoundParams { ids }
}

fn conv_layer<T: Scalar>(g: &mut Graph<T>, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = bp.node(&format!("{prefix}.w"))?;
    let b = bp.node(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, w)?;
    g.bias_add(y, b)
}

/// `y = x + CA(conv2(relu(conv1(x))))` with squeeze-excitation attention.
pub fn residual_block_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = conv_layer(g, bp, &format!("{prefix}.conv1"), x)?;
    let h = g.relu(h)?;
    let u = conv_layer(g, bp, &format!("{prefix}.conv2"), h)?;

    let pooled = g.global_avg_pool(u)?;
    let fc1w = bp.node(&format!("{prefix}.att.fc1.w"))?;
    let fc1b = bp.node(&format!("{prefix}.att.fc1.b"))?;
    let fc2w = bp.node(&format!("{prefix}.att.fc2.w"))?;
    let fc2b = bp.node(&format!("{prefix}.att.fc2.b"))?;
    let z = g.linear(pooled, fc1w, fc1b)?;
    let z = g.relu(z)?;
    let z = g.linear(z, fc2w, fc2b)?;
    let s = g.sigmoid(z)?;

    let scaled = g.channel_scale(u, s)?;
    g.add(x, scaled)
}

fn group_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    prefix: &str,
    blocks: usize,
    mut x: NodeId,
) -> Result<NodeId> {
    for blk in 1..=blocks {
        x = residual_block_nodes(g, bp, &format!("{prefix}.block{blk}"), x)?;
    }
    Ok(x)
}

/// Everything the losses need from one slice-wise pass.
pub struct SintPairNodes {
    /// `r - 1` intermediate slices, each `[1, h, w]`, nearest-to-`x_i` first.
    pub slices: Vec<NodeId>,
    /// Bottleneck features `[base, h/s, w/s]` before the memory read.
    pub e3: NodeId,
    pub read: ReadNodes,
}

/// Records the full slice-pair interpolation on the tape.
pub fn sint_pair_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    cfg: &NetConfig,
    bank: NodeId,
    x_i: NodeId,
    x_i1: NodeId,
) -> Result<SintPairNodes> {
    let (c, h, w) = g.value(x_i).dims3()?;
    if c != 1 {
        return Err(Error::shape("sint_pair", format!("slices must be single-channel, got {c}")));
    }
    if g.value(x_i1).shape() != g.value(x_i).shape() {
        return Err(Error::shape("sint_pair", "slice pair shapes differ"));
    }
    let s = cfg.s2d_block;
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape("sint_pair", format!("{h}x{w} slices are not divisible by block {s}")));
    }

    let fa = conv_layer(g, bp, "head", x_i)?;
    let fa = g.space_to_depth(fa, s)?;
    let fb = conv_layer(g, bp, "head", x_i1)?;
    let fb = g.space_to_depth(fb, s)?;
    let cat = g.concat0(&[fa, fb])?;
    let e0 = conv_layer(g, bp, "fuse", cat)?;

    let e1 = group_nodes(g, bp, "enc1", cfg.blocks_per_group, e0)?;
    let e2 = group_nodes(g, bp, "enc2", cfg.blocks_per_group, e1)?;
    let e3t = group_nodes(g, bp, "enc3", cfg.blocks_per_group, e2)?;
    let bridged = g.add(e3t, e0)?;
    let e3 = conv_layer(g, bp, "bridge", bridged)?;

    let read = memory::read_nodes(g, e3, bank)?;

    let d1 = conv_layer(g, bp, "dec1.conv", read.d3)?;
    let d1 = group_nodes(g, bp, "dec1", cfg.blocks_per_group, d1)?;
    let cat1 = g.concat0(&[d1, e2])?;
    let m1 = conv_layer(g, bp, "merge1", cat1)?;
    let d2 = conv_layer(g, bp, "dec2.conv", m1)?;
    let d2 = group_nodes(g, bp, "dec2", cfg.blocks_per_group, d2)?;
    let cat2 = g.concat0(&[d2, e1])?;
    let m2 = conv_layer(g, bp, "merge2", cat2)?;
    let d3 = conv_layer(g, bp, "dec3.conv", m2)?;
    let d3 = group_nodes(g, bp, "dec3", cfg.blocks_per_group, d3)?;

    let pre = conv_layer(g, bp, "out", d3)?;
    let full = g.depth_to_space(pre, s)?;
    let mut slices = Vec::with_capacity(cfg.r - 1);
    for t in 0..cfg.r - 1 {
        slices.push(g.slice0(full, t, 1)?);
    }
    Ok(SintPairNodes { slices, e3, read })
}

/// Records the pixel-wise upsampling of one view image on the tape.
///
/// The body predicts `r` phase channels; a fixed skip contributes the
/// linear interpolation between each column and its right neighbour
/// (clamped at the edge). Sub-pixel shuffling interleaves the phases to
/// width `r*cols`, and the trailing `r - 1` extrapolated columns are
/// dropped.
pub fn pint_image_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    cfg: &NetConfig,
    x: NodeId,
) -> Result<NodeId> {
    let (c, _rows, cols) = g.value(x).dims3()?;
    if c != 1 {
        return Err(Error::shape("pint_image", format!("view images must be single-channel, got {c}")));
    }
    let r = cfg.r;

    let mut body = conv_layer(g, bp, "head", x)?;
    for grp in 1..=cfg.pint_groups {
        body = group_nodes(g, bp, &format!("grp{grp}"), cfg.blocks_per_group, body)?;
    }
    let body = conv_layer(g, bp, "out", body)?;

    let shifted = g.shift_cols_left(x)?;
    let mut phases = Vec::with_capacity(r);
    for t in 0..r {
        let frac = t as f64 / r as f64;
        if t == 0 {
            phases.push(x);
        } else {
            let a = g.scale(x, 1.0 - frac)?;
            let b = g.scale(shifted, frac)?;
            phases.push(g.add(a, b)?);
        }
    }
    let skip = g.concat0(&phases)?;

    let sum = g.add(body, skip)?;
    let wide = g.pixel_shuffle_cols(sum, r)?;
    g.slice_last(wide, 0, r * cols - (r - 1))
}

// ---------------------------------------------------------------------------
// Value-level forward passes
// ---------------------------------------------------------------------------

/// One slice-pair pass outside any training loop.
pub struct SintOutput {
    /// `r - 1` interpolated slices, each `[1, h, w]`.
    pub slices: Vec<Tensor<f32>>,
    /// Bottleneck features `[base, h/s, w/s]`.
    pub e3: Tensor<f32>,
    /// Memory attention weights `[positions, m]`.
    pub p: Tensor<f32>,
    /// Present in train mode: the bank after absorbing this pair's features.
    pub updated_memory: Option<MemoryBank>,
}

/// Interpolates between two axial slices (`[1, h, w]` tensors).
///
/// In train mode the memory write runs after the read, and the updated
/// bank is returned; the interpolation output itself is unaffected.
pub fn sint_forward(
    params: &NetworkParams,
    bank: &MemoryBank,
    cfg: &NetConfig,
    x_i: &Tensor<f32>,
    x_i1: &Tensor<f32>,
    train_mode: bool,
) -> Result<SintOutput> {
    expect_role(params, Role::SliceWise)?;
    check_bank(bank, cfg)?;
    let mut g: Graph<f32> = Graph::new();
    let bp = bind_params(&mut g, params);
    let bank_node = g.input(bank.tensor());
    let a = g.input(x_i.clone());
    let b = g.input(x_i1.clone());
    let nodes = sint_pair_nodes(&mut g, &bp, cfg, bank_node, a, b)?;
    let e3 = g.value(nodes.e3).clone();
    let updated_memory =
        if train_mode { Some(bank.update(&FeatureMap::from_chw(&e3)?)?) } else { None };
    Ok(SintOutput {
        slices: nodes.slices.iter().map(|&id| g.value(id).clone()).collect(),
        e3,
        p: g.value(nodes.read.p).clone(),
        updated_memory,
    })
}

/// Interpolates a whole volume slice-wise: length `l` becomes
/// `r*l - r + 1`, original slices are copied through bit-exactly, and
/// each gap is filled from its bracketing pair.
pub fn sint_volume(
    params: &NetworkParams,
    bank: &MemoryBank,
    cfg: &NetConfig,
    v: &Volume,
) -> Result<Volume> {
    expect_role(params, Role::SliceWise)?;
    check_bank(bank, cfg)?;
    cfg.validate()?;
    let (h, w, l) = v.dims();
    if l < 2 {
        return Err(Error::invalid(format!("slice-wise interpolation needs at least 2 slices, got {l}")));
    }
    let r = cfg.r;
    let l_up = r * l - r + 1;
    let mut out = vec![0.0f32; h * w * l_up];
    for z in 0..l {
        out[z * r * h * w..(z * r + 1) * h * w].copy_from_slice(v.slice_data(z));
    }
    for pair in 0..l - 1 {
        let a = Tensor::new(vec![1, h, w], v.slice_data(pair).to_vec())?;
        let b = Tensor::new(vec![1, h, w], v.slice_data(pair + 1).to_vec())?;
        let slices = sint_pair_windowed(params, bank, cfg, &a, &b)?;
        for (t, slice) in slices.iter().enumerate() {
            let z = pair * r + t + 1;
            out[z * h * w..(z + 1) * h * w].copy_from_slice(slice.data());
        }
    }
    let (sy, sx, sz) = v.spacing();
    Volume::new(h, w, l_up, (sy, sx, sz / r as f32), v.intensity_range(), out)
}

/// Start offsets of windows of length `win` covering `0..extent` at
/// stride `win/2`, with a final window flush against the end.
fn window_starts(extent: usize, win: usize) -> Vec<usize> {
    if extent <= win {
        return vec![0];
    }
    let stride = (win / 2).max(1);
    let mut starts: Vec<usize> = (0..extent - win).step_by(stride).collect();
    starts.push(extent - win);
    starts
}

/// Raised-cosine blending weights for one window axis; strictly
/// positive so the per-pixel weight sums never vanish.
fn window_weights(win: usize) -> Vec<f32> {
    (0..win)
        .map(|i| {
            let t = (i as f64 + 0.5) / win as f64;
            (0.05 + 0.95 * 0.5 * (1.0 - (std::f64::consts::TAU * t).cos())) as f32
        })
        .collect()
}

/// Interpolates one slice pair, evaluating the network on overlapping
/// `infer_window`-sized crops when the slices are larger than the
/// extent it was trained at, and blending the overlaps smoothly.
fn sint_pair_windowed(
    params: &NetworkParams,
    bank: &MemoryBank,
    cfg: &NetConfig,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
) -> Result<Vec<Tensor<f32>>> {
    let (_, h, w) = a.dims3()?;
    let win = match cfg.infer_window {
        Some(win) if win < h.max(w) => win,
        _ => return Ok(sint_forward(params, bank, cfg, a, b, false)?.slices),
    };
    if h % cfg.s2d_block != 0 || w % cfg.s2d_block != 0 {
        return Err(Error::shape(
            "sint_pair",
            format!("{h}x{w} slices are not divisible by block {}", cfg.s2d_block),
        ));
    }
    let win_y = win.min(h);
    let win_x = win.min(w);
    let (wy, wx) = (window_weights(win_y), window_weights(win_x));
    let mut acc = vec![vec![0.0f32; h * w]; cfg.r - 1];
    let mut norm = vec![0.0f32; h * w];
    for &y0 in &window_starts(h, win_y) {
        for &x0 in &window_starts(w, win_x) {
            let crop = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
                let mut d = Vec::with_capacity(win_y * win_x);
                for y in 0..win_y {
                    let row = (y0 + y) * w + x0;
                    d.extend_from_slice(&t.data()[row..row + win_x]);
                }
                Tensor::new(vec![1, win_y, win_x], d)
            };
            let step = sint_forward(params, bank, cfg, &crop(a)?, &crop(b)?, false)?;
            for y in 0..win_y {
                for x in 0..win_x {
                    let wgt = wy[y] * wx[x];
                    let dst = (y0 + y) * w + x0 + x;
                    norm[dst] += wgt;
                    for (t, slice) in step.slices.iter().enumerate() {
                        acc[t][dst] += wgt * slice.data()[y * win_x + x];
                    }
                }
            }
        }
    }
    acc.into_iter()
        .map(|mut plane| {
            for (v, &n) in plane.iter_mut().zip(&norm) {
                *v /= n;
            }
            Tensor::new(vec![1, h, w], plane)
        })
        .collect()
}

/// Upsamples one coronal or sagittal image along the slice axis.
pub fn pint_image(params: &NetworkParams, cfg: &NetConfig, img: &ViewImage) -> Result<ViewImage> {
    expect_role(params, Role::PixelWise)?;
    cfg.validate()?;
    if img.view == ViewAxis::Axial {
        return Err(Error::invalid("pixel-wise upsampling applies to coronal/sagittal images, not axial"));
    }
    let mut g: Graph<f32> = Graph::new();
    let bp = bind_params(&mut g, params);
    let x = g.input(Tensor::new(vec![1, img.rows, img.cols], img.data.clone())?);
    let out = pint_image_nodes(&mut g, &bp, cfg, x)?;
    let (_, rows, cols) = g.value(out).dims3()?;
    let (sy, sx, sz) = img.spacing;
    Ok(ViewImage {
        view: img.view,
        index: img.index,
        rows,
        cols,
        data: g.value(out).data().to_vec(),
        spacing: (sy, sx, sz / cfg.r as f32),
        intensity_range: img.intensity_range,
    })
}

/// Upsamples every image of one view and restacks them into a volume of
/// length `r*l - r + 1`. Coronal and sagittal passes use the same
/// parameters by construction.
pub fn pint_volume(params: &NetworkParams, cfg: &NetConfig, v: &Volume, view: ViewAxis) -> Result<Volume> {
    let images = decompose(v, view);
    let upsampled: Vec<ViewImage> =
        images.iter().map(|img| pint_image(params, cfg, img)).collect::<Result<_>>()?;
    restack(&upsampled)
}

fn expect_role(params: &NetworkParams, role: Role) -> Result<()> {
    if params.role() != role {
        return Err(Error::invalid(format!("parameter set has role {:?}, expected {role:?}", params.role())));
    }
    Ok(())
}

fn check_bank(bank: &MemoryBank, cfg: &NetConfig) -> Result<()> {
    if bank.items() != cfg.memory_items || bank.dim() != cfg.memory_dim() {
        return Err(Error::shape(
            "memory bank",
            format!(
                "bank is {}x{}, config wants {}x{}",
                bank.items(),
                bank.dim(),
                cfg.memory_items,
                cfg.memory_dim()
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Everything a training run needs to stop and resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub sint: NetworkParams,
    pub pint: NetworkParams,
    pub memory: MemoryBank,
    /// Optimizer moments, counters, and similar bookkeeping.
    pub extra: IndexMap<String, Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: NetConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

const CKPT_FORMAT: &str = "cvs-ckpt-v1";

/// Writes a `.ckpt` file: one JSON manifest line, then the tensors as
/// little-endian f32 in manifest order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.config.validate()?;
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    let mut payload: Vec<&Tensor<f32>> = Vec::new();
    let bank_tensor = ckpt.memory.tensor();
    for (name, t) in ckpt.sint.iter() {
        tensors.push((format!("sint.{name}"), t.shape().to_vec()));
        payload.push(t);
    }
    for (name, t) in ckpt.pint.iter() {
        tensors.push((format!("pint.{name}"), t.shape().to_vec()));
        payload.push(t);
    }
    tensors.push(("memory.bank".into(), bank_tensor.shape().to_vec()));
    payload.push(&bank_tensor);
    for (name, t) in &ckpt.extra {
        tensors.push((format!("extra.{name}"), t.shape().to_vec()));
        payload.push(t);
    }

    let manifest = Manifest { format: CKPT_FORMAT.into(), config: ckpt.config.clone(), tensors };
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &manifest)?;
    out.write_all(b"\n")?;
    for t in payload {
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a `.ckpt` file back, verifying the manifest against the
/// layouts implied by its config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Err(Error::format(path.display(), "missing manifest line"));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(Error::format(path.display(), "manifest line exceeds 1 MiB"));
        }
    }
    let manifest: Manifest =
        serde_json::from_slice(&line).map_err(|e| Error::format(path.display(), format!("bad manifest: {e}")))?;
    if manifest.format != CKPT_FORMAT {
        return Err(Error::format(path.display(), format!("unsupported format `{}`", manifest.format)));
    }
    manifest.config.validate().map_err(|e| Error::format(path.display(), format!("bad config: {e}")))?;

    let mut sint_entries = Vec::new();
    let mut pint_entries = Vec::new();
    let mut bank_tensor: Option<Tensor<f32>> = None;
    let mut extra = IndexMap::new();
    for (name, shape) in &manifest.tensors {
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel.checked_mul(4).ok_or_else(|| Error::format(path.display(), "tensor too large"))?];
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::format(path.display(), format!("payload truncated at `{name}`")))?;
        let data: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(path.display(), format!("non-finite value in `{name}` at index {i}")));
        }
        let t = Tensor::new(shape.clone(), data).map_err(|e| Error::format(path.display(), e.to_string()))?;
        if let Some(rest) = name.strip_prefix("sint.") {
            sint_entries.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("pint.") {
            pint_entries.push((rest.to_string(), t));
        } else if name == "memory.bank" {
            bank_tensor = Some(t);
        } else if let Some(rest) = name.strip_prefix("extra.") {
            extra.insert(rest.to_string(), t);
        } else {
            return Err(Error::format(path.display(), format!("unrecognized tensor `{name}`")));
        }
    }
    if reader.read(&mut byte)? != 0 {
        return Err(Error::format(path.display(), "trailing bytes after payload"));
    }

    let cfg = manifest.config;
    let sint = NetworkParams::from_entries(Role::SliceWise, sint_entries)
        .map_err(|e| Error::format(path.display(), e.to_string()))?;
    let pint = NetworkParams::from_entries(Role::PixelWise, pint_entries)
        .map_err(|e| Error::format(path.display(), e.to_string()))?;
    check_layout(path, &sint, sint_layout(&cfg))?;
    check_layout(path, &pint, pint_layout(&cfg))?;
    let bank_tensor = bank_tensor.ok_or_else(|| Error::format(path.display(), "missing memory.bank"))?;
    if bank_tensor.shape() != [cfg.memory_items, cfg.memory_dim()] {
        return Err(Error::format(
            path.display(),
            format!("memory.bank shape {:?} does not match config", bank_tensor.shape()),
        ));
    }
    let memory = MemoryBank::from_tensor(&bank_tensor).map_err(|e| Error::format(path.display(), e.to_string()))?;
    Ok(Checkpoint { config: cfg, sint, pint, memory, extra })
}

fn check_layout(path: &Path, params: &NetworkParams, layout: Layout) -> Result<()> {
    if params.len() != layout.len() {
        return Err(Error::format(
            path.display(),
            format!("{:?} parameter count {} does not match layout {}", params.role(), params.len(), layout.len()),
        ));
    }
    for ((name, t), (want_name, want_shape)) in params.iter().zip(&layout) {
        if name != want_name || t.shape() != &want_shape[..] {
            return Err(Error::format(
                path.display(),
                format!("expected tensor `{want_name}` {want_shape:?}, found `{name}` {:?}", t.shape()),
            ));
        }
    }
    Ok(())
}
