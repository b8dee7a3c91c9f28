//! The two-stage training loop.
//!
//! Stage one is internal learning: each sampled crop is subsampled once
//! more, both interpolators reconstruct the crop from its subsampled
//! version, and the reconstruction error is the only supervision — no
//! ground-truth intermediate slices exist anywhere. Stage two keeps that
//! objective and adds cross-view mutual distillation on incremental
//! passes over the *un*-subsampled crop, so the two models keep teaching
//! each other at the spacing they will actually face at inference time.
//!
//! Everything here is deterministic for a fixed config: batch sampling
//! derives a fresh ChaCha stream per epoch from the config seed, tensors
//! iterate in insertion order, and the graph executes in recording
//! order. Two runs with the same config produce identical step losses
//! and byte-identical checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    cmd_loss_nodes, internal_loss_nodes, select_from_slices, LossReport, LossWeights,
};
use crate::memory::{regularizer_nodes, FeatureMap, MemoryBank};
use crate::networks::{
    bind_params, build_pint, build_sint, pint_image_nodes, save_checkpoint, sint_pair_nodes,
    BoundParams, Checkpoint, NetConfig, NetworkParams, SintPairNodes,
};
use crate::volume::{decompose, degrade, fuse_with, DegradationSpec, ViewAxis, Volume};

/// Margin of the separateness penalty: the two closest memory items to a
/// query are pushed at least this far apart.
const SEPARATENESS_MARGIN: f64 = 1.0;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything a training run depends on. Serializes to a flat JSON
/// object (plus the nested `net` block), with defaults for every field
/// except the network config, so a config file only needs to state what
/// it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture (includes the upsampling factor `r`).
    pub net: NetConfig,
    /// Fraction of candidate voxels the distillation loss keeps.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Incremental interpolation passes per stage-two step.
    #[serde(default = "default_n_passes")]
    pub n_passes: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs trained with internal learning only; the remainder add
    /// mutual distillation.
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Multiplier applied to `lr` once `lr_decay_epoch` is passed.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_decay_epoch")]
    pub lr_decay_epoch: usize,
    /// In-plane crop edge; must be a multiple of the space-to-depth block.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Slices per crop. Defaults per factor (7 for r=2 and r=3, 9 for
    /// r=4) so that one subsampling round-trips to exactly this length.
    #[serde(default)]
    pub slices_per_sample: Option<usize>,
    #[serde(default)]
    pub weights: LossWeights,
    /// How the low-resolution *evaluation* volumes were produced. Purely
    /// descriptive here — the loop itself always subsamples crops
    /// directly, because blurred or noisy "originals" would poison the
    /// self-supervision targets.
    #[serde(default)]
    pub degradation: Option<DegradationSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Exclude the copied-through original slices from distillation
    /// candidates (they carry no disagreement signal).
    #[serde(default = "default_true")]
    pub cmd_mask_originals: bool,
    /// Passed to fusion at evaluation time: average the axial copy into
    /// original slice positions instead of only the two pixel-wise views.
    #[serde(default)]
    pub fuse_include_axial_at_originals: bool,
    /// Stop gradients between incremental passes. Cheaper and sometimes
    /// steadier, at the cost of the deeper passes no longer shaping the
    /// earlier ones.
    #[serde(default)]
    pub truncate_incremental: bool,
}

fn default_gamma() -> f64 {
    0.4
}
fn default_n_passes() -> usize {
    2
}
fn default_epochs() -> usize {
    50
}
fn default_stage1_epochs() -> usize {
    10
}
fn default_steps_per_epoch() -> usize {
    100
}
fn default_batch_size() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_lr_decay() -> f64 {
    0.1
}
fn default_lr_decay_epoch() -> usize {
    10
}
fn default_patch() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Paper-style schedule on the desk-scale architecture.
    pub fn desk_preset(r: usize) -> Self {
        TrainConfig {
            net: NetConfig::desk_scale(r),
            gamma: default_gamma(),
            n_passes: default_n_passes(),
            epochs: 20,
            stage1_epochs: 10,
            steps_per_epoch: 30,
            batch_size: 1,
            lr: 1e-3,
            lr_decay: default_lr_decay(),
            lr_decay_epoch: default_lr_decay_epoch(),
            patch: 16,
            slices_per_sample: None,
            weights: LossWeights::default(),
            degradation: None,
            seed: 0,
            cmd_mask_originals: true,
            fuse_include_axial_at_originals: false,
            truncate_incremental: false,
        }
    }

    /// Crop length along z, defaulted so the subsampled crop interpolates
    /// back to exactly the crop length: 7 slices for r=2 (4 kept) and
    /// r=3 (3 kept), 9 for r=4 (3 kept).
    pub fn slices_per_sample(&self) -> usize {
        self.slices_per_sample.unwrap_or(match self.net.r {
            2 | 3 => 7,
            _ => 2 * self.net.r + 1,
        })
    }

    /// Learning rate in effect during a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs > 0 && !(1..=self.epochs).contains(&self.stage1_epochs) {
            return Err(Error::invalid(format!(
                "stage1_epochs {} must lie in 1..={}",
                self.stage1_epochs, self.epochs
            )));
        }
        if self.n_passes == 0 {
            return Err(Error::invalid("n_passes must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size and steps_per_epoch must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr_decay {} must be in (0, 1]", self.lr_decay)));
        }
        if self.patch == 0 || self.patch % self.net.s2d_block != 0 {
            return Err(Error::invalid(format!(
                "patch {} must be a positive multiple of s2d_block {}",
                self.patch, self.net.s2d_block
            )));
        }
        let slices = self.slices_per_sample();
        if slices < self.net.r + 1 {
            return Err(Error::invalid(format!(
                "slices_per_sample {} leaves fewer than 2 slices after subsampling by {}",
                slices, self.net.r
            )));
        }
        if let Some(d) = &self.degradation {
            d.validate()?;
            if d.factor as usize != self.net.r {
                return Err(Error::invalid(format!(
                    "degradation factor {} disagrees with net.r {}",
                    d.factor, self.net.r
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Draws `batch_size` crops of `patch x patch x slices_per_sample`.
///
/// In-plane origins stay inside the central half of each axis — the
/// outer quarter of a CT slice is mostly air and teaches nothing — while
/// z ranges freely. Draw order per crop is fixed (volume, y, x, z), so a
/// given RNG state always yields the same batch.
pub fn sample_batch(
    volumes: &[Volume],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Volume>> {
    if volumes.is_empty() {
        return Err(Error::invalid("cannot sample crops from an empty volume list"));
    }
    let p = cfg.patch;
    let slices = cfg.slices_per_sample();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let v = &volumes[rng.random_range(0..volumes.len())];
        let (h, w, l) = v.dims();
        let (y_lo, y_hi) = central_span(h, p).ok_or_else(|| {
            Error::invalid(format!("central region of height {h} cannot hold a {p}-pixel crop"))
        })?;
        let (x_lo, x_hi) = central_span(w, p).ok_or_else(|| {
            Error::invalid(format!("central region of width {w} cannot hold a {p}-pixel crop"))
        })?;
        if l < slices {
            return Err(Error::invalid(format!(
                "volume has {l} slices, crops need {slices}"
            )));
        }
        let y0 = rng.random_range(y_lo..=y_hi);
        let x0 = rng.random_range(x_lo..=x_hi);
        let z0 = rng.random_range(0..=l - slices);
        batch.push(v.crop(y0, x0, z0, p, p, slices)?);
    }
    Ok(batch)
}

/// Inclusive origin range keeping `[o, o+patch)` inside the central half
/// of an axis of the given extent.
fn central_span(extent: usize, patch: usize) -> Option<(usize, usize)> {
    let lo = extent / 4;
    let hi = extent - extent / 4;
    (patch <= hi - lo).then(|| (lo, hi - patch))
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moments live in `f64` keyed by parameter
/// name; a parameter whose gradient never arrives simply keeps zero
/// moments, so it stays bit-identical.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Starts one optimisation step; both parameter sets updated
    /// afterwards share this step's bias correction.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single tensor. `key` must be stable
    /// across steps — it owns the moment buffers.
    pub fn update_tensor(&mut self, key: &str, param: &mut [f32], grad: &[f64], lr: f64) -> Result<()> {
        if self.t == 0 {
            return Err(Error::invalid("AdamState::advance must run before updates"));
        }
        if param.len() != grad.len() {
            return Err(Error::shape(
                "adam",
                format!("`{key}`: {} parameters vs {} gradients", param.len(), grad.len()),
            ));
        }
        let m = self.m.entry(key.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(key.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        if m.len() != param.len() {
            return Err(Error::shape("adam", format!("`{key}` changed size mid-run")));
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Owns both parameter sets, the memory bank, and the optimiser.
pub struct Trainer {
    cfg: TrainConfig,
    sint: NetworkParams,
    pint: NetworkParams,
    bank: MemoryBank,
    opt: AdamState,
    epochs_done: usize,
}

impl Trainer {
    /// Fresh models seeded from the config: the two networks and the
    /// bank get distinct, fixed offsets of the run seed.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        // Checkpoints should remember the extent the slice-wise network
        // was trained at, so inference can window to match it.
        cfg.net.infer_window.get_or_insert(cfg.patch);
        cfg.validate()?;
        let sint = build_sint(&cfg.net, cfg.seed)?;
        let pint = build_pint(&cfg.net, cfg.seed.wrapping_add(1))?;
        let bank = MemoryBank::new_seeded(
            cfg.net.memory_items,
            cfg.net.memory_dim(),
            cfg.seed.wrapping_add(2),
        )?;
        Ok(Trainer { cfg: cfg.clone(), sint, pint, bank, opt: AdamState::new(), epochs_done: 0 })
    }

    /// Resumes from a checkpoint. Optimiser moments are restored from
    /// the checkpoint's bookkeeping tensors when present (they are
    /// stored in `f32`, so resumption is close to but not bit-identical
    /// with an uninterrupted run); a bare inference checkpoint starts
    /// the optimiser fresh.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.net.infer_window.get_or_insert(cfg.patch);
        cfg.validate()?;
        if ckpt.config != cfg.net {
            return Err(Error::invalid(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                ckpt.config, cfg.net
            )));
        }
        let mut opt = AdamState::new();
        let mut epochs_done = 0;
        if let Some(t) = ckpt.extra.get("opt.t") {
            opt.t = t.item()? as u64;
        }
        if let Some(e) = ckpt.extra.get("opt.epochs_done") {
            epochs_done = e.item()? as usize;
        }
        for (key, tensor) in &ckpt.extra {
            if let Some(name) = key.strip_prefix("opt.m.") {
                opt.m.insert(name.to_string(), tensor.data().iter().map(|&x| x as f64).collect());
            } else if let Some(name) = key.strip_prefix("opt.v.") {
                opt.v.insert(name.to_string(), tensor.data().iter().map(|&x| x as f64).collect());
            }
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            sint: ckpt.sint.clone(),
            pint: ckpt.pint.clone(),
            bank: ckpt.memory.clone(),
            opt,
            epochs_done,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Internal learning only: reconstruct each crop from its subsampled
    /// self in all three views, plus the memory regularisers.
    pub fn stage1_step(&mut self, batch: &[Volume], lr: f64) -> Result<LossReport> {
        self.run_step(batch, false, lr)
    }

    /// Stage one's losses plus mutual distillation over incremental
    /// passes on the unsubsampled crops.
    pub fn stage2_step(&mut self, batch: &[Volume], lr: f64) -> Result<LossReport> {
        self.run_step(batch, true, lr)
    }

    /// Snapshot including optimiser moments (rounded to `f32`) and the
    /// epoch counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = IndexMap::new();
        extra.insert("opt.t".to_string(), Tensor::filled(vec![1], self.opt.t as f32));
        extra.insert("opt.epochs_done".to_string(), Tensor::filled(vec![1], self.epochs_done as f32));
        for (key, m) in &self.opt.m {
            let data: Vec<f32> = m.iter().map(|&x| x as f32).collect();
            extra.insert(format!("opt.m.{key}"), Tensor::new(vec![data.len()], data).expect("sized"));
        }
        for (key, v) in &self.opt.v {
            let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            extra.insert(format!("opt.v.{key}"), Tensor::new(vec![data.len()], data).expect("sized"));
        }
        Checkpoint {
            config: self.cfg.net.clone(),
            sint: self.sint.clone(),
            pint: self.pint.clone(),
            memory: self.bank.clone(),
            extra,
        }
    }

    fn note_epoch_done(&mut self) {
        self.epochs_done += 1;
    }

    /// One optimisation step. Records every term of the objective on a
    /// single tape, backpropagates, updates both networks with Adam, and
    /// lets the memory bank absorb the step's bottleneck features via
    /// its own write rule (the bank is *not* a gradient parameter).
    fn run_step(&mut self, batch: &[Volume], with_cmd: bool, lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("training step needs a non-empty batch"));
        }
        let cfg = self.cfg.clone();
        let net = &cfg.net;
        let r = net.r;
        let n_passes = if with_cmd { cfg.n_passes } else { 0 };

        let mut g: Graph<f32> = Graph::new();
        let bp_s = bind_params(&mut g, &self.sint);
        let bp_p = bind_params(&mut g, &self.pint);
        let bank = g.input(self.bank.tensor());

        let mut int_a_terms = Vec::new();
        let mut int_c_terms = Vec::new();
        let mut int_s_terms = Vec::new();
        let mut com_terms = Vec::new();
        let mut sep_terms = Vec::new();
        let mut cmd_c_terms: Vec<Vec<NodeId>> = vec![Vec::new(); n_passes];
        let mut cmd_s_terms: Vec<Vec<NodeId>> = vec![Vec::new(); n_passes];
        let mut features: Vec<FeatureMap> = Vec::new();

        for sample in batch {
            let low = degrade(sample, &DegradationSpec::direct(r as u32))?;
            let target = g.input(volume_tensor(sample));

            // Internal learning on the subsampled crop.
            let low_slices = slice_inputs(&mut g, &low);
            let axial = sint_chain(&mut g, &bp_s, net, bank, &low_slices)?;
            int_a_terms.push(internal_loss_nodes(&mut g, axial.volume, target, ViewAxis::Axial)?);

            let cor_inputs = image_inputs(&mut g, &low, ViewAxis::Coronal)?;
            let coronal = pint_chain(&mut g, &bp_p, net, &cor_inputs, ViewAxis::Coronal)?;
            int_c_terms.push(internal_loss_nodes(&mut g, coronal.volume, target, ViewAxis::Coronal)?);

            let sag_inputs = image_inputs(&mut g, &low, ViewAxis::Sagittal)?;
            let sagittal = pint_chain(&mut g, &bp_p, net, &sag_inputs, ViewAxis::Sagittal)?;
            int_s_terms.push(internal_loss_nodes(&mut g, sagittal.volume, target, ViewAxis::Sagittal)?);

            // Memory terms and the features the bank will absorb come
            // from the internal pass only; distillation passes below
            // read the bank but do not feed it.
            for pair in &axial.pairs {
                let (com, sep) = regularizer_nodes(&mut g, &pair.read, bank, SEPARATENESS_MARGIN)?;
                com_terms.push(com);
                sep_terms.push(sep);
                features.push(FeatureMap::from_chw(g.value(pair.e3))?);
            }

            if n_passes > 0 {
                self.record_cmd_chains(
                    &mut g,
                    &bp_s,
                    &bp_p,
                    bank,
                    sample,
                    n_passes,
                    &mut cmd_c_terms,
                    &mut cmd_s_terms,
                )?;
            }
        }

        let b = batch.len();
        let int_a = batch_mean(&mut g, &int_a_terms, b)?;
        let int_c = batch_mean(&mut g, &int_c_terms, b)?;
        let int_s = batch_mean(&mut g, &int_s_terms, b)?;
        let com = batch_mean(&mut g, &com_terms, b)?;
        let sep = batch_mean(&mut g, &sep_terms, b)?;
        let cmd_c: Vec<NodeId> =
            cmd_c_terms.iter().map(|t| batch_mean(&mut g, t, b)).collect::<Result<_>>()?;
        let cmd_s: Vec<NodeId> =
            cmd_s_terms.iter().map(|t| batch_mean(&mut g, t, b)).collect::<Result<_>>()?;

        let w = &cfg.weights;
        let mut total = g.scale(int_a, w.int_axial)?;
        let tc = g.scale(int_c, w.int_coronal)?;
        total = g.add(total, tc)?;
        let ts = g.scale(int_s, w.int_sagittal)?;
        total = g.add(total, ts)?;
        if n_passes > 0 {
            let cc = sum_nodes(&mut g, &cmd_c)?;
            let cs = sum_nodes(&mut g, &cmd_s)?;
            let both = g.add(cc, cs)?;
            let weighted = g.scale(both, w.cmd / n_passes as f64)?;
            total = g.add(total, weighted)?;
        }
        let mem = g.add(com, sep)?;
        let mem = g.scale(mem, w.memory)?;
        total = g.add(total, mem)?;

        let grads = g.backward(total)?;

        self.opt.advance();
        apply_gradients(&mut self.opt, &mut self.sint, "s", &bp_s, &grads, lr)?;
        apply_gradients(&mut self.opt, &mut self.pint, "p", &bp_p, &grads, lr)?;

        let absorbed = FeatureMap::concat(&features)?;
        self.bank = self.bank.update(&absorbed)?;

        let report = LossReport::new(
            (g.item_f64(int_a)?, g.item_f64(int_c)?, g.item_f64(int_s)?),
            cmd_c.iter().map(|&n| g.item_f64(n)).collect::<Result<_>>()?,
            cmd_s.iter().map(|&n| g.item_f64(n)).collect::<Result<_>>()?,
            g.item_f64(com)?,
            g.item_f64(sep)?,
            &cfg.weights,
        )?;
        report.validate(&cfg.weights)?;
        Ok(report)
    }

    /// Distillation chains for one crop: run both interpolators `n`
    /// times, each pass consuming the previous pass's output *nodes* so
    /// gradients flow through the whole chain, and compare axial against
    /// each pixel-wise view on the voxels where they agree best.
    #[allow(clippy::too_many_arguments)]
    fn record_cmd_chains(
        &self,
        g: &mut Graph<f32>,
        bp_s: &BoundParams,
        bp_p: &BoundParams,
        bank: NodeId,
        sample: &Volume,
        n_passes: usize,
        cmd_c_terms: &mut [Vec<NodeId>],
        cmd_s_terms: &mut [Vec<NodeId>],
    ) -> Result<()> {
        let cfg = &self.cfg;
        let r = cfg.net.r;
        let mut slices = slice_inputs(g, sample);
        let mut cor = image_inputs(g, sample, ViewAxis::Coronal)?;
        let mut sag = image_inputs(g, sample, ViewAxis::Sagittal)?;
        for n in 0..n_passes {
            let axial = sint_chain(g, bp_s, &cfg.net, bank, &slices)?;
            let coronal = pint_chain(g, bp_p, &cfg.net, &cor, ViewAxis::Coronal)?;
            let sagittal = pint_chain(g, bp_p, &cfg.net, &sag, ViewAxis::Sagittal)?;

            // Voxel selection ranks the raw tape values, so the ranked
            // numbers are exactly the ones the loss will differentiate.
            let (set_c, set_s) = {
                let a = g.value(axial.volume);
                let c = g.value(coronal.volume);
                let s = g.value(sagittal.volume);
                let (_, h, w) = a.dims3()?;
                let plane = h * w;
                (
                    select_from_slices(a.data(), c.data(), plane, cfg.gamma, cfg.cmd_mask_originals, r)?,
                    select_from_slices(a.data(), s.data(), plane, cfg.gamma, cfg.cmd_mask_originals, r)?,
                )
            };
            cmd_c_terms[n].push(cmd_loss_nodes(g, axial.volume, coronal.volume, &set_c)?);
            cmd_s_terms[n].push(cmd_loss_nodes(g, axial.volume, sagittal.volume, &set_s)?);

            if n + 1 < n_passes {
                slices = axial.slices;
                cor = coronal.images;
                sag = sagittal.images;
                if cfg.truncate_incremental {
                    slices = detach_all(g, &slices);
                    cor = detach_all(g, &cor);
                    sag = detach_all(g, &sag);
                }
            }
        }
        Ok(())
    }
}

/// One slice-wise pass over a whole stack of slice nodes.
struct AxialPassNodes {
    /// `[l_up, h, w]` assembly of originals and predictions.
    volume: NodeId,
    /// The same content as individual `[1, h, w]` nodes in z order;
    /// original positions alias the input nodes.
    slices: Vec<NodeId>,
    pairs: Vec<SintPairNodes>,
}

fn sint_chain(
    g: &mut Graph<f32>,
    bp: &BoundParams,
    net: &NetConfig,
    bank: NodeId,
    inputs: &[NodeId],
) -> Result<AxialPassNodes> {
    if inputs.len() < 2 {
        return Err(Error::invalid(format!(
            "slice-wise interpolation needs at least 2 slices, got {}",
            inputs.len()
        )));
    }
    let mut slices = Vec::with_capacity(net.r * inputs.len() - net.r + 1);
    let mut pairs = Vec::with_capacity(inputs.len() - 1);
    for k in 0..inputs.len() - 1 {
        slices.push(inputs[k]);
        let pair = sint_pair_nodes(g, bp, net, bank, inputs[k], inputs[k + 1])?;
        slices.extend(pair.slices.iter().copied());
        pairs.push(pair);
    }
    slices.push(*inputs.last().expect("len checked"));
    let volume = g.concat0(&slices)?;
    Ok(AxialPassNodes { volume, slices, pairs })
}

/// One pixel-wise pass over a whole stack of view-image nodes.
struct ViewPassNodes {
    /// `[l_up, h, w]` volume assembled from the upsampled images.
    volume: NodeId,
    /// Upsampled images, same order as the inputs.
    images: Vec<NodeId>,
}

fn pint_chain(
    g: &mut Graph<f32>,
    bp: &BoundParams,
    net: &NetConfig,
    inputs: &[NodeId],
    view: ViewAxis,
) -> Result<ViewPassNodes> {
    let mut images = Vec::with_capacity(inputs.len());
    for &img in inputs {
        images.push(pint_image_nodes(g, bp, net, img)?);
    }
    let stack = g.concat0(&images)?;
    // Coronal images stack to (y, x, z), sagittal to (x, y, z); both
    // volumes are slice-major (z, y, x).
    let volume = match view {
        ViewAxis::Coronal => g.permute3(stack, [2, 0, 1])?,
        ViewAxis::Sagittal => g.permute3(stack, [2, 1, 0])?,
        ViewAxis::Axial => {
            return Err(Error::invalid("pixel-wise passes apply to coronal/sagittal views"))
        }
    };
    Ok(ViewPassNodes { volume, images })
}

fn slice_inputs(g: &mut Graph<f32>, v: &Volume) -> Vec<NodeId> {
    let (h, w, l) = v.dims();
    (0..l)
        .map(|z| {
            let t = Tensor::new(vec![1, h, w], v.slice_data(z).to_vec()).expect("plane sized");
            g.input(t)
        })
        .collect()
}

fn image_inputs(g: &mut Graph<f32>, v: &Volume, view: ViewAxis) -> Result<Vec<NodeId>> {
    Ok(decompose(v, view)
        .into_iter()
        .map(|img| {
            let t = Tensor::new(vec![1, img.rows, img.cols], img.data).expect("image sized");
            g.input(t)
        })
        .collect())
}

fn detach_all(g: &mut Graph<f32>, nodes: &[NodeId]) -> Vec<NodeId> {
    nodes
        .iter()
        .map(|&id| {
            let value = g.value(id).clone();
            g.input(value)
        })
        .collect()
}

fn volume_tensor(v: &Volume) -> Tensor<f32> {
    let (h, w, l) = v.dims();
    Tensor::new(vec![l, h, w], v.data().to_vec()).expect("volume buffer sized")
}

fn sum_nodes(g: &mut Graph<f32>, terms: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) =
        terms.split_first().ok_or_else(|| Error::invalid("cannot sum an empty term list"))?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn batch_mean(g: &mut Graph<f32>, terms: &[NodeId], batch: usize) -> Result<NodeId> {
    let sum = sum_nodes(g, terms)?;
    g.scale(sum, 1.0 / batch as f64)
}

fn apply_gradients(
    opt: &mut AdamState,
    params: &mut NetworkParams,
    scope: &str,
    bound: &BoundParams,
    grads: &Gradients<f32>,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let id = bound.node(&name)?;
        let tensor = params.get_mut(&name)?;
        let grad = grads.get_or_zeros(id, tensor.shape());
        opt.update_tensor(&format!("{scope}.{name}"), tensor.data_mut(), grad.data(), lr)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Incremental interpolation
// ---------------------------------------------------------------------------

/// Applies a slice-upsampling model `n` times, feeding each output back
/// in: lengths grow as `l, rl-r+1, r(rl-r+1)-r+1, ...` — for r=2 a
/// 7-slice volume becomes 13 then 25. Each pass is checked against that
/// progression so a model returning the wrong length fails loudly.
pub fn incremental_interpolate<F>(mut model: F, v: &Volume, r: usize, n: usize) -> Result<Volume>
where
    F: FnMut(&Volume) -> Result<Volume>,
{
    if r < 2 {
        return Err(Error::invalid(format!("upsampling factor r must be >= 2, got {r}")));
    }
    if n == 0 {
        return Err(Error::invalid("incremental interpolation needs at least one pass"));
    }
    let mut cur = v.clone();
    for pass in 1..=n {
        let expect = r * cur.dims().2 - r + 1;
        cur = model(&cur)?;
        if cur.dims().2 != expect {
            return Err(Error::shape(
                "incremental_interpolate",
                format!("pass {pass} returned {} slices, expected {expect}", cur.dims().2),
            ));
        }
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// One step's record in the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Wall-clock duration of the step; informational only and excluded
    /// from any determinism comparison.
    pub wall_ms: f64,
    pub loss: LossReport,
}

/// Where a finished (or zero-epoch) run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final model checkpoint (`model.ckpt` in the output directory).
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Runs the full two-stage schedule over `volumes`, writing per-epoch
/// checkpoints (`epoch_0001.ckpt`, ...), a final `model.ckpt`, and a
/// `train_log.jsonl` with one line per step.
///
/// With `epochs == 0` the initial state is checkpointed and nothing is
/// trained — useful for pinning an untrained baseline. A non-finite
/// loss aborts immediately with the epoch and step in the error.
pub fn train(cfg: &TrainConfig, volumes: &[Volume], out_dir: &Path) -> Result<TrainOutcome> {
    train_with(cfg, volumes, out_dir, None)
}

/// [`train`] with an optional checkpoint to resume from. Epoch numbering
/// continues where the checkpoint stopped, the log file is appended to
/// rather than replaced, and a checkpoint already at or past
/// `cfg.epochs` just re-saves the final model.
pub fn train_with(
    cfg: &TrainConfig,
    volumes: &[Volume],
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::invalid("training needs at least one volume"));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(if resume.is_some() {
        File::options().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });
    let mut first_loss = None;
    let mut final_loss = None;
    let mut steps_run = 0;
    let mut epochs_run = 0;

    for epoch in trainer.epochs_done() + 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let lr = cfg.lr_for_epoch(epoch);
        let stage2 = epoch > cfg.stage1_epochs;
        for step in 1..=cfg.steps_per_epoch {
            let started = Instant::now();
            let batch = sample_batch(volumes, cfg, &mut rng)?;
            let report = if stage2 {
                trainer.stage2_step(&batch, lr)
            } else {
                trainer.stage1_step(&batch, lr)
            }
            .map_err(|e| match e {
                Error::NonFinite(detail) => {
                    Error::non_finite(format!("epoch {epoch} step {step}: {detail}"))
                }
                other => other,
            })?;
            let line = TrainLogLine {
                epoch,
                step,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                loss: report.clone(),
            };
            serde_json::to_writer(&mut log, &line)?;
            log.write_all(b"\n")?;
            first_loss.get_or_insert(report.total);
            final_loss = Some(report.total);
            steps_run += 1;
        }
        trainer.note_epoch_done();
        save_checkpoint(&out_dir.join(format!("epoch_{epoch:04}.ckpt")), &trainer.checkpoint())?;
        epochs_run += 1;
    }
    log.flush()?;

    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &trainer.checkpoint())?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        epochs_run,
        steps_run,
        first_loss,
        final_loss,
    })
}

/// Per-epoch sampling stream: decorrelated across epochs, independent of
/// how many steps earlier epochs ran.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Per-view reconstructions of one volume, plus their fusion when asked.
#[derive(Debug, Clone)]
pub struct InferResult {
    pub axial: Volume,
    pub coronal: Volume,
    pub sagittal: Volume,
    pub fused: Option<Volume>,
}

impl InferResult {
    /// The volume a caller should treat as "the" output: the fusion when
    /// it was computed, otherwise the slice-wise reconstruction.
    pub fn output(&self) -> &Volume {
        self.fused.as_ref().unwrap_or(&self.axial)
    }
}

/// Runs both interpolators over a coarse volume and optionally fuses the
/// three views.
pub fn infer(
    ckpt: &Checkpoint,
    v: &Volume,
    fuse_views: bool,
    include_axial_at_originals: bool,
) -> Result<InferResult> {
    use crate::networks::{pint_volume, sint_volume};
    let cfg = &ckpt.config;
    let axial = sint_volume(&ckpt.sint, &ckpt.memory, cfg, v)?;
    let coronal = pint_volume(&ckpt.pint, cfg, v, ViewAxis::Coronal)?;
    let sagittal = pint_volume(&ckpt.pint, cfg, v, ViewAxis::Sagittal)?;
    let fused = if fuse_views {
        Some(fuse_with(&axial, &coronal, &sagittal, cfg.r as u32, include_axial_at_originals)?)
    } else {
        None
    };
    Ok(InferResult { axial, coronal, sagittal, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{baseline_interpolate, BaselineMethod};

    fn micro_net() -> NetConfig {
        NetConfig {
            r: 2,
            base_channels: 8,
            blocks_per_group: 1,
            s2d_block: 2,
            attention_reduction: 4,
            pint_groups: 1,
            memory_items: 3,
            infer_window: None,
        }
    }

    fn micro_config() -> TrainConfig {
        TrainConfig {
            net: micro_net(),
            epochs: 2,
            stage1_epochs: 1,
            steps_per_epoch: 2,
            batch_size: 1,
            lr: 1e-3,
            patch: 8,
            seed: 11,
            ..TrainConfig::desk_preset(2)
        }
    }

    fn wavy_volume(h: usize, w: usize, l: usize, seed: u64) -> Volume {
        let mut data = Vec::with_capacity(h * w * l);
        let phase = seed as f64 * 0.71;
        for z in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.3 * ((x as f64 * 0.7 + z as f64 * 0.9 + phase).sin())
                        + 0.15 * ((y as f64 * 0.5 - z as f64 * 0.4).cos());
                    data.push(v as f32);
                }
            }
        }
        Volume::new(h, w, l, (1.0, 1.0, 2.0), (0.0, 1.0), data).unwrap()
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let json = r#"{"net": {"r": 3}}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.slices_per_sample(), 7);
        assert!(cfg.cmd_mask_originals);
        assert!(!cfg.truncate_incremental);

        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn slices_per_sample_defaults_follow_the_factor() {
        for (r, want) in [(2, 7), (3, 7), (4, 9)] {
            let cfg = TrainConfig { net: NetConfig::desk_scale(r), ..TrainConfig::desk_preset(r) };
            assert_eq!(cfg.slices_per_sample(), want, "r={r}");
        }
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let ok = micro_config();
        assert!(ok.validate().is_ok());

        let mut bad = ok.clone();
        bad.stage1_epochs = 0;
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.stage1_epochs = bad.epochs + 1;
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.gamma = 0.0;
        assert!(bad.validate().is_err());
        bad.gamma = 1.5;
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.n_passes = 0;
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.patch = 9; // not a multiple of s2d_block = 2
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.slices_per_sample = Some(2); // subsamples to a single slice
        assert!(bad.validate().is_err());

        bad = ok.clone();
        bad.degradation = Some(DegradationSpec::direct(3)); // net.r is 2
        assert!(bad.validate().is_err());

        // epochs = 0 skips the stage bound: init-checkpoint-only runs.
        bad = ok.clone();
        bad.epochs = 0;
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn lr_decays_once_after_the_boundary_epoch() {
        let mut cfg = micro_config();
        cfg.lr = 1e-3;
        cfg.lr_decay = 0.1;
        cfg.lr_decay_epoch = 10;
        assert_eq!(cfg.lr_for_epoch(1), 1e-3);
        assert_eq!(cfg.lr_for_epoch(10), 1e-3);
        assert_eq!(cfg.lr_for_epoch(11), 1e-4);
        assert_eq!(cfg.lr_for_epoch(50), 1e-4);
    }

    #[test]
    fn sampling_stays_in_the_central_region_and_is_deterministic() {
        // Central half marked 0.7, outer frame 0.2: a crop that strays
        // outside the central region would contain a 0.2 voxel.
        let (h, w, l) = (32, 32, 12);
        let mut data = vec![0.2f32; h * w * l];
        for z in 0..l {
            for y in h / 4..h - h / 4 {
                for x in w / 4..w - w / 4 {
                    data[(z * h + y) * w + x] = 0.7;
                }
            }
        }
        let v = Volume::new(h, w, l, (1.0, 1.0, 1.0), (0.0, 1.0), data).unwrap();

        let mut cfg = micro_config();
        cfg.batch_size = 6;
        cfg.slices_per_sample = Some(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&[v.clone()], &cfg, &mut rng).unwrap();
        assert_eq!(batch.len(), 6);
        for crop in &batch {
            assert_eq!(crop.dims(), (8, 8, 5));
            assert!(crop.data().iter().all(|&x| x == 0.7));
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let again = sample_batch(&[v], &cfg, &mut rng2).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn sampling_rejects_images_that_cannot_hold_a_central_crop() {
        let v = wavy_volume(12, 12, 8, 0);
        let mut cfg = micro_config();
        cfg.patch = 8; // central half of 12 is 6 wide
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&[v.clone()], &cfg, &mut rng).is_err());

        cfg.patch = 4;
        cfg.slices_per_sample = Some(9); // more than 8 available slices
        assert!(sample_batch(&[v], &cfg, &mut rng).is_err());
    }

    #[test]
    fn adam_leaves_parameters_with_zero_gradient_untouched() {
        let mut opt = AdamState::new();
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        opt.advance();
        opt.update_tensor("w", &mut p, &[0.0, 0.0, 0.0], 1e-2).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_a_signed_lr_sized_move() {
        let mut opt = AdamState::new();
        let mut p = vec![1.0f32, 1.0];
        opt.advance();
        opt.update_tensor("w", &mut p, &[0.3, -2.0], 0.01).unwrap();
        // First step: m_hat/sqrt(v_hat) = g/|g|, so each move is lr minus
        // the epsilon dent.
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut opt = AdamState::new();
            let mut p = vec![0.2f32, -0.4, 0.8];
            for t in 1..=10 {
                opt.advance();
                let g: Vec<f64> = p.iter().map(|&x| (x as f64) * 0.3 + t as f64 * 0.01).collect();
                opt.update_tensor("w", &mut p, &g, 3e-3).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn incremental_passes_grow_by_the_documented_progression() {
        let v = wavy_volume(6, 6, 7, 1);
        let linear = |x: &Volume| baseline_interpolate(x, 2, BaselineMethod::Linear);
        let out = incremental_interpolate(linear, &v, 2, 2).unwrap();
        assert_eq!(out.dims().2, 25);
        // Original slices sit at stride r^n and survive both passes.
        for z in 0..7 {
            assert_eq!(out.slice_data(z * 4), v.slice_data(z));
        }

        let one = incremental_interpolate(linear, &v, 2, 1).unwrap();
        assert_eq!(one, baseline_interpolate(&v, 2, BaselineMethod::Linear).unwrap());

        // A model that returns the wrong length is caught.
        let broken = |x: &Volume| Ok(x.clone());
        assert!(incremental_interpolate(broken, &v, 2, 1).is_err());
    }

    #[test]
    fn stage1_step_trains_both_networks_and_the_bank() {
        let cfg = micro_config();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let sint_before = trainer.checkpoint().sint;
        let pint_before = trainer.checkpoint().pint;
        let bank_before = trainer.bank().clone();

        let batch = vec![wavy_volume(20, 20, 9, 5).crop(6, 6, 0, 8, 8, 7).unwrap()];
        let report = trainer.stage1_step(&batch, 1e-3).unwrap();

        assert!(report.total.is_finite() && report.total > 0.0);
        assert!(report.cmd_c.is_empty() && report.cmd_s.is_empty());
        report.validate(&cfg.weights).unwrap();

        let after = trainer.checkpoint();
        assert_ne!(after.sint, sint_before, "slice-wise parameters did not move");
        assert_ne!(after.pint, pint_before, "pixel-wise parameters did not move");
        assert_ne!(trainer.bank().rows(), bank_before.rows(), "memory bank did not absorb features");
    }

    #[test]
    fn stage2_step_reports_one_distillation_term_per_pass() {
        let mut cfg = micro_config();
        cfg.n_passes = 2;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let sint_before = trainer.checkpoint().sint;
        let pint_before = trainer.checkpoint().pint;

        let batch = vec![wavy_volume(20, 20, 9, 2).crop(6, 6, 1, 8, 8, 7).unwrap()];
        let report = trainer.stage2_step(&batch, 1e-3).unwrap();

        assert_eq!(report.cmd_c.len(), 2);
        assert_eq!(report.cmd_s.len(), 2);
        assert!(report.cmd_c.iter().all(|x| x.is_finite()));
        report.validate(&cfg.weights).unwrap();

        let after = trainer.checkpoint();
        assert_ne!(after.sint, sint_before);
        assert_ne!(after.pint, pint_before);
    }

    #[test]
    fn truncated_chains_still_produce_finite_losses() {
        let mut cfg = micro_config();
        cfg.truncate_incremental = true;
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = vec![wavy_volume(20, 20, 9, 8).crop(5, 5, 2, 8, 8, 7).unwrap()];
        let report = trainer.stage2_step(&batch, 1e-3).unwrap();
        assert_eq!(report.cmd_c.len(), cfg.n_passes);
        assert!(report.total.is_finite());
    }

    #[test]
    fn steps_are_deterministic_across_trainers() {
        let cfg = micro_config();
        let batch = vec![wavy_volume(20, 20, 9, 4).crop(6, 6, 0, 8, 8, 7).unwrap()];
        let run = || {
            let mut t = Trainer::new(&cfg).unwrap();
            let a = t.stage1_step(&batch, 1e-3).unwrap();
            let b = t.stage2_step(&batch, 1e-3).unwrap();
            (a, b)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.total, a2.total);
        assert_eq!(b1.total, b2.total);
        assert_eq!(b1.cmd_c, b2.cmd_c);
        assert_eq!(b1.com, b2.com);
    }

    #[test]
    fn zero_epoch_training_checkpoints_the_initial_state() {
        let mut cfg = micro_config();
        cfg.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let volumes = vec![wavy_volume(20, 20, 9, 3)];
        let outcome = train(&cfg, &volumes, dir.path()).unwrap();

        assert_eq!(outcome.steps_run, 0);
        assert!(outcome.first_loss.is_none());
        let ckpt = crate::networks::load_checkpoint(&outcome.checkpoint).unwrap();
        let fresh = Trainer::new(&cfg).unwrap();
        assert_eq!(ckpt.sint, fresh.checkpoint().sint);
        assert_eq!(ckpt.memory.rows(), fresh.bank().rows());
        assert_eq!(std::fs::read_to_string(&outcome.log).unwrap(), "");
    }

    #[test]
    fn resume_restores_optimiser_bookkeeping() {
        let cfg = micro_config();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let batch = vec![wavy_volume(20, 20, 9, 6).crop(6, 6, 0, 8, 8, 7).unwrap()];
        trainer.stage1_step(&batch, 1e-3).unwrap();
        trainer.note_epoch_done();

        let resumed = Trainer::from_checkpoint(&cfg, &trainer.checkpoint()).unwrap();
        assert_eq!(resumed.opt.step_count(), 1);
        assert_eq!(resumed.epochs_done(), 1);
        assert_eq!(resumed.checkpoint().sint, trainer.checkpoint().sint);

        let mut other = cfg.clone();
        other.net.base_channels = 16;
        assert!(Trainer::from_checkpoint(&other, &trainer.checkpoint()).is_err());
    }

    #[test]
    fn resumed_run_continues_the_log_where_it_stopped() {
        let mut cfg = micro_config();
        cfg.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let volumes = vec![wavy_volume(20, 20, 9, 3)];
        let first = train(&cfg, &volumes, dir.path()).unwrap();
        assert_eq!(first.epochs_run, 1);

        cfg.epochs = 2;
        let ckpt = crate::networks::load_checkpoint(&first.checkpoint).unwrap();
        let rest = train_with(&cfg, &volumes, dir.path(), Some(&ckpt)).unwrap();
        assert_eq!(rest.epochs_run, 1);
        assert_eq!(rest.steps_run, cfg.steps_per_epoch);

        let log = std::fs::read_to_string(&rest.log).unwrap();
        let epochs: Vec<usize> = log
            .lines()
            .map(|l| serde_json::from_str::<TrainLogLine>(l).unwrap().epoch)
            .collect();
        assert_eq!(epochs, vec![1, 1, 2, 2]);

        // A checkpoint already at the target epoch count trains nothing.
        let done = crate::networks::load_checkpoint(&rest.checkpoint).unwrap();
        let noop = train_with(&cfg, &volumes, dir.path(), Some(&done)).unwrap();
        assert_eq!(noop.epochs_run, 0);
        assert!(noop.first_loss.is_none());
    }

    // Scratch profiling target, not a test: run with --ignored --nocapture.
    #[test]
    #[ignore]
    fn bench_step_anatomy() {
        use crate::volume::{make_phantom, PhantomKind};
        use rand::SeedableRng;
        use std::time::Instant;

        let mut cfg = TrainConfig::desk_preset(2);
        cfg.seed = 7;
        let vol = make_phantom(PhantomKind::LayeredSine, (48, 48, 33), 100).unwrap();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&[vol], &cfg, &mut rng).unwrap();

        for (label, with_cmd) in [("stage1", false), ("stage2", true)] {
            trainer.run_step(&batch, with_cmd, 1e-3).unwrap();
            let t0 = Instant::now();
            for _ in 0..3 {
                trainer.run_step(&batch, with_cmd, 1e-3).unwrap();
            }
            println!("{label}: {:.0} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 3.0);
        }

        let net = cfg.net.clone();
        let sample = &batch[0];
        let low = degrade(sample, &DegradationSpec::direct(2)).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let bp_s = bind_params(&mut g, &trainer.sint);
        let bp_p = bind_params(&mut g, &trainer.pint);
        let bank = g.input(trainer.bank.tensor());

        let t = Instant::now();
        let low_slices = slice_inputs(&mut g, &low);
        sint_chain(&mut g, &bp_s, &net, bank, &low_slices).unwrap();
        println!("sint fwd on low crop: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0);

        let t = Instant::now();
        let cor = image_inputs(&mut g, &low, ViewAxis::Coronal).unwrap();
        pint_chain(&mut g, &bp_p, &net, &cor, ViewAxis::Coronal).unwrap();
        println!("pint fwd on low crop ({} images): {:.1} ms", cor.len(), t.elapsed().as_secs_f64() * 1000.0);

        let t = Instant::now();
        let full_slices = slice_inputs(&mut g, sample);
        let ax = sint_chain(&mut g, &bp_s, &net, bank, &full_slices).unwrap();
        println!("sint fwd on full crop: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0);

        let t = Instant::now();
        let cor2 = image_inputs(&mut g, sample, ViewAxis::Coronal).unwrap();
        let c2 = pint_chain(&mut g, &bp_p, &net, &cor2, ViewAxis::Coronal).unwrap();
        println!("pint fwd on full crop ({} images): {:.1} ms", cor2.len(), t.elapsed().as_secs_f64() * 1000.0);

        let loss = g.mse(ax.volume, c2.volume).unwrap();
        let t = Instant::now();
        g.backward(loss).unwrap();
        println!("backward over both chains: {:.1} ms ({} nodes)", t.elapsed().as_secs_f64() * 1000.0, g.len());
    }
}
