//! The optimization loop: patch-based ray sampling, Adam with log-linear
//! learning-rate decay, loss assembly over per-chunk graphs, checkpointing,
//! and the test-time enhancement path.
//!
//! A step runs in two phases. Phase A builds one graph per fixed-size chunk
//! of patches and runs the field + compositor forward; the rendered colors
//! of all rays then give the batch channel means for the chromatic target.
//! Phase B appends the loss subgraph to each chunk, runs backward, and
//! gradients are reduced over chunks in index order. The chunk size is a
//! constant, so results are bit-identical regardless of how many worker
//! threads execute the chunks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, PointBatch, PointOutput};
use crate::objective::{
    auto_exposure_gain, batch_channel_means, ca_loss_nodes, chromatic_targets, data_loss_sum_nodes,
    image_mean, smoothness_loss_nodes, total_loss, LossBreakdown, LossConfig, PatchNodes,
};
use crate::rawproc::{self, LinearRgbImage};
use crate::render::{composite, sample_stratified, CompositeConsts, Ray, RaySample, RenderOutput};
use crate::synthscene::{Camera, Dataset};

/// Patches per chunk graph. Fixed so that chunk boundaries (and therefore
/// all floating-point reduction orders) do not depend on the worker count.
const CHUNK_PATCHES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoCa,
    NoSmooth,
    Baseline,
}

impl Ablation {
    /// Loss weights and response-head freezing implied by the ablation.
    pub fn apply(&self, loss: &LossConfig) -> (LossConfig, bool) {
        match self {
            Ablation::Full => (*loss, false),
            Ablation::NoCa => (LossConfig { lambda2: 0.0, ..*loss }, true),
            Ablation::NoSmooth => (LossConfig { lambda3: 0.0, ..*loss }, false),
            Ablation::Baseline => (LossConfig { lambda2: 0.0, lambda3: 0.0, ..*loss }, true),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-ca" => Ok(Ablation::NoCa),
            "no-smooth" => Ok(Ablation::NoSmooth),
            "baseline" => Ok(Ablation::Baseline),
            other => Err(Error::invalid(format!("unknown ablation '{other}' (full|no-ca|no-smooth|baseline)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub patch_side: usize,
    pub n_samples_per_ray: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    /// Trailing views excluded from training and used for evaluation.
    pub holdout_views: usize,
    pub ablation: Ablation,
    pub field: FieldConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_rays: 256,
            patch_side: 2,
            n_samples_per_ray: 64,
            lr_start: 1e-3,
            lr_end: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 5_000,
            holdout_views: 4,
            ablation: Ablation::Full,
            field: FieldConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let patch_rays = self.patch_side * self.patch_side;
        if self.patch_side < 2 {
            return Err(Error::invalid("patch_side must be at least 2"));
        }
        if self.batch_rays == 0 || self.batch_rays % patch_rays != 0 {
            return Err(Error::invalid(format!(
                "batch_rays {} must be a positive multiple of patch_side^2 = {patch_rays}",
                self.batch_rays
            )));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::invalid("need lr_start >= lr_end > 0"));
        }
        if self.n_samples_per_ray < 2 {
            return Err(Error::invalid("n_samples_per_ray must be at least 2"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Parses either JSON (leading '{') or flat `key = value` lines.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let trimmed = text.trim_start();
        let cfg = if trimmed.starts_with('{') {
            serde_json::from_str(text)?
        } else {
            Self::from_kv_text(text)?
        };
        Ok(cfg)
    }

    fn from_kv_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = || -> Result<f64> {
                value.parse::<f64>().map_err(|_| Error::invalid(format!("config key {key}: bad number '{value}'")))
            };
            let parse_usize = || -> Result<usize> {
                value.parse::<usize>().map_err(|_| Error::invalid(format!("config key {key}: bad count '{value}'")))
            };
            match key {
                "steps" => cfg.steps = parse_usize()?,
                "batch_rays" => cfg.batch_rays = parse_usize()?,
                "patch_side" => cfg.patch_side = parse_usize()?,
                "n_samples_per_ray" => cfg.n_samples_per_ray = parse_usize()?,
                "lr_start" => cfg.lr_start = parse_f64()?,
                "lr_end" => cfg.lr_end = parse_f64()?,
                "adam_beta1" => cfg.adam_beta1 = parse_f64()?,
                "adam_beta2" => cfg.adam_beta2 = parse_f64()?,
                "adam_eps" => cfg.adam_eps = parse_f64()?,
                "seed" => cfg.seed = value.parse().map_err(|_| Error::invalid("bad seed"))?,
                "log_interval" => cfg.log_interval = parse_usize()?,
                "checkpoint_interval" => cfg.checkpoint_interval = parse_usize()?,
                "holdout_views" => cfg.holdout_views = parse_usize()?,
                "ablation" => cfg.ablation = value.parse()?,
                "lambda1" => cfg.loss.lambda1 = parse_f64()?,
                "lambda2" => cfg.loss.lambda2 = parse_f64()?,
                "lambda3" => cfg.loss.lambda3 = parse_f64()?,
                "gamma1" => cfg.loss.gamma1 = parse_f64()?,
                "gamma2" => cfg.loss.gamma2 = parse_f64()?,
                "epsilon" => cfg.loss.epsilon = parse_f64()?,
                "epsilon_prime" => cfg.loss.epsilon_prime = parse_f64()?,
                "target_mean" => cfg.loss.target_mean = parse_f64()?,
                "alpha_max" => cfg.loss.alpha_max = parse_f64()?,
                "s_patch" => cfg.loss.s_patch = parse_usize()?,
                "cross_pairing" => {
                    cfg.loss.cross_pairing =
                        value.parse().map_err(|_| Error::invalid("cross_pairing must be true/false"))?
                }
                "trunk_layers" => cfg.field.trunk_layers = parse_usize()?,
                "trunk_width" => cfg.field.trunk_width = parse_usize()?,
                "head_width" => cfg.field.head_width = parse_usize()?,
                "s_floor" => cfg.field.s_floor = parse_f64()?,
                "s_max" => cfg.field.s_max = parse_f64()?,
                "position_frequencies" => cfg.field.encoding.position_frequencies = parse_usize()?,
                "direction_frequencies" => cfg.field.encoding.direction_frequencies = parse_usize()?,
                other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
            }
        }
        Ok(cfg)
    }
}

/// Log-linear interpolation from `lr_start` at step 0 to `lr_end` at the
/// final step.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let t = step as f64 / cfg.steps as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// Standard bias-corrected Adam update for one tensor.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// ray batches

/// A contiguous pixel block from one view, with its rays, stratified samples
/// and demosaiced raw ground truth.
pub struct Patch {
    pub view: usize,
    pub row0: usize,
    pub col0: usize,
    /// Row-major `patch_side x patch_side` rays.
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySample>,
    pub gt: Vec<[f64; 3]>,
}

/// One training batch: `batch_rays / patch_side^2` patches.
pub struct RayBatch {
    pub patches: Vec<Patch>,
    pub patch_side: usize,
}

impl RayBatch {
    pub fn ray_count(&self) -> usize {
        self.patches.iter().map(|p| p.rays.len()).sum()
    }
}

/// Per-view training data kept in memory.
struct TrainView {
    camera: Camera,
    /// Demosaiced, black-level-subtracted raw pixels.
    gt_rgb: Vec<[f64; 3]>,
}

/// Samples a batch of contiguous patches from random training views.
fn sample_ray_patches(
    views: &[TrainView],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RayBatch> {
    let side = cfg.patch_side;
    if width < side || height < side {
        return Err(Error::invalid("patch does not fit in the image"));
    }
    let n_patches = cfg.batch_rays / (side * side);
    let mut patches = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let view = rng.gen_range(0..views.len());
        let row0 = rng.gen_range(0..=height - side);
        let col0 = rng.gen_range(0..=width - side);
        let mut rays = Vec::with_capacity(side * side);
        let mut samples = Vec::with_capacity(side * side);
        let mut gt = Vec::with_capacity(side * side);
        for dr in 0..side {
            for dc in 0..side {
                let (row, col) = (row0 + dr, col0 + dc);
                let ray = views[view].camera.ray(row, col, near, far)?;
                samples.push(sample_stratified(&ray, cfg.n_samples_per_ray, true, rng));
                gt.push(views[view].gt_rgb[row * width + col]);
                rays.push(ray);
            }
        }
        patches.push(Patch { view, row0, col0, rays, samples, gt });
    }
    Ok(RayBatch { patches, patch_side: side })
}

// ---------------------------------------------------------------------------
// per-chunk graphs

struct RayHandles {
    c_l: Value,
    s: Value,
}

struct ChunkGraph {
    graph: Graph,
    /// Parameter leaf ids in canonical tensor order.
    leaf_values: Vec<Value>,
    /// Per patch, per ray (row-major within the patch).
    rays: Vec<Vec<RayHandles>>,
    c_l_values: Vec<[f64; 3]>,
}

fn build_chunk(
    params: &FieldParams,
    patches: &[Patch],
    cfg: &TrainConfig,
    frozen: bool,
) -> Result<ChunkGraph> {
    let mut graph = Graph::new();
    let leaves = params.leaves(&mut graph)?;
    let consts = CompositeConsts::new(&mut graph, cfg.n_samples_per_ray)?;

    // encode every sample point of the chunk in one batch
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for patch in patches {
        for (ray, sample) in patch.rays.iter().zip(&patch.samples) {
            points.extend_from_slice(&sample.points);
            dirs.push(ray.dir);
        }
    }
    let batch = PointBatch::from_ray_groups(&params.config.encoding, &points, &dirs, cfg.n_samples_per_ray);
    let nodes = params.forward(&mut graph, &leaves, &batch, frozen)?;

    let n = cfg.n_samples_per_ray;
    let mut rays = Vec::with_capacity(patches.len());
    let mut c_l_values = Vec::new();
    let mut offset = 0;
    for patch in patches {
        let mut handles = Vec::with_capacity(patch.rays.len());
        for sample in &patch.samples {
            let sigma = graph.slice_rows(nodes.sigma, offset, n)?;
            let c_l = graph.slice_rows(nodes.c_l, offset, n)?;
            let s = graph.slice_rows(nodes.s, offset, n)?;
            let ray_nodes = crate::render::composite_nodes(&mut graph, &consts, sigma, c_l, s, &sample.deltas)?;
            let v = graph.value(ray_nodes.c_l);
            c_l_values.push([v[0], v[1], v[2]]);
            handles.push(RayHandles { c_l: ray_nodes.c_l, s: ray_nodes.s });
            offset += n;
        }
        rays.push(handles);
    }

    Ok(ChunkGraph { graph, leaf_values: leaf_slots(&leaves), rays, c_l_values })
}

/// Leaf ids in the same order as `FieldParams::named_tensors`.
fn leaf_slots(leaves: &crate::field::FieldLeaves) -> Vec<Value> {
    let mut out = Vec::new();
    for l in &leaves.trunk {
        out.push(l.w);
        out.push(l.b);
    }
    out.push(leaves.sigma.w);
    out.push(leaves.sigma.b);
    for head in [&leaves.color, &leaves.response] {
        for l in head.iter() {
            out.push(l.w);
            out.push(l.b);
        }
    }
    out
}

struct ChunkResult {
    data_sum: f64,
    ca: f64,
    smooth: f64,
    grads: Vec<Vec<f64>>,
}

fn finish_chunk(
    chunk: &mut ChunkGraph,
    patches: &[Patch],
    targets: Option<[f64; 3]>,
    loss_cfg: &LossConfig,
    patch_side: usize,
    batch_rays: usize,
) -> Result<ChunkResult> {
    let g = &mut chunk.graph;
    let mut total_terms: Vec<Value> = Vec::new();

    // data term over all chunk rays
    let mut ray_cl = Vec::new();
    let mut gt = Vec::new();
    for (patch, handles) in patches.iter().zip(&chunk.rays) {
        for (h, rgb) in handles.iter().zip(&patch.gt) {
            ray_cl.push(h.c_l);
            gt.push(*rgb);
        }
    }
    let data_sum = data_loss_sum_nodes(g, &ray_cl, &gt, loss_cfg.epsilon_prime)?;
    let data_sum_value = g.value(data_sum)[0];
    let data_scale = g.scalar(loss_cfg.lambda1 / (3.0 * batch_rays as f64))?;
    total_terms.push(g.mul(data_sum, data_scale)?);

    let mut ca_value = 0.0;
    if loss_cfg.lambda2 > 0.0 {
        let t = targets.ok_or_else(|| Error::invalid("chromatic targets missing"))?;
        let s_nodes: Vec<Value> = chunk.rays.iter().flatten().map(|h| h.s).collect();
        let ca = ca_loss_nodes(g, &s_nodes, t)?;
        ca_value = g.value(ca)[0];
        let w = g.scalar(loss_cfg.lambda2)?;
        total_terms.push(g.mul(ca, w)?);
    }

    let mut smooth_value = 0.0;
    if loss_cfg.lambda3 > 0.0 {
        let mut patch_terms = Vec::new();
        for handles in &chunk.rays {
            let s: Vec<Value> = handles.iter().map(|h| h.s).collect();
            let c: Vec<Value> = handles.iter().map(|h| h.c_l).collect();
            let patch = PatchNodes { s: &s, c: &c, rows: patch_side, cols: patch_side };
            patch_terms.push(smoothness_loss_nodes(g, &patch, loss_cfg)?);
        }
        let mut acc = patch_terms[0];
        for term in &patch_terms[1..] {
            acc = g.add(acc, *term)?;
        }
        smooth_value = g.value(acc)[0];
        let w = g.scalar(loss_cfg.lambda3)?;
        total_terms.push(g.mul(acc, w)?);
    }

    let mut total = total_terms[0];
    for term in &total_terms[1..] {
        total = g.add(total, *term)?;
    }
    g.backward(total)?;

    let grads = chunk
        .leaf_values
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    Ok(ChunkResult { data_sum: data_sum_value, ca: ca_value, smooth: smooth_value, grads })
}

// ---------------------------------------------------------------------------
// trainer

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

/// Owns the parameters, optimizer state, RNG and training data.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: FieldParams,
    pub step: usize,
    pub response_frozen: bool,
    loss_cfg: LossConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    views: Vec<TrainView>,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

impl Trainer {
    pub fn new(dataset: &Dataset, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let n_views = dataset.manifest.views.len();
        if cfg.holdout_views >= n_views {
            return Err(Error::invalid(format!(
                "holdout_views {} leaves no training views out of {n_views}",
                cfg.holdout_views
            )));
        }
        let train_count = n_views - cfg.holdout_views;
        let mut views = Vec::with_capacity(train_count);
        for i in 0..train_count {
            let camera = dataset.manifest.camera(i)?;
            let raw = rawproc::subtract_black_level(&dataset.raws[i])?;
            let rgb = rawproc::demosaic_bilinear(&raw)?;
            views.push(TrainView { camera, gt_rgb: rgb.pixels });
        }
        let (loss_cfg, frozen) = cfg.ablation.apply(&cfg.loss);
        let params = FieldParams::init(cfg.field, cfg.seed);
        let n_tensors = params.named_tensors().len();
        let adam = AdamState {
            m: params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            t: 0,
        };
        debug_assert_eq!(adam.m.len(), n_tensors);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            params,
            step: 0,
            response_frozen: frozen,
            loss_cfg,
            adam,
            views,
            width: dataset.width,
            height: dataset.height,
            near: dataset.manifest.near,
            far: dataset.manifest.far,
            cfg,
        })
    }

    /// One optimization step; returns the loss breakdown at the pre-update
    /// parameters.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = sample_ray_patches(
            &self.views,
            self.width,
            self.height,
            self.near,
            self.far,
            &self.cfg,
            &mut self.rng,
        )?;
        let breakdown = self.step_on_batch(&batch)?;
        Ok(breakdown)
    }

    /// Forward/backward/update on a prepared batch (exposed for the loss
    /// probes in tests and the gradient-check CLI).
    pub fn step_on_batch(&mut self, batch: &RayBatch) -> Result<LossBreakdown> {
        let profile = std::env::var_os("LUMENFIELD_PROFILE").is_some();
        let t0 = std::time::Instant::now();
        let chunks: Vec<&[Patch]> = batch.patches.chunks(CHUNK_PATCHES).collect();
        let mut graphs: Vec<ChunkGraph> = chunks
            .par_iter()
            .map(|patches| build_chunk(&self.params, patches, &self.cfg, self.response_frozen))
            .collect::<Result<_>>()?;
        let t_forward = t0.elapsed();

        // batch channel means over rays in patch order, targets gradient-stopped
        let targets = if self.loss_cfg.lambda2 > 0.0 {
            let mut all = Vec::with_capacity(batch.ray_count());
            for chunk in &graphs {
                all.extend_from_slice(&chunk.c_l_values);
            }
            Some(chromatic_targets(batch_channel_means(&all)).map_err(|e| {
                Error::invalid(format!("step {}: {e}", self.step))
            })?)
        } else {
            None
        };

        let batch_rays = batch.ray_count();
        let t1 = std::time::Instant::now();
        let results: Vec<ChunkResult> = graphs
            .par_iter_mut()
            .zip(chunks.par_iter())
            .map(|(chunk, patches)| {
                finish_chunk(chunk, patches, targets, &self.loss_cfg, batch.patch_side, batch_rays)
            })
            .collect::<Result<_>>()?;
        let t_backward = t1.elapsed();
        let t2 = std::time::Instant::now();

        // fixed-order reduction over chunks
        let mut data_sum = 0.0;
        let mut ca = 0.0;
        let mut smooth = 0.0;
        for r in &results {
            data_sum += r.data_sum;
            ca += r.ca;
            smooth += r.smooth;
        }
        let breakdown = total_loss(data_sum / (3.0 * batch_rays as f64), ca, smooth, &self.loss_cfg);
        if !breakdown.total.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite loss at step {}: data {} ca {} smooth {}",
                self.step, breakdown.data, breakdown.ca, breakdown.smooth
            )));
        }

        for (_, t) in self.params.named_tensors_mut() {
            t.clear_grad();
        }
        {
            let mut named = self.params.named_tensors_mut();
            for r in &results {
                for (slot, grad) in named.iter_mut().zip(&r.grads) {
                    if !grad.is_empty() {
                        slot.1.accumulate_grad(grad)?;
                    }
                }
            }
        }

        let lr = lr_schedule(self.step, &self.cfg);
        self.adam.t += 1;
        let t = self.adam.t;
        let (b1, b2, eps) = (self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        let mut named = self.params.named_tensors_mut();
        for (idx, (_, tensor)) in named.iter_mut().enumerate() {
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            adam_update(
                tensor.data_mut(),
                &grad,
                &mut self.adam.m[idx],
                &mut self.adam.v[idx],
                lr,
                b1,
                b2,
                eps,
                t,
            );
            tensor.validate().map_err(|_| {
                Error::invalid(format!("non-finite parameter after update at step {}", self.step))
            })?;
            tensor.clear_grad();
        }
        self.step += 1;
        if profile {
            eprintln!(
                "step {}: forward {:.1} ms, loss+backward {:.1} ms, reduce+adam {:.1} ms",
                self.step,
                t_forward.as_secs_f64() * 1e3,
                t_backward.as_secs_f64() * 1e3,
                t2.elapsed().as_secs_f64() * 1e3,
            );
        }
        Ok(breakdown)
    }

    /// Runs the remaining steps, logging CSV rows and writing periodic
    /// checkpoints.
    pub fn run(&mut self, out_dir: &Path, log: &mut TrainLog) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        while self.step < self.cfg.steps {
            let lr = lr_schedule(self.step, &self.cfg);
            let step_before = self.step;
            let breakdown = self.train_step()?;
            if step_before % self.cfg.log_interval == 0 || self.step == self.cfg.steps {
                log.record(step_before, &breakdown, lr)?;
            }
            if self.cfg.checkpoint_interval > 0
                && self.step % self.cfg.checkpoint_interval == 0
                && self.step < self.cfg.steps
            {
                self.save_checkpoint(&out_dir.join(format!("ckpt_{:06}.lfck", self.step)))?;
            }
        }
        self.save_checkpoint(&out_dir.join("ckpt_final.lfck"))?;
        Ok(())
    }

    // -- checkpointing ------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.params.named_tensors() {
            tensors.push((name, t.clone()));
        }
        for (idx, (name, _)) in self.params.named_tensors().iter().enumerate() {
            tensors.push((format!("adam.m.{name}"), Tensor::from_vec(vec![self.adam.m[idx].len()], self.adam.m[idx].clone())?));
            tensors.push((format!("adam.v.{name}"), Tensor::from_vec(vec![self.adam.v[idx].len()], self.adam.v[idx].clone())?));
        }
        tensors.push(("_step".into(), Tensor::scalar(self.step as f64)?));
        tensors.push(("_adam_t".into(), Tensor::scalar(self.adam.t as f64)?));
        tensors.push(("_frozen".into(), Tensor::scalar(if self.response_frozen { 1.0 } else { 0.0 })?));
        tensors.push(("_rng".into(), rng_to_tensor(&self.rng)?));
        // architecture + render settings, so checkpoints stand alone
        let f = &self.cfg.field;
        tensors.push((
            "_meta".into(),
            Tensor::from_vec(
                vec![10],
                vec![
                    f.encoding.position_frequencies as f64,
                    f.encoding.direction_frequencies as f64,
                    f.trunk_layers as f64,
                    f.trunk_width as f64,
                    f.head_width as f64,
                    f.s_floor,
                    f.s_max,
                    self.cfg.loss.target_mean,
                    self.cfg.loss.alpha_max,
                    self.cfg.n_samples_per_ray as f64,
                ],
            )?,
        ));
        let named: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write_file(path, &named)?;
        Ok(())
    }

    pub fn resume(dataset: &Dataset, cfg: TrainConfig, path: &Path) -> Result<Trainer> {
        let loaded = load_checkpoint(path)?;
        if loaded.params.config != cfg.field {
            return Err(Error::invalid(format!(
                "checkpoint field config {:?} does not match training config {:?}",
                loaded.params.config, cfg.field
            )));
        }
        let mut trainer = Trainer::new(dataset, cfg)?;
        let tensors = checkpoint::read_file(path)?;
        let lookup = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("checkpoint missing tensor {name}")))
        };
        trainer.params = FieldParams::from_named(trainer.cfg.field, &tensors)?;
        for (idx, (name, _)) in trainer.params.named_tensors().iter().enumerate() {
            trainer.adam.m[idx] = lookup(&format!("adam.m.{name}"))?.data().to_vec();
            trainer.adam.v[idx] = lookup(&format!("adam.v.{name}"))?.data().to_vec();
        }
        trainer.step = lookup("_step")?.data()[0] as usize;
        trainer.adam.t = lookup("_adam_t")?.data()[0] as usize;
        trainer.response_frozen = lookup("_frozen")?.data()[0] != 0.0;
        trainer.rng = rng_from_tensor(lookup("_rng")?)?;
        Ok(trainer)
    }
}

/// Checkpoint payload loaded without a dataset (for rendering). The field
/// architecture and exposure settings come from the checkpoint itself.
pub struct LoadedCheckpoint {
    pub params: FieldParams,
    pub step: usize,
    pub response_frozen: bool,
    pub target_mean: f64,
    pub alpha_max: f64,
    pub n_samples_per_ray: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let tensors = checkpoint::read_file(path)?;
    let meta = tensors
        .iter()
        .find(|(n, _)| n == "_meta")
        .map(|(_, t)| t.data().to_vec())
        .ok_or_else(|| Error::invalid("checkpoint missing _meta tensor"))?;
    if meta.len() != 10 {
        return Err(Error::invalid("checkpoint _meta tensor malformed"));
    }
    let field = FieldConfig {
        encoding: crate::field::EncodingConfig {
            position_frequencies: meta[0] as usize,
            direction_frequencies: meta[1] as usize,
        },
        trunk_layers: meta[2] as usize,
        trunk_width: meta[3] as usize,
        head_width: meta[4] as usize,
        s_floor: meta[5],
        s_max: meta[6],
    };
    let params = FieldParams::from_named(field, &tensors)?;
    let step = tensors
        .iter()
        .find(|(n, _)| n == "_step")
        .map(|(_, t)| t.data()[0] as usize)
        .unwrap_or(0);
    let response_frozen = tensors
        .iter()
        .find(|(n, _)| n == "_frozen")
        .map(|(_, t)| t.data()[0] != 0.0)
        .unwrap_or(false);
    Ok(LoadedCheckpoint {
        params,
        step,
        response_frozen,
        target_mean: meta[7],
        alpha_max: meta[8],
        n_samples_per_ray: meta[9] as usize,
    })
}

fn rng_to_tensor(rng: &ChaCha8Rng) -> Result<Tensor> {
    let mut bytes = Vec::with_capacity(56);
    bytes.extend_from_slice(&rng.get_seed());
    bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    Ok(Tensor::from_vec(vec![bytes.len()], bytes.iter().map(|b| *b as f64).collect())?)
}

fn rng_from_tensor(t: &Tensor) -> Result<ChaCha8Rng> {
    let bytes: Vec<u8> = t.data().iter().map(|v| *v as u8).collect();
    if bytes.len() != 56 {
        return Err(Error::invalid("rng state tensor must have 56 bytes"));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[0..32]);
    let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// CSV loss log: `step,data,ca,smooth,total,lr`.
pub struct TrainLog {
    writer: Option<BufWriter<File>>,
    pub rows: Vec<(usize, LossBreakdown, f64)>,
}

impl TrainLog {
    pub fn to_file(path: &Path) -> Result<TrainLog> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "step,data,ca,smooth,total,lr")?;
        Ok(TrainLog { writer: Some(writer), rows: Vec::new() })
    }

    pub fn in_memory() -> TrainLog {
        TrainLog { writer: None, rows: Vec::new() }
    }

    pub fn record(&mut self, step: usize, b: &LossBreakdown, lr: f64) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{step},{},{},{},{},{lr}", b.data, b.ca, b.smooth, b.total)?;
            w.flush()?;
        }
        self.rows.push((step, *b, lr));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// rendering trained fields

/// Everything rendered for one view.
pub struct ViewRender {
    pub c_l: LinearRgbImage,
    pub c_s: LinearRgbImage,
    pub s_map: LinearRgbImage,
    /// Exposure gain used for the enhanced image.
    pub alpha: f64,
    /// `clamp(alpha * C_s, 0, 1)`.
    pub enhanced: LinearRgbImage,
    /// Mean of `alpha * C_s` before clamping.
    pub enhanced_mean_preclamp: f64,
}

/// Renders one view with deterministic midpoint sampling. Rays are batched
/// through no-grad graphs row by row; per-ray quadrature uses the pure
/// compositor.
pub fn render_view(
    params: &FieldParams,
    camera: &Camera,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    n_samples: usize,
    response_frozen: bool,
    loss_cfg: &LossConfig,
) -> Result<ViewRender> {
    let rows: Vec<usize> = (0..height).collect();
    let row_outputs: Vec<Result<Vec<RenderOutput>>> = rows
        .par_iter()
        .map(|row| -> Result<Vec<RenderOutput>> {
            // jitter is off in eval mode; the rng is never advanced
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut rays = Vec::with_capacity(width);
            let mut samples = Vec::with_capacity(width);
            for col in 0..width {
                let ray = camera.ray(*row, col, near, far)?;
                samples.push(sample_stratified(&ray, n_samples, false, &mut rng));
                rays.push(ray);
            }
            let mut points = Vec::with_capacity(width * n_samples);
            let mut dirs = Vec::with_capacity(width);
            for (ray, sample) in rays.iter().zip(&samples) {
                points.extend_from_slice(&sample.points);
                dirs.push(ray.dir);
            }
            let mut graph = Graph::new();
            let leaves = params.leaves(&mut graph)?;
            let batch = PointBatch::from_ray_groups(&params.config.encoding, &points, &dirs, n_samples);
            let nodes = params.forward(&mut graph, &leaves, &batch, response_frozen)?;
            let sigma = graph.value(nodes.sigma);
            let c_l = graph.value(nodes.c_l);
            let s = graph.value(nodes.s);
            let mut outs = Vec::with_capacity(width);
            for (px, sample) in samples.iter().enumerate() {
                let outputs: Vec<PointOutput> = (0..n_samples)
                    .map(|i| {
                        let idx = px * n_samples + i;
                        PointOutput {
                            sigma: sigma[idx],
                            h: Vec::new(),
                            c_l: [c_l[idx * 3], c_l[idx * 3 + 1], c_l[idx * 3 + 2]],
                            s: [s[idx * 3], s[idx * 3 + 1], s[idx * 3 + 2]],
                        }
                    })
                    .collect();
                outs.push(composite(&outputs, sample)?);
            }
            Ok(outs)
        })
        .collect();

    let mut c_l_px = Vec::with_capacity(width * height);
    let mut c_s_px = Vec::with_capacity(width * height);
    let mut s_px = Vec::with_capacity(width * height);
    for row in row_outputs {
        for out in row? {
            c_l_px.push(out.c_l);
            c_s_px.push(out.c_s);
            s_px.push(out.s);
        }
    }
    let c_s = LinearRgbImage::new(width, height, c_s_px)?;
    let alpha = auto_exposure_gain(image_mean(&c_s.pixels), loss_cfg)?;
    let mut preclamp_sum = 0.0;
    let enhanced: Vec<[f64; 3]> = c_s
        .pixels
        .iter()
        .map(|p| {
            let e = [alpha * p[0], alpha * p[1], alpha * p[2]];
            preclamp_sum += e[0] + e[1] + e[2];
            [e[0].clamp(0.0, 1.0), e[1].clamp(0.0, 1.0), e[2].clamp(0.0, 1.0)]
        })
        .collect();
    Ok(ViewRender {
        c_l: LinearRgbImage::new(width, height, c_l_px)?,
        s_map: LinearRgbImage::new(width, height, s_px)?,
        enhanced: LinearRgbImage::new(width, height, enhanced)?,
        enhanced_mean_preclamp: preclamp_sum / (3.0 * (width * height) as f64),
        alpha,
        c_s,
    })
}

/// Renders every view of a manifest (or a subset).
pub fn render_views(
    params: &FieldParams,
    dataset: &Dataset,
    n_samples: usize,
    response_frozen: bool,
    loss_cfg: &LossConfig,
    views: Option<&[usize]>,
) -> Result<Vec<(usize, ViewRender)>> {
    let indices: Vec<usize> = match views {
        Some(v) => v.to_vec(),
        None => (0..dataset.manifest.views.len()).collect(),
    };
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices {
        let camera = dataset.manifest.camera(idx)?;
        let render = render_view(
            params,
            &camera,
            dataset.width,
            dataset.height,
            dataset.manifest.near,
            dataset.manifest.far,
            n_samples,
            response_frozen,
            loss_cfg,
        )?;
        out.push((idx, render));
    }
    Ok(out)
}
