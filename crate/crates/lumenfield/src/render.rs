//! Stratified ray sampling and quadrature volume rendering.
//!
//! Compositing comes in two forms that implement the same quadrature:
//! [`composite`] is the pure per-ray reduction used by evaluation and by
//! oracle checks, and [`composite_nodes`] emits the identical computation on
//! an autodiff graph for training. The graph form folds the transmittance
//! recursion into an exclusive prefix sum (a matmul against a constant
//! strictly-lower-triangular matrix) so the whole ray stays on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::field::PointOutput;

/// Camera ray with its integration bounds and pixel provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn new(origin: [f64; 3], dir: [f64; 3], t_near: f64, t_far: f64, pixel: (usize, usize)) -> Result<Self> {
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("ray direction norm {norm} is not unit within 1e-6")));
        }
        if !(t_near < t_far) {
            return Err(Error::invalid(format!("ray bounds t_near {t_near} >= t_far {t_far}")));
        }
        Ok(Ray { origin, dir, t_near, t_far, pixel })
    }

    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Quadrature points along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub points: Vec<[f64; 3]>,
}

/// One stratified sample per uniform bin. With `jitter` off, samples sit at
/// bin midpoints (the deterministic eval mode); the final segment length is
/// capped at `t_far - t_last`.
pub fn sample_stratified(ray: &Ray, n_samples: usize, jitter: bool, rng: &mut ChaCha8Rng) -> RaySample {
    assert!(n_samples >= 2, "need at least two samples per ray");
    let width = (ray.t_far - ray.t_near) / n_samples as f64;
    let mut t_values = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let u = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
        t_values.push(ray.t_near + (i as f64 + u) * width);
    }
    let mut deltas = Vec::with_capacity(n_samples);
    for i in 0..n_samples - 1 {
        deltas.push(t_values[i + 1] - t_values[i]);
    }
    deltas.push(ray.t_far - t_values[n_samples - 1]);
    let points = t_values.iter().map(|t| ray.point_at(*t)).collect();
    RaySample { t_values, deltas, points }
}

/// Per-ray composited quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Low-light color, sum of w_i * c_l,i.
    pub c_l: [f64; 3],
    /// Restored color before exposure gain, sum of w_i * (c_l,i * s_i).
    pub c_s: [f64; 3],
    /// Integrated response, sum of w_i * s_i.
    pub s: [f64; 3],
    pub weights: Vec<f64>,
    pub acc: f64,
}

/// Quadrature reduction of one ray:
/// `alpha_i = 1 - exp(-sigma_i * delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// `w_i = T_i * alpha_i`, and the three weighted color/response sums.
pub fn composite(outputs: &[PointOutput], sample: &RaySample) -> Result<RenderOutput> {
    if outputs.len() != sample.deltas.len() {
        return Err(Error::invalid(format!(
            "composite got {} point outputs for {} samples",
            outputs.len(),
            sample.deltas.len()
        )));
    }
    let mut c_l = [0.0; 3];
    let mut c_s = [0.0; 3];
    let mut s_out = [0.0; 3];
    let mut weights = Vec::with_capacity(outputs.len());
    let mut acc = 0.0;
    let mut transmittance = 1.0f64;
    for (out, delta) in outputs.iter().zip(&sample.deltas) {
        if out.sigma < 0.0 {
            return Err(Error::invalid(format!("negative density {} reached the compositor", out.sigma)));
        }
        let od = out.sigma * delta;
        let alpha = 1.0 - (-od).exp();
        let w = transmittance * alpha;
        for k in 0..3 {
            c_l[k] += w * out.c_l[k];
            s_out[k] += w * out.s[k];
            c_s[k] += w * (out.c_l[k] * out.s[k]);
        }
        weights.push(w);
        acc += w;
        transmittance *= 1.0 - alpha;
    }
    Ok(RenderOutput { c_l, c_s, s: s_out, weights, acc })
}

/// Exposure-gained enhanced color, clamped to [0, 1] for image output.
pub fn enhance(out: &RenderOutput, alpha: f64) -> [f64; 3] {
    debug_assert!(alpha > 0.0);
    [
        (alpha * out.c_s[0]).clamp(0.0, 1.0),
        (alpha * out.c_s[1]).clamp(0.0, 1.0),
        (alpha * out.c_s[2]).clamp(0.0, 1.0),
    ]
}

/// Constant nodes shared by every ray of a graph: the strictly-lower
/// triangular ones matrix driving the exclusive prefix sum, a ones row for
/// weighted sums, and the segment count.
pub struct CompositeConsts {
    pub n_samples: usize,
    lower_strict: Value,
    ones_row: Value,
    neg_one: Value,
    one: Value,
}

impl CompositeConsts {
    pub fn new(g: &mut Graph, n_samples: usize) -> Result<Self> {
        let mut tri = vec![0.0; n_samples * n_samples];
        for i in 0..n_samples {
            for j in 0..i {
                tri[i * n_samples + j] = 1.0;
            }
        }
        Ok(CompositeConsts {
            n_samples,
            lower_strict: g.constant(n_samples, n_samples, tri)?,
            ones_row: g.constant(1, n_samples, vec![1.0; n_samples])?,
            neg_one: g.scalar(-1.0)?,
            one: g.scalar(1.0)?,
        })
    }
}

/// Graph handles of one composited ray.
pub struct RayNodes {
    pub c_l: Value,
    pub c_s: Value,
    pub s: Value,
    pub acc: Value,
    pub weights: Value,
}

/// Differentiable form of [`composite`]. `sigma` is `[n,1]`, `c_l` and `s`
/// are `[n,3]` over this ray's samples. Transmittance uses
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`, the same quantity as the product
/// recursion up to floating-point association.
pub fn composite_nodes(
    g: &mut Graph,
    consts: &CompositeConsts,
    sigma: Value,
    c_l: Value,
    s: Value,
    deltas: &[f64],
) -> Result<RayNodes> {
    let n = consts.n_samples;
    if deltas.len() != n {
        return Err(Error::invalid(format!("expected {n} deltas, got {}", deltas.len())));
    }
    let delta = g.constant(n, 1, deltas.to_vec())?;
    let od = g.mul(sigma, delta)?;
    let cum = g.matmul(consts.lower_strict, od)?;
    let neg_cum = g.mul(cum, consts.neg_one)?;
    let transmittance = g.exp(neg_cum)?;
    let neg_od = g.mul(od, consts.neg_one)?;
    let survive = g.exp(neg_od)?;
    let alpha = g.sub(consts.one, survive)?;
    let weights = g.mul(transmittance, alpha)?;

    let wc = g.mul(weights, c_l)?;
    let c_l_out = g.matmul(consts.ones_row, wc)?;
    let ws = g.mul(weights, s)?;
    let s_out = g.matmul(consts.ones_row, ws)?;
    let restored = g.mul(c_l, s)?;
    let wr = g.mul(weights, restored)?;
    let c_s_out = g.matmul(consts.ones_row, wr)?;
    let acc = g.sum(weights)?;

    Ok(RayNodes { c_l: c_l_out, c_s: c_s_out, s: s_out, acc, weights })
}
