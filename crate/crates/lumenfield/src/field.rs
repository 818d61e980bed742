//! The scene representation: sinusoidal input encoding, a density/feature
//! trunk conditioned on sample position, a low-light color head, and a
//! sensor-response head predicting per-channel von Kries gains.
//!
//! Density depends on position only. The trunk feature, concatenated with the
//! encoded view direction, feeds both heads, so color and response are
//! view-dependent. The response is kept strictly positive and bounded:
//! `s = min(softplus(raw) + s_floor, s_max)`, expressed through relu so the
//! clamp stays on the tape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

/// Frequency counts for the positional encoding of positions and directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
}

impl EncodingConfig {
    pub fn position_len(&self) -> usize {
        3 + 6 * self.position_frequencies
    }

    pub fn direction_len(&self) -> usize {
        3 + 6 * self.direction_frequencies
    }
}

/// `[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p)]`,
/// each block applied componentwise to the 3-vector.
pub fn encode(p: [f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    encode_into(p, frequencies, &mut out);
    out
}

pub fn encode_into(p: [f64; 3], frequencies: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&p);
    if frequencies == 0 {
        return;
    }
    // one sin/cos pair per coordinate; higher octaves by angle doubling
    let mut sin = [0.0f64; 3];
    let mut cos = [0.0f64; 3];
    for k in 0..3 {
        let (s, c) = (std::f64::consts::PI * p[k]).sin_cos();
        sin[k] = s;
        cos[k] = c;
    }
    out.extend_from_slice(&sin);
    out.extend_from_slice(&cos);
    for _ in 1..frequencies {
        for k in 0..3 {
            let (s, c) = (sin[k], cos[k]);
            sin[k] = 2.0 * s * c;
            cos[k] = c * c - s * s;
        }
        out.extend_from_slice(&sin);
        out.extend_from_slice(&cos);
    }
}

/// One dense layer; `w` is stored input-major as `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-lim..lim)).collect();
        Linear {
            w: Tensor::from_vec(vec![fan_in, fan_out], w).expect("finite init").with_grad(),
            b: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }

    /// Fused dense layer, optionally through relu.
    fn apply(&self, g: &mut Graph, ids: &LinearLeaves, x: Value, relu: bool) -> Result<Value> {
        Ok(g.linear(x, ids.w, ids.b, relu)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearLeaves {
    pub w: Value,
    pub b: Value,
}

/// Architecture and response parameterization knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub head_width: usize,
    pub s_floor: f64,
    pub s_max: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: EncodingConfig { position_frequencies: 6, direction_frequencies: 2 },
            trunk_layers: 4,
            trunk_width: 64,
            head_width: 64,
            s_floor: 1e-2,
            s_max: 100.0,
        }
    }
}

/// All learnable weights: trunk, density projection, color head and
/// response head.
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub trunk: Vec<Linear>,
    pub sigma: Linear,
    pub color: [Linear; 2],
    pub response: [Linear; 2],
}

/// Leaf ids of every parameter tensor on a graph, in canonical order.
pub struct FieldLeaves {
    pub trunk: Vec<LinearLeaves>,
    pub sigma: LinearLeaves,
    pub color: [LinearLeaves; 2],
    pub response: [LinearLeaves; 2],
}

/// Per-sample network outputs on a graph. All are `[n, .]` nodes over the
/// batch of sample points.
pub struct FieldNodes {
    pub sigma: Value,
    pub h: Value,
    pub c_l: Value,
    pub s: Value,
}

/// Network outputs at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutput {
    pub sigma: f64,
    pub h: Vec<f64>,
    pub c_l: [f64; 3],
    pub s: [f64; 3],
}

/// Encoded sample batch ready to enter the graph. `enc_d` carries one row per
/// sample (rays repeat their direction across samples).
pub struct PointBatch {
    pub count: usize,
    pub enc_x: Vec<f64>,
    pub enc_d: Vec<f64>,
}

impl PointBatch {
    pub fn new(config: &EncodingConfig, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Self {
        assert_eq!(points.len(), dirs.len());
        let mut enc_x = Vec::with_capacity(points.len() * config.position_len());
        let mut enc_d = Vec::with_capacity(dirs.len() * config.direction_len());
        for p in points {
            encode_into(*p, config.position_frequencies, &mut enc_x);
        }
        for d in dirs {
            encode_into(*d, config.direction_frequencies, &mut enc_d);
        }
        PointBatch { count: points.len(), enc_x, enc_d }
    }

    /// Batch where samples arrive in per-ray groups sharing one direction;
    /// each direction is encoded once and its row repeated.
    pub fn from_ray_groups(
        config: &EncodingConfig,
        points: &[[f64; 3]],
        ray_dirs: &[[f64; 3]],
        samples_per_ray: usize,
    ) -> Self {
        assert_eq!(points.len(), ray_dirs.len() * samples_per_ray);
        let mut enc_x = Vec::with_capacity(points.len() * config.position_len());
        for p in points {
            encode_into(*p, config.position_frequencies, &mut enc_x);
        }
        let dir_len = config.direction_len();
        let mut enc_d = Vec::with_capacity(points.len() * dir_len);
        let mut one = Vec::with_capacity(dir_len);
        for d in ray_dirs {
            one.clear();
            encode_into(*d, config.direction_frequencies, &mut one);
            for _ in 0..samples_per_ray {
                enc_d.extend_from_slice(&one);
            }
        }
        PointBatch { count: points.len(), enc_x, enc_d }
    }
}

impl FieldParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoding;
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        let mut fan_in = enc.position_len();
        for _ in 0..config.trunk_layers {
            trunk.push(Linear::init(&mut rng, fan_in, config.trunk_width));
            fan_in = config.trunk_width;
        }
        let sigma = Linear::init(&mut rng, config.trunk_width, 1);
        let head_in = config.trunk_width + enc.direction_len();
        let color = [
            Linear::init(&mut rng, head_in, config.head_width),
            Linear::init(&mut rng, config.head_width, 3),
        ];
        let response = [
            Linear::init(&mut rng, head_in, config.head_width),
            Linear::init(&mut rng, config.head_width, 3),
        ];
        FieldParams { config, trunk, sigma, color, response }
    }

    /// Canonical (name, tensor) pairs, the checkpoint serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.w"), &layer.w));
            out.push((format!("trunk.{i}.b"), &layer.b));
        }
        out.push(("sigma.w".to_string(), &self.sigma.w));
        out.push(("sigma.b".to_string(), &self.sigma.b));
        for (name, head) in [("color", &self.color), ("response", &self.response)] {
            for (i, layer) in head.iter().enumerate() {
                out.push((format!("{name}.{i}.w"), &layer.w));
                out.push((format!("{name}.{i}.b"), &layer.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.w"), &mut layer.w));
            out.push((format!("trunk.{i}.b"), &mut layer.b));
        }
        out.push(("sigma.w".to_string(), &mut self.sigma.w));
        out.push(("sigma.b".to_string(), &mut self.sigma.b));
        for (name, head) in [("color", &mut self.color), ("response", &mut self.response)] {
            for (i, layer) in head.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.w"), &mut layer.w));
                out.push((format!("{name}.{i}.b"), &mut layer.b));
            }
        }
        out
    }

    /// Rebuilds params from named tensors (checkpoint load).
    pub fn from_named(config: FieldConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut params = FieldParams::init(config, 0);
        let mut replaced = 0usize;
        for (name, slot) in params.named_tensors_mut() {
            let found = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint missing tensor {name}")))?;
            if found.1.shape() != slot.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    slot.shape()
                )));
            }
            *slot = found.1.clone().with_grad();
            replaced += 1;
        }
        debug_assert_eq!(replaced, params.named_tensors().len());
        Ok(params)
    }

    /// Inserts every parameter as a leaf on the graph.
    pub fn leaves(&self, g: &mut Graph) -> Result<FieldLeaves> {
        self.leaves_with_override(g, None)
    }

    /// Like [`FieldParams::leaves`] but substituting an existing graph value
    /// for the tensor at canonical index `override_slot` — the hook the
    /// per-parameter finite-difference checks are built on.
    pub fn leaves_with_override(
        &self,
        g: &mut Graph,
        override_slot: Option<(usize, Value)>,
    ) -> Result<FieldLeaves> {
        let mut slot = 0usize;
        let mut insert = |g: &mut Graph, layer: &Linear| -> Result<LinearLeaves> {
            let mut pick = |g: &mut Graph, t: &Tensor| -> Result<Value> {
                let v = match override_slot {
                    Some((idx, val)) if idx == slot => val,
                    _ => g.leaf(t)?,
                };
                slot += 1;
                Ok(v)
            };
            Ok(LinearLeaves { w: pick(g, &layer.w)?, b: pick(g, &layer.b)? })
        };
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            trunk.push(insert(g, layer)?);
        }
        let sigma = insert(g, &self.sigma)?;
        let color = [insert(g, &self.color[0])?, insert(g, &self.color[1])?];
        let response = [insert(g, &self.response[0])?, insert(g, &self.response[1])?];
        Ok(FieldLeaves { trunk, sigma, color, response })
    }

    /// Runs the field networks over an encoded batch. With `response_frozen`
    /// the response head is bypassed and `s` is the constant 1 (the
    /// RawNeRF-style ablation).
    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &FieldLeaves,
        batch: &PointBatch,
        response_frozen: bool,
    ) -> Result<FieldNodes> {
        let n = batch.count;
        let enc = &self.config.encoding;
        let x = g.constant(n, enc.position_len(), batch.enc_x.clone())?;

        let mut h = x;
        for (layer, ids) in self.trunk.iter().zip(&leaves.trunk) {
            h = layer.apply(g, ids, h, true)?;
        }
        let sigma_raw = self.sigma.apply(g, &leaves.sigma, h, false)?;
        let sigma = g.softplus(sigma_raw)?;

        let d = g.constant(n, enc.direction_len(), batch.enc_d.clone())?;
        let hd = g.concat_cols(h, d)?;

        let c_hidden = self.color[0].apply(g, &leaves.color[0], hd, true)?;
        let c_raw = self.color[1].apply(g, &leaves.color[1], c_hidden, false)?;
        let c_l = g.sigmoid(c_raw)?;

        let s = if response_frozen {
            g.constant(n, 3, vec![1.0; n * 3])?
        } else {
            let r_hidden = self.response[0].apply(g, &leaves.response[0], hd, true)?;
            let s_raw = self.response[1].apply(g, &leaves.response[1], r_hidden, false)?;
            let sp = g.softplus(s_raw)?;
            let floor = g.scalar(self.config.s_floor)?;
            let s_pos = g.add(sp, floor)?;
            // min(s_pos, s_max) through relu keeps the clamp differentiable
            let s_max = g.scalar(self.config.s_max)?;
            let over = g.sub(s_max, s_pos)?;
            let over = g.relu(over)?;
            g.sub(s_max, over)?
        };

        Ok(FieldNodes { sigma, h, c_l, s })
    }

    /// Evaluates the field at one point. `d` must be unit length within 1e-6.
    pub fn eval_point(&self, x: [f64; 3], d: [f64; 3]) -> Result<PointOutput> {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("direction norm {norm} is not unit within 1e-6")));
        }
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g)?;
        let batch = PointBatch::new(&self.config.encoding, &[x], &[d]);
        let nodes = self.forward(&mut g, &leaves, &batch, false)?;
        let c = g.value(nodes.c_l);
        let s = g.value(nodes.s);
        Ok(PointOutput {
            sigma: g.value(nodes.sigma)[0],
            h: g.value(nodes.h).to_vec(),
            c_l: [c[0], c[1], c[2]],
            s: [s[0], s[1], s[2]],
        })
    }
}

/// Applies the diagonal response to a low-light color: `c_s = c_l * diag(s)`.
pub fn restore_color(c_l: [f64; 3], s: [f64; 3]) -> [f64; 3] {
    [c_l[0] * s[0], c_l[1] * s[1], c_l[2] * s[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_zero_point() {
        let e = encode([0.0, 0.0, 0.0], 2);
        assert_eq!(e.len(), 3 + 6 * 2);
        assert_eq!(&e[0..3], &[0.0, 0.0, 0.0]);
        // per frequency: three sin slots then three cos slots
        for f in 0..2 {
            for c in 0..3 {
                assert_eq!(e[3 + 6 * f + c], 0.0, "sin slot");
                assert_eq!(e[3 + 6 * f + 3 + c], 1.0, "cos slot");
            }
        }
    }

    #[test]
    fn encode_without_frequencies_is_identity() {
        let e = encode([0.3, -0.7, 1.4], 0);
        assert_eq!(e, vec![0.3, -0.7, 1.4]);
    }

    #[test]
    fn encode_unit_x_first_frequency() {
        let e = encode([1.0, 0.0, 0.0], 1);
        // sin(pi) and cos(pi) land in the first-coordinate slots
        assert!(e[3].abs() < 1e-12);
        assert!((e[6] + 1.0).abs() < 1e-12);
    }

    fn small_params(seed: u64) -> FieldParams {
        let config = FieldConfig {
            encoding: EncodingConfig { position_frequencies: 2, direction_frequencies: 1 },
            trunk_layers: 2,
            trunk_width: 8,
            head_width: 8,
            ..FieldConfig::default()
        };
        FieldParams::init(config, seed)
    }

    #[test]
    fn zeroed_color_final_layer_gives_half_gray() {
        let mut params = small_params(3);
        params.color[1].w = Tensor::zeros(vec![8, 3]).with_grad();
        params.color[1].b = Tensor::zeros(vec![3]).with_grad();
        let out = params.eval_point([0.2, -0.1, 0.4], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.c_l, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn zeroed_response_final_layer_gives_uniform_floor_shifted_softplus() {
        let mut params = small_params(4);
        params.response[1].w = Tensor::zeros(vec![8, 3]).with_grad();
        params.response[1].b = Tensor::zeros(vec![3]).with_grad();
        let out = params.eval_point([0.0, 0.3, -0.2], [0.0, 1.0, 0.0]).unwrap();
        let want = 2.0f64.ln() + params.config.s_floor;
        for k in 0..3 {
            assert!((out.s[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_point_is_deterministic() {
        let params = small_params(5);
        let a = params.eval_point([0.1, 0.2, 0.3], [0.0, 0.0, 1.0]).unwrap();
        let b = params.eval_point([0.1, 0.2, 0.3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn density_is_view_independent() {
        let params = small_params(6);
        let inv = 1.0 / 3.0f64.sqrt();
        let a = params.eval_point([0.4, -0.3, 0.9], [0.0, 0.0, 1.0]).unwrap();
        let b = params.eval_point([0.4, -0.3, 0.9], [inv, inv, inv]).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.h, b.h);
        assert!(a.c_l != b.c_l || a.s != b.s || a.c_l == b.c_l); // heads may differ

        let err = params.eval_point([0.0; 3], [0.0, 0.0, 1.1]).unwrap_err();
        assert!(err.to_string().contains("not unit"));
    }

    #[test]
    fn response_respects_floor_and_cap() {
        let params = small_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0f64..1.0)];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            d = [d[0] / n, d[1] / n, d[2] / n];
            let out = params.eval_point(x, d).unwrap();
            for k in 0..3 {
                assert!(out.s[k] >= params.config.s_floor - 1e-12, "floor breached: {}", out.s[k]);
                assert!(out.s[k] <= params.config.s_max, "cap breached: {}", out.s[k]);
            }
        }
    }

    #[test]
    fn restore_color_identity_and_product() {
        assert_eq!(restore_color([0.2, 0.3, 0.4], [1.0, 1.0, 1.0]), [0.2, 0.3, 0.4]);
        let got = restore_color([0.1, 0.1, 0.1], [2.0, 1.0, 0.5]);
        assert!((got[0] - 0.2).abs() < 1e-15);
        assert!((got[1] - 0.1).abs() < 1e-15);
        assert!((got[2] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn restore_color_matches_scalar_loop_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let s = [rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0)];
            let got = restore_color(c, s);
            for k in 0..3 {
                assert_eq!(got[k], c[k] * s[k]);
            }
        }
    }

    #[test]
    fn restore_color_is_bilinear() {
        let c = [0.2, 0.4, 0.6];
        let s = [1.5, 0.7, 2.0];
        let double_c = restore_color([2.0 * c[0], 2.0 * c[1], 2.0 * c[2]], s);
        let double_s = restore_color(c, [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]]);
        let base = restore_color(c, s);
        for k in 0..3 {
            assert!((double_c[k] - 2.0 * base[k]).abs() < 1e-15);
            assert!((double_s[k] - 2.0 * base[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn named_tensors_round_trip_through_from_named() {
        let params = small_params(8);
        let named: Vec<(String, Tensor)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let rebuilt = FieldParams::from_named(params.config, &named).unwrap();
        for ((n1, t1), (n2, t2)) in params.named_tensors().iter().zip(rebuilt.named_tensors().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }
}
