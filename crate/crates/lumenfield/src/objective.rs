//! The three training losses and their weighted total, plus the
//! auto-exposure gain.
//!
//! All losses are built on the autodiff graph over per-ray composited nodes.
//! The chromatic-adaptation target `K_avg / C_bar_k` is a batch statistic
//! computed outside the graph and injected as a constant, so no gradient
//! flows through the channel means; that forecloses the degenerate solution
//! of dimming the rendered colors to move the target.
//!
//! The smoothness term divides vertical response differences by horizontal
//! color differences and vice versa, exactly as the cross-pairing is printed
//! in the source formulation; `LossConfig::cross_pairing = false` switches to
//! the same-direction variant for ablation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    pub epsilon_prime: f64,
    pub target_mean: f64,
    pub alpha_max: f64,
    pub s_patch: usize,
    pub cross_pairing: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            gamma1: 1.0,
            gamma2: 1.0,
            epsilon: 1e-4,
            epsilon_prime: 1e-3,
            target_mean: 0.4,
            alpha_max: 100.0,
            s_patch: 2,
            cross_pairing: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("smoothness epsilon must be positive"));
        }
        if self.epsilon_prime <= 0.0 {
            return Err(Error::invalid("tone-map epsilon_prime must be positive"));
        }
        if self.s_patch < 2 {
            return Err(Error::invalid("s_patch must be at least 2"));
        }
        Ok(())
    }
}

/// Per-step loss values; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub ca: f64,
    pub smooth: f64,
    pub total: f64,
}

pub fn total_loss(data: f64, ca: f64, smooth: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        data,
        ca,
        smooth,
        total: cfg.lambda1 * data + cfg.lambda2 * ca + cfg.lambda3 * smooth,
    }
}

/// Sum over rays of per-channel squared log-tone-mapped error:
/// `sum_r sum_k (psi(C_l) - psi(C_GT))^2` with `psi(y) = log(y + eps')`.
/// The caller divides by `3 * N` (mean over rays and channels), which lets
/// a batch be assembled from per-chunk partial sums.
pub fn data_loss_sum_nodes(
    g: &mut Graph,
    c_l_rays: &[Value],
    gt: &[[f64; 3]],
    epsilon_prime: f64,
) -> Result<Value> {
    if c_l_rays.len() != gt.len() {
        return Err(Error::invalid("data loss: ray/ground-truth count mismatch"));
    }
    let eps = g.scalar(epsilon_prime)?;
    let mut acc: Option<Value> = None;
    for (ray, gt_rgb) in c_l_rays.iter().zip(gt) {
        if gt_rgb.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("data loss: ground truth must be nonnegative"));
        }
        let psi_gt: Vec<f64> = gt_rgb.iter().map(|v| (v + epsilon_prime).ln()).collect();
        let psi_gt = g.constant(1, 3, psi_gt)?;
        let shifted = g.add(*ray, eps)?;
        let psi = g.log(shifted)?;
        let diff = g.sub(psi, psi_gt)?;
        let sq = g.square(diff)?;
        let term = g.sum(sq)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("data loss needs at least one ray"))
}

/// Mean-normalized data loss for a whole batch in one graph.
pub fn data_loss_nodes(
    g: &mut Graph,
    c_l_rays: &[Value],
    gt: &[[f64; 3]],
    epsilon_prime: f64,
) -> Result<Value> {
    let sum = data_loss_sum_nodes(g, c_l_rays, gt, epsilon_prime)?;
    let scale = g.scalar(1.0 / (3.0 * c_l_rays.len() as f64))?;
    Ok(g.mul(sum, scale)?)
}

/// Channel means of rendered colors over a batch, accumulated in ray order.
pub fn batch_channel_means(c_l: &[[f64; 3]]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    for rgb in c_l {
        for k in 0..3 {
            sums[k] += rgb[k];
        }
    }
    let n = c_l.len() as f64;
    [sums[0] / n, sums[1] / n, sums[2] / n]
}

/// Gray-world targets `K_avg / C_bar_k` from batch channel means.
pub fn chromatic_targets(channel_means: [f64; 3]) -> Result<[f64; 3]> {
    if channel_means.iter().any(|m| *m <= 0.0) {
        return Err(Error::invalid(format!(
            "chromatic adaptation needs positive channel means, got {channel_means:?}"
        )));
    }
    let k_avg = (channel_means[0] + channel_means[1] + channel_means[2]) / 3.0;
    Ok([
        k_avg / channel_means[0],
        k_avg / channel_means[1],
        k_avg / channel_means[2],
    ])
}

/// Chromatic adaptation loss over rays:
/// `(1/3) sum_r sum_k (target_k - S_k(r))^2`, targets held constant.
pub fn ca_loss_nodes(g: &mut Graph, s_rays: &[Value], targets: [f64; 3]) -> Result<Value> {
    if s_rays.is_empty() {
        return Err(Error::invalid("chromatic adaptation loss needs at least one ray"));
    }
    let target = g.constant(1, 3, targets.to_vec())?;
    let mut acc: Option<Value> = None;
    for s in s_rays {
        let diff = g.sub(target, *s)?;
        let sq = g.square(diff)?;
        let term = g.sum(sq)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let third = g.scalar(1.0 / 3.0)?;
    Ok(g.mul(acc.expect("nonempty"), third)?)
}

/// A rectangular block of per-ray nodes, row-major; `s` are integrated
/// response nodes and `c` the rendered low-light colors, each `[1,3]`.
pub struct PatchNodes<'a> {
    pub s: &'a [Value],
    pub c: &'a [Value],
    pub rows: usize,
    pub cols: usize,
}

/// Local smoothness over one patch. For every pixel with both a forward
/// vertical and horizontal neighbor, with channel-summed squared differences:
/// `gamma1 * |S_v|^2 / (|C_h|^2 + eps) + gamma2 * |S_h|^2 / (|C_v|^2 + eps)`
/// (cross-paired); the same-direction variant pairs S_v with C_v and S_h
/// with C_h.
pub fn smoothness_loss_nodes(g: &mut Graph, patch: &PatchNodes, cfg: &LossConfig) -> Result<Value> {
    if patch.rows < 2 || patch.cols < 2 {
        return Err(Error::invalid(format!(
            "smoothness patch must be at least 2x2, got {}x{}",
            patch.rows, patch.cols
        )));
    }
    if patch.s.len() != patch.rows * patch.cols || patch.c.len() != patch.s.len() {
        return Err(Error::invalid("smoothness patch node count mismatch"));
    }
    let eps = g.scalar(cfg.epsilon)?;
    let gamma1 = g.scalar(cfg.gamma1)?;
    let gamma2 = g.scalar(cfg.gamma2)?;
    let at = |i: usize, j: usize| i * patch.cols + j;

    let ssq_diff = |g: &mut Graph, a: Value, b: Value| -> Result<Value> {
        let d = g.sub(b, a)?;
        let sq = g.square(d)?;
        Ok(g.sum(sq)?)
    };

    let mut acc: Option<Value> = None;
    for i in 0..patch.rows - 1 {
        for j in 0..patch.cols - 1 {
            let s_v = ssq_diff(g, patch.s[at(i, j)], patch.s[at(i + 1, j)])?;
            let s_h = ssq_diff(g, patch.s[at(i, j)], patch.s[at(i, j + 1)])?;
            let c_v = ssq_diff(g, patch.c[at(i, j)], patch.c[at(i + 1, j)])?;
            let c_h = ssq_diff(g, patch.c[at(i, j)], patch.c[at(i, j + 1)])?;
            let (den_for_v, den_for_h) = if cfg.cross_pairing { (c_h, c_v) } else { (c_v, c_h) };

            let dv = g.add(den_for_v, eps)?;
            let tv = g.div(s_v, dv)?;
            let tv = g.mul(tv, gamma1)?;
            let dh = g.add(den_for_h, eps)?;
            let th = g.div(s_h, dh)?;
            let th = g.mul(th, gamma2)?;
            let term = g.add(tv, th)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
    }
    Ok(acc.expect("patch has at least one interior pair"))
}

/// Exposure gain `alpha = target_mean / mean(C_s)`, clamped to
/// `[1, alpha_max]`. Computed once per rendered image.
pub fn auto_exposure_gain(c_s_mean: f64, cfg: &LossConfig) -> Result<f64> {
    if !(c_s_mean > 0.0) {
        return Err(Error::invalid(format!("auto exposure needs positive mean luminance, got {c_s_mean}")));
    }
    Ok((cfg.target_mean / c_s_mean).clamp(1.0, cfg.alpha_max))
}

/// Mean over all pixels and channels of an RGB buffer.
pub fn image_mean(pixels: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0;
    for p in pixels {
        sum += p[0] + p[1] + p[2];
    }
    sum / (3.0 * pixels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray_consts(g: &mut Graph, rgbs: &[[f64; 3]]) -> Vec<Value> {
        rgbs.iter().map(|rgb| g.constant(1, 3, rgb.to_vec()).unwrap()).collect()
    }

    /// Scalar oracle for the data loss.
    fn data_loss_oracle(c_l: &[[f64; 3]], gt: &[[f64; 3]], eps: f64) -> f64 {
        let mut sum = 0.0;
        for (a, b) in c_l.iter().zip(gt) {
            for k in 0..3 {
                let d = (a[k] + eps).ln() - (b[k] + eps).ln();
                sum += d * d;
            }
        }
        sum / (3.0 * c_l.len() as f64)
    }

    #[test]
    fn data_loss_zero_at_equality() {
        let mut g = Graph::new();
        let rgbs = [[0.2, 0.4, 0.6], [0.01, 0.02, 0.03]];
        let rays = ray_consts(&mut g, &rgbs);
        let loss = data_loss_nodes(&mut g, &rays, &rgbs, 1e-3).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
    }

    #[test]
    fn data_loss_matches_scalar_log_arithmetic() {
        let mut g = Graph::new();
        let c_l = [[0.1, 0.1, 0.1]];
        let gt = [[0.2, 0.2, 0.2]];
        let rays = ray_consts(&mut g, &c_l);
        let loss = data_loss_nodes(&mut g, &rays, &gt, 1e-3).unwrap();
        let want = data_loss_oracle(&c_l, &gt, 1e-3);
        assert!((g.value(loss)[0] - want).abs() < 1e-15);
        // per-channel value from the oracle: (log 0.101 - log 0.201)^2
        let per_channel = ((0.101f64).ln() - (0.201f64).ln()).powi(2);
        assert!((want - per_channel).abs() < 1e-15);
        assert!((per_channel - 0.4736).abs() < 1e-4);
    }

    #[test]
    fn data_loss_amplifies_dark_errors() {
        let eps = 1e-3;
        let h = 0.005;
        let psi = |y: f64| (y + eps).ln();
        assert!((psi(0.01 + h) - psi(0.01)).abs() > (psi(0.5 + h) - psi(0.5)).abs());
    }

    #[test]
    fn data_loss_scale_invariant_when_epsilon_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c_l: Vec<[f64; 3]> = (0..6)
            .map(|_| [rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)])
            .collect();
        let gt: Vec<[f64; 3]> = (0..6)
            .map(|_| [rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)])
            .collect();
        let base = data_loss_oracle(&c_l, &gt, 1e-3);
        let k = 4.0;
        let scale = |v: &[[f64; 3]]| -> Vec<[f64; 3]> {
            v.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect()
        };
        let scaled = data_loss_oracle(&scale(&c_l), &scale(&gt), 1e-3 * k);
        assert!((base - scaled).abs() < 1e-12, "{base} vs {scaled}");
    }

    #[test]
    fn chromatic_targets_and_zero_cases() {
        // exact target response zeroes the loss
        let means = [0.1, 0.2, 0.3];
        let targets = chromatic_targets(means).unwrap();
        let mut g = Graph::new();
        let s = ray_consts(&mut g, &[targets, targets]);
        let loss = ca_loss_nodes(&mut g, &s, targets).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);

        // gray batch with unit response
        let targets = chromatic_targets([0.25, 0.25, 0.25]).unwrap();
        assert_eq!(targets, [1.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let s = ray_consts(&mut g, &[[1.0, 1.0, 1.0]]);
        let loss = ca_loss_nodes(&mut g, &s, targets).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);

        assert!(chromatic_targets([0.1, 0.0, 0.2]).is_err());
    }

    #[test]
    fn ca_loss_single_ray_hand_case() {
        // C = (0.1, 0.2, 0.3), S = 1: K_avg = 0.2, targets (2, 1, 2/3)
        let targets = chromatic_targets(batch_channel_means(&[[0.1, 0.2, 0.3]])).unwrap();
        assert!((targets[0] - 2.0).abs() < 1e-15);
        assert!((targets[1] - 1.0).abs() < 1e-15);
        assert!((targets[2] - 2.0 / 3.0).abs() < 1e-15);
        let mut g = Graph::new();
        let s = ray_consts(&mut g, &[[1.0, 1.0, 1.0]]);
        let loss = ca_loss_nodes(&mut g, &s, targets).unwrap();
        // oracle: (1/3)((2-1)^2 + 0 + (2/3-1)^2) = 10/27
        let want = ((targets[0] - 1.0).powi(2) + (targets[1] - 1.0).powi(2) + (targets[2] - 1.0).powi(2)) / 3.0;
        assert!((g.value(loss)[0] - want).abs() < 1e-15);
        assert!((want - 10.0 / 27.0).abs() < 1e-15);
        assert!((want - 0.3704).abs() < 5e-5);
    }

    #[test]
    fn ca_loss_gradient_is_two_thirds_residual() {
        let targets = [2.0, 1.0, 2.0 / 3.0];
        let s0 = [1.3, 0.8, 1.1];
        let err = grad_check(
            move |g, s| ca_loss_nodes(g, &[s], targets),
            &Tensor::from_vec(vec![1, 3], s0.to_vec()).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "ca grad rel err {err}");

        // analytic form: 2 (S_k - target_k) / 3
        let mut g = Graph::new();
        let s = g.leaf(&Tensor::from_vec(vec![1, 3], s0.to_vec()).unwrap().with_grad()).unwrap();
        let loss = ca_loss_nodes(&mut g, &[s], targets).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(s).unwrap();
        for k in 0..3 {
            let want = 2.0 * (s0[k] - targets[k]) / 3.0;
            assert!((grad[k] - want).abs() < 1e-12);
        }
    }

    fn patch_2x2(g: &mut Graph, s: [[f64; 3]; 4], c: [[f64; 3]; 4]) -> (Vec<Value>, Vec<Value>) {
        (ray_consts(g, &s), ray_consts(g, &c))
    }

    #[test]
    fn smoothness_zero_for_constant_response() {
        let mut g = Graph::new();
        let cfg = LossConfig::default();
        let s = [[1.2, 0.9, 1.1]; 4];
        let c = [[0.1, 0.2, 0.3], [0.4, 0.1, 0.0], [0.2, 0.2, 0.2], [0.9, 0.5, 0.3]];
        let (s, c) = patch_2x2(&mut g, s, c);
        let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
        let loss = smoothness_loss_nodes(&mut g, &patch, &cfg).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
    }

    /// Single vertical pair with a 0.2 step in one response channel over a
    /// constant color patch: 0.04 / 1e-4 = 400.
    #[test]
    fn smoothness_single_pair_arithmetic() {
        let mut g = Graph::new();
        let cfg = LossConfig::default();
        let lo = [1.0, 1.0, 1.0];
        let hi = [1.2, 1.0, 1.0];
        // rows: (lo lo / hi hi) so S_h = 0 everywhere and S_v steps by 0.2 in R
        let s = [lo, lo, hi, hi];
        let c = [[0.3, 0.3, 0.3]; 4];
        let (s, c) = patch_2x2(&mut g, s, c);
        let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
        let loss = smoothness_loss_nodes(&mut g, &patch, &cfg).unwrap();
        let want = (0.2f64 * 0.2) / 1e-4; // oracle: S_v^2 / (C_h^2 + eps)
        assert!((g.value(loss)[0] - want).abs() < 1e-9, "{} vs {want}", g.value(loss)[0]);
    }

    #[test]
    fn smoothness_linear_in_gamma1() {
        let mut cfg = LossConfig::default();
        let s = [[1.0, 1.0, 1.0], [1.1, 0.9, 1.0], [1.3, 1.0, 0.8], [1.0, 1.2, 1.1]];
        let c = [[0.1, 0.4, 0.2], [0.3, 0.3, 0.1], [0.2, 0.5, 0.6], [0.7, 0.1, 0.2]];

        let eval = |cfg: &LossConfig| {
            let mut g = Graph::new();
            let (s, c) = patch_2x2(&mut g, s, c);
            let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
            let loss = smoothness_loss_nodes(&mut g, &patch, cfg).unwrap();
            g.value(loss)[0]
        };
        cfg.gamma2 = 0.0; // isolate the first summand
        let base = eval(&cfg);
        cfg.gamma1 *= 2.0;
        let doubled = eval(&cfg);
        assert_eq!(doubled, 2.0 * base);
    }

    #[test]
    fn smoothness_rejects_small_patches() {
        let mut g = Graph::new();
        let cfg = LossConfig::default();
        let s = ray_consts(&mut g, &[[1.0; 3], [1.0; 3]]);
        let c = ray_consts(&mut g, &[[0.1; 3], [0.1; 3]]);
        let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 1 };
        assert!(smoothness_loss_nodes(&mut g, &patch, &cfg).is_err());
    }

    #[test]
    fn smoothness_gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let c = [[0.31, 0.42, 0.23], [0.44, 0.15, 0.36], [0.27, 0.52, 0.61], [0.72, 0.13, 0.24]];
        let s0 = vec![1.0, 1.1, 0.9, 1.3, 1.2, 0.8, 0.95, 1.05, 1.15, 1.4, 0.7, 1.0];
        let err = grad_check(
            move |g, s_flat| {
                let s: Vec<Value> = (0..4).map(|i| g.slice_rows(s_flat, i, 1)).collect::<std::result::Result<_, _>>()?;
                let c = ray_consts(g, &c);
                let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
                smoothness_loss_nodes(g, &patch, &cfg)
            },
            &Tensor::from_vec(vec![4, 3], s0).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "smooth grad rel err {err}");
    }

    #[test]
    fn losses_invariant_to_ray_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rgbs: Vec<[f64; 3]> = (0..8)
            .map(|_| [rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9)])
            .collect();
        let gt = rgbs.iter().map(|p| [p[0] * 0.9, p[1] * 1.1, p[2]]).collect::<Vec<_>>();
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];

        let eval = |order: &[usize]| {
            let mut g = Graph::new();
            let c: Vec<[f64; 3]> = order.iter().map(|i| rgbs[*i]).collect();
            let gtp: Vec<[f64; 3]> = order.iter().map(|i| gt[*i]).collect();
            let rays = ray_consts(&mut g, &c);
            let dl = data_loss_nodes(&mut g, &rays, &gtp, 1e-3).unwrap();
            let targets = chromatic_targets(batch_channel_means(&c)).unwrap();
            let cl = ca_loss_nodes(&mut g, &rays, targets).unwrap();
            (g.value(dl)[0], g.value(cl)[0])
        };
        let identity: Vec<usize> = (0..8).collect();
        let (d1, c1) = eval(&identity);
        let (d2, c2) = eval(&perm);
        assert!((d1 - d2).abs() < 1e-12);
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn auto_exposure_examples() {
        let cfg = LossConfig::default();
        assert_eq!(auto_exposure_gain(cfg.target_mean, &cfg).unwrap(), 1.0);
        assert_eq!(auto_exposure_gain(0.04, &cfg).unwrap(), 10.0);
        assert_eq!(auto_exposure_gain(0.0004, &cfg).unwrap(), 100.0);
        assert!(auto_exposure_gain(0.0, &cfg).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = LossConfig::default();
        let b = total_loss(0.5, 0.2, 0.1, &cfg);
        assert!((b.total - 0.53).abs() < 1e-15);
        assert_eq!(b.data, 0.5);

        let ablated = LossConfig { lambda2: 0.0, lambda3: 0.0, ..cfg };
        let b = total_loss(0.5, 0.2, 0.1, &ablated);
        assert_eq!(b.total, 0.5);

        let b = total_loss(0.0, 0.0, 0.0, &cfg);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn data_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gt: Vec<[f64; 3]> = (0..8)
            .map(|_| [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)])
            .collect();
        let c0: Vec<f64> = (0..24).map(|_| rng.gen_range(0.01..0.9)).collect();
        let gtc = gt.clone();
        let err = grad_check(
            move |g, flat| {
                let rays: Vec<Value> = (0..8).map(|i| g.slice_rows(flat, i, 1)).collect::<std::result::Result<_, _>>()?;
                data_loss_nodes(g, &rays, &gtc, 1e-3)
            },
            &Tensor::from_vec(vec![8, 3], c0).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "data grad rel err {err}");
    }
}
