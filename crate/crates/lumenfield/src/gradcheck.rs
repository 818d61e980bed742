//! Finite-difference verification suites: autodiff primitives, the three
//! losses, and the full field-through-loss pipeline on a micro scene.
//! Shared by the `gradcheck` CLI command and the acceptance tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::field::{EncodingConfig, FieldConfig, FieldParams, PointBatch};
use crate::objective::{
    batch_channel_means, ca_loss_nodes, chromatic_targets, data_loss_nodes, smoothness_loss_nodes,
    LossConfig, PatchNodes,
};
use crate::render::{composite_nodes, sample_stratified, CompositeConsts, Ray};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn case(name: &str, err: f64, tolerance: f64) -> CaseResult {
    CaseResult { name: name.to_string(), max_rel_err: err, tolerance }
}

/// Random values in [-2, 2] keeping a margin away from the relu kink.
fn kink_free(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect()
}

/// Every differentiable primitive against central differences.
pub fn autodiff_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = Tensor::from_vec(vec![2, 3], kink_free(&mut rng, 6))?;
    let xp = Tensor::from_vec(vec![2, 3], x.data().iter().map(|v| v.abs() + 0.05).collect())?;
    let other: Vec<f64> = (0..6).map(|_| rng.gen_range(0.25..2.0)).collect();

    macro_rules! unary_case {
        ($name:literal, $input:expr, $method:ident) => {{
            let err = grad_check(
                |g: &mut Graph, v: Value| {
                    let e = g.$method(v)?;
                    g.sum(e)
                },
                $input,
                STEP,
            )?;
            out.push(case($name, err, PRIMITIVE_TOLERANCE));
        }};
    }
    unary_case!("exp", &x, exp);
    unary_case!("log", &xp, log);
    unary_case!("relu", &x, relu);
    unary_case!("sigmoid", &x, sigmoid);
    unary_case!("softplus", &x, softplus);
    unary_case!("square", &x, square);

    let err = grad_check(|g: &mut Graph, v: Value| g.mean(v), &x, STEP)?;
    out.push(case("mean", err, PRIMITIVE_TOLERANCE));
    let err = grad_check(|g: &mut Graph, v: Value| g.sum(v), &x, STEP)?;
    out.push(case("sum", err, PRIMITIVE_TOLERANCE));

    let oc = other.clone();
    let err = grad_check(
        move |g: &mut Graph, v: Value| {
            let o = g.constant(2, 3, oc.clone())?;
            let m = g.mul(v, o)?;
            let d = g.div(m, o)?;
            let a = g.add(d, o)?;
            let s = g.sub(a, o)?;
            g.sum(s)
        },
        &x,
        STEP,
    )?;
    out.push(case("add_sub_mul_div", err, PRIMITIVE_TOLERANCE));

    let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check(
        move |g: &mut Graph, v: Value| {
            let w = g.constant(3, 2, w.clone())?;
            let m = g.matmul(v, w)?;
            let sq = g.square(m)?;
            g.sum(sq)
        },
        &x,
        STEP,
    )?;
    out.push(case("matmul", err, PRIMITIVE_TOLERANCE));

    let err = grad_check(
        |g: &mut Graph, v: Value| {
            let row = g.slice_rows(v, 0, 1)?;
            let big = g.broadcast_to(row, 4, 3)?;
            let cat = g.concat_cols(big, big)?;
            let sq = g.square(cat)?;
            g.sum(sq)
        },
        &x,
        STEP,
    )?;
    out.push(case("broadcast_concat_slice", err, PRIMITIVE_TOLERANCE));

    Ok(out)
}

/// The three losses, differentiated with respect to their ray inputs.
pub fn loss_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let n_rays = 8;
    let gt: Vec<[f64; 3]> = (0..n_rays)
        .map(|_| [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)])
        .collect();
    let c0: Vec<f64> = (0..n_rays * 3).map(|_| rng.gen_range(0.01..0.8)).collect();
    let gtc = gt.clone();
    let eps = cfg.epsilon_prime;
    let err = grad_check(
        move |g: &mut Graph, flat: Value| {
            let rays: Vec<Value> =
                (0..n_rays).map(|i| g.slice_rows(flat, i, 1)).collect::<std::result::Result<_, _>>()?;
            data_loss_nodes(g, &rays, &gtc, eps)
        },
        &Tensor::from_vec(vec![n_rays, 3], c0)?,
        STEP,
    )?;
    out.push(case("data_loss", err, LOSS_TOLERANCE));

    let targets = chromatic_targets([0.04, 0.07, 0.05])?;
    let s0: Vec<f64> = (0..n_rays * 3).map(|_| rng.gen_range(0.2..2.5)).collect();
    let err = grad_check(
        move |g: &mut Graph, flat: Value| {
            let rays: Vec<Value> =
                (0..n_rays).map(|i| g.slice_rows(flat, i, 1)).collect::<std::result::Result<_, _>>()?;
            ca_loss_nodes(g, &rays, targets)
        },
        &Tensor::from_vec(vec![n_rays, 3], s0)?,
        STEP,
    )?;
    out.push(case("chromatic_adaptation_loss", err, LOSS_TOLERANCE));

    // smoothness, both through the response map and through the colors
    let c_patch: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8)])
        .collect();
    let s_patch: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..1.8)).collect();
    let (cp, lcfg) = (c_patch.clone(), cfg);
    let err = grad_check(
        move |g: &mut Graph, flat: Value| {
            let s: Vec<Value> = (0..4).map(|i| g.slice_rows(flat, i, 1)).collect::<std::result::Result<_, _>>()?;
            let c: Vec<Value> = cp.iter().map(|rgb| g.constant(1, 3, rgb.to_vec())).collect::<std::result::Result<_, _>>()?;
            let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
            smoothness_loss_nodes(g, &patch, &lcfg)
        },
        &Tensor::from_vec(vec![4, 3], s_patch.clone())?,
        STEP,
    )?;
    out.push(case("smoothness_loss_wrt_response", err, LOSS_TOLERANCE));

    let sp = s_patch.clone();
    let c_flat: Vec<f64> = c_patch.iter().flatten().copied().collect();
    let err = grad_check(
        move |g: &mut Graph, flat: Value| {
            let c: Vec<Value> = (0..4).map(|i| g.slice_rows(flat, i, 1)).collect::<std::result::Result<_, _>>()?;
            let s: Vec<Value> = sp
                .chunks(3)
                .map(|rgb| g.constant(1, 3, rgb.to_vec()))
                .collect::<std::result::Result<_, _>>()?;
            let patch = PatchNodes { s: &s, c: &c, rows: 2, cols: 2 };
            smoothness_loss_nodes(g, &patch, &lcfg)
        },
        &Tensor::from_vec(vec![4, 3], c_flat)?,
        STEP,
    )?;
    out.push(case("smoothness_loss_wrt_color", err, LOSS_TOLERANCE));

    Ok(out)
}

fn micro_field() -> FieldConfig {
    FieldConfig {
        encoding: EncodingConfig { position_frequencies: 1, direction_frequencies: 1 },
        trunk_layers: 2,
        trunk_width: 8,
        head_width: 8,
        ..FieldConfig::default()
    }
}

/// A fixed 2x2 patch of rays through a tiny camera.
fn micro_rays(seed: u64) -> (Vec<Ray>, Vec<crate::render::RaySample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut rays = Vec::new();
    let mut samples = Vec::new();
    for i in 0..4 {
        let spread = 0.08;
        let dir = crate::synthscene::normalize([
            spread * ((i % 2) as f64 - 0.5),
            spread * ((i / 2) as f64 - 0.5),
            1.0,
        ]);
        let ray = Ray::new([0.0, 0.0, -2.5], dir, 1.5, 3.5, (i / 2, i % 2)).expect("valid ray");
        samples.push(sample_stratified(&ray, 8, true, &mut rng));
        rays.push(ray);
    }
    (rays, samples)
}

/// Differentiates the composited outputs with respect to densities, and the
/// full training loss on a 4-ray micro scene with respect to every field
/// parameter tensor.
pub fn render_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut out = Vec::new();

    // composite chain alone
    let n = 8;
    let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.3)).collect();
    let c_l: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.1..0.9)).collect();
    let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.2..2.0)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..6.0)).collect();
    let (dl, cl, sv) = (deltas.clone(), c_l.clone(), s.clone());
    let err = grad_check(
        move |g: &mut Graph, sig: Value| -> Result<Value> {
            let consts = CompositeConsts::new(g, n)?;
            let c = g.constant(n, 3, cl.clone())?;
            let sm = g.constant(n, 3, sv.clone())?;
            let nodes = composite_nodes(g, &consts, sig, c, sm, &dl)?;
            let a = g.add(nodes.c_l, nodes.c_s)?;
            let b = g.add(a, nodes.s)?;
            Ok(g.sum(b)?)
        },
        &Tensor::from_vec(vec![n, 1], sigma)?,
        STEP,
    )?;
    out.push(case("composite_wrt_density", err, LOSS_TOLERANCE));

    // full loss on a micro scene, per parameter tensor
    let params = FieldParams::init(micro_field(), seed.wrapping_add(4));
    let (rays, samples) = micro_rays(seed);
    let gt: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1)])
        .collect();
    let loss_cfg = LossConfig::default();

    // chromatic targets from a plain forward pass, constants thereafter
    let mut base_graph = Graph::new();
    let (_, base_colors) =
        micro_loss_on_graph(&params, &mut base_graph, None, &rays, &samples, &gt, &loss_cfg, None)?;
    let targets = chromatic_targets(batch_channel_means(&base_colors))?;

    let named = params.named_tensors();
    let mut worst = 0.0f64;
    for (slot, (_name, tensor)) in named.iter().enumerate() {
        let p = params.clone();
        let (r, smp, gtc, lc) = (rays.clone(), samples.clone(), gt.clone(), loss_cfg);
        let err = grad_check(
            move |g: &mut Graph, v: Value| -> Result<Value> {
                let (root, _) = micro_loss_on_graph(&p, g, Some((slot, v)), &r, &smp, &gtc, &lc, Some(targets))?;
                Ok(root)
            },
            tensor,
            STEP,
        )?;
        worst = worst.max(err);
    }
    out.push(case("end_to_end_micro_loss", worst, LOSS_TOLERANCE));

    Ok(out)
}

/// Builds the full training loss for the micro scene on the given graph;
/// returns the loss node and the per-ray rendered colors.
#[allow(clippy::too_many_arguments)]
fn micro_loss_on_graph(
    params: &FieldParams,
    g: &mut Graph,
    override_slot: Option<(usize, Value)>,
    rays: &[Ray],
    samples: &[crate::render::RaySample],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
    targets: Option<[f64; 3]>,
) -> Result<(Value, Vec<[f64; 3]>)> {
    let leaves = params.leaves_with_override(g, override_slot)?;
    let n = samples[0].t_values.len();
    let consts = CompositeConsts::new(g, n)?;

    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for (ray, sample) in rays.iter().zip(samples) {
        points.extend_from_slice(&sample.points);
        dirs.push(ray.dir);
    }
    let batch = PointBatch::from_ray_groups(&params.config.encoding, &points, &dirs, n);
    let nodes = params.forward(g, &leaves, &batch, false)?;

    let mut cl_nodes = Vec::new();
    let mut s_nodes = Vec::new();
    let mut colors = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let sigma = g.slice_rows(nodes.sigma, i * n, n)?;
        let c_l = g.slice_rows(nodes.c_l, i * n, n)?;
        let s = g.slice_rows(nodes.s, i * n, n)?;
        let ray_nodes = composite_nodes(g, &consts, sigma, c_l, s, &sample.deltas)?;
        let v = g.value(ray_nodes.c_l);
        colors.push([v[0], v[1], v[2]]);
        cl_nodes.push(ray_nodes.c_l);
        s_nodes.push(ray_nodes.s);
    }

    let data = data_loss_nodes(g, &cl_nodes, gt, cfg.epsilon_prime)?;
    let l1 = g.scalar(cfg.lambda1)?;
    let mut total = g.mul(data, l1)?;
    if let Some(t) = targets {
        let ca = ca_loss_nodes(g, &s_nodes, t)?;
        let l2 = g.scalar(cfg.lambda2)?;
        let ca = g.mul(ca, l2)?;
        total = g.add(total, ca)?;
        let patch = PatchNodes { s: &s_nodes, c: &cl_nodes, rows: 2, cols: 2 };
        let smooth = smoothness_loss_nodes(g, &patch, cfg)?;
        let l3 = g.scalar(cfg.lambda3)?;
        let smooth = g.mul(smooth, l3)?;
        total = g.add(total, smooth)?;
    }
    Ok((total, colors))
}

pub fn all_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = autodiff_cases(seed)?;
    out.extend(loss_cases(seed)?);
    out.extend(render_cases(seed)?);
    Ok(out)
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CaseResult>> {
    match name {
        "all" => all_cases(seed),
        "autodiff" => autodiff_cases(seed),
        "losses" => loss_cases(seed),
        "render" => render_cases(seed),
        other => Err(Error::invalid(format!("unknown gradcheck case set '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_their_tolerances() {
        for result in all_cases(0).unwrap() {
            assert!(
                result.passed(),
                "{} failed: {} >= {}",
                result.name,
                result.max_rel_err,
                result.tolerance
            );
        }
    }

    #[test]
    fn suite_lookup_rejects_unknown_names() {
        assert!(run_suite("bogus", 0).is_err());
        assert!(run_suite("losses", 0).is_ok());
    }
}
