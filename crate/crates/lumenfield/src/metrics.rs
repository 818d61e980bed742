//! Full-reference quality metrics (PSNR, SSIM) and the response-recovery
//! score that checks the learned response map against the generator's
//! degradation oracle.
//!
//! Evaluation happens in the display domain: 8-bit renders against 8-bit
//! ground truth pushed through the same sRGB path.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rawproc::Image8;
use crate::synthscene::Degradation;

/// `10 log10(peak^2 / MSE)`; +inf for identical buffers.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("psnr needs two equal nonempty buffers"));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr_images(a: &Image8, b: &Image8) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid("psnr image dimensions differ"));
    }
    let af: Vec<f64> = a.data.iter().map(|v| *v as f64).collect();
    let bf: Vec<f64> = b.data.iter().map(|v| *v as f64).collect();
    psnr(&af, &bf, 255.0)
}

/// Mean local SSIM over sliding 8x8 uniform windows (stride 1, valid
/// placements), stabilizers `c1 = (0.01 peak)^2`, `c2 = (0.03 peak)^2`.
/// Inputs are grayscale buffers.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, peak: f64) -> Result<f64> {
    const WIN: usize = 8;
    if a.len() != width * height || b.len() != a.len() {
        return Err(Error::invalid("ssim buffer sizes do not match dimensions"));
    }
    if width < WIN || height < WIN {
        return Err(Error::invalid("ssim needs at least an 8x8 image"));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for row in 0..=height - WIN {
        for col in 0..=width - WIN {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let x = a[(row + i) * width + col + j];
                    let y = b[(row + i) * width + col + j];
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Channel-averaged grayscale of an 8-bit RGB image, in 0..255 units.
pub fn to_grayscale(image: &Image8) -> Vec<f64> {
    image
        .data
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

pub fn ssim_images(a: &Image8, b: &Image8) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid("ssim image dimensions differ"));
    }
    ssim(&to_grayscale(a), &to_grayscale(b), a.width, a.height, 255.0)
}

fn geometric_mean(v: [f64; 3]) -> f64 {
    (v[0] * v[1] * v[2]).cbrt()
}

/// Per-channel relative error between the learned mean response and the
/// oracle inverse degradation `1 / (dim * tint_k)`, after normalizing both
/// to unit geometric mean (the global scale is absorbed by the exposure
/// gain).
pub fn response_recovery_score(learned_mean: [f64; 3], degradation: &Degradation) -> Result<[f64; 3]> {
    if learned_mean.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid(format!("learned response means must be positive, got {learned_mean:?}")));
    }
    let oracle = [
        1.0 / (degradation.dim * degradation.tint[0]),
        1.0 / (degradation.dim * degradation.tint[1]),
        1.0 / (degradation.dim * degradation.tint[2]),
    ];
    let lg = geometric_mean(learned_mean);
    let og = geometric_mean(oracle);
    let mut err = [0.0; 3];
    for k in 0..3 {
        let l = learned_mean[k] / lg;
        let o = oracle[k] / og;
        err[k] = (l - o).abs() / o;
    }
    Ok(err)
}

/// Per-view evaluation record. `psnr_db` is `None` for identical images
/// (the +inf sentinel has no JSON encoding).
#[derive(Debug, Clone, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    /// Channel-mean ratios render / ground truth.
    pub mean_gain: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    pub response_recovery: Option<[f64; 3]>,
}

impl MetricReport {
    pub fn from_views(views: Vec<ViewMetrics>, response_recovery: Option<[f64; 3]>) -> Self {
        let finite: Vec<f64> = views.iter().filter_map(|v| v.psnr_db).collect();
        let mean_psnr_db = if finite.len() == views.len() && !views.is_empty() {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        } else {
            None // at least one infinite (or no) view
        };
        let mean_ssim = if views.is_empty() {
            0.0
        } else {
            views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64
        };
        MetricReport { views, mean_psnr_db, mean_ssim, response_recovery }
    }
}

pub fn channel_means_u8(image: &Image8) -> [f64; 3] {
    let mut sums = [0.0; 3];
    for p in image.data.chunks_exact(3) {
        for k in 0..3 {
            sums[k] += p[k] as f64;
        }
    }
    let n = (image.data.len() / 3) as f64;
    [sums[0] / n, sums[1] / n, sums[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 64];
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        // MSE 0.01 at peak 1 is 20 dB
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());

        let mut pa = a.clone();
        let mut pb = b.clone();
        pa.reverse();
        pb.reverse();
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr(&pa, &pb, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..255.0)).collect();
        let got = ssim(&a, &a, 16, 16, 255.0).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negative_image_is_nonpositive() {
        // checkerboard around 0.5: every window is zero-mean against 1 - a
        let mut a = vec![0.0; 16 * 16];
        for row in 0..16 {
            for col in 0..16 {
                a[row * 16 + col] = if (row + col) % 2 == 0 { 0.8 } else { 0.2 };
            }
        }
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let got = ssim(&a, &b, 16, 16, 1.0).unwrap();
        assert!(got <= 0.0, "ssim {got}");
    }

    /// Independent scalar reference: two-pass moments per window
    /// (explicit centered sums rather than E[x^2] - mu^2).
    fn ssim_reference(a: &[f64], b: &[f64], width: usize, height: usize, peak: f64) -> f64 {
        const WIN: usize = 8;
        let c1 = (0.01 * peak) * (0.01 * peak);
        let c2 = (0.03 * peak) * (0.03 * peak);
        let mut vals = Vec::new();
        for row in 0..=height - WIN {
            for col in 0..=width - WIN {
                let idx = |i: usize, j: usize| (row + i) * width + col + j;
                let n = (WIN * WIN) as f64;
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for i in 0..WIN {
                    for j in 0..WIN {
                        mu_a += a[idx(i, j)] / n;
                        mu_b += b[idx(i, j)] / n;
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for i in 0..WIN {
                    for j in 0..WIN {
                        let da = a[idx(i, j)] - mu_a;
                        let db = b[idx(i, j)] - mu_b;
                        var_a += da * da / n;
                        var_b += db * db / n;
                        cov += da * db / n;
                    }
                }
                vals.push(
                    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_independent_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..20 * 12).map(|_| rng.gen_range(0.0..255.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| (v * 0.9 + 10.0).min(255.0)).collect();
        let got = ssim(&a, &b, 20, 12, 255.0).unwrap();
        let want = ssim_reference(&a, &b, 20, 12, 255.0);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..12 * 12).map(|_| rng.gen_range(0.0..255.0)).collect();
        let b: Vec<f64> = (0..12 * 12).map(|_| rng.gen_range(0.0..255.0)).collect();
        let xy = ssim(&a, &b, 12, 12, 255.0).unwrap();
        let yx = ssim(&b, &a, 12, 12, 255.0).unwrap();
        assert!((xy - yx).abs() < 1e-12);
    }

    fn test_degradation() -> Degradation {
        Degradation { dim: 0.05, tint: [0.7, 1.0, 1.3], beta: 0.0, delta: 0.0 }
    }

    #[test]
    fn response_score_zero_when_learned_matches_oracle_up_to_scale() {
        let d = test_degradation();
        let oracle = [1.0 / (d.dim * d.tint[0]), 1.0 / (d.dim * d.tint[1]), 1.0 / (d.dim * d.tint[2])];
        // arbitrary global scale
        let learned = [oracle[0] * 0.37, oracle[1] * 0.37, oracle[2] * 0.37];
        let err = response_recovery_score(learned, &d).unwrap();
        for k in 0..3 {
            assert!(err[k] < 1e-12, "{err:?}");
        }
    }

    #[test]
    fn response_score_single_channel_perturbation() {
        let d = test_degradation();
        let oracle = [1.0 / (d.dim * d.tint[0]), 1.0 / (d.dim * d.tint[1]), 1.0 / (d.dim * d.tint[2])];
        let learned = [oracle[0] * 1.1, oracle[1], oracle[2]];
        let err = response_recovery_score(learned, &d).unwrap();
        // oracle applied by hand: scaling one channel by f moves it to
        // f^(2/3) - 1 and the others to 1 - f^(-1/3) after geo-normalization
        let f: f64 = 1.1;
        let want0 = f.powf(2.0 / 3.0) - 1.0;
        let want_other = 1.0 - f.powf(-1.0 / 3.0);
        assert!((err[0] - want0).abs() < 1e-12, "{err:?}");
        assert!((err[1] - want_other).abs() < 1e-12);
        assert!((err[2] - want_other).abs() < 1e-12);
    }

    #[test]
    fn response_score_of_unit_response_is_normalized_tint_deviation() {
        let d = test_degradation();
        let err = response_recovery_score([1.0, 1.0, 1.0], &d).unwrap();
        // arithmetic straight from the manifest record
        let oracle = [1.0 / (d.dim * d.tint[0]), 1.0 / (d.dim * d.tint[1]), 1.0 / (d.dim * d.tint[2])];
        let og = (oracle[0] * oracle[1] * oracle[2]).cbrt();
        for k in 0..3 {
            let o = oracle[k] / og;
            let want = (1.0 - o).abs() / o;
            assert!((err[k] - want).abs() < 1e-12);
        }
        // tint != 1 means nonzero errors
        assert!(err[0] > 0.01 && err[2] > 0.01);
    }

    #[test]
    fn response_score_is_scale_invariant() {
        let d = test_degradation();
        let a = response_recovery_score([2.0, 1.5, 1.0], &d).unwrap();
        let b = response_recovery_score([20.0, 15.0, 10.0], &d).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn report_averages_match_per_view_entries() {
        let views = vec![
            ViewMetrics { view: 0, psnr_db: Some(20.0), ssim: 0.8, mean_gain: [1.0; 3] },
            ViewMetrics { view: 1, psnr_db: Some(24.0), ssim: 0.9, mean_gain: [1.0; 3] },
        ];
        let report = MetricReport::from_views(views, None);
        assert_eq!(report.mean_psnr_db, Some(22.0));
        assert!((report.mean_ssim - 0.85).abs() < 1e-15);

        let views = vec![ViewMetrics { view: 0, psnr_db: None, ssim: 1.0, mean_gain: [1.0; 3] }];
        let report = MetricReport::from_views(views, None);
        assert_eq!(report.mean_psnr_db, None);
    }
}
