//! Raw-domain data handling: black level, Bayer mosaic/demosaic, exposure
//! scaling, heteroscedastic noise synthesis, and the minimal sRGB
//! visualization path (white-balance gains + display gamma, nothing else).
//!
//! The Bayer layout is fixed to RGGB; the synthetic generator controls the
//! data, so nothing else is needed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LFRW_MAGIC: &[u8; 4] = b"LFRW";
pub const LFRW_VERSION: u32 = 1;

/// Single-channel Bayer mosaic with sensor metadata. Values live in
/// container units (`black_level..=white_level` before normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub mosaic: Vec<f64>,
    pub black_level: f64,
    pub white_level: f64,
    /// Simulated exposure ratio already applied to this image.
    pub exposure_ratio: f64,
    /// Signal-dependent noise scale.
    pub beta: f64,
    /// Signal-independent noise floor.
    pub delta: f64,
}

impl RawImage {
    pub fn new(width: usize, height: usize, mosaic: Vec<f64>) -> Result<Self> {
        if width % 2 != 0 || height % 2 != 0 {
            return Err(Error::invalid(format!("Bayer dimensions must be even, got {width}x{height}")));
        }
        if mosaic.len() != width * height {
            return Err(Error::invalid("mosaic length does not match dimensions"));
        }
        Ok(RawImage {
            width,
            height,
            mosaic,
            black_level: 0.0,
            white_level: 1.0,
            exposure_ratio: 1.0,
            beta: 0.0,
            delta: 0.0,
        })
    }

    /// Channel index (0=R, 1=G, 2=B) measured at a pixel under RGGB.
    pub fn channel_at(row: usize, col: usize) -> usize {
        match (row % 2, col % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }
}

/// Linear-domain RGB image, nonnegative values.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl LinearRgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid("pixel count does not match dimensions"));
        }
        Ok(LinearRgbImage { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        LinearRgbImage { width, height, pixels: vec![rgb; width * height] }
    }
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// `max(mosaic - black, 0) / (white - black)`; the result is normalized with
/// black level 0 and white level 1.
pub fn subtract_black_level(raw: &RawImage) -> Result<RawImage> {
    if !(raw.black_level < raw.white_level) {
        return Err(Error::invalid("black level must be below white level"));
    }
    let range = raw.white_level - raw.black_level;
    let mosaic = raw.mosaic.iter().map(|v| (v - raw.black_level).max(0.0) / range).collect();
    Ok(RawImage {
        mosaic,
        black_level: 0.0,
        white_level: 1.0,
        ..raw.clone()
    })
}

/// Exposure-ratio scaling of linear raw data: every value times `gamma`.
/// Expects black-level-subtracted input.
pub fn scale_exposure(raw: &RawImage, gamma: f64) -> Result<RawImage> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("exposure ratio must be positive, got {gamma}")));
    }
    if raw.black_level != 0.0 {
        return Err(Error::invalid("scale_exposure expects black-level-subtracted input"));
    }
    let mosaic = raw.mosaic.iter().map(|v| v * gamma).collect();
    Ok(RawImage { mosaic, exposure_ratio: raw.exposure_ratio * gamma, ..raw.clone() })
}

/// One draw from the signal-dependent noise model:
/// `n ~ N(0, beta^2 * value + delta^2)`. Zero-mean before any clamping.
pub fn sample_noise(value: f64, beta: f64, delta: f64, rng: &mut ChaCha8Rng) -> f64 {
    let var = beta * beta * value + delta * delta;
    if var == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z * var.sqrt()
}

/// Adds heteroscedastic Gaussian noise, clamping the sum at zero: a sensor
/// delivers nonnegative post-black-level values, so the zero-mean property
/// is traded away only in near-zero pixels.
pub fn add_noise(clean: &RawImage, beta: f64, delta: f64, rng: &mut ChaCha8Rng) -> Result<RawImage> {
    if clean.mosaic.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("add_noise expects nonnegative values"));
    }
    let mosaic = clean
        .mosaic
        .iter()
        .map(|v| (v + sample_noise(*v, beta, delta, rng)).max(0.0))
        .collect();
    Ok(RawImage { mosaic, beta, delta, ..clean.clone() })
}

/// Mean of the in-bounds mosaic values at `(row + dr, col + dc)` offsets.
fn gather(raw: &RawImage, row: usize, col: usize, offsets: &[(isize, isize)]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for (dr, dc) in offsets {
        let r = row as isize + dr;
        let c = col as isize + dc;
        if r >= 0 && c >= 0 && (r as usize) < raw.height && (c as usize) < raw.width {
            sum += raw.mosaic[r as usize * raw.width + c as usize];
            count += 1.0;
        }
    }
    sum / count
}

const SELF_SITE: [(isize, isize); 1] = [(0, 0)];
const HORIZ: [(isize, isize); 2] = [(0, -1), (0, 1)];
const VERT: [(isize, isize); 2] = [(-1, 0), (1, 0)];
const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Per-channel bilinear interpolation of the missing Bayer sites. Measured
/// sites pass through exactly; borders average whatever neighbors exist.
pub fn demosaic_bilinear(raw: &RawImage) -> Result<LinearRgbImage> {
    if raw.width % 2 != 0 || raw.height % 2 != 0 {
        return Err(Error::invalid("demosaic requires even dimensions"));
    }
    let mut pixels = Vec::with_capacity(raw.width * raw.height);
    for row in 0..raw.height {
        for col in 0..raw.width {
            let site = RawImage::channel_at(row, col);
            let r = match site {
                0 => gather(raw, row, col, &SELF_SITE),
                1 => {
                    if row % 2 == 0 {
                        gather(raw, row, col, &HORIZ) // G in an R row
                    } else {
                        gather(raw, row, col, &VERT) // G in a B row
                    }
                }
                _ => gather(raw, row, col, &DIAG),
            };
            let g = match site {
                1 => gather(raw, row, col, &SELF_SITE),
                _ => gather(raw, row, col, &CROSS),
            };
            let b = match site {
                2 => gather(raw, row, col, &SELF_SITE),
                1 => {
                    if row % 2 == 0 {
                        gather(raw, row, col, &VERT) // G in an R row
                    } else {
                        gather(raw, row, col, &HORIZ) // G in a B row
                    }
                }
                _ => gather(raw, row, col, &DIAG),
            };
            pixels.push([r, g, b]);
        }
    }
    LinearRgbImage::new(raw.width, raw.height, pixels)
}

/// Samples each pixel's RGGB-site channel from an RGB image.
pub fn mosaic(rgb: &LinearRgbImage) -> Result<RawImage> {
    if rgb.width % 2 != 0 || rgb.height % 2 != 0 {
        return Err(Error::invalid("mosaic requires even dimensions"));
    }
    let mut out = Vec::with_capacity(rgb.width * rgb.height);
    for row in 0..rgb.height {
        for col in 0..rgb.width {
            let site = RawImage::channel_at(row, col);
            out.push(rgb.pixels[row * rgb.width + col][site]);
        }
    }
    RawImage::new(rgb.width, rgb.height, out)
}

/// `clamp(rgb * wb, 0, 1)^(1/display_gamma)` quantized to 8 bits,
/// round-half-up.
pub fn to_srgb(rgb: &LinearRgbImage, wb_gains: [f64; 3], display_gamma: f64) -> Result<Image8> {
    if !(display_gamma > 0.0) {
        return Err(Error::invalid("display gamma must be positive"));
    }
    let inv = 1.0 / display_gamma;
    let mut data = Vec::with_capacity(rgb.pixels.len() * 3);
    for p in &rgb.pixels {
        for k in 0..3 {
            let v = (p[k] * wb_gains[k]).clamp(0.0, 1.0).powf(inv);
            data.push((v * 255.0).round() as u8);
        }
    }
    Ok(Image8 { width: rgb.width, height: rgb.height, data })
}

/// Gray-world white-balance gains `K_avg / mean_k`; the 2D reference oracle
/// for the learned response map.
pub fn gray_world_gains(rgb: &LinearRgbImage) -> Result<[f64; 3]> {
    let mut sums = [0.0f64; 3];
    for p in &rgb.pixels {
        for k in 0..3 {
            sums[k] += p[k];
        }
    }
    let n = rgb.pixels.len() as f64;
    let means = [sums[0] / n, sums[1] / n, sums[2] / n];
    if means.iter().any(|m| *m <= 0.0) {
        return Err(Error::invalid("gray-world gains need positive channel means"));
    }
    let k_avg = (means[0] + means[1] + means[2]) / 3.0;
    Ok([k_avg / means[0], k_avg / means[1], k_avg / means[2]])
}

pub fn write_lfrw(path: &Path, raw: &RawImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LFRW_MAGIC)?;
    w.write_all(&LFRW_VERSION.to_le_bytes())?;
    w.write_all(&(raw.height as u32).to_le_bytes())?;
    w.write_all(&(raw.width as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?; // pattern code 0 = RGGB
    for v in [raw.black_level, raw.white_level, raw.exposure_ratio, raw.beta, raw.delta] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &raw.mosaic {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lfrw(path: &Path) -> Result<RawImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LFRW_MAGIC {
        return Err(Error::invalid(format!("{} is not an LFRW container", path.display())));
    }
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != LFRW_VERSION {
        return Err(Error::invalid(format!("unsupported LFRW version {version}")));
    }
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let pattern = read_u32(&mut r)?;
    if pattern != 0 {
        return Err(Error::invalid(format!("unsupported Bayer pattern code {pattern}")));
    }
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let black_level = read_f64(&mut r)?;
    let white_level = read_f64(&mut r)?;
    let exposure_ratio = read_f64(&mut r)?;
    let beta = read_f64(&mut r)?;
    let delta = read_f64(&mut r)?;
    let mut mosaic = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        mosaic.push(read_f64(&mut r)?);
    }
    let mut raw = RawImage::new(width, height, mosaic)?;
    raw.black_level = black_level;
    raw.white_level = white_level;
    raw.exposure_ratio = exposure_ratio;
    raw.beta = beta;
    raw.delta = delta;
    Ok(raw)
}

pub fn save_png(path: &Path, image: &Image8) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .ok_or_else(|| Error::invalid("image buffer does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image8> {
    let img = image::open(path)?.into_rgb8();
    Ok(Image8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Plain-text PPM fallback for environments without PNG tooling.
pub fn save_ppm(path: &Path, image: &Image8) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.data)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn raw_with_levels(width: usize, height: usize, value: f64, black: f64, white: f64) -> RawImage {
        let mut raw = RawImage::new(width, height, vec![value; width * height]).unwrap();
        raw.black_level = black;
        raw.white_level = white;
        raw
    }

    #[test]
    fn black_level_subtraction_endpoints() {
        let raw = raw_with_levels(4, 4, 64.0, 64.0, 1024.0);
        let out = subtract_black_level(&raw).unwrap();
        assert!(out.mosaic.iter().all(|v| *v == 0.0));

        let raw = raw_with_levels(4, 4, 1024.0, 64.0, 1024.0);
        let out = subtract_black_level(&raw).unwrap();
        assert!(out.mosaic.iter().all(|v| *v == 1.0));

        let raw = raw_with_levels(4, 4, (64.0 + 1024.0) / 2.0, 64.0, 1024.0);
        let out = subtract_black_level(&raw).unwrap();
        assert!(out.mosaic.iter().all(|v| *v == 0.5));
        assert_eq!(out.black_level, 0.0);
        assert_eq!(out.white_level, 1.0);
    }

    #[test]
    fn exposure_scaling_is_linear_and_composes() {
        let raw = RawImage::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let same = scale_exposure(&raw, 1.0).unwrap();
        assert_eq!(same.mosaic, raw.mosaic);

        let half_then_double = scale_exposure(&scale_exposure(&raw, 0.5).unwrap(), 2.0).unwrap();
        assert_eq!(half_then_double.mosaic, raw.mosaic);

        let dim = scale_exposure(&raw, 0.3).unwrap();
        assert!((dim.mosaic[0] - 0.06).abs() < 1e-15);
        assert_eq!(dim.exposure_ratio, 0.3);

        // dyadic factors compose bitwise
        let a = scale_exposure(&scale_exposure(&raw, 0.25).unwrap(), 2.0).unwrap();
        let b = scale_exposure(&raw, 0.5).unwrap();
        assert_eq!(a.mosaic, b.mosaic);
    }

    #[test]
    fn noise_zero_params_is_identity() {
        let raw = RawImage::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = add_noise(&raw, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(out.mosaic, raw.mosaic);
    }

    #[test]
    fn noise_moments_match_model() {
        // pre-clamp draws, Monte Carlo over 1e5 samples
        let n = 100_000;
        for (v, beta, delta) in [(0.0, 0.0, 0.01), (0.25, 0.1, 0.0), (0.1, 0.05, 0.01)] {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let draws: Vec<f64> = (0..n).map(|_| sample_noise(v, beta, delta, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
            let want_var = beta * beta * v + delta * delta;
            assert!((var - want_var).abs() / want_var < 0.05, "var {var} vs {want_var}");
            // mean within 3 standard errors of zero
            let se = want_var.sqrt() / (n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 se {se}");
        }
    }

    #[test]
    fn noise_is_reproducible_for_fixed_seed() {
        let raw = RawImage::new(4, 4, vec![0.25; 16]).unwrap();
        let a = add_noise(&raw, 0.05, 0.01, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = add_noise(&raw, 0.05, 0.01, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.mosaic, b.mosaic);
    }

    #[test]
    fn demosaic_constant_mosaic_is_constant_rgb() {
        let raw = RawImage::new(6, 6, vec![0.37; 36]).unwrap();
        let rgb = demosaic_bilinear(&raw).unwrap();
        for p in &rgb.pixels {
            for k in 0..3 {
                assert!((p[k] - 0.37).abs() < 1e-15, "{p:?}");
            }
        }
    }

    #[test]
    fn demosaic_preserves_measured_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mosaic: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let raw = RawImage::new(8, 8, mosaic.clone()).unwrap();
        let rgb = demosaic_bilinear(&raw).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let site = RawImage::channel_at(row, col);
                assert_eq!(rgb.pixels[row * 8 + col][site], mosaic[row * 8 + col]);
            }
        }
    }

    /// Independent scalar oracle: for each pixel and channel, list the
    /// contributing sites by brute-force search over the 3x3 neighborhood and
    /// average them.
    fn demosaic_oracle(raw: &RawImage) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for row in 0..raw.height {
            for col in 0..raw.width {
                let mut rgb = [0.0; 3];
                for ch in 0..3 {
                    if RawImage::channel_at(row, col) == ch {
                        rgb[ch] = raw.mosaic[row * raw.width + col];
                        continue;
                    }
                    // nearest ring of sites measuring this channel
                    let cross: Vec<(isize, isize)> = vec![(-1, 0), (1, 0), (0, -1), (0, 1)];
                    let diag: Vec<(isize, isize)> = vec![(-1, -1), (-1, 1), (1, -1), (1, 1)];
                    let mut candidates: Vec<(isize, isize)> = Vec::new();
                    for set in [&cross, &diag] {
                        for (dr, dc) in set {
                            let r = row as isize + dr;
                            let c = col as isize + dc;
                            if r >= 0 && c >= 0 && (r as usize) < raw.height && (c as usize) < raw.width {
                                if RawImage::channel_at(r as usize, c as usize) == ch {
                                    candidates.push((*dr, *dc));
                                }
                            } else if RawImage::channel_at(
                                (r.rem_euclid(2)) as usize,
                                (c.rem_euclid(2)) as usize,
                            ) == ch
                            {
                                // out-of-bounds site of the right color: skipped
                            }
                        }
                        if !candidates.is_empty() {
                            break;
                        }
                    }
                    let sum: f64 = candidates
                        .iter()
                        .map(|(dr, dc)| {
                            raw.mosaic[(row as isize + dr) as usize * raw.width + (col as isize + dc) as usize]
                        })
                        .sum();
                    rgb[ch] = sum / candidates.len() as f64;
                }
                out.push(rgb);
            }
        }
        out
    }

    #[test]
    fn demosaic_ramp_matches_scalar_oracle() {
        let mosaic: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let raw = RawImage::new(4, 4, mosaic).unwrap();
        let rgb = demosaic_bilinear(&raw).unwrap();
        let want = demosaic_oracle(&raw);
        for (got, want) in rgb.pixels.iter().zip(&want) {
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn mosaic_demosaic_round_trip_at_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pixels: Vec<[f64; 3]> = (0..36)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let rgb = LinearRgbImage::new(6, 6, pixels).unwrap();
        let raw = mosaic(&rgb).unwrap();
        let back = demosaic_bilinear(&raw).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let site = RawImage::channel_at(row, col);
                assert_eq!(back.pixels[row * 6 + col][site], rgb.pixels[row * 6 + col][site]);
                assert_eq!(raw.mosaic[row * 6 + col], rgb.pixels[row * 6 + col][site]);
            }
        }

        let constant = LinearRgbImage::constant(4, 4, [0.2, 0.5, 0.8]);
        let m = mosaic(&constant).unwrap();
        assert_eq!(m.mosaic[0], 0.2);
        assert_eq!(m.mosaic[1], 0.5);
        assert_eq!(m.mosaic[5], 0.8);

        let red = LinearRgbImage::constant(4, 4, [1.0, 0.0, 0.0]);
        let m = mosaic(&red).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let want = if RawImage::channel_at(row, col) == 0 { 1.0 } else { 0.0 };
                assert_eq!(m.mosaic[row * 4 + col], want);
            }
        }
    }

    #[test]
    fn srgb_quantization_values() {
        let img = LinearRgbImage::new(2, 2, vec![[1.0; 3], [0.0; 3], [0.5; 3], [0.25; 3]]).unwrap();
        let out = to_srgb(&img, [1.0; 3], 2.2).unwrap();
        assert_eq!(&out.data[0..3], &[255, 255, 255]);
        assert_eq!(&out.data[3..6], &[0, 0, 0]);
        // 0.5^(1/2.2) * 255 = 186.08 -> 186
        assert_eq!(out.data[6], 186);
    }

    #[test]
    fn srgb_is_monotonic_per_channel() {
        let steps: Vec<[f64; 3]> = (0..100).map(|i| [i as f64 / 99.0; 3]).collect();
        let img = LinearRgbImage::new(10, 10, steps).unwrap();
        let out = to_srgb(&img, [1.0; 3], 2.2).unwrap();
        for i in 1..100 {
            assert!(out.data[i * 3] >= out.data[(i - 1) * 3]);
        }
    }

    #[test]
    fn gray_world_examples() {
        let gray = LinearRgbImage::constant(4, 4, [0.4, 0.4, 0.4]);
        assert_eq!(gray_world_gains(&gray).unwrap(), [1.0, 1.0, 1.0]);

        let tinted = LinearRgbImage::constant(4, 4, [0.1, 0.2, 0.3]);
        let gains = gray_world_gains(&tinted).unwrap();
        assert!((gains[0] - 2.0).abs() < 1e-15);
        assert!((gains[1] - 1.0).abs() < 1e-15);
        assert!((gains[2] - 2.0 / 3.0).abs() < 1e-15);

        // applying the gains equalizes channel means
        let balanced: Vec<[f64; 3]> = tinted
            .pixels
            .iter()
            .map(|p| [p[0] * gains[0], p[1] * gains[1], p[2] * gains[2]])
            .collect();
        let balanced = LinearRgbImage::new(4, 4, balanced).unwrap();
        let new_gains = gray_world_gains(&balanced).unwrap();
        for k in 0..3 {
            assert!((new_gains[k] - 1.0).abs() < 1e-12);
        }

        let dead = LinearRgbImage::constant(2, 2, [0.0, 0.1, 0.2]);
        assert!(gray_world_gains(&dead).is_err());
    }

    #[test]
    fn lfrw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.lfrw");
        let mut raw = RawImage::new(4, 2, vec![0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6]).unwrap();
        raw.black_level = 64.0;
        raw.white_level = 1024.0;
        raw.exposure_ratio = 0.3;
        raw.beta = 0.05;
        raw.delta = 0.01;
        write_lfrw(&path, &raw).unwrap();
        let back = read_lfrw(&path).unwrap();
        assert_eq!(back, raw);

        std::fs::write(dir.path().join("bad.lfrw"), b"JUNKJUNKJUNK").unwrap();
        assert!(read_lfrw(&dir.path().join("bad.lfrw")).is_err());
    }
}
