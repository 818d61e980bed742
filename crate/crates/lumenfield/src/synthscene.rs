//! Synthetic multi-view datasets with exact poses and exact ground truth:
//! a clean voxel scene, a known illumination/sensor degradation (the oracle
//! the learned response is scored against), and sensor noise.
//!
//! Scenes are density/albedo grids voxelized from primitive lists and
//! interpolated trilinearly, zero outside the bounds. Ground truth is
//! rendered with dense deterministic midpoint quadrature, so re-rendering
//! any pose is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PointOutput;
use crate::rawproc::{self, LinearRgbImage, RawImage};
use crate::render::{composite, Ray, RaySample};

// ---------------------------------------------------------------------------
// small vector helpers

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// scene

/// Axis-aligned primitives feeding the voxelizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3], density: f64 },
    Cuboid { min: [f64; 3], max: [f64; 3], albedo: [f64; 3], density: f64 },
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let d = sub3(p, *center);
                dot(d, d) < radius * radius
            }
            Primitive::Cuboid { min, max, .. } => {
                (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k])
            }
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Cuboid { density, .. } => *density,
        }
    }
}

/// Voxelized density and albedo over an axis-aligned box. Trilinear
/// interpolation defines the fields everywhere inside the bounds, zero
/// outside. Albedo is interpolated density-weighted (premultiplied), so the
/// color stays at the primitive's albedo across the density ramp at a
/// surface instead of bleeding toward the empty-space black.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub resolution: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub density: Vec<f64>,
    pub albedo: Vec<[f64; 3]>,
}

impl SyntheticScene {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    /// Voxel-center world coordinate along one axis.
    fn center(&self, axis: usize, i: usize) -> f64 {
        let extent = self.bounds_max[axis] - self.bounds_min[axis];
        self.bounds_min[axis] + (i as f64 + 0.5) * extent / self.resolution as f64
    }

    /// Trilinear sample of density and albedo, zero outside bounds.
    pub fn sample(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let d = self.resolution as f64;
        let mut coord = [0.0f64; 3];
        for axis in 0..3 {
            let extent = self.bounds_max[axis] - self.bounds_min[axis];
            // grid coordinate in voxel-center space
            coord[axis] = (p[axis] - self.bounds_min[axis]) / extent * d - 0.5;
            if p[axis] < self.bounds_min[axis] || p[axis] > self.bounds_max[axis] {
                return (0.0, [0.0; 3]);
            }
        }
        let mut sigma = 0.0;
        let mut premul = [0.0; 3];
        let base: Vec<(isize, f64)> = coord
            .iter()
            .map(|c| {
                let f = c.floor();
                (f as isize, c - f)
            })
            .collect();
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let (i0, fi) = base[0];
                    let (j0, fj) = base[1];
                    let (k0, fk) = base[2];
                    let (i, j, k) = (i0 + di as isize, j0 + dj as isize, k0 + dk as isize);
                    let w = (if di == 1 { fi } else { 1.0 - fi })
                        * (if dj == 1 { fj } else { 1.0 - fj })
                        * (if dk == 1 { fk } else { 1.0 - fk });
                    if w == 0.0 {
                        continue;
                    }
                    let r = self.resolution as isize;
                    if i < 0 || j < 0 || k < 0 || i >= r || j >= r || k >= r {
                        continue; // zero padding outside the grid
                    }
                    let idx = self.index(i as usize, j as usize, k as usize);
                    let d = self.density[idx];
                    sigma += w * d;
                    for c in 0..3 {
                        premul[c] += w * d * self.albedo[idx][c];
                    }
                }
            }
        }
        if sigma <= 0.0 {
            return (0.0, [0.0; 3]);
        }
        (sigma, [premul[0] / sigma, premul[1] / sigma, premul[2] / sigma])
    }
}

/// One separable 1-2-1 smoothing pass over density and density-weighted
/// albedo. Band-limits the voxelized surfaces so midpoint quadrature of the
/// ground-truth renderer converges quickly; the smoothed grid IS the oracle
/// scene that both the renderer and the learned field see.
pub fn smooth_scene(scene: &SyntheticScene) -> SyntheticScene {
    let r = scene.resolution;
    let mut premul: Vec<[f64; 3]> = scene
        .density
        .iter()
        .zip(&scene.albedo)
        .map(|(d, a)| [d * a[0], d * a[1], d * a[2]])
        .collect();
    let mut density = scene.density.clone();

    let blur_axis = |data: &mut Vec<f64>, axis: usize| {
        let stride = match axis {
            0 => r * r,
            1 => r,
            _ => 1,
        };
        let old = data.clone();
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    let idx = (i * r + j) * r + k;
                    let pos = [i, j, k][axis];
                    let center = old[idx];
                    let lo = if pos > 0 { old[idx - stride] } else { center };
                    let hi = if pos + 1 < r { old[idx + stride] } else { center };
                    data[idx] = 0.25 * lo + 0.5 * center + 0.25 * hi;
                }
            }
        }
    };
    for axis in 0..3 {
        blur_axis(&mut density, axis);
        for c in 0..3 {
            let mut chan: Vec<f64> = premul.iter().map(|p| p[c]).collect();
            blur_axis(&mut chan, axis);
            for (p, v) in premul.iter_mut().zip(&chan) {
                p[c] = *v;
            }
        }
    }
    let albedo = premul
        .iter()
        .zip(&density)
        .map(|(p, d)| if *d > 0.0 { [p[0] / d, p[1] / d, p[2] / d] } else { [0.0; 3] })
        .collect();
    SyntheticScene { density, albedo, ..scene.clone() }
}

/// Voxelizes primitives by the voxel-center rule: overlaps resolve by max
/// density and last-writer albedo.
pub fn build_scene(
    primitives: &[Primitive],
    resolution: usize,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
) -> SyntheticScene {
    let mut scene = SyntheticScene {
        resolution,
        bounds_min,
        bounds_max,
        density: vec![0.0; resolution * resolution * resolution],
        albedo: vec![[0.0; 3]; resolution * resolution * resolution],
    };
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let p = [scene.center(0, i), scene.center(1, j), scene.center(2, k)];
                let idx = scene.index(i, j, k);
                for prim in primitives {
                    if prim.contains(p) {
                        scene.density[idx] = scene.density[idx].max(prim.density());
                        scene.albedo[idx] = prim.albedo();
                    }
                }
            }
        }
    }
    scene
}

// ---------------------------------------------------------------------------
// cameras and poses

/// Pinhole camera: rotation columns are the camera axes in world space
/// (x right, y down, z forward), `position` is the optical center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Builds from a row-major 3x4 camera-to-world pose.
    pub fn from_pose(pose: &[f64], fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Camera> {
        if pose.len() != 12 {
            return Err(Error::invalid("pose must have 12 entries (row-major 3x4)"));
        }
        let rotation = [
            [pose[0], pose[1], pose[2]],
            [pose[4], pose[5], pose[6]],
            [pose[8], pose[9], pose[10]],
        ];
        let position = [pose[3], pose[7], pose[11]];
        let cam = Camera { rotation, position, fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_pose(&self) -> Vec<f64> {
        let r = &self.rotation;
        vec![
            r[0][0], r[0][1], r[0][2], self.position[0],
            r[1][0], r[1][1], r[1][2], self.position[1],
            r[2][0], r[2][1], r[2][2], self.position[2],
        ]
    }

    fn column(&self, j: usize) -> [f64; 3] {
        [self.rotation[0][j], self.rotation[1][j], self.rotation[2][j]]
    }

    /// Orthonormality within 1e-9 and determinant +1.
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            for b in a..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                let got = dot(self.column(a), self.column(b));
                if (got - want).abs() > 1e-9 {
                    return Err(Error::invalid(format!("pose rotation not orthonormal: col{a}.col{b} = {got}")));
                }
            }
        }
        let det = dot(self.column(0), cross(self.column(1), self.column(2)));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("pose rotation must be proper (det {det})")));
        }
        Ok(())
    }

    /// World ray through the center of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize, t_near: f64, t_far: f64) -> Result<Ray> {
        let xc = (col as f64 + 0.5 - self.cx) / self.fx;
        let yc = (row as f64 + 0.5 - self.cy) / self.fy;
        let d_cam = [xc, yc, 1.0];
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = self.rotation[i][0] * d_cam[0] + self.rotation[i][1] * d_cam[1] + self.rotation[i][2] * d_cam[2];
        }
        Ray::new(self.position, normalize(d), t_near, t_far, (row, col))
    }
}

/// Camera at `position` looking at `target` with world-up +z; y points down
/// in the image as usual for pixel coordinates.
pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    let forward = normalize(sub3(target, position));
    let up = [0.0, 0.0, 1.0];
    let right = cross(forward, up);
    if norm(right) < 1e-9 {
        return Err(Error::invalid("camera looking straight along the up axis"));
    }
    let right = normalize(right);
    let down = cross(forward, right);
    // columns: x = right, y = down, z = forward
    Ok([
        [right[0], down[0], forward[0]],
        [right[1], down[1], forward[1]],
        [right[2], down[2], forward[2]],
    ])
}

/// Cameras on a ring around the scene center: azimuths at exact `2 pi k / n`
/// spacing, elevations drawn uniformly from `elevation_range` (radians).
pub fn generate_poses(
    n_views: usize,
    radius: f64,
    elevation_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[[f64; 4]; 3]>> {
    if n_views < 2 {
        return Err(Error::invalid("need at least two views"));
    }
    let mut poses = Vec::with_capacity(n_views);
    for k in 0..n_views {
        let azimuth = 2.0 * std::f64::consts::PI * k as f64 / n_views as f64;
        let elevation = if elevation_range.1 > elevation_range.0 {
            rng.gen_range(elevation_range.0..elevation_range.1)
        } else {
            elevation_range.0
        };
        let position = [
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        ];
        let rot = look_at(position, [0.0, 0.0, 0.0])?;
        poses.push([
            [rot[0][0], rot[0][1], rot[0][2], position[0]],
            [rot[1][0], rot[1][1], rot[1][2], position[1]],
            [rot[2][0], rot[2][1], rot[2][2], position[2]],
        ]);
    }
    Ok(poses)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestView {
    pub pose: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub raw_path: String,
    pub gt_path: String,
}

/// The ground-truth degradation record: the oracle the learned response map
/// is validated against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Degradation {
    pub dim: f64,
    pub tint: [f64; 3],
    pub beta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub views: Vec<ManifestView>,
    pub near: f64,
    pub far: f64,
    pub degradation: Degradation,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn camera(&self, view: usize) -> Result<Camera> {
        let v = &self.views[view];
        Camera::from_pose(&v.pose, v.fx, v.fy, v.cx, v.cy)
    }
}

// ---------------------------------------------------------------------------
// ground-truth rendering and degradation

/// Deterministic midpoint quadrature of the oracle fields along one ray.
fn midpoint_sample(ray: &Ray, n_samples: usize) -> RaySample {
    let width = (ray.t_far - ray.t_near) / n_samples as f64;
    let t_values: Vec<f64> = (0..n_samples).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect();
    let mut deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(ray.t_far - t_values[n_samples - 1]);
    let points = t_values.iter().map(|t| ray.point_at(*t)).collect();
    RaySample { t_values, deltas, points }
}

/// Renders the clean normal-light image of one view with dense midpoint
/// sampling (no network, no noise).
pub fn render_ground_truth_view(
    scene: &SyntheticScene,
    camera: &Camera,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    n_samples: usize,
) -> Result<LinearRgbImage> {
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let ray = camera.ray(row, col, near, far)?;
            let sample = midpoint_sample(&ray, n_samples);
            let outputs: Vec<PointOutput> = sample
                .points
                .iter()
                .map(|p| {
                    let (sigma, albedo) = scene.sample(*p);
                    PointOutput { sigma, h: Vec::new(), c_l: albedo, s: [1.0; 3] }
                })
                .collect();
            let out = composite(&outputs, &sample)?;
            pixels.push(out.c_l);
        }
    }
    LinearRgbImage::new(width, height, pixels)
}

/// Applies the low-light degradation: per-channel dimming by
/// `dim * tint_k`, Bayer mosaicking, then heteroscedastic noise. The raw is
/// stored black-level-subtracted (black 0, white 1).
pub fn degrade(clean: &LinearRgbImage, d: &Degradation, rng: &mut ChaCha8Rng) -> Result<RawImage> {
    let gains = [d.dim * d.tint[0], d.dim * d.tint[1], d.dim * d.tint[2]];
    let low: Vec<[f64; 3]> = clean
        .pixels
        .iter()
        .map(|p| [p[0] * gains[0], p[1] * gains[1], p[2] * gains[2]])
        .collect();
    let low = LinearRgbImage::new(clean.width, clean.height, low)?;
    let raw = rawproc::mosaic(&low)?;
    rawproc::add_noise(&raw, d.beta, d.delta, rng)
}

// ---------------------------------------------------------------------------
// dataset generation and I/O

/// Everything `synthesize` produces, in memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub raws: Vec<RawImage>,
    pub gts: Vec<LinearRgbImage>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub degradation: Degradation,
    pub seed: u64,
    /// Extra exposure-ratio scaling applied to the stored raws (darkness
    /// sweep); 1.0 leaves them untouched.
    pub exposure_ratio: f64,
    pub fov_deg: f64,
    pub ring_radius: f64,
    pub elevation_range_deg: (f64, f64),
    pub gt_samples: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            views: 20,
            width: 64,
            height: 64,
            degradation: Degradation { dim: 0.05, tint: [0.7, 1.0, 1.3], beta: 0.05, delta: 0.01 },
            seed: 0,
            exposure_ratio: 1.0,
            fov_deg: 32.0,
            ring_radius: 3.0,
            elevation_range_deg: (-12.0, 35.0),
            gt_samples: 384,
        }
    }
}

/// The default preset: a handful of saturated primitives clustered at the
/// origin so every view is dominated by matter, with enough albedo spread
/// that channel statistics are informative.
pub fn preset_scene(name: &str) -> Result<Vec<Primitive>> {
    match name {
        "spheres" => Ok(vec![
            // big matte backdrop sphere keeps coverage and brightness stable
            Primitive::Sphere { center: [0.0, 0.0, -0.15], radius: 0.72, albedo: [0.52, 0.50, 0.48], density: 90.0 },
            Primitive::Sphere { center: [-0.38, 0.30, 0.42], radius: 0.30, albedo: [0.85, 0.18, 0.12], density: 110.0 },
            Primitive::Sphere { center: [0.42, -0.28, 0.38], radius: 0.26, albedo: [0.15, 0.75, 0.20], density: 110.0 },
            Primitive::Sphere { center: [0.05, 0.42, 0.55], radius: 0.20, albedo: [0.15, 0.25, 0.90], density: 110.0 },
            Primitive::Cuboid { min: [-0.30, -0.52, 0.30], max: [0.16, -0.20, 0.72], albedo: [0.88, 0.82, 0.35], density: 110.0 },
        ]),
        other => Err(Error::invalid(format!("unknown scene preset '{other}'"))),
    }
}

/// Splitmix64 step, used to derive independent per-view noise streams.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15)).wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generates the full dataset: poses, clean ground truth, degraded raws.
pub fn generate(primitives: &[Primitive], opts: &SynthOptions) -> Result<Dataset> {
    let scene = smooth_scene(&build_scene(primitives, 96, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let to_rad = std::f64::consts::PI / 180.0;
    let poses = generate_poses(
        opts.views,
        opts.ring_radius,
        (opts.elevation_range_deg.0 * to_rad, opts.elevation_range_deg.1 * to_rad),
        &mut rng,
    )?;

    let fov = opts.fov_deg * to_rad;
    let fx = 0.5 * opts.width as f64 / (0.5 * fov).tan();
    let fy = fx;
    let cx = opts.width as f64 / 2.0;
    let cy = opts.height as f64 / 2.0;
    let box_radius = 3.0f64.sqrt();
    let near = (opts.ring_radius - box_radius).max(0.05);
    let far = opts.ring_radius + box_radius;

    let mut views = Vec::with_capacity(opts.views);
    let mut raws = Vec::with_capacity(opts.views);
    let mut gts = Vec::with_capacity(opts.views);
    for (i, pose) in poses.iter().enumerate() {
        let flat: Vec<f64> = pose.iter().flat_map(|row| row.iter().copied()).collect();
        let camera = Camera::from_pose(&flat, fx, fy, cx, cy)?;
        let gt = render_ground_truth_view(&scene, &camera, opts.width, opts.height, near, far, opts.gt_samples)?;
        let mut view_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64));
        let mut raw = degrade(&gt, &opts.degradation, &mut view_rng)?;
        if opts.exposure_ratio != 1.0 {
            raw = rawproc::scale_exposure(&raw, opts.exposure_ratio)?;
        }
        views.push(ManifestView {
            pose: flat,
            fx,
            fy,
            cx,
            cy,
            raw_path: format!("raw_{i:03}.lfrw"),
            gt_path: format!("gt_{i:03}.f64"),
        });
        raws.push(raw);
        gts.push(gt);
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            views,
            near,
            far,
            degradation: opts.degradation,
            seed: opts.seed,
        },
        raws,
        gts,
        width: opts.width,
        height: opts.height,
    })
}

pub fn write_gt_f64(path: &Path, image: &LinearRgbImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &image.pixels {
        for k in 0..3 {
            w.write_all(&p[k].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_gt_f64(path: &Path, width: usize, height: usize) -> Result<LinearRgbImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut pixels = Vec::with_capacity(width * height);
    let mut buf = [0u8; 8];
    for _ in 0..width * height {
        let mut rgb = [0.0; 3];
        for item in rgb.iter_mut() {
            r.read_exact(&mut buf)?;
            *item = f64::from_le_bytes(buf);
        }
        pixels.push(rgb);
    }
    LinearRgbImage::new(width, height, pixels)
}

/// Writes manifest + per-view raw containers + clean GT binaries.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (view, raw) in dataset.manifest.views.iter().zip(&dataset.raws) {
        rawproc::write_lfrw(&dir.join(&view.raw_path), raw)?;
    }
    for (view, gt) in dataset.manifest.views.iter().zip(&dataset.gts) {
        write_gt_f64(&dir.join(&view.gt_path), gt)?;
    }
    let file = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(file, &dataset.manifest)?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(
        File::open(&manifest_path).map_err(|e| Error::invalid(format!("{}: {e}", manifest_path.display())))?,
    ))?;
    if manifest.views.is_empty() {
        return Err(Error::invalid("manifest has no views"));
    }
    let mut raws = Vec::with_capacity(manifest.views.len());
    let mut gts = Vec::with_capacity(manifest.views.len());
    for view in &manifest.views {
        let raw = rawproc::read_lfrw(&dir.join(&view.raw_path))?;
        let gt_path = dir.join(&view.gt_path);
        if !gt_path.exists() {
            return Err(Error::invalid(format!("missing ground truth file {}", gt_path.display())));
        }
        let gt = read_gt_f64(&gt_path, raw.width, raw.height)?;
        gts.push(gt);
        raws.push(raw);
    }
    let width = raws[0].width;
    let height = raws[0].height;
    Ok(Dataset { manifest, raws, gts, width, height })
}

/// Directory for a dataset path argument.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    } else {
        path.to_path_buf()
    }
}
