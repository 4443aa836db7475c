//! Synthetic landmark scenes, camera trajectories, feature-grid rendering,
//! the on-disk dataset format, subsampled views and augmentation.
//!
//! A dataset on disk is a directory holding `poses.txt` (one
//! `frame_id tx ty tz qw qx qy qz` record per line) and one `frame_id.bin`
//! per record: the magic bytes `SLF1`, three little-endian `u32` extents
//! `H W C_in`, then `H·W·C_in` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLF1";
/// Allowed deviation of a stored quaternion's norm from 1.
pub const LOAD_QUAT_TOL: f64 = 1e-3;
pub const FOV_DEG: f64 = 60.0;
const NEAR: f64 = 0.1;
/// Gaussian footprint of a splatted landmark, in pixels.
const SPLAT_SIGMA: f64 = 0.7;
/// Brings typical grid values to order one.
const RENDER_GAIN: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: [f64; 3],
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub diameter: f64,
    pub landmarks: Vec<Landmark>,
}

impl Scene {
    pub fn descriptor_dim(&self) -> usize {
        self.landmarks[0].descriptor.len()
    }
}

/// Landmarks uniform in the axis-aligned cube `[−d/2, d/2]³`. Channel `c`
/// of a descriptor is a random plane wave `sin(k_c·p + φ_c)` evaluated at
/// the landmark, so nearby landmarks look alike.
pub fn generate_scene(seed: u64, n_landmarks: usize, diameter: f64, c_in: usize) -> Result<Scene> {
    if n_landmarks == 0 {
        return Err(Error::Config("a scene needs at least one landmark".into()));
    }
    if c_in == 0 || !(diameter > 0.0) {
        return Err(Error::Config(format!("bad scene extents: c_in={c_in}, diameter={diameter}")));
    }
    let mut rng = rng::seeded(seed);
    let half = diameter / 2.0;
    // one random plane wave per descriptor channel
    let waves: Vec<([f64; 3], f64)> = (0..c_in)
        .map(|_| {
            let dir = [(); 3].map(|_| gauss(&mut rng));
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let freq = std::f64::consts::TAU / diameter * rng.gen_range(0.5..1.5);
            (dir.map(|v| v / n * freq), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let landmarks = (0..n_landmarks)
        .map(|_| {
            let position = [(); 3].map(|_| rng.gen_range(-half..half));
            let descriptor = waves
                .iter()
                .map(|(k, phase)| (k[0] * position[0] + k[1] * position[1] + k[2] * position[2] + phase).sin())
                .collect();
            Landmark { position, descriptor }
        })
        .collect();
    Ok(Scene {
        seed,
        diameter,
        landmarks,
    })
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Quaternion `(w, x, y, z)` of a row-major rotation matrix.
pub fn quat_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = q.map(|v| v / n);
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Camera at `position` looking along yaw/pitch (radians) with a roll about
/// the viewing axis. Camera axes: `x` right, `y` down, `z` forward.
pub fn look_pose(position: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Pose {
    let f = [yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin()];
    let r0 = [yaw.sin(), -yaw.cos(), 0.0];
    // down = f × right
    let d0 = [
        f[1] * r0[2] - f[2] * r0[1],
        f[2] * r0[0] - f[0] * r0[2],
        f[0] * r0[1] - f[1] * r0[0],
    ];
    let (c, s) = (roll.cos(), roll.sin());
    let r: [f64; 3] = std::array::from_fn(|i| c * r0[i] + s * d0[i]);
    let d: [f64; 3] = std::array::from_fn(|i| -s * r0[i] + c * d0[i]);
    let m = [[r[0], d[0], f[0]], [r[1], d[1], f[1]], [r[2], d[2], f[2]]];
    Pose::new(position, quat_from_matrix(&m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub laps: f64,
    pub radius: f64,
    pub height: f64,
    /// Standard deviation of the positional jitter.
    pub jitter: f64,
    /// Standard deviation of the angular jitter, radians.
    pub angle_jitter: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            frames: 500,
            laps: 5.0,
            radius: 3.0,
            height: 1.0,
            jitter: 0.3,
            angle_jitter: 0.15,
        }
    }
}

/// A jittered multi-lap loop around the scene centre, the camera looking
/// roughly along the direction of travel. The seed fixes the phase and the
/// jitter, so different seeds trace different paths through the same region.
pub fn generate_trajectory(seed: u64, cfg: &TrajectoryConfig) -> Vec<Pose> {
    let mut rng = rng::seeded(rng::derive(seed, 0x7472616a));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let normal = |s: f64, rng: &mut Rng| s * gauss(rng);
    (0..cfg.frames)
        .map(|i| {
            let th = phase + std::f64::consts::TAU * cfg.laps * i as f64 / cfg.frames as f64;
            let pos = [
                cfg.radius * th.cos() + normal(cfg.jitter, &mut rng),
                cfg.radius * th.sin() + normal(cfg.jitter, &mut rng),
                cfg.height * (3.0 * th).sin() + normal(cfg.jitter, &mut rng),
            ];
            let yaw = th + std::f64::consts::FRAC_PI_2 + normal(cfg.angle_jitter, &mut rng);
            let pitch = normal(cfg.angle_jitter, &mut rng);
            let roll = normal(cfg.angle_jitter, &mut rng);
            look_pose(pos, yaw, pitch, roll)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[H, W, C_in]`.
    pub grid: Tensor,
    pub pose: Pose,
}

/// Projects every landmark in front of the camera through a pinhole with a
/// 60° horizontal field of view and splats its descriptor with a Gaussian
/// footprint, weighted by `1 / (1 + depth)` up to a fixed gain. Seeded additive noise of scale
/// `noise_sigma` is added. Values are rounded to `f32` precision so that a
/// rendered sample survives the on-disk format unchanged.
pub fn render_features(pose: &Pose, scene: &Scene, h: usize, w: usize, noise_sigma: f64, seed: u64) -> Sample {
    let c = scene.descriptor_dim();
    let mut grid = vec![0.0; h * w * c];
    let rot = pose.rotation();
    let focal = (w as f64 / 2.0) / (FOV_DEG.to_radians() / 2.0).tan();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let reach = (3.0 * SPLAT_SIGMA).ceil() as isize;
    for lm in &scene.landmarks {
        let d = [
            lm.position[0] - pose.x[0],
            lm.position[1] - pose.x[1],
            lm.position[2] - pose.x[2],
        ];
        // camera frame = Rᵀ·d
        let pc: [f64; 3] = std::array::from_fn(|j| rot[0][j] * d[0] + rot[1][j] * d[1] + rot[2][j] * d[2]);
        if pc[2] <= NEAR {
            continue;
        }
        let u = focal * pc[0] / pc[2] + cx - 0.5;
        let v = focal * pc[1] / pc[2] + cy - 0.5;
        let amp = RENDER_GAIN / (1.0 + pc[2]);
        let (ui, vi) = (u.round() as isize, v.round() as isize);
        for py in vi - reach..=vi + reach {
            if py < 0 || py >= h as isize {
                continue;
            }
            for px in ui - reach..=ui + reach {
                if px < 0 || px >= w as isize {
                    continue;
                }
                let r2 = (px as f64 - u).powi(2) + (py as f64 - v).powi(2);
                let k = amp * (-r2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                let base = (py as usize * w + px as usize) * c;
                for (g, &dv) in grid[base..base + c].iter_mut().zip(&lm.descriptor) {
                    *g += k * dv;
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = rng::seeded(seed);
        for g in &mut grid {
            *g += noise_sigma * gauss(&mut rng);
        }
    }
    for g in &mut grid {
        *g = *g as f32 as f64;
    }
    Sample {
        grid: Tensor::from_raw(vec![h, w, c], grid),
        pose: *pose,
    }
}

/// Shared, immutable samples plus the index list of this view. Subsampling
/// and splitting produce new index lists over the same storage.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Arc<[Sample]>,
    indices: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        let indices = (0..samples.len()).collect();
        Dataset {
            samples: samples.into(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[self.indices[i]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.indices.iter().map(|&i| &self.samples[i])
    }

    /// Positions of this view in the underlying storage.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn shares_storage_with(&self, other: &Dataset) -> bool {
        Arc::ptr_eq(&self.samples, &other.samples)
    }

    /// `(H, W, C_in)` of the first sample.
    pub fn grid_dims(&self) -> Result<(usize, usize, usize)> {
        match *self.samples.first().ok_or(Error::EmptyDataset)?.grid.shape() {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "feature grid must be [H, W, C]".into(),
            }),
        }
    }

    /// View of positions `range` of this view.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: Arc::clone(&self.samples),
            indices: self.indices[range].to_vec(),
        }
    }

    /// Splits off the trailing `fraction` of the view.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_tail = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - n_tail.min(self.len());
        (self.slice(0..cut), self.slice(cut..self.len()))
    }
}

/// Keeps positions `0, s, 2s, …` with `s = round(1 / fraction)`.
pub fn subsample_uniform(ds: &Dataset, fraction: f64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let stride = (1.0 / fraction).round() as usize;
    Ok(Dataset {
        samples: Arc::clone(&ds.samples),
        indices: ds.indices.iter().copied().step_by(stride).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scene_seed: u64,
    pub landmarks: usize,
    pub diameter: f64,
    pub c_in: usize,
    /// Rendered grid extents, before cropping.
    pub render_h: usize,
    pub render_w: usize,
    pub noise_sigma: f64,
    pub train: TrajectoryConfig,
    pub test_frames: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            scene_seed: 42,
            landmarks: 800,
            diameter: 10.0,
            c_in: 8,
            render_h: 18,
            render_w: 18,
            noise_sigma: 0.05,
            train: TrajectoryConfig::default(),
            test_frames: 200,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

pub struct Splits {
    pub scene: Scene,
    pub train: Dataset,
    pub test: Dataset,
}

fn render_all(poses: &[Pose], scene: &Scene, cfg: &SceneConfig, seed: u64) -> Vec<Sample> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            render_features(p, scene, cfg.render_h, cfg.render_w, cfg.noise_sigma, rng::derive(seed, i as u64))
        })
        .collect()
}

/// Renders the training trajectory and an independent test trajectory of
/// the same scene.
pub fn synthesize(cfg: &SceneConfig) -> Result<Splits> {
    let scene = generate_scene(cfg.scene_seed, cfg.landmarks, cfg.diameter, cfg.c_in)?;
    let train_poses = generate_trajectory(cfg.train_seed, &cfg.train);
    let test_cfg = TrajectoryConfig {
        frames: cfg.test_frames,
        laps: cfg.train.laps * cfg.test_frames as f64 / cfg.train.frames.max(1) as f64,
        ..cfg.train.clone()
    };
    let test_poses = generate_trajectory(cfg.test_seed, &test_cfg);
    let train = render_all(&train_poses, &scene, cfg, rng::derive(cfg.train_seed, 1));
    let test = render_all(&test_poses, &scene, cfg, rng::derive(cfg.test_seed, 1));
    Ok(Splits {
        scene,
        train: Dataset::new(train),
        test: Dataset::new(test),
    })
}

/// Random `crop_h × crop_w` window plus Gaussian noise of scale `noise`.
pub fn augment(grid: &Tensor, crop_h: usize, crop_w: usize, noise: f64, rng: &mut Rng) -> Result<Tensor> {
    let &[h, w, _] = grid.shape() else {
        return Err(Error::shape("augment", grid.shape(), &[crop_h, crop_w, 0]));
    };
    if crop_h > h || crop_w > w {
        return Err(Error::shape("augment", grid.shape(), &[crop_h, crop_w]));
    }
    let oy = rng.gen_range(0..=h - crop_h);
    let ox = rng.gen_range(0..=w - crop_w);
    let mut out = crop(grid, oy, ox, crop_h, crop_w)?;
    if noise > 0.0 {
        for v in out.data_mut() {
            *v += noise * gauss(rng);
        }
    }
    Ok(out)
}

/// Centre window, used at evaluation time.
pub fn center_crop(grid: &Tensor, crop_h: usize, crop_w: usize) -> Result<Tensor> {
    let &[h, w, _] = grid.shape() else {
        return Err(Error::shape("center_crop", grid.shape(), &[crop_h, crop_w, 0]));
    };
    if crop_h > h || crop_w > w {
        return Err(Error::shape("center_crop", grid.shape(), &[crop_h, crop_w]));
    }
    crop(grid, (h - crop_h) / 2, (w - crop_w) / 2, crop_h, crop_w)
}

fn crop(grid: &Tensor, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let [_, w, c] = [grid.shape()[0], grid.shape()[1], grid.shape()[2]];
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in oy..oy + ch {
        let start = (y * w + ox) * c;
        out.extend_from_slice(&grid.data()[start..start + cw * c]);
    }
    Ok(Tensor::from_raw(vec![ch, cw, c], out))
}

/// Stacks `[H, W, C]` grids into `[B, H, W, C]`.
pub fn stack(grids: &[Tensor]) -> Result<Tensor> {
    let first = grids.first().ok_or(Error::EmptyDataset)?;
    let mut shape = vec![grids.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * grids.len());
    for g in grids {
        if g.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), g.shape()));
        }
        data.extend_from_slice(g.data());
    }
    Ok(Tensor::from_raw(shape, data))
}

// ---- on-disk format ------------------------------------------------------

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

pub fn write_grid(path: &Path, grid: &Tensor) -> Result<()> {
    let &[h, w, c] = grid.shape() else {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: "feature grid must be [H, W, C]".into(),
        });
    };
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for d in [h, w, c] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in grid.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    match fs::File::open(path) {
        Ok(mut f) => f.read_to_end(&mut bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFeatureFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n || n == 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w, c],
            reason: format!("{} holds {} payload bytes", path.display(), bytes.len() - 16),
        });
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![h, w, c], data)
}

/// Writes `poses.txt` and one feature file per sample into `root`.
pub fn save_dataset(root: &Path, samples: &Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = BufWriter::new(fs::File::create(root.join("poses.txt"))?);
    for (i, s) in samples.iter().enumerate() {
        let id = frame_id(i);
        let [tx, ty, tz] = s.pose.x;
        let [qw, qx, qy, qz] = s.pose.q;
        writeln!(manifest, "{id} {tx} {ty} {tz} {qw} {qx} {qy} {qz}")?;
        write_grid(&root.join(format!("{id}.bin")), &s.grid)?;
    }
    manifest.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Flip quaternions to `w ≥ 0` after loading.
    pub canonicalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { canonicalize: true }
    }
}

fn parse_record(line: &str) -> std::result::Result<(String, Pose), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, found {}", fields.len()));
    }
    let mut nums = [0.0; 7];
    for (k, f) in fields[1..].iter().enumerate() {
        nums[k] = f.parse::<f64>().map_err(|e| format!("field {}: `{f}`: {e}", k + 2))?;
        if !nums[k].is_finite() {
            return Err(format!("field {} is not finite", k + 2));
        }
    }
    let mut q = [nums[3], nums[4], nums[5], nums[6]];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > LOAD_QUAT_TOL {
        return Err(format!("quaternion norm {n} is not unit within {LOAD_QUAT_TOL}"));
    }
    if (n - 1.0).abs() > 1e-12 {
        q.iter_mut().for_each(|v| *v /= n);
    }
    Ok((fields[0].to_string(), Pose::new([nums[0], nums[1], nums[2]], q)))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with(root, LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let manifest: PathBuf = root.join("poses.txt");
    let text = fs::read_to_string(&manifest)?;
    let mut samples = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (id, mut pose) = parse_record(line).map_err(|msg| Error::Parse {
            path: manifest.clone(),
            line: k + 1,
            msg,
        })?;
        if opts.canonicalize {
            pose = pose.canonical();
        }
        let grid = read_grid(&root.join(format!("{id}.bin")))?;
        samples.push(Sample { grid, pose });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::new(samples))
}
