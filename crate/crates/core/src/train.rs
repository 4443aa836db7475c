//! Training loop, learning-rate schedule, early stopping, run records and the
//! experiment drivers (ablation, sparse-view sweep, distillation).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, augment, stack, subsample_uniform, Dataset, SceneConfig};
use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::gis::GisMode;
use crate::graph::Graph;
use crate::model::{MambaLoc, ModelConfig};
use crate::nn::{uniform_init, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::pose::{pose_targets, LossWeights, PoseMetrics};
use crate::rng;
use crate::tensor::Tensor;

/// Allowed subsampling fractions.
pub const FRACTIONS: [f64; 5] = [1.0, 0.5, 1.0 / 3.0, 0.1, 0.05];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch: usize,
    pub max_epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub patience: usize,
    pub seed: u64,
    pub sparsity: f64,
    /// Trailing share of the training trajectory held out for validation.
    pub val_fraction: f64,
    /// Additive noise applied to training grids after cropping.
    pub augment_noise: f64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    /// Load `train/` and `test/` from here instead of synthesising.
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam: AdamConfig::default(),
            batch: 8,
            max_epochs: 600,
            lr_decay_every: 100,
            lr_decay_factor: 0.1,
            patience: 5,
            seed: 0,
            sparsity: 1.0,
            val_fraction: 0.2,
            augment_noise: 0.05,
            model: ModelConfig::toy(),
            scene: SceneConfig::default(),
            data_dir: None,
            out: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.lr_decay_every.max(1);
        self.lr * self.lr_decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch and max_epochs must be positive".into()));
        }
        if !FRACTIONS.iter().any(|f| (f - self.sparsity).abs() < 1e-9) {
            return Err(Error::Config(format!("sparsity {} is not one of 1, 1/2, 1/3, 1/10, 1/20", self.sparsity)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.model.grid_h > self.scene.render_h || self.model.grid_w > self.scene.render_w {
            return Err(Error::Config("crop is larger than the rendered grid".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn frac(key: &str, v: &str) -> Result<f64> {
            match v.split_once('/') {
                Some((a, b)) => Ok(num::<f64>(key, a)? / num::<f64>(key, b)?),
                None => num(key, v),
            }
        }
        let m = &mut self.model;
        match key {
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "weight_decay" => self.adam.weight_decay = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "max_epochs" | "epochs" => self.max_epochs = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sparsity" => self.sparsity = frac(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "augment_noise" => self.augment_noise = num(key, value)?,
            "gis_mode" => m.gis_mode = value.parse()?,
            "gis_combine" => m.gis_combine = value.parse()?,
            "preset" => {
                let mode = m.gis_mode;
                *m = match value {
                    "toy" => ModelConfig::toy(),
                    "paper" => ModelConfig::paper(),
                    other => return Err(Error::Config(format!("unknown preset `{other}`"))),
                };
                m.gis_mode = mode;
            }
            "c_t" => m.c_t = num(key, value)?,
            "stride_x" => m.stride_x = num(key, value)?,
            "stride_q" => m.stride_q = num(key, value)?,
            "blocks" => m.n_blocks = num(key, value)?,
            "heads" => m.n_heads = num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "head_hidden" => m.head_hidden = num(key, value)?,
            "state_dim" => m.state_dim = num(key, value)?,
            "scan_chunk" => m.scan_chunk = if value == "none" { None } else { Some(num(key, value)?) },
            "beta0" => m.beta0 = num(key, value)?,
            "gamma0" => m.gamma0 = num(key, value)?,
            "scene_seed" => self.scene.scene_seed = num(key, value)?,
            "landmarks" => self.scene.landmarks = num(key, value)?,
            "diameter" => self.scene.diameter = num(key, value)?,
            "train_frames" => self.scene.train.frames = num(key, value)?,
            "test_frames" => self.scene.test_frames = num(key, value)?,
            "train_seed" => self.scene.train_seed = num(key, value)?,
            "test_seed" => self.scene.test_seed = num(key, value)?,
            "noise_sigma" => self.scene.noise_sigma = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text, one setting per line; `#` starts a
    /// comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Filled in by the ablation driver.
    pub epochs_to_threshold: Option<usize>,
    pub metrics: PoseMetrics,
    pub wall_time_s: f64,
    pub param_count: usize,
    pub gis_param_count: usize,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_losses().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// First 1-based epoch whose validation loss is at or below `threshold`.
    pub fn first_epoch_below(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_loss <= threshold).map(|e| e.epoch)
    }

    /// Writes the record as JSON through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Train, validation and test views for a configuration.
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Synthesises (or loads) the data, splits off the validation tail and
/// applies the configured sparsity to the training part only.
pub fn prepare_data(cfg: &TrainConfig) -> Result<DataSplits> {
    let (train_all, test) = match &cfg.data_dir {
        Some(dir) => (data::load_dataset(&dir.join("train"))?, data::load_dataset(&dir.join("test"))?),
        None => {
            let s = data::synthesize(&cfg.scene)?;
            (s.train, s.test)
        }
    };
    let (train, val) = train_all.split_tail(cfg.val_fraction);
    let train = subsample_uniform(&train, cfg.sparsity)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(DataSplits { train, val, test })
}

/// Pose residual on a dataset with unit loss weights, i.e. mean translation
/// residual plus mean quaternion residual. Used for validation so that the
/// value stays comparable across runs with different learned weights.
pub fn validation_loss(model: &MambaLoc, store: &ParamStore, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = model.predict(store, ds, 32)?;
    let mut total = 0.0;
    for (p, s) in pred.iter().zip(ds.iter()) {
        total += crate::pose::pose_loss_value(p, &s.pose, 0.0, 0.0)?;
    }
    Ok(total / ds.len() as f64)
}

fn numeric(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::DegenerateQuaternion(_) => {
            Error::NonFiniteLoss { epoch, step }
        }
        other => other,
    }
}

/// Batches of training indices for one epoch, shuffled by `(seed, epoch)`.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(rng::derive(seed, 0x6570_0000 + epoch as u64)));
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Cropped, noised training grids and targets for one batch.
fn training_batch(cfg: &TrainConfig, ds: &Dataset, idx: &[usize], seed: u64) -> Result<(Tensor, Tensor, Tensor)> {
    let mut r = rng::seeded(seed);
    let grids = idx
        .iter()
        .map(|&i| augment(&ds.get(i).grid, cfg.model.grid_h, cfg.model.grid_w, cfg.augment_noise, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let poses: Vec<_> = idx.iter().map(|&i| &ds.get(i).pose).collect();
    let (x, q) = pose_targets(&poses);
    Ok((stack(&grids)?, x, q))
}

/// Drives epochs with the step schedule and early stopping; `step_fn` runs
/// one optimisation step and returns its loss.
fn fit<F>(
    cfg: &TrainConfig,
    model: &MambaLoc,
    store: &mut ParamStore,
    splits: &DataSplits,
    mut step_fn: F,
) -> Result<(Vec<EpochLog>, usize, bool)>
where
    F: FnMut(&mut ParamStore, &[usize], u64, f64, usize, usize) -> Result<f64>,
{
    let mut logs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut stale = 0;
    let mut stopped = false;
    let mut global_step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        let batches = epoch_batches(splits.train.len(), cfg.batch, cfg.seed, epoch);
        for (step, idx) in batches.iter().enumerate() {
            global_step += 1;
            let seed = rng::derive(cfg.seed, 0x5000_0000_0000 + global_step);
            let loss = step_fn(store, idx, seed, lr, epoch, step)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sum += loss * idx.len() as f64;
        }
        let train_loss = sum / splits.train.len() as f64;
        let val_ds = if splits.val.is_empty() { &splits.train } else { &splits.val };
        let val_loss = validation_loss(model, store, val_ds)?;
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                stopped = true;
                break;
            }
        }
    }
    let best_epoch = best.1;
    *store = best.2;
    Ok((logs, best_epoch, stopped))
}

/// A trained model together with its parameters and run record.
pub struct Trained {
    pub model: MambaLoc,
    pub store: ParamStore,
    pub record: RunRecord,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    model: MambaLoc,
    store: ParamStore,
}

/// Writes the model layout and its parameters as JSON.
pub fn save_model(path: &Path, model: &MambaLoc, store: &ParamStore) -> Result<()> {
    #[derive(Serialize)]
    struct Ref<'a> {
        model: &'a MambaLoc,
        store: &'a ParamStore,
    }
    write_atomic(path, serde_json::to_string(&Ref { model, store })?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<(MambaLoc, ParamStore)> {
    let saved: SavedModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok((saved.model, saved.store))
}

pub fn train(cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    train_on(cfg, &splits, "train")
}

/// Trains on prepared splits, evaluating on `splits.test` at the end.
pub fn train_on(cfg: &TrainConfig, splits: &DataSplits, label: &str) -> Result<Trained> {
    cfg.validate()?;
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = MambaLoc::new(&mut store, cfg.model.clone(), rng::derive(cfg.seed, 0x6d6f64656c))?;
    let mut adam = Adam::new(cfg.adam, &store);
    let (epochs, best_epoch, stopped_early) = fit(cfg, &model, &mut store, splits, |store, idx, seed, lr, epoch, step| {
        let (grids, x, q) = training_batch(cfg, &splits.train, idx, seed)?;
        let mut g = Graph::training();
        let p = store.bind(&mut g);
        let run = |g: &mut Graph| -> Result<_> {
            let out = model.forward(g, &p, &grids, seed)?;
            let loss = model.loss(g, &p, &out, &x, &q)?;
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads))
        };
        let (loss, grads) = run(&mut g).map_err(|e| numeric(e, epoch, step))?;
        adam.step(store, &p, &grads, lr)?;
        Ok(loss)
    })?;
    let metrics = model.evaluate(&store, &splits.test).map_err(|e| numeric(e, epochs.len(), 0))?;
    let record = RunRecord {
        label: label.to_string(),
        config: cfg.clone(),
        epochs,
        best_epoch,
        stopped_early,
        epochs_to_threshold: None,
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        param_count: store.num_scalars(),
        gis_param_count: model.gis_params(),
    };
    Ok(Trained { model, store, record })
}

/// Ablation outcome: one record per selector mode and the shared threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ablation {
    pub threshold: f64,
    pub records: Vec<RunRecord>,
}

impl Ablation {
    pub fn arm(&self, mode: GisMode) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.config.model.gis_mode == mode)
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "threshold (1.2 x best off-arm val loss) = {:.5}\n{:<10} {:>8} {:>10} {:>12} {:>12} {:>10} {:>10}\n",
            self.threshold, "arm", "params", "epochs", "to_thresh", "val_best", "t_med", "r_med"
        );
        for r in &self.records {
            s += &format!(
                "{:<10} {:>8} {:>10} {:>12} {:>12.5} {:>10.4} {:>10.3}\n",
                r.config.model.gis_mode.to_string(),
                r.param_count,
                r.epochs.len(),
                r.epochs_to_threshold.map_or("-".to_string(), |e| e.to_string()),
                r.best_val_loss(),
                r.metrics.median_translation_error,
                r.metrics.median_rotation_error,
            );
        }
        s
    }
}

/// Sets each arm's `epochs_to_threshold` against 1.2× the off arm's best
/// validation loss.
pub fn score_ablation(mut records: Vec<RunRecord>) -> Result<Ablation> {
    let off = records
        .iter()
        .find(|r| r.config.model.gis_mode == GisMode::Off)
        .ok_or_else(|| Error::Config("ablation needs an off arm".into()))?;
    let threshold = 1.2 * off.best_val_loss();
    for r in &mut records {
        r.epochs_to_threshold = r.first_epoch_below(threshold);
    }
    Ok(Ablation { threshold, records })
}

/// Trains the three selector modes on identical data and seeds.
pub fn ablate(cfg: &TrainConfig) -> Result<Ablation> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    let mut records = Vec::new();
    for mode in [GisMode::Bidirectional, GisMode::Classical, GisMode::Off] {
        let mut c = cfg.clone();
        c.model.gis_mode = mode;
        records.push(train_on(&c, &splits, &format!("ablate-{mode}"))?.record);
    }
    score_ablation(records)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub record: RunRecord,
    /// Median translation error relative to the full-data run.
    pub degradation: f64,
}

/// Trains at each fraction (always including 1 as the reference) and
/// evaluates on the full test split.
pub fn sparse_sweep(cfg: &TrainConfig, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    for f in fractions {
        if !FRACTIONS.iter().any(|a| (a - f).abs() < 1e-9) {
            return Err(Error::Config(format!("fraction {f} is not one of 1, 1/2, 1/3, 1/10, 1/20")));
        }
    }
    let mut c = cfg.clone();
    c.sparsity = 1.0;
    let full = prepare_data(&c)?;
    let mut runs = Vec::new();
    let mut want: Vec<f64> = fractions.to_vec();
    if !want.iter().any(|f| (f - 1.0).abs() < 1e-9) {
        want.insert(0, 1.0);
    }
    for f in want {
        let mut c = cfg.clone();
        c.sparsity = f;
        let splits = DataSplits {
            train: subsample_uniform(&full.train, f)?,
            val: full.val.clone(),
            test: full.test.clone(),
        };
        runs.push((f, train_on(&c, &splits, &format!("sparse-{f:.4}"))?.record));
    }
    let base = runs
        .iter()
        .find(|(f, _)| (f - 1.0).abs() < 1e-9)
        .map(|(_, r)| r.metrics.median_translation_error)
        .unwrap();
    Ok(runs
        .into_iter()
        .filter(|(f, _)| fractions.iter().any(|a| (a - f).abs() < 1e-9))
        .map(|(fraction, record)| SweepPoint {
            fraction,
            degradation: record.metrics.median_translation_error / base,
            record,
        })
        .collect())
}

/// Fixed random map from the teacher's feature width to the student's.
pub fn feature_projection(teacher_width: usize, student_width: usize, seed: u64) -> Tensor {
    uniform_init(&mut rng::seeded(seed), vec![teacher_width, student_width], teacher_width)
}

/// Trains a reduced-width student against a frozen teacher with
/// `L_D = L_L + L_S + L_F`.
pub fn distill(
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
    teacher: (&MambaLoc, &ParamStore),
    splits: &DataSplits,
) -> Result<Trained> {
    let (teacher_model, teacher_store) = teacher;
    cfg.validate()?;
    dcfg.validate()?;
    let start = Instant::now();
    let scfg = TrainConfig {
        model: teacher_model.cfg.scaled_width(dcfg.width_ratio),
        ..cfg.clone()
    };
    let mut store = ParamStore::new();
    let model = MambaLoc::new(&mut store, scfg.model.clone(), rng::derive(cfg.seed, 0x73747564))?;
    let soft_w = LossWeights::new(&mut store, "soft", dcfg.beta_soft0, dcfg.gamma_soft0);
    let proj = feature_projection(2 * teacher_model.cfg.c_t, 2 * model.cfg.c_t, rng::derive(cfg.seed, 0x70726f6a));
    let mut adam = Adam::new(scfg.adam, &store);
    let (epochs, best_epoch, stopped_early) = fit(&scfg, &model, &mut store, splits, |store, idx, seed, lr, epoch, step| {
        let (grids, x, q) = training_batch(&scfg, &splits.train, idx, seed)?;
        // teacher in evaluation mode, parameters bound as constants
        let mut tg = Graph::new();
        let tp = teacher_store.bind_frozen(&mut tg);
        let tout = teacher_model.forward(&mut tg, &tp, &grids, 0)?;
        let tfeat = teacher_model.features(&mut tg, &tout)?;
        let (tx, tq, tf) = (
            tg.value(tout.x_hat).clone(),
            tg.value(tout.q_hat).clone(),
            tg.value(tfeat).clone(),
        );
        let mut g = Graph::training();
        let p = store.bind(&mut g);
        let run = |g: &mut Graph| -> Result<_> {
            let out = model.forward(g, &p, &grids, seed)?;
            let hard = model.loss(g, &p, &out, &x, &q)?;
            let tx = g.constant(tx.clone());
            let tq = g.constant(tq.clone());
            let soft = distill::soft_loss(
                g,
                out.x_hat,
                out.q_hat,
                tx,
                tq,
                p[soft_w.beta],
                p[soft_w.gamma],
                dcfg.temperature,
                dcfg.direction,
            )?;
            let tf = g.constant(tf.clone());
            let pm = g.constant(proj.clone());
            let ft = g.matmul(tf, pm)?;
            let fs = model.features(g, &out)?;
            let feat = distill::feature_loss(g, ft, fs)?;
            let total = distill::distill_total(g, hard, soft, feat)?;
            let grads = g.backward(total)?;
            Ok((g.value(total).item(), grads))
        };
        let (loss, grads) = run(&mut g).map_err(|e| numeric(e, epoch, step))?;
        adam.step(store, &p, &grads, lr)?;
        Ok(loss)
    })?;
    let metrics = model.evaluate(&store, &splits.test)?;
    let record = RunRecord {
        label: "distill".into(),
        config: scfg,
        epochs,
        best_epoch,
        stopped_early,
        epochs_to_threshold: None,
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        param_count: store.num_scalars(),
        gis_param_count: model.gis_params(),
    };
    Ok(Trained { model, store, record })
}

/// Convenience for reporting: `label → median translation error`.
pub fn translation_summary(records: &[RunRecord]) -> BTreeMap<String, f64> {
    records
        .iter()
        .map(|r| (r.label.clone(), r.metrics.median_translation_error))
        .collect()
}
