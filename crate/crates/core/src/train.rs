//! Run configuration, optimizers, the training loop and the ablation harness.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{entry, parse_pairs, parse_value, render, ConfigError};
use crate::data::{generate, Category, DataError, DatasetSplit, GeneratorConfig, Scene};
use crate::evaluation::{evaluate_model, EvalReport, DEFAULT_TOP_K};
use crate::losses::{match_learnable, total_loss, LossError, LossValues, LossWeights};
use crate::matching::scene_targets;
use crate::model::{DirModel, Fusion, Mode, ModelConfig, ModelError, ScaMode};
use crate::nn::Bound;
use crate::tensor::{save_checkpoint, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("epoch {epoch}, scene {scene}: {source}")]
    Loss { epoch: usize, scene: usize, source: LossError },
    #[error("epoch {epoch}, scene {scene}: gradient of `{param}` is not finite")]
    Gradient { epoch: usize, scene: usize, param: String },
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io(e: impl fmt::Display) -> TrainError {
    TrainError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::AdamW),
            _ => Err(format!("unknown optimizer `{s}`")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::AdamW => "adamw",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Grid size is taken from the model.
    pub data: GeneratorConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch from which the step size is multiplied by `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation period in epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Small model on the default synthetic dataset, sized so that a full run
    /// fits comfortably on one CPU core.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let data = GeneratorConfig { rows: model.grid_rows, cols: model.grid_cols, ..GeneratorConfig::default() };
        Self {
            model,
            loss: LossWeights::default(),
            data,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            epochs: 60,
            decay_epoch: 40,
            decay_factor: 0.1,
            batch_size: 1,
            grad_clip: 0.1,
            eval_every: 5,
            top_k: DEFAULT_TOP_K,
            seed: 0,
        }
    }

    /// Full-size schedule and architecture.
    pub fn full() -> Self {
        let model = ModelConfig::full();
        Self {
            data: GeneratorConfig { rows: model.grid_rows, cols: model.grid_cols, ..GeneratorConfig::default() },
            model,
            lr: 1e-4,
            epochs: 90,
            decay_epoch: 60,
            batch_size: 16,
            ..Self::desk()
        }
    }

    /// Reduced model on the full dataset, for multi-seed ablations on one core.
    pub fn trend() -> Self {
        let mut model = ModelConfig::desk();
        model.grid_rows = 8;
        model.grid_cols = 8;
        model.dim = 32;
        model.ffn_dim = 64;
        model.queries = 8;
        model.sca_queries = 8;
        model.encoder_layers = 1;
        model.detection_layers = 1;
        model.interaction_layers = 1;
        model.pose_layers = 1;
        let data = GeneratorConfig { rows: 8, cols: 8, ..GeneratorConfig::default() };
        Self { model, data, epochs: 30, decay_epoch: 24, eval_every: 3, ..Self::desk() }
    }

    /// Tiny model and dataset for smoke tests.
    pub fn tiny() -> Self {
        let mut model = ModelConfig::desk();
        model.grid_rows = 4;
        model.grid_cols = 4;
        model.dim = 16;
        model.ffn_dim = 16;
        model.queries = 6;
        model.sca_queries = 6;
        model.encoder_layers = 1;
        model.detection_layers = 1;
        model.interaction_layers = 1;
        model.pose_layers = 1;
        let data = GeneratorConfig { rows: 4, cols: 4, n_train: 8, n_val: 4, n_test: 4, ..GeneratorConfig::default() };
        Self { model, data, epochs: 2, decay_epoch: 1, batch_size: 2, eval_every: 1, ..Self::desk() }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "trend" => Ok(Self::trend()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(ConfigError::BadValue { key: "profile".into(), value: name.into() }.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()).into());
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.top_k == 0 {
            return bad("epochs, batch_size, eval_every and top_k must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum and beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.decay_factor <= 0.0 {
            return bad("weight_decay and grad_clip must be non-negative, decay_factor positive");
        }
        if self.data.n_train == 0 {
            return bad("train_scenes must be positive");
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let l = &self.loss;
        let d = &self.data;
        let mut out = vec![
            entry("seed", self.seed),
            entry("optimizer", self.optimizer),
            entry("lr", self.lr),
            entry("momentum", self.momentum),
            entry("beta2", self.beta2),
            entry("weight_decay", self.weight_decay),
            entry("epochs", self.epochs),
            entry("decay_epoch", self.decay_epoch),
            entry("decay_factor", self.decay_factor),
            entry("batch_size", self.batch_size),
            entry("grad_clip", self.grad_clip),
            entry("eval_every", self.eval_every),
            entry("top_k", self.top_k),
            entry("loss_alpha", l.alpha),
            entry("loss_beta", l.beta),
            entry("loss_gamma", l.gamma),
            entry("lambda_box", l.lambda_b),
            entry("lambda_giou", l.lambda_u),
            entry("lambda_class", l.lambda_c),
            entry("lambda_verb", l.lambda_a),
            entry("focal_alpha", l.focal_alpha),
            entry("focal_gamma", l.focal_gamma),
            entry("background_weight", l.background_weight),
            entry("train_scenes", d.n_train),
            entry("val_scenes", d.n_val),
            entry("test_scenes", d.n_test),
            entry("rare_quota", d.rare_quota),
            entry("feature_noise", d.feature_noise),
            entry("keypoint_noise", d.keypoint_noise),
        ];
        out.extend(self.model.entries());
        out
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    /// Applies one key, rejecting unknown ones.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let l = &mut self.loss;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "optimizer" => self.optimizer = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "decay_epoch" => self.decay_epoch = parse_value(key, v)?,
            "decay_factor" => self.decay_factor = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "top_k" => self.top_k = parse_value(key, v)?,
            "loss_alpha" => l.alpha = parse_value(key, v)?,
            "loss_beta" => l.beta = parse_value(key, v)?,
            "loss_gamma" => l.gamma = parse_value(key, v)?,
            "lambda_box" => l.lambda_b = parse_value(key, v)?,
            "lambda_giou" => l.lambda_u = parse_value(key, v)?,
            "lambda_class" => l.lambda_c = parse_value(key, v)?,
            "lambda_verb" => l.lambda_a = parse_value(key, v)?,
            "focal_alpha" => l.focal_alpha = parse_value(key, v)?,
            "focal_gamma" => l.focal_gamma = parse_value(key, v)?,
            "background_weight" => l.background_weight = parse_value(key, v)?,
            "train_scenes" => d.n_train = parse_value(key, v)?,
            "val_scenes" => d.n_val = parse_value(key, v)?,
            "test_scenes" => d.n_test = parse_value(key, v)?,
            "rare_quota" => d.rare_quota = parse_value(key, v)?,
            "feature_noise" => d.feature_noise = parse_value(key, v)?,
            "keypoint_noise" => d.keypoint_noise = parse_value(key, v)?,
            _ => {
                if !self.model.set(key, v)? {
                    return Err(ConfigError::UnknownKey(key.into()).into());
                }
                self.data.rows = self.model.grid_rows;
                self.data.cols = self.model.grid_cols;
            }
        }
        Ok(())
    }

    /// Parses config text. An optional leading `profile = NAME` selects the
    /// base values; every other key overrides one field.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "profile") {
            Some((_, _, v)) => Self::profile(v)?,
            None => Self::desk(),
        };
        for (_, k, v) in pairs.iter().filter(|(_, k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn dataset(&self) -> DatasetSplit {
        generate(self.seed, &self.data)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// First-order optimizer state over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta2: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            second: if cfg.optimizer == OptimizerKind::AdamW { zeros.clone() } else { Vec::new() },
            first: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((x, &gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                        *b = self.momentum * *b + gi + self.weight_decay * *x;
                        *x -= lr * *b;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let (b1, b2) = (self.momentum, self.beta2);
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                        *x -= lr * (update + self.weight_decay * *x);
                    }
                }
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loss and gradients of one scene at the current weights.
pub fn scene_gradients(model: &DirModel, scene: &Scene, w: &LossWeights) -> std::result::Result<(LossValues, Vec<Vec<f64>>), LossError> {
    let mut tape = Tape::new();
    let p = Bound::bind(&model.store, &mut tape, true);
    let pairs = scene.box_pairs();
    let out = model
        .forward(&mut tape, &p, &scene.feature_tensor(), Mode::Train(&pairs), None)
        .map_err(|e| LossError::NonFinite(format!("forward pass ({e})")))?;
    let gt = scene_targets(scene);
    let matching = match_learnable(&tape, &out, &gt, w)?;
    let terms = total_loss(&mut tape, &out, &gt, &matching, &model.config, w)?;
    terms.check_finite(&tape)?;
    tape.backward(terms.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.store.values())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], Tensor::into_data))
        .collect();
    Ok((terms.values(&tape), grads))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l_l: f64,
    pub l_s: f64,
    pub l_p: f64,
    pub grad_norm: f64,
    /// Default-mode full mAP on the validation split, when evaluated.
    pub val_map: Option<f64>,
}

pub struct TrainOutcome {
    /// Carries the best-by-validation weights.
    pub model: DirModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    /// Writes `checkpoint.bin`, `metrics.jsonl` and `config.txt` into `dir`.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(io)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.model.store.entries())?;
        fs::write(dir.join(METRICS_FILE), self.log_text()).map_err(io)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text()).map_err(io)?;
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// Trains from the seed in `cfg`. `progress` receives each epoch record as
/// soon as it is produced.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.rows != cfg.model.grid_rows || data.cols != cfg.model.grid_cols {
        return Err(ConfigError::Invalid(format!(
            "dataset grid {}x{} does not match model grid {}x{}",
            data.rows, data.cols, cfg.model.grid_rows, cfg.model.grid_cols
        ))
        .into());
    }
    let mut model = DirModel::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg, model.store.values());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let rare = data.rare_categories();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, Vec<(String, Tensor)>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let lr = cfg.lr_at(epoch);
        let mut sums = LossValues::default();
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.store.values().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let (vals, grads) = scene_gradients(&model, &data.train[i], &cfg.loss)
                    .map_err(|source| TrainError::Loss { epoch, scene: data.train[i].id, source })?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(k) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
                    let param = model.store.names()[k].clone();
                    return Err(TrainError::Gradient { epoch, scene: data.train[i].id, param });
                }
                sums.total += vals.total;
                sums.l_l += vals.l_l;
                sums.l_s += vals.l_s;
                sums.l_p += vals.l_p;
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            norm_sum += clip_grad_norm(&mut acc, cfg.grad_clip);
            opt.step(model.store.values_mut(), &acc, lr);
            batches += 1;
        }
        let n = data.train.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let val_map = if (epoch + 1) % cfg.eval_every == 0 || last {
            validation_map(&model, &data.val, &rare, cfg.top_k)?
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            total: sums.total / n,
            l_l: sums.l_l / n,
            l_s: sums.l_s / n,
            l_p: sums.l_p / n,
            grad_norm: norm_sum / batches as f64,
            val_map,
        };
        progress(&record);
        let validated = (epoch + 1) % cfg.eval_every == 0 || last;
        let improves = match &best {
            None => true,
            Some((_, b, _)) => validated && val_map.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY),
        };
        if validated && improves {
            best = Some((epoch + 1, val_map, model.store.entries()));
        }
        log.push(record);
    }
    let (best_epoch, best_val_map, entries) = best.expect("at least one epoch is validated");
    model.store.load_entries(entries)?;
    Ok(TrainOutcome { model, log, best_epoch, best_val_map })
}

fn validation_map(model: &DirModel, val: &[Scene], rare: &[Category], top_k: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(evaluate_model(model, val, rare, top_k)?.default.full)
}

/// Named model variants compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Sca,
    Ipe,
    LateFusion,
    EarlyFusion,
    NoPoseAttention,
    NoPoseLoss,
    NoScaQueries,
    NoGtBoxes,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Baseline,
        Variant::Sca,
        Variant::Ipe,
        Variant::LateFusion,
        Variant::EarlyFusion,
        Variant::NoPoseAttention,
        Variant::NoPoseLoss,
        Variant::NoScaQueries,
        Variant::NoGtBoxes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sca => "sca",
            Variant::Ipe => "ipe",
            Variant::LateFusion => "late",
            Variant::EarlyFusion => "early",
            Variant::NoPoseAttention => "no-ipa-mask",
            Variant::NoPoseLoss => "no-pose-loss",
            Variant::NoScaQueries => "no-sca-queries",
            Variant::NoGtBoxes => "no-gt-boxes",
        }
    }

    /// Sets the variant flags on top of an otherwise unchanged model config.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let (sca, ipe, fusion) = match self {
            Variant::Baseline => (ScaMode::Off, false, Fusion::Early),
            Variant::Sca => (ScaMode::GtBoxes, false, Fusion::Early),
            Variant::Ipe => (ScaMode::Off, true, Fusion::Early),
            Variant::LateFusion => (ScaMode::GtBoxes, true, Fusion::Late),
            Variant::NoScaQueries => (ScaMode::LearnableQueries, true, Fusion::Early),
            Variant::NoGtBoxes => (ScaMode::PredictedBoxes, true, Fusion::Early),
            Variant::EarlyFusion | Variant::NoPoseAttention | Variant::NoPoseLoss => (ScaMode::GtBoxes, true, Fusion::Early),
        };
        c.sca = sca;
        c.use_ipe = ipe;
        c.fusion = fusion;
        c.use_ipa_mask = self != Variant::NoPoseAttention;
        c.use_pose_loss = self != Variant::NoPoseLoss;
        c
    }
}

impl FromStr for Variant {
    type Err = ConfigError;
    fn from_str(s: &str) -> std::result::Result<Self, ConfigError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::BadValue { key: "variant".into(), value: s.into() })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl VariantResult {
    pub fn mean_full(&self) -> Option<f64> {
        mean(self.seeds.iter().map(|s| s.full))
    }
    pub fn mean_rare(&self) -> Option<f64> {
        mean(self.seeds.iter().map(|s| s.rare))
    }
    pub fn mean_non_rare(&self) -> Option<f64> {
        mean(self.seeds.iter().map(|s| s.non_rare))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<VariantResult>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = self.get(Variant::Baseline).and_then(VariantResult::mean_full);
        writeln!(f, "{:<16} {:>8} {:>8} {:>8} {:>8}  per-seed full", "variant", "full", "rare", "non-rare", "delta")?;
        for r in &self.rows {
            let delta = match (r.mean_full(), base) {
                (Some(a), Some(b)) => format!("{:+.2}", 100.0 * (a - b)),
                _ => "-".into(),
            };
            let seeds: Vec<String> = r.seeds.iter().map(|s| format!("{}:{}", s.seed, pct(s.full))).collect();
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>8} {:>8}  {}",
                r.variant.name(),
                pct(r.mean_full()),
                pct(r.mean_rare()),
                pct(r.mean_non_rare()),
                delta,
                seeds.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Trains every variant on every seed and evaluates on the test split.
/// Each seed fixes both the dataset and the initialization, so all variants
/// of one seed see the same data. `progress` is told about each finished run.
pub fn ablate(
    cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, &EvalReport),
) -> Result<AblationTable> {
    let mut rows: Vec<VariantResult> = variants.iter().map(|&variant| VariantResult { variant, seeds: Vec::new() }).collect();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let data = base.dataset();
        let rare = data.rare_categories();
        for row in rows.iter_mut() {
            let mut run = base.clone();
            run.model = row.variant.apply(&cfg.model);
            let outcome = train(&run, &data, |_| {})?;
            let report = evaluate_model(&outcome.model, &data.test, &rare, run.top_k)?;
            progress(row.variant, seed, &report);
            let d = &report.default;
            row.seeds.push(SeedResult { seed, full: d.full, rare: d.rare, non_rare: d.non_rare });
        }
    }
    Ok(AblationTable { rows })
}

/// Writes the ablation table and per-seed records to `dir`.
pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(io)?;
    let mut f = fs::File::create(dir.join("ablation.txt")).map_err(io)?;
    write!(f, "{table}").map_err(io)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
    let mut rec = String::new();
    for r in &table.rows {
        for s in &r.seeds {
            rec.push_str(&format!(
                "{}.seed{}.full = {}\n{}.seed{}.rare = {}\n{}.seed{}.non_rare = {}\n",
                r.variant, s.seed, opt(s.full), r.variant, s.seed, opt(s.rare), r.variant, s.seed, opt(s.non_rare)
            ));
        }
        rec.push_str(&format!("{}.mean.full = {}\n", r.variant, opt(r.mean_full())));
    }
    fs::write(dir.join("ablation_records.txt"), rec).map_err(io)?;
    Ok(())
}
