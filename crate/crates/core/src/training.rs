//! Composite loss, the per-stock training loop, checkpoints and inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::data::{DatasetSplit, WindowPair, N_FEATURES};
use crate::diffusion::{diffuse_with, DiffusionSchedule, TargetAlpha};
use crate::error::{DvaError, Result};
use crate::layers::Mode;
use crate::model::{dsm_graph, output_kl_graph, DvaModel, LatentNoise, ModelConfig, Net};
use crate::optim::AdamState;
use crate::tensor::Tensor;

/// Fixed output scale of the predictive Gaussian.
pub const S_OUT: f64 = 1.0;

/// What the generator's squared error is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseTarget {
    /// The diffused target `y_n`.
    #[default]
    Diffused,
    Clean,
}

fn default_true() -> bool {
    true
}

macro_rules! default_fn {
    ($name:ident, $ty:ty, $v:expr) => {
        fn $name() -> $ty {
            $v
        }
    };
}

default_fn!(d_t, usize, 10);
default_fn!(d_steps, usize, 100);
default_fn!(d_beta_min, f64, 1e-4);
default_fn!(d_beta_max, f64, 0.1);
default_fn!(d_gamma, f64, 0.5);
default_fn!(d_zeta, f64, 0.5);
default_fn!(d_eta, f64, 1.0);
default_fn!(d_lr, f64, 5e-4);
default_fn!(d_batch, usize, 16);
default_fn!(d_epochs, usize, 20);
default_fn!(d_channels, usize, 16);
default_fn!(d_latent, usize, 4);
default_fn!(d_hidden, usize, 32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_t")]
    pub t_in: usize,
    #[serde(default = "d_t")]
    pub t_out: usize,
    #[serde(default = "d_steps")]
    pub n_steps: usize,
    #[serde(default = "d_beta_min")]
    pub beta_min: f64,
    #[serde(default = "d_beta_max")]
    pub beta_max: f64,
    #[serde(default = "d_gamma")]
    pub gamma_scale: f64,
    /// Weight of the KL terms.
    #[serde(default = "d_zeta")]
    pub zeta: f64,
    /// Weight of the denoising score-matching term.
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub output_kl: bool,
    #[serde(default = "default_true")]
    pub latent_kl: bool,
    #[serde(default)]
    pub step_embedding: bool,
    #[serde(default = "default_true")]
    pub denoiser: bool,
    #[serde(default = "default_true")]
    pub diffuse_input: bool,
    #[serde(default = "default_true")]
    pub diffuse_target: bool,
    #[serde(default)]
    pub target_alpha: TargetAlpha,
    #[serde(default)]
    pub mse_target: MseTarget,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_hidden")]
    pub energy_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0 && self.eta >= 0.0) {
            return Err(DvaError::config("zeta and eta must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(DvaError::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(DvaError::config("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DvaError::config("learning_rate must be positive"));
        }
        self.schedule()?;
        self.model_config().validate()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.n_steps, self.beta_min, self.beta_max, self.gamma_scale)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_in: self.t_in,
            t_out: self.t_out,
            channels: self.channels,
            latent_dim: self.latent_dim,
            energy_hidden: self.energy_hidden,
            step_embedding: self.step_embedding,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-channel input and scalar target standardization fitted on training
/// windows. A constant channel keeps unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: [f64; N_FEATURES],
    pub x_std: [f64; N_FEATURES],
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Standardizer {
    pub fn fit(train: &[WindowPair]) -> Result<Self> {
        if train.is_empty() {
            return Err(DvaError::config("cannot fit scalers on an empty training split"));
        }
        let mut x_mean = [0.0; N_FEATURES];
        let mut x_std = [1.0; N_FEATURES];
        for c in 0..N_FEATURES {
            let (m, s) = mean_std(train.iter().flat_map(|w| w.x.iter().map(move |row| row[c])));
            x_mean[c] = m;
            x_std[c] = s;
        }
        let (y_mean, y_std) = mean_std(train.iter().flat_map(|w| w.y.iter().copied()));
        Ok(Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    /// `[B, 6, T]` in model units.
    pub fn inputs(&self, windows: &[&WindowPair]) -> Result<Tensor> {
        let t = windows
            .first()
            .ok_or_else(|| DvaError::contract("empty batch"))?
            .x
            .len();
        let mut data = Vec::with_capacity(windows.len() * N_FEATURES * t);
        for w in windows {
            if w.x.len() != t {
                return Err(DvaError::contract("input windows differ in length"));
            }
            for c in 0..N_FEATURES {
                data.extend(w.x.iter().map(|row| (row[c] - self.x_mean[c]) / self.x_std[c]));
            }
        }
        Tensor::new(vec![windows.len(), N_FEATURES, t], data)
    }

    /// `[B, T']` in model units.
    pub fn targets(&self, windows: &[&WindowPair]) -> Result<Tensor> {
        let t = windows
            .first()
            .ok_or_else(|| DvaError::contract("empty batch"))?
            .y
            .len();
        let mut data = Vec::with_capacity(windows.len() * t);
        for w in windows {
            if w.y.len() != t {
                return Err(DvaError::contract("target windows differ in length"));
            }
            data.extend(w.y.iter().map(|v| (v - self.y_mean) / self.y_std));
        }
        Tensor::new(vec![windows.len(), t], data)
    }

    pub fn restore(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// Loss components as reported; `total = mse + zeta * kl + eta * dsm`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    pub kl: f64,
    pub dsm: f64,
    pub total: f64,
}

/// One diffused training batch in model units.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Clean inputs `[B, 6, T]`.
    pub x: Tensor,
    /// Clean targets `[B, T']`.
    pub y: Tensor,
    /// Diffused inputs fed to the encoder.
    pub x_n: Tensor,
    /// Diffused targets.
    pub y_n: Tensor,
    pub step: usize,
}

impl Batch {
    /// Draw a step uniformly in `1..=N` and independent noise for inputs and
    /// targets, honoring the diffusion toggles.
    pub fn diffuse<R: Rng>(
        x: Tensor,
        y: Tensor,
        schedule: &DiffusionSchedule,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Batch> {
        let step = rng.random_range(1..=schedule.steps());
        let noise = |t: &Tensor, rng: &mut R| {
            let data = (0..t.len()).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        let eps_x = noise(&x, rng);
        let eps_y = noise(&y, rng);
        let x_n = if cfg.diffuse_input {
            diffuse_with(&x, schedule.alpha_bar(step), &eps_x)?
        } else {
            x.clone()
        };
        let y_n = if cfg.diffuse_target {
            diffuse_with(&y, schedule.target_alpha_bar(step, cfg.target_alpha), &eps_y)?
        } else {
            y.clone()
        };
        Ok(Batch { x, y, x_n, y_n, step })
    }
}

/// Graph handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
    pub dsm: Var,
    pub y_hat: Var,
}

/// Record `L = MSE + zeta * KL + eta * DSM` for one batch.
///
/// KL is the sum of the per-group latent KLs and the output KL against the
/// diffused-target marginal, each behind its toggle. The output KL is skipped
/// when target diffusion is off since its reference distribution degenerates.
pub fn total_loss(
    g: &mut Graph,
    net: &mut Net<'_>,
    batch: &Batch,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    noise: &mut LatentNoise<'_>,
) -> Result<LossVars> {
    let x = g.constant(batch.x_n.clone());
    let out = net.forward(g, x, cfg.step_embedding.then_some(batch.step), noise)?;
    let y = g.constant(batch.y.clone());
    let y_n = g.constant(batch.y_n.clone());

    let target = match cfg.mse_target {
        MseTarget::Diffused => y_n,
        MseTarget::Clean => y,
    };
    let d = g.sub(out.y_hat, target)?;
    let d2 = g.square(d);
    let mse = g.mean(d2);

    let mut kl = g.constant(Tensor::scalar(0.0));
    if cfg.latent_kl {
        for group in &out.groups {
            let k = group
                .kl
                .ok_or_else(|| DvaError::contract("posterior pass produced no KL"))?;
            kl = g.add(kl, k)?;
        }
    }
    if cfg.output_kl && cfg.diffuse_target {
        let ab = schedule.target_alpha_bar(batch.step, cfg.target_alpha);
        let ok = output_kl_graph(g, out.y_hat, y, S_OUT, ab)?;
        kl = g.add(kl, ok)?;
    }

    let dsm = if cfg.denoiser {
        dsm_graph(net, g, out.y_hat, y, schedule.sigma(batch.step))?
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let wk = g.scale(kl, cfg.zeta);
    let total = g.add(mse, wk)?;
    let wd = g.scale(dsm, cfg.eta);
    let total = g.add(total, wd)?;
    Ok(LossVars {
        total,
        mse,
        kl,
        dsm,
        y_hat: out.y_hat,
    })
}

impl LossVars {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            mse: g.value(self.mse).item(),
            kl: g.value(self.kl).item(),
            dsm: g.value(self.dsm).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Forward, loss and backward for one batch in train mode. Batch-norm running
/// statistics are updated on `model`.
pub fn train_step(
    model: &mut DvaModel,
    batch: &Batch,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(LossComponents, Gradients)> {
    let mut g = Graph::new();
    let mut net = model.net(Mode::Train);
    let vars = total_loss(&mut g, &mut net, batch, schedule, cfg, &mut LatentNoise::Sample(rng))?;
    let comps = vars.components(&g);
    let grads = g.backward(vars.total)?;
    let updates = std::mem::take(&mut net.bn_updates);
    model.apply_bn_updates(&updates);
    Ok((comps, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean training loss components.
    pub train: LossComponents,
    pub validation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub batches: usize,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// A trained model with everything needed to predict from raw windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub ticker: String,
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub standardizer: Standardizer,
    pub model: DvaModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and check the stored config against `expected_hash` when given.
    pub fn from_json(text: &str, expected_hash: Option<&str>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(DvaError::config(format!(
                "unsupported checkpoint format {}",
                ck.format_version
            )));
        }
        let actual = ck.config.hash();
        if actual != ck.config_hash {
            return Err(DvaError::HashMismatch {
                expected: ck.config_hash.clone(),
                found: actual,
            });
        }
        if let Some(expected) = expected_hash {
            if expected != ck.config_hash {
                return Err(DvaError::HashMismatch {
                    expected: expected.to_string(),
                    found: ck.config_hash,
                });
            }
        }
        Ok(ck)
    }
}

/// Deterministic predictions in return units for each window: posterior
/// means from clean inputs, then the denoising jump if the denoiser is on.
pub fn predict(ck: &Checkpoint, windows: &[WindowPair]) -> Result<Vec<Vec<f64>>> {
    predict_with(ck, windows, ck.config.denoiser)
}

/// As [`predict`], with the denoising jump chosen by the caller.
pub fn predict_with(ck: &Checkpoint, windows: &[WindowPair], jump: bool) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    let cfg = &ck.config;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        for w in chunk {
            if w.x.len() != cfg.t_in {
                return Err(DvaError::contract(format!(
                    "window at {} has {} input rows, model expects {}",
                    w.anchor,
                    w.x.len(),
                    cfg.t_in
                )));
            }
        }
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let x = ck.standardizer.inputs(&refs)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut net = ck.model.net(Mode::Infer);
        let gen = net.forward(&mut g, xv, None, &mut LatentNoise::Mean)?;
        let y = if jump {
            let grad = net.energy_grad(&mut g, gen.y_hat)?;
            g.sub(gen.y_hat, grad)?
        } else {
            gen.y_hat
        };
        let y = g.value(y);
        y.check_finite("prediction")?;
        for row in y.data().chunks(cfg.t_out) {
            out.push(row.iter().map(|&v| ck.standardizer.restore(v)).collect());
        }
    }
    Ok(out)
}

/// Mean squared error over every step of every window, in return units.
pub fn windows_mse(preds: &[Vec<f64>], windows: &[WindowPair]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        for (a, b) in p.iter().zip(&w.y) {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

#[derive(Debug, Clone)]
pub struct TrainedStock {
    pub checkpoint: Checkpoint,
    pub history: RunHistory,
}

/// Train one model on one stock with Adam, validating every epoch and keeping
/// the parameters of the epoch with the lowest validation MSE.
pub fn train_stock(ticker: &str, run: usize, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainedStock> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(DvaError::config(format!("{ticker}: empty train or validation split")));
    }
    let seed = cfg.seed.wrapping_add(run as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = cfg.schedule()?;
    let standardizer = Standardizer::fit(&split.train)?;
    let mut model = DvaModel::init(cfg.model_config(), &mut rng)?;
    let mut adam = AdamState::new(cfg.learning_rate);

    let mut current = Checkpoint {
        format_version: CHECKPOINT_FORMAT,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        ticker: ticker.to_string(),
        run,
        seed,
        best_epoch: 0,
        standardizer: standardizer.clone(),
        model: model.clone(),
    };
    let mut best: Option<(f64, DvaModel, usize)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batches = 0;
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossComponents::default();
        let mut count = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<&WindowPair> = idx.iter().map(|&i| &split.train[i]).collect();
            let x = standardizer.inputs(&windows)?;
            let y = standardizer.targets(&windows)?;
            let batch = Batch::diffuse(x, y, &schedule, cfg, &mut rng)?;
            let (c, grads) = train_step(&mut model, &batch, &schedule, cfg, &mut rng)?;
            for (name, v) in [("mse", c.mse), ("kl", c.kl), ("dsm", c.dsm), ("total", c.total)] {
                if !v.is_finite() {
                    return Err(DvaError::NonFinite {
                        epoch,
                        batch: b,
                        component: name.to_string(),
                    });
                }
            }
            adam.update(&mut model.params, &grads)?;
            if !model.params.is_finite() {
                return Err(DvaError::NonFinite {
                    epoch,
                    batch: b,
                    component: "parameters".to_string(),
                });
            }
            acc.mse += c.mse;
            acc.kl += c.kl;
            acc.dsm += c.dsm;
            acc.total += c.total;
            count += 1;
            batches += 1;
        }
        let k = count as f64;
        let train = LossComponents {
            mse: acc.mse / k,
            kl: acc.kl / k,
            dsm: acc.dsm / k,
            total: acc.total / k,
        };

        current.model = model.clone();
        let val = windows_mse(&predict(&current, &split.validation)?, &split.validation);
        log::debug!("{ticker} run {run} epoch {epoch}: train {:.6} val {val:.3e}", train.total);
        if best.as_ref().is_none_or(|(m, _, _)| val < *m) {
            best = Some((val, model.clone(), epoch));
        }
        epochs.push(EpochRecord {
            epoch,
            train,
            validation_mse: val,
        });
    }
    let (_, best_model, best_epoch) = best.expect("at least one epoch");
    current.model = best_model;
    current.best_epoch = best_epoch;
    Ok(TrainedStock {
        checkpoint: current,
        history: RunHistory {
            epochs,
            best_epoch,
            batches,
        },
    })
}
