//! Hierarchical variational generator and energy-based denoiser.
//!
//! Layout, for an input window `[B, 6, T]`:
//!
//! ```text
//! encoder:  stem conv -> enc cell 1 (T) -> pool -> enc cell 2 (T/2) -> pool -> enc cell 3 (T/4)
//! decoder:  h (T/4) -> dec cell 1 -> Z1 -> up -> dec cell 2 -> Z2 -> up -> dec cell 3 -> Z3
//!           -> 1x1 conv to one channel -> dense T -> T'
//! ```
//!
//! Decoder group `i` pairs with the encoder level of the same time resolution
//! (group 1 with the coarsest level). Every sampled `Z_i` is concatenated onto
//! the decoder state and mixed back to `C` channels before the next cell.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::data::N_FEATURES;
use crate::error::{DvaError, Result};
use crate::layers::{se_block, Mode, RunningStats};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const N_GROUPS: usize = 3;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub energy_hidden: usize,
    pub step_embedding: bool,
}

impl ModelConfig {
    pub fn new(t_in: usize, t_out: usize) -> Self {
        ModelConfig {
            t_in,
            t_out,
            channels: 16,
            latent_dim: 4,
            energy_hidden: 32,
            step_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in < 4 {
            return Err(DvaError::config(format!(
                "input length {} is too short for three resolution levels (need >= 4)",
                self.t_in
            )));
        }
        if self.t_out == 0 || self.channels == 0 || self.latent_dim == 0 || self.energy_hidden == 0 {
            return Err(DvaError::config("model widths must be positive"));
        }
        Ok(())
    }

    /// Time length at encoder level `0..3` (finest first).
    pub fn level_len(&self, level: usize) -> usize {
        (0..level).fold(self.t_in, |t, _| t.div_ceil(2))
    }

    fn se_width(&self) -> usize {
        (self.channels / 4).max(1)
    }
}

/// Batch-norm running statistics keyed by layer name.
pub type BnStates = BTreeMap<String, RunningStats>;

/// How latent variables are produced during a forward pass.
pub enum LatentNoise<'a> {
    /// Use distribution means (deterministic evaluation).
    Mean,
    /// Reparameterized samples with noise from this generator.
    Sample(&'a mut dyn RngCore),
}

/// Graph handles for one latent group.
#[derive(Debug, Clone, Copy)]
pub struct GroupVars {
    pub q_mean: Option<Var>,
    pub q_logvar: Option<Var>,
    pub p_mean: Var,
    pub p_logvar: Var,
    pub z: Var,
    /// Batch-mean KL(q || p); absent in prior mode.
    pub kl: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// `[B, T']` prediction.
    pub y_hat: Var,
    pub groups: Vec<GroupVars>,
}

/// Materialized statistics of one latent group.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGroup {
    pub q_mean: Option<Tensor>,
    pub q_logvar: Option<Tensor>,
    pub p_mean: Tensor,
    pub p_logvar: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub y_hat: Tensor,
    pub groups: Vec<LatentGroup>,
    /// Per-group batch-mean KL; empty in prior mode.
    pub kl: Vec<f64>,
}

/// Sinusoidal embedding of a diffusion step, one value per channel.
pub fn step_embedding(step: usize, channels: usize) -> Tensor {
    let data = (0..channels)
        .map(|c| {
            let freq = 1.0 / 10_000f64.powf((2 * (c / 2)) as f64 / channels as f64);
            let a = step as f64 * freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect();
    Tensor::from_vec(data)
}

/// One forward pass over a parameter snapshot. Train-mode batch statistics
/// are collected in `bn_updates` for the caller to fold into running stats.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub bn: &'a BnStates,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore, bn: &'a BnStates, mode: Mode) -> Self {
        Net {
            cfg,
            params,
            bn,
            mode,
            bn_updates: Vec::new(),
        }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.params, name)
    }

    fn bn(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{name}.g"))?;
        let beta = self.p(g, &format!("{name}.b"))?;
        let (y, stats) = match self.mode {
            Mode::Train => g.batch_norm(x, gamma, beta, BnMode::Train)?,
            Mode::Infer => {
                let rs = self
                    .bn
                    .get(name)
                    .ok_or_else(|| DvaError::contract(format!("no running stats for {name}")))?;
                g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Infer {
                        mean: &rs.mean,
                        var: &rs.var,
                    },
                )?
            }
        };
        if let Some(stats) = stats {
            self.bn_updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    fn conv(&mut self, g: &mut Graph, x: Var, name: &str, groups: usize) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let y = g.conv1d(x, w, groups)?;
        let b = self.p(g, &format!("{name}.b"))?;
        g.add_axis1(y, b)
    }

    fn se(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w1 = self.p(g, &format!("{name}.w1"))?;
        let w2 = self.p(g, &format!("{name}.w2"))?;
        se_block(g, x, w1, w2)
    }

    /// `[BN -> Swish -> conv] x 2 -> SE`, plus the identity path.
    fn enc_cell(&mut self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        let p = format!("enc{i}");
        let a = self.bn(g, x, &format!("{p}.bn1"))?;
        let a = g.swish(a);
        let a = self.conv(g, a, &format!("{p}.conv1"), 1)?;
        let a = self.bn(g, a, &format!("{p}.bn2"))?;
        let a = g.swish(a);
        let a = self.conv(g, a, &format!("{p}.conv2"), 1)?;
        let a = self.se(g, a, &format!("{p}.se"))?;
        g.add(x, a)
    }

    /// `BN -> 1x1 expand -> BN -> Swish -> depthwise separable conv -> BN -> SE`,
    /// plus the identity path.
    fn dec_cell(&mut self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        let p = format!("dec{i}");
        let wide = 2 * self.cfg.channels;
        let a = self.bn(g, x, &format!("{p}.bn1"))?;
        let a = self.conv(g, a, &format!("{p}.expand"), 1)?;
        let a = self.bn(g, a, &format!("{p}.bn2"))?;
        let a = g.swish(a);
        let a = self.conv(g, a, &format!("{p}.dw"), wide)?;
        let a = self.conv(g, a, &format!("{p}.pw"), 1)?;
        let a = self.bn(g, a, &format!("{p}.bn3"))?;
        let a = self.se(g, a, &format!("{p}.se"))?;
        g.add(x, a)
    }

    /// Three encoder feature maps, finest first. `x` is `[B, 6, T]`.
    pub fn encode(&mut self, g: &mut Graph, x: Var, step: Option<usize>) -> Result<Vec<Var>> {
        self.cfg.validate()?;
        let (_, c, t) = g.value(x).dims3()?;
        if c != N_FEATURES || t != self.cfg.t_in {
            return Err(DvaError::contract(format!(
                "encoder expects [B, {N_FEATURES}, {}], got {:?}",
                self.cfg.t_in,
                g.value(x).shape()
            )));
        }
        let mut s = self.conv(g, x, "stem", 1)?;
        if self.cfg.step_embedding {
            let emb = g.constant(step_embedding(step.unwrap_or(0), self.cfg.channels));
            s = g.add_axis1(s, emb)?;
        }
        let l1 = self.enc_cell(g, s, 0)?;
        let d1 = g.avg_pool2(l1)?;
        let l2 = self.enc_cell(g, d1, 1)?;
        let d2 = g.avg_pool2(l2)?;
        let l3 = self.enc_cell(g, d2, 2)?;
        Ok(vec![l1, l2, l3])
    }

    fn split_stats(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let z = self.cfg.latent_dim;
        let mean = g.slice_channels(x, 0, z)?;
        let lv = g.slice_channels(x, z, z)?;
        Ok((mean, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }

    /// Top-down pass. With `enc` the latents come from the posterior,
    /// otherwise from the prior.
    pub fn generate(
        &mut self,
        g: &mut Graph,
        enc: Option<&[Var]>,
        batch: usize,
        noise: &mut LatentNoise<'_>,
    ) -> Result<GraphOutput> {
        self.cfg.validate()?;
        if let Some(levels) = enc {
            if levels.len() != N_GROUPS {
                return Err(DvaError::contract(format!(
                    "encoder stack has {} levels, expected {N_GROUPS}",
                    levels.len()
                )));
            }
        }
        let h = self.p(g, "dec.h")?;
        let mut state = g.broadcast_batch(h, batch);
        let mut groups = Vec::with_capacity(N_GROUPS);
        for i in 0..N_GROUPS {
            state = self.dec_cell(g, state, i)?;
            let prior = self.conv(g, state, &format!("lat{i}.prior"), 1)?;
            let (p_mean, p_logvar) = self.split_stats(g, prior)?;
            let (q, kl) = match enc {
                Some(levels) => {
                    let feat = levels[N_GROUPS - 1 - i];
                    let joined = g.concat_channels(state, feat)?;
                    let post = self.conv(g, joined, &format!("lat{i}.post"), 1)?;
                    let (q_mean, q_logvar) = self.split_stats(g, post)?;
                    let kl = kl_graph(g, q_mean, q_logvar, p_mean, p_logvar)?;
                    (Some((q_mean, q_logvar)), Some(kl))
                }
                None => (None, None),
            };
            let (mean, logvar) = q.unwrap_or((p_mean, p_logvar));
            let z = match noise {
                LatentNoise::Mean => mean,
                LatentNoise::Sample(rng) => {
                    let shape = g.value(mean).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let eps = g.constant(Tensor::from_parts(shape, eps));
                    let half = g.scale(logvar, 0.5);
                    let std = g.exp(half);
                    let scaled = g.mul(std, eps)?;
                    g.add(mean, scaled)?
                }
            };
            let joined = g.concat_channels(state, z)?;
            state = self.conv(g, joined, &format!("lat{i}.comb"), 1)?;
            if i + 1 < N_GROUPS {
                let len = self.cfg.level_len(N_GROUPS - 2 - i);
                state = g.upsample(state, len)?;
            }
            groups.push(GroupVars {
                q_mean: q.map(|q| q.0),
                q_logvar: q.map(|q| q.1),
                p_mean,
                p_logvar,
                z,
                kl,
            });
        }
        let o = self.conv(g, state, "out", 1)?;
        let o = g.reshape(o, &[batch, self.cfg.t_in])?;
        let w = self.p(g, "out.proj.w")?;
        let o = g.matmul_t(o, w)?;
        let b = self.p(g, "out.proj.b")?;
        let y_hat = g.add_axis1(o, b)?;
        Ok(GraphOutput { y_hat, groups })
    }

    /// Encoder + posterior generator in one call.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        step: Option<usize>,
        noise: &mut LatentNoise<'_>,
    ) -> Result<GraphOutput> {
        let batch = g.value(x).shape()[0];
        let enc = self.encode(g, x, step)?;
        self.generate(g, Some(&enc), batch, noise)
    }

    /// Per-sample energy `[B, T'] -> [B]`.
    pub fn energy(&mut self, g: &mut Graph, y: Var) -> Result<Var> {
        let (w1, b1, w2, b2, w3, b3) = self.energy_params(g)?;
        let a1 = g.matmul_t(y, w1)?;
        let a1 = g.add_axis1(a1, b1)?;
        let h1 = g.swish(a1);
        let a2 = g.matmul_t(h1, w2)?;
        let a2 = g.add_axis1(a2, b2)?;
        let h2 = g.swish(a2);
        let e = g.matmul_t(h2, w3)?;
        let e = g.add_axis1(e, b3)?;
        let batch = g.value(y).shape()[0];
        g.reshape(e, &[batch])
    }

    /// `grad_y E(y)` written out as a differentiable expression of the energy
    /// weights, so losses on it can be back-propagated with a first-order tape.
    pub fn energy_grad(&mut self, g: &mut Graph, y: Var) -> Result<Var> {
        let (w1, b1, w2, b2, w3, _) = self.energy_params(g)?;
        let a1 = g.matmul_t(y, w1)?;
        let a1 = g.add_axis1(a1, b1)?;
        let h1 = g.swish(a1);
        let a2 = g.matmul_t(h1, w2)?;
        let a2 = g.add_axis1(a2, b2)?;
        let hidden = self.cfg.energy_hidden;
        let w3v = g.reshape(w3, &[hidden])?;
        let d2 = g.swish_prime(a2);
        let g2 = g.mul_axis1(d2, w3v)?;
        let back = g.matmul(g2, w2)?;
        let d1 = g.swish_prime(a1);
        let g1 = g.mul(back, d1)?;
        g.matmul(g1, w1)
    }

    fn energy_params(&mut self, g: &mut Graph) -> Result<(Var, Var, Var, Var, Var, Var)> {
        Ok((
            self.p(g, "energy.w1")?,
            self.p(g, "energy.b1")?,
            self.p(g, "energy.w2")?,
            self.p(g, "energy.b2")?,
            self.p(g, "energy.w3")?,
            self.p(g, "energy.b3")?,
        ))
    }
}

/// Batch-mean of `KL(N(q_mean, e^q_logvar) || N(p_mean, e^p_logvar))` summed
/// over all non-batch dimensions.
pub fn kl_graph(g: &mut Graph, q_mean: Var, q_logvar: Var, p_mean: Var, p_logvar: Var) -> Result<Var> {
    let batch = g.value(q_mean).shape()[0] as f64;
    let d = g.sub(q_mean, p_mean)?;
    let d2 = g.square(d);
    let qv = g.exp(q_logvar);
    let num = g.add(qv, d2)?;
    let neg = g.scale(p_logvar, -1.0);
    let inv_p = g.exp(neg);
    let ratio = g.mul(num, inv_p)?;
    let lv = g.sub(p_logvar, q_logvar)?;
    let t = g.add(lv, ratio)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / batch))
}

/// Closed-form diagonal Gaussian KL summed over every entry.
pub fn kl_gaussian(q_mean: &Tensor, q_logvar: &Tensor, p_mean: &Tensor, p_logvar: &Tensor) -> Result<f64> {
    if q_mean.shape() != q_logvar.shape() || q_mean.shape() != p_mean.shape() || q_mean.shape() != p_logvar.shape()
    {
        return Err(DvaError::contract("kl_gaussian operands must share one shape"));
    }
    // treat the whole tensor as one sample
    let as_batch = |t: &Tensor| Tensor::from_parts(vec![1, t.len()], t.data().to_vec());
    let mut g = Graph::new();
    let qm = g.constant(as_batch(q_mean));
    let qv = g.constant(as_batch(q_logvar));
    let pm = g.constant(as_batch(p_mean));
    let pv = g.constant(as_batch(p_logvar));
    let kl = kl_graph(&mut g, qm, qv, pm, pv)?;
    Ok(g.value(kl).item())
}

/// Batch-mean of `KL(N(y_hat, s_out^2 I) || N(sqrt(ab) y, (1 - ab) I))`
/// summed over the `T'` steps; `ab` is the target cumulative alpha.
pub fn output_kl_graph(g: &mut Graph, y_hat: Var, y: Var, s_out: f64, alpha_bar: f64) -> Result<Var> {
    let var_p = 1.0 - alpha_bar;
    if var_p <= 0.0 {
        return Err(DvaError::contract(
            "output KL needs a positive target noise variance (step >= 1, gamma_scale > 0)",
        ));
    }
    let (batch, dims) = g.value(y_hat).dims2()?;
    let target = g.scale(y, alpha_bar.sqrt());
    let d = g.sub(y_hat, target)?;
    let d2 = g.square(d);
    let s = g.sum(d2);
    let mean_term = g.scale(s, 0.5 / (var_p * batch as f64));
    let per_dim = 0.5 * var_p.ln() - s_out.ln() + s_out * s_out / (2.0 * var_p) - 0.5;
    Ok(g.add_scalar(mean_term, per_dim * dims as f64))
}

pub fn output_kl(y_hat: &[f64], s_out: f64, y: &[f64], alpha_bar: f64) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(DvaError::contract("output_kl sequences differ in length"));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_parts(vec![1, y.len()], y_hat.to_vec()));
    let b = g.constant(Tensor::from_parts(vec![1, y.len()], y.to_vec()));
    let kl = output_kl_graph(&mut g, a, b, s_out, alpha_bar)?;
    Ok(g.value(kl).item())
}

/// Scalar energy over a prediction sequence, with its input gradient.
pub trait Energy {
    fn energy(&self, y: &[f64]) -> Result<f64>;
    fn grad(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// `E = 0`.
pub struct ZeroEnergy;

impl Energy for ZeroEnergy {
    fn energy(&self, _y: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; y.len()])
    }
}

/// `E(y) = 0.5 * ||y - center||^2`.
pub struct QuadraticEnergy {
    pub center: Vec<f64>,
}

impl Energy for QuadraticEnergy {
    fn energy(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.center.len() {
            return Err(DvaError::contract("energy input length mismatch"));
        }
        Ok(0.5 * y.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum::<f64>())
    }
    fn grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.center.len() {
            return Err(DvaError::contract("energy input length mismatch"));
        }
        Ok(y.iter().zip(&self.center).map(|(a, c)| a - c).collect())
    }
}

/// The learned two-hidden-layer Swish energy network.
pub struct EnergyNet<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl EnergyNet<'_> {
    fn run(&self, y: &[f64], grad: bool) -> Result<Vec<f64>> {
        if y.len() != self.cfg.t_out {
            return Err(DvaError::contract(format!(
                "energy expects length {}, got {}",
                self.cfg.t_out,
                y.len()
            )));
        }
        let bn = BnStates::new();
        let mut net = Net::new(self.cfg, self.params, &bn, Mode::Infer);
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_parts(vec![1, y.len()], y.to_vec()));
        let out = if grad {
            net.energy_grad(&mut g, v)?
        } else {
            net.energy(&mut g, v)?
        };
        Ok(g.value(out).data().to_vec())
    }
}

impl Energy for EnergyNet<'_> {
    fn energy(&self, y: &[f64]) -> Result<f64> {
        Ok(self.run(y, false)?[0])
    }
    fn grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.run(y, true)
    }
}

/// `sigma * ||y - y_hat + grad E(y_hat)||^2`.
pub fn dsm_loss(y_hat: &[f64], y: &[f64], sigma: f64, energy: &dyn Energy) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(DvaError::contract("dsm_loss sequences differ in length"));
    }
    let grad = energy.grad(y_hat)?;
    Ok(sigma
        * y.iter()
            .zip(y_hat)
            .zip(&grad)
            .map(|((t, p), d)| (t - p + d).powi(2))
            .sum::<f64>())
}

/// Graph form of [`dsm_loss`], batch-mean. `y_hat` is detached first so the
/// loss only trains the energy weights.
pub fn dsm_graph(net: &mut Net<'_>, g: &mut Graph, y_hat: Var, y: Var, sigma: f64) -> Result<Var> {
    let batch = g.value(y_hat).shape()[0] as f64;
    let pred = g.detach(y_hat);
    let grad = net.energy_grad(g, pred)?;
    let r = g.sub(y, pred)?;
    let r = g.add(r, grad)?;
    let r2 = g.square(r);
    let s = g.sum(r2);
    Ok(g.scale(s, sigma / batch))
}

/// One-step jump `y_hat - grad E(y_hat)`.
pub fn denoise_jump(y_hat: &[f64], energy: &dyn Energy) -> Result<Vec<f64>> {
    let grad = energy.grad(y_hat)?;
    Ok(y_hat.iter().zip(grad).map(|(y, d)| y - d).collect())
}

/// Parameters and batch-norm state of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: BnStates,
}

impl DvaModel {
    /// Fresh model: convolution and dense weights uniform in `±sqrt(1/fan_in)`,
    /// biases and batch-norm shifts zero, batch-norm scales one.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let z = config.latent_dim;
        let cr = config.se_width();
        let wide = 2 * c;
        let mut p = ParamStore::new();
        let mut bn = BnStates::new();
        let mut add_bn = |p: &mut ParamStore, name: &str, ch: usize| {
            p.init_const(&format!("{name}.g"), &[ch], 1.0);
            p.init_const(&format!("{name}.b"), &[ch], 0.0);
            bn.insert(name.to_string(), RunningStats::new(ch));
        };
        let conv = |p: &mut ParamStore, rng: &mut R, name: &str, cout: usize, cin_pg: usize, k: usize| {
            p.init_uniform(rng, &format!("{name}.w"), &[cout, cin_pg, k], cin_pg * k);
            p.init_const(&format!("{name}.b"), &[cout], 0.0);
        };
        let se = |p: &mut ParamStore, rng: &mut R, name: &str| {
            p.init_uniform(rng, &format!("{name}.w1"), &[cr, c], c);
            p.init_uniform(rng, &format!("{name}.w2"), &[c, cr], cr);
        };

        conv(&mut p, rng, "stem", c, N_FEATURES, 3);
        for i in 0..N_GROUPS {
            let e = format!("enc{i}");
            add_bn(&mut p, &format!("{e}.bn1"), c);
            conv(&mut p, rng, &format!("{e}.conv1"), c, c, 3);
            add_bn(&mut p, &format!("{e}.bn2"), c);
            conv(&mut p, rng, &format!("{e}.conv2"), c, c, 3);
            se(&mut p, rng, &format!("{e}.se"));
        }
        p.init_uniform(rng, "dec.h", &[c, config.level_len(N_GROUPS - 1)], c);
        for i in 0..N_GROUPS {
            let d = format!("dec{i}");
            add_bn(&mut p, &format!("{d}.bn1"), c);
            conv(&mut p, rng, &format!("{d}.expand"), wide, c, 1);
            add_bn(&mut p, &format!("{d}.bn2"), wide);
            conv(&mut p, rng, &format!("{d}.dw"), wide, 1, 3);
            conv(&mut p, rng, &format!("{d}.pw"), c, wide, 1);
            add_bn(&mut p, &format!("{d}.bn3"), c);
            se(&mut p, rng, &format!("{d}.se"));

            let l = format!("lat{i}");
            conv(&mut p, rng, &format!("{l}.prior"), 2 * z, c, 1);
            conv(&mut p, rng, &format!("{l}.post"), 2 * z, 2 * c, 1);
            conv(&mut p, rng, &format!("{l}.comb"), c, c + z, 1);
        }
        conv(&mut p, rng, "out", 1, c, 1);
        p.init_uniform(rng, "out.proj.w", &[config.t_out, config.t_in], config.t_in);
        p.init_const("out.proj.b", &[config.t_out], 0.0);

        let hdim = config.energy_hidden;
        p.init_uniform(rng, "energy.w1", &[hdim, config.t_out], config.t_out);
        p.init_const("energy.b1", &[hdim], 0.0);
        p.init_uniform(rng, "energy.w2", &[hdim, hdim], hdim);
        p.init_const("energy.b2", &[hdim], 0.0);
        p.init_uniform(rng, "energy.w3", &[1, hdim], hdim);
        p.init_const("energy.b3", &[1], 0.0);

        Ok(DvaModel {
            config,
            params: p,
            bn,
        })
    }

    pub fn net(&self, mode: Mode) -> Net<'_> {
        Net::new(&self.config, &self.params, &self.bn, mode)
    }

    pub fn energy_net(&self) -> EnergyNet<'_> {
        EnergyNet {
            cfg: &self.config,
            params: &self.params,
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        for (name, stats) in updates {
            if let Some(rs) = self.bn.get_mut(name) {
                rs.update(stats);
            }
        }
    }

    /// Encoder feature maps for `x: [B, 6, T]`. Train mode folds the batch
    /// statistics into the running stats.
    pub fn encode(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut net = self.net(mode);
        let levels = net.encode(&mut g, xv, None)?;
        let updates = std::mem::take(&mut net.bn_updates);
        self.apply_bn_updates(&updates);
        Ok(levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Decoder pass in infer mode. With an encoder stack the latents come from
    /// the posterior, otherwise from the prior.
    pub fn generate(
        &self,
        enc: Option<&[Tensor]>,
        batch: usize,
        sample: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let levels: Option<Vec<Var>> = enc.map(|e| e.iter().map(|t| g.constant(t.clone())).collect());
        let mut noise = match sample {
            Some(rng) => LatentNoise::Sample(rng),
            None => LatentNoise::Mean,
        };
        let mut net = self.net(Mode::Infer);
        let out = net.generate(&mut g, levels.as_deref(), batch, &mut noise)?;
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        let groups = out
            .groups
            .iter()
            .map(|gr| LatentGroup {
                q_mean: get(gr.q_mean),
                q_logvar: get(gr.q_logvar),
                p_mean: g.value(gr.p_mean).clone(),
                p_logvar: g.value(gr.p_logvar).clone(),
                z: g.value(gr.z).clone(),
            })
            .collect();
        let kl = out
            .groups
            .iter()
            .filter_map(|gr| gr.kl.map(|k| g.value(k).item()))
            .collect();
        Ok(ForwardOutput {
            y_hat: g.value(out.y_hat).clone(),
            groups,
            kl,
        })
    }

    /// Deterministic infer-mode prediction `[B, T']` from `[B, 6, T]`.
    pub fn predict_raw(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut net = self.net(Mode::Infer);
        let out = net.forward(&mut g, xv, None, &mut LatentNoise::Mean)?;
        Ok(g.value(out.y_hat).clone())
    }
}
