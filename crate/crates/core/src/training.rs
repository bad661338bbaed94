//! Adversarial optimization: non-saturating logistic losses, lazy R1, Adam,
//! weight averaging and the kimg-scheduled training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, Preset};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricsReport};
use crate::networks::Model;
use crate::params::{Bound, ParamStore};
use crate::seeds::derive_seed;
use crate::style::{ema_decay, ema_update, style_mixing, StyleSource};
use crate::tensor::{Real, Tensor};

pub const CSV_HEADER: &str = "kimg,loss_g,loss_d,fid,is,precision,recall,imgs_per_sec";
const LOG_EPS: f64 = 1e-12;
/// Relative step of the finite-difference Hessian-vector product used for the
/// parameter gradient of R1.
const HVP_STEP: f64 = 1e-2;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerPreset {
    pub preset: Preset,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl OptimizerPreset {
    pub fn new(preset: Preset, lr: f64) -> Self {
        let (beta1, beta2, epsilon) = preset.adam();
        OptimizerPreset {
            preset,
            beta1,
            beta2,
            epsilon,
            lr,
        }
    }
}

/// First and second Adam moments, laid out like the parameters they track.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let mut zeros = params.clone();
        for v in zeros.values_mut() {
            *v = Tensor::zeros(v.shape().to_vec());
        }
        Moments {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    moments: &mut Moments<T>,
    opt: &OptimizerPreset,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step counter starts at 1"));
    }
    if grads.len() != params.len() || !moments.m.same_layout(params) || !moments.v.same_layout(params) {
        return Err(Error::invalid("gradient or moment layout does not match the parameters"));
    }
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let (c1, c2) = (T::lit(1.0 - opt.beta1), T::lit(1.0 - opt.beta2));
    let bc1 = T::lit(1.0 - opt.beta1.powi(t as i32));
    let bc2 = T::lit(1.0 - opt.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(opt.lr), T::lit(opt.epsilon));
    let ms = moments.m.values_mut();
    let vs = moments.v.values_mut();
    for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `mean log D(x) + mean log(1 − D(G(z)))` with `D = sigmoid(logit)`.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let mean_log = |xs: &[f64], sign: f64| {
        xs.iter().map(|&l| sigmoid(sign * l).max(LOG_EPS).ln()).sum::<f64>() / xs.len().max(1) as f64
    };
    mean_log(d_real, 1.0) + mean_log(d_fake, -1.0)
}

/// `mean softplus(−D(G(z)))`.
pub fn generator_loss<'t, T: Real>(d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    d_fake.scale(-T::one())?.softplus()?.mean()
}

/// `mean softplus(−D(x)) + mean softplus(D(G(z)))`.
pub fn discriminator_loss<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    let real = d_real.scale(-T::one())?.softplus()?.mean()?;
    real.add(d_fake.softplus()?.mean()?)
}

/// `(loss_G, loss_D)` of the non-saturating logistic game.
pub fn nonsat_losses<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((generator_loss(d_fake)?, discriminator_loss(d_real, d_fake)?))
}

fn row_sq_norms<T: Real>(g: &Tensor<T>) -> Vec<f64> {
    let b = g.shape()[0];
    g.data()
        .chunks(g.numel() / b.max(1))
        .map(|row| row.iter().map(|v| v.to_f64_lossless().powi(2)).sum())
        .collect()
}

/// Gradient of `Σ_b f(x)_b` with respect to the input batch `x`.
pub fn input_gradient<T, F>(f: F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&tape, xv)?.sum()?;
    let grads = tape.backward(out)?;
    let g = grads.wrt(xv);
    if !g.is_finite() {
        return Err(Error::NonFinite("R1 input gradient".into()));
    }
    Ok(g)
}

/// `(γ/2) · mean_b ‖∇ₓ f(x)_b‖²` for a per-sample scalar `f`.
pub fn r1_penalty<T, F>(f: F, x: &Tensor<T>, gamma: f64) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let g = input_gradient(f, x)?;
    let norms = row_sq_norms(&g);
    Ok(0.5 * gamma * norms.iter().sum::<f64>() / norms.len() as f64)
}

/// R1 value and its gradient with respect to the parameters in `store`.
///
/// The tape has no second-order mode, so the parameter gradient
/// `(γ/B) Σ_b (∂g_b/∂θ)ᵀ g_b` with `g_b = ∇ₓ f(x_b)` is taken from a central
/// difference of `f` along `g_b`: each sample contributes
/// `γ/(2Bε_b) · (f(x_b + ε_b g_b) − f(x_b − ε_b g_b))`, with `ε_b` scaled so the
/// perturbation has RMS [`HVP_STEP`].
pub fn r1_with_gradients<T, F>(store: &ParamStore<T>, f: F, x: &Tensor<T>, gamma: f64) -> Result<(f64, Vec<Tensor<T>>)>
where
    T: Real,
    F: for<'s, 't> Fn(&Bound<'s, 't, T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let g = input_gradient(
        |tape, xv| {
            let p = store.bind_frozen(tape);
            f(&p, xv)
        },
        x,
    )?;
    let batch = x.shape()[0];
    let per = x.numel() / batch;
    let norms = row_sq_norms(&g);
    let penalty = 0.5 * gamma * norms.iter().sum::<f64>() / batch as f64;

    let mut plus = x.clone();
    let mut minus = x.clone();
    let mut weights = vec![T::zero(); batch];
    for b in 0..batch {
        if norms[b] == 0.0 {
            continue;
        }
        let eps = HVP_STEP / (norms[b] / per as f64).sqrt();
        weights[b] = T::lit(gamma / (2.0 * batch as f64 * eps));
        let e = T::lit(eps);
        let gb = &g.data()[b * per..(b + 1) * per];
        for (j, &gv) in gb.iter().enumerate() {
            plus.data_mut()[b * per + j] += e * gv;
            minus.data_mut()[b * per + j] -= e * gv;
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let w = tape.constant(Tensor::new([batch], weights)?);
    let diff = f(&p, tape.constant(plus))?.sub(f(&p, tape.constant(minus))?)?;
    let surrogate = diff.mul(w)?.sum()?;
    let grads = tape.backward(surrogate)?;
    Ok((penalty, p.grads(&grads)))
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub g_moments: Moments<T>,
    pub d_moments: Moments<T>,
    pub step: u64,
    pub images_seen: u64,
    /// Sum of the applied (interval-scaled) R1 penalties.
    pub r1_total: f64,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &Config) -> Result<Self> {
        let model = Model::new(config)?;
        Ok(TrainState {
            g_moments: Moments::zeros_like(&model.g_params),
            d_moments: Moments::zeros_like(&model.d_params),
            model,
            step: 0,
            images_seen: 0,
            r1_total: 0.0,
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// Thousands of real images shown to the discriminator.
    pub fn kimg(&self) -> f64 {
        self.images_seen as f64 / 1000.0
    }
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss_g: f64,
    pub loss_d: f64,
    /// Applied R1 penalty, on regularization steps.
    pub r1: Option<f64>,
}

// seed streams
const S_D_LATENT: u64 = 1;
const S_D_MIX_LATENT: u64 = 2;
const S_D_MIX: u64 = 3;
const S_D_NOISE: u64 = 4;
const S_G_LATENT: u64 = 5;
const S_G_MIX_LATENT: u64 = 6;
const S_G_MIX: u64 = 7;
const S_G_NOISE: u64 = 8;

/// Runs training steps on a [`TrainState`].
pub struct Trainer<'a, T> {
    pub state: TrainState<T>,
    dataset: &'a DatasetHandle,
    opt: OptimizerPreset,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(config: &Config, dataset: &'a DatasetHandle) -> Result<Self> {
        Self::resume(TrainState::new(config)?, dataset)
    }

    pub fn resume(state: TrainState<T>, dataset: &'a DatasetHandle) -> Result<Self> {
        let c = state.config();
        if dataset.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if dataset.resolution() != c.resolution {
            return Err(Error::Dataset(format!(
                "dataset resolution {} differs from model resolution {}",
                dataset.resolution(),
                c.resolution
            )));
        }
        let opt = OptimizerPreset::new(c.preset, c.lr);
        Ok(Trainer { state, dataset, opt })
    }

    /// Generator output with style mixing; seeds come from `streams`.
    fn fakes<'t>(&self, p: &Bound<'_, 't, T>, tape: &'t Tape<T>, streams: [u64; 4]) -> Result<Var<'t, T>> {
        let s = &self.state;
        let c = s.config();
        let (seed, step) = (c.seed, s.step);
        let g = &s.model.generator;
        let za = s.model.sample_latents(c.batch, derive_seed(seed, streams[0], step));
        let ya = g.map(p, tape.constant(za))?;
        let sources = style_mixing(g.num_style_layers(), None, c.style_mixing, derive_seed(seed, streams[2], step))?;
        let ys = if sources.contains(&StyleSource::B) {
            let zb = s.model.sample_latents(c.batch, derive_seed(seed, streams[1], step));
            let yb = g.map(p, tape.constant(zb))?;
            sources
                .iter()
                .map(|&src| if src == StyleSource::A { ya } else { yb })
                .collect()
        } else {
            vec![ya; sources.len()]
        };
        g.synthesize(p, &ys, derive_seed(seed, streams[3], step))
    }

    fn d_step(&mut self) -> Result<(f64, Option<f64>)> {
        let c = self.state.config().clone();
        let real = self.dataset.batch(self.state.images_seen, c.batch)?.cast::<T>();
        let fake = {
            let tape = Tape::new();
            let p = self.state.model.g_params.bind_frozen(&tape);
            self.fakes(&p, &tape, [S_D_LATENT, S_D_MIX_LATENT, S_D_MIX, S_D_NOISE])?.value()
        };
        let model = &self.state.model;
        let d = &model.discriminator;
        let tape = Tape::new();
        let p = model.d_params.bind(&tape);
        let loss = discriminator_loss(d.forward(&p, tape.constant(real.clone()))?, d.forward(&p, tape.constant(fake))?)?;
        let loss_d = loss.item().to_f64_lossless();
        let mut grads = p.grads(&tape.backward(loss)?);
        drop(p);

        let step = self.state.step + 1;
        let interval = c.lazy_interval.max(1) as u64;
        let mut applied = None;
        if c.r1_gamma > 0.0 && step % interval == 0 {
            let gamma = c.r1_gamma * interval as f64;
            let (penalty, r1_grads) = r1_with_gradients(&model.d_params, |p, x| d.forward(p, x), &real, gamma)?;
            for (g, r) in grads.iter_mut().zip(&r1_grads) {
                g.add_assign(r)?;
            }
            applied = Some(penalty);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("discriminator gradient".into()));
        }
        adam_step(&mut self.state.model.d_params, &grads, &mut self.state.d_moments, &self.opt, step)?;
        Ok((loss_d, applied))
    }

    fn g_step(&mut self) -> Result<f64> {
        let model = &self.state.model;
        let tape = Tape::new();
        let gp = model.g_params.bind(&tape);
        let dp = model.d_params.bind_frozen(&tape);
        let fake = self.fakes(&gp, &tape, [S_G_LATENT, S_G_MIX_LATENT, S_G_MIX, S_G_NOISE])?;
        let loss = generator_loss(model.discriminator.forward(&dp, fake)?)?;
        let loss_g = loss.item().to_f64_lossless();
        let grads = gp.grads(&tape.backward(loss)?);
        drop(gp);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("generator gradient".into()));
        }
        let step = self.state.step + 1;
        let s = &mut self.state;
        adam_step(&mut s.model.g_params, &grads, &mut s.g_moments, &self.opt, step)?;
        Ok(loss_g)
    }

    /// One discriminator step followed by one generator step and an EMA update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let (loss_d, r1) = self.d_step()?;
        let loss_g = self.g_step()?;
        let c = self.state.config();
        let (batch, ema_kimg) = (c.batch, c.ema_kimg);
        let rampup = (c.ema_rampup > 0.0).then_some(c.ema_rampup);
        let s = &mut self.state;
        s.step += 1;
        s.images_seen += batch as u64;
        let decay = ema_decay(batch, ema_kimg, rampup, s.images_seen);
        ema_update(&mut s.model.g_ema, &s.model.g_params, decay)?;
        if let Some(r) = r1 {
            s.r1_total += r;
        }
        if !loss_g.is_finite() || !loss_d.is_finite() {
            return Err(Error::NonFinite(format!("loss_g = {loss_g}, loss_d = {loss_d}")));
        }
        Ok(StepLosses { loss_g, loss_d, r1 })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub kimg: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub metrics: Option<MetricsReport>,
    pub imgs_per_sec: Option<f64>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{:.6},{:.6}", self.kimg, self.loss_g, self.loss_d);
        match &self.metrics {
            Some(m) => {
                let _ = write!(s, ",{:.6},{:.6},{:.6},{:.6}", m.fid, m.is, m.precision, m.recall);
            }
            None => s.push_str(",,,,"),
        }
        s.push(',');
        if let Some(v) = self.imgs_per_sec {
            let _ = write!(s, "{v:.3}");
        }
        s
    }
}

/// Checkpoint file name for a kimg counter.
pub fn checkpoint_name(kimg: f64) -> String {
    format!("ckpt-{kimg}.bin")
}

/// Where training writes its artifacts and how it evaluates.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub out_dir: Option<&'a Path>,
    pub evaluator: Option<&'a Evaluator>,
}

/// Trains for `config.total_kimg`, writing a checkpoint at every
/// `checkpoint_kimg` boundary (and one before the first step) plus one log row
/// per checkpoint after the initial one.
pub fn train<T: Real>(config: &Config, dataset: &DatasetHandle, options: TrainOptions<'_>) -> Result<(TrainState<T>, Vec<LogRow>)> {
    config.validate()?;
    let mut trainer = Trainer::<T>::new(config, dataset)?;
    let out = options.out_dir;
    let mut log_file = String::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.txt"), &config.to_text())?;
        crate::checkpoint::save(&dir.join(checkpoint_name(0.0)), &trainer.state)?;
        log_file = format!("{CSV_HEADER}\n");
        write_file(&dir.join("log.csv"), &log_file)?;
    }

    let total_images = (config.total_kimg * 1000.0).round() as u64;
    let ckpt_images = ((config.checkpoint_kimg * 1000.0).round() as u64).max(1);
    let mut rows = Vec::new();
    let (mut sum_g, mut sum_d, mut count) = (0.0, 0.0, 0u64);
    let mut checkpoints = 0usize;
    let mut clock = Instant::now();
    while trainer.state.images_seen < total_images {
        let before = trainer.state.images_seen;
        let losses = match trainer.step() {
            Ok(l) => l,
            Err(e @ (Error::NonFinite(_) | Error::Diverged { .. })) => {
                return Err(diverged(&trainer.state, out, &e, sum_g / count.max(1) as f64, sum_d / count.max(1) as f64));
            }
            Err(e) => return Err(e),
        };
        sum_g += losses.loss_g;
        sum_d += losses.loss_d;
        count += 1;
        let now = trainer.state.images_seen;
        let boundary = now / ckpt_images > before / ckpt_images;
        if boundary || now >= total_images {
            checkpoints += 1;
            let elapsed = clock.elapsed().as_secs_f64();
            let kimg = trainer.state.kimg();
            let metrics = match options.evaluator {
                Some(ev) if config.fid_every > 0 && checkpoints % config.fid_every == 0 => {
                    Some(ev.evaluate(&trainer.state.model, config.variant.name(), kimg)?)
                }
                _ => None,
            };
            let row = LogRow {
                kimg,
                loss_g: sum_g / count as f64,
                loss_d: sum_d / count as f64,
                metrics,
                imgs_per_sec: config.timing.then(|| (count * config.batch as u64) as f64 / elapsed),
            };
            if let Some(dir) = out {
                crate::checkpoint::save(&dir.join(checkpoint_name(kimg)), &trainer.state)?;
                log_file.push_str(&row.to_csv());
                log_file.push('\n');
                write_file(&dir.join("log.csv"), &log_file)?;
            }
            rows.push(row);
            (sum_g, sum_d, count) = (0.0, 0.0, 0);
            clock = Instant::now();
        }
    }
    Ok((trainer.state, rows))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the divergence error and, with an output directory, writes a
/// diagnostic dump next to the checkpoints.
fn diverged<T: Real>(state: &TrainState<T>, out: Option<&Path>, cause: &Error, loss_g: f64, loss_d: f64) -> Error {
    let detail = cause.to_string();
    if let Some(dir) = out {
        let mut dump = format!(
            "step {}\nkimg {}\ncause {detail}\nrecent mean loss_g {loss_g}\nrecent mean loss_d {loss_d}\n",
            state.step,
            state.kimg()
        );
        for (name, v) in state.model.g_params.iter().chain(state.model.d_params.iter()) {
            let finite = v.is_finite();
            let max = v.data().iter().fold(0.0f64, |a, x| a.max(x.to_f64_lossless().abs()));
            let _ = writeln!(dump, "{name} finite={finite} max_abs={max:e}");
        }
        let _ = std::fs::write(dir.join("divergence.txt"), dump);
    }
    Error::Diverged {
        step: state.step,
        kimg: state.kimg(),
        detail,
    }
}
