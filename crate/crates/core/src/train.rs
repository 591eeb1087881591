//! Rate-distortion training.
//!
//! The loss is `λ·D + R_y + R_z` with `D` summed over both views (MSE, or
//! `1 - MS-SSIM`) and rates in bits per pixel of one view, summed over views.

use std::path::{Path, PathBuf};

use bisic_tensor::{Float, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Distortion, TrainConfig};
use crate::data::{pairs_to_tensor, random_crop, StereoPair};
use crate::error::{Error, Result};
use crate::model::{Model, Outputs, Quantizer};
use crate::msssim::ms_ssim_var;
use crate::nn::{Ctx, ParamStore};

/// Divergence threshold relative to the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 1000.0;
/// Steps over which every parameter tensor must receive a gradient.
pub const DEAD_MODULE_WINDOW: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub distortion: f64,
    pub rate_y: f64,
    pub rate_z: f64,
}

impl LossBreakdown {
    pub fn new(lambda: f64, distortion: f64, rate_y: f64, rate_z: f64) -> Self {
        LossBreakdown { total: lambda * distortion + rate_y + rate_z, distortion, rate_y, rate_z }
    }
}

pub struct RdLoss<'g, T: Float> {
    pub loss: Var<'g, T>,
    pub distortion: Var<'g, T>,
    pub rate_y: Var<'g, T>,
    pub rate_z: Var<'g, T>,
    pub outputs: Outputs<'g, T>,
}

impl<T: Float> RdLoss<'_, T> {
    pub fn breakdown(&self, lambda: f64) -> LossBreakdown {
        let v = |x: Var<'_, T>| x.value().item().f64();
        LossBreakdown::new(lambda, v(self.distortion), v(self.rate_y), v(self.rate_z))
    }
}

/// Distortion of `x_hat` against `x` (`[B, 3, 2, H, W]`), summed over views
/// and averaged over the batch.
pub fn distortion<'g, T: Float>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    x_hat: Var<'g, T>,
    kind: Distortion,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    match kind {
        Distortion::Mse => {
            let per_view = (s[0] * s[1] * s[3] * s[4]) as f64;
            Ok(x_hat.sub(x).square().sum_all().scale(1.0 / per_view))
        }
        Distortion::MsSsim => {
            let ms = ms_ssim_var(g, x, x_hat)?;
            let n = ms.shape().iter().product::<usize>() as f64;
            Ok(ms.sum_all().scale(-1.0 / s[0] as f64).add_scalar(n / s[0] as f64))
        }
    }
}

/// Loss terms given a distortion and the forward outputs.
pub fn rd_terms<'g, T: Float>(
    outputs: Outputs<'g, T>,
    distortion: Var<'g, T>,
    lambda: f64,
    pixels_per_view: usize,
) -> RdLoss<'g, T> {
    let norm = 1.0 / pixels_per_view as f64;
    let rate_y = outputs.y_bits.sum_all().scale(norm);
    let rate_z = outputs.z_bits.scale(norm);
    let loss = distortion.scale(lambda).add(rate_y).add(rate_z);
    RdLoss { loss, distortion, rate_y, rate_z, outputs }
}

/// Forward pass and loss on `x: [B, 3, 2, H, W]`.
pub fn rd_loss<'g, T: Float, R: Rng>(
    model: &Model,
    cx: &Ctx<'g, T>,
    x: Var<'g, T>,
    lambda: f64,
    kind: Distortion,
    q: &mut Quantizer<'_, R>,
) -> Result<RdLoss<'g, T>> {
    let s = x.shape();
    model.check_input(s[3], s[4])?;
    let out = model.forward(cx, x, q);
    let d = distortion(cx.g, x, out.x_hat, kind)?;
    Ok(rd_terms(out, d, lambda, s[0] * s[3] * s[4]))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps);
        for (i, id) in params.ids().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m as f64 / bc1;
                let vh = *v as f64 / bc2;
                *w -= (lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grads(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// CSV loss log (`step,L,D,R_y,R_z,lr`).
    pub log_path: Option<PathBuf>,
    /// Final checkpoint; periodic ones get a `.step{N}` suffix.
    pub checkpoint_path: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    pub progress_every: usize,
    /// Steps already taken by the model, added to the step stored in checkpoints.
    pub start_step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Parameters that got no nonzero gradient during the first steps.
    pub dead_params: Vec<String>,
}

fn sample_batch(data: &[StereoPair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let mut crops = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let p = &data[rng.gen_range(0..data.len())];
        crops.push(random_crop(p, cfg.crop_size, rng)?);
    }
    let refs: Vec<&StereoPair> = crops.iter().collect();
    Ok(pairs_to_tensor(&refs))
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let tmp = crate::data::tmp_path(path);
    let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::Other(format!("{}: {e}", tmp.display())))?;
    let res = (|| -> std::result::Result<(), csv::Error> {
        w.write_record(["step", "L", "D", "R_y", "R_z", "lr"])?;
        for r in rows {
            w.write_record([
                r.step.to_string(),
                r.loss.total.to_string(),
                r.loss.distortion.to_string(),
                r.loss.rate_y.to_string(),
                r.loss.rate_z.to_string(),
                r.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::Other(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn periodic_path(path: &Path, step: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

/// Trains `model` in place on random crops of `data`.
pub fn train(model: &mut Model, data: &[StereoPair], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    if !cfg.lambda_is_standard() {
        log::warn!("lambda={} is not one of the standard values {:?}", cfg.lambda, crate::config::STANDARD_LAMBDAS);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut seen = vec![false; model.params.len()];
    let mut dead_params = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut initial: Option<f64> = None;

    for step in 0..cfg.steps {
        let x = sample_batch(data, cfg, &mut rng)?;
        let lr = cfg.lr_at(step);
        let (breakdown, graph_loss, mut grads) = {
            let g = Graph::<f32>::new();
            let cx = Ctx::new(&g, &model.params);
            let xv = cx.constant(x);
            let mut q = Quantizer::Noise(&mut rng);
            let rd = rd_loss(model, &cx, xv, cfg.lambda, cfg.distortion, &mut q)?;
            let b = rd.breakdown(cfg.lambda);
            let l = rd.loss.value().item() as f64;
            let mut gr = g.backward(rd.loss);
            (b, l, cx.param_grads(&mut gr))
        };
        if !breakdown.total.is_finite() || !graph_loss.is_finite() {
            return Err(Error::Training { step, reason: format!("non-finite loss {breakdown:?}") });
        }
        let rel = (graph_loss - breakdown.total).abs() / breakdown.total.abs().max(1.0);
        if rel > 1e-5 {
            return Err(Error::Training {
                step,
                reason: format!("loss {graph_loss} disagrees with its breakdown {breakdown:?}"),
            });
        }
        let first = *initial.get_or_insert(breakdown.total);
        if breakdown.total > DIVERGENCE_FACTOR * first.abs().max(1e-12) {
            return Err(Error::Training {
                step,
                reason: format!("diverged: loss {} exceeds {}x the initial {}", breakdown.total, DIVERGENCE_FACTOR, first),
            });
        }
        if step < DEAD_MODULE_WINDOW {
            for (i, gr) in grads.iter().enumerate() {
                if let Some(gr) = gr {
                    seen[i] |= gr.data().iter().any(|&v| v != 0.0);
                }
            }
        }
        if step + 1 == DEAD_MODULE_WINDOW.min(cfg.steps) {
            dead_params = model.params.ids().filter(|id| !seen[id.0]).map(|id| model.params.name(id).to_string()).collect();
            if !dead_params.is_empty() {
                log::warn!("parameters without gradient in the first {} steps: {:?}", step + 1, dead_params);
            }
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Training { step, reason: "non-finite gradient".into() });
        }
        clip_grads(&mut grads, cfg.clip_norm);
        adam.step(&mut model.params, &grads, lr);
        log.push(LogRow { step, loss: breakdown, lr });
        if opts.progress_every > 0 && (step % opts.progress_every == 0 || step + 1 == cfg.steps) {
            eprintln!(
                "step {step:>6}  L {:.4}  D {:.6}  R_y {:.4}  R_z {:.4}  lr {:.2e}",
                breakdown.total, breakdown.distortion, breakdown.rate_y, breakdown.rate_z, lr
            );
        }
        if let Some(p) = &opts.checkpoint_path {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                checkpoint::save(&periodic_path(p, step + 1), model, Some(cfg), opts.start_step + step + 1)?;
            }
        }
    }
    if let Some(p) = &opts.log_path {
        write_log(p, &log)?;
    }
    if let Some(p) = &opts.checkpoint_path {
        checkpoint::save(p, model, Some(cfg), opts.start_step + cfg.steps)?;
    }
    Ok(TrainReport { log, dead_params })
}

/// Continues training with MS-SSIM distortion.
pub fn finetune_msssim(model: &mut Model, data: &[StereoPair], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let cfg = TrainConfig { distortion: Distortion::MsSsim, ..cfg.clone() };
    train(model, data, &cfg, opts)
}

/// Median of `L` over `rows`.
pub fn median_loss(rows: &[LogRow]) -> f64 {
    let mut v: Vec<f64> = rows.iter().map(|r| r.loss.total).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
