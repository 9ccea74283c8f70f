//! Losses and the alternating discriminator / generator+encoder update.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, Encoder};
use crate::config::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::generator::{Conditions, Generator, NoiseSpec};
use crate::nn::Adam;
use crate::perceptual::{perceptual_loss, Features, RandomConvExtractor};
use crate::tensor::{grad, no_grad, Element, Tensor, Var};

/// Non-saturating logistic losses, batch means: `(g_loss, d_loss)`.
pub fn adversarial_losses<T: Element>(real_logit: &Var<T>, fake_logit: &Var<T>) -> (Var<T>, Var<T>) {
    let g = fake_logit.neg().softplus().mean_all();
    let d = real_logit
        .neg()
        .softplus()
        .mean_all()
        .add(&fake_logit.softplus().mean_all());
    (g, d)
}

/// Scalar form of [`adversarial_losses`].
pub fn adversarial_losses_scalar(real_logit: f64, fake_logit: f64) -> (f64, f64) {
    (softplus(-fake_logit), softplus(-real_logit) + softplus(fake_logit))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `γ/2 · mean_n ‖∇_x D(x_n)‖²`. The result stays differentiable in the
/// discriminator's parameters.
pub fn r1_penalty<T: Element>(discriminate: impl Fn(&Var<T>) -> Var<T>, real: &Tensor<T>, gamma: f64) -> Var<T> {
    let x = Var::leaf(real.clone());
    let logits = discriminate(&x);
    let g = grad(&logits.sum_all(), &[&x], true).remove(0);
    let n = real.shape()[0] as f64;
    g.square().sum_all().mul_scalar(T::of(gamma / (2.0 * n)))
}

/// `softplus(-D(G(E(x))))` averaged over the batch, given the logits of the
/// reconstructions.
pub fn domain_guided_loss<T: Element>(rec_logit: &Var<T>) -> Var<T> {
    rec_logit.neg().softplus().mean_all()
}

/// Mean absolute difference.
pub fn l1_loss<T: Element>(x: &Var<T>, y: &Var<T>) -> Var<T> {
    x.sub(y).abs().mean_all()
}

const SECOND_Z_SALT: u64 = 0x3D5E_ED2A;

/// `-min(mean|x1 - x2| / mean|z1 - z2|, cap)`. Constant once the ratio
/// reaches `cap`.
pub fn mode_seeking_loss<T: Element>(x1: &Var<T>, x2: &Var<T>, z1: &Var<T>, z2: &Var<T>, cap: f64) -> Var<T> {
    let dz = z1.sub(z2).abs().mean_all().item();
    let ratio = x1.sub(x2).abs().mean_all().mul_scalar(T::one() / dz);
    if ratio.item().to_f64().unwrap_or(f64::NAN) < cap {
        ratio.neg()
    } else {
        Var::constant(Tensor::from_vec(&[1], vec![T::of(-cap)]))
    }
}

/// `(l1 + perceptual, l1)`.
pub fn reconstruction_loss<T: Element, F: Features>(extractor: &F, x: &Var<T>, x_rec: &Var<T>) -> (Var<T>, Var<T>) {
    let l1 = l1_loss(x, x_rec);
    (l1.add(&perceptual_loss(extractor, x, x_rec)), l1)
}

/// One training batch, all tensors in network range.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Target domain samples `[N, C_out, R, R]`: images, or depth as `2d - 1`.
    pub target: Tensor<f32>,
    /// One-hot labels `[N, L, R, R]`.
    pub seg: Tensor<f32>,
    /// Depth condition `[N, 1, R, R]` in `[-1, 1]`; present for depth-conditioned modes.
    pub depth: Option<Tensor<f32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conditions<T: Element>(&self) -> Conditions<T> {
        Conditions {
            seg: Var::constant(self.seg.cast()),
            depth: self.depth.as_ref().map(|d| Var::constant(d.cast())),
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let r = config.output_resolution;
        let n = self.len();
        let bad = |what: &str, s: &[usize]| Err(Error::ShapeMismatch(format!("batch {what} has shape {s:?}")));
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.target.shape() != [n, config.output_channels(), r, r] {
            return bad("target", self.target.shape());
        }
        if self.seg.shape() != [n, config.num_labels(), r, r] {
            return bad("segmentation", self.seg.shape());
        }
        match (&self.depth, config.mode.uses_depth_input()) {
            (Some(d), true) if d.shape() == [n, 1, r, r] => Ok(()),
            (Some(d), true) => bad("depth", d.shape()),
            (None, true) => Err(Error::ShapeMismatch("batch lacks the depth condition".into())),
            (_, false) => Ok(()),
        }
    }
}

/// Loss values of one step. Terms with zero weight are not evaluated and
/// report 0. `r1` carries the most recent evaluation between lazy steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub r1: f64,
    pub perceptual: f64,
    pub domain_guided: f64,
    pub mode_seeking: f64,
    pub reconstruction: f64,
    /// The L1 part of `reconstruction`.
    pub reconstruction_l1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "step",
        "adv_g",
        "adv_d",
        "r1",
        "perceptual",
        "domain_guided",
        "mode_seeking",
        "reconstruction",
        "reconstruction_l1",
        "total_g",
        "total_d",
    ];

    fn csv_fields(&self) -> Vec<String> {
        let mut v = vec![self.step.to_string()];
        for x in [
            self.adv_g,
            self.adv_d,
            self.r1,
            self.perceptual,
            self.domain_guided,
            self.mode_seeking,
            self.reconstruction,
            self.reconstruction_l1,
            self.total_g,
            self.total_d,
        ] {
            v.push(format!("{x:.8e}"));
        }
        v
    }
}

/// Appends one row per step. A wall-time column is opt-in because it makes
/// the log non-reproducible.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
    wall_time: Option<std::time::Instant>,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W, with_wall_time: bool) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = LossReport::CSV_HEADER.to_vec();
        if with_wall_time {
            header.push("wall_time_s");
        }
        writer.write_record(&header).map_err(csv_err)?;
        Ok(Self {
            writer,
            wall_time: with_wall_time.then(std::time::Instant::now),
        })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        let mut fields = report.csv_fields();
        if let Some(start) = self.wall_time {
            fields.push(format!("{:.3}", start.elapsed().as_secs_f64()));
        }
        self.writer.write_record(&fields).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn finite(term: &'static str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub generator: Generator<f32>,
    pub encoder: Encoder<f32>,
    pub discriminator: Discriminator<f32>,
    opt_g: Adam,
    opt_e: Adam,
    opt_d: Adam,
    pub loss: LossWeights,
    /// Seeds the per-step latent and noise draws.
    pub seed: u64,
    last_r1: f64,
    extractor: RandomConvExtractor,
}

impl TrainState {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let generator = Generator::new(config)?;
        let encoder = Encoder::new(config)?;
        let discriminator = Discriminator::new(config)?;
        Ok(Self::from_models(generator, encoder, discriminator, 0, seed))
    }

    /// Resume from existing weights. Optimizer moments start fresh.
    pub fn from_models(
        generator: Generator<f32>,
        encoder: Encoder<f32>,
        discriminator: Discriminator<f32>,
        step: u64,
        seed: u64,
    ) -> Self {
        let config = generator.config().clone();
        let o = &config.optim;
        let adam = |s| Adam::new(s, o.lr, o.beta1, o.beta2, o.eps);
        Self {
            step,
            opt_g: adam(generator.params()),
            opt_e: adam(encoder.params()),
            opt_d: adam(discriminator.params()),
            generator,
            encoder,
            discriminator,
            loss: config.loss.clone(),
            seed,
            last_r1: 0.0,
            extractor: RandomConvExtractor::default_for(config.output_channels()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    pub fn extractor(&self) -> &RandomConvExtractor {
        &self.extractor
    }

    /// Latents and noise for this step, drawn from `(seed, step)`.
    fn step_inputs(&self, batch: usize) -> Result<(Var<f32>, Vec<Var<f32>>)> {
        let config = self.config();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step);
        let z = Var::constant(Tensor::randn(&[batch, config.z_dim], &mut rng));
        let noise = (0..config.num_layers())
            .map(|i| {
                let r = config.layer_resolution(i);
                Var::constant(Tensor::randn(&[batch, 1, r, r], &mut rng))
            })
            .collect();
        Ok((z, noise))
    }

    /// The partner latent for the mode-seeking term at this step.
    fn second_z(&self, batch: usize) -> Var<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SECOND_Z_SALT);
        rng.set_stream(self.step);
        Var::constant(Tensor::randn(&[batch, self.config().z_dim], &mut rng))
    }

    /// One discriminator update followed by one generator+encoder update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (adv_d, total_d) = self.discriminator_step(batch)?;
        let mut report = self.generator_step(batch)?;
        report.adv_d = adv_d;
        report.total_d = total_d;
        report.r1 = self.last_r1;
        self.step += 1;
        Ok(report)
    }

    /// Update the discriminator only. Returns `(adv_d, total_d)`.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        batch.validate(self.config())?;
        let step = self.step;
        let w = self.loss.clone();
        let cond = batch.conditions::<f32>();
        let real = Var::constant(batch.target.clone());
        let (z, noise) = self.step_inputs(batch.len())?;
        let fake = no_grad(|| self.generator.forward(&self.generator.params().bind(), &cond, &z, &noise));
        let dp = self.discriminator.params().bind_trainable();
        let real_logit = self.discriminator.forward(&dp, &real, &cond);
        let fake_logit = self.discriminator.forward(&dp, &fake, &cond);
        let (_, adv_d) = adversarial_losses(&real_logit, &fake_logit);
        let adv_d_val = finite("adv_d", adv_d.item() as f64, step)?;
        let mut total_d = adv_d;
        if w.r1_gamma != 0.0 && step % w.r1_interval == 0 {
            let disc = &self.discriminator;
            let r1 = r1_penalty(|x| disc.forward(&dp, x, &cond), &batch.target, w.r1_gamma);
            self.last_r1 = finite("r1", r1.item() as f64, step)?;
            total_d = total_d.add(&r1.mul_scalar(w.r1_interval as f32));
        }
        let total_d_val = finite("total_d", total_d.item() as f64, step)?;
        let grads: Vec<Tensor<f32>> = grad(&total_d, &dp.refs(), false)
            .into_iter()
            .map(|g| g.value().clone())
            .collect();
        drop(dp);
        self.opt_d.update(self.discriminator.params_mut(), &grads);
        Ok((adv_d_val, total_d_val))
    }

    /// Update generator and encoder only; the discriminator is read, never written.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossReport> {
        batch.validate(self.config())?;
        let step = self.step;
        let w = self.loss.clone();
        let n = batch.len();
        let cond = batch.conditions::<f32>();
        let real = Var::constant(batch.target.clone());
        let (z, noise) = self.step_inputs(n)?;
        let gp = self.generator.params().bind_trainable();
        let ep = self.encoder.params().bind_trainable();
        let dp = self.discriminator.params().bind();
        let mut report = LossReport {
            step,
            ..LossReport::default()
        };
        let mut total_g: Option<Var<f32>> = None;
        let mut acc = |term: Var<f32>, weight: f64| {
            let t = term.mul_scalar(weight as f32);
            total_g = Some(match total_g.take() {
                Some(acc) => acc.add(&t),
                None => t,
            });
        };
        if w.adv != 0.0 || w.mode_seeking != 0.0 {
            let fake = self.generator.forward(&gp, &cond, &z, &noise);
            if w.adv != 0.0 {
                let logit = self.discriminator.forward(&dp, &fake, &cond);
                let adv_g = logit.neg().softplus().mean_all();
                report.adv_g = finite("adv_g", adv_g.item() as f64, step)?;
                acc(adv_g, w.adv);
            }
            if w.mode_seeking != 0.0 {
                let z2 = self.second_z(n);
                let fake2 = self.generator.forward(&gp, &cond, &z2, &noise);
                let ms = mode_seeking_loss(&fake, &fake2, &z, &z2, w.mode_seeking_cap);
                report.mode_seeking = finite("mode_seeking", ms.item() as f64, step)?;
                acc(ms, w.mode_seeking);
            }
        }
        if w.reconstruction != 0.0 || w.domain != 0.0 || w.perceptual != 0.0 {
            let zero_noise = self.generator.noise_vars(&NoiseSpec::Zero, n)?;
            let latents = self.encoder.forward(&ep, &real);
            let rec = self.generator.synthesize_graph(&gp, &latents, &zero_noise);
            if w.perceptual != 0.0 {
                let p = perceptual_loss(&self.extractor, &rec, &real);
                report.perceptual = finite("perceptual", p.item() as f64, step)?;
                acc(p, w.perceptual);
            }
            if w.reconstruction != 0.0 {
                let (r, l1) = reconstruction_loss(&self.extractor, &real, &rec);
                report.reconstruction = finite("reconstruction", r.item() as f64, step)?;
                report.reconstruction_l1 = l1.item() as f64;
                acc(r, w.reconstruction);
            }
            if w.domain != 0.0 {
                let logit = self.discriminator.forward(&dp, &rec, &cond);
                let dg = domain_guided_loss(&logit);
                report.domain_guided = finite("domain_guided", dg.item() as f64, step)?;
                acc(dg, w.domain);
            }
        }
        if let Some(total) = total_g {
            report.total_g = finite("total_g", total.item() as f64, step)?;
            let mut wrt = gp.refs();
            let n_g = wrt.len();
            wrt.extend(ep.refs());
            let grads: Vec<Tensor<f32>> = grad(&total, &wrt, false)
                .into_iter()
                .map(|g| g.value().clone())
                .collect();
            drop((gp, ep));
            self.opt_g.update(self.generator.params_mut(), &grads[..n_g]);
            self.opt_e.update(self.encoder.params_mut(), &grads[n_g..]);
        }
        Ok(report)
    }

    /// Mean |G_synth(E(x)) - x| with zero noise.
    pub fn reconstruction_l1(&self, target: &Tensor<f32>) -> f64 {
        no_grad(|| {
            let x = Var::constant(target.clone());
            let latents = self.encoder.forward(&self.encoder.params().bind(), &x);
            let zero = self
                .generator
                .noise_vars(&NoiseSpec::Zero, target.shape()[0])
                .expect("zero noise always fits");
            let rec = self.generator.synthesize_graph(&self.generator.params().bind(), &latents, &zero);
            l1_loss(&x, &rec).item() as f64
        })
    }
}
