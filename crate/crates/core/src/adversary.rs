//! Discriminator and encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::generator::{Conditions, LRELU};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{no_grad, Element, Tensor, Var};
use crate::types::SpatialLatent;

/// Scores `(x, conditions)` pairs; higher means "real".
///
/// The input is `x` concatenated with the full-resolution condition stack.
/// Residual-free conv blocks halve the resolution down to 8×8, a minibatch
/// standard-deviation channel is appended, then a two-layer head.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    from_input: Conv2d,
    blocks: Vec<Conv2d>,
    last_conv: Conv2d,
    fc: Linear,
    out: Linear,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xD15C);
        let mut params = ParamStore::new();
        let n = config.num_layers();
        let ch = &config.channels;
        let in_ch = config.output_channels() + config.condition_channels();
        let from_input = Conv2d::new(&mut params, "disc.from_input", in_ch, ch[n - 1], 1, 1, true, &mut rng);
        let blocks = (1..n)
            .rev()
            .map(|i| Conv2d::new(&mut params, &format!("disc.block.{i}"), ch[i], ch[i - 1], 3, 1, true, &mut rng))
            .collect();
        let last_conv = Conv2d::new(&mut params, "disc.last_conv", ch[0] + 1, ch[0], 3, 1, true, &mut rng);
        let flat = ch[0] * 64;
        let fc = Linear::new(&mut params, "disc.fc", flat, ch[0], &mut rng);
        let out = Linear::new(&mut params, "disc.out", ch[0], 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            from_input,
            blocks,
            last_conv,
            fc,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            from_input: self.from_input.clone(),
            blocks: self.blocks.clone(),
            last_conv: self.last_conv.clone(),
            fc: self.fc.clone(),
            out: self.out.clone(),
        }
    }

    /// Logits `[N, 1]` for `x` `[N, C, R, R]` in network range.
    pub fn forward(&self, p: &Bound<T>, x: &Var<T>, cond: &Conditions<T>) -> Var<T> {
        let slope = T::of(LRELU);
        let input = Var::concat_channels(&[x, &cond.stacked()]);
        let mut h = self.from_input.forward(p, &input).leaky_relu(slope);
        for block in &self.blocks {
            h = block.forward(p, &h).leaky_relu(slope).avg_pool2x();
        }
        h = self.last_conv.forward(p, &minibatch_stddev(&h)).leaky_relu(slope);
        let n = h.shape()[0];
        let flat = h.reshape(&[n, self.config.channels[0] * 64]);
        self.out.forward(p, &self.fc.forward(p, &flat).leaky_relu(slope))
    }

    /// Logit for one sample, `x` is `C×R×R` in `[-1, 1]`.
    pub fn score(&self, x: &Tensor<f32>, cond: &Conditions<T>) -> Result<f32> {
        let r = self.config.output_resolution;
        let want = [self.config.output_channels(), r, r];
        if x.shape() != want || cond.resolution() != r || cond.batch() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator input {:?}, expected {want:?}",
                x.shape()
            )));
        }
        let xv = Var::constant(x.cast::<T>().reshape(&[1, want[0], r, r]));
        let out = no_grad(|| self.forward(&self.params.bind(), &xv, cond));
        Ok(out.item().to_f32().unwrap_or(f32::NAN))
    }
}

/// Largest group size dividing the batch, at most this.
const MBSTD_GROUP: usize = 4;

/// Append one channel holding, for each sample, the mean standard deviation
/// of the features across its group of the batch.
fn minibatch_stddev<T: Element>(h: &Var<T>) -> Var<T> {
    let s = h.shape().to_vec();
    let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let g = (1..=MBSTD_GROUP.min(n)).rev().find(|g| n % g == 0).unwrap_or(1);
    let m = n / g;
    let y = h.reshape(&[g, m, c, hh, ww]);
    let mean = y.sum_to(&[1, m, c, hh, ww]).mul_scalar(T::of(1.0 / g as f64));
    let var = y
        .sub(&mean)
        .square()
        .sum_to(&[1, m, c, hh, ww])
        .mul_scalar(T::of(1.0 / g as f64));
    let std = var.add_scalar(T::of(1e-8)).powf(T::of(0.5));
    let stat = std
        .sum_to(&[1, m, 1, 1, 1])
        .mul_scalar(T::of(1.0 / (c * hh * ww) as f64));
    let channel = stat.broadcast_to(&[g, m, 1, hh, ww]).reshape(&[n, 1, hh, ww]);
    Var::concat_channels(&[h, &channel])
}

/// Maps an output-domain sample to one spatial latent per generator layer,
/// so that the generator's synthesis stage can reconstruct it.
#[derive(Debug, Clone)]
pub struct Encoder<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    from_input: Conv2d,
    blocks: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    down: Vec<Option<Conv2d>>,
}

impl<T: Element> Encoder<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xE1C0);
        let mut params = ParamStore::new();
        let n = config.num_layers();
        let ch = &config.channels;
        let from_input = Conv2d::new(
            &mut params,
            "enc.from_input",
            config.output_channels(),
            ch[n - 1],
            1,
            1,
            true,
            &mut rng,
        );
        let (mut blocks, mut heads, mut down) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            blocks.push(Conv2d::new(&mut params, &format!("enc.block.{i}"), ch[i], ch[i], 3, 1, true, &mut rng));
            heads.push(Conv2d::new(&mut params, &format!("enc.head.{i}"), ch[i], ch[i], 3, 1, true, &mut rng));
            down.push((i > 0).then(|| {
                Conv2d::new(&mut params, &format!("enc.down.{i}"), ch[i], ch[i - 1], 3, 1, true, &mut rng)
            }));
        }
        Ok(Self {
            config: config.clone(),
            params,
            from_input,
            blocks,
            heads,
            down,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            from_input: self.from_input.clone(),
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
            down: self.down.clone(),
        }
    }

    /// Latents for every layer, coarsest first.
    pub fn forward(&self, p: &Bound<T>, x: &Var<T>) -> Vec<Var<T>> {
        let slope = T::of(LRELU);
        let n = self.config.num_layers();
        let mut h = self.from_input.forward(p, x).leaky_relu(slope);
        let mut latents = vec![None; n];
        for i in (0..n).rev() {
            h = self.blocks[i].forward(p, &h).leaky_relu(slope);
            latents[i] = Some(self.heads[i].forward(p, &h));
            if let Some(down) = &self.down[i] {
                h = down.forward(p, &h.avg_pool2x()).leaky_relu(slope);
            }
        }
        latents.into_iter().map(|l| l.expect("every layer visited")).collect()
    }

    /// Encode one `C×R×R` sample in `[-1, 1]`.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Vec<SpatialLatent>> {
        let r = self.config.output_resolution;
        let want = [self.config.output_channels(), r, r];
        if x.shape() != want {
            return Err(Error::ShapeMismatch(format!("encoder input {:?}, expected {want:?}", x.shape())));
        }
        let xv = Var::constant(x.cast::<T>().reshape(&[1, want[0], r, r]));
        let latents = no_grad(|| self.forward(&self.params.bind(), &xv));
        Ok(latents
            .iter()
            .enumerate()
            .map(|(i, l)| SpatialLatent {
                layer_index: i,
                values: l.value().cast::<f32>().reshape(&l.shape()[1..]),
            })
            .collect())
    }
}
