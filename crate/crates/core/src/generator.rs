//! The conditional generator.
//!
//! Three stages run in sequence:
//!
//! 1. **Condition preparation.** A mapping network turns `z` into the spatial
//!    random latent `w` (`C0×8×8`), and one condition block per layer resizes
//!    the segmentation (nearest) and depth (area average) to that layer's
//!    resolution, concatenates them and convolves them into `m_i`.
//! 2. **Condition fusion.** `w⁺_0 = conv(w + m_0)`; for `i ≥ 1` the previous
//!    latent is lifted to the next resolution (2× upsample + conv), added to
//!    `m_i` and convolved into `w⁺_i`. The chain ends at the output resolution.
//! 3. **Synthesis.** Starting from a learned constant, each layer convolves,
//!    normalises, applies a per-pixel scale and bias predicted from `w⁺_i` by
//!    a 1×1 convolution, adds scaled per-pixel noise and emits a skip output.
//!    The summed skips pass through `tanh`.
//!
//! The same network serves segmentation+depth→image, segmentation→depth and
//! segmentation→image; [`Mode`] selects the condition and output channels.
//! Inside the network every signal lives in `[-1, 1]`; depth conditions are
//! fed as `2d - 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::{no_grad, Element, Tensor, Var};
use crate::types::{validate_pair, DepthMap, ImageTensor, SegmentationMap, SpatialLatent};

pub(crate) const LRELU: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Batched condition inputs: one-hot labels `[N, L, R, R]` and, for modes
/// that take depth, depth `[N, 1, R, R]` in `[-1, 1]`.
#[derive(Clone)]
pub struct Conditions<T: Element> {
    pub seg: Var<T>,
    pub depth: Option<Var<T>>,
}

impl<T: Element> Conditions<T> {
    /// Stack typed maps into a batch. `depth` entries are ignored when
    /// `with_depth` is false and required when it is true.
    pub fn from_maps(items: &[(&SegmentationMap, Option<&DepthMap>)], with_depth: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::ShapeMismatch("empty condition batch".into()));
        }
        let mut segs = Vec::with_capacity(items.len());
        let mut depths = Vec::with_capacity(items.len());
        for (seg, depth) in items {
            if (seg.height(), seg.width()) != (items[0].0.height(), items[0].0.width()) {
                return Err(Error::ShapeMismatch("condition batch mixes resolutions".into()));
            }
            segs.push(seg.one_hot::<T>());
            if with_depth {
                let d = depth.ok_or_else(|| Error::ShapeMismatch("depth condition required".into()))?;
                validate_pair(seg, d)?;
                depths.push(d.to_signed_tensor::<T>());
            }
        }
        Ok(Self {
            seg: Var::constant(Tensor::stack(&segs)),
            depth: with_depth.then(|| Var::constant(Tensor::stack(&depths))),
        })
    }

    pub fn batch(&self) -> usize {
        self.seg.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.seg.shape()[2]
    }

    /// Channel-wise stack of labels and depth at full resolution.
    pub fn stacked(&self) -> Var<T> {
        match &self.depth {
            Some(d) => Var::concat_channels(&[&self.seg, d]),
            None => self.seg.clone(),
        }
    }

    /// Resize to `target`: labels keep the top-left pixel of each block,
    /// depth is area averaged. Differentiable in both inputs.
    pub fn resized(&self, target: usize) -> Conditions<T> {
        let mut seg = self.seg.clone();
        let mut depth = self.depth.clone();
        let mut r = self.resolution();
        while r > target {
            seg = seg.subsample2x();
            depth = depth.map(|d| d.avg_pool2x());
            r /= 2;
        }
        Conditions { seg, depth }
    }
}

/// Per-pixel noise for every synthesis layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Zero,
    /// Draw all layers from a ChaCha stream with this seed.
    Seed(u64),
    /// One `[N, 1, r_i, r_i]` map per layer.
    Maps(Vec<Tensor<f32>>),
}

impl NoiseSpec {
    pub fn tensors<T: Element>(&self, config: &ModelConfig, batch: usize) -> Result<Vec<Tensor<T>>> {
        let shapes: Vec<[usize; 4]> = (0..config.num_layers())
            .map(|i| {
                let r = config.layer_resolution(i);
                [batch, 1, r, r]
            })
            .collect();
        match self {
            NoiseSpec::Zero => Ok(shapes.iter().map(|s| Tensor::zeros(s)).collect()),
            NoiseSpec::Seed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(shapes.iter().map(|s| Tensor::randn(s, &mut rng)).collect())
            }
            NoiseSpec::Maps(maps) => {
                if maps.len() != shapes.len() || maps.iter().zip(&shapes).any(|(m, s)| m.shape() != s) {
                    return Err(Error::ShapeMismatch(format!(
                        "noise maps do not match layer shapes {shapes:?}"
                    )));
                }
                Ok(maps.iter().map(Tensor::cast).collect())
            }
        }
    }
}

/// Draw a standard-normal `z` from a seed.
pub fn sample_z(z_dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..z_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect()
}

/// A generator output, typed by mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    Image(ImageTensor),
    Depth(DepthMap),
}

impl Generated {
    pub fn into_image(self) -> Option<ImageTensor> {
        match self {
            Generated::Image(i) => Some(i),
            Generated::Depth(_) => None,
        }
    }

    pub fn into_depth(self) -> Option<DepthMap> {
        match self {
            Generated::Depth(d) => Some(d),
            Generated::Image(_) => None,
        }
    }
}

/// Intermediate values of one fusion step.
pub struct FuseStages<T: Element> {
    /// The incoming latent brought to this layer's shape (identity at layer 0).
    pub lifted: Var<T>,
    /// `lifted + m_i`.
    pub sum: Var<T>,
    /// `w⁺_i`.
    pub out: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    mapping: Vec<Linear>,
    constant: ParamId,
    cond_blocks: Vec<Conv2d>,
    lift: Vec<Option<Conv2d>>,
    fuse: Vec<Conv2d>,
    synth: Vec<Conv2d>,
    noise_strength: Vec<ParamId>,
    modulation: Vec<Conv2d>,
    to_out: Vec<Conv2d>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let [c0, h0, w0] = config.base_latent_shape;
        let ch = &config.channels;
        let n = config.num_layers();

        let mut mapping = Vec::new();
        let mut width = config.z_dim;
        for i in 0..config.mapping_layers {
            let out = if i + 1 == config.mapping_layers {
                c0 * h0 * w0
            } else {
                config.mapping_hidden
            };
            mapping.push(Linear::new(&mut params, &format!("mapping.{i}"), width, out, &mut rng));
            width = out;
        }
        let constant = params.add("synthesis.constant", Tensor::randn(&[1, c0, h0, w0], &mut rng));

        let cond_in = config.condition_channels();
        let out_ch = config.output_channels();
        let (mut cond_blocks, mut lift, mut fuse) = (Vec::new(), Vec::new(), Vec::new());
        let (mut synth, mut noise_strength, mut modulation, mut to_out) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let c = ch[i];
            let prev = if i == 0 { c0 } else { ch[i - 1] };
            cond_blocks.push(Conv2d::new(&mut params, &format!("condition.{i}"), cond_in, c, 3, 1, true, &mut rng));
            lift.push((i > 0).then(|| Conv2d::new(&mut params, &format!("fusion.{i}.lift"), prev, c, 3, 1, true, &mut rng)));
            fuse.push(Conv2d::new(&mut params, &format!("fusion.{i}.conv"), c, c, 3, 1, true, &mut rng));
            synth.push(Conv2d::new(&mut params, &format!("synthesis.{i}.conv"), prev, c, 3, 1, true, &mut rng));
            noise_strength.push(params.add(
                format!("synthesis.{i}.noise_strength"),
                Tensor::full(&[1, c, 1, 1], T::of(0.05)),
            ));
            modulation.push(Conv2d::new(&mut params, &format!("synthesis.{i}.modulation"), c, 2 * c, 1, 1, true, &mut rng));
            to_out.push(Conv2d::new(&mut params, &format!("synthesis.{i}.to_out"), c, out_ch, 1, 1, true, &mut rng));
        }
        Ok(Self {
            config: config.clone(),
            params,
            mapping,
            constant,
            cond_blocks,
            lift,
            fuse,
            synth,
            noise_strength,
            modulation,
            to_out,
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

    /// The same network in another precision.
    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            mapping: self.mapping.clone(),
            constant: self.constant,
            cond_blocks: self.cond_blocks.clone(),
            lift: self.lift.clone(),
            fuse: self.fuse.clone(),
            synth: self.synth.clone(),
            noise_strength: self.noise_strength.clone(),
            modulation: self.modulation.clone(),
            to_out: self.to_out.clone(),
        }
    }

    /// Convolution layers of the condition blocks, one per generator layer.
    pub fn condition_blocks(&self) -> &[Conv2d] {
        &self.cond_blocks
    }

    // ---- graph-level building blocks ----

    /// `z` `[N, z_dim]` → `w` `[N, C0, 8, 8]`.
    pub fn map_latent(&self, p: &Bound<T>, z: &Var<T>) -> Var<T> {
        let n = z.shape()[0];
        // Pixel norm on z.
        let ms = z
            .square()
            .sum_to(&[n, 1])
            .mul_scalar(T::of(1.0 / self.config.z_dim as f64))
            .add_scalar(T::of(1e-8));
        let mut h = z.mul(&ms.powf(T::of(-0.5)));
        let last = self.mapping.len() - 1;
        for (i, layer) in self.mapping.iter().enumerate() {
            h = layer.forward(p, &h);
            if i != last {
                h = h.leaky_relu(T::of(LRELU));
            }
        }
        let [c0, h0, w0] = self.config.base_latent_shape;
        h.reshape(&[n, c0, h0, w0])
    }

    /// `m_i`: resize, concatenate, convolve.
    pub fn condition_latent(&self, p: &Bound<T>, cond: &Conditions<T>, layer: usize) -> Var<T> {
        let resized = cond.resized(self.config.layer_resolution(layer));
        self.cond_blocks[layer].forward(p, &resized.stacked())
    }

    /// One fusion step. `prev` is `w` at layer 0 and `w⁺_{i-1}` afterwards.
    pub fn fuse_stages(&self, p: &Bound<T>, prev: &Var<T>, m: &Var<T>, layer: usize) -> FuseStages<T> {
        let lifted = match &self.lift[layer] {
            Some(lift) => lift.forward(p, &prev.upsample2x()).leaky_relu(T::of(LRELU)),
            None => prev.clone(),
        };
        let sum = lifted.add(m);
        let out = self.fuse[layer].forward(p, &sum);
        FuseStages { lifted, sum, out }
    }

    /// The `w⁺` chain for every layer.
    pub fn fused_latents(&self, p: &Bound<T>, cond: &Conditions<T>, w: &Var<T>) -> Vec<Var<T>> {
        let mut out: Vec<Var<T>> = Vec::with_capacity(self.config.num_layers());
        for i in 0..self.config.num_layers() {
            let m = self.condition_latent(p, cond, i);
            let prev = out.last().unwrap_or(w);
            let next = self.fuse_stages(p, prev, &m, i).out;
            out.push(next);
        }
        out
    }

    /// Progressive synthesis from per-layer latents; output in `[-1, 1]`.
    pub fn synthesize_graph(&self, p: &Bound<T>, latents: &[Var<T>], noise: &[Var<T>]) -> Var<T> {
        let n = latents[0].shape()[0];
        let [c0, h0, w0] = self.config.base_latent_shape;
        let mut h = p.var(self.constant).broadcast_to(&[n, c0, h0, w0]);
        let mut out: Option<Var<T>> = None;
        for i in 0..self.config.num_layers() {
            if i > 0 {
                h = h.upsample2x();
            }
            h = self.synth[i].forward(p, &h);
            h = instance_norm(&h);
            let c = self.config.channels[i];
            let style = self.modulation[i].forward(p, &latents[i]);
            let scale = style.narrow_channels(0, c).add_scalar(T::one());
            let bias = style.narrow_channels(c, c);
            h = h.mul(&scale).add(&bias);
            h = h.add(&noise[i].mul(p.var(self.noise_strength[i])));
            h = h.leaky_relu(T::of(LRELU));
            let skip = self.to_out[i].forward(p, &h);
            out = Some(match out {
                Some(prev) => prev.upsample2x().add(&skip),
                None => skip,
            });
        }
        out.expect("at least one layer").tanh()
    }

    /// Full forward pass in network range.
    pub fn forward(&self, p: &Bound<T>, cond: &Conditions<T>, z: &Var<T>, noise: &[Var<T>]) -> Var<T> {
        let w = self.map_latent(p, z);
        let latents = self.fused_latents(p, cond, &w);
        self.synthesize_graph(p, &latents, noise)
    }

    pub fn noise_vars(&self, spec: &NoiseSpec, batch: usize) -> Result<Vec<Var<T>>> {
        Ok(spec
            .tensors::<T>(&self.config, batch)?
            .into_iter()
            .map(Var::constant)
            .collect())
    }

    fn check_z(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.config.z_dim {
            return Err(Error::ShapeMismatch(format!(
                "z has {} entries, expected {}",
                z.len(),
                self.config.z_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                index: z.iter().position(|v| !v.is_finite()).unwrap_or(0),
            });
        }
        Ok(())
    }

    fn check_conditions(&self, seg: &SegmentationMap, depth: Option<&DepthMap>) -> Result<()> {
        let r = self.config.output_resolution;
        if seg.height() != r || seg.width() != r {
            return Err(Error::ShapeMismatch(format!(
                "segmentation is {}x{}, model expects {r}x{r}",
                seg.height(),
                seg.width()
            )));
        }
        if seg.label_set() != &self.config.label_set {
            return Err(Error::InvalidConfig("segmentation label set differs from the model's".into()));
        }
        match (self.config.mode.uses_depth_input(), depth) {
            (true, Some(d)) => validate_pair(seg, d),
            (true, None) => Err(Error::ShapeMismatch(format!(
                "{} model needs a depth condition",
                self.config.mode
            ))),
            (false, _) => Ok(()),
        }
    }

    fn single_conditions(&self, seg: &SegmentationMap, depth: Option<&DepthMap>) -> Result<Conditions<T>> {
        self.check_conditions(seg, depth)?;
        Conditions::from_maps(&[(seg, depth)], self.config.mode.uses_depth_input())
    }

    // ---- typed single-sample API ----

    /// `w` for one `z`.
    pub fn map_random_latent(&self, z: &[f32]) -> Result<SpatialLatent> {
        self.check_z(z)?;
        let zt = Tensor::from_vec(&[1, z.len()], z.iter().map(|&v| T::of(v as f64)).collect());
        let w = no_grad(|| self.map_latent(&self.params.bind(), &Var::constant(zt)));
        Ok(latent_from(0, w.value()))
    }

    /// `m_i` for one condition pair.
    pub fn build_condition_latent(
        &self,
        seg: &SegmentationMap,
        depth: Option<&DepthMap>,
        layer: usize,
    ) -> Result<SpatialLatent> {
        self.check_layer(layer)?;
        let cond = self.single_conditions(seg, depth)?;
        let m = no_grad(|| self.condition_latent(&self.params.bind(), &cond, layer));
        Ok(latent_from(layer, m.value()))
    }

    /// `w⁺_layer` from the previous latent and this layer's condition latent.
    pub fn fuse(&self, prev: &SpatialLatent, m: &SpatialLatent) -> Result<SpatialLatent> {
        let layer = m.layer_index;
        self.check_layer(layer)?;
        let want_m = self.config.layer_shape(layer);
        let want_prev = if layer == 0 {
            self.config.base_latent_shape
        } else {
            self.config.layer_shape(layer - 1)
        };
        if m.shape() != want_m || prev.shape() != want_prev {
            return Err(Error::ShapeMismatch(format!(
                "fuse at layer {layer}: got {:?} + {:?}, expected {want_prev:?} + {want_m:?}",
                prev.shape(),
                m.shape()
            )));
        }
        let out = no_grad(|| {
            let p = self.params.bind();
            self.fuse_stages(&p, &batch1(&prev.values), &batch1(&m.values), layer)
                .out
        });
        Ok(latent_from(layer, out.value()))
    }

    /// Run synthesis on explicit per-layer latents; output `C×H×W` in `[-1, 1]`.
    pub fn synthesize(&self, latents: &[SpatialLatent], noise: &NoiseSpec) -> Result<Tensor<f32>> {
        if latents.len() != self.config.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "{} latents for {} layers",
                latents.len(),
                self.config.num_layers()
            )));
        }
        for (i, l) in latents.iter().enumerate() {
            if l.shape() != self.config.layer_shape(i) {
                return Err(Error::ShapeMismatch(format!(
                    "latent {i} has shape {:?}, expected {:?}",
                    l.shape(),
                    self.config.layer_shape(i)
                )));
            }
        }
        let noise = self.noise_vars(noise, 1)?;
        let out = no_grad(|| {
            let vars: Vec<Var<T>> = latents.iter().map(|l| batch1(&l.values)).collect();
            self.synthesize_graph(&self.params.bind(), &vars, &noise)
        });
        let s = out.shape().to_vec();
        Ok(out.value().cast::<f32>().reshape(&s[1..]))
    }

    /// Full pass for one sample. Deterministic in all arguments.
    pub fn generate(
        &self,
        seg: &SegmentationMap,
        depth: Option<&DepthMap>,
        z: &[f32],
        noise_seed: u64,
    ) -> Result<Generated> {
        self.check_z(z)?;
        let cond = self.single_conditions(seg, depth)?;
        let zt = Tensor::from_vec(&[1, z.len()], z.iter().map(|&v| T::of(v as f64)).collect());
        let noise = self.noise_vars(&NoiseSpec::Seed(noise_seed), 1)?;
        let out = no_grad(|| self.forward(&self.params.bind(), &cond, &Var::constant(zt), &noise));
        to_generated(self.config.mode, &out.value().cast::<f32>())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.num_layers() {
            return Err(Error::InvalidConfig(format!(
                "layer {layer} out of range (model has {})",
                self.config.num_layers()
            )));
        }
        Ok(())
    }
}

fn batch1<T: Element>(t: &Tensor<f32>) -> Var<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Var::constant(t.cast::<T>().reshape(&shape))
}

fn latent_from<T: Element>(layer_index: usize, t: &Tensor<T>) -> SpatialLatent {
    let s = t.shape();
    SpatialLatent {
        layer_index,
        values: t.cast::<f32>().reshape(&s[1..]),
    }
}

/// Convert one network output `[1, C, H, W]` into a typed result.
pub fn to_generated(mode: Mode, out: &Tensor<f32>) -> Result<Generated> {
    let s = out.shape();
    let (h, w) = (s[2], s[3]);
    match mode {
        Mode::S2d => Ok(Generated::Depth(DepthMap::from_clamped(
            h,
            w,
            out.data().iter().map(|&v| (v + 1.0) * 0.5).collect(),
        )?)),
        Mode::Sd2i | Mode::S2i => Ok(Generated::Image(ImageTensor::new(
            h,
            w,
            out.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect(),
        )?)),
    }
}

/// Per-sample, per-channel normalisation over the spatial axes.
pub(crate) fn instance_norm<T: Element>(h: &Var<T>) -> Var<T> {
    let centered = h.sub(&h.mean_hw());
    let var = centered.square().mean_hw();
    centered.mul(&var.add_scalar(T::of(NORM_EPS)).powf(T::of(-0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;
    use crate::types::LabelSet;

    fn striped_seg(r: usize) -> SegmentationMap {
        let labels = (0..r * r).map(|p| ((p / r) * 7 / r) as u8).collect();
        SegmentationMap::new(r, r, labels, LabelSet::default()).unwrap()
    }

    fn ramp_depth(r: usize) -> DepthMap {
        DepthMap::new(r, r, (0..r * r).map(|p| 1.0 - (p / r) as f32 / r as f32).collect()).unwrap()
    }

    #[test]
    fn mapping_output_is_64x8x8_and_deterministic() {
        let g = Generator::<f32>::new(&ModelConfig::desk64(Mode::Sd2i)).unwrap();
        let z = vec![0.0; 512];
        let a = g.map_random_latent(&z).unwrap();
        let b = g.map_random_latent(&z).unwrap();
        assert_eq!(a.shape(), [64, 8, 8]);
        assert_eq!(a, b);
        assert!(a.values.all_finite());
        let z1 = sample_z(512, 1);
        let z2 = sample_z(512, 2);
        let d = g
            .map_random_latent(&z1)
            .unwrap()
            .values
            .max_abs_diff(&g.map_random_latent(&z2).unwrap().values);
        assert!(d > 0.0);
        assert!(matches!(g.map_random_latent(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn condition_latent_shapes_and_determinism() {
        let g = Generator::<f32>::new(&ModelConfig::desk64(Mode::Sd2i)).unwrap();
        let (s, d) = (striped_seg(64), ramp_depth(64));
        let m0 = g.build_condition_latent(&s, Some(&d), 0).unwrap();
        assert_eq!(m0.shape(), [64, 8, 8]);
        assert_eq!(m0, g.build_condition_latent(&s, Some(&d), 0).unwrap());
        assert_eq!(g.build_condition_latent(&s, Some(&d), 3).unwrap().shape(), [32, 64, 64]);
        assert!(g.build_condition_latent(&s, Some(&d), 4).is_err());
        assert!(g.build_condition_latent(&s, None, 0).is_err());
    }

    #[test]
    fn permuting_labels_with_matching_weights_leaves_condition_latent_unchanged() {
        let config = ModelConfig::tiny(Mode::Sd2i, 16);
        let g = Generator::<f64>::new(&config).unwrap();
        let s = striped_seg(16);
        let d = ramp_depth(16);
        // Swap label ids 0 and 3 in the map, and input channels 0 and 3 of
        // every condition-block kernel.
        let swapped: Vec<u8> = s
            .labels()
            .iter()
            .map(|&l| match l {
                0 => 3,
                3 => 0,
                o => o,
            })
            .collect();
        let s2 = SegmentationMap::new(16, 16, swapped, LabelSet::default()).unwrap();
        let mut g2 = g.clone();
        for block in g.condition_blocks() {
            let w = g2.params_mut().get_mut(block.weight_id());
            let [co, ci, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
            let data = w.data_mut();
            for o in 0..co {
                for t in 0..k * k {
                    data.swap((o * ci) * k * k + t, (o * ci + 3) * k * k + t);
                }
            }
        }
        for layer in 0..config.num_layers() {
            let a = g.build_condition_latent(&s, Some(&d), layer).unwrap();
            let b = g2.build_condition_latent(&s2, Some(&d), layer).unwrap();
            assert!(a.values.max_abs_diff(&b.values) < 1e-12);
        }
    }

    #[test]
    fn fuse_addition_stage_is_additive_identity_and_commutative() {
        let g = Generator::<f64>::new(&ModelConfig::tiny(Mode::Sd2i, 16)).unwrap();
        let p = g.params().bind();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Var::constant(Tensor::<f64>::randn(&[1, 4, 8, 8], &mut rng));
        let b = Var::constant(Tensor::<f64>::randn(&[1, 4, 8, 8], &mut rng));
        let zero = Var::constant(Tensor::<f64>::zeros(&[1, 4, 8, 8]));
        assert_eq!(g.fuse_stages(&p, &a, &zero, 0).sum.value(), a.value());
        assert_eq!(
            g.fuse_stages(&p, &a, &b, 0).sum.value(),
            g.fuse_stages(&p, &b, &a, 0).sum.value()
        );
        // Past layer 0 the addition sees the lifted latent.
        let z16 = Var::constant(Tensor::<f64>::zeros(&[1, 4, 16, 16]));
        let st = g.fuse_stages(&p, &a, &z16, 1);
        assert_eq!(st.sum.value(), st.lifted.value());
    }

    #[test]
    fn fused_chain_shapes_at_64() {
        let g = Generator::<f32>::new(&ModelConfig::desk64(Mode::Sd2i)).unwrap();
        let (s, d) = (striped_seg(64), ramp_depth(64));
        let mut prev = g.map_random_latent(&sample_z(512, 0)).unwrap();
        let mut shapes = Vec::new();
        for i in 0..4 {
            let m = g.build_condition_latent(&s, Some(&d), i).unwrap();
            prev = g.fuse(&prev, &m).unwrap();
            shapes.push(prev.shape());
        }
        assert_eq!(shapes, vec![[64, 8, 8], [64, 16, 16], [64, 32, 32], [32, 64, 64]]);
        let bad = SpatialLatent {
            layer_index: 1,
            values: Tensor::zeros(&[64, 8, 8]),
        };
        assert!(g.fuse(&prev, &bad).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let config = ModelConfig::tiny(Mode::Sd2i, 32);
        let g = Generator::<f32>::new(&config).unwrap();
        let (s, d) = (striped_seg(32), ramp_depth(32));
        let z = sample_z(config.z_dim, 9);
        let a = g.generate(&s, Some(&d), &z, 4).unwrap().into_image().unwrap();
        let b = g.generate(&s, Some(&d), &z, 4).unwrap().into_image().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().len(), 3 * 32 * 32);
        assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = g.generate(&s, Some(&d), &z, 5).unwrap().into_image().unwrap();
        assert_ne!(a, c, "noise seed must matter");
    }

    #[test]
    fn s2d_emits_depth_in_unit_range() {
        let config = ModelConfig::tiny(Mode::S2d, 16);
        let g = Generator::<f32>::new(&config).unwrap();
        let out = g
            .generate(&striped_seg(16), None, &sample_z(config.z_dim, 1), 0)
            .unwrap()
            .into_depth()
            .unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
        assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zeroed_condition_blocks_make_output_condition_independent() {
        let config = ModelConfig::tiny(Mode::Sd2i, 16);
        let mut g = Generator::<f32>::new(&config).unwrap();
        let blocks = g.condition_blocks().to_vec();
        for b in &blocks {
            let w = g.params_mut().get_mut(b.weight_id());
            *w = Tensor::zeros(w.shape());
        }
        let z = sample_z(config.z_dim, 2);
        let a = g.generate(&striped_seg(16), Some(&ramp_depth(16)), &z, 1).unwrap();
        let flat = SegmentationMap::new(16, 16, vec![4; 256], LabelSet::default()).unwrap();
        let b = g
            .generate(&flat, Some(&DepthMap::constant(16, 16, 0.1).unwrap()), &z, 1)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthesize_validates_latent_shapes() {
        let config = ModelConfig::tiny(Mode::Sd2i, 16);
        let g = Generator::<f32>::new(&config).unwrap();
        let good: Vec<SpatialLatent> = (0..2)
            .map(|i| SpatialLatent {
                layer_index: i,
                values: Tensor::zeros(&config.layer_shape(i)),
            })
            .collect();
        assert_eq!(g.synthesize(&good, &NoiseSpec::Zero).unwrap().shape(), &[3, 16, 16]);
        assert!(g.synthesize(&good[..1], &NoiseSpec::Zero).is_err());
        assert!(g
            .synthesize(&good, &NoiseSpec::Maps(vec![Tensor::zeros(&[1, 1, 8, 8])]))
            .is_err());
    }

    #[test]
    fn gradient_of_mean_output_matches_finite_differences() {
        let config = ModelConfig::tiny(Mode::Sd2i, 16);
        let g = Generator::<f64>::new(&config).unwrap();
        let p = g.params().bind();
        let seg = striped_seg(16).one_hot::<f64>().reshape(&[1, 7, 16, 16]);
        let depth = ramp_depth(16).to_signed_tensor::<f64>().reshape(&[1, 1, 16, 16]);
        let z = Tensor::from_vec(&[1, 8], sample_z(8, 3).iter().map(|&v| v as f64).collect());
        let noise = g.noise_vars(&NoiseSpec::Seed(1), 1).unwrap();
        let eval = |z: &Tensor<f64>, s: &Tensor<f64>, d: &Tensor<f64>, leaf: bool| {
            let mk = |t: &Tensor<f64>| if leaf { Var::leaf(t.clone()) } else { Var::constant(t.clone()) };
            let (zv, sv, dv) = (mk(z), mk(s), mk(d));
            let cond = Conditions {
                seg: sv.clone(),
                depth: Some(dv.clone()),
            };
            let out = g.forward(&p, &cond, &zv, &noise).mean_all();
            (out, zv, sv, dv)
        };
        let (out, zv, sv, dv) = eval(&z, &seg, &depth, true);
        let grads = grad(&out, &[&zv, &sv, &dv], false);
        let inputs = [&z, &seg, &depth];
        let h = 1e-4;
        for (which, (g_an, x)) in grads.iter().zip(inputs).enumerate() {
            let mut fd = vec![0.0; x.numel()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let mut args_p = [z.clone(), seg.clone(), depth.clone()];
                let mut args_m = args_p.clone();
                args_p[which] = plus;
                args_m[which] = minus;
                let fp = no_grad(|| eval(&args_p[0], &args_p[1], &args_p[2], false).0.item());
                let fm = no_grad(|| eval(&args_m[0], &args_m[1], &args_m[2], false).0.item());
                *slot = (fp - fm) / (2.0 * h);
            }
            let an = g_an.value().data();
            let norm: f64 = an.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(norm > 0.0, "input {which}: zero gradient");
            assert!(err / norm < 1e-3, "input {which}: relative error {}", err / norm);
        }
    }
}
