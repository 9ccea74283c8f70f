//! Parameter storage, the two layer types the models are built from, and Adam.
//!
//! Layers use equalized learning rate: weights are stored as unit normals and
//! scaled by `1/sqrt(fan_in)` at use, so one Adam step size suits every layer.

use rand::Rng;

use crate::tensor::{Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace every tensor with a same-named, same-shaped one from `other`.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<(), String> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| format!("missing parameter `{name}`"))?;
            if t.shape() != slot.shape() {
                return Err(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Bind as constants, for inference.
    pub fn bind(&self) -> Bound<T> {
        Bound {
            vars: self.tensors.iter().cloned().map(Var::constant).collect(),
        }
    }

    /// Bind as gradient leaves, for training.
    pub fn bind_trainable(&self) -> Bound<T> {
        Bound {
            vars: self.tensors.iter().cloned().map(Var::leaf).collect(),
        }
    }
}

/// Parameters of one store bound into the current graph.
pub struct Bound<T: Element> {
    vars: Vec<Var<T>>,
}

impl<T: Element> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn refs(&self) -> Vec<&Var<T>> {
        self.vars.iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    scale: f64,
}

impl Conv2d {
    /// `kernel`×`kernel` convolution with "same" padding at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_channels, in_channels, kernel, kernel], rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_channels, 1, 1])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            scale: 1.0 / ((in_channels * kernel * kernel) as f64).sqrt(),
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let w = p.var(self.weight).mul_scalar(T::of(self.scale));
        let y = x.conv2d(&w, self.stride, self.pad);
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
    scale: f64,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[in_features, out_features], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
            scale: 1.0 / (in_features as f64).sqrt(),
        }
    }

    /// `x` is `[N, in_features]`.
    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let w = p.var(self.weight).mul_scalar(T::of(self.scale));
        x.matmul(&w).add(p.var(self.bias))
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update; `grads` is aligned with the store's parameters.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, (param, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_shapes_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 5, 3, 2, true, &mut rng);
        let x = Var::constant(Tensor::randn(&[2, 3, 8, 8], &mut rng));
        let y = conv.forward(&store.bind(), &x);
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        assert_eq!(store.len(), 2);
        assert!(store.by_name("c.weight").is_some());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "l", 4, 1, &mut rng);
        let x = Var::constant(Tensor::randn(&[16, 4], &mut rng));
        let target = Var::constant(Tensor::<f32>::ones(&[16, 1]).map(|v| v * 3.0));
        let mut opt = Adam::new(&store, 0.05, 0.9, 0.99, 1e-8);
        let loss_at = |store: &ParamStore<f32>| {
            let p = store.bind_trainable();
            let loss = lin.forward(&p, &x).sub(&target).square().mean_all();
            let g = grad(&loss, &p.refs(), false);
            (loss.item(), g.into_iter().map(|v| v.value().clone()).collect::<Vec<_>>())
        };
        let (first, _) = loss_at(&store);
        for _ in 0..300 {
            let (_, g) = loss_at(&store);
            opt.update(&mut store, &g);
        }
        let (last, _) = loss_at(&store);
        assert!(last < first * 1e-2, "{first} -> {last}");
        assert_eq!(opt.steps_taken(), 300);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store.load_from(|_| Some(Tensor::zeros(&[3]))).is_err());
        assert!(store.load_from(|_| None).is_err());
        store.load_from(|_| Some(Tensor::ones(&[2]))).unwrap();
        assert_eq!(store.by_name("a").unwrap().sum(), 2.0);
    }
}
