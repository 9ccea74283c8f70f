use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Element, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording a graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

type BackwardFn<T> = Box<dyn Fn(&Var<T>) -> Vec<Option<Var<T>>>>;

struct Node<T: Element> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor participating in a (thread-local) computation graph.
#[derive(Clone)]
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.0.id, self.0.value.shape())
    }
}

impl<T: Element> Var<T> {
    fn node(value: Tensor<T>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::node(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient can be requested.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::node(value, true, Vec::new(), None)
    }

    fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.0.requires_grad) {
            Self::node(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Self::from_op(value, vec![self.clone(), other.clone()], move |g| {
            vec![Some(g.sum_to(&sa)), Some(g.sum_to(&sb))]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Self::from_op(value, vec![self.clone(), other.clone()], move |g| {
            vec![Some(g.sum_to(&sa)), Some(g.neg().sum_to(&sb))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Self::from_op(value, vec![self.clone(), other.clone()], move |g| {
            let ga = a.requires_grad().then(|| g.mul(&b).sum_to(a.shape()));
            let gb = b.requires_grad().then(|| g.mul(&a).sum_to(b.shape()));
            vec![ga, gb]
        })
    }

    /// Multiply by a tensor that never receives gradient.
    pub fn mul_const(&self, c: &Tensor<T>) -> Var<T> {
        self.mul(&Var::constant(c.clone()))
    }

    pub fn add_const(&self, c: &Tensor<T>) -> Var<T> {
        self.add(&Var::constant(c.clone()))
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Var<T> {
        let value = self.value().map(|v| v * s);
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul_scalar(s))])
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let value = self.value().map(|v| v + s);
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    pub fn powf(&self, p: T) -> Var<T> {
        let value = self.value().map(|v| v.powf(p));
        let a = self.clone();
        Self::from_op(value, vec![self.clone()], move |g| {
            vec![Some(g.mul(&a.powf(p - T::one())).mul_scalar(p))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(sigmoid);
        let a = self.clone();
        Self::from_op(value, vec![self.clone()], move |g| {
            let s = a.sigmoid();
            let ds = s.mul(&s.neg().add_scalar(T::one()));
            vec![Some(g.mul(&ds))]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<T> {
        let value = self.value().map(softplus);
        let a = self.clone();
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a.sigmoid()))])
    }

    pub fn tanh(&self) -> Var<T> {
        let value = self.value().map(|v| v.tanh());
        let a = self.clone();
        Self::from_op(value, vec![self.clone()], move |g| {
            let t = a.tanh();
            vec![Some(g.mul(&t.square().neg().add_scalar(T::one())))]
        })
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let value = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        let mask = self
            .value()
            .map(|v| if v > T::zero() { T::one() } else { slope });
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul_const(&mask))])
    }

    pub fn abs(&self) -> Var<T> {
        let value = self.value().map(|v| v.abs());
        let sign = self.value().map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul_const(&sign))])
    }

    // ---- shape / reduction ----

    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self.value().sum_to(shape);
        let src = self.shape().to_vec();
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.broadcast_to(&src))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self.value().broadcast_to(shape);
        let src = self.shape().to_vec();
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.sum_to(&src))])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let value = self.value().reshape(shape);
        let src = self.shape().to_vec();
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.reshape(&src))])
    }

    pub fn sum_all(&self) -> Var<T> {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[1])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(T::of(1.0 / n))
    }

    /// Mean over the trailing spatial axes of an NCHW tensor, keeping dims.
    pub fn mean_hw(&self) -> Var<T> {
        let s = self.shape();
        let n = (s[2] * s[3]) as f64;
        self.sum_to(&[s[0], s[1], 1, 1]).mul_scalar(T::of(1.0 / n))
    }

    /// Mean over all but the leading (batch) axis, giving shape `[N]`.
    pub fn mean_per_sample(&self) -> Var<T> {
        let s = self.shape();
        let per: usize = s[1..].iter().product();
        let mut target = vec![1; s.len()];
        target[0] = s[0];
        self.sum_to(&target)
            .reshape(&[s[0]])
            .mul_scalar(T::of(1.0 / per as f64))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().matmul(other.value());
        let (a, b) = (self.clone(), other.clone());
        Self::from_op(value, vec![self.clone(), other.clone()], move |g| {
            let ga = a.requires_grad().then(|| g.matmul(&b.transpose()));
            let gb = b.requires_grad().then(|| a.transpose().matmul(g));
            vec![ga, gb]
        })
    }

    pub fn transpose(&self) -> Var<T> {
        let value = self.value().transpose2();
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.transpose())])
    }

    pub fn conv2d(&self, w: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let value = self.value().conv2d(w.value(), stride, pad);
        let (x, wc) = (self.clone(), w.clone());
        Self::from_op(value, vec![self.clone(), w.clone()], move |g| {
            let k = wc.shape()[2];
            let gx = x
                .requires_grad()
                .then(|| g.conv2d_input_grad(&wc, x.shape(), stride, pad));
            let gw = wc
                .requires_grad()
                .then(|| x.conv2d_weight_grad(g, k, stride, pad));
            vec![gx, gw]
        })
    }

    /// Adjoint of [`Var::conv2d`] with respect to its input.
    pub fn conv2d_input_grad(&self, w: &Var<T>, in_shape: &[usize], stride: usize, pad: usize) -> Var<T> {
        let value = self.value().conv2d_input_grad(w.value(), in_shape, stride, pad);
        let (gout, wc) = (self.clone(), w.clone());
        Self::from_op(value, vec![self.clone(), w.clone()], move |gg| {
            let k = wc.shape()[2];
            let d_gout = gout.requires_grad().then(|| gg.conv2d(&wc, stride, pad));
            let d_w = wc
                .requires_grad()
                .then(|| gg.conv2d_weight_grad(&gout, k, stride, pad));
            vec![d_gout, d_w]
        })
    }

    /// Adjoint of [`Var::conv2d`] with respect to its weight; `self` is the
    /// convolution input and `gout` the output cotangent.
    pub fn conv2d_weight_grad(&self, gout: &Var<T>, k: usize, stride: usize, pad: usize) -> Var<T> {
        let value = self.value().conv2d_weight_grad(gout.value(), k, stride, pad);
        let (x, g) = (self.clone(), gout.clone());
        Self::from_op(value, vec![self.clone(), gout.clone()], move |gv| {
            let dx = x
                .requires_grad()
                .then(|| g.conv2d_input_grad(gv, x.shape(), stride, pad));
            let dg = g.requires_grad().then(|| x.conv2d(gv, stride, pad));
            vec![dx, dg]
        })
    }

    // ---- resampling ----

    pub fn upsample2x(&self) -> Var<T> {
        let value = self.value().upsample2x();
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.sum_pool2x())])
    }

    pub fn sum_pool2x(&self) -> Var<T> {
        let value = self.value().sum_pool2x();
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.upsample2x())])
    }

    pub fn avg_pool2x(&self) -> Var<T> {
        self.sum_pool2x().mul_scalar(T::of(0.25))
    }

    /// Nearest-neighbour halving that keeps the top-left pixel of each 2×2 block.
    pub fn subsample2x(&self) -> Var<T> {
        let value = self.value().subsample2x();
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.unsubsample2x())])
    }

    pub fn unsubsample2x(&self) -> Var<T> {
        let value = self.value().unsubsample2x();
        Self::from_op(value, vec![self.clone()], |g| vec![Some(g.subsample2x())])
    }

    // ---- channels ----

    pub fn concat_channels(items: &[&Var<T>]) -> Var<T> {
        let tensors: Vec<&Tensor<T>> = items.iter().map(|v| v.value()).collect();
        let value = Tensor::concat_channels(&tensors);
        let sizes: Vec<usize> = items.iter().map(|v| v.shape()[1]).collect();
        let parents: Vec<Var<T>> = items.iter().map(|v| (*v).clone()).collect();
        Self::from_op(value, parents, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&c| {
                    let part = g.narrow_channels(start, c);
                    start += c;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<T> {
        let value = self.value().narrow_channels(start, len);
        let total = self.shape()[1];
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.pad_channels(start, total))])
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Var<T> {
        let value = self.value().pad_channels(start, total);
        let len = self.shape()[1];
        Self::from_op(value, vec![self.clone()], move |g| vec![Some(g.narrow_channels(start, len))])
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Gradients of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable,
/// which is what second-order penalties need. Inputs the output does not
/// depend on get zero gradients.
pub fn grad<T: Element>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
    let run = || backward_pass(output, wrt);
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

fn backward_pass<T: Element>(output: &Var<T>, wrt: &[&Var<T>]) -> Vec<Var<T>> {
    let order = topo_order(output);
    let wanted: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    let mut found: HashMap<usize, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if wanted.contains(&node.id()) {
            found.insert(node.id(), g.clone());
        }
        let Some(backward) = node.0.backward.as_ref() else {
            continue;
        };
        let parent_grads = backward(&g);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }

    wrt.iter()
        .map(|v| {
            found
                .remove(&v.id())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

fn topo_order<T: Element>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&Var<f64>) -> Var<f64>, x: &Tensor<f64>) -> f64 {
        let v = Var::leaf(x.clone());
        let g = grad(&f(&v), &[&v], false).remove(0);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = no_grad(|| (f(&Var::constant(p)).item() - f(&Var::constant(m)).item()) / (2.0 * h));
            let an = g.value().data()[i];
            worst = worst.max((fd - an).abs() / (1.0 + fd.abs()));
        }
        worst
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
        let c = Tensor::<f64>::randn(&[1, 3, 1, 1], &mut rng);
        let cases: Vec<Box<dyn Fn(&Var<f64>) -> Var<f64>>> = vec![
            Box::new(|v| v.tanh().sum_all()),
            Box::new(|v| v.softplus().mean_all()),
            Box::new(|v| v.sigmoid().square().sum_all()),
            Box::new(|v| v.leaky_relu(0.2).mul(v).sum_all()),
            Box::new(|v| v.square().add_scalar(1.0).powf(-0.5).sum_all()),
            Box::new(|v| v.mean_hw().square().sum_all()),
            Box::new(|v| v.upsample2x().sum_pool2x().subsample2x().square().sum_all()),
            Box::new(move |v| v.add_const(&c).mul_const(&c).square().sum_all()),
            Box::new(|v| Var::concat_channels(&[v, &v.tanh()]).narrow_channels(1, 4).square().sum_all()),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = fd_check(f, &x);
            assert!(err < 1e-6, "case {i}: max error {err}");
        }
    }

    #[test]
    fn conv_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[2, 2, 6, 6], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng);
        let wv = Var::constant(w.clone());
        assert!(fd_check(|v| v.conv2d(&wv, 2, 1).tanh().sum_all(), &x) < 1e-6);
        let xv = Var::constant(x.clone());
        assert!(fd_check(|v| xv.conv2d(v, 1, 1).square().sum_all(), &w) < 1e-6);
        let m = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let n = Var::constant(Tensor::<f64>::randn(&[4, 2], &mut rng));
        assert!(fd_check(|v| v.matmul(&n).tanh().sum_all(), &m) < 1e-6);
    }

    #[test]
    fn second_order_through_convolution() {
        // f(w) = || d/dx sum(tanh(conv(x, w))) ||^2 ; check df/dw by finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], &mut rng);
        let w = Tensor::<f64>::randn(&[2, 2, 3, 3], &mut rng).map(|v| v * 0.3);
        let penalty = |wv: &Var<f64>| {
            let xv = Var::leaf(x.clone());
            let out = xv.conv2d(wv, 1, 1).tanh().conv2d(wv, 2, 1).sum_all();
            let gx = grad(&out, &[&xv], true).remove(0);
            gx.square().sum_all()
        };
        let wv = Var::leaf(w.clone());
        let analytic = grad(&penalty(&wv), &[&wv], false).remove(0);
        let h = 1e-6;
        for i in 0..w.numel() {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            let fd = (penalty(&Var::constant(p)).item() - penalty(&Var::constant(m)).item()) / (2.0 * h);
            let an = analytic.value().data()[i];
            assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "w[{i}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn gradients_accumulate_over_reuse_and_unused_inputs_are_zero() {
        let a = Var::leaf(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]));
        let b = Var::leaf(Tensor::<f64>::from_vec(&[2], vec![5.0, 5.0]));
        let y = a.mul(&a).add(&a).sum_all();
        let g = grad(&y, &[&a, &b], false);
        assert_eq!(g[0].value().data(), &[3.0, 5.0]);
        assert_eq!(g[1].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = Var::leaf(Tensor::<f32>::ones(&[3]));
        let y = no_grad(|| a.mul_scalar(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0 && softplus(-1000.0f64) < 1e-300);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
