//! Feature spaces for perceptual losses and metrics.
//!
//! The default extractor is a fixed, seeded, untrained convolution stack. Any
//! other network (for example an adapter around pretrained weights) can be
//! plugged in through [`Features`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor, Var};

/// Seed of the default extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;
/// Widths of the default extractor's three stages.
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-8;

pub trait Features {
    /// Stable identifier; equal ids must give equal features.
    fn id(&self) -> &str;
    fn in_channels(&self) -> usize;
    /// Feature maps, one per tap, for `x` `[N, C, H, W]`.
    fn feature_maps<T: Element>(&self, x: &Var<T>) -> Vec<Var<T>>;

    /// Per-sample global descriptor: the spatial mean of every tap, concatenated.
    fn embed<T: Element>(&self, x: &Tensor<T>) -> Vec<Vec<f64>> {
        let maps = crate::tensor::no_grad(|| self.feature_maps(&Var::constant(x.clone())));
        let n = x.shape()[0];
        let mut out = vec![Vec::new(); n];
        for m in &maps {
            let pooled = m.mean_hw();
            let c = pooled.shape()[1];
            let data = pooled.value().to_f64_vec();
            for (i, row) in out.iter_mut().enumerate() {
                row.extend_from_slice(&data[i * c..(i + 1) * c]);
            }
        }
        out
    }
}

/// Seeded random `conv3×3 → lrelu` stages with 2× average pooling between
/// them. Each stage's activation is a tap.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    id: String,
    in_channels: usize,
    weights: Vec<Tensor<f64>>,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut c_in = in_channels;
        for &c in widths {
            let scale = (2.0 / (c_in * 9) as f64).sqrt();
            weights.push(Tensor::<f64>::randn(&[c, c_in, 3, 3], &mut rng).map(|v| v * scale));
            c_in = c;
        }
        let w: Vec<String> = widths.iter().map(ToString::to_string).collect();
        Self {
            id: format!("randconv-c{in_channels}-w{}-s{seed}", w.join("x")),
            in_channels,
            weights,
        }
    }

    /// The default extractor for `in_channels`-channel inputs.
    pub fn default_for(in_channels: usize) -> Self {
        Self::new(in_channels, &DEFAULT_WIDTHS, DEFAULT_EXTRACTOR_SEED)
    }

    pub fn weights(&self) -> &[Tensor<f64>] {
        &self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.iter().map(|w| w.shape()[0]).sum()
    }
}

impl Features for RandomConvExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn feature_maps<T: Element>(&self, x: &Var<T>) -> Vec<Var<T>> {
        assert_eq!(x.shape()[1], self.in_channels, "extractor input channels");
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 && h.shape()[2] >= 2 {
                h = h.avg_pool2x();
            }
            h = h.conv2d(&Var::constant(w.cast()), 1, 1).leaky_relu(T::of(SLOPE));
            taps.push(h.clone());
        }
        taps
    }
}

/// Per-sample perceptual distance `[N, 1, 1, 1]`: for each tap, unit-normalise
/// along channels, take squared differences summed over channels and
/// averaged over pixels; then average the taps.
pub fn perceptual_distance<T: Element, F: Features>(extractor: &F, x: &Var<T>, y: &Var<T>) -> Var<T> {
    let fx = extractor.feature_maps(x);
    let fy = extractor.feature_maps(y);
    let n = x.shape()[0];
    let mut total: Option<Var<T>> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = unit_normalize(a).sub(&unit_normalize(b)).square();
        let s = d.shape().to_vec();
        let per_pixel = d.sum_to(&[n, 1, s[2], s[3]]);
        let term = per_pixel.mean_hw();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total
        .expect("extractor has at least one tap")
        .mul_scalar(T::of(1.0 / fx.len() as f64))
}

/// Batch mean of [`perceptual_distance`].
pub fn perceptual_loss<T: Element, F: Features>(extractor: &F, x: &Var<T>, y: &Var<T>) -> Var<T> {
    perceptual_distance(extractor, x, y).mean_all()
}

fn unit_normalize<T: Element>(f: &Var<T>) -> Var<T> {
    let s = f.shape().to_vec();
    let norm_sq = f.square().sum_to(&[s[0], 1, s[2], s[3]]);
    f.mul(&norm_sq.add_scalar(T::of(NORM_EPS)).powf(T::of(-0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[2, 3, 16, 16], &mut rng)
    }

    #[test]
    fn identical_inputs_have_zero_distance_and_distance_is_symmetric() {
        let e = RandomConvExtractor::default_for(3);
        let (x, y) = (Var::constant(rand_img(1)), Var::constant(rand_img(2)));
        assert_eq!(perceptual_loss(&e, &x, &x).item(), 0.0);
        let a = perceptual_loss(&e, &x, &y).item();
        let b = perceptual_loss(&e, &y, &x).item();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn extractor_is_deterministic_by_id() {
        let a = RandomConvExtractor::default_for(3);
        let b = RandomConvExtractor::default_for(3);
        assert_eq!(a.id(), b.id());
        assert_eq!(a.embed(&rand_img(3)), b.embed(&rand_img(3)));
        assert_eq!(a.embed(&rand_img(3))[0].len(), a.feature_dim());
        assert_ne!(a.id(), RandomConvExtractor::default_for(1).id());
    }

    /// Plain-loop recomputation of one sample's distance, sharing nothing
    /// with the tensor kernels.
    fn scripted_distance(weights: &[Tensor<f64>], x: &[f64], y: &[f64], c: usize, r: usize) -> f64 {
        fn features(weights: &[Tensor<f64>], img: &[f64], c: usize, r: usize) -> Vec<(Vec<f64>, usize, usize)> {
            let (mut h, mut ch, mut side) = (img.to_vec(), c, r);
            let mut taps = Vec::new();
            for (i, w) in weights.iter().enumerate() {
                if i > 0 {
                    let half = side / 2;
                    let mut p = vec![0.0; ch * half * half];
                    for k in 0..ch {
                        for yy in 0..half {
                            for xx in 0..half {
                                let mut a = 0.0;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    a += h[k * side * side + (2 * yy + dy) * side + 2 * xx + dx];
                                }
                                p[k * half * half + yy * half + xx] = a / 4.0;
                            }
                        }
                    }
                    h = p;
                    side = half;
                }
                let out_c = w.shape()[0];
                let wd = w.data();
                let mut o = vec![0.0; out_c * side * side];
                for oc in 0..out_c {
                    for yy in 0..side as isize {
                        for xx in 0..side as isize {
                            let mut a = 0.0;
                            for ic in 0..ch {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                        if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                            continue;
                                        }
                                        a += wd[((oc * ch + ic) * 3 + ky as usize) * 3 + kx as usize]
                                            * h[ic * side * side + sy as usize * side + sx as usize];
                                    }
                                }
                            }
                            o[oc * side * side + yy as usize * side + xx as usize] = if a > 0.0 { a } else { 0.2 * a };
                        }
                    }
                }
                h = o;
                ch = out_c;
                taps.push((h.clone(), ch, side));
            }
            taps
        }
        let (fx, fy) = (features(weights, x, c, r), features(weights, y, c, r));
        let mut total = 0.0;
        for ((a, ch, side), (b, _, _)) in fx.iter().zip(&fy) {
            let plane = side * side;
            let mut acc = 0.0;
            for p in 0..plane {
                let na = (0..*ch).map(|k| a[k * plane + p].powi(2)).sum::<f64>() + 1e-8;
                let nb = (0..*ch).map(|k| b[k * plane + p].powi(2)).sum::<f64>() + 1e-8;
                acc += (0..*ch)
                    .map(|k| (a[k * plane + p] / na.sqrt() - b[k * plane + p] / nb.sqrt()).powi(2))
                    .sum::<f64>();
            }
            total += acc / plane as f64;
        }
        total / fx.len() as f64
    }

    #[test]
    fn distance_matches_scripted_recomputation() {
        let e = RandomConvExtractor::default_for(3);
        let (x, y) = (rand_img(4), rand_img(5));
        let d = perceptual_distance(&e, &Var::constant(x.clone()), &Var::constant(y.clone()));
        let plane = 3 * 16 * 16;
        for n in 0..2 {
            let want = scripted_distance(
                e.weights(),
                &x.data()[n * plane..(n + 1) * plane],
                &y.data()[n * plane..(n + 1) * plane],
                3,
                16,
            );
            let got = d.value().data()[n];
            assert!((got - want).abs() < 1e-6, "sample {n}: {got} vs {want}");
        }
    }
}
