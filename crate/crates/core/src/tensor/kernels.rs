use super::{broadcast_shape, Element, Tensor};

/// Output-space strides of `shape` right-aligned into a rank-`rank` space,
/// zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = i + rank - shape.len();
        strides[axis] = if shape[i] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Drop unit axes and merge axes that are jointly contiguous, so the inner
/// loop runs over as many elements as possible.
fn coalesce(dims: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut d: Vec<usize> = Vec::new();
    let mut a: Vec<usize> = Vec::new();
    let mut b: Vec<usize> = Vec::new();
    for i in 0..dims.len() {
        if dims[i] == 1 {
            continue;
        }
        if let (Some(&ld), Some(&la), Some(&lb)) = (d.last(), a.last(), b.last()) {
            if la == sa[i] * dims[i] && lb == sb[i] * dims[i] {
                let n = d.len() - 1;
                d[n] = ld * dims[i];
                a[n] = sa[i];
                b[n] = sb[i];
                continue;
            }
        }
        d.push(dims[i]);
        a.push(sa[i]);
        b.push(sb[i]);
    }
    if d.is_empty() {
        d.push(1);
        a.push(0);
        b.push(0);
    }
    (d, a, b)
}

/// Walk a contiguous output space in inner-axis runs, yielding
/// `(run_start, a_offset, b_offset, run_len, a_inner_stride, b_inner_stride)`.
fn for_each_run(
    dims: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let (dims, sa, sb) = coalesce(dims, sa, sb);
    let last = dims.len() - 1;
    let inner = dims[last];
    let outer: usize = dims[..last].iter().product();
    let mut idx = vec![0usize; last];
    let (mut oa, mut ob) = (0usize, 0usize);
    for run in 0..outer {
        f(run * inner, oa, ob, inner, sa[last], sb[last]);
        for ax in (0..last).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            oa -= sa[ax] * dims[ax];
            ob -= sb[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

pub(super) fn broadcast_zip<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(&a.shape, data);
    }
    let out = broadcast_shape(&a.shape, &b.shape);
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&out, &sa, &sb, |o, oa, ob, n, ia, ib| {
        let dst = &mut data[o..o + n];
        match (ia, ib) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&ad[oa..oa + n]).zip(&bd[ob..ob + n]) {
                    *d = f(x, y);
                }
            }
            (1, 0) => {
                let y = bd[ob];
                for (d, &x) in dst.iter_mut().zip(&ad[oa..oa + n]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = ad[oa];
                for (d, &y) in dst.iter_mut().zip(&bd[ob..ob + n]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[oa + j * ia], bd[ob + j * ib]);
                }
            }
        }
    });
    Tensor::from_vec(&out, data)
}

/// Sum `src` down to a broadcast-compatible `target` shape.
pub(super) fn sum_to<T: Element>(src: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if src.shape == target {
        return src.clone();
    }
    assert_eq!(
        broadcast_shape(&src.shape, target),
        src.shape,
        "cannot sum {:?} to {:?}",
        src.shape,
        target
    );
    let st = broadcast_strides(target, &src.shape);
    let zeros = vec![0; src.shape.len()];
    let mut out = vec![T::zero(); target.iter().product()];
    let sd = src.data();
    for_each_run(&src.shape, &st, &zeros, |o, ot, _, n, it, _| {
        let s = &sd[o..o + n];
        if it == 0 {
            let acc: T = s.iter().copied().sum();
            out[ot] = out[ot] + acc;
        } else {
            for (j, &v) in s.iter().enumerate() {
                let k = ot + j * it;
                out[k] = out[k] + v;
            }
        }
    });
    Tensor::from_vec(target, out)
}

pub(super) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.shape.len() == 2 && b.shape.len() == 2, "matmul needs 2-D operands");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![T::zero(); m * n];
    // SAFETY: buffers sized m*k, k*n, m*n with row-major strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&[m, n], out)
}

pub(super) fn transpose2<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel {k} larger than padded input {n}");
    (n + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the row, stride 1.
fn valid_span(g: Geom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi)
}

fn im2col<T: Element>(x: &[T], g: Geom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kx);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        line[lo..hi].copy_from_slice(&srow[lo + kx - g.pad..hi + kx - g.pad]);
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: Geom, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kx);
                        let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, &v) in drow[lo + kx - g.pad..hi + kx - g.pad].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let [n, ci, h, wd] = dims4(x);
    let [co, wci, k, k2] = dims4(w);
    assert_eq!(ci, wci, "conv2d channels: input {:?} weight {:?}", x.shape, w.shape);
    assert_eq!(k, k2);
    let g = Geom {
        c: ci,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: out_size(h, k, stride, pad),
        wo: out_size(wd, k, stride, pad),
    };
    let plane = g.ho * g.wo;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); n * co * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for b in 0..n {
        let xs = &x.data[b * ci * h * wd..(b + 1) * ci * h * wd];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let dst = &mut out[b * co * plane..(b + 1) * co * plane];
        // SAFETY: w is co×kk, src is kk×plane, dst is co×plane, all row-major.
        unsafe {
            T::gemm(
                co,
                kk,
                plane,
                T::one(),
                w.data.as_ptr(),
                kk as isize,
                1,
                src.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[n, co, g.ho, g.wo], out)
}

pub(super) fn conv2d_input_grad<T: Element>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, co, ho, wo] = dims4(gout);
    let [wco, ci, k, _] = dims4(w);
    assert_eq!(co, wco);
    let (h, wd) = (in_shape[2], in_shape[3]);
    let g = Geom {
        c: ci,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    assert_eq!((out_size(h, k, stride, pad), out_size(wd, k, stride, pad)), (ho, wo));
    let plane = ho * wo;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); n * ci * h * wd];
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..n {
        let gs = &gout.data[b * co * plane..(b + 1) * co * plane];
        let dst = &mut out[b * ci * h * wd..(b + 1) * ci * h * wd];
        let target: &mut [T] = if g.is_pointwise() { dst } else { &mut cols };
        // SAFETY: wᵀ is kk×co (strides 1, kk), gs is co×plane, target kk×plane.
        unsafe {
            T::gemm(
                kk,
                co,
                plane,
                T::one(),
                w.data.as_ptr(),
                1,
                kk as isize,
                gs.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                target.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        if !g.is_pointwise() {
            col2im(&cols, g, &mut out[b * ci * h * wd..(b + 1) * ci * h * wd]);
        }
    }
    Tensor::from_vec(&[n, ci, h, wd], out)
}

pub(super) fn conv2d_weight_grad<T: Element>(
    x: &Tensor<T>,
    gout: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, ci, h, wd] = dims4(x);
    let [gn, co, ho, wo] = dims4(gout);
    assert_eq!(n, gn);
    let g = Geom {
        c: ci,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let plane = ho * wo;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); co * kk];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for b in 0..n {
        let xs = &x.data[b * ci * h * wd..(b + 1) * ci * h * wd];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let gs = &gout.data[b * co * plane..(b + 1) * co * plane];
        // SAFETY: gs is co×plane, srcᵀ is plane×kk (strides 1, plane), out co×kk.
        unsafe {
            T::gemm(
                co,
                plane,
                kk,
                T::one(),
                gs.as_ptr(),
                plane as isize,
                1,
                src.as_ptr(),
                1,
                plane as isize,
                T::one(),
                out.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[co, ci, k, k], out)
}

fn dims4<T>(t: &Tensor<T>) -> [usize; 4] {
    assert_eq!(t.shape.len(), 4, "expected NCHW tensor, got {:?}", t.shape);
    [t.shape[0], t.shape[1], t.shape[2], t.shape[3]]
}

pub(super) fn upsample2x<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * 2 * w + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)
}

pub(super) fn sum_pool2x<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let o = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = src[o] + src[o + 1] + src[o + w] + src[o + w + 1];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(super) fn subsample2x<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                out[p * ho * wo + y * wo + xx] = x.data[p * h * w + 2 * y * w + 2 * xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(super) fn unsubsample2x<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                out[p * ho * wo + 2 * y * wo + 2 * xx] = x.data[p * h * w + y * w + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(super) fn concat_channels<T: Element>(items: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!items.is_empty());
    let [n, _, h, w] = dims4(items[0]);
    let total: usize = items.iter().map(|t| t.shape[1]).sum();
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for t in items {
            let [tn, c, th, tw] = dims4(t);
            assert_eq!((tn, th, tw), (n, h, w), "concat of mismatched tensors");
            out.extend_from_slice(&t.data[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], out)
}

pub(super) fn narrow_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    assert!(start + len <= c);
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&x.data[base..base + len * plane]);
    }
    Tensor::from_vec(&[n, len, h, w], out)
}

pub(super) fn pad_channels<T: Element>(x: &Tensor<T>, start: usize, total: usize) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    assert!(start + c <= total);
    let plane = h * w;
    let mut out = vec![T::zero(); n * total * plane];
    for b in 0..n {
        let base = (b * total + start) * plane;
        out[base..base + c * plane].copy_from_slice(&x.data[b * c * plane..(b + 1) * c * plane]);
    }
    Tensor::from_vec(&[n, total, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, ci, h, wd] = dims4(x);
        let [co, _, k, _] = dims4(w);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, co, ho, wo], out)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
            let w = Tensor::<f64>::randn(&[5, 3, k, k], &mut rng);
            let fast = conv2d(&x, &w, s, p);
            let slow = naive_conv(&x, &w, s, p);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x,w), g> = <x, convT(g,w)> = <w, wgrad(x,g)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], &mut rng);
            let y = conv2d(&x, &w, s, p);
            let g = Tensor::<f64>::randn(y.shape(), &mut rng);
            let lhs = dot(&y, &g);
            let gx = conv2d_input_grad(&g, &w, x.shape(), s, p);
            let gw = conv2d_weight_grad(&x, &g, k, s, p);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9);
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], &mut rng);
        let g = Tensor::<f64>::randn(&[1, 2, 8, 8], &mut rng);
        assert!((dot(&upsample2x(&x), &g) - dot(&x, &sum_pool2x(&g))).abs() < 1e-12);
        assert!((dot(&unsubsample2x(&x), &g) - dot(&x, &subsample2x(&g))).abs() < 1e-12);
    }

    #[test]
    fn broadcast_and_sum_to() {
        let a = Tensor::<f64>::from_vec(&[2, 3, 1, 2], (0..12).map(f64::from).collect());
        let b = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![10.0, 20.0, 30.0]);
        let c = broadcast_zip(&a, &b, |x, y| x + y);
        assert_eq!(c.data()[..6], [10.0, 11.0, 22.0, 23.0, 34.0, 35.0]);
        let s = sum_to(&c, &[1, 3, 1, 1]);
        // channel 0: (0+1+6+7) + 4*10
        assert_eq!(s.data()[0], 14.0 + 40.0);
        let total = sum_to(&a, &[1]);
        assert_eq!(total.item(), 66.0);
    }

    #[test]
    fn channel_concat_and_narrow_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[2, 2, 3, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
        let c = concat_channels(&[&a, &b]);
        assert_eq!(narrow_channels(&c, 0, 2), a);
        assert_eq!(narrow_channels(&c, 2, 3), b);
        let padded = pad_channels(&b, 2, 5);
        assert_eq!(narrow_channels(&padded, 2, 3), b);
        assert_eq!(narrow_channels(&padded, 0, 2).sum(), 0.0);
    }
}
