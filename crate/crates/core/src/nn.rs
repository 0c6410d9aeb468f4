//! Forward and backward kernels on plain tensors.
//!
//! The tape records these; they are also usable directly when no gradient is
//! needed. Feature maps are laid out `[H, W, C]` (channels innermost).

use crate::{Error, Real, Result, Tensor};

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm(a, &bt, c, m, n, k);
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![T::zero(); m * k];
    gemm_nt(grad.data(), b.data(), &mut da, m, n, k);
    let mut db = vec![T::zero(); k * n];
    gemm_tn(a.data(), grad.data(), &mut db, m, k, n);
    (
        Tensor::new(&[m, k], da).expect("matmul grad a"),
        Tensor::new(&[k, n], db).expect("matmul grad b"),
    )
}

fn hwc(x: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, op)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Full convolution with zero "same" padding, `w: [k, k, Cin, Cout]`.
/// Returns the output and the im2col buffer used by the backward pass.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    const OP: &str = "conv2d";
    let (h, wd, cin) = hwc(x, OP)?;
    w.expect_rank(4, OP)?;
    let (k, k2, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if k != k2 || wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::EvenKernel { op: OP, size: k });
    }
    if b.shape() != [cout] {
        return Err(Error::shape(OP, format!("bias {:?} for {cout} filters", b.shape())));
    }
    if stride == 0 {
        return Err(Error::shape(OP, "stride must be positive"));
    }
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let patch = k * k * cin;
    let cols = im2col(x.data(), h, wd, cin, k, stride, ho, wo);
    let mut y = Vec::with_capacity(ho * wo * cout);
    for _ in 0..ho * wo {
        y.extend_from_slice(b.data());
    }
    gemm(&cols, w.data(), &mut y, ho * wo, patch, cout);
    Ok((Tensor::new(&[ho, wo, cout], y)?, cols))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let pad = k / 2;
    let patch = k * k * c;
    let mut cols = vec![T::zero(); ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

pub(crate) struct Conv2dGrads<T: Real> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x_shape: &[usize],
    w: &Tensor<T>,
    cols: &[T],
    stride: usize,
    grad: &Tensor<T>,
) -> Conv2dGrads<T> {
    let (h, wd, cin) = (x_shape[0], x_shape[1], x_shape[2]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let (ho, wo) = (grad.shape()[0], grad.shape()[1]);
    let patch = k * k * cin;
    let positions = ho * wo;

    let mut dw = vec![T::zero(); patch * cout];
    gemm_tn(cols, grad.data(), &mut dw, positions, patch, cout);

    let mut db = vec![T::zero(); cout];
    for row in grad.data().chunks_exact(cout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }

    let mut dcols = vec![T::zero(); positions * patch];
    gemm_nt(grad.data(), w.data(), &mut dcols, positions, cout, patch);
    let pad = k / 2;
    let mut dx = vec![T::zero(); h * wd * cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let dst = (iy as usize * wd + ix as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for (d, &g) in dx[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                        *d += g;
                    }
                }
            }
        }
    }
    Conv2dGrads {
        x: Tensor::new(x_shape, dx).expect("conv dx"),
        w: Tensor::new(w.shape(), dw).expect("conv dw"),
        b: Tensor::new(&[cout], db).expect("conv db"),
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    conv2d_forward(x, w, b, stride).map(|(y, _)| y)
}

/// Depthwise `k×k` convolution per channel, then a `1×1` pointwise mix and
/// bias. Stride 1 with zero "same" padding.
pub fn separable_conv2d<T: Real>(
    x: &Tensor<T>,
    depthwise: &Tensor<T>,
    pointwise: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    separable_conv2d_forward(x, depthwise, pointwise, bias).map(|(y, _)| y)
}

/// Returns the output and the depthwise intermediate.
pub(crate) fn separable_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    depthwise: &Tensor<T>,
    pointwise: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "separable_conv2d";
    let (h, w, cin) = hwc(x, OP)?;
    depthwise.expect_rank(3, OP)?;
    pointwise.expect_rank(2, OP)?;
    let k = depthwise.shape()[0];
    if depthwise.shape()[1] != k || depthwise.shape()[2] != cin {
        return Err(Error::shape(
            OP,
            format!("input {:?}, depthwise {:?}", x.shape(), depthwise.shape()),
        ));
    }
    if k.is_multiple_of(2) {
        return Err(Error::EvenKernel { op: OP, size: k });
    }
    if pointwise.shape()[0] != cin {
        return Err(Error::shape(
            OP,
            format!("pointwise {:?} for {cin} channels", pointwise.shape()),
        ));
    }
    let cout = pointwise.shape()[1];
    if bias.shape() != [cout] {
        return Err(Error::shape(OP, format!("bias {:?} for {cout} filters", bias.shape())));
    }

    let pad = k / 2;
    let xd = x.data();
    let kd = depthwise.data();
    let mut dw_out = vec![T::zero(); h * w * cin];
    for y in 0..h {
        for xx in 0..w {
            let out = &mut dw_out[(y * w + xx) * cin..(y * w + xx + 1) * cin];
            for ky in 0..k {
                let iy = (y + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (xx + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                    let ker = &kd[(ky * k + kx) * cin..][..cin];
                    for ((o, &s), &kv) in out.iter_mut().zip(src).zip(ker) {
                        *o += s * kv;
                    }
                }
            }
        }
    }

    let mut y = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        y.extend_from_slice(bias.data());
    }
    gemm(&dw_out, pointwise.data(), &mut y, h * w, cin, cout);
    Ok((Tensor::new(&[h, w, cout], y)?, Tensor::new(&[h, w, cin], dw_out)?))
}

pub(crate) struct SeparableGrads<T: Real> {
    pub x: Tensor<T>,
    pub depthwise: Tensor<T>,
    pub pointwise: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn separable_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    depthwise: &Tensor<T>,
    pointwise: &Tensor<T>,
    dw_out: &Tensor<T>,
    grad: &Tensor<T>,
) -> SeparableGrads<T> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = pointwise.shape()[1];
    let k = depthwise.shape()[0];
    let pad = k / 2;
    let n = h * w;

    let mut d_pw = vec![T::zero(); cin * cout];
    gemm_tn(dw_out.data(), grad.data(), &mut d_pw, n, cin, cout);
    let mut d_bias = vec![T::zero(); cout];
    for row in grad.data().chunks_exact(cout) {
        for (d, &g) in d_bias.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut d_mid = vec![T::zero(); n * cin];
    gemm_nt(grad.data(), pointwise.data(), &mut d_mid, n, cout, cin);

    let xd = x.data();
    let kd = depthwise.data();
    let mut d_ker = vec![T::zero(); k * k * cin];
    let mut dx = vec![T::zero(); n * cin];
    for y in 0..h {
        for xx in 0..w {
            let g = &d_mid[(y * w + xx) * cin..][..cin];
            for ky in 0..k {
                let iy = (y + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (xx + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let off = (iy as usize * w + ix as usize) * cin;
                    let tap = (ky * k + kx) * cin;
                    for c in 0..cin {
                        d_ker[tap + c] += xd[off + c] * g[c];
                        dx[off + c] += kd[tap + c] * g[c];
                    }
                }
            }
        }
    }
    SeparableGrads {
        x: Tensor::new(x.shape(), dx).expect("sepconv dx"),
        depthwise: Tensor::new(depthwise.shape(), d_ker).expect("sepconv dk"),
        pointwise: Tensor::new(pointwise.shape(), d_pw).expect("sepconv dpw"),
        bias: Tensor::new(&[cout], d_bias).expect("sepconv db"),
    }
}

/// Weights of one LSTM layer. Gate blocks are ordered input, forget,
/// cell candidate, output along the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights<T: Real = f32> {
    /// `[D, 4u]`
    pub input: Tensor<T>,
    /// `[u, 4u]`
    pub recurrent: Tensor<T>,
    /// `[4u]`
    pub bias: Tensor<T>,
}

impl<T: Real> LstmWeights<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input: Tensor::zeros(&[input_dim, 4 * hidden]),
            recurrent: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }
}

/// Per-timestep activations kept for backpropagation through time.
#[derive(Clone, Debug)]
pub(crate) struct LstmCache<T: Real> {
    /// `[T, 4u]`, post-activation gates.
    gates: Vec<T>,
    /// `[T, u]`
    cells: Vec<T>,
    hidden: usize,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn check_lstm<T: Real>(seq: &Tensor<T>, wts: &LstmWeights<T>) -> Result<(usize, usize, usize)> {
    const OP: &str = "lstm";
    seq.expect_rank(2, OP)?;
    let (t, d) = (seq.shape()[0], seq.shape()[1]);
    wts.input.expect_rank(2, OP)?;
    let u4 = wts.input.shape()[1];
    if wts.input.shape()[0] != d || !u4.is_multiple_of(4) {
        return Err(Error::shape(
            OP,
            format!("sequence {:?}, input weights {:?}", seq.shape(), wts.input.shape()),
        ));
    }
    let u = u4 / 4;
    if wts.recurrent.shape() != [u, u4] || wts.bias.shape() != [u4] {
        return Err(Error::shape(
            OP,
            format!(
                "recurrent {:?} / bias {:?} for hidden size {u}",
                wts.recurrent.shape(),
                wts.bias.shape()
            ),
        ));
    }
    Ok((t, d, u))
}

pub fn lstm_forward<T: Real>(seq: &Tensor<T>, weights: &LstmWeights<T>) -> Result<Tensor<T>> {
    lstm_forward_cached(seq, weights).map(|(h, _)| h)
}

pub(crate) fn lstm_forward_cached<T: Real>(seq: &Tensor<T>, wts: &LstmWeights<T>) -> Result<(Tensor<T>, LstmCache<T>)> {
    let (steps, d, u) = check_lstm(seq, wts)?;
    let u4 = 4 * u;
    let mut gates = vec![T::zero(); steps * u4];
    let mut cells = vec![T::zero(); steps * u];
    let mut hs = vec![T::zero(); steps * u];
    let mut h_prev = vec![T::zero(); u];
    let mut c_prev = vec![T::zero(); u];
    for t in 0..steps {
        let z = &mut gates[t * u4..(t + 1) * u4];
        z.copy_from_slice(wts.bias.data());
        gemm(&seq.data()[t * d..(t + 1) * d], wts.input.data(), z, 1, d, u4);
        gemm(&h_prev, wts.recurrent.data(), z, 1, u, u4);
        for j in 0..u {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[u + j]);
            let g = z[2 * u + j].tanh();
            let o = sigmoid(z[3 * u + j]);
            z[j] = i;
            z[u + j] = f;
            z[2 * u + j] = g;
            z[3 * u + j] = o;
            let c = f * c_prev[j] + i * g;
            cells[t * u + j] = c;
            hs[t * u + j] = o * c.tanh();
        }
        h_prev.copy_from_slice(&hs[t * u..(t + 1) * u]);
        c_prev.copy_from_slice(&cells[t * u..(t + 1) * u]);
    }
    Ok((
        Tensor::new(&[steps, u], hs)?,
        LstmCache {
            gates,
            cells,
            hidden: u,
        },
    ))
}

pub(crate) struct LstmGrads<T: Real> {
    pub seq: Tensor<T>,
    pub weights: LstmWeights<T>,
}

/// Backpropagation through time over the whole sequence.
pub(crate) fn lstm_backward<T: Real>(
    seq: &Tensor<T>,
    wts: &LstmWeights<T>,
    hs: &Tensor<T>,
    cache: &LstmCache<T>,
    grad: &Tensor<T>,
) -> LstmGrads<T> {
    let (steps, d) = (seq.shape()[0], seq.shape()[1]);
    let u = cache.hidden;
    let u4 = 4 * u;
    let mut d_seq = vec![T::zero(); steps * d];
    let mut d_wi = vec![T::zero(); d * u4];
    let mut d_wh = vec![T::zero(); u * u4];
    let mut d_b = vec![T::zero(); u4];
    let mut dh_next = vec![T::zero(); u];
    let mut dc_next = vec![T::zero(); u];
    let mut dz = vec![T::zero(); u4];
    let zeros = vec![T::zero(); u];
    let one = T::one();

    for t in (0..steps).rev() {
        let g = &cache.gates[t * u4..(t + 1) * u4];
        let c = &cache.cells[t * u..(t + 1) * u];
        let c_prev = if t > 0 {
            &cache.cells[(t - 1) * u..t * u]
        } else {
            &zeros[..]
        };
        let h_prev = if t > 0 {
            &hs.data()[(t - 1) * u..t * u]
        } else {
            &zeros[..]
        };
        for j in 0..u {
            let (i, f, gg, o) = (g[j], g[u + j], g[2 * u + j], g[3 * u + j]);
            let tc = c[j].tanh();
            let dh = grad.data()[t * u + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o * (one - tc * tc) + dc_next[j];
            dz[j] = dc * gg * i * (one - i);
            dz[u + j] = dc * c_prev[j] * f * (one - f);
            dz[2 * u + j] = dc * i * (one - gg * gg);
            dz[3 * u + j] = d_o * o * (one - o);
            dc_next[j] = dc * f;
        }
        gemm_tn(&seq.data()[t * d..(t + 1) * d], &dz, &mut d_wi, 1, d, u4);
        gemm_tn(h_prev, &dz, &mut d_wh, 1, u, u4);
        for (b, &z) in d_b.iter_mut().zip(&dz) {
            *b += z;
        }
        gemm_nt(&dz, wts.input.data(), &mut d_seq[t * d..(t + 1) * d], 1, u4, d);
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        gemm_nt(&dz, wts.recurrent.data(), &mut dh_next, 1, u4, u);
    }
    LstmGrads {
        seq: Tensor::new(seq.shape(), d_seq).expect("lstm dseq"),
        weights: LstmWeights {
            input: Tensor::new(wts.input.shape(), d_wi).expect("lstm dwi"),
            recurrent: Tensor::new(wts.recurrent.shape(), d_wh).expect("lstm dwh"),
            bias: Tensor::new(wts.bias.shape(), d_b).expect("lstm db"),
        },
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid_map<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Softmax along the last axis with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("rank >= 1");
    let mut out = grad.clone();
    for (row, yr) in out.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
        let dot: T = row.iter().zip(yr).map(|(&g, &p)| g * p).sum();
        for (g, &p) in row.iter_mut().zip(yr) {
            *g = p * (*g - dot);
        }
    }
    out
}

pub const NORM_EPSILON: f64 = 1e-5;

/// Output and cached statistics of [`layer_norm_forward`].
#[derive(Clone, Debug)]
pub struct NormCache<T: Real> {
    pub xhat: Tensor<T>,
    pub inv_std: T,
}

/// Normalizes `x: [.., C]` to zero mean and unit variance over all of its
/// elements, then applies a per-channel scale `gamma: [C]` and shift
/// `beta: [C]`.
pub fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mean = x.mean();
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of_usize(x.len());
    let inv_std = T::one() / (var + T::of(NORM_EPSILON)).sqrt();
    let xhat = x.map(|v| (v - mean) * inv_std);
    let mut y = xhat.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for ((v, &g), &b) in px.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Gradients `(dx, dgamma, dbeta)` of [`layer_norm_forward`].
pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let n = T::of_usize(g.len());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = g.clone();
    for ((gp, xp), dp) in g
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .zip(dxhat.data_mut().chunks_exact_mut(c))
    {
        for k in 0..c {
            dgamma[k] += gp[k] * xp[k];
            dbeta[k] += gp[k];
            dp[k] = gp[k] * gamma.data()[k];
        }
    }
    let mean_d = dxhat.sum() / n;
    let mean_dx: T = dxhat
        .data()
        .iter()
        .zip(cache.xhat.data())
        .map(|(&d, &x)| d * x)
        .sum::<T>()
        / n;
    let dx = dxhat
        .zip_map(&cache.xhat, |d, x| cache.inv_std * (d - mean_d - x * mean_dx))
        .expect("same shape");
    (
        dx,
        Tensor::new(&[c], dgamma).expect("gamma shape"),
        Tensor::new(&[c], dbeta).expect("beta shape"),
    )
}

/// Per-channel spatial mean of `[H, W, C]`.
pub fn global_average_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x, "global_average_pool")?;
    let mut out = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = T::one() / T::of_usize(h * w);
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[c], out)
}

fn check_labels<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    const OP: &str = "cross_entropy_loss";
    logits.expect_rank(2, OP)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(OP, format!("{b} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::OutOfRange {
            op: OP,
            detail: format!("label {bad} with {k} classes"),
        });
    }
    Ok((b, k))
}

/// Mean over rows of `-log softmax(logits)[label]`; also returns the
/// probabilities.
pub(crate) fn cross_entropy_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = check_labels(logits, labels)?;
    let probs = softmax(logits);
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[l];
    }
    Ok((loss / T::of_usize(b), probs))
}

pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_forward(logits, labels).map(|(l, _)| l)
}

pub(crate) fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = grad / T::of_usize(labels.len());
    let mut out = probs.clone();
    for (row, &l) in out.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = matmul(&a, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn separable_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[4, 5, 3], |i| (i as f64 * 0.37).sin());
        let mut dk = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            dk.set(&[1, 1, c], 1.0);
        }
        let pw = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = separable_conv2d(&x, &dk, &pw, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn separable_ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::ones(&[3, 3, 1]);
        let y = separable_conv2d(
            &x,
            &Tensor::ones(&[3, 3, 1]),
            &Tensor::ones(&[1, 1]),
            &Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(y.at(&[1, 1, 0]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 1, 0]), 6.0);
    }

    #[test]
    fn separable_shape_and_errors() {
        let x = Tensor::<f32>::zeros(&[6, 6, 4]);
        let y = separable_conv2d(
            &x,
            &Tensor::zeros(&[3, 3, 4]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(y.shape(), &[6, 6, 1]);
        let even = separable_conv2d(
            &x,
            &Tensor::zeros(&[2, 2, 4]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[1]),
        );
        assert!(matches!(even, Err(Error::EvenKernel { .. })));
        let bad = separable_conv2d(
            &x,
            &Tensor::zeros(&[3, 3, 3]),
            &Tensor::zeros(&[4, 1]),
            &Tensor::zeros(&[1]),
        );
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_conv_shape() {
        let x = Tensor::<f32>::zeros(&[64, 64, 3]);
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 3, 16]), &Tensor::zeros(&[16]), 2).unwrap();
        assert_eq!(y.shape(), &[32, 32, 16]);
    }

    #[test]
    fn lstm_zero_weights_give_zero_states() {
        let seq = Tensor::<f64>::from_fn(&[5, 3], |i| i as f64 - 4.0);
        let h = lstm_forward(&seq, &LstmWeights::zeros(3, 4)).unwrap();
        assert_eq!(h.shape(), &[5, 4]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_mismatched_input() {
        let seq = Tensor::<f64>::zeros(&[5, 3]);
        assert!(lstm_forward(&seq, &LstmWeights::zeros(2, 4)).is_err());
    }

    #[test]
    fn activations() {
        let u = softmax(&Tensor::<f64>::zeros(&[7]));
        assert!(u.data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
        assert_eq!(sigmoid_map(&Tensor::<f64>::zeros(&[1])).item(), 0.5);
        let big = softmax(&t(&[3], &[1000., 0., -1000.]));
        assert!(big.all_finite());
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
    }

    #[test]
    fn gap_cases() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(global_average_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[3, 5, 2], 1.25);
        assert_eq!(global_average_pool(&c).unwrap().data(), &[1.25, 1.25]);
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy_loss(&Tensor::<f64>::zeros(&[1, 7]), &[3]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let mut sat = Tensor::<f64>::zeros(&[1, 7]);
        sat.set(&[0, 2], 1000.0);
        assert!(cross_entropy_loss(&sat, &[2]).unwrap() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&Tensor::<f64>::zeros(&[1, 7]), &[7]),
            Err(Error::OutOfRange { .. })
        ));
        // two rows: [0, ln 3] label 1, [2, 0] label 0
        let logits = t(&[2, 2], &[0.0, 3f64.ln(), 2.0, 0.0]);
        let expect = 0.5 * (-(3.0 / 4.0f64).ln() - (2f64.exp() / (2f64.exp() + 1.0)).ln());
        let got = cross_entropy_loss(&logits, &[1, 0]).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }
}
