//! Forward and backward kernels for the fixed set of differentiable ops the
//! network needs.
//!
//! Forward functions are pure. Each `*_backward` takes the gradient of the
//! op's output (`upstream`) and accumulates into the gradient buffers of
//! whichever inputs have one; inputs without a buffer are skipped entirely.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_upstream(upstream: &[f64], len: usize, what: &str) -> Result<()> {
    if upstream.len() != len {
        return Err(Error::dim(format!(
            "{what}: upstream gradient has {} values, expected {len}",
            upstream.len()
        )));
    }
    Ok(())
}

/// `a[r×c] · b[c×d]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let (c2, d) = (b.shape()[0], b.shape()[1]);
    if c != c2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; r * d];
    for i in 0..r {
        let row = &mut out[i * d..(i + 1) * d];
        for p in 0..c {
            let av = ad[i * c + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&bd[p * d..(p + 1) * d]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![r, d], out)
}

pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, upstream: &[f64]) -> Result<()> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let d = b.shape()[1];
    if b.shape()[0] != c {
        return Err(Error::dim("matmul inner dimensions disagree"));
    }
    expect_upstream(upstream, r * d, "matmul")?;
    if a.requires_grad() {
        // dA = G · Bᵀ
        let bd = b.data().to_vec();
        let ga = a.grad_mut().unwrap();
        for i in 0..r {
            for p in 0..c {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += upstream[i * d + j] * bd[p * d + j];
                }
                ga[i * c + p] += acc;
            }
        }
    }
    if b.requires_grad() {
        // dB = Aᵀ · G
        let ad = a.data().to_vec();
        let gb = b.grad_mut().unwrap();
        for i in 0..r {
            for p in 0..c {
                let av = ad[i * c + p];
                for j in 0..d {
                    gb[p * d + j] += av * upstream[i * d + j];
                }
            }
        }
    }
    Ok(())
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "add: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add_backward(a: &mut Tensor, b: &mut Tensor, upstream: &[f64]) -> Result<()> {
    expect_upstream(upstream, a.len(), "add")?;
    a.accumulate_grad(upstream);
    b.accumulate_grad(upstream);
    Ok(())
}

/// Output spatial size of a convolution, or a dimension error when it would
/// be nonpositive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    s: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        expect_rank(x, 3, "conv2d input")?;
        expect_rank(kernels, 4, "conv2d kernels")?;
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ks = kernels.shape();
        if ks[1] != c_in {
            return Err(Error::dim(format!(
                "conv2d: kernels expect {} input channels, input has {c_in}",
                ks[1]
            )));
        }
        if ks[2] != ks[3] {
            return Err(Error::dim("conv2d: kernels must be square"));
        }
        let s = ks[2];
        let oh = conv_output_size(h, s, stride, pad)?;
        let ow = conv_output_size(w, s, stride, pad)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out: ks[0],
            s,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        axis_range(self.ow, self.w, kx, self.stride, self.pad)
    }

    fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        axis_range(self.oh, self.h, ky, self.stride, self.pad)
    }
}

fn axis_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    // need 0 <= o*stride + k - pad < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// 2-D cross-correlation (no kernel flip) of `x[c_in×h×w]` with
/// `kernels[c_out×c_in×s×s]`, zero padding on every side.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, kernels, stride, pad)?;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.s {
                let rows = g.valid_rows(ky);
                for kx in 0..g.s {
                    let wv = kd[((co * g.c_in + ci) * g.s + ky) * g.s + kx];
                    let cols = g.valid_cols(kx);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in cols.clone() {
                            orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

pub fn conv2d_backward(
    x: &mut Tensor,
    kernels: &mut Tensor,
    stride: usize,
    pad: usize,
    upstream: &[f64],
) -> Result<()> {
    let g = ConvGeom::new(x, kernels, stride, pad)?;
    expect_upstream(upstream, g.c_out * g.oh * g.ow, "conv2d")?;
    if kernels.requires_grad() {
        let xd = x.data();
        let gk = kernels.grad_mut().unwrap();
        for co in 0..g.c_out {
            let up = &upstream[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.s {
                    let rows = g.valid_rows(ky);
                    for kx in 0..g.s {
                        let cols = g.valid_cols(kx);
                        let mut acc = 0.0;
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                            let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                            for ox in cols.clone() {
                                acc += urow[ox] * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                        gk[((co * g.c_in + ci) * g.s + ky) * g.s + kx] += acc;
                    }
                }
            }
        }
    }
    if x.requires_grad() {
        let kd = kernels.data();
        let gx = x.grad_mut().unwrap();
        for co in 0..g.c_out {
            let up = &upstream[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let gin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.s {
                    let rows = g.valid_rows(ky);
                    for kx in 0..g.s {
                        let wv = kd[((co * g.c_in + ci) * g.s + ky) * g.s + kx];
                        let cols = g.valid_cols(kx);
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &mut gin[iy * g.w..(iy + 1) * g.w];
                            let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                            for ox in cols.clone() {
                                grow[ox * g.stride + kx - g.pad] += wv * urow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adds `bias[c]` to every spatial cell of channel `c`, in place.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    expect_rank(x, 3, "channel bias input")?;
    let c = x.shape()[0];
    if bias.shape() != [c] {
        return Err(Error::dim(format!(
            "channel bias of shape {:?} does not match {c} channels",
            bias.shape()
        )));
    }
    let plane = x.shape()[1] * x.shape()[2];
    let bd = bias.data().to_vec();
    for (ch, b) in x.data_mut().chunks_mut(plane).zip(bd) {
        ch.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias only; the input
/// gradient equals `upstream` unchanged.
pub fn add_channel_bias_backward(bias: &mut Tensor, upstream: &[f64]) -> Result<()> {
    let c = bias.len();
    if c == 0 || !upstream.len().is_multiple_of(c) {
        return Err(Error::dim("channel bias: upstream does not tile channels"));
    }
    let plane = upstream.len() / c;
    if let Some(gb) = bias.grad_mut() {
        for (g, ch) in gb.iter_mut().zip(upstream.chunks(plane)) {
            *g += ch.iter().sum::<f64>();
        }
    }
    Ok(())
}

/// Per-channel spatial mean of `a[c×h×w]`.
pub fn global_avg_pool(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 3, "global_avg_pool")?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::dim("global_avg_pool needs nonempty spatial dims"));
    }
    let n = (h * w) as f64;
    let data = a
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f64>() / n)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(a: &mut Tensor, upstream: &[f64]) -> Result<()> {
    expect_rank(a, 3, "global_avg_pool")?;
    let c = a.shape()[0];
    let plane = a.shape()[1] * a.shape()[2];
    expect_upstream(upstream, c, "global_avg_pool")?;
    if let Some(g) = a.grad_mut() {
        let scale = 1.0 / plane as f64;
        for (ch, u) in g.chunks_mut(plane).zip(upstream) {
            ch.iter_mut().for_each(|v| *v += u * scale);
        }
    }
    Ok(())
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.tanh()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Uses the forward output `y`: d tanh = 1 − y².
pub fn tanh_backward(x: &mut Tensor, y: &Tensor, upstream: &[f64]) -> Result<()> {
    expect_upstream(upstream, x.len(), "tanh")?;
    if let Some(g) = x.grad_mut() {
        for ((g, y), u) in g.iter_mut().zip(y.data()).zip(upstream) {
            *g += u * (1.0 - y * y);
        }
    }
    Ok(())
}

pub fn relu_act(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn relu_backward(x: &mut Tensor, upstream: &[f64]) -> Result<()> {
    expect_upstream(upstream, x.len(), "relu")?;
    let xd = x.data().to_vec();
    if let Some(g) = x.grad_mut() {
        for ((g, v), u) in g.iter_mut().zip(xd).zip(upstream) {
            if v > 0.0 {
                *g += u;
            }
        }
    }
    Ok(())
}

/// 2×2 max pooling with stride 2 over `x[c×h×w]`; trailing odd rows and
/// columns are dropped.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (out, _) = maxpool2_with_argmax(x)?;
    Ok(out)
}

fn maxpool2_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(x, 3, "maxpool2")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h < 2 || w < 2 {
        return Err(Error::dim("maxpool2 needs spatial dims of at least 2"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if best == usize::MAX || xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

/// Routes each window's gradient to its first maximal element (row-major).
pub fn maxpool2_backward(x: &mut Tensor, upstream: &[f64]) -> Result<()> {
    let (_, arg) = maxpool2_with_argmax(x)?;
    expect_upstream(upstream, arg.len(), "maxpool2")?;
    if let Some(g) = x.grad_mut() {
        for (&i, u) in arg.iter().zip(upstream) {
            g[i] += u;
        }
    }
    Ok(())
}

/// Align-corners source coordinate and interpolation weight along one axis.
fn bilinear_taps(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear interpolation of `a[h′×w′]` to `h×w`.
pub fn bilinear_resize(a: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    expect_rank(a, 2, "bilinear_resize")?;
    let (sh, sw) = (a.shape()[0], a.shape()[1]);
    if sh == 0 || sw == 0 {
        return Err(Error::dim("bilinear_resize: empty source"));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_resize: target dims must be at least 1"));
    }
    let (ty, tx) = (bilinear_taps(h, sh), bilinear_taps(w, sw));
    let ad = a.data();
    let mut out = Vec::with_capacity(h * w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            // lerp form keeps constant regions exactly constant
            let (a00, a01) = (ad[y0 * sw + x0], ad[y0 * sw + x1]);
            let (a10, a11) = (ad[y1 * sw + x0], ad[y1 * sw + x1]);
            let top = a00 + (a01 - a00) * fx;
            let bot = a10 + (a11 - a10) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn bilinear_resize_backward(a: &mut Tensor, h: usize, w: usize, upstream: &[f64]) -> Result<()> {
    expect_rank(a, 2, "bilinear_resize")?;
    expect_upstream(upstream, h * w, "bilinear_resize")?;
    let (sh, sw) = (a.shape()[0], a.shape()[1]);
    let (ty, tx) = (bilinear_taps(h, sh), bilinear_taps(w, sw));
    if let Some(g) = a.grad_mut() {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let u = upstream[y * w + x];
                g[y0 * sw + x0] += u * (1.0 - fy) * (1.0 - fx);
                g[y0 * sw + x1] += u * (1.0 - fy) * fx;
                g[y1 * sw + x0] += u * fy * (1.0 - fx);
                g[y1 * sw + x1] += u * fy * fx;
            }
        }
    }
    Ok(())
}
