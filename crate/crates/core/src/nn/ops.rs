//! Forward and backward kernels. The tape in `graph` wires these together;
//! each function here is a pure function of its tensor arguments.

use super::tensor::{Real, Tensor};
use super::NnError;

/// Elements of the im2col buffer processed per GEMM call.
const IM2COL_CHUNK: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// `floor((n + 2·pad − k) / stride) + 1`, or `None` if the window does not
/// fit.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self, NnError> {
        let [batch, in_channels, height, width] = x.nchw()?;
        let [out_channels, w_in, kh, kw] = weight.nchw()?;
        if w_in != in_channels || kh != kw {
            return Err(NnError::ShapeMismatch(format!(
                "conv weight {:?} incompatible with input {:?}",
                weight.dims(),
                x.dims()
            )));
        }
        let oh = conv_output_len(height, kh, stride, pad);
        let ow = conv_output_len(width, kw, stride, pad);
        match (oh, ow) {
            (Some(out_height), Some(out_width)) => Ok(ConvGeometry {
                batch,
                in_channels,
                height,
                width,
                out_channels,
                kernel: kh,
                stride,
                pad,
                out_height,
                out_width,
            }),
            _ => Err(NnError::ShapeMismatch(format!(
                "kernel {kh} (stride {stride}, pad {pad}) does not fit input {height}×{width}"
            ))),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn chunk(&self) -> usize {
        (IM2COL_CHUNK / (self.patch_len() * self.positions()).max(1)).clamp(1, self.batch)
    }

    fn input_coord(&self, out: usize, k: usize) -> isize {
        (out * self.stride + k) as isize - self.pad as isize
    }
}

/// Unfold samples `[s0, s0 + n)` into `cols: [C·K·K × n·P]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, s0: usize, n: usize, cols: &mut [T]) {
    let (p, np, plane) = (g.positions(), n * g.positions(), g.height * g.width);
    for ci in 0..g.in_channels {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (ci * g.kernel + kh) * g.kernel + kw;
                let dst = &mut cols[row * np..(row + 1) * np];
                for s in 0..n {
                    let src = &x[((s0 + s) * g.in_channels + ci) * plane..][..plane];
                    for oy in 0..g.out_height {
                        let d = &mut dst[s * p + oy * g.out_width..][..g.out_width];
                        let iy = g.input_coord(oy, kh);
                        if iy < 0 || iy >= g.height as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = g.input_coord(ox, kw);
                            *v = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold `cols` back, accumulating into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, s0: usize, n: usize, dx: &mut [T]) {
    let (p, np, plane) = (g.positions(), n * g.positions(), g.height * g.width);
    for ci in 0..g.in_channels {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (ci * g.kernel + kh) * g.kernel + kw;
                let src = &cols[row * np..(row + 1) * np];
                for s in 0..n {
                    let dst = &mut dx[((s0 + s) * g.in_channels + ci) * plane..][..plane];
                    for oy in 0..g.out_height {
                        let iy = g.input_coord(oy, kh);
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let srow = &src[s * p + oy * g.out_width..][..g.out_width];
                        let drow = &mut dst[iy as usize * g.width..][..g.width];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = g.input_coord(ox, kw);
                            if ix >= 0 && ix < g.width as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, C, H, W]` with `weight: [C', C, K, K]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    let g = ConvGeometry::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.dims() != [g.out_channels] {
            return Err(NnError::ShapeMismatch(format!(
                "conv bias {:?} for {} output channels",
                b.dims(),
                g.out_channels
            )));
        }
    }
    let (p, ckk) = (g.positions(), g.patch_len());
    let mut y = Tensor::zeros(&[g.batch, g.out_channels, g.out_height, g.out_width]);
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); ckk * chunk * p];
    let mut tmp = vec![T::zero(); g.out_channels * chunk * p];
    let yd = y.data_mut();
    let mut s0 = 0;
    while s0 < g.batch {
        let n = chunk.min(g.batch - s0);
        let np = n * p;
        im2col(x.data(), &g, s0, n, &mut cols[..ckk * np]);
        T::gemm(
            g.out_channels,
            ckk,
            np,
            weight.data(),
            false,
            &cols[..ckk * np],
            false,
            T::zero(),
            &mut tmp[..g.out_channels * np],
        );
        for s in 0..n {
            for co in 0..g.out_channels {
                let b = bias.map_or(T::zero(), |b| b.data()[co]);
                let src = &tmp[co * np + s * p..][..p];
                let dst = &mut yd[((s0 + s) * g.out_channels + co) * p..][..p];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + b);
            }
        }
        s0 += n;
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>, NnError> {
    let g = ConvGeometry::new(x, weight, stride, pad)?;
    let (p, ckk) = (g.positions(), g.patch_len());
    let mut dweight = Tensor::zeros(weight.dims());
    let mut dbias = Tensor::zeros(&[g.out_channels]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); ckk * chunk * p];
    let mut dyc = vec![T::zero(); g.out_channels * chunk * p];
    let dyd = dy.data();
    let mut s0 = 0;
    while s0 < g.batch {
        let n = chunk.min(g.batch - s0);
        let np = n * p;
        for s in 0..n {
            for co in 0..g.out_channels {
                let src = &dyd[((s0 + s) * g.out_channels + co) * p..][..p];
                dyc[co * np + s * p..][..p].copy_from_slice(src);
                dbias.data_mut()[co] += src.iter().copied().sum();
            }
        }
        im2col(x.data(), &g, s0, n, &mut cols[..ckk * np]);
        T::gemm(
            g.out_channels,
            np,
            ckk,
            &dyc[..g.out_channels * np],
            false,
            &cols[..ckk * np],
            true,
            T::one(),
            dweight.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                ckk,
                g.out_channels,
                np,
                weight.data(),
                true,
                &dyc[..g.out_channels * np],
                false,
                T::zero(),
                &mut cols[..ckk * np],
            );
            col2im(&cols[..ckk * np], &g, s0, n, dx.data_mut());
        }
        s0 += n;
    }
    Ok(ConvGrads {
        dx,
        dweight,
        dbias,
    })
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub x_hat: Tensor<T>,
}

fn check_affine<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4], NnError> {
    let d = x.nchw()?;
    if gamma.dims() != [d[1]] || beta.dims() != [d[1]] {
        return Err(NnError::ShapeMismatch(format!(
            "batch norm over {} channels given gamma {:?}, beta {:?}",
            d[1],
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok(d)
}

pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>), NnError> {
    let [b, c, h, w] = check_affine(x, gamma, beta)?;
    let plane = h * w;
    let count = T::from_usize(b * plane).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = T::zero();
        for s in 0..b {
            sum += xd[(s * c + ch) * plane..][..plane].iter().copied().sum();
        }
        let m = sum / count;
        let mut sq = T::zero();
        for s in 0..b {
            sq += xd[(s * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    {
        let (xh, yd) = (x_hat.data_mut(), y.data_mut());
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for i in off..off + plane {
                    let v = (xd[i] - mean[ch]) * inv_std[ch];
                    xh[i] = v;
                    yd[i] = g * v + bt;
                }
            }
        }
    }
    Ok((
        y,
        BatchStats {
            mean,
            var,
            inv_std,
            x_hat,
        },
    ))
}

pub fn batchnorm_train_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = dy.nchw().expect("checked in forward");
    let plane = h * w;
    let n = T::from_usize(b * plane).unwrap();
    let (dyd, xh) = (dy.data(), stats.x_hat.data());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for s in 0..b {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                sg += dyd[i] * xh[i];
                sb += dyd[i];
            }
        }
        dgamma.data_mut()[ch] = sg;
        dbeta.data_mut()[ch] = sb;
    }
    let mut dx = Tensor::zeros(dy.dims());
    let dxd = dx.data_mut();
    for ch in 0..c {
        // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
        let k = gamma.data()[ch] * stats.inv_std[ch] / n;
        let (sg, sb) = (dgamma.data()[ch], dbeta.data()[ch]);
        for s in 0..b {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                dxd[i] = k * (n * dyd[i] - sb - xh[i] * sg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode batch norm: a fixed per-channel affine map.
pub fn batchnorm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Vec<T>), NnError> {
    let [b, c, h, w] = check_affine(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(NnError::ShapeMismatch("running statistics length".into()));
    }
    let plane = h * w;
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.dims());
    let (xd, yd) = (x.data(), y.data_mut());
    for s in 0..b {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - running_mean[ch] * scale;
            for i in off..off + plane {
                yd[i] = xd[i] * scale + shift;
            }
        }
    }
    Ok((y, inv_std))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let [b, c, h, w] = x.nchw()?;
    if pad * 2 > kernel {
        return Err(NnError::ShapeMismatch(format!(
            "max-pool padding {pad} exceeds half the kernel {kernel}"
        )));
    }
    let (oh, ow) = match (
        conv_output_len(h, kernel, stride, pad),
        conv_output_len(w, kernel, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "pool {kernel}/{stride} pad {pad} does not fit {h}×{w}"
            )))
        }
    };
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (bc * oh + oy) * ow + ox;
                yd[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok((y, argmax))
}

pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [b, c, h, w] = x.nchw()?;
    let plane = h * w;
    let inv = T::one() / T::from_usize(plane).unwrap();
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

/// `y = x·Wᵀ + b` with `x: [B, in]`, `W: [out, in]`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (batch, inp, out) = linear_dims(x, w, b)?;
    let mut y = Tensor::zeros(&[batch, out]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(b.data());
    }
    T::gemm(batch, inp, out, x.data(), false, w.data(), true, T::one(), y.data_mut());
    Ok(y)
}

pub(crate) fn linear_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize), NnError> {
    match (x.dims(), w.dims(), b.dims()) {
        (&[batch, inp], &[out, w_in], &[b_out]) if w_in == inp && b_out == out => Ok((batch, inp, out)),
        _ => Err(NnError::ShapeMismatch(format!(
            "linear: x {:?}, weight {:?}, bias {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        ))),
    }
}

/// Row-wise softmax of a `[B, n]` tensor, max-subtracted.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let n = match x.dims() {
        &[_, n] => n,
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "softmax expects [B, n], got {other:?}"
            )))
        }
    };
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(y)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, and the
/// softmax probabilities.
pub fn cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), NnError> {
    let (batch, n) = match logits.dims() {
        &[b, n] => (b, n),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "cross entropy expects [B, n] logits, got {other:?}"
            )))
        }
    };
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(NnError::BadLabel(bad));
    }
    let probs = softmax_rows(logits)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        // −log softmax = logsumexp − x_label, both relative to the row max
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - (row[label] - max);
    }
    Ok((total / T::from_usize(batch).unwrap(), probs))
}
