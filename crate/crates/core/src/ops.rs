//! Forward and backward kernels on NCHW tensors.
//!
//! These are plain functions over [`Tensor`]s. The [`crate::autograd`] tape
//! records calls to them and invokes the matching `*_backward` kernel.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn expect_ndim<T: Element>(op: &'static str, t: &Tensor<T>, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::ShapeMismatch {
            op,
            left_name: "expected rank",
            left: ndim,
            right_name: "tensor rank",
            right: t.ndim(),
        });
    }
    Ok(())
}

/// Geometry of one (possibly grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        expect_ndim(OP, input, 4)?;
        expect_ndim(OP, weight, 4)?;
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        if groups == 0 {
            return Err(Error::invalid(OP, "groups must be >= 1"));
        }
        let (batch, in_channels, height, width) =
            (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (out_channels, per_group, kh, kw) =
            (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(OP, "kernel extents must be >= 1"));
        }
        if in_channels % groups != 0 {
            return Err(Error::Indivisible {
                op: OP,
                what: "input channels R",
                value: in_channels,
                divisor: groups,
            });
        }
        if out_channels % groups != 0 {
            return Err(Error::Indivisible {
                op: OP,
                what: "output channels O",
                value: out_channels,
                divisor: groups,
            });
        }
        if in_channels / groups != per_group {
            return Err(Error::ShapeMismatch {
                op: OP,
                left_name: "input channels per group",
                left: in_channels / groups,
                right_name: "weight R",
                right: per_group,
            });
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::invalid(
                OP,
                format!(
                    "kernel {kh}x{kw} larger than padded input {height}x{width} (pad {padding})"
                ),
            ));
        }
        let out_h = (height + 2 * padding - kh) / stride + 1;
        let out_w = (width + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the lowered patch matrix for one group.
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// Multiply-adds of one forward pass.
    pub fn mult_adds(&self) -> u64 {
        (self.batch * self.out_channels * self.patch() * self.out_plane()) as u64
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − padding`
/// lies inside the image.
fn valid_range(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let first = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let end = (g.width + g.padding).saturating_sub(kj);
    let last = end.div_ceil(g.stride).min(g.out_w);
    (first.min(last), last)
}

/// Lowers the channels `[c0, c0 + g.cin_g())` of one image into a
/// `patch × out_plane` matrix.
fn im2col<T: Element>(image: &[T], c0: usize, g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.in_plane();
    let opl = g.out_plane();
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj);
                let dst = &mut cols[row * opl..(row + 1) * opl];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[x0..x0 + (hi - lo)]);
                    } else {
                        for (v, &s) in line[lo..hi]
                            .iter_mut()
                            .zip(srow[x0..].iter().step_by(g.stride))
                        {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back onto the image gradient.
fn col2im<T: Element>(cols: &[T], c0: usize, g: &ConvGeometry, image: &mut [T]) {
    let plane = g.in_plane();
    let opl = g.out_plane();
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj);
                let src = &cols[row * opl..(row + 1) * opl];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let x0 = lo * g.stride + kj - g.padding;
                    for (d, &v) in drow[x0..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Groups this narrow are faster without lowering to a patch matrix.
const DIRECT_MAX_COUT: usize = 8;

fn use_direct(g: &ConvGeometry) -> bool {
    g.stride == 1 && !g.pointwise() && g.cout_g() <= DIRECT_MAX_COUT
}

/// Copies each channel into a zero-bordered `(H + 2p) × (W + 2p)` plane.
fn pad_image<T: Element>(image: &[T], g: &ConvGeometry, out: &mut Vec<T>) {
    let (hp, wp, p) = (g.height + 2 * g.padding, g.width + 2 * g.padding, g.padding);
    out.clear();
    out.resize(g.in_channels * hp * wp, T::zero());
    for c in 0..g.in_channels {
        for y in 0..g.height {
            let src = &image[(c * g.height + y) * g.width..][..g.width];
            out[(c * hp + y + p) * wp + p..][..g.width].copy_from_slice(src);
        }
    }
}

/// For stride 1 the output can be computed on the padded-width grid: tap
/// `(ki, kj)` is then a single contiguous axpy of this length.
fn span(g: &ConvGeometry) -> usize {
    (g.out_h - 1) * (g.width + 2 * g.padding) + g.out_w
}

fn direct_forward<T: Element>(
    padded: &[T],
    weight: &[T],
    g: &ConvGeometry,
    wide: &mut Vec<T>,
    out: &mut [T],
) {
    let (wp, hp, opl, cin_g) = (
        g.width + 2 * g.padding,
        g.height + 2 * g.padding,
        g.out_plane(),
        g.cin_g(),
    );
    let taps = g.kh * g.kw;
    let len = span(g);
    wide.clear();
    wide.resize(len, T::zero());
    for o in 0..g.out_channels {
        let c0 = (o / g.cout_g()) * cin_g;
        wide.fill(T::zero());
        for ci in 0..cin_g {
            let src = &padded[(c0 + ci) * hp * wp..(c0 + ci + 1) * hp * wp];
            let w = &weight[(o * cin_g + ci) * taps..][..taps];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[ki * g.kw + kj];
                    for (y, &x) in wide.iter_mut().zip(&src[ki * wp + kj..][..len]) {
                        *y += wv * x;
                    }
                }
            }
        }
        let dst = &mut out[o * opl..(o + 1) * opl];
        for oy in 0..g.out_h {
            dst[oy * g.out_w..(oy + 1) * g.out_w]
                .copy_from_slice(&wide[oy * wp..oy * wp + g.out_w]);
        }
    }
}

/// Dot product with independent lanes so the reduction vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// `dpadded` receives the gradient of the padded image; the caller crops it.
fn direct_backward<T: Element>(
    padded: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    wide: &mut Vec<T>,
    dw: &mut [T],
    mut dpadded: Option<&mut [T]>,
) {
    let (wp, hp, opl, cin_g) = (
        g.width + 2 * g.padding,
        g.height + 2 * g.padding,
        g.out_plane(),
        g.cin_g(),
    );
    let taps = g.kh * g.kw;
    let len = span(g);
    wide.clear();
    wide.resize(len, T::zero());
    for o in 0..g.out_channels {
        let c0 = (o / g.cout_g()) * cin_g;
        let dy = &dout[o * opl..(o + 1) * opl];
        for oy in 0..g.out_h {
            wide[oy * wp..oy * wp + g.out_w].copy_from_slice(&dy[oy * g.out_w..(oy + 1) * g.out_w]);
        }
        for ci in 0..cin_g {
            let c = c0 + ci;
            let src = &padded[c * hp * wp..(c + 1) * hp * wp];
            let base = (o * cin_g + ci) * taps;
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let t = base + ki * g.kw + kj;
                    let off = ki * wp + kj;
                    dw[t] += dot(wide, &src[off..off + len]);
                    if let Some(dp) = dpadded.as_deref_mut() {
                        let wv = weight[t];
                        let dst = &mut dp[c * hp * wp + off..][..len];
                        for (v, &y) in dst.iter_mut().zip(wide.iter()) {
                            *v += wv * y;
                        }
                    }
                }
            }
        }
    }
}

fn crop_image<T: Element>(padded: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (hp, wp, p) = (g.height + 2 * g.padding, g.width + 2 * g.padding, g.padding);
    for c in 0..g.in_channels {
        for y in 0..g.height {
            let src = &padded[(c * hp + y + p) * wp + p..][..g.width];
            out[(c * g.height + y) * g.width..][..g.width].copy_from_slice(src);
        }
    }
}

/// Grouped 2-D convolution, no bias. `weight` is `[O, R/G, kh, kw]`.
pub fn group_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding, groups)?;
    let (k, opl, cout_g) = (g.patch(), g.out_plane(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.out_channels * opl];
    let mut cols = if g.pointwise() || use_direct(&g) {
        Vec::new()
    } else {
        vec![T::zero(); k * opl]
    };
    let (mut padded, mut wide) = (Vec::new(), Vec::new());
    let in_image = g.in_channels * g.in_plane();
    let out_image = g.out_channels * opl;
    for n in 0..g.batch {
        let image = &input.data()[n * in_image..(n + 1) * in_image];
        let out_n = &mut out[n * out_image..(n + 1) * out_image];
        if use_direct(&g) {
            pad_image(image, &g, &mut padded);
            direct_forward(&padded, weight.data(), &g, &mut wide, out_n);
            continue;
        }
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let b: &[T] = if g.pointwise() {
                &image[c0 * opl..]
            } else {
                im2col(image, c0, &g, &mut cols);
                &cols
            };
            T::gemm(
                cout_g,
                k,
                opl,
                &weight.data()[grp * cout_g * k..],
                k as isize,
                1,
                b,
                opl as isize,
                1,
                T::zero(),
                &mut out_n[grp * cout_g * opl..],
                opl as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Standard (single-group) convolution.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    group_conv2d(input, weight, stride, padding, 1)
}

/// Gradients of [`group_conv2d`] with respect to its input (when requested)
/// and its weight.
pub fn group_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let g = ConvGeometry::new(input, weight, stride, padding, groups)?;
    let (k, opl, cout_g) = (g.patch(), g.out_plane(), g.cout_g());
    let in_image = g.in_channels * g.in_plane();
    let out_image = g.out_channels * opl;
    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = if need_input {
        Some(vec![T::zero(); input.len()])
    } else {
        None
    };
    let mut cols = if g.pointwise() || use_direct(&g) {
        Vec::new()
    } else {
        vec![T::zero(); k * opl]
    };
    let mut dcols = if g.pointwise() || !need_input || use_direct(&g) {
        Vec::new()
    } else {
        vec![T::zero(); k * opl]
    };
    let (mut padded, mut dpadded, mut wide) = (Vec::new(), Vec::new(), Vec::new());
    for n in 0..g.batch {
        let image = &input.data()[n * in_image..(n + 1) * in_image];
        let dout_n = &grad_out[n * out_image..(n + 1) * out_image];
        if use_direct(&g) {
            pad_image(image, &g, &mut padded);
            match dx.as_mut() {
                Some(dx) => {
                    dpadded.clear();
                    dpadded.resize(padded.len(), T::zero());
                    direct_backward(
                        &padded,
                        weight.data(),
                        dout_n,
                        &g,
                        &mut wide,
                        &mut dw,
                        Some(&mut dpadded),
                    );
                    crop_image(&dpadded, &g, &mut dx[n * in_image..(n + 1) * in_image]);
                }
                None => {
                    direct_backward(&padded, weight.data(), dout_n, &g, &mut wide, &mut dw, None)
                }
            }
            continue;
        }
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let dout = &dout_n[grp * cout_g * opl..];
            let w = &weight.data()[grp * cout_g * k..];
            let b: &[T] = if g.pointwise() {
                &image[c0 * opl..]
            } else {
                im2col(image, c0, &g, &mut cols);
                &cols
            };
            // dW_g += dOut_g · patchesᵀ
            T::gemm(
                cout_g,
                opl,
                k,
                dout,
                opl as isize,
                1,
                b,
                1,
                opl as isize,
                T::one(),
                &mut dw[grp * cout_g * k..],
                k as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let dx_n = &mut dx[n * in_image..(n + 1) * in_image];
                if g.pointwise() {
                    T::gemm(
                        k,
                        cout_g,
                        opl,
                        w,
                        1,
                        k as isize,
                        dout,
                        opl as isize,
                        1,
                        T::zero(),
                        &mut dx_n[c0 * opl..],
                        opl as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        k,
                        cout_g,
                        opl,
                        w,
                        1,
                        k as isize,
                        dout,
                        opl as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        opl as isize,
                        1,
                    );
                    col2im(&dcols, c0, &g, dx_n);
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

fn bn_dims<T: Element>(input: &Tensor<T>, params: &[&Tensor<T>]) -> Result<(usize, usize, usize)> {
    const OP: &str = "batch_norm";
    if input.ndim() != 4 && input.ndim() != 2 {
        return Err(Error::invalid(
            OP,
            format!("expected rank 2 or 4, got {:?}", input.shape()),
        ));
    }
    let n = input.dim(0);
    let c = input.dim(1);
    let plane = if input.ndim() == 4 {
        input.dim(2) * input.dim(3)
    } else {
        1
    };
    for p in params {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op: OP,
                left_name: "input channels C",
                left: c,
                right_name: "parameter length",
                right: p.len(),
            });
        }
    }
    Ok((n, c, plane))
}

/// Batch normalization with affine transform.
///
/// In training mode statistics come from the batch and are returned so the
/// caller can update its running averages; in eval mode the running statistics
/// are used and `None` is returned.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    train: bool,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, plane) = bn_dims(input, &[gamma, beta, running_mean, running_var])?;
    let x = input.data();
    let eps_t = T::from_f64_lossy(eps);
    let count = n * plane;
    let (mean, var) = if train {
        if count == 0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }
        let inv_count = T::one() / T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    s += v;
                }
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - mean[ch] * scale;
            for (o, &v) in out[base..base + plane]
                .iter_mut()
                .zip(&x[base..base + plane])
            {
                *o = v * scale + shift;
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

/// Gradients of [`batch_norm`] for (input, gamma, beta).
pub fn batch_norm_backward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    grad_out: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = input.dim(0);
    let c = input.dim(1);
    let plane = input.len() / (n * c).max(1);
    let x = input.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (m, is) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (&dy, &v) in grad_out[base..base + plane]
                .iter()
                .zip(&x[base..base + plane])
            {
                sum_dy += dy;
                sum_dy_xhat += dy * (v - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let gs = gamma.data()[ch] * is;
        if train {
            let inv_count = T::one() / T::from_usize(stats.count).unwrap();
            let mean_dy = sum_dy * inv_count;
            let mean_dy_xhat = sum_dy_xhat * inv_count;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xhat = (x[i] - m) * is;
                    dx[i] = gs * (grad_out[i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dx[i] = gs * grad_out[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Element>(output: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect()
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::IncompatibleShapes {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Concatenates rank-2 or rank-4 tensors along axis 1.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid(OP, "no inputs"))?;
    let n = first.dim(0);
    let tail: Vec<usize> = first.shape()[2..].to_vec();
    let plane: usize = tail.iter().product();
    let mut total_c = 0;
    for t in inputs {
        if t.ndim() != first.ndim() || t.dim(0) != n || t.shape()[2..] != tail[..] {
            return Err(Error::IncompatibleShapes {
                op: OP,
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        total_c += t.dim(1);
    }
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let chunk = t.dim(1) * plane;
            out.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut shape = vec![n, total_c];
    shape.extend_from_slice(&tail);
    Tensor::from_vec(&shape, out)
}

/// Splits a channel-concatenated gradient back into per-source pieces.
pub fn concat_channels_backward<T: Element>(
    grad_out: &[T],
    batch: usize,
    channels: &[usize],
    plane: usize,
) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut grads: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(batch * c * plane))
        .collect();
    for b in 0..batch {
        let mut off = b * total * plane;
        for (g, &c) in grads.iter_mut().zip(channels) {
            g.extend_from_slice(&grad_out[off..off + c * plane]);
            off += c * plane;
        }
    }
    grads
}

/// Selects input channels by index (duplicates allowed): `out[:, p] = x[:, index[p]]`.
pub fn index_channels<T: Element>(input: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "index_channels";
    if input.ndim() < 2 {
        return Err(Error::invalid(OP, "rank must be >= 2"));
    }
    let (n, c) = (input.dim(0), input.dim(1));
    let plane: usize = input.shape()[2..].iter().product();
    if let Some(&bad) = index.iter().find(|&&i| i >= c) {
        return Err(Error::ShapeMismatch {
            op: OP,
            left_name: "index",
            left: bad,
            right_name: "channels",
            right: c,
        });
    }
    let mut out = Vec::with_capacity(n * index.len() * plane);
    for b in 0..n {
        let img = &input.data()[b * c * plane..(b + 1) * c * plane];
        for &src in index {
            out.extend_from_slice(&img[src * plane..(src + 1) * plane]);
        }
    }
    let mut shape = input.shape().to_vec();
    shape[1] = index.len();
    Tensor::from_vec(&shape, out)
}

pub fn index_channels_backward<T: Element>(
    input_shape: &[usize],
    index: &[usize],
    grad_out: &[T],
) -> Vec<T> {
    let (n, c) = (input_shape[0], input_shape[1]);
    let plane: usize = input_shape[2..].iter().product();
    let mut dx = vec![T::zero(); n * c * plane];
    for b in 0..n {
        for (p, &src) in index.iter().enumerate() {
            let from = &grad_out[(b * index.len() + p) * plane..][..plane];
            let to = &mut dx[(b * c + src) * plane..][..plane];
            for (t, &f) in to.iter_mut().zip(from) {
                *t += f;
            }
        }
    }
    dx
}

/// Channel order produced by the group shuffle: output channel `i` reads
/// input channel `(i mod G)·(Ch/G) + ⌊i/G⌋`.
pub fn shuffle_index(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::Indivisible {
            op: "permute",
            what: "channels",
            value: channels,
            divisor: groups.max(1),
        });
    }
    let per = channels / groups;
    Ok((0..channels)
        .map(|i| (i % groups) * per + i / groups)
        .collect())
}

/// Non-overlapping or strided average pooling without padding.
pub fn avg_pool2d<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "avg_pool2d";
    expect_ndim(OP, input, 4)?;
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(OP, "kernel and stride must be >= 1"));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h < kernel || w < kernel {
        return Err(Error::invalid(
            OP,
            format!("kernel {kernel} exceeds input {h}x{w}"),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..kernel {
                    let row = &src[(oy * stride + ky) * w + ox * stride..][..kernel];
                    for &v in row {
                        s += v;
                    }
                }
                dst[oy * ow + ox] = s * scale;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Element>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &[T],
) -> Vec<T> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        let src = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * scale;
                for ky in 0..kernel {
                    for v in &mut dst[(oy * stride + ky) * w + ox * stride..][..kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("global_avg_pool", input, 4)?;
    let (n, c) = (input.dim(0), input.dim(1));
    let plane = input.dim(2) * input.dim(3);
    let scale = T::one() / T::from_usize(plane).unwrap();
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let plane = input_shape[2] * input_shape[3];
    let scale = T::one() / T::from_usize(plane).unwrap();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
        .collect()
}

/// `x·Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    expect_ndim(OP, input, 2)?;
    expect_ndim(OP, weight, 2)?;
    let (n, fin) = (input.dim(0), input.dim(1));
    let fout = weight.dim(0);
    if weight.dim(1) != fin {
        return Err(Error::ShapeMismatch {
            op: OP,
            left_name: "input features",
            left: fin,
            right_name: "weight in_features",
            right: weight.dim(1),
        });
    }
    let mut out = vec![T::zero(); n * fout];
    if let Some(b) = bias {
        if b.len() != fout {
            return Err(Error::ShapeMismatch {
                op: OP,
                left_name: "out_features",
                left: fout,
                right_name: "bias length",
                right: b.len(),
            });
        }
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        n,
        fin,
        fout,
        input.data(),
        fin as isize,
        1,
        weight.data(),
        1,
        fin as isize,
        T::one(),
        &mut out,
        fout as isize,
        1,
    );
    Tensor::from_vec(&[n, fout], out)
}

/// Gradients of [`linear`] for (input, weight, bias).
pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, fin) = (input.dim(0), input.dim(1));
    let fout = weight.dim(0);
    let mut dx = vec![T::zero(); n * fin];
    let mut dw = vec![T::zero(); fout * fin];
    T::gemm(
        n,
        fout,
        fin,
        grad_out,
        fout as isize,
        1,
        weight.data(),
        fin as isize,
        1,
        T::zero(),
        &mut dx,
        fin as isize,
        1,
    );
    T::gemm(
        fout,
        n,
        fin,
        grad_out,
        1,
        fout as isize,
        input.data(),
        fin as isize,
        1,
        T::zero(),
        &mut dw,
        fin as isize,
        1,
    );
    let mut db = vec![T::zero(); fout];
    for row in grad_out.chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// softmax probabilities (kept for the backward pass).
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    const OP: &str = "softmax_cross_entropy";
    expect_ndim(OP, logits, 2)?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: OP,
            left_name: "batch",
            left: n,
            right_name: "labels",
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch {
            op: OP,
            left_name: "label",
            left: bad,
            right_name: "classes",
            right: k,
        });
    }
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (b, row) in logits.data().chunks(k).enumerate() {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let p = &mut probs[b * k..(b + 1) * k];
        let mut z = T::zero();
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - mx).exp();
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / z;
        }
        loss += z.ln() + mx - row[labels[b]];
    }
    Ok((loss / T::from_usize(n).unwrap(), probs))
}

pub fn softmax_cross_entropy_backward<T: Element>(
    probs: &[T],
    labels: &[usize],
    grad_out: T,
) -> Vec<T> {
    let n = labels.len();
    let k = probs.len() / n.max(1);
    let scale = grad_out / T::from_usize(n).unwrap();
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (b, &l) in labels.iter().enumerate() {
        d[b * k + l] -= scale;
    }
    d
}

/// Group-lasso value `Σ_g Σ_j ‖F^g_{:,j}‖₂` of an `O×R` matrix split into
/// `groups` contiguous row blocks, together with each column norm.
pub fn group_lasso<T: Element>(
    matrix: &[T],
    rows: usize,
    cols: usize,
    groups: usize,
) -> Result<(T, Vec<T>)> {
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(Error::Indivisible {
            op: "group_lasso",
            what: "rows O",
            value: rows,
            divisor: groups.max(1),
        });
    }
    if matrix.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "group_lasso",
            left_name: "O·R",
            left: rows * cols,
            right_name: "len",
            right: matrix.len(),
        });
    }
    let per = rows / groups;
    let mut norms = vec![T::zero(); groups * cols];
    for g in 0..groups {
        for i in g * per..(g + 1) * per {
            let row = &matrix[i * cols..(i + 1) * cols];
            for (j, &v) in row.iter().enumerate() {
                norms[g * cols + j] += v * v;
            }
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    let total = norms.iter().copied().sum();
    Ok((total, norms))
}

/// Gradient of [`group_lasso`]; columns with zero norm get a zero subgradient.
pub fn group_lasso_backward<T: Element>(
    matrix: &[T],
    norms: &[T],
    rows: usize,
    cols: usize,
    groups: usize,
    grad_out: T,
) -> Vec<T> {
    let per = rows / groups;
    let mut d = vec![T::zero(); matrix.len()];
    for i in 0..rows {
        let g = i / per;
        for j in 0..cols {
            let nrm = norms[g * cols + j];
            if nrm > T::zero() {
                d[i * cols + j] = grad_out * matrix[i * cols + j] / nrm;
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_conv_is_scalar_multiply() {
        let y = conv2d(&t(&[1, 1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::zeros(&[1, 2, 7, 9]);
        let w = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_extents() {
        let x = Tensor::<f64>::zeros(&[1, 4, 3, 3]);
        let w = Tensor::<f64>::zeros(&[2, 3, 1, 1]);
        match conv2d(&x, &w, 1, 0).unwrap_err() {
            Error::ShapeMismatch { left, right, .. } => assert_eq!((left, right), (4, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn group_conv_rejects_indivisible_channels() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        let w = Tensor::<f64>::zeros(&[4, 2, 1, 1]);
        assert!(matches!(
            group_conv2d(&x, &w, 1, 0, 4).unwrap_err(),
            Error::Indivisible {
                value: 6,
                divisor: 4,
                ..
            }
        ));
        let w = Tensor::<f64>::zeros(&[5, 2, 1, 1]);
        assert!(group_conv2d(&x, &w, 1, 0, 3).is_err());
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn avg_pool_mean() {
        let y = avg_pool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shuffle_index_transposes_groups() {
        assert_eq!(shuffle_index(8, 2).unwrap(), vec![0, 4, 1, 5, 2, 6, 3, 7]);
        assert_eq!(shuffle_index(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(shuffle_index(6, 4).is_err());
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let parts = concat_channels_backward(c.data(), 2, &[1, 2], 2);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());
    }

    #[test]
    fn bn_eval_with_unit_stats_is_near_identity() {
        let x = t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]);
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let (y, _) = batch_norm(&x, &ones, &zeros, &zeros, &ones, false, 1e-5).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&x).unwrap() <= 3.0 * 5e-6 + 1e-9);
    }

    #[test]
    fn bn_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let p = Tensor::<f64>::ones(&[2]);
        assert!(batch_norm(&x, &p, &p, &p, &p, true, 1e-5).is_err());
    }

    #[test]
    fn group_lasso_column_norms() {
        let (v, norms) = group_lasso(&[3.0f64, 0.0, 4.0, 0.0], 2, 2, 1).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(norms, vec![5.0, 0.0]);
        let d = group_lasso_backward(&[3.0f64, 0.0, 4.0, 0.0], &norms, 2, 2, 1, 1.0);
        assert_eq!(d, vec![0.6, 0.0, 0.8, 0.0]);
    }

    /// Six nested loops straight from the definition of a grouped convolution.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let og = o / groups;
        let mut y = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            let ic = (oc / og) * cg + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                    acc += xv * w.data()[((oc * cg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn conv_case(
    ) -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, u64)> {
        // (batch, groups, cin_g, cout_g, size, kernel, stride, pad, seed)
        (
            1..3usize,
            1..4usize,
            1..4usize,
            1..11usize,
            1..8usize,
            1..4usize,
            1..3usize,
            0..3usize,
            any::<u64>(),
        )
            .prop_filter("kernel fits", |c| c.4 + 2 * c.7 >= c.5)
    }

    fn sample(
        c: (usize, usize, usize, usize, usize, usize, usize, usize, u64),
    ) -> (Tensor<f64>, Tensor<f64>) {
        let (b, g, cig, cog, size, k, _, _, seed) = c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[b, g * cig, size, size + 1], 1.0, &mut rng);
        let w = Tensor::randn(&[g * cog, cig, k, k], 1.0, &mut rng);
        (x, w)
    }

    proptest! {
        #[test]
        fn conv_matches_definition(c in conv_case()) {
            let (x, w) = sample(c);
            let (stride, pad, groups) = (c.6, c.7, c.1);
            let y = group_conv2d(&x, &w, stride, pad, groups).unwrap();
            let r = naive_conv(&x, &w, stride, pad, groups);
            for (a, b) in y.data().iter().zip(&r) {
                prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }

        #[test]
        fn conv_backward_is_adjoint_of_forward(c in conv_case(), seed in any::<u64>()) {
            // <dy, conv(x, w)> is bilinear: probe it with unit tensors.
            let (x, w) = sample(c);
            let (stride, pad, groups) = (c.6, c.7, c.1);
            let y = group_conv2d(&x, &w, stride, pad, groups).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let (dx, dw) = group_conv2d_backward(&x, &w, dy.data(), stride, pad, groups, true).unwrap();
            let dx = dx.unwrap();
            let inner = |xx: &Tensor<f64>, ww: &Tensor<f64>| -> f64 {
                naive_conv(xx, ww, stride, pad, groups).iter().zip(dy.data()).map(|(a, b)| a * b).sum()
            };
            for (i, &d) in dx.iter().enumerate() {
                let mut e = Tensor::<f64>::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                prop_assert!((inner(&e, &w) - d).abs() <= 1e-10);
            }
            for (i, &d) in dw.iter().enumerate() {
                let mut e = Tensor::<f64>::zeros(w.shape());
                e.data_mut()[i] = 1.0;
                prop_assert!((inner(&x, &e) - d).abs() <= 1e-10);
            }
        }

        #[test]
        fn grouped_conv_equals_block_diagonal_dense(c in conv_case()) {
            let (x, w) = sample(c);
            let (stride, pad, groups) = (c.6, c.7, c.1);
            let (o, cig, k) = (w.dim(0), w.dim(1), w.dim(2));
            let cin = x.dim(1);
            let og = o / groups;
            let mut dense = Tensor::<f64>::zeros(&[o, cin, k, k]);
            for oc in 0..o {
                for ci in 0..cig {
                    let ic = (oc / og) * cig + ci;
                    for t in 0..k * k {
                        dense.data_mut()[(oc * cin + ic) * k * k + t] = w.data()[(oc * cig + ci) * k * k + t];
                    }
                }
            }
            let a = group_conv2d(&x, &w, stride, pad, groups).unwrap();
            let b = conv2d(&x, &dense, stride, pad).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
        }

        #[test]
        fn shuffle_is_a_bijection(groups in 1..9usize, per in 1..9usize) {
            let idx = shuffle_index(groups * per, groups).unwrap();
            let mut seen = idx.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..groups * per).collect::<Vec<_>>());
        }
    }
}
