//! Volumetric convolution kernels.
//!
//! Every operation has two implementations: a direct loop nest that serves as
//! the reference, and an im2col + GEMM path used for training. The two agree
//! to within rounding (the GEMM path reassociates the sums).
//!
//! Weight layouts: a convolution kernel is `(c_out, c_in, k, k, k)`; a
//! transposed convolution kernel is `(c_in, c_out, k, k, k)`, so a single
//! array used by both makes the transposed convolution the exact adjoint of
//! the strided one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Cubic kernel size, stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// `floor((s + 2p - k) / stride) + 1`, or `None` when the kernel does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        (input + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }

    /// Spatial length produced by the transposed convolution.
    pub fn transposed_len(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn kvol(&self) -> usize {
        self.kernel.pow(3)
    }
}

/// Which implementation backs the convolution calls of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    Direct,
    #[default]
    Gemm,
}

fn out_dims(g: &ConvGeometry, spatial: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for (o, &s) in out.iter_mut().zip(&spatial) {
        *o = g.output_len(s).ok_or_else(|| {
            Error::Shape(format!(
                "spatial size {s} with padding {} is smaller than kernel {}",
                g.pad, g.kernel
            ))
        })?;
    }
    Ok(out)
}

fn check_weight(w: &Tensor5, g: &ConvGeometry) -> Result<()> {
    let [_, _, kd, kh, kw] = w.shape();
    if kd != g.kernel || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "kernel block {:?} does not match cubic kernel size {}",
            w.shape(),
            g.kernel
        )));
    }
    Ok(())
}

fn check_bias(bias: &[f64], channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(Error::Shape(format!(
            "bias has {} entries for {channels} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// Strided convolution: `y[n,o,p] = b[o] + sum_{i,t} w[o,i,t] x[n,i,p*s+t-pad]`.
pub fn conv3d(
    x: &Tensor5,
    w: &Tensor5,
    bias: &[f64],
    g: ConvGeometry,
    path: ConvPath,
) -> Result<Tensor5> {
    g.validate()?;
    check_weight(w, &g)?;
    let [cout, cin, ..] = w.shape();
    if x.channels() != cin {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {cin}",
            x.channels()
        )));
    }
    check_bias(bias, cout)?;
    let od = out_dims(&g, x.spatial())?;
    let mut out = Tensor5::zeros([x.batch(), cout, od[0], od[1], od[2]]);
    match path {
        ConvPath::Direct => conv_direct(x, w, bias, &g, &mut out),
        ConvPath::Gemm => conv_gemm(x, w, bias, &g, &mut out),
    }
    out.ensure_finite("conv3d output")?;
    Ok(out)
}

/// Transposed (fractionally strided) convolution with kernel `(c_in, c_out, k, k, k)`.
///
/// `out_spatial` pins the output size; when `None` it is `(s-1)*stride + k - 2*pad`.
pub fn conv3d_transpose(
    x: &Tensor5,
    w: &Tensor5,
    bias: &[f64],
    g: ConvGeometry,
    out_spatial: Option<[usize; 3]>,
    path: ConvPath,
) -> Result<Tensor5> {
    g.validate()?;
    check_weight(w, &g)?;
    let [cin, cout, ..] = w.shape();
    if x.channels() != cin {
        return Err(Error::Shape(format!(
            "input has {} channels, transposed kernel expects {cin}",
            x.channels()
        )));
    }
    check_bias(bias, cout)?;
    let spatial = match out_spatial {
        Some(s) => s,
        None => {
            let mut s = [0; 3];
            for (o, &i) in s.iter_mut().zip(&x.spatial()) {
                *o = g.transposed_len(i).ok_or_else(|| {
                    Error::Shape(format!("padding {} too large for input {i}", g.pad))
                })?;
            }
            s
        }
    };
    // The output must map back onto the input under the forward convolution.
    if out_dims(&g, spatial)? != x.spatial() {
        return Err(Error::Shape(format!(
            "transposed output {spatial:?} is inconsistent with input {:?}",
            x.spatial()
        )));
    }
    let mut out = Tensor5::zeros([x.batch(), cout, spatial[0], spatial[1], spatial[2]]);
    match path {
        ConvPath::Direct => conv_transpose_direct(x, w, &g, &mut out),
        ConvPath::Gemm => conv_transpose_gemm(x, w, &g, &mut out),
    }
    let plane = out.spatial_len();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[idx % cout];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    out.ensure_finite("conv3d_transpose output")?;
    Ok(out)
}

/// Kernel gradient of [`conv3d`]: `gw[o,i,t] = sum_{n,p} gy[n,o,p] x[n,i,p*s+t-pad]`.
///
/// The result has shape `(gy.channels, x.channels, k, k, k)`.
pub fn conv3d_weight_grad(
    x: &Tensor5,
    gy: &Tensor5,
    g: ConvGeometry,
    path: ConvPath,
) -> Result<Tensor5> {
    g.validate()?;
    if out_dims(&g, x.spatial())? != gy.spatial() || x.batch() != gy.batch() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match convolution of {:?}",
            gy.shape(),
            x.shape()
        )));
    }
    let k = g.kernel;
    let mut gw = Tensor5::zeros([gy.channels(), x.channels(), k, k, k]);
    match path {
        ConvPath::Direct => weight_grad_direct(x, gy, &g, &mut gw),
        ConvPath::Gemm => weight_grad_gemm(x, gy, &g, &mut gw),
    }
    Ok(gw)
}

/// Per-channel sum over batch and space; the bias gradient of any convolution.
pub fn channel_sums(gy: &Tensor5) -> Vec<f64> {
    let c = gy.channels();
    let mut out = vec![0.0; c];
    for n in 0..gy.batch() {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += gy.channel(n, ch).iter().sum::<f64>();
        }
    }
    out
}

#[inline]
fn source_index(o: usize, t: usize, g: &ConvGeometry, len: usize) -> Option<usize> {
    (o * g.stride + t).checked_sub(g.pad).filter(|&i| i < len)
}

fn conv_direct(x: &Tensor5, w: &Tensor5, bias: &[f64], g: &ConvGeometry, out: &mut Tensor5) {
    let [nb, cout, od, oh, ow] = out.shape();
    let cin = x.channels();
    let [d, h, wd] = x.spatial();
    let k = g.kernel;
    for n in 0..nb {
        for o in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for i in 0..cin {
                            for kz in 0..k {
                                let Some(iz) = source_index(oz, kz, g, d) else {
                                    continue;
                                };
                                for ky in 0..k {
                                    let Some(iy) = source_index(oy, ky, g, h) else {
                                        continue;
                                    };
                                    for kx in 0..k {
                                        let Some(ix) = source_index(ox, kx, g, wd) else {
                                            continue;
                                        };
                                        acc += w.at(o, i, kz, ky, kx) * x.at(n, i, iz, iy, ix);
                                    }
                                }
                            }
                        }
                        let off = out.offset(n, o, oz, oy, ox);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
}

fn conv_transpose_direct(x: &Tensor5, w: &Tensor5, g: &ConvGeometry, out: &mut Tensor5) {
    let [nb, cin, d, h, wd] = x.shape();
    let cout = out.channels();
    let [od, oh, ow] = out.spatial();
    let k = g.kernel;
    for n in 0..nb {
        for i in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x.at(n, i, z, y, xx);
                        for o in 0..cout {
                            for kz in 0..k {
                                let Some(tz) = source_index(z, kz, g, od) else {
                                    continue;
                                };
                                for ky in 0..k {
                                    let Some(ty) = source_index(y, ky, g, oh) else {
                                        continue;
                                    };
                                    for kx in 0..k {
                                        let Some(tx) = source_index(xx, kx, g, ow) else {
                                            continue;
                                        };
                                        let off = out.offset(n, o, tz, ty, tx);
                                        out.data_mut()[off] += w.at(i, o, kz, ky, kx) * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_grad_direct(x: &Tensor5, gy: &Tensor5, g: &ConvGeometry, gw: &mut Tensor5) {
    let [nb, cout, od, oh, ow] = gy.shape();
    let cin = x.channels();
    let [d, h, wd] = x.spatial();
    let k = g.kernel;
    for o in 0..cout {
        for i in 0..cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for n in 0..nb {
                            for oz in 0..od {
                                let Some(iz) = source_index(oz, kz, g, d) else {
                                    continue;
                                };
                                for oy in 0..oh {
                                    let Some(iy) = source_index(oy, ky, g, h) else {
                                        continue;
                                    };
                                    for ox in 0..ow {
                                        let Some(ix) = source_index(ox, kx, g, wd) else {
                                            continue;
                                        };
                                        acc += gy.at(n, o, oz, oy, ox) * x.at(n, i, iz, iy, ix);
                                    }
                                }
                            }
                        }
                        let off = gw.offset(o, i, kz, ky, kx);
                        gw.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// im2col + GEMM
// ---------------------------------------------------------------------------

/// Upper bound on the column buffer, in f64 elements.
const COLUMN_BUDGET: usize = 1 << 21;

/// Geometry of one batch item viewed as a convolution from `input` to `output`.
struct Lowering {
    g: ConvGeometry,
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Lowering {
    fn rows(&self) -> usize {
        self.output[0] * self.output[1]
    }

    fn k_len(&self) -> usize {
        self.channels * self.g.kvol()
    }

    fn rows_per_chunk(&self) -> usize {
        (COLUMN_BUDGET / (self.k_len() * self.output[2]).max(1)).clamp(1, self.rows())
    }

    /// For output column `ox` and tap `kx`, the valid `ox` range whose source
    /// index lies inside the input.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let g = &self.g;
        let ow = self.output[2];
        let w = self.input[2];
        // ox*s + kx - pad in [0, w)
        let lo = if kx >= g.pad {
            0
        } else {
            (g.pad - kx).div_ceil(g.stride)
        };
        let hi = if w + g.pad > kx {
            ((w + g.pad - kx - 1) / g.stride + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols[(c, kz, ky, kx)][p]` for output rows `r0..r1` from `src`
    /// (one batch item, `channels` planes).
    fn im2col(&self, src: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let g = &self.g;
        let k = g.kernel;
        let [d, h, w] = self.input;
        let oh = self.output[1];
        let ow = self.output[2];
        let p_len = (r1 - r0) * ow;
        let plane = d * h * w;
        let mut kidx = 0;
        for c in 0..self.channels {
            let chan = &src[c * plane..(c + 1) * plane];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_x(kx);
                        let row_block = &mut cols[kidx * p_len..(kidx + 1) * p_len];
                        for r in r0..r1 {
                            let dst = &mut row_block[(r - r0) * ow..(r - r0 + 1) * ow];
                            let (oz, oy) = (r / oh, r % oh);
                            let iz = source_index(oz, kz, g, d);
                            let iy = source_index(oy, ky, g, h);
                            let (Some(iz), Some(iy)) = (iz, iy) else {
                                dst.fill(0.0);
                                continue;
                            };
                            let line = &chan[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if g.stride == 1 {
                                let start = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                            } else {
                                for (ox, v) in dst[lo..hi].iter_mut().enumerate() {
                                    *v = line[(ox + lo) * g.stride + kx - g.pad];
                                }
                            }
                        }
                        kidx += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dst` (adjoint of [`Lowering::im2col`]).
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dst: &mut [f64]) {
        let g = &self.g;
        let k = g.kernel;
        let [d, h, w] = self.input;
        let oh = self.output[1];
        let ow = self.output[2];
        let p_len = (r1 - r0) * ow;
        let plane = d * h * w;
        let mut kidx = 0;
        for c in 0..self.channels {
            let chan = &mut dst[c * plane..(c + 1) * plane];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_x(kx);
                        let row_block = &cols[kidx * p_len..(kidx + 1) * p_len];
                        for r in r0..r1 {
                            let (oz, oy) = (r / oh, r % oh);
                            let (Some(iz), Some(iy)) =
                                (source_index(oz, kz, g, d), source_index(oy, ky, g, h))
                            else {
                                continue;
                            };
                            let src = &row_block[(r - r0) * ow..(r - r0 + 1) * ow];
                            let line = &mut chan[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            if g.stride == 1 {
                                let start = lo + kx - g.pad;
                                for (a, b) in
                                    line[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi])
                                {
                                    *a += b;
                                }
                            } else {
                                for (ox, v) in src[lo..hi].iter().enumerate() {
                                    line[(ox + lo) * g.stride + kx - g.pad] += v;
                                }
                            }
                        }
                        kidx += 1;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a @ b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the furthest element touched in each operand.
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the strides and extents above keep every access inside the
    // borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn conv_gemm(x: &Tensor5, w: &Tensor5, bias: &[f64], g: &ConvGeometry, out: &mut Tensor5) {
    let cout = out.channels();
    let lower = Lowering {
        g: *g,
        channels: x.channels(),
        input: x.spatial(),
        output: out.spatial(),
    };
    let plane = out.spatial_len();
    let k_len = lower.k_len();
    let ow = lower.output[2];
    let chunk = lower.rows_per_chunk();
    let item_len = cout * plane;
    out.data_mut()
        .par_chunks_mut(item_len)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = x.item(n);
            let mut cols = vec![0.0; k_len * chunk * ow];
            for (o, b) in bias.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(*b);
            }
            let mut r0 = 0;
            while r0 < lower.rows() {
                let r1 = (r0 + chunk).min(lower.rows());
                let p_len = (r1 - r0) * ow;
                lower.im2col(src, r0, r1, &mut cols);
                gemm(
                    cout,
                    k_len,
                    p_len,
                    w.data(),
                    (k_len, 1),
                    &cols,
                    (p_len, 1),
                    1.0,
                    &mut dst[r0 * ow..],
                    (plane, 1),
                );
                r0 = r1;
            }
        });
}

fn conv_transpose_gemm(x: &Tensor5, w: &Tensor5, g: &ConvGeometry, out: &mut Tensor5) {
    let cin = x.channels();
    let cout = out.channels();
    // Viewed as a convolution, the transposed output is the "input" and the
    // transposed input is the "output".
    let lower = Lowering {
        g: *g,
        channels: cout,
        input: out.spatial(),
        output: x.spatial(),
    };
    let in_plane = x.spatial_len();
    let k_len = lower.k_len();
    let ow = lower.output[2];
    let chunk = lower.rows_per_chunk();
    let item_len = cout * out.spatial_len();
    out.data_mut()
        .par_chunks_mut(item_len)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = x.item(n);
            let mut cols = vec![0.0; k_len * chunk * ow];
            let mut r0 = 0;
            while r0 < lower.rows() {
                let r1 = (r0 + chunk).min(lower.rows());
                let p_len = (r1 - r0) * ow;
                // cols = w^T @ x_chunk, w viewed as (cin, cout*k^3).
                gemm(
                    k_len,
                    cin,
                    p_len,
                    w.data(),
                    (1, k_len),
                    &src[r0 * ow..],
                    (in_plane, 1),
                    0.0,
                    &mut cols,
                    (p_len, 1),
                );
                lower.col2im(&cols, r0, r1, dst);
                r0 = r1;
            }
        });
}

fn weight_grad_gemm(x: &Tensor5, gy: &Tensor5, g: &ConvGeometry, gw: &mut Tensor5) {
    let cout = gy.channels();
    let lower = Lowering {
        g: *g,
        channels: x.channels(),
        input: x.spatial(),
        output: gy.spatial(),
    };
    let plane = gy.spatial_len();
    let k_len = lower.k_len();
    let ow = lower.output[2];
    let chunk = lower.rows_per_chunk();
    let partials: Vec<Vec<f64>> = (0..x.batch())
        .into_par_iter()
        .map(|n| {
            let src = x.item(n);
            let grad = gy.item(n);
            let mut acc = vec![0.0; cout * k_len];
            let mut cols = vec![0.0; k_len * chunk * ow];
            let mut r0 = 0;
            while r0 < lower.rows() {
                let r1 = (r0 + chunk).min(lower.rows());
                let p_len = (r1 - r0) * ow;
                lower.im2col(src, r0, r1, &mut cols);
                gemm(
                    cout,
                    p_len,
                    k_len,
                    &grad[r0 * ow..],
                    (plane, 1),
                    &cols,
                    (1, p_len),
                    1.0,
                    &mut acc,
                    (k_len, 1),
                );
                r0 = r1;
            }
            acc
        })
        .collect();
    // Fixed reduction order over the batch keeps results independent of the
    // thread count.
    let dst = gw.data_mut();
    for part in &partials {
        for (a, b) in dst.iter_mut().zip(part) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
        let n = shape.iter().product();
        Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_abs_diff(a: &Tensor5, b: &Tensor5) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor5::full([1, 1, 3, 3, 3], 1.0);
        let w = Tensor5::full([1, 1, 3, 3, 3], 1.0);
        for path in [ConvPath::Direct, ConvPath::Gemm] {
            let y = conv3d(&x, &w, &[0.0], ConvGeometry::new(3, 1, 1), path).unwrap();
            assert_eq!(y.at(0, 0, 1, 1, 1), 27.0);
            assert_eq!(y.at(0, 0, 0, 0, 0), 8.0);
            assert_eq!(y.at(0, 0, 2, 2, 2), 8.0);
            assert_eq!(y.at(0, 0, 0, 1, 1), 18.0);
        }
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 5, 6, 7], &mut rng);
        for k in [1, 3, 5] {
            let mut w = Tensor5::zeros([1, 1, k, k, k]);
            let c = k / 2;
            let off = w.offset(0, 0, c, c, c);
            w.data_mut()[off] = 1.0;
            for path in [ConvPath::Direct, ConvPath::Gemm] {
                let y = conv3d(&x, &w, &[0.0], ConvGeometry::new(k, 1, k / 2), path).unwrap();
                assert_eq!(y.data(), x.data());
            }
        }
    }

    #[test]
    fn gemm_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (g, spatial) in [
            (ConvGeometry::new(5, 1, 2), [6, 5, 7]),
            (ConvGeometry::new(2, 2, 0), [4, 6, 8]),
            (ConvGeometry::new(3, 2, 1), [5, 6, 7]),
            (ConvGeometry::new(1, 1, 0), [3, 3, 3]),
        ] {
            let x = random([2, 3, spatial[0], spatial[1], spatial[2]], &mut rng);
            let w = random([4, 3, g.kernel, g.kernel, g.kernel], &mut rng);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let yd = conv3d(&x, &w, &b, g, ConvPath::Direct).unwrap();
            let yg = conv3d(&x, &w, &b, g, ConvPath::Gemm).unwrap();
            assert!(max_abs_diff(&yd, &yg) < 1e-10);

            let gy = random(yd.shape(), &mut rng);
            let gwd = conv3d_weight_grad(&x, &gy, g, ConvPath::Direct).unwrap();
            let gwg = conv3d_weight_grad(&x, &gy, g, ConvPath::Gemm).unwrap();
            assert!(max_abs_diff(&gwd, &gwg) < 1e-10);

            let wt = random([3, 4, g.kernel, g.kernel, g.kernel], &mut rng);
            let zeros = vec![0.0; 4];
            let gy3 = random(
                [2, 3, yd.shape()[2], yd.shape()[3], yd.shape()[4]],
                &mut rng,
            );
            let td =
                conv3d_transpose(&gy3, &wt, &zeros, g, Some(spatial), ConvPath::Direct).unwrap();
            let tg = conv3d_transpose(&gy3, &wt, &zeros, g, Some(spatial), ConvPath::Gemm).unwrap();
            assert!(max_abs_diff(&td, &tg) < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor5::zeros([1, 2, 4, 4, 4]);
        let w = Tensor5::zeros([1, 3, 3, 3, 3]);
        assert!(matches!(
            conv3d(&x, &w, &[0.0], ConvGeometry::new(3, 1, 1), ConvPath::Gemm),
            Err(Error::Shape(_))
        ));
        let w = Tensor5::zeros([1, 2, 5, 5, 5]);
        assert!(conv3d(&x, &w, &[0.0], ConvGeometry::new(5, 1, 0), ConvPath::Gemm).is_err());
        let w = Tensor5::zeros([1, 2, 3, 3, 3]);
        assert!(conv3d(
            &x,
            &w,
            &[0.0, 1.0],
            ConvGeometry::new(3, 1, 1),
            ConvPath::Gemm
        )
        .is_err());
    }

    #[test]
    fn shape_law() {
        let g = ConvGeometry::new(5, 1, 2);
        assert_eq!(g.output_len(16), Some(16));
        let g = ConvGeometry::new(2, 2, 0);
        assert_eq!(g.output_len(8), Some(4));
        assert_eq!(g.transposed_len(4), Some(8));
        let g = ConvGeometry::new(3, 2, 1);
        assert_eq!(g.output_len(7), Some(4));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor5::full([1, 1, 2, 2, 2], f64::MAX);
        let w = Tensor5::full([1, 1, 2, 2, 2], f64::MAX);
        let err = conv3d(&x, &w, &[0.0], ConvGeometry::new(2, 2, 0), ConvPath::Gemm);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
