//! Pointwise and structural layers: PReLU, residual add, channel
//! concatenation and tiling, two-class voxelwise softmax.
//!
//! Each forward has a matching backward that maps an upstream gradient to
//! gradients of its inputs; the tape wires them together.

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Initial negative-side slope of every PReLU channel.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

fn check_slopes(x: &Tensor5, slope: &[f64]) -> Result<()> {
    if slope.len() != x.channels() {
        return Err(Error::Shape(format!(
            "{} PReLU slopes for {} channels",
            slope.len(),
            x.channels()
        )));
    }
    Ok(())
}

pub fn prelu(x: &Tensor5, slope: &[f64]) -> Result<Tensor5> {
    check_slopes(x, slope)?;
    let c = x.channels();
    let plane = x.spatial_len();
    let mut out = x.clone().with_requires_grad(false);
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = slope[idx % c];
        for v in chunk {
            if *v <= 0.0 {
                *v *= a;
            }
        }
    }
    out.ensure_finite("prelu output")?;
    Ok(out)
}

/// Returns `(grad_x, grad_slope)`.
pub fn prelu_backward(x: &Tensor5, slope: &[f64], gy: &Tensor5) -> (Tensor5, Vec<f64>) {
    let c = x.channels();
    let plane = x.spatial_len();
    let mut gx = gy.clone();
    let mut gs = vec![0.0; c];
    for (idx, (gchunk, xchunk)) in gx
        .data_mut()
        .chunks_mut(plane)
        .zip(x.data().chunks(plane))
        .enumerate()
    {
        let ch = idx % c;
        let a = slope[ch];
        let mut acc = 0.0;
        for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
            if xv <= 0.0 {
                acc += *g * xv;
                *g *= a;
            }
        }
        gs[ch] += acc;
    }
    (gx, gs)
}

pub fn add(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = Tensor5::from_vec(a.shape(), data)?;
    out.ensure_finite("add output")?;
    Ok(out)
}

pub fn mul(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let out = Tensor5::from_vec(a.shape(), data)?;
    out.ensure_finite("mul output")?;
    Ok(out)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    let [na, ca, da, ha, wa] = a.shape();
    let [nb, cb, db, hb, wb] = b.shape();
    if (na, da, ha, wa) != (nb, db, hb, wb) {
        return Err(Error::Shape(format!(
            "concat of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..na {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor5::from_vec([na, ca + cb, da, ha, wa], data)
}

/// Splits a concatenated gradient back into the two parts.
pub fn concat_backward(gy: &Tensor5, ca: usize) -> Result<(Tensor5, Tensor5)> {
    let [n, c, d, h, w] = gy.shape();
    let plane = gy.spatial_len();
    let cb = c - ca;
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let item = gy.item(i);
        ga.extend_from_slice(&item[..ca * plane]);
        gb.extend_from_slice(&item[ca * plane..]);
    }
    Ok((
        Tensor5::from_vec([n, ca, d, h, w], ga)?,
        Tensor5::from_vec([n, cb, d, h, w], gb)?,
    ))
}

/// Repeats the channel block `times` times: output channel `j` is input
/// channel `j % c`.
pub fn tile_channels(x: &Tensor5, times: usize) -> Result<Tensor5> {
    if times == 0 {
        return Err(Error::InvalidArgument(
            "tile factor must be positive".into(),
        ));
    }
    let [n, c, d, h, w] = x.shape();
    let mut data = Vec::with_capacity(x.numel() * times);
    for i in 0..n {
        for _ in 0..times {
            data.extend_from_slice(x.item(i));
        }
    }
    Tensor5::from_vec([n, c * times, d, h, w], data)
}

pub fn tile_channels_backward(gy: &Tensor5, channels: usize) -> Tensor5 {
    let [n, ct, d, h, w] = gy.shape();
    let plane = gy.spatial_len();
    let mut gx = Tensor5::zeros([n, channels, d, h, w]);
    for i in 0..n {
        for j in 0..ct {
            let src = gy.channel(i, j);
            let base = (i * channels + j % channels) * plane;
            for (a, b) in gx.data_mut()[base..base + plane].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    gx
}

/// Voxelwise softmax over exactly two channels, stabilized by subtracting
/// the per-voxel maximum.
pub fn softmax2(x: &Tensor5) -> Result<Tensor5> {
    if x.channels() != 2 {
        return Err(Error::Shape(format!(
            "voxelwise softmax needs 2 channels, got {}",
            x.channels()
        )));
    }
    let mut out = Tensor5::zeros(x.shape());
    let plane = x.spatial_len();
    for n in 0..x.batch() {
        let (a, b) = (x.channel(n, 0), x.channel(n, 1));
        let mut p0 = Vec::with_capacity(plane);
        let mut p1 = Vec::with_capacity(plane);
        for (&u, &v) in a.iter().zip(b) {
            let m = u.max(v);
            let (eu, ev) = ((u - m).exp(), (v - m).exp());
            let s = eu + ev;
            p0.push(eu / s);
            p1.push(ev / s);
        }
        let base = n * 2 * plane;
        out.data_mut()[base..base + plane].copy_from_slice(&p0);
        out.data_mut()[base + plane..base + 2 * plane].copy_from_slice(&p1);
    }
    out.ensure_finite("softmax output")?;
    Ok(out)
}

/// Jacobian-vector product of the softmax: `gx_c = y_c (gy_c - sum_k gy_k y_k)`.
pub fn softmax2_backward(y: &Tensor5, gy: &Tensor5) -> Tensor5 {
    let mut gx = Tensor5::zeros(y.shape());
    let plane = y.spatial_len();
    for n in 0..y.batch() {
        let base = n * 2 * plane;
        for i in 0..plane {
            let (y0, y1) = (y.data()[base + i], y.data()[base + plane + i]);
            let (g0, g1) = (gy.data()[base + i], gy.data()[base + plane + i]);
            let s = g0 * y0 + g1 * y1;
            gx.data_mut()[base + i] = y0 * (g0 - s);
            gx.data_mut()[base + plane + i] = y1 * (g1 - s);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 5], v: &[f64]) -> Tensor5 {
        Tensor5::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn prelu_definition() {
        let x = t([1, 1, 1, 1, 2], &[3.0, -2.0]);
        let y = prelu(&x, &[PRELU_INIT_SLOPE]).unwrap();
        assert_eq!(y.data(), &[3.0, -0.5]);
        assert!(prelu(&x, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let x = t([1, 2, 1, 1, 2], &[0.0, 3f64.ln(), 0.0, 0.0]);
        let y = softmax2(&x).unwrap();
        assert_eq!(y.at(0, 0, 0, 0, 0), 0.5);
        assert_eq!(y.at(0, 1, 0, 0, 0), 0.5);
        assert!((y.at(0, 0, 0, 0, 1) - 0.75).abs() < 1e-15);
        assert!((y.at(0, 1, 0, 0, 1) - 0.25).abs() < 1e-15);
        let big = t([1, 2, 1, 1, 1], &[1000.0, -1000.0]);
        let y = softmax2(&big).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(softmax2(&t([1, 3, 1, 1, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor5::full([2, 8, 2, 2, 2], 1.0);
        let b = Tensor5::full([2, 16, 2, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 24, 2, 2, 2]);
        assert_eq!(c.at(1, 7, 0, 0, 0), 1.0);
        assert_eq!(c.at(1, 8, 0, 0, 0), 2.0);
        let (ga, gb) = concat_backward(&c, 8).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
        assert!(concat_channels(&a, &Tensor5::zeros([2, 1, 2, 2, 3])).is_err());
    }

    #[test]
    fn add_identity_and_mismatch() {
        let x = t([1, 1, 1, 1, 3], &[1.0, -2.0, 3.5]);
        assert_eq!(add(&x, &Tensor5::zeros(x.shape())).unwrap(), x);
        assert!(add(&x, &Tensor5::zeros([1, 1, 1, 3, 1])).is_err());
    }

    #[test]
    fn tile_roundtrip() {
        let x = t([1, 2, 1, 1, 1], &[1.0, 2.0]);
        let y = tile_channels(&x, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let g = tile_channels_backward(&Tensor5::full([1, 6, 1, 1, 1], 1.0), 2);
        assert_eq!(g.data(), &[3.0, 3.0]);
    }
}
