//! Gradient-free numeric kernels.
//!
//! The autodiff tape records calls into these; the pruned inference engine
//! calls them directly.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv stride must be >= 1"));
        }
        let ph = h + 2 * padding;
        let pw = w + 2 * padding;
        if ph < kh || pw < kw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeometry {
            cin,
            kh,
            kw,
            h,
            w,
            stride,
            padding,
            h_out: (ph - kh) / stride + 1,
            w_out: (pw - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, h_out*w_out]`.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, img: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.w_out + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if cin != wcin {
        return Err(Error::dim(format!(
            "conv input has {cin} channels, weight expects {wcin}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::dim(format!(
                "conv bias has {} entries for {cout} output channels",
                b.numel()
            )));
        }
    }
    Ok((n, cout, ConvGeometry::new(cin, h, wd, kh, kw, stride, padding)?))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv_geometry(x, w, bias, stride, padding)?;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = cout * g.col_cols();
    let mut out = vec![T::zero(); n * out_sz];
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for i in 0..n {
        im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut col);
        let dst = &mut out[i * out_sz..(i + 1) * out_sz];
        T::gemm(
            cout,
            g.col_rows(),
            g.col_cols(),
            T::one(),
            w.data(),
            false,
            &col,
            false,
            T::zero(),
            dst,
        );
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new([n, cout, g.h_out, g.w_out], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let (n, cout, g) = conv_geometry(x, w, None, stride, padding)?;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = cout * g.col_cols();
    let mut dx = want_input.then(|| vec![T::zero(); x.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); w.numel()]);
    let mut db = want_bias.then(|| vec![T::zero(); cout]);
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for i in 0..n {
        let dyi = &dy.data()[i * out_sz..(i + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut col);
            T::gemm(
                cout,
                g.col_cols(),
                g.col_rows(),
                T::one(),
                dyi,
                false,
                &col,
                true,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                g.col_rows(),
                cout,
                g.col_cols(),
                T::one(),
                w.data(),
                true,
                dyi,
                false,
                T::zero(),
                &mut col,
            );
            col2im(&col, &g, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyi.chunks(g.col_cols()).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum();
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new([cout], d)).transpose()?,
    })
}

/// `y = x W^T + b` for `x: [n, din]`, `W: [dout, din]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din) = x.dims2()?;
    let (dout, wdin) = w.dims2()?;
    if din != wdin {
        return Err(Error::dim(format!("linear input width {din}, weight expects {wdin}")));
    }
    let mut out = vec![T::zero(); n * dout];
    T::gemm(
        n,
        din,
        dout,
        T::one(),
        x.data(),
        false,
        w.data(),
        true,
        T::zero(),
        &mut out,
    );
    if let Some(b) = bias {
        if b.numel() != dout {
            return Err(Error::dim(format!(
                "linear bias has {} entries for width {dout}",
                b.numel()
            )));
        }
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v = *v + bv);
        }
    }
    Tensor::new([n, dout], out)
}

fn shuffle_dims(shape: &[usize], s: usize) -> Result<(usize, usize, usize, usize)> {
    let [n, c, h, w] = *shape else {
        return Err(Error::dim(format!("pixel shuffle needs rank 4, got {shape:?}")));
    };
    if s == 0 || c % (s * s) != 0 {
        return Err(Error::dim(format!(
            "pixel shuffle: {c} channels not divisible by {s}^2"
        )));
    }
    Ok((n, c, h, w))
}

/// Depth-to-space: input channel `c*s*s + i*s + j` at `(h, w)` lands on
/// output channel `c` at `(h*s + i, w*s + j)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = shuffle_dims(x.shape(), s)?;
    let oc = c / (s * s);
    let (oh, ow) = (h * s, w * s);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for co in 0..oc {
            for i in 0..s {
                for j in 0..s {
                    let ci = co * s * s + i * s + j;
                    let plane = &src[((b * c + ci) * h) * w..((b * c + ci) * h + h) * w];
                    for y in 0..h {
                        let dst_row = ((b * oc + co) * oh + y * s + i) * ow;
                        for xw in 0..w {
                            out[dst_row + xw * s + j] = plane[y * w + xw];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, oc, oh, ow], out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::dim(format!("pixel unshuffle: {h}x{w} not divisible by {s}")));
    }
    let (ih, iw) = (h / s, w / s);
    let oc = c * s * s;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ci in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let co = ci * s * s + i * s + j;
                    for y in 0..ih {
                        for xw in 0..iw {
                            out[((b * oc + co) * ih + y) * iw + xw] =
                                src[((b * c + ci) * h + y * s + i) * w + xw * s + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, oc, ih, iw], out)
}

/// Multiplies every `[h, w]` plane of `x: [n, c, h, w]` by `scale[n, c]`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.numel() != n * c || scale.shape()[0] != n {
        return Err(Error::dim(format!(
            "channel scale {:?} does not match features {:?}",
            scale.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (plane, &s) in out.chunks_mut(hw).zip(scale.data()) {
        plane.iter_mut().for_each(|v| *v = *v * s);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Copies the listed channels of `x: [n, c, h, w]` into a compact tensor.
pub fn gather_channels<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if idx.is_empty() || idx.iter().any(|&i| i >= c) {
        return Err(Error::dim(format!("bad channel selection for {c} channels")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * idx.len() * hw);
    for b in 0..n {
        for &ci in idx {
            let off = (b * c + ci) * hw;
            out.extend_from_slice(&x.data()[off..off + hw]);
        }
    }
    Tensor::new([n, idx.len(), h, w], out)
}

/// Adds the channels of compact `src: [n, idx.len(), h, w]` into `dst` at `idx`.
pub fn scatter_add_channels<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, idx: &[usize]) -> Result<()> {
    let (n, c, h, w) = dst.dims4()?;
    let (sn, sc, sh, sw) = src.dims4()?;
    if sn != n || sc != idx.len() || sh != h || sw != w || idx.iter().any(|&i| i >= c) {
        return Err(Error::dim(format!(
            "scatter of {:?} into {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    let hw = h * w;
    let d = dst.data_mut();
    for b in 0..n {
        for (k, &ci) in idx.iter().enumerate() {
            let s = &src.data()[(b * sc + k) * hw..(b * sc + k + 1) * hw];
            let o = &mut d[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            o.iter_mut().zip(s).for_each(|(a, &v)| *a = *a + v);
        }
    }
    Ok(())
}
