use rayon::prelude::*;

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per row chunk.
const CHUNK_ELEMS: usize = 1 << 20;

/// Kernels and biases of one convolution (or transposed convolution) layer.
///
/// `kernels` has shape `[kh, kw, in_channels, out_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernels: Tensor<T>,
    pub biases: Vec<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Gradients of a convolution with respect to its input, kernels and biases.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        kernels: Tensor<T>,
        biases: Vec<T>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::invalid(format!(
                "kernel tensor must be rank 4, got {:?}",
                kernels.shape()
            )));
        }
        if biases.len() != kernels.shape()[3] {
            return Err(Error::invalid(format!(
                "{} biases for {} output channels",
                biases.len(),
                kernels.shape()[3]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(Self {
            kernels,
            biases,
            stride,
            padding,
        })
    }

    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernels: Tensor::zeros(&[kh, kw, cin, cout]),
            biases: vec![T::zero(); cout],
            stride: (stride, stride),
            padding: (pad, pad),
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[0], self.kernels.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    /// Output spatial size for an `h × w` input:
    /// `out = (in + 2·pad − kernel)/stride + 1`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let dim = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let span = n + 2 * p;
            if span < k || (span - k) % s != 0 {
                return Err(Error::invalid(format!(
                    "input extent {n} with pad {p} does not tile kernel {k} at stride {s}"
                )));
            }
            Ok((span - k) / s + 1)
        };
        Ok((
            dim(h, kh, self.stride.0, self.padding.0)?,
            dim(w, kw, self.stride.1, self.padding.1)?,
        ))
    }
}

struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    sr: usize,
    sc: usize,
    pr: usize,
    pc: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.wout * self.patch()).max(1)).clamp(1, self.hout.max(1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sr == 1 && self.sc == 1 && self.pr == 0 && self.pc == 0
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Geometry> {
    let (h, w, c) = x.hwc()?;
    if c != p.in_channels() {
        return Err(Error::invalid(format!(
            "input has {c} channels, kernel expects {}",
            p.in_channels()
        )));
    }
    let (hout, wout) = p.output_size(h, w)?;
    let (kh, kw) = p.kernel_size();
    Ok(Geometry {
        h,
        w,
        c,
        kh,
        kw,
        sr: p.stride.0,
        sc: p.stride.1,
        pr: p.padding.0,
        pc: p.padding.1,
        hout,
        wout,
    })
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, r0: usize, r1: usize, cols: &mut [T]) {
    let patch = g.patch();
    for r in r0..r1 {
        for q in 0..g.wout {
            let row = &mut cols[((r - r0) * g.wout + q) * patch..][..patch];
            for i in 0..g.kh {
                let xr = (r * g.sr + i) as isize - g.pr as isize;
                for j in 0..g.kw {
                    let xc = (q * g.sc + j) as isize - g.pc as isize;
                    let dst = &mut row[(i * g.kw + j) * g.c..][..g.c];
                    if xr < 0 || xc < 0 || xr as usize >= g.h || xc as usize >= g.w {
                        dst.fill(T::zero());
                    } else {
                        let src = (xr as usize * g.w + xc as usize) * g.c;
                        dst.copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, r0: usize, r1: usize, grad_x: &mut [T]) {
    let patch = g.patch();
    for r in r0..r1 {
        for q in 0..g.wout {
            let row = &cols[((r - r0) * g.wout + q) * patch..][..patch];
            for i in 0..g.kh {
                let xr = (r * g.sr + i) as isize - g.pr as isize;
                if xr < 0 || xr as usize >= g.h {
                    continue;
                }
                for j in 0..g.kw {
                    let xc = (q * g.sc + j) as isize - g.pc as isize;
                    if xc < 0 || xc as usize >= g.w {
                        continue;
                    }
                    let dst = (xr as usize * g.w + xc as usize) * g.c;
                    let src = &row[(i * g.kw + j) * g.c..][..g.c];
                    for (d, &s) in grad_x[dst..dst + g.c].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D convolution:
/// `out[r, q, k] = Σ_c Σ_i Σ_j x[r·s+i−pad, q·s+j−pad, c]·w[i, j, c, k] + b[k]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = geometry(x, p)?;
    x.ensure_finite("convolution input")?;
    let k = p.out_channels();
    let patch = g.patch();
    let wmat = MatRef::row_major(p.kernels.data(), patch, k);
    let mut out = vec![T::zero(); g.hout * g.wout * k];
    let xd = x.data();

    if g.is_pointwise() {
        gemm(MatRef::row_major(xd, g.h * g.w, g.c), wmat, T::zero(), &mut out, k, 1);
    } else {
        let rows = g.rows_per_chunk();
        out.par_chunks_mut(rows * g.wout * k)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let r0 = ci * rows;
                let r1 = (r0 + rows).min(g.hout);
                let npix = (r1 - r0) * g.wout;
                let mut cols = vec![T::zero(); npix * patch];
                im2col(xd, &g, r0, r1, &mut cols);
                gemm(
                    MatRef::row_major(&cols, npix, patch),
                    wmat,
                    T::zero(),
                    chunk,
                    k,
                    1,
                );
            });
    }
    for px in out.chunks_exact_mut(k) {
        for (v, &b) in px.iter_mut().zip(&p.biases) {
            *v = *v + b;
        }
    }
    Tensor::new(&[g.hout, g.wout, k], out)
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, p)?;
    let k = p.out_channels();
    if grad_out.shape() != [g.hout, g.wout, k] {
        return Err(Error::invalid(format!(
            "grad_out shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            [g.hout, g.wout, k]
        )));
    }
    let patch = g.patch();
    let go = grad_out.data();
    let wmat = MatRef::row_major(p.kernels.data(), patch, k);
    let mut grad_w = vec![T::zero(); patch * k];
    let mut grad_x = vec![T::zero(); g.h * g.w * g.c];

    let mut grad_b = vec![T::zero(); k];
    for px in go.chunks_exact(k) {
        for (b, &v) in grad_b.iter_mut().zip(px) {
            *b = *b + v;
        }
    }

    if g.is_pointwise() {
        let npix = g.h * g.w;
        let xm = MatRef::row_major(x.data(), npix, g.c);
        let gm = MatRef::row_major(go, npix, k);
        gemm(xm.t(), gm, T::zero(), &mut grad_w, k, 1);
        gemm(gm, wmat.t(), T::zero(), &mut grad_x, g.c, 1);
    } else {
        let rows = g.rows_per_chunk();
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + rows).min(g.hout);
            let npix = (r1 - r0) * g.wout;
            cols.resize(npix * patch, T::zero());
            gcols.resize(npix * patch, T::zero());
            im2col(x.data(), &g, r0, r1, &mut cols);
            let gm = MatRef::row_major(&go[r0 * g.wout * k..r1 * g.wout * k], npix, k);
            let beta = if r0 == 0 { T::zero() } else { T::one() };
            gemm(
                MatRef::row_major(&cols, npix, patch).t(),
                gm,
                beta,
                &mut grad_w,
                k,
                1,
            );
            gemm(gm, wmat.t(), T::zero(), &mut gcols, patch, 1);
            col2im_add(&gcols, &g, r0, r1, &mut grad_x);
            r0 = r1;
        }
    }

    Ok(ConvGrads {
        grad_x: Tensor::new(&[g.h, g.w, g.c], grad_x)?,
        grad_w: Tensor::new(p.kernels.shape(), grad_w)?,
        grad_b,
    })
}

fn check_transposed<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.hwc()?;
    if p.kernel_size() != (2, 2) || p.stride != (2, 2) || p.padding != (0, 0) {
        return Err(Error::invalid(format!(
            "transposed convolution requires a 2×2 kernel, stride 2 and no cropping; got kernel {:?} stride {:?} crop {:?}",
            p.kernel_size(),
            p.stride,
            p.padding
        )));
    }
    if c != p.in_channels() {
        return Err(Error::invalid(format!(
            "input has {c} channels, transposed kernel expects {}",
            p.in_channels()
        )));
    }
    Ok((h, w, c))
}

/// 2×2 stride-2 transposed convolution: each input element scatters
/// `x[r, q, c]·w[i, j, c, k]` into `out[2r+i, 2q+j, k]`, then biases are added.
pub fn transposed_conv2x2_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = check_transposed(x, p)?;
    x.ensure_finite("transposed convolution input")?;
    let k = p.out_channels();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); ho * wo * k];
    let wd = p.kernels.data();
    let xm = MatRef::row_major(x.data(), h * w, c);
    for i in 0..2 {
        for j in 0..2 {
            let wij = MatRef::row_major(&wd[(i * 2 + j) * c * k..][..c * k], c, k);
            for r in 0..h {
                let xr = MatRef {
                    data: &xm.data[r * w * c..(r + 1) * w * c],
                    rows: w,
                    cols: c,
                    rs: c,
                    cs: 1,
                };
                let off = ((2 * r + i) * wo + j) * k;
                gemm(xr, wij, T::zero(), &mut out[off..], 2 * k, 1);
            }
        }
    }
    for px in out.chunks_exact_mut(k) {
        for (v, &b) in px.iter_mut().zip(&p.biases) {
            *v = *v + b;
        }
    }
    Tensor::new(&[ho, wo, k], out)
}

/// Adjoint of [`transposed_conv2x2_forward`]; `grad_x` is the stride-2
/// convolution of `grad_out` with the same kernels.
pub fn transposed_conv2x2_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (h, w, c) = check_transposed(x, p)?;
    let k = p.out_channels();
    let (ho, wo) = (2 * h, 2 * w);
    if grad_out.shape() != [ho, wo, k] {
        return Err(Error::invalid(format!(
            "grad_out shape {:?} does not match transposed output {:?}",
            grad_out.shape(),
            [ho, wo, k]
        )));
    }
    let go = grad_out.data();
    let wd = p.kernels.data();
    let mut grad_x = vec![T::zero(); h * w * c];
    let mut grad_w = vec![T::zero(); 4 * c * k];
    let mut grad_b = vec![T::zero(); k];
    for px in go.chunks_exact(k) {
        for (b, &v) in grad_b.iter_mut().zip(px) {
            *b = *b + v;
        }
    }
    let xd = x.data();
    for i in 0..2 {
        for j in 0..2 {
            let wij = MatRef::row_major(&wd[(i * 2 + j) * c * k..][..c * k], c, k);
            let gw = &mut grad_w[(i * 2 + j) * c * k..][..c * k];
            for r in 0..h {
                let off = ((2 * r + i) * wo + j) * k;
                let gr = MatRef {
                    data: &go[off..],
                    rows: w,
                    cols: k,
                    rs: 2 * k,
                    cs: 1,
                };
                let xr = MatRef::row_major(&xd[r * w * c..(r + 1) * w * c], w, c);
                gemm(gr, wij.t(), T::one(), &mut grad_x[r * w * c..], c, 1);
                gemm(xr.t(), gr, T::one(), gw, k, 1);
            }
        }
    }
    Ok(ConvGrads {
        grad_x: Tensor::new(&[h, w, c], grad_x)?,
        grad_w: Tensor::new(p.kernels.shape(), grad_w)?,
        grad_b,
    })
}
