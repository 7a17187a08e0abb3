use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `x > 0`; the derivative at exactly 0 is taken as 0.
///
/// `x` may be either the pre-activation or the ReLU output, since both are
/// positive at the same positions.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::invalid(format!(
            "relu grad shape {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Argmax bookkeeping of a 2×2 max-pool, one flat input index per output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 3],
    pub argmax: Vec<usize>,
}

/// Disjoint 2×2 max-pool. Ties go to the first window element in row-major
/// order.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (h, w, c) = x.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max-pool needs even spatial dims, got {h}×{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut argmax = Vec::with_capacity(ho * wo * c);
    for r in 0..ho {
        for q in 0..wo {
            for k in 0..c {
                let mut best = (2 * r * w + 2 * q) * c + k;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * r + dr) * w + 2 * q + dc) * c + k;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[ho, wo, c], out)?,
        PoolIndices {
            input_shape: [h, w, c],
            argmax,
        },
    ))
}

/// Routes each pooled gradient back to its recorded argmax position.
pub fn maxpool_backward<T: Scalar>(idx: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != idx.argmax.len() {
        return Err(Error::invalid(format!(
            "pool grad has {} elements, expected {}",
            grad_out.len(),
            idx.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&idx.input_shape);
    let d = gx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(gx)
}

/// Channel concatenation with `a`'s channels first.
pub fn concat_depth<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, ca) = a.hwc()?;
    let (hb, wb, cb) = b.hwc()?;
    if (h, w) != (hb, wb) {
        return Err(Error::invalid(format!(
            "concat spatial mismatch: {h}×{w} vs {hb}×{wb}"
        )));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(&[h, w, ca + cb], out)
}

/// Splits a concatenated gradient back into the `a` part (first `channels_a`
/// channels) and the `b` part.
pub fn concat_depth_backward<T: Scalar>(
    grad: &Tensor<T>,
    channels_a: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = grad.hwc()?;
    if channels_a > c {
        return Err(Error::invalid(format!(
            "cannot split {channels_a} channels out of {c}"
        )));
    }
    let cb = c - channels_a;
    let mut ga = Vec::with_capacity(h * w * channels_a);
    let mut gb = Vec::with_capacity(h * w * cb);
    for px in grad.data().chunks_exact(c) {
        ga.extend_from_slice(&px[..channels_a]);
        gb.extend_from_slice(&px[channels_a..]);
    }
    Ok((
        Tensor::new(&[h, w, channels_a], ga)?,
        Tensor::new(&[h, w, cb], gb)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Inverted dropout. In train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`; infer mode is the
/// identity. The returned mask holds the per-element scale (`None` for
/// identity).
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == DropoutMode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape(), out)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => {
            let d = grad_out.data().iter().zip(m).map(|(&g, &s)| g * s).collect();
            Tensor::new(grad_out.shape(), d)
        }
        Some(m) => Err(Error::invalid(format!(
            "dropout mask has {} elements, grad has {}",
            m.len(),
            grad_out.len()
        ))),
    }
}

/// Softmax over the trailing axis, with max subtraction.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.channels().max(1);
    let mut out = logits.data().to_vec();
    for px in out.chunks_exact_mut(k) {
        let m = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in px.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(logits.shape(), out).expect("shape preserved")
}
