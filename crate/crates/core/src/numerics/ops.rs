//! Forward-only tensor operations. The tape composes these same kernels and
//! adds the reverse pass; tests use these directly as the reference surface.

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<E: Element>(x: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Softmax over the middle extent of an (outer, d, inner) view, with the
/// running maximum subtracted so large magnitudes cannot overflow.
pub(crate) fn softmax_raw<E: Element>(x: &[E], outer: usize, d: usize, inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * d + j) * inner + i;
            let mut m = x[idx(0)];
            for j in 1..d {
                if x[idx(j)] > m {
                    m = x[idx(j)];
                }
            }
            let mut z = E::zero();
            for j in 0..d {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                z = z + e;
            }
            for j in 0..d {
                out[idx(j)] = out[idx(j)] / z;
            }
        }
    }
    out
}

pub(crate) fn layer_norm_raw<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    outer: usize,
    c: usize,
    eps: f64,
) -> Vec<E> {
    let eps = E::from_f64(eps);
    let inv_c = E::from_f64(1.0 / c as f64);
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        let row = &x[o * c..(o + 1) * c];
        let mean = row.iter().copied().sum::<E>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_c;
        let rstd = (var + eps).sqrt().recip();
        for j in 0..c {
            out[o * c + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        (E::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn ensure_finite<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite input value"))
    }
}

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape("matmul", format!("{m}x{ka} times {kb}x{n}")));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, ka, n))
}

pub fn transpose2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = x.dims2()?;
    Tensor::new(vec![c, r], transpose_raw(x.data(), r, c))
}

/// Softmax along `axis` of a tensor of any rank.
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= x.shape().len() {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.shape())));
    }
    ensure_finite("softmax", x)?;
    let outer: usize = x.shape()[..axis].iter().product();
    let d = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    Tensor::new(x.shape().to_vec(), softmax_raw(x.data(), outer, d, inner))
}

/// Normalizes the last axis to zero mean and unit variance, then applies the
/// per-feature scale and shift.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("feature extent {c}, gamma {}, beta {}", gamma.numel(), beta.numel()),
        ));
    }
    ensure_finite("layer_norm", x)?;
    let outer = x.numel() / c;
    Tensor::new(
        x.shape().to_vec(),
        layer_norm_raw(x.data(), gamma.data(), beta.data(), outer, c, eps),
    )
}

pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape().to_vec(), |i| gelu_scalar(x.data()[i]))
}

pub fn sigmoid<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape().to_vec(), |i| sigmoid_scalar(x.data()[i]))
}

/// Mean over the spatial extents of a (C, H, W) map, one value per channel.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::shape("global_avg_pool", format!("expected rank 3, got {other:?}"))),
    };
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = E::from_f64(1.0 / hw as f64);
    let data = (0..c)
        .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().copied().sum::<E>() * inv)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn mean_all<E: Element>(x: &Tensor<E>) -> E {
    debug_assert!(x.numel() > 0);
    x.data().iter().copied().sum::<E>() * E::from_f64(1.0 / x.numel() as f64)
}

/// Mixes a stack of three aligned (C, H, W) maps with one shared scalar weight
/// per stack slice plus one shared bias: out = w0*s0 + w1*s1 + w2*s2 + b.
pub fn fusion_conv_311<E: Element>(
    stack: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (d, c, h, wd) = match stack.shape() {
        [d, c, h, w] => (*d, *c, *h, *w),
        other => return Err(Error::shape("fusion_conv_311", format!("expected rank 4, got {other:?}"))),
    };
    if d != 3 || w.numel() != 3 || b.numel() != 1 {
        return Err(Error::shape(
            "fusion_conv_311",
            format!("stack depth {d}, weights {}, bias {}", w.numel(), b.numel()),
        ));
    }
    let plane = c * h * wd;
    let (w0, w1, w2) = (w.data()[0], w.data()[1], w.data()[2]);
    let bias = b.data()[0];
    let s = stack.data();
    let data = (0..plane)
        .map(|i| w0 * s[i] + w1 * s[plane + i] + w2 * s[2 * plane + i] + bias)
        .collect();
    Tensor::new(vec![c, h, wd], data)
}

/// Mean binary cross-entropy evaluated directly on logits in the overflow-safe
/// fused form. Targets must be exactly 0 or 1.
pub fn bce_with_logits<E: Element>(logits: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    if logits.numel() == 0 {
        return Err(Error::shape("bce_with_logits", "empty input"));
    }
    ensure_finite("bce_with_logits", logits)?;
    for &t in target.data() {
        if t != E::zero() && t != E::one() {
            return Err(Error::Argument(format!("bce target entry {t} is not 0 or 1")));
        }
    }
    let total: E = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(E::zero()) - z * y + (E::one() + (-z.abs()).exp()).ln())
        .sum();
    Ok(total * E::from_f64(1.0 / logits.numel() as f64))
}
