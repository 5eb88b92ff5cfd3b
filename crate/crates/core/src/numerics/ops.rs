use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(
            "matmul",
            format!("expected matrices, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions {k} and {k2} differ"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Standard normal CDF through the error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x * Phi(x)`. Evaluated in double precision regardless of `F`.
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    F::from_f64(xf * std_normal_cdf(xf))
}

pub(crate) fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    F::from_f64(std_normal_cdf(xf) + xf * pdf)
}

pub fn gelu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// In-place max-shifted softmax over a slice.
pub fn softmax_slice<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

/// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn softmax<F: Real>(v: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    match (v.rank(), axis) {
        (1, 0) | (2, 1) => {
            let mut out = v.clone();
            for r in 0..out.rows() {
                softmax_slice(out.row_mut(r));
            }
            Ok(out)
        }
        (2, 0) => {
            let t = softmax(&v.transpose(), 1)?;
            Ok(t.transpose())
        }
        _ => Err(Error::dim(
            "softmax",
            format!("axis {axis} invalid for shape {:?}", v.shape()),
        )),
    }
}

/// Per-row normalisation to zero mean and unit variance, then `gain`/`bias`.
pub fn layer_norm_rows<F: Real>(
    x: &Tensor<F>,
    gain: &[F],
    bias: &[F],
    eps: F,
) -> Result<Tensor<F>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim(
            "layer_norm",
            format!("{} columns, gain {} bias {}", c, gain.len(), bias.len()),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv) = row_moments(x.row(r), eps);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (*o - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

/// Mean and inverse standard deviation of a row.
pub(crate) fn row_moments<F: Real>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_usize(row.len());
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, F::one() / (var + eps).sqrt())
}
