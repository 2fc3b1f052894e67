//! Numeric primitives shared by the cached and reference forward paths.
//!
//! Every reduction runs in ascending index order so that a given token's
//! activations are bit-identical no matter how tokens are grouped into a
//! batch.

use super::ModelError;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>, ModelError> {
    if v.is_empty() {
        return Err(ModelError::EmptyInput("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Argmax with ties resolved towards the lowest token id.
pub fn greedy_next(scores: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best as u32
}

/// `out[j] = bias[j] + sum_i weight[j * in + i] * x[i]`, weight stored row-major `[out][in]`.
pub(crate) fn affine(weight: &[f32], bias: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    debug_assert_eq!(weight.len(), n_in * out.len());
    for (j, o) in out.iter_mut().enumerate() {
        let row = &weight[j * n_in..(j + 1) * n_in];
        *o = bias[j] + dot(row, x);
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub(crate) fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    const EPS: f32 = 1e-5;
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let inv = 1.0 / (var + EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
