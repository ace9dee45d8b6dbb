//! Scalar helpers over `libm` so the core stays `no_std`.

use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Sum that does not depend on the order of `values`: the values are sorted
/// before accumulation, so any permutation of the input gives the same bits.
pub fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// Row softmax of `scores / temperature`, normalised with [`order_free_sum`].
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|s| s / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| exp(s / temperature - max)).collect();
    let total = order_free_sum(&exps);
    exps.iter().map(|e| e / total).collect()
}

/// `ln Σ exp(x)` computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| exp(x - max)).sum();
    max + ln(s)
}

/// Mean and sample standard deviation (`n - 1` denominator). The deviation is
/// `None` for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(sqrt(var)))
}
