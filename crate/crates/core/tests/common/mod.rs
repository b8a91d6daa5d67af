//! f64 reference implementations and finite differences shared by the test targets.
#![allow(dead_code)]

use samlp::Tensor;

pub const H: f64 = 1e-6;

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// max |a − b| relative to max |b|.
pub fn rel_err(analytic: &Tensor, numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (f64::from(a) - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn linear64(x: &[f64], w: &[f64], b: Option<&[f64]>, c_in: usize, c_out: usize) -> Vec<f64> {
    let rows = x.len() / c_in;
    let mut y = vec![0.0; rows * c_out];
    for r in 0..rows {
        for o in 0..c_out {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..c_in {
                acc += x[r * c_in + i] * w[o * c_in + i];
            }
            y[r * c_out + o] = acc;
        }
    }
    y
}

pub fn batch_norm64(x: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> Vec<f64> {
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let mean = (0..rows).map(|r| x[r * c + ch]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (x[r * c + ch] - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            y[r * c + ch] = gamma[ch] * (x[r * c + ch] - mean) / (var + 1e-5).sqrt() + beta[ch];
        }
    }
    y
}
