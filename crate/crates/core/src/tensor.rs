//! Dense row-major `f32` tensors, a seeded generator, and the numeric kernels
//! every layer is built from.
//!
//! Kernels treat the last dimension as the channel axis and flatten all leading
//! dimensions into rows, so `[b, n, c]` and `[b, n, k, c]` inputs share one code
//! path. Reductions accumulate in `f64` in a fixed order and store `f32`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::new(vec![rows.len(), cols], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last (channel) dimension; 0 for a rank-0 tensor.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Number of rows when every dimension but the last is flattened.
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 0,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// Root-mean-square over all elements; 0 for an empty tensor.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.sum_sq() / self.data.len() as f64).sqrt()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.fill(value);
    }

    /// Copies out sample `i` along the first dimension.
    pub fn index_first(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyInput("stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Seeded generator. Every stochastic step in the crate draws from one of these,
/// so a seed fixes a whole run.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.inner.gen::<f32>()
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }
}

fn check_inner(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() == 0 || w.rank() != 2 || x.channels() != w.shape()[1] {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    Ok((x.rows(), w.shape()[1], w.shape()[0]))
}

fn out_shape(x: &Tensor, c_out: usize) -> Vec<usize> {
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = c_out;
    shape
}

/// `out[.., o] = Σ_i w[o, i]·x[.., i] + bias[o]`.
pub fn affine_map(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, c_in, c_out) = check_inner("affine_map", x, w)?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("affine_map bias", w.shape(), b.shape()));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * c_out);
    for r in 0..rows {
        let xr = &xd[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let wr = &wd[o * c_in..(o + 1) * c_in];
            let acc = bias.map_or(0.0, |b| f64::from(b.data()[o])) + lane_sum(xr, wr, |a, b| a * b);
            out.push(acc as f32);
        }
    }
    Tensor::new(out_shape(x, c_out), out)
}

const LANES: usize = 8;

/// `Σ_i f(a[i], b[i])` in f64 over eight interleaved partial sums combined in a
/// fixed order, so results do not depend on the target's vector width.
#[inline]
fn lane_sum(a: &[f32], b: &[f32], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += f(f64::from(x[l]), f64::from(y[l]));
        }
    }
    for (l, (x, y)) in ra.iter().zip(rb).enumerate() {
        lanes[l] += f(f64::from(*x), f64::from(*y));
    }
    lanes.iter().sum()
}

/// `out[.., o] = -Σ_i |x[.., i] - w[o, i]|`.
pub fn pairwise_l1_neg(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (rows, c_in, c_out) = check_inner("pairwise_l1_neg", x, w)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * c_out);
    for r in 0..rows {
        let xr = &xd[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let wr = &wd[o * c_in..(o + 1) * c_in];
            out.push(-lane_sum(xr, wr, |a, b| (a - b).abs()) as f32);
        }
    }
    Tensor::new(out_shape(x, c_out), out)
}

/// Max over the middle axis of a `[groups, points, channels]` tensor.
///
/// Returns the pooled `[groups, channels]` tensor and, per output element, the
/// winning point index. Ties go to the lowest index.
pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::shape("global_max_pool", x.shape(), &[0, 0, 0]));
    }
    let (groups, points, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if points == 0 {
        return Err(Error::EmptyInput("global_max_pool"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(groups * c);
    let mut arg = Vec::with_capacity(groups * c);
    for g in 0..groups {
        let base = g * points * c;
        let first = &xd[base..base + c];
        let mut best: Vec<f32> = first.to_vec();
        let mut best_idx = vec![0usize; c];
        for p in 1..points {
            let row = &xd[base + p * c..base + (p + 1) * c];
            for ch in 0..c {
                if row[ch] > best[ch] {
                    best[ch] = row[ch];
                    best_idx[ch] = p;
                }
            }
        }
        out.extend_from_slice(&best);
        arg.extend_from_slice(&best_idx);
    }
    Ok((Tensor::new(vec![groups, c], out)?, arg))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::EmptyInput("softmax_cross_entropy"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let ld = logits.data();
    let mut grad = Vec::with_capacity(b * k);
    let mut loss = 0.0f64;
    for (row, &label) in ld.chunks_exact(k).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - f64::from(row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(((e / sum - onehot) / b as f64) as f32);
        }
    }
    Ok(((loss / b as f64) as f32, Tensor::new(vec![b, k], grad)?))
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.channels().max(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    },
                )
                .0
        })
        .collect()
}
