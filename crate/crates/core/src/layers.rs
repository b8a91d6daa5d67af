//! Forward/backward units.
//!
//! The three linear families share one calling convention: a free `*_forward`
//! function returns the output plus a context value, and the matching
//! `*_backward` consumes that context. [`Linear`] wraps all three behind the
//! [`Layer`] trait and keeps the context between the two calls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shiftquant::{self, PackedShiftTensor};
use crate::tensor::{affine_map, global_max_pool, pairwise_l1_neg, Rng, Tensor};

/// Smallest shift exponent; `2^-15` is the smallest representable magnitude.
pub const MIN_EXPONENT: i32 = -15;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Mul,
    Shift,
    Adder,
    Norm,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Mul => "mul",
            LayerKind::Shift => "shift",
            LayerKind::Adder => "adder",
            LayerKind::Norm => "norm",
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one trainable tensor and its latest gradient.
pub struct ParamRef<'a> {
    pub name: String,
    pub kind: LayerKind,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;
    /// Consumes the context stored by the preceding `forward`.
    fn backward(&mut self, dy: &Tensor) -> Result<Tensor>;
}

// ---------------------------------------------------------------------------
// Shift quantization

pub(crate) fn pow2(p: i32) -> f32 {
    debug_assert!((MIN_EXPONENT..=0).contains(&p));
    f32::from_bits(((127 + p) as u32) << 23)
}

/// Quantizes one weight to `(sign, exponent)`.
///
/// The weight is clamped to `[-1, 1]`, then `p = round(log2|w|)` with ties away
/// from zero, clamped to `[-15, 0]`. Zero (and NaN) map to `(+1, -15)`.
pub fn quantize_value(w: f32) -> (i8, i8) {
    let c = if w.is_nan() { 0.0 } else { w.clamp(-1.0, 1.0) };
    if c == 0.0 {
        return (1, MIN_EXPONENT as i8);
    }
    let sign = if c < 0.0 { -1 } else { 1 };
    let p = f64::from(c.abs()).log2().round().clamp(f64::from(MIN_EXPONENT), 0.0);
    (sign, p as i8)
}

/// Sign/exponent pair and the dequantized tensor `w_q = s·2^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedShift {
    pub signs: Vec<i8>,
    pub exponents: Vec<i8>,
    pub w_q: Tensor,
}

pub fn quantize_shift(w_raw: &Tensor) -> QuantizedShift {
    let n = w_raw.len();
    let mut signs = Vec::with_capacity(n);
    let mut exponents = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for &w in w_raw.data() {
        let (s, p) = quantize_value(w);
        signs.push(s);
        exponents.push(p);
        values.push(f32::from(s) * pow2(i32::from(p)));
    }
    QuantizedShift {
        signs,
        exponents,
        w_q: Tensor::new(w_raw.shape().to_vec(), values).expect("same length"),
    }
}

/// Float master weights of a shift layer plus the cached quantization.
#[derive(Debug, Clone)]
pub struct ShiftWeights {
    pub w_raw: Tensor,
    quant: QuantizedShift,
}

impl ShiftWeights {
    pub fn new(w_raw: Tensor) -> Self {
        let quant = quantize_shift(&w_raw);
        ShiftWeights { w_raw, quant }
    }

    pub fn requantize(&mut self) -> &QuantizedShift {
        self.quant = quantize_shift(&self.w_raw);
        &self.quant
    }

    pub fn quantized(&self) -> &QuantizedShift {
        &self.quant
    }
}

#[derive(Debug, Clone)]
pub struct AdderWeights {
    pub w: Tensor,
}

// ---------------------------------------------------------------------------
// Shared linear backward kernels

/// `dx[r, i] = Σ_o dy[r, o]·w[o, i]`
fn backprop_input(dy: &Tensor, w: &Tensor, x_shape: &[usize]) -> Result<Tensor> {
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    if dy.channels() != c_out || dy.rows() * c_in != x_shape.iter().product::<usize>() {
        return Err(Error::shape("linear backward", dy.shape(), w.shape()));
    }
    let wd = w.data();
    let mut dx = Vec::with_capacity(dy.rows() * c_in);
    let mut acc = vec![0.0f64; c_in];
    for dyr in dy.data().chunks_exact(c_out) {
        acc.fill(0.0);
        for (o, &g) in dyr.iter().enumerate() {
            let g = f64::from(g);
            for (a, &wv) in acc.iter_mut().zip(&wd[o * c_in..(o + 1) * c_in]) {
                *a += g * f64::from(wv);
            }
        }
        dx.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// `dw[o, i] = Σ_r dy[r, o]·x[r, i]`, summed over rows in order.
fn backprop_weight(dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (c_out, c_in) = (dy.channels(), x.channels());
    if dy.rows() != x.rows() {
        return Err(Error::shape("linear weight grad", dy.shape(), x.shape()));
    }
    let mut acc = vec![0.0f64; c_out * c_in];
    for (dyr, xr) in dy
        .data()
        .chunks_exact(c_out.max(1))
        .zip(x.data().chunks_exact(c_in.max(1)))
    {
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = f64::from(g);
            for (a, &xv) in acc[o * c_in..(o + 1) * c_in].iter_mut().zip(xr) {
                *a += g * f64::from(xv);
            }
        }
    }
    Tensor::new(vec![c_out, c_in], acc.into_iter().map(|v| v as f32).collect())
}

fn column_sums(dy: &Tensor) -> Tensor {
    let c = dy.channels();
    let mut acc = vec![0.0f64; c];
    for row in dy.data().chunks_exact(c.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    Tensor::new(vec![c], acc.into_iter().map(|v| v as f32).collect()).expect("length c")
}

// ---------------------------------------------------------------------------
// Mul (baseline) layer

#[derive(Debug, Clone)]
pub struct MulContext {
    x: Tensor,
    w: Tensor,
}

pub fn mul_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, MulContext)> {
    let y = affine_map(x, w, bias)?;
    Ok((
        y,
        MulContext {
            x: x.clone(),
            w: w.clone(),
        },
    ))
}

/// Returns `(dx, dw, dbias)`.
pub fn mul_backward(dy: &Tensor, ctx: MulContext) -> Result<(Tensor, Tensor, Tensor)> {
    let dx = backprop_input(dy, &ctx.w, ctx.x.shape())?;
    let dw = backprop_weight(dy, &ctx.x)?;
    Ok((dx, dw, column_sums(dy)))
}

// ---------------------------------------------------------------------------
// Shift layer

#[derive(Debug, Clone)]
pub struct ShiftContext {
    x: Tensor,
    w_q: Tensor,
}

/// Re-quantizes the master weights, then `y = w_q·x`. No bias.
pub fn shift_forward(x: &Tensor, weights: &mut ShiftWeights) -> Result<(Tensor, ShiftContext)> {
    let w_q = weights.requantize().w_q.clone();
    let y = affine_map(x, &w_q, None)?;
    Ok((y, ShiftContext { x: x.clone(), w_q }))
}

/// Straight-through backward: `dx = dy·w_q`, `dw = dyᵀ·x` as if the quantizer
/// were the identity. Returns `(dx, dw)`.
pub fn shift_backward(dy: &Tensor, ctx: ShiftContext) -> Result<(Tensor, Tensor)> {
    let dx = backprop_input(dy, &ctx.w_q, ctx.x.shape())?;
    let dw = backprop_weight(dy, &ctx.x)?;
    Ok((dx, dw))
}

// ---------------------------------------------------------------------------
// Adder layer

#[derive(Debug, Clone)]
pub struct AdderContext {
    x: Tensor,
    w: Tensor,
}

/// Clip used on the input-gradient path: identity on `[-1, 1]`, saturating outside.
pub fn hard_clip(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

pub fn adder_forward(x: &Tensor, weights: &AdderWeights) -> Result<(Tensor, AdderContext)> {
    let y = pairwise_l1_neg(x, &weights.w)?;
    Ok((
        y,
        AdderContext {
            x: x.clone(),
            w: weights.w.clone(),
        },
    ))
}

/// Smoothed adder gradients. Returns `(dx, dw)` with
/// `dw[o, i] = Σ_r dy[r, o]·(x[r, i] - w[o, i])` and
/// `dx[r, i] = -Σ_o dy[r, o]·clip(x[r, i] - w[o, i])`.
pub fn adder_backward(dy: &Tensor, ctx: AdderContext) -> Result<(Tensor, Tensor)> {
    let AdderContext { x, w } = ctx;
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    if dy.channels() != c_out || dy.rows() != x.rows() {
        return Err(Error::shape("adder backward", dy.shape(), x.shape()));
    }
    let wd = w.data();
    let mut dw = vec![0.0f64; c_out * c_in];
    let mut dx = Vec::with_capacity(x.len());
    let mut dx_row = vec![0.0f64; c_in];
    for (dyr, xr) in dy
        .data()
        .chunks_exact(c_out.max(1))
        .zip(x.data().chunks_exact(c_in.max(1)))
    {
        dx_row.fill(0.0);
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = f64::from(g);
            let wr = &wd[o * c_in..(o + 1) * c_in];
            let dwr = &mut dw[o * c_in..(o + 1) * c_in];
            for (((dwv, dxv), &xv), &wv) in dwr.iter_mut().zip(dx_row.iter_mut()).zip(xr).zip(wr) {
                let diff = f64::from(xv) - f64::from(wv);
                *dwv += g * diff;
                *dxv -= g * hard_clip(diff);
            }
        }
        dx.extend(dx_row.iter().map(|&v| v as f32));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c_out, c_in], dw.into_iter().map(|v| v as f32).collect())?,
    ))
}

// ---------------------------------------------------------------------------
// Linear layer wrapper

#[derive(Debug, Clone)]
pub enum LinearOp {
    Mul { weight: Tensor, bias: Tensor },
    Shift(ShiftWeights),
    Adder(AdderWeights),
}

#[derive(Debug, Clone)]
enum LinearContext {
    Mul(MulContext),
    Shift(ShiftContext),
    Adder(AdderContext),
}

/// A linear-family layer of any kind with its gradients and pending context.
#[derive(Debug, Clone)]
pub struct Linear {
    op: LinearOp,
    grad_w: Tensor,
    grad_b: Option<Tensor>,
    ctx: Option<LinearContext>,
    fixed: Option<PackedShiftTensor>,
    saturations: usize,
}

/// Mul/shift init: uniform in `±1/√c_in`. Adder init: standard normal truncated to `[-2, 2]`.
pub fn init_weights(kind: LayerKind, c_in: usize, c_out: usize, rng: &mut Rng) -> Tensor {
    match kind {
        LayerKind::Adder => Tensor::from_fn(&[c_out, c_in], |_| loop {
            let v = rng.normal();
            if (-2.0..=2.0).contains(&v) {
                break v;
            }
        }),
        _ => {
            let bound = 1.0 / (c_in.max(1) as f32).sqrt();
            rng.uniform_tensor(&[c_out, c_in], -bound, bound)
        }
    }
}

impl Linear {
    pub fn new(kind: LayerKind, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        let w = init_weights(kind, c_in, c_out, rng);
        let op = match kind {
            LayerKind::Mul => LinearOp::Mul {
                weight: w,
                bias: Tensor::zeros(&[c_out]),
            },
            LayerKind::Shift => LinearOp::Shift(ShiftWeights::new(w)),
            LayerKind::Adder => LinearOp::Adder(AdderWeights { w }),
            LayerKind::Norm => return Err(Error::Config("norm is not a linear layer kind".into())),
        };
        Ok(Self::from_op(op))
    }

    pub fn from_op(op: LinearOp) -> Self {
        let (w_shape, has_bias) = match &op {
            LinearOp::Mul { weight, .. } => (weight.shape().to_vec(), true),
            LinearOp::Shift(s) => (s.w_raw.shape().to_vec(), false),
            LinearOp::Adder(a) => (a.w.shape().to_vec(), false),
        };
        let grad_b = has_bias.then(|| Tensor::zeros(&[w_shape[0]]));
        Linear {
            op,
            grad_w: Tensor::zeros(&w_shape),
            grad_b,
            ctx: None,
            fixed: None,
            saturations: 0,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LinearOp::Mul { .. } => LayerKind::Mul,
            LinearOp::Shift(_) => LayerKind::Shift,
            LinearOp::Adder(_) => LayerKind::Adder,
        }
    }

    pub fn op(&self) -> &LinearOp {
        &self.op
    }

    /// Trainable weight (for shift layers, the float master copy).
    pub fn weight(&self) -> &Tensor {
        match &self.op {
            LinearOp::Mul { weight, .. } => weight,
            LinearOp::Shift(s) => &s.w_raw,
            LinearOp::Adder(a) => &a.w,
        }
    }

    fn weight_mut(&mut self) -> &mut Tensor {
        match &mut self.op {
            LinearOp::Mul { weight, .. } => weight,
            LinearOp::Shift(s) => &mut s.w_raw,
            LinearOp::Adder(a) => &mut a.w,
        }
    }

    /// Weights as used in the forward pass (`w_q` for shift layers).
    pub fn effective_weight(&self) -> Tensor {
        match &self.op {
            LinearOp::Shift(s) => quantize_shift(&s.w_raw).w_q,
            _ => self.weight().clone(),
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match &self.op {
            LinearOp::Mul { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn grad_weight(&self) -> &Tensor {
        &self.grad_w
    }

    pub fn in_features(&self) -> usize {
        self.weight().shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight().shape()[0]
    }

    pub fn weight_count(&self) -> usize {
        self.weight().len()
    }

    pub fn bias_count(&self) -> usize {
        self.bias().map_or(0, Tensor::len)
    }

    /// Routes eval-mode forwards of a shift layer through the fixed-point kernel.
    pub fn attach_fixed_point(&mut self, packed: PackedShiftTensor) -> Result<()> {
        if self.kind() != LayerKind::Shift {
            return Err(Error::Usage(format!(
                "fixed-point codes can only be attached to shift layers, not {}",
                self.kind()
            )));
        }
        if packed.shape() != self.weight().shape() {
            return Err(Error::shape(
                "attach_fixed_point",
                packed.shape(),
                self.weight().shape(),
            ));
        }
        self.fixed = Some(packed);
        Ok(())
    }

    pub fn detach_fixed_point(&mut self) {
        self.fixed = None;
    }

    /// Saturation events seen by the fixed-point path since the layer was built.
    pub fn saturations(&self) -> usize {
        self.saturations
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        let kind = self.kind();
        let (weight, bias) = match &mut self.op {
            LinearOp::Mul { weight, bias } => (weight, Some(bias)),
            LinearOp::Shift(s) => (&mut s.w_raw, None),
            LinearOp::Adder(a) => (&mut a.w, None),
        };
        let mut out = vec![ParamRef {
            name: format!("{prefix}.weight"),
            kind,
            value: weight,
            grad: &self.grad_w,
        }];
        if let (Some(b), Some(gb)) = (bias, self.grad_b.as_ref()) {
            out.push(ParamRef {
                name: format!("{prefix}.bias"),
                kind,
                value: b,
                grad: gb,
            });
        }
        out
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight().clone()));
        if let Some(b) = self.bias() {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }

    pub fn load_state(&mut self, prefix: &str, lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<()> {
        let shape = self.weight().shape().to_vec();
        *self.weight_mut() = lookup(&format!("{prefix}.weight"), &shape)?;
        if let LinearOp::Mul { bias, .. } = &mut self.op {
            let shape = bias.shape().to_vec();
            *bias = lookup(&format!("{prefix}.bias"), &shape)?;
        }
        if let LinearOp::Shift(s) = &mut self.op {
            s.requantize();
        }
        Ok(())
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            if let Some(packed) = &self.fixed {
                let (y, saturated) = shiftquant::fixed_shift_forward(x, packed)?;
                self.saturations += saturated;
                self.ctx = None;
                return Ok(y);
            }
        }
        let (y, ctx) = match &mut self.op {
            LinearOp::Mul { weight, bias } => {
                let (y, c) = mul_forward(x, weight, Some(bias))?;
                (y, LinearContext::Mul(c))
            }
            LinearOp::Shift(s) => {
                let (y, c) = shift_forward(x, s)?;
                (y, LinearContext::Shift(c))
            }
            LinearOp::Adder(a) => {
                let (y, c) = adder_forward(x, a)?;
                (y, LinearContext::Adder(c))
            }
        };
        self.ctx = Some(ctx);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let ctx = self.ctx.take().ok_or(Error::ContextConsumed("linear"))?;
        let dx = match ctx {
            LinearContext::Mul(c) => {
                let (dx, dw, db) = mul_backward(dy, c)?;
                self.grad_w = dw;
                self.grad_b = Some(db);
                dx
            }
            LinearContext::Shift(c) => {
                let (dx, dw) = shift_backward(dy, c)?;
                self.grad_w = dw;
                dx
            }
            LinearContext::Adder(c) => {
                let (dx, dw) = adder_backward(dy, c)?;
                self.grad_w = dw;
                dx
            }
        };
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Batch norm

#[derive(Debug, Clone)]
struct NormContext {
    shape: Vec<usize>,
    // kept in f64: rounding x_hat to f32 visibly perturbs dX for small batches
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Per-channel normalization over every non-channel dimension.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    grad_gamma: Tensor,
    grad_beta: Tensor,
    ctx: Option<NormContext>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            grad_gamma: Tensor::zeros(&[channels]),
            grad_beta: Tensor::zeros(&[channels]),
            ctx: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: format!("{prefix}.gamma"),
                kind: LayerKind::Norm,
                value: &mut self.gamma,
                grad: &self.grad_gamma,
            },
            ParamRef {
                name: format!("{prefix}.beta"),
                kind: LayerKind::Norm,
                value: &mut self.beta,
                grad: &self.grad_beta,
            },
        ]
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }

    pub fn load_state(&mut self, prefix: &str, lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<()> {
        let c = [self.channels()];
        self.gamma = lookup(&format!("{prefix}.gamma"), &c)?;
        self.beta = lookup(&format!("{prefix}.beta"), &c)?;
        self.running_mean = lookup(&format!("{prefix}.running_mean"), &c)?;
        self.running_var = lookup(&format!("{prefix}.running_var"), &c)?;
        Ok(())
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        if x.channels() != c || x.rank() == 0 {
            return Err(Error::shape("batch_norm", x.shape(), self.gamma.shape()));
        }
        let rows = x.rows();
        let xd = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if rows <= 1 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let mut mean = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += f64::from(v);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = f64::from(v) - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let unbias = rows as f64 / (rows as f64 - 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = ((1.0 - BN_MOMENTUM) * f64::from(*rm) + BN_MOMENTUM * mean[ch]) as f32;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = ((1.0 - BN_MOMENTUM) * f64::from(*rv) + BN_MOMENTUM * var[ch] * unbias) as f32;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|&v| f64::from(v)).collect(),
                self.running_var.data().iter().map(|&v| f64::from(v)).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.gamma.data();
        let b = self.beta.data();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for row in xd.chunks_exact(c) {
            for ch in 0..c {
                let h = (f64::from(row[ch]) - mean[ch]) * inv_std[ch];
                x_hat.push(h);
                y.push((f64::from(g[ch]) * h + f64::from(b[ch])) as f32);
            }
        }
        self.ctx = Some(NormContext {
            shape: x.shape().to_vec(),
            x_hat,
            inv_std,
            batch_stats: mode == Mode::Train,
        });
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let ctx = self.ctx.take().ok_or(Error::ContextConsumed("batch_norm"))?;
        if dy.shape() != ctx.shape.as_slice() {
            return Err(Error::shape("batch_norm backward", dy.shape(), &ctx.shape));
        }
        let c = self.channels();
        let rows = dy.rows() as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (dyr, hr) in dy.data().chunks_exact(c).zip(ctx.x_hat.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += f64::from(dyr[ch]);
                sum_dy_xhat[ch] += f64::from(dyr[ch]) * hr[ch];
            }
        }
        let g = self.gamma.data();
        let mut dx = Vec::with_capacity(dy.len());
        for (dyr, hr) in dy.data().chunks_exact(c).zip(ctx.x_hat.chunks_exact(c)) {
            for ch in 0..c {
                let scale = f64::from(g[ch]) * ctx.inv_std[ch];
                let v = if ctx.batch_stats {
                    scale * (f64::from(dyr[ch]) - sum_dy[ch] / rows - hr[ch] * sum_dy_xhat[ch] / rows)
                } else {
                    scale * f64::from(dyr[ch])
                };
                dx.push(v as f32);
            }
        }
        self.grad_gamma = Tensor::new(vec![c], sum_dy_xhat.iter().map(|&v| v as f32).collect())?;
        self.grad_beta = Tensor::new(vec![c], sum_dy.iter().map(|&v| v as f32).collect())?;
        Tensor::new(dy.shape().to_vec(), dx)
    }
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Ok(x.map(|v| v.max(0.0)))
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or(Error::ContextConsumed("relu"))?;
        if mask.len() != dy.len() {
            return Err(Error::shape("relu backward", dy.shape(), &[mask.len()]));
        }
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(dy.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------
// Max pooling over points

/// Max over the second-to-last dimension: `[.., m, c] -> [.., c]`.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    ctx: Option<(Vec<usize>, Vec<usize>)>,
}

impl Layer for MaxPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(Error::shape("max_pool", x.shape(), &[0, 0]));
        }
        let r = x.rank();
        let (m, c) = (x.shape()[r - 2], x.shape()[r - 1]);
        let lead: Vec<usize> = x.shape()[..r - 2].to_vec();
        let groups: usize = lead.iter().product();
        let grouped = x.clone().reshape(&[groups, m, c])?;
        let (pooled, arg) = global_max_pool(&grouped)?;
        self.ctx = Some((x.shape().to_vec(), arg));
        let mut out_shape = lead;
        out_shape.push(c);
        pooled.reshape(&out_shape)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (in_shape, arg) = self.ctx.take().ok_or(Error::ContextConsumed("max_pool"))?;
        if dy.len() != arg.len() {
            return Err(Error::shape("max_pool backward", dy.shape(), &in_shape));
        }
        let r = in_shape.len();
        let (m, c) = (in_shape[r - 2], in_shape[r - 1]);
        let mut dx = Tensor::zeros(&in_shape);
        let dxd = dx.data_mut();
        for (j, (&g, &p)) in dy.data().iter().zip(&arg).enumerate() {
            let (group, ch) = (j / c, j % c);
            dxd[(group * m + p) * c + ch] += g;
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Coordinate concatenation

/// `[b, n, c] ‖ [b, n, 3] -> [b, n, c + 3]`, coordinates last.
pub fn concat_coords(features: &Tensor, points: &Tensor) -> Result<Tensor> {
    if features.rank() != 3
        || points.rank() != 3
        || points.shape()[2] != 3
        || features.shape()[..2] != points.shape()[..2]
    {
        return Err(Error::shape("concat_coords", features.shape(), points.shape()));
    }
    let c = features.channels();
    let rows = points.rows();
    let mut out = Vec::with_capacity(rows * (c + 3));
    for r in 0..rows {
        out.extend_from_slice(&features.data()[r * c..(r + 1) * c]);
        out.extend_from_slice(&points.data()[r * 3..(r + 1) * 3]);
    }
    let (b, n) = (points.shape()[0], points.shape()[1]);
    Tensor::new(vec![b, n, c + 3], out)
}

/// Gradient of [`concat_coords`] with respect to its feature input.
pub fn concat_coords_backward(dy: &Tensor, feature_channels: usize) -> Result<Tensor> {
    let width = dy.channels();
    if width != feature_channels + 3 {
        return Err(Error::shape(
            "concat_coords backward",
            dy.shape(),
            &[feature_channels + 3],
        ));
    }
    let mut out = Vec::with_capacity(dy.rows() * feature_channels);
    for row in dy.data().chunks_exact(width) {
        out.extend_from_slice(&row[..feature_channels]);
    }
    let mut shape = dy.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = feature_channels;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.5), (1, -1));
        assert_eq!(quantize_value(-0.3), (-1, -2));
        assert_eq!(quantize_value(1.7), (1, 0));
        assert_eq!(quantize_value(0.0), (1, -15));
        assert_eq!(quantize_value(-0.0), (1, -15));
        assert_eq!(quantize_value(1e-9), (1, -15));
        assert_eq!(quantize_value(f32::NEG_INFINITY), (-1, 0));
        let q = quantize_shift(&t(&[3], &[0.5, -0.3, 1.7]));
        assert_eq!(q.w_q.data(), &[0.5, -0.25, 1.0]);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        // log2(2^-0.5) = -0.5 exactly rounds to -1; just above rounds to 0.
        let half = std::f32::consts::FRAC_1_SQRT_2;
        let above = f32::from_bits(half.to_bits() + 1);
        assert_eq!(quantize_value(above).1, 0);
        assert_eq!(quantize_value(f32::from_bits(half.to_bits() - 1)).1, -1);
    }

    #[test]
    fn quantize_is_idempotent_on_its_image() {
        for p in MIN_EXPONENT..=0 {
            for s in [-1.0f32, 1.0] {
                let w = s * pow2(p);
                assert_eq!(quantize_value(w), (s as i8, p as i8));
            }
        }
    }

    #[test]
    fn shift_forward_examples() {
        let x = t(&[1, 1, 2], &[2.0, 3.0]);
        let mut w = ShiftWeights::new(t(&[1, 2], &[0.5, 0.3]));
        let (y, ctx) = shift_forward(&x, &mut w).unwrap();
        assert_eq!(w.quantized().w_q.data(), &[0.5, 0.25]);
        assert_eq!(y.data(), &[1.75]);

        let (dx, dw) = shift_backward(&t(&[1, 1, 1], &[1.0]), ctx).unwrap();
        assert_eq!(dw.data(), &[2.0, 3.0]);
        assert_eq!(dx.data(), &[0.5, 0.25]);

        let (y, _) = shift_forward(&Tensor::zeros(&[2, 3, 2]), &mut w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_on_powers_of_two_matches_affine() {
        let mut rng = Rng::new(5);
        let w = Tensor::from_fn(&[3, 4], |_| {
            let p = -(rng.below(16) as i32);
            if rng.below(2) == 0 {
                pow2(p)
            } else {
                -pow2(p)
            }
        });
        let x = rng.uniform_tensor(&[2, 5, 4], -1.0, 1.0);
        let (y, _) = shift_forward(&x, &mut ShiftWeights::new(w.clone())).unwrap();
        assert_eq!(y, affine_map(&x, &w, None).unwrap());
    }

    #[test]
    fn shift_backward_doubles_for_duplicate_batch() {
        let x1 = t(&[1, 1, 2], &[0.7, -1.2]);
        let x2 = t(&[2, 1, 2], &[0.7, -1.2, 0.7, -1.2]);
        let mut w = ShiftWeights::new(t(&[2, 2], &[0.4, -0.9, 0.1, 0.6]));
        let (_, c1) = shift_forward(&x1, &mut w).unwrap();
        let (_, c2) = shift_forward(&x2, &mut w).unwrap();
        let (_, dw1) = shift_backward(&t(&[1, 1, 2], &[0.3, -0.5]), c1).unwrap();
        let (_, dw2) = shift_backward(&t(&[2, 1, 2], &[0.3, -0.5, 0.3, -0.5]), c2).unwrap();
        for (a, b) in dw1.data().iter().zip(dw2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(9);
        let x = rng.uniform_tensor(&[2, 3, 4], -2.0, 2.0);
        let dy = Tensor::zeros(&[2, 3, 5]);
        let mut sw = ShiftWeights::new(rng.uniform_tensor(&[5, 4], -1.0, 1.0));
        let (_, ctx) = shift_forward(&x, &mut sw).unwrap();
        let (dx, dw) = shift_backward(&dy, ctx).unwrap();
        assert!(dx.data().iter().chain(dw.data()).all(|&v| v == 0.0));

        let aw = AdderWeights {
            w: rng.normal_tensor(&[5, 4]),
        };
        let (_, ctx) = adder_forward(&x, &aw).unwrap();
        let (dx, dw) = adder_backward(&dy, ctx).unwrap();
        assert!(dx.data().iter().chain(dw.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn adder_backward_examples() {
        // x - w = 0.4
        let aw = AdderWeights { w: t(&[1, 1], &[0.1]) };
        let (_, ctx) = adder_forward(&t(&[1, 1], &[0.5]), &aw).unwrap();
        let (dx, dw) = adder_backward(&t(&[1, 1], &[1.0]), ctx).unwrap();
        assert!((dw.data()[0] - 0.4).abs() < 1e-6);
        assert!((dx.data()[0] + 0.4).abs() < 1e-6);

        // x - w = 2.5 saturates the input path only
        let aw = AdderWeights { w: t(&[1, 1], &[-0.5]) };
        let (_, ctx) = adder_forward(&t(&[1, 1], &[2.0]), &aw).unwrap();
        let (dx, dw) = adder_backward(&t(&[1, 1], &[1.0]), ctx).unwrap();
        assert_eq!(dw.data(), &[2.5]);
        assert_eq!(dx.data(), &[-1.0]);
    }

    #[test]
    fn adder_forward_peaks_at_matching_row() {
        let aw = AdderWeights {
            w: t(&[2, 2], &[1.0, 1.0, 0.0, -1.0]),
        };
        let (y, _) = adder_forward(&t(&[1, 2], &[0.0, -1.0]), &aw).unwrap();
        assert_eq!(y.data(), &[-3.0, 0.0]);
        let (y, _) = adder_forward(&t(&[1, 2], &[0.5, -0.5]), &aw).unwrap();
        assert_eq!(y.data(), &[-2.0, -1.0]);
    }

    #[test]
    fn mul_identity_backward_and_bias_grad() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (_, ctx) = mul_forward(&x, &eye, Some(&Tensor::zeros(&[2]))).unwrap();
        let dy = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let (dx, _, db) = mul_backward(&dy, ctx).unwrap();
        assert_eq!(dx, dy);
        assert!((db.data()[0] - 0.9).abs() < 1e-6);
        assert!((db.data()[1] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn linear_backward_without_forward_is_usage_error() {
        let mut rng = Rng::new(1);
        let mut lin = Linear::new(LayerKind::Shift, 3, 2, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
        let y = lin.forward(&x, Mode::Train).unwrap();
        lin.backward(&y).unwrap();
        assert!(matches!(lin.backward(&y), Err(Error::ContextConsumed(_))));
    }

    #[test]
    fn shapes_are_checked() {
        let mut rng = Rng::new(1);
        for kind in [LayerKind::Mul, LayerKind::Shift, LayerKind::Adder] {
            let mut lin = Linear::new(kind, 3, 2, &mut rng).unwrap();
            assert!(matches!(
                lin.forward(&Tensor::zeros(&[2, 4]), Mode::Train),
                Err(Error::Shape { .. })
            ));
        }
    }

    #[test]
    fn batch_norm_examples() {
        let mut bn = BatchNorm::new(2);
        bn.beta = t(&[2], &[0.5, -0.25]);
        let x = t(&[2, 2, 2], &[3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row[0], 0.5, "constant channel collapses to beta");
        }

        let mut bn = BatchNorm::new(1);
        let x = t(&[4, 1], &[1.0, -1.0, 1.0, -1.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }

        let mut bn = BatchNorm::new(3);
        assert!(matches!(
            bn.forward(&Tensor::zeros(&[1, 1, 3]), Mode::Train),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(bn.forward(&Tensor::zeros(&[1, 1, 3]), Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut bn = BatchNorm::new(1);
        bn.forward(&t(&[2, 1], &[1.0, 3.0]), Mode::Train).unwrap();
        // mean 2, unbiased var 2
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-7);
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn concat_coords_layout() {
        let f = t(&[1, 1, 2], &[0.1, 0.2]);
        let p = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let y = concat_coords(&f, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5]);
        assert_eq!(y.data(), &[0.1, 0.2, 1.0, 2.0, 3.0]);
        let empty = Tensor::zeros(&[1, 1, 0]);
        assert_eq!(concat_coords(&empty, &p).unwrap().data(), p.data());
        assert!(concat_coords(&Tensor::zeros(&[1, 2, 2]), &p).is_err());
        let back = concat_coords_backward(&y, 2).unwrap();
        assert_eq!(back.data(), &[0.1, 0.2]);
    }

    #[test]
    fn init_respects_ranges() {
        let mut rng = Rng::new(4);
        let w = init_weights(LayerKind::Shift, 16, 8, &mut rng);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        let w = init_weights(LayerKind::Adder, 16, 64, &mut rng);
        assert!(w.data().iter().all(|v| v.abs() <= 2.0));
        let std = w.rms();
        assert!((0.7..1.0).contains(&std), "truncated normal std {std}");
    }
}
