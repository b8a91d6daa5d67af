//! The Mul/Shift/Add/SA-MLP classifier family.
//!
//! All four variants share one graph:
//!
//! 1. local embedding: k-NN grouping, per-neighbor features
//!    `[neighbor − center ‖ center]`, two pointwise layers, max over neighbors,
//!    two more pointwise layers;
//! 2. encoder: two layers, each fed the previous features with the point
//!    coordinates appended;
//! 3. global max pool over points;
//! 4. a multiplication-based head ending in class logits.
//!
//! Variants differ only in the kind of the six embedding/encoder linear layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    concat_coords, concat_coords_backward, BatchNorm, Layer, LayerKind, Linear, MaxPool, Mode, ParamRef, Relu,
};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mul,
    Shift,
    Add,
    Sa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mul, Variant::Shift, Variant::Add, Variant::Sa];

    /// Linear-layer kind at depth `index` among the embedding and encoder layers.
    pub fn layer_kind(self, index: usize) -> LayerKind {
        match self {
            Variant::Mul => LayerKind::Mul,
            Variant::Shift => LayerKind::Shift,
            Variant::Add => LayerKind::Adder,
            Variant::Sa if index.is_multiple_of(2) => LayerKind::Shift,
            Variant::Sa => LayerKind::Adder,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mul => "mul",
            Variant::Shift => "shift",
            Variant::Add => "add",
            Variant::Sa => "sa",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(Variant::Mul),
            "shift" => Ok(Variant::Shift),
            "add" => Ok(Variant::Add),
            "sa" => Ok(Variant::Sa),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_widths: Vec<usize>,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub knn_k: usize,
    pub points_in: usize,
    /// Kind of the hidden head layers; the final classifier is always mul.
    pub head_kind: LayerKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Sa,
            embed_widths: vec![64, 64, 128, 256],
            encoder_widths: vec![512, 1024],
            head_widths: vec![512, 256],
            num_classes: 40,
            knn_k: 16,
            points_in: 1024,
            head_kind: LayerKind::Mul,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths sized for single-core training on the synthetic shapes.
    pub fn desk(variant: Variant, num_classes: usize, points_in: usize) -> Self {
        ModelConfig {
            variant,
            embed_widths: vec![16, 16, 32, 32],
            encoder_widths: vec![64, 128],
            head_widths: vec![64],
            num_classes,
            knn_k: 8,
            points_in,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_widths.len() != 4 {
            return bad(format!("need 4 embedding widths, got {}", self.embed_widths.len()));
        }
        if self.encoder_widths.len() != 2 {
            return bad(format!("need 2 encoder widths, got {}", self.encoder_widths.len()));
        }
        let all = self
            .embed_widths
            .iter()
            .chain(&self.encoder_widths)
            .chain(&self.head_widths);
        if all.copied().any(|w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be at least 1".into());
        }
        if self.head_kind == LayerKind::Norm {
            return bad("head_kind must be a linear kind".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudBatch {
    /// `[b, n, 3]`, each cloud centered with unit max radius.
    pub points: Tensor,
    pub labels: Vec<usize>,
}

/// Indices `[b, n, k]` of each point's `k` nearest neighbors within its cloud.
/// The point itself comes first; the rest are ordered by distance with ties
/// broken by lower index.
pub fn knn_group(points: &Tensor, k: usize) -> Result<Vec<usize>> {
    if points.rank() != 3 || points.shape()[2] != 3 {
        return Err(Error::shape("knn_group", points.shape(), &[0, 0, 3]));
    }
    let (b, n) = (points.shape()[0], points.shape()[1]);
    if k > n {
        return Err(Error::Neighbors { k, n });
    }
    let mut out = Vec::with_capacity(b * n * k);
    let mut cand: Vec<(f32, usize)> = Vec::with_capacity(n);
    for cloud in points.data().chunks_exact(n * 3) {
        for i in 0..n {
            let c = &cloud[i * 3..i * 3 + 3];
            cand.clear();
            for j in (0..n).filter(|&j| j != i) {
                let p = &cloud[j * 3..j * 3 + 3];
                let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                cand.push((d, j));
            }
            let cmp = |a: &(f32, usize), b: &(f32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k > 1 && k - 1 < cand.len() {
                cand.select_nth_unstable_by(k - 2, cmp);
                cand.truncate(k - 1);
            }
            cand.sort_by(cmp);
            out.push(i);
            out.extend(cand.iter().take(k - 1).map(|&(_, j)| j));
        }
    }
    Ok(out)
}

/// Per-neighbor features `[b, n, k, 6]`: offset to the center, then the center.
pub fn local_features(points: &Tensor, neighbors: &[usize], k: usize) -> Result<Tensor> {
    let (b, n) = (points.shape()[0], points.shape()[1]);
    if neighbors.len() != b * n * k {
        return Err(Error::shape("local_features", &[b, n, k], &[neighbors.len()]));
    }
    let pd = points.data();
    let mut out = Vec::with_capacity(b * n * k * 6);
    for bi in 0..b {
        let cloud = &pd[bi * n * 3..(bi + 1) * n * 3];
        for i in 0..n {
            let c = &cloud[i * 3..i * 3 + 3];
            for &j in &neighbors[(bi * n + i) * k..(bi * n + i + 1) * k] {
                let p = &cloud[j * 3..j * 3 + 3];
                out.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2], c[0], c[1], c[2]]);
            }
        }
    }
    Tensor::new(vec![b, n, k, 6], out)
}

/// Linear → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct Block {
    pub linear: Linear,
    pub norm: BatchNorm,
    act: Relu,
}

impl Block {
    pub fn new(kind: LayerKind, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Block {
            linear: Linear::new(kind, c_in, c_out, rng)?,
            norm: BatchNorm::new(c_out),
            act: Relu::default(),
        })
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.linear.params_mut(prefix);
        out.extend(self.norm.params_mut(&format!("{prefix}.norm")));
        out
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.linear.state(prefix, out);
        self.norm.state(&format!("{prefix}.norm"), out);
    }

    fn load_state(&mut self, prefix: &str, lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<()> {
        self.linear.load_state(prefix, lookup)?;
        self.norm.load_state(&format!("{prefix}.norm"), lookup)
    }
}

impl Layer for Block {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.linear.forward(x, mode)?;
        let y = self.norm.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.act.backward(dy)?;
        let d = self.norm.backward(&d)?;
        self.linear.backward(&d)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Global feature `[b, encoder_widths[1]]` after max pooling.
    pub pooled: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    embed: Vec<Block>,
    neighbor_pool: MaxPool,
    encoder: Vec<Block>,
    global_pool: MaxPool,
    head: Vec<Block>,
    classifier: Linear,
    pending: bool,
    first_non_finite: Option<String>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut depth = 0;
    let mut next_kind = || {
        let kind = cfg.variant.layer_kind(depth);
        depth += 1;
        kind
    };
    let e = &cfg.embed_widths;
    let embed = vec![
        Block::new(next_kind(), 6, e[0], &mut rng)?,
        Block::new(next_kind(), e[0], e[1], &mut rng)?,
        Block::new(next_kind(), e[1], e[2], &mut rng)?,
        Block::new(next_kind(), e[2], e[3], &mut rng)?,
    ];
    let enc = &cfg.encoder_widths;
    let encoder = vec![
        Block::new(next_kind(), e[3] + 3, enc[0], &mut rng)?,
        Block::new(next_kind(), enc[0] + 3, enc[1], &mut rng)?,
    ];
    let mut head = Vec::with_capacity(cfg.head_widths.len());
    let mut width = enc[1];
    for &h in &cfg.head_widths {
        head.push(Block::new(cfg.head_kind, width, h, &mut rng)?);
        width = h;
    }
    let classifier = Linear::new(LayerKind::Mul, width, cfg.num_classes, &mut rng)?;
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        neighbor_pool: MaxPool::default(),
        encoder,
        global_pool: MaxPool::default(),
        head,
        classifier,
        pending: false,
        first_non_finite: None,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Names and layers of the six embedding/encoder linear layers in depth order.
    pub fn variant_layers(&self) -> Vec<(String, &Linear)> {
        let embed = self
            .embed
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("embed.{i}"), &b.linear));
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("encoder.{i}"), &b.linear));
        embed.chain(enc).collect()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.variant_layers().iter().map(|(_, l)| l.kind()).collect()
    }

    /// Every linear layer (embedding, encoder, head, classifier) in depth order.
    pub fn linear_layers(&self) -> Vec<(String, &Linear)> {
        let mut out = self.variant_layers();
        out.extend(
            self.head
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("head.{i}"), &b.linear)),
        );
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    pub fn linear_layers_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out: Vec<(String, &mut Linear)> = Vec::new();
        for (i, b) in self.embed.iter_mut().enumerate() {
            out.push((format!("embed.{i}"), &mut b.linear));
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}"), &mut b.linear));
        }
        for (i, b) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{i}"), &mut b.linear));
        }
        out.push(("classifier".to_string(), &mut self.classifier));
        out
    }

    pub fn linear_count(&self) -> usize {
        self.linear_layers().len()
    }

    /// Trainable element count; `with_bias = false` leaves out linear-layer biases.
    pub fn param_count(&self, with_bias: bool) -> usize {
        let linear: usize = self
            .linear_layers()
            .iter()
            .map(|(_, l)| l.weight_count() + if with_bias { l.bias_count() } else { 0 })
            .sum();
        let norms: usize = self
            .embed
            .iter()
            .chain(&self.encoder)
            .chain(&self.head)
            .map(|b| 2 * b.norm.channels())
            .sum();
        linear + norms
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.embed.iter_mut().enumerate() {
            out.extend(b.params_mut(&format!("embed.{i}")));
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.extend(b.params_mut(&format!("encoder.{i}")));
        }
        for (i, b) in self.head.iter_mut().enumerate() {
            out.extend(b.params_mut(&format!("head.{i}")));
        }
        out.extend(self.classifier.params_mut("classifier"));
        out
    }

    /// All persistent tensors (parameters and batch-norm running statistics).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.embed.iter().enumerate() {
            b.state(&format!("embed.{i}"), &mut out);
        }
        for (i, b) in self.encoder.iter().enumerate() {
            b.state(&format!("encoder.{i}"), &mut out);
        }
        for (i, b) in self.head.iter().enumerate() {
            b.state(&format!("head.{i}"), &mut out);
        }
        self.classifier.state("classifier", &mut out);
        out
    }

    /// Loads tensors by name, checking every shape against the built graph.
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state().len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let mut lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        for (i, b) in self.embed.iter_mut().enumerate() {
            b.load_state(&format!("embed.{i}"), &mut lookup)?;
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.load_state(&format!("encoder.{i}"), &mut lookup)?;
        }
        for (i, b) in self.head.iter_mut().enumerate() {
            b.load_state(&format!("head.{i}"), &mut lookup)?;
        }
        self.classifier.load_state("classifier", &mut lookup)
    }

    /// Name of the first layer whose output was non-finite in the latest forward.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.first_non_finite.as_deref()
    }

    fn note(&mut self, name: &str, t: &Tensor) {
        if self.first_non_finite.is_none() && !t.is_finite() {
            self.first_non_finite = Some(name.to_string());
        }
    }

    pub fn forward(&mut self, points: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        if points.rank() != 3 || points.shape()[2] != 3 {
            return Err(Error::shape("model forward", points.shape(), &[0, 0, 3]));
        }
        self.first_non_finite = None;
        self.pending = false;
        let k = self.cfg.knn_k;
        let neighbors = knn_group(points, k)?;
        let mut h = local_features(points, &neighbors, k)?;
        for i in 0..2 {
            h = self.embed[i].forward(&h, mode)?;
            self.note(&format!("embed.{i}"), &h);
        }
        h = self.neighbor_pool.forward(&h, mode)?;
        for i in 2..4 {
            h = self.embed[i].forward(&h, mode)?;
            self.note(&format!("embed.{i}"), &h);
        }
        for i in 0..self.encoder.len() {
            let cat = concat_coords(&h, points)?;
            h = self.encoder[i].forward(&cat, mode)?;
            self.note(&format!("encoder.{i}"), &h);
        }
        let pooled = self.global_pool.forward(&h, mode)?;
        let mut z = pooled.clone();
        for i in 0..self.head.len() {
            z = self.head[i].forward(&z, mode)?;
            self.note(&format!("head.{i}"), &z);
        }
        let logits = self.classifier.forward(&z, mode)?;
        self.note("classifier", &logits);
        self.pending = true;
        Ok(ForwardOutput { logits, pooled })
    }

    /// Backpropagates `dlogits`, leaving gradients in every layer.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        if !std::mem::take(&mut self.pending) {
            return Err(Error::ContextConsumed("model"));
        }
        let mut d = self.classifier.backward(dlogits)?;
        for block in self.head.iter_mut().rev() {
            d = block.backward(&d)?;
        }
        d = self.global_pool.backward(&d)?;
        for block in self.encoder.iter_mut().rev() {
            let width = block.linear.in_features() - 3;
            d = concat_coords_backward(&block.backward(&d)?, width)?;
        }
        for i in (2..4).rev() {
            d = self.embed[i].backward(&d)?;
        }
        d = self.neighbor_pool.backward(&d)?;
        for i in (0..2).rev() {
            d = self.embed[i].backward(&d)?;
        }
        Ok(())
    }
}
