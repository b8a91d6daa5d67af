use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::DataSource;
use super::train::{evaluate, EvalReport};
use crate::data::{make_batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, LinearOp, Mode};
use crate::optim::modulate_gradient;
use crate::shiftquant::PackedShiftTensor;
use crate::tensor::softmax_cross_entropy;

pub const EVAL_FILE: &str = "eval.jsonl";
pub const GRAD_REPORT_FILE: &str = "grad_report.csv";
pub const HIST_BINS: usize = 64;
/// Candidate evaluation densities, densest first.
pub const DENSITIES: [usize; 6] = [1024, 512, 256, 128, 64, 32];

/// A checkpoint together with the dataset it was trained on.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub dataset: Dataset,
}

/// Loads `path` and its dataset, optionally from a different data source.
pub fn load_run(path: &Path, data: Option<&DataSource>) -> Result<Loaded> {
    let mut checkpoint = Checkpoint::load(path)?;
    if let Some(d) = data {
        checkpoint.config.data = d.clone();
    }
    let dataset = checkpoint.config.load_dataset()?;
    if dataset.classes.len() != checkpoint.config.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, dataset has {}",
            checkpoint.config.model.num_classes,
            dataset.classes.len()
        )));
    }
    Ok(Loaded { checkpoint, dataset })
}

/// The four densest entries of [`DENSITIES`] that a cloud of `points` supports.
pub fn sweep_densities(points: usize) -> Vec<usize> {
    DENSITIES.iter().copied().filter(|&d| d <= points).take(4).collect()
}

fn check_density(density: usize, points: usize, k: usize) -> Result<()> {
    if !DENSITIES.contains(&density) || density > points || density < k {
        return Err(Error::Usage(format!(
            "density {density} unsupported for {points}-point clouds (choose from {:?})",
            sweep_densities(points)
        )));
    }
    Ok(())
}

fn append_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let path = dir.join(EVAL_FILE);
    let line = serde_json::to_string(report).map_err(|e| Error::Parse(e.to_string()))?;
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| Error::io(&path, e))
}

fn run_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

/// Test-split accuracy at `density` points (the stored density when `None`).
/// The report is appended to `eval.jsonl` next to the checkpoint.
pub fn cmd_eval(path: &Path, data: Option<&DataSource>, density: Option<usize>) -> Result<EvalReport> {
    let run = load_run(path, data)?;
    let reports = eval_densities(&run, &[density.unwrap_or(run.dataset.points_per_cloud)])?;
    append_report(run_dir(path), &reports[0])?;
    Ok(reports.into_iter().next().expect("one report"))
}

/// One report per density in [`sweep_densities`].
pub fn cmd_sweep_density(path: &Path, data: Option<&DataSource>) -> Result<Vec<EvalReport>> {
    let run = load_run(path, data)?;
    let reports = eval_densities(&run, &sweep_densities(run.dataset.points_per_cloud))?;
    for r in &reports {
        append_report(run_dir(path), r)?;
    }
    Ok(reports)
}

pub fn eval_densities(run: &Loaded, densities: &[usize]) -> Result<Vec<EvalReport>> {
    let cfg = &run.checkpoint.config;
    let mut model = run.checkpoint.model()?;
    densities
        .iter()
        .map(|&d| {
            check_density(d, run.dataset.points_per_cloud, cfg.model.knn_k)?;
            evaluate(
                &mut model,
                &run.dataset.test,
                &run.dataset.classes,
                Some(d),
                cfg.density_sampling(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub layer: String,
    pub kind: LayerKind,
    pub raw_rms: f64,
    /// Post-modulation RMS, for adder layers only.
    pub modulated_rms: Option<f64>,
}

/// Weight-gradient RMS per embedding/encoder layer over the first `batches`
/// unaugmented training batches, in train mode.
pub fn grad_report(run: &Loaded, batches: usize) -> Result<Vec<GradRow>> {
    if batches == 0 {
        return Ok(Vec::new());
    }
    let cfg = &run.checkpoint.config;
    let eta = cfg.optim.eta;
    let mut model = run.checkpoint.model()?;
    let mut rows: Vec<GradRow> = model
        .variant_layers()
        .into_iter()
        .map(|(layer, l)| GradRow {
            layer,
            kind: l.kind(),
            raw_rms: 0.0,
            modulated_rms: (l.kind() == LayerKind::Adder).then_some(0.0),
        })
        .collect();
    let chunks: Vec<&[Sample]> = run
        .dataset
        .train
        .chunks(cfg.batch_size)
        .filter(|c| c.len() > 1)
        .take(batches)
        .collect();
    if chunks.is_empty() {
        return Err(Error::EmptyInput("grad_report: no training batches"));
    }
    for chunk in &chunks {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, |p| Ok(p.clone()))?;
        let out = model.forward(&batch.points, Mode::Train)?;
        let (_, dlogits) = softmax_cross_entropy(&out.logits, &batch.labels)?;
        model.backward(&dlogits)?;
        for (row, (_, layer)) in rows.iter_mut().zip(model.variant_layers()) {
            let g = layer.grad_weight();
            row.raw_rms += g.rms();
            if let Some(m) = row.modulated_rms.as_mut() {
                *m += modulate_gradient(g, eta).rms();
            }
        }
    }
    let n = chunks.len() as f64;
    for row in &mut rows {
        row.raw_rms /= n;
        if let Some(m) = row.modulated_rms.as_mut() {
            *m /= n;
        }
    }
    Ok(rows)
}

pub fn grad_table(rows: &[GradRow]) -> String {
    let mut out = String::from("layer,kind,raw_rms,modulated_rms\n");
    for r in rows {
        let modulated = r.modulated_rms.map_or(String::new(), |m| format!("{m:.4}"));
        let _ = writeln!(out, "{},{},{:.6e},{}", r.layer, r.kind, r.raw_rms, modulated);
    }
    out
}

/// Runs [`grad_report`] and writes `grad_report.csv` next to the checkpoint.
pub fn cmd_grad_report(path: &Path, data: Option<&DataSource>, batches: usize) -> Result<Vec<GradRow>> {
    let run = load_run(path, data)?;
    let rows = grad_report(&run, batches)?;
    let out = run_dir(path).join(GRAD_REPORT_FILE);
    fs::write(&out, grad_table(&rows)).map_err(|e| Error::io(&out, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    WeightsHist,
    Features,
    PackedShift,
}

impl std::str::FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights_hist" => Ok(ExportKind::WeightsHist),
            "features" => Ok(ExportKind::Features),
            "packed_shift" => Ok(ExportKind::PackedShift),
            other => Err(Error::Usage(format!(
                "unknown export `{other}` (expected weights_hist, features or packed_shift)"
            ))),
        }
    }
}

/// Equal-width histogram over `[min, max]` of `values`: `(lo, hi, count)` per bin.
pub fn histogram(values: &[f32], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((f64::from(v) - lo) / width).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Writes the requested export into `out` and returns the files written.
pub fn cmd_export(path: &Path, data: Option<&DataSource>, what: ExportKind, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: String, text: String| -> Result<PathBuf> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    match what {
        ExportKind::WeightsHist => {
            let model = Checkpoint::load(path)?.model()?;
            let mut files = Vec::new();
            for (name, layer) in model.linear_layers() {
                let w = layer.effective_weight();
                let mut values = String::from("value\n");
                for v in w.data() {
                    let _ = writeln!(values, "{v:e}");
                }
                files.push(write(format!("{name}.weights.csv"), values)?);
                let mut hist = String::from("bin_lo,bin_hi,count\n");
                for (lo, hi, c) in histogram(w.data(), HIST_BINS) {
                    let _ = writeln!(hist, "{lo:e},{hi:e},{c}");
                }
                files.push(write(format!("{name}.hist.csv"), hist)?);
            }
            Ok(files)
        }
        ExportKind::Features => {
            let run = load_run(path, data)?;
            let mut model = run.checkpoint.model()?;
            let mut text = String::new();
            for chunk in run.dataset.test.chunks(64) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let batch = make_batch(&refs, |p| Ok(p.clone()))?;
                let pooled = model.forward(&batch.points, Mode::Eval)?.pooled;
                let c = pooled.channels();
                if text.is_empty() {
                    text.push_str("id,label");
                    (0..c).for_each(|j| {
                        let _ = write!(text, ",f{j}");
                    });
                    text.push('\n');
                }
                for (s, row) in chunk.iter().zip(pooled.data().chunks(c)) {
                    let _ = write!(text, "{},{}", s.id, s.label);
                    row.iter().for_each(|v| {
                        let _ = write!(text, ",{v:e}");
                    });
                    text.push('\n');
                }
            }
            Ok(vec![write("features.csv".into(), text)?])
        }
        ExportKind::PackedShift => {
            let model = Checkpoint::load(path)?.model()?;
            let mut files = Vec::new();
            for (name, layer) in model.linear_layers() {
                if let LinearOp::Shift(sw) = layer.op() {
                    let packed = PackedShiftTensor::from_quantized(sw.quantized())?;
                    let p = out.join(format!("{name}.saq"));
                    packed.write(&p)?;
                    files.push(p);
                }
            }
            if files.is_empty() {
                return Err(Error::Usage(format!(
                    "model variant `{}` has no shift layers to pack",
                    model.config().variant
                )));
            }
            Ok(files)
        }
    }
}
