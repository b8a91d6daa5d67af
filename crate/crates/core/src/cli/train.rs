use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::data::{augment, make_batch, subsample_density, subsample_nested, Dataset, Sample};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::models::{build_model, Model};
use crate::optim::{EpochRates, Optimizer};
use crate::tensor::{argmax_rows, softmax_cross_entropy, Rng, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const EVAL_BATCH: usize = 64;
const SHUFFLE_STREAM: u64 = 101;
const AUGMENT_STREAM: u64 = 102;
const DENSITY_STREAM: u64 = 103;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's (augmented) training batches.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Raw weight-gradient RMS per embedding/encoder layer, averaged over the epoch.
    pub grad_rms: BTreeMap<String, f64>,
    pub lr: EpochRates,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub density: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(class name, accuracy)`; classes absent from the split report NaN.
    pub per_class: Vec<(String, f64)>,
}

/// Trains `cfg.variant` on the configured dataset.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    train_on(cfg, &dataset)
}

/// Like [`cmd_train`] with an already loaded dataset.
pub fn train_on(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.classes.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.classes.len(),
            cfg.model.num_classes
        )));
    }
    let run_dir = cfg.out.clone();
    cfg.save(&run_dir)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let mut model = build_model(&cfg.model)?;
    let save = |model: &Model, name: &str, epoch: usize, acc: f64| {
        Checkpoint::from_model(cfg, model, epoch, acc).save(&run_dir.join(name))
    };

    if cfg.epochs == 0 {
        let acc = evaluate(
            &mut model,
            &dataset.test,
            &dataset.classes,
            None,
            cfg.density_sampling(),
        )?
        .accuracy;
        save(&model, BEST_CHECKPOINT, 0, acc)?;
        save(&model, LAST_CHECKPOINT, 0, acc)?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        return Ok(TrainSummary {
            run_dir,
            records: Vec::new(),
            final_test_accuracy: acc,
            best_test_accuracy: acc,
            best_epoch: 0,
        });
    }

    let mut optimizer = Optimizer::new(&model.params_mut(), cfg.optim.clone(), cfg.epochs)?;
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork(SHUFFLE_STREAM);
    let mut augment_rng = root.fork(AUGMENT_STREAM);
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let mut grad_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut batches = 0;
        // a trailing batch of one sample cannot be batch-normalized
        for (b, chunk) in order.chunks(cfg.batch_size).filter(|c| c.len() > 1).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let batch = make_batch(&samples, |p| Ok(augment(p, &mut augment_rng, &cfg.augment)))?;
            let out = model.forward(&batch.points, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&out.logits, &batch.labels)?;
            if !loss.is_finite() {
                let layer = model.first_non_finite().unwrap_or("loss").to_string();
                return Err(Error::NonFinite { epoch, batch: b, layer });
            }
            model.backward(&dlogits)?;
            for (name, layer) in model.linear_layers() {
                if !layer.grad_weight().is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: b,
                        layer: name,
                    });
                }
            }
            for (name, layer) in model.variant_layers() {
                *grad_sums.entry(name).or_default() += layer.grad_weight().rms();
            }
            optimizer.step(&mut model.params_mut(), epoch)?;
            loss_sum += f64::from(loss) * chunk.len() as f64;
            correct += argmax_rows(&out.logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += chunk.len();
            batches += 1;
        }
        let test = evaluate(
            &mut model,
            &dataset.test,
            &dataset.classes,
            None,
            cfg.density_sampling(),
        )?;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy: test.accuracy,
            grad_rms: grad_sums
                .into_iter()
                .map(|(k, v)| (k, v / f64::from(batches.max(1))))
                .collect(),
            lr: optimizer.rates(epoch)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            record.train_loss,
            record.train_accuracy,
            record.test_accuracy
        );
        let line = serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        if test.accuracy > best.0 {
            best = (test.accuracy, epoch);
            save(&model, BEST_CHECKPOINT, epoch + 1, test.accuracy)?;
        }
        records.push(record);
    }
    let final_acc = records.last().map_or(0.0, |r| r.test_accuracy);
    save(&model, LAST_CHECKPOINT, cfg.epochs, final_acc)?;
    Ok(TrainSummary {
        run_dir,
        records,
        final_test_accuracy: final_acc,
        best_test_accuracy: best.0,
        best_epoch: best.1,
    })
}

/// Reads `metrics.jsonl` back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// How lower-density views are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensitySampling {
    pub seed: u64,
    pub nested: bool,
}

/// The cloud as seen at `density` points. The full density returns the cloud
/// unchanged. Nested sampling takes prefixes of one per-sample permutation;
/// otherwise every density gets its own draw.
pub fn density_view(sample: &Sample, density: usize, sampling: DensitySampling) -> Result<Tensor> {
    let n = sample.points.shape()[0];
    if density == n {
        return Ok(sample.points.clone());
    }
    let base = Rng::new(sampling.seed).fork(DENSITY_STREAM);
    if sampling.nested {
        let mut rng = base.fork(u64::from(sample.id) + 1);
        Ok(subsample_nested(&sample.points, &[density], &mut rng)?.remove(0))
    } else {
        let mut rng = base.fork((u64::from(sample.id) + 1) << 16 | density as u64);
        subsample_density(&sample.points, density, &mut rng)
    }
}

/// Accuracy of `model` in eval mode on `samples`, without augmentation.
pub fn evaluate(
    model: &mut Model,
    samples: &[Sample],
    classes: &[String],
    density: Option<usize>,
    sampling: DensitySampling,
) -> Result<EvalReport> {
    let full = samples.first().map_or(0, |s| s.points.shape()[0]);
    let density = density.unwrap_or(full);
    let mut hits = vec![0usize; classes.len()];
    let mut totals = vec![0usize; classes.len()];
    for chunk in samples.chunks(EVAL_BATCH) {
        let views = chunk
            .iter()
            .map(|s| density_view(s, density, sampling))
            .collect::<Result<Vec<_>>>()?;
        let points = Tensor::stack(&views.iter().collect::<Vec<_>>())?;
        let logits = model.forward(&points, Mode::Eval)?.logits;
        for (p, s) in argmax_rows(&logits).iter().zip(chunk) {
            let l = s.label;
            totals[l] += 1;
            hits[l] += usize::from(*p == l);
        }
    }
    let correct: usize = hits.iter().sum();
    let total: usize = totals.iter().sum();
    Ok(EvalReport {
        density,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class: classes
            .iter()
            .zip(hits.iter().zip(&totals))
            .map(|(c, (&h, &t))| (c.clone(), if t == 0 { f64::NAN } else { h as f64 / t as f64 }))
            .collect(),
    })
}
