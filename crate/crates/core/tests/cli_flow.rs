use std::fs;
use std::path::Path;

use samlp::cli::checkpoint::Checkpoint;
use samlp::cli::report::{cmd_export, cmd_grad_report, cmd_sweep_density, load_run, EVAL_FILE};
use samlp::cli::train::{read_metrics, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use samlp::cli::{cmd_eval, cmd_train, evaluate, train_on, DataSource, ExportKind, RunConfig};
use samlp::data::{load_modelnet40, Dataset, Sample};
use samlp::layers::{LayerKind, LinearOp, Mode};
use samlp::models::{ModelConfig, Variant};
use samlp::shiftquant::PackedShiftTensor;
use samlp::{Error, Tensor};

/// A seconds-scale synthetic run: 10 clouds per class at 64 points.
fn tiny(variant: Variant, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(variant, DataSource::Synthetic, 3, out);
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.synthetic.per_class = 10;
    cfg.synthetic.points = 64;
    cfg.model = ModelConfig {
        embed_widths: vec![8, 8, 8, 8],
        encoder_widths: vec![16, 16],
        head_widths: vec![8],
        knn_k: 4,
        ..ModelConfig::desk(variant, 4, 64)
    };
    cfg.model.seed = cfg.seed;
    cfg
}

fn without_wall_clock(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_seconds");
            v
        })
        .collect()
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_train(&tiny(Variant::Sa, dir.path(), 0)).unwrap();
    assert!(summary.records.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    let ckpt = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.epoch, 0);
    let cfg = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg, ckpt.config);
}

#[test]
fn training_is_deterministic_and_consistent_with_eval() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::Sa, a.path(), 3);
    let first = cmd_train(&cfg).unwrap();
    cfg.out = b.path().to_path_buf();
    cmd_train(&cfg).unwrap();

    assert_eq!(
        without_wall_clock(&a.path().join(METRICS_FILE)),
        without_wall_clock(&b.path().join(METRICS_FILE))
    );
    let bytes = |d: &Path| fs::read(d.join(LAST_CHECKPOINT)).unwrap();
    let mut ca = Checkpoint::decode(&bytes(a.path())).unwrap();
    let cb = Checkpoint::decode(&bytes(b.path())).unwrap();
    ca.config.out = cb.config.out.clone();
    assert_eq!(ca.encode().unwrap(), cb.encode().unwrap());

    let records = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records, first.records);
    assert!(records
        .iter()
        .all(|r| r.grad_rms.len() == 6 && r.train_loss.is_finite()));

    let last = a.path().join(LAST_CHECKPOINT);
    let report = cmd_eval(&last, None, None).unwrap();
    assert_eq!(report.accuracy, first.final_test_accuracy);
    assert_eq!(report.total, 8);
    assert_eq!(report.per_class.len(), 4);

    let sweep = cmd_sweep_density(&last, None).unwrap();
    assert_eq!(sweep.iter().map(|r| r.density).collect::<Vec<_>>(), vec![64, 32]);
    assert_eq!(sweep[0].accuracy, first.final_test_accuracy);
    let lines = fs::read_to_string(a.path().join(EVAL_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3);

    assert!(matches!(cmd_eval(&last, None, Some(100)), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_roundtrip_preserves_accuracy_on_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Shift, dir.path(), 2);
    cmd_train(&cfg).unwrap();
    let run = load_run(&dir.path().join(BEST_CHECKPOINT), None).unwrap();
    let path = dir.path().join("copy.ckpt");
    run.checkpoint.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    for split in [&run.dataset.train, &run.dataset.test] {
        let acc = |c: &Checkpoint| {
            evaluate(
                &mut c.model().unwrap(),
                split,
                &run.dataset.classes,
                None,
                cfg.density_sampling(),
            )
            .unwrap()
            .accuracy
        };
        assert_eq!(acc(&run.checkpoint), acc(&reloaded));
    }
}

#[test]
fn grad_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&tiny(Variant::Sa, dir.path(), 0)).unwrap();
    let ckpt = dir.path().join(LAST_CHECKPOINT);
    assert!(cmd_grad_report(&ckpt, None, 0).unwrap().is_empty());
    let rows = cmd_grad_report(&ckpt, None, 2).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.raw_rms > 0.0);
        match r.kind {
            LayerKind::Adder => assert!((r.modulated_rms.unwrap() - 0.2).abs() < 1e-6),
            _ => assert!(r.modulated_rms.is_none()),
        }
    }
    let csv = fs::read_to_string(dir.path().join("grad_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains(",adder,") && csv.contains(",0.2000"));
}

#[test]
fn exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Sa, dir.path(), 1);
    cmd_train(&cfg).unwrap();
    let ckpt = dir.path().join(LAST_CHECKPOINT);

    let hist = cmd_export(&ckpt, None, ExportKind::WeightsHist, &dir.path().join("w")).unwrap();
    assert_eq!(hist.len(), 2 * 8);
    let shift_values = fs::read_to_string(dir.path().join("w/embed.0.weights.csv")).unwrap();
    for line in shift_values.lines().skip(1) {
        let v: f32 = line.parse().unwrap();
        let k = v.abs().log2();
        assert!(k.fract() == 0.0 && (-15.0..=0.0).contains(&k), "{v}");
    }
    let bins = fs::read_to_string(dir.path().join("w/embed.1.hist.csv")).unwrap();
    assert_eq!(bins.lines().count(), 65);

    let feats = cmd_export(&ckpt, None, ExportKind::Features, &dir.path().join("f")).unwrap();
    let text = fs::read_to_string(&feats[0]).unwrap();
    assert_eq!(text.lines().count() - 1, 8);
    assert!(text.lines().next().unwrap().starts_with("id,label,f0"));

    let packed = cmd_export(&ckpt, None, ExportKind::PackedShift, &dir.path().join("p")).unwrap();
    assert_eq!(packed.len(), 3);

    // fixed-point inference from the packed files against the float model
    let run = load_run(&ckpt, None).unwrap();
    let mut model = run.checkpoint.model().unwrap();
    let refs: Vec<&Tensor> = run.dataset.test.iter().map(|s| &s.points).collect();
    let points = Tensor::stack(&refs).unwrap();
    let float_logits = model.forward(&points, Mode::Eval).unwrap().logits;
    for (name, layer) in model.linear_layers_mut() {
        if matches!(layer.op(), LinearOp::Shift(_)) {
            let codes = PackedShiftTensor::read(&dir.path().join(format!("p/{name}.saq"))).unwrap();
            layer.attach_fixed_point(codes).unwrap();
        }
    }
    let fixed_logits = model.forward(&points, Mode::Eval).unwrap().logits;
    let worst = float_logits
        .data()
        .iter()
        .zip(fixed_logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 0.05, "fixed-point logits deviate by {worst}");

    let mul_dir = tempfile::tempdir().unwrap();
    cmd_train(&tiny(Variant::Mul, mul_dir.path(), 0)).unwrap();
    let err = cmd_export(
        &mul_dir.path().join(LAST_CHECKPOINT),
        None,
        ExportKind::PackedShift,
        mul_dir.path(),
    );
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn non_finite_input_aborts_naming_the_first_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Add, dir.path(), 1);
    let mut ds = cfg.load_dataset().unwrap();
    ds.train[0].points.data_mut()[0] = f32::NAN;
    ds.train.truncate(8);
    match train_on(&cfg, &ds) {
        Err(Error::NonFinite { epoch: 0, layer, .. }) => assert_eq!(layer, "embed.0"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn missing_dataset_is_reported() {
    let cfg = RunConfig::new(
        Variant::Sa,
        DataSource::ModelNet40("/nonexistent/mn40".into()),
        1,
        "unused",
    );
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
}

#[test]
fn modelnet_tree_ingestion_and_cache() {
    let root = tempfile::tempdir().unwrap();
    let tetra = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
    let plane = "OFF 4 2 0\n0 0 0\n2 0 0\n2 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n";
    for (class, text) in [("zeta", tetra), ("alpha", plane)] {
        for (split, n) in [("train", 3), ("test", 1)] {
            let d = root.path().join(class).join(split);
            fs::create_dir_all(&d).unwrap();
            for i in 0..n {
                fs::write(d.join(format!("{class}_{i:04}.off")), text).unwrap();
            }
        }
    }
    let ds = load_modelnet40(root.path(), 32, 4).unwrap();
    assert_eq!(ds.classes, vec!["alpha", "zeta"]);
    assert_eq!((ds.train.len(), ds.test.len()), (6, 2));
    assert!(ds.train.iter().take(3).all(|s| s.label == 0));
    let cached: Dataset = load_modelnet40(root.path(), 32, 4).unwrap();
    assert_eq!(cached, ds);
    let ids: Vec<u32> = ds.train.iter().chain(&ds.test).map(|s: &Sample| s.id).collect();
    let mut unique = ids.clone();
    unique.dedup();
    assert_eq!(unique.len(), ids.len());
}
