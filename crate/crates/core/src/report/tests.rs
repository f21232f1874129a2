use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::data::{Device, DomainDataset, DomainRole, Example};
use crate::nn::presets::{clf_mlp, mlp};
use crate::nn::Model;
use crate::tensor::Tensor;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn point_set(points: &[([f32; 2], usize, Device)]) -> DomainDataset {
    let ex = points
        .iter()
        .enumerate()
        .map(|(i, (x, l, d))| {
            Example::new(
                Tensor::new(vec![2], x.to_vec()).unwrap(),
                Some(*l),
                *d,
                format!("p{i}"),
            )
        })
        .collect();
    DomainDataset::new(DomainRole::Source, names(3), ex).unwrap()
}

/// A mapper and a classifier that ignores its input and always favors `class`.
fn constant_predictor(class: usize) -> (Model<f64>, Model<f64>) {
    let m = Model::build(&mlp(2, &[4]), "m", 1).unwrap();
    let mut c = Model::build(&clf_mlp(vec![4], 3, None), "c", 2).unwrap();
    c.set_tensor("1.weight", Tensor::zeros(&[4, 3])).unwrap();
    let mut bias = vec![0.0; 3];
    bias[class] = 5.0;
    c.set_tensor("1.bias", Tensor::from_f64(&[3], &bias).unwrap())
        .unwrap();
    (m, c)
}

#[test]
fn normalize_examples() {
    let cm = |counts: Vec<Vec<u64>>| ConfusionMatrix {
        class_names: names(counts.len()),
        counts,
    };
    let id = normalize_confusion(&cm(vec![vec![5, 0], vec![0, 5]]));
    assert_eq!(id.rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(
        normalize_confusion(&cm(vec![vec![2, 2], vec![0, 1]])).rows[0],
        vec![0.5, 0.5]
    );
    let n = normalize_confusion(&cm(vec![vec![8, 2], vec![1, 9]]));
    for (row, want) in n.rows.iter().zip([[0.8, 0.2], [0.1, 0.9]]) {
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let e = normalize_confusion(&cm(vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]));
    assert_eq!(e.empty_rows, vec![1]);
    assert_eq!(e.rows[1], vec![0.0; 3]);
}

proptest! {
    #[test]
    fn normalized_rows_are_stochastic(counts in prop::collection::vec(prop::collection::vec(0u64..50, 4), 4)) {
        let cm = ConfusionMatrix { class_names: names(4), counts: counts.clone() };
        let n = normalize_confusion(&cm);
        for (i, row) in n.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if counts[i].iter().sum::<u64>() == 0 {
                prop_assert!(n.empty_rows.contains(&i));
                prop_assert_eq!(sum, 0.0);
            } else {
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn evaluation_is_order_invariant(xs in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0, 0usize..3), 1..30), shift in 0usize..30) {
        let pts: Vec<_> = xs.iter().map(|&(a, b, l)| ([a, b], l, if l == 0 { Device::A } else { Device::B })).collect();
        let ds = point_set(&pts);
        let mut rotated = pts.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        let m = Model::<f64>::build(&mlp(2, &[5]), "m", 3).unwrap();
        let c = Model::<f64>::build(&clf_mlp(vec![5], 3, None), "c", 4).unwrap();
        let a = evaluate(&m, &c, &ds).unwrap();
        let b = evaluate(&m, &c, &point_set(&rotated)).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.per_device, b.per_device);
    }
}

#[test]
fn constant_classifier_accuracy_matches_brute_force_count() {
    let labels = [0, 1, 1, 2, 1, 0];
    let pts: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| ([i as f32, -(i as f32)], l, Device::A))
        .collect();
    let ds = point_set(&pts);
    for class in 0..3 {
        let (m, c) = constant_predictor(class);
        let r = evaluate(&m, &c, &ds).unwrap();
        let count = labels.iter().filter(|&&l| l == class).count();
        assert_eq!(r.accuracy, count as f64 / 6.0);
        assert_eq!(r.confusion.total(), 6);
        for (i, row) in r.confusion.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if j != class {
                    assert_eq!(v, 0);
                } else {
                    assert_eq!(v as usize, labels.iter().filter(|&&l| l == i).count());
                }
            }
        }
    }
}

#[test]
fn perfect_predictions_give_diagonal() {
    let ds = point_set(&[([0.0, 0.0], 1, Device::A), ([1.0, 1.0], 1, Device::C)]);
    let (m, c) = constant_predictor(1);
    let r = evaluate(&m, &c, &ds).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(
        r.confusion.counts,
        vec![vec![0, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]
    );
    assert_eq!(r.per_device.len(), 2);
    assert_eq!(r.normalized.empty_rows, vec![0, 2]);
}

#[test]
fn sealed_target_is_scored_against_sealed_labels() {
    let ex = vec![
        Example::new(
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            Some(2),
            Device::B,
            "t0",
        ),
        Example::new(
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
            Some(0),
            Device::C,
            "t1",
        ),
    ];
    let ds = DomainDataset::sealed_target(names(3), ex).unwrap();
    let (m, c) = constant_predictor(2);
    assert_eq!(evaluate(&m, &c, &ds).unwrap().accuracy, 0.5);
}

#[test]
fn empty_dataset_is_a_contract_violation() {
    let ds = DomainDataset::new(DomainRole::Source, names(3), vec![]).unwrap();
    let (m, c) = constant_predictor(0);
    assert!(matches!(
        evaluate(&m, &c, &ds),
        Err(ReportError::Contract(_))
    ));
}

#[test]
fn confusion_csv_and_render() {
    let cm = ConfusionMatrix {
        class_names: vec!["a".into(), "b".into()],
        counts: vec![vec![3, 1], vec![0, 0]],
    };
    let mut buf = Vec::new();
    cm.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "reference,a,b\na,3,1\nb,0,0\n"
    );
    let text = cm.render();
    assert!(text.contains("0.750"));
    assert!(text.contains("(no examples)"));
}

fn models() -> (Model<f64>, Model<f32>) {
    let mut a =
        Model::<f64>::build(&crate::nn::presets::dcase_m(vec![1, 64, 429]), "m_s", 5).unwrap();
    // Non-default buffers so their round trip is meaningful too.
    let names: Vec<String> = a.buffers().map(|(n, _)| n.to_string()).collect();
    for (k, n) in names.iter().enumerate() {
        let shape = a
            .buffers()
            .find(|(m, _)| m == n)
            .unwrap()
            .1
            .shape()
            .to_vec();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|i| 0.1 + (i + k) as f64 / 7.0).collect();
        a.set_tensor(n, Tensor::from_f64(&shape, &data).unwrap())
            .unwrap();
    }
    let b = Model::<f32>::build(&clf_mlp(vec![3], 2, Some(&[4])), "c", 6).unwrap();
    (a, b)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.adda");
    let (a, _) = models();
    let c = Model::<f64>::build(&clf_mlp(vec![3], 2, Some(&[4])), "c", 6).unwrap();
    let prov = BTreeMap::from([("seed".to_string(), "5".to_string())]);
    save_checkpoint(&path, &[&a, &c], &prov).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.provenance(), &prov);
    assert_eq!(ck.instances().collect::<Vec<_>>(), vec!["m_s", "c"]);
    let a2: Model<f64> = ck.model("m_s", Some(a.spec())).unwrap();
    let c2: Model<f64> = ck.model("c", None).unwrap();
    assert!(a2.same_weights(&a));
    assert!(c2.same_weights(&c));
    assert_eq!(a2.spec().digest(), a.spec().digest());
}

#[test]
fn checkpoint_keeps_f32_bits_and_converts_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.adda");
    let (_, b) = models();
    save_checkpoint(&path, &[&b], &BTreeMap::new()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let same: Model<f32> = ck.model("c", None).unwrap();
    assert!(same.same_weights(&b));
    let wide: Model<f64> = ck.model("c", None).unwrap();
    for ((_, x), (_, y)) in wide.params().zip(b.params()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| *p == *q as f64));
    }
}

#[test]
fn digest_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.adda");
    let (_, b) = models();
    save_checkpoint(&path, &[&b], &BTreeMap::new()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let other = clf_mlp(vec![3], 2, Some(&[5]));
    assert!(matches!(
        ck.model::<f32>("c", Some(&other)),
        Err(ContainerError::DigestMismatch { .. })
    ));
}

#[test]
fn truncation_mid_tensor_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.adda");
    let (a, _) = models();
    save_checkpoint(&path, &[&a], &BTreeMap::new()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let c = Container::from_bytes(bytes.clone()).unwrap();
    let last = c.header.tensors.iter().max_by_key(|t| t.offset).unwrap();
    let cut = 16 + header_len + last.offset as usize + last.length as usize / 2;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    match load_checkpoint(&path) {
        Err(ContainerError::Truncated { needed, actual }) => {
            assert_eq!(actual as usize, cut);
            assert_eq!(needed as usize, bytes.len());
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    // Inside the header as well.
    assert!(matches!(
        Container::from_bytes(bytes[..20].to_vec()),
        Err(ContainerError::Truncated { .. })
    ));
}

#[test]
fn bad_magic_and_version_are_distinct() {
    let w = ContainerWriter::new();
    let mut bytes = w.to_bytes("checkpoint", serde_json::json!({}));
    assert!(Container::from_bytes(bytes.clone()).is_ok());
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Container::from_bytes(bytes.clone()),
        Err(ContainerError::UnsupportedVersion { found: 2 })
    ));
    bytes[0] = b'X';
    assert!(matches!(
        Container::from_bytes(bytes),
        Err(ContainerError::BadMagic)
    ));
}

#[test]
fn container_layout_is_little_endian() {
    let mut w = ContainerWriter::new();
    w.push("x", &Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap());
    let bytes = w.to_bytes("k", serde_json::Value::Null);
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let n = bytes.len();
    assert_eq!(&bytes[n - 8..n - 4], &1.0f32.to_le_bytes());
    assert_eq!(&bytes[n - 4..], &(-2.5f32).to_le_bytes());
}

#[test]
fn feature_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.adda");
    let m = crate::features::Matrix {
        rows: 2,
        cols: 3,
        data: vec![0.5, -1.0, 2.0, 3.25, 0.0, -7.5],
    };
    let store = FeatureStore {
        config: Default::default(),
        clips: BTreeMap::from([("clip".to_string(), m)]),
    };
    store.save(&path).unwrap();
    assert_eq!(FeatureStore::load(&path).unwrap(), store);
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_defaults_depend_on_mode() {
    let synth = RunConfig::from_toml("mode = \"synth\"", &Overrides::default()).unwrap();
    assert_eq!(synth.models.mapper, "mlp");
    assert_eq!(synth.adapt.composition.per_target, vec![6]);
    let cfg = RunConfig::defaults(Mode::Pretrain, 0);
    assert_eq!(cfg.models.mapper, "kaggle_m");
    assert_eq!(
        (
            cfg.pretrain.epochs,
            cfg.pretrain.batch_size,
            cfg.adapt.epochs
        ),
        (350, 38, 300)
    );
    assert_eq!(cfg.adapt.composition.per_target, vec![3, 3]);
}

#[test]
fn config_overlays_fields_and_rejects_unknown_keys() {
    let text =
        "mode = \"synth\"\nseed = 4\n[adapt]\nepochs = 3\n[models.options]\nmlp_widths = [8]\n";
    let cfg = RunConfig::from_toml(text, &Overrides::default()).unwrap();
    assert_eq!(cfg.adapt.epochs, 3);
    assert_eq!(cfg.adapt.d_every, 10);
    assert_eq!(cfg.models.options.mlp_widths, vec![8]);
    assert_eq!(cfg.models.options.n_classes, 3);
    assert_eq!(cfg.adapt.seed, crate::seed::derive(4, "adapt"));
    for bad in [
        "mode = \"synth\"\ncolour = 1",
        "mode = \"synth\"\n[adapt]\nepoch = 3",
        "mode = \"synth\"\n[adapt]\nseed = 3",
        "mode = \"synth\"\n[models]\nmapper = \"resnet\"",
        "mode = \"pretrain\"",
        "seed = 1",
    ] {
        assert!(
            matches!(
                RunConfig::from_toml(bad, &Overrides::default()),
                Err(ReportError::Config(_))
            ),
            "{bad}"
        );
    }
}

#[test]
fn overrides_win_and_mode_conflicts_fail() {
    let o = Overrides {
        mode: Some(Mode::Synth),
        seed: Some(9),
        out: Some("x".into()),
        precision: Some(crate::Precision::F32),
    };
    let cfg = RunConfig::from_toml("seed = 1\nout = \"y\"", &o).unwrap();
    assert_eq!(
        (cfg.seed, cfg.out.to_str().unwrap(), cfg.precision),
        (9, "x", crate::Precision::F32)
    );
    let err = RunConfig::from_toml("mode = \"adapt\"", &o);
    assert!(matches!(err, Err(ReportError::Config(_))));
}

#[test]
fn digest_ignores_output_directory_only() {
    let a = RunConfig::defaults(Mode::Synth, 1);
    let mut b = a.clone();
    b.out = "elsewhere".into();
    assert_eq!(a.digest(), b.digest());
    b.adapt.epochs += 1;
    assert_ne!(a.digest(), b.digest());
    assert_ne!(a.digest(), RunConfig::defaults(Mode::Synth, 2).digest());
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let mut a = RunConfig::defaults(Mode::Synth, 7);
    a.adapt.d_lr = Some(3e-4);
    let b = RunConfig::from_toml(&a.to_toml(), &Overrides::default()).unwrap();
    assert_eq!(a, b);
}

fn tiny_synth(dir: &std::path::Path, seed: u64) -> RunConfig {
    let text = format!(
        "mode = \"synth\"\nseed = {seed}\nout = \"{}\"\n[synthetic]\nper_class = 40\n[pretrain]\nepochs = 3\n[adapt]\nepochs = 2\n",
        dir.display()
    );
    RunConfig::from_toml(&text, &Overrides::default()).unwrap()
}

#[test]
fn synth_run_writes_reports_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny_synth(&root.path().join("a"), 3)).unwrap();
    let b = run_experiment(&tiny_synth(&root.path().join("b"), 3)).unwrap();
    assert_eq!(a.config_digest, b.config_digest);
    let files: Vec<_> = a
        .artifacts
        .iter()
        .map(|p| p.file_name().unwrap().to_owned())
        .collect();
    for want in [
        "report.json",
        "pretrained.adda",
        "adapted.adda",
        "adapt_trace.csv",
        "confusion_adapted_target.csv",
    ] {
        assert!(files.iter().any(|f| f == want), "{want} missing");
    }
    for (pa, pb) in a.artifacts.iter().zip(&b.artifacts) {
        if pa.file_name().unwrap() == "config.toml" {
            continue;
        }
        assert_eq!(
            std::fs::read(pa).unwrap(),
            std::fs::read(pb).unwrap(),
            "{}",
            pa.display()
        );
    }
    let report: ComparisonReport =
        serde_json::from_slice(&std::fs::read(root.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report.config_digest, a.config_digest);
    for model in [ModelIdentity::NonAdapted, ModelIdentity::Adapted] {
        for domain in ["source", "target"] {
            let acc = report.table.get(model, domain).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    let ck = load_checkpoint(&root.path().join("a/adapted.adda")).unwrap();
    assert_eq!(ck.provenance()["config_digest"], a.config_digest);
}

#[test]
fn evaluate_mode_refuses_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "clip_id,path,device,scene\n").unwrap();
    let store = dir.path().join("f.adda");
    FeatureStore::default().save(&store).unwrap();
    let ck = dir.path().join("ck.adda");
    let (_, b) = models();
    save_checkpoint(&ck, &[&b], &BTreeMap::new()).unwrap();
    let text = format!(
        "mode = \"evaluate\"\nout = \"{}\"\n[dataset]\nmanifest = \"{}\"\nfeatures = \"{}\"\n[checkpoints]\npretrained = \"{}\"\n",
        dir.path().join("out").display(),
        manifest.display(),
        store.display(),
        ck.display()
    );
    let cfg = RunConfig::from_toml(&text, &Overrides::default()).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, ReportError::Contract(_)), "{err}");
    assert!(err.to_string().contains("empty"));
}
