use std::collections::{BTreeMap, HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{mel_filterbank, MelScale};

fn multiplicities(idx: &[usize], n: usize) -> Vec<usize> {
    let mut m = vec![0; n];
    for &i in idx {
        m[i] += 1;
    }
    m
}

fn manifest(counts: &[(Device, usize)]) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for &(device, n) in counts {
        for i in 0..n {
            out.push(ManifestEntry {
                clip_id: format!("{device}-{i:05}"),
                path: format!("audio/{device}-{i:05}.wav"),
                device,
                scene: Some(SCENES[i % 10].to_string()),
            });
        }
    }
    out
}

#[test]
fn oversampling_972_to_5510() {
    let idx = oversample_indices(972, 5510, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(idx.len(), 5510);
    let m = multiplicities(&idx, 972);
    assert!(m.iter().all(|&c| c == 5 || c == 6));
    // 5510 = 5·972 + 650 → 650 clips appear six times.
    assert_eq!(m.iter().filter(|&&c| c == 6).count(), 5510 - 5 * 972);
}

#[test]
fn oversampling_small_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = multiplicities(&oversample_indices(3, 8, &mut rng), 3);
    m.sort();
    assert_eq!(m, vec![2, 3, 3]);
    let mut same = oversample_indices(7, 7, &mut rng);
    same.sort();
    assert_eq!(same, (0..7).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn oversampling_is_balanced(n_t in 1usize..60, n_source in 1usize..400, seed in 0u64..1000) {
        let idx = oversample_indices(n_t, n_source, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), n_source);
        let m = multiplicities(&idx, n_t);
        prop_assert!(m.iter().max().unwrap() - m.iter().min().unwrap() <= 1);
    }
}

#[test]
fn pretrain_batches_cover_the_set() {
    let mut b = compose_pretrain_batches(5510, 38, 3);
    let epoch = b.next_epoch();
    assert_eq!(epoch.len(), 145);
    assert!(epoch.iter().all(|x| x.len() == 38));
    let mut all: Vec<usize> = epoch.concat();
    all.sort();
    assert_eq!(all, (0..5510).collect::<Vec<_>>());

    let short = compose_pretrain_batches(10, 38, 3).next_epoch();
    assert_eq!(short.iter().map(Vec::len).collect::<Vec<_>>(), vec![10]);
}

#[test]
fn pretrain_batches_are_seeded() {
    let mut a = compose_pretrain_batches(100, 38, 9);
    let mut b = compose_pretrain_batches(100, 38, 9);
    let (a1, a2) = (a.next_epoch(), a.next_epoch());
    assert_eq!(a1, b.next_epoch());
    assert_eq!(a2, b.next_epoch());
    assert_ne!(a1, a2);
}

#[test]
fn adapt_batches_device_composition() {
    let mut b = compose_adapt_batches(5510, &[486, 486], Composition::devices(), 4).unwrap();
    // Each of B and C is oversampled to 2755; 2755 / 3 = 918 full batches.
    assert_eq!(b.batches_per_epoch(), 918);
    for _ in 0..2 {
        let epoch = b.next_epoch();
        assert_eq!(epoch.len(), 918);
        for batch in &epoch {
            assert_eq!(batch.source.len(), 10);
            assert_eq!(
                batch.target.iter().map(Vec::len).collect::<Vec<_>>(),
                vec![3, 3]
            );
            assert!(batch.source.iter().all(|&i| i < 5510));
            assert!(batch.target.iter().flatten().all(|&i| i < 486));
        }
    }
}

#[test]
fn adapt_batches_single_target() {
    let mut b = compose_adapt_batches(5510, &[972], Composition::single(), 4).unwrap();
    assert_eq!(b.batches_per_epoch(), 5510 / 6);
    let epoch = b.next_epoch();
    assert!(epoch
        .iter()
        .all(|x| x.source.len() == 10 && x.target.len() == 1 && x.target[0].len() == 6));
    // Target coverage within an epoch follows the oversampled multiset.
    let m = multiplicities(
        &epoch
            .iter()
            .flat_map(|x| x.target[0].clone())
            .collect::<Vec<_>>(),
        972,
    );
    assert!(m.iter().all(|&c| c <= 6));
}

#[test]
fn adapt_batches_source_cycles_through_everything() {
    let mut b = compose_adapt_batches(30, &[60], Composition::single(), 1).unwrap();
    let epoch = b.next_epoch();
    assert_eq!(epoch.len(), 5);
    let src: Vec<usize> = epoch
        .iter()
        .take(3)
        .flat_map(|x| x.source.clone())
        .collect();
    assert_eq!(src.iter().copied().collect::<HashSet<_>>().len(), 30);
}

#[test]
fn adapt_batches_reject_bad_composition() {
    assert!(compose_adapt_batches(10, &[5], Composition::devices(), 0).is_err());
    assert!(compose_adapt_batches(10, &[0], Composition::single(), 0).is_err());
    let zero = Composition {
        source: 0,
        per_target: vec![6],
    };
    assert!(compose_adapt_batches(10, &[5], zero, 0).is_err());
}

#[test]
fn full_corpus_split_counts() {
    let m = manifest(&[(Device::A, 8640), (Device::B, 720), (Device::C, 720)]);
    let plan = SplitPlan::for_manifest(&m, 5);
    let s = split_dataset(&m, &plan).unwrap();
    let count = |set: &[ManifestEntry], d: Device| set.iter().filter(|e| e.device == d).count();
    for (d, [tr, va, te]) in CORPUS_SPLIT {
        assert_eq!(
            (
                count(&s.train, d),
                count(&s.validation, d),
                count(&s.test, d)
            ),
            (tr, va, te),
            "{d}"
        );
    }
    let ids: Vec<&str> = [&s.train, &s.validation, &s.test]
        .iter()
        .flat_map(|x| x.iter())
        .map(|e| e.clip_id.as_str())
        .collect();
    assert_eq!(ids.len(), m.len());
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), m.len());
}

#[test]
fn proportional_split_of_100_files() {
    let totals = BTreeMap::from([(Device::A, 100)]);
    let plan = SplitPlan::proportional(&totals, 0);
    // Independent ratio arithmetic: floor(100·612/8640) = 7,
    // floor(100·2518/8640) = 29, train takes the remaining 64.
    let val = (100.0f64 * 612.0 / 8640.0).floor() as usize;
    let test = (100.0f64 * 2518.0 / 8640.0).floor() as usize;
    assert_eq!(plan.counts[&Device::A], [100 - val - test, val, test]);
    assert_eq!(plan.counts[&Device::A], [64, 7, 29]);
}

#[test]
fn explicit_plan_and_over_allocation() {
    let m = manifest(&[(Device::A, 10)]);
    let plan = SplitPlan {
        counts: BTreeMap::from([(Device::A, [10, 0, 0])]),
        seed: 0,
    };
    assert_eq!(split_dataset(&m, &plan).unwrap().train.len(), 10);
    let plan = SplitPlan {
        counts: BTreeMap::from([(Device::A, [8, 2, 1])]),
        seed: 0,
    };
    assert!(matches!(
        split_dataset(&m, &plan),
        Err(DataError::Allocation {
            requested: 11,
            available: 10,
            ..
        })
    ));
}

#[test]
fn split_is_seeded() {
    let m = manifest(&[(Device::A, 50), (Device::B, 20)]);
    let a = split_dataset(&m, &SplitPlan::for_manifest(&m, 1)).unwrap();
    let b = split_dataset(&m, &SplitPlan::for_manifest(&m, 1)).unwrap();
    let c = split_dataset(&m, &SplitPlan::for_manifest(&m, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, c.train);
}

#[test]
fn manifest_parsing() {
    let text = "clip_id,path,device,scene\nx1,a/x1.wav,a,metro station\nx2,a/x2.wav,B,\n";
    let m = parse_manifest(text.as_bytes()).unwrap();
    assert_eq!(m[0].device, Device::A);
    assert_eq!(m[0].label().unwrap(), Some(3));
    assert_eq!((m[1].device, m[1].scene.clone()), (Device::B, None));
    assert!(parse_manifest("clip_id,path,device,scene\nx,p,z,park\n".as_bytes()).is_err());
    assert!(parse_manifest("clip_id,path,device,scene\nx,p,a,beach\n".as_bytes()).is_err());
}

#[test]
fn sealed_labels_are_hidden_from_training() {
    let pair = synth_domain_pair(&SyntheticShiftConfig {
        per_class: 4,
        ..Default::default()
    })
    .unwrap();
    let t = &pair.target;
    assert!(t.examples().iter().all(|e| e.label.is_none()));
    assert!(t.one_hot::<f64>(&[0]).is_err());
    let labels = t.evaluation_labels().unwrap();
    assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    assert!(pair.source.one_hot::<f64>(&[0, 5]).is_ok());
}

#[test]
fn dataset_invariants() {
    let ex = |shape: Vec<usize>, label| Example::new(Tensor::zeros(&shape), label, Device::A, "x");
    let names = vec!["a".to_string(), "b".to_string()];
    assert!(DomainDataset::new(
        DomainRole::Source,
        names.clone(),
        vec![ex(vec![2], Some(0)), ex(vec![3], Some(1))]
    )
    .is_err());
    assert!(
        DomainDataset::new(DomainRole::Source, names.clone(), vec![ex(vec![2], None)]).is_err()
    );
    assert!(DomainDataset::new(
        DomainRole::Source,
        names.clone(),
        vec![ex(vec![2], Some(2))]
    )
    .is_err());
    assert!(DomainDataset::new(DomainRole::Target, names, vec![ex(vec![2], None)]).is_ok());
}

#[test]
fn zero_shift_matches_source_distribution() {
    let cfg = SyntheticShiftConfig::default().unshifted();
    let pair = synth_domain_pair(&cfg).unwrap();
    let labels = pair.target.evaluation_labels().unwrap();
    for k in 0..cfg.n_classes {
        let mean = |ds: &DomainDataset, labels: &[usize]| {
            let rows: Vec<_> = ds
                .examples()
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == k)
                .map(|(e, _)| e.features.clone())
                .collect();
            let n = rows.len() as f64;
            [0, 1].map(|d| rows.iter().map(|r| r.data()[d] as f64).sum::<f64>() / n)
        };
        let src_labels: Vec<usize> = pair
            .source
            .examples()
            .iter()
            .map(|e| e.label.unwrap())
            .collect();
        let (ms, mt) = (mean(&pair.source, &src_labels), mean(&pair.target, &labels));
        // Difference of two independent sample means: σ·sqrt(2/n).
        let bound = 3.0 * cfg.spread * (2.0 / cfg.per_class as f64).sqrt();
        assert!(
            (ms[0] - mt[0]).abs() <= bound && (ms[1] - mt[1]).abs() <= bound,
            "class {k}: {ms:?} vs {mt:?}"
        );
    }
}

#[test]
fn translation_moves_class_means() {
    let cfg = SyntheticShiftConfig {
        translation: [5.0, 0.0],
        ..SyntheticShiftConfig::default().unshifted()
    };
    let pair = synth_domain_pair(&cfg).unwrap();
    let labels = pair.target.evaluation_labels().unwrap();
    for k in 0..cfg.n_classes {
        let pts: Vec<_> = pair
            .target
            .examples()
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == k)
            .map(|(e, _)| e.features.clone())
            .collect();
        let n = pts.len() as f64;
        let m = [0, 1].map(|d| pts.iter().map(|r| r.data()[d] as f64).sum::<f64>() / n);
        let want = cfg.class_mean(k);
        let bound = 3.0 * cfg.spread / n.sqrt();
        assert!((m[0] - want[0] - 5.0).abs() <= bound && (m[1] - want[1]).abs() <= bound);
    }
}

#[test]
fn synthetic_pairs_are_reproducible() {
    let cfg = SyntheticShiftConfig {
        seed: 11,
        ..Default::default()
    };
    let (a, b) = (
        synth_domain_pair(&cfg).unwrap(),
        synth_domain_pair(&cfg).unwrap(),
    );
    for (x, y) in a.target.examples().iter().zip(b.target.examples()) {
        assert!(x.features.bitwise_eq(&y.features));
    }
    let c = synth_domain_pair(&SyntheticShiftConfig { seed: 12, ..cfg }).unwrap();
    assert!(!a.source.examples()[0]
        .features
        .bitwise_eq(&c.source.examples()[0].features));
}

#[test]
fn channel_shift_examples() {
    let bank = mel_filterbank(64, 44_100, 2048, 0.0, 22_050.0, MelScale::Slaney).unwrap();
    let centers = bank.centers_hz();
    let x = Matrix {
        rows: 64,
        cols: 3,
        data: (0..192).map(|i| (i as f64) * 0.01 - 1.0).collect(),
    };
    assert_eq!(apply_channel_shift(&x, centers, 0.0, 0.0, 0.0).unwrap(), x);

    let y = apply_channel_shift(&x, centers, 0.0, 6.0, 0.0).unwrap();
    for (a, b) in x.data.iter().zip(&y.data) {
        assert!((b - a - 1.381551).abs() < 1e-6);
    }

    let offsets = channel_offsets(centers, 3.0, 0.0);
    assert!(offsets.windows(2).all(|w| w[0] <= w[1]));
    // A band centered near 2 kHz sits one octave above the reference.
    let two_k = channel_offsets(&[2000.0], 3.0, 0.0)[0];
    assert!((two_k - 0.3 * 10f64.ln()).abs() < 1e-12);

    let floored = apply_channel_shift(&x, centers, 0.0, 0.0, 0.5).unwrap();
    assert!(floored.data.iter().all(|&v| v >= 0.5f64.ln()));
    assert!(apply_channel_shift(&x, &centers[1..], 0.0, 0.0, 0.0).is_err());
}

#[test]
fn scene_names_normalize() {
    assert_eq!(scene_index("street-traffic"), Some(8));
    assert_eq!(scene_index("Shopping Mall"), Some(6));
    assert_eq!(scene_index("beach"), None);
    let unique: HashMap<_, _> = SCENES.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    assert_eq!(unique.len(), 10);
}
