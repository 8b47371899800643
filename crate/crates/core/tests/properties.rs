//! Property tests across module boundaries.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use fundus_core::augmentation::{augment_split, AugmentationConfig};
use fundus_core::backbone::{
    extract_features, head_param_count, Backbone, BackboneManifest, Preprocessing, StubBackbone,
};
use fundus_core::dataset::{
    load_image, materialize_split, scan_dataset, stratified_split, DatasetManifest, ImageTensor, Record, Split,
    SplitRatios,
};
use fundus_core::ensemble::{average_ensemble, weighted_ensemble, ProbabilityMatrix};
use fundus_core::head::{batch_loss, gradients, softmax, train, SoftmaxHead, TrainConfig};
use fundus_core::metrics::{
    accuracy, precision_recall_f1_specificity, weighted_average, ConfusionMatrix, MetricsReport,
};
use fundus_core::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn synthetic_manifest(sizes: &[usize]) -> DatasetManifest {
    let classes: Vec<String> = (0..sizes.len()).map(|k| format!("class{k}")).collect();
    let records = sizes
        .iter()
        .enumerate()
        .flat_map(|(label, &n)| {
            (0..n).map(move |i| Record {
                path: PathBuf::from(format!("class{label}/{i:05}.png")),
                label,
                split: Split::Unassigned,
            })
        })
        .collect();
    DatasetManifest::new(classes, records).unwrap()
}

fn ratios() -> impl Strategy<Value = SplitRatios> {
    (0.05f64..0.9, 0.05f64..0.9).prop_filter_map("test share must be positive", |(a, b)| {
        let train = a;
        let val = (1.0 - a) * b;
        let test = 1.0 - train - val;
        (test > 0.01).then(|| SplitRatios { train, val, test })
    })
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageTensor {
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..=1.0f32)).collect();
    ImageTensor::new(h, w, data).unwrap()
}

fn stub(grid: usize, input: usize, preprocessing: Preprocessing) -> Backbone {
    let mut manifest = BackboneManifest::stub("stub", grid, input);
    manifest.preprocessing = preprocessing;
    Backbone::with_extractor(manifest, Box::new(StubBackbone::new(grid, input, input).unwrap()))
}

fn prob_matrices(rng: &mut impl Rng, m: usize, n: usize, c: usize) -> Vec<ProbabilityMatrix> {
    let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
    (0..m)
        .map(|k| {
            let mut vals = Vec::with_capacity(n * c);
            for _ in 0..n {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.001..1.0)).collect();
                let s: f64 = raw.iter().sum();
                vals.extend(raw.iter().map(|v| v / s));
            }
            ProbabilityMatrix::new(format!("m{k}"), ids.clone(), c, vals).unwrap()
        })
        .collect()
}

fn labels(rng: &mut impl Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(sizes in prop::collection::vec(3usize..120, 1..4), r in ratios(), s in any::<u64>()) {
        let m = synthetic_manifest(&sizes);
        let split = stratified_split(&m, &r, s);
        prop_assume!(split.is_ok());
        let split = split.unwrap();
        prop_assert!(split.is_fully_split());
        prop_assert_eq!(split.len(), m.len());
        let paths: HashSet<_> = split.records().iter().map(|rec| rec.path.clone()).collect();
        prop_assert_eq!(paths.len(), m.len());
        for (k, &n) in sizes.iter().enumerate() {
            let per: Vec<usize> = Split::ASSIGNED.iter().map(|&sp| split.split_counts(sp)[k]).collect();
            prop_assert_eq!(per.iter().sum::<usize>(), n);
            let floor = |ratio: f64| ((n as f64) * ratio + 1e-9 * (n as f64 * ratio).max(1.0)).floor() as usize;
            prop_assert_eq!(per[0], floor(r.train));
            prop_assert_eq!(per[1], floor(r.val));
            prop_assert_eq!(per[2], n - floor(r.train) - floor(r.val));
        }
    }

    #[test]
    fn split_counts_ignore_seed_membership_follows_it(sizes in prop::collection::vec(3usize..80, 1..4), a in any::<u64>(), b in any::<u64>()) {
        let m = synthetic_manifest(&sizes);
        let r = SplitRatios::default();
        let x = stratified_split(&m, &r, a).unwrap();
        let y = stratified_split(&m, &r, b).unwrap();
        for sp in Split::ASSIGNED {
            prop_assert_eq!(x.split_counts(sp), y.split_counts(sp));
        }
        prop_assert_eq!(stratified_split(&m, &r, a).unwrap(), x);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-800.0f64..800.0, 1..6)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let spread = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - logits.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread < 700.0 {
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn head_size_matches_parameter_count(d in 1usize..3000, c in 1usize..6) {
        prop_assert_eq!(SoftmaxHead::zeros(d, c).param_count(), head_param_count(d, c));
        prop_assert_eq!(head_param_count(d, c), (d + 1) * c);
    }

    #[test]
    fn gradient_descent_does_not_increase_loss(s in any::<u64>(), d in 1usize..16, n in 1usize..12) {
        let mut rng = seed::rng(s);
        let c = 2;
        let mut head = SoftmaxHead::glorot(d, c, &mut rng);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys = labels(&mut rng, n, c);
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut prev = batch_loss(&head, &inputs, &ys, None).unwrap();
        for _ in 0..5 {
            let g = gradients(&head, &inputs, &ys, None).unwrap();
            let w: Vec<f64> = head.weights().iter().zip(&g.weights).map(|(w, g)| w - 0.01 * g).collect();
            let b: Vec<f64> = head.bias().iter().zip(&g.bias).map(|(b, g)| b - 0.01 * g).collect();
            head = SoftmaxHead::from_parts(d, c, w, b).unwrap();
            let loss = batch_loss(&head, &inputs, &ys, None).unwrap();
            prop_assert!(loss <= prev + 1e-15, "{} -> {}", prev, loss);
            prev = loss;
        }
    }

    #[test]
    fn weight_rescaling_preserves_predictions(s in any::<u64>(), m in 1usize..5, n in 1usize..15, c in 2usize..5, k in 0.001f64..1000.0) {
        let mut rng = seed::rng(s);
        let mats = prob_matrices(&mut rng, m, n, c);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..10.0)).collect();
        let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
        prop_assert_eq!(weighted_ensemble(&mats, &w).unwrap(), weighted_ensemble(&mats, &scaled).unwrap());
        prop_assert_eq!(weighted_ensemble(&mats, &vec![1.0; m]).unwrap(), average_ensemble(&mats).unwrap());
    }

    #[test]
    fn ensemble_member_order_and_unanimity(s in any::<u64>(), m in 1usize..5, n in 1usize..15, c in 2usize..5) {
        let mut rng = seed::rng(s);
        let mats = prob_matrices(&mut rng, m, n, c);
        let avg = average_ensemble(&mats).unwrap();
        let mut shuffled = mats.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(average_ensemble(&shuffled).unwrap(), avg.clone());
        for i in 0..n {
            let votes: Vec<usize> = mats.iter().map(|mat| mat.argmax().indices[i]).collect();
            if votes.iter().all(|&v| v == votes[0]) {
                prop_assert_eq!(avg.indices[i], votes[0]);
            }
        }
    }

    #[test]
    fn ensemble_matches_cellwise_oracle(s in any::<u64>(), m in 1usize..=3, n in 1usize..=6, c in 1usize..=3) {
        let mut rng = seed::rng(s);
        let mats = prob_matrices(&mut rng, m, n, c);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
        let avg = average_ensemble(&mats).unwrap();
        let weighted = weighted_ensemble(&mats, &w).unwrap();
        for i in 0..n {
            let mut best = (0, f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for j in 0..c {
                let mut plain = 0.0;
                let mut scaled = 0.0;
                for (k, mat) in mats.iter().enumerate() {
                    plain += mat.values()[i * c + j];
                    scaled += w[k] * mat.values()[i * c + j];
                }
                if plain > best.1 {
                    best.0 = j;
                    best.1 = plain;
                }
                if scaled > best.3 {
                    best.2 = j;
                    best.3 = scaled;
                }
            }
            prop_assert_eq!(avg.indices[i], best.0);
            prop_assert_eq!(weighted.indices[i], best.2);
        }
    }

    #[test]
    fn confusion_totals(s in any::<u64>(), n in 1usize..=50, c in 1usize..=4) {
        let mut rng = seed::rng(s);
        let (t, p) = (labels(&mut rng, n, c), labels(&mut rng, n, c));
        let cm = ConfusionMatrix::from_predictions(&t, &p, c).unwrap();
        let per: Vec<_> = (0..c).map(|k| precision_recall_f1_specificity(&cm, k)).collect();
        prop_assert_eq!(per.iter().map(|m| m.tp).sum::<u64>(), cm.trace());
        prop_assert_eq!(per.iter().map(|m| m.support).sum::<u64>(), n as u64);
    }

    #[test]
    fn binary_accuracy_is_weighted_recall(s in any::<u64>(), n in 1usize..=50) {
        let mut rng = seed::rng(s);
        let (t, p) = (labels(&mut rng, n, 2), labels(&mut rng, n, 2));
        let cm = ConfusionMatrix::from_predictions(&t, &p, 2).unwrap();
        let per: Vec<_> = (0..2).map(|k| precision_recall_f1_specificity(&cm, k)).collect();
        let recall: Vec<f64> = per.iter().map(|m| m.recall).collect();
        let support: Vec<u64> = per.iter().map(|m| m.support).collect();
        let acc = accuracy(&cm).unwrap();
        prop_assert!((weighted_average(&recall, &support).unwrap() - acc).abs() < 1e-9);
        let names = vec!["a".to_string(), "b".to_string()];
        prop_assert_eq!(MetricsReport::compute("m", &cm, &names, "a").unwrap().weighted_avg.recall, acc);
    }

    #[test]
    fn f1_between_precision_and_recall(s in any::<u64>(), n in 1usize..=50, c in 1usize..=4) {
        let mut rng = seed::rng(s);
        let (t, p) = (labels(&mut rng, n, c), labels(&mut rng, n, c));
        let cm = ConfusionMatrix::from_predictions(&t, &p, c).unwrap();
        for k in 0..c {
            let m = precision_recall_f1_specificity(&cm, k);
            let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
            if lo > 0.0 {
                prop_assert!(m.f1 >= lo - 1e-9 && m.f1 <= hi + 1e-9);
            } else {
                prop_assert_eq!(m.f1, 0.0);
            }
            if m.precision == m.recall {
                prop_assert!((m.f1 - m.precision).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn metrics_follow_class_relabeling(s in any::<u64>(), n in 1usize..=50, c in 1usize..=4) {
        let mut rng = seed::rng(s);
        let (t, p) = (labels(&mut rng, n, c), labels(&mut rng, n, c));
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let t2: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
        let p2: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let names: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let names2: Vec<String> = (0..c).map(|k| names[perm.iter().position(|&q| q == k).unwrap()].clone()).collect();
        let a = MetricsReport::compute("m", &ConfusionMatrix::from_predictions(&t, &p, c).unwrap(), &names, "c0").unwrap();
        let b = MetricsReport::compute("m", &ConfusionMatrix::from_predictions(&t2, &p2, c).unwrap(), &names2, "c0").unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        for k in 0..c {
            let (x, y) = (&a.per_class[k], &b.per_class[perm[k]]);
            prop_assert_eq!((x.tp, x.fp, x.fn_, x.tn), (y.tp, y.fp, y.fn_, y.tn));
            prop_assert_eq!((x.precision, x.recall, x.f1, x.specificity), (y.precision, y.recall, y.f1, y.specificity));
        }
        for (u, v) in [(a.macro_avg, b.macro_avg), (a.weighted_avg, b.weighted_avg)] {
            prop_assert!((u.precision - v.precision).abs() < 1e-9);
            prop_assert!((u.recall - v.recall).abs() < 1e-9);
            prop_assert!((u.f1 - v.f1).abs() < 1e-9);
        }
        prop_assert_eq!(a.sensitivity, b.sensitivity);
        prop_assert_eq!(a.specificity, b.specificity);
    }

    #[test]
    fn features_are_finite_ordered_and_repeatable(s in any::<u64>(), count in 1usize..8, grid in 1usize..4) {
        let mut rng = seed::rng(s);
        let input = grid * 4;
        let images: Vec<ImageTensor> = (0..count).map(|_| random_image(&mut rng, input, input)).collect();
        let ids: Vec<String> = (0..count).map(|i| format!("r{i}")).collect();
        for mode in [Preprocessing::Scale01, Preprocessing::ScalePm1, Preprocessing::ImagenetMeanStd] {
            let b = stub(grid, input, mode);
            let f = extract_features(&b, &images, ids.clone()).unwrap();
            prop_assert!(f.data().iter().all(|v| v.is_finite()));
            prop_assert_eq!(&extract_features(&b, &images, ids.clone()).unwrap(), &f);
            let reversed: Vec<ImageTensor> = images.iter().rev().cloned().collect();
            let r = extract_features(&b, &reversed, ids.iter().rev().cloned().collect()).unwrap();
            for i in 0..count {
                prop_assert_eq!(r.row(count - 1 - i), f.row(i));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_is_bit_reproducible(s in any::<u64>(), d in 1usize..10) {
        let mut rng = seed::rng(s);
        let n = 40;
        let ys = labels(&mut rng, n, 2);
        let data: Vec<f32> = ys.iter().flat_map(|&y| (0..d).map(move |j| (y as f32 - 0.5) * (j as f32 + 1.0))).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let x = fundus_core::backbone::FeatureMatrix::new(d, data, ids).unwrap();
        let config = TrainConfig { epochs: 3, seed: s, ..TrainConfig::default() };
        let a = train(&x, &ys, &x, &ys, 2, &config).unwrap();
        let b = train(&x, &ys, &x, &ys, 2, &config).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn load_image_is_idempotent_at_size(s in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let mut rng = seed::rng(s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        random_image(&mut rng, h, w).save_png(&path).unwrap();
        let once = load_image(&path, h, w).unwrap();
        let copy = dir.path().join("y.png");
        once.save_png(&copy).unwrap();
        let twice = load_image(&copy, h, w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn augmentation_leaves_val_and_test_alone_and_repeats(s in any::<u64>(), multiplier in 0usize..3) {
        let mut rng = seed::rng(s);
        let root = tempfile::tempdir().unwrap();
        let src = root.path().join("src");
        for class in ["a", "b"] {
            fs::create_dir_all(src.join(class)).unwrap();
            for i in 0..7 {
                random_image(&mut rng, 10, 12).save_png(&src.join(class).join(format!("{i}.png"))).unwrap();
            }
        }
        let split = stratified_split(&scan_dataset(&src).unwrap(), &SplitRatios::default(), s).unwrap();
        let base = root.path().join("split");
        let m = materialize_split(&split, &base).unwrap();
        let before: Vec<(PathBuf, Vec<u8>)> = m
            .records()
            .iter()
            .filter(|r| r.split != Split::Train)
            .map(|r| (r.path.clone(), fs::read(base.join(&r.path)).unwrap()))
            .collect();
        let config = AugmentationConfig { multiplier, ..AugmentationConfig::default() };
        let full = augment_split(&m, &base, &config, s, 10, 12).unwrap();
        let added: Vec<&Record> = full.records().iter().filter(|r| !m.records().contains(r)).collect();
        prop_assert_eq!(added.len(), m.split_counts(Split::Train).iter().sum::<usize>() * multiplier);
        prop_assert!(added.iter().all(|r| r.split == Split::Train));
        for (path, bytes) in &before {
            prop_assert_eq!(&fs::read(base.join(path)).unwrap(), bytes);
        }
        let first: Vec<Vec<u8>> = added.iter().map(|r| fs::read(base.join(&r.path)).unwrap()).collect();
        let again = augment_split(&m, &base, &config, s, 10, 12).unwrap();
        prop_assert_eq!(&again, &full);
        let second: Vec<Vec<u8>> = added.iter().map(|r| fs::read(base.join(&r.path)).unwrap()).collect();
        prop_assert_eq!(first, second);
    }
}
