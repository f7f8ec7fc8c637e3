use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{DatasetManifest, ImageRecord, Source, Split, Stage};
use crate::raster::GrayImage;

fn mcc_by_correlation(counts: &[Vec<u64>]) -> f64 {
    // Pearson correlation of one-hot truth/prediction vectors, expanded
    // sample by sample.
    let k = counts.len();
    let mut samples = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                samples.push((t, p));
            }
        }
    }
    let s = samples.len() as f64;
    let mean = |f: &dyn Fn(&(usize, usize)) -> usize, c: usize| samples.iter().filter(|x| f(x) == c).count() as f64 / s;
    let (mut cov_xy, mut cov_xx, mut cov_yy) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let mx = mean(&|x| x.0, c);
        let my = mean(&|x| x.1, c);
        for &(t, p) in &samples {
            let dx = (t == c) as u8 as f64 - mx;
            let dy = (p == c) as u8 as f64 - my;
            cov_xy += dx * dy;
            cov_xx += dx * dx;
            cov_yy += dy * dy;
        }
    }
    if cov_xx == 0.0 || cov_yy == 0.0 {
        return 0.0;
    }
    cov_xy / (cov_xx * cov_yy).sqrt()
}

fn macro_f1_by_counting(counts: &[Vec<u64>]) -> f64 {
    let k = counts.len();
    let mut pairs = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

fn random_confusion(rng: &mut ChaCha8Rng, k: usize, max: u64) -> Vec<Vec<u64>> {
    (0..k).map(|_| (0..k).map(|_| rng.random_range(0..=max)).collect()).collect()
}

#[test]
fn two_class_hand_case() {
    let c = Confusion::from_counts(vec![vec![2, 1], vec![0, 2]]).unwrap();
    assert!((c.accuracy() - 0.8).abs() < 1e-15);
    assert!((mcc_multiclass(&c.counts) - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn identity_and_uniform_confusions() {
    let ident: Vec<Vec<u64>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u64 * 7).collect()).collect();
    assert_eq!(mcc_multiclass(&ident), 1.0);
    let r = MetricsReport::from_confusion(Confusion::from_counts(ident).unwrap(), vec![]);
    assert_eq!((r.accuracy, r.f1_macro, r.precision_macro, r.recall_macro), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(mcc_multiclass(&vec![vec![3; 5]; 5]), 0.0);
}

#[test]
fn constant_predictor_on_balanced_data() {
    let truth: Vec<Stage> = Stage::ALL.iter().flat_map(|&s| [s; 20]).collect();
    let pred = vec![Stage::Morula; truth.len()];
    let r = MetricsReport::from_confusion(Confusion::from_stages(&truth, &pred).unwrap(), vec![]);
    assert!((r.accuracy - 0.2).abs() < 1e-15);
    assert_eq!(r.mcc, 0.0);
}

#[test]
fn metrics_match_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let counts = random_confusion(&mut rng, 5, 12);
        let c = Confusion::from_counts(counts.clone()).unwrap();
        if c.total() == 0 {
            continue;
        }
        let fast = mcc_multiclass(&counts);
        let slow = mcc_by_correlation(&counts);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow} for {counts:?}");
        assert!((-1.0..=1.0).contains(&fast));
        let f1 = macro_scores(&c).f1;
        assert!((f1 - macro_f1_by_counting(&counts)).abs() < 1e-12);
        assert!((c.accuracy() - c.trace() as f64 / c.total() as f64).abs() < 1e-12);
    }
}

#[test]
fn balanced_micro_f1_equals_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut c = Confusion::new(5);
        for t in 0..5 {
            for _ in 0..20 {
                c.record(t, rng.random_range(0..5));
            }
        }
        assert!((f1_micro(&c) - c.accuracy()).abs() < 1e-12);
        assert!(c.true_totals().iter().all(|&n| n == 20));
    }
}

proptest! {
    #[test]
    fn mcc_is_label_permutation_invariant(seed in any::<u64>(), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = random_confusion(&mut rng, 5, 9);
        let mut permuted = vec![vec![0; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                permuted[perm[i]][perm[j]] = counts[i][j];
            }
        }
        prop_assert!((mcc_multiclass(&counts) - mcc_multiclass(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn interval_width_is_two_z_std_over_root_n(values in prop::collection::vec(0.0f64..100.0, 2..8), z in 0.5f64..3.0, n in 1usize..10) {
        let s = MetricSummary::from_values(&values, z, Some(n)).unwrap();
        let width = 2.0 * z * s.std / (n as f64).sqrt();
        prop_assert!(((s.ci_high - s.ci_low) - width).abs() < 1e-9);
    }
}

#[test]
fn aggregate_of_constant_reports() {
    let r = MetricsReport::from_confusion(Confusion::from_counts(vec![vec![1, 0], vec![0, 1]]).unwrap(), vec![1]);
    let agg = aggregate_seeds(&[r.clone(), r.clone(), r], 1.96, None).unwrap();
    assert_eq!(agg.accuracy.mean, 1.0);
    assert_eq!(agg.accuracy.std, 0.0);
    assert_eq!((agg.accuracy.ci_low, agg.accuracy.ci_high), (1.0, 1.0));
    assert_eq!(agg.reports, 3);
    assert_eq!(agg.confusion.total(), 6);
}

#[test]
fn aggregate_needs_two_reports() {
    let r = MetricsReport::from_confusion(Confusion::new(5), vec![]);
    assert!(aggregate_seeds(&[r], 1.96, None).is_err());
    assert!(aggregate_seeds(&[], 1.96, None).is_err());
}

#[test]
fn printed_interval_rows() {
    let (lo, hi) = confidence_interval(68.88, 5.86, 1.96, 4);
    assert!((lo - 63.137).abs() < 1e-3 && (hi - 74.623).abs() < 1e-3, "({lo}, {hi})");
    let (lo, hi) = confidence_interval(78.08, 2.844, 1.96, 4);
    assert!((lo - 75.297).abs() < 5e-3 && (hi - 80.863).abs() < 5e-3, "({lo}, {hi})");
}

#[test]
fn early_stopping_rule_trace() {
    let mut stop = EarlyStopping::new(30);
    let mut stopped_at = None;
    for epoch in 1..=100 {
        let loss = if epoch <= 12 { 1.0 / epoch as f64 } else { 1.0 };
        if stop.observe(loss) == StopDecision::Stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(42));
    assert_eq!(stop.best_epoch(), 12);
}

#[test]
fn argmax_ties_pick_lowest_index() {
    assert_eq!(argmax(&[0.5, 0.9, 0.9, 0.1]), 1);
    assert_eq!(argmax(&[1.0; 5]), 0);
}

#[test]
fn preprocess_resizes_and_standardises() {
    let img = GrayImage::filled(256, 256, 0.5);
    let out = preprocess(&img, 224, NormStats { mean: 0.5, std: 1.0 });
    assert_eq!((out.width(), out.height()), (224, 224));
    assert!(out.pixels().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn norm_stats_match_an_independent_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<GrayImage> = (0..7)
        .map(|_| GrayImage::from_vec(32, 32, (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let stats = NormStats::fit(&images, 32).unwrap();
    let all: Vec<f64> = images.iter().flat_map(|i| i.pixels().to_vec()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!((stats.mean - mean).abs() < 1e-6);
    assert!((stats.std - std).abs() < 1e-6);
    let flat = NormStats::fit(&[GrayImage::filled(32, 32, 0.3)], 32).unwrap();
    assert_eq!(flat.std, 1.0);
}

fn pools(real_per_stage: usize, synth_per_stage: usize) -> MixPools {
    let mut real = Vec::new();
    let mut gan = Vec::new();
    let mut ldm = Vec::new();
    for stage in Stage::ALL {
        for i in 0..real_per_stage {
            let mut r = ImageRecord::new(format!("r-{stage}-{i}"), format!("seq{i}"), stage, Source::Toy, "x.png");
            r.split = if i % 5 == 0 { Split::Test } else { Split::Train };
            real.push(r);
        }
        for i in 0..synth_per_stage {
            gan.push(ImageRecord::new(format!("g-{stage}-{i}"), format!("g{i}"), stage, Source::SyntheticGan, "g.png"));
            ldm.push(ImageRecord::new(format!("l-{stage}-{i}"), format!("l{i}"), stage, Source::SyntheticLdm, "l.png"));
        }
    }
    MixPools {
        real: DatasetManifest::new(real, "real").unwrap(),
        gan: DatasetManifest::new(gan, "gan").unwrap(),
        ldm: DatasetManifest::new(ldm, "ldm").unwrap(),
    }
}

#[test]
fn mix_counts_and_determinism() {
    let p = pools(50, 60);
    let m = build_mix(&p, MixSpec::new(10, 25, 25), 4).unwrap();
    for stage in Stage::ALL {
        assert_eq!(m.count(stage), 60);
        assert_eq!(m.count_by_source(stage, Source::SyntheticGan), 25);
        assert_eq!(m.count_by_source(stage, Source::SyntheticLdm), 25);
    }
    assert_eq!(m, build_mix(&p, MixSpec::new(10, 25, 25), 4).unwrap());
    assert_ne!(m, build_mix(&p, MixSpec::new(10, 25, 25), 5).unwrap());
    let synth_only = build_mix(&p, MixSpec::new(0, 5, 5), 0).unwrap();
    assert_eq!(synth_only.len(), 50);
}

#[test]
fn empty_mix_is_rejected() {
    assert!(build_mix(&pools(5, 5), MixSpec::new(0, 0, 0), 0).is_err());
}

#[test]
fn short_pool_names_stage_and_source() {
    let mut p = pools(10, 10);
    let trimmed: Vec<ImageRecord> = p
        .gan
        .records()
        .iter()
        .filter(|r| r.image_id != "g-morula-0")
        .cloned()
        .collect();
    p.gan = DatasetManifest::new(trimmed, "gan").unwrap();
    match build_mix(&p, MixSpec::new(0, 10, 0), 0) {
        Err(crate::Error::InsufficientPool { source_kind, stage, needed, available }) => {
            assert_eq!((source_kind.as_str(), stage, needed, available), ("gan", Stage::Morula, 10, 9));
        }
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mixes_never_repeat_or_touch_test_sequences(seed in any::<u64>(), real in 0usize..=40, synth in 0usize..=30) {
        prop_assume!(real + synth > 0);
        let p = pools(50, 30);
        let m = build_mix(&p, MixSpec::new(real, synth, synth), seed).unwrap();
        let ids: BTreeSet<&str> = m.records().iter().map(|r| r.image_id.as_str()).collect();
        prop_assert_eq!(ids.len(), m.len());
        let test_seqs: BTreeSet<&str> = p.real.records().iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.sequence_id.as_str())
            .collect();
        prop_assert!(m.records().iter().all(|r| r.source.is_synthetic() || !test_seqs.contains(r.sequence_id.as_str())));
    }
}

#[test]
fn holdout_is_stratified() {
    let stages: Vec<Stage> = Stage::ALL.iter().flat_map(|&s| [s; 40]).collect();
    let (train, val) = stratified_holdout(&stages, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(train.len() + val.len(), 200);
    for s in Stage::ALL {
        assert_eq!(val.iter().filter(|&&i| stages[i] == s).count(), 4);
    }
    let overlap: BTreeSet<_> = train.iter().filter(|i| val.contains(i)).collect();
    assert!(overlap.is_empty());
}

fn toy_examples(per_stage: usize, seed: u64) -> Vec<Example> {
    Stage::ALL
        .iter()
        .flat_map(|&s| {
            crate::data::generate_toy_dataset(s, per_stage, seed + s.ordinal() as u64, 64)
                .unwrap()
                .into_iter()
                .map(move |t| Example { image: t.image, stage: s })
        })
        .collect()
}

fn quick_config(family: ClassifierFamily) -> ClassifierConfig {
    ClassifierConfig {
        family,
        input_resolution: 32,
        width: 4,
        batch_size: 16,
        learning_rate: 3e-3,
        max_epochs: 3,
        patience_epochs: 2,
        ..ClassifierConfig::default()
    }
}

#[test]
fn training_is_deterministic_for_every_family() {
    let data = toy_examples(6, 1);
    for family in [ClassifierFamily::ConvSmall, ClassifierFamily::ConvResidual, ClassifierFamily::AttentionPatch] {
        let cfg = quick_config(family);
        let (_, a) = train_classifier(&data, &cfg).unwrap();
        let (_, b) = train_classifier(&data, &cfg).unwrap();
        assert_eq!(a.val_loss, b.val_loss, "{family:?}");
        assert!(a.val_loss.iter().all(|v| v.is_finite()));
        assert_eq!(a.validation_size, 5);
        assert!(a.best_epoch >= 1 && a.best_epoch <= a.stopped_epoch);
    }
}

#[test]
fn empty_mix_cannot_train() {
    assert!(matches!(
        train_classifier(&[], &quick_config(ClassifierFamily::ConvSmall)),
        Err(crate::Error::Empty(_))
    ));
}

#[test]
fn pretrained_init_requires_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_examples(4, 2);
    let mut cfg = quick_config(ClassifierFamily::ConvSmall);
    cfg.init = ClassifierInit::Pretrained;
    cfg.pretrained_path = Some(dir.path().join("none.ckpt"));
    assert!(matches!(train_classifier(&data, &cfg), Err(crate::Error::MissingWeights(_))));

    let (base, _) = train_classifier(&data, &quick_config(ClassifierFamily::ConvSmall)).unwrap();
    let path = dir.path().join("base.ckpt");
    base.save(&path).unwrap();
    let loaded = Classifier::load(&path).unwrap();
    let images: Vec<GrayImage> = data.iter().map(|e| e.image.clone()).collect();
    assert_eq!(loaded.logits(&images), base.logits(&images));
    cfg.pretrained_path = Some(path);
    train_classifier(&data, &cfg).unwrap();
    cfg.width = 8;
    assert!(train_classifier(&data, &cfg).is_err());
}

#[test]
fn config_validation() {
    let ok = ClassifierConfig::default();
    ok.validate().unwrap();
    for bad in [
        ClassifierConfig { patience_epochs: 0, ..ok.clone() },
        ClassifierConfig { input_resolution: 16, ..ok.clone() },
        ClassifierConfig { validation_fraction: 0.0, ..ok.clone() },
        ClassifierConfig { init: ClassifierInit::Pretrained, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn empty_grid_gives_empty_bundle() {
    let loader: HashMap<String, GrayImage> = HashMap::new();
    let b = run_grid(&[], &ClassifierConfig::default(), &[1, 2], &pools(1, 1), &loader, &[], GridOptions::default()).unwrap();
    assert!(b.is_empty());
}

#[test]
fn grid_runs_and_round_trips_through_csv() {
    let p = pools(6, 4);
    let mut images = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in p.real.records().iter().chain(p.gan.records()).chain(p.ldm.records()) {
        let v = r.stage.ordinal() as f64 / 5.0;
        let px = (0..32 * 32).map(|_| v + 0.05 * rng.random::<f64>()).collect();
        images.insert(r.image_id.clone(), GrayImage::from_vec(32, 32, px).unwrap());
    }
    let test = TestSet {
        name: "internal".into(),
        examples: Stage::ALL
            .iter()
            .map(|&s| Example { image: GrayImage::filled(32, 32, s.ordinal() as f64 / 5.0), stage: s })
            .collect(),
    };
    let grid = [MixSpec::new(4, 0, 0), MixSpec::new(4, 2, 2)];
    let cfg = ClassifierConfig { max_epochs: 2, ..quick_config(ClassifierFamily::ConvSmall) };
    let bundle = run_grid(&grid, &cfg, &[1, 2], &p, &images, &[test], GridOptions::default()).unwrap();
    assert_eq!(bundle.rows.len(), 4);
    assert_eq!(bundle.aggregated.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    let back = read_grid_csv(&dir.path().join("grid_internal.csv")).unwrap();
    assert_eq!(back.len(), 4);
    for (row, (spec, seed, m)) in bundle.rows.iter().zip(&back) {
        assert_eq!((row.spec, row.seed), (*spec, *seed));
        assert_eq!(m[0], row.report.accuracy);
        assert_eq!(m[4], row.report.mcc);
    }
    let agg = std::fs::read_to_string(dir.path().join("grid_aggregated.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 5);
}
