use super::*;
use crate::nets::{build_refiner, RefinerArch};
use crate::toyworld::{realize, realize_with_truth, simulate, WorldConfig};
use proptest::prelude::*;

fn quick_predictor() -> PredictorConfig {
    PredictorConfig {
        epochs: 20,
        ..PredictorConfig::default()
    }
}

#[test]
fn paper_confusion_matrix_accuracy() {
    let m = ConfusionMatrix([[224, 276], [207, 293]]);
    assert_eq!(m.total(), 1000);
    assert!((m.accuracy().unwrap() - 0.517).abs() < 1e-12);
}

#[test]
fn diagonal_confusion_is_perfect() {
    assert_eq!(ConfusionMatrix([[40, 0], [0, 40]]).accuracy().unwrap(), 1.0);
}

#[test]
fn empty_confusion_is_an_error() {
    assert!(ConfusionMatrix([[0, 0], [0, 0]]).accuracy().is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(export_confusion(&ConfusionMatrix([[0, 0], [0, 0]]), &dir.path().join("c.csv")).is_err());
}

#[test]
fn confusion_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    let acc = export_confusion(&ConfusionMatrix([[224, 276], [207, 293]]), &p).unwrap();
    assert!((acc - 0.517).abs() < 1e-12);
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ground_truth,selected_real,selected_synthetic");
    assert_eq!(lines[1], "real,224,276");
    assert_eq!(lines[2], "synthetic,207,293");
    assert!(lines[3].starts_with("accuracy,0.517"));
}

#[test]
fn pgm_grid_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.pgm");
    let imgs = vec![Tensor::filled(&[1, 4, 5], 0.5); 3];
    write_pgm_grid(&imgs, 2, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let header = b"P5\n13 11\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 13 * 11);
    assert!(write_pgm_grid(&[], 2, &p).is_err());
    assert!(write_pgm_grid(&[Tensor::filled(&[2, 4, 4], 0.5)], 1, &p).is_err());
}

#[test]
fn perfect_predictions_fill_the_curve() {
    let (_, truth) = realize_with_truth(&WorldConfig::default(), 50, 3).unwrap();
    let outputs: Vec<[f64; 4]> = truth.annotations.iter().map(|a| a.to_target(32, 32)).collect();
    let (px, deg) = prediction_errors(&outputs, &truth.annotations, 32, 32);
    let r = summarise(px, deg).unwrap();
    assert!(r.mean_px < 1e-9);
    assert!(r.mean_deg < 1e-3);
    for c in [&r.px_curve, &r.deg_curve] {
        assert!(c.fraction_within.iter().all(|&f| f == 1.0));
    }
}

#[test]
fn curve_rejects_bad_input() {
    assert!(CumulativeCurve::from_errors(&[], &CURVE_THRESHOLDS).is_err());
    assert!(CumulativeCurve::from_errors(&[1.0], &[2.0, 1.0]).is_err());
    let c = CumulativeCurve::from_errors(&[0.2, 1.5, 4.0, 20.0], &CURVE_THRESHOLDS).unwrap();
    assert_eq!(c.at(0.5), Some(0.25));
    assert_eq!(c.at(2.0), Some(0.5));
    assert_eq!(c.at(10.0), Some(0.75));
    assert_eq!(c.at(4.0), None);
}

proptest! {
    #[test]
    fn curve_is_a_cdf(errors in prop::collection::vec(0.0f64..30.0, 1..200)) {
        let c = CumulativeCurve::from_errors(&errors, &CURVE_THRESHOLDS).unwrap();
        for w in c.fraction_within.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(c.fraction_within.iter().all(|&f| (0.0..=1.0).contains(&f)));
    }
}

#[test]
fn random_predictor_curve_is_monotone() {
    let (real, truth) = realize_with_truth(&WorldConfig::default(), 64, 4).unwrap();
    let pred = build_predictor(&PredictorArch::default(), 9).unwrap();
    let r = eval_predictor(&pred, &real, &truth).unwrap();
    for c in [&r.px_curve, &r.deg_curve] {
        for w in c.fraction_within.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }
}

#[test]
fn predictor_output_and_init() {
    let arch = PredictorArch::default();
    let a = build_predictor(&arch, 1).unwrap();
    let b = build_predictor(&arch, 1).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert!(!a.params.bit_eq(&build_predictor(&arch, 2).unwrap().params));
    let x = Tensor::filled(&[3, 1, 32, 32], 0.5);
    assert_eq!(a.predict(&x).unwrap().len(), 3);
}

#[test]
fn predictor_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = build_predictor(&PredictorArch::default(), 4).unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(Predictor::load(dir.path()).unwrap(), a);
}

#[test]
fn real_images_cannot_train_a_predictor() {
    let real = realize(&WorldConfig::default(), 4, 1).unwrap();
    assert!(matches!(train_predictor(&real, &quick_predictor()), Err(Error::Unlabeled(_))));
    assert!(train_predictor(&[], &quick_predictor()).is_err());
}

#[test]
fn empty_and_mismatched_test_sets() {
    let pred = build_predictor(&PredictorArch::default(), 0).unwrap();
    let (real, truth) = realize_with_truth(&WorldConfig::default(), 4, 1).unwrap();
    assert!(eval_predictor(&pred, &[], &HeldOutTruth { annotations: vec![] }).is_err());
    assert!(eval_predictor(&pred, &real[..3], &truth).is_err());
}

#[test]
fn predictor_loss_decreases_over_epochs() {
    let data = simulate(&WorldConfig::default(), 500, 11).unwrap();
    let (_, losses) = train_predictor(&data, &quick_predictor()).unwrap();
    assert!(losses.last().unwrap() < &(losses[0] * 0.5), "{losses:?}");
}

#[test]
fn predictor_training_is_stable_across_inits() {
    let data = simulate(&WorldConfig::default(), 2000, 12).unwrap();
    for seed in 0..8 {
        let cfg = PredictorConfig {
            seed,
            epochs: 4,
            ..PredictorConfig::default()
        };
        let (_, losses) = train_predictor(&data, &cfg).unwrap();
        assert!(losses[3] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn predictor_fits_its_default_training_set() {
    let data = simulate(&WorldConfig::default(), 2000, 11).unwrap();
    let (pred, _) = train_predictor(&data, &PredictorConfig::default()).unwrap();
    let own = eval_labeled(&pred, &data).unwrap();
    assert!(own.median_px < 1.0, "own-set median {}", own.median_px);
}

#[test]
fn identity_refinement_has_zero_drift() {
    let syn: Vec<Tensor> = simulate(&WorldConfig::default(), 100, 2)
        .unwrap()
        .iter()
        .map(|i| i.pixels().clone())
        .collect();
    let r = annotation_drift_with(&syn, |x| Ok(x.clone())).unwrap();
    assert_eq!(r.mean_px, 0.0);
    assert_eq!(r.std_px, 0.0);
    assert_eq!((r.evaluated, r.oracle_failures), (100, 0));
}

#[test]
fn drift_needs_enough_images() {
    let syn = vec![Tensor::filled(&[1, 32, 32], 0.5); MIN_DRIFT_SET - 1];
    assert!(annotation_drift_with(&syn, |x| Ok(x.clone())).is_err());
}

#[test]
fn drift_aborts_when_the_oracle_keeps_failing() {
    let syn: Vec<Tensor> = simulate(&WorldConfig::default(), 100, 2)
        .unwrap()
        .iter()
        .map(|i| i.pixels().clone())
        .collect();
    let blank = Tensor::filled(&[1, 32, 32], 0.5);
    let mut n = 0;
    let err = annotation_drift_with(&syn, |x| {
        n += 1;
        Ok(if n % 10 == 0 { blank.clone() } else { x.clone() })
    });
    assert!(err.is_err());
    let mut n = 0;
    let ok = annotation_drift_with(&syn, |x| {
        n += 1;
        Ok(if n % 25 == 0 { blank.clone() } else { x.clone() })
    })
    .unwrap();
    assert_eq!((ok.evaluated, ok.oracle_failures), (96, 4));
}

#[test]
fn refined_dataset_keeps_annotations() {
    let data = simulate(&WorldConfig::default(), 6, 1).unwrap();
    let r = build_refiner(&RefinerArch::desk(), 0).unwrap();
    let out = refine_dataset(&r, &data).unwrap();
    for (a, b) in data.iter().zip(&out) {
        assert_eq!(a.annotation(), b.annotation());
        assert_eq!(b.role(), Role::Refined);
        assert_eq!(a.pixels().shape(), b.pixels().shape());
    }
    let d = annotation_drift(&r, &simulate(&WorldConfig::default(), 100, 3).unwrap()).unwrap();
    assert_eq!(d.evaluated + d.oracle_failures, 100);
}

#[test]
fn probe_tells_identical_streams_apart_no_better_than_chance() {
    let syn: Vec<Tensor> = simulate(&WorldConfig::default(), 64, 1)
        .unwrap()
        .iter()
        .map(|i| i.pixels().clone())
        .collect();
    let cfg = ProbeConfig {
        steps: 20,
        batch: 8,
        ..ProbeConfig::default()
    };
    let p = probe_realism(&syn[..32], &syn[..32], &syn[32..], &cfg).unwrap();
    assert!((p - 0.5).abs() < 0.05, "{p}");
    assert!(probe_realism(&[], &syn, &syn, &cfg).is_err());
}

#[test]
fn curves_csv_header() {
    let (_, truth) = realize_with_truth(&WorldConfig::default(), 10, 3).unwrap();
    let outputs: Vec<[f64; 4]> = truth.annotations.iter().map(|a| a.to_target(32, 32)).collect();
    let (px, deg) = prediction_errors(&outputs, &truth.annotations, 32, 32);
    let r = summarise(px, deg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("curves.csv");
    r.write_curves_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 1 + CURVE_THRESHOLDS.len());
}

#[test]
fn gradient_suite_passes_for_one_seed() {
    let r = gradient_suite(3).unwrap();
    assert_eq!(r.len(), 7);
    for (name, rep) in r {
        assert!(rep.max_rel_error < GRAD_TOLERANCE, "{name}: {rep:?}");
        assert!(rep.entries_checked > 0);
    }
}
