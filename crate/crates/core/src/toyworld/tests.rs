use super::*;
use proptest::prelude::*;

fn variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn fixed_geometry(cx: f64, cy: f64) -> Geometry {
    Geometry {
        cx,
        cy,
        gaze: [0.0, -1.0],
        rx: 2.8,
        ry: 2.6,
        iris_r: 5.5,
        sclera_peak: 0.85,
        sclera_falloff: 0.12,
        iris_level: 0.4,
        pupil_level: 0.08,
    }
}

#[test]
fn simulate_is_deterministic_per_seed_and_index() {
    let cfg = WorldConfig::default();
    let a = simulate(&cfg, 5, 42).unwrap();
    let b = simulate(&cfg, 5, 42).unwrap();
    assert_eq!(a, b);
    // index i does not depend on how many images are requested
    let c = simulate(&cfg, 2, 42).unwrap();
    assert_eq!(a[1], c[1]);
    let d = simulate(&cfg, 5, 43).unwrap();
    assert_ne!(a[0], d[0]);
}

#[test]
fn annotations_are_valid() {
    let cfg = WorldConfig::default();
    for img in simulate(&cfg, 300, 1).unwrap() {
        let a = img.annotation().unwrap();
        assert!((0.0..32.0).contains(&a.pupil[0]) && (0.0..32.0).contains(&a.pupil[1]));
        let norm = (a.gaze[0].powi(2) + a.gaze[1].powi(2)).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(img.role(), Role::Synthetic);
        assert_eq!(img.pixels().shape(), &[1, 32, 32]);
    }
}

#[test]
fn oracle_recovers_pupil_on_clean_renders() {
    let cfg = WorldConfig::default();
    let mut worst: f64 = 0.0;
    for img in simulate(&cfg, 500, 7).unwrap() {
        let a = img.annotation().unwrap();
        let (x, y) = pupil_center_oracle(img.pixels()).unwrap();
        worst = worst.max(((x - a.pupil[0]).powi(2) + (y - a.pupil[1]).powi(2)).sqrt());
    }
    assert!(worst < 0.5, "worst oracle error {worst}");
}

#[test]
fn oracle_at_known_centre() {
    let cfg = WorldConfig::default();
    let img = image(&cfg, render(&cfg, &fixed_geometry(16.0, 12.0), None));
    let (x, y) = pupil_center_oracle(&img).unwrap();
    assert!((x - 16.0).abs() < 0.5 && (y - 12.0).abs() < 0.5, "({x}, {y})");
}

#[test]
fn oracle_rejects_blank_image() {
    let white = Tensor::filled(&[1, 32, 32], 1.0);
    assert!(matches!(pupil_center_oracle(&white), Err(Error::NoPupil)));
    assert_eq!(pupil_center_oracle(&white).unwrap_err().to_string(), "no pupil found");
}

#[test]
fn oracle_is_translation_equivariant() {
    let cfg = WorldConfig::default();
    for img in simulate(&cfg, 50, 9).unwrap() {
        let a = img.annotation().unwrap();
        if a.pupil[0] > 22.0 {
            continue;
        }
        let src = img.pixels().data();
        let mut shifted = vec![0f32; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                shifted[y * 32 + x] = src[y * 32 + x.saturating_sub(2)];
            }
        }
        let moved = Tensor::new(vec![1, 32, 32], shifted).unwrap();
        let (x0, y0) = pupil_center_oracle(img.pixels()).unwrap();
        let (x1, y1) = pupil_center_oracle(&moved).unwrap();
        assert!((x1 - x0 - 2.0).abs() <= 0.25 && (y1 - y0).abs() <= 0.25, "({x0},{y0}) -> ({x1},{y1})");
    }
}

#[test]
fn mean_pixel_in_range() {
    let imgs = simulate(&WorldConfig::default(), 1000, 3).unwrap();
    let mean = imgs.iter().map(|i| i.pixels().mean()).sum::<f64>() / imgs.len() as f64;
    assert!(mean > 0.2 && mean < 0.9, "mean {mean}");
}

#[test]
fn real_set_has_higher_variance() {
    let cfg = WorldConfig::default();
    let syn = simulate(&cfg, 1000, 4).unwrap();
    let real = realize(&cfg, 1000, 5).unwrap();
    let all = |s: &[AnnotatedImage]| {
        s.iter()
            .flat_map(|i| i.pixels().data().iter().map(|&v| v as f64))
            .collect::<Vec<_>>()
    };
    let (vs, vr) = (variance(all(&syn).into_iter()), variance(all(&real).into_iter()));
    assert!(vr > vs, "real {vr} vs synthetic {vs}");
}

#[test]
fn corruption_off_is_simulate() {
    let cfg = WorldConfig::default().clean();
    let syn = simulate(&cfg, 20, 11).unwrap();
    let real = realize(&cfg, 20, 11).unwrap();
    for (s, r) in syn.iter().zip(&real) {
        assert!(s.pixels().bits().eq(r.pixels().bits()));
    }
}

#[test]
fn corruption_changes_pixels() {
    let cfg = WorldConfig::default();
    let syn = simulate(&cfg, 20, 12).unwrap();
    let real = realize(&cfg, 20, 12).unwrap();
    let diff: f64 = syn
        .iter()
        .zip(&real)
        .flat_map(|(s, r)| s.pixels().data().iter().zip(r.pixels().data()).map(|(a, b)| (a - b).abs() as f64))
        .sum::<f64>();
    assert!(diff > 0.0);
    for r in &real {
        assert!(r.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn real_images_have_no_labels() {
    let cfg = WorldConfig::default();
    let (real, truth) = realize_with_truth(&cfg, 3, 0).unwrap();
    assert!(real.iter().all(|r| r.annotation().is_none() && r.role() == Role::Real));
    assert_eq!(truth.len(), 3);
    let a = truth.annotations[0];
    assert!(AnnotatedImage::labeled(real[0].pixels().clone(), a, Role::Real).is_err());
    let relabeled = real[0].with_pixels(real[0].pixels().clone(), Role::Refined).unwrap();
    assert!(relabeled.annotation().is_none());
}

#[test]
fn realize_truth_matches_simulate_geometry() {
    let cfg = WorldConfig::default();
    let syn = simulate(&cfg, 4, 21).unwrap();
    let (_, truth) = realize_with_truth(&cfg, 4, 21).unwrap();
    for (s, t) in syn.iter().zip(&truth.annotations) {
        assert_eq!(s.annotation().unwrap(), t);
    }
}

#[test]
fn blur_preserves_constant_image() {
    let flat = vec![0.3f32; 16 * 16];
    let out = box_blur(&flat, 16, 16, 1);
    assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn invalid_configs_rejected() {
    let cfg = WorldConfig {
        noise_sigma: -1.0,
        ..WorldConfig::default()
    };
    assert!(simulate(&cfg, 1, 0).is_err());
    let cfg = WorldConfig {
        gain: (1.2, 0.8),
        ..WorldConfig::default()
    };
    assert!(realize(&cfg, 1, 0).is_err());
    assert!(simulate(&WorldConfig::default(), 0, 0).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig::default();
    let syn = simulate(&cfg, 6, 2).unwrap();
    save_dataset(dir.path(), &syn, &cfg, 2).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.role, Role::Synthetic);
    assert_eq!(back.images.len(), 6);
    for (a, b) in syn.iter().zip(&back.images) {
        assert!(a.pixels().bits().eq(b.pixels().bits()));
        assert_eq!(a.annotation(), b.annotation());
    }
}

#[test]
fn real_dataset_has_no_annotation_file_and_truth_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig::default();
    let (real, truth) = realize_with_truth(&cfg, 5, 8).unwrap();
    save_dataset(dir.path(), &real, &cfg, 8).unwrap();
    assert!(!dir.path().join("annotations.csv").exists());
    let back = load_dataset(dir.path()).unwrap();
    let again = regenerate_truth(&back).unwrap();
    assert_eq!(again.annotations, truth.annotations);

    let mut tampered = back;
    tampered.images.swap(0, 1);
    assert!(regenerate_truth(&tampered).is_err());
}

proptest! {
    #[test]
    fn oracle_tracks_rendered_centre(cx in 10.0f64..22.0, cy in 10.0f64..22.0) {
        let cfg = WorldConfig::default();
        let img = image(&cfg, render(&cfg, &fixed_geometry(cx, cy), None));
        let (x, y) = pupil_center_oracle(&img).unwrap();
        prop_assert!((x - cx).abs() < 0.5 && (y - cy).abs() < 0.5);
    }
}
