mod common;

use std::f64::consts::PI;
use std::path::Path;

use common::*;
use dae_core::data::{
    generate_deformed_mnist, load_image_folder, parse_landmarks, split, BaseSet, CropFrame,
    DeformSpec, LandmarkOrder,
};

/// Pixel displacement evaluated straight from the wave parameters.
fn closed_form(spec: &DeformSpec, index: u64, x: f64, y: f64) -> (f64, f64) {
    let w = spec.sample_warp(index);
    let s = spec.side as f64;
    let sum = |waves: &[dae_core::data::Wave], t: f64| -> f64 {
        waves
            .iter()
            .map(|w| w.amplitude * (2.0 * PI * w.frequency * t / s + w.phase).sin())
            .sum()
    };
    (sum(&w.x_waves, y), sum(&w.y_waves, x))
}

#[test]
fn deformed_digits_match_the_sinusoid_oracle() {
    let spec = DeformSpec {
        seed: 3,
        ..DeformSpec::default()
    };
    let base = BaseSet::procedural(&[3, 5], 3, 1).unwrap();
    let ds = generate_deformed_mnist(&spec, &base).unwrap();
    let (s, b) = (spec.side, base.side);
    for k in 0..ds.len() {
        let mut grid = Vec::with_capacity(s * s * 2);
        for i in 0..s {
            for j in 0..s {
                let (dx, dy) = closed_form(&spec, k as u64, j as f64, i as f64);
                grid.push(-1.0 + 2.0 * (j as f64 + dx) / (s - 1) as f64);
                grid.push(-1.0 + 2.0 * (i as f64 + dy) / (s - 1) as f64);
            }
        }
        let src: Vec<f64> = base.images[k * b * b..(k + 1) * b * b]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let expect = bilinear_oracle(&src, 1, 1, b, b, &grid, s, s);
        let got: Vec<f64> = ds.image(k).iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&got, &expect) <= 1e-5, "image {k}");
        assert!(got.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn displacement_sits_inside_the_amplitude_envelope() {
    let spec = DeformSpec::default();
    let (lo, hi, k) = (spec.amp_min, spec.amp_max, spec.num_waves as f64);
    let s = spec.side;
    let mut rms_total = 0.0;
    let count = 200;
    for index in 0..count {
        let mut sq = 0.0;
        for i in 0..s {
            for j in 0..s {
                let (dx, dy) = closed_form(&spec, index, j as f64, i as f64);
                assert!(dx.abs() <= k * hi && dy.abs() <= k * hi);
                assert_eq!(
                    spec.sample_warp(index).displacement(j as f64, i as f64, s),
                    (dx, dy)
                );
                sq += dx * dx + dy * dy;
            }
        }
        rms_total += (sq / (s * s) as f64).sqrt();
    }
    let mean_rms = rms_total / count as f64;
    assert!(
        (lo..=k * hi).contains(&mean_rms),
        "mean displacement {mean_rms}"
    );
}

#[test]
fn generation_is_a_pure_function_of_spec_and_base() {
    let spec = DeformSpec {
        seed: 9,
        ..DeformSpec::default()
    };
    let base = BaseSet::procedural(&[1, 7], 2, 4).unwrap();
    let a = generate_deformed_mnist(&spec, &base).unwrap();
    let b = generate_deformed_mnist(&spec, &base).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.ids, b.ids);
    assert_eq!(a.labels, Some(vec![1, 7, 1, 7]));
}

#[test]
fn five_point_lines_parse_and_rescale() {
    let text = "2\nlefteye_x lefteye_y righteye_x righteye_y nose_x nose_y leftmouth_x leftmouth_y rightmouth_x rightmouth_y\nimg1.jpg 10 20 30 40 50 12 22 32 42 52\nimg2.jpg 69 111 108 111 88 135 72 152 105 152\n";
    let f = parse_landmarks(text, Path::new("lm.txt"), LandmarkOrder::Grouped, None).unwrap();
    assert_eq!(
        f.sets["img1.jpg"].points,
        [
            [10.0, 12.0],
            [20.0, 22.0],
            [30.0, 32.0],
            [40.0, 42.0],
            [50.0, 52.0]
        ]
    );
    let f = parse_landmarks(text, Path::new("lm.txt"), LandmarkOrder::Interleaved, None).unwrap();
    assert_eq!(f.sets["img1.jpg"].points[0], [10.0, 20.0]);

    // a 178x218 original: centre square of 178, then 64/178 scaling
    let frame = CropFrame {
        width: 178.0,
        height: 218.0,
        side: 64,
    };
    let f = parse_landmarks(
        text,
        Path::new("lm.txt"),
        LandmarkOrder::Interleaved,
        Some(frame),
    )
    .unwrap();
    let p = f.sets["img2.jpg"].points[0];
    let scale = 64.0 / 178.0;
    assert!((p[0] - 69.0 * scale).abs() < 1e-12);
    assert!((p[1] - (111.0 - 20.0) * scale).abs() < 1e-12);
    // img1's points sit above the crop and get clamped
    assert_eq!(f.clamped, vec!["img1.jpg".to_string()]);
    assert!(f.sets["img1.jpg"].points.iter().all(|p| p[1] >= 0.0));
}

#[test]
fn malformed_landmark_lines_report_their_position() {
    let err = parse_landmarks(
        "a 1 2 3\n",
        Path::new("x.txt"),
        LandmarkOrder::Interleaved,
        None,
    )
    .unwrap_err();
    assert_eq!(err.kind(), "parse");
    assert!(err.to_string().contains("x.txt:1"));
}

#[test]
fn splits_mirror_the_face_protocol() {
    let parts = split(20_000, &[0.95, 0.05], 5).unwrap();
    assert_eq!((parts[0].len(), parts[1].len()), (19_000, 1_000));
    assert_eq!(parts, split(20_000, &[0.95, 0.05], 5).unwrap());
    let mut all: Vec<usize> = parts.concat();
    all.sort_unstable();
    assert_eq!(all, (0..20_000).collect::<Vec<_>>());
    assert_eq!(
        split(10, &[1.0], 0).unwrap(),
        vec![(0..10).collect::<Vec<_>>()]
    );
}

#[test]
fn folder_loading_is_ordered_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    for (name, w, h) in [("b.png", 80, 40), ("a.png", 64, 64), ("c.jpg", 30, 90)] {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 128])
        });
        img.save(dir.path().join(name)).unwrap();
    }
    let a = load_image_folder(dir.path(), 64, 3).unwrap();
    let b = load_image_folder(dir.path(), 64, 3).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a.ids, vec!["a.png", "b.png", "c.jpg"]);
    assert_eq!(a.images, b.images);
    assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
}
