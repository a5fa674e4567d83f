use std::sync::Arc;

use proptest::prelude::*;
use undistort::config::Config;
use undistort::facemodel::synthesize_model;
use undistort::image::{DepthImage, Image};
use undistort::io::*;
use undistort::solver::{solve, InversionProblem};
use undistort::synth::{generate_with_model, SynthSpec};
use undistort::Error;

fn gradient(w: u32, h: u32, peak: f64) -> Image {
    Image::from_fn(w, h, peak, |x, y| {
        [
            (x * 255 / w.max(1)) as f64 * peak / 255.0,
            (y * 255 / h.max(1)) as f64 * peak / 255.0,
            ((x + y) % 256) as f64 * peak / 255.0,
        ]
    })
}

#[test]
fn png_round_trip_is_exact_for_8_bit() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient(37, 21, 255.0);
    let p = dir.path().join("a.png");
    write_image(&p, &img).unwrap();
    assert_eq!(read_image(&p).unwrap(), img);
}

#[test]
fn png_writer_quantizes_other_peaks() {
    let img = Image::filled(3, 3, 1.0, [0.5, 0.0, 1.0]);
    let back = decode_png(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(back.peak, 255.0);
    assert_eq!(back.get(1, 1), [128.0, 0.0, 255.0]);
}

#[test]
fn sixteen_bit_gray_png_reads_with_full_peak() {
    let d = DepthImage::from_fn(4, 2, |x, _| (x > 0).then_some(x as f64 * 0.5));
    let bytes = encode_depth_png(&d, 1e-3).unwrap();
    let img = decode_png(&bytes).unwrap();
    assert_eq!(img.peak, 65535.0);
    assert_eq!(img.get(2, 1), [1000.0; 3]);
    assert_eq!(img.get(0, 0), [0.0; 3]);
}

#[test]
fn truncated_png_reports_an_offset() {
    let bytes = encode_png(&gradient(64, 64, 255.0)).unwrap();
    let cut = &bytes[..bytes.len() / 2];
    match decode_png(cut) {
        Err(Error::Parse { what, offset, .. }) => {
            assert_eq!(what, "png");
            assert!(offset > 8 && offset <= cut.len() as u64, "{offset}");
        }
        r => panic!("{r:?}"),
    }
    match decode_png(b"not a png at all") {
        Err(Error::Parse { offset, .. }) => assert!(offset <= 16),
        r => panic!("{r:?}"),
    }
}

#[test]
fn ppm_and_png_agree() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient(10, 7, 255.0);
    write_image(dir.path().join("a.ppm"), &img).unwrap();
    write_image(dir.path().join("a.png"), &img).unwrap();
    assert_eq!(
        read_image(dir.path().join("a.ppm")).unwrap(),
        read_image(dir.path().join("a.png")).unwrap()
    );
    assert!(matches!(write_image(dir.path().join("a.bmp"), &img), Err(Error::Invalid(_))));
}

#[test]
fn pfm_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = DepthImage::from_fn(9, 5, |x, y| {
        ((x + y) % 4 != 0).then(|| (0.3 + 0.01 * x as f64 + 0.001 * y as f64) as f32 as f64)
    });
    let p = dir.path().join("d.pfm");
    write_depth(&p, &d).unwrap();
    let back = read_depth(&p).unwrap();
    assert_eq!(back, d);
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"Pf\n9 5\n-1.0\n"));
    // First stored row is the bottom one.
    let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    assert_eq!(first as f64, d.get(0, 4).unwrap_or(0.0));
}

#[test]
fn pfm_rejects_truncation_and_bad_headers() {
    let d = DepthImage::from_fn(4, 4, |_, _| Some(1.0));
    let bytes = encode_pfm(&d);
    match decode_pfm(&bytes[..bytes.len() - 3]) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
        r => panic!("{r:?}"),
    }
    assert!(matches!(decode_pfm(b"P5\n1 1\n-1\n"), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!(decode_pfm(b"Pf\n1 x\n-1\n"), Err(Error::Parse { offset: 3, .. })));
}

#[test]
fn depth_png_uses_sidecar_scale() {
    let dir = tempfile::tempdir().unwrap();
    let d = DepthImage::from_fn(6, 4, |x, y| (x != y).then(|| 0.25 + 0.0001 * (x * 7 + y) as f64));
    let p = dir.path().join("d.png");
    write_depth(&p, &d).unwrap();
    assert!(depth_sidecar_path(&p).exists());
    let back = read_depth(&p).unwrap();
    assert_eq!(back.valid, d.valid);
    for (a, b) in back.depth.iter().zip(&d.depth) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    std::fs::remove_file(depth_sidecar_path(&p)).unwrap();
    assert!(matches!(read_depth(&p), Err(Error::Io { .. })));
}

#[test]
fn depth_png_rejects_out_of_range() {
    let d = DepthImage::from_fn(2, 2, |_, _| Some(100.0));
    assert!(encode_depth_png(&d, 1e-4).is_err());
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_model(3, 40, 5).unwrap();
    let p = dir.path().join("model.json");
    write_model(&p, &m).unwrap();
    assert!(dir.path().join("model.bin").exists());
    let back = read_model(&p).unwrap();
    assert_eq!(back.mean(), m.mean());
    assert_eq!(back.basis_rows(), m.basis_rows());
    assert_eq!(back.eye_indices(), m.eye_indices());
    assert_eq!(back.labels(), m.labels());
}

#[test]
fn truncated_model_data_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_model(3, 20, 2).unwrap();
    let p = dir.path().join("m.json");
    write_model(&p, &m).unwrap();
    let bin = dir.path().join("m.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(read_model(&p), Err(Error::Parse { .. })));
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_landmarks: 60,
        latent_dim: 6,
        ..SynthSpec::default()
    }
}

#[test]
fn problem_file_round_trip_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let model = Arc::new(spec.model().unwrap());
    let inst = generate_with_model(model.clone(), 4, &spec).unwrap();
    write_model(dir.path().join("model.json"), &model).unwrap();
    let mut pf = ProblemFile::from_landmarks(&inst.observed, spec.width, spec.height, "model.json");
    pf.config = Some(serde_json::json!({"schedule": {"cam_only_iters": 7}}));
    let p = dir.path().join("problem.json");
    write_json(&p, &pf).unwrap();
    let loaded = read_problem(&p).unwrap();
    assert_eq!(loaded.file, pf);
    let prob = loaded.inversion_problem(&Config::default()).unwrap();
    assert_eq!(prob.config.schedule.cam_only_iters, 7);
    assert_eq!(prob.observed, inst.observed);
    assert_eq!(prob.model.basis_rows(), model.basis_rows());
}

#[test]
fn problem_file_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.json");
    let write = |v: serde_json::Value| std::fs::write(&p, v.to_string()).unwrap();
    write(serde_json::json!({"image_size": [10, 10], "landmarks": [[0.5, 1.5]], "model_path": "m.json"}));
    assert!(matches!(read_problem(&p), Err(Error::Invalid(_))));
    write(serde_json::json!({"image_size": [10, 10], "landmarks": [], "model_path": "m.json", "extra": 1}));
    assert!(matches!(read_problem(&p), Err(Error::Parse { .. })));
    std::fs::write(&p, "{\n  \"image_size\": [10,\n").unwrap();
    match read_problem(&p) {
        Err(Error::Parse { offset, .. }) => assert!(offset >= 16, "{offset}"),
        r => panic!("{r:?}"),
    }
    let cfg = Config::default();
    assert!(cfg
        .with_json_overrides(&serde_json::json!({"schedule": {"nope": 1}}))
        .is_err());
    assert!(cfg
        .with_json_overrides(&serde_json::json!({"warp": {"supersample": 0}}))
        .is_err());
}

#[test]
fn solution_json_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let model = Arc::new(spec.model().unwrap());
    let inst = generate_with_model(model.clone(), 8, &spec).unwrap();
    let mut cfg = Config::default();
    cfg.schedule.cam_only_iters = 20;
    cfg.schedule.joint_iters_end = 40;
    cfg.schedule.refine_max_iters = 10;
    let prob = InversionProblem::new(inst.observed.clone(), model, spec.width, spec.height, cfg).unwrap();
    let sol = solve(&prob).unwrap();
    let p = dir.path().join("sol.json");
    write_solution(&p, &sol).unwrap();
    let back = read_solution(&p).unwrap();
    assert_eq!(back, sol.without_trace());
    assert_eq!(solution_json(&back).unwrap(), std::fs::read_to_string(&p).unwrap());
    let trace = std::fs::read_to_string(trace_path(&p)).unwrap();
    assert_eq!(trace.lines().count(), sol.loss_trace.len());
    let first: undistort::solver::TraceEntry = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first, sol.loss_trace[0]);
}

#[test]
fn atomic_write_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.txt");
    write_atomic(&p, b"one").unwrap();
    write_atomic(&p, b"two").unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), b"two");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(write_atomic(dir.path().join("missing/x.txt"), b"").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ppm_round_trip(w in 1u32..20, h in 1u32..20, seed in 0u32..1000) {
        let img = Image::from_fn(w, h, 255.0, |x, y| {
            let v = ((x * 31 + y * 17 + seed) % 256) as f64;
            [v, 255.0 - v, (v * 3.0) % 256.0]
        });
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn pfm_round_trip(w in 1u32..12, h in 1u32..12, seed in 0u32..1000) {
        let d = DepthImage::from_fn(w, h, |x, y| {
            let k = (x * 13 + y * 7 + seed) % 11;
            (k != 0).then(|| (k as f32 * 0.173) as f64)
        });
        prop_assert_eq!(decode_pfm(&encode_pfm(&d)).unwrap(), d);
    }
}
