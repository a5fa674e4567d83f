use std::sync::Arc;

use undistort::config::Config;
use undistort::facemodel::{anchor_depth, render_landmarks};
use undistort::geometry::{CameraState, Limits};
use undistort::landmarks::LandmarkSet;
use undistort::objective::Layout;
use undistort::solver::{
    initialize, run_stage_camera, run_stage_joint, run_stage_refine, solve, solve_from, Ablation, Group,
    InversionProblem, SolverState, Stage,
};
use undistort::synth::{generate_with_model, SynthSpec, SyntheticInstance};
use undistort::Error;

fn instance(seed: u64) -> SyntheticInstance {
    let spec = SynthSpec::default();
    let model = Arc::new(spec.model().unwrap());
    generate_with_model(model, seed, &spec).unwrap()
}

fn problem(inst: &SyntheticInstance, config: Config) -> InversionProblem {
    InversionProblem::new(inst.observed.clone(), inst.model.clone(), 512, 512, config).unwrap()
}

fn landmark_rms(a: &LandmarkSet, b: &LandmarkSet) -> f64 {
    let s: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum();
    (s / a.len() as f64).sqrt()
}

/// True camera moved to `d` along its axis and re-anchored there.
fn true_camera_at(inst: &SyntheticInstance, d: f64) -> CameraState {
    let limits = Limits::default();
    let cam = inst.truth.true_cam.set_distance(d, &limits).unwrap();
    let depth = anchor_depth(&inst.model, &inst.truth.true_latent, &cam).unwrap();
    cam.rebased(depth, &limits).unwrap()
}

fn floor_sigmas(n: usize) -> Vec<f64> {
    vec![1e-3; n]
}

#[test]
fn initialize_places_camera_at_eps_init() {
    let inst = instance(1000);
    let p = problem(&inst, Config::default());
    let (cam, latent) = initialize(&p).unwrap();
    assert!((cam.distance() - 0.25).abs() < 1e-9);
    assert!(latent.w.iter().all(|&w| w == 0.0));
    assert!(latent.residual.iter().all(|&r| r == 0.0));
    assert_eq!(cam.anchor().delta_tz, 1.0);
    assert!(cam.focal_coupled());
}

#[test]
fn initialize_at_eps_init_is_a_fixed_point() {
    let inst = instance(1001);
    let p = problem(&inst, Config::default());
    let (cam, _) = initialize(&p).unwrap();
    let again = p.clone().with_init_camera(cam);
    let (cam2, _) = initialize(&again).unwrap();
    assert!((cam2.distance() - cam.distance()).abs() < 1e-12);
    assert!((cam2.focal() - cam.focal()).abs() < 1e-9);
    assert_eq!(cam2.rotation(), cam.rotation());
}

#[test]
fn initialize_without_near_init_keeps_initializer_distance() {
    let inst = instance(1002);
    let mut config = Config::default();
    config.schedule.ablation.no_near_init = true;
    let (cam, _) = initialize(&problem(&inst, config)).unwrap();
    assert!(cam.distance() > 1.0, "{}", cam.distance());
}

#[test]
fn initialize_without_reparam_decouples_focal() {
    let inst = instance(1002);
    let mut config = Config::default();
    config.schedule.ablation.no_reparam = true;
    let (cam, _) = initialize(&problem(&inst, config)).unwrap();
    assert!(!cam.focal_coupled());
    assert_eq!(cam.alpha(), 1.0);
    assert!((cam.distance() - 0.25).abs() < 1e-9);
}

#[test]
fn scrambled_landmarks_fail_initialization() {
    let inst = instance(1003);
    let mut observed = inst.observed.clone();
    let n = observed.len();
    // Deterministic scramble: a stride permutation of the coordinates.
    let xs: Vec<f64> = (0..n).map(|i| observed.points[(i * 7) % n][0]).collect();
    let ys: Vec<f64> = (0..n).map(|i| observed.points[(i * 13 + 5) % n][1]).collect();
    for i in 0..n {
        observed.points[i] = [xs[i], ys[i]];
    }
    let p = InversionProblem::new(observed, inst.model.clone(), 512, 512, Config::default()).unwrap();
    assert!(matches!(initialize(&p), Err(Error::InitializationFailed(_))));
}

#[test]
fn problem_rejects_wrong_landmark_count() {
    let inst = instance(1000);
    let observed = LandmarkSet::from_points(inst.observed.points[..10].to_vec(), 0.01).unwrap();
    assert!(matches!(
        InversionProblem::new(observed, inst.model.clone(), 512, 512, Config::default()),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn zero_iterations_return_input_state() {
    let inst = instance(1004);
    let mut config = Config::default();
    config.schedule.cam_only_iters = 0;
    let p = problem(&inst, config);
    let (cam, latent) = initialize(&p).unwrap();
    let state = SolverState::new(&p, &cam, &latent, &floor_sigmas(468)).unwrap();
    let x0 = state.params.x.clone();
    let out = run_stage_camera(&p, state).unwrap();
    assert_eq!(out.params.x, x0);
    assert!(out.trace.is_empty());
}

#[test]
fn camera_stage_recovers_distance_with_true_shape() {
    let inst = {
        let spec = SynthSpec {
            d_range: [0.5, 0.5],
            ..SynthSpec::default()
        };
        generate_with_model(Arc::new(spec.model().unwrap()), 1005, &spec).unwrap()
    };
    let p = problem(&inst, Config::default());
    let cam = true_camera_at(&inst, 0.25);
    let state = SolverState::new(&p, &cam, &inst.truth.true_latent, &inst.observed.sigma).unwrap();
    let out = run_stage_camera(&p, state).unwrap();
    let d = out.params.distance();
    assert!((d - 0.5).abs() / 0.5 < 0.02, "recovered {d}");
    assert_eq!(out.trace.len(), 300);
    assert!(out.trace.iter().all(|t| t.distance > 0.0 && t.distance.is_finite()));
    assert!(out.params.x[Layout::DELTA_TZ] >= 1e-6);
    // Latent frozen.
    assert_eq!(out.params.latent().w, inst.truth.true_latent.w);
}

#[test]
fn joint_stage_fits_noiseless_instance() {
    let inst = instance(1006);
    let p = problem(&inst, Config::default());
    let (cam, latent) = initialize(&p).unwrap();
    let state = SolverState::new(&p, &cam, &latent, &inst.observed.sigma).unwrap();
    let state = run_stage_camera(&p, state).unwrap();
    let state = run_stage_joint(&p, state).unwrap();
    assert_eq!(state.iter, 700);
    assert!(state.params.latent().residual.iter().all(|&r| r == 0.0));
    let limits = Limits::default();
    let pred = render_landmarks(&inst.model, &state.params.latent(), &state.camera(&limits).unwrap(), &limits).unwrap();
    let rms = landmark_rms(&pred, &inst.observed);
    assert!(rms < 1e-3, "rms {rms}");
}

#[test]
fn latent_is_projected_into_box() {
    let inst = instance(1007);
    let mut config = Config::default();
    config.schedule.w_max = 0.25;
    let p = problem(&inst, config);
    let sol = solve(&p).unwrap();
    assert!(sol.latent.w.iter().all(|w| w.abs() <= 0.25));
    assert!(sol.latent.w.iter().any(|w| w.abs() == 0.25));
}

#[test]
fn refine_keeps_zero_residual_at_exact_fit() {
    let inst = instance(1008);
    let p = problem(&inst, Config::default());
    let state = SolverState::new(&p, &inst.truth.true_cam, &inst.truth.true_latent, &floor_sigmas(468)).unwrap();
    let out = run_stage_refine(&p, state).unwrap();
    let max = out.params.latent().residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    assert!(max < 1e-6, "{max}");
}

#[test]
fn refine_absorbs_out_of_basis_perturbation() {
    let inst = instance(1009);
    let perturbed = [3usize, 40, 41, 200, 377];
    let mut observed = inst.observed.clone();
    for &i in &perturbed {
        observed.points[i][0] += 0.003;
        observed.points[i][1] -= 0.002;
    }
    let p = InversionProblem::new(observed, inst.model.clone(), 512, 512, Config::default()).unwrap();
    let state = SolverState::new(&p, &inst.truth.true_cam, &inst.truth.true_latent, &floor_sigmas(468)).unwrap();
    let before = state.params.clone();
    let out = run_stage_refine(&p, state).unwrap();
    assert_eq!(out.params.x[..Layout::GAMMA + 1], before.x[..Layout::GAMMA + 1]);
    assert_eq!(out.params.latent().w, before.latent().w);
    assert_eq!(out.params.sigmas(), before.sigmas());
    let res = out.params.latent().residual;
    let norm = |i: usize| (res[3 * i].powi(2) + res[3 * i + 1].powi(2) + res[3 * i + 2].powi(2)).sqrt();
    for &i in &perturbed {
        assert!(norm(i) > 1e-5, "landmark {i} residual {}", norm(i));
    }
    let untouched = (0..468).filter(|i| !perturbed.contains(i)).map(norm).fold(0.0f64, f64::max);
    let touched = perturbed.iter().map(|&i| norm(i)).fold(f64::INFINITY, f64::min);
    assert!(untouched < touched, "{untouched} vs {touched}");
}

#[test]
fn refine_never_increases_loss() {
    let inst = instance(1010);
    let p = problem(&inst, Config::default());
    let sol = solve(&p).unwrap();
    let refine = sol.stage_boundaries.iter().find(|b| b.stage == Stage::Refine).unwrap();
    let losses: Vec<f64> = sol.loss_trace[refine.start..refine.end].iter().map(|t| t.loss.total).collect();
    let mut increase = 0.0;
    for w in losses.windows(2) {
        increase += (w[1] - w[0]).max(0.0);
    }
    assert!(increase <= 1e-9, "{increase}");
}

#[test]
fn stage_boundaries_gate_parameter_groups() {
    let inst = instance(1011);
    let p = problem(&inst, Config::default());
    let sol = solve(&p).unwrap();
    let stages: Vec<Stage> = sol.stage_boundaries.iter().map(|b| b.stage).collect();
    assert_eq!(stages, vec![Stage::Camera, Stage::Joint, Stage::Refine]);
    assert_eq!(sol.stage_boundaries[0].end, 300);
    assert_eq!(sol.stage_boundaries[1].end, 700);
    for t in &sol.loss_trace {
        if t.iter < 300 {
            assert!(!t.groups.contains(&Group::Latent) && !t.groups.contains(&Group::Sigma));
        }
        if t.iter < 700 {
            assert!(!t.groups.contains(&Group::Residual));
        } else {
            assert_eq!(t.groups, vec![Group::Residual]);
        }
    }
}

#[test]
fn no_schedule_updates_everything_from_start() {
    let inst = instance(1011);
    let mut config = Config::default();
    config.schedule.ablation.no_schedule = true;
    let sol = solve(&problem(&inst, config)).unwrap();
    assert_eq!(sol.stage_boundaries[0].stage, Stage::Merged);
    assert!(sol.loss_trace[0].groups.contains(&Group::Latent));
    assert!(sol.loss_trace[0].groups.contains(&Group::Residual));
}

#[test]
fn alpha_stays_in_bounds() {
    let limits = Limits::default();
    for seed in [1012, 1013, 1014] {
        let inst = instance(seed);
        let p = problem(&inst, Config::default());
        let (cam, _) = initialize(&p).unwrap();
        let d0 = cam.anchor().d0;
        let sol = solve(&p).unwrap();
        for t in &sol.loss_trace {
            let alpha = t.distance / d0;
            assert!(alpha > limits.alpha_min && alpha <= limits.alpha_max, "alpha {alpha}");
        }
    }
}

#[test]
fn loss_trace_decreases_over_windows() {
    let inst = instance(1015);
    let p = problem(&inst, Config::default());
    let sol = solve(&p).unwrap();
    for b in &sol.stage_boundaries {
        let losses: Vec<f64> = sol.loss_trace[b.start..b.end].iter().map(|t| t.loss.total).collect();
        for i in 0..losses.len().saturating_sub(50) {
            assert!(
                losses[i + 50] <= losses[i] + 1e-9 * losses[i].abs().max(1.0),
                "{:?} iteration {}: {} -> {}",
                b.stage,
                b.start + i,
                losses[i],
                losses[i + 50]
            );
        }
    }
}

#[test]
fn solve_is_deterministic() {
    let inst = instance(1016);
    let mut config = Config::default();
    config.schedule.snapshot_hashes = true;
    let a = solve(&problem(&inst, config)).unwrap();
    let b = solve(&problem(&inst, config)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.loss_trace.iter().all(|t| t.snapshot.as_ref().is_some_and(|s| s.len() == 16)));
}

#[test]
fn solution_distance_is_alpha_times_d0() {
    let inst = instance(1017);
    let sol = solve(&problem(&inst, Config::default())).unwrap();
    let a = sol.cam.anchor();
    assert_eq!(sol.cam.alpha(), 1.0);
    assert_eq!(sol.distance, sol.cam.alpha() * a.d0);
    let zero_res = undistort::facemodel::FaceLatent {
        w: sol.latent.w.clone(),
        residual: vec![0.0; sol.latent.residual.len()],
    };
    let depth = anchor_depth(&inst.model, &zero_res, &sol.cam).unwrap();
    assert!((depth - sol.distance).abs() < 1e-12);
}

#[test]
fn solve_from_truth_stays_at_truth() {
    // Compared in physical units: shape in meters, rotation in radians,
    // focal relative. Latent coefficients are basis-scale dependent.
    let inst = instance(1018);
    let p = problem(&inst, Config::default());
    let sol = solve_from(&p, &inst.truth.true_cam, &inst.truth.true_latent, &floor_sigmas(468)).unwrap();
    let shape_true = undistort::facemodel::shape(&inst.model, &inst.truth.true_latent).unwrap();
    let shape_fit = undistort::facemodel::shape(&inst.model, &sol.latent).unwrap();
    let shape_err = shape_true
        .iter()
        .zip(&shape_fit)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max);
    let rot_err = (sol.cam.rotation().axis_angle() - inst.truth.true_cam.rotation().axis_angle()).amax();
    let d_err = (sol.distance - inst.true_distance()).abs();
    let f_err = (sol.focal - inst.truth.focal).abs() / inst.truth.focal;
    let t_err = (sol.cam.extrinsics().translation - inst.truth.true_cam.extrinsics().translation).amax();
    assert!(shape_err < 1e-6, "shape {shape_err}");
    assert!(rot_err < 1e-6, "rotation {rot_err}");
    assert!(t_err < 1e-6, "translation {t_err}");
    assert!(d_err < 1e-6, "distance {d_err}");
    assert!(f_err < 1e-6, "focal {f_err}");
}

#[test]
fn focal_over_distance_is_identifiable() {
    let spec = SynthSpec::default();
    let model = Arc::new(spec.model().unwrap());
    let mut errs: Vec<f64> = (1100..1120)
        .map(|seed| {
            let inst = generate_with_model(model.clone(), seed, &spec).unwrap();
            let sol = solve(&problem(&inst, Config::default())).unwrap();
            let truth = inst.truth.focal / inst.true_distance();
            (sol.focal / sol.distance - truth).abs() / truth
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[errs.len() / 2] < 0.02, "{errs:?}");
}

#[test]
fn ablation_flags_parse() {
    let a = Ablation::parse("no_reparam, no_schedule").unwrap();
    assert!(!a.reparam() && a.near_init() && !a.schedule());
    let all = Ablation::parse("no_all").unwrap();
    assert!(!all.reparam() && !all.near_init() && !all.schedule());
    assert_eq!(Ablation::parse("full").unwrap(), Ablation::default());
    assert_eq!(Ablation::default().name(), "full");
    assert!(Ablation::parse("no_typo").is_err());
}
