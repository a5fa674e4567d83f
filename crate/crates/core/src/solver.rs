//! Staged inversion: near-range initialization, a camera-only stage, a joint
//! camera and face stage, and a residual refinement stage.
//!
//! All stages use per-coordinate adaptive moment updates. After every step
//! `tz = tz0 / sqrt(delta_tz)` and the focal length follows the coupling, so
//! the stages only ever see consistent camera states.

use std::sync::Arc;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::facemodel::{anchor_depth, FaceLatent, FaceModel};
use crate::geometry::{CameraParams, CameraState, Limits, ReparamAnchor, Rotation};
use crate::landmarks::LandmarkSet;
use crate::objective::{Layout, LossBreakdown, LossWeights, Objective, Params};

/// Switches for the ablation grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Focal length fixed (`alpha == 1`).
    pub no_reparam: bool,
    /// Start from the initializer's distance instead of `eps_init`.
    pub no_near_init: bool,
    /// Optimize every parameter group from the first iteration.
    pub no_schedule: bool,
    /// All three of the above.
    pub no_all: bool,
}

impl Ablation {
    pub fn reparam(&self) -> bool {
        !(self.no_reparam || self.no_all)
    }

    pub fn near_init(&self) -> bool {
        !(self.no_near_init || self.no_all)
    }

    pub fn schedule(&self) -> bool {
        !(self.no_schedule || self.no_all)
    }

    /// Parse a comma separated list such as `no_reparam,no_schedule`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no_reparam" => a.no_reparam = true,
                "no_near_init" => a.no_near_init = true,
                "no_schedule" => a.no_schedule = true,
                "no_all" => a.no_all = true,
                "full" | "none" => {}
                other => {
                    return Err(Error::Config(format!("unknown ablation flag `{other}`")));
                }
            }
        }
        Ok(a)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_all {
            parts.push("no_all");
        }
        if self.no_reparam {
            parts.push("no_reparam");
        }
        if self.no_near_init {
            parts.push("no_near_init");
        }
        if self.no_schedule {
            parts.push("no_schedule");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub cam_only_iters: usize,
    pub joint_iters_end: usize,
    pub refine_max_iters: usize,
    pub lr_cam: f64,
    pub lr_face: f64,
    pub lr_refine: f64,
    /// Rotation and `tx`, `ty` use `pose_lr_factor * lr_cam`.
    pub pose_lr_factor: f64,
    /// `gamma` uses `gamma_lr_factor * lr_cam`.
    pub gamma_lr_factor: f64,
    /// Initial camera-to-anchor distance in meters.
    pub eps_init: f64,
    pub early_stop_delta: f64,
    pub early_stop_window: usize,
    pub w_max: f64,
    pub delta_tz_min: f64,
    /// 35mm-equivalent focal length assumed by the weak-perspective
    /// initializer.
    pub init_focal_35mm: f64,
    /// Alignment residual (relative to landmark spread) above which
    /// initialization fails.
    pub init_max_residual: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Record a parameter hash per iteration in the trace.
    pub snapshot_hashes: bool,
    pub ablation: Ablation,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cam_only_iters: 300,
            joint_iters_end: 700,
            refine_max_iters: 300,
            lr_cam: 5e-3,
            lr_face: 1e-2,
            lr_refine: 3e-4,
            pose_lr_factor: 0.1,
            gamma_lr_factor: 0.01,
            eps_init: 0.25,
            early_stop_delta: 1e-6,
            early_stop_window: 20,
            w_max: 4.0,
            delta_tz_min: 1e-6,
            init_focal_35mm: 150.0,
            init_max_residual: 0.25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            snapshot_hashes: false,
            ablation: Ablation::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_cam", self.lr_cam),
            ("lr_face", self.lr_face),
            ("lr_refine", self.lr_refine),
            ("pose_lr_factor", self.pose_lr_factor),
            ("gamma_lr_factor", self.gamma_lr_factor),
            ("eps_init", self.eps_init),
            ("init_focal_35mm", self.init_focal_35mm),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cam_only_iters >= self.joint_iters_end {
            return Err(Error::Config(format!(
                "cam_only_iters ({}) must be below joint_iters_end ({})",
                self.cam_only_iters, self.joint_iters_end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_res: f64,
    pub lambda_w: f64,
    pub sigma_floor: f64,
    /// Initial sigma when the problem carries no detector sigma.
    pub sigma_init: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_res: 10.0,
            lambda_w: 1e-3,
            sigma_floor: 1e-3,
            sigma_init: 0.01,
        }
    }
}

impl ObjectiveConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_res: self.lambda_res,
            lambda_w: self.lambda_w,
        }
    }
}

/// Observed landmarks, the face model and the solver configuration.
#[derive(Debug, Clone)]
pub struct InversionProblem {
    pub observed: LandmarkSet,
    pub model: Arc<FaceModel>,
    pub width: u32,
    pub height: u32,
    /// Coarse camera from an external initializer; the built-in
    /// weak-perspective alignment is used when absent.
    pub init_camera: Option<CameraState>,
    pub config: Config,
}

impl InversionProblem {
    pub fn new(
        observed: LandmarkSet,
        model: Arc<FaceModel>,
        width: u32,
        height: u32,
        config: Config,
    ) -> Result<Self> {
        observed.validate()?;
        if observed.len() != model.n_landmarks() {
            return Err(Error::DimensionMismatch(format!(
                "{} observed landmarks, model has {}",
                observed.len(),
                model.n_landmarks()
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions("image size must be non-zero".into()));
        }
        config.schedule.validate()?;
        Ok(InversionProblem {
            observed,
            model,
            width,
            height,
            init_camera: None,
            config,
        })
    }

    pub fn with_init_camera(mut self, cam: CameraState) -> Self {
        self.init_camera = Some(cam);
        self
    }

    fn objective(&self) -> Result<Objective<'_>> {
        Objective::new(
            &self.observed,
            &self.model,
            self.config.objective.weights(),
            self.config.limits.z_min,
        )
    }

    fn limits(&self) -> &Limits {
        &self.config.limits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Distance,
    Pose,
    Gamma,
    Latent,
    Sigma,
    Residual,
}

impl Group {
    fn ranges(self, layout: &Layout) -> Vec<std::ops::Range<usize>> {
        match self {
            Group::Distance => vec![Layout::DELTA_TZ..Layout::DELTA_TZ + 1],
            Group::Pose => vec![Layout::TX..Layout::TY + 1, Layout::ROT],
            Group::Gamma => vec![Layout::GAMMA..Layout::GAMMA + 1],
            Group::Latent => vec![layout.w()],
            Group::Sigma => vec![layout.log_sigma()],
            Group::Residual => vec![layout.residual()],
        }
    }

    fn rate(self, cfg: &ScheduleConfig) -> f64 {
        match self {
            Group::Distance => cfg.lr_cam,
            Group::Pose => cfg.pose_lr_factor * cfg.lr_cam,
            Group::Gamma => cfg.gamma_lr_factor * cfg.lr_cam,
            Group::Latent | Group::Sigma => cfg.lr_face,
            Group::Residual => cfg.lr_refine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Camera,
    Joint,
    /// Every group at once (scheduling disabled).
    Merged,
    Refine,
}

impl Stage {
    pub fn groups(self) -> &'static [Group] {
        use Group::*;
        match self {
            Stage::Camera => &[Distance, Pose, Gamma],
            Stage::Joint => &[Distance, Pose, Gamma, Latent, Sigma],
            Stage::Merged => &[Distance, Pose, Gamma, Latent, Sigma, Residual],
            Stage::Refine => &[Residual],
        }
    }
}

/// One accepted iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
    pub distance: f64,
    pub focal: f64,
    pub groups: Vec<Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: Stage,
    pub start: usize,
    pub end: usize,
}

/// Per-coordinate adaptive moment estimates.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(len: usize, cfg: &ScheduleConfig) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], i: usize, lr: f64) {
        self.t[i] += 1;
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
        let mh = self.m[i] / (1.0 - self.beta1.powi(self.t[i]));
        let vh = self.v[i] / (1.0 - self.beta2.powi(self.t[i]));
        x[i] -= lr * mh / (vh.sqrt() + self.eps);
    }
}

/// Optimizer state carried between stages.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub params: Params,
    pub trace: Vec<TraceEntry>,
    pub boundaries: Vec<StageBoundary>,
    /// Global iteration counter.
    pub iter: usize,
    loss: LossBreakdown,
    grad: Vec<f64>,
    adam: Adam,
}

impl SolverState {
    pub fn new(problem: &InversionProblem, cam: &CameraState, latent: &FaceLatent, sigmas: &[f64]) -> Result<Self> {
        let params = Params::from_state(cam, latent, sigmas)?;
        let objective = problem.objective()?;
        let (loss, grad) = objective
            .loss_and_gradient(&params)
            .map_err(|e| match e {
                Error::InfeasibleRender(m) => Error::InitializationFailed(format!("initial state is infeasible: {m}")),
                other => other,
            })?;
        let adam = Adam::new(params.x.len(), &problem.config.schedule);
        Ok(SolverState {
            params,
            trace: Vec::new(),
            boundaries: Vec::new(),
            iter: 0,
            loss,
            grad,
            adam,
        })
    }

    pub fn loss(&self) -> LossBreakdown {
        self.loss
    }

    pub fn camera(&self, limits: &Limits) -> Result<CameraState> {
        self.params.camera(limits)
    }
}

/// Final result of [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSolution {
    /// Camera re-anchored at the fitted eye midpoint (`alpha == 1`,
    /// `d0 == distance`).
    pub cam: CameraState,
    pub latent: FaceLatent,
    pub sigmas: Vec<f64>,
    pub loss_trace: Vec<TraceEntry>,
    pub stage_boundaries: Vec<StageBoundary>,
    /// Recovered camera-to-anchor distance, `alpha * d0`.
    pub distance: f64,
    pub focal: f64,
    pub final_loss: LossBreakdown,
}

impl InversionSolution {
    /// Solution without its trace, for compact storage.
    pub fn without_trace(&self) -> InversionSolution {
        InversionSolution {
            loss_trace: Vec::new(),
            ..self.clone()
        }
    }
}

/// Rigid weak-perspective alignment of the mean shape to the observed
/// landmarks, lifted to a pinhole camera with the configured nominal focal
/// length.
pub fn weak_perspective_camera(problem: &InversionProblem) -> Result<CameraState> {
    let cfg = &problem.config.schedule;
    let model = &problem.model;
    let (w, h) = (problem.width as f64, problem.height as f64);
    let mean = model.mean().as_slice();
    let vis: Vec<usize> = (0..model.n_landmarks())
        .filter(|&i| problem.observed.visibility[i])
        .collect();
    if vis.len() < 4 {
        return Err(Error::InitializationFailed(format!(
            "{} visible landmarks, need at least 4",
            vis.len()
        )));
    }
    let px: Vec<Vector2<f64>> = vis
        .iter()
        .map(|&i| Vector2::new(problem.observed.points[i][0] * w, problem.observed.points[i][1] * h))
        .collect();
    let pw: Vec<Vector3<f64>> = vis
        .iter()
        .map(|&i| Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]))
        .collect();
    let nv = vis.len() as f64;
    let xm = px.iter().sum::<Vector2<f64>>() / nv;
    let wm = pw.iter().sum::<Vector3<f64>>() / nv;
    let mut cross = Matrix2x3::zeros();
    let mut cov = Matrix3::zeros();
    for (x, p) in px.iter().zip(&pw) {
        let (dx, dp) = (x - xm, p - wm);
        cross += dx * dp.transpose();
        cov += dp * dp.transpose();
    }
    let cov_inv = cov
        .try_inverse()
        .ok_or_else(|| Error::InitializationFailed("mean shape is degenerate".into()))?;
    let affine = cross * cov_inv;
    let svd = affine.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let scale = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InitializationFailed(format!("alignment scale {scale}")));
    }
    let rows = u * vt;
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r3 = r1.cross(&r2);
    let rot = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);

    let spread = (px.iter().map(|x| (x - xm).norm_squared()).sum::<f64>() / nv).sqrt();
    let resid = (px
        .iter()
        .zip(&pw)
        .map(|(x, p)| {
            let q = rot * (p - wm) * scale;
            (x - xm - Vector2::new(q.x, q.y)).norm_squared()
        })
        .sum::<f64>()
        / nv)
        .sqrt();
    let rel = resid / spread.max(1e-12);
    if !(rel <= cfg.init_max_residual) {
        return Err(Error::InitializationFailed(format!(
            "rigid alignment residual {rel:.4} exceeds {}",
            cfg.init_max_residual
        )));
    }

    let f0 = cfg.init_focal_35mm * w / 36.0;
    let anchor = model.anchor_of(mean);
    let anchor_z = f0 / scale;
    let tz = anchor_z - (rot * anchor).z;
    // The weak-perspective image of the world origin.
    let q = rot * wm * scale;
    let origin_px = xm - Vector2::new(q.x, q.y);
    let (cx, cy) = (w / 2.0, h / 2.0);
    CameraState::new(
        CameraParams {
            rotation: Rotation::from_matrix(&rot),
            tx: (origin_px.x - cx) * tz / f0,
            ty: (origin_px.y - cy) * tz / f0,
            f0,
            gamma: 1.0,
            cx,
            cy,
            width: problem.width,
            height: problem.height,
            anchor: ReparamAnchor {
                tz0: tz,
                d0: anchor_z,
                delta_tz: 1.0,
            },
            focal_coupled: true,
        },
        problem.limits(),
    )
}

/// Initial camera and latent: anchor the coupling at the initializer's
/// distance, then dolly to `eps_init` (unless disabled) and re-anchor there
/// so the optimization starts at `delta_tz == 1`.
pub fn initialize(problem: &InversionProblem) -> Result<(CameraState, FaceLatent)> {
    let cfg = &problem.config.schedule;
    let limits = problem.limits();
    let latent = problem.model.zero_latent();
    let base = match &problem.init_camera {
        Some(c) => *c,
        None => weak_perspective_camera(problem)?,
    };
    let depth = anchor_depth(&problem.model, &latent, &base)?;
    // Coupling is toggled only at alpha == 1, right after re-anchoring.
    let mut cam = base
        .rebased(depth, limits)?
        .with_coupling(cfg.ablation.reparam(), limits)?;
    if cfg.ablation.near_init() {
        cam = cam.set_distance(cfg.eps_init, limits)?;
        cam = cam.rebased(cam.distance(), limits)?;
    }
    Ok((cam, latent))
}

fn initial_sigmas(problem: &InversionProblem) -> Vec<f64> {
    let floor = problem.config.objective.sigma_floor;
    problem.observed.sigma.iter().map(|s| s.max(floor)).collect()
}

/// Bounds on `delta_tz` that keep alpha inside the configured range.
fn delta_bounds(params: &Params, cfg: &ScheduleConfig, limits: &Limits) -> (f64, f64) {
    let f = &params.frame;
    let mut lo = cfg.delta_tz_min;
    let mut hi = f64::INFINITY;
    if f.focal_coupled {
        let tz_lo = f.tz0 - f.d0 + limits.alpha_min * (1.0 + 1e-9) * f.d0;
        let tz_hi = f.tz0 - f.d0 + limits.alpha_max * f.d0;
        if tz_hi > 0.0 {
            lo = lo.max((f.tz0 / tz_hi).powi(2));
        }
        if tz_lo > 0.0 {
            hi = (f.tz0 / tz_lo).powi(2);
        }
    }
    (lo, hi)
}

fn project_params(params: &mut Params, cfg: &ScheduleConfig, obj: &crate::solver::ObjectiveConfig, limits: &Limits) {
    let (lo, hi) = delta_bounds(params, cfg, limits);
    let d = &mut params.x[Layout::DELTA_TZ];
    *d = d.clamp(lo, hi);
    let g = &mut params.x[Layout::GAMMA];
    *g = g.max(1e-6);
    let layout = params.layout;
    for w in &mut params.x[layout.w()] {
        *w = w.clamp(-cfg.w_max, cfg.w_max);
    }
    let floor = obj.sigma_floor.ln();
    for s in &mut params.x[layout.log_sigma()] {
        *s = s.max(floor);
    }
}

fn snapshot_hash(params: &Params) -> String {
    let mut hasher = Sha256::new();
    for v in &params.x {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Run `iters` adaptive steps on the groups of `stage`. With `monotone`, a
/// step that raises the loss is retried at half the rate and the stage
/// stops once no decrease can be found; otherwise only infeasible steps
/// are retried.
fn run_stage(
    problem: &InversionProblem,
    mut state: SolverState,
    stage: Stage,
    iters: usize,
    monotone: bool,
    early_stop: bool,
) -> Result<SolverState> {
    let cfg = &problem.config.schedule;
    let limits = problem.limits();
    let objective = problem.objective()?;
    let groups = stage.groups();
    let layout = state.params.layout;
    let ranges: Vec<(std::ops::Range<usize>, f64)> = groups
        .iter()
        .flat_map(|g| {
            let rate = g.rate(cfg);
            g.ranges(&layout).into_iter().map(move |r| (r, rate))
        })
        .collect();
    let start = state.iter;
    let mut scale = 1.0;
    let mut history: Vec<f64> = Vec::with_capacity(iters);

    'outer: for _ in 0..iters {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut cand = state.params.clone();
            let mut adam = state.adam.clone();
            for (r, rate) in &ranges {
                for i in r.clone() {
                    adam.step(&mut cand.x, &state.grad, i, rate * scale);
                }
            }
            project_params(&mut cand, cfg, &problem.config.objective, limits);
            match objective.loss_and_gradient(&cand) {
                Ok((loss, grad)) if !monotone || loss.total <= state.loss.total => {
                    state.params = cand;
                    state.adam = adam;
                    state.loss = loss;
                    state.grad = grad;
                    break;
                }
                Ok(_) | Err(Error::InfeasibleRender(_)) => {
                    scale *= 0.5;
                    if attempts >= 40 {
                        if monotone {
                            break 'outer;
                        }
                        return Err(Error::InfeasibleRender(format!(
                            "no feasible step at iteration {}",
                            state.iter
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        history.push(state.loss.total);
        state.trace.push(TraceEntry {
            iter: state.iter,
            stage,
            loss: state.loss,
            distance: state.params.distance(),
            focal: state.params.focal(),
            groups: groups.to_vec(),
            snapshot: cfg.snapshot_hashes.then(|| snapshot_hash(&state.params)),
        });
        state.iter += 1;
        if early_stop && history.len() > cfg.early_stop_window {
            let k = history.len() - 1;
            if history[k - cfg.early_stop_window] - history[k] < cfg.early_stop_delta {
                break;
            }
        }
    }
    state.boundaries.push(StageBoundary {
        stage,
        start,
        end: state.iter,
    });
    Ok(state)
}

/// Camera-only stage: distance, pose and gamma; latent and sigma frozen.
pub fn run_stage_camera(problem: &InversionProblem, state: SolverState) -> Result<SolverState> {
    let n = problem.config.schedule.cam_only_iters;
    run_stage(problem, state, Stage::Camera, n, false, false)
}

/// Joint stage up to `joint_iters_end`: camera, latent and sigma together.
pub fn run_stage_joint(problem: &InversionProblem, state: SolverState) -> Result<SolverState> {
    let end = problem.config.schedule.joint_iters_end;
    let n = end.saturating_sub(state.iter);
    run_stage(problem, state, Stage::Joint, n, false, false)
}

/// All groups from the current iteration to `joint_iters_end`.
pub fn run_stage_merged(problem: &InversionProblem, state: SolverState) -> Result<SolverState> {
    let end = problem.config.schedule.joint_iters_end;
    let n = end.saturating_sub(state.iter);
    run_stage(problem, state, Stage::Merged, n, false, false)
}

/// Residual refinement with everything else frozen; never increases the
/// loss and stops early once it stalls.
pub fn run_stage_refine(problem: &InversionProblem, state: SolverState) -> Result<SolverState> {
    let n = problem.config.schedule.refine_max_iters;
    run_stage(problem, state, Stage::Refine, n, true, true)
}

/// Full pipeline: initialize, then the scheduled stages.
pub fn solve(problem: &InversionProblem) -> Result<InversionSolution> {
    let (cam, latent) = initialize(problem)?;
    solve_from(problem, &cam, &latent, &initial_sigmas(problem))
}

/// Run the stages from an explicit starting point.
pub fn solve_from(
    problem: &InversionProblem,
    cam: &CameraState,
    latent: &FaceLatent,
    sigmas: &[f64],
) -> Result<InversionSolution> {
    let mut state = SolverState::new(problem, cam, latent, sigmas)?;
    if problem.config.schedule.ablation.schedule() {
        state = run_stage_camera(problem, state)?;
        state = run_stage_joint(problem, state)?;
    } else {
        state = run_stage_merged(problem, state)?;
    }
    state = run_stage_refine(problem, state)?;
    finish(problem, state)
}

fn finish(problem: &InversionProblem, state: SolverState) -> Result<InversionSolution> {
    let limits = problem.limits();
    let cam = state.params.camera(limits)?;
    let latent = state.params.latent();
    // The anchor is taken on the model shape; the residual field is a
    // per-landmark correction and does not move the reference point.
    let base = FaceLatent {
        w: latent.w.clone(),
        residual: vec![0.0; latent.residual.len()],
    };
    let depth = anchor_depth(&problem.model, &base, &cam)?;
    let cam = cam.rebased(depth, limits)?.with_coupling(true, limits)?;
    Ok(InversionSolution {
        distance: cam.distance(),
        focal: cam.focal(),
        cam,
        latent,
        sigmas: state.params.sigmas(),
        loss_trace: state.trace,
        stage_boundaries: state.boundaries,
        final_loss: state.loss,
    })
}
