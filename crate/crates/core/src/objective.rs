//! Uncertainty-weighted landmark loss, regularizers and their exact gradient.
//!
//! The free parameters are packed in one flat vector:
//!
//! | range          | meaning                                   |
//! |----------------|-------------------------------------------|
//! | `0`            | `delta_tz` (`tz = tz0 / sqrt(delta_tz)`)  |
//! | `1, 2`         | `tx`, `ty`                                |
//! | `3..6`         | rotation, axis-angle                      |
//! | `6`            | `gamma`                                   |
//! | `7..7+K`       | latent coefficients `w`                   |
//! | next `3N`      | residual displacement field               |
//! | last `N`       | `log sigma` per landmark                  |

use std::ops::Range;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

pub use crate::landmarks::LandmarkSet;

use crate::error::{Error, Result};
use crate::facemodel::{FaceLatent, FaceModel};
use crate::geometry::{alpha_from_tz, CameraParams, CameraState, Limits, ReparamAnchor, Rotation};

/// Loss assigned to parameter states whose render is infeasible.
pub const INFEASIBLE_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `sum_i |m_i - m'_i|^2 / (2 sigma_i^2)` over visible landmarks.
    pub landmark: f64,
    /// `sum_i log(sigma_i^2)` over visible landmarks.
    pub sigma_log: f64,
    /// `|residual|^2` (unweighted).
    pub residual_reg: f64,
    /// `|w|^2` (unweighted).
    pub latent_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The uncertainty-based landmark loss itself.
    pub fn landmark_total(&self) -> f64 {
        self.landmark + self.sigma_log
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_res: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_res: 10.0,
            lambda_w: 1e-3,
        }
    }
}

/// Eq-8 style loss between an observed and a predicted landmark set, with
/// the per-landmark `sigma` of the optimization state. Returns
/// `(landmark, sigma_log)`; invisible observations are skipped.
pub fn landmark_loss(
    observed: &LandmarkSet,
    predicted: &LandmarkSet,
    sigma: &[f64],
) -> Result<(f64, f64)> {
    let n = observed.len();
    if predicted.len() != n || sigma.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "observed {n}, predicted {}, sigma {}",
            predicted.len(),
            sigma.len()
        )));
    }
    let mut data = 0.0;
    let mut log_term = 0.0;
    for i in 0..n {
        if !observed.visibility[i] {
            continue;
        }
        let du = observed.points[i][0] - predicted.points[i][0];
        let dv = observed.points[i][1] - predicted.points[i][1];
        let s2 = sigma[i] * sigma[i];
        data += (du * du + dv * dv) / (2.0 * s2);
        log_term += s2.ln();
    }
    Ok((data, log_term))
}

/// Index layout of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub k: usize,
    pub n: usize,
}

impl Layout {
    pub const DELTA_TZ: usize = 0;
    pub const TX: usize = 1;
    pub const TY: usize = 2;
    pub const ROT: Range<usize> = 3..6;
    pub const GAMMA: usize = 6;

    pub fn w(&self) -> Range<usize> {
        7..7 + self.k
    }

    pub fn residual(&self) -> Range<usize> {
        let s = 7 + self.k;
        s..s + 3 * self.n
    }

    pub fn log_sigma(&self) -> Range<usize> {
        let s = 7 + self.k + 3 * self.n;
        s..s + self.n
    }

    pub fn len(&self) -> usize {
        7 + self.k + 4 * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The parts of the camera that are not optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub f0: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub tz0: f64,
    pub d0: f64,
    pub focal_coupled: bool,
}

/// A full optimization state: fixed frame plus the flat free vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub frame: CameraFrame,
    pub layout: Layout,
    pub x: Vec<f64>,
}

impl Params {
    pub fn from_state(cam: &CameraState, latent: &FaceLatent, sigmas: &[f64]) -> Result<Self> {
        let n = sigmas.len();
        let k = latent.w.len();
        if latent.residual.len() != 3 * n {
            return Err(Error::DimensionMismatch(format!(
                "residual length {} vs {} sigmas",
                latent.residual.len(),
                n
            )));
        }
        let p = cam.params();
        let layout = Layout { k, n };
        let mut x = vec![0.0; layout.len()];
        x[Layout::DELTA_TZ] = p.anchor.delta_tz;
        x[Layout::TX] = p.tx;
        x[Layout::TY] = p.ty;
        let aa = p.rotation.axis_angle();
        x[Layout::ROT].copy_from_slice(aa.as_slice());
        x[Layout::GAMMA] = p.gamma;
        x[layout.w()].copy_from_slice(&latent.w);
        x[layout.residual()].copy_from_slice(&latent.residual);
        for (dst, s) in x[layout.log_sigma()].iter_mut().zip(sigmas) {
            *dst = s.ln();
        }
        Ok(Params {
            frame: CameraFrame {
                f0: p.f0,
                cx: p.cx,
                cy: p.cy,
                width: p.width,
                height: p.height,
                tz0: p.anchor.tz0,
                d0: p.anchor.d0,
                focal_coupled: p.focal_coupled,
            },
            layout,
            x,
        })
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::from_axis_angle(Vector3::new(self.x[3], self.x[4], self.x[5]))
    }

    pub fn camera(&self, limits: &Limits) -> Result<CameraState> {
        let f = &self.frame;
        CameraState::new(
            CameraParams {
                rotation: self.rotation(),
                tx: self.x[Layout::TX],
                ty: self.x[Layout::TY],
                f0: f.f0,
                gamma: self.x[Layout::GAMMA],
                cx: f.cx,
                cy: f.cy,
                width: f.width,
                height: f.height,
                anchor: ReparamAnchor {
                    tz0: f.tz0,
                    d0: f.d0,
                    delta_tz: self.x[Layout::DELTA_TZ],
                },
                focal_coupled: f.focal_coupled,
            },
            limits,
        )
    }

    pub fn latent(&self) -> FaceLatent {
        FaceLatent {
            w: self.x[self.layout.w()].to_vec(),
            residual: self.x[self.layout.residual()].to_vec(),
        }
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.x[self.layout.log_sigma()].iter().map(|l| l.exp()).collect()
    }

    pub fn tz(&self) -> f64 {
        self.frame.tz0 / self.x[Layout::DELTA_TZ].sqrt()
    }

    pub fn alpha(&self) -> f64 {
        if self.frame.focal_coupled {
            alpha_from_tz(self.frame.tz0, self.frame.d0, self.tz())
        } else {
            1.0
        }
    }

    pub fn focal(&self) -> f64 {
        self.x[Layout::GAMMA] * self.alpha() * self.frame.f0
    }

    /// Camera-to-anchor distance implied by the coupling, `d0 + tz - tz0`.
    pub fn distance(&self) -> f64 {
        self.frame.d0 + self.tz() - self.frame.tz0
    }
}

/// Everything the loss needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub observed: &'a LandmarkSet,
    pub model: &'a FaceModel,
    pub weights: LossWeights,
    pub z_min: f64,
}

impl<'a> Objective<'a> {
    pub fn new(observed: &'a LandmarkSet, model: &'a FaceModel, weights: LossWeights, z_min: f64) -> Result<Self> {
        if observed.len() != model.n_landmarks() {
            return Err(Error::DimensionMismatch(format!(
                "{} observed landmarks, model has {}",
                observed.len(),
                model.n_landmarks()
            )));
        }
        Ok(Objective {
            observed,
            model,
            weights,
            z_min,
        })
    }

    fn check_layout(&self, p: &Params) -> Result<()> {
        let want = Layout {
            k: self.model.latent_dim(),
            n: self.model.n_landmarks(),
        };
        if p.layout != want || p.x.len() != want.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter layout {:?} does not match model {:?}",
                p.layout, want
            )));
        }
        Ok(())
    }

    /// Loss only.
    pub fn loss(&self, p: &Params) -> Result<LossBreakdown> {
        self.evaluate(p, None)
    }

    /// Loss with its exact gradient over the flat parameter vector.
    pub fn loss_and_gradient(&self, p: &Params) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut g = vec![0.0; p.x.len()];
        let loss = self.evaluate(p, Some(&mut g))?;
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok((loss, g))
    }

    /// Loss, or [`INFEASIBLE_PENALTY`] when the render is infeasible.
    pub fn loss_or_penalty(&self, p: &Params) -> Result<f64> {
        match self.loss(p) {
            Ok(l) => Ok(l.total),
            Err(Error::InfeasibleRender(_)) => Ok(INFEASIBLE_PENALTY),
            Err(e) => Err(e),
        }
    }

    fn evaluate(&self, p: &Params, mut grad: Option<&mut Vec<f64>>) -> Result<LossBreakdown> {
        self.check_layout(p)?;
        let layout = p.layout;
        let frame = &p.frame;
        let n = layout.n;
        let x = &p.x;

        let delta = x[Layout::DELTA_TZ];
        if !(delta > 0.0) {
            return Err(Error::InfeasibleRender(format!("delta_tz = {delta}")));
        }
        let tz = frame.tz0 / delta.sqrt();
        let alpha = if frame.focal_coupled {
            alpha_from_tz(frame.tz0, frame.d0, tz)
        } else {
            1.0
        };
        let gamma = x[Layout::GAMMA];
        let f = gamma * alpha * frame.f0;
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::InfeasibleRender(format!("focal length {f}")));
        }

        let rot = p.rotation();
        let r = rot.matrix();
        let t = Vector3::new(x[Layout::TX], x[Layout::TY], tz);

        let w = DVector::from_column_slice(&x[layout.w()]);
        let mut s = self.model.mean() + self.model.basis() * &w;
        for (si, ri) in s.iter_mut().zip(&x[layout.residual()]) {
            *si += ri;
        }
        let log_sigma = &x[layout.log_sigma()];
        let (wpx, hpx) = (frame.width as f64, frame.height as f64);

        let mut loss = LossBreakdown::default();
        // dL/dS per landmark (world frame), dL/df, dL/dT, dL/dR.
        let mut g_shape = DVector::zeros(3 * n);
        let mut g_f = 0.0;
        let mut g_t = Vector3::zeros();
        let mut g_pc_list: Vec<(usize, Vector3<f64>)> = Vec::new();
        let want_grad = grad.is_some();

        for i in 0..n {
            let sp = Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            let pc = r * sp + t;
            if !(pc.z > self.z_min) {
                return Err(Error::InfeasibleRender(format!(
                    "landmark {i} at depth {}",
                    pc.z
                )));
            }
            if !self.observed.visibility[i] {
                continue;
            }
            let inv_z = 1.0 / pc.z;
            let u = f * pc.x * inv_z + frame.cx;
            let v = f * pc.y * inv_z + frame.cy;
            let ru = u / wpx - self.observed.points[i][0];
            let rv = v / hpx - self.observed.points[i][1];
            let ls = log_sigma[i];
            let s2 = (2.0 * ls).exp();
            let r2 = ru * ru + rv * rv;
            loss.landmark += r2 / (2.0 * s2);
            loss.sigma_log += 2.0 * ls;

            if let Some(g) = grad.as_deref_mut() {
                g[layout.log_sigma().start + i] = 2.0 - r2 / s2;
                let gu = ru / (s2 * wpx);
                let gv = rv / (s2 * hpx);
                g_f += (gu * pc.x + gv * pc.y) * inv_z;
                let g_pc = Vector3::new(
                    gu * f * inv_z,
                    gv * f * inv_z,
                    -(gu * pc.x + gv * pc.y) * f * inv_z * inv_z,
                );
                g_t += g_pc;
                let gs = r.transpose() * g_pc;
                g_shape[3 * i] = gs.x;
                g_shape[3 * i + 1] = gs.y;
                g_shape[3 * i + 2] = gs.z;
                g_pc_list.push((i, g_pc));
            }
        }

        let res = &x[layout.residual()];
        loss.residual_reg = res.iter().map(|v| v * v).sum();
        loss.latent_reg = w.norm_squared();
        loss.total = loss.landmark
            + loss.sigma_log
            + self.weights.lambda_res * loss.residual_reg
            + self.weights.lambda_w * loss.latent_reg;

        if let Some(g) = grad {
            debug_assert!(want_grad);
            // Translation z feeds both the camera frame and the focal length.
            let mut g_tz = g_t.z;
            if frame.focal_coupled {
                g_tz += g_f * gamma * frame.f0 / frame.d0;
            }
            g[Layout::DELTA_TZ] = g_tz * (-tz / (2.0 * delta));
            g[Layout::TX] = g_t.x;
            g[Layout::TY] = g_t.y;
            g[Layout::GAMMA] = g_f * alpha * frame.f0;

            let dr = rot.matrix_derivatives();
            for (j, drj) in dr.iter().enumerate() {
                let mut acc = 0.0;
                for &(i, g_pc) in &g_pc_list {
                    let sp = Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2]);
                    acc += g_pc.dot(&(drj * sp));
                }
                g[Layout::ROT.start + j] = acc;
            }

            let gw = self.model.basis().tr_mul(&g_shape);
            for (k, gk) in layout.w().zip(gw.iter()) {
                g[k] = gk + 2.0 * self.weights.lambda_w * x[k];
            }
            for (j, idx) in layout.residual().enumerate() {
                g[idx] = g_shape[j] + 2.0 * self.weights.lambda_res * x[idx];
            }
        }
        Ok(loss)
    }
}

/// Total loss for an explicit camera, latent and sigma vector.
pub fn total_loss(
    objective: &Objective,
    cam: &CameraState,
    latent: &FaceLatent,
    sigmas: &[f64],
) -> Result<LossBreakdown> {
    objective.loss(&Params::from_state(cam, latent, sigmas)?)
}

/// Exact gradient at `params`.
pub fn gradient(objective: &Objective, params: &Params) -> Result<Vec<f64>> {
    objective.loss_and_gradient(params).map(|(_, g)| g)
}

/// Central finite differences of `f` around `x` with per-coordinate step
/// `h * max(|x_i|, 1)`.
pub fn fd_gradient_oracle<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidStep(h));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        // Use the realized step to cancel rounding in x +- step.
        let realized = (x[i] + step) - (x[i] - step);
        out.push((up - down) / realized);
    }
    Ok(out)
}

/// Fourth-order central differences (five-point stencil) of `f`, step as in
/// [`fd_gradient_oracle`]. Accurate at larger steps, where rounding in `f`
/// matters less.
pub fn fd_gradient_oracle5<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidStep(h));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        let mut at = |k: f64| {
            probe[i] = x[i] + k * step;
            let v = f(&probe);
            probe[i] = x[i];
            v
        };
        let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    Ok(out)
}

/// Finite-difference gradient of the total loss.
pub fn fd_gradient(objective: &Objective, params: &Params, h: f64) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    fd_gradient_oracle(
        |x| {
            probe.x.copy_from_slice(x);
            objective.loss(&probe).map(|l| l.total)
        },
        &params.x,
        h,
    )
}

/// Five-point finite-difference gradient of the total loss.
pub fn fd_gradient5(objective: &Objective, params: &Params, h: f64) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    fd_gradient_oracle5(
        |x| {
            probe.x.copy_from_slice(x);
            objective.loss(&probe).map(|l| l.total)
        },
        &params.x,
        h,
    )
}
