//! Pinhole camera with world-to-camera extrinsics and a focal length that is
//! tied to the camera-to-anchor distance.
//!
//! The focal length is `f = gamma * alpha * f0` where
//! `alpha = (d0 - (tz0 - tz)) / d0` and `tz = tz0 / sqrt(delta_tz)`. Moving the
//! camera along its optical axis therefore rescales the focal length so that
//! anything lying on the plane through the face anchor keeps its image size
//! and position.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical bounds shared by the camera operations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    /// Smallest camera-frame depth that still projects.
    pub z_min: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            z_min: 1e-4,
            alpha_min: 1e-3,
            alpha_max: 20.0,
        }
    }
}

/// Rotation stored as an axis-angle vector (radians times unit axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation {
    axis_angle: [f64; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            axis_angle: [0.0; 3],
        }
    }

    pub fn from_axis_angle(v: Vector3<f64>) -> Self {
        Rotation {
            axis_angle: [v.x, v.y, v.z],
        }
    }

    /// Axis-angle vector of an orthonormal matrix, with angle in `[0, pi]`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        Rotation::from_axis_angle(r.scaled_axis())
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Vector3::from(self.axis_angle)
    }

    /// Rodrigues' formula.
    pub fn matrix(&self) -> Matrix3<f64> {
        let v = self.axis_angle();
        let theta = v.norm();
        if theta < 1e-12 {
            return Matrix3::identity() + skew(&v);
        }
        let k = skew(&(v / theta));
        Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
    }

    /// Partial derivatives of the rotation matrix with respect to each
    /// axis-angle component.
    pub fn matrix_derivatives(&self) -> [Matrix3<f64>; 3] {
        let v = self.axis_angle();
        let theta2 = v.norm_squared();
        if theta2 < 1e-20 {
            return [
                skew(&Vector3::x()),
                skew(&Vector3::y()),
                skew(&Vector3::z()),
            ];
        }
        let r = self.matrix();
        let vx = skew(&v);
        let i_minus_r = Matrix3::identity() - r;
        let mut out = [Matrix3::zeros(); 3];
        for (i, d) in out.iter_mut().enumerate() {
            let e = Vector3::ith(i, 1.0);
            let inner = v.cross(&(i_minus_r * e));
            *d = (vx * v[i] + skew(&inner)) * r / theta2;
        }
        out
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation about the y axis, handy in tests and scene setup.
pub fn rot_y(angle: f64) -> Rotation {
    Rotation::from_axis_angle(Vector3::new(0.0, angle, 0.0))
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        CameraExtrinsics {
            rotation,
            translation,
        }
    }

    pub fn transform(&self, p_w: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p_w + self.translation
    }

    pub fn inverse(&self) -> CameraExtrinsics {
        let r = self.rotation.matrix();
        let rt = r.transpose();
        CameraExtrinsics {
            rotation: Rotation::from_axis_angle(-self.rotation.axis_angle()),
            translation: -(rt * self.translation),
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.matrix().transpose() * self.translation)
    }
}

/// `p_c = R p_w + T`.
pub fn world_to_camera(ext: &CameraExtrinsics, p_w: &Vector3<f64>) -> Vector3<f64> {
    ext.transform(p_w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub f0: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn focal(&self) -> f64 {
        self.gamma * self.alpha * self.f0
    }

    pub fn project(&self, p_c: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
        project(self, p_c, z_min)
    }

    /// Ray through pixel `(u, v)` scaled so that its z component is `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let f = self.focal();
        Vector3::new((u - self.cx) * depth / f, (v - self.cy) * depth / f, depth)
    }
}

/// Pinhole projection to pixel coordinates.
pub fn project(intr: &CameraIntrinsics, p_c: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
    if !(p_c.z > z_min) {
        return Err(Error::PointBehindCamera {
            index: None,
            z: p_c.z,
        });
    }
    let f = intr.focal();
    Ok(Vector2::new(
        f * p_c.x / p_c.z + intr.cx,
        f * p_c.y / p_c.z + intr.cy,
    ))
}

pub fn intrinsics_matrix(intr: &CameraIntrinsics) -> Result<Matrix3<f64>> {
    let f = intr.focal();
    if !(f > 0.0) {
        return Err(Error::NonPositiveFocal(f));
    }
    Ok(Matrix3::new(f, 0.0, intr.cx, 0.0, f, intr.cy, 0.0, 0.0, 1.0))
}

/// Reference point of the focal/distance coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamAnchor {
    /// z translation at which `alpha == 1`.
    pub tz0: f64,
    /// Camera-to-anchor distance at `tz0`.
    pub d0: f64,
    /// `tz = tz0 / sqrt(delta_tz)`.
    pub delta_tz: f64,
}

impl ReparamAnchor {
    pub fn tz(&self) -> f64 {
        self.tz0 / self.delta_tz.sqrt()
    }

    /// `delta_tz` that reproduces a given z translation.
    pub fn delta_for_tz(&self, tz: f64) -> f64 {
        (self.tz0 / tz).powi(2)
    }
}

/// `alpha = (d0 - (tz0 - tz)) / d0`.
pub fn compute_alpha(anchor: &ReparamAnchor, alpha_min: f64) -> Result<f64> {
    if !(anchor.d0 > 0.0) {
        return Err(Error::DegenerateDistance(format!(
            "anchor distance d0 = {} must be positive",
            anchor.d0
        )));
    }
    if !(anchor.delta_tz > 0.0) {
        return Err(Error::DegenerateDistance(format!(
            "delta_tz = {} must be positive",
            anchor.delta_tz
        )));
    }
    let alpha = alpha_from_tz(anchor.tz0, anchor.d0, anchor.tz());
    if !(alpha > alpha_min) {
        return Err(Error::DegenerateDistance(format!(
            "alpha = {alpha} at or below {alpha_min}"
        )));
    }
    Ok(alpha)
}

#[inline]
pub(crate) fn alpha_from_tz(tz0: f64, d0: f64, tz: f64) -> f64 {
    (d0 - (tz0 - tz)) / d0
}

/// Full camera: extrinsics, intrinsics and the coupling anchor.
///
/// `alpha` and `tz` are always derived from the anchor; the only way to get
/// a state is through the checked constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraState {
    rotation: Rotation,
    tx: f64,
    ty: f64,
    tz: f64,
    f0: f64,
    gamma: f64,
    alpha: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    anchor: ReparamAnchor,
    focal_coupled: bool,
}

/// Parameters that fully determine a [`CameraState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub rotation: Rotation,
    pub tx: f64,
    pub ty: f64,
    pub f0: f64,
    pub gamma: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub anchor: ReparamAnchor,
    /// When false the focal length ignores the distance (`alpha == 1`).
    pub focal_coupled: bool,
}

impl CameraState {
    pub fn new(p: CameraParams, limits: &Limits) -> Result<Self> {
        if p.width == 0 || p.height == 0 {
            return Err(Error::InvalidDimensions("image size must be non-zero".into()));
        }
        let alpha = if p.focal_coupled {
            let a = compute_alpha(&p.anchor, limits.alpha_min)?;
            if a > limits.alpha_max {
                return Err(Error::DegenerateDistance(format!(
                    "alpha = {a} above {}",
                    limits.alpha_max
                )));
            }
            a
        } else {
            if !(p.anchor.delta_tz > 0.0) {
                return Err(Error::DegenerateDistance("delta_tz must be positive".into()));
            }
            1.0
        };
        let state = CameraState {
            rotation: p.rotation,
            tx: p.tx,
            ty: p.ty,
            tz: p.anchor.tz(),
            f0: p.f0,
            gamma: p.gamma,
            alpha,
            cx: p.cx,
            cy: p.cy,
            width: p.width,
            height: p.height,
            anchor: p.anchor,
            focal_coupled: p.focal_coupled,
        };
        let f = state.focal();
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::NonPositiveFocal(f));
        }
        Ok(state)
    }

    pub fn params(&self) -> CameraParams {
        CameraParams {
            rotation: self.rotation,
            tx: self.tx,
            ty: self.ty,
            f0: self.f0,
            gamma: self.gamma,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            anchor: self.anchor,
            focal_coupled: self.focal_coupled,
        }
    }

    pub fn extrinsics(&self) -> CameraExtrinsics {
        CameraExtrinsics::new(self.rotation, Vector3::new(self.tx, self.ty, self.tz))
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            f0: self.f0,
            gamma: self.gamma,
            alpha: self.alpha,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn anchor(&self) -> ReparamAnchor {
        self.anchor
    }

    pub fn rotation(&self) -> Rotation {
        self.rotation
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn focal(&self) -> f64 {
        self.gamma * self.alpha * self.f0
    }

    pub fn tz(&self) -> f64 {
        self.tz
    }

    pub fn focal_coupled(&self) -> bool {
        self.focal_coupled
    }

    /// Camera-to-anchor distance along the optical axis, `d0 + (tz - tz0)`.
    /// Equal to `alpha * d0` whenever the focal length is coupled.
    pub fn distance(&self) -> f64 {
        self.anchor.d0 + (self.tz - self.anchor.tz0)
    }

    /// Project a world point to pixels.
    pub fn project_world(&self, p_w: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
        project(&self.intrinsics(), &self.extrinsics().transform(p_w), z_min)
    }

    pub fn set_distance(&self, target_d: f64, limits: &Limits) -> Result<CameraState> {
        set_distance(self, target_d, limits)
    }

    /// Re-anchor the coupling at the current pose: `tz0 = tz`, `delta_tz = 1`,
    /// `d0 = anchor_depth`, and `f0` absorbs `alpha` so the focal length is
    /// unchanged.
    pub fn rebased(&self, anchor_depth: f64, limits: &Limits) -> Result<CameraState> {
        let mut p = self.params();
        p.f0 = self.alpha * self.f0;
        p.anchor = ReparamAnchor {
            tz0: self.tz,
            d0: anchor_depth,
            delta_tz: 1.0,
        };
        CameraState::new(p, limits)
    }

    /// Switch the focal/distance coupling on or off. Only allowed at
    /// `alpha == 1`, where the switch leaves the focal length unchanged.
    pub fn with_coupling(&self, coupled: bool, limits: &Limits) -> Result<CameraState> {
        if self.alpha != 1.0 {
            return Err(Error::DegenerateDistance(format!(
                "cannot change coupling at alpha = {}; rebase first",
                self.alpha
            )));
        }
        let mut p = self.params();
        p.focal_coupled = coupled;
        CameraState::new(p, limits)
    }
}

/// Move the camera along its optical axis so that the camera-to-anchor
/// distance becomes `target_d`, updating `delta_tz` (and with it `alpha` and
/// the focal length).
pub fn set_distance(state: &CameraState, target_d: f64, limits: &Limits) -> Result<CameraState> {
    if !(target_d > 0.0) || !target_d.is_finite() {
        return Err(Error::DegenerateDistance(format!(
            "target distance {target_d} must be positive"
        )));
    }
    if target_d == state.distance() {
        return Ok(*state);
    }
    let a = state.anchor;
    let tz = target_d - a.d0 + a.tz0;
    if !(tz > 0.0) {
        return Err(Error::DegenerateDistance(format!(
            "target distance {target_d} requires tz = {tz} <= 0"
        )));
    }
    let mut p = state.params();
    p.anchor.delta_tz = a.delta_for_tz(tz);
    CameraState::new(p, limits)
}

/// Serialized form of [`CameraState`]. Derived quantities are written for
/// readability and recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub rotation: [f64; 3],
    pub tx: f64,
    pub ty: f64,
    pub f0: f64,
    pub gamma: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub tz0: f64,
    pub d0: f64,
    pub delta_tz: f64,
    #[serde(default = "default_true")]
    pub focal_coupled: bool,
    #[serde(default)]
    pub tz: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub focal: Option<f64>,
    #[serde(default)]
    pub distance: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl From<CameraState> for CameraRecord {
    fn from(s: CameraState) -> Self {
        CameraRecord {
            rotation: s.rotation.axis_angle,
            tx: s.tx,
            ty: s.ty,
            f0: s.f0,
            gamma: s.gamma,
            cx: s.cx,
            cy: s.cy,
            width: s.width,
            height: s.height,
            tz0: s.anchor.tz0,
            d0: s.anchor.d0,
            delta_tz: s.anchor.delta_tz,
            focal_coupled: s.focal_coupled,
            tz: Some(s.tz),
            alpha: Some(s.alpha),
            focal: Some(s.focal()),
            distance: Some(s.distance()),
        }
    }
}

impl TryFrom<CameraRecord> for CameraState {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        CameraState::new(
            CameraParams {
                rotation: Rotation {
                    axis_angle: r.rotation,
                },
                tx: r.tx,
                ty: r.ty,
                f0: r.f0,
                gamma: r.gamma,
                cx: r.cx,
                cy: r.cy,
                width: r.width,
                height: r.height,
                anchor: ReparamAnchor {
                    tz0: r.tz0,
                    d0: r.d0,
                    delta_tz: r.delta_tz,
                },
                focal_coupled: r.focal_coupled,
            },
            &Limits::default(),
        )
    }
}
