//! Linear 3D landmark face model.
//!
//! A shape is `mean + basis * w + residual`, with `N` landmarks stored as a
//! flat `3N` vector `[x0, y0, z0, x1, ...]`. The canonical pose has the
//! landmark centroid at the origin and the face pointing toward `-z`, so a
//! camera with identity rotation and positive `tz` looks straight at it.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraState, Limits};
use crate::landmarks::LandmarkSet;

pub const LABEL_EYE_LEFT: &str = "eye_left";
pub const LABEL_EYE_RIGHT: &str = "eye_right";
pub const LABEL_NOSE_TIP: &str = "nose_tip";
pub const LABEL_NOSE_LEFT: &str = "nose_left";
pub const LABEL_NOSE_RIGHT: &str = "nose_right";
pub const LABEL_EAR_LEFT: &str = "ear_left";
pub const LABEL_EAR_RIGHT: &str = "ear_right";
pub const LABEL_CHIN: &str = "chin";
pub const LABEL_GENERIC: &str = "point";

#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    n_landmarks: usize,
    latent_dim: usize,
    mean: DVector<f64>,
    /// `3N x K`; column `k` is basis vector `k`.
    basis: DMatrix<f64>,
    eye_indices: (usize, usize),
    labels: Vec<String>,
}

impl FaceModel {
    /// Build a model, checking the centroid and basis orthogonality.
    pub fn new(
        mean: Vec<f64>,
        basis_rows: Vec<f64>,
        latent_dim: usize,
        eye_indices: (usize, usize),
        labels: Vec<String>,
    ) -> Result<Self> {
        if mean.len() % 3 != 0 || mean.is_empty() {
            return Err(Error::InvalidDimensions(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean.len()
            )));
        }
        let n = mean.len() / 3;
        if basis_rows.len() != latent_dim * 3 * n {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} values, expected {latent_dim} x {n} x 3",
                basis_rows.len()
            )));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {n} landmarks",
                labels.len()
            )));
        }
        if eye_indices.0 >= n || eye_indices.1 >= n || eye_indices.0 == eye_indices.1 {
            return Err(Error::InvalidDimensions(format!(
                "bad eye indices {eye_indices:?}"
            )));
        }
        // Row-major K x N x 3 is column-major 3N x K.
        let basis = DMatrix::from_column_slice(3 * n, latent_dim, &basis_rows);
        let model = FaceModel {
            n_landmarks: n,
            latent_dim,
            mean: DVector::from_vec(mean),
            basis,
            eye_indices,
            labels,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let c = self.centroid(self.mean.as_slice());
        if c.norm() > 1e-9 {
            return Err(Error::Invalid(format!(
                "mean shape centroid {c:?} is not at the origin"
            )));
        }
        for i in 0..self.latent_dim {
            let bi = self.basis.column(i);
            let ni = bi.norm();
            if !(ni > 0.0) {
                return Err(Error::Invalid(format!("basis vector {i} is zero")));
            }
            for j in 0..i {
                let bj = self.basis.column(j);
                let cos = bi.dot(&bj) / (ni * bj.norm());
                if cos.abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "basis vectors {j} and {i} are not orthogonal (cos = {cos:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn centroid(&self, flat: &[f64]) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in flat.chunks_exact(3) {
            c += Vector3::new(p[0], p[1], p[2]);
        }
        c / (flat.len() / 3) as f64
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eye_indices(&self) -> (usize, usize) {
        self.eye_indices
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Basis in row-major `K x N x 3` order (the on-disk layout).
    pub fn basis_rows(&self) -> &[f64] {
        self.basis.as_slice()
    }

    /// Flat `3N` shape for a latent.
    pub fn shape_flat(&self, latent: &FaceLatent) -> Result<DVector<f64>> {
        if latent.w.len() != self.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent has {} coefficients, model has {}",
                latent.w.len(),
                self.latent_dim
            )));
        }
        if latent.residual.len() != 3 * self.n_landmarks {
            return Err(Error::DimensionMismatch(format!(
                "residual has {} values, expected {}",
                latent.residual.len(),
                3 * self.n_landmarks
            )));
        }
        let w = DVector::from_column_slice(&latent.w);
        let mut s = &self.mean + &self.basis * w;
        for (si, ri) in s.iter_mut().zip(&latent.residual) {
            *si += ri;
        }
        Ok(s)
    }

    /// Eye midpoint of a flat shape.
    pub fn anchor_of(&self, flat: &[f64]) -> Vector3<f64> {
        let (l, r) = self.eye_indices;
        (point(flat, l) + point(flat, r)) * 0.5
    }

    pub fn zero_latent(&self) -> FaceLatent {
        FaceLatent::zeros(self.latent_dim, self.n_landmarks)
    }
}

#[inline]
pub(crate) fn point(flat: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2])
}

/// Latent coefficients plus a per-landmark residual displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLatent {
    pub w: Vec<f64>,
    /// Flat `3N` displacement in meters.
    pub residual: Vec<f64>,
}

impl FaceLatent {
    pub fn zeros(k: usize, n: usize) -> Self {
        FaceLatent {
            w: vec![0.0; k],
            residual: vec![0.0; 3 * n],
        }
    }
}

/// `mean + sum_k w_k basis_k + residual`, one point per landmark.
pub fn shape(model: &FaceModel, latent: &FaceLatent) -> Result<Vec<Vector3<f64>>> {
    let s = model.shape_flat(latent)?;
    Ok((0..model.n_landmarks)
        .map(|i| point(s.as_slice(), i))
        .collect())
}

/// Camera-frame coordinates of every landmark.
pub fn camera_points(
    model: &FaceModel,
    latent: &FaceLatent,
    cam: &CameraState,
) -> Result<Vec<Vector3<f64>>> {
    let ext = cam.extrinsics();
    Ok(shape(model, latent)?
        .iter()
        .map(|p| ext.transform(p))
        .collect())
}

/// Project the model landmarks, returning normalized image coordinates.
pub fn render_landmarks(
    model: &FaceModel,
    latent: &FaceLatent,
    cam: &CameraState,
    limits: &Limits,
) -> Result<LandmarkSet> {
    let intr = cam.intrinsics();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut points = Vec::with_capacity(model.n_landmarks);
    for (i, pc) in camera_points(model, latent, cam)?.iter().enumerate() {
        let uv = intr.project(pc, limits.z_min).map_err(|_| Error::PointBehindCamera {
            index: Some(i),
            z: pc.z,
        })?;
        points.push([uv.x / w, uv.y / h]);
    }
    LandmarkSet::from_points(points, 1.0)
}

/// Camera-frame depth of the eye midpoint.
pub fn anchor_depth(model: &FaceModel, latent: &FaceLatent, cam: &CameraState) -> Result<f64> {
    let s = model.shape_flat(latent)?;
    Ok(cam.extrinsics().transform(&model.anchor_of(s.as_slice())).z)
}

/// Half-axes of the ellipsoidal face surface used by the synthesizer.
pub(crate) const FACE_HALF_WIDTH: f64 = 0.075;
pub(crate) const FACE_HALF_HEIGHT: f64 = 0.10;
const FACE_HALF_DEPTH: f64 = 0.045;
const NOSE_Y: f64 = 0.01;
const NOSE_WIDTH: f64 = 0.015;
const BASIS_RMS: f64 = 0.002;
const BUMPS_PER_MODE: usize = 3;

/// Deterministic face-like model for tests and synthetic suites.
///
/// Landmarks lie on the front half of an ellipsoid with a Gaussian nose
/// protrusion; the nose apex sits 0.06 to 0.10 m in front of the ears. Basis
/// vectors are sums of smooth Gaussian bumps with the similarity modes
/// (translation, rotation, uniform scale) and the leading foreshortening
/// fields projected out, orthogonalized.
pub fn synthesize_model(seed: u64, n: usize, k: usize) -> Result<FaceModel> {
    if n < 8 {
        return Err(Error::InvalidDimensions(format!("need at least 8 landmarks, got {n}")));
    }
    if k < 1 {
        return Err(Error::InvalidDimensions("need at least one basis vector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth_total: f64 = rng.random_range(0.065..0.095);
    let nose_h = depth_total - FACE_HALF_DEPTH * (1.0 - (NOSE_Y / FACE_HALF_HEIGHT).powi(2)).sqrt();
    let surface = |x: f64, y: f64| -> f64 {
        let e = 1.0 - (x / FACE_HALF_WIDTH).powi(2) - (y / FACE_HALF_HEIGHT).powi(2);
        let bump = (-(x * x + (y - NOSE_Y).powi(2)) / (2.0 * NOSE_WIDTH * NOSE_WIDTH)).exp();
        -FACE_HALF_DEPTH * e.max(0.0).sqrt() - nose_h * bump
    };

    let designated: [(&str, f64, f64); 8] = [
        (LABEL_EYE_LEFT, -0.032, -0.03),
        (LABEL_EYE_RIGHT, 0.032, -0.03),
        (LABEL_NOSE_TIP, 0.0, NOSE_Y),
        (LABEL_NOSE_LEFT, -0.017, 0.014),
        (LABEL_NOSE_RIGHT, 0.017, 0.014),
        (LABEL_EAR_LEFT, -FACE_HALF_WIDTH, 0.0),
        (LABEL_EAR_RIGHT, FACE_HALF_WIDTH, 0.0),
        (LABEL_CHIN, 0.0, 0.092),
    ];
    let mut labels = Vec::with_capacity(n);
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for (label, x, y) in designated {
        labels.push(label.to_string());
        pts.push(Vector3::new(x, y, surface(x, y)));
    }
    let m = n - designated.len();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spin: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for i in 0..m {
        let r = ((i as f64 + 0.5) / m as f64).sqrt() * 0.95;
        let theta = spin + golden * i as f64;
        let jx: f64 = rng.random_range(-0.002..0.002);
        let jy: f64 = rng.random_range(-0.002..0.002);
        let x = FACE_HALF_WIDTH * r * theta.cos() + jx;
        let y = FACE_HALF_HEIGHT * r * theta.sin() + jy;
        labels.push(LABEL_GENERIC.to_string());
        pts.push(Vector3::new(x, y, surface(x, y)));
    }
    let centroid = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let mut mean = Vec::with_capacity(3 * n);
    for p in &pts {
        let q = p - centroid;
        mean.extend_from_slice(&[q.x, q.y, q.z]);
    }
    // Centroid subtraction leaves ~1e-18 residue; fold it back in once more.
    let c2 = {
        let mut c = Vector3::zeros();
        for p in mean.chunks_exact(3) {
            c += Vector3::new(p[0], p[1], p[2]);
        }
        c / n as f64
    };
    for p in mean.chunks_exact_mut(3) {
        p[0] -= c2.x;
        p[1] -= c2.y;
        p[2] -= c2.z;
    }

    let mean_v = DVector::from_column_slice(&mean);
    let mut excluded: Vec<DVector<f64>> = Vec::new();
    for axis in 0..3 {
        excluded.push(DVector::from_fn(3 * n, |r, _| if r % 3 == axis { 1.0 } else { 0.0 }));
    }
    for axis in 0..3 {
        let e = Vector3::ith(axis, 1.0);
        let mut v = DVector::zeros(3 * n);
        for i in 0..n {
            let d = e.cross(&point(&mean, i));
            v[3 * i] = d.x;
            v[3 * i + 1] = d.y;
            v[3 * i + 2] = d.z;
        }
        excluded.push(v);
    }
    excluded.push(mean_v);
    // In-plane displacement fields quadratic in position, plus x*z^2 and
    // y*z^2 (depth relative to the eyes). Perspective foreshortening lives
    // in this span, so keeping it out of the basis leaves distance
    // observable from shape.
    let eye_z = 0.5 * (mean[2] + mean[5]);
    let rel = |i: usize| {
        let p = point(&mean, i);
        Vector3::new(p.x, p.y, p.z - eye_z)
    };
    let monomials: [fn(&Vector3<f64>) -> f64; 8] = [
        |p| p.x * p.x,
        |p| p.y * p.y,
        |p| p.z * p.z,
        |p| p.x * p.y,
        |p| p.x * p.z,
        |p| p.y * p.z,
        |p| p.x * p.z * p.z,
        |p| p.y * p.z * p.z,
    ];
    for m in monomials {
        for axis in 0..2 {
            let mut v = DVector::zeros(3 * n);
            for i in 0..n {
                v[3 * i + axis] = m(&rel(i));
            }
            excluded.push(v);
        }
    }
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for v in excluded {
        if let Some(u) = orthonormalize(v, &ortho) {
            ortho.push(u);
        }
    }
    let n_excluded = ortho.len();

    let mut basis_rows = Vec::with_capacity(k * 3 * n);
    let mut produced = 0;
    let mut attempts = 0;
    while produced < k {
        attempts += 1;
        if attempts > 100 * k {
            return Err(Error::InvalidDimensions(format!(
                "cannot build {k} independent basis vectors from {n} landmarks"
            )));
        }
        let mut field = DVector::zeros(3 * n);
        for _ in 0..BUMPS_PER_MODE {
            let c = point(&mean, rng.random_range(0..n));
            let width: f64 = rng.random_range(0.02..0.04);
            let mut dir: Vector3<f64> = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            dir /= dir.norm().max(1e-12);
            for i in 0..n {
                let g = (-(point(&mean, i) - c).norm_squared() / (2.0 * width * width)).exp();
                field[3 * i] += dir.x * g;
                field[3 * i + 1] += dir.y * g;
                field[3 * i + 2] += dir.z * g;
            }
        }
        if let Some(u) = orthonormalize(field, &ortho) {
            basis_rows.extend(u.iter().map(|x| x * BASIS_RMS * (n as f64).sqrt()));
            ortho.push(u);
            produced += 1;
        }
    }
    debug_assert_eq!(ortho.len(), n_excluded + k);
    FaceModel::new(mean, basis_rows, k, (0, 1), labels)
}

/// Two-pass Gram-Schmidt; `None` when `v` is (numerically) in the span.
fn orthonormalize(mut v: DVector<f64>, ortho: &[DVector<f64>]) -> Option<DVector<f64>> {
    let n0 = v.norm();
    for _ in 0..2 {
        for u in ortho {
            let c = u.dot(&v);
            v.axpy(-c, u, 1.0);
        }
    }
    let n1 = v.norm();
    if n1 < 1e-6 * n0 || n1 == 0.0 {
        None
    } else {
        Some(v / n1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraParams, ReparamAnchor, Rotation};

    fn cam_at(d: f64, f0: f64) -> CameraState {
        CameraState::new(
            CameraParams {
                rotation: Rotation::identity(),
                tx: 0.0,
                ty: 0.0,
                f0,
                gamma: 1.0,
                cx: 256.0,
                cy: 256.0,
                width: 512,
                height: 512,
                anchor: ReparamAnchor {
                    tz0: d,
                    d0: d,
                    delta_tz: 1.0,
                },
                focal_coupled: true,
            },
            &Limits::default(),
        )
        .unwrap()
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_model(7, 64, 8).unwrap();
        let b = synthesize_model(7, 64, 8).unwrap();
        assert_eq!(a, b);
        let c = synthesize_model(8, 64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesis_shape_contract() {
        let m = synthesize_model(1, 468, 32).unwrap();
        assert_eq!(m.n_landmarks(), 468);
        assert_eq!(m.latent_dim(), 32);
        assert_eq!(m.basis().shape(), (1404, 32));
        assert_eq!(m.labels().len(), 468);
        assert!(matches!(
            synthesize_model(1, 7, 4),
            Err(Error::InvalidDimensions(_))
        ));
        assert!(matches!(
            synthesize_model(1, 10, 0),
            Err(Error::InvalidDimensions(_))
        ));
    }

    #[test]
    fn nose_protrudes_in_range() {
        for seed in 0..20 {
            let m = synthesize_model(seed, 100, 4).unwrap();
            let mean = m.mean().as_slice();
            let nose = point(mean, m.label_index(LABEL_NOSE_TIP).unwrap());
            let ear = point(mean, m.label_index(LABEL_EAR_LEFT).unwrap());
            let depth = ear.z - nose.z;
            assert!((0.06..=0.10).contains(&depth), "seed {seed}: {depth}");
        }
    }

    #[test]
    fn shape_is_linear() {
        let m = synthesize_model(3, 50, 6).unwrap();
        let z = m.zero_latent();
        let s0 = m.shape_flat(&z).unwrap();
        assert_eq!(&s0, m.mean());
        let mut e = z.clone();
        e.w[2] = 1.0;
        let s = m.shape_flat(&e).unwrap();
        assert!((s - m.mean() - m.basis().column(2)).abs().max() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let w1: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w2: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            let mix = FaceLatent {
                w: w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect(),
                residual: z.residual.clone(),
            };
            let l1 = FaceLatent { w: w1, ..z.clone() };
            let l2 = FaceLatent { w: w2, ..z.clone() };
            let lhs = m.shape_flat(&mix).unwrap();
            let rhs = m.shape_flat(&l1).unwrap() * a + m.shape_flat(&l2).unwrap() * b
                - m.mean() * (a + b - 1.0);
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = synthesize_model(3, 20, 4).unwrap();
        let bad = FaceLatent::zeros(3, 20);
        assert!(matches!(shape(&m, &bad), Err(Error::DimensionMismatch(_))));
        let bad = FaceLatent::zeros(4, 19);
        assert!(matches!(shape(&m, &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn weak_perspective_limit_matches_orthographic_ratios() {
        // At large focal length and distance the projection becomes a
        // uniform scaling of the x/y coordinates.
        let m = synthesize_model(5, 80, 4).unwrap();
        let z = m.zero_latent();
        let cam = cam_at(1.0, 500.0)
            .set_distance(200.0, &Limits { alpha_max: 1e3, ..Limits::default() })
            .unwrap();
        let lm = render_landmarks(&m, &z, &cam, &Limits::default()).unwrap();
        let pts = shape(&m, &z).unwrap();
        let (a, b, c) = (0usize, 2usize, 5usize);
        let d2 = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let d3 = |p: &Vector3<f64>, q: &Vector3<f64>| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
        let img = d2(lm.points[a], lm.points[b]) / d2(lm.points[a], lm.points[c]);
        let ortho = d3(&pts[a], &pts[b]) / d3(&pts[a], &pts[c]);
        assert!(((img - ortho) / ortho).abs() < 5e-3);
    }

    #[test]
    fn dolly_keeps_eye_midpoint_fixed() {
        let m = synthesize_model(5, 80, 4).unwrap();
        let z = m.zero_latent();
        let limits = Limits::default();
        // Anchor the coupling on the true eye-midpoint depth.
        let base = cam_at(0.5, 700.0);
        let depth = anchor_depth(&m, &z, &base).unwrap();
        let base = base.rebased(depth, &limits).unwrap();
        let far = base.set_distance(2.0 * base.distance(), &limits).unwrap();
        let mid = |c: &CameraState| {
            let s = m.shape_flat(&z).unwrap();
            c.project_world(&m.anchor_of(s.as_slice()), 1e-4).unwrap()
        };
        assert!((mid(&base) - mid(&far)).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_reports_landmark() {
        let m = synthesize_model(5, 30, 2).unwrap();
        let z = m.zero_latent();
        let mut p = cam_at(0.5, 500.0).params();
        p.rotation = crate::geometry::rot_y(std::f64::consts::PI);
        p.anchor.tz0 = -0.5;
        p.anchor.d0 = 0.1;
        p.focal_coupled = false;
        let cam = CameraState::new(p, &Limits::default()).unwrap();
        assert!(matches!(
            render_landmarks(&m, &z, &cam, &Limits::default()),
            Err(Error::PointBehindCamera { index: Some(_), .. })
        ));
    }
}
