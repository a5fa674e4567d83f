//! Ground-truth synthetic inversion instances.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facemodel::{
    anchor_depth, render_landmarks, synthesize_model, FaceLatent, FaceModel, LABEL_EYE_LEFT,
    LABEL_EYE_RIGHT, LABEL_NOSE_LEFT, LABEL_NOSE_RIGHT,
};
use crate::geometry::{CameraParams, CameraState, Limits, ReparamAnchor, Rotation};
use crate::landmarks::LandmarkSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_landmarks: usize,
    pub latent_dim: usize,
    /// Seed of the shared face model.
    pub model_seed: u64,
    /// True camera-to-anchor distance range in meters.
    pub d_range: [f64; 2],
    /// 35mm-equivalent focal length range in millimeters.
    pub f35_range: [f64; 2],
    /// Landmark noise standard deviation in normalized units.
    pub noise_sigma: f64,
    /// Per-axis rotation jitter bound in degrees.
    pub rot_jitter_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Sigma reported for the observed landmarks.
    pub detector_sigma: f64,
    /// Bound on latent coefficients.
    pub w_bound: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_landmarks: 468,
            latent_dim: 32,
            model_seed: 0,
            d_range: [0.25, 0.7],
            f35_range: [20.0, 35.0],
            noise_sigma: 0.0,
            rot_jitter_deg: 10.0,
            width: 512,
            height: 512,
            detector_sigma: 0.01,
            w_bound: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let [d_lo, d_hi] = self.d_range;
        if !(d_lo > 0.0 && d_hi >= d_lo && d_hi.is_finite()) {
            return bad("d_range must satisfy 0 < lo <= hi");
        }
        let [f_lo, f_hi] = self.f35_range;
        if !(f_lo > 0.0 && f_hi >= f_lo && f_hi.is_finite()) {
            return bad("f35_range must satisfy 0 < lo <= hi");
        }
        if !(self.noise_sigma >= 0.0) || !(self.rot_jitter_deg >= 0.0) || !(self.w_bound > 0.0) {
            return bad("noise_sigma, rot_jitter_deg must be >= 0 and w_bound > 0");
        }
        if !(self.detector_sigma > 0.0) {
            return bad("detector_sigma must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if self.n_landmarks < 8 || self.latent_dim == 0 {
            return bad("need n_landmarks >= 8 and latent_dim >= 1");
        }
        Ok(())
    }

    pub fn focal_px(&self, f35: f64) -> f64 {
        f35 * self.width as f64 / 36.0
    }

    pub fn model(&self) -> Result<FaceModel> {
        synthesize_model(self.model_seed, self.n_landmarks, self.latent_dim)
    }
}

/// Ground truth shared by the instance file and its sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub true_latent: FaceLatent,
    pub true_cam: CameraState,
    pub distance: f64,
    pub focal: f64,
    pub f35: f64,
    pub noise_sigma: f64,
    /// Noise added to each normalized landmark coordinate.
    pub noise: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub model: Arc<FaceModel>,
    pub truth: GroundTruth,
    pub observed: LandmarkSet,
}

impl SyntheticInstance {
    pub fn true_distance(&self) -> f64 {
        self.truth.distance
    }

    /// Noise-free projection of the true shape.
    pub fn clean_landmarks(&self, limits: &Limits) -> Result<LandmarkSet> {
        render_landmarks(&self.model, &self.truth.true_latent, &self.truth.true_cam, limits)
    }
}

const MAX_DRAWS: usize = 200;

/// Generate one instance with a freshly synthesized model.
pub fn generate(seed: u64, spec: &SynthSpec) -> Result<SyntheticInstance> {
    spec.validate()?;
    generate_with_model(Arc::new(spec.model()?), seed, spec)
}

/// Generate one instance over a shared model.
pub fn generate_with_model(model: Arc<FaceModel>, seed: u64, spec: &SynthSpec) -> Result<SyntheticInstance> {
    spec.validate()?;
    if model.n_landmarks() != spec.n_landmarks || model.latent_dim() != spec.latent_dim {
        return Err(Error::InvalidSpec(format!(
            "model is {}x{}, spec asks for {}x{}",
            model.n_landmarks(),
            model.latent_dim(),
            spec.n_landmarks,
            spec.latent_dim
        )));
    }
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_DRAWS {
        let w: Vec<f64> = (0..spec.latent_dim)
            .map(|_| loop {
                let v: f64 = StandardNormal.sample(&mut rng);
                if v.abs() <= spec.w_bound {
                    break v;
                }
            })
            .collect();
        let latent = FaceLatent {
            w,
            residual: vec![0.0; 3 * spec.n_landmarks],
        };
        let distance = uniform(&mut rng, spec.d_range);
        let f35 = uniform(&mut rng, spec.f35_range);
        let jitter = spec.rot_jitter_deg.to_radians();
        let angles: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, [-jitter, jitter]));
        // Small lateral offset of the eye midpoint from the optical axis.
        let lateral: [f64; 2] = std::array::from_fn(|_| uniform(&mut rng, [-0.05, 0.05]) * distance);

        let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
        let rotation = Rotation::from_matrix(rot.matrix());
        let shape = model.shape_flat(&latent)?;
        let anchor_w = model.anchor_of(shape.as_slice());
        let anchor_c = Vector3::new(lateral[0], lateral[1], distance);
        let t = anchor_c - rot * anchor_w;
        let f_px = spec.focal_px(f35);
        let cam = CameraState::new(
            CameraParams {
                rotation,
                tx: t.x,
                ty: t.y,
                f0: f_px,
                gamma: 1.0,
                cx: spec.width as f64 / 2.0,
                cy: spec.height as f64 / 2.0,
                width: spec.width,
                height: spec.height,
                anchor: ReparamAnchor {
                    tz0: t.z,
                    d0: distance,
                    delta_tz: 1.0,
                },
                focal_coupled: true,
            },
            &limits,
        )?;
        debug_assert!((anchor_depth(&model, &latent, &cam)? - distance).abs() < 1e-12);

        let clean = match render_landmarks(&model, &latent, &cam, &limits) {
            Ok(l) => l,
            Err(_) => continue,
        };
        if !inside_frame(&clean, 0.0) {
            continue;
        }
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let noise: Vec<[f64; 2]> = (0..spec.n_landmarks)
            .map(|_| {
                if spec.noise_sigma > 0.0 {
                    [normal.sample(&mut rng), normal.sample(&mut rng)]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect();
        let points = clean
            .points
            .iter()
            .zip(&noise)
            .map(|(p, n)| [p[0] + n[0], p[1] + n[1]])
            .collect();
        let observed = LandmarkSet::from_points(points, spec.detector_sigma)?;
        return Ok(SyntheticInstance {
            model,
            truth: GroundTruth {
                seed,
                true_latent: latent,
                distance: cam.distance(),
                focal: cam.focal(),
                true_cam: cam,
                f35,
                noise_sigma: spec.noise_sigma,
                noise,
            },
            observed,
        });
    }
    Err(Error::InvalidSpec(format!(
        "no instance with all landmarks in frame after {MAX_DRAWS} draws"
    )))
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn inside_frame(set: &LandmarkSet, margin: f64) -> bool {
    set.points
        .iter()
        .all(|p| p[0] >= margin && p[0] <= 1.0 - margin && p[1] >= margin && p[1] <= 1.0 - margin)
}

/// Base instance seed of the standard evaluation suite.
pub const STANDARD_SUITE_SEED: u64 = 1000;

/// Instance seeds of a suite: `base_seed, base_seed + 1, ...`.
pub fn suite_seeds(base_seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

/// A suite of instances over one shared model.
pub fn standard_suite(base_seed: u64, count: usize, spec: &SynthSpec) -> Result<Vec<SyntheticInstance>> {
    spec.validate()?;
    let model = Arc::new(spec.model()?);
    suite_seeds(base_seed, count)
        .into_iter()
        .map(|s| generate_with_model(model.clone(), s, spec))
        .collect()
}

fn span(set: &LandmarkSet, a: usize, b: usize) -> f64 {
    let (p, q) = (set.points[a], set.points[b]);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Relative growth of the nose-width to interocular-width ratio between a
/// near and a far render of the same face: `ratio(near) / ratio(far) - 1`.
pub fn distortion_score(near: &LandmarkSet, far: &LandmarkSet, labels: &[String]) -> Result<f64> {
    let find = |l: &str| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::MissingLabels(format!("label `{l}` not present")))
    };
    let (el, er) = (find(LABEL_EYE_LEFT)?, find(LABEL_EYE_RIGHT)?);
    let (nl, nr) = (find(LABEL_NOSE_LEFT)?, find(LABEL_NOSE_RIGHT)?);
    if near.len() != labels.len() || far.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels, landmark sets of {} and {}",
            labels.len(),
            near.len(),
            far.len()
        )));
    }
    let ratio = |s: &LandmarkSet| -> Result<f64> {
        let eyes = span(s, el, er);
        if !(eyes > 0.0) {
            return Err(Error::DegenerateConfiguration("eyes coincide".into()));
        }
        Ok(span(s, nl, nr) / eyes)
    };
    Ok(ratio(near)? / ratio(far)? - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_landmarks: 60,
            latent_dim: 6,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn seed_is_deterministic() {
        let a = generate(7, &small()).unwrap();
        let b = generate(7, &small()).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.observed, b.observed);
        let c = generate(8, &small()).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn noiseless_observed_is_exact_projection() {
        let inst = generate(3, &small()).unwrap();
        let clean = inst.clean_landmarks(&Limits::default()).unwrap();
        assert_eq!(clean.points, inst.observed.points);
    }

    #[test]
    fn observed_minus_noise_reproduces_projection() {
        let spec = SynthSpec {
            noise_sigma: 0.002,
            ..small()
        };
        let inst = generate(3, &spec).unwrap();
        let clean = inst.clean_landmarks(&Limits::default()).unwrap();
        for ((o, c), n) in inst.observed.points.iter().zip(&clean.points).zip(&inst.truth.noise) {
            assert_eq!(o[0], c[0] + n[0]);
            assert_eq!(o[1], c[1] + n[1]);
        }
        let rms = (inst.truth.noise.iter().map(|n| n[0] * n[0] + n[1] * n[1]).sum::<f64>()
            / (2.0 * inst.truth.noise.len() as f64))
            .sqrt();
        assert!(rms > 0.001 && rms < 0.003, "{rms}");
    }

    #[test]
    fn distances_and_focals_within_range() {
        let spec = small();
        for inst in standard_suite(100, 30, &spec).unwrap() {
            let d = inst.true_distance();
            assert!(d >= spec.d_range[0] && d <= spec.d_range[1]);
            assert!(inst.truth.f35 >= 20.0 && inst.truth.f35 <= 35.0);
            assert!(inst.truth.true_latent.w.iter().all(|w| w.abs() <= 2.0));
            assert!((inst.truth.focal - spec.focal_px(inst.truth.f35)).abs() < 1e-9);
            assert!(inside_frame(&inst.observed, 0.0));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SynthSpec {
            d_range: [0.0, 1.0],
            ..small()
        };
        assert!(matches!(generate(0, &spec), Err(Error::InvalidSpec(_))));
        let spec = SynthSpec {
            d_range: [0.7, 0.3],
            ..small()
        };
        assert!(matches!(generate(0, &spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn identical_sets_score_zero() {
        let inst = generate(1, &small()).unwrap();
        let s = distortion_score(&inst.observed, &inst.observed, inst.model.labels()).unwrap();
        assert_eq!(s, 0.0);
    }

    fn render_at(inst: &SyntheticInstance, d: f64) -> LandmarkSet {
        let limits = Limits {
            alpha_max: 100.0,
            ..Limits::default()
        };
        let cam = inst.truth.true_cam.set_distance(d, &limits).unwrap();
        render_landmarks(&inst.model, &inst.truth.true_latent, &cam, &limits).unwrap()
    }

    #[test]
    fn near_render_scores_positive_and_decreases_with_distance() {
        let spec = SynthSpec {
            rot_jitter_deg: 0.0,
            ..small()
        };
        let inst = generate(5, &spec).unwrap();
        let far = render_at(&inst, 2.0);
        let labels = inst.model.labels();
        let near = render_at(&inst, 0.25);
        assert!(distortion_score(&near, &far, labels).unwrap() > 0.0);
        let mut prev = f64::INFINITY;
        for d in [0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0] {
            let s = distortion_score(&render_at(&inst, d), &far, labels).unwrap();
            assert!(s < prev, "score at {d} = {s} not below {prev}");
            prev = s;
        }
        assert!(prev.abs() < 1e-12);
    }

    #[test]
    fn missing_labels_error() {
        let inst = generate(1, &small()).unwrap();
        let labels: Vec<String> = vec!["point".into(); inst.observed.len()];
        assert!(matches!(
            distortion_score(&inst.observed, &inst.observed, &labels),
            Err(Error::MissingLabels(_))
        ));
    }
}
