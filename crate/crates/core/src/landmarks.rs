use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of 2D landmark observations with per-point visibility and
/// uncertainty. Coordinates are normalized to `[0, 1]^2` unless a function
/// says it works in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    pub sigma: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, visibility: Vec<bool>, sigma: Vec<f64>) -> Result<Self> {
        let set = LandmarkSet {
            points,
            visibility,
            sigma,
        };
        set.validate()?;
        Ok(set)
    }

    /// All points visible with a shared sigma.
    pub fn from_points(points: Vec<[f64; 2]>, sigma: f64) -> Result<Self> {
        let n = points.len();
        LandmarkSet::new(points, vec![true; n], vec![sigma; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.visibility.len() != n || self.sigma.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "landmark set has {n} points, {} visibility flags, {} sigmas",
                self.visibility.len(),
                self.sigma.len()
            )));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::Invalid(format!("landmark {i} is not finite")));
        }
        if let Some(i) = self.sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("landmark {i} has non-positive sigma")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_pixels(&self, width: u32, height: u32) -> LandmarkSet {
        self.scaled(width as f64, height as f64)
    }

    pub fn to_normalized(&self, width: u32, height: u32) -> LandmarkSet {
        self.scaled(1.0 / width as f64, 1.0 / height as f64)
    }

    fn scaled(&self, sx: f64, sy: f64) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect(),
            visibility: self.visibility.clone(),
            sigma: self.sigma.clone(),
        }
    }

    /// Reorder by `perm[i]` = source index of output point `i`.
    pub fn permuted(&self, perm: &[usize]) -> LandmarkSet {
        LandmarkSet {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            visibility: perm.iter().map(|&i| self.visibility[i]).collect(),
            sigma: perm.iter().map(|&i| self.sigma[i]).collect(),
        }
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        self.sigma = sigma;
        self.validate()?;
        Ok(self)
    }
}
