//! Regularized 2D thin-plate spline interpolation with vector values.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};

/// `U(r) = r^2 log r^2`, with `U(0) = 0`.
#[inline]
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    /// Kernel weights, `n x dims`.
    weights: DMatrix<f64>,
    /// Affine part, `3 x dims` over `(1, x, y)`.
    affine: DMatrix<f64>,
    /// Coordinates are shifted and scaled before evaluation for conditioning.
    origin: [f64; 2],
    scale: f64,
}

impl ThinPlateSpline {
    /// Fit values (`values[i]` has `dims` entries) at `centers`, with
    /// smoothing `lambda` (0 interpolates exactly).
    pub fn fit(centers: &[[f64; 2]], values: &[Vec<f64>], lambda: f64) -> Result<Self> {
        let n = centers.len();
        if n < 3 || values.len() != n {
            return Err(Error::DegenerateControlPoints(format!(
                "{n} control points with {} values; need at least 3",
                values.len()
            )));
        }
        let dims = values[0].len();
        if values.iter().any(|v| v.len() != dims) {
            return Err(Error::DimensionMismatch("control values differ in length".into()));
        }
        let mean = centers
            .iter()
            .fold(Vector2::zeros(), |a, c| a + Vector2::new(c[0], c[1]))
            / n as f64;
        let mut cov = Matrix2::zeros();
        for c in centers {
            let d = Vector2::new(c[0], c[1]) - mean;
            cov += d * d.transpose();
        }
        cov /= n as f64;
        let eig = cov.symmetric_eigen();
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(hi > 0.0) || lo < 1e-10 * hi {
            return Err(Error::DegenerateControlPoints(
                "control points are coincident or collinear".into(),
            ));
        }
        let scale = hi.sqrt();
        let origin = [mean.x, mean.y];
        let local: Vec<[f64; 2]> = centers
            .iter()
            .map(|c| [(c[0] - origin[0]) / scale, (c[1] - origin[1]) / scale])
            .collect();

        let m = n + 3;
        let mut a = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let r2 = (local[i][0] - local[j][0]).powi(2) + (local[i][1] - local[j][1]).powi(2);
                a[(i, j)] = kernel(r2);
            }
            a[(i, i)] += lambda;
            let p = [1.0, local[i][0], local[i][1]];
            for (k, pk) in p.iter().enumerate() {
                a[(i, n + k)] = *pk;
                a[(n + k, i)] = *pk;
            }
        }
        let mut rhs = DMatrix::zeros(m, dims);
        for (i, v) in values.iter().enumerate() {
            for (d, x) in v.iter().enumerate() {
                rhs[(i, d)] = *x;
            }
        }
        let lu = a.lu();
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateControlPoints("spline system is singular".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateControlPoints("spline system is singular".into()));
        }
        Ok(ThinPlateSpline {
            centers: local,
            weights: sol.rows(0, n).into_owned(),
            affine: sol.rows(n, 3).into_owned(),
            origin,
            scale,
        })
    }

    pub fn dims(&self) -> usize {
        self.weights.ncols()
    }

    /// Evaluate at `(x, y)` into `out` (length `dims`).
    pub fn eval_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let lx = (x - self.origin[0]) / self.scale;
        let ly = (y - self.origin[1]) / self.scale;
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.affine[(0, d)] + self.affine[(1, d)] * lx + self.affine[(2, d)] * ly;
        }
        for (i, c) in self.centers.iter().enumerate() {
            let u = kernel((lx - c[0]).powi(2) + (ly - c[1]).powi(2));
            if u != 0.0 {
                for (d, o) in out.iter_mut().enumerate() {
                    *o += self.weights[(i, d)] * u;
                }
            }
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dims()];
        self.eval_into(x, y, &mut out);
        out
    }

    /// Kernel weights as a flat vector, for diagnostics.
    pub fn kernel_weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.weights.len(), self.weights.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<[f64; 2]> {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                pts.push([10.0 * i as f64 + (j as f64) * 1.3, 8.0 * j as f64 + (i * i) as f64 * 0.7]);
            }
        }
        pts
    }

    #[test]
    fn interpolates_control_values() {
        let pts = grid();
        let vals: Vec<Vec<f64>> = pts.iter().map(|p| vec![(p[0] * 0.3).sin(), p[1].cos() * 2.0]).collect();
        let tps = ThinPlateSpline::fit(&pts, &vals, 0.0).unwrap();
        for (p, v) in pts.iter().zip(&vals) {
            let e = tps.eval(p[0], p[1]);
            assert!((e[0] - v[0]).abs() < 1e-9 && (e[1] - v[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn reproduces_affine_functions() {
        let pts = grid();
        let f = |p: [f64; 2]| 0.3 * p[0] - 1.7 * p[1] + 4.0;
        let vals: Vec<Vec<f64>> = pts.iter().map(|p| vec![f(*p)]).collect();
        let tps = ThinPlateSpline::fit(&pts, &vals, 0.0).unwrap();
        for q in [[3.0, 4.0], [25.0, 13.0], [-5.0, 30.0]] {
            assert!((tps.eval(q[0], q[1])[0] - f(q)).abs() < 1e-9);
        }
        assert!(tps.kernel_weights().amax() < 1e-9);
    }

    #[test]
    fn collinear_points_rejected() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let vals = vec![vec![0.0]; 6];
        assert!(matches!(
            ThinPlateSpline::fit(&pts, &vals, 0.0),
            Err(Error::DegenerateControlPoints(_))
        ));
    }

    #[test]
    fn duplicate_points_rejected_without_smoothing() {
        let mut pts = grid();
        pts.push(pts[3]);
        let vals: Vec<Vec<f64>> = (0..pts.len()).map(|i| vec![i as f64]).collect();
        assert!(ThinPlateSpline::fit(&pts, &vals, 0.0).is_err());
    }
}
