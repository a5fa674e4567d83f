//! Re-rendering a portrait from a virtual camera: depth alignment, forward
//! reprojection of the full frame, landmark-driven face flow and blending.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::WarpConfig;
use crate::error::{Error, Result};
use crate::facemodel::{camera_points, render_landmarks, FaceModel};
use crate::geometry::{CameraState, Limits};
use crate::image::{gaussian_blur, DepthImage, FlowField, Image};
use crate::landmarks::LandmarkSet;
use crate::solver::InversionSolution;
use crate::tps::ThinPlateSpline;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRect {
    pub fn full(width: u32, height: u32) -> Self {
        CropRect {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    fn check_inside(&self, width: u32, height: u32) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x + self.width > width || self.y + self.height > height {
            return Err(Error::InvalidDimensions(format!(
                "crop {}x{}+{}+{} outside {width}x{height}",
                self.width, self.height, self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Scale and offset mapping the full-frame depth onto the face depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub offset: f64,
    pub overlap: usize,
}

/// Fit `a * full + b` to the face depth over the overlap, then composite
/// the face depth over the adjusted full depth with a feathered band.
///
/// `face` covers `rect` of the full frame.
pub fn align_depth(
    face: &DepthImage,
    full: &DepthImage,
    rect: CropRect,
    cfg: &WarpConfig,
) -> Result<(DepthImage, DepthAlignment)> {
    rect.check_inside(full.width, full.height)?;
    if face.width != rect.width || face.height != rect.height {
        return Err(Error::DimensionMismatch(format!(
            "face depth is {}x{}, crop is {}x{}",
            face.width, face.height, rect.width, rect.height
        )));
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for y in 0..rect.height {
        for x in 0..rect.width {
            if let (Some(f), Some(g)) = (face.get(x, y), full.get(x + rect.x, y + rect.y)) {
                n += 1;
                sx += g;
                sy += f;
                sxx += g * g;
                sxy += g * f;
            }
        }
    }
    if n < cfg.min_overlap.max(2) {
        return Err(Error::InsufficientOverlap {
            found: n,
            required: cfg.min_overlap.max(2),
        });
    }
    let nf = n as f64;
    let (mx, my) = (sx / nf, sy / nf);
    let var = sxx / nf - mx * mx;
    let cov = sxy / nf - mx * my;
    let (scale, offset) = if var > 1e-18 * mx.abs().max(1.0).powi(2) {
        (cov / var, my - cov / var * mx)
    } else {
        (1.0, my - mx)
    };

    // Distance (pixels) from each crop pixel to the nearest pixel without
    // face depth, including everything outside the crop.
    let inside: Vec<bool> = face.valid.clone();
    let dist = chamfer_distance(&inside, rect.width, rect.height);
    let mut out = DepthImage::new(full.width, full.height);
    for y in 0..full.height {
        for x in 0..full.width {
            let g = full.get(x, y).map(|g| scale * g + offset);
            let in_crop = x >= rect.x && y >= rect.y && x < rect.x + rect.width && y < rect.y + rect.height;
            let value = if in_crop {
                let (cx, cy) = (x - rect.x, y - rect.y);
                let i = face.index(cx, cy);
                match (face.get(cx, cy), g) {
                    (Some(f), Some(g)) => {
                        let w = if cfg.feather_px > 0.0 {
                            (dist[i] / cfg.feather_px).min(1.0)
                        } else {
                            1.0
                        };
                        Some(w * f + (1.0 - w) * g)
                    }
                    (Some(f), None) => Some(f),
                    (None, g) => g,
                }
            } else {
                g
            };
            if let Some(z) = value {
                out.set(x, y, z);
            }
        }
    }
    Ok((
        out,
        DepthAlignment {
            scale,
            offset,
            overlap: n,
        },
    ))
}

/// Two-pass chamfer distance (weights 1 and sqrt 2) to the nearest `false`
/// pixel; pixels outside the grid count as `false`.
fn chamfer_distance(inside: &[bool], width: u32, height: u32) -> Vec<f64> {
    let (w, h) = (width as i64, height as i64);
    let big = (w + h) as f64 * 2.0;
    let mut d: Vec<f64> = inside.iter().map(|&v| if v { big } else { 0.0 }).collect();
    let at = |x: i64, y: i64, d: &Vec<f64>| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            d[(y * w + x) as usize]
        }
    };
    let diag = std::f64::consts::SQRT_2;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if d[i] == 0.0 {
                continue;
            }
            let c = d[i]
                .min(at(x - 1, y, &d) + 1.0)
                .min(at(x, y - 1, &d) + 1.0)
                .min(at(x - 1, y - 1, &d) + diag)
                .min(at(x + 1, y - 1, &d) + diag);
            d[i] = c;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = (y * w + x) as usize;
            if d[i] == 0.0 {
                continue;
            }
            let c = d[i]
                .min(at(x + 1, y, &d) + 1.0)
                .min(at(x, y + 1, &d) + 1.0)
                .min(at(x + 1, y + 1, &d) + diag)
                .min(at(x - 1, y + 1, &d) + diag);
            d[i] = c;
        }
    }
    d
}

/// Rigid map from the source camera frame to the destination camera frame.
fn relative_motion(src: &CameraState, dst: &CameraState) -> (Matrix3<f64>, Vector3<f64>) {
    let (es, ed) = (src.extrinsics(), dst.extrinsics());
    let rs = es.rotation.matrix();
    let rd = ed.rotation.matrix();
    let m = rd * rs.transpose();
    (m, ed.translation - m * es.translation)
}

/// Result of [`depth_reproject`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    pub image: Image,
    /// True where at least one source sample landed; hole-filled pixels are
    /// false.
    pub valid: Vec<bool>,
    pub depth: DepthImage,
}

/// Forward-splat every valid pixel into the destination view with a
/// z-buffer at `supersample`x resolution, then fill holes by diffusion.
pub fn depth_reproject(
    img: &Image,
    depth: &DepthImage,
    cam_src: &CameraState,
    cam_dst: &CameraState,
    cfg: &WarpConfig,
) -> Result<Reprojection> {
    img.check_same_size(depth.width, depth.height)?;
    let (w, h) = (img.width, img.height);
    let s = cfg.supersample.max(1) as u32;
    let (sw, sh) = (w * s, h * s);
    let (m, t) = relative_motion(cam_src, cam_dst);
    let (is, id) = (cam_src.intrinsics(), cam_dst.intrinsics());
    let fd = id.focal();
    let mut zbuf = vec![f64::INFINITY; (sw * sh) as usize];
    let mut color = vec![[0.0f64; 3]; (sw * sh) as usize];
    // Sequential row-major splatting: ties keep the first writer, so the
    // result does not depend on scheduling.
    for y in 0..h {
        for x in 0..w {
            let Some(z) = depth.get(x, y) else { continue };
            let rgb = img.get(x, y);
            for sy in 0..s {
                for sx in 0..s {
                    let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                    let p = m * is.unproject(u, v, z) + t;
                    if !(p.z > 1e-9) {
                        continue;
                    }
                    let ud = fd * p.x / p.z + id.cx;
                    let vd = fd * p.y / p.z + id.cy;
                    let (fx, fy) = ((ud * s as f64).floor(), (vd * s as f64).floor());
                    if fx < 0.0 || fy < 0.0 || fx >= sw as f64 || fy >= sh as f64 {
                        continue;
                    }
                    let k = fy as usize * sw as usize + fx as usize;
                    if p.z < zbuf[k] {
                        zbuf[k] = p.z;
                        color[k] = rgb;
                    }
                }
            }
        }
    }
    let mut image = Image::new(w, h, img.peak);
    let mut out_depth = DepthImage::new(w, h);
    let mut valid = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut zacc, mut cnt) = ([0.0; 3], 0.0, 0usize);
            for sy in 0..s {
                for sx in 0..s {
                    let k = ((y * s + sy) * sw + x * s + sx) as usize;
                    if zbuf[k].is_finite() {
                        for c in 0..3 {
                            acc[c] += color[k][c];
                        }
                        zacc += zbuf[k];
                        cnt += 1;
                    }
                }
            }
            if cnt > 0 {
                let n = cnt as f64;
                image.set(x, y, [acc[0] / n, acc[1] / n, acc[2] / n]);
                out_depth.set(x, y, zacc / n);
                valid[image.index(x, y)] = true;
            }
        }
    }
    fill_holes(&mut image, &valid, cfg.hole_fill_iters);
    Ok(Reprojection {
        image,
        valid,
        depth: out_depth,
    })
}

/// Iterative 8-neighbour diffusion into invalid pixels.
fn fill_holes(img: &mut Image, valid: &[bool], iters: usize) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut known = valid.to_vec();
    for _ in 0..iters {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if known[i] {
                    continue;
                }
                let (mut acc, mut cnt) = ([0.0; 3], 0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        if known[(ny * w + nx) as usize] {
                            let c = img.get(nx as u32, ny as u32);
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                            cnt += 1;
                        }
                    }
                }
                if cnt > 0 {
                    let n = cnt as f64;
                    updates.push((x as u32, y as u32, i, [acc[0] / n, acc[1] / n, acc[2] / n]));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (x, y, i, c) in updates {
            img.set(x, y, c);
            known[i] = true;
        }
    }
}

/// Analytic displacement of every valid pixel center from the source to
/// the destination view.
pub fn reprojection_flow(depth: &DepthImage, cam_src: &CameraState, cam_dst: &CameraState) -> FlowField {
    let (m, t) = relative_motion(cam_src, cam_dst);
    let (is, id) = (cam_src.intrinsics(), cam_dst.intrinsics());
    let fd = id.focal();
    let mut flow = FlowField::zeros(depth.width, depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = flow.index(x, y);
            match depth.get(x, y) {
                Some(z) => {
                    let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                    let p = m * is.unproject(u, v, z) + t;
                    if p.z > 1e-9 {
                        flow.flow[i] = [fd * p.x / p.z + id.cx - u, fd * p.y / p.z + id.cy - v];
                    } else {
                        flow.valid[i] = false;
                    }
                }
                None => flow.valid[i] = false,
            }
        }
    }
    flow
}

fn paired_points(src: &LandmarkSet, dst: &LandmarkSet) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source and {} target landmarks",
            src.len(),
            dst.len()
        )));
    }
    let keep: Vec<usize> = (0..src.len())
        .filter(|&i| src.visibility[i] && dst.visibility[i])
        .collect();
    Ok((
        keep.iter().map(|&i| src.points[i]).collect(),
        keep.iter().map(|&i| dst.points[i]).collect(),
    ))
}

/// Radial attenuation: 1 within the hull radius, cosine to 0 at
/// `falloff_factor` times the radius, 0 beyond.
#[derive(Debug, Clone, Copy)]
struct Falloff {
    center: [f64; 2],
    inner: f64,
    outer: f64,
}

impl Falloff {
    fn new(points: &[[f64; 2]], factor: f64) -> Self {
        let n = points.len() as f64;
        let c = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let r = points
            .iter()
            .map(|p| (p[0] - c[0]).hypot(p[1] - c[1]))
            .fold(0.0, f64::max);
        Falloff {
            center: c,
            inner: r,
            outer: factor * r,
        }
    }

    fn weight(&self, x: f64, y: f64) -> f64 {
        let r = (x - self.center[0]).hypot(y - self.center[1]);
        if r <= self.inner {
            1.0
        } else if r >= self.outer {
            0.0
        } else {
            let t = (r - self.inner) / (self.outer - self.inner);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Dense flow from a thin-plate spline through `dst - src` at the source
/// landmarks (pixel coordinates), attenuated outside the landmark hull.
pub fn landmark_flow(src: &LandmarkSet, dst: &LandmarkSet, width: u32, height: u32, cfg: &WarpConfig) -> Result<FlowField> {
    let (sp, dp) = paired_points(src, dst)?;
    if sp.len() < 4 {
        return Err(Error::DegenerateControlPoints(format!(
            "{} correspondences, need at least 4",
            sp.len()
        )));
    }
    let values: Vec<Vec<f64>> = sp.iter().zip(&dp).map(|(s, d)| vec![d[0] - s[0], d[1] - s[1]]).collect();
    let tps = ThinPlateSpline::fit(&sp, &values, cfg.tps_lambda)?;
    let falloff = Falloff::new(&sp, cfg.falloff_factor);
    let mut flow = FlowField::zeros(width, height);
    flow.flow
        .par_chunks_mut(width as usize)
        .enumerate()
        .for_each(|(y, row)| {
            let mut buf = [0.0; 2];
            for (x, f) in row.iter_mut().enumerate() {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                let wgt = falloff.weight(u, v);
                if wgt > 0.0 {
                    tps.eval_into(u, v, &mut buf);
                    *f = [wgt * buf[0], wgt * buf[1]];
                }
            }
        });
    Ok(flow)
}

/// Evaluate the attenuated landmark flow at arbitrary points.
pub fn landmark_flow_at(src: &LandmarkSet, dst: &LandmarkSet, points: &[[f64; 2]], cfg: &WarpConfig) -> Result<Vec<[f64; 2]>> {
    let (sp, dp) = paired_points(src, dst)?;
    if sp.len() < 4 {
        return Err(Error::DegenerateControlPoints(format!(
            "{} correspondences, need at least 4",
            sp.len()
        )));
    }
    let values: Vec<Vec<f64>> = sp.iter().zip(&dp).map(|(s, d)| vec![d[0] - s[0], d[1] - s[1]]).collect();
    let tps = ThinPlateSpline::fit(&sp, &values, cfg.tps_lambda)?;
    let falloff = Falloff::new(&sp, cfg.falloff_factor);
    Ok(points
        .iter()
        .map(|p| {
            let wgt = falloff.weight(p[0], p[1]);
            if wgt > 0.0 {
                let v = tps.eval(p[0], p[1]);
                [wgt * v[0], wgt * v[1]]
            } else {
                [0.0, 0.0]
            }
        })
        .collect())
}

/// Sample `img` at `p + flow(p)` for every pixel.
pub fn backward_warp(img: &Image, flow: &FlowField) -> Result<Image> {
    img.check_same_size(flow.width, flow.height)?;
    let mut out = Image::new(img.width, img.height, img.peak);
    for y in 0..img.height {
        for x in 0..img.width {
            let f = flow.flow[flow.index(x, y)];
            let c = if f == [0.0, 0.0] {
                img.get(x, y)
            } else {
                img.sample(x as f64 + 0.5 + f[0], y as f64 + 0.5 + f[1])
            };
            out.set(x, y, c);
        }
    }
    Ok(out)
}

/// `fg * alpha + bg * (1 - alpha)` per pixel.
pub fn blend(fg: &Image, bg: &Image, alpha: &[f64]) -> Result<Image> {
    bg.check_same_size(fg.width, fg.height)?;
    if alpha.len() != fg.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} samples for {} pixels",
            alpha.len(),
            fg.len()
        )));
    }
    if let Some(i) = alpha.iter().position(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Invalid(format!("mask value {} at {i} outside [0, 1]", alpha[i])));
    }
    if fg.peak != bg.peak {
        return Err(Error::DimensionMismatch(format!("peaks {} and {} differ", fg.peak, bg.peak)));
    }
    let mut out = Image::new(fg.width, fg.height, fg.peak);
    for (i, a) in alpha.iter().enumerate() {
        for c in 0..3 {
            let k = 3 * i + c;
            out.data[k] = if *a == 1.0 {
                fg.data[k]
            } else if *a == 0.0 {
                bg.data[k]
            } else {
                fg.data[k] * a + bg.data[k] * (1.0 - a)
            };
        }
    }
    Ok(out)
}

/// Convex hull (counter-clockwise in image coordinates), monotone chain.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], x: f64, y: f64) -> bool {
    inside_hull_by(hull, x, y, 0.0)
}

/// True when `(x, y)` is at least `inset` inside every hull edge.
fn inside_hull_by(hull: &[[f64; 2]], x: f64, y: f64, inset: f64) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= inset * len
    })
}

/// Binary hull of `points` (pixels) blurred by a Gaussian of `sigma`.
pub fn hull_mask(points: &[[f64; 2]], width: u32, height: u32, sigma: f64) -> Vec<f64> {
    let hull = convex_hull(points);
    let mut mask = vec![0.0; width as usize * height as usize];
    for y in 0..height {
        for x in 0..width {
            if inside_hull(&hull, x as f64 + 0.5, y as f64 + 0.5) {
                mask[y as usize * width as usize + x as usize] = 1.0;
            }
        }
    }
    gaussian_blur(&mask, width, height, sigma)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Output of [`correct_portrait`].
#[derive(Debug, Clone)]
pub struct Correction {
    pub image: Image,
    /// Pixels covered by reprojected content or the face region.
    pub valid: Vec<bool>,
    pub cam_far: CameraState,
    pub alignment: DepthAlignment,
    /// Fitted landmarks in the near and far views, pixels.
    pub near_landmarks: LandmarkSet,
    pub far_landmarks: LandmarkSet,
}

/// Face depth over the landmark hull: thin-plate interpolation of the
/// fitted landmark depths.
fn face_depth(points: &[[f64; 2]], depths: &[f64], width: u32, height: u32, cfg: &WarpConfig) -> Result<(DepthImage, CropRect)> {
    let values: Vec<Vec<f64>> = depths.iter().map(|d| vec![*d]).collect();
    let tps = ThinPlateSpline::fit(points, &values, cfg.tps_lambda)?;
    let hull = convex_hull(points);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &hull {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let clip = |v: f64, hi: u32| v.floor().clamp(0.0, hi as f64) as u32;
    let (rx0, ry0) = (clip(x0, width - 1), clip(y0, height - 1));
    let (rx1, ry1) = (clip(x1, width - 1), clip(y1, height - 1));
    let rect = CropRect {
        x: rx0,
        y: ry0,
        width: rx1 - rx0 + 1,
        height: ry1 - ry0 + 1,
    };
    let depth = DepthImage::from_fn(rect.width, rect.height, |x, y| {
        let (u, v) = ((x + rect.x) as f64 + 0.5, (y + rect.y) as f64 + 0.5);
        inside_hull_by(&hull, u, v, cfg.face_inset_px).then(|| tps.eval(u, v)[0])
    });
    Ok((depth, rect))
}

/// Drop face-depth samples whose full-frame depth is far from the bulk of
/// the region: the landmark hull can enclose background near the silhouette.
/// The band is eight robust standard deviations around the median.
fn segment_face(face: &mut DepthImage, full: &DepthImage, rect: CropRect) {
    let mut samples = Vec::new();
    for y in 0..rect.height {
        for x in 0..rect.width {
            if face.get(x, y).is_some() {
                if let Some(g) = full.get(x + rect.x, y + rect.y) {
                    samples.push(g);
                }
            }
        }
    }
    if samples.is_empty() {
        return;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let med = median(&mut samples);
    let mut dev: Vec<f64> = samples.iter().map(|g| (g - med).abs()).collect();
    let band = 8.0 * 1.4826 * median(&mut dev);
    for y in 0..rect.height {
        for x in 0..rect.width {
            if let Some(g) = full.get(x + rect.x, y + rect.y) {
                if (g - med).abs() > band {
                    let i = face.index(x, y);
                    face.valid[i] = false;
                    face.depth[i] = 0.0;
                }
            }
        }
    }
}

/// Re-render the portrait from a camera moved to `target_scale` times the
/// recovered distance, with the focal length scaled to keep the face size.
pub fn correct_portrait(
    img: &Image,
    depth: Option<&DepthImage>,
    model: &FaceModel,
    solution: &InversionSolution,
    target_scale: f64,
    cfg: &WarpConfig,
    limits: &Limits,
) -> Result<Correction> {
    let depth = depth.ok_or_else(|| {
        Error::Invalid("a depth map is required for correction; pass one with --depth".into())
    })?;
    img.check_same_size(depth.width, depth.height)?;
    depth.validate()?;
    if !(target_scale > 0.0) || !target_scale.is_finite() {
        return Err(Error::Invalid(format!("target scale {target_scale} must be positive")));
    }
    let cam_near = solution.cam;
    let intr = cam_near.intrinsics();
    if intr.width != img.width || intr.height != img.height {
        return Err(Error::DimensionMismatch(format!(
            "solution camera is {}x{}, image is {}x{}",
            intr.width, intr.height, img.width, img.height
        )));
    }
    let cam_far = cam_near.set_distance(target_scale * solution.distance, limits)?;
    let (w, h) = (img.width, img.height);
    let near = render_landmarks(model, &solution.latent, &cam_near, limits)?.to_pixels(w, h);
    let far = render_landmarks(model, &solution.latent, &cam_far, limits)?.to_pixels(w, h);

    let z_near: Vec<f64> = camera_points(model, &solution.latent, &cam_near)?
        .iter()
        .map(|p| p.z)
        .collect();
    let (mut face_z, rect) = face_depth(&near.points, &z_near, w, h, cfg)?;
    segment_face(&mut face_z, depth, rect);
    let (aligned, alignment) = align_depth(&face_z, depth, rect, cfg)?;
    let background = depth_reproject(img, &aligned, &cam_near, &cam_far, cfg)?;

    let flow = landmark_flow(&far, &near, w, h, cfg)?;
    let face = backward_warp(img, &flow)?;
    let mask = hull_mask(&far.points, w, h, cfg.blend_sigma);
    let image = blend(&face, &background.image, &mask)?;
    let valid = background
        .valid
        .iter()
        .zip(&mask)
        .map(|(v, m)| *v || *m >= 0.5)
        .collect();
    Ok(Correction {
        image,
        valid,
        cam_far,
        alignment,
        near_landmarks: near,
        far_landmarks: far,
    })
}
