//! Synthetic portrait scene: a textured face surface through the model
//! landmarks, colored marker spheres on the eye and nose-wing landmarks, and
//! a textured background plane fixed in the world.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facemodel::{shape, FaceLatent, FaceModel, LABEL_EYE_LEFT, LABEL_EYE_RIGHT, LABEL_NOSE_LEFT, LABEL_NOSE_RIGHT};
use crate::geometry::CameraState;
use crate::image::{DepthImage, Image};
use crate::tps::ThinPlateSpline;
use crate::warpstitch::convex_hull;

/// Labels carrying markers, in marker order.
pub const MARKER_LABELS: [&str; 4] = [LABEL_EYE_LEFT, LABEL_EYE_RIGHT, LABEL_NOSE_LEFT, LABEL_NOSE_RIGHT];

/// Flat marker colors (peak 1).
pub const MARKER_COLORS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Marker sphere radius in meters.
    pub marker_radius: f64,
    /// Background plane in world coordinates.
    pub background: Plane,
    /// Samples per pixel along each axis.
    pub supersample: u32,
    /// Face surface tessellation step in meters.
    pub mesh_step: f64,
}

impl SceneSpec {
    /// Background plane parallel to the image plane of `cam`, `offset`
    /// meters behind the face anchor.
    pub fn behind_face(cam: &CameraState, offset: f64) -> Self {
        let ext = cam.extrinsics();
        let inv = ext.inverse();
        let point = inv.transform(&Vector3::new(0.0, 0.0, cam.distance() + offset));
        let axis = inv.rotation.matrix() * Vector3::z();
        SceneSpec {
            marker_radius: 0.003,
            background: Plane {
                point: [point.x, point.y, point.z],
                normal: [axis.x, axis.y, axis.z],
            },
            supersample: 2,
            mesh_step: 0.002,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneRender {
    pub image: Image,
    pub depth: DepthImage,
}

fn skin(x: f64, y: f64) -> [f64; 3] {
    let s = 0.5 + 0.5 * (x * 2.0 * std::f64::consts::PI / 0.012).sin() * (y * 2.0 * std::f64::consts::PI / 0.015).cos();
    [0.78 + 0.12 * s, 0.58 + 0.1 * s, 0.48 + 0.08 * s]
}

fn backdrop(p: &Vector3<f64>) -> [f64; 3] {
    let cell = ((p.x / 0.04).floor() as i64 + (p.y / 0.04).floor() as i64).rem_euclid(2);
    let g = 0.5 + 0.3 * (p.x * 3.0).sin();
    if cell == 0 {
        [0.3 * g + 0.1, 0.35 * g + 0.1, 0.45 * g + 0.1]
    } else {
        [0.55, 0.58, 0.6]
    }
}

struct Target {
    s: u32,
    w: u32,
    z: Vec<f64>,
    rgb: Vec<[f64; 3]>,
}

impl Target {
    fn put(&mut self, x: u32, y: u32, z: f64, c: [f64; 3]) {
        let k = (y * self.w * self.s + x) as usize;
        if z < self.z[k] {
            self.z[k] = z;
            self.rgb[k] = c;
        }
    }
}

/// Render the face given by `latent` under `cam` together with the scene.
pub fn render_scene(model: &FaceModel, latent: &FaceLatent, cam: &CameraState, spec: &SceneSpec) -> Result<SceneRender> {
    let intr = cam.intrinsics();
    let (w, h) = (intr.width, intr.height);
    let s = spec.supersample.max(1);
    let (sw, sh) = (w * s, h * s);
    let f = intr.focal();
    let ext = cam.extrinsics();
    let rot = ext.rotation.matrix();
    let mut tgt = Target {
        s,
        w,
        z: vec![f64::INFINITY; (sw * sh) as usize],
        rgb: vec![[0.0; 3]; (sw * sh) as usize],
    };
    let ray = |fx: u32, fy: u32| {
        let u = (fx as f64 + 0.5) / s as f64;
        let v = (fy as f64 + 0.5) / s as f64;
        Vector3::new((u - intr.cx) / f, (v - intr.cy) / f, 1.0)
    };

    // Background plane.
    let p0 = ext.transform(&Vector3::from(spec.background.point));
    let n = rot * Vector3::from(spec.background.normal);
    let inv = ext.inverse();
    for fy in 0..sh {
        for fx in 0..sw {
            let d = ray(fx, fy);
            let denom = n.dot(&d);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = n.dot(&p0) / denom;
            if t > 0.0 {
                let world = inv.transform(&(d * t));
                tgt.put(fx, fy, t, backdrop(&world));
            }
        }
    }

    // Face surface: height field through the landmarks over their hull.
    let pts = shape(model, latent)?;
    let xy: Vec<[f64; 2]> = pts.iter().map(|p| [p.x, p.y]).collect();
    let zs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.z]).collect();
    let surface = ThinPlateSpline::fit(&xy, &zs, 0.0)?;
    let hull = convex_hull(&xy);
    // Vertices slightly outside the hull are kept so the triangles cover it
    // up to its edges.
    let margin = 1.5 * spec.mesh_step;
    let inside = |x: f64, y: f64| {
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= -margin * len
        })
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &xy {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let (x0, x1, y0, y1) = (x0 - margin, x1 + margin, y0 - margin, y1 + margin);
    let nx = ((x1 - x0) / spec.mesh_step).ceil() as usize + 1;
    let ny = ((y1 - y0) / spec.mesh_step).ceil() as usize + 1;
    let mut verts: Vec<Option<(Vector3<f64>, [f64; 2])>> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (x0 + i as f64 * spec.mesh_step).min(x1);
            let y = (y0 + j as f64 * spec.mesh_step).min(y1);
            verts.push(if inside(x, y) {
                let z = surface.eval(x, y)[0];
                Some((ext.transform(&Vector3::new(x, y, z)), [x, y]))
            } else {
                None
            });
        }
    }
    let scale = s as f64;
    let mut raster = |a: (Vector3<f64>, [f64; 2]), b: (Vector3<f64>, [f64; 2]), c: (Vector3<f64>, [f64; 2])| {
        let verts = [a, b, c];
        if verts.iter().any(|v| v.0.z <= 1e-6) {
            return;
        }
        let scr: Vec<Vector2<f64>> = verts
            .iter()
            .map(|v| Vector2::new((f * v.0.x / v.0.z + intr.cx) * scale, (f * v.0.y / v.0.z + intr.cy) * scale))
            .collect();
        let area = (scr[1] - scr[0]).perp(&(scr[2] - scr[0]));
        if area.abs() < 1e-12 {
            return;
        }
        let bx0 = scr.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
        let bx1 = scr.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil().min(sw as f64 - 1.0) as i64;
        let by0 = scr.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
        let by1 = scr.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil().min(sh as f64 - 1.0) as i64;
        for py in by0..=by1 {
            for px in bx0..=bx1 {
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let l0 = (scr[2] - scr[1]).perp(&(p - scr[1])) / area;
                let l1 = (scr[0] - scr[2]).perp(&(p - scr[2])) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < -1e-12 || l1 < -1e-12 || l2 < -1e-12 {
                    continue;
                }
                // Perspective-correct interpolation through 1/z.
                let iz = [l0 / verts[0].0.z, l1 / verts[1].0.z, l2 / verts[2].0.z];
                let sum = iz[0] + iz[1] + iz[2];
                let z = 1.0 / sum;
                let tx = (iz[0] * verts[0].1[0] + iz[1] * verts[1].1[0] + iz[2] * verts[2].1[0]) * z;
                let ty = (iz[0] * verts[0].1[1] + iz[1] * verts[1].1[1] + iz[2] * verts[2].1[1]) * z;
                tgt.put(px as u32, py as u32, z, skin(tx, ty));
            }
        }
    };
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let q = [verts[j * nx + i], verts[j * nx + i + 1], verts[(j + 1) * nx + i], verts[(j + 1) * nx + i + 1]];
            if let (Some(a), Some(b), Some(c)) = (q[0], q[1], q[2]) {
                raster(a, b, c);
            }
            if let (Some(b), Some(d), Some(c)) = (q[1], q[3], q[2]) {
                raster(b, d, c);
            }
        }
    }

    // Marker spheres, drawn over the surface they are centered on.
    for (label, color) in MARKER_LABELS.iter().zip(MARKER_COLORS) {
        let i = model
            .label_index(label)
            .ok_or_else(|| Error::MissingLabels(format!("label `{label}` not present")))?;
        let c = ext.transform(&pts[i]);
        let r = spec.marker_radius;
        if c.z <= r {
            continue;
        }
        let cu = (f * c.x / c.z + intr.cx) * scale;
        let cv = (f * c.y / c.z + intr.cy) * scale;
        let rad = (f * r / (c.z - r) * scale).ceil() + 2.0;
        let fx0 = (cu - rad).floor().max(0.0) as u32;
        let fx1 = (cu + rad).ceil().min(sw as f64 - 1.0).max(0.0) as u32;
        let fy0 = (cv - rad).floor().max(0.0) as u32;
        let fy1 = (cv + rad).ceil().min(sh as f64 - 1.0).max(0.0) as u32;
        for fy in fy0..=fy1 {
            for fx in fx0..=fx1 {
                let d = ray(fx, fy);
                let a = d.norm_squared();
                let b = d.dot(&c);
                let disc = b * b - a * (c.norm_squared() - r * r);
                if disc < 0.0 {
                    continue;
                }
                let t = (b - disc.sqrt()) / a;
                // Markers sit half inside the surface; bias them in front.
                let k = (fy * sw + fx) as usize;
                if t > 0.0 && t < tgt.z[k] + r {
                    tgt.z[k] = t.min(tgt.z[k]);
                    tgt.rgb[k] = color;
                }
            }
        }
    }

    let mut image = Image::new(w, h, 1.0);
    let mut depth = DepthImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut zmin, mut cnt) = ([0.0; 3], f64::INFINITY, 0);
            for sy in 0..s {
                for sx in 0..s {
                    let k = ((y * s + sy) * sw + x * s + sx) as usize;
                    if tgt.z[k].is_finite() {
                        for ch in 0..3 {
                            acc[ch] += tgt.rgb[k][ch];
                        }
                        zmin = zmin.min(tgt.z[k]);
                        cnt += 1;
                    }
                }
            }
            let n = (s * s) as f64;
            image.set(x, y, [acc[0] / n, acc[1] / n, acc[2] / n]);
            if cnt > 0 {
                depth.set(x, y, zmin);
            }
        }
    }
    Ok(SceneRender { image, depth })
}

/// Color-weighted centroids of the four markers, in pixels.
pub fn measure_markers(img: &Image) -> [Option<[f64; 2]>; 4] {
    const RADIUS: f64 = 0.45;
    let mut acc = [[0.0f64; 3]; 4];
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(x, y).map(|v| v / img.peak);
            for (m, c) in MARKER_COLORS.iter().enumerate() {
                let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
                if d < RADIUS {
                    let wgt = 1.0 - d / RADIUS;
                    acc[m][0] += wgt * (x as f64 + 0.5);
                    acc[m][1] += wgt * (y as f64 + 0.5);
                    acc[m][2] += wgt;
                }
            }
        }
    }
    acc.map(|a| (a[2] > 0.0).then(|| [a[0] / a[2], a[1] / a[2]]))
}

/// Nose-wing marker span over eye marker span, measured in the image.
pub fn marker_ratio(img: &Image) -> Result<f64> {
    let m = measure_markers(img);
    let get = |i: usize| m[i].ok_or_else(|| Error::MissingLabels(format!("marker `{}` not visible", MARKER_LABELS[i])));
    let (el, er, nl, nr) = (get(0)?, get(1)?, get(2)?, get(3)?);
    let eyes = (el[0] - er[0]).hypot(el[1] - er[1]);
    if !(eyes > 0.0) {
        return Err(Error::DegenerateConfiguration("eye markers coincide".into()));
    }
    Ok((nl[0] - nr[0]).hypot(nl[1] - nr[1]) / eyes)
}
