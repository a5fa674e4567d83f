//! Evaluation: similarity alignment, normalized landmark error, PSNR and
//! SSIM, and a suite runner with CSV/JSON reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::config::MetricsConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::LandmarkSet;

/// `p -> scale * R(angle) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub angle: f64,
    pub translation: [f64; 2],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    /// Linear part as `[[a, -b], [b, a]]` with `a = s cos`, `b = s sin`.
    fn ab(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.scale * c, self.scale * s)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (a, b) = self.ab();
        [
            a * p[0] - b * p[1] + self.translation[0],
            b * p[0] + a * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::DegenerateConfiguration(format!("scale {} is not invertible", self.scale)));
        }
        let inv = SimilarityTransform {
            scale: 1.0 / self.scale,
            angle: -self.angle,
            translation: [0.0, 0.0],
        };
        let t = inv.apply(self.translation);
        Ok(SimilarityTransform {
            translation: [-t[0], -t[1]],
            ..inv
        })
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &SimilarityTransform) -> Self {
        let t = self.apply(first.translation);
        SimilarityTransform {
            scale: self.scale * first.scale,
            angle: self.angle + first.angle,
            translation: t,
        }
    }
}

fn paired(src: &LandmarkSet, dst: &LandmarkSet) -> Result<Vec<([f64; 2], [f64; 2])>> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} landmarks",
            src.len(),
            dst.len()
        )));
    }
    Ok((0..src.len())
        .filter(|&i| src.visibility[i] && dst.visibility[i])
        .map(|i| (src.points[i], dst.points[i]))
        .collect())
}

/// Least-squares similarity taking `src` onto `dst` over the landmarks
/// visible in both, and the RMS residual after alignment.
pub fn procrustes_align(src: &LandmarkSet, dst: &LandmarkSet) -> Result<(SimilarityTransform, f64)> {
    let pairs = paired(src, dst)?;
    if pairs.len() < 2 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} shared landmarks, need at least 2",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let (mut ms, mut md) = ([0.0; 2], [0.0; 2]);
    for (s, d) in &pairs {
        ms = [ms[0] + s[0] / n, ms[1] + s[1] / n];
        md = [md[0] + d[0] / n, md[1] + d[1] / n];
    }
    let (mut ss, mut sd, mut dot, mut cross) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in &pairs {
        let a = [s[0] - ms[0], s[1] - ms[1]];
        let b = [d[0] - md[0], d[1] - md[1]];
        ss += a[0] * a[0] + a[1] * a[1];
        sd += b[0] * b[0] + b[1] * b[1];
        dot += a[0] * b[0] + a[1] * b[1];
        cross += a[0] * b[1] - a[1] * b[0];
    }
    let scale_ref = ms[0].abs().max(ms[1].abs()).max(md[0].abs()).max(md[1].abs()).max(1.0);
    let tiny = 1e-24 * scale_ref * scale_ref * n;
    if ss <= tiny || sd <= tiny {
        return Err(Error::DegenerateConfiguration("all points coincide".into()));
    }
    let angle = cross.atan2(dot);
    let scale = dot.hypot(cross) / ss;
    let mut t = SimilarityTransform {
        scale,
        angle,
        translation: [0.0, 0.0],
    };
    let m = t.apply(ms);
    t.translation = [md[0] - m[0], md[1] - m[1]];
    let rss: f64 = pairs
        .iter()
        .map(|(s, d)| {
            let p = t.apply(*s);
            (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
        })
        .sum();
    Ok((t, (rss / n).sqrt()))
}

/// Mean landmark distance after aligning `output` onto `reference`, over the
/// reference interocular distance (`eyes` are landmark indices).
pub fn landmark_error(output: &LandmarkSet, reference: &LandmarkSet, eyes: (usize, usize)) -> Result<f64> {
    let pairs = paired(output, reference)?;
    let (l, r) = eyes;
    if l >= reference.len() || r >= reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "eye indices ({l}, {r}) outside {} landmarks",
            reference.len()
        )));
    }
    let iod = (reference.points[l][0] - reference.points[r][0]).hypot(reference.points[l][1] - reference.points[r][1]);
    if !(iod > 0.0) {
        return Err(Error::DegenerateConfiguration("reference eyes coincide".into()));
    }
    let (t, _) = procrustes_align(output, reference)?;
    let total: f64 = pairs
        .iter()
        .map(|(o, r)| {
            let p = t.apply(*o);
            (p[0] - r[0]).hypot(p[1] - r[1])
        })
        .sum();
    Ok(total / pairs.len() as f64 / iod)
}

/// Peak signal-to-noise ratio in dB; identical inputs are `Infinite`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Finite(v) => *v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid psnr `{s}`"))),
        }
    }
}

fn check_pair(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<()> {
    b.check_same_size(a.width, a.height)?;
    if a.peak != b.peak {
        return Err(Error::DimensionMismatch(format!("peaks {} and {} differ", a.peak, b.peak)));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} samples for {} pixels",
                m.len(),
                a.len()
            )));
        }
    }
    Ok(())
}

/// PSNR over all channels of the masked pixels (the whole frame without a
/// mask).
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<Psnr> {
    check_pair(a, b, mask)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[3 * i + c] - b.data[3 * i + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::Invalid("mask selects no pixels".into()));
    }
    if sum == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let mse = sum / count as f64;
    Ok(Psnr::Finite(10.0 * (a.peak * a.peak / mse).log10()))
}

/// Normalized 1D Gaussian of odd length `size`.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Separable filtering over fully contained windows only.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut tmp = vec![0.0; ow * height];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channels over windows fully inside the image. With
/// a mask, only windows centered on masked pixels count.
pub fn ssim(a: &Image, b: &Image, mask: Option<&[bool]>, cfg: &MetricsConfig) -> Result<f64> {
    check_pair(a, b, mask)?;
    let size = cfg.ssim_window;
    let (w, h) = (a.width as usize, a.height as usize);
    if size % 2 == 0 || w < size || h < size {
        return Err(Error::InvalidDimensions(format!(
            "{w}x{h} image is smaller than the {size}x{size} window"
        )));
    }
    let k = gaussian_window(size, cfg.ssim_sigma);
    let (x, y) = (a.luma(), b.luma());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|d| filter_valid(d, w, h, &k));
    let c1 = (cfg.ssim_k1 * a.peak).powi(2);
    let c2 = (cfg.ssim_k2 * a.peak).powi(2);
    let (ow, oh) = (w + 1 - size, h + 1 - size);
    let r = size / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for j in 0..oh {
        for i in 0..ow {
            if mask.is_some_and(|m| !m[(j + r) * w + i + r]) {
                continue;
            }
            let t = j * ow + i;
            let (ma, mb) = (mx[t], my[t]);
            let va = sxx[t] - ma * ma;
            let vb = syy[t] - mb * mb;
            let cov = sxy[t] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("mask selects no SSIM windows".into()));
    }
    Ok(total / count as f64)
}

/// One output/reference pair. Either part may be absent; the matching
/// metrics are then left empty.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub images: Option<(Image, Image)>,
    pub landmarks: Option<(LandmarkSet, LandmarkSet)>,
    pub eyes: (usize, usize),
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    pub lmk_e: Option<f64>,
    pub psnr_db: Option<Psnr>,
    pub ssim: Option<f64>,
    /// Always empty; kept so tables line up with perceptual-metric reports.
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub items: Vec<ItemReport>,
    /// Means over the items where each metric is available. PSNR averages
    /// finite values only and counts infinite ones separately.
    pub mean: ItemReport,
    pub infinite_psnr: usize,
    pub failed: usize,
}

fn evaluate_item(item: &EvalItem, cfg: &MetricsConfig) -> ItemReport {
    let mut rep = ItemReport {
        id: item.id.clone(),
        lmk_e: None,
        psnr_db: None,
        ssim: None,
        lpips: None,
        error: None,
    };
    let run = |rep: &mut ItemReport| -> Result<()> {
        if let Some((out, reference)) = &item.landmarks {
            rep.lmk_e = Some(landmark_error(out, reference, item.eyes)?);
        }
        if let Some((out, reference)) = &item.images {
            let mask = item.mask.as_deref();
            rep.psnr_db = Some(psnr(out, reference, mask)?);
            rep.ssim = Some(ssim(out, reference, mask, cfg)?);
        }
        Ok(())
    };
    if let Err(e) = run(&mut rep) {
        rep.error = Some(format!("{}: {e}", e.kind()));
    }
    rep
}

/// Evaluate every item in parallel. Item failures are recorded in the report
/// rather than aborting the suite; the order follows `items`.
pub fn evaluate_suite(items: &[EvalItem], cfg: &MetricsConfig) -> Result<SuiteReport> {
    if items.is_empty() {
        return Err(Error::Invalid("evaluation suite is empty".into()));
    }
    let reports: Vec<ItemReport> = items.par_iter().map(|it| evaluate_item(it, cfg)).collect();
    let mean_of = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let ok = || reports.iter().filter(|r| r.error.is_none());
    let finite: Vec<f64> = ok()
        .filter_map(|r| match r.psnr_db {
            Some(Psnr::Finite(v)) => Some(v),
            _ => None,
        })
        .collect();
    let infinite_psnr = ok().filter(|r| r.psnr_db == Some(Psnr::Infinite)).count();
    let with_psnr = ok().filter(|r| r.psnr_db.is_some()).count();
    let psnr_mean = if finite.is_empty() && infinite_psnr > 0 && infinite_psnr == with_psnr {
        Some(Psnr::Infinite)
    } else {
        mean_of(finite).map(Psnr::Finite)
    };
    let mean = ItemReport {
        id: "mean".into(),
        lmk_e: mean_of(ok().filter_map(|r| r.lmk_e).collect()),
        psnr_db: psnr_mean,
        ssim: mean_of(ok().filter_map(|r| r.ssim).collect()),
        lpips: None,
        error: None,
    };
    let failed = reports.iter().filter(|r| r.error.is_some()).count();
    Ok(SuiteReport {
        items: reports,
        mean,
        infinite_psnr,
        failed,
    })
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, v);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= p as i32 {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    }
}

fn round_sig(v: f64) -> f64 {
    if v.is_finite() {
        format_sig(v, 6).parse().unwrap_or(v)
    } else {
        v
    }
}

impl ItemReport {
    fn csv_row(&self) -> String {
        let num = |v: Option<f64>| v.map(|x| format_sig(x, 6)).unwrap_or_default();
        let psnr = match self.psnr_db {
            Some(Psnr::Finite(v)) => format_sig(v, 6),
            Some(Psnr::Infinite) => "inf".into(),
            None => String::new(),
        };
        format!("{},{},{},{},", csv_field(&self.id), num(self.lmk_e), psnr, num(self.ssim))
    }

    fn rounded(&self) -> ItemReport {
        ItemReport {
            lmk_e: self.lmk_e.map(round_sig),
            psnr_db: self.psnr_db.map(|p| match p {
                Psnr::Finite(v) => Psnr::Finite(round_sig(v)),
                Psnr::Infinite => Psnr::Infinite,
            }),
            ssim: self.ssim.map(round_sig),
            ..self.clone()
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "id,lmk_e,psnr_db,ssim,lpips";

impl SuiteReport {
    /// Per-item rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.items.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// JSON mirror of the CSV with the same six-digit rounding.
    pub fn to_json(&self) -> String {
        let rounded = SuiteReport {
            items: self.items.iter().map(ItemReport::rounded).collect(),
            mean: self.mean.rounded(),
            ..self.clone()
        };
        serde_json::to_string_pretty(&rounded).expect("report serializes")
    }
}
