//! File formats: PNG/PPM images, PFM and 16-bit PNG depth maps, the model
//! header plus binary arrays, problem files and solution/trace JSON.
//!
//! All writers go through [`write_atomic`].

use std::cell::Cell;
use std::fs;
use std::io::{BufRead, Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::facemodel::FaceModel;
use crate::geometry::CameraState;
use crate::image::{DepthImage, Image};
use crate::landmarks::LandmarkSet;
use crate::solver::{InversionProblem, InversionSolution, TraceEntry};

/// Detector sigma used when a problem file does not give one.
pub const DEFAULT_DETECTOR_SIGMA: f64 = 0.01;

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(what: &str, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        what: what.to_string(),
        offset,
        message: message.into(),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

// ------------------------------------------------------------------- images

/// In-memory reader that records how far the decoder got.
struct Counting<'a> {
    inner: Cursor<&'a [u8]>,
    high: Rc<Cell<u64>>,
}

impl Counting<'_> {
    fn note(&self) {
        let p = self.inner.position();
        if p > self.high.get() {
            self.high.set(p);
        }
    }
}

impl Read for Counting<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.note();
        Ok(n)
    }
}

impl BufRead for Counting<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.note();
    }
}

impl Seek for Counting<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        let p = self.inner.seek(pos)?;
        self.note();
        Ok(p)
    }
}

/// Decode an 8- or 16-bit PNG. Gray and alpha channels are expanded or
/// dropped; the peak is 255 or 65535.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let high = Rc::new(Cell::new(0));
    let reader = Counting {
        inner: Cursor::new(bytes),
        high: high.clone(),
    };
    let fail = |e: png::DecodingError| parse_err("png", high.get(), e.to_string());
    let mut dec = png::Decoder::new(reader);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut r = dec.read_info().map_err(fail)?;
    let size = r
        .output_buffer_size()
        .ok_or_else(|| parse_err("png", high.get(), "image too large"))?;
    let mut buf = vec![0; size];
    let info = r.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width, info.height);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let peak = if wide { 65535.0 } else { 255.0 };
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64
        } else {
            buf[i] as f64
        }
    };
    let mut img = Image::new(w, h, peak);
    for y in 0..h {
        for x in 0..w {
            let base = (y as usize * info.line_size / if wide { 2 } else { 1 }) + x as usize * channels;
            let px = if channels >= 3 {
                [sample(base), sample(base + 1), sample(base + 2)]
            } else {
                let g = sample(base);
                [g, g, g]
            };
            img.set(x, y, px);
        }
    }
    Ok(img)
}

fn quantize8(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .map(|v| (v / img.peak * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encode as 8-bit RGB PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Invalid(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&quantize8(img)).map_err(fail)?;
        w.finish().map_err(fail)?;
    }
    Ok(out)
}

/// Binary PPM (P6), maxval up to 65535.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(String, u64)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err("ppm", start as u64, "unexpected end of header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start as u64))
    };
    let (magic, _) = token(&mut pos)?;
    if magic != "P6" {
        return Err(parse_err("ppm", 0, format!("expected P6, found `{magic}`")));
    }
    let num = |pos: &mut usize| -> Result<u32> {
        let (t, at) = token(pos)?;
        t.parse::<u32>()
            .map_err(|_| parse_err("ppm", at, format!("expected a number, found `{t}`")))
    };
    let (w, h, maxval) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(parse_err("ppm", pos as u64, format!("bad header {w}x{h} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w as usize * h as usize * 3 * bps;
    if bytes.len() < pos + need {
        return Err(parse_err(
            "ppm",
            bytes.len() as u64,
            format!("raster truncated: {} of {need} bytes", bytes.len().saturating_sub(pos)),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let data = (0..w as usize * h as usize * 3)
        .map(|i| {
            if bps == 2 {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
            } else {
                raster[i] as f64
            }
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        peak: maxval as f64,
        data,
    })
}

/// Encode as 8-bit P6.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(quantize8(img));
    out
}

/// Read a PNG or PPM image, chosen by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match extension(path).as_str() {
        "png" => decode_png(&bytes),
        "ppm" | "pnm" => decode_ppm(&bytes),
        e => Err(Error::Invalid(format!("unsupported image extension `{e}` on {}", path.display()))),
    }
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => encode_png(img)?,
        "ppm" | "pnm" => encode_ppm(img),
        e => return Err(Error::Invalid(format!("unsupported image extension `{e}` on {}", path.display()))),
    };
    write_atomic(path, &bytes)
}

// -------------------------------------------------------------------- depth

/// Little-endian single-channel PFM, rows stored bottom to top. Invalid
/// pixels are written as 0.
pub fn encode_pfm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Read `Pf` or `PF` (first channel) with either byte order; zero and
/// non-finite samples are invalid.
pub fn decode_pfm(bytes: &[u8]) -> Result<DepthImage> {
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<(String, u64)> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(parse_err("pfm", start as u64, "unterminated header line"));
        }
        let s = String::from_utf8_lossy(&bytes[start..*pos]).trim().to_string();
        *pos += 1;
        Ok((s, start as u64))
    };
    let (magic, _) = line(&mut pos)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(parse_err("pfm", 0, format!("expected Pf or PF, found `{magic}`"))),
    };
    let (dims, at) = line(&mut pos)?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let (w, h) = match parts.as_slice() {
        [a, b] => (
            a.parse::<u32>().map_err(|_| parse_err("pfm", at, format!("bad width `{a}`")))?,
            b.parse::<u32>().map_err(|_| parse_err("pfm", at, format!("bad height `{b}`")))?,
        ),
        _ => return Err(parse_err("pfm", at, format!("bad dimensions `{dims}`"))),
    };
    if w == 0 || h == 0 {
        return Err(parse_err("pfm", at, "zero dimension"));
    }
    let (scale, at) = line(&mut pos)?;
    let scale: f64 = scale
        .parse()
        .map_err(|_| parse_err("pfm", at, format!("bad scale `{scale}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err("pfm", at, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let need = w as usize * h as usize * channels * 4;
    if bytes.len() < pos + need {
        return Err(parse_err(
            "pfm",
            bytes.len() as u64,
            format!("raster truncated: {} of {need} bytes", bytes.len() - pos),
        ));
    }
    let mut depth = DepthImage::new(w, h);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            let k = pos + ((row as usize * w as usize + x as usize) * channels) * 4;
            let b = [bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            depth.set(x, y, v as f64);
        }
    }
    Ok(depth)
}

/// Sidecar of a 16-bit PNG depth map: `depth = value * scale`, value 0 is
/// invalid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthScale {
    /// Meters per count.
    pub scale: f64,
}

pub fn depth_sidecar_path(png: &Path) -> PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_depth_png(depth: &DepthImage, scale: f64) -> Result<Vec<u8>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid(format!("depth scale {scale} must be positive")));
    }
    let mut raw = Vec::with_capacity(depth.depth.len() * 2);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let v = match depth.get(x, y) {
                Some(z) => {
                    let q = (z / scale).round();
                    if q > 65535.0 {
                        return Err(Error::Invalid(format!(
                            "depth {z} at ({x}, {y}) exceeds the 16-bit range at scale {scale}"
                        )));
                    }
                    q.max(1.0) as u16
                }
                None => 0,
            };
            raw.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, depth.width, depth.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let fail = |e: png::EncodingError| Error::Invalid(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&raw).map_err(fail)?;
        w.finish().map_err(fail)?;
    }
    Ok(out)
}

pub fn decode_depth_png(bytes: &[u8], scale: DepthScale) -> Result<DepthImage> {
    if !(scale.scale > 0.0) || !scale.scale.is_finite() {
        return Err(Error::Invalid(format!("depth scale {} must be positive", scale.scale)));
    }
    let img = decode_png(bytes)?;
    if img.peak != 65535.0 {
        return Err(Error::Invalid("depth PNG must be 16-bit".into()));
    }
    Ok(DepthImage::from_fn(img.width, img.height, |x, y| {
        let v = img.get(x, y)[0];
        (v > 0.0).then(|| v * scale.scale)
    }))
}

/// Read a PFM, or a 16-bit PNG with its `.json` sidecar.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => decode_pfm(&read_bytes(path)?),
        "png" => {
            let side = depth_sidecar_path(path);
            let scale: DepthScale = read_json(&side)?;
            decode_depth_png(&read_bytes(path)?, scale)
        }
        e => Err(Error::Invalid(format!("unsupported depth extension `{e}` on {}", path.display()))),
    }
}

/// Write a PFM, or a 16-bit PNG plus sidecar using 0.1 mm per count.
pub fn write_depth(path: impl AsRef<Path>, depth: &DepthImage) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => write_atomic(path, &encode_pfm(depth)),
        "png" => {
            let scale = DepthScale { scale: 1e-4 };
            write_atomic(path, &encode_depth_png(depth, scale.scale)?)?;
            write_json(depth_sidecar_path(path), &scale)
        }
        e => Err(Error::Invalid(format!("unsupported depth extension `{e}` on {}", path.display()))),
    }
}

// --------------------------------------------------------------------- JSON

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(v)?.as_bytes())
}

fn json_parse_err(path: &Path, bytes: &[u8], e: serde_json::Error) -> Error {
    // Byte offset of the reported line and column.
    let mut offset = 0usize;
    for (i, l) in bytes.split(|b| *b == b'\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1).min(l.len());
            break;
        }
        offset += l.len() + 1;
    }
    parse_err(&path.display().to_string(), offset as u64, e.to_string())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| json_parse_err(path, &bytes, e))
}

// -------------------------------------------------------------------- model

/// JSON header of a model file; the arrays live in `data_file`, relative to
/// the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub n_landmarks: usize,
    pub latent_dim: usize,
    pub eye_indices: [usize; 2],
    pub labels: Vec<String>,
    pub data_file: String,
}

/// Write `path` (header) and `<stem>.bin`: the mean shape (`N x 3`) then the
/// basis (`K x N x 3`), little-endian f64, row-major.
pub fn write_model(path: impl AsRef<Path>, model: &FaceModel) -> Result<()> {
    let path = path.as_ref();
    let data = path.with_extension("bin");
    let header = ModelHeader {
        n_landmarks: model.n_landmarks(),
        latent_dim: model.latent_dim(),
        eye_indices: [model.eye_indices().0, model.eye_indices().1],
        labels: model.labels().to_vec(),
        data_file: data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut bin = Vec::with_capacity(8 * (model.mean().len() + model.basis_rows().len()));
    for v in model.mean().iter().chain(model.basis_rows()) {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&data, &bin)?;
    write_json(path, &header)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FaceModel> {
    let path = path.as_ref();
    let header: ModelHeader = read_json(path)?;
    let data = path.parent().unwrap_or(Path::new("")).join(&header.data_file);
    let bin = read_bytes(&data)?;
    let n = header.n_landmarks;
    let k = header.latent_dim;
    let need = 8 * 3 * n * (k + 1);
    if bin.len() != need {
        return Err(parse_err(
            &data.display().to_string(),
            bin.len().min(need) as u64,
            format!("expected {need} bytes for {n} landmarks and {k} basis vectors, found {}", bin.len()),
        ));
    }
    let vals: Vec<f64> = bin
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (mean, basis) = vals.split_at(3 * n);
    FaceModel::new(
        mean.to_vec(),
        basis.to_vec(),
        k,
        (header.eye_indices[0], header.eye_indices[1]),
        header.labels,
    )
}

// ------------------------------------------------------------------ problem

/// One shared sigma or one per landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Shared(f64),
    PerLandmark(Vec<f64>),
}

/// Input of an inversion: observed landmarks (normalized to `[0, 1]`) and
/// the model to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub landmarks: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_sigma: Option<SigmaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_camera: Option<CameraState>,
    /// Model header path, relative to the problem file.
    pub model_path: String,
    /// Partial configuration merged over the run configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ProblemFile {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::InvalidDimensions("image_size must be non-zero".into()));
        }
        if let Some(i) = self
            .landmarks
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(Error::Invalid(format!(
                "landmark {i} at {:?} is outside [0, 1]",
                self.landmarks[i]
            )));
        }
        self.landmark_set().map(|_| ())
    }

    pub fn landmark_set(&self) -> Result<LandmarkSet> {
        let n = self.landmarks.len();
        let visibility = self.visibility.clone().unwrap_or_else(|| vec![true; n]);
        let sigma = match &self.detector_sigma {
            None => vec![DEFAULT_DETECTOR_SIGMA; n],
            Some(SigmaSpec::Shared(s)) => vec![*s; n],
            Some(SigmaSpec::PerLandmark(v)) => v.clone(),
        };
        LandmarkSet::new(self.landmarks.clone(), visibility, sigma)
    }

    pub fn from_landmarks(landmarks: &LandmarkSet, width: u32, height: u32, model_path: &str) -> Self {
        let shared = landmarks.sigma.iter().all(|s| *s == landmarks.sigma[0]);
        ProblemFile {
            image_size: [width, height],
            landmarks: landmarks.points.clone(),
            visibility: (!landmarks.visibility.iter().all(|v| *v)).then(|| landmarks.visibility.clone()),
            detector_sigma: Some(if shared && !landmarks.sigma.is_empty() {
                SigmaSpec::Shared(landmarks.sigma[0])
            } else {
                SigmaSpec::PerLandmark(landmarks.sigma.clone())
            }),
            init_camera: None,
            model_path: model_path.to_string(),
            config: None,
        }
    }
}

/// A loaded problem with its model resolved relative to the file.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub file: ProblemFile,
    pub model: Arc<FaceModel>,
    pub model_path: PathBuf,
}

impl LoadedProblem {
    /// Assemble the solver input: `base` with the file's overrides merged in.
    pub fn inversion_problem(&self, base: &Config) -> Result<InversionProblem> {
        let config = match &self.file.config {
            Some(v) => base.with_json_overrides(v)?,
            None => *base,
        };
        let [w, h] = self.file.image_size;
        let p = InversionProblem::new(self.file.landmark_set()?, self.model.clone(), w, h, config)?;
        Ok(match self.file.init_camera {
            Some(cam) => p.with_init_camera(cam),
            None => p,
        })
    }
}

pub fn read_problem(path: impl AsRef<Path>) -> Result<LoadedProblem> {
    let path = path.as_ref();
    let file: ProblemFile = read_json(path)?;
    file.validate()?;
    let model_path = path.parent().unwrap_or(Path::new("")).join(&file.model_path);
    let model = Arc::new(read_model(&model_path)?);
    Ok(LoadedProblem {
        file,
        model,
        model_path,
    })
}

/// Landmarks from any JSON document with a `landmarks` array (and optional
/// `visibility`), such as a problem file.
#[derive(Debug, Clone, Deserialize)]
struct LandmarkDoc {
    landmarks: Vec<[f64; 2]>,
    #[serde(default)]
    visibility: Option<Vec<bool>>,
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let doc: LandmarkDoc = read_json(path)?;
    let n = doc.landmarks.len();
    LandmarkSet::new(
        doc.landmarks,
        doc.visibility.unwrap_or_else(|| vec![true; n]),
        vec![DEFAULT_DETECTOR_SIGMA; n],
    )
}

/// Write normalized landmarks as `{landmarks, visibility}`.
pub fn write_landmarks(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        landmarks: &'a [[f64; 2]],
        visibility: &'a [bool],
    }
    write_json(
        path,
        &Doc {
            landmarks: &set.points,
            visibility: &set.visibility,
        },
    )
}

// ----------------------------------------------------------------- solution

/// Trace file written next to a solution: `<solution stem>.trace.jsonl`.
pub fn trace_path(solution: &Path) -> PathBuf {
    solution.with_extension("trace.jsonl")
}

/// Solution JSON without the trace.
pub fn solution_json(sol: &InversionSolution) -> Result<String> {
    to_json_pretty(&sol.without_trace())
}

pub fn trace_jsonl(trace: &[TraceEntry]) -> Result<String> {
    let mut out = String::new();
    for e in trace {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Invalid(format!("serialization failed: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

/// Write the solution and its trace.
pub fn write_solution(path: impl AsRef<Path>, sol: &InversionSolution) -> Result<()> {
    let path = path.as_ref();
    write_atomic(trace_path(path), trace_jsonl(&sol.loss_trace)?.as_bytes())?;
    write_atomic(path, solution_json(sol)?.as_bytes())
}

pub fn read_solution(path: impl AsRef<Path>) -> Result<InversionSolution> {
    read_json(path)
}
