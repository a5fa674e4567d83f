//! `undistort` command line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 input or validation error, 3 numerical
//! failure. Errors are printed to stderr as one JSON object.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use undistort::config::Config;
use undistort::facemodel::render_landmarks;
use undistort::image::Image;
use undistort::io;
use undistort::metrics::{evaluate_suite, EvalItem};
use undistort::scene::{render_scene, SceneSpec};
use undistort::solver::{solve, Ablation, InversionSolution};
use undistort::synth::{generate_with_model, suite_seeds, GroundTruth, SynthSpec};
use undistort::warpstitch::correct_portrait;
use undistort::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "undistort", version, about = "Recover camera distance from face landmarks and correct close-up portraits")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set schedule.lr_cam=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for batch work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic problems with ground truth.
    Synth(SynthArgs),
    /// Fit shape, pose, distance and focal length to a problem.
    Invert(InvertArgs),
    /// Re-render a portrait from a more distant virtual camera.
    Correct(CorrectArgs),
    /// Render a sequence of corrections at several distance scales.
    Dolly(DollyArgs),
    /// Compute image and landmark metrics over a manifest of pairs.
    Eval(EvalArgs),
    /// Run the ablation grid over a synthetic suite.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Base seed; instance i uses seed + i.
    #[arg(long, env = "UNDISTORT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Landmark noise standard deviation in normalized units.
    #[arg(long)]
    noise: Option<f64>,
    /// TOML file with generator settings.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Also render the near portrait, its depth, and a far reference view.
    #[arg(long)]
    render: bool,
    /// Distance multiple of the far reference view.
    #[arg(long, default_value_t = 4.0)]
    far_scale: f64,
}

#[derive(Args, Debug)]
struct InvertArgs {
    problem: PathBuf,
    #[arg(long, value_name = "SOLUTION.json")]
    out: PathBuf,
    /// Comma separated: no_reparam, no_near_init, no_schedule, no_all.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Args, Debug)]
struct CorrectArgs {
    problem: PathBuf,
    solution: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Distance multiple of the virtual camera.
    #[arg(long)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the fitted landmarks as seen from the virtual camera.
    #[arg(long, value_name = "FILE")]
    landmarks_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DollyArgs {
    problem: PathBuf,
    solution: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    scales: Vec<f64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON manifest of output/reference pairs.
    #[arg(long, value_name = "MANIFEST")]
    pairs: PathBuf,
    /// CSV report; a JSON mirror is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Variants to run; each is a comma-free ablation name.
    #[arg(long, value_delimiter = ',', default_value = "full,no_schedule,no_reparam,no_near_init,no_all")]
    variants: Vec<String>,
}

// ------------------------------------------------------------------ helpers

fn resolve_config(g: &Global) -> Result<Config> {
    let base = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    base.with_overrides(&g.set)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_config(path: &Path, cfg: &Config) -> Result<()> {
    io::write_atomic(path, cfg.to_toml_string().as_bytes())
}

// -------------------------------------------------------------------- synth

/// Index of a synthetic suite directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteIndex {
    base_seed: u64,
    spec: SynthSpec,
    model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far_scale: Option<f64>,
    instances: Vec<SuiteEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteEntry {
    id: String,
    seed: u64,
    problem: String,
    truth: String,
}

fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    spec.validate()?;
    if a.render && !(a.far_scale > 0.0 && a.far_scale.is_finite()) {
        return Err(Error::Invalid(format!("--far-scale {} must be positive", a.far_scale)));
    }
    ensure_dir(&a.out)?;
    let model = Arc::new(spec.model()?);
    io::write_model(a.out.join("model.json"), &model)?;
    let limits = cfg.limits;
    let entries: Vec<SuiteEntry> = suite_seeds(a.seed, a.count)
        .into_par_iter()
        .map(|seed| -> Result<SuiteEntry> {
            let inst = generate_with_model(model.clone(), seed, &spec)?;
            let id = format!("inst_{seed}");
            let problem = format!("{id}.json");
            let truth = format!("{id}.truth.json");
            let pf = io::ProblemFile::from_landmarks(&inst.observed, spec.width, spec.height, "model.json");
            io::write_json(a.out.join(&problem), &pf)?;
            io::write_json(a.out.join(&truth), &inst.truth)?;
            if a.render {
                let cam = inst.truth.true_cam;
                let far_cam = cam.set_distance(a.far_scale * inst.truth.distance, &limits)?;
                let scene = SceneSpec::behind_face(&cam, 0.5);
                let near = render_scene(&model, &inst.truth.true_latent, &cam, &scene)?;
                let far = render_scene(&model, &inst.truth.true_latent, &far_cam, &scene)?;
                io::write_image(a.out.join(format!("{id}.png")), &near.image)?;
                io::write_depth(a.out.join(format!("{id}.depth.pfm")), &near.depth)?;
                io::write_image(a.out.join(format!("{id}.far.png")), &far.image)?;
                let far_lm = render_landmarks(&model, &inst.truth.true_latent, &far_cam, &limits)?;
                io::write_landmarks(a.out.join(format!("{id}.far.json")), &far_lm)?;
            }
            Ok(SuiteEntry {
                id,
                seed,
                problem,
                truth,
            })
        })
        .collect::<Result<_>>()?;
    let index = SuiteIndex {
        base_seed: a.seed,
        spec,
        model: "model.json".into(),
        far_scale: a.render.then_some(a.far_scale),
        instances: entries,
    };
    io::write_json(a.out.join("suite.json"), &index)?;
    write_config(&a.out.join("config.toml"), &cfg)
}

// ------------------------------------------------------------------- invert

fn invert(g: &Global, a: &InvertArgs) -> Result<()> {
    let loaded = io::read_problem(&a.problem)?;
    let mut problem = loaded.inversion_problem(&resolve_config(g)?)?;
    problem.config = problem.config.with_overrides(&g.set)?;
    if let Some(list) = &a.ablate {
        problem.config.schedule.ablation = Ablation::parse(list)?;
    }
    let sol = solve(&problem)?;
    ensure_parent(&a.out)?;
    io::write_solution(&a.out, &sol)?;
    write_config(&sibling(&a.out, "config.toml"), &problem.config)
}

// ------------------------------------------------------------ correct/dolly

struct Inputs {
    model: Arc<undistort::facemodel::FaceModel>,
    solution: InversionSolution,
    image: Image,
    depth: Option<undistort::image::DepthImage>,
    config: Config,
}

fn load_inputs(g: &Global, problem: &Path, solution: &Path, image: &Path, depth: Option<&Path>) -> Result<Inputs> {
    let loaded = io::read_problem(problem)?;
    let mut config = match &loaded.file.config {
        Some(v) => resolve_config(g)?.with_json_overrides(v)?,
        None => resolve_config(g)?,
    };
    config = config.with_overrides(&g.set)?;
    let solution = io::read_solution(solution)?;
    if solution.latent.w.len() != loaded.model.latent_dim() {
        return Err(Error::DimensionMismatch(format!(
            "solution has {} latent coefficients, model has {}",
            solution.latent.w.len(),
            loaded.model.latent_dim()
        )));
    }
    let image = io::read_image(image)?;
    let depth = depth.map(io::read_depth).transpose()?;
    Ok(Inputs {
        model: loaded.model,
        solution,
        image,
        depth,
        config,
    })
}

fn correct(g: &Global, a: &CorrectArgs) -> Result<()> {
    let inp = load_inputs(g, &a.problem, &a.solution, &a.image, a.depth.as_deref())?;
    let c = correct_portrait(
        &inp.image,
        inp.depth.as_ref(),
        &inp.model,
        &inp.solution,
        a.scale,
        &inp.config.warp,
        &inp.config.limits,
    )?;
    ensure_parent(&a.out)?;
    io::write_image(&a.out, &c.image)?;
    if let Some(p) = &a.landmarks_out {
        ensure_parent(p)?;
        io::write_landmarks(p, &c.far_landmarks.to_normalized(inp.image.width, inp.image.height))?;
    }
    write_config(&sibling(&a.out, "config.toml"), &inp.config)
}

#[derive(Serialize)]
struct DollyFrame {
    file: String,
    scale: f64,
    distance: f64,
    focal: f64,
}

fn dolly(g: &Global, a: &DollyArgs) -> Result<()> {
    if a.scales.is_empty() {
        return Err(Error::Invalid("--scales is empty".into()));
    }
    let inp = load_inputs(g, &a.problem, &a.solution, &a.image, a.depth.as_deref())?;
    ensure_dir(&a.out)?;
    let frames: Vec<DollyFrame> = a
        .scales
        .par_iter()
        .enumerate()
        .map(|(i, &s)| -> Result<DollyFrame> {
            let c = correct_portrait(
                &inp.image,
                inp.depth.as_ref(),
                &inp.model,
                &inp.solution,
                s,
                &inp.config.warp,
                &inp.config.limits,
            )?;
            let file = format!("frame_{i:03}.png");
            io::write_image(a.out.join(&file), &c.image)?;
            Ok(DollyFrame {
                file,
                scale: s,
                distance: c.cam_far.distance(),
                focal: c.cam_far.focal(),
            })
        })
        .collect::<Result<_>>()?;
    io::write_json(a.out.join("frames.json"), &frames)?;
    write_config(&a.out.join("config.toml"), &inp.config)
}

// --------------------------------------------------------------------- eval

/// Evaluation manifest; paths are relative to the manifest.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    items: Vec<ManifestItem>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    id: String,
    #[serde(default)]
    output: Option<String>,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    output_landmarks: Option<String>,
    #[serde(default)]
    reference_landmarks: Option<String>,
    /// Image whose bright pixels select the evaluated region.
    #[serde(default)]
    mask: Option<String>,
    /// Landmark indices of the two eye centers.
    #[serde(default = "default_eyes")]
    eyes: [usize; 2],
}

fn default_eyes() -> [usize; 2] {
    [0, 1]
}

fn pair<T>(
    id: &str,
    what: &str,
    a: &Option<String>,
    b: &Option<String>,
    load: impl Fn(&str) -> Result<T>,
) -> Result<Option<(T, T)>> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Some((load(a)?, load(b)?))),
        (None, None) => Ok(None),
        _ => Err(Error::Invalid(format!("item `{id}` must give both or neither {what} files"))),
    }
}

fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let manifest: Manifest = io::read_json(&a.pairs)?;
    let dir = a.pairs.parent().unwrap_or(Path::new("")).to_path_buf();
    let items: Vec<EvalItem> = manifest
        .items
        .par_iter()
        .map(|m| -> Result<EvalItem> {
            let images = pair(&m.id, "image", &m.output, &m.reference, |p| io::read_image(dir.join(p)))?;
            let landmarks = pair(&m.id, "landmark", &m.output_landmarks, &m.reference_landmarks, |p| {
                io::read_landmarks(dir.join(p))
            })?;
            let mask = m
                .mask
                .as_ref()
                .map(|p| -> Result<Vec<bool>> {
                    let img = io::read_image(dir.join(p))?;
                    Ok(img.luma().iter().map(|v| *v > 0.5 * img.peak).collect())
                })
                .transpose()?;
            Ok(EvalItem {
                id: m.id.clone(),
                images,
                landmarks,
                eyes: (m.eyes[0], m.eyes[1]),
                mask,
            })
        })
        .collect::<Result<_>>()?;
    let report = evaluate_suite(&items, &cfg.metrics)?;
    ensure_parent(&a.out)?;
    io::write_atomic(&a.out, report.to_csv().as_bytes())?;
    io::write_atomic(sibling(&a.out, "json"), report.to_json().as_bytes())?;
    write_config(&sibling(&a.out, "config.toml"), &cfg)
}

// ------------------------------------------------------------------- ablate

#[derive(Debug, Serialize)]
struct VariantSummary {
    variant: String,
    runs: usize,
    failed: usize,
    median_rel_err: Option<f64>,
    mean_rel_err: Option<f64>,
    q25_rel_err: Option<f64>,
    q75_rel_err: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn ablate(g: &Global, a: &AblateArgs) -> Result<()> {
    let base = resolve_config(g)?;
    let index: SuiteIndex = io::read_json(a.suite.join("suite.json"))?;
    let variants: Vec<(String, Ablation)> = a
        .variants
        .iter()
        .map(|v| Ok((v.clone(), Ablation::parse(v)?)))
        .collect::<Result<_>>()?;
    let problems: Vec<(String, io::LoadedProblem, GroundTruth)> = index
        .instances
        .iter()
        .map(|e| {
            Ok((
                e.id.clone(),
                io::read_problem(a.suite.join(&e.problem))?,
                io::read_json(a.suite.join(&e.truth))?,
            ))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..problems.len()).map(move |p| (v, p)))
        .collect();
    let rows: Vec<(usize, String, f64, Result<f64>)> = jobs
        .par_iter()
        .map(|&(v, p)| {
            let (id, loaded, truth) = &problems[p];
            let d_hat = loaded.inversion_problem(&base).and_then(|mut prob| {
                prob.config = prob.config.with_overrides(&g.set)?;
                prob.config.schedule.ablation = variants[v].1;
                solve(&prob).map(|s| s.distance)
            });
            (v, id.clone(), truth.distance, d_hat)
        })
        .collect();
    let mut csv = String::from("variant,id,d_true,d_hat,rel_err,error\n");
    let mut summaries = Vec::new();
    for (v, (name, _)) in variants.iter().enumerate() {
        let mut errs = Vec::new();
        let mut failed = 0;
        for (_, id, d_true, d_hat) in rows.iter().filter(|r| r.0 == v) {
            match d_hat {
                Ok(d) => {
                    let rel = (d - d_true).abs() / d_true;
                    errs.push(rel);
                    csv.push_str(&format!("{name},{id},{d_true},{d},{rel},\n"));
                }
                Err(e) => {
                    failed += 1;
                    csv.push_str(&format!("{name},{id},{d_true},,,{}\n", e.kind()));
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        summaries.push(VariantSummary {
            variant: name.clone(),
            runs: errs.len() + failed,
            failed,
            median_rel_err: quantile(&errs, 0.5),
            mean_rel_err: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
            q25_rel_err: quantile(&errs, 0.25),
            q75_rel_err: quantile(&errs, 0.75),
        });
    }
    ensure_parent(&a.out)?;
    io::write_atomic(&a.out, csv.as_bytes())?;
    io::write_json(sibling(&a.out, "summary.json"), &summaries)?;
    write_config(&sibling(&a.out, "config.toml"), &base)
}

// --------------------------------------------------------------------- main

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn report(kind: &str, message: &str, code: u8, offset: Option<u64>) {
    let mut v = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    if let Some(o) = offset {
        v["offset"] = o.into();
    }
    eprintln!("{v}");
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(Error::Invalid("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("cannot start {n} worker threads: {e}")))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Invert(a) => invert(g, a),
        Command::Correct(a) => correct(g, a),
        Command::Dolly(a) => dolly(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Ablate(a) => ablate(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim_end(), 1, None);
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let offset = match &e {
                Error::Parse { offset, .. } => Some(*offset),
                _ => None,
            };
            report(e.kind(), &e.to_string(), code, offset);
            ExitCode::from(code)
        }
    }
}
