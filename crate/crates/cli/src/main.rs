//! `sstm`: self-test, toy training, inference, evaluation, synthetic data
//! export and flow visualization.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use sstm_core::autodiff::inject_bilinear_sign_flip;
use sstm_core::checkpoint;
use sstm_core::checks::{self, Suite};
use sstm_core::config::{parse_kv, ModelConfig, Variant, WarmStart};
use sstm_core::flow_io::{self, FlowFile};
use sstm_core::metrics::{self, Mask, RegionSpec};
use sstm_core::model::{warm_start_init, Model};
use sstm_core::synth::{Dataset, SceneDistribution};
use sstm_core::train::{self, TrainOptions};
use sstm_core::update::{FlowPair, Resolution};
use sstm_core::Tensor;

#[derive(Parser)]
#[command(name = "sstm", version, about = "Multi-frame optical flow with spatiotemporal encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run gradient, oracle and invariant checks.
    Selftest {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Override every check's tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train the toy model on synthetic scenes.
    Train {
        /// key=value file with model, training and `data.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict the two flows of a frame triplet.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 3, value_names = ["F1", "F2", "F3"])]
        frames: Vec<PathBuf>,
        #[arg(long, default_value = "none")]
        warm_start: String,
        /// Frame 2 → 3 flow of the previous triplet, for `shift_pair`.
        #[arg(long)]
        prev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted flow against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Occlusion mask PNG (non-black pixels are occluded).
        #[arg(long)]
        occ: Option<PathBuf>,
        /// Comma-separated bands such as `d0-10,d10-60,d60+`.
        #[arg(long)]
        bands: Option<String>,
    },
    /// Export synthetic scenes with ground truth.
    Synth {
        /// key=value scene distribution file.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Colour-code a flow file.
    Viz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Magnitude mapped to full saturation; defaults to the maximum.
        #[arg(long)]
        max_rad: Option<f32>,
    },
}

/// Bad flags or config values; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::Selftest { suite, tol, inject_fault } => selftest(&suite, tol, inject_fault.as_deref()),
        Cmd::Train { config, steps, out, variant, seed } => {
            train_cmd(config.as_deref(), steps, &out, variant.as_deref(), seed)
        }
        Cmd::Infer { ckpt, frames, warm_start, prev, out } => {
            infer(&ckpt, &frames, &warm_start, prev.as_deref(), &out)
        }
        Cmd::Eval { pred, gt, occ, bands } => eval(&pred, &gt, occ.as_deref(), bands.as_deref()),
        Cmd::Synth { spec, count, out, seed } => synth(spec.as_deref(), count, &out, seed),
        Cmd::Viz { flow, out, max_rad } => viz(&flow, &out, max_rad),
    }
    .map(|()| Outcome::Ok)
    .or_else(|e| match e.downcast_ref::<ChecksFailed>() {
        Some(_) => Ok(Outcome::ChecksFailed),
        None => Err(e),
    })
}

#[derive(Debug)]
struct ChecksFailed;

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("checks failed")
    }
}

impl std::error::Error for ChecksFailed {}

fn log_config(pairs: impl IntoIterator<Item = (String, String)>) {
    for (k, v) in pairs {
        eprintln!("config {k}={v}");
    }
}

fn selftest(suite: &str, tol: Option<f64>, fault: Option<&str>) -> Result<()> {
    let suite: Suite = suite.parse().map_err(|e| usage(format!("{e}")))?;
    if let Some(t) = tol {
        if !(t > 0.0) {
            return Err(usage("--tol must be positive"));
        }
    }
    match fault {
        None => {}
        Some("bilinear-sign") => inject_bilinear_sign_flip(true),
        Some(other) => return Err(usage(format!("unknown fault {other:?}"))),
    }
    log_config([
        ("suite".to_string(), suite.to_string()),
        ("tol".to_string(), tol.map_or("default".into(), |t| t.to_string())),
    ]);
    let t = Instant::now();
    let results = checks::run(suite, checks::Options { tol });
    print!("{}", checks::render(&results));
    eprintln!("elapsed={:.1}s", t.elapsed().as_secs_f64());
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(ChecksFailed.into())
    }
}

// ---- train ---------------------------------------------------------------

/// Keys a config file may set besides the model's own.
fn set_train_key(opts: &mut TrainOptions, key: &str, value: &str) -> Result<bool> {
    fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
        v.parse().map_err(|_| usage(format!("bad value {v:?} for {k}")))
    }
    match key {
        "steps" => opts.steps = num(key, value)?,
        "lr" => opts.lr = num(key, value)?,
        "clip" => opts.clip = num(key, value)?,
        "batch" => opts.batch = num(key, value)?,
        "log_every" => opts.log_every = num(key, value)?,
        "val_samples" => opts.val_samples = num(key, value)?,
        "data_seed" => opts.data_seed = num(key, value)?,
        _ => match key.strip_prefix("data.") {
            Some(k) => set_data_key(&mut opts.data, k, value)?,
            None => return Ok(false),
        },
    }
    Ok(true)
}

fn set_data_key(d: &mut SceneDistribution, key: &str, value: &str) -> Result<()> {
    fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
        v.parse().map_err(|_| usage(format!("bad value {v:?} for {k}")))
    }
    match key {
        "h" => d.h = num(key, value)?,
        "w" => d.w = num(key, value)?,
        "max_motion" => d.max_motion = num(key, value)?,
        "background_motion" => d.background_motion = num(key, value)?,
        "integer_motion" => d.integer_motion = num(key, value)?,
        "noise_sigma" => d.noise_sigma = num(key, value)?,
        other => return Err(usage(format!("unknown scene key {other:?}"))),
    }
    Ok(())
}

fn data_pairs(d: &SceneDistribution) -> Vec<(String, String)> {
    vec![
        ("data.h".into(), d.h.to_string()),
        ("data.w".into(), d.w.to_string()),
        ("data.max_motion".into(), d.max_motion.to_string()),
        ("data.background_motion".into(), d.background_motion.to_string()),
        ("data.integer_motion".into(), d.integer_motion.to_string()),
        ("data.noise_sigma".into(), d.noise_sigma.to_string()),
    ]
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Resolves the training setup: toy preset of the variant, then the
/// config file, then flags.
fn resolve_train(
    config: Option<&Path>,
    steps: Option<usize>,
    variant: Option<&str>,
    seed: Option<u64>,
) -> Result<(ModelConfig, TrainOptions)> {
    let file = config.map(read_kv).transpose()?.unwrap_or_default();
    let file_variant = file.iter().find(|(k, _)| k == "variant").map(|(_, v)| v.as_str());
    let variant: Variant = match (variant, file_variant) {
        (Some(a), Some(b)) if a != b => {
            return Err(usage(format!("--variant {a} conflicts with variant={b} in the config file")))
        }
        (Some(v), _) | (None, Some(v)) => v.parse().map_err(|e| usage(format!("{e}")))?,
        (None, None) => Variant::Sstm,
    };
    let mut model = ModelConfig::preset(variant).toy();
    let mut opts = TrainOptions::default();
    for (k, v) in &file {
        if k == "variant" || set_train_key(&mut opts, k, v)? {
            continue;
        }
        model.set(k, v).map_err(|e| usage(format!("{e}")))?;
    }
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(s) = seed {
        model.seed = s;
        opts.data_seed = s;
    }
    model.validate().map_err(|e| usage(format!("{e}")))?;
    if opts.batch == 0 || opts.steps == 0 {
        return Err(usage("steps and batch must be at least 1"));
    }
    Ok((model, opts))
}

fn train_cmd(
    config: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, opts) = resolve_train(config, steps, variant, seed)?;
    let mut pairs: Vec<(String, String)> = cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    pairs.extend([
        ("steps".into(), opts.steps.to_string()),
        ("lr".into(), opts.lr.to_string()),
        ("clip".into(), opts.clip.to_string()),
        ("batch".into(), opts.batch.to_string()),
        ("log_every".into(), opts.log_every.to_string()),
        ("val_samples".into(), opts.val_samples.to_string()),
        ("data_seed".into(), opts.data_seed.to_string()),
    ]);
    pairs.extend(data_pairs(&opts.data));
    log_config(pairs);
    let mut model = Model::new(cfg)?;
    eprintln!("params={}", model.weights.num_scalars());
    let t = Instant::now();
    let report = train::train(&mut model, &opts, |line| {
        println!("{line}\telapsed={:.0}s", t.elapsed().as_secs_f64())
    })?;
    checkpoint::save(out, &model.weights, &model.config)
        .with_context(|| format!("writing {}", out.display()))?;
    let k = (opts.steps / 20).max(1);
    println!("loss_ratio={:.3}", report.loss_ratio(k));
    if let Some((_, v)) = report.val.last() {
        println!("final val_epe={:.4} val_d0_10={:.4}", v.epe, v.d0_10);
    }
    println!("checkpoint={}", out.display());
    Ok(())
}

// ---- infer ---------------------------------------------------------------

fn read_flow(path: &Path) -> Result<FlowFile> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let f = if is_png {
        flow_io::read_kitti_png(path)
    } else {
        flow_io::read_flo(path)
    };
    f.with_context(|| format!("reading {}", path.display()))
}

fn write_flow_outputs(dir: &Path, stem: &str, flow: &Tensor<f32>) -> Result<()> {
    let f = FlowFile::new(flow.clone())?;
    flow_io::write_flo(dir.join(format!("{stem}.flo")), &f)?;
    let rgb = flow_io::flow_to_color(flow, None)?;
    flow_io::write_rgb8(dir.join(format!("{stem}.png")), f.width, f.height, &rgb)?;
    Ok(())
}

fn infer(ckpt: &Path, frames: &[PathBuf], warm: &str, prev: Option<&Path>, out: &Path) -> Result<()> {
    let warm: WarmStart = warm.parse().map_err(|e| usage(format!("{e}")))?;
    let model = checkpoint::load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut pairs: Vec<(String, String)> = model.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    pairs.push(("infer.warm_start".into(), warm.to_string()));
    log_config(pairs);
    let imgs = frames
        .iter()
        .map(|p| flow_io::read_rgb_png(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (imgs[0].shape()[1], imgs[0].shape()[2]);
    let prev_pair = match prev {
        Some(p) => {
            let f = read_flow(p)?;
            if (f.height, f.width) != (h, w) {
                bail!("previous flow is {}×{}, frames are {h}×{w}", f.height, f.width);
            }
            Some(FlowPair {
                f1: Tensor::zeros(&[2, h, w]),
                f2: f.flow,
                resolution: Resolution::Full,
            })
        }
        None => None,
    };
    let init = match (warm, &prev_pair) {
        (WarmStart::ShiftPair, Some(_)) => {
            eprintln!("init=shift_pair (previous frame 2→3 flow seeds f1)");
            Some(warm_start_init(prev_pair.as_ref(), warm, h, w))
        }
        (WarmStart::ShiftPair, None) => {
            eprintln!("init=zero (shift_pair requested without --prev)");
            None
        }
        (WarmStart::None, _) => {
            eprintln!("init=zero");
            None
        }
    };
    let pred = model.predict(&imgs, init.as_ref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_flow_outputs(out, "flow12", &pred.f1)?;
    write_flow_outputs(out, "flow23", &pred.f2)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---- eval ----------------------------------------------------------------

fn read_mask(path: &Path) -> Result<Mask> {
    let img = flow_io::read_rgb_png(path).with_context(|| format!("reading {}", path.display()))?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let n = h * w;
    Ok(Mask::from_fn(h, w, |y, x| {
        let p = y * w + x;
        (0..3).any(|c| d[c * n + p] > 0.5)
    }))
}

fn mask_to_rgb(m: &Mask, h: usize, w: usize) -> Vec<u8> {
    (0..h * w)
        .flat_map(|p| {
            let v = if m.get(p / w, p % w) { 255 } else { 0 };
            [v, v, v]
        })
        .collect()
}

fn eval(pred: &Path, gt: &Path, occ: Option<&Path>, bands: Option<&str>) -> Result<()> {
    let bands = bands
        .map(|s| {
            s.split(',')
                .filter(|b| !b.trim().is_empty())
                .map(RegionSpec::parse)
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .transpose()
        .map_err(|e| usage(format!("{e}")))?
        .unwrap_or_default();
    if occ.is_none() && bands.iter().any(|b| b.kind == metrics::BandKind::OccDistance) {
        return Err(usage("occlusion-distance bands need --occ"));
    }
    log_config([
        ("eval.pred".to_string(), pred.display().to_string()),
        ("eval.gt".to_string(), gt.display().to_string()),
        ("eval.occ".to_string(), occ.map_or("none".into(), |p| p.display().to_string())),
        ("eval.bands".to_string(), bands.iter().map(RegionSpec::label).collect::<Vec<_>>().join(",")),
    ]);
    let p = read_flow(pred)?;
    let g = read_flow(gt)?;
    if (p.height, p.width) != (g.height, g.width) {
        bail!(
            "resolution mismatch: prediction is {}×{}, ground truth is {}×{}",
            p.height,
            p.width,
            g.height,
            g.width
        );
    }
    let occ = occ.map(read_mask).transpose()?;
    if let Some(m) = &occ {
        if m.h != g.height || m.w != g.width {
            bail!("occlusion mask is {}×{}, flows are {}×{}", m.h, m.w, g.height, g.width);
        }
    }
    let report = metrics::evaluate(&p.flow, &g.flow, g.valid.as_ref(), occ.as_ref(), &bands)?;
    print!("{}", report.render());
    Ok(())
}

// ---- synth / viz ---------------------------------------------------------

fn synth(spec: Option<&Path>, count: usize, out: &Path, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut dist = SceneDistribution::toy();
    for (k, v) in spec.map(read_kv).transpose()?.unwrap_or_default() {
        set_data_key(&mut dist, &k, &v)?;
    }
    let mut pairs = data_pairs(&dist);
    pairs.push(("seed".into(), seed.to_string()));
    pairs.push(("count".into(), count.to_string()));
    log_config(pairs);
    let ds = Dataset::new(dist, count, seed)?;
    for i in 0..count {
        let s = ds.get(i)?;
        let dir = out.join(format!("{i:04}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (t, f) in s.frames.iter().enumerate() {
            flow_io::write_rgb_png(dir.join(format!("frame{}.png", t + 1)), f)?;
        }
        let g1 = s.gt.gt_f1.clone().ok_or_else(|| anyhow!("sample without gt"))?;
        let g2 = s.gt.gt_f2.clone().ok_or_else(|| anyhow!("sample without gt"))?;
        flow_io::write_flo(dir.join("flow12.flo"), &FlowFile::new(g1)?)?;
        flow_io::write_flo(dir.join("flow23.flo"), &FlowFile::new(g2)?)?;
        let (h, w) = (s.gt.occlusion.h, s.gt.occlusion.w);
        flow_io::write_rgb8(dir.join("occ.png"), w, h, &mask_to_rgb(&s.gt.occlusion, h, w))?;
        flow_io::write_rgb8(dir.join("oob.png"), w, h, &mask_to_rgb(&s.gt.oob, h, w))?;
        println!("sample={i:04}\tchecksum={:08x}", s.checksum());
    }
    Ok(())
}

fn viz(flow: &Path, out: &Path, max_rad: Option<f32>) -> Result<()> {
    log_config([
        ("viz.flow".to_string(), flow.display().to_string()),
        ("viz.max_rad".to_string(), max_rad.map_or("auto".into(), |r| r.to_string())),
    ]);
    let f = read_flow(flow)?;
    let rgb = flow_io::flow_to_color(&f.flow, max_rad)?;
    flow_io::write_rgb8(out, f.width, f.height, &rgb).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
