//! The `rrnet` command line: gen-data, train, infer, eval, self-check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rrnet_core::data::{resize_bilinear, synth_dataset, Sample};
use rrnet_core::metrics::{FVariant, MetricConfig};
use rrnet_core::network::{init_params, predict, Ablation};
use rrnet_core::train::train;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::manifest::{load_sample, read_manifest, write_manifest};
use crate::{eval, pnm, report, selfcheck};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "RRNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rrnet", version, about = "Salient object detection with relational reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: images/, masks/ and manifest.tsv.
    GenData(GenDataArgs),
    /// Train and write a checkpoint; loss lines go to stdout.
    Train(TrainArgs),
    /// Predict one saliency map.
    Infer(InferArgs),
    /// Score a directory of predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Run gradient checks and invariant suites.
    SelfCheck(SelfCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on this many generated samples.
    #[arg(long, conflicts_with = "manifest")]
    pub synthetic: Option<usize>,
    /// Side of generated samples; also the network input unless configured.
    #[arg(long, default_value_t = 64)]
    pub synth_size: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Square network input side.
    #[arg(long)]
    pub size: Option<usize>,
    /// baseline, pma, pma+srr, full, nonlocal, pma-left, pma-right
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub report: PathBuf,
    pub prcurve: PathBuf,
    /// F-measure at the adaptive threshold instead of the maximum.
    #[arg(long)]
    pub adaptive_f: bool,
    #[arg(long, default_value_t = 0.3)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct SelfCheckArgs {
    /// Skip the end-to-end network gradient check.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
}

impl From<rrnet_core::Error> for Failure {
    fn from(e: rrnet_core::Error) -> Self {
        use rrnet_core::Error as E;
        let code = match e {
            E::NonFinite { .. } => EXIT_NUMERIC,
            E::InvalidConfig(_) | E::InvalidKernel(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

/// Parse arguments, run, and return the process exit code.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let r = match cli.command {
        Command::GenData(a) => gen_data(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Infer(a) => cmd_infer(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout, stderr),
        Command::SelfCheck(a) => self_check(&a, stdout),
    };
    match r {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn gen_data(a: &GenDataArgs, stdout: &mut dyn Write) -> CmdResult {
    let samples = synth_dataset(a.n, a.seed, a.size).map_err(Failure::usage)?;
    let (images, masks) = (a.out.join("images"), a.out.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(io_fail(d))?;
    }
    let mut entries = Vec::new();
    for s in &samples {
        let img = format!("images/{}.ppm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        pnm::write_image(&a.out.join(&img), &s.image).map_err(Failure::data)?;
        pnm::write_map(&a.out.join(&mask), &s.mask).map_err(Failure::data)?;
        entries.push((img, mask));
    }
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &entries).map_err(io_fail(&manifest))?;
    let _ = writeln!(stdout, "wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Learning-rate endpoints for `--synthetic` runs when neither the config
/// file nor a flag sets them. The full-scale defaults are tuned for a
/// pretrained backbone; from scratch on a few toy images they do not fit the
/// set within 2000 iterations.
pub const SYNTH_LR: (f64, f64) = (1e-3, 1e-5);

/// Resolve defaults, config file and flags into a run configuration.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut rc = RunConfig::default();
    let (mut sized, mut paced) = (false, false);
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        rc.apply_text(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let keys: Vec<&str> = text.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
        sized = keys.iter().any(|k| k.starts_with("input_"));
        paced = keys.iter().any(|k| k.starts_with("lr_"));
    }
    if a.synthetic.is_some() && !paced {
        (rc.train.lr_initial, rc.train.lr_final) = SYNTH_LR;
    }
    if let Some(name) = &a.ablation {
        Ablation::parse(name)?.apply(&mut rc.network);
    }
    let t = &mut rc.train;
    if let Some(v) = a.iters {
        t.iterations = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.lr_initial {
        t.lr_initial = v;
    }
    if let Some(v) = a.lr_final {
        t.lr_final = v;
    }
    if let Some(v) = a.augment {
        t.augment = v;
    }
    if let Some(s) = a.size {
        rc.network.input_size = (s, s);
    } else if a.synthetic.is_some() && !sized {
        rc.network.input_size = (a.synth_size, a.synth_size);
    }
    rc.network.validate().map_err(Failure::usage)?;
    rc.train.validate().map_err(Failure::usage)?;
    Ok(rc)
}

fn load_training_data(a: &TrainArgs, seed: u64) -> Result<Vec<Sample>, Failure> {
    match (&a.synthetic, &a.manifest) {
        (Some(n), _) => synth_dataset(*n, seed, a.synth_size).map_err(Failure::usage),
        (None, Some(m)) => read_manifest(m)
            .map_err(Failure::data)?
            .iter()
            .map(|e| load_sample(e).map_err(Failure::data))
            .collect(),
        (None, None) => Err(Failure::usage("train needs --synthetic N or --manifest PATH")),
    }
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> CmdResult {
    let rc = resolve_train_config(a)?;
    let samples = load_training_data(a, rc.train.seed)?;
    let mut params = init_params::<f32>(&rc.network, rc.train.seed)?;
    train(&mut params, &rc.network, &samples, &rc.train, |l| {
        let _ = writeln!(stdout, "{}\t{:.6}\t{:e}", l.iter, l.loss, l.lr);
    })?;
    save_checkpoint(&params, &rc.network, &a.out).map_err(Failure::data)
}

fn cmd_infer(a: &InferArgs, stdout: &mut dyn Write) -> CmdResult {
    let (params, cfg) = load_checkpoint(&a.checkpoint).map_err(Failure::data)?;
    let image = pnm::read_image(&a.image).map_err(Failure::data)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let start = Instant::now();
    let input = resize_bilinear(&image, cfg.input_size.0, cfg.input_size.1)?;
    let pred = predict(&params, &cfg, &input, false)?;
    let map = resize_bilinear(&pred.map, h, w)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    pnm::write_map(&a.output, &map).map_err(Failure::data)?;
    let _ = writeln!(stdout, "{}\t{ms:.1} ms", a.image.display());
    Ok(())
}

/// Thread cap from `RRNET_THREADS`; 0 means the rayon default.
pub fn eval_threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{THREADS_ENV}: expected a thread count, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let cfg = MetricConfig {
        beta2: a.beta2,
        alpha: a.alpha,
        f_variant: if a.adaptive_f { FVariant::Adaptive } else { FVariant::Max },
        ..MetricConfig::default()
    };
    let (names, r) = eval::evaluate_dirs(&a.pred_dir, &a.gt_dir, &cfg, eval_threads()?).map_err(Failure::data)?;
    for &i in &r.excluded {
        let _ = writeln!(
            stderr,
            "warning: {} has no foreground; excluded from F-measure and P-R",
            names[i]
        );
    }
    let rep = report::build(&names, &r);
    fs::write(&a.report, report::to_json(&rep)).map_err(io_fail(&a.report))?;
    fs::write(&a.prcurve, report::pr_csv(&r)).map_err(io_fail(&a.prcurve))?;
    let _ = writeln!(
        stdout,
        "images\t{}\nmae\t{:.4}\nf_beta\t{:.4}\ne_m\t{:.4}\ns_m\t{:.4}",
        names.len(),
        r.mae,
        r.f_beta,
        r.e_m,
        r.s_m
    );
    Ok(())
}

fn self_check(a: &SelfCheckArgs, stdout: &mut dyn Write) -> CmdResult {
    let results = selfcheck::run(!a.quick);
    let failed = results.iter().filter(|o| !o.passed).count();
    for o in &results {
        let tag = if o.passed { "ok" } else { "FAIL" };
        let _ = writeln!(stdout, "{tag}\t{}\t{}", o.name, o.detail);
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} of {} checks failed", results.len()),
        });
    }
    Ok(())
}
