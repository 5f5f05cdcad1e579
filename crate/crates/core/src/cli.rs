//! The `gfpc` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on usage errors (with usage text), 2 on
//! runtime errors with a single `error kind=<kind> msg=<message>` line on
//! stderr. Reports and CSV go to stdout unless an output path is given.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::contrast::pretrain;
use crate::data::{
    self, generate_synthetic, load_images, load_manifest, load_samples, png, DepthSample, Split, SyntheticSceneParams,
};
use crate::depth::{accumulate_set, finetune, predict_depth, DepthNet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::gradfield::{gradient_field, GradientField};
use crate::metrics::{aggregate, EvalProtocol, MetricReport};
use crate::tensor::{Precision, Scalar};

pub const THREADS_ENV: &str = "GFPC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gfpc", version, about = "Gradient-field contrastive pretraining and depth fine-tuning")]
#[command(arg_required_else_help = true, propagate_version = true)]
struct Cli {
    /// Worker threads (falls back to GFPC_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tau=0.2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Arithmetic precision for training: f32 or f64.
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute gradient fields for one PNG or every PNG in a directory.
    Gradfield {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write raw little-endian f32 (u32 height, u32 width header) instead of 8-bit PNG.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Contrastive pretraining on the train split; writes an encoder checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV `step,loss`); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a depth network on a labeled fraction of the train split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint, or `random`.
        #[arg(long)]
        init: String,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed for subset sampling and initialization.
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch loss log (CSV `epoch,loss`); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict a half-resolution depth map as a 16-bit millimeter PNG.
    Predict {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a depth checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation protocol file (`crop`, `max_depth`, `min_depth`, `aggregation`).
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// CSV report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.125)]
        test_fraction: f64,
    },
    /// Fine-tune and evaluate over label fractions, seeds and init modes.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint used by the `pretrained` init mode.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.03, 0.05, 0.1])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        /// Subset of `random,pretrained`; defaults to both when a checkpoint is given.
        #[arg(long, value_delimiter = ',')]
        inits: Vec<String>,
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} msg={}", e.kind(), msg);
            2
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be an integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cli.threads)?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gradfield { input, out, raw, cfg } => cmd_gradfield(&input, &out, raw, &cfg),
        Command::Pretrain { data, out, log, cfg } => cmd_pretrain(&data, &out, log.as_deref(), &cfg),
        Command::Finetune { data, init, fraction, out, seed, log, cfg } => {
            cmd_finetune(&data, &init, fraction, &out, seed, log.as_deref(), &cfg)
        }
        Command::Predict { input, ckpt, out } => cmd_predict(&input, &ckpt, &out),
        Command::Eval { data, ckpt, protocol, split, out } => {
            cmd_eval(&data, &ckpt, protocol.as_deref(), split, out.as_deref())
        }
        Command::Synth { out, n, seed, size, test_fraction } => {
            let params =
                SyntheticSceneParams { count: n, height: size, width: size, seed, test_fraction, ..Default::default() };
            generate_synthetic(&params, &out)?;
            eprintln!("wrote {n} scenes to {}", out.display());
            Ok(())
        }
        Command::Sweep { data, ckpt, fractions, seeds, inits, protocol, out, cfg } => {
            let inits = resolve_inits(inits, ckpt.is_some())?;
            let sweep = SweepSpec { fractions, seeds, inits, pretrained: ckpt };
            cmd_sweep(&data, &sweep, protocol.as_deref(), out.as_deref(), &cfg)
        }
    })
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let overrides = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.apply(&overrides)?;
    Ok(cfg)
}

fn log_config(cfg: &RunConfig, precision: Precision) {
    eprintln!("resolved config (precision = {precision}):");
    for line in cfg.resolved().lines() {
        eprintln!("  {line}");
    }
}

/// Writes to `path`, or to stdout when `None`.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

pub fn write_raw_field(path: &Path, field: &GradientField) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * field.values.len());
    bytes.extend_from_slice(&(field.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(field.width as u32).to_le_bytes());
    for v in &field.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_gradfield(input: &Path, out: &Path, raw: bool, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let canny = cfg.pretrain.canny;
    let one = |src: &Path, dst: &Path| -> Result<()> {
        let field = gradient_field(&png::read_rgb(src)?, &canny)?;
        if raw {
            write_raw_field(dst, &field)
        } else {
            png::write_gray8(dst, field.height, field.width, &field.to_u8())
        }
    };
    if input.is_dir() {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(input, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        use rayon::prelude::*;
        files.par_iter().try_for_each(|src| {
            let name = src.file_stem().expect("file name").to_string_lossy().into_owned();
            let ext = if raw { "f32" } else { "png" };
            one(src, &out.join(format!("{name}.{ext}")))
        })?;
        eprintln!("wrote {} gradient fields to {}", files.len(), out.display());
        Ok(())
    } else {
        one(input, out)
    }
}

fn pretrain_as<T: Scalar>(
    images: &[crate::gradfield::ColorImage],
    cfg: &RunConfig,
    out: &Path,
    log: &mut dyn Write,
) -> Result<()> {
    let outcome = pretrain::<T>(images, &cfg.pretrain, log)?;
    let query: Encoder<T> = outcome.pair.query;
    data::save_checkpoint(query.params(), &query.config().digest(), out)
}

fn cmd_pretrain(data_dir: &Path, out: &Path, log: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    log_config(&cfg, args.precision);
    let images = load_images(&load_manifest(data_dir, Split::Train)?)?;
    with_output(log, |w| match args.precision {
        Precision::F32 => pretrain_as::<f32>(&images, &cfg, out, w),
        Precision::F64 => pretrain_as::<f64>(&images, &cfg, out, w),
    })?;
    eprintln!("wrote encoder checkpoint {}", out.display());
    Ok(())
}

/// Fresh or pretrained-encoder network for `seed`.
fn build_net(cfg: &RunConfig, init: &InitMode, seed: u64) -> Result<DepthNet<f32>> {
    let (enc, dec) = (cfg.encoder(), cfg.decoder_config());
    match init {
        InitMode::Random => DepthNet::random(enc, &dec, seed),
        InitMode::Pretrained(path) => DepthNet::from_pretrained(path, enc, &dec, seed),
    }
}

fn finetune_as<T: Scalar>(
    net: &DepthNet<f32>,
    train: &[DepthSample],
    cfg: &crate::depth::FinetuneConfig,
    log: &mut dyn Write,
) -> Result<DepthNet<f32>> {
    Ok(finetune(net.cast::<T>(), train, cfg, log)?.net.cast())
}

fn run_finetune(
    net: &DepthNet<f32>,
    train: &[DepthSample],
    cfg: &crate::depth::FinetuneConfig,
    precision: Precision,
    log: &mut dyn Write,
) -> Result<DepthNet<f32>> {
    match precision {
        Precision::F32 => finetune_as::<f32>(net, train, cfg, log),
        Precision::F64 => finetune_as::<f64>(net, train, cfg, log),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    Random,
    Pretrained(PathBuf),
}

impl InitMode {
    pub fn label(&self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::Pretrained(_) => "pretrained",
        }
    }
}

fn cmd_finetune(
    data_dir: &Path,
    init: &str,
    fraction: f64,
    out: &Path,
    seed: Option<u64>,
    log: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.finetune.fraction = fraction;
    if let Some(s) = seed {
        cfg.finetune.seed = s;
    }
    cfg.finetune.validate()?;
    log_config(&cfg, args.precision);
    eprintln!("  finetune.fraction = {fraction}\n  finetune.seed = {}", cfg.finetune.seed);
    let init = if init == "random" { InitMode::Random } else { InitMode::Pretrained(PathBuf::from(init)) };
    let train = load_samples(&load_manifest(data_dir, Split::Train)?)?;
    let net = build_net(&cfg, &init, cfg.finetune.seed)?;
    let tuned = with_output(log, |w| {
        let tuned = run_finetune(&net, &train, &cfg.finetune, args.precision, w)?;
        tuned.save(out)
    });
    tuned?;
    eprintln!("wrote depth checkpoint {}", out.display());
    Ok(())
}

fn cmd_predict(input: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let net = DepthNet::load(ckpt)?;
    let map = predict_depth(&net, &png::read_rgb(input)?)?;
    png::write_gray16(out, map.height, map.width, &map.to_millimeters())
}

fn load_protocol(path: Option<&Path>) -> Result<EvalProtocol> {
    match path {
        Some(p) => EvalProtocol::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(EvalProtocol::default()),
    }
}

fn evaluate_set(net: &DepthNet<f32>, samples: &[DepthSample], protocol: &EvalProtocol) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    aggregate(&accumulate_set(net, samples, protocol)?, protocol.aggregation)
}

fn cmd_eval(data_dir: &Path, ckpt: &Path, protocol: Option<&Path>, split: Split, out: Option<&Path>) -> Result<()> {
    let protocol = load_protocol(protocol)?;
    let net = DepthNet::load(ckpt)?;
    let samples = load_samples(&load_manifest(data_dir, split)?)?;
    let report = evaluate_set(&net, &samples, &protocol)?;
    eprintln!("{report}");
    with_output(out, |w| {
        writeln!(w, "{}\n{}", MetricReport::CSV_HEADER, report.csv_row()).map_err(|e| Error::io("<report>", e))
    })
}

fn resolve_inits(inits: Vec<String>, have_ckpt: bool) -> Result<Vec<String>> {
    let inits = if inits.is_empty() {
        if have_ckpt {
            vec!["random".to_string(), "pretrained".to_string()]
        } else {
            vec!["random".to_string()]
        }
    } else {
        inits
    };
    for i in &inits {
        match i.as_str() {
            "random" => {}
            "pretrained" if have_ckpt => {}
            "pretrained" => return Err(Error::Config("init mode `pretrained` needs --ckpt".into())),
            other => return Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
    Ok(inits)
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `random` and/or `pretrained`.
    pub inits: Vec<String>,
    pub pretrained: Option<PathBuf>,
}

/// `(init, fraction, seed, report)`; `seed` is `None` on mean rows.
pub type SweepRow = (String, f64, Option<u64>, MetricReport);

/// One fine-tune + eval per (init, fraction, seed), in that nesting order,
/// followed by one mean row per (init, fraction).
pub fn run_sweep(
    spec: &SweepSpec,
    cfg: &RunConfig,
    precision: Precision,
    train: &[DepthSample],
    test: &[DepthSample],
    protocol: &EvalProtocol,
    out: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    if spec.fractions.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction and one seed".into()));
    }
    let io = |e: std::io::Error| Error::io("<sweep csv>", e);
    writeln!(out, "init,fraction,seed,{}", MetricReport::CSV_HEADER).map_err(io)?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for label in &spec.inits {
        let init = match label.as_str() {
            "random" => InitMode::Random,
            _ => InitMode::Pretrained(
                spec.pretrained
                    .clone()
                    .ok_or_else(|| Error::Config("init mode `pretrained` needs a checkpoint".into()))?,
            ),
        };
        for &fraction in &spec.fractions {
            let mut acc = [0.0; 6];
            for &seed in &spec.seeds {
                let mut fc = cfg.finetune.clone();
                fc.fraction = fraction;
                fc.seed = seed;
                let net = build_net(cfg, &init, seed)?;
                let tuned = run_finetune(&net, train, &fc, precision, &mut std::io::sink())?;
                let report = evaluate_set(&tuned, test, protocol)?;
                writeln!(out, "{},{},{},{}", init.label(), fraction, seed, report.csv_row()).map_err(io)?;
                for (a, v) in acc.iter_mut().zip(report.values()) {
                    *a += v;
                }
                rows.push((init.label().to_string(), fraction, Some(seed), report));
            }
            let n = spec.seeds.len() as f64;
            let mean = MetricReport {
                delta1: acc[0] / n,
                delta2: acc[1] / n,
                delta3: acc[2] / n,
                rel: acc[3] / n,
                rms: acc[4] / n,
                log10: acc[5] / n,
                pixels: 0,
            };
            means.push((init.label().to_string(), fraction, None, mean));
        }
    }
    for (label, fraction, _, m) in &means {
        writeln!(out, "{label},{fraction},mean,{}", m.csv_row()).map_err(io)?;
    }
    rows.extend(means);
    Ok(rows)
}

fn cmd_sweep(
    data_dir: &Path,
    spec: &SweepSpec,
    protocol: Option<&Path>,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    log_config(&cfg, args.precision);
    let protocol = load_protocol(protocol)?;
    let train = load_samples(&load_manifest(data_dir, Split::Train)?)?;
    let test = load_samples(&load_manifest(data_dir, Split::Test)?)?;
    with_output(out, |w| run_sweep(spec, &cfg, args.precision, &train, &test, &protocol, w).map(|_| ()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["gfpc"]), 1);
        assert_eq!(dispatch(["gfpc", "synth", "--bogus"]), 1);
        assert_eq!(dispatch(["gfpc", "--help"]), 0);
        assert_eq!(dispatch(["gfpc", "--version"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let d = tempfile::tempdir().unwrap();
        let missing = d.path().join("nope.ckpt");
        let code =
            dispatch(["gfpc", "predict", "--in", "x.png", "--ckpt", missing.to_str().unwrap(), "--out", "y.png"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn inits_resolution() {
        assert_eq!(resolve_inits(vec![], false).unwrap(), ["random"]);
        assert_eq!(resolve_inits(vec![], true).unwrap(), ["random", "pretrained"]);
        assert!(resolve_inits(vec!["pretrained".into()], false).is_err());
        assert!(resolve_inits(vec!["other".into()], true).is_err());
    }

    #[test]
    fn thread_flag_beats_env() {
        assert_eq!(thread_count(Some(3)).unwrap(), 3);
    }
}
