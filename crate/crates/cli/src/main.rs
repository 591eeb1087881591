//! Command line front end: data generation, training, coding, evaluation and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bisic::checkpoint::{self, write_atomic};
use bisic::coding::{compress, decompress};
use bisic::config::{load_kv, Mode, ModelConfig, TrainConfig};
use bisic::data::{
    desk_spec, generate_synthetic_pair, load_dir, load_pair, preprocess, save_pair, synthetic_dataset, CropRule,
    StereoPair, SyntheticSpec,
};
use bisic::eval::{bd_psnr, bd_rate, bd_rate_with, bit_allocation_map, evaluate_set, RdPoint};
use bisic::model::{Model, LATENT_STRIDE};
use bisic::report::{curves_to_csv, emit_report, read_curves, Curve};
use bisic::selftest::{format_table, run_suite, SuiteSize};
use bisic::train::{finetune_msssim, train, TrainOptions};
use bisic::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser)]
#[command(name = "bisic", version, about = "Bidirectional stereo image compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// key = value file applied before --set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataSource {
    /// Directory of `<stem>_left.png` / `<stem>_right.png` pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate this many synthetic pairs in memory instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Size of generated pairs.
    #[arg(long, default_value_t = 128)]
    synthetic_size: usize,
    /// Crop applied to loaded pairs: none, divisible64 or cityscapes.
    #[arg(long, default_value = "none")]
    crop: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic stereo pairs as PNG files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model from scratch or from --init.
    Train {
        #[command(flatten)]
        source: DataSource,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Start from this checkpoint's weights and configuration.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        progress: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue training a checkpoint with MS-SSIM distortion.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        progress: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compress a stereo pair into a .bsic file.
    Compress {
        #[arg(long)]
        in_left: PathBuf,
        #[arg(long)]
        in_right: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Entropy coding mode; must match the model.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "none")]
        crop: String,
    },
    /// Decompress a .bsic file into two PNG views.
    Decompress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_left: PathBuf,
        #[arg(long)]
        out_right: PathBuf,
    },
    /// Evaluate checkpoints (one RD point each) and write a curve CSV.
    Eval {
        /// Checkpoints, typically one per lambda.
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        out: PathBuf,
        /// Curve name stored in the CSV.
        #[arg(long, default_value = "bisic")]
        name: String,
        /// Write bit allocation maps of the first pair for every checkpoint here.
        #[arg(long)]
        bitmap: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Bjøntegaard deltas of a test curve against a reference curve.
    Bd { reference: PathBuf, test: PathBuf },
    /// RD plots, combined CSV and BD table for several curve CSVs.
    Plot {
        #[arg(long = "curves", required = true, num_args = 1..)]
        curves: Vec<PathBuf>,
        /// Reference curve name; defaults to the first curve.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Causality, round-trip and gradient property suites.
    Selftest {
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Command failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format(_) => EXIT_FORMAT,
            Error::Integrity(_) | Error::Coder(_) => EXIT_INTEGRITY,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Collected `key=value` overrides in application order.
fn override_pairs(o: &Overrides) -> CliResult<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    if let Some(p) = &o.config {
        out.extend(load_kv(p)?);
    }
    for s in &o.set {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies overrides to the model and training configurations; every key must
/// be known to one of them.
fn apply(o: &Overrides, model: &mut ModelConfig, train: &mut TrainConfig) -> CliResult {
    for (k, v) in override_pairs(o)? {
        if !(model.set(&k, &v)? || train.set(&k, &v)?) {
            return Err(usage(format!("unknown configuration key {k:?}")));
        }
    }
    if let Some(s) = o.seed {
        train.seed = s;
    }
    model.validate()?;
    train.validate()?;
    Ok(())
}

fn crop_rule(s: &str) -> CliResult<Option<CropRule>> {
    if s == "none" {
        Ok(None)
    } else {
        Ok(Some(s.parse()?))
    }
}

fn load_source(src: &DataSource, seed: u64) -> CliResult<Vec<StereoPair>> {
    let rule = crop_rule(&src.crop)?;
    let pairs = match (&src.data, src.synthetic) {
        (Some(dir), None) => load_dir(dir)?,
        (None, Some(n)) => synthetic_dataset(n, src.synthetic_size, src.synthetic_size, seed)?,
        _ => return Err(usage("give exactly one of --data DIR or --synthetic N")),
    };
    match rule {
        None => Ok(pairs),
        Some(r) => Ok(pairs.iter().map(|p| preprocess(p, r)).collect::<bisic::Result<Vec<_>>>()?),
    }
}

fn progress_opts(out: &Path, log: Option<&PathBuf>, progress: usize, start_step: usize) -> TrainOptions {
    TrainOptions {
        log_path: log.cloned(),
        checkpoint_path: Some(out.to_path_buf()),
        progress_every: progress,
        start_step,
    }
}

fn cmd_gen_data(out: &Path, count: usize, height: usize, width: usize, o: &Overrides) -> CliResult {
    let base_seed = o.seed.unwrap_or(0);
    let kv = override_pairs(o)?;
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let mut spec: SyntheticSpec = desk_spec(seed, height, width);
        for (k, v) in &kv {
            if !spec.set(k, v)? {
                return Err(usage(format!("unknown generator key {k:?}")));
            }
        }
        spec.seed = seed;
        let pair = generate_synthetic_pair(&spec)?;
        save_pair(out, &format!("pair_{i:04}"), &pair)?;
    }
    println!("wrote {count} pairs of {width}x{height} to {}", out.display());
    Ok(())
}

fn report_training(report: &bisic::train::TrainReport, out: &Path) {
    if let Some(last) = report.log.last() {
        println!(
            "step {}: L {:.4}  D {:.6}  R_y {:.4}  R_z {:.4}",
            last.step + 1,
            last.loss.total,
            last.loss.distortion,
            last.loss.rate_y,
            last.loss.rate_z
        );
    }
    if !report.dead_params.is_empty() {
        println!("parameters without gradient early in training: {}", report.dead_params.join(", "));
    }
    println!("checkpoint written to {}", out.display());
}

fn cmd_train(src: &DataSource, out: &Path, log: Option<&PathBuf>, init: Option<&PathBuf>, progress: usize, o: &Overrides) -> CliResult {
    let (mut mc, mut tc, start, weights) = match init {
        Some(p) => {
            let c = checkpoint::load(p)?;
            (c.model.config.clone(), c.train.clone().unwrap_or_default(), c.step, Some(c.model))
        }
        None => (ModelConfig::desk(), TrainConfig::default(), 0, None),
    };
    apply(o, &mut mc, &mut tc)?;
    let mut model = match weights {
        Some(m) if m.config == mc => m,
        Some(_) => return Err(usage("--set may not change the architecture of an --init checkpoint")),
        None => Model::new(mc, tc.seed)?,
    };
    let data = load_source(src, tc.seed)?;
    let report = train(&mut model, &data, &tc, &progress_opts(out, log, progress, start))?;
    report_training(&report, out);
    Ok(())
}

fn cmd_finetune(model_path: &Path, src: &DataSource, out: &Path, log: Option<&PathBuf>, progress: usize, o: &Overrides) -> CliResult {
    let c = checkpoint::load(model_path)?;
    let mut mc = c.model.config.clone();
    let mut tc = c.train.clone().unwrap_or_default();
    apply(o, &mut mc, &mut tc)?;
    if mc != c.model.config {
        return Err(usage("finetuning keeps the checkpoint's architecture"));
    }
    let mut model = c.model;
    let data = load_source(src, tc.seed)?;
    let report = finetune_msssim(&mut model, &data, &tc, &progress_opts(out, log, progress, c.step))?;
    report_training(&report, out);
    Ok(())
}

fn cmd_compress(left: &Path, right: &Path, model_path: &Path, mode: Option<&str>, out: &Path, crop: &str) -> CliResult {
    let c = checkpoint::load(model_path)?;
    if let Some(m) = mode {
        let m: Mode = m.parse()?;
        if m != c.model.config.mode {
            return Err(usage(format!("the model was trained for mode {}, not {m}", c.model.config.mode)));
        }
    }
    let mut pair = load_pair(left, right)?;
    if let Some(rule) = crop_rule(crop)? {
        pair = preprocess(&pair, rule)?;
    }
    let compressed = compress(&c.model, &pair)?;
    let bs = &compressed.bitstream;
    write_atomic(out, &bs.to_bytes())?;
    let [l, r] = bs.bpp();
    println!(
        "{} bytes, bpp left {l:.4} right {r:.4} average {:.4}, {} escapes",
        bs.len_bytes(),
        0.5 * (l + r),
        compressed.stats.escapes
    );
    Ok(())
}

fn cmd_decompress(input: &Path, model_path: &Path, out_left: &Path, out_right: &Path) -> CliResult {
    let c = checkpoint::load(model_path)?;
    let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
    let d = decompress(&c.model, &bytes)?;
    d.pair.left.save_png(out_left)?;
    d.pair.right.save_png(out_right)?;
    println!("decoded {}x{} pair", d.pair.width(), d.pair.height());
    Ok(())
}

fn cmd_eval(models: &[PathBuf], src: &DataSource, out: &Path, name: &str, bitmap: Option<&PathBuf>, o: &Overrides) -> CliResult {
    let seed = o.seed.unwrap_or(0);
    let data = load_source(src, seed)?;
    let mut points = Vec::new();
    for path in models {
        let c = checkpoint::load(path)?;
        let lambda = c.train.as_ref().map_or(f64::NAN, |t| t.lambda);
        let p = evaluate_set(&c.model, &data, lambda)?;
        println!(
            "{}: lambda {lambda} bpp {:.4} psnr {:.3} dB ms-ssim {:.5}",
            path.display(),
            p.bpp_avg(),
            p.psnr_avg(),
            p.msssim_avg()
        );
        if let Some(dir) = bitmap {
            let map = bit_allocation_map(&c.model, &data[0])?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            for (v, view) in ["left", "right"].iter().enumerate() {
                let target = dir.join(format!("{stem}_bits_{view}.png"));
                let tmp = bisic::data::tmp_path(&target).with_extension("png");
                map.to_gray(v, LATENT_STRIDE)
                    .save(&tmp)
                    .map_err(|e| Error::Other(format!("cannot write {}: {e}", tmp.display())))?;
                std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
            }
        }
        points.push(p);
    }
    write_atomic(out, &curves_to_csv(&[Curve::new(name, points)])?)?;
    println!("curve written to {}", out.display());
    Ok(())
}

fn single_curve(path: &Path) -> CliResult<Vec<RdPoint>> {
    let mut curves = read_curves(path)?;
    if curves.len() != 1 {
        return Err(usage(format!("{} holds {} curves; bd needs exactly one", path.display(), curves.len())));
    }
    Ok(curves.remove(0).points)
}

fn cmd_bd(reference: &Path, test: &Path) -> CliResult {
    let (r, t) = (single_curve(reference)?, single_curve(test)?);
    println!("BDBR (PSNR)    {:+.2}%", bd_rate(&r, &t)?);
    println!("BD-PSNR        {:+.4} dB", bd_psnr(&r, &t)?);
    match bd_rate_with(&r, &t, RdPoint::msssim_avg) {
        Ok(v) => println!("BDBR (MS-SSIM) {v:+.2}%"),
        Err(e) => println!("BDBR (MS-SSIM) n/a: {e}"),
    }
    Ok(())
}

fn cmd_plot(paths: &[PathBuf], reference: Option<&str>, out: &Path) -> CliResult {
    let mut curves = Vec::new();
    for p in paths {
        curves.extend(read_curves(p)?);
    }
    let reference = reference.map(str::to_string).unwrap_or_else(|| curves[0].name.clone());
    let files = emit_report(&curves, &reference, out)?;
    for f in [&files.psnr_plot, &files.msssim_plot, &files.csv, &files.bd_table] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_selftest(quick: bool, seed: u64) -> CliResult {
    let size = if quick { SuiteSize::QUICK } else { SuiteSize::FULL };
    let results = run_suite(size, seed)?;
    print!("{}", format_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure { code: EXIT_SELFTEST, message: format!("{failed} self-test checks failed") });
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if std::env::var("BISIC_DETERMINISTIC").is_ok_and(|v| v == "1") {
        log::info!("deterministic mode: all computation is single-threaded and seeded");
    }
    match &cli.command {
        Command::GenData { out, count, height, width, overrides } => cmd_gen_data(out, *count, *height, *width, overrides),
        Command::Train { source, out, log, init, progress, overrides } => {
            cmd_train(source, out, log.as_ref(), init.as_ref(), *progress, overrides)
        }
        Command::Finetune { model, source, out, log, progress, overrides } => {
            cmd_finetune(model, source, out, log.as_ref(), *progress, overrides)
        }
        Command::Compress { in_left, in_right, model, mode, out, crop } => {
            cmd_compress(in_left, in_right, model, mode.as_deref(), out, crop)
        }
        Command::Decompress { input, model, out_left, out_right } => cmd_decompress(input, model, out_left, out_right),
        Command::Eval { models, source, out, name, bitmap, overrides } => {
            cmd_eval(models, source, out, name, bitmap.as_ref(), overrides)
        }
        Command::Bd { reference, test } => cmd_bd(reference, test),
        Command::Plot { curves, reference, out } => cmd_plot(curves, reference.as_deref(), out),
        Command::Selftest { quick, seed } => cmd_selftest(*quick, *seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
