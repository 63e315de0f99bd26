//! The `emoe` command line. Every subcommand prints JSON to stdout except
//! `presets` and `breakdown`, which print aligned text.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::approx::{gelu_error_report, power_of_two_exponent, softmax_error_report};
use crate::attention::{make_schedule, measure_traffic, Phase};
use crate::costmodel::{analytic_attention_stats, breakdown};
use crate::error::{Error, Result};
use crate::fixedpoint::RunContext;
use crate::model::{forward, preset, write_random_weights, Image, Model, ModelConfig, ModelWeights, RunReport, PRESET_NAMES};
use crate::moe::moe_report;

/// Seed used when neither a flag nor `EMOE_SEED` provides one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "emoe", version, about = "Fixed-point multi-task ViT/MoE engine and traffic model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the backbone on one image and write the per-stage report.
    Run(RunArgs),
    /// Event-counted attention traffic next to the closed-form values.
    Traffic(TrafficArgs),
    /// Accuracy reports for the nonlinear approximations.
    #[command(subcommand)]
    Approx(ApproxCommand),
    /// Expert loads of queue-ordered versus token-ordered MoE execution.
    MoeReport(MoeArgs),
    /// Latency-proxy share of each stage in a run report.
    Breakdown(BreakdownArgs),
    /// Write a seed-reproducible random weight file.
    GenWeights(GenArgs),
    /// List the built-in model configurations.
    Presets,
}

#[derive(Debug, Args)]
#[group(id = "model_source", required = true, multiple = false)]
pub struct ModelSource {
    /// Weight file produced by `gen-weights`.
    #[arg(long, group = "model_source")]
    pub weights: Option<PathBuf>,
    /// Preset name; weights are generated from the seed.
    #[arg(long, group = "model_source")]
    pub preset: Option<String>,
    /// JSON model configuration; weights are generated from the seed.
    #[arg(long, group = "model_source")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Raw u8 grayscale file or `synthetic:<seed>`.
    #[arg(long, default_value = "synthetic:0")]
    pub image: String,
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Where to write the run report JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for generated weights.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrafficArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub naive: bool,
    #[arg(long, default_value = "qk")]
    pub phase: Phase,
}

#[derive(Debug, Subcommand)]
pub enum ApproxCommand {
    /// GELU lookup-table error against the exact function.
    Gelu {
        /// Table step, a negative power of two such as `2^-10` or `0.0009765625`.
        #[arg(long, default_value = "2^-10")]
        step: String,
        #[arg(long, default_value_t = 100_000)]
        grid: usize,
    },
    /// Streaming softmax error and agreement with the three-pass form.
    Softmax {
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct MoeArgs {
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Token dimension of the synthetic experts.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Hidden dimension of the synthetic experts.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
}

#[derive(Debug, Args)]
pub struct BreakdownArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Print JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
#[group(id = "gen_source", required = true, multiple = false)]
pub struct GenSource {
    #[arg(long, group = "gen_source")]
    pub preset: Option<String>,
    /// JSON model configuration.
    #[arg(long, group = "gen_source")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub source: GenSource,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flag value, else `EMOE_SEED`, else [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("EMOE_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidArgument(format!("EMOE_SEED={v:?} is not an integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// `synthetic:<seed>` or a raw u8 file of exactly `height·width` bytes.
pub fn load_image(source: &str, height: usize, width: usize) -> Result<Image> {
    if let Some(seed) = source.strip_prefix("synthetic:") {
        let seed = seed.parse().map_err(|_| Error::Image(format!("bad synthetic seed {seed:?}")))?;
        return Ok(Image::synthetic(seed, height, width));
    }
    let bytes = std::fs::read(source).map_err(|e| Error::Image(format!("{source}: {e}")))?;
    Image::from_u8(&bytes, height, width)
}

fn parse_step(s: &str) -> Result<f64> {
    let v = match s.split_once('^') {
        Some(("2", e)) => {
            let e: i32 = e.parse().map_err(|_| Error::InvalidArgument(format!("bad exponent in {s:?}")))?;
            2f64.powi(e)
        }
        Some(_) => return Err(Error::InvalidArgument(format!("step {s:?} must be a power of two"))),
        None => s.parse().map_err(|_| Error::InvalidArgument(format!("bad step {s:?}")))?,
    };
    power_of_two_exponent(v).ok_or_else(|| Error::InvalidArgument(format!("step {s} is not 2^-k")))?;
    Ok(v)
}

fn config_from_file(path: &Path) -> Result<ModelConfig> {
    ModelConfig::from_json(&std::fs::read_to_string(path)?)
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

/// 64-bit FNV-1a over the raw feature values.
fn checksum(raws: &[i64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for r in raws {
        for b in r.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn run(args: RunArgs, out: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let weights = match (&args.model.weights, &args.model.preset, &args.model.config) {
        (Some(path), _, _) => ModelWeights::load(path)?,
        (_, Some(name), _) => ModelWeights::random(&preset(name)?, seed)?,
        (_, _, Some(path)) => ModelWeights::random(&config_from_file(path)?, seed)?,
        _ => unreachable!("clap requires one model source"),
    };
    let model = Model::from_weights(&weights)?;
    let cfg = &model.config;
    let image = load_image(&args.image, cfg.image_h, cfg.image_w)?;
    let mut ctx = RunContext::new();
    let (features, report) = forward(&model, &image, args.task, args.parallelism, &mut ctx)?;
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    }
    let qk_mv: u64 = report.stages.iter().filter(|s| matches!(s.kind, crate::model::StageKind::Qk | crate::model::StageKind::Mv)).map(|s| s.iterations).sum();
    print_json(
        out,
        &json!({
            "model": cfg.name,
            "task": args.task,
            "parallelism": args.parallelism,
            "features_shape": features.shape(),
            "features_checksum": checksum(features.raw()),
            "totals": report.totals,
            "attention_product_iterations": qk_mv,
            "saturation_events": report.saturation_events,
            "wrap_events": report.wrap_events,
        }),
    )
}

fn traffic(args: TrafficArgs, out: &mut dyn Write) -> Result<()> {
    let reordered = !args.naive;
    let schedule = make_schedule(args.n, args.p, reordered, args.phase)?;
    let measured = measure_traffic(&schedule);
    let analytic = analytic_attention_stats(args.n as u64, args.p as u64, reordered)?;
    let divisible = args.n.is_multiple_of(args.p);
    let matches = divisible
        && analytic.data_load == measured.blocks_loaded.into()
        && analytic.latency == measured.latency_iters.into()
        && analytic.memory == measured.live_buffers.into();
    print_json(
        out,
        &json!({
            "n": args.n,
            "p": args.p,
            "schedule": if reordered { "reordered" } else { "naive" },
            "phase": args.phase,
            "measured": measured,
            "analytic": analytic.to_json(),
            "exact_match": if divisible { json!(matches) } else { json!(null) },
        }),
    )?;
    if divisible && !matches {
        return Err(Error::InvalidArgument("measured traffic disagrees with the closed form".into()));
    }
    Ok(())
}

fn approx(cmd: ApproxCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        ApproxCommand::Gelu { step, grid } => print_json(out, &gelu_error_report(parse_step(&step)?, grid)?),
        ApproxCommand::Softmax { len, trials, seed } => {
            let report = softmax_error_report(len, trials, resolve_seed(seed)?)?;
            print_json(out, &report)?;
            if report.three_pass_mismatches != 0 {
                return Err(Error::InvalidArgument(format!("{} streaming/three-pass mismatches", report.three_pass_mismatches)));
            }
            Ok(())
        }
    }
}

fn moe(args: MoeArgs, out: &mut dyn Write) -> Result<()> {
    let report = moe_report(args.n, args.m, args.k, args.d, args.hidden, resolve_seed(args.seed)?)?;
    print_json(out, &report)?;
    if !report.outputs_identical {
        return Err(Error::InvalidArgument("expert-ordered and token-ordered outputs differ".into()));
    }
    Ok(())
}

fn show_breakdown(args: BreakdownArgs, out: &mut dyn Write) -> Result<()> {
    let report: RunReport = serde_json::from_slice(&std::fs::read(&args.report)?)?;
    let b = breakdown(&report)?;
    if args.json {
        print_json(out, &b)
    } else {
        write!(out, "{}", b.to_text(50))?;
        Ok(())
    }
}

fn gen_weights(args: GenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match (&args.source.preset, &args.source.config) {
        (Some(name), _) => preset(name)?,
        (_, Some(path)) => config_from_file(path)?,
        _ => unreachable!("clap requires one source"),
    };
    let seed = resolve_seed(args.seed)?;
    write_random_weights(&cfg, seed, std::fs::File::create(&args.out)?)?;
    print_json(out, &json!({ "model": cfg.name, "seed": seed, "out": args.out, "bytes": std::fs::metadata(&args.out)?.len() }))
}

fn presets(out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{:<12} {:>6} {:>7} {:>6} {:>6} {:>8} {:>4} {:>6}", "name", "layers", "hidden", "mlp", "heads", "experts", "k", "h_moe")?;
    for name in PRESET_NAMES {
        let c = preset(name)?;
        let (m, k, h) = if c.use_moe { (c.m_experts.to_string(), c.top_k.to_string(), c.h_moe.to_string()) } else { ("-".into(), "-".into(), "-".into()) };
        writeln!(out, "{:<12} {:>6} {:>7} {:>6} {:>6} {:>8} {:>4} {:>6}", c.name, c.n_blocks, c.d, c.mlp_dim, c.n_heads, m, k, h)?;
    }
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run(a) => run(a, out),
        Command::Traffic(a) => traffic(a, out),
        Command::Approx(c) => approx(c, out),
        Command::MoeReport(a) => moe(a, out),
        Command::Breakdown(a) => show_breakdown(a, out),
        Command::GenWeights(a) => gen_weights(a, out),
        Command::Presets => presets(out),
    }
}

/// Parse and run. Returns the process exit code: 0 on success, 2 for usage
/// errors, 1 for runtime failures.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = dispatch(std::iter::once("emoe").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn presets_table() {
        let (code, out, _) = call(&["presets"]);
        assert_eq!(code, 0);
        let row = out.lines().find(|l| l.starts_with("m3vit")).unwrap();
        let cols: Vec<_> = row.split_whitespace().collect();
        assert_eq!(&cols[1..5], ["12", "192", "768", "3"]);
    }

    #[test]
    fn traffic_matches_closed_form() {
        let (code, out, _) = call(&["traffic", "--n", "128", "--p", "4"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["measured"]["blocks_loaded"], 4227);
        assert_eq!(v["analytic"]["data_load"], 4227);
        assert_eq!(v["exact_match"], true);
        let (_, out, _) = call(&["traffic", "--n", "4", "--p", "4", "--naive", "--phase", "mv"]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["measured"]["blocks_loaded"], 20);
    }

    #[test]
    fn usage_and_runtime_errors() {
        assert_eq!(call(&["traffic", "--n", "4"]).0, 2);
        assert_eq!(call(&["frobnicate"]).0, 2);
        assert_eq!(call(&["traffic", "--n", "4", "--p", "1", "--bogus"]).0, 2);
        let (code, _, err) = call(&["traffic", "--n", "4", "--p", "8"]);
        assert_eq!(code, 1);
        assert!(err.contains("parallelism"));
        assert_eq!(call(&["approx", "gelu", "--step", "0.3"]).0, 1);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn step_parsing() {
        assert_eq!(parse_step("2^-10").unwrap(), 2f64.powi(-10));
        assert_eq!(parse_step("0.125").unwrap(), 0.125);
        assert!(parse_step("3^-2").is_err());
        assert!(parse_step("0.1").is_err());
    }

    #[test]
    fn synthetic_images_are_seeded() {
        assert_eq!(load_image("synthetic:0", 8, 8).unwrap(), load_image("synthetic:0", 8, 8).unwrap());
        assert!(load_image("synthetic:x", 8, 8).is_err());
        assert!(load_image("/nonexistent/file", 8, 8).is_err());
    }
}
