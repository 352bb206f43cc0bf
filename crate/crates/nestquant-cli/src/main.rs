//! `nestquant` — command-line front end for the E8 nested-lattice quantizer.
//!
//! Subcommands cover matrix quantization (`quantize`, `dequantize`,
//! `matmul`), the synthetic rate-distortion benchmark (`bench`), closed-form
//! bound tables (`bounds`), β-ladder optimization (`optimize-betas`),
//! lattice NSM estimation (`nsm`), shaping-region measures
//! (`measure-shaping`), and Hessian-feedback weight quantization (`ldlq`).
//!
//! Every stochastic command requires an explicit `--seed`; given identical
//! flags, output files and stdout are byte-identical across runs and across
//! `--threads` settings. Exit codes: 0 success, 2 I/O/format/usage,
//! 3 shape or config mismatch, 4 numerical failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nestquant::bench::{self, BenchSpec};
use nestquant::beta::{self, MarginKind, Preset};
use nestquant::bounds::{self, NsmLattice, ShapingRegion};
use nestquant::codec::{self, QuantizerConfig, Strategy};
use nestquant::io::{read_dmat_path, read_nlq1_path, write_dmat_path, write_nlq1_path};
use nestquant::lattice::DIM;
use nestquant::ldlq::{self, NestQuantBlockQuantizer, NoiseModel, RtnQuantizer};
use nestquant::sampling;
use nestquant::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nestquant",
    version,
    about = "Nested-lattice (E8) quantization for approximate matrix multiplication"
)]
struct Cli {
    /// Cap the worker-thread count (default: all cores). Results do not
    /// depend on this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a DMAT matrix into an NLQ1 container and print the rate.
    Quantize(QuantizeArgs),
    /// Reconstruct a DMAT matrix from an NLQ1 container.
    Dequantize(DequantizeArgs),
    /// Approximate A·Bᵀ from two NLQ1 containers, writing a DMAT.
    Matmul(MatmulArgs),
    /// Synthetic Gaussian matmul rate-distortion benchmark (CSV).
    Bench(BenchArgs),
    /// Closed-form bound tables Γ(R) and D(R) (CSV).
    Bounds(BoundsArgs),
    /// Pick an optimal β ladder for Gaussian blocks by dynamic programming.
    OptimizeBetas(OptimizeBetasArgs),
    /// Monte-Carlo normalized second moment of a lattice quantizer.
    Nsm(NsmArgs),
    /// Gaussian complement measures of equal-volume shaping regions (CSV).
    MeasureShaping(MeasureShapingArgs),
    /// Hessian-feedback (LDLQ / QA-LDLQ) weight quantization.
    Ldlq(LdlqArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input matrix (DMAT).
    #[arg(long)]
    input: PathBuf,
    /// Output container (NLQ1).
    #[arg(long)]
    output: PathBuf,
    /// Nesting ratio q (codebook has q⁸ points per β).
    #[arg(long)]
    q: u16,
    /// Explicit comma-separated absolute β ladder (alternative to --k).
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["k", "universe"])]
    betas: Option<Vec<f64>>,
    /// Ladder size; β's are chosen by DP over --universe on the input blocks.
    #[arg(long, requires = "universe")]
    k: Option<usize>,
    /// Candidate grid for --k: four-point | half-integer | wide.
    #[arg(long, requires = "k")]
    universe: Option<String>,
    /// Per-block β assignment: opt | first.
    #[arg(long, default_value = "opt")]
    strategy: String,
    /// Overload headroom on the largest β: none | weights | activations.
    #[arg(long, default_value = "none")]
    margin: String,
}

#[derive(Args)]
struct DequantizeArgs {
    /// Input container (NLQ1).
    #[arg(long)]
    input: PathBuf,
    /// Output matrix (DMAT).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MatmulArgs {
    /// Left operand (NLQ1); the product is A·Bᵀ.
    #[arg(long)]
    a: PathBuf,
    /// Right operand (NLQ1), quantized with the same configuration.
    #[arg(long)]
    b: PathBuf,
    /// Output product matrix (DMAT).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Operand size (n×n, multiple of 8).
    #[arg(long, default_value_t = 512, conflicts_with = "full")]
    n: usize,
    /// Run the full-size benchmark (n = 4096).
    #[arg(long)]
    full: bool,
    /// RNG seed for the Gaussian operands.
    #[arg(long)]
    seed: u64,
    /// Comma-separated configs, e.g. "q14,q16k6,u4" (default: the full
    /// sweep q∈{6,8,…,18} at k=4 plus uniform 2–5 bit baselines).
    #[arg(long)]
    configs: Option<String>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Rate sweep as start:step:end, e.g. 0:0.25:5.
    #[arg(long)]
    rates: String,
}

#[derive(Args)]
struct OptimizeBetasArgs {
    /// Candidate grid: four-point | half-integer | wide.
    #[arg(long)]
    preset: String,
    /// Nesting ratio.
    #[arg(long)]
    q: u16,
    /// Ladder size.
    #[arg(long)]
    k: usize,
    /// Number of Gaussian sample blocks to profile.
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    /// RNG seed for the sample blocks.
    #[arg(long)]
    seed: u64,
    /// Overload headroom on the largest β: none | weights | activations.
    #[arg(long, default_value = "none")]
    margin: String,
    /// Also write the per-sample error profile as CSV to this path.
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Args)]
struct NsmArgs {
    /// Lattice: e8 | z.
    #[arg(long)]
    lattice: String,
    /// Monte-Carlo sample count (at least 10⁶).
    #[arg(long)]
    samples: usize,
    /// RNG seed.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct MeasureShapingArgs {
    /// Comma-separated region scales (each region has volume scale⁸).
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    /// Monte-Carlo sample count per region (at least 10⁴).
    #[arg(long)]
    samples: usize,
    /// RNG seed.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct LdlqArgs {
    /// Weight matrix to quantize (DMAT, rows are output channels).
    #[arg(long)]
    weights: PathBuf,
    /// Hessian proxy H (DMAT, symmetric positive semi-definite).
    #[arg(long, conflicts_with = "activations", required_unless_present = "activations")]
    hessian: Option<PathBuf>,
    /// Calibration activations X (DMAT, one sample per row); H = XᵀX/N.
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Diagonal ridge added to H (default: 10⁻⁶·tr(H)/n).
    #[arg(long)]
    ridge: Option<f64>,
    /// Effective-noise power ε² for quantization-aware LDLQ (0 = plain).
    #[arg(long, default_value_t = 0.0)]
    eps2: f64,
    /// Block quantizer: nested (needs --q/--betas) | rtn (needs --step).
    #[arg(long, default_value = "nested")]
    quantizer: String,
    /// Nesting ratio for the nested quantizer.
    #[arg(long)]
    q: Option<u16>,
    /// Comma-separated absolute β ladder for the nested quantizer.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Step size for the round-to-nearest quantizer.
    #[arg(long)]
    step: Option<f64>,
    /// Output quantized weights Û (DMAT).
    #[arg(long)]
    output: PathBuf,
    /// Also report tr((W−Û)H(W−Û)ᵀ) amplification vs direct rounding on
    /// Monte-Carlo activation directions (needs --activations and --seed).
    #[arg(long)]
    amplification: bool,
    /// Monte-Carlo directions for --amplification.
    #[arg(long, default_value_t = 20_000)]
    mc_samples: usize,
    /// RNG seed (required by --amplification).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: building the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) | Error::Format(_) | Error::InvalidArgument(_) => 2,
                Error::ShapeMismatch(_) | Error::ConfigMismatch(_) => 3,
                Error::Numerical(_) => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Quantize(args) => cmd_quantize(args, &mut out),
        Command::Dequantize(args) => cmd_dequantize(args),
        Command::Matmul(args) => cmd_matmul(args),
        Command::Bench(args) => cmd_bench(args, &mut out),
        Command::Bounds(args) => cmd_bounds(args, &mut out),
        Command::OptimizeBetas(args) => cmd_optimize_betas(args, &mut out),
        Command::Nsm(args) => cmd_nsm(args, &mut out),
        Command::MeasureShaping(args) => cmd_measure_shaping(args, &mut out),
        Command::Ldlq(args) => cmd_ldlq(args, &mut out),
    }
}

fn usage_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_strategy(name: &str) -> Result<Strategy> {
    match name {
        "opt" => Ok(Strategy::Opt),
        "first" => Ok(Strategy::First),
        other => Err(usage_err(format!(
            "unknown strategy \"{other}\" (expected opt or first)"
        ))),
    }
}

fn parse_margin(name: &str) -> Result<Option<MarginKind>> {
    match name {
        "none" => Ok(None),
        "weights" => Ok(Some(MarginKind::Weights)),
        "activations" => Ok(Some(MarginKind::Activations)),
        other => Err(usage_err(format!(
            "unknown margin \"{other}\" (expected none, weights, or activations)"
        ))),
    }
}

fn cmd_quantize<W: Write>(args: QuantizeArgs, out: &mut W) -> Result<()> {
    let strategy = parse_strategy(&args.strategy)?;
    let margin = parse_margin(&args.margin)?;
    let m = read_dmat_path(&args.input)?;
    let cfg = match (&args.betas, args.k) {
        (Some(betas), None) => {
            let mut betas = betas.clone();
            if let Some(kind) = margin {
                beta::apply_margin(&mut betas, kind, args.q)?;
            }
            QuantizerConfig::new(args.q, betas, strategy)?
        }
        (None, Some(k)) => {
            let preset = Preset::parse(args.universe.as_deref().unwrap_or_default())?;
            let universe = beta::preset_universe(preset);
            bench::fit_nestquant_config(&[&m], args.q, k, &universe, margin)?
                .with_strategy(strategy)
        }
        (None, None) | (Some(_), Some(_)) => {
            return Err(usage_err(
                "exactly one of --betas or --k/--universe must be given",
            ))
        }
    };
    let qm = codec::quantize_matrix(&m, &cfg)?;
    write_nlq1_path(&qm, &args.output)?;
    let hist = codec::beta_histogram(&qm);
    let (fixed, entropy) = codec::effective_rate(&cfg, &hist)?;
    // The β column round-trips exactly through --betas (shortest-roundtrip
    // float formatting), so a ladder fitted on one operand can be reused on
    // the other to make the containers matmul-compatible.
    let betas = cfg
        .betas()
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";");
    writeln!(out, "bits_fixed,bits_entropy,rows,cols,q,k,betas")?;
    writeln!(
        out,
        "{fixed:.2},{entropy:.2},{},{},{},{},{betas}",
        m.rows(),
        m.cols(),
        cfg.q(),
        cfg.k()
    )?;
    Ok(())
}

fn cmd_dequantize(args: DequantizeArgs) -> Result<()> {
    let qm = read_nlq1_path(&args.input)?;
    let m = codec::dequantize_matrix(&qm)?;
    write_dmat_path(&m, &args.output)
}

fn cmd_matmul(args: MatmulArgs) -> Result<()> {
    let a = read_nlq1_path(&args.a)?;
    let b = read_nlq1_path(&args.b)?;
    let product = codec::quantized_matmul(&a, &b)?;
    write_dmat_path(&product, &args.output)
}

/// Parses one benchmark config token: `qN` (codec, k = 4), `qNkM`, or `uB`
/// (uniform baseline at B bits).
fn parse_bench_token(token: &str) -> Result<BenchSpec> {
    let bad = || {
        usage_err(format!(
            "bad config token \"{token}\" (expected e.g. q14, q16k6, or u4)"
        ))
    };
    if let Some(bits) = token.strip_prefix('u') {
        return Ok(BenchSpec::uniform(bits.parse().map_err(|_| bad())?));
    }
    let Some(rest) = token.strip_prefix('q') else {
        return Err(bad());
    };
    let (q_str, k_str) = match rest.split_once('k') {
        Some((q, k)) => (q, Some(k)),
        None => (rest, None),
    };
    let q: u16 = q_str.parse().map_err(|_| bad())?;
    let k: usize = match k_str {
        Some(k) => k.parse().map_err(|_| bad())?,
        None => 4,
    };
    Ok(BenchSpec::nestquant(q, k, Preset::Wide))
}

fn cmd_bench<W: Write>(args: BenchArgs, out: &mut W) -> Result<()> {
    let n = if args.full { 4096 } else { args.n };
    let specs = match &args.configs {
        Some(list) => list
            .split(',')
            .filter(|t| !t.is_empty())
            .map(parse_bench_token)
            .collect::<Result<Vec<_>>>()?,
        None => bench::default_configs(),
    };
    if specs.is_empty() {
        return Err(usage_err("no benchmark configs given"));
    }
    let points = bench::synthetic_matmul_benchmark(n, &specs, args.seed)?;
    match &args.output {
        Some(path) => {
            let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
            bench::write_benchmark_csv(&points, args.seed, n, &mut file)?;
            file.flush()?;
            Ok(())
        }
        None => bench::write_benchmark_csv(&points, args.seed, n, out),
    }
}

/// Parses a `start:step:end` sweep into its grid points.
fn parse_rates(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, step, end] = parts.as_slice() else {
        return Err(usage_err(format!(
            "bad rate sweep \"{spec}\" (expected start:step:end)"
        )));
    };
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| usage_err(format!("bad number \"{s}\" in rate sweep")))
    };
    let (start, step, end) = (parse(start)?, parse(step)?, parse(end)?);
    let finite = start.is_finite() && step.is_finite() && end.is_finite();
    if !finite || start < 0.0 || step <= 0.0 || end < start {
        return Err(usage_err(
            "rate sweep needs start ≥ 0, step > 0, end ≥ start",
        ));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}

fn cmd_bounds<W: Write>(args: BoundsArgs, out: &mut W) -> Result<()> {
    let rates = parse_rates(&args.rates)?;
    writeln!(out, "rate,gamma_lower_bound,gaussian_rate_distortion")?;
    for r in rates {
        writeln!(
            out,
            "{r},{},{}",
            bounds::gamma_lower_bound(r)?,
            bounds::rate_distortion_gaussian(r)?
        )?;
    }
    Ok(())
}

fn cmd_optimize_betas<W: Write>(args: OptimizeBetasArgs, out: &mut W) -> Result<()> {
    const MAX_SAMPLES: usize = 1 << 22;
    if args.samples == 0 || args.samples > MAX_SAMPLES {
        return Err(usage_err(format!(
            "--samples must be in [1, {MAX_SAMPLES}]"
        )));
    }
    let preset = Preset::parse(&args.preset)?;
    let margin = parse_margin(&args.margin)?;
    let universe = beta::absolute_universe(&beta::preset_universe(preset), args.q)?;
    let samples = sampling::gaussian_blocks(args.seed, args.samples);
    let profile = beta::profile_errors(&samples, &universe, args.q)?;
    if let Some(path) = &args.profile_out {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        beta::write_profile_csv(&profile, &mut file)?;
        file.flush()?;
    }
    let (chosen, cost) = beta::dp_optimal_betas(&profile, args.k)?;
    let mut betas: Vec<f64> = chosen.iter().map(|&i| universe[i]).collect();
    if let Some(kind) = margin {
        beta::apply_margin(&mut betas, kind, args.q)?;
    }

    // Measure the realized reconstruction RMSE of the chosen ladder on the
    // profiled blocks under both assignment strategies.
    let rmse = |strategy: Strategy| -> Result<f64> {
        let cfg = QuantizerConfig::new(args.q, betas.clone(), strategy)?;
        let mut err = 0.0;
        for s in &samples {
            let (rep, _) = codec::quantize_block(s, &cfg)?;
            err += s
                .iter()
                .zip(&rep)
                .map(|(x, r)| (x - r) * (x - r))
                .sum::<f64>();
        }
        Ok((err / (samples.len() * DIM) as f64).sqrt())
    };
    let (rmse_opt, rmse_first) = (rmse(Strategy::Opt)?, rmse(Strategy::First)?);

    let betas_hat = betas
        .iter()
        .map(|b| format!("{}", b * args.q as f64))
        .collect::<Vec<_>>()
        .join(";");
    writeln!(
        out,
        "q,k,betas_hat,dp_mse_per_coordinate,rmse_opt,rmse_first"
    )?;
    writeln!(
        out,
        "{},{},{betas_hat},{},{rmse_opt},{rmse_first}",
        args.q,
        args.k,
        cost / (samples.len() * DIM) as f64
    )?;
    Ok(())
}

fn cmd_nsm<W: Write>(args: NsmArgs, out: &mut W) -> Result<()> {
    let lattice = NsmLattice::parse(&args.lattice)?;
    let (nsm, stderr) = bounds::nsm_estimate(lattice, args.samples, args.seed)?;
    writeln!(out, "lattice,samples,nsm,stderr")?;
    writeln!(out, "{},{},{nsm},{stderr}", args.lattice, args.samples)?;
    Ok(())
}

fn cmd_measure_shaping<W: Write>(args: MeasureShapingArgs, out: &mut W) -> Result<()> {
    if args.scales.is_empty() {
        return Err(usage_err("--scales must list at least one scale"));
    }
    writeln!(out, "scale,region,complement,stderr")?;
    for &scale in &args.scales {
        for (name, region) in [("cube", ShapingRegion::Cube), ("e8-voronoi", ShapingRegion::E8Voronoi)] {
            let (p, se) = bounds::gaussian_measure_region(region, scale, args.samples, args.seed)?;
            writeln!(out, "{scale},{name},{},{se}", 1.0 - p)?;
        }
        // The equal-volume ball has a closed-form Gaussian measure.
        let radius = bounds::equal_volume_ball_radius(scale)?;
        let p = bounds::gaussian_measure_ball(radius)?;
        writeln!(out, "{scale},ball,{},0", 1.0 - p)?;
    }
    Ok(())
}

fn cmd_ldlq<W: Write>(args: LdlqArgs, out: &mut W) -> Result<()> {
    let w = read_dmat_path(&args.weights)?;
    let activations = args
        .activations
        .as_ref()
        .map(read_dmat_path)
        .transpose()?;
    let h = match (&args.hessian, &activations) {
        (Some(path), None) => read_dmat_path(path)?,
        (None, Some(x)) => {
            let mut acc = ldlq::Hessian::new(x.cols())?;
            acc.accumulate_batch(x)?;
            acc.matrix()?
        }
        // clap enforces exactly one source, but keep a defensive error.
        _ => return Err(usage_err("need exactly one of --hessian/--activations")),
    };
    if args.eps2 < 0.0 || !args.eps2.is_finite() {
        return Err(usage_err("--eps2 must be nonnegative and finite"));
    }
    let ridge = match args.ridge {
        Some(r) if r >= 0.0 && r.is_finite() => r,
        Some(_) => return Err(usage_err("--ridge must be nonnegative and finite")),
        None => ldlq::default_ridge(&h),
    };
    let noise = NoiseModel { eps2: args.eps2 };

    let u_hat = match args.quantizer.as_str() {
        "nested" => {
            let (Some(q), Some(betas)) = (args.q, args.betas.clone()) else {
                return Err(usage_err(
                    "the nested quantizer needs --q and --betas",
                ));
            };
            let cfg = QuantizerConfig::new(q, betas, Strategy::Opt)?;
            let quantizer = NestQuantBlockQuantizer::new(cfg);
            ldlq::qa_ldlq_quantize(&w, &h, noise, ridge, &quantizer)?.u_hat
        }
        "rtn" => {
            let Some(step) = args.step else {
                return Err(usage_err("the rtn quantizer needs --step"));
            };
            let quantizer = RtnQuantizer::new(step)?;
            ldlq::qa_ldlq_quantize(&w, &h, noise, ridge, &quantizer)?.u_hat
        }
        other => {
            return Err(usage_err(format!(
                "unknown quantizer \"{other}\" (expected nested or rtn)"
            )))
        }
    };
    write_dmat_path(&u_hat, &args.output)?;

    writeln!(out, "metric,value")?;
    writeln!(out, "proxy_loss,{}", ldlq::proxy_loss(&w, &u_hat, &h)?)?;
    if args.eps2 > 0.0 {
        writeln!(
            out,
            "noisy_loss,{}",
            ldlq::noisy_loss(&w, &u_hat, &h, args.eps2)?
        )?;
        writeln!(
            out,
            "irreducible_noisy_loss,{}",
            ldlq::irreducible_noisy_loss(&w, &h, args.eps2, ridge)?
        )?;
    }
    if args.amplification {
        let (Some(x), Some(seed)) = (&activations, args.seed) else {
            return Err(usage_err(
                "--amplification needs --activations and --seed",
            ));
        };
        writeln!(
            out,
            "amplification_ratio,{}",
            ldlq::amplification_ratio(&w, x, args.mc_samples, seed)?
        )?;
    }
    Ok(())
}
