//! Command-line front end for the interconnected-systems toolkit: model
//! generation, performance analysis, controller synthesis with independent
//! re-verification, closed-loop simulation, and scaling benchmarks.
//!
//! Exit codes are part of the interface:
//!
//! * `0` — success; any artifact written was independently re-verified,
//! * `1` — honest negative: infeasible, not verified, or unstable,
//! * `2` — unusable input: bad flags, missing paths, malformed files,
//! * `3` — the model violates a structural hypothesis of the method,
//! * `4` — controller reconstruction failed (the failing stage is reported).
//!
//! Node indices in every file and message are 1-based.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use h2net::analysis::{self, AnalysisError, ResidualReport};
use h2net::bench::{self, BenchConfig, BenchMode, CentralExecution, DisturbanceSpec};
use h2net::io::{self, IoError};
use h2net::mat;
use h2net::netmodel::{self, ModelError};
use h2net::sdp::{ClarabelBackend, SolveOptions};
use h2net::synthesis::{self, GammaSpec, SynthesisError, SynthesisOptions};
use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Parser)]
#[command(
    name = "h2net",
    version,
    about = "Distributed H2 analysis, synthesis, and benchmarking on interconnection graphs",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a performance certificate, or search for one by SDP
    Analyze(AnalyzeArgs),
    /// Synthesize controllers and independently verify the closed loop
    Synth(SynthArgs),
    /// Flat disturbance-to-performance norm, computed two independent ways
    H2norm(H2normArgs),
    /// Simulate a synthesized closed loop and emit the time series as CSV
    Simulate(SimulateArgs),
    /// Scaling study: per-size, per-mode solve outcomes as CSV rows
    Bench(BenchArgs),
    /// Generate a coupled-oscillator network model file
    GenOscillator(GenOscillatorArgs),
}

/// Performance-level selection shared by `analyze` and `synth`.
#[derive(Args)]
struct LevelArgs {
    /// Fixed performance level γ
    #[arg(long)]
    gamma: Option<f64>,
    /// Bisect the smallest feasible level inside this bracket
    #[arg(long, value_name = "LO:HI", value_parser = parse_bracket, conflicts_with = "gamma")]
    bisect: Option<Bracket>,
    /// Relative gap at which bisection stops
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
}

impl LevelArgs {
    fn to_spec(&self) -> Result<GammaSpec, Failure> {
        match (self.gamma, self.bisect) {
            (Some(gamma), None) => {
                validate_level(gamma)?;
                Ok(GammaSpec::Fixed(gamma))
            }
            (None, Some(b)) => {
                if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
                    return Err(Failure::usage(format!(
                        "--rel-tol must be positive and finite, got {}",
                        self.rel_tol
                    )));
                }
                Ok(GammaSpec::Bisect { lo: b.lo, hi: b.hi, rel_tol: self.rel_tol })
            }
            (None, None) => Err(Failure::usage("one of --gamma or --bisect is required")),
            (Some(_), Some(_)) => unreachable!("clap rejects --gamma with --bisect"),
        }
    }
}

/// Bisection bracket `LO:HI`.
#[derive(Debug, Clone, Copy)]
struct Bracket {
    lo: f64,
    hi: f64,
}

fn parse_bracket(s: &str) -> Result<Bracket, String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI, e.g. 0.01:1")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("lower level: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("upper level: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(format!("bracket needs 0 < LO < HI, got {lo}:{hi}"));
    }
    Ok(Bracket { lo, hi })
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Network model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Certificate to check; without it a certificate is searched for by SDP
    #[arg(long)]
    certificate: Option<PathBuf>,
    #[command(flatten)]
    level: LevelArgs,
    /// Strictness scale ε for the definite constraints of the search
    #[arg(long, default_value_t = 1e-7)]
    eps_strict: f64,
    /// Directory for report.json and certificate.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Network model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Controller structure
    #[arg(long, value_enum, default_value_t = ModeArg::Distributed)]
    mode: ModeArg,
    #[command(flatten)]
    level: LevelArgs,
    /// Seed for the controller-parameter tie-break
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Strictness scale ε for the definite constraints of the programs
    #[arg(long, default_value_t = 1e-7)]
    eps_strict: f64,
    /// Directory for model.json, controllers.json, certificate.json, report.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct H2normArgs {
    /// Network model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Report file (JSON)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Network model file the controllers were synthesized for (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Controller file written by `synth` (JSON)
    #[arg(long)]
    controllers: PathBuf,
    /// Requested horizon; extended to cover ten closed-loop time constants
    #[arg(long, default_value_t = 1000)]
    horizon: usize,
    /// Seed for the disturbance and initial-state draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disturbance model
    #[arg(long, value_enum, default_value_t = NoiseArg::White)]
    noise: NoiseArg,
    /// Initial plant state (controller states always start at zero)
    #[arg(long, value_enum, default_value_t = InitArg::Random)]
    x0: InitArg,
    /// Time-series file (CSV); without it the series goes to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Network sizes to benchmark, e.g. 3,10,50
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...", required = true)]
    sizes: Vec<usize>,
    /// Synthesis modes to time
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Distributed, ModeArg::Central])]
    modes: Vec<ModeArg>,
    /// Performance level for every existence program
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    /// Wall-clock budget per row; over-budget rows are killed and marked
    #[arg(long, default_value_t = 240.0)]
    budget_secs: f64,
    /// Base seed; row seeds are seed + L
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// How centralized rows run
    #[arg(long, value_enum, default_value_t = CentralArg::Child)]
    central: CentralArg,
    /// Strictness scale ε for the definite constraints of the programs
    #[arg(long, default_value_t = 1e-7)]
    eps_strict: f64,
    /// Run rows in parallel (distorts timings; for feasibility sweeps only)
    #[arg(long)]
    parallel: bool,
    /// CSV file; without it the rows go to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenOscillatorArgs {
    /// Number of oscillators on a ring, parameters drawn from the seed
    #[arg(long, required_unless_present = "triangle", conflicts_with = "triangle")]
    nodes: Option<usize>,
    /// Generate the fixed three-oscillator reference network instead
    #[arg(long)]
    triangle: bool,
    /// Seed for the parameter draws
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Model file to write (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Controllers exchange states with their graph neighbors
    Distributed,
    /// Purely local controllers against fixed channel multipliers
    Decentralized,
    /// One controller for the flattened network (baseline)
    Central,
}

impl ModeArg {
    fn as_str(self) -> &'static str {
        match self {
            ModeArg::Distributed => "distributed",
            ModeArg::Decentralized => "decentralized",
            ModeArg::Central => "central",
        }
    }

    fn to_bench(self) -> BenchMode {
        match self {
            ModeArg::Distributed => BenchMode::Distributed,
            ModeArg::Decentralized => BenchMode::Decentralized,
            ModeArg::Central => BenchMode::Central,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NoiseArg {
    /// d ≡ 0
    Zero,
    /// Independent standard-normal disturbances
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    /// x(0) = 0
    Zero,
    /// x(0) drawn standard normal from the seed
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CentralArg {
    /// Spawn `h2net synth --mode central` per row and kill it at the budget
    Child,
    /// Solve in this process under the solver's own time limit
    InProcess,
}

/// A command failure carrying its exit code. Messages go to stderr.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Self { code: 2, message: e.to_string() }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            // A numerically singular interconnection is a property of the
            // system, reported as a verification failure, not a bad file.
            ModelError::SingularInterconnection { .. } => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            AnalysisError::HypothesisViolated(_) => Self { code: 3, message: e.to_string() },
            AnalysisError::Unstable { .. } | AnalysisError::LyapunovResidual { .. } => {
                Self { code: 1, message: e.to_string() }
            }
            AnalysisError::Invalid(_) => Self { code: 2, message: e.to_string() },
        }
    }
}

impl From<SynthesisError> for Failure {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Model(m) => m.into(),
            SynthesisError::Analysis(a) => a.into(),
            SynthesisError::HypothesisViolated(_) => Self { code: 3, message: e.to_string() },
            SynthesisError::Infeasible { .. } | SynthesisError::Sdp(_) => {
                Self { code: 1, message: e.to_string() }
            }
            SynthesisError::NearSingularCompletion { .. }
            | SynthesisError::CompletionPostcondition { .. }
            | SynthesisError::SingularY { .. }
            | SynthesisError::InertiaMismatch { .. }
            | SynthesisError::SingularZ { .. }
            | SynthesisError::SingularPi { .. }
            | SynthesisError::EliminationPreconditionFailed { .. }
            | SynthesisError::ReconstructionFailed { .. } => {
                Self { code: 4, message: e.to_string() }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Synth(args) => cmd_synth(args),
        Command::H2norm(args) => cmd_h2norm(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::GenOscillator(args) => cmd_gen_oscillator(args),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<u8, Failure> {
    let model = io::load_model(&args.model)?;
    let opts = solve_options(args.eps_strict)?;

    let cert = if let Some(cert_path) = &args.certificate {
        if args.level.bisect.is_some() {
            return Err(Failure::usage(
                "--bisect searches for a fresh certificate and cannot be combined with --certificate",
            ));
        }
        let mut cert = io::load_certificate(cert_path, model.topology())?;
        if let Some(gamma) = args.level.gamma {
            validate_level(gamma)?;
            cert.gamma = gamma;
        }
        Some(cert)
    } else {
        let search = match args.level.to_spec()? {
            GammaSpec::Fixed(gamma) => {
                synthesis::find_certificate(&model, gamma, &ClarabelBackend, &opts)
            }
            GammaSpec::Bisect { lo, hi, rel_tol } => {
                synthesis::min_analysis_gamma(&model, lo, hi, rel_tol, &ClarabelBackend, &opts)
                    .map(|(gamma, cert)| {
                        println!("minimal certifiable level in [{lo}, {hi}]: γ = {gamma:.6}");
                        cert
                    })
            }
        };
        match search {
            Ok(cert) => Some(cert),
            Err(SynthesisError::Infeasible { gamma, worst_margin }) => {
                eprintln!("no certificate at level γ = {gamma} (worst margin {worst_margin:e})");
                if let Some(dir) = &args.out {
                    ensure_dir(dir)?;
                    io::save_json(
                        dir.join("report.json"),
                        &serde_json::json!({ "gamma": gamma, "strict": false, "status": "infeasible" }),
                    )?;
                }
                None
            }
            Err(e) => return Err(e.into()),
        }
    };
    let Some(cert) = cert else { return Ok(1) };

    let rr = analysis::analysis_residuals(&model, &cert)?;
    print_residual_summary(&rr, cert.gamma);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        io::save_certificate(dir.join("certificate.json"), &cert)?;
        io::save_json(dir.join("report.json"), &io::residual_report_json(&rr, cert.gamma))?;
        println!("artifacts in {}", dir.display());
    }
    Ok(if rr.strict { 0 } else { 1 })
}

fn cmd_synth(args: SynthArgs) -> Result<u8, Failure> {
    let model = io::load_model(&args.model)?;
    let spec = args.level.to_spec()?;
    let opts = SynthesisOptions {
        sdp: solve_options(args.eps_strict)?,
        theta_seed: args.seed,
        ..SynthesisOptions::default()
    };
    let result = match args.mode {
        ModeArg::Distributed => {
            synthesis::synthesize_distributed(&model, spec, &ClarabelBackend, &opts)
        }
        ModeArg::Decentralized => {
            synthesis::synthesize_decentralized(&model, spec, None, &ClarabelBackend, &opts)
        }
        ModeArg::Central => synthesis::synthesize_centralized(&model, spec, &ClarabelBackend, &opts),
    }?;

    ensure_dir(&args.out)?;
    // The network the controllers attach to — for central mode the flattened
    // single-node network, not the input — so the directory is self-contained
    // for `simulate`.
    io::save_model(args.out.join("model.json"), &result.model)?;
    io::save_controllers(args.out.join("controllers.json"), &result.locals)?;
    // The closed-loop network with its certificate, so the verification can
    // be re-run from disk alone: `analyze --model closed_loop.json
    // --certificate certificate.json`.
    let closed = netmodel::closed_loop_network(&result.model, &result.locals)?;
    io::save_model(args.out.join("closed_loop.json"), &closed)?;
    io::save_certificate(args.out.join("certificate.json"), &result.closed_certificate)?;
    io::save_json(
        args.out.join("report.json"),
        &io::closed_loop_report_json(&result.report, result.gamma),
    )?;

    let report = &result.report;
    println!(
        "mode {} on {} node(s): achieved γ = {:.6}",
        args.mode.as_str(),
        result.model.nodes().len(),
        result.gamma
    );
    println!(
        "closed loop: well-posed = {} (rcond {:.2e}), spectral radius = {:.6}, flat H2 = {:.6} (< γ: {})",
        report.well_posed, report.rcond, report.spectral_radius, report.h2_norm, report.h2_within_gamma
    );
    print_residual_summary(&report.residuals, result.gamma);
    println!("controller parameter consistency: {}", report.theta_consistent);
    println!("verified: {}", report.ok);
    println!("artifacts in {}", args.out.display());
    Ok(if report.ok { 0 } else { 1 })
}

fn cmd_h2norm(args: H2normArgs) -> Result<u8, Failure> {
    let model = io::load_model(&args.model)?;
    let (well_posed, rcond) = netmodel::well_posed(&model);
    println!("well-posed: {well_posed} (rcond {rcond:.2e})");
    let flat = netmodel::assemble_interconnected(&model)?;
    let radius = mat::spectral_radius(&flat.a);
    println!("spectral radius: {radius:.6}");
    let lyapunov = analysis::h2_norm_lyapunov(&flat)?;
    let freqgrid = analysis::h2_norm_freqgrid(&flat)?;
    let rel = (lyapunov - freqgrid).abs() / lyapunov.max(f64::MIN_POSITIVE);
    println!("H2 (Lyapunov):       {lyapunov:.9}");
    println!("H2 (frequency grid): {freqgrid:.9}");
    println!("relative difference: {rel:.3e}");
    if let Some(path) = &args.out {
        io::save_json(
            path,
            &serde_json::json!({
                "well_posed": well_posed,
                "rcond": rcond,
                "spectral_radius": radius,
                "h2_lyapunov": lyapunov,
                "h2_freqgrid": freqgrid,
                "relative_difference": rel,
            }),
        )?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

/// Decorrelates the initial-state draw from the disturbance stream, which is
/// seeded with the plain `--seed` inside the simulator.
const X0_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let model = io::load_model(&args.model)?;
    let entries = io::load_controllers(&args.controllers)?;
    let locals = io::close_with_entries(&model, &entries)?;

    let k_total = *model.state_offsets().last().expect("offsets end with the total");
    let mut x0 = DVector::zeros(k_total);
    if args.x0 == InitArg::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ X0_SEED_SALT);
        for v in x0.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    let xi0 = DVector::zeros(k_total);
    let noise = match args.noise {
        NoiseArg::Zero => DisturbanceSpec::Zero,
        NoiseArg::White => DisturbanceSpec::WhiteUnit,
    };
    if args.horizon == 0 {
        return Err(Failure::usage("--horizon must be at least 1"));
    }
    let result =
        bench::simulate_closed_loop(&model, &locals, &x0, &xi0, noise, args.horizon, args.seed)?;

    let mut summary = vec![
        format!(
            "horizon {} (requested {}), tail window starts at step {}",
            result.horizon, args.horizon, result.tail_start
        ),
        format!("tail mean ‖z‖² = {:.6}", result.tail_mean_z2),
        format!("final plant state norm = {:.3e}", result.x.row(result.horizon - 1).norm()),
    ];
    if args.noise == NoiseArg::White {
        if let Ok(h2) = netmodel::closed_loop_network(&model, &locals)
            .map_err(AnalysisError::from)
            .and_then(|closed| {
                analysis::h2_norm_lyapunov(&netmodel::assemble_interconnected(&closed)?)
            })
        {
            summary.push(format!("stationary reference E‖z‖² = H2² = {:.6}", h2 * h2));
        }
    }

    let csv = result.to_csv();
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            for line in &summary {
                println!("{line}");
            }
            println!("wrote {}", path.display());
        }
        None => {
            print!("{csv}");
            for line in &summary {
                eprintln!("{line}");
            }
        }
    }
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> Result<u8, Failure> {
    let mut sizes = args.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.first() == Some(&0) {
        return Err(Failure::usage("--sizes entries must be at least 1"));
    }
    validate_level(args.gamma)?;
    if !(args.budget_secs.is_finite() && args.budget_secs > 0.0) {
        return Err(Failure::usage(format!(
            "--budget-secs must be positive and finite, got {}",
            args.budget_secs
        )));
    }
    let modes: Vec<BenchMode> = args.modes.iter().map(|m| m.to_bench()).collect();
    let mut config =
        BenchConfig::new(sizes, args.gamma, modes, Duration::from_secs_f64(args.budget_secs));
    config.seed = args.seed;
    config.sdp = solve_options(args.eps_strict)?;
    config.parallel = args.parallel;
    config.central = match args.central {
        CentralArg::Child => CentralExecution::Child {
            exe: std::env::current_exe().map_err(|e| {
                Failure::usage(format!("cannot locate this executable for child runs: {e}"))
            })?,
        },
        CentralArg::InProcess => CentralExecution::InProcess,
    };

    let rows = bench::bench_scaling(&config, &ClarabelBackend);
    let csv = bench::bench_csv(&rows);
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            print!("{csv}");
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_gen_oscillator(args: GenOscillatorArgs) -> Result<u8, Failure> {
    let (model, description) = if args.triangle {
        (
            bench::reference_triangle(),
            "reference triangle (m = 3,1,2; b = 2,1,4; unit stiffness; T = 0.1)".to_string(),
        )
    } else {
        let l = args.nodes.expect("clap enforces --nodes unless --triangle");
        if l == 0 {
            return Err(Failure::usage("--nodes must be at least 1"));
        }
        (
            bench::random_cycle_oscillator(l, args.seed),
            format!("ring of {l} oscillator(s), parameters drawn with seed {}", args.seed),
        )
    };
    io::save_model(&args.out, &model)?;
    println!("wrote {}: {description}", args.out.display());
    Ok(0)
}

fn print_residual_summary(rr: &ResidualReport, gamma: f64) {
    let max_lambda = rr.lambda_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "node residuals: max λ = {max_lambda:.3e} ({} of {} negative definite)",
        rr.lambda_max.iter().filter(|&&l| l < 0.0).count(),
        rr.lambda_max.len()
    );
    println!(
        "trace: value = {:.6}, slack at γ = {gamma:.6}: {:.3e}",
        rr.trace_value, rr.trace_slack
    );
    println!(
        "certificate {}",
        if rr.strict {
            "strict: well-posedness, stability, and performance < γ certified"
        } else {
            "NOT strict"
        }
    );
}

fn validate_level(gamma: f64) -> Result<(), Failure> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Failure::usage(format!("performance level must be positive and finite, got {gamma}")))
    }
}

fn solve_options(eps_strict: f64) -> Result<SolveOptions, Failure> {
    if !(eps_strict.is_finite() && eps_strict > 0.0) {
        return Err(Failure::usage(format!(
            "--eps-strict must be positive and finite, got {eps_strict}"
        )));
    }
    Ok(SolveOptions { eps_scale: eps_strict, ..SolveOptions::default() })
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}
