//! `moe-sparsekit` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numerical check failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use moe_sparsekit::budget::{allocate_budget, group_experts};
use moe_sparsekit::calibrate::{
    build_table, check_targets, collect_magnitudes, nearest_rank, total_to_routed, CalibrationTable, DEFAULT_TARGETS,
};
use moe_sparsekit::engine::{
    expert_mac_ratio, max_rel_diff, profile_tipping, BudgetPolicy, ThresholdPolicy, TopKPolicy, WallClockTimer,
};
use moe_sparsekit::fmt::sig9;
use moe_sparsekit::model::{generate_synthetic, load_weights, save_weights, synthetic_tokens, MoEConfig};
use moe_sparsekit::profiler::{
    emit_report, profile_expert, profile_routed, report_csv, sweep_calibrated, sweep_cutoff, RelativeErrorQuality,
    SweepMode, SweepResult,
};
use moe_sparsekit::{
    BudgetRatios, Engine, Error, ExecPath, ForwardReport, Matrix, MoELayerWeights, SparsityLevel, SwitchTable,
};

const SAMPLE_CAP: usize = 1 << 20;
const ZERO_SPARSITY_TOL: f64 = 1e-5;
const TIPPING_GRID: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
const TIPPING_REPS: usize = 5;

#[derive(Parser)]
#[command(name = "moe-sparsekit", version, about = "Activation-sparse MoE layer toolkit")]
struct Cli {
    /// Worker threads for the engine (default 1).
    #[arg(long, global = true, env = "MOE_SPARSEKIT_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic weight file.
    Gen(GenArgs),
    /// Build a threshold lookup table from seeded calibration tokens.
    Calibrate(CalibrateArgs),
    /// Run one forward pass (or a series of switched steps) and print a report.
    Run(RunArgs),
    /// Sparsity sweep with quality scores and cutoff.
    Sweep(SweepArgs),
    /// Histogram of SwiGLU outputs for one expert or all routed slots.
    Profile(ProfileArgs),
    /// Dense vs sparse operation counts and timings.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    topk: usize,
    #[arg(long, default_value_t = 64)]
    dmodel: usize,
    #[arg(long, default_value_t = 256)]
    dffn: usize,
    /// Width of the always-on shared expert; 0 disables it.
    #[arg(long, default_value_t = 0)]
    shared_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weights are drawn uniformly from [-scale, scale).
    #[arg(long, default_value_t = 1.0)]
    scale: f32,
    /// Renormalize the top-k router weights to sum to 1.
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Number of calibration tokens.
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    /// Total-sparsity targets, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TARGETS.to_vec())]
    targets: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("level").required(true).args(["sparsity", "tau", "dense"])))]
struct RunArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Tokens per step. A comma-separated list runs one step per entry
    /// (only with --switch).
    #[arg(long, value_delimiter = ',', default_value = "16")]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target total sparsity; the threshold comes from --table or an
    /// on-the-fly calibration.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Explicit activation threshold.
    #[arg(long)]
    tau: Option<f32>,
    /// Plain dense forward.
    #[arg(long)]
    dense: bool,
    /// Calibration table for --sparsity.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Calibration tokens when no --table is given.
    #[arg(long, default_value_t = 1024)]
    calib_tokens: usize,
    /// Router-weight neuron budgeting with ratios r0:r1:r2 (masked-dense analysis).
    #[arg(long, requires = "sparsity", conflicts_with = "rs")]
    budget: Option<BudgetRatios>,
    /// Offline top-k masking of routed and shared experts (masked-dense analysis).
    #[arg(long, requires = "sparsity")]
    rs: bool,
    /// Pick dense or sparse per step from a tipping-point table.
    #[arg(long, conflicts_with_all = ["budget", "rs", "dense"])]
    switch: bool,
    /// Fixed tipping batch for --switch instead of profiling one.
    #[arg(long, requires = "switch")]
    tipping: Option<usize>,
    /// Write the output matrix as tab-separated rows.
    #[arg(long)]
    dump_output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Offline top-k on routed experts.
    R,
    /// Offline top-k on routed and shared experts.
    Rs,
    /// Calibrated thresholds on the sparse path.
    Calibrated,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    targets: Vec<f64>,
    #[arg(long, default_value_t = 0.95)]
    retention: f64,
    #[arg(long, value_enum, default_value_t = SweepKind::R)]
    mode: SweepKind,
    /// Calibration table for --mode calibrated.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0, conflicts_with = "routed")]
    expert: usize,
    /// Profile every routed token-slot instead of a single expert.
    #[arg(long)]
    routed: bool,
    #[arg(long, default_value_t = 2048)]
    tokens: usize,
    /// Top-k sparsity used for per-neuron survivor counts.
    #[arg(long, default_value_t = 0.95)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Histogram destination ("bin_center<TAB>count" lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Routed sparsity the threshold is calibrated for.
    #[arg(long, default_value_t = 0.94)]
    routed_sparsity: f64,
    #[arg(long, default_value_t = 1024)]
    calib_tokens: usize,
    /// Timing repetitions per path.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Check(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Check(_) => 4,
            Failure::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Check(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape(_) | Error::Index { .. } | Error::Config(_) | Error::Calibration(_) => Failure::Usage(msg),
            Error::Format { .. } | Error::Io(_) => Failure::Io(msg),
            Error::Internal(_) => Failure::Internal(msg),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// An input file named on the command line that cannot be opened is a usage
/// error; malformed contents are a format error.
fn input_error(path: &Path, e: Error) -> Failure {
    match e {
        Error::Io(io) => Failure::Usage(format!("cannot read {}: {io}", path.display())),
        other => Failure::Io(format!("{}: {other}", path.display())),
    }
}

fn read_weights(path: &Path) -> CliResult<MoELayerWeights> {
    load_weights(path).map_err(|e| input_error(path, e))
}

fn read_table(path: &Path) -> CliResult<CalibrationTable> {
    CalibrationTable::load(path).map_err(|e| input_error(path, e))
}

fn engine(weights: &MoELayerWeights, threads: usize) -> CliResult<Engine<'_>> {
    Ok(Engine::new(weights).with_threads(threads)?)
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Calibrate(a) => cmd_calibrate(a, threads),
        Command::Run(a) => cmd_run(a, threads),
        Command::Sweep(a) => cmd_sweep(a, threads),
        Command::Profile(a) => cmd_profile(a, threads),
        Command::Bench(a) => cmd_bench(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let mut cfg = MoEConfig::new(a.experts, a.topk, a.dmodel, a.dffn).with_renormalize(a.renormalize);
    if a.shared_dim > 0 {
        cfg = cfg.with_shared(a.shared_dim);
    }
    let w = generate_synthetic(cfg, a.seed, a.scale)?;
    save_weights(&w, &a.out)?;
    println!(
        "wrote {}: experts={} topk={} dmodel={} dffn={} shared_dim={} renormalize={} bytes={}",
        a.out.display(),
        cfg.n_experts,
        cfg.top_k,
        cfg.d_model,
        cfg.d_ffn,
        cfg.d_shared,
        cfg.renormalize,
        w.file_len()
    );
    Ok(())
}

fn sorted_targets(mut targets: Vec<f64>) -> CliResult<Vec<f64>> {
    if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(usage(format!("target {t} is not finite")));
    }
    targets.sort_by(f64::total_cmp);
    if let Some(w) = targets.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("duplicate target {}", w[0])));
    }
    Ok(targets)
}

fn calibrate_table(e: &Engine<'_>, targets: &[f64], tokens: usize, seed: u64) -> CliResult<CalibrationTable> {
    let cfg = e.weights().config;
    let x = synthetic_tokens(tokens, cfg.d_model, seed);
    let sample = collect_magnitudes(e, &x, SAMPLE_CAP, seed)?;
    Ok(build_table(&sample, targets, (&cfg).into())?)
}

fn cmd_calibrate(a: CalibrateArgs, threads: usize) -> CliResult {
    let targets = sorted_targets(a.targets)?;
    check_targets(&targets)?;
    if a.tokens == 0 {
        return Err(usage("--tokens must be positive"));
    }
    let w = read_weights(&a.weights)?;
    let e = engine(&w, threads)?;
    let cfg = w.config;
    let table = calibrate_table(&e, &targets, a.tokens, a.seed)?;
    table.save(&a.out)?;
    println!("wrote {} ({} entries)", a.out.display(), table.entries().len());

    let held_out = synthetic_tokens(a.tokens, cfg.d_model, a.seed.wrapping_add(1));
    println!("target\tthreshold\trouted_target\tachieved_routed\tachieved_total");
    for entry in table.entries() {
        let r = e.forward_sparse(&held_out, entry.threshold)?;
        let routed_target = total_to_routed(entry.target as f64, cfg.top_k, cfg.d_ffn, cfg.d_shared)?;
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            sig9(entry.target as f64),
            sig9(entry.threshold as f64),
            routed_target,
            r.achieved_routed_sparsity,
            r.achieved_total_sparsity
        );
    }
    Ok(())
}

fn print_report(r: &ForwardReport) {
    let m = &r.macs;
    println!("path_used: {}", r.path);
    println!("tokens: {}", r.outputs.rows());
    println!(
        "macs: gate={} up={} down={} other={} expert={} total={}",
        m.gate_macs,
        m.up_macs,
        m.down_macs,
        m.other_macs,
        m.expert_macs(),
        m.total()
    );
    println!("achieved_routed_sparsity: {:.6}", r.achieved_routed_sparsity);
    println!("achieved_total_sparsity: {:.6}", r.achieved_total_sparsity);
    println!("active_neurons: {} padded: {}", r.active_neurons, r.padded_active);
    if r.path == ExecPath::Sparse {
        println!("tiles: total={} skipped={}", r.tiles_total, r.tiles_skipped);
    }
}

fn dump_matrix(m: &Matrix, path: &Path) -> CliResult {
    let mut text = String::new();
    for t in 0..m.rows() {
        let row: Vec<String> = m.row(t).iter().map(|&v| sig9(v as f64)).collect();
        let _ = writeln!(text, "{}", row.join("\t"));
    }
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn resolve_tau(a: &RunArgs, e: &Engine<'_>) -> CliResult<Option<f32>> {
    if let Some(tau) = a.tau {
        return Ok(Some(tau));
    }
    let Some(s) = a.sparsity else {
        return Ok(None);
    };
    SparsityLevel::new(s)?;
    if s == 0.0 {
        return Ok(Some(0.0));
    }
    let table = match &a.table {
        Some(p) => read_table(p)?,
        None => calibrate_table(e, &[s], a.calib_tokens, a.seed.wrapping_add(0x5eed))?,
    };
    Ok(Some(table.lookup(s)))
}

fn print_budget_groups(r: &ForwardReport, d_ffn: usize, s_active: f64, ratios: BudgetRatios) -> CliResult {
    let k = r.route.top_k;
    let mut slots = [0usize; 3];
    let mut kept = [0usize; 3];
    for t in 0..r.route.n_tokens() {
        let groups = group_experts(r.route.weights(t));
        let counts = allocate_budget(k, d_ffn, s_active, &groups, ratios)?;
        for (g, members) in groups.0.iter().enumerate() {
            slots[g] += members.len();
            kept[g] += members.iter().map(|&s| counts[s]).sum::<usize>();
        }
    }
    let [r0, r1, r2] = ratios.0;
    println!("budget: s_active={s_active:.4} ratios={r0}:{r1}:{r2}");
    for g in 0..3 {
        let per_slot = if slots[g] == 0 { 0.0 } else { kept[g] as f64 / slots[g] as f64 };
        println!("budget group g{g}: slots={} kept={} per_slot={per_slot:.2}", slots[g], kept[g]);
    }
    let budget = s_active * (r.route.n_tokens() * k * d_ffn) as f64;
    println!("budget total: kept={} requested={budget:.1}", kept.iter().sum::<usize>());
    Ok(())
}

fn cmd_run(a: RunArgs, threads: usize) -> CliResult {
    if a.batch.is_empty() || a.batch.contains(&0) {
        return Err(usage("--batch entries must be positive"));
    }
    if a.batch.len() > 1 && !a.switch {
        return Err(usage("a list of batch sizes needs --switch"));
    }
    let w = read_weights(&a.weights)?;
    let e = engine(&w, threads)?;
    let cfg = w.config;

    if a.switch {
        return run_switched(&a, &e);
    }

    let x = synthetic_tokens(a.batch[0], cfg.d_model, a.seed);
    let tau = resolve_tau(&a, &e)?;
    let report = if a.dense {
        e.forward_dense(&x)?
    } else if let Some(ratios) = a.budget {
        let s = a.sparsity.unwrap_or_default();
        let r = e.forward_masked_with(&x, &BudgetPolicy { s_active: 1.0 - s, ratios })?;
        print_budget_groups(&r, cfg.d_ffn, 1.0 - s, ratios)?;
        r
    } else if a.rs {
        let sparsity = SparsityLevel::new(a.sparsity.unwrap_or_default())?;
        e.forward_masked_with(&x, &TopKPolicy { sparsity, include_shared: true })?
    } else {
        let tau = tau.unwrap_or_default();
        println!("tau: {}", sig9(tau as f64));
        e.forward_sparse(&x, tau)?
    };
    print_report(&report);

    if !a.dense {
        let dense = e.forward_dense(&x)?;
        let diff = max_rel_diff(&report.outputs, &dense.outputs);
        println!("max_rel_diff_vs_dense: {diff:.3e}");
        let unmasked = if a.budget.is_some() || a.rs { a.sparsity == Some(0.0) } else { tau == Some(0.0) };
        if unmasked && diff > ZERO_SPARSITY_TOL {
            return Err(Failure::Check(format!(
                "zero-sparsity output differs from dense by {diff:.3e} (tolerance {ZERO_SPARSITY_TOL:e})"
            )));
        }
    }
    if let Some(p) = &a.dump_output {
        dump_matrix(&report.outputs, p)?;
    }
    Ok(())
}

fn run_switched(a: &RunArgs, e: &Engine<'_>) -> CliResult {
    let d = e.weights().config.d_model;
    let tau = resolve_tau(a, e)?.unwrap_or_default();
    let switch = match a.tipping {
        Some(0) => return Err(usage("--tipping must be positive")),
        Some(b) => SwitchTable { tipping_batch: Some(b) },
        None => profile_tipping(&mut WallClockTimer::new(e, tau, a.seed), &TIPPING_GRID, TIPPING_REPS)?,
    };
    match switch.tipping_batch {
        Some(b) => println!("switch: tipping_batch={b} tau={}", sig9(tau as f64)),
        None => println!("switch: always sparse tau={}", sig9(tau as f64)),
    }
    let mut outputs = Vec::new();
    for (step, &b) in a.batch.iter().enumerate() {
        let x = synthetic_tokens(b, d, a.seed.wrapping_add(step as u64));
        let r = e.step(&x, tau, &switch)?;
        println!(
            "step {step}: batch={b} path_used={} expert_macs={} achieved_routed_sparsity={:.6}",
            r.path,
            r.macs.expert_macs(),
            r.achieved_routed_sparsity
        );
        outputs.extend_from_slice(r.outputs.data());
    }
    if let Some(p) = &a.dump_output {
        let rows = a.batch.iter().sum();
        dump_matrix(&Matrix::from_vec(rows, d, outputs)?, p)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, threads: usize) -> CliResult {
    let targets = sorted_targets(a.targets)?;
    if a.tokens == 0 {
        return Err(usage("--tokens must be positive"));
    }
    let w = read_weights(&a.weights)?;
    let e = engine(&w, threads)?;
    let x = synthetic_tokens(a.tokens, w.config.d_model, a.seed);
    let metric = RelativeErrorQuality;
    let result: SweepResult = match a.mode {
        SweepKind::R => sweep_cutoff(&e, &x, &targets, a.retention, SweepMode::Routed, &metric)?,
        SweepKind::Rs => sweep_cutoff(&e, &x, &targets, a.retention, SweepMode::RoutedShared, &metric)?,
        SweepKind::Calibrated => {
            let table = match &a.table {
                Some(p) => read_table(p)?,
                None => calibrate_table(&e, &targets, 1024, a.seed.wrapping_add(0x5eed))?,
            };
            sweep_calibrated(&e, &x, &table, &targets, a.retention, &metric)?
        }
    };
    match &a.out {
        Some(p) => {
            emit_report(&result, p)?;
            println!(
                "wrote {} ({} rows) cutoff={} baseline_quality={:.6}",
                p.display(),
                result.points.len(),
                sig9(result.cutoff),
                result.baseline_quality
            );
        }
        None => print!("{}", report_csv(&result)),
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs, threads: usize) -> CliResult {
    if a.tokens == 0 {
        return Err(usage("--tokens must be positive"));
    }
    let s = SparsityLevel::new(a.sparsity)?;
    let w = read_weights(&a.weights)?;
    let e = engine(&w, threads)?;
    let x = synthetic_tokens(a.tokens, w.config.d_model, a.seed);
    let profile = if a.routed { profile_routed(&e, &x, s)? } else { profile_expert(&e, a.expert, &x, s)? };
    profile.write_histogram(&a.out)?;

    let binned: u64 = profile.bins.values().sum();
    let max = profile.per_neuron_counts.iter().copied().max().unwrap_or(0);
    let mean = profile.mean_count();
    println!(
        "wrote {}: events={} binned={} bins={}",
        a.out.display(),
        profile.total_events,
        binned,
        profile.bins.len()
    );
    println!("zero_bin_fraction: {:.6}", profile.zero_bin_fraction());
    println!(
        "survivor counts at sparsity {}: mean={mean:.2} max={max} ({:.2}x mean) never_activated={}",
        a.sparsity,
        if mean > 0.0 { max as f64 / mean } else { 0.0 },
        profile.never_activated
    );
    if binned != profile.total_events {
        return Err(Failure::Check(format!("histogram holds {binned} of {} events", profile.total_events)));
    }
    Ok(())
}

fn median_secs(reps: usize, mut f: impl FnMut() -> CliResult) -> CliResult<f64> {
    let mut v = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        v.push(start.elapsed().as_secs_f64());
    }
    v.sort_by(f64::total_cmp);
    Ok(v[reps / 2])
}

fn cmd_bench(a: BenchArgs, threads: usize) -> CliResult {
    if a.batch == 0 || a.calib_tokens == 0 || a.reps == 0 {
        return Err(usage("--batch, --calib-tokens and --reps must be positive"));
    }
    if !(0.0..1.0).contains(&a.routed_sparsity) {
        return Err(usage(format!("--routed-sparsity must be in [0, 1), got {}", a.routed_sparsity)));
    }
    let w = read_weights(&a.weights)?;
    let e = engine(&w, threads)?;
    let cfg = w.config;
    let x = synthetic_tokens(a.batch, cfg.d_model, a.seed);

    let calib = synthetic_tokens(a.calib_tokens, cfg.d_model, a.seed.wrapping_add(0x5eed));
    let sample = collect_magnitudes(&e, &calib, SAMPLE_CAP, a.seed)?;
    let tau = sample[nearest_rank(a.routed_sparsity, sample.len())];

    let dense = e.forward_dense(&x)?;
    let sparse = e.forward_sparse(&x, tau)?;
    let oracle = e.forward_masked_with(&x, &ThresholdPolicy { tau })?;

    let (dm, sm) = (&dense.macs, &sparse.macs);
    println!(
        "config: experts={} topk={} dmodel={} dffn={} shared_dim={} batch={}",
        cfg.n_experts, cfg.top_k, cfg.d_model, cfg.d_ffn, cfg.d_shared, a.batch
    );
    println!("tau: {} (routed target {})", sig9(tau as f64), a.routed_sparsity);
    println!("achieved_routed_sparsity: {:.6}", sparse.achieved_routed_sparsity);
    println!(
        "dense  macs: gate={} up={} down={} other={} total={}",
        dm.gate_macs,
        dm.up_macs,
        dm.down_macs,
        dm.other_macs,
        dm.total()
    );
    println!(
        "sparse macs: gate={} up={} down={} other={} total={}",
        sm.gate_macs,
        sm.up_macs,
        sm.down_macs,
        sm.other_macs,
        sm.total()
    );

    let dense_ud = (dm.up_macs + dm.down_macs) as f64;
    let unpadded_ud = (2 * cfg.d_model as u64 * sparse.active_neurons) as f64;
    let padded_ud = (sm.up_macs + sm.down_macs) as f64;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    println!("up/down reduction (unpadded): {:.4}x", ratio(dense_ud, unpadded_ud));
    println!("up/down reduction (padded): {:.4}x", ratio(dense_ud, padded_ud));
    println!("up/down reduction (ideal at target): {:.4}x", 1.0 / (1.0 - a.routed_sparsity));

    let s_pad = 1.0 - sparse.padded_active as f64 / (a.batch * cfg.top_k * cfg.d_ffn) as f64;
    let counter_ratio = sm.expert_macs() as f64 / dm.expert_macs() as f64;
    println!(
        "expert mac ratio: counters={counter_ratio:.6} theoretical={:.6} (padded sparsity {s_pad:.6})",
        expert_mac_ratio(s_pad)
    );
    println!(
        "expert mac speedup bound: {:.4}x at achieved routed sparsity",
        1.0 / expert_mac_ratio(sparse.achieved_routed_sparsity)
    );

    let t_dense = median_secs(a.reps, || e.forward_dense(&x).map(drop).map_err(Failure::from))?;
    let t_sparse = median_secs(a.reps, || e.forward_sparse(&x, tau).map(drop).map_err(Failure::from))?;
    println!("median time dense: {:.3} ms (informational)", t_dense * 1e3);
    println!("median time sparse: {:.3} ms (informational)", t_sparse * 1e3);

    let diff = max_rel_diff(&sparse.outputs, &oracle.outputs);
    println!("max_rel_diff_vs_masked_dense: {diff:.3e}");
    if diff > ZERO_SPARSITY_TOL {
        return Err(Failure::Check(format!("sparse path differs from masked-dense oracle by {diff:.3e}")));
    }
    if (counter_ratio - expert_mac_ratio(s_pad)).abs() > 1e-9 {
        return Err(Failure::Check("MAC counters disagree with the closed form".into()));
    }
    Ok(())
}
