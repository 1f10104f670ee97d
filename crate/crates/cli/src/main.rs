//! Command-line front end: cost profiles, scoring, masks, recovery, schedules,
//! simulations and the recovery benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tokprune::attnmap::{average_heads, FeatureMap};
use tokprune::costmodel::{schedule_average_flops, solve_ratio, step_flops, CostOptions, UNetTopology};
use tokprune::dsap::{build_schedule, recommend_tau, ScheduleOptions, SkipPolicy};
use tokprune::gwpr::{score_heads, GwprOptions, MapperKind};
use tokprune::harness::{recovery_benchmark, run_simulation, write_metrics_csv, BenchConfig, SimulationConfig};
use tokprune::io::{self as tio, MatrixMeta};
use tokprune::pruner::{build_mask, random_mask, PruneMask};
use tokprune::recovery::{recover, RecoveryInputs, RecoveryMethod};

#[derive(Parser)]
#[command(
    name = "tokprune",
    version,
    about = "Attention-token pruning toolkit for diffusion U-Nets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// FLOPs ledgers for a schedule, optionally solving the ratio for a budget.
    Profile(ProfileArgs),
    /// G-WPR importance scores of an attention map.
    Score(ScoreArgs),
    /// Top-k mask from scores, or a random mask.
    Mask(MaskArgs),
    /// Rebuild a complete token grid from pruned tokens.
    Recover(RecoverArgs),
    /// Per-step pruning schedule, or a tau recommendation from a variance trace.
    Schedule(ScheduleArgs),
    /// End-to-end synthetic simulation.
    Simulate(SimulateArgs),
    /// Compare recovery methods on fixed fixtures.
    BenchRecovery(BenchArgs),
}

#[derive(Args)]
struct ScheduleFlags {
    /// Total denoising steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Prune-less steps at the start of sampling.
    #[arg(long, default_value_t = 15)]
    tau: usize,
    /// Skip policy code: down pick (F, L, N) then up pick (F, M, L, N), optional `+mid`.
    #[arg(long, default_value = "FL")]
    policy: SkipPolicy,
    /// Put the prune-less steps at the end.
    #[arg(long)]
    invert: bool,
    /// Attention block exempt on every step (repeatable).
    #[arg(long = "exempt", value_name = "BLOCK")]
    exempt: Vec<String>,
}

impl ScheduleFlags {
    fn options(&self) -> ScheduleOptions {
        ScheduleOptions {
            total_steps: self.steps,
            tau: self.tau,
            policy: self.policy,
            invert: self.invert,
            permanent_exempt: self.exempt.clone(),
        }
    }
}

#[derive(Args)]
struct ProfileArgs {
    /// Topology JSON; the bundled SD-XL-class backbone when omitted.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Image side in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, conflicts_with = "target_tflops")]
    ratio: Option<f64>,
    /// Average per-step budget in units of 1e12.
    #[arg(long)]
    target_tflops: Option<f64>,
    #[command(flatten)]
    schedule: ScheduleFlags,
    #[arg(long)]
    prune_before_ff: bool,
    /// Also write the pruned-step ledger as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapperName {
    #[value(name = "self")]
    SelfIdentity,
    Entropy,
    Hardclip,
    Softclip,
    Power,
}

#[derive(Args)]
struct ScoreArgs {
    /// Attention map: raw f32 (with sidecar) or CSV.
    #[arg(long)]
    map: PathBuf,
    /// Sidecar; defaults to the map path with a `.json` extension.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "self")]
    mapper: MapperName,
    #[arg(long, default_value_t = 0.2)]
    eta: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Power-mapper base; half the Key count when omitted.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, required_unless_present = "random", conflicts_with = "random")]
    scores: Option<PathBuf>,
    #[arg(long)]
    ratio: f64,
    /// Uniformly random mask instead of top-k.
    #[arg(long, requires_all = ["total", "seed"])]
    random: bool,
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON; printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    method: RecoveryMethod,
    /// Retained tokens as raw f32 with sidecar (rows = retained, cols = channels).
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Self-attention map of the scoring layer (heads are averaged).
    #[arg(long)]
    attn: Option<PathBuf>,
    /// Complete pre-block tokens, for direct copy.
    #[arg(long)]
    cached: Option<PathBuf>,
    /// Grid height; from the sidecar, else a square grid.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct ScheduleArgs {
    #[command(subcommand)]
    action: Option<ScheduleAction>,
    #[command(flatten)]
    schedule: ScheduleFlags,
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Ratio recorded on every step.
    #[arg(long, default_value_t = 0.63)]
    ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScheduleAction {
    /// First step from which the attention variance stays above a threshold.
    RecommendTau {
        /// One variance per line, or `step,variance` rows.
        #[arg(long)]
        variances: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_topology(path: Option<&Path>) -> tokprune::Result<UNetTopology> {
    match path {
        Some(p) => UNetTopology::load(p),
        None => Ok(UNetTopology::sdxl_base()),
    }
}

fn emit(out: Option<&Path>, text: String) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(value: &impl serde::Serialize) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn profile(args: ProfileArgs) -> anyhow::Result<()> {
    let topology = load_topology(args.topology.as_deref())?;
    let opts = CostOptions {
        resolution: args.resolution.unwrap_or_else(|| topology.default_resolution()),
        prune_before_ff: args.prune_before_ff,
    };
    let template = args.schedule.options();
    let (ratio, solver) = match (args.ratio, args.target_tflops) {
        (_, Some(t)) => {
            let s = solve_ratio(&topology, &template, t * 1e12, &opts)?;
            (s.ratio, Some(s))
        }
        (Some(r), None) => (r, None),
        (None, None) => (0.0, None),
    };
    let schedule = build_schedule(&template, &topology, ratio)?;
    let average = schedule_average_flops(&topology, &schedule, &opts)?;
    let full_schedule = build_schedule(&ScheduleOptions::without_dsap(template.total_steps), &topology, 0.0)?;
    let full = schedule_average_flops(&topology, &full_schedule, &opts)?;
    let first = &schedule.per_step[0];
    let last = &schedule.per_step[schedule.per_step.len() - 1];
    let pruned_step = if schedule.inverted { first } else { last };
    let pruned = step_flops(&topology, pruned_step, &opts)?;
    let mut report = json!({
        "topology": topology.name,
        "resolution": opts.resolution,
        "unit": topology.count_unit,
        "ratio": ratio,
        "total_steps": schedule.total_steps,
        "tau": schedule.tau,
        "policy": schedule.policy,
        "prune_before_ff": opts.prune_before_ff,
        "full_flops": full,
        "average_flops": average,
        "saving": 1.0 - average / full,
        "pruned_step": pruned.to_json(),
    });
    if schedule.tau > 0 {
        let prune_less = if schedule.inverted { last } else { first };
        report["prune_less_step"] = step_flops(&topology, prune_less, &opts)?.to_json();
    }
    if let Some(s) = solver {
        report["solver"] = serde_json::to_value(s)?;
    }
    if let Some(path) = &args.csv {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        pruned.write_csv(file)?;
    }
    emit(args.out.as_deref(), pretty(&report)?)
}

fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let stack = tio::load_head_stack(&args.map, args.meta.as_deref())?;
    let kind = match args.mapper {
        MapperName::SelfIdentity => MapperKind::SelfIdentity,
        MapperName::Entropy => MapperKind::Entropy,
        MapperName::Hardclip => MapperKind::HardClip { eta: args.eta },
        MapperName::Softclip => MapperKind::SoftClip { eta: args.eta },
        MapperName::Power => MapperKind::Power {
            alpha: args.alpha,
            beta: args.beta,
        },
    };
    kind.validate()?;
    let opts = GwprOptions {
        epsilon: args.epsilon,
        max_iters: args.max_iters,
        ..GwprOptions::default()
    };
    let scores = score_heads(&stack, kind, &opts)?;
    tio::write_scores_csv(&args.out, scores.values())?;
    Ok(())
}

fn mask(args: MaskArgs) -> anyhow::Result<()> {
    let mask = if args.random {
        let (Some(total), Some(seed)) = (args.total, args.seed) else {
            bail!("--random needs --total and --seed");
        };
        random_mask(total, args.ratio, seed)?
    } else {
        let path = args.scores.as_deref().context("--scores is required")?;
        build_mask(&tio::read_scores_csv(path)?, args.ratio)?
    };
    emit(args.out.as_deref(), serde_json::to_string(&mask)? + "\n")
}

fn read_grid(
    path: &Path,
    default_side: Option<(usize, usize)>,
    complete: bool,
) -> anyhow::Result<(MatrixMeta, Vec<f64>)> {
    let meta = tio::read_meta(&tio::sidecar_path(path))?;
    let values = tio::read_f32(path, &meta)?;
    if meta.heads != 1 {
        bail!(
            "{}: token grids have a single head, sidecar says {}",
            path.display(),
            meta.heads
        );
    }
    if complete {
        if let Some((h, w)) = default_side {
            if meta.rows != h * w {
                bail!("{}: {} rows for a {h}x{w} grid", path.display(), meta.rows);
            }
        }
    }
    Ok((meta, values))
}

fn recover_cmd(args: RecoverArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.mask).with_context(|| format!("reading {}", args.mask.display()))?;
    let mask: PruneMask = serde_json::from_str(&text).context("parsing mask")?;
    let (meta, values) = read_grid(&args.pruned, None, false)?;
    let (height, width) = match (args.height.or(meta.height), args.width.or(meta.width)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            let side = (mask.total() as f64).sqrt().round() as usize;
            if side * side != mask.total() {
                bail!(
                    "grid shape unknown: pass --height and --width for {} tokens",
                    mask.total()
                );
            }
            (side, side)
        }
    };
    let pruned = FeatureMap::pruned(height, width, meta.cols, values, mask.retained().to_vec())?;
    let attention = args
        .attn
        .as_deref()
        .map(|p| tio::load_head_stack(p, None).map(|s| average_heads(&s)))
        .transpose()?;
    let cached = match &args.cached {
        Some(p) => {
            let (m, v) = read_grid(p, Some((height, width)), true)?;
            Some(FeatureMap::complete(height, width, m.cols, v)?)
        }
        None => None,
    };
    let inputs = RecoveryInputs {
        attention: attention.as_ref(),
        cached: cached.as_ref(),
    };
    let full = recover(args.method, &pruned, &mask, inputs)?;
    let out_meta = MatrixMeta {
        height: Some(height),
        width: Some(width),
        ..MatrixMeta::new(full.row_count(), full.channels(), 1)
    };
    tio::write_f32(&args.out, &out_meta, full.values())?;
    Ok(())
}

fn schedule_cmd(args: ScheduleArgs) -> anyhow::Result<()> {
    if let Some(ScheduleAction::RecommendTau { variances, threshold }) = args.action {
        let trace = tio::read_series_csv(&variances)?;
        let tau = recommend_tau(&trace, threshold)?;
        println!("{tau}");
        return Ok(());
    }
    let topology = load_topology(args.topology.as_deref())?;
    let schedule = build_schedule(&args.schedule.options(), &topology, args.ratio)?;
    emit(args.out.as_deref(), pretty(&schedule)?)
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let cfg = SimulationConfig::load(&args.config)?;
    let report = run_simulation(&cfg)?;
    report.write(&args.out)?;
    eprintln!(
        "average {:.4e} ({:.1}% saving) at ratio {:.4}",
        report.average_flops,
        100.0 * report.saving,
        report.ratio
    );
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let cfg: BenchConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).context("parsing benchmark config")?
        }
        None => BenchConfig::default(),
    };
    let rows = recovery_benchmark(&cfg)?;
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf)?;
    emit(args.out.as_deref(), String::from_utf8(buf)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Profile(a) => profile(a),
        Command::Score(a) => score(a),
        Command::Mask(a) => mask(a),
        Command::Recover(a) => recover_cmd(a),
        Command::Schedule(a) => schedule_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::BenchRecovery(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.chain().find_map(|e| e.downcast_ref::<tokprune::Error>()) {
                Some(e) => e.exit_code(),
                None if err.chain().any(|e| e.is::<std::io::Error>()) => 1,
                None => 2,
            };
            ExitCode::from(code as u8)
        }
    }
}
