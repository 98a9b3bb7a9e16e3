//! `deepteam` — command-line front end for the team solvers.
//!
//! Subcommands bind a model file (JSON) to the validator, the solvers, the
//! simulator, the sensitivity bounds, and the packaged service example.  All
//! tabular output is CSV written atomically (temp file + rename), numbers
//! formatted to 17 significant digits, and every run is byte-reproducible for
//! a fixed seed regardless of `--workers`.
//!
//! Exit codes: 0 success, 2 model/validation failure, 3 cap refusal,
//! 4 assumption-check failure, 1 anything else.  Errors are single lines on
//! standard error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deepteam_core::bounds::{
    concentration_constant, epsilon_discounted, epsilon_finite, estimate_lipschitz, h_recursions,
    EpsilonMode, LipschitzProfile,
};
use deepteam_core::dss::{
    solve_dss, solve_dss_quantized, DssSolution, QuantDssSolution, SolveOptions,
};
use deepteam_core::model::{
    model_from_json, validate_model, Horizon, TeamModel,
};
use deepteam_core::pdss::{
    solve_pdss_exact, solve_pdss_quantized, MixedPolicy, PdssExactSolution, PdssOptions,
    PdssQuantSolution,
};
use deepteam_core::service::{build_service_model, reproduce_figures, LevelRule, ServiceParams};
use deepteam_core::sim::{
    effective_horizon, empirical_gap, evaluate_strategy, simulate_rollout, StrategyHandle,
};
use deepteam_core::statespace::{Caps, LawSpace};
use deepteam_core::util::{fmt_f64, stream_seed, CsvWriter};
use deepteam_core::{Error, Result};

/// Probe budget and seed for `validate`; fixed so the subcommand is
/// deterministic without a `--seed`.
const VALIDATE_PROBES: usize = 256;
const VALIDATE_SEED: u64 = 0;
/// Default probe-pair budget and snap resolution for `bounds` estimation.
const DEFAULT_PAIRS: usize = 256;
const PROBE_RESOLUTION: u32 = 16;

// ── Argument grammar ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "deepteam",
    version,
    about = "Solvers, simulator, and error bounds for teams of exchangeable Markov agents",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Output directory for generated files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// Hard cap on enumerated table sizes (also env DEEPTEAM_CAP).
    #[arg(long, global = true, env = "DEEPTEAM_CAP")]
    cap: Option<u64>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Convergence tolerance for discounted value iteration.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Replace the model's horizon with an infinite discounted horizon at
    /// this factor before doing anything else.
    #[arg(long, global = true)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a model file against the numerical invariants.
    Validate {
        /// Model JSON file.
        model: PathBuf,
    },
    /// Solve a model to a policy (values.csv, policy.csv, laws.csv).
    Solve {
        #[command(subcommand)]
        which: SolveCmd,
    },
    /// Roll out a strategy on the true finite-agent system.
    Simulate {
        /// Model JSON file.
        model: PathBuf,
        /// Which solved strategy to follow.
        strategy: StrategyKind,
        /// Replications.
        #[arg(long, default_value_t = 400)]
        reps: usize,
        /// Master seed (replication j draws from an independent substream).
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        strat: StrategyFlags,
    },
    /// Measure J(A) − J(B) with common random numbers.
    Gap {
        /// Model JSON file.
        model: PathBuf,
        /// Strategy A.
        a: StrategyKind,
        /// Strategy B.
        b: StrategyKind,
        /// Replications.
        #[arg(long, default_value_t = 400)]
        reps: usize,
        /// Master seed.
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        strat: StrategyFlags,
    },
    /// Estimate sensitivity constants and report optimality-loss bounds.
    Bounds {
        /// Model JSON file.
        model: PathBuf,
        /// Seed for the sampled estimation.
        #[arg(long)]
        seed: u64,
        /// Probe pairs for the sampled estimation.
        #[arg(long, default_value_t = DEFAULT_PAIRS)]
        pairs: usize,
        /// Population sizes to report bounds for (default: the model's own).
        #[arg(long, value_delimiter = ',')]
        ns: Vec<u32>,
        /// Quantisation resolution entering the 1/r terms.
        #[arg(long)]
        levels: Option<u32>,
        /// Supply exact constants instead of estimating (order: H1,H2,H3,H4).
        #[arg(long, value_delimiter = ',')]
        constants: Option<Vec<f64>>,
    },
    /// Build a packaged example and emit its figure data.
    Example {
        #[command(subcommand)]
        which: ExampleCmd,
    },
}

#[derive(Subcommand)]
enum SolveCmd {
    /// Finite-horizon backward induction under full sharing.
    Dss {
        /// Model JSON file.
        model: PathBuf,
    },
    /// Finite-horizon backward induction on quantised grids.
    DssQuantized {
        /// Model JSON file.
        model: PathBuf,
        /// Grid resolution r.
        #[arg(long)]
        levels: u32,
        /// Sub-populations to move onto grids (default: all of them).
        #[arg(long, value_delimiter = ',')]
        quantize_subpops: Vec<String>,
    },
    /// Exact partial-sharing enumeration (finite horizon).
    PdssExact {
        /// Model JSON file.
        model: PathBuf,
        /// Sub-populations whose counts stay observed.
        #[arg(long, value_delimiter = ',', required = true)]
        observed: Vec<String>,
    },
    /// Partial sharing on belief grids (finite or discounted horizon).
    PdssQuantized {
        /// Model JSON file.
        model: PathBuf,
        /// Sub-populations whose counts stay observed.
        #[arg(long, value_delimiter = ',', required = true)]
        observed: Vec<String>,
        /// Belief-grid resolution r.
        #[arg(long)]
        levels: u32,
    },
    /// Discounted value iteration to a stationary policy.
    Stationary {
        /// Model JSON file.
        model: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExampleCmd {
    /// The service-management example: subscribers plus one fallible server.
    Service {
        /// Population sizes for the convergence sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 20, 50, 100, 200])]
        ns: Vec<u32>,
        /// Fixed quantisation resolution for the sweep (default: r = n).
        #[arg(long)]
        levels: Option<u32>,
    },
}

/// How `simulate`/`gap` reconstruct the strategies they roll out: the model
/// is re-solved in process (solves are deterministic).
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyKind {
    /// Optimal full-sharing policy (finite or stationary, per the horizon).
    Dss,
    /// Quantised full-sharing policy (needs --levels).
    DssQuantized,
    /// Exact partial-sharing policy (needs --observed).
    PdssExact,
    /// Quantised partial-sharing policy (needs --observed and --levels).
    PdssQuantized,
}

#[derive(Args)]
struct StrategyFlags {
    /// Grid resolution for the quantised strategies.
    #[arg(long)]
    levels: Option<u32>,
    /// Observed sub-populations for the partial-sharing strategies.
    #[arg(long, value_delimiter = ',')]
    observed: Vec<String>,
    /// Sub-populations to quantise for dss-quantized (default: all).
    #[arg(long, value_delimiter = ',')]
    quantize_subpops: Vec<String>,
}

// ── Entry point ──────────────────────────────────────────────────────────────

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .is_err()
        {
            eprintln!("error: worker pool already configured");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Validate { model } => cmd_validate(cli, model),
        Cmd::Solve { which } => cmd_solve(cli, which),
        Cmd::Simulate {
            model,
            strategy,
            reps,
            seed,
            strat,
        } => cmd_simulate(cli, model, *strategy, *reps, *seed, strat),
        Cmd::Gap {
            model,
            a,
            b,
            reps,
            seed,
            strat,
        } => cmd_gap(cli, model, *a, *b, *reps, *seed, strat),
        Cmd::Bounds {
            model,
            seed,
            pairs,
            ns,
            levels,
            constants,
        } => cmd_bounds(cli, model, *seed, *pairs, ns, *levels, constants.as_deref()),
        Cmd::Example { which } => match which {
            ExampleCmd::Service { ns, levels } => cmd_example_service(cli, ns, *levels),
        },
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────────────

fn caps(cli: &Cli) -> Caps {
    match cli.cap {
        Some(max_space) => Caps { max_space },
        None => Caps::default(),
    }
}

fn solve_options(cli: &Cli) -> SolveOptions {
    let mut o = SolveOptions::default();
    o.caps = caps(cli);
    if let Some(tol) = cli.tol {
        o.tol = tol;
    }
    o
}

fn pdss_options(cli: &Cli) -> PdssOptions {
    let mut o = PdssOptions::default();
    o.caps = caps(cli);
    if let Some(tol) = cli.tol {
        o.tol = tol;
    }
    o
}

fn load_model(cli: &Cli, path: &Path) -> Result<TeamModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let model = model_from_json(&text)?;
    if let Some(beta) = cli.beta {
        return TeamModel::new(model.subpops, model.cost, Horizon::Discounted(beta));
    }
    Ok(model)
}

fn observed_mask(model: &TeamModel, names: &[String]) -> Result<Vec<bool>> {
    let mut mask = vec![false; model.k_count()];
    for name in names {
        mask[model.subpop_index(name)?] = true;
    }
    Ok(mask)
}

/// Sub-populations to quantise for dss-quantized: the named ones, or every
/// one when no names are given.
fn grid_mask(model: &TeamModel, names: &[String]) -> Result<Vec<bool>> {
    if names.is_empty() {
        return Ok(vec![true; model.k_count()]);
    }
    observed_mask(model, names)
}

fn outdir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::Invalid(format!("{}: {e}", cli.out.display())))?;
    Ok(&cli.out)
}

/// One-line run echo placed as the leading comment of every output file.
/// Deliberately excludes `--workers`: outputs are worker-independent.
fn run_echo(cli: &Cli, detail: &str) -> String {
    let mut s = String::from("deepteam");
    write!(s, " {detail}").unwrap();
    if let Some(b) = cli.beta {
        write!(s, " beta={b}").unwrap();
    }
    if let Some(t) = cli.tol {
        write!(s, " tol={t}").unwrap();
    }
    if let Some(c) = cli.cap {
        write!(s, " cap={c}").unwrap();
    }
    s
}

// ── validate ─────────────────────────────────────────────────────────────────

fn cmd_validate(cli: &Cli, path: &Path) -> Result<()> {
    let model = load_model(cli, path)?;
    let report = validate_model(&model, VALIDATE_PROBES, VALIDATE_SEED);
    for v in &report.violations {
        println!("violation: {v}");
    }
    println!(
        "probes={} grid_vertices={} violations={}",
        report.probes_used,
        report.grid_vertices_probed,
        report.violations.len()
    );
    if !report.is_valid() {
        return Err(Error::Model(format!(
            "model failed validation with {} violation(s)",
            report.violations.len()
        )));
    }
    Ok(())
}

// ── solve ────────────────────────────────────────────────────────────────────

/// Write the law sidecar: how each gamma index acts at every local state.
fn write_laws(path: &Path, echo: &str, model: &TeamModel, laws: &LawSpace, force: bool) -> Result<()> {
    let mut w = CsvWriter::create(path, force)?;
    w.comment(echo)?;
    w.row(&["gamma_index", "subpop", "state_symbol", "action_symbol"])?;
    let mut ll = laws.blank();
    for g in 0..laws.len() {
        laws.decode(g, &mut ll);
        for k in 0..model.k_count() {
            for x in 0..model.m(k) {
                w.row(&[
                    &format!("{g}"),
                    &model.subpops[k].name,
                    &model.subpops[k].states[x],
                    &model.subpops[k].actions[ll.maps[k][x]],
                ])?;
            }
        }
    }
    w.finish()
}

/// Write stage-major value/policy tables.  `stationary` collapses the stage
/// column to −1.
fn write_tables(
    dir: &Path,
    echo: &str,
    key_name: &str,
    values: &[Vec<f64>],
    policy: &[Vec<u64>],
    stationary: bool,
    force: bool,
) -> Result<()> {
    let stage = |t: usize| {
        if stationary {
            "-1".to_string()
        } else {
            format!("{}", t + 1)
        }
    };
    let mut vw = CsvWriter::create(&dir.join("values.csv"), force)?;
    vw.comment(echo)?;
    vw.row(&["t", key_name, "value"])?;
    for (t, table) in values.iter().enumerate() {
        for (i, v) in table.iter().enumerate() {
            vw.row(&[&stage(t), &format!("{i}"), &fmt_f64(*v)])?;
        }
    }
    vw.finish()?;
    let mut pw = CsvWriter::create(&dir.join("policy.csv"), force)?;
    pw.comment(echo)?;
    pw.row(&["t", key_name, "gamma_index"])?;
    for (t, table) in policy.iter().enumerate() {
        for (i, g) in table.iter().enumerate() {
            pw.row(&[&stage(t), &format!("{i}"), &format!("{g}")])?;
        }
    }
    pw.finish()
}

/// Serialised information-state key for the exact partial-sharing tree:
/// observed blocks as `c<lattice rank>`, belief blocks as the exact bit
/// patterns of their coordinates, sub-populations joined by `.`.
fn tree_key(sol: &PdssExactSolution, counts: &[Vec<u32>], beliefs: &[Vec<f64>]) -> String {
    let mut parts = Vec::with_capacity(sol.lattices.len());
    for (k, lat) in sol.lattices.iter().enumerate() {
        match lat {
            Some(lat) => parts.push(format!("c{}", lat.rank(&counts[k]))),
            None => {
                let bits: Vec<String> = beliefs[k]
                    .iter()
                    .map(|v| format!("{:016x}", v.to_bits()))
                    .collect();
                parts.push(format!("b{}", bits.join("-")));
            }
        }
    }
    parts.join(".")
}

fn cmd_solve(cli: &Cli, which: &SolveCmd) -> Result<()> {
    let dir = outdir(cli)?;
    match which {
        SolveCmd::Dss { model } => {
            let m = load_model(cli, model)?;
            if m.finite_t().is_none() {
                return Err(Error::Invalid(
                    "the model has a discounted horizon; use `solve stationary`".into(),
                ));
            }
            let sol: DssSolution = solve_dss(&m, &solve_options(cli))?;
            let echo = run_echo(cli, &format!("solve dss model={}", model.display()));
            write_tables(dir, &echo, "state_rank", &sol.values, &sol.policy, false, cli.force)?;
            write_laws(&dir.join("laws.csv"), &echo, &m, &sol.laws, cli.force)?;
            println!("expected_cost={}", fmt_f64(sol.expected_cost));
            Ok(())
        }
        SolveCmd::Stationary { model } => {
            let m = load_model(cli, model)?;
            if m.beta().is_none() {
                return Err(Error::Invalid(
                    "the model has a finite horizon; use `solve dss`".into(),
                ));
            }
            let sol: DssSolution = solve_dss(&m, &solve_options(cli))?;
            let echo = run_echo(cli, &format!("solve stationary model={}", model.display()));
            write_tables(dir, &echo, "state_rank", &sol.values, &sol.policy, true, cli.force)?;
            write_laws(&dir.join("laws.csv"), &echo, &m, &sol.laws, cli.force)?;
            println!("expected_cost={}", fmt_f64(sol.expected_cost));
            println!("sweeps={}", sol.sweeps);
            Ok(())
        }
        SolveCmd::DssQuantized {
            model,
            levels,
            quantize_subpops,
        } => {
            let m = load_model(cli, model)?;
            let on_grid = grid_mask(&m, quantize_subpops)?;
            let sol: QuantDssSolution =
                solve_dss_quantized(&m, *levels, &on_grid, &solve_options(cli))?;
            let echo = run_echo(
                cli,
                &format!(
                    "solve dss-quantized model={} levels={} quantized={}",
                    model.display(),
                    levels,
                    mask_names(&m, &on_grid)
                ),
            );
            write_tables(dir, &echo, "grid_key", &sol.values, &sol.policy, false, cli.force)?;
            write_laws(&dir.join("laws.csv"), &echo, &m, &sol.laws, cli.force)?;
            println!("expected_cost={}", fmt_f64(sol.expected_cost));
            Ok(())
        }
        SolveCmd::PdssExact { model, observed } => {
            let m = load_model(cli, model)?;
            let mask = observed_mask(&m, observed)?;
            let sol = solve_pdss_exact(&m, &mask, &pdss_options(cli))?;
            let echo = run_echo(
                cli,
                &format!(
                    "solve pdss-exact model={} observed={}",
                    model.display(),
                    mask_names(&m, &mask)
                ),
            );
            let mut vw = CsvWriter::create(&dir.join("values.csv"), cli.force)?;
            vw.comment(&echo)?;
            vw.row(&["t", "tree_key", "value"])?;
            let mut pw = CsvWriter::create(&dir.join("policy.csv"), cli.force)?;
            pw.comment(&echo)?;
            pw.row(&["t", "tree_key", "gamma_index"])?;
            for (t, layer) in sol.layers.iter().enumerate() {
                for (i, node) in layer.nodes.iter().enumerate() {
                    let key = tree_key(&sol, &node.counts, &node.beliefs);
                    vw.row(&[&format!("{}", t + 1), &key, &fmt_f64(layer.values[i])])?;
                    pw.row(&[&format!("{}", t + 1), &key, &format!("{}", layer.policy[i])])?;
                }
            }
            vw.finish()?;
            pw.finish()?;
            write_laws(&dir.join("laws.csv"), &echo, &m, &sol.laws, cli.force)?;
            println!("expected_cost={}", fmt_f64(sol.expected_cost));
            Ok(())
        }
        SolveCmd::PdssQuantized {
            model,
            observed,
            levels,
        } => {
            let m = load_model(cli, model)?;
            let mask = observed_mask(&m, observed)?;
            let sol: PdssQuantSolution =
                solve_pdss_quantized(&m, &mask, *levels, &pdss_options(cli))?;
            let echo = run_echo(
                cli,
                &format!(
                    "solve pdss-quantized model={} observed={} levels={}",
                    model.display(),
                    mask_names(&m, &mask),
                    levels
                ),
            );
            let stationary = m.beta().is_some();
            write_tables(dir, &echo, "grid_key", &sol.values, &sol.policy, stationary, cli.force)?;
            write_laws(&dir.join("laws.csv"), &echo, &m, &sol.laws, cli.force)?;
            println!("expected_cost={}", fmt_f64(sol.expected_cost));
            Ok(())
        }
    }
}

fn mask_names(model: &TeamModel, mask: &[bool]) -> String {
    let names: Vec<&str> = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| model.subpops[k].name.as_str())
        .collect();
    if names.is_empty() {
        "none".to_string()
    } else {
        names.join("+")
    }
}

// ── Strategy reconstruction for simulate/gap ─────────────────────────────────

/// Owns whichever solution backs a [`StrategyHandle`].
enum OwnedStrategy {
    Dss(DssSolution),
    Quant(QuantDssSolution),
    PdssExact(PdssExactSolution),
    PdssQuant(PdssQuantSolution),
}

impl OwnedStrategy {
    fn handle(&self) -> StrategyHandle<'_> {
        match self {
            OwnedStrategy::Dss(s) => StrategyHandle::Dss(s),
            OwnedStrategy::Quant(s) => StrategyHandle::Quantized(s),
            OwnedStrategy::PdssExact(s) => StrategyHandle::Mixed(MixedPolicy::Exact(s)),
            OwnedStrategy::PdssQuant(s) => StrategyHandle::Mixed(MixedPolicy::Quantized(s)),
        }
    }
}

fn build_strategy(
    cli: &Cli,
    model: &TeamModel,
    kind: StrategyKind,
    flags: &StrategyFlags,
) -> Result<OwnedStrategy> {
    let need_levels = || {
        flags
            .levels
            .ok_or_else(|| Error::Invalid("this strategy needs --levels".into()))
    };
    let need_observed = || -> Result<Vec<bool>> {
        if flags.observed.is_empty() {
            return Err(Error::Invalid("this strategy needs --observed".into()));
        }
        observed_mask(model, &flags.observed)
    };
    match kind {
        StrategyKind::Dss => Ok(OwnedStrategy::Dss(solve_dss(model, &solve_options(cli))?)),
        StrategyKind::DssQuantized => {
            let on_grid = grid_mask(model, &flags.quantize_subpops)?;
            Ok(OwnedStrategy::Quant(solve_dss_quantized(
                model,
                need_levels()?,
                &on_grid,
                &solve_options(cli),
            )?))
        }
        StrategyKind::PdssExact => Ok(OwnedStrategy::PdssExact(solve_pdss_exact(
            model,
            &need_observed()?,
            &pdss_options(cli),
        )?)),
        StrategyKind::PdssQuantized => Ok(OwnedStrategy::PdssQuant(solve_pdss_quantized(
            model,
            &need_observed()?,
            need_levels()?,
            &pdss_options(cli),
        )?)),
    }
}

fn kind_name(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::Dss => "dss",
        StrategyKind::DssQuantized => "dss-quantized",
        StrategyKind::PdssExact => "pdss-exact",
        StrategyKind::PdssQuantized => "pdss-quantized",
    }
}

// ── simulate ─────────────────────────────────────────────────────────────────

fn cmd_simulate(
    cli: &Cli,
    model: &Path,
    kind: StrategyKind,
    reps: usize,
    seed: u64,
    flags: &StrategyFlags,
) -> Result<()> {
    let dir = outdir(cli)?;
    let m = load_model(cli, model)?;
    let strategy = build_strategy(cli, &m, kind, flags)?;
    let handle = strategy.handle();
    let echo = run_echo(
        cli,
        &format!(
            "simulate model={} strategy={} reps={reps} seed={seed}",
            model.display(),
            kind_name(kind)
        ),
    );
    let t_end = effective_horizon(&m);

    let mut tw = CsvWriter::create(&dir.join("trajectory.csv"), cli.force)?;
    tw.comment(&echo)?;
    tw.row(&["rep", "t", "subpop", "state_symbol", "count"])?;
    let mut cw = CsvWriter::create(&dir.join("costs.csv"), cli.force)?;
    cw.comment(&echo)?;
    cw.row(&["rep", "t", "cost"])?;
    for rep in 0..reps {
        let tr = simulate_rollout(&m, &handle, t_end, stream_seed(seed, rep as u64))?;
        for (i, point) in tr.stages.iter().enumerate() {
            for k in 0..m.k_count() {
                for x in 0..m.m(k) {
                    tw.row(&[
                        &format!("{rep}"),
                        &format!("{}", i + 1),
                        &m.subpops[k].name,
                        &m.subpops[k].states[x],
                        &format!("{}", point.state.counts[k][x]),
                    ])?;
                }
            }
            cw.row(&[&format!("{rep}"), &format!("{}", i + 1), &fmt_f64(point.cost)])?;
        }
    }
    tw.finish()?;
    cw.finish()?;

    let eval = evaluate_strategy(&m, &handle, reps.max(2), seed)?;
    let mut sw = CsvWriter::create(&dir.join("summary.csv"), cli.force)?;
    sw.comment(&echo)?;
    sw.row(&["strategy", "J_mean", "CI_half", "reps", "seed"])?;
    sw.row(&[
        kind_name(kind),
        &fmt_f64(eval.mean),
        &fmt_f64(eval.ci_half),
        &format!("{}", eval.reps),
        &format!("{seed}"),
    ])?;
    sw.finish()?;
    println!("J_mean={}", fmt_f64(eval.mean));
    println!("exact={}", eval.exact);
    if eval.remainder_bound > 0.0 {
        println!("truncation_remainder={}", fmt_f64(eval.remainder_bound));
    }
    Ok(())
}

// ── gap ──────────────────────────────────────────────────────────────────────

fn cmd_gap(
    cli: &Cli,
    model: &Path,
    a: StrategyKind,
    b: StrategyKind,
    reps: usize,
    seed: u64,
    flags: &StrategyFlags,
) -> Result<()> {
    let dir = outdir(cli)?;
    let m = load_model(cli, model)?;
    let sa = build_strategy(cli, &m, a, flags)?;
    let sb = build_strategy(cli, &m, b, flags)?;
    let est = empirical_gap(&m, &sa.handle(), &sb.handle(), reps, seed)?;
    let echo = run_echo(
        cli,
        &format!(
            "gap model={} a={} b={} reps={reps} seed={seed}",
            model.display(),
            kind_name(a),
            kind_name(b)
        ),
    );
    let mut w = CsvWriter::create(&dir.join("gap.csv"), cli.force)?;
    w.comment(&echo)?;
    w.row(&["strategy_a", "strategy_b", "gap_mean", "ci_half", "reps", "seed"])?;
    w.row(&[
        kind_name(a),
        kind_name(b),
        &fmt_f64(est.diff_mean),
        &fmt_f64(est.ci_half),
        &format!("{}", est.reps),
        &format!("{seed}"),
    ])?;
    w.finish()?;
    println!("gap_mean={}", fmt_f64(est.diff_mean));
    println!("exact={}", est.exact);
    Ok(())
}

// ── bounds ───────────────────────────────────────────────────────────────────

fn cmd_bounds(
    cli: &Cli,
    model: &Path,
    seed: u64,
    pairs: usize,
    ns: &[u32],
    levels: Option<u32>,
    constants: Option<&[f64]>,
) -> Result<()> {
    let dir = outdir(cli)?;
    let m = load_model(cli, model)?;
    let mut profile = match constants {
        Some(c) if c.len() == 4 => {
            LipschitzProfile::from_constants(c[0], c[1], c[2], c[3], concentration_constant(&m))
        }
        Some(c) => {
            return Err(Error::Invalid(format!(
                "--constants takes exactly four values H1,H2,H3,H4; got {}",
                c.len()
            )))
        }
        None => estimate_lipschitz(&m, PROBE_RESOLUTION, pairs, seed)?,
    };
    let provenance = if constants.is_some() { "supplied" } else { "estimated" };
    let default_n = [m.subpops.iter().map(|sp| sp.size).sum::<u32>()];
    let ns: &[u32] = if ns.is_empty() { &default_n } else { ns };
    let echo = run_echo(
        cli,
        &format!(
            "bounds model={} seed={seed} pairs={pairs} source={provenance}",
            model.display()
        ),
    );

    let mut w = CsvWriter::create(&dir.join("bounds.csv"), cli.force)?;
    w.comment(&echo)?;
    w.row(&[
        "quantity",
        "value",
        "mode",
        "n",
        "r",
        "beta",
        "H5_1",
        "H6_1",
        "C",
        "estimated_or_supplied",
    ])?;
    let r_str = levels.map_or(String::new(), |r| format!("{r}"));
    match m.horizon {
        Horizon::Finite(t_end) => {
            let (h5, h6) = h_recursions(&mut profile, t_end)?;
            for &n in ns {
                let mut emit = |quantity: &str, value: f64, mode: &str, with_r: bool| {
                    w.row(&[
                        quantity,
                        &fmt_f64(value),
                        mode,
                        &format!("{n}"),
                        if with_r { r_str.as_str() } else { "" },
                        "",
                        &fmt_f64(h5),
                        &fmt_f64(h6),
                        &fmt_f64(profile.c),
                        provenance,
                    ])
                };
                emit(
                    "epsilon_population",
                    epsilon_finite(&profile, n, None, EpsilonMode::Population)?,
                    "population",
                    false,
                )?;
                if let Some(r) = levels {
                    emit(
                        "epsilon_resolution",
                        epsilon_finite(&profile, n, Some(r), EpsilonMode::Resolution)?,
                        "resolution",
                        true,
                    )?;
                    emit(
                        "epsilon_both",
                        epsilon_finite(&profile, n, Some(r), EpsilonMode::Both)?,
                        "both",
                        true,
                    )?;
                }
            }
        }
        Horizon::Discounted(beta) => {
            for &n in ns {
                let value = epsilon_discounted(&profile, n, beta)?;
                w.row(&[
                    "epsilon_discounted",
                    &fmt_f64(value),
                    "discounted",
                    &format!("{n}"),
                    "",
                    &fmt_f64(beta),
                    "",
                    "",
                    &fmt_f64(profile.c),
                    provenance,
                ])?;
            }
        }
    }
    w.finish()?;
    println!("source={provenance}");
    Ok(())
}

// ── example service ──────────────────────────────────────────────────────────

fn cmd_example_service(cli: &Cli, ns: &[u32], levels: Option<u32>) -> Result<()> {
    let dir = outdir(cli)?;
    let mut params = ServiceParams::default();
    if let Some(beta) = cli.beta {
        params.beta = beta;
    }
    let rule = match levels {
        Some(r) => LevelRule::Fixed(r),
        None => LevelRule::MatchPopulation,
    };
    // Fail fast on a bad parameter override before the long sweep.
    build_service_model(&params)?;
    let files = reproduce_figures(&params, dir, ns, rule, cli.force)?;
    for f in &files {
        println!("wrote={}", f.display());
    }
    Ok(())
}
