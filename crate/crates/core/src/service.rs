//! Service-management worked example: a company serving n subscribers from a
//! capacity-constrained server.
//!
//! Each user is in state x ∈ {0, 1} (1 = has an outstanding request) and is
//! assigned one of three service options each period: flat-rate service,
//! discounted service that asks the user to defer new requests, or service
//! bought in from a third party at a rate tied to current demand.  New
//! requests arrive with probability (1 − α(u))·μ and are cleared with
//! probability q(u).  A single major agent — the server — carries a nominal
//! capacity x⁰ from a finite menu and re-targets it each period, except when
//! a fault freezes it: x⁰' = x⁰·w⁰ + u⁰·(1 − w⁰).
//!
//! The stage cost charges each user its option price (base price c_B(u, 1−d)
//! while idle, service price c_S(u, d) while requesting, both affine in the
//! request share d), the server its capacity and patching prices
//! ℓ_C(x⁰) + ℓ_P·|u⁰ − x⁰|, and the team a penalty λ·(d − x⁰)² for letting
//! demand drift from capacity, discounted at β.
//!
//! Because the user state is binary, the request share d is a sufficient
//! statistic for the whole deep state, so policies are tables over
//! (d, x⁰) — n + 1 lattice points by |𝒳⁰| capacities.  The figure
//! reproduction emits that policy surface, one simulated trajectory, and the
//! partial-sharing convergence sweep.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dss::{solve_dss, SolveOptions};
use crate::error::{Error, Result};
use crate::expr::{BindContext, Expr};
use crate::model::{Cost, Dynamics, Horizon, Init, Kernel, PerT, SubPop, TeamModel};
use crate::pdss::{solve_pdss_quantized, MixedPolicy, PdssOptions};
use crate::sim::{empirical_gap, simulate_rollout, StrategyHandle};
use crate::util::{fmt_f64, CsvWriter};

/// Largest common denominator searched for representing the user transition
/// rates on a uniform noise grid.
const MAX_RATE_DENOMINATOR: u32 = 1000;

/// Fixed seed for the single published trajectory.
const FIG2_SEED: u64 = 7;
/// Trajectory length for the published trajectory.
const FIG2_HORIZON: usize = 100;
/// Seed and replication count for the convergence sweep's gap measurements.
const FIG3_SEED: u64 = 11;
const FIG3_REPS: usize = 600;

// ── Parameters ───────────────────────────────────────────────────────────────

/// A price affine in the request share d: `k0 + kd · d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub k0: f64,
    pub kd: f64,
}

impl Affine {
    pub const fn constant(k0: f64) -> Self {
        Affine { k0, kd: 0.0 }
    }

    pub fn eval(&self, d: f64) -> f64 {
        self.k0 + self.kd * d
    }
}

/// Parameters of the service-management example.  The defaults are the
/// published simulation configuration.
#[derive(Clone, Debug)]
pub struct ServiceParams {
    /// Number of users.
    pub n: u32,
    /// Discount factor.
    pub beta: f64,
    /// Request probability per period without participation.
    pub mu: f64,
    /// Participation rate per option (willingness to defer new requests).
    pub alpha: [f64; 3],
    /// Service rate per option.
    pub q: [f64; 3],
    /// Base price per option, affine in d — charged to idle users as
    /// c_B(u, 1 − d).
    pub c_b: [Affine; 3],
    /// Service price per option, affine in d — charged to requesting users.
    pub c_s: [Affine; 3],
    /// Weight of the (d − x⁰)² demand-tracking penalty.
    pub lambda: f64,
    /// Nominal capacity menu (ascending, values in [0, 1]).
    pub capacities: Vec<f64>,
    /// Price of holding each capacity.
    pub ell_c: Vec<f64>,
    /// Price per unit of patched capacity |u⁰ − x⁰|.
    pub ell_p: f64,
    /// Probability that a fault freezes the capacity for one period.
    pub p_fault: f64,
    /// Initial user distribution over {idle, requesting}.
    pub user_init: [f64; 2],
    /// Index into `capacities` of the server's initial state.
    pub server_init: usize,
}

impl Default for ServiceParams {
    fn default() -> Self {
        let c_b1 = 0.59;
        let c_s1 = 0.65;
        ServiceParams {
            n: 200,
            beta: 0.8,
            mu: 0.8,
            alpha: [0.0, 0.85, 0.0],
            q: [0.1, 0.05, 0.2],
            c_b: [
                Affine::constant(c_b1),
                Affine::constant(1.2 * c_b1),
                // c_B(3, 1 − d) = 0.3·(1 + (1 − d)) = 0.6 − 0.3·d.
                Affine { k0: 0.6, kd: -0.3 },
            ],
            c_s: [
                Affine::constant(c_s1),
                Affine::constant(1.2 * c_s1),
                // c_S(3, d) = 0.5·(1 + d).
                Affine { k0: 0.5, kd: 0.5 },
            ],
            lambda: 15.0,
            capacities: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            ell_c: vec![0.02, 0.04, 0.07, 0.12, 0.15, 0.2],
            ell_p: 0.5,
            p_fault: 0.05,
            user_init: [0.2, 0.8],
            server_init: 0,
        }
    }
}

impl ServiceParams {
    /// New-request probability for a user in state 0 under option `u`
    /// (0-based index).
    pub fn request_rate(&self, u: usize) -> f64 {
        (1.0 - self.alpha[u]) * self.mu
    }

    /// Probability an outstanding request survives the period under option
    /// `u`.
    pub fn stay_rate(&self, u: usize) -> f64 {
        1.0 - self.q[u]
    }

    fn check(&self) -> Result<()> {
        let prob = |v: f64, what: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Model(format!("{what} = {v} is not a probability")));
            }
            Ok(())
        };
        if self.n == 0 {
            return Err(Error::Model("at least one user is required".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Model(format!(
                "discount factor {} outside [0, 1)",
                self.beta
            )));
        }
        prob(self.mu, "request probability")?;
        prob(self.p_fault, "fault probability")?;
        for u in 0..3 {
            prob(self.alpha[u], "participation rate")?;
            prob(self.q[u], "service rate")?;
        }
        if self.lambda < 0.0 || self.ell_p < 0.0 {
            return Err(Error::Model("prices must be non-negative".into()));
        }
        if self.capacities.len() < 2 || self.capacities.len() != self.ell_c.len() {
            return Err(Error::Model(
                "capacity menu and its price list must align (and hold at least two levels)"
                    .into(),
            ));
        }
        if self
            .capacities
            .windows(2)
            .any(|w| w[0] >= w[1] || !(0.0..=1.0).contains(&w[0]) || !(0.0..=1.0).contains(&w[1]))
        {
            return Err(Error::Model(
                "capacities must be strictly ascending values in [0, 1]".into(),
            ));
        }
        if self.ell_c.iter().any(|&v| v < 0.0) {
            return Err(Error::Model("capacity prices must be non-negative".into()));
        }
        let s: f64 = self.user_init.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.user_init.iter().any(|&p| p < 0.0) {
            return Err(Error::Model("user initial distribution must be a pmf".into()));
        }
        if self.server_init >= self.capacities.len() {
            return Err(Error::Model(format!(
                "server initial index {} outside the capacity menu",
                self.server_init
            )));
        }
        Ok(())
    }

    /// Smallest denominator D such that every user transition rate is an
    /// exact multiple of 1/D, so a D-symbol uniform noise alphabet reproduces
    /// the kernel without rounding.
    fn rate_denominator(&self) -> Result<u32> {
        let rates: Vec<f64> = (0..3)
            .flat_map(|u| [self.request_rate(u), self.stay_rate(u)])
            .collect();
        for d in 1..=MAX_RATE_DENOMINATOR {
            if rates
                .iter()
                .all(|r| (r * d as f64 - (r * d as f64).round()).abs() < 1e-9)
            {
                return Ok(d);
            }
        }
        Err(Error::Model(format!(
            "user transition rates admit no exact common denominator up to {MAX_RATE_DENOMINATOR}"
        )))
    }

    /// One-line echo of every parameter, for CSV header comments.
    pub fn echo(&self) -> String {
        format!(
            "n={} beta={} mu={} alpha={:?} q={:?} c_b={:?} c_s={:?} lambda={} capacities={:?} ell_c={:?} ell_p={} p_fault={} user_init={:?} server_init={}",
            self.n,
            self.beta,
            self.mu,
            self.alpha,
            self.q,
            self.c_b.map(|a| (a.k0, a.kd)),
            self.c_s.map(|a| (a.k0, a.kd)),
            self.lambda,
            self.capacities,
            self.ell_c,
            self.ell_p,
            self.p_fault,
            self.user_init,
            self.server_init
        )
    }
}

// ── Model assembly ───────────────────────────────────────────────────────────

fn capacity_symbol(v: f64) -> String {
    format!("c{}", (v * 100.0).round() as i64)
}

fn user_subpop(params: &ServiceParams) -> Result<SubPop> {
    let d = params.rate_denominator()?;
    let noises: Vec<String> = (0..d).map(|w| format!("w{w}")).collect();
    let pmf = vec![1.0 / d as f64; d as usize];
    // Map layout: (x, u, w) with w fastest.  Next state is 1 exactly when the
    // noise symbol falls below the rate threshold.
    let mut map = Vec::with_capacity(2 * 3 * d as usize);
    for x in 0..2usize {
        for u in 0..3usize {
            let rate = if x == 0 {
                params.request_rate(u)
            } else {
                params.stay_rate(u)
            };
            let threshold = (rate * d as f64).round() as u32;
            for w in 0..d {
                map.push(usize::from(w < threshold));
            }
        }
    }
    Ok(SubPop {
        name: "users".into(),
        size: params.n,
        states: vec!["x0".into(), "x1".into()],
        actions: vec!["opt1".into(), "opt2".into(), "opt3".into()],
        noises,
        noise_pmf: Some(PerT::Fixed(pmf)),
        init: Init::Pmf(params.user_init.to_vec()),
        kernel: Kernel::FromDynamics,
        dynamics: Some(Dynamics::Map(PerT::Fixed(map))),
    })
}

fn server_subpop(params: &ServiceParams) -> SubPop {
    let levels = params.capacities.len();
    let syms: Vec<String> = params.capacities.iter().map(|&v| capacity_symbol(v)).collect();
    // Map layout: (x, u, w) with w ∈ {ok, fault}; ok applies the action,
    // fault freezes the state.
    let mut map = Vec::with_capacity(levels * levels * 2);
    for x in 0..levels {
        for u in 0..levels {
            map.push(u);
            map.push(x);
        }
    }
    SubPop {
        name: "server".into(),
        size: 1,
        states: syms.clone(),
        actions: syms,
        noises: vec!["ok".into(), "fault".into()],
        noise_pmf: Some(PerT::Fixed(vec![1.0 - params.p_fault, params.p_fault])),
        init: Init::States(vec![params.server_init]),
        kernel: Kernel::FromDynamics,
        dynamics: Some(Dynamics::Map(PerT::Fixed(map))),
    }
}

fn affine_expr(a: &Affine, ctx: &BindContext) -> Result<Expr> {
    if a.kd == 0.0 {
        Ok(Expr::constant(a.k0))
    } else if a.kd > 0.0 {
        Expr::parse(&format!("{} + {} * d(users, x1)", a.k0, a.kd), ctx)
    } else {
        Expr::parse(&format!("{} - {} * d(users, x1)", a.k0, -a.kd), ctx)
    }
}

/// Assemble the two-sub-population team model for the given parameters.
pub fn build_service_model(params: &ServiceParams) -> Result<TeamModel> {
    params.check()?;
    let users = user_subpop(params)?;
    let server = server_subpop(params);
    let pops_view: Vec<(String, Vec<String>, Vec<String>)> = [&users, &server]
        .iter()
        .map(|sp| (sp.name.clone(), sp.states.clone(), sp.actions.clone()))
        .collect();
    let ctx = BindContext { pops: &pops_view };

    // Users: idle pay the base price at 1 − d, requesting pay the service
    // price at d; cells laid out (x, u) with u fastest.
    let mut user_cells = Vec::with_capacity(6);
    for a in &params.c_b {
        user_cells.push(affine_expr(a, &ctx)?);
    }
    for a in &params.c_s {
        user_cells.push(affine_expr(a, &ctx)?);
    }
    // Server: capacity price plus patching price, constants per (x⁰, u⁰).
    let levels = params.capacities.len();
    let mut server_cells = Vec::with_capacity(levels * levels);
    for x in 0..levels {
        for u in 0..levels {
            server_cells.push(Expr::constant(
                params.ell_c[x] + params.ell_p * (params.capacities[u] - params.capacities[x]).abs(),
            ));
        }
    }
    // Demand-tracking penalty λ·(d − x⁰)², with x⁰ recovered from the
    // server's occupied coordinate.
    let x0: String = params
        .capacities
        .iter()
        .map(|&v| format!("{} * d(server, {})", v, capacity_symbol(v)))
        .collect::<Vec<_>>()
        .join(" + ");
    let dev = format!("(d(users, x1) - ({x0}))");
    let coupling = Expr::parse(&format!("{} * {dev} * {dev}", params.lambda), &ctx)?;

    let cost = Cost::PerAgent {
        terms: vec![PerT::Fixed(user_cells), PerT::Fixed(server_cells)],
        coupling: Some(PerT::Fixed(coupling)),
    };
    TeamModel::new(
        vec![users, server],
        cost,
        Horizon::Discounted(params.beta),
    )
}

// ── Figures ──────────────────────────────────────────────────────────────────

/// How the convergence sweep picks the quantisation resolution for each n.
#[derive(Clone, Copy, Debug)]
pub enum LevelRule {
    /// r = n: one quantisation level per user.
    MatchPopulation,
    /// The same fixed resolution for every n.
    Fixed(u32),
}

impl LevelRule {
    fn r_for(&self, n: u32) -> u32 {
        match self {
            LevelRule::MatchPopulation => n,
            LevelRule::Fixed(r) => *r,
        }
    }
}

fn write_policy_figure(
    path: &Path,
    echo: &str,
    header: [&str; 3],
    rows: &[(f64, f64, String)],
    force: bool,
) -> Result<()> {
    let mut w = CsvWriter::create(path, force)?;
    w.comment(echo)?;
    w.row(&header)?;
    for (d, x0, v) in rows {
        w.row(&[&fmt_f64(*d), &fmt_f64(*x0), v])?;
    }
    w.finish()
}

/// Solve the example and emit the published figures' data as CSV files:
///
/// * `fig1a.csv`, `fig1b.csv` — optimal option for idle / requesting users on
///   the (d, x⁰) grid; `fig1c.csv` — optimal next capacity.
/// * `fig2.csv` — one seeded trajectory of (d_t, x⁰_t).
/// * `fig3.csv` — J under full sharing vs. quantised partial sharing
///   (server observed, user mean-field on r levels) for each n, with the
///   measured gap.
///
/// Returns the paths written.
pub fn reproduce_figures(
    params: &ServiceParams,
    outdir: &Path,
    ns: &[u32],
    rule: LevelRule,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let echo = params.echo();
    let model = build_service_model(params)?;
    let opts = SolveOptions::default();
    let sol = solve_dss(&model, &opts)?;
    let levels = params.capacities.len();
    let n = params.n as usize;

    // ── Fig. 1: policy surfaces over the (d, x⁰) grid ──
    let mut fig1 = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut state = sol.space.blank();
    for c in 0..=n {
        for j in 0..levels {
            state.counts[0][0] = (n - c) as u32;
            state.counts[0][1] = c as u32;
            state.counts[1].fill(0);
            state.counts[1][j] = 1;
            let idx = sol.space.rank(&state);
            let mut laws = sol.laws.blank();
            sol.laws.decode(sol.policy[0][idx as usize], &mut laws);
            let d = c as f64 / n as f64;
            let x0 = params.capacities[j];
            fig1[0].push((d, x0, format!("{}", laws.maps[0][0] + 1)));
            fig1[1].push((d, x0, format!("{}", laws.maps[0][1] + 1)));
            fig1[2].push((d, x0, fmt_f64(params.capacities[laws.maps[1][j]])));
        }
    }
    let fig1a = outdir.join("fig1a.csv");
    let fig1b = outdir.join("fig1b.csv");
    let fig1c = outdir.join("fig1c.csv");
    write_policy_figure(&fig1a, &echo, ["d", "x0", "option"], &fig1[0], force)?;
    write_policy_figure(&fig1b, &echo, ["d", "x0", "option"], &fig1[1], force)?;
    write_policy_figure(&fig1c, &echo, ["d", "x0", "u0"], &fig1[2], force)?;

    // ── Fig. 2: one trajectory of (d_t, x⁰_t) ──
    let fig2 = outdir.join("fig2.csv");
    {
        let tr = simulate_rollout(&model, &StrategyHandle::Dss(&sol), FIG2_HORIZON, FIG2_SEED)?;
        let mut w = CsvWriter::create(&fig2, force)?;
        w.comment(&format!("{echo} seed={FIG2_SEED}"))?;
        w.row(&["t", "d_t", "x0_t"])?;
        for (i, point) in tr.stages.iter().enumerate() {
            let d = point.state.counts[0][1] as f64 / n as f64;
            let j = point.state.counts[1]
                .iter()
                .position(|&c| c > 0)
                .expect("server occupies one state");
            w.row(&[
                &format!("{}", i + 1),
                &fmt_f64(d),
                &fmt_f64(params.capacities[j]),
            ])?;
        }
        w.finish()?;
    }

    // ── Fig. 3: convergence of quantised partial sharing ──
    let rows: Vec<(u32, f64, f64, f64)> = ns
        .par_iter()
        .map(|&n_i| -> Result<(u32, f64, f64, f64)> {
            let mut p_i = params.clone();
            p_i.n = n_i;
            let model_i = build_service_model(&p_i)?;
            let sol_i = solve_dss(&model_i, &opts)?;
            let observed = vec![false, true];
            let quant =
                solve_pdss_quantized(&model_i, &observed, rule.r_for(n_i), &PdssOptions::default())?;
            let gap = empirical_gap(
                &model_i,
                &StrategyHandle::Mixed(MixedPolicy::Quantized(&quant)),
                &StrategyHandle::Dss(&sol_i),
                FIG3_REPS,
                FIG3_SEED,
            )?;
            Ok((
                n_i,
                sol_i.expected_cost,
                sol_i.expected_cost + gap.diff_mean,
                gap.diff_mean,
            ))
        })
        .collect::<Result<_>>()?;
    let fig3 = outdir.join("fig3.csv");
    {
        let mut w = CsvWriter::create(&fig3, force)?;
        w.comment(&format!(
            "{echo} rule={rule:?} seed={FIG3_SEED} reps={FIG3_REPS}"
        ))?;
        w.row(&["n", "J_dss", "J_pdss_quantized", "gap"])?;
        for (n_i, j_dss, j_pq, gap) in &rows {
            w.row(&[
                &format!("{n_i}"),
                &fmt_f64(*j_dss),
                &fmt_f64(*j_pq),
                &fmt_f64(*gap),
            ])?;
        }
        w.finish()?;
    }

    Ok(vec![fig1a, fig1b, fig1c, fig2, fig3])
}

// ── Tests ────────────────────────────────────────────────────────────────────
