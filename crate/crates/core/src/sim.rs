//! Strategy evaluation on the true finite team.
//!
//! A solved policy prescribes a local law γ_t = (γ^1_t, …, γ^K_t) from shared
//! information; here those policies are played agent by agent: every agent i
//! of sub-population k applies u^i_t = γ^k_t(x^i_t), draws its own noise, and
//! moves.  The realised cost of a replication is Σ_t c_t(𝔇_t) (discounted by
//! β^{t−1} when applicable) with 𝔇_t = φ(𝐝_t, γ_t) the realised deep state.
//!
//! Evaluation is exact whenever the full outcome tree is small enough to
//! enumerate: agents move independently given (𝐝_t, γ_t), so the deep state
//! is a Markov chain on the count lattice whose rows are products of
//! per-sub-population count laws, and the expectation is a sparse forward
//! pass.  Otherwise Monte Carlo replications are used, each owning a random
//! stream derived from `(master seed, replication index)` so results never
//! depend on worker count or scheduling.  Gap measurements pair the two
//! strategies on common random numbers, which makes the gap of a strategy
//! against itself exactly zero and slashes the variance of small differences.
//!
//! Per-agent sampling is inverse-CDF in alphabet order, one uniform per
//! agent-step, so every trajectory is reproducible across platforms from its
//! seed alone.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dss::{init_distribution, DssSolution, QuantDssSolution};
use crate::error::{Error, Result};
use crate::kernel::{joint_successors, phi_state, StateActionDist};
use crate::model::{Horizon, Init, TeamModel};
use crate::pdss::{MixedPolicy, MixedTrajectory};
use crate::statespace::{
    empirical_counts, project_to_axis, Caps, DeepState, DeepStateSpace, LocalLaws, MixedAxis,
};
use crate::util::{next_unit, sample_pmf, stream_rng, stream_seed, Kahan};

/// Expansion budget above which exact enumeration yields to Monte Carlo.
const EXACT_ENUM_BUDGET: u64 = 1_000_000;

/// Discounted evaluations truncate where β^T reaches this factor.
const TRUNCATION_FACTOR: f64 = 1e-8;

// ── Strategies ───────────────────────────────────────────────────────────────

/// A playable strategy: any solved policy, or a fixed local law.
pub enum StrategyHandle<'a> {
    /// Full deep-state sharing: look the realised 𝐝_t up on the lattice.
    Dss(&'a DssSolution),
    /// Quantised sharing: look Q(𝐝_t) up on the mixed grid.
    Quantized(&'a QuantDssSolution),
    /// Partial sharing: walk the information state with a tracker.
    Mixed(MixedPolicy<'a>),
    /// The same local law every stage.
    Constant(LocalLaws),
}

impl StrategyHandle<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyHandle::Dss(_) => "dss",
            StrategyHandle::Quantized(_) => "dss-quantized",
            StrategyHandle::Mixed(MixedPolicy::Exact(_)) => "pdss-exact",
            StrategyHandle::Mixed(MixedPolicy::Quantized(_)) => "pdss-quantized",
            StrategyHandle::Constant(_) => "constant",
        }
    }
}

/// Per-rollout lookup state: lattice strategies are memoryless, partial
/// sharing carries its belief tracker.
enum Cursor<'a> {
    Plain,
    Tracker(MixedTrajectory<'a>),
}

fn make_cursor<'a>(model: &TeamModel, strategy: &StrategyHandle<'a>) -> Cursor<'a> {
    match strategy {
        StrategyHandle::Mixed(p) => Cursor::Tracker(MixedTrajectory::new(model, *p)),
        _ => Cursor::Plain,
    }
}

/// The law a lattice (tracker-free) strategy prescribes at `(t, 𝐝_t)`.
fn decide_lattice(
    model: &TeamModel,
    strategy: &StrategyHandle,
    t: usize,
    state: &DeepState,
) -> Result<LocalLaws> {
    match strategy {
        StrategyHandle::Constant(laws) => Ok(laws.clone()),
        StrategyHandle::Dss(sol) => {
            let stage = if sol.values.len() == 1 { 0 } else { t - 1 };
            let table = sol.policy.get(stage).ok_or_else(|| {
                Error::Invalid(format!("stage {t} beyond the solved horizon"))
            })?;
            let idx = sol.space.rank(state);
            let mut laws = sol.laws.blank();
            sol.laws.decode(table[idx as usize], &mut laws);
            Ok(laws)
        }
        StrategyHandle::Quantized(sol) => {
            let table = sol.policy.get(t - 1).ok_or_else(|| {
                Error::Invalid(format!("stage {t} beyond the solved horizon"))
            })?;
            let mut idx = 0u64;
            for (k, axis) in sol.space.axes.iter().enumerate() {
                let pos = match axis {
                    MixedAxis::Lattice(lat) => lat.rank(&state.counts[k]),
                    MixedAxis::Grid(g) => {
                        let n = model.n(k) as f64;
                        let fracs: Vec<f64> =
                            state.counts[k].iter().map(|&c| c as f64 / n).collect();
                        g.position(&project_to_axis(&fracs, g.r)).ok_or_else(|| {
                            Error::Invalid(format!(
                                "state {:?} at stage {t} has no quantised cell",
                                state.counts[k]
                            ))
                        })?
                    }
                };
                idx += pos * sol.space.strides[k];
            }
            let mut laws = sol.laws.blank();
            sol.laws.decode(table[idx as usize], &mut laws);
            Ok(laws)
        }
        StrategyHandle::Mixed(_) => Err(Error::Invalid(
            "partial-sharing strategies need their tracker".into(),
        )),
    }
}

fn decide(
    model: &TeamModel,
    strategy: &StrategyHandle,
    cursor: &Cursor,
    t: usize,
    state: &DeepState,
) -> Result<LocalLaws> {
    match cursor {
        Cursor::Plain => decide_lattice(model, strategy, t, state),
        Cursor::Tracker(tr) => tr.decide(model, t, &state.counts),
    }
}

// ── Rollouts ─────────────────────────────────────────────────────────────────

/// One stage of a realised trajectory.
#[derive(Debug)]
pub struct StagePoint {
    pub state: DeepState,
    pub laws: LocalLaws,
    /// Undiscounted realised stage cost c_t(𝔇_t).
    pub cost: f64,
}

/// One replication: the visited deep states, the laws played, and the total
/// (discounted) cost.
#[derive(Debug)]
pub struct Trajectory {
    pub stages: Vec<StagePoint>,
    pub total: f64,
    /// For discounted runs: β^T · ĉ / (1 − β) with ĉ the largest stage cost
    /// seen in this replication — the tail the truncation discarded, assuming
    /// later stage costs stay below ĉ.  Zero for finite horizons.
    pub remainder_bound: f64,
}

/// Move every agent one stage.  Sampling is inverse-CDF in alphabet order,
/// one uniform per agent: functional sub-populations draw a noise symbol and
/// apply the dynamics, kernel sub-populations draw the next state directly.
/// Also returns the realised noise counts per sub-population (empty for
/// kernel mode), so callers can check the deep-state update identity.
fn step_agents(
    model: &TeamModel,
    t: usize,
    states: &[Vec<usize>],
    laws: &LocalLaws,
    dist: &StateActionDist,
    uniforms: &[Vec<f64>],
) -> Result<(Vec<Vec<usize>>, Vec<Vec<u32>>)> {
    let mut next = Vec::with_capacity(states.len());
    let mut noise_counts = Vec::with_capacity(states.len());
    for k in 0..model.k_count() {
        let mut nk = Vec::with_capacity(states[k].len());
        let mut wc = vec![0u32; if model.has_dynamics(k) { model.nw(k) } else { 0 }];
        if model.has_dynamics(k) {
            let pmf = model.noise_pmf_at(t, k)?;
            for (i, &x) in states[k].iter().enumerate() {
                let u = laws.maps[k][x];
                let w = sample_pmf(pmf, uniforms[k][i]);
                wc[w] += 1;
                nk.push(model.dyn_next(t, k, x, u, dist, w)?);
            }
        } else {
            for (i, &x) in states[k].iter().enumerate() {
                let u = laws.maps[k][x];
                let row = model.kernel_row(t, k, x, u, dist);
                nk.push(sample_pmf(&row, uniforms[k][i]));
            }
        }
        next.push(nk);
        noise_counts.push(wc);
    }
    Ok((next, noise_counts))
}

fn initial_states(model: &TeamModel, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<Vec<usize>> {
    (0..model.k_count())
        .map(|k| match &model.subpops[k].init {
            Init::States(xs) => xs.clone(),
            Init::Pmf(p) => (0..model.n(k))
                .map(|_| sample_pmf(p, next_unit(rng)))
                .collect(),
        })
        .collect()
}

/// Play `strategy` for `t_end` stages from a fresh initial draw.
///
/// The whole replication is a pure function of `seed`: initial states, then
/// one uniform per agent per stage, all drawn in sub-population-major,
/// agent-minor order.
pub fn simulate_rollout(
    model: &TeamModel,
    strategy: &StrategyHandle,
    t_end: usize,
    seed: u64,
) -> Result<Trajectory> {
    if t_end == 0 {
        return Err(Error::Invalid("a rollout needs at least one stage".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut states = initial_states(model, &mut rng);
    let mut cursor = make_cursor(model, strategy);
    let beta = model.beta().unwrap_or(1.0);
    let mut discount = 1.0;
    let mut total = Kahan::default();
    let mut max_cost: f64 = 0.0;
    let mut stages = Vec::with_capacity(t_end);

    for t in 1..=t_end {
        let counts: Vec<Vec<u32>> = (0..model.k_count())
            .map(|k| empirical_counts(&states[k], model.m(k)))
            .collect::<Result<_>>()?;
        let state = DeepState { counts };
        let laws = decide(model, strategy, &cursor, t, &state)?;
        let dist = phi_state(model, &state, &laws);
        let cost = model.cost_eval(t, &dist);
        total.add(discount * cost);
        max_cost = max_cost.max(cost);
        discount *= beta;

        let uniforms: Vec<Vec<f64>> = (0..model.k_count())
            .map(|k| (0..model.n(k)).map(|_| next_unit(&mut rng)).collect())
            .collect();
        let (next, _) = step_agents(model, t, &states, &laws, &dist, &uniforms)?;
        if let Cursor::Tracker(tr) = &mut cursor {
            tr.advance(model, t, &state.counts, &laws)?;
        }
        stages.push(StagePoint { state, laws, cost });
        states = next;
    }

    let remainder_bound = match model.horizon {
        Horizon::Finite(_) => 0.0,
        Horizon::Discounted(b) => b.powi(t_end as i32) * max_cost / (1.0 - b),
    };
    Ok(Trajectory {
        stages,
        total: total.value(),
        remainder_bound,
    })
}

/// The horizon an evaluation runs to: the full finite horizon, or the stage
/// where β^T falls below the truncation factor.
pub fn effective_horizon(model: &TeamModel) -> usize {
    match model.horizon {
        Horizon::Finite(t) => t,
        Horizon::Discounted(b) => {
            let t = (TRUNCATION_FACTOR.ln() / b.ln()).ceil() as usize;
            t.clamp(1, 20_000)
        }
    }
}

// ── Exact enumeration ────────────────────────────────────────────────────────

/// Forward node for exact evaluation: lattice rank plus the belief bits a
/// partial-sharing tracker carries (empty for lattice strategies).
type NodeKey = (u64, Vec<u64>);

fn belief_bits(beliefs: &[Vec<f64>]) -> Vec<u64> {
    beliefs
        .iter()
        .flat_map(|b| b.iter().map(|v| v.to_bits()))
        .collect()
}

/// Exact expected cost by a sparse forward pass over the deep-state chain,
/// when the horizon is finite and the expansion work stays within budget.
/// Returns `None` when enumeration is not worth attempting (infinite horizon,
/// oversized lattice, or budget exhausted mid-way).
fn exact_expected_cost(model: &TeamModel, strategy: &StrategyHandle) -> Result<Option<f64>> {
    let Some(t_fin) = model.finite_t() else {
        return Ok(None);
    };
    let space = match DeepStateSpace::new(model, &Caps::default()) {
        Ok(s) => s,
        Err(Error::CapExceeded { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    // Worst-case expansion work: every lattice point branching to every other,
    // each stage.  Decline up front rather than discover mid-pass.
    let l = space.len() as u128;
    if l * l * t_fin as u128 > EXACT_ENUM_BUDGET as u128 {
        return Ok(None);
    }
    let mut tracker = match strategy {
        StrategyHandle::Mixed(p) => Some(MixedTrajectory::new(model, *p)),
        _ => None,
    };
    let init_beliefs = tracker.as_ref().map(|tr| tr.beliefs.clone()).unwrap_or_default();

    // measure: key → (probability, beliefs at that node)
    let mut measure: BTreeMap<NodeKey, (f64, Vec<Vec<f64>>)> = BTreeMap::new();
    for (rank, p) in init_distribution(model, &space) {
        measure.insert((rank, belief_bits(&init_beliefs)), (p, init_beliefs.clone()));
    }

    let mut work: u64 = 0;
    let mut total = Kahan::default();
    let mut state = space.blank();
    for t in 1..=t_fin {
        let mut next: BTreeMap<NodeKey, (f64, Vec<Vec<f64>>)> = BTreeMap::new();
        for ((rank, _), (p, beliefs)) in &measure {
            space.unrank(*rank, &mut state);
            let laws = match &mut tracker {
                Some(tr) => {
                    tr.beliefs = beliefs.clone();
                    tr.decide(model, t, &state.counts)?
                }
                None => decide_lattice(model, strategy, t, &state)?,
            };
            let dist = phi_state(model, &state, &laws);
            total.add(p * model.cost_eval(t, &dist));
            let succ_beliefs = match &mut tracker {
                Some(tr) => {
                    tr.advance(model, t, &state.counts, &laws)?;
                    tr.beliefs.clone()
                }
                None => Vec::new(),
            };
            let succ = joint_successors(model, t, &state, &laws, &space);
            work += succ.len() as u64;
            if work > EXACT_ENUM_BUDGET {
                return Ok(None);
            }
            let bits = belief_bits(&succ_beliefs);
            for (r2, q) in succ {
                let e = next
                    .entry((r2, bits.clone()))
                    .or_insert_with(|| (0.0, succ_beliefs.clone()));
                e.0 += p * q;
            }
        }
        measure = next;
    }
    Ok(Some(total.value()))
}

// ── Monte Carlo ──────────────────────────────────────────────────────────────

/// The result of an evaluation: mean cost with a 95% confidence half-width.
/// Exact enumerations report `exact = true`, zero half-width, and zero
/// replications used.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mean: f64,
    pub ci_half: f64,
    pub reps: usize,
    pub exact: bool,
    /// Largest truncation remainder over the replications (discounted only).
    pub remainder_bound: f64,
}

fn mean_and_ci(totals: &[f64]) -> (f64, f64) {
    let m = totals.len() as f64;
    let mut acc = Kahan::default();
    for &v in totals {
        acc.add(v);
    }
    let mean = acc.value() / m;
    if totals.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq = Kahan::default();
    for &v in totals {
        sq.add((v - mean) * (v - mean));
    }
    let var = sq.value() / (m - 1.0);
    (mean, 1.96 * (var / m).sqrt())
}

fn evaluate_mc(
    model: &TeamModel,
    strategy: &StrategyHandle,
    reps: usize,
    seed: u64,
) -> Result<Evaluation> {
    let t_end = effective_horizon(model);
    let runs: Vec<Trajectory> = (0..reps)
        .into_par_iter()
        .map(|j| simulate_rollout(model, strategy, t_end, stream_seed(seed, j as u64)))
        .collect::<Result<_>>()?;
    let totals: Vec<f64> = runs.iter().map(|r| r.total).collect();
    let (mean, ci_half) = mean_and_ci(&totals);
    let remainder_bound = runs.iter().map(|r| r.remainder_bound).fold(0.0, f64::max);
    Ok(Evaluation {
        mean,
        ci_half,
        reps,
        exact: false,
        remainder_bound,
    })
}

/// Expected cost of a strategy on the true team: exact enumeration when the
/// outcome tree fits the budget, otherwise `reps` Monte Carlo replications.
pub fn evaluate_strategy(
    model: &TeamModel,
    strategy: &StrategyHandle,
    reps: usize,
    seed: u64,
) -> Result<Evaluation> {
    if reps < 2 {
        return Err(Error::Invalid(
            "at least two replications are required".into(),
        ));
    }
    if let Some(mean) = exact_expected_cost(model, strategy)? {
        return Ok(Evaluation {
            mean,
            ci_half: 0.0,
            reps: 0,
            exact: true,
            remainder_bound: 0.0,
        });
    }
    evaluate_mc(model, strategy, reps, seed)
}

/// A paired cost-difference estimate J(A) − J(B).
#[derive(Clone, Debug)]
pub struct GapEstimate {
    /// Mean of J(A) − J(B); positive when A costs more.
    pub diff_mean: f64,
    pub ci_half: f64,
    pub reps: usize,
    pub exact: bool,
}

fn gap_mc(
    model: &TeamModel,
    a: &StrategyHandle,
    b: &StrategyHandle,
    reps: usize,
    seed: u64,
) -> Result<GapEstimate> {
    let t_end = effective_horizon(model);
    let diffs: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|j| {
            let s = stream_seed(seed, j as u64);
            let ra = simulate_rollout(model, a, t_end, s)?;
            let rb = simulate_rollout(model, b, t_end, s)?;
            Ok(ra.total - rb.total)
        })
        .collect::<Result<_>>()?;
    let (diff_mean, ci_half) = mean_and_ci(&diffs);
    Ok(GapEstimate {
        diff_mean,
        ci_half,
        reps,
        exact: false,
    })
}

/// Estimate J(A) − J(B).  Exact when both strategies enumerate within
/// budget; otherwise Monte Carlo with common random numbers, so identical
/// strategies measure a gap of exactly zero.
pub fn empirical_gap(
    model: &TeamModel,
    a: &StrategyHandle,
    b: &StrategyHandle,
    reps: usize,
    seed: u64,
) -> Result<GapEstimate> {
    if reps < 2 {
        return Err(Error::Invalid(
            "at least two replications are required".into(),
        ));
    }
    if let (Some(ja), Some(jb)) = (
        exact_expected_cost(model, a)?,
        exact_expected_cost(model, b)?,
    ) {
        return Ok(GapEstimate {
            diff_mean: ja - jb,
            ci_half: 0.0,
            reps: 0,
            exact: true,
        });
    }
    gap_mc(model, a, b, reps, seed)
}

// ── Tests ────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dss::{solve_dss, solve_dss_quantized, SolveOptions};
    use crate::kernel::bar_f;
    use crate::model::{Cost, PerT};
    use crate::pdss::{solve_pdss_quantized, PdssOptions};
    use crate::statespace::empirical;
    use crate::testkit::{
        deterministic_flow_model, shared_reset_model, two_pop_table_model, xor_model,
    };
    use crate::expr::Expr;
    use crate::util::stream_rng;
    use rand::Rng;

    fn constant_laws(model: &TeamModel, action: usize) -> LocalLaws {
        LocalLaws {
            maps: (0..model.k_count())
                .map(|k| vec![action.min(model.nu(k) - 1); model.m(k)])
                .collect(),
        }
    }

    #[test]
    fn zero_cost_model_rolls_out_to_zero_total() {
        let model = shared_reset_model();
        let strat = StrategyHandle::Constant(constant_laws(&model, 0));
        let tr = simulate_rollout(&model, &strat, 2, 9).unwrap();
        assert_eq!(tr.total, 0.0);
        assert_eq!(tr.stages.len(), 2);
        assert_eq!(tr.remainder_bound, 0.0);
    }

    #[test]
    fn deterministic_rollout_walks_the_noise_empirical_flow() {
        let model = deterministic_flow_model();
        let laws = constant_laws(&model, 1);
        let strat = StrategyHandle::Constant(laws.clone());
        let tr = simulate_rollout(&model, &strat, 3, 4).unwrap();
        // Sure noise: the realised fractions must follow bar_f exactly.
        let mut z = vec![0.5, 0.5];
        for point in &tr.stages {
            let n = model.n(0) as f64;
            let fr: Vec<f64> = point.state.counts[0].iter().map(|&c| c as f64 / n).collect();
            assert_eq!(fr, z);
            let dist = phi_state(&model, &point.state, &laws);
            z = bar_f(&model, 1, 0, &fr, &laws.maps[0], &dist, &[1.0]).unwrap();
        }
    }

    #[test]
    fn exact_mode_reproduces_the_dp_expectation() {
        let model = two_pop_table_model();
        let sol = solve_dss(&model, &SolveOptions::default()).unwrap();
        let ev = evaluate_strategy(&model, &StrategyHandle::Dss(&sol), 2, 1).unwrap();
        assert!(ev.exact);
        assert_eq!(ev.ci_half, 0.0);
        assert!((ev.mean - sol.expected_cost).abs() < 1e-10);
    }

    #[test]
    fn exact_mode_covers_quantised_and_tracked_strategies() {
        let model = deterministic_flow_model();
        let q = solve_dss_quantized(&model, 4, &[true], &SolveOptions::default()).unwrap();
        let ev = evaluate_strategy(&model, &StrategyHandle::Quantized(&q), 2, 1).unwrap();
        assert!(ev.exact);
        assert!((ev.mean - q.expected_cost).abs() < 1e-10);

        let p = solve_pdss_quantized(&model, &[false], 4, &PdssOptions::default()).unwrap();
        let strat = StrategyHandle::Mixed(MixedPolicy::Quantized(&p));
        let ev = evaluate_strategy(&model, &strat, 2, 1).unwrap();
        assert!(ev.exact);
        assert!((ev.mean - p.expected_cost).abs() < 1e-10);
    }

    #[test]
    fn deterministic_quantised_rollout_realises_the_solver_value() {
        let model = deterministic_flow_model();
        let q = solve_dss_quantized(&model, 4, &[true], &SolveOptions::default()).unwrap();
        let tr = simulate_rollout(&model, &StrategyHandle::Quantized(&q), 3, 77).unwrap();
        assert!((tr.total - q.expected_cost).abs() < 1e-10);
    }

    #[test]
    fn oversized_lattices_fall_back_to_monte_carlo() {
        let model = xor_model(1000);
        let strat = StrategyHandle::Constant(constant_laws(&model, 0));
        assert!(exact_expected_cost(&model, &strat).unwrap().is_none());
        let ev = evaluate_strategy(&model, &strat, 8, 5).unwrap();
        assert!(!ev.exact);
        assert_eq!(ev.reps, 8);
    }

    #[test]
    fn monte_carlo_mean_approaches_the_exact_value() {
        let model = two_pop_table_model();
        let sol = solve_dss(&model, &SolveOptions::default()).unwrap();
        let strat = StrategyHandle::Dss(&sol);
        let ev = evaluate_mc(&model, &strat, 4000, 13).unwrap();
        assert!(
            (ev.mean - sol.expected_cost).abs() < 4.0 * ev.ci_half.max(1e-3),
            "mean {} vs exact {} (ci {})",
            ev.mean,
            sol.expected_cost,
            ev.ci_half
        );
    }

    #[test]
    fn doubling_replications_shrinks_the_interval_like_root_two() {
        let model = two_pop_table_model();
        let strat = StrategyHandle::Constant(constant_laws(&model, 1));
        let a = evaluate_mc(&model, &strat, 2000, 21).unwrap();
        let b = evaluate_mc(&model, &strat, 4000, 21).unwrap();
        let ratio = b.ci_half / a.ci_half;
        let target = 1.0 / 2.0f64.sqrt();
        assert!(
            (ratio - target).abs() < 0.2 * target,
            "ci ratio {ratio} vs {target}"
        );
    }

    #[test]
    fn replication_streams_depend_only_on_master_seed_and_index() {
        let model = two_pop_table_model();
        let strat = StrategyHandle::Constant(constant_laws(&model, 0));
        let ev = evaluate_mc(&model, &strat, 5, 33).unwrap();
        let mut acc = Kahan::default();
        for j in 0..5u64 {
            let tr = simulate_rollout(&model, &strat, 3, stream_seed(33, j)).unwrap();
            acc.add(tr.total);
        }
        assert_eq!(ev.mean, acc.value() / 5.0);
        let again = evaluate_mc(&model, &strat, 5, 33).unwrap();
        assert_eq!(ev.mean, again.mean);
        assert_eq!(ev.ci_half, again.ci_half);
    }

    #[test]
    fn realised_empiricals_satisfy_the_deep_state_update_identity() {
        // In-class models: one shared reset map, and a deterministic flow.
        for model in [shared_reset_model(), deterministic_flow_model()] {
            let mut rng = stream_rng(17, 3);
            for _ in 0..200 {
                let states: Vec<Vec<usize>> = (0..model.k_count())
                    .map(|k| {
                        (0..model.n(k))
                            .map(|_| rng.random_range(0..model.m(0)))
                            .collect()
                    })
                    .collect();
                let laws = LocalLaws {
                    maps: (0..model.k_count())
                        .map(|k| {
                            (0..model.m(k))
                                .map(|_| rng.random_range(0..model.nu(k)))
                                .collect()
                        })
                        .collect(),
                };
                let uniforms: Vec<Vec<f64>> = (0..model.k_count())
                    .map(|k| (0..model.n(k)).map(|_| next_unit(&mut rng)).collect())
                    .collect();
                let counts: Vec<Vec<u32>> = (0..model.k_count())
                    .map(|k| empirical_counts(&states[k], model.m(k)).unwrap())
                    .collect();
                let state = DeepState { counts };
                let dist = phi_state(&model, &state, &laws);
                let (next, noise) =
                    step_agents(&model, 1, &states, &laws, &dist, &uniforms).unwrap();
                for k in 0..model.k_count() {
                    let zi = empirical(&states[k], model.m(k)).unwrap();
                    let zn = empirical(&next[k], model.m(k)).unwrap();
                    let n = model.n(k) as f64;
                    let eta: Vec<f64> = noise[k].iter().map(|&c| c as f64 / n).collect();
                    let flow = bar_f(&model, 1, k, &zi, &laws.maps[k], &dist, &eta).unwrap();
                    for (a, b) in zn.iter().zip(&flow) {
                        assert!((a - b).abs() < 1e-12, "ξ(next) {zn:?} vs flow {flow:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_agents_and_their_noise_permutes_the_step_exactly() {
        for model in [two_pop_table_model(), shared_reset_model()] {
            let mut rng = stream_rng(29, 5);
            for _ in 0..50 {
                let states: Vec<Vec<usize>> = (0..model.k_count())
                    .map(|k| {
                        (0..model.n(k))
                            .map(|_| rng.random_range(0..model.m(k)))
                            .collect()
                    })
                    .collect();
                let laws = LocalLaws {
                    maps: (0..model.k_count())
                        .map(|k| {
                            (0..model.m(k))
                                .map(|_| rng.random_range(0..model.nu(k)))
                                .collect()
                        })
                        .collect(),
                };
                let uniforms: Vec<Vec<f64>> = (0..model.k_count())
                    .map(|k| (0..model.n(k)).map(|_| next_unit(&mut rng)).collect())
                    .collect();
                // A random transposition per sub-population.
                let perms: Vec<Vec<usize>> = (0..model.k_count())
                    .map(|k| {
                        let n = model.n(k) as usize;
                        let mut p: Vec<usize> = (0..n).collect();
                        let i = rng.random_range(0..n);
                        let j = rng.random_range(0..n);
                        p.swap(i, j);
                        p
                    })
                    .collect();
                let apply = |v: &[Vec<usize>], f: &[Vec<f64>]| {
                    let vs: Vec<Vec<usize>> = v
                        .iter()
                        .zip(&perms)
                        .map(|(row, p)| p.iter().map(|&i| row[i]).collect())
                        .collect();
                    let fs: Vec<Vec<f64>> = f
                        .iter()
                        .zip(&perms)
                        .map(|(row, p)| p.iter().map(|&i| row[i]).collect())
                        .collect();
                    (vs, fs)
                };
                let counts: Vec<Vec<u32>> = (0..model.k_count())
                    .map(|k| empirical_counts(&states[k], model.m(k)).unwrap())
                    .collect();
                let dist = phi_state(&model, &DeepState { counts }, &laws);
                let (base, _) = step_agents(&model, 1, &states, &laws, &dist, &uniforms).unwrap();
                let (ps, pu) = apply(&states, &uniforms);
                let (perm, _) = step_agents(&model, 1, &ps, &laws, &dist, &pu).unwrap();
                let (expect, _) = apply(&base, &uniforms);
                assert_eq!(perm, expect);
            }
        }
    }

    #[test]
    fn a_strategy_against_itself_measures_a_gap_of_exactly_zero() {
        let model = xor_model(12);
        let strat_a = StrategyHandle::Constant(constant_laws(&model, 0));
        let strat_b = StrategyHandle::Constant(constant_laws(&model, 0));
        let gap = gap_mc(&model, &strat_a, &strat_b, 16, 3).unwrap();
        assert_eq!(gap.diff_mean, 0.0);
        assert_eq!(gap.ci_half, 0.0);
        let exact = empirical_gap(&model, &strat_a, &strat_b, 4, 3).unwrap();
        assert_eq!(exact.diff_mean, 0.0);
    }

    #[test]
    fn rolling_past_the_solved_horizon_names_the_stage() {
        let model = two_pop_table_model();
        let sol = solve_dss(&model, &SolveOptions::default()).unwrap();
        let err = simulate_rollout(&model, &StrategyHandle::Dss(&sol), 5, 1).unwrap_err();
        assert!(err.to_string().contains("stage 4"), "{err}");
    }

    #[test]
    fn discounted_totals_match_the_geometric_series() {
        let base = shared_reset_model();
        let ctx = crate::expr::BindContext {
            pops: &base.bind_pops(),
        };
        let model = TeamModel::new(
            base.subpops,
            Cost::Joint(PerT::Fixed(Expr::parse("1", &ctx).unwrap())),
            Horizon::Discounted(0.8),
        )
        .unwrap();
        let strat = StrategyHandle::Constant(constant_laws(&model, 0));
        let t_end = effective_horizon(&model);
        let tr = simulate_rollout(&model, &strat, t_end, 2).unwrap();
        let series = (1.0 - 0.8f64.powi(t_end as i32)) / (1.0 - 0.8);
        assert!((tr.total - series).abs() < 1e-9);
        assert!((tr.remainder_bound - 0.8f64.powi(t_end as i32) / 0.2).abs() < 1e-12);
        assert!(tr.remainder_bound < 1e-6);
        let ev = evaluate_mc(&model, &strat, 3, 1).unwrap();
        assert!((ev.mean + ev.remainder_bound - 5.0).abs() < 1e-6);
    }

    #[test]
    fn tracked_strategy_rollout_realises_the_mixed_value_when_deterministic() {
        let model = deterministic_flow_model();
        let p = solve_pdss_quantized(&model, &[false], 4, &PdssOptions::default()).unwrap();
        let strat = StrategyHandle::Mixed(MixedPolicy::Quantized(&p));
        let tr = simulate_rollout(&model, &strat, 3, 123).unwrap();
        assert!((tr.total - p.expected_cost).abs() < 1e-10);
    }
}
