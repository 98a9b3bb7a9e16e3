//! Raw per-agent models and the exchangeability precondition.
//!
//! A raw model describes a finite crowd agent by agent: one global dynamics
//! map sends the vectors of states, actions and noises to the vector of next
//! states, and one global cost reads the full state and action vectors.  The
//! team abstraction applies when agents within each sub-population are
//! interchangeable — permuting a sub-population's agents (together with
//! their noises) must permute the next states the same way and leave the
//! cost unchanged.  Transpositions generate all such permutations, so the
//! checker only ever swaps one pair at a time.
//!
//! [`RawAgentModel::from_team`] goes the other way: it spells a team model
//! out agent by agent, with every agent of sub-population k moved by the
//! same per-agent rule applied at the joint state–action empirical.  Models
//! built that way are exchangeable by construction, which is the shape of
//! argument the checker's probes cannot provide on their own.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::StateActionDist;
use crate::model::TeamModel;
use crate::util::{stream_rng, streams};
use rand::Rng;

// ── Raw models ───────────────────────────────────────────────────────────────

/// t, states, actions, noises (all indexed agent by agent) → next states.
pub type RawDynamicsFn = Arc<dyn Fn(usize, &[usize], &[usize], &[usize]) -> Vec<usize> + Send + Sync>;
/// t, states, actions → stage cost.
pub type RawCostFn = Arc<dyn Fn(usize, &[usize], &[usize]) -> f64 + Send + Sync>;

/// A finite crowd written agent by agent.  Agents are numbered with
/// sub-population 0 first; sub-population k occupies a contiguous block of
/// `sizes[k]` slots.
#[derive(Clone)]
pub struct RawAgentModel {
    pub sizes: Vec<u32>,
    /// States per agent of sub-population k.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub noises: Vec<usize>,
    pub f: RawDynamicsFn,
    pub c: RawCostFn,
    pub t_end: usize,
}

impl RawAgentModel {
    pub fn agent_count(&self) -> usize {
        self.sizes.iter().map(|&s| s as usize).sum()
    }

    /// First agent slot of sub-population k.
    pub fn offset(&self, k: usize) -> usize {
        self.sizes[..k].iter().map(|&s| s as usize).sum()
    }

    /// Sub-population owning agent slot i.
    pub fn subpop_of(&self, i: usize) -> usize {
        let mut rest = i;
        for (k, &s) in self.sizes.iter().enumerate() {
            if rest < s as usize {
                return k;
            }
            rest -= s as usize;
        }
        panic!("agent index {i} out of range");
    }

    /// Spell a team model out agent by agent: each agent's next state comes
    /// from its sub-population's per-agent dynamics evaluated at the joint
    /// state–action empirical of the whole configuration, and the cost is the
    /// team stage cost at that same empirical.  Needs functional dynamics.
    pub fn from_team(model: &TeamModel) -> Result<RawAgentModel> {
        for sp in &model.subpops {
            if sp.dynamics.is_none() {
                return Err(Error::Invalid(format!(
                    "sub-population {} has no functional dynamics to spell out per agent",
                    sp.name
                )));
            }
        }
        let t_end = model.finite_t().unwrap_or(1);
        let sizes: Vec<u32> = (0..model.k_count()).map(|k| model.n(k)).collect();
        let states: Vec<usize> = (0..model.k_count()).map(|k| model.m(k)).collect();
        let actions: Vec<usize> = (0..model.k_count()).map(|k| model.nu(k)).collect();
        let noises: Vec<usize> = (0..model.k_count()).map(|k| model.nw(k)).collect();
        let fm = model.clone();
        let sizes_f = sizes.clone();
        let f: RawDynamicsFn = Arc::new(move |t, x, u, w| {
            let dist = empirical_dist(&fm, &sizes_f, x, u);
            let mut next = Vec::with_capacity(x.len());
            let mut i = 0usize;
            for (k, &s) in sizes_f.iter().enumerate() {
                for _ in 0..s {
                    next.push(
                        fm.dyn_next(t, k, x[i], u[i], &dist, w[i])
                            .expect("dynamics checked at construction"),
                    );
                    i += 1;
                }
            }
            next
        });
        let cm = model.clone();
        let sizes_c = sizes.clone();
        let c: RawCostFn =
            Arc::new(move |t, x, u| cm.cost_eval(t, &empirical_dist(&cm, &sizes_c, x, u)));
        Ok(RawAgentModel {
            sizes,
            states,
            actions,
            noises,
            f,
            c,
            t_end,
        })
    }
}

/// The joint state–action empirical of one agent-by-agent configuration.
fn empirical_dist(
    model: &TeamModel,
    sizes: &[u32],
    x: &[usize],
    u: &[usize],
) -> StateActionDist {
    let mut dist = StateActionDist::zeros(model);
    let mut i = 0usize;
    for (k, &s) in sizes.iter().enumerate() {
        let w = 1.0 / s as f64;
        for _ in 0..s {
            let idx = dist.idx(k, x[i], u[i]);
            dist.as_flat_mut()[idx] += w;
            i += 1;
        }
    }
    dist
}

// ── Exchangeability check ────────────────────────────────────────────────────

/// How hard to look for an asymmetry.
#[derive(Clone, Debug)]
pub enum ExchangeabilityCheck {
    /// Random configurations and random within-block swaps.
    Sampled { probes: usize, seed: u64 },
    /// Every configuration and every within-block swap, every stage.
    Exhaustive,
}

/// Evaluation budget for the exhaustive mode.
const EXHAUSTIVE_BUDGET: u128 = 10_000_000;

/// Verify that swapping two agents of the same sub-population (with their
/// noises) permutes the next states accordingly and leaves the cost alone.
pub fn check_partial_exchangeability(
    raw: &RawAgentModel,
    mode: &ExchangeabilityCheck,
) -> Result<()> {
    let n = raw.agent_count();
    let per_agent_states: Vec<usize> = (0..n).map(|i| raw.states[raw.subpop_of(i)]).collect();
    let per_agent_actions: Vec<usize> = (0..n).map(|i| raw.actions[raw.subpop_of(i)]).collect();
    let per_agent_noises: Vec<usize> =
        (0..n).map(|i| raw.noises[raw.subpop_of(i)].max(1)).collect();
    let pairs: Vec<(usize, usize, usize)> = (0..raw.sizes.len())
        .flat_map(|k| {
            let lo = raw.offset(k);
            let hi = lo + raw.sizes[k] as usize;
            (lo..hi).flat_map(move |i| ((i + 1)..hi).map(move |j| (k, i, j)))
        })
        .collect();
    if pairs.is_empty() {
        return Ok(());
    }

    let check_config = |t: usize,
                            x: &[usize],
                            u: &[usize],
                            w: &[usize],
                            (k, i, j): (usize, usize, usize)|
     -> Result<()> {
        let mut sx = x.to_vec();
        sx.swap(i, j);
        let mut su = u.to_vec();
        su.swap(i, j);
        let mut sw = w.to_vec();
        sw.swap(i, j);
        let mut want = (raw.f)(t, x, u, w);
        want.swap(i, j);
        let got = (raw.f)(t, &sx, &su, &sw);
        if got != want {
            return Err(Error::Assumption(format!(
                "dynamics distinguish agents {i} and {j} of sub-population {k} at stage {t}: \
                 swapping them does not permute the successors"
            )));
        }
        let a = (raw.c)(t, x, u);
        let b = (raw.c)(t, &sx, &su);
        if (a - b).abs() > 1e-12 {
            return Err(Error::Assumption(format!(
                "cost distinguishes agents {i} and {j} of sub-population {k} at stage {t} \
                 ({a} vs {b})"
            )));
        }
        Ok(())
    };

    match mode {
        ExchangeabilityCheck::Sampled { probes, seed } => {
            let mut rng = stream_rng(*seed, streams::EXCHANGEABILITY);
            for _ in 0..(*probes).max(1) {
                let t = rng.random_range(1..=raw.t_end.max(1));
                let x: Vec<usize> =
                    per_agent_states.iter().map(|&m| rng.random_range(0..m)).collect();
                let u: Vec<usize> =
                    per_agent_actions.iter().map(|&a| rng.random_range(0..a)).collect();
                let w: Vec<usize> =
                    per_agent_noises.iter().map(|&v| rng.random_range(0..v)).collect();
                let pair = pairs[rng.random_range(0..pairs.len())];
                check_config(t, &x, &u, &w, pair)?;
            }
            Ok(())
        }
        ExchangeabilityCheck::Exhaustive => {
            let mut configs: u128 = 1;
            for i in 0..n {
                configs = configs
                    .saturating_mul(per_agent_states[i] as u128)
                    .saturating_mul(per_agent_actions[i] as u128)
                    .saturating_mul(per_agent_noises[i] as u128);
            }
            let total = configs
                .saturating_mul(pairs.len() as u128)
                .saturating_mul(raw.t_end.max(1) as u128);
            if total > EXHAUSTIVE_BUDGET {
                return Err(Error::CapExceeded {
                    space: "exhaustive exchangeability check".into(),
                    value: total,
                    cap: EXHAUSTIVE_BUDGET as u64,
                });
            }
            // mixed-radix counter over (x, u, w)
            let radices: Vec<usize> = per_agent_states
                .iter()
                .chain(&per_agent_actions)
                .chain(&per_agent_noises)
                .copied()
                .collect();
            let mut digits = vec![0usize; radices.len()];
            loop {
                let x = &digits[..n];
                let u = &digits[n..2 * n];
                let w = &digits[2 * n..];
                for t in 1..=raw.t_end.max(1) {
                    for &pair in &pairs {
                        check_config(t, x, u, w, pair)?;
                    }
                }
                let mut pos = radices.len();
                loop {
                    if pos == 0 {
                        return Ok(());
                    }
                    pos -= 1;
                    digits[pos] += 1;
                    if digits[pos] < radices[pos] {
                        break;
                    }
                    digits[pos] = 0;
                }
            }
        }
    }
}
