//! Team model description and validation.
//!
//! A team is a finite collection of sub-populations.  Sub-population k holds
//! n_k exchangeable agents over finite state/action/noise alphabets; one
//! agent's state moves by x' = f^k_t(x, u, 𝐃, w) or, equivalently, by a
//! kernel P^k(y | x, u, 𝐃) = Σ_w 1{f^k_t(x,u,𝐃,w) = y}·P(w), where 𝐃 is the
//! joint empirical state–action distribution of the whole population.  The
//! per-stage cost is a function c_t(𝐃) ≥ 0; the per-agent form
//! c_t(𝐃) = Σ_k Σ_{(x,u)} 𝐃^k(x,u)·c^k_t(x,u,𝐃) is the common special case.
//!
//! Kernels must be total on the joint hypercube [0,1]^Σ|𝒳^k×𝒰^k| — not just
//! on distributions — because quantised solvers evaluate them slightly off
//! the simplex.  File-based models guarantee totality by construction
//! (tables are constant in 𝐃; expression authors clamp where needed);
//! [`validate_model`] probes it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{BindContext, DistAccess, Expr};
use crate::kernel::StateActionDist;
use crate::util::{next_unit, stream_rng, streams, Kahan};

/// Symbols for states/actions/noises and sub-population names: plain tokens
/// that survive expression syntax and CSV fields unquoted.
pub fn is_symbol(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|c| c.is_ascii_alphanumeric() || c == b'_' || c == b'.')
}

// ── Time-varying wrappers ────────────────────────────────────────────────────

/// A quantity that is either time-homogeneous or given per stage t = 1..=T.
#[derive(Clone)]
pub enum PerT<T> {
    Fixed(T),
    Vary(Vec<T>),
}

impl<T> PerT<T> {
    /// Value at stage `t` (1-based).
    pub fn at(&self, t: usize) -> &T {
        match self {
            PerT::Fixed(v) => v,
            PerT::Vary(vs) => &vs[t - 1],
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PerT::Fixed(_))
    }
}

impl<T: fmt::Debug> fmt::Debug for PerT<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerT::Fixed(v) => write!(f, "Fixed({v:?})"),
            PerT::Vary(vs) => write!(f, "Vary(len {})", vs.len()),
        }
    }
}

// ── Model pieces ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Horizon {
    /// Total cost over stages t = 1..=T.
    Finite(usize),
    /// Discounted cost Σ β^{t-1} c_t with stationary data.
    Discounted(f64),
}

#[derive(Clone, Debug)]
pub enum Init {
    /// Agents draw initial states i.i.d. from this pmf.
    Pmf(Vec<f64>),
    /// Explicit initial state per agent (state indices, length n_k).
    States(Vec<usize>),
}

/// Kernel evaluator: (t, y, x, u, 𝐃) → probability.
pub type KernelFn = Arc<dyn Fn(usize, usize, usize, usize, &StateActionDist) -> f64 + Send + Sync>;

/// Deterministic dynamics evaluator: (t, x, u, 𝐃, w) → next state index.
pub type DynFn = Arc<dyn Fn(usize, usize, usize, &StateActionDist, usize) -> usize + Send + Sync>;

/// Joint cost evaluator: (t, 𝐃) → cost.
pub type CostFn = Arc<dyn Fn(usize, &StateActionDist) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Kernel {
    /// Constant-in-𝐃 rows, flattened `[x][u][y]`.
    Table(PerT<Vec<f64>>),
    /// One expression per `[x][u][y]` entry, evaluated at 𝐃.
    Exprs(PerT<Vec<Expr>>),
    /// Derived on demand from `dynamics` and the noise pmf.
    FromDynamics,
    /// Programmatic models only; not serialisable.
    Custom(KernelFn),
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Table(_) => f.write_str("Table"),
            Kernel::Exprs(_) => f.write_str("Exprs"),
            Kernel::FromDynamics => f.write_str("FromDynamics"),
            Kernel::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone)]
pub enum Dynamics {
    /// Next-state index per `[x][u][w]`, constant in 𝐃.
    Map(PerT<Vec<usize>>),
    /// Programmatic models only; not serialisable.
    Custom(DynFn),
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Map(_) => f.write_str("Map"),
            Dynamics::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone)]
pub enum Cost {
    /// Σ_k Σ_{(x,u)} 𝐃^k(x,u)·terms[k][x][u](𝐃), plus an optional coupling
    /// term added on top (for cross-population penalties).
    PerAgent {
        terms: Vec<PerT<Vec<Expr>>>,
        coupling: Option<PerT<Expr>>,
    },
    /// A single expression over 𝐃.
    Joint(PerT<Expr>),
    /// Programmatic models only; not serialisable.
    Custom(CostFn),
}

impl fmt::Debug for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cost::PerAgent { .. } => f.write_str("PerAgent"),
            Cost::Joint(_) => f.write_str("Joint"),
            Cost::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubPop {
    pub name: String,
    pub size: u32,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// May be empty for kernel-only sub-populations.
    pub noises: Vec<String>,
    pub noise_pmf: Option<PerT<Vec<f64>>>,
    pub init: Init,
    pub kernel: Kernel,
    pub dynamics: Option<Dynamics>,
}

#[derive(Clone, Debug)]
pub struct TeamModel {
    pub subpops: Vec<SubPop>,
    pub cost: Cost,
    pub horizon: Horizon,
}

impl TeamModel {
    /// Construct with structural checks (alphabets, dimensions, horizon).
    /// Numerical checks (pmf sums, kernel row sums, cost sign) belong to
    /// [`validate_model`].
    pub fn new(subpops: Vec<SubPop>, cost: Cost, horizon: Horizon) -> Result<TeamModel> {
        let model = TeamModel {
            subpops,
            cost,
            horizon,
        };
        model.check_structure()?;
        Ok(model)
    }

    pub fn k_count(&self) -> usize {
        self.subpops.len()
    }

    pub fn n(&self, k: usize) -> u32 {
        self.subpops[k].size
    }

    /// |𝒳^k|
    pub fn m(&self, k: usize) -> usize {
        self.subpops[k].states.len()
    }

    /// |𝒰^k|
    pub fn nu(&self, k: usize) -> usize {
        self.subpops[k].actions.len()
    }

    /// |𝒲^k|
    pub fn nw(&self, k: usize) -> usize {
        self.subpops[k].noises.len()
    }

    pub fn finite_t(&self) -> Option<usize> {
        match self.horizon {
            Horizon::Finite(t) => Some(t),
            Horizon::Discounted(_) => None,
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self.horizon {
            Horizon::Discounted(b) => Some(b),
            Horizon::Finite(_) => None,
        }
    }

    pub fn time_homogeneous(&self) -> bool {
        let pop_ok = self.subpops.iter().all(|sp| {
            sp.noise_pmf.as_ref().is_none_or(|p| p.is_fixed())
                && match &sp.kernel {
                    Kernel::Table(t) => t.is_fixed(),
                    Kernel::Exprs(t) => t.is_fixed(),
                    Kernel::FromDynamics | Kernel::Custom(_) => true,
                }
                && match &sp.dynamics {
                    Some(Dynamics::Map(m)) => m.is_fixed(),
                    _ => true,
                }
        });
        let cost_ok = match &self.cost {
            Cost::PerAgent { terms, coupling } => {
                terms.iter().all(|t| t.is_fixed())
                    && coupling.as_ref().is_none_or(|c| c.is_fixed())
            }
            Cost::Joint(e) => e.is_fixed(),
            Cost::Custom(_) => true,
        };
        pop_ok && cost_ok
    }

    /// Kernel entry P^k(y | x, u, 𝐃) at stage t.
    pub fn kernel_prob(&self, t: usize, k: usize, y: usize, x: usize, u: usize, dist: &StateActionDist) -> f64 {
        let sp = &self.subpops[k];
        match &sp.kernel {
            Kernel::Table(tab) => {
                let row = tab.at(t);
                row[(x * sp.actions.len() + u) * sp.states.len() + y]
            }
            Kernel::Exprs(tab) => {
                let row = tab.at(t);
                row[(x * sp.actions.len() + u) * sp.states.len() + y].eval(dist)
            }
            Kernel::FromDynamics => {
                let pmf = sp
                    .noise_pmf
                    .as_ref()
                    .expect("FromDynamics kernel requires a noise pmf")
                    .at(t);
                let mut acc = Kahan::default();
                for (w, &pw) in pmf.iter().enumerate() {
                    if pw > 0.0 && self.dyn_next_unchecked(t, k, x, u, dist, w) == y {
                        acc.add(pw);
                    }
                }
                acc.value()
            }
            Kernel::Custom(f) => f(t, y, x, u, dist),
        }
    }

    /// Full kernel row P^k(· | x, u, 𝐃).
    pub fn kernel_row(&self, t: usize, k: usize, x: usize, u: usize, dist: &StateActionDist) -> Vec<f64> {
        (0..self.m(k))
            .map(|y| self.kernel_prob(t, k, y, x, u, dist))
            .collect()
    }

    pub fn has_dynamics(&self, k: usize) -> bool {
        self.subpops[k].dynamics.is_some()
    }

    fn dyn_next_unchecked(&self, t: usize, k: usize, x: usize, u: usize, dist: &StateActionDist, w: usize) -> usize {
        let sp = &self.subpops[k];
        match sp.dynamics.as_ref().expect("dynamics required") {
            Dynamics::Map(map) => {
                map.at(t)[(x * sp.actions.len() + u) * sp.noises.len() + w]
            }
            Dynamics::Custom(f) => f(t, x, u, dist, w),
        }
    }

    /// Functional dynamics f^k_t(x, u, 𝐃, w).
    pub fn dyn_next(&self, t: usize, k: usize, x: usize, u: usize, dist: &StateActionDist, w: usize) -> Result<usize> {
        if !self.has_dynamics(k) {
            return Err(Error::Invalid(format!(
                "sub-population {:?} has no functional dynamics; use the kernel-based joint transition instead",
                self.subpops[k].name
            )));
        }
        Ok(self.dyn_next_unchecked(t, k, x, u, dist, w))
    }

    pub fn noise_pmf_at(&self, t: usize, k: usize) -> Result<&[f64]> {
        self.subpops[k]
            .noise_pmf
            .as_ref()
            .map(|p| p.at(t).as_slice())
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "sub-population {:?} declares no noise model",
                    self.subpops[k].name
                ))
            })
    }

    /// Stage cost c_t(𝐃).
    pub fn cost_eval(&self, t: usize, dist: &StateActionDist) -> f64 {
        match &self.cost {
            Cost::PerAgent { terms, coupling } => {
                let mut acc = Kahan::default();
                for (k, term) in terms.iter().enumerate() {
                    let cells = term.at(t);
                    let nu = self.nu(k);
                    for x in 0..self.m(k) {
                        for u in 0..nu {
                            let mass = dist.cell(k, x, u);
                            if mass != 0.0 {
                                acc.add(mass * cells[x * nu + u].eval(dist));
                            }
                        }
                    }
                }
                if let Some(c) = coupling {
                    acc.add(c.at(t).eval(dist));
                }
                acc.value()
            }
            Cost::Joint(e) => e.at(t).eval(dist),
            Cost::Custom(f) => f(t, dist),
        }
    }

    /// Alphabet view used to bind expressions against this model.
    pub fn bind_pops(&self) -> Vec<(String, Vec<String>, Vec<String>)> {
        self.subpops
            .iter()
            .map(|sp| (sp.name.clone(), sp.states.clone(), sp.actions.clone()))
            .collect()
    }

    /// Number of joint state–action coordinates Σ_k |𝒳^k|·|𝒰^k|.
    pub fn dist_dim(&self) -> usize {
        (0..self.k_count()).map(|k| self.m(k) * self.nu(k)).sum()
    }

    pub fn subpop_index(&self, name: &str) -> Result<usize> {
        self.subpops
            .iter()
            .position(|sp| sp.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown sub-population {name:?}")))
    }

    pub fn state_index(&self, k: usize, sym: &str) -> Result<usize> {
        self.subpops[k]
            .states
            .iter()
            .position(|s| s == sym)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown state {sym:?} in sub-population {:?}",
                    self.subpops[k].name
                ))
            })
    }

    pub fn action_index(&self, k: usize, sym: &str) -> Result<usize> {
        self.subpops[k]
            .actions
            .iter()
            .position(|s| s == sym)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown action {sym:?} in sub-population {:?}",
                    self.subpops[k].name
                ))
            })
    }

    // ── Structure checks ─────────────────────────────────────────────────

    fn check_structure(&self) -> Result<()> {
        if self.subpops.is_empty() {
            return Err(Error::Model("at least one sub-population is required".into()));
        }
        match self.horizon {
            Horizon::Finite(t) if t < 1 => {
                return Err(Error::Model("horizon.T must be >= 1".into()))
            }
            Horizon::Discounted(b) if !(b > 0.0 && b < 1.0) => {
                return Err(Error::Model(format!("horizon.beta must lie in (0,1), got {b}")))
            }
            _ => {}
        }
        let t_limit = self.finite_t();
        let mut seen = std::collections::HashSet::new();
        for (k, sp) in self.subpops.iter().enumerate() {
            let path = format!("subpops[{k}]");
            if !is_symbol(&sp.name) {
                return Err(Error::Model(format!("{path}.name: bad symbol {:?}", sp.name)));
            }
            if !seen.insert(sp.name.clone()) {
                return Err(Error::Model(format!("{path}.name: duplicate {:?}", sp.name)));
            }
            if sp.size < 1 {
                return Err(Error::Model(format!("{path}.size must be >= 1")));
            }
            check_alphabet(&path, "states", &sp.states)?;
            check_alphabet(&path, "actions", &sp.actions)?;
            if !sp.noises.is_empty() {
                check_alphabet(&path, "noises", &sp.noises)?;
            }
            let (m, nu, nw) = (sp.states.len(), sp.actions.len(), sp.noises.len());
            match (&sp.noise_pmf, nw) {
                (None, 0) => {}
                (Some(pmf), nw) if nw > 0 => {
                    self.check_per_t_len(&format!("{path}.noise_pmf"), pmf, t_limit)?;
                    for_each_per_t(pmf, |v| {
                        if v.len() != nw {
                            return Err(Error::Model(format!(
                                "{path}.noise_pmf: length {} != |noises| {nw}",
                                v.len()
                            )));
                        }
                        Ok(())
                    })?;
                }
                _ => {
                    return Err(Error::Model(format!(
                        "{path}: noises and noise_pmf must be given together"
                    )))
                }
            }
            match &sp.init {
                Init::Pmf(p) => {
                    if p.len() != m {
                        return Err(Error::Model(format!(
                            "{path}.init_pmf: length {} != |states| {m}",
                            p.len()
                        )));
                    }
                }
                Init::States(xs) => {
                    if xs.len() != sp.size as usize {
                        return Err(Error::Model(format!(
                            "{path}.init_states: length {} != size {}",
                            xs.len(),
                            sp.size
                        )));
                    }
                    if xs.iter().any(|&x| x >= m) {
                        return Err(Error::Model(format!("{path}.init_states: state index out of range")));
                    }
                }
            }
            match &sp.kernel {
                Kernel::Table(tab) => {
                    self.check_per_t_len(&format!("{path}.kernel"), tab, t_limit)?;
                    for_each_per_t(tab, |v| {
                        if v.len() != m * nu * m {
                            return Err(Error::Model(format!(
                                "{path}.kernel: table has {} entries, expected {}",
                                v.len(),
                                m * nu * m
                            )));
                        }
                        Ok(())
                    })?;
                }
                Kernel::Exprs(tab) => {
                    self.check_per_t_len(&format!("{path}.kernel"), tab, t_limit)?;
                    for_each_per_t(tab, |v| {
                        if v.len() != m * nu * m {
                            return Err(Error::Model(format!(
                                "{path}.kernel: expression table has {} entries, expected {}",
                                v.len(),
                                m * nu * m
                            )));
                        }
                        Ok(())
                    })?;
                }
                Kernel::FromDynamics => {
                    if sp.dynamics.is_none() || nw == 0 {
                        return Err(Error::Model(format!(
                            "{path}.kernel: derived kernel needs dynamics and a noise model"
                        )));
                    }
                }
                Kernel::Custom(_) => {}
            }
            if let Some(Dynamics::Map(map)) = &sp.dynamics {
                if nw == 0 {
                    return Err(Error::Model(format!("{path}.dynamics: requires a noise alphabet")));
                }
                self.check_per_t_len(&format!("{path}.dynamics"), map, t_limit)?;
                for_each_per_t(map, |v| {
                    if v.len() != m * nu * nw {
                        return Err(Error::Model(format!(
                            "{path}.dynamics: map has {} entries, expected {}",
                            v.len(),
                            m * nu * nw
                        )));
                    }
                    if v.iter().any(|&y| y >= m) {
                        return Err(Error::Model(format!("{path}.dynamics: next-state index out of range")));
                    }
                    Ok(())
                })?;
            }
            if matches!(&sp.dynamics, Some(Dynamics::Custom(_))) && nw == 0 {
                return Err(Error::Model(format!("{path}.dynamics: requires a noise alphabet")));
            }
        }
        match &self.cost {
            Cost::PerAgent { terms, coupling } => {
                if terms.len() != self.k_count() {
                    return Err(Error::Model(format!(
                        "cost.terms: {} tables for {} sub-populations",
                        terms.len(),
                        self.k_count()
                    )));
                }
                for (k, term) in terms.iter().enumerate() {
                    self.check_per_t_len(&format!("cost.terms[{k}]"), term, t_limit)?;
                    let want = self.m(k) * self.nu(k);
                    for_each_per_t(term, |v| {
                        if v.len() != want {
                            return Err(Error::Model(format!(
                                "cost.terms[{k}]: {} cells, expected {want}",
                                v.len()
                            )));
                        }
                        Ok(())
                    })?;
                }
                if let Some(c) = coupling {
                    self.check_per_t_len("cost.coupling", c, t_limit)?;
                }
            }
            Cost::Joint(e) => self.check_per_t_len("cost", e, t_limit)?,
            Cost::Custom(_) => {}
        }
        Ok(())
    }

    fn check_per_t_len<T>(&self, path: &str, v: &PerT<T>, t_limit: Option<usize>) -> Result<()> {
        match (v, t_limit) {
            (PerT::Vary(vs), Some(t)) if vs.len() != t => Err(Error::Model(format!(
                "{path}: per-stage table has {} entries for horizon T={t}",
                vs.len()
            ))),
            (PerT::Vary(_), None) => Err(Error::Model(format!(
                "{path}: per-stage tables need a finite horizon"
            ))),
            _ => Ok(()),
        }
    }
}

fn for_each_per_t<T>(v: &PerT<T>, mut f: impl FnMut(&T) -> Result<()>) -> Result<()> {
    match v {
        PerT::Fixed(x) => f(x),
        PerT::Vary(xs) => xs.iter().try_for_each(f),
    }
}

fn check_alphabet(path: &str, what: &str, syms: &[String]) -> Result<()> {
    if syms.is_empty() {
        return Err(Error::Model(format!("{path}.{what}: empty alphabet")));
    }
    let mut seen = std::collections::HashSet::new();
    for (i, s) in syms.iter().enumerate() {
        if !is_symbol(s) {
            return Err(Error::Model(format!("{path}.{what}[{i}]: bad symbol {s:?}")));
        }
        if !seen.insert(s) {
            return Err(Error::Model(format!("{path}.{what}[{i}]: duplicate symbol {s:?}")));
        }
    }
    Ok(())
}

// ── Validation ───────────────────────────────────────────────────────────────

/// One broken invariant found by [`validate_model`].
#[derive(Clone, Debug)]
pub struct Violation {
    pub path: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub probes_used: usize,
    /// Whether the full set of {0, ½, 1}^dim grid vertices was probed, or a
    /// deterministic fallback (axis extremes + random points) had to be used.
    pub grid_vertices_probed: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "valid ({} probe points)", self.probes_used)
        } else {
            writeln!(f, "{} violation(s):", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  {v}")?;
            }
            Ok(())
        }
    }
}

const MAX_LISTED_VIOLATIONS: usize = 500;
const GRID_VERTEX_LIMIT: u128 = 20_000;

/// Probe the numerical invariants: kernel rows are probability vectors on the
/// hypercube, costs are finite and non-negative, pmfs are normalised, and a
/// declared kernel agrees with declared dynamics.  Probes are seeded from
/// `seed` and reproducible.
pub fn validate_model(model: &TeamModel, probe_count: usize, seed: u64) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dim = model.dist_dim();

    // Probe ensemble over the joint hypercube.
    let mut points: Vec<Vec<f64>> = Vec::new();
    points.push(vec![0.5; dim]); // centre
    let vertex_total = 3u128.checked_pow(dim as u32).unwrap_or(u128::MAX);
    if vertex_total <= GRID_VERTEX_LIMIT {
        // every vertex of the r = 2 grid {0, 1/2, 1}^dim
        let mut idx = vec![0u8; dim];
        loop {
            points.push(idx.iter().map(|&i| i as f64 / 2.0).collect());
            let mut c = 0;
            loop {
                if c == dim {
                    break;
                }
                idx[c] += 1;
                if idx[c] <= 2 {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
            if c == dim {
                break;
            }
        }
        report.grid_vertices_probed = true;
    } else {
        // axis extremes around the centre, plus the two constant corners
        points.push(vec![0.0; dim]);
        points.push(vec![1.0; dim]);
        for c in 0..dim {
            let mut lo = vec![0.5; dim];
            lo[c] = 0.0;
            let mut hi = vec![0.5; dim];
            hi[c] = 1.0;
            points.push(lo);
            points.push(hi);
        }
    }
    let mut rng = stream_rng(seed, streams::VALIDATE);
    for _ in 0..probe_count {
        points.push((0..dim).map(|_| next_unit(&mut rng)).collect());
    }
    report.probes_used = points.len();

    let stages = probe_stages(model);
    let mut push = |report: &mut ValidationReport, path: String, detail: String| {
        if report.violations.len() < MAX_LISTED_VIOLATIONS {
            report.violations.push(Violation { path, detail });
        }
    };

    // pmf checks (independent of 𝐃)
    for (k, sp) in model.subpops.iter().enumerate() {
        if let Some(pmf) = &sp.noise_pmf {
            for &t in &stages {
                let v = pmf.at(t);
                check_pmf(&format!("subpops[{k}].noise_pmf@t{t}"), v, &mut report, &mut push);
            }
        }
        if let Init::Pmf(p) = &sp.init {
            check_pmf(&format!("subpops[{k}].init_pmf"), p, &mut report, &mut push);
        }
    }

    for (pi, coords) in points.iter().enumerate() {
        let dist = StateActionDist::from_flat(model, coords);
        for &t in &stages {
            for (k, sp) in model.subpops.iter().enumerate() {
                for x in 0..model.m(k) {
                    for u in 0..model.nu(k) {
                        let row = model.kernel_row(t, k, x, u, &dist);
                        let mut sum = Kahan::default();
                        for (y, &p) in row.iter().enumerate() {
                            if !p.is_finite() || p < -1e-12 || p > 1.0 + 1e-12 {
                                push(
                                    &mut report,
                                    format!("subpops[{k}].kernel@t{t}(x={x},u={u},y={y})"),
                                    format!("entry {p} outside [0,1] at probe {pi}"),
                                );
                            }
                            sum.add(p);
                        }
                        let s = sum.value();
                        if !s.is_finite() || (s - 1.0).abs() > 1e-12 {
                            push(
                                &mut report,
                                format!("subpops[{k}].kernel@t{t}(x={x},u={u})"),
                                format!("row sums to {s} at probe {pi}"),
                            );
                        }
                        // declared kernel vs declared dynamics
                        if sp.dynamics.is_some() && !matches!(sp.kernel, Kernel::FromDynamics) {
                            if let Some(pmf) = &sp.noise_pmf {
                                let pmf = pmf.at(t);
                                let mut derived = vec![0.0; model.m(k)];
                                for (w, &pw) in pmf.iter().enumerate() {
                                    let y = model.dyn_next_unchecked(t, k, x, u, &dist, w);
                                    if y >= model.m(k) {
                                        push(
                                            &mut report,
                                            format!("subpops[{k}].dynamics@t{t}(x={x},u={u},w={w})"),
                                            format!("next-state index {y} out of range at probe {pi}"),
                                        );
                                        continue;
                                    }
                                    derived[y] += pw;
                                }
                                for y in 0..model.m(k) {
                                    if (derived[y] - row[y]).abs() > 1e-9 {
                                        push(
                                            &mut report,
                                            format!("subpops[{k}].kernel@t{t}(x={x},u={u},y={y})"),
                                            format!(
                                                "kernel {} disagrees with dynamics-derived {} at probe {pi}",
                                                row[y], derived[y]
                                            ),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let c = model.cost_eval(t, &dist);
            if !c.is_finite() || c < -1e-12 {
                push(
                    &mut report,
                    format!("cost@t{t}"),
                    format!("evaluates to {c} at probe {pi}"),
                );
            }
        }
    }
    report
}

fn check_pmf(
    path: &str,
    pmf: &[f64],
    report: &mut ValidationReport,
    push: &mut impl FnMut(&mut ValidationReport, String, String),
) {
    let mut sum = Kahan::default();
    for (i, &p) in pmf.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            push(report, format!("{path}[{i}]"), format!("entry {p} is not a probability"));
        }
        sum.add(p);
    }
    let s = sum.value();
    if (s - 1.0).abs() > 1e-12 {
        push(report, path.to_string(), format!("sums to {s}"));
    }
}

/// Stages probed by validation: all of 1..=T when T ≤ 8, else {1..8, T};
/// a single stage for discounted models.
fn probe_stages(model: &TeamModel) -> Vec<usize> {
    match model.finite_t() {
        None => vec![1],
        Some(t) if t <= 8 => (1..=t).collect(),
        Some(t) => {
            let mut v: Vec<usize> = (1..=8).collect();
            v.push(t);
            v
        }
    }
}

// ── JSON schema ──────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSchema {
    subpops: Vec<SubPopSchema>,
    cost: CostSchema,
    horizon: HorizonSchema,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubPopSchema {
    name: String,
    size: u32,
    states: Vec<String>,
    actions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noises: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_pmf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_pmf_per_t: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_pmf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_states: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dynamics: Option<DynamicsSchema>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSchema {
    mode: String, // "table" | "expr"
    /// Table mode: rows[x][u][y] are probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows_per_t: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    /// Expression mode: exprs[x][u][y] are expression strings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exprs: Option<Vec<Vec<Vec<String>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exprs_per_t: Option<Vec<Vec<Vec<Vec<String>>>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsSchema {
    /// map[x][u][w] is the next-state symbol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map: Option<Vec<Vec<Vec<String>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map_per_t: Option<Vec<Vec<Vec<Vec<String>>>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CostCellSchema {
    Num(f64),
    Expr(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSchema {
    mode: String, // "per_agent" | "joint"
    /// per_agent mode: terms[k][x][u].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terms: Option<Vec<Vec<Vec<CostCellSchema>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terms_per_t: Option<Vec<Vec<Vec<Vec<CostCellSchema>>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupling: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupling_per_t: Option<Vec<String>>,
    /// joint mode: a single expression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expr_per_t: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HorizonSchema {
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

/// Load a model from its JSON description.  Unknown keys anywhere are hard
/// errors; so are structural problems.
pub fn model_from_json(text: &str) -> Result<TeamModel> {
    let schema: ModelSchema =
        serde_json::from_str(text).map_err(|e| Error::Model(format!("schema: {e}")))?;
    schema_to_model(schema)
}

/// Serialise a model back to JSON.  Programmatic (`Custom`) pieces cannot be
/// serialised.
pub fn model_to_json(model: &TeamModel) -> Result<String> {
    let schema = model_to_schema(model)?;
    Ok(serde_json::to_string_pretty(&schema).expect("schema serialises"))
}

fn flatten3<T: Clone>(
    path: &str,
    rows: &[Vec<Vec<T>>],
    d0: usize,
    d1: usize,
    d2: usize,
) -> Result<Vec<T>> {
    if rows.len() != d0 || rows.iter().any(|r| r.len() != d1) {
        return Err(Error::Model(format!("{path}: expected {d0}x{d1}x{d2} nesting")));
    }
    let mut out = Vec::with_capacity(d0 * d1 * d2);
    for r in rows {
        for c in r {
            if c.len() != d2 {
                return Err(Error::Model(format!("{path}: expected {d0}x{d1}x{d2} nesting")));
            }
            out.extend(c.iter().cloned());
        }
    }
    Ok(out)
}

fn schema_to_model(schema: ModelSchema) -> Result<TeamModel> {
    // Alphabet view for expression binding, available before full construction.
    let pops: Vec<(String, Vec<String>, Vec<String>)> = schema
        .subpops
        .iter()
        .map(|sp| (sp.name.clone(), sp.states.clone(), sp.actions.clone()))
        .collect();
    let ctx = BindContext { pops: &pops };

    let mut subpops = Vec::new();
    for (k, sp) in schema.subpops.iter().enumerate() {
        let path = format!("subpops[{k}]");
        let (m, nu) = (sp.states.len(), sp.actions.len());
        let noises = sp.noises.clone().unwrap_or_default();
        let nw = noises.len();
        let noise_pmf = match (&sp.noise_pmf, &sp.noise_pmf_per_t) {
            (Some(_), Some(_)) => {
                return Err(Error::Model(format!(
                    "{path}: give noise_pmf or noise_pmf_per_t, not both"
                )))
            }
            (Some(p), None) => Some(PerT::Fixed(p.clone())),
            (None, Some(ps)) => Some(PerT::Vary(ps.clone())),
            (None, None) => None,
        };
        let init = match (&sp.init_pmf, &sp.init_states) {
            (Some(p), None) => Init::Pmf(p.clone()),
            (None, Some(syms)) => {
                let mut xs = Vec::with_capacity(syms.len());
                for s in syms {
                    let x = sp.states.iter().position(|t| t == s).ok_or_else(|| {
                        Error::Model(format!("{path}.init_states: unknown state {s:?}"))
                    })?;
                    xs.push(x);
                }
                Init::States(xs)
            }
            _ => {
                return Err(Error::Model(format!(
                    "{path}: exactly one of init_pmf / init_states is required"
                )))
            }
        };
        let dynamics = match &sp.dynamics {
            None => None,
            Some(d) => {
                let bind_map = |map: &Vec<Vec<Vec<String>>>| -> Result<Vec<usize>> {
                    let flat = flatten3(&format!("{path}.dynamics.map"), map, m, nu, nw)?;
                    flat.iter()
                        .map(|sym| {
                            sp.states.iter().position(|s| s == sym).ok_or_else(|| {
                                Error::Model(format!("{path}.dynamics: unknown state {sym:?}"))
                            })
                        })
                        .collect()
                };
                match (&d.map, &d.map_per_t) {
                    (Some(map), None) => Some(Dynamics::Map(PerT::Fixed(bind_map(map)?))),
                    (None, Some(maps)) => Some(Dynamics::Map(PerT::Vary(
                        maps.iter().map(bind_map).collect::<Result<_>>()?,
                    ))),
                    _ => {
                        return Err(Error::Model(format!(
                            "{path}.dynamics: exactly one of map / map_per_t is required"
                        )))
                    }
                }
            }
        };
        let kernel = match &sp.kernel {
            None => {
                if dynamics.is_some() {
                    Kernel::FromDynamics
                } else {
                    return Err(Error::Model(format!(
                        "{path}: a kernel or dynamics block is required"
                    )));
                }
            }
            Some(ks) => match ks.mode.as_str() {
                "table" => match (&ks.rows, &ks.rows_per_t) {
                    (Some(rows), None) => Kernel::Table(PerT::Fixed(flatten3(
                        &format!("{path}.kernel.rows"),
                        rows,
                        m,
                        nu,
                        m,
                    )?)),
                    (None, Some(per_t)) => Kernel::Table(PerT::Vary(
                        per_t
                            .iter()
                            .map(|rows| flatten3(&format!("{path}.kernel.rows_per_t"), rows, m, nu, m))
                            .collect::<Result<_>>()?,
                    )),
                    _ => {
                        return Err(Error::Model(format!(
                            "{path}.kernel: table mode needs exactly one of rows / rows_per_t"
                        )))
                    }
                },
                "expr" => {
                    let bind_tab = |rows: &Vec<Vec<Vec<String>>>| -> Result<Vec<Expr>> {
                        let flat = flatten3(&format!("{path}.kernel.exprs"), rows, m, nu, m)?;
                        flat.iter().map(|s| Expr::parse(s, &ctx)).collect()
                    };
                    match (&ks.exprs, &ks.exprs_per_t) {
                        (Some(rows), None) => Kernel::Exprs(PerT::Fixed(bind_tab(rows)?)),
                        (None, Some(per_t)) => Kernel::Exprs(PerT::Vary(
                            per_t.iter().map(bind_tab).collect::<Result<_>>()?,
                        )),
                        _ => {
                            return Err(Error::Model(format!(
                                "{path}.kernel: expr mode needs exactly one of exprs / exprs_per_t"
                            )))
                        }
                    }
                }
                other => {
                    return Err(Error::Model(format!(
                        "{path}.kernel.mode: {other:?} is not \"table\" or \"expr\""
                    )))
                }
            },
        };
        subpops.push(SubPop {
            name: sp.name.clone(),
            size: sp.size,
            states: sp.states.clone(),
            actions: sp.actions.clone(),
            noises,
            noise_pmf,
            init,
            kernel,
            dynamics,
        });
    }

    let bind_cell = |cell: &CostCellSchema| -> Result<Expr> {
        match cell {
            CostCellSchema::Num(v) => Ok(Expr::constant(*v)),
            CostCellSchema::Expr(s) => Expr::parse(s, &ctx),
        }
    };
    let cost = match schema.cost.mode.as_str() {
        "per_agent" => {
            let bind_terms = |terms: &Vec<Vec<Vec<CostCellSchema>>>| -> Result<Vec<PerT<Vec<Expr>>>> {
                terms
                    .iter()
                    .enumerate()
                    .map(|(k, tab)| {
                        let (m, nu) = (
                            schema.subpops[k].states.len(),
                            schema.subpops[k].actions.len(),
                        );
                        let mut flat = Vec::with_capacity(m * nu);
                        if tab.len() != m || tab.iter().any(|r| r.len() != nu) {
                            return Err(Error::Model(format!(
                                "cost.terms[{k}]: expected {m}x{nu} nesting"
                            )));
                        }
                        for row in tab {
                            for cell in row {
                                flat.push(bind_cell(cell)?);
                            }
                        }
                        Ok(PerT::Fixed(flat))
                    })
                    .collect()
            };
            let terms = match (&schema.cost.terms, &schema.cost.terms_per_t) {
                (Some(terms), None) => bind_terms(terms)?,
                (None, Some(per_t)) => {
                    // regroup: per_t[t][k] → terms[k] per-t
                    let kc = schema.subpops.len();
                    let mut acc: Vec<Vec<Vec<Expr>>> = vec![Vec::new(); kc];
                    for stage in per_t {
                        let bound = bind_terms(stage)?;
                        for (k, b) in bound.into_iter().enumerate() {
                            match b {
                                PerT::Fixed(v) => acc[k].push(v),
                                PerT::Vary(_) => unreachable!(),
                            }
                        }
                    }
                    acc.into_iter().map(PerT::Vary).collect()
                }
                _ => {
                    return Err(Error::Model(
                        "cost: per_agent mode needs exactly one of terms / terms_per_t".into(),
                    ))
                }
            };
            let coupling = match (&schema.cost.coupling, &schema.cost.coupling_per_t) {
                (Some(_), Some(_)) => {
                    return Err(Error::Model(
                        "cost: give coupling or coupling_per_t, not both".into(),
                    ))
                }
                (Some(s), None) => Some(PerT::Fixed(Expr::parse(s, &ctx)?)),
                (None, Some(ss)) => Some(PerT::Vary(
                    ss.iter().map(|s| Expr::parse(s, &ctx)).collect::<Result<_>>()?,
                )),
                (None, None) => None,
            };
            Cost::PerAgent { terms, coupling }
        }
        "joint" => match (&schema.cost.expr, &schema.cost.expr_per_t) {
            (Some(s), None) => Cost::Joint(PerT::Fixed(Expr::parse(s, &ctx)?)),
            (None, Some(ss)) => Cost::Joint(PerT::Vary(
                ss.iter().map(|s| Expr::parse(s, &ctx)).collect::<Result<_>>()?,
            )),
            _ => {
                return Err(Error::Model(
                    "cost: joint mode needs exactly one of expr / expr_per_t".into(),
                ))
            }
        },
        other => {
            return Err(Error::Model(format!(
                "cost.mode: {other:?} is not \"per_agent\" or \"joint\""
            )))
        }
    };

    let horizon = match (schema.horizon.t, schema.horizon.beta) {
        (Some(t), None) => Horizon::Finite(t),
        (None, Some(b)) => Horizon::Discounted(b),
        _ => {
            return Err(Error::Model(
                "horizon: exactly one of T / beta is required".into(),
            ))
        }
    };

    TeamModel::new(subpops, cost, horizon)
}

fn unflatten3<T: Clone>(flat: &[T], d0: usize, d1: usize, d2: usize) -> Vec<Vec<Vec<T>>> {
    (0..d0)
        .map(|a| {
            (0..d1)
                .map(|b| flat[(a * d1 + b) * d2..(a * d1 + b) * d2 + d2].to_vec())
                .collect()
        })
        .collect()
}

fn model_to_schema(model: &TeamModel) -> Result<ModelSchema> {
    let unserialisable =
        |what: &str| Error::Invalid(format!("{what} is programmatic and cannot be serialised"));
    let mut subpops = Vec::new();
    for (k, sp) in model.subpops.iter().enumerate() {
        let (m, nu, nw) = (model.m(k), model.nu(k), model.nw(k));
        let (noise_pmf, noise_pmf_per_t) = match &sp.noise_pmf {
            None => (None, None),
            Some(PerT::Fixed(p)) => (Some(p.clone()), None),
            Some(PerT::Vary(ps)) => (None, Some(ps.clone())),
        };
        let (init_pmf, init_states) = match &sp.init {
            Init::Pmf(p) => (Some(p.clone()), None),
            Init::States(xs) => (
                None,
                Some(xs.iter().map(|&x| sp.states[x].clone()).collect()),
            ),
        };
        let kernel = match &sp.kernel {
            Kernel::Table(PerT::Fixed(v)) => Some(KernelSchema {
                mode: "table".into(),
                rows: Some(unflatten3(v, m, nu, m)),
                rows_per_t: None,
                exprs: None,
                exprs_per_t: None,
            }),
            Kernel::Table(PerT::Vary(vs)) => Some(KernelSchema {
                mode: "table".into(),
                rows: None,
                rows_per_t: Some(vs.iter().map(|v| unflatten3(v, m, nu, m)).collect()),
                exprs: None,
                exprs_per_t: None,
            }),
            Kernel::Exprs(tab) => {
                let to_rows = |v: &Vec<Expr>| {
                    unflatten3(
                        &v.iter().map(|e| e.source().to_string()).collect::<Vec<_>>(),
                        m,
                        nu,
                        m,
                    )
                };
                match tab {
                    PerT::Fixed(v) => Some(KernelSchema {
                        mode: "expr".into(),
                        rows: None,
                        rows_per_t: None,
                        exprs: Some(to_rows(v)),
                        exprs_per_t: None,
                    }),
                    PerT::Vary(vs) => Some(KernelSchema {
                        mode: "expr".into(),
                        rows: None,
                        rows_per_t: None,
                        exprs: None,
                        exprs_per_t: Some(vs.iter().map(to_rows).collect()),
                    }),
                }
            }
            Kernel::FromDynamics => None,
            Kernel::Custom(_) => return Err(unserialisable("kernel")),
        };
        let dynamics = match &sp.dynamics {
            None => None,
            Some(Dynamics::Map(map)) => {
                let to_syms = |v: &Vec<usize>| {
                    unflatten3(
                        &v.iter().map(|&y| sp.states[y].clone()).collect::<Vec<_>>(),
                        m,
                        nu,
                        nw,
                    )
                };
                match map {
                    PerT::Fixed(v) => Some(DynamicsSchema {
                        map: Some(to_syms(v)),
                        map_per_t: None,
                    }),
                    PerT::Vary(vs) => Some(DynamicsSchema {
                        map: None,
                        map_per_t: Some(vs.iter().map(to_syms).collect()),
                    }),
                }
            }
            Some(Dynamics::Custom(_)) => return Err(unserialisable("dynamics")),
        };
        subpops.push(SubPopSchema {
            name: sp.name.clone(),
            size: sp.size,
            states: sp.states.clone(),
            actions: sp.actions.clone(),
            noises: if sp.noises.is_empty() {
                None
            } else {
                Some(sp.noises.clone())
            },
            noise_pmf,
            noise_pmf_per_t,
            init_pmf,
            init_states,
            kernel,
            dynamics,
        });
    }

    let cost = match &model.cost {
        Cost::PerAgent { terms, coupling } => {
            let cell = |e: &Expr| CostCellSchema::Expr(e.source().to_string());
            let to_tab = |k: usize, v: &Vec<Expr>| -> Vec<Vec<CostCellSchema>> {
                let nu = model.nu(k);
                (0..model.m(k))
                    .map(|x| (0..nu).map(|u| cell(&v[x * nu + u])).collect())
                    .collect()
            };
            if terms.iter().all(|t| t.is_fixed()) {
                CostSchema {
                    mode: "per_agent".into(),
                    terms: Some(
                        terms
                            .iter()
                            .enumerate()
                            .map(|(k, t)| to_tab(k, t.at(1)))
                            .collect(),
                    ),
                    terms_per_t: None,
                    coupling: match coupling {
                        Some(PerT::Fixed(e)) => Some(e.source().to_string()),
                        None => None,
                        Some(PerT::Vary(_)) => {
                            return Err(Error::Invalid(
                                "mixed fixed/per-stage cost tables cannot be serialised".into(),
                            ))
                        }
                    },
                    coupling_per_t: None,
                    expr: None,
                    expr_per_t: None,
                }
            } else {
                return Err(Error::Invalid(
                    "per-stage per-agent cost serialisation is not supported; author the file directly".into(),
                ));
            }
        }
        Cost::Joint(e) => CostSchema {
            mode: "joint".into(),
            terms: None,
            terms_per_t: None,
            coupling: None,
            coupling_per_t: None,
            expr: match e {
                PerT::Fixed(e) => Some(e.source().to_string()),
                PerT::Vary(_) => None,
            },
            expr_per_t: match e {
                PerT::Fixed(_) => None,
                PerT::Vary(es) => Some(es.iter().map(|e| e.source().to_string()).collect()),
            },
        },
        Cost::Custom(_) => return Err(unserialisable("cost")),
    };

    let horizon = match model.horizon {
        Horizon::Finite(t) => HorizonSchema {
            t: Some(t),
            beta: None,
        },
        Horizon::Discounted(b) => HorizonSchema {
            t: None,
            beta: Some(b),
        },
    };

    Ok(ModelSchema {
        subpops,
        cost,
        horizon,
    })
}
