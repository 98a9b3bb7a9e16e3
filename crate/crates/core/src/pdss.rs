//! Dynamic programming under partial deep-state sharing.
//!
//! Only the sub-populations in an observed set S share their empirical state
//! distributions; the rest are tracked by a deterministic mean-field belief.
//! The information state is a mixed state p = (counts for k ∈ S, beliefs for
//! k ∉ S).  One step works on p as follows: the joint distribution is
//! 𝐃 = φ(p, γ); observed blocks move by their exact finite-n count laws,
//! beliefs move by the mean-field flow ĥ.  For the observed blocks to stay
//! exactly Markov in p, their kernels must ignore the unobserved blocks of
//! 𝐃 — the solvers probe that requirement and refuse to run when it fails.
//!
//! Two solvers:
//!  * an exact enumerator for small finite-horizon problems, which unfolds
//!    the reachable information states layer by layer (beliefs keyed by their
//!    exact bit patterns) and runs backward induction on the resulting DAG;
//!  * a quantised solver that replaces each belief factor by a near-simplex
//!    grid of resolution r, giving a finite mixed lattice×grid state space
//!    suitable for backward induction or discounted value iteration.
//!
//! With S = 𝒦 both reduce to the full-sharing lattice program; with S = ∅
//! the state collapses to a single flowing belief.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{check_no_influence, hat_f, kernel_reads_dist, phi, subpop_count_dist, StateActionDist};
use crate::model::{Horizon, Init, TeamModel};
use crate::statespace::{
    project_to_axis, Caps, CompositionSpace, LawSpace, LocalLaws, MixedAxis, MixedSpace,
};
use crate::util::{multinomial_pmf, Kahan};

// ── Options ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PdssOptions {
    pub caps: Caps,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Probe count and seed for the observed-block decoupling check.
    pub probes: usize,
    pub seed: u64,
}

impl Default for PdssOptions {
    fn default() -> Self {
        PdssOptions {
            caps: Caps::default(),
            tol: 1e-8,
            max_sweeps: 100_000,
            probes: 32,
            seed: 1,
        }
    }
}

fn verify_observed_mask(model: &TeamModel, observed: &[bool]) -> Result<()> {
    if observed.len() != model.k_count() {
        return Err(Error::Invalid(format!(
            "observed mask has {} entries for {} sub-populations",
            observed.len(),
            model.k_count()
        )));
    }
    Ok(())
}

// ── Mixed states ─────────────────────────────────────────────────────────────

/// One information state: exact counts for observed sub-populations, belief
/// fractions for the rest (the unused side is empty per k).
#[derive(Clone, Debug)]
pub struct MixedNode {
    pub counts: Vec<Vec<u32>>,
    pub beliefs: Vec<Vec<f64>>,
}

impl MixedNode {
    /// Exact dedup key: lattice ranks for observed blocks, f64 bit patterns
    /// for beliefs.
    pub fn key(&self, lattices: &[Option<CompositionSpace>]) -> Vec<u64> {
        let mut key = Vec::new();
        for (k, lat) in lattices.iter().enumerate() {
            match lat {
                Some(lat) => key.push(lat.rank(&self.counts[k])),
                None => key.extend(self.beliefs[k].iter().map(|v| v.to_bits())),
            }
        }
        key
    }

    /// Per-sub-population fractions seen by φ and the flows.
    pub fn fracs(&self, model: &TeamModel, observed: &[bool]) -> Vec<Vec<f64>> {
        (0..model.k_count())
            .map(|k| {
                if observed[k] {
                    let n = model.n(k) as f64;
                    self.counts[k].iter().map(|&c| c as f64 / n).collect()
                } else {
                    self.beliefs[k].clone()
                }
            })
            .collect()
    }
}

/// Initial information states with probabilities: the product over observed
/// sub-populations of their initial count laws, with beliefs at the initial
/// means.
fn initial_nodes(
    model: &TeamModel,
    observed: &[bool],
    lattices: &[Option<CompositionSpace>],
) -> Vec<(MixedNode, f64)> {
    let mut nodes = vec![(
        MixedNode {
            counts: vec![Vec::new(); model.k_count()],
            beliefs: vec![Vec::new(); model.k_count()],
        },
        1.0,
    )];
    for k in 0..model.k_count() {
        if observed[k] {
            let lat = lattices[k].as_ref().expect("observed lattice");
            let atoms: Vec<(Vec<u32>, f64)> = match &model.subpops[k].init {
                Init::States(xs) => {
                    let mut c = vec![0u32; model.m(k)];
                    for &x in xs {
                        c[x] += 1;
                    }
                    vec![(c, 1.0)]
                }
                Init::Pmf(p) => {
                    let mut v = Vec::new();
                    let mut buf = Vec::new();
                    for i in 0..lat.len_u128() as u64 {
                        lat.unrank(i, &mut buf);
                        let prob = multinomial_pmf(&buf, p);
                        if prob > 0.0 {
                            v.push((buf.clone(), prob));
                        }
                    }
                    v
                }
            };
            let mut next = Vec::with_capacity(nodes.len() * atoms.len());
            for (node, p) in &nodes {
                for (c, pc) in &atoms {
                    let mut n2 = node.clone();
                    n2.counts[k] = c.clone();
                    next.push((n2, p * pc));
                }
            }
            nodes = next;
        } else {
            let mean: Vec<f64> = match &model.subpops[k].init {
                Init::Pmf(p) => p.clone(),
                Init::States(xs) => {
                    let mut c = vec![0.0; model.m(k)];
                    for &x in xs {
                        c[x] += 1.0 / xs.len() as f64;
                    }
                    c
                }
            };
            for (node, _) in &mut nodes {
                node.beliefs[k] = mean.clone();
            }
        }
    }
    nodes
}

/// One mixed-state step under a fixed law: the sparse product law over the
/// observed successor counts, plus the flowed beliefs (shared by all
/// successors).
fn mixed_step(
    model: &TeamModel,
    t: usize,
    observed: &[bool],
    lattices: &[Option<CompositionSpace>],
    node: &MixedNode,
    laws: &LocalLaws,
    dist: &StateActionDist,
) -> (Vec<(Vec<Vec<u32>>, f64)>, Vec<Vec<f64>>) {
    let fracs = node.fracs(model, observed);
    // beliefs flow deterministically
    let mut beliefs = vec![Vec::new(); model.k_count()];
    for k in 0..model.k_count() {
        if !observed[k] {
            beliefs[k] = hat_f(model, t, k, &fracs[k], &laws.maps[k], dist);
        }
    }
    // observed blocks: product of sparse count laws
    let mut combos: Vec<(Vec<Vec<u32>>, f64)> =
        vec![(vec![Vec::new(); model.k_count()], 1.0)];
    for k in 0..model.k_count() {
        if !observed[k] {
            continue;
        }
        let lat = lattices[k].as_ref().expect("observed lattice");
        let dense = subpop_count_dist(model, t, k, &node.counts[k], &laws.maps[k], dist, lat);
        let mut atoms: Vec<(Vec<u32>, f64)> = Vec::new();
        let mut buf = Vec::new();
        for (i, &p) in dense.iter().enumerate() {
            if p > 0.0 {
                lat.unrank(i as u64, &mut buf);
                atoms.push((buf.clone(), p));
            }
        }
        let mut next = Vec::with_capacity(combos.len() * atoms.len());
        for (combo, p) in &combos {
            for (c, pc) in &atoms {
                let mut c2 = combo.clone();
                c2[k] = c.clone();
                next.push((c2, p * pc));
            }
        }
        combos = next;
    }
    (combos, beliefs)
}

// ── Exact enumerator ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PdssLayer {
    pub nodes: Vec<MixedNode>,
    pub values: Vec<f64>,
    pub policy: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PdssExactSolution {
    pub observed: Vec<bool>,
    pub laws: LawSpace,
    pub lattices: Vec<Option<CompositionSpace>>,
    /// `layers[t-1]` for t = 1..=T, in deterministic discovery order.
    pub layers: Vec<PdssLayer>,
    /// Initial nodes as indices into `layers[0]` with probabilities.
    pub init: Vec<(usize, f64)>,
    pub expected_cost: f64,
}

/// Exactly solve a finite-horizon partial-sharing problem by unfolding every
/// reachable information state.  Beliefs are compared bit-exactly, so two
/// histories merge only when their flows agree exactly.
pub fn solve_pdss_exact(
    model: &TeamModel,
    observed: &[bool],
    opts: &PdssOptions,
) -> Result<PdssExactSolution> {
    verify_observed_mask(model, observed)?;
    let t_end = model.finite_t().ok_or_else(|| {
        Error::Invalid(
            "the exact enumerator needs a finite horizon; use the quantised solver for discounted problems"
                .into(),
        )
    })?;
    check_no_influence(model, observed, opts.probes, opts.seed)?;
    let laws = LawSpace::new(model, &opts.caps)?;
    let lattices: Vec<Option<CompositionSpace>> = (0..model.k_count())
        .map(|k| {
            if observed[k] {
                Some(CompositionSpace::new(model.n(k), model.m(k)))
            } else {
                None
            }
        })
        .collect();
    for (k, lat) in lattices.iter().enumerate() {
        if let Some(lat) = lat {
            opts.caps.check(
                &format!("empirical lattice of sub-population {k}"),
                lat.len_u128(),
            )?;
        }
    }

    // forward reachability, layer by layer
    let init_nodes = initial_nodes(model, observed, &lattices);
    let mut layers_nodes: Vec<Vec<MixedNode>> = Vec::with_capacity(t_end);
    let mut first = Vec::new();
    let mut first_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut init = Vec::new();
    for (node, p) in init_nodes {
        let key = node.key(&lattices);
        let idx = *first_index.entry(key).or_insert_with(|| {
            first.push(node);
            first.len() - 1
        });
        init.push((idx, p));
    }
    layers_nodes.push(first);
    let mut total_nodes = layers_nodes[0].len() as u128;
    let mut decoded = laws.blank();
    for t in 1..t_end {
        let mut next: Vec<MixedNode> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for node in &layers_nodes[t - 1] {
            let fracs = node.fracs(model, observed);
            for law_idx in 0..laws.len() {
                laws.decode(law_idx, &mut decoded);
                let dist = phi(model, &fracs, &decoded);
                let (combos, beliefs) =
                    mixed_step(model, t, observed, &lattices, node, &decoded, &dist);
                for (counts, _) in combos {
                    let succ = MixedNode {
                        counts,
                        beliefs: beliefs.clone(),
                    };
                    let key = succ.key(&lattices);
                    if !index.contains_key(&key) {
                        index.insert(key, next.len());
                        next.push(succ);
                    }
                }
            }
        }
        total_nodes += next.len() as u128;
        opts.caps.check("reachable information states", total_nodes)?;
        layers_nodes.push(next);
    }

    // backward induction over the unfolded DAG
    let mut layers: Vec<PdssLayer> = Vec::with_capacity(t_end);
    let mut v_next: Option<(Vec<f64>, HashMap<Vec<u64>, usize>)> = None;
    for t in (1..=t_end).rev() {
        let nodes = std::mem::take(&mut layers_nodes[t - 1]);
        let results: Vec<(f64, u64)> = nodes
            .par_iter()
            .map(|node| {
                let fracs = node.fracs(model, observed);
                let mut decoded = laws.blank();
                let mut best = (f64::INFINITY, 0u64);
                for law_idx in 0..laws.len() {
                    laws.decode(law_idx, &mut decoded);
                    let dist = phi(model, &fracs, &decoded);
                    let mut total = model.cost_eval(t, &dist);
                    if let Some((v, index)) = &v_next {
                        let (combos, beliefs) =
                            mixed_step(model, t, observed, &lattices, node, &decoded, &dist);
                        let mut acc = Kahan::default();
                        for (counts, p) in combos {
                            let succ = MixedNode {
                                counts,
                                beliefs: beliefs.clone(),
                            };
                            let key = succ.key(&lattices);
                            let idx = index
                                .get(&key)
                                .expect("successor enumerated during the forward pass");
                            acc.add(p * v[*idx]);
                        }
                        total += acc.value();
                    }
                    if total < best.0 {
                        best = (total, law_idx);
                    }
                }
                best
            })
            .collect();
        let (values, policy): (Vec<f64>, Vec<u64>) = results.into_iter().unzip();
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            index.insert(node.key(&lattices), i);
        }
        v_next = Some((values.clone(), index));
        layers.push(PdssLayer {
            nodes,
            values,
            policy,
        });
    }
    layers.reverse();

    let mut j = Kahan::default();
    for &(idx, p) in &init {
        j.add(p * layers[0].values[idx]);
    }
    Ok(PdssExactSolution {
        observed: observed.to_vec(),
        laws,
        lattices,
        layers,
        init,
        expected_cost: j.value(),
    })
}

// ── Quantised mixed solver ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PdssQuantSolution {
    pub observed: Vec<bool>,
    pub space: MixedSpace,
    pub laws: LawSpace,
    pub r: u32,
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<u64>>,
    pub init: Vec<(u64, f64)>,
    pub expected_cost: f64,
    pub sweeps: usize,
    pub deltas: Vec<f64>,
}

impl PdssQuantSolution {
    pub fn fracs_at(&self, model: &TeamModel, idx: u64, out: &mut Vec<Vec<f64>>) {
        self.space.fracs(model, idx, out);
    }
}

/// Solve a partial-sharing problem on the finite mixed space: exact count
/// lattices for observed sub-populations, near-simplex grids of resolution r
/// for the beliefs of the rest.
pub fn solve_pdss_quantized(
    model: &TeamModel,
    observed: &[bool],
    r: u32,
    opts: &PdssOptions,
) -> Result<PdssQuantSolution> {
    verify_observed_mask(model, observed)?;
    check_no_influence(model, observed, opts.probes, opts.seed)?;
    let laws = LawSpace::new(model, &opts.caps)?;
    let on_grid: Vec<bool> = observed.iter().map(|&o| !o).collect();
    let space = MixedSpace::new(model, &on_grid, r, &opts.caps)?;
    let axes = &space.axes;
    let strides = &space.strides;
    let len = space.len();
    opts.caps
        .check("mixed states x laws", len as u128 * laws.len() as u128)?;

    // initial distribution: product over observed init count laws; beliefs at
    // the projected initial means
    let mut init: Vec<(u64, f64)> = vec![(0, 1.0)];
    for k in 0..model.k_count() {
        let opts_k: Vec<(u64, f64)> = match &axes[k] {
            MixedAxis::Lattice(lat) => match &model.subpops[k].init {
                Init::States(xs) => {
                    let mut c = vec![0u32; model.m(k)];
                    for &x in xs {
                        c[x] += 1;
                    }
                    vec![(lat.rank(&c), 1.0)]
                }
                Init::Pmf(p) => {
                    let mut v = Vec::new();
                    let mut buf = Vec::new();
                    for i in 0..lat.len_u128() as u64 {
                        lat.unrank(i, &mut buf);
                        let prob = multinomial_pmf(&buf, p);
                        if prob > 0.0 {
                            v.push((i, prob));
                        }
                    }
                    v
                }
            },
            MixedAxis::Grid(g) => {
                let mean: Vec<f64> = match &model.subpops[k].init {
                    Init::Pmf(p) => p.clone(),
                    Init::States(xs) => {
                        let mut c = vec![0.0; model.m(k)];
                        for &x in xs {
                            c[x] += 1.0 / xs.len() as f64;
                        }
                        c
                    }
                };
                let j = project_to_axis(&mean, r);
                vec![(
                    g.position(&j)
                        .expect("projection lands inside the near-simplex band"),
                    1.0,
                )]
            }
        };
        let mut next = Vec::with_capacity(init.len() * opts_k.len());
        for &(idx, p) in &init {
            for &(ik, pk) in &opts_k {
                next.push((idx + ik * strides[k], p * pk));
            }
        }
        init = next;
    }

    // per-(own rank, law digit) successor rows for observed sub-populations
    // whose kernels cannot read the joint distribution
    let zero_dist = StateActionDist::zeros(model);
    let mut row_cache: Vec<Option<Vec<Vec<f64>>>> = Vec::with_capacity(model.k_count());
    for (k, axis) in axes.iter().enumerate() {
        match axis {
            MixedAxis::Lattice(lat) if !kernel_reads_dist(model, k) => {
                let lk = lat.len_u128() as u64;
                let ak = laws.axis_len(k);
                opts.caps.check(
                    &format!("transition cache of sub-population {k}"),
                    (lk as u128) * (ak as u128) * (lk as u128),
                )?;
                let mut law_maps: Vec<LocalLaws> = Vec::with_capacity(ak as usize);
                for a in 0..ak {
                    let mut l = laws.blank();
                    laws.decode(a * laws.axis_stride(k), &mut l);
                    law_maps.push(l);
                }
                let rows: Vec<Vec<f64>> = (0..lk * ak)
                    .into_par_iter()
                    .map(|i| {
                        let (rank_k, digit) = (i / ak, (i % ak) as usize);
                        let mut c = Vec::new();
                        lat.unrank(rank_k, &mut c);
                        subpop_count_dist(model, 1, k, &c, &law_maps[digit].maps[k], &zero_dist, lat)
                    })
                    .collect();
                row_cache.push(Some(rows));
            }
            _ => row_cache.push(None),
        }
    }
    let homogeneous = model.time_homogeneous();

    // One optimisation sweep over the whole mixed space.
    let mixed_sweep = |t: usize, v_next: Option<&[f64]>, discount: f64| -> (Vec<f64>, Vec<u64>) {
        let out: Vec<(f64, u64)> = (0..len)
            .into_par_iter()
            .map(|idx| {
                let mut parts = vec![0u64; axes.len()];
                {
                    let mut rest = idx;
                    for (k, s) in strides.iter().enumerate() {
                        parts[k] = rest / s;
                        rest %= s;
                    }
                }
                let mut fracs: Vec<Vec<f64>> = vec![Vec::new(); axes.len()];
                let mut counts: Vec<Vec<u32>> = vec![Vec::new(); axes.len()];
                for (k, axis) in axes.iter().enumerate() {
                    match axis {
                        MixedAxis::Lattice(lat) => {
                            lat.unrank(parts[k], &mut counts[k]);
                            let n = model.n(k) as f64;
                            fracs[k] = counts[k].iter().map(|&c| c as f64 / n).collect();
                        }
                        MixedAxis::Grid(g) => g.fracs(parts[k], &mut fracs[k]),
                    }
                }
                let mut decoded = laws.blank();
                let mut best = (f64::INFINITY, 0u64);
                for law_idx in 0..laws.len() {
                    laws.decode(law_idx, &mut decoded);
                    let dist = phi(model, &fracs, &decoded);
                    let mut total = model.cost_eval(t, &dist);
                    if let Some(v) = v_next {
                        // deterministic belief successors shift the base index
                        let mut base = 0u64;
                        let mut obs_rows: Vec<(usize, Vec<f64>)> = Vec::new();
                        for (k, axis) in axes.iter().enumerate() {
                            match axis {
                                MixedAxis::Grid(g) => {
                                    let flow =
                                        hat_f(model, t, k, &fracs[k], &decoded.maps[k], &dist);
                                    let j = project_to_axis(&flow, g.r);
                                    let pos = g
                                        .position(&j)
                                        .expect("projection lands inside the near-simplex band");
                                    base += pos * strides[k];
                                }
                                MixedAxis::Lattice(lat) => {
                                    let row = match (&row_cache[k], homogeneous) {
                                        (Some(rows), true) => rows[(parts[k] * laws.axis_len(k)
                                            + laws.axis_index(law_idx, k))
                                            as usize]
                                            .clone(),
                                        _ => subpop_count_dist(
                                            model,
                                            t,
                                            k,
                                            &counts[k],
                                            &decoded.maps[k],
                                            &dist,
                                            lat,
                                        ),
                                    };
                                    obs_rows.push((k, row));
                                }
                            }
                        }
                        // expectation over the product of observed rows
                        fn expect(
                            v: &[f64],
                            rows: &[(usize, Vec<f64>)],
                            strides: &[u64],
                            i: usize,
                            base: u64,
                        ) -> f64 {
                            if i == rows.len() {
                                return v[base as usize];
                            }
                            let (k, row) = &rows[i];
                            let mut acc = Kahan::default();
                            for (j, &p) in row.iter().enumerate() {
                                if p != 0.0 {
                                    acc.add(p * expect(
                                        v,
                                        rows,
                                        strides,
                                        i + 1,
                                        base + j as u64 * strides[*k],
                                    ));
                                }
                            }
                            acc.value()
                        }
                        total += discount * expect(v, &obs_rows, strides, 0, base);
                    }
                    if total < best.0 {
                        best = (total, law_idx);
                    }
                }
                best
            })
            .collect();
        out.into_iter().unzip()
    };

    let build = |values: Vec<Vec<f64>>,
                 policy: Vec<Vec<u64>>,
                 sweeps: usize,
                 deltas: Vec<f64>|
     -> PdssQuantSolution {
        let mut j = Kahan::default();
        for &(idx, p) in &init {
            j.add(p * values[0][idx as usize]);
        }
        PdssQuantSolution {
            observed: observed.to_vec(),
            space: space.clone(),
            laws: laws.clone(),
            r,
            expected_cost: j.value(),
            values,
            policy,
            init: init.clone(),
            sweeps,
            deltas,
        }
    };

    match model.horizon {
        Horizon::Finite(t_end) => {
            let mut values = Vec::with_capacity(t_end);
            let mut policy = Vec::with_capacity(t_end);
            let mut v_next: Option<Vec<f64>> = None;
            for t in (1..=t_end).rev() {
                let (v, p) = mixed_sweep(t, v_next.as_deref(), 1.0);
                v_next = Some(v.clone());
                values.push(v);
                policy.push(p);
            }
            values.reverse();
            policy.reverse();
            Ok(build(values, policy, t_end, Vec::new()))
        }
        Horizon::Discounted(beta) => {
            let mut v = vec![0.0f64; len as usize];
            let mut deltas = Vec::new();
            let stop = opts.tol * (1.0 - beta) / (2.0 * beta);
            let mut sweeps = 0usize;
            loop {
                let (nv, _) = mixed_sweep(1, Some(&v), beta);
                let delta = nv
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                v = nv;
                sweeps += 1;
                deltas.push(delta);
                if delta <= stop {
                    break;
                }
                if sweeps >= opts.max_sweeps {
                    return Err(Error::Invalid(format!(
                        "value iteration did not reach tolerance {} within {} sweeps (last change {delta:e})",
                        opts.tol, opts.max_sweeps
                    )));
                }
            }
            let (v_final, p_final) = mixed_sweep(1, Some(&v), beta);
            sweeps += 1;
            Ok(build(vec![v_final], vec![p_final], sweeps, deltas))
        }
    }
}

// ── Online trajectory tracking ───────────────────────────────────────────────

/// A solved partial-sharing policy, by either solver.
#[derive(Clone, Copy)]
pub enum MixedPolicy<'a> {
    Exact(&'a PdssExactSolution),
    Quantized(&'a PdssQuantSolution),
}

impl MixedPolicy<'_> {
    pub fn observed(&self) -> &[bool] {
        match self {
            MixedPolicy::Exact(s) => &s.observed,
            MixedPolicy::Quantized(s) => &s.observed,
        }
    }
}

/// Walks the information state alongside a realised trajectory: observed
/// blocks are copied from the live empirical counts each stage, unobserved
/// blocks carry the deterministic belief flow.  `decide` looks the mixed
/// state up in the policy — the quantiser is applied only there, the carried
/// beliefs stay exact — and `advance` moves the beliefs under the law that
/// was actually played.
pub struct MixedTrajectory<'a> {
    policy: MixedPolicy<'a>,
    /// Belief fractions for unobserved sub-populations (empty when observed).
    pub beliefs: Vec<Vec<f64>>,
    /// Exact solutions: per-layer key → node index.
    exact_index: Vec<HashMap<Vec<u64>, usize>>,
}

impl<'a> MixedTrajectory<'a> {
    pub fn new(model: &TeamModel, policy: MixedPolicy<'a>) -> MixedTrajectory<'a> {
        let observed = policy.observed().to_vec();
        let beliefs = (0..model.k_count())
            .map(|k| {
                if observed[k] {
                    Vec::new()
                } else {
                    match &model.subpops[k].init {
                        Init::Pmf(p) => p.clone(),
                        Init::States(xs) => {
                            let mut c = vec![0.0; model.m(k)];
                            for &x in xs {
                                c[x] += 1.0 / xs.len() as f64;
                            }
                            c
                        }
                    }
                }
            })
            .collect();
        let exact_index = match policy {
            MixedPolicy::Exact(sol) => sol
                .layers
                .iter()
                .map(|layer| {
                    layer
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(i, node)| (node.key(&sol.lattices), i))
                        .collect()
                })
                .collect(),
            MixedPolicy::Quantized(_) => Vec::new(),
        };
        MixedTrajectory {
            policy,
            beliefs,
            exact_index,
        }
    }

    /// Current per-sub-population fractions: live counts on observed blocks,
    /// carried beliefs on the rest.
    fn fracs(&self, model: &TeamModel, counts: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        if counts.len() != model.k_count() {
            return Err(Error::Invalid(format!(
                "observed counts have {} entries for {} sub-populations",
                counts.len(),
                model.k_count()
            )));
        }
        let observed = self.policy.observed();
        (0..model.k_count())
            .map(|k| {
                if observed[k] {
                    if counts[k].len() != model.m(k) {
                        return Err(Error::Invalid(format!(
                            "counts for sub-population {} have {} states, expected {}",
                            model.subpops[k].name,
                            counts[k].len(),
                            model.m(k)
                        )));
                    }
                    let n = model.n(k) as f64;
                    Ok(counts[k].iter().map(|&c| c as f64 / n).collect())
                } else {
                    Ok(self.beliefs[k].clone())
                }
            })
            .collect()
    }

    /// Look up the law prescribed at stage t for the current information
    /// state; `counts` entries for unobserved sub-populations are ignored.
    pub fn decide(
        &self,
        model: &TeamModel,
        t: usize,
        counts: &[Vec<u32>],
    ) -> Result<LocalLaws> {
        let fracs = self.fracs(model, counts)?;
        let observed = self.policy.observed();
        let law_idx = match self.policy {
            MixedPolicy::Exact(sol) => {
                let layer = sol
                    .layers
                    .get(t - 1)
                    .ok_or_else(|| Error::Invalid(format!("stage {t} beyond the solved horizon")))?;
                let node = MixedNode {
                    counts: (0..model.k_count())
                        .map(|k| if observed[k] { counts[k].clone() } else { Vec::new() })
                        .collect(),
                    beliefs: (0..model.k_count())
                        .map(|k| if observed[k] { Vec::new() } else { self.beliefs[k].clone() })
                        .collect(),
                };
                let key = node.key(&sol.lattices);
                let idx = self.exact_index[t - 1].get(&key).ok_or_else(|| {
                    Error::Invalid(format!(
                        "information state at stage {t} was not enumerated: key {key:?}"
                    ))
                })?;
                layer.policy[*idx]
            }
            MixedPolicy::Quantized(sol) => {
                let stage = if sol.values.len() == 1 { 0 } else { t - 1 };
                let table = sol.policy.get(stage).ok_or_else(|| {
                    Error::Invalid(format!("stage {t} beyond the solved horizon"))
                })?;
                let mut idx = 0u64;
                for (k, axis) in sol.space.axes.iter().enumerate() {
                    let pos = match axis {
                        MixedAxis::Lattice(lat) => lat.rank(&counts[k]),
                        MixedAxis::Grid(g) => g
                            .position(&project_to_axis(&fracs[k], g.r))
                            .expect("projection lands inside the near-simplex band"),
                    };
                    idx += pos * sol.space.strides[k];
                }
                table[idx as usize]
            }
        };
        let laws = match self.policy {
            MixedPolicy::Exact(s) => &s.laws,
            MixedPolicy::Quantized(s) => &s.laws,
        };
        let mut decoded = laws.blank();
        laws.decode(law_idx, &mut decoded);
        Ok(decoded)
    }

    /// Advance the carried beliefs one stage under the law that was played.
    pub fn advance(
        &mut self,
        model: &TeamModel,
        t: usize,
        counts: &[Vec<u32>],
        laws: &LocalLaws,
    ) -> Result<()> {
        let fracs = self.fracs(model, counts)?;
        let observed = self.policy.observed();
        let dist = phi(model, &fracs, laws);
        for k in 0..model.k_count() {
            if !observed[k] {
                self.beliefs[k] = hat_f(model, t, k, &fracs[k], &laws.maps[k], &dist);
            }
        }
        Ok(())
    }

    /// Decide, then advance: the one-call form for a simulation loop.
    pub fn step(
        &mut self,
        model: &TeamModel,
        t: usize,
        counts: &[Vec<u32>],
    ) -> Result<LocalLaws> {
        let laws = self.decide(model, t, counts)?;
        self.advance(model, t, counts, &laws)?;
        Ok(laws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dss::{solve_dss, SolveOptions};
    use crate::testkit;

    #[test]
    fn observing_everything_reproduces_full_sharing() {
        let model = testkit::two_pop_table_model();
        let dss = solve_dss(&model, &SolveOptions::default()).unwrap();
        let observed = vec![true, true];
        let exact = solve_pdss_exact(&model, &observed, &PdssOptions::default()).unwrap();
        assert!(
            (exact.expected_cost - dss.expected_cost).abs() < 1e-9,
            "exact-tree {} vs lattice {}",
            exact.expected_cost,
            dss.expected_cost
        );
        let quant = solve_pdss_quantized(&model, &observed, 3, &PdssOptions::default()).unwrap();
        assert!(
            (quant.expected_cost - dss.expected_cost).abs() < 1e-9,
            "mixed {} vs lattice {}",
            quant.expected_cost,
            dss.expected_cost
        );
    }

    #[test]
    fn observing_nothing_is_exact_when_the_flow_is_deterministic() {
        // beliefs advance by the deterministic mean-field map; with sure noise
        // that map is the true chain, so the unobserved solution at r = n
        // matches full sharing exactly
        let model = testkit::deterministic_flow_model();
        let dss = solve_dss(&model, &SolveOptions::default()).unwrap();
        let quant =
            solve_pdss_quantized(&model, &[false], model.n(0), &PdssOptions::default()).unwrap();
        assert!(
            (quant.expected_cost - dss.expected_cost).abs() < 1e-10,
            "{} vs {}",
            quant.expected_cost,
            dss.expected_cost
        );
        let exact = solve_pdss_exact(&model, &[false], &PdssOptions::default()).unwrap();
        assert!(
            (exact.expected_cost - dss.expected_cost).abs() < 1e-10,
            "{} vs {}",
            exact.expected_cost,
            dss.expected_cost
        );
    }

    #[test]
    fn empty_observed_set_collapses_to_one_flowing_node() {
        let model = testkit::one_pop_functional_model();
        let sol = solve_pdss_exact(&model, &[false], &PdssOptions::default()).unwrap();
        assert_eq!(sol.layers[0].nodes.len(), 1);
        // layer t reachable beliefs: one per distinct law flow, deduped
        assert!(sol.layers[1].nodes.len() <= 4);
        assert!(sol.expected_cost.is_finite());
        assert_eq!(sol.init.len(), 1);
    }

    #[test]
    fn coupled_unobserved_blocks_are_refused() {
        let model = testkit::cross_coupled_model();
        let err = solve_pdss_exact(&model, &[true, false], &PdssOptions::default());
        match err {
            Err(Error::Assumption(_)) => {}
            other => panic!("expected an assumption error, got {other:?}"),
        }
        let err = solve_pdss_quantized(&model, &[true, false], 3, &PdssOptions::default());
        assert!(matches!(err, Err(Error::Assumption(_))));
    }

    #[test]
    fn exact_enumerator_requires_finite_horizon() {
        let mut model = testkit::two_pop_table_model();
        model.horizon = Horizon::Discounted(0.9);
        let model = TeamModel::new(model.subpops, model.cost, model.horizon).unwrap();
        assert!(matches!(
            solve_pdss_exact(&model, &[true, true], &PdssOptions::default()),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn partial_observation_interpolates_between_extremes() {
        // observing a strict subset can never beat full sharing inside its
        // own model: its value is computed under the belief approximation, so
        // here only check it runs, stays finite and non-negative
        let model = testkit::two_pop_table_model();
        let sol = solve_pdss_exact(&model, &[true, false], &PdssOptions::default()).unwrap();
        assert!(sol.expected_cost.is_finite());
        assert!(sol.expected_cost >= 0.0);
        let quant = solve_pdss_quantized(&model, &[true, false], 4, &PdssOptions::default()).unwrap();
        assert!(quant.expected_cost.is_finite());
        assert!(quant.expected_cost >= 0.0);
    }

    #[test]
    fn discounted_mixed_value_iteration_converges() {
        let mut model = testkit::two_pop_table_model();
        model.horizon = Horizon::Discounted(0.7);
        let model = TeamModel::new(model.subpops, model.cost, model.horizon).unwrap();
        let sol = solve_pdss_quantized(&model, &[true, false], 3, &PdssOptions::default()).unwrap();
        assert!(!sol.deltas.is_empty());
        for w in sol.deltas.windows(2) {
            assert!(w[1] <= 0.7 * w[0] + 1e-12);
        }
    }

    #[test]
    fn tracker_with_everything_observed_reads_the_lattice_policy() {
        let model = testkit::two_pop_table_model();
        let observed = vec![true, true];
        let quant = solve_pdss_quantized(&model, &observed, 3, &PdssOptions::default()).unwrap();
        let tracker = MixedTrajectory::new(&model, MixedPolicy::Quantized(&quant));
        // pick an arbitrary lattice point per sub-population
        let counts = vec![vec![2u32, 1], vec![0u32, 1, 1]];
        let mut idx = 0u64;
        for (k, axis) in quant.space.axes.iter().enumerate() {
            match axis {
                MixedAxis::Lattice(lat) => idx += lat.rank(&counts[k]) * quant.space.strides[k],
                MixedAxis::Grid(_) => panic!("everything observed: no grids"),
            }
        }
        let law = tracker.decide(&model, 1, &counts).unwrap();
        let mut expect = quant.laws.blank();
        quant.laws.decode(quant.policy[0][idx as usize], &mut expect);
        assert_eq!(law.maps, expect.maps);

        let exact = solve_pdss_exact(&model, &observed, &PdssOptions::default()).unwrap();
        let tracker = MixedTrajectory::new(&model, MixedPolicy::Exact(&exact));
        let (node_idx, _) = exact.init[0];
        let node_counts = exact.layers[0].nodes[node_idx].counts.clone();
        let law = tracker.decide(&model, 1, &node_counts).unwrap();
        let mut expect = exact.laws.blank();
        exact
            .laws
            .decode(exact.layers[0].policy[node_idx], &mut expect);
        assert_eq!(law.maps, expect.maps);
    }

    #[test]
    fn tracker_moves_beliefs_by_the_mean_field_flow() {
        let model = testkit::one_pop_functional_model();
        let quant = solve_pdss_quantized(&model, &[false], 5, &PdssOptions::default()).unwrap();
        let mut tracker = MixedTrajectory::new(&model, MixedPolicy::Quantized(&quant));
        assert_eq!(tracker.beliefs[0], vec![1.0, 0.0]);
        let law = tracker.step(&model, 1, &[Vec::new()]).unwrap();
        let fracs = vec![vec![1.0, 0.0]];
        let dist = phi(&model, &fracs, &law);
        let flow = hat_f(&model, 1, 0, &fracs[0], &law.maps[0], &dist);
        assert_eq!(tracker.beliefs[0], flow);
    }

    #[test]
    fn tracker_rejects_malformed_counts() {
        let model = testkit::two_pop_table_model();
        let quant =
            solve_pdss_quantized(&model, &[true, true], 3, &PdssOptions::default()).unwrap();
        let tracker = MixedTrajectory::new(&model, MixedPolicy::Quantized(&quant));
        assert!(matches!(
            tracker.decide(&model, 1, &[vec![3, 0]]),
            Err(Error::Invalid(_))
        ));
        assert!(matches!(
            tracker.decide(&model, 1, &[vec![3, 0], vec![1, 1]]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn exact_policy_lookup_covers_every_reachable_stage() {
        // unobserved beliefs carried by the tracker flow bit-for-bit like the
        // enumerator's, so every lookup along the walk must hit a stored node
        let model = testkit::deterministic_flow_model();
        let exact = solve_pdss_exact(&model, &[false], &PdssOptions::default()).unwrap();
        let mut tracker = MixedTrajectory::new(&model, MixedPolicy::Exact(&exact));
        for t in 1..=model.finite_t().unwrap() {
            tracker.step(&model, t, &[Vec::new()]).unwrap();
        }
        assert!(matches!(
            tracker.decide(&model, 4, &[Vec::new()]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn following_the_stored_policy_reproduces_the_optimal_value() {
        let model = testkit::two_pop_table_model();
        let sol = solve_pdss_exact(&model, &[true, false], &PdssOptions::default()).unwrap();
        let t_end = model.finite_t().unwrap();
        let index: Vec<HashMap<Vec<u64>, usize>> = sol
            .layers
            .iter()
            .map(|layer| {
                layer
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, node)| (node.key(&sol.lattices), i))
                    .collect()
            })
            .collect();
        fn eval_policy(
            model: &TeamModel,
            sol: &PdssExactSolution,
            index: &[HashMap<Vec<u64>, usize>],
            t: usize,
            t_end: usize,
            node_idx: usize,
        ) -> f64 {
            let node = &sol.layers[t - 1].nodes[node_idx];
            let fracs = node.fracs(model, &sol.observed);
            let mut decoded = sol.laws.blank();
            sol.laws
                .decode(sol.layers[t - 1].policy[node_idx], &mut decoded);
            let dist = phi(model, &fracs, &decoded);
            let mut total = model.cost_eval(t, &dist);
            if t < t_end {
                let (combos, beliefs) =
                    mixed_step(model, t, &sol.observed, &sol.lattices, node, &decoded, &dist);
                let mut acc = Kahan::default();
                for (counts, p) in combos {
                    let succ = MixedNode {
                        counts,
                        beliefs: beliefs.clone(),
                    };
                    let idx = index[t]
                        .get(&succ.key(&sol.lattices))
                        .expect("successor enumerated during the forward pass");
                    acc.add(p * eval_policy(model, sol, index, t + 1, t_end, *idx));
                }
                total += acc.value();
            }
            total
        }
        let mut j = Kahan::default();
        for &(idx, p) in &sol.init {
            j.add(p * eval_policy(&model, &sol, &index, 1, t_end, idx));
        }
        assert!(
            (j.value() - sol.expected_cost).abs() < 1e-10,
            "policy walk {} vs solver {}",
            j.value(),
            sol.expected_cost
        );
    }
}
