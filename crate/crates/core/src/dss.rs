//! Dynamic programming under full deep-state sharing.
//!
//! When every sub-population's empirical state distribution is shared, the
//! deep state (the tuple of per-sub-population empiricals) is a sufficient
//! statistic, and an optimal team strategy is a function of it.  The solver
//! runs exact dynamic programming over the finite lattice of deep states:
//!
//!   V_{T+1} ≡ 0,   V_t(z) = min_γ [ ℓ_t(z, γ) + E V_{t+1}(Z') ],
//!
//! where γ ranges over joint local laws, ℓ_t(z, γ) = c_t(φ(z, γ)), and Z' is
//! the exact finite-n successor: independent across sub-populations, each a
//! multinomial-convolution law over its count lattice.  Ties in the argmin
//! break toward the smallest law index, so solutions are reproducible.
//!
//! Discounted problems use value iteration with Jacobi sweeps; the stopping
//! rule ‖V_{s+1} − V_s‖_∞ ≤ tol·(1−β)/(2β) bounds ‖V − V*‖_∞ by tol/2.
//!
//! A quantised variant replaces chosen sub-populations' count lattices with
//! near-simplex grids of resolution r: those components advance by the
//! noise-empirical flow f̄ re-projected onto the grid (a stochastic move,
//! weighted by the multinomial law of the noise empirical), while the rest
//! keep their exact count laws.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{
    bar_f, check_no_influence, kernel_reads_dist, phi, phi_state, subpop_count_dist,
    StateActionDist,
};
use crate::model::{Dynamics, Horizon, Init, TeamModel};
use crate::statespace::{
    enumerate_noise_empiricals, project_to_axis, Caps, CompositionSpace, DeepStateSpace,
    LawSpace, LocalLaws, MixedAxis, MixedSpace,
};
use crate::util::{multinomial_pmf, Kahan};

// ── Options and solutions ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub caps: Caps,
    /// Value-accuracy target for discounted value iteration.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Random probes for the influence check guarding quantised solves.
    pub probes: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            caps: Caps::default(),
            tol: 1e-8,
            max_sweeps: 100_000,
            probes: 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DssSolution {
    pub space: DeepStateSpace,
    pub laws: LawSpace,
    /// Finite horizon: `values[t-1][rank]` for t = 1..=T.  Discounted: one
    /// table, the converged fixed point.
    pub values: Vec<Vec<f64>>,
    /// Law index chosen at each (stage, deep state); same shape as `values`.
    pub policy: Vec<Vec<u64>>,
    /// Initial deep-state distribution (sparse).
    pub init: Vec<(u64, f64)>,
    /// Expected optimal cost under the initial distribution.
    pub expected_cost: f64,
    /// Stages for finite horizon; sweeps to convergence for discounted.
    pub sweeps: usize,
    /// Sup-norm value changes per sweep (discounted only).
    pub deltas: Vec<f64>,
}

// ── Initial distribution ─────────────────────────────────────────────────────

/// Sparse law of the initial deep state: per sub-population, a point mass for
/// explicit initial states or a multinomial over the count lattice for i.i.d.
/// draws; independent across sub-populations.
pub fn init_distribution(model: &TeamModel, space: &DeepStateSpace) -> Vec<(u64, f64)> {
    let mut joint: Vec<(u64, f64)> = vec![(0, 1.0)];
    let mut counts: Vec<u32> = Vec::new();
    for k in 0..model.k_count() {
        let lat = &space.per_k[k];
        let opts: Vec<(u64, f64)> = match &model.subpops[k].init {
            Init::States(xs) => {
                let mut c = vec![0u32; model.m(k)];
                for &x in xs {
                    c[x] += 1;
                }
                vec![(lat.rank(&c), 1.0)]
            }
            Init::Pmf(p) => {
                let mut v = Vec::new();
                for i in 0..lat.len_u128() as u64 {
                    lat.unrank(i, &mut counts);
                    let prob = multinomial_pmf(&counts, p);
                    if prob > 0.0 {
                        v.push((i, prob));
                    }
                }
                v
            }
        };
        let stride = space.stride(k);
        let mut next = Vec::with_capacity(joint.len() * opts.len());
        for &(idx, p) in &joint {
            for &(rk, pk) in &opts {
                next.push((idx + rk * stride, p * pk));
            }
        }
        joint = next;
    }
    joint
}

// ── Transition machinery ─────────────────────────────────────────────────────

/// Per-sub-population successor rows at one stage.  Sub-populations whose
/// kernel cannot read the joint distribution get a dense cache indexed by
/// (own lattice rank, own law digit); the rest are recomputed per evaluation.
struct RowCache {
    /// `cached[k]`: row per `rank_k * axis_len + law_digit`, or None.
    cached: Vec<Option<Vec<Vec<f64>>>>,
}

impl RowCache {
    fn build(
        model: &TeamModel,
        t: usize,
        space: &DeepStateSpace,
        laws: &LawSpace,
        caps: &Caps,
    ) -> Result<RowCache> {
        let zero_dist = StateActionDist::zeros(model);
        let mut cached = Vec::with_capacity(model.k_count());
        for k in 0..model.k_count() {
            if kernel_reads_dist(model, k) {
                cached.push(None);
                continue;
            }
            let lat = &space.per_k[k];
            let lk = lat.len_u128() as u64;
            let ak = laws.axis_len(k);
            caps.check(
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
                    subpop_count_dist(
                        model,
                        t,
                        k,
                        &c,
                        &law_maps[digit].maps[k],
                        &zero_dist,
                        lat,
                    )
                })
                .collect();
            cached.push(Some(rows));
        }
        Ok(RowCache { cached })
    }

    fn is_cached(&self, k: usize) -> bool {
        self.cached[k].is_some()
    }

    fn cached_row(&self, k: usize, rank_k: u64, digit: u64, axis_len: u64) -> &[f64] {
        &self.cached[k].as_ref().expect("row is cached")[(rank_k * axis_len + digit) as usize]
    }
}

/// E[V(Z')] over the product of per-sub-population successor rows.
fn product_expectation(v: &[f64], rows: &[&[f64]], space: &DeepStateSpace, k: usize, base: u64) -> f64 {
    if k == rows.len() - 1 {
        let start = base as usize;
        let slice = &v[start..start + rows[k].len()];
        let mut acc = Kahan::default();
        for (p, val) in rows[k].iter().zip(slice) {
            if *p != 0.0 {
                acc.add(p * val);
            }
        }
        acc.value()
    } else {
        let stride = space.stride(k);
        let mut acc = Kahan::default();
        for (i, p) in rows[k].iter().enumerate() {
            if *p != 0.0 {
                acc.add(p * product_expectation(v, rows, space, k + 1, base + i as u64 * stride));
            }
        }
        acc.value()
    }
}

/// One full minimisation sweep: for every deep state, the best law against
/// `v_next` (already discounted by the caller via `discount`).
fn sweep(
    model: &TeamModel,
    t: usize,
    space: &DeepStateSpace,
    laws: &LawSpace,
    cache: &RowCache,
    v_next: Option<&[f64]>,
    discount: f64,
) -> (Vec<f64>, Vec<u64>) {
    let n_states = space.len();
    let k_count = model.k_count();
    let results: Vec<(f64, u64)> = (0..n_states)
        .into_par_iter()
        .map(|rank| {
            let mut state = space.blank();
            space.unrank(rank, &mut state);
            let ranks_k: Vec<u64> = (0..k_count)
                .map(|k| space.per_k[k].rank(&state.counts[k]))
                .collect();
            let mut decoded = laws.blank();
            let mut row_scratch: Vec<Vec<f64>> = vec![Vec::new(); k_count];
            let mut best = (f64::INFINITY, 0u64);
            for law_idx in 0..laws.len() {
                laws.decode(law_idx, &mut decoded);
                let dist = phi_state(model, &state, &decoded);
                let mut total = model.cost_eval(t, &dist);
                if let Some(v) = v_next {
                    // fill scratch rows for dist-reading sub-populations first,
                    // then assemble immutable per-k row references
                    for k in 0..k_count {
                        if !cache.is_cached(k) {
                            row_scratch[k] = subpop_count_dist(
                                model,
                                t,
                                k,
                                &state.counts[k],
                                &decoded.maps[k],
                                &dist,
                                &space.per_k[k],
                            );
                        }
                    }
                    let rows: Vec<&[f64]> = (0..k_count)
                        .map(|k| {
                            if cache.is_cached(k) {
                                cache.cached_row(
                                    k,
                                    ranks_k[k],
                                    laws.axis_index(law_idx, k),
                                    laws.axis_len(k),
                                )
                            } else {
                                row_scratch[k].as_slice()
                            }
                        })
                        .collect();
                    total += discount * product_expectation(v, &rows, space, 0, 0);
                }
                if total < best.0 {
                    best = (total, law_idx);
                }
            }
            best
        })
        .collect();
    results.into_iter().unzip()
}

// ── Exact lattice solver ─────────────────────────────────────────────────────

/// Solve the deep-state-sharing problem exactly on the empirical lattice.
pub fn solve_dss(model: &TeamModel, opts: &SolveOptions) -> Result<DssSolution> {
    let space = DeepStateSpace::new(model, &opts.caps)?;
    let laws = LawSpace::new(model, &opts.caps)?;
    opts.caps.check(
        "deep states x laws",
        space.len() as u128 * laws.len() as u128,
    )?;
    match model.horizon {
        Horizon::Finite(t_end) => {
            let homogeneous = model.time_homogeneous();
            let mut cache = Some(RowCache::build(model, 1, &space, &laws, &opts.caps)?);
            let mut values: Vec<Vec<f64>> = Vec::with_capacity(t_end);
            let mut policy: Vec<Vec<u64>> = Vec::with_capacity(t_end);
            let mut v_next: Option<Vec<f64>> = None;
            for t in (1..=t_end).rev() {
                if !homogeneous {
                    cache = Some(RowCache::build(model, t, &space, &laws, &opts.caps)?);
                }
                let (v, p) = sweep(
                    model,
                    t,
                    &space,
                    &laws,
                    cache.as_ref().expect("cache built"),
                    v_next.as_deref(),
                    1.0,
                );
                v_next = Some(v.clone());
                values.push(v);
                policy.push(p);
            }
            values.reverse();
            policy.reverse();
            let init = init_distribution(model, &space);
            let mut j = Kahan::default();
            for &(idx, p) in &init {
                j.add(p * values[0][idx as usize]);
            }
            Ok(DssSolution {
                space,
                laws,
                values,
                policy,
                init,
                expected_cost: j.value(),
                sweeps: t_end,
                deltas: Vec::new(),
            })
        }
        Horizon::Discounted(beta) => {
            let cache = RowCache::build(model, 1, &space, &laws, &opts.caps)?;
            let mut v = vec![0.0f64; space.len() as usize];
            let mut deltas = Vec::new();
            let stop = opts.tol * (1.0 - beta) / (2.0 * beta);
            let mut sweeps = 0usize;
            loop {
                let (nv, _) = sweep(model, 1, &space, &laws, &cache, Some(&v), beta);
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
            // final extraction sweep fixes the reported policy and values
            let (v_final, p_final) = sweep(model, 1, &space, &laws, &cache, Some(&v), beta);
            sweeps += 1;
            let init = init_distribution(model, &space);
            let mut j = Kahan::default();
            for &(idx, p) in &init {
                j.add(p * v_final[idx as usize]);
            }
            Ok(DssSolution {
                space,
                laws,
                values: vec![v_final],
                policy: vec![p_final],
                init,
                expected_cost: j.value(),
                sweeps,
                deltas,
            })
        }
    }
}

// ── Quantised solver ─────────────────────────────────────────────────────────

/// Finite-horizon solution on a mixed space: exact count lattices for the
/// sub-populations outside the quantised set, near-simplex grids of
/// resolution r for those inside it.
#[derive(Clone, Debug)]
pub struct QuantDssSolution {
    pub space: MixedSpace,
    /// Which sub-populations were quantised.
    pub on_grid: Vec<bool>,
    pub laws: LawSpace,
    pub r: u32,
    /// `values[t-1][rank]` for t = 1..=T.
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<u64>>,
    /// Initial mixed-state distribution: the initial count law per
    /// sub-population, pushed through the quantiser on grid axes.
    pub init: Vec<(u64, f64)>,
    pub expected_cost: f64,
    pub sweeps: usize,
}

/// Initial distribution on a mixed space: per sub-population, the exact
/// initial count law; on grid axes each count atom is mapped to the grid
/// position of its quantised fractions.
pub fn mixed_init_distribution(
    model: &TeamModel,
    space: &MixedSpace,
) -> Vec<(u64, f64)> {
    let mut joint: Vec<(u64, f64)> = vec![(0, 1.0)];
    for k in 0..model.k_count() {
        let m = model.m(k);
        let atoms: Vec<(Vec<u32>, f64)> = match &model.subpops[k].init {
            Init::States(xs) => {
                let mut c = vec![0u32; m];
                for &x in xs {
                    c[x] += 1;
                }
                vec![(c, 1.0)]
            }
            Init::Pmf(p) => {
                let lat = CompositionSpace::new(model.n(k), m);
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
        // map count atoms onto the axis, merging atoms that quantise together
        let mut axis_atoms: Vec<(u64, f64)> = Vec::new();
        for (counts, p) in atoms {
            let pos = match &space.axes[k] {
                MixedAxis::Lattice(lat) => lat.rank(&counts),
                MixedAxis::Grid(g) => {
                    let n = model.n(k) as f64;
                    let fr: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
                    g.position(&project_to_axis(&fr, g.r))
                        .expect("projection lands inside the near-simplex band")
                }
            };
            match axis_atoms.iter_mut().find(|(i, _)| *i == pos) {
                Some((_, q)) => *q += p,
                None => axis_atoms.push((pos, p)),
            }
        }
        let mut next = Vec::with_capacity(joint.len() * axis_atoms.len());
        for &(idx, p) in &joint {
            for &(ik, pk) in &axis_atoms {
                next.push((idx + ik * space.strides[k], p * pk));
            }
        }
        joint = next;
    }
    joint
}

/// Per-axis successor rows for one mixed state under one law, plus the
/// recursive product expectation over them.
fn mixed_product_expectation(v: &[f64], rows: &[Vec<f64>], strides: &[u64], k: usize, base: u64) -> f64 {
    if k == rows.len() {
        return v[base as usize];
    }
    if k == rows.len() - 1 {
        let mut acc = Kahan::default();
        let base = base as usize;
        for (j, &p) in rows[k].iter().enumerate() {
            if p != 0.0 {
                acc.add(p * v[base + j]);
            }
        }
        return acc.value();
    }
    let mut acc = Kahan::default();
    for (j, &p) in rows[k].iter().enumerate() {
        if p != 0.0 {
            acc.add(p * mixed_product_expectation(v, rows, strides, k + 1, base + j as u64 * strides[k]));
        }
    }
    acc.value()
}

/// Solve a finite-horizon sharing problem with the sub-populations in
/// `on_grid` tracked on quantisation grids instead of exact lattices.
///
/// Grid components advance by the noise-empirical flow: the successor of q^k
/// is the grid projection of f̄(q^k, γ, η) where η ranges over the
/// sub-population's noise empiricals with multinomial weights — so they stay
/// stochastic, mirroring the true deep state at grid resolution.  Exact
/// components keep their finite-n count laws.  Their kernels must therefore
/// not respond to the quantised blocks of 𝐃 (probed before solving), and
/// quantised sub-populations need functional dynamics.
///
/// With `on_grid` all false this reproduces [`solve_dss`] on finite
/// horizons; the all-true case is the fully quantised program.
pub fn solve_dss_quantized(
    model: &TeamModel,
    r: u32,
    on_grid: &[bool],
    opts: &SolveOptions,
) -> Result<QuantDssSolution> {
    if on_grid.len() != model.k_count() {
        return Err(Error::Invalid(format!(
            "quantised-set mask has {} entries for {} sub-populations",
            on_grid.len(),
            model.k_count()
        )));
    }
    let t_end = model.finite_t().ok_or_else(|| {
        Error::Invalid(
            "quantised sharing needs a finite horizon; discounted problems use the stationary or partial-sharing solvers"
                .into(),
        )
    })?;
    for (k, &g) in on_grid.iter().enumerate() {
        if g && model.subpops[k].dynamics.is_none() {
            return Err(Error::Invalid(format!(
                "quantising sub-population {} needs functional dynamics for the noise-empirical flow",
                model.subpops[k].name
            )));
        }
    }
    // exact components must not respond to the quantised blocks of 𝐃
    let observed: Vec<bool> = on_grid.iter().map(|&g| !g).collect();
    check_no_influence(model, &observed, opts.probes, opts.seed)?;

    let space = MixedSpace::new(model, on_grid, r, &opts.caps)?;
    let laws = LawSpace::new(model, &opts.caps)?;
    opts.caps
        .check("mixed states x laws", space.len() as u128 * laws.len() as u128)?;
    let init = mixed_init_distribution(model, &space);
    let homogeneous = model.time_homogeneous();

    // noise empiricals per quantised sub-population (time-homogeneous pmfs
    // are enumerated once)
    let noise_atoms_at = |t: usize| -> Result<Vec<Option<Vec<(Vec<f64>, f64)>>>> {
        (0..model.k_count())
            .map(|k| -> Result<Option<Vec<(Vec<f64>, f64)>>> {
                if !on_grid[k] {
                    return Ok(None);
                }
                let pmf = model.noise_pmf_at(t, k)?;
                let n = model.n(k);
                let atoms = enumerate_noise_empiricals(n, pmf, &opts.caps)?;
                Ok(Some(
                    atoms
                        .into_iter()
                        .map(|(c, w)| {
                            (c.iter().map(|&x| x as f64 / n as f64).collect(), w)
                        })
                        .collect(),
                ))
            })
            .collect()
    };

    // per-axis successor-row caches for 𝐃-blind components, keyed
    // [part · axis_laws + law digit]
    let zero_dist = StateActionDist::zeros(model);
    let build_caches = |t: usize,
                        noise_atoms: &[Option<Vec<(Vec<f64>, f64)>>]|
     -> Result<Vec<Option<Vec<Vec<f64>>>>> {
        let mut caches: Vec<Option<Vec<Vec<f64>>>> = Vec::with_capacity(model.k_count());
        for k in 0..model.k_count() {
            let axis = &space.axes[k];
            let cacheable = match axis {
                MixedAxis::Lattice(_) => !kernel_reads_dist(model, k),
                MixedAxis::Grid(_) => {
                    matches!(model.subpops[k].dynamics, Some(Dynamics::Map(_)))
                }
            };
            if !cacheable {
                caches.push(None);
                continue;
            }
            let lk = axis.len();
            let ak = laws.axis_len(k);
            opts.caps.check(
                &format!(
                    "transition cache of sub-population {}",
                    model.subpops[k].name
                ),
                lk as u128 * ak as u128 * lk as u128,
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
                    let (part, digit) = (i / ak, (i % ak) as usize);
                    match axis {
                        MixedAxis::Lattice(lat) => {
                            let mut c = Vec::new();
                            lat.unrank(part, &mut c);
                            subpop_count_dist(
                                model,
                                t,
                                k,
                                &c,
                                &law_maps[digit].maps[k],
                                &zero_dist,
                                lat,
                            )
                        }
                        MixedAxis::Grid(g) => {
                            let mut fr = Vec::new();
                            g.fracs(part, &mut fr);
                            let mut row = vec![0.0f64; g.len() as usize];
                            for (eta, w) in noise_atoms[k].as_ref().expect("grid axis has atoms") {
                                let flow = bar_f(
                                    model,
                                    t,
                                    k,
                                    &fr,
                                    &law_maps[digit].maps[k],
                                    &zero_dist,
                                    eta,
                                )
                                .expect("functional dynamics checked at entry");
                                let pos = g
                                    .position(&project_to_axis(&flow, g.r))
                                    .expect("projection lands inside the near-simplex band");
                                row[pos as usize] += w;
                            }
                            row
                        }
                    }
                })
                .collect();
            caches.push(Some(rows));
        }
        Ok(caches)
    };

    let sweep_quant = |t: usize,
                       caches: &[Option<Vec<Vec<f64>>>],
                       noise_atoms: &[Option<Vec<(Vec<f64>, f64)>>],
                       v_next: Option<&[f64]>|
     -> (Vec<f64>, Vec<u64>) {
        let out: Vec<(f64, u64)> = (0..space.len())
            .into_par_iter()
            .map(|idx| {
                let mut fracs: Vec<Vec<f64>> = Vec::new();
                space.fracs(model, idx, &mut fracs);
                let mut counts: Vec<Vec<u32>> = vec![Vec::new(); model.k_count()];
                for (k, axis) in space.axes.iter().enumerate() {
                    if let MixedAxis::Lattice(lat) = axis {
                        lat.unrank(space.part(idx, k), &mut counts[k]);
                    }
                }
                let mut decoded = laws.blank();
                let mut best = (f64::INFINITY, 0u64);
                let mut rows: Vec<Vec<f64>> = vec![Vec::new(); model.k_count()];
                for law_idx in 0..laws.len() {
                    laws.decode(law_idx, &mut decoded);
                    let dist = phi(model, &fracs, &decoded);
                    let mut total = model.cost_eval(t, &dist);
                    if let Some(v) = v_next {
                        for (k, axis) in space.axes.iter().enumerate() {
                            let digit = laws.axis_index(law_idx, k);
                            if let Some(cache) = &caches[k] {
                                rows[k] = cache[(space.part(idx, k) * laws.axis_len(k) + digit) as usize].clone();
                                continue;
                            }
                            match axis {
                                MixedAxis::Lattice(lat) => {
                                    rows[k] = subpop_count_dist(
                                        model,
                                        t,
                                        k,
                                        &counts[k],
                                        &decoded.maps[k],
                                        &dist,
                                        lat,
                                    );
                                }
                                MixedAxis::Grid(g) => {
                                    let mut row = vec![0.0f64; g.len() as usize];
                                    for (eta, w) in
                                        noise_atoms[k].as_ref().expect("grid axis has atoms")
                                    {
                                        let flow = bar_f(
                                            model,
                                            t,
                                            k,
                                            &fracs[k],
                                            &decoded.maps[k],
                                            &dist,
                                            eta,
                                        )
                                        .expect("functional dynamics checked at entry");
                                        let pos = g
                                            .position(&project_to_axis(&flow, g.r))
                                            .expect(
                                                "projection lands inside the near-simplex band",
                                            );
                                        row[pos as usize] += w;
                                    }
                                    rows[k] = row;
                                }
                            }
                        }
                        total += mixed_product_expectation(v, &rows, &space.strides, 0, 0);
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

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(t_end);
    let mut policy: Vec<Vec<u64>> = Vec::with_capacity(t_end);
    let mut v_next: Option<Vec<f64>> = None;
    let mut cached: Option<(Vec<Option<Vec<(Vec<f64>, f64)>>>, Vec<Option<Vec<Vec<f64>>>>)> = None;
    for t in (1..=t_end).rev() {
        if cached.is_none() || !homogeneous {
            let atoms = noise_atoms_at(t)?;
            let caches = build_caches(t, &atoms)?;
            cached = Some((atoms, caches));
        }
        let (atoms, caches) = cached.as_ref().expect("built above");
        let (v, p) = sweep_quant(t, caches, atoms, v_next.as_deref());
        v_next = Some(v.clone());
        values.push(v);
        policy.push(p);
    }
    values.reverse();
    policy.reverse();

    let mut j = Kahan::default();
    for &(idx, p) in &init {
        j.add(p * values[0][idx as usize]);
    }
    Ok(QuantDssSolution {
        space,
        on_grid: on_grid.to_vec(),
        laws,
        r,
        values,
        policy,
        init,
        expected_cost: j.value(),
        sweeps: t_end,
    })
}
