//! Distribution-level maps induced by the per-agent model.
//!
//! Under a joint local law γ = (γ^1, …, γ^K), a deep state z (per-sub-pop
//! state marginals) induces the joint state–action distribution
//! φ(z, γ)(x, u) = z^k(x)·1{u = γ^k(x)}.  One solver step then needs:
//!
//!  * ĥ (mean-field flow): ĥ^k(z, γ)(y) = Σ_x z^k(x)·P^k(y | x, γ^k(x), φ),
//!    the expected next state marginal, exact as n_k → ∞;
//!  * f̄ (noise-empirical flow): f̄^k(z, γ, η)(y) = Σ_{x,w} z^k(x)·η(w)·
//!    1{f^k(x, γ^k(x), φ, w) = y}, the push-forward under a realised noise
//!    empirical η;
//!  * the exact finite-n law of the next count vector: agents currently in
//!    state x move independently, so the cohort of size c_x splits
//!    multinomially by the kernel row at (x, γ^k(x), φ), and the next count
//!    vector is the convolution of those splits — independent across
//!    sub-populations.
//!
//! The per-coordinate marginal of that law is a convolution of binomials
//! (used for closed-form marginal checks); the full law is what the dynamic
//! programs propagate.

use crate::error::{Error, Result};
use crate::expr::DistAccess;
use crate::model::{Dynamics, Kernel, TeamModel};
use crate::statespace::{CompositionSpace, DeepState, DeepStateSpace, LocalLaws};
use crate::util::{binomial_pmf, multinomial_pmf, next_unit, stream_rng, streams, Kahan};

// ── Joint state–action distributions ─────────────────────────────────────────

/// A point of the joint hypercube ∏_k [0,1]^{𝒳^k×𝒰^k}; usually an actual
/// distribution 𝐃 with 𝐃^k a sub-population's state–action empirical.
#[derive(Clone, Debug, PartialEq)]
pub struct StateActionDist {
    vals: Vec<f64>,
    offsets: Vec<usize>,
    dims: Vec<(usize, usize)>, // (|𝒳^k|, |𝒰^k|)
}

impl StateActionDist {
    pub fn zeros(model: &TeamModel) -> StateActionDist {
        let dims: Vec<(usize, usize)> = (0..model.k_count())
            .map(|k| (model.m(k), model.nu(k)))
            .collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &(m, nu) in &dims {
            offsets.push(total);
            total += m * nu;
        }
        StateActionDist {
            vals: vec![0.0; total],
            offsets,
            dims,
        }
    }

    /// Interpret flat hypercube coordinates (probe points) as a joint
    /// distribution surrogate.
    pub fn from_flat(model: &TeamModel, coords: &[f64]) -> StateActionDist {
        let mut d = StateActionDist::zeros(model);
        debug_assert_eq!(coords.len(), d.vals.len());
        d.vals.copy_from_slice(coords);
        d
    }

    #[inline]
    pub fn idx(&self, k: usize, x: usize, u: usize) -> usize {
        self.offsets[k] + x * self.dims[k].1 + u
    }

    #[inline]
    pub fn set(&mut self, k: usize, x: usize, u: usize, v: f64) {
        let i = self.idx(k, x, u);
        self.vals[i] = v;
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.vals
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    /// Coordinate range of sub-population k in the flat layout.
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k];
        start..start + self.dims[k].0 * self.dims[k].1
    }
}

impl DistAccess for StateActionDist {
    #[inline]
    fn cell(&self, k: usize, x: usize, u: usize) -> f64 {
        self.vals[self.offsets[k] + x * self.dims[k].1 + u]
    }

    #[inline]
    fn state_mass(&self, k: usize, x: usize) -> f64 {
        let (_, nu) = self.dims[k];
        let base = self.offsets[k] + x * nu;
        self.vals[base..base + nu].iter().sum()
    }
}

// ── φ and the stage cost ─────────────────────────────────────────────────────

/// φ(z, γ): spread each state marginal onto the action chosen by the law.
pub fn phi(model: &TeamModel, fracs: &[Vec<f64>], laws: &LocalLaws) -> StateActionDist {
    let mut d = StateActionDist::zeros(model);
    for (k, z) in fracs.iter().enumerate() {
        for (x, &zx) in z.iter().enumerate() {
            d.set(k, x, laws.maps[k][x], zx);
        }
    }
    d
}

/// φ(z, γ) for a lattice deep state (exact fractions c/n).
pub fn phi_state(model: &TeamModel, state: &DeepState, laws: &LocalLaws) -> StateActionDist {
    let mut d = StateActionDist::zeros(model);
    for (k, counts) in state.counts.iter().enumerate() {
        let n = model.n(k) as f64;
        for (x, &c) in counts.iter().enumerate() {
            if c > 0 {
                d.set(k, x, laws.maps[k][x], c as f64 / n);
            }
        }
    }
    d
}

/// Stage cost under a law: ℓ_t(z, γ) = c_t(φ(z, γ)).
pub fn stage_cost(model: &TeamModel, t: usize, state: &DeepState, laws: &LocalLaws) -> f64 {
    model.cost_eval(t, &phi_state(model, state, laws))
}

/// ℓ_t(z, γ) = c_t(φ(z, γ)) for arbitrary per-sub-population coordinate
/// vectors (hypercube points included).
pub fn ell(model: &TeamModel, t: usize, fracs: &[Vec<f64>], laws: &LocalLaws) -> f64 {
    model.cost_eval(t, &phi(model, fracs, laws))
}

// ── Flows ────────────────────────────────────────────────────────────────────

/// Mean-field flow ĥ^k(z, γ): expected next state marginal of sub-population
/// k.  `dist` must be φ(z, γ).
pub fn hat_f(
    model: &TeamModel,
    t: usize,
    k: usize,
    z: &[f64],
    law: &[usize],
    dist: &StateActionDist,
) -> Vec<f64> {
    let m = model.m(k);
    let mut out = vec![Kahan::default(); m];
    for (x, &zx) in z.iter().enumerate() {
        if zx == 0.0 {
            continue;
        }
        for (y, acc) in out.iter_mut().enumerate() {
            acc.add(zx * model.kernel_prob(t, k, y, x, law[x], dist));
        }
    }
    out.iter().map(|a| a.value()).collect()
}

/// Noise-empirical flow f̄^k(z, γ, η) for functional dynamics: push z through
/// f with the realised noise empirical η applied uniformly across states.
pub fn bar_f(
    model: &TeamModel,
    t: usize,
    k: usize,
    z: &[f64],
    law: &[usize],
    dist: &StateActionDist,
    eta: &[f64],
) -> Result<Vec<f64>> {
    let m = model.m(k);
    let mut out = vec![Kahan::default(); m];
    for (x, &zx) in z.iter().enumerate() {
        if zx == 0.0 {
            continue;
        }
        for (w, &ew) in eta.iter().enumerate() {
            if ew == 0.0 {
                continue;
            }
            let y = model.dyn_next(t, k, x, law[x], dist, w)?;
            out[y].add(zx * ew);
        }
    }
    Ok(out.iter().map(|a| a.value()).collect())
}

/// One mixed-state step: observed sub-populations (k with `observed[k]`)
/// advance by the noise-empirical flow f̄ with their realised noise
/// empirical `etas[k]`; the rest advance by the deterministic mean-field
/// flow ĥ.  With every sub-population observed this is f̄ throughout; with
/// none it is ĥ throughout.
pub fn mixed_step(
    model: &TeamModel,
    t: usize,
    fracs: &[Vec<f64>],
    laws: &LocalLaws,
    observed: &[bool],
    etas: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let dist = phi(model, fracs, laws);
    (0..model.k_count())
        .map(|k| {
            if observed[k] {
                bar_f(model, t, k, &fracs[k], &laws.maps[k], &dist, &etas[k])
            } else {
                Ok(hat_f(model, t, k, &fracs[k], &laws.maps[k], &dist))
            }
        })
        .collect()
}

// ── Exact finite-n transition laws ───────────────────────────────────────────

/// Law of sub-population k's next count vector given its current counts, its
/// local law, and the joint distribution 𝐃 = φ(z, γ): the convolution over
/// source states x of Multinomial(c_x, P^k(· | x, γ^k(x), 𝐃)).  Dense over
/// the lattice `lat` = ℰ_{n_k} ranks.
pub fn subpop_count_dist(
    model: &TeamModel,
    t: usize,
    k: usize,
    counts: &[u32],
    law: &[usize],
    dist: &StateActionDist,
    lat: &CompositionSpace,
) -> Vec<f64> {
    let m = model.m(k);
    debug_assert_eq!(lat.m, m);
    debug_assert_eq!(lat.n, counts.iter().sum::<u32>());
    let mut partial = 0u32;
    let mut cur = vec![1.0f64];
    let mut cur_space = CompositionSpace::new(0, m);
    let mut cvec: Vec<u32> = Vec::new();
    let mut vvec: Vec<u32> = Vec::new();
    let mut sum = vec![0u32; m];
    for (x, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let row = model.kernel_row(t, k, x, law[x], dist);
        let split_space = CompositionSpace::new(c, m);
        let mut splits: Vec<(Vec<u32>, f64)> = Vec::new();
        for vi in 0..split_space.len_u128() as u64 {
            split_space.unrank(vi, &mut vvec);
            let p = multinomial_pmf(&vvec, &row);
            if p > 0.0 {
                splits.push((vvec.clone(), p));
            }
        }
        let next_space = CompositionSpace::new(partial + c, m);
        let mut next = vec![0.0f64; next_space.len_u128() as usize];
        for (ci, &pc) in cur.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            cur_space.unrank(ci as u64, &mut cvec);
            for (v, pv) in &splits {
                for i in 0..m {
                    sum[i] = cvec[i] + v[i];
                }
                next[next_space.rank(&sum) as usize] += pc * pv;
            }
        }
        cur = next;
        cur_space = next_space;
        partial += c;
    }
    debug_assert_eq!(partial, lat.n);
    cur
}

/// Marginal law of the next count in one target state y: the convolution over
/// source states of Binomial(c_x, P^k(y | x, γ^k(x), 𝐃)), over j = 0..=n_k.
pub fn count_marginal(
    model: &TeamModel,
    t: usize,
    k: usize,
    y: usize,
    counts: &[u32],
    law: &[usize],
    dist: &StateActionDist,
) -> Vec<f64> {
    let n: u32 = counts.iter().sum();
    let mut out = vec![0.0; n as usize + 1];
    out[0] = 1.0;
    let mut filled = 0usize;
    for (x, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let p = model.kernel_prob(t, k, y, x, law[x], dist);
        let b = binomial_pmf(c, p.clamp(0.0, 1.0));
        let mut next = vec![0.0; filled + c as usize + 1];
        for (j, &pj) in out[..=filled].iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (i, &bi) in b.iter().enumerate() {
                next[j + i] += pj * bi;
            }
        }
        filled += c as usize;
        out[..next.len()].copy_from_slice(&next);
        out[next.len()..].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Successor law via noise empiricals, for functional dynamics: enumerate the
/// sub-population's noise empirical η (multinomially distributed), push the
/// deep state through f̄, and require the image to be a lattice point.
///
/// This reproduces [`subpop_count_dist`] exactly when, at each reachable 𝐃,
/// every supported source state either moves deterministically or all
/// randomising states share one state-independent reset map — the class where
/// the realised next empirical is a function of the noise empirical alone.
/// Outside that class the image leaves the lattice and an error is returned.
pub fn subpop_count_dist_noise_route(
    model: &TeamModel,
    t: usize,
    k: usize,
    counts: &[u32],
    law: &[usize],
    dist: &StateActionDist,
    lat: &CompositionSpace,
) -> Result<Vec<f64>> {
    let n: u32 = counts.iter().sum();
    let nw = model.nw(k);
    if nw == 0 {
        return Err(Error::Invalid(
            "noise-empirical route needs a noise alphabet".into(),
        ));
    }
    let pmf = model.noise_pmf_at(t, k)?;
    let z: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let noise_lat = CompositionSpace::new(n, nw);
    let mut out = vec![0.0; lat.len_u128() as usize];
    let mut ecounts: Vec<u32> = Vec::new();
    let mut image = vec![0u32; model.m(k)];
    for ei in 0..noise_lat.len_u128() as u64 {
        noise_lat.unrank(ei, &mut ecounts);
        let pe = multinomial_pmf(&ecounts, pmf);
        if pe == 0.0 {
            continue;
        }
        let eta: Vec<f64> = ecounts.iter().map(|&c| c as f64 / n as f64).collect();
        let img = bar_f(model, t, k, &z, law, dist, &eta)?;
        for (i, &v) in img.iter().enumerate() {
            let c = v * n as f64;
            let r = c.round();
            if (c - r).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "noise-empirical image {c} is not a count; the dynamics are outside the product-form class"
                )));
            }
            image[i] = r as u32;
        }
        out[lat.rank(&image) as usize] += pe;
    }
    Ok(out)
}

/// Full deep-state successor law: the product over k of the per-sub-population
/// count laws, returned as a sparse list of (joint rank, probability).
pub fn joint_successors(
    model: &TeamModel,
    t: usize,
    state: &DeepState,
    laws: &LocalLaws,
    space: &DeepStateSpace,
) -> Vec<(u64, f64)> {
    let dist = phi_state(model, state, laws);
    let per_k: Vec<Vec<(u64, f64)>> = (0..model.k_count())
        .map(|k| {
            subpop_count_dist(
                model,
                t,
                k,
                &state.counts[k],
                &laws.maps[k],
                &dist,
                &space.per_k[k],
            )
            .into_iter()
            .enumerate()
            .filter(|&(_, p)| p > 0.0)
            .map(|(i, p)| (i as u64, p))
            .collect()
        })
        .collect();
    let mut out: Vec<(u64, f64)> = vec![(0, 1.0)];
    for (k, opts) in per_k.iter().enumerate() {
        let stride = space.stride(k);
        let mut next = Vec::with_capacity(out.len() * opts.len());
        for &(idx, p) in &out {
            for &(rk, pk) in opts {
                next.push((idx + rk * stride, p * pk));
            }
        }
        out = next;
    }
    out
}

// ── Decoupling probe ─────────────────────────────────────────────────────────

/// Check that the kernels (and functional dynamics) of the sub-populations in
/// `observed` ignore the joint-distribution blocks of the sub-populations
/// outside it.  Randomised probe: redraw the unobserved blocks and require
/// identical kernel rows and dynamics outputs.  Returns an assumption error
/// naming the first offending entry.
pub fn check_no_influence(
    model: &TeamModel,
    observed: &[bool],
    probes: usize,
    seed: u64,
) -> Result<()> {
    if observed.len() != model.k_count() {
        return Err(Error::Invalid(
            "observed-set mask length must equal the number of sub-populations".into(),
        ));
    }
    let stages: Vec<usize> = match model.finite_t() {
        None => vec![1],
        Some(t) if t <= 8 => (1..=t).collect(),
        Some(t) => (1..=8).chain([t]).collect(),
    };
    let mut rng = stream_rng(seed, streams::DECOUPLING);
    let dim = model.dist_dim();
    for _ in 0..probes.max(1) {
        let coords: Vec<f64> = (0..dim).map(|_| next_unit(&mut rng)).collect();
        let base = StateActionDist::from_flat(model, &coords);
        let mut redrawn = base.clone();
        for k in 0..model.k_count() {
            if !observed[k] {
                for i in redrawn.block(k) {
                    redrawn.as_flat_mut()[i] = next_unit(&mut rng);
                }
            }
        }
        for &t in &stages {
            for (k, &obs) in observed.iter().enumerate() {
                if !obs {
                    continue;
                }
                for x in 0..model.m(k) {
                    for u in 0..model.nu(k) {
                        let a = model.kernel_row(t, k, x, u, &base);
                        let b = model.kernel_row(t, k, x, u, &redrawn);
                        for y in 0..model.m(k) {
                            if (a[y] - b[y]).abs() > 1e-12 {
                                return Err(Error::Assumption(format!(
                                    "sub-population {:?} kernel at (t={t}, x={x}, u={u}, y={y}) \
                                     responds to unobserved deep states ({} vs {})",
                                    model.subpops[k].name, a[y], b[y]
                                )));
                            }
                        }
                        if model.has_dynamics(k) {
                            for w in 0..model.nw(k) {
                                let ya = model.dyn_next(t, k, x, u, &base, w)?;
                                let yb = model.dyn_next(t, k, x, u, &redrawn, w)?;
                                if ya != yb {
                                    return Err(Error::Assumption(format!(
                                        "sub-population {:?} dynamics at (t={t}, x={x}, u={u}, w={w}) \
                                         respond to unobserved deep states",
                                        model.subpops[k].name
                                    )));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Whether sub-population k's kernel can read the joint distribution at all.
/// Tables and tabulated dynamics cannot; expressions and programmatic pieces
/// are assumed to.
pub fn kernel_reads_dist(model: &TeamModel, k: usize) -> bool {
    let sp = &model.subpops[k];
    match &sp.kernel {
        Kernel::Table(_) => false,
        Kernel::FromDynamics => !matches!(sp.dynamics, Some(Dynamics::Map(_))),
        Kernel::Exprs(_) | Kernel::Custom(_) => true,
    }
}
