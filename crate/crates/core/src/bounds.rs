//! Sensitivity constants and approximation-error bounds.
//!
//! The solver guarantees come with explicit constants: if the kernels and the
//! stage cost are Lipschitz in the deep state, the value loss of a mean-field
//! (belief) strategy on the finite team shrinks like C/√n, and the loss of a
//! quantised strategy shrinks like 1/r.  This module estimates (or accepts)
//! the per-stage constants
//!
//!   H1 — kernel sensitivity:  |P^k_t(y | x, u, 𝐳) − P^k_t(y | x, u, 𝐳′)|
//!        ≤ H1_t · ‖𝐳 − 𝐳′‖_∞ over the coordinate hypercube,
//!   H2 — cost sensitivity on the hypercube (same norm),
//!   H3 — flow propagation:  max_k ‖ĥ^k(z, γ) − ĥ^k(z′, γ)‖₁
//!        ≤ H3_t · max_k ‖z^k − z′^k‖₁ over the product of simplices,
//!   H4 — cost propagation:  |ℓ_t(z, γ) − ℓ_t(z′, γ)| ≤ H4_t · max_k ‖z^k − z′^k‖₁,
//!
//! runs the backward recursions
//!
//!   H5_t = H4_t + H5_{t+1} · H3_t,   H6_t = H5_{t+1} + H6_{t+1},
//!   H5_{T+1} = H6_{T+1} = 0,
//!
//! and turns them into end-to-end error estimates:
//!
//!   finite horizon:  (H5_1 + H6_1) · (C/√n + 1/r),
//!   discounted:      H4 · C / ((1 − β)(1 − β·H3) √n),  valid when β·H3 < 1,
//!
//! where C is a concentration constant for one empirical distribution
//! (default: max_k |𝒳^k| · max(|𝒲^k|, 1)).
//!
//! Estimated constants are sampled maxima, so they are lower bounds on the
//! true Lipschitz moduli; callers who need certified bounds should supply
//! constants derived from the model by hand via [`LipschitzProfile::from_constants`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{ell, hat_f, phi, StateActionDist};
use crate::model::TeamModel;
use crate::statespace::LocalLaws;
use crate::util::{next_unit, stream_rng, stream_seed, streams};

// ── Profile ──────────────────────────────────────────────────────────────────

/// Per-stage sensitivity constants plus estimation metadata.
///
/// Each of `h1..h4` holds either one entry (stationary: the same constant for
/// every stage) or one entry per stage `t = 1..=T`.  `h5`/`h6` are filled by
/// [`h_recursions`] and hold `T + 1` entries (`h5[t-1]` is H5_t, with the
/// terminal `h5[T] = 0`).
#[derive(Clone, Debug)]
pub struct LipschitzProfile {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub h3: Vec<f64>,
    pub h4: Vec<f64>,
    pub h5: Vec<f64>,
    pub h6: Vec<f64>,
    /// Concentration constant C for one empirical distribution.
    pub c: f64,
    /// True when the constants were supplied by the caller rather than probed.
    pub supplied: bool,
    /// Number of probe pairs used by the estimator (0 when supplied).
    pub pairs: usize,
    /// Grid resolution used for the snapped half of the probe pairs.
    pub r_probe: u32,
    /// Largest finite ratio observed while probing (diagnostic only).
    pub max_ratio: f64,
}

impl LipschitzProfile {
    /// Build a profile from caller-derived stationary constants.
    pub fn from_constants(h1: f64, h2: f64, h3: f64, h4: f64, c: f64) -> Self {
        LipschitzProfile {
            h1: vec![h1],
            h2: vec![h2],
            h3: vec![h3],
            h4: vec![h4],
            h5: Vec::new(),
            h6: Vec::new(),
            c,
            supplied: true,
            pairs: 0,
            r_probe: 0,
            max_ratio: f64::NAN,
        }
    }

    /// The stage-`t` entry of a constant vector (1-based stage index; a
    /// single-entry vector is broadcast to every stage).
    fn at(v: &[f64], t: usize) -> f64 {
        debug_assert!(t >= 1 && !v.is_empty());
        if v.len() == 1 {
            v[0]
        } else {
            v[(t - 1).min(v.len() - 1)]
        }
    }

    pub fn h1_at(&self, t: usize) -> f64 {
        Self::at(&self.h1, t)
    }
    pub fn h2_at(&self, t: usize) -> f64 {
        Self::at(&self.h2, t)
    }
    pub fn h3_at(&self, t: usize) -> f64 {
        Self::at(&self.h3, t)
    }
    pub fn h4_at(&self, t: usize) -> f64 {
        Self::at(&self.h4, t)
    }

    fn need_base(&self) -> Result<()> {
        if self.h3.is_empty() || self.h4.is_empty() {
            return Err(Error::Invalid(
                "sensitivity profile has no H3/H4 constants; run the estimator or supply them"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Default concentration constant: `max_k |𝒳^k| · max(|𝒲^k|, 1)`.
///
/// Sub-populations whose update enters only through a kernel (no explicit
/// noise alphabet) contribute `|𝒳^k|`.
pub fn concentration_constant(model: &TeamModel) -> f64 {
    (0..model.k_count())
        .map(|k| model.m(k) * model.nw(k).max(1))
        .max()
        .unwrap_or(1) as f64
}

// ── Estimation ───────────────────────────────────────────────────────────────

/// Per-pair maxima for one probe pair: `[h1, h2, h3, h4]` per stage.
struct PairMax {
    per_stage: Vec<[f64; 4]>,
    max_ratio: f64,
}

impl PairMax {
    fn zero(stages: usize) -> Self {
        PairMax {
            per_stage: vec![[0.0; 4]; stages],
            max_ratio: 0.0,
        }
    }

    fn join(mut self, other: &PairMax) -> Self {
        for (a, b) in self.per_stage.iter_mut().zip(&other.per_stage) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = x.max(*y);
            }
        }
        self.max_ratio = self.max_ratio.max(other.max_ratio);
        self
    }
}

/// Estimate H1..H4 by probing random coordinate pairs.
///
/// Every probe pair is driven by its own deterministic stream derived from
/// `(seed, pair index)`, so enlarging `pairs` keeps all earlier probes and the
/// estimates grow monotonically.  Even-indexed pairs are snapped to the
/// `1/r_probe` coordinate grid (so lattice-aligned kinks are seen); odd pairs
/// are uniform.  Any non-finite ratio aborts with the offending pair index.
pub fn estimate_lipschitz(
    model: &TeamModel,
    r_probe: u32,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzProfile> {
    if r_probe == 0 {
        return Err(Error::Invalid("probe grid resolution must be positive".into()));
    }
    if pairs == 0 {
        return Err(Error::Invalid("at least one probe pair is required".into()));
    }
    let stages: Vec<usize> = if model.time_homogeneous() {
        vec![1]
    } else {
        let t_end = model.finite_t().ok_or_else(|| {
            Error::Invalid("time-varying data needs a finite horizon".into())
        })?;
        (1..=t_end).collect()
    };

    let base = stream_seed(seed, streams::LIPSCHITZ);
    let acc = (0..pairs)
        .into_par_iter()
        .map(|p| probe_pair(model, &stages, r_probe, base, p))
        .try_reduce(|| PairMax::zero(stages.len()), |a, b| Ok(a.join(&b)))?;

    let pick = |i: usize| -> Vec<f64> { acc.per_stage.iter().map(|s| s[i]).collect() };
    Ok(LipschitzProfile {
        h1: pick(0),
        h2: pick(1),
        h3: pick(2),
        h4: pick(3),
        h5: Vec::new(),
        h6: Vec::new(),
        c: concentration_constant(model),
        supplied: false,
        pairs,
        r_probe,
        max_ratio: acc.max_ratio,
    })
}

fn probe_pair(
    model: &TeamModel,
    stages: &[usize],
    r_probe: u32,
    base: u64,
    pair: usize,
) -> Result<PairMax> {
    let mut rng = stream_rng(base, pair as u64);
    let mut out = PairMax::zero(stages.len());
    let dim = model.dist_dim();
    let k_count = model.k_count();
    let snap = pair % 2 == 0;
    let r = r_probe as f64;

    // Hypercube pair for H1/H2, shared across stages.
    let draw_point = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let u = next_unit(rng);
                if snap {
                    (u * r).round() / r
                } else {
                    u
                }
            })
            .collect()
    };
    let a = draw_point(&mut rng);
    let b = draw_point(&mut rng);
    let sup: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let da = StateActionDist::from_flat(model, &a);
    let db = StateActionDist::from_flat(model, &b);

    // Simplex pair and a random law for H3/H4.
    let simplex = |rng: &mut rand_chacha::ChaCha20Rng, m: usize| -> Vec<f64> {
        let e: Vec<f64> = (0..m)
            .map(|_| (-(1.0 - next_unit(rng)).ln()).max(1e-300))
            .collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let za: Vec<Vec<f64>> = (0..k_count).map(|k| simplex(&mut rng, model.m(k))).collect();
    let zb: Vec<Vec<f64>> = (0..k_count).map(|k| simplex(&mut rng, model.m(k))).collect();
    let laws = LocalLaws {
        maps: (0..k_count)
            .map(|k| {
                use rand::Rng;
                (0..model.m(k)).map(|_| rng.random_range(0..model.nu(k))).collect()
            })
            .collect(),
    };
    let l1_denom: f64 = (0..k_count)
        .map(|k| {
            za[k]
                .iter()
                .zip(&zb[k])
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let pa = phi(model, &za, &laws);
    let pb = phi(model, &zb, &laws);

    let push = |slot: &mut f64, ratio: f64, max_ratio: &mut f64| -> Result<()> {
        if !ratio.is_finite() {
            return Err(Error::Invalid(format!(
                "sensitivity probe pair {pair} produced a non-finite ratio"
            )));
        }
        *slot = slot.max(ratio);
        *max_ratio = max_ratio.max(ratio);
        Ok(())
    };

    for (si, &t) in stages.iter().enumerate() {
        let slot = &mut out.per_stage[si];
        if sup > 0.0 {
            let mut dkern: f64 = 0.0;
            for k in 0..k_count {
                for x in 0..model.m(k) {
                    for u in 0..model.nu(k) {
                        for y in 0..model.m(k) {
                            let pa_ = model.kernel_prob(t, k, y, x, u, &da);
                            let pb_ = model.kernel_prob(t, k, y, x, u, &db);
                            dkern = dkern.max((pa_ - pb_).abs());
                        }
                    }
                }
            }
            push(&mut slot[0], dkern / sup, &mut out.max_ratio)?;
            let dcost = (model.cost_eval(t, &da) - model.cost_eval(t, &db)).abs();
            push(&mut slot[1], dcost / sup, &mut out.max_ratio)?;
        }
        if l1_denom > 0.0 {
            let mut dflow: f64 = 0.0;
            for k in 0..k_count {
                let fa = hat_f(model, t, k, &za[k], &laws.maps[k], &pa);
                let fb = hat_f(model, t, k, &zb[k], &laws.maps[k], &pb);
                let d: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum();
                dflow = dflow.max(d);
            }
            push(&mut slot[2], dflow / l1_denom, &mut out.max_ratio)?;
            let dl = (ell(model, t, &za, &laws) - ell(model, t, &zb, &laws)).abs();
            push(&mut slot[3], dl / l1_denom, &mut out.max_ratio)?;
        }
    }
    Ok(out)
}

// ── Recursions and bounds ────────────────────────────────────────────────────

/// Fill the backward recursions H5/H6 for a horizon of `t_end` stages and
/// return `(H5_1, H6_1)`.
pub fn h_recursions(profile: &mut LipschitzProfile, t_end: usize) -> Result<(f64, f64)> {
    profile.need_base()?;
    if t_end == 0 {
        return Err(Error::Invalid("horizon must have at least one stage".into()));
    }
    let mut h5 = vec![0.0; t_end + 1];
    let mut h6 = vec![0.0; t_end + 1];
    for t in (1..=t_end).rev() {
        h5[t - 1] = profile.h4_at(t) + h5[t] * profile.h3_at(t);
        h6[t - 1] = h5[t] + h6[t];
    }
    let head = (h5[0], h6[0]);
    profile.h5 = h5;
    profile.h6 = h6;
    Ok(head)
}

/// Which error sources the finite-horizon bound should include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpsilonMode {
    /// Finite-population term only: (H5_1 + H6_1) · C / √n.
    Population,
    /// Quantisation term only: (H5_1 + H6_1) / r.
    Resolution,
    /// Sum of both terms; a missing `r` drops the quantisation term.
    Both,
}

/// Finite-horizon error estimate.  Requires [`h_recursions`] to have run.
pub fn epsilon_finite(
    profile: &LipschitzProfile,
    n: u32,
    r: Option<u32>,
    mode: EpsilonMode,
) -> Result<f64> {
    if profile.h5.is_empty() || profile.h6.is_empty() {
        return Err(Error::Invalid(
            "H5/H6 are not filled; run the horizon recursions first".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("population size must be positive".into()));
    }
    let sum = profile.h5[0] + profile.h6[0];
    let pop = sum * profile.c / (n as f64).sqrt();
    let quant = |r: Option<u32>| -> Result<f64> {
        match r {
            Some(0) => Err(Error::Invalid("quantisation level must be positive".into())),
            Some(r) => Ok(sum / r as f64),
            None => Ok(0.0),
        }
    };
    match mode {
        EpsilonMode::Population => Ok(pop),
        EpsilonMode::Resolution => {
            let r = r.ok_or_else(|| {
                Error::Invalid("the quantisation term needs a resolution r".into())
            })?;
            quant(Some(r))
        }
        EpsilonMode::Both => Ok(pop + quant(r)?),
    }
}

/// Discounted-horizon error estimate H4 · C / ((1 − β)(1 − β·H3) √n).
///
/// Valid only when β·H3 < 1; otherwise the sensitivity series diverges and an
/// assumption error reports both values.
pub fn epsilon_discounted(profile: &LipschitzProfile, n: u32, beta: f64) -> Result<f64> {
    profile.need_base()?;
    if n == 0 {
        return Err(Error::Invalid("population size must be positive".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Invalid(format!(
            "discount factor must lie in [0, 1), got {beta}"
        )));
    }
    let h3 = profile.h3_at(1);
    let h4 = profile.h4_at(1);
    let bh = beta * h3;
    if bh >= 1.0 {
        return Err(Error::Assumption(format!(
            "the discounted bound needs beta * H3 < 1; got beta = {beta}, H3 = {h3}"
        )));
    }
    Ok(h4 * profile.c / ((1.0 - beta) * (1.0 - bh) * (n as f64).sqrt()))
}

// ── Tests ────────────────────────────────────────────────────────────────────
