//! Small hand-built models shared by unit, property, and integration tests.
//!
//! Fixtures are constructed programmatically (not parsed from JSON) so tests
//! exercise the builder path and stay readable next to the numbers they
//! assert.  Everything here is deterministic.

use std::sync::Arc;

use crate::expr::{BindContext, Expr};
use crate::model::{Cost, Dynamics, Horizon, Init, Kernel, PerT, SubPop, TeamModel};

fn expr(model_pops: &[(String, Vec<String>, Vec<String>)], src: &str) -> Expr {
    Expr::parse(src, &BindContext { pops: model_pops }).expect("fixture expression parses")
}

fn pops_view(subpops: &[SubPop]) -> Vec<(String, Vec<String>, Vec<String>)> {
    subpops
        .iter()
        .map(|sp| (sp.name.clone(), sp.states.clone(), sp.actions.clone()))
        .collect()
}

fn syms(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

/// Two table-kernel sub-populations (sizes 3 and 2) with a per-agent cost and
/// a product coupling term; finite horizon T = 3.
pub fn two_pop_table_model() -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: 3,
        states: syms("x", 2),
        actions: syms("u", 2),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.6, 0.4]),
        kernel: Kernel::Table(PerT::Fixed(vec![
            0.9, 0.1, // x0,u0
            0.4, 0.6, // x0,u1
            0.2, 0.8, // x1,u0
            0.7, 0.3, // x1,u1
        ])),
        dynamics: None,
    };
    let b = SubPop {
        name: "b".into(),
        size: 2,
        states: syms("y", 3),
        actions: syms("v", 2),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.5, 0.3, 0.2]),
        kernel: Kernel::Table(PerT::Fixed(vec![
            0.8, 0.1, 0.1, // y0,v0
            0.1, 0.8, 0.1, // y0,v1
            0.2, 0.3, 0.5, // y1,v0
            0.3, 0.3, 0.4, // y1,v1
            0.25, 0.25, 0.5, // y2,v0
            0.6, 0.2, 0.2, // y2,v1
        ])),
        dynamics: None,
    };
    let subpops = vec![a, b];
    let view = pops_view(&subpops);
    let cost = Cost::PerAgent {
        terms: vec![
            PerT::Fixed(vec![
                Expr::constant(0.0),
                Expr::constant(1.0),
                Expr::constant(2.0),
                Expr::constant(0.5),
            ]),
            PerT::Fixed(vec![
                Expr::constant(0.1),
                Expr::constant(0.2),
                Expr::constant(0.3),
                Expr::constant(0.4),
                Expr::constant(0.5),
                Expr::constant(0.6),
            ]),
        ],
        coupling: Some(PerT::Fixed(expr(&view, "0.5 * d(a, x1) * d(b, y2)"))),
    };
    TeamModel::new(subpops, cost, Horizon::Finite(3)).expect("fixture is well-formed")
}

/// Like [`two_pop_table_model`] but with a joint cost that dips negative on
/// part of the hypercube (for validator tests).
pub fn negative_cost_model() -> TeamModel {
    let base = two_pop_table_model();
    let view = pops_view(&base.subpops);
    let cost = Cost::Joint(PerT::Fixed(expr(&view, "d(a, x0) - 0.5")));
    TeamModel::new(base.subpops, cost, base.horizon).expect("fixture is well-formed")
}

/// One sub-population (size 8) with functional dynamics x' = u normally and
/// x' = 1 − u on a fault, derived kernel, finite horizon T = 2.
pub fn one_pop_functional_model() -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: 8,
        states: syms("s", 2),
        actions: syms("go", 2),
        noises: vec!["ok".into(), "flip".into()],
        noise_pmf: Some(PerT::Fixed(vec![0.9, 0.1])),
        init: Init::Pmf(vec![1.0, 0.0]),
        kernel: Kernel::FromDynamics,
        // map[x][u][w], entries are next-state indices
        dynamics: Some(Dynamics::Map(PerT::Fixed(vec![
            0, 1, // x0,u0: ok→0, flip→1
            1, 0, // x0,u1: ok→1, flip→0
            0, 1, // x1,u0
            1, 0, // x1,u1
        ]))),
    };
    let subpops = vec![a];
    let cost = Cost::PerAgent {
        terms: vec![PerT::Fixed(vec![
            Expr::constant(0.0),
            Expr::constant(0.2),
            Expr::constant(1.0),
            Expr::constant(1.2),
        ])],
        coupling: None,
    };
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// All randomising states share one state-independent reset: x' = w.  The
/// noise empirical alone determines the next deep state, so the
/// noise-empirical transition route is exact here.
pub fn shared_reset_model() -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: 5,
        states: syms("s", 2),
        actions: syms("u", 2),
        noises: vec!["w0".into(), "w1".into()],
        noise_pmf: Some(PerT::Fixed(vec![0.3, 0.7])),
        init: Init::Pmf(vec![0.5, 0.5]),
        kernel: Kernel::FromDynamics,
        dynamics: Some(Dynamics::Map(PerT::Fixed(vec![
            0, 1, // x0,u0: next = w
            0, 1, // x0,u1
            0, 1, // x1,u0
            0, 1, // x1,u1
        ]))),
    };
    let subpops = vec![a];
    let cost = Cost::Joint(PerT::Fixed(Expr::constant(0.0)));
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// x' = x XOR w with fair noise: per-state randomisation with no shared
/// reset, the canonical example where the realised next empirical is not a
/// function of the noise empirical.
pub fn xor_model(n: u32) -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: n,
        states: syms("b", 2),
        actions: vec!["stay".into()],
        noises: vec!["z".into(), "o".into()],
        noise_pmf: Some(PerT::Fixed(vec![0.5, 0.5])),
        init: Init::Pmf(vec![0.5, 0.5]),
        kernel: Kernel::FromDynamics,
        dynamics: Some(Dynamics::Map(PerT::Fixed(vec![
            0, 1, // x0: z→0, o→1
            1, 0, // x1: z→1, o→0
        ]))),
    };
    let subpops = vec![a];
    let cost = Cost::Joint(PerT::Fixed(Expr::constant(0.0)));
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// Sub-population `a` whose kernel reads sub-population `b`'s deep state (so
/// observing only `a` violates the decoupling requirement); `b` is a table.
pub fn cross_coupled_model() -> TeamModel {
    let names = [
        ("a".to_string(), syms("x", 2), syms("u", 2)),
        ("b".to_string(), syms("y", 2), syms("v", 2)),
    ];
    let view: Vec<(String, Vec<String>, Vec<String>)> = names.to_vec();
    let p = "clamp01(0.5 * d(b, y0))";
    let a = SubPop {
        name: "a".into(),
        size: 3,
        states: syms("x", 2),
        actions: syms("u", 2),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.5, 0.5]),
        kernel: Kernel::Exprs(PerT::Fixed(vec![
            expr(&view, &format!("1 - {p}")),
            expr(&view, p),
            expr(&view, &format!("1 - {p}")),
            expr(&view, p),
            expr(&view, &format!("1 - {p}")),
            expr(&view, p),
            expr(&view, &format!("1 - {p}")),
            expr(&view, p),
        ])),
        dynamics: None,
    };
    let b = SubPop {
        name: "b".into(),
        size: 2,
        states: syms("y", 2),
        actions: syms("v", 2),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.4, 0.6]),
        kernel: Kernel::Table(PerT::Fixed(vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1])),
        dynamics: None,
    };
    let subpops = vec![a, b];
    let cost = Cost::Joint(PerT::Fixed(Expr::constant(0.0)));
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// Shape-only fixture: one large sub-population (200 agents, 2 states,
/// 3 actions) and one singleton (6 states, 6 actions), so the searched law
/// family is 3² · 6 = 54.
pub fn major_minor_shape_model() -> TeamModel {
    let users = SubPop {
        name: "users".into(),
        size: 200,
        states: syms("x", 2),
        actions: syms("u", 3),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.5, 0.5]),
        kernel: Kernel::Table(PerT::Fixed(vec![
            0.9, 0.1, 0.8, 0.2, 0.7, 0.3, // x0 under u0,u1,u2
            0.4, 0.6, 0.5, 0.5, 0.6, 0.4, // x1 under u0,u1,u2
        ])),
        dynamics: None,
    };
    let srv = SubPop {
        name: "srv".into(),
        size: 1,
        states: syms("s", 6),
        actions: syms("m", 6),
        noises: vec![],
        noise_pmf: None,
        init: Init::States(vec![0]),
        kernel: Kernel::Table(PerT::Fixed(vec![1.0 / 6.0; 6 * 6 * 6])),
        dynamics: None,
    };
    let subpops = vec![users, srv];
    let cost = Cost::Joint(PerT::Fixed(Expr::constant(0.0)));
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// Neither the kernel nor the cost can see the action, so every law ties in
/// the dynamic program and the smallest index must win.
pub fn action_blind_model() -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: 2,
        states: syms("s", 2),
        actions: syms("u", 2),
        noises: vec![],
        noise_pmf: None,
        init: Init::Pmf(vec![0.5, 0.5]),
        kernel: Kernel::Table(PerT::Fixed(vec![
            0.7, 0.3, // x0,u0
            0.7, 0.3, // x0,u1
            0.4, 0.6, // x1,u0
            0.4, 0.6, // x1,u1
        ])),
        dynamics: None,
    };
    let subpops = vec![a];
    let cost = Cost::PerAgent {
        terms: vec![PerT::Fixed(vec![
            Expr::constant(0.3),
            Expr::constant(0.3),
            Expr::constant(0.9),
            Expr::constant(0.9),
        ])],
        coupling: None,
    };
    TeamModel::new(subpops, cost, Horizon::Finite(2)).expect("fixture is well-formed")
}

/// Fully deterministic dynamics (single sure noise symbol): x' = u.  The
/// lattice chain and the mean-field flow coincide, and explicit initial
/// states make the initial deep state a point mass at (½, ½).
pub fn deterministic_flow_model() -> TeamModel {
    let a = SubPop {
        name: "a".into(),
        size: 4,
        states: syms("s", 2),
        actions: syms("u", 2),
        noises: vec!["sure".into()],
        noise_pmf: Some(PerT::Fixed(vec![1.0])),
        init: Init::States(vec![0, 0, 1, 1]),
        kernel: Kernel::FromDynamics,
        dynamics: Some(Dynamics::Map(PerT::Fixed(vec![
            0, // x0,u0
            1, // x0,u1
            0, // x1,u0
            1, // x1,u1
        ]))),
    };
    let subpops = vec![a];
    let view = pops_view(&subpops);
    let cost = Cost::PerAgent {
        terms: vec![PerT::Fixed(vec![
            Expr::constant(0.2),
            Expr::constant(0.2),
            expr(&view, "1 - clamp01(d(a, s0))"),
            expr(&view, "1 - clamp01(d(a, s0))"),
        ])],
        coupling: None,
    };
    TeamModel::new(subpops, cost, Horizon::Finite(3)).expect("fixture is well-formed")
}

/// A kernel closure that forwards a table, for exercising programmatic models.
pub fn custom_kernel_from_table(table: Vec<f64>, m: usize, nu: usize) -> crate::model::KernelFn {
    Arc::new(move |_t, y, x, u, _d| table[(x * nu + u) * m + y])
}
