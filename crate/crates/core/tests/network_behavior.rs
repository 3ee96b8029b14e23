//! End-to-end behaviour of assembled networks against closed-form or
//! centralized references computed without the network.

use blendnet_core::graph::Graph;
use blendnet_core::netsim::{
    assemble_edge_funnel, assemble_state_coupled, integrate, FunnelFamily, FunnelGain, FunnelSpec, PsiEnvelope,
    SolverOptions, VectorField,
};
use blendnet_core::recipes::{
    counting_fields, counting_scenario, decode_count, dispatch_scenario, least_squares_scenario, DispatchAgent,
    DispatchProblem, LeastSquaresProblem,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Counting blended solution from `s(0) = 0`: `s(t) = N(1 − e^{−t/N})`.
fn counting_blended(n: usize, t: f64) -> f64 {
    let n = n as f64;
    n * (1.0 - (-t / n).exp())
}

fn terminal_gap(g: &Graph, k: f64, t_end: f64) -> f64 {
    let sc = counting_scenario(g, k).unwrap();
    let n = g.n_agents();
    let traj = integrate(
        &sc.system,
        &vec![0.0; n],
        0.0,
        t_end,
        &SolverOptions::rk4(1e-3).with_output_dt(t_end),
    )
    .unwrap();
    let s = counting_blended(n, t_end);
    traj.final_state().iter().map(|x| (x - s).abs()).fold(0.0, f64::max)
}

#[test]
fn counting_three_agents_follow_the_blended_solution() {
    let g = Graph::path(3).unwrap();
    assert!(terminal_gap(&g, 100.0, 20.0) < 0.05);
}

#[test]
fn blended_gap_halves_when_the_gain_doubles() {
    let g = Graph::ring(5).unwrap();
    let gaps: Vec<f64> = [50.0, 100.0, 200.0, 400.0]
        .iter()
        .map(|&k| terminal_gap(&g, k, 10.0))
        .collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=3.0).contains(&ratio), "gaps {gaps:?}");
    }
}

fn within_jitter(errors: &[f64]) -> bool {
    errors.windows(2).all(|w| w[1] <= 1.1 * w[0])
}

#[test]
fn counting_error_shrinks_with_gain() {
    let g = Graph::ring(5).unwrap();
    let errors: Vec<f64> = [10.0, 100.0, 1000.0]
        .iter()
        .map(|&k| {
            let sc = counting_scenario(&g, k).unwrap();
            let traj = integrate(
                &sc.system,
                &[0.0; 5],
                0.0,
                60.0,
                &SolverOptions::rk4(1e-3).with_output_dt(60.0),
            )
            .unwrap();
            // The fixed point of the network is slightly off N for finite k.
            traj.final_state().iter().map(|x| (x - 5.0).abs()).fold(0.0, f64::max)
        })
        .collect();
    assert!(within_jitter(&errors), "{errors:?}");
}

#[test]
fn least_squares_error_shrinks_with_gain() {
    let a = [
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]),
        DMatrix::from_row_slice(2, 2, &[0.7, -1.0, 1.5, 0.2]),
        DMatrix::from_row_slice(2, 2, &[-0.4, 0.9, 1.1, 1.3]),
    ];
    let b = [
        DVector::from_vec(vec![1.0, -2.0]),
        DVector::from_vec(vec![0.5, 3.0]),
        DVector::from_vec(vec![-1.0, 0.25]),
    ];
    let p = LeastSquaresProblem::new(a.to_vec(), b.to_vec()).unwrap();
    // Oracle from a QR solve of the stacked system, independent of the normal equations.
    let (sa, sb) = p.stacked();
    let qr = sa.clone().qr();
    let rhs = qr.q().transpose() * sb;
    let oracle = qr.r().solve_upper_triangular(&rhs).unwrap();
    assert!((p.oracle().unwrap() - &oracle).norm() < 1e-10);
    let g = Graph::path(3).unwrap();
    let errors: Vec<f64> = [10.0, 100.0, 1000.0]
        .iter()
        .map(|&k| {
            let sc = least_squares_scenario(&p, &g, k).unwrap();
            let traj = integrate(
                &sc.system,
                &[0.0; 6],
                0.0,
                30.0,
                &SolverOptions::rk4(1e-3).with_output_dt(30.0),
            )
            .unwrap();
            let x = traj.final_state();
            (0..3)
                .map(|i| (DVector::from_column_slice(&x[2 * i..2 * i + 2]) - &oracle).norm())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(within_jitter(&errors), "{errors:?}");
    assert!(errors[2] < 1e-2);
}

#[test]
fn dispatch_error_shrinks_with_gain() {
    let p = DispatchProblem {
        agents: vec![
            DispatchAgent::quadratic(0.5, 0.0, 1.0, 0.0, 3.0),
            DispatchAgent::quadratic(1.0, 0.2, 0.5, 0.0, 3.0),
            DispatchAgent::quadratic(1.5, -0.1, 1.5, 0.0, 3.0),
        ],
    };
    let g = Graph::complete(3).unwrap();
    let errors: Vec<f64> = [10.0, 100.0, 1000.0]
        .iter()
        .map(|&k| {
            let (sc, sol) = dispatch_scenario(&p, &g, k).unwrap();
            let traj = integrate(
                &sc.system,
                &[0.0; 3],
                0.0,
                40.0,
                &SolverOptions::rk4(1e-3).with_output_dt(40.0),
            )
            .unwrap();
            traj.final_state()
                .iter()
                .zip(&p.agents)
                .zip(&sol.lambda)
                .map(|((x, a), l)| (a.theta(*x) - l).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(within_jitter(&errors), "{errors:?}");
}

#[test]
fn counting_survives_an_agent_leaving() {
    let g = Graph::ring(6).unwrap();
    let sc = counting_scenario(&g, 200.0).unwrap();
    let opts = SolverOptions::rk4(1e-3).with_output_dt(1.0);
    let first = integrate(&sc.system, &[0.0; 6], 0.0, 25.0, &opts).unwrap();
    let mut x = first.final_state().to_vec();
    x.remove(3);
    let g5 = g.without_agent(3).unwrap();
    let fields: Vec<VectorField> = counting_fields(6)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i != 3)
        .map(|(_, f)| f)
        .collect();
    let sys = assemble_state_coupled(&fields, &g5, 200.0).unwrap();
    let second = integrate(&sys, &x, 25.0, 50.0, &opts).unwrap();
    for v in second.final_state() {
        assert!((v - 5.0).abs() < 0.5, "{v}");
        assert_eq!(decode_count(*v), 5);
    }
}

#[test]
fn edge_funnel_keeps_every_edge_inside_its_envelope() {
    let g = Graph::complete(4).unwrap();
    let fields: Vec<VectorField> = (1..=4)
        .map(|c| VectorField::scalar(format!("c{c}"), move |_, x| -x + c as f64))
        .collect();
    let psi = PsiEnvelope::new(2.0, 0.01, 1.0);
    let spec = FunnelSpec::uniform(FunnelFamily::EdgeWise, &g, FunnelGain::Inverse, psi);
    let sys = assemble_edge_funnel(&fields, &g, &spec).unwrap();
    let traj = integrate(&sys, &[0.0, 0.3, 0.6, 0.9], 0.0, 15.0, &SolverOptions::rk4(1e-3)).unwrap();
    assert!(traj.meta.max_funnel_ratio.unwrap() < 1.0);
    for m in &traj.funnel_margins {
        assert!(m.iter().all(|v| *v > 0.0));
    }
    let tail = traj.index_at(10.0);
    let worst = traj.sync_error[tail..].iter().copied().fold(0.0, f64::max);
    assert!(worst <= 0.01, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Identical agents started together never separate, whatever the graph.
    #[test]
    fn synchronized_identical_agents_stay_synchronized(n in 2usize..7, p in 0.3f64..1.0, seed in 0u64..1000, x0 in -5.0f64..5.0) {
        let g = Graph::random_connected(n, p, seed).unwrap();
        let fields = vec![VectorField::scalar("decay", |t, x| -x + t.sin()); n];
        let sys = assemble_state_coupled(&fields, &g, 50.0).unwrap();
        let traj = integrate(&sys, &vec![x0; n], 0.0, 2.0, &SolverOptions::rk4(1e-2)).unwrap();
        prop_assert!(traj.sync_error.iter().all(|e| *e == 0.0));
    }

    /// The counting network settles within one unit of N on any connected graph.
    #[test]
    fn counting_decodes_on_random_graphs(n in 2usize..7, p in 0.2f64..1.0, seed in 0u64..1000) {
        let g = Graph::random_connected(n, p, seed).unwrap();
        let sc = counting_scenario(&g, 400.0).unwrap();
        let t = 12.0 * n as f64;
        let traj = integrate(&sc.system, &vec![0.0; n], 0.0, t, &SolverOptions::rk4(2e-3).with_output_dt(t)).unwrap();
        for v in traj.final_state() {
            prop_assert_eq!(decode_count(*v), n as i64);
        }
    }
}
