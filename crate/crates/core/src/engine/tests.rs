use std::collections::BTreeMap;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::objectives::{ObjectiveKind, Sample};
use crate::topology::{chain_graph, levels_from_matrix, HierarchicalMatrix};

fn quad(c: &[f64]) -> LocalObjective {
    LocalObjective::separable_quadratic(c).unwrap()
}

fn random_ls(rng: &mut ChaCha8Rng, rows: usize, m: usize) -> LocalObjective {
    let samples: Vec<Sample> = (0..rows)
        .map(|_| Sample {
            features: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            target: rng.random_range(-3.0..3.0),
        })
        .collect();
    LocalObjective::new(ObjectiveKind::LeastSquares, &samples, rows, 0.0).unwrap()
}

fn budget(n: usize) -> EngineConfig {
    EngineConfig { max_total_inner: n, ..EngineConfig::default() }
}

#[test]
fn cc_fixed_point_has_zero_dual_residual() {
    let solver = SolverSpec { kind: SolverKind::Anchor, ..SolverSpec::exact() };
    let mut e = Engine::centralized(budget(5), solver, vec![quad(&[1.0]), quad(&[-2.0])])
        .unwrap()
        .with_initial(&[0.7])
        .unwrap()
        .with_multipliers(Edge::Server(0), vec![1.5])
        .unwrap()
        .with_multipliers(Edge::Server(1), vec![-1.5])
        .unwrap();
    e.sweep().unwrap();
    assert_eq!(e.state().x_hat.as_ref().unwrap().as_slice(), &[0.7]);
    assert_eq!(e.compute_residuals().unwrap().dual_inf_norm, 0.0);
}

#[test]
fn cc_sweep_moves_toward_average() {
    let mut e = Engine::centralized(budget(100), SolverSpec::exact(), vec![quad(&[1.0]), quad(&[5.0])]).unwrap();
    e.sweep().unwrap();
    // Each client solves min (x - c)^2 + (0 - x)^2, giving c / 2; the server averages.
    assert_relative_eq!(e.state().blocks[0][0], 0.5, epsilon = 1e-12);
    assert_relative_eq!(e.state().blocks[1][0], 2.5, epsilon = 1e-12);
    assert_relative_eq!(e.state().x_hat.as_ref().unwrap()[0], 1.5, epsilon = 1e-12);
    let d0 = (3.0f64 - 0.0).abs();
    e.sweep().unwrap();
    assert!((3.0 - e.state().x_hat.as_ref().unwrap()[0]).abs() < d0);
}

#[test]
fn cc_outer_update_follows_residuals() {
    let mut e = Engine::centralized(budget(100), SolverSpec::exact(), vec![quad(&[1.0, -1.0]), quad(&[3.0, 2.0])])
        .unwrap();
    e.sweep().unwrap();
    let report = e.compute_residuals().unwrap().clone();
    e.outer_update().unwrap();
    for (i, c) in report.per_edge_primal.iter().enumerate() {
        let mu = &e.state().edges[&Edge::Server(i)].multiplier;
        for r in 0..2 {
            assert_relative_eq!(mu[r], 2.0 * c.as_slice()[r], epsilon = 1e-15);
        }
    }
    assert!(max_abs(&e.multiplier_sum()) <= 1e-12);
    assert_eq!((e.state().k, e.state().v), (2, 0));
    assert!(e.compute_residuals().is_err());
}

#[test]
fn zero_residuals_terminate_optimal() {
    let mut e = Engine::centralized(budget(10), SolverSpec::exact(), vec![quad(&[2.0]), quad(&[2.0])])
        .unwrap()
        .with_initial(&[2.0])
        .unwrap();
    let summary = e.run().unwrap();
    assert_eq!(summary.status, StopStatus::Optimal);
    assert_eq!(summary.total_inner, 1);
    assert_eq!(e.multiplier_sum(), vec![0.0]);
}

#[test]
fn b4_with_one_sweep_updates_multipliers_every_sweep() {
    let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 1 }, ..budget(30) };
    let mut e = Engine::centralized(cfg, SolverSpec::exact(), vec![quad(&[1.0]), quad(&[4.0])]).unwrap();
    let mut phases = Vec::new();
    e.run_with(|_, p| phases.push(p)).unwrap();
    for pair in phases.chunks(2) {
        if pair.len() == 2 {
            assert_eq!(pair, [Phase::Sweep, Phase::OuterUpdate]);
        }
    }
    assert!(e.trace().iter().all(|t| t.v == 1));
}

#[test]
fn budget_wins_ties() {
    let mut e = Engine::centralized(budget(1), SolverSpec::exact(), vec![quad(&[2.0])])
        .unwrap()
        .with_initial(&[2.0])
        .unwrap();
    assert_eq!(e.run().unwrap().status, StopStatus::Budget);
}

#[test]
fn max_outer_is_reported() {
    let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 1 }, max_outer: 2, ..budget(100) };
    let mut e = Engine::centralized(cfg, SolverSpec::exact(), vec![quad(&[1.0]), quad(&[4.0])]).unwrap();
    let s = e.run().unwrap();
    assert_eq!(s.status, StopStatus::MaxOuter);
    assert_eq!(s.total_inner, 2);
}

#[test]
fn dc_symmetric_clients_agree() {
    let objs = vec![quad(&[1.5, -0.5]); 3];
    let mut e = Engine::new(
        budget(10),
        SolverSpec::exact(),
        objs,
        chain_graph(3).unwrap(),
        CoordinationSequence::in_order(3),
    )
    .unwrap()
    .with_initial(&[1.5, -0.5])
    .unwrap();
    e.sweep().unwrap();
    for b in &e.state().blocks {
        for (x, c) in b.iter().zip([1.5, -0.5]) {
            assert_relative_eq!(*x, c, epsilon = 1e-12);
        }
    }
    assert!(e.compute_residuals().unwrap().dual_inf_norm <= 1e-12);
}

#[test]
fn dc_two_client_chain_closed_form() {
    let (c1, c2) = (1.0, 5.0);
    let mut e = Engine::new(
        budget(10),
        SolverSpec::exact(),
        vec![quad(&[c1]), quad(&[c2])],
        chain_graph(2).unwrap(),
        CoordinationSequence::in_order(2),
    )
    .unwrap()
    .with_blocks(vec![ParamBlock::new(vec![0.0]), ParamBlock::new(vec![2.0])])
    .unwrap();
    e.sweep().unwrap();
    // Client 0: min (x - c1)^2 + (x - 2)^2; client 1 then sees the new x0.
    let x0 = (c1 + 2.0) / 2.0;
    let x1 = (c2 + x0) / 2.0;
    assert_relative_eq!(e.state().blocks[0][0], x0, epsilon = 1e-12);
    assert_relative_eq!(e.state().blocks[1][0], x1, epsilon = 1e-12);
    // Only the non-first-level client contributes to the dual residual.
    assert_relative_eq!(e.compute_residuals().unwrap().dual_inf_norm, (x1 - 2.0).abs(), epsilon = 1e-12);
}

#[test]
fn dc_partial_sweep_leaves_others_untouched() {
    let mut e = Engine::new(
        budget(10),
        SolverSpec::exact(),
        vec![quad(&[0.3]), quad(&[7.0])],
        chain_graph(2).unwrap(),
        CoordinationSequence::in_order(2),
    )
    .unwrap()
    .with_blocks(vec![ParamBlock::new(vec![0.123456789]), ParamBlock::new(vec![2.0])])
    .unwrap();
    let only_second = CoordinationSequence::new(vec![vec![1]], CoordinationMode::PartialCycle).unwrap();
    e.sweep_with(only_second).unwrap();
    assert_eq!(e.state().blocks[0][0].to_bits(), 0.123456789f64.to_bits());
    assert_ne!(e.state().blocks[1][0], 2.0);
}

#[test]
fn dc_residuals_and_update_arithmetic() {
    let blocks = vec![ParamBlock::new(vec![1.0]), ParamBlock::new(vec![2.0]), ParamBlock::new(vec![4.0])];
    let e = Engine::new(
        budget(10),
        SolverSpec::exact(),
        vec![quad(&[0.0]); 3],
        chain_graph(3).unwrap(),
        CoordinationSequence::in_order(3),
    )
    .unwrap()
    .with_blocks(blocks)
    .unwrap();
    let c: Vec<f64> = e.primal_residuals().iter().map(|c| c.as_slice()[0]).collect();
    assert_eq!(c, vec![-1.0, -2.0]);
    assert!(e.compute_residuals().is_err());

    let cfg = EngineConfig { rho_init: 2.0, ..budget(10) };
    let mut e = Engine::new(
        cfg,
        SolverSpec::exact(),
        vec![LocalObjective::zero(1).unwrap(); 2],
        chain_graph(2).unwrap(),
        CoordinationSequence::in_order(2),
    )
    .unwrap()
    .with_multipliers(Edge::Peer(0, 1), vec![1.0])
    .unwrap()
    .with_blocks(vec![ParamBlock::new(vec![0.5]), ParamBlock::new(vec![0.0])])
    .unwrap();
    // Client 0 is left as is by solving only client 1 from a partial-cycle sequence with a known residual.
    e.sweep_with(CoordinationSequence::new(vec![vec![1]], CoordinationMode::PartialCycle).unwrap()).unwrap();
    let c = e.compute_residuals().unwrap().per_edge_primal[0].as_slice()[0];
    e.outer_update().unwrap();
    assert_relative_eq!(e.state().edges[&Edge::Peer(0, 1)].multiplier[0], 1.0 + 2.0 * 4.0 * c, epsilon = 1e-15);
}

#[test]
fn geometric_penalty_doubles_until_cap() {
    let cfg = EngineConfig {
        criterion: InnerCriterion::B4 { vmax: 1 },
        rho_schedule: RhoSchedule::Geometric { factor: 2.0, cap: 8.0 },
        ..budget(5)
    };
    let mut e = Engine::centralized(cfg, SolverSpec::exact(), vec![quad(&[1.0]), quad(&[3.0])]).unwrap();
    let mut seen = Vec::new();
    e.run_with(|eng, p| {
        if p == Phase::OuterUpdate {
            seen.push(eng.state().edges[&Edge::Server(0)].penalty[0]);
        }
    })
    .unwrap();
    assert_eq!(seen, vec![2.0, 4.0, 8.0, 8.0]);
}

#[test]
fn partial_cycle_forces_full_final_sweep() {
    let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 1 }, ..budget(9) };
    let objs = vec![quad(&[1.0]), quad(&[2.0]), quad(&[3.0])];
    let mut e = Engine::centralized(cfg, SolverSpec::exact(), objs)
        .unwrap()
        .with_partial_cycle(PartialCycleScheduler::new(1, 3).unwrap());
    let mut full_before_update = true;
    let mut last_full = false;
    e.run_with(|eng, p| match p {
        Phase::Sweep => last_full = eng.last_sweep_full,
        Phase::OuterUpdate => full_before_update &= last_full,
        _ => {}
    })
    .unwrap();
    assert!(full_before_update);
    assert_eq!(e.trace().len(), 9);
}

#[test]
fn non_finite_iterates_are_reported_with_location() {
    let solver = SolverSpec::bcpg(1e6, 1);
    let mut e = Engine::centralized(budget(50), solver, vec![quad(&[1.0]), quad(&[2.0])]).unwrap();
    let err = e.run().unwrap_err();
    let msg = err.to_string();
    assert!(
        matches!(err, Error::NonFinite { .. } | Error::Sweep { .. }),
        "unexpected error {msg}"
    );
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<LocalObjective> {
    (0..n).map(|_| random_ls(rng, m + 2, m)).collect()
}

#[test]
fn surrogate_descends_within_inner_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let n = rng.random_range(2..5);
        let m = rng.random_range(1..4);
        let objs = random_instance(&mut rng, n, m);
        let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 5 }, ..budget(40) };
        let mut e = if trial % 2 == 0 {
            Engine::centralized(cfg, SolverSpec::exact(), objs).unwrap()
        } else {
            Engine::new(cfg, SolverSpec::exact(), objs, chain_graph(n).unwrap(), CoordinationSequence::in_order(n))
                .unwrap()
        };
        let mut last = e.surrogate_value().unwrap();
        e.run_with(|eng, p| {
            let now = eng.surrogate_value().unwrap();
            if p == Phase::Sweep {
                assert!(now <= last + 1e-10, "trial {trial}: {now} > {last}");
            }
            last = now;
        })
        .unwrap();
    }
}

#[test]
fn multiplier_sum_stays_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let objs = random_instance(&mut rng, 4, 3);
    let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 2 }, ..budget(200) };
    let mut e = Engine::centralized(cfg, SolverSpec::exact(), objs).unwrap();
    let mut worst = 0.0f64;
    e.run_with(|eng, p| {
        if p == Phase::OuterUpdate {
            worst = worst.max(multiplier_sum_norm(eng));
        }
    })
    .unwrap();
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn b1_inner_loops_finish() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let objs = random_instance(&mut rng, 3, 2);
    let cfg = EngineConfig { criterion: InnerCriterion::B1, eps_dual: 1e-8, eps_pri: 1e-8, ..budget(100_000) };
    let mut e = Engine::centralized(cfg.clone(), SolverSpec::exact(), objs).unwrap();
    let mut met = Vec::new();
    e.run_with(|eng, p| {
        if p == Phase::OuterUpdate {
            met.push(eng.trace().last().unwrap().dual_inf);
        }
    })
    .unwrap();
    assert!(!met.is_empty());
    assert!(met.iter().all(|&d| d <= cfg.eps_dual));
}

#[test]
fn increasing_penalty_drives_primal_residual_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let objs = random_instance(&mut rng, 3, 2);
    let cfg = EngineConfig {
        criterion: InnerCriterion::B2 { initial_excess: 1e-2, decay: 0.5 },
        rho_schedule: RhoSchedule::geometric(1.5),
        ..budget(100_000)
    };
    let mut e = Engine::new(cfg.clone(), SolverSpec::exact(), objs, chain_graph(3).unwrap(), CoordinationSequence::in_order(3))
        .unwrap();
    let mut ends = Vec::new();
    let s = e
        .run_with(|eng, p| {
            if p == Phase::OuterUpdate {
                ends.push(eng.trace().last().unwrap().primal_inf);
            }
        })
        .unwrap();
    assert_eq!(s.status, StopStatus::Optimal);
    assert!(s.primal_inf <= cfg.eps_pri);
    assert!(ends.len() >= 2 && ends.last() < ends.first());
}

#[test]
fn centralized_equals_decentralized_with_server_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let n = rng.random_range(2..5);
        let m = rng.random_range(1..4);
        let objs = random_instance(&mut rng, n, m);
        let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 2 }, ..budget(30) };
        let mut cc = Engine::centralized(cfg.clone(), SolverSpec::exact(), objs.clone()).unwrap();
        cc.run().unwrap();

        // Node 0 is the server with a zero objective; clients are 1..=n, all children of 0.
        let mut dc_objs = vec![LocalObjective::zero(m).unwrap()];
        dc_objs.extend(objs);
        let mut rows = vec![vec![0i64; n + 1]; n + 1];
        for (i, row) in rows.iter_mut().enumerate().skip(1) {
            row[0] = 1;
            row[i] = 1;
        }
        let seq = levels_from_matrix(&HierarchicalMatrix::new(rows)).unwrap();
        let edges: Vec<(usize, usize)> = (1..=n).map(|i| (0, i)).collect();
        let graph = ConsensusGraph::decentralized(n + 1, &edges).unwrap();
        let mut dc = Engine::new(cfg, SolverSpec::exact(), dc_objs, graph, seq).unwrap();
        let mut server_path = Vec::new();
        dc.run_with(|eng, p| {
            if p == Phase::Sweep {
                server_path.push(eng.state().blocks[0].clone());
            }
        })
        .unwrap();

        let mut cc2 = Engine::centralized(
            EngineConfig { criterion: InnerCriterion::B4 { vmax: 2 }, ..budget(30) },
            SolverSpec::exact(),
            dc.objectives()[1..].to_vec(),
        )
        .unwrap();
        let mut cc_path = Vec::new();
        cc2.run_with(|eng, p| {
            if p == Phase::Sweep {
                cc_path.push(eng.state().x_hat.clone().unwrap());
            }
        })
        .unwrap();
        assert_eq!(cc_path.len(), server_path.len());
        for (a, b) in cc_path.iter().zip(&server_path) {
            for r in 0..m {
                assert!((a[r] - b[r]).abs() <= 1e-12 * a[r].abs().max(1.0), "{} vs {}", a[r], b[r]);
            }
        }
        for (a, b) in cc.trace().iter().zip(dc.trace()) {
            assert!((a.dual_inf - b.dual_inf).abs() <= 1e-12 * a.dual_inf.max(1.0));
        }
    }
}

#[test]
fn dropout_restitches_chain_and_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let objs = random_instance(&mut rng, 5, 2);
    let cfg = EngineConfig { criterion: InnerCriterion::B4 { vmax: 1 }, ..budget(20_000) };
    let mut e = Engine::new(cfg.clone(), SolverSpec::exact(), objs, chain_graph(5).unwrap(), CoordinationSequence::in_order(5))
        .unwrap()
        .with_dropout(BTreeMap::from([(5, vec![2])]));
    let s = e.run().unwrap();
    assert_eq!(s.status, StopStatus::Optimal);
    assert!(s.primal_inf <= cfg.eps_pri);
    assert_eq!(e.graph().edges(), &[(0, 1), (1, 3), (3, 4)]);
    assert_eq!(e.state().edges.keys().copied().collect::<Vec<_>>(), vec![
        Edge::Peer(0, 1),
        Edge::Peer(1, 3),
        Edge::Peer(3, 4)
    ]);
}
