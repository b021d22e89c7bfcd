use std::io::BufReader;
use std::sync::OnceLock;

use crowdnav::planner::PlannerKind;
use crowdnav::reachability::{solve_brt, Axis, GridSpec, ReachabilityParams, ValueFunction};
use crowdnav::scenario::Scenario;
use crowdnav::sim::{episode_metrics, metric_msd, run_benchmark, run_episode, EpisodeOptions, Trace};

// A coarse grid keeps these tests quick; the acceptance suite uses the full one.
fn field() -> &'static ValueFunction {
    static V: OnceLock<ValueFunction> = OnceLock::new();
    V.get_or_init(|| {
        let grid = GridSpec {
            axes: [Axis::new(-5.0, 5.0, 21), Axis::new(-5.0, 5.0, 21), Axis::new(-2.2, 2.2, 9), Axis::new(-2.2, 2.2, 9)],
        };
        solve_brt(&grid, &ReachabilityParams::default()).unwrap()
    })
}

fn run(sc: &Scenario) -> Trace {
    run_episode(sc, Some(field()), &EpisodeOptions::default()).unwrap()
}

fn jsonl(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    trace.write_jsonl(&mut out).unwrap();
    out
}

#[test]
fn empty_world_reaches_goal() {
    let sc = Scenario::random(0, 0, PlannerKind::Ours).unwrap();
    let tr = run(&sc);
    let start = (sc.robot.pos() - sc.goal.pos()).norm();
    let end = (tr.last.robot.pos() - sc.goal.pos()).norm();
    assert!(end < 0.1 * start, "final distance {end} from initial {start}");
    let m = episode_metrics(&tr).unwrap();
    assert_eq!(m.msd, None);
    assert_eq!(m.mpe, 0.0);
}

#[test]
fn episodes_are_byte_identical_per_seed() {
    for planner in [PlannerKind::Ours, PlannerKind::Decoupled, PlannerKind::Mcts, PlannerKind::Rrt] {
        let mut sc = Scenario::random(3, 3, planner).unwrap();
        sc.episode_steps = 8;
        let a = jsonl(&run(&sc));
        let b = jsonl(&run(&sc));
        assert!(a == b, "{planner:?} traces differ");
    }
}

#[test]
fn trace_shape_and_invariants() {
    let mut sc = Scenario::random(4, 6, PlannerKind::Ours).unwrap();
    sc.episode_steps = 12;
    let tr = run(&sc);
    assert_eq!(tr.records.len(), 12);
    let msd = metric_msd(&tr);
    for (i, r) in tr.records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.plan.planner, PlannerKind::Ours);
        assert!(r.solve_seconds.is_none());
        for (h, u) in r.humans.iter().zip(&r.human_controls) {
            assert!(u.as_vec().norm() <= sc.planner_config.v_h_max + 1e-12);
            assert!(msd <= (h.pos() - r.robot.pos()).norm() + 1e-12);
        }
        assert!(r.control.as_vec().norm() <= sc.planner_config.a_max + 1e-12);
        let p = r.predictions.as_ref().unwrap();
        assert_eq!(p.conditioned.len(), 6);
        assert_eq!(p.unconditioned[0].len(), sc.planner_config.horizon_steps);
    }
    let m = episode_metrics(&tr).unwrap();
    assert!((0.0..=1.0).contains(&m.mre));
    assert!(m.mpe >= 0.0);
}

#[test]
fn trace_file_round_trip() {
    let mut sc = Scenario::random(5, 2, PlannerKind::Decoupled).unwrap();
    sc.episode_steps = 6;
    let tr = run_episode(&sc, Some(field()), &EpisodeOptions { record_timings: true }).unwrap();
    assert!(tr.records.iter().all(|r| r.solve_seconds.is_some()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    tr.write_jsonl(std::fs::File::create(&path).unwrap()).unwrap();
    let back = Trace::read_jsonl(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, tr);
    assert_eq!(episode_metrics(&back).unwrap(), episode_metrics(&tr).unwrap());
}

#[test]
fn missing_field_is_an_error_except_for_rrt() {
    let sc = Scenario::random(1, 2, PlannerKind::Ours).unwrap();
    assert!(run_episode(&sc, None, &EpisodeOptions::default()).is_err());
    let mut sc = Scenario::random(1, 2, PlannerKind::Rrt).unwrap();
    sc.episode_steps = 4;
    assert_eq!(run_episode(&sc, None, &EpisodeOptions::default()).unwrap().records.len(), 4);
}

#[test]
fn single_cell_benchmark_wraps_the_episode() {
    let mut template = Scenario::default();
    template.episode_steps = 6;
    let report = run_benchmark(&template, &[2], &[PlannerKind::Ours], &[9], Some(field()), 1).unwrap();
    assert_eq!(report.cells.len(), 1);
    let sc = Scenario::random_from(&template, 9, 2, PlannerKind::Ours).unwrap();
    let expected = episode_metrics(&run(&sc)).unwrap();
    let cell = report.cell(2, PlannerKind::Ours).unwrap();
    assert_eq!(cell.runs[0].metrics.as_ref(), Some(&expected));
    assert_eq!(cell.mean_mre, Some(expected.mre));
    assert_eq!(cell.mean_msd, expected.msd);
}

#[test]
fn benchmark_is_independent_of_thread_count() {
    let mut template = Scenario::default();
    template.episode_steps = 5;
    let planners = [PlannerKind::Ours, PlannerKind::Rrt];
    let a = run_benchmark(&template, &[2, 3], &planners, &[0, 1], Some(field()), 1).unwrap();
    let b = run_benchmark(&template, &[2, 3], &planners, &[0, 1], Some(field()), 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for c in &a.cells {
        assert_eq!(c.seeds, a.seeds);
    }
}
