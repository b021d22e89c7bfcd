//! Seeded episode engine, traces and metrics.
//!
//! Simulated pedestrians follow a noisy social-forces model whose parameters
//! differ from the predictor's, so every planner plans against a model that
//! is not the one generating the data.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{plan_decoupled, plan_mcts, plan_rrtstar, shift_plan, MctsConfig, RrtConfig};
use crate::dynamics::{
    clamp_norm, limit_control_for_speed, step_robot_unchecked, HumanControl, HumanState, RobotControl, RobotState,
    DEFAULT_V_H_MAX,
};
use crate::planner::{first_control, plan_step, CostBreakdown, Plan, PlannerKind};
use crate::predictor::{mixture_mean, InteractionHistory, Predictor, PredictorConfig, ReferencePredictor};
use crate::reachability::SafetyField;
use crate::scenario::Scenario;
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanSimConfig {
    pub repulsion_strength: f64,
    pub repulsion_range: f64,
    pub v_pref: f64,
    pub robot_repulsion_strength: f64,
    pub robot_repulsion_range: f64,
    /// Standard deviation of the per-axis velocity noise (m/s).
    pub noise_std: f64,
    pub v_h_max: f64,
}

impl Default for HumanSimConfig {
    fn default() -> Self {
        HumanSimConfig {
            repulsion_strength: 2.0,
            repulsion_range: 0.4,
            v_pref: 1.2,
            robot_repulsion_strength: 2.5,
            robot_repulsion_range: 0.8,
            noise_std: 0.1,
            v_h_max: DEFAULT_V_H_MAX,
        }
    }
}

impl HumanSimConfig {
    /// Checks ranges and that the simulator is not the predictor in disguise.
    pub fn validate(&self, predictor: &PredictorConfig) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be finite and nonnegative, got {}", self.noise_std)));
        }
        let pos = [
            ("repulsion_range", self.repulsion_range),
            ("robot_repulsion_range", self.robot_repulsion_range),
            ("v_h_max", self.v_h_max),
        ];
        for (name, x) in pos {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::invalid(format!("human_sim {name} must be positive, got {x}")));
            }
        }
        let ours = [self.repulsion_strength, self.repulsion_range, self.v_pref, self.robot_repulsion_strength, self.robot_repulsion_range];
        let theirs = [
            predictor.repulsion_strength,
            predictor.repulsion_range,
            predictor.v_pref,
            predictor.robot_repulsion_strength,
            predictor.robot_repulsion_range,
        ];
        if ours == theirs {
            return Err(Error::invalid("human simulator parameters must differ from the predictor's"));
        }
        Ok(())
    }
}

/// Social-forces velocity of human `k` before noise and clamping.
pub fn social_force(cfg: &HumanSimConfig, k: usize, humans: &[HumanState], goals: &[Vec2], robot: Vec2, dt: f64) -> Vec2 {
    let p = humans[k].pos();
    let to_goal = goals[k] - p;
    let dist = to_goal.norm();
    let mut v = if dist > 1e-9 { to_goal * (cfg.v_pref.min(dist / dt) / dist) } else { Vec2::zeros() };
    for (j, h) in humans.iter().enumerate() {
        if j == k {
            continue;
        }
        let d = p - h.pos();
        let n = d.norm();
        if n > 1e-9 {
            v += d * (cfg.repulsion_strength * (-n / cfg.repulsion_range).exp() / n);
        }
    }
    let d = p - robot;
    let n = d.norm();
    if n > 1e-9 {
        v += d * (cfg.robot_repulsion_strength * (-n / cfg.robot_repulsion_range).exp() / n);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub planner: PlannerKind,
    pub objective: f64,
    pub cost: CostBreakdown,
    pub eta: f64,
    pub safety_active: bool,
    pub iterations: usize,
    pub warm_start_iterations: usize,
    pub converged: bool,
    pub jint_terms: usize,
    pub fallback: bool,
}

impl PlanSummary {
    fn of(plan: &Plan) -> Self {
        let s = &plan.stats;
        PlanSummary {
            planner: s.planner,
            objective: s.objective,
            cost: s.cost,
            eta: plan.eta,
            safety_active: s.safety_active,
            iterations: s.iterations,
            warm_start_iterations: s.warm_start_iterations,
            converged: s.converged,
            jint_terms: s.jint_terms,
            fallback: s.fallback,
        }
    }

    fn failed(planner: PlannerKind) -> Self {
        PlanSummary {
            planner,
            objective: 0.0,
            cost: CostBreakdown::default(),
            eta: 0.0,
            safety_active: false,
            iterations: 0,
            warm_start_iterations: 0,
            converged: false,
            jint_terms: 0,
            fallback: true,
        }
    }
}

/// Mixture-mean velocity predictions over the planning horizon, one
/// sequence per human, with and without conditioning on the robot's plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub conditioned: Vec<Vec<[f64; 2]>>,
    pub unconditioned: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Wall-clock planning time; only present when timings are recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_seconds: Option<f64>,
    /// Robot state at the start of the step.
    pub robot: RobotState,
    /// Control actually applied.
    pub control: RobotControl,
    pub humans: Vec<HumanState>,
    pub human_controls: Vec<HumanControl>,
    pub plan: PlanSummary,
    pub attention: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub scenario: Scenario,
    pub dt: f64,
    pub a_max: f64,
    pub collision_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub robot: RobotState,
    pub humans: Vec<HumanState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<StepRecord>,
    pub last: FinalState,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Header(TraceHeader),
    Step(Box<StepRecord>),
    Final(FinalState),
}

impl Trace {
    /// One JSON object per line: header, one line per step, final state.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &TraceLine| -> Result<()> {
            serde_json::to_writer(&mut w, l).map_err(|e| Error::Format { field: "trace", reason: e.to_string() })?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for r in &self.records {
            line(&TraceLine::Step(Box::new(r.clone())))?;
        }
        line(&TraceLine::Final(self.last.clone()))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace> {
        let mut header = None;
        let mut records = Vec::new();
        let mut last = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format { field: "trace", reason: format!("line {}: {e}", i + 1) })?;
            match parsed {
                TraceLine::Header(h) => header = Some(h),
                TraceLine::Step(s) => records.push(*s),
                TraceLine::Final(f) => last = Some(f),
            }
        }
        let header = header.ok_or(Error::Format { field: "trace", reason: "missing header line".into() })?;
        let last = last.ok_or(Error::Format { field: "trace", reason: "missing final line".into() })?;
        Ok(Trace { header, records, last })
    }

    fn robot_positions(&self) -> Vec<Vec2> {
        self.records.iter().map(|r| r.robot.pos()).chain(std::iter::once(self.last.robot.pos())).collect()
    }

    fn human_positions(&self, k: usize) -> Vec<Vec2> {
        self.records.iter().map(|r| r.humans[k].pos()).chain(std::iter::once(self.last.humans[k].pos())).collect()
    }

    pub fn num_humans(&self) -> usize {
        self.last.humans.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpisodeOptions {
    /// Store wall-clock planning time per step (makes traces non-reproducible).
    pub record_timings: bool,
}

/// Seed for per-step planner randomness, distinct for every step.
fn step_seed(base: u64, step: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64 + 1)
}

fn mean_velocities(pred: &crate::predictor::MultimodalPrediction) -> Result<Vec<Vec<[f64; 2]>>> {
    (0..pred.num_humans()).map(|k| Ok(mixture_mean(pred, k)?.iter().map(|v| [v.x, v.y]).collect())).collect()
}

/// Runs one closed-loop episode. `field` is required by every planner except
/// RRT*.
pub fn run_episode(scenario: &Scenario, field: Option<&dyn SafetyField>, opts: &EpisodeOptions) -> Result<Trace> {
    scenario.validate()?;
    let cfg = &scenario.planner_config;
    if field.is_none() && scenario.planner != PlannerKind::Rrt {
        return Err(Error::Scenario(format!("planner {:?} needs a reachability value function", scenario.planner)));
    }
    let goals: Vec<Vec2> = scenario.humans.iter().map(|h| Vec2::new(h.goal[0], h.goal[1])).collect();
    let predictor: Arc<dyn Predictor> = Arc::new(ReferencePredictor::new(scenario.predictor.clone(), goals.clone())?);
    let sim = &scenario.human_sim;
    let noise = Normal::new(0.0, sim.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let dt = cfg.dt;
    let h = cfg.horizon_steps;

    let mut robot = scenario.robot;
    let mut humans: Vec<HumanState> = scenario.humans.iter().map(|s| HumanState::new(s.start[0], s.start[1])).collect();
    let mut history = InteractionHistory::new(robot, &humans);
    let mut prev_plan = vec![RobotControl::ZERO; h];
    let mut records = Vec::with_capacity(scenario.episode_steps);

    for step in 0..scenario.episode_steps {
        let started = Instant::now();
        let planned: Result<Plan> = match scenario.planner {
            PlannerKind::Ours => plan_step(&scenario.goal, &history, field, cfg, predictor.clone()).map(|(_, p)| p),
            PlannerKind::Decoupled => {
                plan_decoupled(&scenario.goal, &history, field, cfg, predictor.clone(), &shift_plan(&prev_plan, h))
            }
            PlannerKind::Mcts => {
                let m = MctsConfig { seed: step_seed(scenario.mcts.seed ^ scenario.seed, step), ..scenario.mcts };
                plan_mcts(&scenario.goal, &history, field, &m, cfg, predictor.clone()).map(|r| r.plan)
            }
            PlannerKind::Rrt => {
                let r = RrtConfig { seed: step_seed(scenario.rrt.seed ^ scenario.seed, step), ..scenario.rrt };
                plan_rrtstar(&robot, &scenario.goal, &humans, &r, cfg).map(|r| r.plan)
            }
        };
        let solve_seconds = opts.record_timings.then(|| started.elapsed().as_secs_f64());
        let planned = planned.and_then(|p| first_control(&p, cfg.a_max).map(|u| (u, p)));
        let (u, summary, attention, failure, plan_controls) = match planned {
            Ok((u, plan)) => (u, PlanSummary::of(&plan), plan.stats.attention.clone(), None, plan.controls),
            Err(e) => {
                log::warn!("step {step}: planner failed: {e}");
                (RobotControl::ZERO, PlanSummary::failed(scenario.planner), Vec::new(), Some(e.to_string()), vec![RobotControl::ZERO; h])
            }
        };
        let u = limit_control_for_speed(&robot, &u, dt, cfg.a_max, cfg.v_r_max);

        let predictions = if humans.is_empty() {
            None
        } else {
            let cond = predictor.predict(&history, Some(&plan_controls), h)?;
            let uncond = predictor.predict(&history, None, h)?;
            Some(PredictionRecord { conditioned: mean_velocities(&cond)?, unconditioned: mean_velocities(&uncond)? })
        };

        let mut human_controls = Vec::with_capacity(humans.len());
        for k in 0..humans.len() {
            let mut v = social_force(sim, k, &humans, &goals, robot.pos(), dt);
            v += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            let v = clamp_norm(v, sim.v_h_max);
            assert!(v.norm() <= sim.v_h_max, "simulated human speed exceeds bound");
            human_controls.push(HumanControl::from_vec(v));
        }
        let robot_next = step_robot_unchecked(&robot, &u, dt);
        let humans_next: Vec<HumanState> =
            humans.iter().zip(&human_controls).map(|(p, c)| HumanState::from_vec(p.pos() + c.as_vec() * dt)).collect();

        records.push(StepRecord {
            step,
            solve_seconds,
            robot,
            control: u,
            humans: humans.clone(),
            human_controls: human_controls.clone(),
            plan: summary,
            attention,
            failure,
            predictions,
        });
        history.push(u, robot_next, &human_controls, &humans_next)?;
        robot = robot_next;
        humans = humans_next;
        prev_plan = plan_controls;
    }

    Ok(Trace {
        header: TraceHeader { scenario: scenario.clone(), dt, a_max: cfg.a_max, collision_radius: scenario.reachability.r },
        records,
        last: FinalState { robot, humans },
    })
}

/// Smallest distance between two points moving linearly from `r0`, `h0` to
/// `r1`, `h1` over the same interval.
pub fn segment_min_distance(r0: Vec2, r1: Vec2, h0: Vec2, h1: Vec2) -> f64 {
    let d0 = r0 - h0;
    let dd = (r1 - r0) - (h1 - h0);
    let a = dd.norm_squared();
    let s = if a > 0.0 { (-d0.dot(&dd) / a).clamp(0.0, 1.0) } else { 0.0 };
    (d0 + dd * s).norm()
}

/// Minimum robot-human separation over the linearly interpolated episode.
/// Infinite when there are no humans.
pub fn metric_msd(trace: &Trace) -> f64 {
    let rp = trace.robot_positions();
    let mut best = f64::INFINITY;
    for k in 0..trace.num_humans() {
        let hp = trace.human_positions(k);
        for t in 0..rp.len() - 1 {
            best = best.min(segment_min_distance(rp[t], rp[t + 1], hp[t], hp[t + 1]));
        }
        if rp.len() == 1 {
            best = best.min((rp[0] - hp[0]).norm());
        }
    }
    best
}

/// Mean applied control norm as a fraction of `a_max`.
pub fn metric_mre(trace: &Trace, a_max: f64) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(Error::MetricUnavailable("trace has no steps".into()));
    }
    Ok(trace.records.iter().map(|r| r.control.norm() / a_max).sum::<f64>() / trace.records.len() as f64)
}

/// Mean pedestrian effort: for every step and human, the norm of the
/// difference between conditioned and unconditioned predicted mean
/// accelerations over the horizon (first differences of mean velocities over
/// `dt`), summed and divided by steps times humans.
pub fn metric_mpe(trace: &Trace) -> Result<f64> {
    let n = trace.num_humans();
    let t_len = trace.records.len();
    if t_len == 0 {
        return Err(Error::MetricUnavailable("trace has no steps".into()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let dt = trace.header.dt;
    let mut total = 0.0;
    for r in &trace.records {
        let p = r
            .predictions
            .as_ref()
            .ok_or_else(|| Error::MetricUnavailable(format!("step {} has no prediction record", r.step)))?;
        if p.conditioned.len() != n || p.unconditioned.len() != n {
            return Err(Error::MetricUnavailable(format!("step {} prediction record has the wrong human count", r.step)));
        }
        for (c, u) in p.conditioned.iter().zip(&p.unconditioned) {
            total += mpe_term(c, u, dt);
        }
    }
    Ok(total / (t_len * n) as f64)
}

/// `‖E_uncond[a] − E_cond[a]‖₂` for one human and one step.
pub fn mpe_term(cond: &[[f64; 2]], uncond: &[[f64; 2]], dt: f64) -> f64 {
    let diff: Vec<[f64; 2]> = cond.iter().zip(uncond).map(|(c, u)| [u[0] - c[0], u[1] - c[1]]).collect();
    diff.windows(2)
        .map(|w| ((w[1][0] - w[0][0]) / dt).powi(2) + ((w[1][1] - w[0][1]) / dt).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// `None` when there are no humans.
    pub msd: Option<f64>,
    pub mre: f64,
    pub mpe: f64,
    pub collision: bool,
    pub failed_steps: usize,
    /// Mean planner iterations per step, warm start excluded.
    pub mean_iterations: f64,
    /// Mean iterations spent computing the warm start.
    pub mean_warm_start_iterations: f64,
    /// Mean human-mode terms per interaction-cost evaluation.
    pub mean_jint_terms: f64,
    /// Mean wall-clock planning time, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_solve_seconds: Option<f64>,
}

pub fn episode_metrics(trace: &Trace) -> Result<EpisodeMetrics> {
    let msd = metric_msd(trace);
    let steps = trace.records.len().max(1) as f64;
    let timings: Vec<f64> = trace.records.iter().filter_map(|r| r.solve_seconds).collect();
    Ok(EpisodeMetrics {
        msd: msd.is_finite().then_some(msd),
        mre: metric_mre(trace, trace.header.a_max)?,
        mpe: metric_mpe(trace)?,
        collision: msd < trace.header.collision_radius,
        failed_steps: trace.records.iter().filter(|r| r.failure.is_some()).count(),
        mean_iterations: trace.records.iter().map(|r| r.plan.iterations as f64).sum::<f64>() / steps,
        mean_warm_start_iterations: trace.records.iter().map(|r| r.plan.warm_start_iterations as f64).sum::<f64>() / steps,
        mean_jint_terms: trace.records.iter().map(|r| r.plan.jint_terms as f64).sum::<f64>() / steps,
        mean_solve_seconds: (!timings.is_empty()).then(|| timings.iter().sum::<f64>() / timings.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Option<EpisodeMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub agents: usize,
    pub planner: PlannerKind,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub mean_msd: Option<f64>,
    pub mean_mre: Option<f64>,
    pub mean_mpe: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub mean_warm_start_iterations: Option<f64>,
    pub mean_jint_terms: Option<f64>,
    pub collisions: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub agent_counts: Vec<usize>,
    pub planners: Vec<PlannerKind>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, agents: usize, planner: PlannerKind) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.agents == agents && c.planner == planner)
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every (agent count, planner, seed) cell on scenarios generated from
/// `template`, with the same seeds for every planner. Cells run on a pool of
/// `threads` workers; the report order is fixed regardless.
pub fn run_benchmark(
    template: &Scenario,
    agent_counts: &[usize],
    planners: &[PlannerKind],
    seeds: &[u64],
    field: Option<&dyn SafetyField>,
    threads: usize,
) -> Result<BenchmarkReport> {
    let mut jobs = Vec::new();
    for &n in agent_counts {
        for &p in planners {
            for &s in seeds {
                jobs.push((n, p, s));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let runs: Vec<SeedRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, p, seed)| {
                let outcome = Scenario::random_from(template, seed, n, p)
                    .and_then(|sc| run_episode(&sc, field, &EpisodeOptions::default()))
                    .and_then(|tr| episode_metrics(&tr));
                match outcome {
                    Ok(m) => SeedRun { seed, metrics: Some(m), error: None },
                    Err(e) => {
                        log::error!("cell agents={n} planner={p:?} seed={seed}: {e}");
                        SeedRun { seed, metrics: None, error: Some(e.to_string()) }
                    }
                }
            })
            .collect()
    });
    let mut cells = Vec::new();
    let mut it = runs.into_iter();
    for &n in agent_counts {
        for &p in planners {
            let runs: Vec<SeedRun> = it.by_ref().take(seeds.len()).collect();
            let ok: Vec<&EpisodeMetrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
            cells.push(CellReport {
                agents: n,
                planner: p,
                seeds: seeds.to_vec(),
                mean_msd: mean_of(ok.iter().filter_map(|m| m.msd)),
                mean_mre: mean_of(ok.iter().map(|m| m.mre)),
                mean_mpe: mean_of(ok.iter().map(|m| m.mpe)),
                mean_iterations: mean_of(ok.iter().map(|m| m.mean_iterations)),
                mean_warm_start_iterations: mean_of(ok.iter().map(|m| m.mean_warm_start_iterations)),
                mean_jint_terms: mean_of(ok.iter().map(|m| m.mean_jint_terms)),
                collisions: ok.iter().filter(|m| m.collision).count(),
                failed_runs: runs.len() - ok.len(),
                runs,
            });
        }
    }
    Ok(BenchmarkReport { agent_counts: agent_counts.to_vec(), planners: planners.to_vec(), seeds: seeds.to_vec(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::HumanSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn segment_examples() {
        assert_abs_diff_eq!(segment_min_distance(v(0.0, 0.0), v(1.0, 0.0), v(0.5, 0.3), v(0.5, 0.3)), 0.3, epsilon = 1e-15);
        assert_eq!(segment_min_distance(v(1.0, 1.0), v(2.0, 1.0), v(1.0, 1.0), v(0.0, 0.0)), 0.0);
        // Crossing paths meet in the middle.
        assert_abs_diff_eq!(segment_min_distance(v(-1.0, 0.0), v(1.0, 0.0), v(1.0, 0.0), v(-1.0, 0.0)), 0.0);
    }

    proptest! {
        #[test]
        fn segment_matches_dense_sampling(pts in proptest::collection::vec(-5.0..5.0f64, 8)) {
            let (r0, r1, h0, h1) = (v(pts[0], pts[1]), v(pts[2], pts[3]), v(pts[4], pts[5]), v(pts[6], pts[7]));
            let exact = segment_min_distance(r0, r1, h0, h1);
            let dense = (0..=10_000)
                .map(|i| {
                    let s = i as f64 / 10_000.0;
                    ((r0 + (r1 - r0) * s) - (h0 + (h1 - h0) * s)).norm()
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert!(exact <= dense + 1e-12);
            prop_assert!(dense - exact <= 1e-4);
        }

        #[test]
        fn mpe_ignores_constant_offsets(
            c in proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 2..8),
            off in (-1.0..1.0f64, -1.0..1.0f64),
            shift in (-1.0..1.0f64, -1.0..1.0f64),
        ) {
            let cond: Vec<[f64; 2]> = c.iter().map(|&(x, y)| [x, y]).collect();
            let uncond: Vec<[f64; 2]> = c.iter().map(|&(x, y)| [x + off.0, y + off.1]).collect();
            prop_assert!(mpe_term(&cond, &uncond, 0.4).abs() < 1e-12);
            let shifted = |s: &[[f64; 2]]| s.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect::<Vec<_>>();
            let u2: Vec<[f64; 2]> = c.iter().enumerate().map(|(i, &(x, y))| [x + i as f64 * 0.1, y]).collect();
            let a = mpe_term(&cond, &u2, 0.4);
            let b = mpe_term(&shifted(&cond), &shifted(&u2), 0.4);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mpe_hand_example() {
        // cond − uncond = (0,0) then (0.4,0) over dt = 0.4: one acceleration difference of (1,0).
        assert_abs_diff_eq!(mpe_term(&[[0.0, 0.0], [0.4, 0.0]], &[[0.0, 0.0], [0.0, 0.0]], 0.4), 1.0, epsilon = 1e-12);
    }

    fn tiny_trace(controls: &[RobotControl], humans: &[Vec<Vec2>]) -> Trace {
        let mut sc = Scenario::default();
        sc.humans = humans.iter().map(|h| HumanSpec { start: [h[0].x, h[0].y], goal: [0.0, 0.0] }).collect();
        sc.num_agents = humans.len();
        let mut robot = RobotState::at_rest(0.0, 0.0);
        let mut records = Vec::new();
        for (t, u) in controls.iter().enumerate() {
            records.push(StepRecord {
                step: t,
                solve_seconds: None,
                robot,
                control: *u,
                humans: humans.iter().map(|h| HumanState::from_vec(h[t])).collect(),
                human_controls: vec![HumanControl::new(0.0, 0.0); humans.len()],
                plan: PlanSummary::failed(PlannerKind::Ours),
                attention: vec![],
                failure: None,
                predictions: Some(PredictionRecord { conditioned: vec![vec![[0.0; 2]; 3]; humans.len()], unconditioned: vec![vec![[0.0; 2]; 3]; humans.len()] }),
            });
            robot = step_robot_unchecked(&robot, u, 0.4);
        }
        let t = controls.len();
        Trace {
            header: TraceHeader { scenario: sc, dt: 0.4, a_max: 2.0, collision_radius: 0.3 },
            records,
            last: FinalState { robot, humans: humans.iter().map(|h| HumanState::from_vec(h[t])).collect() },
        }
    }

    #[test]
    fn mre_examples() {
        let tr = tiny_trace(&[RobotControl::new(1.0, 0.0), RobotControl::new(0.0, -1.0)], &[]);
        assert_abs_diff_eq!(metric_mre(&tr, 2.0).unwrap(), 0.5);
        let tr = tiny_trace(&[RobotControl::ZERO; 3], &[]);
        assert_eq!(metric_mre(&tr, 2.0).unwrap(), 0.0);
        let tr = tiny_trace(&[RobotControl::new(2.0, 0.0), RobotControl::new(0.0, -2.0)], &[]);
        assert_abs_diff_eq!(metric_mre(&tr, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn mpe_zero_when_identical_and_needs_records() {
        let hp = vec![v(1.0, 1.0); 3];
        let mut tr = tiny_trace(&[RobotControl::ZERO; 2], &[hp]);
        assert_eq!(metric_mpe(&tr).unwrap(), 0.0);
        tr.records[1].predictions = None;
        assert!(matches!(metric_mpe(&tr), Err(Error::MetricUnavailable(_))));
    }

    #[test]
    fn msd_matches_dense_sampling_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let steps = 6;
            let controls: Vec<RobotControl> = (0..steps).map(|_| RobotControl::new(rng.random_range(-2.0..2.0), rng.random_range(-1.4..1.4))).collect();
            let humans: Vec<Vec<Vec2>> = (0..2)
                .map(|_| (0..=steps).map(|_| v(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect())
                .collect();
            let tr = tiny_trace(&controls, &humans);
            let exact = metric_msd(&tr);
            let rp = tr.robot_positions();
            let mut dense = f64::INFINITY;
            for k in 0..2 {
                let hp = tr.human_positions(k);
                for t in 0..steps {
                    for i in 0..=10_000 {
                        let s = i as f64 / 10_000.0;
                        dense = dense.min(((rp[t] + (rp[t + 1] - rp[t]) * s) - (hp[t] + (hp[t + 1] - hp[t]) * s)).norm());
                    }
                }
            }
            assert!((dense - exact).abs() <= 1e-4, "{exact} vs {dense}");
            // Never above any recorded instantaneous distance.
            for r in &tr.records {
                for h in &r.humans {
                    assert!(exact <= (r.robot.pos() - h.pos()).norm());
                }
            }
        }
    }

    #[test]
    fn simulator_must_differ_from_predictor() {
        let p = PredictorConfig::default();
        assert!(HumanSimConfig::default().validate(&p).is_ok());
        let same = HumanSimConfig {
            repulsion_strength: p.repulsion_strength,
            repulsion_range: p.repulsion_range,
            v_pref: p.v_pref,
            robot_repulsion_strength: p.robot_repulsion_strength,
            robot_repulsion_range: p.robot_repulsion_range,
            ..Default::default()
        };
        assert!(same.validate(&p).is_err());
    }

    #[test]
    fn social_force_arrives_and_repels() {
        let cfg = HumanSimConfig::default();
        let humans = [HumanState::new(0.0, 0.0)];
        let at = social_force(&cfg, 0, &humans, &[v(0.1, 0.0)], v(100.0, 0.0), 0.4);
        assert_abs_diff_eq!(at.x, 0.25, epsilon = 1e-9);
        let pushed = social_force(&cfg, 0, &humans, &[v(0.0, 0.0)], v(0.5, 0.0), 0.4);
        assert!(pushed.x < 0.0);
    }

    #[test]
    fn rrt_episode_without_field() {
        let mut sc = Scenario::random(3, 2, PlannerKind::Rrt).unwrap();
        sc.episode_steps = 5;
        let a = run_episode(&sc, None, &EpisodeOptions::default()).unwrap();
        assert_eq!(a.records.len(), 5);
        assert!(a.records.iter().all(|r| r.plan.planner == PlannerKind::Rrt));
        for r in &a.records {
            for c in &r.human_controls {
                assert!(c.as_vec().norm() <= sc.human_sim.v_h_max);
            }
        }
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let back = Trace::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, a);
        let b = run_episode(&sc, None, &EpisodeOptions::default()).unwrap();
        let mut buf2 = Vec::new();
        b.write_jsonl(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        let m = episode_metrics(&a).unwrap();
        assert!(m.msd.unwrap() >= 0.0 && (0.0..=1.0).contains(&m.mre) && m.mpe >= 0.0);
        assert!(run_episode(&Scenario { planner: PlannerKind::Ours, ..sc }, None, &EpisodeOptions::default()).is_err());
    }

    #[test]
    fn empty_benchmark() {
        let r = run_benchmark(&Scenario::default(), &[2], &[], &[0, 1], None, 2).unwrap();
        assert!(r.cells.is_empty());
    }

    #[test]
    fn benchmark_shares_seeds() {
        let mut t = Scenario::default();
        t.episode_steps = 3;
        let r = run_benchmark(&t, &[2], &[PlannerKind::Rrt, PlannerKind::Rrt], &[4, 9], None, 2).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert_eq!(r.cells[0].seeds, r.cells[1].seeds);
        assert_eq!(r.cells[0].runs, r.cells[1].runs);
        assert!(r.cells[0].mean_msd.is_some());
    }
}
