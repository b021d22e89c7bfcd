//! Receding-horizon trajectory optimization.
//!
//! Decision variables are the robot controls only; states come from exact
//! rollout. The objective is a goal-tracking term, the interaction cost and a
//! heavily weighted safety slack on the first control. Control-norm bounds
//! are handled by projection and the per-step speed bound by an augmented
//! Lagrangian outer loop around a projected-gradient inner solver.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::EllipseConstraint;
use crate::dynamics::{
    clamp_norm, rollout_robot_unchecked, HumanState, RobotControl, RobotState, DEFAULT_A_MAX,
    DEFAULT_DT, DEFAULT_V_H_MAX, DEFAULT_V_R_MAX,
};
use crate::interaction::{j_int_with_targets, unconditioned_targets};
use crate::predictor::{log_density, InteractionHistory, Predictor};
use crate::reachability::{multi_agent_margin, multi_agent_value, SafetyField};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStart {
    None,
    NoInteraction,
    NoInteractionNoSafety,
    CheapPredictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMethod {
    AllWithinRadius,
    ClosestWithinRadius,
    ForwardReachable,
    /// Every human, regardless of distance.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub method: AttentionMethod,
    /// Radius in metres; may be infinite (written as `"inf"`).
    #[serde(with = "radius_serde")]
    pub d_att: f64,
}

/// JSON has no infinity, so non-finite radii travel as strings.
mod radius_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { method: AttentionMethod::AllWithinRadius, d_att: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Infinity norm of the projected gradient step.
    pub grad_tol: f64,
    /// Allowed speed excess in m/s.
    pub constraint_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_outer: 20, max_inner: 200, grad_tol: 1e-4, constraint_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub lambda_g: f64,
    pub lambda_int: f64,
    pub lambda_eta: f64,
    pub horizon_steps: usize,
    pub dt: f64,
    /// Safety constraint binds once the multi-agent value drops to this level.
    pub epsilon: f64,
    pub a_max: f64,
    pub v_r_max: f64,
    /// Human speed bound assumed by the safety constraint.
    pub v_h_max: f64,
    pub warm_start: WarmStart,
    pub attention: AttentionConfig,
    pub solver: SolverConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            lambda_g: 1.0,
            lambda_int: 1.0,
            lambda_eta: 1000.0,
            horizon_steps: 12,
            dt: DEFAULT_DT,
            epsilon: 0.5,
            a_max: DEFAULT_A_MAX,
            v_r_max: DEFAULT_V_R_MAX,
            v_h_max: DEFAULT_V_H_MAX,
            warm_start: WarmStart::NoInteraction,
            attention: AttentionConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("lambda_g", self.lambda_g), ("lambda_int", self.lambda_int), ("lambda_eta", self.lambda_eta)];
        for (name, w) in nonneg {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        let pos = [("dt", self.dt), ("a_max", self.a_max), ("v_r_max", self.v_r_max), ("v_h_max", self.v_h_max)];
        for (name, x) in pos {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and positive, got {x}")));
            }
        }
        if self.horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps must be at least 1"));
        }
        if self.epsilon.is_nan() {
            return Err(Error::invalid("epsilon is NaN"));
        }
        if !(self.attention.d_att > 0.0) {
            return Err(Error::invalid(format!("d_att must be positive, got {}", self.attention.d_att)));
        }
        let s = &self.solver;
        if s.max_outer == 0 || s.max_inner == 0 || !(s.grad_tol > 0.0) || !(s.constraint_tol >= 0.0) {
            return Err(Error::invalid("solver caps must be positive and tolerances nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Ours,
    Decoupled,
    Mcts,
    Rrt,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub goal: f64,
    pub interaction: f64,
    pub slack: f64,
    /// Ellipse-avoidance penalty (decoupled baseline only).
    pub avoidance: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.goal + self.interaction + self.slack + self.avoidance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub planner: PlannerKind,
    /// Inner iterations of the final solve.
    pub iterations: usize,
    pub warm_start_iterations: usize,
    pub cost: CostBreakdown,
    pub objective: f64,
    pub safety_active: bool,
    pub converged: bool,
    /// Largest speed excess over the horizon (m/s).
    pub speed_violation: f64,
    /// Human-mode log-likelihood terms per interaction-cost evaluation.
    pub jint_terms: usize,
    pub attention: Vec<usize>,
    /// Warm start failed and fell back to zeros, or RRT* fell back to a straight line.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub controls: Vec<RobotControl>,
    pub states: Vec<RobotState>,
    pub eta: f64,
    pub stats: PlanStats,
}

pub fn attention_filter(cfg: &AttentionConfig, planner: &PlannerConfig, robot: &RobotState, humans: &[HumanState]) -> Vec<usize> {
    let dist = |h: &HumanState| (h.pos() - robot.pos()).norm();
    match cfg.method {
        AttentionMethod::Disabled => (0..humans.len()).collect(),
        AttentionMethod::AllWithinRadius => (0..humans.len()).filter(|&k| dist(&humans[k]) <= cfg.d_att).collect(),
        AttentionMethod::ClosestWithinRadius => {
            let mut best: Option<(usize, f64)> = None;
            for (k, h) in humans.iter().enumerate() {
                let d = dist(h);
                if d <= cfg.d_att && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((k, d));
                }
            }
            best.map(|(k, _)| vec![k]).unwrap_or_default()
        }
        AttentionMethod::ForwardReachable => {
            let t_h = planner.horizon_steps as f64 * planner.dt;
            let radius = (planner.v_r_max + planner.v_h_max) * t_h;
            (0..humans.len()).filter(|&k| dist(&humans[k]) <= radius).collect()
        }
    }
}

/// One planning instance. The attention set and the robot-free interaction
/// targets are fixed when the problem is built.
#[derive(Clone)]
pub struct Problem<'a> {
    pub robot: RobotState,
    pub goal: RobotState,
    pub history: InteractionHistory,
    pub humans: Vec<HumanState>,
    pub field: Option<&'a dyn SafetyField>,
    pub predictor: Arc<dyn Predictor>,
    pub cfg: PlannerConfig,
    pub attention: Vec<usize>,
    pub safety_active: bool,
    pub ellipses: Vec<EllipseConstraint>,
    pub ellipse_weight: f64,
    targets: Vec<Vec<Vec<Vec2>>>,
}

pub fn build_problem<'a>(
    goal: &RobotState,
    history: &InteractionHistory,
    field: Option<&'a dyn SafetyField>,
    cfg: &PlannerConfig,
    predictor: Arc<dyn Predictor>,
) -> Result<Problem<'a>> {
    cfg.validate()?;
    history.validate()?;
    let robot = *history.robot();
    let humans = history.humans();
    let attention = attention_filter(&cfg.attention, cfg, &robot, &humans);
    let safety_active = match field {
        Some(v) if !humans.is_empty() => multi_agent_value(v, &robot, &humans).value <= cfg.epsilon,
        _ => false,
    };
    let targets = if cfg.lambda_int > 0.0 {
        unconditioned_targets(history, predictor.as_ref(), &attention, cfg.horizon_steps)?
    } else {
        Vec::new()
    };
    Ok(Problem {
        robot,
        goal: *goal,
        history: history.clone(),
        humans,
        field,
        predictor,
        cfg: *cfg,
        attention,
        safety_active,
        ellipses: Vec::new(),
        ellipse_weight: 0.0,
        targets,
    })
}

struct Eval {
    cost: CostBreakdown,
    /// Speed constraint values `|v_t|² − v_max²` for t = 1..T.
    speed: Vec<f64>,
    grad_obj: Option<Vec<f64>>,
    states: Vec<RobotState>,
    eta: f64,
}

impl Problem<'_> {
    fn interaction_active(&self) -> bool {
        self.cfg.lambda_int > 0.0 && !self.attention.is_empty()
    }

    fn safety_applies(&self) -> bool {
        self.safety_active && self.field.is_some() && !self.humans.is_empty()
    }

    pub fn jint_terms(&self) -> usize {
        if self.interaction_active() {
            self.attention.len() * self.predictor.num_modes()
        } else {
            0
        }
    }

    /// Problem variant with the interaction cost removed and, optionally,
    /// the safety constraint dropped.
    pub fn without_interaction(&self, keep_safety: bool) -> Problem<'_> {
        let mut p = self.clone();
        p.cfg.lambda_int = 0.0;
        p.targets.clear();
        if !keep_safety {
            p.safety_active = false;
            p.field = None;
        }
        p
    }

    /// Problem variant with a different prediction model.
    pub fn with_predictor(&self, predictor: Arc<dyn Predictor>) -> Result<Problem<'_>> {
        let mut p = self.clone();
        p.targets = if p.cfg.lambda_int > 0.0 {
            unconditioned_targets(&p.history, predictor.as_ref(), &p.attention, p.cfg.horizon_steps)?
        } else {
            Vec::new()
        };
        p.predictor = predictor;
        Ok(p)
    }

    /// Objective of a control sequence with the optimal slack.
    pub fn objective(&self, u: &[RobotControl]) -> Result<f64> {
        Ok(self.evaluate(u, false)?.cost.total())
    }

    pub fn cost_breakdown(&self, u: &[RobotControl]) -> Result<CostBreakdown> {
        Ok(self.evaluate(u, false)?.cost)
    }

    /// Largest speed excess along the rollout of `u`.
    pub fn speed_violation(&self, u: &[RobotControl]) -> f64 {
        let states = rollout_robot_unchecked(&self.robot, u, self.cfg.dt);
        speed_excess(&states, self.cfg.v_r_max)
    }

    fn evaluate(&self, u: &[RobotControl], want_grad: bool) -> Result<Eval> {
        let cfg = &self.cfg;
        let t_len = u.len();
        let dt = cfg.dt;
        let states = rollout_robot_unchecked(&self.robot, u, dt);
        let mut cost = CostBreakdown::default();
        // Per-state gradient of the state-dependent terms, [px, py, vx, vy].
        let mut gx = vec![[0.0f64; 4]; t_len + 1];

        let w = cfg.lambda_g / t_len as f64;
        let g = self.goal;
        for (t, s) in states.iter().enumerate() {
            let d = [s.px - g.px, s.py - g.py, s.vx - g.vx, s.vy - g.vy];
            cost.goal += w * d.iter().map(|x| x * x).sum::<f64>();
            for i in 0..4 {
                gx[t][i] += 2.0 * w * d[i];
            }
        }
        if !cost.goal.is_finite() {
            return Err(Error::NonFiniteObjective { term: "goal" });
        }

        if self.ellipse_weight > 0.0 {
            for e in &self.ellipses {
                let Some(s) = states.get(e.timestep) else { continue };
                let (viol, grad) = e.violation(s.pos());
                if viol > 0.0 {
                    cost.avoidance += self.ellipse_weight * viol * viol;
                    gx[e.timestep][0] += 2.0 * self.ellipse_weight * viol * grad.x;
                    gx[e.timestep][1] += 2.0 * self.ellipse_weight * viol * grad.y;
                }
            }
            if !cost.avoidance.is_finite() {
                return Err(Error::NonFiniteObjective { term: "avoidance" });
            }
        }

        let mut grad_u = vec![0.0; 2 * t_len];
        if self.interaction_active() {
            if want_grad {
                let r = j_int_with_targets(u, &self.history, self.predictor.as_ref(), &self.attention, &self.targets)?;
                cost.interaction = cfg.lambda_int * r.value;
                for (o, gi) in grad_u.iter_mut().zip(&r.gradient) {
                    *o += cfg.lambda_int * gi;
                }
            } else {
                cost.interaction = cfg.lambda_int * self.j_int_value(u)?;
            }
            if !cost.interaction.is_finite() {
                return Err(Error::NonFiniteObjective { term: "interaction" });
            }
        }

        let mut eta = 0.0;
        if self.safety_applies() {
            let field = self.field.expect("checked by safety_applies");
            let (g, dg) = multi_agent_margin(field, &self.robot, &self.humans, &u[0], dt, cfg.v_h_max);
            eta = (-g).max(0.0);
            cost.slack = cfg.lambda_eta * eta * eta;
            grad_u[0] -= 2.0 * cfg.lambda_eta * eta * dg.x;
            grad_u[1] -= 2.0 * cfg.lambda_eta * eta * dg.y;
            if !cost.slack.is_finite() {
                return Err(Error::NonFiniteObjective { term: "slack" });
            }
        }

        let speed: Vec<f64> = states[1..].iter().map(|s| s.vx * s.vx + s.vy * s.vy - cfg.v_r_max * cfg.v_r_max).collect();
        let grad_obj = want_grad.then(|| {
            backprop(&gx, dt, &mut grad_u);
            grad_u
        });
        Ok(Eval { cost, speed, grad_obj, states, eta })
    }

    /// Cost terms, rolled-out states and optimal slack of `u`.
    pub(crate) fn terms(&self, u: &[RobotControl]) -> Result<(CostBreakdown, Vec<RobotState>, f64)> {
        let e = self.evaluate(u, false)?;
        Ok((e.cost, e.states, e.eta))
    }

    pub(crate) fn safety_field(&self) -> Option<&dyn SafetyField> {
        self.safety_applies().then_some(self.field).flatten()
    }

    fn j_int_value(&self, u: &[RobotControl]) -> Result<f64> {
        let pred = self.predictor.predict(&self.history, Some(u), u.len())?;
        let mut total = 0.0;
        for (&k, modes) in self.attention.iter().zip(&self.targets) {
            for target in modes {
                total -= log_density(&pred, k, target)?;
            }
        }
        Ok(total)
    }
}

/// Adds the control gradient of a sum of per-state costs with state
/// gradients `gx` (index 0 is the fixed initial state) to `grad_u`.
fn backprop(gx: &[[f64; 4]], dt: f64, grad_u: &mut [f64]) {
    let t_len = gx.len() - 1;
    let mut lam = gx[t_len];
    for t in (0..t_len).rev() {
        // d x_{t+1} / d u_t = [½dt² I; dt I]
        grad_u[2 * t] += 0.5 * dt * dt * lam[0] + dt * lam[2];
        grad_u[2 * t + 1] += 0.5 * dt * dt * lam[1] + dt * lam[3];
        // λ_t = gx_t + Aᵀ λ_{t+1}
        lam = [gx[t][0] + lam[0], gx[t][1] + lam[1], gx[t][2] + dt * lam[0] + lam[2], gx[t][3] + dt * lam[1] + lam[3]];
    }
}

fn speed_excess(states: &[RobotState], v_max: f64) -> f64 {
    states[1..].iter().map(|s| (s.speed() - v_max).max(0.0)).fold(0.0, f64::max)
}

fn project(z: &mut [f64], a_max: f64) {
    for c in z.chunks_exact_mut(2) {
        let v = clamp_norm(Vec2::new(c[0], c[1]), a_max);
        c[0] = v.x;
        c[1] = v.y;
    }
}

fn to_controls(z: &[f64]) -> Vec<RobotControl> {
    z.chunks_exact(2).map(|c| RobotControl::new(c[0], c[1])).collect()
}

fn from_controls(u: &[RobotControl]) -> Vec<f64> {
    u.iter().flat_map(|c| [c.ax, c.ay]).collect()
}

/// Augmented-Lagrangian merit of the speed constraints, with its gradient
/// added into `grad` when given.
fn speed_merit(eval: &Eval, mult: &[f64], rho: f64, dt: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut merit = 0.0;
    let mut gx = grad.is_some().then(|| vec![[0.0f64; 4]; eval.states.len()]);
    for (t, (&c, &l)) in eval.speed.iter().zip(mult).enumerate() {
        let s = (l + rho * c).max(0.0);
        merit += (s * s - l * l) / (2.0 * rho);
        if let Some(gx) = gx.as_mut() {
            let st = &eval.states[t + 1];
            gx[t + 1][2] += 2.0 * s * st.vx;
            gx[t + 1][3] += 2.0 * s * st.vy;
        }
    }
    if let (Some(gx), Some(grad)) = (gx, grad) {
        backprop(&gx, dt, grad);
    }
    merit
}

struct InnerResult {
    z: Vec<f64>,
    iterations: usize,
    converged: bool,
    /// Stopped because the merit stopped decreasing.
    stalled: bool,
}

const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-6;
const STEP_MAX: f64 = 1e6;
const NONMONOTONE_MEMORY: usize = 10;
/// Relative decrease of the nonmonotone reference over `NONMONOTONE_MEMORY`
/// iterations below which the inner solve stops.
const STALL: f64 = 1e-9;

fn inner_solve(problem: &Problem, z0: Vec<f64>, mult: &[f64], rho: f64, max_iter: usize) -> Result<InnerResult> {
    let cfg = &problem.cfg;
    let merit_of = |z: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let u = to_controls(z);
        let mut e = problem.evaluate(&u, want_grad)?;
        let mut g = e.grad_obj.take();
        let m = e.cost.total() + speed_merit(&e, mult, rho, cfg.dt, g.as_deref_mut());
        Ok((m, g))
    };
    let mut z = z0;
    let (mut f, g0) = merit_of(&z, true)?;
    let mut g = g0.expect("gradient requested");
    let mut step = 1.0 / g.iter().map(|x| x.abs()).fold(1.0, f64::max);
    // Nonmonotone reference: the largest of the last few merit values.
    let mut recent = std::collections::VecDeque::from([f]);
    let f_ref = |r: &std::collections::VecDeque<f64>| r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Reference value after each iteration, for the stall test.
    let mut history = vec![f];
    for it in 0..max_iter {
        let mut pg = z.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>();
        project(&mut pg, cfg.a_max);
        let pg_norm = pg.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = f.abs().max(1.0);
        if pg_norm <= cfg.solver.grad_tol * scale {
            return Ok(InnerResult { z, iterations: it, converged: true, stalled: false });
        }
        if it >= NONMONOTONE_MEMORY && history[history.len() - NONMONOTONE_MEMORY] - f_ref(&recent) <= STALL * scale {
            return Ok(InnerResult { z, iterations: it, converged: false, stalled: true });
        }
        let mut d: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        project(&mut d, cfg.a_max);
        d.iter_mut().zip(&z).for_each(|(di, zi)| *di -= zi);
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let reference = f_ref(&recent);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let (ft, _) = merit_of(&trial, false)?;
            if ft.is_finite() && ft <= reference + ARMIJO * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            return Ok(InnerResult { z, iterations: it + 1, converged: false, stalled: true });
        };
        let (_, gt) = merit_of(&trial, true)?;
        let gt = gt.expect("gradient requested");
        let sy: f64 = trial.iter().zip(&z).zip(gt.iter().zip(&g)).map(|((a, b), (c, e))| (a - b) * (c - e)).sum();
        let ss: f64 = trial.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
        step = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX };
        z = trial;
        g = gt;
        f = ft;
        if recent.len() == NONMONOTONE_MEMORY {
            recent.pop_front();
        }
        recent.push_back(f);
        history.push(f_ref(&recent));
    }
    Ok(InnerResult { z, iterations: max_iter, converged: false, stalled: false })
}

/// Solves `problem` from `warm` (zero controls when absent).
pub fn solve(problem: &Problem, warm: Option<&[RobotControl]>) -> Result<Plan> {
    let cfg = &problem.cfg;
    let t_len = cfg.horizon_steps;
    let mut z = match warm {
        Some(w) => {
            if w.len() != t_len {
                return Err(Error::invalid(format!("warm start has {} controls, horizon is {t_len}", w.len())));
            }
            if w.iter().any(|c| !c.ax.is_finite() || !c.ay.is_finite()) {
                return Err(Error::invalid("warm start contains non-finite controls"));
            }
            from_controls(w)
        }
        None => vec![0.0; 2 * t_len],
    };
    project(&mut z, cfg.a_max);

    let tol = cfg.solver.constraint_tol;
    let score = |z: &[f64]| -> Result<(f64, f64)> {
        let u = to_controls(z);
        let e = problem.evaluate(&u, false)?;
        Ok((e.cost.total(), speed_excess(&e.states, cfg.v_r_max)))
    };
    let (obj0, viol0) = score(&z)?;
    // Best point so far, preferring feasible ones.
    let mut best = (z.clone(), obj0, viol0);
    let better = |cand: &(f64, f64), best: &(Vec<f64>, f64, f64)| {
        let (feas_c, feas_b) = (cand.1 <= tol, best.2 <= tol);
        match (feas_c, feas_b) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => cand.0 < best.1,
            (false, false) => cand.1 < best.2,
        }
    };

    let mut mult = vec![0.0; t_len];
    let mut rho = 10.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_viol = viol0;
    for _ in 0..cfg.solver.max_outer {
        let r = inner_solve(problem, z, &mult, rho, cfg.solver.max_inner)?;
        iterations += r.iterations;
        z = r.z;
        let (obj, viol) = score(&z)?;
        log::trace!("outer: inner {} converged {} objective {obj:.6} violation {viol:.3e} rho {rho:.0e}", r.iterations, r.converged);
        if better(&(obj, viol), &best) {
            best = (z.clone(), obj, viol);
        }
        if viol <= tol && (r.converged || r.stalled) {
            converged = r.converged;
            break;
        }
        let e = problem.evaluate(&to_controls(&z), false)?;
        for (l, c) in mult.iter_mut().zip(&e.speed) {
            *l = (*l + rho * c).max(0.0);
        }
        if viol > tol && viol > 0.25 * prev_viol {
            rho *= 10.0;
        }
        prev_viol = viol;
    }

    let controls = to_controls(&best.0);
    let e = problem.evaluate(&controls, false)?;
    // The returned plan may not be the last iterate; only report convergence
    // when it is feasible.
    let converged = converged && best.2 <= tol;
    Ok(Plan {
        stats: PlanStats {
            planner: PlannerKind::Ours,
            iterations,
            warm_start_iterations: 0,
            cost: e.cost,
            objective: e.cost.total(),
            safety_active: problem.safety_active,
            converged,
            speed_violation: best.2,
            jint_terms: problem.jint_terms(),
            attention: problem.attention.clone(),
            fallback: false,
        },
        controls,
        states: e.states,
        eta: e.eta,
    })
}

/// Initial guess for `problem`, with the inner iterations spent on it and a
/// flag set when the warm-start solve failed and zeros were used instead.
pub fn warm_start(strategy: WarmStart, problem: &Problem) -> (Vec<RobotControl>, usize, bool) {
    let zeros = vec![RobotControl::ZERO; problem.cfg.horizon_steps];
    let attempt = match strategy {
        WarmStart::None => return (zeros, 0, false),
        WarmStart::NoInteraction => solve(&problem.without_interaction(true), None),
        WarmStart::NoInteractionNoSafety => solve(&problem.without_interaction(false), None),
        WarmStart::CheapPredictor => {
            problem.with_predictor(problem.predictor.simplified()).and_then(|p| solve(&p, None))
        }
    };
    match attempt {
        Ok(plan) => (plan.controls, plan.stats.iterations, false),
        Err(e) => {
            log::warn!("warm start {strategy:?} failed: {e}; using zero controls");
            (zeros, 0, true)
        }
    }
}

/// Solves `problem` after warm starting it with the configured strategy.
pub fn solve_with_warm_start(problem: &Problem) -> Result<Plan> {
    let (init, ws_iters, degraded) = warm_start(problem.cfg.warm_start, problem);
    let mut plan = solve(problem, Some(&init))?;
    plan.stats.warm_start_iterations = ws_iters;
    plan.stats.fallback = degraded;
    Ok(plan)
}

/// One receding-horizon step: the first control to execute and the full plan.
pub fn plan_step(
    goal: &RobotState,
    history: &InteractionHistory,
    field: Option<&dyn SafetyField>,
    cfg: &PlannerConfig,
    predictor: Arc<dyn Predictor>,
) -> Result<(RobotControl, Plan)> {
    let problem = build_problem(goal, history, field, cfg, predictor)?;
    let plan = solve_with_warm_start(&problem)?;
    let first = first_control(&plan, cfg.a_max)?;
    Ok((first, plan))
}

pub(crate) fn first_control(plan: &Plan, a_max: f64) -> Result<RobotControl> {
    let u = plan.controls.first().copied().unwrap_or(RobotControl::ZERO);
    if !(u.ax.is_finite() && u.ay.is_finite()) {
        return Err(Error::NonFiniteObjective { term: "control" });
    }
    Ok(RobotControl::from_vec(clamp_norm(u.as_vec(), a_max)))
}
