//! Comparison planners: predict-then-avoid ellipses, Monte Carlo tree search
//! over a small action set, and RRT* with humans as static discs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    clamp_norm, limit_control_for_speed, relative_state, rollout_robot_unchecked, step_robot_unchecked, HumanState,
    RelativeState, RobotControl, RobotState,
};
use crate::planner::{build_problem, solve, CostBreakdown, Plan, PlanStats, PlannerConfig, PlannerKind, Problem};
use crate::predictor::{InteractionHistory, Predictor};
use crate::reachability::SafetyField;
use crate::{Error, Mat2, Result, Vec2};

/// Weight of the squared ellipse violation in the decoupled planner.
pub const ELLIPSE_WEIGHT: f64 = 1000.0;

/// Most modes per human turned into ellipses.
pub const TOP_MODES: usize = 5;

/// Keep-out ellipse for one step of the robot's plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseConstraint {
    pub center: Vec2,
    pub shape: Mat2,
    /// Index into the planned state sequence.
    pub timestep: usize,
}

impl EllipseConstraint {
    /// `(p−c)ᵀ shape⁻¹ (p−c)`; the constraint holds when this is at least 1.
    pub fn level(&self, p: Vec2) -> f64 {
        let d = p - self.center;
        d.dot(&(self.inverse() * d))
    }

    pub fn satisfied(&self, p: Vec2) -> bool {
        self.level(p) >= 1.0
    }

    /// `max(0, 1 − level)` and the derivative of `1 − level` in `p`.
    pub fn violation(&self, p: Vec2) -> (f64, Vec2) {
        let inv = self.inverse();
        let d = p - self.center;
        let level = d.dot(&(inv * d));
        ((1.0 - level).max(0.0), -(inv + inv.transpose()) * d)
    }

    fn inverse(&self) -> Mat2 {
        self.shape.try_inverse().unwrap_or_else(Mat2::zeros)
    }
}

/// Ellipses from the top `min(Z, 5)` modes of every human, one per mode and
/// planned step `t = 1..=T`. Position covariance accumulates the per-step
/// control covariance times `dt²`.
pub fn prediction_ellipses(pred: &crate::predictor::MultimodalPrediction, humans: &[HumanState], dt: f64) -> Vec<EllipseConstraint> {
    let mut out = Vec::new();
    for (k, modes) in pred.per_human.iter().enumerate() {
        let mut order: Vec<usize> = (0..modes.len()).collect();
        order.sort_by(|&a, &b| modes[b].weight.partial_cmp(&modes[a].weight).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for &i in order.iter().take(TOP_MODES) {
            let m = &modes[i];
            let mut p = humans[k].pos();
            let mut cov = Mat2::zeros();
            for (t, (mu, c)) in m.means.iter().zip(&m.covariances).enumerate() {
                p += mu * dt;
                cov += c * (dt * dt);
                out.push(EllipseConstraint { center: p, shape: cov, timestep: t + 1 });
            }
        }
    }
    out
}

/// Previous plan advanced by one step, padded with a zero control.
pub fn shift_plan(prev: &[RobotControl], horizon: usize) -> Vec<RobotControl> {
    let mut out: Vec<RobotControl> = prev.iter().skip(1).copied().take(horizon).collect();
    out.resize(horizon, RobotControl::ZERO);
    out
}

/// Decoupled baseline. Predictions are conditioned once on `prev_plan`
/// (the previous plan already shifted to start now) and then held fixed.
pub fn plan_decoupled(
    goal: &RobotState,
    history: &InteractionHistory,
    field: Option<&dyn SafetyField>,
    cfg: &PlannerConfig,
    predictor: Arc<dyn Predictor>,
    prev_plan: &[RobotControl],
) -> Result<Plan> {
    let cfg_no_int = PlannerConfig { lambda_int: 0.0, ..*cfg };
    let mut problem = build_problem(goal, history, field, &cfg_no_int, predictor.clone())?;
    if history.num_humans() > 0 {
        if prev_plan.len() != cfg.horizon_steps {
            return Err(Error::invalid(format!("previous plan has {} controls, horizon is {}", prev_plan.len(), cfg.horizon_steps)));
        }
        let pred = predictor.predict(history, Some(prev_plan), cfg.horizon_steps)?;
        problem.ellipses = prediction_ellipses(&pred, &problem.humans, cfg.dt);
        problem.ellipse_weight = ELLIPSE_WEIGHT;
    }
    let warm: Vec<RobotControl> = prev_plan.iter().map(|u| RobotControl::from_vec(clamp_norm(u.as_vec(), cfg.a_max))).collect();
    let warm = if problem.speed_violation(&warm) > 0.0 || warm.len() != cfg.horizon_steps { None } else { Some(warm) };
    let mut plan = solve(&problem, warm.as_deref())?;
    plan.stats.planner = PlannerKind::Decoupled;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub samples_per_node: usize,
    pub branching: usize,
    /// Tree depth; 0 means the planner horizon.
    pub depth: usize,
    /// Node expansions per planning call.
    pub max_expansions: usize,
    pub seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig { samples_per_node: 3, branching: 3, depth: 0, max_expansions: 60, seed: 0 }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_node == 0 || self.max_expansions == 0 {
            return Err(Error::invalid("MCTS samples_per_node and max_expansions must be positive"));
        }
        if !(1..=3).contains(&self.branching) {
            return Err(Error::invalid(format!("MCTS branching must be 1..=3, got {}", self.branching)));
        }
        Ok(())
    }
}

/// The three MCTS actions at `x`: coast, full thrust towards the goal
/// velocity, and braking.
pub fn mcts_actions(x: &RobotState, goal: &RobotState, cfg: &PlannerConfig) -> [RobotControl; 3] {
    let to_goal = goal.pos() - x.pos();
    let v_des = if to_goal.norm() > 0.0 { to_goal * (cfg.v_r_max / to_goal.norm()) } else { Vec2::zeros() };
    let thrust = clamp_norm((v_des - x.vel()) / cfg.dt, cfg.a_max);
    let brake = clamp_norm(-x.vel() / cfg.dt, cfg.a_max);
    [RobotControl::ZERO, RobotControl::from_vec(thrust), RobotControl::from_vec(brake)]
}

/// One sample of the MCTS cost: goal and interaction terms, plus the slack
/// needed against the sampled (rather than worst-case) next human positions.
fn sample_cost(problem: &Problem, u: &[RobotControl], pred: &crate::predictor::MultimodalPrediction, terms: &CostBreakdown, rng: &mut ChaCha8Rng) -> f64 {
    let base = terms.goal + terms.interaction;
    let mut drawn = Vec::with_capacity(pred.per_human.len());
    for modes in &pred.per_human {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = modes.len() - 1;
        for (i, m) in modes.iter().enumerate() {
            acc += m.weight;
            if r < acc {
                pick = i;
                break;
            }
        }
        let m = &modes[pick];
        let cov = m.covariances[0];
        let l = cov.cholesky().map(|c| c.l()).unwrap_or_else(Mat2::zeros);
        let z = Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        drawn.push(m.means[0] + l * z);
    }
    let Some(field) = problem.safety_field() else { return base };
    let dt = problem.cfg.dt;
    let x1 = step_robot_unchecked(&problem.robot, &u[0], dt);
    let mut g = f64::INFINITY;
    for (h, uh) in problem.humans.iter().zip(&drawn) {
        let rel = relative_state(&problem.robot, h);
        let next = RelativeState { prx: rel.prx + (uh.x - rel.vrx) * dt, pry: rel.pry + (uh.y - rel.vry) * dt, vrx: x1.vx, vry: x1.vy };
        g = g.min(field.sample(&next).value);
    }
    let eta = (-g).max(0.0);
    base + problem.cfg.lambda_eta * eta * eta
}

/// Mean and standard error of the sampled MCTS cost of `u`.
pub fn mcts_expected_cost(problem: &Problem, u: &[RobotControl], samples: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let (terms, _, _) = problem.terms(u)?;
    let pred = problem.predictor.predict(&problem.history, Some(u), u.len())?;
    let xs: Vec<f64> = (0..samples).map(|_| sample_cost(problem, u, &pred, &terms, rng)).collect();
    let mean = xs.iter().sum::<f64>() / samples as f64;
    let var = if samples > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64 } else { 0.0 };
    Ok((mean, (var / samples as f64).sqrt()))
}

#[derive(Debug, Clone)]
struct Node {
    prefix: Vec<RobotControl>,
    state: RobotState,
    value: f64,
    id: usize,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Node {
    // Max-heap on lowest value, then lowest id.
    fn cmp(&self, o: &Self) -> Ordering {
        o.value.total_cmp(&self.value).then(o.id.cmp(&self.id))
    }
}

/// Result of a tree search: the plan and the number of leaves in the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct MctsResult {
    pub plan: Plan,
    pub leaves: usize,
    pub nodes: usize,
}

/// Best-first search over action sequences, each scored by the sampled
/// objective of the sequence padded with coasting.
pub fn plan_mcts(
    goal: &RobotState,
    history: &InteractionHistory,
    field: Option<&dyn SafetyField>,
    mcts: &MctsConfig,
    cfg: &PlannerConfig,
    predictor: Arc<dyn Predictor>,
) -> Result<MctsResult> {
    mcts.validate()?;
    let problem = build_problem(goal, history, field, cfg, predictor)?;
    let h = cfg.horizon_steps;
    let depth = if mcts.depth == 0 { h } else { mcts.depth.min(h) };
    let mut rng = ChaCha8Rng::seed_from_u64(mcts.seed);
    let pad = |prefix: &[RobotControl]| {
        let mut u = prefix.to_vec();
        u.resize(h, RobotControl::ZERO);
        u
    };
    let score = |prefix: &[RobotControl], rng: &mut ChaCha8Rng| -> Result<f64> {
        Ok(mcts_expected_cost(&problem, &pad(prefix), mcts.samples_per_node, rng)?.0)
    };
    let root = Node { prefix: Vec::new(), state: problem.robot, value: score(&[], &mut rng)?, id: 0 };
    let mut best = (root.value, root.prefix.clone());
    let mut heap = BinaryHeap::from([root]);
    let mut nodes = 1;
    let mut leaves = 1;
    let mut expansions = 0;
    while expansions < mcts.max_expansions {
        let Some(node) = heap.pop() else { break };
        if node.prefix.len() >= depth {
            continue;
        }
        expansions += 1;
        leaves -= 1;
        for a in mcts_actions(&node.state, goal, cfg).iter().take(mcts.branching) {
            let a = limit_control_for_speed(&node.state, a, cfg.dt, cfg.a_max, cfg.v_r_max);
            let mut prefix = node.prefix.clone();
            prefix.push(a);
            let value = score(&prefix, &mut rng)?;
            if value < best.0 {
                best = (value, prefix.clone());
            }
            let state = step_robot_unchecked(&node.state, &a, cfg.dt);
            heap.push(Node { prefix, state, value, id: nodes });
            nodes += 1;
            leaves += 1;
        }
    }
    let controls = pad(&best.1);
    let (cost, states, eta) = problem.terms(&controls)?;
    let plan = Plan {
        stats: PlanStats {
            planner: PlannerKind::Mcts,
            iterations: expansions,
            warm_start_iterations: 0,
            cost,
            objective: cost.total(),
            safety_active: problem.safety_active,
            converged: true,
            speed_violation: problem.speed_violation(&controls),
            jint_terms: problem.jint_terms(),
            attention: problem.attention.clone(),
            fallback: false,
        },
        controls,
        states,
        eta,
    };
    Ok(MctsResult { plan, leaves, nodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtConfig {
    pub max_nodes: usize,
    /// Steering step (m).
    pub step_size: f64,
    pub goal_bias: f64,
    pub rewire_radius: f64,
    /// Disc radius around each human (m).
    pub obstacle_radius: f64,
    /// Sampling box margin around start and goal (m).
    pub sample_margin: f64,
    pub seed: u64,
}

impl Default for RrtConfig {
    fn default() -> Self {
        RrtConfig { max_nodes: 2000, step_size: 0.5, goal_bias: 0.1, rewire_radius: 1.5, obstacle_radius: 0.3, sample_margin: 3.0, seed: 0 }
    }
}

impl RrtConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("step_size", self.step_size), ("rewire_radius", self.rewire_radius), ("obstacle_radius", self.obstacle_radius)];
        for (name, x) in pos {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::invalid(format!("RRT* {name} must be positive, got {x}")));
            }
        }
        if self.max_nodes == 0 || !(0.0..=1.0).contains(&self.goal_bias) || !(self.sample_margin >= 0.0) {
            return Err(Error::invalid("RRT* needs max_nodes > 0, goal_bias in [0, 1] and sample_margin >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub pos: Vec2,
    pub parent: Option<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrtResult {
    pub plan: Plan,
    pub tree: Vec<TreeNode>,
    /// Waypoints from the robot to the goal.
    pub path: Vec<Vec2>,
    pub path_cost: f64,
}

fn segment_point_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + d * s - p).norm()
}

fn segment_free(a: Vec2, b: Vec2, obstacles: &[Vec2], r: f64) -> bool {
    obstacles.iter().all(|o| segment_point_distance(a, b, *o) >= r)
}

/// Grows an RRT* tree from `start` and returns it with the best path to
/// `goal`, if any.
pub fn rrt_star(start: Vec2, goal: Vec2, obstacles: &[Vec2], rrt: &RrtConfig) -> Result<(Vec<TreeNode>, Option<(Vec<Vec2>, f64)>)> {
    rrt.validate()?;
    let r = rrt.obstacle_radius;
    let mut tree = vec![TreeNode { pos: start, parent: None, cost: 0.0 }];
    if !segment_free(start, start, obstacles, r) || !segment_free(goal, goal, obstacles, r) {
        return Ok((tree, None));
    }
    let lo = start.inf(&goal) - Vec2::repeat(rrt.sample_margin);
    let hi = start.sup(&goal) + Vec2::repeat(rrt.sample_margin);
    let mut rng = ChaCha8Rng::seed_from_u64(rrt.seed);
    let mut attempts = 0;
    while tree.len() < rrt.max_nodes && attempts < 20 * rrt.max_nodes {
        attempts += 1;
        let sample = if rng.random::<f64>() < rrt.goal_bias {
            goal
        } else {
            Vec2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y))
        };
        let nearest = (0..tree.len())
            .min_by(|&a, &b| (tree[a].pos - sample).norm_squared().total_cmp(&(tree[b].pos - sample).norm_squared()))
            .expect("tree is never empty");
        let d = sample - tree[nearest].pos;
        let new = if d.norm() > rrt.step_size { tree[nearest].pos + d * (rrt.step_size / d.norm()) } else { sample };
        if !segment_free(tree[nearest].pos, new, obstacles, r) {
            continue;
        }
        let near: Vec<usize> = (0..tree.len()).filter(|&i| (tree[i].pos - new).norm() <= rrt.rewire_radius).collect();
        let mut parent = nearest;
        let mut cost = tree[nearest].cost + (new - tree[nearest].pos).norm();
        for &i in &near {
            let c = tree[i].cost + (new - tree[i].pos).norm();
            if c < cost && segment_free(tree[i].pos, new, obstacles, r) {
                parent = i;
                cost = c;
            }
        }
        let id = tree.len();
        tree.push(TreeNode { pos: new, parent: Some(parent), cost });
        for &i in &near {
            let c = cost + (tree[i].pos - new).norm();
            if c < tree[i].cost && segment_free(new, tree[i].pos, obstacles, r) {
                let delta = tree[i].cost - c;
                tree[i].parent = Some(id);
                // Propagate the improvement to the subtree.
                let mut stack = vec![i];
                tree[i].cost = c;
                while let Some(j) = stack.pop() {
                    for n in 0..tree.len() {
                        if tree[n].parent == Some(j) && n != i {
                            tree[n].cost -= delta;
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, n) in tree.iter().enumerate() {
        let d = (goal - n.pos).norm();
        if d <= rrt.step_size && segment_free(n.pos, goal, obstacles, r) {
            let c = n.cost + d;
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((i, c));
            }
        }
    }
    let path = best.map(|(i, c)| {
        let mut pts = vec![goal];
        let mut cur = Some(i);
        while let Some(j) = cur {
            if pts.last() != Some(&tree[j].pos) {
                pts.push(tree[j].pos);
            }
            cur = tree[j].parent;
        }
        pts.reverse();
        (pts, c)
    });
    Ok((tree, path))
}

/// Point at arc length `s` along a polyline.
fn along(path: &[Vec2], mut s: f64) -> Vec2 {
    for w in path.windows(2) {
        let len = (w[1] - w[0]).norm();
        if s <= len && len > 0.0 {
            return w[0] + (w[1] - w[0]) * (s / len);
        }
        s -= len;
    }
    *path.last().expect("non-empty path")
}

/// Arc length of the point on `path` closest to `p`.
fn progress(path: &[Vec2], p: Vec2) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in path.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        let s = if len > 0.0 { ((p - w[0]).dot(&d) / (len * len)).clamp(0.0, 1.0) } else { 0.0 };
        let dist = (w[0] + d * s - p).norm();
        if dist < best.0 {
            best = (dist, acc + s * len);
        }
        acc += len;
    }
    best.1
}

/// Tracks `path` over the horizon: aim one step of travel ahead along the
/// path, limit the speed for stopping at the end, and invert the dynamics.
pub fn track_path(x0: &RobotState, path: &[Vec2], cfg: &PlannerConfig) -> Vec<RobotControl> {
    let total: f64 = path.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let end = *path.last().expect("non-empty path");
    let mut x = *x0;
    let mut out = Vec::with_capacity(cfg.horizon_steps);
    for _ in 0..cfg.horizon_steps {
        let s = progress(path, x.pos());
        let target = along(path, (s + cfg.v_r_max * cfg.dt).min(total));
        let to_target = target - x.pos();
        let remaining = (total - s).max(0.0) + (end - x.pos()).norm().min(cfg.v_r_max * cfg.dt);
        let cap = cfg.v_r_max.min((2.0 * cfg.a_max * remaining).sqrt());
        let v_des = clamp_norm(to_target / cfg.dt, cap);
        let u = RobotControl::from_vec(clamp_norm((v_des - x.vel()) / cfg.dt, cfg.a_max));
        let u = limit_control_for_speed(&x, &u, cfg.dt, cfg.a_max, cfg.v_r_max);
        x = step_robot_unchecked(&x, &u, cfg.dt);
        out.push(u);
    }
    out
}

/// RRT* baseline replanned from scratch around the humans' current
/// positions. Falls back to the straight line (flagged) when no path is found.
pub fn plan_rrtstar(state: &RobotState, goal: &RobotState, humans: &[HumanState], rrt: &RrtConfig, cfg: &PlannerConfig) -> Result<RrtResult> {
    cfg.validate()?;
    let obstacles: Vec<Vec2> = humans.iter().map(HumanState::pos).collect();
    let (tree, found) = rrt_star(state.pos(), goal.pos(), &obstacles, rrt)?;
    let fallback = found.is_none();
    let (path, path_cost) = found.unwrap_or_else(|| {
        let p = vec![state.pos(), goal.pos()];
        let c = (goal.pos() - state.pos()).norm();
        (p, c)
    });
    let controls = track_path(state, &path, cfg);
    let states = rollout_robot_unchecked(state, &controls, cfg.dt);
    let w = cfg.lambda_g / cfg.horizon_steps as f64;
    let goal_cost: f64 = states
        .iter()
        .map(|s| w * ((s.px - goal.px).powi(2) + (s.py - goal.py).powi(2) + (s.vx - goal.vx).powi(2) + (s.vy - goal.vy).powi(2)))
        .sum();
    let cost = CostBreakdown { goal: goal_cost, ..Default::default() };
    let speed_violation = states[1..].iter().map(|s| (s.speed() - cfg.v_r_max).max(0.0)).fold(0.0, f64::max);
    let plan = Plan {
        stats: PlanStats {
            planner: PlannerKind::Rrt,
            iterations: tree.len(),
            warm_start_iterations: 0,
            cost,
            objective: cost.total(),
            safety_active: false,
            converged: !fallback,
            speed_violation,
            jint_terms: 0,
            attention: Vec::new(),
            fallback,
        },
        controls,
        states,
        eta: 0.0,
    };
    Ok(RrtResult { plan, tree, path, path_cost })
}
