//! Multimodal human-trajectory prediction.
//!
//! A [`Predictor`] turns the interaction history (and optionally the robot's
//! planned controls) into one Gaussian mixture per human over that human's
//! future velocity commands, and must supply exact gradients of the mixture
//! log-density with respect to the robot's planned controls.
//!
//! [`ReferencePredictor`] is the concrete implementation: each mixture mode
//! is a goal hypothesis, and the mode mean is the rollout of a smooth
//! social-force law. Its derivatives are propagated forward through the
//! robot rollout and the human mean rollout, so they are exact.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    HumanControl, HumanState, RobotControl, RobotState, DEFAULT_DT, DEFAULT_V_H_MAX,
};
use crate::{Error, Mat2, Result, Vec2};

/// Softening length (m) added inside every distance of the force law.
pub const DISTANCE_SOFTENING: f64 = 1e-3;

/// Fraction of `v_h_max` below which the speed squash is the identity.
const SQUASH_KNEE: f64 = 0.8;

/// Time-aligned record of everything that happened up to `current_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionHistory {
    pub robot_states: Vec<RobotState>,
    pub robot_controls: Vec<RobotControl>,
    pub human_states: Vec<Vec<HumanState>>,
    pub human_controls: Vec<Vec<HumanControl>>,
    pub current_step: usize,
}

impl InteractionHistory {
    pub fn new(robot: RobotState, humans: &[HumanState]) -> Self {
        Self {
            robot_states: vec![robot],
            robot_controls: Vec::new(),
            human_states: humans.iter().map(|h| vec![*h]).collect(),
            human_controls: vec![Vec::new(); humans.len()],
            current_step: 0,
        }
    }

    /// Appends one step of executed controls and the states they produced.
    pub fn push(
        &mut self,
        robot_control: RobotControl,
        robot_next: RobotState,
        human_controls: &[HumanControl],
        human_next: &[HumanState],
    ) -> Result<()> {
        let n = self.num_humans();
        if human_controls.len() != n || human_next.len() != n {
            return Err(Error::invalid(format!(
                "history has {n} humans, got {} controls and {} states",
                human_controls.len(),
                human_next.len()
            )));
        }
        self.robot_controls.push(robot_control);
        self.robot_states.push(robot_next);
        for k in 0..n {
            self.human_controls[k].push(human_controls[k]);
            self.human_states[k].push(human_next[k]);
        }
        self.current_step += 1;
        Ok(())
    }

    pub fn num_humans(&self) -> usize {
        self.human_states.len()
    }

    pub fn robot(&self) -> &RobotState {
        self.robot_states.last().expect("history holds at least one robot state")
    }

    pub fn human(&self, k: usize) -> &HumanState {
        self.human_states[k].last().expect("history holds at least one state per human")
    }

    pub fn humans(&self) -> Vec<HumanState> {
        (0..self.num_humans()).map(|k| *self.human(k)).collect()
    }

    /// Most recent executed velocity of human `k`, zero before the first step.
    pub fn last_human_control(&self, k: usize) -> HumanControl {
        self.human_controls[k].last().copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.current_step;
        let aligned = self.robot_states.len() == t + 1
            && self.robot_controls.len() == t
            && self.human_states.iter().all(|s| s.len() == t + 1)
            && self.human_controls.iter().all(|c| c.len() == t)
            && self.human_states.len() == self.human_controls.len();
        if aligned {
            Ok(())
        } else {
            Err(Error::invalid("interaction history sequences are not time-aligned"))
        }
    }
}

/// One mixture component: a sequence of per-step Gaussians over a human's
/// velocity command.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode {
    pub weight: f64,
    pub means: Vec<Vec2>,
    pub covariances: Vec<Mat2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrediction {
    pub per_human: Vec<Vec<GaussianMode>>,
    pub horizon: usize,
    pub conditioned: bool,
}

impl MultimodalPrediction {
    pub fn num_humans(&self) -> usize {
        self.per_human.len()
    }

    fn modes(&self, k: usize) -> Result<&[GaussianMode]> {
        self.per_human
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("human index {k} out of range ({} humans)", self.per_human.len())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub z_modes: usize,
    /// Per-step control standard deviation (m/s).
    pub sigma: f64,
    pub v_pref: f64,
    pub repulsion_strength: f64,
    pub repulsion_range: f64,
    pub robot_repulsion_strength: f64,
    pub robot_repulsion_range: f64,
    pub goal_perturbation_radius: f64,
    pub v_h_max: f64,
    pub dt: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            z_modes: 3,
            sigma: 0.5,
            v_pref: 1.3,
            repulsion_strength: 1.5,
            repulsion_range: 0.5,
            robot_repulsion_strength: 2.0,
            robot_repulsion_range: 1.0,
            goal_perturbation_radius: 2.0,
            v_h_max: DEFAULT_V_H_MAX,
            dt: DEFAULT_DT,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("repulsion_range", self.repulsion_range),
            ("robot_repulsion_range", self.robot_repulsion_range),
            ("v_h_max", self.v_h_max),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("predictor {name} must be positive, got {v}")));
            }
        }
        if self.z_modes == 0 {
            return Err(Error::invalid("predictor needs at least one mode"));
        }
        Ok(())
    }
}

/// Contract every prediction model must meet to be used by the planner.
pub trait Predictor: Send + Sync {
    fn num_modes(&self) -> usize;

    /// Mixture over future human controls. `robot_future`, when present,
    /// conditions the prediction on the robot's planned controls and must
    /// have length `horizon`; `None` yields the robot-free prediction.
    fn predict(
        &self,
        history: &InteractionHistory,
        robot_future: Option<&[RobotControl]>,
        horizon: usize,
    ) -> Result<MultimodalPrediction>;

    /// For each target sequence, the conditioned mixture log-density of human
    /// `human` and its gradient with respect to `robot_future` flattened as
    /// `[ax_0, ay_0, ax_1, ...]`.
    fn log_density_grads(
        &self,
        history: &InteractionHistory,
        robot_future: &[RobotControl],
        human: usize,
        targets: &[&[Vec2]],
    ) -> Result<Vec<(f64, Vec<f64>)>>;

    /// Cheaper variant of the same model used for warm starting.
    fn simplified(&self) -> Arc<dyn Predictor>;
}

/// Mixture log-density of `u_seq` under human `k`'s prediction.
pub fn log_density(pred: &MultimodalPrediction, k: usize, u_seq: &[Vec2]) -> Result<f64> {
    let modes = pred.modes(k)?;
    if u_seq.len() != pred.horizon {
        return Err(Error::invalid(format!(
            "control sequence length {} does not match horizon {}",
            u_seq.len(),
            pred.horizon
        )));
    }
    let terms: Vec<f64> = modes
        .iter()
        .map(|m| {
            let ll: f64 = u_seq
                .iter()
                .zip(m.means.iter().zip(&m.covariances))
                .map(|(u, (mu, cov))| gaussian_log_pdf(u, mu, cov))
                .sum();
            m.weight.ln() + ll
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Per-mode mean control sequences of human `k`.
pub fn mode_means(pred: &MultimodalPrediction, k: usize) -> Result<Vec<Vec<Vec2>>> {
    Ok(pred.modes(k)?.iter().map(|m| m.means.clone()).collect())
}

/// Weight-averaged mean control sequence of human `k`.
pub fn mixture_mean(pred: &MultimodalPrediction, k: usize) -> Result<Vec<Vec2>> {
    let modes = pred.modes(k)?;
    let mut out = vec![Vec2::zeros(); pred.horizon];
    for m in modes {
        for (o, mu) in out.iter_mut().zip(&m.means) {
            *o += mu * m.weight;
        }
    }
    Ok(out)
}

/// Gradient of `log_density(predict(history, robot_future), k, u_seq)` with
/// respect to the flattened robot controls.
pub fn grad_log_density_wrt_robot(
    predictor: &dyn Predictor,
    history: &InteractionHistory,
    robot_future: &[RobotControl],
    k: usize,
    u_seq: &[Vec2],
) -> Result<Vec<f64>> {
    let mut out = predictor.log_density_grads(history, robot_future, k, &[u_seq])?;
    Ok(out.pop().map(|(_, g)| g).unwrap_or_default())
}

pub(crate) fn gaussian_log_pdf(u: &Vec2, mu: &Vec2, cov: &Mat2) -> f64 {
    let det = cov.determinant();
    let inv = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let d = u - mu;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * d.dot(&(inv * d))
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Analytic goal-hypothesis mixture predictor.
#[derive(Debug, Clone)]
pub struct ReferencePredictor {
    cfg: PredictorConfig,
    goals: Vec<Vec2>,
}

/// Per-mode mean rollout, with `dmu[t][c] = d mu_t / d U_c` when requested.
struct ModeRollout {
    means: Vec<Vec2>,
    dmu: Option<Vec<Vec<Vec2>>>,
}

impl ReferencePredictor {
    /// `goals[k]` is the destination of human `k`, used as the first mode.
    pub fn new(cfg: PredictorConfig, goals: Vec<Vec2>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, goals })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn goals(&self) -> &[Vec2] {
        &self.goals
    }

    /// Goal hypothesis of mode `i` for human `k`.
    pub fn mode_goal(&self, k: usize, i: usize) -> Vec2 {
        let g = self.goals[k];
        if i == 0 {
            return g;
        }
        let others = (self.cfg.z_modes - 1) as f64;
        let theta = 2.0 * std::f64::consts::PI * (i - 1) as f64 / others;
        g + Vec2::new(theta.cos(), theta.sin()) * self.cfg.goal_perturbation_radius
    }

    fn check(&self, history: &InteractionHistory, robot_future: Option<&[RobotControl]>, horizon: usize) -> Result<()> {
        if horizon == 0 {
            return Err(Error::invalid("prediction horizon must be at least 1"));
        }
        if let Some(u) = robot_future {
            if u.len() != horizon {
                return Err(Error::invalid(format!(
                    "robot future has {} controls, horizon is {horizon}",
                    u.len()
                )));
            }
        }
        if history.num_humans() != self.goals.len() {
            return Err(Error::invalid(format!(
                "history has {} humans but the predictor knows {} goals",
                history.num_humans(),
                self.goals.len()
            )));
        }
        if history.robot_states.is_empty() || history.human_states.iter().any(Vec::is_empty) {
            return Err(Error::invalid("history needs at least one state per agent"));
        }
        Ok(())
    }

    /// Robot positions at steps 0..horizon under `u` (the human's decision at
    /// step t sees the robot where it is at step t).
    fn robot_positions(history: &InteractionHistory, u: &[RobotControl], dt: f64) -> Vec<Vec2> {
        let mut x = *history.robot();
        let mut out = Vec::with_capacity(u.len());
        for uc in u {
            out.push(x.pos());
            x = crate::dynamics::step_robot_unchecked(&x, uc, dt);
        }
        out
    }

    fn mode_rollout(
        &self,
        history: &InteractionHistory,
        k: usize,
        goal: Vec2,
        robot: Option<&[Vec2]>,
        horizon: usize,
        with_jacobian: bool,
    ) -> ModeRollout {
        let c = &self.cfg;
        let dt = c.dt;
        let n_ctrl = 2 * horizon;
        let others: Vec<(Vec2, Vec2)> = (0..history.num_humans())
            .filter(|&j| j != k)
            .map(|j| (history.human(j).pos(), history.last_human_control(j).as_vec()))
            .collect();
        let use_robot = robot.is_some() && c.robot_repulsion_strength != 0.0;

        let mut p = history.human(k).pos();
        let mut jac_p = if with_jacobian { vec![Vec2::zeros(); n_ctrl] } else { Vec::new() };
        let mut means = Vec::with_capacity(horizon);
        let mut dmu_all = if with_jacobian { Vec::with_capacity(horizon) } else { Vec::new() };

        for t in 0..horizon {
            let (mut raw, mut d_raw_dp) = attraction(goal - p, c.v_pref);
            for (p0, v) in &others {
                let pj = p0 + v * (t as f64 * dt);
                let (f, m) = repulsion(p - pj, c.repulsion_strength, c.repulsion_range);
                raw += f;
                d_raw_dp += m;
            }
            let mut robot_jac = None;
            if use_robot {
                let pr = robot.unwrap()[t];
                let (f, m) = repulsion(p - pr, c.robot_repulsion_strength, c.robot_repulsion_range);
                raw += f;
                d_raw_dp += m;
                robot_jac = Some(m);
            }
            let (mu, squash_jac) = squash(raw, c.v_h_max);
            means.push(mu);

            if with_jacobian {
                let a = squash_jac * d_raw_dp;
                let mut dmu: Vec<Vec2> = jac_p.iter().map(|col| a * col).collect();
                if let Some(m) = robot_jac {
                    // d p_R,t / d u_s = (t - s - 1/2) dt^2 I for s < t.
                    let b = squash_jac * m;
                    for s in 0..t {
                        let w = (t - s) as f64 - 0.5;
                        let scale = w * dt * dt;
                        dmu[2 * s] -= b.column(0) * scale;
                        dmu[2 * s + 1] -= b.column(1) * scale;
                    }
                }
                for (col, d) in jac_p.iter_mut().zip(&dmu) {
                    *col += d * dt;
                }
                dmu_all.push(dmu);
            }
            p += mu * dt;
        }
        ModeRollout { means, dmu: with_jacobian.then_some(dmu_all) }
    }

    fn cov(&self) -> Mat2 {
        Mat2::identity() * (self.cfg.sigma * self.cfg.sigma)
    }
}

impl Predictor for ReferencePredictor {
    fn num_modes(&self) -> usize {
        self.cfg.z_modes
    }

    fn predict(
        &self,
        history: &InteractionHistory,
        robot_future: Option<&[RobotControl]>,
        horizon: usize,
    ) -> Result<MultimodalPrediction> {
        self.check(history, robot_future, horizon)?;
        let robot = robot_future.map(|u| Self::robot_positions(history, u, self.cfg.dt));
        let z = self.cfg.z_modes;
        let cov = self.cov();
        let per_human = (0..history.num_humans())
            .map(|k| {
                (0..z)
                    .map(|i| {
                        let r = self.mode_rollout(history, k, self.mode_goal(k, i), robot.as_deref(), horizon, false);
                        GaussianMode { weight: 1.0 / z as f64, means: r.means, covariances: vec![cov; horizon] }
                    })
                    .collect()
            })
            .collect();
        Ok(MultimodalPrediction { per_human, horizon, conditioned: robot_future.is_some() })
    }

    fn log_density_grads(
        &self,
        history: &InteractionHistory,
        robot_future: &[RobotControl],
        human: usize,
        targets: &[&[Vec2]],
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        let horizon = robot_future.len();
        self.check(history, Some(robot_future), horizon)?;
        if human >= history.num_humans() {
            return Err(Error::invalid(format!("human index {human} out of range")));
        }
        if let Some(bad) = targets.iter().find(|t| t.len() != horizon) {
            return Err(Error::invalid(format!("target length {} does not match horizon {horizon}", bad.len())));
        }
        let robot = Self::robot_positions(history, robot_future, self.cfg.dt);
        let z = self.cfg.z_modes;
        let rollouts: Vec<ModeRollout> = (0..z)
            .map(|i| self.mode_rollout(history, human, self.mode_goal(human, i), Some(&robot), horizon, true))
            .collect();

        let var = self.cfg.sigma * self.cfg.sigma;
        let log_norm = -(2.0 * std::f64::consts::PI * var).ln();
        let log_w = -(z as f64).ln();
        let n_ctrl = 2 * horizon;

        let out = targets
            .iter()
            .map(|u| {
                let mut terms = Vec::with_capacity(z);
                let mut grads = Vec::with_capacity(z);
                for r in &rollouts {
                    let dmu = r.dmu.as_ref().expect("jacobian requested");
                    let mut ll = log_w;
                    let mut g = vec![0.0; n_ctrl];
                    for t in 0..horizon {
                        let d = u[t] - r.means[t];
                        ll += log_norm - 0.5 * d.norm_squared() / var;
                        let s = d / var;
                        for (gc, col) in g.iter_mut().zip(&dmu[t]) {
                            *gc += s.dot(col);
                        }
                    }
                    terms.push(ll);
                    grads.push(g);
                }
                let value = log_sum_exp(&terms);
                let mut grad = vec![0.0; n_ctrl];
                for (ll, g) in terms.iter().zip(&grads) {
                    let w = (ll - value).exp();
                    for (o, gi) in grad.iter_mut().zip(g) {
                        *o += w * gi;
                    }
                }
                (value, grad)
            })
            .collect();
        Ok(out)
    }

    fn simplified(&self) -> Arc<dyn Predictor> {
        let mut cfg = self.cfg.clone();
        cfg.z_modes = 1;
        Arc::new(ReferencePredictor { cfg, goals: self.goals.clone() })
    }
}

/// Goal pull `v_pref * x / sqrt(|x|^2 + delta^2)` with `x = goal - p`, and its
/// derivative with respect to `p`.
fn attraction(x: Vec2, v_pref: f64) -> (Vec2, Mat2) {
    let d = (x.norm_squared() + DISTANCE_SOFTENING * DISTANCE_SOFTENING).sqrt();
    let f = x * (v_pref / d);
    let jac = -(Mat2::identity() / d - x * x.transpose() / (d * d * d)) * v_pref;
    (f, jac)
}

/// Exponential repulsion `a * exp(-d/b) * x / d` along `x = p - p_other`, and
/// its derivative with respect to `p`.
fn repulsion(x: Vec2, a: f64, b: f64) -> (Vec2, Mat2) {
    let d = (x.norm_squared() + DISTANCE_SOFTENING * DISTANCE_SOFTENING).sqrt();
    let e = a * (-d / b).exp();
    let f = x * (e / d);
    let xxt = x * x.transpose();
    let jac = (Mat2::identity() / d - xxt / (d * d * d) - xxt / (b * d * d)) * e;
    (f, jac)
}

/// Smooth radial speed limit. Identity up to `0.8 v_max`, then
/// `knee + w tanh((n - knee) / w)` with `w = v_max - knee`, which is C2 and
/// never exceeds `v_max`.
pub fn squash(v: Vec2, v_max: f64) -> (Vec2, Mat2) {
    let knee = SQUASH_KNEE * v_max;
    let n = v.norm();
    if n <= knee {
        return (v, Mat2::identity());
    }
    let w = v_max - knee;
    let th = ((n - knee) / w).tanh();
    let s = knee + w * th;
    let ds = 1.0 - th * th;
    let r = v / n;
    let ratio = s / n;
    let jac = Mat2::identity() * ratio + r * r.transpose() * (ds - ratio);
    (v * ratio, jac)
}

/// Wraps a predictor and counts calls, for tests and diagnostics.
pub struct CountingPredictor<P> {
    inner: P,
    conditioned: AtomicUsize,
    unconditioned: AtomicUsize,
    gradient: AtomicUsize,
}

impl<P: Predictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            conditioned: AtomicUsize::new(0),
            unconditioned: AtomicUsize::new(0),
            gradient: AtomicUsize::new(0),
        }
    }

    pub fn conditioned_calls(&self) -> usize {
        self.conditioned.load(Ordering::Relaxed)
    }

    pub fn unconditioned_calls(&self) -> usize {
        self.unconditioned.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient.load(Ordering::Relaxed)
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn num_modes(&self) -> usize {
        self.inner.num_modes()
    }

    fn predict(
        &self,
        history: &InteractionHistory,
        robot_future: Option<&[RobotControl]>,
        horizon: usize,
    ) -> Result<MultimodalPrediction> {
        let counter = if robot_future.is_some() { &self.conditioned } else { &self.unconditioned };
        counter.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(history, robot_future, horizon)
    }

    fn log_density_grads(
        &self,
        history: &InteractionHistory,
        robot_future: &[RobotControl],
        human: usize,
        targets: &[&[Vec2]],
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        self.gradient.fetch_add(1, Ordering::Relaxed);
        self.inner.log_density_grads(history, robot_future, human, targets)
    }

    fn simplified(&self) -> Arc<dyn Predictor> {
        self.inner.simplified()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lone_human() -> (ReferencePredictor, InteractionHistory) {
        let cfg = PredictorConfig { z_modes: 1, ..Default::default() };
        let p = ReferencePredictor::new(cfg, vec![Vec2::new(10.0, 0.0)]).unwrap();
        let h = InteractionHistory::new(RobotState::at_rest(1e6, 1e6), &[HumanState::new(0.0, 0.0)]);
        (p, h)
    }

    fn sup_diff(a: &MultimodalPrediction, b: &MultimodalPrediction) -> f64 {
        let mut m: f64 = 0.0;
        for (ha, hb) in a.per_human.iter().zip(&b.per_human) {
            for (ma, mb) in ha.iter().zip(hb) {
                for (x, y) in ma.means.iter().zip(&mb.means) {
                    m = m.max((x - y).amax());
                }
            }
        }
        m
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, z: usize, horizon: usize) -> (ReferencePredictor, InteractionHistory, Vec<RobotControl>) {
        let mut pt = || Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let humans: Vec<HumanState> = (0..n).map(|_| HumanState::from_vec(pt())).collect();
        let goals: Vec<Vec2> = (0..n).map(|_| pt()).collect();
        let r = pt();
        let robot = RobotState::new(r.x, r.y, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut history = InteractionHistory::new(robot, &humans);
        let hc: Vec<HumanControl> = (0..n).map(|_| HumanControl::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let next: Vec<HumanState> = humans.iter().zip(&hc).map(|(h, c)| HumanState::from_vec(h.pos() + c.as_vec() * 0.4)).collect();
        history.push(RobotControl::ZERO, robot, &hc, &next).unwrap();
        let u: Vec<RobotControl> = (0..horizon)
            .map(|_| RobotControl::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let cfg = PredictorConfig { z_modes: z, ..Default::default() };
        (ReferencePredictor::new(cfg, goals).unwrap(), history, u)
    }

    #[test]
    fn lone_human_walks_straight_to_goal() {
        let (p, h) = lone_human();
        let pred = p.predict(&h, None, 6).unwrap();
        for mu in &pred.per_human[0][0].means {
            assert_abs_diff_eq!(mu.x, 1.3, epsilon = 1e-6);
            assert_abs_diff_eq!(mu.y, 0.0, epsilon = 1e-12);
        }
        assert!(!pred.conditioned);
    }

    #[test]
    fn distant_robot_has_no_effect() {
        let (p, h) = lone_human();
        let u = vec![RobotControl::new(1.0, -1.0); 5];
        let c = p.predict(&h, Some(&u), 5).unwrap();
        let n = p.predict(&h, None, 5).unwrap();
        assert!(c.conditioned);
        assert!(sup_diff(&c, &n) < 1e-9);
        let target = mode_means(&n, 0).unwrap().remove(0);
        let g = grad_log_density_wrt_robot(&p, &h, &u, 0, &target).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, h, u) = random_instance(&mut rng, 3, 4, 5);
        let pred = p.predict(&h, Some(&u), 5).unwrap();
        for modes in &pred.per_human {
            assert_eq!(modes.len(), 4);
            assert!(modes.iter().all(|m| m.weight == 0.25));
            assert_abs_diff_eq!(modes.iter().map(|m| m.weight).sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_density_at_mean_is_normalizer() {
        let mode = GaussianMode {
            weight: 1.0,
            means: vec![Vec2::new(1.0, 0.0), Vec2::new(0.5, 0.5)],
            covariances: vec![Mat2::identity() * 0.25; 2],
        };
        let pred = MultimodalPrediction { per_human: vec![vec![mode.clone()]], horizon: 2, conditioned: true };
        let v = log_density(&pred, 0, &mode.means).unwrap();
        assert_abs_diff_eq!(v, -0.903166, epsilon = 1e-6);

        let half = GaussianMode { weight: 0.5, ..mode.clone() };
        let twin = MultimodalPrediction { per_human: vec![vec![half.clone(), half]], horizon: 2, conditioned: true };
        assert_abs_diff_eq!(log_density(&twin, 0, &mode.means).unwrap(), v, epsilon = 1e-12);

        let shifted: Vec<Vec2> = mode.means.iter().map(|m| m + Vec2::new(0.1, 0.0)).collect();
        assert!(log_density(&pred, 0, &shifted).unwrap() < v);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let (p, h) = lone_human();
        assert!(p.predict(&h, None, 0).is_err());
        assert!(p.predict(&h, Some(&[RobotControl::ZERO; 2]), 3).is_err());
        let pred = p.predict(&h, None, 3).unwrap();
        assert!(log_density(&pred, 1, &[Vec2::zeros(); 3]).is_err());
        assert!(log_density(&pred, 0, &[Vec2::zeros(); 2]).is_err());
        assert!(mode_means(&pred, 4).is_err());
    }

    #[test]
    fn mode_means_match_stored_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, h, _) = random_instance(&mut rng, 2, 3, 4);
        let pred = p.predict(&h, None, 4).unwrap();
        let means = mode_means(&pred, 1).unwrap();
        assert_eq!(means.len(), 3);
        for (m, mode) in means.iter().zip(&pred.per_human[1]) {
            assert_eq!(m, &mode.means);
        }
    }

    #[test]
    fn zero_robot_strength_makes_conditioning_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, h, u) = random_instance(&mut rng, 3, 2, 6);
        let cfg = PredictorConfig { robot_repulsion_strength: 0.0, ..p.config().clone() };
        let p = ReferencePredictor::new(cfg, p.goals().to_vec()).unwrap();
        let c = p.predict(&h, Some(&u), 6).unwrap();
        let n = p.predict(&h, None, 6).unwrap();
        assert_eq!(c.per_human, n.per_human);
        let target = mode_means(&n, 0).unwrap().remove(0);
        let g = grad_log_density_wrt_robot(&p, &h, &u, 0, &target).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn predicted_speeds_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (p, h, u) = random_instance(&mut rng, 4, 3, 8);
            let pred = p.predict(&h, Some(&u), 8).unwrap();
            for m in pred.per_human.iter().flatten() {
                assert!(m.means.iter().all(|mu| mu.norm() <= 2.5 + 1e-12));
            }
        }
    }

    #[test]
    fn squash_is_continuous_at_knee() {
        let below = squash(Vec2::new(2.0 - 1e-9, 0.0), 2.5).0;
        let above = squash(Vec2::new(2.0 + 1e-9, 0.0), 2.5).0;
        assert!((below - above).norm() < 1e-8);
        assert!(squash(Vec2::new(100.0, 3.0), 2.5).0.norm() <= 2.5);
    }

    // Central differences are the oracle; they share no code with the forward
    // accumulation beyond `predict` itself.
    fn fd_grad(p: &ReferencePredictor, h: &InteractionHistory, u: &[RobotControl], k: usize, target: &[Vec2]) -> Vec<f64> {
        let eps = 1e-5;
        let eval = |u: &[RobotControl]| {
            let pred = p.predict(h, Some(u), u.len()).unwrap();
            log_density(&pred, k, target).unwrap()
        };
        let mut g = Vec::new();
        for c in 0..2 * u.len() {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            if c % 2 == 0 {
                up[c / 2].ax += eps;
                dn[c / 2].ax -= eps;
            } else {
                up[c / 2].ay += eps;
                dn[c / 2].ay -= eps;
            }
            g.push((eval(&up) - eval(&dn)) / (2.0 * eps));
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for trial in 0..24 {
            let horizon = 2 + trial % 7;
            let z = [1, 2, 4][trial % 3];
            let (p, h, mut u) = random_instance(&mut rng, 2, z, horizon);
            // Bring the robot close enough to matter.
            let mut hist = h.clone();
            let hp = hist.human(0).pos();
            hist.robot_states.last_mut().unwrap().px = hp.x + rng.random_range(-1.5..1.5);
            hist.robot_states.last_mut().unwrap().py = hp.y + rng.random_range(-1.5..1.5);
            u.iter_mut().for_each(|c| *c = crate::dynamics::clamp_robot_control(c, 2.0));
            let k = trial % 2;
            let uncond = p.predict(&hist, None, horizon).unwrap();
            let target = mode_means(&uncond, k).unwrap().remove(trial % z);
            let analytic = grad_log_density_wrt_robot(&p, &hist, &u, k, &target).unwrap();
            let numeric = fd_grad(&p, &hist, &u, k, &target);
            let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            worst = worst.max(num / den);
        }
        assert!(worst <= 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn horizon_one_density_integrates_to_one() {
        for z in [1usize, 2] {
            let cfg = PredictorConfig { z_modes: z, goal_perturbation_radius: 1.0, ..Default::default() };
            let p = ReferencePredictor::new(cfg, vec![Vec2::new(3.0, 1.0)]).unwrap();
            let h = InteractionHistory::new(RobotState::new(0.5, 0.2, 0.3, 0.0), &[HumanState::new(0.0, 0.0)]);
            let pred = p.predict(&h, Some(&[RobotControl::new(0.5, 0.5)]), 1).unwrap();
            let sigma = 0.5;
            let means: Vec<Vec2> = pred.per_human[0].iter().map(|m| m.means[0]).collect();
            let lo = means.iter().fold(Vec2::repeat(f64::INFINITY), |a, m| a.inf(m)) - Vec2::repeat(6.0 * sigma);
            let hi = means.iter().fold(Vec2::repeat(f64::NEG_INFINITY), |a, m| a.sup(m)) + Vec2::repeat(6.0 * sigma);
            // Composite Simpson in both axes.
            let n = 400;
            let (hx, hy) = ((hi.x - lo.x) / n as f64, (hi.y - lo.y) / n as f64);
            let wt = |i: usize| if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let mut total = 0.0;
            for i in 0..=n {
                for j in 0..=n {
                    let u = Vec2::new(lo.x + i as f64 * hx, lo.y + j as f64 * hy);
                    total += wt(i) * wt(j) * log_density(&pred, 0, &[u]).unwrap().exp();
                }
            }
            total *= hx * hy / 9.0;
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-4);
        }
    }
}
