//! Discrete-time agent dynamics.
//!
//! The robot is a planar double integrator discretized with an exact
//! zero-order hold; humans are single integrators driven by velocity
//! commands. Everything here is a pure function on small value types.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec2};

/// Default planning timestep in seconds.
pub const DEFAULT_DT: f64 = 0.4;
/// Default robot acceleration bound (m/s^2).
pub const DEFAULT_A_MAX: f64 = 2.0;
/// Default robot speed bound (m/s).
pub const DEFAULT_V_R_MAX: f64 = 2.0;
/// Default human speed bound (m/s).
pub const DEFAULT_V_H_MAX: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl RobotState {
    pub fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self { px, py, vx, vy }
    }

    pub fn at_rest(px: f64, py: f64) -> Self {
        Self::new(px, py, 0.0, 0.0)
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.px, self.py)
    }

    pub fn vel(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }

    pub fn speed(&self) -> f64 {
        self.vel().norm()
    }

    fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotControl {
    pub ax: f64,
    pub ay: f64,
}

impl RobotControl {
    pub const ZERO: RobotControl = RobotControl { ax: 0.0, ay: 0.0 };

    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }

    pub fn from_vec(v: Vec2) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn as_vec(&self) -> Vec2 {
        Vec2::new(self.ax, self.ay)
    }

    pub fn norm(&self) -> f64 {
        self.as_vec().norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HumanState {
    pub px: f64,
    pub py: f64,
}

impl HumanState {
    pub fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }

    pub fn from_vec(p: Vec2) -> Self {
        Self::new(p.x, p.y)
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.px, self.py)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HumanControl {
    pub vx: f64,
    pub vy: f64,
}

impl HumanControl {
    pub fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn from_vec(v: Vec2) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn as_vec(&self) -> Vec2 {
        Vec2::new(self.vx, self.vy)
    }
}

/// Human position relative to the robot, plus the robot's velocity.
///
/// Only [`relative_state`] builds one from agent states; the reachability
/// grid code constructs them directly from node coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeState {
    pub prx: f64,
    pub pry: f64,
    pub vrx: f64,
    pub vry: f64,
}

impl RelativeState {
    pub fn as_array(&self) -> [f64; 4] {
        [self.prx, self.pry, self.vrx, self.vry]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub dt: f64,
}

impl Default for StepParams {
    fn default() -> Self {
        Self { dt: DEFAULT_DT }
    }
}

impl StepParams {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("timestep must be positive, got {dt}")));
        }
        Ok(Self { dt })
    }
}

/// Exact zero-order-hold step of the double integrator.
pub fn step_robot(x: &RobotState, u: &RobotControl, p: &StepParams) -> Result<RobotState> {
    if !x.is_finite() || !u.ax.is_finite() || !u.ay.is_finite() {
        return Err(Error::invalid("non-finite robot state or control"));
    }
    Ok(step_robot_unchecked(x, u, p.dt))
}

#[inline]
pub(crate) fn step_robot_unchecked(x: &RobotState, u: &RobotControl, dt: f64) -> RobotState {
    let h = 0.5 * dt * dt;
    RobotState {
        px: x.px + x.vx * dt + u.ax * h,
        py: x.py + x.vy * dt + u.ay * h,
        vx: x.vx + u.ax * dt,
        vy: x.vy + u.ay * dt,
    }
}

pub fn step_human(x: &HumanState, u: &HumanControl, p: &StepParams) -> Result<HumanState> {
    if !(x.px.is_finite() && x.py.is_finite() && u.vx.is_finite() && u.vy.is_finite()) {
        return Err(Error::invalid("non-finite human state or control"));
    }
    Ok(HumanState { px: x.px + u.vx * p.dt, py: x.py + u.vy * p.dt })
}

/// States visited under `u_seq`, starting with `x0` (length `u_seq.len() + 1`).
pub fn rollout_robot(x0: &RobotState, u_seq: &[RobotControl], p: &StepParams) -> Result<Vec<RobotState>> {
    let mut out = Vec::with_capacity(u_seq.len() + 1);
    out.push(*x0);
    let mut x = *x0;
    for u in u_seq {
        x = step_robot(&x, u, p)?;
        out.push(x);
    }
    Ok(out)
}

pub(crate) fn rollout_robot_unchecked(x0: &RobotState, u_seq: &[RobotControl], dt: f64) -> Vec<RobotState> {
    let mut out = Vec::with_capacity(u_seq.len() + 1);
    out.push(*x0);
    let mut x = *x0;
    for u in u_seq {
        x = step_robot_unchecked(&x, u, dt);
        out.push(x);
    }
    out
}

pub fn relative_state(r: &RobotState, h: &HumanState) -> RelativeState {
    RelativeState { prx: h.px - r.px, pry: h.py - r.py, vrx: r.vx, vry: r.vy }
}

/// Radial projection onto the disc of radius `a_max`.
pub fn clamp_robot_control(u: &RobotControl, a_max: f64) -> RobotControl {
    RobotControl::from_vec(clamp_norm(u.as_vec(), a_max))
}

pub(crate) fn clamp_norm(v: Vec2, max: f64) -> Vec2 {
    let n = v.norm();
    if n <= max {
        return v;
    }
    let mut out = v * (max / n);
    // Rounding can leave the result a hair outside; nudge inward so the
    // projection is idempotent.
    while out.norm() > max {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

/// Scales `u` back along the segment towards zero so that the next velocity
/// respects `v_max`, then clamps to `a_max`. Used by the simulator before a
/// control is applied.
pub fn limit_control_for_speed(x: &RobotState, u: &RobotControl, dt: f64, a_max: f64, v_max: f64) -> RobotControl {
    let u = clamp_norm(u.as_vec(), a_max);
    let v = x.vel();
    let v_next = v + u * dt;
    if v_next.norm() <= v_max {
        return RobotControl::from_vec(u);
    }
    // Largest s in [0, 1] with |v + s u dt| <= v_max. If the robot is already
    // too fast, aim straight for the speed limit along the intended velocity.
    let d = u * dt;
    let a = d.norm_squared();
    let b = 2.0 * v.dot(&d);
    let c = v.norm_squared() - v_max * v_max;
    if c <= 0.0 && a > 0.0 {
        let s = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
        return RobotControl::from_vec(u * s.clamp(0.0, 1.0));
    }
    let target = v_next * (v_max / v_next.norm());
    RobotControl::from_vec(clamp_norm((target - v) / dt, a_max))
}
