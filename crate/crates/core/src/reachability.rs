//! Hamilton-Jacobi reachability for the robot-vs-one-human relative system.
//!
//! The relative state is `(p_H - p_R, v_R)`. Its dynamics are
//! `d/dt (p_rel, v) = (u_H - v, u_R)` with `|u_R| <= a_max` (robot, maximizing
//! the value) and `|u_H| <= v_H_max` (adversarial human, minimizing it). The
//! value function is initialized with the signed distance to the collision
//! disc and marched backward with a first-order Lax-Friedrichs scheme, frozen
//! so that it can only decrease. Its zero sub-level set is the backward
//! reachable tube.
//!
//! Multiple humans are handled by taking the minimum of the pairwise values.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{relative_state, HumanControl, HumanState, RelativeState, RobotControl, RobotState};
use crate::{Error, Result, Vec2};

const MAGIC: &[u8; 4] = b"HJVF";
const FORMAT_VERSION: u32 = 1;
/// Boundary candidates for the worst-case human control.
const CIRCLE_CANDIDATES: usize = 16;

/// One uniformly spaced grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::invalid(format!("axis {name}: need finite min < max")));
        }
        if self.count < 3 {
            return Err(Error::invalid(format!("axis {name}: need at least 3 nodes")));
        }
        Ok(())
    }
}

/// The 4-D relative-state grid: `prx, pry, vrx, vry`, row-major with `prx`
/// slowest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: [Axis; 4],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            axes: [
                Axis::new(-5.0, 5.0, 41),
                Axis::new(-5.0, 5.0, 41),
                Axis::new(-2.2, 2.2, 21),
                Axis::new(-2.2, 2.2, 21),
            ],
        }
    }
}

impl GridSpec {
    pub fn num_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn validate(&self) -> Result<()> {
        for (a, name) in self.axes.iter().zip(["prx", "pry", "vrx", "vry"]) {
            a.validate(name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachabilityParams {
    /// Collision radius (m).
    pub r: f64,
    pub v_h_max: f64,
    pub a_max: f64,
    /// Tube horizon (s).
    pub tau: f64,
    /// Courant number.
    pub cfl: f64,
}

impl Default for ReachabilityParams {
    fn default() -> Self {
        Self { r: 0.3, v_h_max: 2.5, a_max: 2.0, tau: 1.0, cfl: 0.5 }
    }
}

impl ReachabilityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) {
            return Err(Error::invalid("collision radius must be positive"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tube horizon must be finite and non-negative"));
        }
        if !(self.v_h_max >= 0.0 && self.a_max >= 0.0) {
            return Err(Error::invalid("control bounds must be non-negative"));
        }
        Ok(())
    }
}

/// Signed distance to the collision disc; velocity dimensions are free.
pub fn target_level(x: &RelativeState, r: f64) -> f64 {
    x.prx.hypot(x.pry) - r
}

/// Numerical Hamiltonian interface for [`solve_tube`].
pub trait Hamiltonian<const D: usize>: Sync {
    /// `max_{u_R} min_{u_H} grad . f(x, u_R, u_H)`.
    fn hamiltonian(&self, x: &[f64; D], grad: &[f64; D]) -> f64;
    /// Upper bounds on `|dH/dp_i|` over the grid (Lax-Friedrichs dissipation).
    fn dissipation(&self, axes: &[Axis; D]) -> [f64; D];
}

/// Robot/human relative Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct RelativeHamiltonian {
    pub v_h_max: f64,
    pub a_max: f64,
}

impl Hamiltonian<4> for RelativeHamiltonian {
    fn hamiltonian(&self, x: &[f64; 4], g: &[f64; 4]) -> f64 {
        let gp = g[0].hypot(g[1]);
        let gv = g[2].hypot(g[3]);
        -(g[0] * x[2] + g[1] * x[3]) - self.v_h_max * gp + self.a_max * gv
    }

    fn dissipation(&self, axes: &[Axis; 4]) -> [f64; 4] {
        let vx = axes[2].min.abs().max(axes[2].max.abs());
        let vy = axes[3].min.abs().max(axes[3].max.abs());
        [vx + self.v_h_max, vy + self.v_h_max, self.a_max, self.a_max]
    }
}

/// Result of a backward march.
#[derive(Debug, Clone)]
pub struct TubeSolution {
    /// One value array per requested horizon, in the order requested.
    pub snapshots: Vec<Vec<f64>>,
    pub steps: usize,
    pub max_dtau: f64,
}

fn strides<const D: usize>(axes: &[Axis; D]) -> [usize; D] {
    let mut s = [1usize; D];
    for d in (0..D.saturating_sub(1)).rev() {
        s[d] = s[d + 1] * axes[d + 1].count;
    }
    s
}

/// Marches `V(0) = target` backward to each horizon in `taus` (ascending)
/// with `V <- min(target, V + dtau * min(0, H_LF))`.
pub fn solve_tube<const D: usize, H: Hamiltonian<D>>(
    axes: &[Axis; D],
    target: &[f64],
    ham: &H,
    taus: &[f64],
    cfl: f64,
) -> Result<TubeSolution> {
    let n: usize = axes.iter().map(|a| a.count).product();
    if target.len() != n {
        return Err(Error::invalid(format!("target has {} values, grid has {n} nodes", target.len())));
    }
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::SolverDiverged { step: 0, reason: format!("CFL number {cfl} outside (0, 1]") });
    }
    if taus.windows(2).any(|w| w[1] < w[0]) || taus.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::invalid("horizons must be finite, non-negative and ascending"));
    }
    let alpha = ham.dissipation(axes);
    let dx: [f64; D] = std::array::from_fn(|d| axes[d].spacing());
    let rate: f64 = (0..D).map(|d| alpha[d] / dx[d]).sum();
    let max_dtau = if rate > 0.0 { cfl / rate } else { f64::INFINITY };
    let stride = strides(axes);

    let mut v = target.to_vec();
    let mut next = vec![0.0; n];
    let mut snapshots = Vec::with_capacity(taus.len());
    let mut s = 0.0;
    let mut steps = 0usize;
    for &tau in taus {
        while tau - s > 1e-12 * tau.max(1.0) {
            let h = max_dtau.min(tau - s);
            let chunk = if D > 1 { stride[0] } else { n };
            next.par_chunks_mut(chunk).enumerate().for_each(|(ci, out)| {
                let base = ci * chunk;
                for (off, o) in out.iter_mut().enumerate() {
                    let idx = base + off;
                    let mut x = [0.0; D];
                    let mut mid = [0.0; D];
                    let mut diss = 0.0;
                    let mut rem = idx;
                    for d in 0..D {
                        let i = rem / stride[d];
                        rem %= stride[d];
                        x[d] = axes[d].coord(i);
                        let c = v[idx];
                        let last = axes[d].count - 1;
                        let back = if i > 0 { Some((c - v[idx - stride[d]]) / dx[d]) } else { None };
                        let fwd = if i < last { Some((v[idx + stride[d]] - c) / dx[d]) } else { None };
                        let (m, p) = match (back, fwd) {
                            (Some(b), Some(f)) => (b, f),
                            (Some(b), None) => (b, b),
                            (None, Some(f)) => (f, f),
                            (None, None) => (0.0, 0.0),
                        };
                        mid[d] = 0.5 * (m + p);
                        diss += alpha[d] * 0.5 * (p - m);
                    }
                    // Marching in s = -t turns V_t + H = 0 into V_s = H, so the
                    // Lax-Friedrichs dissipation enters with a plus sign.
                    let hlf = ham.hamiltonian(&x, &mid) + diss;
                    *o = (v[idx] + h * hlf.min(0.0)).min(target[idx]);
                }
            });
            steps += 1;
            if let Some(bad) = next.iter().position(|x| !x.is_finite()) {
                return Err(Error::SolverDiverged { step: steps, reason: format!("non-finite value at node {bad}") });
            }
            std::mem::swap(&mut v, &mut next);
            s += h;
        }
        snapshots.push(v.clone());
    }
    Ok(TubeSolution { snapshots, steps, max_dtau })
}

/// Gridded solution of the relative-system tube.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub tau: f64,
    pub params: ReachabilityParams,
    /// Time steps taken by the solver (0 when loaded from disk).
    pub steps: usize,
}

/// Target level at every node of `grid`.
pub fn target_on_grid(grid: &GridSpec, r: f64) -> Vec<f64> {
    let a = &grid.axes;
    let mut out = Vec::with_capacity(grid.num_nodes());
    for i in 0..a[0].count {
        for j in 0..a[1].count {
            let l = a[0].coord(i).hypot(a[1].coord(j)) - r;
            out.extend(std::iter::repeat_n(l, a[2].count * a[3].count));
        }
    }
    out
}

/// Offline solve of the tube over `params.tau` seconds.
pub fn solve_brt(grid: &GridSpec, params: &ReachabilityParams) -> Result<ValueFunction> {
    grid.validate()?;
    params.validate()?;
    let target = target_on_grid(grid, params.r);
    let ham = RelativeHamiltonian { v_h_max: params.v_h_max, a_max: params.a_max };
    let sol = solve_tube(&grid.axes, &target, &ham, &[params.tau], params.cfl)?;
    debug!("tube solved in {} steps (max dtau {:.4})", sol.steps, sol.max_dtau);
    Ok(ValueFunction {
        grid: *grid,
        values: sol.snapshots.into_iter().next().expect("one snapshot"),
        tau: params.tau,
        params: *params,
        steps: sol.steps,
    })
}

/// Interpolated value with the derivative of the interpolant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub gradient: [f64; 4],
    /// The query lay outside the grid and was clamped to its boundary.
    pub clamped: bool,
}

/// Read access to a value function, so that queries can be wrapped (for
/// example to count them).
pub trait SafetyField: Send + Sync {
    fn sample(&self, x: &RelativeState) -> FieldSample;
}

impl ValueFunction {
    fn strides(&self) -> [usize; 4] {
        strides(&self.grid.axes)
    }

    pub fn node_value(&self, idx: [usize; 4]) -> f64 {
        let s = self.strides();
        self.values[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3] * s[3]]
    }

    /// Cell index and fractional offset per axis, with clamping.
    fn locate(&self, x: &[f64; 4]) -> ([usize; 4], [f64; 4], bool) {
        let mut cell = [0usize; 4];
        let mut frac = [0.0; 4];
        let mut clamped = false;
        for d in 0..4 {
            let a = &self.grid.axes[d];
            let mut q = x[d];
            if q < a.min || q > a.max {
                clamped = true;
                q = q.clamp(a.min, a.max);
            }
            let t = (q - a.min) / a.spacing();
            let i = (t.floor() as usize).min(a.count - 2);
            cell[d] = i;
            frac[d] = t - i as f64;
        }
        (cell, frac, clamped)
    }

    fn interpolate_with(&self, x: &RelativeState, node: impl Fn([usize; 4]) -> f64) -> (f64, [f64; 4], bool) {
        let (cell, frac, clamped) = self.locate(&x.as_array());
        let mut value = 0.0;
        let mut grad = [0.0; 4];
        for corner in 0..16usize {
            let mut idx = cell;
            let mut w = 1.0;
            let mut dw = [1.0; 4];
            for d in 0..4 {
                let hi = (corner >> d) & 1 == 1;
                if hi {
                    idx[d] += 1;
                }
                let wd = if hi { frac[d] } else { 1.0 - frac[d] };
                let dwd = if hi { 1.0 } else { -1.0 } / self.grid.axes[d].spacing();
                w *= wd;
                for (e, dwe) in dw.iter_mut().enumerate() {
                    *dwe *= if e == d { dwd } else { wd };
                }
            }
            let v = node(idx);
            value += w * v;
            for d in 0..4 {
                grad[d] += dw[d] * v;
            }
        }
        (value, grad, clamped)
    }

    /// Multilinear interpolation; out-of-grid queries are clamped and flagged.
    pub fn value_at(&self, x: &RelativeState) -> (f64, bool) {
        let (v, _, c) = self.interpolate_with(x, |i| self.node_value(i));
        (v, c)
    }

    /// Central-difference node gradients interpolated to `x`. The flag is set
    /// when one-sided differences were needed or the query was clamped.
    pub fn grad_at(&self, x: &RelativeState) -> ([f64; 4], bool) {
        let (cell, _, clamped) = self.locate(&x.as_array());
        let mut grad = [0.0; 4];
        let mut flagged = clamped;
        for d in 0..4 {
            // A corner on the grid edge gets a one-sided difference.
            if cell[d] == 0 || cell[d] + 1 == self.grid.axes[d].count - 1 {
                flagged = true;
            }
            let (g, _, _) = self.interpolate_with(x, |idx| self.node_derivative(idx, d));
            grad[d] = g;
        }
        (grad, flagged)
    }

    fn node_derivative(&self, idx: [usize; 4], d: usize) -> f64 {
        let a = &self.grid.axes[d];
        let h = a.spacing();
        let mut lo = idx;
        let mut hi = idx;
        let span = if idx[d] == 0 {
            hi[d] += 1;
            h
        } else if idx[d] == a.count - 1 {
            lo[d] -= 1;
            h
        } else {
            lo[d] -= 1;
            hi[d] += 1;
            2.0 * h
        };
        (self.node_value(hi) - self.node_value(lo)) / span
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes the little-endian `HJVF` cache file.
    pub fn save_grid(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 + 4 * 20 + 32 + 8 * self.values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for a in &self.grid.axes {
            buf.extend_from_slice(&a.min.to_le_bytes());
            buf.extend_from_slice(&a.max.to_le_bytes());
            let count = u32::try_from(a.count).map_err(|_| Error::Format { field: "count", reason: "axis too large".into() })?;
            buf.extend_from_slice(&count.to_le_bytes());
        }
        for v in [self.tau, self.params.r, self.params.v_h_max, self.params.a_max] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_grid(path: &Path) -> Result<ValueFunction> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ValueFunction> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { field: "magic", reason: "expected HJVF".into() });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format { field: "version", reason: format!("unsupported version {version}") });
        }
        let mut axes = [Axis::new(0.0, 0.0, 0); 4];
        for a in &mut axes {
            let min = r.f64("axis min")?;
            let max = r.f64("axis max")?;
            let count = r.u32("axis count")? as usize;
            *a = Axis::new(min, max, count);
        }
        let grid = GridSpec { axes };
        grid.validate().map_err(|e| Error::Format { field: "dims", reason: e.to_string() })?;
        let tau = r.f64("tau")?;
        let radius = r.f64("r")?;
        let v_h_max = r.f64("v_h_max")?;
        let a_max = r.f64("a_max")?;
        let payload = &bytes[r.pos..];
        let expected = grid.num_nodes();
        if payload.len() != expected * 8 {
            return Err(Error::Truncated { expected, found: payload.len() / 8 });
        }
        let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let params = ReachabilityParams { r: radius, v_h_max, a_max, tau, ..Default::default() };
        Ok(ValueFunction { grid, values, tau, params, steps: 0 })
    }
}

impl SafetyField for ValueFunction {
    fn sample(&self, x: &RelativeState) -> FieldSample {
        let (value, gradient, clamped) = self.interpolate_with(x, |i| self.node_value(i));
        FieldSample { value, gradient, clamped }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format { field, reason: "file ends inside the header".into() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Counts queries against an inner field.
pub struct CountingField<'a, F: ?Sized> {
    inner: &'a F,
    count: AtomicUsize,
}

impl<'a, F: SafetyField + ?Sized> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<F: SafetyField + ?Sized> SafetyField for CountingField<'_, F> {
    fn sample(&self, x: &RelativeState) -> FieldSample {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.sample(x)
    }
}

/// Pairwise-minimum value over all humans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiAgentValue {
    pub value: f64,
    /// `None` only when there are no humans (value is then +infinity).
    pub index: Option<usize>,
}

pub fn multi_agent_value<F: SafetyField + ?Sized>(v: &F, robot: &RobotState, humans: &[HumanState]) -> MultiAgentValue {
    let mut best = MultiAgentValue { value: f64::INFINITY, index: None };
    for (k, h) in humans.iter().enumerate() {
        let val = v.sample(&relative_state(robot, h)).value;
        if best.index.is_none() || val < best.value {
            best = MultiAgentValue { value: val, index: Some(k) };
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeSetQuery {
    /// `V(x) <= epsilon`: the constraint binds.
    pub active: bool,
    /// `g = min_{u_H} V(x + f_rel dt) + eta`; feasible when `g >= 0`.
    pub constraint_value: f64,
    pub worst_case_human: HumanControl,
}

/// Worst-case one-step value for each candidate human control, returning
/// `(min value, d min / d u_R, argmin control)`.
fn worst_next_value<F: SafetyField + ?Sized>(v: &F, x: &RelativeState, u: &RobotControl, dt: f64, v_h_max: f64) -> (f64, Vec2, Vec2) {
    let vel_next = [x.vrx + u.ax * dt, x.vry + u.ay * dt];
    let next_with = |uh: Vec2| RelativeState {
        prx: x.prx + (uh.x - x.vrx) * dt,
        pry: x.pry + (uh.y - x.vry) * dt,
        vrx: vel_next[0],
        vry: vel_next[1],
    };
    let nominal = v.sample(&next_with(Vec2::zeros()));
    let gp = Vec2::new(nominal.gradient[0], nominal.gradient[1]);
    let mut best = (nominal.value, Vec2::new(nominal.gradient[2], nominal.gradient[3]) * dt, Vec2::zeros());
    let mut consider = |uh: Vec2| {
        let s = v.sample(&next_with(uh));
        if s.value < best.0 {
            best = (s.value, Vec2::new(s.gradient[2], s.gradient[3]) * dt, uh);
        }
    };
    if gp.norm() > 0.0 {
        consider(-gp * (v_h_max / gp.norm()));
    }
    for k in 0..CIRCLE_CANDIDATES {
        let th = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_CANDIDATES as f64;
        consider(Vec2::new(th.cos(), th.sin()) * v_h_max);
    }
    best
}

/// Slack-relaxed safe control set membership for a single human.
pub fn safe_control_constraint<F: SafetyField + ?Sized>(
    v: &F,
    x: &RelativeState,
    u: &RobotControl,
    dt: f64,
    eta: f64,
    epsilon: f64,
    v_h_max: f64,
) -> SafeSetQuery {
    let active = v.sample(x).value <= epsilon;
    let (g, _, uh) = worst_next_value(v, x, u, dt, v_h_max);
    SafeSetQuery { active, constraint_value: g + eta, worst_case_human: HumanControl::from_vec(uh) }
}

/// Safety margin of the first robot control against every human (without
/// slack), with its derivative with respect to that control.
pub fn multi_agent_margin<F: SafetyField + ?Sized>(
    v: &F,
    robot: &RobotState,
    humans: &[HumanState],
    u: &RobotControl,
    dt: f64,
    v_h_max: f64,
) -> (f64, Vec2) {
    let mut best = (f64::INFINITY, Vec2::zeros());
    for h in humans {
        let (g, dg, _) = worst_next_value(v, &relative_state(robot, h), u, dt, v_h_max);
        if g < best.0 {
            best = (g, dg);
        }
    }
    best
}
