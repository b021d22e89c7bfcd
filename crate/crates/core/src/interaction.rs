//! Interaction cost: how much the robot's plan perturbs the humans' natural
//! motion.
//!
//! For each attended human the robot-free prediction supplies one mean
//! control sequence per mode. The cost is the negative log-likelihood of all
//! of those sequences under the robot-conditioned mixture, summed over
//! humans and modes, in nats.

use crate::dynamics::RobotControl;
use crate::predictor::{log_density, mode_means, InteractionHistory, Predictor};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCostResult {
    pub value: f64,
    /// Derivative with respect to the robot controls flattened as `[ax_0, ay_0, ...]`.
    pub gradient: Vec<f64>,
    /// Contribution of each attended human, in attention-set order.
    pub per_human_terms: Vec<f64>,
}

/// Robot-free mode means for each attended human, in attention-set order.
/// They do not depend on the robot plan and can be reused across evaluations.
pub fn unconditioned_targets(
    history: &InteractionHistory,
    predictor: &dyn Predictor,
    attention: &[usize],
    horizon: usize,
) -> Result<Vec<Vec<Vec<Vec2>>>> {
    if attention.is_empty() {
        return Ok(Vec::new());
    }
    check_attention(history, attention)?;
    let uncond = predictor.predict(history, None, horizon)?;
    attention.iter().map(|&k| mode_means(&uncond, k)).collect()
}

/// Interaction cost of `robot_future` with its exact gradient.
pub fn j_int(
    robot_future: &[RobotControl],
    history: &InteractionHistory,
    predictor: &dyn Predictor,
    attention: &[usize],
) -> Result<InteractionCostResult> {
    let targets = unconditioned_targets(history, predictor, attention, robot_future.len())?;
    j_int_with_targets(robot_future, history, predictor, attention, &targets)
}

/// [`j_int`] with precomputed robot-free targets.
pub fn j_int_with_targets(
    robot_future: &[RobotControl],
    history: &InteractionHistory,
    predictor: &dyn Predictor,
    attention: &[usize],
    targets: &[Vec<Vec<Vec2>>],
) -> Result<InteractionCostResult> {
    let n_ctrl = 2 * robot_future.len();
    let mut value = 0.0;
    let mut gradient = vec![0.0; n_ctrl];
    let mut per_human_terms = Vec::with_capacity(attention.len());
    // Fixed index order keeps the summation bit-reproducible.
    for (&k, modes) in attention.iter().zip(targets) {
        let refs: Vec<&[Vec2]> = modes.iter().map(Vec::as_slice).collect();
        let out = predictor.log_density_grads(history, robot_future, k, &refs)?;
        let mut term = 0.0;
        for (ll, g) in out {
            term -= ll;
            for (o, gi) in gradient.iter_mut().zip(g) {
                *o -= gi;
            }
        }
        value += term;
        per_human_terms.push(term);
    }
    Ok(InteractionCostResult { value, gradient, per_human_terms })
}

/// Interaction cost with the conditioned mixture replaced by the robot-free
/// one: the floor the cost approaches as the robot's influence vanishes.
pub fn j_int_baseline(
    history: &InteractionHistory,
    predictor: &dyn Predictor,
    attention: &[usize],
    horizon: usize,
) -> Result<f64> {
    if attention.is_empty() {
        return Ok(0.0);
    }
    check_attention(history, attention)?;
    let uncond = predictor.predict(history, None, horizon)?;
    let mut total = 0.0;
    for &k in attention {
        for target in mode_means(&uncond, k)? {
            total -= log_density(&uncond, k, &target)?;
        }
    }
    Ok(total)
}

/// Settings for the randomized finite-difference check of [`j_int`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub trials: usize,
    pub seed: u64,
    /// Central-difference step on each control component.
    pub step: f64,
    /// Multiplies the analytic gradient before comparison; 1 except when
    /// exercising the check itself.
    pub gradient_scale: f64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        GradientCheck { trials: 20, seed: 0, step: 1e-5, gradient_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    pub trials: usize,
    /// Largest `‖g − g_fd‖₂ / ‖g_fd‖₂` over the trials.
    pub worst_relative_error: f64,
    pub worst_trial: usize,
    pub worst_modes: usize,
    pub worst_horizon: usize,
}

/// Compares the analytic interaction-cost gradient with central finite
/// differences on random two-human instances, cycling through 1, 2 and 4
/// modes and horizons 4 to 8.
pub fn gradient_check(check: &GradientCheck) -> Result<GradientCheckReport> {
    use crate::dynamics::{HumanControl, HumanState, RobotState};
    use crate::predictor::{PredictorConfig, ReferencePredictor};
    use rand::{Rng, SeedableRng};

    if check.trials == 0 {
        return Err(Error::invalid("gradient check needs at least one trial"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(check.seed);
    let mut report = GradientCheckReport { trials: check.trials, worst_relative_error: 0.0, worst_trial: 0, worst_modes: 0, worst_horizon: 0 };
    for trial in 0..check.trials {
        let z = [1, 2, 4][trial % 3];
        let horizon = 4 + trial % 5;
        let mut pt = || Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let humans = [pt(), pt()];
        let goals = vec![pt() * 2.0, pt() * 2.0];
        let r = pt();
        let rv = pt() * 0.3;
        let p = ReferencePredictor::new(PredictorConfig { z_modes: z, ..Default::default() }, goals)?;
        let mut h = InteractionHistory::new(RobotState::new(r.x, r.y, rv.x, rv.y), &humans.map(HumanState::from_vec));
        let vel = [pt() * 0.3, pt() * 0.3];
        let next: Vec<HumanState> = humans.iter().zip(&vel).map(|(p, v)| HumanState::from_vec(p + v * 0.4)).collect();
        h.push(RobotControl::ZERO, *h.robot(), &vel.map(HumanControl::from_vec), &next)?;
        let u: Vec<RobotControl> =
            (0..horizon).map(|_| RobotControl::new(rng.random_range(-1.4..1.4), rng.random_range(-1.4..1.4))).collect();

        let analytic = j_int(&u, &h, &p, &[0, 1])?;
        let f = |u: &[RobotControl]| j_int(u, &h, &p, &[0, 1]).map(|r| r.value);
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for c in 0..2 * horizon {
            let (mut up, mut dn) = (u.clone(), u.clone());
            let (a, b) = if c % 2 == 0 { (&mut up[c / 2].ax, &mut dn[c / 2].ax) } else { (&mut up[c / 2].ay, &mut dn[c / 2].ay) };
            *a += check.step;
            *b -= check.step;
            let fd = (f(&up)? - f(&dn)?) / (2.0 * check.step);
            err2 += (analytic.gradient[c] * check.gradient_scale - fd).powi(2);
            norm2 += fd * fd;
        }
        let rel = err2.sqrt() / norm2.sqrt().max(1e-6);
        if !rel.is_finite() {
            return Err(Error::NonFiniteObjective { term: "interaction" });
        }
        if rel > report.worst_relative_error || trial == 0 {
            report = GradientCheckReport { worst_relative_error: rel, worst_trial: trial, worst_modes: z, worst_horizon: horizon, ..report };
        }
    }
    Ok(report)
}

fn check_attention(history: &InteractionHistory, attention: &[usize]) -> Result<()> {
    let n = history.num_humans();
    match attention.iter().find(|&&k| k >= n) {
        Some(k) => Err(Error::invalid(format!("attention index {k} out of range ({n} humans)"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{HumanControl, HumanState, RobotState};
    use crate::predictor::{PredictorConfig, ReferencePredictor};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: PredictorConfig, robot: RobotState, humans: &[(f64, f64)], goals: &[(f64, f64)]) -> (ReferencePredictor, InteractionHistory) {
        let hs: Vec<HumanState> = humans.iter().map(|&(x, y)| HumanState::new(x, y)).collect();
        let gs = goals.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        (ReferencePredictor::new(cfg, gs).unwrap(), InteractionHistory::new(robot, &hs))
    }

    #[test]
    fn inert_robot_gives_closed_form_value() {
        let cfg = PredictorConfig { z_modes: 1, robot_repulsion_strength: 0.0, ..Default::default() };
        let (p, h) = setup(cfg, RobotState::at_rest(0.5, 0.0), &[(0.0, 0.0)], &[(5.0, 0.0)]);
        let r = j_int(&[RobotControl::new(1.0, 0.5); 2], &h, &p, &[0]).unwrap();
        assert_abs_diff_eq!(r.value, 0.903166, epsilon = 1e-6);
        assert!(r.gradient.iter().all(|&g| g == 0.0));
        assert_abs_diff_eq!(r.value, j_int_baseline(&h, &p, &[0], 2).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn empty_attention_is_zero() {
        let (p, h) = setup(PredictorConfig::default(), RobotState::default(), &[(1.0, 0.0)], &[(5.0, 0.0)]);
        let r = j_int(&[RobotControl::ZERO; 4], &h, &p, &[]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.gradient, vec![0.0; 8]);
        assert_eq!(j_int_baseline(&h, &p, &[], 4).unwrap(), 0.0);
    }

    #[test]
    fn far_robot_matches_baseline() {
        let (p, h) = setup(PredictorConfig::default(), RobotState::at_rest(1e6, 0.0), &[(0.0, 0.0), (2.0, 1.0)], &[(5.0, 0.0), (-3.0, 2.0)]);
        let r = j_int(&[RobotControl::new(-1.0, 1.0); 5], &h, &p, &[0, 1]).unwrap();
        let base = j_int_baseline(&h, &p, &[0, 1], 5).unwrap();
        assert!((r.value - base).abs() < 1e-9);
        assert!(r.gradient.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn baseline_is_additive_over_symmetric_humans() {
        let cfg = PredictorConfig { z_modes: 1, ..Default::default() };
        // Two humans far apart walking in mirrored directions.
        let (p, h) = setup(cfg.clone(), RobotState::default(), &[(-100.0, 0.0), (100.0, 0.0)], &[(-105.0, 0.0), (105.0, 0.0)]);
        let both = j_int_baseline(&h, &p, &[0, 1], 4).unwrap();
        let one = j_int_baseline(&h, &p, &[0], 4).unwrap();
        assert_abs_diff_eq!(both, 2.0 * one, epsilon = 1e-12);
    }

    #[test]
    fn rejects_out_of_range_attention() {
        let (p, h) = setup(PredictorConfig::default(), RobotState::default(), &[(1.0, 0.0)], &[(5.0, 0.0)]);
        assert!(j_int(&[RobotControl::ZERO; 2], &h, &p, &[3]).is_err());
    }

    #[test]
    fn additive_over_disjoint_attention_sets() {
        let (p, h) = setup(
            PredictorConfig::default(),
            RobotState::new(0.0, 0.0, 0.5, 0.0),
            &[(1.0, 0.5), (2.0, -1.0), (-1.0, 1.0)],
            &[(-4.0, 0.0), (0.0, 4.0), (3.0, -3.0)],
        );
        let u = vec![RobotControl::new(1.0, 0.2); 6];
        let all = j_int(&u, &h, &p, &[0, 1, 2]).unwrap();
        let a = j_int(&u, &h, &p, &[0, 2]).unwrap();
        let b = j_int(&u, &h, &p, &[1]).unwrap();
        assert_abs_diff_eq!(all.value, a.value + b.value, epsilon = 1e-10);
        for i in 0..all.gradient.len() {
            assert_abs_diff_eq!(all.gradient[i], a.gradient[i] + b.gradient[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn influence_vanishes_monotonically_with_distance() {
        let cfg = PredictorConfig::default();
        let mut last = f64::INFINITY;
        for i in 0..8 {
            let d = 10.0 * cfg.robot_repulsion_range + 2.0 * i as f64;
            let (p, h) = setup(cfg.clone(), RobotState::at_rest(-d, 0.0), &[(0.0, 0.0)], &[(0.0, 5.0)]);
            let r = j_int(&[RobotControl::ZERO; 6], &h, &p, &[0]).unwrap();
            let gap = (r.value - j_int_baseline(&h, &p, &[0], 6).unwrap()).abs();
            assert!(gap <= last, "gap {gap} grew at distance {d}");
            last = gap;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn single_mode_cost_minimized_when_means_coincide() {
        use crate::predictor::{GaussianMode, MultimodalPrediction};
        use crate::Mat2;
        let target = vec![Vec2::new(1.0, 0.2), Vec2::new(0.9, 0.4), Vec2::new(0.7, 0.6)];
        let cost = |shift: Vec2| {
            let means = target.iter().map(|m| m + shift).collect();
            let mode = GaussianMode { weight: 1.0, means, covariances: vec![Mat2::identity() * 0.25; 3] };
            let pred = MultimodalPrediction { per_human: vec![vec![mode]], horizon: 3, conditioned: true };
            -log_density(&pred, 0, &target).unwrap()
        };
        let at_center = cost(Vec2::zeros());
        for s in [Vec2::new(0.01, 0.0), Vec2::new(-0.2, 0.3), Vec2::new(0.0, -1.0)] {
            assert!(cost(s) > at_center);
        }
    }

    fn random_case(rng: &mut ChaCha8Rng, z: usize, horizon: usize) -> (ReferencePredictor, InteractionHistory, Vec<RobotControl>) {
        let mut pt = || Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let humans = [pt(), pt()];
        let goals = vec![pt() * 2.0, pt() * 2.0];
        let r = pt();
        let cfg = PredictorConfig { z_modes: z, ..Default::default() };
        let p = ReferencePredictor::new(cfg, goals).unwrap();
        let mut h = InteractionHistory::new(
            RobotState::new(r.x, r.y, 0.3, -0.2),
            &humans.map(HumanState::from_vec),
        );
        let next: Vec<HumanState> = humans.iter().map(|p| HumanState::from_vec(p + Vec2::new(0.2, 0.1))).collect();
        h.push(RobotControl::ZERO, *h.robot(), &[HumanControl::new(0.5, 0.25); 2], &next).unwrap();
        let u = (0..horizon).map(|_| RobotControl::new(rng.random_range(-1.4..1.4), rng.random_range(-1.4..1.4))).collect();
        (p, h, u)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let (p, h, u) = random_case(&mut rng, [1, 2, 4][trial % 3], 4 + trial % 5);
            let r = j_int(&u, &h, &p, &[0, 1]).unwrap();
            let eps = 1e-5;
            let f = |u: &[RobotControl]| j_int(u, &h, &p, &[0, 1]).unwrap().value;
            let fd: Vec<f64> = (0..2 * u.len())
                .map(|c| {
                    let (mut up, mut dn) = (u.clone(), u.clone());
                    if c % 2 == 0 {
                        up[c / 2].ax += eps;
                        dn[c / 2].ax -= eps;
                    } else {
                        up[c / 2].ay += eps;
                        dn[c / 2].ay -= eps;
                    }
                    (f(&up) - f(&dn)) / (2.0 * eps)
                })
                .collect();
            let err: f64 = r.gradient.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            worst = worst.max(err / scale);
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn library_check_passes_and_detects_corruption() {
        let ok = gradient_check(&GradientCheck::default()).unwrap();
        assert!(ok.worst_relative_error <= 1e-3, "{ok:?}");
        let bad = gradient_check(&GradientCheck { gradient_scale: 1.5, ..Default::default() }).unwrap();
        assert!(bad.worst_relative_error > 1e-3);
        assert!(gradient_check(&GradientCheck { trials: 0, ..Default::default() }).is_err());
    }
}
