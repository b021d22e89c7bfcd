//! Scenario files and random initial conditions.
//!
//! Scenarios are TOML documents. Every configuration table is optional and
//! falls back to the library defaults; see `scenarios/` for the
//! canonical files.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{MctsConfig, RrtConfig};
use crate::dynamics::RobotState;
use crate::planner::{PlannerConfig, PlannerKind};
use crate::predictor::PredictorConfig;
use crate::reachability::ReachabilityParams;
use crate::sim::HumanSimConfig;
use crate::{Error, Result, Vec2};

/// Default robot start and goal for generated scenarios (m).
pub const ROBOT_START: [f64; 2] = [-6.0, 0.0];
pub const ROBOT_GOAL: [f64; 2] = [6.0, 0.0];
/// Annulus around the origin in which generated humans start (m).
pub const ANNULUS: (f64, f64) = (2.0, 5.0);
/// Smallest initial spacing between generated humans (m).
pub const MIN_SPACING: f64 = 0.8;
pub const DEFAULT_EPISODE_STEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanSpec {
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub num_agents: usize,
    pub episode_steps: usize,
    pub planner: PlannerKind,
    /// Cached value function to load instead of solving.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cache: Option<PathBuf>,
    pub robot: RobotState,
    /// Goal position and velocity.
    pub goal: RobotState,
    #[serde(default)]
    pub humans: Vec<HumanSpec>,
    #[serde(default)]
    pub planner_config: PlannerConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub human_sim: HumanSimConfig,
    #[serde(default)]
    pub reachability: ReachabilityParams,
    #[serde(default)]
    pub mcts: MctsConfig,
    #[serde(default)]
    pub rrt: RrtConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            num_agents: 0,
            episode_steps: DEFAULT_EPISODE_STEPS,
            planner: PlannerKind::Ours,
            grid_cache: None,
            robot: RobotState::at_rest(ROBOT_START[0], ROBOT_START[1]),
            goal: RobotState::at_rest(ROBOT_GOAL[0], ROBOT_GOAL[1]),
            humans: Vec::new(),
            planner_config: PlannerConfig::default(),
            predictor: PredictorConfig::default(),
            human_sim: HumanSimConfig::default(),
            reachability: ReachabilityParams::default(),
            mcts: MctsConfig::default(),
            rrt: RrtConfig::default(),
        }
    }
}

impl Scenario {
    /// Random humans around the origin with goals on the far side, using
    /// the default configuration.
    pub fn random(seed: u64, num_agents: usize, planner: PlannerKind) -> Result<Scenario> {
        Self::random_from(&Scenario::default(), seed, num_agents, planner)
    }

    /// Like [`Scenario::random`] but keeping every configuration table,
    /// the robot and its goal from `template`.
    pub fn random_from(template: &Scenario, seed: u64, num_agents: usize, planner: PlannerKind) -> Result<Scenario> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r_in, r_out) = ANNULUS;
        let mut starts: Vec<Vec2> = Vec::with_capacity(num_agents);
        let mut tries = 0;
        while starts.len() < num_agents {
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Scenario(format!("cannot place {num_agents} humans in the annulus")));
            }
            // Area-uniform radius.
            let r = (rng.random_range(r_in * r_in..r_out * r_out) as f64).sqrt();
            let th = rng.random_range(0.0..2.0 * PI);
            let p = Vec2::new(r * th.cos(), r * th.sin());
            if starts.iter().all(|q| (p - q).norm() >= MIN_SPACING) && (p - template.robot.pos()).norm() >= MIN_SPACING {
                starts.push(p);
            }
        }
        let humans = starts
            .iter()
            .map(|p| {
                let g = -p * (r_out / p.norm());
                HumanSpec { start: [p.x, p.y], goal: [g.x, g.y] }
            })
            .collect();
        Ok(Scenario { seed, num_agents, planner, humans, ..template.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents != self.humans.len() {
            return Err(Error::Scenario(format!("num_agents is {} but {} humans are listed", self.num_agents, self.humans.len())));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let r = &self.robot;
        let g = &self.goal;
        if !finite(&[r.px, r.py, r.vx, r.vy, g.px, g.py, g.vx, g.vy]) {
            return Err(Error::Scenario("robot state and goal must be finite".into()));
        }
        if self.humans.iter().any(|h| !finite(&[h.start[0], h.start[1], h.goal[0], h.goal[1]])) {
            return Err(Error::Scenario("human positions must be finite".into()));
        }
        self.planner_config.validate()?;
        self.predictor.validate()?;
        self.human_sim.validate(&self.predictor)?;
        self.reachability.validate()?;
        self.mcts.validate()?;
        self.rrt.validate()?;
        if self.predictor.dt != self.planner_config.dt {
            return Err(Error::Scenario("predictor and planner time steps differ".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Scenario> {
        let sc: Scenario = toml::from_str(s).map_err(|e| Error::Scenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
