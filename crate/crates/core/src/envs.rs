//! Built-in episodic environments.
//!
//! All environments take a real action vector with components in `[-1, 1]`
//! (the range of a tanh policy head). The cyclic MDP reads that vector as
//! scores over its three discrete actions and takes the argmax.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::rng_from_seed;

/// Snapshot of an environment after `reset` or `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    /// Episode is over, either by termination or by reaching the horizon.
    pub done: bool,
    /// Episode ended by the task itself; bootstrapping past this step is invalid.
    /// Horizon timeouts set `done` but not `terminal`.
    pub terminal: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn observation_dim(&self) -> usize;
    /// Length of the action vector accepted by `step`.
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Declared `[r_min, r_max]` of per-step rewards.
    fn reward_range(&self) -> (f64, f64);
    fn reset(&mut self, seed: u64) -> EnvState;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    fn state(&self) -> EnvState;
}

/// Environment selector used in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "cyclic-mdp")]
    CyclicMdp,
    #[serde(rename = "pendulum")]
    Pendulum,
    #[serde(rename = "pointmass-sparse")]
    PointMassSparse,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [
        EnvKind::CyclicMdp,
        EnvKind::Pendulum,
        EnvKind::PointMassSparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CyclicMdp => "cyclic-mdp",
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointMassSparse => "pointmass-sparse",
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::CyclicMdp => Box::new(CyclicMdp::new()),
            EnvKind::Pendulum => Box::new(Pendulum::new()),
            EnvKind::PointMassSparse => Box::new(PointMassSparse::new()),
        }
    }

    pub fn observation_dim(self) -> usize {
        self.make().observation_dim()
    }

    pub fn action_dim(self) -> usize {
        self.make().action_dim()
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Env(format!("unknown environment `{s}`")))
    }
}

fn ensure_running(done: bool, name: &str) -> Result<()> {
    if done {
        Err(Error::Env(format!(
            "{name}: step called on a finished episode; call reset first"
        )))
    } else {
        Ok(())
    }
}

fn ensure_finite(action: &[f64]) -> Result<()> {
    if action.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::Env("action contains non-finite values".into()))
    }
}

// ---------------------------------------------------------------------------
// Cyclic MDP

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CyclicAction {
    Clockwise,
    Anticlockwise,
    Stay,
}

impl CyclicAction {
    fn from_index(i: usize) -> Self {
        match i {
            0 => CyclicAction::Clockwise,
            1 => CyclicAction::Anticlockwise,
            _ => CyclicAction::Stay,
        }
    }

    /// Action vector whose argmax selects this action.
    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![-1.0; 3];
        v[self as usize] = 1.0;
        v
    }
}

/// Three states S0 -> S1 -> S2 -> S0. Clockwise earns +1; anything else earns
/// -1 and ends the episode. Horizon 2000.
#[derive(Debug, Clone)]
pub struct CyclicMdp {
    position: usize,
    step_index: usize,
    done: bool,
}

impl CyclicMdp {
    pub const HORIZON: usize = 2000;

    pub fn new() -> Self {
        CyclicMdp {
            position: 0,
            step_index: 0,
            done: false,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; 3];
        obs[self.position] = 1.0;
        obs
    }

    pub fn step_action(&mut self, action: CyclicAction) -> Result<StepResult> {
        ensure_running(self.done, self.name())?;
        self.step_index += 1;
        let (reward, terminal) = match action {
            CyclicAction::Clockwise => {
                self.position = (self.position + 1) % 3;
                (1.0, false)
            }
            CyclicAction::Anticlockwise => {
                self.position = (self.position + 2) % 3;
                (-1.0, true)
            }
            CyclicAction::Stay => (-1.0, true),
        };
        self.done = terminal || self.step_index >= Self::HORIZON;
        Ok(StepResult {
            next_observation: self.observation(),
            reward,
            done: self.done,
            terminal,
        })
    }
}

impl Default for CyclicMdp {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CyclicMdp {
    fn name(&self) -> &'static str {
        EnvKind::CyclicMdp.name()
    }

    fn observation_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reward_range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn reset(&mut self, _seed: u64) -> EnvState {
        *self = CyclicMdp::new();
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_dim("cyclic-mdp action", 3, action.len())?;
        ensure_finite(action)?;
        // First maximum wins.
        let mut best = 0;
        for (i, &a) in action.iter().enumerate() {
            if a > action[best] {
                best = i;
            }
        }
        self.step_action(CyclicAction::from_index(best))
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
            done: self.done,
        }
    }
}

// ---------------------------------------------------------------------------
// Pendulum swing-up

/// Classic torque-limited pendulum swing-up. Observation `(cos θ, sin θ, ω)`,
/// action in `[-1, 1]` scaled to a torque in `[-2, 2]`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    theta: f64,
    omega: f64,
    step_index: usize,
    done: bool,
}

impl Pendulum {
    pub const HORIZON: usize = 200;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const INIT_OMEGA: f64 = 1.0;
    const DT: f64 = 0.05;
    const GRAVITY: f64 = 10.0;
    const MASS: f64 = 1.0;
    const LENGTH: f64 = 1.0;

    pub fn new() -> Self {
        Pendulum {
            theta: PI,
            omega: 0.0,
            step_index: 0,
            done: false,
        }
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.omega
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn name(&self) -> &'static str {
        EnvKind::Pendulum.name()
    }

    fn observation_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reward_range(&self) -> (f64, f64) {
        let worst = PI * PI
            + 0.1 * Self::MAX_SPEED * Self::MAX_SPEED
            + 0.001 * Self::MAX_TORQUE * Self::MAX_TORQUE;
        (-worst, 0.0)
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = rng_from_seed(seed);
        self.theta = rng.random_range(-PI..=PI);
        self.omega = rng.random_range(-Self::INIT_OMEGA..=Self::INIT_OMEGA);
        self.step_index = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        ensure_running(self.done, self.name())?;
        check_dim("pendulum action", 1, action.len())?;
        ensure_finite(action)?;
        let u = action[0].clamp(-1.0, 1.0) * Self::MAX_TORQUE;
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.omega * self.omega + 0.001 * u * u);

        let (g, m, l, dt) = (Self::GRAVITY, Self::MASS, Self::LENGTH, Self::DT);
        let omega = (self.omega
            + (3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 / (m * l * l) * u) * dt)
            .clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += omega * dt;
        self.omega = omega;
        self.step_index += 1;
        self.done = self.step_index >= Self::HORIZON;
        Ok(StepResult {
            next_observation: self.observation(),
            reward,
            done: self.done,
            terminal: false,
        })
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
            done: self.done,
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse point mass

/// Damped point mass in the box `[-1, 1]^2` with a goal disc at the origin.
/// Reward is 1 inside the goal radius and 0 elsewhere; horizon 300.
#[derive(Debug, Clone)]
pub struct PointMassSparse {
    position: [f64; 2],
    velocity: [f64; 2],
    step_index: usize,
    done: bool,
}

impl PointMassSparse {
    pub const HORIZON: usize = 300;
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const START_RADIUS: (f64, f64) = (0.3, 0.6);
    const DT: f64 = 0.1;
    const DAMPING: f64 = 0.1;
    const FORCE: f64 = 1.0;

    pub fn new() -> Self {
        PointMassSparse {
            position: [0.5, 0.0],
            velocity: [0.0, 0.0],
            step_index: 0,
            done: false,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

impl Default for PointMassSparse {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMassSparse {
    fn name(&self) -> &'static str {
        EnvKind::PointMassSparse.name()
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reward_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = rng_from_seed(seed);
        let (lo, hi) = Self::START_RADIUS;
        let radius = rng.random_range(lo..=hi);
        let angle = rng.random_range(-PI..PI);
        self.position = [radius * angle.cos(), radius * angle.sin()];
        self.velocity = [0.0, 0.0];
        self.step_index = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        ensure_running(self.done, self.name())?;
        check_dim("pointmass action", 2, action.len())?;
        ensure_finite(action)?;
        for k in 0..2 {
            let force = action[k].clamp(-1.0, 1.0) * Self::FORCE;
            let v = (1.0 - Self::DAMPING) * self.velocity[k] + force * Self::DT;
            let mut p = self.position[k] + v * Self::DT;
            let mut v = v;
            if !(-1.0..=1.0).contains(&p) {
                p = p.clamp(-1.0, 1.0);
                v = 0.0;
            }
            self.position[k] = p;
            self.velocity[k] = v;
        }
        self.step_index += 1;
        self.done = self.step_index >= Self::HORIZON;
        let reward = if self.distance_to_goal() < Self::GOAL_RADIUS {
            1.0
        } else {
            0.0
        };
        Ok(StepResult {
            next_observation: self.observation(),
            reward,
            done: self.done,
            terminal: false,
        })
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
            done: self.done,
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub episodic_return: f64,
    pub length: usize,
}

/// Runs one episode from `reset(seed)` with `policy` mapping observations to
/// actions. Returns the undiscounted reward sum.
pub fn run_episode<P>(env: &mut dyn Environment, mut policy: P, seed: u64) -> Result<EpisodeOutcome>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut obs = env.reset(seed).observation;
    let mut total = 0.0;
    let mut length = 0;
    loop {
        let action = policy(&obs)?;
        let step = env.step(&action)?;
        total += step.reward;
        length += 1;
        if step.done {
            break;
        }
        obs = step.next_observation;
    }
    Ok(EpisodeOutcome {
        episodic_return: total,
        length,
    })
}
