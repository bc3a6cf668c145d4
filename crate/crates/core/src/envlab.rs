//! Pixel-rendered continuous-control toys.
//!
//! Both tasks render a bright anti-aliased disc for the controlled body and a
//! mid-gray disc for its goal on a black background, stack the last few frames
//! and run for a fixed number of agent steps with no early termination.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::rng::StreamRng;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMassPixel,
    PendulumPixel,
}

impl EnvKind {
    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::PointMassPixel => 2,
            EnvKind::PendulumPixel => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub name: EnvKind,
    pub frame_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Agent steps per episode.
    pub episode_len: usize,
    pub grayscale: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            name: EnvKind::PointMassPixel,
            frame_size: 24,
            frame_stack: 3,
            action_repeat: 2,
            episode_len: 200,
            grayscale: true,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("env: {m}")));
        if self.frame_size < 16 {
            return bad("frame_size must be >= 16");
        }
        if self.frame_stack == 0 || self.action_repeat == 0 || self.episode_len == 0 {
            return bad("frame_stack, action_repeat and episode_len must be >= 1");
        }
        if !self.grayscale {
            return bad("only grayscale observations are supported");
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.name.action_dim()
    }

    /// `[channels, H, W]` of a stacked observation.
    pub fn obs_shape(&self) -> [usize; 3] {
        [self.frame_stack, self.frame_size, self.frame_size]
    }

    pub fn physics_steps_per_episode(&self) -> usize {
        self.episode_len * self.action_repeat
    }
}

/// Stacked 8-bit frames; the real-valued view is `pixel / 255 ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    shape: [usize; 3],
    pixels: Vec<u8>,
}

impl Observation {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != pixels.len() {
            return Err(LabError::Shape(format!(
                "observation {shape:?} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.to_vec(),
            self.pixels.iter().map(|&p| to_unit::<T>(p)).collect(),
        )
        .expect("observation shape is consistent")
    }
}

#[inline]
pub(crate) fn to_unit<T: Real>(p: u8) -> T {
    T::lit(p as f64 / 255.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Raw simulator state, for oracle tests only.
    pub physics_state: Vec<f64>,
}

const DT: f64 = 0.05;
const POINT_DAMPING: f64 = 0.95;
const POINT_FORCE: f64 = 2.0;
pub const POINT_GOAL: [f64; 2] = [0.5, 0.5];
const PEND_G: f64 = 10.0;
const PEND_LEN: f64 = 1.0;
const PEND_MASS: f64 = 1.0;
const PEND_MAX_TORQUE: f64 = 2.0;
const PEND_MAX_SPEED: f64 = 8.0;
const PEND_DRAW_RADIUS: f64 = 0.75;
const AGENT_RADIUS: f64 = 0.15;
const GOAL_RADIUS: f64 = 0.2;
const GOAL_INTENSITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Physics {
    PointMass { pos: [f64; 2], vel: [f64; 2] },
    Pendulum { theta: f64, omega: f64 },
}

impl Physics {
    fn to_vec(self) -> Vec<f64> {
        match self {
            Physics::PointMass { pos, vel } => vec![pos[0], pos[1], vel[0], vel[1]],
            Physics::Pendulum { theta, omega } => vec![theta, omega],
        }
    }

    /// Advances one physics sub-step and returns the reward of the new state.
    fn substep(&mut self, action: &[f64]) -> f64 {
        match self {
            Physics::PointMass { pos, vel } => {
                for i in 0..2 {
                    vel[i] = POINT_DAMPING * vel[i] + DT * POINT_FORCE * action[i];
                    pos[i] += DT * vel[i];
                    if pos[i].abs() > 1.0 {
                        pos[i] = pos[i].clamp(-1.0, 1.0);
                        vel[i] = 0.0;
                    }
                }
                let d2 = (pos[0] - POINT_GOAL[0]).powi(2) + (pos[1] - POINT_GOAL[1]).powi(2);
                (-4.0 * d2).exp()
            }
            Physics::Pendulum { theta, omega } => {
                let torque = action[0] * PEND_MAX_TORQUE;
                let acc = 3.0 * PEND_G / (2.0 * PEND_LEN) * theta.sin()
                    + 3.0 / (PEND_MASS * PEND_LEN * PEND_LEN) * torque;
                *omega = (*omega + DT * acc).clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
                *theta = wrap_angle(*theta + DT * *omega);
                (1.0 + theta.cos()) / 2.0
            }
        }
    }

    /// Agent and goal disc centres in world coordinates (`[-1, 1]²`, y up).
    fn scene(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Physics::PointMass { pos, .. } => (pos, POINT_GOAL),
            Physics::Pendulum { theta, .. } => (
                [PEND_DRAW_RADIUS * theta.sin(), PEND_DRAW_RADIUS * theta.cos()],
                [0.0, PEND_DRAW_RADIUS],
            ),
        }
    }
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Anti-aliased coverage of a disc centred at world point `c` on a
/// `size × size` grid.
pub(crate) fn disc_coverage(c: [f64; 2], radius: f64, size: usize) -> Vec<f64> {
    let scale = size as f64 / 2.0;
    let (cx, cy) = ((c[0] + 1.0) * scale, (1.0 - c[1]) * scale);
    let r = radius * scale;
    let mut out = vec![0.0; size * size];
    for row in 0..size {
        let py = row as f64 + 0.5;
        for col in 0..size {
            let px = col as f64 + 0.5;
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            out[row * size + col] = (r + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

fn render_scene(agent: [f64; 2], goal: [f64; 2], size: usize) -> Vec<u8> {
    let a = disc_coverage(agent, AGENT_RADIUS, size);
    let g = disc_coverage(goal, GOAL_RADIUS, size);
    a.iter()
        .zip(&g)
        .map(|(&a, &g)| {
            let v = a.max(GOAL_INTENSITY * g).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        })
        .collect()
}

pub struct PixelEnv {
    spec: EnvSpec,
    rng: StreamRng,
    physics: Physics,
    frames: VecDeque<Vec<u8>>,
    t: usize,
    needs_reset: bool,
}

impl PixelEnv {
    /// `rng` should be the run's `env` stream.
    pub fn new(spec: EnvSpec, rng: StreamRng) -> Result<Self> {
        spec.validate()?;
        let physics = match spec.name {
            EnvKind::PointMassPixel => Physics::PointMass {
                pos: [0.0; 2],
                vel: [0.0; 2],
            },
            EnvKind::PendulumPixel => Physics::Pendulum {
                theta: 0.0,
                omega: 0.0,
            },
        };
        Ok(Self {
            spec,
            rng,
            physics,
            frames: VecDeque::new(),
            t: 0,
            needs_reset: true,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Draws a fresh initial state and fills the frame stack with its render.
    pub fn reset(&mut self) -> Observation {
        self.physics = match self.spec.name {
            EnvKind::PointMassPixel => Physics::PointMass {
                pos: [
                    self.rng.random_range(-1.0..=1.0),
                    self.rng.random_range(-1.0..=1.0),
                ],
                vel: [0.0; 2],
            },
            EnvKind::PendulumPixel => Physics::Pendulum {
                theta: self.rng.random_range(-PI..PI),
                omega: self.rng.random_range(-1.0..=1.0),
            },
        };
        self.restart_from_current()
    }

    fn restart_from_current(&mut self) -> Observation {
        let frame = self.render();
        self.frames.clear();
        for _ in 0..self.spec.frame_stack {
            self.frames.push_back(frame.clone());
        }
        self.t = 0;
        self.needs_reset = false;
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.needs_reset {
            return Err(LabError::Contract(
                "step called on a finished or un-reset episode".into(),
            ));
        }
        if action.len() != self.spec.action_dim() {
            return Err(LabError::Shape(format!(
                "action has {} components, env expects {}",
                action.len(),
                self.spec.action_dim()
            )));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(LabError::Contract("NaN action".into()));
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let mut reward = 0.0;
        for _ in 0..self.spec.action_repeat {
            reward += self.physics.substep(&a);
        }
        reward /= self.spec.action_repeat as f64;
        let frame = self.render();
        self.frames.pop_front();
        self.frames.push_back(frame);
        self.t += 1;
        let done = self.t == self.spec.episode_len;
        self.needs_reset = done;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done,
            physics_state: self.physics.to_vec(),
        })
    }

    /// Single grayscale frame of the current state, values `k/255`.
    pub fn render(&self) -> Vec<u8> {
        let (agent, goal) = self.physics.scene();
        render_scene(agent, goal, self.spec.frame_size)
    }

    pub fn render_tensor<T: Real>(&self) -> Tensor<T> {
        let s = self.spec.frame_size;
        Tensor::new(
            vec![1, s, s],
            self.render().into_iter().map(to_unit).collect(),
        )
        .expect("frame shape")
    }

    fn observation(&self) -> Observation {
        let mut pixels = Vec::with_capacity(self.frames.len() * self.frames[0].len());
        for f in &self.frames {
            pixels.extend_from_slice(f);
        }
        Observation::new(self.spec.obs_shape(), pixels).expect("stack shape")
    }

    /// Test API: the raw simulator state.
    pub fn physics_state(&self) -> Vec<f64> {
        self.physics.to_vec()
    }

    /// Test API: overwrite the simulator state and restart the episode from it.
    pub fn set_physics_state(&mut self, state: &[f64]) -> Result<Observation> {
        self.physics = match (self.spec.name, state) {
            (EnvKind::PointMassPixel, [x, y, vx, vy]) => Physics::PointMass {
                pos: [*x, *y],
                vel: [*vx, *vy],
            },
            (EnvKind::PendulumPixel, [theta, omega]) => Physics::Pendulum {
                theta: *theta,
                omega: *omega,
            },
            _ => {
                return Err(LabError::Shape(format!(
                    "physics state of length {} for {:?}",
                    state.len(),
                    self.spec.name
                )))
            }
        };
        Ok(self.restart_from_current())
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }
}
