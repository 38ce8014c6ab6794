//! Deterministic reach-and-align environment with a scripted expert.
//!
//! The agent first has to reach the neighborhood of the task-selected
//! target among distractors, then settle within `eps_fine` of it. The
//! planner observation carries the task id but only grid-quantized
//! positions; the refiner observation carries exact positions but no task
//! id.

pub mod dataset;

use crate::action::ActionVector;
use crate::error::{config_err, Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// Uniform placement with rejection on the separation constraint.
    #[default]
    Random,
    /// Targets evenly spaced on a circle around the start (D = 2 only).
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub dims: usize,
    pub num_targets: usize,
    /// Displacement per unit of action.
    pub step_size: f64,
    /// Success tolerance in max-norm.
    pub eps_fine: f64,
    pub horizon: usize,
    pub min_separation: f64,
    /// Targets lie in `[-target_extent, target_extent]^D`.
    pub target_extent: f64,
    pub start_jitter: f64,
    /// Minimum max-norm distance between the start and any target.
    pub min_start_distance: f64,
    pub grid_cells: usize,
    pub expert_noise: f64,
    pub layout: Layout,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            num_targets: 4,
            step_size: 0.05,
            eps_fine: 0.01,
            horizon: 200,
            min_separation: 0.5,
            target_extent: 0.9,
            start_jitter: 0.05,
            min_start_distance: 0.25,
            grid_cells: 20,
            expert_noise: 0.02,
            layout: Layout::Random,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(config_err("env dims must be >= 1"));
        }
        if self.num_targets < 2 {
            return Err(config_err("num_targets must be >= 2"));
        }
        if self.layout == Layout::Symmetric && self.dims != 2 {
            return Err(config_err("symmetric layout requires dims = 2"));
        }
        if self.grid_cells == 0 || self.horizon == 0 {
            return Err(config_err("grid_cells and horizon must be positive"));
        }
        Ok(())
    }

    pub fn planner_obs_dim(&self) -> usize {
        self.dims * (1 + self.num_targets) + self.num_targets
    }

    pub fn refiner_obs_dim(&self) -> usize {
        self.dims * (1 + self.num_targets)
    }

    /// Center of the grid cell containing `x`.
    pub fn cell_center(&self, x: f64) -> f64 {
        let n = self.grid_cells as f64;
        let cell = ((x + 1.0) / 2.0 * n).floor().clamp(0.0, n - 1.0);
        2.0 * (cell + 0.5) / n - 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent_pos: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub task_id: usize,
    pub step_count: usize,
}

impl EnvState {
    pub fn goal(&self) -> &[f64] {
        &self.targets[self.task_id]
    }

    /// Max-norm distance from the agent to the true target.
    pub fn goal_error(&self) -> f64 {
        max_norm_dist(&self.agent_pos, self.goal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Planner,
    Refiner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub done: bool,
    pub success: bool,
}

fn max_norm_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn euclid_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

pub fn reset(cfg: &EnvConfig, seed: u64, task_id: usize) -> Result<EnvState> {
    cfg.validate()?;
    if task_id >= cfg.num_targets {
        return Err(Error::OutOfRange(format!(
            "task_id {task_id} outside [0, {})",
            cfg.num_targets
        )));
    }
    let mut rng = RngState::new(seed);
    let agent_pos: Vec<f64> = (0..cfg.dims)
        .map(|_| rng.uniform_range(-cfg.start_jitter, cfg.start_jitter))
        .collect();
    let targets = match cfg.layout {
        Layout::Random => place_random(cfg, &agent_pos, &mut rng)?,
        Layout::Symmetric => {
            let radius = 0.6;
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            (0..cfg.num_targets)
                .map(|g| {
                    let th = phase + std::f64::consts::TAU * g as f64 / cfg.num_targets as f64;
                    vec![radius * th.cos(), radius * th.sin()]
                })
                .collect()
        }
    };
    Ok(EnvState {
        agent_pos,
        targets,
        task_id,
        step_count: 0,
    })
}

fn place_random(cfg: &EnvConfig, start: &[f64], rng: &mut RngState) -> Result<Vec<Vec<f64>>> {
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_targets);
    let mut tries = 0;
    while targets.len() < cfg.num_targets {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES {
            return Err(Error::Generation(format!(
                "could not place {} targets with separation {} after {} tries",
                cfg.num_targets, cfg.min_separation, MAX_PLACEMENT_TRIES
            )));
        }
        let cand: Vec<f64> = (0..cfg.dims)
            .map(|_| rng.uniform_range(-cfg.target_extent, cfg.target_extent))
            .collect();
        if max_norm_dist(&cand, start) < cfg.min_start_distance {
            continue;
        }
        if targets.iter().all(|t| euclid_dist(t, &cand) >= cfg.min_separation) {
            targets.push(cand);
        }
    }
    Ok(targets)
}

pub fn step(cfg: &EnvConfig, state: &EnvState, action: &ActionVector) -> StepOutcome {
    let agent_pos: Vec<f64> = state
        .agent_pos
        .iter()
        .zip(action.as_slice())
        .map(|(p, a)| (p + a * cfg.step_size).clamp(-1.0, 1.0))
        .collect();
    let next = EnvState {
        agent_pos,
        targets: state.targets.clone(),
        task_id: state.task_id,
        step_count: state.step_count + 1,
    };
    let success = next.goal_error() < cfg.eps_fine;
    let done = success || next.step_count >= cfg.horizon;
    StepOutcome {
        state: next,
        done,
        success,
    }
}

/// Straight-line proportional controller toward the true target. The
/// command is scaled down uniformly when any component would exceed 1, so
/// all axes arrive together. Noise is Gaussian, truncated to one sigma.
pub fn expert_action(cfg: &EnvConfig, state: &EnvState, rng: &mut RngState) -> ActionVector {
    let mut a: Vec<f64> = state
        .goal()
        .iter()
        .zip(&state.agent_pos)
        .map(|(g, p)| (g - p) / cfg.step_size)
        .collect();
    let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        a.iter_mut().for_each(|v| *v /= peak);
    }
    for v in &mut a {
        let noise = (rng.normal() * cfg.expert_noise).clamp(-cfg.expert_noise, cfg.expert_noise);
        *v += noise;
    }
    ActionVector::clipped(a)
}

pub fn observe(cfg: &EnvConfig, state: &EnvState, channel: Channel) -> Vec<f64> {
    match channel {
        Channel::Planner => {
            let mut obs: Vec<f64> = state
                .agent_pos
                .iter()
                .chain(state.targets.iter().flatten())
                .map(|&x| cfg.cell_center(x))
                .collect();
            obs.extend((0..cfg.num_targets).map(|g| if g == state.task_id { 1.0 } else { 0.0 }));
            obs
        }
        Channel::Refiner => state
            .agent_pos
            .iter()
            .chain(state.targets.iter().flatten())
            .copied()
            .collect(),
    }
}

/// Observation pairs and actions of one episode, plus the terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<ActionVector>,
    pub final_state: EnvState,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn rollout_expert(cfg: &EnvConfig, seed: u64, task_id: usize) -> Result<Trajectory> {
    rollout_perturbed(cfg, seed, task_id, 0.0)
}

/// Expert rollout where the executed action carries extra Gaussian noise
/// of scale `exec_noise` while the agent is more than one step from the
/// goal. Recorded actions stay the expert's labels, so the data covers
/// states slightly off the expert path with corrective targets.
pub fn rollout_perturbed(cfg: &EnvConfig, seed: u64, task_id: usize, exec_noise: f64) -> Result<Trajectory> {
    let mut state = reset(cfg, seed, task_id)?;
    let mut rng = RngState::new(crate::rng::mix_seed(seed, 0xE4_9E27));
    let mut exec_rng = RngState::new(crate::rng::mix_seed(seed, 0x9E_27B0));
    let mut states = Vec::new();
    let mut actions = Vec::new();
    loop {
        let action = expert_action(cfg, &state, &mut rng);
        let executed = if exec_noise > 0.0 && state.goal_error() > cfg.step_size {
            ActionVector::clipped(
                action
                    .as_slice()
                    .iter()
                    .map(|a| a + exec_noise * exec_rng.normal())
                    .collect(),
            )
        } else {
            action.clone()
        };
        let out = step(cfg, &state, &executed);
        states.push(state);
        actions.push(action);
        state = out.state;
        if out.done {
            return Ok(Trajectory {
                states,
                actions,
                final_state: state,
                success: out.success,
            });
        }
    }
}
