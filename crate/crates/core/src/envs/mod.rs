//! Planar quasi-static interaction environments.
//!
//! Three physical tasks hide an object property behind contact (block mass
//! behind friction, block height behind touch location, toppling height
//! behind yield forces) and a linear diagnostic task gates a hidden scalar
//! behind a position threshold. All tasks share one episodic interface and
//! one observation layout: end-effector position plus sensed contact force.

mod physics;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use physics::{
    CONTACT_STIFFNESS, EE_DAMPING, FRICTION_MU, GRAVITY, IMPEDANCE_STIFFNESS, SLIDE_DAMPING,
};

/// Control interval in seconds.
pub const DT: f64 = 0.05;
/// Observation layout: (ee_x, ee_z, force_x, force_z).
pub const OBS_DIM: usize = 4;
/// Action layout: planar end-effector delta command in meters.
pub const ACTION_DIM: usize = 2;
/// Sensor noise scales.
pub const SIGMA_POS: f64 = 1e-3;
pub const SIGMA_FORCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    MassPush,
    HeightProbe,
    ToppleHeight,
    LinearDiag,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::MassPush => "mass_push",
            TaskKind::HeightProbe => "height_probe",
            TaskKind::ToppleHeight => "topple_height",
            TaskKind::LinearDiag => "linear_diag",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "mass_push" => Some(TaskKind::MassPush),
            "height_probe" => Some(TaskKind::HeightProbe),
            "topple_height" => Some(TaskKind::ToppleHeight),
            "linear_diag" => Some(TaskKind::LinearDiag),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub property_range: (f64, f64),
    pub episode_len: usize,
    /// Per-axis action clip in meters per step.
    pub action_clip: f64,
    pub sensor_noise: bool,
}

impl TaskSpec {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::MassPush => TaskSpec {
                task,
                property_range: (1.0, 2.0),
                episode_len: 100,
                action_clip: 0.02,
                sensor_noise: true,
            },
            TaskKind::HeightProbe => TaskSpec {
                task,
                property_range: (0.01, 0.15),
                episode_len: 100,
                action_clip: 0.02,
                sensor_noise: true,
            },
            TaskKind::ToppleHeight => TaskSpec {
                task,
                property_range: (0.05, 0.20),
                episode_len: 100,
                action_clip: 0.02,
                sensor_noise: true,
            },
            TaskKind::LinearDiag => TaskSpec {
                task,
                property_range: (-1.0, 1.0),
                episode_len: 50,
                action_clip: 0.2,
                sensor_noise: true,
            },
        }
    }

    pub fn prop_mid(&self) -> f64 {
        0.5 * (self.property_range.0 + self.property_range.1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvObservation {
    pub ee_pos: [f64; 2],
    pub contact_force: [f64; 2],
}

impl EnvObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.ee_pos[0],
            self.ee_pos[1],
            self.contact_force[0],
            self.contact_force[1],
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvState {
    pub ee_pos: [f64; 2],
    /// (x, z_bottom, theta) of the manipulated object; unused for LinearDiag.
    pub object_pose: [f64; 3],
    pub m_hidden: f64,
    pub contact: bool,
    pub t: usize,
}

/// Anything that maps observations to delta-position commands.
pub trait Policy {
    fn act(&mut self, obs: &EnvObservation, t: usize) -> [f64; 2];
}

/// Geometry shared by the physical tasks.
pub mod geom {
    /// Block half-width (all physical tasks use a 16 cm wide block).
    pub const BLOCK_HALF_W: f64 = 0.08;
    /// Block center x at reset.
    pub const BLOCK_X: f64 = 0.30;
    /// MassPush block height.
    pub const PUSH_BLOCK_H: f64 = 0.10;
    /// ToppleHeight block height (tall column).
    pub const TALL_BLOCK_H: f64 = 0.30;
    /// ToppleHeight block mass (fixed; the hidden property is the critical
    /// contact height directly).
    pub const TALL_BLOCK_MASS: f64 = 1.0;
    /// LinearDiag reveals the hidden scalar past this x.
    pub const DIAG_CONTACT_X: f64 = 0.5;
}

/// Home end-effector pose for a task.
fn home_pose(task: TaskKind) -> [f64; 2] {
    match task {
        // Left of the block, mid face height.
        TaskKind::MassPush | TaskKind::ToppleHeight => [0.05, 0.05],
        // Over the block, above the tallest it can be.
        TaskKind::HeightProbe => [geom::BLOCK_X, 0.17],
        TaskKind::LinearDiag => [0.0, 0.0],
    }
}

pub fn reset(spec: &TaskSpec, rng: &mut impl Rng) -> (EnvState, EnvObservation) {
    let (lo, hi) = spec.property_range;
    let m = rng.random_range(lo..hi);
    reset_with_property(spec, m, rng)
}

/// Reset with a forced hidden property (tests and evaluation sweeps).
pub fn reset_with_property(
    spec: &TaskSpec,
    m_hidden: f64,
    rng: &mut impl Rng,
) -> (EnvState, EnvObservation) {
    let state = EnvState {
        ee_pos: home_pose(spec.task),
        object_pose: [geom::BLOCK_X, 0.0, 0.0],
        m_hidden,
        contact: false,
        t: 0,
    };
    let obs = observe(&state, spec, rng);
    (state, obs)
}

fn sense_noise(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Build the sensed observation from a resolved state. Sensor noise, when
/// enabled, is applied to every channel on every step.
fn observe(state: &EnvState, spec: &TaskSpec, rng: &mut impl Rng) -> EnvObservation {
    let mut obs = EnvObservation {
        ee_pos: state.ee_pos,
        contact_force: [0.0, 0.0],
    };
    if spec.task == TaskKind::LinearDiag {
        if state.contact {
            obs.contact_force[0] = state.m_hidden;
        }
    }
    finalize_obs(obs, spec, rng)
}

fn finalize_obs(mut obs: EnvObservation, spec: &TaskSpec, rng: &mut impl Rng) -> EnvObservation {
    if spec.sensor_noise {
        obs.ee_pos[0] += sense_noise(rng, SIGMA_POS);
        obs.ee_pos[1] += sense_noise(rng, SIGMA_POS);
        obs.contact_force[0] += sense_noise(rng, SIGMA_FORCE);
        obs.contact_force[1] += sense_noise(rng, SIGMA_FORCE);
    }
    obs
}

pub fn clip_action(action: [f64; 2], clip: f64) -> [f64; 2] {
    [action[0].clamp(-clip, clip), action[1].clamp(-clip, clip)]
}

pub fn step(
    state: &EnvState,
    spec: &TaskSpec,
    action: [f64; 2],
    rng: &mut impl Rng,
) -> (EnvState, EnvObservation) {
    assert!(state.t < spec.episode_len, "episode is over");
    let a = clip_action(action, spec.action_clip);
    let mut next = state.clone();
    next.t += 1;

    if spec.task == TaskKind::LinearDiag {
        next.ee_pos[0] += a[0];
        next.ee_pos[1] += a[1];
        next.contact = next.ee_pos[0] > geom::DIAG_CONTACT_X;
        let obs = observe(&next, spec, rng);
        return (next, obs);
    }

    let force = physics::resolve_step(&mut next, spec, a);
    next.contact = force[0] != 0.0 || force[1] != 0.0;
    let obs = finalize_obs(
        EnvObservation {
            ee_pos: next.ee_pos,
            contact_force: force,
        },
        spec,
        rng,
    );
    (next, obs)
}

/// Raw material for an `EpisodeRecord`: what a collection episode produces.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub actions: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub m_true: f64,
    /// Ground-truth contact flag per step.
    pub contact: Vec<bool>,
    /// Steps whose resolved state was in contact.
    pub contact_steps: usize,
    /// Policy outputs replaced by zero because they were non-finite.
    pub nonfinite_actions: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contact_rate(&self) -> f64 {
        if self.actions.is_empty() {
            0.0
        } else {
            self.contact_steps as f64 / self.actions.len() as f64
        }
    }
}

/// Run one full episode under a policy.
pub fn episode(spec: &TaskSpec, policy: &mut dyn Policy, rng: &mut impl Rng) -> Trajectory {
    let (mut state, mut obs) = reset(spec, rng);
    episode_from(spec, &mut state, &mut obs, policy, rng)
}

/// Episode continuation from an existing reset state (used when the caller
/// needs the ground-truth property or a forced reset).
pub fn episode_from(
    spec: &TaskSpec,
    state: &mut EnvState,
    obs: &mut EnvObservation,
    policy: &mut dyn Policy,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut traj = Trajectory {
        actions: Vec::with_capacity(spec.episode_len),
        observations: Vec::with_capacity(spec.episode_len),
        m_true: state.m_hidden,
        contact: Vec::with_capacity(spec.episode_len),
        contact_steps: 0,
        nonfinite_actions: 0,
    };
    for t in 0..spec.episode_len {
        let mut a = policy.act(obs, t);
        if !a[0].is_finite() || !a[1].is_finite() {
            a = [0.0, 0.0];
            traj.nonfinite_actions += 1;
        }
        let (next, next_obs) = step(state, spec, a, rng);
        let clipped = clip_action(a, spec.action_clip);
        traj.actions.push(clipped.to_vec());
        traj.observations.push(next_obs.to_vec());
        traj.contact.push(next.contact);
        if next.contact {
            traj.contact_steps += 1;
        }
        *state = next;
        *obs = next_obs;
    }
    traj
}
