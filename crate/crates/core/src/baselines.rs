//! Hand-written reference policies.
//!
//! `ScriptedPolicy` encodes a competent probing routine per task and is the
//! reference point for evaluating learned controllers; `RandomWalkPolicy` is
//! the uninformed floor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{geom, EnvObservation, Policy, TaskKind, TaskSpec};

/// Move toward a waypoint with per-axis clipping.
fn toward(from: [f64; 2], to: [f64; 2], clip: f64) -> [f64; 2] {
    [
        (to[0] - from[0]).clamp(-clip, clip),
        (to[1] - from[1]).clamp(-clip, clip),
    ]
}

fn near(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
    (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
}

pub struct ScriptedPolicy {
    spec: TaskSpec,
    state: Script,
}

enum Script {
    /// Approach the block face, then push at a steady crawl.
    MassPush { pushing: bool },
    /// Align over the block, descend slowly, freeze on firm contact.
    HeightProbe { aligned: bool, latched: bool },
    /// Tap the face at increasing heights; each tap presses then retreats.
    Topple {
        tap: usize,
        phase: TapPhase,
        hold: usize,
    },
    /// March into the revealing region and stay there.
    LinearDiag,
}

enum TapPhase {
    Position,
    Press,
    Retreat,
}

/// Tap heights for the topple routine, spanning the property range.
const TAP_HEIGHTS: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
const TAP_PRESS_STEPS: usize = 8;
const TAP_RETREAT_STEPS: usize = 2;

impl ScriptedPolicy {
    pub fn new(spec: TaskSpec) -> Self {
        let state = match spec.task {
            TaskKind::MassPush => Script::MassPush { pushing: false },
            TaskKind::HeightProbe => Script::HeightProbe {
                aligned: false,
                latched: false,
            },
            TaskKind::ToppleHeight => Script::Topple {
                tap: 0,
                phase: TapPhase::Position,
                hold: 0,
            },
            TaskKind::LinearDiag => Script::LinearDiag,
        };
        ScriptedPolicy { spec, state }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &EnvObservation, _t: usize) -> [f64; 2] {
        let clip = self.spec.action_clip;
        let ee = obs.ee_pos;
        let f = obs.contact_force;
        match &mut self.state {
            Script::MassPush { pushing } => {
                if f[0].abs() > 0.2 {
                    *pushing = true;
                }
                if *pushing {
                    [clip, 0.0]
                } else {
                    toward(ee, [geom::BLOCK_X, 0.05], clip)
                }
            }
            Script::HeightProbe { aligned, latched } => {
                if f[1].abs() > 0.5 {
                    *latched = true;
                }
                if *latched {
                    // Keep a light press so contact persists; penetration
                    // settles around 2 mm (1 N).
                    [0.0, -0.001]
                } else if !*aligned {
                    if near(ee, [geom::BLOCK_X, 0.18], 5e-3) {
                        *aligned = true;
                        [0.0, -0.01]
                    } else {
                        toward(ee, [geom::BLOCK_X, 0.18], clip)
                    }
                } else {
                    [0.0, -0.01]
                }
            }
            Script::Topple { tap, phase, hold } => {
                if *tap >= TAP_HEIGHTS.len() {
                    return [0.0, 0.0];
                }
                let face_x = geom::BLOCK_X - geom::BLOCK_HALF_W;
                let stage = [face_x - 0.008, TAP_HEIGHTS[*tap]];
                match phase {
                    TapPhase::Position => {
                        if near(ee, stage, 3e-3) {
                            *phase = TapPhase::Press;
                            *hold = 0;
                        }
                        toward(ee, stage, clip)
                    }
                    TapPhase::Press => {
                        *hold += 1;
                        if *hold >= TAP_PRESS_STEPS {
                            *phase = TapPhase::Retreat;
                            *hold = 0;
                        }
                        [0.01, 0.0]
                    }
                    TapPhase::Retreat => {
                        *hold += 1;
                        if *hold >= TAP_RETREAT_STEPS {
                            *phase = TapPhase::Position;
                            *tap += 1;
                            *hold = 0;
                        }
                        [-clip, 0.0]
                    }
                }
            }
            Script::LinearDiag => {
                if ee[0] > geom::DIAG_CONTACT_X + 0.05 {
                    [0.0, 0.0]
                } else {
                    [clip, 0.0]
                }
            }
        }
    }
}

/// Gaussian random-walk commands, clipped to the task's action bounds. The
/// walk itself is unclipped and only the emitted action is clamped, the same
/// law the planner's candidate sequences follow.
pub struct RandomWalkPolicy {
    rng: ChaCha8Rng,
    walk_std: f64,
    clip: f64,
    last: [f64; 2],
}

impl RandomWalkPolicy {
    /// Default increment std matches the planner's `walk_std`.
    pub fn new(spec: &TaskSpec, seed: u64) -> Self {
        Self::with_std(spec, seed, 0.10)
    }

    pub fn with_std(spec: &TaskSpec, seed: u64, walk_std: f64) -> Self {
        RandomWalkPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            walk_std,
            clip: spec.action_clip,
            last: [0.0, 0.0],
        }
    }
}

impl Policy for RandomWalkPolicy {
    fn act(&mut self, _obs: &EnvObservation, _t: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (a, o) in self.last.iter_mut().zip(&mut out) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *a += self.walk_std * z;
            *o = a.clamp(-self.clip, self.clip);
        }
        out
    }
}
