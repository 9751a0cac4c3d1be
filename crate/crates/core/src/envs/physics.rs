//! Quasi-static planar contact solver shared by the physical tasks.
//!
//! The end-effector is a point pulled toward its commanded target by an
//! impedance spring and damped viscously; objects push back through a
//! penalty spring. Objects themselves yield quasi-statically: a pushed
//! block slides once the tangential load exceeds Coulomb friction, and the
//! tall block pivots once the contact point is above its critical height.
//! Object yield is integrated implicitly so the measured force settles at
//! the yield threshold plus a small motion-proportional term at any speed.
//!
//! Because the impedance target re-anchors to the current position each
//! control step, the push force is bounded by stiffness times command:
//! penetration can never exceed `IMPEDANCE_STIFFNESS * clip /
//! CONTACT_STIFFNESS` (4 cm at default clips), which keeps every state
//! bounded under arbitrary action streams.

use super::{geom, EnvState, TaskKind, TaskSpec, DT};

pub const GRAVITY: f64 = 9.81;
pub const FRICTION_MU: f64 = 0.5;
/// Penalty stiffness for end-effector/object contact (N/m).
pub const CONTACT_STIFFNESS: f64 = 500.0;
/// Impedance spring pulling the end-effector toward its target (N/m).
pub const IMPEDANCE_STIFFNESS: f64 = 1000.0;
/// Viscous damping on the end-effector (N·s/m); with the impedance spring
/// this gives a 50 ms time constant, i.e. ~0.2 s settling.
pub const EE_DAMPING: f64 = 50.0;
/// Viscous resistance of a yielding object (N·s/m): measured force while
/// sliding is the friction threshold plus this times the slide speed.
pub const SLIDE_DAMPING: f64 = 0.5;
/// Lean angle past which the tall block has toppled over and leaves reach.
pub const TOPPLE_FALL_ANGLE: f64 = 0.6;

const N_SUBSTEPS: usize = 10;

struct Block {
    cx: f64,
    half_w: f64,
    height: f64,
    theta: f64,
}

enum Face {
    Left,
    Right,
    Top,
}

impl Block {
    /// x of the left/right face at height z, accounting for a forward lean
    /// about the base (small-angle).
    fn face_x(&self, side: &Face, z: f64) -> f64 {
        let lean = self.theta * z.max(0.0);
        match side {
            Face::Left => self.cx - self.half_w + lean,
            Face::Right => self.cx + self.half_w + lean,
            Face::Top => unreachable!(),
        }
    }

    /// Entry face and penetration depth for a point at `p` that was at
    /// `prev` one substep ago, or None if not in contact. The face is the
    /// one whose outward halfspace held the previous position, so a point
    /// pressing down on a thin block never "switches" to the bottom face.
    fn contact(&self, prev: [f64; 2], p: [f64; 2]) -> Option<(Face, f64)> {
        if self.theta.abs() >= TOPPLE_FALL_ANGLE {
            return None;
        }
        let left = self.face_x(&Face::Left, p[1]);
        let right = self.face_x(&Face::Right, p[1]);
        let inside = p[0] > left && p[0] < right && p[1] > 0.0 && p[1] < self.height;
        if !inside {
            return None;
        }
        let mut best: Option<(Face, f64)> = None;
        let mut consider = |face: Face, outside_before: bool, pen: f64| {
            if outside_before && best.as_ref().is_none_or(|(_, b)| pen < *b) {
                best = Some((face, pen));
            }
        };
        consider(Face::Left, prev[0] <= self.face_x(&Face::Left, prev[1]), p[0] - left);
        consider(Face::Right, prev[0] >= self.face_x(&Face::Right, prev[1]), right - p[0]);
        consider(Face::Top, prev[1] >= self.height, self.height - p[1]);
        if best.is_none() {
            // Deep or degenerate: fall back to the shallowest face.
            let pens = [(Face::Left, p[0] - left), (Face::Right, right - p[0]), (Face::Top, self.height - p[1])];
            best = pens
                .into_iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        }
        best
    }
}

fn block_for(state: &EnvState, spec: &TaskSpec) -> Block {
    let height = match spec.task {
        TaskKind::MassPush => geom::PUSH_BLOCK_H,
        TaskKind::HeightProbe => state.m_hidden,
        TaskKind::ToppleHeight => geom::TALL_BLOCK_H,
        TaskKind::LinearDiag => unreachable!("linear task has no geometry"),
    };
    Block {
        cx: state.object_pose[0],
        half_w: geom::BLOCK_HALF_W,
        height,
        theta: state.object_pose[2],
    }
}

enum Yield {
    Slide,
    Pivot,
}

/// Horizontal load (N) the object resists before yielding, given the height
/// of the contact point. Returns None for an immovable object.
fn yield_threshold(state: &EnvState, spec: &TaskSpec, contact_z: f64) -> Option<(f64, Yield)> {
    match spec.task {
        TaskKind::MassPush => Some((
            FRICTION_MU * state.m_hidden * GRAVITY,
            Yield::Slide,
        )),
        TaskKind::HeightProbe => None,
        TaskKind::ToppleHeight => {
            let slide = FRICTION_MU * geom::TALL_BLOCK_MASS * GRAVITY;
            if contact_z > state.m_hidden {
                // Above the critical height the block tips before it slides:
                // the toppling torque bound shrinks inversely with the lever.
                let pivot = slide * state.m_hidden / contact_z;
                Some((pivot, Yield::Pivot))
            } else {
                Some((slide, Yield::Slide))
            }
        }
        TaskKind::LinearDiag => unreachable!(),
    }
}

/// Advance one control interval; returns the contact force sensed at the
/// end-effector at the end of the interval.
pub fn resolve_step(state: &mut EnvState, spec: &TaskSpec, action: [f64; 2]) -> [f64; 2] {
    let target = [state.ee_pos[0] + action[0], state.ee_pos[1] + action[1]];
    let h = DT / N_SUBSTEPS as f64;
    let mut ee = state.ee_pos;
    let mut force = [0.0, 0.0];

    for _ in 0..N_SUBSTEPS {
        let prev = ee;
        let block = block_for(state, spec);
        force = [0.0, 0.0];

        if let Some((face, pen)) = block.contact(prev, ee) {
            let mut f_mag = CONTACT_STIFFNESS * pen;
            let (normal, tangential) = match face {
                Face::Left => ([-1.0, 0.0], true),
                Face::Right => ([1.0, 0.0], true),
                Face::Top => ([0.0, 1.0], false),
            };

            if tangential {
                if let Some((threshold, mode)) = yield_threshold(state, spec, ee[1]) {
                    if f_mag > threshold {
                        // Implicit viscous yield: the object moves enough in
                        // this substep that c·v equals the excess force after
                        // the move. Unconditionally stable, and the measured
                        // force lands at threshold + c·v.
                        let delta = (f_mag - threshold) * h
                            / (SLIDE_DAMPING + CONTACT_STIFFNESS * h);
                        let dir = -normal[0];
                        match mode {
                            Yield::Slide => state.object_pose[0] += dir * delta,
                            Yield::Pivot => {
                                // The face retreats by theta * z, so rotate
                                // by the same linear yield at the contact.
                                state.object_pose[2] += dir * delta / ee[1].max(1e-3);
                            }
                        }
                        f_mag -= CONTACT_STIFFNESS * delta;
                    }
                }
            }
            force = [f_mag * normal[0], f_mag * normal[1]];
        }

        // Table keeps the end-effector above the ground plane.
        if ee[1] < 0.0 {
            force[1] += CONTACT_STIFFNESS * -ee[1];
        }

        let fx = IMPEDANCE_STIFFNESS * (target[0] - ee[0]) + force[0];
        let fz = IMPEDANCE_STIFFNESS * (target[1] - ee[1]) + force[1];
        ee[0] += fx / EE_DAMPING * h;
        ee[1] += fz / EE_DAMPING * h;
    }

    state.ee_pos = ee;
    force
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{reset_with_property, step, EnvState, TaskKind, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless(task: TaskKind) -> TaskSpec {
        TaskSpec {
            sensor_noise: false,
            ..TaskSpec::for_task(task)
        }
    }

    fn drive(
        spec: &TaskSpec,
        state: &mut EnvState,
        action: [f64; 2],
        steps: usize,
    ) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut forces = Vec::new();
        for _ in 0..steps {
            let (next, obs) = step(state, spec, action, &mut rng);
            forces.push(obs.contact_force);
            *state = next;
        }
        forces
    }

    #[test]
    fn free_motion_tracks_command_with_settling() {
        // The tracker closes (1 - 0.9^10) = 65% of a re-anchored command per
        // control step, and a zero command moves nothing.
        let spec = noiseless(TaskKind::MassPush);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut state, _) = reset_with_property(&spec, 1.5, &mut rng);
        let start = state.ee_pos[0];
        let (next, _) = step(&state, &spec, [0.02, 0.0], &mut rng);
        state = next;
        let first = state.ee_pos[0] - start;
        let expect = 0.02 * (1.0 - 0.9f64.powi(10));
        assert!((first - expect).abs() < 1e-12, "first-step move {first}");
        for _ in 0..3 {
            let (next, _) = step(&state, &spec, [0.0, 0.0], &mut rng);
            state = next;
        }
        assert_eq!(state.ee_pos[0] - start, first);
    }

    #[test]
    fn height_probe_contact_onset_matches_block_top() {
        // Slow descent straight over the block: the first nonzero force must
        // appear with the end-effector within 2 mm of the hidden height.
        let spec = noiseless(TaskKind::HeightProbe);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in [0.013, 0.05, 0.11, 0.149] {
            let (mut state, _) = reset_with_property(&spec, m, &mut rng);
            state.ee_pos = [geom::BLOCK_X, m + 0.02];
            let mut onset = None;
            for _ in 0..40 {
                let (next, obs) = step(&state, &spec, [0.0, -0.002], &mut rng);
                state = next;
                if obs.contact_force[1] != 0.0 {
                    onset = Some(state.ee_pos[1]);
                    break;
                }
            }
            let z = onset.expect("never touched");
            assert!((z - m).abs() < 2e-3, "m={m}: onset at {z}");
        }
    }

    #[test]
    fn height_probe_block_is_immovable() {
        let spec = noiseless(TaskKind::HeightProbe);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut state, _) = reset_with_property(&spec, 0.10, &mut rng);
        state.ee_pos = [geom::BLOCK_X, 0.14];
        drive(&spec, &mut state, [0.0, -0.02], 30);
        assert_eq!(state.object_pose, [geom::BLOCK_X, 0.0, 0.0]);
    }

    #[test]
    fn steady_push_force_approximates_coulomb_friction() {
        // Full-speed sustained push: measured tangential force settles
        // within 5% of mu * m * g.
        let spec = noiseless(TaskKind::MassPush);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in [1.0, 1.5, 2.0] {
            let (mut state, _) = reset_with_property(&spec, m, &mut rng);
            state.ee_pos = [geom::BLOCK_X - geom::BLOCK_HALF_W - 0.005, 0.05];
            let forces = drive(&spec, &mut state, [0.02, 0.0], 60);
            let expect = FRICTION_MU * m * GRAVITY;
            let tail: Vec<f64> = forces[30..].iter().map(|f| f[0].abs()).collect();
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            assert!(
                (mean - expect).abs() < 0.05 * expect,
                "m={m}: mean force {mean} vs {expect}"
            );
            // And the block actually moved.
            assert!(state.object_pose[0] > geom::BLOCK_X + 0.01);
        }
    }

    #[test]
    fn below_threshold_push_moves_nothing() {
        // A light graze (impedance-limited to 0.5 N, below friction) must
        // register force but never budge the block.
        let spec = noiseless(TaskKind::MassPush);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut state, _) = reset_with_property(&spec, 2.0, &mut rng);
        state.ee_pos = [geom::BLOCK_X - geom::BLOCK_HALF_W - 0.002, 0.05];
        let forces = drive(&spec, &mut state, [0.0005, 0.0], 40);
        assert!(forces.iter().any(|f| f[0] != 0.0));
        assert!(forces.iter().all(|f| f[0].abs() < FRICTION_MU * 2.0 * GRAVITY));
        assert_eq!(state.object_pose[0], geom::BLOCK_X);
    }

    #[test]
    fn tall_block_pivots_above_critical_height_slides_below() {
        let spec = noiseless(TaskKind::ToppleHeight);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 0.12;

        // Contact 1 cm above the critical height: theta grows monotonically.
        let (mut state, _) = reset_with_property(&spec, m, &mut rng);
        state.ee_pos = [geom::BLOCK_X - geom::BLOCK_HALF_W - 0.003, m + 0.01];
        let mut thetas = Vec::new();
        for _ in 0..10 {
            drive(&spec, &mut state, [0.01, 0.0], 1);
            thetas.push(state.object_pose[2]);
        }
        assert!(thetas.windows(2).all(|w| w[1] >= w[0]));
        assert!(*thetas.last().unwrap() > 1e-3, "theta {:?}", thetas.last());
        assert_eq!(state.object_pose[0], geom::BLOCK_X, "no sliding while pivoting");

        // Contact 1 cm below: the block slides, theta stays put.
        let (mut state, _) = reset_with_property(&spec, m, &mut rng);
        state.ee_pos = [geom::BLOCK_X - geom::BLOCK_HALF_W - 0.003, m - 0.01];
        drive(&spec, &mut state, [0.01, 0.0], 10);
        assert!(state.object_pose[2].abs() < 1e-3);
        assert!(state.object_pose[0] > geom::BLOCK_X);
    }

    #[test]
    fn pivot_resistance_drops_with_contact_height() {
        // Yield force at 2x critical height is about half the sliding bound.
        let spec = noiseless(TaskKind::ToppleHeight);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 0.08;
        let slide_bound = FRICTION_MU * geom::TALL_BLOCK_MASS * GRAVITY;

        let mut peak_force = |z: f64| {
            let (mut state, _) = reset_with_property(&spec, m, &mut rng);
            state.ee_pos = [geom::BLOCK_X - geom::BLOCK_HALF_W - 0.003, z];
            let forces = drive(&spec, &mut state, [0.01, 0.0], 40);
            forces.iter().map(|f| f[0].abs()).fold(0.0, f64::max)
        };

        let high = peak_force(2.0 * m);
        let low = peak_force(0.5 * m);
        assert!(
            (high - 0.5 * slide_bound).abs() < 0.1 * slide_bound,
            "yield at 2x height: {high} vs {}",
            0.5 * slide_bound
        );
        assert!(
            (low - slide_bound).abs() < 0.1 * slide_bound,
            "yield at 0.5x height: {low} vs {slide_bound}"
        );
    }

    #[test]
    fn objects_never_sink_or_fly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for task in [TaskKind::MassPush, TaskKind::HeightProbe, TaskKind::ToppleHeight] {
            let spec = noiseless(task);
            let (mut state, _) = crate::envs::reset(&spec, &mut rng);
            for t in 0..spec.episode_len {
                let a = [
                    0.02 * ((t as f64 * 0.37).sin()),
                    0.02 * ((t as f64 * 0.73).cos()),
                ];
                let (next, obs) = step(&state, &spec, a, &mut rng);
                state = next;
                assert!(state.object_pose[1] >= -1e-6);
                assert!(state.ee_pos.iter().all(|v| v.is_finite()));
                assert!(obs.contact_force.iter().all(|v| v.is_finite()));
            }
        }
    }
}
