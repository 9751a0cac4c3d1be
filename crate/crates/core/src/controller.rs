//! Receding-horizon action selection that minimizes posterior property
//! uncertainty.
//!
//! Candidates are clipped Gaussian random walks. Each is scored by simulating
//! its own synthetic future under the learned model — sample a state from the
//! current belief, roll dynamics and observations forward, run the filter on
//! what it would see — and summing `ln sigma_m` over the predicted posteriors.
//! All candidates share the same noise streams so the comparison is paired.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ekf::{
    extract_belief, predict, predict_t, property_marginal, stage_belief, update, update_t,
    GaussianBelief,
};
use crate::envs::{EnvObservation, Policy, TaskSpec};
use crate::model::{AugmentedState, ModelDims, ModelVars, WorldModel};
use crate::tape::Tape;
use crate::Result;

/// One open-loop plan: `horizon` actions of `a_dim` entries each.
pub type ActionSequence = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    pub n_candidates: usize,
    pub horizon: usize,
    /// Belief samples averaged per candidate score.
    pub n_belief_samples: usize,
    /// Std of the random-walk increments, before clipping.
    pub walk_std: f64,
    pub action_clip: f64,
}

impl MpcConfig {
    pub fn for_task(spec: &TaskSpec) -> Self {
        MpcConfig {
            n_candidates: 64,
            horizon: 10,
            n_belief_samples: 4,
            walk_std: 0.10,
            action_clip: spec.action_clip,
        }
    }
}

/// Draws `n_candidates` action sequences. The walk itself is unclipped; the
/// emitted actions are clamped to the box, so a saturated plan can still back
/// off later in the horizon.
pub fn sample_candidates(
    config: &MpcConfig,
    a_dim: usize,
    rng: &mut impl Rng,
) -> Vec<ActionSequence> {
    (0..config.n_candidates)
        .map(|_| {
            let mut walk = vec![0.0; a_dim];
            let mut seq = Vec::with_capacity(config.horizon);
            for _ in 0..config.horizon {
                for w in walk.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *w += config.walk_std * z;
                }
                seq.push(
                    walk.iter()
                        .map(|w| w.clamp(-config.action_clip, config.action_clip))
                        .collect(),
                );
            }
            seq
        })
        .collect()
}

/// Noise for one imagined rollout: an initial belief draw plus per-step
/// transition and observation draws. Reusing one of these across candidates
/// gives common random numbers.
pub struct RolloutNoise {
    init: Vec<f64>,
    trans: Vec<Vec<f64>>,
    obs: Vec<Vec<f64>>,
}

impl RolloutNoise {
    pub fn draw(dims: &ModelDims, horizon: usize, rng: &mut impl Rng) -> Self {
        let aug = dims.n + 1;
        let gauss = |len: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..len).map(|_| StandardNormal.sample(rng)).collect()
        };
        RolloutNoise {
            init: gauss(aug, rng),
            trans: (0..horizon).map(|_| gauss(aug, rng)).collect(),
            obs: (0..horizon).map(|_| gauss(dims.d, rng)).collect(),
        }
    }
}

fn rollout_core(
    model: &WorldModel,
    vars: &ModelVars,
    tape: &mut Tape,
    mark: crate::tape::TapeMark,
    belief: &GaussianBelief,
    seq: &[Vec<f64>],
    noise: &RolloutNoise,
) -> Result<Vec<GaussianBelief>> {
    let mut aug = AugmentedState::from_vec(&belief.sample(&noise.init));
    let mut cur = belief.clone();
    let mut beliefs = Vec::with_capacity(seq.len());
    for (h, action) in seq.iter().enumerate() {
        tape.truncate(mark);
        let aug_leaf = tape.leaf_vec(&aug.to_vec());
        let (f_mean, f_sqrt) = model.dynamics_t(tape, vars, aug_leaf, action);
        let mean = tape.value(f_mean).to_vec();
        let sqrt = tape.value(f_sqrt).to_vec();
        let next: Vec<f64> = mean
            .iter()
            .zip(&sqrt)
            .zip(&noise.trans[h])
            .map(|((m, s), z)| m + s * z)
            .collect();

        let next_leaf = tape.leaf_vec(&next);
        let (h_mean, h_sqrt) = model.observe_t(tape, vars, next_leaf);
        let mean_raw = model.obs_stats.denormalize(tape.value(h_mean));
        let obs_raw: Vec<f64> = mean_raw
            .iter()
            .zip(tape.value(h_sqrt).iter().zip(&model.obs_stats.std))
            .zip(&noise.obs[h])
            .map(|((m, (g, s)), z)| m + g * s * z)
            .collect();

        let staged = stage_belief(tape, &cur);
        let bar = predict_t(tape, model, vars, &staged, action)?;
        let post = update_t(tape, model, vars, &bar, &obs_raw)?;
        cur = extract_belief(tape, &post);
        beliefs.push(cur.clone());
        aug = AugmentedState::from_vec(&next);
    }
    Ok(beliefs)
}

/// Rolls the filter through one imagined future and returns the posterior
/// belief after every step. The caller's belief is not touched; divergence
/// surfaces as an error.
pub fn simulate_belief_rollout(
    model: &WorldModel,
    belief: &GaussianBelief,
    seq: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<Vec<GaussianBelief>> {
    let noise = RolloutNoise::draw(&model.dims, seq.len(), rng);
    let mut tape = Tape::new();
    let vars = model.stage(&mut tape);
    let mark = tape.mark();
    rollout_core(model, &vars, &mut tape, mark, belief, seq, &noise)
}

/// Sum of `ln sigma_m` over a belief trajectory — up to constants, the
/// accumulated entropy of the property marginal.
pub fn trajectory_cost(beliefs: &[GaussianBelief]) -> f64 {
    beliefs
        .iter()
        .map(|b| property_marginal(b).1.ln())
        .sum()
}

#[derive(Debug, Clone)]
pub struct MpcDiagnostics {
    pub costs: Vec<f64>,
    /// None when every candidate diverged.
    pub chosen: Option<usize>,
    /// Predicted `sigma_m` along the chosen candidate's first rollout.
    pub predicted_sigma: Vec<f64>,
    pub divergences: usize,
}

fn argmin(costs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in costs.iter().enumerate() {
        if !c.is_finite() {
            continue;
        }
        match best {
            Some(b) if costs[b] <= *c => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Scores candidates with common random numbers and returns the first action
/// of the cheapest one. Ties break toward the lowest index; if every
/// candidate's filter diverged the action is zero.
///
/// Draw order from `rng`: candidates first, then `n_belief_samples` noise
/// streams.
pub fn mpc_step(
    model: &WorldModel,
    belief: &GaussianBelief,
    config: &MpcConfig,
    rng: &mut impl Rng,
) -> (Vec<f64>, MpcDiagnostics) {
    let a_dim = model.dims.a_dim;
    let candidates = sample_candidates(config, a_dim, rng);
    let noises: Vec<RolloutNoise> = (0..config.n_belief_samples)
        .map(|_| RolloutNoise::draw(&model.dims, config.horizon, rng))
        .collect();

    let mut tape = Tape::new();
    let vars = model.stage(&mut tape);
    let mark = tape.mark();

    let mut costs = Vec::with_capacity(candidates.len());
    let mut first_sigmas: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    let mut divergences = 0;
    for seq in &candidates {
        let mut acc = 0.0;
        let mut dead = false;
        let mut sig = Vec::new();
        for (i, noise) in noises.iter().enumerate() {
            match rollout_core(model, &vars, &mut tape, mark, belief, seq, noise) {
                Ok(bs) => {
                    acc += trajectory_cost(&bs);
                    if i == 0 {
                        sig = bs.iter().map(|b| property_marginal(b).1).collect();
                    }
                }
                Err(_) => {
                    divergences += 1;
                    dead = true;
                    break;
                }
            }
        }
        costs.push(if dead {
            f64::INFINITY
        } else {
            acc / noises.len().max(1) as f64
        });
        first_sigmas.push(sig);
    }

    let chosen = argmin(&costs);
    let action = match chosen {
        Some(k) => candidates[k]
            .first()
            .cloned()
            .unwrap_or_else(|| vec![0.0; a_dim]),
        None => vec![0.0; a_dim],
    };
    let predicted_sigma = chosen
        .map(|k| first_sigmas[k].clone())
        .unwrap_or_default();
    (
        action,
        MpcDiagnostics {
            costs,
            chosen,
            predicted_sigma,
            divergences,
        },
    )
}

/// Closed-loop planner: keeps its own filter in sync with the episode and
/// plans from the posterior before every action. After a filter failure it
/// freezes and emits zero actions for the rest of the episode.
pub struct MpcPolicy<'m> {
    model: &'m WorldModel,
    config: MpcConfig,
    rng: ChaCha8Rng,
    belief: GaussianBelief,
    last_action: Option<Vec<f64>>,
    failed: bool,
}

impl<'m> MpcPolicy<'m> {
    pub fn new(model: &'m WorldModel, config: MpcConfig, rng: ChaCha8Rng) -> Self {
        assert_eq!(model.dims.a_dim, 2, "env actions are planar");
        let belief = GaussianBelief::initial(model.dims.n, (model.prop_low, model.prop_high));
        MpcPolicy {
            model,
            config,
            rng,
            belief,
            last_action: None,
            failed: false,
        }
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn filter_failed(&self) -> bool {
        self.failed
    }
}

impl Policy for MpcPolicy<'_> {
    fn act(&mut self, obs: &EnvObservation, t: usize) -> [f64; 2] {
        if t == 0 {
            self.belief =
                GaussianBelief::initial(self.model.dims.n, (self.model.prop_low, self.model.prop_high));
            self.last_action = None;
            self.failed = false;
        }
        if let Some(a) = self.last_action.take() {
            let stepped = predict(self.model, &self.belief, &a)
                .and_then(|bar| update(self.model, &bar, &obs.to_vec()));
            match stepped {
                Ok(b) => self.belief = b,
                Err(_) => self.failed = true,
            }
        }
        if self.failed {
            return [0.0, 0.0];
        }
        let (a, _) = mpc_step(self.model, &self.belief, &self.config, &mut self.rng);
        let out = [a[0], a[1]];
        self.last_action = Some(a);
        out
    }
}
