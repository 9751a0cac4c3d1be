//! The learned world model: dynamics mean (GRU) with a process-noise head,
//! observation mean with an observation-noise head, and the augmented-state
//! wrapper that carries the unknown object property m alongside the latent
//! state s.
//!
//! The augmented state is the flat vector (s_1..s_n, m); index n is always
//! the property. The dynamics mean maps m through unchanged and its noise
//! row is the fixed constant `prop_eps`, so the filter can revise m slowly
//! without the property variance collapsing.
//!
//! Networks see normalized quantities: m is mapped to [-1, 1] over the
//! property range, actions are divided by `action_scale`, and observations
//! are z-scored by `ObsStats`. Beliefs and public sampling APIs stay in raw
//! task units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::nn::{positive_head, GruParams, GruVars, MlpParams, MlpVars};
use crate::tape::{Tape, Var};

/// Default sqrt process noise on the property row.
pub const DEFAULT_PROP_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Latent state size n (also the GRU hidden size).
    pub n: usize,
    /// Action dimension.
    pub a_dim: usize,
    /// Observation dimension.
    pub d: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// MLP weight-layer count.
    pub depth: usize,
}

impl ModelDims {
    pub fn desk(d: usize) -> Self {
        ModelDims {
            n: 32,
            a_dim: 2,
            d,
            hidden: 32,
            depth: 5,
        }
    }

    pub fn aug(&self) -> usize {
        self.n + 1
    }
}

/// Per-dimension z-normalization statistics for observations.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObsStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsStats {
    pub fn identity(d: usize) -> Self {
        ObsStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn from_samples<'a>(d: usize, samples: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0; d];
        let mut sumsq = vec![0.0; d];
        for s in samples {
            for j in 0..d {
                sum[j] += s[j];
                sumsq[j] += s[j] * s[j];
            }
            count += 1;
        }
        if count == 0 {
            return ObsStats::identity(d);
        }
        let nf = count as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / nf).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / nf - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        ObsStats { mean, std }
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(o, (m, s))| (o - m) / s)
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(o, (m, s))| m + s * o)
            .collect()
    }
}

/// Latent state plus the scalar property it carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub s: Vec<f64>,
    pub m: f64,
}

impl AugmentedState {
    pub fn from_vec(v: &[f64]) -> Self {
        let (s, m) = v.split_at(v.len() - 1);
        AugmentedState {
            s: s.to_vec(),
            m: m[0],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.s.clone();
        v.push(self.m);
        v
    }
}

/// Fixed linear maps standing in for the learned networks in oracle tests:
/// dynamics mean A [s; m] + B a, observation mean C s, with constant noise
/// scales. `sigma_action_gain` optionally couples process noise to the
/// squared action norm so that action choice influences the filter's
/// deterministic variance recursion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearStubs {
    /// (n x (n+1)) coefficient on the augmented state.
    pub a: Mat,
    /// (n x a_dim) action input matrix.
    pub b: Mat,
    /// (d x n) observation readout.
    pub c: Mat,
    /// Base sqrt process noise per state entry.
    pub sigma0: Vec<f64>,
    /// Added to sigma0 as gain * |a|^2, per state entry.
    pub sigma_action_gain: Vec<f64>,
    /// Constant sqrt observation noise.
    pub gamma0: Vec<f64>,
}

impl LinearStubs {
    fn dims(&self, a_dim: usize) -> ModelDims {
        ModelDims {
            n: self.a.rows,
            a_dim,
            d: self.c.rows,
            hidden: 0,
            depth: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Nets {
    Learned {
        f: GruParams,
        sigma: MlpParams,
        h: MlpParams,
        gamma: MlpParams,
    },
    Linear(LinearStubs),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldModel {
    pub nets: Nets,
    pub dims: ModelDims,
    pub obs_stats: ObsStats,
    /// Property randomization range; networks see m scaled to [-1, 1] on it.
    pub prop_low: f64,
    pub prop_high: f64,
    /// Actions are divided by this before entering networks.
    pub action_scale: f64,
    /// Sqrt process noise on the property row.
    pub prop_eps: f64,
}

impl WorldModel {
    pub fn new_learned(
        dims: ModelDims,
        prop_range: (f64, f64),
        action_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let f = GruParams::new(dims.n, 1 + dims.a_dim, rng);
        let sigma = MlpParams::new(dims.n + 1 + dims.a_dim, dims.hidden, dims.n, dims.depth, true, rng);
        let h = MlpParams::new(dims.n, dims.hidden, dims.d, dims.depth, true, rng);
        let gamma = MlpParams::new(dims.n, dims.hidden, dims.d, dims.depth, true, rng);
        WorldModel {
            nets: Nets::Learned { f, sigma, h, gamma },
            obs_stats: ObsStats::identity(dims.d),
            dims,
            prop_low: prop_range.0,
            prop_high: prop_range.1,
            action_scale,
            prop_eps: DEFAULT_PROP_EPS,
        }
    }

    pub fn new_linear(stubs: LinearStubs, a_dim: usize, prop_range: (f64, f64)) -> Self {
        let dims = stubs.dims(a_dim);
        WorldModel {
            obs_stats: ObsStats::identity(dims.d),
            nets: Nets::Linear(stubs),
            dims,
            prop_low: prop_range.0,
            prop_high: prop_range.1,
            action_scale: 1.0,
            prop_eps: DEFAULT_PROP_EPS,
        }
    }

    pub fn prop_mid(&self) -> f64 {
        0.5 * (self.prop_low + self.prop_high)
    }

    pub fn prop_half_range(&self) -> f64 {
        0.5 * (self.prop_high - self.prop_low)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |m| ok &= m.is_finite());
        ok
    }

    /// Trainable parameters in canonical order (stubs expose none).
    pub fn visit(&self, f: &mut impl FnMut(&Mat)) {
        if let Nets::Learned { f: fr, sigma, h, gamma } = &self.nets {
            fr.visit(f);
            sigma.visit(f);
            h.visit(f);
            gamma.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Mat)) {
        if let Nets::Learned { f: fr, sigma, h, gamma } = &mut self.nets {
            fr.visit_mut(f);
            sigma.visit_mut(f);
            h.visit_mut(f);
            gamma.visit_mut(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |m| n += m.len());
        n
    }

    /// Stage all parameters onto a tape; `ModelVars::param_vars` follows the
    /// same canonical order as `visit`.
    pub fn stage(&self, tape: &mut Tape) -> ModelVars {
        match &self.nets {
            Nets::Learned { f, sigma, h, gamma } => ModelVars::Learned {
                f: f.stage(tape),
                sigma: sigma.stage(tape),
                h: h.stage(tape),
                gamma: gamma.stage(tape),
            },
            Nets::Linear(stubs) => {
                let n = stubs.a.rows;
                let d = stubs.c.rows;
                // Extend C with a zero column so the observation Jacobian is
                // directly (d x (n+1)); the structural zero encodes that
                // observations never read m.
                let mut c_ext = Mat::zeros(d, n + 1);
                for i in 0..d {
                    for j in 0..n {
                        c_ext.set(i, j, stubs.c.get(i, j));
                    }
                }
                ModelVars::Linear {
                    a: tape.leaf(&stubs.a.data, stubs.a.rows, stubs.a.cols),
                    b: tape.leaf(&stubs.b.data, stubs.b.rows, stubs.b.cols),
                    c_ext: tape.leaf(&c_ext.data, d, n + 1),
                }
            }
        }
    }

    fn stub(&self) -> Option<&LinearStubs> {
        match &self.nets {
            Nets::Linear(s) => Some(s),
            _ => None,
        }
    }

    fn stub_sigma(&self, action: &[f64]) -> Vec<f64> {
        let stubs = self.stub().expect("stub sigma on learned model");
        let a2: f64 = action.iter().map(|v| v * v).sum();
        stubs
            .sigma0
            .iter()
            .zip(&stubs.sigma_action_gain)
            .map(|(s0, g)| s0 + g * a2)
            .collect()
    }

    // -- tape-level forward passes ------------------------------------------

    /// Dynamics mean and sqrt process noise at (aug, action). The property
    /// row of the mean is the input m; the last sqrt entry is `prop_eps`.
    pub fn dynamics_t(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        aug: Var,
        action: &[f64],
    ) -> (Var, Var) {
        let (mean, sqrt, _) = self.dynamics_core(tape, vars, aug, action, false);
        (mean, sqrt)
    }

    /// Like `dynamics_t`, additionally returning the Jacobian of the mean
    /// with respect to the raw augmented state, shape (n+1 x n+1). The
    /// bottom row is exactly e_{n+1}.
    pub fn dynamics_with_jacobian_t(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        aug: Var,
        action: &[f64],
    ) -> (Var, Var, Var) {
        let (mean, sqrt, jac) = self.dynamics_core(tape, vars, aug, action, true);
        (mean, sqrt, jac.expect("jacobian requested"))
    }

    fn dynamics_core(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        aug: Var,
        action: &[f64],
        want_jac: bool,
    ) -> (Var, Var, Option<Var>) {
        let n = self.dims.n;
        let a_dim = self.dims.a_dim;
        assert_eq!(action.len(), a_dim, "action dimension");
        assert_eq!(tape.shape(aug), (n + 1, 1), "augmented state shape");
        let s = tape.slice_rows(aug, 0, n);
        let m = tape.slice_rows(aug, n, 1);

        match vars {
            ModelVars::Learned { f, sigma, .. } => {
                let half = self.prop_half_range();
                let mid = self.prop_mid();
                let m_norm = tape.affine(m, 1.0 / half, -mid / half);
                let a_scaled: Vec<f64> = action.iter().map(|v| v / self.action_scale).collect();
                let a_leaf = tape.leaf_vec(&a_scaled);
                let x = tape.concat_rows(&[m_norm, a_leaf]);

                let sig_in = tape.concat_rows(&[s, m_norm, a_leaf]);
                let sig_raw = sigma.forward(tape, sig_in);
                let sig = positive_head(tape, sig_raw);
                let eps_leaf = tape.leaf(&[self.prop_eps], 1, 1);
                let sqrt = tape.concat_rows(&[sig, eps_leaf]);

                if want_jac {
                    let basis = tape.eye(n + 1);
                    let ds = tape.block(basis, 0, 0, n, n + 1);
                    let dm = tape.block(basis, n, 0, 1, n + 1);
                    let dm_norm = tape.affine(dm, 1.0 / half, 0.0);
                    let dx_zero = tape.zeros(a_dim, n + 1);
                    let dx = tape.concat_rows(&[dm_norm, dx_zero]);
                    let (hn, dhn) = f.step_with_tangent(tape, s, x, ds, dx);
                    let mean = tape.concat_rows(&[hn, m]);
                    let jac = tape.concat_rows(&[dhn, dm]);
                    (mean, sqrt, Some(jac))
                } else {
                    let hn = f.step(tape, s, x);
                    let mean = tape.concat_rows(&[hn, m]);
                    (mean, sqrt, None)
                }
            }
            ModelVars::Linear { a, b, .. } => {
                let a_leaf = tape.leaf_vec(action);
                let a_aug = tape.matmul(*a, aug);
                let b_act = tape.matmul(*b, a_leaf);
                let mean_s = tape.add(a_aug, b_act);
                let mean = tape.concat_rows(&[mean_s, m]);
                let mut sq = self.stub_sigma(action);
                sq.push(self.prop_eps);
                let sqrt = tape.leaf_vec(&sq);
                let jac = if want_jac {
                    let basis = tape.eye(n + 1);
                    let dm = tape.block(basis, n, 0, 1, n + 1);
                    Some(tape.concat_rows(&[*a, dm]))
                } else {
                    None
                };
                (mean, sqrt, jac)
            }
        }
    }

    /// Observation mean and sqrt noise in *normalized* observation space.
    /// Reads only the state block of the augmented state.
    pub fn observe_t(&self, tape: &mut Tape, vars: &ModelVars, aug: Var) -> (Var, Var) {
        let (mean, sqrt, _) = self.observe_core(tape, vars, aug, false);
        (mean, sqrt)
    }

    /// Like `observe_t` with the Jacobian of the mean w.r.t. the augmented
    /// state, shape (d x (n+1)); the property column is structurally zero.
    pub fn observe_with_jacobian_t(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        aug: Var,
    ) -> (Var, Var, Var) {
        let (mean, sqrt, jac) = self.observe_core(tape, vars, aug, true);
        (mean, sqrt, jac.expect("jacobian requested"))
    }

    fn observe_core(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        aug: Var,
        want_jac: bool,
    ) -> (Var, Var, Option<Var>) {
        let n = self.dims.n;
        assert_eq!(tape.shape(aug), (n + 1, 1), "augmented state shape");
        let s = tape.slice_rows(aug, 0, n);
        match vars {
            ModelVars::Learned { h, gamma, .. } => {
                let gam_raw = gamma.forward(tape, s);
                let gam = positive_head(tape, gam_raw);
                if want_jac {
                    let basis = tape.eye(n + 1);
                    let ds = tape.block(basis, 0, 0, n, n + 1);
                    let (mean, dmean) = h.forward_with_tangent(tape, s, ds);
                    (mean, gam, Some(dmean))
                } else {
                    let mean = h.forward(tape, s);
                    (mean, gam, None)
                }
            }
            ModelVars::Linear { c_ext, .. } => {
                let mean = tape.matmul(*c_ext, aug);
                let gam = tape.leaf_vec(&self.stub().unwrap().gamma0);
                let jac = want_jac.then_some(*c_ext);
                (mean, gam, jac)
            }
        }
    }

    // -- plain wrappers -------------------------------------------------------

    /// Dynamics mean and sqrt noise as plain vectors (raw units).
    pub fn dynamics(&self, aug: &AugmentedState, action: &[f64]) -> (AugmentedState, Vec<f64>) {
        let mut tape = Tape::new();
        self.dynamics_into(&mut tape, aug, action)
    }

    fn dynamics_into(
        &self,
        tape: &mut Tape,
        aug: &AugmentedState,
        action: &[f64],
    ) -> (AugmentedState, Vec<f64>) {
        tape.clear();
        let vars = self.stage(tape);
        let av = tape.leaf_vec(&aug.to_vec());
        let (mean, sqrt) = self.dynamics_t(tape, &vars, av, action);
        (
            AugmentedState::from_vec(tape.value(mean)),
            tape.value(sqrt).to_vec(),
        )
    }

    /// Observation mean and sqrt noise in raw units (stats applied).
    pub fn observe(&self, aug: &AugmentedState) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        self.observe_into(&mut tape, aug)
    }

    fn observe_into(&self, tape: &mut Tape, aug: &AugmentedState) -> (Vec<f64>, Vec<f64>) {
        tape.clear();
        let vars = self.stage(tape);
        let av = tape.leaf_vec(&aug.to_vec());
        let (mean_n, sqrt_n) = self.observe_t(tape, &vars, av);
        let mean = self.obs_stats.denormalize(tape.value(mean_n));
        let sqrt: Vec<f64> = tape
            .value(sqrt_n)
            .iter()
            .zip(&self.obs_stats.std)
            .map(|(g, s)| g * s)
            .collect();
        (mean, sqrt)
    }

    /// Reparametrized transition sample; the property moves only by
    /// `prop_eps * noise`.
    pub fn sample_next(
        &self,
        aug: &AugmentedState,
        action: &[f64],
        noise: &[f64],
    ) -> AugmentedState {
        let mut tape = Tape::new();
        self.sample_next_with(&mut tape, aug, action, noise)
    }

    /// `sample_next` reusing a caller-owned tape (cleared on entry).
    pub fn sample_next_with(
        &self,
        tape: &mut Tape,
        aug: &AugmentedState,
        action: &[f64],
        noise: &[f64],
    ) -> AugmentedState {
        assert_eq!(noise.len(), self.dims.n + 1, "transition noise length");
        let (mean, sqrt) = self.dynamics_into(tape, aug, action);
        let mut v = mean.to_vec();
        for (i, x) in v.iter_mut().enumerate() {
            *x += sqrt[i] * noise[i];
        }
        AugmentedState::from_vec(&v)
    }

    /// Raw-unit observation sample at a state.
    pub fn sample_observation(&self, aug: &AugmentedState, noise: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        self.sample_observation_with(&mut tape, aug, noise)
    }

    /// `sample_observation` reusing a caller-owned tape (cleared on entry).
    pub fn sample_observation_with(
        &self,
        tape: &mut Tape,
        aug: &AugmentedState,
        noise: &[f64],
    ) -> Vec<f64> {
        assert_eq!(noise.len(), self.dims.d, "observation noise length");
        let (mean, sqrt) = self.observe_into(tape, aug);
        mean.iter()
            .zip(&sqrt)
            .zip(noise)
            .map(|((m, s), z)| m + s * z)
            .collect()
    }
}

/// Tape handles for a staged model.
#[derive(Clone, Debug)]
pub enum ModelVars {
    Learned {
        f: GruVars,
        sigma: MlpVars,
        h: MlpVars,
        gamma: MlpVars,
    },
    Linear {
        a: Var,
        b: Var,
        c_ext: Var,
    },
}

impl ModelVars {
    /// Trainable parameter handles in `WorldModel::visit` order.
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            ModelVars::Learned { f, sigma, h, gamma } => {
                let mut v = f.vars();
                v.extend(sigma.vars());
                v.extend(h.vars());
                v.extend(gamma.vars());
                v
            }
            ModelVars::Linear { .. } => Vec::new(),
        }
    }
}
