//! Extended Kalman filter over the augmented state (s, m).
//!
//! Predict linearizes the learned dynamics mean with a Jacobian obtained by
//! tangent propagation on the tape; update linearizes the observation mean
//! the same way and applies the Joseph-form covariance update. Because every
//! step is recorded as tape operations, any scalar functional of the beliefs
//! can be differentiated with respect to the model parameters.
//!
//! All tape-level entry points come in pairs with plain wrappers that run a
//! private tape and extract values; both paths execute identical operation
//! sequences, so they agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{ModelVars, WorldModel};
use crate::tape::{Tape, Var};

/// Diagonal (variance) floor applied after every covariance-producing step.
pub const VAR_FLOOR: f64 = 1e-12;
/// Floor on the reported property standard deviation.
pub const SIGMA_M_FLOOR: f64 = 1e-9;
/// Ridge added to the innovation covariance when inversion fails.
pub const INNOVATION_RIDGE: f64 = 1e-9;

/// Gaussian belief over the augmented state; mean is (n+1 x 1), cov is
/// (n+1 x n+1) symmetric PSD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Mat,
    pub cov: Mat,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mean.rows
    }

    /// Mean s = 0, m = range midpoint; unit state variances and a property
    /// variance of (range/4)^2 moment-matching the uniform prior.
    pub fn initial(n: usize, prop_range: (f64, f64)) -> Self {
        let (lo, hi) = prop_range;
        let mut mean = Mat::zeros(n + 1, 1);
        mean.set(n, 0, 0.5 * (lo + hi));
        let mut diag = vec![1.0; n + 1];
        let quarter = (hi - lo) / 4.0;
        diag[n] = quarter * quarter;
        GaussianBelief {
            mean,
            cov: Mat::diag(&diag),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.cov.is_finite()
    }

    /// Draw one augmented state via the full-covariance Cholesky factor.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(noise.len(), n, "belief sample noise length");
        let l = self
            .cov
            .cholesky_lower(VAR_FLOOR)
            .expect("belief covariance not PSD");
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.mean.get(i, 0);
            for j in 0..=i {
                acc += l.get(i, j) * noise[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// Property marginal (mu_m, sigma_m) with sigma floored.
pub fn property_marginal(belief: &GaussianBelief) -> (f64, f64) {
    let n = belief.dim() - 1;
    let mu = belief.mean.get(n, 0);
    let sigma = belief.cov.get(n, n).max(0.0).sqrt().max(SIGMA_M_FLOOR);
    (mu, sigma)
}

/// Tape handles for a belief.
#[derive(Clone, Copy, Debug)]
pub struct BeliefVars {
    pub mean: Var,
    pub cov: Var,
}

pub fn stage_belief(tape: &mut Tape, belief: &GaussianBelief) -> BeliefVars {
    BeliefVars {
        mean: tape.leaf(&belief.mean.data, belief.mean.rows, 1),
        cov: tape.leaf(&belief.cov.data, belief.cov.rows, belief.cov.cols),
    }
}

pub fn extract_belief(tape: &Tape, vars: &BeliefVars) -> GaussianBelief {
    let (rows, _) = tape.shape(vars.mean);
    GaussianBelief {
        mean: Mat {
            rows,
            cols: 1,
            data: tape.value(vars.mean).to_vec(),
        },
        cov: Mat {
            rows,
            cols: rows,
            data: tape.value(vars.cov).to_vec(),
        },
    }
}

/// Property standard deviation as a differentiable (1 x 1) node.
pub fn property_sigma_t(tape: &mut Tape, belief: &BeliefVars) -> Var {
    let (aug, _) = tape.shape(belief.mean);
    let n = aug - 1;
    let v = tape.block(belief.cov, n, n, 1, 1);
    let vf = tape.clamp_min(v, SIGMA_M_FLOOR * SIGMA_M_FLOOR);
    tape.sqrt(vf)
}

/// Property mean as a (1 x 1) node.
pub fn property_mean_t(tape: &mut Tape, belief: &BeliefVars) -> Var {
    let (aug, _) = tape.shape(belief.mean);
    tape.slice_rows(belief.mean, aug - 1, 1)
}

/// Symmetrize, then lift any diagonal entry below the variance floor. Above
/// the floor the bump is exactly zero, so well-conditioned covariances pass
/// through unchanged.
fn finalize_cov(tape: &mut Tape, cov: Var) -> Var {
    let sym = tape.symmetrize(cov);
    let d = tape.diag_extract(sym);
    let deficit = tape.affine(d, -1.0, VAR_FLOOR);
    let bump = tape.clamp_min(deficit, 0.0);
    let bump_m = tape.diag_make(bump);
    tape.add(sym, bump_m)
}

fn check_finite(tape: &Tape, vars: &[Var], what: &str) -> Result<()> {
    for v in vars {
        if !tape.value(*v).iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("{what} produced non-finite values")));
        }
    }
    Ok(())
}

/// EKF time update: linearize the dynamics mean at the belief mean, then
/// propagate mean and covariance (F P F^T + Q with Q = diag(sqrt^2)).
pub fn predict_t(
    tape: &mut Tape,
    model: &WorldModel,
    vars: &ModelVars,
    belief: &BeliefVars,
    action: &[f64],
) -> Result<BeliefVars> {
    let (mean, sqrt, fjac) = model.dynamics_with_jacobian_t(tape, vars, belief.mean, action);
    check_finite(tape, &[mean, fjac], "dynamics linearization")?;
    let q_diag = tape.square(sqrt);
    let q = tape.diag_make(q_diag);
    let fp = tape.matmul(fjac, belief.cov);
    let fjt = tape.transpose(fjac);
    let fpf = tape.matmul(fp, fjt);
    let cov_raw = tape.add(fpf, q);
    let cov = finalize_cov(tape, cov_raw);
    check_finite(tape, &[cov], "predicted covariance")?;
    Ok(BeliefVars { mean, cov })
}

/// EKF measurement update with a raw observation. The observation is
/// z-normalized with the model's stats; the innovation system is solved in
/// normalized space. Joseph-form covariance update keeps the result PSD. A
/// singular innovation covariance is retried once with a small ridge.
pub fn update_t(
    tape: &mut Tape,
    model: &WorldModel,
    vars: &ModelVars,
    belief_bar: &BeliefVars,
    obs_raw: &[f64],
) -> Result<BeliefVars> {
    let d = model.dims.d;
    assert_eq!(obs_raw.len(), d, "observation dimension");
    if !obs_raw.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite observation".into()));
    }
    let (aug, _) = tape.shape(belief_bar.mean);

    let o_norm = model.obs_stats.normalize(obs_raw);
    let o = tape.leaf_vec(&o_norm);

    let (h_mean, gam, hjac) = model.observe_with_jacobian_t(tape, vars, belief_bar.mean);
    check_finite(tape, &[h_mean, gam, hjac], "observation linearization")?;
    let r_diag = tape.square(gam);
    let r = tape.diag_make(r_diag);

    let y = tape.sub(o, h_mean);
    let hjt = tape.transpose(hjac);
    let pht = tape.matmul(belief_bar.cov, hjt);
    let hpht = tape.matmul(hjac, pht);
    let s_raw = tape.add(hpht, r);
    let s_mat = tape.symmetrize(s_raw);

    let s_inv = match tape.inverse(s_mat) {
        Ok(v) => v,
        Err(_) => {
            let eye = tape.eye(d);
            let ridge = tape.affine(eye, INNOVATION_RIDGE, 0.0);
            let s_reg = tape.add(s_mat, ridge);
            tape.inverse(s_reg).map_err(|e| {
                Error::Numerical(format!("innovation covariance singular after ridge: {e}"))
            })?
        }
    };

    let k = tape.matmul(pht, s_inv);
    let ky = tape.matmul(k, y);
    let mean = tape.add(belief_bar.mean, ky);

    let kh = tape.matmul(k, hjac);
    let eye = tape.eye(aug);
    let ikh = tape.sub(eye, kh);
    let ip = tape.matmul(ikh, belief_bar.cov);
    let ikht = tape.transpose(ikh);
    let joseph = tape.matmul(ip, ikht);
    let kr = tape.matmul(k, r);
    let kt = tape.transpose(k);
    let krk = tape.matmul(kr, kt);
    let cov_raw = tape.add(joseph, krk);
    let cov = finalize_cov(tape, cov_raw);
    check_finite(tape, &[mean, cov], "posterior")?;
    Ok(BeliefVars { mean, cov })
}

/// Alternating predict/update over an action/observation sequence; returns
/// (predicted beliefs, posterior beliefs), both length T. Errors carry the
/// failing timestep.
pub fn filter_rollout_t(
    tape: &mut Tape,
    model: &WorldModel,
    vars: &ModelVars,
    initial: &GaussianBelief,
    actions: &[Vec<f64>],
    observations: &[Vec<f64>],
) -> Result<(Vec<BeliefVars>, Vec<BeliefVars>)> {
    assert_eq!(
        actions.len(),
        observations.len(),
        "rollout wants matched action/observation sequences"
    );
    let mut bars = Vec::with_capacity(actions.len());
    let mut posts = Vec::with_capacity(actions.len());
    let mut belief = stage_belief(tape, initial);
    for (t, (a, o)) in actions.iter().zip(observations).enumerate() {
        let bar = predict_t(tape, model, vars, &belief, a).map_err(|e| Error::FilterDivergence {
            step: t,
            reason: e.to_string(),
        })?;
        let post = update_t(tape, model, vars, &bar, o).map_err(|e| Error::FilterDivergence {
            step: t,
            reason: e.to_string(),
        })?;
        bars.push(bar);
        posts.push(post);
        belief = post;
    }
    Ok((bars, posts))
}

// -- plain wrappers ---------------------------------------------------------

pub fn predict(
    model: &WorldModel,
    belief: &GaussianBelief,
    action: &[f64],
) -> Result<GaussianBelief> {
    let mut tape = Tape::new();
    let vars = model.stage(&mut tape);
    let b = stage_belief(&mut tape, belief);
    let out = predict_t(&mut tape, model, &vars, &b, action)?;
    Ok(extract_belief(&tape, &out))
}

pub fn update(
    model: &WorldModel,
    belief_bar: &GaussianBelief,
    obs_raw: &[f64],
) -> Result<GaussianBelief> {
    let mut tape = Tape::new();
    let vars = model.stage(&mut tape);
    let b = stage_belief(&mut tape, belief_bar);
    let out = update_t(&mut tape, model, &vars, &b, obs_raw)?;
    Ok(extract_belief(&tape, &out))
}

pub fn filter_rollout(
    model: &WorldModel,
    initial: &GaussianBelief,
    actions: &[Vec<f64>],
    observations: &[Vec<f64>],
) -> Result<(Vec<GaussianBelief>, Vec<GaussianBelief>)> {
    let mut tape = Tape::new();
    let vars = model.stage(&mut tape);
    let (bars, posts) = filter_rollout_t(&mut tape, model, &vars, initial, actions, observations)?;
    Ok((
        bars.iter().map(|b| extract_belief(&tape, b)).collect(),
        posts.iter().map(|b| extract_belief(&tape, b)).collect(),
    ))
}

/// Stateful filter for live episodes: stages the model once and rolls the
/// tape back after each step, so repeated stepping costs no tape growth.
pub struct LiveFilter<'m> {
    model: &'m WorldModel,
    pub belief: GaussianBelief,
    /// Predicted (pre-update) belief from the latest step.
    pub last_bar: Option<GaussianBelief>,
    tape: Tape,
    vars: ModelVars,
    mark: crate::tape::TapeMark,
}

impl<'m> LiveFilter<'m> {
    pub fn new(model: &'m WorldModel, initial: GaussianBelief) -> Self {
        let mut tape = Tape::new();
        let vars = model.stage(&mut tape);
        let mark = tape.mark();
        LiveFilter {
            model,
            belief: initial,
            last_bar: None,
            tape,
            vars,
            mark,
        }
    }

    /// One predict/update cycle with an executed action and the observation
    /// it produced.
    pub fn step(&mut self, action: &[f64], obs_raw: &[f64]) -> Result<()> {
        self.tape.truncate(self.mark);
        let b = stage_belief(&mut self.tape, &self.belief);
        let bar = predict_t(&mut self.tape, self.model, &self.vars, &b, action)?;
        let post = update_t(&mut self.tape, self.model, &self.vars, &bar, obs_raw)?;
        self.last_bar = Some(extract_belief(&self.tape, &bar));
        self.belief = extract_belief(&self.tape, &post);
        Ok(())
    }
}
