//! Run orchestration: the collect → train → replay loop, periodic
//! evaluation, checkpointing with rollback on divergence, and artifact
//! export (CSV metrics, trajectory dumps, versioned checkpoints).
//!
//! Epoch 0 collects with the random-walk policy — no model exists yet — and
//! every later epoch collects with the planner. All randomness derives from
//! one master stream, so a fixed seed reproduces a run bit for bit and a
//! checkpoint resume continues it exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{RandomWalkPolicy, ScriptedPolicy};
use crate::controller::{MpcConfig, MpcPolicy};
use crate::ekf::{filter_rollout, property_marginal, GaussianBelief};
use crate::envs::{self, TaskKind, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::model::{ModelDims, ObsStats, WorldModel};
use crate::training::{
    episode_file_name, load_dataset, replay_beliefs, save_episode, train_epoch, EpisodeRecord,
    LossConfig,
};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "palpate-checkpoint v1";
/// Consecutive rollbacks tolerated before the run gives up.
const MAX_ROLLBACKS: usize = 3;

fn default_state_dim() -> usize {
    16
}
fn default_hidden() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_epochs() -> usize {
    50
}
fn default_episodes_per_epoch() -> usize {
    10
}
fn default_eval_every() -> usize {
    1000
}
fn default_eval_episodes() -> usize {
    10
}

/// Everything a run needs. `task`, `seed` and `output_dir` are mandatory;
/// the rest default to desk-scale values (full-scale evaluation cadence is
/// every 10000 env steps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub loss: LossConfig,
    /// Planner settings; task defaults when absent.
    #[serde(default)]
    pub mpc: Option<MpcConfig>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_episodes_per_epoch")]
    pub episodes_per_epoch: usize,
    /// Episode count for the epoch-0 random-policy bootstrap;
    /// `episodes_per_epoch` when absent. Tasks where informative contact is
    /// rare under the random policy need a larger seed dataset.
    #[serde(default)]
    pub bootstrap_episodes: Option<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every_env_steps: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Episode-length override; task default when absent.
    #[serde(default)]
    pub episode_len: Option<usize>,
    #[serde(default)]
    pub sensor_noise: Option<bool>,
}

impl ExperimentConfig {
    pub fn for_task(task: TaskKind, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            task,
            seed,
            output_dir: output_dir.into(),
            state_dim: default_state_dim(),
            hidden: default_hidden(),
            depth: default_depth(),
            loss: LossConfig::default(),
            mpc: None,
            epochs: default_epochs(),
            episodes_per_epoch: default_episodes_per_epoch(),
            bootstrap_episodes: None,
            eval_every_env_steps: default_eval_every(),
            eval_episodes: default_eval_episodes(),
            episode_len: None,
            sensor_noise: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = TaskSpec::for_task(self.task);
        if let Some(t) = self.episode_len {
            spec.episode_len = t;
        }
        if let Some(n) = self.sensor_noise {
            spec.sensor_noise = n;
        }
        spec
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            n: self.state_dim,
            a_dim: ACTION_DIM,
            d: OBS_DIM,
            hidden: self.hidden,
            depth: self.depth,
        }
    }

    pub fn mpc_config(&self, spec: &TaskSpec) -> MpcConfig {
        self.mpc.clone().unwrap_or_else(|| MpcConfig::for_task(spec))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.state_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return bad("model dimensions must be nonzero");
        }
        if self.episodes_per_epoch == 0 {
            return bad("episodes_per_epoch must be nonzero");
        }
        if self.bootstrap_episodes == Some(0) {
            return bad("bootstrap_episodes must be nonzero when set");
        }
        if self.eval_every_env_steps == 0 {
            return bad("eval_every_env_steps must be nonzero");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be nonzero");
        }
        if self.loss.batch_size == 0 || self.loss.seq_len == 0 || self.loss.n_samples == 0 {
            return bad("loss batch_size, seq_len and n_samples must be nonzero");
        }
        if let Some(t) = self.episode_len {
            if t < self.loss.seq_len {
                return bad("episode_len shorter than the TBPTT window");
            }
        }
        Ok(())
    }
}

// -- metrics ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: usize,
    pub eval_mae: f64,
    pub train_loss_obs: f64,
    pub train_loss_prop: f64,
    pub mean_final_sigma_m: f64,
    pub contact_rate: f64,
}

const METRICS_HEADER: &str =
    "env_steps,eval_mae,train_loss_obs,train_loss_prop,mean_final_sigma_m,contact_rate";

/// Plain CSV; floats print in Rust's shortest round-trip form, so read-back
/// reproduces them exactly.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.env_steps,
            r.eval_mae,
            r.train_loss_obs,
            r.train_loss_prop,
            r.mean_final_sigma_m,
            r.contact_rate
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad metrics header: {:?}",
                other.map(|r| r.unwrap_or_default())
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("bad metrics row: {line}")));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|e| Error::Format(format!("bad metrics value {}: {e}", cols[i])))
        };
        rows.push(MetricsRow {
            env_steps: cols[0]
                .parse()
                .map_err(|e| Error::Format(format!("bad env_steps: {e}")))?,
            eval_mae: f(1)?,
            train_loss_obs: f(2)?,
            train_loss_prop: f(3)?,
            mean_final_sigma_m: f(4)?,
            contact_rate: f(5)?,
        });
    }
    Ok(rows)
}

// -- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Scripted,
    Random,
    Mpc,
}

impl PolicyKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "scripted" => Ok(PolicyKind::Scripted),
            "random" => Ok(PolicyKind::Random),
            "mpc" => Ok(PolicyKind::Mpc),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (expected scripted, random or mpc)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeEval {
    pub m_true: f64,
    pub estimate: f64,
    pub final_sigma_m: f64,
    pub contact_rate: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
}

impl EvalReport {
    pub fn mae(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        self.episodes
            .iter()
            .map(|e| (e.estimate - e.m_true).abs())
            .sum::<f64>()
            / n
    }

    pub fn mean_final_sigma(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        self.episodes.iter().map(|e| e.final_sigma_m).sum::<f64>() / n
    }

    pub fn mean_contact_rate(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        self.episodes.iter().map(|e| e.contact_rate).sum::<f64>() / n
    }

    pub fn divergences(&self) -> usize {
        self.episodes.iter().filter(|e| e.diverged).count()
    }
}

/// Runs `n_episodes` with randomized hidden properties and scores the final
/// posterior mean against ground truth. A diverged filter falls back to the
/// prior mean for that episode and is flagged.
pub fn evaluate(
    model: &WorldModel,
    policy: PolicyKind,
    spec: &TaskSpec,
    mpc: &MpcConfig,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> EvalReport {
    let mut report = EvalReport::default();
    for _ in 0..n_episodes {
        let pol_seed = rng.random::<u64>();
        let env_seed = rng.random::<u64>();
        let mut env_rng = ChaCha8Rng::seed_from_u64(env_seed);
        let traj = match policy {
            PolicyKind::Scripted => {
                let mut p = ScriptedPolicy::new(*spec);
                envs::episode(spec, &mut p, &mut env_rng)
            }
            PolicyKind::Random => {
                let mut p = RandomWalkPolicy::new(spec, pol_seed);
                envs::episode(spec, &mut p, &mut env_rng)
            }
            PolicyKind::Mpc => {
                let mut p =
                    MpcPolicy::new(model, mpc.clone(), ChaCha8Rng::seed_from_u64(pol_seed));
                envs::episode(spec, &mut p, &mut env_rng)
            }
        };
        let initial = GaussianBelief::initial(model.dims.n, (model.prop_low, model.prop_high));
        let (estimate, sigma, diverged) =
            match filter_rollout(model, &initial, &traj.actions, &traj.observations) {
                Ok((_, posts)) => {
                    let last = posts.last().unwrap_or(&initial);
                    let (mu, s) = property_marginal(last);
                    (mu, s, false)
                }
                Err(_) => {
                    let (mu, s) = property_marginal(&initial);
                    (mu, s, true)
                }
            };
        report.episodes.push(EpisodeEval {
            m_true: traj.m_true,
            estimate,
            final_sigma_m: sigma,
            contact_rate: traj.contact_rate(),
            diverged,
        });
    }
    report
}

// -- checkpoints ----------------------------------------------------------------

/// Resumable run state: the model, the master RNG, loop counters, and the
/// metrics emitted so far. The dataset itself lives in the episode files and
/// stored beliefs are reconstructed by replay, not serialized.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: WorldModel,
    pub rng: ChaCha8Rng,
    pub epoch_done: usize,
    pub env_steps: usize,
    pub next_eval: usize,
    pub lr_scale: f64,
    pub episodes: usize,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dims: ModelDims,
    prop_low: f64,
    prop_high: f64,
    action_scale: f64,
    prop_eps: f64,
    obs_mean: Vec<f64>,
    obs_std: Vec<f64>,
    epoch_done: usize,
    env_steps: usize,
    next_eval: usize,
    lr_scale: f64,
    episodes: usize,
    n_params: usize,
    rng: ChaCha8Rng,
    metrics: Vec<MetricsRow>,
}

pub fn checkpoint_save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut params: Vec<f64> = Vec::new();
    ck.model.visit(&mut |m| params.extend_from_slice(&m.data));
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dims: ck.model.dims,
        prop_low: ck.model.prop_low,
        prop_high: ck.model.prop_high,
        action_scale: ck.model.action_scale,
        prop_eps: ck.model.prop_eps,
        obs_mean: ck.model.obs_stats.mean.clone(),
        obs_std: ck.model.obs_stats.std.clone(),
        epoch_done: ck.epoch_done,
        env_steps: ck.env_steps,
        next_eval: ck.next_eval,
        lr_scale: ck.lr_scale,
        episodes: ck.episodes,
        n_params: params.len(),
        rng: ck.rng.clone(),
        metrics: ck.metrics.clone(),
    };
    let mut file = fs::File::create(path)?;
    writeln!(file, "{CHECKPOINT_MAGIC}")?;
    let header_json =
        serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(file, "{header_json}")?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    let magic = magic.trim_end();
    if magic != CHECKPOINT_MAGIC {
        if let Some(rest) = magic.strip_prefix("palpate-checkpoint v") {
            if let Ok(found) = rest.parse::<u32>() {
                return Err(Error::Version {
                    expected: CHECKPOINT_VERSION,
                    found,
                });
            }
        }
        return Err(Error::Format(format!("not a checkpoint file: {magic:?}")));
    }
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != header.n_params * 8 {
        return Err(Error::Format(format!(
            "checkpoint payload holds {} bytes, expected {}",
            bytes.len(),
            header.n_params * 8
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    // Parameter values come from the payload; the init RNG is throwaway.
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let mut model = WorldModel::new_learned(
        header.dims,
        (header.prop_low, header.prop_high),
        header.action_scale,
        &mut init,
    );
    model.prop_eps = header.prop_eps;
    model.obs_stats = ObsStats {
        mean: header.obs_mean,
        std: header.obs_std,
    };
    let mut offset = 0usize;
    let mut fits = true;
    model.visit_mut(&mut |m| {
        let len = m.data.len();
        if offset + len <= params.len() {
            m.data.copy_from_slice(&params[offset..offset + len]);
        } else {
            fits = false;
        }
        offset += len;
    });
    if !fits || offset != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model wants {offset}",
            params.len()
        )));
    }
    Ok(Checkpoint {
        model,
        rng: header.rng,
        epoch_done: header.epoch_done,
        env_steps: header.env_steps,
        next_eval: header.next_eval,
        lr_scale: header.lr_scale,
        episodes: header.episodes,
        metrics: header.metrics,
    })
}

// -- the run loop ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub rollbacks: usize,
    pub final_eval_mae: Option<f64>,
    pub metrics_path: PathBuf,
}

struct RunState {
    config: ExperimentConfig,
    spec: TaskSpec,
    mpc: MpcConfig,
    model: WorldModel,
    dataset: Vec<EpisodeRecord>,
    rng: ChaCha8Rng,
    env_steps: usize,
    next_eval: usize,
    lr_scale: f64,
    metrics: Vec<MetricsRow>,
    rollbacks: usize,
    last_good: Option<PathBuf>,
}

fn episodes_dir(out: &Path) -> PathBuf {
    out.join("episodes")
}

fn checkpoints_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    checkpoints_dir(out).join(format!("ck_{epoch:04}.bin"))
}

fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

fn prepare_output(config: &ExperimentConfig) -> Result<()> {
    let out = &config.output_dir;
    fs::create_dir_all(episodes_dir(out))
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    fs::create_dir_all(checkpoints_dir(out))
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let echo = serde_json::to_string_pretty(config).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("config.json"), echo)
        .map_err(|e| Error::Config(format!("cannot write to {}: {e}", out.display())))?;
    Ok(())
}

/// One collection pass. Epoch 0 has no trained model, so it explores with
/// the random walk; later epochs plan with the current model.
fn collect(state: &mut RunState, epoch: usize) -> Result<f64> {
    let dir = episodes_dir(&state.config.output_dir);
    let mut contact = 0.0;
    let n_episodes = if epoch == 0 {
        state
            .config
            .bootstrap_episodes
            .unwrap_or(state.config.episodes_per_epoch)
    } else {
        state.config.episodes_per_epoch
    };
    for _ in 0..n_episodes {
        let pol_seed = state.rng.random::<u64>();
        let env_seed = state.rng.random::<u64>();
        let mut env_rng = ChaCha8Rng::seed_from_u64(env_seed);
        let traj = if epoch == 0 {
            let mut p = RandomWalkPolicy::new(&state.spec, pol_seed);
            envs::episode(&state.spec, &mut p, &mut env_rng)
        } else {
            let mut p = MpcPolicy::new(
                &state.model,
                state.mpc.clone(),
                ChaCha8Rng::seed_from_u64(pol_seed),
            );
            envs::episode(&state.spec, &mut p, &mut env_rng)
        };
        contact += traj.contact_rate();
        state.env_steps += traj.actions.len();
        let record = EpisodeRecord::from_trajectory(&traj, epoch as u32);
        let index = state.dataset.len();
        save_episode(&dir.join(episode_file_name(index)), &record)?;
        state.dataset.push(record);
    }
    Ok(contact / n_episodes as f64)
}

fn params_finite(model: &WorldModel) -> bool {
    let mut ok = true;
    model.visit(&mut |m| ok &= m.is_finite());
    ok
}

fn mean_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

fn to_checkpoint(state: &RunState, epoch_done: usize) -> Checkpoint {
    Checkpoint {
        model: state.model.clone(),
        rng: state.rng.clone(),
        epoch_done,
        env_steps: state.env_steps,
        next_eval: state.next_eval,
        lr_scale: state.lr_scale,
        episodes: state.dataset.len(),
        metrics: state.metrics.clone(),
    }
}

/// Restores the last good checkpoint, drops episodes collected after it, and
/// halves the learning rate so the retry takes a different path.
fn rollback(state: &mut RunState, why: &str) -> Result<()> {
    state.rollbacks += 1;
    if state.rollbacks > MAX_ROLLBACKS {
        return Err(Error::ModelDivergence(format!(
            "{why}; gave up after {MAX_ROLLBACKS} rollbacks"
        )));
    }
    let path = state.last_good.clone().ok_or_else(|| {
        Error::ModelDivergence(format!("{why} before any checkpoint existed"))
    })?;
    let ck = checkpoint_load(&path)?;
    println!(
        "rollback: {why}; restoring {} and halving the learning rate",
        path.display()
    );
    let dir = episodes_dir(&state.config.output_dir);
    for index in ck.episodes..state.dataset.len() {
        let _ = fs::remove_file(dir.join(episode_file_name(index)));
    }
    state.dataset.truncate(ck.episodes);
    state.model = ck.model;
    state.rng = ck.rng;
    state.env_steps = ck.env_steps;
    state.next_eval = ck.next_eval;
    state.metrics = ck.metrics;
    state.lr_scale *= 0.5;
    Ok(())
}

/// Returns false when the epoch was rolled back and should be retried.
fn run_epoch(state: &mut RunState, epoch: usize) -> Result<bool> {
    let collect_rate = if epoch == 0 && !state.dataset.is_empty() {
        // Resumed runs already hold the bootstrap dataset.
        f64::NAN
    } else {
        collect(state, epoch)?
    };

    // Freeze normalization on everything seen so far, then refresh stored
    // beliefs under it before sampling windows.
    state.model.obs_stats = ObsStats::from_samples(
        OBS_DIM,
        state
            .dataset
            .iter()
            .flat_map(|e| e.observations.iter().map(|o| o.as_slice())),
    );
    replay_beliefs(&mut state.dataset, &state.model);

    let mut loss_cfg = state.config.loss.clone();
    loss_cfg.learning_rate *= state.lr_scale;
    let train_seed = state.rng.random::<u64>();
    let epoch_metrics = match train_epoch(
        &state.dataset,
        &mut state.model,
        &loss_cfg,
        &mut ChaCha8Rng::seed_from_u64(train_seed),
    ) {
        Ok(m) => m,
        Err(e) => {
            rollback(state, &format!("training failed: {e}"))?;
            return Ok(false);
        }
    };
    let replay_diverged = replay_beliefs(&mut state.dataset, &state.model);

    if !params_finite(&state.model) || 2 * replay_diverged > state.dataset.len() {
        rollback(
            state,
            &format!(
                "model diverged after epoch {epoch} ({replay_diverged}/{} episodes unreplayable)",
                state.dataset.len()
            ),
        )?;
        return Ok(false);
    }

    let obs_loss = mean_finite(&epoch_metrics.obs_losses);
    let prop_loss = mean_finite(&epoch_metrics.prop_losses);
    println!(
        "epoch {epoch}: {} episodes, {} env steps, obs loss {obs_loss:.4}, prop loss {prop_loss:.4}, contact {collect_rate:.2}, {} skipped steps",
        state.dataset.len(),
        state.env_steps,
        epoch_metrics.skipped_steps
    );

    while state.env_steps >= state.next_eval {
        let eval_seed = state.rng.random::<u64>();
        let report = evaluate(
            &state.model,
            PolicyKind::Mpc,
            &state.spec,
            &state.mpc,
            state.config.eval_episodes,
            &mut ChaCha8Rng::seed_from_u64(eval_seed),
        );
        let row = MetricsRow {
            env_steps: state.env_steps,
            eval_mae: report.mae(),
            train_loss_obs: obs_loss,
            train_loss_prop: prop_loss,
            mean_final_sigma_m: report.mean_final_sigma(),
            contact_rate: report.mean_contact_rate(),
        };
        println!(
            "eval @ {} steps: MAE {:.4}, sigma_m {:.4}, contact {:.2}, {} divergent",
            row.env_steps,
            row.eval_mae,
            row.mean_final_sigma_m,
            row.contact_rate,
            report.divergences()
        );
        state.metrics.push(row);
        state.next_eval += state.config.eval_every_env_steps;
        write_metrics_csv(&metrics_path(&state.config.output_dir), &state.metrics)?;
    }

    let ck_path = checkpoint_path(&state.config.output_dir, epoch);
    checkpoint_save(&ck_path, &to_checkpoint(state, epoch + 1))?;
    state.last_good = Some(ck_path);
    Ok(true)
}

fn finish(state: RunState) -> Result<RunSummary> {
    write_metrics_csv(&metrics_path(&state.config.output_dir), &state.metrics)?;
    Ok(RunSummary {
        epochs_run: state.config.epochs,
        env_steps: state.env_steps,
        episodes: state.dataset.len(),
        rollbacks: state.rollbacks,
        final_eval_mae: state.metrics.last().map(|r| r.eval_mae),
        metrics_path: metrics_path(&state.config.output_dir),
    })
}

pub fn run_training(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    prepare_output(config)?;
    let spec = config.task_spec();
    let mpc = config.mpc_config(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed = rng.random::<u64>();
    let model = WorldModel::new_learned(
        config.model_dims(),
        spec.property_range,
        spec.action_clip,
        &mut ChaCha8Rng::seed_from_u64(init_seed),
    );
    let mut state = RunState {
        spec,
        mpc,
        model,
        dataset: Vec::new(),
        rng,
        env_steps: 0,
        next_eval: config.eval_every_env_steps,
        lr_scale: 1.0,
        metrics: Vec::new(),
        rollbacks: 0,
        last_good: None,
        config: config.clone(),
    };
    if config.epochs == 0 {
        // Bootstrap dataset only: collect with the random policy and stop.
        collect(&mut state, 0)?;
        return finish(state);
    }
    run_epochs(&mut state, 0)?;
    finish(state)
}

/// Runs epochs `start..epochs`, retrying any epoch that was rolled back.
fn run_epochs(state: &mut RunState, start: usize) -> Result<()> {
    let mut epoch = start;
    while epoch < state.config.epochs {
        if run_epoch(state, epoch)? {
            epoch += 1;
        }
    }
    Ok(())
}

/// Continues a run from a checkpoint under the same config. Episode files
/// are reloaded from the output directory and their stored beliefs rebuilt
/// by replay at the next epoch's start.
pub fn resume_training(config: &ExperimentConfig, checkpoint: &Path) -> Result<RunSummary> {
    config.validate()?;
    let ck = checkpoint_load(checkpoint)?;
    if ck.model.dims != config.model_dims() {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            ck.model.dims,
            config.model_dims()
        )));
    }
    prepare_output(config)?;
    let spec = config.task_spec();
    let mpc = config.mpc_config(&spec);
    let mut dataset = load_dataset(&episodes_dir(&config.output_dir))?;
    if dataset.len() < ck.episodes {
        return Err(Error::Config(format!(
            "checkpoint expects {} episodes, found {}",
            ck.episodes,
            dataset.len()
        )));
    }
    // Episodes past the checkpoint belong to an interrupted epoch.
    dataset.truncate(ck.episodes);
    let mut state = RunState {
        spec,
        mpc,
        model: ck.model,
        dataset,
        rng: ck.rng,
        env_steps: ck.env_steps,
        next_eval: ck.next_eval,
        lr_scale: ck.lr_scale,
        metrics: ck.metrics,
        rollbacks: 0,
        last_good: Some(checkpoint.to_path_buf()),
        config: config.clone(),
    };
    run_epochs(&mut state, ck.epoch_done)?;
    finish(state)
}

// -- trajectory export ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub index: usize,
    pub epoch_tag: u32,
    pub m_true: f64,
    pub diverged: bool,
    pub actions: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    /// Property-marginal std per step, when stored beliefs exist.
    pub sigma_m: Vec<f64>,
    /// Property-marginal mean per step.
    pub mu_m: Vec<f64>,
}

/// Writes one JSON file per episode. With a model, stored beliefs are
/// refreshed by replay first so the uncertainty traces are populated.
pub fn export_trajectories(
    run_dir: &Path,
    out_dir: &Path,
    model: Option<&WorldModel>,
) -> Result<usize> {
    let mut dataset = load_dataset(&episodes_dir(run_dir))?;
    if let Some(m) = model {
        replay_beliefs(&mut dataset, m);
    }
    fs::create_dir_all(out_dir)?;
    for (index, ep) in dataset.iter().enumerate() {
        let marginals: Vec<(f64, f64)> =
            ep.stored_beliefs.iter().map(property_marginal).collect();
        let dump = TrajectoryDump {
            index,
            epoch_tag: ep.epoch_tag,
            m_true: ep.m_true,
            diverged: ep.diverged,
            actions: ep.actions.clone(),
            observations: ep.observations.clone(),
            sigma_m: marginals.iter().map(|(_, s)| *s).collect(),
            mu_m: marginals.iter().map(|(m, _)| *m).collect(),
        };
        let text =
            serde_json::to_string_pretty(&dump).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(out_dir.join(format!("traj_{index:06}.json")), text)?;
    }
    Ok(dataset.len())
}
