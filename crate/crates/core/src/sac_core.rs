//! Soft actor-critic learner: replay buffer, tanh-Gaussian policy, twin Q
//! networks and a state-value network with a Polyak-averaged target.
//!
//! The policy network emits `2 * action_dim` linear outputs: the Gaussian mean
//! followed by the raw log standard deviation. Actions are `tanh(mean + std * noise)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, EpisodeOutcome};
use crate::error::{check_dim, Error, Result};
use crate::nnet::{
    adam_step, backward_trace, forward, forward_trace, Activation, AdamState, NetSpec, ParamVector,
};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Task termination. Horizon timeouts are stored with `done = false` so the
    /// critic keeps bootstrapping through them.
    pub done: bool,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "replay capacity must be positive".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.storage.get(slot)
    }

    /// Uniform slot indices, drawn with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let n = self.storage.len();
        if n == 0 {
            return Vec::new();
        }
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(batch_size, rng)
            .into_iter()
            .map(|i| &self.storage[i])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    /// Entropy temperature, fixed for the whole run.
    pub temperature: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            temperature: 0.2,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 128,
            replay_capacity: 100_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("sac.gamma", "must lie in (0, 1)"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sac.temperature", "must be finite and >= 0"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("sac.tau", "must lie in (0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("sac.lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sac.batch_size", "must be positive"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config(
                "sac.replay_capacity",
                "must be at least sac.batch_size",
            ));
        }
        Ok(())
    }
}

pub fn policy_spec(obs_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<NetSpec> {
    NetSpec::new(obs_dim, hidden, 2 * action_dim, Activation::Linear)
}

pub fn q_spec(obs_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<NetSpec> {
    NetSpec::new(obs_dim + action_dim, hidden, 1, Activation::Linear)
}

pub fn value_spec(obs_dim: usize, hidden: &[usize]) -> Result<NetSpec> {
    NetSpec::new(obs_dim, hidden, 1, Activation::Linear)
}

fn action_dim_of(spec: &NetSpec) -> usize {
    spec.output_dim() / 2
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
#[inline]
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Mean action `tanh(mu)`; used for fitness evaluation and validation.
pub fn deterministic_action(
    spec: &NetSpec,
    theta: &ParamVector,
    state: &[f64],
) -> Result<Vec<f64>> {
    let out = forward(theta, spec, state)?;
    Ok(out[..action_dim_of(spec)]
        .iter()
        .map(|m| m.tanh())
        .collect())
}

/// Everything computed while drawing a reparameterized action.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub noise: Vec<f64>,
}

fn split_head(out: &[f64], action_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = out[..action_dim].to_vec();
    let log_std = out[action_dim..2 * action_dim]
        .iter()
        .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    (mean, log_std)
}

fn sample_from_head(mean: Vec<f64>, log_std: Vec<f64>, noise: &[f64]) -> PolicySample {
    let mut action = Vec::with_capacity(mean.len());
    let mut log_prob = 0.0;
    for i in 0..mean.len() {
        let u = mean[i] + log_std[i].exp() * noise[i];
        action.push(u.tanh());
        log_prob +=
            -0.5 * noise[i] * noise[i] - log_std[i] - HALF_LOG_2PI - log_one_minus_tanh_sq(u);
    }
    PolicySample {
        action,
        log_prob,
        mean,
        log_std,
        noise: noise.to_vec(),
    }
}

/// Reparameterized sample with caller-supplied standard-normal `noise`.
pub fn policy_sample_with_noise(
    spec: &NetSpec,
    theta: &ParamVector,
    state: &[f64],
    noise: &[f64],
) -> Result<PolicySample> {
    let action_dim = action_dim_of(spec);
    check_dim("policy noise", action_dim, noise.len())?;
    let out = forward(theta, spec, state)?;
    let (mean, log_std) = split_head(&out, action_dim);
    Ok(sample_from_head(mean, log_std, noise))
}

pub fn draw_noise<R: Rng + ?Sized>(action_dim: usize, rng: &mut R) -> Vec<f64> {
    (0..action_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

/// Samples `a = tanh(mu + std * xi)` and returns it with `log pi(a|s)`.
pub fn policy_sample<R: Rng + ?Sized>(
    spec: &NetSpec,
    theta: &ParamVector,
    state: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let noise = draw_noise(action_dim_of(spec), rng);
    let s = policy_sample_with_noise(spec, theta, state, &noise)?;
    Ok((s.action, s.log_prob))
}

/// Density of an arbitrary action in `(-1, 1)^d` under the policy.
pub fn log_prob_of(
    spec: &NetSpec,
    theta: &ParamVector,
    state: &[f64],
    action: &[f64],
) -> Result<f64> {
    let action_dim = action_dim_of(spec);
    check_dim("policy action", action_dim, action.len())?;
    if action.iter().any(|a| !(a.abs() < 1.0)) {
        return Err(Error::InvalidArgument(
            "action components must lie strictly inside (-1, 1)".into(),
        ));
    }
    let out = forward(theta, spec, state)?;
    let (mean, log_std) = split_head(&out, action_dim);
    let mut lp = 0.0;
    for i in 0..action_dim {
        let u = action[i].atanh();
        let xi = (u - mean[i]) / log_std[i].exp();
        lp += -0.5 * xi * xi - log_std[i] - HALF_LOG_2PI - log_one_minus_tanh_sq(u);
    }
    Ok(lp)
}

/// Parameters of every SAC network.
#[derive(Debug, Clone)]
pub struct SacNetworks {
    pub policy_spec: NetSpec,
    pub q_spec: NetSpec,
    pub value_spec: NetSpec,
    /// Policy.
    pub theta: ParamVector,
    /// State value.
    pub psi: ParamVector,
    /// Target state value.
    pub psi_target: ParamVector,
    pub phi1: ParamVector,
    pub phi2: ParamVector,
}

impl SacNetworks {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let policy_spec = policy_spec(obs_dim, action_dim, hidden)?;
        let q_spec = q_spec(obs_dim, action_dim, hidden)?;
        let value_spec = value_spec(obs_dim, hidden)?;
        let theta = policy_spec.init_params(rng);
        let psi = value_spec.init_params(rng);
        let phi1 = q_spec.init_params(rng);
        let phi2 = q_spec.init_params(rng);
        Ok(SacNetworks {
            psi_target: psi.clone(),
            policy_spec,
            q_spec,
            value_spec,
            theta,
            psi,
            phi1,
            phi2,
        })
    }

    pub fn action_dim(&self) -> usize {
        action_dim_of(&self.policy_spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_batch(batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InvalidArgument("empty batch".into()))
    } else {
        Ok(())
    }
}

fn q_input(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action.len());
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x
}

fn draw_batch_noise<R: Rng + ?Sized>(n: usize, action_dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| draw_noise(action_dim, rng)).collect()
}

/// `J_V = mean 1/2 (V_psi(s) - [min_i Q_phi_i(s, a) - lambda log pi(a|s)])^2`
/// with one fresh action per state.
pub fn compute_value_loss<R: Rng + ?Sized>(
    nets: &SacNetworks,
    batch: &[&Transition],
    temperature: f64,
    rng: &mut R,
) -> Result<LossAndGrad> {
    let noise = draw_batch_noise(batch.len(), nets.action_dim(), rng);
    value_loss_with_noise(nets, batch, temperature, &noise)
}

pub fn value_loss_with_noise(
    nets: &SacNetworks,
    batch: &[&Transition],
    temperature: f64,
    noise: &[Vec<f64>],
) -> Result<LossAndGrad> {
    check_batch(batch)?;
    check_dim("value-loss noise", batch.len(), noise.len())?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; nets.value_spec.param_count()];
    let mut loss = 0.0;
    for (t, xi) in batch.iter().zip(noise) {
        let target = soft_value_target(nets, &t.state, temperature, xi)?;
        let trace = forward_trace(&nets.psi, &nets.value_spec, &t.state)?;
        let diff = trace.output()[0] - target;
        loss += 0.5 * diff * diff * scale;
        backward_trace(
            &nets.psi,
            &nets.value_spec,
            &trace,
            &[diff * scale],
            Some(&mut grad),
        )?;
    }
    Ok(LossAndGrad { loss, grad })
}

/// Single-sample soft value `min_i Q_i(s, a) - lambda log pi(a|s)`.
pub fn soft_value_target(
    nets: &SacNetworks,
    state: &[f64],
    temperature: f64,
    noise: &[f64],
) -> Result<f64> {
    let s = policy_sample_with_noise(&nets.policy_spec, &nets.theta, state, noise)?;
    let x = q_input(state, &s.action);
    let q1 = forward(&nets.phi1, &nets.q_spec, &x)?[0];
    let q2 = forward(&nets.phi2, &nets.q_spec, &x)?[0];
    Ok(q1.min(q2) - temperature * s.log_prob)
}

/// `J_Q = mean 1/2 (Q_phi(s, a) - (r + gamma (1 - done) V_target(s')))^2`.
pub fn compute_q_loss(
    q_spec: &NetSpec,
    phi: &ParamVector,
    value_spec: &NetSpec,
    psi_target: &ParamVector,
    batch: &[&Transition],
    gamma: f64,
) -> Result<LossAndGrad> {
    check_batch(batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; q_spec.param_count()];
    let mut loss = 0.0;
    for t in batch {
        let y = q_target(value_spec, psi_target, t, gamma)?;
        let trace = forward_trace(phi, q_spec, &q_input(&t.state, &t.action))?;
        let diff = trace.output()[0] - y;
        loss += 0.5 * diff * diff * scale;
        backward_trace(phi, q_spec, &trace, &[diff * scale], Some(&mut grad))?;
    }
    Ok(LossAndGrad { loss, grad })
}

pub fn q_target(
    value_spec: &NetSpec,
    psi_target: &ParamVector,
    t: &Transition,
    gamma: f64,
) -> Result<f64> {
    if t.done || gamma == 0.0 {
        return Ok(t.reward);
    }
    let v_next = forward(psi_target, value_spec, &t.next_state)?[0];
    Ok(t.reward + gamma * v_next)
}

/// `J_pi = mean(lambda log pi(a|s) - min_i Q_phi_i(s, a))` with `a` reparameterized.
/// Only the policy receives gradient.
pub fn compute_policy_loss<R: Rng + ?Sized>(
    nets: &SacNetworks,
    batch: &[&Transition],
    temperature: f64,
    rng: &mut R,
) -> Result<LossAndGrad> {
    let noise = draw_batch_noise(batch.len(), nets.action_dim(), rng);
    policy_loss_with_noise(nets, batch, temperature, &noise)
}

pub fn policy_loss_with_noise(
    nets: &SacNetworks,
    batch: &[&Transition],
    temperature: f64,
    noise: &[Vec<f64>],
) -> Result<LossAndGrad> {
    check_batch(batch)?;
    check_dim("policy-loss noise", batch.len(), noise.len())?;
    let action_dim = nets.action_dim();
    let obs_dim = nets.policy_spec.input_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; nets.policy_spec.param_count()];
    let mut loss = 0.0;
    for (t, xi) in batch.iter().zip(noise) {
        check_dim("policy-loss noise", action_dim, xi.len())?;
        let trace = forward_trace(&nets.theta, &nets.policy_spec, &t.state)?;
        let raw = trace.output();
        let (mean, log_std) = split_head(raw, action_dim);
        let sample = sample_from_head(mean, log_std, xi);

        let x = q_input(&t.state, &sample.action);
        let q1_trace = forward_trace(&nets.phi1, &nets.q_spec, &x)?;
        let q2_trace = forward_trace(&nets.phi2, &nets.q_spec, &x)?;
        let (q1, q2) = (q1_trace.output()[0], q2_trace.output()[0]);
        let (q_min, phi, q_trace) = if q1 <= q2 {
            (q1, &nets.phi1, &q1_trace)
        } else {
            (q2, &nets.phi2, &q2_trace)
        };
        loss += (temperature * sample.log_prob - q_min) * scale;

        let dq_dx = backward_trace(phi, &nets.q_spec, q_trace, &[1.0], None)?;
        let dq_da = &dq_dx[obs_dim..];
        let mut upstream = vec![0.0; 2 * action_dim];
        for i in 0..action_dim {
            let a = sample.action[i];
            let std = sample.log_std[i].exp();
            let dtanh = 1.0 - a * a;
            let du_dls = std * xi[i];
            // d log pi / du = 2 tanh(u); d(-Q)/du = -dQ/da * (1 - a^2).
            let dl_du = temperature * 2.0 * a - dq_da[i] * dtanh;
            upstream[i] = dl_du * scale;
            let clamped = raw[action_dim + i] < LOG_STD_MIN || raw[action_dim + i] > LOG_STD_MAX;
            if !clamped {
                upstream[action_dim + i] = (dl_du * du_dls - temperature) * scale;
            }
        }
        backward_trace(
            &nets.theta,
            &nets.policy_spec,
            &trace,
            &upstream,
            Some(&mut grad),
        )?;
    }
    Ok(LossAndGrad { loss, grad })
}

/// Polyak averaging `tau * source + (1 - tau) * target`.
pub fn target_update(target: &ParamVector, source: &ParamVector, tau: f64) -> Result<ParamVector> {
    check_dim("target update", target.len(), source.len())?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    let values = target
        .as_slice()
        .iter()
        .zip(source.as_slice())
        .map(|(t, s)| tau * s + (1.0 - tau) * t)
        .collect();
    target.with_values(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub value_loss: f64,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    /// The buffer held fewer than `batch_size` transitions; nothing was updated.
    pub skipped: bool,
}

impl UpdateMetrics {
    fn skipped() -> Self {
        UpdateMetrics {
            value_loss: f64::NAN,
            q1_loss: f64::NAN,
            q2_loss: f64::NAN,
            policy_loss: f64::NAN,
            skipped: true,
        }
    }
}

/// SAC networks, optimizers, replay buffer and the gradient-update counter.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub nets: SacNetworks,
    pub config: SacConfig,
    buffer: ReplayBuffer,
    adam_theta: AdamState,
    adam_psi: AdamState,
    adam_phi1: AdamState,
    adam_phi2: AdamState,
    update_count: u64,
}

impl SacAgent {
    pub fn new(nets: SacNetworks, config: SacConfig) -> Result<Self> {
        config.validate()?;
        Ok(SacAgent {
            buffer: ReplayBuffer::new(config.replay_capacity)?,
            adam_theta: AdamState::new(nets.theta.len()),
            adam_psi: AdamState::new(nets.psi.len()),
            adam_phi1: AdamState::new(nets.phi1.len()),
            adam_phi2: AdamState::new(nets.phi2.len()),
            nets,
            config,
            update_count: 0,
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Total gradient updates performed so far.
    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(policy_sample(&self.nets.policy_spec, &self.nets.theta, state, rng)?.0)
    }

    pub fn act_deterministic(&self, state: &[f64]) -> Result<Vec<f64>> {
        deterministic_action(&self.nets.policy_spec, &self.nets.theta, state)
    }

    /// Runs one stochastic-policy episode, storing every transition.
    pub fn collect_episode<R: Rng + ?Sized>(
        &mut self,
        env: &mut dyn Environment,
        seed: u64,
        rng: &mut R,
    ) -> Result<EpisodeOutcome> {
        let mut obs = env.reset(seed).observation;
        let mut total = 0.0;
        let mut length = 0;
        loop {
            let action = self.act(&obs, rng)?;
            let step = env.step(&action)?;
            total += step.reward;
            length += 1;
            self.buffer.push(Transition {
                state: obs,
                action,
                reward: step.reward,
                next_state: step.next_observation.clone(),
                done: step.terminal,
            });
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

    /// One Adam step each on the value network, both critics and the policy,
    /// followed by the target update.
    pub fn sac_update_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<UpdateMetrics> {
        let cfg = self.config.clone();
        if self.buffer.len() < cfg.batch_size {
            return Ok(UpdateMetrics::skipped());
        }
        let indices = self.buffer.sample_indices(cfg.batch_size, rng);
        let batch: Vec<&Transition> = indices.iter().map(|&i| &self.buffer.storage[i]).collect();

        let value = compute_value_loss(&self.nets, &batch, cfg.temperature, rng)?;
        let q1 = compute_q_loss(
            &self.nets.q_spec,
            &self.nets.phi1,
            &self.nets.value_spec,
            &self.nets.psi_target,
            &batch,
            cfg.gamma,
        )?;
        let q2 = compute_q_loss(
            &self.nets.q_spec,
            &self.nets.phi2,
            &self.nets.value_spec,
            &self.nets.psi_target,
            &batch,
            cfg.gamma,
        )?;
        adam_step(&mut self.nets.psi, &value.grad, &mut self.adam_psi, cfg.lr)?;
        adam_step(&mut self.nets.phi1, &q1.grad, &mut self.adam_phi1, cfg.lr)?;
        adam_step(&mut self.nets.phi2, &q2.grad, &mut self.adam_phi2, cfg.lr)?;

        let policy = compute_policy_loss(&self.nets, &batch, cfg.temperature, rng)?;
        adam_step(
            &mut self.nets.theta,
            &policy.grad,
            &mut self.adam_theta,
            cfg.lr,
        )?;

        self.nets.psi_target = target_update(&self.nets.psi_target, &self.nets.psi, cfg.tau)?;
        self.update_count += 1;
        Ok(UpdateMetrics {
            value_loss: value.loss,
            q1_loss: q1.loss,
            q2_loss: q2.loss,
            policy_loss: policy.loss,
            skipped: false,
        })
    }
}

/// Plain SAC driven one environment step at a time: every step is stored and
/// followed by one gradient update once the buffer holds a full batch.
pub struct SacTrainer<R: Rng> {
    pub agent: SacAgent,
    env: Box<dyn Environment>,
    rng: R,
    seed: u64,
    obs: Option<Vec<f64>>,
    episodes: u64,
    episode_return: f64,
    episode_length: usize,
    env_steps: u64,
}

impl<R: Rng> SacTrainer<R> {
    /// Episode `k` resets the environment with a seed derived from `(seed, k)`.
    pub fn new(agent: SacAgent, env: Box<dyn Environment>, rng: R, seed: u64) -> Self {
        SacTrainer {
            agent,
            env,
            rng,
            seed,
            obs: None,
            episodes: 0,
            episode_return: 0.0,
            episode_length: 0,
            env_steps: 0,
        }
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Advances one environment step; returns the outcome when an episode ends.
    pub fn step(&mut self) -> Result<Option<EpisodeOutcome>> {
        let obs = match self.obs.take() {
            Some(o) => o,
            None => {
                let seed = crate::rng::derive_seed(
                    self.seed,
                    crate::rng::Stream::Baseline,
                    self.episodes,
                    0,
                );
                self.episode_return = 0.0;
                self.episode_length = 0;
                self.env.reset(seed).observation
            }
        };
        let action = self.agent.act(&obs, &mut self.rng)?;
        let step = self.env.step(&action)?;
        self.env_steps += 1;
        self.episode_return += step.reward;
        self.episode_length += 1;
        self.agent.store(Transition {
            state: obs,
            action,
            reward: step.reward,
            next_state: step.next_observation.clone(),
            done: step.terminal,
        });
        self.agent.sac_update_step(&mut self.rng)?;
        if step.done {
            self.episodes += 1;
            Ok(Some(EpisodeOutcome {
                episodic_return: self.episode_return,
                length: self.episode_length,
            }))
        } else {
            self.obs = Some(step.next_observation);
            Ok(None)
        }
    }
}
