//! Twin-delayed deterministic policy gradient agent.

mod buffer;
mod train;

pub use buffer::{ReplayBuffer, Transition};
pub use train::{
    converged, evaluate, evaluate_from, read_metrics, train, Converged, EpisodeMetrics,
    EvalSummary, GreedyPolicy, TrainOutcome,
};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approximator::{
    optimizer_step, soft_update, AdamConfig, Archive, ExtractorKind, Network, NetworkSpec,
    ObsBatch, Role,
};
use crate::domain::{Scenario, Violation};
use crate::error::{Error, Result};
use crate::market_env::{ActionRaw, Observation};
use crate::penalty::PenaltyState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub policy_delay: u64,
    pub tau: f64,
    pub exploration_sigma: f64,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub extractor: ExtractorKind,
    /// Hidden widths of the actor and critic heads.
    pub head_hidden: Vec<usize>,
    /// Multiplies rewards before they enter the critic targets.
    pub reward_scale: f64,
    /// Greedy evaluation cadence in episodes (0 disables).
    pub eval_every: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_actor: 1e-5,
            lr_critic: 1e-5,
            batch: 100,
            buffer_capacity: 1_000_000,
            policy_delay: 2,
            tau: 0.005,
            exploration_sigma: 0.1,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            warmup_steps: 1000,
            total_steps: 200_000,
            extractor: ExtractorKind::Mbtf,
            head_hidden: vec![64, 64],
            reward_scale: 1.0,
            eval_every: 10,
        }
    }
}

impl AgentConfig {
    pub fn check(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut rule = |ok: bool, field: &str, text: &str| {
            if !ok {
                v.push(Violation::new(field, text));
            }
        };
        rule(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "0 < gamma <= 1");
        rule(self.tau > 0.0 && self.tau <= 1.0, "tau", "0 < tau <= 1");
        rule(self.policy_delay >= 1, "policy_delay", "policy_delay >= 1");
        rule(self.batch >= 1, "batch", "batch >= 1");
        rule(self.buffer_capacity >= self.batch, "buffer_capacity", "capacity >= batch");
        rule(self.lr_actor >= 0.0 && self.lr_critic >= 0.0, "lr", "learning rates >= 0");
        rule(
            self.exploration_sigma >= 0.0
                && self.target_noise_sigma >= 0.0
                && self.target_noise_clip >= 0.0,
            "noise",
            "noise scales >= 0",
        );
        rule(self.reward_scale > 0.0, "reward_scale", "reward_scale > 0");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Divides PV, DSO price and satisfaction by fixed references so network
/// inputs are of order one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsScaler {
    pub pv: f64,
    pub price: f64,
    pub satisfaction: f64,
}

impl ObsScaler {
    pub fn identity() -> Self {
        Self {
            pv: 1.0,
            price: 1.0,
            satisfaction: 1.0,
        }
    }

    /// References taken from the scenario's series maxima.
    pub fn for_scenario(s: &Scenario) -> Self {
        let max = |v: &[f64]| v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
        let positive = |x: f64| if x > 0.0 { x } else { 1.0 };
        Self {
            pv: positive(max(&s.market.pv)),
            price: positive(max(&s.market.dso_price)),
            satisfaction: 10.0,
        }
    }

    pub fn apply(&self, obs: &Observation) -> Observation {
        let mut o = obs.clone();
        o.pv_window.iter_mut().for_each(|x| *x /= self.pv);
        o.dso_window.iter_mut().for_each(|x| *x /= self.price);
        o.scalars[0] /= self.satisfaction;
        o
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone)]
pub(crate) struct AgentRngs {
    pub warmup: ChaCha8Rng,
    pub exploration: ChaCha8Rng,
    pub target_noise: ChaCha8Rng,
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_INIT: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_EXPLORATION: u64 = 3;
const STREAM_SAMPLER: u64 = 4;
const STREAM_TARGET_NOISE: u64 = 5;

/// Actor output plus zero-mean Gaussian noise, clipped to `[-1, 1]²`.
pub fn select_action<R: Rng>(
    actor: &Network,
    obs: &Observation,
    sigma: f64,
    rng: &mut R,
) -> Result<ActionRaw> {
    let a = actor.act(obs)?;
    if sigma == 0.0 {
        return Ok(a);
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ActionRaw::new(a.a1 + n.sample(rng), a.a2 + n.sample(rng)).clipped())
}

/// `r + (1 - done) * gamma * min(q1, q2)`.
pub fn critic_target(reward: f64, done: bool, gamma: f64, q1: f64, q2: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStepStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

/// Actor, twin critics and their targets.
#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub cfg: AgentConfig,
    pub scaler: ObsScaler,
    pub actor: Network,
    pub actor_target: Network,
    pub critic1: Network,
    pub critic2: Network,
    pub critic1_target: Network,
    pub critic2_target: Network,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub(crate) rngs: AgentRngs,
}

impl Td3Agent {
    pub fn new(cfg: AgentConfig, scaler: ObsScaler, seq_len: usize, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut init = stream(seed, STREAM_INIT);
        let mut spec = NetworkSpec::new(cfg.extractor, seq_len);
        spec.head_hidden = cfg.head_hidden.clone();
        let actor = Network::new(spec.clone(), Role::Actor, &mut init);
        let critic1 = Network::new(spec.clone(), Role::Critic, &mut init);
        let critic2 = Network::new(spec, Role::Critic, &mut init);
        Ok(Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            cfg,
            scaler,
            critic_updates: 0,
            actor_updates: 0,
            rngs: AgentRngs {
                warmup: stream(seed, STREAM_WARMUP),
                exploration: stream(seed, STREAM_EXPLORATION),
                target_noise: stream(seed, STREAM_TARGET_NOISE),
            },
        })
    }

    pub fn replay_buffer(cfg: &AgentConfig, seed: u64) -> ReplayBuffer {
        ReplayBuffer::new(cfg.buffer_capacity, stream(seed, STREAM_SAMPLER))
    }

    pub fn seq_len(&self) -> usize {
        self.actor.spec.seq_len
    }

    /// Deterministic action for an unscaled observation.
    pub fn greedy(&self, obs: &Observation) -> Result<ActionRaw> {
        self.actor.act(&self.scaler.apply(obs))
    }

    /// Exploration action for an unscaled observation.
    pub fn explore(&mut self, obs: &Observation) -> Result<ActionRaw> {
        let o = self.scaler.apply(obs);
        select_action(&self.actor, &o, self.cfg.exploration_sigma, &mut self.rngs.exploration)
    }

    /// Uniform action from the warmup stream.
    pub fn warmup_action(&mut self) -> ActionRaw {
        ActionRaw::new(
            self.rngs.warmup.gen_range(-1.0..=1.0),
            self.rngs.warmup.gen_range(-1.0..=1.0),
        )
    }

    /// One critic update and, every `policy_delay` critic updates, one actor
    /// update followed by soft updates of all targets.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer) -> Result<TrainStepStats> {
        let b = self.cfg.batch;
        let batch = buffer.sample(b)?;
        let seq = self.seq_len();
        let obs = ObsBatch::from_flat_rows(batch.iter().map(|t| t.obs.as_slice()), seq);
        let next = ObsBatch::from_flat_rows(batch.iter().map(|t| t.next_obs.as_slice()), seq);
        let actions = Array2::from_shape_fn((b, 2), |(r, k)| batch[r].action[k]);
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward * self.cfg.reward_scale).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();

        // Smoothed target actions.
        let mut next_a = self.actor_target.forward(&next, None)?.output().clone();
        let noise = Normal::new(0.0, self.cfg.target_noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let clip = self.cfg.target_noise_clip;
        for x in next_a.iter_mut() {
            let eps = if self.cfg.target_noise_sigma > 0.0 {
                noise.sample(&mut self.rngs.target_noise).clamp(-clip, clip)
            } else {
                0.0
            };
            *x = (*x + eps).clamp(-1.0, 1.0);
        }
        let q1n = self.critic1_target.forward(&next, Some(&next_a))?;
        let q2n = self.critic2_target.forward(&next, Some(&next_a))?;
        let y: Vec<f64> = (0..b)
            .map(|r| {
                critic_target(
                    rewards[r],
                    dones[r],
                    self.cfg.gamma,
                    q1n.output()[[r, 0]],
                    q2n.output()[[r, 0]],
                )
            })
            .collect();

        let critic_adam = AdamConfig::with_lr(self.cfg.lr_critic);
        let mut critic_loss = 0.0;
        for critic in [&mut self.critic1, &mut self.critic2] {
            critic.params.zero_grad();
            let c = critic.forward(&obs, Some(&actions))?;
            let q = c.output();
            let d = Array2::from_shape_fn((b, 1), |(r, _)| 2.0 * (q[[r, 0]] - y[r]) / b as f64);
            critic_loss += (0..b).map(|r| (q[[r, 0]] - y[r]).powi(2)).sum::<f64>() / b as f64;
            critic.backward(&c, d);
            optimizer_step(&mut critic.params, &critic_adam);
        }
        self.critic_updates += 1;

        let mut actor_loss = None;
        if self.critic_updates % self.cfg.policy_delay == 0 {
            self.actor.params.zero_grad();
            let ac = self.actor.forward(&obs, None)?;
            let qc = self.critic1.forward(&obs, Some(ac.output()))?;
            actor_loss = Some(-qc.output().mean().unwrap_or(0.0));
            let d_q = Array2::from_elem((b, 1), -1.0 / b as f64);
            let d_a = self.critic1.action_grad(&qc, d_q)?;
            self.actor.backward(&ac, d_a);
            optimizer_step(&mut self.actor.params, &AdamConfig::with_lr(self.cfg.lr_actor));
            self.actor_updates += 1;
            self.soft_update_targets(self.cfg.tau);
        }
        Ok(TrainStepStats {
            critic_loss: critic_loss / 2.0,
            actor_loss,
        })
    }

    pub fn soft_update_targets(&mut self, tau: f64) {
        soft_update(&mut self.actor_target.params, &self.actor.params, tau);
        soft_update(&mut self.critic1_target.params, &self.critic1.params, tau);
        soft_update(&mut self.critic2_target.params, &self.critic2.params, tau);
    }

    fn networks(&self) -> [(&'static str, &Network); 6] {
        [
            ("actor.", &self.actor),
            ("actor_target.", &self.actor_target),
            ("critic1.", &self.critic1),
            ("critic2.", &self.critic2),
            ("critic1_target.", &self.critic1_target),
            ("critic2_target.", &self.critic2_target),
        ]
    }

    /// Checkpoint with every network and the penalty coefficients to resume
    /// evaluation from.
    pub fn to_archive(&self, penalty: Option<&PenaltyState>) -> Result<Archive> {
        let mut a = Archive::default();
        let json = |e: serde_json::Error| Error::Archive(e.to_string());
        a.meta
            .insert("config".into(), serde_json::to_string(&self.cfg).map_err(json)?);
        a.meta
            .insert("scaler".into(), serde_json::to_string(&self.scaler).map_err(json)?);
        a.meta.insert("seq_len".into(), self.seq_len().to_string());
        if let Some(p) = penalty {
            a.meta
                .insert("penalty".into(), serde_json::to_string(p).map_err(json)?);
        }
        for (prefix, net) in self.networks() {
            a.push_bundle(&net.params, prefix);
        }
        Ok(a)
    }

    /// Rebuilds an agent from a checkpoint. Random streams restart from `seed`.
    pub fn from_archive(a: &Archive, seed: u64) -> Result<(Self, Option<PenaltyState>)> {
        let meta = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Archive(format!("checkpoint lacks '{k}'")))
        };
        let json = |e: serde_json::Error| Error::Archive(e.to_string());
        let cfg: AgentConfig = serde_json::from_str(meta("config")?).map_err(json)?;
        let scaler: ObsScaler = serde_json::from_str(meta("scaler")?).map_err(json)?;
        let seq_len: usize = meta("seq_len")?
            .parse()
            .map_err(|_| Error::Archive("bad seq_len".into()))?;
        let penalty = match a.meta.get("penalty") {
            Some(s) => Some(serde_json::from_str(s).map_err(json)?),
            None => None,
        };
        let mut agent = Self::new(cfg, scaler, seq_len, seed)?;
        a.load_into(&mut agent.actor.params, "actor.")?;
        a.load_into(&mut agent.actor_target.params, "actor_target.")?;
        a.load_into(&mut agent.critic1.params, "critic1.")?;
        a.load_into(&mut agent.critic2.params, "critic2.")?;
        a.load_into(&mut agent.critic1_target.params, "critic1_target.")?;
        a.load_into(&mut agent.critic2_target.params, "critic2_target.")?;
        Ok((agent, penalty))
    }
}
