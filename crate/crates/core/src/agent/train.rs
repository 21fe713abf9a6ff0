use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{AgentConfig, ObsScaler, Td3Agent, Transition};
use crate::approximator::ExtractorKind;
use crate::domain::{validate_scenario, Scenario};
use crate::error::{Error, Result};
use crate::market_env::{
    episode_return, initial_state, rollout_from, ActionRaw, MarketEnv, Observation, Policy,
    StepOutcome,
};
use crate::penalty::PenaltyState;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub episode: usize,
    /// Environment steps taken so far.
    pub steps: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Day-average satisfaction of the episode.
    pub c_ave: f64,
    /// Sum of the satisfaction penalty over the episode.
    pub penalty: f64,
    pub beta_lin: f64,
    pub beta_sqr: f64,
    pub extractor: ExtractorKind,
    pub eval_return: Option<f64>,
    pub eval_c_ave: Option<f64>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub agent: Td3Agent,
    pub metrics: Vec<EpisodeMetrics>,
    /// Penalty coefficients of the training environment at the end.
    pub penalty: PenaltyState,
    /// Every action sent to the environment, in order.
    pub actions: Vec<ActionRaw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_return: f64,
    pub mean_c_ave: f64,
    pub traces: Vec<Vec<StepOutcome>>,
}

/// Noise-free actor as a rollout policy.
pub struct GreedyPolicy<'a>(pub &'a Td3Agent);

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &Observation, _t: usize) -> Result<ActionRaw> {
        self.0.greedy(obs)
    }
}

/// Greedy rollouts starting from the given penalty coefficients.
pub fn evaluate_from(
    agent: &Td3Agent,
    scenario: &Scenario,
    n_episodes: usize,
    penalty: PenaltyState,
) -> Result<EvalSummary> {
    let n = n_episodes.max(1);
    let mut traces = Vec::with_capacity(n);
    for ep in 0..n {
        let mut st = initial_state(scenario, ep as u64);
        st.penalty = penalty;
        traces.push(rollout_from(scenario, st, &mut GreedyPolicy(agent))?);
    }
    let mean_return = traces.iter().map(|t| episode_return(t)).sum::<f64>() / n as f64;
    let mean_c_ave = traces
        .iter()
        .map(|t| t.last().map_or(0.0, |o| o.c_ave))
        .sum::<f64>()
        / n as f64;
    Ok(EvalSummary {
        mean_return,
        mean_c_ave,
        traces,
    })
}

/// Greedy rollouts with the scenario's initial penalty coefficients.
pub fn evaluate(agent: &Td3Agent, scenario: &Scenario, n_episodes: usize) -> Result<EvalSummary> {
    evaluate_from(agent, scenario, n_episodes, PenaltyState::new(scenario.penalty))
}

/// Runs a full training loop. Metrics are also written as JSON lines to `log`.
///
/// Greedy evaluations during training start from the training environment's
/// current penalty coefficients, so they score the policy against the penalty
/// it is being trained on.
pub fn train(
    scenario: &Scenario,
    cfg: AgentConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let started = Instant::now();
    let shared = Arc::new(scenario.clone());
    let mut agent = Td3Agent::new(cfg, ObsScaler::for_scenario(scenario), scenario.seq_len(), seed)?;
    let mut buffer = Td3Agent::replay_buffer(&agent.cfg, seed);
    let mut env = MarketEnv::new(shared, seed);
    let mut obs = env.reset(seed)?;
    let mut metrics = Vec::new();
    let mut actions = Vec::with_capacity(agent.cfg.total_steps);
    let mut ep_return = 0.0;
    let mut ep_penalty = 0.0;
    let mut episode = 0;

    for step in 0..agent.cfg.total_steps {
        let a = if step < agent.cfg.warmup_steps {
            agent.warmup_action()
        } else {
            agent.explore(&obs)?
        };
        actions.push(a);
        let (out, next) = env.step(a)?;
        buffer.push(Transition {
            obs: agent.scaler.apply(&obs).flatten(),
            action: a.as_array(),
            reward: out.reward,
            next_obs: agent.scaler.apply(&next).flatten(),
            done: out.done,
        });
        ep_return += out.reward;
        ep_penalty += out.penalty;
        if step >= agent.cfg.warmup_steps && buffer.len() >= agent.cfg.batch {
            agent.train_step(&mut buffer)?;
        }
        if out.done {
            let penalty = env.penalty_state();
            let (eval_return, eval_c_ave) =
                if agent.cfg.eval_every > 0 && (episode + 1) % agent.cfg.eval_every == 0 {
                    let e = evaluate_from(&agent, scenario, 1, penalty)?;
                    (Some(e.mean_return), Some(e.mean_c_ave))
                } else {
                    (None, None)
                };
            let m = EpisodeMetrics {
                seed,
                episode,
                steps: step + 1,
                episode_return: ep_return,
                c_ave: out.c_ave,
                penalty: ep_penalty,
                beta_lin: penalty.beta_lin,
                beta_sqr: penalty.beta_sqr,
                extractor: agent.cfg.extractor,
                eval_return,
                eval_c_ave,
                wall_time: started.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&m).map_err(|e| Error::Io(e.into()))?;
                writeln!(w, "{line}")?;
            }
            metrics.push(m);
            episode += 1;
            ep_return = 0.0;
            ep_penalty = 0.0;
            obs = env.reset(seed)?;
        } else {
            obs = next;
        }
    }
    Ok(TrainOutcome {
        agent,
        metrics,
        penalty: env.penalty_state(),
        actions,
    })
}

/// Averages over the final tenth of a training log (at least one episode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Converged {
    pub episodes: usize,
    /// Mean return; greedy evaluation returns when every tail episode has one.
    #[serde(rename = "return")]
    pub mean_return: f64,
    /// Population standard deviation of the same returns.
    pub return_sd: f64,
    pub c_ave: f64,
    /// Mean per-episode penalty of the training episodes.
    pub penalty: f64,
}

pub fn converged(metrics: &[EpisodeMetrics]) -> Option<Converged> {
    if metrics.is_empty() {
        return None;
    }
    let tail = &metrics[metrics.len() - (metrics.len() / 10).max(1)..];
    let n = tail.len() as f64;
    let greedy = tail.iter().all(|m| m.eval_return.is_some() && m.eval_c_ave.is_some());
    let (rets, sats): (Vec<f64>, Vec<f64>) = if greedy {
        tail.iter()
            .map(|m| (m.eval_return.unwrap(), m.eval_c_ave.unwrap()))
            .unzip()
    } else {
        tail.iter().map(|m| (m.episode_return, m.c_ave)).unzip()
    };
    let mean_return = rets.iter().sum::<f64>() / n;
    let return_sd = (rets.iter().map(|r| (r - mean_return).powi(2)).sum::<f64>() / n).sqrt();
    Some(Converged {
        episodes: tail.len(),
        mean_return,
        return_sd,
        c_ave: sats.iter().sum::<f64>() / n,
        penalty: tail.iter().map(|m| m.penalty).sum::<f64>() / n,
    })
}

/// Parses a JSON-lines training log.
pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<EpisodeMetrics>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Io(e.into()))?);
    }
    Ok(out)
}
