//! Evaluation protocol: greedy episodes under observation noise, symbol
//! erasure, or a silenced channel; per-episode records and aggregates;
//! parameter sweeps; moving-average smoothing for training curves.

use serde::{Deserialize, Serialize};

use crate::agent::AgentNet;
use crate::grid::EnvConfig;
use crate::seeding;
use crate::trainer::{rollout, RolloutMode, RolloutOptions, TrainError};

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Per-agent reward.
    pub reward: Vec<f64>,
    pub total_reward: f64,
    pub length: usize,
    pub timed_out: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_tree_size: Option<f64>,
}

/// Aggregates over an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: u64,
    pub mean_reward_per_agent: Vec<f64>,
    pub mean_total_reward: f64,
    /// Fraction of episodes in which some agent missed the goal.
    pub timeout_rate: f64,
    pub mean_length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_tree_size: Option<f64>,
}

impl EvalSummary {
    pub fn from_records(records: &[EpisodeRecord], agents: usize) -> EvalSummary {
        let n = records.len().max(1) as f64;
        let mut per_agent = vec![0.0; agents];
        for r in records {
            for (acc, v) in per_agent.iter_mut().zip(&r.reward) {
                *acc += v;
            }
        }
        per_agent.iter_mut().for_each(|v| *v /= n);
        let sizes: Vec<f64> = records.iter().filter_map(|r| r.mean_tree_size).collect();
        EvalSummary {
            episodes: records.len() as u64,
            mean_reward_per_agent: per_agent,
            mean_total_reward: records.iter().map(|r| r.total_reward).sum::<f64>() / n,
            timeout_rate: records.iter().filter(|r| r.timed_out).count() as f64 / n,
            mean_length: records.iter().map(|r| r.length as f64).sum::<f64>() / n,
            mean_tree_size: if sizes.is_empty() {
                None
            } else {
                Some(sizes.iter().sum::<f64>() / sizes.len() as f64)
            },
        }
    }
}

/// Per-episode records plus aggregates for one evaluation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub beta: f64,
    pub comm_enabled: bool,
    pub records: Vec<EpisodeRecord>,
    pub summary: EvalSummary,
}

/// Runs `n_episodes` greedy episodes with the given noise level, erasure
/// probability, and channel switch. The evaluation seed stream is disjoint
/// from training streams, and episodes are indexed so reports are
/// order-deterministic.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    nets: &[AgentNet],
    env_config: &EnvConfig,
    n_episodes: u64,
    alpha: f64,
    beta: f64,
    comm_enabled: bool,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    Ok(evaluate_traced(nets, env_config, n_episodes, alpha, beta, comm_enabled, seed)?.0)
}

/// [`evaluate`], also returning the per-episode step traces for replay.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_traced(
    nets: &[AgentNet],
    env_config: &EnvConfig,
    n_episodes: u64,
    alpha: f64,
    beta: f64,
    comm_enabled: bool,
    seed: u64,
) -> Result<(EvalReport, Vec<crate::grid::EpisodeTrace>), TrainError> {
    let options = RolloutOptions {
        mode: RolloutMode::Greedy,
        comm_enabled,
        alpha,
        beta,
        record_grad: false,
        max_steps: env_config.max_steps,
    };
    let mut records = Vec::with_capacity(n_episodes as usize);
    let mut traces = Vec::with_capacity(n_episodes as usize);
    for episode in 0..n_episodes {
        let episode_seed = seeding::derive_seed(seed, "eval-episode", episode);
        let trajectory = rollout(env_config, nets, episode_seed, &options)?;
        let reward: Vec<f64> = trajectory.agents.iter().map(|a| a.reward_total).collect();
        records.push(EpisodeRecord {
            episode,
            total_reward: reward.iter().sum(),
            reward,
            length: trajectory.length,
            timed_out: trajectory.timed_out,
            mean_tree_size: trajectory.mean_hard_size(),
        });
        traces.push(trajectory.trace);
    }
    let summary = EvalSummary::from_records(&records, env_config.agents);
    Ok((EvalReport { alpha, beta, comm_enabled, records, summary }, traces))
}

/// Summary-only evaluation, used by the trainer's periodic logging.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_nets(
    nets: &[AgentNet],
    env_config: &EnvConfig,
    n_episodes: u64,
    alpha: f64,
    beta: f64,
    comm_enabled: bool,
    seed: u64,
) -> Result<EvalSummary, TrainError> {
    Ok(evaluate(nets, env_config, n_episodes, alpha, beta, comm_enabled, seed)?.summary)
}

/// Which quantity a sweep varies.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Observation noise level.
    Alpha,
    /// Symbol erasure probability.
    Beta,
}

/// One evaluation report per value, all under a common base seed so points
/// differ only in the swept parameter.
pub fn sweep(
    nets: &[AgentNet],
    env_config: &EnvConfig,
    param: SweepParam,
    values: &[f64],
    n_episodes: u64,
    seed: u64,
) -> Result<Vec<(f64, EvalReport)>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let (alpha, beta) = match param {
                SweepParam::Alpha => (v, 0.0),
                SweepParam::Beta => (0.0, v),
            };
            evaluate(nets, env_config, n_episodes, alpha, beta, true, seed).map(|r| (v, r))
        })
        .collect()
}

/// Plot-ready table for a sweep: one row per swept value.
pub fn sweep_table(rows: &[(f64, EvalReport)]) -> (Vec<&'static str>, Vec<Vec<f64>>) {
    let agents = rows
        .first()
        .map(|(_, r)| r.summary.mean_reward_per_agent.len())
        .unwrap_or(0);
    let mut header = vec!["value"];
    const AGENT_COLS: [&str; 8] = [
        "reward0", "reward1", "reward2", "reward3", "reward4", "reward5", "reward6", "reward7",
    ];
    header.extend(AGENT_COLS.iter().take(agents));
    header.extend(["total_reward", "timeout_rate", "mean_length", "mean_tree_size"]);
    let data = rows
        .iter()
        .map(|(v, r)| {
            let mut row = vec![*v];
            row.extend(&r.summary.mean_reward_per_agent);
            row.push(r.summary.mean_total_reward);
            row.push(r.summary.timeout_rate);
            row.push(r.summary.mean_length);
            row.push(r.summary.mean_tree_size.unwrap_or(f64::NAN));
            row
        })
        .collect();
    (header, data)
}

/// Trailing moving average; positions before a full window average over the
/// available prefix.
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>, TrainError> {
    if window < 1 {
        return Err(TrainError::Config("smoothing window must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        let count = (i + 1).min(window);
        out.push(acc / count as f64);
    }
    Ok(out)
}
