//! Decentralized actor-critic training.
//!
//! Workers collect whole episodes in private environment copies, compute
//! per-agent losses (policy gradient with constant advantages, value
//! regression, entropy bonus, and the abstraction size penalty), and apply
//! Adam updates to per-agent shared parameter stores. Gradients never mix
//! across agents. Single-worker runs are strictly single-threaded and
//! bit-reproducible.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{act, AgentError, AgentNet, AgentStepOutput, Decide, StepScript};
use crate::checkpoint::{self, CheckpointError, NamedTensor};
use crate::grid::{
    self, Action, EnvConfig, EnvState, EpisodeTrace, GridError, Symbol, TraceRecord,
};
use crate::metrics::{LossParts, MetricRecord, MetricsWriter};
use crate::neural::{
    adam_step, clip_global_norm, AdamConfig, AdamState, Binding, NeuralError, Tape, ValueId,
};
use crate::seeding;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

/// Training hyperparameters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub adam: AdamConfig,
    pub workers: usize,
    pub total_episodes: u64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Weight of the abstraction size penalty.
    pub size_coef: f64,
    pub grad_clip: f64,
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub seed: u64,
    /// With the channel disabled agents receive only null symbols and the
    /// symbol terms drop out of the loss.
    pub comm_enabled: bool,
    /// Episodes during which merge decisions are forced to keep, so the
    /// policy learns on full trees before the size penalty starts trimming.
    pub warmup_keep_episodes: u64,
    /// Episodes between rolling checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Stamp metric records with wallclock seconds.
    pub timestamps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            adam: AdamConfig::default(),
            workers: 1,
            total_episodes: 1000,
            value_coef: 0.5,
            entropy_coef: 0.01,
            size_coef: 1.0,
            grad_clip: 40.0,
            eval_every: 500,
            eval_episodes: 10,
            seed: 0,
            comm_enabled: true,
            warmup_keep_episodes: 0,
            checkpoint_every: 0,
            timestamps: true,
        }
    }
}

/// Action/symbol selection inside rollouts.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RolloutMode {
    Sample,
    /// Sample actions and symbols but force all merge decisions to keep.
    SampleKeepAll,
    Greedy,
}

/// Rollout knobs shared by training and evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions {
    pub mode: RolloutMode,
    pub comm_enabled: bool,
    /// Observation noise level.
    pub alpha: f64,
    /// Symbol erasure probability.
    pub beta: f64,
    /// Record tapes for backpropagation.
    pub record_grad: bool,
    pub max_steps: usize,
}

impl RolloutOptions {
    pub fn training(max_steps: usize, comm_enabled: bool) -> RolloutOptions {
        RolloutOptions {
            mode: RolloutMode::Sample,
            comm_enabled,
            alpha: 0.0,
            beta: 0.0,
            record_grad: true,
            max_steps,
        }
    }

    pub fn evaluation(max_steps: usize) -> RolloutOptions {
        RolloutOptions {
            mode: RolloutMode::Greedy,
            comm_enabled: true,
            alpha: 0.0,
            beta: 0.0,
            record_grad: false,
            max_steps,
        }
    }
}

/// Tape handles of one recorded step.
struct StepNodes {
    value: ValueId,
    logp_action: ValueId,
    logp_symbol: ValueId,
    entropy_action: ValueId,
    entropy_symbol: ValueId,
    penalty: Option<ValueId>,
}

/// One loss-relevant (pre-done) step of one agent.
pub struct StepData {
    pub location: (usize, usize),
    pub action: Action,
    pub symbol: Symbol,
    pub log_prob_action: f64,
    pub log_prob_symbol: f64,
    pub entropy_action: f64,
    pub entropy_symbol: f64,
    pub value: f64,
    pub reward: f64,
    pub soft_size: Option<f64>,
    pub hard_size: Option<f64>,
    pub script: StepScript,
    nodes: Option<StepNodes>,
}

/// One agent's view of an episode: its tape, its loss-relevant steps, and
/// the bootstrap value when the episode was cut off at the horizon.
pub struct AgentEpisode {
    pub tape: Tape,
    pub binding: Option<Binding>,
    pub steps: Vec<StepData>,
    pub reward_total: f64,
    pub truncated: bool,
    pub bootstrap: f64,
}

/// A full multi-agent episode.
pub struct Trajectory {
    pub agents: Vec<AgentEpisode>,
    pub length: usize,
    pub timed_out: bool,
    pub trace: EpisodeTrace,
    /// Post-erasure symbol set each agent received at every step (all null
    /// at t = 0).
    pub received: Vec<Vec<Symbol>>,
}

impl Trajectory {
    /// Mean hard tree size over all recorded steps, when tree-based.
    pub fn mean_hard_size(&self) -> Option<f64> {
        let sizes: Vec<f64> = self
            .agents
            .iter()
            .flat_map(|a| a.steps.iter().filter_map(|s| s.hard_size))
            .collect();
        if sizes.is_empty() {
            None
        } else {
            Some(sizes.iter().sum::<f64>() / sizes.len() as f64)
        }
    }
}

/// Runs one episode from a freshly sampled layout.
pub fn rollout(
    env_config: &EnvConfig,
    nets: &[AgentNet],
    seed: u64,
    options: &RolloutOptions,
) -> Result<Trajectory, TrainError> {
    let mut reset_rng = seeding::stream_rng(seed, "reset", 0);
    let state = grid::reset_with_rng(env_config, &mut reset_rng)?;
    rollout_from_state(state, nets, seed, options)
}

/// Runs one episode from an explicit initial state. All randomness derives
/// from `seed` through per-purpose streams, so toggling noise or erasure
/// does not perturb action sampling.
pub fn rollout_from_state(
    state0: EnvState,
    nets: &[AgentNet],
    seed: u64,
    options: &RolloutOptions,
) -> Result<Trajectory, TrainError> {
    let n_agents = state0.config.agents;
    if nets.len() != n_agents {
        return Err(TrainError::Config(format!(
            "{} nets for {} agents",
            nets.len(),
            n_agents
        )));
    }
    let mut act_rngs: Vec<_> =
        (0..n_agents).map(|n| seeding::stream_rng(seed, "act", n as u64)).collect();
    let mut noise_rngs: Vec<_> =
        (0..n_agents).map(|n| seeding::stream_rng(seed, "obs-noise", n as u64)).collect();
    let mut erase_rng = seeding::stream_rng(seed, "erasure", 0);

    let mut episodes: Vec<AgentEpisode> = nets
        .iter()
        .map(|net| {
            let mut tape = Tape::new();
            let binding = options.record_grad.then(|| net.store.bind(&mut tape));
            AgentEpisode {
                tape,
                binding,
                steps: Vec::new(),
                reward_total: 0.0,
                truncated: false,
                bootstrap: 0.0,
            }
        })
        .collect();
    // Live GRU state per agent: the tape node while recording, plus the
    // plain values for scratch (no-grad) steps.
    let mut hidden_nodes: Vec<Option<ValueId>> = episodes
        .iter_mut()
        .zip(nets)
        .map(|(ep, net)| {
            ep.binding.is_some().then(|| {
                ep.tape.input(1, net.config.gru_hidden, net.initial_hidden())
            })
        })
        .collect();
    let mut hidden_values: Vec<Vec<f64>> = nets.iter().map(|n| n.initial_hidden()).collect();

    let mut state = state0;
    let mut symbols_prev = vec![Symbol::NULL; n_agents];
    let mut trace = EpisodeTrace::default();
    let mut received_log = Vec::new();
    let mut length = 0;

    loop {
        let received: Vec<Symbol> = if options.comm_enabled {
            symbols_prev.clone()
        } else {
            vec![Symbol::NULL; n_agents]
        };
        received_log.push(received.clone());

        let positions = state.agent_pos.clone();
        let mut joint = vec![Action::Stay; n_agents];
        let mut emitted = vec![Symbol::NULL; n_agents];
        for n in 0..n_agents {
            let mut obs = grid::observe(&state, n)?;
            if options.alpha > 0.0 {
                obs = grid::apply_noise(&obs, options.alpha, &mut noise_rngs[n])?;
            }
            let active = !state.agent_done[n];
            let record = active && episodes[n].binding.is_some();
            let out = if record {
                let ep = &mut episodes[n];
                let h = hidden_nodes[n].expect("recording agents carry a hidden node");
                let out = step_forward(
                    &nets[n],
                    ep.binding.as_ref().expect("recording binding"),
                    &mut ep.tape,
                    &obs,
                    positions[n],
                    &received,
                    h,
                    options.mode,
                    &mut act_rngs[n],
                )?;
                hidden_nodes[n] = Some(out.hidden_node);
                out
            } else {
                // Scratch forward: done agents keep emitting symbols, and
                // evaluation never records gradients.
                let mut tape = Tape::new();
                let binding = nets[n].store.bind(&mut tape);
                let h = tape.input(1, nets[n].config.gru_hidden, hidden_values[n].clone());
                step_forward(
                    &nets[n],
                    &binding,
                    &mut tape,
                    &obs,
                    positions[n],
                    &received,
                    h,
                    options.mode,
                    &mut act_rngs[n],
                )?
            };
            hidden_values[n] = out.hidden.clone();
            emitted[n] = out.symbol;
            if active {
                joint[n] = out.action;
            }
            if record {
                episodes[n].steps.push(StepData {
                    location: positions[n],
                    action: out.action,
                    symbol: out.symbol,
                    log_prob_action: out.log_prob_action,
                    log_prob_symbol: out.log_prob_symbol,
                    entropy_action: out.entropy_action,
                    entropy_symbol: out.entropy_symbol,
                    value: out.value,
                    reward: 0.0,
                    soft_size: out.soft_size,
                    hard_size: out.hard_size,
                    script: out.script.clone(),
                    nodes: Some(StepNodes {
                        value: out.value_node,
                        logp_action: out.logp_action_node,
                        logp_symbol: out.logp_symbol_node,
                        entropy_action: out.entropy_action_node,
                        entropy_symbol: out.entropy_symbol_node,
                        penalty: out.penalty_node,
                    }),
                });
            } else if active {
                episodes[n].steps.push(StepData {
                    location: positions[n],
                    action: out.action,
                    symbol: out.symbol,
                    log_prob_action: out.log_prob_action,
                    log_prob_symbol: out.log_prob_symbol,
                    entropy_action: out.entropy_action,
                    entropy_symbol: out.entropy_symbol,
                    value: out.value,
                    reward: 0.0,
                    soft_size: out.soft_size,
                    hard_size: out.hard_size,
                    script: out.script.clone(),
                    nodes: None,
                });
            }
        }

        let was_active: Vec<bool> = state.agent_done.iter().map(|d| !d).collect();
        let (next, result) = grid::step(&state, &joint)?;
        for n in 0..n_agents {
            if was_active[n] {
                if let Some(step) = episodes[n].steps.last_mut() {
                    step.reward = result.rewards[n];
                }
                episodes[n].reward_total += result.rewards[n];
            }
        }
        trace.push(TraceRecord {
            t: state.t,
            positions,
            actions: joint.iter().map(|a| a.index()).collect(),
            symbols: emitted.iter().map(|s| s.index()).collect(),
            rewards: result.rewards.clone(),
            dones: result.per_agent_done.clone(),
        });
        length += 1;

        symbols_prev = if options.beta > 0.0 {
            grid::erase_symbols(&emitted, options.beta, &mut erase_rng)?
        } else {
            emitted
        };
        state = next;
        if result.done {
            break;
        }
    }
    let timed_out = !state.agent_done.iter().all(|&d| d);

    // Bootstrap values for agents cut off at the horizon.
    for n in 0..n_agents {
        if !state.agent_done[n] {
            episodes[n].truncated = true;
            let received: Vec<Symbol> = if options.comm_enabled {
                symbols_prev.clone()
            } else {
                vec![Symbol::NULL; n_agents]
            };
            let obs = grid::observe(&state, n)?;
            let mut tape = Tape::new();
            let binding = nets[n].store.bind(&mut tape);
            let h = tape.input(1, nets[n].config.gru_hidden, hidden_values[n].clone());
            let out = step_forward(
                &nets[n],
                &binding,
                &mut tape,
                &obs,
                state.agent_pos[n],
                &received,
                h,
                RolloutMode::Greedy,
                &mut act_rngs[n],
            )?;
            episodes[n].bootstrap = out.value;
        }
    }

    Ok(Trajectory {
        agents: episodes,
        length,
        timed_out,
        trace,
        received: received_log,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_forward(
    net: &AgentNet,
    binding: &Binding,
    tape: &mut Tape,
    obs: &grid::Observation,
    location: (usize, usize),
    received: &[Symbol],
    hidden: ValueId,
    mode: RolloutMode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<AgentStepOutput, TrainError> {
    let decide = match mode {
        RolloutMode::Sample => Decide::Sample(rng),
        RolloutMode::SampleKeepAll => Decide::SampleKeepAll(rng),
        RolloutMode::Greedy => Decide::Greedy,
    };
    Ok(act(net, binding, tape, obs, location, received, hidden, decide)?)
}

/// Discounted returns and advantages over one agent's recorded rewards,
/// bootstrapped with the truncation value.
pub fn compute_returns(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    let advantages = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    (returns, advantages)
}

/// Loss value with its components, plus the tape node to backpropagate.
pub struct LossBreakdown {
    pub node: ValueId,
    pub parts: LossParts,
}

/// Builds one agent's episode loss on its tape:
/// mean over steps of `−A·(log π(a) + log π(c)) + value_coef·(R − V)² −
/// entropy_coef·(H_a + H_c)`, plus `size_coef` times the mean size penalty.
/// Advantages enter as constants. With the channel disabled the symbol
/// log-probability and entropy terms are dropped.
pub fn total_loss(
    episode: &mut AgentEpisode,
    returns: &[f64],
    advantages: &[f64],
    config: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let steps = episode.steps.len();
    if steps == 0 {
        return Err(TrainError::Config("loss of an empty episode".into()));
    }
    assert_eq!(returns.len(), steps);
    let tape = &mut episode.tape;
    let mut policy_terms = Vec::with_capacity(steps);
    let mut value_terms = Vec::with_capacity(steps);
    let mut entropy_terms = Vec::with_capacity(steps);
    let mut size_terms = Vec::new();
    for (i, step) in episode.steps.iter().enumerate() {
        let nodes = step
            .nodes
            .as_ref()
            .ok_or_else(|| TrainError::Config("loss over a no-grad rollout".into()))?;
        let logp = if config.comm_enabled {
            tape.add(nodes.logp_action, nodes.logp_symbol)
        } else {
            nodes.logp_action
        };
        policy_terms.push(tape.scale(logp, -advantages[i]));
        let neg_v = tape.scale(nodes.value, -1.0);
        let delta = tape.add_const(neg_v, returns[i]);
        let sq = tape.sqr(delta);
        value_terms.push(tape.scale(sq, config.value_coef));
        let entropy = if config.comm_enabled {
            tape.add(nodes.entropy_action, nodes.entropy_symbol)
        } else {
            nodes.entropy_action
        };
        entropy_terms.push(tape.scale(entropy, -config.entropy_coef));
        if let Some(penalty) = nodes.penalty {
            size_terms.push(penalty);
        }
    }
    let mean_of = |tape: &mut Tape, terms: &[ValueId]| {
        let stacked = tape.stack_scalars(terms);
        let sum = tape.sum(stacked);
        tape.scale(sum, 1.0 / terms.len() as f64)
    };
    let policy = mean_of(tape, &policy_terms);
    let value = mean_of(tape, &value_terms);
    let entropy = mean_of(tape, &entropy_terms);
    let mut node = tape.add(policy, value);
    node = tape.add(node, entropy);
    let mut size_part = 0.0;
    if !size_terms.is_empty() && config.size_coef != 0.0 {
        let mean_size = mean_of(tape, &size_terms);
        let weighted = tape.scale(mean_size, config.size_coef);
        size_part = tape.scalar(weighted);
        node = tape.add(node, weighted);
    }
    Ok(LossBreakdown {
        node,
        parts: LossParts {
            total: tape.scalar(node),
            policy: tape.scalar(policy),
            value: tape.scalar(value),
            entropy: tape.scalar(entropy),
            size: size_part,
        },
    })
}

/// Shared per-agent state: parameters plus optimizer moments, updated under
/// one lock so gradient application is atomic.
pub struct SharedAgent {
    pub store: crate::neural::ParamStore,
    pub adam: AdamState,
}

pub struct TrainHandle {
    /// Final parameter stores, one per agent.
    pub stores: Vec<crate::neural::ParamStore>,
    pub episodes_run: u64,
}

/// Saves agent parameters (and optimizer state) under per-agent
/// namespaces.
pub fn save_checkpoint(
    dir: &Path,
    agents: &[SharedAgent],
    episode: u64,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    for (i, agent) in agents.iter().enumerate() {
        let prefix = format!("agent{i}/");
        for e in agent.store.entries() {
            tensors.push(NamedTensor {
                name: format!("{prefix}{}", e.name),
                rows: e.rows,
                cols: e.cols,
                values: e.values.clone(),
            });
        }
        for (j, m) in agent.adam.first_moments().iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("{prefix}adam_m/{j}"),
                rows: 1,
                cols: m.len(),
                values: m.clone(),
            });
        }
        for (j, v) in agent.adam.second_moments().iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("{prefix}adam_v/{j}"),
                rows: 1,
                cols: v.len(),
                values: v.clone(),
            });
        }
        tensors.push(NamedTensor {
            name: format!("{prefix}adam_step"),
            rows: 1,
            cols: 1,
            values: vec![agent.adam.step as f64],
        });
    }
    tensors.push(NamedTensor { name: "meta/episode".into(), rows: 1, cols: 1, values: vec![episode as f64] });
    checkpoint::save(dir, &tensors)
}

/// Loads agent parameters from a checkpoint directory into freshly built
/// nets; returns the episode index the checkpoint was taken at.
pub fn load_checkpoint_params(
    dir: &Path,
    nets: &mut [AgentNet],
) -> Result<u64, CheckpointError> {
    let tensors = checkpoint::load(dir)?;
    for (i, net) in nets.iter_mut().enumerate() {
        checkpoint::load_into_store(&tensors, &format!("agent{i}/"), &mut net.store)?;
    }
    let episode = tensors
        .iter()
        .find(|t| t.name == "meta/episode")
        .map(|t| t.values[0] as u64)
        .unwrap_or(0);
    Ok(episode)
}

/// Restores parameters and optimizer state into shared agent slots;
/// returns the checkpoint's episode index.
fn restore_shared(dir: &Path, shared: &[Mutex<SharedAgent>]) -> Result<u64, TrainError> {
    let tensors = checkpoint::load(dir)?;
    for (i, slot) in shared.iter().enumerate() {
        let prefix = format!("agent{i}/");
        let mut guard = slot.lock().expect("store lock");
        checkpoint::load_into_store(&tensors, &prefix, &mut guard.store)?;
        let count = guard.store.len();
        let grab = |kind: &str| -> Option<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(count);
            for j in 0..count {
                let name = format!("{prefix}adam_{kind}/{j}");
                out.push(tensors.iter().find(|t| t.name == name)?.values.clone());
            }
            Some(out)
        };
        if let (Some(m), Some(v), Some(step)) = (
            grab("m"),
            grab("v"),
            tensors.iter().find(|t| t.name == format!("{prefix}adam_step")),
        ) {
            guard
                .adam
                .restore(m, v, step.values[0] as u64)
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        }
    }
    Ok(tensors
        .iter()
        .find(|t| t.name == "meta/episode")
        .map(|t| t.values[0] as u64)
        .unwrap_or(0))
}

/// One worker's training loop body: pull a fresh episode index, snapshot
/// the shared parameters, roll out, backpropagate, and push gradients.
#[allow(clippy::too_many_arguments)]
fn worker_loop(
    worker_id: usize,
    env_config: &EnvConfig,
    agent_config: &crate::agent::AgentConfig,
    config: &TrainConfig,
    shared: &[Mutex<SharedAgent>],
    counter: &AtomicU64,
    sink: &mut dyn FnMut(MetricRecord) -> Result<(), TrainError>,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainError> {
    let _ = worker_id;
    let mut nets: Vec<AgentNet> = (0..env_config.agents)
        .map(|n| {
            let mut rng = seeding::stream_rng(config.seed, "init", n as u64);
            AgentNet::new(*agent_config, &mut rng)
        })
        .collect();
    loop {
        let episode = counter.fetch_add(1, Ordering::SeqCst);
        if episode >= config.total_episodes {
            return Ok(());
        }
        // Read-snapshot of the shared parameters.
        for (net, slot) in nets.iter_mut().zip(shared) {
            net.store = slot.lock().expect("store lock").store.clone();
        }
        let mut options = RolloutOptions::training(env_config.max_steps, config.comm_enabled);
        if episode < config.warmup_keep_episodes {
            options.mode = RolloutMode::SampleKeepAll;
        }
        let episode_seed = seeding::derive_seed(config.seed, "episode", episode);
        let mut trajectory = rollout(env_config, &nets, episode_seed, &options)?;

        let mut losses = Vec::with_capacity(nets.len());
        for (n, ep) in trajectory.agents.iter_mut().enumerate() {
            let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
            let (returns, advantages) =
                compute_returns(&rewards, &values, ep.bootstrap, config.gamma);
            let loss = total_loss(ep, &returns, &advantages, config)?;
            ep.tape.backward(loss.node);
            let mut grads = ep
                .binding
                .as_ref()
                .expect("training rollouts record tapes")
                .gradients(&ep.tape);
            clip_global_norm(&mut grads, config.grad_clip);
            {
                let mut slot = shared[n].lock().expect("store lock");
                let SharedAgent { store, adam } = &mut *slot;
                adam_step(store, &grads, adam, &config.adam)?;
            }
            losses.push(loss.parts);
        }

        let tree_size = trajectory.mean_hard_size();
        sink(MetricRecord::Episode {
            episode,
            wallclock: None,
            reward: trajectory.agents.iter().map(|a| a.reward_total).collect(),
            length: trajectory.length,
            loss: losses,
            tree_size,
        })?;

        if config.eval_every > 0 && episode % config.eval_every == 0 {
            for (net, slot) in nets.iter_mut().zip(shared) {
                net.store = slot.lock().expect("store lock").store.clone();
            }
            let summary = crate::evalharness::evaluate_nets(
                &nets,
                env_config,
                config.eval_episodes,
                0.0,
                0.0,
                config.comm_enabled,
                seeding::derive_seed(config.seed, "eval", episode),
            )?;
            sink(MetricRecord::Eval {
                episode,
                wallclock: None,
                reward: summary.mean_reward_per_agent.clone(),
                total_reward: summary.mean_total_reward,
                timeout_rate: summary.timeout_rate,
                mean_length: summary.mean_length,
                mean_tree_size: summary.mean_tree_size,
            })?;
        }

        if let (Some(dir), true) = (
            checkpoint_dir,
            config.checkpoint_every > 0
                && episode > 0
                && episode % config.checkpoint_every == 0,
        ) {
            let snapshot: Vec<SharedAgent> = shared
                .iter()
                .map(|s| {
                    let guard = s.lock().expect("store lock");
                    SharedAgent { store: guard.store.clone(), adam: guard.adam.clone() }
                })
                .collect();
            save_checkpoint(&dir.join("latest"), &snapshot, episode)?;
        }
    }
}

/// Trains per-agent policies with `workers` parallel episode collectors.
/// `workers == 1` runs entirely on the calling thread and is
/// bit-deterministic for a fixed seed.
pub fn train<W: Write>(
    env_config: &EnvConfig,
    agent_config: &crate::agent::AgentConfig,
    config: &TrainConfig,
    metrics_out: W,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainHandle, TrainError> {
    train_resumable(env_config, agent_config, config, metrics_out, checkpoint_dir, None)
}

/// [`train`] that optionally continues from a saved checkpoint (parameters,
/// optimizer state, and episode counter).
pub fn train_resumable<W: Write>(
    env_config: &EnvConfig,
    agent_config: &crate::agent::AgentConfig,
    config: &TrainConfig,
    metrics_out: W,
    checkpoint_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainHandle, TrainError> {
    env_config.validate()?;
    if config.workers == 0 {
        return Err(TrainError::Config("at least one worker".into()));
    }
    if agent_config.agents != env_config.agents || agent_config.fov_side != env_config.fov_side {
        return Err(TrainError::Config(
            "agent config does not match environment config".into(),
        ));
    }
    let shared: Arc<Vec<Mutex<SharedAgent>>> = Arc::new(
        (0..env_config.agents)
            .map(|n| {
                let mut rng = seeding::stream_rng(config.seed, "init", n as u64);
                let net = AgentNet::new(*agent_config, &mut rng);
                let adam = AdamState::new(&net.store);
                Mutex::new(SharedAgent { store: net.store, adam })
            })
            .collect(),
    );
    let start_episode = match resume_from {
        Some(dir) => restore_shared(dir, &shared)?,
        None => 0,
    };
    let counter = Arc::new(AtomicU64::new(start_episode));
    let mut writer = MetricsWriter::new(metrics_out, config.timestamps);

    if config.workers == 1 {
        // Single-threaded: records flow straight to the writer in order.
        let mut sink = |record: MetricRecord| -> Result<(), TrainError> {
            writer.write(record)?;
            Ok(())
        };
        worker_loop(
            0,
            env_config,
            agent_config,
            config,
            &shared,
            &counter,
            &mut sink,
            checkpoint_dir,
        )?;
    } else {
        let (tx, rx) = mpsc::channel();
        let mut handles = Vec::new();
        for w in 0..config.workers {
            let env_config = *env_config;
            let agent_config = *agent_config;
            let config = *config;
            let shared = Arc::clone(&shared);
            let counter = Arc::clone(&counter);
            let tx = tx.clone();
            let ck = checkpoint_dir.map(|p| p.to_path_buf());
            handles.push(std::thread::spawn(move || {
                let mut sink = |record: MetricRecord| -> Result<(), TrainError> {
                    tx.send(record)
                        .map_err(|_| TrainError::Config("metrics channel closed".into()))
                };
                worker_loop(
                    w,
                    &env_config,
                    &agent_config,
                    &config,
                    &shared,
                    &counter,
                    &mut sink,
                    ck.as_deref(),
                )
            }));
        }
        drop(tx);
        // Single consumer drains the channel until all workers hang up.
        while let Ok(record) = rx.recv() {
            writer.write(record)?;
        }
        for h in handles {
            h.join().map_err(|_| TrainError::Config("worker panicked".into()))??;
        }
    }

    let stores = shared
        .iter()
        .map(|s| s.lock().expect("store lock").store.clone())
        .collect::<Vec<_>>();
    if let Some(dir) = checkpoint_dir {
        let snapshot: Vec<SharedAgent> = shared
            .iter()
            .map(|s| {
                let guard = s.lock().expect("store lock");
                SharedAgent { store: guard.store.clone(), adam: guard.adam.clone() }
            })
            .collect();
        save_checkpoint(&dir.join("final"), &snapshot, config.total_episodes)?;
    }
    Ok(TrainHandle { stores, episodes_run: counter.load(Ordering::SeqCst).min(config.total_episodes) })
}
