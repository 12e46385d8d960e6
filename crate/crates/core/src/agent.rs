//! One agent's end-to-end network and step function.
//!
//! observation → encoder (adaptive abstractor, fixed tree, or CNN) → GRU →
//! action, communication symbol, and value estimate. The five encoder
//! variants share everything downstream of the encoder so comparisons
//! isolate the state representation.

use rand::Rng;
use thiserror::Error;

use crate::abstractor::{abstract_tree, tree_graph, AbstractorError, AbstractorParams};
use crate::grid::{Action, CellState, Observation, Symbol};
use crate::neural::{
    cnn_forward, gin_embed, gin_embed_masked, gru_step, mlp_forward, sample_gumbel,
    softmax_values, Activation, Binding, CnnParams, EmbeddingParams, GinParams, GruParams,
    MlpParams, NeuralError, ParamStore, Tape, ValueId,
};
use crate::quadtree::{decompose_full, decompose_level, QuadError, NODE_FEATURES};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Abstractor(#[from] AbstractorError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("configuration: {0}")]
    Config(String),
}

/// Which encoder feeds the policy.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Full-resolution tree through the adaptive abstractor.
    Proposed,
    /// Raw one-hot state planes through the CNN.
    FullImage,
    /// Full-resolution tree, no abstraction.
    FullTree,
    /// Tree truncated at depth 1.
    Level1Tree,
    /// Tree truncated at depth 2.
    Level2Tree,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Proposed => "proposed",
            EncoderVariant::FullImage => "full-image",
            EncoderVariant::FullTree => "full-tree",
            EncoderVariant::Level1Tree => "level1-tree",
            EncoderVariant::Level2Tree => "level2-tree",
        }
    }

    pub fn parse(s: &str) -> Option<EncoderVariant> {
        match s {
            "proposed" => Some(EncoderVariant::Proposed),
            "full-image" => Some(EncoderVariant::FullImage),
            "full-tree" => Some(EncoderVariant::FullTree),
            "level1-tree" => Some(EncoderVariant::Level1Tree),
            "level2-tree" => Some(EncoderVariant::Level2Tree),
            _ => None,
        }
    }

    pub fn uses_abstractor(self) -> bool {
        self == EncoderVariant::Proposed
    }

    pub fn fixed_tree_level(self) -> Option<usize> {
        match self {
            EncoderVariant::Level1Tree => Some(1),
            EncoderVariant::Level2Tree => Some(2),
            _ => None,
        }
    }
}

/// Architecture hyperparameters of one agent.
#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub variant: EncoderVariant,
    /// Field-of-view side M.
    pub fov_side: usize,
    /// Grid side L, for location normalization.
    pub grid_side: usize,
    /// Number of agents N (symbol inputs).
    pub agents: usize,
    /// Vocabulary size C.
    pub vocab: usize,
    /// Per-iteration GIN MLP width.
    pub gin_hidden: usize,
    /// GIN message-passing iterations K.
    pub gin_iterations: usize,
    /// GRU hidden width.
    pub gru_hidden: usize,
    /// Symbol embedding width E.
    pub embed_dim: usize,
    /// Abstractor combiner hidden width.
    pub combiner_hidden: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: EncoderVariant::Proposed,
            fov_side: 8,
            grid_side: 15,
            agents: 2,
            vocab: 1024,
            gin_hidden: 64,
            gin_iterations: 5,
            gru_hidden: 128,
            embed_dim: 32,
            combiner_hidden: 64,
            tau: 1.0,
        }
    }
}

/// One agent's parameter bundle. Tree variants carry a policy-side GIN with
/// its own weights; the proposed variant adds the abstractor; the image
/// variant swaps in the CNN. The symbol embedding table is shared between
/// the abstractor input and the policy trunk.
#[derive(Clone, Debug)]
pub struct AgentNet {
    pub config: AgentConfig,
    pub store: ParamStore,
    pub symbol_embed: EmbeddingParams,
    pub abstractor: Option<AbstractorParams>,
    pub policy_gin: Option<GinParams>,
    pub cnn: Option<CnnParams>,
    pub core: GruParams,
    pub action_head: MlpParams,
    pub comm_head: MlpParams,
    pub value_head: MlpParams,
}

impl AgentNet {
    pub fn new<R: Rng>(config: AgentConfig, rng: &mut R) -> AgentNet {
        let mut store = ParamStore::new();
        let symbol_embed =
            EmbeddingParams::new(&mut store, rng, "symbols", config.vocab + 1, config.embed_dim);
        let abstractor = config.variant.uses_abstractor().then(|| {
            AbstractorParams::new(
                &mut store,
                rng,
                "abstractor",
                config.fov_side,
                config.gin_hidden,
                config.gin_iterations,
                config.combiner_hidden,
                config.agents,
                config.embed_dim,
            )
        });
        let (policy_gin, cnn) = match config.variant {
            EncoderVariant::FullImage => {
                (None, Some(CnnParams::new(&mut store, rng, "cnn", CellState::COUNT)))
            }
            _ => (
                Some(GinParams::new(
                    &mut store,
                    rng,
                    "policy_gin",
                    NODE_FEATURES,
                    config.gin_hidden,
                    config.gin_iterations,
                )),
                None,
            ),
        };
        let encoder_dim = match (&policy_gin, &cnn) {
            (Some(g), _) => g.embedding_dim(),
            (_, Some(c)) => c.output_dim(),
            _ => unreachable!(),
        };
        let trunk_dim = encoder_dim + 2 + config.agents * config.embed_dim;
        let core = GruParams::new(&mut store, rng, "core", trunk_dim, config.gru_hidden);
        let head = |store: &mut ParamStore, rng: &mut R, name: &str, out: usize| MlpParams::new(
            store,
            rng,
            name,
            &[config.gru_hidden, out],
            Activation::Identity,
        );
        let action_head = head(&mut store, rng, "action_head", Action::COUNT);
        let comm_head = head(&mut store, rng, "comm_head", config.vocab);
        let value_head = head(&mut store, rng, "value_head", 1);
        AgentNet {
            config,
            store,
            symbol_embed,
            abstractor,
            policy_gin,
            cnn,
            core,
            action_head,
            comm_head,
            value_head,
        }
    }

    /// Initial GRU state (zeros) at episode start.
    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.gru_hidden]
    }
}

/// Recorded decisions of one step, sufficient to replay it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScript {
    pub action: usize,
    pub symbol: u16,
    pub merge_noise: Vec<Vec<f64>>,
}

/// How decisions are made inside [`act`].
pub enum Decide<'a, R: Rng> {
    /// Draw actions, symbols and merge noise from the stream.
    Sample(&'a mut R),
    /// Draw actions and symbols, but force every merge decision to keep
    /// (abstractor warmup: the policy trains on full trees first).
    SampleKeepAll(&'a mut R),
    /// Argmax everywhere, zero merge noise; deterministic.
    Greedy,
    /// Replay a recorded script; with `relaxed` the straight-through hard
    /// values are replaced by their relaxed counterparts (gradient checks).
    Script(&'a StepScript, bool),
}

/// Gumbel offset that saturates a (merge, keep) pair toward keep.
pub const KEEP_FORCE: f64 = 1e3;

/// Everything one step produces. Numeric copies serve logging and replay;
/// the `*_node` handles stay on the tape for the episode loss.
pub struct AgentStepOutput {
    pub action: Action,
    pub symbol: Symbol,
    pub value: f64,
    pub log_prob_action: f64,
    pub log_prob_symbol: f64,
    pub entropy_action: f64,
    pub entropy_symbol: f64,
    /// Relaxed size surrogate (proposed variant only).
    pub soft_size: Option<f64>,
    /// Norm of the tree fed to the policy (tree variants).
    pub hard_size: Option<f64>,
    pub hidden: Vec<f64>,
    pub script: StepScript,
    pub value_node: ValueId,
    pub logp_action_node: ValueId,
    pub logp_symbol_node: ValueId,
    pub entropy_action_node: ValueId,
    pub entropy_symbol_node: ValueId,
    /// Size penalty term (proposed variant only): hard forward, relaxed
    /// gradient.
    pub penalty_node: Option<ValueId>,
    pub hidden_node: ValueId,
}

/// One-hot state planes for the CNN baseline, channel-major.
pub fn observation_planes(obs: &Observation) -> Vec<f64> {
    let m = obs.side();
    let mut planes = vec![0.0; CellState::COUNT * m * m];
    for r in 0..m {
        for c in 0..m {
            let ch = match obs.cell(r, c) {
                CellState::Occupied => 0,
                CellState::Unoccupied => 1,
                CellState::Destination => 2,
                CellState::Unknown => 3,
            };
            planes[(ch * m + r) * m + c] = 1.0;
        }
    }
    planes
}

/// Draws from a categorical distribution given by `probs`.
fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A categorical head on the tape: log-probabilities, entropy, and a
/// selection.
struct HeadSample {
    selected: usize,
    logp_selected: ValueId,
    entropy: ValueId,
}

fn head_sample<R: Rng>(
    tape: &mut Tape,
    logits: ValueId,
    choice: Option<usize>,
    rng: Option<&mut R>,
) -> HeadSample {
    let lse = tape.log_sum_exp(logits);
    let logp = tape.sub_scalar(logits, lse);
    let selected = match choice {
        Some(c) => c,
        None => match rng {
            Some(r) => sample_categorical(&softmax_values(tape.values(logits), 1.0), r),
            None => crate::neural::argmax(tape.values(logits)),
        },
    };
    let logp_selected = tape.index(logp, selected);
    let probs = tape.exp(logp);
    let plogp = tape.mul(probs, logp);
    let negent = tape.sum(plogp);
    let entropy = tape.scale(negent, -1.0);
    HeadSample { selected, logp_selected, entropy }
}

/// Runs one agent step: encode the observation per the configured variant,
/// advance the GRU, and select an action and a symbol.
#[allow(clippy::too_many_arguments)]
pub fn act<R: Rng>(
    net: &AgentNet,
    binding: &Binding,
    tape: &mut Tape,
    obs: &Observation,
    location: (usize, usize),
    symbols_prev: &[Symbol],
    hidden: ValueId,
    decide: Decide<'_, R>,
) -> Result<AgentStepOutput, AgentError> {
    let config = &net.config;
    if obs.side() != config.fov_side {
        return Err(AgentError::Config(format!(
            "observation side {} != configured fov {}",
            obs.side(),
            config.fov_side
        )));
    }
    if symbols_prev.len() != config.agents {
        return Err(AgentError::Config(format!(
            "{} symbols for {} agents",
            symbols_prev.len(),
            config.agents
        )));
    }
    for s in symbols_prev {
        if let Some(i) = s.index() {
            if i as usize >= config.vocab {
                return Err(AgentError::Config(format!(
                    "symbol {i} outside vocabulary of {}",
                    config.vocab
                )));
            }
        }
    }

    let mut decide = decide;
    // Encoder.
    let mut soft_size = None;
    let mut hard_size = None;
    let mut penalty_node = None;
    let mut merge_noise: Vec<Vec<f64>> = Vec::new();
    let features = match config.variant {
        EncoderVariant::Proposed => {
            let abstractor: &AbstractorParams =
                net.abstractor.as_ref().expect("proposed variant has an abstractor");
            let tree = decompose_full(obs)?;
            let internal = abstractor.internal_count;
            let (noise, relaxed) = match &mut decide {
                Decide::Sample(rng) => (
                    (0..internal).map(|_| sample_gumbel(&mut **rng, 2)).collect::<Vec<_>>(),
                    false,
                ),
                Decide::SampleKeepAll(_) => (vec![vec![0.0, KEEP_FORCE]; internal], false),
                Decide::Greedy => (vec![vec![0.0, 0.0]; internal], false),
                Decide::Script(script, relaxed) => (script.merge_noise.clone(), *relaxed),
            };
            let result = abstract_tree(
                abstractor,
                &net.symbol_embed,
                binding,
                tape,
                &tree,
                location,
                config.grid_side,
                symbols_prev,
                config.tau,
                &noise,
                relaxed,
            )?;
            merge_noise = noise;
            soft_size = Some(result.soft_size_value);
            hard_size = Some(result.hard_size);
            penalty_node = Some(result.penalty);
            // The policy GIN runs over the full graph under the survival
            // mask, which reproduces the trimmed tree exactly while keeping
            // the merge decisions differentiable.
            gin_embed_masked(
                net.policy_gin.as_ref().expect("tree variants have a policy GIN"),
                binding,
                tape,
                &tree_graph(&tree),
                Some(result.survival),
            )?
        }
        EncoderVariant::FullTree => {
            let tree = decompose_full(obs)?;
            hard_size = Some(tree.tree_size());
            gin_embed(
                net.policy_gin.as_ref().expect("tree variants have a policy GIN"),
                binding,
                tape,
                &tree_graph(&tree),
            )?
        }
        EncoderVariant::Level1Tree | EncoderVariant::Level2Tree => {
            let level = config.variant.fixed_tree_level().expect("level variant");
            let tree = decompose_level(obs, level.min(config.fov_side.trailing_zeros() as usize))?;
            hard_size = Some(tree.tree_size());
            gin_embed(
                net.policy_gin.as_ref().expect("tree variants have a policy GIN"),
                binding,
                tape,
                &tree_graph(&tree),
            )?
        }
        EncoderVariant::FullImage => {
            let planes = observation_planes(obs);
            let image = tape.input(1, planes.len(), planes);
            cnn_forward(
                net.cnn.as_ref().expect("image variant has a CNN"),
                binding,
                tape,
                image,
                config.fov_side,
            )?
        }
    };

    // Trunk: features ++ location ++ embedded symbols → GRU.
    let loc = tape.input(
        1,
        2,
        vec![
            location.0 as f64 / config.grid_side as f64,
            location.1 as f64 / config.grid_side as f64,
        ],
    );
    let mut parts = vec![features, loc];
    parts.extend(crate::abstractor::embed_symbols(
        &net.symbol_embed,
        binding,
        tape,
        symbols_prev,
    )?);
    let trunk = tape.concat(&parts);
    let h_next = gru_step(&net.core, binding, tape, trunk, hidden)?;

    // Heads.
    let action_logits = mlp_forward(&net.action_head, binding, tape, h_next)?;
    let comm_logits = mlp_forward(&net.comm_head, binding, tape, h_next)?;
    let value_vec = mlp_forward(&net.value_head, binding, tape, h_next)?;
    let value_node = tape.index(value_vec, 0);

    let (action_choice, symbol_choice) = match &decide {
        Decide::Script(script, _) => (Some(script.action), Some(script.symbol as usize)),
        _ => (None, None),
    };
    let (a, c) = match &mut decide {
        Decide::Sample(rng) | Decide::SampleKeepAll(rng) => {
            let a = head_sample(tape, action_logits, action_choice, Some(&mut **rng));
            let c = head_sample(tape, comm_logits, symbol_choice, Some(&mut **rng));
            (a, c)
        }
        _ => {
            let a = head_sample::<R>(tape, action_logits, action_choice, None);
            let c = head_sample::<R>(tape, comm_logits, symbol_choice, None);
            (a, c)
        }
    };

    let action = Action::from_index(a.selected)
        .ok_or_else(|| AgentError::Config(format!("action index {}", a.selected)))?;
    Ok(AgentStepOutput {
        action,
        symbol: Symbol::token(c.selected as u16),
        value: tape.scalar(value_node),
        log_prob_action: tape.scalar(a.logp_selected),
        log_prob_symbol: tape.scalar(c.logp_selected),
        entropy_action: tape.scalar(a.entropy),
        entropy_symbol: tape.scalar(c.entropy),
        soft_size,
        hard_size,
        hidden: tape.values(h_next).to_vec(),
        script: StepScript {
            action: a.selected,
            symbol: c.selected as u16,
            merge_noise,
        },
        value_node,
        logp_action_node: a.logp_selected,
        logp_symbol_node: c.logp_selected,
        entropy_action_node: a.entropy,
        entropy_symbol_node: c.entropy,
        penalty_node,
        hidden_node: h_next,
    })
}
