//! The adaptive tree abstractor: embeds the full-resolution quadtree with a
//! GIN, combines the embedding with the agent's location and the received
//! symbols, scores merge/keep per internal node, samples decisions through
//! the straight-through Gumbel-softmax, and emits the trimmed tree together
//! with a differentiable size surrogate.
//!
//! Each decision's straight-through sample drives two things downstream:
//! node survival masks (hard 0/1 forward, relaxed gradient) that make the
//! policy's consumption of the trimmed tree differentiable, and the size
//! penalty whose forward value is the trimmed tree's exact norm while its
//! gradient comes from the relaxed surrogate.

use thiserror::Error;

use crate::grid::Symbol;
use crate::neural::{
    gin_embed, mlp_forward, Activation, Binding, EmbeddingParams, GinParams, Graph, MlpParams,
    NeuralError, ParamStore, Tape, ValueId,
};
use crate::quadtree::{trim, MergeMask, QuadError, QuadTree, NODE_FEATURES};

use rand::Rng;

/// Stabilizer inside the size surrogate's square root.
pub const SIZE_EPS: f64 = 1e-12;

/// Index of the merge entry in each (merge, keep) logit pair.
pub const MERGE_SLOT: usize = 0;

#[derive(Debug, Error)]
pub enum AbstractorError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("{0}")]
    Input(String),
}

/// Parameters of one agent's abstractor: tree encoder plus merge-score
/// combiner. The symbol embedding table is shared with the rest of the
/// agent and passed in at call time.
#[derive(Clone, Debug)]
pub struct AbstractorParams {
    pub encoder: GinParams,
    pub combiner: MlpParams,
    /// Number of agents whose previous symbols are consumed.
    pub agents: usize,
    /// Internal (mergeable) node count of the full-resolution tree.
    pub internal_count: usize,
    /// Expected node count of the full-resolution tree.
    pub node_count: usize,
    pub fov_side: usize,
    pub embed_dim: usize,
}

/// Node and internal counts of the complete 4-ary tree over an `m`×`m`
/// window.
pub fn full_tree_counts(m: usize) -> (usize, usize) {
    let depth = m.trailing_zeros() as usize;
    let total = (4usize.pow(depth as u32 + 1) - 1) / 3;
    let leaves = 4usize.pow(depth as u32);
    (total, total - leaves)
}

impl AbstractorParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fov_side: usize,
        gin_hidden: usize,
        gin_iterations: usize,
        combiner_hidden: usize,
        agents: usize,
        embed_dim: usize,
    ) -> AbstractorParams {
        let (node_count, internal_count) = full_tree_counts(fov_side);
        let encoder = GinParams::new(
            store,
            rng,
            &format!("{name}/encoder"),
            NODE_FEATURES,
            gin_hidden,
            gin_iterations,
        );
        let combiner_in = encoder.embedding_dim() + 2 + agents * embed_dim;
        let combiner = MlpParams::new(
            store,
            rng,
            &format!("{name}/combiner"),
            &[combiner_in, combiner_hidden, 2 * internal_count],
            Activation::Relu,
        );
        AbstractorParams {
            encoder,
            combiner,
            agents,
            internal_count,
            node_count,
            fov_side,
            embed_dim,
        }
    }
}

/// A quadtree as a validated dense-feature graph.
pub fn tree_graph(tree: &QuadTree) -> Graph {
    Graph {
        node_count: tree.node_count(),
        feature_dim: NODE_FEATURES,
        features: tree.feature_matrix(),
        adjacency: std::sync::Arc::new(tree.adjacency_lists()),
    }
}

/// Embeds the received symbols (own symbol included, ordered by agent id)
/// through the shared table.
pub fn embed_symbols(
    embed: &EmbeddingParams,
    binding: &Binding,
    tape: &mut Tape,
    symbols: &[Symbol],
) -> Result<Vec<ValueId>, AbstractorError> {
    symbols
        .iter()
        .map(|s| {
            let row = s.embed_row();
            if row >= embed.rows {
                return Err(AbstractorError::Input(format!(
                    "symbol row {row} outside embedding table of {} rows",
                    embed.rows
                )));
            }
            Ok(embed.lookup(binding, tape, row))
        })
        .collect()
}

/// Per-internal-node (merge, keep) logit pairs, flattened to `2·|V*|`.
#[allow(clippy::too_many_arguments)]
pub fn merge_logits(
    params: &AbstractorParams,
    embed: &EmbeddingParams,
    binding: &Binding,
    tape: &mut Tape,
    tree: &QuadTree,
    location: (usize, usize),
    grid_side: usize,
    symbols_prev: &[Symbol],
) -> Result<ValueId, AbstractorError> {
    if tree.node_count() != params.node_count {
        return Err(AbstractorError::Input(format!(
            "expected the full-resolution tree ({} nodes), got {}",
            params.node_count,
            tree.node_count()
        )));
    }
    if symbols_prev.len() != params.agents {
        return Err(AbstractorError::Input(format!(
            "{} symbols for {} agents",
            symbols_prev.len(),
            params.agents
        )));
    }
    let graph = tree_graph(tree);
    let h_g = gin_embed(&params.encoder, binding, tape, &graph)?;
    let loc = tape.input(
        1,
        2,
        vec![
            location.0 as f64 / grid_side as f64,
            location.1 as f64 / grid_side as f64,
        ],
    );
    let mut parts = vec![h_g, loc];
    parts.extend(embed_symbols(embed, binding, tape, symbols_prev)?);
    let combined = tape.concat(&parts);
    Ok(mlp_forward(&params.combiner, binding, tape, combined)?)
}

/// Output of one abstraction pass.
pub struct AbstractionResult {
    /// The discrete trimmed tree the policy consumes.
    pub trimmed: QuadTree,
    /// Sampled merge decisions per internal node.
    pub hard_mask: MergeMask,
    /// Relaxed merge probabilities at the same noise.
    pub soft_merge: Vec<f64>,
    /// Differentiable size surrogate (forward value is the relaxed size).
    pub soft_size: ValueId,
    pub soft_size_value: f64,
    /// Exact Frobenius norm of the trimmed adjacency.
    pub hard_size: f64,
    /// Per-node survival mask over the full tree, `(1, |V|)`: hard 0/1
    /// values forward, relaxed gradients backward. Feeding it to the masked
    /// policy GIN reproduces the trimmed tree exactly.
    pub survival: ValueId,
    /// Size penalty term: trimmed-tree norm forward, surrogate gradient
    /// backward.
    pub penalty: ValueId,
    /// Gumbel noise per internal node, for replay.
    pub noise: Vec<Vec<f64>>,
}

/// Runs the abstractor over a full-resolution tree.
///
/// `noise` holds one Gumbel pair per internal node: freshly sampled noise
/// gives the training path, zero noise gives greedy (deterministic)
/// decisions. With `relaxed` the hard straight-through values are replaced
/// by the relaxed probabilities end to end (both the survival mask and the
/// penalty), which makes the whole computation smooth for gradient
/// verification.
#[allow(clippy::too_many_arguments)]
pub fn abstract_tree(
    params: &AbstractorParams,
    embed: &EmbeddingParams,
    binding: &Binding,
    tape: &mut Tape,
    tree: &QuadTree,
    location: (usize, usize),
    grid_side: usize,
    symbols_prev: &[Symbol],
    tau: f64,
    noise: &[Vec<f64>],
    relaxed: bool,
) -> Result<AbstractionResult, AbstractorError> {
    let logits =
        merge_logits(params, embed, binding, tape, tree, location, grid_side, symbols_prev)?;
    let internal = tree.internal_nodes();
    if noise.len() != internal.len() {
        return Err(AbstractorError::Input(format!(
            "{} noise pairs for {} internal nodes",
            noise.len(),
            internal.len()
        )));
    }

    // Sample each internal node's decision; record keep factors for the
    // survival products.
    let mut hard_mask = MergeMask::all_keep(internal.len());
    let mut soft_merge = Vec::with_capacity(internal.len());
    let mut keep_st = vec![None; tree.node_count()];
    let mut keep_soft = vec![None; tree.node_count()];
    for (slot, &node) in internal.iter().enumerate() {
        let pair = tape.slice(logits, 2 * slot, 2);
        let sample = crate::neural::gumbel_softmax_st_with_noise(tape, pair, tau, &noise[slot])?;
        hard_mask.0[slot] = sample.selected == MERGE_SLOT;
        soft_merge.push(tape.values(sample.soft)[MERGE_SLOT]);
        let soft_keep = tape.index(sample.soft, 1 - MERGE_SLOT);
        let st_keep = if relaxed {
            soft_keep
        } else {
            tape.index(sample.hard, 1 - MERGE_SLOT)
        };
        keep_st[node] = Some(st_keep);
        keep_soft[node] = Some(soft_keep);
    }

    // Survival of node v: product of its proper ancestors' keep factors
    // (the root survives unconditionally). Computed top-down in one pass
    // since parents precede children in breadth-first order.
    let one = tape.scalar_input(1.0);
    let mut surv_st = vec![one; tree.node_count()];
    let mut surv_soft = vec![one; tree.node_count()];
    for node in tree.nodes().iter().skip(1) {
        let p = node.parent.expect("non-root has a parent");
        let pk_st = keep_st[p].expect("parents are internal");
        let pk_soft = keep_soft[p].expect("parents are internal");
        surv_st[node.index] = tape.mul(surv_st[p], pk_st);
        surv_soft[node.index] = tape.mul(surv_soft[p], pk_soft);
    }
    let survival = tape.stack_scalars(&surv_st);

    // Relaxed size surrogate: each parent→child edge survives with the
    // child's survival probability, so ‖A‖_F = √(2 Σ_v≠root surv(v) + δ).
    let edge_survivals = tape.stack_scalars(&surv_soft[1..]);
    let edge_sum = tape.sum(edge_survivals);
    let doubled = tape.scale(edge_sum, 2.0);
    let stabilized = tape.add_const(doubled, SIZE_EPS);
    let soft_size = tape.sqrt(stabilized);

    let trimmed = trim(tree, &hard_mask)?;
    let hard_size = trimmed.tree_size();
    let penalty = if relaxed {
        soft_size
    } else {
        tape.straight_through(soft_size, vec![hard_size])
    };

    Ok(AbstractionResult {
        trimmed,
        hard_mask,
        soft_merge,
        soft_size,
        soft_size_value: tape.scalar(soft_size),
        hard_size,
        survival,
        penalty,
        noise: noise.to_vec(),
    })
}

/// Plain-value size surrogate: survival of each edge is the product of its
/// child-side ancestors' keep probabilities, and the size is
/// `√(2·Σ_edges survival + δ)`. At 0/1 probabilities this equals
/// `tree_size(trim(tree, mask))` up to the stabilizer.
pub fn soft_tree_size(tree: &QuadTree, soft_merge: &[f64]) -> Result<f64, AbstractorError> {
    let internal = tree.internal_nodes();
    if soft_merge.len() != internal.len() {
        return Err(AbstractorError::Input(format!(
            "{} probabilities for {} internal nodes",
            soft_merge.len(),
            internal.len()
        )));
    }
    for &p in soft_merge {
        if !(0.0..=1.0).contains(&p) {
            return Err(AbstractorError::Input(format!(
                "merge probability {p} outside [0, 1]"
            )));
        }
    }
    let mut keep = vec![1.0; tree.node_count()];
    for (&node, &p) in internal.iter().zip(soft_merge) {
        keep[node] = 1.0 - p;
    }
    let mut survival = vec![1.0; tree.node_count()];
    let mut sum = 0.0;
    for node in tree.nodes().iter().skip(1) {
        let p = node.parent.expect("non-root has a parent");
        survival[node.index] = survival[p] * keep[p];
        sum += survival[node.index];
    }
    Ok((2.0 * sum + SIZE_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellState, Observation};
    use crate::neural::{grad_check_sampled, EmbeddingParams, ParamStore, Tape};
    use crate::quadtree::decompose_full;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_observation<R: Rng>(side: usize, rng: &mut R) -> Observation {
        let cells: Vec<CellState> = (0..side * side)
            .map(|_| match rng.random_range(0..4) {
                0 => CellState::Occupied,
                1 => CellState::Unoccupied,
                2 => CellState::Destination,
                _ => CellState::Unknown,
            })
            .collect();
        Observation::new(side, cells, (0, 0))
    }

    struct Fixture {
        store: ParamStore,
        params: AbstractorParams,
        embed: EmbeddingParams,
    }

    fn fixture(fov_side: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = EmbeddingParams::new(&mut store, &mut rng, "symbols", 9, 4);
        let params =
            AbstractorParams::new(&mut store, &mut rng, "abstractor", fov_side, 8, 2, 16, 2, 4);
        Fixture { store, params, embed }
    }

    /// Sets the combiner output bias so every internal node's (merge, keep)
    /// pair is dominated by one side.
    fn force_bias(fx: &mut Fixture, merge: f64, keep: f64) {
        let last = fx.params.combiner.layers.last().unwrap();
        let entry = fx.store.entry_mut(last.b);
        for pair in entry.values.chunks_mut(2) {
            pair[MERGE_SLOT] = merge;
            pair[1 - MERGE_SLOT] = keep;
        }
    }

    fn zero_noise(n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0]; n]
    }

    #[test]
    fn logit_count_matches_internal_nodes() {
        let fx = fixture(8, 1);
        assert_eq!(fx.params.internal_count, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = random_observation(8, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let mut tape = Tape::new();
        let binding = fx.store.bind(&mut tape);
        let logits = merge_logits(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (3, 4),
            15,
            &[Symbol::NULL, Symbol::token(3)],
        )
        .unwrap();
        assert_eq!(tape.cols(logits), 42);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut fx = fixture(4, 3);
        for e in fx.store.entries_mut() {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let mut tape = Tape::new();
        let binding = fx.store.bind(&mut tape);
        let logits = merge_logits(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (0, 0),
            7,
            &[Symbol::NULL, Symbol::NULL],
        )
        .unwrap();
        assert!(tape.values(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let fx = fixture(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs = random_observation(8, &mut rng);
        let shallow = crate::quadtree::decompose_level(&obs, 1).unwrap();
        let mut tape = Tape::new();
        let binding = fx.store.bind(&mut tape);
        assert!(merge_logits(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &shallow,
            (0, 0),
            15,
            &[Symbol::NULL, Symbol::NULL],
        )
        .is_err());
        let tree = decompose_full(&obs).unwrap();
        assert!(merge_logits(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (0, 0),
            15,
            &[Symbol::NULL],
        )
        .is_err());
        assert!(merge_logits(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (0, 0),
            15,
            &[Symbol::token(500), Symbol::NULL],
        )
        .is_err());
    }

    #[test]
    fn forced_keep_returns_input_tree() {
        let mut fx = fixture(4, 7);
        force_bias(&mut fx, -50.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let mut tape = Tape::new();
        let binding = fx.store.bind(&mut tape);
        let noise = zero_noise(fx.params.internal_count);
        let result = abstract_tree(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (1, 2),
            7,
            &[Symbol::NULL, Symbol::NULL],
            1.0,
            &noise,
            false,
        )
        .unwrap();
        assert_eq!(result.trimmed, tree);
        assert!(result.hard_mask.0.iter().all(|&m| !m));
        assert!((result.soft_size_value - tree.tree_size()).abs() < 1e-6);
        assert!((result.hard_size - tree.tree_size()).abs() < 1e-12);
        assert!(tape.values(result.survival).iter().all(|&s| s == 1.0));
        assert!((tape.scalar(result.penalty) - result.hard_size).abs() < 1e-12);
    }

    #[test]
    fn forced_root_merge_collapses_tree() {
        let mut fx = fixture(4, 9);
        force_bias(&mut fx, 50.0, -50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let mut tape = Tape::new();
        let binding = fx.store.bind(&mut tape);
        let noise = zero_noise(fx.params.internal_count);
        let result = abstract_tree(
            &fx.params,
            &fx.embed,
            &binding,
            &mut tape,
            &tree,
            (1, 2),
            7,
            &[Symbol::NULL, Symbol::NULL],
            1.0,
            &noise,
            false,
        )
        .unwrap();
        assert_eq!(result.trimmed.node_count(), 1);
        assert_eq!(result.hard_size, 0.0);
        assert!(result.soft_size_value < 1e-5);
        let surv = tape.values(result.survival);
        assert_eq!(surv[0], 1.0);
        assert!(surv[1..].iter().all(|&s| s == 0.0));
    }

    /// Monte-Carlo oracle: uniform logits merge each node with frequency
    /// one half.
    #[test]
    fn uniform_logits_merge_half_the_time() {
        let mut fx = fixture(4, 11);
        for e in fx.store.entries_mut() {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let trials = 10_000;
        let mut merges = vec![0usize; fx.params.internal_count];
        for _ in 0..trials {
            let mut tape = Tape::new();
            let binding = fx.store.bind(&mut tape);
            let noise: Vec<Vec<f64>> = (0..fx.params.internal_count)
                .map(|_| crate::neural::sample_gumbel(&mut rng, 2))
                .collect();
            let result = abstract_tree(
                &fx.params,
                &fx.embed,
                &binding,
                &mut tape,
                &tree,
                (0, 0),
                7,
                &[Symbol::NULL, Symbol::NULL],
                1.0,
                &noise,
                false,
            )
            .unwrap();
            for (m, &b) in merges.iter_mut().zip(&result.hard_mask.0) {
                if b {
                    *m += 1;
                }
            }
        }
        for &m in &merges {
            let rate = m as f64 / trials as f64;
            assert!((rate - 0.5).abs() < 0.02, "merge rate {rate}");
        }
    }

    #[test]
    fn soft_size_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = random_observation(8, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let n = tree.internal_nodes().len();
        let all_keep = soft_tree_size(&tree, &vec![0.0; n]).unwrap();
        assert!((all_keep - tree.tree_size()).abs() < 1e-6);
        let mut probs = vec![0.0; n];
        probs[0] = 1.0;
        let collapsed = soft_tree_size(&tree, &probs).unwrap();
        assert!((collapsed - SIZE_EPS.sqrt()).abs() < 1e-9);
        assert!(soft_tree_size(&tree, &vec![1.5; n]).is_err());
        assert!(soft_tree_size(&tree, &vec![0.0; n + 1]).is_err());
    }

    /// Closed-form oracle on the 2×2 tree: one internal node, four edges,
    /// every edge survives with the root's keep probability.
    #[test]
    fn soft_size_closed_form_on_tiny_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let obs = random_observation(2, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        for _ in 0..50 {
            let p_merge: f64 = rng.random_range(0.0..1.0);
            let got = soft_tree_size(&tree, &[p_merge]).unwrap();
            let expect = (2.0 * 4.0 * (1.0 - p_merge) + SIZE_EPS).sqrt();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    /// Hard/soft consistency: 0/1 probabilities reproduce the trimmed
    /// tree's exact size.
    #[test]
    fn soft_size_matches_trim_at_hard_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let obs = random_observation(8, &mut rng);
            let tree = decompose_full(&obs).unwrap();
            let mask = MergeMask((0..21).map(|_| rng.random::<bool>()).collect());
            let probs: Vec<f64> = mask.0.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let soft = soft_tree_size(&tree, &probs).unwrap();
            let hard = trim(&tree, &mask).unwrap().tree_size();
            assert!((soft - hard).abs() <= 1e-5, "soft {soft} hard {hard}");
        }
    }

    /// Raising any single merge probability never grows the surrogate.
    #[test]
    fn soft_size_is_monotone_in_merge_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let obs = random_observation(8, &mut rng);
            let tree = decompose_full(&obs).unwrap();
            let probs: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..1.0)).collect();
            let base = soft_tree_size(&tree, &probs).unwrap();
            let slot = rng.random_range(0..21);
            let mut bumped = probs.clone();
            bumped[slot] = (bumped[slot] + rng.random_range(0.0..1.0)).min(1.0);
            let after = soft_tree_size(&tree, &bumped).unwrap();
            assert!(after <= base + 1e-12, "{after} > {base}");
        }
    }

    /// Non-degeneracy: with random parameters, changing a received symbol
    /// changes the merge logits.
    #[test]
    fn symbols_condition_the_scores() {
        let fx = fixture(4, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let score = |symbols: &[Symbol]| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = fx.store.bind(&mut tape);
            let logits = merge_logits(
                &fx.params, &fx.embed, &binding, &mut tape, &tree, (2, 2), 7, symbols,
            )
            .unwrap();
            tape.values(logits).to_vec()
        };
        let a = score(&[Symbol::token(0), Symbol::token(1)]);
        let b = score(&[Symbol::token(0), Symbol::token(5)]);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    /// Finite-difference oracle through encoder, combiner, sampling and the
    /// relaxed size surrogate.
    #[test]
    fn abstractor_gradient_matches_finite_differences() {
        let fx = fixture(4, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let obs = random_observation(4, &mut rng);
        let tree = decompose_full(&obs).unwrap();
        let noise: Vec<Vec<f64>> = (0..fx.params.internal_count)
            .map(|_| crate::neural::sample_gumbel(&mut rng, 2))
            .collect();
        let symbols = [Symbol::token(2), Symbol::NULL];
        let run = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let result = abstract_tree(
                &fx.params,
                &fx.embed,
                &binding,
                &mut tape,
                &tree,
                (1, 3),
                7,
                &symbols,
                1.0,
                &noise,
                true,
            )
            .unwrap();
            // Exercise both the survival mask and the size surrogate.
            let surv_sum = tape.sum(result.survival);
            let weighted = tape.scale(surv_sum, 0.3);
            let loss = tape.add(result.penalty, weighted);
            tape.backward(loss);
            (tape.scalar(loss), binding.gradients_flat(&tape))
        };
        let (_, analytic) = run(&fx.store);
        let theta = fx.store.flatten();
        let err = grad_check_sampled(
            |t| {
                let mut probe = fx.store.clone();
                probe.set_from_flat(t);
                run(&probe).0
            },
            &theta,
            &analytic,
            1e-5,
            600,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }
}
