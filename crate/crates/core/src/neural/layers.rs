//! Parameterized layers over the tape: MLP, graph isomorphism network,
//! GRU cell, the image-baseline CNN, embedding tables, and the
//! straight-through Gumbel-softmax sampler.
//!
//! Parameters live in a [`ParamStore`] (plain arrays, independent of any
//! tape) and are bound onto a tape as leaves for each differentiated
//! computation.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use super::tape::{Adjacency, ConvGeom, PoolGeom, Tape, ValueId};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid graph: {0}")]
    Graph(String),
}

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

impl ParamId {
    /// Handle for the i-th entry, for code that walks a whole store.
    pub fn from_index(i: usize) -> ParamId {
        ParamId(i)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Named parameter tensors backing a network, independent of any tape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "param {name} shape");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            values,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// All parameter values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }

    /// Overwrites every entry from a flat vector in entry order.
    pub fn set_from_flat(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.flat_len(), "flat parameter length");
        let mut offset = 0;
        for e in &mut self.entries {
            let len = e.values.len();
            e.values.copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
    }

    /// Records every entry as a tape leaf, in entry order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| tape.input(e.rows, e.cols, e.values.clone()))
            .collect();
        Binding { ids }
    }
}

/// Maps [`ParamId`]s to the leaves of one particular tape.
pub struct Binding {
    ids: Vec<ValueId>,
}

impl Binding {
    pub fn get(&self, p: ParamId) -> ValueId {
        self.ids[p.0]
    }

    /// Per-entry gradients after a backward pass, in entry order.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    }

    /// Gradients concatenated in entry order.
    pub fn gradients_flat(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in &self.ids {
            out.extend_from_slice(tape.grad(id));
        }
        out
    }
}

/// Glorot-uniform weight matrix.
fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    glorot_with_fans(rng, rows * cols, rows, cols)
}

/// Glorot-uniform values with explicit fan-in/fan-out (convolutions count
/// the kernel area in their fans).
fn glorot_with_fans<R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: ValueId) -> ValueId {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// One affine layer: weight stored as `(input, output)` so row-vector (or
/// node-matrix) inputs multiply without transposition.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LinearParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        output_dim: usize,
    ) -> LinearParams {
        let w = store.add(&format!("{name}/w"), input_dim, output_dim, glorot(rng, input_dim, output_dim));
        let b = store.add(&format!("{name}/b"), 1, output_dim, vec![0.0; output_dim]);
        LinearParams { w, b, input_dim, output_dim }
    }

    /// Builds a layer with explicit values, for hand-constructed networks.
    pub fn with_values(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    ) -> LinearParams {
        let w = store.add(&format!("{name}/w"), input_dim, output_dim, w);
        let b = store.add(&format!("{name}/b"), 1, output_dim, b);
        LinearParams { w, b, input_dim, output_dim }
    }

    pub fn forward(&self, binding: &Binding, tape: &mut Tape, x: ValueId) -> ValueId {
        let prod = tape.matmul(x, binding.get(self.w));
        tape.add_row(prod, binding.get(self.b))
    }
}

/// Multi-layer perceptron; hidden layers share one activation, the output
/// layer is linear.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
    pub hidden_activation: Activation,
}

impl MlpParams {
    /// `dims` chains input through hidden widths to the output width, e.g.
    /// `[8, 64, 64]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
    ) -> MlpParams {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| LinearParams::new(store, rng, &format!("{name}/l{i}"), d[0], d[1]))
            .collect();
        MlpParams { layers, hidden_activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim
    }
}

/// Affine/activation composition over a row vector or node matrix.
pub fn mlp_forward(
    params: &MlpParams,
    binding: &Binding,
    tape: &mut Tape,
    x: ValueId,
) -> Result<ValueId, NeuralError> {
    if tape.cols(x) != params.input_dim() {
        return Err(NeuralError::Shape(format!(
            "mlp input width {} != {}",
            tape.cols(x),
            params.input_dim()
        )));
    }
    let mut h = x;
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(binding, tape, h);
        if i < last {
            h = params.hidden_activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// An undirected graph with dense node features, validated for use with
/// [`gin_embed`]: symmetric adjacency, zero diagonal.
#[derive(Clone, Debug)]
pub struct Graph {
    pub node_count: usize,
    pub feature_dim: usize,
    /// Row-major `(node_count, feature_dim)`.
    pub features: Vec<f64>,
    pub adjacency: Adjacency,
}

impl Graph {
    /// Builds from neighbor lists; rejects self-loops and one-sided edges.
    pub fn new(
        features: Vec<f64>,
        node_count: usize,
        feature_dim: usize,
        adjacency: Vec<Vec<usize>>,
    ) -> Result<Graph, NeuralError> {
        if features.len() != node_count * feature_dim {
            return Err(NeuralError::Shape("feature matrix size".into()));
        }
        if adjacency.len() != node_count {
            return Err(NeuralError::Graph("adjacency length".into()));
        }
        for (v, neighbors) in adjacency.iter().enumerate() {
            for &u in neighbors {
                if u == v {
                    return Err(NeuralError::Graph(format!("self-loop at node {v}")));
                }
                if u >= node_count {
                    return Err(NeuralError::Graph(format!("neighbor {u} out of range")));
                }
                if !adjacency[u].contains(&v) {
                    return Err(NeuralError::Graph(format!("edge {v}->{u} is not symmetric")));
                }
            }
        }
        Ok(Graph {
            node_count,
            feature_dim,
            features,
            adjacency: Arc::new(adjacency),
        })
    }

    /// Builds from a dense 0/1 adjacency matrix.
    pub fn from_dense(
        features: Vec<f64>,
        node_count: usize,
        feature_dim: usize,
        dense: &[f64],
    ) -> Result<Graph, NeuralError> {
        if dense.len() != node_count * node_count {
            return Err(NeuralError::Graph("dense adjacency size".into()));
        }
        let mut adjacency = vec![Vec::new(); node_count];
        for i in 0..node_count {
            for j in 0..node_count {
                let a = dense[i * node_count + j];
                if a != 0.0 && a != 1.0 {
                    return Err(NeuralError::Graph(format!("entry ({i},{j}) = {a} not 0/1")));
                }
                if a == 1.0 {
                    if i == j {
                        return Err(NeuralError::Graph(format!("self-loop at node {i}")));
                    }
                    if dense[j * node_count + i] != 1.0 {
                        return Err(NeuralError::Graph(format!("entry ({i},{j}) not symmetric")));
                    }
                    adjacency[i].push(j);
                }
            }
        }
        Ok(Graph {
            node_count,
            feature_dim,
            features,
            adjacency: Arc::new(adjacency),
        })
    }
}

/// Graph isomorphism network: `K` message-passing iterations, each an MLP
/// applied to self-plus-neighbor sums.
#[derive(Clone, Debug)]
pub struct GinParams {
    pub iterations: Vec<MlpParams>,
    pub input_dim: usize,
}

impl GinParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        iterations: usize,
    ) -> GinParams {
        let mut mlps = Vec::with_capacity(iterations);
        let mut width = input_dim;
        for k in 0..iterations {
            mlps.push(MlpParams::new(
                store,
                rng,
                &format!("{name}/iter{k}"),
                &[width, hidden_dim, hidden_dim],
                Activation::Relu,
            ));
            width = hidden_dim;
        }
        GinParams { iterations: mlps, input_dim }
    }

    /// Width of the readout: input features plus every iteration's output.
    pub fn embedding_dim(&self) -> usize {
        self.input_dim + self.iterations.iter().map(|m| m.output_dim()).sum::<usize>()
    }
}

/// Whole-graph embedding: per iteration
/// `h_v ← MLP(h_v + Σ_{u∈N(v)} h_u)`, read out as the concatenation of the
/// per-iteration node sums (iteration 0 = raw features).
pub fn gin_embed(
    params: &GinParams,
    binding: &Binding,
    tape: &mut Tape,
    graph: &Graph,
) -> Result<ValueId, NeuralError> {
    gin_embed_masked(params, binding, tape, graph, None)
}

/// [`gin_embed`] with an optional per-node survival mask. Node features and
/// every iteration's outputs are scaled row-wise by the mask, so nodes with
/// mask 0 contribute nothing anywhere: the embedding of a 0/1-masked graph
/// equals the embedding of the graph with those nodes (and their edges)
/// removed. A straight-through mask therefore makes the discrete node
/// selection differentiable.
pub fn gin_embed_masked(
    params: &GinParams,
    binding: &Binding,
    tape: &mut Tape,
    graph: &Graph,
    mask: Option<ValueId>,
) -> Result<ValueId, NeuralError> {
    if graph.feature_dim != params.input_dim {
        return Err(NeuralError::Shape(format!(
            "gin input width {} != {}",
            graph.feature_dim, params.input_dim
        )));
    }
    if let Some(m) = mask {
        if tape.cols(m) != graph.node_count {
            return Err(NeuralError::Shape("mask length != node count".into()));
        }
    }
    let mut h = tape.input(graph.node_count, graph.feature_dim, graph.features.clone());
    if let Some(m) = mask {
        h = tape.scale_rows(h, m);
    }
    let mut readout = Vec::with_capacity(params.iterations.len() + 1);
    readout.push(tape.sum_rows(h));
    for mlp in &params.iterations {
        let agg = tape.neighbor_sum(h, &graph.adjacency);
        h = mlp_forward(mlp, binding, tape, agg)?;
        if let Some(m) = mask {
            h = tape.scale_rows(h, m);
        }
        readout.push(tape.sum_rows(h));
    }
    Ok(tape.concat(&readout))
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> GruParams {
        let gate = |store: &mut ParamStore, rng: &mut R, g: &str| {
            (
                store.add(&format!("{name}/w_{g}"), input_dim, hidden_dim, glorot(rng, input_dim, hidden_dim)),
                store.add(&format!("{name}/u_{g}"), hidden_dim, hidden_dim, glorot(rng, hidden_dim, hidden_dim)),
                store.add(&format!("{name}/b_{g}"), 1, hidden_dim, vec![0.0; hidden_dim]),
            )
        };
        let (w_z, u_z, b_z) = gate(store, rng, "z");
        let (w_r, u_r, b_r) = gate(store, rng, "r");
        let (w_n, u_n, b_n) = gate(store, rng, "n");
        GruParams { w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n, input_dim, hidden_dim }
    }
}

/// Standard GRU update:
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `n = tanh(xWn + r ⊙ (hUn) + bn)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
pub fn gru_step(
    params: &GruParams,
    binding: &Binding,
    tape: &mut Tape,
    x: ValueId,
    h: ValueId,
) -> Result<ValueId, NeuralError> {
    if tape.cols(x) != params.input_dim || tape.cols(h) != params.hidden_dim {
        return Err(NeuralError::Shape(format!(
            "gru widths: input {} (want {}), hidden {} (want {})",
            tape.cols(x),
            params.input_dim,
            tape.cols(h),
            params.hidden_dim
        )));
    }
    let gate = |tape: &mut Tape, w, u, b| {
        let xw = tape.matmul(x, binding.get(w));
        let hu = tape.matmul(h, binding.get(u));
        let s = tape.add(xw, hu);
        tape.add_row(s, binding.get(b))
    };
    let z_pre = gate(tape, params.w_z, params.u_z, params.b_z);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, params.w_r, params.u_r, params.b_r);
    let r = tape.sigmoid(r_pre);
    let xn = tape.matmul(x, binding.get(params.w_n));
    let hn = tape.matmul(h, binding.get(params.u_n));
    let rhn = tape.mul(r, hn);
    let n_sum = tape.add(xn, rhn);
    let n_pre = tape.add_row(n_sum, binding.get(params.b_n));
    let n = tape.tanh(n_pre);
    // h' = n + z ⊙ (h − n)
    let h_minus_n = tape.sub(h, n);
    let zh = tape.mul(z, h_minus_n);
    Ok(tape.add(n, zh))
}

/// Image-baseline CNN: four 3×3 stride-2 convolutions with ELU, then
/// adaptive average pooling to 3×3.
#[derive(Clone, Debug)]
pub struct CnnParams {
    pub layers: Vec<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub channels: usize,
    pub pool_side: usize,
}

impl CnnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_channels: usize) -> CnnParams {
        let channels = 32;
        let mut layers = Vec::new();
        let mut ic = in_channels;
        for i in 0..4 {
            let w = store.add(
                &format!("{name}/conv{i}/w"),
                channels,
                ic * 9,
                glorot_with_fans(rng, channels * ic * 9, ic * 9, channels * 9),
            );
            let b = store.add(&format!("{name}/conv{i}/b"), 1, channels, vec![0.0; channels]);
            layers.push((w, b));
            ic = channels;
        }
        CnnParams { layers, in_channels, channels, pool_side: 3 }
    }

    pub fn output_dim(&self) -> usize {
        self.channels * self.pool_side * self.pool_side
    }
}

/// Runs the CNN over one-hot state planes of an `side`×`side` window.
pub fn cnn_forward(
    params: &CnnParams,
    binding: &Binding,
    tape: &mut Tape,
    image: ValueId,
    side: usize,
) -> Result<ValueId, NeuralError> {
    if tape.cols(image) != params.in_channels * side * side {
        return Err(NeuralError::Shape(format!(
            "cnn input width {} != {} channels × {side}×{side}",
            tape.cols(image),
            params.in_channels
        )));
    }
    let mut x = image;
    let (mut ch, mut h, mut w) = (params.in_channels, side, side);
    for &(wid, bid) in &params.layers {
        let geom = ConvGeom {
            in_ch: ch,
            in_h: h,
            in_w: w,
            out_ch: params.channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let conv = tape.conv2d(x, binding.get(wid), binding.get(bid), geom);
        x = tape.elu(conv);
        h = geom.out_h();
        w = geom.out_w();
        ch = params.channels;
    }
    Ok(tape.adaptive_avg_pool(
        x,
        PoolGeom { ch, in_h: h, in_w: w, out_h: params.pool_side, out_w: params.pool_side },
    ))
}

/// Learned lookup table; row 0 is reserved for the null token.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> EmbeddingParams {
        let values = (0..rows * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let table = store.add(name, rows, dim, values);
        EmbeddingParams { table, rows, dim }
    }

    pub fn lookup(&self, binding: &Binding, tape: &mut Tape, row: usize) -> ValueId {
        tape.row(binding.get(self.table), row)
    }
}

/// One straight-through Gumbel-softmax draw.
pub struct StSample {
    /// One-hot forward value with straight-through gradient.
    pub hard: ValueId,
    /// Relaxed probabilities `softmax((logits + g)/τ)` at the same noise.
    pub soft: ValueId,
    /// The Gumbel noise used, for replay.
    pub noise: Vec<f64>,
    /// Index of the sampled category.
    pub selected: usize,
}

/// Standard Gumbel(0,1) noise.
pub fn sample_gumbel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Samples a one-hot outcome at `argmax(logits + g)` whose backward pass is
/// the Jacobian of `softmax((logits + g)/τ)` at the same noise.
pub fn gumbel_softmax_st<R: Rng>(
    tape: &mut Tape,
    logits: ValueId,
    tau: f64,
    rng: &mut R,
) -> Result<StSample, NeuralError> {
    let noise = sample_gumbel(rng, tape.cols(logits));
    gumbel_softmax_st_with_noise(tape, logits, tau, &noise)
}

/// [`gumbel_softmax_st`] with caller-supplied noise, for deterministic
/// replay (gradient checks) and greedy evaluation (zero noise).
pub fn gumbel_softmax_st_with_noise(
    tape: &mut Tape,
    logits: ValueId,
    tau: f64,
    noise: &[f64],
) -> Result<StSample, NeuralError> {
    if tau <= 0.0 {
        return Err(NeuralError::Parameter(format!("temperature {tau} must be positive")));
    }
    if noise.len() != tape.cols(logits) || tape.rows(logits) != 1 {
        return Err(NeuralError::Shape("noise length != logit count".into()));
    }
    let g = tape.input(1, noise.len(), noise.to_vec());
    let perturbed = tape.add(logits, g);
    let soft = tape.softmax(perturbed, tau);
    let hard = tape.hard_max(soft);
    let selected = super::tape::argmax(tape.values(hard));
    Ok(StSample { hard, soft, noise: noise.to_vec(), selected })
}
