//! Self-contained differentiable-compute core: a reverse-mode tape over
//! small dense tensors, the layers built on it, Adam, and finite-difference
//! gradient verification. Everything runs in 64-bit floats so single-worker
//! training is bit-reproducible and gradient checks are clean.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{finite_difference, grad_check, grad_check_sampled};
pub use layers::{
    cnn_forward, gin_embed, gin_embed_masked, gru_step, gumbel_softmax_st,
    gumbel_softmax_st_with_noise, mlp_forward, sample_gumbel, Activation, Binding, CnnParams,
    EmbeddingParams, Graph, GinParams, GruParams, LinearParams, MlpParams, NeuralError, ParamId,
    ParamStore, StSample,
};
pub use tape::{argmax, softmax_values, Adjacency, ConvGeom, PoolGeom, Tape, ValueId};
