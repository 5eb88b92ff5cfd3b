//! Frozen layered models that run arbitrary execution paths.

mod checkpoint;
mod counter;
mod path;
mod pretrain;
mod transformer;
pub mod vocab;

pub use checkpoint::{
    load_checkpoint, read_container, save_checkpoint, write_container, AnyBackbone, Block,
    Container, Header, MAGIC, VERSION,
};
pub use counter::{default_roles as counter_roles, Code, CounterModel, Role};
pub use path::{validate_path, ExecutionPath, PathViolation, MAX_REPEAT, MAX_SKIP_RUN};
pub use pretrain::{copy_task_corpus, pretrain_backbone, token_accuracy, CopyExample, PretrainConfig, PretrainReport};
pub use transformer::{TinyTransformer, TransformerConfig};
pub use vocab::Token;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// A depth-`L` model split into embedding, per-layer state maps and an answer head.
///
/// Layers are numbered from 1. Implementations must be pure: `apply_layer`
/// depends only on its arguments.
pub trait Backbone<F: Real = f32>: Send + Sync {
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_seq(&self) -> usize;

    fn embed(&self, tokens: &[Token]) -> Result<Tensor<F>>;
    fn apply_layer(&self, layer: usize, state: &Tensor<F>) -> Result<Tensor<F>>;
    /// Answer logits (one row) from the final state.
    fn head(&self, state: &Tensor<F>) -> Result<Tensor<F>>;
    /// Greedy answer text for the prompt, e.g. `Answer: B` or `\boxed{12}`.
    fn render_answer(&self, tokens: &[Token], logits: &Tensor<F>) -> String;
}

/// States visited by a forward pass and the resulting answer logits.
#[derive(Clone, Debug)]
pub struct Forward<F: Real = f32> {
    /// Embedding followed by the state after every applied layer.
    pub states: Vec<Tensor<F>>,
    pub logits: Tensor<F>,
}

impl<F: Real> Forward<F> {
    pub fn final_state(&self) -> &Tensor<F> {
        self.states.last().expect("forward always records the embedding")
    }
}

pub(crate) fn check_tokens(tokens: &[Token], vocab: usize, max_seq: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if tokens.len() > max_seq {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds maximum {max_seq}",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::input(format!("token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn run_layers<F: Real, B: Backbone<F> + ?Sized>(
    backbone: &B,
    tokens: &[Token],
    layers: &[usize],
) -> Result<Forward<F>> {
    let mut states = Vec::with_capacity(layers.len() + 1);
    states.push(backbone.embed(tokens)?);
    for &l in layers {
        let next = backbone.apply_layer(l, states.last().unwrap())?;
        states.push(next);
    }
    let logits = backbone.head(states.last().unwrap())?;
    Ok(Forward { states, logits })
}

/// Applies every layer once, in order.
pub fn forward_default<F: Real, B: Backbone<F> + ?Sized>(
    backbone: &B,
    tokens: &[Token],
) -> Result<Forward<F>> {
    let layers: Vec<usize> = (1..=backbone.num_layers()).collect();
    run_layers(backbone, tokens, &layers)
}

/// Applies the layers of `path` in order.
pub fn forward_with_path<F: Real, B: Backbone<F> + ?Sized>(
    backbone: &B,
    tokens: &[Token],
    path: &ExecutionPath,
) -> Result<Forward<F>> {
    if path.depth() != backbone.num_layers() {
        return Err(Error::input(format!(
            "path built for {} layers, backbone has {}",
            path.depth(),
            backbone.num_layers()
        )));
    }
    validate_path(path.layers(), backbone.num_layers())?;
    run_layers(backbone, tokens, path.layers())
}

/// Decoded answer text along `path`.
pub fn answer_with_path<F: Real, B: Backbone<F> + ?Sized>(
    backbone: &B,
    tokens: &[Token],
    path: &ExecutionPath,
) -> Result<String> {
    let out = forward_with_path(backbone, tokens, path)?;
    Ok(backbone.render_answer(tokens, &out.logits))
}

/// Index of the largest entry of a row; first wins on ties.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
