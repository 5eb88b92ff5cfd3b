//! Pre-norm decoder-only transformer with learned positions and causal attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{self, Token};
use super::{argmax, check_tokens, Backbone};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 8,
            dim: 64,
            heads: 4,
            ffn: 256,
            vocab: vocab::VOCAB_SIZE,
            max_seq: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab and max_seq must be positive".into()));
        }
        Ok(())
    }
}

const LAYER_PARAMS: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o", "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer<F: Real = f32> {
    cfg: TransformerConfig,
    params: Vec<Tensor<F>>,
}

impl<F: Real> TinyTransformer<F> {
    /// Random initialisation: N(0, 0.02) weights and embeddings, unit norm gains, zero biases.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let params = Self::shapes(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".g") {
                    Tensor::filled(&shape, F::one())
                } else if is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    let n: usize = shape.iter().product();
                    let v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_f64(&shape, &v).expect("shape matches")
                }
            })
            .collect();
        Ok(TinyTransformer { cfg, params })
    }

    /// Every parameter set to zero, which makes every block the identity.
    pub fn zeros(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Self::shapes(&cfg)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Ok(TinyTransformer { cfg, params })
    }

    pub fn from_params(cfg: TransformerConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::shapes(&cfg);
        if shapes.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(TinyTransformer { cfg, params })
    }

    /// Parameter names and shapes in storage order.
    pub fn shapes(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (cfg.dim, cfg.ffn);
        let mut out = vec![
            ("tok_embed".to_string(), vec![cfg.vocab, d]),
            ("pos_embed".to_string(), vec![cfg.max_seq, d]),
        ];
        for l in 1..=cfg.layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (n, s) in LAYER_PARAMS.iter().zip(shapes) {
                out.push((format!("layer.{l}.{n}"), s));
            }
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, cfg.vocab]));
        out
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn names(&self) -> Vec<String> {
        Self::shapes(&self.cfg).into_iter().map(|(n, _)| n).collect()
    }

    pub fn cast<G: Real>(&self) -> TinyTransformer<G> {
        TinyTransformer {
            cfg: self.cfg,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn layer_offset(&self, layer: usize) -> usize {
        2 + (layer - 1) * LAYER_PARAMS.len()
    }

    fn final_offset(&self) -> usize {
        2 + self.cfg.layers * LAYER_PARAMS.len()
    }

    /// Token plus position embedding on the tape. `p` holds a node for every parameter.
    pub fn embed_on(&self, g: &mut Graph<F>, p: &[Var], tokens: &[Token]) -> Result<Var> {
        check_tokens(tokens, self.cfg.vocab, self.cfg.max_seq)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.gather_rows(p[0], &ids)?;
        let pos = g.gather_rows(p[1], &positions)?;
        g.add(tok, pos)
    }

    /// One residual block: `x + attn(ln1 x)`, then `+ mlp(ln2 x)`.
    pub fn block_on(&self, g: &mut Graph<F>, p: &[Var], layer: usize, x: Var) -> Result<Var> {
        let o = self.layer_offset(layer);
        let eps = F::from_f64(LN_EPS);
        let d = self.cfg.dim;
        let dh = d / self.cfg.heads;

        let h = g.layer_norm(x, p[o], p[o + 1], eps)?;
        let qkv = g.matmul(h, p[o + 2])?;
        let qkv = g.add_bias(qkv, p[o + 3])?;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let kt = g.transpose(k);
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, true)?;
            heads.push(g.matmul(a, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let att = g.matmul(cat, p[o + 4])?;
        let att = g.add_bias(att, p[o + 5])?;
        let x = g.add(x, att)?;

        let h = g.layer_norm(x, p[o + 6], p[o + 7], eps)?;
        let u = g.matmul(h, p[o + 8])?;
        let u = g.add_bias(u, p[o + 9])?;
        let u = g.gelu(u);
        let m = g.matmul(u, p[o + 10])?;
        let m = g.add_bias(m, p[o + 11])?;
        g.add(x, m)
    }

    /// Vocabulary logits for every position.
    pub fn logits_on(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let o = self.final_offset();
        let h = g.layer_norm(x, p[o], p[o + 1], F::from_f64(LN_EPS))?;
        g.matmul(h, p[o + 2])
    }

    /// Full default-path logits for every position on a fresh tape.
    pub fn sequence_logits_on(&self, g: &mut Graph<F>, p: &[Var], tokens: &[Token]) -> Result<Var> {
        let mut x = self.embed_on(g, p, tokens)?;
        for l in 1..=self.cfg.layers {
            x = self.block_on(g, p, l, x)?;
        }
        self.logits_on(g, p, x)
    }

    /// Places every parameter on the tape as a constant.
    pub fn constants_on(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Nodes for a subset of parameters; the rest get placeholder constants.
    fn sparse_constants(&self, g: &mut Graph<F>, wanted: std::ops::Range<usize>) -> Vec<Var> {
        let placeholder = g.constant(Tensor::zeros(&[1]));
        (0..self.params.len())
            .map(|i| {
                if wanted.contains(&i) {
                    g.constant(self.params[i].clone())
                } else {
                    placeholder
                }
            })
            .collect()
    }

    /// Next-token logits for every position of `tokens` along the default path.
    pub fn sequence_logits(&self, tokens: &[Token]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.constants_on(&mut g);
        let out = self.sequence_logits_on(&mut g, &p, tokens)?;
        Ok(g.value(out).clone())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with("b_qkv") || name.ends_with("b_o") || name.ends_with("b1") || name.ends_with("b2")
}

impl<F: Real> Backbone<F> for TinyTransformer<F> {
    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.dim
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn max_seq(&self) -> usize {
        self.cfg.max_seq
    }

    fn embed(&self, tokens: &[Token]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.sparse_constants(&mut g, 0..2);
        let x = self.embed_on(&mut g, &p, tokens)?;
        Ok(g.value(x).clone())
    }

    fn apply_layer(&self, layer: usize, state: &Tensor<F>) -> Result<Tensor<F>> {
        if layer == 0 || layer > self.cfg.layers {
            return Err(Error::input(format!("layer {layer} outside 1..={}", self.cfg.layers)));
        }
        if state.cols() != self.cfg.dim {
            return Err(Error::dim("transformer block", format!("{:?}", state.shape())));
        }
        let o = self.layer_offset(layer);
        let mut g = Graph::new();
        let p = self.sparse_constants(&mut g, o..o + LAYER_PARAMS.len());
        let x = g.constant(state.clone());
        let y = self.block_on(&mut g, &p, layer, x)?;
        Ok(g.value(y).clone())
    }

    fn head(&self, state: &Tensor<F>) -> Result<Tensor<F>> {
        if state.cols() != self.cfg.dim || state.rows() == 0 {
            return Err(Error::dim("transformer head", format!("{:?}", state.shape())));
        }
        let o = self.final_offset();
        let mut g = Graph::new();
        let p = self.sparse_constants(&mut g, o..o + 3);
        let last = state.slice_rows(state.rows() - 1, 1)?;
        let x = g.constant(last);
        let z = self.logits_on(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    fn render_answer(&self, _tokens: &[Token], logits: &Tensor<F>) -> String {
        let t = argmax(logits.row(0)) as Token;
        if vocab::is_letter(t) {
            format!("Answer: {}", vocab::LETTERS[(t - vocab::LETTER_A) as usize])
        } else if vocab::is_digit(t) {
            format!("\\boxed{{{}}}", t - vocab::DIGIT_0)
        } else {
            format!("<{t}>")
        }
    }
}
