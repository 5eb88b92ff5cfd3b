//! Next-token pretraining of the tiny transformer on a copy task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::transformer::TinyTransformer;
use super::vocab::{self, Token};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::supervision::{lr_schedule, AdamW, AdamWConfig};

/// `s_1..s_k SEP s_1..s_{k-1}`; from SEP onwards each position predicts the next copied symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyExample {
    pub tokens: Vec<Token>,
    pub targets: Vec<Option<usize>>,
}

pub fn copy_task_corpus(count: usize, copy_len: usize, seed: u64) -> Vec<CopyExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = vocab::VOCAB_SIZE as Token - vocab::FILLER_START;
    (0..count)
        .map(|_| {
            let s: Vec<Token> = (0..copy_len)
                .map(|_| vocab::FILLER_START + rng.gen_range(0..symbols))
                .collect();
            let mut tokens = s.clone();
            tokens.push(vocab::SEP);
            tokens.extend_from_slice(&s[..copy_len - 1]);
            let mut targets = vec![None; copy_len];
            targets.extend(s.iter().map(|&t| Some(t as usize)));
            CopyExample { tokens, targets }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub copy_len: usize,
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 16,
            lr_max: 3e-3,
            warmup: 100,
            weight_decay: 0.01,
            copy_len: 6,
            train_examples: 4000,
            heldout_examples: 200,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
    pub passed: bool,
}

fn example_loss<F: Real>(
    model: &TinyTransformer<F>,
    ex: &CopyExample,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let p: Vec<Var> = model.params().iter().map(|t| g.param(t.clone())).collect();
    let z = model.sequence_logits_on(&mut g, &p, &ex.tokens)?;
    let loss = g.cross_entropy(z, &ex.targets)?;
    let mut grads = g.backward(loss)?;
    let gs = p
        .iter()
        .zip(model.params())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((g.scalar(loss).as_f64(), gs))
}

/// Fraction of supervised positions whose argmax equals the target, and mean loss.
pub fn token_accuracy<F: Real>(model: &TinyTransformer<F>, data: &[CopyExample]) -> Result<(f64, f64)> {
    let per: Vec<(usize, usize, f64)> = data
        .par_iter()
        .map(|ex| {
            let z = model.sequence_logits(&ex.tokens)?;
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let loss = g.cross_entropy(zv, &ex.targets)?;
            let mut hit = 0;
            let mut n = 0;
            for (r, t) in ex.targets.iter().enumerate() {
                if let Some(t) = t {
                    n += 1;
                    if super::argmax(z.row(r)) == *t {
                        hit += 1;
                    }
                }
            }
            Ok((hit, n, g.scalar(loss).as_f64()))
        })
        .collect::<Result<_>>()?;
    let hits: usize = per.iter().map(|p| p.0).sum();
    let total: usize = per.iter().map(|p| p.1).sum();
    let loss = per.iter().map(|p| p.2).sum::<f64>() / per.len().max(1) as f64;
    Ok((hits as f64 / total.max(1) as f64, loss))
}

/// Trains all transformer weights with AdamW and returns the frozen model.
pub fn pretrain_backbone<F: Real>(
    mut model: TinyTransformer<F>,
    train: &[CopyExample],
    heldout: &[CopyExample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(TinyTransformer<F>, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::input("empty pretraining corpus"));
    }
    let decay: Vec<bool> = model
        .names()
        .iter()
        .map(|n| n.contains(".w") || n == "unembed")
        .collect();
    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, model.params(), decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last_loss = f64::NAN;
    let batch = cfg.batch.max(1);

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<(f64, Vec<Tensor<F>>)> = idx
            .par_iter()
            .map(|&i| example_loss(&model, &train[i]))
            .collect::<Result<_>>()?;
        let inv = F::from_f64(1.0 / batch as f64);
        let mut total = 0.0;
        let mut grads: Vec<Tensor<F>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (loss, gs) in &results {
            total += loss;
            for (acc, g) in grads.iter_mut().zip(gs) {
                acc.add_assign(&g.scale(inv))?;
            }
        }
        last_loss = total / batch as f64;
        if !last_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss {last_loss}"),
            });
        }
        let lr = lr_schedule(step, cfg.lr_max, cfg.warmup, cfg.steps);
        opt.step(model.params_mut(), &grads, lr)?;
    }

    let (acc, heldout_loss) = if heldout.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        token_accuracy(&model, heldout)?
    };
    let report = PretrainReport {
        steps: cfg.steps,
        final_loss: last_loss,
        heldout_loss,
        heldout_accuracy: acc,
        passed: acc >= cfg.min_accuracy,
    };
    Ok((model, report))
}
