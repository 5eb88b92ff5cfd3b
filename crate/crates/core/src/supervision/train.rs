use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_counts, effective_number_weights, AdamW, AdamWConfig};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::eval::{per_class_f1, ClassF1};
use crate::numerics::{Graph, Tensor};
use crate::routing::{choose, route_layer, router_logits_on, window_pool, InputMode, RouterStack};
use crate::search::{labels_to_path, SupervisionExample};
use crate::backbone::Token;

use super::lr_schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Focal,
    WeightedCe,
    PlainCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Focal,
            gamma: 2.0,
            beta: 0.999,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {} must be non-negative", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }

    /// Class weights and focusing exponent actually used for `dataset`.
    pub fn resolve(&self, dataset: &[SupervisionExample]) -> Result<([f64; 3], f64)> {
        self.validate()?;
        Ok(match self.mode {
            LossMode::PlainCe => ([1.0; 3], 0.0),
            LossMode::WeightedCe => (effective_number_weights(&class_counts(dataset), self.beta)?, 0.0),
            LossMode::Focal => (effective_number_weights(&class_counts(dataset), self.beta)?, self.gamma),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Set by the pipeline from the root seed.
    #[serde(skip)]
    pub seed: u64,
    /// Follow labelled paths during training. When off, states follow the
    /// routers' own greedy decisions, refreshed once per epoch.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            lr_max: 1e-3,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            warmup: 500,
            epochs: 25,
            batch: 16,
            seed: 0,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch.max(1))
    }

    pub fn validate(&self, examples: usize) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr_max > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr_max must be positive and weight_decay non-negative".into()));
        }
        let total = self.epochs * self.steps_per_epoch(examples);
        if self.epochs > 0 && self.warmup >= total {
            return Err(Error::Config(format!(
                "warmup of {} steps must be below the {total} total steps",
                self.warmup
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub skip_f1: f64,
    pub exec_f1: f64,
    pub repeat_f1: f64,
    pub macro_f1: f64,
    pub lr: f64,
}

/// Pooled router inputs for every layer position, following the labelled path.
/// A skipped layer's router sees the state that bypassed it.
pub fn pooled_inputs<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    windows: usize,
    mode: InputMode,
    tokens: &[Token],
    labels: &[u8],
) -> Result<Vec<Tensor<f32>>> {
    labels_to_path(labels)?;
    if labels.len() != backbone.num_layers() {
        return Err(Error::input(format!(
            "{} labels for {} layers",
            labels.len(),
            backbone.num_layers()
        )));
    }
    walk(backbone, windows, mode, tokens, |l, _| Ok(labels[l - 1]))
}

/// Pooled inputs along the path chosen greedily by `stack`.
fn routed_inputs<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    stack: &RouterStack,
    tokens: &[Token],
) -> Result<Vec<Tensor<f32>>> {
    walk(backbone, stack.windows, stack.mode, tokens, |l, pooled| {
        Ok(route_layer(&stack.routers[l - 1], pooled)?.action)
    })
}

fn walk<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    windows: usize,
    mode: InputMode,
    tokens: &[Token],
    mut action: impl FnMut(usize, &Tensor<f32>) -> Result<u8>,
) -> Result<Vec<Tensor<f32>>> {
    let first = backbone.embed(tokens)?;
    let first_pooled = window_pool(&first, windows)?;
    let mut h = first;
    let mut out = Vec::with_capacity(backbone.num_layers());
    for l in 1..=backbone.num_layers() {
        let pooled = match mode {
            InputMode::Previous => window_pool(&h, windows)?,
            InputMode::First => first_pooled.clone(),
        };
        for _ in 0..action(l, &pooled)? {
            h = backbone.apply_layer(l, &h)?;
        }
        out.push(pooled);
    }
    Ok(out)
}

fn precompute<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    stack: &RouterStack,
    data: &[SupervisionExample],
    teacher: bool,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    data.par_iter()
        .map(|e| {
            if teacher {
                pooled_inputs(backbone, stack.windows, stack.mode, &e.tokens, &e.labels)
            } else {
                routed_inputs(backbone, stack, &e.tokens)
            }
        })
        .collect()
}

/// Teacher-forced greedy predictions compared with the labels.
fn label_f1(stack: &RouterStack, inputs: &[Vec<Tensor<f32>>], data: &[SupervisionExample]) -> Result<ClassF1> {
    let preds: Vec<Vec<u8>> = inputs
        .par_iter()
        .map(|per_layer| {
            per_layer
                .iter()
                .zip(&stack.routers)
                .map(|(p, r)| Ok(choose(&r.logits(p).map(softmax3)?)))
                .collect::<Result<Vec<u8>>>()
        })
        .collect::<Result<_>>()?;
    let pred: Vec<u8> = preds.into_iter().flatten().collect();
    let gold: Vec<u8> = data.iter().flat_map(|e| e.labels.iter().copied()).collect();
    per_class_f1(&pred, &gold)
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Loss and router gradients for one layer over a batch.
fn layer_step(
    params: &[Tensor<f32>],
    pooled: &[&Tensor<f32>],
    labels: &[usize],
    alpha: &[f32; 3],
    gamma: f32,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let groups: Vec<usize> = pooled.iter().map(|p| p.rows()).collect();
    let cols = pooled[0].cols();
    let mut data = Vec::with_capacity(groups.iter().sum::<usize>() * cols);
    for p in pooled {
        data.extend_from_slice(p.data());
    }
    let x = g.constant(Tensor::new(vec![groups.iter().sum(), cols], data)?);
    let logits = router_logits_on(&mut g, &vars, x, &groups)?;
    let loss = g.focal(logits, labels, alpha, gamma)?;
    let value = g.scalar(loss) as f64;
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::dim("train", "missing gradient")))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Trains every router against its layer's labels. Only router parameters
/// change. Metrics are measured on `heldout` when given, else on `dataset`.
pub fn train_routers<B: Backbone<f32> + ?Sized>(
    dataset: &[SupervisionExample],
    backbone: &B,
    mut stack: RouterStack,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    heldout: Option<&[SupervisionExample]>,
) -> Result<(RouterStack, Vec<EpochMetrics>)> {
    if dataset.is_empty() {
        return Err(Error::input("empty supervision dataset"));
    }
    let layers = backbone.num_layers();
    if stack.num_layers() != layers {
        return Err(Error::input(format!("{} routers for {layers} layers", stack.num_layers())));
    }
    if cfg.epochs == 0 {
        return Ok((stack, Vec::new()));
    }
    cfg.validate(dataset.len())?;
    let (alpha, gamma) = loss_cfg.resolve(dataset)?;
    let alpha = alpha.map(|a| a as f32);
    let gamma = gamma as f32;

    let steps_per_epoch = cfg.steps_per_epoch(dataset.len());
    let total = cfg.epochs * steps_per_epoch;
    let mut params = stack.params();
    let mut opt = AdamW::new(cfg.adam(), &params, stack.decay_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let mut inputs = precompute(backbone, &stack, dataset, true)?;
    let eval_set = heldout.unwrap_or(dataset);
    let eval_inputs = match heldout {
        Some(h) => precompute(backbone, &stack, h, true)?,
        None => Vec::new(),
    };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        if !cfg.teacher_forcing && epoch > 1 {
            inputs = precompute(backbone, &stack, dataset, false)?;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let results: Vec<(f64, Vec<Tensor<f32>>)> = (0..layers)
                .into_par_iter()
                .map(|l| {
                    let pooled: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &inputs[i][l]).collect();
                    let labels: Vec<usize> = chunk.iter().map(|&i| dataset[i].labels[l] as usize).collect();
                    layer_step(&params[4 * l..4 * l + 4], &pooled, &labels, &alpha, gamma)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / layers as f32;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(params.len());
            for (value, g) in results {
                loss += value;
                grads.extend(g.into_iter().map(|t| t.scale(scale)));
            }
            loss /= layers as f64;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    step,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            lr = lr_schedule(step, cfg.lr_max, cfg.warmup, total);
            opt.step(&mut params, &grads, lr)?;
            loss_sum += loss;
            step += 1;
        }
        stack.set_params(params.clone())?;
        let f1 = if heldout.is_some() {
            label_f1(&stack, &eval_inputs, eval_set)?
        } else if cfg.teacher_forcing {
            label_f1(&stack, &inputs, eval_set)?
        } else {
            label_f1(&stack, &precompute(backbone, &stack, dataset, true)?, eval_set)?
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            skip_f1: f1.skip,
            exec_f1: f1.execute,
            repeat_f1: f1.repeat,
            macro_f1: f1.macro_f1,
            lr,
        });
    }
    Ok((stack, metrics))
}

pub fn write_epoch_log(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    crate::eval::write_csv(path, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_with_path, CounterModel};
    use crate::routing::RouterConfig;
    use crate::tasks::{gen_corpus, CorpusSpec};

    fn toy_dataset(layers: usize) -> (CounterModel, Vec<SupervisionExample>) {
        let model = CounterModel::new(layers, 24, 5).unwrap();
        let spec = CorpusSpec { layers, ..CorpusSpec::default() };
        let corpus = gen_corpus(&[20, 20, 10, 20, 20, 20, 20], 3, &spec);
        let data = corpus
            .iter()
            .filter_map(|inst| {
                let labels = model.oracle_labels(&inst.tokens)?;
                Some(SupervisionExample {
                    id: inst.id.clone(),
                    stratum: inst.stratum,
                    tokens: inst.tokens.clone(),
                    labels,
                    gold: inst.gold.clone(),
                    reward_default: 0.0,
                    reward_best: 1.0,
                    path_len: 0,
                })
            })
            .collect();
        (model, data)
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, warmup: 10, lr_max: 3e-3, ..TrainConfig::default() }
    }

    #[test]
    fn teacher_forced_states_match_labelled_forward() {
        let (model, data) = toy_dataset(6);
        for e in data.iter().take(20) {
            let pooled = pooled_inputs(&model, 4, InputMode::Previous, &e.tokens, &e.labels).unwrap();
            let path = labels_to_path(&e.labels).unwrap();
            let fwd = forward_with_path(&model, &e.tokens, &path).unwrap();
            // The state entering layer l is the one after all earlier applications.
            let mut applied = 0;
            for (l, p) in pooled.iter().enumerate() {
                let expect = window_pool(&fwd.states[applied], 4).unwrap();
                assert_eq!(p, &expect);
                applied += e.labels[l] as usize;
            }
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (model, data) = toy_dataset(6);
        let stack = RouterStack::new(6, 24, &RouterConfig { hidden: 16, ..RouterConfig::default() }, 1).unwrap();
        let (out, log) = train_routers(&data, &model, stack.clone(), &LossConfig::default(), &small_cfg(0), None).unwrap();
        assert_eq!(out, stack);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (model, data) = toy_dataset(6);
        let before = model.clone();
        let rc = RouterConfig { hidden: 32, windows: 4, ..RouterConfig::default() };
        let stack = RouterStack::new(6, 24, &rc, 1).unwrap();
        let run = || train_routers(&data, &model, stack.clone(), &LossConfig::default(), &small_cfg(6), None).unwrap();
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert!(log_a.last().unwrap().loss < log_a[0].loss);
        assert_eq!(model.table(), before.table());
    }

    #[test]
    fn warmup_must_fit() {
        let (model, data) = toy_dataset(6);
        let stack = RouterStack::new(6, 24, &RouterConfig::default(), 1).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let err = train_routers(&data, &model, stack, &LossConfig::default(), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn teacher_forcing_off_runs() {
        let (model, data) = toy_dataset(6);
        let rc = RouterConfig { hidden: 16, windows: 4, ..RouterConfig::default() };
        let stack = RouterStack::new(6, 24, &rc, 1).unwrap();
        let cfg = TrainConfig { teacher_forcing: false, ..small_cfg(2) };
        let (_, log) = train_routers(&data, &model, stack, &LossConfig::default(), &cfg, None).unwrap();
        assert_eq!(log.len(), 2);
    }
}
