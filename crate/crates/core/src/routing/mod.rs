//! Per-layer three-way routers over window-pooled hidden states.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    read_container, vocab::Token, write_container, AnyBackbone, Backbone, Block, Container,
};
use crate::error::{Error, Result};
use crate::numerics::{gelu_scalar, softmax_slice, Graph, Real, Tensor, Var};

pub const SKIP: u8 = 0;
pub const EXECUTE: u8 = 1;
pub const REPEAT: u8 = 2;
pub const NUM_ACTIONS: usize = 3;

/// Mean of each of `min(windows, T)` equal contiguous windows over the leading
/// tokens. Remainder tokens past the last full window are dropped.
pub fn window_pool<F: Real>(states: &Tensor<F>, windows: usize) -> Result<Tensor<F>> {
    let t = states.rows();
    if t == 0 || states.is_empty() {
        return Err(Error::input("cannot pool an empty sequence"));
    }
    if windows == 0 {
        return Err(Error::input("window count must be at least 1"));
    }
    let w = windows.min(t);
    let size = t / w;
    let d = states.cols();
    let inv = F::one() / F::from_usize(size);
    let mut out = Tensor::zeros(&[w, d]);
    for k in 0..w {
        let row = out.row_mut(k);
        for r in k * size..(k + 1) * size {
            for (o, &v) in row.iter_mut().zip(states.row(r)) {
                *o = *o + v;
            }
        }
        for o in row.iter_mut() {
            *o = *o * inv;
        }
    }
    Ok(out)
}

/// Index of the chosen action: execute if it is among the maxima, otherwise the
/// lowest tied index.
pub fn choose(probs: &[f64; NUM_ACTIONS]) -> u8 {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if probs[EXECUTE as usize] == max {
        EXECUTE
    } else {
        probs.iter().position(|&p| p == max).unwrap_or(EXECUTE as usize) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: u8,
    pub probs: [f64; NUM_ACTIONS],
}

impl Decision {
    pub fn from_probs(probs: [f64; NUM_ACTIONS]) -> Self {
        Decision { action: choose(&probs), probs }
    }
}

/// Blends router probabilities toward all-skip (p = -1), the router (p = -0.5),
/// all-execute (p = 0.5) or all-repeat (p = 1), linearly between anchors.
pub fn control_interpolate(router: [f64; NUM_ACTIONS], p: f64) -> Result<[f64; NUM_ACTIONS]> {
    if !(-1.0..=1.0).contains(&p) {
        return Err(Error::input(format!("control parameter {p} outside [-1, 1]")));
    }
    let skip = [1.0, 0.0, 0.0];
    let exec = [0.0, 1.0, 0.0];
    let repeat = [0.0, 0.0, 1.0];
    let blend = |a: [f64; 3], b: [f64; 3], t: f64| -> [f64; 3] {
        [
            (1.0 - t) * a[0] + t * b[0],
            (1.0 - t) * a[1] + t * b[1],
            (1.0 - t) * a[2] + t * b[2],
        ]
    };
    Ok(if p <= -0.5 {
        blend(skip, router, (p + 1.0) / 0.5)
    } else if p <= 0.5 {
        blend(router, exec, p + 0.5)
    } else {
        blend(exec, repeat, (p - 0.5) / 0.5)
    })
}

/// Linear-GELU-Linear classifier producing (skip, execute, repeat) logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub w_in: Tensor<f32>,
    pub b_in: Tensor<f32>,
    pub w_out: Tensor<f32>,
    pub b_out: Tensor<f32>,
}

impl Router {
    pub fn xavier(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
            Tensor::from_f64(&[rows, cols], &v).expect("shape matches")
        };
        let w_in = uniform(dim, hidden);
        let w_out = uniform(hidden, NUM_ACTIONS);
        Router {
            w_in,
            b_in: Tensor::zeros(&[hidden]),
            w_out,
            b_out: Tensor::zeros(&[NUM_ACTIONS]),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Router {
            w_in: Tensor::zeros(&[dim, hidden]),
            b_in: Tensor::zeros(&[hidden]),
            w_out: Tensor::zeros(&[hidden, NUM_ACTIONS]),
            b_out: Tensor::zeros(&[NUM_ACTIONS]),
        }
    }

    /// Router that always prefers `action` by a wide margin.
    pub fn constant(dim: usize, hidden: usize, action: u8) -> Self {
        let mut r = Router::zeros(dim, hidden);
        r.b_out.data_mut()[action as usize] = 10.0;
        r
    }

    /// Raw logits, one row per pooled window.
    pub fn window_logits(&self, pooled: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = pooled.matmul(&self.w_in)?;
        let b = self.b_in.data();
        for r in 0..h.rows() {
            for (v, &bias) in h.row_mut(r).iter_mut().zip(b) {
                *v = gelu_scalar(*v + bias);
            }
        }
        let mut z = h.matmul(&self.w_out)?;
        for r in 0..z.rows() {
            for (v, &bias) in z.row_mut(r).iter_mut().zip(self.b_out.data()) {
                *v = *v + bias;
            }
        }
        Ok(z)
    }

    /// Mean of window logits.
    pub fn logits(&self, pooled: &Tensor<f32>) -> Result<[f64; NUM_ACTIONS]> {
        if pooled.rows() == 0 || pooled.is_empty() {
            return Err(Error::input("no pooled windows"));
        }
        let z = self.window_logits(pooled)?;
        let mut mean = [0.0f64; NUM_ACTIONS];
        for r in 0..z.rows() {
            for (m, &v) in mean.iter_mut().zip(z.row(r)) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= z.rows() as f64;
        }
        Ok(mean)
    }

    pub fn params(&self) -> [&Tensor<f32>; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }
}

/// Scores pooled windows with a router and aggregates logits by mean.
pub fn route_layer(router: &Router, pooled: &Tensor<f32>) -> Result<Decision> {
    let mut p = router.logits(pooled)?;
    softmax_slice(&mut p);
    Ok(Decision::from_probs(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Router reads the state entering its layer.
    Previous,
    /// Router reads the embedding state.
    First,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterStack {
    pub routers: Vec<Router>,
    pub windows: usize,
    pub mode: InputMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub hidden: usize,
    pub windows: usize,
    pub mode: InputMode,
    pub frequency_bias: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            hidden: 128,
            windows: 8,
            mode: InputMode::Previous,
            frequency_bias: false,
        }
    }
}

impl RouterStack {
    /// Xavier-uniform weights and zero biases.
    pub fn new(layers: usize, dim: usize, cfg: &RouterConfig, seed: u64) -> Result<Self> {
        if cfg.windows == 0 || cfg.hidden == 0 || layers == 0 {
            return Err(Error::Config("router sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(RouterStack {
            routers: (0..layers).map(|_| Router::xavier(dim, cfg.hidden, &mut rng)).collect(),
            windows: cfg.windows,
            mode: cfg.mode,
        })
    }

    /// Output biases set to log class frequencies.
    pub fn set_frequency_bias(&mut self, counts: [u64; NUM_ACTIONS]) {
        let total: u64 = counts.iter().sum();
        for r in &mut self.routers {
            for (b, &c) in r.b_out.data_mut().iter_mut().zip(&counts) {
                *b = ((c.max(1)) as f64 / total.max(1) as f64).ln() as f32;
            }
        }
    }

    /// Stack whose every router picks `action` on any input.
    pub fn constant(layers: usize, dim: usize, hidden: usize, windows: usize, action: u8) -> Self {
        RouterStack {
            routers: (0..layers).map(|_| Router::constant(dim, hidden, action)).collect(),
            windows,
            mode: InputMode::Previous,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.routers.len()
    }

    pub fn hidden(&self) -> usize {
        self.routers[0].b_in.len()
    }

    pub fn dim(&self) -> usize {
        self.routers[0].w_in.rows()
    }

    /// All trainable tensors, four per router in order w_in, b_in, w_out, b_out.
    pub fn params(&self) -> Vec<Tensor<f32>> {
        self.routers
            .iter()
            .flat_map(|r| r.params().into_iter().cloned())
            .collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor<f32>>) -> Result<()> {
        if params.len() != 4 * self.routers.len() {
            return Err(Error::dim("router params", format!("{} tensors", params.len())));
        }
        let mut it = params.into_iter();
        for r in &mut self.routers {
            for slot in [&mut r.w_in, &mut r.b_in, &mut r.w_out, &mut r.b_out] {
                let t = it.next().expect("length checked");
                if t.shape() != slot.shape() {
                    return Err(Error::dim("router params", format!("{:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
            }
        }
        Ok(())
    }

    /// Weight-decay mask matching [`RouterStack::params`].
    pub fn decay_mask(&self) -> Vec<bool> {
        self.routers.iter().flat_map(|_| [true, false, true, false]).collect()
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mode = match self.mode {
            InputMode::Previous => 0.0,
            InputMode::First => 1.0,
        };
        let mut out = vec![Block {
            name: "router.config".into(),
            dims: vec![3],
            data: vec![self.windows as f32, self.hidden() as f32, mode],
        }];
        for (i, r) in self.routers.iter().enumerate() {
            for (name, t) in ["w_in", "b_in", "w_out", "b_out"].iter().zip(r.params()) {
                out.push(Block::from_tensor(format!("router.{}.{name}", i + 1), t));
            }
        }
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = &c.block("router.config")?.data;
        if cfg.len() != 3 {
            return Err(Error::Format("router.config needs 3 values".into()));
        }
        let mode = if cfg[2] == 0.0 { InputMode::Previous } else { InputMode::First };
        let mut routers = Vec::new();
        for l in 1..=c.header.layers as usize {
            let get = |n: &str| c.block(&format!("router.{l}.{n}"))?.to_tensor::<f32>();
            routers.push(Router {
                w_in: get("w_in")?,
                b_in: get("b_in")?,
                w_out: get("w_out")?,
                b_out: get("b_out")?,
            });
        }
        if routers.is_empty() {
            return Err(Error::Format("no routers stored".into()));
        }
        Ok(RouterStack {
            routers,
            windows: cfg[0] as usize,
            mode,
        })
    }
}

/// Writes the backbone followed by router blocks into one container.
pub fn save_routed(path: &Path, backbone: &AnyBackbone, stack: &RouterStack) -> Result<()> {
    let mut c = backbone.to_container();
    c.blocks.extend(stack.blocks());
    write_container(path, &c)
}

pub fn load_routed(path: &Path) -> Result<(AnyBackbone, RouterStack)> {
    let c = read_container(path)?;
    Ok((AnyBackbone::from_container(&c)?, RouterStack::from_container(&c)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedOutput {
    pub logits: Tensor<f32>,
    pub decisions: Vec<u8>,
    pub probs: Vec<[f64; NUM_ACTIONS]>,
    pub executed: usize,
}

/// Greedy routed inference. With `control`, every layer's probabilities are
/// blended by [`control_interpolate`] before the decision.
pub fn routed_forward<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    stack: &RouterStack,
    tokens: &[Token],
    control: Option<f64>,
) -> Result<RoutedOutput> {
    let layers = backbone.num_layers();
    if stack.num_layers() != layers {
        return Err(Error::input(format!(
            "{} routers for {layers} layers",
            stack.num_layers()
        )));
    }
    let first = backbone.embed(tokens)?;
    let first_pooled = window_pool(&first, stack.windows)?;
    let mut h = first;
    let mut decisions = Vec::with_capacity(layers);
    let mut probs = Vec::with_capacity(layers);
    for l in 1..=layers {
        let pooled = match stack.mode {
            InputMode::Previous => window_pool(&h, stack.windows)?,
            InputMode::First => first_pooled.clone(),
        };
        let mut d = route_layer(&stack.routers[l - 1], &pooled)?;
        if let Some(p) = control {
            d = Decision::from_probs(control_interpolate(d.probs, p)?);
        }
        for _ in 0..d.action {
            h = backbone.apply_layer(l, &h)?;
        }
        decisions.push(d.action);
        probs.push(d.probs);
    }
    let logits = backbone.head(&h)?;
    let executed = decisions.iter().map(|&d| d as usize).sum();
    Ok(RoutedOutput {
        logits,
        decisions,
        probs,
        executed,
    })
}

/// Router logits on the tape for a batch: `pooled` stacks every example's
/// windows, `groups` gives each example's window count. Returns one row per example.
pub fn router_logits_on(
    g: &mut Graph<f32>,
    params: &[Var],
    pooled: Var,
    groups: &[usize],
) -> Result<Var> {
    let h = g.matmul(pooled, params[0])?;
    let h = g.add_bias(h, params[1])?;
    let h = g.gelu(h);
    let z = g.matmul(h, params[2])?;
    let z = g.add_bias(z, params[3])?;
    g.group_mean(z, groups)
}
