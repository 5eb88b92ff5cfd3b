//! Synthetic backbone whose correct execution paths are known in closed form.
//!
//! State columns: 0 counter, 1 target, `2..2+L` per-layer flag codes (layer
//! `l`'s code on row `l` only), `2+L..2+2L` application counts, the rest
//! Gaussian distractors looked up from a seeded per-token table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::vocab::{self, Token};
use super::{argmax, check_tokens, Backbone, ExecutionPath};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Necessary,
    Redundant,
    Refine,
}

impl Role {
    pub fn id(self) -> u8 {
        match self {
            Role::Necessary => 0,
            Role::Redundant => 1,
            Role::Refine => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Role> {
        match id {
            0 => Some(Role::Necessary),
            1 => Some(Role::Redundant),
            2 => Some(Role::Refine),
            _ => None,
        }
    }

    pub fn allows(self, code: Code) -> bool {
        match self {
            Role::Necessary => code == Code::Once,
            Role::Redundant => matches!(code, Code::Once | Code::Idle | Code::Harm),
            Role::Refine => matches!(code, Code::Once | Code::Twice),
        }
    }
}

/// Per-instance flag for one layer: how many applications it tolerates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Code {
    /// Exactly one application.
    Once,
    /// Zero or one application; contributes nothing to the count.
    Idle,
    /// Any application overshoots.
    Harm,
    /// Exactly two applications.
    Twice,
}

impl Code {
    pub fn token(self) -> Token {
        match self {
            Code::Once => vocab::CODE_ONCE,
            Code::Idle => vocab::CODE_IDLE,
            Code::Harm => vocab::CODE_HARM,
            Code::Twice => vocab::CODE_TWICE,
        }
    }

    pub fn from_token(t: Token) -> Option<Code> {
        match t {
            vocab::CODE_ONCE => Some(Code::Once),
            vocab::CODE_IDLE => Some(Code::Idle),
            vocab::CODE_HARM => Some(Code::Harm),
            vocab::CODE_TWICE => Some(Code::Twice),
            _ => None,
        }
    }

    /// Value written into the flag column.
    pub fn value(self) -> f64 {
        match self {
            Code::Once => 1.0,
            Code::Idle => 0.0,
            Code::Harm => -1.0,
            Code::Twice => 2.0,
        }
    }

    fn from_value(v: f64) -> Code {
        match v.round() as i64 {
            0 => Code::Idle,
            -1 => Code::Harm,
            2 => Code::Twice,
            _ => Code::Once,
        }
    }

    /// Inclusive range of application counts that keep the answer correct.
    pub fn allowed(self) -> (u8, u8) {
        match self {
            Code::Once => (1, 1),
            Code::Idle => (0, 1),
            Code::Harm => (0, 0),
            Code::Twice => (2, 2),
        }
    }
}

/// Default layout: necessary layers first, up to two redundant, refine last.
pub fn default_roles(layers: usize) -> Vec<Role> {
    let refine = layers / 2;
    let redundant = 2.min((layers - refine) / 2);
    let necessary = layers - refine - redundant;
    let mut r = vec![Role::Necessary; necessary];
    r.extend(vec![Role::Redundant; redundant]);
    r.extend(vec![Role::Refine; refine]);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterModel {
    roles: Vec<Role>,
    dim: usize,
    /// `vocab x dim` distractor table, row-major.
    table: Vec<f64>,
}

pub const DISTRACTOR_SCALE: f64 = 1.0;

impl CounterModel {
    pub fn new(layers: usize, dim: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::input("counter model needs at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab::VOCAB_SIZE * dim)
            .map(|_| {
                // Rounded through 32 bits so checkpoints store the table exactly.
                let z: f64 = StandardNormal.sample(&mut rng);
                (DISTRACTOR_SCALE * z) as f32 as f64
            })
            .collect();
        Self::from_parts(default_roles(layers), dim, table)
    }

    pub fn from_parts(roles: Vec<Role>, dim: usize, table: Vec<f64>) -> Result<Self> {
        let layers = roles.len();
        if layers == 0 {
            return Err(Error::input("counter model needs at least one layer"));
        }
        if dim < Self::reserved_cols(layers) {
            return Err(Error::input(format!(
                "hidden size {dim} below the {} reserved columns for {layers} layers",
                Self::reserved_cols(layers)
            )));
        }
        if table.len() != vocab::VOCAB_SIZE * dim {
            return Err(Error::dim("counter embed", format!("table of {} values", table.len())));
        }
        Ok(CounterModel { roles, dim, table })
    }

    pub fn reserved_cols(layers: usize) -> usize {
        2 + 2 * layers
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Counter increment for an excess or harmful application. Exceeds the
    /// largest possible total shortfall, so overshoot can never be cancelled.
    pub fn penalty(&self) -> u64 {
        2 * self.roles.len() as u64 + 1
    }

    /// Number of answer values the head scores.
    pub fn answer_range(&self) -> usize {
        2 * self.roles.len() * self.penalty() as usize + 1
    }

    /// Effective per-layer codes of a prompt. Missing or disallowed flags read as `Once`.
    pub fn codes(&self, tokens: &[Token]) -> Vec<Code> {
        self.roles
            .iter()
            .enumerate()
            .map(|(i, role)| {
                tokens
                    .get(i + 1)
                    .and_then(|&t| Code::from_token(t))
                    .filter(|&c| role.allows(c))
                    .unwrap_or(Code::Once)
            })
            .collect()
    }

    pub fn target(&self, tokens: &[Token]) -> u64 {
        self.codes(tokens).iter().map(|c| c.allowed().0 as u64).sum()
    }

    pub fn allowed_counts(&self, tokens: &[Token]) -> Vec<(u8, u8)> {
        self.codes(tokens).iter().map(|c| c.allowed()).collect()
    }

    /// Whether executing the layers with these multiplicities answers correctly.
    pub fn counts_correct(&self, tokens: &[Token], counts: &[u8]) -> bool {
        self.allowed_counts(tokens)
            .iter()
            .zip(counts)
            .all(|(&(lo, hi), &c)| lo <= c && c <= hi)
    }

    /// Shortest valid correct path, as per-layer counts. Ties go to the
    /// lexicographically smallest count vector.
    pub fn oracle_labels(&self, tokens: &[Token]) -> Option<Vec<u8>> {
        let allowed = self.allowed_counts(tokens);
        let mut best: Option<Vec<u8>> = None;
        let mut counts: Vec<u8> = allowed.iter().map(|a| a.0).collect();
        loop {
            if ExecutionPath::from_counts(&counts).is_ok() {
                let len: u32 = counts.iter().map(|&c| c as u32).sum();
                let better = match &best {
                    None => true,
                    Some(b) => len < b.iter().map(|&c| c as u32).sum(),
                };
                if better {
                    best = Some(counts.clone());
                }
            }
            // Odometer over the allowed ranges, last layer fastest.
            let mut i = allowed.len();
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if counts[i] < allowed[i].1 {
                    counts[i] += 1;
                    break;
                }
                counts[i] = allowed[i].0;
            }
        }
    }

    fn layer_increment(&self, code: Code, applications: u8) -> f64 {
        let (lo, hi) = code.allowed();
        if applications > hi {
            self.penalty() as f64
        } else if applications <= lo {
            1.0
        } else {
            0.0
        }
    }

    fn counts_col(&self, layer: usize) -> usize {
        2 + self.roles.len() + layer - 1
    }
}

impl<F: Real> Backbone<F> for CounterModel {
    fn num_layers(&self) -> usize {
        self.roles.len()
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        vocab::VOCAB_SIZE
    }

    fn max_seq(&self) -> usize {
        256
    }

    fn embed(&self, tokens: &[Token]) -> Result<Tensor<F>> {
        check_tokens(tokens, vocab::VOCAB_SIZE, Backbone::<F>::max_seq(self))?;
        let layers = self.roles.len();
        let reserved = Self::reserved_cols(layers);
        let target = F::from_f64(self.target(tokens) as f64);
        let codes = self.codes(tokens);
        let mut h = Tensor::zeros(&[tokens.len(), self.dim]);
        for (r, &t) in tokens.iter().enumerate() {
            let src = &self.table[t as usize * self.dim..(t as usize + 1) * self.dim];
            let row = h.row_mut(r);
            for c in reserved..self.dim {
                row[c] = F::from_f64(src[c]);
            }
            row[1] = target;
            if (1..=layers).contains(&r) {
                row[2 + r - 1] = F::from_f64(codes[r - 1].value());
            }
        }
        Ok(h)
    }

    fn apply_layer(&self, layer: usize, state: &Tensor<F>) -> Result<Tensor<F>> {
        if layer == 0 || layer > self.roles.len() {
            return Err(Error::input(format!("layer {layer} outside 1..={}", self.roles.len())));
        }
        if state.cols() != self.dim {
            return Err(Error::dim("counter layer", format!("{} columns", state.cols())));
        }
        let code = if state.rows() > layer {
            Code::from_value(state.get(layer, 2 + layer - 1).as_f64())
        } else {
            Code::Once
        };
        let col = self.counts_col(layer);
        let applications = state.get(0, col).as_f64().round() as u8 + 1;
        let delta = F::from_f64(self.layer_increment(code, applications));
        let mut next = state.clone();
        for r in 0..next.rows() {
            let row = next.row_mut(r);
            row[0] = row[0] + delta;
            row[col] = row[col] + F::one();
        }
        Ok(next)
    }

    fn head(&self, state: &Tensor<F>) -> Result<Tensor<F>> {
        if state.cols() != self.dim || state.rows() == 0 {
            return Err(Error::dim("counter head", format!("{:?}", state.shape())));
        }
        let c = state.get(state.rows() - 1, 0).as_f64();
        let logits: Vec<f64> = (0..self.answer_range()).map(|v| -(c - v as f64).abs()).collect();
        Tensor::from_f64(&[1, logits.len()], &logits)
    }

    fn render_answer(&self, tokens: &[Token], logits: &Tensor<F>) -> String {
        let value = argmax(logits.row(0)) as u64;
        if tokens.first() == Some(&vocab::TAG_CHOICE) {
            match vocab::choice_options(tokens).iter().position(|&o| o == value) {
                Some(i) if i < 4 => format!("Answer: {}", vocab::LETTERS[i]),
                _ => "Answer: none".to_string(),
            }
        } else {
            format!("\\boxed{{{value}}}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{answer_with_path, forward_default, forward_with_path, vocab::*};

    fn prompt(codes: &[Code]) -> Vec<Token> {
        let mut t = vec![TAG_NUMERIC];
        t.extend(codes.iter().map(|c| c.token()));
        t.extend([SEP, 40, 41, 42]);
        t
    }

    #[test]
    fn role_layouts() {
        use Role::*;
        assert_eq!(default_roles(8), vec![Necessary, Necessary, Redundant, Redundant, Refine, Refine, Refine, Refine]);
        assert_eq!(default_roles(6), vec![Necessary, Necessary, Redundant, Refine, Refine, Refine]);
        assert_eq!(default_roles(4), vec![Necessary, Redundant, Refine, Refine]);
        assert_eq!(default_roles(2), vec![Necessary, Refine]);
        assert_eq!(default_roles(1), vec![Necessary]);
    }

    #[test]
    fn two_refine_flags_default_path_correct() {
        // L=2 has one necessary and one refine layer; both flagged once gives target 2.
        let m = CounterModel::new(2, 8, 1).unwrap();
        let t = prompt(&[Code::Once, Code::Once]);
        assert_eq!(m.target(&t), 2);
        let out = forward_default::<f32, _>(&m, &t).unwrap();
        assert_eq!(m.render_answer(&t, &out.logits), "\\boxed{2}");
    }

    #[test]
    fn undercount_fixed_by_repeat() {
        let m = CounterModel::new(6, 16, 3).unwrap();
        use Code::*;
        let t = prompt(&[Once, Once, Idle, Once, Twice, Once]);
        assert_eq!(m.target(&t), 6);
        let default = answer_with_path::<f32, _>(&m, &t, &ExecutionPath::default_path(6)).unwrap();
        assert_eq!(default, "\\boxed{5}");
        let fixed = ExecutionPath::new(vec![1, 2, 3, 4, 5, 5, 6], 6).unwrap();
        assert_eq!(answer_with_path::<f32, _>(&m, &t, &fixed).unwrap(), "\\boxed{6}");
        assert_eq!(m.oracle_labels(&t).unwrap(), vec![1, 1, 0, 1, 2, 1]);
    }

    #[test]
    fn harmful_layer_overshoots() {
        let m = CounterModel::new(8, 24, 3).unwrap();
        use Code::*;
        let t = prompt(&[Once, Once, Harm, Once, Once, Once, Once, Once]);
        let out = forward_default::<f64, _>(&m, &t).unwrap();
        assert_eq!(out.final_state().get(0, 0), 7.0 + m.penalty() as f64);
        let skip = ExecutionPath::from_counts(&[1, 1, 0, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(answer_with_path::<f64, _>(&m, &t, &skip).unwrap(), "\\boxed{7}");
    }

    #[test]
    fn disallowed_codes_read_as_once() {
        let m = CounterModel::new(8, 24, 3).unwrap();
        use Code::*;
        let t = prompt(&[Twice, Harm, Idle, Twice, Harm, Idle, Once, Once]);
        assert_eq!(m.codes(&t), vec![Once, Once, Idle, Once, Once, Once, Once, Once]);
    }

    #[test]
    fn choice_rendering() {
        let m = CounterModel::new(4, 12, 3).unwrap();
        let mut t = prompt(&[Code::Once; 4]);
        for v in [5u64, 4, 13, 3] {
            t.push(OPT);
            t.extend(digit_tokens(v));
        }
        t[0] = TAG_CHOICE;
        let out = forward_default::<f32, _>(&m, &t).unwrap();
        assert_eq!(m.render_answer(&t, &out.logits), "Answer: B");
        let short = ExecutionPath::new(vec![1, 2, 3], 4).unwrap();
        assert_eq!(answer_with_path::<f32, _>(&m, &t, &short).unwrap(), "Answer: D");
        let shorter = ExecutionPath::new(vec![1, 2], 4).unwrap();
        assert_eq!(answer_with_path::<f32, _>(&m, &t, &shorter).unwrap(), "Answer: none");
    }

    #[test]
    fn single_token_shapes() {
        let m = CounterModel::new(3, 10, 0).unwrap();
        let out = forward_default::<f32, _>(&m, &[TAG_NUMERIC]).unwrap();
        assert_eq!(out.states.len(), 4);
        assert!(out.states.iter().all(|s| s.shape() == [1, 10]));
    }

    #[test]
    fn rejects_bad_input() {
        let m = CounterModel::new(3, 10, 0).unwrap();
        assert!(Backbone::<f32>::embed(&m, &[]).is_err());
        assert!(Backbone::<f32>::embed(&m, &[64]).is_err());
        assert!(CounterModel::new(8, 10, 0).is_err());
        let bad = ExecutionPath::default_path(4);
        assert!(forward_with_path::<f32, _>(&m, &[1], &bad).is_err());
    }
}
