//! Length-aware tree search over edited execution paths, and the supervision
//! dataset built from its results.

mod dataset;
mod mcts;

pub use crate::backbone::{validate_path, ExecutionPath, PathViolation};
pub use dataset::{
    generate_dataset, read_dataset, read_jsonl, write_dataset, write_jsonl, write_stats, StratumStats,
    SupervisionExample,
};
pub use mcts::{mcts_search, ucb_score, SearchConfig, SearchResult, SearchStats};

use std::collections::HashSet;

use crate::backbone::{answer_with_path, Backbone, Token, MAX_REPEAT};
use crate::error::{Error, Result};

/// One atomic path edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EditAction {
    /// Drop a layer that is executed once.
    Skip(usize),
    /// Run a layer that is executed once a second time.
    Repeat(usize),
}

impl EditAction {
    pub fn apply(self, path: &[usize]) -> Vec<usize> {
        let mut out = path.to_vec();
        match self {
            EditAction::Skip(l) => {
                if let Some(i) = out.iter().position(|&x| x == l) {
                    out.remove(i);
                }
            }
            EditAction::Repeat(l) => {
                if let Some(i) = out.iter().position(|&x| x == l) {
                    out.insert(i, l);
                }
            }
        }
        out
    }
}

/// Single edits that yield a different valid path: skips by ascending layer,
/// then repeats by ascending layer.
pub fn legal_actions(path: &[usize], layers: usize) -> Vec<EditAction> {
    let counts = layer_counts(path, layers);
    let once: Vec<usize> = (1..=layers).filter(|&l| counts[l - 1] == 1).collect();
    once.iter()
        .map(|&l| EditAction::Skip(l))
        .chain(once.iter().map(|&l| EditAction::Repeat(l)))
        .filter(|a| {
            let next = a.apply(path);
            next != path && validate_path(&next, layers).is_ok()
        })
        .collect()
}

fn layer_counts(path: &[usize], layers: usize) -> Vec<usize> {
    let mut c = vec![0; layers];
    for &l in path {
        if (1..=layers).contains(&l) {
            c[l - 1] += 1;
        }
    }
    c
}

/// Per-layer multiplicities: 0 skip, 1 execute, 2 repeat.
pub fn path_to_labels(path: &ExecutionPath) -> Vec<u8> {
    path.counts()
}

pub fn labels_to_path(labels: &[u8]) -> Result<ExecutionPath> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > MAX_REPEAT) {
        return Err(Error::input(format!("label {bad} outside {{0,1,2}}")));
    }
    Ok(ExecutionPath::from_counts(labels)?)
}

/// Every valid path for depth `layers`, ordered by count vector.
pub fn all_valid_paths(layers: usize) -> Vec<ExecutionPath> {
    let mut out = Vec::new();
    let mut counts = vec![0u8; layers];
    loop {
        if let Ok(p) = ExecutionPath::from_counts(&counts) {
            out.push(p);
        }
        let mut i = layers;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if counts[i] < MAX_REPEAT as u8 {
                counts[i] += 1;
                break;
            }
            counts[i] = 0;
        }
    }
}

/// Largest depth the exhaustive oracle accepts.
pub const EXHAUSTIVE_MAX_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ExhaustiveResult {
    pub correct: Vec<ExecutionPath>,
    pub shortest: Option<usize>,
    pub evaluated: usize,
}

impl ExhaustiveResult {
    pub fn correct_set(&self) -> HashSet<ExecutionPath> {
        self.correct.iter().cloned().collect()
    }
}

/// Evaluates every valid path once and keeps those with reward 1.
pub fn exhaustive_search<B, R>(backbone: &B, tokens: &[Token], reward: R) -> Result<ExhaustiveResult>
where
    B: Backbone<f32> + ?Sized,
    R: Fn(&str) -> f64,
{
    let layers = backbone.num_layers();
    if layers > EXHAUSTIVE_MAX_LAYERS {
        return Err(Error::input(format!(
            "exhaustive search refuses {layers} layers (limit {EXHAUSTIVE_MAX_LAYERS})"
        )));
    }
    let paths = all_valid_paths(layers);
    let evaluated = paths.len();
    let mut correct = Vec::new();
    for p in paths {
        if reward(&answer_with_path(backbone, tokens, &p)?) >= 1.0 {
            correct.push(p);
        }
    }
    let shortest = correct.iter().map(ExecutionPath::len).min();
    Ok(ExhaustiveResult { correct, shortest, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_path_actions() {
        let a = legal_actions(&[1, 2, 3, 4], 4);
        assert_eq!(a.len(), 8);
        for act in &a {
            assert!(validate_path(&act.apply(&[1, 2, 3, 4]), 4).is_ok());
        }
    }

    #[test]
    fn full_length_has_no_repeats() {
        let p = [1, 1, 2, 2, 3, 3];
        assert!(legal_actions(&p, 3).is_empty());
        let p = [1, 1, 2, 2, 3];
        assert_eq!(legal_actions(&p, 3), vec![EditAction::Skip(3), EditAction::Repeat(3)]);
    }

    #[test]
    fn skip_gap_excludes_neighbours() {
        // Layers 2 and 3 skipped: dropping 1 or 4 would leave three in a row absent.
        let a = legal_actions(&[1, 4, 5], 5);
        assert!(!a.contains(&EditAction::Skip(1)));
        assert!(!a.contains(&EditAction::Skip(4)));
        assert!(a.contains(&EditAction::Skip(5)));
    }

    #[test]
    fn labels_examples() {
        let p = ExecutionPath::new(vec![1, 2, 2, 4], 4).unwrap();
        assert_eq!(path_to_labels(&p), vec![1, 2, 0, 1]);
        assert_eq!(labels_to_path(&[1, 2, 0, 1]).unwrap(), p);
        assert_eq!(labels_to_path(&[1; 4]).unwrap(), ExecutionPath::default_path(4));
        assert!(matches!(labels_to_path(&[0, 0, 0, 1]), Err(Error::Constraint(_))));
        assert!(labels_to_path(&[3, 1]).is_err());
        assert_eq!(path_to_labels(&ExecutionPath::default_path(5)), vec![1; 5]);
    }

    #[test]
    fn exhaustive_refuses_deep_models() {
        let m = crate::backbone::CounterModel::new(7, 20, 0).unwrap();
        assert!(exhaustive_search(&m, &[1], |_| 1.0).is_err());
    }

    proptest! {
        #[test]
        fn actions_are_exactly_the_valid_single_edits(counts in proptest::collection::vec(0u8..3, 1..7)) {
            let layers = counts.len();
            if let Ok(p) = ExecutionPath::from_counts(&counts) {
                let acts = legal_actions(p.layers(), layers);
                // Brute force: change one count-1 layer to 0 or 2.
                let mut expected = Vec::new();
                for new in [0u8, 2] {
                    for l in 0..layers {
                        if counts[l] == 1 {
                            let mut c = counts.clone();
                            c[l] = new;
                            if ExecutionPath::from_counts(&c).is_ok() {
                                expected.push(if new == 0 { EditAction::Skip(l + 1) } else { EditAction::Repeat(l + 1) });
                            }
                        }
                    }
                }
                prop_assert_eq!(acts, expected);
            }
        }
    }
}
