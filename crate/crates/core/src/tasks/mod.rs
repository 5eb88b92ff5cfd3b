//! Stratified synthetic corpora for the counter backbone, answer extraction and reward.

mod grade;

pub use grade::{extract_boxed, extract_letter, normalize_number, reward, RewardSpec};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::counter_roles;
use crate::backbone::vocab::{self, Token};
use crate::backbone::{Code, Role};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    A1,
    A2,
    D1,
    D2,
    D3,
    D4,
    D5,
}

impl Stratum {
    pub const ALL: [Stratum; 7] = [
        Stratum::A1,
        Stratum::A2,
        Stratum::D1,
        Stratum::D2,
        Stratum::D3,
        Stratum::D4,
        Stratum::D5,
    ];

    pub fn kind(self) -> Kind {
        match self {
            Stratum::A1 | Stratum::A2 => Kind::Multichoice,
            _ => Kind::Numeric,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::A1 => "A1",
            Stratum::A2 => "A2",
            Stratum::D1 => "D1",
            Stratum::D2 => "D2",
            Stratum::D3 => "D3",
            Stratum::D4 => "D4",
            Stratum::D5 => "D5",
        }
    }

    /// Instance-type mixture. Weights sum to 1.
    pub fn mixture(self) -> &'static [(InstanceType, f64)] {
        use InstanceType::*;
        match self {
            Stratum::A1 => &[(Clean, 0.94), (H1, 0.06)],
            Stratum::A2 => &[(Clean, 0.5), (H1, 0.3), (H2, 0.2)],
            Stratum::D1 => &[(Clean, 1.0)],
            Stratum::D2 => &[(Clean, 0.55), (H1, 0.2), (H2, 0.1), (F1, 0.15)],
            Stratum::D3 => &[(Clean, 0.35), (H1, 0.2), (H2, 0.15), (F1, 0.2), (H1F1, 0.1)],
            Stratum::D4 => &[(Clean, 0.15), (H1, 0.2), (H2, 0.2), (F1, 0.25), (H1F1, 0.15), (F2, 0.05)],
            Stratum::D5 => &[(H1, 0.2), (H2, 0.25), (F1, 0.3), (H1F1, 0.15), (F2, 0.1)],
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stratum::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown stratum {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Multichoice,
    Numeric,
}

/// Which redundant layers are harmful and which refine layers need a second pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstanceType {
    /// Redundant layers idle, refine layers once: the default path is correct.
    Clean,
    /// One harmful redundant layer, the other applied once.
    H1,
    /// Every redundant layer harmful.
    H2,
    /// One refine layer needs a repeat.
    F1,
    /// One harmful redundant layer and one repeated refine layer.
    H1F1,
    /// Two refine layers need a repeat.
    F2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub stratum: Stratum,
    pub tokens: Vec<Token>,
    pub gold: String,
    pub kind: Kind,
}

impl TaskInstance {
    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            kind: self.kind,
            gold: self.gold.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub layers: usize,
    pub filler_min: usize,
    pub filler_max: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            layers: 8,
            filler_min: 4,
            filler_max: 12,
        }
    }
}

/// Default stratum sizes (A1, A2, D1..D5) before scaling.
pub const BASE_SIZES: [usize; 7] = [400, 600, 200, 400, 600, 800, 1000];

/// Stratum sizes scaled by `factor`, each at least 1.
pub fn scaled_sizes(factor: f64) -> [usize; 7] {
    BASE_SIZES.map(|n| ((n as f64 * factor).round() as usize).max(1))
}

fn sample_type(stratum: Stratum, rng: &mut ChaCha8Rng) -> InstanceType {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mix = stratum.mixture();
    for &(t, w) in mix {
        acc += w;
        if u < acc {
            return t;
        }
    }
    mix.last().expect("non-empty mixture").0
}

/// Codes per layer for an instance type, degrading to what the layout supports.
fn assign_codes(kind: InstanceType, roles: &[Role], rng: &mut ChaCha8Rng) -> Vec<Code> {
    let redundant: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == Role::Redundant).collect();
    let refine: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == Role::Refine).collect();
    let mut codes: Vec<Code> = roles
        .iter()
        .map(|r| if *r == Role::Redundant { Code::Idle } else { Code::Once })
        .collect();
    let (harm, twice) = match kind {
        InstanceType::Clean => (0, 0),
        InstanceType::H1 => (1, 0),
        InstanceType::H2 => (2, 0),
        InstanceType::F1 => (0, 1),
        InstanceType::H1F1 => (1, 1),
        InstanceType::F2 => (0, 2),
    };
    if harm > 0 || twice > 0 {
        // Non-clean instances run every redundant layer that is not harmful.
        for &i in &redundant {
            codes[i] = Code::Once;
        }
    }
    let harm = harm.min(redundant.len());
    for &i in redundant.choose_multiple(rng, harm) {
        codes[i] = Code::Harm;
    }
    let twice = twice.min(refine.len());
    for &i in refine.choose_multiple(rng, twice) {
        codes[i] = Code::Twice;
    }
    codes
}

/// One instance, a pure function of (stratum, seed, index).
pub fn gen_instance(stratum: Stratum, seed: u64, index: usize, spec: &CorpusSpec) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &format!("tasks/{stratum}/{index}")));
    let roles = counter_roles(spec.layers);
    let kind = sample_type(stratum, &mut rng);
    let codes = assign_codes(kind, &roles, &mut rng);
    let target: u64 = codes.iter().map(|c| c.allowed().0 as u64).sum();
    let penalty = 2 * spec.layers as u64 + 1;

    let mut tokens = vec![match stratum.kind() {
        Kind::Multichoice => vocab::TAG_CHOICE,
        Kind::Numeric => vocab::TAG_NUMERIC,
    }];
    tokens.extend(codes.iter().map(|c| c.token()));
    tokens.push(vocab::SEP);
    let fillers = rng.gen_range(spec.filler_min..=spec.filler_max.max(spec.filler_min));
    let symbols = vocab::VOCAB_SIZE as Token - vocab::FILLER_START;
    for _ in 0..fillers {
        tokens.push(vocab::FILLER_START + rng.gen_range(0..symbols));
    }

    let gold = match stratum.kind() {
        Kind::Numeric => target.to_string(),
        Kind::Multichoice => {
            let mut options = [target, target + 1, target.saturating_sub(1), target + penalty];
            if target == 0 {
                options[2] = target + 2;
            }
            options.shuffle(&mut rng);
            for &o in &options {
                tokens.push(vocab::OPT);
                tokens.extend(vocab::digit_tokens(o));
            }
            let pos = options.iter().position(|&o| o == target).expect("target is an option");
            vocab::LETTERS[pos].to_string()
        }
    };

    TaskInstance {
        id: format!("{stratum}-{index:05}"),
        stratum,
        tokens,
        gold,
        kind: stratum.kind(),
    }
}

fn gen_many(stratum: Stratum, seed: u64, count: usize, spec: &CorpusSpec) -> Vec<TaskInstance> {
    (0..count).map(|i| gen_instance(stratum, seed, i, spec)).collect()
}

pub fn gen_multichoice(stratum: Stratum, seed: u64, count: usize, spec: &CorpusSpec) -> Result<Vec<TaskInstance>> {
    if stratum.kind() != Kind::Multichoice {
        return Err(Error::input(format!("{stratum} is not a multi-choice stratum")));
    }
    Ok(gen_many(stratum, seed, count, spec))
}

pub fn gen_numeric(stratum: Stratum, seed: u64, count: usize, spec: &CorpusSpec) -> Result<Vec<TaskInstance>> {
    if stratum.kind() != Kind::Numeric {
        return Err(Error::input(format!("{stratum} is not a numeric stratum")));
    }
    Ok(gen_many(stratum, seed, count, spec))
}

pub fn gen_stratum(stratum: Stratum, seed: u64, count: usize, spec: &CorpusSpec) -> Vec<TaskInstance> {
    gen_many(stratum, seed, count, spec)
}

/// Every stratum with the given sizes, in stratum order.
pub fn gen_corpus(sizes: &[usize; 7], seed: u64, spec: &CorpusSpec) -> Vec<TaskInstance> {
    Stratum::ALL
        .iter()
        .zip(sizes)
        .flat_map(|(&s, &n)| gen_many(s, seed, n, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{answer_with_path, CounterModel, ExecutionPath};

    fn spec(layers: usize) -> CorpusSpec {
        CorpusSpec { layers, ..Default::default() }
    }

    #[test]
    fn mixtures_sum_to_one() {
        for s in Stratum::ALL {
            let total: f64 = s.mixture().iter().map(|m| m.1).sum();
            assert!((total - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_numeric(Stratum::D3, 7, 20, &spec(8)).unwrap();
        let b = gen_numeric(Stratum::D3, 7, 20, &spec(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_numeric(Stratum::D3, 8, 20, &spec(8)).unwrap());
        assert!(gen_numeric(Stratum::A1, 7, 1, &spec(8)).is_err());
        assert!(gen_multichoice(Stratum::D1, 7, 1, &spec(8)).is_err());
    }

    #[test]
    fn choice_instances_have_four_options() {
        for s in [Stratum::A1, Stratum::A2] {
            for inst in gen_multichoice(s, 3, 50, &spec(8)).unwrap() {
                let opts = vocab::choice_options(&inst.tokens);
                assert_eq!(opts.len(), 4);
                let mut sorted = opts.clone();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted.len(), 4);
                assert!(["A", "B", "C", "D"].contains(&inst.gold.as_str()));
                assert!(inst.tokens.len() <= 64);
            }
        }
    }

    fn default_solve_rate(stratum: Stratum, layers: usize, n: usize) -> f64 {
        let m = CounterModel::new(layers, 2 + 2 * layers + 8, 0).unwrap();
        let insts = gen_stratum(stratum, 11, n, &spec(layers));
        let solved = insts
            .iter()
            .filter(|i| {
                let text = answer_with_path::<f32, _>(&m, &i.tokens, &ExecutionPath::default_path(layers)).unwrap();
                reward(&i.reward_spec(), &text) == 1.0
            })
            .count();
        solved as f64 / n as f64
    }

    #[test]
    fn default_path_difficulty_is_monotone() {
        let rates: Vec<f64> = [Stratum::D1, Stratum::D2, Stratum::D3, Stratum::D4, Stratum::D5]
            .iter()
            .map(|&s| default_solve_rate(s, 8, 400))
            .collect();
        assert_eq!(rates[0], 1.0);
        assert_eq!(rates[4], 0.0);
        for w in rates.windows(2) {
            assert!(w[1] < w[0], "{rates:?}");
        }
        assert!(default_solve_rate(Stratum::A1, 8, 400) >= 0.9);
    }

    #[test]
    fn every_instance_has_a_correct_path() {
        for layers in [4, 6, 8] {
            let m = CounterModel::new(layers, 2 + 2 * layers + 4, 0).unwrap();
            for s in Stratum::ALL {
                for inst in gen_stratum(s, 5, 40, &spec(layers)) {
                    let labels = m.oracle_labels(&inst.tokens).expect("solvable");
                    let path = ExecutionPath::from_counts(&labels).unwrap();
                    let text = answer_with_path::<f32, _>(&m, &inst.tokens, &path).unwrap();
                    assert_eq!(reward(&inst.reward_spec(), &text), 1.0, "{} {:?}", inst.id, labels);
                    if s == Stratum::D5 {
                        assert!(labels.iter().filter(|&&c| c == 2).count() <= 4);
                    }
                }
            }
        }
    }

    #[test]
    fn stratum_names_parse() {
        for s in Stratum::ALL {
            assert_eq!(s.name().parse::<Stratum>().unwrap(), s);
        }
        assert!("D9".parse::<Stratum>().is_err());
    }
}
