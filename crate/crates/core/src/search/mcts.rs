use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{legal_actions, EditAction};
use crate::backbone::{answer_with_path, Backbone, ExecutionPath, Token};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub simulations: usize,
    pub exploration: f64,
    pub length_penalty: f64,
    pub p_rand: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            simulations: 50,
            exploration: 1.8,
            length_penalty: 3.0,
            p_rand: 0.1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations == 0 {
            return Err(Error::Config("search.simulations must be at least 1".into()));
        }
        if self.exploration < 0.0 || self.length_penalty < 0.0 {
            return Err(Error::Config("search constants must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_rand) {
            return Err(Error::Config("search.p_rand must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `Q/v + c sqrt(ln V / v) - lambda |pi| / L`; unvisited nodes score +inf.
pub fn ucb_score(q: f64, v: u64, parent_visits: u64, path_len: usize, layers: usize, c: f64, lambda: f64) -> f64 {
    if v == 0 {
        return f64::INFINITY;
    }
    let v = v as f64;
    let big_v = (parent_visits.max(1)) as f64;
    q / v + c * (big_v.ln() / v).sqrt() - lambda * path_len as f64 / layers as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Distinct paths evaluated, including the default path.
    pub visited: usize,
    /// Backbone forward passes.
    pub inferences: usize,
    /// Simulations actually run.
    pub simulations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Option<ExecutionPath>,
    pub reward_default: f64,
    pub reward_best: f64,
    pub stats: SearchStats,
}

struct Node {
    path: Vec<usize>,
    visits: u64,
    total: f64,
    children: Vec<usize>,
    untried: Vec<EditAction>,
}

/// Monte Carlo tree search from the default path.
///
/// Rewards are memoised per distinct path. The best path is the shortest one
/// with reward 1; when the default path is already correct only strictly
/// shorter paths qualify. When the default path is wrong the search stops at
/// the first correct path.
pub fn mcts_search<B, R>(
    backbone: &B,
    tokens: &[Token],
    reward: R,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchResult>
where
    B: Backbone<f32> + ?Sized,
    R: Fn(&str) -> f64,
{
    cfg.validate()?;
    let layers = backbone.num_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut stats = SearchStats::default();

    let mut evaluate = |path: &[usize], stats: &mut SearchStats| -> Result<f64> {
        if let Some(&r) = cache.get(path) {
            return Ok(r);
        }
        let p = ExecutionPath::new(path.to_vec(), layers)?;
        let r = reward(&answer_with_path(backbone, tokens, &p)?);
        stats.inferences += 1;
        cache.insert(path.to_vec(), r);
        stats.visited = cache.len();
        Ok(r)
    };

    let root_path: Vec<usize> = (1..=layers).collect();
    let reward_default = evaluate(&root_path, &mut stats)?;
    let mut nodes = vec![Node {
        untried: legal_actions(&root_path, layers),
        path: root_path,
        visits: 0,
        total: 0.0,
        children: Vec::new(),
    }];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut best_len = if reward_default >= 1.0 { layers } else { usize::MAX };

    for _ in 0..cfg.simulations {
        stats.simulations += 1;
        let mut trail = vec![0usize];
        let mut cur = 0usize;
        while nodes[cur].untried.is_empty() && !nodes[cur].children.is_empty() {
            let kids = &nodes[cur].children;
            cur = if rng.gen::<f64>() < cfg.p_rand {
                kids[rng.gen_range(0..kids.len())]
            } else {
                let parent = nodes[cur].visits;
                let mut pick = kids[0];
                let mut score = f64::NEG_INFINITY;
                for &k in kids {
                    let n = &nodes[k];
                    let s = ucb_score(n.total, n.visits, parent, n.path.len(), layers, cfg.exploration, cfg.length_penalty);
                    if s > score {
                        score = s;
                        pick = k;
                    }
                }
                pick
            };
            trail.push(cur);
        }
        if !nodes[cur].untried.is_empty() {
            let action = nodes[cur].untried.remove(0);
            let path = action.apply(&nodes[cur].path);
            let id = nodes.len();
            nodes.push(Node {
                untried: legal_actions(&path, layers),
                path,
                visits: 0,
                total: 0.0,
                children: Vec::new(),
            });
            nodes[cur].children.push(id);
            cur = id;
            trail.push(cur);
        }
        let r = evaluate(&nodes[cur].path, &mut stats)?;
        for &n in &trail {
            nodes[n].visits += 1;
            nodes[n].total += r;
        }
        let len = nodes[cur].path.len();
        if r >= 1.0 && len < best_len {
            best_len = len;
            best = Some((nodes[cur].path.clone(), r));
        }
        if reward_default < 1.0 && best.is_some() {
            break;
        }
    }

    let (best, reward_best) = match best {
        Some((p, r)) => (Some(ExecutionPath::new(p, layers)?), r),
        None => (None, 0.0),
    };
    Ok(SearchResult {
        best,
        reward_default,
        reward_best,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Code, CounterModel};
    use crate::backbone::vocab::*;
    use crate::search::exhaustive_search;
    use crate::tasks::{reward, Kind, RewardSpec};

    fn numeric(codes: &[Code]) -> Vec<Token> {
        let mut t = vec![TAG_NUMERIC];
        t.extend(codes.iter().map(|c| c.token()));
        t.extend([SEP, 40, 41, 42, 43]);
        t
    }

    fn grader(m: &CounterModel, t: &[Token]) -> impl Fn(&str) -> f64 {
        let spec = RewardSpec { kind: Kind::Numeric, gold: m.target(t).to_string() };
        move |s: &str| reward(&spec, s)
    }

    #[test]
    fn ucb_arithmetic() {
        assert_eq!(ucb_score(1.0, 1, 1, 8, 8, 1.8, 3.0), -2.0);
        let s = ucb_score(2.0, 4, 16, 24, 32, 1.8, 3.0);
        assert!((s - (-0.2514)).abs() < 1e-3, "{s}");
        let plain = 2.0 / 4.0 + 1.8 * (16f64.ln() / 4.0).sqrt();
        assert_eq!(ucb_score(2.0, 4, 16, 24, 32, 1.8, 0.0), plain);
        assert_eq!(ucb_score(0.0, 0, 5, 3, 8, 1.8, 3.0), f64::INFINITY);
    }

    #[test]
    fn finds_shorter_path_when_default_correct() {
        use Code::*;
        let m = CounterModel::new(6, 20, 1).unwrap();
        let t = numeric(&[Once, Once, Idle, Once, Once, Once]);
        let res = mcts_search(&m, &t, grader(&m, &t), &SearchConfig::default(), 3).unwrap();
        assert_eq!(res.reward_default, 1.0);
        let best = res.best.unwrap();
        assert!(best.len() < 6);
        let oracle = exhaustive_search(&m, &t, grader(&m, &t)).unwrap();
        assert!(oracle.correct_set().contains(&best));
        assert_eq!(Some(best.len()), oracle.shortest);
    }

    #[test]
    fn repeats_refine_layer_and_stops() {
        use Code::*;
        let m = CounterModel::new(6, 20, 1).unwrap();
        let t = numeric(&[Once, Once, Once, Once, Twice, Once]);
        let res = mcts_search(&m, &t, grader(&m, &t), &SearchConfig::default(), 3).unwrap();
        assert_eq!(res.reward_default, 0.0);
        assert_eq!(res.best.unwrap().layers(), &[1, 2, 3, 4, 5, 5, 6]);
        // Stopped right after the first hit.
        assert!(res.stats.simulations < 50);
        assert!(res.stats.inferences <= res.stats.visited);
    }

    #[test]
    fn unsolvable_returns_none_within_budget() {
        let m = CounterModel::new(6, 20, 1).unwrap();
        let t = numeric(&[Code::Once; 6]);
        let res = mcts_search(&m, &t, |_| 0.0, &SearchConfig::default(), 0).unwrap();
        assert!(res.best.is_none());
        assert!(res.stats.visited <= 51);
        assert_eq!(res.stats.simulations, 50);
    }

    #[test]
    fn same_seed_same_result() {
        use Code::*;
        let m = CounterModel::new(8, 24, 1).unwrap();
        let t = numeric(&[Once, Once, Idle, Idle, Once, Once, Once, Once]);
        let a = mcts_search(&m, &t, grader(&m, &t), &SearchConfig::default(), 9).unwrap();
        let b = mcts_search(&m, &t, grader(&m, &t), &SearchConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
