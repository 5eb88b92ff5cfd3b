//! Accuracy, executed layers and label agreement for routed inference, plus
//! the routing-pattern summaries and the control sweep.

mod metrics;
pub mod svg;

pub use metrics::{confusion, per_class_f1, ClassF1};

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_default, Backbone};
use crate::error::{Error, Result};
use crate::routing::{routed_forward, RouterStack};
use crate::search::SupervisionExample;
use crate::tasks::{reward, Stratum, TaskInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: Stratum,
    pub examples: usize,
    pub accuracy: f64,
    pub default_accuracy: f64,
    pub avg_executed_layers: f64,
    pub f1: Option<ClassF1>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub layers: usize,
    pub accuracy: f64,
    /// Accuracy of the plain forward pass on the same corpus.
    pub default_accuracy: f64,
    pub avg_executed_layers: f64,
    /// Agreement with oracle labels, when any were supplied.
    pub f1: Option<ClassF1>,
    pub strata: Vec<StratumReport>,
}

/// Per-instance outcome of routed inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub stratum: Stratum,
    pub decisions: Vec<u8>,
    pub reward: f64,
    pub default_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<Outcome>,
}

impl Evaluation {
    pub fn decisions_by_stratum(&self) -> Vec<(Stratum, Vec<u8>)> {
        self.outcomes.iter().map(|o| (o.stratum, o.decisions.clone())).collect()
    }
}

/// Routed inference on every instance. `oracle[i]`, when given, holds the
/// reference labels for `corpus[i]` (instances without one are left out of F1).
pub fn evaluate<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    stack: &RouterStack,
    corpus: &[TaskInstance],
    oracle: Option<&[Option<Vec<u8>>]>,
) -> Result<Evaluation> {
    if corpus.is_empty() {
        return Err(Error::input("empty evaluation corpus"));
    }
    if let Some(o) = oracle {
        if o.len() != corpus.len() {
            return Err(Error::dim("evaluate", format!("{} oracle entries for {} instances", o.len(), corpus.len())));
        }
    }
    let outcomes: Vec<Outcome> = corpus
        .par_iter()
        .map(|inst| {
            let spec = inst.reward_spec();
            let routed = routed_forward(backbone, stack, &inst.tokens, None)?;
            let fwd = forward_default(backbone, &inst.tokens)?;
            Ok(Outcome {
                stratum: inst.stratum,
                reward: reward(&spec, &backbone.render_answer(&inst.tokens, &routed.logits)),
                default_reward: reward(&spec, &backbone.render_answer(&inst.tokens, &fwd.logits)),
                decisions: routed.decisions,
            })
        })
        .collect::<Result<_>>()?;

    let idx: Vec<usize> = (0..outcomes.len()).collect();
    let (overall, _) = summarise(&outcomes, &idx, oracle)?;
    let mut groups: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, o) in outcomes.iter().enumerate() {
        groups.entry(o.stratum).or_default().push(i);
    }
    let mut strata = Vec::with_capacity(groups.len());
    for (stratum, members) in &groups {
        let (s, _) = summarise(&outcomes, members, oracle)?;
        strata.push(StratumReport { stratum: *stratum, ..s });
    }
    Ok(Evaluation {
        report: EvalReport {
            examples: overall.examples,
            layers: backbone.num_layers(),
            accuracy: overall.accuracy,
            default_accuracy: overall.default_accuracy,
            avg_executed_layers: overall.avg_executed_layers,
            f1: overall.f1,
            strata,
        },
        outcomes,
    })
}

fn summarise(
    outcomes: &[Outcome],
    members: &[usize],
    oracle: Option<&[Option<Vec<u8>>]>,
) -> Result<(StratumReport, usize)> {
    let n = members.len() as f64;
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    if let Some(o) = oracle {
        for &i in members {
            if let Some(labels) = &o[i] {
                pred.extend_from_slice(&outcomes[i].decisions);
                gold.extend_from_slice(labels);
            }
        }
    }
    let f1 = if gold.is_empty() { None } else { Some(per_class_f1(&pred, &gold)?) };
    let mean = |f: &dyn Fn(&Outcome) -> f64| members.iter().map(|&i| f(&outcomes[i])).sum::<f64>() / n;
    Ok((
        StratumReport {
            stratum: outcomes[members[0]].stratum,
            examples: members.len(),
            accuracy: mean(&|o| o.reward),
            default_accuracy: mean(&|o| o.default_reward),
            avg_executed_layers: mean(&|o| o.decisions.iter().map(|&d| d as f64).sum()),
            f1,
        },
        gold.len(),
    ))
}

/// Mean usage per (stratum, layer), strata in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageMatrix {
    pub strata: Vec<Stratum>,
    pub layers: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct UsageRow {
    stratum: Stratum,
    layer: usize,
    mean_usage: f64,
}

pub fn usage_heatmap(decisions: &[(Stratum, Vec<u8>)]) -> Result<UsageMatrix> {
    let layers = decisions.first().map(|(_, d)| d.len()).ok_or_else(|| Error::input("no decisions"))?;
    let mut sums: BTreeMap<Stratum, (Vec<f64>, usize)> = BTreeMap::new();
    for (s, d) in decisions {
        if d.len() != layers {
            return Err(Error::dim("usage_heatmap", format!("{} vs {layers} layers", d.len())));
        }
        let e = sums.entry(*s).or_insert_with(|| (vec![0.0; layers], 0));
        for (acc, &y) in e.0.iter_mut().zip(d) {
            *acc += y as f64;
        }
        e.1 += 1;
    }
    Ok(UsageMatrix {
        strata: sums.keys().copied().collect(),
        layers,
        values: sums.values().map(|(v, n)| v.iter().map(|x| x / *n as f64).collect()).collect(),
    })
}

impl UsageMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<UsageRow> = self
            .strata
            .iter()
            .zip(&self.values)
            .flat_map(|(s, v)| {
                v.iter().enumerate().map(move |(l, &m)| UsageRow { stratum: *s, layer: l + 1, mean_usage: m })
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// Early, middle and late layer ranges (0-based). The remainder of `L / 3`
/// goes to the later groups, so 8 layers split as 2, 3, 3.
pub fn depth_groups(layers: usize) -> Result<[Range<usize>; 3]> {
    if layers < 3 {
        return Err(Error::input(format!("{layers} layers cannot form three groups")));
    }
    let base = layers / 3;
    let rem = layers % 3;
    let sizes = [base, base + usize::from(rem >= 2), base + usize::from(rem >= 1)];
    let a = sizes[0];
    let b = a + sizes[1];
    Ok([0..a, a..b, b..layers])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub first_layer: usize,
    pub last_layer: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Distribution over examples of each group's mean usage.
pub fn depth_group_stats(decisions: &[Vec<u8>]) -> Result<Vec<GroupSummary>> {
    let layers = decisions.first().map(Vec::len).ok_or_else(|| Error::input("no decisions"))?;
    let groups = depth_groups(layers)?;
    let names = ["early", "middle", "late"];
    let mut out = Vec::with_capacity(3);
    for (range, name) in groups.iter().zip(names) {
        let mut means: Vec<f64> = decisions
            .iter()
            .map(|d| d[range.clone()].iter().map(|&y| y as f64).sum::<f64>() / range.len() as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        out.push(GroupSummary {
            group: name.to_string(),
            first_layer: range.start + 1,
            last_layer: range.end,
            mean: means.iter().sum::<f64>() / means.len() as f64,
            min: means[0],
            q1: quantile(&means, 0.25),
            median: quantile(&means, 0.5),
            q3: quantile(&means, 0.75),
            max: *means.last().unwrap(),
        });
    }
    Ok(out)
}

/// Linear interpolation between closest ranks of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub accuracy: f64,
    pub avg_layers: f64,
    pub skip: u64,
    pub execute: u64,
    pub repeat: u64,
}

/// Routed accuracy and depth at every control value in `grid`.
pub fn control_sweep<B: Backbone<f32> + ?Sized>(
    backbone: &B,
    stack: &RouterStack,
    corpus: &[TaskInstance],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if corpus.is_empty() {
        return Err(Error::input("empty evaluation corpus"));
    }
    if let Some(p) = grid.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
        return Err(Error::input(format!("control value {p} outside [-1, 1]")));
    }
    grid.iter()
        .map(|&p| {
            let runs: Vec<(f64, Vec<u8>)> = corpus
                .par_iter()
                .map(|inst| {
                    let out = routed_forward(backbone, stack, &inst.tokens, Some(p))?;
                    let r = reward(&inst.reward_spec(), &backbone.render_answer(&inst.tokens, &out.logits));
                    Ok((r, out.decisions))
                })
                .collect::<Result<_>>()?;
            let n = runs.len() as f64;
            let mut hist = [0u64; 3];
            for (_, d) in &runs {
                for &y in d {
                    hist[y as usize] += 1;
                }
            }
            Ok(SweepRow {
                p,
                accuracy: runs.iter().map(|r| r.0).sum::<f64>() / n,
                avg_layers: runs.iter().map(|r| r.1.iter().map(|&y| y as f64).sum::<f64>()).sum::<f64>() / n,
                skip: hist[0],
                execute: hist[1],
                repeat: hist[2],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelFractions {
    pub stratum: Stratum,
    pub examples: usize,
    pub skip: f64,
    pub execute: f64,
    pub repeat: f64,
}

pub fn label_distribution(dataset: &[SupervisionExample]) -> Result<Vec<LabelFractions>> {
    if dataset.is_empty() {
        return Err(Error::input("empty supervision dataset"));
    }
    let mut acc: BTreeMap<Stratum, ([u64; 3], usize)> = BTreeMap::new();
    for e in dataset {
        let slot = acc.entry(e.stratum).or_default();
        slot.1 += 1;
        for &y in &e.labels {
            slot.0[y.min(2) as usize] += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(stratum, (c, examples))| {
            let t = c.iter().sum::<u64>().max(1) as f64;
            LabelFractions {
                stratum,
                examples,
                skip: c[0] as f64 / t,
                execute: c[1] as f64 / t,
                repeat: c[2] as f64 / t,
            }
        })
        .collect())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}
