use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mcts_search, path_to_labels, SearchConfig};
use crate::backbone::{Backbone, Token};
use crate::error::{Error, Result};
use crate::seed;
use crate::tasks::{reward, Stratum, TaskInstance};

/// Prompt, per-layer labels and gold answer, plus search provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionExample {
    pub id: String,
    pub stratum: Stratum,
    pub tokens: Vec<Token>,
    pub labels: Vec<u8>,
    pub gold: String,
    pub reward_default: f64,
    pub reward_best: f64,
    pub path_len: usize,
}

/// One row of the per-stratum search summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub stratum: Stratum,
    pub original: usize,
    pub sampled: usize,
    pub visited: usize,
    pub inferences: usize,
    pub layers_saved: f64,
}

/// Searches every instance in parallel and keeps the ones whose best path is at
/// least as rewarding as the default path. Output order follows the corpus.
pub fn generate_dataset<B>(
    corpus: &[TaskInstance],
    backbone: &B,
    cfg: &SearchConfig,
    root_seed: u64,
) -> Result<(Vec<SupervisionExample>, Vec<StratumStats>)>
where
    B: Backbone<f32> + ?Sized,
{
    let layers = backbone.num_layers();
    let results: Vec<_> = corpus
        .par_iter()
        .map(|inst| {
            let spec = inst.reward_spec();
            let s = seed::derive(root_seed, &format!("search/{}", inst.id));
            let res = mcts_search(backbone, &inst.tokens, |t| reward(&spec, t), cfg, s)?;
            Ok((inst, res))
        })
        .collect::<Result<_>>()?;

    let mut examples = Vec::new();
    let mut by_stratum: BTreeMap<Stratum, (usize, usize, usize, usize)> = BTreeMap::new();
    for (inst, res) in &results {
        let e = by_stratum.entry(inst.stratum).or_default();
        e.0 += 1;
        e.2 += res.stats.visited;
        e.3 += res.stats.inferences;
        if let Some(best) = &res.best {
            if res.reward_best >= res.reward_default {
                e.1 += 1;
                examples.push(SupervisionExample {
                    id: inst.id.clone(),
                    stratum: inst.stratum,
                    tokens: inst.tokens.clone(),
                    labels: path_to_labels(best),
                    gold: inst.gold.clone(),
                    reward_default: res.reward_default,
                    reward_best: res.reward_best,
                    path_len: best.len(),
                });
            }
        }
    }
    // Saved layers are signed: repeats count as negative savings.
    let mut stats = Vec::new();
    for (stratum, (original, sampled, visited, inferences)) in &by_stratum {
        let saved: f64 = examples
            .iter()
            .filter(|e| e.stratum == *stratum)
            .map(|e| layers as f64 - e.path_len as f64)
            .sum();
        stats.push(StratumStats {
            stratum: *stratum,
            original: *original,
            sampled: *sampled,
            visited: *visited,
            inferences: *inferences,
            layers_saved: if *sampled == 0 { 0.0 } else { saved / *sampled as f64 },
        });
    }
    Ok((examples, stats))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[SupervisionExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SupervisionExample>> {
    read_jsonl(path)
}

pub fn write_stats(path: &Path, stats: &[StratumStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    w.write_record(["stratum", "original", "sampled", "visited", "inferences", "layers_saved"])
        .map_err(|e| Error::input(e.to_string()))?;
    for s in stats {
        w.write_record([
            s.stratum.to_string(),
            s.original.to_string(),
            s.sampled.to_string(),
            s.visited.to_string(),
            s.inferences.to_string(),
            format!("{:.4}", s.layers_saved),
        ])
        .map_err(|e| Error::input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
