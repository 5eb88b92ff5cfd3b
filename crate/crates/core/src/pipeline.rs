//! Pipeline stages shared by the command line subcommands and `all`.
//!
//! Every stage draws its randomness from `seed::derive(run.seed, <stage>)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    copy_task_corpus, pretrain_backbone, save_checkpoint, AnyBackbone, CounterModel, PretrainReport,
    TinyTransformer,
};
use crate::config::{BackboneKind, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{
    control_sweep, depth_group_stats, evaluate, label_distribution, svg, usage_heatmap, write_csv, write_json,
    EvalReport, Evaluation, SweepRow,
};
use crate::routing::{save_routed, InputMode, RouterConfig, RouterStack};
use crate::search::{generate_dataset, write_dataset, write_jsonl, write_stats, StratumStats, SupervisionExample};
use crate::seed;
use crate::supervision::{class_counts, train_routers, write_epoch_log, EpochMetrics, LossConfig, LossMode};
use crate::tasks::{gen_corpus, scaled_sizes, Kind, TaskInstance};

/// Sizes the global worker pool once. Later calls are ignored.
pub fn init_workers(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

pub fn build_backbone(cfg: &PipelineConfig) -> Result<(AnyBackbone, Option<PretrainReport>)> {
    let b = &cfg.backbone;
    let s = seed::derive(cfg.run.seed, "backbone");
    match b.kind {
        BackboneKind::Counter => Ok((AnyBackbone::Counter(CounterModel::new(b.layers, b.dim, s)?), None)),
        BackboneKind::Transformer => {
            let p = &cfg.pretrain;
            let model = TinyTransformer::<f32>::new(b.transformer(), s)?;
            let train = copy_task_corpus(p.train_examples, p.copy_len, seed::derive(cfg.run.seed, "pretrain/train"));
            let heldout =
                copy_task_corpus(p.heldout_examples, p.copy_len, seed::derive(cfg.run.seed, "pretrain/heldout"));
            let (model, report) = pretrain_backbone(model, &train, &heldout, p, seed::derive(cfg.run.seed, "pretrain"))?;
            Ok((AnyBackbone::Transformer(model), Some(report)))
        }
    }
}

pub fn generate_corpus(cfg: &PipelineConfig) -> Vec<TaskInstance> {
    gen_corpus(&scaled_sizes(cfg.tasks.scale), seed::derive(cfg.run.seed, "tasks"), &cfg.corpus_spec())
}

/// Splits by position: every `every`-th instance goes to the held-out side.
pub fn split_corpus(corpus: &[TaskInstance], every: usize) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let (held, train): (Vec<_>, Vec<_>) = corpus.iter().cloned().enumerate().partition(|(i, _)| i % every == every - 1);
    (train.into_iter().map(|p| p.1).collect(), held.into_iter().map(|p| p.1).collect())
}

/// Shortest correct labels per instance; only the counter backbone has them.
pub fn oracle_labels(backbone: &AnyBackbone, corpus: &[TaskInstance]) -> Option<Vec<Option<Vec<u8>>>> {
    match backbone {
        AnyBackbone::Counter(m) => Some(corpus.iter().map(|i| m.oracle_labels(&i.tokens)).collect()),
        AnyBackbone::Transformer(_) => None,
    }
}

/// Oracle-labelled supervision tuples, used to score routers during training.
pub fn oracle_examples(backbone: &AnyBackbone, corpus: &[TaskInstance]) -> Option<Vec<SupervisionExample>> {
    let labels = oracle_labels(backbone, corpus)?;
    let layers = backbone_layers(backbone);
    Some(
        corpus
            .iter()
            .zip(labels)
            .filter_map(|(inst, l)| {
                let labels = l?;
                Some(SupervisionExample {
                    id: inst.id.clone(),
                    stratum: inst.stratum,
                    tokens: inst.tokens.clone(),
                    path_len: labels.iter().map(|&y| y as usize).sum(),
                    labels,
                    gold: inst.gold.clone(),
                    reward_default: f64::NAN,
                    reward_best: 1.0,
                })
            })
            .filter(|e| e.labels.len() == layers)
            .collect(),
    )
}

fn backbone_layers(b: &AnyBackbone) -> usize {
    use crate::backbone::Backbone;
    Backbone::<f32>::num_layers(b)
}

fn backbone_dim(b: &AnyBackbone) -> usize {
    use crate::backbone::Backbone;
    Backbone::<f32>::hidden_dim(b)
}

pub fn run_search(
    cfg: &PipelineConfig,
    backbone: &AnyBackbone,
    corpus: &[TaskInstance],
) -> Result<(Vec<SupervisionExample>, Vec<StratumStats>)> {
    generate_dataset(corpus, backbone, &cfg.search, seed::derive(cfg.run.seed, "search"))
}

/// Fresh routers trained on `dataset`, scored against `heldout` when given.
pub fn train_stack(
    cfg: &PipelineConfig,
    backbone: &AnyBackbone,
    dataset: &[SupervisionExample],
    router: &RouterConfig,
    loss: &LossConfig,
    heldout: Option<&[SupervisionExample]>,
) -> Result<(RouterStack, Vec<EpochMetrics>)> {
    let mut stack = RouterStack::new(
        backbone_layers(backbone),
        backbone_dim(backbone),
        router,
        seed::derive(cfg.run.seed, "router"),
    )?;
    if router.frequency_bias && !dataset.is_empty() {
        stack.set_frequency_bias(class_counts(dataset).as_array());
    }
    let mut train = cfg.train;
    train.seed = seed::derive(cfg.run.seed, "train");
    train_routers(dataset, backbone, stack, loss, &train, heldout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub loss: LossMode,
    pub windows: usize,
    pub input: InputMode,
    pub accuracy: f64,
    pub avg_layers: f64,
    pub skip_f1: f64,
    pub exec_f1: f64,
    pub repeat_f1: f64,
    pub macro_f1: f64,
}

impl AblationRow {
    fn new(variant: &str, router: &RouterConfig, loss: &LossConfig, report: &EvalReport) -> Self {
        let f1 = report.f1.unwrap_or_default();
        AblationRow {
            variant: variant.to_string(),
            loss: loss.mode,
            windows: router.windows,
            input: router.mode,
            accuracy: report.accuracy,
            avg_layers: report.avg_executed_layers,
            skip_f1: f1.skip,
            exec_f1: f1.execute,
            repeat_f1: f1.repeat,
            macro_f1: f1.macro_f1,
        }
    }
}

/// Loss, window-count and router-input variants against the configured router.
pub fn run_ablations(
    cfg: &PipelineConfig,
    backbone: &AnyBackbone,
    dataset: &[SupervisionExample],
    heldout: &[TaskInstance],
    baseline: &EvalReport,
) -> Result<Vec<AblationRow>> {
    let oracle = oracle_labels(backbone, heldout);
    let mut rows = vec![AblationRow::new("configured", &cfg.router, &cfg.loss, baseline)];
    let loss_variant = |mode| LossConfig { mode, ..cfg.loss };
    let variants: Vec<(&str, RouterConfig, LossConfig)> = vec![
        ("focal", cfg.router, loss_variant(LossMode::Focal)),
        ("weighted-ce", cfg.router, loss_variant(LossMode::WeightedCe)),
        ("plain-ce", cfg.router, loss_variant(LossMode::PlainCe)),
        ("windows-1", RouterConfig { windows: 1, ..cfg.router }, cfg.loss),
        ("windows-8", RouterConfig { windows: 8, ..cfg.router }, cfg.loss),
        ("input-first", RouterConfig { mode: InputMode::First, ..cfg.router }, cfg.loss),
    ];
    for (name, router, loss) in variants {
        let (stack, _) = train_stack(cfg, backbone, dataset, &router, &loss, None)?;
        let ev = evaluate(backbone, &stack, heldout, oracle.as_deref())?;
        rows.push(AblationRow::new(name, &router, &loss, &ev.report));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub train_family: Kind,
    pub eval_family: Kind,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub default_accuracy: f64,
    pub in_domain_accuracy: f64,
    pub ood_accuracy: f64,
    /// `ood_accuracy - in_domain_accuracy`.
    pub delta: f64,
    pub in_domain_avg_layers: f64,
    pub ood_avg_layers: f64,
}

/// Routers trained on multiple-choice strata, evaluated on numeric ones, next
/// to routers trained on the numeric strata themselves.
pub fn run_ood(
    cfg: &PipelineConfig,
    backbone: &AnyBackbone,
    dataset: &[SupervisionExample],
    heldout: &[TaskInstance],
) -> Result<OodReport> {
    let (src, dst) = (Kind::Multichoice, Kind::Numeric);
    let pick = |k: Kind| dataset.iter().filter(|e| e.stratum.kind() == k).cloned().collect::<Vec<_>>();
    let (ood_data, in_data) = (pick(src), pick(dst));
    let target: Vec<TaskInstance> = heldout.iter().filter(|i| i.stratum.kind() == dst).cloned().collect();
    if ood_data.is_empty() || in_data.is_empty() || target.is_empty() {
        return Err(Error::input("out-of-distribution run needs both stratum families"));
    }
    let (ood_stack, _) = train_stack(cfg, backbone, &ood_data, &cfg.router, &cfg.loss, None)?;
    let (in_stack, _) = train_stack(cfg, backbone, &in_data, &cfg.router, &cfg.loss, None)?;
    let ood = evaluate(backbone, &ood_stack, &target, None)?.report;
    let ind = evaluate(backbone, &in_stack, &target, None)?.report;
    Ok(OodReport {
        train_family: src,
        eval_family: dst,
        train_examples: ood_data.len(),
        eval_examples: target.len(),
        default_accuracy: ind.default_accuracy,
        in_domain_accuracy: ind.accuracy,
        ood_accuracy: ood.accuracy,
        delta: ood.accuracy - ind.accuracy,
        in_domain_avg_layers: ind.avg_executed_layers,
        ood_avg_layers: ood.avg_executed_layers,
    })
}

/// Routing-pattern summaries of an evaluation and of the search labels.
pub fn write_analysis(dir: &Path, ev: &Evaluation, dataset: &[SupervisionExample], with_svg: bool) -> Result<()> {
    let usage = usage_heatmap(&ev.decisions_by_stratum())?;
    usage.write_csv(&dir.join("usage.csv"))?;
    let decisions: Vec<Vec<u8>> = ev.outcomes.iter().map(|o| o.decisions.clone()).collect();
    write_csv(&dir.join("depth_groups.csv"), &depth_group_stats(&decisions)?)?;
    if !dataset.is_empty() {
        write_csv(&dir.join("label_distribution.csv"), &label_distribution(dataset)?)?;
        let label_usage = usage_heatmap(&dataset.iter().map(|e| (e.stratum, e.labels.clone())).collect::<Vec<_>>())?;
        label_usage.write_csv(&dir.join("label_usage.csv"))?;
        if with_svg {
            let names: Vec<String> = label_usage.strata.iter().map(|s| s.to_string()).collect();
            svg::write_svg(
                &dir.join("label_usage.svg"),
                &svg::heatmap("search label usage per layer", &names, &label_usage.values, 0.0, 2.0),
            )?;
        }
    }
    if with_svg {
        let names: Vec<String> = usage.strata.iter().map(|s| s.to_string()).collect();
        svg::write_svg(
            &dir.join("usage.svg"),
            &svg::heatmap("routed usage per layer", &names, &usage.values, 0.0, 2.0),
        )?;
    }
    Ok(())
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow], with_svg: bool) -> Result<()> {
    write_csv(&dir.join("sweep.csv"), rows)?;
    if with_svg {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.avg_layers, r.accuracy)).collect();
        svg::write_svg(
            &dir.join("sweep.svg"),
            &svg::line_chart("control sweep", "average layers", "accuracy", &pts),
        )?;
    }
    Ok(())
}

/// Headline numbers of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub train_instances: usize,
    pub heldout_instances: usize,
    pub examples: usize,
    pub report: EvalReport,
    pub ood: Option<OodReport>,
}

/// Corpus, backbone, search, training, evaluation, analysis and sweep.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;

    let corpus = generate_corpus(cfg);
    let (train, heldout) = split_corpus(&corpus, cfg.tasks.holdout_every);
    write_jsonl(&out.join("corpus.jsonl"), &train)?;
    write_jsonl(&out.join("heldout.jsonl"), &heldout)?;

    let (backbone, pre) = build_backbone(cfg)?;
    save_checkpoint(&out.join("backbone.ckpt"), &backbone)?;
    if let Some(p) = &pre {
        write_json(&out.join("pretrain.json"), p)?;
    }

    let (dataset, stats) = run_search(cfg, &backbone, &train)?;
    write_dataset(&out.join("dataset.jsonl"), &dataset)?;
    write_stats(&out.join("search_stats.csv"), &stats)?;
    if dataset.is_empty() {
        return Err(Error::input("search kept no examples"));
    }

    let held_examples = oracle_examples(&backbone, &heldout);
    let (stack, log) = train_stack(cfg, &backbone, &dataset, &cfg.router, &cfg.loss, held_examples.as_deref())?;
    save_routed(&out.join("routers.ckpt"), &backbone, &stack)?;
    write_epoch_log(&out.join("train_log.csv"), &log)?;

    let oracle = oracle_labels(&backbone, &heldout);
    let ev = evaluate(&backbone, &stack, &heldout, oracle.as_deref())?;
    write_json(&out.join("report.json"), &ev.report)?;
    write_analysis(&out, &ev, &dataset, cfg.eval.svg)?;
    write_sweep(&out, &control_sweep(&backbone, &stack, &heldout, &cfg.eval.p_grid)?, cfg.eval.svg)?;

    if cfg.eval.ablations {
        let rows = run_ablations(cfg, &backbone, &dataset, &heldout, &ev.report)?;
        write_csv(&out.join("ablations.csv"), &rows)?;
    }
    let ood = if cfg.eval.ood {
        let r = run_ood(cfg, &backbone, &dataset, &heldout)?;
        write_json(&out.join("ood.json"), &r)?;
        Some(r)
    } else {
        None
    };
    let summary = RunSummary {
        train_instances: train.len(),
        heldout_instances: heldout.len(),
        examples: dataset.len(),
        report: ev.report,
        ood,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
