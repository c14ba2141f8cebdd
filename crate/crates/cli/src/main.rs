//! `tesr`: synthesize corpora, train and evaluate sequence embedders, query
//! an index, and run ablation grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tesr_core::ablation::{
    combined_metrics_csv, run_ablation_grid, run_baseline, run_experiment, write_atomic, AblationAxis,
    ExperimentResult,
};
use tesr_core::backbone::{load_checkpoint, EncoderBackbone, ReferenceTransformer};
use tesr_core::config::Config;
use tesr_core::data::{load_dataset, make_multidomain, save_dataset, DescribedSequence, EventSequence, RetrievalDataset, Split};
use tesr_core::embed::{embed_description, fit_items};
use tesr_core::retrieval::{
    aggregate, build_index, evaluate, metrics_csv_row, rank_of, retrieve, EmbeddingIndex, MetricsReport, DEFAULT_KS,
    METRICS_CSV_HEADER,
};
use tesr_core::synth::{
    build_benchmark, describe_all, judge_all, mean_scores, template_description, write_benchmark, BenchmarkManifest,
    ChatClient, Describer, DomainSpec, JudgeScores,
};

#[derive(Parser)]
#[command(name = "tesr", version, about = "Text-to-event-sequence retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; missing sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the synthesis seed, or runs a single training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// JSONL corpus; repeat to mix several corpora into one.
    #[arg(long)]
    dataset: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora with descriptions and splits.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Pairs per domain.
        #[arg(long)]
        n: Option<usize>,
        /// Domain preset to generate; repeatable.
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        describer: Option<Describer>,
    },
    /// Rewrite the descriptions of a corpus.
    Describe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        describer: Option<Describer>,
    },
    /// Score descriptions against their sequences with the rubric judge.
    Judge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<Split>,
        /// Judge at most this many pairs per corpus.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train one model per seed and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate saved checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Rank a corpus split against text queries.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query text; without any, every description of the split is a query.
        #[arg(long)]
        query: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        split: Option<Split>,
        /// Also write the sequence index to this file.
        #[arg(long)]
        save_index: Option<PathBuf>,
    },
    /// Sweep one or more ablation axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Vec<AblationAxis>,
    },
    /// Train and evaluate the serialized-text baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.experiment.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpora(common: &Common) -> Result<Vec<RetrievalDataset>> {
    if common.dataset.is_empty() {
        bail!("--dataset is required");
    }
    common
        .dataset
        .iter()
        .map(|p| load_dataset(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// One corpus, or several mixed into one with source-prefixed ids.
fn load_combined(common: &Common, cfg: &Config) -> Result<RetrievalDataset> {
    let mut corpora = load_corpora(common)?;
    if corpora.len() == 1 {
        return Ok(corpora.remove(0));
    }
    let seed = cfg.experiment.seeds[0];
    Ok(make_multidomain(&corpora, cfg.data.multidomain_fraction, seed)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn summarize(r: &ExperimentResult) {
    let a = &r.aggregate;
    let r5 = a.recall_at_k.get(&5).map_or(f64::NAN, |s| s.mean);
    println!(
        "{} on {}: MRR {:.4} +- {:.4}, Recall@5 {:.4} over {} seed(s)",
        r.model,
        r.dataset,
        a.mrr.mean,
        a.mrr.std.unwrap_or(0.0),
        r5,
        a.n_seeds
    );
}

/// Items grouped by domain tag, each with its position in the corpus.
fn by_domain<'a>(items: &[&'a DescribedSequence]) -> BTreeMap<&'a str, Vec<(usize, &'a DescribedSequence)>> {
    let mut groups: BTreeMap<&str, Vec<(usize, &DescribedSequence)>> = BTreeMap::new();
    for (i, d) in items.iter().enumerate() {
        groups.entry(d.sequence.domain.as_str()).or_default().push((i, d));
    }
    groups
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n, preset, describer } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = n {
                cfg.synth.n_per_domain = n;
            }
            if !preset.is_empty() {
                cfg.synth.presets = preset;
            }
            if let Some(d) = describer {
                cfg.synth.describer = d;
            }
            let specs = cfg.synth.specs()?;
            let client = match cfg.synth.describer {
                Describer::Client => Some(ChatClient::new(cfg.client.clone())?),
                Describer::Template => None,
            };
            let s = &cfg.synth;
            let datasets = build_benchmark(&specs, s.n_per_domain, s.describer, s.splits, s.seed, client.as_ref())?;
            let manifest = BenchmarkManifest {
                seed: s.seed,
                n_per_domain: s.n_per_domain,
                describer: s.describer,
                splits: s.splits,
                specs,
                files: vec![],
            };
            for p in write_benchmark(&common.out, &datasets, &manifest)? {
                println!("{}", p.display());
            }
        }
        Command::Describe { common, describer } => {
            let cfg = load_config(&common)?;
            let describer = describer.unwrap_or(cfg.synth.describer);
            let client = match describer {
                Describer::Client => Some(ChatClient::new(cfg.client.clone())?),
                Describer::Template => None,
            };
            for mut ds in load_corpora(&common)? {
                let items: Vec<&DescribedSequence> = ds.items.iter().collect();
                let mut fresh = vec![String::new(); items.len()];
                for (domain, group) in by_domain(&items) {
                    let spec = cfg.synth.spec_for(domain)?;
                    let seqs: Vec<EventSequence> = group.iter().map(|(_, d)| d.sequence.clone()).collect();
                    let texts = describe(&seqs, &spec, client.as_ref())?;
                    for ((i, _), t) in group.iter().zip(texts) {
                        fresh[*i] = t;
                    }
                }
                for (item, text) in ds.items.iter_mut().zip(fresh) {
                    item.description = text;
                }
                fs::create_dir_all(&common.out)?;
                let path = common.out.join(format!("{}.jsonl", ds.name));
                save_dataset(&path, &ds)?;
                println!("{}", path.display());
            }
        }
        Command::Judge { common, split, limit } => {
            let cfg = load_config(&common)?;
            let client = ChatClient::new(cfg.client.clone())?;
            for ds in load_corpora(&common)? {
                let mut items: Vec<&DescribedSequence> = match split {
                    Some(s) => ds.split(s),
                    None => ds.items.iter().collect(),
                };
                if let Some(l) = limit {
                    items.truncate(l);
                }
                let mut results: Vec<Option<tesr_core::Result<JudgeScores>>> = (0..items.len()).map(|_| None).collect();
                for (domain, group) in by_domain(&items) {
                    let spec = cfg.synth.spec_for(domain)?;
                    let pairs: Vec<(&str, &EventSequence)> =
                        group.iter().map(|(_, d)| (d.description.as_str(), &d.sequence)).collect();
                    for ((i, _), r) in group.iter().zip(judge_all(&pairs, &spec, &client)?) {
                        results[*i] = Some(r);
                    }
                }
                let mut rows = Vec::new();
                let mut ok = Vec::new();
                for (d, r) in items.iter().zip(results) {
                    match r.expect("every item judged") {
                        Ok(s) => {
                            rows.push(json!({"id": d.sequence.id, "scores": s}));
                            ok.push(s);
                        }
                        Err(e) => rows.push(json!({"id": d.sequence.id, "error": e.to_string()})),
                    }
                }
                let dir = common.out.join(&ds.name);
                write_jsonl(&dir.join("judge.jsonl"), &rows)?;
                let failed = rows.len() - ok.len();
                let summary = json!({"dataset": ds.name, "judged": rows.len(), "failed": failed,
                    "mean": if ok.is_empty() { None } else { Some(mean_scores(&ok)?) }});
                write_json(&dir.join("judge_summary.json"), &summary)?;
                println!("{}", serde_json::to_string(&summary)?);
            }
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let ds = load_combined(&common, &cfg)?;
            let r = run_experiment(&cfg.experiment, &ds, Some(&common.out))?;
            summarize(&r);
        }
        Command::Baseline { common } => {
            let cfg = load_config(&common)?;
            let ds = load_combined(&common, &cfg)?;
            let r = run_baseline(&cfg.experiment, &ds, Some(&common.out))?;
            summarize(&r);
        }
        Command::Ablate { common, axis } => {
            let cfg = load_config(&common)?;
            let ds = load_combined(&common, &cfg)?;
            let axes = if axis.is_empty() { cfg.ablation.axes() } else { axis };
            let mut results = Vec::new();
            for a in axes {
                let grid = run_ablation_grid(&cfg.experiment, a, &ds, Some(&common.out))?;
                print!("{}", grid.to_csv());
                results.extend(grid.rows.into_iter().map(|r| r.result));
            }
            let refs: Vec<&ExperimentResult> = results.iter().collect();
            write_atomic(&common.out.join(&ds.name).join("metrics.csv"), combined_metrics_csv(&refs).as_bytes())?;
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let ds = load_combined(&common, &cfg)?;
            let split = split.unwrap_or(cfg.experiment.eval_split);
            let items = ds.split(split);
            let embed = cfg.experiment.embed_config();
            let label = cfg.experiment.model_label();
            let mut reports = Vec::new();
            let mut csv = format!("{METRICS_CSV_HEADER}\n");
            for (i, path) in checkpoint.iter().enumerate() {
                let model: ReferenceTransformer<f32> =
                    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                let report = evaluate(&items, &model, &embed, &DEFAULT_KS)?;
                let seed = seed_of(path).unwrap_or(i as u64);
                csv.push_str(&metrics_csv_row(&label, &ds.name, seed, &report));
                csv.push('\n');
                println!("{}: MRR {:.4}", path.display(), report.mrr);
                reports.push(report);
            }
            write_atomic(&common.out.join("metrics.csv"), csv.as_bytes())?;
            write_json(&common.out.join("aggregate.json"), &serde_json::to_value(aggregate(&reports)?)?)?;
        }
        Command::Retrieve { common, checkpoint, query, k, split, save_index } => {
            let cfg = load_config(&common)?;
            let ds = load_combined(&common, &cfg)?;
            let model: ReferenceTransformer<f32> =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let embed = cfg.experiment.embed_config();
            let items = ds.split(split.unwrap_or(cfg.experiment.eval_split));
            let fitted = fit_items(&items, model.tokenizer(), &embed, model.max_positions());
            let seqs: Vec<&EventSequence> = fitted.iter().map(|d| &d.sequence).collect();
            let index = build_index(&seqs, &model, &embed)?;
            if let Some(p) = &save_index {
                index.save(p)?;
            }
            let k = k.min(index.len());
            let queries: Vec<(String, Option<String>)> = if query.is_empty() {
                fitted.iter().map(|d| (d.description.clone(), Some(d.sequence.id.clone()))).collect()
            } else {
                query.into_iter().map(|q| (q, None)).collect()
            };
            let (rows, ranks) = run_queries(&model, &index, &queries, k, &embed)?;
            write_jsonl(&common.out.join("retrieval.jsonl"), &rows)?;
            if !ranks.is_empty() {
                let report = MetricsReport::from_ranks(&ranks, &DEFAULT_KS)?;
                println!("MRR {:.4} over {} queries", report.mrr, ranks.len());
            } else {
                for r in &rows {
                    println!("{}", serde_json::to_string(r)?);
                }
            }
        }
    }
    Ok(())
}

fn describe(seqs: &[EventSequence], spec: &DomainSpec, client: Option<&ChatClient>) -> Result<Vec<String>> {
    match client {
        None => Ok(seqs.iter().map(|s| template_description(s, spec)).collect()),
        Some(c) => Ok(describe_all(seqs, spec, c)?.into_iter().collect::<tesr_core::Result<_>>()?),
    }
}

type QueryRows = (Vec<serde_json::Value>, Vec<usize>);

fn run_queries(
    model: &ReferenceTransformer<f32>,
    index: &EmbeddingIndex,
    queries: &[(String, Option<String>)],
    k: usize,
    embed: &tesr_core::embed::EmbedConfig,
) -> Result<QueryRows> {
    let mut rows = Vec::new();
    let mut ranks = Vec::new();
    for (text, correct) in queries {
        let q = embed_description(model, text, embed.pooling)?;
        let hits: Vec<_> = retrieve(&q, index, k)?
            .into_iter()
            .map(|(id, score)| json!({"id": id, "score": score}))
            .collect();
        let mut row = json!({"query": text, "results": hits});
        if let Some(id) = correct {
            let rank = rank_of(id, &q, index)?;
            row["correct_id"] = json!(id);
            row["rank"] = json!(rank);
            ranks.push(rank);
        }
        rows.push(row);
    }
    Ok((rows, ranks))
}

/// Seed encoded in a `seed-<n>/model.ckpt` path.
fn seed_of(path: &Path) -> Option<u64> {
    path.parent()?.file_name()?.to_str()?.strip_prefix("seed-")?.parse().ok()
}
