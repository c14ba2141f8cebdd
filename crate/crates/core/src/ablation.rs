//! Experiment orchestration: per-seed train/evaluate runs, aggregates,
//! one-axis ablation grids and the serialized-text baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{write_checkpoint, ReferenceTransformer, ReferenceTransformerConfig, Tokenizer};
use crate::data::{serialize_sequence_as_text, DescribedSequence, RetrievalDataset, Split};
use crate::embed::{EmbedConfig, InclusionMode, PoolingMode, SelectionMode, SequenceView};
use crate::error::{Error, Result};
use crate::retrieval::{
    aggregate, evaluate, metrics_csv_row, AggregateMetrics, MetricsReport, DEFAULT_KS, METRICS_CSV_HEADER,
};
use crate::train::{train, LossConfig, LossKind, TrainingConfig, TrainingLog};

closed_enum!(
    ModelVariant {
        TppEmbedding => "TPP_EMBEDDING",
        TextBaseline => "TEXT_BASELINE",
    }
);

closed_enum!(
    AblationAxis {
        Inclusion => "inclusion",
        Selection => "selection",
        Pooling => "pooling",
        Loss => "loss",
    }
);

/// Everything needed to reproduce one row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub variant: ModelVariant,
    pub embed: EmbedConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub backbone: ReferenceTransformerConfig,
    pub seeds: Vec<u64>,
    /// Evaluate the freshly initialized model ("before fine-tuning").
    pub skip_training: bool,
    pub eval_split: Split,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let backbone = ReferenceTransformerConfig::default();
        Self {
            variant: ModelVariant::TppEmbedding,
            embed: EmbedConfig::for_dim(backbone.model_dim),
            loss: LossConfig::default(),
            training: TrainingConfig::default(),
            backbone,
            seeds: vec![0, 1, 2, 3, 4],
            skip_training: false,
            eval_split: Split::Test,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.embed.temporal.dim != self.backbone.model_dim {
            return Err(Error::Config(format!(
                "temporal dim {} differs from model_dim {}",
                self.embed.temporal.dim, self.backbone.model_dim
            )));
        }
        self.backbone.validate()?;
        self.embed_config().validate()?;
        self.training.validate(&self.loss)
    }

    /// Embedding configuration as actually used: the baseline always reads
    /// sequences through their serialized text.
    pub fn embed_config(&self) -> EmbedConfig {
        let mut e = self.embed.clone();
        if self.variant == ModelVariant::TextBaseline {
            e.view = SequenceView::SerializedText;
        }
        e
    }

    /// Short label used in the `model` column of result tables.
    pub fn model_label(&self) -> String {
        let mut s = match self.variant {
            ModelVariant::TppEmbedding => format!(
                "tpp[{}/{}/{}/{}]",
                self.embed.inclusion, self.embed.selection, self.embed.pooling, self.loss.kind
            ),
            ModelVariant::TextBaseline => format!("text_baseline[{}/{}]", self.embed.pooling, self.loss.kind),
        };
        if self.skip_training {
            s.push_str("-untrained");
        }
        s
    }

    /// Copy with `axis` set to the given value name.
    pub fn with_axis(&self, axis: AblationAxis, value: &str) -> Result<Self> {
        let mut s = self.clone();
        match axis {
            AblationAxis::Inclusion => s.embed.inclusion = value.parse()?,
            AblationAxis::Selection => s.embed.selection = value.parse()?,
            AblationAxis::Pooling => s.embed.pooling = value.parse()?,
            AblationAxis::Loss => s.loss.kind = value.parse()?,
        }
        Ok(s)
    }
}

impl AblationAxis {
    /// Values in table order.
    pub fn values(self) -> Vec<&'static str> {
        match self {
            AblationAxis::Inclusion => InclusionMode::ALL.iter().map(|m| m.as_str()).collect(),
            AblationAxis::Selection => SelectionMode::ALL.iter().map(|m| m.as_str()).collect(),
            AblationAxis::Pooling => PoolingMode::ALL.iter().map(|m| m.as_str()).collect(),
            AblationAxis::Loss => [LossKind::MseCosine, LossKind::ContrastiveMnrl]
                .iter()
                .map(|m| m.as_str())
                .collect(),
        }
    }

    pub fn current(self, spec: &ExperimentSpec) -> &'static str {
        match self {
            AblationAxis::Inclusion => spec.embed.inclusion.as_str(),
            AblationAxis::Selection => spec.embed.selection.as_str(),
            AblationAxis::Pooling => spec.embed.pooling.as_str(),
            AblationAxis::Loss => spec.loss.kind.as_str(),
        }
    }
}

/// Vocabulary over what the model will read: descriptions and, depending on
/// the view, event type texts or whole serialized sequences.
pub fn corpus_tokenizer(items: &[&DescribedSequence], embed: &EmbedConfig) -> Result<Tokenizer> {
    let mut texts: Vec<String> = Vec::new();
    for it in items {
        texts.push(it.description.clone());
        match embed.view {
            SequenceView::Events => texts.extend(it.sequence.events.iter().map(|e| e.type_text.clone())),
            SequenceView::SerializedText => {
                texts.push(serialize_sequence_as_text(&it.sequence, embed.time_decimals)?)
            }
        }
    }
    Ok(Tokenizer::build(texts.iter().map(String::as_str)))
}

/// Fresh backbone for one seed; the vocabulary comes from the training split.
pub fn init_backbone(spec: &ExperimentSpec, dataset: &RetrievalDataset, seed: u64) -> Result<ReferenceTransformer<f32>> {
    let tok = corpus_tokenizer(&dataset.split(Split::Train), &spec.embed_config())?;
    let mut cfg = spec.backbone.clone();
    cfg.init_seed = spec.backbone.init_seed.wrapping_add(seed);
    ReferenceTransformer::new(cfg, tok)
}

/// Train one seed (unless `skip_training`) and return the model with its log.
pub fn train_seed(
    spec: &ExperimentSpec,
    dataset: &RetrievalDataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(&crate::train::EpochRecord),
) -> Result<(ReferenceTransformer<f32>, TrainingLog)> {
    spec.validate()?;
    let mut model = init_backbone(spec, dataset, seed)?;
    if spec.skip_training {
        return Ok((model, TrainingLog::default()));
    }
    dataset.validate_for_training()?;
    let mut tcfg = spec.training.clone();
    tcfg.seed = seed;
    let log = train(
        &mut model,
        &dataset.split(Split::Train),
        &dataset.split(Split::Valid),
        &spec.embed_config(),
        &tcfg,
        &spec.loss,
        on_epoch,
    )?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricsReport,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub dataset: String,
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedResult>,
    pub aggregate: AggregateMetrics,
}

impl ExperimentResult {
    pub fn csv_rows(&self) -> Vec<String> {
        self.seeds
            .iter()
            .map(|s| metrics_csv_row(&self.model, &self.dataset, s.seed, &s.report))
            .collect()
    }
}

/// Write-temp-then-rename, so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn metrics_csv(rows: &[String]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Directory holding everything persisted for one (model, dataset) run.
pub fn run_dir(out: &Path, spec: &ExperimentSpec, dataset: &str) -> PathBuf {
    let label: String = spec
        .model_label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    out.join(dataset).join(label.trim_matches('_'))
}

/// Train and evaluate once per seed, then aggregate.
///
/// With `out`, each seed's metrics and training log are written as soon as
/// the seed finishes, so earlier seeds survive a later failure. The run
/// directory gets `spec.json`, `metrics.csv` and `aggregate.json`, and each
/// `seed-<s>/` holds `train_log.jsonl`, `metrics.json` and `model.ckpt`.
pub fn run_experiment(spec: &ExperimentSpec, dataset: &RetrievalDataset, out: Option<&Path>) -> Result<ExperimentResult> {
    spec.validate()?;
    dataset.validate()?;
    let eval_items = dataset.split(spec.eval_split);
    if eval_items.is_empty() {
        return Err(Error::Validation(format!("split {} of {:?} is empty", spec.eval_split, dataset.name)));
    }
    let model_label = spec.model_label();
    let dir = out.map(|o| run_dir(o, spec, &dataset.name));
    if let Some(d) = &dir {
        write_atomic(&d.join("spec.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    }
    let mut seeds = Vec::with_capacity(spec.seeds.len());
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let (model, log) = train_seed(spec, dataset, seed, &mut |_| {})?;
        let report = evaluate(&eval_items, &model, &spec.embed_config(), &DEFAULT_KS)?;
        log::info!("{model_label} on {} seed {seed}: mrr {:.4}", dataset.name, report.mrr);
        let result = SeedResult { seed, report, best_epoch: log.best_epoch };
        rows.push(metrics_csv_row(&model_label, &dataset.name, seed, &result.report));
        if let Some(d) = &dir {
            let sd = d.join(format!("seed-{seed}"));
            let mut buf = Vec::new();
            log.write_jsonl(&mut buf)?;
            write_atomic(&sd.join("train_log.jsonl"), &buf)?;
            write_atomic(&sd.join("metrics.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
            let mut ckpt = Vec::new();
            write_checkpoint(&mut ckpt, &model)?;
            write_atomic(&sd.join("model.ckpt"), &ckpt)?;
            write_atomic(&d.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        }
        seeds.push(result);
    }
    let reports: Vec<MetricsReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let result = ExperimentResult {
        model: model_label,
        dataset: dataset.name.clone(),
        spec: spec.clone(),
        seeds,
        aggregate: aggregate(&reports)?,
    };
    if let Some(d) = &dir {
        write_atomic(&d.join("aggregate.json"), serde_json::to_string_pretty(&result.aggregate)?.as_bytes())?;
    }
    Ok(result)
}

/// Same backbone, pooling, loss and schedule; both sides read as plain text.
pub fn run_baseline(spec: &ExperimentSpec, dataset: &RetrievalDataset, out: Option<&Path>) -> Result<ExperimentResult> {
    let mut s = spec.clone();
    s.variant = ModelVariant::TextBaseline;
    run_experiment(&s, dataset, out)
}

/// Leaf paths whose values differ between two JSON documents.
pub fn config_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p, out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: String,
    /// Fields that differ from the base spec; empty for the base value itself.
    pub changed_fields: Vec<String>,
    pub result: ExperimentResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub axis: AblationAxis,
    pub dataset: String,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,dataset,n_seeds,mrr_mean,mrr_std,recall@5_mean,recall@5_std\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let a = &r.result.aggregate;
            let r5 = a.recall_at_k.get(&5);
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{},{},{}",
                self.axis,
                r.value,
                self.dataset,
                a.n_seeds,
                a.mrr.mean,
                fmt(a.mrr.std),
                fmt(r5.map(|x| x.mean)),
                fmt(r5.and_then(|x| x.std)),
            );
        }
        s
    }
}

/// Run `base` once per value of `axis`, everything else fixed.
///
/// All variants are validated before any training starts. Each variant
/// must differ from the base in at most the one audited field.
pub fn run_ablation_grid(
    base: &ExperimentSpec,
    axis: AblationAxis,
    dataset: &RetrievalDataset,
    out: Option<&Path>,
) -> Result<GridResult> {
    base.validate()?;
    let base_json = serde_json::to_value(base)?;
    let mut variants = Vec::new();
    for value in axis.values() {
        let spec = base.with_axis(axis, value)?;
        spec.validate()?;
        let changed = config_diff(&base_json, &serde_json::to_value(&spec)?);
        let expected = usize::from(value != axis.current(base));
        if changed.len() != expected {
            return Err(Error::Config(format!(
                "grid value {value} changes {changed:?}, expected exactly {expected} field(s)"
            )));
        }
        variants.push((value, spec, changed));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (value, spec, changed_fields) in variants {
        let result = run_experiment(&spec, dataset, out)?;
        rows.push(GridRow { value: value.to_string(), changed_fields, result });
    }
    let grid = GridResult { axis, dataset: dataset.name.clone(), rows };
    if let Some(o) = out {
        let stem = o.join(&dataset.name).join(format!("grid-{axis}"));
        write_atomic(&stem.with_extension("csv"), grid.to_csv().as_bytes())?;
        write_atomic(&stem.with_extension("json"), serde_json::to_string_pretty(&grid)?.as_bytes())?;
    }
    Ok(grid)
}

/// Header plus one row per seed of every result.
pub fn combined_metrics_csv(results: &[&ExperimentResult]) -> String {
    let rows: Vec<String> = results.iter().flat_map(|r| r.csv_rows()).collect();
    metrics_csv(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, EventSequence};
    use crate::backbone::EncoderBackbone;

    fn tiny_dataset() -> RetrievalDataset {
        let types = ["alpha", "beta", "gamma", "delta"];
        let items = (0..16)
            .map(|i| {
                let a = types[i % 4];
                let b = types[(i / 4) % 4];
                let seq = EventSequence::new(
                    format!("s{i}"),
                    "toy",
                    vec![Event::new(0.0, a), Event::new(0.5 + i as f64 * 0.1, b), Event::new(2.0, a)],
                );
                let split = match i % 8 {
                    6 => Split::Valid,
                    7 => Split::Test,
                    _ => Split::Train,
                };
                DescribedSequence { sequence: seq, description: format!("{a} then {b} then {a}"), split }
            })
            .collect();
        RetrievalDataset::new("toy", items)
    }

    fn tiny_spec() -> ExperimentSpec {
        let backbone = ReferenceTransformerConfig {
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 64,
            ..Default::default()
        };
        ExperimentSpec {
            embed: EmbedConfig::for_dim(16),
            backbone,
            training: TrainingConfig { epochs: 2, batch_size: 4, ..Default::default() },
            seeds: vec![3, 4, 5],
            ..Default::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(tiny_spec().validate().is_ok());
        assert!(ExperimentSpec { seeds: vec![], ..tiny_spec() }.validate().is_err());
        assert!(ExperimentSpec { seeds: vec![1, 1], ..tiny_spec() }.validate().is_err());
        let mut bad = tiny_spec();
        bad.embed.inclusion = InclusionMode::TextualOnly;
        bad.embed.selection = SelectionMode::TemporalTokens;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        // The serialized view has no temporal rows to select, so the mode pair is moot there.
        bad.variant = ModelVariant::TextBaseline;
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn aggregate_matches_persisted_seeds_and_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let spec = tiny_spec();
        let r1 = run_experiment(&spec, &ds, Some(dir.path())).unwrap();
        assert_eq!(r1.seeds.len(), 3);
        let rd = run_dir(dir.path(), &spec, "toy");
        let mut mrrs = Vec::new();
        for s in &spec.seeds {
            let m: SeedResult =
                serde_json::from_str(&fs::read_to_string(rd.join(format!("seed-{s}/metrics.json"))).unwrap()).unwrap();
            mrrs.push(m.report.mrr);
            let log = fs::read_to_string(rd.join(format!("seed-{s}/train_log.jsonl"))).unwrap();
            assert_eq!(log.lines().count(), 2);
        }
        let mean = mrrs.iter().sum::<f64>() / 3.0;
        let std = (mrrs.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((r1.aggregate.mrr.mean - mean).abs() < 1e-12);
        assert!((r1.aggregate.mrr.std.unwrap() - std).abs() < 1e-12);
        let agg: AggregateMetrics =
            serde_json::from_str(&fs::read_to_string(rd.join("aggregate.json")).unwrap()).unwrap();
        assert_eq!(agg, r1.aggregate);
        let csv = fs::read_to_string(rd.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);

        let r2 = run_experiment(&spec, &ds, None).unwrap();
        assert_eq!(r1.aggregate, r2.aggregate);
    }

    #[test]
    fn single_seed_has_no_std() {
        let spec = ExperimentSpec { seeds: vec![9], skip_training: true, ..tiny_spec() };
        let r = run_experiment(&spec, &tiny_dataset(), None).unwrap();
        assert_eq!(r.aggregate.mrr.std, None);
        assert!(r.model.ends_with("-untrained"));
    }

    #[test]
    fn grid_rows_and_audit() {
        let spec = ExperimentSpec { seeds: vec![1], skip_training: true, ..tiny_spec() };
        let dir = tempfile::tempdir().unwrap();
        let g = run_ablation_grid(&spec, AblationAxis::Pooling, &tiny_dataset(), Some(dir.path())).unwrap();
        let values: Vec<&str> = g.rows.iter().map(|r| r.value.as_str()).collect();
        assert_eq!(values, ["MEAN", "MAX", "LAST_TOKEN"]);
        assert!(g.rows[0].changed_fields.is_empty());
        assert_eq!(g.rows[1].changed_fields, ["embed.pooling"]);
        let csv = fs::read_to_string(dir.path().join("toy/grid-pooling.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);

        let inc = AblationAxis::Inclusion.values();
        assert_eq!(inc, ["TEMPORAL_ONLY", "TEXTUAL_ONLY", "ALL"]);
        assert_eq!(AblationAxis::Loss.values(), ["MSE_COSINE", "CONTRASTIVE_MNRL"]);
        let g = run_ablation_grid(&spec, AblationAxis::Loss, &tiny_dataset(), None).unwrap();
        assert_eq!(g.rows[0].changed_fields, ["loss.kind"]);
    }

    #[test]
    fn invalid_grid_fails_before_training() {
        let mut spec = tiny_spec();
        spec.embed.selection = SelectionMode::TemporalTokens;
        let r = run_ablation_grid(&spec, AblationAxis::Inclusion, &tiny_dataset(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn diff_lists_leaf_paths() {
        let a = serde_json::json!({"x": {"y": 1, "z": [1, 2]}, "w": "a"});
        let b = serde_json::json!({"x": {"y": 2, "z": [1, 2]}, "w": "a", "v": true});
        assert_eq!(config_diff(&a, &b), ["v", "x.y"]);
        assert!(config_diff(&a, &a).is_empty());
    }

    #[test]
    fn baseline_reads_serialized_text() {
        let spec = ExperimentSpec { seeds: vec![2], skip_training: true, ..tiny_spec() };
        let ds = tiny_dataset();
        let r = run_baseline(&spec, &ds, None).unwrap();
        assert!(r.model.starts_with("text_baseline"));
        assert_eq!(r.spec.embed_config().view, SequenceView::SerializedText);
        let model = init_backbone(&r.spec, &ds, 2).unwrap();
        // Digits of the serialized times are part of the vocabulary.
        assert!(model.tokenizer().id("00").is_some());
    }
}
