//! Exact cosine retrieval over sequence embeddings and the ranking metrics.
//!
//! Scores are dot products of unit vectors. Equal scores are ordered by
//! ascending sequence id, which makes every ranking total and reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderBackbone;
use crate::data::{DescribedSequence, EventSequence};
use crate::embed::{embed_descriptions, embed_sequences, fit_items, EmbedConfig};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

const MAGIC: &[u8; 8] = b"TESRIDX1";

/// Rows embedded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Mat<f32>,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl EmbeddingIndex {
    /// Normalizes every row; ids must be unique.
    pub fn from_vectors<T: Scalar>(ids: Vec<String>, vectors: &Mat<T>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("index"));
        }
        if ids.len() != vectors.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {id:?} in index")));
            }
        }
        let mut data = Vec::with_capacity(vectors.data().len());
        for r in 0..vectors.rows() {
            let row: Vec<f64> = vectors.row(r).iter().map(|v| v.as_f64()).collect();
            data.extend(unit(&row)?.into_iter().map(|v| v as f32));
        }
        Ok(Self {
            ids,
            vectors: Mat::from_vec(vectors.rows(), vectors.cols(), data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Mat<f32> {
        &self.vectors
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Cosine score of `query` against every row.
    pub fn scores<T: Scalar>(&self, query: &[T]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query width {}, index width {}",
                query.len(),
                self.dim()
            )));
        }
        let q = unit(&query.iter().map(|v| v.as_f64()).collect::<Vec<_>>())?;
        Ok((0..self.len())
            .map(|r| {
                self.vectors
                    .row(r)
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| *a as f64 * b)
                    .sum()
            })
            .collect())
    }

    fn order(&self, scores: &[f64], a: usize, b: usize) -> Ordering {
        // Scores are finite; partial_cmp also keeps -0.0 and 0.0 tied.
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.ids[a].cmp(&self.ids[b]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.vectors.data().len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IndexFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing TESRIDX1 magic"));
        }
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated index"))
        };
        let n = u32_at(8)? as usize;
        let dim = u32_at(12)? as usize;
        let mut at = 16;
        let floats = bytes
            .get(at..at + n * dim * 4)
            .ok_or_else(|| bad("truncated vectors"))?;
        let data: Vec<f32> = floats
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += n * dim * 4;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at(at)? as usize;
            at += 4;
            let raw = bytes.get(at..at + len).ok_or_else(|| bad("truncated id"))?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("id is not UTF-8"))?);
            at += len;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        // Stored rows are already unit-norm; keep them bit-exact.
        let index = Self {
            ids,
            vectors: Mat::from_vec(n, dim, data)?,
        };
        if index.is_empty() {
            return Err(bad("empty index"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn build_index<T: Scalar, B: EncoderBackbone<T>>(
    seqs: &[&EventSequence],
    backbone: &B,
    cfg: &EmbedConfig,
) -> Result<EmbeddingIndex> {
    if seqs.is_empty() {
        return Err(Error::Empty("sequences to index"));
    }
    let vectors = embed_sequences(backbone, seqs, cfg, EVAL_CHUNK)?;
    EmbeddingIndex::from_vectors(seqs.iter().map(|s| s.id.clone()).collect(), &vectors)
}

/// Top-`k` ids with their scores, best first.
pub fn retrieve<T: Scalar>(query: &[T], index: &EmbeddingIndex, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 || k > index.len() {
        return Err(Error::KOutOfRange { k, n: index.len() });
    }
    let scores = index.scores(query)?;
    let mut order: Vec<usize> = (0..index.len()).collect();
    let cmp = |a: &usize, b: &usize| index.order(&scores, *a, *b);
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order
        .into_iter()
        .map(|i| (index.ids[i].clone(), scores[i]))
        .collect())
}

/// 1-based position of `correct_id` under the [`retrieve`] ordering.
pub fn rank_of<T: Scalar>(correct_id: &str, query: &[T], index: &EmbeddingIndex) -> Result<usize> {
    let c = index.position(correct_id)?;
    let scores = index.scores(query)?;
    Ok(rank_in(&scores, c, index))
}

fn rank_in(scores: &[f64], c: usize, index: &EmbeddingIndex) -> usize {
    1 + (0..scores.len())
        .filter(|&j| index.order(scores, j, c) == Ordering::Less)
        .count()
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    if k == 0 {
        return Err(Error::KOutOfRange { k, n: ranks.len() });
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let mut recall = BTreeMap::new();
        for &k in ks {
            recall.insert(k, recall_at_k(ranks, k)?);
        }
        Ok(Self {
            mrr: mrr(ranks)?,
            recall_at_k: recall,
            n_queries: ranks.len(),
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at_k.get(&k).copied()
    }
}

/// Ranks of description `i`'s own sequence `i` among all rows of `seq_emb`.
pub fn ranks_from_embeddings<T: Scalar>(
    ids: &[String],
    desc_emb: &Mat<T>,
    seq_emb: &Mat<T>,
) -> Result<Vec<usize>> {
    if desc_emb.rows() != ids.len() {
        return Err(Error::Shape("one description per id required".into()));
    }
    let index = EmbeddingIndex::from_vectors(ids.to_vec(), seq_emb)?;
    (0..ids.len())
        .map(|i| {
            let scores = index.scores(desc_emb.row(i))?;
            Ok(rank_in(&scores, i, &index))
        })
        .collect()
}

/// Rank every item's description against all sequences of `items`.
/// Sequences longer than the backbone allows keep their most recent events.
pub fn evaluate<T: Scalar, B: EncoderBackbone<T>>(
    items: &[&DescribedSequence],
    backbone: &B,
    cfg: &EmbedConfig,
    ks: &[usize],
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let items = fit_items(items, backbone.tokenizer(), cfg, backbone.max_positions());
    let seqs: Vec<&EventSequence> = items.iter().map(|d| &d.sequence).collect();
    let texts: Vec<&str> = items.iter().map(|d| d.description.as_str()).collect();
    let seq_emb = embed_sequences(backbone, &seqs, cfg, EVAL_CHUNK)?;
    let desc_emb = embed_descriptions(backbone, &texts, cfg.pooling, EVAL_CHUNK)?;
    let ids: Vec<String> = seqs.iter().map(|s| s.id.clone()).collect();
    let ranks = ranks_from_embeddings(&ids, &desc_emb, &seq_emb)?;
    MetricsReport::from_ranks(&ranks, ks)
}

/// Mean and sample standard deviation (n - 1 divisor; `None` for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("values to aggregate"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_seeds: usize,
    pub mrr: Stat,
    pub recall_at_k: BTreeMap<usize, Stat>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::Empty("reports to aggregate"));
    }
    let mrrs: Vec<f64> = reports.iter().map(|r| r.mrr).collect();
    let mut recall_at_k = BTreeMap::new();
    for k in reports[0].recall_at_k.keys() {
        let vals = reports
            .iter()
            .map(|r| {
                r.recall(*k)
                    .ok_or_else(|| Error::Validation(format!("report lacks recall@{k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        recall_at_k.insert(*k, Stat::of(&vals)?);
    }
    Ok(AggregateMetrics {
        n_seeds: reports.len(),
        mrr: Stat::of(&mrrs)?,
        recall_at_k,
    })
}

pub const METRICS_CSV_HEADER: &str = "model,dataset,seed,mrr,recall@1,recall@5,recall@10";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One `metrics.csv` row; missing recall columns are left empty.
pub fn metrics_csv_row(model: &str, dataset: &str, seed: u64, report: &MetricsReport) -> String {
    let r = |k| report.recall(k).map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{},{},{},{:.6},{},{},{}",
        csv_field(model),
        csv_field(dataset),
        seed,
        report.mrr,
        r(1),
        r(5),
        r(10)
    )
}
