//! Benchmark assembly: generate, describe, split and write one JSONL corpus
//! per domain plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::{describe_all, ChatClient};
use super::describe::template_description;
use super::{generate_sequences, DomainSpec};
use crate::data::{write_dataset, DescribedSequence, RetrievalDataset, Split};
use crate::error::{Error, Result};

closed_enum!(
    Describer {
        Template => "TEMPLATE",
        Client => "CLIENT",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must lie in [0, 1] and sum to 1",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }

    /// Valid and test sizes are floored; the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let valid = (self.valid * n as f64 + 1e-9).floor() as usize;
        let test = (self.test * n as f64 + 1e-9).floor() as usize;
        (n - valid - test, valid, test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub n_per_domain: usize,
    pub describer: Describer,
    pub splits: SplitFractions,
    pub specs: Vec<DomainSpec>,
    pub files: Vec<String>,
}

/// Stable per-domain seed so adding a domain leaves the others unchanged.
fn domain_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One dataset per spec. `client` is required for [`Describer::Client`].
pub fn build_benchmark(
    specs: &[DomainSpec],
    n_per_domain: usize,
    describer: Describer,
    splits: SplitFractions,
    seed: u64,
    client: Option<&ChatClient>,
) -> Result<Vec<RetrievalDataset>> {
    splits.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("no domain specs".into()));
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let dseed = domain_seed(seed, &spec.name);
        let seqs = generate_sequences(spec, n_per_domain, dseed)?;
        let descriptions: Vec<String> = match describer {
            Describer::Template => seqs.iter().map(|s| template_description(s, spec)).collect(),
            Describer::Client => {
                let client = client.ok_or_else(|| {
                    Error::Config("CLIENT describer needs a chat client configuration".into())
                })?;
                describe_all(&seqs, spec, client)?.into_iter().collect::<Result<_>>()?
            }
        };
        let (n_train, n_valid, _) = splits.sizes(seqs.len());
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(dseed ^ 0x5b1d));
        let mut split = vec![Split::Test; seqs.len()];
        for (rank, &i) in order.iter().enumerate() {
            split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
        let items = seqs
            .into_iter()
            .zip(descriptions)
            .zip(split)
            .map(|((sequence, description), split)| DescribedSequence { sequence, description, split })
            .collect();
        let ds = RetrievalDataset::new(spec.name.clone(), items);
        ds.validate()?;
        out.push(ds);
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<name>.jsonl` per dataset and `manifest.json`; returns the paths.
pub fn write_benchmark(
    dir: impl AsRef<Path>,
    datasets: &[RetrievalDataset],
    manifest: &BenchmarkManifest,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for ds in datasets {
        let path = dir.join(format!("{}.jsonl", ds.name));
        let mut buf = Vec::new();
        write_dataset(&mut buf, ds)?;
        write_atomic(&path, &buf)?;
        paths.push(path);
    }
    let mut manifest = manifest.clone();
    manifest.files = datasets.iter().map(|d| format!("{}.jsonl", d.name)).collect();
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    paths.push(path);
    Ok(paths)
}
