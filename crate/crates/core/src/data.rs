//! Event sequences, described retrieval datasets, and their JSON Lines form.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(rename = "type")]
    pub type_text: String,
}

impl Event {
    pub fn new(t: f64, type_text: impl Into<String>) -> Self {
        Self {
            t,
            type_text: type_text.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::Validation(format!("non-finite time {}", self.t)));
        }
        if self.t < 0.0 {
            return Err(Error::Validation(format!("negative time {}", self.t)));
        }
        if self.type_text.is_empty() {
            return Err(Error::Validation("empty event type".into()));
        }
        if self.type_text.trim() != self.type_text {
            return Err(Error::Validation(format!(
                "event type {:?} has surrounding whitespace",
                self.type_text
            )));
        }
        if self.type_text.contains(['\n', '\r']) {
            return Err(Error::Validation(format!(
                "event type {:?} contains a line break",
                self.type_text
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub id: String,
    pub domain: String,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, domain: impl Into<String>, events: Vec<Event>) -> Self {
        Self {
            id: id.into(),
            domain: domain.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Checks every invariant except the zero start, which
    /// [`normalize_times`] establishes.
    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::Validation(format!("sequence {:?} is empty", self.id)));
        }
        for e in &self.events {
            e.validate()?;
        }
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Validation(format!(
                "times not sorted in sequence {:?}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.events.first().is_some_and(|e| e.t == 0.0)
    }
}

/// Shift all times so the first event sits at zero.
pub fn normalize_times(seq: &EventSequence) -> EventSequence {
    let origin = seq.events.first().map_or(0.0, |e| e.t);
    let mut out = seq.clone();
    for e in &mut out.events {
        e.t -= origin;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A positive (description, sequence) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DescribedSequence {
    pub sequence: EventSequence,
    pub description: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalDataset {
    pub name: String,
    pub items: Vec<DescribedSequence>,
}

impl RetrievalDataset {
    pub fn new(name: impl Into<String>, items: Vec<DescribedSequence>) -> Self {
        Self {
            name: name.into(),
            items,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&DescribedSequence> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.items.iter().filter(|i| i.split == split).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Validation("no records".into()));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            item.sequence.validate()?;
            if item.description.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "empty description for {:?}",
                    item.sequence.id
                )));
            }
            if !seen.insert(item.sequence.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate id {:?}",
                    item.sequence.id
                )));
            }
        }
        Ok(())
    }

    /// Training needs every split populated.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        for s in Split::ALL {
            if self.split_len(s) == 0 {
                return Err(Error::Validation(format!("split {s} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    split: Split,
    events: Vec<Event>,
    description: String,
}

/// Read a JSON Lines corpus. Blank lines are skipped; times are normalized
/// to start at zero after validation.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(BufReader::new(file), name)
}

pub fn read_dataset(reader: impl BufRead, name: impl Into<String>) -> Result<RetrievalDataset> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let seq = EventSequence::new(rec.id, rec.domain, rec.events);
        seq.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        items.push(DescribedSequence {
            sequence: normalize_times(&seq),
            description: rec.description,
            split: rec.split,
        });
    }
    let ds = RetrievalDataset::new(name, items);
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &RetrievalDataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, ds).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(w: &mut impl Write, ds: &RetrievalDataset) -> Result<()> {
    for item in &ds.items {
        let rec = Record {
            id: item.sequence.id.clone(),
            domain: item.sequence.domain.clone(),
            split: item.split,
            events: item.sequence.events.clone(),
            description: item.description.clone(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub const DEFAULT_TIME_DECIMALS: usize = 2;

/// One `<time>,<type>` line per event, joined by `\n` with no trailing
/// newline. Times are rounded half-to-even at `time_decimals`.
pub fn serialize_sequence_as_text(seq: &EventSequence, time_decimals: usize) -> Result<String> {
    let mut lines = Vec::with_capacity(seq.events.len());
    for e in &seq.events {
        if e.type_text.contains(',') {
            return Err(Error::Validation(format!(
                "event type {:?} contains a comma",
                e.type_text
            )));
        }
        // std float formatting rounds the exact binary value half-to-even.
        lines.push(format!("{:.*},{}", time_decimals, e.t, e.type_text));
    }
    Ok(lines.join("\n"))
}

/// Stratified sample of `floor(fraction * n)` items per split per source.
/// Ids are prefixed with the source dataset name so they stay unique, and an
/// empty domain tag is filled with the source name.
pub fn make_multidomain(
    datasets: &[RetrievalDataset],
    fraction: f64,
    seed: u64,
) -> Result<RetrievalDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} not in (0, 1]")));
    }
    if datasets.len() < 2 {
        return Err(Error::Config("multi-domain mixing needs at least two datasets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for ds in datasets {
        for split in Split::ALL {
            let pool = ds.split(split);
            if pool.is_empty() {
                return Err(Error::Validation(format!(
                    "dataset {:?} has an empty {split} split",
                    ds.name
                )));
            }
            let take = (fraction * pool.len() as f64 + 1e-9).floor() as usize;
            let mut picked = sample(&mut rng, pool.len(), take.min(pool.len())).into_vec();
            picked.sort_unstable();
            for i in picked {
                let mut item = pool[i].clone();
                item.sequence.id = format!("{}:{}", ds.name, item.sequence.id);
                if item.sequence.domain.is_empty() {
                    item.sequence.domain = ds.name.clone();
                }
                items.push(item);
            }
        }
    }
    let name = datasets
        .iter()
        .map(|d| d.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(RetrievalDataset::new(name, items))
}
