//! Synthetic benchmark corpora: seeded event-sequence generation, offline
//! template descriptions, prompts for an external describer, a chat client,
//! and rubric judging.

mod bench;
mod client;
mod describe;
mod prompt;

pub use bench::{build_benchmark, write_benchmark, BenchmarkManifest, Describer, SplitFractions};
pub use client::{
    describe_all, judge_all, llm_describe, mean_scores, parse_judge_scores, rubric_evaluate,
    ChatClient, ChatClientConfig, JudgeScores, MeanScores,
};
pub use describe::{first_occurrence_quartile, gap_cv, template_description};
pub use prompt::{build_generation_prompt, build_judge_prompt, GENERATION_SYSTEM_MESSAGE, JUDGE_CRITERIA};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Event, EventSequence};
use crate::error::{Error, Result};

/// Shape and timing knobs of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub event_type_names: Vec<String>,
    /// Plural unit word used in descriptions, e.g. "months".
    pub time_unit: String,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Burstiness; 0 gives pure exponential gaps.
    pub clustering: f64,
    /// Mean gap between events, in time units.
    pub base_gap: f64,
    /// Per-sequence rate multipliers are `2^u`, `u ~ U(-rate_spread, rate_spread)`.
    pub rate_spread: f64,
    /// Per-sequence log-slope of the gap size along the sequence is drawn
    /// from `U(-trend, trend)`.
    pub trend: f64,
    /// Dirichlet concentration of the per-sequence type preferences; small
    /// values give few dominant types.
    pub preference_concentration: f64,
    /// User message for an external describer; must contain `{event_sequence}`.
    pub prompt_template: String,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            event_type_names: vec!["Alpha".into(), "Beta".into(), "Gamma".into()],
            time_unit: "days".into(),
            mean_length: 10.0,
            min_length: 3,
            max_length: 30,
            clustering: 1.0,
            base_gap: 1.0,
            rate_spread: 1.0,
            trend: 1.5,
            preference_concentration: 0.5,
            prompt_template: user_template("events", "days", "event types"),
        }
    }
}

fn user_template(subject: &str, unit: &str, labels: &str) -> String {
    format!(
        "Here is a sequence of {subject}, with relative timestamps (in {unit}) and {labels}. \
         Please provide a summary that describes the timing and order of events:\n\n{{event_sequence}}"
    )
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {:?}: {m}", self.name)));
        if self.event_type_names.len() < 2 {
            return bad("needs at least two event types".into());
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.event_type_names {
            crate::data::Event::new(0.0, n.clone()).validate()?;
            if n.contains(',') {
                return bad(format!("type {n:?} contains a comma"));
            }
            if !seen.insert(n) {
                return bad(format!("duplicate type {n:?}"));
            }
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad(format!(
                "length bounds {}..={} must be positive and ordered",
                self.min_length, self.max_length
            ));
        }
        if !(self.mean_length >= self.min_length as f64 && self.mean_length <= self.max_length as f64) {
            return bad(format!(
                "mean length {} outside {}..={}",
                self.mean_length, self.min_length, self.max_length
            ));
        }
        let nonneg = [self.clustering, self.rate_spread, self.trend];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("clustering, rate_spread and trend must be finite and >= 0".into());
        }
        if !(self.base_gap > 0.0 && self.base_gap.is_finite()) {
            return bad("base_gap must be positive".into());
        }
        if !(self.preference_concentration > 0.0 && self.preference_concentration.is_finite()) {
            return bad("preference_concentration must be positive".into());
        }
        Ok(())
    }

    /// Desk-scale stand-ins for the five benchmark domains: type counts and
    /// units follow the original datasets, lengths are shortened.
    pub fn presets() -> Vec<DomainSpec> {
        vec![
            Self::stack_overflow(),
            Self::chicago_crime(),
            Self::nyc_taxi(),
            Self::us_earthquake(),
            Self::amazon_review(),
        ]
    }

    pub fn preset(name: &str) -> Result<DomainSpec> {
        Self::presets()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain preset {name:?}")))
    }

    pub fn stack_overflow() -> Self {
        Self {
            name: "stack_overflow".into(),
            event_type_names: names(&[
                "Nice Question", "Good Answer", "Popular Question", "Notable Question",
                "Famous Question", "Great Question", "Good Question", "Nice Answer",
                "Great Answer", "Necromancer", "Enlightened", "Guru", "Yearling", "Revival",
                "Announcer", "Booster", "Caucus", "Constituent", "Critic", "Editor",
                "Explainer", "Informed", "Organizer", "Scholar", "Student",
            ]),
            time_unit: "months".into(),
            mean_length: 20.0,
            min_length: 5,
            max_length: 40,
            clustering: 1.0,
            base_gap: 1.0,
            rate_spread: 1.0,
            trend: 1.5,
            preference_concentration: 0.3,
            prompt_template: user_template(
                "badges earned by a user on Stack Overflow",
                "months",
                "badge names",
            ),
        }
    }

    pub fn chicago_crime() -> Self {
        Self {
            name: "chicago_crime".into(),
            event_type_names: names(&[
                "Theft", "Battery", "Criminal Damage", "Narcotics", "Assault", "Other Offense",
                "Burglary", "Motor Vehicle Theft", "Deceptive Practice", "Robbery",
                "Criminal Trespass", "Weapons Violation", "Public Peace Violation",
                "Offense Involving Children", "Criminal Sexual Assault", "Prostitution",
                "Interference With Public Officer", "Sex Offense", "Liquor Law Violation", "Arson",
            ]),
            time_unit: "months".into(),
            mean_length: 20.0,
            min_length: 5,
            max_length: 40,
            clustering: 1.0,
            base_gap: 1.0,
            rate_spread: 1.0,
            trend: 1.5,
            preference_concentration: 0.3,
            prompt_template: user_template(
                "crime incidents reported at a block in Chicago",
                "months",
                "crime types",
            ),
        }
    }

    pub fn nyc_taxi() -> Self {
        Self {
            name: "nyc_taxi".into(),
            event_type_names: names(&[
                "Manhattan Pickup", "Manhattan Dropoff", "Brooklyn Pickup", "Brooklyn Dropoff",
                "Queens Pickup", "Queens Dropoff", "Bronx Pickup", "Bronx Dropoff",
            ]),
            time_unit: "hours".into(),
            mean_length: 30.0,
            min_length: 6,
            max_length: 50,
            clustering: 0.5,
            base_gap: 0.5,
            rate_spread: 1.0,
            trend: 1.5,
            preference_concentration: 0.5,
            prompt_template: user_template(
                "taxi trips taken by a driver in New York City",
                "hours",
                "trip locations",
            ),
        }
    }

    pub fn us_earthquake() -> Self {
        Self {
            name: "us_earthquake".into(),
            event_type_names: names(&["Small", "Medium", "Large"]),
            time_unit: "days".into(),
            mean_length: 10.0,
            min_length: 3,
            max_length: 30,
            clustering: 3.0,
            base_gap: 0.5,
            rate_spread: 2.0,
            trend: 3.0,
            preference_concentration: 1.0,
            prompt_template: user_template(
                "earthquake events in the U.S.",
                "days",
                "magnitude categories",
            ),
        }
    }

    pub fn amazon_review() -> Self {
        Self {
            name: "amazon_review".into(),
            event_type_names: names(&[
                "Books", "Sports and Outdoors", "Pet Supplies", "Grocery and Gourmet Food",
                "Electronics", "Clothing Shoes and Jewelry", "Home and Kitchen", "Toys and Games",
                "Beauty", "Health and Personal Care", "Automotive", "Tools and Home Improvement",
                "Office Products", "Video Games", "Movies and TV", "CDs and Vinyl", "Kindle Store",
                "Cell Phones and Accessories",
            ]),
            time_unit: "weeks".into(),
            mean_length: 20.0,
            min_length: 5,
            max_length: 40,
            clustering: 1.0,
            base_gap: 1.0,
            rate_spread: 1.0,
            trend: 1.5,
            preference_concentration: 0.3,
            prompt_template: user_template(
                "product reviews submitted by a user on Amazon",
                "weeks",
                "review categories",
            ),
        }
    }
}

fn dirichlet(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Burst probability ceiling for clustering intensity `c`.
fn burst_ceiling(c: f64) -> f64 {
    c / (1.0 + c)
}

/// Factor applied to a gap that falls inside a burst.
pub const BURST_GAP_SCALE: f64 = 0.1;

fn one_sequence(spec: &DomainSpec, id: String, rng: &mut ChaCha8Rng) -> EventSequence {
    let k = spec.event_type_names.len();
    let extra = spec.mean_length - spec.min_length as f64;
    let n = if extra > 0.0 {
        let p = Poisson::new(extra).expect("positive mean");
        spec.min_length + p.sample(rng) as usize
    } else {
        spec.min_length
    }
    .min(spec.max_length);

    // Early and late type preferences, blended along the sequence.
    let early = dirichlet(k, spec.preference_concentration, rng);
    let late = dirichlet(k, spec.preference_concentration, rng);
    let rate = 2f64.powf(spec.rate_spread * rng.random_range(-1.0..=1.0));
    let slope = spec.trend * rng.random_range(-1.0..=1.0);
    let p_burst = burst_ceiling(spec.clustering) * rng.random::<f64>();

    let mut events = Vec::with_capacity(n);
    let mut t = 0.0;
    for j in 0..n {
        let pos = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
        if j > 0 {
            let mean = spec.base_gap * rate * (slope * (pos - 0.5)).exp();
            let e: f64 = Exp1.sample(rng);
            let mut gap = mean * e;
            // Draw unconditionally so the stream does not depend on clustering.
            let u: f64 = rng.random();
            if u < p_burst {
                gap *= BURST_GAP_SCALE;
            }
            t += gap;
        }
        let w: Vec<f64> = early.iter().zip(&late).map(|(a, b)| (1.0 - pos) * a + pos * b).collect();
        events.push(Event::new(t, spec.event_type_names[pick(&w, rng)].clone()));
    }
    EventSequence::new(id, spec.name.clone(), events)
}

/// `n` seeded sequences with ids `<domain>-<index>`.
pub fn generate_sequences(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<EventSequence>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(4);
    Ok((0..n)
        .map(|i| one_sequence(spec, format!("{}-{:0width$}", spec.name, i), &mut rng))
        .collect())
}
