//! Offline, deterministic descriptions built from summary statistics of a
//! sequence. The wording never contains digits: type names have their
//! digits spelled out.

use std::collections::BTreeMap;

use super::DomainSpec;
use crate::data::EventSequence;

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

fn spell_digits(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut after_digit = false;
    for c in s.chars() {
        let needs_space = out.chars().last().is_some_and(char::is_alphanumeric);
        match c.to_digit(10) {
            Some(d) => {
                if needs_space {
                    out.push(' ');
                }
                out.push_str(DIGIT_WORDS[d as usize]);
                after_digit = true;
            }
            None => {
                if after_digit && c.is_alphanumeric() {
                    out.push(' ');
                }
                out.push(c);
                after_digit = false;
            }
        }
    }
    out
}

fn quoted(name: &str) -> String {
    format!("\"{}\"", spell_digits(name))
}

fn join(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [rest @ .., last] => format!("{} and {last}", rest.join(", ")),
    }
}

/// Quartile (0..=3) of the sequence span in which `t` falls.
pub fn first_occurrence_quartile(t: f64, t_last: f64) -> usize {
    if t_last <= 0.0 {
        return 0;
    }
    ((4.0 * t / t_last).floor() as usize).min(3)
}

/// Coefficient of variation of the inter-event gaps (population form);
/// `None` with fewer than two gaps.
pub fn gap_cv(seq: &EventSequence) -> Option<f64> {
    let gaps: Vec<f64> = seq.events.windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.len() < 2 {
        return None;
    }
    let n = gaps.len() as f64;
    let m = gaps.iter().sum::<f64>() / n;
    if m <= 0.0 {
        return Some(0.0);
    }
    let var = gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / m)
}

struct TypeStat<'a> {
    name: &'a str,
    count: usize,
    first: f64,
}

fn type_stats(seq: &EventSequence) -> Vec<TypeStat<'_>> {
    let mut map: BTreeMap<&str, TypeStat<'_>> = BTreeMap::new();
    for e in &seq.events {
        map.entry(e.type_text.as_str())
            .and_modify(|s| s.count += 1)
            .or_insert(TypeStat { name: &e.type_text, count: 1, first: e.t });
    }
    let mut v: Vec<_> = map.into_values().collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then(a.name.cmp(b.name)));
    v
}

fn dominance_sentence(stats: &[TypeStat<'_>], n: usize) -> String {
    if stats.len() == 1 {
        return format!("The sequence consists entirely of {} events.", quoted(stats[0].name));
    }
    let share = |s: &TypeStat<'_>| s.count as f64 / n as f64;
    if share(&stats[0]) >= 0.5 {
        let mut s = format!("{} events dominate the sequence", quoted(stats[0].name));
        if share(&stats[1]) >= 0.15 {
            s.push_str(&format!(", with {} as the next most frequent type", quoted(stats[1].name)));
        }
        s.push('.');
        return s;
    }
    let mut top: Vec<String> = stats
        .iter()
        .take(3)
        .filter(|s| share(s) >= 0.15)
        .map(|s| quoted(s.name))
        .collect();
    if top.len() < 2 {
        top = stats.iter().take(2).map(|s| quoted(s.name)).collect();
    }
    format!("The most frequent types are {}.", join(&top))
}

fn placement_sentence(seq: &EventSequence, stats: &[TypeStat<'_>]) -> String {
    let t_last = seq.events.last().map_or(0.0, |e| e.t);
    let opener = &seq.events[0].type_text;
    let mut late: Vec<&TypeStat<'_>> = stats
        .iter()
        .filter(|s| first_occurrence_quartile(s.first, t_last) >= 2)
        .collect();
    late.sort_by(|a, b| a.first.total_cmp(&b.first).then(a.name.cmp(b.name)));
    let late: Vec<String> = late.iter().take(3).map(|s| quoted(s.name)).collect();
    let head = format!("The sequence opens with {}", quoted(opener));
    match late.len() {
        0 => format!("{head}, and no type is held back until later."),
        1 => format!("{head}, while {} only appears later on.", late[0]),
        _ => format!("{head}, while {} only appear later on.", join(&late)),
    }
}

fn clustering_sentence(seq: &EventSequence) -> &'static str {
    match gap_cv(seq) {
        None => "There are too few events to show any clustering.",
        Some(cv) if cv < 1.3 => "Events arrive at a fairly steady pace without notable clustering.",
        Some(cv) if cv < 2.2 => "Some events cluster together in short bursts.",
        Some(_) => "Events come in tight bursts separated by long quiet stretches.",
    }
}

fn span_sentence(seq: &EventSequence, spec: &DomainSpec) -> String {
    let n = seq.len();
    let t_last = seq.events.last().map_or(0.0, |e| e.t);
    if n < 2 || t_last <= 0.0 {
        return "All events happen at practically the same moment.".into();
    }
    let ratio = t_last / ((n - 1) as f64 * spec.base_gap);
    let word = if ratio < 0.4 {
        "brief"
    } else if ratio > 2.5 {
        "long"
    } else {
        "moderate"
    };
    format!("Overall the sequence unfolds over a {word} period of {}.", spell_digits(&spec.time_unit))
}

fn trend_sentence(seq: &EventSequence) -> Option<&'static str> {
    let gaps: Vec<f64> = seq.events.windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.len() < 5 {
        return None;
    }
    let half = gaps.len() / 2;
    let first = gaps[..half].iter().sum::<f64>() / half as f64;
    let second = gaps[gaps.len() - half..].iter().sum::<f64>() / half as f64;
    if first <= 0.0 || second <= 0.0 {
        return None;
    }
    let r = second / first;
    if r < 1.0 / 3.0 {
        Some("Activity speeds up toward the end.")
    } else if r > 3.0 {
        Some("Activity slows down toward the end.")
    } else {
        None
    }
}

/// Four or five sentences on dominant types, early and late types,
/// clustering, overall span and, when marked, a change of pace.
pub fn template_description(seq: &EventSequence, spec: &DomainSpec) -> String {
    if seq.is_empty() {
        return "The sequence is empty. No events are recorded.".into();
    }
    let stats = type_stats(seq);
    let mut parts = vec![
        dominance_sentence(&stats, seq.len()),
        placement_sentence(seq, &stats),
        clustering_sentence(seq).to_string(),
        span_sentence(seq, spec),
    ];
    if let Some(t) = trend_sentence(seq) {
        parts.push(t.to_string());
    }
    parts.join(" ")
}
