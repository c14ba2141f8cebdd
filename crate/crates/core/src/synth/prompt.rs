//! Prompts for an external describer and for the rubric judge.

use super::DomainSpec;
use crate::data::{serialize_sequence_as_text, EventSequence, DEFAULT_TIME_DECIMALS};
use crate::error::{Error, Result};

pub const GENERATION_SYSTEM_MESSAGE: &str = "You are an expert in summarizing event sequences. \
Your task is to provide a 2-5 sentence objective summary of the sequence's key patterns and \
trends without interpreting any behaviors or motivations. Focus on the sequence's order and \
timing, emphasizing how the events unfold over time. Describe general trends such as whether \
certain event types occur earlier or later, or if events cluster in certain periods. Avoid \
including exact numbers or timestamps.";

const SLOT: &str = "{event_sequence}";

/// Criterion name and its definition with the 1-5 scale.
pub const JUDGE_CRITERIA: [(&str, &str); 5] = [
    (
        "accuracy",
        "Does the description correctly represent the sequence of events, focusing on the event \
         types, their order, and timing? (1 = Completely inaccurate, 5 = Completely accurate)",
    ),
    (
        "coverage",
        "Does the description include all significant events and key details of the sequence, \
         without omitting critical information? (1 = Very incomplete, 5 = Fully comprehensive)",
    ),
    (
        "fidelity",
        "To what extent does the description capture and reflect the temporal relationships and \
         patterns (e.g., clustering, trends, or intervals) in the event sequence? (1 = No temporal \
         fidelity, 5 = High temporal fidelity)",
    ),
    (
        "clarity",
        "Is the description easy to understand, with clear language and a logical structure that \
         aids comprehension? (1 = Very unclear, 5 = Very clear)",
    ),
    (
        "conciseness",
        "Does the description provide the necessary information in a succinct manner, avoiding \
         unnecessary verbosity or redundancy? (1 = Overly verbose or incomplete, 5 = Very concise \
         and complete)",
    ),
];

const JUDGE_SYSTEM_MESSAGE: &str = "You are a careful evaluator of textual descriptions of \
event sequences. Score the description against the sequence on each criterion and reply with \
the requested score line only.";

/// System and user messages for describing `seq`.
pub fn build_generation_prompt(seq: &EventSequence, spec: &DomainSpec) -> Result<(String, String)> {
    if !spec.prompt_template.contains(SLOT) {
        return Err(Error::Config(format!(
            "prompt template of {:?} lacks the {SLOT} slot",
            spec.name
        )));
    }
    let block = serialize_sequence_as_text(seq, DEFAULT_TIME_DECIMALS)?;
    Ok((
        GENERATION_SYSTEM_MESSAGE.to_string(),
        spec.prompt_template.replace(SLOT, &block),
    ))
}

/// System and user messages asking for the five rubric scores.
pub fn build_judge_prompt(
    description: &str,
    seq: &EventSequence,
    spec: &DomainSpec,
) -> Result<(String, String)> {
    let block = serialize_sequence_as_text(seq, DEFAULT_TIME_DECIMALS)?;
    let mut user = format!(
        "Event sequence from the {} domain (relative timestamps in {}), one \"time,type\" pair per line:\n\n{block}\n\n\
         Description:\n{description}\n\nRate the description from 1 to 5 on each criterion.\n",
        spec.name, spec.time_unit
    );
    for (name, def) in JUDGE_CRITERIA {
        let mut title = name.to_string();
        title[..1].make_ascii_uppercase();
        user.push_str(&format!("- {title}: {def}\n"));
    }
    user.push_str(
        "\nAnswer with exactly one line in this format:\n\
         accuracy=<n>; coverage=<n>; fidelity=<n>; clarity=<n>; conciseness=<n>",
    );
    Ok((JUDGE_SYSTEM_MESSAGE.to_string(), user))
}
