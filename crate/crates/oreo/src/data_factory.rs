//! Gold-context data factory: teacher generation, answer-aware
//! bootstrapping, and the curation filters that decide what the
//! reconstructor is allowed to learn from.
//!
//! Curation applies three predicates in order: the answer must appear in
//! the retrieved chunks at all, the generated context must contain the
//! answer, and every entity/event mentioned by the context must already
//! occur in the chunks. Each rejected candidate records the first rule it
//! failed.

use serde::{Deserialize, Serialize};

use crate::clients::{ClientParams, TeacherClient};
use crate::entities::{EntityEventSet, EntityExtractor};
use crate::metrics::contains_answer;
use crate::prompts::{PromptSet, UNKNOWN_MARKER};
use crate::retrieval::DocumentChunk;
use crate::{Error, Result};

pub const DEFAULT_BOOTSTRAP_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Bootstrapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    None,
    NoAnswerInChunks,
    AnswerMissingFromContext,
    EntityInconsistent,
}

/// One (query, chunks, teacher context) training record with its curation
/// verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldExample {
    pub query_id: String,
    pub question: String,
    pub chunks: Vec<DocumentChunk>,
    pub gold_context: String,
    pub answers: Vec<String>,
    pub provenance: Provenance,
    pub kept: bool,
    pub reject_reason: RejectReason,
}

impl GoldExample {
    fn chunk_text(&self) -> String {
        self.chunks
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ask the teacher for a gold context. The completion is stored verbatim;
/// an `[UNKNOWN]` completion passes through and is left for curation to
/// reject.
pub fn make_gold(
    query_id: &str,
    question: &str,
    chunks: &[DocumentChunk],
    answers: &[String],
    teacher: &dyn TeacherClient,
    prompts: &PromptSet,
) -> Result<GoldExample> {
    if chunks.is_empty() {
        return Err(Error::Curation(format!("query {query_id} has no chunks")));
    }
    let prompt = prompts.gold_prompt(question, chunks)?;
    let completion = teacher.complete(&prompt, &ClientParams::default())?;
    if completion.trim().is_empty() {
        return Err(Error::Teacher(format!(
            "empty completion for query {query_id}"
        )));
    }
    Ok(GoldExample {
        query_id: query_id.to_string(),
        question: question.to_string(),
        chunks: chunks.to_vec(),
        gold_context: completion,
        answers: answers.to_vec(),
        provenance: Provenance::Generated,
        kept: false,
        reject_reason: RejectReason::None,
    })
}

/// Reprompt the teacher with the known answer until a completion contains
/// it, up to `max_rounds`. Requires the answer to be present in the chunks.
pub fn bootstrap(
    query_id: &str,
    question: &str,
    chunks: &[DocumentChunk],
    answer: &str,
    all_answers: &[String],
    teacher: &dyn TeacherClient,
    prompts: &PromptSet,
    max_rounds: usize,
) -> Result<GoldExample> {
    let answer_in_chunks = chunks.iter().any(|c| contains_answer(&c.text, answer));
    if !answer_in_chunks {
        return Err(Error::Curation(format!(
            "bootstrap precondition failed: answer not present in chunks for {query_id}"
        )));
    }
    let prompt = prompts.bootstrap_prompt(question, chunks, answer)?;
    let mut last = String::new();
    for _ in 0..max_rounds {
        let completion = teacher.complete(&prompt, &ClientParams::default())?;
        if completion.trim().is_empty() {
            return Err(Error::Teacher(format!(
                "empty completion for query {query_id}"
            )));
        }
        let ok = contains_answer(&completion, answer);
        last = completion;
        if ok {
            return Ok(GoldExample {
                query_id: query_id.to_string(),
                question: question.to_string(),
                chunks: chunks.to_vec(),
                gold_context: last,
                answers: all_answers.to_vec(),
                provenance: Provenance::Bootstrapped,
                kept: false,
                reject_reason: RejectReason::None,
            });
        }
    }
    Ok(GoldExample {
        query_id: query_id.to_string(),
        question: question.to_string(),
        chunks: chunks.to_vec(),
        gold_context: last,
        answers: all_answers.to_vec(),
        provenance: Provenance::Bootstrapped,
        kept: false,
        reject_reason: RejectReason::AnswerMissingFromContext,
    })
}

/// Rule 1: some normalized answer appears inside the normalized context.
pub fn answer_alignment_filter(example: &GoldExample) -> bool {
    example
        .answers
        .iter()
        .any(|a| contains_answer(&example.gold_context, a))
}

/// Extract the normalized entity/event set of a text.
pub fn extract_entities_events(text: &str, extractor: &dyn EntityExtractor) -> EntityEventSet {
    extractor.extract(text)
}

/// Rule 2: everything the context mentions must occur in the chunks.
pub fn entity_consistency_filter(example: &GoldExample, extractor: &dyn EntityExtractor) -> bool {
    let generated = extractor.extract(&example.gold_context);
    let original = extractor.extract(&example.chunk_text());
    generated.is_subset(&original)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct CurationReport {
    pub total: usize,
    pub kept: usize,
    pub no_answer_in_chunks: usize,
    pub answer_missing_from_context: usize,
    pub entity_inconsistent: usize,
}

/// Apply all three rules to every candidate, stamping verdicts in place.
/// Returns the candidates (now carrying kept/reject_reason) and the tally.
/// Zero survivors is an error: it means the corpus or the fixtures need
/// inspection, not that training should proceed on nothing.
pub fn curate(
    mut candidates: Vec<GoldExample>,
    extractor: &dyn EntityExtractor,
) -> Result<(Vec<GoldExample>, CurationReport)> {
    let mut report = CurationReport {
        total: candidates.len(),
        ..CurationReport::default()
    };
    for example in &mut candidates {
        let answer_in_chunks = example
            .answers
            .iter()
            .any(|a| contains_answer(&example.chunk_text(), a));
        let verdict = if !answer_in_chunks {
            report.no_answer_in_chunks += 1;
            RejectReason::NoAnswerInChunks
        } else if example.gold_context.trim() == UNKNOWN_MARKER
            || !answer_alignment_filter(example)
        {
            report.answer_missing_from_context += 1;
            RejectReason::AnswerMissingFromContext
        } else if !entity_consistency_filter(example, extractor) {
            report.entity_inconsistent += 1;
            RejectReason::EntityInconsistent
        } else {
            RejectReason::None
        };
        example.reject_reason = verdict;
        example.kept = verdict == RejectReason::None;
        if example.kept {
            report.kept += 1;
        }
    }
    if report.kept == 0 {
        return Err(Error::Curation(format!(
            "curation kept 0 of {} candidates; inspect the corpus and fixtures \
             (rejects: {} no_answer_in_chunks, {} answer_missing_from_context, \
             {} entity_inconsistent)",
            report.total,
            report.no_answer_in_chunks,
            report.answer_missing_from_context,
            report.entity_inconsistent
        )));
    }
    Ok((candidates, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{FixtureTeacher, ReplayTeacher};
    use crate::entities::LexicalExtractor;

    fn chunk(id: &str, text: &str) -> DocumentChunk {
        DocumentChunk {
            id: id.into(),
            title: format!("title {id}"),
            text: text.into(),
            token_count: 0,
        }
    }

    fn example(context: &str, chunks: &[&str], answers: &[&str]) -> GoldExample {
        GoldExample {
            query_id: "q".into(),
            question: "question".into(),
            chunks: chunks.iter().enumerate().map(|(i, t)| chunk(&format!("c{i}"), t)).collect(),
            gold_context: context.into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            provenance: Provenance::Generated,
            kept: false,
            reject_reason: RejectReason::None,
        }
    }

    #[test]
    fn make_gold_stores_completion_verbatim() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "The tower stands in Paris.")];
        let prompt = prompts.gold_prompt("where is the tower", &chunks).unwrap();
        let teacher = ReplayTeacher::script(&prompt, vec!["  canned rationale  ".into()]);
        let out = make_gold("q1", "where is the tower", &chunks, &["Paris".into()], &teacher, &prompts).unwrap();
        assert_eq!(out.gold_context, "  canned rationale  ");
        assert_eq!(out.provenance, Provenance::Generated);
    }

    #[test]
    fn unknown_completion_is_never_kept() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "The tower stands in Paris.")];
        let prompt = prompts.gold_prompt("where is the tower", &chunks).unwrap();
        let teacher = ReplayTeacher::script(&prompt, vec![UNKNOWN_MARKER.into()]);
        let out = make_gold("q1", "where is the tower", &chunks, &["Paris".into()], &teacher, &prompts).unwrap();
        let (curated, report) = curate(
            vec![out, example("paris is in the chunks", &["Paris holds the tower."], &["Paris"])],
            &LexicalExtractor,
        )
        .unwrap();
        assert!(!curated[0].kept);
        assert_eq!(report.kept, 1);
    }

    #[test]
    fn empty_completion_is_an_error() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "text here")];
        let prompt = prompts.gold_prompt("q", &chunks).unwrap();
        let teacher = ReplayTeacher::script(&prompt, vec!["   ".into()]);
        assert!(make_gold("q1", "q", &chunks, &[], &teacher, &prompts).is_err());
    }

    #[test]
    fn bootstrap_stops_at_first_grounded_round() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "The tower was built in 1889.")];
        let prompt = prompts.bootstrap_prompt("when", &chunks, "1889").unwrap();
        let teacher = ReplayTeacher::script(&prompt, vec!["built in 1889, so 1889.".into()]);
        let out = bootstrap("q1", "when", &chunks, "1889", &["1889".into()], &teacher, &prompts, 3).unwrap();
        assert_eq!(teacher.call_count(), 1);
        assert_eq!(out.provenance, Provenance::Bootstrapped);
        assert_eq!(out.reject_reason, RejectReason::None);
    }

    #[test]
    fn bootstrap_succeeding_on_round_three_makes_three_calls() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "The tower was built in 1889.")];
        let prompt = prompts.bootstrap_prompt("when", &chunks, "1889").unwrap();
        let teacher = ReplayTeacher::script(
            &prompt,
            vec![
                "no date given.".into(),
                "still no date.".into(),
                "the year was 1889.".into(),
            ],
        );
        let out = bootstrap("q1", "when", &chunks, "1889", &["1889".into()], &teacher, &prompts, 3).unwrap();
        assert_eq!(teacher.call_count(), 3);
        assert_eq!(out.reject_reason, RejectReason::None);
        assert!(out.gold_context.contains("1889"));
    }

    #[test]
    fn bootstrap_exhausting_rounds_marks_failure() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "The tower was built in 1889.")];
        let prompt = prompts.bootstrap_prompt("when", &chunks, "1889").unwrap();
        let teacher = ReplayTeacher::script(&prompt, vec!["nope.".into()]);
        let out = bootstrap("q1", "when", &chunks, "1889", &["1889".into()], &teacher, &prompts, 3).unwrap();
        assert_eq!(teacher.call_count(), 3);
        assert!(!out.kept);
        assert_eq!(out.reject_reason, RejectReason::AnswerMissingFromContext);
    }

    #[test]
    fn bootstrap_requires_answer_in_chunks() {
        let prompts = PromptSet::builtin();
        let chunks = vec![chunk("c1", "irrelevant text")];
        let err = bootstrap("q1", "when", &chunks, "1889", &[], &FixtureTeacher, &prompts, 3);
        assert!(err.is_err());
    }

    #[test]
    fn alignment_filter_matches_normalized_substring() {
        // context equal to the answer passes
        assert!(answer_alignment_filter(&example("Paris", &["x"], &["paris"])));
        // no answer variant present fails
        assert!(!answer_alignment_filter(&example(
            "the city of lights",
            &["x"],
            &["paris", "france"]
        )));
        // the date inside a demonstration-style sentence passes
        let demo = "Luciano Salce, the director of the satirical film The Fascist, was born \
                    on September 25, 1922, in Rome, Italy.";
        assert!(answer_alignment_filter(&example(
            demo,
            &["x"],
            &["September 25, 1922"]
        )));
    }

    #[test]
    fn consistency_passes_verbatim_excerpts_and_rejects_new_entities() {
        let chunks = ["Luciano Salce was born in Rome in 1922. He directed films."];
        let verbatim = example("Luciano Salce was born in Rome in 1922.", &chunks, &["Rome"]);
        assert!(entity_consistency_filter(&verbatim, &LexicalExtractor));

        let hallucinated = example(
            "Luciano Salce was born in Paris in 1922.",
            &chunks,
            &["Rome"],
        );
        assert!(!entity_consistency_filter(&hallucinated, &LexicalExtractor));
    }

    #[test]
    fn consistency_labels_match_brute_force_set_comparison() {
        let cases: Vec<GoldExample> = (0..20)
            .map(|i| {
                let chunks = ["Alan Turing worked at Bletchley Park from 1939. Enigma fell."];
                if i % 3 == 0 {
                    example("Alan Turing worked at Bletchley Park.", &chunks, &["x"])
                } else if i % 3 == 1 {
                    example("Alan Turing met Churchill in 1939.", &chunks, &["x"])
                } else {
                    example("Enigma fell to Alan Turing.", &chunks, &["x"])
                }
            })
            .collect();
        for case in &cases {
            let got = entity_consistency_filter(case, &LexicalExtractor);
            // independent set computation straight from the extractor
            let gen = LexicalExtractor.extract(&case.gold_context);
            let ori = LexicalExtractor.extract(&case.chunk_text());
            let want = gen.iter().all(|e| ori.contains(e));
            assert_eq!(got, want, "context {:?}", case.gold_context);
        }
    }

    #[test]
    fn curate_keeps_everything_when_all_rules_pass() {
        let good = example(
            "Rome hosted the birth of Luciano Salce in 1922.",
            &["Luciano Salce was born in Rome in 1922."],
            &["Rome"],
        );
        let (curated, report) = curate(vec![good.clone(), good], &LexicalExtractor).unwrap();
        assert!(curated.iter().all(|e| e.kept));
        assert_eq!(report.kept, 2);
        assert_eq!(report.no_answer_in_chunks, 0);
        assert_eq!(report.answer_missing_from_context, 0);
        assert_eq!(report.entity_inconsistent, 0);
    }

    #[test]
    fn missing_answer_in_chunks_takes_precedence() {
        // the context contains the answer, the chunks do not
        let sneaky = example("the answer is Rome", &["nothing useful"], &["Rome"]);
        let good = example("Rome it is", &["Rome is a city"], &["Rome"]);
        let (curated, report) = curate(vec![sneaky, good], &LexicalExtractor).unwrap();
        assert_eq!(curated[0].reject_reason, RejectReason::NoAnswerInChunks);
        assert_eq!(report.no_answer_in_chunks, 1);
        assert_eq!(report.kept, 1);
    }

    #[test]
    fn mixed_fixture_counts_sum_to_total() {
        let mut candidates = Vec::new();
        for i in 0..10 {
            candidates.push(match i % 4 {
                0 => example("Rome it is", &["Rome is a city"], &["Rome"]),
                1 => example("the answer is Rome", &["nothing useful"], &["Rome"]),
                2 => example("no city named", &["Rome is a city"], &["Rome"]),
                _ => example("Rome and Jupiter aligned", &["Rome is a city"], &["Rome"]),
            });
        }
        let (_, report) = curate(candidates, &LexicalExtractor).unwrap();
        assert_eq!(
            report.kept
                + report.no_answer_in_chunks
                + report.answer_missing_from_context
                + report.entity_inconsistent,
            10
        );
        assert_eq!(report.total, 10);
        assert!(report.entity_inconsistent >= 2);
    }

    #[test]
    fn zero_survivors_is_an_error() {
        let bad = example("unrelated", &["nothing useful"], &["Rome"]);
        assert!(curate(vec![bad], &LexicalExtractor).is_err());
    }

    #[test]
    fn curated_verdicts_recheck_independently() {
        let mixed = vec![
            example("Rome it is", &["Rome is a city"], &["Rome"]),
            example("Rome and Jupiter aligned", &["Rome is a city"], &["Rome"]),
        ];
        let (curated, _) = curate(mixed, &LexicalExtractor).unwrap();
        for e in &curated {
            if e.kept {
                assert!(e.answers.iter().any(|a| contains_answer(&e.chunk_text(), a)));
                assert!(answer_alignment_filter(e));
                assert!(entity_consistency_filter(e, &LexicalExtractor));
                assert_eq!(e.reject_reason, RejectReason::None);
            }
        }
    }
}
