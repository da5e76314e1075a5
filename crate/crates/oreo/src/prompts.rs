//! Prompt templates for teacher calls and judge scoring.
//!
//! Templates are versioned text assets. The fillable tail slots use
//! `{{question}}`, `{{chunks}}`, `{{answer}}` and `{{text}}` markers; the
//! literal `{Retrieved document chunks}` strings inside the canned
//! demonstrations are part of the template text and are never substituted.
//! A prompts directory can override the built-in set file by file.

use std::path::Path;

use crate::retrieval::DocumentChunk;
use crate::{Error, Result};

pub const GOLD_TEMPLATE: &str = include_str!("../assets/prompts/gold_context.txt");
pub const BOOTSTRAP_TEMPLATE: &str = include_str!("../assets/prompts/bootstrap.txt");
pub const JUDGE_FAITHFULNESS_TEMPLATE: &str =
    include_str!("../assets/prompts/judge_faithfulness.txt");
pub const JUDGE_COMPLETENESS_TEMPLATE: &str =
    include_str!("../assets/prompts/judge_completeness.txt");

/// The sentinel a teacher emits when the chunks cannot answer the question.
pub const UNKNOWN_MARKER: &str = "[UNKNOWN]";

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub gold: String,
    pub bootstrap: String,
    pub judge_faithfulness: String,
    pub judge_completeness: String,
}

impl PromptSet {
    pub fn builtin() -> Self {
        PromptSet {
            gold: GOLD_TEMPLATE.to_string(),
            bootstrap: BOOTSTRAP_TEMPLATE.to_string(),
            judge_faithfulness: JUDGE_FAITHFULNESS_TEMPLATE.to_string(),
            judge_completeness: JUDGE_COMPLETENESS_TEMPLATE.to_string(),
        }
    }

    /// Load templates from a directory holding `gold_context.txt`,
    /// `bootstrap.txt`, `judge_faithfulness.txt`, `judge_completeness.txt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(PromptSet {
            gold: read("gold_context.txt")?,
            bootstrap: read("bootstrap.txt")?,
            judge_faithfulness: read("judge_faithfulness.txt")?,
            judge_completeness: read("judge_completeness.txt")?,
        })
    }

    pub fn gold_prompt(&self, question: &str, chunks: &[DocumentChunk]) -> Result<String> {
        fill(
            &self.gold,
            &[
                ("{{question}}", question),
                ("{{chunks}}", &format_chunks(chunks)),
            ],
        )
    }

    pub fn bootstrap_prompt(
        &self,
        question: &str,
        chunks: &[DocumentChunk],
        answer: &str,
    ) -> Result<String> {
        fill(
            &self.bootstrap,
            &[
                ("{{question}}", question),
                ("{{chunks}}", &format_chunks(chunks)),
                ("{{answer}}", answer),
            ],
        )
    }

    pub fn faithfulness_prompt(&self, question: &str, passages: &str, context: &str) -> Result<String> {
        fill(
            &self.judge_faithfulness,
            &[("{{text}}", &judge_text_block(question, passages, context))],
        )
    }

    pub fn completeness_prompt(&self, question: &str, passages: &str, context: &str) -> Result<String> {
        fill(
            &self.judge_completeness,
            &[("{{text}}", &judge_text_block(question, passages, context))],
        )
    }
}

/// Chunk block rendered into prompts: a title line then the chunk text.
pub fn format_chunks(chunks: &[DocumentChunk]) -> String {
    chunks
        .iter()
        .map(|c| format!("Title: {}\n{}", c.title, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The single `{{text}}` payload for judge prompts.
pub fn judge_text_block(question: &str, passages: &str, context: &str) -> String {
    format!("Query: {question}\nPassages: {passages}\nContext: {context}")
}

fn fill(template: &str, slots: &[(&str, &str)]) -> Result<String> {
    let mut out = template.to_string();
    for (marker, value) in slots {
        if !out.contains(marker) {
            return Err(Error::Teacher(format!("template is missing slot {marker}")));
        }
        out = out.replace(marker, value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(id: &str, title: &str, text: &str) -> DocumentChunk {
        DocumentChunk {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            token_count: 0,
        }
    }

    #[test]
    fn gold_prompt_fills_only_the_tail_slots() {
        let set = PromptSet::builtin();
        let chunks = vec![chunk("c1", "Cats", "The cat sat on the mat.")];
        let prompt = set.gold_prompt("where did the cat sit", &chunks).unwrap();
        // the demonstrations keep their literal placeholder text
        assert_eq!(prompt.matches("{Retrieved document chunks}").count(), 5);
        assert!(prompt.contains("where did the cat sit\nTitle: Cats\nThe cat sat on the mat."));
        assert!(prompt.ends_with("Output:"));
        assert!(!prompt.contains("{{question}}"));
    }

    #[test]
    fn bootstrap_prompt_has_answer_line() {
        let set = PromptSet::builtin();
        let chunks = vec![chunk("c1", "Cats", "The cat sat on the mat.")];
        let prompt = set
            .bootstrap_prompt("where did the cat sit", &chunks, "the mat")
            .unwrap();
        assert_eq!(prompt.matches("{Retrieved document chunks}").count(), 3);
        assert!(prompt.contains("\nthe mat\nOutput:"));
    }

    #[test]
    fn judge_prompts_embed_the_text_block() {
        let set = PromptSet::builtin();
        let p = set
            .faithfulness_prompt("q?", "some passages", "a context")
            .unwrap();
        assert!(p.contains("Text: Query: q?\nPassages: some passages\nContext: a context"));
        assert!(p.contains("**faithfulness**"));
        let p = set.completeness_prompt("q?", "p", "c").unwrap();
        assert!(p.contains("**completeness**"));
    }

    #[test]
    fn missing_slot_is_an_error() {
        let err = fill("no slots here", &[("{{question}}", "q")]);
        assert!(err.is_err());
    }

    #[test]
    fn load_from_directory_matches_builtin() {
        let set = PromptSet::load(Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/assets/prompts"
        )))
        .unwrap();
        let builtin = PromptSet::builtin();
        assert_eq!(set.gold, builtin.gold);
        assert_eq!(set.bootstrap, builtin.bootstrap);
        assert_eq!(set.judge_faithfulness, builtin.judge_faithfulness);
        assert_eq!(set.judge_completeness, builtin.judge_completeness);
    }
}
