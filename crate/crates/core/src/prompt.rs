//! Prompt templates with whitespace-delimited `{slot}` placeholders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::{TokenId, Tokenizer, SEP, SEP_LITERAL};

pub const SLOTS: [&str; 4] = ["query", "title", "passage", "acceptance"];

/// Values substituted into a template; unset slots render empty.
#[derive(Debug, Clone, Copy)]
pub struct SlotValues<'a, T: ?Sized> {
    pub query: Option<&'a T>,
    pub title: Option<&'a T>,
    pub passage: Option<&'a T>,
    pub acceptance: Option<&'a T>,
}

impl<T: ?Sized> Default for SlotValues<'_, T> {
    fn default() -> Self {
        SlotValues {
            query: None,
            title: None,
            passage: None,
            acceptance: None,
        }
    }
}

impl<'a, T: ?Sized> SlotValues<'a, T> {
    fn get(&self, slot: &str) -> Option<&'a T> {
        match slot {
            "query" => self.query,
            "title" => self.title,
            "passage" => self.passage,
            "acceptance" => self.acceptance,
            _ => None,
        }
    }
}

fn slot_name(word: &str) -> Option<&str> {
    word.strip_prefix('{')?.strip_suffix('}')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Self {
        PromptTemplate(template.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Placeholders must be whole words naming a known slot; `required` slots
    /// must all appear.
    pub fn validate(&self, name: &str, required: &[&str]) -> Result<()> {
        let words: Vec<&str> = self.0.split_whitespace().collect();
        for w in &words {
            if w.contains(['{', '}']) {
                match slot_name(w) {
                    Some(s) if SLOTS.contains(&s) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "{name} template: {w:?} is not a whitespace-delimited known slot"
                        )))
                    }
                }
            }
        }
        for r in required {
            if !words.iter().any(|w| slot_name(w) == Some(r)) {
                return Err(Error::Config(format!("{name} template lacks {{{r}}}")));
            }
        }
        Ok(())
    }

    /// Literal words of the template, for vocabulary coverage.
    pub fn literal_words(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace().filter(|w| slot_name(w).is_none())
    }

    pub fn render(&self, values: &SlotValues<'_, str>) -> String {
        let mut out: Vec<&str> = Vec::new();
        for w in self.0.split_whitespace() {
            match slot_name(w) {
                Some(s) => out.extend(values.get(s).into_iter().flat_map(str::split_whitespace)),
                None => out.push(w),
            }
        }
        out.join(" ")
    }

    /// Token-level rendering; equals `tok.encode(&self.render(..))` for the
    /// word-level tokenizer but splices pre-encoded slot values.
    pub fn render_tokens(&self, tok: &Tokenizer, values: &SlotValues<'_, [TokenId]>) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in self.0.split_whitespace() {
            match slot_name(w) {
                Some(s) => out.extend_from_slice(values.get(s).unwrap_or(&[])),
                None if w == SEP_LITERAL => out.push(SEP),
                None => out.extend(tok.encode(w)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    /// Title generation prompt. Passage generation continues it with the
    /// generated title and a separator.
    pub retrieval: PromptTemplate,
    /// Self-assessment prompt, followed by the acceptance or rejection phrase.
    pub assessment: PromptTemplate,
    /// Answer generation prompt.
    pub rag: PromptTemplate,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            retrieval: PromptTemplate::new("query: {query} retrieve:"),
            assessment: PromptTemplate::new(
                "query: {query} title: {title} passage: {passage} assessment:",
            ),
            rag: PromptTemplate::new(
                "query: {query} title: {title} passage: {passage} assessment: {acceptance} <sep>",
            ),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate("retrieval", &["query"])?;
        self.assessment
            .validate("assessment", &["query", "title", "passage"])?;
        self.rag.validate("rag", &["query", "passage"])
    }

    pub fn literal_words(&self) -> Vec<&str> {
        self.retrieval
            .literal_words()
            .chain(self.assessment.literal_words())
            .chain(self.rag.literal_words())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusStore, Document};

    #[test]
    fn render_text_and_tokens_agree() {
        let t = PromptTemplates::default();
        let store = CorpusStore::from_documents(
            vec![Document {
                doc_id: "d".into(),
                title: "apple pie".into(),
                text: "apple pie is sweet.".into(),
            }],
            200,
        )
        .unwrap();
        let words = t.literal_words();
        let tok = Tokenizer::build(&store, &words);
        let text = t.rag.render(&SlotValues {
            query: Some("what  is apple"),
            title: Some("apple pie"),
            passage: Some("apple pie is sweet."),
            acceptance: Some("can answer"),
        });
        assert_eq!(
            text,
            "query: what is apple title: apple pie passage: apple pie is sweet. assessment: can answer <sep>"
        );
        let q = tok.encode("what is apple");
        let ti = tok.encode("apple pie");
        let p = tok.encode("apple pie is sweet.");
        let a = tok.encode("can answer");
        let ids = t.rag.render_tokens(
            &tok,
            &SlotValues {
                query: Some(&q[..]),
                title: Some(&ti[..]),
                passage: Some(&p[..]),
                acceptance: Some(&a[..]),
            },
        );
        assert_eq!(ids, tok.encode(&text));
    }

    #[test]
    fn validation() {
        assert!(PromptTemplates::default().validate().is_ok());
        assert!(PromptTemplate::new("q:{query}").validate("x", &[]).is_err());
        assert!(PromptTemplate::new("{nope}").validate("x", &[]).is_err());
        assert!(PromptTemplate::new("plain").validate("x", &["query"]).is_err());
    }
}
