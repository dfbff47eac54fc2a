use crate::corpus::{Document, Query};
use crate::error::{Error, Result};

use super::tokenizer::{Special, Tokenizer};

/// A token sequence plus the positions whose hidden states become embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
}

const TITLE_OPEN: &str = "Document: {'title':";
const TITLE_CLOSE: &str = "}. Predict a query term:";
const TOPIC_OPEN: &str = "Document: {'topic':";
const CONTENT_OPEN: &str = ", 'content':";
const CONTENT_CLOSE: &str = "}. Predict a query term:";
const INDUCTIVE: &str =
    ", combine the predicted query terms, and compress the above content into one word:";

/// Renders the three-placeholder document prompt.
///
/// Order: title, `[TITLE_QUERY]`, topic and content, `[CONTENT_QUERY]`, the
/// inductive clause, `[EMB]`. Only content is truncated to respect `max_len`.
/// Recorded positions are those of the tokens right before each placeholder.
pub fn render_document_prompt(
    doc: &Document,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<RenderedPrompt> {
    for (name, field) in [
        ("title", &doc.title),
        ("topic", &doc.topic),
        ("content", &doc.content),
    ] {
        if field.trim().is_empty() {
            return Err(Error::config(format!(
                "document {} has empty {name}",
                doc.id
            )));
        }
    }
    let head: Vec<u32> = [
        tok.encode(TITLE_OPEN),
        tok.encode(&doc.title),
        tok.encode(TITLE_CLOSE),
        vec![tok.special(Special::TitleQuery)],
        tok.encode(TOPIC_OPEN),
        tok.encode(&doc.topic),
        tok.encode(CONTENT_OPEN),
    ]
    .concat();
    let tail: Vec<u32> = [
        tok.encode(CONTENT_CLOSE),
        vec![tok.special(Special::ContentQuery)],
        tok.encode(INDUCTIVE),
        vec![tok.special(Special::Emb)],
    ]
    .concat();
    let skeleton = head.len() + tail.len();
    if skeleton > max_len {
        return Err(Error::PromptOverflow {
            needed: skeleton,
            max_len,
        });
    }
    let mut content = tok.encode(&doc.content);
    content.truncate(max_len - skeleton);
    let tokens = [head, content, tail].concat();
    let positions = [Special::TitleQuery, Special::ContentQuery, Special::Emb]
        .iter()
        .map(|&s| {
            let id = tok.special(s);
            tokens.iter().position(|&t| t == id).unwrap() - 1
        })
        .collect();
    Ok(RenderedPrompt { tokens, positions })
}

/// Query form for the towers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryForm {
    /// Terms followed by `[EOS]`; the embedding is read at `[EOS]`.
    Teacher,
    /// `[CLS]` followed by terms; the embedding is read at `[CLS]`.
    Student,
}

pub fn render_query(
    q: &Query,
    tok: &Tokenizer,
    form: QueryForm,
    max_len: usize,
) -> Result<RenderedPrompt> {
    let mut terms = tok.encode(&q.text);
    if terms.is_empty() {
        return Err(Error::EmptyQuery);
    }
    terms.truncate(max_len.saturating_sub(1).max(1));
    Ok(match form {
        QueryForm::Teacher => {
            terms.push(tok.special(Special::Eos));
            let last = terms.len() - 1;
            RenderedPrompt {
                tokens: terms,
                positions: vec![last],
            }
        }
        QueryForm::Student => {
            let mut tokens = vec![tok.special(Special::Cls)];
            tokens.extend(terms);
            RenderedPrompt {
                tokens,
                positions: vec![0],
            }
        }
    })
}
