use ndarray::Array2;

use super::{render_document_prompt, render_query, QueryForm, Tokenizer, TowerParams};
use crate::corpus::{Document, Query};
use crate::error::Result;

/// Index of each document embedding type within a rendered document prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DocField {
    Title = 0,
    Content = 1,
    Emb = 2,
}

impl DocField {
    pub const ALL: [DocField; 3] = [DocField::Title, DocField::Content, DocField::Emb];

    pub fn name(self) -> &'static str {
        match self {
            DocField::Title => "t",
            DocField::Content => "c",
            DocField::Emb => "e",
        }
    }
}

/// Embeds every document, returning one `n × dim` matrix per [`DocField`].
pub fn embed_documents(
    tower: &TowerParams,
    tok: &Tokenizer,
    docs: &[Document],
    max_len: usize,
) -> Result<[Array2<f64>; 3]> {
    let dim = tower.config.dim;
    let mut out = [
        Array2::zeros((docs.len(), dim)),
        Array2::zeros((docs.len(), dim)),
        Array2::zeros((docs.len(), dim)),
    ];
    for (i, d) in docs.iter().enumerate() {
        let prompt = render_document_prompt(d, tok, max_len)?;
        let embs = tower.embed(&prompt.tokens, &prompt.positions)?;
        for (mat, e) in out.iter_mut().zip(embs) {
            mat.row_mut(i).assign(&e);
        }
    }
    Ok(out)
}

/// Embeds each query under `form`, one row per query.
pub fn embed_queries(
    tower: &TowerParams,
    tok: &Tokenizer,
    queries: &[Query],
    form: QueryForm,
    max_len: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((queries.len(), tower.config.dim));
    for (i, q) in queries.iter().enumerate() {
        let prompt = render_query(q, tok, form, max_len)?;
        let e = tower.embed(&prompt.tokens, &prompt.positions)?;
        out.row_mut(i).assign(&e[0]);
    }
    Ok(out)
}
