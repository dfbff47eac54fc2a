//! Tokenization, prompt rendering, transformer towers and MRL embeddings.

mod batch;
mod checkpoint;
mod mrl;
mod prompt;
mod tokenizer;
mod tower;

pub use batch::{embed_documents, embed_queries, DocField};
pub use checkpoint::{load_tower, read_tower, save_tower, write_tower};
pub use mrl::{cosine, extract_embed, mrl_ladder, truncate, EmbeddingRecord, DEFAULT_MRL_DIMS};
pub use prompt::{render_document_prompt, render_query, QueryForm, RenderedPrompt};
pub use tokenizer::{Special, Tokenizer};
pub use tower::{ForwardCache, LayerParams, TowerConfig, TowerParams};

/// Which tower a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TowerRole {
    Doc,
    Query,
    Student,
}

impl TowerRole {
    pub fn default_config(self, tok: &Tokenizer) -> TowerConfig {
        match self {
            TowerRole::Doc | TowerRole::Query => TowerConfig::teacher(tok.table_size()),
            TowerRole::Student => TowerConfig::student(tok.table_size()),
        }
    }
}

#[cfg(test)]
mod tests;
