use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::prompt::RenderedPrompt;
use crate::error::{Error, Result};

/// Default nested dimensions, `dim_low = 16` doubling up to `dim = 128`.
pub const DEFAULT_MRL_DIMS: [usize; 4] = [16, 32, 64, 128];

/// Powers-of-two ladder `{low, 2·low, …, dim}`.
pub fn mrl_ladder(low: usize, dim: usize) -> Result<Vec<usize>> {
    if low == 0 || low > dim {
        return Err(Error::config(format!("invalid MRL range {low}..={dim}")));
    }
    let mut dims = vec![];
    let mut m = low;
    while m < dim {
        dims.push(m);
        m *= 2;
    }
    if m != dim {
        return Err(Error::config(format!(
            "dim {dim} is not low·2^k for low {low}"
        )));
    }
    dims.push(dim);
    Ok(dims)
}

/// A full-length embedding whose prefixes at each MRL dimension are usable embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub vector: Vec<f64>,
    pub mrl_dims: Vec<usize>,
}

impl EmbeddingRecord {
    pub fn new(vector: Vec<f64>, mrl_dims: &[usize]) -> Self {
        EmbeddingRecord {
            vector,
            mrl_dims: mrl_dims.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// First `m` components. No renormalization; cosine similarity normalizes later.
pub fn truncate(e: &EmbeddingRecord, m: usize) -> Result<&[f64]> {
    if !e.mrl_dims.contains(&m) || m > e.vector.len() {
        return Err(Error::MrlDim(m));
    }
    Ok(&e.vector[..m])
}

/// Applies `proj` (`dim × hidden`) to the hidden state at each recorded position.
pub fn extract_embed(
    hidden: &Array2<f64>,
    prompt: &RenderedPrompt,
    proj: &Array2<f64>,
    mrl_dims: &[usize],
) -> Result<Vec<EmbeddingRecord>> {
    if proj.ncols() != hidden.ncols() {
        return Err(Error::Shape(format!(
            "projection expects width {}, hidden states have {}",
            proj.ncols(),
            hidden.ncols()
        )));
    }
    if mrl_dims.iter().any(|&m| m > proj.nrows()) {
        return Err(Error::Shape(format!(
            "MRL dims {mrl_dims:?} exceed projection output {}",
            proj.nrows()
        )));
    }
    prompt
        .positions
        .iter()
        .map(|&p| {
            if p >= hidden.nrows() {
                return Err(Error::Shape(format!(
                    "position {p} beyond {} hidden rows",
                    hidden.nrows()
                )));
            }
            let v = proj.dot(&hidden.row(p));
            Ok(EmbeddingRecord::new(v.to_vec(), mrl_dims))
        })
        .collect()
}

/// Cosine similarity of two equal-length slices; `None` when either is zero.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    (na > 0.0 && nb > 0.0).then(|| a.dot(&b) / (na * nb))
}
