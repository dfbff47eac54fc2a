//! Offline document index: k-means, residual semantic ids, IVFPQ, exact search.

mod io;
mod ivfpq;
mod kmeans;
mod residual;

pub use io::{
    load_embeddings, load_index, read_embeddings, read_index, save_embeddings, save_index,
    write_embeddings, write_index,
};
pub use ivfpq::{build_ivfpq, exact_search, Hit, IvfPqConfig, IvfPqIndex, PostingList};
pub use kmeans::{kmeans, KMeans};
pub use residual::{
    assign_semantic_id, build_residual, ResidualCodebook, ResidualStats, SemanticId, DEFAULT_K,
    DEFAULT_LAYERS,
};

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::util::rng_for;

/// Scales every row to unit length; zero rows are left untouched.
pub fn normalize_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Unit vectors with low intrinsic dimension, for index benchmarks: a random
/// linear map of `latent`-dimensional Gaussian codes plus small isotropic noise.
pub fn synthetic_vectors(
    n: usize,
    dim: usize,
    latent: usize,
    noise: f64,
    seed: u64,
) -> Array2<f64> {
    let mut rng = rng_for(seed, "index-synthetic-basis");
    let basis = Array2::from_shape_fn((latent, dim), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v / (latent as f64).sqrt()
    });
    let mut rng = rng_for(seed, "index-synthetic-points");
    let codes = Array2::from_shape_fn((n, latent), |_| StandardNormal.sample(&mut rng));
    let mut x = codes.dot(&basis);
    let scale = noise / (dim as f64).sqrt();
    x.mapv_inplace(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + scale * e
    });
    normalize_rows(&mut x);
    x
}

#[cfg(test)]
mod tests;
