use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, nearest};
use crate::error::{Error, Result};

pub const DEFAULT_LAYERS: usize = 6;
pub const DEFAULT_K: usize = 64;

/// One centroid index per residual layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<u32>);

/// Stacked k-means codebooks, layer `l` trained on the residuals left by
/// layers `< l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCodebook {
    pub layers: Vec<Array2<f64>>,
}

/// Per-build diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Mean residual norm after each layer.
    pub mean_residual_norm: Vec<f64>,
}

impl ResidualCodebook {
    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.ncols())
    }

    pub fn k(&self) -> usize {
        self.layers.first().map_or(0, |l| l.nrows())
    }

    /// Greedy nearest-centroid path and the final residual.
    pub fn encode(&self, v: ArrayView1<f64>) -> (SemanticId, Array1<f64>) {
        let mut r = v.to_owned();
        let mut ids = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (idx, _) = nearest(r.view().insert_axis(ndarray::Axis(0)), layer.view());
            r -= &layer.row(idx[0]);
            ids.push(idx[0] as u32);
        }
        (SemanticId(ids), r)
    }

    /// Sum of the chosen centroids.
    pub fn reconstruct(&self, id: &SemanticId) -> Result<Array1<f64>> {
        if id.0.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "semantic id has {} layers, codebook has {}",
                id.0.len(),
                self.layers.len()
            )));
        }
        let mut out = Array1::zeros(self.dim());
        for (layer, &c) in self.layers.iter().zip(&id.0) {
            if c as usize >= layer.nrows() {
                return Err(Error::Shape(format!(
                    "centroid {c} beyond k={}",
                    layer.nrows()
                )));
            }
            out += &layer.row(c as usize);
        }
        Ok(out)
    }
}

pub fn assign_semantic_id(codebook: &ResidualCodebook, v: ArrayView1<f64>) -> SemanticId {
    codebook.encode(v).0
}

/// Trains `n_layers` residual k-means layers of `k` centroids each.
pub fn build_residual(
    vectors: ArrayView2<f64>,
    k: usize,
    n_layers: usize,
    iters: usize,
    seed: u64,
) -> Result<(ResidualCodebook, ResidualStats)> {
    if n_layers == 0 {
        return Err(Error::config("residual codebook needs at least one layer"));
    }
    let mut residual = vectors.to_owned();
    let mut layers = Vec::with_capacity(n_layers);
    let mut mean_residual_norm = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let km = kmeans(residual.view(), k, iters, seed.wrapping_add(l as u64))?;
        let (idx, _) = nearest(residual.view(), km.centroids.view());
        for (mut r, &c) in residual.outer_iter_mut().zip(&idx) {
            r -= &km.centroids.row(c);
        }
        let norms: f64 = residual.outer_iter().map(|r| r.dot(&r).sqrt()).sum();
        mean_residual_norm.push(norms / residual.nrows() as f64);
        layers.push(km.centroids);
    }
    Ok((
        ResidualCodebook { layers },
        ResidualStats { mean_residual_norm },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_centroid_layers_center_the_data() {
        let pts = random_points(40, 3, 1);
        let (cb, _) = build_residual(pts.view(), 1, 2, 10, 0).unwrap();
        let mean = pts.mean_axis(Axis(0)).unwrap();
        for (a, b) in cb.layers[0].row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let (_, r) = cb.encode(pts.row(0));
        let centered = &pts.row(0) - &mean;
        for (a, b) in r.iter().zip(&centered) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn telescoping_and_bounds() {
        let pts = random_points(500, 8, 2);
        let (cb, stats) = build_residual(pts.view(), 16, 6, 15, 3).unwrap();
        assert_eq!(stats.mean_residual_norm.len(), 6);
        assert!(stats.mean_residual_norm.last() <= stats.mean_residual_norm.first());
        for v in pts.outer_iter().take(100) {
            let (id, r) = cb.encode(v);
            let recon = cb.reconstruct(&id).unwrap();
            let err: f64 = (&recon + &r - &v)
                .mapv(f64::abs)
                .fold(0.0, |a, &b| a.max(b));
            assert!(err < 1e-9);
            let gap = (&v - &recon).mapv(|x| x * x).sum().sqrt();
            assert!((gap - r.dot(&r).sqrt()).abs() < 1e-9);
        }
        let fuzz = random_points(1000, 8, 4);
        for v in fuzz.outer_iter() {
            let id = assign_semantic_id(&cb, v);
            assert_eq!(id.0.len(), 6);
            assert!(id.0.iter().all(|&c| (c as usize) < 16));
            assert_eq!(assign_semantic_id(&cb, v), id);
        }
    }

    #[test]
    fn exact_centroid_follows_nearest_to_zero_path() {
        let pts = random_points(200, 4, 5);
        let (cb, _) = build_residual(pts.view(), 8, 3, 10, 6).unwrap();
        let c = cb.layers[0].row(5).to_owned();
        let id = assign_semantic_id(&cb, c.view());
        assert_eq!(id.0[0], 5);
        // The residual is exactly zero after layer 0, so layer 1 takes the
        // centroid nearest the origin and later layers continue from there.
        let mut r = Array2::<f64>::zeros((1, 4));
        for l in 1..3 {
            let (idx, _) = nearest(r.view(), cb.layers[l].view());
            assert_eq!(id.0[l] as usize, idx[0]);
            let mut row = r.row_mut(0);
            row -= &cb.layers[l].row(idx[0]);
        }
    }
}
