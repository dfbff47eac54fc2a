use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, nearest};
use super::residual::{ResidualCodebook, SemanticId};
use crate::corpus::DocId;
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfPqConfig {
    pub nlist: usize,
    pub m_sub: usize,
    pub nbits: u32,
    pub iters: usize,
    /// Training sample cap per centroid for coarse and PQ k-means.
    pub train_per_centroid: usize,
    pub seed: u64,
}

impl Default for IvfPqConfig {
    fn default() -> Self {
        IvfPqConfig {
            nlist: 256,
            m_sub: 16,
            nbits: 8,
            iters: 20,
            train_per_centroid: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PostingList {
    pub ids: Vec<DocId>,
    /// `m_sub` bytes per entry.
    pub codes: Vec<u8>,
}

/// Search result; `distance` is squared L2 between the query and the
/// reconstructed document vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: DocId,
    pub distance: f64,
}

impl Hit {
    /// Cosine similarity implied by `distance` for unit vectors.
    pub fn cosine(&self) -> f64 {
        1.0 - self.distance / 2.0
    }
}

/// Inverted-file index with product-quantized residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct IvfPqIndex {
    pub dim: usize,
    pub nbits: u32,
    pub centroids: Array2<f64>,
    /// `m_sub × 2^nbits × dim/m_sub`. Entry 0 of every subspace is the zero vector.
    pub codebooks: Array3<f64>,
    pub lists: Vec<PostingList>,
    /// Optional residual k-means codebook with each document's semantic id.
    pub semantic: Option<(ResidualCodebook, Vec<(DocId, SemanticId)>)>,
}

fn training_rows(n: usize, cap: usize, seed: u64, stream: &str) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = rng_for(seed, stream);
    let mut rows = sample(&mut rng, n, cap).into_vec();
    rows.sort_unstable();
    rows
}

/// Sorts by ascending distance then id and keeps `topk`.
fn finish(mut hits: Vec<Hit>, topk: usize) -> Vec<Hit> {
    let cmp = |a: &Hit, b: &Hit| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id));
    if hits.len() > topk && topk > 0 {
        hits.select_nth_unstable_by(topk - 1, cmp);
    }
    hits.truncate(topk);
    hits.sort_by(cmp);
    hits
}

impl IvfPqIndex {
    pub fn nlist(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn m_sub(&self) -> usize {
        self.codebooks.dim().0
    }

    pub fn dsub(&self) -> usize {
        self.codebooks.dim().2
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// PQ code of a residual vector.
    pub fn encode_residual(&self, r: ArrayView1<f64>) -> Vec<u8> {
        let ds = self.dsub();
        (0..self.m_sub())
            .map(|j| {
                let sub = r.slice(s![j * ds..(j + 1) * ds]);
                let book = self.codebooks.index_axis(Axis(0), j);
                let (idx, _) = nearest(sub.insert_axis(Axis(0)), book);
                idx[0] as u8
            })
            .collect()
    }

    /// Coarse list and PQ code for `v`.
    pub fn encode(&self, v: ArrayView1<f64>) -> (usize, Vec<u8>) {
        let (list, _) = nearest(v.insert_axis(Axis(0)), self.centroids.view());
        let r = &v - &self.centroids.row(list[0]);
        (list[0], self.encode_residual(r.view()))
    }

    pub fn reconstruct(&self, list: usize, code: &[u8]) -> ndarray::Array1<f64> {
        let ds = self.dsub();
        let mut out = self.centroids.row(list).to_owned();
        for (j, &c) in code.iter().enumerate() {
            let mut seg = out.slice_mut(s![j * ds..(j + 1) * ds]);
            seg += &self.codebooks.slice(s![j, c as usize, ..]);
        }
        out
    }

    /// Approximate nearest neighbours by asymmetric distance computation over
    /// the `nprobe` closest coarse cells.
    pub fn search(&self, q: ArrayView1<f64>, nprobe: usize, topk: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query dim {} vs index dim {}",
                q.len(),
                self.dim
            )));
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::config(format!(
                "nprobe must be in 1..={}",
                self.nlist()
            )));
        }
        let mut cells: Vec<(f64, usize)> = self
            .centroids
            .outer_iter()
            .enumerate()
            .map(|(c, cent)| (q.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum(), c))
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (m, ksub, ds) = self.codebooks.dim();
        let mut table = vec![0.0; m * ksub];
        let mut hits = Vec::new();
        for &(_, c) in cells.iter().take(nprobe) {
            let list = &self.lists[c];
            if list.ids.is_empty() {
                continue;
            }
            let r = &q - &self.centroids.row(c);
            for j in 0..m {
                let sub = r.slice(s![j * ds..(j + 1) * ds]);
                for k in 0..ksub {
                    let word = self.codebooks.slice(s![j, k, ..]);
                    table[j * ksub + k] =
                        sub.iter().zip(word).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
            for (id, code) in list.ids.iter().zip(list.codes.chunks_exact(m)) {
                let distance = code
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| table[j * ksub + k as usize])
                    .sum();
                hits.push(Hit { id: *id, distance });
            }
        }
        Ok(finish(hits, topk))
    }
}

/// Builds the coarse quantizer, trains one PQ codebook per subspace on
/// residuals, then files every vector.
pub fn build_ivfpq(
    vectors: ArrayView2<f64>,
    ids: &[DocId],
    cfg: &IvfPqConfig,
) -> Result<IvfPqIndex> {
    let (n, dim) = vectors.dim();
    if ids.len() != n {
        return Err(Error::Shape(format!("{} ids for {n} vectors", ids.len())));
    }
    if cfg.m_sub == 0 || dim % cfg.m_sub != 0 {
        return Err(Error::config(format!(
            "dim {dim} is not divisible by m_sub {}",
            cfg.m_sub
        )));
    }
    if !(1..=8).contains(&cfg.nbits) {
        return Err(Error::config(format!(
            "nbits must be in 1..=8, got {}",
            cfg.nbits
        )));
    }
    let ksub = 1usize << cfg.nbits;
    if cfg.nlist == 0 || n < cfg.nlist.max(ksub) {
        return Err(Error::config(format!(
            "{n} vectors cannot train nlist={} and 2^nbits={ksub}",
            cfg.nlist
        )));
    }
    let cap = cfg.train_per_centroid.max(1);
    let coarse_rows = training_rows(n, cap * cfg.nlist, cfg.seed, "ivf-coarse");
    let coarse_train = vectors.select(Axis(0), &coarse_rows);
    let coarse = kmeans(coarse_train.view(), cfg.nlist, cfg.iters, cfg.seed)?;
    let (assign, _) = nearest(vectors, coarse.centroids.view());
    let mut residuals = vectors.to_owned();
    for (mut r, &c) in residuals.outer_iter_mut().zip(&assign) {
        r -= &coarse.centroids.row(c);
    }

    let ds = dim / cfg.m_sub;
    let mut codebooks = Array3::zeros((cfg.m_sub, ksub, ds));
    let pq_rows = training_rows(n, cap * ksub, cfg.seed, "ivf-pq");
    for j in 0..cfg.m_sub {
        let sub = residuals
            .slice(s![.., j * ds..(j + 1) * ds])
            .select(Axis(0), &pq_rows);
        // Word 0 stays at the origin, so every code is at least as close as
        // the bare coarse centroid.
        let k = (ksub - 1).min(sub.nrows());
        if k == 0 {
            continue;
        }
        let km = kmeans(
            sub.view(),
            k,
            cfg.iters,
            cfg.seed.wrapping_add(1 + j as u64),
        )?;
        codebooks.slice_mut(s![j, 1..=k, ..]).assign(&km.centroids);
        for extra in k + 1..ksub {
            codebooks
                .slice_mut(s![j, extra, ..])
                .assign(&km.centroids.row(k - 1));
        }
    }

    let mut index = IvfPqIndex {
        dim,
        nbits: cfg.nbits,
        centroids: coarse.centroids,
        codebooks,
        lists: vec![PostingList::default(); cfg.nlist],
        semantic: None,
    };
    let mut codes = vec![0u8; n * cfg.m_sub];
    for j in 0..cfg.m_sub {
        let sub = residuals.slice(s![.., j * ds..(j + 1) * ds]);
        let (idx, _) = nearest(sub, index.codebooks.index_axis(Axis(0), j));
        for (i, k) in idx.into_iter().enumerate() {
            codes[i * cfg.m_sub + j] = k as u8;
        }
    }
    for (i, &c) in assign.iter().enumerate() {
        let list = &mut index.lists[c];
        list.ids.push(ids[i]);
        list.codes
            .extend_from_slice(&codes[i * cfg.m_sub..(i + 1) * cfg.m_sub]);
    }
    Ok(index)
}

/// Brute-force squared-L2 ranking with ties broken by id.
pub fn exact_search(
    vectors: ArrayView2<f64>,
    ids: &[DocId],
    q: ArrayView1<f64>,
    topk: usize,
) -> Vec<Hit> {
    let hits = vectors
        .outer_iter()
        .zip(ids)
        .map(|(v, &id)| Hit {
            id,
            distance: v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
        })
        .collect();
    finish(hits, topk)
}
