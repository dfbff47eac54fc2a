use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Shape of one tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Output embedding size after projection.
    pub dim: usize,
    /// Token table size (terms plus specials).
    pub vocab: usize,
    /// Learned absolute positions available.
    pub max_pos: usize,
    /// Causal self-attention (decoder towers) or bidirectional (student).
    pub causal: bool,
}

impl TowerConfig {
    /// Default document/query tower: 2 layers, h=64, 4 heads, causal.
    pub fn teacher(vocab: usize) -> Self {
        TowerConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            dim: 128,
            vocab,
            max_pos: 128,
            causal: true,
        }
    }

    /// Default student query tower: 1 bidirectional layer, h'=32.
    pub fn student(vocab: usize) -> Self {
        TowerConfig {
            layers: 1,
            heads: 4,
            hidden: 32,
            dim: 128,
            vocab,
            max_pos: 128,
            causal: false,
        }
    }

    pub fn ff(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::config("tower sizes must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 || self.max_pos == 0 {
            return Err(Error::config("vocab and max_pos must be positive"));
        }
        Ok(())
    }

    /// Parameters outside the token and position tables.
    pub fn non_embedding_params(&self) -> usize {
        let h = self.hidden;
        let per_layer = 4 * h + 4 * h * h + 2 * h * self.ff() + self.ff() + h;
        self.layers * per_layer + 2 * h + self.dim * h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Weights of a pre-LayerNorm transformer encoder plus its output projection.
///
/// The same type doubles as a gradient accumulator (see [`TowerParams::zeros`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TowerParams {
    pub config: TowerConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// `dim × hidden` projection applied to hidden states.
    pub proj: Array2<f64>,
}

fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * std)
}

impl TowerParams {
    pub fn zeros(config: TowerConfig) -> Self {
        let (h, ff) = (config.hidden, config.ff());
        let layer = LayerParams {
            ln1_g: Array1::zeros(h),
            ln1_b: Array1::zeros(h),
            wq: Array2::zeros((h, h)),
            wk: Array2::zeros((h, h)),
            wv: Array2::zeros((h, h)),
            wo: Array2::zeros((h, h)),
            ln2_g: Array1::zeros(h),
            ln2_b: Array1::zeros(h),
            w1: Array2::zeros((h, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, h)),
            b2: Array1::zeros(h),
        };
        TowerParams {
            config,
            token_emb: Array2::zeros((config.vocab, h)),
            pos_emb: Array2::zeros((config.max_pos, h)),
            layers: vec![layer; config.layers],
            lnf_g: Array1::zeros(h),
            lnf_b: Array1::zeros(h),
            proj: Array2::zeros((config.dim, h)),
        }
    }

    /// Seeded random initialization.
    pub fn init(config: TowerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "tower-init");
        let (h, ff) = (config.hidden, config.ff());
        let w = 1.0 / (h as f64).sqrt();
        let depth = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut p = TowerParams::zeros(config);
        p.token_emb = randn(&mut rng, config.vocab, h, 1.0);
        p.pos_emb = randn(&mut rng, config.max_pos, h, 0.1);
        for l in p.layers.iter_mut() {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            l.wq = randn(&mut rng, h, h, w);
            l.wk = randn(&mut rng, h, h, w);
            l.wv = randn(&mut rng, h, h, w);
            l.wo = randn(&mut rng, h, h, w * depth);
            l.w1 = randn(&mut rng, h, ff, w);
            l.w2 = randn(&mut rng, ff, h, depth / (ff as f64).sqrt());
        }
        p.lnf_g.fill(1.0);
        p.proj = randn(&mut rng, config.dim, h, w);
        Ok(p)
    }

    /// Parameter blocks in declaration order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_emb".into(), slice(&self.token_emb)),
            ("pos_emb".into(), slice(&self.pos_emb)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{i}.ln1_g"), slice1(&l.ln1_g)),
                (format!("layer{i}.ln1_b"), slice1(&l.ln1_b)),
                (format!("layer{i}.wq"), slice(&l.wq)),
                (format!("layer{i}.wk"), slice(&l.wk)),
                (format!("layer{i}.wv"), slice(&l.wv)),
                (format!("layer{i}.wo"), slice(&l.wo)),
                (format!("layer{i}.ln2_g"), slice1(&l.ln2_g)),
                (format!("layer{i}.ln2_b"), slice1(&l.ln2_b)),
                (format!("layer{i}.w1"), slice(&l.w1)),
                (format!("layer{i}.b1"), slice1(&l.b1)),
                (format!("layer{i}.w2"), slice(&l.w2)),
                (format!("layer{i}.b2"), slice1(&l.b2)),
            ]);
        }
        out.extend([
            ("lnf_g".into(), slice1(&self.lnf_g)),
            ("lnf_b".into(), slice1(&self.lnf_b)),
            ("proj".into(), slice(&self.proj)),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("token_emb".into(), slice_mut(&mut self.token_emb)),
            ("pos_emb".into(), slice_mut(&mut self.pos_emb)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layer{i}.ln1_g"), slice1_mut(&mut l.ln1_g)),
                (format!("layer{i}.ln1_b"), slice1_mut(&mut l.ln1_b)),
                (format!("layer{i}.wq"), slice_mut(&mut l.wq)),
                (format!("layer{i}.wk"), slice_mut(&mut l.wk)),
                (format!("layer{i}.wv"), slice_mut(&mut l.wv)),
                (format!("layer{i}.wo"), slice_mut(&mut l.wo)),
                (format!("layer{i}.ln2_g"), slice1_mut(&mut l.ln2_g)),
                (format!("layer{i}.ln2_b"), slice1_mut(&mut l.ln2_b)),
                (format!("layer{i}.w1"), slice_mut(&mut l.w1)),
                (format!("layer{i}.b1"), slice1_mut(&mut l.b1)),
                (format!("layer{i}.w2"), slice_mut(&mut l.w2)),
                (format!("layer{i}.b2"), slice1_mut(&mut l.b2)),
            ]);
        }
        out.extend([
            ("lnf_g".into(), slice1_mut(&mut self.lnf_g)),
            ("lnf_b".into(), slice1_mut(&mut self.lnf_b)),
            ("proj".into(), slice_mut(&mut self.proj)),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, blockwise.
    pub fn add_assign(&mut self, other: &TowerParams) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_pos {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_pos {}",
                tokens.len(),
                self.config.max_pos
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenRange {
                id,
                size: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Final-layer hidden states, `len × hidden`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(tokens)?.hidden)
    }

    pub fn forward_cached(&self, tokens: &[u32]) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (len, h) = (tokens.len(), cfg.hidden);
        let mut x = Array2::zeros((len, h));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.token_emb.row(t as usize));
            row += &self.pos_emb.row(i);
        }
        let dh = h / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &self.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = a.dot(&lp.wq);
            let k = a.dot(&lp.wk);
            let v = a.dot(&lp.wv);
            let mut o = Array2::zeros((len, h));
            let mut probs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut p = q.slice(cols).dot(&k.slice(cols).t());
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    let visible = if cfg.causal { i + 1 } else { len };
                    let mut max = f64::NEG_INFINITY;
                    for v in row.iter_mut().take(visible) {
                        *v *= scale;
                        max = max.max(*v);
                    }
                    let mut sum = 0.0;
                    for v in row.iter_mut().take(visible) {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for (j, v) in row.iter_mut().enumerate() {
                        if j < visible {
                            *v /= sum;
                        } else {
                            *v = 0.0;
                        }
                    }
                }
                o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            x += &o.dot(&lp.wo);
            let (b, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let mut u = b.dot(&lp.w1);
            u += &lp.b1;
            let g = u.mapv(gelu);
            let mut f = g.dot(&lp.w2);
            f += &lp.b2;
            x += &f;
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                b,
                u,
                g,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            hidden,
        })
    }

    /// Backpropagates `d_hidden` (`len × hidden`) into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut TowerParams) {
        let cfg = &self.config;
        let len = cache.tokens.len();
        let dh = cfg.hidden / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = layer_norm_backward(
            d_hidden,
            &cache.lnf,
            &self.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );
        for (li, lp) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let gl = &mut grads.layers[li];
            // feed-forward block
            gl.b2 += &dx.sum_axis(Axis(0));
            gl.w2 += &c.g.t().dot(&dx);
            let mut du = dx.dot(&lp.w2.t());
            du.zip_mut_with(&c.u, |d, &u| *d *= gelu_grad(u));
            gl.b1 += &du.sum_axis(Axis(0));
            gl.w1 += &c.b.t().dot(&du);
            let db = du.dot(&lp.w1.t());
            dx += &layer_norm_backward(&db, &c.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
            // attention block
            gl.wo += &c.o.t().dot(&dx);
            let d_o = dx.dot(&lp.wo.t());
            let mut dq = Array2::zeros((len, cfg.hidden));
            let mut dk = Array2::zeros((len, cfg.hidden));
            let mut dv = Array2::zeros((len, cfg.hidden));
            for hd in 0..cfg.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let p = &c.probs[hd];
                let doh = d_o.slice(cols);
                let mut ds = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let inner: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                    ds_row.zip_mut_with(&p_row, |d, &pv| *d = pv * (*d - inner) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            gl.wq += &c.a.t().dot(&dq);
            gl.wk += &c.a.t().dot(&dk);
            gl.wv += &c.a.t().dot(&dv);
            let mut da = dq.dot(&lp.wq.t());
            da += &dk.dot(&lp.wk.t());
            da += &dv.dot(&lp.wv.t());
            dx += &layer_norm_backward(&da, &c.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }
        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            let mut te = grads.token_emb.row_mut(t as usize);
            te += &row;
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &row;
        }
    }

    /// Projects one hidden state to the embedding space: `proj · h`.
    pub fn project(&self, hidden_row: ArrayView1<f64>) -> Array1<f64> {
        self.proj.dot(&hidden_row)
    }

    /// Forward pass returning projected embeddings at `positions`.
    pub fn embed(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<Array1<f64>>> {
        let hidden = self.forward(tokens)?;
        positions
            .iter()
            .map(|&p| {
                if p >= hidden.nrows() {
                    return Err(Error::Shape(format!(
                        "position {p} beyond length {}",
                        hidden.nrows()
                    )));
                }
                Ok(self.project(hidden.row(p)))
            })
            .collect()
    }

    /// Forward pass keeping the cache needed by [`TowerParams::backward_embed`].
    pub fn embed_cached(
        &self,
        tokens: &[u32],
        positions: &[usize],
    ) -> Result<(Vec<Array1<f64>>, ForwardCache)> {
        let cache = self.forward_cached(tokens)?;
        let mut embs = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= tokens.len() {
                return Err(Error::Shape(format!(
                    "position {p} beyond length {}",
                    tokens.len()
                )));
            }
            embs.push(self.project(cache.hidden.row(p)));
        }
        Ok((embs, cache))
    }

    /// Backpropagates embedding gradients (one per position) through the
    /// projection and the encoder.
    pub fn backward_embed(
        &self,
        cache: &ForwardCache,
        positions: &[usize],
        d_embs: &[ArrayView1<f64>],
        grads: &mut TowerParams,
    ) {
        let mut d_hidden = Array2::zeros(cache.hidden.raw_dim());
        for (&p, de) in positions.iter().zip(d_embs) {
            let h = cache.hidden.row(p);
            for (r, &g) in de.iter().enumerate() {
                if g != 0.0 {
                    grads.proj.row_mut(r).scaled_add(g, &h);
                }
            }
            let mut dh = d_hidden.row_mut(p);
            dh += &self.proj.t().dot(de);
        }
        self.backward(cache, &d_hidden, grads);
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub hidden: Array2<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.outer_iter_mut().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * g;
    y += b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *db += &dy.sum_axis(Axis(0));
    *dg += &(dy * &c.xhat).sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx.outer_iter_mut().zip(c.xhat.outer_iter()).zip(&c.rstd) {
        let mean = row.sum() / n;
        let mean_x: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        row.zip_mut_with(&xh, |d, &xv| *d = r * (*d - mean - xv * mean_x));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}
