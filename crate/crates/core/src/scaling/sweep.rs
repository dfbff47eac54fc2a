//! Desk-scale grid of tiny tower trainings over model and data size.

use serde::{Deserialize, Serialize};

use super::MixedPoint;
use crate::corpus::{Document, Query};
use crate::encoder::{mrl_ladder, Tokenizer, TowerConfig, TowerParams};
use crate::error::{Error, Result};
use crate::eval::{contrastive_entropy, EntropyConfig};
use crate::stage1::{train_stage1, PreparedTriplet, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub hiddens: Vec<usize>,
    pub data_sizes: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub k_workers: usize,
    pub b_per_worker: usize,
    pub pool: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            hiddens: vec![8, 16, 24, 32],
            data_sizes: vec![1024, 2048, 4096, 8192],
            layers: 1,
            heads: 2,
            dim: 32,
            epochs: 1,
            lr: 3e-3,
            k_workers: 2,
            b_per_worker: 16,
            pool: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub hidden: usize,
    /// Non-embedding parameter count of one tower.
    pub params: usize,
    pub data: usize,
    pub entropy: f64,
}

impl SweepPoint {
    pub fn as_mixed(&self) -> MixedPoint {
        MixedPoint {
            n: self.params as f64,
            d: self.data as f64,
            y: self.entropy,
        }
    }
}

/// Trains one tower pair per (hidden, data size) cell on the leading `data`
/// triplets and measures validation contrastive entropy.
pub fn run_sweep(
    triplets: &[PreparedTriplet],
    validation: &[(Query, Document)],
    tok: &Tokenizer,
    cfg: &SweepConfig,
) -> Result<Vec<SweepPoint>> {
    let mrl = mrl_ladder((cfg.dim / 4).max(1), cfg.dim)?;
    let mut out = Vec::new();
    for &hidden in &cfg.hiddens {
        let tower = TowerConfig {
            layers: cfg.layers,
            heads: cfg.heads,
            hidden,
            dim: cfg.dim,
            vocab: tok.table_size(),
            max_pos: 128,
            causal: true,
        };
        for &data in &cfg.data_sizes {
            if data > triplets.len() {
                return Err(Error::config(format!(
                    "sweep data size {data} exceeds {} available triplets",
                    triplets.len()
                )));
            }
            let mut train = TrainConfig {
                mrl_dims: mrl.clone(),
                w_m: vec![1.0; mrl.len()],
                w_hard: vec![1.0; mrl.len()],
                k_workers: cfg.k_workers,
                b_per_worker: cfg.b_per_worker,
                epochs: cfg.epochs,
                seed: cfg.seed,
                ..TrainConfig::default()
            };
            train.optim.lr = cfg.lr;
            let init = TowerParams::init(tower, cfg.seed)?;
            let trained = train_stage1(init.clone(), init, &triplets[..data], &train)?;
            let entropy = contrastive_entropy(
                &trained.doc,
                &trained.query,
                tok,
                validation,
                &EntropyConfig {
                    pool: cfg.pool,
                    ..EntropyConfig::default()
                },
            )?;
            log::info!("sweep hidden={hidden} data={data} entropy={entropy:.4}");
            out.push(SweepPoint {
                hidden,
                params: tower.non_embedding_params(),
                data,
                entropy,
            });
        }
    }
    Ok(out)
}
