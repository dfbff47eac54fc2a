//! AdamW with linear warmup, linear decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::encoder::TowerParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            warmup_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Learning rate at `step` (0-based) of a `total`-step run.
pub fn lr_at(cfg: &AdamWConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = ((cfg.warmup_ratio * total as f64).ceil() as usize).min(total);
    if step < warmup {
        cfg.lr * (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        cfg.lr * ((total - step) as f64 / rest).clamp(0.0, 1.0)
    }
}

/// Optimizer state for a fixed list of towers updated together.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, towers: &[&TowerParams]) -> Self {
        let sizes: Vec<usize> = towers
            .iter()
            .flat_map(|t| t.blocks().into_iter().map(|(_, b)| b.len()))
            .collect();
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        towers: &mut [&mut TowerParams],
        grads: &[&TowerParams],
        lr: f64,
    ) -> f64 {
        let gnorm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && gnorm > self.cfg.clip_norm {
            self.cfg.clip_norm / gnorm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut slot = 0;
        for (tower, grad) in towers.iter_mut().zip(grads) {
            let gblocks = grad.blocks();
            for ((_, p), (_, g)) in tower.blocks_mut().into_iter().zip(gblocks) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..p.len() {
                    let gi = g[i] * clip;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    p[i] -= lr * (upd + c.weight_decay * p[i]);
                }
                slot += 1;
            }
        }
        gnorm
    }
}
