use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small(layers: usize, hidden: usize, heads: usize, causal: bool) -> TowerConfig {
    TowerConfig {
        layers,
        heads,
        hidden,
        dim: 8,
        vocab: 23,
        max_pos: 16,
        causal,
    }
}

#[test]
fn forward_shape() {
    let p = TowerParams::init(small(2, 32, 4, true), 1).unwrap();
    let h = p.forward(&[1, 2, 3, 4, 5]).unwrap();
    assert_eq!(h.dim(), (5, 32));
    assert!(h.iter().all(|v| v.is_finite()));
}

#[test]
fn out_of_range_token_is_rejected() {
    let p = TowerParams::init(small(1, 8, 2, true), 1).unwrap();
    assert!(matches!(
        p.forward(&[1, 23]),
        Err(crate::Error::TokenRange { id: 23, .. })
    ));
}

#[test]
fn causal_prefix_is_bit_identical_under_perturbation() {
    let p = TowerParams::init(small(2, 16, 4, true), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let len = rng.random_range(2..12);
        let seq: Vec<u32> = (0..len).map(|_| rng.random_range(0..23)).collect();
        let j = rng.random_range(0..len);
        let mut other = seq.clone();
        other[j] = (seq[j] + rng.random_range(1..23)) % 23;
        let a = p.forward(&seq).unwrap();
        let b = p.forward(&other).unwrap();
        for i in 0..j {
            assert_eq!(
                a.row(i),
                b.row(i),
                "position {i} changed after perturbing {j}"
            );
        }
        assert_ne!(a.row(j), b.row(j));
    }
}

#[test]
fn bidirectional_tower_sees_the_future() {
    let p = TowerParams::init(small(1, 16, 4, false), 9).unwrap();
    let a = p.forward(&[1, 2, 3]).unwrap();
    let b = p.forward(&[1, 2, 4]).unwrap();
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn init_and_forward_are_deterministic() {
    let a = TowerParams::init(small(2, 16, 2, true), 5).unwrap();
    let b = TowerParams::init(small(2, 16, 2, true), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.forward(&[3, 1, 4]).unwrap(),
        b.forward(&[3, 1, 4]).unwrap()
    );
    assert_ne!(a, TowerParams::init(small(2, 16, 2, true), 6).unwrap());
}

/// Scalar probe of the tower output: `Σ_p c_p·e_p + ½‖e_p‖²`.
fn probe(p: &TowerParams, tokens: &[u32], positions: &[usize], coef: &[Array1<f64>]) -> f64 {
    p.embed(tokens, positions)
        .unwrap()
        .iter()
        .zip(coef)
        .map(|(e, c)| e.dot(c) + 0.5 * e.dot(e))
        .sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..6 {
        let heads = [1, 2, 4][trial % 3];
        let cfg = small(
            1 + trial % 2,
            4 * heads * (1 + trial % 2),
            heads,
            trial % 3 != 2,
        );
        let p = TowerParams::init(cfg, trial as u64).unwrap();
        let len = rng.random_range(3..8);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..23)).collect();
        let positions = vec![0, len / 2, len - 1];
        let coef: Vec<Array1<f64>> = positions
            .iter()
            .map(|_| Array1::from_shape_fn(cfg.dim, |_| rng.random_range(-1.0..1.0)))
            .collect();

        let (embs, cache) = p.embed_cached(&tokens, &positions).unwrap();
        let d: Vec<Array1<f64>> = embs.iter().zip(&coef).map(|(e, c)| c + e).collect();
        let views: Vec<_> = d.iter().map(|a| a.view()).collect();
        let mut grads = TowerParams::zeros(cfg);
        p.backward_embed(&cache, &positions, &views, &mut grads);

        let names: Vec<String> = p.blocks().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads
            .blocks()
            .into_iter()
            .map(|(_, b)| b.to_vec())
            .collect();
        for (bi, name) in names.iter().enumerate() {
            let n = analytic[bi].len();
            let picks: Vec<usize> = if name == "token_emb" {
                let h = cfg.hidden;
                tokens
                    .iter()
                    .flat_map(|&t| (0..2).map(move |j| t as usize * h + j))
                    .collect()
            } else {
                (0..n.min(12)).map(|_| rng.random_range(0..n)).collect()
            };
            let (mut num, mut ana) = (Vec::new(), Vec::new());
            for &k in &picks {
                let step = 1e-5;
                let mut plus = p.clone();
                plus.blocks_mut()[bi].1[k] += step;
                let mut minus = p.clone();
                minus.blocks_mut()[bi].1[k] -= step;
                num.push(
                    (probe(&plus, &tokens, &positions, &coef)
                        - probe(&minus, &tokens, &positions, &coef))
                        / (2.0 * step),
                );
                ana.push(analytic[bi][k]);
            }
            let diff: f64 = num
                .iter()
                .zip(&ana)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = num
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
            if scale < 1e-9 {
                continue;
            }
            assert!(
                diff / scale < 1e-4,
                "trial {trial} block {name}: rel err {}",
                diff / scale
            );
        }
    }
}
