use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::DocId;
use crate::error::Error;

fn small_cfg(nlist: usize, m_sub: usize, nbits: u32) -> IvfPqConfig {
    IvfPqConfig {
        nlist,
        m_sub,
        nbits,
        iters: 10,
        train_per_centroid: 64,
        seed: 3,
    }
}

fn ids(n: usize) -> Vec<DocId> {
    (0..n as DocId).map(|i| i * 3 + 1).collect()
}

fn sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn build_preconditions() {
    let v = synthetic_vectors(300, 128, 8, 0.1, 1);
    let id = ids(300);
    assert!(matches!(
        build_ivfpq(v.view(), &id, &small_cfg(4, 15, 8)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        build_ivfpq(v.view(), &id, &small_cfg(4, 16, 9)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        build_ivfpq(v.view(), &id, &small_cfg(301, 16, 4)),
        Err(Error::Config(_))
    ));
    let few = synthetic_vectors(200, 128, 8, 0.1, 1);
    assert!(matches!(
        build_ivfpq(few.view(), &ids(200), &small_cfg(4, 16, 8)),
        Err(Error::Config(_))
    ));
}

#[test]
fn every_doc_is_filed_once_with_sixteen_byte_codes() {
    let v = synthetic_vectors(600, 128, 8, 0.1, 2);
    let id = ids(600);
    let ix = build_ivfpq(v.view(), &id, &small_cfg(8, 16, 8)).unwrap();
    assert_eq!(ix.len(), 600);
    let mut seen = HashSet::new();
    for list in &ix.lists {
        assert_eq!(list.codes.len(), list.ids.len() * 16);
        for d in &list.ids {
            assert!(seen.insert(*d));
        }
    }
    assert_eq!(seen, id.iter().copied().collect());
}

#[test]
fn reconstruction_is_no_worse_than_the_coarse_centroid() {
    let v = synthetic_vectors(800, 64, 12, 0.2, 3);
    let ix = build_ivfpq(v.view(), &ids(800), &small_cfg(8, 8, 4)).unwrap();
    for row in v.outer_iter() {
        let (list, code) = ix.encode(row);
        let recon = ix.reconstruct(list, &code);
        let coarse = sq(row, ix.centroids.row(list));
        assert!(sq(row, recon.view()) <= coarse + 1e-12);
    }
}

#[test]
fn exhaustive_settings_match_exact_search() {
    // Coordinates from a small grid give few distinct residual values per
    // coordinate, so one-dimensional subspaces with 256 words encode exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Array2::from_shape_fn((300, 8), |_| rng.random_range(-2..=2) as f64);
    let id = ids(300);
    let ix = build_ivfpq(v.view(), &id, &small_cfg(4, 8, 8)).unwrap();
    for _ in 0..20 {
        let q = Array1::from_shape_fn(8, |_| rng.random_range(-2.5..2.5));
        let approx = ix.search(q.view(), 4, 300).unwrap();
        let exact = exact_search(v.view(), &id, q.view(), 300);
        assert_eq!(approx.len(), exact.len());
        for (a, e) in approx.iter().zip(&exact) {
            assert!((a.distance - e.distance).abs() < 1e-9);
        }
        let a_ids: Vec<_> = approx.iter().map(|h| h.id).collect();
        let e_ids: Vec<_> = exact.iter().map(|h| h.id).collect();
        assert_eq!(a_ids, e_ids);
    }
}

#[test]
fn search_clamps_and_validates() {
    let v = synthetic_vectors(300, 32, 6, 0.1, 5);
    let ix = build_ivfpq(v.view(), &ids(300), &small_cfg(4, 4, 8)).unwrap();
    let q = v.row(0);
    assert_eq!(ix.search(q, 4, 1000).unwrap().len(), 300);
    assert!(ix.search(q, 4, 0).unwrap().is_empty());
    assert!(ix.search(q, 5, 10).is_err());
    assert!(ix.search(v.row(0).slice(ndarray::s![..8]), 1, 10).is_err());
    let mut empty = ix.clone();
    for l in &mut empty.lists {
        *l = PostingList::default();
    }
    assert!(matches!(empty.search(q, 1, 10), Err(Error::EmptyIndex)));
}

#[test]
fn exact_search_basics() {
    let v = synthetic_vectors(50, 16, 4, 0.1, 6);
    let id = ids(50);
    let one = exact_search(v.slice(ndarray::s![..1, ..]), &id[..1], v.row(9), 5);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].id, id[0]);
    let hits = exact_search(v.view(), &id, v.row(17), 3);
    assert_eq!(hits[0].id, id[17]);
    assert_eq!(hits[0].distance, 0.0);
}

#[test]
fn exact_search_agrees_with_naive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let v = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1..=1) as f64);
        let id: Vec<DocId> = (0..n as DocId).rev().collect();
        let q = Array1::from_shape_fn(6, |_| rng.random_range(-1..=1) as f64);
        let k = rng.random_range(0..70);
        let mut naive: Vec<(f64, DocId)> =
            (0..n).map(|i| (sq(v.row(i), q.view()), id[i])).collect();
        // Insertion sort on (distance, id), independent of the library's ordering code.
        for i in 1..naive.len() {
            let mut j = i;
            while j > 0
                && (naive[j].0 < naive[j - 1].0
                    || (naive[j].0 == naive[j - 1].0 && naive[j].1 < naive[j - 1].1))
            {
                naive.swap(j, j - 1);
                j -= 1;
            }
        }
        naive.truncate(k);
        let got: Vec<(f64, DocId)> = exact_search(v.view(), &id, q.view(), k)
            .iter()
            .map(|h| (h.distance, h.id))
            .collect();
        assert_eq!(got, naive);
    }
}

#[test]
fn recall_grows_with_nprobe() {
    let all = synthetic_vectors(4100, 64, 10, 0.1, 8);
    let base = all.slice(ndarray::s![..4000, ..]).to_owned();
    let id = ids(4000);
    let ix = build_ivfpq(base.view(), &id, &small_cfg(64, 8, 8)).unwrap();
    let mut prev = 0.0;
    for nprobe in [1, 4, 16, 64] {
        let mut rec = 0.0;
        for qi in 4000..4100 {
            let q = all.row(qi);
            let truth: HashSet<DocId> = exact_search(base.view(), &id, q, 10)
                .iter()
                .map(|h| h.id)
                .collect();
            rec += ix
                .search(q, nprobe, 10)
                .unwrap()
                .iter()
                .filter(|h| truth.contains(&h.id))
                .count() as f64;
        }
        let rec = rec / 1000.0;
        assert!(rec + 0.005 >= prev, "nprobe {nprobe}: {rec} < {prev}");
        prev = rec;
    }
}

#[test]
fn index_file_round_trip() {
    let v = synthetic_vectors(300, 32, 6, 0.1, 9);
    let id = ids(300);
    let mut ix = build_ivfpq(v.view(), &id, &small_cfg(4, 4, 8)).unwrap();
    let mut buf = Vec::new();
    write_index(&mut buf, &ix).unwrap();
    assert_eq!(read_index(&mut buf.as_slice()).unwrap(), ix);

    let (cb, _) = build_residual(v.view(), 8, 6, 5, 1).unwrap();
    let sids = id
        .iter()
        .zip(v.outer_iter())
        .map(|(&d, r)| (d, assign_semantic_id(&cb, r)))
        .collect();
    ix.semantic = Some((cb, sids));
    let mut buf = Vec::new();
    write_index(&mut buf, &ix).unwrap();
    assert_eq!(read_index(&mut buf.as_slice()).unwrap(), ix);

    assert!(matches!(
        read_index(&mut &buf[..buf.len() - 3]),
        Err(Error::Format(_))
    ));
    let mut extra = buf.clone();
    extra.push(0);
    assert!(matches!(
        read_index(&mut extra.as_slice()),
        Err(Error::Format(_))
    ));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_index(&mut bad.as_slice()),
        Err(Error::Format(_))
    ));
}

#[test]
fn embedding_table_round_trip() {
    let v = synthetic_vectors(20, 8, 3, 0.1, 10);
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &v).unwrap();
    assert_eq!(buf.len(), 12 + 20 * 8 * 4);
    let back = read_embeddings(&mut buf.as_slice()).unwrap();
    for (a, b) in back.iter().zip(&v) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn search_results_are_sorted_and_unique(seed in any::<u64>(), nprobe in 1usize..=8, k in 0usize..40) {
        let v = synthetic_vectors(300, 16, 4, 0.2, seed);
        let ix = build_ivfpq(v.view(), &ids(300), &small_cfg(8, 4, 8)).unwrap();
        let hits = ix.search(v.row(0), nprobe, k).unwrap();
        prop_assert!(hits.len() <= k);
        let uniq: HashSet<_> = hits.iter().map(|h| h.id).collect();
        prop_assert_eq!(uniq.len(), hits.len());
        prop_assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}
