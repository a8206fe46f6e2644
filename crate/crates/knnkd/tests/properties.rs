//! Property tests for the crate-wide invariants.

use knnkd::distill::{combined_grad_logits, knn_kd_loss, generic_kd_loss, TeacherDistribution};
use knnkd::evalbench::bleu;
use knnkd::knn::{full_scan_oracle, search, IndexKind, Metric, SearchConfig};
use knnkd::model::softmax;
use knnkd::util::LeWriter;
use proptest::prelude::*;

fn datastore_from(keys: &[Vec<f32>]) -> knnkd::datastore::Datastore {
    let dim = keys[0].len();
    let mut payload = LeWriter::new();
    for k in keys {
        for &x in k {
            payload.f32(x);
        }
    }
    payload.pad_to(8);
    for i in 0..keys.len() as u32 {
        payload.u32(i % 7);
    }
    payload.pad_to(8);
    for i in 0..keys.len() as u32 {
        payload.u32(i);
        payload.u32(0);
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload.bytes());
    let crc = hasher.finalize();
    let mut w = LeWriter::new();
    w.raw(knnkd::datastore::DATASTORE_MAGIC);
    w.u32(knnkd::datastore::DATASTORE_VERSION);
    w.u32(dim as u32);
    w.u64(keys.len() as u64);
    w.u64(0);
    w.u32(crc);
    w.pad_to(8);
    w.raw(payload.bytes());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ds");
    std::fs::write(&path, w.bytes()).unwrap();
    knnkd::datastore::Datastore::load(&path).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..64)) {
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn teacher_normalizes_and_stays_on_support(
        neighbors in prop::collection::vec((0.0f32..500.0, 0u32..40), 1..64),
        tau in prop::sample::select(vec![0.01, 0.5, 1.0, 10.0, 1e6]),
    ) {
        let t = TeacherDistribution::from_neighbors(&neighbors, tau).unwrap();
        let sum: f64 = t.support().iter().map(|&(_, p)| p).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(t.support().len() <= neighbors.len());
        for &(tok, p) in t.support() {
            prop_assert!(p > 0.0);
            prop_assert!(neighbors.iter().any(|&(_, v)| v == tok));
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero(
        logits in prop::collection::vec(-6.0f64..6.0, 2..48),
        seed in 0u64..1000,
    ) {
        let v = logits.len();
        let p = softmax(&logits).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let neighbors: Vec<(f32, u32)> = (0..n)
            .map(|_| (rng.gen_range(0.0f32..4.0), rng.gen_range(0..v) as u32))
            .collect();
        let teacher = TeacherDistribution::from_neighbors(&neighbors, 1.0).unwrap();
        let alpha = rng.gen_range(0.0..=1.0);
        let target = rng.gen_range(0..v) as u32;
        let g = combined_grad_logits(&p, target, &teacher, alpha);
        let sum: f64 = g.iter().sum();
        prop_assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn sparse_and_dense_distillation_losses_agree(
        logits in prop::collection::vec(-6.0f64..6.0, 2..32),
        seed in 0u64..1000,
    ) {
        let v = logits.len();
        let student = softmax(&logits).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let neighbors: Vec<(f32, u32)> = (0..n)
            .map(|_| (rng.gen_range(0.0f32..4.0), rng.gen_range(0..v) as u32))
            .collect();
        let teacher = TeacherDistribution::from_neighbors(&neighbors, 2.0).unwrap();
        let sparse = knn_kd_loss(&student, &teacher);
        let dense = generic_kd_loss(&student, &teacher.to_dense(v));
        prop_assert!((sparse - dense).abs() <= 1e-12);
    }

    #[test]
    fn search_matches_oracle_and_k_is_prefix_stable(
        keys in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 3..60),
        query in prop::collection::vec(-1.0f32..1.0, 4),
    ) {
        let ds = datastore_from(&keys);
        let mut prev: Vec<usize> = Vec::new();
        for k in [1usize, 2, 4, 8, 16] {
            let got = search(&ds, &query, &SearchConfig {
                k,
                metric: Metric::SquaredL2,
                index: IndexKind::Exact,
            }).unwrap();
            let want = full_scan_oracle(&ds, &query, k, Metric::SquaredL2);
            prop_assert_eq!(&got, &want);
            let ids: Vec<usize> = got.entries.iter().map(|e| e.index).collect();
            prop_assert_eq!(&ids[..prev.len()], prev.as_slice());
            prev = ids;
        }
    }

    #[test]
    fn bleu_is_sentence_order_invariant(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..10), prop::collection::vec(0u8..6, 1..10)),
            1..12,
        ),
        swap_a in 0usize..12,
        swap_b in 0usize..12,
    ) {
        let hyps: Vec<Vec<u8>> = pairs.iter().map(|(h, _)| h.clone()).collect();
        let refs: Vec<Vec<u8>> = pairs.iter().map(|(_, r)| r.clone()).collect();
        let before = bleu(&hyps, &refs, 4).unwrap();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        let (a, b) = (swap_a % h2.len(), swap_b % h2.len());
        h2.swap(a, b);
        r2.swap(a, b);
        let after = bleu(&h2, &r2, 4).unwrap();
        prop_assert_eq!(before.bleu, after.bleu);
    }

    #[test]
    fn bleu_of_self_is_100(
        corpus in prop::collection::vec(prop::collection::vec(0u8..20, 1..12), 1..10),
    ) {
        let r = bleu(&corpus, &corpus, 4).unwrap();
        prop_assert_eq!(r.bleu, 100.0);
    }
}
