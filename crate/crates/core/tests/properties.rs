use std::collections::BTreeSet;

use irdistill_core::bounds::{compute_k, EmbeddingSample};
use irdistill_core::datasim::{generate_corpus, CorpusSpec};
use irdistill_core::encoders::{DeModel, Encoder, EncoderConfig, PoolingKind, Projection, PAD};
use irdistill_core::losses::{
    binary_ce_distill, binary_ce_onehot, embed_match_loss, mse_distill, softmax_ce_distill,
    softmax_ce_onehot,
};
use irdistill_core::numerics::norm;
use irdistill_core::retrieval::{mrr_at_10, ndcg_at_10, recall_at_k, rerank, Judgments, RankedList};
use irdistill_core::Rng;
use proptest::prelude::*;

fn scores(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, len)
}

fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i].clone()).collect()
}

fn encoder(pooling: PoolingKind, seed: u64) -> Encoder {
    Encoder::init(
        EncoderConfig {
            vocab_size: 30,
            hidden: 6,
            out_dim: 4,
            blocks: 2,
            pooling,
        },
        &mut Rng::new(seed),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_match_minimizes_softmax_distill(
        t in scores(2..8),
        noise in prop::collection::vec(-1.0f64..1.0, 8),
        temp in 0.5f64..4.0,
    ) {
        let s: Vec<f64> = t.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let at_teacher = softmax_ce_distill(&t, &t, temp).unwrap().value;
        let perturbed = softmax_ce_distill(&s, &t, temp).unwrap().value;
        prop_assert!(at_teacher <= perturbed + 1e-12);
    }

    #[test]
    fn saturated_binary_distill_is_onehot(s in scores(1..8), signs in prop::collection::vec(any::<bool>(), 8)) {
        let y: Vec<u8> = signs[..s.len()].iter().map(|&b| u8::from(b)).collect();
        let t: Vec<f64> = y.iter().map(|&l| if l == 1 { 40.0 } else { -40.0 }).collect();
        let d = binary_ce_distill(&s, &t).unwrap().value;
        let o = binary_ce_onehot(&s, &y).unwrap().value;
        prop_assert!((d - o).abs() < 1e-9);
    }

    #[test]
    fn losses_ignore_joint_candidate_order(s in scores(2..8), seed in any::<u64>()) {
        let n = s.len();
        let mut rng = Rng::new(seed);
        let t: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut y = vec![0u8; n];
        y[rng.below(n)] = 1;
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let (ps, pt, py) = (permute(&s, &perm), permute(&t, &perm), permute(&y, &perm));
        let pairs = [
            (softmax_ce_onehot(&s, &y).unwrap(), softmax_ce_onehot(&ps, &py).unwrap()),
            (binary_ce_onehot(&s, &y).unwrap(), binary_ce_onehot(&ps, &py).unwrap()),
            (softmax_ce_distill(&s, &t, 2.0).unwrap(), softmax_ce_distill(&ps, &pt, 2.0).unwrap()),
            (binary_ce_distill(&s, &t).unwrap(), binary_ce_distill(&ps, &pt).unwrap()),
            (mse_distill(&s, &t).unwrap(), mse_distill(&ps, &pt).unwrap()),
        ];
        for (a, b) in pairs {
            prop_assert!((a.value - b.value).abs() < 1e-12);
            prop_assert_eq!(permute(&a.grad, &perm).len(), b.grad.len());
            for (x, z) in permute(&a.grad, &perm).iter().zip(&b.grad) {
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_match_zero_only_on_coincidence(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, squared in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let proj = Projection::projection(k, k, &mut rng);
        let student: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.normal()).collect()).collect();
        let same = embed_match_loss(&student, &student, &proj, squared).unwrap();
        prop_assert_eq!(same.value, 0.0);
        let mut teacher = student.clone();
        teacher[rng.below(n)][rng.below(k)] += 0.5;
        let moved = embed_match_loss(&teacher, &student, &proj, squared).unwrap();
        prop_assert!(moved.value > 0.0);
    }

    #[test]
    fn pads_do_not_change_pooled_embeddings(ids in prop::collection::vec(5u32..30, 1..8), pads in 1usize..5, seed in 0u64..100) {
        let enc = encoder(PoolingKind::Mean, seed);
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat(PAD).take(pads));
        prop_assert_eq!(enc.encode(&ids).unwrap(), enc.encode(&padded).unwrap());
    }

    #[test]
    fn shared_towers_embed_identically(ids in prop::collection::vec(5u32..30, 1..8), seed in 0u64..100) {
        let m = DeModel::shared(encoder(PoolingKind::FirstToken, seed));
        prop_assert_eq!(m.embed_query(&ids).unwrap(), m.embed_doc(&ids).unwrap());
    }

    #[test]
    fn ranking_metric_relations(seed in any::<u64>(), n_docs in 2usize..40, n_queries in 1usize..10) {
        let mut rng = Rng::new(seed);
        let mut judgments = Judgments::default();
        let mut top = Judgments::default();
        let mut rankings = Vec::new();
        let mut ideal = Vec::new();
        for q in 0..n_queries as u32 {
            let golden: BTreeSet<u32> = (0..1 + rng.below(3)).map(|_| rng.below(n_docs) as u32).collect();
            let mut ids: Vec<u32> = (0..n_docs as u32).collect();
            rng.shuffle(&mut ids);
            judgments.golden.insert(q, golden.iter().copied().collect());
            top.golden.insert(q, golden.iter().copied().collect());
            rankings.push(RankedList { query_id: q, items: ids.iter().map(|&d| (d, 0.0)).collect() });
            let mut best: Vec<u32> = golden.iter().copied().collect();
            best.extend(ids.iter().filter(|d| !golden.contains(d)));
            ideal.push(RankedList { query_id: q, items: best.iter().map(|&d| (d, 0.0)).collect() });
        }
        let mut last = 0.0;
        for k in 1..=n_docs {
            let r = recall_at_k(&rankings, &judgments, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        let mrr = mrr_at_10(&rankings, &judgments).unwrap();
        prop_assert!(mrr <= 100.0 * recall_at_k(&rankings, &judgments, 10).unwrap() + 1e-12);
        prop_assert!((ndcg_at_10(&ideal, &top).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn rerank_keeps_the_candidate_set(cands in prop::collection::vec(0u32..50, 1..30), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let table: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let r = rerank(0, &cands, 50, |d| Ok(table[d as usize])).unwrap();
        let got: BTreeSet<u32> = r.doc_ids().collect();
        prop_assert_eq!(got, cands.iter().copied().collect::<BTreeSet<u32>>());
        prop_assert!(r.items.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn k_is_the_largest_norm(seed in any::<u64>(), n in 1usize..20, k in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut rows = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..k).map(|_| 3.0 * rng.normal()).collect()).collect() };
        let (a, b, c, d) = (rows(), rows(), rows(), rows());
        let all: Vec<f64> = a.iter().chain(&b).chain(&c).chain(&d).map(|v| norm(v)).collect();
        let s = EmbeddingSample::new(a, b, c, d, vec![0.0; n]).unwrap();
        let max = all.iter().copied().fold(f64::MIN, f64::max);
        prop_assert_eq!(compute_k(&s), max);
    }
}

#[test]
fn corpus_generation_is_seeded_and_golden_docs_hold_answers() {
    let spec = |seed| CorpusSpec::new(4, 10, 8, 200, 12, 5, seed);
    let a = generate_corpus(&spec(3)).unwrap();
    assert_eq!(a, generate_corpus(&spec(3)).unwrap());
    assert_ne!(a, generate_corpus(&spec(4)).unwrap());
    for q in &a.queries {
        let golden = a.golden(q.query_id).unwrap();
        assert!(!golden.is_empty());
        for &g in golden {
            let words: Vec<&str> = a.docs[g as usize].text.split_whitespace().collect();
            for ans in &q.answers {
                assert!(words.contains(&ans.as_str()), "query {} answer {ans}", q.query_id);
            }
        }
    }
}
