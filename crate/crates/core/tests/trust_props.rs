use proptest::prelude::*;
use trustgossip_core::corpus::{jaccard_index, MixtureVector};
use trustgossip_core::model::LogitsBlock;
use trustgossip_core::trust::{
    apply_topology, prediction_distances, sparsify_topk, trust_from_losses, trust_oracle, trust_prediction,
    trust_weight_similarity, weight_similarity_scores, LogitsPayload, TopologyMask, TrustMatrix,
};

fn assert_stochastic(w: &TrustMatrix) {
    for i in 0..w.n() {
        let row = w.row(i);
        assert!(row.iter().all(|x| *x >= 0.0 && x.is_finite()), "row {i}: {row:?}");
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-9, "row {i} sums to {s}");
    }
}

/// `W(πx)[a][b] == W(x)[π(a)][π(b)]` bit for bit.
fn assert_equivariant(w: &TrustMatrix, wp: &TrustMatrix, perm: &[usize]) {
    let n = perm.len();
    for a in 0..n {
        for b in 0..n {
            assert_eq!(
                wp.get(a, b).to_bits(),
                w.get(perm[a], perm[b]).to_bits(),
                "entry ({a},{b}) under {perm:?}"
            );
        }
    }
}

fn permute<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| items[p].clone()).collect()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn vectors(n: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, len), n)
}

fn clients_and_perm<T: std::fmt::Debug + Clone>(
    inner: impl Fn(usize) -> BoxedStrategy<T>,
) -> impl Strategy<Value = (T, Vec<usize>)> {
    (2usize..=7).prop_flat_map(move |n| (inner(n), perm_strategy(n)))
}

fn blocks(n: usize, positions: usize, vocab: usize) -> BoxedStrategy<Vec<LogitsBlock>> {
    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, positions * vocab), n)
        .prop_map(move |datas| {
            datas
                .into_iter()
                .map(|data| LogitsBlock { positions, vocab, data })
                .collect()
        })
        .boxed()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weight_similarity_algebra((thetas, perm) in clients_and_perm(|n| vectors(n, 12).boxed()), tau in 0.2f64..3.0) {
        prop_assume!(thetas.iter().all(|t| t.iter().any(|x| *x != 0.0)));
        let refs: Vec<&[f64]> = thetas.iter().map(Vec::as_slice).collect();
        let n = refs.len();
        let s = weight_similarity_scores(&refs).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(s[i * n + j].to_bits(), s[j * n + i].to_bits());
            }
        }
        let w = trust_weight_similarity(&refs, tau).unwrap();
        assert_stochastic(&w);
        let permuted = permute(&thetas, &perm);
        let prefs: Vec<&[f64]> = permuted.iter().map(Vec::as_slice).collect();
        assert_equivariant(&w, &trust_weight_similarity(&prefs, tau).unwrap(), &perm);
    }

    #[test]
    fn validation_algebra((losses, perm) in clients_and_perm(|n| prop::collection::vec(0.5f64..8.0, n * n).boxed()), tau in 0.2f64..3.0) {
        let n = perm.len();
        let w = trust_from_losses(&losses, n, tau).unwrap();
        assert_stochastic(&w);
        let permuted: Vec<f64> = (0..n * n).map(|idx| losses[perm[idx / n] * n + perm[idx % n]]).collect();
        assert_equivariant(&w, &trust_from_losses(&permuted, n, tau).unwrap(), &perm);
    }

    #[test]
    fn prediction_algebra((bl, perm) in clients_and_perm(|n| blocks(n, 5, 9)), k in 1usize..=9, tau in 0.2f64..3.0) {
        let n = bl.len();
        for sparse in [false, true] {
            let payloads: Vec<LogitsPayload> = bl
                .iter()
                .map(|b| if sparse { LogitsPayload::Sparse(sparsify_topk(b, k).unwrap()) } else { LogitsPayload::Dense(b.clone()) })
                .collect();
            let d = prediction_distances(&payloads).unwrap();
            for i in 0..n {
                prop_assert_eq!(d[i * n + i], 0.0);
                for j in 0..n {
                    prop_assert_eq!(d[i * n + j].to_bits(), d[j * n + i].to_bits());
                }
            }
            let w = trust_prediction(&payloads, tau).unwrap();
            assert_stochastic(&w);
            assert_equivariant(&w, &trust_prediction(&permute(&payloads, &perm), tau).unwrap(), &perm);
        }
    }

    #[test]
    fn oracle_algebra((raw, perm) in clients_and_perm(|n| prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), n).boxed())) {
        prop_assume!(raw.iter().all(|r| r.iter().sum::<f64>() > 1e-3));
        let mixtures: Vec<MixtureVector> = raw
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                MixtureVector::new(r.iter().map(|x| x / s).collect()).unwrap()
            })
            .collect();
        let w = trust_oracle(&mixtures).unwrap();
        assert_stochastic(&w);
        assert_equivariant(&w, &trust_oracle(&permute(&mixtures, &perm)).unwrap(), &perm);
    }

    #[test]
    fn sparse_with_full_k_matches_dense(bl in blocks(3, 4, 6)) {
        let dense: Vec<LogitsPayload> = bl.iter().cloned().map(LogitsPayload::Dense).collect();
        let sparse: Vec<LogitsPayload> = bl.iter().map(|b| LogitsPayload::Sparse(sparsify_topk(b, 6).unwrap())).collect();
        prop_assert_eq!(prediction_distances(&dense).unwrap(), prediction_distances(&sparse).unwrap());
    }

    #[test]
    fn topology_masking_keeps_rows_stochastic(losses in prop::collection::vec(0.5f64..8.0, 36), ring in any::<bool>()) {
        let w = trust_from_losses(&losses, 6, 1.0).unwrap();
        let mask = if ring { TopologyMask::ring(6) } else { TopologyMask::full(6) };
        let m = apply_topology(&w, &mask).unwrap();
        assert_stochastic(&m);
        for i in 0..6 {
            for j in 0..6 {
                if !mask.allows(i, j) {
                    prop_assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn jaccard_properties(
        a in prop::collection::vec(0u32..12, 1..40),
        b in prop::collection::vec(0u32..12, 1..40),
    ) {
        let j = jaccard_index(&a, &b).unwrap();
        prop_assert!((0.0..=0.5).contains(&j));
        prop_assert_eq!(j.to_bits(), jaccard_index(&b, &a).unwrap().to_bits());
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_unstable();
        sb.sort_unstable();
        prop_assert_eq!(j == 0.5, sa == sb);
        let disjoint = a.iter().all(|x| !b.contains(x));
        prop_assert_eq!(j == 0.0, disjoint);
    }

    #[test]
    fn jaccard_of_a_multiset_with_its_shuffle_is_half(a in prop::collection::vec(0u32..50, 1..60), seed in any::<u64>()) {
        let mut b = a.clone();
        let mut rng = trustgossip_core::rng::Rng::new(seed, &[]);
        rng.shuffle(&mut b);
        prop_assert_eq!(jaccard_index(&a, &b).unwrap(), 0.5);
    }
}

#[test]
fn jaccard_rejects_empty_corpora() {
    assert!(jaccard_index(&[], &[1]).is_err());
    assert!(jaccard_index(&[1], &[]).is_err());
}

#[test]
fn oracle_cross_dot_product_is_one_sixteenth() {
    let a = MixtureVector::new(vec![0.25, 0.75, 0.0]).unwrap();
    let b = MixtureVector::new(vec![0.25, 0.0, 0.75]).unwrap();
    assert_eq!(a.dot(&b), 1.0 / 16.0);
}
