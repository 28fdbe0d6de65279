use proptest::prelude::*;
use zrforge::data::{Quadruple, TrueObjects};
use zrforge::eval::{
    filtered_rank, queries_of, rank_queries, BucketMetrics, LpQuery, Origin, RandomScorer, Scorer,
};

/// Position of `answer` after removing `filtered` and sorting by descending
/// score, with the answer placed behind every candidate it ties with.
fn sort_rank(scores: &[f32], answer: usize, filtered: &[usize]) -> usize {
    let mut kept: Vec<usize> = (0..scores.len())
        .filter(|e| *e == answer || !filtered.contains(e))
        .collect();
    kept.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == answer).cmp(&(b == answer)))
    });
    kept.iter().position(|&e| e == answer).unwrap() + 1
}

fn instance() -> impl Strategy<Value = (Vec<f32>, usize, Vec<usize>)> {
    (1..=10usize).prop_flat_map(|n| {
        (
            prop::collection::vec((0..5u8).prop_map(|v| f32::from(v) * 0.25), n),
            0..n,
            prop::collection::vec(0..n, 0..n),
        )
            .prop_map(|(scores, answer, filtered)| {
                let filtered: Vec<usize> = filtered.into_iter().filter(|&e| e != answer).collect();
                (scores, answer, filtered)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rank_matches_full_sort((scores, answer, filtered) in instance()) {
        prop_assert_eq!(
            filtered_rank(&scores, answer, &filtered).unwrap(),
            sort_rank(&scores, answer, &filtered)
        );
    }

    #[test]
    fn filtering_never_worsens_a_rank((scores, answer, filtered) in instance()) {
        let raw = filtered_rank(&scores, answer, &[]).unwrap();
        let kept = filtered_rank(&scores, answer, &filtered).unwrap();
        prop_assert!(kept <= raw);
        prop_assert!(kept >= 1 && raw <= scores.len());
    }
}

#[test]
fn answer_in_its_filter_set_is_rejected() {
    assert!(filtered_rank(&[0.3, 0.1], 0, &[0]).is_err());
}

#[test]
fn batched_ranking_equals_one_by_one() {
    let n_base = 3;
    let facts: Vec<Quadruple> = (0..600)
        .map(|i| Quadruple::new(i % 17, i % n_base, (i * 7) % 23, i % 5))
        .collect();
    let truth = TrueObjects::new(&facts, n_base);
    let queries = queries_of(&facts, n_base, Origin::Test);
    let scorer = RandomScorer {
        n_entities: 23,
        seed: 9,
    };
    let ranks = rank_queries(&scorer, &queries, &truth).unwrap();
    assert_eq!(ranks.len(), queries.len());
    for (q, &rank) in queries.iter().zip(&ranks) {
        let scores = scorer.score(&[(q.s, q.r)]).unwrap();
        let filtered: Vec<usize> = truth
            .get(q.s, q.r, q.t)
            .iter()
            .copied()
            .filter(|&e| e != q.o)
            .collect();
        assert_eq!(rank, sort_rank(scores.row(0), q.o, &filtered));
    }
}

#[test]
fn random_scorer_mrr_is_the_harmonic_mean_rank() {
    let n = 100;
    let queries: Vec<LpQuery> = (0..10_000)
        .map(|i| LpQuery {
            s: i % n,
            r: i / n,
            o: (i * 31) % n,
            t: 0,
            origin: Origin::Test,
            reciprocal: false,
        })
        .collect();
    let facts: Vec<Quadruple> = queries
        .iter()
        .map(|q| Quadruple::new(q.s, q.r, q.o, q.t))
        .collect();
    let truth = TrueObjects::new(&facts, n);
    let ranks = rank_queries(
        &RandomScorer {
            n_entities: n,
            seed: 1,
        },
        &queries,
        &truth,
    )
    .unwrap();
    let mrr = BucketMetrics::from_ranks(ranks).unwrap().mrr;
    let expected: f64 = (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64;
    assert!((expected - 0.0519).abs() < 1e-4);
    assert!((mrr - expected).abs() <= 0.005, "mrr {mrr}");
}
