//! End-to-end acceptance criteria; prints one PASS or FAIL line per
//! criterion and exits non-zero when any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use zrforge::data::{build_snapshots, parse_quadruples, Quadruple, TkgDataset, TrueObjects};
use zrforge::data::{VocabPolicy, Vocabularies};
use zrforge::eval::{filtered_rank, rank_queries, BucketMetrics, LpQuery, Origin, RandomScorer};
use zrforge::forecaster::TrainConfig;
use zrforge::gradcheck::{Case, INSTANCES};
use zrforge::numerics::{random_uniform, Tape, Tensor};
use zrforge::pipeline::{
    cluster_shift, history_proximity, mock_texts, synth_dataset, train_and_evaluate, Variant,
    SYNTH_THRESHOLD,
};
use zrforge::rng::{component_rng, SplitMix64};
use zrforge::split::{build_zero_shot, SplitConfig};
use zrforge::synth::{generate, SynthConfig};

use common::{pipeline, Run};

const SEEDS: [u64; 3] = [0, 1, 2];
const MOCK_WIDTH: usize = 16;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut pass = true;
    for case in Case::ALL {
        let (e32, e64) = (case.worst::<f32>(INSTANCES), case.worst::<f64>(INSTANCES));
        pass &= e32 <= 1e-3 && e64 <= 1e-6;
        worst.push(format!("{} {e32:.1e}/{e64:.1e}", case.name()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} ops x {INSTANCES} instances in {:.1}s; worst f32/f64 error: {}",
            Case::ALL.len(),
            elapsed.as_secs_f64(),
            worst.join(", ")
        ),
    )
}

fn sort_rank(scores: &[f32], answer: usize, filtered: &[usize]) -> usize {
    let mut kept: Vec<usize> = (0..scores.len())
        .filter(|e| *e == answer || !filtered.contains(e))
        .collect();
    kept.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| (a == answer).cmp(&(b == answer)))
    });
    kept.iter().position(|&e| e == answer).unwrap() + 1
}

fn tucker_loop(w: &[f32], a: &[f32], b: &[f32], c: &[f32]) -> f32 {
    let d = a.len();
    let mut acc = 0f32;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                acc += w[(i * d + j) * d + k] * a[i] * b[j] * c[k];
            }
        }
    }
    acc
}

fn history_scan(
    facts: &[Quadruple],
    n_base: usize,
    (s, o, t): (usize, usize, usize),
    max_len: usize,
) -> Vec<Vec<usize>> {
    (t.saturating_sub(max_len)..t)
        .map(|tau| {
            let mut set = BTreeSet::new();
            for q in facts.iter().filter(|q| q.t == tau) {
                if (q.s, q.o) == (s, o) {
                    set.insert(q.r);
                }
                if (q.o, q.s) == (s, o) {
                    set.insert(q.r + n_base);
                }
            }
            set.into_iter().collect()
        })
        .collect()
}

fn oracle_equivalence() -> Verdict {
    let mut rng = component_rng(0, "acceptance.oracles");
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let scores: Vec<f32> = (0..n)
            .map(|_| rng.random_range(0..4) as f32 * 0.5)
            .collect();
        let answer = rng.random_range(0..n);
        let filtered: Vec<usize> = (0..n)
            .filter(|&e| e != answer && rng.random_bool(0.3))
            .collect();
        if filtered_rank(&scores, answer, &filtered).unwrap()
            != sort_rank(&scores, answer, &filtered)
        {
            mismatches += 1;
        }
    }
    let rank_bad = mismatches;

    let mut tucker_bad = 0;
    for d in 1..=8 {
        for _ in 0..25 {
            let w = random_uniform::<f32>(&[d, d, d], 1.0, &mut rng);
            let abc: Vec<Tensor> = (0..3)
                .map(|_| random_uniform(&[d], 1.0, &mut rng))
                .collect();
            let want = tucker_loop(w.data(), abc[0].data(), abc[1].data(), abc[2].data());
            let mut t = Tape::new();
            let w = t.input(w);
            let v: Vec<_> = abc.into_iter().map(|x| t.input(x)).collect();
            let got = t.tucker3(w, v[0], v[1], v[2]).unwrap();
            tucker_bad += usize::from(t.value(got).item() != want);
        }
    }

    let mut history_bad = 0;
    let (n_base, n_time) = (3, 6);
    for _ in 0..300 {
        let n_facts = rng.random_range(0..=50);
        let facts: Vec<Quadruple> = (0..n_facts)
            .map(|_| {
                Quadruple::new(
                    rng.random_range(0..5),
                    rng.random_range(0..n_base),
                    rng.random_range(0..5),
                    rng.random_range(0..n_time),
                )
            })
            .collect();
        let index = build_snapshots(&facts, n_time, n_base);
        let (s, o, t) = (
            rng.random_range(0..5),
            rng.random_range(0..5),
            rng.random_range(0..=n_time),
        );
        let max_len = rng.random_range(1..8);
        let got = index.pair_history(s, o, t, max_len);
        history_bad += usize::from(got.steps != history_scan(&facts, n_base, (s, o, t), max_len));
    }
    verdict(
        rank_bad + tucker_bad + history_bad == 0,
        format!(
            "mismatches: rank {rank_bad}/1000, tucker {tucker_bad}/200, pair history {history_bad}/300"
        ),
    )
}

fn random_synth_config(rng: &mut SplitMix64, seed: u64) -> SynthConfig {
    let n_clusters = rng.random_range(2..=6);
    let relations_per_cluster = rng.random_range(2..=5);
    let n_scripts: usize = rng.random_range(1..=3);
    let scripts = (0..n_scripts)
        .map(|_| {
            let len = rng.random_range(2..=n_clusters);
            (0..len).map(|_| rng.random_range(0..n_clusters)).collect()
        })
        .collect();
    let n_pairs: usize = rng.random_range(10..=150);
    SynthConfig {
        seed,
        n_entities: rng.random_range(n_pairs.div_ceil(n_scripts).max(n_scripts + 1)..=200),
        n_clusters,
        relations_per_cluster,
        scripts,
        n_pairs,
        train_steps: rng.random_range(5..=40),
        eval_steps: rng.random_range(3..=20),
        emission_prob: rng.random_range(0.2..=1.0),
        holdout_per_cluster: rng.random_range(1..relations_per_cluster),
        holdout_weight: rng.random_range(0.05..=1.0),
    }
}

/// Evaluation facts per relation label after unseen-entity pruning, and the
/// labels occurring before the cut.
struct PreSplit {
    freq: BTreeMap<String, usize>,
    before: HashSet<String>,
}

/// Violated invariants of one produced dataset, and the test facts whose
/// relation is frequent yet was never observed before the cut.
fn split_violations(ds: &TkgDataset, pre: &PreSplit, threshold: usize) -> (usize, usize) {
    let rel = &ds.vocab.relations;
    let label = |q: &Quadruple| &rel.base_labels()[q.r];
    let unseen_in_train = ds.train.iter().filter(|q| rel.is_unseen(q.r)).count();
    let frequent: Vec<&Quadruple> = ds
        .test
        .iter()
        .filter(|q| pre.freq.get(label(q)).copied().unwrap_or(0) >= threshold)
        .collect();
    let frequent_seen = frequent
        .iter()
        .filter(|q| pre.before.contains(label(q)))
        .count();
    let known: HashSet<usize> = ds.train.iter().flat_map(|q| [q.s, q.o]).collect();
    let eval_only = ds
        .valid
        .iter()
        .chain(&ds.test)
        .filter(|q| !known.contains(&q.s) || !known.contains(&q.o))
        .count();
    let max_train = ds.train.iter().map(|q| q.t).max().unwrap();
    let min_eval = ds.valid.iter().chain(&ds.test).map(|q| q.t).min().unwrap();
    let violations =
        unseen_in_train + frequent_seen + eval_only + usize::from(max_train >= min_eval);
    (violations, frequent.len() - frequent_seen)
}

fn splitter_invariants() -> Verdict {
    let mut rng = component_rng(0, "acceptance.splits");
    let (mut produced, mut attempts, mut violations, mut never_trained) = (0, 0, 0, 0);
    while produced < 100 && attempts < 2000 {
        attempts += 1;
        let cfg = random_synth_config(&mut rng, attempts);
        let threshold = rng.random_range(5..=60);
        let Ok(out) = generate(&cfg) else { continue };
        let mut vocab = Vocabularies::default();
        let facts =
            parse_quadruples(out.quadruples.as_bytes(), &mut vocab, VocabPolicy::Grow).unwrap();
        let cut = vocab.timeline.lookup(&out.planted.split_timestamp).unwrap();
        let known: HashSet<usize> = facts
            .iter()
            .filter(|q| q.t < cut)
            .flat_map(|q| [q.s, q.o])
            .collect();
        let name = |q: &Quadruple| vocab.relations.base_labels()[q.r].clone();
        let mut pre = PreSplit {
            freq: BTreeMap::new(),
            before: facts.iter().filter(|q| q.t < cut).map(name).collect(),
        };
        for q in facts.iter().filter(|q| q.t >= cut) {
            if known.contains(&q.s) && known.contains(&q.o) {
                *pre.freq.entry(name(q)).or_default() += 1;
            }
        }
        let split = SplitConfig {
            split_timestamp: cut,
            freq_threshold: threshold,
        };
        let Ok(ds) = build_zero_shot(vocab, &facts, split) else {
            continue;
        };
        produced += 1;
        let (v, n) = split_violations(&ds, &pre, threshold);
        violations += v;
        never_trained += n;
    }
    verdict(
        produced == 100 && violations == 0,
        format!(
            "{produced} datasets from {attempts} random configurations, {violations} violations; \
             {never_trained} test facts carry frequent relations absent before the cut"
        ),
    )
}

struct SeedRun {
    zero_shot: [f64; 3],
    seen: [f64; 3],
    proximity: (usize, f64, f64),
    checksum_kept: bool,
    elapsed: Duration,
}

fn run_seed(seed: u64) -> SeedRun {
    let (ds, planted) = synth_dataset(
        &SynthConfig {
            seed,
            ..SynthConfig::default()
        },
        SYNTH_THRESHOLD,
    )
    .unwrap();
    let texts = mock_texts(&ds.vocab.relations, MOCK_WIDTH, seed).unwrap();
    let before = texts.checksum();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut zero_shot = [0.0; 3];
    let mut seen = [0.0; 3];
    let mut proximity = (0, 0.0, 0.0);
    let mut checksum_kept = true;
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let (model, _, report) = train_and_evaluate(&ds, &texts, &variant.apply(&cfg)).unwrap();
        zero_shot[i] = report.zero_shot.map_or(0.0, |m| m.mrr);
        seen[i] = report.seen.map_or(0.0, |m| m.mrr);
        if variant != Variant::RandomText {
            checksum_kept &= model.texts().checksum() == before;
        }
        if variant == Variant::Full {
            let relabel = cluster_shift(&ds.vocab.relations, &planted).unwrap();
            let p = history_proximity(&model, &ds, &ds.test, &relabel).unwrap();
            proximity = (p.pairs, p.true_distance, p.relabelled_distance);
        }
    }
    checksum_kept &= texts.checksum() == before;
    SeedRun {
        zero_shot,
        seen,
        proximity,
        checksum_kept,
        elapsed: start.elapsed(),
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn semantic_gain(runs: &[SeedRun]) -> Verdict {
    let full = mean(runs.iter().map(|r| r.zero_shot[0]));
    let control = mean(runs.iter().map(|r| r.zero_shot[1]));
    let seen_full = mean(runs.iter().map(|r| r.seen[0]));
    let seen_control = mean(runs.iter().map(|r| r.seen[1]));
    let gain = full / control - 1.0;
    let seen_gap = (seen_full - seen_control).abs() / seen_control;
    let elapsed: Duration = runs.iter().map(|r| r.elapsed).sum();
    verdict(
        gain >= 0.2 && seen_gap <= 0.05 && elapsed <= Duration::from_secs(600),
        format!(
            "zero-shot MRR {full:.3} vs random text {control:.3} (+{:.1}%); seen {seen_full:.3} vs {seen_control:.3} ({:.1}% apart); {:.0}s",
            100.0 * gain,
            100.0 * seen_gap,
            elapsed.as_secs_f64()
        ),
    )
}

fn history_ablation(runs: &[SeedRun]) -> Verdict {
    let drops = runs
        .iter()
        .filter(|r| r.zero_shot[2] < r.zero_shot[0])
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}->{:.3}", r.zero_shot[0], r.zero_shot[2]))
        .collect();
    verdict(
        drops >= 2,
        format!(
            "zero-shot MRR drops without history learning in {drops}/3 seeds ({})",
            pairs.join(", ")
        ),
    )
}

fn history_prediction(runs: &[SeedRun]) -> Verdict {
    let pass = runs.iter().all(|r| {
        let (pairs, near, far) = r.proximity;
        pairs >= 50 && near < far
    });
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            let (pairs, near, far) = r.proximity;
            format!("{near:.3} vs {far:.3} over {pairs} pairs")
        })
        .collect();
    verdict(
        pass,
        format!("true vs shifted history distance: {}", detail.join("; ")),
    )
}

fn frozen_texts(runs: &[SeedRun]) -> Verdict {
    let kept = runs.iter().filter(|r| r.checksum_kept).count();
    verdict(
        kept == runs.len(),
        format!("text checksum unchanged by training in {kept}/3 seeds"),
    )
}

fn cli_determinism() -> Verdict {
    let runs: Vec<String> = ["1", "0"]
        .into_iter()
        .map(|threads| {
            let dir = tempfile::tempdir().unwrap();
            pipeline(
                dir.path(),
                &Run {
                    seed: "5",
                    threads,
                    synth: &[],
                    threshold: "40",
                    train: &[],
                },
            )
        })
        .collect();
    verdict(
        runs[0] == runs[1],
        format!(
            "two seeded runs wrote {} and {} report bytes, {}",
            runs[0].len(),
            runs[1].len(),
            if runs[0] == runs[1] {
                "identical"
            } else {
                "different"
            }
        ),
    )
}

fn random_baseline() -> Verdict {
    let n = 100;
    let queries: Vec<LpQuery> = (0..10_000)
        .map(|i| LpQuery {
            s: i % n,
            r: i / n,
            o: (i * 37) % n,
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
    let scorer = RandomScorer {
        n_entities: n,
        seed: 0,
    };
    let ranks = rank_queries(&scorer, &queries, &truth).unwrap();
    let mrr = BucketMetrics::from_ranks(ranks).unwrap().mrr;
    let expected = (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64;
    verdict(
        (mrr - expected).abs() <= 0.005,
        format!("random MRR {mrr:.4}, expected {expected:.4} +/- 0.005"),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // listing request changes behaviour.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{n}] {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    };
    report(1, "gradient checks", gradient_suite());
    report(2, "oracle equivalence", oracle_equivalence());
    report(3, "splitter invariants", splitter_invariants());
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    report(4, "text semantics help zero-shot", semantic_gain(&runs));
    report(
        5,
        "history learning helps zero-shot",
        history_ablation(&runs),
    );
    report(6, "history prediction proximity", history_prediction(&runs));
    report(7, "frozen text matrices", frozen_texts(&runs));
    report(8, "pipeline determinism", cli_determinism());
    report(9, "random scorer baseline", random_baseline());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
