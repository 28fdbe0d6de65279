use std::sync::OnceLock;

use zrforge::data::{build_snapshots, Quadruple, TkgDataset, TrueObjects};
use zrforge::eval::{evaluate_split, SplitSelector};
use zrforge::forecaster::{
    batch_losses, fit, load_checkpoint, make_batches, save_checkpoint, LossTerms, Model,
    TrainConfig, TrainContext, TrainLog,
};
use zrforge::numerics::{Tape, Tensor};
use zrforge::pipeline::{mock_texts, synth_dataset};
use zrforge::rng::component_rng;
use zrforge::semantics::TextStore;
use zrforge::synth::SynthConfig;

/// A graph of a few dozen training facts with held-out relations.
fn toy() -> &'static (TkgDataset, TextStore) {
    static TOY: OnceLock<(TkgDataset, TextStore)> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = SynthConfig {
            seed: 0,
            n_entities: 16,
            n_clusters: 3,
            relations_per_cluster: 3,
            scripts: vec![vec![0, 1, 2]],
            n_pairs: 6,
            train_steps: 10,
            eval_steps: 8,
            emission_prob: 0.8,
            holdout_per_cluster: 1,
            holdout_weight: 0.3,
        };
        let (ds, _) = synth_dataset(&cfg, 4).unwrap();
        let texts = mock_texts(&ds.vocab.relations, 6, 4).unwrap();
        (ds, texts)
    })
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        dim: 8,
        epochs: 3,
        window: 2,
        max_history_len: 4,
        ..TrainConfig::default()
    }
}

fn trained() -> &'static (Model, TrainLog) {
    static TRAINED: OnceLock<(Model, TrainLog)> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let (ds, texts) = toy();
        fit(ds, texts.clone(), &small_cfg()).unwrap()
    })
}

fn end_of_training(ds: &TkgDataset) -> usize {
    ds.max_train_time().unwrap() + 1
}

fn queries(facts: &[Quadruple]) -> Vec<(usize, usize)> {
    facts.iter().map(|q| (q.s, q.r)).collect()
}

#[test]
fn toy_is_small() {
    let (ds, _) = toy();
    assert!((30..=80).contains(&ds.train.len()), "{}", ds.train.len());
    assert!(!ds.valid.is_empty() && !ds.test.is_empty());
}

#[test]
fn total_score_is_base_plus_weighted_history_score() {
    let (ds, texts) = toy();
    let mut model = Model::new(small_cfg(), ds.num_entities(), ds.n_base(), texts.clone()).unwrap();
    let index = ds.train_index();
    let end = end_of_training(ds);
    let qs = queries(&ds.test);
    let at = |model: &mut Model, gamma: f64| {
        model.cfg.gamma = gamma;
        model.score_queries(&index, end, &qs).unwrap()
    };
    let base = at(&mut model, 0.0);
    let unit = at(&mut model, 1.0);
    let argmax = |row: &[f32]| {
        (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap()
    };
    let mut flipped = false;
    for gamma in [0.5, 3.0, 50.0] {
        let total = at(&mut model, gamma);
        for i in 0..qs.len() {
            let (b, u, t) = (base.row(i), unit.row(i), total.row(i));
            for e in 0..b.len() {
                let history = f64::from(u[e] - b[e]);
                let want = f64::from(b[e]) + gamma * history;
                let tol = 1e-4 * (1.0 + want.abs());
                assert!((f64::from(t[e]) - want).abs() <= tol, "gamma {gamma}");
            }
            flipped |= argmax(t) != argmax(b);
        }
    }
    assert!(flipped, "the history weight never changed a top prediction");
}

#[test]
fn loss_terms_follow_hand_arithmetic() {
    let mut t = Tape::<f32>::new();
    let [tkgf, hist, rhl] = [1.0, 0.2, 0.3].map(|v| t.input(Tensor::scalar(v)));
    let terms = LossTerms {
        tkgf,
        hist: Some(hist),
        rhl: Some(rhl),
    };
    let total = terms.total(&mut t, 1.2).unwrap();
    assert!((t.value(total).item() - 1.56).abs() < 1e-6);

    let mut t = Tape::<f64>::new();
    let logits = t.input(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let ce = t.cross_entropy(logits, &[0]).unwrap();
    let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
    assert!((t.value(ce).item() - want).abs() < 1e-12);

    let mut last = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut t = Tape::<f64>::new();
        let mut row = vec![0.0; 8];
        row[3] = margin;
        let l = t.input(Tensor::matrix(1, 8, row).unwrap());
        let ce = t.cross_entropy(l, &[3]).unwrap();
        let v = t.value(ce).item();
        if margin == 0.0 {
            assert!((v - 8f64.ln()).abs() < 1e-12);
        }
        assert!(v < last);
        last = v;
    }

    let mut t = Tape::<f64>::new();
    let p = t.input(Tensor::vector(vec![0.8, 0.3]));
    let b = t.bce(p, &[1.0, 0.0]).unwrap();
    let want = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    assert!((t.value(b).item() - want).abs() < 1e-12);

    let mut t = Tape::<f64>::new();
    let p = t.input(Tensor::vector(vec![0.9, 0.2, 0.7]));
    let b = t.bce(p, &[1.0, 0.0, 1.0]).unwrap();
    let want = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 3.0;
    assert!((t.value(b).item() - want).abs() < 1e-12);
}

#[test]
fn gradients_of_the_total_add_up_over_its_terms() {
    let (ds, texts) = toy();
    let cfg = TrainConfig {
        eta: 1.7,
        ..small_cfg()
    };
    let model = Model::new(cfg, ds.num_entities(), ds.n_base(), texts.clone()).unwrap();
    let index = ds.train_index();
    let truth = TrueObjects::new(&ds.train, ds.n_base());
    let ctx = TrainContext {
        index: &index,
        truth: &truth,
    };
    let batch = make_batches(&ds.train, ds.n_base(), 512)
        .into_iter()
        .find(|b| b.t > 2)
        .unwrap();
    let grads = |pick: &dyn Fn(&mut Tape, LossTerms) -> zrforge::numerics::Var| {
        let mut store = model.params.clone();
        store.zero_grad();
        let mut tape = Tape::new();
        let mut rng = component_rng(0, "negatives");
        let terms = batch_losses(&model, &mut tape, &ctx, &batch, &mut rng).unwrap();
        let loss = pick(&mut tape, terms);
        tape.backward_into(loss, &mut store).unwrap();
        store
    };
    let total = grads(&|t, terms| terms.total(t, 1.7).unwrap());
    let tkgf = grads(&|_, terms| terms.tkgf);
    let hist = grads(&|_, terms| terms.hist.unwrap());
    let rhl = grads(&|_, terms| terms.rhl.unwrap());
    for id in model.params.ids() {
        let parts = [tkgf.grad(id), hist.grad(id), rhl.grad(id)];
        for (k, &g) in total.grad(id).data().iter().enumerate() {
            let sum = parts[0].data()[k] + parts[1].data()[k] + 1.7 * parts[2].data()[k];
            assert!(
                (g - sum).abs() <= 1e-5 * (1.0 + g.abs()),
                "{} [{k}]: {g} vs {sum}",
                model.params.name(id)
            );
        }
    }
}

#[test]
fn fitting_the_toy_lowers_the_loss_and_is_reproducible() {
    let (ds, texts) = toy();
    let cfg = TrainConfig {
        epochs: 50,
        ..small_cfg()
    };
    let (a, log_a) = fit(ds, texts.clone(), &cfg).unwrap();
    assert_eq!(log_a.epochs.len(), 50);
    assert!(log_a.epochs[49].loss < log_a.epochs[0].loss);
    let (b, log_b) = fit(ds, texts.clone(), &cfg).unwrap();
    assert_eq!(log_a, log_b);
    for id in a.params.ids() {
        assert_eq!(a.params.value(id), b.params.value(id));
    }
}

#[test]
fn disabling_history_drops_exactly_its_parameters() {
    let (ds, texts) = toy();
    let full = Model::new(small_cfg(), ds.num_entities(), ds.n_base(), texts.clone()).unwrap();
    let cfg = TrainConfig {
        no_rhl: true,
        ..small_cfg()
    };
    let (bare, _) = fit(ds, texts.clone(), &cfg).unwrap();
    assert!(full.rhl_param_count() > 0);
    assert_eq!(bare.rhl_param_count(), 0);
    assert_eq!(
        full.params.num_elements() - bare.params.num_elements(),
        full.rhl_param_count()
    );
    assert_eq!(bare.gamma_value(), 0.0);
}

#[test]
fn held_out_relations_are_scored_without_a_relation_table() {
    let (ds, _) = toy();
    let (model, _) = trained();
    let n_relations = 2 * ds.n_base();
    for id in model.params.ids() {
        assert_ne!(
            model.params.value(id).shape().first(),
            Some(&n_relations),
            "{}",
            model.params.name(id)
        );
    }
    let unseen: Vec<(usize, usize)> = (0..n_relations)
        .filter(|&r| ds.vocab.relations.is_unseen(r))
        .flat_map(|r| (0..ds.num_entities()).map(move |s| (s, r)))
        .collect();
    assert!(!unseen.is_empty());
    let scores = model
        .score_queries(&ds.train_index(), end_of_training(ds), &unseen)
        .unwrap();
    assert_eq!(scores.shape(), &[unseen.len(), ds.num_entities()]);
    assert!(scores.data().iter().all(|v| v.is_finite()));
}

#[test]
fn text_matrices_are_unchanged_by_training() {
    let (_, texts) = toy();
    let before = texts.checksum();
    let (model, _) = trained();
    assert_eq!(model.texts().checksum(), before);
    assert_eq!(texts.checksum(), before);
}

#[test]
fn checkpoints_restore_identical_scores() {
    let (ds, _) = toy();
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, model, &ds.fingerprint()).unwrap();
    let (back, header) = load_checkpoint(&path).unwrap();
    assert_eq!(header.dataset_fingerprint, ds.fingerprint());
    let qs = queries(&ds.test);
    let index = ds.train_index();
    let end = end_of_training(ds);
    let a = model.score_queries(&index, end, &qs).unwrap();
    let b = back.score_queries(&index, end, &qs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_reads_no_evaluation_snapshot() {
    let (ds, _) = toy();
    let (model, _) = trained();
    let all: Vec<Quadruple> = ds.all_facts().copied().collect();
    let index = build_snapshots(&all, ds.num_timestamps(), ds.n_base());
    model.prepare(&index, end_of_training(ds)).unwrap();
    let read = index.max_timestamp_read().unwrap();
    assert!(read < ds.eval_start, "read {read}");
    let report = evaluate_split(model, ds, SplitSelector::Both).unwrap();
    assert!(report.zero_shot.is_some() && report.seen.is_some());
}
