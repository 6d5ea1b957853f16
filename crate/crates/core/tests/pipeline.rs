mod common;

use common::small_table;
use linkage_core::config::RunConfig;
use linkage_core::dataset::{geo_temporal, CaseRecord, CaseTable, GeoTemporalPair};
use linkage_core::evaluation::{
    cross_validate, fit_logreg, pair_features, score_all_pairs, LogRegConfig, LogRegModel, Method, PairScorer,
};
use linkage_core::network::{encode, encoder_input, init_params, Fusion, NetConfig};
use linkage_core::synthgen::{generate, GenConfig};
use linkage_core::training::{assign_folds, train_fold, PairBatch, PairSample, TrainConfig};

fn small_generated() -> CaseTable {
    generate(&GenConfig {
        n_cases: 200,
        dims: 60,
        n_signature_features: 4,
        target_sparsity: 0.85,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap()
}

fn quick_run(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.net.hidden_dim = 16;
    run.net.latent_dim = 4;
    run.train.batch_size = 32;
    run.train.seed = seed;
    run.folds = 3;
    run
}

#[test]
fn training_reduces_the_loss() {
    let table = small_generated();
    let run = quick_run(0).resolve_input_dim(table.dims()).unwrap();
    let assignment = assign_folds(&table, 3, 0).unwrap();
    let train = TrainConfig { epochs: 6, ..run.train };
    let (params, history) = train_fold(&table, &assignment, 0, &run.net, &train, &run.loss).unwrap();
    let n = history.records.len();
    assert!(n >= 40, "{n} steps");
    assert!(params.all_finite());
    let (early, late) = (history.mean_loss(0..10), history.mean_loss(n - 10..n));
    assert!(late < early, "loss went from {early} to {late}");
    let lrs: Vec<f64> = history.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], train.learning_rate);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn cross_validation_is_deterministic() {
    let table = small_generated();
    for method in [Method::Ours, Method::NaiveSiamese, Method::LogReg] {
        let a = cross_validate(&table, &quick_run(4), method, 1).unwrap();
        let b = cross_validate(&table, &quick_run(4), method, 3).unwrap();
        assert_eq!(a.report.to_json_string(), b.report.to_json_string(), "{method:?}");
        assert_eq!(a.folds.len(), 3);
        let mut seen = vec![0usize; table.len()];
        for f in 0..3 {
            for i in a.assignment.members(f) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        for f in &a.folds {
            assert!((0.0..=100.0).contains(&f.auc));
            assert!(f.n_val_positives > 0 && f.n_val_positives < f.n_val_pairs);
        }
    }
}

#[test]
fn methods_configure_the_network() {
    let run = quick_run(0);
    let ours = Method::Ours.apply(&run);
    assert_eq!(ours.net.fusion, Fusion::DecoderAdd);
    assert!(ours.loss.weight_recon > 0.0);
    let naive = Method::NaiveSiamese.apply(&run);
    assert_eq!(naive.net.fusion, Fusion::InputConcat);
    assert_eq!(naive.loss.weight_recon, 0.0);
    assert_eq!(Method::AsConfigured.apply(&run), run);
    assert_eq!("naive".parse::<Method>().unwrap(), Method::NaiveSiamese);
    assert!("svm".parse::<Method>().is_err());
}

fn toy_batches() -> Vec<PairBatch> {
    // linked pairs agree on every feature, unlinked pairs differ on the first
    let geo = GeoTemporalPair { log_distance: 0.5, log_interval: 0.5 };
    let sample = |linked: bool, k: usize| PairSample {
        a: 2 * k,
        b: 2 * k + 1,
        linked,
        x_a: vec![1.0, (k % 2) as f64, 0.0],
        x_b: vec![if linked { 1.0 } else { 0.0 }, (k % 2) as f64, 0.0],
        geo,
    };
    (0..8)
        .map(|b| PairBatch {
            pairs: (0..16).map(|k| sample(k % 2 == 0, b * 16 + k)).collect(),
        })
        .collect()
}

#[test]
fn logistic_regression_separates_a_toy_problem() {
    let batches = toy_batches();
    let examples: Vec<(Vec<f64>, bool)> = batches
        .iter()
        .flat_map(|b| &b.pairs)
        .map(|p| (pair_features(&p.x_a, &p.x_b, &p.geo), p.linked))
        .collect();
    let mut last = f64::INFINITY;
    for epochs in 0..8 {
        let cfg = LogRegConfig { epochs, learning_rate: 0.5, ..LogRegConfig::default() };
        let model = fit_logreg(&batches, &cfg).unwrap();
        let loss = model.loss(&examples, cfg.l2);
        assert!(loss < last, "epoch {epochs}: {loss} after {last}");
        last = loss;
        if epochs == 0 {
            assert_eq!(model, LogRegModel::zeros(5));
        }
    }
    let model = fit_logreg(&batches, &LogRegConfig { epochs: 20, learning_rate: 0.5, ..LogRegConfig::default() }).unwrap();
    let correct = examples.iter().filter(|(f, y)| (model.predict(f) > 0.5) == *y).count();
    assert_eq!(correct, examples.len());

    let one_class = vec![PairBatch { pairs: batches[0].pairs.iter().filter(|p| p.linked).cloned().collect() }];
    assert!(fit_logreg(&one_class, &LogRegConfig::default()).is_err());
}

#[test]
fn duplicate_cases_score_zero_distance() {
    let mut table = small_table(&[2], 3, 5, 1);
    let mut records = table.records().to_vec();
    let copy = CaseRecord { case_id: "dup".into(), ..records[2].clone() };
    records.push(copy);
    table = CaseTable::new(table.schema().clone(), records).unwrap();
    let cfg = NetConfig { input_dim: 5, hidden_dim: 4, latent_dim: 3, ..NetConfig::default() };
    let params = init_params(&cfg, 0).unwrap();
    let scored = score_all_pairs(&params, &table, 5.0).unwrap();
    let dup = scored
        .iter()
        .find(|s| (s.case_a == "dup" || s.case_b == "dup") && (s.case_a == "c0002" || s.case_b == "c0002"))
        .unwrap();
    assert_eq!(dup.distance, 0.0);
    assert_eq!(dup.similarity, 1.0);
}

#[test]
fn input_concat_scoring_matches_the_full_encoder() {
    let table = small_table(&[3, 2], 4, 6, 8);
    let recs = table.records();
    for (hidden, skip) in [(5, false), (5, true), (8, true), (8, false)] {
        let cfg = NetConfig {
            input_dim: 6,
            hidden_dim: hidden,
            latent_dim: 3,
            fusion: Fusion::InputConcat,
            skip_connections: skip,
            ..NetConfig::default()
        };
        let params = init_params(&cfg, 2).unwrap();
        let scorer = PairScorer::new(&params, &table).unwrap();
        assert!(scorer.latent(0).is_none());
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                let g = geo_temporal(&recs[i], &recs[j]);
                let ei = encode(&params, &encoder_input(&cfg, &recs[i].features_f64(), &g)).unwrap();
                let ej = encode(&params, &encoder_input(&cfg, &recs[j].features_f64(), &g)).unwrap();
                let want = ei.iter().zip(&ej).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let got = scorer.distance(i, j).unwrap();
                assert!((got - want).abs() <= 1e-12 * want.max(1.0), "hidden {hidden} skip {skip}: {got} vs {want}");
            }
        }
    }
}
