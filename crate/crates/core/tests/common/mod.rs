//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use linkage_core::config::RunConfig;
use linkage_core::dataset::{CaseRecord, CaseTable, FeatureKind, FeatureSchema, GeoTemporalPair};
use linkage_core::mapping::{apply_mapping, consolidating_map};
use linkage_core::network::{backward, forward_pair, init_params, Activation, Fusion, NetConfig, Params};
use linkage_core::synthgen::{generate, GenConfig};
use linkage_core::training::{hybrid_distance, total_loss, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const KINK_GAP: f64 = 1e-3;

/// One random evaluation point for a gradient check.
pub struct GradPoint {
    pub params: Params,
    pub x: [Vec<f64>; 2],
    pub targets: [Vec<f64>; 2],
    pub geo: GeoTemporalPair,
    pub linked: bool,
}

pub fn total(point: &GradPoint, params: &Params, loss: &LossConfig) -> f64 {
    let trace = forward_pair(params, &point.x[0], &point.x[1], &point.geo).unwrap();
    total_loss(&trace, [&point.targets[0], &point.targets[1]], point.linked, loss)
        .0
        .total
}

/// True when the point sits within `KINK_GAP` of a ReLU kink, the contrastive
/// hinge or a Manhattan coordinate tie.
pub fn near_kink(point: &GradPoint, loss: &LossConfig) -> bool {
    let cfg = &point.params.config;
    let trace = forward_pair(&point.params, &point.x[0], &point.x[1], &point.geo).unwrap();
    if cfg.activation == Activation::Relu {
        let n_dec = trace.branches[0].decoder.len();
        for b in &trace.branches {
            let dec = b.decoder[..n_dec - 1].iter();
            if b.encoder.iter().chain(dec).flat_map(|l| &l.pre).any(|z| z.abs() < KINK_GAP) {
                return true;
            }
        }
    }
    let (e1, e2) = (trace.latent(0), trace.latent(1));
    if e1.iter().zip(e2).any(|(a, b)| (a - b).abs() < KINK_GAP) {
        return true;
    }
    let d = hybrid_distance(e1, e2).unwrap();
    !point.linked && (loss.margin - d).abs() < KINK_GAP
}

pub fn random_point(cfg: &NetConfig, seed: u64) -> GradPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(cfg, seed).unwrap();
    // nonzero biases, kept within the frequency range the sine init targets
    let scale = match cfg.activation {
        Activation::Relu => 0.3,
        Activation::Sine => 0.3 / cfg.sine_omega0,
    };
    let layers = params.encoder.iter_mut().chain(params.decoder.iter_mut()).chain(params.fusion.iter_mut());
    for layer in layers {
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-scale..scale);
        }
    }
    let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let x = [vec(cfg.input_dim), vec(cfg.input_dim)];
    let targets = [vec(cfg.input_dim), vec(cfg.input_dim)];
    let g = vec(2);
    GradPoint {
        params,
        x,
        targets,
        geo: GeoTemporalPair {
            log_distance: 1.0 + g[0],
            log_interval: 2.0 + g[1],
        },
        linked: seed % 2 == 0,
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter, or `None` if no kink-free point was found.
pub fn gradient_check(cfg: &NetConfig, loss: &LossConfig, seed: u64) -> Option<f64> {
    gradient_check_with(cfg, loss, seed, FD_EPS)
}

pub fn gradient_check_with(cfg: &NetConfig, loss: &LossConfig, seed: u64, eps: f64) -> Option<f64> {
    let point = (0..50)
        .map(|k| random_point(cfg, seed * 1000 + k))
        .find(|p| !near_kink(p, loss))?;
    let trace = forward_pair(&point.params, &point.x[0], &point.x[1], &point.geo).unwrap();
    let (_, heads) = total_loss(&trace, [&point.targets[0], &point.targets[1]], point.linked, loss);
    let analytic = backward(&point.params, &trace, &heads).unwrap();
    let analytic: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = point.params.clone();
    let n_tensors = probe.tensors().len();
    for t in 0..n_tensors {
        let len = probe.tensors()[t].len();
        for i in 0..len {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + eps;
            let up = total(&point, &probe, loss);
            probe.tensors_mut()[t][i] = orig - eps;
            let down = total(&point, &probe, loss);
            probe.tensors_mut()[t][i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Some(
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max),
    )
}

/// Every activation × fusion × skip combination on a 4→4→4 net, where all
/// layers have matching widths so the shortcuts are live. Sine nets use
/// ω0 = 5: at the default ω0 = 30 the truncation error of a central difference
/// with step 1e-4 alone exceeds 1e-4 relative.
pub fn gradient_configs() -> Vec<NetConfig> {
    let mut out = Vec::new();
    for activation in [Activation::Relu, Activation::Sine] {
        for fusion in [Fusion::None, Fusion::InputConcat, Fusion::DecoderAdd] {
            for skip_connections in [false, true] {
                out.push(NetConfig {
                    input_dim: 4,
                    hidden_dim: 4,
                    latent_dim: 4,
                    depth: 2,
                    activation,
                    skip_connections,
                    fusion,
                    sine_omega0: 5.0,
                });
            }
        }
    }
    out
}

/// Exact Mann-Whitney AUC by enumerating every positive-negative pair.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut half_wins, mut total) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            total += 2;
            half_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    half_wins as f64 / total as f64
}

/// TPR at the lowest distinct-score threshold whose FPR stays within `rate`.
pub fn tp_at_fp_oracle(scores: &[f64], labels: &[bool], rate: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = 0.0f64;
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count() as f64;
        if fp / neg <= rate {
            best = best.max(tp / pos);
        }
    }
    best
}

/// Trapezoid-rule precision-recall area over `n` uniform thresholds on [0, 1].
pub fn auprc_dense(scores: &[f64], labels: &[bool], n: usize) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut points: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count() as f64;
            let p = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            (tp / pos, p)
        })
        .collect();
    points.reverse();
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Random scores in [0, 1] with ties and both classes present.
pub fn random_fixture(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=max_len);
        let levels = rng.random_range(2..=n.max(2) * 2);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..=levels) as f64 / levels as f64)
            .collect();
        let p = rng.random_range(0.05..0.6);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Small hand-built table: `sizes` series followed by `one_offs` singletons,
/// with random features.
pub fn small_table(sizes: &[usize], one_offs: usize, dims: usize, seed: u64) -> CaseTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..dims).map(|i| format!("f{i}")).collect();
    let schema = FeatureSchema::uniform(names, FeatureKind::Both).unwrap();
    let mut records = Vec::new();
    let mut push = |series: Option<String>, rng: &mut ChaCha8Rng| {
        let id = format!("c{:04}", records.len());
        records.push(CaseRecord {
            case_id: id,
            series_id: series,
            features: (0..dims).map(|_| u8::from(rng.random_bool(0.3))).collect(),
            x_km: rng.random_range(0.0..50.0),
            y_km: rng.random_range(0.0..50.0),
            t_days: rng.random_range(0.0..1000.0),
        });
    };
    for (s, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            push(Some(format!("s{s}")), &mut rng);
        }
    }
    for _ in 0..one_offs {
        push(None, &mut rng);
    }
    CaseTable::new(schema, records).unwrap()
}

/// Generator settings of the end-to-end fixture: feature-separable series
/// (30 signature features expressed with probability 0.95) whose geography
/// and timing overlap strongly with the population.
pub fn separable_gen_config() -> GenConfig {
    GenConfig {
        n_cases: 2000,
        dims: 300,
        signature_strength: 0.95,
        n_signature_features: 30,
        geo_series_sigma_km: 40.0,
        time_series_gap_days: 400.0,
        seed: 1,
        ..GenConfig::default()
    }
}

/// The fixture table, consolidated from 300 to 180 features.
pub fn separable_table() -> CaseTable {
    let raw = generate(&separable_gen_config()).unwrap();
    let spec = consolidating_map("fixture", raw.schema().names(), 180, 4).unwrap();
    apply_mapping(&raw, &spec).unwrap()
}

/// Run configuration of the end-to-end fixture.
pub fn separable_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.net.activation = Activation::Sine;
    cfg.net.sine_omega0 = 1.0;
    cfg.net.latent_dim = 32;
    cfg.train.seed = seed;
    cfg
}
