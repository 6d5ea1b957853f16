//! Losses, optimiser, learning-rate schedule, series-aware folds, pair
//! sampling and the per-fold training loop.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{geo_temporal, CaseTable, GeoTemporalPair};
use crate::error::{Error, Result};
use crate::network::{self, init_params, ForwardTrace, Grads, HeadGrads, NetConfig, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the contrastive term in the total loss.
    pub weight_contrast: f64,
    /// Weight of the reconstruction term in the total loss.
    pub weight_recon: f64,
    pub margin: f64,
    /// Scale applied inside the contrastive term itself.
    pub contrastive_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weight_contrast: 1.0,
            weight_recon: 0.2,
            margin: 5.0,
            contrastive_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::config("margin", "must be finite and > 0"));
        }
        for (field, v) in [
            ("weight_contrast", self.weight_contrast),
            ("weight_recon", self.weight_recon),
            ("contrastive_scale", self.contrastive_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub noise_sigma: f64,
    pub positive_fraction: f64,
    /// `None` means 20 pairs per training case.
    pub pairs_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            noise_sigma: 0.05,
            positive_fraction: 0.5,
            pairs_per_epoch: None,
            seed: 0,
        }
    }
}

pub const AUTO_PAIRS_PER_CASE: usize = 20;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::config("positive_fraction", "must lie strictly between 0 and 1"));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::config("pairs_per_epoch", "must be >= 1 (or auto)"));
        }
        Ok(())
    }

    pub fn effective_pairs_per_epoch(&self, n_train_cases: usize) -> usize {
        self.pairs_per_epoch
            .unwrap_or(AUTO_PAIRS_PER_CASE * n_train_cases)
            .max(1)
    }

    pub fn batches_per_epoch(&self, n_train_cases: usize) -> usize {
        self.effective_pairs_per_epoch(n_train_cases).div_ceil(self.batch_size)
    }
}

/// Euclidean plus Manhattan distance.
pub fn hybrid_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("latent lengths {} and {} differ", a.len(), b.len())));
    }
    let (sq, abs) = a.iter().zip(b).fold((0.0, 0.0), |(sq, abs), (x, y)| {
        let d = x - y;
        (sq + d * d, abs + d.abs())
    });
    Ok(sq.sqrt() + abs)
}

/// `scale * [y d^2 + (1 - y) max(m - d, 0)^2]`
pub fn contrastive_loss(d: f64, linked: bool, cfg: &LossConfig) -> f64 {
    let core = if linked {
        d * d
    } else {
        let gap = (cfg.margin - d).max(0.0);
        gap * gap
    };
    cfg.contrastive_scale * core
}

/// `1 - cos(v, v_hat)` and its gradient w.r.t. `v_hat`. A zero-norm vector
/// counts as similarity 0 with zero gradient; the flag reports it.
fn cosine_term(v: &[f64], v_hat: &[f64]) -> (f64, Vec<f64>, bool) {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nh = v_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || nh == 0.0 {
        return (1.0, vec![0.0; v_hat.len()], true);
    }
    let dot: f64 = v.iter().zip(v_hat).map(|(a, b)| a * b).sum();
    let cos = dot / (nv * nh);
    let grad = v
        .iter()
        .zip(v_hat)
        .map(|(&a, &b)| -(a / (nv * nh) - cos * b / (nh * nh)))
        .collect();
    (1.0 - cos, grad, false)
}

/// `sum_i (1 - cos(v_i, v_hat_i))`, in `[0, 4]`.
pub fn reconstruction_loss(v1: &[f64], r1: &[f64], v2: &[f64], r2: &[f64]) -> f64 {
    cosine_term(v1, r1).0 + cosine_term(v2, r2).0
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub contrast: f64,
    pub recon: f64,
    pub distance: f64,
    /// Zero-norm vectors met by the cosine terms.
    pub zero_norm: usize,
}

/// Total loss of one pair and its exact gradients w.r.t. the latent codes and
/// reconstructions. `targets` are the clean feature vectors of the two cases.
///
/// At `e1 = e2` the Euclidean gradient is taken as 0, and the Manhattan
/// subgradient is 0 at coordinate ties.
pub fn total_loss(trace: &ForwardTrace, targets: [&[f64]; 2], linked: bool, cfg: &LossConfig) -> (LossParts, HeadGrads) {
    let (e1, e2) = (trace.latent(0), trace.latent(1));
    let diff: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a - b).collect();
    let euclid = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let manhattan: f64 = diff.iter().map(|d| d.abs()).sum();
    let d = euclid + manhattan;
    let contrast = contrastive_loss(d, linked, cfg);
    let d_contrast_dd = if linked {
        2.0 * d
    } else {
        -2.0 * (cfg.margin - d).max(0.0)
    } * cfg.contrastive_scale;
    let coeff = cfg.weight_contrast * d_contrast_dd;
    let g1: Vec<f64> = diff
        .iter()
        .map(|&x| {
            let e = if euclid > 0.0 { x / euclid } else { 0.0 };
            let m = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            coeff * (e + m)
        })
        .collect();
    let g2: Vec<f64> = g1.iter().map(|g| -g).collect();

    let (c1, mut r1, z1) = cosine_term(targets[0], trace.reconstruction(0));
    let (c2, mut r2, z2) = cosine_term(targets[1], trace.reconstruction(1));
    for g in r1.iter_mut().chain(r2.iter_mut()) {
        *g *= cfg.weight_recon;
    }
    let recon = c1 + c2;
    let parts = LossParts {
        total: cfg.weight_contrast * contrast + cfg.weight_recon * recon,
        contrast,
        recon,
        distance: d,
        zero_norm: usize::from(z1) + usize::from(z2),
    };
    (
        parts,
        HeadGrads {
            latent: [g1, g2],
            reconstruction: [r1, r2],
        },
    )
}

/// Fold index per record, with every series confined to one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, record: usize) -> usize {
        self.folds[record]
    }

    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Series go to folds round-robin, largest first (ties in shuffled order);
/// one-offs then fill whichever fold is currently smallest.
pub fn assign_folds(table: &CaseTable, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut series_order: Vec<&str> = Vec::new();
    let mut one_offs = Vec::new();
    for (i, rec) in table.records().iter().enumerate() {
        match rec.series_id.as_deref() {
            Some(s) => {
                let g = groups.entry(s).or_default();
                if g.is_empty() {
                    series_order.push(s);
                }
                g.push(i);
            }
            None => one_offs.push(i),
        }
    }
    let units = series_order.len() + one_offs.len();
    if k > units {
        return Err(Error::config(
            "folds",
            format!("{k} folds but only {units} series/one-off units"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    series_order.shuffle(&mut rng);
    series_order.sort_by_key(|s| std::cmp::Reverse(groups[s].len()));
    one_offs.shuffle(&mut rng);

    let mut folds = vec![usize::MAX; table.len()];
    let mut sizes = vec![0usize; k];
    for (n, s) in series_order.iter().enumerate() {
        let fold = n % k;
        for &i in &groups[s] {
            folds[i] = fold;
        }
        sizes[fold] += groups[s].len();
    }
    for i in one_offs {
        let fold = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
        folds[i] = fold;
        sizes[fold] += 1;
    }
    Ok(FoldAssignment { k, folds })
}

/// One sampled pair: record indices, link label, (noisy) inputs and geo features.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub linked: bool,
    pub x_a: Vec<f64>,
    pub x_b: Vec<f64>,
    pub geo: GeoTemporalPair,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<PairSample>,
}

impl PairBatch {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.linked).count()
    }
}

/// Draws balanced batches of training pairs restricted to a set of folds.
pub struct PairSampler<'a> {
    table: &'a CaseTable,
    members: Vec<usize>,
    series: Vec<Vec<usize>>,
    /// Cumulative linked-pair counts over `series`.
    cumulative: Vec<u64>,
    batch_size: usize,
    positives_per_batch: usize,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

const NEGATIVE_ATTEMPTS: usize = 10_000;

impl<'a> PairSampler<'a> {
    pub fn new(
        table: &'a CaseTable,
        assignment: &FoldAssignment,
        train_folds: &[usize],
        cfg: &TrainConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_folds.is_empty() {
            return Err(Error::InvalidInput("no training folds".into()));
        }
        let members: Vec<usize> = (0..table.len())
            .filter(|&i| train_folds.contains(&assignment.fold_of(i)))
            .collect();
        let mut by_series: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for &i in &members {
            if let Some(s) = table.records()[i].series_id.as_deref() {
                let g = by_series.entry(s).or_default();
                if g.is_empty() {
                    order.push(s);
                }
                g.push(i);
            }
        }
        let series: Vec<Vec<usize>> = order
            .into_iter()
            .map(|s| by_series.remove(s).expect("present"))
            .filter(|g| g.len() >= 2)
            .collect();
        if series.is_empty() {
            return Err(Error::InvalidInput("no linked pairs available in the training folds".into()));
        }
        let mut acc = 0u64;
        let cumulative = series
            .iter()
            .map(|g| {
                let n = g.len() as u64;
                acc += n * (n - 1) / 2;
                acc
            })
            .collect();
        let positives_per_batch = ((cfg.positive_fraction * cfg.batch_size as f64).ceil() as usize).min(cfg.batch_size);
        let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"));
        Ok(PairSampler {
            table,
            members,
            series,
            cumulative,
            batch_size: cfg.batch_size,
            positives_per_batch,
            noise,
            rng,
        })
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    fn positive(&mut self) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty");
        let r = self.rng.random_range(0..total);
        let s = self.cumulative.partition_point(|&c| c <= r);
        let g = &self.series[s];
        let i = self.rng.random_range(0..g.len());
        let mut j = self.rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        (g[i], g[j])
    }

    fn negative(&mut self) -> Result<(usize, usize)> {
        let recs = self.table.records();
        for _ in 0..NEGATIVE_ATTEMPTS {
            let i = self.members[self.rng.random_range(0..self.members.len())];
            let j = self.members[self.rng.random_range(0..self.members.len())];
            if i != j && !recs[i].linked_with(&recs[j]) {
                return Ok((i, j));
            }
        }
        Err(Error::InvalidInput("could not draw an unlinked training pair".into()))
    }

    fn input(&mut self, record: usize) -> Vec<f64> {
        let mut x = self.table.records()[record].features_f64();
        if let Some(noise) = self.noise {
            for v in &mut x {
                *v += noise.sample(&mut self.rng);
            }
        }
        x
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        let mut pairs = Vec::with_capacity(self.batch_size);
        for n in 0..self.batch_size {
            let linked = n < self.positives_per_batch;
            let (a, b) = if linked { self.positive() } else { self.negative()? };
            let recs = self.table.records();
            let geo = geo_temporal(&recs[a], &recs[b]);
            let x_a = self.input(a);
            let x_b = self.input(b);
            pairs.push(PairSample { a, b, linked, x_a, x_b, geo });
        }
        Ok(PairBatch { pairs })
    }
}

/// Sample `n_batches` training batches from `train_folds`.
pub fn sample_pairs(
    table: &CaseTable,
    assignment: &FoldAssignment,
    train_folds: &[usize],
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
    n_batches: usize,
) -> Result<Vec<PairBatch>> {
    let mut sampler = PairSampler::new(table, assignment, train_folds, cfg, rng)?;
    (0..n_batches).map(|_| sampler.next_batch()).collect()
}

/// Fail if any pair of the batch touches the validation fold.
pub fn check_training_batch(batch: &PairBatch, assignment: &FoldAssignment, val_fold: usize) -> Result<()> {
    for p in &batch.pairs {
        if assignment.fold_of(p.a) == val_fold || assignment.fold_of(p.b) == val_fold {
            return Err(Error::Leakage(format!(
                "training pair ({}, {}) touches validation fold {val_fold}",
                p.a, p.b
            )));
        }
    }
    Ok(())
}

/// Adam moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched if any gradient is non-finite.
pub fn adam_step(params: &mut Params, grads: &Grads, state: &mut OptState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let gts = grads.tensors();
    if gts.len() != state.first.len() {
        return Err(Error::Shape("optimiser state does not match parameters".into()));
    }
    for (t, g) in gts.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: t,
                index: i,
                value: g[i],
            });
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (t, p) in params.tensors_mut().into_iter().enumerate() {
        let (m, v, g) = (&mut state.first[t], &mut state.second[t], gts[t]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_contrast: f64,
    pub loss_recon: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
    pub zero_norm_events: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss_total,loss_contrast,loss_recon\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.lr, r.loss_total, r.loss_contrast, r.loss_recon
            ));
        }
        out
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.loss_total).sum::<f64>() / slice.len() as f64
    }
}

/// Forward, loss and backward over one batch; gradients are averaged over pairs.
pub fn batch_gradients(
    params: &Params,
    batch: &PairBatch,
    table: &CaseTable,
    loss_cfg: &LossConfig,
    grads: &mut Grads,
) -> Result<LossParts> {
    grads.fill(0.0);
    let scale = 1.0 / batch.pairs.len() as f64;
    let mut sum = LossParts::default();
    let recs = table.records();
    for p in &batch.pairs {
        let trace = network::forward_pair(params, &p.x_a, &p.x_b, &p.geo)?;
        let ta = recs[p.a].features_f64();
        let tb = recs[p.b].features_f64();
        let (parts, mut heads) = total_loss(&trace, [&ta, &tb], p.linked, loss_cfg);
        for g in heads.latent.iter_mut().chain(heads.reconstruction.iter_mut()) {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        network::backward_into(params, &trace, &heads, grads)?;
        sum.total += parts.total;
        sum.contrast += parts.contrast;
        sum.recon += parts.recon;
        sum.distance += parts.distance;
        sum.zero_norm += parts.zero_norm;
    }
    sum.total *= scale;
    sum.contrast *= scale;
    sum.recon *= scale;
    sum.distance *= scale;
    Ok(sum)
}

/// Sampler stream id for a fold, so folds draw independent pairs from one seed.
fn fold_stream(val_fold: usize) -> u64 {
    1 + val_fold as u64
}

/// Train on every fold except `val_fold`.
pub fn train_fold(
    table: &CaseTable,
    assignment: &FoldAssignment,
    val_fold: usize,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Params, History)> {
    net_cfg.validate()?;
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if net_cfg.input_dim != table.dims() {
        return Err(Error::Shape(format!(
            "network expects {} features, table has {}",
            net_cfg.input_dim,
            table.dims()
        )));
    }
    let mut params = init_params(net_cfg, train_cfg.seed)?;
    let mut history = History::default();
    if train_cfg.epochs == 0 {
        return Ok((params, history));
    }
    let train_folds: Vec<usize> = (0..assignment.k).filter(|&f| f != val_fold).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(fold_stream(val_fold));
    let mut sampler = PairSampler::new(table, assignment, &train_folds, train_cfg, rng)?;
    let per_epoch = train_cfg.batches_per_epoch(sampler.n_members());
    let total_steps = per_epoch * train_cfg.epochs;
    let adam = AdamConfig::from(train_cfg);
    let mut state = OptState::new(&params);
    let mut grads = params.zeros_like();
    for step in 0..total_steps {
        let batch = sampler.next_batch()?;
        check_training_batch(&batch, assignment, val_fold)?;
        let lr = cosine_lr(step, total_steps, train_cfg.learning_rate, 0.0);
        let parts = batch_gradients(&params, &batch, table, loss_cfg, &mut grads)?;
        adam_step(&mut params, &grads, &mut state, lr, &adam)?;
        history.zero_norm_events += parts.zero_norm;
        history.records.push(HistoryRecord {
            step,
            lr,
            loss_total: parts.total,
            loss_contrast: parts.contrast,
            loss_recon: parts.recon,
        });
    }
    if history.zero_norm_events > 0 {
        log::warn!(
            "fold {val_fold}: {} zero-norm vectors met in the reconstruction loss",
            history.zero_norm_events
        );
    }
    Ok((params, history))
}
