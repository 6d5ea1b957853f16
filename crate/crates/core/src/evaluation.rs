//! Inference scoring, Top-K ranking, linkage metrics, the logistic-regression
//! baseline and cross-validated experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::{geo_temporal, CaseTable, GeoTemporalPair};
use crate::error::{Error, Result};
use crate::network::{concat_partial, encode, encode_concat_partial, encoder_input, Fusion, NetConfig, Params};
use crate::training::{
    assign_folds, train_fold, FoldAssignment, History, LossConfig, PairBatch, PairSampler, TrainConfig,
};

/// Exponential decay of latent distance; the decay scale is `margin / 1.5`.
pub fn similarity(distance: f64, margin: f64) -> f64 {
    (-distance / (margin / 1.5)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredPair {
    pub case_a: String,
    pub case_b: String,
    pub distance: f64,
    pub similarity: f64,
    pub label: Option<bool>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

enum Encoded {
    /// One latent per case.
    Latents(Vec<Vec<f64>>),
    /// Feature part of the first layer per case; the geo part is added per pair.
    Partials(Vec<Vec<f64>>),
    /// Full encoding per pair.
    Direct,
}

/// Latent distances between cases of one table. Without `InputConcat` fusion
/// every case is encoded once; with it the encoder input depends on the pair,
/// so only the feature part of the first layer is shared across pairs.
pub struct PairScorer<'a> {
    params: &'a Params,
    table: &'a CaseTable,
    encoded: Encoded,
}

impl<'a> PairScorer<'a> {
    pub fn new(params: &'a Params, table: &'a CaseTable) -> Result<Self> {
        let cfg = &params.config;
        if cfg.input_dim != table.dims() {
            return Err(Error::Shape(format!(
                "params expect {} features, dataset has {}",
                cfg.input_dim,
                table.dims()
            )));
        }
        let recs = table.records();
        let encoded = if cfg.fusion != Fusion::InputConcat {
            let geo = GeoTemporalPair::default();
            Encoded::Latents(
                recs.iter()
                    .map(|r| encode(params, &encoder_input(cfg, &r.features_f64(), &geo)))
                    .collect::<Result<_>>()?,
            )
        } else if cfg.skip_connections && cfg.encoder_input_dim() == cfg.widths()[1] {
            Encoded::Direct
        } else {
            Encoded::Partials(
                recs.iter()
                    .map(|r| concat_partial(params, &r.features_f64()))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(PairScorer { params, table, encoded })
    }

    /// Per-case latent code, available unless fusion is `InputConcat`.
    pub fn latent(&self, i: usize) -> Option<&[f64]> {
        match &self.encoded {
            Encoded::Latents(l) => Some(&l[i]),
            _ => None,
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let recs = self.table.records();
        let geo = || geo_temporal(&recs[i], &recs[j]);
        match &self.encoded {
            Encoded::Latents(l) => Ok(euclidean(&l[i], &l[j])),
            Encoded::Partials(p) => {
                let g = geo();
                let ei = encode_concat_partial(self.params, &p[i], &g)?;
                let ej = encode_concat_partial(self.params, &p[j], &g)?;
                Ok(euclidean(&ei, &ej))
            }
            Encoded::Direct => {
                let (cfg, g) = (&self.params.config, geo());
                let ei = encode(self.params, &encoder_input(cfg, &recs[i].features_f64(), &g))?;
                let ej = encode(self.params, &encoder_input(cfg, &recs[j].features_f64(), &g))?;
                Ok(euclidean(&ei, &ej))
            }
        }
    }

    pub fn score(&self, i: usize, j: usize, margin: f64) -> Result<ScoredPair> {
        let recs = self.table.records();
        let (a, b) = if recs[i].case_id <= recs[j].case_id { (i, j) } else { (j, i) };
        let distance = self.distance(a, b)?;
        Ok(ScoredPair {
            case_a: recs[a].case_id.clone(),
            case_b: recs[b].case_id.clone(),
            distance,
            similarity: similarity(distance, margin),
            label: Some(recs[a].linked_with(&recs[b])),
        })
    }
}

/// Score every unordered pair of cases, canonicalised so `case_a < case_b`.
/// Labels come from the table's series ids.
pub fn score_all_pairs(params: &Params, table: &CaseTable, margin: f64) -> Result<Vec<ScoredPair>> {
    if table.is_empty() {
        return Err(Error::InvalidInput("empty table".into()));
    }
    let scorer = PairScorer::new(params, table)?;
    let n = table.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(scorer.score(i, j, margin)?);
        }
    }
    Ok(out)
}

pub fn scored_pairs_csv(pairs: &[ScoredPair]) -> String {
    let mut out = String::from("case_a,case_b,distance,similarity,label\n");
    for p in pairs {
        let label = match p.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        out.push_str(&format!("{},{},{},{},{label}\n", p.case_a, p.case_b, p.distance, p.similarity));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedPartner {
    pub rank: usize,
    pub case_id: String,
    pub similarity: f64,
    pub distance: f64,
}

/// Partners of `query` by similarity, descending; ties go to the smaller case id.
pub fn top_k(scored: &[ScoredPair], query: &str, k: usize) -> Result<Vec<RankedPartner>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let mut partners: Vec<(&str, f64, f64)> = scored
        .iter()
        .filter_map(|p| {
            if p.case_a == query {
                Some((p.case_b.as_str(), p.similarity, p.distance))
            } else if p.case_b == query {
                Some((p.case_a.as_str(), p.similarity, p.distance))
            } else {
                None
            }
        })
        .collect();
    if partners.is_empty() && !scored.is_empty() {
        return Err(Error::UnknownCase(query.to_string()));
    }
    partners.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(partners
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, s, d))| RankedPartner {
            rank: i + 1,
            case_id: id.to_string(),
            similarity: s,
            distance: d,
        })
        .collect())
}

/// Top-K partners of one case computed directly, without scoring all pairs.
pub fn rank_query(params: &Params, table: &CaseTable, query: &str, k: usize, margin: f64) -> Result<Vec<RankedPartner>> {
    let q = table
        .position(query)
        .ok_or_else(|| Error::UnknownCase(query.to_string()))?;
    let scorer = PairScorer::new(params, table)?;
    let scored: Vec<ScoredPair> = (0..table.len())
        .filter(|&j| j != q)
        .map(|j| scorer.score(q, j, margin))
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Ok(Vec::new());
    }
    top_k(&scored, query, k)
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("both classes must be present".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative; ties count ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let order = descending(scores);
    // count in half-wins to stay exact
    let mut half_wins: u128 = 0;
    let mut neg_above: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        // positives in this group beat every negative below it
        half_wins += p * n;
        half_wins += 2 * p * (neg as u128 - neg_above - n);
        neg_above += n;
        i = j;
    }
    Ok(half_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// True-positive rate at the most permissive threshold whose false-positive
/// rate stays within `fp_rate` (classifying `score >= threshold` as linked).
pub fn tp_at_fixed_fp(scores: &[f64], labels: &[bool], fp_rate: f64) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    if !(fp_rate > 0.0 && fp_rate < 1.0) {
        return Err(Error::InvalidInput("fp_rate must lie in (0, 1)".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / neg as f64 <= fp_rate {
            best = tp;
        } else {
            break;
        }
    }
    Ok(best as f64 / pos as f64)
}

pub const AUPRC_THRESHOLDS: usize = 100;

/// Area under the precision-recall curve from `AUPRC_THRESHOLDS` thresholds
/// spaced uniformly on [0, 1], integrated with the trapezoid rule. Precision
/// with no predicted positives is 1.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::InvalidInput("AUPRC needs at least one positive".into()));
    }
    let mut pos_scores: Vec<f64> = Vec::with_capacity(pos);
    let mut neg_scores: Vec<f64> = Vec::with_capacity(scores.len() - pos);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos_scores.push(s);
        } else {
            neg_scores.push(s);
        }
    }
    pos_scores.sort_by(f64::total_cmp);
    neg_scores.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s < t);

    let steps = AUPRC_THRESHOLDS - 1;
    // highest threshold first, so recall is non-decreasing along the sweep
    let points: Vec<(f64, f64)> = (0..AUPRC_THRESHOLDS)
        .rev()
        .map(|k| {
            let t = k as f64 / steps as f64;
            let tp = at_least(&pos_scores, t);
            let fp = at_least(&neg_scores, t);
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            (tp as f64 / pos as f64, precision)
        })
        .collect();
    Ok(points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// Logistic regression over `|x_i - x_j|` plus the pair's two geo values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub featurization: &'static str,
}

pub const LOGREG_FEATURIZATION: &str = "absdiff+geo";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            epochs: 5,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

pub fn pair_features(x_a: &[f64], x_b: &[f64], geo: &GeoTemporalPair) -> Vec<f64> {
    let mut f: Vec<f64> = x_a.iter().zip(x_b).map(|(a, b)| (a - b).abs()).collect();
    f.extend(geo.as_array());
    f
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogRegModel {
    pub fn zeros(n_features: usize) -> Self {
        LogRegModel {
            weights: vec![0.0; n_features],
            bias: 0.0,
            featurization: LOGREG_FEATURIZATION,
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.bias + features.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>())
    }

    /// Mean logistic loss plus the L2 penalty over a set of featurised examples.
    pub fn loss(&self, examples: &[(Vec<f64>, bool)], l2: f64) -> f64 {
        let data: f64 = examples
            .iter()
            .map(|(f, y)| {
                let p = self.predict(f).clamp(1e-15, 1.0 - 1e-15);
                if *y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / examples.len() as f64;
        data + 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// One gradient-descent step on the mean loss of `examples`.
    pub fn step(&mut self, examples: &[(Vec<f64>, bool)], lr: f64, l2: f64) {
        let n = examples.len() as f64;
        let mut gw: Vec<f64> = self.weights.iter().map(|w| l2 * w).collect();
        let mut gb = 0.0;
        for (f, y) in examples {
            let err = (self.predict(f) - f64::from(u8::from(*y))) / n;
            gb += err;
            for (g, x) in gw.iter_mut().zip(f) {
                *g += err * x;
            }
        }
        for (w, g) in self.weights.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        self.bias -= lr * gb;
    }
}

/// Mini-batch gradient descent over the given batches, reshuffled every epoch.
pub fn fit_logreg(batches: &[PairBatch], cfg: &LogRegConfig) -> Result<LogRegModel> {
    let examples: Vec<Vec<(Vec<f64>, bool)>> = batches
        .iter()
        .map(|b| {
            b.pairs
                .iter()
                .map(|p| (pair_features(&p.x_a, &p.x_b, &p.geo), p.linked))
                .collect()
        })
        .collect();
    let positives = examples.iter().flatten().filter(|(_, y)| *y).count();
    let total: usize = examples.iter().map(Vec::len).sum();
    if positives == 0 || positives == total {
        return Err(Error::InvalidInput("logistic regression needs both classes".into()));
    }
    let width = examples.iter().flatten().next().map_or(0, |(f, _)| f.len());
    let mut model = LogRegModel::zeros(width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &b in &order {
            model.step(&examples[b], cfg.learning_rate, cfg.l2);
        }
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Decoder-stage fusion with the reconstruction term.
    Ours,
    /// Input concatenation, contrastive term only.
    NaiveSiamese,
    LogReg,
    /// Siamese network exactly as configured.
    AsConfigured,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::NaiveSiamese => "naive_siamese",
            Method::LogReg => "logreg",
            Method::AsConfigured => "as_configured",
        }
    }

    /// Apply the method's fixed choices on top of a run configuration.
    pub fn apply(self, run: &RunConfig) -> RunConfig {
        let mut c = *run;
        match self {
            Method::Ours => {
                c.net.fusion = Fusion::DecoderAdd;
                if c.loss.weight_recon == 0.0 {
                    c.loss.weight_recon = LossConfig::default().weight_recon;
                }
            }
            Method::NaiveSiamese => {
                c.net.fusion = Fusion::InputConcat;
                c.loss.weight_recon = 0.0;
            }
            Method::LogReg | Method::AsConfigured => {}
        }
        c
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ours" => Ok(Method::Ours),
            "naive_siamese" | "naive" => Ok(Method::NaiveSiamese),
            "logreg" => Ok(Method::LogReg),
            other => Err(format!("unknown method `{other}` (expected ours|naive_siamese|logreg)")),
        }
    }
}

/// All within-fold pairs `(i, j)`, `i < j`, with their link labels.
pub fn validation_pairs(table: &CaseTable, assignment: &FoldAssignment, fold: usize) -> Vec<(usize, usize, bool)> {
    let members = assignment.members(fold);
    let recs = table.records();
    let mut out = Vec::with_capacity(members.len() * members.len().saturating_sub(1) / 2);
    for (n, &i) in members.iter().enumerate() {
        for &j in &members[n + 1..] {
            out.push((i, j, recs[i].linked_with(&recs[j])));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub folds: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MetricSummary {
    pub fn from_folds(folds: Vec<f64>) -> Self {
        let n = folds.len() as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let std = (folds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        MetricSummary { folds, mean, std }
    }

    fn to_json(&self) -> Value {
        json!({ "folds": self.folds, "mean": self.mean, "std": self.std })
    }
}

/// Cross-validated metrics in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub fixed_fp_rate: f64,
    pub auc: MetricSummary,
    pub tp_at_fixed_fp: MetricSummary,
    pub auprc: MetricSummary,
}

impl MetricsReport {
    pub fn to_json(&self) -> Value {
        // serde_json's default map keeps keys sorted
        json!({
            "method": self.method.as_str(),
            "k": self.k,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "fixed_fp_rate": self.fixed_fp_rate,
            "std_kind": "population",
            "units": "percent",
            "auc": self.auc.to_json(),
            "tp_at_fixed_fp": self.tp_at_fixed_fp.to_json(),
            "auprc": self.auprc.to_json(),
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("plain JSON value");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub tp_at_fixed_fp: f64,
    pub auprc: f64,
    pub n_val_pairs: usize,
    pub n_val_positives: usize,
    pub params: Option<Params>,
    pub history: Option<History>,
    pub logreg: Option<LogRegModel>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    /// Effective configuration after the method's overrides.
    pub config: RunConfig,
    pub assignment: FoldAssignment,
    pub report: MetricsReport,
    pub folds: Vec<FoldResult>,
}

fn fold_metrics(scores: &[f64], labels: &[bool], fixed_fp_rate: f64) -> Result<(f64, f64, f64)> {
    Ok((
        100.0 * roc_auc(scores, labels)?,
        100.0 * tp_at_fixed_fp(scores, labels, fixed_fp_rate)?,
        100.0 * auprc(scores, labels)?,
    ))
}

fn run_fold(table: &CaseTable, assignment: &FoldAssignment, fold: usize, cfg: &RunConfig, method: Method) -> Result<FoldResult> {
    let pairs = validation_pairs(table, assignment, fold);
    let labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidInput(format!(
            "validation fold {fold} lacks one of the two classes ({positives} linked of {} pairs)",
            labels.len()
        )));
    }
    let recs = table.records();
    let mut result = FoldResult {
        fold,
        auc: 0.0,
        tp_at_fixed_fp: 0.0,
        auprc: 0.0,
        n_val_pairs: pairs.len(),
        n_val_positives: positives,
        params: None,
        history: None,
        logreg: None,
    };
    let scores: Vec<f64> = match method {
        Method::LogReg => {
            let train_folds: Vec<usize> = (0..assignment.k).filter(|&f| f != fold).collect();
            let clean = TrainConfig {
                noise_sigma: 0.0,
                ..cfg.train
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(1 + fold as u64);
            let mut sampler = PairSampler::new(table, assignment, &train_folds, &clean, rng)?;
            let n_batches = clean.batches_per_epoch(sampler.n_members());
            let batches: Vec<PairBatch> = (0..n_batches)
                .map(|_| sampler.next_batch())
                .collect::<Result<_>>()?;
            for b in &batches {
                crate::training::check_training_batch(b, assignment, fold)?;
            }
            let model = fit_logreg(
                &batches,
                &LogRegConfig {
                    seed: cfg.train.seed,
                    ..LogRegConfig::default()
                },
            )?;
            let scores = pairs
                .iter()
                .map(|&(i, j, _)| {
                    let f = pair_features(
                        &recs[i].features_f64(),
                        &recs[j].features_f64(),
                        &geo_temporal(&recs[i], &recs[j]),
                    );
                    model.predict(&f)
                })
                .collect();
            result.logreg = Some(model);
            scores
        }
        _ => {
            let (params, history) = train_fold(table, assignment, fold, &cfg.net, &cfg.train, &cfg.loss)?;
            let scorer = PairScorer::new(&params, table)?;
            let scores = pairs
                .iter()
                .map(|&(i, j, _)| scorer.distance(i, j).map(|d| similarity(d, cfg.loss.margin)))
                .collect::<Result<Vec<f64>>>()?;
            result.params = Some(params);
            result.history = Some(history);
            scores
        }
    };
    let (auc, tp, ap) = fold_metrics(&scores, &labels, cfg.fixed_fp_rate)?;
    result.auc = auc;
    result.tp_at_fixed_fp = tp;
    result.auprc = ap;
    Ok(result)
}

/// Series-aware k-fold cross-validation. Folds are independent; up to `jobs`
/// of them train at once and results are reported in fold order.
pub fn cross_validate(table: &CaseTable, run: &RunConfig, method: Method, jobs: usize) -> Result<CvOutcome> {
    let cfg = method.apply(&run.resolve_input_dim(table.dims())?);
    cfg.validate()?;
    let assignment = assign_folds(table, cfg.folds, cfg.train.seed)?;
    let k = cfg.folds;
    let jobs = jobs.clamp(1, k);

    let mut results: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    if jobs == 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(table, &assignment, fold, &cfg, method));
        }
    } else {
        let folds: Vec<usize> = (0..k).collect();
        for chunk in folds.chunks(jobs) {
            let done: Vec<(usize, Result<FoldResult>)> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&fold| {
                        let (a, c) = (&assignment, &cfg);
                        (fold, s.spawn(move || run_fold(table, a, fold, c, method)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|(f, h)| (f, h.join().expect("fold worker panicked")))
                    .collect()
            });
            for (fold, r) in done {
                results[fold] = Some(r);
            }
        }
    }
    let folds: Vec<FoldResult> = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<_>>()?;

    let report = MetricsReport {
        method,
        k,
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        fixed_fp_rate: cfg.fixed_fp_rate,
        auc: MetricSummary::from_folds(folds.iter().map(|f| f.auc).collect()),
        tp_at_fixed_fp: MetricSummary::from_folds(folds.iter().map(|f| f.tp_at_fixed_fp).collect()),
        auprc: MetricSummary::from_folds(folds.iter().map(|f| f.auprc).collect()),
    };
    Ok(CvOutcome {
        config: cfg,
        assignment,
        report,
        folds,
    })
}

/// Build a network configuration for a table from a run configuration.
pub fn net_for(table: &CaseTable, run: &RunConfig) -> Result<NetConfig> {
    Ok(run.resolve_input_dim(table.dims())?.net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(0.0, 5.0), 1.0);
        assert!((similarity(10.0 / 3.0, 5.0) - (-1f64).exp()).abs() < 1e-12);
        assert!((similarity(10.0 / 3.0, 5.0) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(), 0.75);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn tp_at_fp_examples() {
        let labels = [true, true, false, false];
        assert_eq!(tp_at_fixed_fp(&[0.9, 0.8, 0.2, 0.1], &labels, 0.15).unwrap(), 1.0);
        assert_eq!(tp_at_fixed_fp(&[0.9, 0.8, 0.2, 0.1], &labels, 0.01).unwrap(), 1.0);
        // one positive below nine negatives
        let mut scores = vec![0.1];
        let mut labels = vec![true];
        for i in 0..9 {
            scores.push(0.2 + 0.05 * i as f64);
            labels.push(false);
        }
        assert_eq!(tp_at_fixed_fp(&scores, &labels, 0.15).unwrap(), 0.0);
    }

    #[test]
    fn auprc_examples() {
        // perfect ranking with a threshold in the gap
        let scores = [0.95, 0.9, 0.85, 0.3, 0.2, 0.1];
        let labels = [true, true, true, false, false, false];
        assert!((auprc(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
        // single positive at the minimum of ten scores: the curve jumps from
        // (recall 0, precision 0) to (recall 1, precision 0.1), area 0.05
        let scores: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        let mut labels = vec![false; 10];
        labels[0] = true;
        let a = auprc(&scores, &labels).unwrap();
        assert!((a - 0.05).abs() < 1e-12, "{a}");
        assert!(auprc(&[0.3], &[false]).is_err());
    }

    #[test]
    fn top_k_orders_and_truncates() {
        let mk = |a: &str, b: &str, s: f64| ScoredPair {
            case_a: a.into(),
            case_b: b.into(),
            distance: -s.ln() * 5.0 / 1.5,
            similarity: s,
            label: None,
        };
        let scored = vec![mk("a", "b", 0.5), mk("a", "c", 1.0), mk("a", "d", 0.5), mk("b", "c", 0.9)];
        let r = top_k(&scored, "a", 10).unwrap();
        let ids: Vec<&str> = r.iter().map(|p| p.case_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "b", "d"]);
        assert_eq!(r[0].similarity, 1.0);
        assert_eq!(top_k(&scored, "a", 1).unwrap().len(), 1);
        assert!(top_k(&scored, "zz", 1).is_err());
        assert!(top_k(&scored, "a", 0).is_err());
    }

    #[test]
    fn logreg_zero_epochs_is_neutral() {
        use crate::training::PairSample;
        let batch = PairBatch {
            pairs: vec![
                PairSample { a: 0, b: 1, linked: true, x_a: vec![1.0], x_b: vec![1.0], geo: GeoTemporalPair::default() },
                PairSample { a: 0, b: 2, linked: false, x_a: vec![1.0], x_b: vec![0.0], geo: GeoTemporalPair::default() },
            ],
        };
        let m = fit_logreg(&[batch.clone()], &LogRegConfig { epochs: 0, ..LogRegConfig::default() }).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert_eq!(m.predict(&[1.0, 2.0, 3.0]), 0.5);
        let single = PairBatch { pairs: vec![batch.pairs[0].clone()] };
        assert!(fit_logreg(&[single], &LogRegConfig::default()).is_err());
    }

    #[test]
    fn metric_summary_uses_population_std() {
        let s = MetricSummary::from_folds(vec![1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}
