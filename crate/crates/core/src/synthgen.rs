//! Synthetic case tables with series structure.
//!
//! Each series owns a small set of characteristic features that each of its
//! offences expresses with probability `signature_strength`. Every other cell
//! is drawn at a shared population base rate, solved so that the expected
//! fraction of zeros equals `target_sparsity`. Series members scatter around a
//! series centroid in space and follow exponential inter-offence gaps in time;
//! one-offs are uniform over the whole extent.
//!
//! Randomness comes from ChaCha8 streams split off one seed: stream 0 plans the
//! series structure and final ordering, stream `1 + s` draws series `s`, and
//! the stream after the last series draws the one-offs. Series are therefore
//! independent of each other and of scheduling.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::Serialize;

use crate::dataset::{CaseRecord, CaseTable, FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_cases: usize,
    pub target_series_fraction: f64,
    pub series_size_min: usize,
    pub series_size_max: usize,
    pub dims: usize,
    pub target_sparsity: f64,
    pub signature_strength: f64,
    pub n_signature_features: usize,
    pub geo_series_sigma_km: f64,
    pub geo_population_extent_km: f64,
    pub time_series_gap_days: f64,
    pub time_extent_days: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_cases: 2000,
            target_series_fraction: 0.5,
            series_size_min: 3,
            series_size_max: 8,
            dims: 300,
            target_sparsity: 0.91,
            signature_strength: 0.9,
            n_signature_features: 12,
            geo_series_sigma_km: 10.0,
            geo_population_extent_km: 100.0,
            time_series_gap_days: 60.0,
            time_extent_days: 3650.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.n_cases < 2 {
            return cfg("n_cases", "need at least 2 cases");
        }
        if !(0.0..=1.0).contains(&self.target_series_fraction) {
            return cfg("target_series_fraction", "must lie in [0, 1]");
        }
        if self.series_size_min < 2 {
            return cfg("series_size_min", "series need at least 2 members");
        }
        if self.series_size_max < self.series_size_min {
            return cfg("series_size_max", "must be >= series_size_min");
        }
        if self.dims == 0 {
            return cfg("dims", "must be >= 1");
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return cfg("target_sparsity", "must lie strictly between 0 and 1");
        }
        if !(self.signature_strength > 0.5 && self.signature_strength <= 1.0) {
            return cfg("signature_strength", "must lie in (0.5, 1]");
        }
        if self.n_signature_features > self.dims {
            return cfg("n_signature_features", "exceeds dims");
        }
        for (field, v) in [
            ("geo_series_sigma_km", self.geo_series_sigma_km),
            ("geo_population_extent_km", self.geo_population_extent_km),
            ("time_series_gap_days", self.time_series_gap_days),
            ("time_extent_days", self.time_extent_days),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return cfg(field, "must be finite and >= 0");
            }
        }
        if self.time_series_gap_days == 0.0 {
            return cfg("time_series_gap_days", "must be > 0");
        }
        Ok(())
    }

    /// Number of cases reserved for series membership.
    fn series_budget(&self) -> usize {
        (self.n_cases as f64 * self.target_series_fraction).round() as usize
    }
}

/// Feature names used by generated tables: `b000`, `b001`, ...
pub fn feature_names(dims: usize) -> Vec<String> {
    let width = dims.saturating_sub(1).to_string().len().max(3);
    (0..dims).map(|i| format!("b{i:0width$}")).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draw series sizes uniformly in `[min, max]` until the series budget is spent.
/// A remainder smaller than `series_size_min` stays as one-offs.
fn plan_series(config: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining = config.series_budget();
    let mut sizes = Vec::new();
    while remaining >= config.series_size_min {
        let s = rng
            .random_range(config.series_size_min..=config.series_size_max)
            .min(remaining);
        sizes.push(s);
        remaining -= s;
    }
    sizes
}

fn choose2(n: usize) -> f64 {
    n as f64 * n.saturating_sub(1) as f64 / 2.0
}

/// Linked pairs over all pairs for the given series sizes among `n_cases` cases.
pub fn expected_positive_fraction(series_sizes: &[usize], n_cases: usize) -> f64 {
    let total = choose2(n_cases);
    if total == 0.0 {
        return 0.0;
    }
    series_sizes.iter().map(|&s| choose2(s)).sum::<f64>() / total
}

/// Population base rate that makes the expected density match the target.
fn solve_base_rate(config: &GenConfig, sizes: &[usize]) -> Result<f64> {
    let cells = config.n_cases as f64 * config.dims as f64;
    let series_cases: usize = sizes.iter().sum();
    let sig_cells = (series_cases * config.n_signature_features) as f64;
    let target_ones = (1.0 - config.target_sparsity) * cells;
    let sig_ones = sig_cells * config.signature_strength;
    let free_cells = cells - sig_cells;
    let rate = if free_cells > 0.0 {
        (target_ones - sig_ones) / free_cells
    } else {
        0.0
    };
    // exact zero is a legitimate degenerate configuration
    let rate = if rate.abs() < 1e-12 { 0.0 } else { rate };
    if rate < 0.0 {
        return Err(Error::Infeasible {
            field: "target_sparsity".into(),
            message: format!(
                "signature features alone give density {:.4} above target {:.4}",
                sig_ones / cells,
                1.0 - config.target_sparsity
            ),
        });
    }
    if rate >= config.signature_strength {
        return Err(Error::Infeasible {
            field: "target_sparsity".into(),
            message: format!(
                "required base rate {rate:.4} is not below signature_strength {}",
                config.signature_strength
            ),
        });
    }
    Ok(rate)
}

/// Population base rate a config resolves to, or the infeasibility error.
pub fn base_rate(config: &GenConfig) -> Result<f64> {
    config.validate()?;
    let sizes = plan_series(config, &mut stream(config.seed, 0));
    solve_base_rate(config, &sizes)
}

struct Draft {
    series: Option<usize>,
    features: Vec<u8>,
    x_km: f64,
    y_km: f64,
    t_days: f64,
}

fn draw_series(config: &GenConfig, index: usize, size: usize, rate: f64) -> Vec<Draft> {
    let mut rng = stream(config.seed, 1 + index as u64);
    let extent = config.geo_population_extent_km;
    let signature = sample(&mut rng, config.dims, config.n_signature_features).into_vec();
    let mut is_signature = vec![false; config.dims];
    for &f in &signature {
        is_signature[f] = true;
    }
    let cx = rng.random::<f64>() * extent;
    let cy = rng.random::<f64>() * extent;
    let scatter = Normal::new(0.0, config.geo_series_sigma_km).expect("sigma validated");
    let gaps = Exp::new(1.0 / config.time_series_gap_days).expect("gap validated");
    let mut t = rng.random::<f64>() * config.time_extent_days;
    (0..size)
        .map(|k| {
            if k > 0 {
                t += gaps.sample(&mut rng);
            }
            let features = is_signature
                .iter()
                .map(|&sig| {
                    let p = if sig { config.signature_strength } else { rate };
                    u8::from(rng.random::<f64>() < p)
                })
                .collect();
            Draft {
                series: Some(index),
                features,
                x_km: cx + scatter.sample(&mut rng),
                y_km: cy + scatter.sample(&mut rng),
                t_days: t,
            }
        })
        .collect()
}

fn draw_one_offs(config: &GenConfig, stream_id: u64, count: usize, rate: f64) -> Vec<Draft> {
    let mut rng = stream(config.seed, stream_id);
    (0..count)
        .map(|_| Draft {
            series: None,
            features: (0..config.dims)
                .map(|_| u8::from(rng.random::<f64>() < rate))
                .collect(),
            x_km: rng.random::<f64>() * config.geo_population_extent_km,
            y_km: rng.random::<f64>() * config.geo_population_extent_km,
            t_days: rng.random::<f64>() * config.time_extent_days,
        })
        .collect()
}

pub fn generate(config: &GenConfig) -> Result<CaseTable> {
    config.validate()?;
    let mut plan_rng = stream(config.seed, 0);
    let sizes = plan_series(config, &mut plan_rng);
    let rate = solve_base_rate(config, &sizes)?;

    let mut drafts: Vec<Draft> = Vec::with_capacity(config.n_cases);
    for (i, &size) in sizes.iter().enumerate() {
        drafts.extend(draw_series(config, i, size, rate));
    }
    let one_offs = config.n_cases - drafts.len();
    drafts.extend(draw_one_offs(config, 1 + sizes.len() as u64, one_offs, rate));
    drafts.shuffle(&mut plan_rng);

    let id_width = config.n_cases.to_string().len();
    let series_width = sizes.len().max(1).to_string().len();
    let records = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| CaseRecord {
            case_id: format!("c{:0id_width$}", i + 1),
            series_id: d.series.map(|s| format!("s{:0series_width$}", s + 1)),
            features: d.features,
            x_km: d.x_km,
            y_km: d.y_km,
            t_days: d.t_days,
        })
        .collect();
    let schema = FeatureSchema::uniform(feature_names(config.dims), FeatureKind::Behavioural)?;
    CaseTable::new(schema, records)
}

/// Expected linked-pair fraction when sizes are uniform on `[lo, hi]` and fill `budget` cases.
fn planned_fraction(budget: usize, lo: usize, hi: usize, n_cases: usize) -> f64 {
    let count = (hi - lo + 1) as f64;
    let mean_size = (lo + hi) as f64 / 2.0;
    let mean_pairs = (lo..=hi).map(choose2).sum::<f64>() / count;
    (budget as f64 / mean_size) * mean_pairs / choose2(n_cases)
}

/// Shift the series-size range (keeping its width) so the expected linked-pair
/// fraction is as close to `target` as the series budget allows.
pub fn calibrate_imbalance(config: &GenConfig, target: f64) -> Result<GenConfig> {
    config.validate()?;
    if !(target > 0.0 && target < 0.5) {
        return Err(Error::config("target", "positive pair fraction must lie in (0, 0.5)"));
    }
    let budget = config.series_budget();
    if budget < 2 {
        return Err(Error::Infeasible {
            field: "target_series_fraction".into(),
            message: "no cases are reserved for series".into(),
        });
    }
    let ceiling = expected_positive_fraction(&[budget], config.n_cases);
    if target > ceiling {
        return Err(Error::Infeasible {
            field: "target_series_fraction".into(),
            message: format!(
                "target {target} exceeds {ceiling:.5}, the fraction with all {budget} series cases in one series"
            ),
        });
    }
    let width = config.series_size_max - config.series_size_min;
    let mut best: Option<(f64, usize, usize)> = None;
    for lo in 2..=budget {
        let hi = (lo + width).min(budget);
        let err = (planned_fraction(budget, lo, hi, config.n_cases) - target).abs();
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, lo, hi));
        }
    }
    let (err, lo, hi) = best.expect("budget >= 2 yields a candidate");
    if err > 0.1 * target {
        return Err(Error::Infeasible {
            field: "series_size_min".into(),
            message: format!("closest reachable fraction misses target {target} by {err:.5}"),
        });
    }
    Ok(GenConfig {
        series_size_min: lo,
        series_size_max: hi,
        ..config.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub sparsity: f64,
    pub positive_pair_fraction: f64,
    pub n_series: usize,
    pub n_one_offs: usize,
    pub per_feature_rates: Vec<f64>,
}

/// Exact table statistics; the linked-pair fraction comes from series-size combinatorics.
pub fn summarize(table: &CaseTable) -> StatsReport {
    let n = table.len();
    let m = table.dims();
    let mut counts = vec![0usize; m];
    for rec in table.records() {
        for (c, &v) in counts.iter_mut().zip(&rec.features) {
            *c += usize::from(v);
        }
    }
    let ones: usize = counts.iter().sum();
    let cells = n * m;
    let sizes: Vec<usize> = table.series_sizes().into_iter().map(|(_, s)| s).collect();
    StatsReport {
        sparsity: if cells == 0 { 0.0 } else { (cells - ones) as f64 / cells as f64 },
        positive_pair_fraction: expected_positive_fraction(&sizes, n),
        n_series: sizes.len(),
        n_one_offs: table.records().iter().filter(|r| r.series_id.is_none()).count(),
        per_feature_rates: counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
    }
}
