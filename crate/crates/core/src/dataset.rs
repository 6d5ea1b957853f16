//! Case data model, dataset CSV I/O and pairwise geographic-temporal features.
//!
//! Dataset CSV layout (UTF-8, one header row):
//!
//! ```text
//! case_id,series_id,x_km,y_km,t_days,f_<name1>,...,f_<nameM>
//! ```
//!
//! An empty `series_id` marks an apparent one-off. Feature cells hold exactly
//! `0` or `1`. Feature kinds live in a sidecar schema CSV with header
//! `feature,kind`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["case_id", "series_id", "x_km", "y_km", "t_days"];
const FEATURE_PREFIX: &str = "f_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Behavioural,
    Contextual,
    Both,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Behavioural => "behavioural",
            FeatureKind::Contextual => "contextual",
            FeatureKind::Both => "both",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "behavioural" => Ok(FeatureKind::Behavioural),
            "contextual" => Ok(FeatureKind::Contextual),
            "both" => Ok(FeatureKind::Both),
            other => Err(format!(
                "unknown feature kind `{other}` (expected behavioural|contextual|both)"
            )),
        }
    }
}

/// Ordered feature names with their behavioural/contextual tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, kinds: Vec<FeatureKind>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidInput("schema needs at least one feature".into()));
        }
        if names.len() != kinds.len() {
            return Err(Error::Shape(format!(
                "{} feature names but {} kinds",
                names.len(),
                kinds.len()
            )));
        }
        let mut seen = HashSet::with_capacity(names.len());
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidInput("empty feature name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(FeatureSchema { names, kinds })
    }

    /// Schema where every feature carries the same kind.
    pub fn uniform(names: Vec<String>, kind: FeatureKind) -> Result<Self> {
        let kinds = vec![kind; names.len()];
        Self::new(names, kinds)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    /// `None` marks an apparent one-off.
    pub series_id: Option<String>,
    pub features: Vec<u8>,
    pub x_km: f64,
    pub y_km: f64,
    pub t_days: f64,
}

impl CaseRecord {
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| f64::from(v)).collect()
    }

    /// True when both records carry the same known series id.
    pub fn linked_with(&self, other: &CaseRecord) -> bool {
        matches!((&self.series_id, &other.series_id), (Some(a), Some(b)) if a == b)
    }
}

/// Validated, immutable collection of case records.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseTable {
    schema: FeatureSchema,
    records: Vec<CaseRecord>,
}

impl CaseTable {
    pub fn new(schema: FeatureSchema, records: Vec<CaseRecord>) -> Result<Self> {
        let m = schema.len();
        let mut ids = HashSet::with_capacity(records.len());
        for (row, rec) in records.iter().enumerate() {
            if rec.features.len() != m {
                return Err(Error::Shape(format!(
                    "record {row} (`{}`) has {} features, schema has {m}",
                    rec.case_id,
                    rec.features.len()
                )));
            }
            if let Some(col) = rec.features.iter().position(|&v| v > 1) {
                return Err(Error::InvalidInput(format!(
                    "record {row} (`{}`) feature `{}` is not binary",
                    rec.case_id,
                    schema.names()[col]
                )));
            }
            if !ids.insert(rec.case_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate case_id `{}`", rec.case_id)));
            }
        }
        Ok(CaseTable { schema, records })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.schema.len()
    }

    pub fn position(&self, case_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.case_id == case_id)
    }

    /// Replace feature kinds with those of `schema`, which must list the same names in order.
    pub fn with_schema(self, schema: FeatureSchema) -> Result<Self> {
        if schema.names() != self.schema.names() {
            return Err(Error::Shape(
                "schema feature names do not match the dataset header".into(),
            ));
        }
        Ok(CaseTable {
            schema,
            records: self.records,
        })
    }

    /// Sizes of every series, keyed by series id, in first-appearance order.
    pub fn series_sizes(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for rec in &self.records {
            if let Some(s) = rec.series_id.as_deref() {
                let c = counts.entry(s).or_insert(0);
                if *c == 0 {
                    order.push(s.to_string());
                }
                *c += 1;
            }
        }
        order
            .into_iter()
            .map(|s| {
                let c = counts[s.as_str()];
                (s, c)
            })
            .collect()
    }
}

/// Log-transformed planar distance (km) and time interval (days) between two cases.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize)]
pub struct GeoTemporalPair {
    pub log_distance: f64,
    pub log_interval: f64,
}

impl GeoTemporalPair {
    pub fn as_array(&self) -> [f64; 2] {
        [self.log_distance, self.log_interval]
    }
}

pub fn geo_temporal(a: &CaseRecord, b: &CaseRecord) -> GeoTemporalPair {
    let distance = (a.x_km - b.x_km).hypot(a.y_km - b.y_km);
    let interval = (a.t_days - b.t_days).abs();
    GeoTemporalPair {
        log_distance: distance.ln_1p(),
        log_interval: interval.ln_1p(),
    }
}

/// Collapse several entries of one incident: a feature is present if any entry records it.
pub fn merge_duplicate_entries(rows: &[Vec<u8>]) -> Result<Vec<u8>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("no entries to merge".into()))?;
    let mut merged = vec![0u8; first.len()];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != merged.len() {
            return Err(Error::Shape(format!(
                "entry {i} has {} values, expected {}",
                row.len(),
                merged.len()
            )));
        }
        for (m, &v) in merged.iter_mut().zip(row) {
            if v > 1 {
                return Err(Error::InvalidInput(format!("entry {i} holds non-binary value {v}")));
            }
            *m |= v;
        }
    }
    Ok(merged)
}

pub fn load_cases(path: impl AsRef<Path>, expected_dims: Option<usize>) -> Result<CaseTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cases(file, expected_dims)
}

/// Parse a dataset CSV. Feature kinds default to `both` until a schema is attached.
pub fn read_cases<R: Read>(reader: R, expected_dims: Option<usize>) -> Result<CaseTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    if header.len() <= FIXED_COLUMNS.len() {
        return Err(Error::parse(1, "header has no feature columns"));
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if &header[i] != *expected {
            return Err(Error::parse(
                1,
                format!("column {} must be `{expected}`, found `{}`", i + 1, &header[i]),
            ));
        }
    }
    let mut names = Vec::with_capacity(header.len() - FIXED_COLUMNS.len());
    for col in header.iter().skip(FIXED_COLUMNS.len()) {
        let name = col
            .strip_prefix(FEATURE_PREFIX)
            .ok_or_else(|| Error::parse(1, format!("feature column `{col}` lacks `f_` prefix")))?;
        names.push(name.to_string());
    }
    if let Some(dims) = expected_dims {
        if dims != names.len() {
            return Err(Error::parse(
                1,
                format!("expected {dims} feature columns, found {}", names.len()),
            ));
        }
    }
    let schema = FeatureSchema::uniform(names, FeatureKind::Both).map_err(|e| Error::parse(1, e.to_string()))?;
    let width = header.len();

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(line, e.to_string()))?;
        if row.len() != width {
            return Err(Error::parse(
                line,
                format!("expected {width} columns, found {}", row.len()),
            ));
        }
        let case_id = row[0].to_string();
        if case_id.is_empty() {
            return Err(Error::parse(line, "empty case_id"));
        }
        if !seen.insert(case_id.clone()) {
            return Err(Error::parse(line, format!("duplicate case_id `{case_id}`")));
        }
        let series_id = (!row[1].is_empty()).then(|| row[1].to_string());
        let coord = |idx: usize| -> Result<f64> {
            let v: f64 = row[idx].parse().map_err(|_| {
                Error::parse(line, format!("column `{}` is not a number: `{}`", FIXED_COLUMNS[idx], &row[idx]))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("column `{}` is not finite", FIXED_COLUMNS[idx])));
            }
            Ok(v)
        };
        let (x_km, y_km, t_days) = (coord(2)?, coord(3)?, coord(4)?);
        let mut features = Vec::with_capacity(width - FIXED_COLUMNS.len());
        for (j, cell) in row.iter().enumerate().skip(FIXED_COLUMNS.len()) {
            let v = match cell {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::parse(
                        line,
                        format!("column {} (`{}`) holds non-binary value `{other}`", j + 1, &header[j]),
                    ))
                }
            };
            features.push(v);
        }
        records.push(CaseRecord {
            case_id,
            series_id,
            features,
            x_km,
            y_km,
            t_days,
        });
    }
    CaseTable::new(schema, records)
}

pub fn save_cases(table: &CaseTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cases(table, &mut file).map_err(|e| Error::io(path, e))
}

/// Floats are written in shortest round-trip form so that a reload is exact.
pub fn write_cases<W: Write>(table: &CaseTable, out: &mut W) -> std::io::Result<()> {
    let mut line = String::with_capacity(16 + 2 * table.dims());
    line.push_str(&FIXED_COLUMNS.join(","));
    for name in table.schema().names() {
        line.push(',');
        line.push_str(FEATURE_PREFIX);
        line.push_str(name);
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    for rec in table.records() {
        line.clear();
        line.push_str(&rec.case_id);
        line.push(',');
        line.push_str(rec.series_id.as_deref().unwrap_or(""));
        line.push_str(&format!(",{},{},{}", rec.x_km, rec.y_km, rec.t_days));
        for &v in &rec.features {
            line.push(',');
            line.push(if v == 1 { '1' } else { '0' });
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_schema(file)
}

pub fn read_schema<R: Read>(reader: R) -> Result<FeatureSchema> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    if header.len() != 2 || &header[0] != "feature" || &header[1] != "kind" {
        return Err(Error::parse(1, "schema header must be `feature,kind`"));
    }
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(line, e.to_string()))?;
        if row.len() != 2 {
            return Err(Error::parse(line, format!("expected 2 columns, found {}", row.len())));
        }
        names.push(row[0].to_string());
        kinds.push(row[1].parse::<FeatureKind>().map_err(|m| Error::parse(line, m))?);
    }
    FeatureSchema::new(names, kinds)
}

pub fn save_schema(schema: &FeatureSchema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("feature,kind\n");
    for (name, kind) in schema.names().iter().zip(schema.kinds()) {
        text.push_str(&format!("{name},{kind}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_cases: usize,
    pub n_series: usize,
    pub n_one_offs: usize,
    /// Series with a single recorded member; they contribute no linked pairs.
    pub singleton_series: Vec<String>,
    pub activation_rates: Vec<f64>,
    pub dead_features: Vec<String>,
    pub all_zero_cases: Vec<String>,
    pub sparsity: f64,
}

/// Non-fatal consistency report over a loaded table.
pub fn validate(table: &CaseTable) -> ValidationReport {
    let n = table.len();
    let m = table.dims();
    let mut counts = vec![0usize; m];
    let mut all_zero_cases = Vec::new();
    for rec in table.records() {
        let mut any = false;
        for (c, &v) in counts.iter_mut().zip(&rec.features) {
            *c += usize::from(v);
            any |= v == 1;
        }
        if !any {
            all_zero_cases.push(rec.case_id.clone());
        }
    }
    let ones: usize = counts.iter().sum();
    let activation_rates = counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let dead_features = counts
        .iter()
        .zip(table.schema().names())
        .filter(|(&c, _)| c == 0)
        .map(|(_, name)| name.clone())
        .collect();
    let series = table.series_sizes();
    let singleton_series = series
        .iter()
        .filter(|(_, s)| *s == 1)
        .map(|(id, _)| id.clone())
        .collect();
    let n_one_offs = table.records().iter().filter(|r| r.series_id.is_none()).count();
    let cells = n * m;
    ValidationReport {
        n_cases: n,
        n_series: series.len(),
        n_one_offs,
        singleton_series,
        activation_rates,
        dead_features,
        all_zero_cases,
        sparsity: if cells == 0 { 0.0 } else { (cells - ones) as f64 / cells as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, series: Option<&str>, features: &[u8], x: f64, y: f64, t: f64) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            series_id: series.map(Into::into),
            features: features.to_vec(),
            x_km: x,
            y_km: y,
            t_days: t,
        }
    }

    #[test]
    fn loads_small_fixture() {
        let text = "case_id,series_id,x_km,y_km,t_days,f_a,f_b,f_c,f_d\n\
                    c1,s1,0,0,0,1,0,0,1\n\
                    c2,s1,1.5,2,10,0,0,1,1\n\
                    c3,,3,4,20.25,0,0,0,0\n";
        let table = read_cases(text.as_bytes(), Some(4)).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.dims(), 4);
        assert_eq!(table.records()[2].series_id, None);
        assert_eq!(table.records()[1].features, vec![0, 0, 1, 1]);
        assert_eq!(table.records()[2].t_days, 20.25);
    }

    #[test]
    fn non_binary_value_names_row_and_column() {
        let text = "case_id,series_id,x_km,y_km,t_days,f_a,f_b\nc1,,0,0,0,1,0\nc2,,0,0,0,0,2\n";
        let err = read_cases(text.as_bytes(), None).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("f_b"), "{err}");
    }

    #[test]
    fn structural_errors_are_reported() {
        let dup = "case_id,series_id,x_km,y_km,t_days,f_a\nc1,,0,0,0,1\nc1,,0,0,0,0\n";
        assert!(read_cases(dup.as_bytes(), None).unwrap_err().to_string().contains("line 3"));
        let short = "case_id,series_id,x_km,y_km,t_days,f_a,f_b\nc1,,0,0,0,1\n";
        assert!(read_cases(short.as_bytes(), None).unwrap_err().to_string().contains("line 2"));
        let ok = "case_id,series_id,x_km,y_km,t_days,f_a,f_b\nc1,,0,0,0,1,0\n";
        assert!(read_cases(ok.as_bytes(), Some(3)).is_err());
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_duplicate_entries(&[vec![1, 0, 0], vec![0, 0, 1]]).unwrap(), vec![1, 0, 1]);
        assert_eq!(merge_duplicate_entries(&[vec![0, 0, 0]]).unwrap(), vec![0, 0, 0]);
        assert!(merge_duplicate_entries(&[]).is_err());
        assert!(merge_duplicate_entries(&[vec![1], vec![1, 0]]).is_err());
    }

    #[test]
    fn geo_temporal_examples() {
        let a = rec("a", None, &[0], 0.0, 0.0, 5.0);
        let b = rec("b", None, &[0], 3.0, 4.0, 15.0);
        let g = geo_temporal(&a, &b);
        assert!((g.log_distance - 6f64.ln()).abs() < 1e-12);
        assert!((g.log_interval - 11f64.ln()).abs() < 1e-12);
        assert!((g.log_distance - 1.79176).abs() < 1e-5);
        assert!((g.log_interval - 2.39790).abs() < 1e-5);
        assert_eq!(geo_temporal(&a, &a), GeoTemporalPair::default());
    }

    #[test]
    fn validation_counts() {
        let schema = FeatureSchema::uniform(vec!["a".into(), "b".into()], FeatureKind::Behavioural).unwrap();
        let table = CaseTable::new(
            schema,
            vec![
                rec("1", Some("s"), &[1, 0], 0.0, 0.0, 0.0),
                rec("2", Some("s"), &[1, 0], 0.0, 0.0, 0.0),
                rec("3", None, &[0, 0], 0.0, 0.0, 0.0),
                rec("4", None, &[1, 0], 0.0, 0.0, 0.0),
            ],
        )
        .unwrap();
        let report = validate(&table);
        assert_eq!(report.n_cases, 4);
        assert_eq!(report.n_series, 1);
        assert_eq!(report.n_one_offs, 2);
        assert_eq!(report.dead_features, vec!["b".to_string()]);
        assert_eq!(report.all_zero_cases, vec!["3".to_string()]);
        assert_eq!(report.sparsity, 5.0 / 8.0);
    }

    #[test]
    fn schema_rejects_duplicates_and_bad_kinds() {
        assert!(FeatureSchema::uniform(vec!["a".into(), "a".into()], FeatureKind::Both).is_err());
        assert!(FeatureSchema::uniform(vec![], FeatureKind::Both).is_err());
        assert!(read_schema("feature,kind\na,behavioral\n".as_bytes()).is_err());
        let s = read_schema("feature,kind\na,behavioural\nb,contextual\nc,both\n".as_bytes()).unwrap();
        assert_eq!(s.kinds(), &[FeatureKind::Behavioural, FeatureKind::Contextual, FeatureKind::Both]);
    }
}
