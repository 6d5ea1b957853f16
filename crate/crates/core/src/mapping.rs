//! Expert-style feature consolidation.
//!
//! A [`MappingSpec`] folds groups of source features into abstract target
//! features; a target is present whenever any of its sources is. Features not
//! named in the mapping pass through unchanged.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::dataset::{CaseRecord, CaseTable, FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingSpec {
    pub name: String,
    entries: Vec<(String, String)>,
}

impl MappingSpec {
    pub fn new(name: impl Into<String>, entries: Vec<(String, String)>) -> Result<Self> {
        let mut sources = HashSet::new();
        for (i, (source, target)) in entries.iter().enumerate() {
            if source.is_empty() {
                return Err(Error::InvalidInput(format!("entry {i}: empty source feature")));
            }
            if target.is_empty() {
                return Err(Error::InvalidInput(format!("entry {i}: empty target for `{source}`")));
            }
            if !sources.insert(source.as_str()) {
                return Err(Error::InvalidInput(format!("entry {i}: duplicate source `{source}`")));
            }
        }
        Ok(MappingSpec {
            name: name.into(),
            entries,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        MappingSpec {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Target names in order of first occurrence.
    pub fn targets(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|(_, t)| seen.insert(t.as_str()))
            .map(|(_, t)| t.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_feature,target_feature\n");
        for (s, t) in &self.entries {
            out.push_str(s);
            out.push(',');
            out.push_str(t);
            out.push('\n');
        }
        out
    }
}

pub fn parse_mapping(path: impl AsRef<Path>) -> Result<MappingSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_mapping_str(name, &text)
}

pub fn parse_mapping_str(name: impl Into<String>, text: &str) -> Result<MappingSpec> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "source_feature,target_feature" => {}
        Some((_, header)) => {
            return Err(Error::parse(
                1,
                format!("header must be `source_feature,target_feature`, found `{}`", header.trim()),
            ))
        }
        None => return Err(Error::parse(1, "empty mapping file")),
    }
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cols.len() != 2 {
            return Err(Error::parse(line, format!("expected 2 columns, found {}", cols.len())));
        }
        let (source, target) = (cols[0], cols[1]);
        if source.is_empty() {
            return Err(Error::parse(line, "empty source feature"));
        }
        if target.is_empty() {
            return Err(Error::parse(line, format!("empty target for `{source}`")));
        }
        if let Some(first) = seen.insert(source.to_string(), line) {
            return Err(Error::parse(
                line,
                format!("duplicate source `{source}` (first on line {first})"),
            ));
        }
        entries.push((source.to_string(), target.to_string()));
    }
    MappingSpec::new(name, entries)
}

/// Consolidate features. Output schema lists mapped targets in first-occurrence
/// order, then pass-through features in their original order.
pub fn apply_mapping(table: &CaseTable, spec: &MappingSpec) -> Result<CaseTable> {
    let schema = table.schema();
    let targets = spec.targets();
    let target_index: HashMap<&str, usize> =
        targets.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); targets.len()];
    let mut mapped = vec![false; schema.len()];
    for (source, target) in spec.entries() {
        let idx = schema
            .index_of(source)
            .ok_or_else(|| Error::UnknownFeature(source.clone()))?;
        mapped[idx] = true;
        groups[target_index[target.as_str()]].push(idx);
    }
    let passthrough: Vec<usize> = (0..schema.len()).filter(|&i| !mapped[i]).collect();

    let mut names: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
    let mut kinds: Vec<FeatureKind> = groups
        .iter()
        .map(|g| {
            let first = schema.kinds()[g[0]];
            if g.iter().all(|&i| schema.kinds()[i] == first) {
                first
            } else {
                FeatureKind::Both
            }
        })
        .collect();
    for &i in &passthrough {
        names.push(schema.names()[i].clone());
        kinds.push(schema.kinds()[i]);
    }
    let out_schema = FeatureSchema::new(names, kinds)?;

    let records = table
        .records()
        .iter()
        .map(|rec| {
            let mut features = Vec::with_capacity(out_schema.len());
            features.extend(
                groups
                    .iter()
                    .map(|g| g.iter().map(|&i| rec.features[i]).max().unwrap_or(0)),
            );
            features.extend(passthrough.iter().map(|&i| rec.features[i]));
            CaseRecord {
                features,
                ..rec.clone()
            }
        })
        .collect();
    CaseTable::new(out_schema, records)
}

/// Remaining dimensionality and the fraction of features removed.
pub fn reduction_rate(spec: &MappingSpec, original_dims: usize) -> (usize, f64) {
    let sources = spec.entries().len();
    let targets = spec.targets().len();
    let remaining = original_dims + targets - sources;
    let rate = 1.0 - remaining as f64 / original_dims as f64;
    (remaining, rate)
}

/// Remaining feature counts of the five bundled fixture maps over 446 features.
pub const FIXTURE_REMAINING: [usize; 5] = [282, 384, 266, 217, 286];

/// Build a map over `names` that leaves exactly `remaining` features by folding
/// runs of `group_size` consecutive features into one target each. The final
/// group may be smaller. Group contents carry no meaning.
pub fn consolidating_map(
    name: impl Into<String>,
    names: &[String],
    remaining: usize,
    group_size: usize,
) -> Result<MappingSpec> {
    if remaining == 0 || remaining > names.len() {
        return Err(Error::InvalidInput(format!(
            "cannot reduce {} features to {remaining}",
            names.len()
        )));
    }
    if group_size < 2 {
        return Err(Error::InvalidInput("group_size must be >= 2".into()));
    }
    let mut to_remove = names.len() - remaining;
    let mut entries = Vec::new();
    let mut start = 0;
    let mut group = 0;
    while to_remove > 0 {
        let size = group_size.min(to_remove + 1);
        if start + size > names.len() {
            return Err(Error::InvalidInput("not enough features to consolidate".into()));
        }
        let target = format!("g{group:03}");
        for source in &names[start..start + size] {
            entries.push((source.clone(), target.clone()));
        }
        to_remove -= size - 1;
        start += size;
        group += 1;
    }
    MappingSpec::new(name, entries)
}

/// The five synthetic fixture maps over the given 446 feature names.
pub fn fixture_maps(names: &[String]) -> Result<Vec<MappingSpec>> {
    FIXTURE_REMAINING
        .iter()
        .enumerate()
        .map(|(i, &remaining)| consolidating_map(format!("map{}", i + 1), names, remaining, 4))
        .collect()
}
