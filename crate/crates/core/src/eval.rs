//! Agreement between a predicted partition and ground truth.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(
        "labelings cover different keys ({left} vs {right} entries, first difference `{example}`)"
    )]
    KeyMismatch {
        left: usize,
        right: usize,
        example: String,
    },
    #[error("cannot score empty labelings")]
    Empty,
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
}

fn paired<'a, K, A, B>(
    a: &'a BTreeMap<K, A>,
    b: &'a BTreeMap<K, B>,
) -> Result<Vec<(&'a A, &'a B)>, EvalError>
where
    K: Ord + std::fmt::Debug,
{
    if a.is_empty() && b.is_empty() {
        return Err(EvalError::Empty);
    }
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let example = a
            .keys()
            .find(|k| !b.contains_key(k))
            .or_else(|| b.keys().find(|k| !a.contains_key(k)))
            .map(|k| format!("{k:?}"))
            .unwrap_or_default();
        return Err(EvalError::KeyMismatch {
            left: a.len(),
            right: b.len(),
            example,
        });
    }
    Ok(a.values().zip(b.values()).collect())
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table. Two trivial
/// partitions (both a single cluster, or both all singletons) score 1.
pub fn adjusted_rand_index<K, A, B>(
    a: &BTreeMap<K, A>,
    b: &BTreeMap<K, B>,
) -> Result<f64, EvalError>
where
    K: Ord + std::fmt::Debug,
    A: Eq + Hash,
    B: Eq + Hash,
{
    let rows = paired(a, b)?;
    let n = rows.len() as u64;
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut left: HashMap<&A, u64> = HashMap::new();
    let mut right: HashMap<&B, u64> = HashMap::new();
    for (x, y) in rows {
        *table.entry((x, y)).or_default() += 1;
        *left.entry(x).or_default() += 1;
        *right.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = left.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = right.values().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(n).max(1.0);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of points whose cluster's majority truth class is their own.
pub fn cluster_purity<K, A, B>(
    assignments: &BTreeMap<K, A>,
    truth: &BTreeMap<K, B>,
) -> Result<f64, EvalError>
where
    K: Ord + std::fmt::Debug,
    A: Eq + Hash,
    B: Eq + Hash,
{
    let rows = paired(assignments, truth)?;
    let n = rows.len();
    let mut table: HashMap<&A, HashMap<&B, usize>> = HashMap::new();
    for (x, y) in rows {
        *table.entry(x).or_default().entry(y).or_default() += 1;
    }
    let majority: usize = table
        .values()
        .map(|row| row.values().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / n as f64)
}

/// Reads `user_id` plus one label column from a CSV file. The label column is
/// the first of `label_columns` present in the header.
pub fn read_labeling(
    path: impl AsRef<Path>,
    label_columns: &[&str],
) -> Result<BTreeMap<String, String>, EvalError> {
    let path = path.as_ref();
    let shown = || path.display().to_string();
    let wrap = |source| EvalError::Csv {
        path: shown(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(wrap)?;
    let headers = reader.headers().map_err(wrap)?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let user_col = find("user_id").ok_or_else(|| EvalError::MissingColumn {
        path: shown(),
        column: "user_id".into(),
    })?;
    let label_col =
        label_columns
            .iter()
            .find_map(|c| find(c))
            .ok_or_else(|| EvalError::MissingColumn {
                path: shown(),
                column: label_columns.join("|"),
            })?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(wrap)?;
        out.insert(record[user_col].to_string(), record[label_col].to_string());
    }
    Ok(out)
}
