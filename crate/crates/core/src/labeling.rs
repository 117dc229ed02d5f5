//! Naming fitted clusters after the four marketing segments.
//!
//! Clusters are ranked by an FME composite: frequency, monetary and
//! engagement means are min-max normalized across the four clusters and
//! averaged. The top two become HighValue and Promising. Of the two low-FME
//! clusters the more recent one (smaller recency mean) needs attention, the
//! other needs activation.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::RfmeVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    HighValue,
    Promising,
    NeedsAttention,
    NeedsActivation,
}

impl Segment {
    pub const ALL: [Segment; 4] = [
        Segment::HighValue,
        Segment::Promising,
        Segment::NeedsAttention,
        Segment::NeedsActivation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Segment::HighValue => "high_value",
            Segment::Promising => "promising",
            Segment::NeedsAttention => "needs_attention",
            Segment::NeedsActivation => "needs_activation",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Segment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Segment::ALL
            .into_iter()
            .find(|seg| seg.name() == s)
            .ok_or_else(|| format!("unknown segment `{s}`"))
    }
}

/// Raw-unit feature means of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeans {
    pub recency: f64,
    pub frequency: f64,
    pub monetary: f64,
    pub engagement: f64,
}

impl FeatureMeans {
    pub fn new(recency: f64, frequency: f64, monetary: f64, engagement: f64) -> Self {
        Self {
            recency,
            frequency,
            monetary,
            engagement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster_id: usize,
    /// NaN for a cluster without members (possible only when scoring).
    pub means: FeatureMeans,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("segment names need exactly 4 clusters, got {0}")]
    WrongClusterCount(usize),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("{vectors} vectors but {assignments} assignments")]
    LengthMismatch { vectors: usize, assignments: usize },
    #[error("assignment {0} is out of range")]
    IndexOutOfRange(usize),
}

fn min_max(values: [f64; 4]) -> [f64; 4] {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.map(|v| (v - lo) / (hi - lo))
    } else {
        [0.0; 4]
    }
}

/// Bijection from the four clusters to segments, indexed like `profiles`.
pub fn label_clusters(profiles: &[ClusterProfile]) -> Result<Vec<Segment>, LabelError> {
    let profiles: &[ClusterProfile; 4] = profiles
        .try_into()
        .map_err(|_| LabelError::WrongClusterCount(profiles.len()))?;
    let freq = min_max(profiles.each_ref().map(|p| p.means.frequency));
    let mon = min_max(profiles.each_ref().map(|p| p.means.monetary));
    let eng = min_max(profiles.each_ref().map(|p| p.means.engagement));
    // Quantized so rounding noise from normalization cannot reorder exact ties.
    let composite: [i64; 4] =
        std::array::from_fn(|i| ((freq[i] + mon[i] + eng[i]) / 3.0 * 1e9).round() as i64);

    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&profiles[a].means, &profiles[b].means);
        composite[b]
            .cmp(&composite[a])
            .then(pb.monetary.total_cmp(&pa.monetary))
            .then(pb.frequency.total_cmp(&pa.frequency))
            .then(a.cmp(&b))
    });

    let mut labels = [Segment::NeedsActivation; 4];
    labels[order[0]] = Segment::HighValue;
    labels[order[1]] = Segment::Promising;
    let (x, y) = (order[2], order[3]);
    let (mx, my) = (&profiles[x].means, &profiles[y].means);
    let x_more_recent = match mx.recency.total_cmp(&my.recency) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match my.frequency.total_cmp(&mx.frequency) {
            Ordering::Greater => false,
            Ordering::Less => true,
            Ordering::Equal => x < y,
        },
    };
    let (attention, activation) = if x_more_recent { (x, y) } else { (y, x) };
    labels[attention] = Segment::NeedsAttention;
    labels[activation] = Segment::NeedsActivation;
    Ok(labels.to_vec())
}

/// Display names for any k: segment names when k = 4, `cluster-i` otherwise.
pub fn cluster_names(profiles: &[ClusterProfile]) -> Vec<String> {
    match label_clusters(profiles) {
        Ok(labels) => labels.iter().map(|s| s.name().to_string()).collect(),
        Err(_) => (0..profiles.len())
            .map(|i| format!("cluster-{i}"))
            .collect(),
    }
}

/// Per-cluster raw means and member counts. Empty clusters get NaN means.
pub fn profile_assignments(
    k: usize,
    vectors: &[RfmeVector],
    assignments: &[usize],
) -> Result<Vec<ClusterProfile>, LabelError> {
    if vectors.len() != assignments.len() {
        return Err(LabelError::LengthMismatch {
            vectors: vectors.len(),
            assignments: assignments.len(),
        });
    }
    let mut sums = vec![[0.0f64; 4]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments) {
        if a >= k {
            return Err(LabelError::IndexOutOfRange(a));
        }
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v.as_point()) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok((0..k)
        .map(|j| {
            let c = counts[j] as f64;
            let m = sums[j].map(|s| s / c);
            ClusterProfile {
                cluster_id: j,
                means: FeatureMeans::new(m[0], m[1], m[2], m[3]),
                count: counts[j],
                share: if n > 0.0 { c / n } else { 0.0 },
            }
        })
        .collect())
}

/// Like [`profile_assignments`] but every cluster must have a member.
pub fn profile_clusters(
    k: usize,
    vectors: &[RfmeVector],
    assignments: &[usize],
) -> Result<Vec<ClusterProfile>, LabelError> {
    let profiles = profile_assignments(k, vectors, assignments)?;
    if let Some(p) = profiles.iter().find(|p| p.count == 0) {
        return Err(LabelError::EmptyCluster(p.cluster_id));
    }
    Ok(profiles)
}

pub const SEGMENT_CSV_HEADER: &str =
    "cluster_id,segment,recency_mean,frequency_mean,monetary_mean,engagement_mean,count,share";

fn fmt_mean(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn write_segment_report<W: Write>(
    out: W,
    profiles: &[ClusterProfile],
    names: &[String],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SEGMENT_CSV_HEADER.split(','))?;
    for (p, name) in profiles.iter().zip(names) {
        w.write_record([
            p.cluster_id.to_string(),
            name.clone(),
            fmt_mean(p.means.recency),
            fmt_mean(p.means.frequency),
            fmt_mean(p.means.monetary),
            fmt_mean(p.means.engagement),
            p.count.to_string(),
            format!("{:.6}", p.share),
        ])?;
    }
    w.flush()?;
    Ok(())
}
