//! Recency, Frequency, Monetary and Engagement scores per user over a
//! trailing window of whole UTC days.
//!
//! * recency: days between the reference date and the user's latest session.
//! * frequency: number of sessions in the window.
//! * monetary: `pdp_weight * PDP views + lead_weight * leads`, summed over every
//!   event of every in-window session.
//! * engagement: number of (session, activity) pairs, i.e. for each of the five
//!   activities, how many sessions contained it. A session contributes at most 5.

use std::io::Write;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Activity, EventLog};
use crate::session::{group_by_user, sessionize, Session, SessionError};

pub const DEFAULT_WINDOW_DAYS: u32 = 45;

/// Feature order used everywhere a vector is flattened.
pub const FEATURE_NAMES: [&str; 4] = ["recency", "frequency", "monetary", "engagement"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Last day of the window (inclusive).
    pub reference_date: NaiveDate,
    pub window_days: u32,
}

impl WindowSpec {
    pub fn new(reference_date: NaiveDate, window_days: u32) -> Result<Self, FeatureError> {
        if window_days == 0 {
            return Err(FeatureError::EmptyWindowLength);
        }
        Ok(Self {
            reference_date,
            window_days,
        })
    }

    pub fn first_day(&self) -> NaiveDate {
        self.reference_date - Duration::days(i64::from(self.window_days) - 1)
    }

    pub fn contains_date(&self, date: NaiveDate) -> bool {
        self.first_day() <= date && date <= self.reference_date
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        self.contains_date(ts.date_naive())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonetaryWeights {
    pub pdp_weight: u32,
    pub lead_weight: u32,
}

impl Default for MonetaryWeights {
    /// One lead is worth seven PDP views.
    fn default() -> Self {
        Self {
            pdp_weight: 1,
            lead_weight: 7,
        }
    }
}

impl MonetaryWeights {
    pub fn new(pdp_weight: u32, lead_weight: u32) -> Result<Self, FeatureError> {
        if pdp_weight == 0 || lead_weight == 0 {
            return Err(FeatureError::NonPositiveWeight);
        }
        Ok(Self {
            pdp_weight,
            lead_weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfmeVector {
    pub user_id: String,
    pub recency: u32,
    pub frequency: u32,
    pub monetary: u64,
    pub engagement: u32,
}

impl RfmeVector {
    pub fn as_point(&self) -> [f64; 4] {
        [
            f64::from(self.recency),
            f64::from(self.frequency),
            self.monetary as f64,
            f64::from(self.engagement),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("user has no activity in the window")]
    NoActivityInWindow,
    #[error("session on {0} falls after the reference date")]
    AfterReference(NaiveDate),
    #[error("no user has activity in the window")]
    EmptyWindow,
    #[error("window must span at least one day")]
    EmptyWindowLength,
    #[error("monetary weights must be positive")]
    NonPositiveWeight,
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Days from the latest session start to `reference_date`.
pub fn compute_recency(
    sessions: &[Session],
    reference_date: NaiveDate,
) -> Result<u32, FeatureError> {
    let last = sessions
        .iter()
        .map(|s| s.start.date_naive())
        .max()
        .ok_or(FeatureError::NoActivityInWindow)?;
    if last > reference_date {
        return Err(FeatureError::AfterReference(last));
    }
    Ok((reference_date - last).num_days() as u32)
}

pub fn compute_frequency(sessions: &[Session]) -> u32 {
    sessions.len() as u32
}

pub fn compute_monetary(pdp_total: u64, lead_total: u64, weights: MonetaryWeights) -> u64 {
    pdp_total * u64::from(weights.pdp_weight) + lead_total * u64::from(weights.lead_weight)
}

pub fn compute_engagement(sessions: &[Session]) -> u32 {
    Activity::ALL
        .iter()
        .map(|&a| sessions.iter().filter(|s| s.activity_flags.get(a)).count() as u32)
        .sum()
}

/// Feature vector for one user's in-window sessions.
pub fn user_vector(
    user_id: &str,
    sessions: &[Session],
    window: &WindowSpec,
    weights: MonetaryWeights,
) -> Result<RfmeVector, FeatureError> {
    let pdp: u64 = sessions.iter().map(|s| u64::from(s.pdp_view_count)).sum();
    let leads: u64 = sessions.iter().map(|s| u64::from(s.lead_drop_count)).sum();
    Ok(RfmeVector {
        user_id: user_id.to_string(),
        recency: compute_recency(sessions, window.reference_date)?,
        frequency: compute_frequency(sessions),
        monetary: compute_monetary(pdp, leads, weights),
        engagement: compute_engagement(sessions),
    })
}

/// One vector per user with at least one in-window session, sorted by user id.
///
/// Events outside the window are dropped before sessionization, so a session
/// never starts outside the window and out-of-window activity has no effect
/// on any feature.
pub fn build_feature_matrix(
    log: &EventLog,
    window: &WindowSpec,
    gap: Duration,
    weights: MonetaryWeights,
) -> Result<Vec<RfmeVector>, FeatureError> {
    let in_window = log.filter(|e| window.contains(e.timestamp));
    let sessions = sessionize(&in_window, gap)?;
    let groups: Vec<_> = group_by_user(&sessions).collect();
    let vectors = groups
        .into_par_iter()
        .map(|(user, group)| user_vector(user, group, window, weights))
        .collect::<Result<Vec<_>, _>>()?;
    if vectors.is_empty() {
        return Err(FeatureError::EmptyWindow);
    }
    Ok(vectors)
}

pub const FEATURE_CSV_HEADER: &str = "user_id,recency,frequency,monetary,engagement";

pub fn write_features_csv<W: Write>(out: W, vectors: &[RfmeVector]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FEATURE_CSV_HEADER.split(','))?;
    for v in vectors {
        w.write_record([
            v.user_id.clone(),
            v.recency.to_string(),
            v.frequency.to_string(),
            v.monetary.to_string(),
            v.engagement.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
