//! Synthetic clickstream from labeled behavioral archetypes.
//!
//! Each user belongs to one archetype. The generator draws, per user:
//!
//! * a last-visit day offset `r`, uniform over the archetype's recency range;
//! * a session count `1 + Poisson(visit_rate - 1)`, so the mean is `visit_rate`;
//! * one session on day `r`, the rest on distinct hourly slots between day `r`
//!   and the start of the window;
//! * per session, one landing `other_visit` event and, independently for each
//!   activity, its events with the archetype's probability. PDP-active
//!   sessions hold `1 + Poisson(mean_pdp_views - 1)` views, lead-active ones
//!   `1 + Poisson(mean_leads - 1)` leads.
//!
//! Sessions start in the first 10 minutes of their hour and last at most 15,
//! so with the default 30-minute gap every generated session is recovered
//! intact. Expected features per user are therefore
//! `F = visit_rate`, `M = F (p_pdp mean_pdp_views w_pdp + p_lead mean_leads w_lead)`,
//! `E = F (sum of activity probabilities)`.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventLog, EventType, Platform, UserEvent};
use crate::features::{MonetaryWeights, WindowSpec};
use crate::labeling::Segment;

const SLOTS_PER_DAY: u32 = 24;
const START_JITTER_SECS: i64 = 600;
const SESSION_SPAN_SECS: i64 = 900;

/// Per-session probability of each tracked activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityProbs {
    pub filter: f64,
    pub pdp: f64,
    pub lead: f64,
    pub crf: f64,
    pub shortlist: f64,
}

impl ActivityProbs {
    fn as_array(&self) -> [f64; 5] {
        [self.filter, self.pdp, self.lead, self.crf, self.shortlist]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub segment: Segment,
    pub user_share: f64,
    /// Mean sessions per window; at least 1.
    pub visit_rate: f64,
    /// Last-visit day offset is uniform over `recency_min..=recency_max`.
    pub recency_min: u32,
    pub recency_max: u32,
    pub activity: ActivityProbs,
    pub mean_pdp_views: f64,
    pub mean_leads: f64,
}

/// Analytic feature means of one archetype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedFeatures {
    pub recency: f64,
    pub frequency: f64,
    pub monetary: f64,
    pub engagement: f64,
}

impl ArchetypeSpec {
    /// Expected features, ignoring the (rarely binding) slot-capacity cap on
    /// session count.
    pub fn expected_features(&self, weights: MonetaryWeights) -> ExpectedFeatures {
        let f = self.visit_rate;
        let per_session = self.activity.pdp * self.mean_pdp_views * f64::from(weights.pdp_weight)
            + self.activity.lead * self.mean_leads * f64::from(weights.lead_weight);
        ExpectedFeatures {
            recency: (f64::from(self.recency_min) + f64::from(self.recency_max)) / 2.0,
            frequency: f,
            monetary: f * per_session,
            engagement: f * self.activity.sum(),
        }
    }

    /// Four archetypes whose expected features track the app-user cluster
    /// means (R/F/M/E): activation 29/3/7/3, attention 19/4/7/3,
    /// promising 23/20/73/25, high value 24/57/242/77.
    pub fn four_segment() -> Vec<ArchetypeSpec> {
        let probs = |filter, pdp, lead, crf, shortlist| ActivityProbs {
            filter,
            pdp,
            lead,
            crf,
            shortlist,
        };
        vec![
            ArchetypeSpec {
                segment: Segment::NeedsActivation,
                user_share: 0.40,
                visit_rate: 3.0,
                recency_min: 26,
                recency_max: 32,
                activity: probs(0.30, 0.50, 0.12, 0.05, 0.03),
                mean_pdp_views: 3.0,
                mean_leads: 1.0,
            },
            ArchetypeSpec {
                segment: Segment::NeedsAttention,
                user_share: 0.30,
                visit_rate: 4.0,
                recency_min: 16,
                recency_max: 22,
                activity: probs(0.20, 0.40, 0.107, 0.03, 0.013),
                mean_pdp_views: 2.5,
                mean_leads: 1.0,
            },
            ArchetypeSpec {
                segment: Segment::Promising,
                user_share: 0.20,
                visit_rate: 20.0,
                recency_min: 20,
                recency_max: 26,
                activity: probs(0.30, 0.60, 0.20, 0.10, 0.05),
                mean_pdp_views: 3.5,
                mean_leads: 1.107,
            },
            ArchetypeSpec {
                segment: Segment::HighValue,
                user_share: 0.10,
                visit_rate: 57.0,
                recency_min: 21,
                recency_max: 27,
                activity: probs(0.30, 0.65, 0.20, 0.12, 0.08),
                mean_pdp_views: 4.0,
                mean_leads: 1.1757,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

pub fn validate_specs(specs: &[ArchetypeSpec], window: &WindowSpec) -> Result<(), SynthError> {
    if specs.is_empty() {
        return Err(invalid("no archetypes"));
    }
    let total: f64 = specs.iter().map(|s| s.user_share).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("user shares sum to {total}, expected 1")));
    }
    for s in specs {
        let name = s.segment.name();
        let finite = [s.user_share, s.visit_rate, s.mean_pdp_views, s.mean_leads]
            .into_iter()
            .chain(s.activity.as_array())
            .all(f64::is_finite);
        if !finite {
            return Err(invalid(format!("{name}: non-finite parameter")));
        }
        if !(0.0..=1.0).contains(&s.user_share) {
            return Err(invalid(format!(
                "{name}: share {} outside [0, 1]",
                s.user_share
            )));
        }
        if s.activity
            .as_array()
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(invalid(format!(
                "{name}: activity probability outside [0, 1]"
            )));
        }
        if s.visit_rate < 1.0 || s.mean_pdp_views < 1.0 || s.mean_leads < 1.0 {
            return Err(invalid(format!(
                "{name}: visit_rate, mean_pdp_views and mean_leads must be at least 1"
            )));
        }
        if s.recency_min > s.recency_max || s.recency_max >= window.window_days {
            return Err(invalid(format!(
                "{name}: recency range {}..={} must lie within the {}-day window",
                s.recency_min, s.recency_max, window.window_days
            )));
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` users over `shares`; leftover
/// seats go to the largest fractional parts, ties to the earlier archetype.
pub fn apportion(shares: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Hidden segment of every generated user.
pub type GroundTruth = BTreeMap<String, Segment>;

pub fn user_id(index: usize) -> String {
    format!("u{index:07}")
}

fn one_plus_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    let extra = mean - 1.0;
    if extra <= 0.0 {
        return 1;
    }
    let draw: f64 = Poisson::new(extra).expect("positive rate").sample(rng);
    1 + draw as u32
}

fn user_events(
    id: &str,
    spec: &ArchetypeSpec,
    window: &WindowSpec,
    platform: Platform,
    rng: &mut ChaCha8Rng,
) -> Vec<UserEvent> {
    let last = rng.random_range(spec.recency_min..=spec.recency_max);
    let days = window.window_days - last;
    let capacity = (days * SLOTS_PER_DAY) as usize;
    let sessions = (one_plus_poisson(rng, spec.visit_rate) as usize).min(capacity);

    // Slot 0..SLOTS_PER_DAY lies on the last-visit day; one session is pinned there.
    let pinned = rng.random_range(0..SLOTS_PER_DAY) as usize;
    let mut slots = vec![pinned];
    slots.extend(
        index::sample(rng, capacity - 1, sessions - 1)
            .into_iter()
            .map(|i| if i >= pinned { i + 1 } else { i }),
    );
    slots.sort_unstable();

    let reference = window
        .reference_date
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc();
    let probs = spec.activity.as_array();
    let mut events = Vec::new();
    for slot in slots {
        let day_offset = last + (slot as u32) / SLOTS_PER_DAY;
        let hour = (slot as u32) % SLOTS_PER_DAY;
        let start = reference - Duration::days(i64::from(day_offset))
            + Duration::hours(i64::from(hour))
            + Duration::seconds(rng.random_range(0..START_JITTER_SECS));
        let mut push = |ty: EventType, rng: &mut ChaCha8Rng, at_start: bool| {
            let offset = if at_start {
                0
            } else {
                rng.random_range(0..=SESSION_SPAN_SECS)
            };
            events.push(UserEvent {
                user_id: id.to_string(),
                timestamp: start + Duration::seconds(offset),
                event_type: ty,
                platform,
            });
        };
        push(EventType::OtherVisit, rng, true);
        for (activity, &p) in EventType::ALL[..5].iter().zip(&probs) {
            if !rng.random_bool(p) {
                continue;
            }
            let count = match activity {
                EventType::PdpView => one_plus_poisson(rng, spec.mean_pdp_views),
                EventType::LeadDropped => one_plus_poisson(rng, spec.mean_leads),
                _ => 1,
            };
            for _ in 0..count {
                push(*activity, rng, false);
            }
        }
    }
    events
}

/// Deterministic synthetic log for `n_users` users inside `window`.
///
/// User `i` draws from its own ChaCha8 stream `(seed, i)`, so generation is
/// parallel and independent of the pool size.
pub fn generate(
    specs: &[ArchetypeSpec],
    n_users: usize,
    window: &WindowSpec,
    seed: u64,
    platform: Platform,
) -> Result<(EventLog, GroundTruth), SynthError> {
    validate_specs(specs, window)?;
    if n_users == 0 {
        return Err(invalid("n_users must be at least 1"));
    }
    let shares: Vec<f64> = specs.iter().map(|s| s.user_share).collect();
    let mut membership: Vec<usize> = apportion(&shares, n_users)
        .into_iter()
        .enumerate()
        .flat_map(|(a, c)| std::iter::repeat_n(a, c))
        .collect();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    membership.shuffle(&mut master);

    let per_user: Vec<Vec<UserEvent>> = membership
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            user_events(&user_id(i), &specs[a], window, platform, &mut rng)
        })
        .collect();
    let truth = membership
        .iter()
        .enumerate()
        .map(|(i, &a)| (user_id(i), specs[a].segment))
        .collect();
    Ok((
        EventLog::new(per_user.into_iter().flatten().collect()),
        truth,
    ))
}

/// Generator spec file: run parameters plus one `[[archetype]]` table each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_users: usize,
    #[serde(deserialize_with = "toml_date")]
    pub reference_date: NaiveDate,
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_platform")]
    pub platform: Platform,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<ArchetypeSpec>,
}

/// Accepts a bare TOML date as well as a quoted `YYYY-MM-DD` string.
fn toml_date<'de, D: serde::Deserializer<'de>>(de: D) -> Result<NaiveDate, D::Error> {
    let text = match toml::Value::deserialize(de)? {
        toml::Value::String(s) => s,
        toml::Value::Datetime(d) => d.to_string(),
        other => {
            return Err(serde::de::Error::custom(format!(
                "expected a date, got {other}"
            )))
        }
    };
    text.parse().map_err(serde::de::Error::custom)
}

fn default_window_days() -> u32 {
    crate::features::DEFAULT_WINDOW_DAYS
}

fn default_platform() -> Platform {
    Platform::App
}

impl GeneratorSpec {
    pub fn four_segment(n_users: usize, reference_date: NaiveDate, seed: u64) -> Self {
        Self {
            n_users,
            reference_date,
            window_days: default_window_days(),
            seed,
            platform: Platform::App,
            archetypes: ArchetypeSpec::four_segment(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator spec serializes")
    }

    pub fn window(&self) -> Result<WindowSpec, SynthError> {
        WindowSpec::new(self.reference_date, self.window_days).map_err(|e| invalid(e.to_string()))
    }

    pub fn generate(&self) -> Result<(EventLog, GroundTruth), SynthError> {
        generate(
            &self.archetypes,
            self.n_users,
            &self.window()?,
            self.seed,
            self.platform,
        )
    }
}

pub const TRUTH_CSV_HEADER: &str = "user_id,segment";

pub fn write_truth_csv<W: Write>(out: W, truth: &GroundTruth) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_CSV_HEADER.split(','))?;
    for (user, segment) in truth {
        w.write_record([user.as_str(), segment.name()])?;
    }
    w.flush()?;
    Ok(())
}
