//! Inactivity-gap sessionization.
//!
//! A user's events, sorted by time, are cut into a new session whenever two
//! consecutive events are separated by strictly more than the gap.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use thiserror::Error;

use crate::event::{format_timestamp, Activity, EventLog, EventType, UserEvent};

/// Default inactivity gap, in minutes.
pub const DEFAULT_GAP_MINUTES: i64 = 30;

pub fn default_gap() -> Duration {
    Duration::minutes(DEFAULT_GAP_MINUTES)
}

/// Which of the five activities occurred at least once in a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ActivityFlags([bool; 5]);

impl ActivityFlags {
    pub fn get(&self, activity: Activity) -> bool {
        self.0[activity.index()]
    }

    pub fn set(&mut self, activity: Activity) {
        self.0[activity.index()] = true;
    }

    pub fn count(&self) -> u32 {
        self.0.iter().filter(|&&f| f).count() as u32
    }

    pub fn all() -> Self {
        Self([true; 5])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub event_count: u32,
    pub activity_flags: ActivityFlags,
    pub pdp_view_count: u32,
    pub lead_drop_count: u32,
}

impl Session {
    fn open(event: &UserEvent) -> Self {
        let mut s = Session {
            user_id: event.user_id.clone(),
            start: event.timestamp,
            end: event.timestamp,
            event_count: 0,
            activity_flags: ActivityFlags::default(),
            pdp_view_count: 0,
            lead_drop_count: 0,
        };
        s.absorb(event);
        s
    }

    fn absorb(&mut self, event: &UserEvent) {
        self.end = self.end.max(event.timestamp);
        self.event_count += 1;
        if let Some(activity) = event.event_type.activity() {
            self.activity_flags.set(activity);
        }
        match event.event_type {
            EventType::PdpView => self.pdp_view_count += 1,
            EventType::LeadDropped => self.lead_drop_count += 1,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session gap must be positive, got {0} seconds")]
    NonPositiveGap(i64),
}

/// Groups events into sessions, ordered by `(user_id, start)`.
///
/// Users are processed independently (and in parallel); ties on timestamp
/// stay in one session, so the result does not depend on input order.
pub fn sessionize(log: &EventLog, gap: Duration) -> Result<Vec<Session>, SessionError> {
    if gap <= Duration::zero() {
        return Err(SessionError::NonPositiveGap(gap.num_seconds()));
    }
    let mut by_user: BTreeMap<&str, Vec<&UserEvent>> = BTreeMap::new();
    for event in log.events() {
        by_user
            .entry(event.user_id.as_str())
            .or_default()
            .push(event);
    }
    let per_user: Vec<Vec<Session>> = by_user
        .into_par_iter()
        .map(|(_, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            sessionize_user(&events, gap)
        })
        .collect();
    Ok(per_user.into_iter().flatten().collect())
}

fn sessionize_user(sorted: &[&UserEvent], gap: Duration) -> Vec<Session> {
    let mut sessions: Vec<Session> = Vec::new();
    for event in sorted {
        match sessions.last_mut() {
            Some(current) if event.timestamp - current.end <= gap => current.absorb(event),
            _ => sessions.push(Session::open(event)),
        }
    }
    sessions
}

/// Splits canonically ordered sessions into per-user runs.
pub fn group_by_user(sessions: &[Session]) -> impl Iterator<Item = (&str, &[Session])> {
    sessions
        .chunk_by(|a, b| a.user_id == b.user_id)
        .map(|chunk| (chunk[0].user_id.as_str(), chunk))
}

pub const SESSION_CSV_HEADER: &str =
    "user_id,start,end,event_count,pdp_views,leads,flag_filter,flag_pdp,flag_lead,flag_crf,flag_shortlist";

pub fn write_sessions_csv<W: Write>(out: W, sessions: &[Session]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SESSION_CSV_HEADER.split(','))?;
    for s in sessions {
        let flag = |a| (s.activity_flags.get(a) as u8).to_string();
        w.write_record([
            s.user_id.clone(),
            format_timestamp(s.start),
            format_timestamp(s.end),
            s.event_count.to_string(),
            s.pdp_view_count.to_string(),
            s.lead_drop_count.to_string(),
            flag(Activity::Filter),
            flag(Activity::Pdp),
            flag(Activity::Lead),
            flag(Activity::Crf),
            flag(Activity::Shortlist),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Platform;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ev(user: &str, hh: u32, mm: u32, ty: EventType) -> UserEvent {
        UserEvent::new(
            user,
            Utc.with_ymd_and_hms(2023, 1, 5, hh, mm, 0).unwrap(),
            ty,
            Platform::App,
        )
        .unwrap()
    }

    fn gap30() -> Duration {
        Duration::minutes(30)
    }

    #[test]
    fn events_within_gap_share_a_session() {
        let log = EventLog::new(vec![
            ev("u1", 10, 0, EventType::OtherVisit),
            ev("u1", 10, 10, EventType::OtherVisit),
        ]);
        let s = sessionize(&log, gap30()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].event_count, 2);
    }

    #[test]
    fn gap_exceeded_by_a_minute_splits() {
        let log = EventLog::new(vec![
            ev("u1", 10, 0, EventType::OtherVisit),
            ev("u1", 10, 31, EventType::OtherVisit),
        ]);
        assert_eq!(sessionize(&log, gap30()).unwrap().len(), 2);
    }

    #[test]
    fn gap_of_exactly_threshold_continues() {
        let log = EventLog::new(vec![
            ev("u1", 10, 0, EventType::OtherVisit),
            ev("u1", 10, 30, EventType::OtherVisit),
        ]);
        assert_eq!(sessionize(&log, gap30()).unwrap().len(), 1);
    }

    #[test]
    fn counts_and_flags() {
        let log = EventLog::new(vec![
            ev("u1", 10, 6, EventType::LeadDropped),
            ev("u1", 10, 0, EventType::PdpView),
            ev("u1", 10, 5, EventType::PdpView),
        ]);
        let s = sessionize(&log, gap30()).unwrap();
        assert_eq!(s.len(), 1);
        let s = &s[0];
        assert_eq!(
            (s.pdp_view_count, s.lead_drop_count, s.event_count),
            (2, 1, 3)
        );
        assert!(s.activity_flags.get(Activity::Pdp));
        assert!(s.activity_flags.get(Activity::Lead));
        assert!(!s.activity_flags.get(Activity::Filter));
        assert!(!s.activity_flags.get(Activity::Crf));
        assert!(!s.activity_flags.get(Activity::Shortlist));
        assert_eq!(s.start, Utc.with_ymd_and_hms(2023, 1, 5, 10, 0, 0).unwrap());
        assert_eq!(s.end, Utc.with_ymd_and_hms(2023, 1, 5, 10, 6, 0).unwrap());
    }

    #[test]
    fn empty_log_and_bad_gap() {
        assert!(sessionize(&EventLog::default(), gap30())
            .unwrap()
            .is_empty());
        assert_eq!(
            sessionize(&EventLog::default(), Duration::zero()),
            Err(SessionError::NonPositiveGap(0))
        );
    }

    #[test]
    fn output_is_canonically_ordered() {
        let log = EventLog::new(vec![
            ev("b", 12, 0, EventType::OtherVisit),
            ev("a", 14, 0, EventType::OtherVisit),
            ev("b", 9, 0, EventType::OtherVisit),
            ev("a", 8, 0, EventType::OtherVisit),
        ]);
        let s = sessionize(&log, gap30()).unwrap();
        let keys: Vec<_> = s.iter().map(|s| (s.user_id.as_str(), s.start)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let groups: Vec<_> = group_by_user(&s).map(|(u, g)| (u, g.len())).collect();
        assert_eq!(groups, vec![("a", 2), ("b", 2)]);
    }

    #[test]
    fn session_dump_has_schema_header() {
        let log = EventLog::new(vec![ev("u1", 10, 0, EventType::PdpView)]);
        let mut buf = Vec::new();
        write_sessions_csv(&mut buf, &sessionize(&log, gap30()).unwrap()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            format!("{SESSION_CSV_HEADER}\nu1,2023-01-05T10:00:00Z,2023-01-05T10:00:00Z,1,1,0,0,1,0,0,0\n")
        );
    }

    fn arb_events() -> impl Strategy<Value = Vec<UserEvent>> {
        prop::collection::vec((0usize..4, 0i64..20_000, 0usize..6), 0..60).prop_map(|raw| {
            raw.into_iter()
                .map(|(u, secs, ty)| {
                    UserEvent::new(
                        format!("u{u}"),
                        Utc.timestamp_opt(1_672_531_200 + secs, 0).unwrap(),
                        EventType::ALL[ty],
                        Platform::Web,
                    )
                    .unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn session_invariants(events in arb_events(), gap_secs in 1i64..3_000) {
            let gap = Duration::seconds(gap_secs);
            let log = EventLog::new(events.clone());
            let sessions = sessionize(&log, gap).unwrap();
            let total: u32 = sessions.iter().map(|s| s.event_count).sum();
            prop_assert_eq!(total as usize, events.len());
            for s in &sessions {
                prop_assert!(s.start <= s.end);
                prop_assert!(s.event_count >= 1);
                prop_assert_eq!(s.activity_flags.get(Activity::Pdp), s.pdp_view_count >= 1);
                prop_assert_eq!(s.activity_flags.get(Activity::Lead), s.lead_drop_count >= 1);
            }
            for (_, group) in group_by_user(&sessions) {
                for pair in group.windows(2) {
                    prop_assert!(pair[1].start - pair[0].end > gap);
                }
            }
        }

        #[test]
        fn count_non_increasing_in_gap(events in arb_events(), g1 in 1i64..2_000, extra in 0i64..2_000) {
            let log = EventLog::new(events);
            let fine = sessionize(&log, Duration::seconds(g1)).unwrap().len();
            let coarse = sessionize(&log, Duration::seconds(g1 + extra)).unwrap().len();
            prop_assert!(fine >= coarse);
        }

        #[test]
        fn permutation_invariant(events in arb_events(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = events.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                sessionize(&EventLog::new(events), gap30()).unwrap(),
                sessionize(&EventLog::new(shuffled), gap30()).unwrap()
            );
        }
    }
}
