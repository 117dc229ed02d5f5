//! Customer segmentation from clickstream logs.
//!
//! Raw events are grouped into sessions, summarized per user as RFME
//! (recency, frequency, monetary, engagement) vectors over a trailing window,
//! clustered with K-means, and the clusters are named after four marketing
//! segments. A labeled synthetic generator and partition metrics make every
//! stage checkable without production data.

pub mod cluster;
pub mod eval;
pub mod event;
pub mod features;
pub mod labeling;
pub mod pipeline;
pub mod session;
pub mod synth;
