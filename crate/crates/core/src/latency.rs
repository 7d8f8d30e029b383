//! One-way latency samples and their summary.
//!
//! A sample is the receiver's wall-clock time at packet completion minus the
//! sender timestamp carried in the packet, both in microseconds since the
//! UNIX epoch. On one host the clocks agree; across hosts the caller supplies
//! the receiver-minus-sender clock offset, otherwise samples include it.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatencyError {
    #[error("no latency samples recorded")]
    Empty,
    #[error("{0} sender timestamps but {1} receive times")]
    Mismatch(usize, usize),
}

/// Serialized as one JSON object; see `docs/latency.md`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples_us: Vec<i64>,
    pub count: usize,
    pub min_us: i64,
    /// Mean of the two middle samples (rounded down) for even counts.
    pub median_us: i64,
    /// Nearest rank: the `ceil(0.95 * count)`-th smallest sample.
    pub p95_us: i64,
    pub max_us: i64,
}

impl LatencyReport {
    pub fn from_samples(samples_us: Vec<i64>) -> Result<Self, LatencyError> {
        if samples_us.is_empty() {
            return Err(LatencyError::Empty);
        }
        let mut sorted = samples_us.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        let median_us = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]).div_euclid(2)
        };
        let rank = (n * 95).div_ceil(100);
        Ok(Self {
            count: n,
            min_us: sorted[0],
            median_us,
            p95_us: sorted[rank - 1],
            max_us: sorted[n - 1],
            samples_us,
        })
    }

    /// Summary fields agree with the samples.
    pub fn is_consistent(&self) -> bool {
        Self::from_samples(self.samples_us.clone()).is_ok_and(|r| r == *self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

pub fn unix_time_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after 1970")
        .as_micros() as u64
}

/// Accumulates samples during a receive run.
#[derive(Debug, Clone, Default)]
pub struct LatencyRecorder {
    clock_offset_us: i64,
    samples: Vec<i64>,
}

impl LatencyRecorder {
    /// `clock_offset_us` is receiver clock minus sender clock.
    pub fn new(clock_offset_us: i64) -> Self {
        Self {
            clock_offset_us,
            samples: Vec::new(),
        }
    }

    pub fn record(&mut self, sender_ts_us: u64, received_us: u64) -> i64 {
        let s = received_us as i64 - sender_ts_us as i64 - self.clock_offset_us;
        self.samples.push(s);
        s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn finish(self) -> Result<LatencyReport, LatencyError> {
        LatencyReport::from_samples(self.samples)
    }
}

/// Builds a report from paired sender timestamps and receive times.
pub fn measure_latency(
    sender_ts_us: &[u64],
    received_us: &[u64],
    clock_offset_us: i64,
) -> Result<LatencyReport, LatencyError> {
    if sender_ts_us.len() != received_us.len() {
        return Err(LatencyError::Mismatch(sender_ts_us.len(), received_us.len()));
    }
    let mut rec = LatencyRecorder::new(clock_offset_us);
    for (&s, &r) in sender_ts_us.iter().zip(received_us) {
        rec.record(s, r);
    }
    rec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_example() {
        let r = measure_latency(&[0, 33_333], &[40_000, 73_000], 0).unwrap();
        assert_eq!(r.samples_us, vec![40_000, 39_667]);
        assert_eq!(r.median_us, 39_833);
        assert_eq!((r.min_us, r.max_us, r.p95_us, r.count), (39_667, 40_000, 40_000, 2));
    }

    #[test]
    fn single_sample_degenerate() {
        let r = LatencyReport::from_samples(vec![1234]).unwrap();
        assert_eq!([r.min_us, r.median_us, r.p95_us, r.max_us], [1234; 4]);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(LatencyRecorder::new(0).finish(), Err(LatencyError::Empty));
        assert_eq!(measure_latency(&[1], &[], 0), Err(LatencyError::Mismatch(1, 0)));
    }

    #[test]
    fn p95_nearest_rank() {
        let r = LatencyReport::from_samples((1..=100).rev().collect()).unwrap();
        assert_eq!((r.p95_us, r.median_us), (95, 50));
        let r = LatencyReport::from_samples((1..=21).collect()).unwrap();
        // ceil(0.95 * 21) = 20
        assert_eq!((r.p95_us, r.median_us), (20, 11));
    }

    #[test]
    fn clock_offset_subtracted() {
        let r = measure_latency(&[1_000], &[6_000], 2_000).unwrap();
        assert_eq!(r.samples_us, vec![3_000]);
    }

    #[test]
    fn json_round_trip_and_consistency() {
        let r = LatencyReport::from_samples(vec![5, -3, 9, 12]).unwrap();
        assert_eq!(r.median_us, 7);
        let json = r.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for k in ["samples_us", "count", "min_us", "median_us", "p95_us", "max_us"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: LatencyReport = serde_json::from_str(&json).unwrap();
        assert!(back.is_consistent());
        let mut tampered = back;
        tampered.median_us += 1;
        assert!(!tampered.is_consistent());
    }
}
