//! Aggregated performance spectrum: directly-following activity pairs with
//! their frequency and mean elapsed time, and a classified diff of two logs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::event_log::EventLog;

/// Share of the original mean used as default similarity tolerance.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 0.05;
/// Lower bound of the default tolerance, seconds.
pub const DEFAULT_TOLERANCE_FLOOR: f64 = 1.0;

pub type Segment = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segment: Segment,
    pub frequency: u64,
    /// Seconds.
    pub avg_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Presence {
    BothSimilar,
    BothDifferent,
    OnlyOriginal,
    OnlySimulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDiffRecord {
    pub segment: Segment,
    pub presence: Presence,
    pub original: Option<SegmentStats>,
    pub simulated: Option<SegmentStats>,
    /// Simulated minus original, seconds; 0 unless both sides are present.
    pub avg_time_delta: f64,
    /// Simulated minus original count; a missing side counts 0.
    pub freq_delta: i64,
}

/// Multiset of directly-following activity pairs.
pub fn segments(log: &EventLog) -> BTreeMap<Segment, u64> {
    let mut out = BTreeMap::new();
    for trace in log.traces() {
        for w in trace.events().windows(2) {
            *out.entry((w[0].activity.clone(), w[1].activity.clone())).or_insert(0) += 1;
        }
    }
    out
}

pub fn spectrum(log: &EventLog) -> BTreeMap<Segment, SegmentStats> {
    let mut acc: BTreeMap<Segment, (u64, i64)> = BTreeMap::new();
    for trace in log.traces() {
        for w in trace.events().windows(2) {
            let e = acc.entry((w[0].activity.clone(), w[1].activity.clone())).or_insert((0, 0));
            e.0 += 1;
            e.1 += w[1].timestamp - w[0].timestamp;
        }
    }
    acc.into_iter()
        .map(|(segment, (frequency, total_ms))| {
            let avg_time = total_ms as f64 / 1000.0 / frequency as f64;
            (
                segment.clone(),
                SegmentStats {
                    segment,
                    frequency,
                    avg_time,
                },
            )
        })
        .collect()
}

/// 5% of the original mean, at least one second.
pub fn default_tolerance(original_avg: f64) -> f64 {
    (original_avg * DEFAULT_RELATIVE_TOLERANCE).max(DEFAULT_TOLERANCE_FLOOR)
}

/// Presence class of a segment, derived from its two sides alone.
pub fn classify(original: Option<&SegmentStats>, simulated: Option<&SegmentStats>, tolerance: Option<f64>) -> Option<Presence> {
    match (original, simulated) {
        (Some(o), Some(s)) => {
            let tol = tolerance.unwrap_or_else(|| default_tolerance(o.avg_time));
            Some(if (s.avg_time - o.avg_time).abs() <= tol {
                Presence::BothSimilar
            } else {
                Presence::BothDifferent
            })
        }
        (Some(_), None) => Some(Presence::OnlyOriginal),
        (None, Some(_)) => Some(Presence::OnlySimulated),
        (None, None) => None,
    }
}

/// Union of both logs' segments, classified and sorted by |avg delta|
/// descending, then segment. `tolerance` of `None` means the per-segment
/// default.
pub fn spectrum_diff(original: &EventLog, simulated: &EventLog, tolerance: Option<f64>) -> Vec<SpectrumDiffRecord> {
    let mut a = spectrum(original);
    let mut b = spectrum(simulated);
    let keys: Vec<Segment> = a.keys().chain(b.keys()).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut records: Vec<SpectrumDiffRecord> = keys
        .into_iter()
        .map(|segment| {
            let o = a.remove(&segment);
            let s = b.remove(&segment);
            let presence = classify(o.as_ref(), s.as_ref(), tolerance).expect("segment from one side");
            let avg_time_delta = match (&o, &s) {
                (Some(o), Some(s)) => s.avg_time - o.avg_time,
                _ => 0.0,
            };
            let freq_delta = s.as_ref().map_or(0, |x| x.frequency as i64) - o.as_ref().map_or(0, |x| x.frequency as i64);
            SpectrumDiffRecord {
                segment,
                presence,
                original: o,
                simulated: s,
                avg_time_delta,
                freq_delta,
            }
        })
        .collect();
    records.sort_by(|x, y| {
        y.avg_time_delta
            .abs()
            .total_cmp(&x.avg_time_delta.abs())
            .then_with(|| x.segment.cmp(&y.segment))
    });
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{Event, Trace};
    use proptest::prelude::*;

    fn seg(a: &str, b: &str) -> Segment {
        (a.to_string(), b.to_string())
    }

    fn timed(cases: &[&[(&str, i64)]]) -> EventLog {
        let traces = cases
            .iter()
            .enumerate()
            .map(|(i, evs)| {
                let id = (i + 1).to_string();
                Trace::new(id.clone(), evs.iter().map(|(a, t)| Event::new(&id, *a, "", t * 1000)).collect()).unwrap()
            })
            .collect();
        EventLog::new(traces).unwrap()
    }

    #[test]
    fn segment_examples() {
        let s = segments(&timed(&[&[("a", 0), ("b", 1), ("c", 2)]]));
        assert_eq!(s, BTreeMap::from([(seg("a", "b"), 1), (seg("b", "c"), 1)]));
        assert!(segments(&timed(&[&[("a", 0)], &[("b", 0)]])).is_empty());
    }

    #[test]
    fn hand_fixture() {
        let log = timed(&[&[("a", 0), ("b", 10), ("c", 30)], &[("a", 0), ("b", 20)]]);
        let s = spectrum(&log);
        assert_eq!((s[&seg("a", "b")].frequency, s[&seg("a", "b")].avg_time), (2, 15.0));
        assert_eq!((s[&seg("b", "c")].frequency, s[&seg("b", "c")].avg_time), (1, 20.0));
        let zero = spectrum(&timed(&[&[("a", 5), ("b", 5)]]));
        assert_eq!(zero[&seg("a", "b")].avg_time, 0.0);
    }

    #[test]
    fn diff_examples() {
        let log = timed(&[&[("a", 0), ("b", 10), ("c", 30)]]);
        let same = spectrum_diff(&log, &log, None);
        assert!(same.iter().all(|r| r.presence == Presence::BothSimilar && r.avg_time_delta == 0.0 && r.freq_delta == 0));

        let sim = timed(&[&[("a", 0), ("b", 10), ("d", 30)]]);
        let d = spectrum_diff(&log, &sim, None);
        let new = d.iter().find(|r| r.segment == seg("b", "d")).unwrap();
        assert_eq!(new.presence, Presence::OnlySimulated);
        assert!(new.original.is_none() && new.simulated.is_some());
        assert_eq!(new.freq_delta, 1);
        let gone = d.iter().find(|r| r.segment == seg("b", "c")).unwrap();
        assert_eq!((gone.presence, gone.freq_delta), (Presence::OnlyOriginal, -1));

        let slow = timed(&[&[("a", 0), ("b", 100)]]);
        let slower = timed(&[&[("a", 0), ("b", 160)]]);
        let d = spectrum_diff(&slow, &slower, Some(10.0));
        assert_eq!((d[0].presence, d[0].avg_time_delta), (Presence::BothDifferent, 60.0));
    }

    #[test]
    fn default_tolerance_floor() {
        assert_eq!(default_tolerance(100.0), 5.0);
        assert_eq!(default_tolerance(4.0), 1.0);
        let a = timed(&[&[("a", 0), ("b", 100)]]);
        let b = timed(&[&[("a", 0), ("b", 104)]]);
        assert_eq!(spectrum_diff(&a, &b, None)[0].presence, Presence::BothSimilar);
    }

    fn arb_log() -> impl Strategy<Value = EventLog> {
        prop::collection::vec(prop::collection::vec((0u8..4, 0i64..50), 1..7), 1..20).prop_map(|cases| {
            let traces = cases
                .iter()
                .enumerate()
                .map(|(i, evs)| {
                    let id = i.to_string();
                    let mut t = 0;
                    let events = evs
                        .iter()
                        .map(|(a, gap)| {
                            t += gap;
                            Event::new(&id, format!("a{a}"), "", t * 1000)
                        })
                        .collect();
                    Trace::new(id.clone(), events).unwrap()
                })
                .collect();
            EventLog::new(traces).unwrap()
        })
    }

    proptest! {
        #[test]
        fn frequency_mass(log in arb_log()) {
            let total: u64 = spectrum(&log).values().map(|s| s.frequency).sum();
            let expected: usize = log.traces().iter().map(|t| t.len() - 1).sum();
            prop_assert_eq!(total as usize, expected);
            prop_assert_eq!(segments(&log).values().sum::<u64>(), total);
        }

        #[test]
        fn order_invariant(log in arb_log()) {
            let mut traces = log.traces().to_vec();
            traces.reverse();
            prop_assert_eq!(spectrum(&EventLog::new(traces).unwrap()), spectrum(&log));
        }

        #[test]
        fn classification_is_rederivable(a in arb_log(), b in arb_log(), tol in prop::option::of(0.0f64..20.0)) {
            let records = spectrum_diff(&a, &b, tol);
            for w in records.windows(2) {
                prop_assert!(w[0].avg_time_delta.abs() >= w[1].avg_time_delta.abs());
            }
            for r in &records {
                prop_assert_eq!(Some(r.presence), classify(r.original.as_ref(), r.simulated.as_ref(), tol));
                match r.presence {
                    Presence::OnlyOriginal => prop_assert!(r.original.is_some() && r.simulated.is_none()),
                    Presence::OnlySimulated => prop_assert!(r.original.is_none() && r.simulated.is_some()),
                    _ => prop_assert!(r.original.is_some() && r.simulated.is_some()),
                }
            }
        }
    }
}
