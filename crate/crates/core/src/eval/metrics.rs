use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::synth::{NegativeProbe, PlantedEventSpec};
use crate::eoi::{EventCluster, Scale, ScaleMap};
use crate::geo::{haversine_m, GeohashKey};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMetrics {
    pub tally: Tally,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// Set when the value had a zero denominator and is reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl ScaleMetrics {
    pub fn from_tally(t: Tally) -> Self {
        let ratio = |n: u64, d: u64| {
            if d == 0 {
                (0.0, true)
            } else {
                (n as f64 / d as f64, false)
            }
        };
        let (precision, precision_undefined) = ratio(t.tp, t.tp + t.fp);
        let (recall, recall_undefined) = ratio(t.tp, t.tp + t.fn_);
        let (accuracy, _) = ratio(t.tp + t.tn, t.tp + t.tn + t.fp + t.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ScaleMetrics {
            tally: t,
            precision,
            recall,
            accuracy,
            f1,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scales: BTreeMap<Scale, ScaleMetrics>,
    /// Micro-averaged over every scale.
    pub overall: ScaleMetrics,
}

impl MetricsReport {
    pub fn scale(&self, s: Scale) -> &ScaleMetrics {
        &self.scales[&s]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>9} {:>9} {:>9} {:>9}   {:>4} {:>4} {:>4} {:>4}",
            "Scale", "Precision", "Recall", "Accuracy", "F1", "TP", "FP", "FN", "TN"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, m: &ScaleMetrics| {
            let mark = if m.precision_undefined || m.recall_undefined {
                " *"
            } else {
                ""
            };
            writeln!(
                f,
                "{:<14} {:>9.2} {:>9.2} {:>9.2} {:>9.2}   {:>4} {:>4} {:>4} {:>4}{mark}",
                name,
                m.precision,
                m.recall,
                m.accuracy,
                m.f1,
                m.tally.tp,
                m.tally.fp,
                m.tally.fn_,
                m.tally.tn
            )
        };
        for (s, m) in &self.scales {
            row(f, s.name(), m)?;
        }
        row(f, "Overall", &self.overall)?;
        if self
            .scales
            .values()
            .chain([&self.overall])
            .any(|m| m.precision_undefined || m.recall_undefined)
        {
            writeln!(f, "* zero denominator, reported as 0")?;
        }
        Ok(())
    }
}

/// Scale an EoI is displayed at.
pub fn scale_of(c: &EventCluster, scale_map: &ScaleMap) -> Scale {
    scale_map.scale_for_precision(c.cell_key.precision())
}

fn time_span(c: &EventCluster) -> (i64, i64) {
    let from = c
        .members
        .iter()
        .map(|m| m.time)
        .min()
        .unwrap_or(c.timestamp);
    let to = c
        .members
        .iter()
        .map(|m| m.time)
        .max()
        .unwrap_or(c.timestamp);
    (from, to)
}

/// Centroid within the radius, overlapping time span, and a shared topic term.
pub fn matches_event(c: &EventCluster, e: &PlantedEventSpec) -> bool {
    let (from, to) = time_span(c);
    haversine_m(c.centroid.lat, c.centroid.lon, e.lat, e.lon) <= e.radius_m
        && from <= e.end_ms
        && to >= e.start_ms
        && e.topic
            .iter()
            .any(|t| c.label_terms.contains(t) || c.centroid_vector.contains(t))
}

fn hits_probe(c: &EventCluster, p: &NegativeProbe) -> bool {
    let (from, to) = time_span(c);
    let Ok(cell) = GeohashKey::new(p.cell.as_str()) else {
        return false;
    };
    cell.bbox().contains(c.centroid.lat, c.centroid.lon) && from <= p.to_ms && to >= p.from_ms
}

/// Scores detected root EoIs against planted events.
///
/// Each event takes at most one detection: a matching one at the right scale
/// is a TP; otherwise the event is an FN at its scale, and a matching
/// detection at another scale is an FP there. Every other detection is an FP
/// at its own scale. A negative probe with no detection at its scale is a TN.
pub fn evaluate(
    detected: &[EventCluster],
    events: &[PlantedEventSpec],
    probes: &[NegativeProbe],
    scale_map: &ScaleMap,
) -> MetricsReport {
    let mut tallies: BTreeMap<Scale, Tally> =
        Scale::ALL.iter().map(|s| (*s, Tally::default())).collect();
    let mut dets: Vec<&EventCluster> = detected.iter().collect();
    dets.sort_by(|a, b| {
        b.packet_count
            .cmp(&a.packet_count)
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut order: Vec<&PlantedEventSpec> = events.iter().collect();
    order.sort_by(|a, b| {
        (a.start_ms, a.lat.to_bits(), a.lon.to_bits(), &a.topic).cmp(&(
            b.start_ms,
            b.lat.to_bits(),
            b.lon.to_bits(),
            &b.topic,
        ))
    });
    let mut used = vec![false; dets.len()];
    for e in order {
        let candidates: Vec<usize> = (0..dets.len())
            .filter(|&i| !used[i] && matches_event(dets[i], e))
            .collect();
        let right = candidates
            .iter()
            .copied()
            .find(|&i| scale_of(dets[i], scale_map) == e.scale);
        let t = tallies.get_mut(&e.scale).expect("scale");
        match (right, candidates.first()) {
            (Some(i), _) => {
                t.tp += 1;
                used[i] = true;
            }
            (None, Some(&i)) => {
                t.fn_ += 1;
                used[i] = true;
                tallies
                    .get_mut(&scale_of(dets[i], scale_map))
                    .expect("scale")
                    .fp += 1;
            }
            (None, None) => t.fn_ += 1,
        }
    }
    for (i, d) in dets.iter().enumerate() {
        if !used[i] {
            tallies.get_mut(&scale_of(d, scale_map)).expect("scale").fp += 1;
        }
    }
    for p in probes {
        if !detected
            .iter()
            .any(|d| scale_of(d, scale_map) == p.scale && hits_probe(d, p))
        {
            tallies.get_mut(&p.scale).expect("scale").tn += 1;
        }
    }
    let mut total = Tally::default();
    for t in tallies.values() {
        total.add(t);
    }
    MetricsReport {
        scales: tallies
            .into_iter()
            .map(|(s, t)| (s, ScaleMetrics::from_tally(t)))
            .collect(),
        overall: ScaleMetrics::from_tally(total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eoi::{ClusterLevel, Member};
    use crate::geo::geohash_encode;
    use crate::packet::Location;
    use crate::TermVector;

    fn event(id: &str, scale: Scale, lat: f64, lon: f64, topic: &[&str]) -> PlantedEventSpec {
        let p = ScaleMap::default().precision_of(scale).unwrap();
        PlantedEventSpec {
            id: id.into(),
            scale,
            cell: geohash_encode(lat, lon, p).unwrap().as_str().into(),
            lat,
            lon,
            radius_m: 100.0,
            start_ms: 1_000,
            end_ms: 5_000,
            topic: topic.iter().map(|s| s.to_string()).collect(),
            class: None,
            packets: 10,
        }
    }

    fn detection(id: &str, lat: f64, lon: f64, precision: usize, terms: &[&str]) -> EventCluster {
        let key = geohash_encode(lat, lon, precision).unwrap();
        let sm = ScaleMap::default().for_precision(precision);
        EventCluster {
            id: id.into(),
            event_type: "unclassified".into(),
            members: vec![Member {
                id: format!("{id}-m"),
                lat,
                lon,
                time: 2_000,
            }],
            packet_count: 5,
            centroid: Location { lat, lon },
            centroid_vector: TermVector::indicator(terms.iter().copied()),
            cell_key: key.clone(),
            home: key,
            timestamp: 2_000,
            created_at: 2_000,
            updated_at: 2_000,
            zoom_start: sm.zoom_start,
            zoom_end: sm.zoom_end,
            visited: true,
            label_terms: terms.iter().map(|s| s.to_string()).collect(),
            level: ClusterLevel::Leaf,
            constituents: Vec::new(),
            merged_into: None,
        }
    }

    #[test]
    fn perfect_detection() {
        let events = [
            event("a", Scale::Local, 6.5, 3.4, &["goal"]),
            event("b", Scale::City, 6.0, 3.0, &["rain"]),
        ];
        let dets = [
            detection("x", 6.5, 3.4, 8, &["goal"]),
            detection("y", 6.0, 3.0, 3, &["rain"]),
        ];
        let r = evaluate(&dets, &events, &[], &ScaleMap::default());
        for s in [Scale::Local, Scale::City] {
            let m = r.scale(s);
            assert_eq!(
                (m.precision, m.recall, m.accuracy, m.f1),
                (1.0, 1.0, 1.0, 1.0)
            );
        }
        assert_eq!(r.overall.f1, 1.0);
    }

    #[test]
    fn no_detections_flags_precision() {
        let events = [event("a", Scale::Local, 6.5, 3.4, &["goal"])];
        let r = evaluate(&[], &events, &[], &ScaleMap::default());
        let m = r.scale(Scale::Local);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_undefined);
        assert!(r.to_string().contains('*'));
    }

    #[test]
    fn wrong_scale_is_fn_and_fp() {
        let events = [event("a", Scale::Local, 6.5, 3.4, &["goal"])];
        let dets = [detection("x", 6.5, 3.4, 6, &["goal"])];
        let r = evaluate(&dets, &events, &[], &ScaleMap::default());
        assert_eq!(
            r.scale(Scale::Local).tally,
            Tally {
                fn_: 1,
                ..Default::default()
            }
        );
        assert_eq!(
            r.scale(Scale::Neighborhood).tally,
            Tally {
                fp: 1,
                ..Default::default()
            }
        );
    }

    #[test]
    fn match_rule_needs_all_three() {
        let e = event("a", Scale::Local, 6.5, 3.4, &["goal"]);
        assert!(matches_event(&detection("x", 6.5, 3.4, 8, &["goal"]), &e));
        assert!(!matches_event(&detection("x", 6.5, 3.41, 8, &["goal"]), &e));
        assert!(!matches_event(&detection("x", 6.5, 3.4, 8, &["rain"]), &e));
        let mut late = detection("x", 6.5, 3.4, 8, &["goal"]);
        late.members[0].time = 9_000;
        assert!(!matches_event(&late, &e));
    }

    #[test]
    fn duplicates_and_negatives() {
        let events = [event("a", Scale::Local, 6.5, 3.4, &["goal"])];
        let dets = [
            detection("x", 6.5, 3.4, 8, &["goal"]),
            detection("y", 6.5, 3.4, 8, &["goal"]),
        ];
        let probes = [
            NegativeProbe {
                id: "n0".into(),
                scale: Scale::Local,
                cell: geohash_encode(6.5, 3.4, 7).unwrap().as_str().into(),
                from_ms: 0,
                to_ms: 10_000,
            },
            NegativeProbe {
                id: "n1".into(),
                scale: Scale::Local,
                cell: geohash_encode(7.5, 3.4, 7).unwrap().as_str().into(),
                from_ms: 0,
                to_ms: 10_000,
            },
        ];
        let r = evaluate(&dets, &events, &probes, &ScaleMap::default());
        assert_eq!(
            r.scale(Scale::Local).tally,
            Tally {
                tp: 1,
                fp: 1,
                fn_: 0,
                tn: 1
            }
        );
        assert!((r.scale(Scale::Local).accuracy - 2.0 / 3.0).abs() < 1e-12);
    }
}
