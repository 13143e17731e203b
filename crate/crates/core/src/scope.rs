//! Bottom-up scope aggregation: similar clusters in sibling cells merge into
//! a parent-level cluster whose zoom range is one scale coarser.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eoi::{ClusterLevel, EventCluster, ScaleMap, UNCLASSIFIED};
use crate::geo::GeohashKey;
use crate::index::{PyramidIndex, MS_PER_HOUR};
use crate::text::SparseVector;
use crate::TermVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScopeParams {
    pub merge_cosine_threshold: f64,
    pub time_overlap_window_ms: i64,
    pub scale_map: ScaleMap,
    pub label_terms: usize,
}

impl Default for ScopeParams {
    fn default() -> Self {
        ScopeParams {
            merge_cosine_threshold: 0.5,
            time_overlap_window_ms: 6 * MS_PER_HOUR,
            scale_map: ScaleMap::default(),
            label_terms: 5,
        }
    }
}

impl ScopeParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.merge_cosine_threshold > 0.0 && self.merge_cosine_threshold <= 1.0) {
            return Err(format!(
                "merge_cosine_threshold {} outside (0, 1]",
                self.merge_cosine_threshold
            ));
        }
        if self.time_overlap_window_ms < 0 {
            return Err("time_overlap_window_ms must be non-negative".into());
        }
        ScaleMap::new(self.scale_map.entries().to_vec()).map(|_| ())
    }
}

pub fn should_merge(a: &EventCluster, b: &EventCluster, params: &ScopeParams) -> bool {
    a.centroid_vector.cosine(&b.centroid_vector) >= params.merge_cosine_threshold
        && (a.timestamp - b.timestamp).abs() <= params.time_overlap_window_ms
        && (a.event_type == b.event_type || a.is_unclassified() || b.is_unclassified())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationReport {
    /// `(parent precision, clusters formed)` per level, finest first.
    pub levels: Vec<(usize, usize)>,
    pub examined: usize,
}

impl AggregationReport {
    pub fn merged(&self) -> usize {
        self.levels.iter().map(|(_, n)| n).sum()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups of indices connected by `should_merge`, each ascending, ordered by first member.
pub fn merge_groups(clusters: &[&EventCluster], params: &ScopeParams) -> Vec<Vec<usize>> {
    let n = clusters.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if should_merge(clusters[i], clusters[j], params) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

pub fn merged_id(constituents: &[&str]) -> String {
    let mut ids = constituents.to_vec();
    ids.sort_unstable();
    let mut h = Sha256::new();
    h.update(b"merged\0");
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    format!("eoi-{}", hex::encode(&h.finalize()[..10]))
}

/// Type carrying the most packets among classified constituents (ties to the
/// smaller name), or unclassified when none is classified.
fn majority_type(parts: &[&EventCluster]) -> String {
    let mut votes: BTreeMap<&str, u64> = BTreeMap::new();
    for c in parts.iter().filter(|c| !c.is_unclassified()) {
        *votes.entry(c.event_type.as_str()).or_insert(0) += c.packet_count;
    }
    let mut best: Option<(&str, u64)> = None;
    for (t, n) in votes {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((t, n));
        }
    }
    best.map_or_else(|| UNCLASSIFIED.to_string(), |(t, _)| t.to_string())
}

/// Combines constituents into one cluster scoped at `parent`.
pub fn merge_clusters(
    parts: &[&EventCluster],
    parent: &GeohashKey,
    params: &ScopeParams,
) -> EventCluster {
    let total: u64 = parts.iter().map(|c| c.packet_count).sum();
    let weight = |c: &EventCluster| c.packet_count.max(1) as f64;
    let wsum: f64 = parts.iter().map(|c| weight(c)).sum();
    let lat = parts
        .iter()
        .map(|c| c.centroid.lat * weight(c))
        .sum::<f64>()
        / wsum;
    let lon = parts
        .iter()
        .map(|c| c.centroid.lon * weight(c))
        .sum::<f64>()
        / wsum;
    let centroid_vector: TermVector =
        SparseVector::weighted_mean(parts.iter().map(|c| (&c.centroid_vector, weight(c))));
    let mut members: Vec<_> = parts
        .iter()
        .flat_map(|c| c.members.iter().cloned())
        .collect();
    members.sort_by(|a, b| a.id.cmp(&b.id));
    let mut constituents: Vec<String> = parts.iter().map(|c| c.id.clone()).collect();
    constituents.sort();
    let ids: Vec<&str> = constituents.iter().map(String::as_str).collect();
    let entry = params.scale_map.for_precision(parent.precision());
    EventCluster {
        id: merged_id(&ids),
        event_type: majority_type(parts),
        members,
        packet_count: total,
        centroid: crate::packet::Location { lat, lon },
        label_terms: centroid_vector
            .top_terms(params.label_terms)
            .into_iter()
            .map(|(t, _)| t)
            .collect(),
        centroid_vector,
        cell_key: parent.clone(),
        home: parent.clone(),
        timestamp: parts.iter().map(|c| c.timestamp).max().unwrap_or(0),
        created_at: parts.iter().map(|c| c.created_at).min().unwrap_or(0),
        updated_at: parts.iter().map(|c| c.updated_at).max().unwrap_or(0),
        zoom_start: entry.zoom_start,
        zoom_end: entry.zoom_end,
        visited: false,
        level: ClusterLevel::Merged,
        constituents,
        merged_into: None,
    }
}

/// Finest level at which aggregation starts: no deeper than the scale map
/// distinguishes, so every merge lands on a strictly coarser zoom range.
pub fn start_precision(index: &PyramidIndex, params: &ScopeParams) -> usize {
    index
        .config()
        .max_precision
        .min(params.scale_map.finest_precision())
}

/// Merges root clusters scoped within each precision-`(precision - 1)`
/// parent, including clusters already scoped at the parent itself. Every
/// examined cluster is marked visited; merged groups become new root
/// clusters at the parent.
pub fn aggregate_level(
    index: &mut PyramidIndex,
    precision: usize,
    params: &ScopeParams,
) -> (usize, usize) {
    if precision < 2 {
        return (0, 0);
    }
    let mut groups: BTreeMap<GeohashKey, Vec<&EventCluster>> = BTreeMap::new();
    for c in index
        .eois()
        .iter()
        .filter(|c| c.is_root() && c.precision() + 1 >= precision)
    {
        let parent = c
            .cell_key
            .truncate(precision - 1)
            .expect("coarser than key");
        groups.entry(parent).or_default().push(c);
    }
    let examined: Vec<String> = groups.values().flatten().map(|c| c.id.clone()).collect();
    let merged: Vec<EventCluster> = groups
        .par_iter()
        .flat_map_iter(|(parent, members)| {
            merge_groups(members, params)
                .into_iter()
                .filter(|g| g.len() >= 2)
                .map(|g| {
                    let parts: Vec<&EventCluster> = g.iter().map(|&i| members[i]).collect();
                    merge_clusters(&parts, parent, params)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let formed = merged.len();
    let store = index.eois_mut();
    for id in &examined {
        store.get_mut_with(id, |c| c.visited = true);
    }
    for m in merged {
        for cid in &m.constituents {
            let target = m.id.clone();
            store.get_mut_with(cid, |c| c.merged_into = Some(target));
        }
        store.insert(m);
    }
    (examined.len(), formed)
}

/// Drops previously merged clusters and re-runs aggregation from the finest
/// mapped precision up to one below the coarsest scale.
pub fn run_full_aggregation(index: &mut PyramidIndex, params: &ScopeParams) -> AggregationReport {
    index.clear_merged();
    let mut report = AggregationReport::default();
    let stop = params.scale_map.coarsest_precision();
    let mut p = start_precision(index, params);
    while p > stop {
        let (examined, formed) = aggregate_level(index, p, params);
        report.examined += examined;
        report.levels.push((p - 1, formed));
        p -= 1;
    }
    report
}

/// Root clusters, i.e. those not folded into a coarser one.
pub fn root_eois(index: &PyramidIndex) -> Vec<&EventCluster> {
    index.eois().iter().filter(|c| c.is_root()).collect()
}
