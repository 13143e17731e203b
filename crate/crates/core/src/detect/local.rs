use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{build_similarity_graph, SimilarityGraph};
use super::louvain::louvain;
use crate::eoi::{ClusterLevel, EventCluster, Member, ScaleMap, UNCLASSIFIED, UNSPECIFIED_PREFIX};
use crate::geo::GeohashKey;
use crate::index::PyramidIndex;
use crate::packet::Location;
use crate::text::{
    detect_peaks, tf_idf, ClassCorpus, KeywordBaseline, PeakParams, SparseVector, VocabularyStats,
};
use crate::TermVector;

pub const CLUSTER_NODE_PREFIX: &str = "c:";
pub const PACKET_NODE_PREFIX: &str = "p:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub edge_threshold: f64,
    pub min_cluster_size: usize,
    pub label_terms: usize,
    pub peak: PeakParams,
    /// Keyword baseline half-life, in windows.
    pub baseline_half_life: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            edge_threshold: 0.30,
            min_cluster_size: 3,
            label_terms: 5,
            peak: PeakParams::default(),
            baseline_half_life: 6.0,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.edge_threshold > 0.0 && self.edge_threshold <= 1.0) {
            return Err(format!(
                "edge_threshold {} outside (0, 1]",
                self.edge_threshold
            ));
        }
        if self.min_cluster_size == 0 {
            return Err("min_cluster_size must be positive".into());
        }
        if !self.peak.is_valid() {
            return Err("peak params need min_count >= 1 and ratio_threshold > 1".into());
        }
        if self.baseline_half_life <= 0.0 {
            return Err("baseline_half_life must be positive".into());
        }
        Ok(())
    }
}

/// Changes produced by one leaf's detection pass, applied with [`apply_outcome`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeafOutcome {
    pub leaf: Option<GeohashKey>,
    /// Clusters to insert or replace.
    pub upserts: Vec<EventCluster>,
    /// Prior clusters folded into an older cluster of the same community.
    pub merged_away: Vec<String>,
    /// Prior clusters dropped by the TTL rule.
    pub expired: Vec<String>,
    pub created: usize,
    pub absorbed_packets: usize,
}

/// Live packets of a leaf vectorised against that leaf's own document statistics.
pub struct LeafVectors {
    pub stats: VocabularyStats,
    pub vectors: HashMap<String, TermVector>,
}

pub fn vectorize_leaf(index: &PyramidIndex, leaf: &GeohashKey, window_id: &str) -> LeafVectors {
    let ids: Vec<&String> = index
        .cell(leaf)
        .map(|c| c.packet_ids.iter().collect())
        .unwrap_or_default();
    let terms: Vec<(&String, Vec<String>)> = ids
        .into_iter()
        .filter_map(|id| index.packet(id).map(|p| (id, p.terms())))
        .collect();
    let mut stats = VocabularyStats::new(window_id);
    for (_, t) in &terms {
        stats.add_document(t);
    }
    let vectors = terms
        .into_iter()
        .map(|(id, t)| (id.clone(), tf_idf::<f64, _>(&t, &stats)))
        .collect();
    LeafVectors { stats, vectors }
}

/// Mean of the member vectors that are still live; `None` when no member is.
fn live_centroid(
    index: &PyramidIndex,
    members: &[Member],
    vectors: &LeafVectors,
) -> Option<TermVector> {
    let mut extra: Vec<TermVector> = Vec::new();
    let mut refs: Vec<&TermVector> = Vec::new();
    let mut missing = Vec::new();
    for m in members {
        match vectors.vectors.get(&m.id) {
            Some(v) => refs.push(v),
            None => {
                if let Some(p) = index.packet(&m.id) {
                    missing.push(p.terms());
                }
            }
        }
    }
    for t in missing {
        extra.push(tf_idf(&t, &vectors.stats));
    }
    refs.extend(extra.iter());
    if refs.is_empty() {
        return None;
    }
    Some(SparseVector::weighted_mean(
        refs.into_iter().map(|v| (v, 1.0)),
    ))
}

pub fn cluster_id(member_ids: &[&str]) -> String {
    let mut ids: Vec<&str> = member_ids.to_vec();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    format!("eoi-{}", hex::encode(&h.finalize()[..10]))
}

/// Class from the corpus, else the best peak keyword among the centroid's
/// terms, else the previous unspecified name, else unclassified.
pub fn name_event(
    centroid: &TermVector,
    corpus: &ClassCorpus,
    peaks: &[(String, f64)],
    prior: Option<&str>,
) -> String {
    if let Some((class, _)) = corpus.classify(centroid) {
        return class;
    }
    if let Some((kw, _)) = peaks.iter().find(|(k, _)| centroid.contains(k)) {
        return format!("{UNSPECIFIED_PREFIX}{kw}");
    }
    match prior {
        Some(p) if p.starts_with(UNSPECIFIED_PREFIX) => p.to_string(),
        _ => UNCLASSIFIED.to_string(),
    }
}

/// Recomputes every derived field of a leaf cluster from its members.
#[allow(clippy::too_many_arguments)]
pub fn finalize_cluster(
    mut c: EventCluster,
    centroid_vector: Option<TermVector>,
    corpus: &ClassCorpus,
    peaks: &[(String, f64)],
    scale_map: &ScaleMap,
    max_precision: usize,
    label_terms: usize,
) -> EventCluster {
    c.members.sort_by(|a, b| a.id.cmp(&b.id));
    c.members.dedup_by(|a, b| a.id == b.id);
    c.packet_count = c.members.len() as u64;
    if let Some(loc) = EventCluster::mean_location(&c.members) {
        c.centroid = loc;
    }
    if let Some(v) = centroid_vector {
        c.centroid_vector = v;
    }
    c.timestamp = EventCluster::latest_time(&c.members);
    if let Some(k) = EventCluster::tight_key(&c.members, max_precision) {
        c.cell_key = k;
    }
    let entry = scale_map.for_precision(c.cell_key.precision());
    c.zoom_start = entry.zoom_start;
    c.zoom_end = entry.zoom_end;
    let prior = std::mem::take(&mut c.event_type);
    c.event_type = name_event(&c.centroid_vector, corpus, peaks, Some(&prior));
    c.label_terms = c
        .centroid_vector
        .top_terms(label_terms)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    c
}

/// Per-leaf detection inputs that stay fixed for a window.
pub struct DetectContext<'a> {
    pub corpus: &'a ClassCorpus,
    pub scale_map: &'a ScaleMap,
    pub params: &'a DetectParams,
    pub now: i64,
    pub window_id: &'a str,
}

/// Local event detection for one leaf.
///
/// Prior clusters homed in the leaf and the leaf's unclustered live packets
/// become nodes of a similarity graph, which Louvain partitions. A community
/// holding prior clusters is absorbed by the oldest of them; one without any
/// prior cluster becomes a new cluster when it has at least
/// `min_cluster_size` packets. Clusters with no live member that have not
/// been updated within the cluster TTL are expired first.
pub fn detect_local_events(
    index: &PyramidIndex,
    leaf: &GeohashKey,
    new_packets: &[&str],
    baseline: &mut KeywordBaseline,
    ctx: &DetectContext<'_>,
) -> LeafOutcome {
    let mut out = LeafOutcome {
        leaf: Some(leaf.clone()),
        ..Default::default()
    };
    let max_precision = index.config().max_precision;
    let cluster_cutoff = ctx.now.saturating_sub(index.config().cluster_ttl_ms);
    let vectors = vectorize_leaf(index, leaf, ctx.window_id);

    let mut window_counts: BTreeMap<String, u64> = BTreeMap::new();
    for id in new_packets {
        if let Some(p) = index.packet(id) {
            let terms: BTreeSet<String> = p.terms().into_iter().collect();
            for t in terms {
                *window_counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    let peaks = detect_peaks(&window_counts, baseline, &ctx.params.peak);

    let mut priors: Vec<EventCluster> = Vec::new();
    for c in index.clusters_at(leaf) {
        let live = c.packet_ids().any(|id| index.contains(id));
        if !live && c.updated_at < cluster_cutoff {
            out.expired.push(c.id.clone());
        } else {
            priors.push(c.clone());
        }
    }
    let prior_vectors: Vec<TermVector> = priors
        .iter()
        .map(|c| {
            live_centroid(index, &c.members, &vectors).unwrap_or_else(|| c.centroid_vector.clone())
        })
        .collect();

    let free: Vec<&String> = index
        .cell(leaf)
        .map(|c| {
            c.packet_ids
                .iter()
                .filter(|id| index.cluster_of(id).is_none())
                .collect()
        })
        .unwrap_or_default();

    let mut nodes: Vec<(String, &TermVector)> = Vec::with_capacity(priors.len() + free.len());
    for (c, v) in priors.iter().zip(&prior_vectors) {
        nodes.push((format!("{CLUSTER_NODE_PREFIX}{}", c.id), v));
    }
    for id in &free {
        nodes.push((format!("{PACKET_NODE_PREFIX}{id}"), &vectors.vectors[*id]));
    }
    let graph: SimilarityGraph = build_similarity_graph(&nodes, ctx.params.edge_threshold);
    let partition = louvain(&graph);

    let prior_by_id: HashMap<&str, usize> = priors
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let mut gained: Vec<Vec<&str>> = vec![Vec::new(); priors.len()];
    let mut absorbed_into: Vec<Option<usize>> = vec![None; priors.len()];
    for community in partition.communities() {
        let mut clusters: Vec<usize> = Vec::new();
        let mut packets: Vec<&str> = Vec::new();
        for node in community {
            let name = &graph.ids()[node];
            if let Some(cid) = name.strip_prefix(CLUSTER_NODE_PREFIX) {
                clusters.push(prior_by_id[cid]);
            } else if let Some(pid) = name.strip_prefix(PACKET_NODE_PREFIX) {
                packets.push(pid);
            }
        }
        if clusters.is_empty() {
            if packets.len() >= ctx.params.min_cluster_size {
                let members: Vec<Member> = packets
                    .iter()
                    .filter_map(|id| index.packet(id))
                    .map(Member::from)
                    .collect();
                let first = Location {
                    lat: members[0].lat,
                    lon: members[0].lon,
                };
                let id = cluster_id(&packets);
                let c = EventCluster {
                    id,
                    event_type: UNCLASSIFIED.into(),
                    members,
                    packet_count: 0,
                    centroid: first,
                    centroid_vector: TermVector::zero(),
                    cell_key: leaf.clone(),
                    home: leaf.clone(),
                    timestamp: 0,
                    created_at: ctx.now,
                    updated_at: ctx.now,
                    zoom_start: 0,
                    zoom_end: 0,
                    visited: false,
                    label_terms: Vec::new(),
                    level: ClusterLevel::Leaf,
                    constituents: Vec::new(),
                    merged_into: None,
                };
                let v = live_centroid(index, &c.members, &vectors);
                out.upserts.push(finalize_cluster(
                    c,
                    v,
                    ctx.corpus,
                    &peaks,
                    ctx.scale_map,
                    max_precision,
                    ctx.params.label_terms,
                ));
                out.created += 1;
            }
            continue;
        }
        clusters.sort_by(|&a, &b| {
            priors[a]
                .created_at
                .cmp(&priors[b].created_at)
                .then_with(|| priors[a].id.cmp(&priors[b].id))
        });
        let keeper = clusters[0];
        gained[keeper].extend(packets);
        for &other in &clusters[1..] {
            absorbed_into[other] = Some(keeper);
        }
    }

    let mut extra_members: Vec<Vec<Member>> = vec![Vec::new(); priors.len()];
    for (i, target) in absorbed_into.iter().enumerate() {
        if let Some(k) = target {
            extra_members[*k].extend(priors[i].members.iter().cloned());
            out.merged_away.push(priors[i].id.clone());
        }
    }
    for (i, mut c) in priors.into_iter().enumerate() {
        if absorbed_into[i].is_some() {
            continue;
        }
        let grew = !gained[i].is_empty() || !extra_members[i].is_empty();
        out.absorbed_packets += gained[i].len();
        c.members.extend(
            gained[i]
                .iter()
                .filter_map(|id| index.packet(id))
                .map(Member::from),
        );
        c.members.append(&mut extra_members[i]);
        if grew {
            c.updated_at = ctx.now.max(c.updated_at);
        }
        let v = live_centroid(index, &c.members, &vectors);
        out.upserts.push(finalize_cluster(
            c,
            v,
            ctx.corpus,
            &peaks,
            ctx.scale_map,
            max_precision,
            ctx.params.label_terms,
        ));
    }
    out.upserts.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Writes a leaf outcome into the index.
pub fn apply_outcome(index: &mut PyramidIndex, outcome: LeafOutcome) {
    for id in outcome.expired.iter().chain(&outcome.merged_away) {
        index.remove_cluster(id);
    }
    for c in outcome.upserts {
        index.upsert_cluster(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{IndexConfig, MS_PER_DAY};
    use crate::packet::{ContentType, DataPacket, PacketHeader, PacketPayload};
    use crate::text::tokenize;

    fn packet(id: &str, text: &str, lat: f64, lon: f64, time: i64) -> DataPacket {
        DataPacket {
            id: id.into(),
            header: PacketHeader {
                source: "test".into(),
                location: Location { lat, lon },
                time,
                content_type: ContentType::Text,
            },
            payload: PacketPayload {
                text: text.into(),
                tokens: tokenize(text),
                ..Default::default()
            },
            term_vector: None,
            event_class: None,
        }
    }

    struct Fixture {
        index: PyramidIndex,
        corpus: ClassCorpus,
        scale_map: ScaleMap,
        params: DetectParams,
        baseline: KeywordBaseline,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                index: PyramidIndex::new(IndexConfig::default()),
                corpus: ClassCorpus::builtin(),
                scale_map: ScaleMap::default(),
                params: DetectParams::default(),
                baseline: KeywordBaseline::new(6.0),
            }
        }

        fn window(&mut self, packets: Vec<DataPacket>, now: i64) -> Vec<LeafOutcome> {
            let ids: Vec<String> = packets.iter().map(|p| p.id.clone()).collect();
            for p in packets {
                self.index.insert(p).unwrap();
            }
            let mut leaves: BTreeMap<GeohashKey, Vec<&str>> = BTreeMap::new();
            for id in &ids {
                leaves
                    .entry(self.index.leaf_of_packet(id).unwrap())
                    .or_default()
                    .push(id);
            }
            let ctx = DetectContext {
                corpus: &self.corpus,
                scale_map: &self.scale_map,
                params: &self.params,
                now,
                window_id: "w",
            };
            let outcomes: Vec<LeafOutcome> = leaves
                .iter()
                .map(|(leaf, new)| {
                    detect_local_events(&self.index, leaf, new, &mut self.baseline, &ctx)
                })
                .collect();
            for o in outcomes.clone() {
                apply_outcome(&mut self.index, o);
            }
            outcomes
        }
    }

    fn quake(i: usize, t: i64) -> DataPacket {
        packet(
            &format!("q{i}"),
            "earthquake fire collapse downtown",
            6.45 + i as f64 * 1e-5,
            3.39,
            t,
        )
    }

    #[test]
    fn five_near_duplicates_form_one_disaster_cluster() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        let out = f.window((0..5).map(|i| quake(i, t + i as i64)).collect(), t + 100);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].created, 1);
        let c = &out[0].upserts[0];
        assert_eq!(c.event_type, "disaster");
        assert_eq!(c.packet_count, 5);
        assert_eq!(c.timestamp, t + 4);
        assert!(c.cell_key.bbox().contains(c.centroid.lat, c.centroid.lon));
        assert!(c.zoom_start <= c.zoom_end);
        assert!(c.label_terms.contains(&"earthquake".to_string()));
        assert_eq!(f.index.cluster_of("q3"), Some(c.id.as_str()));
    }

    #[test]
    fn existing_cluster_absorbs_similar_packet() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        f.window((0..5).map(|i| quake(i, t)).collect(), t);
        let id = f.index.eois().ids().next().unwrap().to_string();
        let out = f.window(vec![quake(9, t + 60_000)], t + 60_000);
        assert_eq!(out[0].created, 0);
        assert_eq!(out[0].absorbed_packets, 1);
        let c = f.index.cluster(&id).unwrap();
        assert_eq!(c.packet_count, 6);
        assert_eq!(c.timestamp, t + 60_000);
        assert_eq!(c.updated_at, t + 60_000);
    }

    #[test]
    fn too_small_community_stays_unclustered() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        let out = f.window((0..2).map(|i| quake(i, t)).collect(), t);
        assert!(out[0].upserts.is_empty());
        assert!(f.index.eois().is_empty());
        // A third similar packet later completes the community.
        let out = f.window(vec![quake(5, t + 1)], t + 1);
        assert_eq!(out[0].created, 1);
        assert_eq!(out[0].upserts[0].packet_count, 3);
    }

    #[test]
    fn unrelated_topics_make_separate_clusters() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        let mut ps: Vec<DataPacket> = (0..4).map(|i| quake(i, t)).collect();
        for i in 0..4 {
            ps.push(packet(
                &format!("m{i}"),
                "concert band music festival stage",
                6.45,
                3.39 + i as f64 * 1e-5,
                t,
            ));
        }
        let out = f.window(ps, t);
        assert_eq!(out[0].created, 2);
        let mut types: Vec<&str> = out[0]
            .upserts
            .iter()
            .map(|c| c.event_type.as_str())
            .collect();
        types.sort();
        assert_eq!(types, vec!["disaster", "musical"]);
    }

    #[test]
    fn expired_cluster_removed() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        f.window((0..5).map(|i| quake(i, t)).collect(), t);
        let now = t + f.index.config().cluster_ttl_ms + MS_PER_DAY;
        f.index.evict_expired(now);
        assert!(f.index.eois().is_empty());
    }

    #[test]
    fn deterministic_ids() {
        let run = || {
            let mut f = Fixture::new();
            let t = 10 * MS_PER_DAY;
            f.window((0..6).map(|i| quake(i, t)).collect(), t);
            f.index.eois().iter().cloned().collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn peak_names_unclassified_topics() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        let ps: Vec<DataPacket> = (0..12)
            .map(|i| {
                packet(
                    &format!("b{i}"),
                    "carolines broadway video premiere",
                    6.45,
                    3.39 + i as f64 * 1e-6,
                    t,
                )
            })
            .collect();
        let out = f.window(ps, t);
        assert_eq!(out[0].upserts.len(), 1);
        assert!(
            out[0].upserts[0].event_type.starts_with(UNSPECIFIED_PREFIX),
            "{}",
            out[0].upserts[0].event_type
        );
    }

    #[test]
    fn two_priors_in_one_community_keep_older_id() {
        let mut f = Fixture::new();
        let t = 10 * MS_PER_DAY;
        f.window((0..3).map(|i| quake(i, t)).collect(), t);
        let old = f.index.eois().ids().next().unwrap().to_string();
        // A second cluster of the same topic, injected directly with a later creation time.
        let mut second = f.index.cluster(&old).unwrap().clone();
        second.id = "eoi-later".into();
        second.created_at = t + 5;
        second.members.clear();
        for i in 10..13 {
            let p = quake(i, t + 5);
            second.members.push(Member::from(&p));
            f.index.insert(p).unwrap();
        }
        f.index.upsert_cluster(second);
        let out = f.window(vec![quake(20, t + 10)], t + 10);
        assert_eq!(out[0].merged_away, vec!["eoi-later".to_string()]);
        let c = f.index.cluster(&old).unwrap();
        assert_eq!(c.packet_count, 7);
        assert!(f.index.cluster("eoi-later").is_none());
    }
}
