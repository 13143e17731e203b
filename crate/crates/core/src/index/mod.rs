//! Multi-resolution geohash pyramid.
//!
//! Cells are addressed by geohash prefix. A leaf keeps the ids of the packets
//! it covers; once a leaf reaches `split_threshold` packets (and is coarser
//! than `max_precision`) it subdivides and hands its packets down to the 32-way
//! children. Interior cells only carry subtree counts, so dense areas end up
//! deeper in the tree than sparse ones. Packets are also bucketed by UTC day
//! for TTL eviction and snapshot partitioning.

pub mod snapshot;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use store::EoiStore;

use crate::eoi::{ClusterLevel, EventCluster};
use crate::geo::{geohash_encode, BBox, GeohashKey};
use crate::packet::DataPacket;

pub const MS_PER_DAY: i64 = 86_400_000;
pub const MS_PER_HOUR: i64 = 3_600_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub max_precision: usize,
    pub split_threshold: usize,
    pub packet_ttl_ms: i64,
    pub cluster_ttl_ms: i64,
    /// Spill-to-disk trigger on resident packet count. Not acted on; eviction is temporal only.
    pub memory_spill_packets: Option<usize>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            max_precision: 8,
            split_threshold: 500,
            packet_ttl_ms: 24 * MS_PER_HOUR,
            cluster_ttl_ms: 7 * MS_PER_DAY,
            memory_spill_packets: None,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=crate::geo::MAX_ENCODE_PRECISION).contains(&self.max_precision) {
            return Err(format!(
                "max_precision {} out of 1..=12",
                self.max_precision
            ));
        }
        if self.split_threshold == 0 {
            return Err("split_threshold must be positive".into());
        }
        if self.packet_ttl_ms <= 0 || self.cluster_ttl_ms <= 0 {
            return Err("ttls must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: GeohashKey,
    /// Direct packets; empty once subdivided.
    pub packet_ids: BTreeSet<String>,
    /// Live packets in the whole subtree.
    pub packet_count: usize,
    /// Leaf clusters owned by this cell.
    pub clusters: BTreeSet<String>,
    pub subdivided: bool,
    pub last_touched: i64,
}

impl Cell {
    fn new(key: GeohashKey) -> Self {
        Cell {
            key,
            packet_ids: BTreeSet::new(),
            packet_count: 0,
            clusters: BTreeSet::new(),
            subdivided: false,
            last_touched: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        !self.subdivided
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stored {
    packet: DataPacket,
    /// Geohash of the packet location at `max_precision`.
    key: GeohashKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub key: GeohashKey,
    pub count: usize,
}

/// Inclusive millisecond interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub from: i64,
    pub to: i64,
}

impl TimeRange {
    pub const ALL: TimeRange = TimeRange {
        from: i64::MIN,
        to: i64::MAX,
    };

    pub fn new(from: i64, to: i64) -> Option<Self> {
        (from <= to).then_some(TimeRange { from, to })
    }

    pub fn contains(&self, t: i64) -> bool {
        self.from <= t && t <= self.to
    }

    pub fn overlaps(&self, other: &TimeRange) -> bool {
        self.from <= other.to && other.from <= self.to
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvictionReport {
    pub packets: Vec<String>,
    pub clusters: Vec<String>,
}

pub fn day_of(ms: i64) -> i64 {
    ms.div_euclid(MS_PER_DAY)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PyramidIndex {
    config: IndexConfig,
    cells: BTreeMap<GeohashKey, Cell>,
    packets: HashMap<String, Stored>,
    days: BTreeMap<i64, BTreeSet<String>>,
    eois: EoiStore,
    packet_cluster: HashMap<String, String>,
}

impl PyramidIndex {
    pub fn new(config: IndexConfig) -> Self {
        PyramidIndex {
            config,
            cells: BTreeMap::new(),
            packets: HashMap::new(),
            days: BTreeMap::new(),
            eois: EoiStore::new(),
            packet_cluster: HashMap::new(),
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.packets.contains_key(id)
    }

    pub fn packet(&self, id: &str) -> Option<&DataPacket> {
        self.packets.get(id).map(|s| &s.packet)
    }

    pub fn packets(&self) -> impl Iterator<Item = &DataPacket> {
        self.packets.values().map(|s| &s.packet)
    }

    pub fn cell(&self, key: &GeohashKey) -> Option<&Cell> {
        self.cells.get(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.values()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Cell> {
        self.cells.values().filter(|c| c.is_leaf())
    }

    pub fn days(&self) -> impl Iterator<Item = i64> + '_ {
        self.days.keys().copied()
    }

    pub fn packets_on_day(&self, day: i64) -> impl Iterator<Item = &DataPacket> {
        self.days
            .get(&day)
            .into_iter()
            .flatten()
            .filter_map(|id| self.packet(id))
    }

    /// Stores the packet in the leaf covering it, splitting full leaves.
    /// Returns the leaf that holds it afterwards. A packet whose id is already
    /// present is not stored twice.
    pub fn insert(&mut self, packet: DataPacket) -> Result<GeohashKey, crate::error::GeoError> {
        let key = geohash_encode(packet.lat(), packet.lon(), self.config.max_precision)?;
        if let Some(existing) = self.packets.get(&packet.id) {
            return Ok(self.leaf_for(&existing.key.clone()));
        }
        let id = packet.id.clone();
        let time = packet.time();
        self.days
            .entry(day_of(time))
            .or_default()
            .insert(id.clone());
        self.packets.insert(
            id.clone(),
            Stored {
                packet,
                key: key.clone(),
            },
        );

        let mut full_leaf = None;
        for p in 1..=self.config.max_precision {
            let k = key.truncate(p).expect("precision within key");
            let cell = self
                .cells
                .entry(k.clone())
                .or_insert_with(|| Cell::new(k.clone()));
            cell.packet_count += 1;
            cell.last_touched = cell.last_touched.max(time);
            if !cell.subdivided {
                cell.packet_ids.insert(id.clone());
                if cell.packet_count >= self.config.split_threshold && p < self.config.max_precision
                {
                    full_leaf = Some(k);
                }
                break;
            }
        }
        if let Some(k) = full_leaf {
            self.split(&k);
        }
        Ok(self.leaf_for(&key))
    }

    fn split(&mut self, key: &GeohashKey) {
        let p = key.precision();
        let (ids, homed) = {
            let cell = self.cells.get_mut(key).expect("split existing cell");
            cell.subdivided = true;
            (
                std::mem::take(&mut cell.packet_ids),
                std::mem::take(&mut cell.clusters),
            )
        };
        let mut touched = BTreeSet::new();
        for id in ids {
            let stored = &self.packets[&id];
            let ck = stored
                .key
                .truncate(p + 1)
                .expect("child precision within key");
            let t = stored.packet.time();
            let child = self
                .cells
                .entry(ck.clone())
                .or_insert_with(|| Cell::new(ck.clone()));
            child.packet_count += 1;
            child.last_touched = child.last_touched.max(t);
            child.packet_ids.insert(id);
            touched.insert(ck);
        }
        for cid in homed {
            let Some(c) = self.eois.get(&cid) else {
                continue;
            };
            let Ok(ck) = geohash_encode(c.centroid.lat, c.centroid.lon, p + 1) else {
                continue;
            };
            self.cells
                .entry(ck.clone())
                .or_insert_with(|| Cell::new(ck.clone()))
                .clusters
                .insert(cid.clone());
            self.eois.get_mut_with(&cid, |c| c.home = ck);
        }
        if p + 1 < self.config.max_precision {
            for ck in touched {
                if self.cells[&ck].packet_count >= self.config.split_threshold {
                    self.split(&ck);
                }
            }
        }
    }

    /// Leaf currently covering a full-precision key (the cell may not exist yet if empty).
    pub fn leaf_for(&self, key: &GeohashKey) -> GeohashKey {
        for p in 1..=key.precision() {
            let k = key.truncate(p).expect("within key");
            match self.cells.get(&k) {
                Some(c) if c.subdivided => continue,
                _ => return k,
            }
        }
        key.clone()
    }

    pub fn leaf_of_packet(&self, id: &str) -> Option<GeohashKey> {
        self.packets.get(id).map(|s| self.leaf_for(&s.key))
    }

    pub fn packet_key(&self, id: &str) -> Option<&GeohashKey> {
        self.packets.get(id).map(|s| &s.key)
    }

    fn remove_packet(&mut self, id: &str) -> Option<DataPacket> {
        let stored = self.packets.remove(id)?;
        if let Some(day) = self.days.get_mut(&day_of(stored.packet.time())) {
            day.remove(id);
            if day.is_empty() {
                self.days.remove(&day_of(stored.packet.time()));
            }
        }
        for p in 1..=self.config.max_precision {
            let k = stored.key.truncate(p).expect("within key");
            let Some(cell) = self.cells.get_mut(&k) else {
                break;
            };
            cell.packet_count = cell.packet_count.saturating_sub(1);
            if !cell.subdivided {
                cell.packet_ids.remove(id);
                break;
            }
        }
        self.packet_cluster.remove(id);
        Some(stored.packet)
    }

    /// Drops packets older than `now - packet_ttl` and clusters that have no live
    /// member and were last updated before `now - cluster_ttl`.
    pub fn evict_expired(&mut self, now: i64) -> usize {
        self.evict_expired_report(now).packets.len()
    }

    pub fn evict_expired_report(&mut self, now: i64) -> EvictionReport {
        let cutoff = now.saturating_sub(self.config.packet_ttl_ms);
        let stale_days: Vec<i64> = self
            .days
            .range(..=day_of(cutoff))
            .map(|(d, _)| *d)
            .collect();
        let mut evicted = Vec::new();
        for d in stale_days {
            let ids: Vec<String> = self.days[&d].iter().cloned().collect();
            for id in ids {
                if self.packets[&id].packet.time() < cutoff {
                    self.remove_packet(&id);
                    evicted.push(id);
                }
            }
        }
        let cluster_cutoff = now.saturating_sub(self.config.cluster_ttl_ms);
        let expired: Vec<String> = self
            .eois
            .iter()
            .filter(|c| c.level == ClusterLevel::Leaf)
            .filter(|c| {
                c.updated_at < cluster_cutoff
                    && !c.packet_ids().any(|id| self.packets.contains_key(id))
            })
            .map(|c| c.id.clone())
            .collect();
        for id in &expired {
            self.remove_cluster(id);
        }
        EvictionReport {
            packets: evicted,
            clusters: expired,
        }
    }

    /// Ids of live packets inside `bbox` and `time`, sorted.
    pub fn range_query(&self, bbox: &BBox, time: &TimeRange) -> Vec<String> {
        let mut out = Vec::new();
        for root in GeohashKey::roots() {
            self.collect(&root, bbox, time, &mut out);
        }
        out.sort();
        out
    }

    fn collect(&self, key: &GeohashKey, bbox: &BBox, time: &TimeRange, out: &mut Vec<String>) {
        let Some(cell) = self.cells.get(key) else {
            return;
        };
        if cell.packet_count == 0 {
            return;
        }
        let cb = key.bbox();
        if !cb.intersects(bbox) {
            return;
        }
        let inside = bbox.contains_bbox(&cb);
        if cell.subdivided {
            for child in key.children() {
                self.collect(&child, bbox, time, out);
            }
            return;
        }
        for id in &cell.packet_ids {
            let p = &self.packets[id].packet;
            if time.contains(p.time()) && (inside || bbox.contains(p.lat(), p.lon())) {
                out.push(id.clone());
            }
        }
    }

    /// Per-cell counts of matching packets grouped at `precision`.
    pub fn cell_aggregates(
        &self,
        bbox: &BBox,
        time: &TimeRange,
        precision: usize,
    ) -> Vec<CellAggregate> {
        let precision = precision.clamp(1, self.config.max_precision);
        let mut counts: BTreeMap<GeohashKey, usize> = BTreeMap::new();
        for id in self.range_query(bbox, time) {
            let k = self.packets[&id]
                .key
                .truncate(precision)
                .expect("within key");
            *counts.entry(k).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .map(|(key, count)| CellAggregate { key, count })
            .collect()
    }

    // ---- clusters ----

    pub fn eois(&self) -> &EoiStore {
        &self.eois
    }

    pub fn cluster(&self, id: &str) -> Option<&EventCluster> {
        self.eois.get(id)
    }

    pub fn cluster_of(&self, packet_id: &str) -> Option<&str> {
        self.packet_cluster.get(packet_id).map(String::as_str)
    }

    /// Leaf clusters owned by a cell.
    pub fn clusters_at(&self, key: &GeohashKey) -> Vec<&EventCluster> {
        self.cells
            .get(key)
            .into_iter()
            .flat_map(|c| c.clusters.iter())
            .filter_map(|id| self.eois.get(id))
            .collect()
    }

    /// Inserts or replaces a cluster, keeping the packet→cluster map and cell
    /// ownership in step for leaf clusters.
    pub fn upsert_cluster(&mut self, cluster: EventCluster) {
        self.remove_cluster(&cluster.id);
        if cluster.level == ClusterLevel::Leaf {
            for id in cluster.packet_ids() {
                if self.packets.contains_key(id) {
                    self.packet_cluster
                        .insert(id.to_owned(), cluster.id.clone());
                }
            }
            let home = cluster.home.clone();
            self.cells
                .entry(home.clone())
                .or_insert_with(|| Cell::new(home))
                .clusters
                .insert(cluster.id.clone());
        }
        self.eois.insert(cluster);
    }

    pub fn remove_cluster(&mut self, id: &str) -> Option<EventCluster> {
        let c = self.eois.remove(id)?;
        if c.level == ClusterLevel::Leaf {
            for pid in c.packet_ids() {
                if self.packet_cluster.get(pid).map(String::as_str) == Some(id) {
                    self.packet_cluster.remove(pid);
                }
            }
            if let Some(cell) = self.cells.get_mut(&c.home) {
                cell.clusters.remove(id);
            }
        }
        Some(c)
    }

    /// Removes every merged cluster and clears lineage on leaf clusters.
    pub fn clear_merged(&mut self) {
        let merged: Vec<String> = self
            .eois
            .iter()
            .filter(|c| c.level == ClusterLevel::Merged)
            .map(|c| c.id.clone())
            .collect();
        for id in merged {
            self.eois.remove(&id);
        }
        let leaves: Vec<String> = self.eois.ids().map(str::to_owned).collect();
        for id in leaves {
            self.eois.get_mut_with(&id, |c| {
                c.merged_into = None;
                c.visited = false;
            });
        }
    }

    pub fn eois_mut(&mut self) -> &mut EoiStore {
        &mut self.eois
    }

    /// Checks subtree counts against leaf contents; returns the first mismatch.
    pub fn check_counts(&self) -> Result<(), String> {
        for cell in self.cells.values() {
            let expected = if cell.subdivided {
                cell.key
                    .children()
                    .iter()
                    .filter_map(|k| self.cells.get(k))
                    .map(|c| c.packet_count)
                    .sum()
            } else {
                if cell.packet_ids.len() != cell.packet_count {
                    return Err(format!(
                        "leaf {} holds {} ids but counts {}",
                        cell.key,
                        cell.packet_ids.len(),
                        cell.packet_count
                    ));
                }
                cell.packet_count
            };
            if expected != cell.packet_count {
                return Err(format!(
                    "cell {} counts {} but children sum to {}",
                    cell.key, cell.packet_count, expected
                ));
            }
        }
        let roots: usize = self
            .cells
            .values()
            .filter(|c| c.key.precision() == 1)
            .map(|c| c.packet_count)
            .sum();
        if roots != self.packets.len() {
            return Err(format!(
                "roots count {} packets but {} are stored",
                roots,
                self.packets.len()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::packet::{ContentType, DataPacket, Location, PacketHeader, PacketPayload};

    pub fn pkt(id: &str, lat: f64, lon: f64, time: i64) -> DataPacket {
        DataPacket {
            id: id.into(),
            header: PacketHeader {
                source: "test".into(),
                location: Location { lat, lon },
                time,
                content_type: ContentType::Text,
            },
            payload: PacketPayload {
                text: "x".into(),
                ..Default::default()
            },
            term_vector: None,
            event_class: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::pkt;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(split: usize) -> IndexConfig {
        IndexConfig {
            split_threshold: split,
            ..Default::default()
        }
    }

    #[test]
    fn single_insert() {
        let mut idx = PyramidIndex::new(cfg(1000));
        let leaf = idx.insert(pkt("a", 40.78, -73.96, 10)).unwrap();
        let full = geohash_encode(40.78, -73.96, 8).unwrap();
        assert!(leaf.is_ancestor_of(&full));
        assert_eq!(idx.cell(&leaf).unwrap().packet_count, 1);
        idx.check_counts().unwrap();
    }

    #[test]
    fn leaf_splits_at_threshold() {
        let mut idx = PyramidIndex::new(cfg(10));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Inside precision-5 cell "dr5ru" the tree splits down from the root.
        let bb = GeohashKey::new("dr5ru").unwrap().bbox();
        for i in 0..10 {
            let lat = rng.gen_range(bb.min_lat..bb.max_lat);
            let lon = rng.gen_range(bb.min_lon..bb.max_lon);
            idx.insert(pkt(&i.to_string(), lat, lon, 1)).unwrap();
        }
        let c5 = idx.cell(&GeohashKey::new("dr5ru").unwrap()).unwrap();
        assert!(c5.subdivided);
        let children: usize = c5
            .key
            .children()
            .iter()
            .filter_map(|k| idx.cell(k))
            .map(|c| c.packet_count)
            .sum();
        assert_eq!(children, 10);
        idx.check_counts().unwrap();
    }

    #[test]
    fn far_apart_packets_get_distinct_leaves() {
        let mut idx = PyramidIndex::new(cfg(1));
        let a = idx.insert(pkt("a", 40.78, -73.96, 1)).unwrap();
        let b = idx.insert(pkt("b", 40.78, -72.78, 1)).unwrap(); // ~100 km east
        let a = idx.leaf_of_packet("a").unwrap_or(a);
        assert_ne!(a, b);
        assert!(a.precision() >= 3 && b.precision() >= 3);
    }

    #[test]
    fn duplicate_ids_stored_once() {
        let mut idx = PyramidIndex::new(cfg(100));
        idx.insert(pkt("a", 1.0, 1.0, 1)).unwrap();
        idx.insert(pkt("a", 1.0, 1.0, 1)).unwrap();
        assert_eq!(idx.len(), 1);
        idx.check_counts().unwrap();
    }

    #[test]
    fn eviction_cases() {
        let day = MS_PER_DAY;
        let mut idx = PyramidIndex::new(cfg(3));
        for i in 0..5 {
            idx.insert(pkt(&format!("old{i}"), 10.0 + i as f64 * 1e-4, 10.0, day))
                .unwrap();
            idx.insert(pkt(
                &format!("new{i}"),
                10.0 + i as f64 * 1e-4,
                10.0,
                3 * day,
            ))
            .unwrap();
        }
        assert_eq!(idx.evict_expired(2 * day), 0);
        assert_eq!(idx.len(), 10);
        assert_eq!(idx.evict_expired(2 * day + 1), 5);
        let cutoff = 2 * day + 1 - idx.config().packet_ttl_ms;
        assert!(idx.packets().all(|p| p.time() >= cutoff));
        assert!(idx.packets().all(|p| p.id.starts_with("new")));
        idx.check_counts().unwrap();
        assert_eq!(idx.evict_expired(10 * day), 5);
        assert!(idx.is_empty());
        idx.check_counts().unwrap();
    }

    #[test]
    fn range_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut idx = PyramidIndex::new(cfg(20));
        let mut all = Vec::new();
        for i in 0..1000 {
            let p = pkt(
                &format!("p{i}"),
                rng.gen_range(6.0..7.5),
                rng.gen_range(3.0..4.5),
                rng.gen_range(1..1000),
            );
            all.push(p.clone());
            idx.insert(p).unwrap();
        }
        idx.check_counts().unwrap();
        for _ in 0..50 {
            let (a, b): (f64, f64) = (rng.gen_range(5.9..7.6), rng.gen_range(5.9..7.6));
            let (c, d): (f64, f64) = (rng.gen_range(2.9..4.6), rng.gen_range(2.9..4.6));
            let bbox = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap();
            let (t1, t2) = (rng.gen_range(0..1000), rng.gen_range(0..1000));
            let tr = TimeRange::new(t1.min(t2), t1.max(t2)).unwrap();
            let mut expect: Vec<String> = all
                .iter()
                .filter(|p| bbox.contains(p.lat(), p.lon()) && tr.contains(p.time()))
                .map(|p| p.id.clone())
                .collect();
            expect.sort();
            assert_eq!(idx.range_query(&bbox, &tr), expect);
        }
        assert_eq!(idx.range_query(&BBox::WORLD, &TimeRange::ALL).len(), 1000);
        let empty = BBox::new(-50.0, -50.0, -40.0, -40.0).unwrap();
        assert!(idx.range_query(&empty, &TimeRange::ALL).is_empty());
        let agg = idx.cell_aggregates(&BBox::WORLD, &TimeRange::ALL, 3);
        assert_eq!(agg.iter().map(|a| a.count).sum::<usize>(), 1000);
        assert!(agg.iter().all(|a| a.key.precision() == 3));
    }
}
