//! Windowed batch pipeline: wrap → index → detect → aggregate → publish.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::detect::{apply_outcome, detect_local_events, DetectContext, DetectParams, LeafOutcome};
use crate::eoi::EventCluster;
use crate::error::{SnapshotError, WrapError};
use crate::geo::GeohashKey;
use crate::index::snapshot::{date_of_ms, SnapshotStore};
use crate::index::{EoiStore, IndexConfig, PyramidIndex, MS_PER_HOUR};
use crate::packet::{
    parse_record_line, validate, AdapterRegistry, DataPacket, RawRecord, SourceAdapterSpec,
};
use crate::query::PlanContext;
use crate::scope::{run_full_aggregation, ScopeParams};
use crate::text::{ClassCorpus, KeywordBaseline, DEFAULT_CLASS_THRESHOLD};

pub const DROP_DUPLICATE: &str = "duplicate";
pub const DROP_INVALID: &str = "invalid_packet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub window_ms: i64,
    pub index: IndexConfig,
    pub detect: DetectParams,
    pub scope: ScopeParams,
    pub class_threshold: f64,
    /// Class corpus file; the built-in nine classes when absent.
    pub corpus_file: Option<PathBuf>,
    /// Extra `[[adapter]]` definitions added to the built-in ones.
    pub adapters_file: Option<PathBuf>,
    /// Snapshot root; nothing is persisted when absent.
    pub data_dir: Option<PathBuf>,
    pub listen: String,
    /// Records the ingest queue holds before rejecting more.
    pub ingest_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_ms: MS_PER_HOUR / 2,
            index: IndexConfig::default(),
            detect: DetectParams::default(),
            scope: ScopeParams::default(),
            class_threshold: DEFAULT_CLASS_THRESHOLD,
            corpus_file: None,
            adapters_file: None,
            data_dir: None,
            listen: "127.0.0.1:8080".into(),
            ingest_cap: 200_000,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(doc: &str) -> Result<Self, String> {
        let c: PipelineConfig = toml::from_str(doc).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window_ms <= 0 {
            return Err("window_ms must be positive".into());
        }
        if !(self.class_threshold > 0.0 && self.class_threshold <= 1.0) {
            return Err(format!(
                "class_threshold {} outside (0, 1]",
                self.class_threshold
            ));
        }
        if self.ingest_cap == 0 {
            return Err("ingest_cap must be positive".into());
        }
        self.index.validate()?;
        self.detect.validate()?;
        self.scope.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub window: u64,
    pub now: i64,
    pub ingested: u64,
    pub indexed: u64,
    pub dropped: BTreeMap<String, u64>,
    pub touched_leaves: usize,
    pub clusters_created: usize,
    /// Prior clusters folded into an older one during local detection.
    pub clusters_absorbed: usize,
    /// Parent-level clusters formed by scope aggregation.
    pub clusters_merged: usize,
    pub clusters_expired: usize,
    pub packets_evicted: usize,
    pub live_packets: usize,
    pub eois: usize,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persist_error: Option<String>,
}

impl PipelineStats {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.ingested == self.indexed + self.dropped_total()
    }

    fn drop(&mut self, reason: &str) {
        *self.dropped.entry(reason.to_string()).or_insert(0) += 1;
    }

    /// Sums counts over several windows; `window` and `now` come from the last.
    pub fn accumulate(&mut self, w: &PipelineStats) {
        self.window = w.window;
        self.now = w.now;
        self.ingested += w.ingested;
        self.indexed += w.indexed;
        for (k, v) in &w.dropped {
            *self.dropped.entry(k.clone()).or_insert(0) += v;
        }
        self.touched_leaves += w.touched_leaves;
        self.clusters_created += w.clusters_created;
        self.clusters_absorbed += w.clusters_absorbed;
        self.clusters_merged += w.clusters_merged;
        self.clusters_expired += w.clusters_expired;
        self.packets_evicted += w.packets_evicted;
        self.live_packets = w.live_packets;
        self.eois = w.eois;
        self.duration_ms += w.duration_ms;
        if w.persist_error.is_some() {
            self.persist_error = w.persist_error.clone();
        }
    }
}

/// Immutable view handed to readers after each window.
#[derive(Clone, Debug, Default)]
pub struct Published {
    pub version: u64,
    pub now: i64,
    pub memory_from: i64,
    pub eois: EoiStore,
    pub live_packets: usize,
    pub available_days: BTreeSet<NaiveDate>,
    pub last_stats: Option<PipelineStats>,
}

impl Published {
    pub fn plan_context(&self, scope: &ScopeParams, max_cover_cells: usize) -> PlanContext {
        PlanContext {
            now: self.now,
            memory_from: self.memory_from,
            available_days: self.available_days.clone(),
            scale_map: scope.scale_map.clone(),
            max_cover_cells,
        }
    }
}

pub struct Engine {
    config: PipelineConfig,
    registry: AdapterRegistry,
    corpus: ClassCorpus,
    index: PyramidIndex,
    baselines: HashMap<GeohashKey, KeywordBaseline>,
    snapshots: Option<SnapshotStore>,
    open_days: BTreeSet<NaiveDate>,
    eoi_days: BTreeSet<NaiveDate>,
    rewritten_days: Vec<NaiveDate>,
    windows: u64,
    now: i64,
    published: Arc<Published>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Adapter(#[from] crate::error::AdapterError),
    #[error(transparent)]
    Corpus(#[from] crate::error::CorpusError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Engine {
    pub fn new(config: PipelineConfig) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Config)?;
        let mut registry = AdapterRegistry::with_builtins();
        if let Some(path) = &config.adapters_file {
            for spec in SourceAdapterSpec::load_toml(&std::fs::read_to_string(path)?)? {
                registry.register(spec)?;
            }
        }
        let corpus = match &config.corpus_file {
            Some(path) => {
                ClassCorpus::parse(&std::fs::read_to_string(path)?, config.class_threshold)?
            }
            None => ClassCorpus::parse(
                crate::text::classify::BUILTIN_CORPUS,
                config.class_threshold,
            )?,
        };
        let snapshots = match &config.data_dir {
            Some(dir) => Some(SnapshotStore::open(dir)?),
            None => None,
        };
        let available_days = match &snapshots {
            Some(s) => s.available_days()?,
            None => BTreeSet::new(),
        };
        Ok(Engine {
            index: PyramidIndex::new(config.index.clone()),
            registry,
            corpus,
            baselines: HashMap::new(),
            snapshots,
            open_days: BTreeSet::new(),
            eoi_days: BTreeSet::new(),
            rewritten_days: Vec::new(),
            windows: 0,
            now: 0,
            published: Arc::new(Published {
                available_days,
                ..Default::default()
            }),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn registry(&self) -> &AdapterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut AdapterRegistry {
        &mut self.registry
    }

    pub fn corpus(&self) -> &ClassCorpus {
        &self.corpus
    }

    pub fn index(&self) -> &PyramidIndex {
        &self.index
    }

    pub fn now(&self) -> i64 {
        self.now
    }

    pub fn published(&self) -> Arc<Published> {
        self.published.clone()
    }

    pub fn snapshots(&self) -> Option<&SnapshotStore> {
        self.snapshots.as_ref()
    }

    /// Days whose EoI files the last window rewrote.
    pub fn rewritten_days(&self) -> &[NaiveDate] {
        &self.rewritten_days
    }

    /// Parses ingestion lines and runs them as one window. Unparseable lines
    /// are dropped and counted.
    pub fn run_window_lines<S: AsRef<str>>(
        &mut self,
        lines: &[S],
        now: Option<i64>,
    ) -> PipelineStats {
        let received = now.unwrap_or(self.now);
        let mut pre = PipelineStats::default();
        let mut records = Vec::with_capacity(lines.len());
        for line in lines {
            let line = line.as_ref();
            if line.trim().is_empty() {
                continue;
            }
            if let Err(e) = parse_record_line(line, received).map(|r| records.push(r)) {
                pre.ingested += 1;
                pre.drop(e.reason());
            }
        }
        self.run(records, pre, now)
    }

    /// Processes one window of raw records. `now` is the window's clock; when
    /// absent the clock follows the newest packet time seen.
    pub fn run_window(&mut self, records: Vec<RawRecord>, now: Option<i64>) -> PipelineStats {
        self.run(records, PipelineStats::default(), now)
    }

    /// Like [`Engine::run_window`], for records that were screened upstream;
    /// `dropped` holds the reasons for the ones already rejected there.
    pub fn run_window_screened(
        &mut self,
        records: Vec<RawRecord>,
        dropped: &BTreeMap<String, u64>,
        now: Option<i64>,
    ) -> PipelineStats {
        let pre = PipelineStats {
            ingested: dropped.values().sum(),
            dropped: dropped.clone(),
            ..Default::default()
        };
        self.run(records, pre, now)
    }

    fn run(
        &mut self,
        records: Vec<RawRecord>,
        mut stats: PipelineStats,
        now: Option<i64>,
    ) -> PipelineStats {
        let started = Instant::now();
        self.windows += 1;
        stats.window = self.windows;
        stats.ingested += records.len() as u64;

        let wrapped: Vec<Result<DataPacket, &'static str>> = records
            .par_iter()
            .map(|r| {
                let p = self.registry.wrap(r).map_err(|e: WrapError| e.reason())?;
                if validate(&p).is_empty() {
                    Ok(p)
                } else {
                    Err(DROP_INVALID)
                }
            })
            .collect();
        let mut packets = Vec::with_capacity(wrapped.len());
        for w in wrapped {
            match w {
                Ok(p) => packets.push(p),
                Err(reason) => stats.drop(reason),
            }
        }
        packets.sort_by(|a, b| a.time().cmp(&b.time()).then_with(|| a.id.cmp(&b.id)));
        let newest = packets.iter().map(|p| p.time()).max().unwrap_or(i64::MIN);
        self.now = self
            .now
            .max(now.unwrap_or(newest))
            .max(now.unwrap_or(i64::MIN));
        let now = self.now;

        let mut new_ids: Vec<String> = Vec::with_capacity(packets.len());
        let mut new_packets: Vec<DataPacket> = Vec::new();
        for p in packets {
            if self.index.contains(&p.id) {
                stats.drop(DROP_DUPLICATE);
                continue;
            }
            match self.index.insert(p.clone()) {
                Ok(_) => {
                    new_ids.push(p.id.clone());
                    if self.snapshots.is_some() {
                        new_packets.push(p);
                    }
                }
                Err(_) => stats.drop(DROP_INVALID),
            }
        }
        stats.indexed = new_ids.len() as u64;

        let eviction = self.index.evict_expired_report(now);
        stats.packets_evicted = eviction.packets.len();
        stats.clusters_expired = eviction.clusters.len();

        if !new_ids.is_empty() {
            self.detect(&new_ids, now, &mut stats);
            let report = run_full_aggregation(&mut self.index, &self.config.scope);
            stats.clusters_merged = report.merged();
        }

        stats.now = now;
        stats.live_packets = self.index.len();
        stats.eois = self.index.eois().len();

        let changed =
            !new_ids.is_empty() || !eviction.packets.is_empty() || !eviction.clusters.is_empty();
        if self.snapshots.is_some() && changed {
            if let Err(e) = self.persist(&new_packets, now) {
                warn!(error = %e, "snapshot write failed");
                stats.persist_error = Some(e.to_string());
            }
        }
        stats.duration_ms = started.elapsed().as_secs_f64() * 1e3;
        if changed {
            self.publish(&stats);
        }
        info!(
            window = stats.window,
            ingested = stats.ingested,
            indexed = stats.indexed,
            dropped = stats.dropped_total(),
            created = stats.clusters_created,
            merged = stats.clusters_merged,
            expired = stats.clusters_expired,
            evicted = stats.packets_evicted,
            eois = stats.eois,
            duration_ms = stats.duration_ms,
            "window processed"
        );
        stats
    }

    fn baseline_for(&self, leaf: &GeohashKey) -> KeywordBaseline {
        let mut k = Some(leaf.clone());
        while let Some(key) = k {
            if let Some(b) = self.baselines.get(&key) {
                return b.clone();
            }
            k = key.parent();
        }
        KeywordBaseline::new(self.config.detect.baseline_half_life)
    }

    fn detect(&mut self, new_ids: &[String], now: i64, stats: &mut PipelineStats) {
        let mut by_leaf: BTreeMap<GeohashKey, Vec<&str>> = BTreeMap::new();
        for id in new_ids {
            if let Some(leaf) = self.index.leaf_of_packet(id) {
                by_leaf.entry(leaf).or_default().push(id);
            }
        }
        stats.touched_leaves = by_leaf.len();
        let jobs: Vec<(GeohashKey, Vec<&str>, KeywordBaseline)> = by_leaf
            .into_iter()
            .map(|(leaf, ids)| {
                let b = self.baseline_for(&leaf);
                (leaf, ids, b)
            })
            .collect();
        let window_id = format!("w{}", self.windows);
        let ctx = DetectContext {
            corpus: &self.corpus,
            scale_map: &self.config.scope.scale_map,
            params: &self.config.detect,
            now,
            window_id: &window_id,
        };
        let index = &self.index;
        let results: Vec<(LeafOutcome, GeohashKey, KeywordBaseline)> = jobs
            .into_par_iter()
            .map(|(leaf, ids, mut b)| {
                let o = detect_local_events(index, &leaf, &ids, &mut b, &ctx);
                (o, leaf, b)
            })
            .collect();
        for (outcome, leaf, baseline) in results {
            stats.clusters_created += outcome.created;
            stats.clusters_absorbed += outcome.merged_away.len();
            stats.clusters_expired += outcome.expired.len();
            self.baselines.insert(leaf, baseline);
            apply_outcome(&mut self.index, outcome);
        }
    }

    fn publish(&mut self, stats: &PipelineStats) {
        let available_days = match &self.snapshots {
            Some(s) => s.available_days().unwrap_or_default(),
            None => BTreeSet::new(),
        };
        self.published = Arc::new(Published {
            version: self.published.version + 1,
            now: self.now,
            memory_from: self.now.saturating_sub(self.config.index.cluster_ttl_ms),
            eois: self.index.eois().clone(),
            live_packets: self.index.len(),
            available_days,
            last_stats: Some(stats.clone()),
        });
    }

    fn persist(&mut self, new_packets: &[DataPacket], now: i64) -> Result<(), SnapshotError> {
        let store = self.snapshots.as_ref().expect("persist needs a store");
        let mut by_day: BTreeMap<NaiveDate, Vec<&DataPacket>> = BTreeMap::new();
        for p in new_packets {
            by_day.entry(date_of_ms(p.time())).or_default().push(p);
        }
        for (d, ps) in &by_day {
            store.append_packets(*d, ps)?;
            self.open_days.insert(*d);
        }
        let today = date_of_ms(now);
        let finished: Vec<NaiveDate> = self.open_days.range(..today).copied().collect();
        for d in finished {
            store.compact_day(d)?;
            self.open_days.remove(&d);
        }
        let frozen_through = date_of_ms(now.saturating_sub(self.config.index.cluster_ttl_ms));
        let mut eois_by_day: BTreeMap<NaiveDate, Vec<&EventCluster>> = BTreeMap::new();
        for c in self.index.eois().iter() {
            eois_by_day
                .entry(date_of_ms(c.timestamp))
                .or_default()
                .push(c);
        }
        let mut days: BTreeSet<NaiveDate> = eois_by_day.keys().copied().collect();
        days.extend(self.eoi_days.iter().copied());
        days.retain(|d| *d > frozen_through);
        self.rewritten_days.clear();
        for d in &days {
            store.write_day_eois(*d, eois_by_day.get(d).map(Vec::as_slice).unwrap_or(&[]))?;
            self.rewritten_days.push(*d);
        }
        self.eoi_days = days;
        Ok(())
    }

    /// Compacts every day that still has appended packet records.
    pub fn flush(&mut self) -> Result<(), SnapshotError> {
        let Some(store) = &self.snapshots else {
            return Ok(());
        };
        for d in std::mem::take(&mut self.open_days) {
            store.compact_day(d)?;
        }
        Ok(())
    }

    /// Reloads retained packets and EoIs from snapshots after a restart.
    /// Returns the number of packets restored.
    pub fn recover(&mut self) -> Result<usize, SnapshotError> {
        let Some(store) = &self.snapshots else {
            return Ok(0);
        };
        let days = store.available_days()?;
        let Some(last) = days.iter().next_back().copied() else {
            return Ok(0);
        };
        let mut loaded = Vec::new();
        let horizon = last - chrono::Duration::milliseconds(self.config.index.cluster_ttl_ms);
        for d in days.range(horizon..) {
            if let Some(day) = store.load_day(*d)? {
                loaded.push((*d, day));
            }
        }
        let newest = loaded
            .iter()
            .flat_map(|(_, (ps, es))| {
                ps.iter()
                    .map(|p| p.time())
                    .chain(es.iter().map(|e| e.timestamp))
            })
            .max()
            .unwrap_or(0);
        self.now = self.now.max(newest);
        let packet_cutoff = self.now.saturating_sub(self.config.index.packet_ttl_ms);
        let frozen_through = date_of_ms(self.now.saturating_sub(self.config.index.cluster_ttl_ms));
        let mut restored = 0;
        for (_, (packets, _)) in &loaded {
            for p in packets.iter().filter(|p| p.time() >= packet_cutoff) {
                if !self.index.contains(&p.id) && self.index.insert(p.clone()).is_ok() {
                    restored += 1;
                }
            }
        }
        for (d, (_, eois)) in loaded {
            if d <= frozen_through {
                continue;
            }
            self.eoi_days.insert(d);
            for e in eois {
                self.index.upsert_cluster(e);
            }
        }
        let stats = PipelineStats {
            now: self.now,
            live_packets: self.index.len(),
            eois: self.index.eois().len(),
            ..Default::default()
        };
        self.publish(&stats);
        Ok(restored)
    }
}
