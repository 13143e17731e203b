//! EoI retrieval by zoom, bounding box, time range and keyword, plus tag clouds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::eoi::{EventCluster, Scale, ScaleMap, MAX_ZOOM};
use crate::error::{QueryError, SnapshotError};
use crate::geo::{cover, BBox, GeohashKey};
use crate::index::snapshot::{date_of_ms, SnapshotStore};
use crate::index::{EoiStore, TimeRange};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_COVER_CELLS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EoIQuery {
    pub zoom: u8,
    pub bbox: BBox,
    pub time_range: TimeRange,
    pub keyword: Option<String>,
    pub limit: usize,
    pub include_history: bool,
}

impl EoIQuery {
    pub fn new(zoom: u8, bbox: BBox, time_range: TimeRange) -> Self {
        EoIQuery {
            zoom,
            bbox,
            time_range,
            keyword: None,
            limit: DEFAULT_LIMIT,
            include_history: false,
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        let bad = |m: String| Err(QueryError::InvalidQuery(m));
        if self.zoom > MAX_ZOOM {
            return bad(format!("zoom {} outside 0..={MAX_ZOOM}", self.zoom));
        }
        if self.time_range.from > self.time_range.to {
            return bad("time range has from > to".into());
        }
        if self.limit == 0 {
            return bad("limit must be positive".into());
        }
        if BBox::new(
            self.bbox.min_lat,
            self.bbox.min_lon,
            self.bbox.max_lat,
            self.bbox.max_lon,
        )
        .is_err()
        {
            return bad("bbox is not a valid rectangle".into());
        }
        Ok(())
    }

    /// Keyword lowercased, trimmed and without a leading `#`; `None` when blank.
    pub fn normalized_keyword(&self) -> Option<String> {
        normalize_keyword(self.keyword.as_deref()?)
    }
}

pub fn normalize_keyword(k: &str) -> Option<String> {
    let k = k.trim().trim_start_matches('#').to_lowercase();
    (!k.is_empty()).then_some(k)
}

/// Facts about the serving state that planning depends on.
#[derive(Clone, Debug)]
pub struct PlanContext {
    pub now: i64,
    /// EoIs timestamped at or after this instant are held in memory.
    pub memory_from: i64,
    /// Days with persisted partitions.
    pub available_days: BTreeSet<NaiveDate>,
    pub scale_map: ScaleMap,
    pub max_cover_cells: usize,
}

impl PlanContext {
    pub fn in_memory_only(now: i64, retention_ms: i64) -> Self {
        PlanContext {
            now,
            memory_from: now.saturating_sub(retention_ms),
            available_days: BTreeSet::new(),
            scale_map: ScaleMap::default(),
            max_cover_cells: MAX_COVER_CELLS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPlan {
    pub query: EoIQuery,
    pub precision: usize,
    pub scale: Scale,
    /// Cells covering the bbox, coarser where the cover would be too large.
    pub prefixes: Vec<GeohashKey>,
    pub use_memory: bool,
    /// Persisted days to read, in order.
    pub snapshot_days: Vec<NaiveDate>,
}

pub fn plan(query: &EoIQuery, ctx: &PlanContext) -> Result<QueryPlan, QueryError> {
    query.validate()?;
    let precision = ctx.scale_map.precision_for_zoom(query.zoom);
    let prefixes = cover(&query.bbox, precision, ctx.max_cover_cells.max(1));
    let tr = query.time_range;
    let use_memory = tr.to >= ctx.memory_from;
    let snapshot_days = if query.include_history {
        let (first, last) = (
            date_of_ms(tr.from.max(i64::MIN / 2)),
            date_of_ms(tr.to.min(i64::MAX / 2)),
        );
        ctx.available_days.range(first..=last).copied().collect()
    } else {
        Vec::new()
    };
    Ok(QueryPlan {
        query: query.clone(),
        precision,
        scale: ctx.scale_map.scale_for_precision(precision),
        prefixes,
        use_memory,
        snapshot_days,
    })
}

/// Whether an EoI satisfies every filter of the query except the limit.
pub fn matches(c: &EventCluster, q: &EoIQuery, keyword: Option<&str>) -> bool {
    c.zoom_contains(q.zoom)
        && q.bbox.contains(c.centroid.lat, c.centroid.lon)
        && q.time_range.contains(c.timestamp)
        && keyword.is_none_or(|k| c.matches_keyword(k))
}

pub fn rank(a: &EventCluster, b: &EventCluster) -> std::cmp::Ordering {
    b.packet_count
        .cmp(&a.packet_count)
        .then_with(|| a.id.cmp(&b.id))
}

/// Source of persisted EoIs for history queries.
pub trait HistorySource {
    fn day_eois(&self, day: NaiveDate) -> Result<Arc<Vec<EventCluster>>, SnapshotError>;
}

/// Snapshot reader that keeps each loaded day in memory.
#[derive(Debug)]
pub struct CachedHistory {
    store: SnapshotStore,
    cache: Mutex<HashMap<NaiveDate, Arc<Vec<EventCluster>>>>,
}

impl CachedHistory {
    pub fn new(store: SnapshotStore) -> Self {
        CachedHistory {
            store,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }

    pub fn invalidate(&self, day: NaiveDate) {
        self.cache.lock().expect("cache lock").remove(&day);
    }

    pub fn cached_days(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl HistorySource for CachedHistory {
    fn day_eois(&self, day: NaiveDate) -> Result<Arc<Vec<EventCluster>>, SnapshotError> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&day) {
            return Ok(v.clone());
        }
        let loaded = Arc::new(self.store.load_day_eois(day)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(day, loaded.clone());
        Ok(loaded)
    }
}

/// Runs a plan over the in-memory store and, if the plan asks for it, the
/// persisted history. Memory wins when an id appears in both. Results are
/// ordered by packet count descending, then id.
pub fn execute(
    plan: &QueryPlan,
    memory: &EoiStore,
    history: Option<&dyn HistorySource>,
) -> Result<Vec<EventCluster>, SnapshotError> {
    let mut all = execute_unlimited(plan, memory, history)?;
    all.truncate(plan.query.limit);
    Ok(all)
}

fn execute_unlimited(
    plan: &QueryPlan,
    memory: &EoiStore,
    history: Option<&dyn HistorySource>,
) -> Result<Vec<EventCluster>, SnapshotError> {
    let q = &plan.query;
    let keyword = q.normalized_keyword();
    let kw = keyword.as_deref();
    let mut hits: BTreeMap<String, EventCluster> = BTreeMap::new();
    if plan.use_memory {
        for prefix in &plan.prefixes {
            for c in memory.with_centroid_in(prefix) {
                if matches(c, q, kw) {
                    hits.entry(c.id.clone()).or_insert_with(|| c.clone());
                }
            }
        }
    }
    if let Some(h) = history {
        // Newest day first, so a later version of an EoI wins over an older one.
        for day in plan.snapshot_days.iter().rev() {
            for c in h.day_eois(*day)?.iter() {
                if !hits.contains_key(&c.id)
                    && !(plan.use_memory && memory.contains(&c.id))
                    && matches(c, q, kw)
                {
                    hits.insert(c.id.clone(), c.clone());
                }
            }
        }
    }
    let mut out: Vec<EventCluster> = hits.into_values().collect();
    out.sort_by(rank);
    Ok(out)
}

/// Top `k` terms over the EoIs matching the query (ignoring its limit), each
/// label term weighted by the EoI's packet count times the term's centroid weight.
pub fn tag_cloud(
    plan: &QueryPlan,
    memory: &EoiStore,
    history: Option<&dyn HistorySource>,
    k: usize,
) -> Result<Vec<(String, f64)>, SnapshotError> {
    let eois = execute_unlimited(plan, memory, history)?;
    Ok(cloud_of(&eois, k))
}

pub fn cloud_of(eois: &[EventCluster], k: usize) -> Vec<(String, f64)> {
    let mut weights: BTreeMap<&str, f64> = BTreeMap::new();
    for c in eois {
        for t in &c.label_terms {
            let w = c.centroid_vector.get(t);
            *weights.entry(t.as_str()).or_insert(0.0) +=
                c.packet_count as f64 * if w > 0.0 { w } else { 1.0 };
        }
    }
    let mut out: Vec<(String, f64)> = weights
        .into_iter()
        .map(|(t, w)| (t.to_string(), w))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eoi::{ClusterLevel, Member};
    use crate::geo::geohash_encode;
    use crate::index::snapshot::epoch_day;
    use crate::index::MS_PER_DAY;
    use crate::packet::Location;
    use crate::text::SparseVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eoi(
        id: &str,
        lat: f64,
        lon: f64,
        t: i64,
        n: u64,
        zoom: (u8, u8),
        terms: &[&str],
    ) -> EventCluster {
        let key = geohash_encode(lat, lon, 8).unwrap();
        EventCluster {
            id: id.into(),
            event_type: "disaster".into(),
            members: (0..n)
                .map(|i| Member {
                    id: format!("{id}/{i}"),
                    lat,
                    lon,
                    time: t,
                })
                .collect(),
            packet_count: n,
            centroid: Location { lat, lon },
            centroid_vector: SparseVector::from_weights(terms.iter().map(|t| (t.to_string(), 1.0))),
            cell_key: key.clone(),
            home: key,
            timestamp: t,
            created_at: t,
            updated_at: t,
            zoom_start: zoom.0,
            zoom_end: zoom.1,
            visited: false,
            label_terms: terms.iter().map(|s| s.to_string()).collect(),
            level: ClusterLevel::Leaf,
            constituents: vec![],
            merged_into: None,
        }
    }

    fn ctx(now: i64) -> PlanContext {
        PlanContext::in_memory_only(now, 7 * MS_PER_DAY)
    }

    #[test]
    fn plan_precision_from_zoom() {
        let small = BBox::new(6.45, 3.38, 6.46, 3.39).unwrap();
        let p = plan(&EoIQuery::new(17, small, TimeRange::ALL), &ctx(0)).unwrap();
        assert_eq!(p.precision, 8);
        assert!(p.prefixes.iter().all(|k| k.precision() <= 8));
        assert!(p.use_memory);
        let world = plan(&EoIQuery::new(3, BBox::WORLD, TimeRange::ALL), &ctx(0)).unwrap();
        assert_eq!(world.precision, 3);
        assert_eq!(world.scale, Scale::City);
        assert!(world.prefixes.iter().all(|k| k.precision() <= 3));
    }

    #[test]
    fn plan_rejects_bad_queries() {
        let mut q = EoIQuery::new(10, BBox::WORLD, TimeRange { from: 5, to: 1 });
        assert!(plan(&q, &ctx(0)).is_err());
        q.time_range = TimeRange::ALL;
        q.limit = 0;
        assert!(plan(&q, &ctx(0)).is_err());
        q.limit = 1;
        q.zoom = 19;
        assert!(plan(&q, &ctx(0)).is_err());
    }

    #[test]
    fn plan_lists_june_partitions() {
        let mut c = ctx(epoch_day(NaiveDate::from_ymd_opt(2017, 8, 1).unwrap()) * MS_PER_DAY);
        for d in 1..=30 {
            c.available_days
                .insert(NaiveDate::from_ymd_opt(2017, 6, d).unwrap());
        }
        c.available_days
            .insert(NaiveDate::from_ymd_opt(2017, 7, 2).unwrap());
        let june = crate::index::snapshot::Period::Month {
            year: 2017,
            month: 6,
        }
        .time_range();
        let mut q = EoIQuery::new(12, BBox::WORLD, june);
        q.include_history = true;
        let p = plan(&q, &c).unwrap();
        assert_eq!(p.snapshot_days.len(), 30);
        assert!(!p.use_memory);
        q.include_history = false;
        assert!(plan(&q, &c).unwrap().snapshot_days.is_empty());
    }

    #[test]
    fn zoom_filter_and_order() {
        let mut s = EoiStore::new();
        s.insert(eoi("local", 6.45, 3.39, 100, 5, (16, 18), &["fire"]));
        s.insert(eoi("city", 6.46, 3.40, 100, 50, (0, 8), &["flood"]));
        s.insert(eoi("city2", 6.47, 3.40, 100, 50, (0, 8), &["flood"]));
        let bbox = BBox::new(6.0, 3.0, 7.0, 4.0).unwrap();
        let run = |zoom| {
            let p = plan(&EoIQuery::new(zoom, bbox, TimeRange::ALL), &ctx(0)).unwrap();
            execute(&p, &s, None)
                .unwrap()
                .into_iter()
                .map(|c| c.id)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(17), vec!["local"]);
        assert_eq!(run(2), vec!["city", "city2"]);
        let mut q = EoIQuery::new(2, bbox, TimeRange::ALL);
        q.keyword = Some("#FLOOD".into());
        q.limit = 1;
        let p = plan(&q, &ctx(0)).unwrap();
        assert_eq!(execute(&p, &s, None).unwrap().len(), 1);
    }

    #[test]
    fn execute_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = EoiStore::new();
        let mut all = Vec::new();
        for i in 0..300 {
            let zs = rng.gen_range(0..=18u8);
            let ze = rng.gen_range(zs..=18u8);
            let kw = ["fire", "goal", "rain"][rng.gen_range(0..3)];
            let c = eoi(
                &format!("e{i}"),
                rng.gen_range(6.0..7.0),
                rng.gen_range(3.0..4.0),
                rng.gen_range(0..1000),
                rng.gen_range(1..20),
                (zs, ze),
                &[kw],
            );
            all.push(c.clone());
            s.insert(c);
        }
        for _ in 0..100 {
            let (a, b): (f64, f64) = (rng.gen_range(5.9..7.1), rng.gen_range(5.9..7.1));
            let (c, d): (f64, f64) = (rng.gen_range(2.9..4.1), rng.gen_range(2.9..4.1));
            let (t1, t2) = (rng.gen_range(0..1000), rng.gen_range(0..1000));
            let mut q = EoIQuery::new(
                rng.gen_range(0..=18),
                BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap(),
                TimeRange::new(t1.min(t2), t1.max(t2)).unwrap(),
            );
            q.limit = rng.gen_range(1..50);
            if rng.gen_bool(0.3) {
                q.keyword = Some("goal".into());
            }
            let kw = q.normalized_keyword();
            let mut expect: Vec<&EventCluster> = all
                .iter()
                .filter(|c| matches(c, &q, kw.as_deref()))
                .collect();
            expect.sort_by(|a, b| rank(a, b));
            expect.truncate(q.limit);
            let got = execute(&plan(&q, &ctx(0)).unwrap(), &s, None).unwrap();
            assert_eq!(
                got.iter().map(|c| &c.id).collect::<Vec<_>>(),
                expect.iter().map(|c| &c.id).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn tag_cloud_weights() {
        let mut s = EoiStore::new();
        s.insert(eoi(
            "a",
            6.45,
            3.39,
            100,
            10,
            (0, 18),
            &["concert", "stage"],
        ));
        s.insert(eoi("b", 6.46, 3.39, 100, 5, (0, 18), &["concert", "dj"]));
        let p = plan(&EoIQuery::new(10, BBox::WORLD, TimeRange::ALL), &ctx(0)).unwrap();
        let cloud = tag_cloud(&p, &s, None, 10).unwrap();
        assert_eq!(cloud[0], ("concert".to_string(), 15.0));
        assert_eq!(cloud[1], ("stage".to_string(), 10.0));
        assert_eq!(cloud[2], ("dj".to_string(), 5.0));
        let empty = plan(
            &EoIQuery::new(
                10,
                BBox::new(-50.0, -50.0, -49.0, -49.0).unwrap(),
                TimeRange::ALL,
            ),
            &ctx(0),
        )
        .unwrap();
        assert!(tag_cloud(&empty, &s, None, 5).unwrap().is_empty());
    }

    #[test]
    fn history_reads_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        let day = NaiveDate::from_ymd_opt(2017, 6, 12).unwrap();
        let t = epoch_day(day) * MS_PER_DAY + 1000;
        let old = eoi("old", 6.45, 3.39, t, 3, (0, 18), &["fire"]);
        store.write_day(day, &[], &[&old]).unwrap();
        let history = CachedHistory::new(store);
        let mut c = ctx(t + 30 * MS_PER_DAY);
        c.available_days = history.store().available_days().unwrap();
        let mut q = EoIQuery::new(10, BBox::WORLD, TimeRange::new(t - 10, t + 10).unwrap());
        q.include_history = true;
        let p = plan(&q, &c).unwrap();
        let got = execute(&p, &EoiStore::new(), Some(&history)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(history.cached_days(), 1);
    }
}
