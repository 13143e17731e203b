use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::eoi::EventCluster;
use crate::geo::{geohash_encode, GeohashKey};

/// Event clusters keyed by id, with a centroid-geohash index for prefix scans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<EventCluster>", into = "Vec<EventCluster>")]
pub struct EoiStore {
    clusters: BTreeMap<String, EventCluster>,
    by_centroid: BTreeSet<(String, String)>,
    key_precision: usize,
}

const CENTROID_KEY_PRECISION: usize = 12;

impl From<Vec<EventCluster>> for EoiStore {
    fn from(v: Vec<EventCluster>) -> Self {
        let mut s = EoiStore::new();
        for c in v {
            s.insert(c);
        }
        s
    }
}

impl From<EoiStore> for Vec<EventCluster> {
    fn from(s: EoiStore) -> Self {
        s.clusters.into_values().collect()
    }
}

impl EoiStore {
    pub fn new() -> Self {
        EoiStore {
            clusters: BTreeMap::new(),
            by_centroid: BTreeSet::new(),
            key_precision: CENTROID_KEY_PRECISION,
        }
    }

    fn centroid_key(&self, c: &EventCluster) -> String {
        geohash_encode(c.centroid.lat, c.centroid.lon, self.key_precision.max(1))
            .map(String::from)
            .unwrap_or_default()
    }

    /// Inserts or replaces by id, returning the previous cluster.
    pub fn insert(&mut self, cluster: EventCluster) -> Option<EventCluster> {
        let prev = self.remove(&cluster.id);
        let key = self.centroid_key(&cluster);
        self.by_centroid.insert((key, cluster.id.clone()));
        self.clusters.insert(cluster.id.clone(), cluster);
        prev
    }

    pub fn remove(&mut self, id: &str) -> Option<EventCluster> {
        let c = self.clusters.remove(id)?;
        let key = self.centroid_key(&c);
        self.by_centroid.remove(&(key, c.id.clone()));
        Some(c)
    }

    pub fn get(&self, id: &str) -> Option<&EventCluster> {
        self.clusters.get(id)
    }

    pub fn get_mut_with<R>(
        &mut self,
        id: &str,
        f: impl FnOnce(&mut EventCluster) -> R,
    ) -> Option<R> {
        let mut c = self.remove(id)?;
        let r = f(&mut c);
        self.insert(c);
        Some(r)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.clusters.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EventCluster> {
        self.clusters.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clusters.keys().map(String::as_str)
    }

    /// Clusters whose centroid falls inside the cell `prefix`.
    pub fn with_centroid_in<'a>(
        &'a self,
        prefix: &'a GeohashKey,
    ) -> impl Iterator<Item = &'a EventCluster> + 'a {
        let p = prefix.as_str().to_string();
        self.by_centroid
            .range((p.clone(), String::new())..)
            .take_while(move |(k, _)| k.starts_with(&p))
            .filter_map(|(_, id)| self.clusters.get(id))
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&EventCluster) -> bool) -> Vec<EventCluster> {
        let drop: Vec<String> = self
            .clusters
            .values()
            .filter(|c| !keep(c))
            .map(|c| c.id.clone())
            .collect();
        drop.iter().filter_map(|id| self.remove(id)).collect()
    }
}
