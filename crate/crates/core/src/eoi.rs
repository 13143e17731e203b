//! Event clusters (EoIs), the scale ladder and the public EoI record schema.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::geo::{common_prefix, geohash_encode, GeohashKey};
use crate::packet::{DataPacket, Location};
use crate::TermVector;

/// Named display scales, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scale {
    Local,
    Neighborhood,
    #[serde(rename = "Sub-Locality")]
    SubLocality,
    Locality,
    City,
}

impl Scale {
    pub const ALL: [Scale; 5] = [
        Scale::Local,
        Scale::Neighborhood,
        Scale::SubLocality,
        Scale::Locality,
        Scale::City,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scale::Local => "Local",
            Scale::Neighborhood => "Neighborhood",
            Scale::SubLocality => "Sub-Locality",
            Scale::Locality => "Locality",
            Scale::City => "City",
        }
    }

    pub fn parse(s: &str) -> Option<Scale> {
        Scale::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s) || format!("{x:?}").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub precision: usize,
    pub zoom_start: u8,
    pub zoom_end: u8,
    pub scale: Scale,
}

/// Geohash precision → map zoom range and scale name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleMap {
    /// Sorted by precision, coarsest first.
    entries: Vec<ScaleEntry>,
}

pub const MAX_ZOOM: u8 = 18;

impl Default for ScaleMap {
    fn default() -> Self {
        let e = |precision, zoom_start, zoom_end, scale| ScaleEntry {
            precision,
            zoom_start,
            zoom_end,
            scale,
        };
        ScaleMap {
            entries: vec![
                e(3, 0, 8, Scale::City),
                e(4, 9, 11, Scale::Locality),
                e(5, 12, 13, Scale::SubLocality),
                e(6, 14, 15, Scale::Neighborhood),
                e(7, 16, 16, Scale::Local),
                e(8, 17, 18, Scale::Local),
            ],
        }
    }
}

impl ScaleMap {
    /// Entries must cover consecutive precisions with contiguous,
    /// non-overlapping zoom ranges spanning `0..=18`.
    pub fn new(mut entries: Vec<ScaleEntry>) -> Result<Self, String> {
        entries.sort_by_key(|e| e.precision);
        if entries.is_empty() {
            return Err("scale map is empty".into());
        }
        if entries[0].zoom_start != 0 {
            return Err("coarsest entry must start at zoom 0".into());
        }
        if entries.last().map(|e| e.zoom_end) != Some(MAX_ZOOM) {
            return Err(format!("finest entry must end at zoom {MAX_ZOOM}"));
        }
        for e in &entries {
            if e.zoom_start > e.zoom_end {
                return Err(format!("precision {}: zoom_start > zoom_end", e.precision));
            }
            if e.precision == 0 || e.precision > crate::geo::MAX_ENCODE_PRECISION {
                return Err(format!("precision {} out of range", e.precision));
            }
        }
        for w in entries.windows(2) {
            if w[1].precision != w[0].precision + 1 {
                return Err("precisions must be consecutive".into());
            }
            if w[1].zoom_start != w[0].zoom_end + 1 {
                return Err(format!(
                    "zoom ranges of precision {} and {} are not contiguous",
                    w[0].precision, w[1].precision
                ));
            }
            if w[1].scale > w[0].scale {
                return Err("scales must get finer with precision".into());
            }
        }
        Ok(ScaleMap { entries })
    }

    pub fn entries(&self) -> &[ScaleEntry] {
        &self.entries
    }

    pub fn coarsest_precision(&self) -> usize {
        self.entries[0].precision
    }

    pub fn finest_precision(&self) -> usize {
        self.entries[self.entries.len() - 1].precision
    }

    /// Entry for a cell precision, clamped into the mapped range.
    pub fn for_precision(&self, precision: usize) -> ScaleEntry {
        let p = precision.clamp(self.coarsest_precision(), self.finest_precision());
        self.entries[p - self.coarsest_precision()]
    }

    /// Precision whose zoom range contains `zoom` (clamped to 0..=18).
    pub fn precision_for_zoom(&self, zoom: u8) -> usize {
        let z = zoom.min(MAX_ZOOM);
        self.entries
            .iter()
            .find(|e| e.zoom_start <= z && z <= e.zoom_end)
            .map(|e| e.precision)
            .unwrap_or_else(|| self.finest_precision())
    }

    pub fn scale_for_precision(&self, precision: usize) -> Scale {
        self.for_precision(precision).scale
    }

    /// Union of zoom ranges carrying `scale`, if any.
    pub fn zoom_range_of(&self, scale: Scale) -> Option<(u8, u8)> {
        let mut it = self.entries.iter().filter(|e| e.scale == scale);
        let first = it.next()?;
        let last = it.next_back().unwrap_or(first);
        Some((
            first.zoom_start.min(last.zoom_start),
            first.zoom_end.max(last.zoom_end),
        ))
    }

    /// Coarsest precision labelled `scale`.
    pub fn precision_of(&self, scale: Scale) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.scale == scale)
            .map(|e| e.precision)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLevel {
    /// Found by local detection inside one leaf cell.
    Leaf,
    /// Produced by merging sibling clusters during scope aggregation.
    Merged,
}

/// A member packet's position, kept so the centroid stays recomputable after eviction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub time: i64,
}

impl From<&DataPacket> for Member {
    fn from(p: &DataPacket) -> Self {
        Member {
            id: p.id.clone(),
            lat: p.lat(),
            lon: p.lon(),
            time: p.time(),
        }
    }
}

pub const UNCLASSIFIED: &str = "unclassified";
pub const UNSPECIFIED_PREFIX: &str = "unspecified:";

/// A detected event of interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCluster {
    pub id: String,
    pub event_type: String,
    pub members: Vec<Member>,
    pub packet_count: u64,
    pub centroid: Location,
    pub centroid_vector: TermVector,
    pub cell_key: GeohashKey,
    /// Leaf cell that owns a leaf cluster; equals `cell_key` for merged clusters.
    pub home: GeohashKey,
    /// Latest member time.
    pub timestamp: i64,
    pub created_at: i64,
    pub updated_at: i64,
    pub zoom_start: u8,
    pub zoom_end: u8,
    pub visited: bool,
    pub label_terms: Vec<String>,
    pub level: ClusterLevel,
    #[serde(default)]
    pub constituents: Vec<String>,
    #[serde(default)]
    pub merged_into: Option<String>,
}

impl EventCluster {
    pub fn packet_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.id.as_str())
    }

    pub fn is_root(&self) -> bool {
        self.merged_into.is_none()
    }

    pub fn is_unclassified(&self) -> bool {
        self.event_type == UNCLASSIFIED
    }

    pub fn precision(&self) -> usize {
        self.cell_key.precision()
    }

    /// Count-weighted mean of member locations (each member weighs 1).
    pub fn mean_location(members: &[Member]) -> Option<Location> {
        if members.is_empty() {
            return None;
        }
        let n = members.len() as f64;
        let (slat, slon) = members
            .iter()
            .fold((0.0, 0.0), |(a, b), m| (a + m.lat, b + m.lon));
        Some(Location {
            lat: slat / n,
            lon: slon / n,
        })
    }

    /// Deepest geohash cell (at most `max_precision`) containing every member.
    pub fn tight_key(members: &[Member], max_precision: usize) -> Option<GeohashKey> {
        let keys: Vec<GeohashKey> = members
            .iter()
            .filter_map(|m| geohash_encode(m.lat, m.lon, max_precision).ok())
            .collect();
        common_prefix(keys.iter())
    }

    pub fn latest_time(members: &[Member]) -> i64 {
        members.iter().map(|m| m.time).max().unwrap_or(0)
    }

    /// Whether `keyword` (already normalised) names this event.
    pub fn matches_keyword(&self, keyword: &str) -> bool {
        self.label_terms.iter().any(|t| t == keyword)
            || self.event_type == keyword
            || self.event_type.strip_prefix(UNSPECIFIED_PREFIX) == Some(keyword)
    }

    pub fn zoom_contains(&self, zoom: u8) -> bool {
        self.zoom_start <= zoom && zoom <= self.zoom_end
    }

    pub fn to_record(&self) -> EoiRecord {
        EoiRecord::from(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EoiLocation {
    pub lat: f64,
    pub lon: f64,
}

/// Wire form of an EoI, field names as served to map clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EoiRecord {
    pub id: String,
    #[serde(rename = "eventType")]
    pub event_type: String,
    #[serde(rename = "packetcount")]
    pub packet_count: u64,
    pub packets: Vec<String>,
    #[serde(rename = "@timestamp")]
    pub timestamp: String,
    #[serde(rename = "zoomStart")]
    pub zoom_start: u8,
    #[serde(rename = "zoomEnd")]
    pub zoom_end: u8,
    #[serde(rename = "cellkey")]
    pub cell_key: String,
    pub location: EoiLocation,
    pub visited: bool,
    #[serde(rename = "labelTerms")]
    pub label_terms: Vec<String>,
}

pub fn format_timestamp(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

impl From<&EventCluster> for EoiRecord {
    fn from(c: &EventCluster) -> Self {
        EoiRecord {
            id: c.id.clone(),
            event_type: c.event_type.clone(),
            packet_count: c.packet_count,
            packets: c.packet_ids().map(str::to_owned).collect(),
            timestamp: format_timestamp(c.timestamp),
            zoom_start: c.zoom_start,
            zoom_end: c.zoom_end,
            cell_key: c.cell_key.to_string(),
            location: EoiLocation {
                lat: c.centroid.lat,
                lon: c.centroid.lon,
            },
            visited: c.visited,
            label_terms: c.label_terms.clone(),
        }
    }
}
