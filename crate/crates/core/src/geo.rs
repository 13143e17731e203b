//! Geohash encoding, cell geometry and bounding-box covers.
//!
//! A geohash interleaves longitude and latitude bisection bits (longitude
//! first) and packs them five at a time into a base-32 alphabet. Every prefix
//! of a key addresses the ancestor cell, which is what lets the pyramid index
//! turn two-dimensional lookups into string prefix scans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::GeoError;

pub const ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Longest key `geohash_encode` accepts.
pub const MAX_ENCODE_PRECISION: usize = 12;

const EARTH_RADIUS_M: f64 = 6_371_008.8;

fn char_value(c: u8) -> Option<u8> {
    ALPHABET.iter().position(|&a| a == c).map(|p| p as u8)
}

/// A validated geohash cell key.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GeohashKey(String);

impl GeohashKey {
    pub fn new(key: impl Into<String>) -> Result<Self, GeoError> {
        let key = key.into();
        if key.is_empty() || key.len() > MAX_ENCODE_PRECISION {
            return Err(GeoError::InvalidKey(key));
        }
        if !key.bytes().all(|b| char_value(b).is_some()) {
            return Err(GeoError::InvalidKey(key));
        }
        Ok(GeohashKey(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn precision(&self) -> usize {
        self.0.len()
    }

    /// Ancestor key at `precision`, or `None` when that would be empty or longer than `self`.
    pub fn truncate(&self, precision: usize) -> Option<GeohashKey> {
        if precision == 0 || precision > self.0.len() {
            return None;
        }
        Some(GeohashKey(self.0[..precision].to_string()))
    }

    pub fn parent(&self) -> Option<GeohashKey> {
        self.truncate(self.0.len().saturating_sub(1))
    }

    /// The 32 child keys one level finer, in alphabet order.
    pub fn children(&self) -> Vec<GeohashKey> {
        ALPHABET
            .iter()
            .map(|&c| {
                let mut s = String::with_capacity(self.0.len() + 1);
                s.push_str(&self.0);
                s.push(c as char);
                GeohashKey(s)
            })
            .collect()
    }

    pub fn child(&self, c: char) -> Result<GeohashKey, GeoError> {
        GeohashKey::new(format!("{}{}", self.0, c))
    }

    pub fn is_ancestor_of(&self, other: &GeohashKey) -> bool {
        other.0.starts_with(&self.0)
    }

    pub fn bbox(&self) -> BBox {
        decode_bbox_unchecked(&self.0)
    }

    pub fn center(&self) -> (f64, f64) {
        self.bbox().center()
    }

    /// The 32 top-level cells.
    pub fn roots() -> Vec<GeohashKey> {
        ALPHABET
            .iter()
            .map(|&c| GeohashKey((c as char).to_string()))
            .collect()
    }
}

impl fmt::Display for GeohashKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for GeohashKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GeohashKey({})", self.0)
    }
}

impl FromStr for GeohashKey {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GeohashKey::new(s)
    }
}

impl TryFrom<String> for GeohashKey {
    type Error = GeoError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        GeohashKey::new(s)
    }
}

impl From<GeohashKey> for String {
    fn from(k: GeohashKey) -> String {
        k.0
    }
}

impl AsRef<str> for GeohashKey {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Axis-aligned lat/lon rectangle, bounds inclusive. Does not wrap the antimeridian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub const WORLD: BBox = BBox {
        min_lat: -90.0,
        min_lon: -180.0,
        max_lat: 90.0,
        max_lon: 180.0,
    };

    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        let b = BBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        };
        if !b.is_valid() {
            return Err(GeoError::InvalidBBox(b));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.min_lat, self.min_lon, self.max_lat, self.max_lon]
            .iter()
            .all(|v| v.is_finite());
        finite
            && self.min_lat <= self.max_lat
            && self.min_lon <= self.max_lon
            && self.min_lat >= -90.0
            && self.max_lat <= 90.0
            && self.min_lon >= -180.0
            && self.max_lon <= 180.0
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }

    pub fn contains_bbox(&self, other: &BBox) -> bool {
        other.min_lat >= self.min_lat
            && other.max_lat <= self.max_lat
            && other.min_lon >= self.min_lon
            && other.max_lon <= self.max_lon
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
            && self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }

    pub fn height_deg(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    pub fn width_deg(&self) -> f64 {
        self.max_lon - self.min_lon
    }
}

pub fn check_coords(lat: f64, lon: f64) -> Result<(), GeoError> {
    if !(lat.is_finite() && lon.is_finite())
        || !(-90.0..=90.0).contains(&lat)
        || !(-180.0..=180.0).contains(&lon)
    {
        return Err(GeoError::OutOfRange { lat, lon });
    }
    Ok(())
}

/// Standard geohash of a point, `precision` characters long.
pub fn geohash_encode(lat: f64, lon: f64, precision: usize) -> Result<GeohashKey, GeoError> {
    check_coords(lat, lon)?;
    if precision == 0 || precision > MAX_ENCODE_PRECISION {
        return Err(GeoError::InvalidPrecision(precision));
    }
    let (mut lat_lo, mut lat_hi) = (-90.0_f64, 90.0_f64);
    let (mut lon_lo, mut lon_hi) = (-180.0_f64, 180.0_f64);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    for _ in 0..precision {
        let mut idx = 0u8;
        for _ in 0..5 {
            idx <<= 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if lon >= mid {
                    idx |= 1;
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if lat >= mid {
                    idx |= 1;
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
        out.push(ALPHABET[idx as usize] as char);
    }
    Ok(GeohashKey(out))
}

fn decode_bbox_unchecked(key: &str) -> BBox {
    let (mut lat_lo, mut lat_hi) = (-90.0_f64, 90.0_f64);
    let (mut lon_lo, mut lon_hi) = (-180.0_f64, 180.0_f64);
    let mut even = true;
    for b in key.bytes() {
        let v = char_value(b).unwrap_or(0);
        for shift in (0..5).rev() {
            let bit = (v >> shift) & 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if bit == 1 {
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if bit == 1 {
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
    }
    BBox {
        min_lat: lat_lo,
        min_lon: lon_lo,
        max_lat: lat_hi,
        max_lon: lon_hi,
    }
}

/// Cell rectangle and its midpoint `(lat, lon)`.
pub fn geohash_decode(key: &str) -> Result<(BBox, (f64, f64)), GeoError> {
    let key = GeohashKey::new(key)?;
    let bbox = key.bbox();
    Ok((bbox, bbox.center()))
}

/// Cell size in degrees `(lat_height, lon_width)` at `precision`.
pub fn cell_size_deg(precision: usize) -> (f64, f64) {
    let bits = 5 * precision;
    let lon_bits = bits.div_ceil(2);
    let lat_bits = bits / 2;
    (
        180.0 / 2f64.powi(lat_bits as i32),
        360.0 / 2f64.powi(lon_bits as i32),
    )
}

/// Great-circle distance in metres.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// Longest common prefix of a set of keys, `None` if they share none.
pub fn common_prefix<'a, I>(keys: I) -> Option<GeohashKey>
where
    I: IntoIterator<Item = &'a GeohashKey>,
{
    let mut iter = keys.into_iter();
    let first = iter.next()?;
    let mut len = first.precision();
    for k in iter {
        len = first
            .as_str()
            .bytes()
            .zip(k.as_str().bytes())
            .take(len)
            .take_while(|(a, b)| a == b)
            .count();
        if len == 0 {
            return None;
        }
    }
    first.truncate(len)
}

/// Covering set of geohash prefixes for `bbox`.
///
/// Cells entirely inside the box are emitted as soon as they are found; cells
/// that only partially overlap are refined down to `precision`. Every point of
/// `bbox` lies in exactly one emitted cell. Refinement stops early once the
/// cover would exceed `max_cells`, in which case partially overlapping cells
/// are emitted at the coarser precision reached so far.
pub fn cover(bbox: &BBox, precision: usize, max_cells: usize) -> Vec<GeohashKey> {
    let precision = precision.clamp(1, MAX_ENCODE_PRECISION);
    let mut frontier: Vec<GeohashKey> = GeohashKey::roots()
        .into_iter()
        .filter(|k| k.bbox().intersects(bbox))
        .collect();
    let mut done: Vec<GeohashKey> = Vec::new();
    loop {
        let mut next = Vec::new();
        let mut refined_any = false;
        for key in frontier.drain(..) {
            let cb = key.bbox();
            if bbox.contains_bbox(&cb) || key.precision() >= precision {
                done.push(key);
                continue;
            }
            refined_any = true;
            next.extend(
                key.children()
                    .into_iter()
                    .filter(|c| c.bbox().intersects(bbox)),
            );
        }
        if !refined_any {
            break;
        }
        if done.len() + next.len() > max_cells {
            // Too fine: keep the partially overlapping parents instead.
            let mut parents: Vec<GeohashKey> = next.iter().filter_map(|k| k.parent()).collect();
            parents.sort();
            parents.dedup();
            done.extend(parents);
            break;
        }
        frontier = next;
    }
    done.sort();
    done.dedup();
    done
}
