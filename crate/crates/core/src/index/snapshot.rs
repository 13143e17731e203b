//! Day/month partitioned on-disk snapshots.
//!
//! Layout under the store root:
//!
//! ```text
//! YYYY-MM/manifest          JSON: per-day record counts and file checksums
//! YYYY-MM/DD.packets.bin    packet records (append-only between compactions)
//! YYYY-MM/DD.eois.bin       EoI records (rewritten whole)
//! ```
//!
//! Each record is `u32 LE payload length | u8 format version | JSON payload |
//! u32 LE CRC-32 of version byte and payload`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{day_of, IndexConfig, PyramidIndex, MS_PER_DAY};
use crate::eoi::EventCluster;
use crate::error::SnapshotError;
use crate::packet::DataPacket;

pub type DayContents = (Vec<DataPacket>, Vec<EventCluster>);

pub const FORMAT_VERSION: u8 = 1;
const MANIFEST: &str = "manifest";

/// A span of days to persist or load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Period {
    Day(NaiveDate),
    Month { year: i32, month: u32 },
}

impl Period {
    /// `YYYY-MM` or `YYYY-MM-DD`.
    pub fn parse(s: &str) -> Option<Period> {
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Some(Period::Day(d));
        }
        let (y, m) = s.split_once('-')?;
        let (year, month) = (y.parse().ok()?, m.parse().ok()?);
        NaiveDate::from_ymd_opt(year, month, 1)?;
        Some(Period::Month { year, month })
    }

    pub fn days(&self) -> Vec<NaiveDate> {
        match *self {
            Period::Day(d) => vec![d],
            Period::Month { year, month } => (1..=31)
                .filter_map(|d| NaiveDate::from_ymd_opt(year, month, d))
                .collect(),
        }
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        match *self {
            Period::Day(d) => d == day,
            Period::Month { year, month } => day.year() == year && day.month() == month,
        }
    }

    /// Inclusive millisecond bounds.
    pub fn time_range(&self) -> super::TimeRange {
        let days = self.days();
        let first = epoch_day(days[0]);
        let last = epoch_day(*days.last().expect("non-empty"));
        super::TimeRange {
            from: first * MS_PER_DAY,
            to: (last + 1) * MS_PER_DAY - 1,
        }
    }
}

pub fn epoch_day(d: NaiveDate) -> i64 {
    d.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch"))
        .num_days()
}

/// Calendar date of an epoch day, saturating at chrono's supported range.
pub fn date_of_day(day: i64) -> NaiveDate {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch");
    chrono::TimeDelta::try_days(day)
        .and_then(|d| epoch.checked_add_signed(d))
        .unwrap_or(if day < 0 {
            NaiveDate::MIN
        } else {
            NaiveDate::MAX
        })
}

pub fn date_of_ms(ms: i64) -> NaiveDate {
    date_of_day(day_of(ms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub records: u64,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayEntry {
    pub packets: FileEntry,
    pub eois: FileEntry,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u8,
    pub month: String,
    /// Keyed by two-digit day of month.
    pub days: BTreeMap<String, DayEntry>,
}

/// One persisted day.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotPartition {
    pub month: String,
    pub day: String,
    pub packets_path: PathBuf,
    pub eois_path: PathBuf,
    pub packet_records: u64,
    pub eoi_records: u64,
}

/// An index rebuilt from snapshots. Only shared access is exposed.
#[derive(Debug)]
pub struct ReadOnlyIndex(PyramidIndex);

impl Deref for ReadOnlyIndex {
    type Target = PyramidIndex;

    fn deref(&self) -> &PyramidIndex {
        &self.0
    }
}

impl ReadOnlyIndex {
    pub fn into_inner(self) -> PyramidIndex {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct SnapshotStore {
    root: PathBuf,
}

fn month_name(d: NaiveDate) -> String {
    format!("{:04}-{:02}", d.year(), d.month())
}

fn day_name(d: NaiveDate) -> String {
    format!("{:02}", d.day())
}

fn encode_record<T: Serialize>(item: &T) -> Result<Vec<u8>, SnapshotError> {
    let payload =
        serde_json::to_vec(item).map_err(|e| SnapshotError::CorruptSnapshot(e.to_string()))?;
    let mut crc = crc32fast::Hasher::new();
    crc.update(&[FORMAT_VERSION]);
    crc.update(&payload);
    let mut out = Vec::with_capacity(payload.len() + 9);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

fn decode_records<T: DeserializeOwned>(bytes: &[u8], what: &Path) -> Result<Vec<T>, SnapshotError> {
    let corrupt = |msg: &str| SnapshotError::CorruptSnapshot(format!("{}: {msg}", what.display()));
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 9 {
            return Err(corrupt("truncated record header"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let version = bytes[pos + 4];
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let body_end = pos + 5 + len;
        if body_end + 4 > bytes.len() {
            return Err(corrupt("truncated record"));
        }
        let payload = &bytes[pos + 5..body_end];
        let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().expect("4 bytes"));
        let mut crc = crc32fast::Hasher::new();
        crc.update(&[version]);
        crc.update(payload);
        if crc.finalize() != stored {
            return Err(corrupt("record checksum mismatch"));
        }
        out.push(serde_json::from_slice(payload).map_err(|e| corrupt(&e.to_string()))?);
        pos = body_end + 4;
    }
    Ok(out)
}

fn file_crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SnapshotError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl SnapshotStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SnapshotError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(SnapshotStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn month_dir(&self, month: &str) -> PathBuf {
        self.root.join(month)
    }

    fn paths(&self, d: NaiveDate) -> (PathBuf, PathBuf) {
        let dir = self.month_dir(&month_name(d));
        let day = day_name(d);
        (
            dir.join(format!("{day}.packets.bin")),
            dir.join(format!("{day}.eois.bin")),
        )
    }

    pub fn read_manifest(&self, month: &str) -> Result<Option<Manifest>, SnapshotError> {
        let path = self.month_dir(month).join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| SnapshotError::CorruptSnapshot(format!("{}: {e}", path.display())))?;
        if m.version != FORMAT_VERSION {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "manifest version {}",
                m.version
            )));
        }
        Ok(Some(m))
    }

    fn write_manifest(&self, m: &Manifest) -> Result<(), SnapshotError> {
        let dir = self.month_dir(&m.month);
        fs::create_dir_all(&dir)?;
        let bytes = serde_json::to_vec_pretty(m)
            .map_err(|e| SnapshotError::CorruptSnapshot(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), &bytes)
    }

    fn manifest_or_new(&self, month: &str) -> Result<Manifest, SnapshotError> {
        Ok(self.read_manifest(month)?.unwrap_or_else(|| Manifest {
            version: FORMAT_VERSION,
            month: month.to_string(),
            days: BTreeMap::new(),
        }))
    }

    /// Days with a manifest entry, across all months.
    pub fn available_days(&self) -> Result<BTreeSet<NaiveDate>, SnapshotError> {
        let mut out = BTreeSet::new();
        if !self.root.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            let Some(Period::Month { year, month }) = Period::parse(&name) else {
                continue;
            };
            if let Some(m) = self.read_manifest(&name)? {
                for d in m.days.keys() {
                    if let Some(date) = d
                        .parse()
                        .ok()
                        .and_then(|d| NaiveDate::from_ymd_opt(year, month, d))
                    {
                        out.insert(date);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes full day partitions (compacting any appended records) for every
    /// day of `period` that holds packets or EoIs. A single-day period is
    /// always written, even when empty.
    pub fn persist(
        &self,
        index: &PyramidIndex,
        period: Period,
    ) -> Result<Vec<SnapshotPartition>, SnapshotError> {
        let mut by_day_eois: BTreeMap<NaiveDate, Vec<&EventCluster>> = BTreeMap::new();
        for c in index.eois().iter() {
            let d = date_of_ms(c.timestamp);
            if period.contains(d) {
                by_day_eois.entry(d).or_default().push(c);
            }
        }
        let mut days: BTreeSet<NaiveDate> = index
            .days()
            .map(date_of_day)
            .filter(|d| period.contains(*d))
            .collect();
        days.extend(by_day_eois.keys().copied());
        if let Period::Day(d) = period {
            days.insert(d);
        }
        let mut out = Vec::new();
        for d in days {
            let mut packets: Vec<&DataPacket> = index.packets_on_day(epoch_day(d)).collect();
            packets.sort_by(|a, b| a.id.cmp(&b.id));
            let eois = by_day_eois.remove(&d).unwrap_or_default();
            out.push(self.write_day(d, &packets, &eois)?);
        }
        if out.is_empty() {
            if let Period::Month { year, month } = period {
                let m = self.manifest_or_new(&format!("{year:04}-{month:02}"))?;
                self.write_manifest(&m)?;
            }
        }
        Ok(out)
    }

    /// Replaces one day's partition.
    pub fn write_day(
        &self,
        d: NaiveDate,
        packets: &[&DataPacket],
        eois: &[&EventCluster],
    ) -> Result<SnapshotPartition, SnapshotError> {
        let (pp, ep) = self.paths(d);
        fs::create_dir_all(pp.parent().expect("month dir"))?;
        let mut pbytes = Vec::new();
        for p in packets {
            pbytes.extend(encode_record(p)?);
        }
        let mut ebytes = Vec::new();
        for e in eois {
            ebytes.extend(encode_record(e)?);
        }
        write_atomic(&pp, &pbytes)?;
        write_atomic(&ep, &ebytes)?;
        let mut m = self.manifest_or_new(&month_name(d))?;
        m.days.insert(
            day_name(d),
            DayEntry {
                packets: FileEntry {
                    records: packets.len() as u64,
                    bytes: pbytes.len() as u64,
                    crc32: file_crc(&pbytes),
                },
                eois: FileEntry {
                    records: eois.len() as u64,
                    bytes: ebytes.len() as u64,
                    crc32: file_crc(&ebytes),
                },
            },
        );
        self.write_manifest(&m)?;
        Ok(SnapshotPartition {
            month: month_name(d),
            day: day_name(d),
            packets_path: pp,
            eois_path: ep,
            packet_records: packets.len() as u64,
            eoi_records: eois.len() as u64,
        })
    }

    /// Replaces only the EoI file of a day, leaving its packet file untouched.
    pub fn write_day_eois(
        &self,
        d: NaiveDate,
        eois: &[&EventCluster],
    ) -> Result<(), SnapshotError> {
        let (_, ep) = self.paths(d);
        fs::create_dir_all(ep.parent().expect("month dir"))?;
        let mut bytes = Vec::new();
        for e in eois {
            bytes.extend(encode_record(e)?);
        }
        write_atomic(&ep, &bytes)?;
        let mut m = self.manifest_or_new(&month_name(d))?;
        m.days.entry(day_name(d)).or_default().eois = FileEntry {
            records: eois.len() as u64,
            bytes: bytes.len() as u64,
            crc32: file_crc(&bytes),
        };
        self.write_manifest(&m)
    }

    /// Rewrites a day from its own records, dropping repeated packet ids.
    pub fn compact_day(&self, d: NaiveDate) -> Result<Option<SnapshotPartition>, SnapshotError> {
        let Some((mut packets, eois)) = self.load_day(d)? else {
            return Ok(None);
        };
        packets.sort_by(|a, b| a.id.cmp(&b.id));
        packets.dedup_by(|a, b| a.id == b.id);
        let p: Vec<&DataPacket> = packets.iter().collect();
        let e: Vec<&EventCluster> = eois.iter().collect();
        self.write_day(d, &p, &e).map(Some)
    }

    /// Appends packet records to a day's file and extends its manifest checksum.
    pub fn append_packets(
        &self,
        d: NaiveDate,
        packets: &[&DataPacket],
    ) -> Result<(), SnapshotError> {
        if packets.is_empty() {
            return Ok(());
        }
        let (pp, _) = self.paths(d);
        fs::create_dir_all(pp.parent().expect("month dir"))?;
        let mut m = self.manifest_or_new(&month_name(d))?;
        let entry = m.days.entry(day_name(d)).or_default();
        let existing = fs::metadata(&pp).map(|md| md.len()).unwrap_or(0);
        if existing != entry.packets.bytes {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "{}: {} bytes on disk, manifest says {}",
                pp.display(),
                existing,
                entry.packets.bytes
            )));
        }
        let mut bytes = Vec::new();
        for p in packets {
            bytes.extend(encode_record(p)?);
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&pp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        let mut crc =
            crc32fast::Hasher::new_with_initial_len(entry.packets.crc32, entry.packets.bytes);
        crc.update(&bytes);
        entry.packets.crc32 = crc.finalize();
        entry.packets.bytes += bytes.len() as u64;
        entry.packets.records += packets.len() as u64;
        self.write_manifest(&m)
    }

    fn read_checked(&self, path: &Path, entry: &FileEntry) -> Result<Vec<u8>, SnapshotError> {
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(path)?.read_to_end(&mut bytes)?;
        } else if entry.bytes > 0 {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "{} missing",
                path.display()
            )));
        }
        if bytes.len() as u64 != entry.bytes || file_crc(&bytes) != entry.crc32 {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "{}: checksum mismatch",
                path.display()
            )));
        }
        Ok(bytes)
    }

    /// Packets and EoIs of one persisted day; `None` if the day was never written.
    pub fn load_day(&self, d: NaiveDate) -> Result<Option<DayContents>, SnapshotError> {
        let Some(m) = self.read_manifest(&month_name(d))? else {
            return Ok(None);
        };
        let Some(entry) = m.days.get(&day_name(d)) else {
            return Ok(None);
        };
        let (pp, ep) = self.paths(d);
        let packets: Vec<DataPacket> =
            decode_records(&self.read_checked(&pp, &entry.packets)?, &pp)?;
        let eois: Vec<EventCluster> = decode_records(&self.read_checked(&ep, &entry.eois)?, &ep)?;
        if packets.len() as u64 != entry.packets.records || eois.len() as u64 != entry.eois.records
        {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "{d}: record count mismatch"
            )));
        }
        Ok(Some((packets, eois)))
    }

    pub fn load_day_eois(&self, d: NaiveDate) -> Result<Vec<EventCluster>, SnapshotError> {
        Ok(self.load_day(d)?.map(|(_, e)| e).unwrap_or_default())
    }

    /// Days of `period` that have partitions, in order. A month period walks its
    /// daily partitions.
    pub fn partitions(&self, period: Period) -> Result<Vec<NaiveDate>, SnapshotError> {
        let mut months: BTreeSet<String> = BTreeSet::new();
        for d in period.days() {
            months.insert(month_name(d));
        }
        let mut out = Vec::new();
        for month in months {
            let Some(m) = self.read_manifest(&month)? else {
                continue;
            };
            for d in period.days() {
                if month_name(d) == month && m.days.contains_key(&day_name(d)) {
                    out.push(d);
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds an index from every partition of `period`.
    pub fn load(
        &self,
        period: Period,
        config: IndexConfig,
    ) -> Result<ReadOnlyIndex, SnapshotError> {
        let mut index = PyramidIndex::new(config);
        for d in self.partitions(period)? {
            let (packets, eois) = self.load_day(d)?.expect("listed partition exists");
            for p in packets {
                index
                    .insert(p)
                    .map_err(|e| SnapshotError::CorruptSnapshot(e.to_string()))?;
            }
            for e in eois {
                index.upsert_cluster(e);
            }
        }
        Ok(ReadOnlyIndex(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::BBox;
    use crate::index::tests_support::pkt;
    use crate::index::TimeRange;

    fn june(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2017, 6, day).unwrap()
    }

    #[test]
    fn extreme_days_saturate() {
        assert_eq!(date_of_day(0), NaiveDate::from_ymd_opt(1970, 1, 1).unwrap());
        assert_eq!(date_of_ms(i64::MIN), NaiveDate::MIN);
        assert_eq!(date_of_ms(i64::MAX), NaiveDate::MAX);
    }

    #[test]
    fn period_parsing() {
        assert_eq!(
            Period::parse("2017-06"),
            Some(Period::Month {
                year: 2017,
                month: 6
            })
        );
        assert_eq!(Period::parse("2017-06-03"), Some(Period::Day(june(3))));
        assert_eq!(Period::parse("2017-13"), None);
        assert_eq!(
            Period::Month {
                year: 2017,
                month: 6
            }
            .days()
            .len(),
            30
        );
        let tr = Period::Day(june(1)).time_range();
        assert_eq!(tr.to - tr.from + 1, MS_PER_DAY);
    }

    #[test]
    fn empty_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        let idx = PyramidIndex::new(IndexConfig::default());
        let parts = store.persist(&idx, Period::Day(june(1))).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].packet_records, 0);
        assert!(parts[0].packets_path.exists());
        let loaded = store
            .load(Period::Day(june(1)), IndexConfig::default())
            .unwrap();
        assert!(loaded.is_empty());
        store
            .persist(
                &idx,
                Period::Month {
                    year: 2017,
                    month: 7,
                },
            )
            .unwrap();
        assert!(store
            .load(
                Period::Month {
                    year: 2017,
                    month: 7
                },
                IndexConfig::default()
            )
            .unwrap()
            .is_empty());
    }

    #[test]
    fn month_walks_daily_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        let mut idx = PyramidIndex::new(IndexConfig {
            split_threshold: 4,
            ..Default::default()
        });
        for d in 1..=30u32 {
            let t = epoch_day(june(d)) * MS_PER_DAY + 3_600_000;
            idx.insert(pkt(&format!("p{d}"), 6.5 + d as f64 * 1e-3, 3.4, t))
                .unwrap();
        }
        let parts = store
            .persist(
                &idx,
                Period::Month {
                    year: 2017,
                    month: 6,
                },
            )
            .unwrap();
        assert_eq!(parts.len(), 30);
        assert_eq!(
            store
                .partitions(Period::Month {
                    year: 2017,
                    month: 6
                })
                .unwrap()
                .len(),
            30
        );
        assert!(dir.path().join("2017-06/manifest").exists());
        assert!(dir.path().join("2017-06/15.packets.bin").exists());
        assert!(dir.path().join("2017-06/15.eois.bin").exists());
        let loaded = store
            .load(
                Period::Month {
                    year: 2017,
                    month: 6,
                },
                IndexConfig::default(),
            )
            .unwrap();
        assert_eq!(loaded.len(), 30);
        let single = store
            .load(Period::Day(june(7)), IndexConfig::default())
            .unwrap();
        assert_eq!(
            single.range_query(&BBox::WORLD, &TimeRange::ALL),
            vec!["p7".to_string()]
        );
        assert_eq!(store.available_days().unwrap().len(), 30);
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        let mut idx = PyramidIndex::new(IndexConfig::default());
        let t = epoch_day(june(2)) * MS_PER_DAY;
        idx.insert(pkt("a", 1.0, 1.0, t)).unwrap();
        let parts = store.persist(&idx, Period::Day(june(2))).unwrap();
        let mut bytes = fs::read(&parts[0].packets_path).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 0x55;
        fs::write(&parts[0].packets_path, bytes).unwrap();
        let err = store
            .load(Period::Day(june(2)), IndexConfig::default())
            .unwrap_err();
        assert!(matches!(err, SnapshotError::CorruptSnapshot(_)), "{err}");
    }

    #[test]
    fn append_then_compact() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        let t = epoch_day(june(4)) * MS_PER_DAY;
        let a = pkt("a", 1.0, 1.0, t);
        let b = pkt("b", 1.0, 1.1, t + 5);
        store.append_packets(june(4), &[&a]).unwrap();
        store.append_packets(june(4), &[&b]).unwrap();
        let (packets, eois) = store.load_day(june(4)).unwrap().unwrap();
        assert_eq!(packets.len(), 2);
        assert!(eois.is_empty());
        let mut idx = PyramidIndex::new(IndexConfig::default());
        idx.insert(a).unwrap();
        idx.insert(b).unwrap();
        store.persist(&idx, Period::Day(june(4))).unwrap();
        assert_eq!(store.load_day(june(4)).unwrap().unwrap().0.len(), 2);
    }
}
