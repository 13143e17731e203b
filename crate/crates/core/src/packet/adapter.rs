use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::clean::{clean, push_tag};
use super::{ContentType, DataPacket, Location, PacketHeader, PacketPayload, RawRecord};
use crate::error::{AdapterError, WrapError};
use crate::text::tokenize;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    /// Integer (or numeric string) milliseconds since the epoch.
    #[default]
    EpochMillis,
    EpochSeconds,
    Rfc3339,
    /// A chrono format string; naive values are taken as UTC.
    Pattern(String),
}

/// How tags are collected for a source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagRule {
    /// Hashtags plus the content terms picked by the registry's [`Tagger`], if one is installed.
    #[default]
    HashtagsAndTerms,
    /// Hashtags and explicit tag fields only.
    Hashtags,
}

/// Declarative field mapping for one source.
///
/// Paths are dot-separated. A numeric segment indexes an array and `*` fans
/// out over every element of an array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceAdapterSpec {
    pub source: String,
    #[serde(default)]
    pub id: Option<String>,
    /// Text fields, concatenated with a space in order.
    pub text: Vec<String>,
    pub lat: String,
    pub lon: String,
    pub time: String,
    #[serde(default)]
    pub time_format: TimeFormat,
    /// Explicit tag field: an array of strings or a whitespace/comma separated string.
    #[serde(default)]
    pub tags: Option<String>,
    #[serde(default)]
    pub tag_rule: TagRule,
    #[serde(default = "default_content_type")]
    pub content_type: ContentType,
    #[serde(default)]
    pub user: BTreeMap<String, String>,
    #[serde(default)]
    pub media_url: Option<String>,
}

fn default_content_type() -> ContentType {
    ContentType::Text
}

#[derive(Deserialize)]
struct AdapterFile {
    #[serde(default)]
    adapter: Vec<SourceAdapterSpec>,
}

impl SourceAdapterSpec {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let missing = |what: &str| {
            AdapterError::InvalidAdapter(format!("{}: missing {what} path", self.source))
        };
        if self.source.trim().is_empty() {
            return Err(AdapterError::InvalidAdapter("empty source id".into()));
        }
        if self.lat.trim().is_empty() {
            return Err(missing("lat"));
        }
        if self.lon.trim().is_empty() {
            return Err(missing("lon"));
        }
        if self.time.trim().is_empty() {
            return Err(missing("time"));
        }
        if self.text.is_empty() || self.text.iter().any(|p| p.trim().is_empty()) {
            return Err(missing("text"));
        }
        Ok(())
    }

    /// Tweet-shaped records: GeoJSON `[lon, lat]` coordinates and millisecond timestamps.
    pub fn twitter() -> Self {
        SourceAdapterSpec {
            source: "twitter".into(),
            id: Some("id_str".into()),
            text: vec!["text".into()],
            lat: "coordinates.coordinates.1".into(),
            lon: "coordinates.coordinates.0".into(),
            time: "timestamp_ms".into(),
            time_format: TimeFormat::EpochMillis,
            tags: Some("entities.hashtags.*.text".into()),
            tag_rule: TagRule::HashtagsAndTerms,
            content_type: ContentType::Text,
            user: BTreeMap::from([
                ("screen_name".to_string(), "user.screen_name".to_string()),
                ("followers".to_string(), "user.followers_count".to_string()),
                ("lang".to_string(), "user.lang".to_string()),
            ]),
            media_url: None,
        }
    }

    /// Photo-shaped records: title/description text, space separated tags.
    pub fn flickr() -> Self {
        SourceAdapterSpec {
            source: "flickr".into(),
            id: Some("id".into()),
            text: vec!["title".into(), "description".into()],
            lat: "latitude".into(),
            lon: "longitude".into(),
            time: "datetaken".into(),
            time_format: TimeFormat::Pattern("%Y-%m-%d %H:%M:%S".into()),
            tags: Some("tags".into()),
            tag_rule: TagRule::Hashtags,
            content_type: ContentType::ImageText,
            user: BTreeMap::from([("owner".to_string(), "ownername".to_string())]),
            media_url: Some("url_m".into()),
        }
    }

    /// Reads `[[adapter]]` tables from a TOML document.
    pub fn load_toml(doc: &str) -> Result<Vec<SourceAdapterSpec>, AdapterError> {
        let file: AdapterFile =
            toml::from_str(doc).map_err(|e| AdapterError::Config(e.to_string()))?;
        Ok(file.adapter)
    }
}

/// Hook for picking content terms (e.g. nouns and verbs) out of a token list.
pub trait Tagger: Send + Sync {
    fn content_terms(&self, tokens: &[String]) -> Vec<String>;
}

#[derive(Clone, Default)]
pub struct AdapterRegistry {
    adapters: HashMap<String, SourceAdapterSpec>,
    tagger: Option<Arc<dyn Tagger>>,
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut sources: Vec<&String> = self.adapters.keys().collect();
        sources.sort();
        f.debug_struct("AdapterRegistry")
            .field("sources", &sources)
            .field("tagger", &self.tagger.is_some())
            .finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(SourceAdapterSpec::twitter()).expect("builtin");
        r.register(SourceAdapterSpec::flickr()).expect("builtin");
        r
    }

    pub fn register(&mut self, spec: SourceAdapterSpec) -> Result<(), AdapterError> {
        spec.validate()?;
        if self.adapters.contains_key(&spec.source) {
            return Err(AdapterError::DuplicateSource(spec.source));
        }
        self.adapters.insert(spec.source.clone(), spec);
        Ok(())
    }

    pub fn set_tagger(&mut self, tagger: Arc<dyn Tagger>) {
        self.tagger = Some(tagger);
    }

    pub fn get(&self, source: &str) -> Option<&SourceAdapterSpec> {
        self.adapters.get(source)
    }

    pub fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.adapters.keys().cloned().collect();
        s.sort();
        s
    }

    pub fn wrap(&self, record: &RawRecord) -> Result<DataPacket, WrapError> {
        let spec = self
            .adapters
            .get(&record.source_id)
            .ok_or_else(|| WrapError::UnknownSource(record.source_id.clone()))?;
        wrap_with(record, spec, self.tagger.as_deref())
    }
}

/// Wraps a record with an explicit adapter (no tagger).
pub fn wrap(record: &RawRecord, spec: &SourceAdapterSpec) -> Result<DataPacket, WrapError> {
    if record.source_id != spec.source {
        return Err(WrapError::UnknownSource(record.source_id.clone()));
    }
    wrap_with(record, spec, None)
}

fn wrap_with(
    record: &RawRecord,
    spec: &SourceAdapterSpec,
    tagger: Option<&dyn Tagger>,
) -> Result<DataPacket, WrapError> {
    if record.body.is_empty() {
        return Err(WrapError::MalformedRecord("empty body".into()));
    }
    let body = &record.body;
    let lat = number_at(body, &spec.lat).ok_or(WrapError::MissingGeo)?;
    let lon = number_at(body, &spec.lon).ok_or(WrapError::MissingGeo)?;
    if crate::geo::check_coords(lat, lon).is_err() {
        return Err(WrapError::MissingGeo);
    }
    let time = parse_time(first_at(body, &spec.time), &spec.time_format)?;

    let raw_text: Vec<String> = spec
        .text
        .iter()
        .filter_map(|p| first_at(body, p).and_then(scalar_string))
        .filter(|s| !s.trim().is_empty())
        .collect();
    let cleaned = clean(&raw_text.join(" "));
    let tokens = tokenize(&cleaned.text);

    let mut tags = Vec::new();
    for h in &cleaned.hashtags {
        push_tag(&mut tags, h);
    }
    if let Some(path) = &spec.tags {
        for v in values_at(body, path) {
            match v {
                Value::String(s) => {
                    for t in s.split(|c: char| c.is_whitespace() || c == ',') {
                        push_tag(&mut tags, t);
                    }
                }
                Value::Array(items) => {
                    for item in items {
                        if let Some(s) = scalar_string(item) {
                            push_tag(&mut tags, &s);
                        }
                    }
                }
                other => {
                    if let Some(s) = scalar_string(other) {
                        push_tag(&mut tags, &s);
                    }
                }
            }
        }
    }
    if spec.tag_rule == TagRule::HashtagsAndTerms {
        if let Some(tagger) = tagger {
            for t in tagger.content_terms(&tokens) {
                push_tag(&mut tags, &t);
            }
        }
    }
    if cleaned.text.is_empty() && tags.is_empty() {
        return Err(WrapError::MalformedRecord("empty content".into()));
    }

    let user: BTreeMap<String, String> = spec
        .user
        .iter()
        .filter_map(|(attr, path)| {
            first_at(body, path)
                .and_then(scalar_string)
                .map(|v| (attr.clone(), v))
        })
        .collect();
    let media_url = spec
        .media_url
        .as_deref()
        .and_then(|p| first_at(body, p))
        .and_then(scalar_string);

    let native_id = spec
        .id
        .as_deref()
        .and_then(|p| first_at(body, p))
        .and_then(scalar_string);
    let id = packet_id(&spec.source, native_id.as_deref(), time, &cleaned.text);

    Ok(DataPacket {
        id,
        header: PacketHeader {
            source: spec.source.clone(),
            location: Location { lat, lon },
            time,
            content_type: spec.content_type,
        },
        payload: PacketPayload {
            text: cleaned.text,
            tokens,
            tags,
            user: (!user.is_empty()).then_some(user),
            media_url,
        },
        term_vector: None,
        event_class: None,
    })
}

/// Stable id: hash of (source, native id) when the feed has one, else of (source, time, text).
pub(crate) fn packet_id(source: &str, native_id: Option<&str>, time: i64, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.as_bytes());
    h.update([0u8]);
    match native_id {
        Some(n) => {
            h.update(b"id\0");
            h.update(n.as_bytes());
        }
        None => {
            h.update(b"tt\0");
            h.update(time.to_be_bytes());
            h.update([0u8]);
            h.update(text.as_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

fn values_at<'a>(body: &'a serde_json::Map<String, Value>, path: &str) -> Vec<&'a Value> {
    let mut segments = path.split('.');
    let Some(first) = segments.next() else {
        return Vec::new();
    };
    let mut current: Vec<&Value> = body.get(first).into_iter().collect();
    for seg in segments {
        let mut next = Vec::new();
        for v in current {
            match (seg, v) {
                ("*", Value::Array(items)) => next.extend(items.iter()),
                (_, Value::Object(m)) => next.extend(m.get(seg)),
                (_, Value::Array(items)) => {
                    if let Ok(i) = seg.parse::<usize>() {
                        next.extend(items.get(i));
                    }
                }
                _ => {}
            }
        }
        current = next;
    }
    current.retain(|v| !v.is_null());
    current
}

fn first_at<'a>(body: &'a serde_json::Map<String, Value>, path: &str) -> Option<&'a Value> {
    values_at(body, path).into_iter().next()
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn number_at(body: &serde_json::Map<String, Value>, path: &str) -> Option<f64> {
    match first_at(body, path)? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|v| v.is_finite())
}

fn parse_time(value: Option<&Value>, format: &TimeFormat) -> Result<i64, WrapError> {
    let value = value.ok_or_else(|| WrapError::MalformedTime("missing".into()))?;
    let bad = || WrapError::MalformedTime(value.to_string());
    let as_i64 = || match value {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64)),
        Value::String(s) => s.trim().parse::<i64>().ok(),
        _ => None,
    };
    let ms = match format {
        TimeFormat::EpochMillis => as_i64().ok_or_else(bad)?,
        TimeFormat::EpochSeconds => as_i64().and_then(|s| s.checked_mul(1000)).ok_or_else(bad)?,
        TimeFormat::Rfc3339 => {
            let s = value.as_str().ok_or_else(bad)?;
            DateTime::parse_from_rfc3339(s.trim())
                .map_err(|_| bad())?
                .timestamp_millis()
        }
        TimeFormat::Pattern(p) => {
            let s = value.as_str().ok_or_else(bad)?.trim();
            match DateTime::parse_from_str(s, p) {
                Ok(dt) => dt.timestamp_millis(),
                Err(_) => NaiveDateTime::parse_from_str(s, p)
                    .map_err(|_| bad())?
                    .and_utc()
                    .timestamp_millis(),
            }
        }
    };
    if ms <= 0 {
        return Err(bad());
    }
    Ok(ms)
}

/// Parses one line of an ingestion file: a JSON object with a top-level `"source"`.
pub fn parse_record_line(line: &str, received_at: i64) -> Result<RawRecord, WrapError> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| WrapError::MalformedRecord(e.to_string()))?;
    let Value::Object(body) = value else {
        return Err(WrapError::MalformedRecord("not an object".into()));
    };
    let source_id = match body.get("source") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Err(WrapError::MalformedRecord("missing source field".into())),
    };
    Ok(RawRecord {
        source_id,
        body,
        received_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::validate;
    use serde_json::json;

    fn record(v: Value) -> RawRecord {
        let Value::Object(body) = v else { panic!() };
        RawRecord {
            source_id: body["source"].as_str().unwrap().to_string(),
            body,
            received_at: 1,
        }
    }

    fn tweet() -> RawRecord {
        record(json!({
            "source": "twitter",
            "id_str": "42",
            "text": "Fire on 5th Ave! http://t.co/x #nyc",
            "coordinates": {"type": "Point", "coordinates": [-73.96, 40.78]},
            "timestamp_ms": "1496275200000",
            "user": {"screen_name": "ann", "followers_count": 10}
        }))
    }

    #[test]
    fn wraps_tweet() {
        let p = wrap(&tweet(), &SourceAdapterSpec::twitter()).unwrap();
        assert_eq!(p.header.source, "twitter");
        assert_eq!(
            p.header.location,
            Location {
                lat: 40.78,
                lon: -73.96
            }
        );
        assert_eq!(p.header.time, 1_496_275_200_000);
        assert_eq!(p.payload.text, "Fire on 5th Ave!");
        assert_eq!(p.payload.tags, vec!["nyc"]);
        assert_eq!(p.payload.tokens, vec!["fire", "5th", "ave"]);
        assert_eq!(p.payload.user.as_ref().unwrap()["followers"], "10");
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn wraps_flickr_photo() {
        let r = record(json!({
            "source": "flickr",
            "id": 9,
            "title": "#Sunset #NYC",
            "latitude": "40.7",
            "longitude": -74.0,
            "datetaken": "2017-06-01 18:30:00",
            "tags": "skyline Hudson",
            "url_m": "https://example.org/p.jpg"
        }));
        let p = AdapterRegistry::with_builtins().wrap(&r).unwrap();
        assert_eq!(p.header.content_type, ContentType::ImageText);
        assert_eq!(p.payload.text, "");
        assert_eq!(p.payload.tags, vec!["sunset", "nyc", "skyline", "hudson"]);
        assert_eq!(
            p.payload.media_url.as_deref(),
            Some("https://example.org/p.jpg")
        );
        assert_eq!(p.header.time, 1_496_341_800_000);
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn missing_geo_and_time() {
        let mut r = tweet();
        r.body.remove("coordinates");
        assert_eq!(
            wrap(&r, &SourceAdapterSpec::twitter()),
            Err(WrapError::MissingGeo)
        );
        let mut r = tweet();
        r.body["coordinates"] = json!({"coordinates": [-73.96, 140.0]});
        assert_eq!(
            wrap(&r, &SourceAdapterSpec::twitter()),
            Err(WrapError::MissingGeo)
        );
        let mut r = tweet();
        r.body["timestamp_ms"] = json!("yesterday");
        assert!(matches!(
            wrap(&r, &SourceAdapterSpec::twitter()),
            Err(WrapError::MalformedTime(_))
        ));
    }

    #[test]
    fn unknown_source() {
        let reg = AdapterRegistry::new();
        assert_eq!(
            reg.wrap(&tweet()),
            Err(WrapError::UnknownSource("twitter".into()))
        );
    }

    #[test]
    fn register_new_source() {
        let mut reg = AdapterRegistry::with_builtins();
        let insta = SourceAdapterSpec {
            source: "instagram".into(),
            id: Some("pk".into()),
            text: vec!["caption".into()],
            lat: "location.lat".into(),
            lon: "location.lng".into(),
            time: "taken_at".into(),
            time_format: TimeFormat::EpochSeconds,
            tags: None,
            tag_rule: TagRule::Hashtags,
            content_type: ContentType::ImageText,
            user: BTreeMap::new(),
            media_url: None,
        };
        reg.register(insta.clone()).unwrap();
        let r = record(json!({
            "source": "instagram", "pk": "a1", "caption": "Concert tonight #music",
            "location": {"lat": 6.45, "lng": 3.39}, "taken_at": 1496275200
        }));
        let p = reg.wrap(&r).unwrap();
        assert_eq!(p.payload.tags, vec!["music"]);
        assert_eq!(p.header.time, 1_496_275_200_000);
        assert!(reg.wrap(&tweet()).is_ok());
        assert_eq!(
            reg.register(insta),
            Err(AdapterError::DuplicateSource("instagram".into()))
        );
    }

    #[test]
    fn rejects_adapter_without_lat() {
        let mut spec = SourceAdapterSpec::twitter();
        spec.source = "other".into();
        spec.lat = String::new();
        assert!(matches!(
            AdapterRegistry::new().register(spec),
            Err(AdapterError::InvalidAdapter(_))
        ));
    }

    #[test]
    fn deterministic_and_deduplicating_ids() {
        let a = wrap(&tweet(), &SourceAdapterSpec::twitter()).unwrap();
        let mut r = tweet();
        r.received_at = 99;
        let b = wrap(&r, &SourceAdapterSpec::twitter()).unwrap();
        assert_eq!(a, b);
        r.body.remove("id_str");
        let c = wrap(&r, &SourceAdapterSpec::twitter()).unwrap();
        assert_ne!(a.id, c.id);
        assert_eq!(
            c.id,
            packet_id("twitter", None, c.header.time, "Fire on 5th Ave!")
        );
    }

    #[test]
    fn tagger_hook_adds_terms() {
        struct FirstToken;
        impl Tagger for FirstToken {
            fn content_terms(&self, tokens: &[String]) -> Vec<String> {
                tokens.iter().take(1).cloned().collect()
            }
        }
        let mut reg = AdapterRegistry::with_builtins();
        reg.set_tagger(Arc::new(FirstToken));
        let p = reg.wrap(&tweet()).unwrap();
        assert_eq!(p.payload.tags, vec!["nyc", "fire"]);
    }

    #[test]
    fn loads_toml_specs() {
        let doc = r#"
            [[adapter]]
            source = "yelp"
            text = ["review"]
            lat = "lat"
            lon = "lng"
            time = "date"
            time_format = "rfc3339"
            tag_rule = "hashtags"
        "#;
        let specs = SourceAdapterSpec::load_toml(doc).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].time_format, TimeFormat::Rfc3339);
        let r = record(
            json!({"source": "yelp", "review": "Great jazz", "lat": 1.0, "lng": 2.0, "date": "2017-06-01T00:00:00Z"}),
        );
        assert_eq!(wrap(&r, &specs[0]).unwrap().header.time, 1_496_275_200_000);
    }

    #[test]
    fn parses_ingest_lines() {
        let r = parse_record_line(r#"{"source":"twitter","text":"x"}"#, 5).unwrap();
        assert_eq!(r.source_id, "twitter");
        assert!(parse_record_line("not json", 5).is_err());
        assert!(parse_record_line(r#"{"text":"x"}"#, 5).is_err());
        assert!(parse_record_line("[1]", 5).is_err());
    }
}
