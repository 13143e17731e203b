//! Source-agnostic data packets.
//!
//! Every feed is cleaned and mapped by a declarative [`SourceAdapterSpec`]
//! into a [`DataPacket`]: a metadata header (source, location, time, content
//! type) plus a payload (cleaned text, tokens, tags, user attributes). Nothing
//! downstream of this module sees source-specific field names.

mod adapter;
mod clean;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use adapter::{
    parse_record_line, wrap, AdapterRegistry, SourceAdapterSpec, TagRule, Tagger, TimeFormat,
};
pub use clean::{clean, clean_text, Cleaned};

use crate::text::tokenize;
use crate::TermVector;

/// One unparsed post/photo/review as received from a feed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub source_id: String,
    pub body: serde_json::Map<String, serde_json::Value>,
    /// UTC milliseconds.
    pub received_at: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContentType {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "image+text")]
    ImageText,
}

impl fmt::Display for ContentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContentType::Text => "text",
            ContentType::ImageText => "image+text",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketHeader {
    pub source: String,
    pub location: Location,
    /// UTC milliseconds.
    pub time: i64,
    #[serde(rename = "type")]
    pub content_type: ContentType,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PacketPayload {
    pub text: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPacket {
    pub id: String,
    pub header: PacketHeader,
    pub payload: PacketPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term_vector: Option<TermVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_class: Option<String>,
}

impl DataPacket {
    pub fn lat(&self) -> f64 {
        self.header.location.lat
    }

    pub fn lon(&self) -> f64 {
        self.header.location.lon
    }

    pub fn time(&self) -> i64 {
        self.header.time
    }

    /// Terms the packet contributes to similarity: its tokens followed by its tags.
    pub fn terms(&self) -> Vec<String> {
        let mut terms = self.payload.tokens.clone();
        terms.extend(self.payload.tags.iter().cloned());
        terms
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptySource,
    LatOutOfRange(String),
    LonOutOfRange(String),
    NonPositiveTime(i64),
    EmptyContent,
    TagNotNormalized(String),
    TokensMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptySource => write!(f, "empty source"),
            Violation::LatOutOfRange(v) => write!(f, "lat out of range: {v}"),
            Violation::LonOutOfRange(v) => write!(f, "lon out of range: {v}"),
            Violation::NonPositiveTime(t) => write!(f, "time must be positive, got {t}"),
            Violation::EmptyContent => write!(f, "empty content"),
            Violation::TagNotNormalized(t) => write!(f, "tag not normalized: {t:?}"),
            Violation::TokensMismatch => write!(f, "tokens do not match text"),
        }
    }
}

/// Every invariant the packet breaks; empty when it is well formed.
pub fn validate(packet: &DataPacket) -> Vec<Violation> {
    let mut out = Vec::new();
    if packet.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if packet.header.source.is_empty() {
        out.push(Violation::EmptySource);
    }
    let Location { lat, lon } = packet.header.location;
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
        out.push(Violation::LatOutOfRange(lat.to_string()));
    }
    if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
        out.push(Violation::LonOutOfRange(lon.to_string()));
    }
    if packet.header.time <= 0 {
        out.push(Violation::NonPositiveTime(packet.header.time));
    }
    if packet.payload.text.trim().is_empty() && packet.payload.tags.is_empty() {
        out.push(Violation::EmptyContent);
    }
    for t in &packet.payload.tags {
        if t.is_empty() || t.starts_with('#') || *t != t.to_lowercase() {
            out.push(Violation::TagNotNormalized(t.clone()));
        }
    }
    if packet.payload.tokens != tokenize(&packet.payload.text) {
        out.push(Violation::TokensMismatch);
    }
    out
}
