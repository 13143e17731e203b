//! Labeled synthetic streams: planted events over uniform background noise.

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eoi::{Scale, ScaleMap};
use crate::geo::{geohash_encode, haversine_m, BBox, GeohashKey};
use crate::index::MS_PER_HOUR;
use crate::text::{ClassCorpus, Stopwords};

const M_PER_DEG_LAT: f64 = 111_320.0;

/// One event planted in the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEventSpec {
    pub id: String,
    pub scale: Scale,
    /// Geohash cell the event is centred in; its precision sets the scale.
    pub cell: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_m: f64,
    pub start_ms: i64,
    pub end_ms: i64,
    pub topic: Vec<String>,
    pub class: Option<String>,
    pub packets: usize,
}

impl PlantedEventSpec {
    pub fn validate(&self, scale_map: &ScaleMap) -> Result<(), String> {
        let key = GeohashKey::new(self.cell.as_str()).map_err(|e| e.to_string())?;
        if scale_map.scale_for_precision(key.precision()) != self.scale {
            return Err(format!(
                "{}: cell precision {} is not {}",
                self.id,
                key.precision(),
                self.scale.name()
            ));
        }
        if !key.bbox().contains(self.lat, self.lon) {
            return Err(format!("{}: centre outside its cell", self.id));
        }
        let (h, w) = cell_size_m(key.precision(), self.lat);
        if !(self.radius_m > 0.0 && self.radius_m < h.min(w) / 2.0) {
            return Err(format!(
                "{}: radius {} m does not fit the cell",
                self.id, self.radius_m
            ));
        }
        if self.end_ms <= self.start_ms || self.topic.is_empty() || self.packets == 0 {
            return Err(format!("{}: empty time span, topic or volume", self.id));
        }
        Ok(())
    }
}

/// A cell and interval at one scale where nothing was planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeProbe {
    pub id: String,
    pub scale: Scale,
    pub cell: String,
    pub from_ms: i64,
    pub to_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthLine {
    Event(PlantedEventSpec),
    Negative(NegativeProbe),
}

/// Uniform background chatter over a region and interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub region: String,
    pub from_ms: i64,
    pub to_ms: i64,
    pub count: usize,
    pub words_per_record: usize,
    /// Background words are drawn uniformly from this many filler terms.
    pub vocabulary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    /// Precision-3 cell holding every event.
    pub region: String,
    pub start_ms: i64,
    pub timeline_ms: i64,
    /// Events start within `[start, start + active_ms)`.
    pub active_ms: i64,
    pub event_span_ms: i64,
    pub events_per_scale: usize,
    /// Packets per event, Local through City.
    pub volumes: [usize; 5],
    pub noise_ratio: f64,
    pub probes_per_scale: usize,
    pub flickr_share: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            region: geohash_encode(6.45, 3.39, 3)
                .expect("valid point")
                .as_str()
                .to_string(),
            start_ms: Utc
                .with_ymd_and_hms(2017, 6, 1, 0, 0, 0)
                .unwrap()
                .timestamp_millis(),
            timeline_ms: 84 * MS_PER_HOUR,
            active_ms: 60 * MS_PER_HOUR,
            event_span_ms: 3 * MS_PER_HOUR,
            events_per_scale: 4,
            volumes: [30, 40, 50, 80, 160],
            noise_ratio: 10.0,
            probes_per_scale: 4,
            flickr_share: 0.2,
        }
    }
}

impl BenchmarkConfig {
    /// A single-window stream of about `total` records with the same event layout.
    pub fn single_window(total: usize, seed: u64) -> Self {
        let base = BenchmarkConfig::default();
        let per_round: usize = base.volumes.iter().sum::<usize>() * base.events_per_scale;
        let k = total as f64 / (per_round as f64 * (1.0 + base.noise_ratio));
        BenchmarkConfig {
            seed,
            timeline_ms: MS_PER_HOUR / 2,
            active_ms: MS_PER_HOUR / 4,
            event_span_ms: MS_PER_HOUR / 4,
            volumes: base
                .volumes
                .map(|v| ((v as f64 * k).round() as usize).max(1)),
            probes_per_scale: 0,
            ..base
        }
    }

    pub fn total_event_packets(&self) -> usize {
        self.volumes.iter().sum::<usize>() * self.events_per_scale
    }

    pub fn noise_count(&self) -> usize {
        (self.total_event_packets() as f64 * self.noise_ratio).round() as usize
    }
}

/// Generator output: record lines sorted by time, and the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub records: Vec<String>,
    pub truth: Vec<TruthLine>,
}

impl Synthetic {
    pub fn events(&self) -> impl Iterator<Item = &PlantedEventSpec> {
        self.truth.iter().filter_map(|t| match t {
            TruthLine::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn probes(&self) -> impl Iterator<Item = &NegativeProbe> {
        self.truth.iter().filter_map(|t| match t {
            TruthLine::Negative(p) => Some(p),
            _ => None,
        })
    }

    pub fn truth_jsonl(&self) -> String {
        to_jsonl(&self.truth)
    }

    pub fn records_jsonl(&self) -> String {
        let mut s = self.records.join("\n");
        s.push('\n');
        s
    }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|t| serde_json::to_string(t).expect("serializable") + "\n")
        .collect()
}

pub fn parse_truth(doc: &str) -> Result<Vec<TruthLine>, String> {
    doc.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("truth line {}: {e}", i + 1)))
        .collect()
}

/// Cell height and width in metres at latitude `lat`.
pub fn cell_size_m(precision: usize, lat: f64) -> (f64, f64) {
    let (h, w) = crate::geo::cell_size_deg(precision);
    (
        h * M_PER_DEG_LAT,
        w * M_PER_DEG_LAT * lat.to_radians().cos(),
    )
}

fn offset(lat: f64, lon: f64, north_m: f64, east_m: f64) -> (f64, f64) {
    (
        lat + north_m / M_PER_DEG_LAT,
        lon + east_m / (M_PER_DEG_LAT * lat.to_radians().cos()),
    )
}

/// Pronounceable filler words that collide with no stopword or class seed term.
pub fn filler_vocabulary(n: usize, corpus: &ClassCorpus) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let seeds: std::collections::HashSet<&str> = corpus
        .class_names()
        .flat_map(|c| corpus.seed(c).into_iter().flat_map(|s| s.terms()))
        .collect();
    let stop = Stopwords::english();
    let s = syllables.len();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let (a, b, c) = (i % s, (i / s) % s, i / (s * s));
        let mut w = format!("{}{}", syllables[a], syllables[b]);
        if c > 0 {
            w.push_str(&syllables[(c - 1) % s]);
        }
        i += 1;
        if !stop.contains(&w) && !seeds.contains(w.as_str()) {
            out.push(w);
        }
    }
    out
}

fn random_cell(rng: &mut ChaCha8Rng, region: &BBox, precision: usize) -> GeohashKey {
    let lat = rng.gen_range(region.min_lat..region.max_lat);
    let lon = rng.gen_range(region.min_lon..region.max_lon);
    geohash_encode(lat, lon, precision).expect("point inside region")
}

/// Lays out `events_per_scale` events per scale inside the region, plus
/// negative probes, without drawing any records.
pub fn plant_benchmark(
    cfg: &BenchmarkConfig,
    scale_map: &ScaleMap,
) -> (Vec<PlantedEventSpec>, Vec<NegativeProbe>, NoiseSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let corpus = ClassCorpus::builtin();
    let region_key = GeohashKey::new(cfg.region.as_str()).expect("valid region");
    let region = region_key.bbox();
    let classes: Vec<String> = corpus.class_names().map(str::to_string).collect();
    let vocab = filler_vocabulary(6000, &corpus);
    let (tags, vocab) = vocab.split_at(500);

    let mut events: Vec<PlantedEventSpec> = Vec::new();
    let mut n = 0usize;
    for (si, scale) in Scale::ALL.iter().enumerate() {
        let precision = scale_map
            .precision_of(*scale)
            .expect("scale present")
            .max(region_key.precision());
        for _ in 0..cfg.events_per_scale {
            let class = &classes[n % classes.len()];
            let seed_terms: Vec<String> = corpus
                .seed(class)
                .expect("class")
                .terms()
                .map(str::to_string)
                .collect();
            let slot = (n / classes.len()) % (seed_terms.len() / 3);
            let mut topic: Vec<String> = seed_terms[slot * 3..slot * 3 + 3].to_vec();
            topic.push(tags[n].clone());

            let (cell, lat, lon, radius_m) = loop {
                let cell = random_cell(&mut rng, &region, precision);
                let (lat, lon) = cell.center();
                let (h, w) = cell_size_m(precision, lat);
                let radius_m = 0.35 * h.min(w);
                let clear = events
                    .iter()
                    .filter(|e| e.scale != Scale::City)
                    .all(|e| haversine_m(lat, lon, e.lat, e.lon) > 2.0 * (radius_m + e.radius_m));
                if precision <= region_key.precision() || clear {
                    break (cell, lat, lon, radius_m);
                }
            };
            let start_ms = cfg.start_ms + rng.gen_range(0..cfg.active_ms.max(1));
            events.push(PlantedEventSpec {
                id: format!("ev{n:02}"),
                scale: *scale,
                cell: cell.as_str().to_string(),
                lat,
                lon,
                radius_m,
                start_ms,
                end_ms: start_ms + cfg.event_span_ms,
                topic,
                class: Some(class.clone()),
                packets: cfg.volumes[si],
            });
            n += 1;
        }
    }

    let mut probes = Vec::new();
    let quiet_from = events
        .iter()
        .map(|e| e.end_ms)
        .max()
        .unwrap_or(cfg.start_ms);
    let quiet_to = cfg.start_ms + cfg.timeline_ms;
    for scale in Scale::ALL {
        let precision = scale_map
            .precision_of(scale)
            .expect("scale present")
            .max(region_key.precision());
        for k in 0..cfg.probes_per_scale {
            let id = format!("neg-{}-{k}", scale.name().to_lowercase());
            if precision <= region_key.precision() {
                let step = (quiet_to - quiet_from) / cfg.probes_per_scale as i64;
                if step <= 0 {
                    continue;
                }
                probes.push(NegativeProbe {
                    id,
                    scale,
                    cell: cfg.region.clone(),
                    from_ms: quiet_from + k as i64 * step,
                    to_ms: quiet_from + (k as i64 + 1) * step,
                });
                continue;
            }
            let cell = loop {
                let cell = random_cell(&mut rng, &region, precision);
                let (lat, lon) = cell.center();
                let b = cell.bbox();
                let half_diag = haversine_m(b.min_lat, b.min_lon, b.max_lat, b.max_lon) / 2.0;
                let clear = events
                    .iter()
                    .filter(|e| e.scale != Scale::City)
                    .all(|e| haversine_m(lat, lon, e.lat, e.lon) > e.radius_m + half_diag);
                if clear
                    && !probes
                        .iter()
                        .any(|p: &NegativeProbe| p.cell == cell.as_str())
                {
                    break cell;
                }
            };
            probes.push(NegativeProbe {
                id,
                scale,
                cell: cell.as_str().to_string(),
                from_ms: cfg.start_ms,
                to_ms: quiet_to,
            });
        }
    }

    let noise = NoiseSpec {
        region: cfg.region.clone(),
        from_ms: cfg.start_ms,
        to_ms: cfg.start_ms + cfg.timeline_ms,
        count: cfg.noise_count(),
        words_per_record: 6,
        vocabulary: vocab.len(),
    };
    (events, probes, noise)
}

struct Draft {
    time: i64,
    lat: f64,
    lon: f64,
    text: String,
    tags: Vec<String>,
}

/// Draws records for `events` and `noise`. Deterministic under `seed`.
pub fn generate(
    events: &[PlantedEventSpec],
    noise: &NoiseSpec,
    probes: &[NegativeProbe],
    seed: u64,
    flickr_share: f64,
) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_e7e7);
    let corpus = ClassCorpus::builtin();
    let vocab = filler_vocabulary(6000, &corpus);
    let vocab = &vocab[500..500 + noise.vocabulary.min(5500)];
    let mut drafts: Vec<Draft> =
        Vec::with_capacity(noise.count + events.iter().map(|e| e.packets).sum::<usize>());

    for e in events {
        let sigma = Normal::new(0.0, e.radius_m / 3.0).expect("positive sigma");
        for _ in 0..e.packets {
            let (north, east) = loop {
                let (n, m) = (sigma.sample(&mut rng), sigma.sample(&mut rng));
                if n.hypot(m) < e.radius_m {
                    break (n, m);
                }
            };
            let (lat, lon) = offset(e.lat, e.lon, north, east);
            let time = rng.gen_range(e.start_ms..e.end_ms);
            let (tag, terms) = e.topic.split_last().expect("topic");
            let mut words: Vec<String> = terms.to_vec();
            words.shuffle(&mut rng);
            words.push(format!("#{tag}"));
            drafts.push(Draft {
                time,
                lat,
                lon,
                text: words.join(" "),
                tags: vec![tag.clone()],
            });
        }
    }

    let region = GeohashKey::new(noise.region.as_str())
        .expect("valid region")
        .bbox();
    for _ in 0..noise.count {
        let words: Vec<&str> = (0..noise.words_per_record)
            .map(|_| vocab[rng.gen_range(0..vocab.len())].as_str())
            .collect();
        drafts.push(Draft {
            time: rng.gen_range(noise.from_ms..noise.to_ms),
            lat: rng.gen_range(region.min_lat..region.max_lat),
            lon: rng.gen_range(region.min_lon..region.max_lon),
            text: words.join(" "),
            tags: Vec::new(),
        });
    }

    drafts.sort_by(|a, b| {
        a.time
            .cmp(&b.time)
            .then(a.lat.total_cmp(&b.lat))
            .then(a.lon.total_cmp(&b.lon))
    });
    let records = drafts
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let id = 880_000_000_000_000_000u64 + i as u64;
            if rng.gen_bool(flickr_share) {
                flickr_record(id, d)
            } else {
                tweet_record(id, d)
            }
        })
        .collect();

    let mut truth: Vec<TruthLine> = events.iter().cloned().map(TruthLine::Event).collect();
    truth.extend(probes.iter().cloned().map(TruthLine::Negative));
    Synthetic { records, truth }
}

/// Plants and draws the standard benchmark stream.
pub fn benchmark(cfg: &BenchmarkConfig, scale_map: &ScaleMap) -> Synthetic {
    let (events, probes, noise) = plant_benchmark(cfg, scale_map);
    generate(&events, &noise, &probes, cfg.seed, cfg.flickr_share)
}

fn tweet_record(id: u64, d: &Draft) -> String {
    let hashtags: Vec<_> = d.tags.iter().map(|t| json!({ "text": t })).collect();
    json!({
        "source": "twitter",
        "id_str": id.to_string(),
        "text": d.text,
        "timestamp_ms": d.time.to_string(),
        "coordinates": { "type": "Point", "coordinates": [round6(d.lon), round6(d.lat)] },
        "entities": { "hashtags": hashtags },
        "user": { "screen_name": format!("user{}", id % 9973) },
    })
    .to_string()
}

fn flickr_record(id: u64, d: &Draft) -> String {
    let taken = Utc
        .timestamp_millis_opt(d.time)
        .unwrap()
        .format("%Y-%m-%d %H:%M:%S")
        .to_string();
    json!({
        "source": "flickr",
        "id": id.to_string(),
        "title": d.text,
        "description": "",
        "latitude": round6(d.lat),
        "longitude": round6(d.lon),
        "datetaken": taken,
        "tags": d.tags.join(" "),
        "ownername": format!("owner{}", id % 7919),
    })
    .to_string()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Distinct precision-`p` cells touched by the packets of one event.
pub fn cells_touched(
    records: &[String],
    event: &PlantedEventSpec,
    precision: usize,
) -> std::collections::BTreeSet<String> {
    let tag = format!("#{}", event.topic.last().expect("topic"));
    records
        .iter()
        .filter(|r| r.contains(&tag))
        .filter_map(|r| {
            let v: serde_json::Value = serde_json::from_str(r).ok()?;
            let (lat, lon) = match v["source"].as_str()? {
                "twitter" => (
                    v["coordinates"]["coordinates"][1].as_f64()?,
                    v["coordinates"]["coordinates"][0].as_f64()?,
                ),
                _ => (v["latitude"].as_f64()?, v["longitude"].as_f64()?),
            };
            Some(
                geohash_encode(lat, lon, precision)
                    .ok()?
                    .as_str()
                    .to_string(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_valid() {
        let sm = ScaleMap::default();
        let cfg = BenchmarkConfig::default();
        let (events, probes, noise) = plant_benchmark(&cfg, &sm);
        assert_eq!(events.len(), 20);
        for s in Scale::ALL {
            assert_eq!(events.iter().filter(|e| e.scale == s).count(), 4);
        }
        for e in &events {
            e.validate(&sm).unwrap();
            assert!(e.cell.starts_with(&cfg.region));
        }
        assert_eq!(probes.len(), 20);
        assert_eq!(noise.count, 10 * cfg.total_event_packets());
        let topics: std::collections::HashSet<&String> =
            events.iter().flat_map(|e| &e.topic).collect();
        assert!(topics.len() > 60);
    }

    #[test]
    fn deterministic_under_seed() {
        let sm = ScaleMap::default();
        let cfg = BenchmarkConfig::default();
        let a = benchmark(&cfg, &sm);
        let b = benchmark(&cfg, &sm);
        assert_eq!(a.records_jsonl(), b.records_jsonl());
        assert_eq!(a.truth_jsonl(), b.truth_jsonl());
        let c = benchmark(&BenchmarkConfig { seed: 8, ..cfg }, &sm);
        assert_ne!(a.records_jsonl(), c.records_jsonl());
    }

    #[test]
    fn single_local_event_without_noise() {
        let sm = ScaleMap::default();
        let (events, _, noise) = plant_benchmark(&BenchmarkConfig::default(), &sm);
        let local = events
            .iter()
            .find(|e| e.scale == Scale::Local)
            .unwrap()
            .clone();
        let quiet = NoiseSpec { count: 0, ..noise };
        let s = generate(std::slice::from_ref(&local), &quiet, &[], 1, 0.0);
        assert_eq!(s.records.len(), local.packets);
        for r in &s.records {
            let v: serde_json::Value = serde_json::from_str(r).unwrap();
            let c = &v["coordinates"]["coordinates"];
            let d = haversine_m(
                local.lat,
                local.lon,
                c[1].as_f64().unwrap(),
                c[0].as_f64().unwrap(),
            );
            assert!(d <= local.radius_m + 0.2, "{d}");
            let text = v["text"].as_str().unwrap();
            for t in &local.topic[..3] {
                assert!(text.contains(t.as_str()));
            }
        }
    }

    #[test]
    fn city_event_spans_four_precision4_cells() {
        let sm = ScaleMap::default();
        let s = benchmark(&BenchmarkConfig::default(), &sm);
        for e in s.events().filter(|e| e.scale == Scale::City) {
            let cells = cells_touched(&s.records, e, 4);
            assert!(cells.len() >= 4, "{} touched {:?}", e.id, cells);
            assert!(cells.iter().all(|c| c.starts_with(&e.cell)));
        }
    }

    #[test]
    fn truth_round_trips() {
        let sm = ScaleMap::default();
        let s = benchmark(&BenchmarkConfig::default(), &sm);
        assert_eq!(parse_truth(&s.truth_jsonl()).unwrap(), s.truth);
        let (_, (lat, lon)) = crate::geo::geohash_decode(&s.events().next().unwrap().cell).unwrap();
        assert!(lat.is_finite() && lon.is_finite());
    }
}
