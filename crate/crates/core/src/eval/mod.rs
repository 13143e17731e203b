//! Synthetic labeled streams, windowed replay and Table I style scoring.

pub mod metrics;
pub mod synth;

pub use metrics::{evaluate, matches_event, scale_of, MetricsReport, ScaleMetrics, Tally};
pub use synth::{
    benchmark, generate, parse_truth, plant_benchmark, BenchmarkConfig, NegativeProbe, NoiseSpec,
    PlantedEventSpec, Synthetic, TruthLine,
};

use crate::eoi::EventCluster;
use crate::packet::{parse_record_line, AdapterRegistry};
use crate::pipeline::{Engine, PipelineStats};

/// Event time of one ingestion line, if it wraps.
pub fn line_time(registry: &AdapterRegistry, line: &str) -> Option<i64> {
    let r = parse_record_line(line, 0).ok()?;
    registry.wrap(&r).ok().map(|p| p.time())
}

/// Splits time-ordered lines into consecutive event-time windows of
/// `window_ms`. Lines that do not wrap stay in the current window so their
/// drops are counted there.
pub fn split_windows<'a>(
    registry: &AdapterRegistry,
    lines: &[&'a str],
    window_ms: i64,
) -> Vec<(i64, Vec<&'a str>)> {
    let mut out: Vec<(i64, Vec<&'a str>)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let t = line_time(registry, line);
        match (out.last_mut(), t) {
            (Some((end, batch)), Some(t)) if t < *end => batch.push(line),
            (Some((_, batch)), None) => batch.push(line),
            (_, Some(t)) => {
                let end = t - t.rem_euclid(window_ms) + window_ms;
                out.push((end, vec![line]));
            }
            (None, None) => out.push((i64::MIN, vec![line])),
        }
    }
    out
}

/// Feeds lines through the engine window by window; each window's clock is
/// its end time.
pub fn replay(engine: &mut Engine, lines: &[&str], window_ms: i64) -> Vec<PipelineStats> {
    let windows = split_windows(engine.registry(), lines, window_ms);
    windows
        .into_iter()
        .map(|(end, batch)| {
            let now = (end != i64::MIN).then_some(end);
            engine.run_window_lines(&batch, now)
        })
        .collect()
}

/// Root EoIs currently published by the engine.
pub fn root_eois(engine: &Engine) -> Vec<EventCluster> {
    let published = engine.published();
    let mut roots: Vec<EventCluster> = published
        .eois
        .iter()
        .filter(|c| c.is_root())
        .cloned()
        .collect();
    roots.sort_by(|a, b| a.id.cmp(&b.id));
    roots
}

/// Generates the benchmark stream, replays it, and scores the result.
pub fn run_benchmark(
    engine: &mut Engine,
    cfg: &BenchmarkConfig,
) -> (Synthetic, Vec<PipelineStats>, MetricsReport) {
    let scale_map = engine.config().scope.scale_map.clone();
    let synthetic = benchmark(cfg, &scale_map);
    let lines: Vec<&str> = synthetic.records.iter().map(String::as_str).collect();
    let window = engine.config().window_ms;
    let stats = replay(engine, &lines, window);
    let events: Vec<PlantedEventSpec> = synthetic.events().cloned().collect();
    let probes: Vec<NegativeProbe> = synthetic.probes().cloned().collect();
    let report = evaluate(&root_eois(engine), &events, &probes, &scale_map);
    (synthetic, stats, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineConfig;

    #[test]
    fn windows_follow_event_time() {
        let reg = AdapterRegistry::with_builtins();
        let line = |id: u32, t: i64| {
            format!(
                r#"{{"source":"twitter","id_str":"{id}","text":"x","timestamp_ms":"{t}","coordinates":{{"type":"Point","coordinates":[3.39,6.45]}}}}"#
            )
        };
        let ls = [
            line(1, 1_000),
            "junk".to_string(),
            line(2, 1_500),
            line(3, 9_000),
            line(4, 25_000),
        ];
        let refs: Vec<&str> = ls.iter().map(String::as_str).collect();
        let w = split_windows(&reg, &refs, 10_000);
        assert_eq!(
            w.iter().map(|(e, b)| (*e, b.len())).collect::<Vec<_>>(),
            vec![(10_000, 4), (30_000, 1)]
        );
        let mut engine = Engine::new(PipelineConfig::default()).unwrap();
        let stats = replay(&mut engine, &refs, 10_000);
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].dropped.get("malformed_record"), Some(&1));
        assert!(stats.iter().all(|s| s.is_conserved()));
    }
}
