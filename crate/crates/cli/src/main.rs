use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use eoimap_core::eoi::ScaleMap;
use eoimap_core::eval::{
    benchmark, evaluate, parse_truth, replay, root_eois, run_benchmark, split_windows,
    BenchmarkConfig, MetricsReport, NegativeProbe, PlantedEventSpec, TruthLine,
};
use eoimap_core::pipeline::{Engine, PipelineStats};
use eoimap_service::ServiceConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "eoimap",
    version,
    about = "Event-of-interest detection over geotagged streams"
)]
struct Cli {
    /// TOML configuration file (pipeline and service settings).
    #[arg(short, long, global = true, env = "EOIMAP_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic stream: records.jsonl and truth.jsonl.
    Generate {
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Feed a record file through the pipeline window by window.
    Replay {
        input: PathBuf,
        /// POST each window to a running service instead of running in process.
        #[arg(long)]
        endpoint: Option<String>,
        /// Pause between posted windows, in milliseconds.
        #[arg(long, default_value_t = 0)]
        pace_ms: u64,
        /// Print root EoIs as JSON lines after the replay.
        #[arg(long)]
        dump: bool,
    },
    /// Replay a record file and score it against a truth file.
    Evaluate {
        input: PathBuf,
        #[arg(short, long)]
        truth: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate, replay and score in one go, over one or more seeds.
    Bench {
        #[command(flatten)]
        bench: BenchArgs,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Background records per event record.
    #[arg(long)]
    noise_ratio: Option<f64>,
    #[arg(long)]
    events_per_scale: Option<usize>,
    /// Squeeze about this many records into a single window instead.
    #[arg(long)]
    single_window: Option<usize>,
}

impl BenchArgs {
    fn config(&self, seed: u64) -> BenchmarkConfig {
        let mut c = match self.single_window {
            Some(n) => BenchmarkConfig::single_window(n, seed),
            None => BenchmarkConfig {
                seed,
                ..BenchmarkConfig::default()
            },
        };
        if let Some(r) = self.noise_ratio {
            c.noise_ratio = r;
        }
        if let Some(n) = self.events_per_scale {
            c.events_per_scale = n;
        }
        c
    }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = ServiceConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { out, bench } => generate(&config, &out, &bench),
        Command::Replay {
            input,
            endpoint: Some(url),
            pace_ms,
            ..
        } => post_windows(&config, &input, &url, pace_ms),
        Command::Replay { input, dump, .. } => replay_file(&config, &input, dump),
        Command::Evaluate { input, truth, json } => {
            evaluate_files(&config, &input, &truth, json.as_deref())
        }
        Command::Bench { bench, seeds, json } => {
            bench_seeds(&config, &bench, seeds, json.as_deref())
        }
        Command::Serve { listen, data_dir } => {
            let mut config = config;
            if let Some(l) = listen {
                config.pipeline.listen = l;
            }
            if data_dir.is_some() {
                config.pipeline.data_dir = data_dir;
            }
            tokio::runtime::Runtime::new()?.block_on(eoimap_service::serve(config))
        }
    }
}

fn scale_map(config: &ServiceConfig) -> ScaleMap {
    config.pipeline.scope.scale_map.clone()
}

fn generate(config: &ServiceConfig, out: &Path, args: &BenchArgs) -> anyhow::Result<()> {
    let s = benchmark(&args.config(args.seed), &scale_map(config));
    fs::create_dir_all(out)?;
    fs::write(out.join("records.jsonl"), s.records_jsonl())?;
    fs::write(out.join("truth.jsonl"), s.truth_jsonl())?;
    println!(
        "wrote {} records, {} events, {} probes to {}",
        s.records.len(),
        s.events().count(),
        s.probes().count(),
        out.display()
    );
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_window(out: &mut impl Write, s: &PipelineStats) -> std::io::Result<()> {
    writeln!(
        out,
        "window {:>4}  ingested {:>7}  indexed {:>7}  dropped {:>5}  live {:>7}  eois {:>5}  {:>6} ms",
        s.window, s.ingested, s.indexed, s.dropped_total(), s.live_packets, s.eois, s.duration_ms
    )
}

fn run_replay(config: &ServiceConfig, doc: &str) -> anyhow::Result<(Engine, Vec<PipelineStats>)> {
    let mut engine = Engine::new(config.pipeline.clone())?;
    let lines: Vec<&str> = doc.lines().collect();
    let window = config.pipeline.window_ms;
    let stats = replay(&mut engine, &lines, window);
    engine.flush()?;
    Ok((engine, stats))
}

fn replay_file(config: &ServiceConfig, input: &Path, dump: bool) -> anyhow::Result<()> {
    let doc = read_lines(input)?;
    let started = Instant::now();
    let (engine, stats) = run_replay(config, &doc)?;
    let mut out = std::io::stdout().lock();
    let mut total = PipelineStats::default();
    for s in &stats {
        if !dump {
            print_window(&mut out, s)?;
        }
        total.accumulate(s);
    }
    let roots = root_eois(&engine);
    if dump {
        for c in &roots {
            writeln!(out, "{}", serde_json::to_string(&c.to_record())?)?;
        }
        return Ok(());
    }
    writeln!(
        out,
        "{} windows, {} ingested, {} indexed, {} dropped {:?}, {} root EoIs, {:.2} s",
        stats.len(),
        total.ingested,
        total.indexed,
        total.dropped_total(),
        total.dropped,
        roots.len(),
        started.elapsed().as_secs_f64()
    )?;
    Ok(())
}

fn post_windows(
    config: &ServiceConfig,
    input: &Path,
    endpoint: &str,
    pace_ms: u64,
) -> anyhow::Result<()> {
    let doc = read_lines(input)?;
    let lines: Vec<&str> = doc.lines().collect();
    let engine = Engine::new(config.pipeline.clone())?;
    let windows = split_windows(engine.registry(), &lines, config.pipeline.window_ms);
    let url = format!("{}/ingest", endpoint.trim_end_matches('/'));
    let client = reqwest::blocking::Client::new();
    let (mut accepted, mut dropped) = (0u64, 0u64);
    for (i, (_, batch)) in windows.iter().enumerate() {
        if i > 0 && pace_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(pace_ms));
        }
        let resp = client.post(&url).body(batch.join("\n")).send()?;
        let status = resp.status();
        let body: serde_json::Value = serde_json::from_str(&resp.text()?).unwrap_or_default();
        if !status.is_success() {
            bail!("{url}: {status} {body}");
        }
        accepted += body["accepted"].as_u64().unwrap_or(0);
        dropped += body["dropped"].as_u64().unwrap_or(0);
    }
    println!(
        "posted {} windows: {accepted} accepted, {dropped} dropped",
        windows.len()
    );
    Ok(())
}

fn split_truth(truth: Vec<TruthLine>) -> (Vec<PlantedEventSpec>, Vec<NegativeProbe>) {
    let mut events = Vec::new();
    let mut probes = Vec::new();
    for t in truth {
        match t {
            TruthLine::Event(e) => events.push(e),
            TruthLine::Negative(p) => probes.push(p),
        }
    }
    (events, probes)
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn evaluate_files(
    config: &ServiceConfig,
    input: &Path,
    truth: &Path,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    let (events, probes) =
        split_truth(parse_truth(&read_lines(truth)?).map_err(anyhow::Error::msg)?);
    let sm = scale_map(config);
    for e in &events {
        e.validate(&sm).map_err(anyhow::Error::msg)?;
    }
    let (engine, _) = run_replay(config, &read_lines(input)?)?;
    let report = evaluate(&root_eois(&engine), &events, &probes, &sm);
    print!("{report}");
    write_json(json, &serde_json::to_value(&report)?)
}

fn bench_seeds(
    config: &ServiceConfig,
    args: &BenchArgs,
    seeds: u64,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    let mut reports: Vec<(u64, MetricsReport)> = Vec::new();
    for seed in args.seed..args.seed + seeds.max(1) {
        let started = Instant::now();
        let mut engine = Engine::new(config.pipeline.clone())?;
        let (synthetic, stats, report) = run_benchmark(&mut engine, &args.config(seed));
        println!(
            "seed {seed}: {} records, {} windows, {} root EoIs, {:.2} s",
            synthetic.records.len(),
            stats.len(),
            root_eois(&engine).len(),
            started.elapsed().as_secs_f64()
        );
        print!("{report}");
        reports.push((seed, report));
    }
    if reports.len() > 1 {
        let f1: Vec<f64> = reports.iter().map(|(_, r)| r.overall.f1).collect();
        let mean = f1.iter().sum::<f64>() / f1.len() as f64;
        let min = f1.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "overall F1 over {} seeds: mean {mean:.3}, min {min:.3}",
            f1.len()
        );
    }
    let by_seed: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(s, r)| Ok((s.to_string(), serde_json::to_value(r)?)))
        .collect::<Result<_, serde_json::Error>>()?;
    write_json(json, &serde_json::Value::Object(by_seed))
}
