//! Batch runner behind the `locality` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use locality_core::estimator::{self, CumulativeReport, SavingsTable};
use locality_core::ingest::{self, PrefixTable};
use locality_core::metrics::{report, MetricsReport};
use locality_core::rng::derive_seed;
use locality_core::scenario::{IspLayout, LocalityParams, Policy, ScenarioConfig};
use locality_core::swarm::{run_with, RunOptions, SwarmError};
use locality_core::Exact;

pub const METRICS_HEADER: &str = "isp,peers,overhead,p95_bytes,slowdown_mean,slowdown_min,slowdown_max";

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Stall(String),
    PartialSweep { failed: usize, total: usize },
    Io(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Stall(_) => 3,
            Failure::PartialSweep { .. } => 4,
            Failure::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "invalid input: {e:#}"),
            Failure::Stall(d) => write!(f, "{d}"),
            Failure::PartialSweep { failed, total } => write!(f, "{failed} of {total} sweep cells failed"),
            Failure::Io(e) => write!(f, "{e:#}"),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_line(config_hash: &str, rng_seed: Option<u64>) -> String {
    let seed = rng_seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!("#manifest config_hash={config_hash} rng_seed={seed} version={}\n", env!("CARGO_PKG_VERSION"))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Io)
}

// ---- single runs ----

#[derive(Clone, Debug, Default)]
pub struct RunFlags {
    pub seed: Option<u64>,
    pub trace: bool,
    pub json: bool,
}

pub struct RunResult {
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub report: MetricsReport,
    pub trace: Vec<String>,
}

pub fn config_hash(cfg: &ScenarioConfig) -> String {
    sha256_hex(cfg.to_toml_string().as_bytes())
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| Failure::Validation(e.into()))?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    Ok(cfg)
}

pub fn simulate(cfg: ScenarioConfig, trace: bool) -> Result<RunResult, Failure> {
    let out = run_with(&cfg, &RunOptions { trace }).map_err(|e| match e {
        SwarmError::Stall(d) => Failure::Stall(d.to_string()),
        other => Failure::Validation(other.into()),
    })?;
    let report = report(&out.ledger, &out.completions, &cfg, out.end_time);
    Ok(RunResult { config_hash: config_hash(&cfg), config: cfg, report, trace: out.trace })
}

pub fn metrics_csv(r: &RunResult) -> String {
    let mut s = manifest_line(&r.config_hash, Some(r.config.rng_seed));
    s.push_str(&r.report.to_csv());
    s
}

pub fn run_scenario(path: &Path, out: &Path, flags: &RunFlags) -> Result<RunResult, Failure> {
    let cfg = load_scenario(path, flags.seed)?;
    let r = simulate(cfg, flags.trace)?;
    ensure_dir(out)?;
    let io = |e: anyhow::Error| Failure::Io(e);
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&r)).map_err(io)?;
    if flags.json {
        let v = serde_json::json!({
            "manifest": {"config_hash": r.config_hash, "rng_seed": r.config.rng_seed, "version": env!("CARGO_PKG_VERSION")},
            "report": r.report,
        });
        write_atomic(&out.join("metrics.json"), &serde_json::to_string_pretty(&v).expect("serializable")).map_err(io)?;
    }
    if flags.trace {
        let mut t = manifest_line(&r.config_hash, Some(r.config.rng_seed));
        for line in &r.trace {
            t.push_str(line);
            t.push('\n');
        }
        write_atomic(&out.join("trace.txt"), &t).map_err(io)?;
    }
    Ok(r)
}

// ---- sweeps ----

/// Parameters a sweep may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Outgoing inter-ISP connections per ISP; switches on the locality policy.
    Limit,
    /// First-set leechers, keeping the number of ISPs.
    TorrentSize,
    /// Leechers per ISP, keeping the torrent size.
    PeersPerIsp,
    /// Per-ISP inter-ISP egress capacity, bytes/s.
    EgressCap,
    /// Initial seed upload, bytes/s.
    SeedRate,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Limit => "limit",
            Axis::TorrentSize => "torrent_size",
            Axis::PeersPerIsp => "peers_per_isp",
            Axis::EgressCap => "egress_cap",
            Axis::SeedRate => "seed_rate",
        }
    }

    pub fn apply(self, base: &ScenarioConfig, value: u64) -> Result<ScenarioConfig> {
        if value == 0 {
            bail!("{} must be positive", self.name());
        }
        let small = |v: u64| u32::try_from(v).with_context(|| format!("{} value {v} too large", self.name()));
        let mut cfg = base.clone();
        match self {
            Axis::Limit => {
                let mut lp = base.policy.locality().cloned().unwrap_or_else(|| LocalityParams::with_limit(0));
                lp.limit = small(value)?;
                cfg.policy = Policy::Locality(lp);
            }
            Axis::TorrentSize => {
                if !matches!(base.layout, IspLayout::Homogeneous { .. }) {
                    bail!("torrent_size sweeps need a homogeneous layout");
                }
                cfg.torrent_size = small(value)?;
            }
            Axis::PeersPerIsp => {
                let v = small(value)?;
                if !base.torrent_size.is_multiple_of(v) {
                    bail!("{v} peers per ISP do not divide torrent size {}", base.torrent_size);
                }
                cfg.layout = IspLayout::Homogeneous { n_isps: base.torrent_size / v };
            }
            Axis::EgressCap => cfg.egress_cap = Some(value),
            Axis::SeedRate => cfg.seed_rate = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<u64>,
    #[serde(default = "one")]
    pub repetitions: u32,
    /// Scenario file, relative to the sweep file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<ScenarioConfig>,
}

fn one() -> u32 {
    1
}

/// A sweep with its base scenario resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<u64>,
    pub repetitions: u32,
    pub base: ScenarioConfig,
}

impl Sweep {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Validation)?;
        let spec: SweepSpec = toml::from_str(&text)
            .with_context(|| format!("{}", path.display()))
            .map_err(Failure::Validation)?;
        let base = match (&spec.base, &spec.base_file) {
            (Some(b), None) => {
                b.validate().map_err(|e| Failure::Validation(e.into()))?;
                b.clone()
            }
            (None, Some(f)) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(f);
                load_scenario(&p, None)?
            }
            _ => return Err(Failure::Validation(anyhow::anyhow!("exactly one of `base` and `base_file` is required"))),
        };
        Sweep::new(spec.axis, spec.values, spec.repetitions, base, seed)
    }

    pub fn new(axis: Axis, values: Vec<u64>, repetitions: u32, mut base: ScenarioConfig, seed: Option<u64>) -> Result<Self, Failure> {
        if values.is_empty() || repetitions == 0 {
            return Err(Failure::Validation(anyhow::anyhow!("a sweep needs at least one value and one repetition")));
        }
        if let Some(s) = seed {
            base.rng_seed = s;
        }
        for &v in &values {
            axis.apply(&base, v)
                .with_context(|| format!("axis {} value {v}", axis.name()))
                .map_err(Failure::Validation)?;
        }
        Ok(Sweep { axis, values, repetitions, base })
    }

    pub fn hash(&self) -> String {
        let vals: Vec<String> = self.values.iter().map(u64::to_string).collect();
        let text = format!(
            "axis={}\nvalues={}\nrepetitions={}\n{}",
            self.axis.name(),
            vals.join(","),
            self.repetitions,
            self.base.to_toml_string()
        );
        sha256_hex(text.as_bytes())
    }

    /// Scenario of one cell; repetition `rep` uses a derived seed.
    pub fn cell(&self, value: u64, rep: u32) -> ScenarioConfig {
        let mut cfg = self.axis.apply(&self.base, value).expect("validated at construction");
        cfg.rng_seed = derive_seed(self.base.rng_seed, rep);
        cfg
    }
}

pub struct Cell {
    pub value: u64,
    pub rep: u32,
    pub result: Result<MetricsReport, String>,
}

pub fn execute_sweep(sweep: &Sweep, threads: Option<usize>) -> Result<Vec<Cell>> {
    let jobs: Vec<(u64, u32)> = sweep
        .values
        .iter()
        .flat_map(|&v| (0..sweep.repetitions).map(move |r| (v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(value, rep)| {
                let cfg = sweep.cell(value, rep);
                let result = simulate(cfg, false).map(|r| r.report).map_err(|e| e.to_string());
                Cell { value, rep, result }
            })
            .collect()
    }))
}

/// One row per (value, repetition, ISP), a `mean` row per cell, and an
/// `all`/`mean` summary row per value averaged over its repetitions.
pub fn sweep_csv(sweep: &Sweep, cells: &[Cell]) -> String {
    let mut s = manifest_line(&sweep.hash(), Some(sweep.base.rng_seed));
    let _ = writeln!(s, "#axis {}", sweep.axis.name());
    s.push_str("axis_value,rep,");
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for &v in &sweep.values {
        let mut ok: Vec<&MetricsReport> = Vec::new();
        for c in cells.iter().filter(|c| c.value == v) {
            let prefix = format!("{v},{}", c.rep);
            match &c.result {
                Ok(r) => {
                    // same rows as the single-run metrics file
                    for row in r.to_csv().lines().skip(1) {
                        let _ = writeln!(s, "{prefix},{row}");
                    }
                    ok.push(r);
                }
                Err(e) => {
                    let _ = writeln!(s, "#failed axis_value={v} rep={} error={}", c.rep, e.replace('\n', " "));
                }
            }
        }
        if !ok.is_empty() {
            let n = ok.len() as f64;
            let avg = |f: &dyn Fn(&MetricsReport) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
            let lo = ok.iter().map(|r| r.min_slowdown).fold(f64::INFINITY, f64::min);
            let hi = ok.iter().map(|r| r.max_slowdown).fold(f64::NEG_INFINITY, f64::max);
            let peers: u32 = ok[0].per_isp.iter().map(|m| m.peers).sum();
            let _ = writeln!(
                s,
                "{v},all,mean,{peers},{:.6},{:.1},{:.6},{:.6},{:.6}",
                avg(&|r| r.mean_overhead),
                avg(&|r| r.mean_p95_bytes),
                avg(&|r| r.mean_slowdown),
                lo,
                hi
            );
        }
    }
    s
}

pub fn run_sweep(path: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<usize, Failure> {
    let sweep = Sweep::load(path, seed)?;
    let cells = execute_sweep(&sweep, threads).map_err(Failure::Io)?;
    ensure_dir(out)?;
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&sweep, &cells)).map_err(Failure::Io)?;
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    if failed > 0 {
        return Err(Failure::PartialSweep { failed, total: cells.len() });
    }
    Ok(cells.len())
}

// ---- estimation ----

pub const ESTIMATE_HEADER: &str = "torrent_id,as_id,S_A,random_bytes,locality_bytes,ideal_bytes";

pub struct EstimateOutput {
    pub detail: String,
    pub torrents: String,
    pub ases: String,
    pub report: CumulativeReport<Exact>,
}

pub fn estimate(profiles_text: &str, savings_text: Option<&str>) -> Result<EstimateOutput, Failure> {
    let val = |e: estimator::EstimatorError| Failure::Validation(e.into());
    let profiles = estimator::read_profiles(profiles_text).map_err(val)?;
    let table: SavingsTable<Exact> = match savings_text {
        Some(t) => estimator::read_savings(t).map_err(val)?,
        None => SavingsTable::zero(),
    };
    let mut hasher = Sha256::new();
    hasher.update(profiles_text.as_bytes());
    hasher.update([0]);
    hasher.update(savings_text.unwrap_or("").as_bytes());
    let hash = hex::encode(hasher.finalize());
    let manifest = manifest_line(&hash, None);

    let chunks: Vec<CumulativeReport<Exact>> = profiles
        .par_chunks(64)
        .map(|c| estimator::aggregate(c, &table))
        .collect();
    let report = chunks.into_iter().fold(CumulativeReport::default(), CumulativeReport::merge);

    let mut detail = format!("{manifest}{ESTIMATE_HEADER}\n");
    for p in &profiles {
        let seed_as = p.seed_as();
        for e in estimator::apply_savings(p, &table) {
            let ideal = if Some(e.as_id) == seed_as { 0 } else { p.content_size };
            let _ = writeln!(
                detail,
                "{},{},{},{},{},{ideal}",
                p.torrent_id,
                e.as_id,
                e.peers,
                locality_core::Scalar::round_bytes(&e.random),
                locality_core::Scalar::round_bytes(&e.locality)
            );
        }
    }
    Ok(EstimateOutput {
        detail,
        torrents: format!("{manifest}{}", report.to_csv()),
        ases: format!("{manifest}{}", report.as_csv()),
        report,
    })
}

pub fn run_estimate(profiles: &Path, savings: Option<&Path>, out: &Path) -> Result<EstimateOutput, Failure> {
    let read = |p: &Path| {
        fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Validation)
    };
    let ptext = read(profiles)?;
    let stext = savings.map(read).transpose()?;
    let e = estimate(&ptext, stext.as_deref())?;
    ensure_dir(out)?;
    let io = |e: anyhow::Error| Failure::Io(e);
    write_atomic(&out.join("estimate.csv"), &e.detail).map_err(io)?;
    write_atomic(&out.join("torrents.csv"), &e.torrents).map_err(io)?;
    write_atomic(&out.join("ases.csv"), &e.ases).map_err(io)?;
    Ok(e)
}

// ---- ingestion ----

pub struct IngestOutput {
    pub profiles: String,
    pub summary: String,
    pub malformed: usize,
    pub duplicates: usize,
    pub empty: usize,
}

pub fn ingest_texts(snapshot: &str, prefixes: &str) -> Result<IngestOutput, Failure> {
    let val = |e: ingest::IngestError| Failure::Validation(e.into());
    let snap = ingest::parse_snapshot(snapshot).map_err(val)?;
    let table = PrefixTable::from_csv(prefixes).map_err(val)?;
    let (profiles, summary) = ingest::profiles(&snap, &table).map_err(val)?;
    let mut s = String::from("torrent_id,unique_peers,unmapped\n");
    for r in &summary {
        let _ = writeln!(s, "{},{},{}", r.torrent_id, r.unique_peers, r.unmapped);
    }
    Ok(IngestOutput {
        profiles: estimator::write_profiles(&profiles),
        summary: s,
        malformed: snap.malformed.len(),
        duplicates: snap.duplicates,
        empty: snap.empty.len(),
    })
}

pub fn run_ingest(snapshots: &[PathBuf], prefixes: &Path, out: &Path) -> Result<IngestOutput, Failure> {
    let read = |p: &Path| {
        fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Validation)
    };
    let table_text = read(prefixes)?;
    let mut snapshot = String::new();
    for p in snapshots {
        snapshot.push_str(&read(p)?);
        snapshot.push('\n');
    }
    let o = ingest_texts(&snapshot, &table_text)?;
    let manifest = manifest_line(&sha256_hex(format!("{snapshot}\0{table_text}").as_bytes()), None);
    ensure_dir(out)?;
    write_atomic(&out.join("profiles.csv"), &format!("{manifest}{}", o.profiles)).map_err(Failure::Io)?;
    write_atomic(&out.join("ingest_summary.csv"), &format!("{manifest}{}", o.summary)).map_err(Failure::Io)?;
    Ok(o)
}
