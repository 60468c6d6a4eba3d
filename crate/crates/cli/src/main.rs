use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use locality_cli::{self as cli, Failure, RunFlags};
use locality_core::ingest::{self, DatasetSpec};

#[derive(Parser)]
#[command(name = "locality", version, about = "ISP-locality BitTorrent simulator and inter-AS traffic estimator")]
struct Args {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// RNG seed, overriding the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dump the event trace of a run.
    #[arg(long, global = true)]
    trace: bool,
    /// Also write JSON next to the CSV output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario file.
    Run { file: PathBuf },
    /// Run a parameter sweep file.
    Sweep { file: PathBuf },
    /// Estimate inter-AS traffic from torrent profiles.
    Estimate {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        savings: Option<PathBuf>,
    },
    /// Turn crawl snapshots into torrent profiles.
    Ingest {
        #[arg(long, required = true, num_args = 1..)]
        snapshot: Vec<PathBuf>,
        #[arg(long)]
        prefixes: PathBuf,
    },
    /// Requests needed to see a fraction of a torrent's peers.
    Coverage {
        #[arg(long)]
        population: u64,
        #[arg(long)]
        per_response: u64,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
    /// Write a synthetic crawl (snapshot and prefix table).
    Synth {
        #[arg(long, default_value_t = 200)]
        torrents: u32,
        #[arg(long, default_value_t = 150)]
        ases: u32,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("locality: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

fn dispatch(a: &Args) -> Result<(), Failure> {
    match &a.cmd {
        Cmd::Run { file } => {
            let flags = RunFlags { seed: a.seed, trace: a.trace, json: a.json };
            let r = cli::run_scenario(file, &a.out, &flags)?;
            println!(
                "mean overhead {:.3}, mean slowdown {:.3}; wrote {}",
                r.report.mean_overhead,
                r.report.mean_slowdown,
                a.out.join("metrics.csv").display()
            );
        }
        Cmd::Sweep { file } => {
            let n = cli::run_sweep(file, &a.out, a.seed, a.threads)?;
            println!("{n} runs; wrote {}", a.out.join("sweep.csv").display());
        }
        Cmd::Estimate { profiles, savings } => {
            let e = cli::run_estimate(profiles, savings.as_deref(), &a.out)?;
            let t = &e.report.total;
            println!(
                "random {} B, locality {} B, ideal {} B; wrote {}",
                locality_core::Scalar::round_bytes(&t.random),
                locality_core::Scalar::round_bytes(&t.locality),
                locality_core::Scalar::round_bytes(&t.ideal),
                a.out.display()
            );
        }
        Cmd::Ingest { snapshot, prefixes } => {
            let o = cli::run_ingest(snapshot, prefixes, &a.out)?;
            println!(
                "{} malformed lines, {} duplicates, {} empty torrents; wrote {}",
                o.malformed,
                o.duplicates,
                o.empty,
                a.out.join("profiles.csv").display()
            );
        }
        Cmd::Coverage { population, per_response, target } => {
            let r = ingest::coverage_requests(*population, *per_response, *target)
                .map_err(|e| Failure::Validation(e.into()))?;
            println!("{r}");
        }
        Cmd::Synth { torrents, ases } => {
            if !(2..=250).contains(ases) {
                return Err(Failure::Validation(anyhow::anyhow!("--ases must be between 2 and 250")));
            }
            let spec = DatasetSpec { torrents: *torrents, ases: *ases, ..DatasetSpec::default() };
            let d = ingest::generate_dataset(&spec, a.seed.unwrap_or(1));
            std::fs::create_dir_all(&a.out).map_err(|e| Failure::Io(e.into()))?;
            cli::write_atomic(&a.out.join("snapshot.txt"), &d.snapshot).map_err(Failure::Io)?;
            cli::write_atomic(&a.out.join("prefixes.csv"), &d.prefixes).map_err(Failure::Io)?;
            println!("wrote {} torrents to {}", d.truth.len(), a.out.display());
        }
    }
    Ok(())
}
