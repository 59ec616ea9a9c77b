//! Command-line front end: ingestion, synthesis, experiments, sweeps,
//! benchmarks, and the networked STA/org roles.
//!
//! Exit codes: 0 ok, 1 config error, 2 data error, 3 protocol error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};

use cpb::collab::{ClusterAlgo, ClusteringSpec};
use cpb::harness::{
    bench_protocol, run_experiment, sweep, BenchConfig, CpbError, ExperimentConfig, SweepConfig,
};
use cpb::ingest::{
    self, parse_dshield_reader, read_canonical, synth::synthesize_logs, write_canonical,
    write_dshield, CountMode, OrgDataset, OrgId, Separator,
};
use cpb::net::{run_org, serve_key_offers, serve_sta, KeySource, OrgConfig, StaConfig};
use cpb::privacy::SharedKey;

#[derive(Parser)]
#[command(name = "cpb", version, about = "Collaborative predictive blacklisting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse DShield-format logs into the canonical event format.
    Ingest {
        /// Input log file (one event per line).
        #[arg(long)]
        input: PathBuf,
        /// Field separator: tab or comma.
        #[arg(long, default_value = "tab")]
        separator: String,
        /// Canonical output file (org,prefix,day lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic logs with planted attacker groups.
    Synth {
        /// Experiment config supplying the synth parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Output format: dshield or canonical.
        #[arg(long, default_value = "dshield")]
        format: String,
    },
    /// Run one experiment end to end and emit result CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run a parameter grid over one shared ingestion pass.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Protocol micro-benchmarks (encrypt time, upload/STA volumes).
    Bench {
        /// Org counts to measure.
        #[arg(long, value_delimiter = ',', default_value = "10,100")]
        orgs: Vec<usize>,
        #[arg(long, default_value_t = 4000)]
        set_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write bench.csv here instead of stdout only.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Coordinate one protocol round as the STA.
    ServeSta {
        #[arg(long)]
        listen: String,
        /// Comma-separated org ids expected this round.
        #[arg(long, value_delimiter = ',')]
        orgs: Vec<String>,
        /// Barrier timeout in seconds.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
        #[arg(long, default_value = "kmeans")]
        clustering: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 40.0)]
        threshold_pct: f64,
        #[arg(long, default_value_t = 0)]
        round_seed: u64,
        #[arg(long, default_value_t = 0)]
        round: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Participate in one protocol round as an organization.
    RunOrg {
        #[arg(long)]
        sta: String,
        #[arg(long)]
        org: String,
        /// Canonical event file; only this org's rows are used.
        #[arg(long)]
        dataset: PathBuf,
        /// Key source: file:<path> or peer:<addr>.
        #[arg(long)]
        key: String,
        #[arg(long, default_value_t = 0)]
        round: u64,
        #[arg(long, default_value = "presence")]
        count_mode: String,
        /// Where to write the decrypted shared pool.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a fresh shared key file (hex).
    GenKey {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the shared key to peers over direct connections.
    OfferKey {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        key_file: PathBuf,
        /// How many peers will fetch the key.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        round: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code().code());
        }
    }
}

fn parse_or_config<T: std::str::FromStr<Err = String>>(value: &str) -> Result<T, CpbError> {
    value.parse().map_err(CpbError::Config)
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, CpbError> {
    let text = fs::read_to_string(path)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CpbError> {
    match command {
        Command::Ingest { input, separator, out } => {
            let sep: Separator = parse_or_config(&separator)?;
            let file = fs::File::open(&input)?;
            let (events, stats) = parse_dshield_reader(BufReader::new(file), sep)?;
            let mut writer = BufWriter::new(fs::File::create(&out)?);
            write_canonical(&mut writer, &events)?;
            writer.flush()?;
            println!(
                "{} lines: {} events, {} invalid-address, {} non-routable, {} malformed",
                stats.lines,
                stats.events,
                stats.skipped_invalid,
                stats.skipped_non_routable,
                stats.malformed
            );
            Ok(())
        }
        Command::Synth { config, seed, out, format } => {
            let mut cfg = match config {
                Some(path) => load_config(&path, seed)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.synth.validate()?;
            let events =
                synthesize_logs(&cfg.synth, cpb::harness::subseed(cfg.seed, "synth", 0))?;
            let mut writer = BufWriter::new(fs::File::create(&out)?);
            match format.as_str() {
                "dshield" => write_dshield(&mut writer, &events, cfg.separator)?,
                "canonical" => write_canonical(&mut writer, &events)?,
                other => return Err(CpbError::Config(format!("unknown format {other:?}"))),
            }
            writer.flush()?;
            println!("wrote {} events to {}", events.len(), out.display());
            Ok(())
        }
        Command::Run { config, seed, out_dir } => {
            let cfg = load_config(&config, seed)?;
            let out = run_experiment(&cfg)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("results.csv"), out.results_csv())?;
            fs::write(out_dir.join("summary.csv"), out.summary_csv())?;
            fs::write(out_dir.join("config.txt"), cfg.to_text())?;
            println!(
                "{} orgs x {} windows -> {} rows; outputs in {}",
                out.orgs.len(),
                out.windows,
                out.rows.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Sweep { config, seed, out_dir } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg = SweepConfig::parse(&text)?;
            if let Some(seed) = seed {
                cfg.base.seed = seed;
            }
            let out = sweep(&cfg)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("sweep.csv"), out.to_csv())?;
            let failed = out.cells.iter().filter(|c| c.summary.is_err()).count();
            println!(
                "{} cells ({} failed); summary in {}",
                out.cells.len(),
                failed,
                out_dir.join("sweep.csv").display()
            );
            Ok(())
        }
        Command::Bench { orgs, set_size, seed, out_dir } => {
            let report = bench_protocol(&BenchConfig { org_counts: orgs, set_size, seed })?;
            print!("{}", report.to_csv());
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("bench.csv"), report.to_csv())?;
            }
            Ok(())
        }
        Command::ServeSta {
            listen,
            orgs,
            timeout,
            clustering,
            k,
            threshold_pct,
            round_seed,
            round,
            out_dir,
        } => {
            if orgs.is_empty() {
                return Err(CpbError::Config("--orgs must name at least one org".into()));
            }
            let algo: ClusterAlgo = clustering
                .parse()
                .map_err(|e: cpb::collab::CollabError| CpbError::Config(e.to_string()))?;
            fs::create_dir_all(&out_dir)?;
            let listener = TcpListener::bind(&listen)?;
            println!("sta listening on {}", listener.local_addr()?);
            std::io::stdout().flush()?;
            let cfg = StaConfig {
                expected: orgs.iter().map(|s| OrgId::new(s)).collect(),
                clustering: ClusteringSpec { algo, k, threshold_pct, seed: round_seed },
                round,
                timeout: Duration::from_secs(timeout),
                transcript_path: Some(out_dir.join("transcript.log")),
            };
            let outcome = serve_sta(listener, cfg)?;
            if let Some(reason) = &outcome.aborted {
                eprintln!("round aborted: {reason}");
                return Err(cpb::net::NetError::Aborted(reason.clone()).into());
            }
            let o2o = outcome.o2o.expect("completed round");
            let assignment = outcome.assignment.expect("completed round");
            fs::write(out_dir.join("o2o.csv"), o2o.to_csv())?;
            fs::write(out_dir.join("clusters.csv"), assignment.to_csv(o2o.orgs()))?;
            println!("round {round} delivered; outputs in {}", out_dir.display());
            Ok(())
        }
        Command::RunOrg { sta, org, dataset, key, round, count_mode, out } => {
            let org = OrgId::new(&org);
            let mode: CountMode = parse_or_config(&count_mode)?;
            let events = read_canonical(BufReader::new(fs::File::open(&dataset)?))?;
            ensure_org_present(&events, &org)?;
            let mut ds = OrgDataset::new(org.clone());
            for ev in events.iter().filter(|e| e.org == org) {
                ds.record(ev.attacker, ev.day, 1);
            }
            let key = match key.split_once(':') {
                Some(("file", path)) => KeySource::File(PathBuf::from(path)),
                Some(("peer", addr)) => KeySource::Peer(addr.to_string()),
                _ => {
                    return Err(CpbError::Config(
                        "--key must be file:<path> or peer:<addr>".into(),
                    ))
                }
            };
            let mut cfg = OrgConfig::new(sta, org.clone(), key);
            cfg.round = round;
            cfg.mode = mode;
            let outcome = run_org(&cfg, &ds)?;
            println!(
                "org {org}: cluster {} ({} peers{}), {} shared entries, {} rejected",
                outcome.cluster,
                outcome.peers.len(),
                if outcome.outlier { ", outlier" } else { "" },
                outcome.pool.len(),
                outcome.rejects.total()
            );
            if let Some(path) = out {
                fs::write(path, outcome.pool.to_csv())?;
            }
            Ok(())
        }
        Command::GenKey { out } => {
            let key = SharedKey::generate();
            fs::write(&out, format!("{}\n", key.to_hex()))?;
            println!("wrote key to {}", out.display());
            Ok(())
        }
        Command::OfferKey { listen, key_file, count, round } => {
            let key = SharedKey::from_hex(&fs::read_to_string(&key_file)?)?;
            let listener = TcpListener::bind(&listen)?;
            println!("offering key to {count} peers on {}", listener.local_addr()?);
            std::io::stdout().flush()?;
            serve_key_offers(listener, &key, count, round)?;
            Ok(())
        }
    }
}

// Canonical event files may hold multiple orgs; fail early if the org
// never appears so a typo doesn't silently upload an empty set.
fn ensure_org_present(events: &[ingest::AlertEvent], org: &OrgId) -> Result<(), CpbError> {
    let present: BTreeSet<&OrgId> = events.iter().map(|e| &e.org).collect();
    if present.contains(org) {
        Ok(())
    } else {
        Err(CpbError::Config(format!("org {org} has no events in the dataset")))
    }
}
