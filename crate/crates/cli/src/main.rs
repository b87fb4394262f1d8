use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use keyweave::analyzer::{
    self, adversary_optimum, exit_uniformity_test, expected_hops, hop_variance, interior_optimum,
    monte_carlo_recovery, observe_pool, oracle, path_surveilled_probability,
    pool_correlation_probability, recovery_probability, required_diversity, uniform_bound, Allocation,
    CapacityVector, PoolParams,
};
use keyweave::bench::{self, BenchConfig};
use keyweave::bootstrap::{self, Verdict};
use keyweave::proxy::pool::{simulate_pool, PoolSimConfig};
use keyweave::wire::b64;

#[derive(Parser)]
#[command(name = "keyweave", version, about = "Multipath key distribution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bootstrap kiosk: issue and check proxy credentials.
    #[command(subcommand)]
    Kiosk(KioskCmd),
    /// Security analysis, written as CSV to stdout.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Latency benchmarks over a loopback testbed.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum KioskCmd {
    /// Generate a kiosk key pair (base64 seed and public key).
    Keygen {
        #[arg(long)]
        secret: PathBuf,
        #[arg(long)]
        public: PathBuf,
    },
    /// Print a credential for a proxy address.
    Issue {
        /// File holding the base64 signing seed.
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        proxy: String,
        /// Validity window in seconds.
        #[arg(long)]
        validity: u64,
        /// Override the clock (epoch seconds).
        #[arg(long)]
        now: Option<u64>,
    },
    /// Check a credential; exits with status 2 when it is rejected.
    Verify {
        /// File holding the base64 kiosk public key.
        #[arg(long)]
        public: PathBuf,
        /// Credential text, or @path to read it from a file.
        #[arg(long)]
        credential: String,
        #[arg(long)]
        now: Option<u64>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Recovery probability of a capacity vector against an allocation.
    Recovery {
        /// Comma-separated capacities, one per medium type.
        #[arg(long)]
        capacities: String,
        /// Comma-separated fragment counts, one per medium type.
        #[arg(long)]
        allocation: String,
        /// Also run a Monte-Carlo estimate with this many trials.
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Adversary's best capacity split for each budget.
    Optimum {
        #[arg(long, required = true, value_delimiter = ',')]
        budget: Vec<f64>,
        #[arg(long)]
        allocation: String,
    },
    /// Medium types needed to keep recovery at or below epsilon.
    Diversity {
        #[arg(long, required = true, value_delimiter = ',')]
        budget: Vec<f64>,
        #[arg(long)]
        fragments: u32,
        #[arg(long)]
        epsilon: f64,
    },
    /// Closed-form pool metrics next to a simulation.
    Pool(PoolArgs),
    /// Cross-check the closed forms against brute-force oracles.
    Verify,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    pool_size: usize,
    /// Number of surveilled proxies (the first `a` pool members).
    #[arg(long)]
    surveilled: usize,
    #[arg(long)]
    forward_probability: f64,
    #[arg(long)]
    max_hops: u32,
    #[arg(long, default_value_t = 100_000)]
    requests: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run a benchmark config; raw records go to --out, the summary to stdout.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summary CSV here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Plot mean component latency from a raw records CSV.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Kiosk(cmd) => kiosk(cmd),
        Command::Analyze(cmd) => analyze(cmd),
        Command::Bench(cmd) => bench_cmd(cmd),
    }
}

fn read_text(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn kiosk(cmd: KioskCmd) -> Result<ExitCode> {
    match cmd {
        KioskCmd::Keygen { secret, public } => {
            let key = bootstrap::generate_signing_key();
            std::fs::write(&secret, b64::encode(&key.to_bytes()) + "\n")?;
            std::fs::write(&public, b64::encode(key.verifying_key().as_bytes()) + "\n")?;
        }
        KioskCmd::Issue { key, proxy, validity, now } => {
            let key = bootstrap::signing_key_from_b64(&read_text(&key)?)?;
            let now = now.unwrap_or_else(bootstrap::epoch_now);
            let cred = bootstrap::issue_credential(&proxy, Duration::from_secs(validity), &key, now)?;
            println!("{}", cred.to_text());
        }
        KioskCmd::Verify { public, credential, now } => {
            let pk = bootstrap::verifying_key_from_b64(&read_text(&public)?)?;
            let text = match credential.strip_prefix('@') {
                Some(path) => read_text(&PathBuf::from(path))?,
                None => credential,
            };
            let now = now.unwrap_or_else(bootstrap::epoch_now);
            match bootstrap::verify_credential_text(&text, &pk, now) {
                Verdict::Accepted => {
                    let cred = bootstrap::Credential::from_text(&text).context("credential parse")?;
                    println!("accepted proxy={} expiry={}", cred.proxy_address, cred.expiry);
                }
                Verdict::Rejected(why) => {
                    println!("rejected {why:?}");
                    return Ok(ExitCode::from(2));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} entry {s:?}: {e}")))
        .collect()
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn analyze(cmd: AnalyzeCmd) -> Result<ExitCode> {
    let mut out = csv::Writer::from_writer(io::stdout().lock());
    let mut code = ExitCode::SUCCESS;
    match cmd {
        AnalyzeCmd::Recovery { capacities, allocation, trials, seed } => {
            let c = CapacityVector::new(parse_list(&capacities, "capacity")?)?;
            let alloc = Allocation::new(parse_list(&allocation, "allocation")?);
            out.write_record(["method", "granularity", "probability", "std_error", "trials"])?;
            let closed = recovery_probability(&c, &alloc)?;
            out.write_record(["closed_form", "fragment_level", &closed.to_string(), "0", ""])?;
            let per_type = oracle::per_type_exact(&c, &alloc);
            out.write_record(["enumeration", "per_type", &per_type.to_string(), "0", ""])?;
            if let Some(trials) = trials {
                let mc = monte_carlo_recovery(&c, &alloc, trials, seed)?;
                for (name, e) in [("per_type", mc.per_type), ("fragment_level", mc.fragment_level)] {
                    out.write_record([
                        "monte_carlo",
                        name,
                        &e.estimate.to_string(),
                        &e.std_error.to_string(),
                        &e.trials.to_string(),
                    ])?;
                }
            }
        }
        AnalyzeCmd::Optimum { budget, allocation } => {
            let alloc = Allocation::new(parse_list(&allocation, "allocation")?);
            let n = alloc.total();
            let d = alloc.types() as u32;
            out.write_record(["budget", "capacities", "recovery", "interior_formula", "uniform_bound"])?;
            for b in budget {
                let (c, p) = adversary_optimum(b, &alloc)?;
                out.write_record([
                    b.to_string(),
                    fmt_vec(c.values()),
                    p.to_string(),
                    interior_optimum(b, &alloc).to_string(),
                    uniform_bound(b, d, n).to_string(),
                ])?;
            }
        }
        AnalyzeCmd::Diversity { budget, fragments, epsilon } => {
            out.write_record(["budget", "fragments", "epsilon", "types", "achieved"])?;
            for b in budget {
                let d = required_diversity(b, fragments, epsilon)?;
                out.write_record([
                    b.to_string(),
                    fragments.to_string(),
                    epsilon.to_string(),
                    d.to_string(),
                    uniform_bound(b, d, fragments).min(1.0).to_string(),
                ])?;
            }
        }
        AnalyzeCmd::Pool(args) => pool(&mut out, &args)?,
        AnalyzeCmd::Verify => {
            out.write_record(["check", "cases", "max_deviation", "passed"])?;
            for check in analyzer::verify::run_suite() {
                if !check.passed {
                    code = ExitCode::FAILURE;
                }
                out.write_record([
                    check.name,
                    check.cases.to_string(),
                    format!("{:e}", check.max_deviation),
                    check.passed.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(code)
}

fn pool<W: Write>(out: &mut csv::Writer<W>, args: &PoolArgs) -> Result<()> {
    let params = PoolParams {
        pool_size: args.pool_size,
        surveilled: args.surveilled,
        forward_probability: args.forward_probability,
        max_hops: args.max_hops,
    };
    params.validate()?;
    let sim = PoolSimConfig {
        pool_size: args.pool_size,
        forward_probability: args.forward_probability,
        beta: 1.0,
        max_hops: args.max_hops,
    };
    let traces = simulate_pool(&sim, args.requests, args.seed)?;
    let mask: Vec<bool> = (0..args.pool_size).map(|i| i < args.surveilled).collect();
    let obs = observe_pool(&traces, &mask)?;
    let q = args.forward_probability;

    out.write_record(["metric", "closed_form", "simulated", "std_error"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let row = |name: &str, closed: Option<f64>, sim: Option<f64>, se: Option<f64>| {
        [name.to_owned(), cell(closed), cell(sim), cell(se)]
    };
    out.write_record(row(
        "expected_hops",
        Some(expected_hops(q, args.max_hops)?),
        Some(obs.mean_hops),
        Some(obs.hops_std_error),
    ))?;
    out.write_record(row(
        "hop_std_dev",
        Some(hop_variance(q, args.max_hops)?.sqrt()),
        None,
        None,
    ))?;
    out.write_record(row(
        "path_surveilled",
        Some(path_surveilled_probability(&params)?),
        Some(obs.path_surveilled.estimate),
        Some(obs.path_surveilled.std_error),
    ))?;
    out.write_record(row(
        "entry_exit_surveilled_multi_hop",
        Some(pool_correlation_probability(&params)?),
        Some(obs.entry_exit_surveilled.estimate),
        Some(obs.entry_exit_surveilled.std_error),
    ))?;
    if obs.exits.len() >= 10 * args.pool_size {
        let chi = exit_uniformity_test(&obs.exits, args.pool_size)?;
        out.write_record(row("exit_uniformity_p_value", None, Some(chi.p_value), None))?;
    }
    Ok(())
}

fn bench_cmd(cmd: BenchCmd) -> Result<ExitCode> {
    match cmd {
        BenchCmd::Run { config, out, summary } => {
            let cfg = BenchConfig::from_file(&config)?;
            let run = bench::run_bench_blocking(&cfg)?;
            bench::write_records_csv(
                File::create(&out).with_context(|| format!("creating {}", out.display()))?,
                &run.records,
            )?;
            let rows = bench::summarize(&run.records)?;
            if let Some(path) = summary {
                bench::write_summary_csv(File::create(path)?, &rows)?;
            }
            bench::write_summary_csv(io::stdout().lock(), &rows)?;
            if run.failures > 0 {
                eprintln!("{} of {} trials failed", run.failures, cfg.runs);
            }
        }
        BenchCmd::Plot { input, out } => {
            let records = bench::read_records_csv(File::open(&input)?)?;
            if records.is_empty() {
                bail!("{} holds no records", input.display());
            }
            bench::plot_summary_svg(&bench::summarize(&records)?, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
