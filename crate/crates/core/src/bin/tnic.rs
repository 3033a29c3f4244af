//! `tnic` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tnic::bench::{self, BenchConfig, DelayModel, Protocol, Transport};
use tnic::checker::{self, BoundedInstance, KernelVariant, Mutation, Verdict};
use tnic::remote_attestation;
use tnic::scenario::Scenario;

#[derive(Parser)]
#[command(name = "tnic", version, about = "Trusted NIC emulation: benchmarks, scenarios, lemma checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more throughput/latency benchmarks.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Append result rows to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        #[arg(long, value_enum)]
        delay: Option<DelayModel>,
        /// Attestation delay in nanoseconds, overriding the preset.
        #[arg(long)]
        delay_ns: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        payload: Option<usize>,
        #[arg(long)]
        requests: Option<usize>,
        /// Write the JSONL network trace here (sim transport only).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a scenario file; exits nonzero on any violation.
    Scenario {
        #[command(flatten)]
        common: Common,
        /// Scenario file; same as --config.
        path: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Model-check the lemmas; exits nonzero on any counterexample.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "correct")]
        kernel: KernelArg,
        /// Directory for counterexample JSON files.
        #[arg(long, default_value = "counterexamples")]
        out: PathBuf,
    },
    /// Run a seeded remote-attestation handshake and print its transcript.
    AttestDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        sessions: u32,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KernelArg {
    Correct,
    SkipCounter,
    AcceptAny,
    PerReceiver,
}

impl From<KernelArg> for KernelVariant {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Correct => KernelVariant::Correct,
            KernelArg::SkipCounter => KernelVariant::SkipCounterIncrement,
            KernelArg::AcceptAny => KernelVariant::AcceptAnyCounterAtLeast,
            KernelArg::PerReceiver => KernelVariant::PerReceiverMulticastCounters,
        }
    }
}

/// A bench file holds one config at top level or several under `[[run]]`.
#[derive(Deserialize)]
#[serde(untagged)]
enum BenchFile {
    Many { run: Vec<BenchConfig> },
    One(BenchConfig),
}

/// A check file narrows the run to one bounded instance.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckFile {
    kernel: Option<KernelVariant>,
    senders: u8,
    messages: u8,
    #[serde(default = "no_mutation")]
    mutation: Mutation,
}

fn no_mutation() -> Mutation {
    Mutation::None
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Bench {
            common,
            csv,
            transport,
            protocol,
            delay,
            delay_ns,
            batch,
            payload,
            requests,
            trace,
        } => {
            let mut configs = match &common.config {
                Some(p) => match toml::from_str::<BenchFile>(&read(p)?).map_err(|e| e.to_string())? {
                    BenchFile::Many { run } => run,
                    BenchFile::One(c) => vec![c],
                },
                None => vec![BenchConfig::new(protocol.ok_or("either --config or --protocol is required")?)],
            };
            for c in &mut configs {
                if let Some(p) = protocol {
                    c.protocol = p;
                }
                if let Some(d) = delay {
                    c.delay = d;
                    c.delay_ns = None;
                }
                c.delay_ns = delay_ns.or(c.delay_ns);
                c.batch = batch.unwrap_or(c.batch);
                c.payload = payload.unwrap_or(c.payload);
                c.requests = requests.unwrap_or(c.requests);
                c.transport = transport.unwrap_or(c.transport);
                c.seed = common.seed.unwrap_or(c.seed);
            }
            let mut records = Vec::new();
            let mut traces = String::new();
            for c in &configs {
                let out = bench::run_bench(c).map_err(|e| e.to_string())?;
                traces.push_str(&out.trace);
                records.push(out.record);
            }
            bench::write_csv(std::io::stdout().lock(), &records).map_err(|e| e.to_string())?;
            if let Some(path) = csv {
                bench::append_csv(&path, &records).map_err(|e| e.to_string())?;
            }
            if let Some(path) = trace {
                std::fs::write(&path, traces).map_err(|e| e.to_string())?;
            }
            Ok(true)
        }
        Command::Scenario { common, path, trace } => {
            let path = path.or(common.config).ok_or("a scenario file is required")?;
            let mut scenario = Scenario::load(&path).map_err(|e| e.to_string())?;
            if let Some(s) = common.seed {
                scenario.set_seed(s);
            }
            let report = scenario.run().map_err(|e| e.to_string())?;
            for line in &report.summary {
                println!("{line}");
            }
            for v in &report.violations {
                eprintln!("VIOLATION: {v}");
            }
            if let Some(t) = trace {
                std::fs::write(&t, &report.trace).map_err(|e| e.to_string())?;
            }
            println!("{}", if report.passed() { "PASS" } else { "FAIL" });
            Ok(report.passed())
        }
        Command::Check { common, kernel, out } => {
            let mut variant = KernelVariant::from(kernel);
            let mut counterexamples = Vec::new();
            let mut ok = true;
            if let Some(p) = &common.config {
                let f: CheckFile = toml::from_str(&read(p)?).map_err(|e| e.to_string())?;
                variant = f.kernel.unwrap_or(variant);
                let inst = BoundedInstance::new(f.senders, f.messages, f.mutation).map_err(|e| e.to_string())?;
                for r in checker::check_instance(&inst, variant).map_err(|e| e.to_string())? {
                    println!("{r}");
                    ok &= r.verdict.holds();
                    if let Verdict::Counterexample(cx) = r.verdict {
                        counterexamples.push((format!("lemma{}", r.lemma.id()), cx));
                    }
                }
            } else {
                let summary = checker::check_grid(variant);
                println!(
                    "kernel {:?}: {} instances, {} states",
                    summary.kernel, summary.instances, summary.states
                );
                for r in &summary.reports {
                    println!("{r}");
                }
                println!("{}", summary.consistency);
                ok = summary.all_hold();
                for r in summary.reports {
                    if let Verdict::Counterexample(cx) = r.verdict {
                        counterexamples.push((format!("lemma{}", r.lemma.id()), cx));
                    }
                }
                if let Verdict::Counterexample(cx) = summary.consistency.verdict {
                    counterexamples.push(("consistency".into(), cx));
                }
            }
            if !counterexamples.is_empty() {
                std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
                for (name, cx) in counterexamples {
                    let path = out.join(format!("{name}.json"));
                    std::fs::write(&path, cx.to_json()).map_err(|e| e.to_string())?;
                    eprintln!("counterexample written to {}", path.display());
                }
            }
            Ok(ok)
        }
        Command::AttestDemo { common, sessions } => {
            let seed = common.seed.unwrap_or(0);
            let demo = remote_attestation::demo(seed, sessions).map_err(|e| e.to_string())?;
            print!("{}", demo.render());
            let leaked = demo.secrets.iter().any(|s| demo.transcript.contains(s));
            if leaked {
                eprintln!("key material found in the transcript");
            }
            Ok(demo.outcome.is_ok() && !leaked)
        }
    }
}
