use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memsched::banksim::{measure_port, random_case, replay_schedule};
use memsched::benchmarks::{benchmark_source, BENCHMARKS};
use memsched::costmodel::{bank_eff, compare_scenarios, word_eff, Comparison};
use memsched::crosslayer::{ScheduleDoc, ScheduleError, ScheduleOptions};
use memsched::hardware::{bank_access_patterns, multiplexer_count, parse_config, AcceleratorConfig};
use memsched::layermapper::{build_pools, import_layerwise_results, SUPool};
use memsched::report::{table, CompareEntry, CompareReport, RunManifest, ScheduleReport};
use memsched::workload::parse_network;
use memsched::{Metric, NetworkGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "memsched", version, about = "Memory-aware cross-layer dataflow scheduler for banked DNN accelerators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a network and a hardware description and print what was derived.
    Validate {
        /// Network JSON file or shipped benchmark name.
        network: String,
        #[arg(long, default_value = "proposed")]
        hw: String,
    },
    /// Search a schedule for one network and write it with a report.
    Schedule {
        network: String,
        #[arg(long, default_value = "proposed")]
        hw: String,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Compare naive, reshuffle-buffer and scheduled costs.
    Compare {
        /// One or more networks; `all` expands to every shipped benchmark.
        #[arg(required = true)]
        networks: Vec<String>,
        /// Repeatable; defaults to all three presets.
        #[arg(long)]
        hw: Vec<String>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Replay a schedule through the bank simulator, or fuzz the port model.
    Simulate {
        network: Option<String>,
        /// Schedule document written by `schedule`.
        schedule: Option<PathBuf>,
        #[arg(long, default_value = "proposed")]
        hw: String,
        /// Check this many random layout cases instead of a schedule.
        #[arg(long)]
        fuzz: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 0.1)]
    theta: f64,
    #[arg(long, default_value = "edp")]
    metric: Metric,
    /// Partial assignments kept per layer during the layout search.
    #[arg(long, default_value_t = ScheduleOptions::default().beam)]
    beam: u64,
    /// Worker threads for the search; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; reports are only printed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-SU cost table to use instead of the built-in layer model.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Fail instead of cutting edges no shared layout can serve.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Infeasible(String),
    Mismatch(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Infeasible(m) | Failure::Mismatch(m) | Failure::Io(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { network, hw } => cmd_validate(&network, &hw),
        Command::Schedule { network, hw, search } => cmd_schedule(&network, &hw, &search),
        Command::Compare { networks, hw, search } => cmd_compare(&networks, &hw, &search),
        Command::Simulate {
            network,
            schedule,
            hw,
            fuzz,
            seed,
            out,
        } => match fuzz {
            Some(n) => cmd_fuzz(n, seed, out.as_deref()),
            None => match (network, schedule) {
                (Some(n), Some(s)) => cmd_simulate(&n, &s, &hw, out.as_deref()),
                _ => Err(Failure::Validation(
                    "simulate needs a network and a schedule file, or --fuzz N".into(),
                )),
            },
        },
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn load_network(spec: &str) -> Result<NetworkGraph, Failure> {
    let path = Path::new(spec);
    let text = if path.exists() {
        read(path)?
    } else if let Some(src) = benchmark_source(spec) {
        src.to_string()
    } else {
        return Err(Failure::Validation(format!(
            "`{spec}` is neither a file nor a shipped benchmark ({})",
            BENCHMARKS.join(", ")
        )));
    };
    parse_network(&text).map_err(|e| Failure::Validation(format!("{spec}: {e}")))
}

fn load_hardware(spec: &str) -> Result<AcceleratorConfig, Failure> {
    if AcceleratorConfig::PRESETS.contains(&spec) {
        return AcceleratorConfig::preset(spec).map_err(|e| Failure::Validation(e.to_string()));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Failure::Validation(format!(
            "`{spec}` is neither a hardware file nor a preset ({})",
            AcceleratorConfig::PRESETS.join(", ")
        )));
    }
    parse_config(&read(path)?).map_err(|e| Failure::Validation(format!("{spec}: {e}")))
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn cmd_validate(network: &str, hw: &str) -> Result<String, Failure> {
    let graph = load_network(network)?;
    let hw = load_hardware(hw)?;
    let g = &hw.act_mem;
    let mut out = String::new();
    let _ = writeln!(out, "hardware {}: {}x{} PEs", hw.name, hw.pe.rows, hw.pe.cols);
    let _ = writeln!(
        out,
        "  word_bits={} bd_words={} pd_words={} md_words={}",
        g.word_bits,
        g.bd_words(),
        g.pd_words(),
        g.md_words()
    );
    let _ = writeln!(
        out,
        "  bank_count={} port_banks={} bank_rows={} multiplexers={} access_patterns={}",
        g.bank_count(),
        g.port_banks(),
        g.bank_rows(),
        multiplexer_count(g),
        bank_access_patterns(g)
    );
    let multi = graph.producer_groups().iter().filter(|(_, c)| c.len() > 1).count();
    let macs: u64 = graph.layers().iter().map(|l| l.macs()).sum();
    let _ = writeln!(
        out,
        "network {network}: {} layers, {} edges, {} tensors with several consumers, {} MACs",
        graph.len(),
        graph.edges().len(),
        multi,
        macs
    );
    Ok(out)
}

fn search_setup(args: &SearchArgs) -> Result<ScheduleOptions, Failure> {
    if !(args.theta.is_finite() && args.theta >= 0.0) {
        return Err(Failure::Validation(format!("--theta must be a non-negative number, got {}", args.theta)));
    }
    if args.beam == 0 {
        return Err(Failure::Validation("--beam must be at least 1".into()));
    }
    if args.jobs > 0 {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build_global();
    }
    Ok(ScheduleOptions {
        theta: args.theta,
        metric: args.metric,
        beam: args.beam,
        fallback: !args.no_fallback,
    })
}

fn manifest(network: String, hardware: String, args: &SearchArgs) -> RunManifest {
    RunManifest {
        network,
        hardware,
        theta: args.theta,
        metric: args.metric,
        beam: args.beam,
        seed: args.seed,
        out: args.out.as_ref().map_or_else(String::new, |p| p.display().to_string()),
        costs: args.costs.as_ref().map(|p| p.display().to_string()),
        fallback: !args.no_fallback,
    }
}

fn pools_for(graph: &NetworkGraph, hw: &AcceleratorConfig, args: &SearchArgs) -> Result<Vec<SUPool>, Failure> {
    match &args.costs {
        Some(path) => import_layerwise_results(&read(path)?, graph, hw, args.metric)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display()))),
        None => Ok(build_pools(graph, hw, args.metric)),
    }
}

fn run_comparison(
    graph: &NetworkGraph,
    hw: &AcceleratorConfig,
    args: &SearchArgs,
    opts: &ScheduleOptions,
) -> Result<Comparison, Failure> {
    let pools = pools_for(graph, hw, args)?;
    compare_scenarios(graph, &pools, hw, opts).map_err(|e| match e {
        ScheduleError::Infeasible { .. } => Failure::Infeasible(e.to_string()),
        ScheduleError::Empty => Failure::Validation(e.to_string()),
    })
}

fn cmd_schedule(network: &str, hw_spec: &str, args: &SearchArgs) -> Result<String, Failure> {
    let opts = search_setup(args)?;
    let graph = load_network(network)?;
    let hw = load_hardware(hw_spec)?;
    let cmp = run_comparison(&graph, &hw, args, &opts)?;
    let report = ScheduleReport::new(manifest(network.into(), hw_spec.into(), args), &graph, &cmp);
    let text = report.to_text();
    if let Some(dir) = &args.out {
        let doc = ScheduleDoc::new(&graph, &cmp.outcome.schedule, &hw);
        write_out(dir, "schedule.json", &(doc.to_json() + "\n"))?;
        write_out(dir, "report.json", &report.to_json())?;
        write_out(dir, "report.txt", &text)?;
    }
    Ok(text)
}

fn cmd_compare(networks: &[String], hw_specs: &[String], args: &SearchArgs) -> Result<String, Failure> {
    let opts = search_setup(args)?;
    let networks: Vec<String> = if networks.iter().any(|n| n == "all") {
        BENCHMARKS.iter().map(|s| s.to_string()).collect()
    } else {
        networks.to_vec()
    };
    let hw_specs: Vec<String> = if hw_specs.is_empty() {
        AcceleratorConfig::PRESETS.iter().map(|s| s.to_string()).collect()
    } else {
        hw_specs.to_vec()
    };
    let mut results = Vec::new();
    for n in &networks {
        let graph = load_network(n)?;
        for h in &hw_specs {
            let hw = load_hardware(h)?;
            results.push((n.clone(), h.clone(), run_comparison(&graph, &hw, args, &opts)?));
        }
    }
    let entries: Vec<CompareEntry<'_>> = results
        .iter()
        .map(|(n, h, c)| CompareEntry {
            network: n.clone(),
            hardware: h.clone(),
            comparison: c,
        })
        .collect();
    let report = CompareReport::new(manifest(networks.join(","), hw_specs.join(","), args), &entries);
    let text = report.to_text();
    if let Some(dir) = &args.out {
        write_out(dir, "compare.json", &report.to_json())?;
        write_out(dir, "compare.txt", &text)?;
        write_out(dir, "compare.csv", &report.to_csv())?;
    }
    Ok(text)
}

fn cmd_simulate(network: &str, schedule: &Path, hw_spec: &str, out: Option<&Path>) -> Result<String, Failure> {
    let graph = load_network(network)?;
    let hw = load_hardware(hw_spec)?;
    let geo = &hw.act_mem;
    let doc: ScheduleDoc = serde_json::from_str(&read(schedule)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", schedule.display())))?;
    let sched = doc
        .to_schedule(&graph, geo)
        .map_err(|e| Failure::Validation(format!("{}: {e}", schedule.display())))?;
    let recorded = |producer: usize, consumer: Option<usize>| -> Option<f64> {
        let p = &graph.layer(producer).id;
        match consumer {
            None => doc.tensors.iter().find(|t| &t.producer == p).map(|t| t.write_pd_eff),
            Some(c) => {
                let c = &graph.layer(c).id;
                doc.edges
                    .iter()
                    .find(|e| &e.producer == p && &e.consumer == c)
                    .map(|e| e.read_pd_eff)
            }
        }
    };
    let (checks, trace) = replay_schedule(&graph, &sched, geo, Some(&recorded))
        .map_err(|e| Failure::Validation(format!("replay failed: {e}")))?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.producer.clone(),
                c.consumer.clone().unwrap_or_else(|| "(write)".into()),
                c.port.to_string(),
                format!("{:.4}", c.analytic_pd_eff),
                format!("{:.4}", c.measured_pd_eff),
                c.transactions.to_string(),
                c.stalls.to_string(),
                if c.matches() { "ok" } else { "MISMATCH" }.to_string(),
            ]
        })
        .collect();
    let mut text = table(
        &["producer", "consumer", "port", "analytic", "measured", "transactions", "stalls", "status"],
        &rows,
        3,
    );
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.matches())
        .map(|c| format!("{} -> {}", c.producer, c.consumer.as_deref().unwrap_or("(write)")))
        .collect();
    let _ = writeln!(
        text,
        "{} streams, {} transactions, {} mismatches",
        checks.len(),
        trace.transactions.len(),
        bad.len()
    );
    if let Some(dir) = out {
        write_out(dir, "simulate.json", &(serde_json::to_string_pretty(&checks).expect("checks serialize") + "\n"))?;
        write_out(dir, "trace.jsonl", &trace.to_jsonl())?;
    }
    if bad.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure::Mismatch(format!("measured port efficiency differs on {}", bad.join(", "))))
    }
}

fn cmd_fuzz(n: usize, seed: u64, out: Option<&Path>) -> Result<String, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut bad = 0;
    for i in 0..n {
        let c = random_case(&mut rng);
        let (m, _) = measure_port(&c.md, &c.port, &c.extent, &c.geo)
            .map_err(|e| Failure::Validation(format!("case {i}: {e}")))?;
        let w = word_eff(&c.bl, &c.port);
        let b = bank_eff(&c.bl, &c.port, &c.md, &c.geo);
        let ok = m.words_per_row == Some(w) && m.banks_per_access == Some(b);
        if !ok {
            bad += 1;
        }
        let _ = writeln!(
            text,
            "case {i}: bd={} pb={} banks={} md={} port={} analytic {w}x{b} measured {}x{} {}",
            c.geo.bd_words(),
            c.geo.port_banks(),
            c.geo.bank_count(),
            c.md.effective(),
            c.port,
            m.words_per_row.map_or_else(|| "?".into(), |v| v.to_string()),
            m.banks_per_access.map_or_else(|| "?".into(), |v| v.to_string()),
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    let _ = writeln!(text, "{n} cases, {bad} mismatches (seed {seed})");
    if let Some(dir) = out {
        write_out(dir, "fuzz.txt", &text)?;
    }
    if bad == 0 {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure::Mismatch(format!("{bad} of {n} random cases disagree with the port model")))
    }
}
