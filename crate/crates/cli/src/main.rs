use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::info;

use trispec_core::harness::{
    load_source, parse_pairs_file, run_experiment, run_histogram, run_sweep, verify_suite, write_sweep, write_trace,
    ConfigError, ExperimentConfig, HarnessError, ModelFamily, SuiteName, SweepGrid,
};

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("train", "Build the model family and write it as JSON"),
    ("run", "Decode the held-out prompts and write report.json and trace.csv"),
    ("sweep", "Run a parameter grid and write sweep.csv"),
    (
        "hist",
        "Bucket proxy margins against target agreement and write hist.dat",
    ),
    ("verify", "Run the property suites"),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn key_args(keys: &[&'static str]) -> Vec<Arg> {
    keys.iter()
        .map(|&k| {
            let long = flag(k);
            let arg = Arg::new(k)
                .long(long.clone())
                .value_name("VALUE")
                .help_heading("Config keys");
            if long != k {
                arg.alias(k)
            } else {
                arg
            }
        })
        .collect()
}

fn cli() -> Command {
    let common = [
        Arg::new("config")
            .short('c')
            .long("config")
            .value_name("FILE")
            .help("key = value config file; flags override it"),
        Arg::new("out")
            .short('o')
            .long("out")
            .value_name("DIR")
            .default_value(".")
            .help("Directory for output files"),
    ];
    let mut cmd = Command::new("trispec")
        .about("Speculative decoding with a proxy verifier over n-gram oracles")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("More log output (repeat for more)"),
        );
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .args(common.clone())
            .args(key_args(ExperimentConfig::KEYS));
        match name {
            "sweep" => sub = sub.args(key_args(SweepGrid::KEYS)),
            "verify" => {
                sub = sub.arg(
                    Arg::new("suite")
                        .long("suite")
                        .value_name("NAME")
                        .value_delimiter(',')
                        .action(ArgAction::Append)
                        .help("lossless, equivalence, lemma, invariants or all [default: all]"),
                )
            }
            _ => {}
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Config file pairs, then flag overrides.
fn load_config(m: &ArgMatches, sweep: bool) -> Result<(ExperimentConfig, SweepGrid), HarnessError> {
    let mut cfg = ExperimentConfig::default();
    let mut grid = SweepGrid::default();
    if let Some(path) = m.get_one::<String>("config") {
        for (k, v) in parse_pairs_file(Path::new(path))? {
            if k.starts_with("sweep_") {
                if !sweep {
                    return Err(HarnessError::Grid(format!("{k} is only valid for the sweep command")));
                }
                grid.set(&k, &v)?;
            } else {
                cfg.set(&k, &v)?;
            }
        }
    }
    for &k in ExperimentConfig::KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    if sweep {
        for &k in SweepGrid::KEYS {
            if let Some(v) = m.get_one::<String>(k) {
                grid.set(k, v)?;
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, grid))
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf, HarnessError> {
    let dir = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn train(m: &ArgMatches) -> Result<i32, HarnessError> {
    let (cfg, _) = load_config(m, false)?;
    let corpus = load_source(&cfg.corpus, cfg.tokenizer)?;
    let family = ModelFamily::build(&cfg, &corpus)?;
    let path = out_dir(m)?.join("family.json");
    family.save(&path, cfg.tokenizer)?;
    println!(
        "family: {} / {} / {} over {} symbols -> {}",
        family.drafter.kind().describe(),
        family.proxy.kind().describe(),
        family.target.kind().describe(),
        family.vocab_size(),
        path.display()
    );
    Ok(0)
}

fn run(m: &ArgMatches) -> Result<i32, HarnessError> {
    let (cfg, _) = load_config(m, false)?;
    let result = run_experiment(&cfg)?;
    let dir = out_dir(m)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&result.report)?)?;
    write_trace(fs::File::create(dir.join("trace.csv"))?, &result.trace)?;
    let r = &result.report;
    println!(
        "{}: {} tokens, {} rounds, tau {:.3}, r_t {:.4}, speedup {:.3}, latency {:.1}",
        cfg.method, r.n_tokens, r.rounds, r.tau_mean, r.r_t, r.speedup, r.latency
    );
    if let Some(ppl) = r.target_perplexity {
        println!("perplexity under target: {ppl:.3}");
    }
    Ok(0)
}

fn sweep(m: &ArgMatches) -> Result<i32, HarnessError> {
    let (cfg, grid) = load_config(m, true)?;
    let rows = run_sweep(&cfg, &grid)?;
    let path = out_dir(m)?.join("sweep.csv");
    write_sweep(fs::File::create(&path)?, &rows)?;
    for r in &rows {
        println!(
            "{:>3} {:<12} k={:<2} lambda={:<5} eps={:<5} r_t={:.4} speedup={:.3}",
            r.index, r.method, r.k, r.lambda, r.epsilon, r.r_t, r.speedup
        );
    }
    info!("wrote {}", path.display());
    Ok(0)
}

fn hist(m: &ArgMatches) -> Result<i32, HarnessError> {
    let (cfg, _) = load_config(m, false)?;
    let h = run_histogram(&cfg)?;
    let path = out_dir(m)?.join("hist.dat");
    fs::write(&path, h.to_dat())?;
    print!("{}", h.to_dat());
    match h.mismatch_rank_correlation() {
        Some(rho) => println!(
            "spearman(margin, mismatch fraction) = {rho:.4} over {} positions",
            h.positions
        ),
        None => println!("too few occupied bins for a rank correlation"),
    }
    Ok(0)
}

fn verify(m: &ArgMatches) -> Result<i32, HarnessError> {
    let (cfg, _) = load_config(m, false)?;
    let mut suites = Vec::new();
    for name in m.get_many::<String>("suite").into_iter().flatten() {
        if name == "all" {
            suites.extend(SuiteName::ALL);
        } else {
            let s = name.parse::<SuiteName>().map_err(|e| ConfigError::BadValue {
                key: "suite".into(),
                value: name.clone(),
                reason: e,
            })?;
            suites.push(s);
        }
    }
    if suites.is_empty() {
        suites.extend(SuiteName::ALL);
    }
    let report = verify_suite(&suites, &cfg)?;
    for r in &report.results {
        println!(
            "{:<12} {} ({} checks): {}",
            r.suite,
            if r.passed { "PASS" } else { "FAIL" },
            r.checks,
            r.detail
        );
    }
    fs::write(out_dir(m)?.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(if report.all_passed() { 0 } else { 1 })
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "train" => train(sub),
        "run" => run(sub),
        "sweep" => sweep(sub),
        "hist" => hist(sub),
        "verify" => verify(sub),
        _ => unreachable!(),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
