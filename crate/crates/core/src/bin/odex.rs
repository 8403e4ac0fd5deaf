use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use odex::harness::config::CONFIG_KEYS;
use odex::harness::{inspect_pool, report, run_experiment, ExperimentConfig};
use odex::stream::io::write_stream;
use odex::stream::{Scenario, Stream};

fn cli() -> Command {
    let mut run = Command::new("run")
        .about("Run every configured (method, seed) unit and write reports")
        .arg(Arg::new("config").long("config").value_parser(value_parser!(PathBuf)))
        .arg(
            Arg::new("method")
                .long("method")
                .action(ArgAction::Append)
                .help("Method name or comma list; repeatable; replaces `methods`"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .action(ArgAction::Append)
                .help("Seed or comma list; repeatable; replaces `seeds`"),
        );
    for key in CONFIG_KEYS {
        let kebab = key.replace('_', "-");
        let mut arg = Arg::new(key).long(key).value_name("VALUE").help(format!("Override `{key}`"));
        if kebab != *key {
            arg = arg.alias(kebab);
        }
        run = run.arg(arg);
    }
    Command::new("odex")
        .about("Continual segmentation with an out-of-distribution gated model pool")
        .subcommand_required(true)
        .subcommand(
            Command::new("gen-stream")
                .about("Generate a synthetic stream and write it as stage files")
                .arg(Arg::new("scenario").long("scenario").default_value("shifting_source"))
                .arg(Arg::new("stages").long("stages").default_value("5").value_parser(value_parser!(usize)))
                .arg(Arg::new("samples").long("samples").default_value("200").value_parser(value_parser!(usize)))
                .arg(Arg::new("test").long("test").default_value("50").value_parser(value_parser!(usize)))
                .arg(Arg::new("size").long("size").default_value("32").value_parser(value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").default_value("1").value_parser(value_parser!(u64)))
                .arg(Arg::new("out").long("out").required(true).value_parser(value_parser!(PathBuf))),
        )
        .subcommand(run)
        .subcommand(
            Command::new("report")
                .about("Rebuild CSV reports and print tables for a results directory")
                .arg(Arg::new("dir").long("dir").required(true).value_parser(value_parser!(PathBuf))),
        )
        .subcommand(
            Command::new("inspect-pool")
                .about("Print the entries of a saved pool checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_parser(value_parser!(PathBuf))),
        )
}

fn joined(m: &ArgMatches, id: &str) -> Option<String> {
    m.get_many::<String>(id).map(|v| v.map(String::as_str).collect::<Vec<_>>().join(","))
}

fn run_cmd(m: &ArgMatches) -> odex::Result<()> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for key in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(v) = joined(m, "method") {
        cfg.set("methods", &v)?;
    }
    if let Some(v) = joined(m, "seed") {
        cfg.set("seeds", &v)?;
    }
    let out = run_experiment(&cfg)?;
    print!("{}", out.table);
    let errors = cfg.output_dir.join("errors.log");
    if errors.exists() {
        eprintln!("some units failed; see {}", errors.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-stream", m)) => (|| {
            let scenario = Scenario::parse(m.get_one::<String>("scenario").unwrap())?;
            let stream = Stream::build(
                scenario,
                *m.get_one("stages").unwrap(),
                *m.get_one("samples").unwrap(),
                *m.get_one("test").unwrap(),
                *m.get_one("size").unwrap(),
                *m.get_one("seed").unwrap(),
            )?;
            let out: &PathBuf = m.get_one("out").unwrap();
            write_stream(out, &stream)?;
            println!("wrote {} stages to {}", stream.n_stages(), out.display());
            Ok(())
        })(),
        Some(("run", m)) => run_cmd(m),
        Some(("report", m)) => report(m.get_one::<PathBuf>("dir").unwrap()).map(|r| print!("{}", r.table)),
        Some(("inspect-pool", m)) => inspect_pool(m.get_one::<PathBuf>("checkpoint").unwrap()).map(|s| print!("{s}")),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
