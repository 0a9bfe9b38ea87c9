use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use cfsl::config::{RunConfig, KEYS};
use cfsl::Error;

mod commands;

const ANALYSES: [&str; 6] = ["influence", "ablate-f", "ablate-w", "bins", "heatmap", "overlap"];

fn with_config_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key=value config file; flags override its values"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        let dashed = key.replace('_', "-");
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").help(*help).hide_short_help(true);
        if dashed != *key {
            arg = arg.alias(&*dashed.leak());
        }
        cmd.arg(arg)
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    Command::new("cfsl")
        .about("Compositional few-shot recognition: data generation, training, episodic evaluation and analysis")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_keys(
            Command::new("gen-data")
                .about("Generate the synthetic dataset as a PNM folder")
                .arg(path_arg("out", "output dataset directory")),
        ))
        .subcommand(with_config_keys(
            Command::new("train")
                .about("Train on the known classes of a dataset")
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("run-dir", "directory for checkpoints, metrics and the resolved config"))
                .arg(Arg::new("no-split").long("no-split").action(ArgAction::SetTrue).help("disable the split-order loss"))
                .arg(Arg::new("no-er").long("no-er").action(ArgAction::SetTrue).help("disable the enlarging-reducing loss"))
                .arg(Arg::new("no-rot").long("no-rot").action(ArgAction::SetTrue).help("disable the rotation loss"))
                .arg(Arg::new("no-sparse").long("no-sparse").action(ArgAction::SetTrue).help("disable the sparseness loss")),
        ))
        .subcommand(with_config_keys(
            Command::new("eval")
                .about("K-way N-shot episodic evaluation on the novel classes")
                .arg(path_arg("checkpoint", "model checkpoint"))
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("out", "output directory")),
        ))
        .subcommand(with_config_keys(
            Command::new("analyze")
                .about("Channel-level analyses of a trained model")
                .arg(Arg::new("which").required(true).value_parser(ANALYSES))
                .arg(path_arg("checkpoint", "model checkpoint"))
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("out", "output directory")),
        ))
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
        Error::Shape(_) | Error::NonFinite(_) => 4,
    }
}

fn run(matches: &ArgMatches) -> Result<(), Error> {
    let (name, m) = matches.subcommand().expect("subcommand required");
    let mut cfg = resolve_config(m)?;
    let path = |k: &str| m.get_one::<PathBuf>(k).expect("required path").clone();
    match name {
        "gen-data" => commands::gen_data(&cfg, &path("out")),
        "train" => {
            let w = &mut cfg.train.loss_weights;
            if m.get_flag("no-split") {
                w.alpha1 = 0.0;
            }
            if m.get_flag("no-er") {
                w.alpha2 = 0.0;
            }
            if m.get_flag("no-rot") {
                w.rotation_weight = 0.0;
            }
            if m.get_flag("no-sparse") {
                w.sparseness_weight = 0.0;
            }
            commands::train(&cfg, &path("data"), &path("run-dir"))
        }
        "eval" => commands::eval(&cfg, &path("checkpoint"), &path("data"), &path("out")),
        "analyze" => {
            let which = m.get_one::<String>("which").expect("required");
            commands::analyze(&cfg, which, &path("checkpoint"), &path("data"), &path("out"))
        }
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
