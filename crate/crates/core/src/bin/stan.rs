//! Command-line front end: data generation, training, evaluation, suites and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use stan_core::encoders::weights::{load_params, save_params};
use stan_core::harness::config::KEYS;
use stan_core::harness::{
    emit_report, evaluate, merge_reports, run_experiment_suite, train, ExperimentRow, RunConfig,
    RunData, Suite,
};
use stan_core::model::{FeatureBank, VideoModel};
use stan_core::synthdata::{
    generate_retrieval_set, generate_split, save_dataset, Split, SynthConfig, NUM_CLASSES,
};
use stan_core::{Error, Result};

fn kebab(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

/// `--config` plus one flag per configuration key.
fn run_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("`key = value` file; flags given here override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(*key).long(kebab(key)).value_name("VALUE"))
    })
}

fn cli() -> Command {
    Command::new("stan")
        .about("Spatial-temporal auxiliary branch: synthetic data, training, evaluation, suites")
        .subcommand_required(true)
        .subcommand(run_args(
            Command::new("gen-data")
                .about("Write a synthetic dataset file")
                .arg(
                    Arg::new("split")
                        .long("split")
                        .default_value("train")
                        .value_parser(["train", "test", "retrieval", "retrieval-test"]),
                )
                .arg(Arg::new("out").long("out").required(true).value_name("FILE")),
        ))
        .subcommand(run_args(
            Command::new("train")
                .about("Train the branch and task head, write all weights")
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(
                    Arg::new("loss-trace")
                        .long("loss-trace")
                        .value_name("FILE")
                        .help("write the per-step loss, one value per line"),
                ),
        ))
        .subcommand(run_args(
            Command::new("eval")
                .about("Evaluate trained weights on the test split")
                .arg(Arg::new("weights").long("weights").required(true).value_name("FILE"))
                .arg(Arg::new("label").long("label").default_value("model")),
        ))
        .subcommand(run_args(
            Command::new("suite")
                .about("Run an experiment suite and write a CSV report")
                .arg(
                    Arg::new("name")
                        .long("name")
                        .required(true)
                        .help("ablation | level_sweep | layer_sweep"),
                ),
        ))
        .subcommand(
            Command::new("report")
                .about("Merge CSV reports into one, sorted by variant")
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(Arg::new("inputs").required(true).num_args(1..).action(ArgAction::Append)),
        )
}

/// Defaults, then the config file, then flags, then `STAN_SEED`.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        run.apply_file(path)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            run.set(key, v)?;
        }
    }
    run.apply_env()?;
    Ok(run)
}

fn path_arg(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required by clap"))
}

fn write_report(run: &RunConfig, rows: &[ExperimentRow]) -> Result<()> {
    if let Some(p) = &run.report {
        emit_report(rows, p)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn print_rows(rows: &[ExperimentRow]) {
    for r in rows {
        for (name, v) in r.metrics.entries() {
            println!("{:<28} {:<22} {:>10.4}", r.variant, name, v);
        }
    }
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let run = run_config(m)?;
    run.model.validate()?;
    let cfg = SynthConfig::for_model(&run.model);
    let ds = match m.get_one::<String>("split").map(String::as_str) {
        Some("test") => generate_split(run.seed, run.test_per_class, &cfg, Split::Test)?,
        Some("retrieval") => generate_retrieval_set(run.seed, &cfg, Split::Train)?,
        Some("retrieval-test") => generate_retrieval_set(run.seed, &cfg, Split::Test)?,
        _ => generate_split(run.seed, run.train_per_class, &cfg, Split::Train)?,
    };
    let out = path_arg(m, "out");
    save_dataset(&out, &ds)?;
    eprintln!("wrote {} clips to {}", ds.len(), out.display());
    Ok(())
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let run = run_config(m)?;
    let (out, _, _) = train(&run)?;
    let path = path_arg(m, "out");
    save_params(&path, &out.model.to_param_set())?;
    if let Some(trace) = m.get_one::<String>("loss-trace") {
        let text: String = out.loss_trace.iter().map(|l| format!("{l:.17e}\n")).collect();
        fs::write(trace, text)?;
    }
    let (first, last) = (out.loss_trace.first(), out.loss_trace.last());
    if let (Some(a), Some(b)) = (first, last) {
        eprintln!("{} steps, loss {a:.4} -> {b:.4}", out.loss_trace.len());
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> Result<()> {
    let run = run_config(m)?;
    run.validate()?;
    let params = load_params(&path_arg(m, "weights"))?;
    let model = VideoModel::from_param_set(run.model.clone(), &params, NUM_CLASSES)?;
    let test = RunData::test_split(&run)?;
    let bank = FeatureBank::build(&test.clip_tensors(), &model.backbone, &model.config, &model.required_layers()?)?;
    let metrics = evaluate(&model, &test, &bank, run.task, run.use_dsl, run.dsl_temperature)?;
    let rows = vec![ExperimentRow {
        variant: m.get_one::<String>("label").cloned().unwrap_or_default(),
        switches: run.model.switches,
        task: run.task,
        metrics,
        seconds: 0.0,
    }];
    print_rows(&rows);
    write_report(&run, &rows)
}

fn suite_cmd(m: &ArgMatches) -> Result<()> {
    let run = run_config(m)?;
    let suite: Suite = m.get_one::<String>("name").expect("required").parse()?;
    let rows = run_experiment_suite(&run, suite)?;
    print_rows(&rows);
    write_report(&run, &rows)
}

fn report_cmd(m: &ArgMatches) -> Result<()> {
    let texts = m
        .get_many::<String>("inputs")
        .into_iter()
        .flatten()
        .map(|p| fs::read_to_string(Path::new(p)).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let out = path_arg(m, "out");
    fs::write(&out, merge_reports(&texts)?)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let res = match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("train", m)) => train_cmd(m),
        Some(("eval", m)) => eval_cmd(m),
        Some(("suite", m)) => suite_cmd(m),
        Some(("report", m)) => report_cmd(m),
        _ => unreachable!("clap requires a subcommand"),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
