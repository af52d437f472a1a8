//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! model error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::eval::decide_all;
use super::{
    cross_validate, evaluate, load_model, oracle_check, remove_features, run_experiment, save_model, train,
    write_results, EvalReport, ExperimentSpec, HarnessError, QSpec, TrainConfig, DEFAULT_BINS_DENSE,
    DEFAULT_BINS_SPARSE, DEFAULT_COST_E,
};
use crate::belief::EvaluationCosts;
use crate::dataset::{load, DataFormat, LabeledDataset};
use crate::policy::SolverConfig;
use crate::runtime::{Decision, PolicyModel};
use crate::structure::StructureKind;

#[derive(Debug, Parser)]
#[command(name = "stopwise", version, about = "Cost-aware sequential feature acquisition and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it to disk.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every instance of a dataset, one line per instance.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Append the per-step feature, bin and posterior trace.
        #[arg(long)]
        trace: bool,
        /// Blank this percentage of each instance's feature values.
        #[arg(long, default_value_t = 0.0)]
        missing_pct: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write predictions here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on a dataset, or cross-validate a fresh one.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate this model instead of cross-validating.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        train: ModelArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.0)]
        missing_pct: f64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep described by a TOML file.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare solved policies with exhaustive enumeration on random problems.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `dense` (CSV with a label column) or `sparse` (label idx:val ...).
    #[arg(long, default_value = "dense")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Bins per feature (default 4 for dense data, 10 for sparse).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Evaluation cost per feature: a number, or a CSV file of `feature,cost`.
    #[arg(long, default_value_t = DEFAULT_COST_E.to_string())]
    pub cost_e: String,
    /// `zero-one`, or a file with one row of the cost matrix per line.
    #[arg(long, default_value = "zero-one")]
    pub cost_q: String,
    #[arg(long, default_value = "tree")]
    pub structure: StructureKind,
    #[arg(long, default_value_t = super::DEFAULT_BETA)]
    pub beta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on remembered ancestor contexts per stage.
    #[arg(long, default_value_t = SolverConfig::default().max_contexts)]
    pub max_contexts: usize,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn load_data(args: &DataArgs) -> Result<(LabeledDataset, DataFormat), HarnessError> {
    let format: DataFormat = args.format.parse().map_err(HarnessError::Config)?;
    Ok((load(&args.data, format)?, format))
}

fn train_config(args: &ModelArgs, ds: &LabeledDataset, format: DataFormat) -> Result<TrainConfig, HarnessError> {
    let bins = args.bins.unwrap_or(match format {
        DataFormat::DenseCsv => DEFAULT_BINS_DENSE,
        DataFormat::Sparse => DEFAULT_BINS_SPARSE,
    });
    Ok(TrainConfig {
        bins,
        q: parse_cost_q(&args.cost_q)?,
        evaluation: parse_cost_e(&args.cost_e, ds.feature_names())?,
        structure: args.structure,
        beta: args.beta,
        seed: args.seed,
        solver: SolverConfig {
            max_contexts: args.max_contexts,
            ..SolverConfig::default()
        },
    })
}

fn parse_cost_q(arg: &str) -> Result<QSpec, HarnessError> {
    if arg == "zero-one" {
        return Ok(QSpec::ZeroOne);
    }
    let text = fs::read_to_string(arg).map_err(|e| HarnessError::io(arg, e))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| HarnessError::Config(format!("bad cost `{t}` in {arg}"))))
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QSpec::Matrix(rows))
}

fn parse_cost_e(arg: &str, names: &[String]) -> Result<EvaluationCosts, HarnessError> {
    if let Ok(e) = arg.parse::<f64>() {
        return Ok(EvaluationCosts::Uniform(e));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(arg)?;
    let mut costs = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let (Some(feature), Some(cost)) = (record.get(0), record.get(1)) else {
            return Err(HarnessError::Config(format!("{arg}:{}: expected `feature,cost`", line + 1)));
        };
        let Ok(cost) = cost.parse::<f64>() else {
            if line == 0 {
                continue;
            }
            return Err(HarnessError::Config(format!("{arg}:{}: bad cost `{cost}`", line + 1)));
        };
        let id = names
            .iter()
            .position(|n| n == feature)
            .or_else(|| feature.parse::<usize>().ok().filter(|&i| i < names.len()))
            .ok_or_else(|| HarnessError::Config(format!("{arg}:{}: unknown feature `{feature}`", line + 1)))?;
        costs.insert(id, cost);
    }
    Ok(EvaluationCosts::PerFeature {
        default: DEFAULT_COST_E,
        costs,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn io_err(e: std::io::Error) -> HarnessError {
    HarnessError::io("output", e)
}

fn format_decision(i: usize, d: &Decision, model: &PolicyModel, trace: bool) -> String {
    let mut line = format!("{i}\t{}\t{}", model.class_labels[d.class], d.features_used);
    if trace {
        let steps: Vec<String> = d
            .trace
            .iter()
            .map(|s| {
                let bin = s.bin.map_or_else(|| "missing".to_string(), |b| b.to_string());
                let post: Vec<String> = s.posterior.as_slice().iter().map(|p| format!("{p:.6}")).collect();
                format!("{}={bin}:[{}]", model.feature_names[s.feature], post.join(","))
            })
            .collect();
        line.push('\t');
        line.push_str(&steps.join(" "));
    }
    line
}

fn print_report(r: &EvalReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "accuracy\t{:.6}", r.accuracy)?;
    writeln!(out, "avg_features\t{:.6}", r.avg_features)?;
    writeln!(out, "n_test\t{}", r.n_test)?;
    writeln!(out, "preprocess_s\t{:.6}", r.times.preprocess_s)?;
    writeln!(out, "train_s\t{:.6}", r.times.train_s)?;
    writeln!(out, "inference_s\t{:.6}", r.times.inference_s)?;
    writeln!(out, "total_s\t{:.6}", r.total_s)?;
    for f in &r.folds {
        writeln!(
            out,
            "fold {}\taccuracy {:.6}\tavg_features {:.6}\thorizon {}\tkept {}",
            f.fold, f.accuracy, f.avg_features, f.horizon, f.kept_features
        )?;
    }
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), HarnessError> {
    match cmd {
        Command::Train { data, model, out: path } => {
            let (ds, format) = load_data(&data)?;
            let cfg = train_config(&model, &ds, format)?;
            let trained = train(&ds, &cfg)?;
            save_model(&trained.model, &path)?;
            writeln!(
                out,
                "wrote {} (horizon {}, {} kept features, {} alpha vectors)",
                path.display(),
                trained.model.horizon(),
                trained.filter.kept.len(),
                trained.model.policy.vector_count()
            )
            .map_err(io_err)?;
        }
        Command::Predict {
            model,
            data,
            trace,
            missing_pct,
            seed,
            out: path,
        } => {
            let model = load_model(&model)?;
            let (ds, _) = load_data(&data)?;
            let ds = remove_features(&ds, missing_pct, seed)?;
            let decisions = decide_all(&model, &ds)?;
            let mut sink: Box<dyn Write + '_> = match &path {
                Some(p) => Box::new(create(p)?),
                None => Box::new(&mut *out),
            };
            for (i, d) in decisions.iter().enumerate() {
                writeln!(sink, "{}", format_decision(i, d, &model, trace)).map_err(io_err)?;
            }
            sink.flush().map_err(io_err)?;
        }
        Command::Evaluate {
            data,
            model,
            train: args,
            folds,
            missing_pct,
            out: path,
        } => {
            let (ds, format) = load_data(&data)?;
            let report = match model {
                Some(m) => {
                    let model = load_model(&m)?;
                    evaluate(&model, &remove_features(&ds, missing_pct, args.seed)?)?
                }
                None => cross_validate(&ds, &train_config(&args, &ds, format)?, folds, missing_pct)?,
            };
            print_report(&report, out).map_err(io_err)?;
            if let Some(p) = path {
                let json = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Config(e.to_string()))?;
                fs::write(&p, json).map_err(|e| HarnessError::io(&p, e))?;
            }
        }
        Command::Experiment { spec, out: path } => {
            let parsed = ExperimentSpec::load(&spec)?;
            let base = spec.parent().map(Path::to_path_buf).unwrap_or_default();
            let rows = run_experiment(&parsed, &base)?;
            write_results(&rows, create(&path)?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            writeln!(out, "wrote {} rows to {} ({failed} failed)", rows.len(), path.display()).map_err(io_err)?;
        }
        Command::OracleCheck { cases, seed } => {
            let r = oracle_check(cases, seed)?;
            writeln!(out, "cases\t{}", r.cases).map_err(io_err)?;
            writeln!(out, "max_value_deviation\t{:e}", r.max_value_gap).map_err(io_err)?;
            writeln!(out, "max_policy_deviation\t{:e}", r.max_policy_gap).map_err(io_err)?;
        }
    }
    Ok(())
}
