use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use effconf_core::encoder::{DownsampleMethod, EncoderConfig};
use effconf_core::profiler::count_madds;
use effconf_core::toy::{train, ToyTask, TrainConfig};
use effconf_cli::bench::{bench, DEFAULT_REPS};
use effconf_cli::config::{load_config, parse_list, parse_windows, Overrides};
use effconf_cli::report::{write_rows, CheckRow, Format, MAddsRow, TrainRow};
use effconf_cli::suites::{equiv_suite, gradcheck_suite};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "effconf", version, about = "Efficient Conformer profiler, checks and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic MAdds and parameter counts per (config, frames).
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated input lengths.
        #[arg(long, default_value = "1000")]
        frames: String,
        /// Also profile this preset and print total ratios.
        #[arg(long)]
        compare: Option<String>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Identity-collapse, oracle and skew equivalence suites.
    Equiv {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random layouts per suite.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Forward wall-clock time per length.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "512,1024,2048")]
        frames: String,
        #[arg(long, default_value_t = DEFAULT_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Trains the miniature encoder on the synthetic CTC task.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        /// Stop once held-out accuracy reaches this; failing to reach it exits 1.
        #[arg(long, default_value_t = 0.95)]
        target_accuracy: f64,
        /// Run all steps even after the target is reached.
        #[arg(long)]
        no_early_stop: bool,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    preset: Option<String>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-stage group sizes, e.g. 3,1,1.
    #[arg(long)]
    group_sizes: Option<String>,
    /// Per-stage local windows, `-` for full attention, e.g. 175,-,-.
    #[arg(long)]
    windows: Option<String>,
    /// Linear attention in every stage.
    #[arg(long)]
    linear: bool,
    /// Downsampling method of strided blocks.
    #[arg(long, value_parser = ["conv", "attention"])]
    downsample: Option<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

/// Bad flags or config: exit code 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| Usage(e).into())
}

impl ModelArgs {
    fn resolve(&self) -> Result<(String, EncoderConfig)> {
        usage(self.resolve_inner())
    }

    fn resolve_inner(&self) -> Result<(String, EncoderConfig)> {
        let (name, base) = match (&self.preset, &self.config) {
            (Some(p), None) => (p.clone(), EncoderConfig::preset(p)?),
            (None, Some(path)) => (
                path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned()),
                load_config(path)?,
            ),
            _ => bail!("give exactly one of --preset or --config"),
        };
        let overrides = Overrides {
            group_sizes: self.group_sizes.as_deref().map(parse_list).transpose()?,
            windows: self.windows.as_deref().map(parse_windows).transpose()?,
            linear: self.linear,
            downsample: self.downsample.as_deref().map(|m| match m {
                "attention" => DownsampleMethod::Attention,
                _ => DownsampleMethod::Conv,
            }),
        };
        let config = overrides.apply(base)?;
        Ok((format!("{name}{}", overrides.label()), config))
    }
}

impl OutputArgs {
    fn emit<T: Serialize>(&self, rows: &[T]) -> Result<()> {
        match &self.out {
            Some(path) => {
                let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                write_rows(rows, self.format, BufWriter::new(f))
            }
            None => write_rows(rows, self.format, io::stdout().lock()),
        }
    }
}

fn frames(s: &str) -> Result<Vec<usize>> {
    let v = usage(parse_list(s))?;
    if v.is_empty() || v.contains(&0) {
        return Err(Usage(anyhow::anyhow!("--frames needs positive lengths")).into());
    }
    Ok(v)
}

fn report_checks(rows: &[CheckRow]) -> bool {
    let mut err = io::stderr().lock();
    for r in rows {
        let status = if r.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            err,
            "{status} {:<40} cases={:<6} max_err={:.3e} tol={:.0e}",
            r.check, r.cases, r.max_err, r.tolerance
        );
    }
    rows.iter().all(|r| r.pass)
}

/// `Ok(false)` means a check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Profile {
            model,
            frames: f,
            compare,
            out,
        } => {
            let (name, config) = model.resolve()?;
            let lengths = frames(&f)?;
            let other = compare
                .map(|p| usage(EncoderConfig::preset(&p).map_err(Into::into)).map(|c| (p, c)))
                .transpose()?;
            let mut reports = Vec::new();
            for &n in &lengths {
                let r = count_madds(&config, &name, n)?;
                if let Some((oname, oconfig)) = &other {
                    let o = count_madds(oconfig, oname, n)?;
                    eprintln!(
                        "frames={n}: {name} / {oname} total MAdds ratio = {:.3}",
                        r.total as f64 / o.total as f64
                    );
                    reports.push(r);
                    reports.push(o);
                } else {
                    reports.push(r);
                }
            }
            match out.format {
                Format::Json => out.emit(&reports)?,
                Format::Csv => out.emit(&reports.iter().map(MAddsRow::from).collect::<Vec<_>>())?,
            }
            Ok(true)
        }
        Command::Equiv { seed, trials, out } => {
            let rows = equiv_suite(seed, trials)?;
            out.emit(&rows)?;
            Ok(report_checks(&rows))
        }
        Command::Gradcheck { seed, out } => {
            let rows = gradcheck_suite(seed)?;
            out.emit(&rows)?;
            Ok(report_checks(&rows))
        }
        Command::Bench {
            model,
            frames: f,
            reps,
            seed,
            out,
        } => {
            let (name, config) = model.resolve()?;
            let lengths = frames(&f)?;
            let rows = bench(&config, &name, &lengths, reps, seed, |r| {
                eprintln!(
                    "{} frames={} median={:.1}ms p10={:.1}ms p90={:.1}ms",
                    r.preset, r.frames, r.median_ms, r.p10_ms, r.p90_ms
                )
            })?;
            out.emit(&rows)?;
            Ok(true)
        }
        Command::TrainToy {
            steps,
            seed,
            vocab,
            target_accuracy,
            no_early_stop,
            out,
        } => {
            let task = ToyTask::with_vocab(vocab, seed);
            usage(task.validate().map_err(Into::into))?;
            let tc = TrainConfig {
                steps,
                seed,
                target_accuracy: (!no_early_stop).then_some(target_accuracy),
                ..TrainConfig::default()
            };
            let outcome = train(&task, &task.model_config(), &tc, |r| match r.loss {
                Some(l) => eprintln!("step {:>5} loss {l:.4} accuracy {:.3}", r.step, r.accuracy),
                None => eprintln!("step {:>5} accuracy {:.3}", r.step, r.accuracy),
            })?;
            let rows: Vec<TrainRow> = outcome.log.iter().map(TrainRow::from).collect();
            out.emit(&rows)?;
            let reached = outcome.accuracy >= target_accuracy;
            eprintln!(
                "{} after {} steps: accuracy {:.3} (target {target_accuracy})",
                if reached { "reached" } else { "missed target" },
                outcome.steps,
                outcome.accuracy
            );
            Ok(reached || steps == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
