//! Command-line front end.
//!
//! Output schemas:
//!
//! * `infer`: one record per image with `index, stage, predicted, confidence, flops`.
//! * `sweep-eta`: `eta, accepted_frac, mean_flops, accuracy`.
//! * `bench`: `samples, total_ms, ms_per_image, mean_flops, accepted_frac`.
//! * `dump-scores`: `sample, layer, token_index, score`; `layer` is the
//!   encoder layer number or `ema` for the aggregated score.
//! * `selftest`: `check, passed, millis, detail`.
//!
//! JSON output is one object per line; CSV output has a header row.
//! Exit codes: 0 ok, 1 usage, 2 data or I/O, 3 property failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Error;
use crate::pipeline::{coarse_stage, infer_batch, sweep_eta, Model};
use crate::scoring::{accumulate, fold_order};
use crate::selftest;
use crate::synth::gen_synthetic;
use crate::tensor::Tensor;
use crate::vim::EncoderParams;
use crate::weights::{load_weights, save_weights};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "c2f", version, about = "Coarse-to-fine adaptive inference for state-space vision encoders")]
pub struct Cli {
    /// Run configuration (TOML with [model], [data] and [output] sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight file; without it weights are initialised from the model seed.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Confidence threshold override.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Refinement ratio override.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Synthetic data seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Synthetic sample count override.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Output file (stdout if absent and unset in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify every synthetic sample.
    Infer,
    /// Routing statistics over a list of thresholds.
    SweepEta {
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
        etas: Vec<f64>,
    },
    /// Wall-clock timing of batched inference.
    Bench,
    /// Per-layer and aggregated coarse-token importance of one sample.
    DumpScores {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Runs the built-in property checks.
    Selftest {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Writes seeded weights for the configured model.
    InitWeights,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
    Property(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }
}

fn io_err(path: Option<&PathBuf>, e: impl Into<io::Error>) -> CliError {
    CliError::Data(Error::Io {
        path: path.cloned().unwrap_or_else(|| PathBuf::from("<stdout>")),
        source: e.into(),
    })
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(CliError::Property(msg)) => {
            eprintln!("error: {msg}");
            EXIT_PROPERTY
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(eta) = cli.eta {
        cfg.model.eta = eta;
    }
    if let Some(alpha) = cli.alpha {
        cfg.model.alpha = alpha;
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    if let Some(n) = cli.samples {
        cfg.data.samples = n;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_model(cli: &Cli, cfg: &RunConfig) -> Result<Model, CliError> {
    let params = match &cli.weights {
        Some(path) => load_weights(path, &cfg.model)?,
        None => EncoderParams::init(&cfg.model),
    };
    Ok(Model::new(cfg.model.clone(), params)?)
}

struct Sink {
    format: Format,
    path: Option<PathBuf>,
    out: Box<dyn Write>,
    csv_header_done: bool,
}

impl Sink {
    fn open(cli: &Cli, cfg: &RunConfig, default: Format) -> Result<Self, CliError> {
        let path = cli.out.clone().or_else(|| cfg.output.path.clone());
        let out: Box<dyn Write> = match &path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(Some(p), e))?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Self {
            format: cli.format.unwrap_or(default),
            path,
            out,
            csv_header_done: false,
        })
    }

    fn emit<R: Serialize>(&mut self, rows: &[R]) -> Result<(), CliError> {
        match self.format {
            Format::Json => {
                for r in rows {
                    serde_json::to_writer(&mut self.out, r).map_err(|e| io_err(self.path.as_ref(), e))?;
                    writeln!(self.out).map_err(|e| io_err(self.path.as_ref(), e))?;
                }
            }
            Format::Csv => {
                let mut w = csv::WriterBuilder::new()
                    .has_headers(!self.csv_header_done)
                    .from_writer(&mut self.out);
                for r in rows {
                    w.serialize(r).map_err(|e| io_err(self.path.as_ref(), e))?;
                }
                w.flush().map_err(|e| io_err(self.path.as_ref(), e))?;
                self.csv_header_done |= !rows.is_empty();
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| io_err(self.path.as_ref(), e))
    }
}

#[derive(Serialize)]
struct InferRecord {
    index: usize,
    stage: &'static str,
    predicted: usize,
    confidence: f32,
    flops: u64,
}

#[derive(Serialize)]
struct BenchRecord {
    samples: usize,
    total_ms: f64,
    ms_per_image: f64,
    mean_flops: f64,
    accepted_frac: f64,
}

#[derive(Serialize)]
struct ScoreRecord {
    sample: usize,
    layer: String,
    token_index: usize,
    score: f32,
}

#[derive(Serialize)]
struct CheckRecord {
    check: &'static str,
    passed: bool,
    millis: f64,
    detail: String,
}

fn images_and_labels(cfg: &RunConfig) -> (Vec<Tensor>, Vec<usize>) {
    gen_synthetic(&cfg.model, &cfg.data).into_iter().map(|s| (s.image, s.label)).unzip()
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Command::Selftest { filter } = &cli.command {
        return cmd_selftest(cli, filter.as_deref());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Infer => {
            let model = load_model(cli, &cfg)?;
            let (images, _) = images_and_labels(&cfg);
            let outcomes = infer_batch(&images, &model, cfg.model.eta, cfg.model.alpha)?;
            let rows: Vec<InferRecord> = outcomes
                .iter()
                .enumerate()
                .map(|(index, o)| InferRecord {
                    index,
                    stage: stage_name(o.stage),
                    predicted: o.predicted,
                    confidence: o.confidence,
                    flops: o.flops_used,
                })
                .collect();
            let mut sink = Sink::open(cli, &cfg, Format::Json)?;
            sink.emit(&rows)?;
            sink.finish()
        }
        Command::SweepEta { etas } => {
            if let Some(bad) = etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
                return Err(CliError::Usage(format!("threshold {bad} outside [0, 1]")));
            }
            let model = load_model(cli, &cfg)?;
            let (images, labels) = images_and_labels(&cfg);
            let rows = sweep_eta(&images, &labels, &model, etas, cfg.model.alpha)?;
            let mut sink = Sink::open(cli, &cfg, Format::Csv)?;
            sink.emit(&rows)?;
            sink.finish()
        }
        Command::Bench => {
            let model = load_model(cli, &cfg)?;
            let (images, _) = images_and_labels(&cfg);
            let start = Instant::now();
            let outcomes = infer_batch(&images, &model, cfg.model.eta, cfg.model.alpha)?;
            let total_ms = start.elapsed().as_secs_f64() * 1e3;
            let n = images.len().max(1) as f64;
            let rows = [BenchRecord {
                samples: images.len(),
                total_ms,
                ms_per_image: total_ms / n,
                mean_flops: outcomes.iter().map(|o| o.flops_used as f64).sum::<f64>() / n,
                accepted_frac: outcomes
                    .iter()
                    .filter(|o| o.stage == crate::StageTaken::CoarseAccepted)
                    .count() as f64
                    / n,
            }];
            let mut sink = Sink::open(cli, &cfg, Format::Json)?;
            sink.emit(&rows)?;
            sink.finish()
        }
        Command::DumpScores { index } => {
            let model = load_model(cli, &cfg)?;
            let (images, _) = images_and_labels(&cfg);
            let image = images.get(*index).ok_or_else(|| {
                CliError::Usage(format!("sample {index} requested but only {} generated", images.len()))
            })?;
            let coarse = coarse_stage(image, &model)?;
            let m = &model.config;
            let state = accumulate(&coarse.activations, &fold_order(m), m.beta, m.score_direction, m.score_metric)?;
            let cls = coarse.z_c.cls_index;
            let strip = |t: &Tensor| -> Vec<f32> {
                t.data().iter().enumerate().filter(|(i, _)| *i != cls).map(|(_, &v)| v).collect()
            };
            let mut rows = Vec::new();
            for (layer, scores) in &state.per_layer {
                for (token_index, score) in strip(scores).into_iter().enumerate() {
                    rows.push(ScoreRecord {
                        sample: *index,
                        layer: layer.to_string(),
                        token_index,
                        score,
                    });
                }
            }
            for (token_index, score) in strip(&state.ema).into_iter().enumerate() {
                rows.push(ScoreRecord {
                    sample: *index,
                    layer: "ema".into(),
                    token_index,
                    score,
                });
            }
            let mut sink = Sink::open(cli, &cfg, Format::Csv)?;
            sink.emit(&rows)?;
            sink.finish()
        }
        Command::InitWeights => {
            let path = cli
                .out
                .clone()
                .or_else(|| cfg.output.path.clone())
                .ok_or_else(|| CliError::Usage("init-weights needs --out PATH".into()))?;
            save_weights(&EncoderParams::init(&cfg.model), &path)?;
            Ok(())
        }
        Command::Selftest { .. } => unreachable!(),
    }
}

fn stage_name(s: crate::StageTaken) -> &'static str {
    match s {
        crate::StageTaken::CoarseAccepted => "CoarseAccepted",
        crate::StageTaken::Refined => "Refined",
    }
}

fn cmd_selftest(cli: &Cli, filter: Option<&str>) -> Result<(), CliError> {
    let results = selftest::run(filter);
    if results.is_empty() {
        return Err(CliError::Usage(format!("no check matches {:?}", filter.unwrap_or(""))));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    match cli.format {
        Some(format) => {
            let rows: Vec<CheckRecord> = results
                .iter()
                .map(|r| CheckRecord {
                    check: r.name,
                    passed: r.passed,
                    millis: r.millis,
                    detail: r.detail.clone(),
                })
                .collect();
            let cfg = RunConfig::default();
            let mut sink = Sink::open(cli, &cfg, format)?;
            sink.emit(&rows)?;
            sink.finish()?;
        }
        None => {
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                if r.detail.is_empty() {
                    println!("{status} {:<32} {:>9.1} ms", r.name, r.millis);
                } else {
                    println!("{status} {:<32} {:>9.1} ms  {}", r.name, r.millis, r.detail);
                }
            }
            println!("{} of {} checks passed", results.len() - failed, results.len());
        }
    }
    if failed > 0 {
        return Err(CliError::Property(format!("{failed} check(s) failed")));
    }
    Ok(())
}
