//! `shadowopt`: command-line driver for every workflow step.
//!
//! Commands operate on a data directory through the same operations the
//! HTTP service uses. Results go to stdout as JSON, progress to stderr.
//! Exit codes: 0 success, 1 usage or validation error, 2 internal error.

use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use shadowopt_core::model::write_jsonl;
use shadowopt_core::quality::QualityThresholds;
use shadowopt_core::sim::{batch_execute, ParamRanges, Sampling, SimConfig};
use shadowopt_service::demo::{run_demo, DemoProgress};
use shadowopt_service::dto::*;
use shadowopt_service::{ApiError, App};

#[derive(Parser)]
#[command(name = "shadowopt", version, about = "Surrogate-based robot program parameter optimization")]
struct Cli {
    /// Data directory shared with `serve`.
    #[arg(long, global = true, env = "SHADOWOPT_DATA_DIR", default_value = "shadowopt-data")]
    data_dir: PathBuf,
    /// Indent JSON output.
    #[arg(long, global = true)]
    pretty: bool,
    /// JSON file with the request body; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, global = true, env = "SHADOWOPT_MIN_COVERAGE")]
    min_coverage: Option<f64>,
    #[arg(long, global = true, env = "SHADOWOPT_MIN_DISTINCT")]
    min_distinct: Option<usize>,
    #[arg(long, global = true, env = "SHADOWOPT_MAX_OUTLIER_FRACTION")]
    max_outlier_fraction: Option<f64>,
}

impl ThresholdArgs {
    fn resolve(&self) -> QualityThresholds {
        let d = QualityThresholds::default();
        QualityThresholds {
            min_coverage: self.min_coverage.unwrap_or(d.min_coverage),
            min_distinct: self.min_distinct.unwrap_or(d.min_distinct),
            max_outlier_fraction: self.max_outlier_fraction.unwrap_or(d.max_outlier_fraction),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the workcell simulator and write executions as JSON lines.
    Simulate(SimulateArgs),
    /// Append executions from a JSON-lines file to the data directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Build a dataset from the ingested executions.
    Dataset(DatasetArgs),
    /// Train a shadow model on a dataset.
    Train(TrainArgs),
    /// Show the training verdict and loss curves of a model.
    Diagnose {
        #[arg(long)]
        model: String,
    },
    /// Relevance of every parameter for the model heads.
    Lrp(LrpArgs),
    /// Optimize program parameters through a trained model.
    Optimize(OptimizeArgs),
    /// Predict and score one parameter vector.
    Whatif(WhatIfArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "SHADOWOPT_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Run the scripted gearbox workflow end to end.
    Demo {
        #[arg(long, default_value_t = shadowopt_core::scenario::DEMO_SEED)]
        seed: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    noise_amp: Option<f64>,
    #[arg(long)]
    hole_offset_sigma: Option<f64>,
    /// Evenly spaced levels per parameter instead of uniform sampling.
    #[arg(long)]
    grid_levels: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    program: Option<String>,
    #[arg(long)]
    pad_length: Option<usize>,
    /// Tag filter `key=value`; repeatable.
    #[arg(long = "tag", value_parser = key_value)]
    tags: Vec<(String, String)>,
    /// RFC 3339 lower time bound.
    #[arg(long)]
    from: Option<String>,
    #[arg(long)]
    to: Option<String>,
    /// Accept a dataset that fails the quality checks.
    #[arg(long = "override")]
    override_quality: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    name: Option<String>,
    /// scratch, as_is or finetune.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden_layers: Option<Vec<usize>>,
}

#[derive(Args)]
struct LrpArgs {
    #[arg(long)]
    model: String,
    /// peak_force, cycle_time or success_logit; repeatable.
    #[arg(long = "head")]
    heads: Vec<String>,
    /// Probe as a JSON object; the dataset mean when absent.
    #[arg(long)]
    x: Option<String>,
}

#[derive(Args)]
struct ObjectiveArgs {
    /// Enabled objectives, comma-separated: cycle_time, path_length,
    /// success, force_threshold.
    #[arg(long, value_delimiter = ',')]
    objectives: Option<Vec<String>>,
    /// Objective weight `name=value`; repeatable.
    #[arg(long = "weight", value_parser = key_value)]
    weights: Vec<(String, String)>,
    #[arg(long)]
    f_max: Option<f64>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    id: Option<String>,
    /// Start as a JSON object; the dataset mean when absent.
    #[arg(long)]
    x_init: Option<String>,
    #[command(flatten)]
    objective: ObjectiveArgs,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct WhatIfArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    x: Option<String>,
    #[command(flatten)]
    objective: ObjectiveArgs,
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

enum Failure {
    Usage(String),
    Api(ApiError),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure::Api(e)
    }
}

impl From<shadowopt_core::CoreError> for Failure {
    fn from(e: shadowopt_core::CoreError) -> Self {
        Failure::Api(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Api(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

/// Request body assembled from `--config` and then the flags.
struct Body(Map<String, Value>);

impl Body {
    fn load(config: &Option<PathBuf>) -> CliResult<Body> {
        let Some(path) = config else { return Ok(Body(Map::new())) };
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(Body(m)),
            Ok(_) => Err(Failure::Usage(format!("--config {}: expected a JSON object", path.display()))),
            Err(e) => Err(Failure::Usage(format!("--config {}: {e}", path.display()))),
        }
    }

    /// Sets a dotted path when the flag was given.
    fn set(&mut self, path: &str, value: Option<Value>) {
        let Some(value) = value else { return };
        let mut keys: Vec<&str> = path.split('.').collect();
        let last = keys.pop().expect("non-empty path");
        let mut node = &mut self.0;
        for k in keys {
            let entry = node.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().unwrap();
        }
        node.insert(last.to_string(), value);
    }

    fn parse<T: DeserializeOwned>(self) -> CliResult<T> {
        Ok(parse_strict(Value::Object(self.0))?)
    }
}

fn json_arg(flag: &str, text: &Option<String>) -> CliResult<Option<Value>> {
    text.as_ref()
        .map(|t| serde_json::from_str(t).map_err(|e| Failure::Usage(format!("{flag}: invalid JSON: {e}"))))
        .transpose()
}

fn objective_body(body: &mut Body, o: &ObjectiveArgs) -> CliResult<()> {
    const TERMS: [&str; 4] = ["cycle_time", "path_length", "success", "force_threshold"];
    if let Some(enabled) = &o.objectives {
        if let Some(bad) = enabled.iter().find(|t| !TERMS.contains(&t.as_str())) {
            return Err(Failure::Usage(format!("--objectives: unknown objective `{bad}`")));
        }
        for t in TERMS {
            body.set(&format!("spec.{t}.enabled"), Some(json!(enabled.iter().any(|e| e == t))));
        }
    }
    for (k, v) in &o.weights {
        if !TERMS.contains(&k.as_str()) {
            return Err(Failure::Usage(format!("--weight: unknown objective `{k}`")));
        }
        let w: f64 = v.parse().map_err(|_| Failure::Usage(format!("--weight {k}: `{v}` is not a number")))?;
        body.set(&format!("spec.{k}.weight"), Some(json!(w)));
    }
    body.set("spec.force_threshold.f_max", o.f_max.map(|f| json!(f)));
    Ok(())
}

struct Stderr;

impl DemoProgress for Stderr {
    fn step(&mut self, message: &str) {
        eprintln!("demo: {message}");
    }

    fn epoch(&mut self, epoch: usize, epochs: usize, train_loss: f64, val_loss: f64) {
        if epoch % 20 == 0 || epoch == epochs {
            eprintln!("  epoch {epoch}/{epochs}  train {train_loss:.4}  val {val_loss:.4}");
        }
    }
}

fn epoch_progress(p: &shadowopt_core::net::EpochProgress) -> ControlFlow<()> {
    if p.epoch % 20 == 0 || p.epoch == p.epochs {
        eprintln!("epoch {}/{}  train {:.4}  val {:.4}", p.epoch, p.epochs, p.train_loss, p.val_loss);
    }
    ControlFlow::Continue(())
}

fn open(cli: &Cli) -> CliResult<App> {
    Ok(App::open(&cli.data_dir, cli.thresholds.resolve())?)
}

fn simulate(args: &SimulateArgs, config_path: &Option<PathBuf>) -> CliResult<Option<Value>> {
    let mut body = Body::load(config_path)?;
    body.set("dt", args.dt.map(|v| json!(v)));
    body.set("noise_amp", args.noise_amp.map(|v| json!(v)));
    body.set("hole_offset_sigma", args.hole_offset_sigma.map(|v| json!(v)));
    let config: SimConfig = body.parse()?;
    let sampling = match args.grid_levels {
        Some(k) => Sampling::Grid {
            levels: shadowopt_core::sim::gearbox_template().parameter_names().into_iter().map(|n| (n, k)).collect(),
        },
        None => Sampling::UniformRandom,
    };
    let records = batch_execute(args.n, &sampling, &ParamRanges::full(), &config, args.seed)?;
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            write_jsonl(&mut w, &records)?;
            w.flush()?;
            Ok(Some(json!({"written": records.len(), "out": path.display().to_string()})))
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_jsonl(&mut w, &records)?;
            w.flush()?;
            Ok(None)
        }
    }
}

fn run(cli: Cli) -> CliResult<Option<Value>> {
    match &cli.command {
        Command::Simulate(args) => simulate(args, &cli.config),
        Command::Ingest { input } => {
            let text = fs::read_to_string(input).map_err(|e| Failure::Usage(format!("--input {}: {e}", input.display())))?;
            to(&open(&cli)?.ingest_text(&text)?)
        }
        Command::Dataset(a) => {
            let mut body = Body::load(&cli.config)?;
            body.set("name", a.name.as_ref().map(|v| json!(v)));
            body.set("id", a.id.as_ref().map(|v| json!(v)));
            body.set("program_id", a.program.as_ref().map(|v| json!(v)));
            body.set("pad_length", a.pad_length.map(|v| json!(v)));
            body.set("filter.time_from", a.from.as_ref().map(|v| json!(v)));
            body.set("filter.time_to", a.to.as_ref().map(|v| json!(v)));
            for (k, v) in &a.tags {
                body.set(&format!("filter.tag_equals.{k}"), Some(json!(v)));
            }
            if a.override_quality {
                body.set("override", Some(json!(true)));
            }
            let req: CreateDataset = body.parse()?;
            to(&open(&cli)?.create_dataset(req)?)
        }
        Command::Train(a) => {
            let mut body = Body::load(&cli.config)?;
            body.set("dataset_id", a.dataset.as_ref().map(|v| json!(v)));
            body.set("id", a.id.as_ref().map(|v| json!(v)));
            body.set("name", a.name.as_ref().map(|v| json!(v)));
            body.set("init.kind", a.init.as_ref().map(|v| json!(v)));
            body.set("init.base_id", a.base.as_ref().map(|v| json!(v)));
            body.set("hyperparams.epochs", a.epochs.map(|v| json!(v)));
            body.set("hyperparams.learning_rate", a.learning_rate.map(|v| json!(v)));
            body.set("hyperparams.batch_size", a.batch_size.map(|v| json!(v)));
            body.set("hyperparams.val_fraction", a.val_fraction.map(|v| json!(v)));
            body.set("hyperparams.dropout_rate", a.dropout_rate.map(|v| json!(v)));
            body.set("hyperparams.weight_decay", a.weight_decay.map(|v| json!(v)));
            body.set("hyperparams.seed", a.seed.map(|v| json!(v)));
            body.set("hyperparams.hidden_layers", a.hidden_layers.as_ref().map(|v| json!(v)));
            let req: TrainRequest = body.parse()?;
            let doc = open(&cli)?.train_blocking(req, epoch_progress)?;
            to(&json!({"model": ModelSummary::of(&doc), "verdict": doc.verdict}))
        }
        Command::Diagnose { model } => to(&open(&cli)?.diagnostics(model)?),
        Command::Lrp(a) => {
            let mut body = Body::load(&cli.config)?;
            body.set("x", json_arg("--x", &a.x)?);
            if !a.heads.is_empty() {
                body.set("heads", Some(json!(a.heads)));
            }
            let req: LrpRequest = body.parse()?;
            to(&open(&cli)?.lrp(&a.model, req)?)
        }
        Command::Optimize(a) => {
            let mut body = Body::load(&cli.config)?;
            body.set("model_id", a.model.as_ref().map(|v| json!(v)));
            body.set("id", a.id.as_ref().map(|v| json!(v)));
            body.set("x_init", json_arg("--x-init", &a.x_init)?);
            objective_body(&mut body, &a.objective)?;
            body.set("hyperparams.step_size", a.step_size.map(|v| json!(v)));
            body.set("hyperparams.iterations", a.iterations.map(|v| json!(v)));
            body.set("hyperparams.seed", a.seed.map(|v| json!(v)));
            let req: OptimizeRequest = body.parse()?;
            to(&open(&cli)?.optimize_blocking(req, |_| ControlFlow::Continue(()))?)
        }
        Command::Whatif(a) => {
            let mut body = Body::load(&cli.config)?;
            body.set("model_id", a.model.as_ref().map(|v| json!(v)));
            body.set("x", json_arg("--x", &a.x)?);
            objective_body(&mut body, &a.objective)?;
            let req: WhatIfRequest = body.parse()?;
            to(&open(&cli)?.what_if(req)?)
        }
        Command::Serve { listen } => {
            let app = Arc::new(open(&cli)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(shadowopt_service::http::serve(app, *listen, |addr| {
                eprintln!("listening on http://{addr}");
            }))?;
            Ok(None)
        }
        Command::Demo { seed } => to(&run_demo(&open(&cli)?, *seed, &mut Stderr)?),
    }
}

fn to<T: Serialize>(value: &T) -> CliResult<Option<Value>> {
    Ok(Some(serde_json::to_value(value).expect("documents serialize")))
}

fn print(value: &Value, pretty: bool) {
    let text = if pretty { serde_json::to_string_pretty(value) } else { serde_json::to_string(value) };
    let _ = writeln!(std::io::stdout().lock(), "{}", text.expect("values serialize"));
}

fn exit_for(e: &ApiError) -> ExitCode {
    if e.is_client_error() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pretty = cli.pretty;
    match run(cli) {
        Ok(Some(v)) => {
            print(&v, pretty);
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Api(e)) => {
            print(&serde_json::to_value(&e.body).expect("error bodies serialize"), pretty);
            eprintln!("error: {}", e.body.message);
            exit_for(&e)
        }
    }
}
