//! Command-line front end.
//!
//! Exit codes: 0 success, 1 an input string failed (invalid, or not
//! derivable within the model's length), 2 usage error, 3 internal error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::bo::{
    bo_loop, fit_gp, test_metrics, train_test_split, BoConfig, BoState, DecoderObjective, GpConfig,
};
use crate::grammar::{parse, tree_to_rules, Grammar};
use crate::latent::{
    format_interpolation, grid_csv, interpolate, interpolation_csv, latent_property_scatter,
    mean_encoding, neighborhood_grid, prior_validity, reconstruction_accuracy, stream_rng,
    DecodeMode,
};
use crate::sampler::{argmax_sequence, sample_sequence, DecodeStatus, Decoded};
use crate::tasks::{expression_score, external_score, gen_expressions, ScoreDataset};
use crate::vae::{
    load_checkpoint, onehot_for, save_checkpoint, train, Checkpoint, TrainConfig, TrainError,
    TrainState, VaeConfig, VaeError, VaeModel,
};

/// Directory searched for `<name>.cfg` grammar files.
pub const GRAMMAR_DIR_ENV: &str = "GVAE_GRAMMAR_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Parse(_) | VaeError::Derivation(_) => CliError::Domain(e.to_string()),
            VaeError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<crate::latent::LatentError> for CliError {
    fn from(e: crate::latent::LatentError) -> Self {
        use crate::latent::LatentError as L;
        match e {
            L::Vae(v) => v.into(),
            L::EvenGrid(_) | L::LengthMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "gvae", version, about = "VAE toolkit over grammar derivations")]
pub struct Cli {
    /// Worker threads; 1 is fully sequential. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Grammar: a file path, or a name looked up in $GVAE_GRAMMAR_DIR and
    /// then among the bundled grammars (`equation`, `smiles`).
    #[arg(long, global = true, default_value = "equation")]
    pub grammar: String,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse strings and print their rule sequences as JSON lines.
    Parse(ParseArgs),
    /// Generate random strings from the grammar.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Decode draws from the prior.
    Sample(SampleArgs),
    /// Encode and decode strings.
    Reconstruct(ReconstructArgs),
    /// Decode along the segment between two encodings.
    Interpolate(InterpolateArgs),
    /// Decode a 2-D grid around an encoding.
    Grid(GridArgs),
    /// Reconstruction accuracy over a dataset.
    ReconAcc(ReconAccArgs),
    /// Fraction of valid decodes from prior draws.
    PriorValid(PriorValidArgs),
    /// Mean encodings with a property, as CSV.
    Scatter(ScatterArgs),
    /// Bayesian optimization in latent space.
    Bo(BoArgs),
    /// Held-out GP metrics on latent encodings.
    GpMetrics(GpMetricsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Argmax,
    Sample,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Argmax => DecodeMode::Argmax,
            ModeArg::Sample => DecodeMode::Sample,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    /// Log(1 + MSE) against the reference expression; lower is better.
    Expr,
    /// External scorer command; higher is better.
    External,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    pub strings: Vec<String>,
    /// File with one string per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Longest derivation, in rules.
    #[arg(long, default_value_t = 15)]
    pub max_rules: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training strings, one per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    pub model: PathBuf,
    /// File of key=value settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value settings, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint written after every epoch [default: <model>.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch loss CSV [default: <model>.loss.csv].
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub model: ModelArg,
    pub strings: Vec<String>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub string: String,
    /// Half-width of the grid along each direction.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Cells per side; must be odd.
    #[arg(long, default_value_t = 7)]
    pub grid_n: usize,
    #[arg(long, default_value_t = 50)]
    pub decodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconAccArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N strings.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub n_encode: usize,
    #[arg(long, default_value_t = 100)]
    pub n_decode: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PriorValidArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 100)]
    pub decodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PropertyArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Expr)]
    pub task: TaskArg,
    /// Scorer command for `--task external`; reads a string on stdin.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Scorer timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    /// Precomputed properties, one number per line, aligned with the data.
    #[arg(long)]
    pub properties: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScatterArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub property: PropertyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Initial strings, one per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N strings as initial data.
    #[arg(long)]
    pub init: Option<usize>,
    #[command(flatten)]
    pub property: PropertyArgs,
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    #[arg(long, default_value_t = 50)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
    pub mode: ModeArg,
    /// Optimizer steps per hyperparameter restart.
    #[arg(long, default_value_t = 100)]
    pub gp_iterations: usize,
    /// Exact GP up to this many points, sparse above.
    #[arg(long, default_value_t = 2000)]
    pub exact_threshold: usize,
    #[arg(long, default_value_t = 500)]
    pub inducing: usize,
    /// Per-evaluation CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Number of best proposals to print.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct GpMetricsArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub property: PropertyArgs,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub gp_iterations: usize,
    #[arg(long, default_value_t = 2000)]
    pub exact_threshold: usize,
    #[arg(long, default_value_t = 500)]
    pub inducing: usize,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let go = || {
        let mut out = BufWriter::new(io::stdout().lock());
        let r = execute(&cli, &mut out);
        let _ = out.flush();
        r
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(go),
            Err(e) => Err(CliError::Internal(e.to_string())),
        },
        None => go(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolves `--grammar`: file path, then `$GVAE_GRAMMAR_DIR/<name>.cfg`,
/// then a bundled grammar. Returns the grammar and its short name.
pub fn load_grammar(spec: &str) -> Result<(Grammar, String), CliError> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let from_text = |text: &str, name: String| {
        Grammar::load(text)
            .map(|g| (g, name))
            .map_err(|e| CliError::Usage(format!("grammar `{spec}`: {e}")))
    };
    let path = Path::new(spec);
    if path.is_file() {
        return from_text(&read_file(path)?, stem(path));
    }
    if let Ok(dir) = std::env::var(GRAMMAR_DIR_ENV) {
        let p = Path::new(&dir).join(format!("{spec}.cfg"));
        if p.is_file() {
            return from_text(&read_file(&p)?, spec.to_string());
        }
    }
    match Grammar::bundled_source(spec) {
        Some(text) => from_text(text, spec.to_string()),
        None => Err(CliError::Usage(format!("unknown grammar `{spec}`"))),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_file(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn load_model(arg: &ModelArg, g: &Grammar) -> Result<VaeModel, CliError> {
    let m = VaeModel::load(&arg.model)
        .map_err(|e| CliError::Usage(format!("{}: {e}", arg.model.display())))?;
    if m.config().k != g.num_rules() {
        return Err(CliError::Usage(format!(
            "model expects {} rules but the grammar has {}",
            m.config().k,
            g.num_rules()
        )));
    }
    Ok(m)
}

fn status_name(s: DecodeStatus) -> &'static str {
    match s {
        DecodeStatus::Running => "running",
        DecodeStatus::Complete => "complete",
        DecodeStatus::Exhausted => "exhausted",
    }
}

fn write_json(out: &mut dyn Write, v: serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{v}")?;
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let (g, name) = load_grammar(&cli.grammar)?;
    match &cli.command {
        Command::Parse(a) => cmd_parse(a, &g, out),
        Command::GenData(a) => cmd_gen_data(a, &g, out),
        Command::Train(a) => cmd_train(a, &g, &name),
        Command::Sample(a) => cmd_sample(a, &g, out),
        Command::Reconstruct(a) => cmd_reconstruct(a, &g, out),
        Command::Interpolate(a) => cmd_interpolate(a, &g, out),
        Command::Grid(a) => cmd_grid(a, &g, out),
        Command::ReconAcc(a) => cmd_recon_acc(a, &g, out),
        Command::PriorValid(a) => cmd_prior_valid(a, &g, out),
        Command::Scatter(a) => cmd_scatter(a, &g, out),
        Command::Bo(a) => cmd_bo(a, &g, out),
        Command::GpMetrics(a) => cmd_gp_metrics(a, &g, out),
    }
}

fn gather_strings(strings: &[String], input: &Option<PathBuf>) -> Result<Vec<String>, CliError> {
    let mut all = strings.to_vec();
    if let Some(p) = input {
        all.extend(read_lines(p)?);
    }
    Ok(all)
}

fn cmd_parse(a: &ParseArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut code = 0;
    for s in gather_strings(&a.strings, &a.input)? {
        match parse(&s, g) {
            Ok(tree) => write_json(
                out,
                json!({"input": s, "valid": true, "rules": tree_to_rules(&tree).0}),
            )?,
            Err(e) => {
                code = 1;
                write_json(
                    out,
                    json!({"input": s, "valid": false, "error": e.to_string()}),
                )?;
            }
        }
    }
    Ok(code)
}

fn cmd_gen_data(a: &GenDataArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    if a.max_rules < 2 {
        return Err(CliError::Usage("--max-rules must be at least 2".into()));
    }
    let strings = gen_expressions(a.n, a.max_rules, g, &mut stream_rng(a.seed, 0));
    let mut file;
    let w: &mut dyn Write = match &a.out {
        Some(p) => {
            file = create_file(p)?;
            &mut file
        }
        None => out,
    };
    for s in strings {
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(0)
}

fn with_extension(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write_loss_csv(path: &Path, state: &TrainState) -> Result<(), CliError> {
    let mut w = create_file(path)?;
    writeln!(w, "epoch,mean_elbo,mean_recon,mean_kl")?;
    for e in &state.history {
        writeln!(
            w,
            "{},{},{},{}",
            e.epoch, e.mean_elbo, e.mean_recon, e.mean_kl
        )?;
    }
    w.flush()?;
    Ok(())
}

fn apply_settings(
    a: &TrainArgs,
    train_cfg: &mut TrainConfig,
    model_cfg: &mut VaeConfig,
) -> Result<(), CliError> {
    let usage = |e: crate::vae::ConfigError| CliError::Usage(e.to_string());
    if let Some(p) = &a.config {
        train_cfg
            .apply_kv(model_cfg, &read_file(p)?)
            .map_err(usage)?;
    }
    for kv in &a.set {
        train_cfg.apply_kv(model_cfg, kv).map_err(usage)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, g: &Grammar, grammar_name: &str) -> Result<i32, CliError> {
    let (state, cfg) = match &a.resume {
        Some(p) => {
            let c =
                load_checkpoint(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let mut cfg = c.train;
            let mut arch = c.state.model.config().clone();
            apply_settings(a, &mut cfg, &mut arch)?;
            if &arch != c.state.model.config() {
                return Err(CliError::Usage(
                    "model settings cannot change when resuming".into(),
                ));
            }
            (c.state, cfg)
        }
        None => {
            let mut cfg = TrainConfig::default();
            let mut model_cfg = if grammar_name == "smiles" {
                VaeConfig::smiles(g)
            } else {
                VaeConfig::equations(g)
            };
            apply_settings(a, &mut cfg, &mut model_cfg)?;
            model_cfg.validate()?;
            let model = VaeModel::new(model_cfg, &mut stream_rng(cfg.seed, u64::MAX))?;
            (TrainState::new(model), cfg)
        }
    };
    let t_max = state.model.config().t_max;
    let strings = read_lines(&a.data)?;
    let data = strings
        .par_iter()
        .map(|s| onehot_for(s, g, t_max).map_err(|e| CliError::Domain(format!("`{s}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let ckpt_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| with_extension(&a.model, ".ckpt"));
    let loss_path = a
        .loss
        .clone()
        .unwrap_or_else(|| with_extension(&a.model, ".loss.csv"));
    let mut save_error = None;
    let result = train(state, &data, &cfg, g, |s| {
        let ck = Checkpoint {
            state: s.clone(),
            train: cfg.clone(),
        };
        if let Err(e) = save_checkpoint(&ckpt_path, &ck) {
            save_error = Some(e);
        }
    });
    if let Some(e) = save_error {
        return Err(CliError::Internal(format!("checkpoint: {e}")));
    }
    match result {
        Ok(state) => {
            state.model.save(&a.model)?;
            write_loss_csv(&loss_path, &state)?;
            Ok(0)
        }
        Err(TrainError::NonFinite { epoch, last_good }) => {
            write_loss_csv(&loss_path, &last_good)?;
            let ck = Checkpoint {
                state: *last_good,
                train: cfg.clone(),
            };
            save_checkpoint(&ckpt_path, &ck)?;
            Err(CliError::Internal(format!(
                "non-finite loss in epoch {epoch}; last good state saved to {}",
                ckpt_path.display()
            )))
        }
        Err(TrainError::Vae(e)) => Err(e.into()),
    }
}

fn decode_json(index: usize, d: &Decoded, g: &Grammar) -> serde_json::Value {
    json!({"index": index, "text": d.text(g), "status": status_name(d.status)})
}

fn cmd_sample(a: &SampleArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let z_dim = model.config().z_dim;
    let decoded = (0..a.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(a.seed, i as u64);
            let z: Vec<f64> = (0..z_dim).map(|_| rng.sample(StandardNormal)).collect();
            let f = model.decode_logits(&z)?;
            let d = match a.mode {
                ModeArg::Argmax => argmax_sequence(&f, g),
                ModeArg::Sample => sample_sequence(&f, g, &mut rng),
            };
            d.map_err(|e| CliError::Internal(e.to_string()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for (i, d) in decoded.iter().enumerate() {
        write_json(out, decode_json(i, d, g))?;
    }
    Ok(0)
}

fn cmd_reconstruct(a: &ReconstructArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let mut code = 0;
    for (i, s) in gather_strings(&a.strings, &a.input)?
        .into_iter()
        .enumerate()
    {
        let z = match mean_encoding(&s, &model, g) {
            Ok(z) => z,
            Err(e) => {
                code = 1;
                write_json(out, json!({"input": s, "error": e.to_string()}))?;
                continue;
            }
        };
        let f = model.decode_logits(&z)?;
        let d = match a.mode {
            ModeArg::Argmax => argmax_sequence(&f, g),
            ModeArg::Sample => sample_sequence(&f, g, &mut stream_rng(a.seed, i as u64)),
        }
        .map_err(|e| CliError::Internal(e.to_string()))?;
        let text = d.text(g);
        let exact = text.as_deref() == Some(s.as_str());
        write_json(
            out,
            json!({"input": s, "output": text, "status": status_name(d.status), "exact": exact}),
        )?;
    }
    Ok(code)
}

fn cmd_interpolate(a: &InterpolateArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let r = interpolate(&a.from, &a.to, a.steps, &model, g, a.mode.into(), a.seed)?;
    write!(out, "{}", format_interpolation(&r))?;
    if let Some(p) = &a.csv {
        let mut w = create_file(p)?;
        interpolation_csv(&r, &mut w)?;
        w.flush()?;
    }
    Ok(0)
}

fn cmd_grid(a: &GridArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let r = neighborhood_grid(&a.string, a.radius, a.grid_n, a.decodes, &model, g, a.seed)?;
    match &a.out {
        Some(p) => {
            let mut w = create_file(p)?;
            grid_csv(&r, &mut w)?;
            w.flush()?;
        }
        None => grid_csv(&r, &mut &mut *out)?,
    }
    Ok(0)
}

fn cmd_recon_acc(a: &ReconAccArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let mut data = read_lines(&a.data)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    let r = reconstruction_accuracy(
        &data,
        a.n_encode,
        a.n_decode,
        &model,
        g,
        a.mode.into(),
        a.seed,
    )?;
    write_json(out, json!({"accuracy": r.accuracy, "strings": data.len()}))?;
    Ok(0)
}

fn cmd_prior_valid(a: &PriorValidArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let r = prior_validity(a.points, a.decodes, &model, g, a.seed)?;
    write_json(
        out,
        serde_json::to_value(&r).map_err(|e| CliError::Internal(e.to_string()))?,
    )?;
    Ok(0)
}

type Scorer<'a> = Box<dyn Fn(&str) -> Option<f64> + Sync + 'a>;

/// A scoring function for the chosen task, and whether larger is better.
fn scorer<'a>(p: &PropertyArgs, g: &'a Grammar) -> Result<(Scorer<'a>, bool), CliError> {
    match p.task {
        TaskArg::Expr => {
            let d = ScoreDataset::standard();
            Ok((Box::new(move |s: &str| expression_score(s, &d, g)), false))
        }
        TaskArg::External => {
            let cmd = p
                .scorer
                .clone()
                .ok_or_else(|| CliError::Usage("--task external needs --scorer".into()))?;
            if !(p.timeout > 0.0 && p.timeout.is_finite()) {
                return Err(CliError::Usage("--timeout must be positive".into()));
            }
            let timeout = Duration::from_secs_f64(p.timeout);
            Ok((
                Box::new(move |s: &str| match external_score(s, &cmd, timeout) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        warn!("scorer failed on `{s}`: {e}");
                        None
                    }
                }),
                true,
            ))
        }
    }
}

fn properties(
    p: &PropertyArgs,
    data: &[String],
    g: &Grammar,
) -> Result<Vec<Option<f64>>, CliError> {
    if let Some(path) = &p.properties {
        let vals = read_lines(path)?
            .iter()
            .map(|l| {
                l.parse::<f64>()
                    .map(|v| v.is_finite().then_some(v))
                    .map_err(|_| CliError::Usage(format!("{}: bad number `{l}`", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != data.len() {
            return Err(CliError::Usage(format!(
                "{} strings but {} properties",
                data.len(),
                vals.len()
            )));
        }
        return Ok(vals);
    }
    let (f, _) = scorer(p, g)?;
    Ok(data.par_iter().map(|s| f(s)).collect())
}

type Scored = (Vec<String>, Vec<Vec<f64>>, Vec<f64>);

/// Strings with a property value, plus their mean encodings.
fn encoded_scored(
    data: Vec<String>,
    props: Vec<Option<f64>>,
    model: &VaeModel,
    g: &Grammar,
) -> Result<Scored, CliError> {
    let kept: Vec<(String, f64)> = data
        .into_iter()
        .zip(props)
        .filter_map(|(s, p)| p.map(|v| (s, v)))
        .collect();
    let zs = kept
        .par_iter()
        .map(|(s, _)| {
            mean_encoding(s, model, g).map_err(|e| CliError::Domain(format!("`{s}`: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (strings, ys) = kept.into_iter().unzip();
    Ok((strings, zs, ys))
}

fn cmd_scatter(a: &ScatterArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let data = read_lines(&a.data)?;
    let props = properties(&a.property, &data, g)?;
    let (strings, ys): (Vec<String>, Vec<f64>) = data
        .into_iter()
        .zip(props)
        .filter_map(|(s, p)| p.map(|v| (s, v)))
        .unzip();
    match &a.out {
        Some(p) => {
            let mut w = create_file(p)?;
            latent_property_scatter(&strings, &ys, &model, g, &mut w)?;
            w.flush()?;
        }
        None => {
            latent_property_scatter(&strings, &ys, &model, g, &mut &mut *out)?;
        }
    }
    Ok(0)
}

fn gp_config(iterations: usize, exact_threshold: usize, inducing: usize, seed: u64) -> GpConfig {
    GpConfig {
        iterations,
        exact_threshold,
        inducing,
        seed,
        ..GpConfig::default()
    }
}

fn cmd_bo(a: &BoArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    let model = load_model(&a.model, g)?;
    let mut data = read_lines(&a.data)?;
    if let Some(n) = a.init {
        data.truncate(n);
    }
    let props = properties(&a.property, &data, g)?;
    let (f, maximize) = scorer(&a.property, g)?;
    let (strings, zs, ys) = encoded_scored(data, props, &model, g)?;
    if strings.len() < 2 {
        return Err(CliError::Usage(
            "need at least two scored initial strings".into(),
        ));
    }
    let init = strings
        .into_iter()
        .zip(zs)
        .zip(ys)
        .map(|((s, z), y)| (z, Some(s), y))
        .collect();
    let state = BoState::new(maximize, init);
    let cfg = BoConfig {
        iterations: a.iterations,
        batch_size: a.batch,
        seed: a.seed,
        gp: gp_config(a.gp_iterations, a.exact_threshold, a.inducing, a.seed),
        ..BoConfig::default()
    };
    let objective = DecoderObjective {
        model: &model,
        grammar: g,
        mode: a.mode.into(),
        scorer: f,
    };
    let state = bo_loop(state, &objective, &cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(p) = &a.log {
        let mut w = create_file(p)?;
        state.write_csv(&mut w)?;
        w.flush()?;
    }
    for s in &state.summaries {
        info!(
            "iteration {} valid {:.3} best {}",
            s.iteration, s.fraction_valid, s.best
        );
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    writeln!(out, "initial best: {}", fmt(state.initial_best()))?;
    writeln!(out, "final best:   {}", fmt(state.best()))?;
    for (i, r) in state.top(a.top).iter().enumerate() {
        writeln!(
            out,
            "{}  {}  {}",
            i + 1,
            r.text.as_deref().unwrap_or("?"),
            fmt(r.raw_score)
        )?;
    }
    Ok(0)
}

fn cmd_gp_metrics(a: &GpMetricsArgs, g: &Grammar, out: &mut dyn Write) -> Result<i32, CliError> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CliError::Usage("--test-fraction must be in [0, 1)".into()));
    }
    let model = load_model(&a.model, g)?;
    let data = read_lines(&a.data)?;
    let props = properties(&a.property, &data, g)?;
    let (_, zs, ys) = encoded_scored(data, props, &model, g)?;
    let (train_idx, test_idx) =
        train_test_split(zs.len(), a.test_fraction, &mut stream_rng(a.seed, 0));
    if train_idx.len() < 2 || test_idx.is_empty() {
        return Err(CliError::Usage(
            "not enough scored strings for a split".into(),
        ));
    }
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        idx.iter().map(|&i| (zs[i].clone(), ys[i])).unzip()
    };
    let (ztr, ytr) = pick(&train_idx);
    let (zte, yte) = pick(&test_idx);
    let gp = fit_gp(
        &ztr,
        &ytr,
        &gp_config(a.gp_iterations, a.exact_threshold, a.inducing, a.seed),
    )
    .map_err(|e| CliError::Internal(e.to_string()))?;
    let m = test_metrics(&gp, &zte, &yte).map_err(|e| CliError::Internal(e.to_string()))?;
    write_json(
        out,
        json!({
            "log_likelihood": m.log_likelihood,
            "rmse": m.rmse,
            "train": ztr.len(),
            "test": zte.len(),
            "sparse": gp.is_sparse(),
        }),
    )?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arguments_parse() {
        Cli::try_parse_from(["gvae", "parse", "x+1"]).unwrap();
        Cli::try_parse_from([
            "gvae",
            "--threads",
            "1",
            "train",
            "--data",
            "d",
            "--model",
            "m",
            "--set",
            "epochs=2",
        ])
        .unwrap();
        let e = Cli::try_parse_from(["gvae", "bogus"]).unwrap_err();
        assert!(e.use_stderr());
        assert!(Cli::try_parse_from(["gvae", "bo", "--data", "d"]).is_err());
    }

    #[test]
    fn parse_command_output() {
        let cli = Cli::try_parse_from(["gvae", "parse", "x+1", "x+"]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(execute(&cli, &mut buf).unwrap(), 1);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["valid"], true);
        assert_eq!(lines[0]["rules"], json!([0, 3, 7, 8]));
        assert_eq!(lines[1]["valid"], false);
    }

    #[test]
    fn grammar_resolution() {
        assert_eq!(load_grammar("smiles").unwrap().0.num_rules(), 77);
        assert!(matches!(load_grammar("nope"), Err(CliError::Usage(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Domain(String::new()).exit_code(), 1);
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Internal(String::new()).exit_code(), 3);
    }
}
