//! Command-line front end for the lintx style-transfer engine.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 usage error, 3 I/O error. Every command is deterministic given the
//! same inputs, weights, and seed; bench timings vary but its table
//! structure does not.

mod bench;
mod stylize;
mod train;
mod verify;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lintx_cli::Fail;
use lintx_core::model::ModelSpec;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Depth {
    Shallow,
    Deep,
}

impl Depth {
    pub fn spec(self) -> ModelSpec {
        match self {
            Depth::Shallow => ModelSpec::shallow(),
            Depth::Deep => ModelSpec::deep(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Depth::Shallow => "shallow",
            Depth::Deep => "deep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    #[value(name = "closed_form")]
    ClosedForm,
    Adain,
    Learned,
}

impl Kind {
    pub fn flag_name(self) -> &'static str {
        match self {
            Kind::ClosedForm => "closed_form",
            Kind::Adain => "adain",
            Kind::Learned => "learned",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lintx",
    version,
    about = "Feature-space linear style transfer: stylize, train, verify, bench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stylize one image
    Stylize(CommonArgs),
    /// Stylize a directory of frames with a style factor computed once
    StylizeVideo(CommonArgs),
    /// Fit the decoder to invert the frozen encoder
    TrainDecoder(CommonArgs),
    /// Train the learned transform module against frozen weights
    TrainTransform(CommonArgs),
    /// Run the seeded invariant suite
    Verify(VerifyArgs),
    /// Print the timing grid
    Bench(CommonArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Content image (or frame/training directory)
    #[arg(long)]
    content: Option<PathBuf>,
    /// Style image (or training directory)
    #[arg(long)]
    style: Option<PathBuf>,
    /// Output image, directory, or weight file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight store to load (seed-derived weights when absent)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Encoder preset
    #[arg(long, value_enum)]
    depth: Option<Depth>,
    /// Transform kind
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    /// Style strength in [0,1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Grayscale region mask (closed_form stylize only)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Seed for weight init, procedural data, and check instances
    #[arg(long)]
    seed: Option<u64>,
    /// Print residual report lines after stylizing
    #[arg(long)]
    report: bool,
    /// Comma-separated bench sizes
    #[arg(long)]
    sizes: Option<String>,
    /// Training step count
    #[arg(long)]
    steps: Option<usize>,
    /// Config file of `key = value` lines (flags win over file entries)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Deliberately break a check (modes: identityT)
    #[arg(long)]
    sabotage: Option<String>,
    /// Also run finite-difference checks over every op and the composite
    #[arg(long)]
    grad_check: bool,
}

/// Flags merged with the config file and defaults.
pub struct Resolved {
    pub content: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub depth: Depth,
    pub kind: Kind,
    pub alpha: f64,
    pub seed: u64,
    pub report: bool,
    pub sizes: Vec<usize>,
    pub steps: Option<usize>,
}

impl Resolved {
    pub fn require_path(&self, which: &str) -> Result<&Path, Fail> {
        let slot = match which {
            "content" => &self.content,
            "style" => &self.style,
            "out" => &self.out,
            _ => unreachable!("unknown path slot {which}"),
        };
        slot.as_deref()
            .ok_or_else(|| Fail::Usage(format!("--{which} is required for this command")))
    }
}

const CONFIG_KEYS: &[&str] = &[
    "content", "style", "out", "weights", "mask", "depth", "kind", "alpha", "seed", "report",
    "sizes", "steps",
];

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>, Fail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Fail::Usage(format!(
                "{}:{}: expected `key = value`, got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Fail::Usage(format!(
                "{}:{}: unknown config key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_sizes(text: &str) -> Result<Vec<usize>, Fail> {
    let sizes: Result<Vec<usize>, _> =
        text.split(',').map(|tok| tok.trim().parse::<usize>()).collect();
    match sizes {
        Ok(v) if !v.is_empty() && v.iter().all(|&s| s > 0) => Ok(v),
        _ => Err(Fail::Usage(format!(
            "--sizes expects positive integers separated by commas, got '{text}'"
        ))),
    }
}

fn resolve(args: &CommonArgs) -> Result<Resolved, Fail> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    // CLI flag > config file entry > default, per field.
    let path_of = |cli: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
        cli.clone().or_else(|| file.get(key).map(PathBuf::from))
    };
    let parse_enum = |cli: Option<&str>, key: &str| -> Result<Option<String>, Fail> {
        Ok(cli.map(str::to_string).or_else(|| file.get(key).cloned()))
    };

    let depth = match parse_enum(args.depth.map(|d| d.name()), "depth")? {
        Some(s) => Depth::from_str(&s, false)
            .map_err(|_| Fail::Usage(format!("bad depth '{s}' (shallow|deep)")))?,
        None => Depth::Shallow,
    };
    let kind = match parse_enum(args.kind.map(|k| k.flag_name()), "kind")? {
        Some(s) => Kind::from_str(&s, false)
            .map_err(|_| Fail::Usage(format!("bad kind '{s}' (closed_form|adain|learned)")))?,
        None => Kind::ClosedForm,
    };
    let alpha = match (args.alpha, file.get("alpha")) {
        (Some(a), _) => a,
        (None, Some(s)) => s
            .parse::<f64>()
            .map_err(|_| Fail::Usage(format!("bad alpha '{s}' in config file")))?,
        (None, None) => 1.0,
    };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Fail::Usage(format!("alpha must be in [0,1], got {alpha}")));
    }
    let seed = match (args.seed, file.get("seed")) {
        (Some(s), _) => s,
        (None, Some(s)) => s
            .parse::<u64>()
            .map_err(|_| Fail::Usage(format!("bad seed '{s}' in config file")))?,
        (None, None) => 0,
    };
    let steps = match (args.steps, file.get("steps")) {
        (Some(s), _) => Some(s),
        (None, Some(s)) => Some(
            s.parse::<usize>()
                .map_err(|_| Fail::Usage(format!("bad steps '{s}' in config file")))?,
        ),
        (None, None) => None,
    };
    let report = args.report
        || match file.get("report").map(String::as_str) {
            None => false,
            Some("true") => true,
            Some("false") => false,
            Some(other) => {
                return Err(Fail::Usage(format!("bad report '{other}' in config file")));
            }
        };
    let sizes = match (args.sizes.as_deref(), file.get("sizes")) {
        (Some(s), _) => parse_sizes(s)?,
        (None, Some(s)) => parse_sizes(s)?,
        (None, None) => vec![256, 512, 1024],
    };

    if let Ok(threads) = std::env::var("LINTX_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {} // serial engine; any positive cap is honored
            _ => {
                return Err(Fail::Usage(format!(
                    "LINTX_THREADS must be a positive integer, got '{threads}'"
                )));
            }
        }
    }

    Ok(Resolved {
        content: path_of(&args.content, "content"),
        style: path_of(&args.style, "style"),
        out: path_of(&args.out, "out"),
        weights: path_of(&args.weights, "weights"),
        mask: path_of(&args.mask, "mask"),
        depth,
        kind,
        alpha,
        seed,
        report,
        sizes,
        steps,
    })
}

fn run() -> Result<(), Fail> {
    match Cli::parse().cmd {
        Cmd::Stylize(args) => stylize::cmd_stylize(&resolve(&args)?),
        Cmd::StylizeVideo(args) => stylize::cmd_stylize_video(&resolve(&args)?),
        Cmd::TrainDecoder(args) => train::cmd_train_decoder(&resolve(&args)?),
        Cmd::TrainTransform(args) => train::cmd_train_transform(&resolve(&args)?),
        Cmd::Verify(args) => {
            verify::cmd_verify(&resolve(&args.common)?, args.sabotage.as_deref(), args.grad_check)
        }
        Cmd::Bench(args) => bench::cmd_bench(&resolve(&args)?),
    }
}

fn main() {
    std::process::exit(match run() {
        Ok(()) => 0,
        Err(fail) => {
            eprintln!("error: {}", fail.message());
            fail.code()
        }
    });
}
