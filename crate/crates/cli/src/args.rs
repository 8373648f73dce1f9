//! Command-line surface and config-file merging.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tapnet_core::graph_io::FeatureMode;
use tapnet_core::model::{HeadActivation, PoolingKind};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "tapnet",
    version,
    about = "Graph classification with topology-aware pooling networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// 10-fold cross-validation of one configuration.
    #[command(args_override_self = true)]
    Crossval(RunArgs),
    /// Pooling ablation: every variant over several seeds.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
    /// Cross-validation for lambda in {0.01, 0.1, 1, 10, 100}.
    #[command(args_override_self = true)]
    LambdaSweep(RunArgs),
    /// Train a single fold and save its checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Write Graphviz files of the coarsened graphs for one input graph.
    #[command(args_override_self = true)]
    ExportDot(ExportDotArgs),
    /// Finite-difference check of every layer and loss.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Parameter audit of a configuration.
    #[command(args_override_self = true)]
    Params(ParamsArgs),
    /// Re-execute the run recorded in a manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Crossval(_) => "crossval",
            Command::Ablate(_) => "ablate",
            Command::LambdaSweep(_) => "lambda-sweep",
            Command::Train(_) => "train",
            Command::ExportDot(_) => "export-dot",
            Command::Gradcheck(_) => "gradcheck",
            Command::Params(_) => "params",
            Command::Rerun(_) => "rerun",
        }
    }

    pub fn run_args(&self) -> Option<&RunArgs> {
        match self {
            Command::Crossval(a) | Command::LambdaSweep(a) => Some(a),
            Command::Ablate(a) => Some(&a.run),
            Command::Train(a) => Some(&a.run),
            Command::ExportDot(a) => Some(&a.run),
            Command::Params(a) => Some(&a.run),
            Command::Gradcheck(_) | Command::Rerun(_) => None,
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Gradcheck(a) => a.config.as_deref(),
            Command::Rerun(_) => None,
            other => other.run_args().and_then(|a| a.config.as_deref()),
        }
    }
}

/// Comma-separated retention rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates(pub Vec<f64>);

fn parse_rates(s: &str) -> Result<Rates, String> {
    let rates = s
        .split(',')
        .map(|r| {
            let r = r.trim();
            r.parse::<f64>().map_err(|_| format!("`{r}` is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rates.is_empty() {
        return Err("expected comma-separated rates such as 0.8,0.6,0.4".into());
    }
    if let Some(bad) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(format!("rate {bad} not in (0, 1]"));
    }
    Ok(Rates(rates))
}

fn parse_pooling(s: &str) -> Result<PoolingKind, String> {
    s.parse::<PoolingKind>().map_err(|_| {
        let valid: Vec<_> = PoolingKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("unknown pooling kind `{s}`; valid kinds: {}", valid.join(", "))
    })
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn parse_head(s: &str) -> Result<HeadActivation, String> {
    s.parse().map_err(|_| format!("expected relu or elu, got `{s}`"))
}

fn parse_features(s: &str) -> Result<FeatureMode, String> {
    match s {
        "node_labels" | "node-labels" => Ok(FeatureMode::NodeLabelOnehot),
        "degree" => Ok(FeatureMode::DegreeOnehot),
        _ => Err(format!("expected node_labels or degree, got `{s}`")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat key = value file; keys are flag names. Flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TU dataset name, e.g. MUTAG.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding one sub-directory per dataset. [default: data]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Node features: node_labels or degree. [default: node_labels when present]
    #[arg(long, value_parser = parse_features)]
    pub features: Option<FeatureMode>,
    /// Seed for folds, initialization, shuffling and dropout. [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Graphs per optimizer step. [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate. [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 coefficient. [default: 0.0008]
    #[arg(long)]
    pub l2: Option<f64>,
    /// Connectivity term weight. [default: 0.1]
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Retention rates, one pooling block each. [default: 0.8,0.6,0.4]
    #[arg(long, value_parser = parse_rates)]
    pub rates: Option<Rates>,
    /// tap, tap_no_lv, tap_no_gv, tap_no_gct, topk or none. [default: tap]
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<PoolingKind>,
    /// Scale selected rows by their scores: on or off. [default: on]
    #[arg(long, value_parser = parse_switch)]
    pub gating: Option<bool>,
    /// Pure slicing of selected rows (same as --gating off).
    #[arg(long)]
    pub paper_literal: bool,
    /// Drop the learnable similarity matrix from local voting.
    #[arg(long)]
    pub no_w_r: bool,
    /// Weight of the auxiliary link loss. [default: 0]
    #[arg(long)]
    pub aux_weight: Option<f64>,
    /// [default: 48]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// [default: 0.7]
    #[arg(long)]
    pub gcn_dropout_keep: Option<f64>,
    /// [default: 0.8]
    #[arg(long)]
    pub mlp_dropout_keep: Option<f64>,
    /// relu or elu. [default: per dataset]
    #[arg(long, value_parser = parse_head)]
    pub head_activation: Option<HeadActivation>,
    /// Worker threads for folds. [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// [default: runs/<command>]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Consecutive seeds starting at --seed. [default: 3]
    #[arg(long)]
    pub num_seeds: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Held-out fold, 0-9. [default: 0]
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportDotArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// 0-based index of the graph in the dataset.
    #[arg(long)]
    pub graph_index: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Input width when no dataset is given.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Class count when no dataset is given. [default: 2]
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Maximum relative error. [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Random instances per component. [default: 20]
    #[arg(long)]
    pub instances: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: runs/gradcheck]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Negate one analytic gradient (harness self-test).
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

const SWITCHES: [&str; 3] = ["paper-literal", "no-w-r", "inject-sign-flip"];

/// Turns a flat TOML file into flag tokens. Booleans become bare switches
/// (or on/off for `gating`), arrays are joined with commas.
pub fn config_tokens(path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read --config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(CliError::Usage("--config files cannot include `config`".into()));
        }
        let scalar = |v: &toml::Value| -> Result<String, CliError> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                toml::Value::Boolean(b) => Ok(b.to_string()),
                _ => Err(CliError::Usage(format!(
                    "--config key `{key}` must be a scalar or a list of scalars"
                ))),
            }
        };
        match &value {
            toml::Value::Boolean(b) if SWITCHES.contains(&flag.as_str()) => {
                if *b {
                    out.push(OsString::from(format!("--{flag}")));
                }
            }
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                out.push(OsString::from(format!("--{flag}")));
                out.push(OsString::from(parts.join(",")));
            }
            v => {
                out.push(OsString::from(format!("--{flag}")));
                out.push(OsString::from(scalar(v)?));
            }
        }
    }
    Ok(out)
}

/// Parses `argv`, splicing config-file tokens in ahead of the command-line
/// flags so that flags take precedence.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cli = Cli::try_parse_from(&argv)?;
    let Some(path) = cli.command.config_path() else {
        return Ok(cli);
    };
    let tokens = config_tokens(path).map_err(|e| {
        let msg = match e {
            CliError::Usage(m) => m,
            other => other.to_string(),
        };
        clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{msg}\n"))
            .with_cmd(&<Cli as clap::CommandFactory>::command())
    })?;
    let mut spliced = argv[..2].to_vec();
    spliced.extend(tokens);
    spliced.extend_from_slice(&argv[2..]);
    Cli::try_parse_from(spliced)
}
