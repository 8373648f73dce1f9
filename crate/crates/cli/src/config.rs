//! Resolution of defaults, config file and flags into one run description.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tapnet_core::graph_io::FeatureMode;
use tapnet_core::gradcheck::{DEFAULT_INSTANCES, DEFAULT_TOL};
use tapnet_core::model::{HeadActivation, TapNetConfig};
use tapnet_core::train::TrainConfig;

use crate::args::{Command, GradcheckArgs, RunArgs};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub tol: f64,
    pub instances: usize,
    pub seed: u64,
    pub inject_sign_flip: bool,
}

/// Everything a run depends on. Stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureMode>,
    pub seed: u64,
    pub jobs: usize,
    pub model: TapNetConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSettings>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn resolve_run(a: &RunArgs, command: &str) -> Result<ResolvedConfig, CliError> {
    let seed = a.seed.unwrap_or(0);
    let mut model = TapNetConfig::default();
    if let Some(name) = &a.dataset {
        model.head_activation = HeadActivation::for_dataset(name);
    }
    if let Some(v) = a.hidden_dim {
        model.hidden_dim = v;
    }
    if let Some(v) = &a.rates {
        model.rates = v.0.clone();
    }
    if let Some(v) = a.lambda {
        model.lambda = v;
    }
    if let Some(v) = a.gcn_dropout_keep {
        model.gcn_dropout_keep = v;
    }
    if let Some(v) = a.mlp_dropout_keep {
        model.mlp_dropout_keep = v;
    }
    if let Some(v) = a.mlp_hidden {
        model.mlp_hidden = v;
    }
    if let Some(v) = a.head_activation {
        model.head_activation = v;
    }
    if let Some(v) = a.pooling {
        model.pooling = v;
    }
    if a.paper_literal && a.gating == Some(true) {
        return Err(usage("--paper-literal conflicts with --gating on"));
    }
    if let Some(v) = a.gating {
        model.gating = v;
    }
    if a.paper_literal {
        model.gating = false;
    }
    if a.no_w_r {
        model.use_w_r = false;
    }
    if let Some(v) = a.aux_weight {
        model.aux_weight = v;
    }
    model.validate()?;

    let mut train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.lr {
        train.adam.lr = v;
    }
    if let Some(v) = a.l2 {
        train.adam.l2 = v;
    }
    train.validate()?;

    let jobs = a.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(usage("invalid value for --jobs: must be at least 1"));
    }
    Ok(ResolvedConfig {
        out_dir: a
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command)),
        dataset: a.dataset.clone(),
        data_dir: a.data_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
        features: a.features,
        seed,
        jobs,
        model,
        train,
        num_seeds: None,
        fold: None,
        checkpoint: None,
        graph_index: None,
        feature_dim: None,
        num_classes: None,
        gradcheck: None,
    })
}

fn resolve_gradcheck(a: &GradcheckArgs) -> Result<ResolvedConfig, CliError> {
    let settings = GradcheckSettings {
        tol: a.tol.unwrap_or(DEFAULT_TOL),
        instances: a.instances.unwrap_or(DEFAULT_INSTANCES),
        seed: a.seed.unwrap_or(0),
        inject_sign_flip: a.inject_sign_flip,
    };
    if !(settings.tol > 0.0) {
        return Err(usage("invalid value for --tol: must be positive"));
    }
    if settings.instances == 0 {
        return Err(usage("invalid value for --instances: must be at least 1"));
    }
    let mut cfg = resolve_run(&RunArgs::default(), "gradcheck")?;
    cfg.seed = settings.seed;
    cfg.train.seed = settings.seed;
    if let Some(dir) = &a.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.gradcheck = Some(settings);
    Ok(cfg)
}

fn require_dataset(cfg: &ResolvedConfig, command: &str) -> Result<(), CliError> {
    if cfg.dataset.is_none() {
        return Err(usage(format!("{command} requires --dataset")));
    }
    Ok(())
}

/// Resolves a parsed command. `rerun` is handled by the caller.
pub fn resolve(command: &Command) -> Result<ResolvedConfig, CliError> {
    let name = command.name();
    match command {
        Command::Crossval(a) | Command::LambdaSweep(a) => {
            let cfg = resolve_run(a, name)?;
            require_dataset(&cfg, name)?;
            Ok(cfg)
        }
        Command::Ablate(a) => {
            let mut cfg = resolve_run(&a.run, name)?;
            require_dataset(&cfg, name)?;
            let n = a.num_seeds.unwrap_or(3);
            if n == 0 {
                return Err(usage("invalid value for --num-seeds: must be at least 1"));
            }
            cfg.num_seeds = Some(n);
            Ok(cfg)
        }
        Command::Train(a) => {
            let mut cfg = resolve_run(&a.run, name)?;
            require_dataset(&cfg, name)?;
            let fold = a.fold.unwrap_or(0);
            if fold >= tapnet_core::graph_io::NUM_FOLDS {
                return Err(usage(format!("invalid value for --fold: {fold} not in 0..10")));
            }
            cfg.fold = Some(fold);
            Ok(cfg)
        }
        Command::ExportDot(a) => {
            let mut cfg = resolve_run(&a.run, name)?;
            require_dataset(&cfg, name)?;
            cfg.checkpoint = Some(
                a.checkpoint
                    .clone()
                    .ok_or_else(|| usage("export-dot requires --checkpoint"))?,
            );
            cfg.graph_index = Some(
                a.graph_index
                    .ok_or_else(|| usage("export-dot requires --graph-index"))?,
            );
            Ok(cfg)
        }
        Command::Params(a) => {
            let mut cfg = resolve_run(&a.run, name)?;
            if cfg.dataset.is_none() && a.feature_dim.is_none() {
                return Err(usage("params requires --dataset or --feature-dim"));
            }
            if a.feature_dim == Some(0) {
                return Err(usage("invalid value for --feature-dim: must be positive"));
            }
            if a.num_classes == Some(0) {
                return Err(usage("invalid value for --num-classes: must be positive"));
            }
            cfg.feature_dim = a.feature_dim;
            cfg.num_classes = a.num_classes;
            Ok(cfg)
        }
        Command::Gradcheck(a) => resolve_gradcheck(a),
        Command::Rerun(_) => Err(usage("rerun is resolved from its manifest")),
    }
}
