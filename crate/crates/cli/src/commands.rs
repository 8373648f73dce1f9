//! Command implementations. Each writes its manifest before doing any work.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tapnet_core::dot::stages_to_dot;
use tapnet_core::gradcheck::{run_gradcheck, GradcheckOptions, DEFAULT_STEP};
use tapnet_core::graph_io::{make_folds, parse_tu_dataset, Dataset};
use tapnet_core::model::{build_tapnet, ParamCount, PoolingKind, TapNet, TapNetConfig};
use tapnet_core::train::{
    cross_validate, mean_std, train_fold, CvReport, EpochMetrics, TrainConfig,
};

use crate::config::ResolvedConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAMBDAS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: ResolvedConfig,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ResolvedConfig) -> Self {
        Self {
            command: command.to_string(),
            version: format!("tapnet-{}", env!("CARGO_PKG_VERSION")),
            dataset: cfg.dataset.clone(),
            seed: cfg.seed,
            out_dir: cfg.out_dir.clone(),
            config: cfg.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?)
    }
}

fn write(dir: &Path, file: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(file);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).context("serializing output")?;
    s.push('\n');
    Ok(s)
}

fn write_manifest(command: &str, cfg: &ResolvedConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write(&cfg.out_dir, MANIFEST_FILE, &json(&RunManifest::new(command, cfg))?)?;
    Ok(())
}

fn load_dataset(cfg: &ResolvedConfig) -> Result<Dataset, CliError> {
    let name = cfg.dataset.as_deref().expect("resolved with a dataset");
    let raw = parse_tu_dataset(cfg.data_dir.join(name), name)?;
    let mode = cfg.features.unwrap_or_else(|| raw.default_feature_mode());
    Ok(raw.build_features(mode)?)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn progress(epochs: usize) -> impl Fn(usize, &EpochMetrics) + Sync {
    move |fold, m| {
        if m.epoch == epochs {
            eprintln!(
                "  fold {fold}: final test acc {}%, train loss {:.4}",
                pct(m.test_acc),
                m.train_loss
            );
        }
    }
}

fn run_cv(
    dataset: &Dataset,
    seed: u64,
    model: &TapNetConfig,
    train: &TrainConfig,
    jobs: usize,
) -> Result<(CvReport, Vec<tapnet_core::train::FoldResult>), CliError> {
    let plan = make_folds(dataset, seed)?;
    let train = TrainConfig {
        seed,
        ..train.clone()
    };
    let hook = progress(train.epochs);
    Ok(cross_validate(dataset, &plan, model, &train, jobs, Some(&hook))?)
}

/// Dispatches a resolved run. Returns the process exit code.
pub fn execute(command: &str, cfg: &ResolvedConfig) -> Result<i32, CliError> {
    write_manifest(command, cfg)?;
    match command {
        "crossval" => crossval(cfg),
        "ablate" => ablate(cfg),
        "lambda-sweep" => lambda_sweep(cfg),
        "train" => train(cfg),
        "export-dot" => export_dot(cfg),
        "gradcheck" => gradcheck(cfg),
        "params" => params(cfg),
        other => Err(CliError::Usage(format!("unknown command `{other}` in manifest"))),
    }
}

fn crossval(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let dataset = load_dataset(cfg)?;
    eprintln!(
        "{}: {} graphs, {} classes, {} features, pooling {}",
        dataset.name,
        dataset.graphs.len(),
        dataset.num_classes,
        dataset.feature_dim,
        cfg.model.pooling
    );
    let (report, folds) = run_cv(&dataset, cfg.seed, &cfg.model, &cfg.train, cfg.jobs)?;
    write(&cfg.out_dir, "curves.csv", &report.curve_csv())?;
    write(&cfg.out_dir, "report.json", &json(&report)?)?;
    for f in &folds {
        f.model
            .save(cfg.out_dir.join(format!("fold{}.ckpt.json", f.fold)))
            .map_err(CliError::from)?;
    }
    println!(
        "{} [{}] accuracy {} % (epoch {})",
        report.dataset,
        cfg.model.pooling,
        report.headline(),
        report.selected_epoch
    );
    println!("wall-clock {:.1} s", report.wall_clock_secs);
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: Vec<u64>,
    pub seed_mean_acc: Vec<f64>,
    pub seed_std_acc: Vec<f64>,
}

/// Table order: no pooling, the three single-term removals, full, full + aux.
pub fn ablation_variants(base: &TapNetConfig) -> Vec<(String, TapNetConfig)> {
    let aux = if base.aux_weight > 0.0 { base.aux_weight } else { 0.1 };
    let plain = TapNetConfig {
        aux_weight: 0.0,
        ..base.clone()
    };
    let with = |pooling: PoolingKind, aux_weight: f64| TapNetConfig {
        pooling,
        aux_weight,
        ..plain.clone()
    };
    vec![
        ("none".into(), with(PoolingKind::None, 0.0)),
        ("tap_no_lv".into(), with(PoolingKind::TapNoLv, 0.0)),
        ("tap_no_gv".into(), with(PoolingKind::TapNoGv, 0.0)),
        ("tap_no_gct".into(), with(PoolingKind::TapNoGct, 0.0)),
        ("tap".into(), with(PoolingKind::Tap, 0.0)),
        ("tap_aux".into(), with(PoolingKind::Tap, aux)),
    ]
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mean_acc,std_acc");
    if let Some(r) = rows.first() {
        for s in &r.seeds {
            let _ = write!(out, ",acc_seed{s}");
        }
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.variant, r.mean_acc, r.std_acc);
        for a in &r.seed_mean_acc {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

fn ablate(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let dataset = load_dataset(cfg)?;
    let started = Instant::now();
    let seeds: Vec<u64> = (0..cfg.num_seeds.unwrap_or(3) as u64)
        .map(|i| cfg.seed + i)
        .collect();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, model) in ablation_variants(&cfg.model) {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for &seed in &seeds {
            eprintln!("{name}, seed {seed}");
            let (report, _) = run_cv(&dataset, seed, &model, &cfg.train, cfg.jobs)?;
            eprintln!("{name}, seed {seed}: {} %", report.headline());
            means.push(report.mean_acc);
            stds.push(report.std_acc);
            reports.push((name.clone(), report));
        }
        let (mean_acc, _) = mean_std(&means);
        let (std_acc, _) = mean_std(&stds);
        rows.push(AblationRow {
            variant: name,
            mean_acc,
            std_acc,
            seeds: seeds.clone(),
            seed_mean_acc: means,
            seed_std_acc: stds,
        });
    }
    write(&cfg.out_dir, "ablation.csv", &ablation_csv(&rows))?;
    #[derive(Serialize)]
    struct Full<'a> {
        rows: &'a [AblationRow],
        runs: Vec<AblationRun<'a>>,
    }
    #[derive(Serialize)]
    struct AblationRun<'a> {
        variant: &'a str,
        report: &'a CvReport,
    }
    let full = Full {
        rows: &rows,
        runs: reports
            .iter()
            .map(|(v, r)| AblationRun {
                variant: v,
                report: r,
            })
            .collect(),
    };
    write(&cfg.out_dir, "ablation.json", &json(&full)?)?;
    println!("{:<12} {:>8} {:>8}", "variant", "acc %", "std");
    for r in &rows {
        println!("{:<12} {:>8} {:>8}", r.variant, pct(r.mean_acc), pct(r.std_acc));
    }
    println!("wall-clock {:.1} s", started.elapsed().as_secs_f64());
    Ok(0)
}

fn lambda_sweep(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let dataset = load_dataset(cfg)?;
    let started = Instant::now();
    let mut csv = String::from("lambda,mean_acc,std_acc\n");
    let mut dat = String::from("# lambda mean_acc_pct std_acc_pct\n");
    let mut reports = Vec::new();
    for lambda in LAMBDAS {
        let model = TapNetConfig {
            lambda,
            ..cfg.model.clone()
        };
        eprintln!("lambda {lambda}");
        let (report, _) = run_cv(&dataset, cfg.seed, &model, &cfg.train, cfg.jobs)?;
        let _ = writeln!(csv, "{lambda},{},{}", report.mean_acc, report.std_acc);
        let _ = writeln!(
            dat,
            "{lambda} {} {}",
            100.0 * report.mean_acc,
            100.0 * report.std_acc
        );
        println!("lambda {lambda:<6} {} %", report.headline());
        reports.push(report);
    }
    write(&cfg.out_dir, "lambda_sweep.csv", &csv)?;
    write(&cfg.out_dir, "lambda_sweep.dat", &dat)?;
    write(&cfg.out_dir, "lambda_sweep.json", &json(&reports)?)?;
    println!("wall-clock {:.1} s", started.elapsed().as_secs_f64());
    Ok(0)
}

fn train(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let dataset = load_dataset(cfg)?;
    let fold = cfg.fold.unwrap_or(0);
    let plan = make_folds(&dataset, cfg.seed)?;
    let hook = progress(cfg.train.epochs);
    let started = Instant::now();
    let result = train_fold(&dataset, &plan, fold, &cfg.model, &cfg.train, Some(&hook))?;
    let mut csv = String::from("fold,epoch,train_loss,train_acc,test_acc\n");
    for m in &result.curve {
        let _ = writeln!(
            csv,
            "{fold},{},{},{},{}",
            m.epoch, m.train_loss, m.train_acc, m.test_acc
        );
    }
    write(&cfg.out_dir, "curves.csv", &csv)?;
    let ckpt = cfg.out_dir.join(format!("fold{fold}.ckpt.json"));
    result.model.save(&ckpt)?;
    let last = result.curve.last().expect("at least one epoch");
    println!(
        "fold {fold}: final test acc {} %, best {} % at epoch {}",
        pct(last.test_acc),
        pct(result.curve[result.best_epoch - 1].test_acc),
        result.best_epoch
    );
    println!("checkpoint {}", ckpt.display());
    println!("wall-clock {:.1} s", started.elapsed().as_secs_f64());
    Ok(0)
}

fn export_dot(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let ckpt = cfg.checkpoint.as_ref().expect("resolved");
    let model = TapNet::load(ckpt)?;
    let dataset = load_dataset(cfg)?;
    let index = cfg.graph_index.expect("resolved");
    let graph = dataset.graphs.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "invalid value for --graph-index: {index} out of range for {} graphs",
            dataset.graphs.len()
        ))
    })?;
    let eval = model.evaluate(graph)?;
    for (s, dot) in stages_to_dot(&eval).iter().enumerate() {
        let path = write(&cfg.out_dir, &format!("stage{s}.dot"), dot)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn gradcheck(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let settings = cfg.gradcheck.as_ref().expect("resolved");
    let opts = GradcheckOptions {
        step: DEFAULT_STEP,
        tol: settings.tol,
        instances: settings.instances,
        seed: settings.seed,
        inject_sign_flip: settings.inject_sign_flip,
    };
    let report = run_gradcheck(&opts)?;
    write(&cfg.out_dir, "gradcheck.json", &json(&report)?)?;
    for c in &report.components {
        println!(
            "{:<22} max_rel_err {:.3e}  {}",
            c.name,
            c.max_rel_err,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("wall-clock {:.1} s", report.wall_clock_secs);
    if report.all_passed() {
        Ok(0)
    } else {
        eprintln!("gradcheck failed at tolerance {:e}", report.tol);
        Ok(1)
    }
}

#[derive(Debug, Clone, Serialize)]
struct ParamsReport {
    feature_dim: usize,
    num_classes: usize,
    pooling: PoolingKind,
    #[serde(flatten)]
    count: ParamCount,
}

fn params(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let (feature_dim, num_classes) = match (&cfg.dataset, cfg.feature_dim) {
        (_, Some(d)) => (d, cfg.num_classes.unwrap_or(2)),
        (Some(_), None) => {
            let ds = load_dataset(cfg)?;
            (ds.feature_dim, cfg.num_classes.unwrap_or(ds.num_classes))
        }
        (None, None) => unreachable!("resolved"),
    };
    let model = build_tapnet(&cfg.model, feature_dim, num_classes, cfg.seed)?;
    let count = model.param_count();
    let report = ParamsReport {
        feature_dim,
        num_classes,
        pooling: cfg.model.pooling,
        count,
    };
    write(&cfg.out_dir, "params.json", &json(&report)?)?;
    println!("total     {}", count.total);
    println!("tap_extra {}", count.tap_extra);
    println!("ratio     {:.2} %", 100.0 * count.ratio);
    Ok(0)
}
