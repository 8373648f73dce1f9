//! Losses, Adam, the per-fold training loop and cross-validation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_io::{Dataset, FoldPlan, NUM_FOLDS};
use crate::layers::StageTopology;
use crate::model::{argmax, build_tapnet, ForwardOutput, TapNet, TapNetConfig};
use crate::tensor::Tensor;

/// `-log softmax(logits)[label]`.
pub fn classification_loss(tape: &mut Tape<'_>, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// Link prediction loss averaged over stages. Per stage, with `n` nodes:
/// `(1/n²) Σ -T_ij ln softmax_rows(R)_ij`, `T = D^-1 (A + I)`.
pub fn aux_link_loss(tape: &mut Tape<'_>, stages: &[(Var, StageTopology)]) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::Empty { op: "aux_link_loss" });
    }
    let mut total: Option<Var> = None;
    for (r, topo) in stages {
        let n = topo.num_nodes();
        if tape.shape(*r) != (n, n) {
            return Err(Error::Shape {
                op: "aux_link_loss",
                left: tape.shape(*r),
                right: topo.adjacency.shape(),
            });
        }
        let log_p = tape.log_softmax_rows(*r)?;
        let target = tape.constant(topo.row_norm.clone());
        let prod = tape.mul(log_p, target)?;
        let s = tape.sum(prod)?;
        let stage = tape.scale(s, -1.0 / (n * n) as f64)?;
        total = Some(match total {
            Some(t) => tape.add(t, stage)?,
            None => stage,
        });
    }
    let total = total.expect("non-empty");
    tape.scale(total, 1.0 / stages.len() as f64)
}

/// Classification loss plus `aux_weight` times the link loss when the
/// forward pass recorded similarities and the weight is positive.
pub fn graph_loss(
    tape: &mut Tape<'_>,
    out: &ForwardOutput,
    label: usize,
    aux_weight: f64,
) -> Result<Var> {
    let ce = classification_loss(tape, out.logits, label)?;
    if aux_weight > 0.0 && !out.similarities.is_empty() {
        let aux = aux_link_loss(tape, &out.similarities)?;
        let aux = tape.scale(aux, aux_weight)?;
        tape.add(ce, aux)
    } else {
        Ok(ce)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `l2 * param`.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0008,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] + cfg.l2 * *w;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.adam.l2 >= 0.0 && self.adam.l2.is_finite()) {
            return Err(Error::config("l2", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("betas", "must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch.
    pub train_loss: f64,
    /// Training-mode accuracy accumulated during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub curve: Vec<EpochMetrics>,
    /// 1-based epoch of this fold's highest test accuracy, earliest on ties.
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub model: TapNet,
    /// Backward passes per dataset graph index.
    pub backward_counts: Vec<usize>,
}

pub type EpochHook<'a> = &'a (dyn Fn(usize, &EpochMetrics) + Sync);

fn check_dataset(dataset: &Dataset) -> Result<()> {
    for (i, g) in dataset.graphs.iter().enumerate() {
        if g.features.cols() != dataset.feature_dim || g.features.rows() != g.num_nodes() {
            return Err(Error::Dataset(format!(
                "graph {i} has features {:?}, expected {} columns (features not built?)",
                g.features.shape(),
                dataset.feature_dim
            )));
        }
        if g.label >= dataset.num_classes {
            return Err(Error::LabelOutOfRange {
                label: g.label,
                classes: dataset.num_classes,
            });
        }
    }
    Ok(())
}

pub fn accuracy(model: &TapNet, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &i in indices {
        let g = &dataset.graphs[i];
        if model.predict(g)? == g.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub fn train_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &TapNetConfig,
    train_cfg: &TrainConfig,
    hook: Option<EpochHook<'_>>,
) -> Result<FoldResult> {
    if fold >= plan.folds.len() {
        return Err(Error::IndexOutOfRange {
            op: "train_fold",
            index: fold,
            len: plan.folds.len(),
        });
    }
    train_cfg.validate()?;
    check_dataset(dataset)?;
    let fold_key = fold as u64;
    let mut model = build_tapnet(
        model_cfg,
        dataset.feature_dim,
        dataset.num_classes,
        derive_seed(train_cfg.seed, fold_key, 0),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, fold_key, 1));
    let mut adam = AdamState::new(model.params());
    let mut order = plan.train_indices(fold);
    let test = plan.test_indices(fold).to_vec();
    let mut counts = vec![0usize; dataset.graphs.len()];
    let mut curve = Vec::with_capacity(train_cfg.epochs);

    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            model.params_mut().zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &gi in batch {
                let g = &dataset.graphs[gi];
                let (grads, loss, pred) = {
                    let mut tape = Tape::new(model.params());
                    let out = model.forward(&mut tape, g, Some(&mut rng as &mut dyn RngCore))?;
                    let loss = graph_loss(&mut tape, &out, g.label, model_cfg.aux_weight)?;
                    let grads = tape.backward(loss)?;
                    (
                        grads,
                        tape.value(loss).item(),
                        argmax(tape.value(out.logits).data()),
                    )
                };
                model.params_mut().accumulate(&grads, scale);
                counts[gi] += 1;
                loss_sum += loss;
                correct += usize::from(pred == g.label);
            }
            adam.step(model.params_mut(), &train_cfg.adam);
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            train_acc: correct as f64 / order.len().max(1) as f64,
            test_acc: accuracy(&model, dataset, &test)?,
        };
        if let Some(h) = hook {
            h(fold, &metrics);
        }
        curve.push(metrics);
    }

    let mut best_epoch = 1;
    for m in &curve {
        if m.test_acc > curve[best_epoch - 1].test_acc {
            best_epoch = m.epoch;
        }
    }
    Ok(FoldResult {
        fold,
        curve,
        best_epoch,
        model,
        backward_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub curve: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    pub num_graphs: usize,
    pub model: TapNetConfig,
    pub train: TrainConfig,
    pub fold_seed: u64,
    pub folds: Vec<FoldSummary>,
    /// 1-based epoch maximizing the mean test curve.
    pub selected_epoch: usize,
    /// Test accuracy of each fold at `selected_epoch`.
    pub fold_accuracies: Vec<f64>,
    pub mean_acc: f64,
    /// Population standard deviation over folds.
    pub std_acc: f64,
    /// Kept out of serialized output so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let rough = xs.iter().sum::<f64>() / n;
    let mean = rough + xs.iter().map(|x| x - rough).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Picks the epoch with the highest mean test accuracy across folds
/// (earliest on ties) and reports per-fold accuracies there.
pub fn summarize(folds: &[FoldSummary]) -> Result<(usize, Vec<f64>, f64, f64)> {
    let epochs = folds.first().map_or(0, |f| f.curve.len());
    if epochs == 0 || folds.iter().any(|f| f.curve.len() != epochs) {
        return Err(Error::Empty { op: "summarize" });
    }
    let mut sorted: Vec<&FoldSummary> = folds.iter().collect();
    sorted.sort_by_key(|f| f.fold);
    let mean_at = |e: usize| -> f64 {
        sorted.iter().map(|f| f.curve[e].test_acc).sum::<f64>() / sorted.len() as f64
    };
    let mut best = 0;
    for e in 1..epochs {
        if mean_at(e) > mean_at(best) {
            best = e;
        }
    }
    let accs: Vec<f64> = sorted.iter().map(|f| f.curve[best].test_acc).collect();
    let (mean, std) = mean_std(&accs);
    Ok((best + 1, accs, mean, std))
}

/// Trains all folds of `plan` on a pool of `jobs` threads and aggregates.
pub fn cross_validate(
    dataset: &Dataset,
    plan: &FoldPlan,
    model_cfg: &TapNetConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
    hook: Option<EpochHook<'_>>,
) -> Result<(CvReport, Vec<FoldResult>)> {
    if dataset.graphs.len() < NUM_FOLDS {
        return Err(Error::Dataset(format!(
            "need at least {NUM_FOLDS} graphs, have {}",
            dataset.graphs.len()
        )));
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let results: Vec<FoldResult> = pool.install(|| {
        (0..plan.folds.len())
            .into_par_iter()
            .map(|k| train_fold(dataset, plan, k, model_cfg, train_cfg, hook))
            .collect::<Result<Vec<_>>>()
    })?;
    let folds: Vec<FoldSummary> = results
        .iter()
        .map(|r| FoldSummary {
            fold: r.fold,
            best_epoch: r.best_epoch,
            curve: r.curve.clone(),
        })
        .collect();
    let (selected_epoch, fold_accuracies, mean_acc, std_acc) = summarize(&folds)?;
    let report = CvReport {
        dataset: dataset.name.clone(),
        num_graphs: dataset.graphs.len(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        fold_seed: plan.seed,
        folds,
        selected_epoch,
        fold_accuracies,
        mean_acc,
        std_acc,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, results))
}

impl CvReport {
    /// `fold,epoch,train_loss,train_acc,test_acc` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fold,epoch,train_loss,train_acc,test_acc\n");
        for f in &self.folds {
            for m in &f.curve {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    f.fold, m.epoch, m.train_loss, m.train_acc, m.test_acc
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `mean ± std` in percent, one decimal.
    pub fn headline(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean_acc, 100.0 * self.std_acc)
    }
}
