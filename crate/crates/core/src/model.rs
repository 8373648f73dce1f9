//! TAPNet: embedding GCN, GCN + pooling blocks, multi-stage readout, MLP head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_io::Graph;
use crate::layers::{
    dropout_if_training, gcn_forward, mlp_forward, readout, tap_forward, GcnParams, MlpParams,
    Scores, StageTopology, TapLayerParams, TapMode,
};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Tap,
    TapNoLv,
    TapNoGv,
    TapNoGct,
    TopkBaseline,
    None,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 6] = [
        PoolingKind::Tap,
        PoolingKind::TapNoLv,
        PoolingKind::TapNoGv,
        PoolingKind::TapNoGct,
        PoolingKind::TopkBaseline,
        PoolingKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Tap => "tap",
            PoolingKind::TapNoLv => "tap_no_lv",
            PoolingKind::TapNoGv => "tap_no_gv",
            PoolingKind::TapNoGct => "tap_no_gct",
            PoolingKind::TopkBaseline => "topk",
            PoolingKind::None => "none",
        }
    }

    /// Layer mode, or `None` when no pooling happens.
    pub fn mode(self, gating: bool) -> Option<TapMode> {
        let base = TapMode {
            gating,
            ..TapMode::default()
        };
        match self {
            PoolingKind::Tap => Some(base),
            PoolingKind::TapNoLv => Some(TapMode {
                use_lv: false,
                ..base
            }),
            PoolingKind::TapNoGv => Some(TapMode {
                use_gv: false,
                ..base
            }),
            PoolingKind::TapNoGct => Some(TapMode {
                use_gct: false,
                ..base
            }),
            PoolingKind::TopkBaseline => Some(TapMode {
                use_lv: false,
                use_gct: false,
                aggregate: false,
                gating: true,
                ..base
            }),
            PoolingKind::None => None,
        }
    }

    pub fn uses_local_voting(self) -> bool {
        self.mode(true).is_some_and(|m| m.use_lv)
    }

    pub fn uses_global_voting(self) -> bool {
        self.mode(true).is_some_and(|m| m.use_gv)
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk_baseline" => Ok(PoolingKind::TopkBaseline),
            _ => PoolingKind::ALL
                .into_iter()
                .find(|k| k.as_str() == s)
                .ok_or_else(|| {
                    let valid: Vec<_> = PoolingKind::ALL.iter().map(|k| k.as_str()).collect();
                    Error::config(
                        "pooling",
                        format!("unknown kind `{s}`, expected one of {}", valid.join(", ")),
                    )
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Relu,
    Elu,
}

impl HeadActivation {
    /// ReLU on DD, PTC, MUTAG, COLLAB and the two large REDDIT sets, ELU elsewhere.
    pub fn for_dataset(name: &str) -> Self {
        let upper = name.to_ascii_uppercase();
        let relu = upper == "DD"
            || upper.starts_with("PTC")
            || upper == "MUTAG"
            || upper == "COLLAB"
            || upper == "REDDIT-MULTI-5K"
            || upper == "REDDIT-MULTI5K"
            || upper == "REDDIT-MULTI-12K"
            || upper == "REDDIT-MULTI12K";
        if relu {
            HeadActivation::Relu
        } else {
            HeadActivation::Elu
        }
    }

    pub fn activation(self) -> Activation {
        match self {
            HeadActivation::Relu => Activation::Relu,
            HeadActivation::Elu => Activation::Elu { alpha: 1.0 },
        }
    }
}

impl FromStr for HeadActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(HeadActivation::Relu),
            "elu" => Ok(HeadActivation::Elu),
            _ => Err(Error::config(
                "head_activation",
                format!("unknown activation `{s}`, expected relu or elu"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapNetConfig {
    pub hidden_dim: usize,
    /// One pooling block per rate.
    pub rates: Vec<f64>,
    pub lambda: f64,
    pub gcn_dropout_keep: f64,
    pub mlp_dropout_keep: f64,
    pub mlp_hidden: usize,
    pub head_activation: HeadActivation,
    pub pooling: PoolingKind,
    pub gating: bool,
    pub use_w_r: bool,
    pub aux_weight: f64,
}

impl Default for TapNetConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 48,
            rates: vec![0.8, 0.6, 0.4],
            lambda: 0.1,
            gcn_dropout_keep: 0.7,
            mlp_dropout_keep: 0.8,
            mlp_hidden: 128,
            head_activation: HeadActivation::Relu,
            pooling: PoolingKind::Tap,
            gating: true,
            use_w_r: true,
            aux_weight: 0.0,
        }
    }
}

fn unit_interval(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} not in (0, 1]")))
    }
}

impl TapNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("mlp_hidden", "must be positive"));
        }
        if self.rates.is_empty() {
            return Err(Error::config("rates", "at least one rate is required"));
        }
        for &r in &self.rates {
            unit_interval("rates", r)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        unit_interval("gcn_dropout_keep", self.gcn_dropout_keep)?;
        unit_interval("mlp_dropout_keep", self.mlp_dropout_keep)?;
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("aux_weight", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.rates.len() + 1
    }

    pub fn readout_width(&self) -> usize {
        3 * self.hidden_dim * self.num_stages()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    gcn: GcnParams,
    tap: Option<TapLayerParams>,
}

#[derive(Debug, Clone)]
pub struct TapNet {
    config: TapNetConfig,
    feature_dim: usize,
    num_classes: usize,
    params: ParamStore,
    embed: GcnParams,
    blocks: Vec<Block>,
    mlp: MlpParams,
}

/// Recorded forward pass. All `Var`s live on the tape passed to
/// [`TapNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `1 x C`
    pub logits: Var,
    /// Similarity `R` of each pooling layer with that layer's input topology.
    pub similarities: Vec<(Var, StageTopology)>,
    /// Positions selected by each pooling layer, relative to its input.
    pub selections: Vec<Vec<usize>>,
    /// Original node ids present at each stage, stage 0 being the input.
    pub stage_nodes: Vec<Vec<usize>>,
    pub scores: Vec<Scores>,
}

impl ForwardOutput {
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stage_nodes.iter().map(Vec::len).collect()
    }
}

/// Evaluation-mode forward pass reduced to plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub logits: Tensor,
    pub selections: Vec<Vec<usize>>,
    pub stage_nodes: Vec<Vec<usize>>,
    /// Ranking scores `s` of each pooling layer, in that layer's input order.
    pub scores: Vec<Vec<f64>>,
    /// Adjacency of each stage, stage 0 being the input.
    pub stage_adjacency: Vec<Tensor>,
}

impl Evaluation {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub tap_extra: usize,
    pub ratio: f64,
}

pub fn build_tapnet(
    config: &TapNetConfig,
    feature_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<TapNet> {
    config.validate()?;
    if feature_dim == 0 {
        return Err(Error::config("feature_dim", "must be positive"));
    }
    if num_classes == 0 {
        return Err(Error::config("num_classes", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let h = config.hidden_dim;
    let leaky = Activation::LeakyRelu { slope: LEAKY_SLOPE };
    let embed = GcnParams::init(&mut params, "embed", feature_dim, h, leaky, &mut rng);
    let mode = config.pooling.mode(config.gating);
    let blocks = config
        .rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| {
            let name = format!("block{i}");
            let gcn = GcnParams::init(&mut params, &format!("{name}.gcn"), h, h, leaky, &mut rng);
            let tap = mode.map(|m| {
                TapLayerParams::init(
                    &mut params,
                    &format!("{name}.tap"),
                    h,
                    m.use_lv && config.use_w_r,
                    m.use_gv,
                    config.lambda,
                    rate,
                    &mut rng,
                )
            });
            Block { gcn, tap }
        })
        .collect();
    let mlp = MlpParams::init(
        &mut params,
        "mlp",
        config.readout_width(),
        config.mlp_hidden,
        num_classes,
        config.head_activation.activation(),
        config.mlp_dropout_keep,
        &mut rng,
    );
    Ok(TapNet {
        config: config.clone(),
        feature_dim,
        num_classes,
        params,
        embed,
        blocks,
        mlp,
    })
}

impl TapNet {
    pub fn config(&self) -> &TapNetConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn tap_param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks
            .iter()
            .filter_map(|b| b.tap)
            .flat_map(|t| t.w_r.into_iter().chain(t.p))
    }

    pub fn param_count(&self) -> ParamCount {
        let total = self.params.num_scalars();
        let tap_extra = self
            .tap_param_ids()
            .map(|id| self.params.value(id).len())
            .sum::<usize>();
        let ratio = if tap_extra == 0 {
            0.0
        } else {
            tap_extra as f64 / (total - tap_extra) as f64
        };
        ParamCount {
            total,
            tap_extra,
            ratio,
        }
    }

    /// Records a forward pass on `tape`, which must borrow this model's
    /// parameters. `rng = Some` is training mode (dropout active).
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        graph: &Graph,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        if graph.features.cols() != self.feature_dim || graph.features.rows() != graph.num_nodes()
        {
            return Err(Error::Shape {
                op: "forward",
                left: (graph.num_nodes(), self.feature_dim),
                right: graph.features.shape(),
            });
        }
        let gcn_keep = self.config.gcn_dropout_keep;
        let mut topo = StageTopology::new(graph.adjacency.clone());
        let mut nodes: Vec<usize> = (0..graph.num_nodes()).collect();
        let x = tape.constant(graph.features.clone());
        let x = dropout_if_training(tape, x, gcn_keep, rng.as_deref_mut())?;
        let mut h = gcn_forward(tape, &self.embed, &topo, x)?;

        let mut stages = vec![h];
        let mut stage_nodes = vec![nodes.clone()];
        let mut similarities = Vec::new();
        let mut selections = Vec::new();
        let mut scores = Vec::new();
        let mode = self.config.pooling.mode(self.config.gating);

        for block in &self.blocks {
            let x = dropout_if_training(tape, h, gcn_keep, rng.as_deref_mut())?;
            h = gcn_forward(tape, &block.gcn, &topo, x)?;
            if let (Some(tap), Some(mode)) = (&block.tap, mode) {
                let x = dropout_if_training(tape, h, gcn_keep, rng.as_deref_mut())?;
                let pooled = tap_forward(tape, tap, mode, &topo, x)?;
                nodes = pooled.idx.iter().map(|&i| nodes[i]).collect();
                let next = StageTopology::new(pooled.adjacency);
                let prev = std::mem::replace(&mut topo, next);
                if let Some(r) = pooled.similarity {
                    similarities.push((r, prev));
                }
                selections.push(pooled.idx);
                scores.push(pooled.scores);
                h = pooled.features;
            }
            stages.push(h);
            stage_nodes.push(nodes.clone());
        }

        let z = readout(tape, &stages)?;
        let logits = mlp_forward(tape, &self.mlp, z, rng)?;
        Ok(ForwardOutput {
            logits,
            similarities,
            selections,
            stage_nodes,
            scores,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn evaluate(&self, graph: &Graph) -> Result<Evaluation> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, graph, None)?;
        let mut stage_adjacency = vec![graph.adjacency.clone()];
        for sel in &out.selections {
            let prev = stage_adjacency.last().expect("non-empty");
            stage_adjacency.push(crate::layers::induced_adjacency(prev, sel)?);
        }
        Ok(Evaluation {
            logits: tape.value(out.logits).clone(),
            scores: out
                .scores
                .iter()
                .map(|s| tape.value(s.s).data().to_vec())
                .collect(),
            selections: out.selections,
            stage_nodes: out.stage_nodes,
            stage_adjacency,
        })
    }

    pub fn predict(&self, graph: &Graph) -> Result<usize> {
        Ok(self.evaluate(graph)?.predicted())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            params: self
                .params
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut model = build_tapnet(&ckpt.config, ckpt.feature_dim, ckpt.num_classes, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        for named in &ckpt.params {
            let id = model
                .params
                .find(&named.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", named.name)))?;
            let slot = &mut model.params.get_mut(id).value;
            if slot.shape() != named.value.shape() || named.value.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    named.name,
                    named.value.shape(),
                    slot.shape()
                )));
            }
            *slot = named.value.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tapnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Versioned JSON container: config, dimensions and named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TapNetConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(n: usize, dim: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).filter(|(a, b)| a != b).collect();
        let mut feats = Tensor::zeros(n, dim);
        for i in 0..n {
            feats.set(i, i % dim, 1.0);
        }
        Graph::from_edges(n, &edges, 0).unwrap().with_features(feats)
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = TapNetConfig::default();
        let a = build_tapnet(&cfg, 7, 2, 11).unwrap();
        let b = build_tapnet(&cfg, 7, 2, 11).unwrap();
        let c = build_tapnet(&cfg, 7, 2, 12).unwrap();
        let values = |m: &TapNet| -> Vec<Tensor> {
            m.params().iter().map(|(_, p)| p.value.clone()).collect()
        };
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn stage_cascade() {
        let model = build_tapnet(&TapNetConfig::default(), 3, 2, 0).unwrap();
        let mut tape = Tape::new(model.params());
        let out = model.forward(&mut tape, &cycle(10, 3), None).unwrap();
        assert_eq!(out.stage_sizes(), vec![10, 8, 5, 2]);
        assert_eq!(out.similarities.len(), 3);
        assert!(tape.value(out.logits).is_finite());

        let mut tape = Tape::new(model.params());
        let out = model.forward(&mut tape, &cycle(1, 3), None).unwrap();
        assert_eq!(out.stage_sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn no_pooling_keeps_all_nodes() {
        let cfg = TapNetConfig {
            pooling: PoolingKind::None,
            ..TapNetConfig::default()
        };
        let model = build_tapnet(&cfg, 3, 2, 0).unwrap();
        let mut tape = Tape::new(model.params());
        let out = model.forward(&mut tape, &cycle(6, 3), None).unwrap();
        assert_eq!(out.stage_sizes(), vec![6; 4]);
        assert!(out.similarities.is_empty());
        assert_eq!(model.param_count().tap_extra, 0);
        assert_eq!(model.param_count().ratio, 0.0);
    }

    #[test]
    fn parameter_audit() {
        // degree one-hot width of a REDDIT-BINARY-sized input
        let wide = build_tapnet(&TapNetConfig::default(), 3063, 2, 0).unwrap();
        assert_eq!(wide.param_count().tap_extra, 7056);
        assert!(wide.param_count().ratio < 0.05);
        let full = build_tapnet(&TapNetConfig::default(), 7, 2, 0).unwrap();
        let count = full.param_count();
        assert_eq!(count.tap_extra, 3 * (48 * 48 + 48));
        let no_lv = TapNetConfig {
            pooling: PoolingKind::TapNoLv,
            ..TapNetConfig::default()
        };
        let m = build_tapnet(&no_lv, 7, 2, 0).unwrap();
        assert_eq!(m.param_count().tap_extra, 144);
        assert_eq!(m.param_count().total + 3 * 48 * 48, count.total);
    }

    #[test]
    fn pooling_kind_parsing() {
        for k in PoolingKind::ALL {
            assert_eq!(k.as_str().parse::<PoolingKind>().unwrap(), k);
        }
        assert_eq!("topk_baseline".parse::<PoolingKind>().unwrap(), PoolingKind::TopkBaseline);
        let err = "frob".parse::<PoolingKind>().unwrap_err().to_string();
        assert!(err.contains("tap_no_gct") && err.contains("none"));
    }

    #[test]
    fn config_validation_names_field() {
        let bad = TapNetConfig {
            rates: vec![0.8, 1.5],
            ..TapNetConfig::default()
        };
        let err = build_tapnet(&bad, 3, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config { field: "rates", .. }));
        let bad = TapNetConfig {
            mlp_dropout_keep: 0.0,
            ..TapNetConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(Error::Config {
                field: "mlp_dropout_keep",
                ..
            })
        ));
    }

    #[test]
    fn feature_dim_mismatch_is_an_error() {
        let model = build_tapnet(&TapNetConfig::default(), 4, 2, 0).unwrap();
        assert!(model.evaluate(&cycle(5, 3)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let model = build_tapnet(&TapNetConfig::default(), 3, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        model.save(&path).unwrap();
        let back = TapNet::load(&path).unwrap();
        let g = cycle(7, 3);
        assert_eq!(model.evaluate(&g).unwrap(), back.evaluate(&g).unwrap());

        let mut ckpt = model.to_checkpoint();
        ckpt.params[0].value = Tensor::zeros(1, 1);
        assert!(matches!(TapNet::from_checkpoint(&ckpt), Err(Error::Checkpoint(_))));
        let mut ckpt = model.to_checkpoint();
        ckpt.version = 99;
        assert!(TapNet::from_checkpoint(&ckpt).is_err());
        assert!(matches!(
            TapNet::load(dir.path().join("absent.json")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn head_activation_by_dataset() {
        assert_eq!(HeadActivation::for_dataset("MUTAG"), HeadActivation::Relu);
        assert_eq!(HeadActivation::for_dataset("PTC_MR"), HeadActivation::Relu);
        assert_eq!(HeadActivation::for_dataset("PROTEINS"), HeadActivation::Elu);
    }
}
