//! Graph layers: GCN, topology-aware pooling, readout and the MLP head.
//!
//! Every layer records onto a caller-supplied [`Tape`]; adjacency-derived
//! matrices enter as constants and receive no gradient.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_io::degrees;
use crate::tensor::Tensor;

/// Adjacency of one stage plus the normalizations the layers need.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTopology {
    pub adjacency: Tensor,
    /// `D^-1/2 (A + I) D^-1/2`
    pub sym_norm: Tensor,
    /// `D^-1 (A + I)`
    pub row_norm: Tensor,
    /// Degrees in `A`, self-loop excluded.
    pub degrees: Vec<f64>,
}

impl StageTopology {
    pub fn new(adjacency: Tensor) -> Self {
        let n = adjacency.rows();
        let deg: Vec<f64> = degrees(&adjacency).into_iter().map(|d| d as f64).collect();
        let mut sym_norm = Tensor::zeros(n, n);
        let mut row_norm = Tensor::zeros(n, n);
        for i in 0..n {
            let di = deg[i] + 1.0;
            for j in 0..n {
                let a = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
                if a != 0.0 {
                    let dj = deg[j] + 1.0;
                    sym_norm.set(i, j, a / (di * dj).sqrt());
                    row_norm.set(i, j, a / di);
                }
            }
        }
        Self {
            adjacency,
            sym_norm,
            row_norm,
            degrees: deg,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Glorot-uniform `rows x cols` tensor.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Dropout when an rng is supplied (training), identity otherwise.
pub fn dropout_if_training<R: RngCore + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    keep: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(x, keep, r),
        None => Ok(x),
    }
}

// ---------------------------------------------------------------------------
// GCN

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnParams {
    pub weight: ParamId,
    pub activation: Activation,
}

impl GcnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(d_in, d_out, rng));
        Self { weight, activation }
    }
}

/// `act(D^-1/2 Â D^-1/2 H W)`.
pub fn gcn_forward(
    tape: &mut Tape<'_>,
    params: &GcnParams,
    topo: &StageTopology,
    h: Var,
) -> Result<Var> {
    let (n, _) = tape.shape(h);
    if n != topo.num_nodes() {
        return Err(Error::Shape {
            op: "gcn_forward",
            left: topo.adjacency.shape(),
            right: tape.shape(h),
        });
    }
    let w = tape.param(params.weight);
    let hw = tape.matmul(h, w)?;
    let a = tape.constant(topo.sym_norm.clone());
    let z = tape.matmul(a, hw)?;
    tape.activation(z, params.activation)
}

// ---------------------------------------------------------------------------
// Voting and ranking

fn check_nodes(op: &'static str, topo: &StageTopology, tape: &Tape<'_>, h: Var) -> Result<()> {
    if tape.shape(h).0 != topo.num_nodes() {
        return Err(Error::Shape {
            op,
            left: topo.adjacency.shape(),
            right: tape.shape(h),
        });
    }
    Ok(())
}

/// Local voting. Returns `(y_local, R)` with `R = H W_r Hᵀ` (or `H Hᵀ`)
/// before masking by the row-normalized adjacency.
pub fn local_voting(
    tape: &mut Tape<'_>,
    topo: &StageTopology,
    h: Var,
    w_r: Option<Var>,
) -> Result<(Var, Var)> {
    check_nodes("local_voting", topo, tape, h)?;
    let ht = tape.transpose(h)?;
    let left = match w_r {
        Some(w) => tape.matmul(h, w)?,
        None => h,
    };
    let r = tape.matmul(left, ht)?;
    let mask = tape.constant(topo.row_norm.clone());
    let r_hat = tape.mul(r, mask)?;
    let mean = tape.row_mean_scaled(r_hat)?;
    let y = tape.softmax_vec(mean)?;
    Ok((y, r))
}

/// Global voting: `softmax(D^-1 Â H p)`.
pub fn global_voting(tape: &mut Tape<'_>, topo: &StageTopology, h: Var, p: Var) -> Result<Var> {
    check_nodes("global_voting", topo, tape, h)?;
    let agg = tape.constant(topo.row_norm.clone());
    let h_hat = tape.matmul(agg, h)?;
    let logits = tape.matmul(h_hat, p)?;
    tape.softmax_vec(logits)
}

/// Projection scoring without neighborhood aggregation, `softmax(H p)`.
pub fn projection_scores(tape: &mut Tape<'_>, h: Var, p: Var) -> Result<Var> {
    let logits = tape.matmul(h, p)?;
    tape.softmax_vec(logits)
}

/// Nodes kept out of `n` at retention `rate`: `max(1, ceil(rate * n))`.
///
/// A relative slack of 1e-9 keeps products such as `0.6 * 5` from rounding up
/// past the integer they represent.
pub fn retained_count(rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let k = (x - 1e-9 * x.abs().max(1.0)).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// Indexes of the `k` largest scores, by descending score then ascending index.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub y_local: Option<Var>,
    pub y_global: Option<Var>,
    /// `y_local + y_global`, a missing term counting as zero.
    pub y: Var,
    /// `y + lambda * degree / n`.
    pub s: Var,
}

/// Combines the voting terms, adds the connectivity bias and selects the
/// top `max(1, ceil(rate * n))` nodes.
pub fn combine_and_rank(
    tape: &mut Tape<'_>,
    y_local: Option<Var>,
    y_global: Option<Var>,
    degrees: &[f64],
    lambda: f64,
    rate: f64,
) -> Result<(Scores, Vec<usize>)> {
    if lambda < 0.0 {
        return Err(Error::config("lambda", "must be non-negative"));
    }
    let y = match (y_local, y_global) {
        (Some(l), Some(g)) => tape.add(l, g)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => return Err(Error::Empty { op: "combine_and_rank" }),
    };
    let n = tape.shape(y).0;
    if tape.shape(y) != (degrees.len(), 1) {
        return Err(Error::Shape {
            op: "combine_and_rank",
            left: tape.shape(y),
            right: (degrees.len(), 1),
        });
    }
    let s = if lambda == 0.0 {
        y
    } else {
        let bias = degrees.iter().map(|d| lambda * d / n as f64).collect();
        let bias = tape.constant(Tensor::column(bias));
        tape.add(y, bias)?
    };
    let idx = rank_top_k(tape.value(s).data(), retained_count(rate, n));
    Ok((
        Scores {
            y_local,
            y_global,
            y,
            s,
        },
        idx,
    ))
}

fn check_selection(idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::IndexOutOfRange {
                op: "induced_subgraph",
                index: i,
                len: n,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicateIndex {
                op: "induced_subgraph",
                index: i,
            });
        }
    }
    Ok(())
}

/// `A[idx, idx]`.
pub fn induced_adjacency(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    check_selection(idx, a.rows())?;
    let k = idx.len();
    let mut out = Tensor::zeros(k, k);
    for (i, &src_i) in idx.iter().enumerate() {
        for (j, &src_j) in idx.iter().enumerate() {
            out.set(i, j, a.get(src_i, src_j));
        }
    }
    Ok(out)
}

/// `(A[idx, idx], H[idx, :])` on plain values.
pub fn induced_subgraph(a: &Tensor, h: &Tensor, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    if h.rows() != a.rows() {
        return Err(Error::Shape {
            op: "induced_subgraph",
            left: a.shape(),
            right: h.shape(),
        });
    }
    let a2 = induced_adjacency(a, idx)?;
    let mut h2 = Tensor::zeros(idx.len(), h.cols());
    for (i, &src) in idx.iter().enumerate() {
        h2.row_mut(i).copy_from_slice(h.row(src));
    }
    Ok((a2, h2))
}

// ---------------------------------------------------------------------------
// TAP layer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapLayerParams {
    pub w_r: Option<ParamId>,
    pub p: Option<ParamId>,
    pub lambda: f64,
    pub rate: f64,
}

impl TapLayerParams {
    /// `W_r` starts at identity plus Glorot noise scaled by 0.01.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        with_w_r: bool,
        with_p: bool,
        lambda: f64,
        rate: f64,
        rng: &mut R,
    ) -> Self {
        let w_r = with_w_r.then(|| {
            let mut w = glorot_uniform(dim, dim, rng);
            w.scale_assign(0.01);
            w.add_assign(&Tensor::identity(dim));
            store.add(format!("{name}.w_r"), w)
        });
        let p = with_p.then(|| store.add(format!("{name}.p"), glorot_uniform(dim, 1, rng)));
        Self { w_r, p, lambda, rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapMode {
    pub use_lv: bool,
    pub use_gv: bool,
    pub use_gct: bool,
    /// Scale selected rows by their ranking score.
    pub gating: bool,
    /// Aggregate neighborhoods before the global projection. Off for the
    /// plain top-k baseline.
    pub aggregate: bool,
}

impl Default for TapMode {
    fn default() -> Self {
        Self {
            use_lv: true,
            use_gv: true,
            use_gct: true,
            gating: true,
            aggregate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult {
    pub idx: Vec<usize>,
    /// `k x d`
    pub features: Var,
    /// `k x k`
    pub adjacency: Tensor,
    /// `R` before masking, kept when local voting is on.
    pub similarity: Option<Var>,
    pub scores: Scores,
}

pub fn tap_forward(
    tape: &mut Tape<'_>,
    params: &TapLayerParams,
    mode: TapMode,
    topo: &StageTopology,
    h: Var,
) -> Result<PoolResult> {
    tap_forward_impl(tape, params, mode, topo, h, None)
}

/// [`tap_forward`] with the selection overridden by `idx`, as when
/// differentiating with the forward-pass selection held constant.
pub fn tap_forward_with_selection(
    tape: &mut Tape<'_>,
    params: &TapLayerParams,
    mode: TapMode,
    topo: &StageTopology,
    h: Var,
    idx: &[usize],
) -> Result<PoolResult> {
    tap_forward_impl(tape, params, mode, topo, h, Some(idx))
}

fn tap_forward_impl(
    tape: &mut Tape<'_>,
    params: &TapLayerParams,
    mode: TapMode,
    topo: &StageTopology,
    h: Var,
    fixed: Option<&[usize]>,
) -> Result<PoolResult> {
    if !(mode.use_lv || mode.use_gv) {
        return Err(Error::config(
            "pooling",
            "at least one of local or global voting must be enabled",
        ));
    }
    if !(params.rate > 0.0 && params.rate <= 1.0) {
        return Err(Error::config("rates", format!("{} not in (0, 1]", params.rate)));
    }
    check_nodes("tap_forward", topo, tape, h)?;

    let (y_local, similarity) = if mode.use_lv {
        let w_r = params.w_r.map(|id| tape.param(id));
        let (y, r) = local_voting(tape, topo, h, w_r)?;
        (Some(y), Some(r))
    } else {
        (None, None)
    };
    let y_global = if mode.use_gv {
        let id = params
            .p
            .ok_or_else(|| Error::config("pooling", "global voting needs a projection vector"))?;
        let p = tape.param(id);
        Some(if mode.aggregate {
            global_voting(tape, topo, h, p)?
        } else {
            projection_scores(tape, h, p)?
        })
    } else {
        None
    };
    let lambda = if mode.use_gct { params.lambda } else { 0.0 };
    let (scores, ranked) =
        combine_and_rank(tape, y_local, y_global, &topo.degrees, lambda, params.rate)?;
    let idx = fixed.map_or(ranked, <[usize]>::to_vec);

    let adjacency = induced_adjacency(&topo.adjacency, &idx)?;
    let mut features = tape.row_gather(h, &idx)?;
    if mode.gating {
        let gate = tape.row_gather(scores.s, &idx)?;
        features = tape.row_scale(features, gate)?;
    }
    Ok(PoolResult {
        idx,
        features,
        adjacency,
        similarity,
        scores,
    })
}

// ---------------------------------------------------------------------------
// Readout and classifier

/// Per stage `max ‖ mean ‖ sum` over nodes, stages concatenated in order.
pub fn readout(tape: &mut Tape<'_>, stages: &[Var]) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::Empty { op: "readout" });
    }
    let mut parts = Vec::with_capacity(3 * stages.len());
    for &h in stages {
        parts.push(tape.col_max(h)?);
        parts.push(tape.col_mean(h)?);
        parts.push(tape.col_sum(h)?);
    }
    tape.concat_cols(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
    pub keep: f64,
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        classes: usize,
        activation: Activation,
        keep: f64,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(format!("{name}.w1"), glorot_uniform(d_in, hidden, rng));
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(1, hidden));
        let w2 = store.add(format!("{name}.w2"), glorot_uniform(hidden, classes, rng));
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(1, classes));
        Self {
            w1,
            b1,
            w2,
            b2,
            activation,
            keep,
        }
    }
}

/// dropout → linear → activation → dropout → linear. `rng = None` is
/// evaluation mode (no dropout).
pub fn mlp_forward(
    tape: &mut Tape<'_>,
    params: &MlpParams,
    x: Var,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let x = dropout_if_training(tape, x, params.keep, rng.as_deref_mut())?;
    let w1 = tape.param(params.w1);
    let b1 = tape.param(params.b1);
    let z = tape.matmul(x, w1)?;
    let z = tape.add(z, b1)?;
    let z = tape.activation(z, params.activation)?;
    let z = dropout_if_training(tape, z, params.keep, rng)?;
    let w2 = tape.param(params.w2);
    let b2 = tape.param(params.b2);
    let out = tape.matmul(z, w2)?;
    tape.add(out, b2)
}
