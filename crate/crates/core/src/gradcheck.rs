//! Central finite-difference checks of every layer and loss.
//!
//! Each component is evaluated on randomly shaped instances. Inputs are
//! registered as parameters so one backward pass yields every analytic
//! gradient; the scalar objective is `Σ out ∘ C` for a random fixed `C`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Gradients, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::graph_io::Graph;
use crate::layers::{
    combine_and_rank, gcn_forward, global_voting, local_voting, mlp_forward, readout,
    tap_forward, tap_forward_with_selection, GcnParams, MlpParams, StageTopology,
    TapLayerParams, TapMode,
};
use crate::tensor::Tensor;
use crate::train::{aux_link_loss, classification_loss};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    pub instances: usize,
    pub seed: u64,
    /// Negates the analytic gradient of the first component. Harness
    /// self-test only.
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            instances: DEFAULT_INSTANCES,
            seed: 0,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub components: Vec<ComponentResult>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let denom = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic.max_abs_diff(numeric) / denom
}

type Forward = Box<dyn Fn(&mut Tape<'_>) -> Result<Var>>;

struct Instance {
    store: ParamStore,
    forward: Forward,
    weights: Tensor,
}

impl Instance {
    fn gradients(&self) -> Result<Gradients> {
        let mut tape = Tape::new(&self.store);
        let out = (self.forward)(&mut tape)?;
        let w = tape.constant(self.weights.clone());
        let prod = tape.mul(out, w)?;
        let total = tape.sum(prod)?;
        tape.backward(total)
    }

    fn value(&self, store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = (self.forward)(&mut tape)?;
        let w = tape.constant(self.weights.clone());
        let prod = tape.mul(out, w)?;
        let total = tape.sum(prod)?;
        Ok(tape.value(total).item())
    }

    /// Largest per-tensor relative error over all inputs.
    fn check(&self, step: f64, flip: bool) -> Result<f64> {
        let grads = self.gradients()?;
        let mut worst: f64 = 0.0;
        let mut probe = self.store.clone();
        for (id, p) in self.store.iter() {
            let shape = p.value.shape();
            let mut analytic = grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
            if flip {
                analytic.scale_assign(-1.0);
            }
            let mut numeric = Tensor::zeros(shape.0, shape.1);
            for k in 0..p.value.len() {
                let orig = p.value.data()[k];
                probe.get_mut(id).value.data_mut()[k] = orig + step;
                let plus = self.value(&probe)?;
                probe.get_mut(id).value.data_mut()[k] = orig - step;
                let minus = self.value(&probe)?;
                probe.get_mut(id).value.data_mut()[k] = orig;
                numeric.data_mut()[k] = (plus - minus) / (2.0 * step);
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        Ok(worst)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Random simple graph on `n` nodes with edge probability `p`.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges, 0).expect("valid edges")
}

fn topology(rng: &mut ChaCha8Rng, n: usize) -> StageTopology {
    let p = rng.gen_range(0.2..0.8);
    StageTopology::new(random_graph(rng, n, p).adjacency)
}

fn finish(store: ParamStore, forward: Forward, out_shape: (usize, usize), rng: &mut ChaCha8Rng) -> Instance {
    Instance {
        store,
        forward,
        weights: rand_tensor(rng, out_shape.0, out_shape.1),
    }
}

fn gcn_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=6);
    let (d_in, d_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let topo = topology(rng, n);
    let mut store = ParamStore::new();
    let h = store.add("h", rand_tensor(rng, n, d_in));
    let w = store.add("w", rand_tensor(rng, d_in, d_out));
    let params = GcnParams {
        weight: w,
        activation: Activation::LeakyRelu { slope: 0.01 },
    };
    let f: Forward = Box::new(move |t| {
        let hv = t.param(h);
        gcn_forward(t, &params, &topo, hv)
    });
    finish(store, f, (n, d_out), rng)
}

fn local_voting_instance(rng: &mut ChaCha8Rng, with_w_r: bool) -> Instance {
    let n = rng.gen_range(1..=6);
    let d = rng.gen_range(1..=4);
    let topo = topology(rng, n);
    let mut store = ParamStore::new();
    let h = store.add("h", rand_tensor(rng, n, d));
    let w_r = with_w_r.then(|| store.add("w_r", rand_tensor(rng, d, d)));
    let f: Forward = Box::new(move |t| {
        let hv = t.param(h);
        let wv = w_r.map(|id| t.param(id));
        Ok(local_voting(t, &topo, hv, wv)?.0)
    });
    finish(store, f, (n, 1), rng)
}

fn global_voting_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=6);
    let d = rng.gen_range(1..=4);
    let topo = topology(rng, n);
    let mut store = ParamStore::new();
    let h = store.add("h", rand_tensor(rng, n, d));
    let p = store.add("p", rand_tensor(rng, d, 1));
    let f: Forward = Box::new(move |t| {
        let hv = t.param(h);
        let pv = t.param(p);
        global_voting(t, &topo, hv, pv)
    });
    finish(store, f, (n, 1), rng)
}

fn tap_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.gen_range(1..=7);
    let d = rng.gen_range(1..=4);
    let topo = topology(rng, n);
    let mut store = ParamStore::new();
    let h = store.add("h", rand_tensor(rng, n, d));
    let w_r = store.add("w_r", rand_tensor(rng, d, d));
    let p = store.add("p", rand_tensor(rng, d, 1));
    let params = TapLayerParams {
        w_r: Some(w_r),
        p: Some(p),
        lambda: rng.gen_range(0.0..1.0),
        rate: rng.gen_range(0.3..1.0),
    };
    let mode = TapMode::default();
    let idx = {
        let mut t = Tape::new(&store);
        let hv = t.param(h);
        tap_forward(&mut t, &params, mode, &topo, hv)?.idx
    };
    let k = idx.len();
    let f: Forward = Box::new(move |t| {
        let hv = t.param(h);
        Ok(tap_forward_with_selection(t, &params, mode, &topo, hv, &idx)?.features)
    });
    Ok(finish(store, f, (k, d), rng))
}

fn scores_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=6);
    let mut store = ParamStore::new();
    let yl = store.add("y_local", rand_tensor(rng, n, 1));
    let yg = store.add("y_global", rand_tensor(rng, n, 1));
    let degrees: Vec<f64> = (0..n).map(|_| rng.gen_range(0..n) as f64).collect();
    let lambda = rng.gen_range(0.0..2.0);
    let f: Forward = Box::new(move |t| {
        let a = t.param(yl);
        let b = t.param(yg);
        Ok(combine_and_rank(t, Some(a), Some(b), &degrees, lambda, 0.5)?.0.s)
    });
    finish(store, f, (n, 1), rng)
}

fn readout_instance(rng: &mut ChaCha8Rng) -> Instance {
    let stages = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=4);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = (0..stages)
        .map(|i| {
            let n = rng.gen_range(1..=6);
            store.add(format!("h{i}"), rand_tensor(rng, n, d))
        })
        .collect();
    let f: Forward = Box::new(move |t| {
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
        readout(t, &vars)
    });
    finish(store, f, (1, 3 * d * stages), rng)
}

fn mlp_instance(rng: &mut ChaCha8Rng, activation: Activation) -> Instance {
    let (d, hidden, classes) = (
        rng.gen_range(1..=6),
        rng.gen_range(1..=5),
        rng.gen_range(2..=4),
    );
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(rng, 1, d));
    let params = MlpParams {
        w1: store.add("w1", rand_tensor(rng, d, hidden)),
        b1: store.add("b1", rand_tensor(rng, 1, hidden)),
        w2: store.add("w2", rand_tensor(rng, hidden, classes)),
        b2: store.add("b2", rand_tensor(rng, 1, classes)),
        activation,
        keep: 0.8,
    };
    let f: Forward = Box::new(move |t| {
        let xv = t.param(x);
        mlp_forward(t, &params, xv, None)
    });
    finish(store, f, (1, classes), rng)
}

fn classification_instance(rng: &mut ChaCha8Rng) -> Instance {
    let classes = rng.gen_range(2..=5);
    let label = rng.gen_range(0..classes);
    let mut store = ParamStore::new();
    let mut logits = rand_tensor(rng, 1, classes);
    logits.scale_assign(3.0);
    let l = store.add("logits", logits);
    let f: Forward = Box::new(move |t| {
        let lv = t.param(l);
        classification_loss(t, lv, label)
    });
    finish(store, f, (1, 1), rng)
}

fn aux_instance(rng: &mut ChaCha8Rng) -> Instance {
    let stages = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let mut parts = Vec::new();
    for i in 0..stages {
        let n = rng.gen_range(1..=6);
        let topo = topology(rng, n);
        parts.push((store.add(format!("r{i}"), rand_tensor(rng, n, n)), topo));
    }
    let f: Forward = Box::new(move |t| {
        let vars: Vec<(Var, StageTopology)> =
            parts.iter().map(|(id, topo)| (t.param(*id), topo.clone())).collect();
        aux_link_loss(t, &vars)
    });
    finish(store, f, (1, 1), rng)
}

pub const COMPONENTS: [&str; 12] = [
    "gcn",
    "local_voting",
    "local_voting_w_r",
    "global_voting",
    "combine_scores",
    "tap_gated_fixed_idx",
    "readout",
    "mlp_relu",
    "mlp_elu",
    "mlp_leaky_relu",
    "classification_loss",
    "aux_link_loss",
];

fn make_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(match name {
        "gcn" => gcn_instance(rng),
        "local_voting" => local_voting_instance(rng, false),
        "local_voting_w_r" => local_voting_instance(rng, true),
        "global_voting" => global_voting_instance(rng),
        "combine_scores" => scores_instance(rng),
        "tap_gated_fixed_idx" => tap_instance(rng)?,
        "readout" => readout_instance(rng),
        "mlp_relu" => mlp_instance(rng, Activation::Relu),
        "mlp_elu" => mlp_instance(rng, Activation::Elu { alpha: 1.0 }),
        "mlp_leaky_relu" => mlp_instance(rng, Activation::LeakyRelu { slope: 0.01 }),
        "classification_loss" => classification_instance(rng),
        "aux_link_loss" => aux_instance(rng),
        other => unreachable!("unknown component {other}"),
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut components = Vec::with_capacity(COMPONENTS.len());
    for (ci, name) in COMPONENTS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(ci as u64 + 1);
        let flip = opts.inject_sign_flip && ci == 0;
        let mut worst: f64 = 0.0;
        for _ in 0..opts.instances {
            let inst = make_instance(name, &mut rng)?;
            worst = worst.max(inst.check(opts.step, flip)?);
        }
        components.push(ComponentResult {
            name: name.to_string(),
            instances: opts.instances,
            max_rel_err: worst,
            passed: worst < opts.tol,
        });
    }
    Ok(GradcheckReport {
        tol: opts.tol,
        components,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
