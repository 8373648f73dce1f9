//! TU-format graph datasets.
//!
//! A dataset `NAME` lives in a directory holding:
//!
//! - `NAME_A.txt`: one `i, j` edge per line, 1-indexed global node ids
//! - `NAME_graph_indicator.txt`: line `k` is the graph id of node `k`
//! - `NAME_graph_labels.txt`: line `g` is the class of graph `g`
//! - `NAME_node_labels.txt` (optional): line `k` is the label of node `k`
//!
//! Separators are a comma with optional whitespace; LF and CRLF are both
//! accepted. Edge and attribute files other than these are ignored.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// `n x n`, symmetric, `{0, 1}`, zero diagonal.
    pub adjacency: Tensor,
    /// `n x d`.
    pub features: Tensor,
    pub label: usize,
    pub node_labels: Option<Vec<i64>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list over `n` nodes.
    /// Self-loops are dropped and duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], label: usize) -> Result<Self> {
        let mut adjacency = Tensor::zeros(n, n);
        for &(a, b) in edges {
            for x in [a, b] {
                if x >= n {
                    return Err(Error::IndexOutOfRange {
                        op: "from_edges",
                        index: x,
                        len: n,
                    });
                }
            }
            if a != b {
                adjacency.set(a, b, 1.0);
                adjacency.set(b, a, 1.0);
            }
        }
        Ok(Self {
            adjacency,
            features: Tensor::zeros(n, 0),
            label,
            node_labels: None,
        })
    }

    pub fn with_features(mut self, features: Tensor) -> Self {
        debug_assert_eq!(features.rows(), self.num_nodes());
        self.features = features;
        self
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn degrees(&self) -> Vec<usize> {
        degrees(&self.adjacency)
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.get(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

pub fn degrees(adjacency: &Tensor) -> Vec<usize> {
    (0..adjacency.rows())
        .map(|i| adjacency.row(i).iter().filter(|&&v| v != 0.0).count())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    NodeLabelOnehot,
    DegreeOnehot,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn mean_nodes(&self) -> f64 {
        let total: usize = self.graphs.iter().map(Graph::num_nodes).sum();
        total as f64 / self.graphs.len().max(1) as f64
    }

    pub fn has_node_labels(&self) -> bool {
        self.graphs.iter().all(|g| g.node_labels.is_some())
    }

    /// Replaces node features with one-hot encodings.
    pub fn build_features(mut self, mode: FeatureMode) -> Result<Self> {
        match mode {
            FeatureMode::NodeLabelOnehot => {
                if !self.has_node_labels() {
                    return Err(Error::Dataset(format!(
                        "{}: node_label_onehot requires a node label file",
                        self.name
                    )));
                }
                let set: BTreeSet<i64> = self
                    .graphs
                    .iter()
                    .flat_map(|g| g.node_labels.iter().flatten().copied())
                    .collect();
                let column: HashMap<i64, usize> =
                    set.iter().enumerate().map(|(i, &l)| (l, i)).collect();
                let d = set.len();
                for g in &mut self.graphs {
                    let labels = g.node_labels.as_ref().expect("checked above");
                    let mut f = Tensor::zeros(labels.len(), d);
                    for (r, l) in labels.iter().enumerate() {
                        f.set(r, column[l], 1.0);
                    }
                    g.features = f;
                }
                self.feature_dim = d;
            }
            FeatureMode::DegreeOnehot => {
                let max_degree = self
                    .graphs
                    .iter()
                    .flat_map(|g| g.degrees())
                    .max()
                    .unwrap_or(0);
                let d = max_degree + 1;
                for g in &mut self.graphs {
                    let deg = g.degrees();
                    let mut f = Tensor::zeros(deg.len(), d);
                    for (r, &k) in deg.iter().enumerate() {
                        f.set(r, k, 1.0);
                    }
                    g.features = f;
                }
                self.feature_dim = d;
            }
        }
        Ok(self)
    }

    /// Feature mode used by default: node labels when available.
    pub fn default_feature_mode(&self) -> FeatureMode {
        if self.has_node_labels() {
            FeatureMode::NodeLabelOnehot
        } else {
            FeatureMode::DegreeOnehot
        }
    }
}

fn file_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_required(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_int(path: &Path, line: usize, tok: &str) -> Result<i64> {
    tok.trim().parse::<i64>().map_err(|_| Error::Parse {
        file: path.to_path_buf(),
        line,
        msg: format!("expected an integer, found {:?}", tok.trim()),
    })
}

fn single_column(path: &Path) -> Result<Vec<(usize, i64)>> {
    let text = read_required(path)?;
    lines(&text)
        .map(|(ln, l)| {
            // some node label files carry extra columns; the first is the label
            let tok = l.split(',').next().unwrap_or(l);
            Ok((ln, parse_int(path, ln, tok)?))
        })
        .collect()
}

/// Reads `dir/NAME_*.txt` into a dataset with empty (`n x 0`) features.
pub fn parse_tu_dataset(dir: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ind_path = file_path(dir, name, "graph_indicator");
    let gl_path = file_path(dir, name, "graph_labels");
    let a_path = file_path(dir, name, "A");
    let nl_path = file_path(dir, name, "node_labels");

    let indicator = single_column(&ind_path)?;
    let graph_labels = single_column(&gl_path)?;
    let a_text = read_required(&a_path)?;
    let node_labels = if nl_path.exists() {
        Some(single_column(&nl_path)?)
    } else {
        None
    };

    let num_graphs = graph_labels.len();
    if num_graphs == 0 {
        return Err(Error::Dataset(format!("{name}: no graphs")));
    }

    // node k -> (graph, local index)
    let mut placement = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; num_graphs];
    for &(ln, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Parse {
                file: ind_path.clone(),
                line: ln,
                msg: format!("graph id {gid} out of range 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        placement.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Dataset(format!("{name}: graph {} has no nodes", g + 1)));
    }
    let num_nodes = placement.len();

    if let Some(nl) = &node_labels {
        if nl.len() != num_nodes {
            return Err(Error::Parse {
                file: nl_path.clone(),
                line: nl.last().map_or(1, |x| x.0),
                msg: format!("{} node labels for {num_nodes} nodes", nl.len()),
            });
        }
    }

    let mut adjacency: Vec<Tensor> = sizes.iter().map(|&s| Tensor::zeros(s, s)).collect();
    for (ln, l) in lines(&a_text) {
        let mut toks = l.split(',');
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(Error::Parse {
                file: a_path.clone(),
                line: ln,
                msg: "expected `i, j`".into(),
            });
        };
        let mut ids = [0usize; 2];
        for (slot, tok) in ids.iter_mut().zip([a, b]) {
            let v = parse_int(&a_path, ln, tok)?;
            if v < 1 || v as usize > num_nodes {
                return Err(Error::Parse {
                    file: a_path.clone(),
                    line: ln,
                    msg: format!("node id {v} out of range 1..={num_nodes}"),
                });
            }
            *slot = v as usize - 1;
        }
        let (ga, ia) = placement[ids[0]];
        let (gb, ib) = placement[ids[1]];
        if ga != gb {
            return Err(Error::Parse {
                file: a_path.clone(),
                line: ln,
                msg: format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            });
        }
        if ia != ib {
            adjacency[ga].set(ia, ib, 1.0);
            adjacency[ga].set(ib, ia, 1.0);
        }
    }

    // class ids by first occurrence
    let mut class_of: HashMap<i64, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(num_graphs);
    for &(_, raw) in &graph_labels {
        let next = class_of.len();
        labels.push(*class_of.entry(raw).or_insert(next));
    }

    let mut per_graph_node_labels: Option<Vec<Vec<i64>>> = node_labels
        .as_ref()
        .map(|_| sizes.iter().map(|&s| Vec::with_capacity(s)).collect());
    if let (Some(nl), Some(out)) = (&node_labels, per_graph_node_labels.as_mut()) {
        for (k, &(_, l)) in nl.iter().enumerate() {
            out[placement[k].0].push(l);
        }
    }

    let graphs = adjacency
        .into_iter()
        .enumerate()
        .map(|(g, adj)| {
            let n = adj.rows();
            Graph {
                adjacency: adj,
                features: Tensor::zeros(n, 0),
                label: labels[g],
                node_labels: per_graph_node_labels.as_mut().map(|v| std::mem::take(&mut v[g])),
            }
        })
        .collect();

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_of.len(),
        feature_dim: 0,
    })
}

/// Writes a dataset back out in TU format (class ids become graph labels).
pub fn write_tu_dataset(d: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut gl = String::new();
    let mut nl = String::new();
    let mut offset = 0;
    for (g, graph) in d.graphs.iter().enumerate() {
        let n = graph.num_nodes();
        for _ in 0..n {
            ind.push_str(&format!("{}\n", g + 1));
        }
        for (i, j) in graph.edges() {
            a.push_str(&format!("{}, {}\n", offset + i + 1, offset + j + 1));
            a.push_str(&format!("{}, {}\n", offset + j + 1, offset + i + 1));
        }
        if let Some(labels) = &graph.node_labels {
            for l in labels {
                nl.push_str(&format!("{l}\n"));
            }
        }
        gl.push_str(&format!("{}\n", graph.label));
        offset += n;
    }
    let write = |suffix: &str, body: &str| {
        let p = file_path(dir, &d.name, suffix);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &gl)?;
    if d.has_node_labels() {
        write("node_labels", &nl)?;
    }
    Ok(())
}

/// Ten disjoint test folds covering every graph index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Stratified 10-fold split: each class is shuffled with the seed and dealt
/// round-robin, the deal position carrying over between classes.
pub fn make_folds(d: &Dataset, seed: u64) -> Result<FoldPlan> {
    make_folds_for_labels(&d.labels(), d.num_classes, seed)
}

pub fn make_folds_for_labels(labels: &[usize], num_classes: usize, seed: u64) -> Result<FoldPlan> {
    if labels.len() < NUM_FOLDS {
        return Err(Error::Dataset(format!(
            "need at least {NUM_FOLDS} graphs for cross-validation, have {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    let mut cursor = 0;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[cursor % NUM_FOLDS].push(i);
            cursor += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { seed, folds })
}
