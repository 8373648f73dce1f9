//! Graphviz export of the coarsened graphs produced by a forward pass.

use std::fmt::Write as _;

use crate::model::Evaluation;
use crate::tensor::Tensor;

/// One undirected DOT graph. Nodes are labelled with their original ids;
/// nodes in `dropped` are filled black.
pub fn graph_to_dot(name: &str, adjacency: &Tensor, node_ids: &[usize], dropped: &[bool]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "graph {name} {{");
    out.push_str("  node [shape=circle, style=filled, fillcolor=white, fontcolor=black];\n");
    for (i, &id) in node_ids.iter().enumerate() {
        if dropped.get(i).copied().unwrap_or(false) {
            let _ = writeln!(
                out,
                "  n{id} [label=\"{id}\", fillcolor=black, fontcolor=white];"
            );
        } else {
            let _ = writeln!(out, "  n{id} [label=\"{id}\"];");
        }
    }
    let n = node_ids.len();
    for i in 0..n {
        for j in i + 1..n {
            if adjacency.get(i, j) != 0.0 {
                let _ = writeln!(out, "  n{} -- n{};", node_ids[i], node_ids[j]);
            }
        }
    }
    out.push_str("}\n");
    out
}

/// One DOT document per stage, input graph first. Within each document the
/// nodes the next pooling layer discards are marked.
pub fn stages_to_dot(eval: &Evaluation) -> Vec<String> {
    let stages = eval.stage_adjacency.len();
    (0..stages)
        .map(|s| {
            let nodes = &eval.stage_nodes[s];
            let mut dropped = vec![false; nodes.len()];
            if let Some(sel) = eval.selections.get(s) {
                dropped.iter_mut().for_each(|d| *d = true);
                for &i in sel {
                    dropped[i] = false;
                }
            }
            graph_to_dot(&format!("stage{s}"), &eval.stage_adjacency[s], nodes, &dropped)
        })
        .collect()
}
