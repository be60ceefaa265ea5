//! Dense compute cores with sequential and rayon-parallel variants.
//!
//! Every parallel kernel assigns whole output rows to threads and keeps the
//! per-row arithmetic sequential, so results are bit-identical to the
//! sequential variant regardless of thread count. Public `_seq`/`_par` pairs
//! exist so the benchmark suite can compare both; the unsuffixed entry points
//! dispatch on a size threshold when the `parallel` feature is enabled.

use crate::graph::Adjacency;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which parallel dispatch is not worth
/// the fork-join overhead.
const PAR_THRESHOLD: usize = 1 << 15;

/// Neighbor combination rule for [`aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    Sum,
    Mean,
    Max,
}

/// Sentinel winner index for max-aggregation cells with no candidate.
pub const NO_WINNER: u32 = u32::MAX;

/// Negative slope of the leaky rectifier inside attention scores.
pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------- matmul --

pub fn matmul(a: &[f64], a_rows: usize, a_cols: usize, b: &[f64], b_cols: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if a_rows * a_cols * b_cols >= PAR_THRESHOLD {
        matmul_par(a, a_rows, a_cols, b, b_cols, out);
        return;
    }
    matmul_seq(a, a_rows, a_cols, b, b_cols, out);
}

pub fn matmul_seq(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    b: &[f64],
    b_cols: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), a_rows * a_cols);
    debug_assert_eq!(out.len(), a_rows * b_cols);
    for (r, out_row) in out.chunks_mut(b_cols).enumerate() {
        matmul_row(&a[r * a_cols..(r + 1) * a_cols], b, b_cols, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    b: &[f64],
    b_cols: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), a_rows * a_cols);
    debug_assert_eq!(out.len(), a_rows * b_cols);
    out.par_chunks_mut(b_cols).enumerate().for_each(|(r, out_row)| {
        matmul_row(&a[r * a_cols..(r + 1) * a_cols], b, b_cols, out_row);
    });
}

fn matmul_row(a_row: &[f64], b: &[f64], b_cols: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for (k, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[k * b_cols..(k + 1) * b_cols];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

// ------------------------------------------------------------- aggregate --

/// Combines weighted neighbor feature rows into one output row per node.
///
/// `weights` is indexed by graph edge id; self-loop entries use weight 1.
/// Mean divides by the sum of incident edge weights (zero sum gives a zero
/// row). Max compares weighted values per column, skips edges whose weight is
/// exactly zero, and breaks ties toward the lowest source id; the returned
/// winner vector holds, for every output cell, the index of the winning entry
/// within the node's adjacency list (only populated in max mode).
pub fn aggregate(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
) -> (Vec<f64>, Vec<u32>) {
    let n = adj.num_nodes();
    let mut out = vec![0.0; n * cols];
    let mut winners = if mode == AggMode::Max {
        vec![NO_WINNER; n * cols]
    } else {
        Vec::new()
    };

    #[cfg(feature = "parallel")]
    if adj.num_entries() * cols >= PAR_THRESHOLD {
        aggregate_par_into(feats, cols, weights, adj, mode, &mut out, &mut winners);
        return (out, winners);
    }
    aggregate_seq_into(feats, cols, weights, adj, mode, &mut out, &mut winners);
    (out, winners)
}

pub fn aggregate_seq(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
) -> (Vec<f64>, Vec<u32>) {
    let n = adj.num_nodes();
    let mut out = vec![0.0; n * cols];
    let mut winners = if mode == AggMode::Max {
        vec![NO_WINNER; n * cols]
    } else {
        Vec::new()
    };
    aggregate_seq_into(feats, cols, weights, adj, mode, &mut out, &mut winners);
    (out, winners)
}

#[cfg(feature = "parallel")]
pub fn aggregate_par(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
) -> (Vec<f64>, Vec<u32>) {
    let n = adj.num_nodes();
    let mut out = vec![0.0; n * cols];
    let mut winners = if mode == AggMode::Max {
        vec![NO_WINNER; n * cols]
    } else {
        Vec::new()
    };
    aggregate_par_into(feats, cols, weights, adj, mode, &mut out, &mut winners);
    (out, winners)
}

fn aggregate_seq_into(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
    out: &mut [f64],
    winners: &mut [u32],
) {
    for v in 0..adj.num_nodes() {
        let out_row = &mut out[v * cols..(v + 1) * cols];
        let win_row = if mode == AggMode::Max {
            &mut winners[v * cols..(v + 1) * cols]
        } else {
            &mut []
        };
        aggregate_node(v, feats, cols, weights, adj, mode, out_row, win_row);
    }
}

#[cfg(feature = "parallel")]
fn aggregate_par_into(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
    out: &mut [f64],
    winners: &mut [u32],
) {
    if mode == AggMode::Max {
        out.par_chunks_mut(cols)
            .zip(winners.par_chunks_mut(cols))
            .enumerate()
            .for_each(|(v, (out_row, win_row))| {
                aggregate_node(v, feats, cols, weights, adj, mode, out_row, win_row);
            });
    } else {
        out.par_chunks_mut(cols).enumerate().for_each(|(v, out_row)| {
            aggregate_node(v, feats, cols, weights, adj, mode, out_row, &mut []);
        });
    }
}

fn aggregate_node(
    v: usize,
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    mode: AggMode,
    out_row: &mut [f64],
    win_row: &mut [u32],
) {
    let entries = adj.entries(v);
    match mode {
        AggMode::Sum | AggMode::Mean => {
            let mut denom = 0.0;
            for entry in entries {
                let w = entry.kind.weight(weights);
                denom += w;
                if w == 0.0 {
                    continue;
                }
                let row = &feats[entry.src * cols..(entry.src + 1) * cols];
                for (o, &f) in out_row.iter_mut().zip(row) {
                    *o += w * f;
                }
            }
            if mode == AggMode::Mean {
                if denom == 0.0 {
                    out_row.fill(0.0);
                } else {
                    for o in out_row.iter_mut() {
                        *o /= denom;
                    }
                }
            }
        }
        AggMode::Max => {
            let mut best = vec![f64::NEG_INFINITY; cols];
            for (k, entry) in entries.iter().enumerate() {
                let w = entry.kind.weight(weights);
                if w == 0.0 {
                    continue;
                }
                let row = &feats[entry.src * cols..(entry.src + 1) * cols];
                for (j, &f) in row.iter().enumerate() {
                    let val = w * f;
                    if val > best[j] {
                        best[j] = val;
                        win_row[j] = k as u32;
                    }
                }
            }
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = if win_row[j] == NO_WINNER { 0.0 } else { best[j] };
            }
        }
    }
}

// --------------------------------------------------- attention aggregate --

/// Output of the attention-lite kernel: aggregated rows plus the per-entry
/// softmax weights and leaky-relu slopes needed by the backward pass.
pub struct AttentionForward {
    pub out: Vec<f64>,
    pub alphas: Vec<f64>,
    pub dscores: Vec<f64>,
}

/// Attention-lite aggregation: per incoming edge a score
/// `leaky_relu(a . [h_src || h_dst])` is softmax-normalized over the node's
/// neighborhood and applied to the weighted message `w * h_src`.
pub fn attention_aggregate(
    feats: &[f64],
    cols: usize,
    weights: &[f64],
    adj: &Adjacency,
    attn: &[f64],
) -> AttentionForward {
    debug_assert_eq!(attn.len(), 2 * cols);
    let n = adj.num_nodes();
    let mut out = vec![0.0; n * cols];
    let mut alphas = vec![0.0; adj.num_entries()];
    let mut dscores = vec![0.0; adj.num_entries()];
    let (a_left, a_right) = attn.split_at(cols);

    for v in 0..n {
        let entries = adj.entries(v);
        if entries.is_empty() {
            continue;
        }
        let range = adj.entry_range(v);
        let dst_row = &feats[v * cols..(v + 1) * cols];
        let right_score: f64 = a_right.iter().zip(dst_row).map(|(a, f)| a * f).sum();

        let mut max_score = f64::NEG_INFINITY;
        for (k, entry) in entries.iter().enumerate() {
            let src_row = &feats[entry.src * cols..(entry.src + 1) * cols];
            let left_score: f64 = a_left.iter().zip(src_row).map(|(a, f)| a * f).sum();
            let z = left_score + right_score;
            let (score, slope) = if z >= 0.0 { (z, 1.0) } else { (LEAKY_SLOPE * z, LEAKY_SLOPE) };
            alphas[range.start + k] = score;
            dscores[range.start + k] = slope;
            max_score = max_score.max(score);
        }

        let mut total = 0.0;
        for k in range.clone() {
            let e = (alphas[k] - max_score).exp();
            alphas[k] = e;
            total += e;
        }
        let out_row = &mut out[v * cols..(v + 1) * cols];
        for (k, entry) in entries.iter().enumerate() {
            let alpha = alphas[range.start + k] / total;
            alphas[range.start + k] = alpha;
            let w = entry.kind.weight(weights);
            if w == 0.0 {
                continue;
            }
            let src_row = &feats[entry.src * cols..(entry.src + 1) * cols];
            for (o, &f) in out_row.iter_mut().zip(src_row) {
                *o += alpha * w * f;
            }
        }
    }
    AttentionForward { out, alphas, dscores }
}
