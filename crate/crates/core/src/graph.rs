//! Feature graphs over encoder tokens.
//!
//! Every token of a feature map is a node. Node `n` is a neighbor of `i`
//! when their cosine similarity is at least `θ_k(i)`, the similarity of `i`
//! to its k-th most similar node (itself included). Ties at the threshold
//! are all kept, so a neighborhood may hold more than `k` nodes.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::FeatureMap;
use crate::error::{config_err, shape_err, Result};
use crate::nn::to_vec_f64;

pub const DEFAULT_K: usize = 11;
pub const DEFAULT_MASK_RATIO: f64 = 0.65;
/// Floor for the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Additive attention bias for non-edges.
const NON_EDGE: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct FeatureGraph {
    /// Node features `(h·w, c)`, still attached to the autograd graph.
    pub nodes: Tensor,
    pub h: usize,
    pub w: usize,
    /// Neighbor indices per node, ascending.
    pub neighbors: Vec<Vec<usize>>,
    pub masked: Vec<bool>,
    pub mask_fill: f64,
    /// Neighbor rank actually used (after clamping to the node count).
    pub k: usize,
}

#[derive(Serialize)]
struct DebugDump<'a> {
    h: usize,
    w: usize,
    k: usize,
    neighbors: &'a [Vec<usize>],
    masked: Vec<usize>,
}

impl FeatureGraph {
    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Node features with masked rows replaced by `mask_fill`.
    pub fn masked_nodes(&self) -> Result<Tensor> {
        if self.num_masked() == 0 {
            return Ok(self.nodes.clone());
        }
        let n = self.num_nodes();
        let keep: Vec<f64> = self.masked.iter().map(|m| if *m { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (n, 1), self.nodes.device())?.to_dtype(self.nodes.dtype())?;
        let mut out = self.nodes.broadcast_mul(&keep)?;
        if self.mask_fill != 0.0 {
            let fill: Vec<f64> = self
                .masked
                .iter()
                .map(|m| if *m { self.mask_fill } else { 0.0 })
                .collect();
            let fill = Tensor::from_vec(fill, (n, 1), self.nodes.device())?.to_dtype(self.nodes.dtype())?;
            out = out.broadcast_add(&fill)?;
        }
        Ok(out)
    }

    /// `(n, n)` additive attention bias: 0 on edges, a large negative value
    /// elsewhere.
    pub fn adjacency_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.num_nodes();
        let mut bias = vec![NON_EDGE; n * n];
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                bias[i * n + j] = 0.0;
            }
        }
        Ok(Tensor::from_vec(bias, (n, n), device)?.to_dtype(dtype)?)
    }

    /// Adjacency and mask as JSON, for inspection only.
    pub fn to_debug_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DebugDump {
            h: self.h,
            w: self.w,
            k: self.k,
            neighbors: &self.neighbors,
            masked: self.masked_indices(),
        })?)
    }
}

/// Pairwise cosine similarities of `n` row vectors of width `c`, clamped to
/// `[-1, 1]`; non-zero nodes have self-similarity exactly 1, zero nodes have
/// similarity 0 to everything.
pub fn cosine_similarity_matrix(values: &[f64], n: usize, c: usize) -> Vec<f64> {
    let norms: Vec<f64> = (0..n)
        .map(|i| values[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        let a = &values[i * c..(i + 1) * c];
        for j in i..n {
            let b = &values[j * c..(j + 1) * c];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let s = if i == j && norms[i] > 0.0 {
                1.0
            } else {
                (dot / (norms[i] * norms[j]).max(COSINE_EPS)).clamp(-1.0, 1.0)
            };
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    sim
}

/// Neighborhoods from a similarity matrix with the top-k-with-ties rule.
pub fn neighborhoods(sim: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut row = vec![0.0; n];
    (0..n)
        .map(|i| {
            row.copy_from_slice(&sim[i * n..(i + 1) * n]);
            row.sort_by(|a, b| b.total_cmp(a));
            let theta = row[k - 1];
            (0..n).filter(|&j| sim[i * n + j] >= theta).collect()
        })
        .collect()
}

/// Build the similarity graph of a single-image feature map (batch of one).
pub fn build_graph(feature: &FeatureMap, k: usize) -> Result<FeatureGraph> {
    if feature.batch() != 1 {
        return shape_err(format!("build_graph takes one image, got batch {}", feature.batch()));
    }
    let nodes = feature.tokens.squeeze(0)?;
    build_graph_from_nodes(nodes, feature.h, feature.w, k)
}

/// Build from an `(h·w, c)` node matrix.
pub fn build_graph_from_nodes(nodes: Tensor, h: usize, w: usize, k: usize) -> Result<FeatureGraph> {
    let (n, c) = nodes.dims2()?;
    if n == 0 || c == 0 || n != h * w {
        return shape_err(format!("cannot build a {h}x{w} graph from {n} nodes of width {c}"));
    }
    if k == 0 {
        return config_err("neighbor rank k must be at least 1");
    }
    let k_eff = if k > n {
        log::warn!("k = {k} exceeds the {n} graph nodes; clamping to {n}");
        n
    } else {
        k
    };
    let values = to_vec_f64(&nodes.detach())?;
    let sim = cosine_similarity_matrix(&values, n, c);
    let neighbors = neighborhoods(&sim, n, k_eff);
    Ok(FeatureGraph {
        nodes,
        h,
        w,
        neighbors,
        masked: vec![false; n],
        mask_fill: 0.0,
        k: k_eff,
    })
}

/// Number of nodes masked at `ratio`: `floor(ratio · n)`.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    // The small slack keeps products like 0.29 · 100 from flooring to 28.
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Mask `floor(ratio · n)` nodes chosen uniformly without replacement.
/// Neighborhoods are left as built from the unmasked features.
pub fn mask_nodes(graph: &FeatureGraph, ratio: f64, seed: u64) -> Result<FeatureGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return config_err(format!("mask ratio {ratio} outside [0, 1]"));
    }
    let n = graph.num_nodes();
    let count = mask_count(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, count) {
        masked[i] = true;
    }
    Ok(FeatureGraph {
        masked,
        mask_fill: 0.0,
        ..graph.clone()
    })
}
