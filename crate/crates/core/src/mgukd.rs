//! Masked-graph feature distillation.
//!
//! Student tokens at each tap layer become a similarity graph
//! ([`crate::graph`]); a random subset of nodes is zeroed and a two-layer
//! graph attention network reconstructs the full map at the teacher's width.
//! The distillation loss is the sum over tap layers of the mean squared
//! error between the teacher's map and the reconstruction.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{normalize_tap_layers, teacher_layer_for, LayerTapOutput, VitEncoder};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{build_graph_from_nodes, mask_nodes, FeatureGraph, DEFAULT_K, DEFAULT_MASK_RATIO};
use crate::nn::{leaky_relu, scalar_f64, softmax_last, to_vec_f64, Init, Linear, ParamStore};

/// Loss weight of the distillation term.
pub const DEFAULT_ALPHA: f64 = 2e-5;

/// Nonlinearity applied to the output layer's aggregated messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Elu,
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    /// Width of each head in the hidden layers (heads are concatenated).
    pub hidden_per_head: usize,
    pub leaky_slope: f64,
    pub output_activation: OutputActivation,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden_per_head: 32,
            leaky_slope: 0.2,
            output_activation: OutputActivation::Elu,
        }
    }
}

/// One attention head: shared map `W` and scorer `f_a(Wh_i ∥ Wh_j) = a·[Wh_i; Wh_j]`.
#[derive(Debug, Clone)]
pub struct GatHead {
    pub w: Tensor,
    pub a: Tensor,
    slope: f64,
}

impl GatHead {
    pub fn new(ps: &ParamStore, in_dim: usize, out_dim: usize, slope: f64) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let a_bound = (6.0 / (2 * out_dim + 1) as f64).sqrt();
        Ok(Self {
            w: ps.get("w", &[out_dim, in_dim], Init::Uniform(bound))?,
            a: ps.get("a", &[2 * out_dim], Init::Uniform(a_bound))?,
            slope,
        })
    }

    /// Head with explicit parameters: `w` is `(out, in)`, `a` is `(2·out)`.
    pub fn from_tensors(w: Tensor, a: Tensor, slope: f64) -> Result<Self> {
        let (out, _) = w.dims2()?;
        if a.dims1()? != 2 * out {
            return shape_err(format!("scorer width {} != 2 x {out}", a.dims1()?));
        }
        Ok(Self { w, a, slope })
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[1]
    }

    /// Projected nodes `(n, out)` and the row-stochastic attention `(n, n)`
    /// restricted to the edges encoded in `bias`.
    fn attend(&self, x: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, in_dim) = x.dims2()?;
        if in_dim != self.in_dim() {
            return shape_err(format!("node width {in_dim} does not match W input {}", self.in_dim()));
        }
        let out = self.out_dim();
        let wx = x.matmul(&self.w.t()?)?;
        let a_src = self.a.narrow(0, 0, out)?.unsqueeze(1)?;
        let a_dst = self.a.narrow(0, out, out)?.unsqueeze(1)?;
        let s_src = wx.matmul(&a_src)?;
        let s_dst = wx.matmul(&a_dst)?.t()?;
        let logits = leaky_relu(&s_src.broadcast_add(&s_dst)?, self.slope)?;
        let att = softmax_last(&(logits + bias)?)?;
        Ok((wx, att))
    }

    /// Aggregated messages `Σ_n a_in · W h_n` before the outer activation.
    pub fn aggregate(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (wx, att) = self.attend(x, bias)?;
        Ok(att.matmul(&wx)?)
    }
}

/// Attention weights of node `i` over its neighborhood (in the order of
/// `graph.neighbors[i]`), computed on the masked node features.
pub fn gat_attention(graph: &FeatureGraph, i: usize, head: &GatHead) -> Result<Vec<f64>> {
    if i >= graph.num_nodes() {
        return shape_err(format!("node {i} out of range for {} nodes", graph.num_nodes()));
    }
    let x = graph.masked_nodes()?;
    let bias = graph.adjacency_bias(x.dtype(), x.device())?;
    let (_, att) = head.attend(&x, &bias)?;
    let row = to_vec_f64(&att.get(i)?)?;
    Ok(graph.neighbors[i].iter().map(|&j| row[j]).collect())
}

#[derive(Debug, Clone)]
struct GatLayer {
    heads: Vec<GatHead>,
}

/// Multi-layer, multi-head graph attention network. Hidden layers
/// concatenate heads and apply LeakyReLU; the output layer averages heads and
/// applies the configured output activation.
#[derive(Debug, Clone)]
pub struct Gat {
    layers: Vec<GatLayer>,
    cfg: GatConfig,
}

impl Gat {
    pub fn new(ps: &ParamStore, cfg: &GatConfig, in_dim: usize, out_dim: usize) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 {
            return config_err("GAT needs at least one layer and one head");
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut width = in_dim;
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let head_out = if last { out_dim } else { cfg.hidden_per_head };
            let heads = (0..cfg.heads)
                .map(|h| GatHead::new(&ps.pp(format!("layers.{l}.heads.{h}")), width, head_out, cfg.leaky_slope))
                .collect::<Result<Vec<_>>>()?;
            layers.push(GatLayer { heads });
            width = cfg.heads * cfg.hidden_per_head;
        }
        Ok(Self { layers, cfg: cfg.clone() })
    }

    pub fn head(&self, layer: usize, head: usize) -> &GatHead {
        &self.layers[layer].heads[head]
    }

    /// Reconstruct every node of the masked graph: `(n, out_dim)`.
    pub fn reconstruct(&self, graph: &FeatureGraph) -> Result<Tensor> {
        let mut x = graph.masked_nodes()?;
        let bias = graph.adjacency_bias(x.dtype(), x.device())?;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let outs = layer
                .heads
                .iter()
                .map(|h| h.aggregate(&x, &bias))
                .collect::<Result<Vec<_>>>()?;
            if l + 1 < n_layers {
                x = leaky_relu(&Tensor::cat(&outs, 1)?, self.cfg.leaky_slope)?;
            } else {
                let mean = (Tensor::stack(&outs, 0)?.sum(0)? / outs.len() as f64)?;
                x = match self.cfg.output_activation {
                    OutputActivation::Elu => mean.elu(1.0)?,
                    OutputActivation::LeakyRelu => leaky_relu(&mean, self.cfg.leaky_slope)?,
                    OutputActivation::Identity => mean,
                };
            }
        }
        Ok(x)
    }
}

/// Per-tap-layer losses and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLossReport {
    pub per_layer: Vec<f64>,
    pub total: f64,
    pub alpha: f64,
    /// `alpha · total`
    pub weighted: f64,
}

impl DistillLossReport {
    pub fn zero(layers: usize, alpha: f64) -> Self {
        Self {
            per_layer: vec![0.0; layers],
            total: 0.0,
            alpha,
            weighted: 0.0,
        }
    }
}

/// Mean squared error over all elements of each layer pair, summed over
/// layers. Returns the differentiable total and the report.
pub fn mgukd_loss(teacher: &[Tensor], reconstructed: &[Tensor], alpha: f64) -> Result<(Tensor, DistillLossReport)> {
    if teacher.len() != reconstructed.len() || teacher.is_empty() {
        return shape_err(format!(
            "{} teacher layers vs {} reconstructed layers",
            teacher.len(),
            reconstructed.len()
        ));
    }
    let mut per_layer = Vec::with_capacity(teacher.len());
    let mut tensors = Vec::with_capacity(teacher.len());
    for (t, r) in teacher.iter().zip(reconstructed) {
        if t.dims() != r.dims() {
            return shape_err(format!("teacher {:?} vs reconstruction {:?}", t.dims(), r.dims()));
        }
        let mse = (t - r)?.sqr()?.mean_all()?;
        per_layer.push(scalar_f64(&mse)?);
        tensors.push(mse);
    }
    let total_t = Tensor::stack(&tensors, 0)?.sum_all()?;
    let total: f64 = per_layer.iter().sum();
    Ok((
        total_t,
        DistillLossReport {
            per_layer,
            total,
            alpha,
            weighted: alpha * total,
        },
    ))
}

/// Which feature-distillation objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Masked graph reconstruction with a GAT.
    MgUkd,
    /// No graph, no masking: per-token linear projection to the teacher width.
    PlainMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// 1-indexed student layers to align.
    pub tap_layers: Vec<usize>,
    pub k: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub gat: GatConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::MgUkd,
            tap_layers: vec![1, 2, 3, 4],
            k: DEFAULT_K,
            mask_ratio: DEFAULT_MASK_RATIO,
            alpha: DEFAULT_ALPHA,
            gat: GatConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
enum Reconstructor {
    Gat(Gat),
    Linear(Linear),
}

/// Reconstruction heads for every tap layer (parameters are independent per
/// layer) plus the teacher/student layer pairing.
#[derive(Debug, Clone)]
pub struct Distiller {
    cfg: DistillConfig,
    /// `(student layer, teacher layer)`, both 1-indexed, ascending.
    pairs: Vec<(usize, usize)>,
    heads: Vec<Reconstructor>,
}

/// Seed for masking image `b` at tap `l` of a step.
pub fn mask_seed(step_seed: u64, image: usize, layer: usize) -> u64 {
    step_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((image as u64) << 20)
        .wrapping_add(layer as u64)
}

impl Distiller {
    pub fn new(
        ps: &ParamStore,
        cfg: &DistillConfig,
        student_dim: usize,
        teacher_dim: usize,
        depth_s: usize,
        depth_t: usize,
    ) -> Result<Self> {
        let layers = normalize_tap_layers(&cfg.tap_layers, depth_s)?;
        if !(0.0..=1.0).contains(&cfg.mask_ratio) {
            return config_err(format!("mask ratio {} outside [0, 1]", cfg.mask_ratio));
        }
        if cfg.alpha < 0.0 {
            return config_err("alpha must be non-negative");
        }
        let pairs: Vec<(usize, usize)> = layers
            .iter()
            .map(|&l| (l, teacher_layer_for(l, depth_t, depth_s)))
            .collect();
        let heads = pairs
            .iter()
            .map(|&(l, _)| {
                let scope = ps.pp(format!("tap{l}"));
                Ok(match cfg.mode {
                    DistillMode::MgUkd => Reconstructor::Gat(Gat::new(&scope, &cfg.gat, student_dim, teacher_dim)?),
                    DistillMode::PlainMse => Reconstructor::Linear(Linear::new(&scope.pp("proj"), student_dim, teacher_dim)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            pairs,
            heads,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Reconstruct tap `idx` for one image's `(n, c_s)` student nodes.
    pub fn reconstruct(&self, idx: usize, nodes: &Tensor, h: usize, w: usize, seed: u64) -> Result<Tensor> {
        match &self.heads[idx] {
            Reconstructor::Gat(gat) => {
                let graph = build_graph_from_nodes(nodes.clone(), h, w, self.cfg.k)?;
                let graph = mask_nodes(&graph, self.cfg.mask_ratio, seed)?;
                gat.reconstruct(&graph)
            }
            Reconstructor::Linear(proj) => proj.forward(nodes),
        }
    }

    /// Distillation loss for a batch. Teacher maps are detached.
    pub fn loss(&self, teacher: &LayerTapOutput, student: &LayerTapOutput, step_seed: u64) -> Result<(Tensor, DistillLossReport)> {
        let mut targets = Vec::with_capacity(self.pairs.len());
        let mut recons = Vec::with_capacity(self.pairs.len());
        for (idx, &(ls, lt)) in self.pairs.iter().enumerate() {
            let s = student.layer(ls).ok_or_else(|| crate::Error::Config(format!("student has no layer {ls}")))?;
            let t = teacher.layer(lt).ok_or_else(|| crate::Error::Config(format!("teacher has no layer {lt}")))?;
            if (s.h, s.w) != (t.h, t.w) || s.batch() != t.batch() {
                return shape_err("teacher and student token grids differ");
            }
            let per_image = (0..s.batch())
                .map(|b| {
                    let nodes = s.tokens.get(b)?;
                    self.reconstruct(idx, &nodes, s.h, s.w, mask_seed(step_seed, b, ls))
                })
                .collect::<Result<Vec<_>>>()?;
            recons.push(Tensor::stack(&per_image, 0)?);
            targets.push(t.tokens.detach());
        }
        mgukd_loss(&targets, &recons, self.cfg.alpha)
    }
}

/// Output of one distillation forward pass.
#[derive(Debug, Clone)]
pub struct DistillStep {
    pub student_taps: LayerTapOutput,
    pub loss: Tensor,
    pub report: DistillLossReport,
}

/// Run both encoders on `images`, reconstruct the student's tap layers and
/// score them against the frozen teacher. The student taps are returned for
/// the task heads; only the student and distiller receive gradients.
pub fn distill_step(
    images: &Tensor,
    teacher: &VitEncoder,
    student: &VitEncoder,
    distiller: &Distiller,
    step_seed: u64,
) -> Result<DistillStep> {
    let teacher_taps = teacher.encode(&images.detach())?;
    let teacher_taps = LayerTapOutput {
        maps: teacher_taps.maps.iter().map(|m| m.detach()).collect(),
    };
    let student_taps = student.encode(images)?;
    let (loss, report) = distiller.loss(&teacher_taps, &student_taps, step_seed)?;
    Ok(DistillStep {
        student_taps,
        loss,
        report,
    })
}

/// Scalar tensor zero of the given dtype, for runs without distillation.
pub fn zero_loss(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph_from_nodes;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn singleton_neighborhood_weight_is_one() {
        // Orthogonal nodes with k = 1: each node is its own only neighbor.
        let g = build_graph_from_nodes(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]), 2, 1, 1).unwrap();
        let head = GatHead::new(&ParamStore::new(0, DType::F64), 2, 3, 0.2).unwrap();
        assert_eq!(gat_attention(&g, 0, &head).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_neighbors_get_uniform_weights() {
        let g = build_graph_from_nodes(t(&[0.4, -0.2].repeat(5), &[5, 2]), 5, 1, 2).unwrap();
        let head = GatHead::new(&ParamStore::new(3, DType::F64), 2, 4, 0.2).unwrap();
        let w = gat_attention(&g, 2, &head).unwrap();
        assert_eq!(w.len(), 5);
        for v in w {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_three_node_case() {
        let nodes = [[1.0, 0.5], [0.2, -0.7], [0.9, 0.8]];
        let flat: Vec<f64> = nodes.iter().flatten().copied().collect();
        let g = build_graph_from_nodes(t(&flat, &[3, 2]), 3, 1, 3).unwrap();
        let head = GatHead::from_tensors(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]), t(&[1.0; 4], &[4]), 0.2).unwrap();
        let w = gat_attention(&g, 0, &head).unwrap();
        // e_0j = LeakyReLU(sum(H_0) + sum(H_j)) with slope 0.2
        let lrelu = |x: f64| if x > 0.0 { x } else { 0.2 * x };
        let e: Vec<f64> = nodes.iter().map(|n| lrelu(1.5 + n[0] + n[1])).collect();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        for (j, wj) in w.iter().enumerate() {
            assert!((wj - e[j].exp() / z).abs() < 1e-9);
        }
        // a negative logit exercises the leaky branch
        let w1 = gat_attention(&g, 1, &head).unwrap();
        let e1: Vec<f64> = g.neighbors[1].iter().map(|&j| lrelu(-0.5 + nodes[j][0] + nodes[j][1])).collect();
        let z1: f64 = e1.iter().map(|v| v.exp()).sum();
        for (wj, ej) in w1.iter().zip(&e1) {
            assert!((wj - ej.exp() / z1).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let ps = ParamStore::new(0, DType::F64);
        let gat = Gat::new(&ps, &GatConfig::default(), 4, 6).unwrap();
        for (name, _) in ps.vars() {
            let var = ps.var(&name).unwrap();
            ps.set(&name, &var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let nodes = Tensor::randn(0f64, 1.0, (9, 4), &Device::Cpu).unwrap();
        let g = build_graph_from_nodes(nodes, 3, 3, 3).unwrap();
        let out = gat.reconstruct(&g).unwrap();
        assert_eq!(out.dims(), &[9, 6]);
        assert!(to_vec_f64(&out).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_identities() {
        let a = Tensor::randn(0f64, 1.0, (1, 4, 3), &Device::Cpu).unwrap();
        let layers = vec![a.clone(), (&a * 2.0).unwrap(), a.neg().unwrap(), a.clone()];
        let (_, zero) = mgukd_loss(&layers, &layers, 1.0).unwrap();
        assert_eq!(zero.total, 0.0);
        let delta = 0.125;
        let shifted: Vec<Tensor> = layers.iter().map(|l| (l + delta).unwrap()).collect();
        let (_, rep) = mgukd_loss(&layers, &shifted, DEFAULT_ALPHA).unwrap();
        for v in &rep.per_layer {
            assert!((v - delta * delta).abs() < 1e-9);
        }
        assert!((rep.total - 4.0 * delta * delta).abs() < 1e-9);
        assert_eq!(rep.total, rep.per_layer.iter().sum::<f64>());
        assert!(mgukd_loss(&layers[..2], &shifted, 1.0).is_err());
    }

    #[test]
    fn brute_force_mse() {
        let a = Tensor::randn(0f64, 1.0, (2, 2, 3), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 2, 3), &Device::Cpu).unwrap();
        let (_, rep) = mgukd_loss(&[a.clone()], &[b.clone()], 1.0).unwrap();
        let av = to_vec_f64(&a).unwrap();
        let bv = to_vec_f64(&b).unwrap();
        let mut s = 0.0;
        for i in 0..12 {
            s += (av[i] - bv[i]) * (av[i] - bv[i]);
        }
        assert!((rep.per_layer[0] - s / 12.0).abs() < 1e-12);
    }
}
