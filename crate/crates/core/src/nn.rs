//! Small neural-network building blocks on top of candle.
//!
//! Parameters live in a [`ParamStore`], which names every tensor with a
//! dotted path (`student.encoder.blocks.0.attn.q.weight`) and initializes it
//! from a per-name seeded stream so model construction is reproducible and
//! independent of creation order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Result};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

#[derive(Debug)]
struct StoreInner {
    seed: u64,
    dtype: DType,
    device: Device,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

/// Named, seeded parameter storage shared by every module of one model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                seed,
                dtype,
                device: Device::Cpu,
                trainable: true,
                vars: BTreeMap::new(),
            })),
            prefix: String::new(),
        }
    }

    /// A store whose tensors are detached from the autograd graph. Used for
    /// frozen teachers: no gradient can ever reach these parameters.
    pub fn frozen(seed: u64, dtype: DType) -> Self {
        let store = Self::new(seed, dtype);
        store.inner.lock().unwrap().trainable = false;
        store
    }

    /// Sub-scope with `name` appended to the path.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.lock().unwrap().trainable
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Fetch (creating on first use) the parameter `name` in this scope.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(&full) {
            if var.dims() != shape {
                return shape_err(format!(
                    "parameter {full} has shape {:?}, requested {:?}",
                    var.dims(),
                    shape
                ));
            }
            return Ok(if inner.trainable {
                var.as_tensor().clone()
            } else {
                var.as_tensor().detach()
            });
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ fnv1a(full.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if inner.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(k, _)| self.prefix.is_empty() || k.strip_prefix(&self.prefix).is_some_and(|rest| rest.starts_with('.')))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    /// Overwrite the value of an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        match inner.vars.get(name) {
            Some(var) => {
                if var.dims() != value.dims() {
                    return shape_err(format!(
                        "parameter {name} has shape {:?}, value {:?}",
                        var.dims(),
                        value.dims()
                    ));
                }
                var.set(&value.to_dtype(inner.dtype)?)?;
                Ok(())
            }
            None => shape_err(format!("unknown parameter {name}")),
        }
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Affine map `y = x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(ps.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn no_bias(ps: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// 2-D convolution over NCHW input, stride 1, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?,
            bias: ps.get("bias", &[out_ch], Init::Zeros)?,
            padding: kernel / 2,
        })
    }

    /// Computed as shifted copies of the padded input followed by one
    /// matmul, whose backward pass is much cheaper than the native conv's.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out, in_ch, k, _) = self.weight.dims4()?;
        if c != in_ch {
            return shape_err(format!("conv expects {in_ch} channels, got {c}"));
        }
        let p = self.padding;
        let cols = if k == 1 {
            x.clone()
        } else {
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut shifted = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    shifted.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            Tensor::cat(&shifted, 1)?
        };
        let cols = cols.reshape((b, k * k * c, h * w))?;
        let wm = self.weight.permute((0, 2, 3, 1))?.reshape((out, k * k * c))?;
        let y = wm.broadcast_matmul(&cols)?.reshape((b, out, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

impl Conv2d {
    /// Convolution over the grids `A·x` for a linear map `A` of shape
    /// `(g·oh·ow, n)` (`g` stacked `oh × ow` grids) and channels-last `x` of
    /// shape `(n, c)` or `(b, n, c)`. Returns `(.., g·oh·ow, out)`.
    /// The kernel is applied per node before `A`, so no `c`-channel grid is
    /// ever materialized.
    pub fn forward_linear_input(&self, x: &Tensor, a: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        let (out, c, k, _) = self.weight.dims4()?;
        let dims = x.dims().to_vec();
        let (b, n, xc) = match dims.as_slice() {
            [n, xc] => (1, *n, *xc),
            [b, n, xc] => (*b, *n, *xc),
            _ => return shape_err(format!("expected (n, c) or (b, n, c), got {dims:?}")),
        };
        if xc != c {
            return shape_err(format!("conv expects {c} channels, got {xc}"));
        }
        let (rows, an) = a.dims2()?;
        if an != n || oh * ow == 0 || rows % (oh * ow) != 0 {
            return shape_err(format!("linear map {:?} does not fit {n} nodes and {oh}x{ow} grids", a.dims()));
        }
        let g = rows / (oh * ow);
        let wr = self.weight.permute((1, 2, 3, 0))?.reshape((c, k * k * out))?;
        let proj = x.reshape((b, n, c))?.broadcast_matmul(&wr)?;
        let z = a.broadcast_matmul(&proj)?.reshape((b * g, oh, ow, k * k, out))?;
        let y = neighborhood_sum(&z, k)?
            .reshape((b, rows, out))?
            .broadcast_add(&self.bias)?;
        Ok(if dims.len() == 2 { y.reshape((rows, out))? } else { y })
    }

    /// 1×1 convolution over channels-last input `(.., c)`.
    pub fn forward_pointwise(&self, x: &Tensor) -> Result<Tensor> {
        let (out, c, k, _) = self.weight.dims4()?;
        if k != 1 {
            return shape_err("pointwise forward needs a 1x1 kernel");
        }
        let w = self.weight.reshape((out, c))?.t()?;
        Ok(x.broadcast_matmul(&w)?.broadcast_add(&self.bias)?)
    }
}

/// Sum over `k × k` neighborhoods with one slice per offset:
/// `out[b, i, j, :] = Σ_{dy,dx} z[b, i + dy − k/2, j + dx − k/2, dy·k + dx, :]`,
/// terms off the grid omitted. `z`: `(b, h, w, k·k, o)`, result `(b, h, w, o)`.
///
/// Together with per-offset channel projections this is a zero-padded
/// `k × k` convolution; the op exists because its backward pass is a
/// single scatter instead of the many full-size copies autograd would
/// build from shifted slices.
pub fn neighborhood_sum(z: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, _, kk, _) = z.dims5()?;
    if kk != k * k {
        return shape_err(format!("neighborhood sum over {k}x{k} needs {} offsets, got {kk}", k * k));
    }
    Ok(z.contiguous()?.apply_op1(NeighborhoodOp { k, spread: false })?)
}

/// Forward and transpose of [`neighborhood_sum`]; each is the other's
/// gradient.
struct NeighborhoodOp {
    k: usize,
    spread: bool,
}

impl NeighborhoodOp {
    fn run<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], dims: &[usize]) -> (Vec<T>, Vec<usize>) {
        let k = self.k;
        let p = (k / 2) as isize;
        let (b, h, w) = (dims[0], dims[1], dims[2]);
        let o = dims[dims.len() - 1];
        let kk = k * k;
        let mut out = vec![T::default(); if self.spread { b * h * w * kk * o } else { b * h * w * o }];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let cell = (bi * h + i) * w + j;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (si, sj) = (i as isize + dy as isize - p, j as isize + dx as isize - p);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let src_cell = (bi * h + si as usize) * w + sj as usize;
                            let off = dy * k + dx;
                            if self.spread {
                                // grad of z[src_cell, off] is grad_out[cell]
                                let d = (src_cell * kk + off) * o;
                                for c in 0..o {
                                    out[d + c] += src[cell * o + c];
                                }
                            } else {
                                let s = (src_cell * kk + off) * o;
                                for c in 0..o {
                                    out[cell * o + c] += src[s + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if self.spread { vec![b, h, w, kk, o] } else { vec![b, h, w, o] };
        (out, shape)
    }
}

impl candle_core::CustomOp1 for NeighborhoodOp {
    fn name(&self) -> &'static str {
        if self.spread {
            "neighborhood-spread"
        } else {
            "neighborhood-sum"
        }
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("neighborhood op needs contiguous input".into()))?;
        let dims = layout.dims();
        match storage {
            CpuStorage::F32(v) => {
                let (out, shape) = self.run(&v[start..end], dims);
                Ok((CpuStorage::F32(out), shape.into()))
            }
            CpuStorage::F64(v) => {
                let (out, shape) = self.run(&v[start..end], dims);
                Ok((CpuStorage::F64(out), shape.into()))
            }
            _ => Err(candle_core::Error::Msg("neighborhood op supports f32 and f64".into())),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = NeighborhoodOp {
            k: self.k,
            spread: !self.spread,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[dim], Init::Ones)?,
            bias: ps.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Hidden-layer activation of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Gelu,
}

impl Act {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Relu => x.relu()?,
            Act::Gelu => x.gelu_erf()?,
        })
    }
}

/// Multi-layer perceptron; activation between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Act,
}

impl Mlp {
    pub fn new(ps: &ParamStore, dims: &[usize], act: Act) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&ps.pp(format!("layers.{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/o projections.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    inner_dim: usize,
}

impl Attention {
    pub fn new(ps: &ParamStore, dim: usize, inner_dim: usize, heads: usize) -> Result<Self> {
        if inner_dim % heads != 0 {
            return shape_err(format!(
                "attention width {inner_dim} not divisible by {heads} heads"
            ));
        }
        Ok(Self {
            q: Linear::new(&ps.pp("q"), dim, inner_dim)?,
            k: Linear::new(&ps.pp("k"), dim, inner_dim)?,
            v: Linear::new(&ps.pp("v"), dim, inner_dim)?,
            o: Linear::new(&ps.pp("o"), inner_dim, dim)?,
            heads,
            inner_dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.inner_dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attended output and the attention probabilities
    /// `(batch, heads, n_query, n_key)`.
    pub fn forward_with_probs(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, nq, _) = q.dims3()?;
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let kh = self.split_heads(&self.k.forward(k)?)?;
        let vh = self.split_heads(&self.v.forward(v)?)?;
        let scale = 1.0 / ((self.inner_dim / self.heads) as f64).sqrt();
        let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
        let probs = softmax_last(&logits)?;
        let out = probs
            .matmul(&vh)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.inner_dim))?;
        Ok((self.o.forward(&out)?, probs))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_probs(q, k, v)?.0)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Logistic sigmoid written through `tanh`, which stays finite (with finite
/// gradients) for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? * 0.5)? + 0.5)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    Ok((x.relu()? + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Elementwise binary cross-entropy with logits, averaged over all elements.
pub fn bce_with_logits_mean(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return shape_err(format!(
            "bce logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        ));
    }
    // softplus(x) - x*t == max(x,0) - x*t + log(1+exp(-|x|))
    let per = (softplus(logits)? - (logits * targets)?)?;
    Ok(per.mean_all()?)
}

/// Copy a tensor out as `f64` values in row-major order.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_native_convolution() {
        let ps = ParamStore::new(4, DType::F64);
        let x = ps.get("x", &[2, 3, 5, 6], Init::Normal(1.0)).unwrap();
        for k in [1, 3] {
            let conv = Conv2d::new(&ps.pp(format!("c{k}")), 3, 4, k).unwrap();
            ps.set(&format!("c{k}.bias"), &Tensor::new(&[0.1f64, -0.2, 0.3, 0.0], &Device::Cpu).unwrap())
                .unwrap();
            let ours = to_vec_f64(&conv.forward(&x).unwrap()).unwrap();
            let native = x
                .conv2d(&conv.weight, k / 2, 1, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            for (a, b) in ours.iter().zip(to_vec_f64(&native).unwrap()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_over_linear_map_matches_explicit_grid() {
        let ps = ParamStore::new(6, DType::F64);
        let (n, c, oh, ow) = (5, 3, 4, 3);
        let a = ps.get("a", &[oh * ow, n], Init::Normal(1.0)).unwrap();
        let x = ps.get("x", &[2, n, c], Init::Normal(1.0)).unwrap();
        let conv = Conv2d::new(&ps.pp("conv"), c, 4, 3).unwrap();
        ps.set("conv.bias", &Tensor::new(&[0.5f64, -1.0, 0.0, 2.0], &Device::Cpu).unwrap()).unwrap();
        let fast = conv.forward_linear_input(&x, &a, oh, ow).unwrap();
        let grid = a.broadcast_matmul(&x).unwrap().reshape((2, oh, ow, c)).unwrap().permute((0, 3, 1, 2)).unwrap();
        let slow = conv.forward(&grid.contiguous().unwrap()).unwrap().permute((0, 2, 3, 1)).unwrap();
        let slow = slow.reshape((2, oh * ow, 4)).unwrap();
        for (u, v) in to_vec_f64(&fast).unwrap().iter().zip(to_vec_f64(&slow).unwrap()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
        let single = conv.forward_linear_input(&x.get(1).unwrap(), &a, oh, ow).unwrap();
        assert_eq!(to_vec_f64(&single).unwrap(), to_vec_f64(&fast.get(1).unwrap()).unwrap());

        let pw = Conv2d::new(&ps.pp("pw"), c, 2, 1).unwrap();
        let g = x.reshape((2, n, 1, c)).unwrap().permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        let slow = pw.forward(&g).unwrap().permute((0, 2, 3, 1)).unwrap().reshape((2, n, 2)).unwrap();
        let fast = pw.forward_pointwise(&x).unwrap();
        for (u, v) in to_vec_f64(&fast).unwrap().iter().zip(to_vec_f64(&slow).unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_over_linear_map_gradients_match_finite_differences() {
        use crate::gradcheck::{check_vars, worst};
        let ps = ParamStore::new(8, DType::F64);
        let a = Tensor::randn(0f64, 1.0, (2 * 3 * 3, 4), &Device::Cpu).unwrap();
        let x = ps.get("x", &[4, 3], Init::Normal(1.0)).unwrap();
        let conv = Conv2d::new(&ps.pp("conv"), 3, 2, 3).unwrap();
        let w = Tensor::randn(0f64, 1.0, (18, 2), &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> { Ok((conv.forward_linear_input(&x, &a, 3, 3)? * &w)?.sum_all()?) };
        let reports = check_vars(&ps.vars(), &loss, 1e-6, 20).unwrap();
        assert!(worst(&reports) < 1e-6, "{reports:?}");
    }
}
