//! Residual ReLU multilayer perceptrons with hand-written backpropagation.
//!
//! Layer `l` computes `a_{l+1} = a_l · W_l + b_l` with `W_l` stored
//! `fan_in × fan_out` row-major. ReLU follows every layer except the last.
//! A residual net adds its input to the final output.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{EmbeddingMatrix, Rng};
use crate::optim::{ParamSlot, Parameters};

pub const NET_MAGIC: &[u8; 8] = b"CORRNET1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden_dims: Vec<usize>, out_dim: usize, residual: bool) -> Result<Self> {
        let spec = Self {
            in_dim,
            hidden_dims,
            out_dim,
            residual,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Residual map `R^dim -> R^dim` with `depth` hidden layers of `width`.
    pub fn residual(dim: usize, depth: usize, width: usize) -> Self {
        Self {
            in_dim: dim,
            hidden_dims: vec![width; depth],
            out_dim: dim,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!("zero-sized layer in {self:?}")));
        }
        if self.residual && self.in_dim != self.out_dim {
            return Err(Error::invalid(format!(
                "residual net needs in_dim == out_dim, got {} and {}",
                self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }

    /// `[in_dim, hidden..., out_dim]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.in_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.out_dim);
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Weights ~ Normal(0, 2 / fan_in), biases zero.
    HeNormal,
    /// He-normal hidden layers; final layer zeroed so a residual net starts as
    /// the identity map.
    ZeroResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            grad_weight: vec![0.0; fan_in * fan_out],
            grad_bias: vec![0.0; fan_out],
        }
    }

    /// `out = x · W + b` for one row; accumulation over `fan_in` ascending.
    #[inline]
    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &xk) in x.iter().enumerate() {
            let w = &self.weight[k * self.fan_out..(k + 1) * self.fan_out];
            for (o, &wkj) in out.iter_mut().zip(w) {
                *o += xk * wkj;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    spec: MlpSpec,
    layers: Vec<Layer>,
    /// Bumped on every parameter write; forward caches record it.
    version: u64,
}

/// Activations recorded by `forward`, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    rows: usize,
    /// Input to each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl MlpNet {
    pub fn init(spec: MlpSpec, mode: InitMode, rng: &mut Rng) -> Result<Self> {
        Self::init_scaled(spec, mode, 1.0, rng)
    }

    /// Like [`MlpNet::init`] with the final layer's weight variance multiplied
    /// by `final_variance_scale`. The drift generator uses this as its
    /// staleness knob; `0.0` yields the identity map for residual nets.
    pub fn init_scaled(spec: MlpSpec, mode: InitMode, final_variance_scale: f64, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        if mode == InitMode::ZeroResidual && !spec.residual {
            return Err(Error::invalid("zero_residual init requires a residual spec"));
        }
        if !(final_variance_scale >= 0.0 && final_variance_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "variance scale must be finite and non-negative, got {final_variance_scale}"
            )));
        }
        let dims = spec.layer_dims();
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in dims.windows(2).enumerate() {
            let mut layer = Layer::zeros(w[0], w[1]);
            let last = l + 1 == n_layers;
            let zero = last && mode == InitMode::ZeroResidual;
            if !zero {
                let scale = if last { final_variance_scale } else { 1.0 };
                let std = (scale * 2.0 / w[0] as f64).sqrt();
                for v in &mut layer.weight {
                    *v = std * rng.normal();
                }
            }
            layers.push(layer);
        }
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    /// Identity residual map of the given shape.
    pub fn identity(spec: MlpSpec) -> Result<Self> {
        Self::init(spec, InitMode::ZeroResidual, &mut Rng::new(0))
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, batch: &EmbeddingMatrix) -> Result<()> {
        if batch.dim() != self.spec.in_dim {
            return Err(Error::shape(format!(
                "batch of dim {} into net with in_dim {}",
                batch.dim(),
                self.spec.in_dim
            )));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, batch: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        self.check_input(batch)?;
        let mut cur = batch.data().to_vec();
        let rows = batch.rows();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; rows * layer.fan_out];
            for i in 0..rows {
                let out = &mut next[i * layer.fan_out..(i + 1) * layer.fan_out];
                layer.apply_row(&cur[i * layer.fan_in..(i + 1) * layer.fan_in], out);
                if l + 1 < n_layers {
                    for v in out.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            cur = next;
        }
        self.finish(batch, cur)
    }

    fn finish(&self, batch: &EmbeddingMatrix, mut out: Vec<f64>) -> Result<EmbeddingMatrix> {
        if self.spec.residual {
            for (o, x) in out.iter_mut().zip(batch.data()) {
                *o += x;
            }
        }
        EmbeddingMatrix::new(batch.rows(), self.spec.out_dim, out)
    }

    /// Forward pass recording what `backward` needs.
    pub fn forward(&self, batch: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, ForwardCache)> {
        self.check_input(batch)?;
        let rows = batch.rows();
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut cur = batch.data().to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; rows * layer.fan_out];
            for i in 0..rows {
                layer.apply_row(
                    &cur[i * layer.fan_in..(i + 1) * layer.fan_in],
                    &mut next[i * layer.fan_out..(i + 1) * layer.fan_out],
                );
            }
            inputs.push(cur);
            if l + 1 < n_layers {
                let act: Vec<f64> = next.iter().map(|v| v.max(0.0)).collect();
                pre.push(next);
                cur = act;
            } else {
                cur = next;
            }
        }
        let out = self.finish(batch, cur)?;
        Ok((
            out,
            ForwardCache {
                version: self.version,
                rows,
                inputs,
                pre,
            },
        ))
    }

    /// Reverse-mode pass. Accumulates parameter gradients into the net's
    /// gradient buffers and returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &ForwardCache, out_grad: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {} but net is at {}",
                cache.version, self.version
            )));
        }
        if out_grad.rows() != cache.rows || out_grad.dim() != self.spec.out_dim {
            return Err(Error::shape(format!(
                "out_grad {}x{} for cached batch of {} rows and out_dim {}",
                out_grad.rows(),
                out_grad.dim(),
                cache.rows,
                self.spec.out_dim
            )));
        }
        let rows = cache.rows;
        let n_layers = self.layers.len();
        let mut grad = out_grad.data().to_vec();
        for l in (0..n_layers).rev() {
            let layer = &mut self.layers[l];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            if l + 1 < n_layers {
                let pre = &cache.pre[l];
                for (g, &z) in grad.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &cache.inputs[l];
            for i in 0..rows {
                let g = &grad[i * fo..(i + 1) * fo];
                for (gb, &gj) in layer.grad_bias.iter_mut().zip(g) {
                    *gb += gj;
                }
                let x = &input[i * fi..(i + 1) * fi];
                for (k, &xk) in x.iter().enumerate() {
                    let gw = &mut layer.grad_weight[k * fo..(k + 1) * fo];
                    for (w, &gj) in gw.iter_mut().zip(g) {
                        *w += xk * gj;
                    }
                }
            }
            let mut prev = vec![0.0; rows * fi];
            for i in 0..rows {
                let g = &grad[i * fo..(i + 1) * fo];
                let p = &mut prev[i * fi..(i + 1) * fi];
                for (k, pk) in p.iter_mut().enumerate() {
                    let w = &layer.weight[k * fo..(k + 1) * fo];
                    let mut acc = 0.0;
                    for (&wkj, &gj) in w.iter().zip(g) {
                        acc += wkj * gj;
                    }
                    *pk = acc;
                }
            }
            grad = prev;
        }
        if self.spec.residual {
            for (g, o) in grad.iter_mut().zip(out_grad.data()) {
                *g += o;
            }
        }
        EmbeddingMatrix::new(rows, self.spec.in_dim, grad)
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.grad_weight.iter_mut().for_each(|g| *g = 0.0);
            l.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// True when every gradient buffer is exactly zero.
    pub fn grads_are_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.grad_weight.iter().chain(&l.grad_bias).all(|&g| g == 0.0))
    }

    /// Flattened parameters in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Flattened gradients in the same order as [`MlpNet::flat_params`].
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.grad_weight);
            out.extend_from_slice(&l.grad_bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Writes the little-endian `CORRNET1` checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.fan_in as u32).to_le_bytes())?;
            w.write_all(&(l.fan_out as u32).to_le_bytes())?;
            for v in &l.weight {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &l.bias {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a `CORRNET1` checkpoint. The format does not carry the residual
    /// flag, so the caller supplies it.
    pub fn read_checkpoint<R: Read>(mut r: R, residual: bool) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers == 0 {
            return Err(Error::Format("net with zero layers".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = read_u32(&mut r)? as usize;
            let fan_out = read_u32(&mut r)? as usize;
            let mut layer = Layer::zeros(fan_in, fan_out);
            for v in &mut layer.weight {
                *v = read_f64(&mut r)?;
            }
            for v in &mut layer.bias {
                *v = read_f64(&mut r)?;
            }
            layers.push(layer);
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Format(format!(
                    "layer fan_out {} feeds fan_in {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        let spec = MlpSpec {
            in_dim: layers[0].fan_in,
            hidden_dims: layers[..n_layers - 1].iter().map(|l| l.fan_out).collect(),
            out_dim: layers[n_layers - 1].fan_out,
            residual,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }
}

impl Parameters for MlpNet {
    fn slots(&mut self) -> Vec<ParamSlot<'_>> {
        self.version += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(ParamSlot {
                name: format!("layer{i}.weight"),
                value: &mut l.weight,
                grad: &mut l.grad_weight,
            });
            out.push(ParamSlot {
                name: format!("layer{i}.bias"),
                value: &mut l.bias,
                grad: &mut l.grad_bias,
            });
        }
        out
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
