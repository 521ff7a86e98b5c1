//! First-order optimizers. Both zero the gradient buffers after applying.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{read_f64, read_u32, read_u64};

pub const ADAM_MAGIC: &[u8; 8] = b"CORRADM1";

/// One parameter tensor and its gradient buffer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything exposing parameter tensors in a fixed order.
pub trait Parameters {
    fn slots(&mut self) -> Vec<ParamSlot<'_>>;
}

fn check_grads(slots: &[ParamSlot<'_>]) -> Result<()> {
    for s in slots {
        if let Some(i) = s.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{i}]", s.name)));
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let mut slots = params.slots();
    let mut sq = 0.0;
    for s in &slots {
        for g in s.grad.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for s in &mut slots {
            s.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Plain gradient descent, `p <- p - lr * g`.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, lr: f64) -> Result<()> {
    let mut slots = params.slots();
    check_grads(&slots)?;
    for s in &mut slots {
        for (p, g) in s.value.iter_mut().zip(s.grad.iter_mut()) {
            *p -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ADAM_MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        for x in [self.learning_rate, self.beta1, self.beta2, self.eps] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_all(&(m.len() as u64).to_le_bytes())?;
            for x in m.iter().chain(v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ADAM_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let step = read_u64(&mut r)?;
        let learning_rate = read_f64(&mut r)?;
        let beta1 = read_f64(&mut r)?;
        let beta2 = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            let mt = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let vt = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            m.push(mt);
            v.push(vt);
        }
        Ok(Self {
            step,
            learning_rate,
            beta1,
            beta2,
            eps,
            m,
            v,
        })
    }
}

/// Bias-corrected Adam update over every slot of `params`.
pub fn adam_step<P: Parameters + ?Sized>(params: &mut P, state: &mut AdamState) -> Result<()> {
    let mut slots = params.slots();
    check_grads(&slots)?;
    if state.m.is_empty() {
        state.m = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != slots.len() || slots.iter().zip(&state.m).any(|(s, m)| s.value.len() != m.len()) {
        return Err(Error::shape("Adam moments do not match parameter shapes"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    for ((s, m), v) in slots.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..s.value.len() {
            let g = s.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            s.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            s.grad[i] = 0.0;
        }
    }
    Ok(())
}
