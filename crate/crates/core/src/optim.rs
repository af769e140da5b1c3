//! SGD with momentum, Adam and the milestone step schedule.
//!
//! Updates are computed in f64 and stored back at f32.

use rankage_autodiff::Tensor;

use crate::encoder::NamedTensors;
use crate::error::{Error, Result};

fn check(params: &[&mut Tensor<f32>], grads: &[&Tensor<f32>], state: &NamedTensors) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::invalid(
            "optimizer step",
            format!("{} params, {} grads, {} state tensors", params.len(), grads.len(), state.len()),
        ));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state.tensors()) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::invalid(
                "optimizer step",
                format!("param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), s.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::invalid("optimizer step", "non-finite gradient"));
        }
    }
    Ok(())
}

/// `buf ← μ·buf + g; p ← p − lr·buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub buffers: NamedTensors,
}

impl Sgd {
    /// `like` provides names and shapes of the optimized tensors.
    pub fn new(lr: f64, momentum: f64, like: &NamedTensors) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("lr {lr} must be > 0, momentum {momentum} in [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: like.zeros_like(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[&Tensor<f32>]) -> Result<()> {
        check(params, grads, &self.buffers)?;
        for ((p, g), b) in params.iter_mut().zip(grads).zip(self.buffers.tensors_mut()) {
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
                let nb = self.momentum * *bv as f64 + gv as f64;
                *bv = nb as f32;
                *pv = (*pv as f64 - self.lr * nb) as f32;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl Adam {
    pub fn new(lr: f64, like: &NamedTensors) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam", format!("lr {lr} must be > 0")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[&Tensor<f32>]) -> Result<()> {
        check(params, grads, &self.m)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let tensors = params.iter_mut().zip(grads).zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                let g = gv as f64;
                let nm = self.beta1 * *mv as f64 + (1.0 - self.beta1) * g;
                let nv = self.beta2 * *vv as f64 + (1.0 - self.beta2) * g * g;
                *mv = nm as f32;
                *vv = nv as f32;
                let update = self.lr * (nm / c1) / ((nv / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Epochs (1-based) after which the rate decays: `floor(fraction · total)`.
pub fn milestone_epochs(milestones: &[f64], total_epochs: usize) -> Vec<usize> {
    milestones.iter().map(|f| (f * total_epochs as f64).floor() as usize).collect()
}

/// Rate in effect during `epoch` (1-based): `initial · decay^(milestones passed)`.
pub fn scheduled_lr(initial: f64, decay: f64, milestones: &[f64], total_epochs: usize, epoch: usize) -> f64 {
    let crossed = milestone_epochs(milestones, total_epochs)
        .iter()
        .filter(|&&m| epoch > m)
        .count();
    initial * decay.powi(crossed as i32)
}
