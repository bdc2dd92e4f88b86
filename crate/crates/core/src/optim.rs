//! Local optimizers applied to the averaged, decompressed gradient.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// `v ← m·v + g; w ← w − lr·v`
    SgdMomentum { lr: f32, momentum: f32 },
    /// Bias-corrected Adam.
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f32) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                lr > 0.0 && (0.0..1.0).contains(&momentum)
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "optimizer hyper-parameters {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    /// Buffers mirror `param_lens`, one per parameterized layer.
    pub fn new(kind: OptimizerKind, param_lens: &[usize]) -> Result<Self> {
        kind.validate()?;
        let zeros = || param_lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            kind,
            first: zeros(),
            second,
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update of every layer. Reads nothing but `grads`.
    pub fn update<G: AsRef<[f32]>>(
        &mut self,
        params: &mut [&mut [f32]],
        grads: &[G],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::TensorShape(format!(
                "optimizer tracks {} layers, got {} parameter and {} gradient buffers",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.as_ref().len() != p.len() {
                return Err(Error::TensorShape(format!(
                    "layer {i} buffer lengths differ"
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &g), v) in w.iter_mut().zip(g.as_ref()).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step.min(i32::MAX as u64) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &g), m), v) in w
                        .iter_mut()
                        .zip(g.as_ref())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
