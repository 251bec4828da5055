use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamGrad, Tensor};
use crate::error::{DgmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// First-order optimizer with per-parameter state keyed by name.
///
/// Elements whose gate entry is exactly zero are skipped entirely: neither
/// the value nor the Adam moments change, so frozen weights stay
/// bit-identical however many steps run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    state: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, AdamState> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut BTreeMap<String, AdamState> {
        &mut self.state
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Drops the moments of one parameter, e.g. after its shape changed.
    pub fn forget(&mut self, key: &str) {
        self.state.remove(key);
    }

    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &ParamGrad) -> Result<()> {
        if param.shape() != grad.grad.shape() {
            return Err(DgmError::shape(
                "optimizer step",
                param.shape(),
                grad.grad.shape(),
            ));
        }
        let frozen = |i: usize| grad.gate.as_ref().is_some_and(|g| g.data()[i] == 0.0);
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, (p, &g)) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.grad.data())
                    .enumerate()
                {
                    if !frozen(i) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let n = param.len();
                let st = self
                    .state
                    .entry(key.to_string())
                    .or_insert_with(|| AdamState {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        step: 0,
                    });
                if st.m.len() != n {
                    *st = AdamState {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        step: 0,
                    };
                }
                st.step += 1;
                let bc1 = 1.0 - beta1.powi(st.step as i32);
                let bc2 = 1.0 - beta2.powi(st.step as i32);
                let data = param.data_mut();
                for (i, &g) in grad.grad.data().iter().enumerate() {
                    if frozen(i) {
                        continue;
                    }
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let mh = st.m[i] / bc1;
                    let vh = st.v[i] / bc2;
                    data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        if !param.all_finite() {
            return Err(DgmError::NonFinite {
                op: "optimizer step",
            });
        }
        Ok(())
    }
}
