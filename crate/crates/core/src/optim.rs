use std::collections::BTreeMap;

use crate::config::OptimizerKind;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// First/second moment estimates for one tensor. `step` counts the updates
/// this tensor has received, so tensors trained in different phases keep
/// independent bias corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub state: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        for (&id, g) in grads {
            let param = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                        apply(p, self.lr * gv);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let st = self.state.entry(id).or_insert_with(|| Moments {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                        step: 0,
                    });
                    st.step += 1;
                    let bc1 = 1.0 - beta1.powi(st.step as i32);
                    let bc2 = 1.0 - beta2.powi(st.step as i32);
                    let (m, v) = (st.m.data_mut(), st.v.data_mut());
                    for (i, (p, gv)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        apply(p, self.lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
    }
}

// A zero update must not turn -0.0 into +0.0.
fn apply(p: &mut f64, delta: f64) {
    if delta != 0.0 {
        *p -= delta;
    }
}
