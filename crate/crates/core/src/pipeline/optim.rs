//! Adam.

use std::collections::BTreeMap;

use crate::error::{KdsmError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// left untouched (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).ok_or_else(|| KdsmError::Config(format!("no Adam state for `{name}`")))?;
            let v = self.v.get_mut(name).ok_or_else(|| KdsmError::Config(format!("no Adam state for `{name}`")))?;
            let zero;
            let g: &[f64] = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            if g.len() != p.numel() {
                return Err(KdsmError::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
