//! Adam with externally supplied learning rate and inspectable state, so
//! moments can be checkpointed and restored exactly.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{invalid, Result};

pub struct Adam {
    params: Vec<(String, Var)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, beta1: f64, beta2: f64) -> Self {
        Self {
            params,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(path) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(path) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(path.clone(), m);
            self.second.insert(path.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<path>` / `v.<path>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let known: std::collections::HashSet<&str> =
            self.params.iter().map(|(p, _)| p.as_str()).collect();
        self.first.clear();
        self.second.clear();
        for (k, t) in state {
            let (slot, path) = k
                .split_once('.')
                .ok_or_else(|| invalid(format!("bad optimizer entry {k}")))?;
            if !known.contains(path) {
                return Err(invalid(format!("optimizer state for unknown parameter {path}")));
            }
            match slot {
                "m" => self.first.insert(path.to_string(), t.clone()),
                "v" => self.second.insert(path.to_string(), t.clone()),
                _ => return Err(invalid(format!("bad optimizer entry {k}"))),
            };
        }
        self.step = step;
        Ok(())
    }

    /// Copies of the state, independent of later updates.
    pub fn snapshot(&self) -> Result<(u64, BTreeMap<String, Tensor>)> {
        let state = self
            .state()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect::<Result<_>>()?;
        Ok((self.step, state))
    }
}
