//! Adam with warmup/inverse-square-root learning rate and a freeze schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// `peak·s/warmup` during warmup, then `peak·sqrt(warmup/s)`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if self.warmup_steps == 0 {
            self.peak / (step.max(1) as f64).sqrt()
        } else {
            self.peak * (self.warmup_steps as f64 / step as f64).sqrt()
        }
    }
}

/// Parameters under `prefixes` stay fixed for the first `frozen_steps` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeSchedule {
    pub prefixes: Vec<String>,
    pub frozen_steps: usize,
}

impl FreezeSchedule {
    pub fn none() -> Self {
        Self {
            prefixes: Vec::new(),
            frozen_steps: 0,
        }
    }

    /// Freezes `prefixes` for `round(fraction · total_steps)` steps.
    pub fn fraction(prefixes: Vec<String>, fraction: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("freeze_fraction {fraction} outside [0, 1]")));
        }
        Ok(Self {
            prefixes,
            frozen_steps: (fraction * total_steps as f64).round() as usize,
        })
    }

    pub fn frozen_at(&self, step: usize) -> &[String] {
        if step < self.frozen_steps {
            &self.prefixes
        } else {
            &[]
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-6)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected update to every parameter that has a gradient.
    /// Parameters without a gradient are untouched, including their moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let p = store.get_mut(name)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adds `g` into the running sum `acc`, name by name.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>) {
    for (k, t) in g {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k, t);
            }
        }
    }
}
