use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdWithDecay { decay_factor: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(decay_factor: f64) -> Self {
        OptimizerKind::SgdWithDecay { decay_factor }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if learning_rate.is_nan() || learning_rate <= 0.0 {
            return Err(TensorError::State(format!("learning rate must be positive, got {learning_rate}")));
        }
        if let OptimizerKind::SgdWithDecay { decay_factor } = kind {
            if !(decay_factor > 0.0 && decay_factor <= 1.0) {
                return Err(TensorError::State(format!("decay factor must be in (0, 1], got {decay_factor}")));
            }
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate by the SGD decay factor. No-op for Adam.
    pub fn decay(&mut self) {
        if let OptimizerKind::SgdWithDecay { decay_factor } = self.kind {
            self.learning_rate *= decay_factor;
        }
    }

    /// One update. `grads[i]` belongs to parameter `i` of `params`.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::State(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            match g {
                None => return Err(TensorError::State(format!("missing gradient for {}", params.name(id)))),
                Some(g) if g.len() != params.get(id).len() => {
                    return Err(TensorError::State(format!("gradient size mismatch for {}", params.name(id))))
                }
                _ => {}
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdWithDecay { .. } => {
                let lr = T::of(lr);
                for (id, g) in params.ids().zip(grads) {
                    let g = g.as_ref().expect("checked above");
                    for (p, &gv) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (id, g) in params.ids().zip(grads) {
                    let g = g.as_ref().expect("checked above");
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    for (((p, &gv), mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        let gv = gv.as_f64();
                        *mi = beta1 * *mi + (1.0 - beta1) * gv;
                        *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                        let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *p -= T::of(upd);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
