use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamId, ParamStore, Tensor};

/// Adam with bias correction. Moments are allocated lazily per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    #[serde(skip)]
    pub(crate) m: Vec<Option<Tensor>>,
    #[serde(skip)]
    pub(crate) v: Vec<Option<Tensor>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every parameter that has a gradient and is not
    /// `frozen`. Parameters without a gradient keep their moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, frozen: &[ParamId]) {
        let n = params.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let eps_hat = eps * (bc2.sqrt() as f32);
        for id in params.ids().collect::<Vec<_>>() {
            if frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= step * m / (v.sqrt() + eps_hat));
        }
    }

    /// First and second moments of parameter `id`, if allocated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        let i = id.index();
        match (self.m.get(i), self.v.get(i)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor, len: usize) {
        self.m.resize(len, None);
        self.v.resize(len, None);
        self.m[id.index()] = Some(m);
        self.v[id.index()] = Some(v);
    }
}
