//! Decoupled-weight-decay optimizer with global gradient-norm clipping.

use crate::netblocks::ParamStore;
use crate::num::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(slots: usize) -> Self {
        AdamW { m: (0..slots).map(|_| None).collect(), v: (0..slots).map(|_| None).collect(), t: 0 }
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    pub fn moment_m(&self, id: usize) -> Option<&Tensor<T>> {
        self.m[id].as_ref()
    }

    pub fn moment_v(&self, id: usize) -> Option<&Tensor<T>> {
        self.v[id].as_ref()
    }

    pub fn set_moments(&mut self, id: usize, m: Tensor<T>, v: Tensor<T>) {
        self.m[id] = Some(m);
        self.v[id] = Some(v);
    }

    /// Drop moment state for parameters that were removed from the store.
    pub fn drop_dead(&mut self, store: &ParamStore<T>) {
        for id in 0..self.m.len() {
            if !store.is_live(id) {
                self.m[id] = None;
                self.v[id] = None;
            }
        }
    }

    /// Count of elements with live first-moment state.
    pub fn moment_count(&self) -> usize {
        self.m.iter().flatten().map(|t| t.len()).sum()
    }

    /// One update step. `grads` is indexed by parameter slot; `None` entries
    /// are skipped. Gradients are globally norm-clipped at `clip` before the
    /// moment updates; weight decay is decoupled from the gradient path.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut [Option<Tensor<T>>],
        lr: f64,
        weight_decay: f64,
        clip: f64,
    ) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;

        let mut sq_sum = 0.0f64;
        for g in grads.iter().flatten() {
            for &x in g.data() {
                let v = x.to_f64();
                sq_sum += v * v;
            }
        }
        let norm = sq_sum.sqrt();
        let scale = if norm > clip && norm > 0.0 { clip / norm } else { 1.0 };

        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let one_m_b1 = T::from_f64(1.0 - BETA1);
        let one_m_b2 = T::from_f64(1.0 - BETA2);
        let scale_t = T::from_f64(scale);
        let lr_t = T::from_f64(lr);
        let wd_factor = T::from_f64(1.0 - lr * weight_decay);
        let eps = T::from_f64(EPS);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        for (id, grad) in grads.iter_mut().enumerate() {
            let Some(g) = grad else { continue };
            if !store.is_live(id) {
                continue;
            }
            let p = store.get_mut(id);
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                let gi = gd[i] * scale_t;
                md[i] = b1 * md[i] + one_m_b1 * gi;
                vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
                let mhat = md[i] * inv_bc1;
                let vhat = vd[i] * inv_bc2;
                pd[i] = pd[i] * wd_factor - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
