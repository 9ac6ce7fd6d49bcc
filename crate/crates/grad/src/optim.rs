use crate::real::Real;
use crate::tape::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    moments: Vec<Option<(Tensor<F>, Tensor<F>)>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    /// Parameters for which `skip` returns true are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        skip: impl Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if skip(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| {
                (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec()))
            });
            let p = store.get_mut(id);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (F::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (F::one() - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
