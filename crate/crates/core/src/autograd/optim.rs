use super::graph::Grads;
use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Option<Tensor<E>>>,
    pub v: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Adam<E> {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &Grads<E>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (E::of(self.beta1), E::of(self.beta2));
        let (one_b1, one_b2) = (E::of(1.0 - self.beta1), E::of(1.0 - self.beta2));
        let step_size = E::of(lr / bc1);
        let inv_bc2 = E::of(1.0 / bc2);
        let eps = E::of(self.eps);
        let decay = E::of(1.0 - lr * self.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = (*vv * inv_bc2).sqrt() + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
    }
}

/// Linear warmup followed by cosine decay to `floor · base`.
pub fn cosine_lr(step: u64, total: u64, base: f64, warmup: u64, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (floor + (1.0 - floor) * cos)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<E: Real>(grads: &mut Grads<E>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(E::of(max_norm / norm));
    }
    norm
}
