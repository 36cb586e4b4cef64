//! Reconstruction, flow and adversarial loss terms.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::nn::{im2col_table, Conv};
use crate::autograd::{Graph, Init, ParamId, ParamStore, Real, Var};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid!("loss weights must be non-negative, got {self:?}"));
        }
        Ok(())
    }
}

pub struct LossParts<'g, E: Real> {
    pub total: Var<'g, E>,
    pub recon: Var<'g, E>,
    pub flow: Option<Var<'g, E>>,
    pub adversarial: Option<Var<'g, E>>,
}

/// `α·L_R + β·L_G + γ·L_F + commit`.
///
/// `L_R` is the pixel MSE over all renders, `L_F` the MSE between predicted and
/// true flow, `L_G` the non-saturating generator loss `mean softplus(−logits)`
/// on the discriminator's logits for the renders.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<'g, E: Real>(
    rendered: Var<'g, E>,
    truth: Var<'g, E>,
    flow_pred: Option<Var<'g, E>>,
    flow_true: Option<Var<'g, E>>,
    disc_logits: Option<Var<'g, E>>,
    commit: Var<'g, E>,
    w: LossWeights,
) -> Result<LossParts<'g, E>> {
    w.validate()?;
    if rendered.shape() != truth.shape() {
        return Err(invalid!("rendered {:?} vs truth {:?}", rendered.shape(), truth.shape()));
    }
    let recon = (rendered - truth).square().mean_all();
    let mut total = recon.scale(w.alpha) + commit;
    let flow = match (flow_pred, flow_true) {
        (Some(p), Some(t)) => {
            if p.shape() != t.shape() {
                return Err(invalid!("flow shapes {:?} vs {:?}", p.shape(), t.shape()));
            }
            let l = (p - t).square().mean_all();
            total = total + l.scale(w.gamma);
            Some(l)
        }
        _ => None,
    };
    let adversarial = match disc_logits {
        Some(d) if w.beta > 0.0 => {
            let l = d.neg().softplus().mean_all();
            total = total + l.scale(w.beta);
            Some(l)
        }
        _ => None,
    };
    Ok(LossParts {
        total,
        recon,
        flow,
        adversarial,
    })
}

/// Four-layer strided patch classifier over `(B, H, W, 3)` images.
pub struct Discriminator {
    layers: Vec<Conv>,
    pub store: ParamStore<f32>,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let mut init = Init::new(&mut store, &mut rng);
        let layers = vec![
            Conv::new(&mut init, "d1", 2, 3, 16, 4, 2, 1),
            Conv::new(&mut init, "d2", 2, 16, 32, 4, 2, 1),
            Conv::new(&mut init, "d3", 2, 32, 64, 4, 2, 1),
            Conv::new(&mut init, "d4", 2, 64, 1, 3, 1, 1),
        ];
        Self { layers, store }
    }

    /// Patch logits `(B, H/8, W/8, 1)` with trainable weights; `g` must be built over [`Discriminator::store`].
    pub fn logits<'g, E: Real>(&self, g: &'g Graph<E>, images: Var<'g, E>) -> Var<'g, E> {
        self.forward_with(images, &|id| g.param(id))
    }

    /// Patch logits with the weights baked in as constants, for use inside another model's graph.
    pub fn logits_frozen<'g>(&self, g: &'g Graph<f32>, images: Var<'g, f32>) -> Var<'g, f32> {
        self.forward_with(images, &|id| g.constant(self.store.get(id).clone()))
    }

    fn forward_with<'g, E: Real>(&self, images: Var<'g, E>, p: &dyn Fn(ParamId) -> Var<'g, E>) -> Var<'g, E> {
        let mut x = images.scale(2.0).add_scalar(-1.0);
        for (i, l) in self.layers.iter().enumerate() {
            let (table, cols) = im2col_table(&x.shape(), l.kernel, l.stride, l.pad);
            let mut out_shape = cols.clone();
            *out_shape.last_mut().unwrap() = l.c_out;
            x = (x.gather(Arc::new(table), &cols).matmul(p(l.w)) + p(l.b)).reshape(&out_shape);
            if i + 1 < self.layers.len() {
                x = x.silu();
            }
        }
        x
    }

    /// `mean softplus(−real) + mean softplus(fake)`.
    pub fn loss<'g, E: Real>(&self, g: &'g Graph<E>, real: Var<'g, E>, fake: Var<'g, E>) -> Var<'g, E> {
        self.logits(g, real).neg().softplus().mean_all() + self.logits(g, fake).softplus().mean_all()
    }
}
