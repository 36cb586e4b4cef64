//! Plain-data model interface and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaussians::{apply_offsets, DynamicGaussians, GaussianOffset, OffsetFeatures};
use super::loss::{vae_loss, Discriminator, LossWeights};
use super::net::{GaussianVars, Vq4dNet};
use super::{Codebook, ContinuousTokens, LatentGrid, TokenGrid, VqConfig, PARAM_DIM};
use crate::autograd::optim::{clip_grad_norm, cosine_lr, Adam};
use crate::autograd::{Grads, Graph, ParamStore, Tensor, Var};
use crate::config::TrainConfig;
use crate::error::{invalid, Result};
use crate::par::Execution;
use crate::scene_synth::{CameraFrame, CameraPose, Sample, SpatioTemporalMatrix};
use crate::splat_render::render_gaussians;

/// VQ-VAE weights plus the operations of the model on plain data.
#[derive(Clone)]
pub struct Vq4dModel {
    pub net: std::sync::Arc<Vq4dNet>,
    pub store: ParamStore<f32>,
}

fn frames_of(cameras: &[CameraPose]) -> Result<Vec<CameraFrame>> {
    cameras.iter().map(|c| c.frame()).collect()
}

/// `(T·V, H, W, 3)` image tensor of a matrix.
fn image_tensor(m: &SpatioTemporalMatrix) -> Tensor<f32> {
    Tensor::from_f64(&[m.timesteps * m.views(), m.height, m.width, 3], &m.pixels)
}

fn gaussians_from(p: &Tensor<f32>) -> DynamicGaussians {
    let s = p.shape();
    DynamicGaussians::from_params(s[0], s[1], &p.to_f64_vec())
}

impl Vq4dModel {
    pub fn new(cfg: &VqConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Vq4dNet::new(cfg, &mut store);
        Ok(Self {
            net: std::sync::Arc::new(net),
            store,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.net.cfg
    }

    /// Checks that a matrix has the dimensions the model was built for.
    pub fn check_matrix(&self, m: &SpatioTemporalMatrix) -> Result<()> {
        let c = self.config();
        if m.height % 8 != 0 || m.width % 8 != 0 {
            return Err(invalid!("image size {}×{} is not divisible by 8", m.height, m.width));
        }
        let found = (m.timesteps, m.views(), m.height, m.width);
        let expect = (c.timesteps, c.views, c.height, c.width);
        if found != expect {
            return Err(invalid!("matrix dims (T, V, H, W) = {found:?}, model expects {expect:?}"));
        }
        Ok(())
    }

    /// Per-image encoder applied to every `(t, v)` view.
    pub fn encode(&self, m: &SpatioTemporalMatrix) -> Result<LatentGrid> {
        if m.height % 8 != 0 || m.width % 8 != 0 {
            return Err(invalid!("image size {}×{} is not divisible by 8", m.height, m.width));
        }
        self.encode_images(&m.pixels, m.timesteps, m.views(), m.height, m.width)
    }

    /// Encodes `t·v` images of `h × w` pixels laid out `(t, v, y, x, 3)`.
    pub fn encode_images(&self, pixels: &[f64], t: usize, v: usize, h: usize, w: usize) -> Result<LatentGrid> {
        if h % 8 != 0 || w % 8 != 0 || pixels.len() != t * v * h * w * 3 {
            return Err(invalid!("expected {t}×{v} images of {h}×{w} pixels with both sides divisible by 8"));
        }
        let g = Graph::inference(&self.store);
        let z = self.net.encode(&g, g.constant(Tensor::from_f64(&[t * v, h, w, 3], pixels)));
        let dim = self.config().latent_dim;
        Ok(LatentGrid {
            timesteps: t,
            views: v,
            h: h / 8,
            w: w / 8,
            dim,
            data: z.value().data().to_vec(),
        })
    }

    pub fn codebook(&self) -> Codebook {
        let c = self.config();
        let data = self
            .net
            .codebooks
            .iter()
            .flat_map(|&id| self.store.get(id).data().to_vec())
            .collect();
        Codebook::new(c.chunks, c.codebook_size, c.chunk_dim(), data).expect("codebook shape fixed by config")
    }

    /// Encoder plus quantizer.
    pub fn tokenize(&self, m: &SpatioTemporalMatrix) -> Result<TokenGrid> {
        let z = self.encode(m)?;
        let mut book = self.codebook();
        Ok(super::quantize(&z, &mut book)?.0)
    }

    fn check_tokens(&self, tokens: &TokenGrid) -> Result<()> {
        let c = self.config();
        tokens.validate()?;
        if (tokens.views, tokens.h, tokens.w, tokens.chunks, tokens.vocab)
            != (c.views, c.latent_h(), c.latent_w(), c.chunks, c.codebook_size)
        {
            return Err(invalid!(
                "token grid (V, h, w, n, K) = {:?} does not match the model's {:?}",
                (tokens.views, tokens.h, tokens.w, tokens.chunks, tokens.vocab),
                (c.views, c.latent_h(), c.latent_w(), c.chunks, c.codebook_size)
            ));
        }
        if tokens.timesteps == 0 || tokens.timesteps > c.timesteps {
            return Err(invalid!("token grid has {} timesteps, model supports 1..={}", tokens.timesteps, c.timesteps));
        }
        Ok(())
    }

    pub fn factorize(&self, tokens: &TokenGrid) -> Result<ContinuousTokens> {
        self.check_tokens(tokens)?;
        let g = Graph::inference(&self.store);
        let s = self.net.factorize(&g, self.net.lookup(&g, &tokens.data));
        Ok(ContinuousTokens {
            timesteps: tokens.timesteps,
            views: tokens.views,
            positions: tokens.h * tokens.w,
            dim: self.config().token_dim,
            data: s.value().data().to_vec(),
        })
    }

    fn tokens_var<'g>(&self, g: &'g Graph<f32>, s: &ContinuousTokens) -> Result<Var<'g, f32>> {
        let c = self.config();
        if (s.views, s.positions, s.dim) != (c.views, c.positions(), c.token_dim) {
            return Err(invalid!("continuous tokens do not match the model dimensions"));
        }
        if s.data.len() != s.timesteps * s.views * s.positions * s.dim || s.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("continuous tokens must be finite and match their dimensions"));
        }
        Ok(g.constant(Tensor::new(&[s.timesteps * s.views, s.positions, s.dim], s.data.clone())))
    }

    /// Coarse Gaussians, one frame per timestep.
    pub fn static_gs_generate(&self, s: &ContinuousTokens) -> Result<DynamicGaussians> {
        let g = Graph::inference(&self.store);
        let sv = self.tokens_var(&g, s)?;
        Ok(gaussians_from(&self.net.static_gs(&g, sv).params().value()))
    }

    pub fn stop_offsets(&self, gs: &DynamicGaussians, s: &ContinuousTokens) -> Result<OffsetFeatures> {
        if gs.timesteps() != s.timesteps {
            return Err(invalid!("Gaussians cover {} timesteps, tokens {}", gs.timesteps(), s.timesteps));
        }
        if gs.count() != self.config().gaussians {
            return Err(invalid!("expected {} Gaussians per frame, got {}", self.config().gaussians, gs.count()));
        }
        let g = Graph::inference(&self.store);
        let sv = self.tokens_var(&g, s)?;
        let p = g.constant(Tensor::from_f64(&[gs.timesteps(), gs.count(), PARAM_DIM], &gs.to_params()));
        let off = self.net.stop_offsets(&g, p, sv).value().to_f64_vec();
        Ok(OffsetFeatures {
            frames: off
                .chunks_exact(gs.count() * PARAM_DIM)
                .map(|f| f.chunks_exact(PARAM_DIM).map(GaussianOffset::from_params).collect())
                .collect(),
        })
    }

    /// Tokens to coarse and corrected Gaussians.
    pub fn decode_both(&self, tokens: &TokenGrid) -> Result<(DynamicGaussians, DynamicGaussians)> {
        let s = self.factorize(tokens)?;
        let coarse = self.static_gs_generate(&s)?;
        if !self.config().stop {
            return Ok((coarse.clone(), coarse));
        }
        let off = self.stop_offsets(&coarse, &s)?;
        let corrected = apply_offsets(&coarse, &off)?;
        Ok((coarse, corrected))
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<DynamicGaussians> {
        Ok(self.decode_both(tokens)?.1)
    }

    /// Renders Gaussians into every camera.
    pub fn render(&self, gs: &DynamicGaussians, cameras: &[CameraPose]) -> Result<SpatioTemporalMatrix> {
        render_dynamic(gs, cameras, self.config().background)
    }

    /// Tokenize, decode and render.
    pub fn reconstruct(&self, m: &SpatioTemporalMatrix) -> Result<SpatioTemporalMatrix> {
        self.check_matrix(m)?;
        let gs = self.decode(&self.tokenize(m)?)?;
        self.render(&gs, &m.cameras)
    }
}

/// Renders dynamic Gaussians from every camera.
pub fn render_dynamic(gs: &DynamicGaussians, cameras: &[CameraPose], background: [f64; 3]) -> Result<SpatioTemporalMatrix> {
    gs.validate()?;
    let first = cameras.first().ok_or_else(|| invalid!("at least one camera is required"))?;
    let (h, w) = (first.height, first.width);
    let frames = frames_of(cameras)?;
    let (t, n) = (gs.timesteps(), gs.count());
    let g = Graph::<f64>::detached(false);
    let p = g.constant(Tensor::new(&[t, n, PARAM_DIM], gs.to_params()));
    let v = GaussianVars::from_params(p);
    let out = render_gaussians(
        &g,
        v.position,
        v.scale,
        v.rotation,
        v.opacity,
        v.color,
        &frames,
        (h, w),
        background,
        false,
        Execution::default(),
    );
    Ok(SpatioTemporalMatrix {
        timesteps: t,
        height: h,
        width: w,
        cameras: cameras.to_vec(),
        pixels: out.images.value().data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub flow: f64,
    pub commit: f64,
    pub adversarial: f64,
    pub grad_norm: f64,
    /// Codebook entries reset at this step.
    pub reset_entries: usize,
}

impl StepStats {
    /// Reconstruction PSNR implied by the batch pixel MSE.
    pub fn psnr(&self) -> f64 {
        -10.0 * self.recon.log10()
    }
}

/// Optimizer state and schedule for training a [`Vq4dModel`].
pub struct Vq4dTrainer {
    pub model: Vq4dModel,
    pub train: TrainConfig,
    pub opt: Adam<f32>,
    pub step: u64,
    usage: Vec<u64>,
    rng: ChaCha8Rng,
    disc: Option<(Discriminator, Adam<f32>)>,
    pub exec: Execution,
}

impl Vq4dTrainer {
    pub fn new(model: Vq4dModel, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let cfg = model.config().clone();
        let mut opt = Adam::new(model.store.len());
        opt.weight_decay = train.weight_decay;
        let disc = (cfg.loss_beta > 0.0).then(|| {
            let d = Discriminator::new(cfg.seed);
            let n = d.store.len();
            (d, Adam::new(n))
        });
        Ok(Self {
            usage: vec![0; cfg.chunks * cfg.codebook_size],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11),
            model,
            train,
            opt,
            step: 0,
            disc,
            exec: Execution::default(),
        })
    }

    /// Resumes from saved weights and optimizer moments at `step`.
    pub fn resume(model: Vq4dModel, train: TrainConfig, opt: Adam<f32>, step: u64) -> Result<Self> {
        let mut t = Self::new(model, train)?;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    /// Codebook entries selected at least once since the last dead-entry reset.
    pub fn codebook_usage(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    fn weights(&self) -> LossWeights {
        let c = self.model.config();
        LossWeights {
            alpha: c.loss_alpha,
            beta: c.loss_beta,
            gamma: c.loss_gamma,
        }
    }

    /// Encoder outputs `(rows, d)` for a sample, without gradients.
    fn latents(&self, s: &Sample) -> Vec<f32> {
        let g = Graph::inference(&self.model.store);
        self.model.net.encode(&g, g.constant(image_tensor(&s.matrix))).value().data().to_vec()
    }

    /// Codebook entries drawn from encoder outputs (plus small noise); `only_unused` limits to dead entries.
    fn reseed_codebook(&mut self, batch: &[&Sample], only_unused: bool) -> usize {
        let c = self.model.config().clone();
        let (n, k, dc) = (c.chunks, c.codebook_size, c.chunk_dim());
        let lat: Vec<f32> = batch.iter().flat_map(|s| self.latents(s)).collect();
        let rows = lat.len() / c.latent_dim;
        let std = {
            let m = lat.iter().map(|&v| v as f64).sum::<f64>() / lat.len() as f64;
            (lat.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / lat.len() as f64).sqrt()
        };
        let mut reset = 0;
        for ch in 0..n {
            let id = self.model.net.codebooks[ch];
            let idx = id.index();
            for e in 0..k {
                if only_unused && self.usage[ch * k + e] > 0 {
                    continue;
                }
                let r = self.rng.random_range(0..rows);
                let src = &lat[r * c.latent_dim + ch * dc..r * c.latent_dim + (ch + 1) * dc];
                let noise: Vec<f32> = (0..dc).map(|_| (self.rng.random_range(-1.0..1.0) * 0.01 * std) as f32).collect();
                let book = self.model.store.get_mut(id);
                for j in 0..dc {
                    book.data_mut()[e * dc + j] = src[j] + noise[j];
                }
                for mom in [&mut self.opt.m[idx], &mut self.opt.v[idx]].into_iter().flatten() {
                    mom.data_mut()[e * dc..(e + 1) * dc].iter_mut().for_each(|x| *x = 0.0);
                }
                reset += 1;
            }
        }
        reset
    }

    /// One optimizer step over `batch`; gradients are averaged across samples.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(invalid!("empty training batch"));
        }
        for s in batch {
            self.model.check_matrix(&s.matrix)?;
        }
        let cfg = self.model.config().clone();
        let mut reset = 0;
        if self.step == 0 {
            reset = self.reseed_codebook(batch, false);
        } else if cfg.reinit_interval > 0
            && self.step % cfg.reinit_interval == 0
            && (self.step as f64) < cfg.reinit_stop * self.train.steps as f64
        {
            reset = self.reseed_codebook(batch, true);
            self.usage.iter_mut().for_each(|u| *u = 0);
        }
        let w = self.weights();
        let mut grads = Grads::empty(self.model.store.len());
        let mut stats = StepStats {
            step: self.step,
            reset_entries: reset,
            ..Default::default()
        };
        let mut fakes = Vec::new();
        for s in batch {
            let g = Graph::train(&self.model.store);
            let (loss, parts, idx, fake) = self.sample_loss(&g, s, w)?;
            for (i, &k) in idx.iter().enumerate() {
                self.usage[(i % cfg.chunks) * cfg.codebook_size + k as usize] += 1;
            }
            stats.total += loss.0;
            stats.recon += parts[0];
            stats.flow += parts[1];
            stats.commit += parts[2];
            stats.adversarial += parts[3];
            grads.accumulate(g.backward(loss.1));
            fakes.push(fake);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv as f32);
        for v in [&mut stats.total, &mut stats.recon, &mut stats.flow, &mut stats.commit, &mut stats.adversarial] {
            *v *= inv;
        }
        stats.grad_norm = if self.train.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.train.clip_norm)
        } else {
            grads.global_norm()
        };
        let lr = cosine_lr(self.step, self.train.steps, self.train.lr, self.train.warmup, self.train.lr_floor);
        stats.lr = lr;
        self.opt.step(&mut self.model.store, &grads, lr);
        if let Some((d, opt)) = &mut self.disc {
            let mut dg = Grads::empty(d.store.len());
            for (s, fake) in batch.iter().zip(fakes.into_iter().flatten()) {
                let g = Graph::train(&d.store);
                let real = g.constant(image_tensor(&s.matrix));
                let l = d.loss(&g, real, g.constant(fake));
                dg.accumulate(g.backward(l));
            }
            dg.scale(inv as f32);
            clip_grad_norm(&mut dg, self.train.clip_norm.max(1e-12));
            opt.step(&mut d.store, &dg, lr);
        }
        self.step += 1;
        Ok(stats)
    }

    /// Loss graph for one sample. Returns (total value, total Var), component values
    /// (recon, flow, commit, adversarial), token indices and the rendered images when the
    /// discriminator is active.
    #[allow(clippy::type_complexity)]
    fn sample_loss<'g>(
        &self,
        g: &'g Graph<f32>,
        s: &Sample,
        w: LossWeights,
    ) -> Result<((f64, Var<'g, f32>), [f64; 4], Vec<u32>, Option<Tensor<f32>>)> {
        let net = &self.model.net;
        let cfg = &net.cfg;
        let m = &s.matrix;
        let (t, v, h, wd) = (m.timesteps, m.views(), m.height, m.width);
        let z = net.encode(g, g.constant(image_tensor(m)));
        let z = z.reshape(&[t * v * cfg.positions(), cfg.latent_dim]);
        let (zq, commit, idx) = net.quantize(g, z);
        let dec = net.decode(g, zq);
        let gv = dec.corrected;
        let frames = frames_of(&m.cameras)?;
        let with_flow = w.gamma > 0.0 && t > 1;
        let out = render_gaussians(
            g,
            gv.position,
            gv.scale,
            gv.rotation,
            gv.opacity,
            gv.color,
            &frames,
            (h, wd),
            cfg.background,
            with_flow,
            self.exec,
        );
        let truth = g.constant(Tensor::from_f64(&[t, v, h, wd, 3], &m.pixels));
        let flow_true = with_flow
            .then(|| g.constant(Tensor::new(&[t - 1, v, h, wd, 2], s.flow.data.clone())));
        let fake_imgs = out.images.reshape(&[t * v, h, wd, 3]);
        let logits = self.disc.as_ref().map(|(d, _)| d.logits_frozen(g, fake_imgs));
        let parts = vae_loss(out.images, truth, out.flow, flow_true, logits, commit, w)?;
        let vals = [
            parts.recon.item() as f64,
            parts.flow.map_or(0.0, |f| f.item() as f64),
            commit.item() as f64,
            parts.adversarial.map_or(0.0, |a| a.item() as f64),
        ];
        let fake = self.disc.is_some().then(|| (*fake_imgs.value()).clone());
        Ok(((parts.total.item() as f64, parts.total), vals, idx, fake))
    }
}
