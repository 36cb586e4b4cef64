//! Plain-data model interface, chunked cross-entropy and the training loop.

use std::sync::Arc;

use super::layout::hash_words;
use super::net::{StarInput, StarNet};
use super::{StarConfig, StarDims};
use crate::autograd::optim::{clip_grad_norm, cosine_lr, Adam};
use crate::autograd::{log_sum_exp, Grads, Graph, ParamStore, Var};
use crate::config::{Section, TrainConfig};
use crate::error::{invalid, Result};
use crate::scene_synth::{pluecker_grid, CameraPose, Sample};
use crate::st_container::{ClusterResult, ContainerConfig, Provenance};
use crate::vq4d::{quantize, TokenGrid, Vq4dModel};

/// Decoder weights plus the model operations on plain data.
#[derive(Clone)]
pub struct StarModel {
    pub net: Arc<StarNet>,
    pub store: ParamStore<f32>,
}

impl StarModel {
    pub fn new(cfg: &StarConfig, container: &ContainerConfig, dims: &StarDims) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = StarNet::new(cfg, container, dims, &mut store)?;
        Ok(Self {
            net: Arc::new(net),
            store,
        })
    }

    /// Config text stored alongside the weights in checkpoints.
    pub fn config_text(&self) -> String {
        format!(
            "{}{}{}",
            self.net.cfg.to_text(),
            self.net.container.cfg.to_text(),
            self.net.dims.to_text()
        )
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        Self::new(
            &StarConfig::from_text(text)?,
            &ContainerConfig::from_text(text)?,
            &StarDims::from_text(text)?,
        )
    }

    pub fn dims(&self) -> &StarDims {
        &self.net.dims
    }

    /// Container clustering of the full teacher-forced pool (all `T` groups) and the provenance of each entry.
    pub fn container_report(&self, ex: &StarExample) -> Result<(ClusterResult, Vec<Provenance>)> {
        let net = &self.net;
        let tp = net.dims.timesteps * net.dims.group_len();
        net.check_input(&ex.input(), tp)?;
        let g = Graph::inference(&self.store);
        let spe = net.spe_table(&g, &ex.rays);
        let pool = net.pool_features(&g, &ex.tokens, spe);
        let tags = net.tags(tp);
        let groups: Vec<usize> = tags.iter().map(|x| x.group).collect();
        let (_, c) = net.container.summarize(&g, pool, &groups)?;
        Ok((c, tags))
    }

    /// Teacher-forced logits `(T·P, K_c)` as a flat row-major buffer.
    pub fn logits(&self, ex: &StarExample) -> Result<Vec<f32>> {
        let g = Graph::inference(&self.store);
        Ok(self.net.forward(&g, &ex.input())?.logits.value().data().to_vec())
    }

    /// Teacher-forced chunked CE and its per-group terms.
    pub fn loss(&self, ex: &StarExample) -> Result<(f64, Vec<f64>)> {
        let logits = self.logits(ex)?;
        let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        chunked_ce(&l, self.dims().vocab, &ex.tokens, self.dims().group_len())
    }
}

/// Sum over groups of the mean token cross-entropy within each group.
///
/// `logits` is `targets.len() × vocab`, row-major; groups are consecutive runs of `group_len` rows.
pub fn chunked_ce(logits: &[f64], vocab: usize, targets: &[u32], group_len: usize) -> Result<(f64, Vec<f64>)> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(invalid!("{} logits for {} targets over {vocab} classes", logits.len(), targets.len()));
    }
    if group_len == 0 || targets.len() % group_len != 0 {
        return Err(invalid!("{} targets do not split into groups of {group_len}", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid!("target {bad} outside the vocabulary of {vocab}"));
    }
    let per: Vec<f64> = targets
        .chunks(group_len)
        .zip(logits.chunks(group_len * vocab))
        .map(|(tg, lg)| {
            tg.iter()
                .zip(lg.chunks(vocab))
                .map(|(&t, row)| log_sum_exp(row) - row[t as usize])
                .sum::<f64>()
                / group_len as f64
        })
        .collect();
    Ok((per.iter().sum(), per))
}

/// Graph form of [`chunked_ce`].
fn chunked_ce_var<'g>(logits: Var<'g, f32>, targets: &[u32], group_len: usize) -> Var<'g, f32> {
    let groups = targets.len() / group_len;
    let terms: Vec<Var<'g, f32>> = (0..groups)
        .map(|t| {
            let tg: Vec<usize> = targets[t * group_len..(t + 1) * group_len].iter().map(|&x| x as usize).collect();
            logits.narrow(0, t * group_len, group_len).cross_entropy_rows(&tg).mean_all()
        })
        .collect();
    Var::concat(&terms.iter().map(|v| v.reshape(&[1])).collect::<Vec<_>>(), 0).sum_all()
}

/// One training object prepared for the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StarExample {
    pub words: Vec<usize>,
    pub video: Vec<u32>,
    pub rays: Vec<f64>,
    pub tokens: Vec<u32>,
}

/// Plücker rays of each camera over the latent grid, `(V, h·w, 6)` flattened.
pub fn camera_rays(cameras: &[CameraPose], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cameras.len() * h * w * 6);
    for c in cameras {
        for r in pluecker_grid(c, h, w)? {
            out.extend_from_slice(&r.to_array());
        }
    }
    Ok(out)
}

/// Tokens of a monocular video (`T` frames of `H × W × 3`, `(t, y, x, c)` order)
/// under the frozen VQ encoder and quantizer.
pub fn video_tokens(vq: &Vq4dModel, frames: &[f64], timesteps: usize, height: usize, width: usize) -> Result<Vec<u32>> {
    let z = vq.encode_images(frames, timesteps, 1, height, width)?;
    let mut book = vq.codebook();
    Ok(quantize(&z, &mut book)?.0.data)
}

impl StarExample {
    pub fn new(vq: &Vq4dModel, dims: &StarDims, buckets: usize, sample: &Sample) -> Result<Self> {
        if StarDims::from_vq(vq.config()) != *dims {
            return Err(invalid!("decoder token geometry {:?} differs from the VQ-VAE's", dims));
        }
        let m = &sample.matrix;
        vq.check_matrix(m)?;
        let tokens: TokenGrid = vq.tokenize(m)?;
        let frames: Vec<f64> = (0..m.timesteps).flat_map(|t| m.frame(t, 0).to_vec()).collect();
        Ok(Self {
            words: hash_words(&sample.caption, buckets),
            video: video_tokens(vq, &frames, m.timesteps, m.height, m.width)?,
            rays: camera_rays(&m.cameras, dims.latent_h, dims.latent_w)?,
            tokens: tokens.data,
        })
    }

    pub fn input(&self) -> StarInput<'_> {
        StarInput {
            text: &self.words,
            video: &self.video,
            rays: &self.rays,
            tokens: &self.tokens,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StarStepStats {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub per_group: Vec<f64>,
    pub grad_norm: f64,
}

pub struct StarTrainer {
    pub model: StarModel,
    pub train: TrainConfig,
    pub opt: Adam<f32>,
    pub step: u64,
}

impl StarTrainer {
    pub fn new(model: StarModel, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let mut opt = Adam::new(model.store.len());
        opt.weight_decay = train.weight_decay;
        Ok(Self {
            model,
            train,
            opt,
            step: 0,
        })
    }

    pub fn resume(model: StarModel, train: TrainConfig, opt: Adam<f32>, step: u64) -> Result<Self> {
        let mut t = Self::new(model, train)?;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    /// One optimizer step; gradients are averaged over the batch.
    pub fn step(&mut self, batch: &[&StarExample]) -> Result<StarStepStats> {
        if batch.is_empty() {
            return Err(invalid!("empty training batch"));
        }
        let p = self.model.dims().group_len();
        let mut grads = Grads::empty(self.model.store.len());
        let mut stats = StarStepStats {
            step: self.step,
            per_group: vec![0.0; self.model.dims().timesteps],
            ..Default::default()
        };
        for ex in batch {
            let g = Graph::train(&self.model.store);
            let out = self.model.net.forward(&g, &ex.input())?;
            let loss = chunked_ce_var(out.logits, &ex.tokens, p);
            let logits: Vec<f64> = out.logits.value().to_f64_vec();
            let (_, per) = chunked_ce(&logits, self.model.dims().vocab, &ex.tokens, p)?;
            for (a, b) in stats.per_group.iter_mut().zip(per) {
                *a += b;
            }
            stats.total += loss.item() as f64;
            grads.accumulate(g.backward(loss));
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv as f32);
        stats.total *= inv;
        stats.per_group.iter_mut().for_each(|v| *v *= inv);
        stats.grad_norm = if self.train.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.train.clip_norm)
        } else {
            grads.global_norm()
        };
        stats.lr = cosine_lr(self.step, self.train.steps, self.train.lr, self.train.warmup, self.train.lr_floor);
        self.opt.step(&mut self.model.store, &grads, stats.lr);
        self.step += 1;
        Ok(stats)
    }
}
