//! Parameter layout and the teacher-forced forward pass.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{Segment, SequenceLayout};
use super::{ContainerMode, StarConfig, StarDims};
use crate::autograd::nn::{sinusoidal, Attention, Linear, Mlp, RmsNorm, SwiGlu};
use crate::autograd::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{invalid, Result};
use crate::st_container::{ClusterResult, ContainerConfig, ContainerNet, Provenance};

const TIME_PERIOD: f64 = 100.0;

/// Pre-norm decoder block: self-attention (optionally over extra memory entries) and SwiGLU.
#[derive(Clone, Debug)]
pub(super) struct Layer {
    pub norm1: RmsNorm,
    pub attn: Attention,
    pub norm2: RmsNorm,
    pub ffn: SwiGlu,
}

impl Layer {
    fn new<E: Real>(init: &mut Init<'_, E>, name: &str, cfg: &StarConfig) -> Self {
        init.scope(name, |init| Self {
            norm1: RmsNorm::new(init, "norm1", cfg.dim),
            attn: Attention::with_out_std(init, "attn", cfg.dim, cfg.heads, 0.5 / (cfg.dim as f64).sqrt()),
            norm2: RmsNorm::new(init, "norm2", cfg.dim),
            ffn: SwiGlu::new(init, "ffn", cfg.dim, cfg.ffn_hidden),
        })
    }

    /// `x` is `(1, L, D)`, `mem` `(1, M, D)`; the mask covers `(L, M + L)` keys.
    fn forward<'g, E: Real>(
        &self,
        g: &'g Graph<E>,
        x: Var<'g, E>,
        mem: Option<Var<'g, E>>,
        mask: &Arc<Tensor<E>>,
    ) -> Var<'g, E> {
        let h = self.norm1.forward(g, x);
        let kv = match mem {
            Some(m) => Var::concat(&[self.norm1.forward(g, m), h], 1),
            None => h,
        };
        let x = x + self.attn.forward(g, h, kv, Some(mask));
        x + self.ffn.forward(g, self.norm2.forward(g, x))
    }

    /// Projected keys and values of memory or sequence rows `(1, n, D)`.
    pub fn keys_values<'g, E: Real>(&self, g: &'g Graph<E>, rows: Var<'g, E>) -> (Var<'g, E>, Var<'g, E>) {
        self.attn.project_kv(g, self.norm1.forward(g, rows))
    }

    /// One new row `(1, 1, D)` attending to already projected keys/values `(1, n, D)`.
    pub fn step<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>, k: Var<'g, E>, v: Var<'g, E>) -> Var<'g, E> {
        let h = self.norm1.forward(g, x);
        let x = x + self.attn.forward_projected(g, h, k, v, None);
        x + self.ffn.forward(g, self.norm2.forward(g, x))
    }
}

/// Conditioning inputs and ground-truth (or partially generated) group tokens.
#[derive(Clone, Copy, Debug)]
pub struct StarInput<'a> {
    /// Hashed word ids of the prompt.
    pub text: &'a [usize],
    /// Video prefix tokens, `T·h·w·n`.
    pub video: &'a [u32],
    /// Plücker rays of every `(view, cell)`, `V·h·w·6`.
    pub rays: &'a [f64],
    /// Group tokens in layout order, `T·V·h·w·n`.
    pub tokens: &'a [u32],
}

pub struct StarOutput<'g, E: Real> {
    /// `(T·V·h·w·n, K_c)`; row `k` predicts group token `k`.
    pub logits: Var<'g, E>,
    /// Clustering behind the conditioning of group `t`, at index `t − 1`.
    pub clusters: Vec<ClusterResult>,
    /// Provenance of the pool used for group `t`, at index `t − 1`.
    pub pool_tags: Vec<Vec<Provenance>>,
}

pub struct StarNet {
    pub cfg: StarConfig,
    pub dims: StarDims,
    pub mode: ContainerMode,
    pub(super) tok_emb: ParamId,
    pub(super) chunk_emb: ParamId,
    text_table: ParamId,
    text_mlp: Mlp,
    text_seg: ParamId,
    video_mlp: Mlp,
    video_pos: ParamId,
    pub(super) sep: ParamId,
    ray_proj: Linear,
    time_proj: Linear,
    pub(super) layers: Vec<Layer>,
    pub(super) norm: RmsNorm,
    pub(super) head: Linear,
    pub container: ContainerNet,
}

impl StarNet {
    pub fn new<E: Real>(cfg: &StarConfig, ccfg: &ContainerConfig, dims: &StarDims, store: &mut ParamStore<E>) -> Result<Self> {
        cfg.validate()?;
        ccfg.validate()?;
        dims.validate()?;
        if cfg.dim % ccfg.heads != 0 {
            return Err(invalid!("star.dim {} is not divisible by container.heads {}", cfg.dim, ccfg.heads));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(store, &mut rng);
        let d = cfg.dim;
        Ok(Self {
            cfg: cfg.clone(),
            dims: dims.clone(),
            mode: cfg.mode()?,
            tok_emb: init.normal("tok_emb", &[dims.vocab, d], 0.5),
            chunk_emb: init.normal("chunk_emb", &[dims.chunks, d], 0.5),
            text_table: init.normal("text.table", &[cfg.text_buckets, cfg.text_dim], 1.0),
            text_mlp: Mlp::new(&mut init, "text.mlp", cfg.text_dim, d, d),
            text_seg: init.normal("text.segment", &[1, d], 0.5),
            video_mlp: Mlp::new(&mut init, "video.mlp", d, d, d),
            video_pos: init.normal("video.segment", &[dims.video_len(), d], 0.5),
            sep: init.normal("sep", &[1, d], 0.5),
            ray_proj: Linear::new(&mut init, "spe.ray", 6, d, true),
            time_proj: Linear::new(&mut init, "spe.time", cfg.time_dim, d, true),
            layers: (0..cfg.layers).map(|i| Layer::new(&mut init, &format!("layer.{i}"), cfg)).collect(),
            norm: RmsNorm::new(&mut init, "norm", d),
            head: Linear::with_std(&mut init, "head", d, dims.vocab, false, 0.02),
            container: ContainerNet::new(&mut init, "container", d, d, ccfg),
        })
    }

    pub fn layout(&self, text_len: usize) -> SequenceLayout {
        SequenceLayout::new(&self.dims, text_len)
    }

    pub(super) fn check_input(&self, x: &StarInput<'_>, tokens_len: usize) -> Result<()> {
        let d = &self.dims;
        if x.video.len() != d.video_len() {
            return Err(invalid!("video prefix has {} tokens, expected {}", x.video.len(), d.video_len()));
        }
        if x.rays.len() != d.views * d.spatial() * 6 {
            return Err(invalid!("expected {} Plücker values, got {}", d.views * d.spatial() * 6, x.rays.len()));
        }
        if x.tokens.len() != tokens_len {
            return Err(invalid!("expected {tokens_len} group tokens, got {}", x.tokens.len()));
        }
        if let Some(&bad) = x.video.iter().chain(x.tokens).find(|&&t| t as usize >= d.vocab) {
            return Err(invalid!("token {bad} outside the vocabulary of {}", d.vocab));
        }
        if let Some(&bad) = x.text.iter().find(|&&b| b >= self.cfg.text_buckets) {
            return Err(invalid!("word bucket {bad} outside 0..{}", self.cfg.text_buckets));
        }
        let len = SequenceLayout::new(d, x.text.len()).input_len();
        if len > self.cfg.max_context {
            return Err(invalid!("sequence of {len} positions exceeds the maximum context {}", self.cfg.max_context));
        }
        Ok(())
    }

    /// Learned projection of the sinusoidal code of 1-based timestep `t`.
    pub fn timestep_embed<'g, E: Real>(&self, g: &'g Graph<E>, t: usize) -> Result<Var<'g, E>> {
        if t == 0 || t > self.dims.timesteps {
            return Err(invalid!("timestep {t} outside 1..={}", self.dims.timesteps));
        }
        let code = sinusoidal(t as f64, self.cfg.time_dim, TIME_PERIOD);
        Ok(self.time_proj.forward(g, g.constant(Tensor::from_f64(&[1, self.cfg.time_dim], &code))))
    }

    /// Encodings of every `(t, v, cell)`, `(T·V·h·w, D)`: ray projection plus timestep embedding.
    pub fn spe_table<'g, E: Real>(&self, g: &'g Graph<E>, rays: &[f64]) -> Var<'g, E> {
        let (t, vs, d) = (self.dims.timesteps, self.dims.views * self.dims.spatial(), self.cfg.dim);
        let r = self.ray_proj.forward(g, g.constant(Tensor::from_f64(&[vs, 6], rays)));
        let codes: Vec<f64> = (1..=t).flat_map(|i| sinusoidal(i as f64, self.cfg.time_dim, TIME_PERIOD)).collect();
        let times = self.time_proj.forward(g, g.constant(Tensor::from_f64(&[t, self.cfg.time_dim], &codes)));
        (r.reshape(&[1, vs, d]) + times.reshape(&[t, 1, d])).reshape(&[t * vs, d])
    }

    /// Row of [`Self::spe_table`] and chunk id for group token `k`.
    pub fn spe_index(&self, k: usize) -> (usize, usize) {
        let n = self.dims.chunks;
        (k / n, k % n)
    }

    pub fn embed_text<'g, E: Real>(&self, g: &'g Graph<E>, words: &[usize]) -> Option<Var<'g, E>> {
        if words.is_empty() {
            return None;
        }
        let rows = g.param(self.text_table).index_rows(words);
        Some(self.text_mlp.forward(g, rows))
    }

    /// Video tokens through the shared token embedding and the image-tokenizer MLP.
    pub fn embed_video<'g, E: Real>(&self, g: &'g Graph<E>, video: &[u32]) -> Var<'g, E> {
        let idx: Vec<usize> = video.iter().map(|&t| t as usize).collect();
        self.video_mlp.forward(g, g.param(self.tok_emb).index_rows(&idx))
    }

    /// Text and video prefix rows with their segment embeddings, `(words + T·h·w·n, D)`.
    pub fn prefix_rows<'g, E: Real>(&self, g: &'g Graph<E>, words: &[usize], video: &[u32]) -> Var<'g, E> {
        let v = self.embed_video(g, video) + g.param(self.video_pos);
        match self.embed_text(g, words) {
            Some(t) => Var::concat(&[t + g.param(self.text_seg), v], 0),
            None => v,
        }
    }

    /// Token embedding plus the encoding of slot `k`, for each `(token, k)`.
    fn embed_at<'g, E: Real>(&self, g: &'g Graph<E>, base: Var<'g, E>, spe: Var<'g, E>, slots: &[usize]) -> Var<'g, E> {
        let (rows, chunks): (Vec<usize>, Vec<usize>) = slots.iter().map(|&k| self.spe_index(k)).unzip();
        base + spe.index_rows(&rows) + g.param(self.chunk_emb).index_rows(&chunks)
    }

    /// Embeddings of group tokens at their own slots; these fill the container pool.
    pub fn pool_features<'g, E: Real>(&self, g: &'g Graph<E>, tokens: &[u32], spe: Var<'g, E>) -> Var<'g, E> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let slots: Vec<usize> = (0..tokens.len()).collect();
        self.embed_at(g, g.param(self.tok_emb).index_rows(&idx), spe, &slots)
    }

    /// Provenance of group tokens `0..len`.
    pub fn tags(&self, len: usize) -> Vec<Provenance> {
        let (p, per_view) = (self.dims.group_len(), self.dims.spatial() * self.dims.chunks);
        (0..len)
            .map(|k| Provenance {
                group: k / p,
                view: (k % p) / per_view,
                position: k % per_view,
            })
            .collect()
    }

    /// Conditioning vectors for groups `1..T` from pools of the preceding groups.
    fn conditions<'g, E: Real>(
        &self,
        g: &'g Graph<E>,
        pool: Var<'g, E>,
    ) -> Result<(Vec<Var<'g, E>>, Vec<ClusterResult>, Vec<Vec<Provenance>>)> {
        let p = self.dims.group_len();
        let mut conds = Vec::new();
        let mut clusters = Vec::new();
        let mut tags = Vec::new();
        for t in 1..self.dims.timesteps {
            let tg = self.tags(t * p);
            let groups: Vec<usize> = tg.iter().map(|x| x.group).collect();
            let (refined, c) = self.container.summarize(g, pool.narrow(0, 0, t * p), &groups)?;
            conds.push(self.container.inject(g, refined));
            clusters.push(c);
            tags.push(tg);
        }
        Ok((conds, clusters, tags))
    }

    /// Attention mask over `[memory][sequence]` keys for the decoder inputs.
    fn mask<E: Real>(&self, layout: &SequenceLayout, mem_groups: &[usize]) -> Tensor<E> {
        let l = layout.input_len();
        let mt = mem_groups.len();
        let mut m = vec![E::neg_infinity(); l * (mt + l)];
        for p in 0..l {
            let row = &mut m[p * (mt + l)..(p + 1) * (mt + l)];
            if let Some(target) = layout.target_of(p) {
                for (j, &grp) in mem_groups.iter().enumerate() {
                    if target.group >= grp {
                        row[j] = E::zero();
                    }
                }
            }
            for v in &mut row[mt..mt + p + 1] {
                *v = E::zero();
            }
        }
        Tensor::new(&[l, mt + l], m)
    }

    /// Teacher-forced pass over the whole sequence.
    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: &StarInput<'_>) -> Result<StarOutput<'g, E>> {
        self.forward_with(g, x, self.dims.timesteps)
    }

    /// Teacher-forced pass keeping only the container conditioning of groups `< keep`.
    pub fn forward_with<'g, E: Real>(&self, g: &'g Graph<E>, x: &StarInput<'_>, keep: usize) -> Result<StarOutput<'g, E>> {
        let d = &self.dims;
        let tp = d.timesteps * d.group_len();
        self.check_input(x, tp)?;
        let layout = self.layout(x.text.len());
        let spe = self.spe_table(g, x.rays);
        let pool = self.pool_features(g, x.tokens, spe);
        let (conds, clusters, pool_tags) = match self.mode {
            ContainerMode::None => (Vec::new(), Vec::new(), Vec::new()),
            _ => self.conditions(g, pool)?,
        };
        let conds: Vec<Var<'g, E>> = conds.into_iter().take(keep.saturating_sub(1)).collect();

        let prev: Vec<usize> = x.tokens[..tp - 1].iter().map(|&t| t as usize).collect();
        let shifted = Var::concat(&[g.param(self.sep), g.param(self.tok_emb).index_rows(&prev)], 0);
        let targets: Vec<usize> = (0..tp).collect();
        let mut group_in = self.embed_at(g, shifted, spe, &targets);
        if self.mode == ContainerMode::Additive {
            let p = d.group_len();
            let mut parts = vec![g.constant(Tensor::zeros(&[p, self.cfg.dim]))];
            parts.extend(conds.iter().map(|c| c.mean_axis(0, true).broadcast_to(&[p, self.cfg.dim])));
            parts.extend((parts.len()..d.timesteps).map(|_| g.constant(Tensor::zeros(&[p, self.cfg.dim]))));
            group_in = group_in + Var::concat(&parts, 0);
        }
        let l = layout.input_len();
        let prefix = self.prefix_rows(g, x.text, x.video);
        let mut h = Var::concat(&[prefix, group_in], 0).reshape(&[1, l, self.cfg.dim]);

        let (mem, mem_groups) = if self.mode == ContainerMode::Prefix && !conds.is_empty() {
            let groups: Vec<usize> = conds
                .iter()
                .enumerate()
                .flat_map(|(i, c)| std::iter::repeat_n(i + 1, c.shape()[0]))
                .collect();
            let m = Var::concat(&conds, 0);
            let n = m.shape()[0];
            (Some(m.reshape(&[1, n, self.cfg.dim])), groups)
        } else {
            (None, Vec::new())
        };
        let mask = Arc::new(self.mask(&layout, &mem_groups));
        for layer in &self.layers {
            h = layer.forward(g, h, mem, &mask);
        }
        let out = h.reshape(&[l, self.cfg.dim]).narrow(0, layout.sep_index(), tp);
        let logits = self.head.forward(g, self.norm.forward(g, out));
        debug_assert_eq!(layout.slots[layout.sep_index()].kind, Segment::Sep);
        Ok(StarOutput {
            logits,
            clusters,
            pool_tags,
        })
    }
}
