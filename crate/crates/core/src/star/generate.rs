//! Autoregressive sampling with per-layer key/value caches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::StarModel;
use super::net::StarInput;
use super::ContainerMode;
use crate::autograd::{softmax_in_place, Graph, Tensor};
use crate::config::SamplingConfig;
use crate::error::{invalid, Result};
use crate::st_container::{Provenance, STContainerState};
use crate::vq4d::TokenGrid;

/// Result of one generation session.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: TokenGrid,
    /// Logits each token was drawn from, `T·P × K_c`.
    pub logits: Vec<f32>,
    /// Container state after the last group; empty when the decoder runs without container.
    pub container: STContainerState,
}

/// Draws a token from `logits`. Temperature 0 is greedy (ties to the lower index);
/// otherwise the `top_k` largest logits are kept and sampled after temperature scaling.
pub fn sample_token(logits: &[f32], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> u32 {
    assert!(!logits.is_empty());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if temperature == 0.0 {
        return order[0] as u32;
    }
    order.truncate(top_k.clamp(1, logits.len()));
    let mut p: Vec<f64> = order.iter().map(|&i| logits[i] as f64 / temperature).collect();
    softmax_in_place(&mut p);
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (&i, &pi) in order.iter().zip(&p) {
        acc += pi;
        if r < acc {
            return i as u32;
        }
    }
    *order.last().expect("non-empty") as u32
}

struct Cache {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl StarModel {
    /// Runs `rows` (`n × D`) through every layer, appending their keys/values.
    /// Memory rows only extend the caches; sequence rows return their final hidden state.
    fn push_rows(&self, caches: &mut [Cache], rows: &[f32], memory: bool) -> Vec<f32> {
        let d = self.net.cfg.dim;
        let n = rows.len() / d;
        let g = Graph::inference(&self.store);
        let mut x = g.constant(Tensor::new(&[1, n, d], rows.to_vec()));
        for (layer, cache) in self.net.layers.iter().zip(caches.iter_mut()) {
            let (k, v) = layer.keys_values(&g, x);
            cache.k.extend_from_slice(k.value().data());
            cache.v.extend_from_slice(v.value().data());
            if memory {
                continue;
            }
            debug_assert_eq!(n, 1);
            let len = cache.k.len() / d;
            let kt = g.constant(Tensor::new(&[1, len, d], cache.k.clone()));
            let vt = g.constant(Tensor::new(&[1, len, d], cache.v.clone()));
            x = layer.step(&g, x, kt, vt);
        }
        if memory {
            Vec::new()
        } else {
            x.value().data().to_vec()
        }
    }

    fn head(&self, hidden: &[f32]) -> Vec<f32> {
        let g = Graph::inference(&self.store);
        let h = g.constant(Tensor::new(&[1, hidden.len()], hidden.to_vec()));
        self.net.head.forward(&g, self.net.norm.forward(&g, h)).value().data().to_vec()
    }

    /// Generates every group token conditioned on a prompt (hashed words), video prefix tokens and camera rays.
    pub fn generate(
        &self,
        words: &[usize],
        video: &[u32],
        rays: &[f64],
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Generation> {
        sampling.validate()?;
        let net = &self.net;
        let dims = &net.dims;
        let (dm, p) = (net.cfg.dim, dims.group_len());
        let tp = dims.timesteps * p;
        let placeholder = vec![0u32; tp];
        let probe = StarInput {
            text: words,
            video,
            rays,
            tokens: &placeholder,
        };
        net.check_input(&probe, tp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let g = Graph::inference(&self.store);
        let spe = net.spe_table(&g, rays).value();
        let tok = self.store.get(net.tok_emb);
        let chunk = self.store.get(net.chunk_emb);
        let sep = self.store.get(net.sep);
        let mut caches: Vec<Cache> = net.layers.iter().map(|_| Cache { k: Vec::new(), v: Vec::new() }).collect();
        let prefix = net.prefix_rows(&g, words, video).value();
        for row in prefix.data().chunks(dm) {
            self.push_rows(&mut caches, row, false);
        }

        // token embedding at the encoding of group slot `k`, summed in the same order as the forward pass
        let embed = |base: &[f32], k: usize| -> Vec<f32> {
            let (r, c) = net.spe_index(k);
            let s = &spe.data()[r * dm..(r + 1) * dm];
            let ch = &chunk.data()[c * dm..(c + 1) * dm];
            (0..dm).map(|i| base[i] + s[i] + ch[i]).collect()
        };
        let tok_row = |t: u32| &tok.data()[t as usize * dm..(t as usize + 1) * dm];

        let mut state = STContainerState::new(dm);
        let mut additive: Option<Vec<f32>> = None;
        let mut tokens: Vec<u32> = Vec::with_capacity(tp);
        let mut all_logits = Vec::with_capacity(tp * dims.vocab);
        let all_tags = net.tags(tp);
        let complete_group = |state: &mut STContainerState, tokens: &[u32], t: usize| -> Result<Vec<f32>> {
            let feats: Vec<f32> = (t * p..(t + 1) * p).flat_map(|k| embed(tok_row(tokens[k]), k)).collect();
            let tags: Vec<Provenance> = all_tags[t * p..(t + 1) * p].to_vec();
            state.update(&net.container, &self.store, &feats, &tags)?;
            Ok(state.inject(&net.container, &self.store))
        };
        for k in 0..tp {
            let t = k / p;
            if k % p == 0 && t > 0 && net.mode != ContainerMode::None {
                let cond = complete_group(&mut state, &tokens, t - 1)?;
                match net.mode {
                    ContainerMode::Prefix => {
                        self.push_rows(&mut caches, &cond, true);
                    }
                    ContainerMode::Additive => {
                        let m = cond.len() / dm;
                        let g = Graph::inference(&self.store);
                        let c = g.constant(Tensor::new(&[m, dm], cond));
                        additive = Some(c.mean_axis(0, true).value().data().to_vec());
                    }
                    ContainerMode::None => {}
                }
            }
            let base = if k == 0 { sep.data() } else { tok_row(tokens[k - 1]) };
            let mut row = embed(base, k);
            if let Some(a) = &additive {
                row.iter_mut().zip(a).for_each(|(r, v)| *r += v);
            }
            let hidden = self.push_rows(&mut caches, &row, false);
            let logits = self.head(&hidden);
            let next = sample_token(&logits, sampling.temperature, sampling.top_k, &mut rng);
            if next as usize >= dims.vocab {
                return Err(invalid!("sampled token {next} outside the vocabulary"));
            }
            tokens.push(next);
            all_logits.extend_from_slice(&logits);
        }
        if net.mode != ContainerMode::None {
            complete_group(&mut state, &tokens, dims.timesteps - 1)?;
        }
        let grid = TokenGrid {
            timesteps: dims.timesteps,
            views: dims.views,
            h: dims.latent_h,
            w: dims.latent_w,
            chunks: dims.chunks,
            vocab: dims.vocab,
            data: tokens,
        };
        grid.validate()?;
        Ok(Generation {
            tokens: grid,
            logits: all_logits,
            container: state,
        })
    }
}
