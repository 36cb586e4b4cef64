//! Graph-level VQ-VAE network.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gaussians::{QUAT_TOLERANCE, SCALE_FLOOR};
use super::{nearest_entry, VqConfig, PARAM_DIM};
use crate::autograd::nn::{Attention, Conv, Linear, Mlp, RmsNorm};
use crate::autograd::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

/// Dynamic Gaussian parameters as `(T, n_g, k)` Vars.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars<'g, E: Real> {
    pub position: Var<'g, E>,
    pub scale: Var<'g, E>,
    pub rotation: Var<'g, E>,
    pub opacity: Var<'g, E>,
    pub color: Var<'g, E>,
}

impl<'g, E: Real> GaussianVars<'g, E> {
    /// `(T, n_g, 14)` in the flattened parameter order.
    pub fn params(&self) -> Var<'g, E> {
        Var::concat(&[self.position, self.scale, self.rotation, self.opacity, self.color], 2)
    }

    pub fn from_params(p: Var<'g, E>) -> Self {
        Self {
            position: p.narrow(2, 0, 3),
            scale: p.narrow(2, 3, 3),
            rotation: p.narrow(2, 6, 4),
            opacity: p.narrow(2, 10, 1),
            color: p.narrow(2, 11, 3),
        }
    }
}

/// Decoder outputs for one object.
pub struct Decoded<'g, E: Real> {
    /// Continuous tokens `(T·V, N, C)`.
    pub tokens: Var<'g, E>,
    pub coarse: GaussianVars<'g, E>,
    /// `(T, n_g, 14)`.
    pub offsets: Var<'g, E>,
    pub corrected: GaussianVars<'g, E>,
}

struct Block {
    norm1: RmsNorm,
    attn: Attention,
    norm2: RmsNorm,
    mlp: Mlp,
}

impl Block {
    fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, heads: usize) -> Self {
        init.scope(name, |init| Self {
            norm1: RmsNorm::new(init, "norm1", dim),
            attn: Attention::new(init, "attn", dim, heads),
            norm2: RmsNorm::new(init, "norm2", dim),
            mlp: Mlp::new(init, "mlp", dim, 2 * dim, dim),
        })
    }

    fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        let h = self.norm1.forward(g, x);
        let x = x + self.attn.forward(g, h, h, None);
        x + self.mlp.forward(g, self.norm2.forward(g, x))
    }
}

/// Cross-attention from queries to a key/value set followed by a feed-forward layer.
struct CrossBlock {
    norm_q: RmsNorm,
    norm_kv: RmsNorm,
    attn: Attention,
    norm2: RmsNorm,
    mlp: Mlp,
}

impl CrossBlock {
    fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, heads: usize) -> Self {
        init.scope(name, |init| Self {
            norm_q: RmsNorm::new(init, "norm_q", dim),
            norm_kv: RmsNorm::new(init, "norm_kv", dim),
            attn: Attention::new(init, "attn", dim, heads),
            norm2: RmsNorm::new(init, "norm2", dim),
            mlp: Mlp::new(init, "mlp", dim, 2 * dim, dim),
        })
    }

    fn attend<'g, E: Real>(&self, g: &'g Graph<E>, q: Var<'g, E>, kv: Var<'g, E>) -> Var<'g, E> {
        self.attn.forward(g, self.norm_q.forward(g, q), self.norm_kv.forward(g, kv), None)
    }

    fn ffn<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        x + self.mlp.forward(g, self.norm2.forward(g, x))
    }
}

/// Parameter layout of the VQ-VAE. Weights live in a separate [`ParamStore`].
pub struct Vq4dNet {
    pub cfg: VqConfig,
    enc: Vec<Conv>,
    enc_out: Linear,
    /// One `(K_c, d/n)` table per chunk.
    pub codebooks: Vec<ParamId>,
    fac_in: Linear,
    fac_pos: ParamId,
    fac_block: Block,
    view_pos: ParamId,
    slots: ParamId,
    base: ParamId,
    gs_block: CrossBlock,
    gs_head: Linear,
    stop_embed: Linear,
    stop_time: ParamId,
    stop_block: CrossBlock,
    unet_in: Linear,
    unet_down: Conv,
    unet_mid: Conv,
    unet_up: Linear,
    stop_norm: RmsNorm,
    /// Final offset projection, zero-initialized.
    pub stop_head: Linear,
}

impl Vq4dNet {
    pub fn new<E: Real>(cfg: &VqConfig, store: &mut ParamStore<E>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(store, &mut rng);
        let (c, d, tc) = (cfg.enc_channels, cfg.latent_dim, cfg.token_dim);
        let (ng, u) = (cfg.gaussians, cfg.unet_channels);
        let enc = init.scope("enc", |init| {
            vec![
                Conv::new(init, "c1", 2, 3, c, 4, 2, 1),
                Conv::new(init, "c2", 2, c, 2 * c, 4, 2, 1),
                Conv::new(init, "c3", 2, 2 * c, 2 * c, 4, 2, 1),
            ]
        });
        let enc_out = Linear::new(&mut init, "enc.out", 2 * c, d, true);
        let codebooks = (0..cfg.chunks)
            .map(|i| init.normal(&format!("codebook.{i}"), &[cfg.codebook_size, cfg.chunk_dim()], 1.0))
            .collect();
        let fac_in = Linear::new(&mut init, "fac.in", d, tc, true);
        let fac_pos = init.normal("fac.pos", &[cfg.positions(), tc], 0.02);
        let fac_block = Block::new(&mut init, "fac.block", tc, cfg.heads);
        let view_pos = init.normal("gs.view_pos", &[cfg.views * cfg.positions(), tc], 0.02);
        let slots = init.normal("gs.slots", &[ng, tc], 1.0);
        let base = {
            // Anchor positions spread over the object volume; other raw parameters start at zero.
            let mut data = vec![0.0f64; ng * PARAM_DIM];
            for i in 0..ng {
                for k in 0..3 {
                    data[i * PARAM_DIM + k] = rand::Rng::random_range(init.rng, -0.4..0.4);
                }
            }
            init.tensor("gs.base", Tensor::from_f64(&[ng, PARAM_DIM], &data))
        };
        let gs_block = CrossBlock::new(&mut init, "gs.block", tc, cfg.heads);
        let gs_head = Linear::with_std(&mut init, "gs.head", tc, PARAM_DIM, true, 0.01);
        let stop_embed = Linear::new(&mut init, "stop.embed", PARAM_DIM, tc, true);
        let stop_time = init.normal("stop.time", &[cfg.timesteps, tc], 0.02);
        let stop_block = CrossBlock::new(&mut init, "stop.block", tc, cfg.heads);
        let unet_in = Linear::new(&mut init, "stop.unet.in", tc, u, true);
        let unet_down = Conv::new(&mut init, "stop.unet.down", 3, u, u, 3, 1, 1);
        let unet_mid = Conv::new(&mut init, "stop.unet.mid", 3, u, u, 3, 1, 1);
        let unet_up = Linear::new(&mut init, "stop.unet.up", u, u, true);
        let stop_norm = RmsNorm::new(&mut init, "stop.norm", tc + u);
        let stop_head = Linear::with_std(&mut init, "stop.head", tc + u, PARAM_DIM, true, 0.0);
        Self {
            cfg: cfg.clone(),
            enc,
            enc_out,
            codebooks,
            fac_in,
            fac_pos,
            fac_block,
            view_pos,
            slots,
            base,
            gs_block,
            gs_head,
            stop_embed,
            stop_time,
            stop_block,
            unet_in,
            unet_down,
            unet_mid,
            unet_up,
            stop_norm,
            stop_head,
        }
    }

    /// Images `(B, H, W, 3)` in `[0, 1]` to latents `(B, h, w, d)`.
    pub fn encode<'g, E: Real>(&self, g: &'g Graph<E>, images: Var<'g, E>) -> Var<'g, E> {
        let mut x = images.scale(2.0).add_scalar(-1.0);
        for conv in &self.enc {
            x = conv.forward(g, x).silu();
        }
        self.enc_out.forward(g, x)
    }

    /// Nearest-entry indices for latent rows `(rows, d)`, layout `(row, chunk)`.
    pub fn assign<E: Real>(&self, g: &Graph<E>, z: &Tensor<E>) -> Vec<u32> {
        let (n, dc) = (self.cfg.chunks, self.cfg.chunk_dim());
        let books: Vec<&Tensor<E>> = self.codebooks.iter().map(|&id| g.param_value(id)).collect();
        let mut idx = Vec::with_capacity(z.rows() * n);
        for row in z.data().chunks_exact(n * dc) {
            for (c, book) in books.iter().enumerate() {
                idx.push(nearest_entry(&row[c * dc..(c + 1) * dc], book.data(), dc) as u32);
            }
        }
        idx
    }

    /// Codebook lookup for `(row, chunk)` indices, giving `(rows, d)`.
    pub fn lookup<'g, E: Real>(&self, g: &'g Graph<E>, idx: &[u32]) -> Var<'g, E> {
        let n = self.cfg.chunks;
        let parts: Vec<Var<'g, E>> = (0..n)
            .map(|c| {
                let rows: Vec<usize> = idx.iter().skip(c).step_by(n).map(|&k| k as usize).collect();
                g.param(self.codebooks[c]).index_rows(&rows)
            })
            .collect();
        Var::concat(&parts, 1)
    }

    /// Quantizes `(rows, d)` latents. Returns the straight-through output, the
    /// commitment term and the chosen indices.
    pub fn quantize<'g, E: Real>(&self, g: &'g Graph<E>, z: Var<'g, E>) -> (Var<'g, E>, Var<'g, E>, Vec<u32>) {
        let idx = self.assign(g, &z.value());
        let zq = self.lookup(g, &idx);
        let commit = (z - zq.detach()).square().mean_all().scale(self.cfg.commitment)
            + (z.detach() - zq).square().mean_all();
        let st = z + (zq - z).detach();
        (st, commit, idx)
    }

    /// Token factorization: `(T·V·N, d)` quantized latents to continuous tokens `(T·V, N, C)`.
    pub fn factorize<'g, E: Real>(&self, g: &'g Graph<E>, zq: Var<'g, E>) -> Var<'g, E> {
        let n = self.cfg.positions();
        let b = zq.shape()[0] / n;
        let x = self.fac_in.forward(g, zq.reshape(&[b, n, self.cfg.latent_dim])) + g.param(self.fac_pos);
        self.fac_block.forward(g, x)
    }

    /// Coarse Gaussians from continuous tokens, one frame per timestep.
    pub fn static_gs<'g, E: Real>(&self, g: &'g Graph<E>, s: Var<'g, E>) -> GaussianVars<'g, E> {
        let cfg = &self.cfg;
        let (t, tc, ng) = (s.shape()[0] / cfg.views, cfg.token_dim, cfg.gaussians);
        let kv = s.reshape(&[t, cfg.views * cfg.positions(), tc]) + g.param(self.view_pos);
        let q = g.param(self.slots).reshape(&[1, ng, tc]).broadcast_to(&[t, ng, tc]);
        let h = q + self.gs_block.attend(g, q, kv);
        let h = self.gs_block.ffn(g, h);
        let raw = self.gs_head.forward(g, h) + g.param(self.base);
        let quat_bias = g.constant(Tensor::from_f64(&[4], &[1.0, 0.0, 0.0, 0.0]));
        let q = raw.narrow(2, 6, 4) + quat_bias;
        let qn = q.square().sum_axis(2, true).add_scalar(1e-12).sqrt();
        GaussianVars {
            position: raw.narrow(2, 0, 3),
            scale: raw
                .narrow(2, 3, 3)
                .add_scalar(cfg.init_scale.ln())
                .exp()
                .clamp(SCALE_FLOOR, f64::INFINITY),
            rotation: q / qn,
            opacity: raw.narrow(2, 10, 1).sigmoid(),
            color: raw.narrow(2, 11, 3).sigmoid(),
        }
    }

    /// Offset features for `(T, n_g, 14)` coarse parameters given tokens `(T·V, N, C)`.
    pub fn stop_offsets<'g, E: Real>(&self, g: &'g Graph<E>, params: Var<'g, E>, s: Var<'g, E>) -> Var<'g, E> {
        let cfg = &self.cfg;
        let (t, ng, tc, v, n) = (params.shape()[0], cfg.gaussians, cfg.token_dim, cfg.views, cfg.positions());
        let time = g.param(self.stop_time).narrow(0, 0, t);
        let q = self.stop_embed.forward(g, params) + time.reshape(&[t, 1, tc]);
        let qv = q.reshape(&[1, t * ng, tc]).broadcast_to(&[v, t * ng, tc]);
        let kv = s.reshape(&[t, v, n, tc]).permute(&[1, 0, 2, 3]) + time.reshape(&[1, t, 1, tc]);
        let kv = kv.reshape(&[v, t * n, tc]);
        let a = self.stop_block.attend(g, qv, kv).mean_axis(0, false);
        let h = self.stop_block.ffn(g, q.reshape(&[t * ng, tc]) + a).reshape(&[t, ng, tc]);
        let positions = params.narrow(2, 0, 3).value();
        let u = self.unet(g, h, &positions);
        let feat = Var::concat(&[h, u], 2);
        self.stop_head.forward(g, self.stop_norm.forward(g, feat))
    }

    /// Two-level volumetric encoder–decoder over a voxelization of per-Gaussian features.
    fn unet<'g, E: Real>(&self, g: &'g Graph<E>, h: Var<'g, E>, positions: &Tensor<E>) -> Var<'g, E> {
        let cfg = &self.cfg;
        let (t, ng, r, uc) = (h.shape()[0], cfg.gaussians, cfg.voxel_res, cfg.unet_channels);
        let (scatter, gather) = voxel_maps(positions, t, ng, r, cfg.volume_extent);
        let f = self.unet_in.forward(g, h);
        let vol = g.constant(scatter).bmm(f, false, false).reshape(&[t, r, r, r, uc]);
        let d1 = self.unet_down.forward(g, vol).silu();
        let (pool, pool_shape) = pool_table(t, r, uc);
        let pooled = d1.gather(Arc::new(pool), &pool_shape).mean_axis(4, false);
        let mid = self.unet_mid.forward(g, pooled).silu();
        let (up, up_shape) = upsample_table(t, r, uc);
        let upv = mid.gather(Arc::new(up), &up_shape);
        let out = self.unet_up.forward(g, upv + d1).reshape(&[t, r * r * r, uc]);
        g.constant(gather).bmm(out, false, false)
    }

    /// Offsets added to coarse parameters and projected back onto valid values.
    pub fn apply_offsets<'g, E: Real>(
        &self,
        coarse: &GaussianVars<'g, E>,
        offsets: Var<'g, E>,
    ) -> GaussianVars<'g, E> {
        let o = GaussianVars::from_params(offsets);
        GaussianVars {
            position: coarse.position + o.position,
            scale: (coarse.scale + o.scale).clamp(SCALE_FLOOR, f64::INFINITY),
            rotation: renormalize_quat(coarse.rotation + o.rotation),
            opacity: (coarse.opacity + o.opacity).clamp(0.0, 1.0),
            color: (coarse.color + o.color).clamp(0.0, 1.0),
        }
    }

    /// Full decoder from quantized latents `(T·V·N, d)`.
    pub fn decode<'g, E: Real>(&self, g: &'g Graph<E>, zq: Var<'g, E>) -> Decoded<'g, E> {
        let tokens = self.factorize(g, zq);
        let coarse = self.static_gs(g, tokens);
        let params = coarse.params();
        let (offsets, corrected) = if self.cfg.stop {
            let off = self.stop_offsets(g, params, tokens);
            (off, self.apply_offsets(&coarse, off))
        } else {
            (g.constant(Tensor::zeros(&params.shape())), coarse)
        };
        Decoded {
            tokens,
            coarse,
            offsets,
            corrected,
        }
    }
}

/// Renormalizes quaternion rows whose norm deviates from 1 by more than the tolerance; others pass unchanged.
fn renormalize_quat<'g, E: Real>(q: Var<'g, E>) -> Var<'g, E> {
    let x = q.value();
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.rows());
    for row in out.chunks_exact_mut(4) {
        let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > QUAT_TOLERANCE {
            row.iter_mut().for_each(|v| *v = E::of(v.f64() / n));
            norms.push(n);
        } else {
            norms.push(0.0);
        }
    }
    let shape = x.shape().to_vec();
    q.graph().op(&[q], Tensor::new(&shape, out.clone()), move |grad| {
        let mut gx = grad.data().to_vec();
        for (i, gr) in gx.chunks_exact_mut(4).enumerate() {
            let n = norms[i];
            if n == 0.0 {
                continue;
            }
            // d(q/|q|) = (I − q̂q̂ᵀ)/|q|
            let qh = &out[i * 4..i * 4 + 4];
            let dot: f64 = (0..4).map(|k| gr[k].f64() * qh[k].f64()).sum();
            for k in 0..4 {
                gr[k] = E::of((gr[k].f64() - dot * qh[k].f64()) / n);
            }
        }
        vec![Some(Tensor::new(&shape, gx))]
    })
}

/// Continuous voxel coordinate of a world coordinate, voxel centers at integers.
fn voxel_coord(p: f64, r: usize, extent: f64) -> f64 {
    (p + extent) / (2.0 * extent) * r as f64 - 0.5
}

/// Dense scatter-mean `(T, R³, n)` and trilinear gather `(T, n, R³)` matrices for the given positions.
fn voxel_maps<E: Real>(positions: &Tensor<E>, t: usize, n: usize, r: usize, extent: f64) -> (Tensor<E>, Tensor<E>) {
    let vol = r * r * r;
    let mut scatter = vec![E::zero(); t * vol * n];
    let mut gather = vec![E::zero(); t * n * vol];
    let p = positions.data();
    for ti in 0..t {
        let mut counts = vec![0usize; vol];
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let o = (ti * n + i) * 3;
            let c: Vec<f64> = (0..3).map(|k| voxel_coord(p[o + k].f64(), r, extent)).collect();
            let near: Vec<usize> = c.iter().map(|&x| x.round().clamp(0.0, (r - 1) as f64) as usize).collect();
            let cell = (near[0] * r + near[1]) * r + near[2];
            counts[cell] += 1;
            cells.push(cell);
            let lo: Vec<f64> = c.iter().map(|&x| x.floor()).collect();
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = 0;
                for k in 0..3 {
                    let bit = (corner >> (2 - k)) & 1;
                    let f = c[k] - lo[k];
                    w *= if bit == 1 { f } else { 1.0 - f };
                    let j = (lo[k] as isize + bit as isize).clamp(0, r as isize - 1) as usize;
                    idx = idx * r + j;
                }
                gather[(ti * n + i) * vol + idx] += E::of(w);
            }
        }
        for (i, &cell) in cells.iter().enumerate() {
            scatter[(ti * vol + cell) * n + i] = E::of(1.0 / counts[cell] as f64);
        }
    }
    (
        Tensor::new(&[t, vol, n], scatter),
        Tensor::new(&[t, n, vol], gather),
    )
}

/// Gather table for 2× average pooling of `(T, R, R, R, C)`, giving `(T, R/2, R/2, R/2, 8, C)`.
fn pool_table(t: usize, r: usize, c: usize) -> (Vec<u32>, Vec<usize>) {
    let h = r / 2;
    let mut table = Vec::with_capacity(t * h * h * h * 8 * c);
    for ti in 0..t {
        for x in 0..h {
            for y in 0..h {
                for z in 0..h {
                    for k in 0..8 {
                        let (dx, dy, dz) = (k >> 2, (k >> 1) & 1, k & 1);
                        let src = ((ti * r + 2 * x + dx) * r + 2 * y + dy) * r + 2 * z + dz;
                        table.extend((0..c).map(|ch| (src * c + ch) as u32));
                    }
                }
            }
        }
    }
    (table, vec![t, h, h, h, 8, c])
}

/// Gather table for nearest 2× upsampling of `(T, R/2, R/2, R/2, C)` to `(T, R, R, R, C)`.
fn upsample_table(t: usize, r: usize, c: usize) -> (Vec<u32>, Vec<usize>) {
    let h = r / 2;
    let mut table = Vec::with_capacity(t * r * r * r * c);
    for ti in 0..t {
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let src = ((ti * h + x / 2) * h + y / 2) * h + z / 2;
                    table.extend((0..c).map(|ch| (src * c + ch) as u32));
                }
            }
        }
    }
    (table, vec![t, r, r, r, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_maps_rows_are_normalized() {
        let pos = Tensor::<f64>::from_f64(&[1, 3, 3], &[0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.9, -0.9, 0.3]);
        let (s, gm) = voxel_maps(&pos, 1, 3, 4, 1.0);
        // every Gaussian lands in exactly one voxel and each occupied voxel averages its members
        for i in 0..3 {
            let col: f64 = (0..64).map(|v| s.data()[v * 3 + i]).filter(|&w| w > 0.0).map(|w| 1.0 / w).sum();
            assert!(col >= 1.0);
            let row: f64 = gm.data()[i * 64..(i + 1) * 64].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        for v in 0..64 {
            let row: f64 = s.data()[v * 3..v * 3 + 3].iter().sum();
            assert!(row == 0.0 || (row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_then_upsample_of_constant_is_constant() {
        let (p, ps) = pool_table(1, 4, 2);
        assert_eq!(ps, vec![1, 2, 2, 2, 8, 2]);
        assert!(p.iter().all(|&i| (i as usize) < 64 * 2));
        let (u, us) = upsample_table(1, 4, 2);
        assert_eq!(us, vec![1, 4, 4, 4, 2]);
        assert!(u.iter().all(|&i| (i as usize) < 8 * 2));
    }

    #[test]
    fn renormalize_passes_unit_rows_and_fixes_others() {
        let g = Graph::<f64>::detached(false);
        let q = g.constant(Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]));
        let r = renormalize_quat(q).value();
        assert_eq!(r.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
