//! Layers built on the graph ops. Activations are channels-last.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId};
use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Fan-in scaled normal init.
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_std(init, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std<E: Real>(
        init: &mut Init<'_, E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        init.scope(name, |init| {
            let w = if std == 0.0 {
                init.zeros("w", &[d_in, d_out])
            } else {
                init.normal("w", &[d_in, d_out], std)
            };
            let b = bias.then(|| init.zeros("b", &[d_out]));
            Self { w, b, d_in, d_out }
        })
    }

    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        let y = x.matmul(g.param(self.w));
        match self.b {
            Some(b) => y + g.param(b),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub w: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize) -> Self {
        let w = init.scope(name, |i| i.constant("w", &[dim], 1.0));
        Self { w, eps: 1e-5 }
    }

    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        x.rms_norm(g.param(self.w), self.eps)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, heads: usize) -> Self {
        Self::with_out_std(init, name, dim, heads, 1.0 / (dim as f64).sqrt())
    }

    /// `out_std = 0` zero-initializes the output projection.
    pub fn with_out_std<E: Real>(
        init: &mut Init<'_, E>,
        name: &str,
        dim: usize,
        heads: usize,
        out_std: f64,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        init.scope(name, |init| Self {
            wq: Linear::new(init, "q", dim, dim, false),
            wk: Linear::new(init, "k", dim, dim, false),
            wv: Linear::new(init, "v", dim, dim, false),
            wo: Linear::with_std(init, "o", dim, dim, false, out_std),
            heads,
            dim,
        })
    }

    /// Splits `(.., L, D)` into `(B·H, L, dh)`.
    fn split_heads<'g, E: Real>(&self, x: Var<'g, E>) -> (Var<'g, E>, usize, usize) {
        let s = x.shape();
        let l = s[s.len() - 2];
        let b: usize = s[..s.len() - 2].iter().product();
        let dh = self.dim / self.heads;
        let y = x
            .reshape(&[b, l, self.heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, l, dh]);
        (y, b, l)
    }

    /// Projects keys and values once; reusable across queries.
    pub fn project_kv<'g, E: Real>(&self, g: &'g Graph<E>, xkv: Var<'g, E>) -> (Var<'g, E>, Var<'g, E>) {
        (self.wk.forward(g, xkv), self.wv.forward(g, xkv))
    }

    pub fn forward<'g, E: Real>(
        &self,
        g: &'g Graph<E>,
        xq: Var<'g, E>,
        xkv: Var<'g, E>,
        mask: Option<&Arc<Tensor<E>>>,
    ) -> Var<'g, E> {
        let (k, v) = self.project_kv(g, xkv);
        self.forward_projected(g, xq, k, v, mask)
    }

    /// Attention with already projected keys/values of shape `(.., Lk, D)`.
    pub fn forward_projected<'g, E: Real>(
        &self,
        g: &'g Graph<E>,
        xq: Var<'g, E>,
        k: Var<'g, E>,
        v: Var<'g, E>,
        mask: Option<&Arc<Tensor<E>>>,
    ) -> Var<'g, E> {
        let out_shape = xq.shape();
        let q = self.wq.forward(g, xq);
        let (q, b, lq) = self.split_heads(q);
        let (k, _, _) = self.split_heads(k);
        let (v, _, _) = self.split_heads(v);
        let dh = self.dim / self.heads;
        let mut scores = q.bmm(k, false, true).scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = scores + g.constant_arc(m.clone());
        }
        let attn = scores.softmax();
        let o = attn
            .bmm(v, false, false)
            .reshape(&[b, self.heads, lq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&out_shape);
        self.wo.forward(g, o)
    }
}

/// Gated feed-forward block `w2(silu(w1 x) * w3 x)`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
}

impl SwiGlu {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scope(name, |init| Self {
            w1: Linear::new(init, "w1", dim, hidden, false),
            w2: Linear::new(init, "w2", hidden, dim, false),
            w3: Linear::new(init, "w3", dim, hidden, false),
        })
    }

    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        let a = self.w1.forward(g, x).silu();
        let b = self.w3.forward(g, x);
        self.w2.forward(g, a * b)
    }
}

/// Two-layer perceptron with SiLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        init.scope(name, |init| Self {
            l1: Linear::new(init, "l1", d_in, hidden, true),
            l2: Linear::new(init, "l2", hidden, d_out, true),
        })
    }

    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        self.l2.forward(g, self.l1.forward(g, x).silu())
    }
}

/// Gather table for a channels-last convolution over `in_shape = (B, s_1..s_n, C)`.
///
/// Returns the table and output shape `(B, o_1..o_n, k^n·C)`; padded taps map to `u32::MAX`.
pub fn im2col_table(in_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> (Vec<u32>, Vec<usize>) {
    let nd = in_shape.len() - 2;
    let b = in_shape[0];
    let c = in_shape[nd + 1];
    let sp = &in_shape[1..=nd];
    let out_sp: Vec<usize> = sp
        .iter()
        .map(|&s| (s + 2 * pad - kernel) / stride + 1)
        .collect();
    let kvol = kernel.pow(nd as u32);
    let out_count: usize = out_sp.iter().product();
    let mut sp_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        sp_strides[i] = sp_strides[i + 1] * sp[i + 1];
    }
    let in_vol: usize = sp.iter().product();
    let mut table = Vec::with_capacity(b * out_count * kvol * c);
    let mut opos = vec![0usize; nd];
    let mut kpos = vec![0usize; nd];
    for bi in 0..b {
        for oflat in 0..out_count {
            let mut r = oflat;
            for d in (0..nd).rev() {
                opos[d] = r % out_sp[d];
                r /= out_sp[d];
            }
            for kflat in 0..kvol {
                let mut r = kflat;
                for d in (0..nd).rev() {
                    kpos[d] = r % kernel;
                    r /= kernel;
                }
                let mut inside = true;
                let mut src = 0usize;
                for d in 0..nd {
                    let p = (opos[d] * stride + kpos[d]) as isize - pad as isize;
                    if p < 0 || p >= sp[d] as isize {
                        inside = false;
                        break;
                    }
                    src += p as usize * sp_strides[d];
                }
                for ch in 0..c {
                    table.push(if inside {
                        ((bi * in_vol + src) * c + ch) as u32
                    } else {
                        u32::MAX
                    });
                }
            }
        }
    }
    let mut out_shape = vec![b];
    out_shape.extend(&out_sp);
    out_shape.push(kvol * c);
    (table, out_shape)
}

/// N-dimensional channels-last convolution (2-D images or 3-D volumes) via im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dims: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Real>(
        init: &mut Init<'_, E>,
        name: &str,
        dims: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel.pow(dims as u32) * c_in;
        init.scope(name, |init| Self {
            w: init.normal("w", &[fan_in, c_out], (2.0 / fan_in as f64).sqrt()),
            b: init.zeros("b", &[c_out]),
            kernel,
            stride,
            pad,
            dims,
            c_out,
        })
    }

    pub fn forward<'g, E: Real>(&self, g: &'g Graph<E>, x: Var<'g, E>) -> Var<'g, E> {
        let shape = x.shape();
        assert_eq!(shape.len(), self.dims + 2, "conv expects (B, spatial.., C)");
        let (table, cols_shape) = im2col_table(&shape, self.kernel, self.stride, self.pad);
        let cols = x.gather(Arc::new(table), &cols_shape);
        let y = cols.matmul(g.param(self.w)) + g.param(self.b);
        let mut out_shape = cols_shape;
        *out_shape.last_mut().unwrap() = self.c_out;
        y.reshape(&out_shape)
    }
}

/// Sinusoidal features of a scalar position (`dim` even).
pub fn sinusoidal(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}
