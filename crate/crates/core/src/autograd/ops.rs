use std::sync::Arc;

use super::graph::Var;
use super::real::{gemm, Real};
use super::tensor::{strides, Tensor};

/// Output index → input index map for a broadcast; `None` when shapes agree.
fn broadcast_index(input: &[usize], out: &[usize]) -> Option<Arc<Vec<u32>>> {
    if input == out {
        return None;
    }
    assert!(input.len() <= out.len(), "cannot broadcast {input:?} to {out:?}");
    let offset = out.len() - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; out.len()];
    for (i, &d) in input.iter().enumerate() {
        let od = out[offset + i];
        assert!(d == od || d == 1, "cannot broadcast {input:?} to {out:?}");
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur as u32);
        // odometer increment
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            cur += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(Arc::new(idx))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                panic!("incompatible shapes {a:?} and {b:?}")
            }
        })
        .collect()
}

/// Sums a gradient laid out like the broadcast output back onto the input shape.
fn reduce_grad<E: Real>(g: Vec<E>, idx: &Option<Arc<Vec<u32>>>, shape: &[usize]) -> Tensor<E> {
    match idx {
        None => Tensor::new(shape, g),
        Some(idx) => {
            let mut out = vec![E::zero(); shape.iter().product()];
            for (v, &i) in g.into_iter().zip(idx.iter()) {
                out[i as usize] += v;
            }
            Tensor::new(shape, out)
        }
    }
}

#[inline]
fn at<E: Copy>(data: &[E], idx: &Option<Arc<Vec<u32>>>, i: usize) -> E {
    match idx {
        None => data[i],
        Some(m) => data[m[i] as usize],
    }
}

impl<'g, E: Real> Var<'g, E> {
    fn binary(
        self,
        rhs: Var<'g, E>,
        f: fn(E, E) -> E,
        da: fn(E, E) -> E,
        db: fn(E, E) -> E,
    ) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let ia = broadcast_index(a.shape(), &out_shape);
        let ib = broadcast_index(b.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<E> = (0..n).map(|i| f(at(ad, &ia, i), at(bd, &ib, i))).collect();
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        self.g.op(&[self, rhs], Tensor::new(&out_shape, data), move |g| {
            let gd = g.data();
            let (ad, bd) = (a.data(), b.data());
            let ga = need_a.then(|| {
                let v = (0..gd.len())
                    .map(|i| gd[i] * da(at(ad, &ia, i), at(bd, &ib, i)))
                    .collect();
                reduce_grad(v, &ia, a.shape())
            });
            let gb = need_b.then(|| {
                let v = (0..gd.len())
                    .map(|i| gd[i] * db(at(ad, &ia, i), at(bd, &ib, i)))
                    .collect();
                reduce_grad(v, &ib, b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn add(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.binary(rhs, |a, b| a + b, |_, _| E::one(), |_, _| E::one())
    }

    pub fn sub(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.binary(rhs, |a, b| a - b, |_, _| E::one(), |_, _| -E::one())
    }

    pub fn mul(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.binary(rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.binary(rhs, |a, b| a / b, |_, b| E::one() / b, |a, b| -a / (b * b))
    }

    /// Elementwise map with derivative `df(x, y)`.
    pub fn unary(self, f: impl Fn(E) -> E, df: impl Fn(E, E) -> E + 'static) -> Var<'g, E> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let yc = y.clone();
        self.g.op_arc(&[self], y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(yc.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(x.shape(), data))]
        })
    }

    pub fn neg(self) -> Var<'g, E> {
        self.unary(|x| -x, |_, _| -E::one())
    }

    pub fn scale(self, c: f64) -> Var<'g, E> {
        let c = E::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, E> {
        let c = E::of(c);
        self.unary(move |x| x + c, |_, _| E::one())
    }

    pub fn exp(self) -> Var<'g, E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, E> {
        self.unary(|x| x.ln(), |x, _| E::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, E> {
        self.unary(|x| x.sqrt(), |_, y| E::of(0.5) / y)
    }

    pub fn square(self) -> Var<'g, E> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn recip(self) -> Var<'g, E> {
        self.unary(|x| E::one() / x, |_, y| -y * y)
    }

    pub fn sigmoid(self) -> Var<'g, E> {
        self.unary(sigmoid, |_, y| y * (E::one() - y))
    }

    pub fn tanh(self) -> Var<'g, E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, E> {
        self.unary(
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn silu(self) -> Var<'g, E> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (E::one() + x * (E::one() - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'g, E> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval or at an unmoved value.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, E> {
        let (lo, hi) = (E::of(lo), E::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { E::one() } else { E::zero() },
        )
    }

    pub fn detach(self) -> Var<'g, E> {
        self.g.constant_arc(self.value())
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(self) -> Var<'g, E> {
        let x = self.value();
        let s: E = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.g.op(&[self], Tensor::scalar(s), move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(self) -> Var<'g, E> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g, E> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![E::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&xd[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.g.op(&[self], Tensor::new(&out_shape, out), move |g| {
            let gd = g.data();
            let mut gx = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'g, E> {
        let n = self.value().shape()[axis];
        self.sum_axis(axis, keepdim).scale(1.0 / n as f64)
    }

    // ---- matmul -----------------------------------------------------------

    /// `self (.., m, k) @ rhs (k, n)` or batched `(.., m, k) @ (.., k, n)`.
    pub fn matmul(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.bmm(rhs, false, false)
    }

    /// `self @ rhsᵀ` on the last two dims.
    pub fn matmul_t(self, rhs: Var<'g, E>) -> Var<'g, E> {
        self.bmm(rhs, false, true)
    }

    /// Batched product of `op(self)` and `op(rhs)` over the last two dims; a rank-2 `rhs` is shared by every batch.
    pub fn bmm(self, rhs: Var<'g, E>, ta: bool, tb: bool) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "bmm needs rank ≥ 2: {ash:?} {bsh:?}");
        let shared_b = bsh.len() == 2;
        // Fold leading dims of `a` into rows when b is shared and a is not transposed.
        let (batch, ra, ca) = if shared_b && !ta {
            (1, ash[..ash.len() - 1].iter().product::<usize>(), ash[ash.len() - 1])
        } else {
            let r = ash.len();
            (ash[..r - 2].iter().product::<usize>(), ash[r - 2], ash[r - 1])
        };
        let (rb, cb) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if !shared_b {
            assert_eq!(
                &ash[..ash.len() - 2],
                &bsh[..bsh.len() - 2],
                "batch dims differ: {ash:?} vs {bsh:?}"
            );
        }
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, kb, "inner dims differ: {ash:?} (ta={ta}) vs {bsh:?} (tb={tb})");
        let mut out = vec![E::zero(); batch * m * n];
        let (asz, bsz) = (ra * ca, rb * cb);
        for i in 0..batch {
            let bo = if shared_b { 0 } else { i * bsz };
            gemm(
                m,
                k,
                n,
                &a.data()[i * asz..(i + 1) * asz],
                ta,
                &b.data()[bo..bo + bsz],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                E::zero(),
            );
        }
        let mut out_shape = if shared_b && !ta {
            ash[..ash.len() - 1].to_vec()
        } else {
            ash[..ash.len() - 2].iter().copied().chain([m]).collect()
        };
        out_shape.push(n);
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        self.g.op(&[self, rhs], Tensor::new(&out_shape, out), move |g| {
            let gd = g.data();
            let ga = need_a.then(|| {
                let mut da = vec![E::zero(); a.numel()];
                for i in 0..batch {
                    let bo = if shared_b { 0 } else { i * bsz };
                    let dc = &gd[i * m * n..(i + 1) * m * n];
                    let bb = &b.data()[bo..bo + bsz];
                    let dst = &mut da[i * asz..(i + 1) * asz];
                    if ta {
                        gemm(k, n, m, bb, tb, dc, true, dst, E::zero());
                    } else {
                        gemm(m, n, k, dc, false, bb, !tb, dst, E::zero());
                    }
                }
                Tensor::new(a.shape(), da)
            });
            let gb = need_b.then(|| {
                let mut db = vec![E::zero(); b.numel()];
                for i in 0..batch {
                    let bo = if shared_b { 0 } else { i * bsz };
                    let beta = if shared_b && i > 0 { E::one() } else { E::zero() };
                    let dc = &gd[i * m * n..(i + 1) * m * n];
                    let aa = &a.data()[i * asz..(i + 1) * asz];
                    let dst = &mut db[bo..bo + bsz];
                    if tb {
                        gemm(n, m, k, dc, true, aa, ta, dst, beta);
                    } else {
                        gemm(k, m, n, aa, !ta, dc, false, dst, beta);
                    }
                }
                Tensor::new(b.shape(), db)
            });
            vec![ga, gb]
        })
    }

    // ---- softmax / losses -------------------------------------------------

    pub fn softmax(self) -> Var<'g, E> {
        let x = self.value();
        let c = x.cols();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        let y = Arc::new(Tensor::new(x.shape(), y));
        let yc = y.clone();
        self.g.op_arc(&[self], y, move |g| {
            let mut gx = vec![E::zero(); yc.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(c)
                .zip(yc.data().chunks(c))
                .zip(gx.chunks_mut(c))
            {
                let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(yc.shape(), gx))]
        })
    }

    pub fn log_softmax(self) -> Var<'g, E> {
        let x = self.value();
        let c = x.cols();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = Arc::new(Tensor::new(x.shape(), y));
        let yc = y.clone();
        self.g.op_arc(&[self], y, move |g| {
            let mut gx = vec![E::zero(); yc.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(c)
                .zip(yc.data().chunks(c))
                .zip(gx.chunks_mut(c))
            {
                let s: E = gr.iter().copied().sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gv - yv.exp() * s;
                }
            }
            vec![Some(Tensor::new(yc.shape(), gx))]
        })
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(self)`; shape `[rows]`.
    pub fn cross_entropy_rows(self, targets: &[usize]) -> Var<'g, E> {
        let x = self.value();
        let c = x.cols();
        let rows = x.rows();
        assert_eq!(rows, targets.len(), "one target per row");
        let mut losses = Vec::with_capacity(rows);
        for (row, &t) in x.data().chunks(c).zip(targets) {
            assert!(t < c, "target {t} out of range {c}");
            losses.push(log_sum_exp(row) - row[t]);
        }
        let targets = targets.to_vec();
        self.g.op(&[self], Tensor::new(&[rows], losses), move |g| {
            let mut gx = x.data().to_vec();
            for ((row, &t), &gv) in gx.chunks_mut(c).zip(&targets).zip(g.data()) {
                softmax_in_place(row);
                row[t] -= E::one();
                for v in row.iter_mut() {
                    *v *= gv;
                }
            }
            vec![Some(Tensor::new(x.shape(), gx))]
        })
    }

    /// RMS normalization over the last dim, scaled by `weight` (shape `[cols]`).
    pub fn rms_norm(self, weight: Var<'g, E>, eps: f64) -> Var<'g, E> {
        let x = self.value();
        let w = weight.value();
        let c = x.cols();
        assert_eq!(w.numel(), c);
        let eps = E::of(eps);
        let inv: Vec<E> = x
            .data()
            .chunks(c)
            .map(|r| {
                let ms = r.iter().map(|&v| v * v).sum::<E>() / E::of(c as f64);
                E::one() / (ms + eps).sqrt()
            })
            .collect();
        let mut y = Vec::with_capacity(x.numel());
        for (r, &s) in x.data().chunks(c).zip(&inv) {
            y.extend(r.iter().zip(w.data()).map(|(&v, &wv)| v * s * wv));
        }
        let need_w = weight.requires_grad();
        self.g.op(&[self, weight], Tensor::new(x.shape(), y), move |g| {
            let mut gx = vec![E::zero(); x.numel()];
            let mut gw = vec![E::zero(); c];
            let cf = E::of(c as f64);
            for (((xr, gr), &s), dst) in x
                .data()
                .chunks(c)
                .zip(g.data().chunks(c))
                .zip(&inv)
                .zip(gx.chunks_mut(c))
            {
                // xhat = x*s ; dxhat = g*w ; dx = s*(dxhat - xhat*mean(dxhat*xhat))
                let mut dot = E::zero();
                for j in 0..c {
                    let xh = xr[j] * s;
                    let dxh = gr[j] * w.data()[j];
                    dot += dxh * xh;
                    if need_w {
                        gw[j] += gr[j] * xh;
                    }
                }
                let mean = dot / cf;
                for j in 0..c {
                    let xh = xr[j] * s;
                    dst[j] = s * (gr[j] * w.data()[j] - xh * mean);
                }
            }
            vec![
                Some(Tensor::new(x.shape(), gx)),
                need_w.then(|| Tensor::new(&[c], gw)),
            ]
        })
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Var<'g, E> {
        let x = self.value();
        let old = x.shape().to_vec();
        let t = Tensor::new(shape, x.data().to_vec());
        self.g.op(&[self], t, move |g| {
            vec![Some(Tensor::new(&old, g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'g, E> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert_eq!(perm.len(), shape.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = x.numel();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            idx.push(cur as u32);
            for ax in (0..out_shape.len()).rev() {
                counter[ax] += 1;
                cur += pstrides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                cur -= pstrides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        self.gather(Arc::new(idx), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Var<'g, E> {
        let r = self.value().rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Flat gather: `out[i] = self.flat[table[i]]`, or zero where `table[i] == u32::MAX`.
    pub fn gather(self, table: Arc<Vec<u32>>, out_shape: &[usize]) -> Var<'g, E> {
        let x = self.value();
        assert_eq!(table.len(), out_shape.iter().product::<usize>());
        let xd = x.data();
        let data: Vec<E> = table
            .iter()
            .map(|&i| if i == u32::MAX { E::zero() } else { xd[i as usize] })
            .collect();
        let in_shape = x.shape().to_vec();
        let in_n = x.numel();
        self.g.op(&[self], Tensor::new(out_shape, data), move |g| {
            let mut gx = vec![E::zero(); in_n];
            for (&i, &v) in table.iter().zip(g.data()) {
                if i != u32::MAX {
                    gx[i as usize] += v;
                }
            }
            vec![Some(Tensor::new(&in_shape, gx))]
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g, E> {
        let x = self.value();
        match broadcast_index(x.shape(), shape) {
            None => self,
            Some(idx) => self.gather(idx, shape),
        }
    }

    /// Selects rows of the tensor viewed as `rows × cols`.
    pub fn index_rows(self, rows: &[usize]) -> Var<'g, E> {
        let x = self.value();
        let c = x.cols();
        let mut table = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < x.rows(), "row {r} out of range {}", x.rows());
            table.extend((0..c).map(|j| (r * c + j) as u32));
        }
        self.gather(Arc::new(table), &[rows.len(), c])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, E> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.g.op(&[self], Tensor::new(&out_shape, data), move |g| {
            let mut gx = vec![E::zero(); outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g, E>], axis: usize) -> Var<'g, E> {
        assert!(!parts.is_empty());
        let g = parts[0].g;
        let vals: Vec<Arc<Tensor<E>>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = vals
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), base.len(), "rank mismatch in concat");
                for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                    assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {base:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vals.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        g.op(parts, Tensor::new(&out_shape, data), move |gr| {
            let mut outs: Vec<Vec<E>> = sizes
                .iter()
                .map(|&sz| Vec::with_capacity(outer * sz * inner))
                .collect();
            let gd = gr.data();
            let mut off = 0;
            for _ in 0..outer {
                for (o, &sz) in outs.iter_mut().zip(&sizes) {
                    o.extend_from_slice(&gd[off..off + sz * inner]);
                    off += sz * inner;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s, d)))
                .collect()
        })
    }
}

impl<'g, E: Real> std::ops::Add for Var<'g, E> {
    type Output = Var<'g, E>;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'g, E: Real> std::ops::Sub for Var<'g, E> {
    type Output = Var<'g, E>;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'g, E: Real> std::ops::Mul for Var<'g, E> {
    type Output = Var<'g, E>;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl<'g, E: Real> std::ops::Div for Var<'g, E> {
    type Output = Var<'g, E>;
    fn div(self, rhs: Self) -> Self {
        Var::div(self, rhs)
    }
}

impl<'g, E: Real> std::ops::Neg for Var<'g, E> {
    type Output = Var<'g, E>;
    fn neg(self) -> Self {
        Var::neg(self)
    }
}

#[inline]
pub fn sigmoid<E: Real>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[inline]
pub fn softplus<E: Real>(x: E) -> E {
    if x > E::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp<E: Real>(row: &[E]) -> E {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    if m == E::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln()
}

pub fn softmax_in_place<E: Real>(row: &mut [E]) {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = E::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
