//! Graph ops wrapping projection and compositing.

use std::sync::Arc;

use super::{composite_features, composite_features_backward, project_with_jacobian, project_geometry, SplatGeometry};
use crate::autograd::{Graph, Real, Tensor, Var};
use crate::par::Execution;
use crate::scene_synth::camera::CameraFrame;

/// Per-splat geometry channels: mean x, mean y, conic a, b, c.
pub const GEOM_DIM: usize = 5;

pub struct RenderOutput<'g, E: Real> {
    /// `(T, V, H, W, 3)`.
    pub images: Var<'g, E>,
    /// `(T-1, V, H, W, 2)` pixel displacement from frame t to t+1, when requested.
    pub flow: Option<Var<'g, E>>,
}

fn to_f64<E: Real>(t: &Tensor<E>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

/// Projects `(T, n, ·)` Gaussian parameters into every camera. Returns the `(T, V, n, 5)`
/// geometry Var together with the full-precision geometry (None = culled).
fn project_op<'g, E: Real>(
    g: &'g Graph<E>,
    pos: Var<'g, E>,
    scale: Var<'g, E>,
    quat: Var<'g, E>,
    cams: &[CameraFrame],
    exec: Execution,
) -> (Var<'g, E>, Arc<Vec<Option<SplatGeometry>>>) {
    let shape = pos.shape();
    let (t_len, n) = (shape[0], shape[1]);
    let v_len = cams.len();
    let (p, s, q) = (to_f64(&pos.value()), to_f64(&scale.value()), to_f64(&quat.value()));
    let need_grad = pos.requires_grad() || scale.requires_grad() || quat.requires_grad();
    let cams: Arc<Vec<CameraFrame>> = Arc::new(cams.to_vec());
    let per_image = exec.map(t_len * v_len, |b| {
        let (t, v) = (b / v_len, b % v_len);
        (0..n)
            .map(|i| {
                let o = t * n + i;
                let pi = [p[o * 3], p[o * 3 + 1], p[o * 3 + 2]];
                let si = [s[o * 3], s[o * 3 + 1], s[o * 3 + 2]];
                let qi = [q[o * 4], q[o * 4 + 1], q[o * 4 + 2], q[o * 4 + 3]];
                if need_grad {
                    match project_with_jacobian(pi, si, qi, &cams[v]) {
                        Some((geom, jac)) => (Some(geom), jac),
                        None => (None, [[0.0; 10]; 5]),
                    }
                } else {
                    (project_geometry(pi, si, qi, &cams[v]), [[0.0; 10]; 5])
                }
            })
            .collect::<Vec<_>>()
    });
    let mut geoms = Vec::with_capacity(t_len * v_len * n);
    let mut jacs = Vec::with_capacity(if need_grad { t_len * v_len * n } else { 0 });
    let mut value = Vec::with_capacity(t_len * v_len * n * GEOM_DIM);
    for (geom, jac) in per_image.into_iter().flatten() {
        match &geom {
            Some(gm) => value.extend([gm.mean[0], gm.mean[1], gm.conic[0], gm.conic[1], gm.conic[2]]),
            None => value.extend([0.0; GEOM_DIM]),
        }
        geoms.push(geom);
        if need_grad {
            jacs.push(jac);
        }
    }
    let geoms = Arc::new(geoms);
    let jacs = Arc::new(jacs);
    let out = g.op(
        &[pos, scale, quat],
        Tensor::from_f64(&[t_len, v_len, n, GEOM_DIM], &value),
        move |grad| {
            let gd = to_f64(grad);
            let per_t = exec.map(t_len, |t| {
                let mut gp = vec![0.0; n * 3];
                let mut gs = vec![0.0; n * 3];
                let mut gq = vec![0.0; n * 4];
                for v in 0..v_len {
                    for i in 0..n {
                        let o = (t * v_len + v) * n + i;
                        let jac = &jacs[o];
                        let g5 = &gd[o * GEOM_DIM..(o + 1) * GEOM_DIM];
                        for (r, &gr) in g5.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &jac[r];
                            for c in 0..3 {
                                gp[i * 3 + c] += gr * row[c];
                                gs[i * 3 + c] += gr * row[3 + c];
                            }
                            for c in 0..4 {
                                gq[i * 4 + c] += gr * row[6 + c];
                            }
                        }
                    }
                }
                (gp, gs, gq)
            });
            let mut gp = Vec::with_capacity(t_len * n * 3);
            let mut gs = Vec::with_capacity(t_len * n * 3);
            let mut gq = Vec::with_capacity(t_len * n * 4);
            for (a, b, c) in per_t {
                gp.extend(a);
                gs.extend(b);
                gq.extend(c);
            }
            vec![
                Some(Tensor::from_f64(&[t_len, n, 3], &gp)),
                Some(Tensor::from_f64(&[t_len, n, 3], &gs)),
                Some(Tensor::from_f64(&[t_len, n, 4], &gq)),
            ]
        },
    );
    (out, geoms)
}

/// Composites `B` images. `geom_var` is `(B, n, 5)` and carries gradients for `geoms`;
/// `opacity` is `(B, n, 1)`, `feats` is `(B, n, F)`. Output `(B, H, W, F)`.
#[allow(clippy::too_many_arguments)]
fn composite_op<'g, E: Real>(
    g: &'g Graph<E>,
    geom_var: Var<'g, E>,
    geoms: Arc<Vec<Option<SplatGeometry>>>,
    opacity: Var<'g, E>,
    feats: Var<'g, E>,
    background: Vec<f64>,
    h: usize,
    w: usize,
    exec: Execution,
) -> Var<'g, E> {
    let fshape = feats.shape();
    let (b_len, n, nf) = (fshape[0], fshape[1], fshape[2]);
    assert_eq!(geoms.len(), b_len * n);
    assert_eq!(background.len(), nf);
    let op_vals = Arc::new(to_f64(&opacity.value()));
    let f_vals = Arc::new(to_f64(&feats.value()));
    let images = exec.map(b_len, |b| {
        composite_features(
            &geoms[b * n..(b + 1) * n],
            &op_vals[b * n..(b + 1) * n],
            &f_vals[b * n * nf..(b + 1) * n * nf],
            nf,
            &background,
            h,
            w,
        )
        .0
    });
    let value: Vec<f64> = images.into_iter().flatten().collect();
    let pix = h * w * nf;
    g.op(
        &[geom_var, opacity, feats],
        Tensor::from_f64(&[b_len, h, w, nf], &value),
        move |grad| {
            let gd = to_f64(grad);
            let per = exec.map(b_len, |b| {
                composite_features_backward(
                    &geoms[b * n..(b + 1) * n],
                    &op_vals[b * n..(b + 1) * n],
                    &f_vals[b * n * nf..(b + 1) * n * nf],
                    nf,
                    &background,
                    h,
                    w,
                    &gd[b * pix..(b + 1) * pix],
                )
            });
            let mut gg = Vec::with_capacity(b_len * n * GEOM_DIM);
            let mut go = Vec::with_capacity(b_len * n);
            let mut gf = Vec::with_capacity(b_len * n * nf);
            for r in per {
                gg.extend(r.geom.iter().flatten());
                go.extend(r.opacity);
                gf.extend(r.feats);
            }
            vec![
                Some(Tensor::from_f64(&[b_len, n, GEOM_DIM], &gg)),
                Some(Tensor::from_f64(&[b_len, n, 1], &go)),
                Some(Tensor::from_f64(&[b_len, n, nf], &gf)),
            ]
        },
    )
}

/// Renders dynamic Gaussians into every `(t, v)` view.
///
/// Inputs are `(T, n, k)` Vars: position 3, scale 3, rotation 4, opacity 1, color 3.
/// Predicted flow, when requested, splats each Gaussian's projected displacement
/// between consecutive timesteps with the same weights as its color.
#[allow(clippy::too_many_arguments)]
pub fn render_gaussians<'g, E: Real>(
    g: &'g Graph<E>,
    position: Var<'g, E>,
    scale: Var<'g, E>,
    rotation: Var<'g, E>,
    opacity: Var<'g, E>,
    color: Var<'g, E>,
    cams: &[CameraFrame],
    (h, w): (usize, usize),
    background: [f64; 3],
    with_flow: bool,
    exec: Execution,
) -> RenderOutput<'g, E> {
    let shape = position.shape();
    let (t_len, n) = (shape[0], shape[1]);
    let v_len = cams.len();
    let b_len = t_len * v_len;
    let (geom, geoms) = project_op(g, position, scale, rotation, cams, exec);
    let spread = |x: Var<'g, E>, k: usize| {
        x.reshape(&[t_len, 1, n, k])
            .broadcast_to(&[t_len, v_len, n, k])
            .reshape(&[b_len, n, k])
    };
    let op = spread(opacity, 1);
    let col = spread(color, 3);
    let flow_on = with_flow && t_len > 1;
    let (feats, bg) = if flow_on {
        let means = geom.narrow(3, 0, 2);
        let disp = means.narrow(0, 1, t_len - 1) - means.narrow(0, 0, t_len - 1);
        // Zero the displacement of Gaussians culled in either frame.
        let mask: Vec<f64> = (0..(t_len - 1) * v_len * n)
            .flat_map(|o| {
                let ok = geoms[o].is_some() && geoms[o + v_len * n].is_some();
                let m = if ok { 1.0 } else { 0.0 };
                [m, m]
            })
            .collect();
        let disp = disp * g.constant(Tensor::from_f64(&[t_len - 1, v_len, n, 2], &mask));
        let pad = g.constant(Tensor::zeros(&[1, v_len, n, 2]));
        let disp = Var::concat(&[disp, pad], 0).reshape(&[b_len, n, 2]);
        (Var::concat(&[col, disp], 2), vec![background[0], background[1], background[2], 0.0, 0.0])
    } else {
        (col, background.to_vec())
    };
    let nf = bg.len();
    let geom_b = geom.reshape(&[b_len, n, GEOM_DIM]);
    let img = composite_op(g, geom_b, geoms, op, feats, bg, h, w, exec).reshape(&[t_len, v_len, h, w, nf]);
    if flow_on {
        RenderOutput {
            images: img.narrow(4, 0, 3),
            flow: Some(img.narrow(4, 3, 2).narrow(0, 0, t_len - 1)),
        }
    } else {
        RenderOutput { images: img, flow: None }
    }
}
