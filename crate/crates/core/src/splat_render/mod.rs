//! Differentiable Gaussian splat renderer.
//!
//! Projection follows the usual first-order (EWA) approximation. Compositing is
//! exact per pixel, front to back in depth order; the backward pass walks the
//! same splat sequence back to front so no division by `1 - alpha` is needed.

mod ops;

pub use ops::{render_gaussians, RenderOutput, GEOM_DIM};

use crate::dual::{Dual, Scalar};
use crate::scene_synth::camera::{CameraFrame, CameraPose};
use crate::vq4d::gaussians::GaussianFrame;
use crate::error::Result;

/// Added to the projected covariance before inversion.
pub const COV_EPS: f64 = 1e-4;
/// Splats at or closer than this camera-space depth are dropped.
pub const NEAR_PLANE: f64 = 0.05;
/// Gaussian exponent below which a splat does not touch a pixel.
pub const POWER_CUTOFF: f64 = -12.0;

/// 2D footprint of one Gaussian in one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatGeometry {
    pub mean: [f64; 2],
    /// Projected covariance `(a, b, c)` of `[[a, b], [b, c]]`, including [`COV_EPS`].
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl ProjectedSplat {
    fn geometry(&self) -> SplatGeometry {
        let [[a, b], [_, c]] = self.covariance;
        let det = a * c - b * b;
        SplatGeometry {
            mean: self.mean,
            cov: [a, b, c],
            conic: [c / det, -b / det, a / det],
            depth: self.depth,
        }
    }
}

/// Rendered image, row-major `H×W×3` color plus `H×W` alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn quat_to_mat<S: Scalar>(q: [S; 4]) -> [[S; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let one = S::cst(1.0);
    let two = S::cst(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Projects one Gaussian. Returns `None` when it lies on or behind the near plane.
/// The output is `(mean, cov, conic, depth)`.
fn project_generic<S: Scalar>(
    pos: [S; 3],
    scale: [S; 3],
    quat: [S; 4],
    cam: &CameraFrame,
) -> Option<([S; 2], [S; 3], [S; 3], f64)> {
    let rows = [cam.right, cam.down, cam.forward];
    let d = [
        pos[0] - S::cst(cam.origin[0]),
        pos[1] - S::cst(cam.origin[1]),
        pos[2] - S::cst(cam.origin[2]),
    ];
    let pc: [S; 3] =
        std::array::from_fn(|r| d[0] * S::cst(rows[r][0]) + d[1] * S::cst(rows[r][1]) + d[2] * S::cst(rows[r][2]));
    let z = pc[2];
    if z.val() <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = (S::cst(cam.fx), S::cst(cam.fy));
    let mean = [fx * pc[0] / z + S::cst(cam.cx), fy * pc[1] / z + S::cst(cam.cy)];

    // T = J · W, with J the perspective Jacobian at the camera-space mean.
    let zz = z * z;
    let j = [[fx / z, S::cst(0.0), -fx * pc[0] / zz], [S::cst(0.0), fy / z, -fy * pc[1] / zz]];
    let t: [[S; 3]; 2] = std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            j[r][0] * S::cst(rows[0][c]) + j[r][1] * S::cst(rows[1][c]) + j[r][2] * S::cst(rows[2][c])
        })
    });
    // Σ = (R S)(R S)^T, so T Σ T^T = (T R S)(T R S)^T.
    let rot = quat_to_mat(quat);
    let m: [[S; 3]; 2] = std::array::from_fn(|r| {
        std::array::from_fn(|c| (t[r][0] * rot[0][c] + t[r][1] * rot[1][c] + t[r][2] * rot[2][c]) * scale[c])
    });
    let dotm = |a: usize, b: usize| m[a][0] * m[b][0] + m[a][1] * m[b][1] + m[a][2] * m[b][2];
    let eps = S::cst(COV_EPS);
    let cov = [dotm(0, 0) + eps, dotm(0, 1), dotm(1, 1) + eps];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    Some((mean, cov, conic, z.val()))
}

/// Projects one Gaussian in `f64`.
pub fn project_geometry(pos: [f64; 3], scale: [f64; 3], quat: [f64; 4], cam: &CameraFrame) -> Option<SplatGeometry> {
    project_generic(pos, scale, quat, cam).map(|(mean, cov, conic, depth)| SplatGeometry { mean, cov, conic, depth })
}

/// Geometry plus the Jacobian of `(mean_x, mean_y, conic_a, conic_b, conic_c)` with respect to
/// `(pos[3], scale[3], quat[4])`.
pub fn project_with_jacobian(
    pos: [f64; 3],
    scale: [f64; 3],
    quat: [f64; 4],
    cam: &CameraFrame,
) -> Option<(SplatGeometry, [[f64; 10]; 5])> {
    let p = std::array::from_fn(|i| Dual::<10>::var(pos[i], i));
    let s = std::array::from_fn(|i| Dual::<10>::var(scale[i], 3 + i));
    let q = std::array::from_fn(|i| Dual::<10>::var(quat[i], 6 + i));
    let (mean, cov, conic, depth) = project_generic(p, s, q, cam)?;
    let geom = SplatGeometry {
        mean: mean.map(|v| v.v),
        cov: cov.map(|v| v.v),
        conic: conic.map(|v| v.v),
        depth,
    };
    let jac = [mean[0].d, mean[1].d, conic[0].d, conic[1].d, conic[2].d];
    Some((geom, jac))
}

/// Projects every Gaussian of `frame` into `camera`, dropping those behind the near plane.
pub fn project(frame: &GaussianFrame, camera: &CameraPose) -> Result<Vec<ProjectedSplat>> {
    let cam = camera.frame()?;
    Ok(frame
        .gaussians
        .iter()
        .filter_map(|gs| {
            let geom = project_geometry(gs.position, gs.scale, gs.rotation, &cam)?;
            let [a, b, c] = geom.cov;
            Some(ProjectedSplat {
                mean: geom.mean,
                covariance: [[a, b], [b, c]],
                depth: geom.depth,
                color: gs.color,
                opacity: gs.opacity,
            })
        })
        .collect())
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` outside which the splat's exponent is below the cutoff.
fn footprint(geom: &SplatGeometry, h: usize, w: usize) -> Option<[usize; 4]> {
    let r2 = -2.0 * POWER_CUTOFF;
    let rx = (r2 * geom.cov[0]).sqrt();
    let ry = (r2 * geom.cov[2]).sqrt();
    let lo = |m: f64, r: f64| (m - r - 0.5).ceil().max(0.0);
    let hi = |m: f64, r: f64, n: usize| ((m + r - 0.5).floor() + 1.0).min(n as f64);
    let (x0, x1) = (lo(geom.mean[0], rx), hi(geom.mean[0], rx, w));
    let (y0, y1) = (lo(geom.mean[1], ry), hi(geom.mean[1], ry, h));
    if !(x0 < x1 && y0 < y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Front-to-back order: ascending depth, ties by index.
fn depth_order(geoms: &[Option<SplatGeometry>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..geoms.len()).filter(|&i| geoms[i].is_some()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (geoms[a].unwrap().depth, geoms[b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    idx
}

#[inline]
fn power(geom: &SplatGeometry, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - geom.mean[0];
    let dy = py - geom.mean[1];
    let [a, b, c] = geom.conic;
    (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy), dx, dy)
}

/// Composites per-splat feature vectors (`nf` channels each) over `background`.
///
/// Splats set to `None` are skipped. Returns the `H×W×nf` image and the `H×W`
/// final transmittance.
pub fn composite_features(
    geoms: &[Option<SplatGeometry>],
    opacity: &[f64],
    feats: &[f64],
    nf: usize,
    background: &[f64],
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(feats.len(), geoms.len() * nf);
    let mut out = vec![0.0; h * w * nf];
    let mut trans = vec![1.0; h * w];
    for k in depth_order(geoms) {
        let geom = geoms[k].as_ref().unwrap();
        let Some([x0, x1, y0, y1]) = footprint(geom, h, w) else { continue };
        let f = &feats[k * nf..(k + 1) * nf];
        for y in y0..y1 {
            for x in x0..x1 {
                let (pw, _, _) = power(geom, x as f64 + 0.5, y as f64 + 0.5);
                if pw < POWER_CUTOFF {
                    continue;
                }
                let p = y * w + x;
                let alpha = opacity[k] * pw.exp();
                let wgt = alpha * trans[p];
                for (o, &fv) in out[p * nf..(p + 1) * nf].iter_mut().zip(f) {
                    *o += wgt * fv;
                }
                trans[p] *= 1.0 - alpha;
            }
        }
    }
    for p in 0..h * w {
        for c in 0..nf {
            out[p * nf + c] += trans[p] * background[c];
        }
    }
    (out, trans)
}

/// Gradients of a composite with respect to its inputs.
#[derive(Clone, Debug)]
pub struct CompositeGrads {
    /// Per splat: `(mean_x, mean_y, conic_a, conic_b, conic_c)`.
    pub geom: Vec<[f64; 5]>,
    pub opacity: Vec<f64>,
    pub feats: Vec<f64>,
}

/// Backward pass of [`composite_features`] for an upstream gradient on its image output.
#[allow(clippy::too_many_arguments)]
pub fn composite_features_backward(
    geoms: &[Option<SplatGeometry>],
    opacity: &[f64],
    feats: &[f64],
    nf: usize,
    background: &[f64],
    h: usize,
    w: usize,
    grad: &[f64],
) -> CompositeGrads {
    let n = geoms.len();
    let order = depth_order(geoms);
    // Replay the forward pass to record the transmittance in front of every splat-pixel hit.
    let mut hits: Vec<(u32, u32, f64)> = Vec::new();
    let mut trans = vec![1.0; h * w];
    for &k in &order {
        let geom = geoms[k].as_ref().unwrap();
        let Some([x0, x1, y0, y1]) = footprint(geom, h, w) else { continue };
        for y in y0..y1 {
            for x in x0..x1 {
                let (pw, _, _) = power(geom, x as f64 + 0.5, y as f64 + 0.5);
                if pw < POWER_CUTOFF {
                    continue;
                }
                let p = y * w + x;
                hits.push((k as u32, p as u32, trans[p]));
                trans[p] *= 1.0 - opacity[k] * pw.exp();
            }
        }
    }
    let mut out = CompositeGrads {
        geom: vec![[0.0; 5]; n],
        opacity: vec![0.0; n],
        feats: vec![0.0; n * nf],
    };
    // `behind[p]` is the color composited behind the current splat at pixel p.
    let mut behind: Vec<f64> = (0..h * w).flat_map(|_| background.iter().copied()).collect();
    for &(k, p, t) in hits.iter().rev() {
        let (k, p) = (k as usize, p as usize);
        let geom = geoms[k].as_ref().unwrap();
        let (pw, dx, dy) = power(geom, (p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        let e = pw.exp();
        let alpha = opacity[k] * e;
        let f = &feats[k * nf..(k + 1) * nf];
        let g = &grad[p * nf..(p + 1) * nf];
        let b = &mut behind[p * nf..(p + 1) * nf];
        let mut g_alpha = 0.0;
        for c in 0..nf {
            out.feats[k * nf + c] += g[c] * alpha * t;
            g_alpha += g[c] * (f[c] - b[c]);
            b[c] = f[c] * alpha + (1.0 - alpha) * b[c];
        }
        g_alpha *= t;
        out.opacity[k] += g_alpha * e;
        let g_pow = g_alpha * alpha;
        let [a, bb, cc] = geom.conic;
        let gg = &mut out.geom[k];
        gg[0] += g_pow * (a * dx + bb * dy);
        gg[1] += g_pow * (bb * dx + cc * dy);
        gg[2] += g_pow * (-0.5 * dx * dx);
        gg[3] += g_pow * (-dx * dy);
        gg[4] += g_pow * (-0.5 * dy * dy);
    }
    out
}

/// Front-to-back compositing of projected splats over `background`.
pub fn composite(splats: &[ProjectedSplat], h: usize, w: usize, background: [f64; 3]) -> RenderedImage {
    let geoms: Vec<Option<SplatGeometry>> = splats.iter().map(|s| Some(s.geometry())).collect();
    let opacity: Vec<f64> = splats.iter().map(|s| s.opacity).collect();
    let feats: Vec<f64> = splats.iter().flat_map(|s| s.color).collect();
    let (rgb, trans) = composite_features(&geoms, &opacity, &feats, 3, &background, h, w);
    RenderedImage {
        height: h,
        width: w,
        rgb,
        alpha: trans.iter().map(|t| 1.0 - t).collect(),
    }
}

/// Projects and composites one frame.
pub fn render_frame(frame: &GaussianFrame, camera: &CameraPose, background: [f64; 3]) -> Result<RenderedImage> {
    let splats = project(frame, camera)?;
    Ok(composite(&splats, camera.height, camera.width, background))
}

/// Writes an `H×W×3` image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &std::path::Path, rgb: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions")
        .save(path)
        .map_err(|e| crate::error::Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frames as `{prefix}{index:04}.png` under `dir`, returning the paths.
pub fn export_sequence(
    dir: &std::path::Path,
    prefix: &str,
    frames: &[Vec<f64>],
    h: usize,
    w: usize,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{prefix}{i:04}.png"));
            save_png(&p, f, h, w)?;
            Ok(p)
        })
        .collect()
}
