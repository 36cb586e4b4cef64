//! Gaussian parameter sets and the offset correction step.

use crate::error::{invalid, Result};

/// Length of a flattened Gaussian parameter vector: position 3, scale 3, rotation 4, opacity 1, color 3.
pub const PARAM_DIM: usize = 14;

/// Lower bound applied to scales after correction.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Quaternions whose norm deviates from 1 by more than this are renormalized.
pub const QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn to_params(&self) -> [f64; PARAM_DIM] {
        let mut p = [0.0; PARAM_DIM];
        p[0..3].copy_from_slice(&self.position);
        p[3..6].copy_from_slice(&self.scale);
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), PARAM_DIM);
        Self {
            position: [p[0], p[1], p[2]],
            scale: [p[3], p[4], p[5]],
            rotation: [p[6], p[7], p[8], p[9]],
            opacity: p[10],
            color: [p[11], p[12], p[13]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-5 {
            return Err(invalid!("rotation quaternion norm {qn} is not 1"));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid!("scales must be positive: {:?}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(invalid!("opacity {} outside [0, 1]", self.opacity));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid!("color {:?} outside [0, 1]", self.color));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite position"));
        }
        Ok(())
    }
}

/// Additive offsets for every Gaussian parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianOffset {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianOffset {
    pub fn from_params(p: &[f64]) -> Self {
        let g = Gaussian::from_params(p);
        Self {
            position: g.position,
            scale: g.scale,
            rotation: g.rotation,
            opacity: g.opacity,
            color: g.color,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFrame {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianFrame {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians.iter().try_for_each(Gaussian::validate)
    }
}

/// One frame per timestep, with Gaussian `i` of every frame describing the same point.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGaussians {
    pub frames: Vec<GaussianFrame>,
}

impl DynamicGaussians {
    pub fn timesteps(&self) -> usize {
        self.frames.len()
    }

    pub fn count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != n {
                return Err(invalid!("frame {t} has {} Gaussians, frame 0 has {n}", f.len()));
            }
            f.validate()?;
        }
        Ok(())
    }

    /// Flattened `(T, n, 14)` parameters.
    pub fn to_params(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.gaussians.iter().flat_map(|g| g.to_params()))
            .collect()
    }

    pub fn from_params(t: usize, n: usize, p: &[f64]) -> Self {
        assert_eq!(p.len(), t * n * PARAM_DIM);
        Self {
            frames: (0..t)
                .map(|ti| GaussianFrame {
                    gaussians: (0..n)
                        .map(|i| {
                            let o = (ti * n + i) * PARAM_DIM;
                            Gaussian::from_params(&p[o..o + PARAM_DIM])
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Per-timestep, per-Gaussian offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetFeatures {
    pub frames: Vec<Vec<GaussianOffset>>,
}

pub fn normalize_quat_if_needed(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() <= QUAT_TOLERANCE {
        q
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

/// Adds offsets to every parameter, then projects back onto the valid parameter set.
pub fn apply_offsets(gs: &DynamicGaussians, offsets: &OffsetFeatures) -> Result<DynamicGaussians> {
    if offsets.frames.len() != gs.frames.len() {
        return Err(invalid!(
            "offsets cover {} timesteps, Gaussians {}",
            offsets.frames.len(),
            gs.frames.len()
        ));
    }
    let frames = gs
        .frames
        .iter()
        .zip(&offsets.frames)
        .enumerate()
        .map(|(t, (f, o))| {
            if f.len() != o.len() {
                return Err(invalid!("timestep {t}: {} Gaussians but {} offsets", f.len(), o.len()));
            }
            let gaussians = f
                .gaussians
                .iter()
                .zip(o)
                .map(|(g, o)| {
                    let add3 = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                    let s = add3(g.scale, o.scale);
                    let c = add3(g.color, o.color);
                    let q = [
                        g.rotation[0] + o.rotation[0],
                        g.rotation[1] + o.rotation[1],
                        g.rotation[2] + o.rotation[2],
                        g.rotation[3] + o.rotation[3],
                    ];
                    Gaussian {
                        position: add3(g.position, o.position),
                        scale: s.map(|v| v.max(SCALE_FLOOR)),
                        rotation: normalize_quat_if_needed(q),
                        opacity: (g.opacity + o.opacity).clamp(0.0, 1.0),
                        color: c.map(|v| v.clamp(0.0, 1.0)),
                    }
                })
                .collect();
            Ok(GaussianFrame { gaussians })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DynamicGaussians { frames })
}
