//! Synthetic animated scenes, ground-truth renders and flow, and the dataset format.

pub mod camera;
mod dataset;

use rand::Rng;

pub use camera::{make_orbit_cameras, pluecker_grid, CameraFrame, CameraPose, PlueckerRay, Vec3};
pub use dataset::{
    list_collection, load_collection, load_dataset, load_frames, object_name, save_collection, save_dataset, save_frames,
    write_index, Sample,
};

use crate::error::{invalid, Result};
use crate::par::Execution;
use crate::splat_render::{composite_features, project_geometry, SplatGeometry};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keyframe {
    pub t: usize,
    pub center: Vec3,
}

/// A flat-colored ellipsoidal blob following a piecewise-linear trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    /// Sorted by `t`, without duplicates. Held constant before the first and after the last.
    pub keyframes: Vec<Keyframe>,
    pub scale: Vec3,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Primitive {
    /// Center at (possibly fractional) time `t`.
    pub fn center(&self, t: f64) -> Vec3 {
        let k = &self.keyframes;
        if t <= k[0].t as f64 {
            return k[0].center;
        }
        let last = k[k.len() - 1];
        if t >= last.t as f64 {
            return last.center;
        }
        let i = k.partition_point(|f| (f.t as f64) <= t) - 1;
        let (a, b) = (k[i], k[i + 1]);
        let (ta, tb) = (a.t as f64, b.t as f64);
        if t == ta {
            return a.center;
        }
        // Symmetric in (a, b) so that reversing time reproduces the same values bit for bit.
        std::array::from_fn(|c| (a.center[c] * (tb - t) + b.center[c] * (t - ta)) / (tb - ta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.background.iter().all(|&c| unit(c)) {
            return Err(invalid!("background color outside [0, 1]: {:?}", self.background));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.keyframes.is_empty() {
                return Err(invalid!("primitive {i} has no keyframes"));
            }
            if p.keyframes.windows(2).any(|w| w[0].t >= w[1].t) {
                return Err(invalid!("primitive {i}: keyframe times must be strictly increasing"));
            }
            if !unit(p.opacity) {
                return Err(invalid!("primitive {i}: opacity {} outside [0, 1]", p.opacity));
            }
            if !p.color.iter().all(|&c| unit(c)) {
                return Err(invalid!("primitive {i}: color {:?} outside [0, 1]", p.color));
            }
            if !p.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
                return Err(invalid!("primitive {i}: scale must be positive"));
            }
        }
        Ok(())
    }

    /// The same scene played backwards over `timesteps` frames.
    pub fn time_reversed(&self, timesteps: usize) -> Self {
        let last = timesteps.saturating_sub(1);
        let primitives = self
            .primitives
            .iter()
            .map(|p| Primitive {
                keyframes: p
                    .keyframes
                    .iter()
                    .rev()
                    .map(|k| Keyframe {
                        t: last - k.t.min(last),
                        center: k.center,
                    })
                    .collect(),
                ..p.clone()
            })
            .collect();
        Self {
            primitives,
            background: self.background,
        }
    }
}

/// Rendered views of one 4D object, pixel `(t, v, y, x, c)` at `(((t·V + v)·H + y)·W + x)·3 + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalMatrix {
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: Vec<CameraPose>,
    pub pixels: Vec<f64>,
}

impl SpatioTemporalMatrix {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize, v: usize) -> &[f64] {
        let n = self.frame_len();
        let o = (t * self.views() + v) * n;
        &self.pixels[o..o + n]
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.timesteps * self.views() * self.frame_len();
        if self.pixels.len() != expect {
            return Err(invalid!(
                "pixel buffer holds {} values, dims {}×{}×{}×{}×3 need {expect}",
                self.pixels.len(),
                self.timesteps,
                self.views(),
                self.height,
                self.width
            ));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid!("pixel values must lie in [0, 1]"));
        }
        for c in &self.cameras {
            c.validate()?;
            if (c.height, c.width) != (self.height, self.width) {
                return Err(invalid!("camera image size differs from matrix size"));
            }
        }
        Ok(())
    }
}

/// Per-pixel displacement from frame t to t+1 for `t < T-1`, layout `(t, v, y, x, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub timesteps: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 2
    }

    pub fn frame(&self, t: usize, v: usize) -> &[f32] {
        let n = self.frame_len();
        let o = (t * self.views + v) * n;
        &self.data[o..o + n]
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = self.timesteps.saturating_sub(1);
        if self.data.len() != pairs * self.views * self.frame_len() {
            return Err(invalid!("flow buffer length does not match its dimensions"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("flow contains non-finite values"));
        }
        Ok(())
    }
}

fn geometry_at(spec: &SceneSpec, t: f64, cam: &CameraFrame) -> Vec<Option<SplatGeometry>> {
    spec.primitives
        .iter()
        .map(|p| project_geometry(p.center(t), p.scale, [1.0, 0.0, 0.0, 0.0], cam))
        .collect()
}

/// Renders every `(t, v)` view and the analytic flow between consecutive timesteps.
pub fn render_scene(spec: &SceneSpec, cameras: &[CameraPose], timesteps: usize) -> Result<(SpatioTemporalMatrix, FlowField)> {
    render_scene_with(spec, cameras, timesteps, Execution::default())
}

pub fn render_scene_with(
    spec: &SceneSpec,
    cameras: &[CameraPose],
    timesteps: usize,
    exec: Execution,
) -> Result<(SpatioTemporalMatrix, FlowField)> {
    spec.validate()?;
    if timesteps == 0 {
        return Err(invalid!("timestep count must be at least 1"));
    }
    let Some(first) = cameras.first() else {
        return Err(invalid!("at least one camera is required"));
    };
    let (h, w) = (first.height, first.width);
    if cameras.iter().any(|c| (c.height, c.width) != (h, w)) {
        return Err(invalid!("all cameras must share one image size"));
    }
    let frames: Vec<CameraFrame> = cameras.iter().map(|c| c.frame()).collect::<Result<_>>()?;
    let v_len = cameras.len();
    let opacity: Vec<f64> = spec.primitives.iter().map(|p| p.opacity).collect();
    let colors: Vec<f64> = spec.primitives.iter().flat_map(|p| p.color).collect();
    let views = exec.map(timesteps * v_len, |b| {
        let (t, v) = (b / v_len, b % v_len);
        let geoms = geometry_at(spec, t as f64, &frames[v]);
        let (rgb, _) = composite_features(&geoms, &opacity, &colors, 3, &spec.background, h, w);
        let flow = (t + 1 < timesteps).then(|| {
            let next = geometry_at(spec, (t + 1) as f64, &frames[v]);
            let disp: Vec<f64> = geoms
                .iter()
                .zip(&next)
                .flat_map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => [b.mean[0] - a.mean[0], b.mean[1] - a.mean[1]],
                    _ => [0.0, 0.0],
                })
                .collect();
            composite_features(&geoms, &opacity, &disp, 2, &[0.0, 0.0], h, w).0
        });
        (rgb, flow)
    });
    let mut pixels = Vec::with_capacity(timesteps * v_len * h * w * 3);
    let mut flow = Vec::new();
    for (rgb, f) in views {
        // Compositing is a convex combination of values in [0, 1]; clamp only rounding residue.
        pixels.extend(rgb.into_iter().map(|p| p.clamp(0.0, 1.0)));
        if let Some(f) = f {
            flow.extend(f.into_iter().map(|v| v as f32));
        }
    }
    Ok((
        SpatioTemporalMatrix {
            timesteps,
            height: h,
            width: w,
            cameras: cameras.to_vec(),
            pixels,
        },
        FlowField {
            timesteps,
            views: v_len,
            height: h,
            width: w,
            data: flow,
        },
    ))
}

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.1]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.8, 0.1]),
    ("purple", [0.55, 0.2, 0.7]),
    ("orange", [0.95, 0.5, 0.1]),
    ("cyan", [0.1, 0.75, 0.8]),
    ("gray", [0.45, 0.45, 0.45]),
];

const MOTIONS: [(&str, Vec3); 6] = [
    ("rightward", [1.0, 0.0, 0.0]),
    ("leftward", [-1.0, 0.0, 0.0]),
    ("upward", [0.0, 1.0, 0.0]),
    ("downward", [0.0, -1.0, 0.0]),
    ("forward", [0.0, 0.0, 1.0]),
    ("backward", [0.0, 0.0, -1.0]),
];

/// Knobs for [`random_scene`].
#[derive(Clone, Debug)]
pub struct SceneParams {
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Largest per-timestep displacement of a moving part, world units.
    pub max_step: f64,
    pub background: [f64; 3],
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_primitives: 3,
            max_primitives: 6,
            max_step: 0.06,
            background: [1.0; 3],
        }
    }
}

/// A random object made of blobs in one dominant color, part of which drifts in one
/// direction. Returns the scene and a short caption describing it.
pub fn random_scene<R: Rng>(rng: &mut R, timesteps: usize, params: &SceneParams) -> (SceneSpec, String) {
    let count = rng.random_range(params.min_primitives..=params.max_primitives.max(params.min_primitives));
    let (cname, base) = COLORS[rng.random_range(0..COLORS.len())];
    let (mname, dir) = MOTIONS[rng.random_range(0..MOTIONS.len())];
    let step = rng.random_range(0.4..1.0) * params.max_step;
    let last = timesteps.saturating_sub(1);
    let primitives = (0..count)
        .map(|i| {
            let c: Vec3 = std::array::from_fn(|_| rng.random_range(-0.35..0.35));
            let moving = i == 0 || rng.random_bool(0.5);
            let end: Vec3 = std::array::from_fn(|k| c[k] + if moving { dir[k] * step * last as f64 } else { 0.0 });
            let keyframes = if moving && last > 0 {
                vec![Keyframe { t: 0, center: c }, Keyframe { t: last, center: end }]
            } else {
                vec![Keyframe { t: 0, center: c }]
            };
            let jitter = |v: f64, rng: &mut R| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
            Primitive {
                keyframes,
                scale: std::array::from_fn(|_| rng.random_range(0.08..0.2)),
                color: [jitter(base[0], rng), jitter(base[1], rng), jitter(base[2], rng)],
                opacity: rng.random_range(0.75..0.98),
            }
        })
        .collect();
    let size = if count <= 4 { "small" } else { "large" };
    let caption = format!("a {size} {cname} object drifting {mname}");
    (
        SceneSpec {
            primitives,
            background: params.background,
        },
        caption,
    )
}
