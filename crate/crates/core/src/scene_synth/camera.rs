use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera looking from `position` at `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
}

/// Derived world→camera basis and intrinsics. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub down: Vec3,
    pub forward: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if (norm(self.up) - 1.0).abs() > 1e-6 {
            return Err(invalid!("camera up vector must be unit length, got norm {}", norm(self.up)));
        }
        if norm(sub(self.target, self.position)) <= 1e-12 {
            return Err(invalid!("degenerate camera: position equals target"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(invalid!("fov_y must lie in (0, π), got {}", self.fov_y));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("camera image size must be positive"));
        }
        let f = normalize(sub(self.target, self.position));
        if norm(cross(f, self.up)) < 1e-9 {
            return Err(invalid!("camera up vector is parallel to the viewing direction"));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<CameraFrame> {
        self.validate()?;
        let forward = normalize(sub(self.target, self.position));
        let right = normalize(cross(forward, self.up));
        let down = cross(forward, right);
        let fy = 0.5 * self.height as f64 / (0.5 * self.fov_y).tan();
        Ok(CameraFrame {
            origin: self.position,
            right,
            down,
            forward,
            fx: fy,
            fy,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
        })
    }
}

impl CameraFrame {
    /// World point to camera coordinates.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.origin);
        [dot(self.right, d), dot(self.down, d), dot(self.forward, d)]
    }

    /// World point to `(u, v, depth)` in pixels.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let [x, y, z] = self.to_camera(p);
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy, z)
    }

    /// Unit world-space direction through pixel coordinate `(u, v)`.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        let x = (u - self.cx) / self.fx;
        let y = (v - self.cy) / self.fy;
        normalize([
            self.right[0] * x + self.down[0] * y + self.forward[0],
            self.right[1] * x + self.down[1] * y + self.forward[1],
            self.right[2] * x + self.down[2] * y + self.forward[2],
        ])
    }
}

/// `count` cameras evenly spaced in azimuth on a circle around `target`.
///
/// Azimuth 0 places the camera on the +z side of the target; elevation lifts it towards +y.
pub fn make_orbit_cameras(
    count: usize,
    radius: f64,
    elevation: f64,
    target: Vec3,
    fov_y: f64,
    size: (usize, usize),
) -> Result<Vec<CameraPose>> {
    if count == 0 {
        return Err(invalid!("view count must be at least 1"));
    }
    if radius <= 0.0 || !radius.is_finite() {
        return Err(invalid!("orbit radius must be positive, got {radius}"));
    }
    (0..count)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let (ce, se) = (elevation.cos(), elevation.sin());
            let position = [
                target[0] + radius * ce * az.sin(),
                target[1] + radius * se,
                target[2] + radius * ce * az.cos(),
            ];
            let cam = CameraPose {
                position,
                target,
                up: [0.0, 1.0, 0.0],
                fov_y,
                height: size.0,
                width: size.1,
            };
            cam.validate()?;
            Ok(cam)
        })
        .collect()
}

/// Oriented line in Plücker coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlueckerRay {
    pub direction: Vec3,
    pub moment: Vec3,
}

impl PlueckerRay {
    pub fn from_origin_direction(origin: Vec3, direction: Vec3) -> Self {
        let direction = normalize(direction);
        Self {
            direction,
            moment: cross(origin, direction),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (d, m) = (self.direction, self.moment);
        [d[0], d[1], d[2], m[0], m[1], m[2]]
    }
}

/// One ray per cell of an `h × w` grid laid over the image, through each cell center.
pub fn pluecker_grid(camera: &CameraPose, h: usize, w: usize) -> Result<Vec<PlueckerRay>> {
    if h == 0 || w == 0 {
        return Err(invalid!("ray grid must be at least 1×1"));
    }
    let frame = camera.frame()?;
    let sy = camera.height as f64 / h as f64;
    let sx = camera.width as f64 / w as f64;
    let mut rays = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dir = frame.ray_dir((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy);
            rays.push(PlueckerRay::from_origin_direction(camera.position, dir));
        }
    }
    Ok(rays)
}
