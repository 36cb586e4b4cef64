//! On-disk dataset format.
//!
//! One directory per object:
//!
//! ```text
//! manifest.txt      format/dims/caption lines, then one `camera` line per view
//! t{t}_v{v}.png     8-bit RGB view
//! flow_t{t}_v{v}.f32  raw little-endian f32, H×W×2, for t < T-1
//! ```
//!
//! A collection root holds `dataset.txt` listing object directory names, one per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::{CameraPose, FlowField, SpatioTemporalMatrix};
use crate::error::{invalid, Error, Result};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const COLLECTION: &str = "dataset.txt";

/// One object: its renders, flow and caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub matrix: SpatioTemporalMatrix,
    pub flow: FlowField,
    pub caption: String,
}

fn image_name(t: usize, v: usize) -> String {
    format!("t{t}_v{v}.png")
}

fn flow_name(t: usize, v: usize) -> String {
    format!("flow_t{t}_v{v}.f32")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(sample: &Sample, dir: &Path) -> Result<()> {
    let m = &sample.matrix;
    sample.flow.validate()?;
    if (sample.flow.timesteps, sample.flow.views, sample.flow.height, sample.flow.width)
        != (m.timesteps, m.views(), m.height, m.width)
    {
        return Err(invalid!("flow dimensions do not match the render matrix"));
    }
    save_frames(m, &sample.caption, dir)?;
    for t in 0..m.timesteps.saturating_sub(1) {
        for v in 0..m.views() {
            let bytes: Vec<u8> = sample.flow.frame(t, v).iter().flat_map(|f| f.to_le_bytes()).collect();
            write(&dir.join(flow_name(t, v)), &bytes)?;
        }
    }
    Ok(())
}

/// Writes the manifest and views of a matrix without flow files. Generated
/// objects use this layout; [`load_frames`] reads it back.
pub fn save_frames(m: &SpatioTemporalMatrix, caption: &str, dir: &Path) -> Result<()> {
    m.validate()?;
    if caption.contains('\n') {
        return Err(invalid!("caption must be a single line"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "format {FORMAT_VERSION}\ntimesteps {}\nviews {}\nheight {}\nwidth {}\ncaption {}\n",
        m.timesteps,
        m.views(),
        m.height,
        m.width,
        caption
    );
    for c in &m.cameras {
        let nums: Vec<String> = c
            .position
            .iter()
            .chain(&c.target)
            .chain(&c.up)
            .chain(std::iter::once(&c.fov_y))
            .map(|v| format!("{v:?}"))
            .collect();
        manifest.push_str(&format!("camera {}\n", nums.join(" ")));
    }
    write(&dir.join(MANIFEST), manifest.as_bytes())?;
    for t in 0..m.timesteps {
        for v in 0..m.views() {
            crate::splat_render::save_png(&dir.join(image_name(t, v)), m.frame(t, v), m.height, m.width)?;
        }
    }
    Ok(())
}

struct Manifest {
    timesteps: usize,
    views: usize,
    height: usize,
    width: usize,
    caption: String,
    cameras: Vec<[f64; 10]>,
}

fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let err = |field: &str, msg: String| Error::parse(path, field, msg);
    let mut fields = std::collections::HashMap::new();
    let mut cameras = Vec::new();
    let mut caption = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "camera" => {
                let field = format!("camera[{}]", cameras.len());
                let nums: Vec<f64> = rest
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|e| err(&field, format!("`{s}`: {e}"))))
                    .collect::<Result<_>>()?;
                let arr: [f64; 10] = nums
                    .try_into()
                    .map_err(|v: Vec<f64>| err(&field, format!("expected 10 numbers, found {}", v.len())))?;
                cameras.push(arr);
            }
            "caption" => caption = Some(rest.to_string()),
            "format" | "timesteps" | "views" | "height" | "width" => {
                let v: usize = rest
                    .trim()
                    .parse()
                    .map_err(|e| err(key, format!("`{}`: {e}", rest.trim())))?;
                fields.insert(key, v);
            }
            other => return Err(err(other, "unknown manifest field".into())),
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(k, "missing".into()));
    let version = get("format")?;
    if version != FORMAT_VERSION as usize {
        return Err(err("format", format!("unsupported version {version}")));
    }
    let m = Manifest {
        timesteps: get("timesteps")?,
        views: get("views")?,
        height: get("height")?,
        width: get("width")?,
        caption: caption.ok_or_else(|| err("caption", "missing".into()))?,
        cameras,
    };
    for (k, v) in [("timesteps", m.timesteps), ("views", m.views), ("height", m.height), ("width", m.width)] {
        if v == 0 {
            return Err(err(k, "must be positive".into()));
        }
    }
    if m.cameras.len() != m.views {
        return Err(err("camera", format!("{} camera lines for {} views", m.cameras.len(), m.views)));
    }
    Ok(m)
}

/// Reads the manifest and views of an object directory, ignoring any flow files.
pub fn load_frames(dir: &Path) -> Result<(SpatioTemporalMatrix, String)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let man = parse_manifest(&mpath, &text)?;
    let cameras: Vec<CameraPose> = man
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cam = CameraPose {
                position: [c[0], c[1], c[2]],
                target: [c[3], c[4], c[5]],
                up: [c[6], c[7], c[8]],
                fov_y: c[9],
                height: man.height,
                width: man.width,
            };
            cam.validate()
                .map_err(|e| Error::parse(&mpath, format!("camera[{i}]"), e.to_string()))?;
            Ok(cam)
        })
        .collect::<Result<_>>()?;
    let (h, w) = (man.height, man.width);
    let mut pixels = Vec::with_capacity(man.timesteps * man.views * h * w * 3);
    for t in 0..man.timesteps {
        for v in 0..man.views {
            let p = dir.join(image_name(t, v));
            let img = image::open(&p)
                .map_err(|e| Error::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::parse(
                    &p,
                    "image size",
                    format!("{}×{} but manifest says {h}×{w}", img.height(), img.width()),
                ));
            }
            pixels.extend(img.as_raw().iter().map(|&b| b as f64 / 255.0));
        }
    }
    let matrix = SpatioTemporalMatrix {
        timesteps: man.timesteps,
        height: h,
        width: w,
        cameras,
        pixels,
    };
    matrix.validate()?;
    Ok((matrix, man.caption))
}

pub fn load_dataset(dir: &Path) -> Result<Sample> {
    let (matrix, caption) = load_frames(dir)?;
    let (h, w) = (matrix.height, matrix.width);
    let mut flow = Vec::new();
    for t in 0..matrix.timesteps.saturating_sub(1) {
        for v in 0..matrix.views() {
            let fp = dir.join(flow_name(t, v));
            let bytes = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
            if bytes.len() != h * w * 2 * 4 {
                return Err(Error::parse(&fp, "flow length", format!("{} bytes, expected {}", bytes.len(), h * w * 8)));
            }
            flow.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
    }
    let flow = FlowField {
        timesteps: matrix.timesteps,
        views: matrix.views(),
        height: h,
        width: w,
        data: flow,
    };
    flow.validate()?;
    Ok(Sample { matrix, flow, caption })
}

/// Saves each sample under `root/obj{i:04}` and writes the index.
pub fn save_collection(root: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    let mut dirs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = object_name(i);
        let dir = root.join(&name);
        save_dataset(s, &dir)?;
        names.push(name);
        dirs.push(dir);
    }
    write_index(root, &names)?;
    Ok(dirs)
}

/// Directory name of the `i`-th object of a collection.
pub fn object_name(i: usize) -> String {
    format!("obj{i:04}")
}

/// Writes the collection index listing `names` under `root`.
pub fn write_index(root: &Path, names: &[String]) -> Result<()> {
    write(&root.join(COLLECTION), (names.join("\n") + "\n").as_bytes())
}

/// Object directories listed by a collection index. A directory holding a single
/// object manifest is treated as a one-object collection.
pub fn list_collection(root: &Path) -> Result<Vec<PathBuf>> {
    let index = root.join(COLLECTION);
    if !index.exists() && root.join(MANIFEST).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let dirs: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| root.join(l))
        .collect();
    if dirs.is_empty() {
        return Err(Error::parse(&index, "objects", "collection lists no objects"));
    }
    Ok(dirs)
}

pub fn load_collection(root: &Path) -> Result<Vec<Sample>> {
    list_collection(root)?.iter().map(|d| load_dataset(d)).collect()
}
