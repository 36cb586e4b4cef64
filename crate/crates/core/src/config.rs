//! Run configuration: sectioned `key = value` text, every key overridable as `section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// A value that can appear on the right-hand side of a config line.
pub trait ConfigValue: Sized {
    fn to_text(&self) -> String;
    fn parse_text(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn to_text(&self) -> String {
                format!("{self:?}")
            }
            fn parse_text(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl ConfigValue for String {
    fn to_text(&self) -> String {
        self.clone()
    }
    fn parse_text(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
}

impl ConfigValue for [f64; 3] {
    fn to_text(&self) -> String {
        format!("{:?},{:?},{:?}", self[0], self[1], self[2])
    }
    fn parse_text(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        parts.try_into().map_err(|p: Vec<f64>| format!("expected 3 comma-separated numbers, found {}", p.len()))
    }
}

/// Declares a config section struct with defaults and text (de)serialization.
macro_rules! config_section {
    (
        $(#[$meta:meta])*
        pub struct $name:ident ($section:literal) {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default ),* }
            }
        }

        impl $crate::config::Section for $name {
            const NAME: &'static str = $section;

            fn entries(&self) -> Vec<(&'static str, String)> {
                use $crate::config::ConfigValue;
                vec![$( (stringify!($field), self.$field.to_text()) ),*]
            }

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                use $crate::config::ConfigValue;
                match key {
                    $( stringify!($field) => { self.$field = <$ty>::parse_text(value)?; Ok(()) } )*
                    _ => Err(format!("unknown key `{}.{}`", $section, key)),
                }
            }
        }
    };
}
pub(crate) use config_section;

pub trait Section: Default + Clone {
    const NAME: &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;

    /// Renders as a `[section]` block.
    fn to_text(&self) -> String {
        let mut s = format!("[{}]\n", Self::NAME);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Field-by-field comparison against `other`, reporting the first difference.
    fn check_matches(&self, other: &Self) -> Result<()> {
        for ((k, a), (_, b)) in self.entries().into_iter().zip(other.entries()) {
            if a != b {
                return Err(Error::ConfigMismatch {
                    field: format!("{}.{k}", Self::NAME),
                    expected: a,
                    found: b,
                });
            }
        }
        Ok(())
    }

    /// Parses a block produced by [`Section::to_text`] (or a whole config file, using only this section).
    fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for e in parse(text)? {
            if e.section == Self::NAME {
                s.set(&e.key, &e.value).map_err(|m| invalid!("{}.{}: {m}", e.section, e.key))?;
            }
        }
        Ok(s)
    }
}

/// One `key = value` line with its section.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses sectioned `key = value` text. `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| invalid!("line {}: unterminated section header", i + 1))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid!("line {}: expected `key = value`", i + 1))?;
        if section.is_empty() {
            return Err(invalid!("line {}: key `{}` outside any section", i + 1, k.trim()));
        }
        out.push(Entry {
            section: section.clone(),
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Splits a `section.key=value` override.
pub fn parse_override(s: &str) -> Result<Entry> {
    let (path, value) = s
        .split_once('=')
        .ok_or_else(|| invalid!("override `{s}` must look like section.key=value"))?;
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| invalid!("override `{s}` must name a section, e.g. vq4d.gaussians=128"))?;
    Ok(Entry {
        section: section.trim().to_string(),
        key: key.trim().to_string(),
        value: value.trim().to_string(),
        line: 0,
    })
}

config_section! {
    /// Synthetic dataset generation.
    pub struct SceneConfig ("scene") {
        timesteps: usize = 4,
        views: usize = 4,
        size: usize = 32,
        objects: usize = 16,
        radius: f64 = 2.5,
        elevation: f64 = 0.3,
        fov_y: f64 = 0.8,
        max_step: f64 = 0.06,
        min_primitives: usize = 3,
        max_primitives: usize = 6,
        background: [f64; 3] = [1.0, 1.0, 1.0],
    }
}

config_section! {
    /// Optimizer settings for one training stage.
    pub struct TrainConfig ("train") {
        steps: u64 = 2000,
        lr: f64 = 3e-4,
        warmup: u64 = 50,
        /// Final learning rate as a fraction of `lr`.
        lr_floor: f64 = 0.1,
        weight_decay: f64 = 0.0,
        clip_norm: f64 = 1.0,
        batch: usize = 1,
        log_every: u64 = 50,
    }
}

config_section! {
    /// Sampling parameters for generation.
    pub struct SamplingConfig ("sampling") {
        temperature: f64 = 1.0,
        top_k: usize = 50,
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.views == 0 || self.objects == 0 {
            return Err(invalid!("scene.timesteps, scene.views and scene.objects must be positive"));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(invalid!("scene.size must be a positive multiple of 8, got {}", self.size));
        }
        if self.radius <= 0.0 {
            return Err(invalid!("scene.radius must be positive"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(invalid!("scene.fov_y must lie in (0, π)"));
        }
        if self.min_primitives == 0 || self.min_primitives > self.max_primitives {
            return Err(invalid!("scene.min_primitives must be in 1..=max_primitives"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid!("scene.background must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.clip_norm < 0.0 || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(invalid!("train settings: lr > 0, batch ≥ 1, clip_norm ≥ 0, lr_floor in [0, 1] required"));
        }
        Ok(())
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || self.top_k == 0 {
            return Err(invalid!("sampling.temperature must be ≥ 0 and sampling.top_k ≥ 1"));
        }
        Ok(())
    }
}

/// Values collected from a file plus overrides, keyed `section.key`.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    pub values: BTreeMap<(String, String), String>,
}

impl RawConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for e in parse(&text).map_err(|e| Error::parse(p, "config", e.to_string()))? {
                raw.values.insert((e.section, e.key), e.value);
            }
        }
        for o in overrides {
            let e = parse_override(o)?;
            raw.values.insert((e.section, e.key), e.value);
        }
        Ok(raw)
    }

    /// Builds a section named `name` (which may differ from the type's default name,
    /// e.g. `train_vq` and `train_star` both use [`TrainConfig`]).
    pub fn section<S: Section>(&self, name: &str, base: S) -> Result<S> {
        let mut s = base;
        for ((sec, key), value) in &self.values {
            if sec == name {
                s.set(key, value).map_err(|m| invalid!("{name}.{key}: {m}"))?;
            }
        }
        Ok(s)
    }

    /// Rejects sections and keys that no known section accepts.
    pub fn check_known(&self, known: &[(&str, Vec<&'static str>)]) -> Result<()> {
        for (sec, key) in self.values.keys() {
            match known.iter().find(|(n, _)| n == sec) {
                None => return Err(invalid!("unknown config section `{sec}`")),
                Some((_, keys)) if !keys.contains(&key.as_str()) => {
                    return Err(invalid!("unknown config key `{sec}.{key}`"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let e = parse("# top\n[scene]\nsize = 16 # inline\n\n[train]\nlr=0.01\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].section.as_str(), e[0].key.as_str(), e[0].value.as_str()), ("scene", "size", "16"));
        assert_eq!(e[1].line, 6);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse("size = 3").is_err());
        assert!(parse("[scene\n").is_err());
        assert!(parse("[scene]\nsize 3").is_err());
    }

    #[test]
    fn section_round_trip_and_mismatch() {
        let mut s = SceneConfig::default();
        s.size = 16;
        s.background = [0.5, 0.25, 1.0];
        let back = SceneConfig::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        let err = SceneConfig::default().check_matches(&s).unwrap_err().to_string();
        assert!(err.contains("scene.size"), "{err}");
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "[scene]\nsize = 16\nviews = 2\n").unwrap();
        let raw = RawConfig::load(Some(&p), &["scene.size=24".into()]).unwrap();
        let s = raw.section("scene", SceneConfig::default()).unwrap();
        assert_eq!((s.size, s.views), (24, 2));
        assert!(s.validate().is_ok());
        assert!(raw.section("scene", SceneConfig { size: 33, ..Default::default() }).unwrap().size == 24);
    }

    #[test]
    fn bad_values_are_reported_with_key() {
        let raw = RawConfig::load(None, &["scene.size=big".into()]).unwrap();
        let err = raw.section("scene", SceneConfig::default()).unwrap_err().to_string();
        assert!(err.contains("scene.size"), "{err}");
        assert!(parse_override("size=3").is_err());
        let raw = RawConfig::load(None, &["scene.colour=1".into()]).unwrap();
        assert!(raw.section("scene", SceneConfig::default()).is_err());
    }

    #[test]
    fn size_must_divide_by_eight() {
        let s = SceneConfig { size: 33, ..Default::default() };
        assert!(s.validate().is_err());
    }
}
