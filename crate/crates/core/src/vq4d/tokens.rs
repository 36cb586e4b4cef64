//! Discrete token grids and their file format.
//!
//! A token file is one ASCII header line
//! `tokengrid 1 <timesteps> <views> <h> <w> <chunks> <vocab>` followed by the
//! indices as little-endian `u32`, layout `(t, v, y, x, chunk)`.

use std::path::Path;

use crate::error::{invalid, Error, Result};

const MAGIC: &str = "tokengrid";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub timesteps: usize,
    pub views: usize,
    pub h: usize,
    pub w: usize,
    pub chunks: usize,
    pub vocab: usize,
    pub data: Vec<u32>,
}

impl TokenGrid {
    /// Tokens of one timestep (one group), layout `(v, y, x, chunk)`.
    pub fn group_len(&self) -> usize {
        self.views * self.h * self.w * self.chunks
    }

    pub fn group(&self, t: usize) -> &[u32] {
        let n = self.group_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.timesteps * self.group_len() {
            return Err(invalid!(
                "token grid holds {} indices, dims need {}",
                self.data.len(),
                self.timesteps * self.group_len()
            ));
        }
        if let Some((i, k)) = self.data.iter().enumerate().find(|(_, &k)| k as usize >= self.vocab) {
            return Err(invalid!("token {k} at position {i} outside vocabulary of {}", self.vocab));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{MAGIC} {VERSION} {} {} {} {} {} {}\n",
            self.timesteps, self.views, self.h, self.w, self.chunks, self.vocab
        );
        let mut out = header.into_bytes();
        for k in &self.data {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, "header", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(path, "header", "not UTF-8"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != MAGIC {
            return Err(Error::parse(path, "header", format!("expected `{MAGIC} <version> <6 dims>`")));
        }
        let names = ["version", "timesteps", "views", "h", "w", "chunks", "vocab"];
        let mut nums = [0usize; 7];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| Error::parse(path, names[i], format!("not an integer: {f}")))?;
        }
        if nums[0] != VERSION as usize {
            return Err(Error::parse(path, "version", format!("unsupported version {}", nums[0])));
        }
        let body = &bytes[nl + 1..];
        if body.len() % 4 != 0 {
            return Err(Error::parse(path, "data", "length is not a multiple of 4"));
        }
        let grid = Self {
            timesteps: nums[1],
            views: nums[2],
            h: nums[3],
            w: nums[4],
            chunks: nums[5],
            vocab: nums[6],
            data: body.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        };
        grid.validate().map_err(|e| Error::parse(path, "data", e.to_string()))?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
