//! Versioned binary checkpoint: header, config echo, named f32 arrays, optional optimizer state.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "S4DCKPT\0" | version u32 | kind str | config str | step u64
//! | n_arrays u32 | { name str | rank u32 | dims u64.. | data f32.. }
//! | has_optim u8 | [ adam_step u64 | n u32 | { name str | has u8 | m f32.. | v f32.. } ]
//! ```
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::optim::Adam;
use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"S4DCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    /// Per parameter, in store order: first and second moments when initialized.
    pub moments: Vec<(String, Option<(Vec<f32>, Vec<f32>)>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub step: u64,
    pub arrays: Vec<NamedArray>,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: String, step: u64, store: &ParamStore<f32>, optim: Option<&Adam<f32>>) -> Self {
        let arrays = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                NamedArray {
                    name: store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        let optim = optim.map(|a| OptimState {
            step: a.step,
            moments: store
                .ids()
                .map(|id| {
                    let i = id.index();
                    let mv = match (&a.m[i], &a.v[i]) {
                        (Some(m), Some(v)) => Some((m.data().to_vec(), v.data().to_vec())),
                        _ => None,
                    };
                    (store.name(id).to_string(), mv)
                })
                .collect(),
        });
        Self {
            kind: kind.to_string(),
            config,
            step,
            arrays,
            optim,
        }
    }

    /// Copies arrays into a store built from the same architecture; names and shapes must match.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::ConfigMismatch {
                field: "parameter count".into(),
                expected: store.len().to_string(),
                found: self.arrays.len().to_string(),
            });
        }
        for (id, a) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.arrays) {
            if store.name(id) != a.name || store.get(id).shape() != a.shape.as_slice() {
                return Err(Error::ConfigMismatch {
                    field: format!("parameter {}", store.name(id)),
                    expected: format!("{} {:?}", store.name(id), store.get(id).shape()),
                    found: format!("{} {:?}", a.name, a.shape),
                });
            }
            store.set(id, Tensor::new(&a.shape, a.data.clone()));
        }
        Ok(())
    }

    /// Rebuilds optimizer state for `store`, if the checkpoint carries one.
    pub fn restore_optim(&self, store: &ParamStore<f32>) -> Option<Adam<f32>> {
        let st = self.optim.as_ref()?;
        let mut adam = Adam::new(store.len());
        adam.step = st.step;
        for (id, (_, mv)) in store.ids().zip(&st.moments) {
            if let Some((m, v)) = mv {
                let shape = store.get(id).shape();
                adam.m[id.index()] = Some(Tensor::new(shape, m.clone()));
                adam.v[id.index()] = Some(Tensor::new(shape, v.clone()));
            }
        }
        Some(adam)
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut w, &self.kind);
        put_str(&mut w, &self.config);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut w, &a.name);
            w.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut w, &a.data);
        }
        match &self.optim {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                w.extend_from_slice(&(o.moments.len() as u32).to_le_bytes());
                for (name, mv) in &o.moments {
                    put_str(&mut w, name);
                    match mv {
                        None => w.push(0),
                        Some((m, v)) => {
                            w.push(1);
                            w.extend_from_slice(&(m.len() as u64).to_le_bytes());
                            put_f32s(&mut w, m);
                            put_f32s(&mut w, v);
                        }
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::parse(path, "magic", "not a checkpoint file"));
        }
        let version = r.u32("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(path, "format_version", format!("unsupported version {version}")));
        }
        let kind = r.string("kind")?;
        let config = r.string("config")?;
        let step = r.u64("step")?;
        let n = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string("array name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().product();
            let data = r.f32s(count, &name)?;
            arrays.push(NamedArray { name, shape, data });
        }
        let optim = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            _ => {
                let step = r.u64("optimizer step")?;
                let n = r.u32("optimizer count")? as usize;
                let mut moments = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r.string("optimizer name")?;
                    let mv = match r.take(1, "moment flag")?[0] {
                        0 => None,
                        _ => {
                            let len = r.u64("moment length")? as usize;
                            Some((r.f32s(len, &name)?, r.f32s(len, &name)?))
                        }
                    };
                    moments.push((name, mv));
                }
                Some(OptimState { step, moments })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::parse(path, "trailer", "unexpected bytes after checkpoint data"));
        }
        Ok(Self {
            kind,
            config,
            step,
            arrays,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::parse(self.path, field, "invalid UTF-8"))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::parse(self.path, field, "size overflow"))?, field)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut s, &mut rng);
        init.normal("a.w", &[3, 4], 1.0);
        init.zeros("a.b", &[4]);
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut s = store();
        let mut adam = Adam::new(s.len());
        let g = Graph::train(&s);
        let w = g.param(s.find("a.w").unwrap());
        let grads = g.backward(w.square().sum_all());
        adam.step(&mut s, &grads, 0.1);
        let ck = Checkpoint::from_store("test", "[x]\na = 1\n".into(), 7, &s, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.find("a.w").unwrap()).data(), s.get(s.find("a.w").unwrap()).data());
        let a2 = back.restore_optim(&fresh).unwrap();
        assert_eq!(a2.step, 1);
        assert!(a2.m[0].is_some() && a2.m[1].is_none());
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let ck = Checkpoint::from_store("test", String::new(), 0, &store(), None);
        let bytes = ck.to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(p, b"hello world, not a checkpoint").is_err());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let ck = Checkpoint::from_store("test", String::new(), 0, &store(), None);
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::<f32>::zeros(&[4, 4]));
        other.add("a.b", Tensor::<f32>::zeros(&[4]));
        let err = ck.restore_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
    }
}
