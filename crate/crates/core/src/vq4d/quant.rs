//! Multi-chunk vector quantization.

use super::{LatentGrid, TokenGrid};
use crate::autograd::Real;
use crate::error::{invalid, Result};

/// `n` sub-codebooks of `K_c` entries each, entry size `d/n`. Layout `(chunk, entry, dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub chunks: usize,
    pub entries: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    /// Assignment counts per `(chunk, entry)` since the last reset.
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(chunks: usize, entries: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if entries < 2 {
            return Err(invalid!("a sub-codebook needs at least 2 entries"));
        }
        if data.len() != chunks * entries * dim {
            return Err(invalid!("codebook data length {} != {chunks}×{entries}×{dim}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("codebook entries must be finite"));
        }
        Ok(Self {
            chunks,
            entries,
            dim,
            data,
            usage: vec![0; chunks * entries],
        })
    }

    pub fn entry(&self, chunk: usize, index: usize) -> &[f32] {
        let o = (chunk * self.entries + index) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn sub_book(&self, chunk: usize) -> &[f32] {
        let n = self.entries * self.dim;
        &self.data[chunk * n..(chunk + 1) * n]
    }
}

/// Index of the entry nearest to `x` in squared Euclidean distance; ties go to the lower index.
pub fn nearest_entry<E: Real>(x: &[E], book: &[E], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = E::infinity();
    for (i, e) in book.chunks_exact(dim).enumerate() {
        let mut d = E::zero();
        for (&a, &b) in x.iter().zip(e) {
            let t = a - b;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Splits each latent vector into `n` chunks and maps each to its nearest sub-codebook entry.
///
/// Returns the tokens, the quantized latents and the commitment term
/// `mean ‖z − z_q‖²` over all latent components.
pub fn quantize(latents: &LatentGrid, book: &mut Codebook) -> Result<(TokenGrid, LatentGrid, f64)> {
    if latents.dim != book.chunks * book.dim {
        return Err(invalid!(
            "latent dim {} does not match {} chunks of {}",
            latents.dim,
            book.chunks,
            book.dim
        ));
    }
    let (n, dc) = (book.chunks, book.dim);
    let mut idx = Vec::with_capacity(latents.vectors() * n);
    let mut q = Vec::with_capacity(latents.data.len());
    let mut err = 0.0f64;
    for z in latents.data.chunks_exact(latents.dim) {
        for c in 0..n {
            let x = &z[c * dc..(c + 1) * dc];
            let k = nearest_entry(x, book.sub_book(c), dc);
            book.usage[c * book.entries + k] += 1;
            idx.push(k as u32);
            let e = book.entry(c, k);
            err += x.iter().zip(e).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
            q.extend_from_slice(e);
        }
    }
    let tokens = TokenGrid {
        timesteps: latents.timesteps,
        views: latents.views,
        h: latents.h,
        w: latents.w,
        chunks: n,
        vocab: book.entries,
        data: idx,
    };
    let quantized = LatentGrid {
        data: q,
        ..latents.clone()
    };
    Ok((tokens, quantized, err / latents.data.len().max(1) as f64))
}

/// Table lookup plus chunk concatenation.
pub fn dequantize(tokens: &TokenGrid, book: &Codebook) -> Result<LatentGrid> {
    if tokens.chunks != book.chunks {
        return Err(invalid!("token grid has {} chunks, codebook {}", tokens.chunks, book.chunks));
    }
    let mut data = Vec::with_capacity(tokens.data.len() * book.dim);
    for (i, &k) in tokens.data.iter().enumerate() {
        if k as usize >= book.entries {
            return Err(invalid!("token {k} at position {i} out of range for {} entries", book.entries));
        }
        data.extend_from_slice(book.entry(i % book.chunks, k as usize));
    }
    Ok(LatentGrid {
        timesteps: tokens.timesteps,
        views: tokens.views,
        h: tokens.h,
        w: tokens.w,
        dim: book.chunks * book.dim,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(data: Vec<f32>, dim: usize) -> LatentGrid {
        LatentGrid {
            timesteps: 1,
            views: 1,
            h: 1,
            w: data.len() / dim,
            dim,
            data,
        }
    }

    #[test]
    fn exact_entry_maps_to_its_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..2 * 8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut book = Codebook::new(2, 8, 4, data).unwrap();
        let mut z = book.entry(0, 5).to_vec();
        z.extend_from_slice(book.entry(1, 5));
        let (tok, q, commit) = quantize(&grid(z.clone(), 8), &mut book).unwrap();
        assert_eq!(tok.data, vec![5, 5]);
        assert_eq!(q.data, z);
        assert_eq!(commit, 0.0);
    }

    #[test]
    fn two_entry_book_by_hand() {
        let mut book = Codebook::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        // Squared distances 0.02 and 1.62.
        let (tok, _, _) = quantize(&grid(vec![0.1, 0.1], 2), &mut book).unwrap();
        assert_eq!(tok.data, vec![0]);
        assert_eq!(book.usage, vec![1, 0]);
    }

    #[test]
    fn fixed_point_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..2 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut book = Codebook::new(2, 16, 3, data).unwrap();
        let mut z = Vec::new();
        for _ in 0..10 {
            for c in 0..2 {
                z.extend_from_slice(book.entry(c, rng.random_range(0..16)));
            }
        }
        let g = grid(z, 6);
        let (tok, q, _) = quantize(&g, &mut book).unwrap();
        assert_eq!(q, g);
        assert_eq!(dequantize(&tok, &book).unwrap(), g);
    }

    #[test]
    fn dequantize_checks_range() {
        let book = Codebook::new(1, 2, 1, vec![3.0, 4.0]).unwrap();
        let mut tok = TokenGrid {
            timesteps: 1,
            views: 1,
            h: 1,
            w: 1,
            chunks: 1,
            vocab: 2,
            data: vec![0],
        };
        assert_eq!(dequantize(&tok, &book).unwrap().data, vec![3.0]);
        tok.data[0] = 2;
        assert!(dequantize(&tok, &book).is_err());
    }

    #[test]
    fn codebook_rejects_bad_shapes() {
        assert!(Codebook::new(1, 1, 1, vec![0.0]).is_err());
        assert!(Codebook::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Codebook::new(1, 2, 1, vec![0.0, f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn matches_exhaustive_scan(seed in 0u64..100_000, k in 2usize..=64, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..2 * k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut book = Codebook::new(2, k, dim, data).unwrap();
            let z: Vec<f32> = (0..12 * 2 * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (tok, _, _) = quantize(&grid(z.clone(), 2 * dim), &mut book).unwrap();
            for (i, &got) in tok.data.iter().enumerate() {
                let c = i % 2;
                let x = &z[i * dim..(i + 1) * dim];
                let dist = |j: usize| -> f64 {
                    x.iter().zip(book.entry(c, j)).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum()
                };
                let best = (0..k).map(dist).fold(f64::INFINITY, f64::min);
                prop_assert!(dist(got as usize) <= best + 1e-6);
            }
        }
    }
}
