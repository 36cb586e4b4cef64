use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{Graph, ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::scene_synth::{make_orbit_cameras, random_scene, render_scene, Sample, SceneParams, SpatioTemporalMatrix};
use crate::splat_render::render_gaussians;

fn tiny() -> VqConfig {
    VqConfig {
        timesteps: 2,
        views: 2,
        height: 16,
        width: 16,
        latent_dim: 8,
        chunks: 2,
        codebook_size: 16,
        token_dim: 16,
        heads: 2,
        enc_channels: 4,
        gaussians: 8,
        voxel_res: 4,
        unet_channels: 4,
        ..VqConfig::default()
    }
}

fn sample(cfg: &VqConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, caption) = random_scene(&mut rng, cfg.timesteps, &SceneParams::default());
    let cams = make_orbit_cameras(cfg.views, 2.5, 0.3, [0.0; 3], 0.8, (cfg.height, cfg.width)).unwrap();
    let (matrix, flow) = render_scene(&spec, &cams, cfg.timesteps).unwrap();
    Sample { matrix, flow, caption }
}

fn random_tokens(cfg: &VqConfig, seed: u64) -> TokenGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.timesteps * cfg.views * cfg.positions() * cfg.chunks;
    TokenGrid {
        timesteps: cfg.timesteps,
        views: cfg.views,
        h: cfg.latent_h(),
        w: cfg.latent_w(),
        chunks: cfg.chunks,
        vocab: cfg.codebook_size,
        data: (0..n).map(|_| rng.random_range(0..cfg.codebook_size as u32)).collect(),
    }
}

/// Gives the zero-initialized offset head random weights.
fn randomize_head(model: &mut Vq4dModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model.net.stop_head.w;
    for v in model.store.get_mut(w).data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
}

#[test]
fn encode_default_shape() {
    let cfg = VqConfig::default();
    let model = Vq4dModel::new(&cfg).unwrap();
    let pixels: Vec<f64> = (0..4 * 4 * 32 * 32 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let z = model.encode_images(&pixels, 4, 4, 32, 32).unwrap();
    assert_eq!((z.timesteps, z.views, z.h, z.w, z.dim), (4, 4, 4, 4, cfg.latent_dim));
    assert_eq!(z.data.len(), 4 * 4 * 4 * 4 * cfg.latent_dim);
}

#[test]
fn encoder_is_per_frame_and_non_constant() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let n = 16 * 16 * 3;
    let frame: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
    let mut pixels = frame.clone();
    pixels.extend(&frame);
    pixels.extend(vec![0.0; n]);
    pixels.extend(vec![1.0; n]);
    let z = model.encode_images(&pixels, 2, 2, 16, 16).unwrap();
    assert_eq!(z.slice(0, 0), z.slice(0, 1));
    assert_ne!(z.slice(1, 0), z.slice(1, 1));
}

#[test]
fn encode_rejects_sizes_not_divisible_by_8() {
    let model = Vq4dModel::new(&tiny()).unwrap();
    assert!(model.encode_images(&vec![0.5; 12 * 12 * 3], 1, 1, 12, 12).is_err());
    let mut cfg = tiny();
    cfg.height = 12;
    assert!(Vq4dModel::new(&cfg).is_err());
}

#[test]
fn dequantize_index_zero_gives_first_entries() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let book = model.codebook();
    let mut tok = random_tokens(&cfg, 0);
    tok.data.iter_mut().for_each(|k| *k = 0);
    let z = dequantize(&tok, &book).unwrap();
    let mut first = book.entry(0, 0).to_vec();
    first.extend_from_slice(book.entry(1, 0));
    for row in z.data.chunks_exact(cfg.latent_dim) {
        assert_eq!(row, &first[..]);
    }
    let z = dequantize(&random_tokens(&cfg, 1), &book).unwrap();
    assert!(z.data.iter().all(|v| v.is_finite()));
}

#[test]
fn factorize_default_shape() {
    let cfg = VqConfig::default();
    let model = Vq4dModel::new(&cfg).unwrap();
    let s = model.factorize(&random_tokens(&cfg, 2)).unwrap();
    assert_eq!((s.timesteps, s.views, s.positions, s.dim), (4, 4, 16, cfg.token_dim));
}

#[test]
fn factorize_acts_per_slice() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let tok = random_tokens(&cfg, 3);
    let s = model.factorize(&tok).unwrap();
    // swap slices (0,0) and (1,1)
    let per = cfg.positions() * cfg.chunks;
    let mut swapped = tok.clone();
    let (a, b) = (0, 3 * per);
    for i in 0..per {
        swapped.data.swap(a + i, b + i);
    }
    let s2 = model.factorize(&swapped).unwrap();
    assert_eq!(s.slice(0, 0), s2.slice(1, 1));
    assert_eq!(s.slice(1, 1), s2.slice(0, 0));
    assert_eq!(s.slice(0, 1), s2.slice(0, 1));
    // identical input slices give identical outputs
    let mut same = tok.clone();
    same.data.copy_within(0..per, per);
    let s3 = model.factorize(&same).unwrap();
    assert_eq!(s3.slice(0, 0), s3.slice(0, 1));
}

#[test]
fn static_generation_contract() {
    let cfg = VqConfig::default();
    let model = Vq4dModel::new(&cfg).unwrap();
    let s = model.factorize(&random_tokens(&cfg, 4)).unwrap();
    let gs = model.static_gs_generate(&s).unwrap();
    assert_eq!(gs.timesteps(), 4);
    assert!(gs.frames.iter().all(|f| f.len() == 256));
    for f in &gs.frames {
        for g in &f.gaussians {
            let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "quaternion norm {n}");
            g.validate().unwrap();
        }
    }
    assert_eq!(model.static_gs_generate(&s).unwrap(), gs);
}

#[test]
fn zero_head_gives_zero_offsets_and_identity_correction() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let tok = random_tokens(&cfg, 5);
    let s = model.factorize(&tok).unwrap();
    let gs = model.static_gs_generate(&s).unwrap();
    let off = model.stop_offsets(&gs, &s).unwrap();
    assert_eq!(off.frames.len(), cfg.timesteps);
    assert!(off.frames.iter().all(|f| f.len() == cfg.gaussians));
    assert!(off.frames.iter().flatten().all(|o| *o == GaussianOffset::default()));
    let (coarse, corrected) = model.decode_both(&tok).unwrap();
    assert_eq!(coarse, corrected);
}

#[test]
fn graph_offsets_with_zero_head_are_bit_identical() {
    let cfg = VqConfig::default();
    let model = Vq4dModel::new(&cfg).unwrap();
    let tok = random_tokens(&cfg, 6);
    let g = Graph::inference(&model.store);
    let d = model.net.decode(&g, model.net.lookup(&g, &tok.data));
    assert!(d.offsets.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(d.coarse.params().value().data(), d.corrected.params().value().data());
}

#[test]
fn stop_rejects_mismatched_timesteps() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let s = model.factorize(&random_tokens(&cfg, 7)).unwrap();
    let mut gs = model.static_gs_generate(&s).unwrap();
    gs.frames.pop();
    assert!(model.stop_offsets(&gs, &s).is_err());
}

#[test]
fn perturbing_one_timestep_changes_offsets_everywhere() {
    let cfg = tiny();
    let mut model = Vq4dModel::new(&cfg).unwrap();
    randomize_head(&mut model, 8);
    let s = model.factorize(&random_tokens(&cfg, 9)).unwrap();
    let gs = model.static_gs_generate(&s).unwrap();
    let base = model.stop_offsets(&gs, &s).unwrap();
    let mut s2 = s.clone();
    let per_t = cfg.views * cfg.positions() * cfg.token_dim;
    for v in &mut s2.data[per_t..2 * per_t] {
        *v += 0.5;
    }
    let moved = model.stop_offsets(&gs, &s2).unwrap();
    for t in 0..cfg.timesteps {
        assert_ne!(base.frames[t], moved.frames[t], "timestep {t} unaffected");
    }
}

#[test]
fn decoding_is_deterministic() {
    let cfg = tiny();
    let mut model = Vq4dModel::new(&cfg).unwrap();
    randomize_head(&mut model, 10);
    let tok = random_tokens(&cfg, 11);
    let a = model.decode(&tok).unwrap();
    let b = model.clone().decode(&tok).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames.len(), cfg.timesteps);
    assert!(a.frames.iter().all(|f| f.len() == cfg.gaussians));
    a.validate().unwrap();
}

#[test]
fn tokenize_matches_exhaustive_quantization() {
    let cfg = tiny();
    let model = Vq4dModel::new(&cfg).unwrap();
    let s = sample(&cfg, 12);
    let tok = model.tokenize(&s.matrix).unwrap();
    let z = model.encode(&s.matrix).unwrap();
    let book = model.codebook();
    let dc = cfg.chunk_dim();
    for (i, &k) in tok.data.iter().enumerate() {
        let (row, c) = (i / cfg.chunks, i % cfg.chunks);
        let x = &z.data[row * cfg.latent_dim + c * dc..row * cfg.latent_dim + (c + 1) * dc];
        let d = |j: usize| -> f64 { x.iter().zip(book.entry(c, j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum() };
        assert!((0..cfg.codebook_size).all(|j| d(k as usize) <= d(j)));
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let net = Vq4dNet::new(&cfg, &mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows = 6;
    let z0: Vec<f64> = (0..rows * cfg.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..rows * cfg.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = Graph::train(&store);
    let z = g.variable(Tensor::new(&[rows, cfg.latent_dim], z0));
    let (st, _, _) = net.quantize(&g, z);
    let loss = (st * g.constant(Tensor::new(&[rows, cfg.latent_dim], probe.clone()))).sum_all();
    let grads = g.backward(loss);
    assert_eq!(grads.wrt(z).unwrap().data(), &probe[..]);
    // the codebook receives no gradient from the decoder path
    assert!(net.codebooks.iter().all(|&id| grads.param(id).is_none()));
}

#[test]
fn commitment_gradient_moves_codebook() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let net = Vq4dNet::new(&cfg, &mut store);
    let g = Graph::train(&store);
    let z = g.variable(Tensor::full(&[3, cfg.latent_dim], 0.25));
    let (_, commit, _) = net.quantize(&g, z);
    let grads = g.backward(commit);
    assert!(grads.wrt(z).unwrap().data().iter().any(|&v| v != 0.0));
    assert!(net.codebooks.iter().any(|&id| grads.param(id).is_some()));
}

/// Pixel MSE against a fixed target as a function of all Gaussian parameters.
fn recon_loss(params: &[f64], target: &SpatioTemporalMatrix) -> f64 {
    let g = Graph::<f64>::detached(false);
    recon_graph(&g, g.constant(Tensor::new(&[1, 5, PARAM_DIM], params.to_vec())), target).item()
}

fn recon_graph<'g>(g: &'g Graph<f64>, p: crate::autograd::Var<'g, f64>, target: &SpatioTemporalMatrix) -> crate::autograd::Var<'g, f64> {
    let v = GaussianVars::from_params(p);
    let frames: Vec<_> = target.cameras.iter().map(|c| c.frame().unwrap()).collect();
    let out = render_gaussians(
        g,
        v.position,
        v.scale,
        v.rotation,
        v.opacity,
        v.color,
        &frames,
        (8, 8),
        [1.0; 3],
        false,
        crate::par::Execution::Sequential,
    );
    let truth = g.constant(Tensor::new(&[1, 1, 8, 8, 3], target.pixels.clone()));
    let w = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
    vae_loss(out.images, truth, None, None, None, g.scalar(0.0), w).unwrap().recon
}

#[test]
fn recon_loss_position_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cams = make_orbit_cameras(1, 2.0, 0.2, [0.0; 3], 0.8, (8, 8)).unwrap();
    let mut params = Vec::new();
    for _ in 0..5 {
        let g = Gaussian {
            position: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            scale: [rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: rng.random_range(0.3..0.9),
            color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        };
        params.extend(g.to_params());
    }
    let target = SpatioTemporalMatrix {
        timesteps: 1,
        height: 8,
        width: 8,
        cameras: cams,
        pixels: (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let g = Graph::<f64>::detached(true);
    let p = g.variable(Tensor::new(&[1, 5, PARAM_DIM], params.clone()));
    let grads = g.backward(recon_graph(&g, p, &target));
    let an = grads.wrt(p).unwrap().clone();
    for i in 0..5 {
        for k in 0..3 {
            let j = i * PARAM_DIM + k;
            let h = 1e-5;
            let mut pp = params.clone();
            pp[j] += h;
            let mut pm = params.clone();
            pm[j] -= h;
            let num = (recon_loss(&pp, &target) - recon_loss(&pm, &target)) / (2.0 * h);
            let a = an.data()[j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(err < 1e-2, "gaussian {i} axis {k}: analytic {a} numeric {num}");
        }
    }
}

#[test]
fn training_reduces_loss_and_seeds_codebook() {
    let cfg = tiny();
    let s = sample(&cfg, 15);
    let model = Vq4dModel::new(&cfg).unwrap();
    let train = TrainConfig {
        steps: 30,
        lr: 3e-3,
        warmup: 0,
        ..TrainConfig::default()
    };
    let mut tr = Vq4dTrainer::new(model, train).unwrap();
    let first = tr.step(&[&s]).unwrap();
    assert_eq!(first.reset_entries, cfg.chunks * cfg.codebook_size);
    let mut last = first.clone();
    for _ in 1..30 {
        last = tr.step(&[&s]).unwrap();
    }
    assert!(last.recon < 0.5 * first.recon, "{} -> {}", first.recon, last.recon);
    assert_eq!(tr.step, 30);
}

#[test]
fn trainer_rejects_wrong_dims() {
    let cfg = tiny();
    let mut other = cfg.clone();
    other.views = 3;
    let s = sample(&other, 16);
    let mut tr = Vq4dTrainer::new(Vq4dModel::new(&cfg).unwrap(), TrainConfig::default()).unwrap();
    let e = tr.step(&[&s]).unwrap_err();
    assert!(e.to_string().contains("model expects"), "{e}");
}
