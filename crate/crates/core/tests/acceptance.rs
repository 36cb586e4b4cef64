//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::io::sink;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star4d::autograd::{Graph, Init, ParamStore, Tensor};
use star4d::config::{SamplingConfig, TrainConfig};
use star4d::metrics::{evaluate, temporal_consistency};
use star4d::par::Execution;
use star4d::pipeline::{self, RunConfig, TOKENS_FILE};
use star4d::scene_synth::{
    list_collection, load_dataset, make_orbit_cameras, random_scene, render_scene, CameraFrame, CameraPose, Sample,
    SceneParams,
};
use star4d::splat_render::render_gaussians;
use star4d::st_container::{
    cluster, local_density, merge, separation_score, ClusterResult, ContainerConfig, ContainerNet,
};
use star4d::star::{camera_rays, chunked_ce, hash_words, StarConfig, StarDims, StarExample, StarModel};
use star4d::vq4d::{TokenGrid, Vq4dModel, Vq4dTrainer, VqConfig};

// Criterion 1
const ORACLE_INSTANCES: usize = 200;
const ORACLE_MAX_N: usize = 128;
const ORACLE_MAX_D: usize = 64;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(30);
// Criterion 2
const BLOB_SEEDS: u64 = 50;
const BLOB_SEPARATION: f64 = 10.0;
// Criterion 3
const CE_TOL: f64 = 1e-6;
// Criterion 4
const CAUSAL_PERTURBATIONS: usize = 20;
// Criterion 5
const GRAD_REL_TOL: f64 = 1e-2;
const MAX_SPLATS: usize = 5;
const MAX_MERGE_TOKENS: usize = 4;
// Criterion 7
const VQ_STEPS: u64 = 2000;
const VQ_MIN_PSNR: f64 = 28.0;
const VQ_MIN_TC: f64 = 0.95;
const VQ_TIME_LIMIT: Duration = Duration::from_secs(20 * 60);
// Criterion 8
const STAR_OBJECTS: usize = 16;
const STAR_STEPS: u64 = 500;
const STAR_MAX_CE_RATIO: f64 = 0.5;
const STAR_MIN_REPRODUCTION: f64 = 0.6;
/// VQ-VAE budget for the 16-object set the decoder is trained on.
const STAR_VQ_STEPS: u64 = 400;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s
}

/// Brute force over the full distance matrix.
fn oracle(x: &[f64], dim: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / dim;
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sq(row(i), row(j))).collect()).collect();
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            let mut s = 0.0;
            for v in &others[..k] {
                s += v;
            }
            (-(s / k as f64)).exp()
        })
        .collect();
    let varpi = (0..n)
        .map(|i| {
            let denser: Vec<f64> = (0..n).filter(|&j| j != i && rho[j] > rho[i]).map(|j| dist[i][j]).collect();
            if denser.is_empty() {
                (0..n).filter(|&j| j != i).map(|j| dist[i][j]).fold(0.0, f64::max)
            } else {
                denser.into_iter().fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    (rho, varpi)
}

fn c1_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut ties = 0;
    for inst in 0..ORACLE_INSTANCES {
        let n = rng.random_range(2..=ORACLE_MAX_N);
        let d = rng.random_range(1..=ORACLE_MAX_D);
        let k = rng.random_range(1..n.min(16).max(2));
        // every tenth instance has duplicated points to exercise ties
        let x: Vec<f64> = if inst % 10 == 0 {
            let base: Vec<f64> = (0..(n / 2).max(1) * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..n * d).map(|i| base[i % base.len()]).collect()
        } else {
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let rho = local_density(&x, d, k).map_err(|e| e.to_string())?;
        let varpi = separation_score(&x, d, &rho).map_err(|e| e.to_string())?;
        let (orho, ovarpi) = oracle(&x, d, k);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        ensure(bits(&rho) == bits(&orho), || format!("instance {inst}: density differs"))?;
        ensure(bits(&varpi) == bits(&ovarpi), || format!("instance {inst}: separation differs"))?;
        ties += usize::from(inst % 10 == 0);
    }
    let t = start.elapsed();
    ensure(t < ORACLE_TIME_LIMIT, || format!("took {t:?}"))?;
    Ok(format!("{ORACLE_INSTANCES} instances bit-exact ({ties} with duplicates) in {:.2}s", t.as_secs_f64()))
}

fn c2_blobs() -> Check {
    let dim = 8;
    let cfg = ContainerConfig {
        centers: 2,
        neighbors: 4,
        ..Default::default()
    };
    let mut errors = 0;
    for seed in 0..BLOB_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [rng.random_range(8..32), rng.random_range(8..32)];
        let offsets: Vec<Vec<f64>> = (0..sizes[0] + sizes[1])
            .map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let spread = offsets.iter().map(|o| sq(o, &vec![0.0; dim]).sqrt()).fold(0.0, f64::max);
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = sq(&dir, &vec![0.0; dim]).sqrt();
        // centers 10× the blob diameter apart
        let center_b: Vec<f64> = dir.iter().map(|v| v / norm * BLOB_SEPARATION * 2.0 * spread).collect();
        let center_b = &center_b;
        let labels: Vec<usize> = (0..sizes[0] + sizes[1]).map(|i| usize::from(i >= sizes[0])).collect();
        let x: Vec<f64> = offsets
            .iter()
            .zip(&labels)
            .flat_map(|(o, &l)| o.iter().enumerate().map(move |(k, v)| v + if l == 1 { center_b[k] } else { 0.0 }))
            .collect();
        let c = cluster(&x, dim, &vec![0; labels.len()], &cfg).map_err(|e| e.to_string())?;
        if labels[c.centers[0]] == labels[c.centers[1]] {
            errors += labels.len();
            continue;
        }
        errors += (0..labels.len()).filter(|&i| labels[c.centers[c.assignment[i]]] != labels[i]).count();
    }
    ensure(errors == 0, || format!("{errors} misassigned tokens"))?;
    Ok(format!("{BLOB_SEEDS} seeds, 0 errors"))
}

fn c3_chunked_ce() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..64);
        let k = rng.random_range(2..600);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let (g1, _) = chunked_ce(&logits, k, &targets, n).map_err(|e| e.to_string())?;
        let plain = (0..n)
            .map(|i| {
                let row = &logits[i * k..(i + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                m + z.ln() - row[targets[i] as usize]
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((g1 - plain).abs());
    }
    ensure(worst <= CE_TOL, || format!("G=1 differs from plain CE by {worst:e}"))?;
    let mut worst_u = 0.0f64;
    for (t, p, k) in [(4, 64, 512), (1, 7, 2), (3, 10, 33), (6, 1, 1000)] {
        let targets: Vec<u32> = (0..t * p).map(|i| (i % k) as u32).collect();
        let (total, _) = chunked_ce(&vec![0.0; t * p * k], k, &targets, p).map_err(|e| e.to_string())?;
        worst_u = worst_u.max((total - t as f64 * (k as f64).ln()).abs());
    }
    ensure(worst_u <= CE_TOL, || format!("uniform logits off by {worst_u:e}"))?;
    Ok(format!("G=1 max |Δ| {worst:.1e}, uniform max |Δ| {worst_u:.1e} (tol {CE_TOL:e})"))
}

fn tiny_star(mode: &str) -> StarModel {
    let cfg = StarConfig {
        dim: 32,
        layers: 2,
        heads: 2,
        ffn_hidden: 32,
        text_buckets: 32,
        text_dim: 8,
        time_dim: 8,
        container: mode.into(),
        ..Default::default()
    };
    let ccfg = ContainerConfig {
        centers: 4,
        neighbors: 3,
        heads: 2,
        score_hidden: 8,
        ..Default::default()
    };
    let dims = StarDims {
        timesteps: 4,
        views: 2,
        latent_h: 2,
        latent_w: 2,
        chunks: 2,
        vocab: 16,
    };
    StarModel::new(&cfg, &ccfg, &dims).unwrap()
}

fn tiny_example(m: &StarModel, seed: u64) -> StarExample {
    let d = m.dims().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = make_orbit_cameras(d.views, 2.5, 0.3, [0.0; 3], 0.8, (16, 16)).unwrap();
    StarExample {
        words: hash_words("a green blob drifting left", 32),
        video: (0..d.video_len()).map(|_| rng.random_range(0..d.vocab as u32)).collect(),
        rays: camera_rays(&cams, d.latent_h, d.latent_w).unwrap(),
        tokens: (0..d.timesteps * d.group_len()).map(|_| rng.random_range(0..d.vocab as u32)).collect(),
    }
}

fn c4_causality() -> Check {
    let mut audits = 0;
    for mode in ["prefix", "additive", "none"] {
        let m = tiny_star(mode);
        let ex = tiny_example(&m, 40);
        let (k, p) = (m.dims().vocab, m.dims().group_len());
        let base = m.logits(&ex).map_err(|e| e.to_string())?;
        let g = Graph::inference(&m.store);
        let base_out = m.net.forward(&g, &ex.input()).map_err(|e| e.to_string())?;
        for (i, tags) in base_out.pool_tags.iter().enumerate() {
            ensure(tags.iter().all(|t| t.group <= i), || format!("{mode}: pool for group {} holds a later group", i + 1))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..CAUSAL_PERTURBATIONS {
            let pos = rng.random_range(0..ex.tokens.len());
            let mut q = ex.clone();
            q.tokens[pos] = (q.tokens[pos] + rng.random_range(1..k as u32)) % k as u32;
            let out = m.logits(&q).map_err(|e| e.to_string())?;
            ensure(out[..(pos + 1) * k] == base[..(pos + 1) * k], || format!("{mode}: perturbing {pos} moved an earlier logit"))?;
            // container state conditioning group t is computed from groups < t only
            let qo = m.net.forward(&g, &q.input()).map_err(|e| e.to_string())?;
            let changed_group = pos / p;
            for (i, (a, b)) in base_out.clusters.iter().zip(&qo.clusters).enumerate() {
                let t = i + 1;
                if changed_group >= t {
                    ensure(a == b, || format!("{mode}: container for group {t} saw a change in group {changed_group}"))?;
                    audits += 1;
                }
            }
        }
    }
    Ok(format!("3 modes × {CAUSAL_PERTURBATIONS} perturbations exact; {audits} container states audited"))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

struct SplatSet {
    t: usize,
    n: usize,
    params: [Vec<f64>; 5],
}

const WIDTHS: [usize; 5] = [3, 3, 4, 1, 3];

fn render_loss(s: &SplatSet, cams: &[CameraFrame], probe: &[f64], flow_probe: &[f64], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let g = Graph::<f64>::detached(grads);
    let vars: Vec<_> = s
        .params
        .iter()
        .zip(WIDTHS)
        .map(|(p, w)| {
            let t = Tensor::new(&[s.t, s.n, w], p.clone());
            if grads {
                g.variable(t)
            } else {
                g.constant(t)
            }
        })
        .collect();
    let out = render_gaussians(&g, vars[0], vars[1], vars[2], vars[3], vars[4], cams, (8, 8), [1.0; 3], s.t > 1, Execution::Sequential);
    let mut loss = (out.images * g.constant(Tensor::new(&out.images.shape(), probe.to_vec()))).sum_all();
    if let Some(f) = out.flow {
        loss = loss + (f * g.constant(Tensor::new(&f.shape(), flow_probe.to_vec()))).sum_all();
    }
    let value = loss.item();
    if !grads {
        return (value, Vec::new());
    }
    let gr = g.backward(loss);
    (value, vars.iter().map(|v| gr.wrt(*v).unwrap().data().to_vec()).collect())
}

fn check_renderer(seed: u64, t: usize, n: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = CameraPose {
        position: [0.0, 0.3, 2.5],
        target: [0.0; 3],
        up: [0.0, 1.0, 0.0],
        fov_y: 0.8,
        height: 8,
        width: 8,
    };
    let cams: Vec<CameraFrame> = [base.clone(), CameraPose { position: [2.5, 0.5, 0.3], ..base }]
        .iter()
        .map(|c| c.frame().unwrap())
        .collect();
    let mut u = |lo: f64, hi: f64, k: usize| (0..t * n * k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let s = SplatSet {
        t,
        n,
        params: [u(-0.4, 0.4, 3), u(0.1, 0.3, 3), u(-1.0, 1.0, 4), u(0.3, 0.9, 1), u(0.0, 1.0, 3)],
    };
    let probe: Vec<f64> = (0..t * 2 * 64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flow_probe: Vec<f64> = (0..t.saturating_sub(1) * 2 * 64 * 2).map(|_| rng.random_range(-0.05..0.05)).collect();
    let (_, analytic) = render_loss(&s, &cams, &probe, &flow_probe, true);
    let eps = 1e-6;
    let mut checked = 0;
    for (which, a) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let bump = |d: f64| {
                let mut s2 = SplatSet { t, n, params: s.params.clone() };
                s2.params[which][i] += d;
                render_loss(&s2, &cams, &probe, &flow_probe, false).0
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            if a[i].abs().max(num.abs()) < 1e-7 {
                continue;
            }
            ensure(rel(a[i], num) < GRAD_REL_TOL, || format!("renderer param {which}[{i}]: {} vs {num}", a[i]))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn check_merge(seed: u64) -> Result<usize, String> {
    let (n, dim) = (MAX_MERGE_TOKENS, 4);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ContainerConfig {
        heads: 2,
        score_hidden: 8,
        ..Default::default()
    };
    let net = ContainerNet::new(&mut Init::new(&mut store, &mut rng), "c", dim, dim, &cfg);
    let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = ClusterResult {
        centers: vec![0, 2],
        assignment: vec![0, 1, 1, 0],
        rho: vec![],
        varpi: vec![],
        sigma: vec![],
    };
    let loss = |store: &ParamStore<f64>, x: &[f64], grads: bool| {
        let g = Graph::train(store);
        let y = g.variable(Tensor::new(&[n, dim], x.to_vec()));
        let m = merge(&g, y, &c, net.dissim_scores(&g, y));
        let l = (m * g.constant(Tensor::new(&[2, dim], probe.clone()))).sum_all();
        let v = l.item();
        if !grads {
            return (v, Vec::new(), Vec::new());
        }
        let gr = g.backward(l);
        let params: Vec<Vec<f64>> = store.ids().map(|id| gr.param(id).map_or_else(Vec::new, |t| t.data().to_vec())).collect();
        (v, gr.wrt(y).unwrap().data().to_vec(), params)
    };
    let (_, gx, gp) = loss(&store, &x, true);
    let eps = 1e-5;
    let mut checked = 0;
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += eps;
        m[i] -= eps;
        let fd = (loss(&store, &p, false).0 - loss(&store, &m, false).0) / (2.0 * eps);
        ensure(rel(fd, gx[i]) < GRAD_REL_TOL, || format!("merge feature {i}: {fd} vs {}", gx[i]))?;
        checked += 1;
    }
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for e in 0..gp[pi].len() {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + eps;
            let lp = loss(&store, &x, false).0;
            store.get_mut(id).data_mut()[e] = orig - eps;
            let lm = loss(&store, &x, false).0;
            store.get_mut(id).data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            if fd.abs().max(gp[pi][e].abs()) < 1e-7 {
                continue;
            }
            ensure(rel(fd, gp[pi][e]) < GRAD_REL_TOL, || format!("merge param {} [{e}]: {fd} vs {}", store.name(id), gp[pi][e]))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn c5_gradients() -> Check {
    let mut r = 0;
    for (seed, t, n) in [(3, 1, MAX_SPLATS), (4, 2, 2), (5, 1, 3)] {
        r += check_renderer(seed, t, n)?;
    }
    let mut m = 0;
    for seed in 0..3 {
        m += check_merge(seed)?;
    }
    Ok(format!("{r} renderer and {m} merge partials within rel {GRAD_REL_TOL:e}"))
}

fn c6_stop_identity() -> Check {
    let cfg = VqConfig::default();
    let model = Vq4dModel::new(&cfg).map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.timesteps * cfg.views * cfg.positions() * cfg.chunks;
        let tok = TokenGrid {
            timesteps: cfg.timesteps,
            views: cfg.views,
            h: cfg.latent_h(),
            w: cfg.latent_w(),
            chunks: cfg.chunks,
            vocab: cfg.codebook_size,
            data: (0..n).map(|_| rng.random_range(0..cfg.codebook_size as u32)).collect(),
        };
        let (coarse, corrected) = model.decode_both(&tok).map_err(|e| e.to_string())?;
        let bits = |g: &star4d::vq4d::DynamicGaussians| g.to_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&coarse) == bits(&corrected), || format!("seed {seed}: corrected differs from static"))?;
        let g = Graph::inference(&model.store);
        let d = model.net.decode(&g, model.net.lookup(&g, &tok.data));
        let (a, b) = (d.coarse.params().value(), d.corrected.params().value());
        ensure(a.data() == b.data(), || format!("seed {seed}: graph path differs"))?;
    }
    Ok("3 token grids, plain and graph paths bit-equal".into())
}

fn c7_vq_overfit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (spec, caption) = random_scene(&mut rng, 4, &SceneParams::default());
    let cams = make_orbit_cameras(4, 2.5, 0.3, [0.0; 3], 0.8, (32, 32)).map_err(|e| e.to_string())?;
    let (matrix, flow) = render_scene(&spec, &cams, 4).map_err(|e| e.to_string())?;
    let sample = Sample { matrix, flow, caption };
    let train = TrainConfig {
        steps: VQ_STEPS,
        ..Default::default()
    };
    let start = Instant::now();
    let mut tr = Vq4dTrainer::new(Vq4dModel::new(&VqConfig::default()).unwrap(), train).map_err(|e| e.to_string())?;
    for _ in 0..VQ_STEPS {
        tr.step(&[&sample]).map_err(|e| e.to_string())?;
    }
    let rec = tr.model.reconstruct(&sample.matrix).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let m = evaluate(&rec, &sample.matrix, &sample.flow).map_err(|e| e.to_string())?;
    let truth_tc = temporal_consistency(&sample.matrix, &sample.flow).map_err(|e| e.to_string())?;
    let detail = format!(
        "PSNR {:.2} dB (≥ {VQ_MIN_PSNR}), TC {:.4} (≥ {VQ_MIN_TC}; ground truth {truth_tc:.4}), {:.0}s (≤ {}s)",
        m.psnr,
        m.temporal_consistency,
        elapsed.as_secs_f64(),
        VQ_TIME_LIMIT.as_secs()
    );
    ensure(m.psnr >= VQ_MIN_PSNR && m.temporal_consistency >= VQ_MIN_TC && elapsed <= VQ_TIME_LIMIT, || detail.clone())?;
    Ok(detail)
}

/// Shared state of the 16-object runs behind criteria 8–10.
struct SetRun {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    data: std::path::PathBuf,
    vq: std::path::PathBuf,
    star_prefix: std::path::PathBuf,
    star_none: std::path::PathBuf,
    initial_ce: f64,
    final_ce: f64,
    generated_prefix: std::path::PathBuf,
    generated_none: std::path::PathBuf,
}

fn mean_ce(model: &StarModel, exs: &[StarExample]) -> f64 {
    exs.iter().map(|e| model.loss(e).unwrap().0).sum::<f64>() / exs.len() as f64
}

fn set_run() -> Result<SetRun, String> {
    let e = |x: star4d::Error| x.to_string();
    let dir = tempfile::TempDir::new().map_err(|x| x.to_string())?;
    let cfg = RunConfig::load(
        None,
        &[
            format!("scene.objects={STAR_OBJECTS}"),
            format!("train_vq.steps={STAR_VQ_STEPS}"),
            format!("train_star.steps={STAR_STEPS}"),
            "sampling.temperature=0".into(),
        ],
        Some(0),
    )
    .map_err(e)?;
    let data = dir.path().join("data");
    pipeline::cmd_synth(&cfg, &data).map_err(e)?;
    let vq = dir.path().join("vq.ckpt");
    pipeline::cmd_train_vqvae(&cfg, &data, &vq, None, &mut sink()).map_err(e)?;
    let vq_model = pipeline::load_vq(&vq).map_err(e)?;
    let samples: Vec<Sample> = list_collection(&data).map_err(e)?.iter().map(|d| load_dataset(d).unwrap()).collect();
    let exs = pipeline::star_examples(&vq_model, &cfg.star, &samples).map_err(e)?;
    let dims = StarDims::from_vq(vq_model.config());
    let initial_ce = mean_ce(&StarModel::new(&cfg.star, &cfg.container, &dims).map_err(e)?, &exs);

    let star_prefix = dir.path().join("star_prefix.ckpt");
    pipeline::cmd_train_star(&cfg, &data, &vq, &star_prefix, None, &mut sink()).map_err(e)?;
    let final_ce = mean_ce(&pipeline::load_star(&star_prefix).map_err(e)?, &exs);
    let generated_prefix = dir.path().join("gen_prefix");
    pipeline::cmd_generate(&cfg, &star_prefix, &vq, &data, None, &generated_prefix).map_err(e)?;

    let none_cfg = RunConfig {
        star: StarConfig {
            container: "none".into(),
            ..cfg.star.clone()
        },
        ..cfg.clone()
    };
    let star_none = dir.path().join("star_none.ckpt");
    pipeline::cmd_train_star(&none_cfg, &data, &vq, &star_none, None, &mut sink()).map_err(e)?;
    let generated_none = dir.path().join("gen_none");
    pipeline::cmd_generate(&none_cfg, &star_none, &vq, &data, None, &generated_none).map_err(e)?;
    Ok(SetRun {
        _dir: dir,
        cfg,
        data,
        vq,
        star_prefix,
        star_none,
        initial_ce,
        final_ce,
        generated_prefix,
        generated_none,
    })
}

fn c8_star_overfit(r: &SetRun) -> Check {
    let vq = pipeline::load_vq(&r.vq).map_err(|e| e.to_string())?;
    let truth = list_collection(&r.data).map_err(|e| e.to_string())?;
    let generated = list_collection(&r.generated_prefix).map_err(|e| e.to_string())?;
    let mut fractions = Vec::new();
    for (t, g) in truth.iter().zip(&generated) {
        let s = load_dataset(t).map_err(|e| e.to_string())?;
        let want = vq.tokenize(&s.matrix).map_err(|e| e.to_string())?;
        let got = TokenGrid::load(&g.join(TOKENS_FILE)).map_err(|e| e.to_string())?;
        let same = want.data.iter().zip(&got.data).filter(|(a, b)| a == b).count();
        fractions.push(same as f64 / want.data.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let worst = fractions.iter().copied().fold(1.0, f64::min);
    let ratio = r.final_ce / r.initial_ce;
    let detail = format!(
        "CE {:.3} -> {:.3} (ratio {ratio:.3} ≤ {STAR_MAX_CE_RATIO}); greedy reproduction mean {mean:.3}, worst {worst:.3} (≥ {STAR_MIN_REPRODUCTION})",
        r.initial_ce, r.final_ce
    );
    ensure(ratio <= STAR_MAX_CE_RATIO && mean >= STAR_MIN_REPRODUCTION, || detail.clone())?;
    Ok(detail)
}

fn c9_ablation(r: &SetRun) -> Check {
    let with = pipeline::cmd_eval(&r.generated_prefix, &r.data).map_err(|e| e.to_string())?;
    let without = pipeline::cmd_eval(&r.generated_none, &r.data).map_err(|e| e.to_string())?;
    let (a, b) = (with.mean.temporal_consistency, without.mean.temporal_consistency);
    let detail = format!(
        "TC container {a:.5} vs none {b:.5} (PSNR {:.2} vs {:.2})",
        with.mean.psnr, without.mean.psnr
    );
    ensure(a >= b, || detail.clone())?;
    Ok(detail)
}

fn c10_determinism(r: &SetRun) -> Check {
    let e = |x: star4d::Error| x.to_string();
    let cfg = RunConfig {
        sampling: SamplingConfig::default(),
        ..r.cfg.clone()
    };
    let obj = r.data.join("obj0003");
    let mut files = Vec::new();
    for (star, tag) in [(&r.star_prefix, "p"), (&r.star_prefix, "p"), (&r.star_none, "n"), (&r.star_none, "n")] {
        let out = r._dir.path().join(format!("det_{tag}_{}", files.len()));
        pipeline::cmd_generate(&cfg, star, &r.vq, &obj, None, &out).map_err(e)?;
        files.push(std::fs::read(out.join(TOKENS_FILE)).map_err(|x| x.to_string())?);
    }
    ensure(files[0] == files[1] && files[2] == files[3], || "token files differ between runs".into())?;
    Ok(format!("sampled generation (T=1.0, top-k 50) twice → identical {}-byte token files, both decoders", files[0].len()))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(d) => {
            println!("PASS [{n}] {name}: {d} ({secs:.1}s)");
            true
        }
        Err(d) => {
            println!("FAIL [{n}] {name}: {d} ({secs:.1}s)");
            false
        }
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| only.is_empty() || only.contains(&n);
    let mut ok = true;
    let quick: [(usize, &str, fn() -> Check); 7] = [
        (1, "density-peaks oracle equivalence", c1_oracle),
        (2, "two-blob clustering", c2_blobs),
        (3, "chunked CE degeneracy", c3_chunked_ce),
        (4, "causality and provenance", c4_causality),
        (5, "renderer and merge gradients", c5_gradients),
        (6, "offset predictor identity", c6_stop_identity),
        (7, "VQ-VAE single-object overfit", c7_vq_overfit),
    ];
    for (n, name, f) in quick {
        if want(n) {
            ok &= report(n, name, f);
        }
    }
    if [8, 9, 10].iter().any(|&n| want(n)) {
        let start = Instant::now();
        match catch_unwind(set_run) {
            Ok(Ok(run)) => {
                println!("# 16-object runs prepared in {:.0}s", start.elapsed().as_secs_f64());
                let set: [(usize, &str, fn(&SetRun) -> Check); 3] = [
                    (8, "decoder 16-object overfit", c8_star_overfit),
                    (9, "container vs no-container temporal consistency", c9_ablation),
                    (10, "end-to-end generation determinism", c10_determinism),
                ];
                for (n, name, f) in set {
                    if want(n) {
                        ok &= report(n, name, || f(&run));
                    }
                }
            }
            failed => {
                let msg = match failed {
                    Ok(Err(m)) => m,
                    _ => "panic while preparing".into(),
                };
                for n in [8, 9, 10].into_iter().filter(|&n| want(n)) {
                    println!("FAIL [{n}] 16-object runs: {msg}");
                }
                ok = false;
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
