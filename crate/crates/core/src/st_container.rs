//! Spatial-temporal container: DPC-KNN clustering of historical group token
//! features, σ-weighted merging, attention refinement and injection as
//! conditioning vectors for the next group.

use std::collections::BTreeSet;

use crate::autograd::nn::{Attention, Mlp, RmsNorm};
use crate::autograd::{Graph, Init, ParamStore, Real, Tensor, Var};
use crate::config::config_section;
use crate::error::{invalid, Result};

config_section! {
    /// Clustering and merging settings.
    pub struct ContainerConfig ("container") {
        /// Nearest neighbours `K` in the local density.
        neighbors: usize = 8,
        /// Cluster centers `M`.
        centers: usize = 32,
        /// Density over all historical groups jointly (`true`) or within each group.
        pooled: bool = true,
        score_hidden: usize = 64,
        heads: usize = 4,
    }
}

impl ContainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(invalid!("container.neighbors must be at least 1"));
        }
        if self.centers == 0 {
            return Err(invalid!("container.centers must be at least 1"));
        }
        if self.heads == 0 || self.score_hidden == 0 {
            return Err(invalid!("container.heads and container.score_hidden must be positive"));
        }
        Ok(())
    }
}

/// Squared Euclidean distance, summed in index order.
pub fn sq_dist<E: Real>(a: &[E], b: &[E]) -> E {
    let mut s = E::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

fn check_features<E: Real>(x: &[E], dim: usize) -> Result<usize> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(invalid!("feature buffer of length {} is not a multiple of dim {dim}", x.len()));
    }
    Ok(x.len() / dim)
}

/// Mean of the `k` smallest values of `d`, summed in ascending order.
fn mean_of_smallest<E: Real>(d: &mut [E], k: usize) -> E {
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, |a, b| a.f64().total_cmp(&b.f64()));
    }
    let head = &mut d[..k];
    head.sort_unstable_by(|a, b| a.f64().total_cmp(&b.f64()));
    let mut s = E::zero();
    for v in head.iter() {
        s += *v;
    }
    s / E::of(k as f64)
}

/// `ρ_i = exp(−mean of the K smallest squared distances to other tokens)`.
pub fn local_density<E: Real>(x: &[E], dim: usize, k: usize) -> Result<Vec<E>> {
    let n = check_features(x, dim)?;
    if n < 2 {
        return Err(invalid!("local density needs at least 2 features, got {n}"));
    }
    if k == 0 || k >= n {
        return Err(invalid!("K = {k} must be in 1..{n} for {n} features"));
    }
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            let xi = &x[i * dim..(i + 1) * dim];
            row.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(xi, &x[j * dim..(j + 1) * dim])));
            (-mean_of_smallest(&mut row, k)).exp()
        })
        .collect())
}

/// Local density with neighbours restricted to tokens sharing the same group label.
pub fn local_density_grouped<E: Real>(x: &[E], dim: usize, groups: &[usize], k: usize) -> Result<Vec<E>> {
    let n = check_features(x, dim)?;
    if groups.len() != n {
        return Err(invalid!("{} group labels for {n} features", groups.len()));
    }
    let mut rho = vec![E::zero(); n];
    for label in groups.iter().copied().collect::<BTreeSet<_>>() {
        let members: Vec<usize> = (0..n).filter(|&i| groups[i] == label).collect();
        let sub: Vec<E> = members.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied()).collect();
        for (r, &i) in local_density(&sub, dim, k)?.into_iter().zip(&members) {
            rho[i] = r;
        }
    }
    Ok(rho)
}

/// `ϖ_i`: smallest squared distance to a token of strictly higher density, or the
/// largest squared distance to any token when none is denser.
pub fn separation_score<E: Real>(x: &[E], dim: usize, rho: &[E]) -> Result<Vec<E>> {
    let n = check_features(x, dim)?;
    if rho.len() != n {
        return Err(invalid!("{} densities for {n} features", rho.len()));
    }
    Ok((0..n)
        .map(|i| {
            let xi = &x[i * dim..(i + 1) * dim];
            let mut nearest_denser: Option<E> = None;
            let mut farthest = E::zero();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = sq_dist(xi, &x[j * dim..(j + 1) * dim]);
                if d > farthest {
                    farthest = d;
                }
                if rho[j] > rho[i] && nearest_denser.is_none_or(|m| d < m) {
                    nearest_denser = Some(d);
                }
            }
            nearest_denser.unwrap_or(farthest)
        })
        .collect())
}

/// Centers, hard assignment and per-token scores of one clustering pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Pool indices of the centers, by decreasing `ρ·ϖ`.
    pub centers: Vec<usize>,
    /// Cluster id (center rank) of every pool token.
    pub assignment: Vec<usize>,
    pub rho: Vec<f64>,
    pub varpi: Vec<f64>,
    /// Dissimilarity scores; empty until a merge has been run.
    pub sigma: Vec<f64>,
}

impl ClusterResult {
    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    /// Members per cluster.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.centers.len()];
        for &a in &self.assignment {
            h[a] += 1;
        }
        h
    }
}

/// Picks the `m` tokens with the largest `ρ·ϖ` (ties to the lower index) and assigns
/// every other token to its nearest center (ties to the lower rank).
pub fn select_and_assign<E: Real>(x: &[E], dim: usize, rho: &[E], varpi: &[E], m: usize) -> Result<ClusterResult> {
    let n = check_features(x, dim)?;
    if rho.len() != n || varpi.len() != n {
        return Err(invalid!("score lengths {}/{} do not match {n} features", rho.len(), varpi.len()));
    }
    if m == 0 || m > n {
        return Err(invalid!("M = {m} must be in 1..={n}"));
    }
    let score: Vec<f64> = (0..n).map(|i| (rho[i] * varpi[i]).f64()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let centers: Vec<usize> = order[..m].to_vec();
    let mut rank = vec![usize::MAX; n];
    for (r, &c) in centers.iter().enumerate() {
        rank[c] = r;
    }
    let assignment = (0..n)
        .map(|i| {
            if rank[i] != usize::MAX {
                return rank[i];
            }
            let xi = &x[i * dim..(i + 1) * dim];
            let mut best = (0, sq_dist(xi, &x[centers[0] * dim..(centers[0] + 1) * dim]));
            for (r, &c) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(xi, &x[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (r, d);
                }
            }
            best.0
        })
        .collect();
    Ok(ClusterResult {
        centers,
        assignment,
        rho: rho.iter().map(|v| v.f64()).collect(),
        varpi: varpi.iter().map(|v| v.f64()).collect(),
        sigma: Vec::new(),
    })
}

/// Full DPC-KNN pass over a pool. `K` is clamped to the available neighbours and `M`
/// to the pool size; a single-token pool forms one cluster.
pub fn cluster<E: Real>(x: &[E], dim: usize, groups: &[usize], cfg: &ContainerConfig) -> Result<ClusterResult> {
    let n = check_features(x, dim)?;
    if n == 0 {
        return Err(invalid!("cannot cluster an empty pool"));
    }
    if n == 1 {
        return select_and_assign(x, dim, &[E::one()], &[E::zero()], 1);
    }
    let rho = if cfg.pooled {
        local_density(x, dim, cfg.neighbors.min(n - 1))?
    } else {
        let smallest = groups
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|g| groups.iter().filter(|&&x| x == g).count())
            .min()
            .unwrap_or(n);
        if smallest < 2 {
            return Err(invalid!("per-group density needs at least 2 tokens per group"));
        }
        local_density_grouped(x, dim, groups, cfg.neighbors.min(smallest - 1))?
    };
    let varpi = separation_score(x, dim, &rho)?;
    select_and_assign(x, dim, &rho, &varpi, cfg.centers.min(n))
}

/// `ŷ_i = Σ_{j∈C_i} σ̄_j y_j` with `σ` normalized to sum to one within each cluster.
///
/// `y` is `(N, D)` and `sigma` `(N, 1)`; returns `(M, D)`. Gradients reach `y` and
/// `sigma`; the assignment is a constant.
pub fn merge<'g, E: Real>(g: &'g Graph<E>, y: Var<'g, E>, cluster: &ClusterResult, sigma: Var<'g, E>) -> Var<'g, E> {
    let n = cluster.assignment.len();
    let m = cluster.clusters();
    let mut onehot = vec![0.0; m * n];
    for (j, &c) in cluster.assignment.iter().enumerate() {
        onehot[c * n + j] = 1.0;
    }
    let a = g.constant(Tensor::from_f64(&[m, n], &onehot));
    let w = a * sigma.reshape(&[1, n]);
    let w = w / w.sum_axis(1, true);
    w.matmul(y)
}

/// Learned parts of the container: dissimilarity scorer, refiner and injection projection.
#[derive(Clone, Debug)]
pub struct ContainerNet {
    pub cfg: ContainerConfig,
    pub dim: usize,
    score: Mlp,
    norm: RmsNorm,
    /// Output projection zero-initialized when built with `identity_refine`.
    pub refine_attn: Attention,
    inject: Mlp,
}

impl ContainerNet {
    pub fn new<E: Real>(init: &mut Init<'_, E>, name: &str, dim: usize, out_dim: usize, cfg: &ContainerConfig) -> Self {
        Self::build(init, name, dim, out_dim, cfg, 1.0 / (dim as f64).sqrt())
    }

    /// Variant whose refiner starts as the identity map.
    pub fn identity_refine<E: Real>(
        init: &mut Init<'_, E>,
        name: &str,
        dim: usize,
        out_dim: usize,
        cfg: &ContainerConfig,
    ) -> Self {
        Self::build(init, name, dim, out_dim, cfg, 0.0)
    }

    fn build<E: Real>(
        init: &mut Init<'_, E>,
        name: &str,
        dim: usize,
        out_dim: usize,
        cfg: &ContainerConfig,
        out_std: f64,
    ) -> Self {
        init.scope(name, |init| Self {
            cfg: cfg.clone(),
            dim,
            score: Mlp::new(init, "score", dim, cfg.score_hidden, 1),
            norm: RmsNorm::new(init, "refine.norm", dim),
            refine_attn: Attention::with_out_std(init, "refine.attn", dim, cfg.heads, out_std),
            inject: Mlp::new(init, "inject", dim, dim, out_dim),
        })
    }

    /// Positive per-token weights `(N, 1)`.
    pub fn dissim_scores<'g, E: Real>(&self, g: &'g Graph<E>, y: Var<'g, E>) -> Var<'g, E> {
        self.score.forward(g, y).softplus().add_scalar(1e-6)
    }

    /// One pre-norm self-attention block with residual over `(M, D)` merged vectors.
    pub fn refine<'g, E: Real>(&self, g: &'g Graph<E>, merged: Var<'g, E>) -> Var<'g, E> {
        let s = merged.shape();
        let x = merged.reshape(&[1, s[0], s[1]]);
        let h = self.norm.forward(g, x);
        (x + self.refine_attn.forward(g, h, h, None)).reshape(&s)
    }

    /// Projects refined vectors into the transformer embedding space.
    pub fn inject<'g, E: Real>(&self, g: &'g Graph<E>, refined: Var<'g, E>) -> Var<'g, E> {
        self.inject.forward(g, refined)
    }

    /// Clusters the pool `(N, D)`, merges and refines. Returns the refined vectors and
    /// the clustering with `σ` filled in.
    pub fn summarize<'g, E: Real>(
        &self,
        g: &'g Graph<E>,
        pool: Var<'g, E>,
        groups: &[usize],
    ) -> Result<(Var<'g, E>, ClusterResult)> {
        let value = pool.value();
        let mut c = cluster(value.data(), self.dim, groups, &self.cfg)?;
        let sigma = self.dissim_scores(g, pool);
        c.sigma = sigma.value().to_f64_vec();
        let merged = merge(g, pool, &c, sigma);
        Ok((self.refine(g, merged), c))
    }
}

/// Origin of a pool token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Provenance {
    /// Zero-based group (timestep) index.
    pub group: usize,
    pub view: usize,
    /// Token index within the view.
    pub position: usize,
}

/// Container state owned by one generation session.
#[derive(Clone, Debug)]
pub struct STContainerState {
    pub dim: usize,
    /// Pool features, `tags.len() × dim`.
    pub pool: Vec<f32>,
    pub tags: Vec<Provenance>,
    /// Refined merged vectors, `min(M, pool size) × dim`; empty before the first update.
    pub merged: Vec<f32>,
    pub last: Option<ClusterResult>,
}

impl STContainerState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            pool: Vec::new(),
            tags: Vec::new(),
            merged: Vec::new(),
            last: None,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.tags.len()
    }

    pub fn merged_len(&self) -> usize {
        self.merged.len() / self.dim
    }

    /// Distinct group indices in the pool.
    pub fn groups(&self) -> BTreeSet<usize> {
        self.tags.iter().map(|t| t.group).collect()
    }

    /// Appends a completed group and recomputes the merged state over the whole pool.
    pub fn update(
        &mut self,
        net: &ContainerNet,
        store: &ParamStore<f32>,
        features: &[f32],
        tags: &[Provenance],
    ) -> Result<()> {
        if features.len() != tags.len() * self.dim || net.dim != self.dim {
            return Err(invalid!(
                "{} features of dim {} for {} tags (container dim {})",
                features.len(),
                self.dim,
                tags.len(),
                net.dim
            ));
        }
        if let (Some(last), Some(first)) = (self.tags.iter().map(|t| t.group).max(), tags.iter().map(|t| t.group).min()) {
            if first <= last {
                return Err(invalid!("group {first} arrives after group {last} is already pooled"));
            }
        }
        self.pool.extend_from_slice(features);
        self.tags.extend_from_slice(tags);
        let g = Graph::inference(store);
        let pool = g.constant(Tensor::new(&[self.pool_len(), self.dim], self.pool.clone()));
        let groups: Vec<usize> = self.tags.iter().map(|t| t.group).collect();
        let (refined, c) = net.summarize(&g, pool, &groups)?;
        self.merged = refined.value().data().to_vec();
        self.last = Some(c);
        Ok(())
    }

    /// Conditioning vectors `merged × out_dim`; empty while nothing is pooled.
    pub fn inject(&self, net: &ContainerNet, store: &ParamStore<f32>) -> Vec<f32> {
        if self.merged.is_empty() {
            return Vec::new();
        }
        let g = Graph::inference(store);
        let m = g.constant(Tensor::new(&[self.merged_len(), self.dim], self.merged.clone()));
        net.inject(&g, m).value().data().to_vec()
    }
}
