//! Supervised source-model fitting with a linear feature-extractor surrogate,
//! plus pose metrics and the robust-vertex-ratio diagnostic.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, rasterize, Camera, CuboidMesh, Pose, RasterMap};
use crate::inference::{estimate_with_scorer, InferenceOptions, MultiPoseEstimate, PoseBank, SceneScorer};
use crate::meshmodel::{ClutterModel, FeatureMap, NeuralMesh};
use crate::seed::{derived_rng, Rng};
use crate::synth::Scene;
use crate::vmf::{self, dot, estimate_kappa, kappa_from_resultant, log_norm_const, normalize, sample_uniform_sphere, KAPPA_MAX};

const TAG_TRAIN_ORDER: u64 = 20;
const TAG_KMEANS: u64 = 21;
const TAG_INIT: u64 = 22;

/// `f = W x / |W x|`, the learnable stand-in for a CNN backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    dim: usize,
    w: Vec<f64>,
}

impl FeatureExtractor {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        (0..dim).for_each(|k| w[k * dim + k] = 1.0);
        Self { dim, w }
    }

    /// Row-major `d x d` matrix.
    pub fn new(dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != dim * dim || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("extractor needs {} finite entries", dim * dim)));
        }
        Ok(Self { dim, w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim)
    }

    /// Returns `(W x / |W x|, |W x|)`. A vanishing `W x` leaves `x` unchanged.
    pub fn apply(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut y: Vec<f64> = (0..d).map(|k| dot(&self.w[k * d..(k + 1) * d], x)).collect();
        let n = normalize(&mut y);
        if n < 1e-12 {
            return (vmf::normalized(x), 0.0);
        }
        (y, n)
    }

    pub fn extract(&self, raw: &FeatureMap) -> FeatureMap {
        if self.is_identity() {
            return raw.clone();
        }
        let mut out = FeatureMap::zeros(raw.height(), raw.width(), raw.dim());
        for i in 0..raw.pixel_count() {
            let (f, _) = self.apply(&raw.pixel_f64(i));
            out.set_pixel(i, &f);
        }
        out
    }

    pub fn step(&self, grad: &[f64], lr: f64) -> Self {
        Self {
            dim: self.dim,
            w: self.w.iter().zip(grad).map(|(w, g)| w - lr * g).collect(),
        }
    }
}

/// Accumulates `dL/dW` from per-feature gradients `dL/df`.
pub(crate) struct WGrad {
    dim: usize,
    pub(crate) g: Vec<f64>,
}

impl WGrad {
    pub(crate) fn new(dim: usize) -> Self {
        Self { dim, g: vec![0.0; dim * dim] }
    }

    /// Chain rule through `f = y / |y|`, `y = W x`.
    pub(crate) fn add(&mut self, x: &[f64], f: &[f64], norm_y: f64, df: &[f64], weight: f64) {
        if norm_y < 1e-12 {
            return;
        }
        let proj = dot(df, f);
        let d = self.dim;
        for k in 0..d {
            let v = weight * (df[k] - proj * f[k]) / norm_y;
            if v != 0.0 {
                let row = &mut self.g[k * d..(k + 1) * d];
                row.iter_mut().zip(x).for_each(|(g, xj)| *g += v * xj);
            }
        }
    }

    pub(crate) fn merge(mut self, other: WGrad) -> Self {
        self.g.iter_mut().zip(other.g).for_each(|(a, b)| *a += b);
        self
    }
}

/// A complete pose-estimation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mesh: NeuralMesh,
    pub clutter: ClutterModel,
    pub extractor: FeatureExtractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Vertex-vertex contrastive weight.
    pub lambda: f64,
    /// Vertex-clutter contrastive weight.
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `Some(k)` fixes every kappa (vertices and clutter) to `k`.
    pub fixed_kappa: Option<f64>,
    pub n_clutter: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            mu: 0.1,
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            fixed_kappa: Some(20.0),
            n_clutter: 5,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config("lambda and mu must be non-negative".into()));
        }
        if self.batch_size == 0 || self.n_clutter == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("batch_size, n_clutter and kmeans_restarts must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if let Some(k) = self.fixed_kappa {
            if !(k > 0.0 && k <= KAPPA_MAX) {
                return Err(Error::Config(format!("fixed_kappa must be in (0, {KAPPA_MAX}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub neural: f64,
    pub clutter: f64,
    pub contrastive: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.neural + self.clutter + self.contrastive
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub accepted_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    /// Vertices never rendered in the dataset; their features are left at
    /// their random initialization.
    pub never_observed: Vec<usize>,
    pub curve: Vec<EpochRecord>,
}

/// Fixed parameters of the source objective for one W evaluation.
struct Objective<'a> {
    mesh: &'a NeuralMesh,
    clutter: &'a ClutterModel,
    lambda: f64,
    mu: f64,
    /// `mean_{l not in N_r, l != r} kappa_l C_l` per vertex.
    neg_mean: Vec<Vec<f64>>,
    beta_mean: Vec<f64>,
    log_z: Vec<f64>,
    log_z_bg: f64,
}

impl<'a> Objective<'a> {
    fn new(mesh: &'a NeuralMesh, clutter: &'a ClutterModel, lambda: f64, mu: f64) -> Self {
        let geo = mesh.geometry();
        let d = mesh.dim();
        let neg_mean = (0..mesh.vertex_count())
            .map(|r| {
                let mut acc = vec![0.0; d];
                let mut n = 0.0;
                for l in (0..mesh.vertex_count()).filter(|&l| l != r && !geo.is_neighbor(r, l)) {
                    acc.iter_mut().zip(mesh.feature(l)).for_each(|(a, c)| *a += mesh.kappa(l) * c);
                    n += 1.0;
                }
                if n > 0.0 {
                    acc.iter_mut().for_each(|a| *a /= n);
                }
                acc
            })
            .collect();
        let mut beta_mean = vec![0.0; d];
        for b in clutter.betas() {
            beta_mean.iter_mut().zip(b).for_each(|(a, x)| *a += clutter.kappa_prime() * x / clutter.betas().len() as f64);
        }
        Self {
            mesh,
            clutter,
            lambda,
            mu,
            neg_mean,
            beta_mean,
            log_z: mesh.log_norm_consts(),
            log_z_bg: log_norm_const(clutter.kappa_prime(), mesh.dim()),
        }
    }

    /// Per-pixel contribution and its gradient in `f`. Foreground pixels are
    /// weighted by `1 / n_fg`, background by `1 / n_bg`.
    fn pixel(&self, f: &[f64], vertex: Option<usize>, parts: &mut LossParts, grad: Option<&mut Vec<f64>>, w_fg: f64, w_bg: f64) {
        match vertex {
            Some(r) => {
                let c = self.mesh.feature(r);
                let k = self.mesh.kappa(r);
                parts.neural -= w_fg * (self.log_z[r] + k * dot(f, c));
                let neg = &self.neg_mean[r];
                parts.contrastive += w_fg * (self.lambda * dot(f, neg) + self.mu * dot(f, &self.beta_mean));
                if let Some(g) = grad {
                    for j in 0..f.len() {
                        g[j] = w_fg * (-k * c[j] + self.lambda * neg[j] + self.mu * self.beta_mean[j]);
                    }
                }
            }
            None => {
                let (best, n) = self
                    .clutter
                    .betas()
                    .iter()
                    .enumerate()
                    .map(|(n, b)| (dot(f, b), n))
                    .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
                let kp = self.clutter.kappa_prime();
                parts.clutter -= w_bg * (self.log_z_bg + kp * best);
                if let Some(g) = grad {
                    let b = &self.clutter.betas()[n];
                    for j in 0..f.len() {
                        g[j] = -w_bg * kp * b[j];
                    }
                }
            }
        }
    }
}

struct Prepared<'a> {
    scene: &'a Scene,
    raster: RasterMap,
}

fn counts(data: &[Prepared]) -> (f64, f64) {
    let fg: usize = data.iter().map(|p| p.raster.foreground_count()).sum();
    let all: usize = data.iter().map(|p| p.raster.pixel_count()).sum();
    (fg.max(1) as f64, (all - fg).max(1) as f64)
}

/// Source loss over `data` under extractor `ext`, optionally with `dL/dW`.
fn source_loss(data: &[Prepared], ext: &FeatureExtractor, obj: &Objective, want_grad: bool) -> (LossParts, Option<Vec<f64>>) {
    let (n_fg, n_bg) = counts(data);
    let (w_fg, w_bg) = (1.0 / n_fg, 1.0 / n_bg);
    let d = ext.dim();
    let zero = || (LossParts { neural: 0.0, clutter: 0.0, contrastive: 0.0 }, WGrad::new(d));
    let (parts, grad) = data
        .par_iter()
        .map(|p| {
            let (mut parts, mut wg) = zero();
            let mut g = vec![0.0; d];
            for i in 0..p.raster.pixel_count() {
                let x = p.scene.features.pixel_f64(i);
                let (f, ny) = ext.apply(&x);
                let v = p.raster.vertex_at(i);
                if want_grad {
                    obj.pixel(&f, v, &mut parts, Some(&mut g), w_fg, w_bg);
                    wg.add(&x, &f, ny, &g, 1.0);
                } else {
                    obj.pixel(&f, v, &mut parts, None, w_fg, w_bg);
                }
            }
            (parts, wg)
        })
        .reduce(zero, |(a, ga), (b, gb)| {
            (
                LossParts {
                    neural: a.neural + b.neural,
                    clutter: a.clutter + b.clutter,
                    contrastive: a.contrastive + b.contrastive,
                },
                ga.merge(gb),
            )
        });
    (parts, want_grad.then_some(grad.g))
}

/// Source loss of `model` on labeled scenes (rasterized at their true poses).
pub fn source_objective(model: &Model, scenes: &[Scene], cam: &Camera, lambda: f64, mu: f64) -> Result<LossParts> {
    let data: Vec<Prepared> = scenes
        .iter()
        .map(|s| rasterize(model.mesh.geometry(), &s.pose, cam).map(|raster| Prepared { scene: s, raster }))
        .collect::<Result<_>>()?;
    let obj = Objective::new(&model.mesh, &model.clutter, lambda, mu);
    Ok(source_loss(&data, &model.extractor, &obj, false).0)
}

/// Per-vertex feature sums, observation counts and background features.
struct Stats {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    per_vertex: Vec<Vec<Vec<f64>>>,
    fg_sum: Vec<f64>,
    bg: Vec<Vec<f64>>,
}

fn gather(data: &[Prepared], ext: &FeatureExtractor, r_count: usize, keep_samples: bool) -> Stats {
    let d = ext.dim();
    let mut st = Stats {
        sums: vec![vec![0.0; d]; r_count],
        counts: vec![0; r_count],
        per_vertex: vec![Vec::new(); r_count],
        fg_sum: vec![0.0; d],
        bg: Vec::new(),
    };
    for p in data {
        let f = ext.extract(&p.scene.features);
        for i in 0..f.pixel_count() {
            let x = f.pixel_f64(i);
            match p.raster.vertex_at(i) {
                Some(r) => {
                    st.sums[r].iter_mut().zip(&x).for_each(|(a, b)| *a += b);
                    st.fg_sum.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
                    st.counts[r] += 1;
                    if keep_samples {
                        st.per_vertex[r].push(x);
                    }
                }
                None => st.bg.push(x),
            }
        }
    }
    st
}

/// Closed-form vertex step: `C_l = normalize(S_l / n_fg - lambda * mean-negative term)`.
fn vertex_step(st: &Stats, geo: &CuboidMesh, lambda: f64, kappas: &[f64], init: &NeuralMesh) -> Result<NeuralMesh> {
    let r_count = geo.vertex_count();
    let d = init.dim();
    let n_fg: f64 = st.counts.iter().sum::<usize>().max(1) as f64;
    // Each observation of r pushes every non-neighbour l away with weight 1 / K_r.
    let k_r: Vec<f64> = (0..r_count)
        .map(|r| (0..r_count).filter(|&l| l != r && !geo.is_neighbor(r, l)).count().max(1) as f64)
        .collect();
    let mut total_push = vec![0.0; d];
    for r in 0..r_count {
        total_push.iter_mut().zip(&st.sums[r]).for_each(|(a, s)| *a += s / k_r[r]);
    }
    let features = (0..r_count)
        .map(|l| {
            if st.counts[l] == 0 {
                return init.feature(l).to_vec();
            }
            let mut push = total_push.clone();
            for r in std::iter::once(l).chain(geo.neighbors(l).iter().copied()) {
                push.iter_mut().zip(&st.sums[r]).for_each(|(a, s)| *a -= s / k_r[r]);
            }
            let mut c: Vec<f64> = st.sums[l].iter().zip(&push).map(|(s, p)| (s - lambda * p) / n_fg).collect();
            if normalize(&mut c) < 1e-12 {
                return init.feature(l).to_vec();
            }
            c
        })
        .collect();
    NeuralMesh::new(init.geometry_arc().clone(), features, kappas.to_vec())
}

/// Assigns each feature to its most similar prototype.
fn assign(bg: &[Vec<f64>], betas: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = bg
        .iter()
        .map(|x| {
            let (s, n) = betas
                .iter()
                .enumerate()
                .map(|(n, b)| (dot(x, b), n))
                .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
            total += s;
            n
        })
        .collect();
    (labels, total)
}

/// Lloyd iterations of spherical k-means with the clutter contrastive push.
fn lloyd(bg: &[Vec<f64>], mut betas: Vec<Vec<f64>>, push: &[f64], iters: usize) -> (Vec<Vec<f64>>, f64) {
    let d = push.len();
    let mut score = f64::NEG_INFINITY;
    for _ in 0..iters {
        let (labels, s) = assign(bg, &betas);
        score = s;
        let mut sums = vec![vec![0.0; d]; betas.len()];
        for (x, &n) in bg.iter().zip(&labels) {
            sums[n].iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
        let mut moved = false;
        for (n, s) in sums.iter_mut().enumerate() {
            let mut c: Vec<f64> = s.iter().zip(push).map(|(a, p)| a / bg.len() as f64 - p).collect();
            if normalize(&mut c) > 1e-12 && c != betas[n] {
                betas[n] = c;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    (betas, score)
}

/// Spherical k-means with seeded restarts, keeping the best-scoring run.
pub fn spherical_kmeans(bg: &[Vec<f64>], k: usize, restarts: usize, push: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
    let d = push.len();
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for _ in 0..restarts {
        let init: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                if bg.is_empty() {
                    sample_uniform_sphere(d, rng)
                } else {
                    vmf::normalized(&bg[rng.random_range(0..bg.len())])
                }
            })
            .collect();
        let (betas, score) = lloyd(bg, init, push, 50);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((betas, score));
        }
    }
    best.expect("at least one restart").0
}

fn fit_kappa(samples: &[Vec<f64>]) -> f64 {
    match estimate_kappa(samples) {
        Ok(k) => k.kappa.max(1e-3),
        Err(_) => 1.0,
    }
}

/// Fits `C`, clutter and `W` on labeled scenes by alternating closed-form
/// vertex/clutter steps with accepted-only gradient steps on `W`.
pub fn train_source(scenes: &[Scene], geometry: Arc<CuboidMesh>, cam: &Camera, cfg: &TrainingConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let dim = scenes[0].features.dim();
    if scenes.iter().any(|s| s.features.dim() != dim) {
        return Err(Error::Data("scenes disagree on feature dimension".into()));
    }
    let data: Vec<Prepared> = scenes
        .par_iter()
        .map(|s| rasterize(&geometry, &s.pose, cam).map(|raster| Prepared { scene: s, raster }))
        .collect::<Result<_>>()?;
    let r_count = geometry.vertex_count();
    let mut init_rng = derived_rng(cfg.seed, TAG_INIT, 0);
    let init_feats = (0..r_count).map(|_| sample_uniform_sphere(dim, &mut init_rng)).collect();
    let start_kappa = cfg.fixed_kappa.unwrap_or(20.0);
    let mut mesh = NeuralMesh::new(geometry.clone(), init_feats, vec![start_kappa; r_count])?;
    let mut ext = FeatureExtractor::identity(dim);

    let st = gather(&data, &ext, r_count, cfg.fixed_kappa.is_none());
    let never_observed: Vec<usize> = (0..r_count).filter(|&r| st.counts[r] == 0).collect();
    let kappas: Vec<f64> = match cfg.fixed_kappa {
        Some(k) => vec![k; r_count],
        None => (0..r_count)
            .map(|r| if st.per_vertex[r].len() >= 2 { fit_kappa(&st.per_vertex[r]) } else { start_kappa })
            .collect(),
    };
    mesh = vertex_step(&st, &geometry, cfg.lambda, &kappas, &mesh)?;
    let fg_mean: Vec<f64> = st.fg_sum.iter().map(|x| x / st.counts.iter().sum::<usize>().max(1) as f64).collect();
    let push: Vec<f64> = fg_mean.iter().map(|x| cfg.mu * x / cfg.n_clutter as f64).collect();
    let mut km_rng = derived_rng(cfg.seed, TAG_KMEANS, 0);
    let betas = spherical_kmeans(&st.bg, cfg.n_clutter, cfg.kmeans_restarts, &push, &mut km_rng);
    let kappa_prime = match cfg.fixed_kappa {
        Some(k) => k,
        None => {
            let (_, score) = assign(&st.bg, &betas);
            kappa_from_resultant((score / st.bg.len().max(1) as f64).clamp(0.0, 1.0), dim).kappa.max(1e-3)
        }
    };
    let mut clutter = ClutterModel::new(betas, kappa_prime)?;
    drop(st);

    let eval = |mesh: &NeuralMesh, clutter: &ClutterModel, ext: &FeatureExtractor| {
        source_loss(&data, ext, &Objective::new(mesh, clutter, cfg.lambda, cfg.mu), false).0
    };
    let mut current = eval(&mesh, &clutter, &ext);
    let mut curve = vec![EpochRecord { epoch: 0, loss: current, accepted_steps: 0 }];

    for epoch in 1..=cfg.epochs {
        // (b) gradient steps on W, accepted only if the batch loss drops.
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, TAG_TRAIN_ORDER, epoch as u64));
        let mut accepted = 0;
        if cfg.learning_rate > 0.0 {
            let epoch_start = ext.clone();
            let obj = Objective::new(&mesh, &clutter, cfg.lambda, cfg.mu);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Prepared> = chunk
                    .iter()
                    .map(|&j| Prepared { scene: data[j].scene, raster: data[j].raster.clone() })
                    .collect();
                let (before, grad) = source_loss(&batch, &ext, &obj, true);
                let grad = grad.expect("gradient requested");
                let mut lr = cfg.learning_rate;
                for _ in 0..6 {
                    let trial = ext.step(&grad, lr);
                    if source_loss(&batch, &trial, &obj, false).0.total() < before.total() {
                        ext = trial;
                        accepted += 1;
                        break;
                    }
                    lr *= 0.5;
                }
            }
            // Batch-wise improvements can still raise the full loss; keep the epoch-start W then.
            if eval(&mesh, &clutter, &ext).total() > current.total() {
                ext = epoch_start;
                accepted = 0;
            }
        }

        // (a) closed-form vertex step and warm-started clutter step, each kept only if it helps.
        let st = gather(&data, &ext, r_count, cfg.fixed_kappa.is_none());
        let kappas: Vec<f64> = match cfg.fixed_kappa {
            Some(k) => vec![k; r_count],
            None => (0..r_count)
                .map(|r| if st.per_vertex[r].len() >= 2 { fit_kappa(&st.per_vertex[r]) } else { mesh.kappa(r) })
                .collect(),
        };
        current = eval(&mesh, &clutter, &ext);
        let cand = vertex_step(&st, &geometry, cfg.lambda, &kappas, &mesh)?;
        let l = eval(&cand, &clutter, &ext);
        if l.total() <= current.total() {
            mesh = cand;
            current = l;
        }
        let fg_mean: Vec<f64> = st.fg_sum.iter().map(|x| x / st.counts.iter().sum::<usize>().max(1) as f64).collect();
        let push: Vec<f64> = fg_mean.iter().map(|x| cfg.mu * x / cfg.n_clutter as f64).collect();
        let (betas, _) = lloyd(&st.bg, clutter.betas().to_vec(), &push, 20);
        let cand = ClutterModel::new(betas, clutter.kappa_prime())?;
        let l = eval(&mesh, &cand, &ext);
        if l.total() <= current.total() {
            clutter = cand;
            current = l;
        }
        curve.push(EpochRecord { epoch, loss: current, accepted_steps: accepted });
    }

    Ok(TrainOutput {
        model: Model { mesh, clutter, extractor: ext },
        never_observed,
        curve,
    })
}

/// Pose accuracy summary. `median_error` in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub acc_pi6: f64,
    pub acc_pi18: f64,
    pub median_error: f64,
    pub n: usize,
}

/// Threshold accuracies (strictly below pi/6 and pi/18) and the median error.
pub fn metrics_from_errors(errors: &[f64]) -> Metrics {
    let n = errors.len();
    if n == 0 {
        return Metrics { acc_pi6: 0.0, acc_pi18: 0.0, median_error: PI, n: 0 };
    }
    let frac = |t: f64| errors.iter().filter(|&&e| e < t).count() as f64 / n as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Metrics {
        acc_pi6: frac(PI / 6.0),
        acc_pi18: frac(PI / 18.0),
        median_error: median,
        n,
    }
}

#[derive(Clone, Debug)]
pub struct SceneResult {
    pub predicted: Option<Pose>,
    pub truth: Pose,
    /// Geodesic error; `pi` when estimation failed.
    pub error: f64,
    pub estimate: Option<MultiPoseEstimate>,
    /// Fraction of vertices visible at the estimated pose whose feature
    /// cosine exceeds the diagnostic threshold.
    pub robust_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub scenes: Vec<SceneResult>,
}

/// Robust ratio of one scene at a rasterization: visible vertices whose
/// vertex-pixel cosine exceeds `delta`.
pub fn robust_ratio_at(f: &FeatureMap, raster: &RasterMap, mesh: &NeuralMesh, delta: f64) -> Option<f64> {
    let mut vis = 0usize;
    let mut hit = 0usize;
    for r in raster.visible_vertices() {
        let Some(i) = raster.vertex_pixel(r) else { continue };
        vis += 1;
        if f.dot_pixel(i, mesh.feature(r)) > delta {
            hit += 1;
        }
    }
    (vis > 0).then(|| hit as f64 / vis as f64)
}

/// Runs multi-init pose estimation on every scene and scores it against the
/// ground truth. `delta` sets the robust-ratio threshold.
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    cam: &Camera,
    bank: &PoseBank,
    opts: &InferenceOptions,
    delta: f64,
) -> Result<Evaluation> {
    let results: Vec<SceneResult> = scenes
        .par_iter()
        .map(|s| {
            let f = model.extractor.extract(&s.features);
            let est = SceneScorer::new(&f, &model.mesh, &model.clutter, cam)
                .and_then(|scorer| estimate_with_scorer(&scorer, bank, opts));
            match est {
                Ok(est) => {
                    let best = est.best();
                    let error = geodesic_distance(&best.pose.rotation(), &s.pose.rotation());
                    let ratio = robust_ratio_at(&f, &best.raster, &model.mesh, delta);
                    SceneResult { predicted: Some(best.pose), truth: s.pose, error, estimate: Some(est), robust_ratio: ratio }
                }
                Err(_) => SceneResult { predicted: None, truth: s.pose, error: PI, estimate: None, robust_ratio: None },
            }
        })
        .collect();
    let errors: Vec<f64> = results.iter().map(|r| r.error).collect();
    Ok(Evaluation { metrics: metrics_from_errors(&errors), scenes: results })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub center_deg: f64,
    /// `None` for bins without scenes.
    pub ratio: Option<f64>,
    pub count: usize,
}

/// Mean robust ratio per ground-truth azimuth bin.
pub fn ratio_histogram(eval: &Evaluation, bins: usize) -> Vec<HistogramBin> {
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for s in &eval.scenes {
        let Some(r) = s.robust_ratio else { continue };
        let b = ((s.truth.azimuth() / (2.0 * PI) * bins as f64) as usize).min(bins - 1);
        sums[b] += r;
        counts[b] += 1;
    }
    (0..bins)
        .map(|b| HistogramBin {
            center_deg: (b as f64 + 0.5) * 360.0 / bins as f64,
            ratio: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
            count: counts[b],
        })
        .collect()
}

/// Per-bin robust-vertex ratio of `model` on `scenes` at threshold `delta`.
pub fn robust_vertex_ratio(
    model: &Model,
    scenes: &[Scene],
    cam: &Camera,
    bank: &PoseBank,
    opts: &InferenceOptions,
    delta: f64,
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    if scenes.is_empty() {
        return Err(Error::Data("robust ratio needs at least one scene".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    Ok(ratio_histogram(&evaluate(model, scenes, cam, bank, opts, delta)?, bins))
}

/// Mean robust ratio over scenes with a defined ratio.
pub fn mean_robust_ratio(eval: &Evaluation) -> f64 {
    let v: Vec<f64> = eval.scenes.iter().filter_map(|s| s.robust_ratio).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Vertices that appear in at least one scene's ground-truth rasterization.
pub fn observed_vertices(scenes: &[Scene]) -> HashSet<usize> {
    scenes
        .iter()
        .flat_map(|s| s.visible.iter().enumerate().filter(|(_, &v)| v).map(|(r, _)| r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_cuboid_mesh;
    use crate::inference::{AxisRange, PoseGrid};
    use crate::seed::rng_from;
    use crate::synth::{generate_source, random_true_model};

    #[test]
    fn source_gradient_matches_central_differences() {
        let geo = Arc::new(make_cuboid_mesh([1.6, 0.8, 1.0], 3).unwrap());
        let world = random_true_model(geo.clone(), 4, 3, 20.0, 0.0, &mut rng_from(3)).unwrap();
        let grid = PoseGrid {
            azimuth: AxisRange::new(0.0, 2.0 * PI, 6),
            elevation: AxisRange::new(0.1, 0.5, 2),
            theta: AxisRange::new(0.0, 0.0, 1),
            distance: 5.0,
        };
        let cam = Camera::new(30.0, 16, 16).unwrap();
        let scenes = generate_source(&world, &grid, &cam, 3, 20.0, 4).unwrap();
        let data: Vec<Prepared> = scenes
            .iter()
            .map(|s| Prepared { scene: s, raster: rasterize(&geo, &s.pose, &cam).unwrap() })
            .collect();
        let mut rng = rng_from(5);
        let w: Vec<f64> = (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 } + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let ext = FeatureExtractor::new(4, w.clone()).unwrap();
        let obj = Objective::new(&world.mesh, &world.clutter, 0.1, 0.1);
        let (_, g) = source_loss(&data, &ext, &obj, true);
        let g = g.unwrap();
        let h = 1e-6;
        for k in 0..16 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let lp = source_loss(&data, &FeatureExtractor::new(4, wp).unwrap(), &obj, false).0.total();
            let lm = source_loss(&data, &FeatureExtractor::new(4, wm).unwrap(), &obj, false).0.total();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-2 * fd.abs().max(1e-3), "entry {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn extractor_outputs_unit_vectors() {
        let ext = FeatureExtractor::new(3, vec![2.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (f, n) = ext.apply(&[0.0, 1.0, 0.0]);
        assert!((vmf::norm(&f) - 1.0).abs() < 1e-12);
        assert!((n - 0.5).abs() < 1e-12);
        // W x = 0 falls back to the raw vector.
        let (f, _) = FeatureExtractor::new(3, vec![0.0; 9]).unwrap().apply(&[0.6, 0.8, 0.0]);
        assert_eq!(f, vec![0.6, 0.8, 0.0]);
        assert!(FeatureExtractor::new(2, vec![f64::NAN, 0.0, 0.0, 1.0]).is_err());
    }
}
