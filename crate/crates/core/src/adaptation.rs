//! Unsupervised adaptation through selective vertex-feature updates.
//!
//! Each batch estimates poses with the current model, accepts the
//! (scene, vertex) matches whose feature cosine clears the per-vertex
//! threshold, moves only those vertex features towards the accepted target
//! features, drops unreliable scenes and takes one guarded gradient step on
//! the extractor.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize, Camera, RasterMap};
use crate::inference::{estimate_with_scorer, InferenceOptions, MultiPoseEstimate, PoseBank, SceneScorer};
use crate::meshmodel::{ClutterModel, FeatureMap, NeuralMesh};
use crate::seed::derived_rng;
use crate::synth::{Scene, UnlabeledScene};
use crate::training::{evaluate, robust_ratio_at, FeatureExtractor, Model, WGrad};
use crate::vmf::{dot, estimate_kappa, log_norm_const, normalize, KAPPA_MAX};

const TAG_ADAPT_ORDER: u64 = 30;

/// Threshold used for vertices with too few calibration observations.
pub const FALLBACK_DELTA: f64 = 0.8;
/// Minimum calibration observations per vertex.
pub const MIN_CALIBRATION_OBS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Matches from every multi-init candidate, deduplicated per (scene, vertex).
    #[default]
    AllCandidates,
    BestOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    /// Per-vertex acceptance thresholds.
    pub delta: Vec<f64>,
    /// EMA weight kept on the current vertex feature.
    pub alpha: f64,
    /// Minimum fraction of visible vertices that must be activated.
    pub psi: f64,
    /// Minimum mean foreground cosine for a scene to be kept.
    pub drop_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub recompute_kappa: bool,
    pub min_kappa_matches: usize,
    /// Grow each batch until `target_coverage` of the vertices have a match.
    pub adaptive_batch: bool,
    pub target_coverage: f64,
    /// Extractor step size; `0` freezes the extractor.
    pub learning_rate: f64,
    /// Fixed concentration of the backbone loss.
    pub loss_kappa: f64,
    pub match_mode: MatchMode,
    /// Mean vertex drift (radians) below which an epoch counts as converged.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Threshold of the robust-ratio column of the history.
    pub ratio_delta: f64,
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            delta: Vec::new(),
            alpha: 0.9,
            psi: 0.075,
            drop_threshold: 0.5,
            batch_size: 32,
            epochs: 10,
            recompute_kappa: false,
            min_kappa_matches: 10,
            adaptive_batch: false,
            target_coverage: 0.8,
            learning_rate: 0.05,
            loss_kappa: 20.0,
            match_mode: MatchMode::AllCandidates,
            convergence_tol: 0.1_f64.to_radians(),
            convergence_window: 5,
            ratio_delta: 0.8,
            probe_every: 1,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        if self.delta.len() != vertex_count {
            return Err(Error::Config(format!(
                "delta has {} entries for {vertex_count} vertices; calibrate first",
                self.delta.len()
            )));
        }
        if self.delta.iter().any(|d| !(-1.0..=1.0).contains(d)) {
            return Err(Error::Config("delta entries must lie in [-1, 1]".into()));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha) || !unit(self.psi) || !unit(self.target_coverage) {
            return Err(Error::Config("alpha, psi and target_coverage must lie in [0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.drop_threshold) {
            return Err(Error::Config("drop_threshold must lie in [-1, 1]".into()));
        }
        if self.batch_size == 0 || self.probe_every == 0 || self.convergence_window == 0 {
            return Err(Error::Config("batch_size, probe_every and convergence_window must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.loss_kappa > 0.0 && self.loss_kappa <= KAPPA_MAX) {
            return Err(Error::Config("learning_rate must be >= 0 and loss_kappa in (0, KAPPA_MAX]".into()));
        }
        Ok(())
    }
}

/// Empirical `p`-quantile with linear interpolation.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-vertex thresholds from labeled source scenes: `delta_r` is the
/// `(1 - quantile)`-quantile of the cosines between `C_r` and the features
/// rendered at `r`'s pixel under the true pose, so roughly a `quantile`
/// fraction of in-domain observations clears it.
pub fn calibrate_thresholds(model: &Model, scenes: &[Scene], cam: &Camera, quantile_level: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&quantile_level) {
        return Err(Error::Config("quantile must lie in [0, 1]".into()));
    }
    let per_scene: Vec<Vec<(usize, f64)>> = scenes
        .par_iter()
        .map(|s| {
            let f = model.extractor.extract(&s.features);
            let raster = rasterize(model.mesh.geometry(), &s.pose, cam)?;
            Ok(raster.foreground().map(|(i, r)| (r, f.dot_pixel(i, model.mesh.feature(r)))).collect())
        })
        .collect::<Result<_>>()?;
    let mut sims = vec![Vec::new(); model.mesh.vertex_count()];
    for (r, s) in per_scene.into_iter().flatten() {
        sims[r].push(s);
    }
    Ok(sims
        .into_iter()
        .map(|mut v| {
            if v.len() < MIN_CALIBRATION_OBS {
                return FALLBACK_DELTA;
            }
            v.sort_by(|a, b| a.total_cmp(b));
            quantile(&v, 1.0 - quantile_level)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    pub scene: usize,
    pub feature: Vec<f64>,
    pub similarity: f64,
}

/// Accepted target features per vertex.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchTable {
    pub per_vertex: Vec<Vec<Match>>,
}

impl MatchTable {
    pub fn total(&self) -> usize {
        self.per_vertex.iter().map(Vec::len).sum()
    }

    pub fn matched_vertices(&self) -> usize {
        self.per_vertex.iter().filter(|m| !m.is_empty()).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.per_vertex.is_empty() {
            return 0.0;
        }
        self.matched_vertices() as f64 / self.per_vertex.len() as f64
    }

    pub fn merge(&mut self, other: MatchTable) {
        if self.per_vertex.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.per_vertex.iter_mut().zip(other.per_vertex) {
            a.extend(b);
        }
    }
}

/// One estimated scene: its id, extracted features and pose hypotheses.
pub struct Observation<'a> {
    pub scene: usize,
    pub features: &'a FeatureMap,
    pub estimate: &'a MultiPoseEstimate,
}

/// Matches `(scene, r)` whose vertex-pixel cosine strictly exceeds `delta[r]`.
/// A vertex matched by several candidates keeps the most similar feature.
pub fn collect_matches(obs: &[Observation], mesh: &NeuralMesh, delta: &[f64], mode: MatchMode) -> MatchTable {
    let mut table = MatchTable { per_vertex: vec![Vec::new(); mesh.vertex_count()] };
    for o in obs {
        let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let candidates: Vec<&RasterMap> = match mode {
            MatchMode::BestOnly => vec![&o.estimate.best().raster],
            MatchMode::AllCandidates => o.estimate.candidates.iter().map(|c| &c.raster).collect(),
        };
        for raster in candidates {
            for r in raster.visible_vertices() {
                let Some(i) = raster.vertex_pixel(r) else { continue };
                let sim = o.features.dot_pixel(i, mesh.feature(r));
                if sim > delta[r] && best.get(&r).is_none_or(|&(s, _)| sim > s) {
                    best.insert(r, (sim, i));
                }
            }
        }
        for (r, (similarity, i)) in best {
            table.per_vertex[r].push(Match { scene: o.scene, feature: o.features.pixel_f64(i), similarity });
        }
    }
    table
}

/// `C_r <- normalize(alpha C_r + (1 - alpha) mean(matched features))` for
/// matched vertices; the rest stay bit-identical.
pub fn sva_update(mesh: &NeuralMesh, table: &MatchTable, alpha: f64) -> Result<NeuralMesh> {
    let features = (0..mesh.vertex_count())
        .map(|r| {
            let c = mesh.feature(r);
            let ms = table.per_vertex.get(r).map(Vec::as_slice).unwrap_or(&[]);
            if ms.is_empty() || alpha == 1.0 {
                return c.to_vec();
            }
            let mut mean = vec![0.0; c.len()];
            for m in ms {
                mean.iter_mut().zip(&m.feature).for_each(|(a, b)| *a += b / ms.len() as f64);
            }
            let mut v: Vec<f64> = c.iter().zip(&mean).map(|(c, m)| alpha * c + (1.0 - alpha) * m).collect();
            if normalize(&mut v) < 1e-12 {
                return c.to_vec();
            }
            v
        })
        .collect();
    mesh.with_features(features)
}

/// Refits `kappa_r` from the matches of vertices with at least `min_matches`.
pub fn recompute_kappas(mesh: &NeuralMesh, table: &MatchTable, min_matches: usize) -> Result<NeuralMesh> {
    let kappas = (0..mesh.vertex_count())
        .map(|r| {
            let ms = table.per_vertex.get(r).map(Vec::as_slice).unwrap_or(&[]);
            if ms.len() < min_matches.max(2) {
                return mesh.kappa(r);
            }
            let samples: Vec<Vec<f64>> = ms.iter().map(|m| m.feature.clone()).collect();
            estimate_kappa(&samples).map(|k| k.kappa.max(1e-3)).unwrap_or(mesh.kappa(r))
        })
        .collect();
    mesh.with_kappas(kappas)
}

/// Mean foreground cosine and fraction of activated visible vertices.
pub fn scene_similarity(f: &FeatureMap, raster: &RasterMap, mesh: &NeuralMesh, delta: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, r) in raster.foreground() {
        sum += f.dot_pixel(i, mesh.feature(r));
        n += 1;
    }
    let mut vis = 0usize;
    let mut act = 0usize;
    for r in raster.visible_vertices() {
        let Some(i) = raster.vertex_pixel(r) else { continue };
        vis += 1;
        if f.dot_pixel(i, mesh.feature(r)) > delta[r] {
            act += 1;
        }
    }
    let global = if n > 0 { sum / n as f64 } else { -1.0 };
    let activated = if vis > 0 { act as f64 / vis as f64 } else { 0.0 };
    (global, activated)
}

/// Indices (into `obs`) of scenes kept for the extractor update.
pub fn drop_low_similarity(obs: &[Observation], mesh: &NeuralMesh, delta: &[f64], drop_threshold: f64, psi: f64) -> Vec<usize> {
    obs.iter()
        .enumerate()
        .filter(|(_, o)| {
            let (g, a) = scene_similarity(o.features, &o.estimate.best().raster, mesh, delta);
            g >= drop_threshold && a >= psi
        })
        .map(|(k, _)| k)
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Backbone loss terms for one vertex feature: returns the term and fills
/// `grad` with its derivative in `f` when given.
fn backbone_term(
    f: &[f64],
    r: usize,
    mesh: &NeuralMesh,
    clutter: &ClutterModel,
    kappa: f64,
    log_z: f64,
    log_z_bg: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let geo = mesh.geometry();
    let kp = clutter.kappa_prime();
    let mut scores = Vec::new();
    let mut dirs: Vec<(&[f64], f64)> = Vec::new();
    for l in (0..mesh.vertex_count()).filter(|&l| !geo.is_neighbor(r, l)) {
        scores.push(log_z + kappa * dot(f, mesh.feature(l)));
        dirs.push((mesh.feature(l), kappa));
    }
    for b in clutter.betas() {
        scores.push(log_z_bg + kp * dot(f, b));
        dirs.push((b, kp));
    }
    let own = log_z + kappa * dot(f, mesh.feature(r));
    let lse = log_sum_exp(&scores);
    if let Some(g) = grad {
        let c = mesh.feature(r);
        g.iter_mut().zip(c).for_each(|(g, c)| *g = -kappa * c);
        for (s, (v, k)) in scores.iter().zip(&dirs) {
            let p = (s - lse).exp();
            g.iter_mut().zip(v.iter()).for_each(|(g, x)| *g += p * k * x);
        }
    }
    -(own - lse)
}

/// Sum over vertices visible in `raster` of the negative log-softmax of the
/// vertex's own likelihood against its non-neighbours and the clutter
/// prototypes, at the vertex pixel, with a fixed vertex concentration.
pub fn backbone_loss(f: &FeatureMap, raster: &RasterMap, mesh: &NeuralMesh, clutter: &ClutterModel, kappa: f64) -> f64 {
    let d = mesh.dim();
    let log_z = log_norm_const(kappa, d);
    let log_z_bg = log_norm_const(clutter.kappa_prime(), d);
    raster
        .visible_vertices()
        .filter_map(|r| raster.vertex_pixel(r).map(|i| (r, i)))
        .map(|(r, i)| backbone_term(&f.pixel_f64(i), r, mesh, clutter, kappa, log_z, log_z_bg, None))
        .sum()
}

/// Mean backbone loss over the kept scenes (raw features, extractor `ext`)
/// and optionally its gradient in `W`.
pub fn backbone_objective(
    ext: &FeatureExtractor,
    kept: &[(&FeatureMap, &RasterMap)],
    mesh: &NeuralMesh,
    clutter: &ClutterModel,
    kappa: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let d = mesh.dim();
    let log_z = log_norm_const(kappa, d);
    let log_z_bg = log_norm_const(clutter.kappa_prime(), d);
    let (sum, n, grad) = kept
        .par_iter()
        .map(|(raw, raster)| {
            let mut wg = WGrad::new(d);
            let mut g = vec![0.0; d];
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in raster.visible_vertices() {
                let Some(i) = raster.vertex_pixel(r) else { continue };
                let x = raw.pixel_f64(i);
                let (f, ny) = ext.apply(&x);
                let gr = want_grad.then_some(g.as_mut_slice());
                sum += backbone_term(&f, r, mesh, clutter, kappa, log_z, log_z_bg, gr);
                if want_grad {
                    wg.add(&x, &f, ny, &g, 1.0);
                }
                n += 1;
            }
            (sum, n, wg)
        })
        .reduce(|| (0.0, 0, WGrad::new(d)), |a, b| (a.0 + b.0, a.1 + b.1, a.2.merge(b.2)));
    if n == 0 {
        return (0.0, want_grad.then(|| vec![0.0; d * d]));
    }
    let scale = 1.0 / n as f64;
    (sum * scale, want_grad.then(|| grad.g.iter().map(|g| g * scale).collect()))
}

/// One backtracking gradient step on the extractor; a step that does not
/// lower the loss is rejected. Returns the extractor and the loss before and
/// after.
pub fn update_extractor(
    ext: &FeatureExtractor,
    kept: &[(&FeatureMap, &RasterMap)],
    mesh: &NeuralMesh,
    clutter: &ClutterModel,
    kappa: f64,
    lr: f64,
) -> (FeatureExtractor, f64, f64) {
    let (before, grad) = backbone_objective(ext, kept, mesh, clutter, kappa, lr > 0.0);
    let Some(grad) = grad.filter(|_| !kept.is_empty()) else {
        return (ext.clone(), before, before);
    };
    let mut step = lr;
    for _ in 0..8 {
        let trial = ext.step(&grad, step);
        let (after, _) = backbone_objective(&trial, kept, mesh, clutter, kappa, false);
        if after < before {
            return (trial, before, after);
        }
        step *= 0.5;
    }
    (ext.clone(), before, before)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub robust_ratio: f64,
    pub mean_drift_deg: f64,
    pub kept: usize,
    pub dropped: usize,
    pub acc_pi6: Option<f64>,
    pub acc_pi18: Option<f64>,
    /// Accepted matches in the epoch; not part of the CSV.
    #[serde(skip)]
    pub matches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationHistory {
    pub rows: Vec<HistoryRow>,
    pub converged: bool,
}

impl AdaptationHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub model: Model,
    pub history: AdaptationHistory,
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

struct Estimated {
    scene: usize,
    features: FeatureMap,
    estimate: MultiPoseEstimate,
}

fn estimate_batch(model: &Model, target: &[UnlabeledScene], ids: &[usize], cam: &Camera, bank: &PoseBank, opts: &InferenceOptions) -> Vec<Estimated> {
    ids.par_iter()
        .filter_map(|&s| {
            let features = model.extractor.extract(&target[s].features);
            let scorer = SceneScorer::new(&features, &model.mesh, &model.clutter, cam).ok()?;
            let estimate = estimate_with_scorer(&scorer, bank, opts).ok()?;
            Some(Estimated { scene: s, features, estimate })
        })
        .collect()
}

/// Adapts `source` to unlabeled target scenes. `probe` (labeled, never used
/// for updates) is only evaluated for the history.
pub fn adapt(
    source: &Model,
    target: &[UnlabeledScene],
    cam: &Camera,
    bank: &PoseBank,
    opts: &InferenceOptions,
    cfg: &AdaptationConfig,
    probe: Option<&[Scene]>,
) -> Result<AdaptOutput> {
    cfg.validate(source.mesh.vertex_count())?;
    opts.validate()?;
    if target.is_empty() {
        return Err(Error::Data("target stream is empty".into()));
    }
    let mut model = source.clone();
    let mut history = AdaptationHistory::default();
    let mut calm = 0usize;

    for epoch in 1..=cfg.epochs {
        let start = model.mesh.clone();
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, TAG_ADAPT_ORDER, epoch as u64));
        let mut matches_total = 0;
        let mut kept_total = 0;
        let mut dropped_total = 0;
        let mut ratios = Vec::new();

        let mut pos = 0;
        while pos < order.len() {
            let mut est = Vec::new();
            let mut table = MatchTable::default();
            loop {
                let end = (pos + cfg.batch_size).min(order.len());
                let chunk = estimate_batch(&model, target, &order[pos..end], cam, bank, opts);
                dropped_total += (end - pos) - chunk.len();
                pos = end;
                let obs: Vec<Observation> = chunk
                    .iter()
                    .map(|e| Observation { scene: e.scene, features: &e.features, estimate: &e.estimate })
                    .collect();
                table.merge(collect_matches(&obs, &model.mesh, &cfg.delta, cfg.match_mode));
                est.extend(chunk);
                if !cfg.adaptive_batch || table.coverage() >= cfg.target_coverage || pos >= order.len() {
                    break;
                }
            }
            for e in &est {
                if let Some(r) = robust_ratio_at(&e.features, &e.estimate.best().raster, &model.mesh, cfg.ratio_delta) {
                    ratios.push(r);
                }
            }
            matches_total += table.total();
            let mesh = sva_update(&model.mesh, &table, cfg.alpha)?;

            let obs: Vec<Observation> = est
                .iter()
                .map(|e| Observation { scene: e.scene, features: &e.features, estimate: &e.estimate })
                .collect();
            let kept = drop_low_similarity(&obs, &mesh, &cfg.delta, cfg.drop_threshold, cfg.psi);
            kept_total += kept.len();
            dropped_total += est.len() - kept.len();
            let pairs: Vec<(&FeatureMap, &RasterMap)> = kept
                .iter()
                .map(|&k| (&target[est[k].scene].features, &est[k].estimate.best().raster))
                .collect();
            let (ext, _, _) = update_extractor(&model.extractor, &pairs, &mesh, &model.clutter, cfg.loss_kappa, cfg.learning_rate);
            model.extractor = ext;
            model.mesh = if cfg.recompute_kappa { recompute_kappas(&mesh, &table, cfg.min_kappa_matches)? } else { mesh };
        }

        if matches_total == 0 {
            return Err(Error::Starvation { epoch });
        }
        let drift = (0..start.vertex_count())
            .map(|r| angle(start.feature(r), model.mesh.feature(r)))
            .sum::<f64>()
            / start.vertex_count() as f64;
        let (acc_pi6, acc_pi18) = match probe {
            Some(p) if epoch % cfg.probe_every == 0 || epoch == cfg.epochs => {
                let m = evaluate(&model, p, cam, bank, opts, cfg.ratio_delta)?.metrics;
                (Some(m.acc_pi6), Some(m.acc_pi18))
            }
            _ => (None, None),
        };
        history.rows.push(HistoryRow {
            epoch,
            robust_ratio: if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 },
            mean_drift_deg: drift * 180.0 / PI,
            matches: matches_total,
            kept: kept_total,
            dropped: dropped_total,
            acc_pi6,
            acc_pi18,
        });
        calm = if drift < cfg.convergence_tol { calm + 1 } else { 0 };
        if calm >= cfg.convergence_window {
            history.converged = true;
            break;
        }
    }
    Ok(AdaptOutput { model, history })
}
