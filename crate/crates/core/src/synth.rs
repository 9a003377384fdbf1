//! Seeded synthetic feature domains. A "true" neural mesh generates source
//! scenes; a shifted copy, in which only a robust vertex subset keeps its
//! features, generates target scenes with optional occlusion and drift.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize, Camera, CuboidMesh, Pose};
use crate::inference::PoseGrid;
use crate::meshmodel::{ClutterModel, FeatureMap, NeuralMesh};
use crate::seed::{derive, derived_rng, rng_from, Rng};
use crate::vmf::{dot, normalize, sample_uniform_sphere, VmfParams, VmfSampler};

const TAG_SCENE: u64 = 1;
const TAG_OCCLUDE: u64 = 2;
const TAG_OCCLUDER: u64 = 3;

/// The model that generates observed features: vertex means plus clutter.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    pub mesh: NeuralMesh,
    pub clutter: ClutterModel,
}

/// Index of each vertex's image under a half turn about the vertical axis.
pub fn half_turn_partner(mesh: &CuboidMesh) -> Vec<usize> {
    mesh.vertices()
        .iter()
        .map(|v| {
            let w = nalgebra::Vector3::new(-v.x, v.y, -v.z);
            (0..mesh.vertex_count())
                .min_by(|&a, &b| {
                    (mesh.vertices()[a] - w)
                        .norm_squared()
                        .total_cmp(&(mesh.vertices()[b] - w).norm_squared())
                })
                .expect("mesh has vertices")
        })
        .collect()
}

/// Random true model. `symmetry` in `[0, 1]` mixes a component shared by each
/// vertex and its half-turn partner into the otherwise independent features,
/// so that `cos(C_r, C_partner) ~ symmetry`.
pub fn random_true_model(
    geometry: Arc<CuboidMesh>,
    dim: usize,
    n_clutter: usize,
    clutter_kappa: f64,
    symmetry: f64,
    rng: &mut Rng,
) -> Result<GenerativeModel> {
    if !(0.0..=1.0).contains(&symmetry) {
        return Err(Error::Config(format!("symmetry must be in [0, 1], got {symmetry}")));
    }
    let partner = half_turn_partner(&geometry);
    let count = geometry.vertex_count();
    let shared: Vec<Vec<f64>> = (0..count).map(|_| sample_uniform_sphere(dim, rng)).collect();
    let own: Vec<Vec<f64>> = (0..count).map(|_| sample_uniform_sphere(dim, rng)).collect();
    let (a, b) = (symmetry.sqrt(), (1.0 - symmetry).sqrt());
    let features = (0..count)
        .map(|r| {
            let s = &shared[r.min(partner[r])];
            let mut c: Vec<f64> = s.iter().zip(&own[r]).map(|(x, y)| a * x + b * y).collect();
            normalize(&mut c);
            c
        })
        .collect();
    let mesh = NeuralMesh::new(geometry, features, vec![20.0; count])?;
    let betas = (0..n_clutter).map(|_| sample_uniform_sphere(dim, rng)).collect();
    let clutter = ClutterModel::new(betas, clutter_kappa)?;
    Ok(GenerativeModel { mesh, clutter })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OcclusionLevel {
    #[default]
    #[serde(rename = "none")]
    None,
    L1,
    L2,
}

impl OcclusionLevel {
    /// Bounds on the occluded share of foreground pixels.
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            OcclusionLevel::None => None,
            OcclusionLevel::L1 => Some((0.2, 0.4)),
            OcclusionLevel::L2 => Some((0.4, 0.6)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustSubset {
    /// `ceil(rho R)` vertices drawn uniformly.
    Random,
    /// The `ceil(rho R)` vertices nearest to a random vertex: one object part.
    Region,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClutterSwap {
    Random { count: usize },
    Explicit { betas: Vec<Vec<f64>> },
}

/// Target-domain construction. Angles in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub robust_fraction: f64,
    pub robust_subset: RobustSubset,
    pub perturb_min: f64,
    pub perturb_max: f64,
    pub data_kappa: f64,
    pub occlusion: OcclusionLevel,
    pub clutter_swap: Option<ClutterSwap>,
    /// Row-major `d x d` map applied to every observed feature.
    pub extractor_drift: Option<Vec<Vec<f64>>>,
}

impl DomainSpec {
    /// A spec that leaves the source domain unchanged.
    pub fn identity(data_kappa: f64) -> Self {
        Self {
            robust_fraction: 1.0,
            robust_subset: RobustSubset::Random,
            perturb_min: 0.0,
            perturb_max: 0.0,
            data_kappa,
            occlusion: OcclusionLevel::None,
            clutter_swap: None,
            extractor_drift: None,
        }
    }

    pub fn validate(&self, dim: usize, vertex_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.robust_fraction) {
            return Err(Error::Config(format!("robust_fraction must be in [0, 1], got {}", self.robust_fraction)));
        }
        if !(self.perturb_min >= 0.0 && self.perturb_max >= self.perturb_min && self.perturb_max <= PI) {
            return Err(Error::Config("perturbation angles must satisfy 0 <= min <= max <= 180 degrees".into()));
        }
        if !(self.data_kappa > 0.0) {
            return Err(Error::Config("data_kappa must be positive".into()));
        }
        if let RobustSubset::Explicit(list) = &self.robust_subset {
            if list.iter().any(|&r| r >= vertex_count) {
                return Err(Error::Config("robust_subset lists a vertex outside the mesh".into()));
            }
        }
        if let Some(m) = &self.extractor_drift {
            if m.len() != dim || m.iter().any(|row| row.len() != dim) {
                return Err(Error::Config(format!("extractor_drift must be {dim}x{dim}")));
            }
        }
        if let Some(ClutterSwap::Explicit { betas }) = &self.clutter_swap {
            if betas.iter().any(|b| b.len() != dim) {
                return Err(Error::Config("clutter_swap prototypes have the wrong dimension".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedModel {
    pub model: GenerativeModel,
    /// Sorted indices of vertices that kept their source feature.
    pub robust: Vec<usize>,
}

fn choose_robust(mesh: &CuboidMesh, spec: &DomainSpec, rng: &mut Rng) -> Vec<usize> {
    let count = mesh.vertex_count();
    let keep = (spec.robust_fraction * count as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut out = match &spec.robust_subset {
        RobustSubset::Explicit(list) => list.clone(),
        RobustSubset::Random => {
            let mut idx: Vec<usize> = (0..count).collect();
            idx.shuffle(rng);
            idx.truncate(keep);
            idx
        }
        RobustSubset::Region => {
            let centre = mesh.vertices()[rng.random_range(0..count)];
            let mut idx: Vec<usize> = (0..count).collect();
            idx.sort_by(|&a, &b| {
                (mesh.vertices()[a] - centre)
                    .norm_squared()
                    .total_cmp(&(mesh.vertices()[b] - centre).norm_squared())
                    .then(a.cmp(&b))
            });
            idx.truncate(keep);
            idx
        }
    };
    out.sort_unstable();
    out.dedup();
    out
}

/// Unit vector orthogonal to `c`, uniformly distributed on that great sphere.
fn random_orthogonal(c: &[f64], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut u = sample_uniform_sphere(c.len(), rng);
        let p = dot(&u, c);
        u.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        if normalize(&mut u) > 1e-6 {
            return u;
        }
    }
}

/// Rotates every non-robust vertex feature by a random angle in the spec's
/// range, in the plane of `C_r` and a random orthogonal direction.
pub fn shift_model(model: &GenerativeModel, spec: &DomainSpec, rng: &mut Rng) -> Result<ShiftedModel> {
    spec.validate(model.mesh.dim(), model.mesh.vertex_count())?;
    let robust = choose_robust(model.mesh.geometry(), spec, rng);
    let mut is_robust = vec![false; model.mesh.vertex_count()];
    robust.iter().for_each(|&r| is_robust[r] = true);
    let features = (0..model.mesh.vertex_count())
        .map(|r| {
            let c = model.mesh.feature(r);
            if is_robust[r] {
                return c.to_vec();
            }
            let phi = spec.perturb_min + rng.random::<f64>() * (spec.perturb_max - spec.perturb_min);
            let u = random_orthogonal(c, rng);
            let mut out: Vec<f64> = c.iter().zip(&u).map(|(a, b)| phi.cos() * a + phi.sin() * b).collect();
            normalize(&mut out);
            out
        })
        .collect();
    let mesh = model.mesh.with_features(features)?;
    let clutter = match &spec.clutter_swap {
        None => model.clutter.clone(),
        Some(ClutterSwap::Random { count }) => ClutterModel::new(
            (0..*count).map(|_| sample_uniform_sphere(model.mesh.dim(), rng)).collect(),
            model.clutter.kappa_prime(),
        )?,
        Some(ClutterSwap::Explicit { betas }) => {
            ClutterModel::new(betas.iter().map(|b| crate::vmf::normalized(b)).collect(), model.clutter.kappa_prime())?
        }
    };
    Ok(ShiftedModel {
        model: GenerativeModel { mesh, clutter },
        robust,
    })
}

/// A labeled scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub features: FeatureMap,
    pub pose: Pose,
    pub visible: Vec<bool>,
    pub foreground: Vec<bool>,
    /// Occluded pixels (a subset of the foreground).
    pub occlusion: Vec<bool>,
    pub seed: u64,
}

/// A target scene as seen by adaptation: features only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledScene {
    pub features: FeatureMap,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub pose: Pose,
    pub visible: Vec<bool>,
    pub foreground: Vec<bool>,
    pub occlusion: Vec<bool>,
}

/// Target annotations, kept apart from the scenes handed to adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct SealedGroundTruth {
    entries: Vec<GroundTruth>,
}

impl SealedGroundTruth {
    pub fn new(entries: Vec<GroundTruth>) -> Self {
        Self { entries }
    }

    /// Opens the seal; meant for evaluation only.
    pub fn reveal(&self) -> &[GroundTruth] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-attaches annotations to scenes for evaluation.
    pub fn label(&self, scenes: &[UnlabeledScene]) -> Result<Vec<Scene>> {
        if scenes.len() != self.entries.len() {
            return Err(Error::Data("scene and ground-truth counts differ".into()));
        }
        Ok(scenes
            .iter()
            .zip(&self.entries)
            .map(|(s, g)| Scene {
                features: s.features.clone(),
                pose: g.pose,
                visible: g.visible.clone(),
                foreground: g.foreground.clone(),
                occlusion: g.occlusion.clone(),
                seed: s.seed,
            })
            .collect())
    }
}

pub fn strip_labels(scenes: &[Scene]) -> (Vec<UnlabeledScene>, SealedGroundTruth) {
    let unlabeled = scenes
        .iter()
        .map(|s| UnlabeledScene {
            features: s.features.clone(),
            seed: s.seed,
        })
        .collect();
    let truth = scenes
        .iter()
        .map(|s| GroundTruth {
            pose: s.pose,
            visible: s.visible.clone(),
            foreground: s.foreground.clone(),
            occlusion: s.occlusion.clone(),
        })
        .collect();
    (unlabeled, SealedGroundTruth::new(truth))
}

struct Samplers {
    vertices: Vec<VmfSampler>,
    clutter: Vec<VmfSampler>,
}

impl Samplers {
    fn new(model: &GenerativeModel, data_kappa: f64) -> Result<Self> {
        let vertices = (0..model.mesh.vertex_count())
            .map(|r| VmfParams::new(model.mesh.feature(r).to_vec(), data_kappa).map(VmfSampler::new))
            .collect::<Result<Vec<_>>>()?;
        let clutter = model
            .clutter
            .betas()
            .iter()
            .map(|b| VmfParams::new(b.clone(), model.clutter.kappa_prime()).map(VmfSampler::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vertices, clutter })
    }
}

fn render_scene(model: &GenerativeModel, samplers: &Samplers, grid: &PoseGrid, cam: &Camera, seed: u64) -> Result<Scene> {
    let mut rng = rng_from(seed);
    let pose = grid.sample(&mut rng);
    let raster = rasterize(model.mesh.geometry(), &pose, cam)?;
    let dim = model.mesh.dim();
    let mut features = FeatureMap::zeros(cam.height, cam.width, dim);
    let mut buf = vec![0.0; dim];
    let mut foreground = vec![false; cam.pixel_count()];
    for (i, fg) in foreground.iter_mut().enumerate() {
        match raster.vertex_at(i) {
            Some(r) => {
                samplers.vertices[r].sample_into(&mut rng, &mut buf);
                *fg = true;
            }
            None => {
                let n = rng.random_range(0..samplers.clutter.len());
                samplers.clutter[n].sample_into(&mut rng, &mut buf);
            }
        }
        features.set_pixel(i, &buf);
    }
    Ok(Scene {
        features,
        pose,
        visible: raster.visibility().to_vec(),
        foreground,
        occlusion: vec![false; cam.pixel_count()],
        seed,
    })
}

/// Labeled scenes with vMF pixel noise of concentration `data_kappa` around
/// the vertex features and `kappa'` around a uniformly chosen clutter prototype.
pub fn generate_source(
    model: &GenerativeModel,
    grid: &PoseGrid,
    cam: &Camera,
    n: usize,
    data_kappa: f64,
    run_seed: u64,
) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Config("scene count must be >= 1".into()));
    }
    let samplers = Samplers::new(model, data_kappa)?;
    (0..n)
        .into_par_iter()
        .map(|i| render_scene(model, &samplers, grid, cam, derive(run_seed, TAG_SCENE, i as u64)))
        .collect()
}

/// Prototype whose cosine with every model feature is small, so occluded
/// pixels do not look like any vertex or clutter component.
pub fn occluder_prototype(model: &GenerativeModel, run_seed: u64) -> Vec<f64> {
    let mut rng = derived_rng(run_seed, TAG_OCCLUDER, 0);
    let refs: Vec<&[f64]> = (0..model.mesh.vertex_count())
        .map(|r| model.mesh.feature(r))
        .chain(model.clutter.betas().iter().map(|b| b.as_slice()))
        .collect();
    let worst = |u: &[f64]| refs.iter().map(|c| dot(u, c).abs()).fold(0.0, f64::max);
    let mut best = sample_uniform_sphere(model.mesh.dim(), &mut rng);
    let mut best_score = worst(&best);
    for _ in 0..2000 {
        if best_score < 0.5 {
            break;
        }
        let u = sample_uniform_sphere(model.mesh.dim(), &mut rng);
        let s = worst(&u);
        if s < best_score {
            best = u;
            best_score = s;
        }
    }
    best
}

/// Replaces a contiguous block of foreground pixels (a rectangle grown from a
/// random foreground seed) by occluder features. Returns the occlusion mask.
pub fn occlude(scene: &mut Scene, level: OcclusionLevel, occluder: &VmfSampler, rng: &mut Rng) -> Result<()> {
    let Some((lo, hi)) = level.bounds() else {
        return Ok(());
    };
    let (w, h) = (scene.features.width(), scene.features.height());
    let fg_pixels: Vec<usize> = (0..w * h).filter(|&i| scene.foreground[i]).collect();
    let n_fg = fg_pixels.len();
    let min_count = (lo * n_fg as f64 - 1e-9).ceil() as usize;
    let max_count = (hi * n_fg as f64 + 1e-9).floor() as usize;
    if n_fg == 0 || min_count > max_count || max_count == 0 {
        return Err(Error::Data(format!(
            "foreground of {n_fg} pixels is too small to occlude at {lo}-{hi}"
        )));
    }
    let frac = lo + rng.random::<f64>() * (hi - lo);
    let target = ((frac * n_fg as f64).round() as usize).clamp(min_count.max(1), max_count);

    let seed = fg_pixels[rng.random_range(0..n_fg)];
    let (mut x0, mut x1, mut y0, mut y1) = (seed % w, seed % w, seed / w, seed / w);
    let count_in = |x0: usize, x1: usize, y0: usize, y1: usize| {
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| y * w + x))
            .filter(|&i| scene.foreground[i])
            .count()
    };
    let mut prev = (x0, x1, y0, y1);
    let mut inside = count_in(x0, x1, y0, y1);
    while inside < target {
        let mut sides = Vec::with_capacity(4);
        if x0 > 0 {
            sides.push(0);
        }
        if x1 + 1 < w {
            sides.push(1);
        }
        if y0 > 0 {
            sides.push(2);
        }
        if y1 + 1 < h {
            sides.push(3);
        }
        let Some(&side) = sides.get(rng.random_range(0..sides.len().max(1))) else {
            return Err(Error::Data("occluder rectangle cannot grow further".into()));
        };
        prev = (x0, x1, y0, y1);
        match side {
            0 => x0 -= 1,
            1 => x1 += 1,
            2 => y0 -= 1,
            _ => y1 += 1,
        }
        inside = count_in(x0, x1, y0, y1);
    }
    let in_rect = |i: usize, r: (usize, usize, usize, usize)| {
        let (x, y) = (i % w, i / w);
        x >= r.0 && x <= r.1 && y >= r.2 && y <= r.3
    };
    let mut mask = vec![false; w * h];
    let mut chosen = 0;
    // Pixels of the previous rectangle first, then the newest strip in scan order.
    for &i in fg_pixels.iter().filter(|&&i| in_rect(i, prev)) {
        if inside == 1 && chosen == 0 && !in_rect(i, (x0, x1, y0, y1)) {
            continue;
        }
        if chosen < target {
            mask[i] = true;
            chosen += 1;
        }
    }
    for &i in fg_pixels.iter().filter(|&&i| in_rect(i, (x0, x1, y0, y1)) && !in_rect(i, prev)) {
        if chosen < target {
            mask[i] = true;
            chosen += 1;
        }
    }
    let mut buf = vec![0.0; scene.features.dim()];
    for i in (0..w * h).filter(|&i| mask[i]) {
        occluder.sample_into(rng, &mut buf);
        scene.features.set_pixel(i, &buf);
    }
    scene.occlusion = mask;
    Ok(())
}

fn apply_drift(f: &mut FeatureMap, m: &[Vec<f64>]) -> Result<()> {
    for i in 0..f.pixel_count() {
        let x = f.pixel_f64(i);
        let mut y: Vec<f64> = m.iter().map(|row| dot(row, &x)).collect();
        if normalize(&mut y) < 1e-12 {
            return Err(Error::Data("extractor drift maps a feature to zero".into()));
        }
        f.set_pixel(i, &y);
    }
    Ok(())
}

/// Target scenes and their sealed annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetData {
    pub scenes: Vec<UnlabeledScene>,
    pub truth: SealedGroundTruth,
}

impl TargetData {
    pub fn labeled(&self) -> Vec<Scene> {
        self.truth.label(&self.scenes).expect("counts agree by construction")
    }
}

/// Scenes from the shifted model, then occlusion, then extractor drift. With
/// an identity spec this reproduces [`generate_source`] for the same seed.
pub fn generate_target(
    target: &GenerativeModel,
    spec: &DomainSpec,
    grid: &PoseGrid,
    cam: &Camera,
    n: usize,
    run_seed: u64,
) -> Result<TargetData> {
    spec.validate(target.mesh.dim(), target.mesh.vertex_count())?;
    let mut scenes = generate_source(target, grid, cam, n, spec.data_kappa, run_seed)?;
    if spec.occlusion != OcclusionLevel::None {
        let occ = VmfSampler::new(VmfParams::new(occluder_prototype(target, run_seed), spec.data_kappa)?);
        scenes
            .par_iter_mut()
            .try_for_each(|s| occlude(s, spec.occlusion, &occ, &mut derived_rng(s.seed, TAG_OCCLUDE, 0)))?;
    }
    if let Some(m) = &spec.extractor_drift {
        scenes.par_iter_mut().try_for_each(|s| apply_drift(&mut s.features, m))?;
    }
    let (scenes, truth) = strip_labels(&scenes);
    Ok(TargetData { scenes, truth })
}
