//! Render-and-compare pose estimation: a pre-rasterized pose bank, greedy
//! multi-pose initialization, and finite-difference descent on the
//! reconstruction loss over (azimuth, elevation, theta).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, rasterize, Camera, CuboidMesh, Pose, RasterMap};
use crate::meshmodel::{combine_loss, ClutterModel, FeatureMap, NeuralMesh};

/// One pose axis sampled at `count` cell centres of `[min, max]` (radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisRange {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count }
    }

    pub fn value(&self, j: usize) -> f64 {
        self.min + (j as f64 + 0.5) * (self.max - self.min) / self.count as f64
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Uniform grid over viewpoints at a fixed camera distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub azimuth: AxisRange,
    pub elevation: AxisRange,
    pub theta: AxisRange,
    pub distance: f64,
}

impl PoseGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("azimuth", &self.azimuth), ("elevation", &self.elevation), ("theta", &self.theta)] {
            if a.count == 0 {
                return Err(Error::Config(format!("pose grid {name} count must be >= 1")));
            }
            if !(a.max >= a.min) {
                return Err(Error::Config(format!("pose grid {name} range is empty")));
            }
        }
        if self.elevation.min < -std::f64::consts::FRAC_PI_2 || self.elevation.max > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("pose grid elevation must lie in [-90, 90] degrees".into()));
        }
        if !(self.distance > 0.0) {
            return Err(Error::Config("pose grid distance must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.azimuth.count * self.elevation.count * self.theta.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid poses, azimuth slowest, theta fastest.
    pub fn poses(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.len());
        for a in 0..self.azimuth.count {
            for e in 0..self.elevation.count {
                for t in 0..self.theta.count {
                    out.push(Pose::new(
                        self.azimuth.value(a),
                        self.elevation.value(e),
                        self.theta.value(t),
                        self.distance,
                    ));
                }
            }
        }
        out
    }

    /// Pose drawn uniformly from the grid's continuous ranges.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Pose {
        let mut draw = |a: &AxisRange| a.min + rng.random::<f64>() * a.span();
        let az = draw(&self.azimuth);
        let el = draw(&self.elevation);
        let th = draw(&self.theta);
        Pose::new(az, el, th, self.distance)
    }
}

#[derive(Clone, Debug)]
pub struct BankEntry {
    pub pose: Pose,
    pub raster: RasterMap,
}

/// Rasterizations of a pose grid. Rendered features are implied by the
/// mesh, so only the correspondence maps are stored.
#[derive(Clone, Debug)]
pub struct PoseBank {
    grid: PoseGrid,
    entries: Vec<BankEntry>,
}

impl PoseBank {
    pub fn grid(&self) -> &PoseGrid {
        &self.grid
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_pose_bank(mesh: &CuboidMesh, cam: &Camera, grid: &PoseGrid) -> Result<PoseBank> {
    grid.validate()?;
    let entries = grid
        .poses()
        .into_par_iter()
        .map(|pose| rasterize(mesh, &pose, cam).map(|raster| BankEntry { pose, raster }))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseBank { grid: *grid, entries })
}

/// Optimizer settings. Angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub k_init: usize,
    pub min_sep: f64,
    pub fd_step: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// First trial step length along the normalized descent direction.
    pub init_step: f64,
    /// The line search gives up once the trial step falls below this.
    pub min_step: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            k_init: 3,
            min_sep: 30f64.to_radians(),
            fd_step: 0.5f64.to_radians(),
            max_iters: 200,
            tol: 1e-6,
            init_step: 4f64.to_radians(),
            min_step: 0.05f64.to_radians(),
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.k_init) {
            return Err(Error::Config(format!("k_init must be in 1..=5, got {}", self.k_init)));
        }
        if !(self.fd_step > 0.0) || !(self.init_step > 0.0) || !(self.min_step > 0.0) {
            return Err(Error::Config("optimizer step sizes must be positive".into()));
        }
        if !(self.min_sep >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("min_sep and tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Caches every pixel-vertex cosine and the best clutter match per pixel so a
/// reconstruction loss costs one lookup per pixel.
pub struct SceneScorer<'a> {
    mesh: &'a NeuralMesh,
    cam: Camera,
    sim: Vec<f32>,
    bg: Vec<f64>,
    bg_total: f64,
}

impl<'a> SceneScorer<'a> {
    pub fn new(f: &FeatureMap, mesh: &'a NeuralMesh, clutter: &ClutterModel, cam: &Camera) -> Result<Self> {
        if f.dim() != mesh.dim() || clutter.dim() != mesh.dim() {
            return Err(Error::InvalidInput("feature, mesh and clutter dimensions differ".into()));
        }
        if f.height() != cam.height || f.width() != cam.width {
            return Err(Error::InvalidInput(format!(
                "feature map is {}x{}, camera lattice is {}x{}",
                f.height(),
                f.width(),
                cam.height,
                cam.width
            )));
        }
        let r_count = mesh.vertex_count();
        let d = mesh.dim();
        let feats: Vec<f32> = (0..r_count).flat_map(|r| mesh.feature(r).iter().map(|&x| x as f32)).collect();
        let mut sim = vec![0f32; f.pixel_count() * r_count];
        let mut bg = Vec::with_capacity(f.pixel_count());
        for i in 0..f.pixel_count() {
            let px = f.pixel(i);
            let row = &mut sim[i * r_count..(i + 1) * r_count];
            for (r, out) in row.iter_mut().enumerate() {
                let c = &feats[r * d..(r + 1) * d];
                *out = px.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            bg.push(clutter.best_match(px));
        }
        let bg_total = bg.iter().sum();
        Ok(Self {
            mesh,
            cam: *cam,
            sim,
            bg,
            bg_total,
        })
    }

    pub fn mesh(&self) -> &NeuralMesh {
        self.mesh
    }

    pub fn camera(&self) -> &Camera {
        &self.cam
    }

    /// Cosine between pixel `i` and vertex `r` (f32 precision).
    pub fn similarity(&self, i: usize, r: usize) -> f64 {
        self.sim[i * self.mesh.vertex_count() + r] as f64
    }

    pub fn background_match(&self, i: usize) -> f64 {
        self.bg[i]
    }

    pub fn loss(&self, raster: &RasterMap) -> f64 {
        let r_count = self.mesh.vertex_count();
        let mut fg_sum = 0.0;
        let mut fg_n = 0;
        let mut bg_fg = 0.0;
        for (i, r) in raster.foreground() {
            fg_sum += self.sim[i * r_count + r] as f64;
            bg_fg += self.bg[i];
            fg_n += 1;
        }
        let bg_n = self.bg.len() - fg_n;
        combine_loss(fg_sum, fg_n, self.bg_total - bg_fg, bg_n)
    }

    /// Rasterizes and scores; degenerate projections score `+inf`.
    pub fn pose_loss(&self, pose: &Pose) -> (f64, Option<RasterMap>) {
        match rasterize(self.mesh.geometry(), pose, &self.cam) {
            Ok(raster) => (self.loss(&raster), Some(raster)),
            Err(_) => (f64::INFINITY, None),
        }
    }
}

/// Greedy selection by ascending loss, skipping bank poses within `min_sep`
/// of an already selected one.
pub fn select_initial_poses(scorer: &SceneScorer, bank: &PoseBank, k: usize, min_sep: f64) -> Vec<Pose> {
    let losses: Vec<f64> = bank.entries().iter().map(|e| scorer.loss(&e.raster)).collect();
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut chosen: Vec<Pose> = Vec::with_capacity(k);
    let mut rots = Vec::with_capacity(k);
    for idx in order {
        if chosen.len() == k {
            break;
        }
        let pose = bank.entries()[idx].pose;
        let rot = pose.rotation();
        if rots.iter().all(|s| geodesic_distance(s, &rot) >= min_sep) {
            chosen.push(pose);
            rots.push(rot);
        }
    }
    chosen
}

#[derive(Clone, Debug)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub loss: f64,
    pub init_pose: Pose,
    /// Rasterization at the final pose.
    pub raster: RasterMap,
    pub iterations: usize,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Central finite-difference gradient of the loss in (azimuth, elevation, theta).
pub fn fd_gradient(scorer: &SceneScorer, pose: &Pose, h: f64) -> [f64; 3] {
    let a = pose.angles();
    let mut g = [0.0; 3];
    for (k, gk) in g.iter_mut().enumerate() {
        let mut plus = a;
        let mut minus = a;
        plus[k] += h;
        minus[k] -= h;
        let lp = scorer.pose_loss(&pose.with_angles(plus)).0;
        let lm = scorer.pose_loss(&pose.with_angles(minus)).0;
        *gk = if lp.is_finite() && lm.is_finite() { (lp - lm) / (2.0 * h) } else { 0.0 };
    }
    g
}

pub fn optimize_with_scorer(scorer: &SceneScorer, init: &Pose, opts: &InferenceOptions) -> Result<PoseEstimate> {
    let (init_loss, raster) = scorer.pose_loss(init);
    let mut raster = raster.ok_or_else(|| {
        Error::DegenerateProjection("initial pose projects the mesh behind the camera".into())
    })?;
    let mut pose = *init;
    let mut loss = init_loss;
    let mut history = vec![loss];
    let mut step = opts.init_step;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let g = fd_gradient(scorer, &pose, opts.fd_step);
        let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let a = pose.angles();
        let mut accepted = None;
        while step >= opts.min_step {
            let cand = pose.with_angles([
                a[0] - step * g[0] / gn,
                a[1] - step * g[1] / gn,
                a[2] - step * g[2] / gn,
            ]);
            let (l, r) = scorer.pose_loss(&cand);
            if l.is_finite() && l < loss {
                accepted = Some((cand, l, r.expect("finite loss has a raster")));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, l, r)) = accepted else { break };
        let gain = loss - l;
        pose = cand;
        loss = l;
        raster = r;
        history.push(loss);
        step = (step * 1.5).min(opts.init_step * 4.0);
        if gain < opts.tol {
            break;
        }
    }
    Ok(PoseEstimate {
        pose,
        loss,
        init_pose: *init,
        raster,
        iterations,
        loss_history: history,
    })
}

pub fn optimize_pose(
    f: &FeatureMap,
    mesh: &NeuralMesh,
    clutter: &ClutterModel,
    cam: &Camera,
    init: &Pose,
    opts: &InferenceOptions,
) -> Result<PoseEstimate> {
    let scorer = SceneScorer::new(f, mesh, clutter, cam)?;
    optimize_with_scorer(&scorer, init, opts)
}

/// All refined candidates of one scene; `best` has the lowest loss (first on ties).
#[derive(Clone, Debug)]
pub struct MultiPoseEstimate {
    pub candidates: Vec<PoseEstimate>,
    pub best: usize,
}

impl MultiPoseEstimate {
    pub fn best(&self) -> &PoseEstimate {
        &self.candidates[self.best]
    }
}

pub fn estimate_with_scorer(scorer: &SceneScorer, bank: &PoseBank, opts: &InferenceOptions) -> Result<MultiPoseEstimate> {
    let inits = select_initial_poses(scorer, bank, opts.k_init, opts.min_sep);
    let results: Vec<Result<PoseEstimate>> = inits
        .par_iter()
        .map(|init| optimize_with_scorer(scorer, init, opts))
        .collect();
    let mut candidates = Vec::with_capacity(results.len());
    let mut last_err = None;
    for r in results {
        match r {
            Ok(e) => candidates.push(e),
            Err(e) => last_err = Some(e),
        }
    }
    if candidates.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::InvalidInput("pose bank is empty".into())));
    }
    let mut best = 0;
    for (j, c) in candidates.iter().enumerate() {
        if c.loss < candidates[best].loss {
            best = j;
        }
    }
    Ok(MultiPoseEstimate { candidates, best })
}

pub fn estimate_pose(
    f: &FeatureMap,
    mesh: &NeuralMesh,
    clutter: &ClutterModel,
    cam: &Camera,
    bank: &PoseBank,
    opts: &InferenceOptions,
) -> Result<MultiPoseEstimate> {
    let scorer = SceneScorer::new(f, mesh, clutter, cam)?;
    estimate_with_scorer(&scorer, bank, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_cuboid_mesh;
    use crate::meshmodel::{reconstruction_loss, render_feature_map, RenderResult};
    use crate::seed::rng_from;
    use crate::vmf::sample_uniform_sphere;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn setup(dim: usize) -> (NeuralMesh, ClutterModel, Camera, PoseGrid) {
        let mut rng = rng_from(21);
        let geo = Arc::new(make_cuboid_mesh([1.6, 0.8, 1.0], 4).unwrap());
        let feats = (0..geo.vertex_count()).map(|_| sample_uniform_sphere(dim, &mut rng)).collect();
        let mesh = NeuralMesh::new(geo.clone(), feats, vec![20.0; geo.vertex_count()]).unwrap();
        let clutter = ClutterModel::new((0..3).map(|_| sample_uniform_sphere(dim, &mut rng)).collect(), 20.0).unwrap();
        let cam = Camera::new(40.0, 32, 32).unwrap();
        let grid = PoseGrid {
            azimuth: AxisRange::new(0.0, 2.0 * PI, 12),
            elevation: AxisRange::new(0.0, 40f64.to_radians(), 2),
            theta: AxisRange::new(-10f64.to_radians(), 10f64.to_radians(), 1),
            distance: 5.0,
        };
        (mesh, clutter, cam, grid)
    }

    fn exact(rr: &RenderResult, clutter: &ClutterModel) -> FeatureMap {
        let mut f = rr.rendered.clone();
        for i in 0..f.pixel_count() {
            if !rr.raster.is_foreground(i) {
                f.set_pixel(i, &clutter.betas()[0]);
            }
        }
        f
    }

    #[test]
    fn grid_counts_and_determinism() {
        let (mesh, _, cam, mut grid) = setup(4);
        grid.elevation.count = 3;
        let a = build_pose_bank(mesh.geometry(), &cam, &grid).unwrap();
        let b = build_pose_bank(mesh.geometry(), &cam, &grid).unwrap();
        assert_eq!(a.len(), 36);
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.raster, y.raster);
        }
    }

    #[test]
    fn scorer_matches_direct_loss() {
        let (mesh, clutter, cam, _) = setup(6);
        let mut rng = rng_from(3);
        let data: Vec<f32> = (0..cam.pixel_count()).flat_map(|_| sample_uniform_sphere(6, &mut rng)).map(|x| x as f32).collect();
        let f = FeatureMap::new(32, 32, 6, data).unwrap();
        let scorer = SceneScorer::new(&f, &mesh, &clutter, &cam).unwrap();
        let pose = Pose::from_degrees(33.0, 12.0, 4.0, 5.0);
        let rr = render_feature_map(&mesh, &pose, &cam).unwrap();
        assert!((scorer.loss(&rr.raster) - reconstruction_loss(&f, &rr, &clutter)).abs() < 1e-5);
    }

    #[test]
    fn exact_bank_pose_is_selected_first() {
        let (mesh, clutter, cam, grid) = setup(8);
        let bank = build_pose_bank(mesh.geometry(), &cam, &grid).unwrap();
        let target = bank.entries()[7].pose;
        let f = exact(&render_feature_map(&mesh, &target, &cam).unwrap(), &clutter);
        let scorer = SceneScorer::new(&f, &mesh, &clutter, &cam).unwrap();
        let picks = select_initial_poses(&scorer, &bank, 3, 30f64.to_radians());
        assert_eq!(picks[0], target);
        for i in 0..picks.len() {
            for j in 0..i {
                assert!(geodesic_distance(&picks[i].rotation(), &picks[j].rotation()) >= 30f64.to_radians());
            }
        }
        assert_eq!(select_initial_poses(&scorer, &bank, 1, 0.0), vec![target]);
    }

    #[test]
    fn fixed_point_at_exact_pose() {
        let (mesh, clutter, cam, _) = setup(8);
        let g = Pose::from_degrees(50.0, 20.0, 3.0, 5.0);
        let f = exact(&render_feature_map(&mesh, &g, &cam).unwrap(), &clutter);
        let est = optimize_pose(&f, &mesh, &clutter, &cam, &g, &InferenceOptions::default()).unwrap();
        assert_eq!(est.pose, g);
        assert!(est.loss.abs() < 1e-6);
    }

    #[test]
    fn refinement_recovers_perturbed_pose() {
        let (mesh, clutter, _, _) = setup(16);
        let cam = Camera::new(80.0, 64, 64).unwrap();
        let g = Pose::from_degrees(130.0, 20.0, 5.0, 5.0);
        let f = exact(&render_feature_map(&mesh, &g, &cam).unwrap(), &clutter);
        let init = Pose::from_degrees(140.0, 30.0, 15.0, 5.0);
        let est = optimize_pose(&f, &mesh, &clutter, &cam, &init, &InferenceOptions::default()).unwrap();
        let err = geodesic_distance(&est.pose.rotation(), &g.rotation()).to_degrees();
        assert!(err < 1.0, "error {err} deg");
        assert!(est.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(est.loss <= est.loss_history[0]);
    }

    #[test]
    fn best_candidate_has_min_loss() {
        let (mesh, clutter, cam, grid) = setup(8);
        let bank = build_pose_bank(mesh.geometry(), &cam, &grid).unwrap();
        let mut rng = rng_from(5);
        let data: Vec<f32> = (0..cam.pixel_count()).flat_map(|_| sample_uniform_sphere(8, &mut rng)).map(|x| x as f32).collect();
        let f = FeatureMap::new(32, 32, 8, data).unwrap();
        let est = estimate_pose(&f, &mesh, &clutter, &cam, &bank, &InferenceOptions::default()).unwrap();
        let min = est.candidates.iter().map(|c| c.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(est.best().loss, min);
    }
}
