//! Run configuration. Angles are degrees in the file and radians everywhere
//! else; the conversion happens here.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, MatchMode};
use crate::error::{Error, Result};
use crate::geometry::{make_cuboid_mesh, Camera, CuboidMesh};
use crate::inference::{AxisRange, InferenceOptions, PoseGrid};
use crate::seed::{derive, derived_rng};
use crate::synth::{random_true_model, shift_model, ClutterSwap, DomainSpec, GenerativeModel, OcclusionLevel, RobustSubset, ShiftedModel};
use crate::training::TrainingConfig;

pub const TAG_WORLD: u64 = 100;
pub const TAG_SHIFT: u64 = 101;
pub const TAG_SOURCE: u64 = 102;
pub const TAG_TARGET: u64 = 103;
pub const TAG_PROBE: u64 = 104;
pub const TAG_TRAIN: u64 = 105;
pub const TAG_ADAPT: u64 = 106;
pub const TAG_ELICIT: u64 = 107;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub dims: [f64; 3],
    pub verts_per_edge: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { dims: [2.0, 1.0, 1.2], verts_per_edge: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { focal: 100.0, width: 64, height: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeDeg {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl RangeDeg {
    fn to_axis(&self) -> AxisRange {
        AxisRange::new(self.min.to_radians(), self.max.to_radians(), self.count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub azimuth_deg: RangeDeg,
    pub elevation_deg: RangeDeg,
    pub theta_deg: RangeDeg,
    pub distance: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            azimuth_deg: RangeDeg { min: 0.0, max: 360.0, count: 24 },
            elevation_deg: RangeDeg { min: 0.0, max: 40.0, count: 3 },
            theta_deg: RangeDeg { min: -15.0, max: 15.0, count: 3 },
            distance: 5.0,
        }
    }
}

/// The generating ("true") category model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_clutter: usize,
    pub clutter_kappa: f64,
    /// Feature correlation between mirror-partner vertices, in [0, 1).
    pub symmetry: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_clutter: 5, clutter_kappa: 20.0, symmetry: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub n: usize,
    pub data_kappa: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { n: 200, data_kappa: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub n: usize,
    pub probe_n: usize,
    pub robust_fraction: f64,
    pub robust_subset: RobustSubset,
    pub perturb_min_deg: f64,
    pub perturb_max_deg: f64,
    pub data_kappa: f64,
    pub occlusion: OcclusionLevel,
    pub clutter_swap: Option<ClutterSwap>,
    pub extractor_drift: Option<Vec<Vec<f64>>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            n: 200,
            probe_n: 100,
            robust_fraction: 0.3,
            robust_subset: RobustSubset::Random,
            perturb_min_deg: 60.0,
            perturb_max_deg: 90.0,
            data_kappa: 20.0,
            occlusion: OcclusionLevel::None,
            clutter_swap: None,
            extractor_drift: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lambda: f64,
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fixed_kappa: bool,
    pub kappa: f64,
    pub n_clutter: usize,
    pub kmeans_restarts: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            lambda: t.lambda,
            mu: t.mu,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            fixed_kappa: true,
            kappa: 20.0,
            n_clutter: t.n_clutter,
            kmeans_restarts: t.kmeans_restarts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationSection {
    /// Share of in-domain observations that should clear each threshold.
    pub quantile: f64,
    pub alpha: f64,
    pub psi: f64,
    pub drop_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub recompute_kappa: bool,
    pub min_kappa_matches: usize,
    pub adaptive_batch: bool,
    pub target_coverage: f64,
    pub learning_rate: f64,
    pub loss_kappa: f64,
    pub match_mode: MatchMode,
    pub convergence_tol_deg: f64,
    pub convergence_window: usize,
    pub ratio_delta: f64,
    pub probe_every: usize,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        Self {
            quantile: 0.95,
            alpha: a.alpha,
            psi: a.psi,
            drop_threshold: a.drop_threshold,
            batch_size: a.batch_size,
            epochs: 30,
            recompute_kappa: a.recompute_kappa,
            min_kappa_matches: a.min_kappa_matches,
            adaptive_batch: a.adaptive_batch,
            target_coverage: a.target_coverage,
            learning_rate: a.learning_rate,
            loss_kappa: a.loss_kappa,
            match_mode: a.match_mode,
            convergence_tol_deg: a.convergence_tol.to_degrees(),
            convergence_window: a.convergence_window,
            ratio_delta: a.ratio_delta,
            probe_every: a.probe_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub k_init: usize,
    pub min_sep_deg: f64,
    pub fd_step_deg: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init_step_deg: f64,
    pub min_step_deg: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let o = InferenceOptions::default();
        Self {
            k_init: o.k_init,
            min_sep_deg: o.min_sep.to_degrees(),
            fd_step_deg: o.fd_step.to_degrees(),
            max_iters: o.max_iters,
            tol: o.tol,
            init_step_deg: o.init_step.to_degrees(),
            min_step_deg: o.min_step.to_degrees(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ratio_delta: f64,
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ratio_delta: 0.8, bins: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum PartitionSpec {
    Blocks(Vec<Vec<usize>>),
    Greedy { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremSection {
    pub omega: f64,
    pub m: usize,
    pub partition: PartitionSpec,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self { omega: 1.0, m: 1000, partition: PartitionSpec::Greedy { k: 4 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub mesh: MeshConfig,
    pub camera: CameraConfig,
    pub pose_grid: GridConfig,
    pub world: WorldConfig,
    pub source: SourceConfig,
    pub target: TargetConfig,
    pub training: TrainingSection,
    pub adaptation: AdaptationSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
    pub theorem: TheoremSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 8,
            mesh: MeshConfig::default(),
            camera: CameraConfig::default(),
            pose_grid: GridConfig::default(),
            world: WorldConfig::default(),
            source: SourceConfig::default(),
            target: TargetConfig::default(),
            training: TrainingSection::default(),
            adaptation: AdaptationSection::default(),
            inference: InferenceSection::default(),
            eval: EvalSection::default(),
            theorem: TheoremSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON config. An unknown key or a bad value is a
    /// config error naming the field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("dim must be >= 2".into()));
        }
        let geo = self.geometry()?;
        self.camera()?;
        self.grid().validate()?;
        if !(0.0..1.0).contains(&self.world.symmetry) || self.world.n_clutter == 0 || !(self.world.clutter_kappa > 0.0) {
            return Err(Error::Config("world: symmetry in [0, 1), n_clutter >= 1, clutter_kappa > 0".into()));
        }
        if self.source.n == 0 || !(self.source.data_kappa > 0.0) {
            return Err(Error::Config("source: n >= 1 and data_kappa > 0".into()));
        }
        if self.target.n == 0 {
            return Err(Error::Config("target: n >= 1".into()));
        }
        self.domain_spec().validate(self.dim, geo.vertex_count())?;
        self.training_config().validate()?;
        self.adaptation_config(vec![0.0; geo.vertex_count()]).validate(geo.vertex_count())?;
        if !(0.0..=1.0).contains(&self.adaptation.quantile) {
            return Err(Error::Config("adaptation.quantile must lie in [0, 1]".into()));
        }
        self.inference_options().validate()?;
        if self.eval.bins == 0 || !(-1.0..=1.0).contains(&self.eval.ratio_delta) {
            return Err(Error::Config("eval: bins >= 1 and ratio_delta in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.theorem.omega) {
            return Err(Error::Config("theorem.omega must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Arc<CuboidMesh>> {
        make_cuboid_mesh(self.mesh.dims, self.mesh.verts_per_edge)
            .map(Arc::new)
            .map_err(|e| Error::Config(format!("mesh: {e}")))
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::new(self.camera.focal, self.camera.width, self.camera.height).map_err(|e| Error::Config(format!("camera: {e}")))
    }

    pub fn grid(&self) -> PoseGrid {
        let g = &self.pose_grid;
        PoseGrid {
            azimuth: g.azimuth_deg.to_axis(),
            elevation: g.elevation_deg.to_axis(),
            theta: g.theta_deg.to_axis(),
            distance: g.distance,
        }
    }

    pub fn domain_spec(&self) -> DomainSpec {
        let t = &self.target;
        DomainSpec {
            robust_fraction: t.robust_fraction,
            robust_subset: t.robust_subset.clone(),
            perturb_min: t.perturb_min_deg.to_radians(),
            perturb_max: t.perturb_max_deg.to_radians(),
            data_kappa: t.data_kappa,
            occlusion: t.occlusion,
            clutter_swap: t.clutter_swap.clone(),
            extractor_drift: t.extractor_drift.clone(),
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            lambda: t.lambda,
            mu: t.mu,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            fixed_kappa: t.fixed_kappa.then_some(t.kappa),
            n_clutter: t.n_clutter,
            kmeans_restarts: t.kmeans_restarts,
            seed: derive(self.seed, TAG_TRAIN, 0),
        }
    }

    pub fn adaptation_config(&self, delta: Vec<f64>) -> AdaptationConfig {
        let a = &self.adaptation;
        AdaptationConfig {
            delta,
            alpha: a.alpha,
            psi: a.psi,
            drop_threshold: a.drop_threshold,
            batch_size: a.batch_size,
            epochs: a.epochs,
            recompute_kappa: a.recompute_kappa,
            min_kappa_matches: a.min_kappa_matches,
            adaptive_batch: a.adaptive_batch,
            target_coverage: a.target_coverage,
            learning_rate: a.learning_rate,
            loss_kappa: a.loss_kappa,
            match_mode: a.match_mode,
            convergence_tol: a.convergence_tol_deg.to_radians(),
            convergence_window: a.convergence_window,
            ratio_delta: a.ratio_delta,
            probe_every: a.probe_every,
            seed: derive(self.seed, TAG_ADAPT, 0),
        }
    }

    pub fn inference_options(&self) -> InferenceOptions {
        let i = &self.inference;
        InferenceOptions {
            k_init: i.k_init,
            min_sep: i.min_sep_deg.to_radians(),
            fd_step: i.fd_step_deg.to_radians(),
            max_iters: i.max_iters,
            tol: i.tol,
            init_step: i.init_step_deg.to_radians(),
            min_step: i.min_step_deg.to_radians(),
        }
    }

    /// The generating source model, a pure function of the run seed.
    pub fn true_model(&self) -> Result<GenerativeModel> {
        random_true_model(
            self.geometry()?,
            self.dim,
            self.world.n_clutter,
            self.world.clutter_kappa,
            self.world.symmetry,
            &mut derived_rng(self.seed, TAG_WORLD, 0),
        )
    }

    pub fn shifted_model(&self, source: &GenerativeModel) -> Result<ShiftedModel> {
        shift_model(source, &self.domain_spec(), &mut derived_rng(self.seed, TAG_SHIFT, 0))
    }
}

/// Where a default comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Paper(&'static str),
    Artifact,
}

/// Defaults with their provenance, in config-key order.
pub fn default_provenance() -> Vec<(&'static str, String, Provenance)> {
    let c = RunConfig::default();
    use Provenance::*;
    vec![
        ("dim", c.dim.to_string(), Artifact),
        ("mesh.verts_per_edge", c.mesh.verts_per_edge.to_string(), Artifact),
        ("camera", format!("{}x{} f={}", c.camera.width, c.camera.height, c.camera.focal), Artifact),
        ("world.n_clutter", c.world.n_clutter.to_string(), Artifact),
        ("source.data_kappa", c.source.data_kappa.to_string(), Artifact),
        ("target.robust_fraction", c.target.robust_fraction.to_string(), Artifact),
        ("target.perturb_deg", format!("[{}, {}]", c.target.perturb_min_deg, c.target.perturb_max_deg), Artifact),
        ("training.lambda", c.training.lambda.to_string(), Artifact),
        ("training.mu", c.training.mu.to_string(), Artifact),
        ("training.fixed_kappa", c.training.fixed_kappa.to_string(), Paper("fixing kappa to a constant is sufficient")),
        ("training.kappa", c.training.kappa.to_string(), Artifact),
        ("training.n_clutter", c.training.n_clutter.to_string(), Artifact),
        ("adaptation.quantile", c.adaptation.quantile.to_string(), Paper("majority (90-95%) of source domain features")),
        ("adaptation.alpha", c.adaptation.alpha.to_string(), Artifact),
        ("adaptation.psi", c.adaptation.psi.to_string(), Paper("5-10% of visible vertices")),
        ("adaptation.drop_threshold", c.adaptation.drop_threshold.to_string(), Artifact),
        ("adaptation.batch_size", c.adaptation.batch_size.to_string(), Paper("minimum batch size of 32 images")),
        ("adaptation.target_coverage", c.adaptation.target_coverage.to_string(), Paper("~80% of vertices can be updated")),
        ("adaptation.ratio_delta", c.adaptation.ratio_delta.to_string(), Paper("similarity threshold is .8")),
        ("adaptation.convergence_tol_deg", c.adaptation.convergence_tol_deg.to_string(), Artifact),
        ("inference.k_init", c.inference.k_init.to_string(), Artifact),
        ("inference.min_sep_deg", c.inference.min_sep_deg.to_string(), Artifact),
        ("eval.bins", c.eval.bins.to_string(), Artifact),
        ("theorem.omega", c.theorem.omega.to_string(), Artifact),
    ]
}
