//! On-disk formats: datasets, sealed annotations, models and reports.
//!
//! A dataset directory holds `manifest.json`, one little-endian `f32` file
//! per scene under `scenes/`, and the annotations in `ground_truth.json`,
//! which adaptation never opens.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CuboidMesh, MeshJson, Pose};
use crate::meshmodel::{ClutterModel, FeatureMap, NeuralMesh};
use crate::synth::{GroundTruth, Scene, SealedGroundTruth, UnlabeledScene};
use crate::training::{FeatureExtractor, HistogramBin, Metrics, Model, SceneResult};

pub const MANIFEST: &str = "manifest.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Echo of the generating configuration.
    pub spec: serde_json::Value,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TruthJson {
    azimuth_rad: f64,
    elevation_rad: f64,
    theta_rad: f64,
    distance: f64,
    visible: Vec<usize>,
    foreground: Vec<usize>,
    occlusion: Vec<usize>,
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

fn mask(idx: &[usize], len: usize) -> Result<Vec<bool>> {
    let mut m = vec![false; len];
    for &i in idx {
        *m.get_mut(i).ok_or_else(|| Error::Data(format!("mask index {i} out of range")))? = true;
    }
    Ok(m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_map(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(f.data().len() * 4);
    for x in f.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_map(path: &Path, h: usize, w: usize, d: usize) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.len() != h * w * d * 4 {
        return Err(Error::Data(format!("{}: expected {} bytes, found {}", path.display(), h * w * d * 4, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    FeatureMap::new(h, w, d, data).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes scenes and, separately, their annotations.
pub fn write_dataset(dir: &Path, kind: &str, seed: u64, spec: serde_json::Value, scenes: &[UnlabeledScene], truth: &SealedGroundTruth) -> Result<Manifest> {
    if scenes.is_empty() {
        return Err(Error::Data("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir.join("scenes"))?;
    let first = &scenes[0].features;
    let mut entries = Vec::with_capacity(scenes.len());
    for (k, s) in scenes.iter().enumerate() {
        let file = format!("scenes/{k:05}.f32");
        write_map(&dir.join(&file), &s.features)?;
        entries.push(SceneEntry { file, seed: s.seed });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        seed,
        n: scenes.len(),
        height: first.height(),
        width: first.width(),
        dim: first.dim(),
        spec,
        scenes: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    let gt: Vec<TruthJson> = truth
        .reveal()
        .iter()
        .map(|g| {
            let [azimuth_rad, elevation_rad, theta_rad] = g.pose.angles();
            TruthJson {
                azimuth_rad,
                elevation_rad,
                theta_rad,
                distance: g.pose.distance(),
                visible: indices(&g.visible),
                foreground: indices(&g.foreground),
                occlusion: indices(&g.occlusion),
            }
        })
        .collect();
    write_json(&dir.join(GROUND_TRUTH), &gt)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

/// Reads scene features only.
pub fn read_unlabeled(dir: &Path) -> Result<(Manifest, Vec<UnlabeledScene>)> {
    let m = read_manifest(dir)?;
    let scenes = m
        .scenes
        .iter()
        .map(|e| {
            Ok(UnlabeledScene {
                features: read_map(&dir.join(&e.file), m.height, m.width, m.dim)?,
                seed: e.seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok((m, scenes))
}

/// Opens the annotation file. `vertex_count` sizes the visibility masks.
pub fn read_truth(dir: &Path, vertex_count: usize) -> Result<SealedGroundTruth> {
    let m = read_manifest(dir)?;
    let raw: Vec<TruthJson> = read_json(&dir.join(GROUND_TRUTH))?;
    let pixels = m.height * m.width;
    let entries = raw
        .iter()
        .map(|t| {
            Ok(GroundTruth {
                pose: Pose::new(t.azimuth_rad, t.elevation_rad, t.theta_rad, t.distance),
                visible: mask(&t.visible, vertex_count)?,
                foreground: mask(&t.foreground, pixels)?,
                occlusion: mask(&t.occlusion, pixels)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SealedGroundTruth::new(entries))
}

pub fn read_labeled(dir: &Path, vertex_count: usize) -> Result<Vec<Scene>> {
    let (_, scenes) = read_unlabeled(dir)?;
    read_truth(dir, vertex_count)?.label(&scenes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub geometry: MeshJson,
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub kappas: Vec<f64>,
    pub clutter_betas: Vec<Vec<f64>>,
    pub clutter_kappa: f64,
    pub extractor: Vec<f64>,
    /// Training settings echoed for provenance, e.g. the fixed kappa.
    pub meta: serde_json::Value,
}

pub fn model_to_json(model: &Model, meta: serde_json::Value) -> ModelJson {
    let mesh = &model.mesh;
    ModelJson {
        geometry: mesh.geometry().to_json(),
        dim: mesh.dim(),
        features: (0..mesh.vertex_count()).map(|r| mesh.feature(r).to_vec()).collect(),
        kappas: mesh.kappas().to_vec(),
        clutter_betas: model.clutter.betas().to_vec(),
        clutter_kappa: model.clutter.kappa_prime(),
        extractor: model.extractor.matrix().to_vec(),
        meta,
    }
}

/// Rebuilds a model, re-checking every invariant.
pub fn model_from_json(json: &ModelJson) -> Result<Model> {
    let geometry = Arc::new(CuboidMesh::from_json(&json.geometry)?);
    Ok(Model {
        mesh: NeuralMesh::new(geometry, json.features.clone(), json.kappas.clone())?,
        clutter: ClutterModel::new(json.clutter_betas.clone(), json.clutter_kappa)?,
        extractor: FeatureExtractor::new(json.dim, json.extractor.clone())?,
    })
}

pub fn write_model(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    write_json(path, &model_to_json(model, meta))
}

pub fn read_model(path: &Path) -> Result<(Model, serde_json::Value)> {
    let json: ModelJson = read_json(path)?;
    let model = model_from_json(&json).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((model, json.meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsJson {
    pub acc_pi6: f64,
    pub acc_pi18: f64,
    pub median_error_deg: f64,
    pub n: usize,
}

impl From<Metrics> for MetricsJson {
    fn from(m: Metrics) -> Self {
        Self {
            acc_pi6: m.acc_pi6,
            acc_pi18: m.acc_pi18,
            median_error_deg: m.median_error.to_degrees(),
            n: m.n,
        }
    }
}

#[derive(Serialize)]
struct SceneRow {
    index: usize,
    error_deg: f64,
    pred_azimuth_deg: Option<f64>,
    pred_elevation_deg: Option<f64>,
    pred_theta_deg: Option<f64>,
    gt_azimuth_deg: f64,
    gt_elevation_deg: f64,
    gt_theta_deg: f64,
    robust_ratio: Option<f64>,
}

pub fn write_scene_csv<W: Write>(w: W, results: &[SceneResult]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for (index, r) in results.iter().enumerate() {
        let p = r.predicted.map(|p| p.angles().map(f64::to_degrees));
        let g = r.truth.angles().map(f64::to_degrees);
        wr.serialize(SceneRow {
            index,
            error_deg: r.error.to_degrees(),
            pred_azimuth_deg: p.map(|a| a[0]),
            pred_elevation_deg: p.map(|a| a[1]),
            pred_theta_deg: p.map(|a| a[2]),
            gt_azimuth_deg: g[0],
            gt_elevation_deg: g[1],
            gt_theta_deg: g[2],
            robust_ratio: r.robust_ratio,
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// One row per bin; empty bins leave `ratio` blank.
pub fn write_histogram_csv<W: Write>(w: W, bins: &[HistogramBin]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin_center_deg", "ratio", "count"])?;
    for b in bins {
        wr.write_record([
            b.center_deg.to_string(),
            b.ratio.map(|r| r.to_string()).unwrap_or_default(),
            b.count.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
