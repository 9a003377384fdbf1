//! Vertex partitions, per-block pseudo-label subsets and the elicited
//! target domain assembled from them.
//!
//! Constraints are only imposed on vertices visible in a scene.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RasterMap;
use crate::meshmodel::{FeatureMap, NeuralMesh};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexPartition {
    subsets: Vec<Vec<usize>>,
}

impl VertexPartition {
    /// Validates that the blocks are non-empty, disjoint and cover `0..vertex_count`.
    pub fn new(subsets: Vec<Vec<usize>>, vertex_count: usize) -> Result<Self> {
        if subsets.is_empty() || subsets.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("partition needs K >= 1 non-empty blocks".into()));
        }
        let mut seen = vec![false; vertex_count];
        for &r in subsets.iter().flatten() {
            if r >= vertex_count || seen[r] {
                return Err(Error::InvalidInput(format!("vertex {r} out of range or in two blocks")));
            }
            seen[r] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("vertex {r} is in no block")));
        }
        Ok(Self { subsets })
    }

    pub fn trivial(vertex_count: usize) -> Result<Self> {
        Self::new(vec![(0..vertex_count).collect()], vertex_count)
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn block(&self, k: usize) -> &[usize] {
        &self.subsets[k]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn vertex_count(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEntry {
    pub feature: Vec<f64>,
    pub similarity: f64,
    pub accepted: bool,
}

/// Visible vertices of one scene and their observed features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSample {
    pub vertices: BTreeMap<usize, SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSampleSet {
    vertex_count: usize,
    delta: Vec<f64>,
    samples: Vec<LabeledSample>,
}

fn accepted(sim: f64, delta: &[f64], r: usize) -> bool {
    sim > delta[r]
}

impl LabeledSampleSet {
    /// `scenes[s]` maps each visible vertex to `(feature, similarity)`.
    pub fn new(vertex_count: usize, delta: Vec<f64>, scenes: Vec<BTreeMap<usize, (Vec<f64>, f64)>>) -> Result<Self> {
        if delta.len() != vertex_count {
            return Err(Error::InvalidInput("delta length must equal the vertex count".into()));
        }
        let samples = scenes
            .into_iter()
            .map(|m| {
                let vertices = m
                    .into_iter()
                    .map(|(r, (feature, similarity))| {
                        if r >= vertex_count {
                            return Err(Error::InvalidInput(format!("vertex {r} out of range")));
                        }
                        Ok((r, SampleEntry { feature, similarity, accepted: accepted(similarity, &delta, r) }))
                    })
                    .collect::<Result<_>>()?;
                Ok(LabeledSample { vertices })
            })
            .collect::<Result<_>>()?;
        Ok(Self { vertex_count, delta, samples })
    }

    /// Builds the set from feature maps and the rasterizations of their
    /// (estimated or true) poses, reading each visible vertex at its pixel.
    pub fn from_rasters(features: &[&FeatureMap], rasters: &[&RasterMap], mesh: &NeuralMesh, delta: Vec<f64>) -> Result<Self> {
        if features.len() != rasters.len() {
            return Err(Error::InvalidInput("one raster per feature map required".into()));
        }
        let scenes = features
            .iter()
            .zip(rasters)
            .map(|(f, raster)| {
                raster
                    .visible_vertices()
                    .filter_map(|r| {
                        let i = raster.vertex_pixel(r)?;
                        Some((r, (f.pixel_f64(i), f.dot_pixel(i, mesh.feature(r)))))
                    })
                    .collect()
            })
            .collect();
        Self::new(mesh.vertex_count(), delta, scenes)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn block_passes(sample: &LabeledSample, block: &[usize], delta: &[f64]) -> bool {
    let mut any = false;
    for r in block {
        if let Some(e) = sample.vertices.get(r) {
            if !accepted(e.similarity, delta, *r) {
                return false;
            }
            any = true;
        }
    }
    any
}

/// Scenes in which every visible vertex of block `k` clears its threshold
/// (and at least one vertex of the block is visible).
pub fn k_delta_subset(set: &LabeledSampleSet, part: &VertexPartition, k: usize, delta: &[f64]) -> Result<Vec<usize>> {
    if k >= part.k() {
        return Err(Error::InvalidInput(format!("block {k} out of range for K = {}", part.k())));
    }
    Ok((0..set.len()).filter(|&s| block_passes(&set.samples[s], part.block(k), delta)).collect())
}

/// Scenes whose accepted count exceeds `omega` times the visible count;
/// `omega = 1` demands every visible vertex.
pub fn global_pseudo_label_subset(set: &LabeledSampleSet, delta: &[f64], omega: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidInput("omega must lie in [0, 1]".into()));
    }
    Ok((0..set.len())
        .filter(|&s| {
            let v = &set.samples[s].vertices;
            let acc = v.iter().filter(|(r, e)| accepted(e.similarity, delta, **r)).count();
            !v.is_empty() && (acc as f64 > omega * v.len() as f64 || acc == v.len())
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub per_k_counts: Vec<usize>,
    pub satisfied: bool,
}

/// Per-block subset sizes; satisfied iff every block has a supporting scene.
pub fn check_support(set: &LabeledSampleSet, part: &VertexPartition, delta: &[f64]) -> SupportReport {
    let per_k_counts: Vec<usize> = (0..part.k())
        .map(|k| (0..set.len()).filter(|&s| block_passes(&set.samples[s], part.block(k), delta)).count())
        .collect();
    let satisfied = per_k_counts.iter().all(|&c| c > 0);
    SupportReport { per_k_counts, satisfied }
}

/// One elicited sample: the scene drawn for each block and the carried features.
#[derive(Clone, Debug, PartialEq)]
pub struct ElicitedSample {
    pub sources: Vec<usize>,
    pub vertices: BTreeMap<usize, SampleEntry>,
}

impl ElicitedSample {
    pub fn passes(&self, delta: &[f64]) -> bool {
        self.vertices.iter().all(|(r, e)| accepted(e.similarity, delta, *r))
    }
}

/// Draws `m` samples, each combining for every block the block's features
/// from a scene drawn uniformly from that block's subset.
pub fn elicit_domain(
    set: &LabeledSampleSet,
    part: &VertexPartition,
    delta: &[f64],
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<ElicitedSample>> {
    let report = check_support(set, part, delta);
    if !report.satisfied {
        return Err(Error::Assumption(format!(
            "piece-wise support fails; per-block counts {:?}",
            report.per_k_counts
        )));
    }
    let subsets: Vec<Vec<usize>> = (0..part.k()).map(|k| k_delta_subset(set, part, k, delta)).collect::<Result<_>>()?;
    Ok((0..m)
        .map(|_| {
            let mut sources = Vec::with_capacity(part.k());
            let mut vertices = BTreeMap::new();
            for (k, sub) in subsets.iter().enumerate() {
                let s = sub[rng.random_range(0..sub.len())];
                sources.push(s);
                for r in part.block(k) {
                    if let Some(e) = set.samples[s].vertices.get(r) {
                        vertices.insert(*r, e.clone());
                    }
                }
            }
            ElicitedSample { sources, vertices }
        })
        .collect())
}

/// Groups vertices into `k` blocks by the correlation of their acceptance
/// patterns across scenes: farthest-point seeds, then nearest-seed assignment.
pub fn greedy_partition(set: &LabeledSampleSet, delta: &[f64], k: usize) -> Result<VertexPartition> {
    let r_count = set.vertex_count();
    if k == 0 || k > r_count {
        return Err(Error::InvalidInput(format!("K must lie in 1..={r_count}")));
    }
    let pattern: Vec<Vec<Option<f64>>> = (0..r_count)
        .map(|r| {
            set.samples
                .iter()
                .map(|s| s.vertices.get(&r).map(|e| if accepted(e.similarity, delta, r) { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let corr = |a: usize, b: usize| -> f64 {
        let pairs: Vec<(f64, f64)> = pattern[a].iter().zip(&pattern[b]).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
        if pairs.len() < 2 {
            return 0.0;
        }
        let n = pairs.len() as f64;
        let (ma, mb) = pairs.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / n, acc.1 + p.1 / n));
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        if saa == 0.0 || sbb == 0.0 {
            return if saa == sbb && ma == mb { 1.0 } else { 0.0 };
        }
        sab / (saa * sbb).sqrt()
    };
    let mut seeds = vec![0usize];
    while seeds.len() < k {
        let next = (0..r_count)
            .filter(|r| !seeds.contains(r))
            .max_by(|&a, &b| {
                let da = seeds.iter().map(|&s| 1.0 - corr(a, s)).fold(f64::INFINITY, f64::min);
                let db = seeds.iter().map(|&s| 1.0 - corr(b, s)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= vertex count");
        seeds.push(next);
    }
    let mut blocks = vec![Vec::new(); k];
    for r in 0..r_count {
        let j = match seeds.iter().position(|&s| s == r) {
            Some(j) => j,
            None => (0..k)
                .max_by(|&a, &b| corr(r, seeds[a]).total_cmp(&corr(r, seeds[b])).then(b.cmp(&a)))
                .expect("k >= 1"),
        };
        blocks[j].push(r);
    }
    VertexPartition::new(blocks, r_count)
}
