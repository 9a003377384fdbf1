#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use meshsva::geometry::{make_cuboid_mesh, rasterize, Camera, CuboidMesh, Pose};
use meshsva::inference::{build_pose_bank, AxisRange, PoseBank, PoseGrid};
use meshsva::meshmodel::{paint, FeatureMap};
use meshsva::seed::rng_from;
use meshsva::synth::{random_true_model, GenerativeModel, Scene};

pub struct World {
    pub geo: Arc<CuboidMesh>,
    pub model: GenerativeModel,
    pub grid: PoseGrid,
    pub cam: Camera,
}

impl World {
    pub fn bank(&self) -> PoseBank {
        build_pose_bank(&self.geo, &self.cam, &self.grid).unwrap()
    }
}

/// A 98-vertex box seen by a 64x64 camera, the harness used by the heavier tests.
pub fn standard_world(dim: usize, seed: u64) -> World {
    let geo = Arc::new(make_cuboid_mesh([2.0, 1.0, 1.2], 5).unwrap());
    let model = random_true_model(geo.clone(), dim, 5, 20.0, 0.0, &mut rng_from(seed)).unwrap();
    World { geo, model, grid: standard_grid(), cam: Camera::new(100.0, 64, 64).unwrap() }
}

pub fn standard_grid() -> PoseGrid {
    PoseGrid {
        azimuth: AxisRange::new(0.0, 2.0 * PI, 24),
        elevation: AxisRange::new(0.0, 40f64.to_radians(), 3),
        theta: AxisRange::new(-15f64.to_radians(), 15f64.to_radians(), 3),
        distance: 5.0,
    }
}

/// A small, fast world for unit-scale integration checks.
pub fn small_world(dim: usize, seed: u64) -> World {
    let geo = Arc::new(make_cuboid_mesh([1.6, 0.8, 1.0], 4).unwrap());
    let model = random_true_model(geo.clone(), dim, 3, 20.0, 0.0, &mut rng_from(seed)).unwrap();
    let grid = PoseGrid {
        azimuth: AxisRange::new(0.0, 2.0 * PI, 12),
        elevation: AxisRange::new(0.0, 0.6, 2),
        theta: AxisRange::new(-0.2, 0.2, 2),
        distance: 5.0,
    };
    World { geo, model, grid, cam: Camera::new(50.0, 32, 32).unwrap() }
}

/// Noise-free scene: foreground pixels carry their vertex feature exactly,
/// background pixels cycle through the clutter prototypes.
pub fn exact_scene(world: &World, pose: Pose) -> Scene {
    let raster = rasterize(&world.geo, &pose, &world.cam).unwrap();
    let rr = paint(&world.model.mesh, raster);
    let mut features: FeatureMap = rr.rendered.clone();
    let betas = world.model.clutter.betas();
    for i in 0..features.pixel_count() {
        if rr.raster.vertex_at(i).is_none() {
            features.set_pixel(i, &betas[i % betas.len()]);
        }
    }
    Scene {
        features,
        pose,
        visible: rr.raster.visibility().to_vec(),
        foreground: rr.fg_mask(),
        occlusion: vec![false; rr.raster.pixel_count()],
        seed: 0,
    }
}

pub fn exact_scenes(world: &World, n: usize, seed: u64) -> Vec<Scene> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| exact_scene(world, world.grid.sample(&mut rng))).collect()
}
