//! Browser bindings. One [`Demo`] holds a small true model, its shifted
//! target counterpart and a pose bank; the page renders scenes from either
//! domain and runs the source model's pose estimator on them.

use std::f64::consts::PI;
use std::sync::Arc;

use meshsva::geometry::{geodesic_distance, make_cuboid_mesh, rasterize, Camera, Pose};
use meshsva::inference::{build_pose_bank, estimate_pose, AxisRange, InferenceOptions, PoseBank, PoseGrid};
use meshsva::seed::rng_from;
use meshsva::synth::{generate_source, random_true_model, shift_model, DomainSpec, GenerativeModel, RobustSubset, Scene};
use meshsva::vmf::{estimate_kappa, sample_uniform_sphere, sample_vmf, VmfParams};
use wasm_bindgen::prelude::*;

const DIM: usize = 8;
const SIZE: usize = 48;
const DATA_KAPPA: f64 = 20.0;

fn js_err(e: meshsva::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    source: GenerativeModel,
    target: GenerativeModel,
    cam: Camera,
    bank: PoseBank,
    seed: u64,
    draws: u64,
}

#[wasm_bindgen]
impl Demo {
    /// `robust_fraction` is the share of vertices whose features survive the
    /// domain shift; the rest are rotated 60 to 90 degrees away.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, robust_fraction: f64) -> Result<Demo, JsValue> {
        let seed = seed as u64;
        let geo = Arc::new(make_cuboid_mesh([2.0, 1.0, 1.2], 4).map_err(js_err)?);
        let source = random_true_model(geo.clone(), DIM, 5, 20.0, 0.0, &mut rng_from(seed)).map_err(js_err)?;
        let spec = DomainSpec {
            robust_fraction: robust_fraction.clamp(0.0, 1.0),
            robust_subset: RobustSubset::Random,
            perturb_min: 60f64.to_radians(),
            perturb_max: 90f64.to_radians(),
            ..DomainSpec::identity(DATA_KAPPA)
        };
        let target = shift_model(&source, &spec, &mut rng_from(seed ^ 0x5a5a)).map_err(js_err)?.model;
        let cam = Camera::new(75.0, SIZE, SIZE).map_err(js_err)?;
        let grid = PoseGrid {
            azimuth: AxisRange::new(0.0, 2.0 * PI, 24),
            elevation: AxisRange::new(0.0, 40f64.to_radians(), 3),
            theta: AxisRange::new(-15f64.to_radians(), 15f64.to_radians(), 3),
            distance: 5.0,
        };
        let bank = build_pose_bank(&geo, &cam, &grid).map_err(js_err)?;
        Ok(Demo { source, target, cam, bank, seed, draws: 0 })
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    fn scene(&mut self, az: f64, el: f64, theta: f64, target: bool) -> Result<Scene, JsValue> {
        let fixed = |v: f64| AxisRange::new(v.to_radians(), v.to_radians(), 1);
        let grid = PoseGrid { azimuth: fixed(az), elevation: fixed(el), theta: fixed(theta), distance: 5.0 };
        let model = if target { &self.target } else { &self.source };
        self.draws += 1;
        let mut s = generate_source(model, &grid, &self.cam, 1, DATA_KAPPA, self.seed + self.draws).map_err(js_err)?;
        Ok(s.remove(0))
    }

    /// RGBA image of a freshly drawn scene. Foreground pixels are coloured by
    /// the cosine between the observed feature and the source model's feature
    /// of the vertex drawn there: green agrees, red has shifted.
    pub fn match_map(&mut self, az: f64, el: f64, theta: f64, target: bool) -> Result<Vec<u8>, JsValue> {
        let s = self.scene(az, el, theta, target)?;
        let raster = rasterize(self.source.mesh.geometry(), &s.pose, &self.cam).map_err(js_err)?;
        let mut rgba = vec![0u8; 4 * SIZE * SIZE];
        for (i, px) in rgba.chunks_mut(4).enumerate() {
            let (r, g, b) = match raster.vertex_at(i) {
                Some(v) => {
                    let c = s.features.dot_pixel(i, self.source.mesh.feature(v)).clamp(-1.0, 1.0);
                    let t = (c + 1.0) / 2.0;
                    ((255.0 * (1.0 - t)) as u8, (255.0 * t) as u8, 60)
                }
                None => (30, 30, 36),
            };
            px.copy_from_slice(&[r, g, b, 255]);
        }
        Ok(rgba)
    }

    /// Draws a scene at the given pose and estimates it with the source model.
    /// Returns `[azimuth, elevation, theta, error]` in degrees.
    pub fn estimate(&mut self, az: f64, el: f64, theta: f64, target: bool) -> Result<Vec<f64>, JsValue> {
        let s = self.scene(az, el, theta, target)?;
        let est = estimate_pose(&s.features, &self.source.mesh, &self.source.clutter, &self.cam, &self.bank, &InferenceOptions::default())
            .map_err(js_err)?;
        let p: Pose = est.best().pose;
        let err = geodesic_distance(&p.rotation(), &s.pose.rotation());
        Ok(vec![
            p.azimuth().to_degrees().rem_euclid(360.0),
            p.elevation().to_degrees(),
            p.theta().to_degrees(),
            err.to_degrees(),
        ])
    }
}

/// Draws `n` samples from a vMF with concentration `kappa` on the unit sphere
/// in `dim` dimensions and returns the moment estimate of the concentration.
#[wasm_bindgen]
pub fn kappa_roundtrip(kappa: f64, dim: usize, n: usize, seed: u32) -> Result<f64, JsValue> {
    let mut rng = rng_from(seed as u64);
    let p = VmfParams::new(sample_uniform_sphere(dim.max(2), &mut rng), kappa).map_err(js_err)?;
    let xs: Vec<Vec<f64>> = (0..n.max(2)).map(|_| sample_vmf(&p, &mut rng)).collect();
    estimate_kappa(&xs).map(|e| e.kappa).map_err(js_err)
}
