//! The neural mesh generative model: vertex features on a cuboid, a vMF
//! clutter model for the background, rendered feature maps, the joint
//! likelihood and the render-and-compare reconstruction loss.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{rasterize, Camera, CuboidMesh, Pose, RasterMap};
use crate::vmf::{self, log_norm_const, norm, KAPPA_MAX};

/// `H x W` lattice of `d`-dimensional feature vectors stored row-major as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::InvalidInput(format!(
                "feature map data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                dim
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_f64(&self, i: usize) -> Vec<f64> {
        self.pixel(i).iter().map(|&x| x as f64).collect()
    }

    pub fn set_pixel(&mut self, i: usize, v: &[f64]) {
        self.pixel_mut(i)
            .iter_mut()
            .zip(v)
            .for_each(|(o, x)| *o = *x as f32);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Checks that every position is unit-norm within 1e-6.
    pub fn validate_unit(&self) -> Result<()> {
        for i in 0..self.pixel_count() {
            let n = self.pixel(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("feature at pixel {i} has norm {n}")));
            }
        }
        Ok(())
    }

    /// `f_i . v` accumulated in f64.
    pub fn dot_pixel(&self, i: usize, v: &[f64]) -> f64 {
        dot_mixed(self.pixel(i), v)
    }
}

pub fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, y)| x as f64 * y).sum()
}

/// Vertex features `C_r` and concentrations `kappa_r` attached to a cuboid.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralMesh {
    geometry: Arc<CuboidMesh>,
    dim: usize,
    features: Vec<f64>,
    kappas: Vec<f64>,
}

impl NeuralMesh {
    /// `features` holds one unit vector per vertex.
    pub fn new(geometry: Arc<CuboidMesh>, features: Vec<Vec<f64>>, kappas: Vec<f64>) -> Result<Self> {
        let count = geometry.vertex_count();
        if features.len() != count || kappas.len() != count {
            return Err(Error::InvalidInput(format!(
                "neural mesh needs {count} features and kappas, got {} and {}",
                features.len(),
                kappas.len()
            )));
        }
        let dim = features.first().map(|f| f.len()).unwrap_or(0);
        if dim < 2 {
            return Err(Error::InvalidInput("feature dimension must be >= 2".into()));
        }
        let mut flat = Vec::with_capacity(count * dim);
        for (r, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::InvalidInput(format!("feature {r} has wrong dimension")));
            }
            if (norm(f) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "feature {r} is not unit length (norm {})",
                    norm(f)
                )));
            }
            flat.extend_from_slice(f);
        }
        for (r, &k) in kappas.iter().enumerate() {
            if !(k > 0.0 && k <= KAPPA_MAX) {
                return Err(Error::InvalidInput(format!("kappa {r} = {k} outside (0, {KAPPA_MAX}]")));
            }
        }
        Ok(Self {
            geometry,
            dim,
            features: flat,
            kappas,
        })
    }

    pub fn geometry(&self) -> &CuboidMesh {
        &self.geometry
    }

    pub fn geometry_arc(&self) -> &Arc<CuboidMesh> {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertex_count(&self) -> usize {
        self.kappas.len()
    }

    pub fn feature(&self, r: usize) -> &[f64] {
        &self.features[r * self.dim..(r + 1) * self.dim]
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        (0..self.vertex_count()).map(|r| self.feature(r).to_vec()).collect()
    }

    pub fn kappa(&self, r: usize) -> f64 {
        self.kappas[r]
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    /// Copy with one feature replaced (renormalized).
    pub fn with_feature(&self, r: usize, feature: &[f64]) -> Result<Self> {
        let mut f = feature.to_vec();
        if vmf::normalize(&mut f) == 0.0 {
            return Err(Error::InvalidInput("zero feature vector".into()));
        }
        let mut out = self.clone();
        out.features[r * self.dim..(r + 1) * self.dim].copy_from_slice(&f);
        Ok(out)
    }

    pub fn with_kappas(&self, kappas: Vec<f64>) -> Result<Self> {
        NeuralMesh::new(self.geometry.clone(), self.features(), kappas)
    }

    pub fn with_features(&self, features: Vec<Vec<f64>>) -> Result<Self> {
        NeuralMesh::new(self.geometry.clone(), features, self.kappas.clone())
    }

    /// `ln Z[kappa_r]` for every vertex, evaluating each distinct kappa once.
    pub fn log_norm_consts(&self) -> Vec<f64> {
        let mut cache: HashMap<u64, f64> = HashMap::new();
        self.kappas
            .iter()
            .map(|&k| *cache.entry(k.to_bits()).or_insert_with(|| log_norm_const(k, self.dim)))
            .collect()
    }
}

/// Background model: `N` vMF prototypes sharing one concentration.
#[derive(Clone, Debug, PartialEq)]
pub struct ClutterModel {
    betas: Vec<Vec<f64>>,
    kappa_prime: f64,
}

impl ClutterModel {
    pub fn new(betas: Vec<Vec<f64>>, kappa_prime: f64) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidInput("clutter model needs at least one prototype".into()));
        }
        let dim = betas[0].len();
        for (n, b) in betas.iter().enumerate() {
            if b.len() != dim || (norm(b) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("clutter prototype {n} is not a unit {dim}-vector")));
            }
        }
        if !(kappa_prime > 0.0 && kappa_prime <= KAPPA_MAX) {
            return Err(Error::InvalidInput(format!("kappa' = {kappa_prime} outside (0, {KAPPA_MAX}]")));
        }
        Ok(Self { betas, kappa_prime })
    }

    pub fn betas(&self) -> &[Vec<f64>] {
        &self.betas
    }

    pub fn kappa_prime(&self) -> f64 {
        self.kappa_prime
    }

    pub fn dim(&self) -> usize {
        self.betas[0].len()
    }

    /// `max_n f . beta_n`.
    pub fn best_match(&self, f: &[f32]) -> f64 {
        self.betas
            .iter()
            .map(|b| dot_mixed(f, b))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rendered feature map `F'` with its rasterization.
#[derive(Clone, Debug)]
pub struct RenderResult {
    pub raster: RasterMap,
    /// Vertex features on foreground pixels; zero vectors on the background.
    pub rendered: FeatureMap,
}

impl RenderResult {
    pub fn fg_mask(&self) -> Vec<bool> {
        (0..self.raster.pixel_count())
            .map(|i| self.raster.is_foreground(i))
            .collect()
    }
}

/// Paints every foreground pixel with the feature of its rasterized vertex.
pub fn render_feature_map(mesh: &NeuralMesh, pose: &Pose, cam: &Camera) -> Result<RenderResult> {
    let raster = rasterize(mesh.geometry(), pose, cam)?;
    Ok(paint(mesh, raster))
}

/// Builds the rendered map for an existing rasterization.
pub fn paint(mesh: &NeuralMesh, raster: RasterMap) -> RenderResult {
    let mut rendered = FeatureMap::zeros(raster.height(), raster.width(), mesh.dim());
    for (i, r) in raster.foreground() {
        rendered.set_pixel(i, mesh.feature(r));
    }
    RenderResult { raster, rendered }
}

fn check_shapes(f: &FeatureMap, dim: usize, cam_pixels: usize) -> Result<()> {
    if f.dim() != dim {
        return Err(Error::InvalidInput(format!(
            "feature map has dimension {}, model has {dim}",
            f.dim()
        )));
    }
    if f.pixel_count() != cam_pixels {
        return Err(Error::InvalidInput(format!(
            "feature map has {} pixels, camera lattice has {cam_pixels}",
            f.pixel_count()
        )));
    }
    Ok(())
}

/// `ln p(F | mesh, pose, clutter)`: vMF terms on the foreground plus the best
/// clutter component on every background pixel.
pub fn joint_log_likelihood(
    f: &FeatureMap,
    mesh: &NeuralMesh,
    pose: &Pose,
    clutter: &ClutterModel,
    cam: &Camera,
) -> Result<f64> {
    check_shapes(f, mesh.dim(), cam.pixel_count())?;
    let raster = rasterize(mesh.geometry(), pose, cam)?;
    let log_z = mesh.log_norm_consts();
    let log_z_bg = log_norm_const(clutter.kappa_prime(), mesh.dim());
    let mut total = 0.0;
    for i in 0..f.pixel_count() {
        match raster.vertex_at(i) {
            Some(r) => total += log_z[r] + mesh.kappa(r) * f.dot_pixel(i, mesh.feature(r)),
            None => total += log_z_bg + clutter.kappa_prime() * clutter.best_match(f.pixel(i)),
        }
    }
    Ok(total)
}

/// Mean foreground agreement `f . f'`, mean best background agreement
/// `max_n f . beta_n`, and the loss `1 - (fg + bg) / 2`. A region with no
/// pixels drops out of the average.
pub fn reconstruction_loss(f: &FeatureMap, rr: &RenderResult, clutter: &ClutterModel) -> f64 {
    let mut fg_sum = 0.0;
    let mut fg_n = 0usize;
    let mut bg_sum = 0.0;
    let mut bg_n = 0usize;
    for i in 0..f.pixel_count() {
        if rr.raster.is_foreground(i) {
            let rendered = rr.rendered.pixel(i);
            fg_sum += f
                .pixel(i)
                .iter()
                .zip(rendered)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
            fg_n += 1;
        } else {
            bg_sum += clutter.best_match(f.pixel(i));
            bg_n += 1;
        }
    }
    combine_loss(fg_sum, fg_n, bg_sum, bg_n)
}

pub(crate) fn combine_loss(fg_sum: f64, fg_n: usize, bg_sum: f64, bg_n: usize) -> f64 {
    let mut agreement = 0.0;
    let mut terms = 0.0;
    if fg_n > 0 {
        agreement += fg_sum / fg_n as f64;
        terms += 1.0;
    }
    if bg_n > 0 {
        agreement += bg_sum / bg_n as f64;
        terms += 1.0;
    }
    if terms == 0.0 {
        return 1.0;
    }
    1.0 - agreement / terms
}

/// How a vertex/feature similarity is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    /// `f . C_r`, the thresholded quantity under a fixed kappa.
    #[default]
    Cosine,
    /// `Z[kappa_r] exp(kappa_r f . C_r)`.
    VmfScore,
}

pub fn vertex_similarity(f: &[f64], r: usize, mesh: &NeuralMesh, mode: SimilarityMode) -> f64 {
    let cos = vmf::dot(f, mesh.feature(r));
    match mode {
        SimilarityMode::Cosine => cos,
        SimilarityMode::VmfScore => {
            (log_norm_const(mesh.kappa(r), mesh.dim()) + mesh.kappa(r) * cos).exp()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_cuboid_mesh;
    use crate::seed::rng_from;
    use crate::vmf::{sample_uniform_sphere, vmf_log_density, VmfParams};
    use std::f64::consts::TAU;

    fn small_model(dim: usize, seed: u64) -> (NeuralMesh, ClutterModel, Camera) {
        let mut rng = rng_from(seed);
        let geo = Arc::new(make_cuboid_mesh([1.2, 0.6, 0.8], 3).unwrap());
        let feats = (0..geo.vertex_count()).map(|_| sample_uniform_sphere(dim, &mut rng)).collect();
        let kappas = vec![5.0; geo.vertex_count()];
        let mesh = NeuralMesh::new(geo, feats, kappas).unwrap();
        let betas = (0..3).map(|_| sample_uniform_sphere(dim, &mut rng)).collect();
        let clutter = ClutterModel::new(betas, 3.0).unwrap();
        let cam = Camera::new(40.0, 16, 16).unwrap();
        (mesh, clutter, cam)
    }

    /// Observed map equal to the render on the foreground and to `beta_1` elsewhere.
    fn exact_map(rr: &RenderResult, clutter: &ClutterModel) -> FeatureMap {
        let mut f = rr.rendered.clone();
        for i in 0..f.pixel_count() {
            if !rr.raster.is_foreground(i) {
                f.set_pixel(i, &clutter.betas()[0]);
            }
        }
        f
    }

    #[test]
    fn self_render_has_zero_loss() {
        let (mesh, clutter, cam) = small_model(8, 1);
        let pose = Pose::from_degrees(40.0, 20.0, 0.0, 4.0);
        let rr = render_feature_map(&mesh, &pose, &cam).unwrap();
        assert!(rr.raster.foreground_count() > 0);
        let f = exact_map(&rr, &clutter);
        assert!(reconstruction_loss(&f, &rr, &clutter).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_map_has_unit_loss() {
        // d = 4: features on axes 0/1, clutter on axis 2, observation on axis 3.
        let geo = Arc::new(make_cuboid_mesh([1.0, 1.0, 1.0], 2).unwrap());
        let feats = (0..8).map(|r| if r % 2 == 0 { vec![1.0, 0.0, 0.0, 0.0] } else { vec![0.0, 1.0, 0.0, 0.0] }).collect();
        let mesh = NeuralMesh::new(geo, feats, vec![1.0; 8]).unwrap();
        let clutter = ClutterModel::new(vec![vec![0.0, 0.0, 1.0, 0.0]], 1.0).unwrap();
        let cam = Camera::new(20.0, 12, 12).unwrap();
        let rr = render_feature_map(&mesh, &Pose::from_degrees(30.0, 20.0, 0.0, 4.0), &cam).unwrap();
        let f = FeatureMap::new(12, 12, 4, [0.0f32, 0.0, 0.0, 1.0].repeat(144)).unwrap();
        assert!((reconstruction_loss(&f, &rr, &clutter) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_matches_brute_force() {
        let (mesh, clutter, _) = small_model(5, 2);
        let cam = Camera::new(12.0, 4, 4).unwrap();
        let pose = Pose::from_degrees(20.0, 10.0, 0.0, 4.0);
        let rr = render_feature_map(&mesh, &pose, &cam).unwrap();
        let mut rng = rng_from(3);
        let data: Vec<f32> = (0..16).flat_map(|_| sample_uniform_sphere(5, &mut rng)).map(|x| x as f32).collect();
        let f = FeatureMap::new(4, 4, 5, data).unwrap();

        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..16 {
            let x = f.pixel_f64(i);
            match rr.raster.vertex_at(i) {
                Some(r) => {
                    fg += crate::vmf::dot(&x, mesh.feature(r));
                    nf += 1.0;
                }
                None => {
                    let best = clutter.betas().iter().map(|b| crate::vmf::dot(&x, b)).fold(-2.0, f64::max);
                    bg += best;
                    nb += 1.0;
                }
            }
        }
        let terms: Vec<f64> = [(fg, nf), (bg, nb)].iter().filter(|(_, n)| *n > 0.0).map(|(s, n)| s / n).collect();
        let expected = 1.0 - terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((reconstruction_loss(&f, &rr, &clutter) - expected).abs() < 1e-6);
    }

    #[test]
    fn likelihood_maximal_case_and_bound() {
        let (mesh, clutter, cam) = small_model(6, 4);
        let pose = Pose::from_degrees(70.0, 15.0, 5.0, 4.0);
        let rr = render_feature_map(&mesh, &pose, &cam).unwrap();
        let f = exact_map(&rr, &clutter);
        let ll = joint_log_likelihood(&f, &mesh, &pose, &clutter, &cam).unwrap();
        let log_z = mesh.log_norm_consts();
        let bg_n = (0..f.pixel_count()).filter(|&i| !rr.raster.is_foreground(i)).count() as f64;
        let expected: f64 = rr.raster.foreground().map(|(_, r)| log_z[r] + mesh.kappa(r)).sum::<f64>()
            + bg_n * (log_norm_const(clutter.kappa_prime(), 6) + clutter.kappa_prime());
        // The clutter term is a max over prototypes, so other betas cannot beat beta_1 = f.
        assert!((ll - expected).abs() < 1e-4 * expected.abs().max(1.0));

        let mut rng = rng_from(9);
        let data: Vec<f32> = (0..f.pixel_count()).flat_map(|_| sample_uniform_sphere(6, &mut rng)).map(|x| x as f32).collect();
        let random = FeatureMap::new(16, 16, 6, data).unwrap();
        assert!(joint_log_likelihood(&random, &mesh, &pose, &clutter, &cam).unwrap() <= expected);
    }

    #[test]
    fn likelihood_matches_per_pixel_oracle() {
        let (mesh, clutter, _) = small_model(4, 5);
        let cam = Camera::new(12.0, 4, 4).unwrap();
        let pose = Pose::from_degrees(10.0, 5.0, 0.0, 4.0);
        let raster = rasterize(mesh.geometry(), &pose, &cam).unwrap();
        let mut rng = rng_from(6);
        let data: Vec<f32> = (0..16).flat_map(|_| sample_uniform_sphere(4, &mut rng)).map(|x| x as f32).collect();
        let f = FeatureMap::new(4, 4, 4, data).unwrap();
        let mut expected = 0.0;
        for i in 0..16 {
            let x = crate::vmf::normalized(&f.pixel_f64(i));
            expected += match raster.vertex_at(i) {
                Some(r) => vmf_log_density(&x, &VmfParams::new(mesh.feature(r).to_vec(), mesh.kappa(r)).unwrap()).unwrap(),
                None => clutter
                    .betas()
                    .iter()
                    .map(|b| vmf_log_density(&x, &VmfParams::new(b.clone(), clutter.kappa_prime()).unwrap()).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max),
            };
        }
        let ll = joint_log_likelihood(&f, &mesh, &pose, &clutter, &cam).unwrap();
        assert!((ll - expected).abs() < 1e-5);
    }

    #[test]
    fn self_render_maximizes_likelihood_over_codebook() {
        // Every pixel may take one of a small codebook of unit vectors; the
        // exact map must score strictly highest among all single-pixel edits.
        let (mesh, clutter, _) = small_model(4, 7);
        let cam = Camera::new(12.0, 4, 4).unwrap();
        let pose = Pose::from_degrees(30.0, 10.0, 0.0, 4.0);
        let rr = render_feature_map(&mesh, &pose, &cam).unwrap();
        let exact = exact_map(&rr, &clutter);
        let best = joint_log_likelihood(&exact, &mesh, &pose, &clutter, &cam).unwrap();
        let mut codebook: Vec<Vec<f64>> = (0..4).map(|k| { let mut v = vec![0.0; 4]; v[k] = 1.0; v }).collect();
        codebook.extend(mesh.features());
        codebook.extend(clutter.betas().iter().cloned());
        for i in 0..16 {
            for code in &codebook {
                let mut g = exact.clone();
                g.set_pixel(i, code);
                if g.pixel(i) == exact.pixel(i) {
                    continue;
                }
                let ll = joint_log_likelihood(&g, &mesh, &pose, &clutter, &cam).unwrap();
                let clutter_tie = !rr.raster.is_foreground(i) && clutter.betas().contains(code);
                if clutter_tie {
                    // Any prototype on a background pixel attains the same maximum.
                    assert!(ll <= best + 1e-5);
                } else {
                    assert!(ll < best - 1e-6);
                }
            }
        }
    }

    #[test]
    fn visible_set_is_periodic_in_azimuth() {
        let (mesh, _, cam) = small_model(4, 8);
        let a = render_feature_map(&mesh, &Pose::new(0.0, 0.3, 0.1, 4.0), &cam).unwrap();
        let b = render_feature_map(&mesh, &Pose::new(TAU, 0.3, 0.1, 4.0), &cam).unwrap();
        assert_eq!(a.raster.visibility(), b.raster.visibility());
    }

    #[test]
    fn similarity_modes() {
        let (mesh, _, _) = small_model(6, 10);
        let c = mesh.feature(3).to_vec();
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        assert!((vertex_similarity(&c, 3, &mesh, SimilarityMode::Cosine) - 1.0).abs() < 1e-12);
        assert!((vertex_similarity(&neg, 3, &mesh, SimilarityMode::Cosine) + 1.0).abs() < 1e-12);
        let p = VmfParams::new(c.clone(), mesh.kappa(3)).unwrap();
        let direct = vmf_log_density(&c, &p).unwrap().exp();
        assert!((vertex_similarity(&c, 3, &mesh, SimilarityMode::VmfScore) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn cosine_is_kappa_invariant_and_argmax_agrees() {
        let (mesh, _, _) = small_model(6, 11);
        let mut rng = rng_from(12);
        let f = sample_uniform_sphere(6, &mut rng);
        let other = mesh.with_kappas(vec![17.0; mesh.vertex_count()]).unwrap();
        for r in 0..mesh.vertex_count() {
            assert_eq!(
                vertex_similarity(&f, r, &mesh, SimilarityMode::Cosine),
                vertex_similarity(&f, r, &other, SimilarityMode::Cosine)
            );
        }
        let argmax = |mode| {
            (0..mesh.vertex_count())
                .max_by(|&a, &b| vertex_similarity(&f, a, &mesh, mode).total_cmp(&vertex_similarity(&f, b, &mesh, mode)))
                .unwrap()
        };
        assert_eq!(argmax(SimilarityMode::Cosine), argmax(SimilarityMode::VmfScore));
    }

    #[test]
    fn constructors_validate() {
        let geo = Arc::new(make_cuboid_mesh([1.0, 1.0, 1.0], 2).unwrap());
        assert!(NeuralMesh::new(geo.clone(), vec![vec![1.0, 0.0]; 7], vec![1.0; 8]).is_err());
        assert!(NeuralMesh::new(geo.clone(), vec![vec![2.0, 0.0]; 8], vec![1.0; 8]).is_err());
        assert!(NeuralMesh::new(geo, vec![vec![1.0, 0.0]; 8], vec![0.0; 8]).is_err());
        assert!(ClutterModel::new(vec![], 1.0).is_err());
        assert!(FeatureMap::new(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
