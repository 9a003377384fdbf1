//! Rotations, poses, cuboid meshes, perspective projection and z-buffered
//! rasterization onto the feature lattice.
//!
//! Conventions (used throughout the crate):
//!
//! - The pose rotation maps object coordinates to camera coordinates and is
//!   composed as `R = Rz(theta) * Rx(elevation) * Ry(azimuth)`.
//! - Camera frame: `x` right, `y` down, `z` forward. The object centre sits at
//!   `(0, 0, distance)` in camera coordinates.
//! - Pixel `(x, y)` has its centre at integer coordinates; the flat index is
//!   `y * width + x`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elevation is kept this far from the poles while optimizing.
pub const GIMBAL_MARGIN: f64 = 1e-6;

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and `det = +1` (tolerance 1e-9).
    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "matrix is not a rotation (orthogonality error {ortho:.3e}, det {det:.12})"
            )));
        }
        Ok(Self(m))
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rodrigues' formula. `axis` need not be normalized but must be non-zero.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let (s, c) = angle.sin_cos();
        Self(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation vector (axis times angle) of the matrix logarithm.
    ///
    /// Goes through a unit quaternion (Shepperd's method) so it stays accurate
    /// near both 0 and pi. `||logm(R)||_F = sqrt(2) * ||log(R)||`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let trace = m.trace();
        let (w, x, y, z);
        if trace >= m[(0, 0)] && trace >= m[(1, 1)] && trace >= m[(2, 2)] {
            let s = (1.0 + trace).max(0.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).max(0.0).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).max(0.0).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).max(0.0).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let sign = if w < 0.0 { -1.0 } else { 1.0 };
        let v = Vector3::new(x, y, z) * sign;
        let vn = v.norm();
        if vn < 1e-15 {
            return v * 2.0;
        }
        let angle = 2.0 * vn.atan2(w.abs());
        v * (angle / vn)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Geodesic distance on SO(3): `||logm(a^T b)||_F / sqrt(2)`, in `[0, pi]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.transpose() * *b;
    rel.log().norm().clamp(0.0, PI)
}

fn wrap_azimuth(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn wrap_theta(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Viewpoint: azimuth in `[0, 2pi)`, elevation in `[-pi/2, pi/2]`, in-plane
/// rotation `theta` in `[-pi, pi)`, and camera distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    azimuth: f64,
    elevation: f64,
    theta: f64,
    distance: f64,
}

impl Pose {
    /// Normalizes angles into their canonical ranges. The distance is kept as
    /// given; a non-positive distance is reported by [`rasterize`].
    pub fn new(azimuth: f64, elevation: f64, theta: f64, distance: f64) -> Self {
        Self {
            azimuth: wrap_azimuth(azimuth),
            elevation: elevation.clamp(-FRAC_PI_2, FRAC_PI_2),
            theta: wrap_theta(theta),
            distance,
        }
    }

    pub fn from_degrees(azimuth: f64, elevation: f64, theta: f64, distance: f64) -> Self {
        Self::new(
            azimuth.to_radians(),
            elevation.to_radians(),
            theta.to_radians(),
            distance,
        )
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.azimuth, self.elevation, self.theta]
    }

    /// Same distance, new angles (normalized); elevation is kept off the poles.
    pub fn with_angles(&self, angles: [f64; 3]) -> Self {
        let lim = FRAC_PI_2 - GIMBAL_MARGIN;
        Self::new(
            angles[0],
            angles[1].clamp(-lim, lim),
            angles[2],
            self.distance,
        )
    }

    pub fn rotation(&self) -> Rotation {
        pose_to_rotation(self)
    }

    /// Inverse of [`pose_to_rotation`], exact away from `|elevation| = pi/2`.
    pub fn from_rotation(r: &Rotation, distance: f64) -> Self {
        let m = r.matrix();
        let elevation = m[(2, 1)].clamp(-1.0, 1.0).asin();
        let azimuth = (-m[(2, 0)]).atan2(m[(2, 2)]);
        let theta = (-m[(0, 1)]).atan2(m[(1, 1)]);
        Self::new(azimuth, elevation, theta, distance)
    }
}

/// `R = Rz(theta) * Rx(elevation) * Ry(azimuth)`.
pub fn pose_to_rotation(pose: &Pose) -> Rotation {
    Rotation::about_z(pose.theta) * Rotation::about_x(pose.elevation) * Rotation::about_y(pose.azimuth)
}

/// Pinhole camera over an `width x height` lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Principal point at the lattice centre.
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::with_principal_point(
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn with_principal_point(
        focal: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Config(format!("camera focal must be > 0, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera lattice must be non-empty".into()));
        }
        let inside = (0.0..=(self.width as f64 - 1.0)).contains(&self.cx)
            && (0.0..=(self.height as f64 - 1.0)).contains(&self.cy);
        if !inside {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}x{} lattice",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-frame point (must have `z > 0`).
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            self.focal * p.x / p.z + self.cx,
            self.focal * p.y / p.z + self.cy,
        ]
    }
}

/// Cuboid surface mesh with a uniform vertex grid on every face.
#[derive(Clone, Debug, PartialEq)]
pub struct CuboidMesh {
    dims: [f64; 3],
    verts_per_edge: usize,
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vector3<f64>>,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<[usize; 2]>,
}

/// Builds the cuboid surface mesh with `verts_per_edge` vertices along every
/// edge. Neighbourhoods are surface vertices within grid (Chebyshev) distance 1.
pub fn make_cuboid_mesh(dims: [f64; 3], verts_per_edge: usize) -> Result<CuboidMesh> {
    if dims.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "cuboid dims must be positive, got {dims:?}"
        )));
    }
    if verts_per_edge < 2 {
        return Err(Error::InvalidInput(format!(
            "verts_per_edge must be >= 2, got {verts_per_edge}"
        )));
    }
    let n = verts_per_edge;
    let last = n - 1;
    let on_surface = |g: [usize; 3]| g.iter().any(|&c| c == 0 || c == last);

    let mut grid_id = vec![usize::MAX; n * n * n];
    let flat = |g: [usize; 3]| (g[0] * n + g[1]) * n + g[2];
    let mut grid = Vec::new();
    let mut vertices = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let g = [i, j, k];
                if !on_surface(g) {
                    continue;
                }
                grid_id[flat(g)] = vertices.len();
                grid.push(g);
                let coord = |axis: usize| dims[axis] * (g[axis] as f64 / last as f64 - 0.5);
                vertices.push(Vector3::new(coord(0), coord(1), coord(2)));
            }
        }
    }

    let mut faces = Vec::with_capacity(12 * last * last);
    for a in 0..3 {
        let b = (a + 1) % 3;
        let c = (a + 2) % 3;
        for side in [0, last] {
            for u in 0..last {
                for v in 0..last {
                    let id = |du: usize, dv: usize| {
                        let mut g = [0; 3];
                        g[a] = side;
                        g[b] = u + du;
                        g[c] = v + dv;
                        grid_id[flat(g)]
                    };
                    let (p00, p10, p11, p01) = (id(0, 0), id(1, 0), id(1, 1), id(0, 1));
                    // (e_b, e_c) winding points along +e_a; flip on the low side.
                    if side == last {
                        faces.push([p00, p10, p11]);
                        faces.push([p00, p11, p01]);
                    } else {
                        faces.push([p00, p11, p10]);
                        faces.push([p00, p01, p11]);
                    }
                }
            }
        }
    }

    let normals = grid
        .iter()
        .map(|g| {
            let mut nrm = Vector3::zeros();
            for axis in 0..3 {
                if g[axis] == 0 {
                    nrm[axis] -= 1.0;
                }
                if g[axis] == last {
                    nrm[axis] += 1.0;
                }
            }
            nrm.normalize()
        })
        .collect();

    let mut neighbors = vec![Vec::new(); vertices.len()];
    let mut edges = Vec::new();
    for (r, g) in grid.iter().enumerate() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    if di == 0 && dj == 0 && dk == 0 {
                        continue;
                    }
                    let h = [g[0] as i64 + di, g[1] as i64 + dj, g[2] as i64 + dk];
                    if h.iter().any(|&c| c < 0 || c > last as i64) {
                        continue;
                    }
                    let h = [h[0] as usize, h[1] as usize, h[2] as usize];
                    let other = grid_id[flat(h)];
                    if other == usize::MAX {
                        continue;
                    }
                    neighbors[r].push(other);
                    let axis_step = (di.abs() + dj.abs() + dk.abs()) == 1;
                    if axis_step && other > r {
                        edges.push([r, other]);
                    }
                }
            }
        }
        neighbors[r].sort_unstable();
    }

    Ok(CuboidMesh {
        dims,
        verts_per_edge,
        vertices,
        faces,
        normals,
        neighbors,
        edges,
    })
}

impl CuboidMesh {
    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn verts_per_edge(&self) -> usize {
        self.verts_per_edge
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    /// `N_r`: vertices adjacent to `r` on the surface grid (never contains `r`).
    pub fn neighbors(&self, r: usize) -> &[usize] {
        &self.neighbors[r]
    }

    pub fn is_neighbor(&self, r: usize, l: usize) -> bool {
        self.neighbors[r].binary_search(&l).is_ok()
    }

    /// Axis-aligned grid edges (used for the splat-radius estimate).
    pub fn grid_edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn extent(&self) -> f64 {
        self.dims.iter().cloned().fold(0.0, f64::max)
    }

    /// Replaces every neighbourhood; used to build ablation instances.
    pub fn with_neighbors(mut self, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        if neighbors.len() != self.vertices.len() {
            return Err(Error::InvalidInput("neighbourhood table has wrong length".into()));
        }
        for (r, list) in neighbors.iter().enumerate() {
            for &l in list {
                if l == r || l >= self.vertices.len() || !neighbors[l].contains(&r) {
                    return Err(Error::InvalidInput(format!(
                        "neighbourhood of vertex {r} is not a symmetric irreflexive relation"
                    )));
                }
            }
        }
        self.neighbors = neighbors
            .into_iter()
            .map(|mut l| {
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        Ok(self)
    }

    pub fn to_json(&self) -> MeshJson {
        MeshJson {
            dims: self.dims,
            verts_per_edge: self.verts_per_edge,
            vertices: self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Rebuilds the mesh and checks the stored vertices and faces agree.
    pub fn from_json(json: &MeshJson) -> Result<Self> {
        let mesh = make_cuboid_mesh(json.dims, json.verts_per_edge)?;
        let same_vertices = json.vertices.len() == mesh.vertices.len()
            && json
                .vertices
                .iter()
                .zip(&mesh.vertices)
                .all(|(a, b)| (Vector3::from(*a) - b).abs().max() < 1e-9);
        if !same_vertices || json.faces != mesh.faces {
            return Err(Error::Data(
                "mesh JSON does not match the cuboid generated from its dims".into(),
            ));
        }
        Ok(mesh)
    }
}

/// Mesh interchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshJson {
    pub dims: [f64; 3],
    pub verts_per_edge: usize,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

const NO_VERTEX: u32 = u32::MAX;

/// Result of rasterizing a mesh: per-pixel vertex correspondence and
/// per-vertex visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterMap {
    width: usize,
    height: usize,
    correspondence: Vec<u32>,
    visible: Vec<bool>,
    vertex_pixel: Vec<Option<usize>>,
    projected: Vec<[f64; 2]>,
    splat_radius: f64,
}

impl RasterMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Vertex rendered at pixel `i`, or `None` on background.
    pub fn vertex_at(&self, pixel: usize) -> Option<usize> {
        match self.correspondence[pixel] {
            NO_VERTEX => None,
            r => Some(r as usize),
        }
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        self.correspondence[pixel] != NO_VERTEX
    }

    /// `(pixel, vertex)` for every foreground pixel, in pixel order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.correspondence
            .iter()
            .enumerate()
            .filter(|(_, &r)| r != NO_VERTEX)
            .map(|(i, &r)| (i, r as usize))
    }

    pub fn foreground_count(&self) -> usize {
        self.correspondence.iter().filter(|&&r| r != NO_VERTEX).count()
    }

    pub fn is_visible(&self, r: usize) -> bool {
        self.visible[r]
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visible
    }

    pub fn visible_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(r, _)| r)
    }

    /// Pixel of the rounded projection of a visible vertex.
    pub fn vertex_pixel(&self, r: usize) -> Option<usize> {
        self.vertex_pixel[r]
    }

    /// Sub-pixel projection of every vertex (also the culled ones).
    pub fn projection(&self, r: usize) -> [f64; 2] {
        self.projected[r]
    }

    pub fn splat_radius(&self) -> f64 {
        self.splat_radius
    }
}

/// Rasterizes the mesh seen from `pose`.
pub fn rasterize(mesh: &CuboidMesh, pose: &Pose, cam: &Camera) -> Result<RasterMap> {
    if !(pose.distance() > 0.0) {
        return Err(Error::DegenerateProjection(format!(
            "camera distance must be positive, got {}",
            pose.distance()
        )));
    }
    rasterize_rigid(
        mesh,
        &pose.rotation(),
        &Vector3::new(0.0, 0.0, pose.distance()),
        cam,
    )
}

/// Rasterizes the mesh under a general rigid transform `x_cam = R x + t`.
pub fn rasterize_rigid(
    mesh: &CuboidMesh,
    rot: &Rotation,
    translation: &Vector3<f64>,
    cam: &Camera,
) -> Result<RasterMap> {
    let (w, h) = (cam.width, cam.height);
    let nv = mesh.vertex_count();

    let mut cam_pts = Vec::with_capacity(nv);
    for v in mesh.vertices() {
        let p = rot.apply(v) + translation;
        if !(p.z > 1e-9) || !p.z.is_finite() {
            return Err(Error::DegenerateProjection(
                "mesh vertex at or behind the camera plane".into(),
            ));
        }
        cam_pts.push(p);
    }
    let projected: Vec<[f64; 2]> = cam_pts.iter().map(|p| cam.project(p)).collect();
    let depth: Vec<f64> = cam_pts.iter().map(|p| p.z).collect();

    // Camera centre expressed in object coordinates.
    let eye = -(rot.transpose().apply(translation));

    let mut facing = vec![false; nv];
    let mut zbuf = vec![f64::INFINITY; w * h];
    for tri in mesh.faces() {
        let [a, b, c] = *tri;
        let va = &mesh.vertices()[a];
        let tri_normal = (mesh.vertices()[b] - va).cross(&(mesh.vertices()[c] - va));
        if tri_normal.dot(&(eye - va)) <= 0.0 {
            continue;
        }
        // A vertex faces the camera when any face it belongs to does.
        for &k in tri {
            facing[k] = true;
        }
        raster_triangle(
            [projected[a], projected[b], projected[c]],
            [depth[a], depth[b], depth[c]],
            w,
            h,
            &mut zbuf,
        );
    }

    let depth_eps = 1e-3 * mesh.extent();
    let mut visible = vec![false; nv];
    let mut vertex_pixel = vec![None; nv];
    for r in 0..nv {
        if !facing[r] {
            continue;
        }
        let px = projected[r][0].round();
        let py = projected[r][1].round();
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let (px, py) = (px as i64, py as i64);
        // Conservative depth test: the largest buffered depth in the 3x3 block
        // around the vertex, with uncovered or off-lattice pixels counting as open.
        let mut ceiling = f64::NEG_INFINITY;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (px + dx, py + dy);
                let z = if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    f64::INFINITY
                } else {
                    zbuf[y as usize * w + x as usize]
                };
                ceiling = ceiling.max(z);
            }
        }
        if depth[r] <= ceiling + depth_eps {
            visible[r] = true;
            vertex_pixel[r] = Some(py as usize * w + px as usize);
        }
    }

    let mut spans: Vec<f64> = mesh
        .grid_edges()
        .iter()
        .filter(|[a, b]| visible[*a] && visible[*b])
        .map(|[a, b]| {
            let (pa, pb) = (projected[*a], projected[*b]);
            ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
        })
        .collect();
    let splat_radius = if spans.is_empty() {
        0.5
    } else {
        let mid = spans.len() / 2;
        spans.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        (0.5 * spans[mid]).max(0.5)
    };

    let mut correspondence = vec![NO_VERTEX; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    for r in (0..nv).filter(|&r| visible[r]) {
        let [u, v] = projected[r];
        let x0 = (u - splat_radius).ceil().max(0.0) as usize;
        let x1 = (u + splat_radius).floor().min(w as f64 - 1.0);
        let y0 = (v - splat_radius).ceil().max(0.0) as usize;
        let y1 = (v + splat_radius).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=(y1 as usize) {
            for x in x0..=(x1 as usize) {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                let i = y * w + x;
                if d2 < best[i] {
                    best[i] = d2;
                    correspondence[i] = r as u32;
                }
            }
        }
    }

    Ok(RasterMap {
        width: w,
        height: h,
        correspondence,
        visible,
        vertex_pixel,
        projected,
        splat_radius,
    })
}

fn raster_triangle(p: [[f64; 2]; 3], z: [f64; 3], w: usize, h: usize, zbuf: &mut [f64]) {
    let edge = |a: [f64; 2], b: [f64; 2], x: f64, y: f64| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    let area = edge(p[0], p[1], p[2][0], p[2][1]);
    if area.abs() < 1e-12 {
        return;
    }
    let xmin = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let xmax = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
    let ymin = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let ymax = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
    if xmin > xmax || ymin > ymax {
        return;
    }
    let inv_z = [1.0 / z[0], 1.0 / z[1], 1.0 / z[2]];
    for y in (ymin as usize)..=(ymax as usize) {
        for x in (xmin as usize)..=(xmax as usize) {
            let (fx, fy) = (x as f64, y as f64);
            let b0 = edge(p[1], p[2], fx, fy) / area;
            let b1 = edge(p[2], p[0], fx, fy) / area;
            let b2 = 1.0 - b0 - b1;
            if b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9 {
                continue;
            }
            // Perspective-correct depth: 1/z is affine in screen space.
            let depth = 1.0 / (b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]);
            let i = y * w + x;
            if depth < zbuf[i] {
                zbuf[i] = depth;
            }
        }
    }
}
