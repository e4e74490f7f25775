//! Random deformations `phi = T o A`: an affine map followed by the
//! exponential of a stationary velocity field, plus composition, inversion
//! and backward warping.
//!
//! Displacements are world-frame millimetres stored on the voxel grid:
//! `phi(x) = x + u(x)`. Warping is backward: `out(x) = in(phi(x))`.
//! Displacement fields are resampled with edge clamping; intensities with
//! zero padding.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, upsample_to};
use crate::seed::Rng;
use crate::volume::{Geometry, LabelMap, Mask, Volume};

/// Deformation ranges. Identical across the three severity levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub rotation_max_deg: f64,
    pub shear_max: f64,
    pub scale_max: f64,
    pub translation_max_mm: f64,
    /// Velocity RMS as a fraction of the shortest volume extent.
    pub svf_mu_min: f64,
    pub svf_mu_max: f64,
    /// Upper bound of the control-grid smoothing std, in control voxels.
    pub svf_sigma_max: f64,
    pub control_spacing_mm: f64,
    pub svf_steps: usize,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 15.0,
            shear_max: 0.2,
            scale_max: 0.2,
            translation_max_mm: 0.0,
            svf_mu_min: 0.03,
            svf_mu_max: 0.06,
            svf_sigma_max: 4.0,
            control_spacing_mm: 16.0,
            svf_steps: 7,
        }
    }
}

impl DeformationConfig {
    /// No affine and no velocity: every draw is the identity.
    pub fn off() -> Self {
        Self {
            rotation_max_deg: 0.0,
            shear_max: 0.0,
            scale_max: 0.0,
            translation_max_mm: 0.0,
            svf_mu_min: 0.0,
            svf_mu_max: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("rotation_max_deg", self.rotation_max_deg),
            ("shear_max", self.shear_max),
            ("scale_max", self.scale_max),
            ("translation_max_mm", self.translation_max_mm),
            ("svf_mu_min", self.svf_mu_min),
            ("svf_sigma_max", self.svf_sigma_max),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.scale_max >= 1.0 {
            return Err(Error::InvalidConfig("scale_max must be < 1".into()));
        }
        if self.svf_mu_min > self.svf_mu_max {
            return Err(Error::InvalidConfig("svf_mu_min > svf_mu_max".into()));
        }
        if !(self.control_spacing_mm > 0.0) {
            return Err(Error::InvalidConfig("control_spacing_mm must be > 0".into()));
        }
        if self.svf_steps == 0 {
            return Err(Error::InvalidConfig("svf_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rotation (degrees), scaling factors, shears and translation (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub scaling: [f64; 3],
    pub shearing: [f64; 3],
    pub translation: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            scaling: [1.0; 3],
            shearing: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// `R * Sh * S` with `R = Rz Ry Rx` and upper-triangular shear.
    pub fn linear(&self) -> Matrix3<f64> {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ax.cos(), -ax.sin(), 0.0, ax.sin(), ax.cos());
        let ry = Matrix3::new(ay.cos(), 0.0, ay.sin(), 0.0, 1.0, 0.0, -ay.sin(), 0.0, ay.cos());
        let rz = Matrix3::new(az.cos(), -az.sin(), 0.0, az.sin(), az.cos(), 0.0, 0.0, 0.0, 1.0);
        let [h0, h1, h2] = self.shearing;
        let sh = Matrix3::new(1.0, h0, h1, 0.0, 1.0, h2, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::from(self.scaling));
        rz * ry * rx * sh * s
    }

    /// World-to-world map `p -> L (p - c) + c + t` about centre `c`.
    pub fn matrix(&self, center: [f64; 3]) -> Matrix4<f64> {
        let l = self.linear();
        let c = Vector3::from(center);
        let off = c - l * c + Vector3::from(self.translation);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&l);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&off);
        m
    }
}

/// Draws every affine parameter uniformly within its configured range.
pub fn sample_affine(rng: &mut Rng, cfg: &DeformationConfig) -> AffineParams {
    let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let rotation_deg = [(); 3].map(|_| sym(cfg.rotation_max_deg));
    let scaling = [(); 3].map(|_| 1.0 + sym(cfg.scale_max));
    let shearing = [(); 3].map(|_| sym(cfg.shear_max));
    let translation = [(); 3].map(|_| sym(cfg.translation_max_mm));
    AffineParams { rotation_deg, scaling, shearing, translation }
}

/// Stationary velocity field on a coarse control grid (components in mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Svf {
    pub coarse_dims: [usize; 3],
    pub control_spacing_mm: [f64; 3],
    pub amplitude_mm: f64,
    pub smoothing_sigma: f64,
    pub components: [Vec<f64>; 3],
}

impl Svf {
    pub fn zero(coarse_dims: [usize; 3]) -> Self {
        Self::constant(coarse_dims, [0.0; 3])
    }

    pub fn constant(coarse_dims: [usize; 3], c: [f64; 3]) -> Self {
        let n = coarse_dims.iter().product();
        Self {
            coarse_dims,
            control_spacing_mm: [0.0; 3],
            amplitude_mm: (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt(),
            smoothing_sigma: 0.0,
            components: c.map(|v| vec![v; n]),
        }
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for comp in out.components.iter_mut() {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    fn coarse_volumes(&self) -> Result<[Volume; 3]> {
        let g = Geometry::unit(self.coarse_dims);
        let mut vols = Vec::with_capacity(3);
        for c in &self.components {
            vols.push(Volume::new(g.clone(), c.clone())?);
        }
        Ok(vols.try_into().expect("three components"))
    }
}

fn coarse_dims_for(geometry: &Geometry, control_spacing: f64) -> [usize; 3] {
    geometry
        .extent()
        .map(|e| ((e / control_spacing).ceil() as usize + 1).max(2))
}

/// Random smooth velocity field: white noise on a control grid of roughly
/// `control_spacing_mm`, Gaussian-smoothed with std in `[1, sigma_max]`
/// control voxels, rescaled to an RMS of `mu * shortest extent` mm.
pub fn sample_svf(rng: &mut Rng, cfg: &DeformationConfig, geometry: &Geometry) -> Svf {
    let coarse_dims = coarse_dims_for(geometry, cfg.control_spacing_mm);
    let n: usize = coarse_dims.iter().product();
    let smoothing_sigma = if cfg.svf_sigma_max > 1.0 {
        rng.random_range(1.0..=cfg.svf_sigma_max)
    } else {
        cfg.svf_sigma_max
    };
    let mu = if cfg.svf_mu_max > cfg.svf_mu_min {
        rng.random_range(cfg.svf_mu_min..=cfg.svf_mu_max)
    } else {
        cfg.svf_mu_min
    };
    let min_extent = geometry.extent().into_iter().fold(f64::INFINITY, f64::min);
    let amplitude_mm = mu * min_extent;

    let g = Geometry::unit(coarse_dims);
    let mut components: [Vec<f64>; 3] = [(); 3].map(|_| {
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let v = Volume::new(g.clone(), noise).expect("coarse length");
        gaussian_blur(&v, [smoothing_sigma; 3]).into_data()
    });
    let sq: f64 = components.iter().flat_map(|c| c.iter()).map(|v| v * v).sum();
    let rms = (sq / (3 * n) as f64).sqrt();
    let scale = if rms > 0.0 { amplitude_mm / rms } else { 0.0 };
    for c in components.iter_mut() {
        c.iter_mut().for_each(|v| *v *= scale);
    }
    let control_spacing_mm = [0, 1, 2].map(|a| geometry.extent()[a] / (coarse_dims[a] - 1) as f64);
    Svf { coarse_dims, control_spacing_mm, amplitude_mm, smoothing_sigma, components }
}

/// Where a field came from; used for exact inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Identity,
    /// World-to-world affine, row-major 4x4.
    Affine { matrix: [[f64; 4]; 4] },
    Velocity { svf: Svf, steps: usize },
    /// `T o A`.
    Generated { affine: AffineParams, matrix: [[f64; 4]; 4], svf: Svf, steps: usize },
    /// `A^-1 o T^-1` of a generated field.
    InverseOfGenerated { affine: AffineParams, matrix: [[f64; 4]; 4], svf: Svf, steps: usize },
    Composed,
    FixedPointInverse,
    Loaded,
}

fn to_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn from_rows(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

/// Dense displacement field with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    components: [Volume; 3],
    provenance: Provenance,
    id: u64,
}

/// Reads displacement at arbitrary voxel coordinates of the field grid.
struct Sampler<'a> {
    comps: &'a [Volume; 3],
    /// world displacement -> voxel offset
    to_voxel: Matrix3<f64>,
}

impl<'a> Sampler<'a> {
    fn new(field: &'a DeformationField) -> Self {
        let to_voxel = field
            .geometry()
            .linear()
            .try_inverse()
            .expect("geometry linear part is invertible");
        Self { comps: &field.components, to_voxel }
    }

    #[inline]
    fn voxel_offset(&self, u: [f64; 3]) -> [f64; 3] {
        let v = self.to_voxel * Vector3::from(u);
        [v[0], v[1], v[2]]
    }

    #[inline]
    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.comps[0].sample_clamped(p),
            self.comps[1].sample_clamped(p),
            self.comps[2].sample_clamped(p),
        ]
    }
}

#[inline]
fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn coords_f(c: [usize; 3]) -> [f64; 3] {
    c.map(|x| x as f64)
}

impl DeformationField {
    pub fn new(geometry: &Geometry, components: [Vec<f64>; 3], provenance: Provenance) -> Result<Self> {
        let [a, b, c] = components;
        let comps = [
            Volume::new(geometry.clone(), a)?,
            Volume::new(geometry.clone(), b)?,
            Volume::new(geometry.clone(), c)?,
        ];
        if !comps.iter().all(Volume::is_finite) {
            return Err(Error::NonFiniteField);
        }
        let id = field_id(&provenance, &comps);
        Ok(Self { components: comps, provenance, id })
    }

    fn from_fn(
        geometry: &Geometry,
        provenance: Provenance,
        f: impl Fn([usize; 3]) -> [f64; 3] + Sync,
    ) -> Result<Self> {
        let vals: Vec<[f64; 3]> = (0..geometry.voxel_count())
            .into_par_iter()
            .map(|idx| f(geometry.coords(idx)))
            .collect();
        let comps = [0, 1, 2].map(|c| vals.iter().map(|v| v[c]).collect::<Vec<_>>());
        Self::new(geometry, comps, provenance)
    }

    pub fn identity(geometry: &Geometry) -> Self {
        let n = geometry.voxel_count();
        Self::new(geometry, [vec![0.0; n], vec![0.0; n], vec![0.0; n]], Provenance::Identity)
            .expect("zeros are finite")
    }

    /// Dense field of a world-to-world affine map.
    pub fn from_matrix(geometry: &Geometry, m: &Matrix4<f64>) -> Result<Self> {
        let g2w = *geometry.grid_to_world();
        Self::from_fn(geometry, Provenance::Affine { matrix: to_rows(m) }, |c| {
            let p = g2w * Vector4::new(c[0] as f64, c[1] as f64, c[2] as f64, 1.0);
            let q = m * p;
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
    }

    /// Affine about the grid centre.
    pub fn from_affine(geometry: &Geometry, params: &AffineParams) -> Result<Self> {
        Self::from_matrix(geometry, &params.matrix(geometry.center_world()))
    }

    /// Loaded or otherwise provenance-free field.
    pub fn from_components(geometry: &Geometry, components: [Vec<f64>; 3]) -> Result<Self> {
        Self::new(geometry, components, Provenance::Loaded)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.id = field_id(&provenance, &self.components);
        self.provenance = provenance;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        self.components[0].geometry()
    }

    pub fn components(&self) -> &[Volume; 3] {
        &self.components
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Content hash identifying this field.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn displacement(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [0, 1, 2].map(|c| self.components[c].get(i, j, k))
    }

    /// Largest displacement norm in voxels of the smallest spacing.
    pub fn max_displacement_voxels(&self) -> f64 {
        let s = self.geometry().spacing().into_iter().fold(f64::INFINITY, f64::min);
        (0..self.geometry().voxel_count())
            .map(|i| norm3([0, 1, 2].map(|c| self.components[c].data()[i])) / s)
            .fold(0.0, f64::max)
    }
}

fn field_id(provenance: &Provenance, comps: &[Volume; 3]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(provenance).unwrap_or_default());
    for c in comps {
        for v in c.data() {
            h.update(v.to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32 bytes"))
}

#[inline]
fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `geometry` grown by `pad` voxels on every side, same world frame.
fn padded_geometry(geometry: &Geometry, pad: usize) -> Geometry {
    let shift = geometry.linear() * Vector3::repeat(-(pad as f64));
    let mut m = *geometry.grid_to_world();
    for a in 0..3 {
        m[(a, 3)] += shift[a];
    }
    Geometry::new(geometry.dims().map(|n| n + 2 * pad), geometry.spacing(), m).expect("translated geometry stays valid")
}

/// `exp(v)` on `geometry` grown by enough voxels that no squaring lookup
/// for an interior point leaves the grid. The velocity is extended past
/// the faces by its edge values. Returns the field and the pad.
fn integrate_padded(svf: &Svf, geometry: &Geometry, steps: usize) -> Result<(DeformationField, usize)> {
    if steps == 0 {
        return Err(Error::InvalidConfig("scaling-and-squaring needs at least one step".into()));
    }
    if !svf.is_finite() {
        return Err(Error::NonFiniteField);
    }
    let coarse = svf.coarse_volumes()?;
    let v = coarse.map(|c| upsample_to(&c, geometry));
    let min_spacing = geometry.spacing().into_iter().fold(f64::INFINITY, f64::min);
    let vmax = (0..geometry.voxel_count())
        .map(|i| norm3([v[0].data()[i], v[1].data()[i], v[2].data()[i]]))
        .fold(0.0, f64::max);
    let pad = (vmax / min_spacing).ceil() as usize + 1;
    let padded = padded_geometry(geometry, pad);
    let d = geometry.dims();
    let scale = 0.5f64.powi(steps as i32);
    let mut field = DeformationField::from_fn(&padded, Provenance::Composed, |c| {
        let [i, j, k] = [0, 1, 2].map(|a| c[a].saturating_sub(pad).min(d[a] - 1));
        [0, 1, 2].map(|a| v[a].get(i, j, k) * scale)
    })?;
    for _ in 0..steps {
        field = compose_fields(&field, &field, Provenance::Composed)?;
    }
    if !field.components.iter().all(Volume::is_finite) {
        return Err(Error::NonFiniteField);
    }
    Ok((field, pad))
}

/// `exp(v)` by scaling and squaring: `d0 = v / 2^steps`, then
/// `d <- d + d(x + d)` `steps` times. The coarse grid is upsampled to
/// `geometry` first.
pub fn integrate_svf(svf: &Svf, geometry: &Geometry, steps: usize) -> Result<DeformationField> {
    let (padded, pad) = integrate_padded(svf, geometry, steps)?;
    let provenance = Provenance::Velocity { svf: svf.clone(), steps };
    DeformationField::from_fn(geometry, provenance, |c| padded.displacement(c[0] + pad, c[1] + pad, c[2] + pad))
}

fn compose_fields(outer: &DeformationField, inner: &DeformationField, provenance: Provenance) -> Result<DeformationField> {
    outer
        .geometry()
        .ensure_matches(inner.geometry(), "deformation composition")?;
    let s = Sampler::new(outer);
    DeformationField::from_fn(outer.geometry(), provenance, |c| {
        let u_in = inner.displacement(c[0], c[1], c[2]);
        let q = add3(coords_f(c), s.voxel_offset(u_in));
        add3(u_in, s.at(q))
    })
}

/// `(outer o inner)(x) = outer(inner(x))`, resampling `outer` trilinearly.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    compose_fields(outer, inner, Provenance::Composed)
}

/// `outer o A` for an affine about the grid centre.
pub fn compose_affine(outer: &DeformationField, inner: &AffineParams) -> Result<DeformationField> {
    let m = inner.matrix(outer.geometry().center_world());
    compose_matrix(outer.geometry(), outer, &m, Provenance::Composed)
}

/// `outer o m` on `g`; `outer` may live on a larger grid in the same frame.
fn compose_matrix(g: &Geometry, outer: &DeformationField, m: &Matrix4<f64>, provenance: Provenance) -> Result<DeformationField> {
    let g2w = *g.grid_to_world();
    let w2g = outer.geometry().world_to_grid();
    let s = Sampler::new(outer);
    DeformationField::from_fn(g, provenance, |c| {
        let p = g2w * Vector4::new(c[0] as f64, c[1] as f64, c[2] as f64, 1.0);
        let a = m * p;
        let q = w2g * a;
        let u = s.at([q[0], q[1], q[2]]);
        [a[0] + u[0] - p[0], a[1] + u[1] - p[1], a[2] + u[2] - p[2]]
    })
}

/// Draws `phi = T o A` on `geometry`.
pub fn generate_deformation(rng: &mut Rng, cfg: &DeformationConfig, geometry: &Geometry) -> Result<DeformationField> {
    cfg.validate()?;
    let affine = sample_affine(rng, cfg);
    let svf = sample_svf(rng, cfg, geometry);
    build_generated(geometry, affine, svf, cfg.svf_steps)
}

/// Realises `T o A` from explicit parameters.
pub fn build_generated(geometry: &Geometry, affine: AffineParams, svf: Svf, steps: usize) -> Result<DeformationField> {
    let m = affine.matrix(geometry.center_world());
    let (t, _) = integrate_padded(&svf, geometry, steps)?;
    let provenance = Provenance::Generated { affine, matrix: to_rows(&m), svf, steps };
    compose_matrix(geometry, &t, &m, provenance)
}

fn build_inverse_generated(
    geometry: &Geometry,
    affine: AffineParams,
    matrix: [[f64; 4]; 4],
    svf: Svf,
    steps: usize,
) -> Result<DeformationField> {
    let m = from_rows(&matrix);
    let m_inv = m
        .try_inverse()
        .ok_or(Error::NotInvertible { residual: f64::INFINITY })?;
    let t_inv = integrate_svf(&svf.negated(), geometry, steps)?;
    let g2w = *geometry.grid_to_world();
    let provenance = Provenance::InverseOfGenerated { affine, matrix, svf, steps };
    DeformationField::from_fn(geometry, provenance, |c| {
        let p = g2w * Vector4::new(c[0] as f64, c[1] as f64, c[2] as f64, 1.0);
        let w = t_inv.displacement(c[0], c[1], c[2]);
        let y = Vector4::new(p[0] + w[0], p[1] + w[1], p[2] + w[2], 1.0);
        let q = m_inv * y;
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    })
}

pub const FIXED_POINT_ITERATIONS: usize = 20;

/// Inverse map. Generated fields invert exactly as `A^-1 o exp(-v)`;
/// affine and velocity fields analytically; anything else by fixed-point
/// iteration `w <- -u(x + w)`.
pub fn invert(field: &DeformationField) -> Result<DeformationField> {
    let g = field.geometry();
    match field.provenance.clone() {
        Provenance::Identity => Ok(DeformationField::identity(g)),
        Provenance::Affine { matrix } => {
            let m_inv = from_rows(&matrix)
                .try_inverse()
                .ok_or(Error::NotInvertible { residual: f64::INFINITY })?;
            DeformationField::from_matrix(g, &m_inv)
        }
        Provenance::Velocity { svf, steps } => integrate_svf(&svf.negated(), g, steps),
        Provenance::Generated { affine, matrix, svf, steps } => {
            build_inverse_generated(g, affine, matrix, svf, steps)
        }
        Provenance::InverseOfGenerated { affine, svf, steps, .. } => build_generated(g, affine, svf, steps),
        Provenance::Composed | Provenance::FixedPointInverse | Provenance::Loaded => {
            invert_fixed_point(field, FIXED_POINT_ITERATIONS)
        }
    }
}

/// Fixed-point inversion with unit step; fails if the residual
/// `|w + u(x + w)|` exceeds one voxel anywhere.
pub fn invert_fixed_point(field: &DeformationField, iterations: usize) -> Result<DeformationField> {
    let g = field.geometry();
    let s = Sampler::new(field);
    let n = g.voxel_count();
    let mut w: Vec<[f64; 3]> = (0..n)
        .map(|i| [0, 1, 2].map(|c| -field.components[c].data()[i]))
        .collect();
    for _ in 0..iterations {
        w = (0..n)
            .into_par_iter()
            .map(|i| {
                let q = add3(coords_f(g.coords(i)), s.voxel_offset(w[i]));
                s.at(q).map(|x| -x)
            })
            .collect();
    }
    let min_spacing = g.spacing().into_iter().fold(f64::INFINITY, f64::min);
    let residual = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = add3(coords_f(g.coords(i)), s.voxel_offset(w[i]));
            norm3(add3(w[i], s.at(q))) / min_spacing
        })
        .reduce(|| 0.0, f64::max);
    if !(residual <= 1.0) {
        return Err(Error::NotInvertible { residual });
    }
    let comps = [0, 1, 2].map(|c| w.iter().map(|v| v[c]).collect::<Vec<_>>());
    DeformationField::new(g, comps, Provenance::FixedPointInverse)
}

fn warp_coords(field: &DeformationField) -> Vec<[f64; 3]> {
    let g = field.geometry();
    let s = Sampler::new(field);
    (0..g.voxel_count())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            add3(coords_f(c), s.voxel_offset(field.displacement(c[0], c[1], c[2])))
        })
        .collect()
}

/// `out(x) = v(phi(x))`, trilinear with zero padding.
pub fn warp_volume(v: &Volume, field: &DeformationField) -> Result<Volume> {
    v.geometry().ensure_matches(field.geometry(), "warp_volume")?;
    let coords = warp_coords(field);
    v.with_data(coords.par_iter().map(|&p| v.trilinear_sample(p)).collect())
}

/// Nearest-neighbour label warp; never invents labels.
pub fn warp_labels(lm: &LabelMap, field: &DeformationField) -> Result<LabelMap> {
    lm.geometry().ensure_matches(field.geometry(), "warp_labels")?;
    let coords = warp_coords(field);
    LabelMap::new(
        lm.geometry().clone(),
        coords.par_iter().map(|&p| lm.nearest_sample(p)).collect(),
    )
}

/// Warps onto the field's grid when only the dims agree: displacement is
/// converted to voxel offsets with the field's geometry, and the result
/// carries the field's geometry.
pub fn warp_volume_onto(v: &Volume, field: &DeformationField) -> Result<Volume> {
    if v.dims() != field.geometry().dims() {
        return Err(Error::GeometryMismatch(format!(
            "volume dims {:?} vs field dims {:?}",
            v.dims(),
            field.geometry().dims()
        )));
    }
    let coords = warp_coords(field);
    Volume::new(
        field.geometry().clone(),
        coords.par_iter().map(|&p| v.trilinear_sample(p)).collect(),
    )
}

/// Residual statistics of a composed map that should be the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub mean_voxels: f64,
    pub max_voxels: f64,
    pub count: usize,
}

/// Residual of `phi o inverse` in voxels over interior voxels: at least
/// `margin` voxels from every face and whose intermediate point
/// `inverse(x)` stays inside the grid.
pub fn inverse_consistency(
    phi: &DeformationField,
    inverse: &DeformationField,
    margin: usize,
) -> Result<ResidualStats> {
    let composed = compose(phi, inverse)?;
    let g = phi.geometry();
    let dims = g.dims();
    let inset = Mask::inset(dims, margin);
    let s = Sampler::new(inverse);
    let min_spacing = g.spacing().into_iter().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0usize;
    for i in 0..g.voxel_count() {
        let c = g.coords(i);
        if !inset.get(c[0], c[1], c[2]) {
            continue;
        }
        let q = add3(coords_f(c), s.voxel_offset(inverse.displacement(c[0], c[1], c[2])));
        if (0..3).any(|a| !(q[a] >= 0.0 && q[a] <= (dims[a] - 1) as f64)) {
            continue;
        }
        let r = norm3(composed.displacement(c[0], c[1], c[2])) / min_spacing;
        sum += r;
        max = max.max(r);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(ResidualStats { mean_voxels: sum / count as f64, max_voxels: max, count })
}
