//! Dense 3D volumes, label maps and channel stacks.
//!
//! Data is stored x-fastest (`i + nx * (j + ny * k)`), the NIfTI on-disk
//! order. Intensities are `f64`; labels are `u32`.

use nalgebra::{Matrix3, Matrix4, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};

const GEOMETRY_TOL: f64 = 1e-6;

/// Grid shape, voxel spacing (mm) and voxel-to-world affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    grid_to_world: Matrix4<f64>,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], grid_to_world: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let linear: Matrix3<f64> = grid_to_world.fixed_view::<3, 3>(0, 0).into();
        if !(linear.determinant().abs() > 1e-12) || grid_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("grid_to_world is not invertible".into()));
        }
        let mut grid_to_world = grid_to_world;
        grid_to_world.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        Ok(Self { dims, spacing, grid_to_world })
    }

    /// Axis-aligned grid with the origin at voxel (0, 0, 0).
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let affine = Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        Self::new(dims, spacing, affine)
    }

    /// 1 mm isotropic, axis-aligned grid.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::with_spacing(dims, [1.0; 3]).expect("unit geometry is always valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn grid_to_world(&self) -> &Matrix4<f64> {
        &self.grid_to_world
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Upper-left 3x3 block of `grid_to_world`.
    pub fn linear(&self) -> Matrix3<f64> {
        self.grid_to_world.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn world_to_grid(&self) -> Matrix4<f64> {
        self.grid_to_world
            .try_inverse()
            .expect("validated at construction")
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.grid_to_world * Vector4::new(p[0], p[1], p[2], 1.0);
        [w[0], w[1], w[2]]
    }

    /// World coordinate of the grid centre.
    pub fn center_world(&self) -> [f64; 3] {
        let c = self.dims.map(|n| (n as f64 - 1.0) / 2.0);
        self.voxel_to_world(c)
    }

    /// Physical extent `(n - 1) * spacing` along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] as f64 - 1.0) * self.spacing[a])
    }

    /// Same dims, and spacing / affine equal to within 1e-6.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOL)
            && (self.grid_to_world - other.grid_to_world).amax() <= GEOMETRY_TOL
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} / spacing {:?} vs dims {:?} / spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Dense scalar volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.voxel_count();
        Self { geometry, data: vec![value; n] }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Self {
        let data = (0..geometry.voxel_count())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = geometry.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Same geometry, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.geometry.clone(), data)
    }

    /// Re-tag the data with another geometry of the same dims.
    pub fn retag(self, geometry: Geometry) -> Result<Self> {
        Self::new(geometry, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        Self {
            geometry: self.geometry.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Self> {
        self.geometry.ensure_matches(&other.geometry, "elementwise operation")?;
        Ok(Self {
            geometry: self.geometry.clone(),
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Trilinear interpolation at a continuous voxel coordinate. Points
    /// outside `[0, n-1]` on any axis read as zero.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        let dims = self.geometry.dims;
        for a in 0..3 {
            if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
                return 0.0;
            }
        }
        self.interpolate_inside(p)
    }

    /// Trilinear interpolation with coordinates clamped to the grid, so the
    /// border value extends outward.
    pub fn sample_clamped(&self, p: [f64; 3]) -> f64 {
        let dims = self.geometry.dims;
        let mut q = p;
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            q[a] = if q[a].is_nan() { 0.0 } else { q[a].clamp(0.0, hi) };
        }
        self.interpolate_inside(q)
    }

    #[inline]
    fn interpolate_inside(&self, p: [f64; 3]) -> f64 {
        let dims = self.geometry.dims;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let f = p[a].floor();
            let i0 = (f as usize).min(dims[a] - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(dims[a] - 1);
            t[a] = p[a] - i0 as f64;
        }
        let g = &self.geometry;
        let d = &self.data;
        let c00 = d[g.index(lo[0], lo[1], lo[2])] * (1.0 - t[0]) + d[g.index(hi[0], lo[1], lo[2])] * t[0];
        let c10 = d[g.index(lo[0], hi[1], lo[2])] * (1.0 - t[0]) + d[g.index(hi[0], hi[1], lo[2])] * t[0];
        let c01 = d[g.index(lo[0], lo[1], hi[2])] * (1.0 - t[0]) + d[g.index(hi[0], lo[1], hi[2])] * t[0];
        let c11 = d[g.index(lo[0], hi[1], hi[2])] * (1.0 - t[0]) + d[g.index(hi[0], hi[1], hi[2])] * t[0];
        let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
        let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[2]) + c1 * t[2]
    }

    /// Finite-difference gradient in intensity/mm: central differences in
    /// the interior, one-sided at the faces.
    pub fn spatial_gradient(&self) -> Result<VolumeStack> {
        let dims = self.geometry.dims;
        if let Some(axis) = (0..3).find(|&a| dims[a] < 2) {
            return Err(Error::DegenerateGrid { axis, dims });
        }
        let spacing = self.geometry.spacing;
        let g = &self.geometry;
        let channels = (0..3)
            .map(|axis| {
                let n = dims[axis];
                let h = spacing[axis];
                Volume::from_fn(g.clone(), |i, j, k| {
                    let c = [i, j, k];
                    let at = |m: usize| {
                        let mut q = c;
                        q[axis] = m;
                        self.data[g.index(q[0], q[1], q[2])]
                    };
                    let x = c[axis];
                    if x == 0 {
                        (at(1) - at(0)) / h
                    } else if x == n - 1 {
                        (at(n - 1) - at(n - 2)) / h
                    } else {
                        (at(x + 1) - at(x - 1)) / (2.0 * h)
                    }
                })
            })
            .collect();
        VolumeStack::new(channels)
    }

    /// Affine rescale to `[0, 1]`; constant volumes map to zero.
    pub fn minmax_normalize(&self) -> Volume {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        if !(range > 0.0) {
            return Volume::filled(self.geometry.clone(), 0.0);
        }
        self.map(|v| (v - lo) / range)
    }
}

/// Dense label volume; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    data: Vec<u32>,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<u32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        let mut label_set = data.clone();
        label_set.sort_unstable();
        label_set.dedup();
        Ok(Self { geometry, data, label_set })
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> u32 + Sync) -> Self {
        let data: Vec<u32> = (0..geometry.voxel_count())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = geometry.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::new(geometry, data).expect("length matches by construction")
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted unique labels present, including 0 when present.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    pub fn foreground_labels(&self) -> Vec<u32> {
        self.label_set.iter().copied().filter(|&l| l != 0).collect()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Label of the nearest voxel, ties toward the lower index; outside the
    /// grid reads as background.
    pub fn nearest_sample(&self, p: [f64; 3]) -> u32 {
        let dims = self.geometry.dims;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = (p[a] - 0.5).ceil();
            if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
                return 0;
            }
            idx[a] = r as usize;
        }
        self.data[self.geometry.index(idx[0], idx[1], idx[2])]
    }

    /// Labels as intensities.
    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&l| l as f64).collect(),
        }
    }

    pub fn foreground_mask(&self) -> Mask {
        Mask {
            dims: self.geometry.dims,
            data: self.data.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Ordered channels sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeStack {
    channels: Vec<Volume>,
}

impl VolumeStack {
    pub fn new(channels: Vec<Volume>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidVolume("a stack needs at least one channel".into()))?;
        for (c, ch) in channels.iter().enumerate().skip(1) {
            first
                .geometry
                .ensure_matches(&ch.geometry, &format!("stack channel {c}"))?;
        }
        Ok(Self { channels })
    }

    pub fn single(v: Volume) -> Self {
        Self { channels: vec![v] }
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Volume> {
        self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.channels[0].geometry
    }
}

/// Boolean voxel selection over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidVolume("mask length does not match dims".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![true; dims.iter().product()] }
    }

    /// Voxels at least `margin` voxels away from every face.
    pub fn inset(dims: [usize; 3], margin: usize) -> Self {
        let g = Geometry::unit(dims);
        let data = (0..g.voxel_count())
            .map(|idx| {
                let c = g.coords(idx);
                (0..3).all(|a| c[a] >= margin && c[a] + margin < dims[a])
            })
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::GeometryMismatch("mask dims differ".into()));
        }
        Ok(Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// Binary erosion with a 6-connected structuring element, applied
    /// `iterations` times. Voxels on the grid faces are removed.
    pub fn erode(&self, iterations: usize) -> Mask {
        let g = Geometry::unit(self.dims);
        let dims = self.dims;
        let mut cur = self.data.clone();
        for _ in 0..iterations {
            let next = (0..cur.len())
                .map(|idx| {
                    if !cur[idx] {
                        return false;
                    }
                    let c = g.coords(idx);
                    for a in 0..3 {
                        if c[a] == 0 || c[a] + 1 >= dims[a] {
                            return false;
                        }
                        for d in [-1isize, 1] {
                            let mut q = c;
                            q[a] = (q[a] as isize + d) as usize;
                            if !cur[g.index(q[0], q[1], q[2])] {
                                return false;
                            }
                        }
                    }
                    true
                })
                .collect();
            cur = next;
        }
        Mask { dims, data: cur }
    }

    pub fn ensure_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "mask dims {:?} vs volume dims {:?}",
                self.dims, dims
            )))
        }
    }
}
