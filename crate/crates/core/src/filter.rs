//! Separable smoothing and grid resampling helpers.

use rayon::prelude::*;

use crate::volume::{Geometry, Volume};

/// Normalised 1D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Convolves along one axis with replicated borders. `sigma` is in voxels;
/// zero leaves the volume unchanged.
pub fn gaussian_blur_axis(v: &Volume, axis: usize, sigma: f64) -> Volume {
    if !(sigma > 0.0) {
        return v.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let g = v.geometry();
    let n = g.dims()[axis] as isize;
    let data = v.data();
    let out = (0..g.voxel_count())
        .into_par_iter()
        .map(|idx| {
            let c = g.coords(idx);
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let mut q = c;
                q[axis] = (c[axis] as isize + t as isize - radius).clamp(0, n - 1) as usize;
                acc += w * data[g.index(q[0], q[1], q[2])];
            }
            acc
        })
        .collect();
    v.with_data(out).expect("same geometry")
}

/// Per-axis Gaussian smoothing, sigma in voxels.
pub fn gaussian_blur(v: &Volume, sigma: [f64; 3]) -> Volume {
    let mut out = v.clone();
    for (axis, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            out = gaussian_blur_axis(&out, axis, s);
        }
    }
    out
}

/// Samples `v` (edge-clamped trilinear) onto a new grid of `dims` where
/// output voxel `i` reads input coordinate `i * step` per axis.
pub fn resample_scaled(v: &Volume, dims: [usize; 3], step: [f64; 3], geometry: Geometry) -> Volume {
    debug_assert_eq!(geometry.dims(), dims);
    Volume::from_fn(geometry, |i, j, k| {
        v.sample_clamped([i as f64 * step[0], j as f64 * step[1], k as f64 * step[2]])
    })
}

/// Upsamples a coarse grid so that its corner nodes coincide with the
/// corners of `target`.
pub fn upsample_to(coarse: &Volume, target: &Geometry) -> Volume {
    let cd = coarse.dims();
    let td = target.dims();
    let step = [0, 1, 2].map(|a| {
        if td[a] > 1 {
            (cd[a] as f64 - 1.0) / (td[a] as f64 - 1.0)
        } else {
            0.0
        }
    });
    resample_scaled(coarse, td, step, target.clone())
}

/// 2x2x2 average pooling (odd trailing voxels dropped). Spacing doubles.
pub fn downsample_by_two(v: &Volume) -> Volume {
    let d = v.dims();
    let nd = d.map(|n| (n / 2).max(1));
    let sp = v.geometry().spacing();
    let geometry = Geometry::with_spacing(nd, [sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0])
        .expect("doubled spacing stays positive");
    Volume::from_fn(geometry, |i, j, k| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let (x, y, z) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                    if x < d[0] && y < d[1] && z < d[2] {
                        acc += v.get(x, y, z);
                        n += 1.0;
                    }
                }
            }
        }
        acc / n
    })
}
