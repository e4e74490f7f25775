//! Image and segmentation quality metrics: L1, PSNR, SSIM, MS-SSIM, Dice
//! and the scale-invariant bias-field distance.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::downsample_by_two;
use crate::volume::{LabelMap, Mask, Volume};

fn check_pair(a: &Volume, b: &Volume, what: &str) -> Result<()> {
    a.geometry().ensure_matches(b.geometry(), what)
}

fn masked_pairs<'a>(
    a: &'a Volume,
    b: &'a Volume,
    mask: Option<&'a Mask>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if let Some(m) = mask {
        m.ensure_dims(a.dims())?;
        if m.count() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data()[*i]))
        .map(|(_, (&x, &y))| (x, y)))
}

/// Mean absolute difference over `mask` (whole grid when `None`).
pub fn l1(a: &Volume, b: &Volume, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, "l1")?;
    let (sum, n) = masked_pairs(a, b, mask)?.fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).abs(), n + 1));
    Ok(sum / n as f64)
}

pub fn mse(a: &Volume, b: &Volume, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, "mse")?;
    let (sum, n) = masked_pairs(a, b, mask)?.fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y) * (x - y), n + 1));
    Ok(sum / n as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(pred: &Volume, reference: &Volume, peak: f64) -> Result<f64> {
    let m = mse(pred, reference, None)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimParams {
    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Valid-mode box sums of width `w` along every axis.
fn box_sums(data: &[f64], dims: [usize; 3], w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - w;
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let src = &cur;
        let out: Vec<f64> = (0..nd[0] * nd[1] * nd[2])
            .into_par_iter()
            .map(|idx| {
                let i = idx % nd[0];
                let j = (idx / nd[0]) % nd[1];
                let k = idx / (nd[0] * nd[1]);
                let base = i + d[0] * (j + d[1] * k);
                (0..w).map(|t| src[base + t * stride]).sum()
            })
            .collect();
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Per-window luminance, contrast-structure and full SSIM maps over every
/// fully contained window position.
struct SsimMaps {
    dims: [usize; 3],
    cs: Vec<f64>,
    full: Vec<f64>,
}

fn ssim_maps(a: &Volume, b: &Volume, p: &SsimParams) -> Result<SsimMaps> {
    check_pair(a, b, "ssim")?;
    let dims = a.dims();
    if dims.iter().any(|&n| n < p.window) || p.window == 0 {
        return Err(Error::TooSmallForScales { dims, window: p.window, scales: 1 });
    }
    let ad = a.data();
    let bd = b.data();
    let prod = |f: &(dyn Fn(f64, f64) -> f64 + Sync)| -> Vec<f64> {
        ad.par_iter().zip(bd.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    };
    let w = p.window;
    let (sa, od) = box_sums(ad, dims, w);
    let (sb, _) = box_sums(bd, dims, w);
    let (saa, _) = box_sums(&prod(&|x, _| x * x), dims, w);
    let (sbb, _) = box_sums(&prod(&|_, y| y * y), dims, w);
    let (sab, _) = box_sums(&prod(&|x, y| x * y), dims, w);
    let n = (w * w * w) as f64;
    let (c1, c2) = (p.c1(), p.c2());
    let (cs, full): (Vec<f64>, Vec<f64>) = (0..sa.len())
        .into_par_iter()
        .map(|i| {
            let ma = sa[i] / n;
            let mb = sb[i] / n;
            let va = saa[i] / n - ma * ma;
            let vb = sbb[i] / n - mb * mb;
            let cov = sab[i] / n - ma * mb;
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            (cs, lum * cs)
        })
        .unzip();
    Ok(SsimMaps { dims: od, cs, full })
}

/// Window positions whose centre lies in `mask`.
fn centre_selection(mask: Option<&Mask>, full_dims: [usize; 3], map_dims: [usize; 3], w: usize) -> Result<Option<Vec<bool>>> {
    let Some(m) = mask else { return Ok(None) };
    m.ensure_dims(full_dims)?;
    let h = w / 2;
    let sel: Vec<bool> = (0..map_dims.iter().product())
        .map(|idx| {
            let i = idx % map_dims[0];
            let j = (idx / map_dims[0]) % map_dims[1];
            let k = idx / (map_dims[0] * map_dims[1]);
            m.get(i + h, j + h, k + h)
        })
        .collect();
    if !sel.iter().any(|&s| s) {
        return Err(Error::EmptyMask);
    }
    Ok(Some(sel))
}

fn masked_mean(values: &[f64], sel: Option<&[bool]>) -> f64 {
    match sel {
        None => values.iter().sum::<f64>() / values.len() as f64,
        Some(s) => {
            let (sum, n) = values
                .iter()
                .zip(s)
                .filter(|(_, &k)| k)
                .fold((0.0, 0usize), |(acc, n), (v, _)| (acc + v, n + 1));
            sum / n as f64
        }
    }
}

/// Mean SSIM over all fully contained windows (uniform window, population
/// statistics).
pub fn ssim(a: &Volume, b: &Volume, params: &SsimParams) -> Result<f64> {
    ssim_masked(a, b, None, params)
}

/// SSIM averaged over windows centred inside `mask`.
pub fn ssim_masked(a: &Volume, b: &Volume, mask: Option<&Mask>, params: &SsimParams) -> Result<f64> {
    let maps = ssim_maps(a, b, params)?;
    let sel = centre_selection(mask, a.dims(), maps.dims, params.window)?;
    Ok(masked_mean(&maps.full, sel.as_deref()))
}

/// Conventional five-scale weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales.min(MS_SSIM_WEIGHTS.len())];
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

pub fn ms_ssim(a: &Volume, b: &Volume, scales: usize, params: &SsimParams) -> Result<f64> {
    ms_ssim_masked(a, b, None, scales, params)
}

/// A coarse voxel stays in the mask only if all of its children were.
fn downsample_mask(m: &Mask) -> Mask {
    let d = m.dims();
    let nd = d.map(|n| (n / 2).max(1));
    let data = (0..nd.iter().product())
        .map(|idx| {
            let i = idx % nd[0];
            let j = (idx / nd[0]) % nd[1];
            let k = idx / (nd[0] * nd[1]);
            let mut all = true;
            for dk in 0..2 {
                for dj in 0..2 {
                    for di in 0..2 {
                        let (x, y, z) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                        if x < d[0] && y < d[1] && z < d[2] {
                            all &= m.get(x, y, z);
                        }
                    }
                }
            }
            all
        })
        .collect();
    Mask::new(nd, data).expect("consistent dims")
}

/// Weighted product of contrast-structure terms at the finer scales and the
/// full SSIM at the coarsest, with 2x average pooling between scales.
pub fn ms_ssim_masked(a: &Volume, b: &Volume, mask: Option<&Mask>, scales: usize, params: &SsimParams) -> Result<f64> {
    check_pair(a, b, "ms-ssim")?;
    let dims = a.dims();
    let need = params.window << scales.saturating_sub(1);
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() || dims.iter().any(|&n| n < need) {
        return Err(Error::TooSmallForScales { dims, window: params.window, scales });
    }
    if scales == 1 {
        return ssim_masked(a, b, mask, params);
    }
    let weights = ms_ssim_weights(scales);
    let mut a = a.clone();
    let mut b = b.clone();
    let mut m = mask.cloned();
    let mut out = 1.0;
    for (s, w) in weights.iter().enumerate() {
        let maps = ssim_maps(&a, &b, params)?;
        let sel = centre_selection(m.as_ref(), a.dims(), maps.dims, params.window)?;
        let last = s + 1 == scales;
        let value = if last {
            masked_mean(&maps.full, sel.as_deref())
        } else {
            masked_mean(&maps.cs, sel.as_deref())
        };
        out *= value.max(0.0).powf(*w);
        if !last {
            a = downsample_by_two(&a);
            b = downsample_by_two(&b);
            m = m.as_ref().map(downsample_mask);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// `None` for labels absent from both maps.
    pub per_label: BTreeMap<u32, Option<f64>>,
    pub mean: Option<f64>,
}

/// Per-label Dice. With `labels = None` the union of foreground labels of
/// both maps is scored.
pub fn dice(pred: &LabelMap, reference: &LabelMap, labels: Option<&[u32]>) -> Result<DiceReport> {
    pred.geometry().ensure_matches(reference.geometry(), "dice")?;
    let set: BTreeSet<u32> = match labels {
        Some(l) => l.iter().copied().collect(),
        None => pred.foreground_labels().into_iter().chain(reference.foreground_labels()).collect(),
    };
    let mut counts: BTreeMap<u32, [usize; 3]> = set.iter().map(|&l| (l, [0; 3])).collect();
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        if let Some(c) = counts.get_mut(&p) {
            c[0] += 1;
            if p == r {
                c[2] += 1;
            }
        }
        if let Some(c) = counts.get_mut(&r) {
            c[1] += 1;
        }
    }
    let per_label: BTreeMap<u32, Option<f64>> = counts
        .into_iter()
        .map(|(l, [np, nr, both])| {
            let d = (np + nr > 0).then(|| 2.0 * both as f64 / (np + nr) as f64);
            (l, d)
        })
        .collect();
    let present: Vec<f64> = per_label.values().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(DiceReport { per_label, mean })
}

/// Normalised L2 distance between bias fields after optimal rescaling of
/// the estimate: `w = sum(t e) / sum(e^2)`,
/// `sqrt(sum((w e - t)^2) / sum(t^2))`.
pub fn norm_l2_bias(b_est: &Volume, b_true: &Volume, mask: Option<&Mask>) -> Result<f64> {
    check_pair(b_est, b_true, "normL2")?;
    let (mut te, mut ee, mut tt) = (0.0, 0.0, 0.0);
    for (e, t) in masked_pairs(b_est, b_true, mask)? {
        te += t * e;
        ee += e * e;
        tt += t * t;
    }
    if !(ee > 0.0) {
        return Err(Error::ZeroEstimate);
    }
    if !(tt > 0.0) {
        return Err(Error::ZeroReference);
    }
    let w = te / ee;
    let num: f64 = masked_pairs(b_est, b_true, mask)?.map(|(e, t)| (w * e - t).powi(2)).sum();
    Ok((num / tt).sqrt())
}

/// Foreground eroded by `margin` voxels.
pub fn interior_mask(labels: &LabelMap, margin: usize) -> Mask {
    labels.foreground_mask().erode(margin)
}

pub const INTERIOR_EROSION: usize = 2;

/// Mean and population std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), count: n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = rng_from(seed);
        let data = (0..dims.iter().product()).map(|_| rng.random::<f64>()).collect();
        Volume::new(Geometry::unit(dims), data).unwrap()
    }

    fn smooth(dims: [usize; 3]) -> Volume {
        Volume::from_fn(Geometry::unit(dims), |i, j, k| {
            0.5 + 0.3 * (i as f64 * 0.3).sin() * (j as f64 * 0.2).cos() + 0.1 * (k as f64 * 0.5).sin()
        })
    }

    /// Two-pass statistics per window, no shared code with the fast path.
    fn brute_ssim(a: &Volume, b: &Volume, w: usize) -> f64 {
        let d = a.dims();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for z in 0..=d[2] - w {
            for y in 0..=d[1] - w {
                for x in 0..=d[0] - w {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for k in z..z + w {
                        for j in y..y + w {
                            for i in x..x + w {
                                xs.push(a.get(i, j, k));
                                ys.push(b.get(i, j, k));
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let ma = xs.iter().sum::<f64>() / n;
                    let mb = ys.iter().sum::<f64>() / n;
                    let va = xs.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                    let vb = ys.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                    let cov = xs.iter().zip(&ys).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn l1_examples() {
        let a = random([5, 4, 3], 1);
        assert_eq!(l1(&a, &a, None).unwrap(), 0.0);
        let b = a.map(|x| x + 0.5);
        assert!((l1(&a, &b, None).unwrap() - 0.5).abs() < 1e-12);
        let c = random([5, 4, 3], 2);
        let brute = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 60.0;
        assert!((l1(&a, &c, None).unwrap() - brute).abs() <= 1e-9);
        let empty = Mask::new([5, 4, 3], vec![false; 60]).unwrap();
        assert!(matches!(l1(&a, &c, Some(&empty)), Err(Error::EmptyMask)));
        assert!(matches!(l1(&a, &random([4, 4, 3], 0), None), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = random([4, 4, 4], 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|x| x + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = random([4, 4, 4], 4);
        let m = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&c, &a, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() <= 1e-9);
    }

    #[test]
    fn ssim_matches_brute_force() {
        for seed in 0..3 {
            let a = random([8, 8, 8], seed);
            let b = random([8, 8, 8], seed + 100);
            let fast = ssim(&a, &b, &SsimParams::default()).unwrap();
            assert!((fast - brute_ssim(&a, &b, 7)).abs() <= 1e-6);
        }
        let a = smooth([9, 10, 8]);
        let b = a.map(|x| x * x);
        assert!((ssim(&a, &b, &SsimParams::default()).unwrap() - brute_ssim(&a, &b, 7)).abs() <= 1e-6);
    }

    #[test]
    fn ssim_self_and_inverse() {
        let a = smooth([10, 10, 10]);
        assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
        assert_eq!(ms_ssim(&smooth([16, 16, 16]), &smooth([16, 16, 16]), 2, &SsimParams::default()).unwrap(), 1.0);
        let inv = a.map(|x| 1.0 - x);
        assert!(ssim(&a, &inv, &SsimParams::default()).unwrap() < 1.0);
        assert!(matches!(ssim(&random([6, 8, 8], 0), &random([6, 8, 8], 1), &SsimParams::default()), Err(Error::TooSmallForScales { .. })));
    }

    #[test]
    fn ms_ssim_scale_requirements_and_degenerate_case() {
        let a = random([14, 14, 14], 5);
        let b = random([14, 14, 14], 6);
        let p = SsimParams::default();
        assert!((ms_ssim(&a, &b, 1, &p).unwrap() - ssim(&a, &b, &p).unwrap()).abs() <= 1e-9);
        assert!(ms_ssim(&a, &b, 2, &p).is_ok());
        assert!(matches!(ms_ssim(&a, &b, 3, &p), Err(Error::TooSmallForScales { scales: 3, .. })));
        let w = ms_ssim_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_ssim_uses_window_centres() {
        let a = random([9, 9, 9], 7);
        let b = random([9, 9, 9], 8);
        let mut data = vec![false; 729];
        data[4 + 9 * (4 + 9 * 4)] = true;
        let m = Mask::new([9, 9, 9], data).unwrap();
        // Only the window centred at (4,4,4), i.e. starting at (1,1,1), counts.
        let sub = |v: &Volume| Volume::from_fn(Geometry::unit([7, 7, 7]), |i, j, k| v.get(i + 1, j + 1, k + 1));
        let expect = ssim(&sub(&a), &sub(&b), &SsimParams::default()).unwrap();
        assert!((ssim_masked(&a, &b, Some(&m), &SsimParams::default()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let g = Geometry::unit([8, 2, 2]);
        let a = LabelMap::from_fn(g.clone(), |i, _, _| if i < 4 { 1 } else { 2 });
        let r = dice(&a, &a, None).unwrap();
        assert_eq!(r.mean, Some(1.0));

        let left = LabelMap::from_fn(g.clone(), |i, _, _| (i < 4) as u32);
        let right = LabelMap::from_fn(g.clone(), |i, _, _| (i >= 4) as u32);
        assert_eq!(dice(&left, &right, Some(&[1])).unwrap().mean, Some(0.0));

        let shifted = LabelMap::from_fn(g, |i, _, _| (2..6).contains(&i) as u32);
        assert_eq!(dice(&left, &shifted, Some(&[1])).unwrap().per_label[&1], Some(0.5));

        let r = dice(&left, &left, Some(&[1, 7])).unwrap();
        assert_eq!(r.per_label[&7], None);
        assert_eq!(r.mean, Some(1.0));
    }

    fn direct_norm_l2(e: &[f64], t: &[f64]) -> f64 {
        let w = t.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / e.iter().map(|b| b * b).sum::<f64>();
        let num: f64 = e.iter().zip(t).map(|(b, a)| (w * b - a).powi(2)).sum();
        (num / t.iter().map(|a| a * a).sum::<f64>()).sqrt()
    }

    #[test]
    fn norm_l2_examples() {
        let t = random([6, 5, 4], 9).map(|x| 0.5 + x);
        assert_eq!(norm_l2_bias(&t, &t, None).unwrap(), 0.0);
        for c in [0.5, 2.0, 3.7] {
            assert!(norm_l2_bias(&t.map(|x| c * x), &t, None).unwrap() <= 1e-9);
        }
        let e = random([6, 5, 4], 10).map(|x| 0.5 + x);
        let d = direct_norm_l2(e.data(), t.data());
        assert!((norm_l2_bias(&e, &t, None).unwrap() - d).abs() <= 1e-9);
        let zero = Volume::filled(t.geometry().clone(), 0.0);
        assert!(matches!(norm_l2_bias(&zero, &t, None), Err(Error::ZeroEstimate)));
    }

    #[test]
    fn summary_is_population() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetric_metrics(seed in 0u64..1000) {
            let a = random([8, 8, 7], seed);
            let b = random([8, 8, 7], seed + 1);
            let p = SsimParams::default();
            prop_assert_eq!(l1(&a, &b, None).unwrap(), l1(&b, &a, None).unwrap());
            prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn norm_l2_is_scale_invariant(seed in 0u64..1000, c in 0.05f64..20.0) {
            let t = random([5, 5, 5], seed).map(|x| 0.2 + x);
            prop_assert!(norm_l2_bias(&t.map(|x| c * x), &t, None).unwrap() <= 1e-9);
        }
    }
}
