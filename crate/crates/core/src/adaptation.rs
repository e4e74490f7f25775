//! One-layer voxel-wise adapters from frozen feature channels to a task
//! target, fitted in closed form, plus the task losses used to score them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mse;
use crate::volume::{LabelMap, Volume, VolumeStack};

pub const DEFAULT_RIDGE: f64 = 1e-6;
const CHUNK: usize = 4096;
/// Smallest accepted `pivot^2 / max diag(G)` for an unregularised solve.
const PIVOT_TOLERANCE: f64 = 1e-12;
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
const CE_EPSILON: f64 = 1e-12;

/// `Y = X W + b` at every voxel; optional softmax over outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearAdapter {
    pub in_channels: usize,
    pub out_channels: usize,
    /// The last input channel is the image itself.
    pub concat_input: bool,
    pub softmax: bool,
    pub ridge: f64,
    /// Row-major `in_channels x out_channels`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearAdapter {
    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.weights[input * self.out_channels + output]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_channels * self.out_channels || self.bias.len() != self.out_channels {
            return Err(Error::InvalidConfig(format!(
                "adapter shape {}x{} does not match {} weights and {} biases",
                self.in_channels,
                self.out_channels,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|w| w.is_finite()) {
            return Err(Error::InvalidConfig("adapter has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Input channel slices: features, then the image when concatenating.
fn inputs<'a>(features: &'a VolumeStack, concat_input: Option<&'a Volume>) -> Result<Vec<&'a [f64]>> {
    let mut x: Vec<&[f64]> = features.channels().iter().map(Volume::data).collect();
    if let Some(img) = concat_input {
        img.geometry().ensure_matches(features.geometry(), "concatenated input")?;
        x.push(img.data());
    }
    Ok(x)
}

fn channel_means(cols: &[&[f64]], n: usize) -> Vec<f64> {
    cols.iter()
        .map(|c| {
            let partial: Vec<f64> = c.par_chunks(CHUNK).map(|ch| ch.iter().sum::<f64>()).collect();
            partial.iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// Centred `X^T X` and `X^T Y`, accumulated per chunk and reduced in chunk
/// order.
fn centred_moments(x: &[&[f64]], y: &[&[f64]], mx: &[f64], my: &[f64], n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = x.len();
    let q = y.len();
    let chunks: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = DMatrix::<f64>::zeros(p, p);
            let mut xy = DMatrix::<f64>::zeros(p, q);
            let mut row = vec![0.0; p];
            let mut out = vec![0.0; q];
            for v in c * CHUNK..((c + 1) * CHUNK).min(n) {
                for a in 0..p {
                    row[a] = x[a][v] - mx[a];
                }
                for b in 0..q {
                    out[b] = y[b][v] - my[b];
                }
                for a in 0..p {
                    let ra = row[a];
                    for b in a..p {
                        g[(a, b)] += ra * row[b];
                    }
                    for b in 0..q {
                        xy[(a, b)] += ra * out[b];
                    }
                }
            }
            (g, xy)
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(p, p);
    let mut xy = DMatrix::<f64>::zeros(p, q);
    for (cg, cxy) in chunks {
        g += cg;
        xy += cxy;
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    (g, xy)
}

/// Least squares `min |XW + b - Y|^2 + ridge |W|^2` over all voxels; the
/// intercept is not penalised.
pub fn fit_adapter(
    features: &VolumeStack,
    target: &VolumeStack,
    concat_input: Option<&Volume>,
    ridge: f64,
) -> Result<LinearAdapter> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    target.geometry().ensure_matches(features.geometry(), "adapter target vs features")?;
    let x = inputs(features, concat_input)?;
    let y: Vec<&[f64]> = target.channels().iter().map(Volume::data).collect();
    let n = features.geometry().voxel_count();
    let p = x.len();
    let q = y.len();
    if n <= p {
        return Err(Error::InvalidConfig(format!("{n} voxels cannot determine {p} input channels")));
    }
    let mx = channel_means(&x, n);
    let my = channel_means(&y, n);
    let (mut g, xy) = centred_moments(&x, &y, &mx, &my, n);

    let max_diag = (0..p).map(|a| g[(a, a)]).fold(0.0, f64::max);
    for a in 0..p {
        g[(a, a)] += ridge;
    }
    let chol = g.cholesky().ok_or(Error::SingularSystem)?;
    if ridge == 0.0 {
        let l = chol.l_dirty();
        let min_pivot = (0..p).map(|a| l[(a, a)] * l[(a, a)]).fold(f64::INFINITY, f64::min);
        if !(max_diag > 0.0) || min_pivot < PIVOT_TOLERANCE * max_diag {
            return Err(Error::SingularSystem);
        }
    }
    let w = chol.solve(&xy);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let mxv = DVector::from_vec(mx);
    let bias: Vec<f64> = (0..q).map(|b| my[b] - mxv.dot(&w.column(b))).collect();
    let weights = (0..p).flat_map(|a| (0..q).map(move |b| (a, b))).map(|(a, b)| w[(a, b)]).collect();
    Ok(LinearAdapter {
        in_channels: p,
        out_channels: q,
        concat_input: concat_input.is_some(),
        softmax: false,
        ridge,
        weights,
        bias,
    })
}

/// One channel per entry of `order`, 1 where the label matches.
pub fn one_hot(labels: &LabelMap, order: &[u32]) -> Result<VolumeStack> {
    let channels = order
        .iter()
        .map(|&l| Volume::new(labels.geometry().clone(), labels.data().iter().map(|&x| (x == l) as u8 as f64).collect()))
        .collect::<Result<Vec<_>>>()?;
    VolumeStack::new(channels)
}

/// Least-squares fit to one-hot targets; the adapter applies a softmax.
pub fn fit_segmentation_adapter(
    features: &VolumeStack,
    labels: &LabelMap,
    order: &[u32],
    concat_input: Option<&Volume>,
    ridge: f64,
) -> Result<LinearAdapter> {
    if order.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let mut a = fit_adapter(features, &one_hot(labels, order)?, concat_input, ridge)?;
    a.softmax = true;
    Ok(a)
}

pub fn apply_adapter(adapter: &LinearAdapter, features: &VolumeStack, concat_input: Option<&Volume>) -> Result<VolumeStack> {
    adapter.validate()?;
    if adapter.concat_input != concat_input.is_some() {
        let found = features.channel_count() + concat_input.is_some() as usize;
        return Err(Error::ChannelMismatch { expected: adapter.in_channels, found });
    }
    let x = inputs(features, concat_input)?;
    if x.len() != adapter.in_channels {
        return Err(Error::ChannelMismatch { expected: adapter.in_channels, found: x.len() });
    }
    let q = adapter.out_channels;
    let n = features.geometry().voxel_count();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut out = adapter.bias.clone();
            for (a, col) in x.iter().enumerate() {
                let xv = col[v];
                for (b, o) in out.iter_mut().enumerate() {
                    *o += xv * adapter.weights[a * q + b];
                }
            }
            if adapter.softmax {
                softmax_in_place(&mut out);
            }
            out
        })
        .collect();
    let g = features.geometry();
    let channels = (0..q)
        .map(|b| Volume::new(g.clone(), rows.iter().map(|r| r[b]).collect()))
        .collect::<Result<Vec<_>>>()?;
    VolumeStack::new(channels)
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Mean absolute residual of the adapter on `(features, target)`.
pub fn residual_l1(
    adapter: &LinearAdapter,
    features: &VolumeStack,
    target: &VolumeStack,
    concat_input: Option<&Volume>,
) -> Result<f64> {
    let pred = apply_adapter(adapter, features, concat_input)?;
    if pred.channel_count() != target.channel_count() {
        return Err(Error::ChannelMismatch { expected: target.channel_count(), found: pred.channel_count() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.channels().iter().zip(target.channels()) {
        t.geometry().ensure_matches(p.geometry(), "residual target")?;
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.data().len();
    }
    Ok(sum / n as f64)
}

/// `(1 - mean soft Dice) + mean cross-entropy`. Channel `k` of `probs`
/// holds the probability of `order[k]`.
pub fn soft_dice_ce_loss(probs: &VolumeStack, reference: &LabelMap, order: &[u32]) -> Result<f64> {
    let k = order.len();
    if probs.channel_count() != k {
        return Err(Error::ChannelMismatch { expected: k, found: probs.channel_count() });
    }
    probs.geometry().ensure_matches(reference.geometry(), "soft dice")?;
    let ch: Vec<&[f64]> = probs.channels().iter().map(Volume::data).collect();
    let n = reference.data().len();
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    let mut ce = 0.0;
    for (v, &l) in reference.data().iter().enumerate() {
        let sum: f64 = ch.iter().map(|c| c[v]).sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || ch.iter().any(|c| c[v] < -SIMPLEX_TOLERANCE) {
            return Err(Error::NotASimplex { voxel: v, sum });
        }
        let truth = order.iter().position(|&o| o == l).ok_or_else(|| {
            Error::InvalidVolume(format!("reference label {l} at voxel {v} is not in the label order"))
        })?;
        for c in 0..k {
            psum[c] += ch[c][v];
        }
        inter[truth] += ch[truth][v];
        gsum[truth] += 1.0;
        ce -= ch[truth][v].max(CE_EPSILON).ln();
    }
    let dice: f64 = (0..k)
        .map(|c| {
            let d = psum[c] + gsum[c];
            if d > 0.0 {
                2.0 * inter[c] / d
            } else {
                1.0
            }
        })
        .sum::<f64>()
        / k as f64;
    Ok((1.0 - dice) + ce / n as f64)
}

/// Mean squared error.
pub fn l2_loss(pred: &Volume, reference: &Volume) -> Result<f64> {
    mse(pred, reference, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_stack(dims: [usize; 3], channels: usize, seed: u64) -> VolumeStack {
        let mut rng = rng_from(seed);
        let g = Geometry::unit(dims);
        let n = g.voxel_count();
        VolumeStack::new(
            (0..channels)
                .map(|_| Volume::new(g.clone(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn planted(f: &VolumeStack, w: &[f64], b: f64) -> VolumeStack {
        let g = f.geometry().clone();
        let n = g.voxel_count();
        let data = (0..n)
            .map(|v| b + f.channels().iter().zip(w).map(|(c, wi)| c.data()[v] * wi).sum::<f64>())
            .collect();
        VolumeStack::single(Volume::new(g, data).unwrap())
    }

    #[test]
    fn recovers_planted_map() {
        let f = random_stack([12, 12, 12], 8, 1);
        let w: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let t = planted(&f, &w, 0.25);
        let a = fit_adapter(&f, &t, None, 0.0).unwrap();
        for i in 0..8 {
            assert!((a.weight(i, 0) - w[i]).abs() <= 1e-4);
        }
        assert!((a.bias[0] - 0.25).abs() <= 1e-4);
        assert!(residual_l1(&a, &f, &t, None).unwrap() <= 1e-6);
    }

    #[test]
    fn identity_and_constant_targets() {
        let f = random_stack([8, 8, 8], 1, 2);
        let a = fit_adapter(&f, &f, None, 0.0).unwrap();
        assert!((a.weights[0] - 1.0).abs() < 1e-9 && a.bias[0].abs() < 1e-9);

        let zm = random_stack([8, 8, 8], 2, 3);
        let c = VolumeStack::single(Volume::filled(zm.geometry().clone(), 0.7));
        let a = fit_adapter(&zm, &c, None, 0.0).unwrap();
        assert!(a.weights.iter().all(|w| w.abs() < 1e-9));
        assert!((a.bias[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn concat_mode_uses_the_input() {
        let f = random_stack([10, 10, 10], 3, 4);
        let img = random_stack([10, 10, 10], 1, 5).into_channels().remove(0);
        let g = f.geometry().clone();
        let t = Volume::new(
            g,
            (0..1000).map(|v| 0.5 * f.channels()[0].data()[v] - 2.0 * img.data()[v] + 0.1).collect(),
        )
        .unwrap();
        let a = fit_adapter(&f, &VolumeStack::single(t), Some(&img), 0.0).unwrap();
        assert_eq!(a.in_channels, 4);
        assert!((a.weight(3, 0) + 2.0).abs() <= 1e-4);
        assert!(matches!(apply_adapter(&a, &f, None), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let f = random_stack([6, 6, 6], 2, 6);
        let dup = VolumeStack::new(vec![f.channels()[0].clone(), f.channels()[0].clone(), f.channels()[1].clone()]).unwrap();
        let t = VolumeStack::single(f.channels()[1].clone());
        assert!(matches!(fit_adapter(&dup, &t, None, 0.0), Err(Error::SingularSystem)));
        assert!(fit_adapter(&dup, &t, None, 1e-3).is_ok());
    }

    #[test]
    fn ridge_never_lowers_training_residual() {
        let f = random_stack([8, 8, 8], 4, 7);
        let noise = random_stack([8, 8, 8], 1, 8);
        let t = planted(&f, &[1.0, -0.5, 0.2, 0.0], 0.0);
        let t = VolumeStack::single(t.channels()[0].zip_map(&noise.channels()[0], |a, b| a + 0.3 * b).unwrap());
        let mut last = 0.0;
        for ridge in [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0] {
            let a = fit_adapter(&f, &t, None, ridge).unwrap();
            let p = apply_adapter(&a, &f, None).unwrap();
            let r = mse(&p.channels()[0], &t.channels()[0], None).unwrap();
            assert!(r >= last - 1e-12, "{ridge}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let f = random_stack([4, 4, 4], 2, 9);
        let a = LinearAdapter {
            in_channels: 2,
            out_channels: 1,
            concat_input: false,
            softmax: false,
            ridge: 0.0,
            weights: vec![0.0; 2],
            bias: vec![0.4],
        };
        let out = apply_adapter(&a, &f, None).unwrap();
        assert!(out.channels()[0].data().iter().all(|&v| v == 0.4));
        let back = LinearAdapter::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn segmentation_outputs_are_simplices() {
        let f = random_stack([8, 8, 8], 3, 10);
        let lm = LabelMap::from_fn(f.geometry().clone(), |i, j, _| ((i + j) % 3) as u32);
        let a = fit_segmentation_adapter(&f, &lm, &[0, 1, 2], None, DEFAULT_RIDGE).unwrap();
        let p = apply_adapter(&a, &f, None).unwrap();
        for v in 0..512 {
            let s: f64 = p.channels().iter().map(|c| c.data()[v]).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
        assert!(soft_dice_ce_loss(&p, &lm, &[0, 1, 2]).unwrap().is_finite());
    }

    #[test]
    fn dice_ce_closed_forms() {
        let lm = LabelMap::from_fn(Geometry::unit([4, 4, 1]), |i, _, _| (i % 2) as u32);
        let hot = one_hot(&lm, &[0, 1]).unwrap();
        assert!(soft_dice_ce_loss(&hot, &lm, &[0, 1]).unwrap().abs() < 1e-9);

        let g = lm.geometry().clone();
        let uniform = VolumeStack::new(vec![Volume::filled(g.clone(), 1.0 / 3.0); 3]).unwrap();
        let lm3 = LabelMap::from_fn(g.clone(), |i, j, _| ((i + j) % 3) as u32);
        let loss = soft_dice_ce_loss(&uniform, &lm3, &[0, 1, 2]).unwrap();
        // ce = ln 3; dice_k = 2 (n_k / 3) / (n / 3 + n_k)
        let counts = [0u32, 1, 2].map(|l| lm3.data().iter().filter(|&&x| x == l).count() as f64);
        let dice = counts.iter().map(|&c| 2.0 * c / 3.0 / (16.0 / 3.0 + c)).sum::<f64>() / 3.0;
        assert!((loss - (1.0 - dice + 3f64.ln())).abs() <= 1e-9);

        let bad = VolumeStack::new(vec![Volume::filled(g.clone(), 0.6); 2]).unwrap();
        assert!(matches!(soft_dice_ce_loss(&bad, &lm, &[0, 1]), Err(Error::NotASimplex { .. })));
    }

    #[test]
    fn l2_loss_examples() {
        let a = random_stack([4, 4, 4], 1, 11).into_channels().remove(0);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        assert!((l2_loss(&a.map(|x| x + 2.0), &a).unwrap() - 4.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn bias_free_adapters_are_linear(seed in 0u64..500, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = rng_from(seed);
            let a = LinearAdapter {
                in_channels: 3,
                out_channels: 2,
                concat_input: false,
                softmax: false,
                ridge: 0.0,
                weights: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: vec![0.0; 2],
            };
            let f1 = random_stack([3, 3, 3], 3, seed + 1);
            let f2 = random_stack([3, 3, 3], 3, seed + 2);
            let mix = VolumeStack::new(
                f1.channels().iter().zip(f2.channels()).map(|(x, y)| x.zip_map(y, |p, q| alpha * p + beta * q).unwrap()).collect(),
            ).unwrap();
            let lhs = apply_adapter(&a, &mix, None).unwrap();
            let o1 = apply_adapter(&a, &f1, None).unwrap();
            let o2 = apply_adapter(&a, &f2, None).unwrap();
            for c in 0..2 {
                for v in 0..27 {
                    let rhs = alpha * o1.channels()[c].data()[v] + beta * o2.channels()[c].data()[v];
                    prop_assert!((lhs.channels()[c].data()[v] - rhs).abs() < 1e-9);
                }
            }
        }
    }
}
