//! Random-contrast painting: every labelled region gets its own Gaussian
//! intensity distribution.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::volume::{LabelMap, Volume};

/// Shift/scale hyperparameters of the per-label mean and std draws:
/// `mu_l = m_mu + s_mu z + shift_l`, `sigma_l = |m_sigma + s_sigma z'|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub m_mu: f64,
    pub s_mu: f64,
    pub m_sigma: f64,
    pub s_sigma: f64,
    /// Optional per-label mean shift.
    pub label_shift: BTreeMap<u32, f64>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            m_mu: 0.5,
            s_mu: 0.25,
            m_sigma: 0.05,
            s_sigma: 0.05,
            label_shift: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelContrast {
    pub mu: f64,
    pub sigma: f64,
}

/// Per-label intensity mean and std.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContrastParams {
    pub labels: BTreeMap<u32, LabelContrast>,
}

impl ContrastParams {
    pub fn get(&self, label: u32) -> Option<LabelContrast> {
        self.labels.get(&label).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Draws `(mu_l, sigma_l)` independently for each label, in sorted order.
/// Background (label 0) is pinned to zero mean and zero std.
pub fn sample_contrast_params(rng: &mut Rng, labels: &[u32], cfg: &ContrastConfig) -> Result<ContrastParams> {
    if labels.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = BTreeMap::new();
    for l in sorted {
        if l == 0 {
            out.insert(0, LabelContrast { mu: 0.0, sigma: 0.0 });
            continue;
        }
        let z: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let shift = cfg.label_shift.get(&l).copied().unwrap_or(0.0);
        out.insert(
            l,
            LabelContrast {
                mu: cfg.m_mu + cfg.s_mu * z + shift,
                sigma: (cfg.m_sigma + cfg.s_sigma * z2).abs(),
            },
        );
    }
    Ok(ContrastParams { labels: out })
}

/// Unnormalised painting: each foreground voxel draws from
/// `N(mu_l, sigma_l)`; background stays 0.
pub fn paint_raw(lm: &LabelMap, params: &ContrastParams, rng: &mut Rng) -> Result<Volume> {
    for &l in lm.label_set() {
        if l != 0 && params.get(l).is_none() {
            return Err(Error::MissingLabelParams(l));
        }
    }
    let lookup: BTreeMap<u32, LabelContrast> = params.labels.clone();
    let data = lm
        .data()
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0.0;
            }
            let c = lookup[&l];
            let z: f64 = StandardNormal.sample(rng);
            c.mu + c.sigma * z
        })
        .collect();
    Volume::new(lm.geometry().clone(), data)
}

/// Min-max normalisation over foreground voxels; background forced to 0.
pub fn normalize_foreground(v: &Volume, lm: &LabelMap) -> Result<Volume> {
    v.geometry().ensure_matches(lm.geometry(), "foreground normalisation")?;
    let (lo, hi) = v
        .data()
        .iter()
        .zip(lm.data())
        .filter(|(_, &l)| l != 0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let data = v
        .data()
        .iter()
        .zip(lm.data())
        .map(|(&x, &l)| {
            if l == 0 || !(range > 0.0) {
                0.0
            } else {
                (x - lo) / range
            }
        })
        .collect();
    v.with_data(data)
}

/// Paints and normalises to `[0, 1]`.
pub fn paint(lm: &LabelMap, params: &ContrastParams, rng: &mut Rng) -> Result<Volume> {
    let raw = paint_raw(lm, params, rng)?;
    normalize_foreground(&raw, lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::volume::Geometry;

    fn two_region_map(n: usize) -> LabelMap {
        LabelMap::from_fn(Geometry::unit([n, n, n]), |i, _, _| if i < n / 2 { 1 } else { 2 })
    }

    fn fixed(pairs: &[(u32, f64, f64)]) -> ContrastParams {
        ContrastParams {
            labels: pairs
                .iter()
                .map(|&(l, mu, sigma)| (l, LabelContrast { mu, sigma }))
                .collect(),
        }
    }

    #[test]
    fn zero_scales_give_the_shift_values() {
        let cfg = ContrastConfig { s_mu: 0.0, s_sigma: 0.0, m_sigma: -0.07, ..Default::default() };
        let p = sample_contrast_params(&mut rng_from(1), &[0, 3, 5, 9], &cfg).unwrap();
        assert_eq!(p.get(0), Some(LabelContrast { mu: 0.0, sigma: 0.0 }));
        for l in [3, 5, 9] {
            assert_eq!(p.get(l), Some(LabelContrast { mu: 0.5, sigma: 0.07 }));
        }
    }

    #[test]
    fn label_shift_is_added() {
        let mut cfg = ContrastConfig { s_mu: 0.0, ..Default::default() };
        cfg.label_shift.insert(4, 0.25);
        let p = sample_contrast_params(&mut rng_from(1), &[4, 6], &cfg).unwrap();
        assert_eq!(p.get(4).unwrap().mu, 0.75);
        assert_eq!(p.get(6).unwrap().mu, 0.5);
    }

    #[test]
    fn params_are_seed_deterministic_and_serialisable() {
        let cfg = ContrastConfig::default();
        let a = sample_contrast_params(&mut rng_from(9), &[0, 1, 2, 3], &cfg).unwrap();
        let b = sample_contrast_params(&mut rng_from(9), &[0, 1, 2, 3], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.values().all(|c| c.sigma >= 0.0));
        let back = ContrastParams::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(sample_contrast_params(&mut rng_from(9), &[], &cfg).is_err());
    }

    #[test]
    fn mean_draws_follow_the_law_of_large_numbers() {
        let cfg = ContrastConfig { m_mu: 0.5, s_mu: 0.1, ..Default::default() };
        let mut rng = rng_from(2024);
        let labels: Vec<u32> = (1..=10_000).collect();
        let p = sample_contrast_params(&mut rng, &labels, &cfg).unwrap();
        let mean = p.labels.values().map(|c| c.mu).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() <= 0.005, "{mean}");
    }

    #[test]
    fn single_label_without_noise() {
        let lm = LabelMap::from_fn(Geometry::unit([4, 4, 4]), |_, _, _| 1);
        let p = fixed(&[(1, 0.5, 0.0)]);
        let raw = paint_raw(&lm, &p, &mut rng_from(0)).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.5));
        let norm = paint(&lm, &p, &mut rng_from(0)).unwrap();
        assert!(norm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_labels_become_binary() {
        let lm = two_region_map(6);
        let p = fixed(&[(1, 0.2, 0.0), (2, 0.8, 0.0)]);
        let v = paint(&lm, &p, &mut rng_from(0)).unwrap();
        for (x, l) in v.data().iter().zip(lm.data()) {
            assert_eq!(*x, if *l == 1 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn background_stays_zero_and_output_in_unit_range() {
        let lm = LabelMap::from_fn(Geometry::unit([8, 8, 8]), |i, j, _| (i / 3 + j / 4) as u32);
        let p = sample_contrast_params(&mut rng_from(4), lm.label_set(), &ContrastConfig::default()).unwrap();
        let v = paint(&lm, &p, &mut rng_from(5)).unwrap();
        for (x, l) in v.data().iter().zip(lm.data()) {
            assert!(x.is_finite() && (0.0..=1.0).contains(x));
            if *l == 0 {
                assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn regional_std_matches_sigma() {
        let lm = LabelMap::from_fn(Geometry::unit([24, 24, 24]), |_, _, _| 1);
        let p = fixed(&[(1, 0.4, 0.1)]);
        let raw = paint_raw(&lm, &p, &mut rng_from(77)).unwrap();
        let n = raw.data().len() as f64;
        let mean = raw.data().iter().sum::<f64>() / n;
        let sd = (raw.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.1).abs() <= 0.01, "{sd}");
    }

    #[test]
    fn missing_params_are_reported() {
        let lm = two_region_map(4);
        let p = fixed(&[(1, 0.2, 0.0)]);
        assert!(matches!(paint(&lm, &p, &mut rng_from(0)), Err(Error::MissingLabelParams(2))));
    }

    #[test]
    fn painting_is_label_local() {
        // Swapping the two labels and their parameters swaps the regions.
        let lm = two_region_map(6);
        let swapped = LabelMap::new(
            lm.geometry().clone(),
            lm.data().iter().map(|&l| 3 - l).collect(),
        )
        .unwrap();
        let p = fixed(&[(1, 0.2, 0.0), (2, 0.9, 0.0)]);
        let q = fixed(&[(2, 0.2, 0.0), (1, 0.9, 0.0)]);
        let a = paint_raw(&lm, &p, &mut rng_from(1)).unwrap();
        let b = paint_raw(&swapped, &q, &mut rng_from(1)).unwrap();
        assert_eq!(a, b);
    }
}
