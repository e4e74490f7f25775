//! Feature robustness protocols: intra-subject samples are compared after
//! warping back through the inverse of their generation field, and
//! inter-subject samples after warping into a shared atlas frame.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::{invert, warp_volume, warp_volume_onto, DeformationField};
use crate::error::{Error, Result};
use crate::metrics::{l1, ms_ssim_masked, ssim_masked, SsimParams, Summary};
use crate::volume::{Mask, VolumeStack};

/// `phi^-1 o F`: every channel warped back through the inverse field.
pub fn canonical_features(f: &VolumeStack, phi: &DeformationField) -> Result<VolumeStack> {
    let inv = invert(phi)?;
    let channels = f.channels().iter().map(|c| warp_volume(c, &inv)).collect::<Result<Vec<_>>>()?;
    VolumeStack::new(channels)
}

/// `psi o F`: every channel resampled into the atlas frame of `psi`.
pub fn atlas_features(f: &VolumeStack, psi: &DeformationField) -> Result<VolumeStack> {
    let channels = f.channels().iter().map(|c| warp_volume_onto(c, psi)).collect::<Result<Vec<_>>>()?;
    VolumeStack::new(channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Intra,
    Inter,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Intra => "intra",
            Mode::Inter => "inter",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "intra" => Ok(Mode::Intra),
            "inter" => Ok(Mode::Inter),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}` (expected intra or inter)"))),
        }
    }
}

/// Channel-averaged scores of one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub l1: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub pairs: usize,
    pub channels: usize,
    pub mask_voxels: Option<usize>,
    pub ms_ssim_scales: usize,
    /// Aggregated over every (candidate, channel) value.
    pub l1: Summary,
    pub ssim: Summary,
    pub ms_ssim: Summary,
    pub per_pair: Vec<PairScores>,
}

impl MetricReport {
    /// Plain-text table: one row with `mean (±std)` per metric.
    pub fn to_table(&self) -> String {
        let cell = |s: &Summary| format!("{:.6} (±{:.6})", s.mean, s.std);
        let cols = [("L1", cell(&self.l1)), ("SSIM", cell(&self.ssim)), ("MS-SSIM", cell(&self.ms_ssim))];
        let mut out = String::new();
        let w = cols.iter().map(|(_, c)| c.len()).max().unwrap_or(0).max(8);
        let _ = write!(out, "{:<6}", "Mode");
        for (h, _) in &cols {
            let _ = write!(out, " | {h:<w$}");
        }
        out.push('\n');
        let _ = write!(out, "{:-<6}", "");
        for _ in &cols {
            let _ = write!(out, "-+-{:-<w$}", "");
        }
        out.push('\n');
        let _ = write!(out, "{:<6}", self.mode.to_string());
        for (_, c) in &cols {
            let _ = write!(out, " | {c:<w$}");
        }
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Largest MS-SSIM scale count (up to 3) that fits the grid.
pub fn fitting_scales(dims: [usize; 3], window: usize) -> usize {
    let min = dims.into_iter().min().unwrap_or(0);
    (1..=3).rev().find(|&s| min >= window << (s - 1)).unwrap_or(1)
}

/// Scores each candidate against `reference` after bringing it into the
/// reference frame: through the inverse of its field (intra) or through its
/// atlas map (inter).
pub fn robustness_protocol(
    reference: &VolumeStack,
    candidates: &[(VolumeStack, DeformationField)],
    mode: Mode,
    mask: Option<&Mask>,
) -> Result<MetricReport> {
    let channels = reference.channel_count();
    for (c, _) in candidates {
        if c.channel_count() != channels {
            return Err(Error::ChannelMismatch { expected: channels, found: c.channel_count() });
        }
    }
    if let Some(m) = mask {
        m.ensure_dims(reference.geometry().dims())?;
    }
    let params = SsimParams::default();
    let scales = fitting_scales(reference.geometry().dims(), params.window);

    let per_channel: Vec<Vec<[f64; 3]>> = candidates
        .par_iter()
        .map(|(feat, field)| {
            let aligned = match mode {
                Mode::Intra => canonical_features(feat, field)?,
                Mode::Inter => atlas_features(feat, field)?,
            };
            aligned
                .channels()
                .iter()
                .zip(reference.channels())
                .map(|(a, r)| {
                    let a = a.clone().retag(r.geometry().clone())?;
                    Ok([
                        l1(&a, r, mask)?,
                        ssim_masked(&a, r, mask, &params)?,
                        ms_ssim_masked(&a, r, mask, scales, &params)?,
                    ])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let column = |m: usize| -> Vec<f64> { per_channel.iter().flatten().map(|v| v[m]).collect() };
    let per_pair = per_channel
        .iter()
        .map(|vals| {
            let n = vals.len() as f64;
            let mean = |m: usize| vals.iter().map(|v| v[m]).sum::<f64>() / n;
            PairScores { l1: mean(0), ssim: mean(1), ms_ssim: mean(2) }
        })
        .collect();

    Ok(MetricReport {
        mode,
        pairs: candidates.len(),
        channels,
        mask_voxels: mask.map(Mask::count),
        ms_ssim_scales: scales,
        l1: Summary::of(&column(0)),
        ssim: Summary::of(&column(1)),
        ms_ssim: Summary::of(&column(2)),
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{generate_deformation, DeformationConfig};
    use crate::metrics::{interior_mask, ssim, INTERIOR_EROSION};
    use crate::phantom::{phantom_subject, PhantomConfig};
    use crate::seed::rng_from;
    use crate::volume::{Geometry, Volume};

    fn subject(id: &str, n: usize) -> crate::generator::SubjectRecord {
        phantom_subject(id, 3, &PhantomConfig { dims: [n; 3], ..Default::default() })
    }

    #[test]
    fn identity_field_leaves_features() {
        let s = subject("a", 16);
        let f = VolumeStack::new(vec![s.mprage.clone(), s.mprage.map(|x| x * 0.5)]).unwrap();
        let id = DeformationField::identity(s.mprage.geometry());
        let c = canonical_features(&f, &id).unwrap();
        assert_eq!(c, f);
        assert_eq!(atlas_features(&f, &id).unwrap().channel_count(), 2);
    }

    #[test]
    fn canonical_round_trip_recovers_the_image() {
        let s = subject("b", 32);
        let phi = generate_deformation(&mut rng_from(4), &DeformationConfig::default(), s.mprage.geometry()).unwrap();
        let warped = warp_volume(&s.mprage, &phi).unwrap();
        let back = canonical_features(&VolumeStack::single(warped), &phi).unwrap();
        let mask = interior_mask(&s.labels, INTERIOR_EROSION);
        let v = ssim_masked(&back.channels()[0], &s.mprage, Some(&mask), &SsimParams::default()).unwrap();
        assert!(v >= 0.95, "{v}");
    }

    #[test]
    fn atlas_identity_only_retags() {
        let v = Volume::from_fn(Geometry::unit([8, 8, 8]), |i, j, k| (i + j * k) as f64);
        let atlas = Geometry::with_spacing([8, 8, 8], [2.0; 3]).unwrap();
        let psi = DeformationField::identity(&atlas);
        let out = atlas_features(&VolumeStack::single(v.clone()), &psi).unwrap();
        assert_eq!(out.channels()[0].data(), v.data());
        assert!(out.geometry().matches(&atlas));
    }

    #[test]
    fn atlas_alignment_raises_similarity() {
        // Two shifted copies of one shape; psi undoes each shift.
        let base = subject("c", 24).mprage;
        let g = base.geometry().clone();
        let shift = |t: f64| {
            let f = DeformationField::from_affine(&g, &crate::deformation::AffineParams::translation([t, 0.0, 0.0])).unwrap();
            (warp_volume(&base, &f).unwrap(), DeformationField::from_affine(&g, &crate::deformation::AffineParams::translation([-t, 0.0, 0.0])).unwrap())
        };
        let (a, psi_a) = shift(2.0);
        let (b, psi_b) = shift(-2.0);
        let p = SsimParams::default();
        let before = ssim(&a, &b, &p).unwrap();
        let aa = atlas_features(&VolumeStack::single(a), &psi_a).unwrap();
        let bb = atlas_features(&VolumeStack::single(b), &psi_b).unwrap();
        let after = ssim(&aa.channels()[0], &bb.channels()[0], &p).unwrap();
        assert!(after > before, "{after} vs {before}");
    }

    #[test]
    fn identical_candidates_score_perfectly() {
        let s = subject("d", 16);
        let r = VolumeStack::new(vec![s.mprage.clone(), s.mprage.map(|x| 1.0 - x)]).unwrap();
        let id = DeformationField::identity(s.mprage.geometry());
        let rep = robustness_protocol(&r, &[(r.clone(), id.clone()), (r.clone(), id)], Mode::Intra, None).unwrap();
        assert_eq!(rep.l1.mean, 0.0);
        assert_eq!(rep.ssim.mean, 1.0);
        assert_eq!(rep.ms_ssim.mean, 1.0);
        assert_eq!(rep.l1.count, 4);
        assert!(rep.to_table().contains("0.000000"));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let s = subject("e", 16);
        let r = VolumeStack::single(s.mprage.clone());
        let two = VolumeStack::new(vec![s.mprage.clone(), s.mprage.clone()]).unwrap();
        let id = DeformationField::identity(s.mprage.geometry());
        assert!(matches!(
            robustness_protocol(&r, &[(two, id)], Mode::Intra, None),
            Err(Error::ChannelMismatch { expected: 1, found: 2 })
        ));
    }
}
