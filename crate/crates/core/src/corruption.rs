//! Acquisition corruption applied after contrast synthesis: multiplicative
//! bias field, low-field / thick-slice resolution loss, and additive
//! Gaussian noise, at three severity presets.
//!
//! Every random choice is captured in a [`CorruptionRecord`]; replaying a
//! record reproduces the corrupted image bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationConfig;
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, resample_scaled, upsample_to};
use crate::seed::{rng_from, Rng};
use crate::volume::{Geometry, Volume};

/// FWHM / sigma of a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.355;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Medium,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Medium, Severity::Severe];

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Medium => "medium",
            Severity::Severe => "severe",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mild" => Ok(Severity::Mild),
            "medium" => Ok(Severity::Medium),
            "severe" => Ok(Severity::Severe),
            other => Err(Error::InvalidConfig(format!(
                "unknown severity `{other}` (expected mild, medium or severe)"
            ))),
        }
    }
}

/// Closed interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!("{name}: min {} > max {}", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionConfig {
    pub p_low_field: f64,
    pub p_anisotropic: f64,
    /// Isotropic spacing range (mm) for low-field acquisitions.
    pub low_field_spacing: Range,
    /// Slice spacing range (mm) along the thick axis.
    pub anisotropic_spacing: Range,
}

impl ResolutionConfig {
    fn with_probabilities(p_low_field: f64, p_anisotropic: f64) -> Self {
        Self {
            p_low_field,
            p_anisotropic,
            low_field_spacing: Range::new(1.5, 4.0),
            anisotropic_spacing: Range::new(2.5, 7.0),
        }
    }
}

/// Log-field mean and std ranges. The coarse grid is `coarse_size^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub mu: Range,
    pub sigma: Range,
    pub coarse_size: usize,
}

/// Noise std range on a 0-255 intensity scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_255: Range,
}

/// Full parameter group for one corruption level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityConfig {
    pub level: Severity,
    pub deformation: DeformationConfig,
    pub resolution: ResolutionConfig,
    pub bias: Option<BiasConfig>,
    pub noise: Option<NoiseConfig>,
}

impl SeverityConfig {
    /// The mild / medium / severe generator presets.
    pub fn preset(level: Severity) -> Self {
        let (p_lf, p_an, bias_mu, bias_sigma, noise) = match level {
            Severity::Mild => (0.1, 0.0, Range::new(0.01, 0.02), Range::new(0.01, 0.05), Range::new(0.01, 1.0)),
            Severity::Medium => (0.3, 0.1, Range::new(0.02, 0.03), Range::new(0.05, 0.3), Range::new(0.5, 5.0)),
            Severity::Severe => (0.5, 0.25, Range::new(0.02, 0.04), Range::new(0.1, 0.6), Range::new(5.0, 15.0)),
        };
        Self {
            level,
            deformation: DeformationConfig::default(),
            resolution: ResolutionConfig::with_probabilities(p_lf, p_an),
            bias: Some(BiasConfig { mu: bias_mu, sigma: bias_sigma, coarse_size: 4 }),
            noise: Some(NoiseConfig { sigma_255: noise }),
        }
    }

    /// Every stage disabled; corruption is the identity.
    pub fn off(level: Severity) -> Self {
        Self {
            level,
            deformation: DeformationConfig::default(),
            resolution: ResolutionConfig::with_probabilities(0.0, 0.0),
            bias: None,
            noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deformation.validate()?;
        let r = &self.resolution;
        for (name, p) in [("p_low_field", r.p_low_field), ("p_anisotropic", r.p_anisotropic)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if r.p_low_field + r.p_anisotropic > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig("p_low_field + p_anisotropic exceeds 1".into()));
        }
        r.low_field_spacing.validate("low_field_spacing")?;
        r.anisotropic_spacing.validate("anisotropic_spacing")?;
        if let Some(b) = &self.bias {
            b.mu.validate("bias.mu")?;
            b.sigma.validate("bias.sigma")?;
            if b.sigma.min < 0.0 {
                return Err(Error::InvalidConfig("bias.sigma must be >= 0".into()));
            }
            if !(2..=8).contains(&b.coarse_size) {
                return Err(Error::InvalidConfig("bias.coarse_size must be in [2, 8]".into()));
            }
        }
        if let Some(n) = &self.noise {
            n.sigma_255.validate("noise.sigma_255")?;
            if n.sigma_255.min < 0.0 {
                return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Smooth, strictly positive multiplicative field.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub coarse_dims: [usize; 3],
    pub log_coarse: Vec<f64>,
    pub field: Volume,
}

impl BiasField {
    /// Upsamples a coarse log-field to `geometry` and exponentiates.
    pub fn from_coarse(coarse_dims: [usize; 3], log_coarse: Vec<f64>, geometry: &Geometry) -> Result<Self> {
        let coarse = Volume::new(Geometry::unit(coarse_dims), log_coarse.clone())?;
        let field = upsample_to(&coarse, geometry).map(f64::exp);
        Ok(Self { coarse_dims, log_coarse, field })
    }

    pub fn from_volume(field: Volume) -> Result<Self> {
        if field.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidVolume("bias field must be strictly positive".into()));
        }
        Ok(Self { coarse_dims: [0; 3], log_coarse: Vec::new(), field })
    }
}

/// Draws `mu_b ~ U[mu]`, `sigma_b ~ U[sigma]`, then a coarse log-field with
/// i.i.d. `N(mu_b, sigma_b)` entries. Returns the field and the drawn pair.
pub fn sample_bias_field(rng: &mut Rng, cfg: &BiasConfig, geometry: &Geometry) -> Result<(BiasField, f64, f64)> {
    let mu_b = cfg.mu.sample(rng);
    let sigma_b = cfg.sigma.sample(rng);
    let coarse_dims = [cfg.coarse_size; 3];
    let n = coarse_dims.iter().product();
    let log_coarse = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mu_b + sigma_b * z
        })
        .collect();
    Ok((BiasField::from_coarse(coarse_dims, log_coarse, geometry)?, mu_b, sigma_b))
}

pub fn apply_bias(v: &Volume, b: &BiasField) -> Result<Volume> {
    v.zip_map(&b.field, |x, f| x * f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ResolutionMode {
    LowField,
    Anisotropic { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    #[serde(flatten)]
    pub mode: ResolutionMode,
    pub spacing: [f64; 3],
}

/// Chooses low-field (isotropic), anisotropic (one thick axis) or nothing.
pub fn draw_resolution(rng: &mut Rng, cfg: &ResolutionConfig, current: [f64; 3]) -> Option<ResolutionRecord> {
    let u: f64 = rng.random();
    if u < cfg.p_low_field {
        let s = cfg.low_field_spacing.sample(rng);
        Some(ResolutionRecord { mode: ResolutionMode::LowField, spacing: [s; 3] })
    } else if u < cfg.p_low_field + cfg.p_anisotropic {
        let axis = rng.random_range(0..3);
        let mut spacing = current;
        spacing[axis] = cfg.anisotropic_spacing.sample(rng);
        Some(ResolutionRecord { mode: ResolutionMode::Anisotropic { axis }, spacing })
    } else {
        None
    }
}

/// Slice-profile blur (FWHM = target spacing), subsampling at the target
/// spacing, and trilinear upsampling back to the input grid.
pub fn resample_to_spacing(v: &Volume, target: [f64; 3]) -> Volume {
    let g = v.geometry();
    let current = g.spacing();
    let ratio = [0, 1, 2].map(|a| target[a] / current[a]);
    if ratio.iter().all(|&r| r <= 1.0) {
        return v.clone();
    }
    let sigma = ratio.map(|r| if r > 1.0 { r / FWHM_PER_SIGMA } else { 0.0 });
    let blurred = gaussian_blur(v, sigma);

    let dims = g.dims();
    let step = ratio.map(|r| r.max(1.0));
    let low_dims = [0, 1, 2].map(|a| ((dims[a] - 1) as f64 / step[a]).floor() as usize + 1);
    let low_spacing = [0, 1, 2].map(|a| current[a] * step[a]);
    let low_geom = Geometry::with_spacing(low_dims, low_spacing).expect("positive spacing");
    let low = resample_scaled(&blurred, low_dims, step, low_geom);
    let back = resample_scaled(&low, dims, step.map(|s| 1.0 / s), Geometry::unit(dims));
    v.with_data(back.into_data()).expect("same dims")
}

/// Draws a resolution mode and applies it. Returns the simulated spacing.
pub fn simulate_resolution(v: &Volume, rng: &mut Rng, cfg: &ResolutionConfig) -> (Volume, [f64; 3]) {
    let current = v.geometry().spacing();
    match draw_resolution(rng, cfg, current) {
        Some(rec) => (resample_to_spacing(v, rec.spacing), rec.spacing),
        None => (v.clone(), current),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    /// Std on the `[0, 1]` intensity scale.
    pub sigma: f64,
    pub seed: u64,
}

/// Adds i.i.d. `N(0, sigma)` noise from a dedicated stream, optionally
/// clamping to `[0, 1]`.
pub fn apply_noise(v: &Volume, sigma: f64, seed: u64, clamp: bool) -> Volume {
    let mut rng = rng_from(seed);
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = x + sigma * z;
            if clamp {
                y.clamp(0.0, 1.0)
            } else {
                y
            }
        })
        .collect();
    v.with_data(data).expect("same geometry")
}

/// Draws the noise level and stream seed.
pub fn draw_noise(rng: &mut Rng, cfg: &NoiseConfig) -> NoiseRecord {
    let sigma = cfg.sigma_255.sample(rng) / 255.0;
    NoiseRecord { sigma, seed: rng.next_u64() }
}

pub fn add_noise(v: &Volume, rng: &mut Rng, cfg: &NoiseConfig) -> (Volume, NoiseRecord) {
    let rec = draw_noise(rng, cfg);
    (apply_noise(v, rec.sigma, rec.seed, true), rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub mu: f64,
    pub sigma: f64,
    pub coarse_dims: [usize; 3],
    pub log_coarse: Vec<f64>,
}

/// Everything drawn during one corruption pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub level: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub bias: Option<BiasRecord>,
    pub resolution: Option<ResolutionRecord>,
    pub spacing: [f64; 3],
    pub noise: Option<NoiseRecord>,
}

impl CorruptionRecord {
    pub fn is_empty(&self) -> bool {
        self.bias.is_none() && self.resolution.is_none() && self.noise.is_none()
    }

    /// The ground-truth bias field on `geometry`, if one was applied.
    pub fn bias_field(&self, geometry: &Geometry) -> Result<Option<BiasField>> {
        self.bias
            .as_ref()
            .map(|b| BiasField::from_coarse(b.coarse_dims, b.log_coarse.clone(), geometry))
            .transpose()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws all corruption parameters without touching the image.
pub fn draw_corruption(rng: &mut Rng, cfg: &SeverityConfig, geometry: &Geometry) -> Result<CorruptionRecord> {
    cfg.validate()?;
    let bias = match &cfg.bias {
        Some(b) => {
            let (field, mu, sigma) = sample_bias_field(rng, b, geometry)?;
            Some(BiasRecord { mu, sigma, coarse_dims: field.coarse_dims, log_coarse: field.log_coarse })
        }
        None => None,
    };
    let resolution = draw_resolution(rng, &cfg.resolution, geometry.spacing());
    let spacing = resolution.map_or(geometry.spacing(), |r| r.spacing);
    let noise = cfg.noise.as_ref().map(|n| draw_noise(rng, n));
    Ok(CorruptionRecord { level: cfg.level, seed: None, bias, resolution, spacing, noise })
}

/// Applies a record: bias, resolution, noise, then min-max renormalisation.
/// An empty record is the identity.
pub fn replay(v: &Volume, record: &CorruptionRecord) -> Result<Volume> {
    if record.is_empty() {
        return Ok(v.clone());
    }
    let mut out = v.clone();
    if let Some(b) = record.bias_field(v.geometry())? {
        out = apply_bias(&out, &b)?;
    }
    if let Some(r) = &record.resolution {
        out = resample_to_spacing(&out, r.spacing);
    }
    if let Some(n) = &record.noise {
        out = apply_noise(&out, n.sigma, n.seed, true);
    }
    Ok(out.minmax_normalize())
}

/// Bias, resolution and noise at one severity level.
pub fn corrupt(v: &Volume, rng: &mut Rng, cfg: &SeverityConfig) -> Result<(Volume, CorruptionRecord)> {
    let record = draw_corruption(rng, cfg, v.geometry())?;
    let out = replay(v, &record)?;
    Ok((out, record))
}
