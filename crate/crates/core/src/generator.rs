//! Mini-batch generation: one subject, one shared deformation, `n` samples
//! of independent random contrast with increasing corruption, and the
//! warped anatomy target.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptionRecord, Severity, SeverityConfig};
use crate::deformation::{generate_deformation, warp_labels, warp_volume, DeformationField, Provenance};
use crate::error::{Error, Result};
use crate::nifti::{write_nifti, write_vector_field, Datatype};
use crate::seed::{derive_seed, rng_from};
use crate::synthesis::{paint, sample_contrast_params, ContrastConfig, ContrastParams};
use crate::volume::{LabelMap, Volume};

/// A label map and its MP-RAGE image on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub labels: LabelMap,
    pub mprage: Volume,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, labels: LabelMap, mprage: Volume) -> Result<Self> {
        labels.geometry().ensure_matches(mprage.geometry(), "subject labels vs mprage")?;
        Ok(Self { id: id.into(), labels, mprage })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub level: Severity,
    pub contrast: ContrastParams,
    pub record: CorruptionRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub subject_id: String,
    pub base_seed: u64,
    pub deformation: DeformationField,
    pub labels: LabelMap,
    pub samples: Vec<Sample>,
    pub target: Volume,
}

impl SampleBatch {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    pub fn schedule(&self) -> Vec<Severity> {
        self.samples.iter().map(|s| s.level).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub mild: SeverityConfig,
    pub medium: SeverityConfig,
    pub severe: SeverityConfig,
    pub contrast: ContrastConfig,
    /// Weight of the gradient term in the batch loss.
    pub lambda: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            mild: SeverityConfig::preset(Severity::Mild),
            medium: SeverityConfig::preset(Severity::Medium),
            severe: SeverityConfig::preset(Severity::Severe),
            contrast: ContrastConfig::default(),
            lambda: 1.0,
        }
    }
}

impl GeneratorConfig {
    /// No deformation and no corruption at any level.
    pub fn off() -> Self {
        let off = |l| {
            let mut c = SeverityConfig::off(l);
            c.deformation = crate::deformation::DeformationConfig::off();
            c
        };
        Self {
            mild: off(Severity::Mild),
            medium: off(Severity::Medium),
            severe: off(Severity::Severe),
            ..Self::default()
        }
    }

    pub fn level(&self, level: Severity) -> &SeverityConfig {
        match level {
            Severity::Mild => &self.mild,
            Severity::Medium => &self.medium,
            Severity::Severe => &self.severe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in Severity::ALL {
            let c = self.level(l);
            if c.level != l {
                return Err(Error::InvalidConfig(format!("{l} block is tagged {}", c.level)));
            }
            c.validate()?;
        }
        if !(self.lambda > 0.0) {
            return Err(Error::NonPositiveLambda(self.lambda));
        }
        Ok(())
    }
}

/// Evenly spaced positions on the mild..severe ladder.
pub fn default_schedule(n: usize) -> Vec<Severity> {
    if n <= 1 {
        return vec![Severity::Mild; n];
    }
    (0..n)
        .map(|i| Severity::ALL[((i * 2) as f64 / (n - 1) as f64).round() as usize])
        .collect()
}

pub fn validate_schedule(schedule: &[Severity], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if schedule.len() != n {
        return Err(Error::InvalidConfig(format!("schedule has {} entries for n = {n}", schedule.len())));
    }
    if schedule.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("schedule severity must be non-decreasing".into()));
    }
    Ok(())
}

pub fn parse_schedule(s: &str) -> Result<Vec<Severity>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

pub const DEFORMATION_STREAM: &str = "deformation";
pub const CONTRAST_STREAM: &str = "contrast";
pub const CORRUPTION_STREAM: &str = "corruption";

pub fn generate_batch(
    subject: &SubjectRecord,
    n: usize,
    base_seed: u64,
    schedule: &[Severity],
    cfg: &GeneratorConfig,
) -> Result<SampleBatch> {
    validate_schedule(schedule, n)?;
    cfg.validate()?;
    let label_set = subject.labels.label_set().to_vec();
    if label_set.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let geometry = subject.labels.geometry();

    let mut drng = rng_from(derive_seed(base_seed, &subject.id, 0, DEFORMATION_STREAM));
    let phi = generate_deformation(&mut drng, &cfg.level(schedule[0]).deformation, geometry)?;
    let labels = warp_labels(&subject.labels, &phi)?;
    let target = warp_volume(&subject.mprage, &phi)?.minmax_normalize();

    let samples = schedule
        .par_iter()
        .enumerate()
        .map(|(i, &level)| {
            let i = i as u64;
            let mut crng = rng_from(derive_seed(base_seed, &subject.id, i, CONTRAST_STREAM));
            let contrast = sample_contrast_params(&mut crng, &label_set, &cfg.contrast)?;
            let painted = paint(&labels, &contrast, &mut crng)?;
            let seed = derive_seed(base_seed, &subject.id, i, CORRUPTION_STREAM);
            let (image, mut record) = corrupt(&painted, &mut rng_from(seed), cfg.level(level))?;
            record.seed = Some(seed);
            Ok(Sample { image, level, contrast, record })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SampleBatch {
        subject_id: subject.id.clone(),
        base_seed,
        deformation: phi,
        labels,
        samples,
        target,
    })
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Sum over samples of mean |P_i - T| plus `lambda` times the mean absolute
/// gradient difference, summed over the three gradient channels.
pub fn batch_loss(batch: &SampleBatch, predictions: &[Volume], lambda: f64) -> Result<f64> {
    loss_against(&batch.target, predictions, lambda, batch.batch_size())
}

pub fn loss_against(target: &Volume, predictions: &[Volume], lambda: f64, n: usize) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if predictions.len() != n {
        return Err(Error::InvalidConfig(format!("{} predictions for a batch of {n}", predictions.len())));
    }
    let tg = target.spatial_gradient()?;
    let mut total = 0.0;
    for p in predictions {
        p.geometry().ensure_matches(target.geometry(), "prediction vs target")?;
        let pg = p.spatial_gradient()?;
        let grad: f64 = pg
            .channels()
            .iter()
            .zip(tg.channels())
            .map(|(a, b)| mean_abs(a.data(), b.data()))
            .sum();
        total += mean_abs(p.data(), target.data()) + lambda * grad;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub level: Severity,
    pub contrast: ContrastParams,
    pub record: CorruptionRecord,
}

/// One entry of an evaluation manifest: a feature stack and the field that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub features: String,
    pub deformation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub subject: String,
    pub seed: u64,
    pub schedule: Vec<Severity>,
    pub target: String,
    pub deformation: String,
    pub provenance: Provenance,
    pub samples: Vec<SampleEntry>,
    pub candidates: Vec<Candidate>,
}

pub const TARGET_FILE: &str = "target.nii";
pub const DEFORMATION_FILE: &str = "deformation.nii";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sample_file(i: usize) -> String {
    format!("sample_{i:03}.nii")
}

impl SampleBatch {
    pub fn manifest(&self) -> BatchManifest {
        let provenance = self.deformation.provenance().clone();
        let samples: Vec<SampleEntry> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                file: sample_file(i),
                level: s.level,
                contrast: s.contrast.clone(),
                record: s.record.clone(),
            })
            .collect();
        let candidates = samples
            .iter()
            .map(|s| Candidate {
                features: s.file.clone(),
                deformation: DEFORMATION_FILE.into(),
                provenance: Some(provenance.clone()),
            })
            .collect();
        BatchManifest {
            subject: self.subject_id.clone(),
            seed: self.base_seed,
            schedule: self.schedule(),
            target: TARGET_FILE.into(),
            deformation: DEFORMATION_FILE.into(),
            provenance,
            samples,
            candidates,
        }
    }

    /// Writes float32 NIfTI samples, target and displacement field plus
    /// `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<BatchManifest> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (s, entry) in self.samples.iter().zip(&manifest.samples) {
            fs::write(dir.join(&entry.file), write_nifti(&s.image, Datatype::Float32))?;
        }
        fs::write(dir.join(TARGET_FILE), write_nifti(&self.target, Datatype::Float32))?;
        let c = self.deformation.components();
        let field = write_vector_field(self.deformation.geometry(), [c[0].data(), c[1].data(), c[2].data()]);
        fs::write(dir.join(DEFORMATION_FILE), field)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{phantom_subject, PhantomConfig};
    use crate::synthesis::paint;
    use crate::volume::Geometry;
    use rand::Rng as _;

    fn small_subject(seed: u64) -> SubjectRecord {
        phantom_subject(&format!("s{seed}"), seed, &PhantomConfig { dims: [24, 24, 24], ..Default::default() })
    }

    #[test]
    fn ladder_positions() {
        use Severity::*;
        assert_eq!(default_schedule(4), vec![Mild, Medium, Medium, Severe]);
        assert_eq!(default_schedule(1), vec![Mild]);
        assert_eq!(default_schedule(3), vec![Mild, Medium, Severe]);
        assert_eq!(parse_schedule("mild,medium,medium,severe").unwrap(), default_schedule(4));
        assert!(validate_schedule(&[Severe, Mild], 2).is_err());
        assert!(validate_schedule(&[Mild], 2).is_err());
    }

    #[test]
    fn all_off_single_sample() {
        let s = small_subject(1);
        let cfg = GeneratorConfig::off();
        let b = generate_batch(&s, 1, 5, &[Severity::Mild], &cfg).unwrap();
        assert_eq!(b.labels, s.labels);
        assert_eq!(b.target, s.mprage.minmax_normalize());
        let mut crng = rng_from(derive_seed(5, &s.id, 0, CONTRAST_STREAM));
        let params = sample_contrast_params(&mut crng, s.labels.label_set(), &cfg.contrast).unwrap();
        let painted = paint(&s.labels, &params, &mut crng).unwrap();
        assert_eq!(b.samples[0].image, painted);
        assert!(b.samples[0].record.is_empty());
    }

    #[test]
    fn batches_are_deterministic_across_thread_counts() {
        let s = small_subject(2);
        let cfg = GeneratorConfig::default();
        let sched = default_schedule(4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate_batch(&s, 4, 11, &sched, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert_eq!(a.schedule(), sched);
        for (i, smp) in a.samples.iter().enumerate() {
            assert_eq!(smp.record.level, sched[i]);
            assert!(smp.image.geometry().matches(a.target.geometry()));
        }
    }

    #[test]
    fn loss_zero_and_constant_offset() {
        let s = small_subject(3);
        let b = generate_batch(&s, 2, 1, &default_schedule(2), &GeneratorConfig::default()).unwrap();
        let same = vec![b.target.clone(); 2];
        assert_eq!(batch_loss(&b, &same, 1.0).unwrap(), 0.0);
        let shifted = vec![b.target.map(|x| x + 0.3); 2];
        let l = batch_loss(&b, &shifted, 2.5).unwrap();
        assert!((l - 0.6).abs() < 1e-9, "{l}");
        assert!(matches!(batch_loss(&b, &same, 0.0), Err(Error::NonPositiveLambda(_))));
    }

    #[test]
    fn loss_matches_naive_summation() {
        let g = Geometry::unit([4, 4, 4]);
        let mut rng = rng_from(99);
        let mut rand_vol = || Volume::new(g.clone(), (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let target = rand_vol();
        let preds: Vec<Volume> = (0..4).map(|_| rand_vol()).collect();
        let fast = loss_against(&target, &preds, 1.0, 4).unwrap();

        let grad = |v: &Volume, a: usize, c: [usize; 3]| {
            let at = |c: [usize; 3]| v.get(c[0], c[1], c[2]);
            let mut lo = c;
            let mut hi = c;
            if c[a] > 0 {
                lo[a] -= 1;
            }
            if c[a] < 3 {
                hi[a] += 1;
            }
            (at(hi) - at(lo)) / (hi[a] - lo[a]) as f64
        };
        let mut naive = 0.0;
        for p in &preds {
            let mut int = 0.0;
            let mut gr = 0.0;
            for k in 0..4 {
                for j in 0..4 {
                    for i in 0..4 {
                        int += (p.get(i, j, k) - target.get(i, j, k)).abs();
                        for a in 0..3 {
                            gr += (grad(p, a, [i, j, k]) - grad(&target, a, [i, j, k])).abs();
                        }
                    }
                }
            }
            naive += int / 64.0 + gr / 64.0;
        }
        assert!(((fast - naive) / naive).abs() <= 1e-6);
    }

    #[test]
    fn export_writes_expected_files() {
        let s = small_subject(4);
        let b = generate_batch(&s, 2, 3, &default_schedule(2), &GeneratorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = b.export(dir.path()).unwrap();
        for f in ["sample_000.nii", "sample_001.nii", TARGET_FILE, DEFORMATION_FILE, MANIFEST_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let back: BatchManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.candidates.len(), 2);
    }
}
