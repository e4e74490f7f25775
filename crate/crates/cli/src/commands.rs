use std::fs;
use std::path::{Path, PathBuf};

use anatsynth::adaptation::{apply_adapter as apply, fit_adapter as fit, fit_segmentation_adapter, residual_l1, one_hot, LinearAdapter};
use anatsynth::deformation::DeformationField;
use anatsynth::generator::{default_schedule, generate_batch, parse_schedule, Candidate, SubjectRecord};
use anatsynth::metrics::{dice, interior_mask, l1, ms_ssim_masked, norm_l2_bias, psnr, ssim_masked, SsimParams, INTERIOR_EROSION};
use anatsynth::nifti::{read_labels, read_nifti, read_stack, read_vector_field, read_volume, write_labels, write_nifti, write_stack, Datatype, Decoded};
use anatsynth::phantom::{phantom_subject, PhantomConfig};
use anatsynth::robustness::{robustness_protocol, Mode};
use anatsynth::{Mask, Result as CoreResult};
use serde::Deserialize;

use crate::config::load_generator_config;
use crate::error::{CliError, CliResult};
use crate::{ApplyAdapterArgs, EvaluateArgs, FitAdapterArgs, GenerateArgs, MetricArg, MetricsArgs, ModeArg, PhantomArgs};

fn load<T>(path: &Path, decode: impl Fn(&[u8]) -> CoreResult<T>) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::from(e).context(path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Nonzero voxels; label maps are eroded by `erosion` voxels.
fn load_mask(path: &Path, erosion: usize) -> CliResult<Mask> {
    match load(path, read_nifti)? {
        Decoded::Labels(l) => Ok(interior_mask(&l, erosion)),
        Decoded::Intensity(v) => Ok(Mask::new(v.dims(), v.data().iter().map(|&x| x > 0.0).collect())?),
    }
}

fn load_field(path: &Path) -> CliResult<DeformationField> {
    let (g, comps) = load(path, read_vector_field)?;
    DeformationField::from_components(&g, comps).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let schedule = match &a.schedule {
        Some(s) => parse_schedule(s)?,
        None => default_schedule(a.n),
    };
    let cfg = load_generator_config(a.config.as_deref())?;
    let labels = load(&a.labels, read_labels)?;
    let mprage = load(&a.mprage, read_volume)?;
    let id = a.subject.clone().unwrap_or_else(|| {
        let name = a.labels.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
    });
    let subject = SubjectRecord::new(id, labels, mprage)
        .map_err(|e| CliError::from(e).context(format!("{} vs {}", a.labels.display(), a.mprage.display())))?;
    let batch = generate_batch(&subject, a.n, a.seed, &schedule, &cfg)?;
    batch.export(&a.out).map_err(|e| CliError::from(e).context(a.out.display()))?;
    println!("wrote {} samples to {}", batch.batch_size(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct EvalManifest {
    candidates: Vec<Candidate>,
    #[serde(default)]
    mask: Option<String>,
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mode = match a.mode {
        ModeArg::Intra => Mode::Intra,
        ModeArg::Inter => Mode::Inter,
    };
    let atlas = match (mode, &a.atlas_map) {
        (Mode::Inter, None) => return Err(CliError::usage("--mode inter requires --atlas-map")),
        (Mode::Inter, Some(p)) => Some(load_field(p)?),
        _ => None,
    };
    let text = fs::read_to_string(&a.candidates).map_err(|e| CliError::io(&a.candidates, e))?;
    let manifest: EvalManifest = serde_json::from_str(&text).map_err(|e| CliError::io(&a.candidates, e))?;
    let base = a.candidates.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |f: &str| -> PathBuf { base.join(f) };

    let reference = load(&a.reference, read_stack)?;
    let mut pairs = Vec::with_capacity(manifest.candidates.len());
    for c in &manifest.candidates {
        let features = load(&resolve(&c.features), read_stack)?;
        let field = match &atlas {
            Some(psi) => psi.clone(),
            None => {
                let f = load_field(&resolve(&c.deformation))?;
                match &c.provenance {
                    Some(p) => f.with_provenance(p.clone()),
                    None => f,
                }
            }
        };
        pairs.push((features, field));
    }
    let mask = match (&a.mask, &manifest.mask) {
        (Some(p), _) => Some(load_mask(p, INTERIOR_EROSION)?),
        (None, Some(p)) => Some(load_mask(&resolve(p), INTERIOR_EROSION)?),
        (None, None) => None,
    };
    let report = robustness_protocol(&reference, &pairs, mode, mask.as_ref())?;
    print!("{}", report.to_table());
    write(&a.out, (report.to_json()? + "\n").as_bytes())
}

fn parse_order(s: &str) -> CliResult<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| CliError::usage(format!("bad label `{t}` in --segmentation"))))
        .collect()
}

pub fn fit_adapter(a: FitAdapterArgs) -> CliResult<()> {
    let features = load(&a.features, read_stack)?;
    let input = a.concat_input.as_deref().map(|p| load(p, read_volume)).transpose()?;
    let (adapter, target) = match &a.segmentation {
        Some(order) => {
            let order = parse_order(order)?;
            let labels = load(&a.target, read_labels)?;
            let adapter = fit_segmentation_adapter(&features, &labels, &order, input.as_ref(), a.ridge)?;
            (adapter, one_hot(&labels, &order)?)
        }
        None => {
            let target = load(&a.target, read_stack)?;
            (fit(&features, &target, input.as_ref(), a.ridge)?, target)
        }
    };
    let residual = residual_l1(&adapter, &features, &target, input.as_ref())?;
    write(&a.out, (adapter.to_json()? + "\n").as_bytes())?;
    println!("in_channels {}", adapter.in_channels);
    println!("out_channels {}", adapter.out_channels);
    println!("residual_l1 {residual:.6e}");
    Ok(())
}

pub fn apply_adapter(a: ApplyAdapterArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.adapter).map_err(|e| CliError::io(&a.adapter, e))?;
    let adapter = LinearAdapter::from_json(&text).map_err(|e| CliError::from(e).context(a.adapter.display()))?;
    let features = load(&a.features, read_stack)?;
    let input = a.concat_input.as_deref().map(|p| load(p, read_volume)).transpose()?;
    let out = apply(&adapter, &features, input.as_ref())?;
    write(&a.out, &write_stack(&out, Datatype::Float32))
}

pub fn metrics(a: MetricsArgs) -> CliResult<()> {
    let mask = a.mask.as_deref().map(|p| load_mask(p, 0)).transpose()?;
    let params = SsimParams::default();
    let ctx = |e: anatsynth::Error| CliError::from(e).context(format!("{} vs {}", a.pred.display(), a.reference.display()));
    if let MetricArg::Dice = a.metric {
        let p = load(&a.pred, read_labels)?;
        let r = load(&a.reference, read_labels)?;
        let rep = dice(&p, &r, None).map_err(ctx)?;
        for (l, d) in &rep.per_label {
            match d {
                Some(d) => println!("label {l} {d:.6}"),
                None => println!("label {l} absent"),
            }
        }
        match rep.mean {
            Some(m) => println!("mean {m:.6}"),
            None => println!("mean absent"),
        }
        return Ok(());
    }
    let p = load(&a.pred, read_volume)?;
    let r = load(&a.reference, read_volume)?;
    let m = mask.as_ref();
    let value = match a.metric {
        MetricArg::L1 => l1(&p, &r, m),
        MetricArg::Psnr => psnr(&p, &r, a.peak),
        MetricArg::Ssim => ssim_masked(&p, &r, m, &params),
        MetricArg::Msssim => ms_ssim_masked(&p, &r, m, a.scales, &params),
        MetricArg::Norml2 => norm_l2_bias(&p, &r, m),
        MetricArg::Dice => unreachable!("handled above"),
    }
    .map_err(ctx)?;
    println!("{value:.6}");
    Ok(())
}

pub fn phantom(a: PhantomArgs) -> CliResult<()> {
    if a.dims < 8 {
        return Err(CliError::usage("--dims must be at least 8"));
    }
    let s = phantom_subject(&a.id, a.seed, &PhantomConfig { dims: [a.dims; 3], ..Default::default() });
    write(&a.out.join("labels.nii"), &write_labels(&s.labels, Datatype::Int16))?;
    write(&a.out.join("mprage.nii"), &write_nifti(&s.mprage, Datatype::Float32))?;
    println!("wrote {} and {}", a.out.join("labels.nii").display(), a.out.join("mprage.nii").display());
    Ok(())
}
