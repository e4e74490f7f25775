//! Seeded synthetic head phantoms: nested, irregular ellipsoidal tissue
//! labels and a matching T1-like image.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::filter::gaussian_blur;
use crate::generator::SubjectRecord;
use crate::seed::{derive_seed, rng_from, Rng};
use crate::volume::{Geometry, LabelMap, Volume};

pub const BACKGROUND: u32 = 0;
pub const CSF: u32 = 1;
pub const WHITE_MATTER: u32 = 2;
pub const CORTEX: u32 = 3;
pub const VENTRICLE: u32 = 4;
pub const DEEP_GREY: u32 = 5;

/// T1-like mean intensity per label.
pub fn t1_intensity(label: u32) -> f64 {
    match label {
        CSF => 0.2,
        WHITE_MATTER => 0.85,
        CORTEX => 0.55,
        VENTRICLE => 0.12,
        DEEP_GREY => 0.66,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { dims: [64; 3], spacing: [1.0; 3] }
    }
}

/// Radial modulation `1 + sum a_m sin(f_m . dir + p_m)`.
struct Wobble {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl Wobble {
    fn draw(rng: &mut Rng, amplitude: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                let f = [0, 1, 2].map(|_| rng.random_range(-3.0..3.0));
                (f, rng.random_range(0.0..amplitude), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, dir: [f64; 3]) -> f64 {
        1.0 + self
            .terms
            .iter()
            .map(|(f, a, p)| a * (f[0] * dir[0] + f[1] * dir[1] + f[2] * dir[2] + p).sin())
            .sum::<f64>()
    }
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn jitter(rng: &mut Rng, x: f64, rel: f64) -> f64 {
    x * (1.0 + rng.random_range(-rel..rel))
}

pub fn phantom_labels(seed: u64, cfg: &PhantomConfig) -> LabelMap {
    let mut rng = rng_from(seed);
    let geometry = Geometry::with_spacing(cfg.dims, cfg.spacing).expect("phantom geometry");
    let ext = geometry.extent();
    let half = ext.map(|e| e / 2.0);
    let head = [jitter(&mut rng, 0.8, 0.1), jitter(&mut rng, 0.88, 0.08), jitter(&mut rng, 0.76, 0.1)];
    let outer = Wobble::draw(&mut rng, 0.06);
    let inner = Wobble::draw(&mut rng, 0.1);
    let side = [-1.0, 1.0];
    let ventricles: Vec<Blob> = side
        .iter()
        .map(|&s| Blob {
            centre: [s * jitter(&mut rng, 0.13, 0.3), jitter(&mut rng, 0.05, 1.0), jitter(&mut rng, 0.05, 1.0)],
            radii: [jitter(&mut rng, 0.08, 0.4), jitter(&mut rng, 0.26, 0.3), jitter(&mut rng, 0.12, 0.4)],
        })
        .collect();
    let deep: Vec<Blob> = side
        .iter()
        .map(|&s| Blob {
            centre: [s * jitter(&mut rng, 0.32, 0.1), jitter(&mut rng, -0.05, 0.5), -0.08],
            radii: [jitter(&mut rng, 0.1, 0.2), jitter(&mut rng, 0.14, 0.2), jitter(&mut rng, 0.1, 0.2)],
        })
        .collect();

    LabelMap::from_fn(geometry.clone(), move |i, j, k| {
        let sp = geometry.spacing();
        let q = [i, j, k];
        let p: [f64; 3] = [0, 1, 2].map(|a| (q[a] as f64 * sp[a] - half[a]) / (half[a] * head[a]).max(1e-9));
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let dir = if r > 0.0 { p.map(|x| x / r) } else { [0.0, 0.0, 1.0] };
        let ro = r / outer.at(dir);
        if ro > 1.0 {
            return BACKGROUND;
        }
        if ventricles.iter().any(|b| b.contains(p)) {
            return VENTRICLE;
        }
        if deep.iter().any(|b| b.contains(p)) {
            return DEEP_GREY;
        }
        let ri = r / inner.at(dir);
        if ri < 0.7 {
            WHITE_MATTER
        } else if ro < 0.88 {
            CORTEX
        } else {
            CSF
        }
    })
}

/// T1-like rendering: per-label means, a weak smooth texture, slight blur.
pub fn phantom_t1(labels: &LabelMap, seed: u64) -> Volume {
    let mut rng = rng_from(seed);
    let f = [0, 1, 2].map(|_| rng.random_range(0.05..0.25));
    let ph = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let raw = Volume::from_fn(labels.geometry().clone(), |i, j, k| {
        let l = labels.get(i, j, k);
        if l == BACKGROUND {
            return 0.0;
        }
        let tex = (f[0] * i as f64 + ph[0]).sin() * (f[1] * j as f64 + ph[1]).sin() * (f[2] * k as f64 + ph[2]).sin();
        t1_intensity(l) + 0.03 * tex
    });
    gaussian_blur(&raw, [0.6; 3]).minmax_normalize()
}

/// Labels plus T1 image for subject `id`.
pub fn phantom_subject(id: &str, seed: u64, cfg: &PhantomConfig) -> SubjectRecord {
    let labels = phantom_labels(derive_seed(seed, id, 0, "phantom-labels"), cfg);
    let mprage = phantom_t1(&labels, derive_seed(seed, id, 0, "phantom-t1"));
    SubjectRecord::new(id, labels, mprage).expect("same grid")
}
