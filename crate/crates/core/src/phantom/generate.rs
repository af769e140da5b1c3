//! Synthetic aging phantoms with a ground-truth parcellation.
//!
//! Every phantom is a spherical head made of a cortical shell that thins with
//! age, a central ventricle ellipsoid that grows with age, two subcortical blobs
//! whose intensity fades with age, and a handful of age-independent distractor
//! blobs. Label ids: 0 background, 1 shell, 2 ventricle, 3 and 4 blobs, 5 and up
//! distractors.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Volume;
use crate::util::rng_for;

pub const LABEL_BACKGROUND: u16 = 0;
pub const LABEL_SHELL: u16 = 1;
pub const LABEL_VENTRICLE: u16 = 2;
pub const LABEL_BLOB_LEFT: u16 = 3;
pub const LABEL_BLOB_RIGHT: u16 = 4;
pub const FIRST_DISTRACTOR: u16 = 5;

const STREAM_DISTRACTORS: u64 = 0xD157;
const STREAM_NOISE: u64 = 0x4015E;
const STREAM_SUBJECT: u64 = 0x5B1EC7;

/// Sex-analog attribute; it only moves distractors (mirrored along x for `M`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub age_min: f64,
    pub age_max: f64,
    /// Outer radius of the cortical shell, voxels.
    pub head_radius: f64,
    pub shell_thickness_min: f64,
    pub shell_thickness_max: f64,
    pub ventricle_radius_min: f64,
    pub ventricle_radius_max: f64,
    /// Minor/major semi-axis ratio of the ventricle (major axis along x).
    pub ventricle_aspect: f64,
    pub ventricle_exponent: f64,
    pub blob_radius: f64,
    /// Offset of the two subcortical blobs from the center along ±y.
    pub blob_offset: f64,
    pub blob_intensity_young: f64,
    pub blob_intensity_old: f64,
    pub tissue_intensity: f64,
    pub shell_intensity: f64,
    pub ventricle_intensity: f64,
    pub distractor_count: usize,
    pub distractor_radius: f64,
    pub distractor_intensity: [f64; 2],
    pub noise_sigma: f64,
    /// Per-subject head radius factor drawn uniformly from `1 ± jitter`.
    pub head_radius_jitter: f64,
    /// Per-subject multiplicative intensity gain drawn uniformly from `1 ± jitter`.
    pub intensity_gain_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            age_min: 20.0,
            age_max: 100.0,
            head_radius: 14.0,
            shell_thickness_min: 2.0,
            shell_thickness_max: 5.0,
            ventricle_radius_min: 1.5,
            ventricle_radius_max: 4.5,
            ventricle_aspect: 0.6,
            ventricle_exponent: 1.2,
            blob_radius: 1.5,
            blob_offset: 5.5,
            blob_intensity_young: 0.95,
            blob_intensity_old: 0.55,
            tissue_intensity: 0.45,
            shell_intensity: 0.85,
            ventricle_intensity: 0.08,
            distractor_count: 4,
            distractor_radius: 1.5,
            distractor_intensity: [0.65, 0.95],
            noise_sigma: 0.02,
            head_radius_jitter: 0.07,
            intensity_gain_jitter: 0.2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Same anatomy with every length rescaled to a new grid.
    pub fn scaled_to(&self, dims: [usize; 3]) -> Self {
        let f = *dims.iter().min().expect("three dims") as f64 / *self.dims.iter().min().expect("three dims") as f64;
        Self {
            dims,
            head_radius: self.head_radius * f,
            shell_thickness_min: self.shell_thickness_min * f,
            shell_thickness_max: self.shell_thickness_max * f,
            ventricle_radius_min: self.ventricle_radius_min * f,
            ventricle_radius_max: self.ventricle_radius_max * f,
            blob_radius: self.blob_radius * f,
            blob_offset: self.blob_offset * f,
            distractor_radius: self.distractor_radius * f,
            ..self.clone()
        }
    }

    fn age_fraction(&self, age: f64) -> f64 {
        ((age - self.age_min) / (self.age_max - self.age_min)).clamp(0.0, 1.0)
    }

    /// Cortical shell thickness, linear from `th_max` at `age_min` to `th_min` at `age_max`.
    pub fn shell_thickness(&self, age: f64) -> f64 {
        let t = self.age_fraction(age);
        if t >= 1.0 {
            return self.shell_thickness_min;
        }
        self.shell_thickness_max - (self.shell_thickness_max - self.shell_thickness_min) * t
    }

    /// Ventricle major semi-axis, `r_min + (r_max − r_min)·t^exponent`.
    pub fn ventricle_radius(&self, age: f64) -> f64 {
        let t = self.age_fraction(age);
        if t >= 1.0 {
            return self.ventricle_radius_max;
        }
        self.ventricle_radius_min + (self.ventricle_radius_max - self.ventricle_radius_min) * t.powf(self.ventricle_exponent)
    }

    pub fn blob_intensity(&self, age: f64) -> f64 {
        let t = self.age_fraction(age);
        self.blob_intensity_young + (self.blob_intensity_old - self.blob_intensity_young) * t
    }

    fn center(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid("phantom config", format!("dims {:?} below 8", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("phantom config", "spacing must be positive"));
        }
        if !ordered(self.age_min, self.age_max) {
            return Err(Error::invalid("phantom config", "age range must be ordered"));
        }
        if !(ordered(self.shell_thickness_min, self.shell_thickness_max) && self.shell_thickness_min > 0.0) {
            return Err(Error::invalid("phantom config", "need 0 < shell_thickness_min < shell_thickness_max"));
        }
        if !(ordered(self.ventricle_radius_min, self.ventricle_radius_max) && self.ventricle_radius_min > 0.0) {
            return Err(Error::invalid("phantom config", "need 0 < ventricle_radius_min < ventricle_radius_max"));
        }
        if !(self.ventricle_aspect > 0.0 && self.ventricle_aspect <= 1.0) || !(self.ventricle_exponent > 0.0) {
            return Err(Error::invalid("phantom config", "ventricle aspect in (0, 1] and exponent > 0 required"));
        }
        let intensities = [
            self.blob_intensity_young,
            self.blob_intensity_old,
            self.tissue_intensity,
            self.shell_intensity,
            self.ventricle_intensity,
            self.distractor_intensity[0],
            self.distractor_intensity[1],
        ];
        if intensities.iter().any(|v| !(0.0..=1.0).contains(v)) || self.distractor_intensity[0] > self.distractor_intensity[1] {
            return Err(Error::invalid("phantom config", "intensities must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("phantom config", "noise sigma must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.head_radius_jitter) || !(0.0..0.5).contains(&self.intensity_gain_jitter) {
            return Err(Error::invalid("phantom config", "jitters must lie in [0, 0.5)"));
        }
        let half = self.dims.iter().min().copied().unwrap_or(0) as f64 / 2.0;
        if self.head_radius * (1.0 + self.head_radius_jitter) + 0.5 > half {
            return Err(Error::Geometry(format!(
                "head radius {} does not fit in dims {:?}",
                self.head_radius, self.dims
            )));
        }
        let inner = self.head_radius * (1.0 - self.head_radius_jitter) - self.shell_thickness_max;
        if self.ventricle_radius_max + 0.5 > inner {
            return Err(Error::Geometry(format!(
                "ventricle radius {} reaches the shell (inner radius {inner})",
                self.ventricle_radius_max
            )));
        }
        let minor = self.ventricle_radius_max * self.ventricle_aspect;
        if self.blob_offset - self.blob_radius < minor + 0.5 || self.blob_offset + self.blob_radius + 0.5 > inner {
            return Err(Error::Geometry(format!(
                "blobs at offset {} radius {} collide with ventricle or shell",
                self.blob_offset, self.blob_radius
            )));
        }
        if self.distractor_count > 0 && !(self.distractor_radius > 0.0) {
            return Err(Error::Geometry("distractor radius must be positive".into()));
        }
        Ok(())
    }

    fn check_age(&self, age: f64) -> Result<()> {
        if !(age >= self.age_min && age <= self.age_max) {
            return Err(Error::AgeOutOfRange {
                age,
                min: self.age_min,
                max: self.age_max,
            });
        }
        Ok(())
    }
}

/// Integer label volume with names; label ids run contiguously from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcellationAtlas {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub names: Vec<String>,
    pub informative: BTreeSet<u16>,
}

impl ParcellationAtlas {
    pub fn label_count(&self) -> usize {
        self.names.len()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn is_informative(&self, label: u16) -> bool {
        self.informative.contains(&label)
    }

    /// Voxelwise most frequent label across atlases sharing dims and names
    /// (ties go to the smaller label id).
    pub fn majority(atlases: &[&ParcellationAtlas]) -> Result<ParcellationAtlas> {
        let first = *atlases.first().ok_or_else(|| Error::Empty { what: "atlas list".into() })?;
        if atlases.iter().any(|a| a.dims != first.dims || a.names != first.names) {
            return Err(Error::invalid("atlas", "majority needs atlases with equal dims and label names"));
        }
        let mut counts = vec![0usize; first.names.len()];
        let labels = (0..first.labels.len())
            .map(|v| {
                counts.iter_mut().for_each(|c| *c = 0);
                for a in atlases {
                    counts[a.labels[v] as usize] += 1;
                }
                let mut best = 0;
                for (l, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = l;
                    }
                }
                best as u16
            })
            .collect();
        Ok(ParcellationAtlas {
            dims: first.dims,
            labels,
            names: first.names.clone(),
            informative: first.informative.clone(),
        })
    }

    pub fn label_names(distractors: usize) -> Vec<String> {
        let mut names: Vec<String> = ["background", "shell", "ventricle", "blob_left", "blob_right"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((1..=distractors).map(|i| format!("distractor_{i}")));
        names
    }
}

#[derive(Clone, Copy, Debug)]
struct Sphere {
    center: [f64; 3],
    radius: f64,
    intensity: f64,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Age-independent subject traits: (head radius, intensity gain).
fn subject_traits(config: &PhantomConfig, seed: u64) -> (f64, f64) {
    let mut rng = rng_for(seed, &[STREAM_SUBJECT]);
    let mut draw = |j: f64| if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
    let radius = config.head_radius * draw(config.head_radius_jitter);
    (radius, draw(config.intensity_gain_jitter))
}

/// Age-independent distractor spheres for one subject.
fn place_distractors(config: &PhantomConfig, head_radius: f64, seed: u64, sex: Sex) -> Result<Vec<Sphere>> {
    let mut rng = rng_for(seed, &[STREAM_DISTRACTORS]);
    let c = config.center();
    let rd = config.distractor_radius;
    let inner = head_radius - config.shell_thickness_max - rd - 0.5;
    let vmaj = config.ventricle_radius_max + rd + 1.0;
    let vmin = config.ventricle_radius_max * config.ventricle_aspect + rd + 1.0;
    let blobs = [
        [c[0], c[1] - config.blob_offset, c[2]],
        [c[0], c[1] + config.blob_offset, c[2]],
    ];
    let mut placed: Vec<Sphere> = Vec::with_capacity(config.distractor_count);
    let mut attempts = 0;
    while placed.len() < config.distractor_count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Geometry(format!(
                "could not place {} distractors of radius {rd}",
                config.distractor_count
            )));
        }
        let p = [0, 1, 2].map(|a| c[a] + rng.random_range(-inner..=inner));
        let off = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        if dist(p, c) > inner {
            continue;
        }
        if (off[0] / vmaj).powi(2) + (off[1] / vmin).powi(2) + (off[2] / vmin).powi(2) <= 1.0 {
            continue;
        }
        if blobs.iter().any(|&b| dist(p, b) < config.blob_radius + rd + 1.0) {
            continue;
        }
        if placed.iter().any(|s| dist(p, s.center) < 2.0 * rd + 1.0) {
            continue;
        }
        let intensity = rng.random_range(config.distractor_intensity[0]..=config.distractor_intensity[1]);
        placed.push(Sphere {
            center: p,
            radius: rd,
            intensity,
        });
    }
    if sex == Sex::M {
        for s in &mut placed {
            s.center[0] = 2.0 * c[0] - s.center[0];
        }
    }
    Ok(placed)
}

/// Noise-free labels and intensities.
fn render(config: &PhantomConfig, age: f64, seed: u64, sex: Sex) -> Result<(Vec<u16>, Vec<f32>)> {
    config.validate()?;
    config.check_age(age)?;
    let (outer, gain) = subject_traits(config, seed);
    let distractors = place_distractors(config, outer, seed, sex)?;
    let c = config.center();
    let inner = outer - config.shell_thickness(age);
    let vr = config.ventricle_radius(age);
    let vminor = vr * config.ventricle_aspect;
    let blob_i = config.blob_intensity(age);
    let blobs = [
        Sphere {
            center: [c[0], c[1] - config.blob_offset, c[2]],
            radius: config.blob_radius,
            intensity: blob_i,
        },
        Sphere {
            center: [c[0], c[1] + config.blob_offset, c[2]],
            radius: config.blob_radius,
            intensity: blob_i,
        },
    ];
    let [nx, ny, nz] = config.dims;
    let mut labels = vec![LABEL_BACKGROUND; nx * ny * nz];
    let mut intensity = vec![0.0f32; nx * ny * nz];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let off = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let r = dist(p, c);
                let (label, value) = if let Some((k, s)) =
                    distractors.iter().enumerate().find(|(_, s)| dist(p, s.center) <= s.radius)
                {
                    (FIRST_DISTRACTOR + k as u16, s.intensity)
                } else if let Some((k, s)) = blobs.iter().enumerate().find(|(_, s)| dist(p, s.center) <= s.radius) {
                    (LABEL_BLOB_LEFT + k as u16, s.intensity)
                } else if (off[0] / vr).powi(2) + (off[1] / vminor).powi(2) + (off[2] / vminor).powi(2) <= 1.0 {
                    (LABEL_VENTRICLE, config.ventricle_intensity)
                } else if r <= outer && r >= inner {
                    (LABEL_SHELL, config.shell_intensity)
                } else if r < inner {
                    (LABEL_BACKGROUND, config.tissue_intensity)
                } else {
                    (LABEL_BACKGROUND, 0.0)
                };
                labels[i] = label;
                intensity[i] = (value * gain).min(1.0) as f32;
                i += 1;
            }
        }
    }
    Ok((labels, intensity))
}

fn atlas_from(config: &PhantomConfig, labels: Vec<u16>) -> ParcellationAtlas {
    ParcellationAtlas {
        dims: config.dims,
        labels,
        names: ParcellationAtlas::label_names(config.distractor_count),
        informative: [LABEL_SHELL, LABEL_VENTRICLE, LABEL_BLOB_LEFT, LABEL_BLOB_RIGHT].into_iter().collect(),
    }
}

/// Ground-truth label geometry without noise.
pub fn phantom_labels(age: f64, seed: u64, sex: Sex, config: &PhantomConfig) -> Result<ParcellationAtlas> {
    let (labels, _) = render(config, age, seed, sex)?;
    Ok(atlas_from(config, labels))
}

/// Renders one phantom at `age`; identical inputs give bit-identical output.
pub fn generate_phantom(age: f64, seed: u64, sex: Sex, config: &PhantomConfig) -> Result<(Volume, ParcellationAtlas)> {
    let (labels, mut voxels) = render(config, age, seed, sex)?;
    if config.noise_sigma > 0.0 {
        let mut rng = rng_for(seed, &[STREAM_NOISE]);
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::invalid("phantom noise", e.to_string()))?;
        for v in &mut voxels {
            let n: f64 = normal.sample(&mut rng);
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
    let volume = Volume::new(config.dims, config.spacing, voxels)?;
    Ok((volume, atlas_from(config, labels)))
}
