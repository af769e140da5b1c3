//! Training-time augmentation: translate → rotate → noise → crop-resize, each
//! applied independently with its own probability.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use rankage_autodiff::kernels::trilinear_forward;

use crate::error::{Error, Result};
use crate::phantom::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_translate: f64,
    pub p_rotate: f64,
    pub p_noise: f64,
    pub p_crop: f64,
    /// Maximum shift per axis in voxels; `None` means ⌈0.05 · min dim⌉.
    pub max_translation: Option<usize>,
    pub rotation_range: [f64; 2],
    pub noise_mean: f64,
    pub noise_std: f64,
    pub min_crop_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_translate: 0.5,
            p_rotate: 0.5,
            p_noise: 0.5,
            p_crop: 0.5,
            max_translation: None,
            rotation_range: [0.1, 0.5],
            noise_mean: 0.0,
            noise_std: 0.025,
            min_crop_fraction: 0.7,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            p_translate: 0.0,
            p_rotate: 0.0,
            p_noise: 0.0,
            p_crop: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_translate", self.p_translate),
            ("p_rotate", self.p_rotate),
            ("p_noise", self.p_noise),
            ("p_crop", self.p_crop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("augment config", format!("{name} = {p} outside [0, 1]")));
            }
        }
        let [lo, hi] = self.rotation_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::invalid("augment config", format!("rotation range {lo}..{hi} not ordered")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.noise_mean.is_finite()) {
            return Err(Error::invalid("augment config", "noise parameters must be finite, std ≥ 0"));
        }
        if !(self.min_crop_fraction > 0.0 && self.min_crop_fraction <= 1.0) {
            return Err(Error::invalid("augment config", format!("crop fraction {} outside (0, 1]", self.min_crop_fraction)));
        }
        Ok(())
    }

    pub fn max_shift(&self, dims: [usize; 3]) -> usize {
        self.max_translation
            .unwrap_or_else(|| (0.05 * *dims.iter().min().expect("three dims") as f64).ceil() as usize)
    }
}

/// Integer shift; vacated voxels become 0.
pub fn translate(volume: &Volume, shift: [isize; 3]) -> Volume {
    let [nx, ny, nz] = volume.dims();
    let mut out = Volume::zeros(volume.dims());
    let src = volume.voxels();
    let dst = out.voxels_mut();
    for z in 0..nz {
        let Some(sz) = (z as isize - shift[2]).try_into().ok().filter(|&s: &usize| s < nz) else {
            continue;
        };
        for y in 0..ny {
            let Some(sy) = (y as isize - shift[1]).try_into().ok().filter(|&s: &usize| s < ny) else {
                continue;
            };
            for x in 0..nx {
                let sx = x as isize - shift[0];
                if sx >= 0 && (sx as usize) < nx {
                    dst[x + nx * (y + ny * z)] = src[sx as usize + nx * (sy + ny * sz)];
                }
            }
        }
    }
    with_spacing(out, volume)
}

fn with_spacing(out: Volume, like: &Volume) -> Volume {
    Volume::new(out.dims(), like.spacing(), out.voxels().to_vec()).expect("same dims as input")
}

/// Trilinear sample with zero outside the grid.
fn sample_zero(volume: &Volume, p: [f64; 3]) -> f64 {
    let dims = volume.dims();
    let base = p.map(f64::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = [dx, dy, dz]
                    .iter()
                    .zip(frac)
                    .map(|(&d, f)| if d == 1 { f } else { 1.0 - f })
                    .product::<f64>();
                if w == 0.0 {
                    continue;
                }
                let idx = [base[0] as i64 + dx, base[1] as i64 + dy, base[2] as i64 + dz];
                if idx.iter().zip(dims).all(|(&i, d)| i >= 0 && (i as usize) < d) {
                    acc += w * volume.get(idx[0] as usize, idx[1] as usize, idx[2] as usize) as f64;
                }
            }
        }
    }
    acc
}

/// Rotation by `angle` about unit `axis` through the volume center (inverse mapping, zero fill).
pub fn rotate(volume: &Volume, axis: [f64; 3], angle: f64) -> Volume {
    let [nx, ny, nz] = volume.dims();
    let c = volume.dims().map(|d| (d as f64 - 1.0) / 2.0);
    // Rodrigues matrix for −angle maps output positions back to the source.
    let (s, co) = (-angle).sin_cos();
    let [ux, uy, uz] = axis;
    let t = 1.0 - co;
    let r = [
        [co + ux * ux * t, ux * uy * t - uz * s, ux * uz * t + uy * s],
        [uy * ux * t + uz * s, co + uy * uy * t, uy * uz * t - ux * s],
        [uz * ux * t - uy * s, uz * uy * t + ux * s, co + uz * uz * t],
    ];
    let mut out = Volume::zeros(volume.dims());
    let dst = out.voxels_mut();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let p = [0, 1, 2].map(|a| r[a][0] * d[0] + r[a][1] * d[1] + r[a][2] * d[2] + c[a]);
                dst[i] = sample_zero(volume, p) as f32;
                i += 1;
            }
        }
    }
    with_spacing(out, volume)
}

pub fn add_noise(volume: &Volume, mean: f64, std: f64, rng: &mut impl Rng) -> Result<Volume> {
    let normal = Normal::new(mean, std).map_err(|e| Error::invalid("augment noise", e.to_string()))?;
    let voxels = volume.voxels().iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect();
    Volume::new(volume.dims(), volume.spacing(), voxels)
}

/// Cuts the box `origin .. origin + size` and resamples it back to full dims.
pub fn crop_resize(volume: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let dims = volume.dims();
    if (0..3).any(|a| size[a] == 0 || origin[a] + size[a] > dims[a]) {
        return Err(Error::invalid("crop", format!("box {origin:?}+{size:?} outside {dims:?}")));
    }
    let mut crop = Vec::with_capacity(size.iter().product());
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            for x in origin[0]..origin[0] + size[0] {
                crop.push(volume.get(x, y, z));
            }
        }
    }
    let voxels = trilinear_forward(&crop, 1, [size[2], size[1], size[0]], [dims[2], dims[1], dims[0]]);
    Volume::new(dims, volume.spacing(), voxels)
}

/// Isotropic crop box: one fraction `f ∈ [min_fraction, 1]`, extent ⌈f·d⌉ per axis.
pub fn draw_crop(dims: [usize; 3], min_fraction: f64, rng: &mut impl Rng) -> ([usize; 3], [usize; 3]) {
    let f = if min_fraction < 1.0 {
        rng.random_range(min_fraction..=1.0)
    } else {
        1.0
    };
    let size = dims.map(|d| ((f * d as f64).ceil() as usize).clamp(1, d));
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]));
    (origin, size)
}

/// Applies the four transforms in fixed order. Each one consumes a Bernoulli
/// draw and, only when applied, its parameter draws.
pub fn augment(volume: &Volume, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Volume> {
    config.validate()?;
    let dims = volume.dims();
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::invalid("augment", format!("dims {dims:?} below 8 per axis")));
    }
    let mut v = volume.clone();
    if rng.random_bool(config.p_translate) {
        let m = config.max_shift(dims) as i64;
        let shift = [0; 3].map(|_: i32| rng.random_range(-m..=m) as isize);
        v = translate(&v, shift);
    }
    if rng.random_bool(config.p_rotate) {
        let axis = loop {
            let a: [f64; 3] = [0; 3].map(|_: i32| StandardNormal.sample(rng));
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            if n > 1e-9 {
                break a.map(|x| x / n);
            }
        };
        let [lo, hi] = config.rotation_range;
        let angle = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        v = rotate(&v, axis, angle);
    }
    if rng.random_bool(config.p_noise) {
        v = add_noise(&v, config.noise_mean, config.noise_std, rng)?;
    }
    if rng.random_bool(config.p_crop) {
        let (origin, size) = draw_crop(dims, config.min_crop_fraction, rng);
        v = crop_resize(&v, origin, size)?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{mean_std, rng_for};

    fn ramp(d: usize) -> Volume {
        let v = (0..d * d * d).map(|i| (i % 97) as f32 / 97.0).collect();
        Volume::new([d, d, d], [1.0; 3], v).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let v = ramp(12);
        let out = augment(&v, &AugmentConfig::identity(), &mut rng_for(1, &[])).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn translation_moves_spike_and_zero_fills() {
        let mut v = Volume::zeros([10, 10, 10]);
        let at = v.index(3, 4, 5);
        v.voxels_mut()[at] = 1.0;
        let out = translate(&v, [2, 0, 0]);
        assert_eq!(out.get(5, 4, 5), 1.0);
        assert_eq!(out.voxels().iter().filter(|&&x| x != 0.0).count(), 1);
        let edge = translate(&ramp(10), [2, 0, 0]);
        assert!((0..10).all(|z| (0..10).all(|y| edge.get(0, y, z) == 0.0 && edge.get(1, y, z) == 0.0)));
    }

    #[test]
    fn noise_statistics_on_zero_volume() {
        let v = Volume::zeros([32, 32, 32]);
        let out = add_noise(&v, 0.0, 0.025, &mut rng_for(7, &[])).unwrap();
        let vals: Vec<f64> = out.voxels().iter().map(|&x| x as f64).collect();
        let (m, s) = mean_std(&vals);
        assert!(m.abs() < 0.002 && (s - 0.025).abs() < 0.002, "{m} {s}");
    }

    #[test]
    fn rotation_keeps_constant_interior() {
        let v = Volume::new([16, 16, 16], [1.0; 3], vec![0.7; 4096]).unwrap();
        let out = rotate(&v, [0.0, 0.6, 0.8], 0.4);
        for z in 5..11 {
            for y in 5..11 {
                for x in 5..11 {
                    assert!((out.get(x, y, z) - 0.7).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn crop_box_never_below_min_fraction() {
        let mut rng = rng_for(11, &[]);
        for _ in 0..2000 {
            let dims = [32, 20, 9];
            let (o, s) = draw_crop(dims, 0.7, &mut rng);
            for a in 0..3 {
                assert!(s[a] as f64 >= 0.7 * dims[a] as f64 && o[a] + s[a] <= dims[a]);
            }
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let v = ramp(9);
        let out = crop_resize(&v, [0; 3], [9; 3]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn shapes_preserved_and_deterministic() {
        let cfg = AugmentConfig {
            p_translate: 1.0,
            p_rotate: 1.0,
            p_noise: 1.0,
            p_crop: 1.0,
            ..AugmentConfig::default()
        };
        let v = ramp(12);
        let a = augment(&v, &cfg, &mut rng_for(3, &[])).unwrap();
        let b = augment(&v, &cfg, &mut rng_for(3, &[])).unwrap();
        assert_eq!(a.dims(), v.dims());
        assert_eq!(a, b);
        assert!(augment(&Volume::zeros([7, 8, 8]), &cfg, &mut rng_for(3, &[])).is_err());
    }
}
