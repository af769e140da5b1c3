//! Dataset manifests: age stratification, split assignment and on-disk layout.
//!
//! A dataset directory holds `manifest.json` (array of samples), `dataset.json`
//! (phantom config plus per-group generation offsets), `volumes/<id>.rvol` and
//! `labels/<id>.rvol` (atlas labels stored as f32).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, phantom_labels, read_volume, write_volume, ParcellationAtlas, PhantomConfig, Sex, Volume};
use crate::util::{derive_seed, read_json, rng_for, tag, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INFO_FILE: &str = "dataset.json";
pub const CONTROL_GROUP: &str = "NC";
pub const ACCELERATED_GROUP: &str = "accelerated";
const DECADE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("{other:?} is not train/val/test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSample {
    pub id: String,
    /// Volume path relative to the dataset directory.
    pub path: String,
    pub age: f64,
    pub group: String,
    pub sex: Sex,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("split ratios", format!("{r:?} must all be positive")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios", format!("{r:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: val and test are rounded, train takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        (n.saturating_sub(val + test), val, test)
    }
}

/// Everything needed to re-render a manifest's volumes and atlases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub phantom: PhantomConfig,
    /// Years added to the labeled age when rendering each group.
    pub group_offsets: BTreeMap<String, f64>,
}

impl DatasetInfo {
    pub fn new(phantom: PhantomConfig) -> Self {
        Self {
            phantom,
            group_offsets: BTreeMap::from([(CONTROL_GROUP.to_string(), 0.0)]),
        }
    }

    pub fn generation_age(&self, sample: &LabeledSample) -> Result<f64> {
        let offset = self
            .group_offsets
            .get(&sample.group)
            .ok_or_else(|| Error::invalid("manifest", format!("sample {} has unknown group {:?}", sample.id, sample.group)))?;
        Ok(sample.age + offset)
    }

    pub fn render(&self, sample: &LabeledSample) -> Result<(Volume, ParcellationAtlas)> {
        generate_phantom(self.generation_age(sample)?, sample.seed, sample.sex, &self.phantom)
    }

    pub fn atlas(&self, sample: &LabeledSample) -> Result<ParcellationAtlas> {
        phantom_labels(self.generation_age(sample)?, sample.seed, sample.sex, &self.phantom)
    }
}

/// Decade bins `[a_min + 10k, min(a_min + 10(k+1), a_max)]`.
pub fn decade_bins(age_min: f64, age_max: f64) -> Vec<(f64, f64)> {
    let count = ((age_max - age_min) / DECADE).ceil().max(1.0) as usize;
    (0..count)
        .map(|k| {
            let lo = age_min + DECADE * k as f64;
            (lo, (lo + DECADE).min(age_max))
        })
        .collect()
}

/// Ages stratified by decade: sample `k` lands in bin `k mod bins`, uniform within it.
fn stratified_ages(n: usize, age_min: f64, age_max: f64, seeds: &[u64]) -> Vec<f64> {
    let bins = decade_bins(age_min, age_max);
    (0..n)
        .map(|k| {
            let (lo, hi) = bins[k % bins.len()];
            let mut rng = rng_for(seeds[k], &[tag("age")]);
            let age = rng.random_range(lo..hi);
            age.clamp(age_min, age_max)
        })
        .collect()
}

/// Interleaves splits along the age order so each split spans the full range.
fn assign_splits(ages: &[f64], counts: [usize; 3]) -> Vec<Split> {
    let n = ages.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ages[a].total_cmp(&ages[b]).then(a.cmp(&b)));
    let mut assigned = [0usize; 3];
    let mut out = vec![Split::Train; n];
    for (p, &idx) in order.iter().enumerate() {
        let deficit = |s: usize| (p + 1) as f64 * counts[s] as f64 / n as f64 - assigned[s] as f64;
        let mut best = 0;
        for s in 1..3 {
            if deficit(s) > deficit(best) + 1e-12 {
                best = s;
            }
        }
        assigned[best] += 1;
        out[idx] = Split::ALL[best];
    }
    out
}

fn sample_seed(seed: u64, group: &str, index: usize) -> u64 {
    derive_seed(seed, &[tag(group), index as u64])
}

fn draw_sex(sample_seed: u64) -> Sex {
    if rng_for(sample_seed, &[tag("sex")]).random_bool(0.5) {
        Sex::M
    } else {
        Sex::F
    }
}

/// Control-group manifest with decade-stratified ages and train/val/test splits.
pub fn generate_dataset(n: usize, config: &PhantomConfig, ratios: SplitRatios, seed: u64) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    ratios.validate()?;
    if n < 10 {
        return Err(Error::invalid("dataset size", format!("n = {n}, need at least 10")));
    }
    let (train, val, test) = ratios.counts(n);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::invalid("split ratios", format!("n = {n} leaves an empty split ({train}/{val}/{test})")));
    }
    let seeds: Vec<u64> = (0..n).map(|i| sample_seed(seed, CONTROL_GROUP, i)).collect();
    let ages = stratified_ages(n, config.age_min, config.age_max, &seeds);
    let splits = assign_splits(&ages, [train, val, test]);
    Ok((0..n)
        .map(|i| {
            let id = format!("s{i:05}");
            LabeledSample {
                path: format!("volumes/{id}.rvol"),
                id,
                age: ages[i],
                group: CONTROL_GROUP.to_string(),
                sex: draw_sex(seeds[i]),
                split: splits[i],
                seed: seeds[i],
            }
        })
        .collect())
}

/// Held-out cohort rendered at `age + offset` but labeled with `age`; all
/// samples go to the test split. Ages are drawn from `[a_min, a_max − offset]`.
pub fn generate_cohort(n: usize, config: &PhantomConfig, group: &str, offset: f64, seed: u64) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::invalid("cohort size", "need at least one sample"));
    }
    if !(offset.is_finite() && offset >= 0.0 && config.age_min + offset < config.age_max) {
        return Err(Error::invalid("cohort offset", format!("{offset} leaves no valid age range")));
    }
    if group == CONTROL_GROUP {
        return Err(Error::invalid("cohort group", "the control group name is reserved"));
    }
    let seeds: Vec<u64> = (0..n).map(|i| sample_seed(seed, group, i)).collect();
    let ages = stratified_ages(n, config.age_min, config.age_max - offset, &seeds);
    let prefix: String = group.chars().filter(|c| c.is_ascii_alphanumeric()).take(3).collect();
    Ok((0..n)
        .map(|i| {
            let id = format!("{prefix}{i:05}");
            LabeledSample {
                path: format!("volumes/{id}.rvol"),
                id,
                age: ages[i],
                group: group.to_string(),
                sex: draw_sex(seeds[i]),
                split: Split::Test,
                seed: seeds[i],
            }
        })
        .collect())
}

pub fn validate_manifest(samples: &[LabeledSample], info: &DatasetInfo) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::invalid("manifest", format!("duplicate sample id {}", s.id)));
        }
        let (lo, hi) = (info.phantom.age_min, info.phantom.age_max);
        if !(s.age >= lo && s.age <= hi) {
            return Err(Error::AgeOutOfRange { age: s.age, min: lo, max: hi });
        }
        info.generation_age(s)?;
    }
    Ok(())
}

/// Loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::invalid("data dir", format!("{} has no {MANIFEST_FILE}", root.display())));
        }
        let samples: Vec<LabeledSample> = read_json(&manifest)?;
        let info: DatasetInfo = read_json(&root.join(INFO_FILE))?;
        info.phantom.validate()?;
        validate_manifest(&samples, &info)?;
        Ok(Self {
            root: root.to_path_buf(),
            info,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn read(&self, sample: &LabeledSample) -> Result<Volume> {
        read_volume(&self.root.join(&sample.path))
    }
}

pub fn label_path(id: &str) -> String {
    format!("labels/{id}.rvol")
}

/// Renders every sample and writes volumes, label volumes, manifest and info.
pub fn write_dataset(root: &Path, info: &DatasetInfo, samples: &[LabeledSample]) -> Result<()> {
    validate_manifest(samples, info)?;
    for s in samples {
        let (volume, atlas) = info.render(s)?;
        write_volume(&root.join(&s.path), &volume)?;
        let labels = Volume::new(atlas.dims, volume.spacing(), atlas.labels.iter().map(|&l| l as f32).collect())?;
        write_volume(&root.join(label_path(&s.id)), &labels)?;
    }
    write_json(&root.join(INFO_FILE), info)?;
    write_json(&root.join(MANIFEST_FILE), &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_sizes() {
        let cfg = PhantomConfig::default();
        for (n, want) in [(100, (80, 10, 10)), (10, (8, 1, 1)), (200, (160, 20, 20))] {
            let m = generate_dataset(n, &cfg, SplitRatios::default(), 1).unwrap();
            let count = |s| m.iter().filter(|x| x.split == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), want);
        }
    }

    #[test]
    fn bad_ratios_and_small_n_rejected() {
        let cfg = PhantomConfig::default();
        let r = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(generate_dataset(100, &cfg, r, 1).is_err());
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(generate_dataset(100, &cfg, r, 1).is_err());
        assert!(generate_dataset(5, &cfg, SplitRatios::default(), 1).unwrap_err().is_validation());
    }

    #[test]
    fn cohort_ages_leave_room_for_offset() {
        let cfg = PhantomConfig::default();
        let c = generate_cohort(50, &cfg, ACCELERATED_GROUP, 8.0, 3).unwrap();
        assert!(c.iter().all(|s| s.age >= 20.0 && s.age <= 92.0 && s.split == Split::Test));
        let mut info = DatasetInfo::new(cfg);
        info.group_offsets.insert(ACCELERATED_GROUP.into(), 8.0);
        assert_eq!(info.generation_age(&c[0]).unwrap(), c[0].age + 8.0);
    }
}
