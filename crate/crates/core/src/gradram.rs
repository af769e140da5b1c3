//! Gradient-weighted regression activation maps and parcel scoring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rankage_autodiff::kernels::trilinear_forward;
use rankage_autodiff::Tensor;

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::phantom::{write_volume, ParcellationAtlas, Volume};
use crate::util::{atomic_write, read_json, write_json};

/// Where the ReLU sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReluMode {
    /// `ReLU(Σ_c α_c·A_c)` with `α_c` the spatial mean gradient.
    #[default]
    WeightedCombination,
    /// `max(0, Σ_c mean(ReLU(∂ŷ/∂A_c))·A_c)`.
    GradientRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradRamConfig {
    /// `None` selects the encoder's last stage.
    pub target_layer: Option<String>,
    pub relu_mode: ReluMode,
    pub threshold: f64,
    /// Lower edges of the age groups; the last group is open-ended.
    pub age_bins: Vec<f64>,
    pub allow_untrained: bool,
}

impl Default for GradRamConfig {
    fn default() -> Self {
        Self {
            target_layer: None,
            relu_mode: ReluMode::default(),
            threshold: 0.8,
            age_bins: vec![20.0, 40.0, 60.0, 80.0],
            allow_untrained: false,
        }
    }
}

impl GradRamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("gradram threshold", format!("{} outside [0, 1]", self.threshold)));
        }
        if self.age_bins.is_empty() || self.age_bins.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("age bins", format!("{:?} must be strictly increasing", self.age_bins)));
        }
        Ok(())
    }

    pub fn layer(&self, model: &Model) -> String {
        self.target_layer.clone().unwrap_or_else(|| model.config.last_layer())
    }
}

/// Label of the age group containing `age`; ages under the first edge fall in the first group.
pub fn age_group(age: f64, bins: &[f64]) -> String {
    let i = bins.iter().rposition(|&b| age >= b).unwrap_or(0);
    match bins.get(i + 1) {
        Some(hi) => format!("{}-{}", bins[i], hi),
        None => format!("{}+", bins[i]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    /// Subject id or group tag.
    pub subject: String,
    pub model: String,
    pub layer: String,
    pub mode: ReluMode,
    /// Range of the upsampled map before normalization.
    pub raw_min: f64,
    pub raw_max: f64,
    /// Number of maps averaged (1 for a single subject).
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// x fastest, values in [0, 1].
    pub values: Vec<f64>,
    pub meta: SaliencyMeta,
}

impl SaliencyMap {
    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, self.values.iter().map(|&v| v as f32).collect())
    }

    /// Writes the RVOL volume and a `.json` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_volume(path, &self.to_volume()?)?;
        write_json(&sidecar_path(path), &self.meta)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let v = crate::phantom::read_volume(path)?;
        let meta: SaliencyMeta = read_json(&sidecar_path(path))?;
        Ok(Self {
            dims: v.dims(),
            spacing: v.spacing(),
            values: v.voxels().iter().map(|&x| x as f64).collect(),
            meta,
        })
    }

    /// Saliency-weighted share of the map inside the atlas's informative labels.
    pub fn informative_mass(&self, atlas: &ParcellationAtlas) -> Result<f64> {
        check_atlas(self, atlas)?;
        let (mut inside, mut total) = (0.0, 0.0);
        for (&v, &l) in self.values.iter().zip(&atlas.labels) {
            total += v;
            if atlas.is_informative(l) {
                inside += v;
            }
        }
        if total == 0.0 {
            return Err(Error::ZeroVariance { what: "saliency map (no mass)" });
        }
        Ok(inside / total)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Min-max scaling to [0, 1]; a constant map becomes zeros. Returns (min, max).
pub fn normalize(values: &mut [f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let span = hi - lo;
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    (lo, hi)
}

/// Raw map at activation resolution from `A` and `∂ŷ/∂A`, both `[1, C, D, H, W]`.
pub fn raw_map(activation: &Tensor<f64>, gradient: &Tensor<f64>, mode: ReluMode) -> Result<Vec<f64>> {
    let shape = activation.shape();
    if shape.len() != 5 || shape[0] != 1 || gradient.shape() != shape {
        return Err(Error::invalid(
            "gradram",
            format!("activation {:?} and gradient {:?} must both be [1, C, D, H, W]", shape, gradient.shape()),
        ));
    }
    let c = shape[1];
    let vox: usize = shape[2..].iter().product();
    let (a, g) = (activation.data(), gradient.data());
    let mut map = vec![0.0; vox];
    for ch in 0..c {
        let gs = &g[ch * vox..(ch + 1) * vox];
        let alpha = match mode {
            ReluMode::WeightedCombination => gs.iter().sum::<f64>(),
            ReluMode::GradientRelu => gs.iter().map(|v| v.max(0.0)).sum::<f64>(),
        } / vox as f64;
        for (m, &av) in map.iter_mut().zip(&a[ch * vox..(ch + 1) * vox]) {
            *m += alpha * av;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

/// Upsamples a raw `[D, H, W]` map to the volume grid and normalizes it.
pub fn finish_map(raw: &[f64], raw_dims: [usize; 3], volume_dims: [usize; 3], spacing: [f32; 3], meta: SaliencyMeta) -> SaliencyMap {
    let [nx, ny, nz] = volume_dims;
    let mut values = trilinear_forward(raw, 1, raw_dims, [nz, ny, nx]);
    let (raw_min, raw_max) = normalize(&mut values);
    SaliencyMap {
        dims: volume_dims,
        spacing,
        values,
        meta: SaliencyMeta { raw_min, raw_max, ..meta },
    }
}

/// Saliency of one volume with respect to the predicted age.
pub fn gradram(model: &Model, volume: &Volume, subject: &str, model_id: &str, cfg: &GradRamConfig) -> Result<SaliencyMap> {
    if !model.trained && !cfg.allow_untrained {
        return Err(Error::Untrained);
    }
    let layer = cfg.layer(model);
    let ag = model.forward_with_activations(volume, &layer)?;
    let raw = raw_map(&ag.activation, &ag.gradient, cfg.relu_mode)?;
    let s = ag.activation.shape();
    Ok(finish_map(
        &raw,
        [s[2], s[3], s[4]],
        volume.dims(),
        volume.spacing(),
        SaliencyMeta {
            subject: subject.to_string(),
            model: model_id.to_string(),
            layer,
            mode: cfg.relu_mode,
            raw_min: 0.0,
            raw_max: 0.0,
            count: 1,
        },
    ))
}

/// Voxelwise mean per group, keyed and ordered by group tag.
pub fn group_average(maps: &[SaliencyMap], groups: &[String]) -> Result<BTreeMap<String, SaliencyMap>> {
    if maps.len() != groups.len() {
        return Err(Error::invalid("group average", format!("{} maps but {} group tags", maps.len(), groups.len())));
    }
    let first = maps.first().ok_or_else(|| Error::Empty { what: "saliency maps".into() })?;
    if maps.iter().any(|m| m.dims != first.dims) {
        return Err(Error::invalid("group average", "maps differ in dims"));
    }
    let mut members: BTreeMap<&str, Vec<&SaliencyMap>> = BTreeMap::new();
    for (m, g) in maps.iter().zip(groups) {
        members.entry(g.as_str()).or_default().push(m);
    }
    Ok(members
        .into_iter()
        .map(|(g, ms)| {
            let mut values = vec![0.0; first.values.len()];
            for m in &ms {
                values.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
            }
            let n = ms.len() as f64;
            values.iter_mut().for_each(|a| *a /= n);
            let map = SaliencyMap {
                dims: first.dims,
                spacing: first.spacing,
                values,
                meta: SaliencyMeta {
                    subject: g.to_string(),
                    raw_min: 0.0,
                    raw_max: 1.0,
                    count: ms.len(),
                    ..first.meta.clone()
                },
            };
            (g.to_string(), map)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelScore {
    pub label: u16,
    pub name: String,
    pub mean: f64,
    pub voxels: usize,
    pub relevant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelScoreTable {
    pub threshold: f64,
    /// Decreasing mean; ties by label.
    pub rows: Vec<ParcelScore>,
}

impl ParcelScoreTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,name,mean,relevant\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.name, r.mean, r.relevant));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }

    pub fn get(&self, label: u16) -> Option<&ParcelScore> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn check_atlas(map: &SaliencyMap, atlas: &ParcellationAtlas) -> Result<()> {
    if atlas.dims != map.dims || atlas.labels.len() != map.values.len() {
        return Err(Error::invalid("atlas", format!("atlas dims {:?} differ from map dims {:?}", atlas.dims, map.dims)));
    }
    Ok(())
}

/// Mean saliency per nonzero label present in the atlas.
pub fn parcel_scores(map: &SaliencyMap, atlas: &ParcellationAtlas, threshold: f64) -> Result<ParcelScoreTable> {
    check_atlas(map, atlas)?;
    let mut sums = vec![0.0; atlas.label_count()];
    let mut counts = vec![0usize; atlas.label_count()];
    for (&v, &l) in map.values.iter().zip(&atlas.labels) {
        let l = l as usize;
        if l >= sums.len() {
            return Err(Error::invalid("atlas", format!("label {l} has no name")));
        }
        sums[l] += v;
        counts[l] += 1;
    }
    let mut rows: Vec<ParcelScore> = (1..sums.len())
        .filter(|&l| counts[l] > 0)
        .map(|l| {
            let mean = sums[l] / counts[l] as f64;
            ParcelScore {
                label: l as u16,
                name: atlas.names[l].clone(),
                mean,
                voxels: counts[l],
                relevant: mean > threshold,
            }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty { what: "atlas parcels (no nonzero labels)".into() });
    }
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.label.cmp(&b.label)));
    Ok(ParcelScoreTable { threshold, rows })
}
