//! Building blocks shared by the command line, sweeps and the benchmark.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use rankage_autodiff::Tensor;

use crate::config::{EvalConfig, ExperimentConfig};
use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::evalstats::{correlate, mae_r2, CorrelationKind, ModelEval, RegressionMetrics};
use crate::gradram::{age_group, gradram, group_average, parcel_scores, GradRamConfig, ParcelScoreTable, SaliencyMap};
use crate::phantom::{generate_dataset, DatasetInfo, LabeledSample, ParcellationAtlas, Split};
use crate::train::{train, HistoryRow, RunOptions, SampleSet, TrainData};
use crate::util::{atomic_write, rng_for, tag};

/// A generated dataset held in memory.
pub struct Prepared {
    pub info: DatasetInfo,
    pub samples: Vec<LabeledSample>,
    pub data: TrainData,
    pub test: SampleSet,
}

impl Prepared {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let samples = generate_dataset(cfg.dataset.size, &cfg.phantom, cfg.dataset.ratios, cfg.seed)?;
        let info = DatasetInfo::new(cfg.phantom.clone());
        let data = TrainData::render(&info, &samples)?;
        let test = SampleSet::render(&info, &split_of(&samples, Split::Test))?;
        Ok(Self { info, samples, data, test })
    }

    pub fn test_samples(&self) -> Vec<&LabeledSample> {
        split_of(&self.samples, Split::Test)
    }
}

pub fn split_of(samples: &[LabeledSample], split: Split) -> Vec<&LabeledSample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Metrics and per-sample rows of `model` on `set`, with BAG-vs-age correlation
/// and an optional older-subgroup block.
pub fn evaluate(model: &Model, name: &str, set: &SampleSet, cfg: &EvalConfig) -> Result<ModelEval> {
    if set.is_empty() {
        return Err(Error::Empty {
            what: "evaluation split".into(),
        });
    }
    let (_, preds) = model.infer(&set.refs(), cfg.chunk)?;
    let mut eval = ModelEval::new(name, &set.ids, &set.ages, &preds)?;
    if set.len() >= 3 {
        if let Err(e) = eval.add_covariate("age", &set.ages) {
            warn!("{name}: BAG/age correlation skipped: {e}");
        }
    }
    if let Some(min_age) = cfg.subgroup_min_age {
        eval.subgroup = subgroup_metrics(&preds, &set.ages, min_age)?;
    }
    Ok(eval)
}

fn subgroup_metrics(preds: &[f64], ages: &[f64], min_age: f64) -> Result<Option<crate::evalstats::SubgroupMetrics>> {
    let (p, a): (Vec<f64>, Vec<f64>) = preds.iter().zip(ages).filter(|(_, &a)| a >= min_age).map(|(&p, &a)| (p, a)).unzip();
    if a.len() < 2 {
        return Ok(None);
    }
    Ok(Some(crate::evalstats::SubgroupMetrics {
        min_age,
        metrics: mae_r2(&p, &a)?,
    }))
}

/// Spearman correlation between label distance and embedding distance over all pairs.
pub fn embedding_order(embeddings: &[Vec<f32>], ages: &[f64]) -> Result<f64> {
    let mut label_d = Vec::new();
    let mut emb_d = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            label_d.push((ages[i] - ages[j]).abs());
            let d2: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            emb_d.push(d2.sqrt());
        }
    }
    Ok(correlate(&label_d, &emb_d, CorrelationKind::Spearman)?.0)
}

/// Randomly initialized encoder with a seeded normal head: the chance-level
/// saliency control.
pub fn control_model(encoder: &EncoderConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(encoder.clone())?;
    let d = encoder.embedding_dim;
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
    let mut rng = rng_for(seed, &[tag("control-head")]);
    let w: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng) as f32).collect();
    *model.params.get_mut("head.w").expect("head") = Tensor::new(vec![d, 1], w)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLocalization {
    pub group: String,
    pub count: usize,
    /// Share of the group-averaged map inside informative parcels of the group's majority atlas.
    pub informative_mass: f64,
    pub parcels: ParcelScoreTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub model: String,
    pub layer: String,
    pub groups: Vec<GroupLocalization>,
    /// Group-size-weighted mean of the group masses.
    pub informative_mass: f64,
}

/// Per-subject maps, age-group averages, parcel tables and informative mass.
pub struct SaliencyStudy {
    pub maps: Vec<SaliencyMap>,
    pub averages: BTreeMap<String, SaliencyMap>,
    pub atlases: BTreeMap<String, ParcellationAtlas>,
    pub summary: Localization,
}

pub fn saliency_study(
    model: &Model,
    model_id: &str,
    info: &DatasetInfo,
    samples: &[&LabeledSample],
    set: &SampleSet,
    groups: &[String],
    cfg: &GradRamConfig,
) -> Result<SaliencyStudy> {
    if samples.len() != set.len() || groups.len() != set.len() {
        return Err(Error::invalid("saliency study", "samples, volumes and groups differ in length"));
    }
    let maps = (0..set.len())
        .map(|i| gradram(model, &set.volumes[i], &set.ids[i], model_id, cfg))
        .collect::<Result<Vec<_>>>()?;
    let averages = group_average(&maps, groups)?;
    let mut atlases = BTreeMap::new();
    let mut rows = Vec::new();
    let (mut weighted, mut total) = (0.0, 0usize);
    for (g, avg) in &averages {
        let members = samples
            .iter()
            .zip(groups)
            .filter(|(_, gg)| *gg == g)
            .map(|(s, _)| info.atlas(s))
            .collect::<Result<Vec<_>>>()?;
        let atlas = ParcellationAtlas::majority(&members.iter().collect::<Vec<_>>())?;
        let mass = avg.informative_mass(&atlas).unwrap_or(0.0);
        weighted += mass * avg.meta.count as f64;
        total += avg.meta.count;
        rows.push(GroupLocalization {
            group: g.clone(),
            count: avg.meta.count,
            informative_mass: mass,
            parcels: parcel_scores(avg, &atlas, cfg.threshold)?,
        });
        atlases.insert(g.clone(), atlas);
    }
    Ok(SaliencyStudy {
        summary: Localization {
            model: model_id.to_string(),
            layer: cfg.layer(model),
            groups: rows,
            informative_mass: weighted / total as f64,
        },
        maps,
        averages,
        atlases,
    })
}

/// Age-group tags for a sample set.
pub fn age_groups(set: &SampleSet, cfg: &GradRamConfig) -> Vec<String> {
    set.ages.iter().map(|&a| age_group(a, &cfg.age_bins)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BatchSize,
    Resolution,
    Depth,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-size" => Ok(Self::BatchSize),
            "resolution" => Ok(Self::Resolution),
            "depth" => Ok(Self::Depth),
            other => Err(Error::invalid("sweep axis", format!("{other:?} is not batch-size, resolution or depth"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: usize,
    pub pipeline: String,
    pub epochs: usize,
    pub test: RegressionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,axis,value,pipeline,epochs,mae,mae_std,r2\n");
        let axis = serde_json::to_value(self.axis).expect("axis serializes");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.index,
                axis.as_str().expect("string"),
                r.value,
                r.pipeline,
                r.epochs,
                r.test.mae,
                r.test.mae_std,
                r.test.r2
            ));
        }
        out
    }
}

/// Configuration with one axis set to `value`.
pub fn sweep_config(base: &ExperimentConfig, axis: SweepAxis, value: usize) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::BatchSize => cfg.training.batch_size = value,
        SweepAxis::Resolution => cfg.set_resolution(value),
        SweepAxis::Depth => cfg.encoder.blocks_per_stage = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and evaluates one configuration per value; rows follow `values`.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[usize], out: Option<&Path>) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::Empty { what: "sweep values".into() });
    }
    let configs = values.iter().map(|&v| sweep_config(base, axis, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (index, (cfg, &value)) in configs.iter().zip(values).enumerate() {
        info!("sweep {axis:?} = {value} ({}/{})", index + 1, values.len());
        let prep = Prepared::generate(cfg)?;
        let outcome = train(&prep.data, &cfg.encoder, &cfg.rnc, &cfg.augment, &cfg.training, &RunOptions::default())?;
        let eval = evaluate(&outcome.model, cfg.training.pipeline.as_str(), &prep.test, &cfg.eval)?;
        rows.push(SweepRow {
            index,
            value,
            pipeline: cfg.training.pipeline.to_string(),
            epochs: epochs_run(&outcome.history),
            test: eval.metrics,
        });
    }
    let summary = SweepSummary { axis, rows };
    if let Some(dir) = out {
        atomic_write(&dir.join("sweep.csv"), summary.to_csv().as_bytes())?;
        crate::util::write_json(&dir.join("sweep.json"), &summary)?;
    }
    Ok(summary)
}

pub fn epochs_run(history: &[HistoryRow]) -> usize {
    history.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_perfect_for_one_dimensional_age_embeddings() {
        let ages = [20.0, 31.0, 45.0, 60.0, 77.0];
        let emb: Vec<Vec<f32>> = ages.iter().map(|&a| vec![a as f32 / 10.0, 1.0]).collect();
        assert!((embedding_order(&emb, &ages).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_model_has_nonzero_head() {
        let m = control_model(&EncoderConfig::default(), 3).unwrap();
        assert!(!m.trained);
        assert!(m.head().weight.iter().any(|&w| w != 0.0));
        assert_eq!(control_model(&EncoderConfig::default(), 3).unwrap().head(), m.head());
    }

    #[test]
    fn sweep_axis_parsing_and_config() {
        assert_eq!("batch-size".parse::<SweepAxis>().unwrap(), SweepAxis::BatchSize);
        assert!("width".parse::<SweepAxis>().is_err());
        let base = ExperimentConfig::default();
        assert_eq!(sweep_config(&base, SweepAxis::Resolution, 16).unwrap().encoder.input_dims, [16; 3]);
        assert!(sweep_config(&base, SweepAxis::BatchSize, 1).is_err());
    }
}
